"""Training, checkpointing, reverse-diffusion sampling and evaluation."""

from __future__ import annotations

import csv
import json
import logging
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable, Sequence

import numpy as np
import torch

from . import diffusion
from .backbone import CrackSegDiff, ModelConfig
from .data import FusedSample, make_split, stack_batch, view_channels
from .errors import ConfigError, TrainingError
from .losses import LossConfig, dice_bce_loss, mse_loss, to_prob, total_loss
from .metrics import MetricsReport, binarize, config_digest, evaluate_masks
from .store import ParameterStore, read_blob, write_blob

log = logging.getLogger(__name__)

FORMAT_VERSION = 1
LOG_FIELDS = ("step", "t_mean", "lr", "alpha", "beta", "L1", "L2", "L_total", "wall_ms")


@dataclass
class TrainConfig:
    lr: float = 1e-4
    batch_size: int = 8
    weight_decay: float = 1e-4
    max_steps: int = 2000
    T: int = 1000
    beta_start: float = 1e-4
    beta_end: float = 0.02
    seed: int = 0
    modality: str = "fused"
    eval_every: int = 0
    eval_samples: int = 8
    sample_steps: int = 100
    manifest: str | None = None
    n_train: int | None = None
    n_test: int | None = None
    split_seed: int = 0
    model: ModelConfig = field(default_factory=ModelConfig)
    loss: LossConfig = field(default_factory=LossConfig)

    def __post_init__(self):
        if isinstance(self.model, dict):
            self.model = ModelConfig.from_dict(self.model)
        if isinstance(self.loss, dict):
            self.loss = LossConfig(**self.loss)
        # the modality fixes how many image channels the network sees
        self.model.image_channels = view_channels(self.modality)
        if self.lr <= 0 or self.batch_size < 1 or self.max_steps < 0:
            raise ConfigError("lr and batch_size must be positive and max_steps >= 0")
        if not 1 <= self.sample_steps <= self.T:
            raise ConfigError(f"sample_steps must lie in [1, T={self.T}]")

    def schedule(self) -> diffusion.NoiseSchedule:
        return diffusion.build_schedule(self.T, self.beta_start, self.beta_end)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["model"] = self.model.to_dict()
        d["loss"] = self.loss.to_dict()
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        unknown = set(d) - set(cls.__dataclass_fields__)
        if unknown:
            raise ConfigError(f"unknown train config keys: {sorted(unknown)}")
        d = dict(d)
        if "loss" in d and isinstance(d["loss"], dict):
            extra = set(d["loss"]) - set(LossConfig.__dataclass_fields__)
            if extra:
                raise ConfigError(f"unknown loss config keys: {sorted(extra)}")
        return cls(**d)


def build_model(cfg: ModelConfig, seed: int) -> CrackSegDiff:
    with torch.random.fork_rng(devices=[]):
        torch.manual_seed(seed)
        return CrackSegDiff(cfg)


def select_training_samples(cfg: TrainConfig, samples: Sequence[FusedSample]) -> list[FusedSample]:
    if cfg.n_train is None:
        return list(samples)
    by_id = {s.id: s for s in samples}
    train_ids, _ = make_split(by_id, cfg.split_seed, cfg.n_train, cfg.n_test or 0)
    return [by_id[i] for i in sorted(train_ids)]


# -- checkpoints -------------------------------------------------------------


@dataclass
class Checkpoint:
    config: TrainConfig
    params: ParameterStore
    global_step: int = 0
    optimizer: dict | None = None
    rng_state: bytes | None = None
    format_version: int = FORMAT_VERSION

    @property
    def schedule(self) -> diffusion.NoiseSchedule:
        return self.config.schedule()

    def build_model(self) -> CrackSegDiff:
        model = CrackSegDiff(self.config.model)
        self.params.load_into(model)
        model.eval()
        return model

    def save(self, directory) -> Path:
        directory = Path(directory)
        sched = self.schedule
        meta = {
            "format_version": self.format_version,
            "config": self.config.to_dict(),
            "global_step": self.global_step,
            "schedule": {"T": sched.T, "beta_start": self.config.beta_start, "beta_end": self.config.beta_end},
        }
        if self.optimizer is not None:
            arrays = {}
            for name in self.params:
                if name in self.optimizer["exp_avg"]:
                    arrays[f"exp_avg/{name}"] = self.optimizer["exp_avg"][name]
                    arrays[f"exp_avg_sq/{name}"] = self.optimizer["exp_avg_sq"][name]
            directory.mkdir(parents=True, exist_ok=True)
            meta["optimizer"] = {
                "steps": self.optimizer["steps"],
                "entries": write_blob(directory / "optim.bin", arrays),
            }
        if self.rng_state is not None:
            directory.mkdir(parents=True, exist_ok=True)
            (directory / "rng.bin").write_bytes(self.rng_state)
            meta["rng_state"] = "rng.bin"
        self.params.save(directory, meta)
        np.asarray(sched.beta, dtype="<f8").tofile(directory / "schedule.bin")
        return directory

    @classmethod
    def load(cls, directory, expect: ModelConfig | None = None) -> "Checkpoint":
        directory = Path(directory)
        if not (directory / "header.json").is_file():
            raise ConfigError(f"no checkpoint header in {directory}")
        params, header = ParameterStore.load(directory)
        if header.get("format_version") != FORMAT_VERSION:
            raise ConfigError(f"unsupported checkpoint format {header.get('format_version')!r}")
        config = TrainConfig.from_dict(header["config"])
        if expect is not None and expect.to_dict() != config.model.to_dict():
            raise ConfigError("checkpoint model config does not match the requested config")
        stored = np.fromfile(directory / "schedule.bin", dtype="<f8")
        if not np.array_equal(stored, config.schedule().beta):
            raise ConfigError("stored noise schedule does not match the checkpoint config")
        optimizer = None
        if "optimizer" in header:
            arrays = read_blob(directory / "optim.bin", header["optimizer"]["entries"])
            optimizer = {
                "steps": header["optimizer"]["steps"],
                "exp_avg": {k.split("/", 1)[1]: v for k, v in arrays.items() if k.startswith("exp_avg/")},
                "exp_avg_sq": {k.split("/", 1)[1]: v for k, v in arrays.items() if k.startswith("exp_avg_sq/")},
            }
        rng_state = (directory / "rng.bin").read_bytes() if "rng_state" in header else None
        return cls(config, params, header["global_step"], optimizer, rng_state, header["format_version"])


# -- training ----------------------------------------------------------------


class Trainer:
    """Owns the model, optimiser and random stream of one training run."""

    def __init__(self, cfg: TrainConfig, samples: Sequence[FusedSample], out_dir=None, checkpoint: Checkpoint | None = None):
        self.cfg = cfg
        self.samples = select_training_samples(cfg, samples)
        if not self.samples:
            raise ConfigError("training set is empty")
        h, w = self.samples[0].mask.shape
        if (h, w) != cfg.model.image_size:
            raise ConfigError(f"samples are {h}x{w} but the model expects {cfg.model.image_size}")
        self.images, self.masks = stack_batch(self.samples, cfg.modality)
        self.x0 = self.masks * 2 - 1
        self.sched = cfg.schedule()
        self.out_dir = Path(out_dir) if out_dir else None

        self.model = build_model(cfg.model, cfg.seed)
        self.optimizer = torch.optim.AdamW(self.model.parameters(), lr=cfg.lr, weight_decay=cfg.weight_decay)
        self.gen = torch.Generator().manual_seed(cfg.seed)
        self.step_count = 0
        if checkpoint is not None:
            self._restore(checkpoint)
        self.model.train()

    def _restore(self, ckpt: Checkpoint):
        if ckpt.config.model.to_dict() != self.cfg.model.to_dict():
            raise ConfigError("checkpoint model config does not match the training config")
        ckpt.params.load_into(self.model)
        self.step_count = ckpt.global_step
        if ckpt.rng_state is not None:
            self.gen.set_state(torch.frombuffer(bytearray(ckpt.rng_state), dtype=torch.uint8))
        if ckpt.optimizer is not None:
            named = dict(self.model.named_parameters())
            for name, p in named.items():
                if name not in ckpt.optimizer["exp_avg"]:
                    continue
                self.optimizer.state[p] = {
                    "step": torch.tensor(float(ckpt.optimizer["steps"][name])),
                    "exp_avg": torch.from_numpy(ckpt.optimizer["exp_avg"][name].copy()),
                    "exp_avg_sq": torch.from_numpy(ckpt.optimizer["exp_avg_sq"][name].copy()),
                }

    def checkpoint(self) -> Checkpoint:
        names = {p: n for n, p in self.model.named_parameters()}
        steps, m, v = {}, {}, {}
        for p, st in self.optimizer.state.items():
            n = names[p]
            steps[n] = float(st["step"])
            m[n] = st["exp_avg"].detach().numpy().copy()
            v[n] = st["exp_avg_sq"].detach().numpy().copy()
        return Checkpoint(
            config=self.cfg,
            params=ParameterStore.from_module(self.model),
            global_step=self.step_count,
            optimizer={"steps": steps, "exp_avg": m, "exp_avg_sq": v},
            rng_state=bytes(self.gen.get_state().numpy().tobytes()),
        )

    def _batch_indices(self) -> torch.Tensor:
        n, b = len(self.samples), self.cfg.batch_size
        if n >= b:
            return torch.randperm(n, generator=self.gen)[:b]
        return torch.randint(0, n, (b,), generator=self.gen)

    def losses(self, idx: torch.Tensor, t: torch.Tensor, eps: torch.Tensor):
        image, mask, x0 = self.images[idx], self.masks[idx], self.x0[idx]
        x_t = diffusion.q_sample(x0, t, eps, self.sched)
        x0_hat = self.model(image, x_t, t)
        if not torch.isfinite(x0_hat).all():
            nan = torch.tensor(float("nan"))
            return nan, nan, nan
        l1 = mse_loss(x0_hat, x0)
        l2 = dice_bce_loss(to_prob(x0_hat, self.cfg.loss), mask, self.cfg.loss)
        return l1, l2, total_loss(l1, l2, self.cfg.loss)

    def step(self) -> dict:
        started = time.perf_counter()
        idx = self._batch_indices()
        t = torch.randint(1, self.cfg.T + 1, (len(idx),), generator=self.gen)
        eps = torch.randn(self.x0[idx].shape, generator=self.gen)
        l1, l2, loss = self.losses(idx, t, eps)
        if not torch.isfinite(loss):
            self._abort(l1, l2, loss, t)
        self.optimizer.zero_grad(set_to_none=True)
        loss.backward()
        self.optimizer.step()
        self.step_count += 1
        return {
            "step": self.step_count,
            "t_mean": float(t.double().mean()),
            "lr": self.optimizer.param_groups[0]["lr"],
            "alpha": self.cfg.loss.alpha,
            "beta": self.cfg.loss.beta,
            "L1": float(l1.detach()),
            "L2": float(l2.detach()),
            "L_total": float(loss.detach()),
            "wall_ms": round((time.perf_counter() - started) * 1000, 3),
        }

    def _abort(self, l1, l2, loss, t):
        where = ""
        if self.out_dir is not None:
            snap = self.checkpoint().save(self.out_dir / "abort_snapshot")
            where = f"; snapshot written to {snap}"
        raise TrainingError(
            f"non-finite loss at step {self.step_count + 1}: L1={float(l1)}, L2={float(l2)}, "
            f"L_total={float(loss)}, t={t.tolist()}{where}"
        )

    def run(self, steps: int | None = None, log_path=None, eval_log_path=None) -> list[dict]:
        steps = self.cfg.max_steps - self.step_count if steps is None else steps
        records = []
        log_fh = _open_log(log_path, LOG_FIELDS) if log_path else None
        try:
            for _ in range(steps):
                rec = self.step()
                records.append(rec)
                if log_fh is not None:
                    log_fh.write(",".join(_fmt(rec[k]) for k in LOG_FIELDS) + "\n")
                    log_fh.flush()
                if self.cfg.eval_every and self.step_count % self.cfg.eval_every == 0:
                    self._periodic_eval(eval_log_path)
        finally:
            if log_fh is not None:
                log_fh.close()
        return records

    def _periodic_eval(self, eval_log_path):
        subset = self.samples[: self.cfg.eval_samples]
        self.model.eval()
        probs = predict(self.model, self.sched, subset, self.cfg.modality, self.cfg.sample_steps, seed=self.cfg.seed)
        self.model.train()
        agg = evaluate(subset, probs).aggregate()
        log.info("step %d: train-subset iou %.4f f1 %.4f", self.step_count, agg["iou"], agg["f1"])
        if eval_log_path:
            fields = ("step", "f1", "iou", "bf_score")
            with _open_log(eval_log_path, fields) as fh:
                fh.write(",".join(_fmt(v) for v in (self.step_count, agg["f1"], agg["iou"], agg["bf_score"])) + "\n")


def _fmt(v) -> str:
    return repr(v) if isinstance(v, float) else str(v)


def _open_log(path, fields):
    path = Path(path)
    fresh = not path.exists() or path.stat().st_size == 0
    fh = open(path, "a", newline="")
    if fresh:
        fh.write(",".join(fields) + "\n")
    return fh


def train(cfg: TrainConfig, samples: Sequence[FusedSample], out_dir=None, resume: Checkpoint | None = None) -> Checkpoint:
    """Train to ``cfg.max_steps``; with ``out_dir`` also write the log and checkpoint."""
    trainer = Trainer(cfg, samples, out_dir, resume)
    log_path = eval_path = None
    if out_dir is not None:
        out_dir = Path(out_dir)
        out_dir.mkdir(parents=True, exist_ok=True)
        log_path, eval_path = out_dir / "train_log.csv", out_dir / "eval_log.csv"
    trainer.run(log_path=log_path, eval_log_path=eval_path)
    ckpt = trainer.checkpoint()
    if out_dir is not None:
        ckpt.save(out_dir / "checkpoint")
    return ckpt


def read_log(path) -> list[dict]:
    with open(path, newline="") as fh:
        return list(csv.DictReader(fh))


# -- sampling ----------------------------------------------------------------

Denoiser = Callable[[torch.Tensor, torch.Tensor, int], torch.Tensor]


def member_seed(seed: int, member: int) -> int:
    return int(np.random.SeedSequence([seed, member]).generate_state(1)[0])


@torch.no_grad()
def sample_chain(denoiser: Denoiser, sched: diffusion.NoiseSchedule, image: torch.Tensor, classes: int,
                 steps: int, generator: torch.Generator) -> torch.Tensor:
    """One ancestral reverse-diffusion run; returns the final ``x_0`` in [-1, 1]."""
    sub, timesteps = diffusion.respace(sched, steps)
    shape = (image.shape[0], classes, *image.shape[-2:])
    x = torch.randn(shape, generator=generator, dtype=image.dtype)
    for k in range(sub.T, 0, -1):
        x0_hat = denoiser(image, x, int(timesteps[k - 1]))
        eps = diffusion.x0_to_eps(x, k, x0_hat, sub)
        z = torch.randn(shape, generator=generator, dtype=image.dtype) if k > 1 else torch.zeros(shape, dtype=image.dtype)
        x = diffusion.reverse_step(x, eps, k, z, sub)
    return x.clamp(-1, 1)


@torch.no_grad()
def sample(denoiser: Denoiser, sched: diffusion.NoiseSchedule, image: torch.Tensor, steps: int,
           ensemble: int = 1, seed: int = 0, classes: int = 1) -> tuple[np.ndarray, np.ndarray]:
    """Probability map (mean over ``ensemble`` runs) and its 0.5-thresholded mask."""
    if ensemble < 1:
        raise ConfigError("ensemble must be >= 1")
    if steps > sched.T:
        raise ConfigError(f"steps ({steps}) exceeds T ({sched.T})")
    total = None
    for e in range(ensemble):
        gen = torch.Generator().manual_seed(member_seed(seed, e))
        x0 = sample_chain(denoiser, sched, image, classes, steps, gen)
        prob = ((x0 + 1) / 2).double().numpy()
        total = prob if total is None else total + prob
    prob = total / ensemble
    return prob, binarize(prob)


def predict(model: CrackSegDiff, sched: diffusion.NoiseSchedule, samples: Sequence[FusedSample], modality: str,
            steps: int, ensemble: int = 1, seed: int = 0, batch_size: int = 50) -> list[np.ndarray]:
    """Per-sample ``H x W`` foreground probability; batches are seeded by position."""
    was_training = model.training
    model.eval()
    out = []
    try:
        for b, start in enumerate(range(0, len(samples), batch_size)):
            chunk = samples[start : start + batch_size]
            image, _ = stack_batch(chunk, modality)
            if tuple(image.shape[-2:]) != model.cfg.image_size:
                raise ConfigError(f"image size {tuple(image.shape[-2:])} incompatible with checkpoint {model.cfg.image_size}")
            prob, _ = sample(model, sched, image, steps, ensemble, member_seed(seed, 1000 + b), model.cfg.classes)
            out.extend(p[0].astype(np.float32) for p in prob)
    finally:
        model.train(was_training)
    return out


def evaluate(samples: Sequence[FusedSample], probs: Sequence[np.ndarray], theta: float = 2.0,
             meta: dict | None = None) -> MetricsReport:
    if not samples:
        raise ConfigError("evaluation set is empty")
    preds = [binarize(p) for p in probs]
    return evaluate_masks([s.id for s in samples], preds, [s.mask for s in samples], theta, meta)


def evaluate_checkpoint(ckpt: Checkpoint, samples: Sequence[FusedSample], steps: int | None = None,
                        theta: float = 2.0, seed: int = 0, ensemble: int = 1, modality: str | None = None,
                        out_dir=None, meta: dict | None = None) -> MetricsReport:
    """Sample once per image, score against ground truth, optionally write artifacts."""
    cfg = ckpt.config
    modality = modality or cfg.modality
    if modality != cfg.modality:
        raise ConfigError(f"checkpoint was trained on {cfg.modality!r} images, not {modality!r}")
    steps = steps or cfg.sample_steps
    model = ckpt.build_model()
    probs = predict(model, ckpt.schedule, samples, modality, steps, ensemble, seed)
    meta = {
        "modality": modality,
        "sample_steps": steps,
        "ensemble": ensemble,
        "threshold": 0.5,
        "seed": seed,
        "global_step": ckpt.global_step,
        "config_digest": config_digest(cfg.to_dict()),
        "ablation": {"use_cfm": cfg.model.use_cfm, "use_sfcm": cfg.model.use_sfcm},
        **(meta or {}),
    }
    report = evaluate(samples, probs, theta, meta)
    if out_dir is not None:
        out_dir = Path(out_dir)
        report.write(out_dir)
        save_predictions(out_dir / "pred", samples, probs)
    return report


def save_predictions(directory, samples, probs):
    from PIL import Image

    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    for s, p in zip(samples, probs):
        Image.fromarray(np.round(np.clip(p, 0, 1) * 65535).astype(np.uint16)).save(directory / f"{s.id}_prob.png")
        Image.fromarray(binarize(p).astype(np.uint8) * 255).save(directory / f"{s.id}_mask.png")


def dump_json(path, obj):
    Path(path).write_text(json.dumps(obj, indent=2, sort_keys=True) + "\n")
