"""Fused grayscale/range crack data: manifest ingestion and a synthetic generator.

A manifest is a UTF-8 CSV with header ``id,intensity_path,range_path,mask_path``;
relative paths resolve against the manifest's directory.  Images are
single-channel PNGs normalised by their dtype maximum (255 or 65535); masks
may be stored as 0/1 or 0/255.
"""

from __future__ import annotations

import csv
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np
import torch
from PIL import Image
from scipy import ndimage

from .errors import ConfigError, IngestionError

MODALITIES = ("intensity", "range", "fused")
MANIFEST_FIELDS = ("id", "intensity_path", "range_path", "mask_path")


def view_channels(modality: str) -> int:
    if modality not in MODALITIES:
        raise ConfigError(f"modality must be one of {MODALITIES}, got {modality!r}")
    return 2 if modality == "fused" else 1


@dataclass
class FusedSample:
    id: str
    intensity: np.ndarray
    range: np.ndarray
    mask: np.ndarray
    modality_view: str = "fused"

    def __post_init__(self):
        if not (self.intensity.shape == self.range.shape == self.mask.shape):
            raise IngestionError(
                f"{self.id}: intensity {self.intensity.shape}, range {self.range.shape} and "
                f"mask {self.mask.shape} differ in size"
            )
        view_channels(self.modality_view)

    def image(self, view: str | None = None) -> np.ndarray:
        """Channel-first float32 image for the requested modality view."""
        view = view or self.modality_view
        if view == "intensity":
            chans = [self.intensity]
        elif view == "range":
            chans = [self.range]
        elif view == "fused":
            chans = [self.intensity, self.range]
        else:
            raise ConfigError(f"unknown modality view {view!r}")
        return np.stack(chans).astype(np.float32)


def stack_batch(samples, view: str | None = None) -> tuple[torch.Tensor, torch.Tensor]:
    """Images ``B x C x H x W`` in [0, 1] and masks ``B x 1 x H x W`` in {0, 1}."""
    images = np.stack([s.image(view) for s in samples])
    masks = np.stack([s.mask for s in samples])[:, None].astype(np.float32)
    return torch.from_numpy(images), torch.from_numpy(masks)


# -- ingestion ---------------------------------------------------------------


def _read_png(path: Path, sid: str) -> np.ndarray:
    if not path.is_file():
        raise IngestionError(f"{sid}: missing file {path}")
    try:
        with Image.open(path) as im:
            arr = np.array(im)
    except OSError as exc:
        raise IngestionError(f"{sid}: unreadable image {path}: {exc}") from exc
    if arr.ndim != 2:
        raise IngestionError(f"{sid}: {path.name} is not single-channel (shape {arr.shape})")
    return arr


def _normalize(arr: np.ndarray, sid: str, path: Path) -> np.ndarray:
    if arr.dtype == np.uint8:
        return arr.astype(np.float64) / 255.0
    if arr.dtype == np.uint16:
        return arr.astype(np.float64) / 65535.0
    if arr.dtype in (np.int32, np.int64) and arr.min() >= 0 and arr.max() <= 65535:
        # Pillow may surface 16-bit PNGs as 32-bit integer mode
        return arr.astype(np.float64) / 65535.0
    raise IngestionError(f"{sid}: unsupported pixel type {arr.dtype} in {path.name}")


def _binary_mask(arr: np.ndarray, sid: str) -> np.ndarray:
    values = set(np.unique(arr).tolist())
    if values <= {0, 1}:
        return arr.astype(np.uint8)
    if values <= {0, 255}:
        return (arr == 255).astype(np.uint8)
    bad = sorted(values - {0, 1, 255})
    raise IngestionError(f"{sid}: mask is not binary (found value {bad[0] if bad else sorted(values)})")


def load_find_dataset(manifest_path, modality: str = "fused") -> list[FusedSample]:
    """Load every row of a manifest without augmentation or filtering."""
    view_channels(modality)
    manifest_path = Path(manifest_path)
    if not manifest_path.is_file():
        raise IngestionError(f"manifest not found: {manifest_path}")
    root = manifest_path.parent
    with open(manifest_path, newline="", encoding="utf-8") as fh:
        reader = csv.DictReader(fh)
        missing = set(MANIFEST_FIELDS) - set(reader.fieldnames or ())
        if missing:
            raise IngestionError(f"manifest {manifest_path} lacks columns {sorted(missing)}")
        rows = list(reader)
    samples = []
    seen = set()
    for row in rows:
        sid = row["id"]
        if sid in seen:
            raise IngestionError(f"{sid}: duplicate id in manifest")
        seen.add(sid)
        paths = {k: root / row[k] for k in MANIFEST_FIELDS[1:]}
        intensity = _normalize(_read_png(paths["intensity_path"], sid), sid, paths["intensity_path"])
        rng_img = _normalize(_read_png(paths["range_path"], sid), sid, paths["range_path"])
        mask = _binary_mask(_read_png(paths["mask_path"], sid), sid)
        samples.append(FusedSample(sid, intensity, rng_img, mask, modality))
    return samples


def write_dataset(samples, out_dir) -> Path:
    """Write PNGs (8-bit intensity and mask, 16-bit range) plus ``manifest.csv``."""
    out_dir = Path(out_dir)
    for sub in ("intensity", "range", "mask"):
        (out_dir / sub).mkdir(parents=True, exist_ok=True)
    manifest = out_dir / "manifest.csv"
    with open(manifest, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(MANIFEST_FIELDS)
        for s in samples:
            rel = {k: f"{k}/{s.id}.png" for k in ("intensity", "range", "mask")}
            Image.fromarray(np.round(s.intensity * 255).astype(np.uint8)).save(out_dir / rel["intensity"])
            Image.fromarray(np.round(s.range * 65535).astype(np.uint16)).save(out_dir / rel["range"])
            Image.fromarray((s.mask > 0).astype(np.uint8) * 255).save(out_dir / rel["mask"])
            writer.writerow([s.id, rel["intensity"], rel["range"], rel["mask"]])
    return manifest


def make_split(ids, seed: int, n_train: int, n_test: int) -> tuple[list[str], list[str]]:
    ids = sorted(ids)
    if n_train < 0 or n_test < 0 or n_train + n_test > len(ids):
        raise ConfigError(
            f"cannot split {len(ids)} ids into {n_train} train + {n_test} test"
        )
    order = np.random.default_rng(seed).permutation(len(ids))
    train = [ids[i] for i in order[:n_train]]
    test = [ids[i] for i in order[n_train : n_train + n_test]]
    return train, test


# -- synthetic generator -----------------------------------------------------


@dataclass
class SynthConfig:
    image_size: tuple[int, int] = (64, 64)
    crack_count: tuple[int, int] = (1, 2)
    crack_width: tuple[float, float] = (2.0, 3.5)
    crack_steps: tuple[int, int] = (25, 45)
    step_length: float = 1.5
    turn_std: float = 0.35
    intensity_contrast: float = 0.3
    depth_contrast: float = 0.3
    intensity_noise: float = 0.04
    range_noise: float = 0.04
    tar_line: bool = True
    groove: bool = True
    shadow: bool = True
    distractor_prob: float = 0.6
    seed: int = 0
    id_prefix: str = "syn"

    def __post_init__(self):
        self.image_size = tuple(int(v) for v in self.image_size)
        for name in ("crack_count", "crack_width", "crack_steps"):
            lo, hi = getattr(self, name)
            if lo > hi:
                raise ConfigError(f"{name} range is empty: ({lo}, {hi})")
            setattr(self, name, (lo, hi))
        h, w = self.image_size
        if h < 8 or w < 8:
            raise ConfigError(f"image_size must be at least 8x8, got {h}x{w}")
        if self.crack_count[0] < 0 or self.crack_width[0] <= 0 or self.crack_steps[0] < 1:
            raise ConfigError("crack_count must be >= 0, crack_width > 0 and crack_steps >= 1")
        for name in ("intensity_contrast", "depth_contrast"):
            v = getattr(self, name)
            if not 0 < v <= 1:
                raise ConfigError(f"{name} must lie in (0, 1], got {v}")
        if self.intensity_noise < 0 or self.range_noise < 0:
            raise ConfigError("noise levels must be >= 0")
        if not 0 <= self.distractor_prob <= 1:
            raise ConfigError("distractor_prob must lie in [0, 1]")

    def to_dict(self) -> dict:
        d = asdict(self)
        for k, v in d.items():
            if isinstance(v, tuple):
                d[k] = list(v)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "SynthConfig":
        unknown = set(d) - set(cls.__dataclass_fields__)
        if unknown:
            raise ConfigError(f"unknown synth config keys: {sorted(unknown)}")
        return cls(**d)


def _random_walk(rng, h: int, w: int, steps: int, step_len: float, turn_std: float) -> np.ndarray:
    margin = min(h, w) // 8
    p = np.array([rng.uniform(margin, h - 1 - margin), rng.uniform(margin, w - 1 - margin)])
    heading = rng.uniform(0, 2 * np.pi)
    pts = [p.copy()]
    for _ in range(steps):
        heading += rng.normal(0, turn_std)
        d = np.array([np.sin(heading), np.cos(heading)])
        q = p + step_len * d
        if not 0 <= q[0] <= h - 1:
            d[0] = -d[0]
        if not 0 <= q[1] <= w - 1:
            d[1] = -d[1]
        heading = np.arctan2(d[0], d[1])
        p = np.clip(p + step_len * d, 0, [h - 1, w - 1])
        pts.append(p.copy())
    return np.array(pts)


def _polyline_distance(pts: np.ndarray, h: int, w: int) -> np.ndarray:
    yy, xx = np.mgrid[0:h, 0:w]
    pix = np.stack([yy.ravel(), xx.ravel()], axis=1).astype(np.float64)
    a, b = pts[:-1], pts[1:]
    ab = b - a
    denom = np.maximum((ab**2).sum(1), 1e-12)
    rel = pix[:, None, :] - a[None]
    u = np.clip((rel * ab[None]).sum(-1) / denom[None], 0, 1)
    closest = a[None] + u[..., None] * ab[None]
    d = np.sqrt(((pix[:, None, :] - closest) ** 2).sum(-1)).min(1)
    return d.reshape(h, w)


def _stroke(rng, cfg: SynthConfig, h: int, w: int, turn_std: float, steps: int):
    """Support and depth profile of one thin stroke."""
    width = rng.uniform(*cfg.crack_width)
    pts = _random_walk(rng, h, w, steps, cfg.step_length, turn_std)
    d = _polyline_distance(pts, h, w)
    half = width / 2
    support = d <= half
    profile = np.where(support, 1 - 0.5 * (d / half) ** 2, 0.0)
    return support, profile


def _smooth_field(rng, h: int, w: int, sigma: float) -> np.ndarray:
    f = ndimage.gaussian_filter(rng.normal(size=(h, w)), sigma, mode="wrap")
    return f / (np.abs(f).max() + 1e-12)


def synth_sample(cfg: SynthConfig, index: int) -> FusedSample:
    rng = np.random.default_rng([cfg.seed, index])
    h, w = cfg.image_size
    intensity = 0.55 + 0.08 * _smooth_field(rng, h, w, 2.0)
    depth = 0.6 + 0.06 * _smooth_field(rng, h, w, 8.0)
    mask = np.zeros((h, w), dtype=bool)

    for _ in range(rng.integers(cfg.crack_count[0], cfg.crack_count[1] + 1)):
        steps = int(rng.integers(cfg.crack_steps[0], cfg.crack_steps[1] + 1))
        support, profile = _stroke(rng, cfg, h, w, cfg.turn_std, steps)
        mask |= support
        intensity -= cfg.intensity_contrast * profile
        depth -= cfg.depth_contrast * profile

    if cfg.tar_line and rng.uniform() < cfg.distractor_prob:
        steps = int(rng.integers(cfg.crack_steps[0], cfg.crack_steps[1] + 1))
        _, profile = _stroke(rng, cfg, h, w, cfg.turn_std, steps)
        intensity -= cfg.intensity_contrast * profile
    if cfg.groove and rng.uniform() < cfg.distractor_prob:
        steps = int(rng.integers(cfg.crack_steps[0], cfg.crack_steps[1] + 1))
        _, profile = _stroke(rng, cfg, h, w, cfg.turn_std / 4, steps)
        depth -= cfg.depth_contrast * profile
    if cfg.shadow and rng.uniform() < cfg.distractor_prob:
        cy, cx = rng.uniform(0, h), rng.uniform(0, w)
        ry, rx = rng.uniform(h / 8, h / 3), rng.uniform(w / 8, w / 3)
        yy, xx = np.mgrid[0:h, 0:w]
        blob = (((yy - cy) / ry) ** 2 + ((xx - cx) / rx) ** 2 <= 1).astype(np.float64)
        intensity -= 0.2 * ndimage.gaussian_filter(blob, 2.0)

    intensity += rng.normal(0, cfg.intensity_noise, size=(h, w))
    depth += rng.normal(0, cfg.range_noise, size=(h, w))
    # quantise to the on-disk bit depths so a write/read roundtrip is lossless
    intensity = np.round(np.clip(intensity, 0, 1) * 255) / 255
    depth = np.round(np.clip(depth, 0, 1) * 65535) / 65535
    return FusedSample(f"{cfg.id_prefix}{index:05d}", intensity, depth, mask.astype(np.uint8))


def synth_generate(cfg: SynthConfig, n: int, start: int = 0) -> list[FusedSample]:
    """``n`` samples; sample ``k`` depends only on ``(cfg, start + k)``."""
    if n < 1:
        raise ConfigError(f"n must be >= 1, got {n}")
    return [synth_sample(cfg, start + k) for k in range(n)]
