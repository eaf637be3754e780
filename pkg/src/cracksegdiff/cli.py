"""Command-line entry point: ``cracksegdiff {synth,train,sample,eval,report}``.

Failures exit with status 1 after printing one line to stderr::

    error: <category>: <message>

Bad flags print usage and exit with status 2 (argparse's convention).
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from pathlib import Path

import numpy as np

from .data import SynthConfig, load_find_dataset, make_split, synth_generate, write_dataset
from .errors import ConfigError, CrackSegDiffError
from .experiments import ablation_label
from .metrics import SCORE_NAMES, MetricsReport, boundary
from .pipeline import Checkpoint, TrainConfig, dump_json, evaluate_checkpoint, predict, save_predictions, train

OUT_ENV = "CRACKSEGDIFF_OUT"
CONFIG_ECHO = "config.json"

log = logging.getLogger("cracksegdiff")


# -- config resolution -------------------------------------------------------


def parse_override(text: str) -> tuple[list[str], object]:
    """``a.b=value``; the value is read as JSON when possible, else as a string."""
    key, sep, raw = text.partition("=")
    if not sep or not key:
        raise ConfigError(f"override {text!r} is not of the form key=value")
    try:
        value = json.loads(raw)
    except json.JSONDecodeError:
        value = raw
    return key.split("."), value


def _check_type(key: str, old, new):
    if old is None:
        return new
    if isinstance(old, bool):
        ok = isinstance(new, bool)
    elif isinstance(old, int):
        ok = isinstance(new, int) and not isinstance(new, bool)
    elif isinstance(old, float):
        ok = isinstance(new, (int, float)) and not isinstance(new, bool)
        new = float(new) if ok else new
    else:
        ok = isinstance(new, type(old))
    if not ok or isinstance(old, dict):
        raise ConfigError(f"{key} expects a {type(old).__name__}, got {json.dumps(new)}")
    return new


def apply_overrides(base: dict, overrides) -> dict:
    out = json.loads(json.dumps(base))
    for text in overrides or ():
        path, value = parse_override(text)
        node = out
        for i, part in enumerate(path):
            if not isinstance(node, dict) or part not in node:
                raise ConfigError(f"unknown config key {'.'.join(path[: i + 1])!r}")
            if i == len(path) - 1:
                node[part] = _check_type(".".join(path), node[part], value)
            else:
                node = node[part]
    return out


def load_config_file(path) -> dict:
    if path is None:
        return {}
    path = Path(path)
    if not path.is_file():
        raise ConfigError(f"config file not found: {path}")
    try:
        data = json.loads(path.read_text())
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path} is not valid JSON: {exc}") from exc
    if not isinstance(data, dict):
        raise ConfigError(f"{path} must hold a JSON object")
    return data


def resolve_train_config(path=None, overrides=()) -> TrainConfig:
    base = TrainConfig.from_dict(load_config_file(path)).to_dict()
    return TrainConfig.from_dict(apply_overrides(base, overrides))


def resolve_synth_config(path=None, overrides=()) -> SynthConfig:
    base = SynthConfig.from_dict(load_config_file(path)).to_dict()
    return SynthConfig.from_dict(apply_overrides(base, overrides))


def output_dir(args) -> Path:
    if args.out:
        out = Path(args.out)
    else:
        out = Path(os.environ.get(OUT_ENV, "runs")) / args.command
    out.mkdir(parents=True, exist_ok=True)
    return out


# -- subcommands -------------------------------------------------------------


def cmd_synth(args) -> int:
    cfg = resolve_synth_config(args.config, args.set)
    out = output_dir(args)
    manifest = write_dataset(synth_generate(cfg, args.n), out)
    dump_json(out / CONFIG_ECHO, {"command": "synth", "n": args.n, "synth": cfg.to_dict()})
    print(manifest)
    return 0


def cmd_train(args) -> int:
    cfg = resolve_train_config(args.config, args.set)
    if args.data:
        cfg.manifest = str(Path(args.data).resolve())
    if not cfg.manifest:
        raise ConfigError("train needs a dataset: pass --data or set 'manifest' in the config")
    out = output_dir(args)
    resume = Checkpoint.load(args.resume, expect=cfg.model) if args.resume else None
    samples = load_find_dataset(cfg.manifest, cfg.modality)
    dump_json(out / CONFIG_ECHO, {"command": "train", "resume": args.resume, "train": cfg.to_dict()})
    ckpt = train(cfg, samples, out, resume)
    print(out / "checkpoint")
    log.info("trained to step %d", ckpt.global_step)
    return 0


def _eval_samples(ckpt: Checkpoint, manifest: str, split: str, ids):
    samples = load_find_dataset(manifest, ckpt.config.modality)
    cfg = ckpt.config
    if split == "auto":
        split = "test" if cfg.n_train is not None and cfg.n_test else "all"
    if split != "all":
        if cfg.n_train is None:
            raise ConfigError(f"split {split!r} requested but the checkpoint was trained without a split")
        train_ids, test_ids = make_split([s.id for s in samples], cfg.split_seed, cfg.n_train, cfg.n_test or 0)
        keep = set(test_ids if split == "test" else train_ids)
        samples = [s for s in samples if s.id in keep]
    if ids:
        wanted = set(ids)
        missing = wanted - {s.id for s in samples}
        if missing:
            raise ConfigError(f"ids not in the selected data: {sorted(missing)}")
        samples = [s for s in samples if s.id in wanted]
    if not samples:
        raise ConfigError("no samples selected")
    return sorted(samples, key=lambda s: s.id), split


def cmd_sample(args) -> int:
    ckpt = Checkpoint.load(args.ckpt)
    samples, split = _eval_samples(ckpt, args.data, args.split, args.ids)
    out = output_dir(args)
    steps = args.steps or ckpt.config.sample_steps
    probs = predict(ckpt.build_model(), ckpt.schedule, samples, ckpt.config.modality, steps, args.ensemble, args.seed)
    save_predictions(out / "pred", samples, probs)
    dump_json(out / CONFIG_ECHO, {
        "command": "sample", "ckpt": str(args.ckpt), "data": str(args.data), "split": split,
        "steps": steps, "ensemble": args.ensemble, "seed": args.seed, "train": ckpt.config.to_dict(),
    })
    print(out / "pred")
    return 0


def cmd_eval(args) -> int:
    ckpt = Checkpoint.load(args.ckpt)
    if args.modality and args.modality != ckpt.config.modality:
        raise ConfigError(f"checkpoint was trained on {ckpt.config.modality!r} images, not {args.modality!r}")
    samples, split = _eval_samples(ckpt, args.data, args.split, args.ids)
    out = output_dir(args)
    meta = {"data": str(Path(args.data).resolve()), "split": split}
    report = evaluate_checkpoint(ckpt, samples, args.steps, args.theta, args.seed, args.ensemble, out_dir=out, meta=meta)
    dump_json(out / CONFIG_ECHO, {
        "command": "eval", "ckpt": str(args.ckpt), "theta": args.theta, **report.meta, "train": ckpt.config.to_dict(),
    })
    agg = report.aggregate()
    print(" ".join(f"{k}={agg[k]:.4f}" for k in SCORE_NAMES))
    return 0


# -- report ------------------------------------------------------------------


def _auto_labels(reports) -> list[str]:
    mods = [r.meta.get("modality", "?") for r in reports]
    abl = [ablation_label(**r.meta["ablation"]) if "ablation" in r.meta else "?" for r in reports]
    vary_mod, vary_abl = len(set(mods)) > 1, len(set(abl)) > 1
    labels = []
    for m, a in zip(mods, abl):
        if vary_mod and vary_abl:
            labels.append(f"{m} {a}")
        elif vary_abl:
            labels.append(a)
        else:
            labels.append(m)
    if len(set(labels)) < len(labels):
        labels = [f"{lab} #{i + 1}" for i, lab in enumerate(labels)]
    return labels


def comparison_table(labels, reports) -> tuple[str, str]:
    """CSV and Markdown renderings; scores as percentages."""
    cols = ["run", "modality", "use_sfcm", "use_cfm", "n", "sample_steps", *SCORE_NAMES]
    rows = []
    for label, r in zip(labels, reports):
        agg = r.aggregate()
        abl = r.meta.get("ablation", {})
        rows.append([
            label, r.meta.get("modality", ""), abl.get("use_sfcm", ""), abl.get("use_cfm", ""),
            r.count, r.meta.get("sample_steps", ""), *(f"{100 * agg[k]:.2f}" for k in SCORE_NAMES),
        ])
    csv_text = "\n".join(",".join(str(v) for v in row) for row in [cols, *rows]) + "\n"
    md = ["| " + " | ".join(cols) + " |", "|" + "---|" * len(cols)]
    md += ["| " + " | ".join(str(v) for v in row) + " |" for row in rows]
    return csv_text, "\n".join(md) + "\n"


def bar_chart(labels, reports, path):
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    shown = ("f1", "iou", "bf_score")
    width = 0.8 / len(reports)
    fig, ax = plt.subplots(figsize=(1.6 + 1.4 * len(shown) * max(1, len(reports)) / 2, 3.2))
    for i, (label, r) in enumerate(zip(labels, reports)):
        agg = r.aggregate()
        xs = np.arange(len(shown)) + (i - (len(reports) - 1) / 2) * width
        ax.bar(xs, [100 * agg[k] for k in shown], width, label=label)
    ax.set_xticks(np.arange(len(shown)), ["F1", "IoU", "BF"])
    ax.set_ylabel("score (%)")
    ax.set_ylim(0, 100)
    ax.legend(fontsize="small", loc="lower right")
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)


def overlay(intensity: np.ndarray, pred: np.ndarray, gt: np.ndarray) -> np.ndarray:
    """Grayscale image with the predicted boundary in red and the true one in green."""
    base = (np.clip(intensity, 0, 1) * 255).astype(np.uint8)
    rgb = np.stack([base] * 3, axis=-1)
    rgb[boundary(gt)] = (0, 220, 0)
    rgb[boundary(pred)] = (235, 30, 30)
    return rgb


def write_overlays(label, run_dir: Path, report: MetricsReport, out: Path, count: int) -> int:
    from PIL import Image

    data = report.meta.get("data")
    pred_dir = run_dir / "pred"
    if not data or not pred_dir.is_dir() or count <= 0:
        return 0
    wanted = [r["id"] for r in report.rows[:count]]
    samples = {s.id: s for s in load_find_dataset(data) if s.id in set(wanted)}
    target = out / "overlays" / label.replace(" ", "_").replace("/", "_")
    target.mkdir(parents=True, exist_ok=True)
    written = 0
    for sid in wanted:
        mask_png = pred_dir / f"{sid}_mask.png"
        if sid not in samples or not mask_png.is_file():
            continue
        with Image.open(mask_png) as im:
            pred = np.array(im) > 0
        s = samples[sid]
        Image.fromarray(overlay(s.intensity, pred, s.mask.astype(bool))).save(target / f"{sid}.png")
        written += 1
    return written


def cmd_report(args) -> int:
    run_dirs = [Path(p) for p in args.runs]
    reports = []
    for d in run_dirs:
        if not (d / "metrics.json").is_file():
            raise ConfigError(f"{d} holds no metrics.json (run 'eval' first)")
        reports.append(MetricsReport.read(d))
    if args.labels and len(args.labels) != len(run_dirs):
        raise ConfigError(f"{len(args.labels)} labels given for {len(run_dirs)} runs")
    labels = args.labels or _auto_labels(reports)
    out = output_dir(args)
    csv_text, md_text = comparison_table(labels, reports)
    (out / "table.csv").write_text(csv_text)
    (out / "table.md").write_text(md_text)
    bar_chart(labels, reports, out / "metrics.png")
    n_overlays = sum(write_overlays(lab, d, r, out, args.overlays) for lab, d, r in zip(labels, run_dirs, reports))
    dump_json(out / CONFIG_ECHO, {"command": "report", "runs": [str(d) for d in run_dirs], "labels": labels,
                                  "overlays": args.overlays})
    sys.stdout.write(md_text)
    log.info("wrote %d overlays", n_overlays)
    return 0


# -- argument parsing --------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="cracksegdiff", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p, configurable=True):
        p.add_argument("--out", help=f"output directory (default: ${OUT_ENV}/<command> or runs/<command>)")
        if configurable:
            p.add_argument("--config", help="JSON config file")
            p.add_argument("--set", action="append", default=[], metavar="KEY=VALUE",
                           help="dotted-key override, value parsed as JSON (repeatable)")

    p = sub.add_parser("synth", help="generate a synthetic fused crack dataset")
    common(p)
    p.add_argument("--n", type=int, default=200, help="number of samples")
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("train", help="train a model and write a checkpoint")
    common(p)
    p.add_argument("--data", help="dataset manifest CSV (overrides 'manifest' in the config)")
    p.add_argument("--resume", help="checkpoint directory to resume from")
    p.set_defaults(func=cmd_train)

    for name, func, help_text in (("sample", cmd_sample, "write predicted probability maps and masks"),
                                  ("eval", cmd_eval, "sample and score against ground truth")):
        p = sub.add_parser(name, help=help_text)
        common(p, configurable=False)
        p.add_argument("--ckpt", required=True, help="checkpoint directory")
        p.add_argument("--data", required=True, help="dataset manifest CSV")
        p.add_argument("--split", choices=("auto", "all", "train", "test"), default="auto",
                       help="which ids to use (auto: the test split when the run defined one)")
        p.add_argument("--ids", nargs="+", help="restrict to these sample ids")
        p.add_argument("--steps", type=int, help="reverse-diffusion steps (default: the config's sample_steps)")
        p.add_argument("--ensemble", type=int, default=1)
        p.add_argument("--seed", type=int, default=0)
        if name == "eval":
            p.add_argument("--modality", choices=("intensity", "range", "fused"),
                           help="assert the checkpoint's input modality")
            p.add_argument("--theta", type=float, default=2.0, help="BF-score distance tolerance in pixels")
        p.set_defaults(func=func)

    p = sub.add_parser("report", help="compare evaluation runs: table, bar chart, overlays")
    common(p, configurable=False)
    p.add_argument("runs", nargs="+", help="eval output directories")
    p.add_argument("--labels", nargs="+", help="row labels (default: derived from modality and ablation flags)")
    p.add_argument("--overlays", type=int, default=4, help="overlay images per run")
    p.set_defaults(func=cmd_report)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    try:
        return args.func(args)
    except CrackSegDiffError as exc:
        category, message = exc.category, str(exc)
    except (OSError, ValueError) as exc:
        category, message = "runtime", str(exc)
    print(f"error: {category}: {' '.join(message.split())}", file=sys.stderr)
    return 1


if __name__ == "__main__":
    sys.exit(main())
