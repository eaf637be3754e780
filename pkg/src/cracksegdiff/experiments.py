"""Desk-scale end-to-end experiments shared by ``scripts/`` and the acceptance suite."""

from __future__ import annotations

import time
from dataclasses import replace
from pathlib import Path

from .backbone import ModelConfig
from .data import MODALITIES, SynthConfig, synth_generate
from .pipeline import TrainConfig, dump_json, evaluate_checkpoint, train

ABLATION_ROWS = {
    "baseline": {"use_sfcm": False, "use_cfm": False},
    "+SFCM": {"use_sfcm": True, "use_cfm": False},
    "+SFCM+CFM": {"use_sfcm": True, "use_cfm": True},
}


def ablation_label(use_cfm: bool, use_sfcm: bool) -> str:
    for label, flags in ABLATION_ROWS.items():
        if flags == {"use_sfcm": use_sfcm, "use_cfm": use_cfm}:
            return label
    return "+CFM"


def _out(out_dir, *parts):
    return Path(out_dir).joinpath(*parts) if out_dir is not None else None


def overfit(out_dir=None, steps: int = 2000, n: int = 8, seed: int = 0, sample_steps: int = 100,
            synth: SynthConfig | None = None, train_cfg: TrainConfig | None = None) -> dict:
    """Fit ``n`` fused samples and score the model on those same samples."""
    synth = synth or SynthConfig(seed=seed)
    samples = synth_generate(synth, n)
    cfg = train_cfg or TrainConfig(max_steps=steps, seed=seed, sample_steps=sample_steps)
    started = time.perf_counter()
    ckpt = train(cfg, samples, _out(out_dir, "train"))
    trained = time.perf_counter()
    report = evaluate_checkpoint(ckpt, samples, seed=seed, out_dir=_out(out_dir, "eval"))
    finished = time.perf_counter()
    result = {
        "aggregate": report.aggregate(),
        "steps": ckpt.global_step,
        "n_samples": n,
        "sample_steps": cfg.sample_steps,
        "params": ckpt.params.count(),
        "train_seconds": trained - started,
        "total_seconds": finished - started,
    }
    if out_dir is not None:
        dump_json(Path(out_dir) / "result.json", result)
    return result


def fusion_benefit(out_dir=None, steps: int = 1500, n_train: int = 200, n_test: int = 200, seed: int = 0,
                   sample_steps: int = 25, synth: SynthConfig | None = None,
                   model: ModelConfig | None = None) -> dict:
    """Train one model per modality view under an identical budget and seed.

    All three see the same training ids and are scored on the same held-out ids
    with the same sampling seed; only the input channels differ.
    """
    synth = synth or SynthConfig(seed=seed, distractor_prob=0.6)
    train_set = synth_generate(synth, n_train)
    test_set = synth_generate(synth, n_test, start=n_train)
    per_view = {}
    for modality in MODALITIES:
        cfg = TrainConfig(max_steps=steps, seed=seed, modality=modality, sample_steps=sample_steps,
                          model=replace(model or ModelConfig()))
        started = time.perf_counter()
        ckpt = train(cfg, train_set, _out(out_dir, modality, "train"))
        report = evaluate_checkpoint(ckpt, test_set, seed=seed, out_dir=_out(out_dir, modality, "eval"))
        per_view[modality] = {**report.aggregate(), "seconds": time.perf_counter() - started}
    best_single = max(per_view["intensity"]["iou"], per_view["range"]["iou"])
    result = {
        "per_modality": per_view,
        "margin_iou_points": 100 * (per_view["fused"]["iou"] - best_single),
        "steps": steps,
        "n_train": n_train,
        "n_test": n_test,
        "sample_steps": sample_steps,
        "synth": synth.to_dict(),
    }
    if out_dir is not None:
        dump_json(Path(out_dir) / "result.json", result)
    return result


def ablation(out_dir=None, steps: int = 300, n_train: int = 64, n_test: int = 32, seed: int = 0,
             sample_steps: int = 10, synth: SynthConfig | None = None) -> dict:
    """Train and score the three ablation rows; only the two module flags differ."""
    synth = synth or SynthConfig(seed=seed)
    train_set = synth_generate(synth, n_train)
    test_set = synth_generate(synth, n_test, start=n_train)
    rows = {}
    for label, flags in ABLATION_ROWS.items():
        cfg = TrainConfig(max_steps=steps, seed=seed, sample_steps=sample_steps, model=ModelConfig(**flags))
        ckpt = train(cfg, train_set, _out(out_dir, label, "train"))
        report = evaluate_checkpoint(ckpt, test_set, seed=seed, out_dir=_out(out_dir, label, "eval"))
        rows[label] = {**report.aggregate(), "params": ckpt.params.count()}
    result = {"rows": rows, "steps": steps, "n_train": n_train, "n_test": n_test, "sample_steps": sample_steps}
    if out_dir is not None:
        dump_json(Path(out_dir) / "result.json", result)
    return result
