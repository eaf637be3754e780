import filecmp

import numpy as np
import pytest
import torch

from cracksegdiff import diffusion
from cracksegdiff.backbone import ModelConfig
from cracksegdiff.data import SynthConfig, stack_batch, synth_generate
from cracksegdiff.errors import ConfigError, TrainingError
from cracksegdiff.losses import LossConfig
from cracksegdiff.pipeline import (
    Checkpoint,
    TrainConfig,
    Trainer,
    evaluate,
    evaluate_checkpoint,
    predict,
    read_log,
    sample,
    train,
)


def tiny_cfg(**kw):
    base = dict(
        T=50,
        batch_size=4,
        max_steps=6,
        sample_steps=5,
        seed=7,
        model=ModelConfig(scales=2, base_channels=4, image_size=(16, 16), time_embed_dim=8),
    )
    base.update(kw)
    return TrainConfig(**base)


@pytest.fixture(scope="module")
def samples():
    return synth_generate(SynthConfig(image_size=(16, 16), crack_steps=(8, 12), seed=2), 6)


def oracle_for(samples):
    x0 = stack_batch(samples)[1] * 2 - 1

    def denoiser(image, x_t, t):
        return x0.to(x_t.dtype)

    return denoiser


def test_train_config_roundtrip_and_validation():
    cfg = tiny_cfg(modality="range")
    assert cfg.model.image_channels == 1
    assert TrainConfig.from_dict(cfg.to_dict()).to_dict() == cfg.to_dict()
    with pytest.raises(ConfigError, match="unknown"):
        TrainConfig.from_dict({**cfg.to_dict(), "lr_decay": 0.5})
    with pytest.raises(ConfigError):
        tiny_cfg(sample_steps=51)
    with pytest.raises(ConfigError):
        tiny_cfg(lr=0.0)


def test_default_hyperparameters_are_logged(tmp_path, samples):
    train(tiny_cfg(max_steps=2), samples, tmp_path)
    rows = read_log(tmp_path / "train_log.csv")
    assert [r["step"] for r in rows] == ["1", "2"]
    for r in rows:
        assert float(r["alpha"]) == 1.0 and float(r["beta"]) == 10.0 and float(r["lr"]) == 1e-4
        assert 1 <= float(r["t_mean"]) <= 50
        total = float(r["L1"]) + 10 * float(r["L2"])
        assert float(r["L_total"]) == pytest.approx(total, rel=1e-6)


def test_training_is_deterministic(tmp_path, samples):
    train(tiny_cfg(), samples, tmp_path / "a")
    train(tiny_cfg(), samples, tmp_path / "b")
    strip = lambda rows: [{k: v for k, v in r.items() if k != "wall_ms"} for r in rows]
    assert strip(read_log(tmp_path / "a/train_log.csv")) == strip(read_log(tmp_path / "b/train_log.csv"))
    for name in ("params.bin", "optim.bin", "rng.bin", "schedule.bin", "header.json"):
        assert filecmp.cmp(tmp_path / "a/checkpoint" / name, tmp_path / "b/checkpoint" / name, shallow=False)


def test_checkpoint_save_load_save_is_bit_identical(tmp_path, samples):
    ckpt = train(tiny_cfg(max_steps=3), samples)
    ckpt.save(tmp_path / "one")
    Checkpoint.load(tmp_path / "one").save(tmp_path / "two")
    names = sorted(p.name for p in (tmp_path / "one").iterdir())
    assert names == ["header.json", "optim.bin", "params.bin", "rng.bin", "schedule.bin"]
    for name in names:
        assert (tmp_path / "one" / name).read_bytes() == (tmp_path / "two" / name).read_bytes()


def test_resume_is_bit_exact(tmp_path, samples):
    full = Trainer(tiny_cfg(), samples)
    full_log = full.run(4)

    first = Trainer(tiny_cfg(), samples)
    first.run(3)
    first.checkpoint().save(tmp_path / "ck")
    resumed = Trainer(tiny_cfg(), samples, checkpoint=Checkpoint.load(tmp_path / "ck"))
    (rec,) = resumed.run(1)

    assert rec["step"] == 4
    assert rec["L_total"] == full_log[-1]["L_total"]
    for (name, a), (_, b) in zip(full.model.state_dict().items(), resumed.model.state_dict().items()):
        assert torch.equal(a, b), name


def test_checkpoint_rejects_mismatches(tmp_path, samples):
    ckpt = train(tiny_cfg(max_steps=1), samples)
    ckpt.save(tmp_path / "ck")
    with pytest.raises(ConfigError, match="config"):
        Checkpoint.load(tmp_path / "ck", expect=ModelConfig(scales=2, base_channels=8, image_size=(16, 16)))
    with pytest.raises(ConfigError):
        Trainer(tiny_cfg(model=ModelConfig(scales=2, base_channels=4, image_size=(16, 16))), samples, checkpoint=ckpt)
    beta = np.fromfile(tmp_path / "ck/schedule.bin", dtype="<f8")
    beta[3] += 1e-9
    beta.tofile(tmp_path / "ck/schedule.bin")
    with pytest.raises(ConfigError, match="schedule"):
        Checkpoint.load(tmp_path / "ck")
    with pytest.raises(ConfigError):
        Checkpoint.load(tmp_path / "nowhere")


def test_dataset_mismatch_is_caught_before_training(samples):
    with pytest.raises(ConfigError, match="16x16"):
        Trainer(tiny_cfg(model=ModelConfig(scales=2, base_channels=4, image_size=(32, 32))), samples)
    with pytest.raises(ConfigError, match="empty"):
        Trainer(tiny_cfg(), [])


def test_non_finite_loss_aborts_with_snapshot(tmp_path, samples):
    trainer = Trainer(tiny_cfg(), samples, out_dir=tmp_path)
    with torch.no_grad():
        next(trainer.model.parameters()).fill_(float("nan"))
    with pytest.raises(TrainingError, match="non-finite loss at step 1"):
        trainer.step()
    assert (tmp_path / "abort_snapshot/header.json").is_file()


@pytest.mark.parametrize("steps", [1, 2, 7, 50])
def test_oracle_denoiser_recovers_the_mask(samples, steps):
    sched = diffusion.build_schedule(50)
    image, masks = stack_batch(samples)
    prob, mask = sample(oracle_for(samples), sched, image.double(), steps, seed=3)
    assert np.array_equal(mask, masks.numpy().astype(bool))
    assert prob.min() >= 0 and prob.max() <= 1


def test_ensemble_is_mean_of_member_runs(samples):
    cfg = tiny_cfg()
    model = Trainer(cfg, samples).model.eval()
    sched = cfg.schedule()
    image, _ = stack_batch(samples[:2])
    prob4, mask4 = sample(model, sched, image, 5, ensemble=4, seed=11)
    from cracksegdiff.pipeline import member_seed, sample_chain

    runs = []
    for e in range(4):
        gen = torch.Generator().manual_seed(member_seed(11, e))
        runs.append(((sample_chain(model, sched, image, 1, 5, gen) + 1) / 2).double().numpy())
    np.testing.assert_allclose(prob4, np.mean(runs, axis=0), rtol=0, atol=1e-15)
    assert np.array_equal(mask4, prob4 >= 0.5)
    assert prob4.min() >= 0 and prob4.max() <= 1
    again, _ = sample(model, sched, image, 5, ensemble=1, seed=11)
    np.testing.assert_array_equal(again, sample(model, sched, image, 5, ensemble=1, seed=11)[0])


def test_sample_rejects_bad_arguments(samples):
    sched = diffusion.build_schedule(10)
    image, _ = stack_batch(samples[:1])
    with pytest.raises(ConfigError, match="exceeds"):
        sample(oracle_for(samples[:1]), sched, image, 11)
    with pytest.raises(ConfigError):
        sample(oracle_for(samples[:1]), sched, image, 5, ensemble=0)
    model = Trainer(tiny_cfg(), samples).model
    big = synth_generate(SynthConfig(image_size=(32, 32)), 1)
    with pytest.raises(ConfigError, match="incompatible"):
        predict(model, sched, big, "fused", 2)


def test_predict_is_independent_of_batch_position_within_batch(samples):
    model = Trainer(tiny_cfg(), samples).model
    sched = diffusion.build_schedule(50)
    a = predict(model, sched, samples, "fused", 3, seed=1)
    b = predict(model, sched, samples, "fused", 3, seed=1)
    assert all(np.array_equal(x, y) for x, y in zip(a, b))
    assert len(a) == len(samples) and a[0].shape == (16, 16)


def test_evaluate_oracle_and_background(samples):
    oracle = evaluate(samples, [s.mask.astype(np.float32) for s in samples]).aggregate()
    assert oracle["f1"] == oracle["iou"] == oracle["bf_score"] == 1.0
    report = evaluate(samples, [np.zeros((16, 16)) for _ in samples])
    assert report.aggregate()["iou"] == 0.0
    assert report.count == len(samples)
    with pytest.raises(ConfigError):
        evaluate([], [])


def test_evaluate_checkpoint_writes_artifacts(tmp_path, samples):
    ckpt = train(tiny_cfg(max_steps=2), samples)
    report = evaluate_checkpoint(ckpt, samples, steps=3, seed=5, out_dir=tmp_path / "ev")
    assert report.count == len(samples)
    assert report.meta["sample_steps"] == 3 and report.meta["modality"] == "fused"
    assert report.meta["ablation"] == {"use_cfm": True, "use_sfcm": True}
    assert (tmp_path / "ev/metrics.csv").is_file() and (tmp_path / "ev/metrics.json").is_file()
    assert len(list((tmp_path / "ev/pred").glob("*_mask.png"))) == len(samples)
    evaluate_checkpoint(ckpt, samples, steps=3, seed=5, out_dir=tmp_path / "ev2")
    for name in ("metrics.csv", "metrics.json"):
        assert filecmp.cmp(tmp_path / "ev" / name, tmp_path / "ev2" / name, shallow=False)
    with pytest.raises(ConfigError, match="trained on"):
        evaluate_checkpoint(ckpt, samples, modality="range")


def test_training_reduces_loss(samples):
    cfg = tiny_cfg(max_steps=120, lr=3e-3, batch_size=6, loss=LossConfig())
    records = Trainer(cfg, samples).run()
    losses = np.array([r["L_total"] for r in records])
    k = len(losses) // 10
    assert losses[-k:].mean() < losses[:k].mean()
