"""Training loop: schedule, overfitting, determinism, checkpoints, resume."""

import numpy as np
import pytest

from rtgformer.catch import CatchConfig, file_digest, generate_dataset, write_dataset
from rtgformer.encoding import encoder_digest
from rtgformer.model import ModelConfig
from rtgformer.training import (CheckpointError, TrainConfig,
                                load_checkpoint, lr_schedule, save_checkpoint,
                                train, write_metrics)

ENV = CatchConfig()


def _tiny_config(data_path, **overrides):
    model = overrides.pop("model", None) or ModelConfig(
        d_model=16, n_heads=1, n_layers=1, context_len=6,
        rtg_mode="condition", memory_segments=0)
    defaults = dict(steps=30, warmup_steps=5, batch_tokens=60, seed=0,
                    d_a=8, d_s=8, dataset_path=str(data_path), model=model)
    defaults.update(overrides)
    return TrainConfig(**defaults)


@pytest.fixture(scope="module")
def data_path(tmp_path_factory):
    path = tmp_path_factory.mktemp("data") / "expert.json"
    write_dataset(generate_dataset(ENV, "expert", 40, seed=5), path)
    return path


def test_lr_schedule_values():
    cfg = TrainConfig(steps=100, warmup_steps=10, lr_peak=3e-4, dataset_path="x")
    assert lr_schedule(0, cfg) == 0.0
    assert lr_schedule(5, cfg) == pytest.approx(1.5e-4)
    assert lr_schedule(10, cfg) == pytest.approx(3e-4)
    assert lr_schedule(99, cfg) == pytest.approx(3e-4)
    with pytest.raises(ValueError):
        lr_schedule(-1, cfg)


def test_warmup_must_fit():
    with pytest.raises(ValueError):
        TrainConfig(steps=10, warmup_steps=20, dataset_path="x")


def test_loss_decreases(data_path, tmp_path):
    ckpt = train(_tiny_config(data_path, steps=300, warmup_steps=30),
                 tmp_path / "run")
    losses = [row["loss"] for row in ckpt.history]
    assert np.mean(losses[-10:]) < 0.5 * np.mean(losses[:10])


def test_training_bitwise_deterministic(data_path, tmp_path):
    a = train(_tiny_config(data_path), tmp_path / "a")
    b = train(_tiny_config(data_path), tmp_path / "b")
    assert [r["loss"] for r in a.history] == [r["loss"] for r in b.history]
    for name in a.params:
        assert np.array_equal(a.params[name], b.params[name])
    assert (tmp_path / "a" / "metrics.csv").read_bytes() == \
        (tmp_path / "b" / "metrics.csv").read_bytes()


def test_training_seed_changes_stream(data_path, tmp_path):
    a = train(_tiny_config(data_path, seed=0), tmp_path / "a")
    b = train(_tiny_config(data_path, seed=1), tmp_path / "b")
    assert [r["loss"] for r in a.history] != [r["loss"] for r in b.history]


def test_checkpoint_round_trip_byte_identical(data_path, tmp_path):
    ckpt = train(_tiny_config(data_path), tmp_path / "run")
    p1 = tmp_path / "run" / "checkpoint.pkl"
    back = load_checkpoint(p1)
    p2 = tmp_path / "resaved.pkl"
    save_checkpoint(back, p2)
    assert p1.read_bytes() == p2.read_bytes()


def test_checkpoint_corruption_detected(data_path, tmp_path):
    ckpt_path = tmp_path / "run" / "checkpoint.pkl"
    train(_tiny_config(data_path), tmp_path / "run")
    blob = bytearray(ckpt_path.read_bytes())
    blob[len(blob) // 2] ^= 0xFF
    ckpt_path.write_bytes(bytes(blob))
    with pytest.raises(CheckpointError):
        load_checkpoint(ckpt_path)


def test_checkpoint_config_digest_guard(data_path, tmp_path):
    train(_tiny_config(data_path), tmp_path / "run")
    other = ModelConfig(d_model=32, n_heads=1, n_layers=1, context_len=6,
                        memory_segments=0)
    with pytest.raises(CheckpointError):
        load_checkpoint(tmp_path / "run" / "checkpoint.pkl",
                        expected_config=other)


def test_resume_reproduces_uninterrupted_stream(data_path, tmp_path):
    full = train(_tiny_config(data_path, steps=40), tmp_path / "full")
    # train the same schedule but stop at step 25, then resume to 40
    train(_tiny_config(data_path, steps=25, warmup_steps=5), tmp_path / "part")
    part_ckpt = load_checkpoint(tmp_path / "part" / "checkpoint.pkl")
    part_ckpt.train_config.steps = 40
    save_checkpoint(part_ckpt, tmp_path / "part" / "extended.pkl")
    resumed = train(None, tmp_path / "resumed",
                    resume_from=tmp_path / "part" / "extended.pkl")
    assert [r["loss"] for r in resumed.history] == \
        [r["loss"] for r in full.history]
    for name in full.params:
        assert np.array_equal(full.params[name], resumed.params[name])


def test_encoder_frozen_through_training(data_path, tmp_path):
    ckpt = train(_tiny_config(data_path), tmp_path / "run")
    from rtgformer.training import build_training_encoder
    fresh = build_training_encoder(ckpt.train_config, ENV)
    assert encoder_digest(ckpt.encoder) == encoder_digest(fresh)


def test_dataset_file_not_mutated(data_path, tmp_path):
    before = file_digest(data_path)
    train(_tiny_config(data_path), tmp_path / "run")
    assert file_digest(data_path) == before


def test_metrics_format(tmp_path):
    rows = [{"step": 0, "loss": 1.5, "lr": 3e-4, "grad_norm": 0.25,
             "eval_score": None},
            {"step": 1, "loss": 1.25, "lr": 3e-4, "grad_norm": 0.5,
             "eval_score": 88.0}]
    path = tmp_path / "metrics.csv"
    write_metrics(rows, path)
    lines = path.read_text().splitlines()
    assert lines[0] == "step,loss,lr,grad_norm,eval_score"
    assert lines[1] == "0,1.5,0.0003,0.25,"
    assert lines[2] == "1,1.25,0.0003,0.5,88.0"


def test_memory_training_runs(data_path, tmp_path):
    model = ModelConfig(d_model=16, n_heads=1, n_layers=1, context_len=3,
                        rtg_mode="condition", memory_segments=2, max_position=12)
    ckpt = train(_tiny_config(data_path, steps=10, warmup_steps=2, model=model),
                 tmp_path / "run")
    assert ckpt.step == 10
    assert all(np.isfinite(r["loss"]) for r in ckpt.history)


def test_eval_hook_called(data_path, tmp_path):
    calls = []

    def hook(params, encoder, model_cfg, step):
        calls.append(step)
        return 42.0

    ckpt = train(_tiny_config(data_path, steps=10, warmup_steps=2,
                              eval_every=5), tmp_path / "run", eval_hook=hook)
    assert calls == [4, 9]
    scores = [r["eval_score"] for r in ckpt.history if r["eval_score"] is not None]
    assert scores == [42.0, 42.0]
