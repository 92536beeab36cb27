"""Training loop: warmup schedule, gradient steps, metrics, checkpoints."""

from __future__ import annotations

import hashlib
import pickle
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import autodiff as ad
from .catch import CatchConfig, all_prompt_catalogs, read_dataset
from .encoding import EncoderParams, build_encoder, encoder_digest
from .model import ModelConfig, NonFiniteError, full_gradients, init_params
from .optim import OptimizerState, clip_by_global_norm, optimizer_step
from .sequences import EncodedDataset, make_batches, make_segment_batches

CHECKPOINT_FORMAT_VERSION = 1
METRICS_HEADER = "step,loss,lr,grad_norm,eval_score"


@dataclass
class TrainConfig:
    steps: int = 5000
    lr_peak: float = 3e-4  # paper-scale run uses the same peak
    warmup_steps: int = 500  # paper scale: 10_000
    batch_tokens: int = 256  # paper scale: 65_536
    seed: int = 0
    eval_every: int = 0  # 0 disables the periodic eval hook
    eval_episodes: int = 10
    grad_clip: float = 1.0
    weight_decay: float = 1e-4
    prompt_variant: str = "original"
    d_a: int = 64
    d_s: int = 64
    dataset_path: str = ""
    model: ModelConfig = field(default_factory=ModelConfig)

    def __post_init__(self):
        if isinstance(self.model, dict):
            self.model = ModelConfig(**self.model)
        if self.warmup_steps > self.steps:
            raise ValueError("warmup_steps must be <= steps")
        if self.lr_peak <= 0:
            raise ValueError("lr_peak must be positive")

    def to_dict(self) -> dict:
        d = {k: getattr(self, k) for k in
             ("steps", "lr_peak", "warmup_steps", "batch_tokens", "seed",
              "eval_every", "eval_episodes", "grad_clip", "weight_decay",
              "prompt_variant", "d_a", "d_s", "dataset_path")}
        d["model"] = self.model.to_dict()
        return d


def lr_schedule(step: int, cfg: TrainConfig) -> float:
    """Linear ramp 0 -> lr_peak over warmup_steps, constant afterwards."""
    if step < 0:
        raise ValueError("step must be >= 0")
    if cfg.warmup_steps > 0 and step < cfg.warmup_steps:
        return cfg.lr_peak * step / cfg.warmup_steps
    return cfg.lr_peak


@dataclass
class Checkpoint:
    config: ModelConfig
    params: dict  # name -> ndarray
    encoder: EncoderParams
    optimizer: OptimizerState
    train_config: TrainConfig
    step: int
    rng_state: dict
    history: list  # metric rows: dicts with step/loss/lr/grad_norm/eval_score


def _section_bytes(obj) -> bytes:
    return pickle.dumps(obj, protocol=4)


def save_checkpoint(ckpt: Checkpoint, path) -> None:
    sections = {
        "model_config": ckpt.config.to_dict(),
        "params": {k: ckpt.params[k] for k in sorted(ckpt.params)},
        "encoder": {
            "vocabulary": ckpt.encoder.vocabulary,
            "token_table": ckpt.encoder.token_table,
            "state_projection": ckpt.encoder.state_projection,
            "d_a": ckpt.encoder.d_a,
            "d_s": ckpt.encoder.d_s,
            "grid_height": ckpt.encoder.grid_height,
            "grid_width": ckpt.encoder.grid_width,
            "prompts": ckpt.encoder.prompts,
        },
        "optimizer": {
            "lr": ckpt.optimizer.lr, "beta1": ckpt.optimizer.beta1,
            "beta2": ckpt.optimizer.beta2, "eps": ckpt.optimizer.eps,
            "weight_decay": ckpt.optimizer.weight_decay,
            "step_count": ckpt.optimizer.step_count,
            "m": {k: ckpt.optimizer.m[k] for k in sorted(ckpt.optimizer.m)},
            "v": {k: ckpt.optimizer.v[k] for k in sorted(ckpt.optimizer.v)},
        },
        "train_config": ckpt.train_config.to_dict(),
        "step": ckpt.step,
        "rng_state": ckpt.rng_state,
        "history": ckpt.history,
    }
    # each section is pickled on its own so section bytes (and therefore the
    # whole file) are reproducible regardless of cross-object sharing
    blobs = {name: _section_bytes(obj) for name, obj in sections.items()}
    doc = {
        "format_version": CHECKPOINT_FORMAT_VERSION,
        "sections": blobs,
        "digests": {name: hashlib.sha256(blob).hexdigest()
                    for name, blob in blobs.items()},
    }
    Path(path).write_bytes(pickle.dumps(doc, protocol=4))


class CheckpointError(ValueError):
    pass


def load_checkpoint(path, expected_config: ModelConfig | None = None) -> Checkpoint:
    try:
        doc = pickle.loads(Path(path).read_bytes())
    except Exception as e:
        raise CheckpointError(f"cannot read checkpoint {path}: {e}") from e
    if not isinstance(doc, dict) or doc.get("format_version") != CHECKPOINT_FORMAT_VERSION:
        raise CheckpointError(f"unsupported checkpoint format in {path}")
    blobs = doc["sections"]
    for name, digest in doc["digests"].items():
        if hashlib.sha256(blobs[name]).hexdigest() != digest:
            raise CheckpointError(f"checkpoint section {name!r} is corrupted")
    sections = {name: pickle.loads(blob) for name, blob in blobs.items()}
    config = ModelConfig(**sections["model_config"])
    if expected_config is not None and expected_config.digest() != config.digest():
        raise CheckpointError("checkpoint ModelConfig digest does not match the "
                              "requested configuration")
    opt_doc = sections["optimizer"]
    optimizer = OptimizerState(lr=opt_doc["lr"], beta1=opt_doc["beta1"],
                               beta2=opt_doc["beta2"], eps=opt_doc["eps"],
                               weight_decay=opt_doc["weight_decay"],
                               step_count=opt_doc["step_count"],
                               m=dict(opt_doc["m"]), v=dict(opt_doc["v"]))
    return Checkpoint(config=config,
                      params=dict(sections["params"]),
                      encoder=EncoderParams(**sections["encoder"]),
                      optimizer=optimizer,
                      train_config=TrainConfig(**sections["train_config"]),
                      step=sections["step"],
                      rng_state=sections["rng_state"],
                      history=sections["history"])


def params_to_tensors(arrays: dict) -> dict:
    return {k: ad.Tensor(np.array(v), requires_grad=True) for k, v in arrays.items()}


def _format_metric(value) -> str:
    return "" if value is None else repr(float(value))


def write_metrics(history: list, path) -> None:
    lines = [METRICS_HEADER]
    for row in history:
        lines.append(",".join([str(row["step"]),
                               _format_metric(row["loss"]),
                               _format_metric(row["lr"]),
                               _format_metric(row["grad_norm"]),
                               _format_metric(row.get("eval_score"))]))
    Path(path).write_text("\n".join(lines) + "\n")


def build_training_encoder(cfg: TrainConfig, env_config: CatchConfig) -> EncoderParams:
    return build_encoder(all_prompt_catalogs(), env_config, seed=cfg.seed,
                         d_a=cfg.d_a, d_s=cfg.d_s)


def train(cfg: TrainConfig, out_dir, resume_from=None, eval_hook=None) -> Checkpoint:
    """Run the full training loop; writes metrics.csv and checkpoint.pkl.

    `eval_hook(params, encoder, config, step) -> float` is called every
    `eval_every` steps when configured.
    """
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)

    if resume_from is not None:
        ckpt = load_checkpoint(resume_from)
        cfg = ckpt.train_config
        encoder = ckpt.encoder
        params = params_to_tensors(ckpt.params)
        opt = ckpt.optimizer
        rng = np.random.default_rng()
        rng.bit_generator.state = ckpt.rng_state
        start_step = ckpt.step
        history = list(ckpt.history)
        dataset = read_dataset(cfg.dataset_path)
    else:
        dataset = read_dataset(cfg.dataset_path)
        encoder = build_training_encoder(cfg, dataset.config)
        params = init_params(cfg.model, seed=cfg.seed)
        opt = OptimizerState(lr=cfg.lr_peak, weight_decay=cfg.weight_decay)
        rng = np.random.default_rng(np.random.SeedSequence(entropy=cfg.seed,
                                                           spawn_key=(2,)))
        start_step = 0
        history = []

    digest_before = encoder_digest(encoder)
    enc_ds = EncodedDataset(dataset, encoder, cfg.prompt_variant)
    k = cfg.model.context_len
    if cfg.model.memory_enabled:
        stream = make_segment_batches(enc_ds, k, cfg.batch_tokens, rng)
    else:
        stream = make_batches(enc_ds, k, cfg.batch_tokens, rng)

    for step in range(start_step, cfg.steps):
        batch = next(stream)
        try:
            loss, grads = full_gradients(params, cfg.model, batch)
        except NonFiniteError as e:
            crash = Checkpoint(config=cfg.model,
                               params={n: p.data.copy() for n, p in params.items()},
                               encoder=encoder, optimizer=opt, train_config=cfg,
                               step=step, rng_state=rng.bit_generator.state,
                               history=history)
            save_checkpoint(crash, out_dir / "crash.pkl")
            raise RuntimeError(f"training halted at step {step} (batch {step}): {e}") from e
        grad_norm = clip_by_global_norm(grads, cfg.grad_clip)
        lr = lr_schedule(step, cfg)
        optimizer_step(params, grads, opt, lr=lr)
        row = {"step": step, "loss": loss, "lr": lr, "grad_norm": grad_norm,
               "eval_score": None}
        if eval_hook is not None and cfg.eval_every > 0 and (step + 1) % cfg.eval_every == 0:
            row["eval_score"] = eval_hook(params, encoder, cfg.model, step)
        history.append(row)

    assert encoder_digest(encoder) == digest_before, "frozen encoder was mutated"
    ckpt = Checkpoint(config=cfg.model,
                      params={n: p.data.copy() for n, p in params.items()},
                      encoder=encoder, optimizer=opt, train_config=cfg,
                      step=cfg.steps, rng_state=rng.bit_generator.state,
                      history=history)
    save_checkpoint(ckpt, out_dir / "checkpoint.pkl")
    write_metrics(history, out_dir / "metrics.csv")
    return ckpt
