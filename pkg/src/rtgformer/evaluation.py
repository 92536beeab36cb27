"""Closed-loop rollout, nearest-neighbor action decoding, normalized scores,
and the ablation runner."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .catch import (CatchConfig, expert_policy, generate_dataset,
                    reset, step, write_dataset)
from .encoding import EncoderParams, action_embedding_matrix, encode_step
from .model import (MemoryCache, ModelConfig, cache_engagements, forward,
                    param_count, reset_cache_engagements)

QUERY_MODES = ("rtg_only", "masked_state")


@dataclass
class RolloutConfig:
    target_return: float = 1.0  # default: dataset expert mean return
    n_episodes: int = 10
    seed: int = 0
    query_mode: str = "rtg_only"
    prompt_variant: str = "original"
    step_cap: int = 1000

    def __post_init__(self):
        if self.n_episodes < 1:
            raise ValueError("n_episodes must be >= 1")
        if self.query_mode not in QUERY_MODES:
            raise ValueError(f"query_mode must be one of {QUERY_MODES}")


@dataclass
class EvalReport:
    returns: list
    mean_return: float
    std_return: float
    normalized: float
    expert_return: float
    random_return: float
    decode_gaps: list = field(default_factory=list)  # runner-up minus chosen distance
    state_errors: list = field(default_factory=list)  # per-step state-half L2 error
    failures: int = 0

    def to_dict(self) -> dict:
        return {
            "returns": [float(r) for r in self.returns],
            "mean_return": self.mean_return,
            "std_return": self.std_return,
            "normalized_score": self.normalized,
            "expert_return": self.expert_return,
            "random_return": self.random_return,
            "decode_gap_mean": float(np.mean(self.decode_gaps)) if self.decode_gaps else None,
            "decode_gap_min": float(np.min(self.decode_gaps)) if self.decode_gaps else None,
            "state_error_mean": float(np.mean(self.state_errors)) if self.state_errors else None,
            "failures": self.failures,
        }


def normalized_score(mean_return: float, random_return: float, expert_return: float) -> float:
    if expert_return == random_return:
        raise ValueError("degenerate normalization: expert and random returns are equal")
    return 100.0 * (mean_return - random_return) / (expert_return - random_return)


def decode_action(pred_action_half: np.ndarray, encoder: EncoderParams,
                  variant: str) -> int:
    """Nearest catalog embedding by squared distance; ties break to the smallest id."""
    emb = action_embedding_matrix(encoder, variant)
    if emb.shape[0] == 0:
        raise ValueError("empty action catalog")
    d2 = ((emb - pred_action_half) ** 2).sum(axis=1)
    return int(np.argmin(d2))  # argmin takes the first (= smallest id) on ties


def observation_token(encoder: EncoderParams, image: np.ndarray) -> np.ndarray:
    """Token with a zeroed action half and the state's embedding: the episode
    lead token used by training streams and closed-loop rollout alike."""
    token = np.zeros(encoder.d_model)
    token[encoder.d_a:] = image.reshape(-1).astype(np.float64) @ encoder.state_projection
    return token


def _decode_gap(pred_action_half: np.ndarray, encoder: EncoderParams, variant: str) -> float:
    emb = action_embedding_matrix(encoder, variant)
    d = np.sqrt(((emb - pred_action_half) ** 2).sum(axis=1))
    d.sort()
    return float(d[1] - d[0])


class ModelPredictor:
    """Closed-loop predictor: feeds realized history, returns the next-step vector.

    rtg_only mode follows the training objective literally: the prediction for
    step t comes from the output at the last history token. The harness seeds
    each episode with an observation-only lead token (zero action half, first
    state's embedding), matching the training streams; with no history at all,
    the same observation-only token is built from the current image.
    masked_state mode appends a query token with a zeroed action half and the
    real state half before predicting.
    """

    def __init__(self, params: dict, config: ModelConfig, encoder: EncoderParams,
                 variant: str, query_mode: str = "rtg_only"):
        self.params = params
        self.config = config
        self.encoder = encoder
        self.variant = variant
        self.query_mode = query_mode

    def _run(self, tokens: np.ndarray, rtgs: np.ndarray) -> np.ndarray:
        """Forward a token sequence, returning the last position's prediction."""
        cfg = self.config
        k = cfg.context_len
        t = tokens.shape[0]
        with ad.no_grad():
            if t <= k:
                pred = forward(self.params, cfg, tokens[None], rtgs[None])
                return pred.data[0, -1]
            if cfg.memory_enabled:
                cache = MemoryCache(cfg.n_layers, cfg.memory_segments)
                out = None
                for off in range(0, t, k):
                    chunk = tokens[off:off + k]
                    pred = forward(self.params, cfg, chunk[None],
                                   rtgs[None, off:off + k], cache=cache,
                                   position_offset=off)
                    out = pred.data[0, -1]
                return out
            # no memory: slide the window, re-indexing positions from zero
            pred = forward(self.params, cfg, tokens[None, -k:], rtgs[None, -k:])
            return pred.data[0, -1]

    def predict(self, history_tokens: list, history_rtgs: list, running_rtg: float,
                env_state, image: np.ndarray) -> np.ndarray:
        if self.query_mode == "masked_state":
            tokens = history_tokens + [observation_token(self.encoder, image)]
            rtgs = history_rtgs + [running_rtg]
        elif history_tokens:
            tokens = history_tokens
            rtgs = history_rtgs
        else:
            tokens = [observation_token(self.encoder, image)]
            rtgs = [running_rtg]
        return self._run(np.stack(tokens), np.asarray(rtgs, dtype=np.float64))


class ExpertOraclePredictor:
    """Harness oracle: emits the exact embedding of the expert action."""

    def __init__(self, encoder: EncoderParams, variant: str):
        self.encoder = encoder
        self.variant = variant

    def predict(self, history_tokens, history_rtgs, running_rtg, env_state, image):
        out = np.zeros(self.encoder.d_model)
        out[:self.encoder.d_a] = action_embedding_matrix(
            self.encoder, self.variant)[expert_policy(env_state)]
        return out


class ConstantActionPredictor:
    """Stub emitting one fixed action's embedding every step."""

    def __init__(self, encoder: EncoderParams, variant: str, action_id: int):
        self.encoder = encoder
        self.variant = variant
        self.action_id = action_id

    def predict(self, history_tokens, history_rtgs, running_rtg, env_state, image):
        out = np.zeros(self.encoder.d_model)
        out[:self.encoder.d_a] = action_embedding_matrix(
            self.encoder, self.variant)[self.action_id]
        return out


def rollout(predictor, env_config: CatchConfig, encoder: EncoderParams,
            cfg: RolloutConfig, expert_return: float, random_return: float) -> EvalReport:
    """Run return-conditioned closed-loop episodes and score them."""
    returns = []
    decode_gaps = []
    state_errors = []
    failures = 0
    d_a = encoder.d_a
    for ep in range(cfg.n_episodes):
        rng = np.random.default_rng(np.random.SeedSequence(entropy=cfg.seed,
                                                           spawn_key=(ep,)))
        state, image = reset(env_config, rng)
        # episode streams open with an observation-only lead token, exactly
        # as in training, so the first action is conditioned on the first state
        tokens: list = [observation_token(encoder, image)]
        rtgs: list = [cfg.target_return]
        running_rtg = cfg.target_return
        total = 0.0
        steps = 0
        while not state.done:
            if steps >= cfg.step_cap:
                failures += 1
                break
            pred = predictor.predict(tokens, rtgs, running_rtg, state, image)
            action = decode_action(pred[:d_a], encoder, cfg.prompt_variant)
            decode_gaps.append(_decode_gap(pred[:d_a], encoder, cfg.prompt_variant))
            new_state, new_image, reward, done = step(env_config, state, action)
            state_errors.append(float(np.linalg.norm(
                pred[d_a:] - new_image.reshape(-1).astype(np.float64) @ encoder.state_projection)))
            tokens.append(encode_step(encoder, action, image, cfg.prompt_variant))
            rtgs.append(running_rtg)
            running_rtg -= reward
            total += reward
            state, image = new_state, new_image
            steps += 1
        returns.append(total)
    mean = float(np.mean(returns))
    report = EvalReport(returns=returns, mean_return=mean,
                        std_return=float(np.std(returns)),
                        normalized=normalized_score(mean, random_return, expert_return),
                        expert_return=expert_return, random_return=random_return,
                        decode_gaps=decode_gaps, state_errors=state_errors,
                        failures=failures)
    return report


# ---------------------------------------------------------------------------
# ablation runner
# ---------------------------------------------------------------------------

ABLATION_AXES = ("rtg_mode", "memory_on_off", "prompt_variant", "model_size",
                 "trajectory_length")


@dataclass
class AblationSpec:
    axis: str
    seeds: tuple = (0, 1, 2)
    levels: tuple = ()  # defaults per axis when empty
    dataset_episodes: int = 5000
    eval_episodes: int = 50
    # desk-scale training deltas shared by every level
    steps: int = 1500
    warmup_steps: int = 150
    batch_tokens: int = 256
    d_model: int = 64
    n_layers: int = 2

    def __post_init__(self):
        if self.axis not in ABLATION_AXES:
            raise ValueError(f"unknown ablation axis {self.axis!r}; "
                             f"valid axes: {ABLATION_AXES}")
        if not self.levels:
            self.levels = _DEFAULT_LEVELS[self.axis]


_DEFAULT_LEVELS = {
    "rtg_mode": ("condition", "linear"),
    "memory_on_off": (0, 2),
    "prompt_variant": ("original", "synonyms", "contextual"),
    "model_size": (64, 128, 256),
    "trajectory_length": (6, 12, 24),
}


def _level_setup(spec: AblationSpec, level, seed: int):
    """Map (axis, level) to env config, train config, and prompt variant."""
    from .training import TrainConfig  # local import to avoid a cycle

    env = CatchConfig()
    variant = "original"
    d_model = spec.d_model
    d_half = d_model // 2
    k = 6
    mem = 0
    rtg_mode = "condition"
    if spec.axis == "rtg_mode":
        rtg_mode = level
    elif spec.axis == "memory_on_off":
        mem = int(level)
        k = 3  # shorter than the 6-step episode so the cache engages
    elif spec.axis == "prompt_variant":
        variant = level
    elif spec.axis == "model_size":
        d_model = int(level)
        d_half = d_model // 2
    steps = spec.steps
    if spec.axis == "trajectory_length":
        env = CatchConfig(grid_width=7, grid_height=25)
        k = int(level)
        # longer contexts see fewer, larger windows per token budget and need
        # proportionally more optimizer steps to reach the same loss
        steps = spec.steps * k // 6
    model = ModelConfig(d_model=d_model, n_heads=1, n_layers=spec.n_layers,
                        context_len=k, rtg_mode=rtg_mode, memory_segments=mem,
                        max_position=max(64, env.episode_length + k))
    train_cfg = TrainConfig(steps=steps, warmup_steps=spec.warmup_steps,
                            batch_tokens=spec.batch_tokens, seed=seed,
                            prompt_variant=variant, d_a=d_half, d_s=d_model - d_half,
                            model=model)
    return env, train_cfg, variant


@dataclass
class AblationRow:
    level: str
    mean: float | None
    std: float | None
    scores: list
    param_count: int | None = None
    cache_engagements: int = 0
    failed: bool = False


def run_ablation(spec: AblationSpec, work_dir) -> list[AblationRow]:
    """Train every level with shared seeds and report mean +/- std scores."""
    from pathlib import Path

    from .training import train

    work_dir = Path(work_dir)
    work_dir.mkdir(parents=True, exist_ok=True)
    rows = []
    dataset_cache: dict = {}
    for level in spec.levels:
        scores = []
        n_params = None
        engagements = 0
        failed = False
        for seed in spec.seeds:
            env, train_cfg, variant = _level_setup(spec, level, seed)
            key = (env.grid_width, env.grid_height)
            if key not in dataset_cache:
                ds_path = work_dir / f"expert_{key[0]}x{key[1]}.json"
                ds = generate_dataset(env, "expert", spec.dataset_episodes, seed=1234)
                write_dataset(ds, ds_path)
                dataset_cache[key] = (ds_path, ds.expert_return, ds.random_return)
            ds_path, expert_ret, random_ret = dataset_cache[key]
            train_cfg.dataset_path = str(ds_path)
            run_dir = work_dir / f"{spec.axis}_{level}_s{seed}"
            reset_cache_engagements()
            try:
                ckpt = train(train_cfg, run_dir)
            except Exception:
                failed = True
                break
            engagements += cache_engagements()
            from .training import params_to_tensors
            params = params_to_tensors(ckpt.params)
            n_params = param_count(params)
            predictor = ModelPredictor(params, ckpt.config, ckpt.encoder, variant)
            rcfg = RolloutConfig(target_return=expert_ret,
                                 n_episodes=spec.eval_episodes,
                                 seed=seed + 9000, prompt_variant=variant)
            report = rollout(predictor, env, ckpt.encoder, rcfg,
                             expert_return=expert_ret, random_return=random_ret)
            scores.append(report.normalized)
        if failed:
            rows.append(AblationRow(level=str(level), mean=None, std=None,
                                    scores=scores, failed=True))
        else:
            rows.append(AblationRow(level=str(level),
                                    mean=float(np.mean(scores)),
                                    std=float(np.std(scores)),
                                    scores=scores, param_count=n_params,
                                    cache_engagements=engagements))
    return rows


def ablation_table_csv(spec: AblationSpec, rows: list[AblationRow]) -> str:
    lines = ["axis,level,mean,std,scores,param_count,cache_engagements,failed"]
    for r in rows:
        scores = ";".join(repr(s) for s in r.scores)
        lines.append(",".join([
            spec.axis, r.level,
            "" if r.mean is None else repr(r.mean),
            "" if r.std is None else repr(r.std),
            scores,
            "" if r.param_count is None else str(r.param_count),
            str(r.cache_engagements), str(r.failed)]))
    return "\n".join(lines) + "\n"


# ---------------------------------------------------------------------------
# static SVG emission
# ---------------------------------------------------------------------------

def _svg_header(w: int, h: int) -> str:
    return (f'<svg xmlns="http://www.w3.org/2000/svg" width="{w}" height="{h}" '
            f'viewBox="0 0 {w} {h}">')


def line_plot_svg(xs, ys, title: str, w: int = 640, h: int = 400) -> str:
    """Minimal deterministic line chart (used for loss curves)."""
    xs = np.asarray(xs, dtype=float)
    ys = np.asarray(ys, dtype=float)
    pad = 50
    x0, x1 = float(xs.min()), float(xs.max()) or 1.0
    y0, y1 = float(ys.min()), float(ys.max())
    if x1 == x0:
        x1 = x0 + 1.0
    if y1 == y0:
        y1 = y0 + 1.0
    px = pad + (xs - x0) / (x1 - x0) * (w - 2 * pad)
    py = h - pad - (ys - y0) / (y1 - y0) * (h - 2 * pad)
    points = " ".join(f"{a:.2f},{b:.2f}" for a, b in zip(px, py))
    return "\n".join([
        _svg_header(w, h),
        f'<text x="{w // 2}" y="20" text-anchor="middle" font-size="14">{title}</text>',
        f'<rect x="{pad}" y="{pad}" width="{w - 2 * pad}" height="{h - 2 * pad}" '
        'fill="none" stroke="black"/>',
        f'<polyline fill="none" stroke="steelblue" stroke-width="1.5" points="{points}"/>',
        f'<text x="{pad}" y="{h - 10}" font-size="11">x: [{x0:g}, {x1:g}]  '
        f'y: [{y0:g}, {y1:g}]</text>',
        "</svg>", ""])


def bar_chart_svg(labels, values, errors, title: str, w: int = 640, h: int = 400) -> str:
    """Minimal deterministic bar chart with error whiskers."""
    values = [0.0 if v is None else float(v) for v in values]
    errors = [0.0 if e is None else float(e) for e in errors]
    pad = 50
    top = max(max(v + e for v, e in zip(values, errors)), 1e-9)
    n = len(values)
    slot = (w - 2 * pad) / max(n, 1)
    parts = [_svg_header(w, h),
             f'<text x="{w // 2}" y="20" text-anchor="middle" font-size="14">{title}</text>']
    for i, (label, v, e) in enumerate(zip(labels, values, errors)):
        bh = max(v, 0.0) / top * (h - 2 * pad)
        x = pad + i * slot + slot * 0.15
        bw = slot * 0.7
        y = h - pad - bh
        cx = x + bw / 2
        parts.append(f'<rect x="{x:.2f}" y="{y:.2f}" width="{bw:.2f}" '
                     f'height="{bh:.2f}" fill="steelblue"/>')
        if e > 0:
            eh = e / top * (h - 2 * pad)
            parts.append(f'<line x1="{cx:.2f}" y1="{y - eh:.2f}" x2="{cx:.2f}" '
                         f'y2="{min(y + eh, h - pad):.2f}" stroke="black"/>')
        parts.append(f'<text x="{cx:.2f}" y="{h - pad + 16}" text-anchor="middle" '
                     f'font-size="11">{label}</text>')
        parts.append(f'<text x="{cx:.2f}" y="{y - 6:.2f}" text-anchor="middle" '
                     f'font-size="10">{v:.1f}</text>')
    parts.extend([f'<line x1="{pad}" y1="{h - pad}" x2="{w - pad}" y2="{h - pad}" '
                  'stroke="black"/>', "</svg>", ""])
    return "\n".join(parts)
