"""GPT-style causal transformer with return-to-go conditioned attention.

Two return-integration modes: `condition` adds a learned per-layer linear map
of the scalar return-to-go onto each timestep's attention keys and values;
`linear` adds it once at the input-embedding stage. A bounded stop-gradient
key/value memory lets queries attend up to M previous segments without any
gradient flowing into the cached blocks.
"""

from __future__ import annotations

import hashlib
from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .sequences import Batch

RTG_MODES = ("condition", "linear")


@dataclass
class ModelConfig:
    d_model: int = 128
    n_heads: int = 1
    n_layers: int = 6
    context_len: int = 6
    rtg_mode: str = "condition"
    memory_segments: int = 2
    dropout: float = 0.0
    max_position: int = 64

    def __post_init__(self):
        if self.d_model % self.n_heads != 0:
            raise ValueError("d_model must be divisible by n_heads")
        if self.rtg_mode not in RTG_MODES:
            raise ValueError(f"rtg_mode must be one of {RTG_MODES}")
        if self.memory_segments < 0:
            raise ValueError("memory_segments must be >= 0")
        if self.dropout != 0.0:
            raise ValueError("dropout is not supported; must be 0.0")

    @property
    def memory_enabled(self) -> bool:
        return self.memory_segments > 0

    @property
    def head_dim(self) -> int:
        return self.d_model // self.n_heads

    def to_dict(self) -> dict:
        return {k: getattr(self, k) for k in
                ("d_model", "n_heads", "n_layers", "context_len", "rtg_mode",
                 "memory_segments", "dropout", "max_position")}

    def digest(self) -> str:
        return hashlib.sha256(repr(sorted(self.to_dict().items())).encode()).hexdigest()


def init_params(config: ModelConfig, seed: int, dtype=np.float64) -> dict[str, Tensor]:
    """Scaled-normal init (std 0.02; residual-output projections down-scaled)."""
    rng = np.random.default_rng(np.random.SeedSequence(entropy=seed, spawn_key=(1,)))
    d = config.d_model
    out_scale = 1.0 / np.sqrt(2.0 * config.n_layers)

    def normal(shape, std=0.02):
        return Tensor(rng.normal(0.0, std, size=shape).astype(dtype), requires_grad=True)

    def ones(shape):
        return Tensor(np.ones(shape, dtype=dtype), requires_grad=True)

    def zeros(shape):
        return Tensor(np.zeros(shape, dtype=dtype), requires_grad=True)

    params: dict[str, Tensor] = {
        "w_in": normal((d, d)),
        "pos": normal((config.max_position, d)),
        "ln_f_g": ones(d),
        "ln_f_b": zeros(d),
        "w_head": normal((d, d)),
    }
    if config.rtg_mode == "linear":
        params["w_pe_rtg"] = normal((1, d))
    for i in range(config.n_layers):
        p = f"l{i}."
        params[p + "w_q"] = normal((d, d))
        params[p + "w_k"] = normal((d, d))
        params[p + "w_v"] = normal((d, d))
        params[p + "w_o"] = normal((d, d), std=0.02 * out_scale)
        params[p + "w_ff1"] = normal((d, 4 * d))
        params[p + "w_ff2"] = normal((4 * d, d), std=0.02 * out_scale)
        params[p + "ln1_g"] = ones(d)
        params[p + "ln1_b"] = zeros(d)
        params[p + "ln2_g"] = ones(d)
        params[p + "ln2_b"] = zeros(d)
        if config.rtg_mode == "condition":
            params[p + "w_k_rtg"] = normal((1, d))
            params[p + "w_v_rtg"] = normal((1, d))
    return params


def param_count(params: dict[str, Tensor]) -> int:
    return int(sum(p.data.size for p in params.values()))


def params_digest(params: dict[str, Tensor]) -> str:
    h = hashlib.sha256()
    for name in sorted(params):
        h.update(name.encode())
        h.update(np.ascontiguousarray(params[name].data).tobytes())
    return h.hexdigest()


class MemoryCache:
    """Per-layer bounded list of detached key/value segment blocks."""

    def __init__(self, n_layers: int, max_blocks: int):
        self.max_blocks = max_blocks
        self.layers: list[list] = [[] for _ in range(n_layers)]
        self.engage_count = 0

    def blocks(self, layer: int) -> list:
        return self.layers[layer]

    def append(self, layer: int, k: Tensor, v: Tensor, positions: np.ndarray) -> None:
        if self.max_blocks == 0:
            return
        entries = self.layers[layer]
        entries.append((k, v, positions))
        while len(entries) > self.max_blocks:
            entries.pop(0)

    def total_cached(self, layer: int) -> int:
        return sum(k.data.shape[1] for k, _, _ in self.layers[layer])


class NonFiniteError(RuntimeError):
    pass


_cache_engagements = 0


def reset_cache_engagements() -> None:
    global _cache_engagements
    _cache_engagements = 0


def cache_engagements() -> int:
    return _cache_engagements


def _attention_mask(k_len: int, cached: int, total: int) -> np.ndarray:
    """Boolean mask, True where attention is FORBIDDEN.

    Queries attend every cached entry and current entries j <= i.
    """
    forbid = np.zeros((k_len, total), dtype=bool)
    cur = np.triu(np.ones((k_len, k_len), dtype=bool), k=1)
    forbid[:, cached:] = cur
    return forbid


def _split_heads(x: Tensor, n_heads: int) -> Tensor:
    b, t, d = x.shape
    return ad.transpose(ad.reshape(x, (b, t, n_heads, d // n_heads)), (0, 2, 1, 3))


def _merge_heads(x: Tensor) -> Tensor:
    b, h, t, dh = x.shape
    return ad.reshape(ad.transpose(x, (0, 2, 1, 3)), (b, t, h * dh))


def attention_layer(x: Tensor, rtg: np.ndarray, params: dict, layer: int,
                    config: ModelConfig, cache: MemoryCache | None,
                    positions: np.ndarray):
    """One attention sublayer; returns output and the detached new cache block."""
    p = f"l{layer}."
    q = ad.matmul(x, params[p + "w_q"])
    k_cur = ad.matmul(x, params[p + "w_k"])
    v_cur = ad.matmul(x, params[p + "w_v"])
    if config.rtg_mode == "condition":
        rtg_col = Tensor(rtg[..., None])  # B x K x 1, constant
        k_cur = ad.add(k_cur, ad.mul(rtg_col, params[p + "w_k_rtg"]))
        v_cur = ad.add(v_cur, ad.mul(rtg_col, params[p + "w_v_rtg"]))

    cached_blocks = cache.blocks(layer) if cache is not None else []
    if cached_blocks:
        k_all = ad.concat([kb for kb, _, _ in cached_blocks] + [k_cur], axis=1)
        v_all = ad.concat([vb for _, vb, _ in cached_blocks] + [v_cur], axis=1)
    else:
        k_all, v_all = k_cur, v_cur
    cached = k_all.shape[1] - k_cur.shape[1]

    qh = _split_heads(q, config.n_heads)
    kh = _split_heads(k_all, config.n_heads)
    vh = _split_heads(v_all, config.n_heads)
    scores = ad.scale(ad.matmul(qh, ad.transpose(kh, (0, 1, 3, 2))),
                      1.0 / np.sqrt(config.head_dim))
    if not np.all(np.isfinite(scores.data)):
        raise NonFiniteError(f"non-finite attention scores in layer {layer}")
    forbid = _attention_mask(x.shape[1], cached, k_all.shape[1])
    scores = ad.masked_fill(scores, forbid, -np.inf)
    attn = ad.softmax(scores, axis=-1)
    y = ad.matmul(_merge_heads(ad.matmul(attn, vh)), params[p + "w_o"])

    new_block = (ad.stop_gradient(k_cur), ad.stop_gradient(v_cur), positions.copy())
    return y, new_block


def forward(params: dict, config: ModelConfig, inputs: np.ndarray, rtg: np.ndarray,
            cache: MemoryCache | None = None, position_offset: int = 0) -> Tensor:
    """Predict the next step vector at every position of one segment.

    `cache`, when given, is consumed and updated in place (one new detached
    block per layer). Positions are absolute episode positions.
    """
    b, k, d = inputs.shape
    if position_offset + k > config.max_position:
        raise ValueError(f"context window [{position_offset}, {position_offset + k}) "
                         f"exceeds max_position {config.max_position}")
    positions = np.arange(position_offset, position_offset + k)
    x = ad.matmul(Tensor(inputs), params["w_in"])
    pos = ad.take(params["pos"], slice(position_offset, position_offset + k))
    x = ad.add(x, pos)
    if config.rtg_mode == "linear":
        x = ad.add(x, ad.mul(Tensor(rtg[..., None]), params["w_pe_rtg"]))

    if cache is not None and any(cache.blocks(i) for i in range(config.n_layers)):
        cache.engage_count += 1
        global _cache_engagements
        _cache_engagements += 1

    for i in range(config.n_layers):
        p = f"l{i}."
        h = ad.layer_norm(x, params[p + "ln1_g"], params[p + "ln1_b"])
        attn_out, new_block = attention_layer(h, rtg, params, i, config, cache, positions)
        x = ad.add(x, attn_out)
        h = ad.layer_norm(x, params[p + "ln2_g"], params[p + "ln2_b"])
        ff = ad.matmul(ad.gelu(ad.matmul(h, params[p + "w_ff1"])), params[p + "w_ff2"])
        x = ad.add(x, ff)
        if cache is not None and config.memory_enabled:
            cache.append(i, *new_block)

    x = ad.layer_norm(x, params["ln_f_g"], params["ln_f_b"])
    return ad.matmul(x, params["w_head"])


def mse_loss(pred: Tensor, targets: np.ndarray, mask: np.ndarray) -> Tensor:
    """Mean squared error over valid positions and vector dimensions."""
    if pred.shape != targets.shape:
        raise ValueError(f"pred shape {pred.shape} != targets shape {targets.shape}")
    valid = int(mask.sum())
    if valid == 0:
        raise ValueError("mse_loss: no valid positions in mask")
    diff = ad.sub(pred, Tensor(targets))
    sq = ad.mul(diff, diff)
    masked = ad.mul(sq, Tensor(mask[..., None].astype(pred.data.dtype)))
    return ad.scale(ad.tsum(masked), 1.0 / (valid * targets.shape[-1]))


def segment_loss(params: dict, config: ModelConfig, segments: list[Batch],
                 cache: MemoryCache | None = None) -> Tensor:
    """Masked MSE accumulated over a chained segment stream."""
    if cache is None and config.memory_enabled:
        cache = MemoryCache(config.n_layers, config.memory_segments)
    total_valid = 0
    pieces = []
    for si, seg in enumerate(segments):
        pred = forward(params, config, seg.inputs, seg.rtg, cache=cache,
                       position_offset=si * seg.inputs.shape[1])
        valid = int(seg.mask.sum())
        if valid == 0:
            continue
        total_valid += valid
        diff = ad.sub(pred, Tensor(seg.targets))
        sq = ad.mul(diff, diff)
        masked = ad.mul(sq, Tensor(seg.mask[..., None].astype(pred.data.dtype)))
        pieces.append(ad.tsum(masked))
    if not pieces:
        raise ValueError("segment stream has no valid positions")
    total = pieces[0]
    for piece in pieces[1:]:
        total = ad.add(total, piece)
    return ad.scale(total, 1.0 / (total_valid * segments[0].inputs.shape[-1]))


def record_segment_caches(params: dict, config: ModelConfig, segments: list[Batch]):
    """Snapshot the cache contents seen by each segment of one stream.

    Finite-difference checks replay the stream against these frozen blocks,
    matching the stop-gradient semantics: cached keys/values are constants,
    not functions of the parameters being perturbed.
    """
    n_layers, m = config.n_layers, config.memory_segments
    cache = MemoryCache(n_layers, m) if m > 0 else None
    frozen = []
    with ad.no_grad():
        for si, seg in enumerate(segments):
            snapshot = []
            for li in range(n_layers):
                blocks = cache.blocks(li) if cache is not None else []
                snapshot.append([(k.data.copy(), v.data.copy(), pos.copy())
                                 for k, v, pos in blocks])
            frozen.append(snapshot)
            forward(params, config, seg.inputs, seg.rtg, cache=cache,
                    position_offset=si * seg.inputs.shape[1])
    return frozen


def segment_loss_frozen_cache(params: dict, config: ModelConfig,
                              segments: list[Batch], frozen) -> Tensor:
    """Masked MSE over a stream whose cache blocks are injected constants."""
    total_valid = 0
    pieces = []
    for si, seg in enumerate(segments):
        cache = MemoryCache(config.n_layers, config.memory_segments) \
            if config.memory_enabled else None
        if cache is not None:
            for li, blocks in enumerate(frozen[si]):
                for kd, vd, pos in blocks:
                    cache.append(li, Tensor(kd), Tensor(vd), pos)
        pred = forward(params, config, seg.inputs, seg.rtg, cache=cache,
                       position_offset=si * seg.inputs.shape[1])
        valid = int(seg.mask.sum())
        if valid == 0:
            continue
        total_valid += valid
        diff = ad.sub(pred, Tensor(seg.targets))
        masked = ad.mul(ad.mul(diff, diff),
                        Tensor(seg.mask[..., None].astype(pred.data.dtype)))
        pieces.append(ad.tsum(masked))
    total = pieces[0]
    for piece in pieces[1:]:
        total = ad.add(total, piece)
    return ad.scale(total, 1.0 / (total_valid * segments[0].inputs.shape[-1]))


def full_gradients(params: dict, config: ModelConfig, batch):
    """Loss and parameter gradients for one batch (or segment stream)."""
    segments = batch if isinstance(batch, list) else [batch]
    for p in params.values():
        p.grad = None
    with ad.fresh_tape() as tape:
        loss = segment_loss(params, config, segments)
        if not np.isfinite(loss.data):
            raise NonFiniteError("non-finite training loss")
        ad.backward(loss, tape)
    grads = {name: (p.grad if p.grad is not None else np.zeros_like(p.data))
             for name, p in params.items()}
    return float(loss.data), grads
