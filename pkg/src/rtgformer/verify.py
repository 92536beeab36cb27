"""Finite-difference verification suite behind the `gradcheck` command."""

from __future__ import annotations

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .model import (ModelConfig, init_params, record_segment_caches,
                    segment_loss, segment_loss_frozen_cache)
from .sequences import Batch

THRESHOLD = 1e-4


def _rand(rng, *shape):
    return rng.normal(size=shape)


def check_primitives(trials: int = 5, seed: int = 0):
    """Grad-check every primitive on randomized small inputs."""
    rng = np.random.default_rng(seed)
    results = {}

    def check(name, make_loss, n_params):
        worst = 0.0
        worst_at = ""
        for t in range(trials):
            params = {f"x{i}": Tensor(_rand(rng, 3, 4), requires_grad=True)
                      for i in range(n_params)}
            err, where = ad.grad_check(lambda: make_loss(params), params)
            if err > worst:
                worst, worst_at = err, f"trial{t}:{where}"
        results[name] = (worst, worst_at)

    w = Tensor(_rand(rng, 4, 5))
    check("matmul", lambda p: ad.tsum(ad.mul(ad.matmul(p["x0"], w),
                                             ad.matmul(p["x1"], w))), 2)
    check("add", lambda p: ad.tsum(ad.mul(ad.add(p["x0"], p["x1"]),
                                          ad.add(p["x0"], p["x1"]))), 2)
    check("sub", lambda p: ad.tsum(ad.mul(ad.sub(p["x0"], p["x1"]),
                                          ad.sub(p["x0"], p["x1"]))), 2)
    check("mul", lambda p: ad.tsum(ad.mul(p["x0"], p["x1"])), 2)
    check("scale", lambda p: ad.tsum(ad.mul(ad.scale(p["x0"], 2.5),
                                            ad.scale(p["x0"], -0.5))), 1)
    check("softmax", lambda p: ad.tsum(ad.mul(ad.softmax(p["x0"], axis=-1),
                                              p["x1"])), 2)
    gain = Tensor(_rand(rng, 4), requires_grad=True)
    bias = Tensor(_rand(rng, 4), requires_grad=True)
    check("layer_norm", lambda p: ad.tsum(ad.mul(
        ad.layer_norm(p["x0"], gain, bias), p["x1"])), 2)
    check("gelu", lambda p: ad.tsum(ad.mul(ad.gelu(p["x0"]), p["x1"])), 2)
    check("concat", lambda p: ad.tsum(ad.mul(
        ad.concat([p["x0"], p["x1"]], axis=0),
        ad.concat([p["x1"], p["x0"]], axis=0))), 2)
    check("slice", lambda p: ad.tsum(ad.mul(ad.take(p["x0"], (slice(0, 2), slice(1, 3))),
                                            ad.take(p["x1"], (slice(1, 3), slice(0, 2))))), 2)
    ids = np.array([0, 2, 1, 2])
    check("embedding_lookup", lambda p: ad.tsum(ad.mul(
        ad.embedding_lookup(p["x0"], ids), ad.embedding_lookup(p["x1"], ids))), 2)
    check("transpose", lambda p: ad.tsum(ad.mul(ad.transpose(p["x0"], (1, 0)),
                                                ad.transpose(p["x1"], (1, 0)))), 2)
    check("reshape", lambda p: ad.tsum(ad.mul(ad.reshape(p["x0"], (2, 6)),
                                              ad.reshape(p["x1"], (2, 6)))), 2)
    fmask = np.zeros((3, 4), dtype=bool)
    fmask[0, 1] = fmask[2, 3] = True
    check("masked_fill", lambda p: ad.tsum(ad.mul(ad.masked_fill(p["x0"], fmask, 7.0),
                                                  p["x1"])), 2)
    check("mean", lambda p: ad.mean(ad.mul(p["x0"], p["x0"])), 1)
    check("sum", lambda p: ad.tsum(ad.mul(ad.tsum(p["x0"], axis=0, keepdims=True),
                                          p["x1"])), 2)

    # stop_gradient admits an exact identity: d/dx sum(sg(x) * x) = x
    worst = 0.0
    for _ in range(trials):
        x = Tensor(_rand(rng, 3, 4), requires_grad=True)
        with ad.fresh_tape() as tape:
            loss = ad.tsum(ad.mul(ad.stop_gradient(x), x))
            ad.backward(loss, tape)
        worst = max(worst, float(np.abs(x.grad - x.data).max()))
    results["stop_gradient"] = (worst, "identity d/dx sum(sg(x)*x) = x")
    return results


def check_mlp(seed: int = 0):
    """Three-layer MLP, ~50 parameters, against central differences."""
    rng = np.random.default_rng(seed)
    params = {
        "w1": Tensor(_rand(rng, 3, 4), requires_grad=True),
        "w2": Tensor(_rand(rng, 4, 4), requires_grad=True),
        "w3": Tensor(_rand(rng, 4, 2), requires_grad=True),
        "b": Tensor(_rand(rng, 2), requires_grad=True),
    }
    x = Tensor(_rand(rng, 5, 3))
    target = Tensor(_rand(rng, 5, 2))

    def loss():
        h = ad.gelu(ad.matmul(x, params["w1"]))
        h = ad.gelu(ad.matmul(h, params["w2"]))
        out = ad.add(ad.matmul(h, params["w3"]), params["b"])
        diff = ad.sub(out, target)
        return ad.mean(ad.mul(diff, diff))

    return ad.grad_check(loss, params)


def _tiny_segments(rng, b, k, d, n_segments):
    segs = []
    for _ in range(n_segments):
        mask = np.ones((b, k), dtype=bool)
        segs.append(Batch(inputs=_rand(rng, b, k, d), rtg=_rand(rng, b, k),
                          targets=_rand(rng, b, k, d), mask=mask,
                          episode_ids=np.zeros(b, int), offsets=np.zeros(b, int)))
    segs[-1].mask[:, -1] = False
    return segs


def check_attention_block(seed: int = 0):
    """Single-layer attention with return conditioning."""
    rng = np.random.default_rng(seed)
    cfg = ModelConfig(d_model=8, n_heads=1, n_layers=1, context_len=4,
                      rtg_mode="condition", memory_segments=0, max_position=8)
    params = init_params(cfg, seed=seed)
    segs = _tiny_segments(rng, 2, 4, 8, 1)
    return ad.grad_check(lambda: segment_loss(params, cfg, segs), params)


def check_full_model(seed: int = 0, inject_fault: bool = False):
    """Full model: d=8, 1 head, 2 layers, K=6, M=2, condition mode, float64.

    Cached blocks are frozen at the base point, matching stop-gradient
    semantics, so finite differences see gradients through the current
    segment only.
    """
    rng = np.random.default_rng(seed)
    cfg = ModelConfig(d_model=8, n_heads=1, n_layers=2, context_len=6,
                      rtg_mode="condition", memory_segments=2, max_position=24)
    params = init_params(cfg, seed=seed)
    segs = _tiny_segments(rng, 2, 6, 8, 3)
    frozen = record_segment_caches(params, cfg, segs)
    err, where = ad.grad_check(
        lambda: segment_loss_frozen_cache(params, cfg, segs, frozen), params)
    if inject_fault:
        # test fixture: pretend one gradient rule is broken
        err = max(err, 1.0)
        where = "injected-fault"
    return err, where


def run_suite(inject_fault: bool = False, trials: int = 5):
    """All components; returns list of (component, worst error, location)."""
    rows = []
    for name, (err, where) in check_primitives(trials=trials).items():
        rows.append((f"primitive:{name}", err, where))
    err, where = check_mlp()
    rows.append(("mlp", err, where))
    err, where = check_attention_block()
    rows.append(("attention_rtg_block", err, where))
    err, where = check_full_model(inject_fault=inject_fault)
    rows.append(("full_model_memory", err, where))
    return rows
