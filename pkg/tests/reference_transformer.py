"""Independent numpy-only reference: a vanilla pre-norm causal transformer.

Written directly from the textbook equations (no shared code with the
package's model module) so agreement between the two is meaningful evidence.
"""

import numpy as np
from scipy.special import erf

LN_EPS = 1e-5


def _ln(x, g, b):
    mu = x.mean(axis=-1, keepdims=True)
    var = x.var(axis=-1, keepdims=True)
    return (x - mu) / np.sqrt(var + LN_EPS) * g + b


def _gelu(x):
    return 0.5 * x * (1.0 + erf(x / np.sqrt(2.0)))


def _causal_softmax(scores):
    t = scores.shape[-1]
    mask = np.triu(np.ones((t, t), dtype=bool), k=1)
    scores = np.where(mask, -np.inf, scores)
    scores = scores - scores.max(axis=-1, keepdims=True)
    e = np.exp(scores)
    return e / e.sum(axis=-1, keepdims=True)


def vanilla_forward(arrays: dict, n_layers: int, n_heads: int,
                    inputs: np.ndarray) -> np.ndarray:
    """Forward a B x T x d batch through a plain causal transformer.

    `arrays` maps the package's parameter names to plain ndarrays; RTG
    projections, if present, are ignored (callers zero them to compare).
    """
    b, t, d = inputs.shape
    hd = d // n_heads
    x = inputs @ arrays["w_in"] + arrays["pos"][:t]
    for i in range(n_layers):
        p = f"l{i}."
        h = _ln(x, arrays[p + "ln1_g"], arrays[p + "ln1_b"])
        q = h @ arrays[p + "w_q"]
        k = h @ arrays[p + "w_k"]
        v = h @ arrays[p + "w_v"]
        # split heads: B x H x T x hd
        q = q.reshape(b, t, n_heads, hd).transpose(0, 2, 1, 3)
        k = k.reshape(b, t, n_heads, hd).transpose(0, 2, 1, 3)
        v = v.reshape(b, t, n_heads, hd).transpose(0, 2, 1, 3)
        attn = _causal_softmax(q @ k.transpose(0, 1, 3, 2) / np.sqrt(hd))
        y = (attn @ v).transpose(0, 2, 1, 3).reshape(b, t, d)
        x = x + y @ arrays[p + "w_o"]
        h = _ln(x, arrays[p + "ln2_g"], arrays[p + "ln2_b"])
        x = x + _gelu(h @ arrays[p + "w_ff1"]) @ arrays[p + "w_ff2"]
    x = _ln(x, arrays["ln_f_g"], arrays["ln_f_b"])
    return x @ arrays["w_head"]
