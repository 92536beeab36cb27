"""Frozen bimodal step encoder: action text and state image halves.

Action prompts are tokenized, looked up in a seeded-random table, and
mean-pooled; state images are flattened row-major and passed through a
seeded-random linear projection. The two halves concatenate into one
fixed-width step vector. Nothing here is ever trained.
"""

from __future__ import annotations

import hashlib
import re
from dataclasses import dataclass, field

import numpy as np

from .catch import CatchConfig

_TOKEN_RE = re.compile(r"[a-z0-9]+")


def tokenize(text: str) -> list[str]:
    return _TOKEN_RE.findall(text.lower())


@dataclass
class EncoderParams:
    vocabulary: tuple  # sorted token strings
    token_table: np.ndarray  # |vocab| x d_a, frozen
    state_projection: np.ndarray  # (H * W) x d_s, frozen
    d_a: int
    d_s: int
    grid_height: int
    grid_width: int
    prompts: dict = field(default_factory=dict)  # variant -> {action_id: text}

    @property
    def d_model(self) -> int:
        return self.d_a + self.d_s

    def token_index(self, token: str) -> int:
        return self._index[token]

    def __post_init__(self):
        self._index = {t: i for i, t in enumerate(self.vocabulary)}


def build_encoder(catalogs: dict, config: CatchConfig, seed: int,
                  d_a: int = 64, d_s: int = 64) -> EncoderParams:
    """Build frozen tables covering every token of every prompt variant."""
    if not catalogs:
        raise ValueError("empty prompt catalog")
    if d_a < 8 or d_s < 8:
        raise ValueError("d_a and d_s must be >= 8")
    prompts = {variant: {p.action_id: p.text for p in entries}
               for variant, entries in catalogs.items()}
    vocab = sorted({tok for texts in prompts.values()
                    for text in texts.values() for tok in tokenize(text)})
    rng = np.random.default_rng(np.random.SeedSequence(entropy=seed, spawn_key=(0,)))
    token_table = rng.normal(0.0, 1.0 / np.sqrt(d_a), size=(len(vocab), d_a))
    state_projection = rng.normal(0.0, 1.0 / np.sqrt(d_s),
                                  size=(config.grid_height * config.grid_width, d_s))
    return EncoderParams(vocabulary=tuple(vocab), token_table=token_table,
                         state_projection=state_projection, d_a=d_a, d_s=d_s,
                         grid_height=config.grid_height, grid_width=config.grid_width,
                         prompts=prompts)


def encode_action(params: EncoderParams, action_id: int, variant: str) -> np.ndarray:
    texts = params.prompts.get(variant)
    if texts is None:
        raise ValueError(f"unknown prompt variant {variant!r}")
    text = texts.get(action_id)
    if text is None:
        raise ValueError(f"unknown action id {action_id} for variant {variant!r}")
    rows = [params.token_index(t) for t in tokenize(text)]
    return params.token_table[rows].mean(axis=0)


def encode_state(params: EncoderParams, image: np.ndarray) -> np.ndarray:
    image = np.asarray(image)
    if image.shape != (params.grid_height, params.grid_width):
        raise ValueError(f"state shape {image.shape} does not match configured grid "
                         f"({params.grid_height}, {params.grid_width})")
    return image.reshape(-1).astype(np.float64) @ params.state_projection


def encode_step(params: EncoderParams, action_id: int, image: np.ndarray,
                variant: str) -> np.ndarray:
    return np.concatenate([encode_action(params, action_id, variant),
                           encode_state(params, image)])


def action_embedding_matrix(params: EncoderParams, variant: str) -> np.ndarray:
    """All action embeddings stacked by id; used by nearest-neighbor decode."""
    ids = sorted(params.prompts[variant])
    return np.stack([encode_action(params, a, variant) for a in ids])


def decode_margin(params: EncoderParams, variant: str) -> float:
    """Gap between nearest and second-nearest catalog embedding over exact inputs.

    Positive margin guarantees exact embeddings decode to their own id.
    """
    emb = action_embedding_matrix(params, variant)
    worst = np.inf
    for k in range(emb.shape[0]):
        d = np.linalg.norm(emb - emb[k], axis=1)
        d[k] = np.inf
        worst = min(worst, float(d.min()))
    return worst


def encoder_digest(params: EncoderParams) -> str:
    h = hashlib.sha256()
    h.update("|".join(params.vocabulary).encode())
    h.update(np.ascontiguousarray(params.token_table).tobytes())
    h.update(np.ascontiguousarray(params.state_projection).tobytes())
    for variant in sorted(params.prompts):
        for a in sorted(params.prompts[variant]):
            h.update(f"{variant}:{a}:{params.prompts[variant][a]}".encode())
    return h.hexdigest()
