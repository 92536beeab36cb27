"""Returns-to-go, window assembly, padding, and token-count batching."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .catch import OfflineDataset, Trajectory
from .encoding import EncoderParams, encode_step


def compute_rtg(rewards) -> np.ndarray:
    """Suffix sums: rtg[i] = rewards[i] + rtg[i+1], rtg[N] = 0."""
    rewards = np.asarray(rewards, dtype=np.float64)
    return rewards[::-1].cumsum()[::-1].copy()


@dataclass
class ReturnAnnotatedTrajectory:
    base: Trajectory
    rtg: np.ndarray


def annotate(traj: Trajectory) -> ReturnAnnotatedTrajectory:
    if isinstance(traj, ReturnAnnotatedTrajectory):
        traj = traj.base
    return ReturnAnnotatedTrajectory(base=traj, rtg=compute_rtg(traj.rewards))


@dataclass
class TrainingSample:
    encoded_steps: np.ndarray  # K x d_model
    rtg_window: np.ndarray  # K
    targets: np.ndarray  # K x d_model
    validity_mask: np.ndarray  # K bools
    episode_id: int = -1
    offset: int = 0


@dataclass
class Batch:
    inputs: np.ndarray  # B x K x d_model
    rtg: np.ndarray  # B x K
    targets: np.ndarray  # B x K x d_model
    mask: np.ndarray  # B x K bools
    episode_ids: np.ndarray
    offsets: np.ndarray


def encode_trajectory(encoder: EncoderParams, traj: Trajectory, variant: str) -> np.ndarray:
    return np.stack([encode_step(encoder, a, s, variant)
                     for a, s in zip(traj.action_ids, traj.states)])


def episode_stream(annotated: ReturnAnnotatedTrajectory, encoder: EncoderParams,
                   variant: str,
                   encoded: np.ndarray | None = None) -> tuple[np.ndarray, np.ndarray]:
    """Token stream for one episode: an observation-only lead token, then steps.

    The lead token carries a zeroed action half and the first state's
    embedding, so the model learns to predict the first fused step (and hence
    the first action) conditioned on the first observation alone. Closed-loop
    rollout feeds the identical stream, keeping the two distributions aligned.
    Returns (stream, stream_rtg), each one longer than the episode.
    """
    if encoded is None:
        encoded = encode_trajectory(encoder, annotated.base, variant)
    lead = np.zeros_like(encoded[0])
    lead[encoder.d_a:] = encoded[0, encoder.d_a:]
    stream = np.vstack([lead[None], encoded])
    stream_rtg = np.concatenate([annotated.rtg[:1], annotated.rtg])
    return stream, stream_rtg


def window(annotated: ReturnAnnotatedTrajectory, encoder: EncoderParams, K: int,
           offset: int, variant: str,
           encoded: np.ndarray | None = None) -> TrainingSample:
    """Slice K stream positions starting at `offset`; right-pad with zeros.

    Offsets index the episode stream (lead token at 0, step t at t + 1).
    The target at each slot is the next stream token; the mask is false on
    padding and on the final stream token, which has no successor.
    """
    n = len(annotated.base)
    if not (0 <= offset < n + 1):
        raise ValueError(f"offset {offset} out of range for stream of length {n + 1}")
    if K < 1:
        raise ValueError("K must be >= 1")
    stream, stream_rtg = episode_stream(annotated, encoder, variant, encoded=encoded)
    L = stream.shape[0]
    d = stream.shape[1]
    steps = np.zeros((K, d))
    rtg = np.zeros(K)
    targets = np.zeros((K, d))
    mask = np.zeros(K, dtype=bool)
    end = min(offset + K, L)
    steps[: end - offset] = stream[offset:end]
    rtg[: end - offset] = stream_rtg[offset:end]
    # target at window slot j is the stream token at offset + j + 1
    tgt_end = min(offset + K, L - 1)
    if tgt_end > offset:
        targets[: tgt_end - offset] = stream[offset + 1: tgt_end + 1]
        mask[: tgt_end - offset] = True
    return TrainingSample(encoded_steps=steps, rtg_window=rtg, targets=targets,
                          validity_mask=mask, offset=offset)


class EncodedDataset:
    """Per-episode token streams and returns-to-go, computed once."""

    def __init__(self, dataset: OfflineDataset, encoder: EncoderParams, variant: str):
        self.dataset = dataset
        self.encoder = encoder
        self.variant = variant
        self.encodings = [encode_trajectory(encoder, t, variant)
                          for t in dataset.trajectories]
        self.rtgs = [compute_rtg(t.rewards) for t in dataset.trajectories]
        streams = [episode_stream(ReturnAnnotatedTrajectory(base=t, rtg=r),
                                  encoder, variant, encoded=e)
                   for t, r, e in zip(dataset.trajectories, self.rtgs, self.encodings)]
        self.streams = [s for s, _ in streams]
        self.stream_rtgs = [r for _, r in streams]
        self.lengths = np.array([len(t) for t in dataset.trajectories])
        self.stream_lengths = self.lengths + 1

    @property
    def d_model(self) -> int:
        return self.encodings[0].shape[1]


def _stack(samples: list[TrainingSample]) -> Batch:
    return Batch(inputs=np.stack([s.encoded_steps for s in samples]),
                 rtg=np.stack([s.rtg_window for s in samples]),
                 targets=np.stack([s.targets for s in samples]),
                 mask=np.stack([s.validity_mask for s in samples]),
                 episode_ids=np.array([s.episode_id for s in samples]),
                 offsets=np.array([s.offset for s in samples]))


def _sample_from_arrays(enc: EncodedDataset, ep: int, offset: int, K: int) -> TrainingSample:
    stream, stream_rtg = enc.streams[ep], enc.stream_rtgs[ep]
    L, d = stream.shape
    steps = np.zeros((K, d))
    rtg = np.zeros(K)
    targets = np.zeros((K, d))
    mask = np.zeros(K, dtype=bool)
    end = min(offset + K, L)
    steps[: end - offset] = stream[offset:end]
    rtg[: end - offset] = stream_rtg[offset:end]
    tgt_end = min(offset + K, L - 1)
    if tgt_end > offset:
        targets[: tgt_end - offset] = stream[offset + 1: tgt_end + 1]
        mask[: tgt_end - offset] = True
    return TrainingSample(encoded_steps=steps, rtg_window=rtg, targets=targets,
                          validity_mask=mask, episode_id=ep, offset=offset)


def batch_size_for(batch_tokens: int, K: int) -> int:
    return batch_tokens // K


def make_batches(enc: EncodedDataset, K: int, batch_tokens: int,
                 rng: np.random.Generator):
    """Infinite stream of batches of uniformly sampled (episode, offset) windows."""
    if not enc.dataset.trajectories:
        raise ValueError("dataset is empty")
    # stream offsets with at least one valid target: 0 .. L-2
    valid = [(ep, off) for ep, L in enumerate(enc.stream_lengths)
             for off in range(int(L) - 1)]
    if K > int(enc.stream_lengths.max()):
        raise ValueError(f"window K={K} exceeds every episode stream length "
                         f"(max {int(enc.stream_lengths.max())})")
    if not valid:
        raise ValueError("no episode has a step with a successor")
    B = batch_size_for(batch_tokens, K)
    if B < 1:
        raise ValueError("batch_tokens smaller than one window")
    while True:
        picks = rng.integers(0, len(valid), size=B)
        yield _stack([_sample_from_arrays(enc, *valid[i], K) for i in picks])


def make_segment_batches(enc: EncodedDataset, K: int, batch_tokens: int,
                         rng: np.random.Generator):
    """Infinite stream of segment lists for memory training.

    Samples whole episodes and splits each into consecutive K-step segments
    (offsets 0, K, 2K, ...) so cached keys/values chain across segments.
    """
    n_eps = len(enc.dataset.trajectories)
    if n_eps == 0:
        raise ValueError("dataset is empty")
    B = batch_size_for(batch_tokens, K)
    if B < 1:
        raise ValueError("batch_tokens smaller than one window")
    n = int(enc.stream_lengths.min())
    if int(enc.stream_lengths.max()) != n:
        raise ValueError("memory training requires uniform episode lengths")
    n_segments = (n + K - 1) // K
    while True:
        eps = rng.integers(0, n_eps, size=B)
        yield [
            _stack([_sample_from_arrays(enc, ep, seg * K, K) for ep in eps])
            for seg in range(n_segments)
        ]
