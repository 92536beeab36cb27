"""Deterministic Catch environment, scripted policies, and offline dataset files.

One episode: a ball drops from a uniformly random column of the top row, one
row per step; the paddle starts at the bottom-center cell and moves one cell
per action. Terminal reward +1 if the paddle is under the ball, else -1.
Every episode lasts exactly grid_height - 1 steps.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np

ACTION_NOOP = 0
ACTION_LEFT = 1
ACTION_RIGHT = 2
ACTIONS = (ACTION_NOOP, ACTION_LEFT, ACTION_RIGHT)

DATASET_FORMAT_VERSION = 1


@dataclass(frozen=True)
class CatchConfig:
    grid_width: int = 7
    grid_height: int = 7

    def __post_init__(self):
        if self.grid_width < 3 or self.grid_height < 3:
            raise ValueError("grid must be at least 3x3")

    @property
    def episode_length(self) -> int:
        return self.grid_height - 1


@dataclass
class CatchState:
    ball_row: int
    ball_col: int
    paddle_col: int
    done: bool = False


@dataclass
class Trajectory:
    states: list  # list of (H, W) 0/1 int arrays, the pre-action observations
    action_ids: list
    rewards: list

    @property
    def total_return(self) -> float:
        return float(sum(self.rewards))

    def __len__(self):
        return len(self.rewards)


@dataclass
class OfflineDataset:
    config: CatchConfig
    policy: str
    seed: int
    trajectories: list
    mean_return: float = 0.0
    expert_return: float = 0.0
    random_return: float = 0.0

    def recompute_mean(self) -> None:
        self.mean_return = float(np.mean([t.total_return for t in self.trajectories]))


def render(state: CatchState, config: CatchConfig) -> np.ndarray:
    img = np.zeros((config.grid_height, config.grid_width), dtype=np.int8)
    img[state.ball_row, state.ball_col] = 1
    img[config.grid_height - 1, state.paddle_col] = 1
    return img


def reset(config: CatchConfig, seed_or_rng) -> tuple[CatchState, np.ndarray]:
    rng = seed_or_rng if isinstance(seed_or_rng, np.random.Generator) \
        else np.random.default_rng(seed_or_rng)
    ball_col = int(rng.integers(0, config.grid_width))
    state = CatchState(ball_row=0, ball_col=ball_col,
                       paddle_col=config.grid_width // 2)
    return state, render(state, config)


def step(config: CatchConfig, state: CatchState, action_id: int):
    """Advance one step: paddle moves (clamped), ball descends one row."""
    if action_id not in ACTIONS:
        raise ValueError(f"unknown action_id {action_id}; valid ids are {ACTIONS}")
    if state.done:
        raise ValueError("episode already terminated")
    if action_id == ACTION_LEFT:
        paddle = max(0, state.paddle_col - 1)
    elif action_id == ACTION_RIGHT:
        paddle = min(config.grid_width - 1, state.paddle_col + 1)
    else:
        paddle = state.paddle_col
    ball_row = state.ball_row + 1
    done = ball_row == config.grid_height - 1
    reward = 0.0
    if done:
        reward = 1.0 if state.ball_col == paddle else -1.0
    new_state = CatchState(ball_row=ball_row, ball_col=state.ball_col,
                           paddle_col=paddle, done=done)
    return new_state, render(new_state, config), reward, done


# ---------------------------------------------------------------------------
# policies
# ---------------------------------------------------------------------------

def expert_policy(state: CatchState) -> int:
    if state.ball_col < state.paddle_col:
        return ACTION_LEFT
    if state.ball_col > state.paddle_col:
        return ACTION_RIGHT
    return ACTION_NOOP


def random_policy(state: CatchState, rng: np.random.Generator) -> int:
    return int(rng.integers(0, len(ACTIONS)))


def medium_policy(state: CatchState, rng: np.random.Generator, epsilon: float = 0.5) -> int:
    if rng.random() < epsilon:
        return int(rng.integers(0, len(ACTIONS)))
    return expert_policy(state)


_POLICIES = ("random", "medium", "medium-replay", "expert")


def _episode_rng(seed: int, index: int) -> np.random.Generator:
    # per-episode stream so generation order never matters
    return np.random.default_rng(np.random.SeedSequence(entropy=seed, spawn_key=(index,)))


def play_episode(config: CatchConfig, policy: str, seed: int, index: int) -> Trajectory:
    rng = _episode_rng(seed, index)
    if policy == "medium-replay":
        policy = "random" if index % 2 == 0 else "medium"
    state, image = reset(config, rng)
    states, actions, rewards = [], [], []
    while not state.done:
        if policy == "expert":
            a = expert_policy(state)
        elif policy == "medium":
            a = medium_policy(state, rng)
        elif policy == "random":
            a = random_policy(state, rng)
        else:
            raise ValueError(f"unknown policy {policy!r}; valid: {_POLICIES}")
        states.append(image)
        actions.append(a)
        state, image, reward, done = step(config, state, a)
        rewards.append(reward)
    return Trajectory(states=states, action_ids=actions, rewards=rewards)


def policy_mean_return(config: CatchConfig, policy: str, n_episodes: int, seed: int) -> float:
    total = 0.0
    for i in range(n_episodes):
        total += play_episode(config, policy, seed, i).total_return
    return total / n_episodes


def generate_dataset(config: CatchConfig, policy: str, n_episodes: int, seed: int,
                     reference_episodes: int = 10_000) -> OfflineDataset:
    """Collect episodes plus measured expert/random reference returns."""
    if policy not in _POLICIES:
        raise ValueError(f"unknown policy {policy!r}; valid: {_POLICIES}")
    if n_episodes < 1:
        raise ValueError("n_episodes must be >= 1")
    trajs = [play_episode(config, policy, seed, i) for i in range(n_episodes)]
    ds = OfflineDataset(config=config, policy=policy, seed=seed, trajectories=trajs)
    ds.recompute_mean()
    # reference returns are measured, never asserted from a closed form
    ds.expert_return = policy_mean_return(config, "expert", min(1000, reference_episodes),
                                          seed=seed + 1)
    ds.random_return = policy_mean_return(config, "random", reference_episodes,
                                          seed=seed + 2)
    return ds


# ---------------------------------------------------------------------------
# prompt catalog
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class ActionPrompt:
    action_id: int
    variant: str
    text: str


_PROMPTS = {
    "original": {
        ACTION_NOOP: "Does nothing, allowing the game to continue unchanged.",
        ACTION_LEFT: "Shifts the paddle to the left, intercepting the ball.",
        ACTION_RIGHT: "Shifts the paddle to the right, intercepting the ball.",
    },
    "synonyms": {
        ACTION_NOOP: "Remains idle, letting play proceed untouched.",
        ACTION_LEFT: "Slides the bat leftward to snare the falling sphere.",
        ACTION_RIGHT: "Slides the bat rightward to snare the falling sphere.",
    },
    "contextual": {
        ACTION_NOOP: "What would happen if no move were made while the ball keeps dropping?",
        ACTION_LEFT: "What would happen if the paddle were shifted to the left to catch the ball?",
        ACTION_RIGHT: "What would happen if the paddle were shifted to the right to catch the ball?",
    },
}

PROMPT_VARIANTS = tuple(_PROMPTS.keys())


def prompt_catalog(variant: str) -> list[ActionPrompt]:
    if variant not in _PROMPTS:
        raise ValueError(f"unknown prompt variant {variant!r}; valid: {PROMPT_VARIANTS}")
    return [ActionPrompt(action_id=a, variant=variant, text=t)
            for a, t in sorted(_PROMPTS[variant].items())]


def all_prompt_catalogs() -> dict[str, list[ActionPrompt]]:
    return {v: prompt_catalog(v) for v in PROMPT_VARIANTS}


# ---------------------------------------------------------------------------
# dataset file format (JSON, bit-exact for a fixed seed)
# ---------------------------------------------------------------------------

def write_dataset(ds: OfflineDataset, path) -> None:
    path = Path(path)
    doc = {
        "format_version": DATASET_FORMAT_VERSION,
        "env_config": {"grid_width": ds.config.grid_width,
                       "grid_height": ds.config.grid_height},
        "policy": ds.policy,
        "seed": ds.seed,
        "n_episodes": len(ds.trajectories),
        "mean_return": ds.mean_return,
        "expert_return": ds.expert_return,
        "random_return": ds.random_return,
        "episodes": [
            {
                "states": [s.reshape(-1).astype(int).tolist() for s in t.states],
                "actions": [int(a) for a in t.action_ids],
                "rewards": [float(r) for r in t.rewards],
            }
            for t in ds.trajectories
        ],
    }
    try:
        path.write_text(json.dumps(doc, separators=(",", ":")) + "\n")
    except OSError as e:
        raise OSError(f"cannot write dataset to {path}: {e}") from e


def read_dataset(path) -> OfflineDataset:
    doc = json.loads(Path(path).read_text())
    if doc.get("format_version") != DATASET_FORMAT_VERSION:
        raise ValueError(f"unsupported dataset format version in {path}")
    cfg = CatchConfig(**doc["env_config"])
    h, w = cfg.grid_height, cfg.grid_width
    trajs = []
    for ep in doc["episodes"]:
        states = [np.asarray(s, dtype=np.int8).reshape(h, w) for s in ep["states"]]
        trajs.append(Trajectory(states=states, action_ids=list(ep["actions"]),
                                rewards=[float(r) for r in ep["rewards"]]))
    return OfflineDataset(config=cfg, policy=doc["policy"], seed=doc["seed"],
                          trajectories=trajs,
                          mean_return=doc["mean_return"],
                          expert_return=doc["expert_return"],
                          random_return=doc["random_return"])


def file_digest(path) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()
