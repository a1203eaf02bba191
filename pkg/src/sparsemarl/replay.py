"""Episode-form storage and the dual FIFO replay buffers.

One large buffer keeps an off-policy history; a second small buffer keeps
only the most recent episodes, so each sampled batch mixes stale and
near-on-policy data. Episodes are immutable once pushed.
"""
from __future__ import annotations

import json
from collections import deque
from dataclasses import dataclass, field

import numpy as np


@dataclass
class Episode:
    """One full trajectory, arrays indexed by timestep.

    states/obs/avail have T+1 entries (the final entry is the post-terminal
    or truncation state needed for bootstrapping); actions/rewards have T.
    `terminated` is True when the environment ended the episode, False when
    it was cut off at the episode limit.
    """

    states: np.ndarray       # (T+1, state_dim)
    obs: np.ndarray          # (T+1, n_agents, obs_dim)
    avail: np.ndarray        # (T+1, n_agents, n_actions)
    actions: np.ndarray      # (T, n_agents)
    rewards: np.ndarray      # (T,)
    terminated: bool
    tag: int = 0             # opaque sequence number for audits

    def __post_init__(self):
        t = self.rewards.shape[0]
        if t < 1:
            raise ValueError("episode must contain at least one step")
        if self.actions.shape[0] != t or self.states.shape[0] != t + 1 \
                or self.obs.shape[0] != t + 1 or self.avail.shape[0] != t + 1:
            raise ValueError(
                f"misaligned episode arrays: T={t}, states={self.states.shape}, "
                f"obs={self.obs.shape}, avail={self.avail.shape}, actions={self.actions.shape}"
            )
        taken = np.take_along_axis(
            self.avail[:t], self.actions[:, :, None], axis=2)[:, :, 0]
        if not np.all(taken > 0):
            raise ValueError("episode contains actions outside the available sets")

    @property
    def length(self) -> int:
        return int(self.rewards.shape[0])

    @property
    def total_reward(self) -> float:
        return float(self.rewards.sum())


class DualBuffer:
    """Two FIFO rings pushed in lockstep: B1 large (offline), B2 small (online)."""

    def __init__(self, capacity_offline: int, capacity_online: int,
                 batch_offline: int, batch_online: int):
        if capacity_online > capacity_offline:
            raise ValueError("online capacity must not exceed offline capacity")
        self.b1 = deque(maxlen=capacity_offline)
        self.b2 = deque(maxlen=capacity_online)
        self.batch_offline = batch_offline
        self.batch_online = batch_online
        self.pushes = 0

    def push(self, ep: Episode) -> None:
        self.b1.append(ep)
        self.b2.append(ep)
        self.pushes += 1

    def can_sample(self) -> bool:
        return len(self.b1) >= self.batch_offline and len(self.b2) >= self.batch_online

    def sample(self, rng: np.random.Generator) -> list:
        """b1 + b2 episodes, uniform without replacement within each buffer.

        Overlap across the two sub-draws is allowed: the buffers share their
        most recent episodes by design.
        """
        if len(self.b1) < self.batch_offline or len(self.b2) < self.batch_online:
            raise ValueError(
                f"not enough episodes: |B1|={len(self.b1)} (need {self.batch_offline}), "
                f"|B2|={len(self.b2)} (need {self.batch_online})"
            )
        batch = []
        if self.batch_offline:
            idx = rng.choice(len(self.b1), size=self.batch_offline, replace=False)
            batch.extend(self.b1[int(i)] for i in idx)
        if self.batch_online:
            idx = rng.choice(len(self.b2), size=self.batch_online, replace=False)
            batch.extend(self.b2[int(i)] for i in idx)
        return batch


@dataclass
class Batch:
    """Episodes padded to a rectangle; batch is always the trailing axis."""

    states: np.ndarray       # (L+1, state_dim, B)
    obs: np.ndarray          # (L+1, n_agents, obs_dim, B)
    avail: np.ndarray        # (L+1, n_agents, n_actions, B)
    actions: np.ndarray      # (L, n_agents, B)
    rewards: np.ndarray      # (L, B)
    valid: np.ndarray        # (L, B); 1.0 marks real steps
    terminated: np.ndarray   # (B,) bool
    lengths: np.ndarray      # (B,)

    @property
    def max_len(self) -> int:
        return int(self.rewards.shape[0])

    @property
    def size(self) -> int:
        return int(self.rewards.shape[1])


def pad_batch(episodes: list) -> Batch:
    """Stack episodes, padding to the longest one.

    Padding steps carry valid=0 so they contribute nothing to losses;
    padded avail entries are all-ones so masked operators stay well defined.
    """
    if not episodes:
        raise ValueError("cannot pad an empty batch")
    bsz = len(episodes)
    lmax = max(ep.length for ep in episodes)
    state_dim = episodes[0].states.shape[1]
    n_agents, obs_dim = episodes[0].obs.shape[1:]
    n_actions = episodes[0].avail.shape[2]

    states = np.zeros((lmax + 1, state_dim, bsz))
    obs = np.zeros((lmax + 1, n_agents, obs_dim, bsz))
    avail = np.ones((lmax + 1, n_agents, n_actions, bsz))
    actions = np.zeros((lmax, n_agents, bsz), dtype=np.int64)
    rewards = np.zeros((lmax, bsz))
    valid = np.zeros((lmax, bsz))
    terminated = np.zeros(bsz, dtype=bool)
    lengths = np.zeros(bsz, dtype=np.int64)

    for b, ep in enumerate(episodes):
        t = ep.length
        states[:t + 1, :, b] = ep.states
        obs[:t + 1, :, :, b] = ep.obs
        avail[:t + 1, :, :, b] = ep.avail
        actions[:t, :, b] = ep.actions
        rewards[:t, b] = ep.rewards
        valid[:t, b] = 1.0
        terminated[b] = ep.terminated
        lengths[b] = t
    return Batch(states, obs, avail, actions, rewards, valid, terminated, lengths)


# ---------------------------------------------------------------------------
# optional dump/restore for reproducibility
# ---------------------------------------------------------------------------


def save_buffer(path, buf: DualBuffer, config_hash: str) -> None:
    episodes = list(buf.b1)
    payload = {}
    meta = {
        "config_hash": config_hash,
        "n": len(episodes),
        "pushes": buf.pushes,
        "capacity_offline": buf.b1.maxlen,
        "capacity_online": buf.b2.maxlen,
        "batch_offline": buf.batch_offline,
        "batch_online": buf.batch_online,
        "terminated": [bool(ep.terminated) for ep in episodes],
        "tags": [int(ep.tag) for ep in episodes],
    }
    for i, ep in enumerate(episodes):
        payload[f"ep{i:06d}/states"] = ep.states
        payload[f"ep{i:06d}/obs"] = ep.obs
        payload[f"ep{i:06d}/avail"] = ep.avail
        payload[f"ep{i:06d}/actions"] = ep.actions
        payload[f"ep{i:06d}/rewards"] = ep.rewards
    payload["__meta__"] = np.frombuffer(json.dumps(meta).encode(), dtype=np.uint8)
    np.savez_compressed(path, **payload)


def load_buffer(path) -> tuple:
    """Returns (DualBuffer, config_hash). B2 recency is rebuilt from B1 order."""
    with np.load(path) as data:
        meta = json.loads(bytes(data["__meta__"]).decode())
        buf = DualBuffer(meta["capacity_offline"], meta["capacity_online"],
                         meta["batch_offline"], meta["batch_online"])
        for i in range(meta["n"]):
            buf.push(Episode(
                states=data[f"ep{i:06d}/states"],
                obs=data[f"ep{i:06d}/obs"],
                avail=data[f"ep{i:06d}/avail"],
                actions=data[f"ep{i:06d}/actions"],
                rewards=data[f"ep{i:06d}/rewards"],
                terminated=meta["terminated"][i],
                tag=meta["tags"][i],
            ))
        buf.pushes = meta["pushes"]
    return buf, meta["config_hash"]
