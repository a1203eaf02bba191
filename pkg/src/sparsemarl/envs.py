"""Desk-scale cooperative Dec-POMDP environments and exact tabular solvers.

Every environment is a fully enumerable tabular model: matrix games with a
miscoordination penalty (the overestimation trigger) and a grid-coverage
task with limited-radius observations. The same tables drive both the
rollout interface and the value-iteration / policy-evaluation oracles.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

ENUMERATION_LIMIT = 100_000

GRID_MOVES = ((0, 0), (0, -1), (0, 1), (-1, 0), (1, 0))  # stay, up, down, left, right


@dataclass
class DecPomdpSpec:
    """Tabular Dec-POMDP over joint actions.

    Exactly one of `transitions` (S, A, S) or `next_state` (S, A) is set;
    the latter is the compact form for deterministic dynamics. Joint action
    index j decodes to per-agent actions via C-order unraveling over
    (n_actions,) * n_agents.
    """

    name: str
    n_agents: int
    n_actions: int
    n_states: int
    rewards: np.ndarray               # (S, A)
    terminal: np.ndarray              # (S,) bool, absorbing
    state_features: np.ndarray        # (S, state_dim)
    observations: np.ndarray          # (S, n_agents, obs_dim)
    initial_dist: np.ndarray          # (S,)
    gamma: float
    episode_limit: int
    solve_return: float
    transitions: np.ndarray | None = None
    next_state: np.ndarray | None = None

    def __post_init__(self):
        if (self.transitions is None) == (self.next_state is None):
            raise ValueError("exactly one of transitions/next_state must be given")
        if self.transitions is not None:
            rowsum = self.transitions.sum(axis=2)
            if not np.allclose(rowsum, 1.0, atol=1e-12):
                raise ValueError("transition rows must sum to 1")
        if not np.all(np.isfinite(self.rewards)):
            raise ValueError("rewards must be finite")

    @property
    def n_joint(self) -> int:
        return self.n_actions ** self.n_agents

    @property
    def state_dim(self) -> int:
        return int(self.state_features.shape[1])

    @property
    def obs_dim(self) -> int:
        return int(self.observations.shape[2])

    def enumerable(self) -> bool:
        return self.n_states * self.n_joint <= ENUMERATION_LIMIT

    def encode_joint(self, actions) -> int:
        return int(np.ravel_multi_index(tuple(actions), (self.n_actions,) * self.n_agents))

    def decode_joint(self, j: int) -> tuple:
        return tuple(int(a) for a in np.unravel_index(j, (self.n_actions,) * self.n_agents))

    def next_dist(self, s: int, j: int) -> np.ndarray:
        if self.next_state is not None:
            d = np.zeros(self.n_states)
            d[self.next_state[s, j]] = 1.0
            return d
        return self.transitions[s, j]

    def expected_next_values(self, v: np.ndarray) -> np.ndarray:
        """(S, A) array of E[v(s') | s, a]."""
        if self.next_state is not None:
            return v[self.next_state]
        return np.einsum("sat,t->sa", self.transitions, v)


class TabularEnv:
    """Rollout wrapper over a DecPomdpSpec."""

    def __init__(self, spec: DecPomdpSpec, seed: int = 0):
        self.spec = spec
        self._rng = np.random.default_rng(seed)
        self._state = -1
        self._t = 0
        self._done = True

    def reset(self, seed: int | None = None):
        if seed is not None:
            self._rng = np.random.default_rng(seed)
        self._state = int(self._rng.choice(self.spec.n_states, p=self.spec.initial_dist))
        self._t = 0
        self._done = False
        return self.state_vector(), self.observations()

    def state_vector(self) -> np.ndarray:
        return self.spec.state_features[self._state]

    def observations(self) -> list:
        return [self.spec.observations[self._state, i] for i in range(self.spec.n_agents)]

    def available_actions(self) -> np.ndarray:
        return np.ones((self.spec.n_agents, self.spec.n_actions))

    def step(self, joint_action):
        """-> (reward, next observations, terminated, truncated, state vector)."""
        if self._done:
            raise RuntimeError("step() after the episode has ended")
        avail = self.available_actions()
        for i, a in enumerate(joint_action):
            if not (0 <= a < self.spec.n_actions) or avail[i, a] <= 0:
                raise ValueError(f"agent {i} chose unavailable action {a}")
        j = self.spec.encode_joint(joint_action)
        r = float(self.spec.rewards[self._state, j])
        if self.spec.next_state is not None:
            nxt = int(self.spec.next_state[self._state, j])
        else:
            nxt = int(self._rng.choice(self.spec.n_states, p=self.spec.transitions[self._state, j]))
        self._state = nxt
        self._t += 1
        terminated = bool(self.spec.terminal[nxt])
        truncated = (not terminated) and self._t >= self.spec.episode_limit
        self._done = terminated or truncated
        return r, self.observations(), terminated, truncated, self.state_vector()


# ---------------------------------------------------------------------------
# presets
# ---------------------------------------------------------------------------


def _matrix_game(name: str, payoff: np.ndarray, solve_return: float,
                 gamma: float = 0.99) -> DecPomdpSpec:
    """Single-shot 2-agent game; state 0 plays, state 1 is absorbing."""
    n_actions = payoff.shape[0]
    n_joint = n_actions * n_actions
    rewards = np.zeros((2, n_joint))
    rewards[0] = payoff.reshape(-1)
    next_state = np.ones((2, n_joint), dtype=np.int64)
    return DecPomdpSpec(
        name=name,
        n_agents=2,
        n_actions=n_actions,
        n_states=2,
        rewards=rewards,
        terminal=np.array([False, True]),
        state_features=np.array([[1.0], [0.0]]),
        observations=np.array([[[1.0]] * 2, [[0.0]] * 2]),
        initial_dist=np.array([1.0, 0.0]),
        gamma=gamma,
        episode_limit=1,
        solve_return=solve_return,
        next_state=next_state,
    )


CLIMB_PAYOFF = np.array([
    [11.0, -30.0, 0.0],
    [-30.0, 7.0, 6.0],
    [0.0, 0.0, 5.0],
])

PENALTY_PAYOFF = np.array([
    [10.0, 0.0, -10.0],
    [0.0, 2.0, 0.0],
    [-10.0, 0.0, 8.0],
])


def climb_game() -> DecPomdpSpec:
    """Classic climb game: the optimum sits next to a -30 miscoordination."""
    return _matrix_game("climb", CLIMB_PAYOFF, solve_return=11.0)


def penalty_game() -> DecPomdpSpec:
    """Penalized coordination game with a unique optimum at (0, 0)."""
    return _matrix_game("penalty", PENALTY_PAYOFF, solve_return=10.0)


def coop_grid(width: int = 5, height: int = 5, n_agents: int = 2,
              targets=((0, 0), (4, 4)), starts=((1, 1), (3, 3)),
              view_radius: int = 1, episode_limit: int = 20,
              coverage_reward: float = 1.0, step_cost: float = 0.02,
              gamma: float = 0.99, solve_return: float = 12.0) -> DecPomdpSpec:
    """Grid coverage: the team is paid only while every target is occupied.

    Observations are local: own normalized position plus a (2r+1)^2 window
    of target cells and another of other-agent cells. Moves off the grid
    are no-ops; agents may overlap.
    """
    n_cells = width * height
    n_states = n_cells ** n_agents
    n_joint = len(GRID_MOVES) ** n_agents
    if n_states * n_joint > ENUMERATION_LIMIT:
        raise ValueError("grid too large to stay enumerable")
    targets = [tuple(t) for t in targets]

    def cell_xy(c):
        return c % width, c // width

    def xy_cell(x, y):
        return y * width + x

    def move(c, a):
        x, y = cell_xy(c)
        dx, dy = GRID_MOVES[a]
        nx, ny = x + dx, y + dy
        if 0 <= nx < width and 0 <= ny < height:
            return xy_cell(nx, ny)
        return c

    shape_s = (n_cells,) * n_agents
    shape_a = (len(GRID_MOVES),) * n_agents

    def positions(s):
        return np.unravel_index(s, shape_s)

    # dynamics and rewards
    next_state = np.zeros((n_states, n_joint), dtype=np.int64)
    rewards = np.zeros((n_states, n_joint))
    target_cells = [xy_cell(x, y) for x, y in targets]
    for s in range(n_states):
        pos = positions(s)
        for j in range(n_joint):
            acts = np.unravel_index(j, shape_a)
            new_pos = tuple(move(pos[i], acts[i]) for i in range(n_agents))
            nxt = int(np.ravel_multi_index(new_pos, shape_s))
            next_state[s, j] = nxt
            covered = all(any(p == tc for p in new_pos) for tc in target_cells)
            rewards[s, j] = coverage_reward * covered - step_cost

    # features: normalized agent coordinates plus per-target coverage bits
    span = 2 * view_radius + 1
    state_dim = 2 * n_agents + len(targets)
    obs_dim = 2 + 2 * span * span
    state_features = np.zeros((n_states, state_dim))
    observations = np.zeros((n_states, n_agents, obs_dim))
    for s in range(n_states):
        pos = positions(s)
        feat = []
        for i in range(n_agents):
            x, y = cell_xy(pos[i])
            feat.extend([x / (width - 1), y / (height - 1)])
        for tc in target_cells:
            feat.append(1.0 if any(p == tc for p in pos) else 0.0)
        state_features[s] = feat
        for i in range(n_agents):
            x, y = cell_xy(pos[i])
            o = [x / (width - 1), y / (height - 1)]
            window_t, window_a = [], []
            for dy in range(-view_radius, view_radius + 1):
                for dx in range(-view_radius, view_radius + 1):
                    cx, cy = x + dx, y + dy
                    inside = 0 <= cx < width and 0 <= cy < height
                    c = xy_cell(cx, cy) if inside else -1
                    window_t.append(1.0 if inside and c in target_cells else 0.0)
                    window_a.append(
                        1.0 if inside and any(pos[k] == c for k in range(n_agents) if k != i)
                        else 0.0
                    )
            observations[s, i] = o + window_t + window_a

    initial = np.zeros(n_states)
    start_cells = tuple(xy_cell(x, y) for x, y in starts)
    initial[int(np.ravel_multi_index(start_cells, shape_s))] = 1.0
    return DecPomdpSpec(
        name="coopgrid",
        n_agents=n_agents,
        n_actions=len(GRID_MOVES),
        n_states=n_states,
        rewards=rewards,
        terminal=np.zeros(n_states, dtype=bool),
        state_features=state_features,
        observations=observations,
        initial_dist=initial,
        gamma=gamma,
        episode_limit=episode_limit,
        solve_return=solve_return,
        next_state=next_state,
    )


def chain_spec(n_states: int = 4, gamma: float = 0.9) -> DecPomdpSpec:
    """Deterministic chain; reward 1 on the final hop, so V*(i) = gamma^distance."""
    next_state = np.zeros((n_states, 1), dtype=np.int64)
    rewards = np.zeros((n_states, 1))
    for s in range(n_states - 1):
        next_state[s, 0] = s + 1
    next_state[n_states - 1, 0] = n_states - 1
    rewards[n_states - 2, 0] = 1.0
    eye = np.eye(n_states)
    return DecPomdpSpec(
        name="chain",
        n_agents=1,
        n_actions=1,
        n_states=n_states,
        rewards=rewards,
        terminal=np.arange(n_states) == n_states - 1,
        state_features=eye,
        observations=eye[:, None, :],
        initial_dist=eye[0],
        gamma=gamma,
        episode_limit=n_states,
        solve_return=1.0,
        next_state=next_state,
    )


def random_spec(n_states: int, n_agents: int, n_actions: int,
                rng: np.random.Generator, gamma: float = 0.9,
                episode_limit: int = 25) -> DecPomdpSpec:
    """Random stochastic Dec-POMDP without terminal states (oracle fodder)."""
    n_joint = n_actions ** n_agents
    transitions = rng.dirichlet(np.ones(n_states), size=(n_states, n_joint))
    rewards = rng.uniform(-1.0, 1.0, size=(n_states, n_joint))
    eye = np.eye(n_states)
    return DecPomdpSpec(
        name="random",
        n_agents=n_agents,
        n_actions=n_actions,
        n_states=n_states,
        rewards=rewards,
        terminal=np.zeros(n_states, dtype=bool),
        state_features=eye,
        observations=np.repeat(eye[:, None, :], n_agents, axis=1),
        initial_dist=np.full(n_states, 1.0 / n_states),
        gamma=gamma,
        episode_limit=episode_limit,
        solve_return=np.inf,
        transitions=transitions,
    )


PRESETS = {
    "climb": climb_game,
    "penalty": penalty_game,
    "coopgrid": coop_grid,
}


def make_env_spec(preset: str) -> DecPomdpSpec:
    if preset not in PRESETS:
        raise ValueError(f"unknown environment preset {preset!r}; "
                         f"choose from {sorted(PRESETS)}")
    return PRESETS[preset]()


# ---------------------------------------------------------------------------
# exact solvers (oracles)
# ---------------------------------------------------------------------------


def solve_exact(spec: DecPomdpSpec, tol: float = 1e-10, max_iter: int = 200_000):
    """Value iteration over the joint-action MDP; returns (Q*, V*).

    Successive-iterate tolerance `tol` bounds the Bellman residual of the
    returned V* by gamma * tol.
    """
    if not spec.enumerable():
        raise ValueError(
            f"spec too large to enumerate: {spec.n_states} states x "
            f"{spec.n_joint} joint actions"
        )
    live = ~spec.terminal
    v = np.zeros(spec.n_states)
    for _ in range(max_iter):
        q = spec.rewards + spec.gamma * spec.expected_next_values(v)
        v_new = np.where(live, q.max(axis=1), 0.0)
        diff = np.max(np.abs(v_new - v))
        v = v_new
        if diff <= tol:
            break
    else:
        raise RuntimeError("value iteration did not converge")
    q = spec.rewards + spec.gamma * spec.expected_next_values(v)
    q[spec.terminal] = 0.0
    return q, v


def _policy_matrix(spec: DecPomdpSpec, policy) -> np.ndarray:
    """(S, A) action distribution from a deterministic or stochastic policy."""
    policy = np.asarray(policy)
    if policy.ndim == 1:
        pi = np.zeros((spec.n_states, spec.n_joint))
        pi[np.arange(spec.n_states), policy.astype(np.int64)] = 1.0
        return pi
    if policy.shape != (spec.n_states, spec.n_joint):
        raise ValueError(f"policy shape {policy.shape} invalid")
    return policy


def policy_value(spec: DecPomdpSpec, policy):
    """Exact policy evaluation by linear solve; returns (Q^pi, V^pi)."""
    if not spec.enumerable():
        raise ValueError("spec too large to enumerate")
    pi = _policy_matrix(spec, policy)
    live = ~spec.terminal
    # P_pi[s, s'] and r_pi[s]
    if spec.next_state is not None:
        p_pi = np.zeros((spec.n_states, spec.n_states))
        for j in range(spec.n_joint):
            np.add.at(p_pi, (np.arange(spec.n_states), spec.next_state[:, j]), pi[:, j])
    else:
        p_pi = np.einsum("sa,sat->st", pi, spec.transitions)
    r_pi = np.sum(pi * spec.rewards, axis=1)
    p_pi[spec.terminal] = 0.0
    r_pi[spec.terminal] = 0.0
    v = np.linalg.solve(np.eye(spec.n_states) - spec.gamma * p_pi, r_pi)
    q = spec.rewards + spec.gamma * spec.expected_next_values(v)
    q[spec.terminal] = 0.0
    return q, v


def greedy_policy(q: np.ndarray) -> np.ndarray:
    return q.argmax(axis=1)


def nstep_rollout_dist(spec: DecPomdpSpec, s0: int, j0: int, policy, n: int):
    """Exact n-step accounting from (s0, j0) under a policy.

    Returns (sum of discounted expected rewards over the first n steps,
    state distribution after n steps). The first action is j0, the rest
    follow the policy.
    """
    pi = _policy_matrix(spec, policy)
    ret = float(spec.rewards[s0, j0])
    dist = spec.next_dist(s0, j0).copy()
    for k in range(1, n):
        r_pi = np.sum(pi * spec.rewards, axis=1)
        ret += spec.gamma ** k * float(dist @ r_pi)
        nxt = np.zeros(spec.n_states)
        for j in range(spec.n_joint):
            w = dist * pi[:, j]
            if spec.next_state is not None:
                np.add.at(nxt, spec.next_state[:, j], w)
            else:
                nxt += w @ spec.transitions[:, j, :]
        dist = nxt
    return ret, dist


def spec_dump(spec: DecPomdpSpec) -> dict:
    """Full enumerable model as plain JSON-ready data."""
    out = {
        "name": spec.name,
        "n_agents": spec.n_agents,
        "n_actions": spec.n_actions,
        "n_states": spec.n_states,
        "gamma": spec.gamma,
        "episode_limit": spec.episode_limit,
        "solve_return": spec.solve_return,
        "rewards": spec.rewards.tolist(),
        "terminal": spec.terminal.astype(int).tolist(),
        "state_features": spec.state_features.tolist(),
        "observations": spec.observations.tolist(),
        "initial_dist": spec.initial_dist.tolist(),
    }
    if spec.next_state is not None:
        out["next_state"] = spec.next_state.tolist()
    else:
        out["transitions"] = spec.transitions.tolist()
    return out
