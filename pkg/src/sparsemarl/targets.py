"""Value-estimation operators and TD target construction.

Supports max (optionally double-Q), mellowmax, soft mellowmax and a
joint-action softmax baseline, the finite-episode forward-view TD(lambda)
targets, and the burn-in switch that starts training on one-step targets
before moving to TD(lambda).
"""
from __future__ import annotations

import itertools
from dataclasses import dataclass

import numpy as np

from . import numerics as nm
from .replay import Episode

OPERATORS = ("max", "softmax", "mellowmax", "soft_mellowmax")

# joint-action softmax is only evaluated by full enumeration
SOFTMAX_JOINT_LIMIT = 4096


@dataclass
class TargetConfig:
    """Every constant the target construction depends on."""

    operator: str = "soft_mellowmax"
    alpha: float = 1.0            # soft-mellowmax weighting exponent
    omega: float = 10.0           # soft-mellowmax / mellowmax temperature
    td_lambda: float = 0.8
    burn_in: int = 0              # one-step targets while t_global < burn_in
    gamma: float = 0.99
    double_dqn: bool = True
    ow_alpha: float = 0.1         # weighting for non-underestimated samples
    softmax_beta: float = 5.0     # inverse temperature of the softmax baseline

    def __post_init__(self):
        if self.operator not in OPERATORS:
            raise ValueError(f"unknown operator {self.operator!r}")
        if self.omega <= 0:
            raise ValueError(f"omega must be > 0, got {self.omega}")
        if not (0.0 <= self.td_lambda <= 1.0):
            raise ValueError(f"lambda must be in [0, 1], got {self.td_lambda}")
        if not (0.0 <= self.gamma < 1.0):
            raise ValueError(f"gamma must be in [0, 1), got {self.gamma}")


# ---------------------------------------------------------------------------
# operators on plain utility vectors
# ---------------------------------------------------------------------------


def soft_mellowmax(q, alpha: float, omega: float) -> float:
    """(1/omega) log sum_u softmax_alpha(q)_u exp(omega q_u), stably.

    Never exceeds max(q): the log factor is a convex combination of
    exp(omega (q_u - max)) terms, each at most 1.
    """
    q = np.asarray(q, dtype=np.float64)
    if q.ndim != 1 or q.size < 1:
        raise ValueError(f"expected a non-empty vector, got shape {q.shape}")
    if not np.all(np.isfinite(q)):
        raise ValueError("soft_mellowmax requires finite inputs")
    if omega <= 0:
        raise ValueError(f"omega must be > 0, got {omega}")
    m = q.max()
    aw = alpha * q
    p = np.exp(aw - aw.max())
    p /= p.sum()
    return float(m + np.log(np.sum(p * np.exp(omega * (q - m)))) / omega)


def mellowmax(q, omega: float) -> float:
    """(1/omega) log mean exp(omega q), with max subtraction."""
    q = np.asarray(q, dtype=np.float64)
    m = q.max()
    return float(m + np.log(np.mean(np.exp(omega * (q - m)))) / omega)


def softmax_expectation(q, beta: float) -> float:
    """Expectation of q under softmax(beta q)."""
    q = np.asarray(q, dtype=np.float64)
    z = beta * q
    p = np.exp(z - z.max())
    p /= p.sum()
    return float(np.sum(p * q))


def operator_value(q, cfg: TargetConfig, online_q=None) -> float:
    """Apply the configured operator to one target utility vector.

    For max with double-Q the action is chosen on the online vector and
    evaluated on the target one; smooth operators consume the full target
    vector and ignore the double-Q flag.
    """
    q = np.asarray(q, dtype=np.float64)
    if cfg.operator == "max":
        if cfg.double_dqn:
            if online_q is None:
                raise ValueError("double-Q max requires the online utilities")
            return float(q[int(np.argmax(online_q))])
        return float(q.max())
    if cfg.operator == "mellowmax":
        return mellowmax(q, cfg.omega)
    if cfg.operator == "soft_mellowmax":
        return soft_mellowmax(q, cfg.alpha, cfg.omega)
    return softmax_expectation(q, cfg.softmax_beta)


# ---------------------------------------------------------------------------
# batched masked operators, (time, agents, actions, batch) -> (time, agents, batch)
# ---------------------------------------------------------------------------


def _masked(q, avail):
    return np.where(avail > 0, q, -np.inf)


def batched_max(q, avail):
    return _masked(q, avail).max(axis=2)


def batched_double_max(q_target, q_online, avail):
    a_star = np.argmax(_masked(q_online, avail), axis=2)
    return np.take_along_axis(q_target, a_star[:, :, None, :], axis=2)[:, :, 0, :]


def batched_soft_mellowmax(q, avail, alpha: float, omega: float):
    qm = _masked(q, avail)
    m = qm.max(axis=2, keepdims=True)
    aw = np.where(avail > 0, alpha * q, -np.inf)
    p = np.exp(aw - aw.max(axis=2, keepdims=True))
    p /= p.sum(axis=2, keepdims=True)
    s = np.sum(p * np.where(avail > 0, np.exp(omega * (q - m)), 0.0), axis=2)
    return m[:, :, 0, :] + np.log(s) / omega


def batched_mellowmax(q, avail, omega: float):
    qm = _masked(q, avail)
    m = qm.max(axis=2, keepdims=True)
    n_avail = (avail > 0).sum(axis=2)
    s = np.sum(np.where(avail > 0, np.exp(omega * (q - m)), 0.0), axis=2) / n_avail
    return m[:, :, 0, :] + np.log(s) / omega


def agent_operator_values(q_target, avail, cfg: TargetConfig, q_online=None):
    """Per-agent operator over (time, agents, actions, batch) utilities."""
    if cfg.operator == "max":
        if cfg.double_dqn:
            if q_online is None:
                raise ValueError("double-Q max requires the online utilities")
            return batched_double_max(q_target, q_online, avail)
        return batched_max(q_target, avail)
    if cfg.operator == "mellowmax":
        return batched_mellowmax(q_target, avail, cfg.omega)
    if cfg.operator == "soft_mellowmax":
        return batched_soft_mellowmax(q_target, avail, cfg.alpha, cfg.omega)
    raise ValueError("softmax bootstraps are joint-action; use bootstrap_batch")


# ---------------------------------------------------------------------------
# bootstrap values through the target mixer
# ---------------------------------------------------------------------------


def bootstrap_value(state, agent_qs, mixer, cfg: TargetConfig,
                    online_qs=None, avail=None) -> float:
    """Mixed next-state value for one state and per-agent target utilities."""
    agent_qs = [np.asarray(q, dtype=np.float64) for q in agent_qs]
    n = len(agent_qs)
    if avail is None:
        avail = [np.ones_like(q) for q in agent_qs]
    if cfg.operator == "softmax":
        q4 = np.stack(agent_qs, axis=0)[None, :, :, None]
        a4 = np.stack(avail, axis=0)[None, :, :, None]
        s3 = np.asarray(state, dtype=np.float64)[None, :, None]
        return float(_joint_softmax_values(q4, a4, s3, mixer, cfg)[0, 0])
    utilities = np.empty(n)
    for i, q in enumerate(agent_qs):
        sub = np.flatnonzero(avail[i] > 0)
        per_cfg_q = q[sub]
        online = None if online_qs is None else np.asarray(online_qs[i])[sub]
        utilities[i] = operator_value(per_cfg_q, cfg, online)
    from .networks import mix
    return mix(mixer, utilities, np.asarray(state, dtype=np.float64))


def _joint_softmax_values(q_target, avail, states, mixer, cfg: TargetConfig):
    """Softmax-expected joint value by full joint-action enumeration.

    q_target: (T, N, U, B); states: (T, S, B). Returns (T, B).
    """
    t_len, n, u, bsz = q_target.shape
    n_joint = u ** n
    if n_joint > SOFTMAX_JOINT_LIMIT:
        raise ValueError(
            f"joint action space {n_joint} exceeds the softmax enumeration "
            f"limit {SOFTMAX_JOINT_LIMIT}"
        )
    joint = np.array(list(itertools.product(range(u), repeat=n)), dtype=np.int64)
    idx = joint.T[None, :, :, None]                              # (1, N, A, 1)
    util = np.take_along_axis(q_target, idx, axis=2)             # (T, N, A, B)
    ok = np.take_along_axis(avail, idx, axis=2).min(axis=1) > 0  # (T, A, B)
    util_flat = util.reshape(t_len, n, n_joint * bsz)
    states_rep = np.repeat(states[:, :, None, :], n_joint, axis=2).reshape(
        t_len, states.shape[1], n_joint * bsz)
    q_joint = mixer.q_tot(nm.Node(util_flat), states_rep).value.reshape(t_len, n_joint, bsz)
    z = np.where(ok, cfg.softmax_beta * q_joint, -np.inf)
    p = np.exp(z - z.max(axis=1, keepdims=True))
    p /= p.sum(axis=1, keepdims=True)
    return np.sum(p * np.where(ok, q_joint, 0.0), axis=1)


def bootstrap_batch(q_target, avail, states, mixer, cfg: TargetConfig, q_online=None):
    """(time, agents, actions, batch) target utilities -> mixed values (time, batch)."""
    if cfg.operator == "softmax":
        return _joint_softmax_values(q_target, avail, states, mixer, cfg)
    per_agent = agent_operator_values(q_target, avail, cfg, q_online)
    return mixer.q_tot(nm.Node(per_agent), states).value


# ---------------------------------------------------------------------------
# TD(lambda) and the hybrid switch
# ---------------------------------------------------------------------------


def td_lambda_from_arrays(rewards, bootstraps, gamma: float, lam: float):
    """Backward recursion for forward-view TD(lambda) on one episode.

    bootstraps[t] is the mixed value of the state after step t, already zero
    where the episode has terminated. The residual weight at the episode
    horizon goes to the full return, so lambda=1 on terminated episodes is
    the Monte-Carlo return and lambda=0 is the one-step target.
    """
    if not (0.0 <= lam <= 1.0):
        raise ValueError(f"lambda must be in [0, 1], got {lam}")
    t_len = rewards.shape[0]
    y = np.empty_like(rewards)
    y[t_len - 1] = rewards[t_len - 1] + gamma * bootstraps[t_len - 1]
    for t in range(t_len - 2, -1, -1):
        y[t] = rewards[t] + gamma * ((1.0 - lam) * bootstraps[t] + lam * y[t + 1])
    return y


def td_lambda_targets(episode: Episode, bootstraps, cfg: TargetConfig):
    bootstraps = np.asarray(bootstraps, dtype=np.float64)
    if bootstraps.shape != episode.rewards.shape:
        raise ValueError(
            f"bootstraps shape {bootstraps.shape} != rewards {episode.rewards.shape}"
        )
    return td_lambda_from_arrays(episode.rewards, bootstraps, cfg.gamma, cfg.td_lambda)


def td_lambda_batch(rewards, bootstraps, valid, gamma: float, lam: float):
    """Vectorized recursion over a padded (time, batch) rectangle."""
    if not (0.0 <= lam <= 1.0):
        raise ValueError(f"lambda must be in [0, 1], got {lam}")
    t_len = rewards.shape[0]
    y = np.zeros_like(rewards)
    nxt = bootstraps[t_len - 1]
    y[t_len - 1] = rewards[t_len - 1] + gamma * nxt
    for t in range(t_len - 2, -1, -1):
        carry = np.where(valid[t + 1] > 0, y[t + 1], bootstraps[t])
        y[t] = rewards[t] + gamma * ((1.0 - lam) * bootstraps[t] + lam * carry)
    return y * valid


def hybrid_target(episode: Episode, bootstraps, t_global: int, cfg: TargetConfig):
    """One-step targets while t_global < burn-in, TD(lambda) from then on."""
    lam = 0.0 if t_global < cfg.burn_in else cfg.td_lambda
    bootstraps = np.asarray(bootstraps, dtype=np.float64)
    return td_lambda_from_arrays(episode.rewards, bootstraps, cfg.gamma, lam)


def hybrid_target_batch(rewards, bootstraps, valid, t_global: int, cfg: TargetConfig):
    lam = 0.0 if t_global < cfg.burn_in else cfg.td_lambda
    return td_lambda_batch(rewards, bootstraps, valid, cfg.gamma, lam)


# ---------------------------------------------------------------------------
# loss pieces
# ---------------------------------------------------------------------------


def ow_weight(q_tot: float, target: float, ow_alpha: float) -> float:
    """1 for underestimated samples (q_tot < target), ow_alpha otherwise."""
    return 1.0 if q_tot < target else ow_alpha


def ow_weights(q_tot, targets, ow_alpha: float):
    return np.where(q_tot < targets, 1.0, ow_alpha)


def td_loss(q_tot, targets, weights, valid, tape=None) -> nm.Node:
    """Mean over valid entries of weights * (targets - q_tot)^2.

    Targets and weights are constants: gradients flow only through q_tot.
    """
    return nm.weighted_mse(q_tot, np.asarray(targets, dtype=np.float64),
                           np.asarray(weights, dtype=np.float64),
                           np.asarray(valid, dtype=np.float64), tape)
