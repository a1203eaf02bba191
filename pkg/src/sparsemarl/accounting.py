"""Closed-form model-size and FLOPs bookkeeping.

Budgeted quantities come straight from the sparsity fraction; a secondary
"realized" column counts actual mask ones so rounding effects stay visible.
Only parameterized layers are counted (the mixing matmuls on generated
weights are parameter-free and negligible at these dims); environment
interaction, target syncs and topology-evolution overhead are ignored as
well. Backward passes are costed at twice the forward pass.
"""
from __future__ import annotations

import io
from dataclasses import dataclass, field

import numpy as np

ALGORITHMS = ("qmix", "wqmix", "res_table", "res_derivation")


def linear_size(s: float, i: int, o: int) -> float:
    _check_sparsity(s)
    return (1.0 - s) * i * o


def gru_size(s: float, h: int, i: int) -> float:
    _check_sparsity(s)
    return (1.0 - s) * 3.0 * h * (h + i)


def linear_fwd_flops(s: float, i: int, o: int) -> float:
    _check_sparsity(s)
    return (1.0 - s) * (2.0 * i - 1.0) * o


def gru_fwd_flops(s: float, h: int, i: int) -> float:
    _check_sparsity(s)
    return (1.0 - s) * 3.0 * h * (2.0 * (h + i) - 1.0)


def _check_sparsity(s: float) -> None:
    if not (0.0 <= s <= 1.0):
        raise ValueError(f"sparsity must be in [0, 1], got {s}")


def train_flops(algorithm: str, batch: int, flops_agent: float, flops_mix: float,
                flops_u_agent: float = 0.0, flops_u_mix: float = 0.0,
                n_agents: int = 0, max_actions: int = 0) -> float:
    """Per-update training FLOPs.

    Two closed forms ship for the softmax-operator variant because its
    published coefficient table and its derivation disagree: `res_table`
    uses (5 + n*m), `res_derivation` uses (3 + 2*n*m).
    """
    if batch < 1:
        raise ValueError(f"batch must be >= 1, got {batch}")
    if algorithm == "qmix":
        return 4.0 * batch * (flops_agent + flops_mix)
    if algorithm == "wqmix":
        return batch * (3.0 * flops_agent + 3.0 * flops_mix
                        + 4.0 * flops_u_agent + 4.0 * flops_u_mix)
    if algorithm == "res_table":
        return batch * (4.0 * flops_agent + (5.0 + n_agents * max_actions) * flops_mix)
    if algorithm == "res_derivation":
        return batch * (4.0 * flops_agent + (3.0 + 2.0 * n_agents * max_actions) * flops_mix)
    raise ValueError(f"unknown algorithm {algorithm!r}; choose from {ALGORITHMS}")


# ---------------------------------------------------------------------------
# architecture descriptions
# ---------------------------------------------------------------------------


@dataclass
class LayerCost:
    network: str
    layer: str
    kind: str            # linear | gru
    dims: tuple          # (in, out) for linear, (hidden, in) for gru
    dense_size: float
    size: float
    dense_fwd_flops: float
    fwd_flops: float
    realized_size: float | None = None
    realized_fwd_flops: float | None = None


def _linear_cost(network, layer, s, i, o):
    return LayerCost(network, layer, "linear", (i, o),
                     linear_size(0.0, i, o), linear_size(s, i, o),
                     linear_fwd_flops(0.0, i, o), linear_fwd_flops(s, i, o))


def _gru_cost(network, layer, s, h, i):
    return LayerCost(network, layer, "gru", (h, i),
                     gru_size(0.0, h, i), gru_size(s, h, i),
                     gru_fwd_flops(0.0, h, i), gru_fwd_flops(s, h, i))


def agent_layers(s, obs_dim, n_actions, n_agents, hidden, network="agent"):
    in_dim = obs_dim + n_actions + n_agents
    return [
        _linear_cost(network, "fc1", s, in_dim, hidden),
        _gru_cost(network, "gru", s, hidden, hidden),
        _linear_cost(network, "fc2", s, hidden, n_actions),
    ]


def mixer_layers(s, state_dim, n_agents, embed, hyper_hidden, network="mixer"):
    return [
        _linear_cost(network, "hw1a", s, state_dim, hyper_hidden),
        _linear_cost(network, "hw1b", s, hyper_hidden, embed * n_agents),
        _linear_cost(network, "hb1", s, state_dim, embed),
        _linear_cost(network, "hw2a", s, state_dim, hyper_hidden),
        _linear_cost(network, "hw2b", s, hyper_hidden, embed),
        _linear_cost(network, "va", s, state_dim, hyper_hidden),
        _linear_cost(network, "vb", s, hyper_hidden, 1),
    ]


def unrestricted_mixer_layers(s, state_dim, n_agents, embed, network="u_mixer"):
    return [
        _linear_cost(network, "l1", s, n_agents + state_dim, embed),
        _linear_cost(network, "l2", s, embed, embed),
        _linear_cost(network, "l3", s, embed, 1),
    ]


def _totals(layers):
    return (sum(l.size for l in layers), sum(l.dense_size for l in layers),
            sum(l.fwd_flops for l in layers), sum(l.dense_fwd_flops for l in layers))


@dataclass
class FlopsReport:
    algorithm: str
    sparsity: float
    batch_size: int
    n_agents: int
    max_actions: int
    layers: list
    networks: dict            # name -> {size, dense_size, fwd, dense_fwd, ...}
    model_size: float
    dense_model_size: float
    inference_flops: float
    dense_inference_flops: float
    train_flops: float
    dense_train_flops: float
    train_variants: dict = field(default_factory=dict)

    @property
    def size_ratio(self) -> float:
        return self.model_size / self.dense_model_size

    @property
    def inference_ratio(self) -> float:
        return self.inference_flops / self.dense_inference_flops

    @property
    def train_ratio(self) -> float:
        return self.train_flops / self.dense_train_flops

    def to_csv(self) -> str:
        buf = io.StringIO()
        buf.write("network,layer,kind,dims,dense_size,size,dense_fwd_flops,"
                  "fwd_flops,realized_size,realized_fwd_flops\n")
        for l in self.layers:
            rs = "" if l.realized_size is None else f"{l.realized_size:.17g}"
            rf = "" if l.realized_fwd_flops is None else f"{l.realized_fwd_flops:.17g}"
            buf.write(f"{l.network},{l.layer},{l.kind},{l.dims[0]}x{l.dims[1]},"
                      f"{l.dense_size:.17g},{l.size:.17g},{l.dense_fwd_flops:.17g},"
                      f"{l.fwd_flops:.17g},{rs},{rf}\n")
        buf.write("\n")
        buf.write("quantity,value,dense_value,ratio\n")
        buf.write(f"model_size,{self.model_size:.17g},{self.dense_model_size:.17g},"
                  f"{self.size_ratio:.17g}\n")
        buf.write(f"inference_flops,{self.inference_flops:.17g},"
                  f"{self.dense_inference_flops:.17g},{self.inference_ratio:.17g}\n")
        buf.write(f"train_flops,{self.train_flops:.17g},{self.dense_train_flops:.17g},"
                  f"{self.train_ratio:.17g}\n")
        for name, value in sorted(self.train_variants.items()):
            buf.write(f"train_flops[{name}],{value:.17g},,\n")
        return buf.getvalue()

    def to_text(self) -> str:
        lines = [
            f"algorithm {self.algorithm}  sparsity {self.sparsity:g}  "
            f"batch {self.batch_size}  agents {self.n_agents}",
            f"{'network':<10} {'size':>14} {'dense':>14} {'fwd FLOPs':>14} {'dense':>14}",
        ]
        for name, t in self.networks.items():
            lines.append(f"{name:<10} {t['size']:>14.1f} {t['dense_size']:>14.1f} "
                         f"{t['fwd_flops']:>14.1f} {t['dense_fwd_flops']:>14.1f}")
        lines.append(f"model size     {self.model_size:.1f} / {self.dense_model_size:.1f}"
                     f"  (ratio {self.size_ratio:.4f})")
        lines.append(f"inference      {self.inference_flops:.1f} / "
                     f"{self.dense_inference_flops:.1f}  (ratio {self.inference_ratio:.4f})")
        lines.append(f"train/update   {self.train_flops:.1f} / {self.dense_train_flops:.1f}"
                     f"  (ratio {self.train_ratio:.4f})")
        for name, value in sorted(self.train_variants.items()):
            lines.append(f"train/update [{name}]  {value:.1f}")
        return "\n".join(lines) + "\n"


def _realized_fill(layers, group_slots):
    """Attach mask-ones-based columns; a gru layer spans three gate slots."""
    cursor = 0
    for l in layers:
        span = 3 if l.kind == "gru" else 1
        slots = group_slots[cursor:cursor + span]
        cursor += span
        ones = sum(s.ones() for s in slots)
        total = sum(s.size for s in slots)
        density = ones / total
        l.realized_size = density * l.dense_size
        l.realized_fwd_flops = density * l.dense_fwd_flops


def report(algorithm: str, sparsity: float, batch_size: int, n_agents: int,
           obs_dim: int, n_actions: int, state_dim: int,
           agent_hidden: int = 64, mixer_embed: int = 32, hyper_hidden: int = 64,
           unrestricted_embed: int = 256, share_agent_params: bool = False,
           agent_slots=None, mixer_slots=None,
           u_agent_slots=None, u_mixer_slots=None) -> FlopsReport:
    """Full budgeted (and optionally realized) cost report for one config.

    Per-agent forward FLOPs are team-level: each of the N agents runs its
    own forward pass per timestep, shared parameters or not, so inference
    cost scales with N while shared parameters only shrink model size.
    """
    if algorithm not in ("qmix", "owqmix"):
        raise ValueError(f"unknown algorithm {algorithm!r}")
    s = sparsity
    a_layers = agent_layers(s, obs_dim, n_actions, n_agents, agent_hidden)
    m_layers = mixer_layers(s, state_dim, n_agents, mixer_embed, hyper_hidden)
    layers = a_layers + m_layers
    if agent_slots:
        _realized_fill(a_layers, agent_slots)
    if mixer_slots:
        _realized_fill(m_layers, mixer_slots)

    a_size, a_dsize, a_fwd, a_dfwd = _totals(a_layers)
    m_size, m_dsize, m_fwd, m_dfwd = _totals(m_layers)
    size_mult = 1 if share_agent_params else n_agents
    team = dict(size=a_size * size_mult, dense_size=a_dsize * size_mult,
                fwd_flops=a_fwd * n_agents, dense_fwd_flops=a_dfwd * n_agents)
    networks = {
        "agent": dict(size=a_size, dense_size=a_dsize,
                      fwd_flops=a_fwd, dense_fwd_flops=a_dfwd),
        "agents(team)": team,
        "mixer": dict(size=m_size, dense_size=m_dsize,
                      fwd_flops=m_fwd, dense_fwd_flops=m_dfwd),
    }

    fa, fa_d = team["fwd_flops"], team["dense_fwd_flops"]
    fm, fm_d = m_fwd, m_dfwd

    if algorithm == "qmix":
        model = 2.0 * (team["size"] + m_size)
        dense_model = 2.0 * (team["dense_size"] + m_dsize)
        train = train_flops("qmix", batch_size, fa, fm)
        dense_train = train_flops("qmix", batch_size, fa_d, fm_d)
    else:
        ua_layers = agent_layers(s, obs_dim, n_actions, n_agents, agent_hidden,
                                 network="u_agent")
        um_layers = unrestricted_mixer_layers(s, state_dim, n_agents,
                                              unrestricted_embed)
        if u_agent_slots:
            _realized_fill(ua_layers, u_agent_slots)
        if u_mixer_slots:
            _realized_fill(um_layers, u_mixer_slots)
        layers += ua_layers + um_layers
        ua_size, ua_dsize, ua_fwd, ua_dfwd = _totals(ua_layers)
        um_size, um_dsize, um_fwd, um_dfwd = _totals(um_layers)
        ua_team_size = ua_size * size_mult
        ua_team_dsize = ua_dsize * size_mult
        networks["u_agent"] = dict(size=ua_size, dense_size=ua_dsize,
                                   fwd_flops=ua_fwd, dense_fwd_flops=ua_dfwd)
        networks["u_agents(team)"] = dict(
            size=ua_team_size, dense_size=ua_team_dsize,
            fwd_flops=ua_fwd * n_agents, dense_fwd_flops=ua_dfwd * n_agents)
        networks["u_mixer"] = dict(size=um_size, dense_size=um_dsize,
                                   fwd_flops=um_fwd, dense_fwd_flops=um_dfwd)
        fua, fua_d = ua_fwd * n_agents, ua_dfwd * n_agents
        model = team["size"] + m_size + 2.0 * (ua_team_size + um_size)
        dense_model = team["dense_size"] + m_dsize + 2.0 * (ua_team_dsize + um_dsize)
        train = train_flops("wqmix", batch_size, fa, fm, fua, um_fwd)
        dense_train = train_flops("wqmix", batch_size, fa_d, fm_d, fua_d, um_dfwd)

    variants = {
        "res_table": train_flops("res_table", batch_size, fa, fm,
                                 n_agents=n_agents, max_actions=n_actions),
        "res_derivation": train_flops("res_derivation", batch_size, fa, fm,
                                      n_agents=n_agents, max_actions=n_actions),
    }
    return FlopsReport(
        algorithm=algorithm,
        sparsity=s,
        batch_size=batch_size,
        n_agents=n_agents,
        max_actions=n_actions,
        layers=layers,
        networks=networks,
        model_size=model,
        dense_model_size=dense_model,
        inference_flops=fa,
        dense_inference_flops=fa_d,
        train_flops=train,
        dense_train_flops=dense_train,
        train_variants=variants,
    )
