"""Agent utility networks, the monotonic mixing network, and WQMIX extras.

Every weight matrix lives in a SparseSlot so topology evolution can act on
it; biases stay dense. Forward passes accept either single vectors (one
environment step) or padded (time, dim, batch) arrays (one training batch).
"""
from __future__ import annotations

import json
from dataclasses import dataclass

import numpy as np

from . import numerics as nm
from .sparse_topology import SparseSlot, apply_mask


@dataclass
class LinearLayer:
    """A masked weight matrix plus its dense bias."""

    slot: SparseSlot
    bias: nm.Param

    @property
    def w(self) -> nm.Param:
        return self.slot.weights


def _make_linear(in_dim: int, out_dim: int, rng: np.random.Generator, name: str) -> LinearLayer:
    # biases draw from the same fan-in range as weights: a nonzero bias keeps
    # utilities off the exact q=0 / zero-mixing-weight saddle under heavy masks
    k = 1.0 / np.sqrt(in_dim)
    w = nm.Param(rng.uniform(-k, k, size=(out_dim, in_dim)), name + ".w")
    slot = SparseSlot(w, np.ones((out_dim, in_dim)), name + ".w")
    return LinearLayer(slot, nm.Param(rng.uniform(-k, k, size=out_dim), name + ".b"))


class AgentNet:
    """Recurrent per-agent utility network: linear -> ReLU -> GRU -> linear.

    Input is the concatenation (observation, previous action one-hot,
    agent-id one-hot); output is one utility per action.
    """

    def __init__(self, obs_dim: int, n_actions: int, n_agents: int,
                 hidden: int, rng: np.random.Generator, name: str = "agent"):
        self.obs_dim = obs_dim
        self.n_actions = n_actions
        self.n_agents = n_agents
        self.hidden = hidden
        self.input_dim = obs_dim + n_actions + n_agents
        self.name = name
        self.fc1 = _make_linear(self.input_dim, hidden, rng, f"{name}.fc1")
        self.gru = nm.GruCellParams.create(hidden, hidden, rng, f"{name}.gru")
        self.gru_slots = tuple(
            SparseSlot(w, np.ones(w.value.shape), w.name)
            for w in (self.gru.wz, self.gru.wr, self.gru.wh)
        )
        self.fc2 = _make_linear(hidden, n_actions, rng, f"{name}.fc2")

    def weight_slots(self) -> list:
        return [self.fc1.slot, *self.gru_slots, self.fc2.slot]

    def params(self) -> list:
        return [self.fc1.w, self.fc1.bias,
                self.gru.wz, self.gru.wr, self.gru.wh,
                self.gru.bz, self.gru.br, self.gru.bh,
                self.fc2.w, self.fc2.bias]

    def init_hidden(self, batch: int | None = None) -> np.ndarray:
        if batch is None:
            return np.zeros(self.hidden)
        return np.zeros((self.hidden, batch))

    def step(self, x: np.ndarray, h_prev, tape=None):
        """One timestep; x is the already-concatenated input vector/batch."""
        z = nm.relu(nm.linear_forward(x, self.fc1.w, self.fc1.bias, tape), tape)
        h = nm.gru_step(z, h_prev, self.gru, tape)
        q = nm.linear_forward(h, self.fc2.w, self.fc2.bias, tape)
        return q, h

    def sequence(self, xs: np.ndarray, h0: np.ndarray, tape=None) -> nm.Node:
        """(time, input, batch) inputs -> (time, actions, batch) utilities."""
        z = nm.relu(nm.linear_forward(xs, self.fc1.w, self.fc1.bias, tape), tape)
        hs = nm.gru_sequence(z, h0, self.gru, tape)
        return nm.linear_forward(hs, self.fc2.w, self.fc2.bias, tape)


def agent_q_values(net: AgentNet, obs: np.ndarray, last_action: np.ndarray,
                   agent_id: np.ndarray, h_prev: np.ndarray):
    """Per-action utilities and next recurrent state for one agent step."""
    x = np.concatenate([obs, last_action, agent_id])
    if x.shape[0] != net.input_dim:
        raise ValueError(f"agent input dim {x.shape[0]} != expected {net.input_dim}")
    q, h = net.step(x, h_prev)
    return q.value, h.value


class MixerNet:
    """Monotonic mixing network with state-conditioned hypernetworks.

    Q_tot = w2(s)^T elu(|W1(s)| q + b1(s)) + v(s); the absolute value on the
    generated weights enforces dQ_tot/dq_i >= 0.
    """

    def __init__(self, state_dim: int, n_agents: int, embed: int,
                 hyper_hidden: int, rng: np.random.Generator, name: str = "mixer"):
        self.state_dim = state_dim
        self.n_agents = n_agents
        self.embed = embed
        self.hyper_hidden = hyper_hidden
        self.name = name
        self.w1_head = [
            _make_linear(state_dim, hyper_hidden, rng, f"{name}.hw1a"),
            _make_linear(hyper_hidden, embed * n_agents, rng, f"{name}.hw1b"),
        ]
        self.b1_head = [_make_linear(state_dim, embed, rng, f"{name}.hb1")]
        self.w2_head = [
            _make_linear(state_dim, hyper_hidden, rng, f"{name}.hw2a"),
            _make_linear(hyper_hidden, embed, rng, f"{name}.hw2b"),
        ]
        self.v_head = [
            _make_linear(state_dim, hyper_hidden, rng, f"{name}.va"),
            _make_linear(hyper_hidden, 1, rng, f"{name}.vb"),
        ]

    def _layers(self) -> list:
        return [*self.w1_head, *self.b1_head, *self.w2_head, *self.v_head]

    def weight_slots(self) -> list:
        return [l.slot for l in self._layers()]

    def params(self) -> list:
        out = []
        for l in self._layers():
            out.extend([l.w, l.bias])
        return out

    def _two_layer(self, layers, s, tape):
        h = nm.relu(nm.linear_forward(s, layers[0].w, layers[0].bias, tape), tape)
        return nm.linear_forward(h, layers[1].w, layers[1].bias, tape)

    def q_tot(self, utilities, states: np.ndarray, tape=None) -> nm.Node:
        """(time, n_agents, batch) utilities + (time, state, batch) -> (time, batch)."""
        w1 = nm.abs_value(self._two_layer(self.w1_head, states, tape), tape)
        b1 = nm.linear_forward(states, self.b1_head[0].w, self.b1_head[0].bias, tape)
        w2 = nm.abs_value(self._two_layer(self.w2_head, states, tape), tape)
        v = self._two_layer(self.v_head, states, tape)
        hidden = nm.elu(nm.add(nm.hyper_matvec(w1, utilities, self.embed, tape), b1, tape), tape)
        y = nm.colwise_dot(w2, hidden, tape)
        return nm.add(y, nm.squeeze_feature(v, tape), tape)


class UnrestrictedMixer:
    """Sign-unconstrained feedforward joint-value head on (utilities, state)."""

    def __init__(self, state_dim: int, n_agents: int, embed: int,
                 rng: np.random.Generator, name: str = "umixer"):
        self.state_dim = state_dim
        self.n_agents = n_agents
        self.embed = embed
        self.name = name
        self.l1 = _make_linear(n_agents + state_dim, embed, rng, f"{name}.l1")
        self.l2 = _make_linear(embed, embed, rng, f"{name}.l2")
        self.l3 = _make_linear(embed, 1, rng, f"{name}.l3")

    def weight_slots(self) -> list:
        return [self.l1.slot, self.l2.slot, self.l3.slot]

    def params(self) -> list:
        return [self.l1.w, self.l1.bias, self.l2.w, self.l2.bias,
                self.l3.w, self.l3.bias]

    def q_tot(self, utilities, states: np.ndarray, tape=None) -> nm.Node:
        x = nm.concat_features([utilities, nm.Node(states)], tape)
        h = nm.relu(nm.linear_forward(x, self.l1.w, self.l1.bias, tape), tape)
        h = nm.relu(nm.linear_forward(h, self.l2.w, self.l2.bias, tape), tape)
        y = nm.linear_forward(h, self.l3.w, self.l3.bias, tape)
        return nm.squeeze_feature(y, tape)


def mix(mixer, agent_utilities: np.ndarray, state: np.ndarray) -> float:
    """Scalar joint value for one set of per-agent utilities and one state."""
    u = np.asarray(agent_utilities, dtype=np.float64).reshape(1, -1, 1)
    s = np.asarray(state, dtype=np.float64).reshape(1, -1, 1)
    if u.shape[1] != mixer.n_agents:
        raise ValueError(f"expected {mixer.n_agents} utilities, got {u.shape[1]}")
    return float(mixer.q_tot(nm.Node(u), s).value[0, 0])


def greedy_joint_action(nets: list, obs: list, last_actions: list,
                        agent_ids: list, hiddens: list, avail: list):
    """Per-agent argmax actions (ties -> lowest index) and next hidden states."""
    actions = []
    new_h = []
    for i, net in enumerate(nets):
        q, h = agent_q_values(net, obs[i], last_actions[i], agent_ids[i], hiddens[i])
        q = np.where(avail[i] > 0, q, -np.inf)
        actions.append(int(np.argmax(q)))
        new_h.append(h)
    return actions, new_h


# ---------------------------------------------------------------------------
# target copies and checkpoints
# ---------------------------------------------------------------------------


def clone_structure(net, rng=None):
    """A structurally identical network with freshly allocated parameters."""
    zero_rng = np.random.default_rng(0) if rng is None else rng
    if isinstance(net, AgentNet):
        twin = AgentNet(net.obs_dim, net.n_actions, net.n_agents, net.hidden,
                        zero_rng, net.name + ".target")
    elif isinstance(net, MixerNet):
        twin = MixerNet(net.state_dim, net.n_agents, net.embed, net.hyper_hidden,
                        zero_rng, net.name + ".target")
    elif isinstance(net, UnrestrictedMixer):
        twin = UnrestrictedMixer(net.state_dim, net.n_agents, net.embed,
                                 zero_rng, net.name + ".target")
    else:
        raise TypeError(f"cannot clone {type(net).__name__}")
    sync_target(twin, net)
    return twin


def sync_target(target, online) -> None:
    """Copy weights, biases and masks from the online net into the target."""
    for pt, po in zip(target.params(), online.params()):
        if pt.value.shape != po.value.shape:
            raise ValueError(f"target shape mismatch: {pt.value.shape} vs {po.value.shape}")
        pt.value[...] = po.value
    for st_, so in zip(target.weight_slots(), online.weight_slots()):
        st_.mask[...] = so.mask
        apply_mask(st_)


def collect_state(named_nets: dict) -> dict:
    """Flatten nets into {array_name: array} for checkpointing."""
    arrays = {}
    for net_name, net in named_nets.items():
        for i, p in enumerate(net.params()):
            arrays[f"{net_name}/p{i:02d}"] = p.value
        for i, s in enumerate(net.weight_slots()):
            arrays[f"{net_name}/m{i:02d}"] = s.mask
    return arrays


def restore_state(named_nets: dict, arrays: dict) -> None:
    for net_name, net in named_nets.items():
        for i, p in enumerate(net.params()):
            key = f"{net_name}/p{i:02d}"
            if key not in arrays:
                raise ValueError(f"checkpoint missing array {key}")
            if arrays[key].shape != p.value.shape:
                raise ValueError(
                    f"checkpoint shape mismatch for {key}: "
                    f"{arrays[key].shape} vs {p.value.shape}"
                )
            p.value[...] = arrays[key]
        for i, s in enumerate(net.weight_slots()):
            s.mask[...] = arrays[f"{net_name}/m{i:02d}"]


def save_checkpoint(path, named_nets: dict, meta: dict) -> None:
    """Self-describing dump of all weights and masks; round-trips bit-exactly."""
    arrays = collect_state(named_nets)
    payload = dict(arrays)
    payload["__meta__"] = np.frombuffer(
        json.dumps(meta, sort_keys=True).encode(), dtype=np.uint8
    )
    np.savez(path, **payload)


def load_checkpoint(path):
    with np.load(path) as data:
        meta = json.loads(bytes(data["__meta__"]).decode())
        arrays = {k: data[k] for k in data.files if k != "__meta__"}
    return arrays, meta
