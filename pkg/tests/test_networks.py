import itertools

import numpy as np
import pytest

from sparsemarl import networks as nets
from sparsemarl import numerics as nm
from sparsemarl import sparse_topology as topo


def make_agent(rng, obs_dim=3, n_actions=4, n_agents=2, hidden=8):
    return nets.AgentNet(obs_dim, n_actions, n_agents, hidden, rng)


# ---------------------------------------------------------------------------
# agent net
# ---------------------------------------------------------------------------


def test_agent_zero_weights_outputs_bias():
    rng = np.random.default_rng(0)
    net = make_agent(rng)
    for p in net.params():
        p.value[:] = 0.0
    net.fc2.bias.value[:] = [1.0, -2.0, 3.0, 0.5]
    q, h = nets.agent_q_values(net, np.ones(3), np.zeros(4), np.array([1.0, 0.0]),
                               net.init_hidden())
    assert np.array_equal(q, [1.0, -2.0, 3.0, 0.5])
    assert np.array_equal(h, np.zeros(8))


def test_agent_purity():
    rng = np.random.default_rng(1)
    net = make_agent(rng)
    obs, la, aid = rng.normal(size=3), np.eye(4)[1], np.eye(2)[0]
    h = rng.normal(size=8)
    q1, h1 = nets.agent_q_values(net, obs, la, aid, h)
    q2, h2 = nets.agent_q_values(net, obs, la, aid, h)
    assert np.array_equal(q1, q2) and np.array_equal(h1, h2)


def test_agent_matches_numerics_composition_oracle():
    rng = np.random.default_rng(2)
    net = make_agent(rng)
    obs, la, aid = rng.normal(size=3), np.eye(4)[2], np.eye(2)[1]
    h0 = rng.normal(size=8)
    q, h = nets.agent_q_values(net, obs, la, aid, h0)
    x = np.concatenate([obs, la, aid])
    z = np.maximum(net.fc1.w.value @ x + net.fc1.bias.value, 0.0)
    h_ref = nm.gru_step(z, h0, net.gru).value
    q_ref = net.fc2.w.value @ h_ref + net.fc2.bias.value
    assert np.max(np.abs(q - q_ref)) <= 1e-12
    assert np.max(np.abs(h - h_ref)) <= 1e-12


def test_agent_sequence_matches_steps():
    rng = np.random.default_rng(3)
    net = make_agent(rng)
    xs = rng.normal(size=(4, net.input_dim, 3))
    qs = net.sequence(xs, net.init_hidden(3)).value
    h = nm.Node(net.init_hidden(3))
    for t in range(4):
        q, h = net.step(xs[t], h)
        assert np.allclose(qs[t], q.value, atol=1e-13)


def test_agent_input_dim_check():
    rng = np.random.default_rng(4)
    net = make_agent(rng)
    with pytest.raises(ValueError):
        nets.agent_q_values(net, np.zeros(2), np.zeros(4), np.zeros(2), net.init_hidden())


# ---------------------------------------------------------------------------
# mixer
# ---------------------------------------------------------------------------


def test_mix_zero_hypernet_returns_value_head():
    rng = np.random.default_rng(5)
    m = nets.MixerNet(3, 2, embed=4, hyper_hidden=4, rng=rng)
    for layer in m.w1_head + m.b1_head + m.w2_head:
        layer.w.value[:] = 0.0
        layer.bias.value[:] = 0.0
    state = rng.normal(size=3)
    h = np.maximum(m.v_head[0].w.value @ state + m.v_head[0].bias.value, 0.0)
    v = float((m.v_head[1].w.value @ h + m.v_head[1].bias.value)[0])
    assert nets.mix(m, [1.7, -0.3], state) == pytest.approx(v, abs=1e-12)


def test_mix_monotone_in_each_utility():
    rng = np.random.default_rng(6)
    m = nets.MixerNet(3, 2, embed=4, hyper_hidden=4, rng=rng)
    state = rng.normal(size=3)
    u = rng.normal(size=2)
    base = nets.mix(m, u, state)
    for i in range(2):
        bumped = u.copy()
        bumped[i] += 0.5
        assert nets.mix(m, bumped, state) >= base - 1e-12


def test_mix_monotonicity_finite_difference_probe():
    rng = np.random.default_rng(7)
    for _ in range(100):
        m = nets.MixerNet(2, 3, embed=4, hyper_hidden=4, rng=rng)
        state = rng.normal(size=2)
        u = rng.uniform(-5, 5, size=3)
        for i in range(3):
            up = u.copy()
            up[i] += 1e-6
            down = u.copy()
            down[i] -= 1e-6
            fd = (nets.mix(m, up, state) - nets.mix(m, down, state)) / 2e-6
            assert fd >= -1e-9


def test_mixer_batch_matches_scalar_mix():
    rng = np.random.default_rng(8)
    m = nets.MixerNet(3, 2, embed=4, hyper_hidden=4, rng=rng)
    utils = rng.normal(size=(2, 2, 3))
    states = rng.normal(size=(2, 3, 3))
    out = m.q_tot(nm.Node(utils), states).value
    for t in range(2):
        for b in range(3):
            assert out[t, b] == pytest.approx(
                nets.mix(m, utils[t, :, b], states[t, :, b]), rel=1e-12, abs=1e-12)


def test_unrestricted_mixer_shapes_and_no_constraint():
    rng = np.random.default_rng(9)
    um = nets.UnrestrictedMixer(3, 2, embed=16, rng=rng)
    utils = rng.normal(size=(2, 2, 3))
    states = rng.normal(size=(2, 3, 3))
    out = um.q_tot(nm.Node(utils), states).value
    assert out.shape == (2, 3)
    # sign-unconstrained: some direction should decrease the output
    decreased = False
    for i in range(2):
        bumped = utils.copy()
        bumped[:, i, :] += 1.0
        if np.any(um.q_tot(nm.Node(bumped), states).value < out):
            decreased = True
    assert decreased


# ---------------------------------------------------------------------------
# greedy action selection / IGM
# ---------------------------------------------------------------------------


def test_greedy_single_agent():
    rng = np.random.default_rng(10)
    net = make_agent(rng, n_agents=1, n_actions=3)
    for p in net.params():
        p.value[:] = 0.0
    net.fc2.bias.value[:] = [0.0, 1.0, 0.0]
    actions, _ = nets.greedy_joint_action(
        [net], [np.zeros(3)], [np.zeros(3)], [np.ones(1)], [net.init_hidden()],
        [np.ones(3)])
    assert actions == [1]


def test_greedy_tie_breaks_to_lowest_index():
    rng = np.random.default_rng(11)
    net = make_agent(rng, n_agents=2, n_actions=4)
    for p in net.params():
        p.value[:] = 0.0
    actions, _ = nets.greedy_joint_action(
        [net, net], [np.zeros(3)] * 2, [np.zeros(4)] * 2,
        [np.eye(2)[0], np.eye(2)[1]], [net.init_hidden()] * 2,
        [np.ones(4)] * 2)
    assert actions == [0, 0]


def test_greedy_respects_available_actions():
    rng = np.random.default_rng(12)
    net = make_agent(rng, n_agents=1, n_actions=3)
    for p in net.params():
        p.value[:] = 0.0
    net.fc2.bias.value[:] = [5.0, 1.0, 0.0]
    actions, _ = nets.greedy_joint_action(
        [net], [np.zeros(3)], [np.zeros(3)], [np.ones(1)], [net.init_hidden()],
        [np.array([0.0, 1.0, 1.0])])
    assert actions == [1]


def test_igm_per_agent_argmax_equals_joint_enumeration():
    rng = np.random.default_rng(13)
    for _ in range(200):
        n_agents, n_actions = 2, 3
        m = nets.MixerNet(2, n_agents, embed=4, hyper_hidden=4, rng=rng)
        state = rng.normal(size=2)
        qs = [rng.normal(size=n_actions) for _ in range(n_agents)]
        per_agent = tuple(int(np.argmax(q)) for q in qs)
        joint_best = max(
            itertools.product(range(n_actions), repeat=n_agents),
            key=lambda u: nets.mix(m, [qs[i][u[i]] for i in range(n_agents)], state),
        )
        assert nets.mix(m, [qs[i][per_agent[i]] for i in range(n_agents)], state) \
            == pytest.approx(
                nets.mix(m, [qs[i][joint_best[i]] for i in range(n_agents)], state),
                rel=1e-12, abs=1e-12)


# ---------------------------------------------------------------------------
# target copies
# ---------------------------------------------------------------------------


def test_sync_target_copies_outputs_and_masks():
    rng = np.random.default_rng(14)
    net = make_agent(rng)
    group = topo.EvolutionGroup(net.weight_slots(), 0.5, "agents")
    topo.random_init_mask(group, rng)
    target = nets.clone_structure(net)
    obs, la, aid = rng.normal(size=3), np.eye(4)[0], np.eye(2)[0]
    q_on, _ = nets.agent_q_values(net, obs, la, aid, net.init_hidden())
    q_tg, _ = nets.agent_q_values(target, obs, la, aid, target.init_hidden())
    assert np.array_equal(q_on, q_tg)
    assert sum(s.ones() for s in target.weight_slots()) == group.ones()

    # evolve online only: stale target stays bitwise frozen until next sync
    grads = nm.GradStore({s.weights: rng.normal(size=s.weights.value.shape)
                          for s in group.slots})
    frozen = [s.mask.copy() for s in target.weight_slots()]
    frozen_w = [p.value.copy() for p in target.params()]
    topo.evolve(group, grads, 0, topo.EvolutionSchedule(zeta0=0.5, t_end=10**9))
    for s, m in zip(target.weight_slots(), frozen):
        assert np.array_equal(s.mask, m)
    for p, w in zip(target.params(), frozen_w):
        assert np.array_equal(p.value, w)

    nets.sync_target(target, net)
    for st_, so in zip(target.weight_slots(), net.weight_slots()):
        assert np.array_equal(st_.mask, so.mask)


# ---------------------------------------------------------------------------
# checkpoints
# ---------------------------------------------------------------------------


def test_checkpoint_round_trip_bit_exact(tmp_path):
    rng = np.random.default_rng(15)
    net = make_agent(rng)
    mixer = nets.MixerNet(3, 2, embed=4, hyper_hidden=4, rng=rng)
    group = topo.EvolutionGroup(net.weight_slots(), 0.7, "agents")
    topo.random_init_mask(group, rng)
    named = {"agent0": net, "mixer": mixer}
    meta = {"config_hash": "abc123", "step": 17}
    path = tmp_path / "ckpt.npz"
    nets.save_checkpoint(path, named, meta)

    arrays, loaded_meta = nets.load_checkpoint(path)
    assert loaded_meta == meta
    rng2 = np.random.default_rng(999)
    net2 = make_agent(rng2)
    mixer2 = nets.MixerNet(3, 2, embed=4, hyper_hidden=4, rng=rng2)
    nets.restore_state({"agent0": net2, "mixer": mixer2}, arrays)
    for a, b in zip(net.params() + mixer.params(), net2.params() + mixer2.params()):
        assert a.value.tobytes() == b.value.tobytes()
    for a, b in zip(net.weight_slots() + mixer.weight_slots(),
                    net2.weight_slots() + mixer2.weight_slots()):
        assert a.mask.tobytes() == b.mask.tobytes()


def test_checkpoint_shape_mismatch_rejected(tmp_path):
    rng = np.random.default_rng(16)
    net = make_agent(rng)
    path = tmp_path / "ckpt.npz"
    nets.save_checkpoint(path, {"agent0": net}, {})
    arrays, _ = nets.load_checkpoint(path)
    other = make_agent(rng, obs_dim=5)
    with pytest.raises(ValueError, match="shape mismatch"):
        nets.restore_state({"agent0": other}, arrays)
