import numpy as np
import pytest

from sparsemarl import accounting as acc
from sparsemarl import networks as nets
from sparsemarl import sparse_topology as topo


def test_linear_size_examples():
    assert acc.linear_size(0.0, 64, 64) == 4096
    assert acc.linear_size(0.9, 64, 64) == pytest.approx(409.6)
    assert acc.gru_size(0.9, 64, 64) == pytest.approx(2457.6)


def test_fwd_flops_examples():
    assert acc.linear_fwd_flops(0.9, 64, 64) == pytest.approx(0.1 * 127 * 64)
    assert acc.linear_fwd_flops(1.0, 64, 64) == 0.0
    assert acc.gru_fwd_flops(1.0, 64, 64) == 0.0
    dense = acc.linear_fwd_flops(0.0, 64, 64)
    assert acc.linear_fwd_flops(0.9, 64, 64) / dense == pytest.approx(0.1)


def test_gru_fwd_flops_formula():
    assert acc.gru_fwd_flops(0.0, 64, 64) == 3 * 64 * (2 * 128 - 1)


def test_sparsity_range_check():
    with pytest.raises(ValueError):
        acc.linear_size(-0.1, 4, 4)
    with pytest.raises(ValueError):
        acc.gru_fwd_flops(1.1, 4, 4)


def test_train_flops_qmix_example():
    assert acc.train_flops("qmix", 32, 1000.0, 100.0) == 140800.0


def test_train_flops_wqmix_coefficients():
    f = 7.0
    assert acc.train_flops("wqmix", 32, f, f, f, f) == 32 * 14 * f


def test_train_flops_res_both_variants():
    # published coefficient table vs its own derivation; both ship, labeled
    table = acc.train_flops("res_table", 32, 1000.0, 100.0, n_agents=2, max_actions=3)
    deriv = acc.train_flops("res_derivation", 32, 1000.0, 100.0, n_agents=2, max_actions=3)
    assert table == 32 * (4 * 1000 + (5 + 6) * 100) == 163200
    assert deriv == 32 * (4 * 1000 + (3 + 12) * 100) == 176000


def test_train_flops_rejects_unknown():
    with pytest.raises(ValueError, match="unknown algorithm"):
        acc.train_flops("dqn", 32, 1.0, 1.0)
    with pytest.raises(ValueError):
        acc.train_flops("qmix", 0, 1.0, 1.0)


# ---------------------------------------------------------------------------
# report
# ---------------------------------------------------------------------------


ARCH = dict(n_agents=2, obs_dim=20, n_actions=5, state_dim=6)


def test_report_dense_ratios_are_one():
    rep = acc.report("qmix", 0.0, 32, **ARCH)
    assert rep.size_ratio == 1.0
    assert rep.inference_ratio == 1.0
    assert rep.train_ratio == 1.0


def test_report_sparse_ratio_scales_linearly():
    rep = acc.report("qmix", 0.9, 32, **ARCH)
    assert rep.size_ratio == pytest.approx(0.1, rel=1e-12)
    assert rep.train_ratio == pytest.approx(0.1, rel=1e-12)
    assert rep.inference_ratio == pytest.approx(0.1, rel=1e-12)


def test_report_additivity():
    rep = acc.report("owqmix", 0.5, 32, **ARCH)
    for name in ("agent", "mixer", "u_agent", "u_mixer"):
        per = [l for l in rep.layers if l.network == name]
        assert sum(l.size for l in per) == pytest.approx(rep.networks[name]["size"])
        assert sum(l.fwd_flops for l in per) == pytest.approx(
            rep.networks[name]["fwd_flops"])


def test_report_monotone_in_sparsity():
    sizes, flops = [], []
    for s in (0.0, 0.3, 0.6, 0.9):
        rep = acc.report("qmix", s, 32, **ARCH)
        sizes.append(rep.model_size)
        flops.append(rep.train_flops)
    assert sizes == sorted(sizes, reverse=True)
    assert flops == sorted(flops, reverse=True)
    assert len(set(sizes)) == 4 and len(set(flops)) == 4


def test_dense_counts_match_allocated_networks_exactly():
    rng = np.random.default_rng(0)
    agent = nets.AgentNet(ARCH["obs_dim"], ARCH["n_actions"], ARCH["n_agents"], 64, rng)
    mixer = nets.MixerNet(ARCH["state_dim"], ARCH["n_agents"], 32, 64, rng)
    umixer = nets.UnrestrictedMixer(ARCH["state_dim"], ARCH["n_agents"], 256, rng)
    rep = acc.report("owqmix", 0.0, 32, **ARCH)
    assert rep.networks["agent"]["dense_size"] == sum(
        s.size for s in agent.weight_slots())
    assert rep.networks["mixer"]["dense_size"] == sum(
        s.size for s in mixer.weight_slots())
    assert rep.networks["u_mixer"]["dense_size"] == sum(
        s.size for s in umixer.weight_slots())


def test_report_independent_recomputation():
    # spreadsheet-style recomputation of every budgeted quantity
    s, B, N, U, OBS, S_DIM, H, E, HH = 0.9, 32, 2, 5, 20, 6, 64, 32, 64
    in_dim = OBS + U + N
    f_a = (1 - s) * ((2 * in_dim - 1) * H + 3 * H * (2 * 2 * H - 1) + (2 * H - 1) * U)
    f_m = (1 - s) * (
        (2 * S_DIM - 1) * HH + (2 * HH - 1) * E * N    # W1 head
        + (2 * S_DIM - 1) * E                          # b1 head
        + (2 * S_DIM - 1) * HH + (2 * HH - 1) * E      # w2 head
        + (2 * S_DIM - 1) * HH + (2 * HH - 1) * 1      # value head
    )
    m_a = (1 - s) * (in_dim * H + 3 * H * 2 * H + H * U)
    m_m = (1 - s) * (S_DIM * HH + HH * E * N + S_DIM * E
                     + S_DIM * HH + HH * E + S_DIM * HH + HH * 1)
    rep = acc.report("qmix", s, B, **ARCH)
    assert rep.networks["agent"]["fwd_flops"] == pytest.approx(f_a, rel=1e-9)
    assert rep.networks["mixer"]["fwd_flops"] == pytest.approx(f_m, rel=1e-9)
    assert rep.networks["agent"]["size"] == pytest.approx(m_a, rel=1e-9)
    assert rep.networks["mixer"]["size"] == pytest.approx(m_m, rel=1e-9)
    assert rep.inference_flops == pytest.approx(N * f_a, rel=1e-9)
    assert rep.model_size == pytest.approx(2 * (N * m_a + m_m), rel=1e-9)
    assert rep.train_flops == pytest.approx(4 * B * (N * f_a + f_m), rel=1e-9)
    assert rep.train_variants["res_table"] == pytest.approx(
        B * (4 * N * f_a + (5 + N * U) * f_m), rel=1e-9)
    assert rep.train_variants["res_derivation"] == pytest.approx(
        B * (4 * N * f_a + (3 + 2 * N * U) * f_m), rel=1e-9)


def test_report_realized_columns():
    rng = np.random.default_rng(1)
    agent = nets.AgentNet(ARCH["obs_dim"], ARCH["n_actions"], ARCH["n_agents"], 64, rng)
    group = topo.EvolutionGroup(agent.weight_slots(), 0.9, "agents")
    topo.random_init_mask(group, rng)
    rep = acc.report("qmix", 0.9, 32, **ARCH, agent_slots=agent.weight_slots())
    realized = [l for l in rep.layers if l.network == "agent"]
    total_realized = sum(l.realized_size for l in realized)
    assert total_realized == pytest.approx(group.ones(), abs=1e-9)


def test_report_csv_and_text_render():
    rep = acc.report("qmix", 0.9, 32, **ARCH)
    csv = rep.to_csv()
    assert "model_size" in csv and "train_flops[res_table]" in csv
    text = rep.to_text()
    assert "ratio 0.1000" in text
