"""Training loops: rollout, dual-buffer updates, target syncs, evolution.

One gradient update per completed episode once warmup has passed; target
networks sync on an episode schedule; topology evolution fires on its own
episode schedule using the dense gradients cached at the most recent
update. Everything is driven by explicitly seeded generators so a config
plus a seed reproduces a run exactly.
"""
from __future__ import annotations

import io
import logging
from dataclasses import dataclass, field, replace

import numpy as np

from . import numerics as nm
from . import networks as nets
from . import targets as tg
from .envs import TabularEnv, make_env_spec
from .replay import DualBuffer, Episode, pad_batch
from .sparse_topology import (EvolutionGroup, EvolutionSchedule, apply_mask,
                              evolve, random_init_mask)

log = logging.getLogger(__name__)


@dataclass
class TrainConfig:
    """Flat run configuration; defaults follow the published hyperparameter
    table except for the desk-scale run length."""

    env: str = "climb"
    algorithm: str = "qmix"              # qmix | owqmix
    seed: int = 0
    total_steps: int = 200_000
    warmup_steps: int = 50_000
    epsilon_initial: float = 1.0
    epsilon_final: float = 0.05
    epsilon_anneal_steps: int = 50_000
    eval_interval_steps: int = 2_000
    eval_episodes: int = 32
    lr: float = 5e-4
    rmsprop_smoothing: float = 0.99
    rmsprop_epsilon: float = 1e-5
    grad_clip_norm: float = 10.0
    gamma: float = 0.99
    target_update_episodes: int = 200
    buffer_capacity_offline: int = 5_000
    buffer_capacity_online: int = 128
    batch_offline: int = 20
    batch_online: int = 12
    sparsity: float = 0.0
    evolve: bool = True
    zeta0: float = 0.5
    evolve_interval_episodes: int = 200
    evolve_stop_frac: float = 0.75
    group_mode: str = "pooled"           # pooled | per_layer
    share_agent_params: bool = False
    agent_hidden: int = 64
    mixer_embed: int = 32
    hypernet_hidden: int = 64
    unrestricted_embed: int = 256
    operator: str = "soft_mellowmax"
    sm_alpha: float = 1.0
    sm_omega: float = 10.0
    softmax_beta: float = 5.0
    td_lambda: float = 0.8
    burn_in_steps: int = -1              # -1 -> 3/8 of total_steps
    double_dqn: bool = True
    ow_alpha: float = 0.1
    updates_per_episode: int = 1

    def __post_init__(self):
        if self.algorithm not in ("qmix", "owqmix"):
            raise ValueError(f"unknown algorithm {self.algorithm!r}")
        if self.group_mode not in ("pooled", "per_layer"):
            raise ValueError(f"unknown group_mode {self.group_mode!r}")
        if self.warmup_steps > self.total_steps:
            raise ValueError("warmup_steps must not exceed total_steps")
        if self.epsilon_anneal_steps > self.total_steps:
            raise ValueError("epsilon_anneal_steps must not exceed total_steps")
        if not (0.0 <= self.sparsity < 1.0):
            raise ValueError(f"sparsity must be in [0, 1), got {self.sparsity}")

    @property
    def burn_in(self) -> int:
        if self.burn_in_steps >= 0:
            return self.burn_in_steps
        return (3 * self.total_steps) // 8

    def target_config(self) -> tg.TargetConfig:
        return tg.TargetConfig(
            operator=self.operator, alpha=self.sm_alpha, omega=self.sm_omega,
            td_lambda=self.td_lambda, burn_in=self.burn_in, gamma=self.gamma,
            double_dqn=self.double_dqn, ow_alpha=self.ow_alpha,
            softmax_beta=self.softmax_beta,
        )


def epsilon_at(cfg: TrainConfig, step: int) -> float:
    frac = min(1.0, step / max(1, cfg.epsilon_anneal_steps))
    return cfg.epsilon_initial + frac * (cfg.epsilon_final - cfg.epsilon_initial)


@dataclass
class MetricsRow:
    step: int
    episodes: int
    mean_return: float
    solve_rate: float
    loss: float
    mean_q_tot: float
    mean_target: float
    epsilon: float
    ones: dict


@dataclass
class EvolutionEvent:
    step: int
    episodes: int
    group: str
    zeta: float
    k: int
    ones: int
    active_target: int
    shortfall: int


@dataclass
class RunResult:
    cfg: TrainConfig
    rows: list = field(default_factory=list)
    evolution_events: list = field(default_factory=list)
    diagnostics: dict = field(default_factory=dict)

    @property
    def final_score(self) -> float:
        tail = self.rows[-20:]
        return float(np.mean([r.mean_return for r in tail])) if tail else float("nan")


METRICS_COLUMNS = ("step", "episodes", "mean_return", "solve_rate", "loss",
                   "mean_q_tot", "mean_target", "epsilon")


def metrics_csv(result: RunResult) -> str:
    group_names = list(result.rows[0].ones) if result.rows else []
    buf = io.StringIO()
    buf.write(",".join(METRICS_COLUMNS + tuple(f"ones_{g}" for g in group_names)))
    buf.write("\n")
    for r in result.rows:
        vals = [str(r.step), str(r.episodes)]
        vals += [f"{v:.17g}" for v in (r.mean_return, r.solve_rate, r.loss,
                                       r.mean_q_tot, r.mean_target, r.epsilon)]
        vals += [str(r.ones[g]) for g in group_names]
        buf.write(",".join(vals) + "\n")
    return buf.getvalue()


def evolution_csv(result: RunResult) -> str:
    buf = io.StringIO()
    buf.write("step,episodes,group,zeta,k,ones,active_target,shortfall\n")
    for e in result.evolution_events:
        buf.write(f"{e.step},{e.episodes},{e.group},{e.zeta:.17g},{e.k},"
                  f"{e.ones},{e.active_target},{e.shortfall}\n")
    return buf.getvalue()


class Trainer:
    """Owns the networks, buffers and schedules of one run."""

    def __init__(self, cfg: TrainConfig, spec=None):
        self.cfg = cfg
        self.spec = spec if spec is not None else make_env_spec(cfg.env)
        self.tcfg = cfg.target_config()
        self.n_agents = self.spec.n_agents
        self.n_actions = self.spec.n_actions

        self.rng_init = np.random.default_rng([cfg.seed, 0])
        self.rng_explore = np.random.default_rng([cfg.seed, 1])
        self.rng_sample = np.random.default_rng([cfg.seed, 2])
        self.env = TabularEnv(self.spec, seed=cfg.seed * 9973 + 7)
        self.eval_env = TabularEnv(self.spec, seed=cfg.seed * 9973 + 11)

        self._build_networks()
        self._build_groups()
        self.buffer = DualBuffer(cfg.buffer_capacity_offline, cfg.buffer_capacity_online,
                                 cfg.batch_offline, cfg.batch_online)
        self.opt_state = nm.RmsPropState()
        self.opt_state_u = nm.RmsPropState()
        self.schedule = EvolutionSchedule(
            zeta0=cfg.zeta0, delta_m=cfg.evolve_interval_episodes,
            t_end=max(1, int(cfg.evolve_stop_frac * cfg.total_steps)))
        self.cached_grads: dict = {}
        self.step = 0
        self.episodes = 0
        self.result = RunResult(cfg, diagnostics={
            "skipped_updates": 0, "updates": 0, "target_syncs": 0,
            "realized_evolve_step_intervals": []})
        self._agent_eye = np.eye(self.n_agents)

    # -- construction ------------------------------------------------------

    def _build_networks(self):
        cfg, spec = self.cfg, self.spec
        obs_dim, n_act, n_ag = spec.obs_dim, spec.n_actions, spec.n_agents

        def make_agents(prefix):
            if cfg.share_agent_params:
                net = nets.AgentNet(obs_dim, n_act, n_ag, cfg.agent_hidden,
                                    self.rng_init, f"{prefix}_shared")
                return [net] * n_ag, [net]
            agents = [nets.AgentNet(obs_dim, n_act, n_ag, cfg.agent_hidden,
                                    self.rng_init, f"{prefix}{i}")
                      for i in range(n_ag)]
            return agents, agents

        self.agents, self.unique_agents = make_agents("agent")
        self.mixer = nets.MixerNet(spec.state_dim, n_ag, cfg.mixer_embed,
                                   cfg.hypernet_hidden, self.rng_init)
        if cfg.algorithm == "owqmix":
            self.u_agents, self.unique_u_agents = make_agents("u_agent")
            self.u_mixer = nets.UnrestrictedMixer(spec.state_dim, n_ag,
                                                  cfg.unrestricted_embed, self.rng_init)

    def _build_groups(self):
        cfg = self.cfg
        agent_slots = [s for net in self.unique_agents for s in net.weight_slots()]
        specs = [("agents", agent_slots), ("mixer", self.mixer.weight_slots())]
        if cfg.algorithm == "owqmix":
            u_slots = [s for net in self.unique_u_agents for s in net.weight_slots()]
            specs += [("u_agents", u_slots), ("u_mixer", self.u_mixer.weight_slots())]
        self.groups = {}
        for name, slots in specs:
            if cfg.group_mode == "pooled":
                self.groups[name] = EvolutionGroup(slots, cfg.sparsity, name)
            else:
                for s in slots:
                    self.groups[f"{name}/{s.slot_id}"] = EvolutionGroup(
                        [s], cfg.sparsity, f"{name}/{s.slot_id}")
        for g in self.groups.values():
            random_init_mask(g, self.rng_init)

        self.target_agents = [nets.clone_structure(n) for n in self.unique_agents]
        self.target_mixer = nets.clone_structure(self.mixer)
        if cfg.share_agent_params:
            self.target_agents = self.target_agents * self.n_agents
        self.params = [p for net in self.unique_agents for p in net.params()]
        self.params += self.mixer.params()
        if cfg.algorithm == "owqmix":
            self.target_u_agents = [nets.clone_structure(n) for n in self.unique_u_agents]
            self.target_u_mixer = nets.clone_structure(self.u_mixer)
            if cfg.share_agent_params:
                self.target_u_agents = self.target_u_agents * self.n_agents
            self.params_u = [p for net in self.unique_u_agents for p in net.params()]
            self.params_u += self.u_mixer.params()

    def named_nets(self) -> dict:
        named = {}
        for i, net in enumerate(self.unique_agents):
            named[f"agent{i}"] = net
        named["mixer"] = self.mixer
        if self.cfg.algorithm == "owqmix":
            for i, net in enumerate(self.unique_u_agents):
                named[f"u_agent{i}"] = net
            named["u_mixer"] = self.u_mixer
        return named

    def group_ones(self) -> dict:
        return {name: g.ones() for name, g in self.groups.items()}

    # -- rollout -----------------------------------------------------------

    def rollout_episode(self, env: TabularEnv, epsilon: float, rng,
                        reset_seed=None) -> Episode:
        spec = self.spec
        state, obs = env.reset(seed=reset_seed)
        states, observations, avails = [state], [obs], [env.available_actions()]
        actions_hist, rewards = [], []
        hiddens = [net.init_hidden() for net in self.agents]
        last = np.zeros((self.n_agents, self.n_actions))
        terminated = False
        while True:
            avail = avails[-1]
            acts = []
            for i, net in enumerate(self.agents):
                q, h = nets.agent_q_values(net, observations[-1][i], last[i],
                                           self._agent_eye[i], hiddens[i])
                hiddens[i] = h
                if epsilon > 0.0 and rng.random() < epsilon:
                    choices = np.flatnonzero(avail[i] > 0)
                    acts.append(int(choices[rng.integers(choices.size)]))
                else:
                    acts.append(int(np.argmax(np.where(avail[i] > 0, q, -np.inf))))
            r, obs, terminated, truncated, state = env.step(tuple(acts))
            actions_hist.append(acts)
            rewards.append(r)
            states.append(state)
            observations.append(obs)
            avails.append(env.available_actions())
            last = np.zeros((self.n_agents, self.n_actions))
            last[np.arange(self.n_agents), acts] = 1.0
            if terminated or truncated:
                break
        return Episode(
            states=np.asarray(states),
            obs=np.asarray(observations),
            avail=np.asarray(avails),
            actions=np.asarray(actions_hist, dtype=np.int64),
            rewards=np.asarray(rewards),
            terminated=terminated,
            tag=self.episodes,
        )

    # -- batched forward helpers --------------------------------------------

    def _agent_inputs(self, batch):
        """Per-agent (L+1, input, batch) arrays with previous-action one-hots."""
        lmax, bsz = batch.max_len, batch.size
        last = np.zeros((lmax + 1, self.n_agents, self.n_actions, bsz))
        for i in range(self.n_agents):
            onehot = np.eye(self.n_actions)[batch.actions[:, i, :]]  # (L, B, U)
            last[1:, i] = onehot.transpose(0, 2, 1)
        inputs = []
        for i in range(self.n_agents):
            ident = np.broadcast_to(
                self._agent_eye[i][None, :, None], (lmax + 1, self.n_agents, bsz))
            inputs.append(np.concatenate([batch.obs[:, i], last[:, i], ident], axis=1))
        return inputs

    def _forward_team(self, agents, inputs, batch, tape=None):
        """All-agent utilities: list of (L+1, actions, batch) nodes."""
        return [
            agents[i].sequence(inputs[i], agents[i].init_hidden(batch.size), tape)
            for i in range(self.n_agents)
        ]

    def _chosen_q_tot(self, agents, mixer, inputs, batch, tape):
        qs = self._forward_team(agents, inputs, batch, tape)
        chosen = [
            nm.take_per_column(nm.slice_time(qs[i], 0, batch.max_len, tape),
                               batch.actions[:, i, :], tape)
            for i in range(self.n_agents)
        ]
        stacked = nm.stack_agents(chosen, tape)
        q_tot = mixer.q_tot(stacked, batch.states[:batch.max_len], tape)
        return q_tot, qs

    def _bootstraps(self, batch, target_agents, target_mixer, inputs,
                    online_qs=None):
        """Next-state mixed values (L, B), zero past termination."""
        lmax, bsz = batch.max_len, batch.size
        tq = self._forward_team(target_agents, inputs, batch, tape=None)
        q_target = np.stack([q.value[1:] for q in tq], axis=1)      # (L, N, U, B)
        avail = batch.avail[1:].copy()
        q_online = None
        if online_qs is not None:
            q_online = np.stack([q.value[1:] for q in online_qs], axis=1)
        boots = tg.bootstrap_batch(q_target, avail, batch.states[1:],
                                   target_mixer, self.tcfg, q_online)
        # no bootstrap through terminal transitions
        last_step = batch.lengths - 1                                # (B,)
        cut = (np.arange(lmax)[:, None] == last_step[None, :]) & batch.terminated[None, :]
        return np.where(cut, 0.0, boots) * batch.valid

    # -- updates -------------------------------------------------------------

    def train_step(self, batch, t_global: int):
        if self.cfg.algorithm == "qmix":
            return self._train_step_qmix(batch, t_global)
        return self._train_step_owqmix(batch, t_global)

    def _finish_update(self, tape, params, groups, opt_state, loss):
        if not np.isfinite(loss.value):
            self.result.diagnostics["skipped_updates"] += 1
            log.warning("skipped update: non-finite loss at step %d", self.step)
            return False
        grads = nm.backward(tape)
        # raw dense gradients feed the next topology evolution; clipping below
        # replaces (not mutates) the stored arrays, so these references stay raw
        for name, group in groups.items():
            self.cached_grads[name] = nm.GradStore(
                {s.weights: grads.of(s.weights) for s in group.slots})
        nm.clip_global_norm(params, grads, self.cfg.grad_clip_norm)
        ok = nm.rmsprop_step(params, grads, opt_state, self.cfg.lr,
                             self.cfg.rmsprop_smoothing, self.cfg.rmsprop_epsilon)
        if not ok:
            self.result.diagnostics["skipped_updates"] += 1
            log.warning("skipped update: non-finite gradient at step %d", self.step)
            return False
        for group in groups.values():
            for s in group.slots:
                apply_mask(s)
        return True

    def _train_step_qmix(self, batch, t_global: int):
        inputs = self._agent_inputs(batch)
        tape = nm.Tape()
        q_tot, online_qs = self._chosen_q_tot(self.agents, self.mixer, inputs,
                                              batch, tape)
        boots = self._bootstraps(batch, self.target_agents, self.target_mixer,
                                 inputs, online_qs)
        y = tg.hybrid_target_batch(batch.rewards, boots, batch.valid, t_global, self.tcfg)
        loss = tg.td_loss(q_tot, y, np.ones_like(y), batch.valid, tape)
        groups = {n: g for n, g in self.groups.items()
                  if not n.startswith("u_")}
        self._finish_update(tape, self.params, groups, self.opt_state, loss)
        self.result.diagnostics["updates"] += 1
        nv = batch.valid.sum()
        return (float(loss.value),
                float((q_tot.value * batch.valid).sum() / nv),
                float((y * batch.valid).sum() / nv))

    def _train_step_owqmix(self, batch, t_global: int):
        inputs = self._agent_inputs(batch)
        # restricted pass
        tape = nm.Tape()
        q_tot, _ = self._chosen_q_tot(self.agents, self.mixer, inputs, batch, tape)
        # unrestricted pass on its own tape: no gradient crosses between them
        tape_u = nm.Tape()
        q_star, online_u_qs = self._chosen_q_tot(self.u_agents, self.u_mixer,
                                                 inputs, batch, tape_u)
        boots = self._bootstraps(batch, self.target_u_agents, self.target_u_mixer,
                                 inputs, online_u_qs)
        y = tg.hybrid_target_batch(batch.rewards, boots, batch.valid, t_global, self.tcfg)
        w = tg.ow_weights(q_tot.value, y, self.cfg.ow_alpha)
        loss = tg.td_loss(q_tot, y, w, batch.valid, tape)
        loss_u = tg.td_loss(q_star, y, np.ones_like(y), batch.valid, tape_u)
        groups = {n: g for n, g in self.groups.items() if not n.startswith("u_")}
        groups_u = {n: g for n, g in self.groups.items() if n.startswith("u_")}
        self._finish_update(tape, self.params, groups, self.opt_state, loss)
        self._finish_update(tape_u, self.params_u, groups_u, self.opt_state_u, loss_u)
        self.result.diagnostics["updates"] += 1
        nv = batch.valid.sum()
        return (float(loss.value + loss_u.value),
                float((q_tot.value * batch.valid).sum() / nv),
                float((y * batch.valid).sum() / nv))

    # -- schedules -----------------------------------------------------------

    def sync_targets(self):
        for tgt, src in zip(self.target_agents[:len(self.unique_agents)],
                            self.unique_agents):
            nets.sync_target(tgt, src)
        nets.sync_target(self.target_mixer, self.mixer)
        if self.cfg.algorithm == "owqmix":
            for tgt, src in zip(self.target_u_agents[:len(self.unique_u_agents)],
                                self.unique_u_agents):
                nets.sync_target(tgt, src)
            nets.sync_target(self.target_u_mixer, self.u_mixer)
        self.result.diagnostics["target_syncs"] += 1

    def evolve_groups(self):
        opt_states = {name: (self.opt_state_u if name.startswith("u_") else self.opt_state)
                      for name in self.groups}
        for name, group in self.groups.items():
            grads = self.cached_grads.get(name)
            if grads is None:
                continue
            report = evolve(group, grads, self.step, self.schedule)
            # new connections start with no optimizer history
            if report.grown.size:
                state = opt_states[name]
                ofs = 0
                for s in group.slots:
                    n = s.size
                    local = report.grown[(report.grown >= ofs) & (report.grown < ofs + n)] - ofs
                    if local.size:
                        state.of(s.weights).reshape(-1)[local] = 0.0
                    ofs += n
            self.result.evolution_events.append(EvolutionEvent(
                step=self.step, episodes=self.episodes, group=name,
                zeta=float(report.zeta), k=report.k, ones=group.ones(),
                active_target=group.active_target, shortfall=report.shortfall))

    # -- evaluation ------------------------------------------------------------

    def evaluate(self, last_loss, last_q, last_y):
        cfg = self.cfg
        returns, solves = [], []
        for i in range(cfg.eval_episodes):
            seed = cfg.seed * 1_000_003 + len(self.result.rows) * 1_009 + i
            ep = self.rollout_episode(self.eval_env, 0.0,
                                      np.random.default_rng(seed), reset_seed=seed)
            returns.append(ep.total_reward)
            solves.append(float(ep.total_reward >= self.spec.solve_return - 1e-9))
        self.result.rows.append(MetricsRow(
            step=self.step, episodes=self.episodes,
            mean_return=float(np.mean(returns)), solve_rate=float(np.mean(solves)),
            loss=last_loss, mean_q_tot=last_q, mean_target=last_y,
            epsilon=epsilon_at(cfg, self.step), ones=self.group_ones()))
        if len(self.result.rows) % 10 == 0:
            row = self.result.rows[-1]
            log.info("step %d  episodes %d  return %.3f  solve %.2f  eps %.3f",
                     row.step, row.episodes, row.mean_return, row.solve_rate,
                     row.epsilon)

    # -- main loop ---------------------------------------------------------------

    def run(self) -> RunResult:
        cfg = self.cfg
        last_loss = last_q = last_y = float("nan")
        next_eval = 0
        last_evolve_step = None
        while self.step < cfg.total_steps:
            ep = self.rollout_episode(self.env, epsilon_at(cfg, self.step),
                                      self.rng_explore)
            self.buffer.push(ep)
            self.episodes += 1
            self.step += ep.length

            if self.step >= cfg.warmup_steps and self.buffer.can_sample():
                for _ in range(cfg.updates_per_episode):
                    batch = pad_batch(self.buffer.sample(self.rng_sample))
                    last_loss, last_q, last_y = self.train_step(batch, self.step)

            if self.episodes % cfg.target_update_episodes == 0:
                self.sync_targets()
            if (cfg.evolve and self.episodes % cfg.evolve_interval_episodes == 0
                    and self.step >= cfg.warmup_steps):
                if last_evolve_step is not None:
                    self.result.diagnostics["realized_evolve_step_intervals"].append(
                        self.step - last_evolve_step)
                last_evolve_step = self.step
                self.evolve_groups()

            if self.step >= next_eval:
                self.evaluate(last_loss, last_q, last_y)
                next_eval = (self.step // cfg.eval_interval_steps + 1) \
                    * cfg.eval_interval_steps
        self.evaluate(last_loss, last_q, last_y)
        return self.result


def run(cfg: TrainConfig, spec=None) -> tuple:
    """Train per the config; returns (RunResult, Trainer)."""
    trainer = Trainer(cfg, spec)
    result = trainer.run()
    return result, trainer


def variant(cfg: TrainConfig, **changes) -> TrainConfig:
    return replace(cfg, **changes)
