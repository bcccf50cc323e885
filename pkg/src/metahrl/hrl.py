"""Two-level slicing controller.

The higher agent splits the cell's RBs between slices (contiguous blocks in
slice order); one lower agent per slice splits its block between the
slice's UEs. Raw actions in [-1, 1] are decoded with a tempered softmax and
largest-remainder rounding, so decoded allocations are always feasible.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .ddpg import Batch, DDPGAgent, DDPGConfig, ReplayBuffer, Transition, select_action, train_step
from .env import N_SLICES, EnvState, TaskSpec, build_env, env_step, largest_remainder
from .errors import DomainError
from .nn import MLPParams

SLICE_NAMES = ("embb", "mmtc", "urllc")
LEVELS = ("higher",) + tuple(f"lower_{s}" for s in SLICE_NAMES)
HIGHER_OBS_DIM = 3 * N_SLICES


def sigmoid(x):
    return 1.0 / (1.0 + np.exp(-np.asarray(x, dtype=float)))


def action_fractions(a_raw, temperature: float) -> np.ndarray:
    """Shift-invariant softmax of the raw action; equal entries give equal shares."""
    z = temperature * np.asarray(a_raw, dtype=float)
    z = np.exp(z - z.max())
    return z / z.sum()


@dataclass
class Goal:
    budgets: np.ndarray  # RBs per slice, sums to K
    b: np.ndarray  # (L, K) contiguous slice masks

    def block(self, slice_idx: int) -> range:
        start = int(self.budgets[:slice_idx].sum())
        return range(start, start + int(self.budgets[slice_idx]))


def decode_higher_action(a_raw, n_rb: int, temperature: float = 3.0) -> Goal:
    a_raw = np.asarray(a_raw, dtype=float)
    if a_raw.shape != (N_SLICES,):
        raise DomainError(f"higher action must have {N_SLICES} entries")
    budgets = largest_remainder(action_fractions(a_raw, temperature), n_rb)
    b = np.zeros((N_SLICES, n_rb))
    start = 0
    for s, kb in enumerate(budgets):
        b[s, start : start + kb] = 1.0
        start += kb
    return Goal(budgets, b)


def decode_lower_action(a_raw, budget: int, temperature: float = 3.0) -> np.ndarray:
    """RB counts per UE of a slice; ``a_raw`` holds one entry per member UE."""
    a_raw = np.asarray(a_raw, dtype=float)
    if budget < 0:
        raise DomainError("budget must be non-negative")
    if a_raw.size == 0:
        return np.zeros(0, dtype=int)
    return largest_remainder(action_fractions(a_raw, temperature), budget)


def assign_rbs(counts, members, block: range, n_ue: int, n_rb: int) -> np.ndarray:
    """Rows of ``e`` for a slice: UE ``members[j]`` takes the next ``counts[j]`` RBs of the block."""
    e = np.zeros((n_ue, n_rb))
    rbs = list(block)
    pos = 0
    for ue, c in zip(members, counts):
        e[ue, rbs[pos : pos + c]] = 1.0
        pos += c
    return e


def rb_overflow(e, n_rb: int) -> int:
    return int(max(0, np.asarray(e).sum() - n_rb))


def lower_reward(q_min: float, c_min: float, c_max: float, overflow: float) -> float:
    q_norm = (q_min - c_min) / (c_max - c_min)
    return float(sigmoid(q_norm) - sigmoid(overflow))


def higher_reward(q_norm) -> float:
    return float(np.sum(q_norm))


def normalize_kpis(kpis, spec: TaskSpec, ue_per_slice) -> np.ndarray:
    """Map raw slice KPIs to [0, 1], higher is better; a slice without UEs scores 0.

    eMBB mean rate and mMTC capacity per UE are scaled by ``reward_max``;
    the URLLC worst latency becomes ``1 - l_d / tau_max``.
    """
    kpis = np.asarray(kpis, dtype=float)
    n = np.asarray(ue_per_slice)
    out = np.zeros(N_SLICES)
    if n[0]:
        out[0] = kpis[0] / spec.reward_max
    if n[1]:
        out[1] = kpis[1] / (n[1] * spec.reward_max)
    if n[2]:
        out[2] = 1.0 - kpis[2] / spec.tau_max_s
    return np.clip(out, 0.0, 1.0)


@dataclass
class HRLConfig:
    ddpg: DDPGConfig = field(default_factory=DDPGConfig)
    h_period: int = 1
    temperature: float = 3.0

    def __post_init__(self):
        if isinstance(self.ddpg, dict):
            self.ddpg = DDPGConfig(**self.ddpg)
        if self.h_period < 1:
            raise DomainError("h_period must be >= 1")


def lower_obs_dim(ue_count: int) -> int:
    return 3 + ue_count


class HRLAgent:
    """Higher (inter-slice) agent plus one lower (intra-slice) agent per slice, with replay buffers."""

    def __init__(self, agents: dict, config: HRLConfig, ue_count: int):
        self.agents = agents
        self.config = config
        self.ue_count = ue_count
        self.buffers = {lv: ReplayBuffer(a.obs_dim, a.act_dim, config.ddpg.buffer_capacity) for lv, a in agents.items()}

    @classmethod
    def create(cls, ue_count: int, rng: np.random.Generator, config: HRLConfig | None = None) -> "HRLAgent":
        config = HRLConfig() if config is None else config
        agents = {"higher": DDPGAgent.create(HIGHER_OBS_DIM, N_SLICES, rng, config.ddpg)}
        for lv in LEVELS[1:]:
            agents[lv] = DDPGAgent.create(lower_obs_dim(ue_count), ue_count, rng, config.ddpg)
        return cls(agents, config, ue_count)

    @classmethod
    def from_params(cls, params: dict, config: HRLConfig, ue_count: int) -> "HRLAgent":
        agents = {lv: DDPGAgent.from_params(params[f"{lv}.actor"], params[f"{lv}.critic"], config.ddpg) for lv in LEVELS}
        return cls(agents, config, ue_count)

    def params(self) -> dict[str, MLPParams]:
        out = {}
        for lv in LEVELS:
            out[f"{lv}.actor"] = self.agents[lv].actor.copy()
            out[f"{lv}.critic"] = self.agents[lv].critic.copy()
        return out

    def copy(self) -> "HRLAgent":
        new = HRLAgent({lv: a.copy() for lv, a in self.agents.items()}, self.config, self.ue_count)
        new.buffers = {lv: b.copy() for lv, b in self.buffers.items()}
        return new

    def set_noise_progress(self, frac: float) -> None:
        for a in self.agents.values():
            a.set_noise_progress(frac)

    def set_noise(self, std: float) -> None:
        for a in self.agents.values():
            a.noise_std = std


@dataclass
class StepContext:
    """Per-episode memory the observations need: previous actions, current goal, pending higher transition."""

    prev_higher: np.ndarray
    prev_lower: np.ndarray  # (L, ue_count) previous RB fractions per member slot
    goal: Goal | None = None
    pending: tuple | None = None  # (s_h, a_h, reward_sum, n_steps)

    @classmethod
    def fresh(cls, ue_count: int) -> "StepContext":
        return cls(np.full(N_SLICES, 1.0 / N_SLICES), np.zeros((N_SLICES, ue_count)))


def higher_obs(state: EnvState, ctx: StepContext) -> np.ndarray:
    n = state.ue_per_slice
    q = normalize_kpis(state.kpis, state.spec, n) if state.t > 0 else np.zeros(N_SLICES)
    return np.concatenate([q, n / state.spec.ue_count, ctx.prev_higher])


def lower_obs(state: EnvState, slice_idx: int, ctx: StepContext) -> np.ndarray:
    members = state.slice_members(slice_idx)
    rates = state.last_rate[members] / state.spec.reward_max if members.size else np.zeros(1)
    stats = np.array([rates.mean(), rates.min(), rates.max()])
    return np.concatenate([stats, ctx.prev_lower[slice_idx]])


@dataclass
class StepResult:
    state: EnvState
    higher: list  # 0 or 1 Transition
    lower: dict  # level -> Transition
    kpis: np.ndarray
    kpis_norm: np.ndarray
    rates: np.ndarray
    reward: float
    lower_rewards: dict
    goal: Goal


def hrl_step(
    agent: HRLAgent,
    state: EnvState,
    ctx: StepContext,
    rng: np.random.Generator,
    explore: bool = True,
    overrides: dict | None = None,
) -> StepResult:
    """Advance the cell one frame under the hierarchical policy.

    ``overrides`` maps a level name to a raw action used instead of the
    policy output (random baselines use it).
    """
    spec = state.spec
    n_rb, n_ue = spec.rb_count, spec.ue_count
    cfg = agent.config
    overrides = overrides or {}
    s_h = higher_obs(state, ctx)
    if ctx.goal is None or state.t % cfg.h_period == 0:
        a_h = overrides.get("higher")
        if a_h is None:
            a_h = select_action(agent.agents["higher"], s_h, explore, rng)
        ctx.goal = decode_higher_action(a_h, n_rb, cfg.temperature)
        ctx.pending = (s_h, np.asarray(a_h, dtype=float), 0.0, 0)
    goal = ctx.goal

    e = np.zeros((n_ue, n_rb))
    lower_inputs = {}
    new_prev_lower = np.zeros_like(ctx.prev_lower)
    for s in range(N_SLICES):
        members = state.slice_members(s)
        if members.size == 0:
            continue
        lv = LEVELS[1 + s]
        s_l = lower_obs(state, s, ctx)
        a_l = overrides.get(lv)
        if a_l is None:
            a_l = select_action(agent.agents[lv], s_l, explore, rng)
        budget = int(goal.budgets[s])
        counts = decode_lower_action(a_l[: members.size], budget, cfg.temperature)
        e += assign_rbs(counts, members, goal.block(s), n_ue, n_rb)
        if budget:
            new_prev_lower[s, : members.size] = counts / budget
        lower_inputs[lv] = (s_l, np.asarray(a_l, dtype=float))

    nxt, kpis, rates = env_step(state, goal.b, e)
    n_per = nxt.ue_per_slice
    q_norm = normalize_kpis(kpis, spec, n_per)
    reward = higher_reward(q_norm)
    overflow = rb_overflow(e, n_rb)

    ctx.prev_higher = goal.budgets / n_rb if n_rb else np.zeros(N_SLICES)
    ctx.prev_lower = new_prev_lower
    lower_tr, lower_rewards = {}, {}
    for s in range(N_SLICES):
        lv = LEVELS[1 + s]
        if lv not in lower_inputs:
            continue
        members = nxt.slice_members(s)
        r_l = lower_reward(rates[members].min(), spec.reward_min, spec.reward_max, overflow)
        s_l, a_l = lower_inputs[lv]
        lower_tr[lv] = Transition(s_l, a_l, lower_obs(nxt, s, ctx), r_l)
        lower_rewards[lv] = r_l

    s_hp, a_hp, acc, cnt = ctx.pending
    acc, cnt = acc + reward, cnt + 1
    higher_tr = []
    if nxt.t % cfg.h_period == 0:
        higher_tr.append(Transition(s_hp, a_hp, higher_obs(nxt, ctx), acc / cnt))
        ctx.pending = (s_hp, a_hp, 0.0, 0)
    else:
        ctx.pending = (s_hp, a_hp, acc, cnt)
    return StepResult(nxt, higher_tr, lower_tr, kpis, q_norm, rates, reward, lower_rewards, goal)


@dataclass
class EpisodeTrace:
    """Per-step record of one episode; arrays are aligned on the step axis."""

    rewards: np.ndarray
    lower_rewards: np.ndarray  # (T, L), NaN for slices without UEs
    rates: np.ndarray  # (T, N)
    latencies: np.ndarray  # (T, N)
    kpis: np.ndarray  # (T, L) raw
    kpis_norm: np.ndarray  # (T, L)
    slice_of: np.ndarray

    def __len__(self):
        return len(self.rewards)


def run_episode(
    agent: HRLAgent,
    spec: TaskSpec,
    episode: int,
    steps: int,
    rng: np.random.Generator,
    explore: bool = True,
    buffers: dict | None = None,
    policy: str = "agent",
) -> EpisodeTrace:
    """Roll out one episode; transitions go into ``buffers`` (level -> ReplayBuffer) when given.

    ``policy="random"`` replaces every action with a uniform draw in [-1, 1].
    """
    state = build_env(spec, episode)
    ctx = StepContext.fresh(spec.ue_count)
    rec = {k: [] for k in ("r", "lr", "rates", "lat", "kp", "kpn")}
    for _ in range(steps):
        overrides = None
        if policy == "random":
            overrides = {"higher": rng.uniform(-1, 1, N_SLICES)}
            overrides.update({lv: rng.uniform(-1, 1, agent.ue_count) for lv in LEVELS[1:]})
        res = hrl_step(agent, state, ctx, rng, explore, overrides)
        state = res.state
        if buffers is not None:
            for tr in res.higher:
                buffers["higher"].add(tr)
            for lv, tr in res.lower.items():
                buffers[lv].add(tr)
        rec["r"].append(res.reward)
        rec["lr"].append([res.lower_rewards.get(lv, np.nan) for lv in LEVELS[1:]])
        rec["rates"].append(res.rates)
        rec["lat"].append(state.last_latency)
        rec["kp"].append(res.kpis)
        rec["kpn"].append(res.kpis_norm)
    return EpisodeTrace(
        np.asarray(rec["r"]),
        np.asarray(rec["lr"]).reshape(steps, N_SLICES),
        np.asarray(rec["rates"]).reshape(steps, spec.ue_count),
        np.asarray(rec["lat"]).reshape(steps, spec.ue_count),
        np.asarray(rec["kp"]).reshape(steps, N_SLICES),
        np.asarray(rec["kpn"]).reshape(steps, N_SLICES),
        state.slice_of.copy(),
    )


def sample_batches(buffers: dict, batch_size: int, rng: np.random.Generator) -> dict[str, Batch]:
    return {lv: buf.sample(batch_size, rng) for lv, buf in buffers.items() if len(buf)}


def train_hrl(agent: HRLAgent, buffers: dict, n_updates: int, rng: np.random.Generator) -> dict:
    """``n_updates`` DDPG steps for every level that has data; returns mean losses per level."""
    losses = {lv: [0.0, 0.0] for lv in LEVELS}
    counts = {lv: 0 for lv in LEVELS}
    bs = agent.config.ddpg.batch_size
    for _ in range(n_updates):
        for lv, batch in sample_batches(buffers, bs, rng).items():
            c, a = train_step(agent.agents[lv], batch)
            losses[lv][0] += c
            losses[lv][1] += a
            counts[lv] += 1
    return {lv: (v[0] / counts[lv], v[1] / counts[lv]) for lv, v in losses.items() if counts[lv]}
