"""First-order MAML over hierarchical DDPG agents with TD-variance Softmin task weighting.

One meta iteration, for every task ``g``:

1. clone the meta parameters into a task learner;
2. roll out ``eval_episodes`` exploratory episodes, the first part feeding
   the support buffers and the rest the query buffers;
3. adapt on support mini-batches (DDPG critic + actor steps);
4. take DDPG loss gradients on a query mini-batch at the adapted
   parameters (first-order meta-gradient) and record the query TD errors.

The per-task gradients are then combined with weights ``w_g`` and applied to
the meta parameters with Adam. ``w_g`` is uniform, a Softmin of the current
TD-error variances ("adaptive"), or a Softmin frozen after a burn-in
("static").
"""

from __future__ import annotations

import math
import os
from collections import deque
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field, replace

import numpy as np

from .ddpg import ReplayBuffer, actor_loss_and_grad, critic_loss_and_grad, td_errors
from .env import TaskSpec
from .errors import ConfigError, DomainError
from .hrl import LEVELS, HRLAgent, HRLConfig, run_episode, train_hrl
from .metrics import cumulative_reward
from .nn import AdamState, Gradients, adam_step

WEIGHTINGS = ("adaptive", "uniform", "static")
BASELINES = ("scratch", "transfer", "multitask", "uniform_meta", "static_var", "adaptive_var")
MAX_WORKERS_ENV = "METAHRL_MAX_WORKERS"


@dataclass
class MetaConfig:
    hrl: HRLConfig = field(default_factory=HRLConfig)
    iterations: int = 100
    eval_episodes: int = 10
    episode_len: int = 20
    support_fraction: float = 0.5
    inner_steps: int = 10
    meta_lr: float = 1e-4
    meta_critic_lr: float | None = None  # None: same as meta_lr
    meta_lr_decay: float = 0.0
    weighting: str = "adaptive"
    td_window: int = 512
    static_burn_in: float = 0.2
    persist_buffers: bool = True
    buffer_capacity: int = 20_000
    adapt_updates: int = 10
    eval_rollouts: int = 3
    workers: int = 1
    eval_gamma: float = 0.99

    def __post_init__(self):
        if isinstance(self.hrl, dict):
            self.hrl = HRLConfig(**self.hrl)
        if self.weighting not in WEIGHTINGS:
            raise ConfigError(f"weighting must be one of {WEIGHTINGS}")
        if self.iterations < 0 or self.eval_episodes < 2 or self.episode_len < 1:
            raise ConfigError("iterations >= 0, eval_episodes >= 2 and episode_len >= 1 required")
        if not 0.0 < self.support_fraction < 1.0:
            raise ConfigError("support_fraction must lie in (0, 1)")
        if self.td_window < 2:
            raise ConfigError("td_window must be >= 2")

    @property
    def gamma(self) -> float:
        return self.hrl.ddpg.gamma

    def meta_lr_at(self, iteration: int, network: str = "actor") -> float:
        """Meta step size for an actor or critic; a positive decay makes it vanish relative to the fixed inner rate."""
        base = self.meta_lr
        if network.endswith("critic") and self.meta_critic_lr is not None:
            base = self.meta_critic_lr
        return base / (1.0 + self.meta_lr_decay * iteration)


@dataclass
class MetaModel:
    params: dict
    opt: dict

    @classmethod
    def create(cls, ue_count: int, rng: np.random.Generator, config: MetaConfig) -> "MetaModel":
        params = HRLAgent.create(ue_count, rng, config.hrl).params()
        return cls.from_params(params, config.meta_lr)

    @classmethod
    def from_params(cls, params: dict, lr: float) -> "MetaModel":
        return cls({k: p.copy() for k, p in params.items()}, {k: AdamState.for_params(p, lr) for k, p in params.items()})

    @property
    def ue_count(self) -> int:
        return self.params["lower_embb.actor"].n_out

    def copy(self) -> "MetaModel":
        return MetaModel({k: p.copy() for k, p in self.params.items()}, {k: s.copy() for k, s in self.opt.items()})


def new_buffers(agent: HRLAgent, capacity: int) -> dict:
    return {lv: ReplayBuffer(a.obs_dim, a.act_dim, capacity) for lv, a in agent.agents.items()}


@dataclass
class TaskMemory:
    """State a task keeps between meta iterations: replay data and slowly moving target networks."""

    support: dict
    query: dict
    targets: dict | None = None  # level -> (actor_target, critic_target)


@dataclass
class TaskLearner:
    task: TaskSpec
    agent: HRLAgent
    support: dict
    query: dict
    episode_rewards: list = field(default_factory=list)

    @property
    def task_id(self) -> int:
        return self.task.task_id


def support_loss(learner: TaskLearner) -> float:
    """Summed critic loss over the whole support set of every level."""
    total = 0.0
    for lv, buf in learner.support.items():
        if len(buf):
            total += critic_loss_and_grad(learner.agent.agents[lv], buf.all())[0]
    return total


def collect(learner: TaskLearner, config: MetaConfig, rng: np.random.Generator, episode_base: int) -> None:
    """Roll out ``eval_episodes`` episodes; the leading share goes to support, the rest to query."""
    n_support = max(1, min(config.eval_episodes - 1, round(config.support_fraction * config.eval_episodes)))
    for e in range(config.eval_episodes):
        dest = learner.support if e < n_support else learner.query
        tr = run_episode(learner.agent, learner.task, episode_base + e, config.episode_len, rng, True, dest)
        learner.episode_rewards.append(float(tr.rewards.mean()))


def inner_adapt(
    meta_params: dict,
    task: TaskSpec,
    steps: int,
    config: MetaConfig,
    rng: np.random.Generator,
    memory: TaskMemory | None = None,
    episode_base: int = 0,
    noise_progress: float = 0.0,
) -> TaskLearner:
    """Clone the meta parameters, gather support/query data on ``task`` and take ``steps`` support updates.

    ``memory`` carries a task's buffers and target networks over from the
    previous meta iteration; without it both start fresh (targets = clone).
    """
    agent = HRLAgent.from_params(meta_params, config.hrl, task.ue_count)
    agent.set_noise_progress(noise_progress)
    if memory is None:
        memory = TaskMemory(new_buffers(agent, config.buffer_capacity), new_buffers(agent, config.buffer_capacity))
    if memory.targets is not None:
        for lv, (at, ct) in memory.targets.items():
            agent.agents[lv].actor_target, agent.agents[lv].critic_target = at, ct
    learner = TaskLearner(task, agent, memory.support, memory.query)
    collect(learner, config, rng, episode_base)
    if steps > 0:
        train_hrl(agent, learner.support, steps, rng)
    return learner


@dataclass
class QueryResult:
    losses: dict  # level -> (critic loss, actor loss)
    grads: dict  # network name -> Gradients
    td: np.ndarray


def query_grads(learner: TaskLearner, rng: np.random.Generator, reward_scale: float = 1.0) -> QueryResult:
    """DDPG loss gradients on one query mini-batch per level, taken at the adapted parameters."""
    if not any(len(b) for b in learner.query.values()):
        raise DomainError(f"task {learner.task_id} has an empty query set")
    bs = learner.agent.config.ddpg.batch_size
    losses, grads, tds = {}, {}, []
    for lv in LEVELS:
        ag = learner.agent.agents[lv]
        buf = learner.query[lv]
        if not len(buf):
            grads[f"{lv}.critic"] = Gradients.zeros_like(ag.critic)
            grads[f"{lv}.actor"] = Gradients.zeros_like(ag.actor)
            continue
        batch = buf.sample(bs, rng)
        if reward_scale != 1.0:
            batch = batch.scaled_rewards(reward_scale)
        cl, cg = critic_loss_and_grad(ag, batch)
        al, agr = actor_loss_and_grad(ag, batch)
        grads[f"{lv}.critic"], grads[f"{lv}.actor"] = cg, agr
        losses[lv] = (cl, al)
        tds.append(td_errors(ag, batch))
    return QueryResult(losses, grads, np.concatenate(tds))


def td_variance(window) -> float:
    """Unbiased sample variance of a TD-error window."""
    x = np.asarray(list(window), dtype=float)
    if x.size < 2:
        raise DomainError("need at least two TD errors")
    return float(np.var(x, ddof=1))


def softmin_weights(variances) -> np.ndarray:
    v = np.asarray(variances, dtype=float)
    if v.size == 0 or not np.all(np.isfinite(v)):
        raise DomainError("variances must be finite and non-empty")
    z = np.exp(-(v - v.min()))
    return z / z.sum()


def uniform_weights(n: int) -> np.ndarray:
    return np.full(n, 1.0 / n)


@dataclass
class WeightState:
    """TD-error windows per task and the resulting variances and weights."""

    window: int = 512
    windows: dict = field(default_factory=dict)
    variances: np.ndarray | None = None
    weights: np.ndarray | None = None

    def push(self, task_id: int, deltas) -> None:
        self.windows.setdefault(task_id, deque(maxlen=self.window)).extend(np.asarray(deltas, dtype=float).ravel())

    def compute(self, task_ids) -> np.ndarray:
        self.variances = np.array([td_variance(self.windows[g]) for g in task_ids])
        self.weights = softmin_weights(self.variances)
        return self.weights


def meta_update(meta: MetaModel, contributions: list, weights, lr) -> MetaModel:
    """Adam step on sum_g w_g * grad_g for every network; returns a new MetaModel.

    ``lr`` is a float or a callable mapping a network name to its step size.
    """
    weights = np.asarray(weights, dtype=float)
    if len(contributions) != weights.size:
        raise DomainError("one weight per contribution required")
    if abs(weights.sum() - 1.0) > 1e-9:
        raise DomainError("weights must sum to 1")
    new = MetaModel(dict(meta.params), dict(meta.opt))
    for name, params in meta.params.items():
        agg = None
        for w, contrib in zip(weights, contributions):
            g = contrib[name]
            if len(g.weights) != len(params.weights) or any(a.shape != b.shape for a, b in zip(g.weights, params.weights)):
                raise DomainError(f"gradient for {name} does not match the meta network")
            g = g.scaled(w)
            agg = g if agg is None else agg + g
        step = lr(name) if callable(lr) else lr
        new.params[name], new.opt[name] = adam_step(params, agg, meta.opt[name], step)
    return new


@dataclass
class MetaLog:
    rows: list = field(default_factory=list)

    HEADER = (
        "iteration",
        "task_id",
        "critic_loss_higher",
        "actor_loss_higher",
        "critic_loss_lower",
        "actor_loss_lower",
        "reward",
        "td_var",
        "weight",
    )

    def add(self, **row) -> None:
        self.rows.append(row)

    def table(self) -> list[tuple]:
        return [tuple(r[h] for h in self.HEADER) for r in self.rows]

    def weights_at(self, iteration: int) -> np.ndarray:
        return np.array([r["weight"] for r in self.rows if r["iteration"] == iteration])

    def mean_reward_per_iteration(self) -> np.ndarray:
        its = sorted({r["iteration"] for r in self.rows})
        return np.array([np.mean([r["reward"] for r in self.rows if r["iteration"] == t]) for t in its])


def _task_rng(seed: int, iteration: int, g: int) -> np.random.Generator:
    return np.random.default_rng([seed, 1, iteration, g])


def _task_round(args):
    """One task's inner loop and query evaluation; picklable for worker processes."""
    meta_params, task, g, t, config, seed, memory = args
    rng = _task_rng(seed, t, g)
    learner = inner_adapt(
        meta_params, task, config.inner_steps, config, rng, memory, episode_base=t * config.eval_episodes,
        noise_progress=t / max(1, config.iterations),
    )
    q = query_grads(learner, rng)
    targets = {lv: (a.actor_target, a.critic_target) for lv, a in learner.agent.agents.items()}
    return TaskMemory(learner.support, learner.query, targets), q, float(np.mean(learner.episode_rewards))


def worker_count(requested: int) -> int:
    cap = os.environ.get(MAX_WORKERS_ENV)
    n = max(1, int(requested))
    if cap:
        n = min(n, max(1, int(cap)))
    return n


def meta_train(
    tasks: list,
    config: MetaConfig,
    seed: int = 0,
    meta: MetaModel | None = None,
    on_iteration=None,
) -> tuple[MetaModel, MetaLog]:
    """Meta-train over ``tasks`` for ``config.iterations`` iterations."""
    if not tasks:
        raise DomainError("need at least one task")
    ue = {t.ue_count for t in tasks}
    if len(ue) != 1:
        raise ConfigError("all tasks must share ue_count so networks have one shape")
    ue_count = ue.pop()
    if meta is None:
        meta = MetaModel.create(ue_count, np.random.default_rng([seed, 0]), config)
    n = len(tasks)
    ws = WeightState(config.td_window)
    log = MetaLog()
    memories = [None] * n
    static_w = None
    burn_in = max(1, math.ceil(config.static_burn_in * config.iterations))
    var_hist = []
    n_workers = worker_count(config.workers)
    pool = ProcessPoolExecutor(n_workers) if n_workers > 1 else None
    try:
        for t in range(config.iterations):
            jobs = [(meta.params, task, g, t, config, seed, memories[g]) for g, task in enumerate(tasks)]
            results = list(pool.map(_task_round, jobs)) if pool else [_task_round(j) for j in jobs]
            contributions = []
            rewards = []
            for g, (mem, q, rew) in enumerate(results):
                if config.persist_buffers:
                    memories[g] = mem
                ws.push(tasks[g].task_id, q.td)
                contributions.append(q.grads)
                rewards.append((q, rew))
            variances = np.array([td_variance(ws.windows[task.task_id]) for task in tasks])
            var_hist.append(variances)
            if config.weighting == "adaptive":
                weights = softmin_weights(variances)
            elif config.weighting == "uniform":
                weights = uniform_weights(n)
            else:
                if t < burn_in:
                    weights = uniform_weights(n)
                else:
                    if static_w is None:
                        static_w = softmin_weights(np.mean(var_hist[:burn_in], axis=0))
                    weights = static_w
            meta = meta_update(meta, contributions, weights, lambda name, t=t: config.meta_lr_at(t, name))
            for g, (q, rew) in enumerate(rewards):
                lower = [q.losses[lv] for lv in LEVELS[1:] if lv in q.losses]
                log.add(
                    iteration=t,
                    task_id=tasks[g].task_id,
                    critic_loss_higher=q.losses.get("higher", (np.nan, np.nan))[0],
                    actor_loss_higher=q.losses.get("higher", (np.nan, np.nan))[1],
                    critic_loss_lower=float(np.mean([c for c, _ in lower])) if lower else np.nan,
                    actor_loss_lower=float(np.mean([a for _, a in lower])) if lower else np.nan,
                    reward=rew,
                    td_var=float(variances[g]),
                    weight=float(weights[g]),
                )
            if on_iteration is not None:
                on_iteration(t, meta, log)
    finally:
        if pool:
            pool.shutdown()
    return meta, log


@dataclass
class AdaptResult:
    agent: HRLAgent
    trace: list  # discounted return of a greedy evaluation after each shot
    final_reward: float  # mean discounted return of greedy evaluation after all shots
    final_episodes: list  # EpisodeTrace of those evaluations


def evaluate(agent: HRLAgent, task: TaskSpec, config: MetaConfig, rollouts: int, rng_seed: int = 0) -> tuple[float, list]:
    """Greedy rollouts on fixed evaluation episodes so every method sees the same channel draws."""
    eps = []
    for i in range(rollouts):
        rng = np.random.default_rng([rng_seed, 3, i])
        eps.append(run_episode(agent, task, 100_000 + i, config.episode_len, rng, explore=False))
    return float(np.mean([cumulative_reward(ep.rewards, config.eval_gamma) for ep in eps])), eps


def adapt_agent(
    agent: HRLAgent,
    task: TaskSpec,
    shots: int,
    config: MetaConfig,
    seed: int = 0,
    extra_task: TaskSpec | None = None,
) -> AdaptResult:
    """Few-shot adaptation of ``agent`` (modified in place) on ``task``.

    Each shot rolls out one exploratory episode into the support buffers,
    takes ``adapt_updates`` DDPG steps, and records a greedy evaluation.
    With ``extra_task`` each shot also rolls out one episode of that task
    into the same buffers (multi-task interleaving).
    """
    rng = np.random.default_rng([seed, 2, task.seed])
    support = new_buffers(agent, config.buffer_capacity)
    agent.set_noise_progress(0.5)
    trace = []
    for shot in range(shots):
        run_episode(agent, task, 50_000 + shot, config.episode_len, rng, True, support)
        if extra_task is not None:
            run_episode(agent, extra_task, 60_000 + shot, config.episode_len, rng, True, support)
        train_hrl(agent, support, config.adapt_updates, rng)
        trace.append(evaluate(agent, task, config, config.eval_rollouts, seed)[0])
    final, eps = evaluate(agent, task, config, config.eval_rollouts, seed)
    return AdaptResult(agent, trace, final, eps)


def meta_adapt(meta: MetaModel | dict, new_task: TaskSpec, shots: int, config: MetaConfig, seed: int = 0) -> AdaptResult:
    """Initialise a learner from the meta parameters and adapt it; the meta model is not modified."""
    params = meta.params if isinstance(meta, MetaModel) else meta
    agent = HRLAgent.from_params({k: p.copy() for k, p in params.items()}, config.hrl, new_task.ue_count)
    return adapt_agent(agent, new_task, shots, config, seed)


def pretrain_single(task: TaskSpec, config: MetaConfig, seed: int, iterations: int | None = None) -> HRLAgent:
    """Plain HRL training on one task with the per-task budget of meta-training."""
    iterations = config.iterations if iterations is None else iterations
    rng = np.random.default_rng([seed, 4, task.seed])
    agent = HRLAgent.create(task.ue_count, np.random.default_rng([seed, 0]), config.hrl)
    for t in range(iterations):
        agent.set_noise_progress(t / max(1, iterations))
        for e in range(config.eval_episodes):
            run_episode(agent, task, t * config.eval_episodes + e, config.episode_len, rng, True, agent.buffers)
        train_hrl(agent, agent.buffers, config.inner_steps, rng)
    return agent


@dataclass
class BaselineResult:
    kind: str
    adapt: AdaptResult
    meta_log: MetaLog | None = None
    meta: MetaModel | None = None
    extra: dict = field(default_factory=dict)


def run_baseline(
    kind: str,
    tasks: list,
    new_task: TaskSpec,
    config: MetaConfig,
    shots: int,
    seed: int = 0,
) -> BaselineResult:
    """Train with one of the comparison schemes on ``tasks`` and adapt to ``new_task`` for ``shots`` shots."""
    if kind not in BASELINES:
        raise ConfigError(f"unknown baseline {kind!r}; expected one of {BASELINES}")
    if kind == "scratch":
        agent = HRLAgent.create(new_task.ue_count, np.random.default_rng([seed, 0]), config.hrl)
        return BaselineResult(kind, adapt_agent(agent, new_task, shots, config, seed))
    if kind == "transfer":
        agent = pretrain_single(tasks[0], config, seed)
        agent.buffers = new_buffers(agent, config.buffer_capacity)
        return BaselineResult(kind, adapt_agent(agent, new_task, shots, config, seed), extra={"source_task": tasks[0].task_id})
    if kind == "multitask":
        pick = int(np.random.default_rng([seed, 5]).integers(len(tasks)))
        agent = pretrain_single(tasks[pick], config, seed)
        res = adapt_agent(agent, new_task, shots, config, seed, extra_task=tasks[pick])
        return BaselineResult(kind, res, extra={"source_task": tasks[pick].task_id})
    weighting = {"uniform_meta": "uniform", "static_var": "static", "adaptive_var": "adaptive"}[kind]
    cfg = replace(config, weighting=weighting)
    meta, log = meta_train(tasks, cfg, seed)
    return BaselineResult(kind, meta_adapt(meta, new_task, shots, cfg, seed), meta_log=log, meta=meta)
