"""Experiment configuration loaded from YAML.

Schema (every key optional; unknown keys are rejected)::

    scenario:            # base TaskSpec fields (see metahrl.env.TaskSpec)
      ue_count: 8
      rb_count: 16
      channel: {tx_power_dbm: 56}
    ranges:              # task-distribution ranges (metahrl.env.TaskRanges)
      reward_min: [2.0e5, 8.0e5]
      reward_max: [3.0e6, 8.0e6]
      mix_jitter: 0.5
      traffic_scale: [0.5, 2.0]
      interferer_load: [0.2, 0.8]
    n_tasks: 7           # N_g training tasks; one extra held-out task is drawn per seed
    iterations: 100      # T meta iterations
    eval_episodes: 10    # T_e episodes per task and iteration
    t_new: null          # adaptation shots; null means 0.1 * T
    shots: [0, 5, 30]    # shot counts for the adapt report
    seeds: [0]
    out_dir: runs
    gamma: 0.99
    actor_lr: 1.0e-4
    critic_lr: 1.0e-4
    meta_lr: 1.0e-4
    meta_critic_lr: null # meta step for critics; null means meta_lr
    meta_lr_decay: 0.0
    hidden: [256, 512, 512]
    batch_size: 128
    buffer_capacity: 1000000
    tau: 0.005
    noise_start: 0.2
    noise_end: 0.02
    h_period: 1
    temperature: 3.0
    weighting: adaptive  # adaptive | uniform | static
    algorithm: adaptive_var   # baseline kind for the ``baseline`` subcommand
    episode_len: 20
    inner_steps: 10
    adapt_updates: 10
    support_fraction: 0.5
    td_window: 512
    static_burn_in: 0.2
    eval_rollouts: 3
    checkpoint_every: 0  # 0 disables periodic checkpoints
    workers: 1
    scale_points: [[7, 210], [15, 1500]]  # (N_DU, total UEs) rows of the scale sweep
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path

import numpy as np
import yaml

from .ddpg import DDPGConfig
from .env import TaskRanges, TaskSpec, sample_tasks, task_from_dict, task_to_dict
from .errors import ConfigError
from .hrl import HRLConfig
from .meta import BASELINES, WEIGHTINGS, MetaConfig

HELD_OUT_SEED_OFFSET = 10_000


@dataclass
class ExperimentConfig:
    scenario: dict = field(default_factory=dict)
    ranges: dict = field(default_factory=dict)
    n_tasks: int = 7
    iterations: int = 100
    eval_episodes: int = 10
    t_new: int | None = None
    shots: list = field(default_factory=lambda: [0, 5, 30])
    seeds: list = field(default_factory=lambda: [0])
    out_dir: str = "runs"
    gamma: float = 0.99
    actor_lr: float = 1e-4
    critic_lr: float = 1e-4
    meta_lr: float = 1e-4
    meta_critic_lr: float | None = None
    meta_lr_decay: float = 0.0
    hidden: list = field(default_factory=lambda: [256, 512, 512])
    batch_size: int = 128
    buffer_capacity: int = 10**6
    tau: float = 0.005
    noise_start: float = 0.2
    noise_end: float = 0.02
    h_period: int = 1
    temperature: float = 3.0
    weighting: str = "adaptive"
    algorithm: str = "adaptive_var"
    episode_len: int = 20
    inner_steps: int = 10
    adapt_updates: int = 10
    support_fraction: float = 0.5
    td_window: int = 512
    static_burn_in: float = 0.2
    eval_rollouts: int = 3
    checkpoint_every: int = 0
    workers: int = 1
    scale_points: list = field(default_factory=lambda: [[7, 210], [15, 1500]])

    def __post_init__(self):
        if self.n_tasks < 1:
            raise ConfigError("n_tasks must be >= 1")
        if not self.seeds:
            raise ConfigError("seeds must be non-empty")
        if self.weighting not in WEIGHTINGS:
            raise ConfigError(f"weighting must be one of {WEIGHTINGS}")
        if self.algorithm not in BASELINES:
            raise ConfigError(f"algorithm must be one of {BASELINES}")
        if any(int(s) < 0 for s in self.shots):
            raise ConfigError("shot counts must be non-negative")
        for pt in self.scale_points:
            if len(pt) != 2 or pt[0] < 1 or pt[1] < pt[0]:
                raise ConfigError(f"scale point {pt} must be [N_DU, N_UE] with N_UE >= N_DU >= 1")
        # validate nested sections eagerly so errors surface at load time
        self.base_task()
        self.task_ranges()
        self.meta_config()

    # -- derived objects -------------------------------------------------

    def base_task(self) -> TaskSpec:
        try:
            return task_from_dict(self.scenario)
        except ValueError as exc:
            raise ConfigError(str(exc)) from exc

    def task_ranges(self) -> TaskRanges:
        known = {f.name for f in fields(TaskRanges)}
        unknown = set(self.ranges) - known
        if unknown:
            raise ConfigError(f"unknown ranges keys: {sorted(unknown)}")
        data = {k: (tuple(v) if isinstance(v, list) else v) for k, v in self.ranges.items()}
        for k, v in data.items():
            if isinstance(v, tuple) and (len(v) != 2 or v[0] > v[1]):
                raise ConfigError(f"range {k} must be [lo, hi] with lo <= hi")
        return TaskRanges(**data)

    def meta_config(self) -> MetaConfig:
        try:
            ddpg = DDPGConfig(
                hidden=tuple(self.hidden),
                gamma=self.gamma,
                actor_lr=self.actor_lr,
                critic_lr=self.critic_lr,
                tau=self.tau,
                batch_size=self.batch_size,
                buffer_capacity=self.buffer_capacity,
                noise_start=self.noise_start,
                noise_end=self.noise_end,
            )
            return MetaConfig(
                hrl=HRLConfig(ddpg=ddpg, h_period=self.h_period, temperature=self.temperature),
                iterations=self.iterations,
                eval_episodes=self.eval_episodes,
                episode_len=self.episode_len,
                support_fraction=self.support_fraction,
                inner_steps=self.inner_steps,
                meta_lr=self.meta_lr,
                meta_critic_lr=self.meta_critic_lr,
                meta_lr_decay=self.meta_lr_decay,
                weighting=self.weighting,
                td_window=self.td_window,
                static_burn_in=self.static_burn_in,
                buffer_capacity=min(self.buffer_capacity, 100_000),
                adapt_updates=self.adapt_updates,
                eval_rollouts=self.eval_rollouts,
                workers=self.workers,
            )
        except ValueError as exc:
            raise ConfigError(str(exc)) from exc

    @property
    def adapt_shots(self) -> int:
        return max(1, round(0.1 * self.iterations)) if self.t_new is None else int(self.t_new)

    def tasks(self, seed: int, n_tasks: int | None = None, ue_count: int | None = None) -> tuple[list, TaskSpec]:
        """Training tasks plus one held-out task for ``seed``; all draws come from a seed-keyed stream."""
        n = self.n_tasks if n_tasks is None else n_tasks
        base = self.base_task()
        if ue_count is not None:
            base = replace(base, ue_count=ue_count)
        base = replace(base, seed=base.seed + 1000 * int(seed))
        drawn = sample_tasks(n + 1, base, np.random.default_rng([int(seed), 7]), self.task_ranges())
        held = replace(drawn[-1], seed=drawn[-1].seed + HELD_OUT_SEED_OFFSET)
        return drawn[:-1], held

    # -- (de)serialisation ----------------------------------------------

    def to_dict(self) -> dict:
        d = asdict(self)
        d["scenario"] = task_to_dict(self.base_task())
        return d

    def digest(self) -> str:
        blob = json.dumps(self.to_dict(), sort_keys=True, default=str).encode()
        return hashlib.sha256(blob).hexdigest()

    def with_overrides(self, **kw) -> "ExperimentConfig":
        return ExperimentConfig.from_dict({**asdict(self), **{k: v for k, v in kw.items() if v is not None}})

    @classmethod
    def from_dict(cls, data: dict | None) -> "ExperimentConfig":
        data = dict(data or {})
        known = {f.name for f in fields(cls)}
        unknown = set(data) - known
        if unknown:
            raise ConfigError(f"unknown config keys: {sorted(unknown)}")
        for key in ("scenario", "ranges"):
            if data.get(key) is None:
                data.pop(key, None)
            elif not isinstance(data[key], dict):
                raise ConfigError(f"{key} must be a mapping")
        try:
            return cls(**data)
        except TypeError as exc:
            raise ConfigError(str(exc)) from exc

    @classmethod
    def load(cls, path) -> "ExperimentConfig":
        try:
            text = Path(path).read_text()
        except OSError as exc:
            raise ConfigError(f"cannot read config {path}: {exc}") from exc
        try:
            data = yaml.safe_load(text)
        except yaml.YAMLError as exc:
            raise ConfigError(f"invalid YAML in {path}: {exc}") from exc
        if data is not None and not isinstance(data, dict):
            raise ConfigError("config root must be a mapping")
        return cls.from_dict(data)


def table1_defaults() -> dict:
    """Library defaults that mirror the reference simulation table; recorded in every manifest."""
    spec = TaskSpec()
    ddpg = DDPGConfig()
    return {
        "N_g": 7,
        "N_rho_per_DU": spec.ue_count,
        "K_rho": spec.rb_count,
        "T_e": 10,
        "T_new": "0.1 x T",
        "batch_size": ddpg.batch_size,
        "learning_rate": ddpg.actor_lr,
        "gamma": ddpg.gamma,
        "hidden_layers": list(ddpg.hidden),
        "rb_bandwidth_hz": spec.channel.rb_bandwidth_hz,
        "pathloss_exponent": spec.channel.pathloss_exponent,
        "noise_psd_dbm_hz": spec.channel.noise_psd_dbm_hz,
        "tx_power_dbm": spec.channel.tx_power_dbm,
        "ue_speed_mps": [10.0, 20.0],
    }
