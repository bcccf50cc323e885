"""Single-DU O-RAN cell: topology, mobility, traffic queues, slice KPIs and the task distribution.

Each DU is simulated as a disc with its RU at the origin. Co-channel
interference comes from ``n_interferers`` neighbouring cells whose own UEs
occupy each RB with probability ``interferer_load``.
"""

from __future__ import annotations

import copy
import math
from dataclasses import dataclass, field, fields, replace
from enum import IntEnum
from typing import Sequence

import numpy as np

from .channel import ChannelParams, GlobalAllocation, interference_per_rb, rates_matrix, sample_fading
from .errors import ConfigError, DomainError


class SliceId(IntEnum):
    EMBB = 1
    MMTC = 2
    URLLC = 3


N_SLICES = len(SliceId)
HEADING_OFFSETS = (-math.pi / 3, -math.pi / 6, -math.pi / 12, 0.0, math.pi / 12, math.pi / 6, math.pi / 3)
SPEED_RANGE = (10.0, 20.0)
RATE_EPS = 1e-9


@dataclass(frozen=True)
class TaskSpec:
    """One DU scenario. ``traffic_profile`` is the mean offered load per UE of each slice (bits/s)."""

    task_id: int = 0
    reward_min: float = 5e5
    reward_max: float = 5e6
    ue_count: int = 30
    rb_count: int = 100
    slice_mix: tuple = (0.4, 0.4, 0.2)
    traffic_profile: tuple = (2.0e6, 2.0e5, 5.0e5)
    seed: int = 0
    cell_radius_m: float = 250.0
    frame_s: float = 0.1
    tau_max_s: float = 1.0
    n_interferers: int = 2
    interferer_load: float = 0.5
    deterministic_channel: bool = False
    mobility: bool = True
    channel: ChannelParams = field(default_factory=ChannelParams)

    def __post_init__(self):
        object.__setattr__(self, "slice_mix", tuple(float(x) for x in self.slice_mix))
        object.__setattr__(self, "traffic_profile", tuple(float(x) for x in self.traffic_profile))
        if not self.reward_min < self.reward_max:
            raise ConfigError("reward_min must be below reward_max")
        if self.ue_count < N_SLICES:
            raise ConfigError(f"ue_count must be at least {N_SLICES}")
        if self.rb_count < 0:
            raise ConfigError("rb_count must be non-negative")
        mix = np.asarray(self.slice_mix)
        if mix.shape != (N_SLICES,) or np.any(mix < 0) or abs(mix.sum() - 1.0) > 1e-9:
            raise ConfigError(f"slice_mix must be {N_SLICES} non-negative fractions summing to 1, got {self.slice_mix}")
        if len(self.traffic_profile) != N_SLICES or min(self.traffic_profile) < 0:
            raise ConfigError("traffic_profile needs one non-negative rate per slice")
        if self.cell_radius_m <= 0 or self.frame_s <= 0 or self.tau_max_s <= 0:
            raise ConfigError("cell_radius_m, frame_s and tau_max_s must be positive")
        if not 0.0 <= self.interferer_load <= 1.0:
            raise ConfigError("interferer_load must lie in [0, 1]")


@dataclass(frozen=True)
class UEState:
    position: tuple
    speed: float
    heading: float
    slice: SliceId
    demand_threshold: float
    backlog_bits: float
    last_rate: float
    last_latency: float


@dataclass
class EnvState:
    spec: TaskSpec
    positions: np.ndarray
    speed: np.ndarray
    heading: np.ndarray
    slice_of: np.ndarray  # 0-based slice index per UE, sorted ascending
    demand_threshold: np.ndarray
    backlog: np.ndarray
    last_rate: np.ndarray
    last_latency: np.ndarray
    b: np.ndarray
    e: np.ndarray
    nb_distance: np.ndarray  # (n_interferers, ue_count) UE-to-own-RU distances in neighbour cells
    nb_occupancy: np.ndarray | None  # frozen neighbour RB usage when the channel is deterministic
    rng: np.random.Generator
    t: int = 0
    kpis: np.ndarray = field(default_factory=lambda: np.zeros(N_SLICES))

    @property
    def ue_per_slice(self) -> np.ndarray:
        return np.bincount(self.slice_of, minlength=N_SLICES)

    @property
    def distances(self) -> np.ndarray:
        return np.maximum(np.hypot(self.positions[:, 0], self.positions[:, 1]), self.spec.channel.min_distance_m)

    def slice_members(self, slice_idx: int) -> np.ndarray:
        return np.flatnonzero(self.slice_of == slice_idx)

    def ue(self, i: int) -> UEState:
        return UEState(
            position=tuple(self.positions[i]),
            speed=float(self.speed[i]),
            heading=float(self.heading[i]),
            slice=SliceId(int(self.slice_of[i]) + 1),
            demand_threshold=float(self.demand_threshold[i]),
            backlog_bits=float(self.backlog[i]),
            last_rate=float(self.last_rate[i]),
            last_latency=float(self.last_latency[i]),
        )

    @property
    def ues(self) -> list[UEState]:
        return [self.ue(i) for i in range(len(self.speed))]

    def copy(self) -> "EnvState":
        return copy.deepcopy(self)


def largest_remainder(fractions: np.ndarray, total: int) -> np.ndarray:
    """Integer apportionment of ``total`` by ``fractions``; ties go to the lowest index."""
    fractions = np.asarray(fractions, dtype=float)
    if total <= 0 or fractions.size == 0:
        return np.zeros(fractions.size, dtype=int)
    quotas = fractions * total
    counts = np.floor(quotas).astype(int)
    short = total - counts.sum()
    if short > 0:
        rem = quotas - counts
        # stable sort on -rem keeps index order among equal remainders
        order = np.argsort(-rem, kind="stable")
        counts[order[:short]] += 1
    return counts


def uniform_in_disc(rng: np.random.Generator, n: int, radius: float) -> np.ndarray:
    r = radius * np.sqrt(rng.random(n))
    phi = rng.uniform(0.0, 2 * math.pi, n)
    return np.column_stack([r * np.cos(phi), r * np.sin(phi)])


def build_env(spec: TaskSpec, episode: int = 0) -> EnvState:
    """Fresh cell for ``spec``. Topology depends only on ``spec.seed``; per-episode dynamics on ``episode`` too."""
    topo = np.random.default_rng([spec.seed, 0])
    n, k = spec.ue_count, spec.rb_count
    counts = largest_remainder(np.asarray(spec.slice_mix), n)
    slice_of = np.repeat(np.arange(N_SLICES), counts)
    positions = uniform_in_disc(topo, n, spec.cell_radius_m)
    speed = topo.uniform(*SPEED_RANGE, n)
    heading = topo.uniform(0.0, 2 * math.pi, n)
    mean_demand = np.asarray(spec.traffic_profile)[slice_of]
    threshold = np.maximum(mean_demand * topo.uniform(0.5, 1.5, n), 1.0)
    nb_distance = np.hypot(*uniform_in_disc(topo, spec.n_interferers * n, spec.cell_radius_m).T)
    nb_distance = nb_distance.reshape(spec.n_interferers, n)
    nb_occupancy = None
    if spec.deterministic_channel:
        nb_occupancy = _draw_occupancy(topo, spec)
    return EnvState(
        spec=spec,
        positions=positions,
        speed=speed,
        heading=heading,
        slice_of=slice_of,
        demand_threshold=threshold,
        backlog=np.zeros(n),
        last_rate=np.zeros(n),
        last_latency=np.zeros(n),
        b=np.zeros((N_SLICES, k)),
        e=np.zeros((n, k)),
        nb_distance=nb_distance,
        nb_occupancy=nb_occupancy,
        rng=np.random.default_rng([spec.seed, episode, 1]),
    )


def _draw_occupancy(rng: np.random.Generator, spec: TaskSpec) -> np.ndarray:
    """(n_interferers, ue_count, rb_count) one-hot RB usage of neighbour cells."""
    n, k = spec.ue_count, spec.rb_count
    occ = np.zeros((spec.n_interferers, n, k))
    for c in range(spec.n_interferers):
        busy = rng.random(k) < spec.interferer_load
        owner = rng.integers(0, n, k)
        occ[c, owner[busy], np.flatnonzero(busy)] = 1.0
    return occ


def move_ues(state: EnvState, dt: float, rng: np.random.Generator | None = None) -> EnvState:
    """Advance every UE by ``speed * dt`` after a random heading turn; reflect at the disc edge."""
    new = state.copy()
    if dt == 0:
        return new
    if dt < 0:
        raise DomainError("dt must be non-negative")
    rng = new.rng if rng is None else rng
    n = len(new.speed)
    new.heading = new.heading + np.asarray(HEADING_OFFSETS)[rng.integers(0, len(HEADING_OFFSETS), n)]
    step = (new.speed * dt)[:, None] * np.column_stack([np.cos(new.heading), np.sin(new.heading)])
    pos = new.positions + step
    radius = new.spec.cell_radius_m
    r = np.hypot(pos[:, 0], pos[:, 1])
    out = r > radius
    if np.any(out):
        normal = pos[out] / r[out, None]
        # mirror radially back inside and reflect the heading about the boundary normal
        new_r = np.clip(2 * radius - r[out], 0.0, radius)
        pos[out] = normal * new_r[:, None]
        v = np.column_stack([np.cos(new.heading[out]), np.sin(new.heading[out])])
        v = v - 2 * np.sum(v * normal, axis=1, keepdims=True) * normal
        new.heading[out] = np.arctan2(v[:, 1], v[:, 0])
    new.positions = pos
    return new


def qos_embb(rates: Sequence[float]) -> float:
    """Mean user throughput of the slice."""
    rates = np.asarray(rates, dtype=float)
    if rates.size == 0:
        raise DomainError("qos_embb needs at least one UE")
    return float(rates.mean())


def qos_mmtc(rates: Sequence[float], thresholds: Sequence[float], inclusive: bool = False) -> float:
    """Quality-weighted capacity: fraction of UEs above their threshold times the summed rate."""
    rates = np.asarray(rates, dtype=float)
    thresholds = np.asarray(thresholds, dtype=float)
    if rates.shape != thresholds.shape:
        raise DomainError(f"length mismatch {rates.shape} vs {thresholds.shape}")
    if rates.size == 0:
        raise DomainError("qos_mmtc needs at least one UE")
    ok = rates >= thresholds if inclusive else rates > thresholds
    return float(ok.mean() * rates.sum())


def qos_urllc(latencies: Sequence[float]) -> float:
    """Worst user latency of the slice."""
    latencies = np.asarray(latencies, dtype=float)
    if latencies.size == 0:
        raise DomainError("qos_urllc needs at least one UE")
    return float(latencies.max())


def ue_latency(backlog_bits: float, rate: float, tau_max: float = 1.0) -> float:
    """Queueing delay to drain ``backlog_bits`` at ``rate``, capped at ``tau_max``."""
    if rate < 0:
        raise DomainError("rate must be non-negative")
    if backlog_bits <= 0:
        return 0.0
    return float(min(backlog_bits / max(rate, RATE_EPS), tau_max))


def drain_backlog(backlog_bits, arrivals_bits, rate, dt):
    return np.maximum(0.0, np.asarray(backlog_bits) + np.asarray(arrivals_bits) - np.asarray(rate) * dt)


def slice_kpis(state: EnvState, rates: np.ndarray, latencies: np.ndarray) -> np.ndarray:
    """Raw (mean rate, quality-weighted capacity, max latency); empty slices score 0."""
    kp = np.zeros(N_SLICES)
    groups = [state.slice_members(s) for s in range(N_SLICES)]
    if groups[0].size:
        kp[0] = qos_embb(rates[groups[0]])
    if groups[1].size:
        kp[1] = qos_mmtc(rates[groups[1]], state.demand_threshold[groups[1]])
    if groups[2].size:
        kp[2] = qos_urllc(latencies[groups[2]])
    return kp


def project_allocation(b, e, slice_of: np.ndarray):
    """Binarise and repair (b, e): one slice per RB column, one UE per RB, e within its slice's mask."""
    b = (np.asarray(b, dtype=float) > 0.5).astype(float)
    e = (np.asarray(e, dtype=float) > 0.5).astype(float)
    b = b * (np.cumsum(b, axis=0) == 1)
    e = e * b[slice_of]
    e = e * (np.cumsum(e, axis=0) == 1)
    return b, e


def draw_channel(state: EnvState, rng: np.random.Generator):
    """Fading for the cell's UEs and per-RB interference from the neighbour cells."""
    spec = state.spec
    n, k = spec.ue_count, spec.rb_count
    params = spec.channel
    if spec.deterministic_channel:
        fading = np.ones((n, k))
        occupancy = state.nb_occupancy
        nb_fading = np.ones((spec.n_interferers, n, k))
    else:
        fading = sample_fading(rng, (n, k))
        occupancy = _draw_occupancy(rng, spec)
        nb_fading = sample_fading(rng, (spec.n_interferers, n, k))
    if spec.n_interferers == 0:
        return fading, np.zeros(k)
    alloc = GlobalAllocation()
    alloc.add_du(np.zeros((n, k)), params.tx_power_w, state.distances, fading)
    for c in range(spec.n_interferers):
        alloc.add_du(occupancy[c], params.tx_power_w, state.nb_distance[c], nb_fading[c])
    return fading, interference_per_rb(0, alloc, params)


def env_step(state: EnvState, b, e):
    """One time frame. Returns ``(next_state, kpis, rates)``; ``state`` is left untouched."""
    spec = state.spec
    n, k = spec.ue_count, spec.rb_count
    b = np.asarray(b, dtype=float)
    e = np.asarray(e, dtype=float)
    if b.shape != (N_SLICES, k) or e.shape != (n, k):
        raise DomainError(f"expected b {(N_SLICES, k)} and e {(n, k)}, got {b.shape} and {e.shape}")
    new = state.copy()
    rng = new.rng
    b, e = project_allocation(b, e, new.slice_of)
    fading, interf = draw_channel(new, rng)
    rates = rates_matrix(e, b[new.slice_of], new.distances, fading, interf, spec.channel)
    offered = np.asarray(spec.traffic_profile)[new.slice_of] * spec.frame_s
    arrivals = rng.poisson(offered).astype(float)
    queue = new.backlog + arrivals
    latencies = np.where(queue > 0, np.minimum(queue / np.maximum(rates, RATE_EPS), spec.tau_max_s), 0.0)
    new.backlog = drain_backlog(new.backlog, arrivals, rates, spec.frame_s)
    new.last_rate = rates
    new.last_latency = latencies
    new.b, new.e = b, e
    new.kpis = slice_kpis(new, rates, latencies)
    if spec.mobility:
        moved = move_ues(new, spec.frame_s, rng)
        new.positions, new.heading = moved.positions, moved.heading
    new.t += 1
    return new, new.kpis.copy(), rates


@dataclass(frozen=True)
class TaskRanges:
    """Sampling ranges for heterogeneous DUs. ``None`` keeps the base value."""

    reward_min: tuple | None = (2.0e5, 8.0e5)
    reward_max: tuple | None = (3.0e6, 8.0e6)
    mix_jitter: float = 0.5
    traffic_scale: tuple | None = (0.5, 2.0)
    interferer_load: tuple | None = (0.2, 0.8)

    @classmethod
    def degenerate(cls) -> "TaskRanges":
        return cls(reward_min=None, reward_max=None, mix_jitter=0.0, traffic_scale=None, interferer_load=None)


def _draw(rng, rng_range, base):
    if rng_range is None:
        return base
    lo, hi = rng_range
    return float(rng.uniform(lo, hi)) if hi > lo else float(lo)


def sample_tasks(n: int, base: TaskSpec, rng: np.random.Generator, ranges: TaskRanges | None = None) -> list[TaskSpec]:
    """``n`` heterogeneous DU scenarios derived from ``base``; task ``i`` gets seed ``base.seed + i``."""
    if n < 1:
        raise DomainError("need at least one task")
    ranges = TaskRanges() if ranges is None else ranges
    tasks = []
    for i in range(n):
        for _ in range(1000):
            c_m = _draw(rng, ranges.reward_min, base.reward_min)
            c_x = _draw(rng, ranges.reward_max, base.reward_max)
            if c_m < c_x:
                break
        else:
            raise ConfigError("reward ranges never yield reward_min < reward_max")
        mix = np.asarray(base.slice_mix)
        if ranges.mix_jitter > 0:
            mix = mix * rng.uniform(1 - ranges.mix_jitter, 1 + ranges.mix_jitter, N_SLICES)
            mix = mix / mix.sum()
        if ranges.traffic_scale is None:
            traffic = base.traffic_profile
        else:
            traffic = tuple(np.asarray(base.traffic_profile) * rng.uniform(*ranges.traffic_scale, N_SLICES))
        tasks.append(
            replace(
                base,
                task_id=base.task_id + i,
                seed=base.seed + i,
                reward_min=c_m,
                reward_max=c_x,
                slice_mix=tuple(mix),
                traffic_profile=tuple(traffic),
                interferer_load=_draw(rng, ranges.interferer_load, base.interferer_load),
            )
        )
    return tasks


def task_from_dict(data: dict) -> TaskSpec:
    """Build a TaskSpec from a mapping; unknown keys raise ConfigError."""
    data = dict(data)
    known = {f.name for f in fields(TaskSpec)}
    unknown = set(data) - known
    if unknown:
        raise ConfigError(f"unknown scenario keys: {sorted(unknown)}")
    if "channel" in data:
        ch = dict(data["channel"] or {})
        ch_known = {f.name for f in fields(ChannelParams)}
        if set(ch) - ch_known:
            raise ConfigError(f"unknown channel keys: {sorted(set(ch) - ch_known)}")
        try:
            data["channel"] = ChannelParams(**ch)
        except (TypeError, ValueError) as exc:
            raise ConfigError(str(exc)) from exc
    try:
        return TaskSpec(**data)
    except TypeError as exc:
        raise ConfigError(str(exc)) from exc


def task_to_dict(spec: TaskSpec) -> dict:
    out = {}
    for f in fields(TaskSpec):
        v = getattr(spec, f.name)
        if f.name == "channel":
            v = {cf.name: getattr(v, cf.name) for cf in fields(ChannelParams)}
        elif isinstance(v, tuple):
            v = [float(x) for x in v]
        out[f.name] = v
    return out
