"""Evaluation statistics and CSV emission."""

from __future__ import annotations

import csv
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from .errors import DomainError


def cumulative_reward(rewards: Sequence[float], gamma: float = 0.99) -> float:
    r = np.asarray(rewards, dtype=float)
    return float(np.sum(r * gamma ** np.arange(r.size)))


def empirical_cdf(samples: Sequence[float]) -> list[tuple[float, float]]:
    """Right-continuous step CDF as (distinct value, fraction <= value) pairs."""
    x = np.asarray(samples, dtype=float).ravel()
    if x.size == 0:
        raise DomainError("empirical_cdf needs at least one sample")
    values, counts = np.unique(x, return_counts=True)
    frac = np.cumsum(counts) / x.size
    frac[-1] = 1.0
    return [(float(v), float(f)) for v, f in zip(values, frac)]


def jain_index(throughputs: Sequence[float]) -> float:
    x = np.asarray(throughputs, dtype=float).ravel()
    if x.size == 0:
        raise DomainError("jain_index needs at least one value")
    if np.any(x < 0):
        raise DomainError("throughputs must be non-negative")
    sq = np.sum(x * x)
    if sq == 0:
        raise DomainError("jain_index undefined when every throughput is zero")
    return float(x.sum() ** 2 / (x.size * sq))


def moving_average(trace: Sequence[float], window: int = 3) -> np.ndarray:
    """Trailing mean over up to ``window`` most recent entries."""
    t = np.asarray(trace, dtype=float)
    c = np.concatenate([[0.0], np.cumsum(t)])
    idx = np.arange(1, t.size + 1)
    lo = np.maximum(idx - window, 0)
    return (c[idx] - c[lo]) / (idx - lo)


def shots_to_converge(trace: Sequence[float], threshold: float = 0.95, patience: int = 3, window: int = 3) -> int:
    """First (1-based) shot whose trailing average stays within ``threshold`` of the trace maximum for ``patience`` shots.

    Returns ``len(trace)`` when no such run exists. For a negative maximum
    the band is ``max - (1 - threshold) * |max|``.
    """
    t = np.asarray(trace, dtype=float)
    if t.size == 0:
        raise DomainError("empty reward trace")
    best = t.max()
    target = best - (1.0 - threshold) * abs(best)
    ok = moving_average(t, window) >= target - 1e-12
    for i in range(t.size - patience + 1):
        if ok[i : i + patience].all():
            return i + 1
    return int(t.size)


def summarize(values: Sequence[float]) -> dict:
    x = np.asarray(values, dtype=float).ravel()
    return {
        "mean": float(x.mean()),
        "median": float(np.median(x)),
        "p5": float(np.percentile(x, 5)),
        "p95": float(np.percentile(x, 95)),
        "min": float(x.min()),
        "max": float(x.max()),
    }


def fmt(v) -> str:
    """Stable text form used in every emitted CSV (repr round-trips floats exactly)."""
    if isinstance(v, (float, np.floating)):
        return repr(float(v))
    if isinstance(v, (np.integer,)):
        return str(int(v))
    return str(v)


def write_csv(path, header: Sequence[str], rows: Iterable[Sequence]) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        for row in rows:
            w.writerow([fmt(v) for v in row])
    return path


def write_cdf_csv(path, samples: Sequence[float]) -> Path:
    return write_csv(path, ["value", "fraction"], empirical_cdf(samples))
