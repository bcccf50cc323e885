"""Downlink link model: path loss, Rayleigh fading, inter-cell interference and per-UE rate.

Rates follow the Shannon form summed over the RBs a UE holds inside its slice's mask::

    C_u = sum_k B * e[u,k] * b[l,k] * log2(1 + p * d**-eta * |h|**2 / (I + sigma2))

with ``sigma2 = noise PSD * B`` in watts.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .errors import DomainError


def dbm_to_watts(dbm):
    return 10.0 ** ((np.asarray(dbm, dtype=float) - 30.0) / 10.0)


def watts_to_dbm(watts):
    return 10.0 * np.log10(np.asarray(watts, dtype=float)) + 30.0


@dataclass(frozen=True)
class ChannelParams:
    rb_bandwidth_hz: float = 200e3
    pathloss_exponent: float = 3.0
    noise_psd_dbm_hz: float = -173.0
    tx_power_dbm: float = 56.0
    min_distance_m: float = 1.0

    def __post_init__(self):
        if not self.rb_bandwidth_hz > 0:
            raise DomainError("rb_bandwidth_hz must be positive")
        if not self.pathloss_exponent >= 2:
            raise DomainError("pathloss_exponent must be >= 2")
        if not self.min_distance_m > 0:
            raise DomainError("min_distance_m must be positive")

    @property
    def tx_power_w(self) -> float:
        return float(dbm_to_watts(self.tx_power_dbm))

    @property
    def noise_power_w(self) -> float:
        """Noise power over one RB (PSD times RB bandwidth)."""
        return float(dbm_to_watts(self.noise_psd_dbm_hz)) * self.rb_bandwidth_hz


@dataclass(frozen=True)
class LinkSample:
    distance_m: float
    fading_gain: float
    interference_w: float = 0.0

    def __post_init__(self):
        if self.fading_gain < 0 or self.interference_w < 0 or self.distance_m <= 0:
            raise DomainError(f"invalid link sample {self}")


def sample_fading(rng: np.random.Generator, size=None):
    """Rayleigh power gain |h|^2, i.e. Exponential with unit mean."""
    return rng.exponential(1.0, size=size)


def path_gain(distance_m, params: ChannelParams):
    d = np.maximum(np.asarray(distance_m, dtype=float), params.min_distance_m)
    return d ** (-params.pathloss_exponent)


@dataclass
class GlobalAllocation:
    """Co-channel view of every DU at one time frame.

    Entry ``i`` of each list belongs to DU ``i``: ``e`` is the (N_i, K) RB
    assignment, ``power_w`` the per-UE transmit power, ``distance_m`` the
    UE-to-serving-RU distance and ``fading`` the (N_i, K) power gains.
    """

    e: list = field(default_factory=list)
    power_w: list = field(default_factory=list)
    distance_m: list = field(default_factory=list)
    fading: list = field(default_factory=list)

    def add_du(self, e, power_w, distance_m, fading):
        e = np.asarray(e, dtype=float)
        n, k = e.shape
        power_w = np.broadcast_to(np.asarray(power_w, dtype=float), (n,))
        distance_m = np.asarray(distance_m, dtype=float).reshape(n)
        fading = np.asarray(fading, dtype=float).reshape(n, k)
        if self.e and k != self.e[0].shape[1]:
            raise DomainError("all DUs must share the RB grid")
        self.e.append(e)
        self.power_w.append(power_w)
        self.distance_m.append(distance_m)
        self.fading.append(fading)
        return len(self.e) - 1

    @property
    def n_rb(self) -> int:
        return self.e[0].shape[1] if self.e else 0


def interference_per_rb(du: int, alloc: GlobalAllocation, params: ChannelParams) -> np.ndarray:
    """Interference (W) seen on each RB by UEs of ``du``; one value per RB.

    Only co-channel transmissions of the other DUs contribute, so the value
    does not depend on which UE of ``du`` is the victim.
    """
    if not 0 <= du < len(alloc.e):
        raise DomainError(f"unknown DU {du}")
    total = np.zeros(alloc.n_rb)
    for other in range(len(alloc.e)):
        if other == du:
            continue
        rx = alloc.power_w[other] * path_gain(alloc.distance_m[other], params)
        total += (alloc.e[other] * alloc.fading[other] * rx[:, None]).sum(axis=0)
    return total


def interference(du: int, ue: int, rb: int, alloc: GlobalAllocation, params: ChannelParams) -> float:
    """I_{u,k}: co-channel power from UEs served by the other RUs on RB ``rb``."""
    if not 0 <= du < len(alloc.e):
        raise DomainError(f"unknown DU {du}")
    if not 0 <= ue < alloc.e[du].shape[0]:
        raise DomainError(f"unknown UE {ue} in DU {du}")
    if not 0 <= rb < alloc.n_rb:
        raise DomainError(f"unknown RB {rb}")
    return float(interference_per_rb(du, alloc, params)[rb])


def spectral_efficiency(distance_m, fading_gain, interference_w, params: ChannelParams):
    """log2(1 + SINR), broadcasting over arrays."""
    signal = params.tx_power_w * path_gain(distance_m, params) * np.asarray(fading_gain, dtype=float)
    sinr = signal / (np.asarray(interference_w, dtype=float) + params.noise_power_w)
    return np.log2(1.0 + sinr)


def ue_rate(e_row: Sequence[int], b_row: Sequence[int], links: Sequence[LinkSample], params: ChannelParams) -> float:
    """Achievable rate (bits/s) of one UE given its RB row, its slice mask and per-RB links."""
    e_row = np.asarray(e_row, dtype=float)
    b_row = np.asarray(b_row, dtype=float)
    if not (len(e_row) == len(b_row) == len(links)):
        raise DomainError(f"length mismatch: e={len(e_row)} b={len(b_row)} links={len(links)}")
    mask = e_row * b_row
    if not mask.any():
        return 0.0
    d = np.array([lk.distance_m for lk in links])
    h = np.array([lk.fading_gain for lk in links])
    i = np.array([lk.interference_w for lk in links])
    se = spectral_efficiency(d, h, i, params)
    return float(params.rb_bandwidth_hz * np.sum(mask * se))


def rates_matrix(e, slice_mask_per_ue, distance_m, fading, interference_rb, params: ChannelParams) -> np.ndarray:
    """Vectorised ``ue_rate`` for a whole cell.

    ``e`` and ``slice_mask_per_ue`` are (N, K); ``distance_m`` is (N,);
    ``fading`` is (N, K); ``interference_rb`` is (K,).
    """
    se = spectral_efficiency(np.asarray(distance_m)[:, None], fading, np.asarray(interference_rb)[None, :], params)
    return params.rb_bandwidth_hz * np.sum(np.asarray(e) * np.asarray(slice_mask_per_ue) * se, axis=1)
