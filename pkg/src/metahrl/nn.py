"""Fully connected tanh networks with hand-written backprop, Adam and Polyak target updates.

Arrays are float64 and batched along axis 0. ``forward`` accepts a single
vector or a (batch, in) matrix.

Checkpoint byte layout (all integers little-endian)::

    magic      8 bytes   b"MHRLNET\\x00"
    version    uint32    currently 1
    n_nets     uint32
    per network:
      name_len uint16, name (utf-8)
      out_act  uint8     0 = identity, 1 = tanh
      n_layers uint32
      widths   (n_layers + 1) x uint32
      per layer: W as float64 '<f8' row-major (in x out), then b as '<f8' (out)
"""

from __future__ import annotations

import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import CheckpointError, DomainError, NumericError

ACTIVATIONS = ("identity", "tanh")
MAGIC = b"MHRLNET\x00"
FORMAT_VERSION = 1


@dataclass
class MLPParams:
    weights: list
    biases: list
    output_activation: str = "identity"

    @property
    def widths(self) -> list[int]:
        return [self.weights[0].shape[0]] + [w.shape[1] for w in self.weights]

    @property
    def n_in(self) -> int:
        return self.weights[0].shape[0]

    @property
    def n_out(self) -> int:
        return self.weights[-1].shape[1]

    def copy(self) -> "MLPParams":
        return MLPParams([w.copy() for w in self.weights], [b.copy() for b in self.biases], self.output_activation)

    def arrays(self) -> list[np.ndarray]:
        return [a for pair in zip(self.weights, self.biases) for a in pair]

    def flat(self) -> np.ndarray:
        return np.concatenate([a.ravel() for a in self.arrays()])

    def with_flat(self, vec: np.ndarray) -> "MLPParams":
        out = self.copy()
        i = 0
        for arr in out.arrays():
            arr[...] = vec[i : i + arr.size].reshape(arr.shape)
            i += arr.size
        return out

    def same_shape(self, other: "MLPParams") -> bool:
        return self.widths == other.widths and self.output_activation == other.output_activation

    def is_finite(self) -> bool:
        return all(np.all(np.isfinite(a)) for a in self.arrays())


@dataclass
class Gradients:
    weights: list
    biases: list

    @classmethod
    def zeros_like(cls, params: MLPParams) -> "Gradients":
        return cls([np.zeros_like(w) for w in params.weights], [np.zeros_like(b) for b in params.biases])

    def arrays(self) -> list[np.ndarray]:
        return [a for pair in zip(self.weights, self.biases) for a in pair]

    def flat(self) -> np.ndarray:
        return np.concatenate([a.ravel() for a in self.arrays()])

    def scaled(self, c: float) -> "Gradients":
        return Gradients([c * w for w in self.weights], [c * b for b in self.biases])

    def __add__(self, other: "Gradients") -> "Gradients":
        return Gradients(
            [a + b for a, b in zip(self.weights, other.weights)],
            [a + b for a, b in zip(self.biases, other.biases)],
        )

    def norm(self) -> float:
        return float(np.sqrt(sum(np.sum(a * a) for a in self.arrays())))

    def is_finite(self) -> bool:
        return all(np.all(np.isfinite(a)) for a in self.arrays())


def init_mlp(widths, rng: np.random.Generator, output_activation: str = "identity") -> MLPParams:
    """Uniform(-1/sqrt(fan_in), 1/sqrt(fan_in)) for every weight and bias."""
    if output_activation not in ACTIVATIONS:
        raise DomainError(f"unknown activation {output_activation!r}")
    widths = [int(w) for w in widths]
    if len(widths) < 2 or min(widths) < 1:
        raise DomainError(f"bad widths {widths}")
    weights, biases = [], []
    for fan_in, fan_out in zip(widths[:-1], widths[1:]):
        bound = 1.0 / np.sqrt(fan_in)
        weights.append(rng.uniform(-bound, bound, (fan_in, fan_out)))
        biases.append(rng.uniform(-bound, bound, fan_out))
    return MLPParams(weights, biases, output_activation)


def _as_batch(params: MLPParams, x) -> tuple[np.ndarray, bool]:
    x = np.asarray(x, dtype=float)
    single = x.ndim == 1
    x2 = x[None, :] if single else x
    if x2.ndim != 2 or x2.shape[1] != params.n_in:
        raise DomainError(f"input width {x.shape} does not match network input {params.n_in}")
    return x2, single


def _forward_cache(params: MLPParams, x2: np.ndarray) -> list[np.ndarray]:
    acts = [x2]
    last = len(params.weights) - 1
    for i, (w, b) in enumerate(zip(params.weights, params.biases)):
        z = acts[-1] @ w + b
        if i < last or params.output_activation == "tanh":
            z = np.tanh(z)
        acts.append(z)
    return acts


def forward(params: MLPParams, x) -> np.ndarray:
    x2, single = _as_batch(params, x)
    out = _forward_cache(params, x2)[-1]
    return out[0] if single else out


def backward(params: MLPParams, x, upstream) -> tuple[Gradients, np.ndarray]:
    """Gradients of ``sum(forward(x) * upstream)`` w.r.t. parameters (summed over the batch) and w.r.t. ``x``."""
    x2, single = _as_batch(params, x)
    up = np.asarray(upstream, dtype=float)
    up = up[None, :] if up.ndim == 1 else up
    if up.shape != (x2.shape[0], params.n_out):
        raise DomainError(f"upstream shape {up.shape} does not match output {(x2.shape[0], params.n_out)}")
    acts = _forward_cache(params, x2)
    n_layers = len(params.weights)
    gw, gb = [None] * n_layers, [None] * n_layers
    delta = up
    if params.output_activation == "tanh":
        delta = delta * (1.0 - acts[-1] ** 2)
    for i in range(n_layers - 1, -1, -1):
        gw[i] = acts[i].T @ delta
        gb[i] = delta.sum(axis=0)
        delta = delta @ params.weights[i].T
        if i > 0:
            delta = delta * (1.0 - acts[i] ** 2)
    dx = delta[0] if single else delta
    return Gradients(gw, gb), dx


@dataclass
class AdamState:
    m: list
    v: list
    step: int = 0
    lr: float = 1e-4
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8

    @classmethod
    def for_params(cls, params: MLPParams, lr: float = 1e-4, **kw) -> "AdamState":
        zeros = [np.zeros_like(a) for a in params.arrays()]
        return cls(m=zeros, v=[z.copy() for z in zeros], lr=lr, **kw)

    def copy(self) -> "AdamState":
        return AdamState([a.copy() for a in self.m], [a.copy() for a in self.v], self.step, self.lr, self.beta1, self.beta2, self.eps)


def adam_step(params: MLPParams, grads: Gradients, state: AdamState, lr: float | None = None) -> tuple[MLPParams, AdamState]:
    """One bias-corrected Adam descent step. Inputs are not modified."""
    garr = grads.arrays()
    parr = params.arrays()
    if len(garr) != len(parr) or any(g.shape != p.shape for g, p in zip(garr, parr)):
        raise DomainError("gradient shapes do not match parameters")
    if len(state.m) != len(parr) or any(m.shape != p.shape for m, p in zip(state.m, parr)):
        raise DomainError("optimiser state does not match parameters")
    if not grads.is_finite():
        raise NumericError("non-finite gradient; Adam step refused")
    lr = state.lr if lr is None else lr
    step = state.step + 1
    b1, b2 = state.beta1, state.beta2
    new_m = [b1 * m + (1 - b1) * g for m, g in zip(state.m, garr)]
    new_v = [b2 * v + (1 - b2) * g * g for v, g in zip(state.v, garr)]
    c1 = 1 - b1**step
    c2 = 1 - b2**step
    new_p = [p - lr * (m / c1) / (np.sqrt(v / c2) + state.eps) for p, m, v in zip(parr, new_m, new_v)]
    out = MLPParams(new_p[0::2], new_p[1::2], params.output_activation)
    return out, AdamState(new_m, new_v, step, state.lr, b1, b2, state.eps)


def soft_update(target: MLPParams, online: MLPParams, tau: float) -> MLPParams:
    """Polyak average ``tau * online + (1 - tau) * target``."""
    if not target.same_shape(online):
        raise DomainError("target and online networks differ in shape")
    return MLPParams(
        [tau * o + (1 - tau) * t for t, o in zip(target.weights, online.weights)],
        [tau * o + (1 - tau) * t for t, o in zip(target.biases, online.biases)],
        target.output_activation,
    )


def save_networks(path, nets: dict[str, MLPParams]) -> None:
    chunks = [MAGIC, struct.pack("<II", FORMAT_VERSION, len(nets))]
    for name, p in nets.items():
        raw = name.encode("utf-8")
        chunks.append(struct.pack("<H", len(raw)) + raw)
        chunks.append(struct.pack("<BI", ACTIVATIONS.index(p.output_activation), len(p.weights)))
        chunks.append(struct.pack(f"<{len(p.widths)}I", *p.widths))
        for w, b in zip(p.weights, p.biases):
            chunks.append(np.ascontiguousarray(w, dtype="<f8").tobytes())
            chunks.append(np.ascontiguousarray(b, dtype="<f8").tobytes())
    Path(path).write_bytes(b"".join(chunks))


def load_networks(path) -> dict[str, MLPParams]:
    try:
        data = Path(path).read_bytes()
    except OSError as exc:
        raise CheckpointError(f"cannot read checkpoint {path}: {exc}") from exc
    if data[:8] != MAGIC:
        raise CheckpointError(f"{path} is not a network checkpoint")
    try:
        version, n_nets = struct.unpack_from("<II", data, 8)
        if version != FORMAT_VERSION:
            raise CheckpointError(f"unsupported checkpoint version {version}")
        off = 16
        nets = {}
        for _ in range(n_nets):
            (nlen,) = struct.unpack_from("<H", data, off)
            off += 2
            name = data[off : off + nlen].decode("utf-8")
            off += nlen
            act, n_layers = struct.unpack_from("<BI", data, off)
            off += 5
            widths = struct.unpack_from(f"<{n_layers + 1}I", data, off)
            off += 4 * (n_layers + 1)
            weights, biases = [], []
            for fi, fo in zip(widths[:-1], widths[1:]):
                weights.append(np.frombuffer(data, "<f8", fi * fo, off).reshape(fi, fo).astype(float))
                off += 8 * fi * fo
                biases.append(np.frombuffer(data, "<f8", fo, off).astype(float))
                off += 8 * fo
            nets[name] = MLPParams(weights, biases, ACTIVATIONS[act])
    except (struct.error, ValueError, IndexError) as exc:
        raise CheckpointError(f"corrupt checkpoint {path}: {exc}") from exc
    if off != len(data):
        raise CheckpointError(f"trailing bytes in checkpoint {path}")
    return nets
