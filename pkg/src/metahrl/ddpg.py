"""DDPG learner: replay buffer, Gaussian exploration, critic/actor updates and TD errors."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import DomainError, NumericError
from .nn import AdamState, Gradients, MLPParams, adam_step, backward, forward, init_mlp, soft_update


@dataclass(frozen=True)
class Transition:
    s: np.ndarray
    a: np.ndarray
    s2: np.ndarray
    r: float

    def is_finite(self) -> bool:
        return bool(np.all(np.isfinite(self.s)) and np.all(np.isfinite(self.a)) and np.all(np.isfinite(self.s2)) and np.isfinite(self.r))


@dataclass
class Batch:
    s: np.ndarray
    a: np.ndarray
    s2: np.ndarray
    r: np.ndarray

    def __len__(self):
        return len(self.r)

    def scaled_rewards(self, c: float) -> "Batch":
        return Batch(self.s, self.a, self.s2, self.r * c)


class ReplayBuffer:
    """Ring buffer with oldest-first eviction. Storage grows on demand up to ``capacity``."""

    def __init__(self, obs_dim: int, act_dim: int, capacity: int = 10**6):
        if capacity < 1:
            raise DomainError("capacity must be positive")
        self.obs_dim, self.act_dim, self.capacity = obs_dim, act_dim, capacity
        self._alloc = min(capacity, 1024)
        self.s = np.zeros((self._alloc, obs_dim))
        self.a = np.zeros((self._alloc, act_dim))
        self.s2 = np.zeros((self._alloc, obs_dim))
        self.r = np.zeros(self._alloc)
        self.ptr = 0
        self.size = 0

    def __len__(self):
        return self.size

    def _grow(self):
        new = min(self.capacity, 2 * self._alloc)
        for name in ("s", "a", "s2"):
            arr = getattr(self, name)
            grown = np.zeros((new, arr.shape[1]))
            grown[: self._alloc] = arr
            setattr(self, name, grown)
        r = np.zeros(new)
        r[: self._alloc] = self.r
        self.r = r
        self._alloc = new

    def add(self, tr: Transition) -> None:
        if not tr.is_finite():
            raise NumericError("refusing to store a non-finite transition")
        if self.ptr >= self._alloc and self._alloc < self.capacity:
            self._grow()
        i = self.ptr
        self.s[i], self.a[i], self.s2[i], self.r[i] = tr.s, tr.a, tr.s2, tr.r
        self.ptr = (self.ptr + 1) % self.capacity
        self.size = min(self.size + 1, self.capacity)

    def extend(self, transitions) -> None:
        for tr in transitions:
            self.add(tr)

    def all(self) -> Batch:
        idx = np.arange(self.size)
        return self._gather(idx)

    def _gather(self, idx) -> Batch:
        return Batch(self.s[idx].copy(), self.a[idx].copy(), self.s2[idx].copy(), self.r[idx].copy())

    def sample(self, batch_size: int, rng: np.random.Generator) -> Batch:
        if self.size == 0:
            raise DomainError("cannot sample from an empty buffer")
        n = min(batch_size, self.size)
        return self._gather(rng.choice(self.size, n, replace=False))

    def copy(self) -> "ReplayBuffer":
        out = ReplayBuffer(self.obs_dim, self.act_dim, self.capacity)
        out._alloc = self._alloc
        out.s, out.a, out.s2, out.r = self.s.copy(), self.a.copy(), self.s2.copy(), self.r.copy()
        out.ptr, out.size = self.ptr, self.size
        return out


@dataclass
class DDPGConfig:
    hidden: tuple = (256, 512, 512)
    gamma: float = 0.99
    actor_lr: float = 1e-4
    critic_lr: float = 1e-4
    tau: float = 0.005
    batch_size: int = 128
    buffer_capacity: int = 10**6
    noise_start: float = 0.2
    noise_end: float = 0.02
    reward_scale: float = 1.0  # multiplies stored rewards inside TD targets; does not change the optimal policy

    def __post_init__(self):
        self.hidden = tuple(int(h) for h in self.hidden)
        if not 0.0 < self.gamma < 1.0:
            raise DomainError("gamma must lie in (0, 1)")


@dataclass
class DDPGAgent:
    actor: MLPParams
    critic: MLPParams
    actor_target: MLPParams
    critic_target: MLPParams
    actor_opt: AdamState
    critic_opt: AdamState
    config: DDPGConfig = field(default_factory=DDPGConfig)
    noise_std: float = 0.2

    @property
    def obs_dim(self) -> int:
        return self.actor.n_in

    @property
    def act_dim(self) -> int:
        return self.actor.n_out

    @classmethod
    def create(cls, obs_dim: int, act_dim: int, rng: np.random.Generator, config: DDPGConfig | None = None) -> "DDPGAgent":
        config = DDPGConfig() if config is None else config
        actor = init_mlp([obs_dim, *config.hidden, act_dim], rng, "tanh")
        critic = init_mlp([obs_dim + act_dim, *config.hidden, 1], rng, "identity")
        return cls.from_params(actor, critic, config)

    @classmethod
    def from_params(cls, actor: MLPParams, critic: MLPParams, config: DDPGConfig) -> "DDPGAgent":
        """Fresh optimiser state and targets equal to the online networks."""
        return cls(
            actor=actor.copy(),
            critic=critic.copy(),
            actor_target=actor.copy(),
            critic_target=critic.copy(),
            actor_opt=AdamState.for_params(actor, config.actor_lr),
            critic_opt=AdamState.for_params(critic, config.critic_lr),
            config=config,
            noise_std=config.noise_start,
        )

    def copy(self) -> "DDPGAgent":
        return DDPGAgent(
            self.actor.copy(),
            self.critic.copy(),
            self.actor_target.copy(),
            self.critic_target.copy(),
            self.actor_opt.copy(),
            self.critic_opt.copy(),
            self.config,
            self.noise_std,
        )

    def set_noise_progress(self, frac: float) -> None:
        """Linear decay of the exploration scale from ``noise_start`` to ``noise_end``."""
        frac = min(max(frac, 0.0), 1.0)
        self.noise_std = self.config.noise_start + frac * (self.config.noise_end - self.config.noise_start)


def select_action(agent: DDPGAgent, s, explore: bool, rng: np.random.Generator | None = None) -> np.ndarray:
    a = forward(agent.actor, s)
    if explore and agent.noise_std > 0:
        a = a + rng.normal(0.0, agent.noise_std, a.shape)
    return np.clip(a, -1.0, 1.0)


def _q(critic: MLPParams, s, a) -> np.ndarray:
    return forward(critic, np.concatenate([s, a], axis=1))[:, 0]


def td_targets(agent: DDPGAgent, batch: Batch) -> np.ndarray:
    a2 = forward(agent.actor_target, batch.s2)
    return agent.config.reward_scale * batch.r + agent.config.gamma * _q(agent.critic_target, batch.s2, a2)


def td_errors(agent: DDPGAgent, batch: Batch) -> np.ndarray:
    """c * r + gamma * Q'(s', mu'(s')) - Q(s, a) with reward scale ``c`` (1 by default); no parameter is touched."""
    if len(batch) == 0:
        raise DomainError("empty batch")
    return td_targets(agent, batch) - _q(agent.critic, batch.s, batch.a)


def critic_loss_and_grad(agent: DDPGAgent, batch: Batch) -> tuple[float, Gradients]:
    """Mean squared TD error and its gradient w.r.t. the online critic."""
    x = np.concatenate([batch.s, batch.a], axis=1)
    q = forward(agent.critic, x)[:, 0]
    diff = td_targets(agent, batch) - q
    loss = float(np.mean(diff**2))
    grads, _ = backward(agent.critic, x, (-2.0 * diff / len(diff))[:, None])
    return loss, grads


def actor_loss_and_grad(agent: DDPGAgent, batch: Batch) -> tuple[float, Gradients]:
    """Loss ``-mean Q(s, mu(s))`` and its gradient w.r.t. the actor, chained through the critic's input gradient."""
    n = len(batch)
    a = forward(agent.actor, batch.s)
    x = np.concatenate([batch.s, a], axis=1)
    q = forward(agent.critic, x)[:, 0]
    _, dx = backward(agent.critic, x, np.full((n, 1), 1.0 / n))
    dq_da = dx[:, agent.obs_dim :]
    grads, _ = backward(agent.actor, batch.s, -dq_da)
    return -float(np.mean(q)), grads


def critic_train_step(agent: DDPGAgent, batch: Batch) -> float:
    """One Adam step on the critic; returns the pre-step loss."""
    loss, grads = critic_loss_and_grad(agent, batch)
    if not np.isfinite(loss):
        raise NumericError("non-finite critic loss")
    agent.critic, agent.critic_opt = adam_step(agent.critic, grads, agent.critic_opt)
    return loss


def actor_train_step(agent: DDPGAgent, batch: Batch) -> float:
    """One Adam ascent step on mean Q; returns the pre-step objective estimate."""
    loss, grads = actor_loss_and_grad(agent, batch)
    if not np.isfinite(loss):
        raise NumericError("non-finite actor objective")
    agent.actor, agent.actor_opt = adam_step(agent.actor, grads, agent.actor_opt)
    return -loss


def update_targets(agent: DDPGAgent) -> None:
    agent.actor_target = soft_update(agent.actor_target, agent.actor, agent.config.tau)
    agent.critic_target = soft_update(agent.critic_target, agent.critic, agent.config.tau)


def train_step(agent: DDPGAgent, batch: Batch) -> tuple[float, float]:
    """Critic step, actor step, then Polyak target update. Returns (critic loss, actor objective)."""
    c = critic_train_step(agent, batch)
    a = actor_train_step(agent, batch)
    update_targets(agent)
    return c, a
