"""Deep Q-learning on the planning environment.

Classic recipe: epsilon-greedy exploration with a linear schedule, a FIFO
replay buffer, TD(0) targets from a periodically synced target network, and
Adam on a mean-squared TD error. Fully seeded; two runs with the same
hyperparameters produce bit-identical weight trajectories.
"""

from __future__ import annotations

import time
from collections import deque
from dataclasses import dataclass, field

import numpy as np

from ..env import PlanningEnv
from .qnet import QNetwork

__all__ = ["DqnHyperparams", "ReplayBuffer", "Adam", "DqnResult", "train_dqn", "rollout"]


@dataclass(frozen=True)
class DqnHyperparams:
    """Desk-scale defaults: ~minutes of CPU on the standard 32^3 case.

    ``target_sync_interval`` counts environment steps. ``render_dims`` is the
    observation resolution fed to the network.
    """

    episodes: int = 300
    replay_capacity: int = 4000
    batch_size: int = 32
    gamma: float = 0.95
    epsilon_start: float = 1.0
    epsilon_end: float = 0.05
    epsilon_decay_episodes: int = 250
    learning_rate: float = 1e-3
    target_sync_interval: int = 50
    seed: int = 0
    render_dims: tuple[int, int, int] = (16, 16, 16)

    def __post_init__(self):
        if self.episodes < 1 or self.replay_capacity < 1 or self.batch_size < 1:
            raise ValueError("episodes, replay_capacity, and batch_size must be positive")
        if not 0 <= self.gamma <= 1:
            raise ValueError(f"gamma must be in [0, 1], got {self.gamma!r}")
        for name in ("epsilon_start", "epsilon_end"):
            v = getattr(self, name)
            if not 0 <= v <= 1:
                raise ValueError(f"{name} must be in [0, 1], got {v!r}")
        if self.epsilon_decay_episodes < 1 or self.target_sync_interval < 1:
            raise ValueError("epsilon_decay_episodes and target_sync_interval must be positive")
        if self.learning_rate <= 0:
            raise ValueError(f"learning_rate must be positive, got {self.learning_rate!r}")
        object.__setattr__(self, "render_dims", tuple(int(d) for d in self.render_dims))

    def epsilon_at(self, episode: int) -> float:
        frac = min(1.0, episode / self.epsilon_decay_episodes)
        return self.epsilon_start + (self.epsilon_end - self.epsilon_start) * frac


class ReplayBuffer:
    """FIFO transition store with uniform random sampling."""

    def __init__(self, capacity: int):
        self._buf: deque = deque(maxlen=int(capacity))

    def push(self, obs, action, reward, next_obs, done) -> None:
        self._buf.append((obs, int(action), float(reward), next_obs, bool(done)))

    def __len__(self) -> int:
        return len(self._buf)

    def sample(self, rng: np.random.Generator, batch_size: int):
        idx = rng.integers(0, len(self._buf), size=batch_size)
        batch = [self._buf[int(i)] for i in idx]
        obs = np.stack([b[0] for b in batch]).astype(np.float64)
        actions = np.array([b[1] for b in batch], dtype=np.int64)
        rewards = np.array([b[2] for b in batch], dtype=np.float64)
        next_obs = np.stack([b[3] for b in batch]).astype(np.float64)
        dones = np.array([b[4] for b in batch], dtype=np.float64)
        return obs, actions, rewards, next_obs, dones


class Adam:
    """Adam over a named parameter dict; state is keyed by parameter name."""

    def __init__(self, params: dict[str, np.ndarray], lr: float, beta1=0.9, beta2=0.999, eps=1e-8):
        self.params = params
        self.lr = lr
        self.beta1, self.beta2, self.eps = beta1, beta2, eps
        self.t = 0
        self.m = {k: np.zeros_like(v) for k, v in params.items()}
        self.v = {k: np.zeros_like(v) for k, v in params.items()}

    def step(self, grads: dict[str, np.ndarray]) -> None:
        self.t += 1
        b1c = 1.0 - self.beta1**self.t
        b2c = 1.0 - self.beta2**self.t
        for name, p in self.params.items():
            g = grads[name]
            self.m[name] = self.beta1 * self.m[name] + (1 - self.beta1) * g
            self.v[name] = self.beta2 * self.v[name] + (1 - self.beta2) * (g * g)
            p -= self.lr * (self.m[name] / b1c) / (np.sqrt(self.v[name] / b2c) + self.eps)


@dataclass
class DqnResult:
    qnet: QNetwork
    episode_returns: list[float]
    episode_epsilons: list[float]
    losses: list[float]
    wall_time_s: float


def _td_update(net: QNetwork, opt: Adam, obs, actions, targets) -> float:
    q = net.forward(obs, train=True)
    batch = q.shape[0]
    picked = q[np.arange(batch), actions]
    diff = picked - targets
    loss = float(np.mean(diff * diff))
    grad = np.zeros_like(q)
    grad[np.arange(batch), actions] = 2.0 * diff / batch
    net.zero_grads()
    net.backward(grad)
    opt.step(net.gradients())
    return loss


def train_dqn(env: PlanningEnv, hp: DqnHyperparams = DqnHyperparams(), progress=None) -> DqnResult:
    """Train a Q-network on the environment; deterministic for a given seed.

    ``progress``, when given, is called as ``progress(episode, return_)``
    after every episode.
    """
    started = time.perf_counter()
    rng = np.random.default_rng(hp.seed)
    net = QNetwork(hp.render_dims, env.cfg.angle_bins, seed=hp.seed)
    target = net.clone()
    opt = Adam(net.parameters(), lr=hp.learning_rate)
    replay = ReplayBuffer(hp.replay_capacity)

    returns: list[float] = []
    epsilons: list[float] = []
    losses: list[float] = []
    env_steps = 0

    for episode in range(hp.episodes):
        eps = hp.epsilon_at(episode)
        state = env.reset(seed=episode)
        obs = env.render_state(state, hp.render_dims)
        total = 0.0
        done = False
        while not done:
            if rng.random() < eps:
                action = int(rng.integers(env.n_actions))
            else:
                q = net.forward(obs[None], train=False)[0]
                action = int(np.argmax(q))
            next_state, reward, done = env.step(state, action)
            next_obs = env.render_state(next_state, hp.render_dims)
            replay.push(obs, action, reward, next_obs, done)
            total += reward
            state, obs = next_state, next_obs
            env_steps += 1

            if len(replay) >= hp.batch_size:
                b_obs, b_act, b_rew, b_next, b_done = replay.sample(rng, hp.batch_size)
                q_next = target.forward(b_next, train=False)
                td_targets = b_rew + hp.gamma * q_next.max(axis=1) * (1.0 - b_done)
                losses.append(_td_update(net, opt, b_obs, b_act, td_targets))
            if env_steps % hp.target_sync_interval == 0:
                target = net.clone()

        returns.append(total)
        epsilons.append(eps)
        if progress is not None:
            progress(episode, total)

    return DqnResult(net, returns, epsilons, losses, time.perf_counter() - started)


def rollout(
    env: PlanningEnv,
    net: QNetwork,
    render_dims: tuple[int, int, int],
    epsilon: float = 0.0,
    seed: int = 0,
):
    """Run one greedy (or epsilon-greedy) episode; returns the final state
    and the episode return."""
    rng = np.random.default_rng(seed)
    state = env.reset(seed=seed)
    total = 0.0
    done = False
    while not done:
        if epsilon > 0 and rng.random() < epsilon:
            action = int(rng.integers(env.n_actions))
        else:
            obs = env.render_state(state, render_dims)
            action = int(np.argmax(net.forward(obs[None], train=False)[0]))
        state, reward, done = env.step(state, action)
        total += reward
    return state, total
