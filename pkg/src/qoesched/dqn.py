"""Double DQN with a small numpy MLP.

Everything is written out by hand: the network, its reverse-mode gradient,
Adam, the replay ring and the training loop. Networks are lists of
``(W, b)`` pairs with ``W`` shaped ``(fan_in, fan_out)``; hidden layers use
rectifiers and the output layer is linear.
"""

from __future__ import annotations

import hashlib
import json
import logging
import math
from dataclasses import asdict, dataclass, field
from typing import Protocol, Sequence

import numpy as np

from .mdp import BUFFER_MAX, N_STALL_BINS, PAD_CLIENT, QOE_MAX, QOE_MIN, ClientObs, enumerate_actions

log = logging.getLogger(__name__)

Params = list  # list[tuple[np.ndarray, np.ndarray]]


# -- network -----------------------------------------------------------------


def init_mlp(sizes: Sequence[int], rng: np.random.Generator) -> Params:
    params = []
    for fan_in, fan_out in zip(sizes[:-1], sizes[1:]):
        bound = 1.0 / math.sqrt(fan_in)
        params.append((rng.uniform(-bound, bound, (fan_in, fan_out)), np.zeros(fan_out)))
    return params


def copy_params(params: Params) -> Params:
    return [(w.copy(), b.copy()) for w, b in params]


def layer_sizes(params: Params) -> list[int]:
    return [params[0][0].shape[0]] + [w.shape[1] for w, _ in params]


def mlp_forward(params: Params, x: np.ndarray) -> np.ndarray:
    x = np.asarray(x, dtype=float)
    if x.shape[-1] != params[0][0].shape[0]:
        raise ValueError(f"input dimension {x.shape[-1]} != {params[0][0].shape[0]}")
    h = x
    last = len(params) - 1
    for i, (w, b) in enumerate(params):
        h = h @ w + b
        if i < last:
            h = np.maximum(h, 0.0)
    return h


def _forward_cache(params: Params, x: np.ndarray):
    acts = [x]
    h = x
    last = len(params) - 1
    for i, (w, b) in enumerate(params):
        h = h @ w + b
        if i < last:
            h = np.maximum(h, 0.0)
        acts.append(h)
    return acts


def _backward(params: Params, acts: list[np.ndarray], grad_out: np.ndarray) -> Params:
    grads = [None] * len(params)
    g = grad_out
    for i in range(len(params) - 1, -1, -1):
        w, _ = params[i]
        grads[i] = (acts[i].T @ g, g.sum(axis=0))
        if i > 0:
            g = (g @ w.T) * (acts[i] > 0)
    return grads


def huber(e, delta: float = 1.0):
    a = np.abs(e)
    return np.where(a <= delta, 0.5 * np.square(e), delta * (a - 0.5 * delta))


def huber_grad(e, delta: float = 1.0):
    return np.clip(e, -delta, delta)


def batch_loss_and_grad(params: Params, x, actions, targets, delta: float = 1.0):
    """Mean Huber loss of ``Q(x, a) - target`` over a batch, and its gradient."""
    x = np.atleast_2d(np.asarray(x, dtype=float))
    actions = np.atleast_1d(np.asarray(actions))
    targets = np.atleast_1d(np.asarray(targets, dtype=float))
    acts = _forward_cache(params, x)
    q = acts[-1]
    rows = np.arange(len(x))
    err = q[rows, actions] - targets
    loss = float(huber(err, delta).mean())
    grad_out = np.zeros_like(q)
    grad_out[rows, actions] = huber_grad(err, delta) / len(x)
    return loss, _backward(params, acts, grad_out)


def mlp_gradient(params: Params, x, action_index: int, target: float, huber_delta: float = 1.0) -> Params:
    return batch_loss_and_grad(params, x, [action_index], [target], huber_delta)[1]


# -- optimiser ------------------------------------------------------------------


@dataclass
class AdamConfig:
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8


class AdamState:
    def __init__(self, params: Params):
        self.t = 0
        self.m = [(np.zeros_like(w), np.zeros_like(b)) for w, b in params]
        self.v = [(np.zeros_like(w), np.zeros_like(b)) for w, b in params]


def adam_step(params: Params, grads: Params, state: AdamState, config: AdamConfig) -> Params:
    """In-place Adam update; returns ``params`` for convenience."""
    state.t += 1
    b1, b2 = config.beta1, config.beta2
    c1 = 1.0 - b1**state.t
    c2 = 1.0 - b2**state.t
    for layer, (p_pair, g_pair) in enumerate(zip(params, grads)):
        for j in (0, 1):
            p, g = p_pair[j], g_pair[j]
            m = state.m[layer][j]
            v = state.v[layer][j]
            m *= b1
            m += (1.0 - b1) * g
            v *= b2
            v += (1.0 - b2) * g * g
            p -= config.lr * (m / c1) / (np.sqrt(v / c2) + config.eps)
    return params


# -- replay -----------------------------------------------------------------------


class ReplayBuffer:
    def __init__(self, capacity: int, n_features: int):
        if capacity < 1:
            raise ValueError("capacity must be positive")
        self.capacity = capacity
        self.s = np.empty((capacity, n_features))
        self.a = np.empty(capacity, dtype=np.int64)
        self.r = np.empty(capacity)
        self.s2 = np.empty((capacity, n_features))
        self.size = 0
        self.head = 0

    def __len__(self) -> int:
        return self.size

    def push(self, s, a: int, r: float, s2) -> None:
        i = self.head
        self.s[i] = s
        self.a[i] = a
        self.r[i] = r
        self.s2[i] = s2
        self.head = (i + 1) % self.capacity
        self.size = min(self.size + 1, self.capacity)

    def sample_indices(self, batch: int, rng: np.random.Generator) -> np.ndarray:
        if self.size == 0:
            raise ValueError("cannot sample from an empty buffer")
        return rng.integers(0, self.size, size=batch)

    def sample(self, batch: int, rng: np.random.Generator):
        idx = self.sample_indices(batch, rng)
        return self.s[idx], self.a[idx], self.r[idx], self.s2[idx]


# -- learning rule -------------------------------------------------------------------


@dataclass
class TrainConfig:
    gamma: float = 0.9999
    lr: float = 1e-3
    batch: int = 32
    replay_capacity: int = 500_000
    target_sync: int = 100_000
    huber_delta: float = 1.0
    eps_start: float = 1.0
    eps_end: float = 0.01
    eps_decay_steps: int = 1_000_000
    adam_beta1: float = 0.9
    adam_beta2: float = 0.999
    adam_eps: float = 1e-8
    hidden: tuple[int, ...] = (64, 32)
    steps_per_episode: int = 200
    episodes: int = 1000

    def __post_init__(self):
        if not 0.0 <= self.gamma < 1.0:
            raise ValueError("gamma must lie in [0, 1)")
        for name in ("lr", "batch", "replay_capacity", "target_sync", "huber_delta", "eps_decay_steps",
                     "steps_per_episode", "episodes"):
            if not getattr(self, name) > 0:
                raise ValueError(f"{name} must be positive")
        if not 0.0 < self.eps_end <= self.eps_start <= 1.0:
            raise ValueError("need 0 < eps_end <= eps_start <= 1")

    @property
    def adam(self) -> AdamConfig:
        return AdamConfig(self.lr, self.adam_beta1, self.adam_beta2, self.adam_eps)

    def epsilon(self, step: int) -> float:
        frac = min(step / self.eps_decay_steps, 1.0)
        return max(self.eps_end, self.eps_start - (self.eps_start - self.eps_end) * frac)

    def digest(self) -> str:
        blob = json.dumps(asdict(self), sort_keys=True).encode()
        return hashlib.sha256(blob).hexdigest()[:16]

    @classmethod
    def compressed(cls, total_steps: int, **overrides) -> "TrainConfig":
        """Shrink the step-denominated schedule to a smaller budget.

        Exploration decay and target-sync period scale by
        ``total_steps / 1e6`` so their ratios to the budget stay as in the
        full-scale configuration.
        """
        base = cls()
        scale = total_steps / base.eps_decay_steps
        params = dict(
            eps_decay_steps=max(1, round(base.eps_decay_steps * scale)),
            target_sync=max(1, round(base.target_sync * scale)),
            episodes=max(1, total_steps // base.steps_per_episode),
        )
        params.update(overrides)
        return cls(**params)


def double_dqn_target(online: Params, target_net: Params, r, s2, gamma: float) -> np.ndarray:
    """``r + gamma * Q_target(s2, argmax_b Q_online(s2, b))``, batched."""
    s2 = np.atleast_2d(s2)
    best = np.argmax(mlp_forward(online, s2), axis=1)
    q_t = mlp_forward(target_net, s2)
    return np.asarray(r, dtype=float) + gamma * q_t[np.arange(len(s2)), best]


def greedy_action(q: np.ndarray, valid: np.ndarray | None = None) -> int:
    if valid is not None:
        q = np.where(valid, q, -np.inf)
    return int(np.argmax(q))


def act_epsilon_greedy(
    params: Params,
    x,
    step: int,
    config: TrainConfig,
    rng: np.random.Generator,
    valid: np.ndarray | None = None,
) -> int:
    n_actions = params[-1][0].shape[1]
    if rng.random() < config.epsilon(step):
        choices = np.arange(n_actions) if valid is None else np.nonzero(valid)[0]
        return int(choices[rng.integers(len(choices))])
    return greedy_action(mlp_forward(params, x), valid)


class Env(Protocol):
    n_features: int
    n_actions: int

    def reset(self) -> np.ndarray: ...

    def step(self, action: int) -> tuple[np.ndarray, float]: ...


@dataclass
class TrainResult:
    params: Params
    target: Params
    curve: list[float]
    steps: int
    losses: list[float] = field(repr=False, default_factory=list)


def train(env: Env, config: TrainConfig, rng: np.random.Generator, log_every: int = 0) -> TrainResult:
    """Run double DQN on ``env``.

    Episodes are truncations of a continuing task, so bootstrapping never
    stops at an episode boundary. One gradient step per environment step once
    the replay holds a full batch.
    """
    sizes = [env.n_features, *config.hidden, env.n_actions]
    online = init_mlp(sizes, rng)
    target = copy_params(online)
    opt = AdamState(online)
    adam_cfg = config.adam
    replay = ReplayBuffer(config.replay_capacity, env.n_features)
    curve: list[float] = []
    losses: list[float] = []
    step = 0
    for episode in range(config.episodes):
        x = env.reset()
        total = 0.0
        ep_loss = 0.0
        for _ in range(config.steps_per_episode):
            a = act_epsilon_greedy(online, x, step, config, rng)
            x2, r = env.step(a)
            replay.push(x, a, r, x2)
            total += r
            if len(replay) >= config.batch:
                s, acts, rs, s2 = replay.sample(config.batch, rng)
                y = double_dqn_target(online, target, rs, s2, config.gamma)
                loss, grads = batch_loss_and_grad(online, s, acts, y, config.huber_delta)
                if not math.isfinite(loss):
                    raise FloatingPointError(
                        f"non-finite loss at step {step} (episode {episode}); "
                        f"max |target| {np.abs(y).max():.3g}"
                    )
                adam_step(online, grads, opt, adam_cfg)
                ep_loss += loss
            step += 1
            if step % config.target_sync == 0:
                target = copy_params(online)
            x = x2
        curve.append(total / config.steps_per_episode)
        losses.append(ep_loss / config.steps_per_episode)
        if log_every and (episode + 1) % log_every == 0:
            log.info("episode %d step %d mean reward %.4f eps %.3f", episode + 1, step, curve[-1], config.epsilon(step))
    return TrainResult(online, target, curve, step, losses)


# -- video-streaming wiring ------------------------------------------------------------


def client_features(buffer: float, stalls: int, qoe: float) -> tuple[float, float, float]:
    return (
        min(max(buffer, 0.0), BUFFER_MAX) / BUFFER_MAX,
        min(stalls, N_STALL_BINS - 1) / (N_STALL_BINS - 1),
        (min(max(qoe, QOE_MIN), QOE_MAX) - QOE_MIN) / (QOE_MAX - QOE_MIN),
    )


_PAD_FEATURES = client_features(*PAD_CLIENT)


def features(clients: Sequence[ClientObs], capacity: int = 6) -> np.ndarray:
    """Slot-ordered (by client id) feature vector with padding."""
    ordered = sorted(clients, key=lambda c: c.client_id)
    if len(ordered) > capacity:
        raise ValueError(f"{len(ordered)} clients exceed capacity {capacity}")
    out = [client_features(c.buffer, c.stalls, c.qoe) for c in ordered]
    out += [_PAD_FEATURES] * (capacity - len(ordered))
    return np.array(out, dtype=float).ravel()


def valid_mask(actions: Sequence[frozenset[int]], n_present: int) -> np.ndarray:
    return np.array([max(a, default=-1) < n_present for a in actions])


class DqnPolicy:
    def __init__(self, params: Params, capacity: int = 6, n_hi: int = 2):
        self.params = params
        self.capacity = capacity
        self.actions = enumerate_actions(capacity, n_hi)
        if len(self.actions) != params[-1][0].shape[1]:
            raise ValueError("network output does not match the action set")

    def q_values(self, clients: Sequence[ClientObs]) -> np.ndarray:
        return mlp_forward(self.params, features(clients, self.capacity))

    def __call__(self, clients: Sequence[ClientObs], ctx, n_hi: int) -> frozenset[int]:
        ordered = sorted(clients, key=lambda c: c.client_id)
        if len(ordered) <= n_hi:
            return frozenset(c.client_id for c in ordered)
        mask = valid_mask(self.actions, len(ordered))
        a = greedy_action(self.q_values(ordered), mask)
        return frozenset(ordered[i].client_id for i in self.actions[a])


# -- checkpoints ---------------------------------------------------------------------


def save_checkpoint(path, params: Params, step: int = 0, config: TrainConfig | None = None) -> None:
    sizes = layer_sizes(params)
    digest = config.digest() if config is not None else "-"
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(f"dqn-checkpoint\t1\t{','.join(map(str, sizes))}\t{step}\t{digest}\n")
        for i, (w, b) in enumerate(params):
            fh.write(f"W\t{i}\t{w.shape[0]}\t{w.shape[1]}\n")
            for row in w:
                fh.write(" ".join(repr(float(v)) for v in row) + "\n")
            fh.write(f"b\t{i}\t{b.shape[0]}\n")
            fh.write(" ".join(repr(float(v)) for v in b) + "\n")


def load_checkpoint(path) -> tuple[Params, int, str]:
    with open(path, encoding="utf-8") as fh:
        head = fh.readline().rstrip("\n").split("\t")
        if head[0] != "dqn-checkpoint" or head[1] != "1":
            raise ValueError("not a version-1 DQN checkpoint")
        sizes = [int(s) for s in head[2].split(",")]
        step, digest = int(head[3]), head[4]
        params = []
        for i in range(len(sizes) - 1):
            tag = fh.readline().split("\t")
            rows, cols = int(tag[2]), int(tag[3])
            if tag[0] != "W" or (rows, cols) != (sizes[i], sizes[i + 1]):
                raise ValueError(f"malformed weight block {i}")
            w = np.array([[float(v) for v in fh.readline().split()] for _ in range(rows)])
            tag = fh.readline().split("\t")
            if tag[0] != "b":
                raise ValueError(f"malformed bias block {i}")
            b = np.array([float(v) for v in fh.readline().split()])
            params.append((w, b))
    return params, step, digest
