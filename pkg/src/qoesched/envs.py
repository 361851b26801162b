"""Environments exposing the ``reset``/``step`` interface used by the learner."""

from __future__ import annotations

from dataclasses import replace

import numpy as np

from .dqn import features
from .mdp import enumerate_actions, reward
from .sim import SimConfig, StreamSim


class StreamEnv:
    """Single-bin streaming simulator with a fixed-size action space.

    Actions index the ``C(capacity, n_hi)`` slot subsets; slots are the
    clients in ascending id order. Each ``reset`` starts a fresh episode on
    its own child random stream.
    """

    def __init__(self, config: SimConfig | None = None, capacity: int = 6, n_hi: int = 2, seed: int = 0):
        self.config = config or SimConfig()
        self.capacity = capacity
        self.n_hi = n_hi
        self.actions = enumerate_actions(capacity, n_hi)
        self.n_actions = len(self.actions)
        self.n_features = 3 * capacity
        self._seeds = np.random.SeedSequence(seed)
        self.sim: StreamSim | None = None

    def reset(self) -> np.ndarray:
        rng = np.random.default_rng(self._seeds.spawn(1)[0])
        cfg = replace(self.config, n_clients=min(self.config.n_clients, self.capacity))
        self.sim = StreamSim(cfg, rng)
        return features(self.sim.observe(), self.capacity)

    def step(self, action: int) -> tuple[np.ndarray, float]:
        obs = self.sim.observe()
        slots = [o.client_id for o in obs]
        try:
            hi = frozenset(slots[i] for i in self.actions[action])
        except IndexError:
            raise ValueError(f"action {action} promotes an empty slot") from None
        result = self.sim.step_dp({0: hi})
        nxt = self.sim.observe()
        return features(nxt, self.capacity), reward(result.qoe.values())


class TabularEnv:
    """Finite MDP with one-hot observations; episodes restart uniformly."""

    def __init__(self, p: np.ndarray, r: np.ndarray, seed: int = 0):
        self.p = np.asarray(p, dtype=float)
        self.r = np.asarray(r, dtype=float)
        self.n_states, self.n_actions = self.r.shape
        self.n_features = self.n_states
        self.rng = np.random.default_rng(seed)
        self.state = 0

    def _obs(self) -> np.ndarray:
        x = np.zeros(self.n_states)
        x[self.state] = 1.0
        return x

    def reset(self) -> np.ndarray:
        self.state = int(self.rng.integers(self.n_states))
        return self._obs()

    def step(self, action: int) -> tuple[np.ndarray, float]:
        r = float(self.r[self.state, action])
        self.state = int(self.rng.choice(self.n_states, p=self.p[self.state, action]))
        return self._obs(), r
