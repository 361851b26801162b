"""Applying a per-bin policy to the whole access point."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Mapping, Sequence

import numpy as np

from .baselines import Policy, PolicyContext
from .mdp import ClientObs


@dataclass(frozen=True)
class BinLayout:
    n_hi: int
    single_queue: bool = False


class Scheduler:
    """Runs ``policy`` independently in every two-queue bin.

    Each bin gets its own context and random stream so a bin's decisions do
    not depend on how many other bins exist. Single-queue bins need no
    decision; bins with at most ``n_hi`` members promote everyone.
    """

    def __init__(self, policy: Policy | None, layout: Sequence[BinLayout], rng: np.random.Generator, kernel=None):
        self.policy = policy
        self.layout = list(layout)
        self.ctxs = [PolicyContext(0, r, kernel) for r in rng.spawn(len(self.layout))]

    def decide(self, clients: Sequence[ClientObs], bin_of: Mapping[int, int], dp_index: int) -> dict[int, frozenset[int]]:
        action = {}
        for b, lay in enumerate(self.layout):
            members = [c for c in clients if bin_of[c.client_id] == b]
            if lay.single_queue or not members:
                continue
            if len(members) <= lay.n_hi:
                action[b] = frozenset(c.client_id for c in members)
                continue
            if self.policy is None:
                raise ValueError(f"bin {b} needs a policy")
            ctx = self.ctxs[b]
            ctx.dp_index = dp_index
            action[b] = frozenset(self.policy(members, ctx, lay.n_hi))
        return action
