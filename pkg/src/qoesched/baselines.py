"""Reference scheduling policies.

Every policy maps the observations of one bin to the set of client ids that
get the high-priority queue for the next DP. Ties always go to the lowest
client id.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Protocol, Sequence

import numpy as np

from .mdp import ClientObs, enumerate_actions, label_of


@dataclass
class PolicyContext:
    dp_index: int = 0
    rng: np.random.Generator = field(default_factory=lambda: np.random.default_rng(0))
    kernel: object | None = None

    def __post_init__(self):
        if self.dp_index < 0:
            raise ValueError("dp_index must be non-negative")


class Policy(Protocol):
    def __call__(self, clients: Sequence[ClientObs], ctx: PolicyContext, n_hi: int) -> frozenset[int]: ...


def _check(clients: Sequence[ClientObs], n_hi: int) -> list[ClientObs]:
    if len(clients) < n_hi:
        raise ValueError(f"need at least {n_hi} clients, got {len(clients)}")
    return sorted(clients, key=lambda c: c.client_id)


def round_robin(clients: Sequence[ClientObs], ctx: PolicyContext, n_hi: int) -> frozenset[int]:
    ordered = _check(clients, n_hi)
    n = len(ordered)
    start = (ctx.dp_index * n_hi) % n
    return frozenset(ordered[(start + i) % n].client_id for i in range(n_hi))


def greedy_buffer(clients: Sequence[ClientObs], n_hi: int) -> frozenset[int]:
    ordered = _check(clients, n_hi)
    ranked = sorted(ordered, key=lambda c: (c.buffer, c.client_id))
    return frozenset(c.client_id for c in ranked[:n_hi])


def reward_greedy(clients: Sequence[ClientObs], kernel, n_hi: int) -> frozenset[int]:
    """Pick the clients whose expected next QoE gains most from priority."""
    ordered = _check(clients, n_hi)
    expected = kernel.expected_qoe  # (labels, 2)
    gains = []
    for c in ordered:
        lab = label_of(c.buffer, c.stalls, c.qoe)
        gains.append((-(expected[lab, 1] - expected[lab, 0]), c.client_id))
    gains.sort()
    return frozenset(cid for _, cid in gains[:n_hi])


def random_policy(clients: Sequence[ClientObs], ctx: PolicyContext, n_hi: int) -> frozenset[int]:
    ordered = _check(clients, n_hi)
    actions = enumerate_actions(len(ordered), n_hi)
    pick = actions[int(ctx.rng.integers(len(actions)))]
    return frozenset(ordered[i].client_id for i in pick)


# uniform call signature for the harness
BASELINES: dict[str, Policy] = {
    "round_robin": round_robin,
    "greedy_buffer": lambda clients, ctx, n_hi: greedy_buffer(clients, n_hi),
    "reward_greedy": lambda clients, ctx, n_hi: reward_greedy(clients, ctx.kernel, n_hi),
    "random": random_policy,
}
