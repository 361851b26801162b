"""Client/system state vocabulary shared by every policy.

A client is observed as ``(buffer seconds, stall count, QoE)``. The tabular
methods work on a discretised version of that triple packed into a single
label in ``0..944``.
"""

from __future__ import annotations

import itertools
import math
from dataclasses import dataclass
from typing import Iterable, NamedTuple, Sequence

import numpy as np

N_BUFFER_BINS = 21
N_QOE_BINS = 9
N_STALL_BINS = 5
N_LABELS = N_BUFFER_BINS * N_QOE_BINS * N_STALL_BINS  # 945

BUFFER_MAX = 20.0
QOE_MIN, QOE_MAX = 1.0, 5.0

# (buffer, stalls, qoe) used for slots of clients that are not present
PAD_CLIENT = (BUFFER_MAX, 0, QOE_MAX)


class ClientObs(NamedTuple):
    """Continuous per-client observation as reported by the environment."""

    client_id: int
    buffer: float
    stalls: int
    qoe: float


class ClientStateDisc(NamedTuple):
    buffer_bin: int
    qoe_bin: int
    stall_bin: int

    @property
    def label(self) -> int:
        return encode(self)


@dataclass(frozen=True)
class RewardConfig:
    gamma: float = 0.95

    def __post_init__(self):
        if not 0.0 < self.gamma < 1.0:
            raise ValueError(f"gamma must lie in (0, 1), got {self.gamma}")


def discretize(buffer: float, stalls: float, qoe: float) -> ClientStateDisc:
    for name, x in (("buffer", buffer), ("stalls", stalls), ("qoe", qoe)):
        if not math.isfinite(x):
            raise ValueError(f"{name} must be finite, got {x}")
    b = min(max(buffer, 0.0), BUFFER_MAX)
    # round half up; Python's round() is half-to-even
    buffer_bin = int(math.floor(b + 0.5))
    qoe_bin = min(max(int(math.floor((qoe - QOE_MIN) / 0.5)), 0), N_QOE_BINS - 1)
    stall_bin = min(max(int(stalls), 0), N_STALL_BINS - 1)
    return ClientStateDisc(buffer_bin, qoe_bin, stall_bin)


def encode(disc: ClientStateDisc | Sequence[int]) -> int:
    b, q, s = disc
    if not (0 <= b < N_BUFFER_BINS and 0 <= q < N_QOE_BINS and 0 <= s < N_STALL_BINS):
        raise ValueError(f"bins out of range: {tuple(disc)}")
    return b * N_STALL_BINS * N_QOE_BINS + q * N_STALL_BINS + s


def decode(label: int) -> ClientStateDisc:
    label = int(label)
    if not 0 <= label < N_LABELS:
        raise ValueError(f"label must lie in [0, {N_LABELS}), got {label}")
    b, rest = divmod(label, N_STALL_BINS * N_QOE_BINS)
    q, s = divmod(rest, N_STALL_BINS)
    return ClientStateDisc(b, q, s)


def label_of(buffer: float, stalls: float, qoe: float) -> int:
    return encode(discretize(buffer, stalls, qoe))


def qoe_midpoint(qoe_bin: int) -> float:
    return min(QOE_MIN + 0.5 * qoe_bin + 0.25, QOE_MAX)


# lookup tables over all labels, handy for vectorised code
_ALL = [decode(i) for i in range(N_LABELS)]
LABEL_BINS = np.array(_ALL, dtype=np.int64)  # columns: buffer, qoe, stall
LABEL_QOE = np.array([qoe_midpoint(d.qoe_bin) for d in _ALL])
del _ALL


def pad_state(clients: Sequence[tuple], capacity: int = 6) -> list[tuple]:
    """Fill missing slots with the high-buffer, high-QoE padding client."""
    if len(clients) > capacity:
        raise ValueError(f"{len(clients)} clients exceed capacity {capacity}")
    return [tuple(c) for c in clients] + [PAD_CLIENT] * (capacity - len(clients))


def enumerate_actions(n_clients: int, n_hi: int) -> list[frozenset[int]]:
    if n_hi > n_clients or n_hi < 0:
        raise ValueError(f"cannot choose {n_hi} of {n_clients} clients")
    return [frozenset(c) for c in itertools.combinations(range(n_clients), n_hi)]


def reward(qoes: Iterable[float]) -> float:
    """Average QoE of the active clients of the next state."""
    values = list(qoes)
    if not values:
        raise ValueError("reward of an empty state is undefined")
    return sum(values) / len(values)


def reward_disc(states: Iterable[ClientStateDisc]) -> float:
    return reward(qoe_midpoint(s.qoe_bin) for s in states)
