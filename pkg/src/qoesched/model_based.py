"""Model-based planning from traces.

Pipeline: per-client transition counts -> client kernel -> the most frequent
joint states -> a sampled system kernel on those states (clients move
independently given their own action) -> value iteration.

Joint states are stored canonically as the sorted tuple of client labels:
clients are exchangeable, so the order carries no information and sorting
makes repeated states far more frequent.
"""

from __future__ import annotations

import logging
from collections import Counter
from dataclasses import dataclass, field
from typing import Iterable, Sequence

import numpy as np
from scipy import sparse

from .mdp import (
    LABEL_BINS,
    LABEL_QOE,
    N_LABELS,
    PAD_CLIENT,
    ClientObs,
    enumerate_actions,
    label_of,
)

log = logging.getLogger(__name__)

FORMAT_VERSION = 1
# integer-valued coordinates proportional to (buffer/20, qoe/8, stall/4), so
# squared distances are exact and ties resolve deterministically
_COORD_SCALE = np.array([2.0, 5.0, 10.0])
LABEL_COORDS = LABEL_BINS * _COORD_SCALE


class NotConvergedError(RuntimeError):
    def __init__(self, message: str, residual: float, partial=None):
        super().__init__(f"{message} (residual {residual:.3g})")
        self.residual = residual
        self.partial = partial


@dataclass
class TraceLog:
    """Client transitions plus the joint states they were observed in."""

    client: list[tuple[int, int, int]] = field(default_factory=list)
    system: list[tuple[tuple[int, ...], frozenset[int], tuple[int, ...]]] = field(default_factory=list)

    def extend(self, other: "TraceLog") -> None:
        self.client.extend(other.client)
        self.system.extend(other.system)

    def system_states(self) -> list[tuple[int, ...]]:
        return [s for s, _, _ in self.system]


def canonical(labels: Iterable[int]) -> tuple[int, ...]:
    return tuple(sorted(int(x) for x in labels))


# -- client kernel -------------------------------------------------------------


class ClientKernel:
    """Empirical P(next label | label, action bit); unseen rows self-loop."""

    def __init__(self, counts: np.ndarray):
        counts = np.asarray(counts, dtype=np.int64)
        if counts.shape != (N_LABELS, 2, N_LABELS):
            raise ValueError(f"counts must have shape {(N_LABELS, 2, N_LABELS)}")
        self.counts = counts
        totals = counts.sum(axis=2)
        self.seen = totals > 0
        probs = counts / np.maximum(totals, 1)[:, :, None]
        idx = np.arange(N_LABELS)
        for a in (0, 1):
            unseen = ~self.seen[:, a]
            probs[idx[unseen], a, idx[unseen]] = 1.0
        self.probs = probs
        self.expected_qoe = probs @ LABEL_QOE  # (labels, 2)
        self._build_sampler()

    def _build_sampler(self) -> None:
        flat = self.probs.reshape(2 * N_LABELS, N_LABELS)
        rows, cols = np.nonzero(flat)
        vals = flat[rows, cols]
        # per-row cumulative sums, shifted by the row number so one global
        # searchsorted finds the right entry inside the right row
        csum = np.cumsum(vals)
        starts = np.searchsorted(rows, np.arange(2 * N_LABELS))
        row_base = np.concatenate([[0.0], csum])[starts]
        within = csum - row_base[rows]
        within[np.r_[rows[1:] != rows[:-1], True]] = 1.0
        self._cdf = within + rows
        self._cols = cols

    def row(self, label: int, action: int) -> dict[int, float]:
        p = self.probs[label, action]
        nz = np.nonzero(p)[0]
        return {int(j): float(p[j]) for j in nz}

    def sample(self, labels: np.ndarray, actions: np.ndarray, rng: np.random.Generator) -> np.ndarray:
        """Draw one next label per (label, action) pair."""
        labels = np.asarray(labels)
        rows = labels * 2 + np.asarray(actions)
        u = rng.random(rows.shape)
        pos = np.searchsorted(self._cdf, rows + u, side="right")
        pos = np.minimum(pos, len(self._cdf) - 1)
        return self._cols[pos]

    def matrix(self, action: int) -> np.ndarray:
        return self.probs[:, action, :]


def fit_client_kernel(traces: TraceLog | Sequence[tuple[int, int, int]]) -> ClientKernel:
    tuples = traces.client if isinstance(traces, TraceLog) else list(traces)
    if not tuples:
        raise ValueError("cannot fit a kernel from empty traces")
    arr = np.asarray(tuples, dtype=np.int64)
    if arr.min() < 0 or arr[:, [0, 2]].max() >= N_LABELS or not np.isin(arr[:, 1], (0, 1)).all():
        raise ValueError("trace tuples out of range")
    counts = np.zeros((N_LABELS, 2, N_LABELS), dtype=np.int64)
    np.add.at(counts, (arr[:, 0], arr[:, 1], arr[:, 2]), 1)
    return ClientKernel(counts)


# -- frequent states and projection ----------------------------------------------


@dataclass
class FrequentStateSet:
    states: np.ndarray  # (K, n_clients) sorted labels per row

    def __post_init__(self):
        self.states = np.asarray(self.states, dtype=np.int64)
        if self.states.ndim != 2 or len(self.states) == 0:
            raise ValueError("need a non-empty (K, n_clients) array of labels")
        self._coords = LABEL_COORDS[self.states].reshape(len(self.states), -1)
        self._sq = (self._coords**2).sum(axis=1)
        self._lookup = {tuple(s): i for i, s in enumerate(self.states.tolist())}
        if len(self._lookup) != len(self.states):
            raise ValueError("frequent states must be distinct")

    def __len__(self) -> int:
        return len(self.states)

    @property
    def n_clients(self) -> int:
        return self.states.shape[1]

    def project_many(self, states: np.ndarray, chunk: int = 4096) -> np.ndarray:
        """Nearest frequent state (lowest index on ties) for each row."""
        states = np.asarray(states, dtype=np.int64)
        uniq, inverse = np.unique(states, axis=0, return_inverse=True)
        out = np.empty(len(uniq), dtype=np.int64)
        for i, s in enumerate(uniq.tolist()):
            hit = self._lookup.get(tuple(s))
            out[i] = -1 if hit is None else hit
        todo = np.nonzero(out < 0)[0]
        for lo in range(0, len(todo), chunk):
            sel = todo[lo : lo + chunk]
            q = LABEL_COORDS[uniq[sel]].reshape(len(sel), -1)
            d = (q**2).sum(axis=1)[:, None] + self._sq[None, :] - 2.0 * (q @ self._coords.T)
            out[sel] = np.argmin(d, axis=1)
        return out[inverse.reshape(-1)]


def top_states(states: Iterable[Sequence[int]], k: int = 1000) -> FrequentStateSet:
    if k < 1:
        raise ValueError("K must be at least 1")
    counts = Counter(canonical(s) for s in states)
    if k > len(counts):
        raise ValueError(f"K={k} exceeds the {len(counts)} distinct observed states")
    ranked = sorted(counts.items(), key=lambda kv: (-kv[1], kv[0]))
    return FrequentStateSet(np.array([s for s, _ in ranked[:k]]))


def project(state: Sequence[int], sp: FrequentStateSet) -> int:
    return int(sp.project_many(np.array([canonical(state)]))[0])


# -- system kernel ---------------------------------------------------------------


@dataclass
class SystemKernel:
    """Transition matrix with rows indexed by ``state * n_actions + action``."""

    transitions: sparse.csr_matrix  # (K*A, K)
    rewards: np.ndarray  # (K, A)

    def __post_init__(self):
        self.rewards = np.asarray(self.rewards, dtype=float)
        k, a = self.rewards.shape
        self.transitions = sparse.csr_matrix(self.transitions)
        if self.transitions.shape != (k * a, k):
            raise ValueError(f"transitions shape {self.transitions.shape} does not match rewards {self.rewards.shape}")
        sums = np.asarray(self.transitions.sum(axis=1)).ravel()
        if np.abs(sums - 1.0).max() > 1e-9:
            raise ValueError("transition rows must sum to one")

    @classmethod
    def from_dense(cls, p: np.ndarray, r: np.ndarray) -> "SystemKernel":
        p = np.asarray(p, dtype=float)
        k, a, _ = p.shape
        return cls(sparse.csr_matrix(p.reshape(k * a, k)), r)

    @property
    def n_states(self) -> int:
        return self.rewards.shape[0]

    @property
    def n_actions(self) -> int:
        return self.rewards.shape[1]

    def row(self, s: int, a: int) -> dict[int, float]:
        r = self.transitions.getrow(s * self.n_actions + a)
        return {int(j): float(p) for j, p in zip(r.indices, r.data)}

    def q_values(self, v: np.ndarray, gamma: float) -> np.ndarray:
        return self.rewards + gamma * (self.transitions @ v).reshape(self.rewards.shape)


def synthesize_system_kernel(
    kernel: ClientKernel,
    sp: FrequentStateSet,
    actions: Sequence[frozenset[int]],
    samples_per: int = 100,
    rng: np.random.Generator | None = None,
) -> SystemKernel:
    rng = rng if rng is not None else np.random.default_rng(0)
    k, n = len(sp), sp.n_clients
    n_act = len(actions)
    bits = np.zeros((n_act, n), dtype=np.int64)
    for i, act in enumerate(actions):
        bits[i, sorted(act)] = 1
    # (K, A, samples, n)
    labels = np.broadcast_to(sp.states[:, None, None, :], (k, n_act, samples_per, n))
    acts = np.broadcast_to(bits[None, :, None, :], (k, n_act, samples_per, n))
    nxt = kernel.sample(labels.reshape(-1), acts.reshape(-1), rng).reshape(-1, n)
    nxt.sort(axis=1)
    proj = sp.project_many(nxt).reshape(k * n_act, samples_per)
    rewards = LABEL_QOE[sp.states[proj]].mean(axis=2).mean(axis=1).reshape(k, n_act)
    rows = np.repeat(np.arange(k * n_act), samples_per)
    p = sparse.csr_matrix(
        (np.full(rows.size, 1.0 / samples_per), (rows, proj.reshape(-1))), shape=(k * n_act, k)
    )
    p.sum_duplicates()
    return SystemKernel(p, rewards)


# -- value iteration ---------------------------------------------------------------


@dataclass
class ValueSolution:
    values: np.ndarray
    policy: np.ndarray
    residual: float
    iterations: int
    residuals: list[float] = field(default_factory=list, repr=False)


def value_iteration(
    sys_kernel: SystemKernel, gamma: float, tol: float = 1e-6, max_iter: int = 100_000
) -> ValueSolution:
    if not 0.0 < gamma < 1.0:
        raise ValueError(f"gamma must lie in (0, 1), got {gamma}")
    v = np.zeros(sys_kernel.n_states)
    residuals = []
    for it in range(1, max_iter + 1):
        q = sys_kernel.q_values(v, gamma)
        v_new = q.max(axis=1)
        res = float(np.abs(v_new - v).max())
        residuals.append(res)
        v = v_new
        if res < tol:
            break
    else:
        policy = np.argmax(sys_kernel.q_values(v, gamma), axis=1)
        raise NotConvergedError(
            f"value iteration did not converge in {max_iter} sweeps",
            residuals[-1],
            ValueSolution(v, policy, residuals[-1], max_iter, residuals),
        )
    policy = np.argmax(sys_kernel.q_values(v, gamma), axis=1)  # first max wins ties
    return ValueSolution(v, policy, residuals[-1], it, residuals)


# -- policy --------------------------------------------------------------------------


class ModelBasedPolicy:
    """Greedy policy over the frequent-state MDP.

    Without a client kernel the current state is projected onto the
    frequent set and the stored Q row decides. With a kernel the policy
    looks one step ahead from the actual state instead: for every action it
    samples next joint states, projects only those, and scores
    ``E[reward] + gamma * E[V(next)]``.

    Fewer clients than the model was built for are padded with idle
    high-buffer clients; actions that would promote a padding slot are
    skipped in favour of the best valid one.
    """

    def __init__(
        self,
        sp: FrequentStateSet,
        actions: Sequence[frozenset[int]],
        q: np.ndarray,
        values: np.ndarray | None = None,
        gamma: float = 0.95,
        kernel: ClientKernel | None = None,
        lookahead_samples: int = 400,
    ):
        self.sp = sp
        self.actions = list(actions)
        self.q = np.asarray(q)
        self.values = None if values is None else np.asarray(values)
        self.gamma = gamma
        self.kernel = kernel
        self.samples = lookahead_samples
        self.capacity = sp.n_clients
        self._pad_label = label_of(*PAD_CLIENT)
        self._bits = np.zeros((len(self.actions), self.capacity), dtype=np.int64)
        for i, act in enumerate(self.actions):
            self._bits[i, sorted(act)] = 1
        if kernel is not None and self.values is None:
            raise ValueError("lookahead needs the state values")

    @classmethod
    def from_solution(cls, sp, actions, sys_kernel: SystemKernel, solution: ValueSolution, gamma: float, kernel=None, **kw):
        q = sys_kernel.q_values(solution.values, gamma)
        return cls(sp, actions, q, solution.values, gamma, kernel, **kw)

    def lookahead_q(self, labels: Sequence[int], rng: np.random.Generator) -> np.ndarray:
        labels = np.asarray(labels, dtype=np.int64)
        n_act, n = self._bits.shape
        flat_labels = np.broadcast_to(labels[None, None, :], (n_act, self.samples, n)).reshape(-1)
        flat_bits = np.broadcast_to(self._bits[:, None, :], (n_act, self.samples, n)).reshape(-1)
        nxt = self.kernel.sample(flat_labels, flat_bits, rng).reshape(-1, n)
        nxt.sort(axis=1)
        future = self.values[self.sp.project_many(nxt)].reshape(n_act, self.samples).mean(axis=1)
        reward = self.kernel.expected_qoe[labels[None, :], self._bits].mean(axis=1)
        return reward + self.gamma * future

    def __call__(self, clients: Sequence[ClientObs], ctx, n_hi: int) -> frozenset[int]:
        ordered = sorted(clients, key=lambda c: c.client_id)
        if len(ordered) <= n_hi:
            return frozenset(c.client_id for c in ordered)
        if len(ordered) > self.capacity:
            raise ValueError(f"model built for at most {self.capacity} clients")
        slots = [(label_of(c.buffer, c.stalls, c.qoe), i, c.client_id) for i, c in enumerate(ordered)]
        slots += [(self._pad_label, len(slots) + j, None) for j in range(self.capacity - len(ordered))]
        slots.sort()
        labels = [lab for lab, _, _ in slots]
        if self.kernel is not None:
            q = self.lookahead_q(labels, ctx.rng)
        else:
            q = self.q[project(labels, self.sp)]
        for a in np.argsort(-q, kind="stable"):
            chosen = [slots[i][2] for i in self.actions[a]]
            if None not in chosen and len(chosen) == n_hi:
                return frozenset(chosen)
        raise RuntimeError("no valid action found")


# -- text serialisation -----------------------------------------------------------


def save_client_kernel(kernel: ClientKernel, path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(f"client-kernel\t{FORMAT_VERSION}\t{N_LABELS}\n")
        for s in range(N_LABELS):
            for a in (0, 1):
                nz = np.nonzero(kernel.counts[s, a])[0]
                if len(nz):
                    cells = " ".join(f"{j}:{kernel.counts[s, a, j]}" for j in nz)
                    fh.write(f"{s}\t{a}\t{cells}\n")


def load_client_kernel(path) -> ClientKernel:
    with open(path, encoding="utf-8") as fh:
        head = fh.readline().rstrip("\n").split("\t")
        if head[0] != "client-kernel" or int(head[1]) != FORMAT_VERSION:
            raise ValueError(f"not a version-{FORMAT_VERSION} client kernel file")
        counts = np.zeros((N_LABELS, 2, N_LABELS), dtype=np.int64)
        for line in fh:
            s, a, cells = line.rstrip("\n").split("\t")
            for cell in cells.split():
                j, c = cell.split(":")
                counts[int(s), int(a), int(j)] = int(c)
    return ClientKernel(counts)


def save_model(path, sp: FrequentStateSet, actions, sys_kernel: SystemKernel, solution: ValueSolution, gamma: float):
    k, a = sys_kernel.rewards.shape
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(f"system-mdp\t{FORMAT_VERSION}\t{k}\t{a}\t{float(gamma)!r}\n")
        for act in actions:
            fh.write("action\t" + " ".join(str(i) for i in sorted(act)) + "\n")
        for i, st in enumerate(sp.states.tolist()):
            fh.write(f"state\t{i}\t" + " ".join(map(str, st)) + "\n")
        p = sys_kernel.transitions
        for row in range(k * a):
            s, act = divmod(row, a)
            lo, hi = p.indptr[row], p.indptr[row + 1]
            cells = " ".join(f"{j}:{x:.9f}" for j, x in zip(p.indices[lo:hi], p.data[lo:hi]))
            fh.write(f"row\t{s}\t{act}\t{sys_kernel.rewards[s, act]:.9f}\t{cells}\n")
        for s in range(k):
            fh.write(f"value\t{s}\t{float(solution.values[s])!r}\t{solution.policy[s]}\n")


def load_model(path):
    """Returns ``(sp, actions, sys_kernel, solution, gamma)``."""
    with open(path, encoding="utf-8") as fh:
        head = fh.readline().rstrip("\n").split("\t")
        if head[0] != "system-mdp" or int(head[1]) != FORMAT_VERSION:
            raise ValueError(f"not a version-{FORMAT_VERSION} system MDP file")
        k, a, gamma = int(head[2]), int(head[3]), float(head[4])
        actions, states = [], []
        rows, cols, data = [], [], []
        rewards = np.zeros((k, a))
        values = np.zeros(k)
        policy = np.zeros(k, dtype=np.int64)
        for line in fh:
            parts = line.rstrip("\n").split("\t")
            tag = parts[0]
            if tag == "action":
                actions.append(frozenset(int(x) for x in parts[1].split()))
            elif tag == "state":
                states.append([int(x) for x in parts[2].split()])
            elif tag == "row":
                s, act = int(parts[1]), int(parts[2])
                rewards[s, act] = float(parts[3])
                for cell in parts[4].split():
                    j, x = cell.split(":")
                    rows.append(s * a + act)
                    cols.append(int(j))
                    data.append(float(x))
            elif tag == "value":
                values[int(parts[1])] = float(parts[2])
                policy[int(parts[1])] = int(parts[3])
    p = sparse.csr_matrix((data, (rows, cols)), shape=(k * a, k))
    sp = FrequentStateSet(np.array(states))
    return sp, actions, SystemKernel(p, rewards), ValueSolution(values, policy, 0.0, 0), gamma


def default_actions(n_clients: int, n_hi: int) -> list[frozenset[int]]:
    return enumerate_actions(n_clients, n_hi)
