"""(N+1)th-price auction for priority slots and the mean-field bidder.

Each client believes the other bids are IID draws from a population pmf
``rho`` over a discrete bid grid. Given that belief, winning probability and
expected payment are exact functions of the bid, and the client's
best-response bid comes from value iteration over its own 945-label state
space. Ties are broken uniformly at random throughout.
"""

from __future__ import annotations

import itertools
import logging
import math
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from .mdp import N_LABELS, ClientObs, label_of
from .model_based import ClientKernel, NotConvergedError
from .sim import SimConfig, StreamSim

log = logging.getLogger(__name__)

TIE_TOL = 1e-12


def bid_grid(n_points: int = 51, low: float = 0.0, high: float = 5.0) -> np.ndarray:
    if n_points < 2:
        raise ValueError("a bid grid needs at least two points")
    return np.linspace(low, high, n_points)


def validate_rho(rho, bids: np.ndarray) -> np.ndarray:
    rho = np.asarray(rho, dtype=float)
    if rho.shape != bids.shape or (rho < 0).any() or abs(rho.sum() - 1.0) > 1e-9:
        raise ValueError("rho must be a pmf over the bid grid")
    return rho


def _split(b: float, rho: np.ndarray, bids: np.ndarray):
    above = float(rho[bids > b + TIE_TOL].sum())
    equal = float(rho[np.abs(bids - b) <= TIE_TOL].sum())
    below = max(0.0, 1.0 - above - equal)
    return above, equal, below


def _win_chance(h: int, e: int, n_slots: int) -> float:
    free = n_slots - h
    if free <= 0:
        return 0.0
    if e + 1 <= free:
        return 1.0
    return free / (e + 1)


def _multinomial(m: int, h: int, e: int, pa: float, pe: float, pb: float) -> float:
    l = m - h - e
    coef = math.factorial(m) // (math.factorial(h) * math.factorial(e) * math.factorial(l))
    return coef * pa**h * pe**e * pb**l


def p_win(b: float, rho, m_opponents: int, n_slots: int, bids: np.ndarray | None = None) -> float:
    """Chance that bid ``b`` is among the top ``n_slots`` of itself plus
    ``m_opponents`` draws from ``rho``."""
    bids = bid_grid() if bids is None else np.asarray(bids)
    rho = validate_rho(rho, bids)
    pa, pe, pb = _split(b, rho, bids)
    total = 0.0
    for h in range(m_opponents + 1):
        for e in range(m_opponents - h + 1):
            w = _win_chance(h, e, n_slots)
            if w:
                total += _multinomial(m_opponents, h, e, pa, pe, pb) * w
    return min(total, 1.0)


def _kth_highest_mean(k: int, l: int, values: np.ndarray, probs: np.ndarray) -> float:
    """E[k-th highest of l IID draws] for a discrete law (values ascending)."""
    if k > l:
        return 0.0
    # survival S(x) = P(Y > x) at each support value
    surv = 1.0 - np.cumsum(probs)
    surv = np.clip(surv, 0.0, 1.0)
    i = np.arange(k)
    coef = np.array([math.comb(l, j) for j in range(k)], dtype=float)
    cdf = (coef[None, :] * surv[:, None] ** i[None, :] * (1.0 - surv[:, None]) ** (l - i[None, :])).sum(axis=1)
    pmf = np.diff(np.concatenate([[0.0], cdf]))
    return float((pmf * values).sum())


def pay_if_win(b: float, rho, m_opponents: int, n_slots: int, bids: np.ndarray | None = None) -> float:
    """E[price * 1{win}] computed from order statistics."""
    bids = bid_grid() if bids is None else np.asarray(bids)
    rho = validate_rho(rho, bids)
    pa, pe, pb = _split(b, rho, bids)
    lower = bids < b - TIE_TOL
    low_vals = bids[lower]
    low_probs = rho[lower] / pb if pb > 0 else rho[lower]
    total = 0.0
    for h in range(min(n_slots, m_opponents + 1)):
        for e in range(m_opponents - h + 1):
            w = _win_chance(h, e, n_slots)
            if not w:
                continue
            weight = _multinomial(m_opponents, h, e, pa, pe, pb)
            if weight == 0.0:
                continue
            l = m_opponents - h - e
            if n_slots <= h + e:
                price = b
            else:
                price = _kth_highest_mean(n_slots - h - e, l, low_vals, low_probs)
            total += weight * w * price
    return total


def expected_payment(
    b: float,
    rho,
    m_opponents: int,
    n_slots: int,
    rng: np.random.Generator | None = None,
    bids: np.ndarray | None = None,
    method: str = "exact",
    draws: int = 100_000,
) -> tuple[float, float]:
    """Expected price conditional on winning, with its standard error.

    ``method`` is ``"exact"`` (order statistics), ``"enumerate"`` (every
    opponent profile; small grids only) or ``"mc"`` (Monte Carlo). Exact
    methods report a zero standard error.
    """
    bids = bid_grid() if bids is None else np.asarray(bids)
    rho = validate_rho(rho, bids)
    if method == "exact":
        pw = p_win(b, rho, m_opponents, n_slots, bids)
        if pw <= 0:
            raise ValueError(f"bid {b} never wins; payment is undefined")
        return pay_if_win(b, rho, m_opponents, n_slots, bids) / pw, 0.0
    if method == "enumerate":
        return _enumerate_payment(b, rho, m_opponents, n_slots, bids)
    if method == "mc":
        return _mc_payment(b, rho, m_opponents, n_slots, bids, rng or np.random.default_rng(0), draws)
    raise ValueError(f"unknown method {method!r}")


def _price_and_win(b: float, others: Sequence[float], n_slots: int) -> tuple[float, float]:
    """Price and own win chance for one fixed opponent profile."""
    h = sum(1 for x in others if x > b + TIE_TOL)
    e = sum(1 for x in others if abs(x - b) <= TIE_TOL)
    profile = sorted([b, *others], reverse=True)
    price = profile[n_slots] if len(profile) > n_slots else 0.0
    return price, _win_chance(h, e, n_slots)


def _enumerate_payment(b, rho, m, n, bids):
    support = [(x, p) for x, p in zip(bids, rho) if p > 0]
    num = den = 0.0
    for combo in itertools.product(support, repeat=m):
        prob = math.prod(p for _, p in combo)
        price, w = _price_and_win(b, [x for x, _ in combo], n)
        num += prob * w * price
        den += prob * w
    if den <= 0:
        raise ValueError(f"bid {b} never wins; payment is undefined")
    return float(num / den), 0.0


def _mc_payment(b, rho, m, n, bids, rng, draws):
    others = rng.choice(bids, size=(draws, m), p=rho)
    h = (others > b + TIE_TOL).sum(axis=1)
    e = (np.abs(others - b) <= TIE_TOL).sum(axis=1)
    free = n - h
    w = np.where(free <= 0, 0.0, np.where(e + 1 <= free, 1.0, np.maximum(free, 0) / (e + 1)))
    profile = -np.sort(-np.concatenate([others, np.full((draws, 1), b)], axis=1), axis=1)
    price = profile[:, n] if m + 1 > n else np.zeros(draws)
    if w.sum() <= 0:
        raise ValueError(f"bid {b} never wins; payment is undefined")
    weights = w / w.sum()
    mean = float((weights * price).sum())
    # effective-sample-size standard error of a weighted mean
    var = float((weights * (price - mean) ** 2).sum())
    ess = w.sum() ** 2 / (w**2).sum()
    return mean, math.sqrt(var / ess)


# -- market terms and the bid MDP ----------------------------------------------------


@dataclass
class Market:
    """Per-bid win probability and E[price * 1{win}] for a fixed belief."""

    bids: np.ndarray
    p_win: np.ndarray
    pay_win: np.ndarray

    @classmethod
    def from_rho(cls, rho, m_opponents: int, n_slots: int, bids: np.ndarray | None = None) -> "Market":
        bids = bid_grid() if bids is None else np.asarray(bids)
        rho = validate_rho(rho, bids)
        pw = np.array([p_win(b, rho, m_opponents, n_slots, bids) for b in bids])
        pay = np.array([pay_if_win(b, rho, m_opponents, n_slots, bids) for b in bids])
        return cls(bids, pw, pay)


@dataclass
class MfgSolution:
    values: np.ndarray  # v(s)
    bid_index: np.ndarray  # index into bids
    bids: np.ndarray
    gap: np.ndarray  # value of winning minus value of losing
    residual: float
    iterations: int
    rho: np.ndarray | None = None

    @property
    def bid_policy(self) -> np.ndarray:
        return self.bids[self.bid_index]

    def objective(self, market: Market, kernel: ClientKernel, gamma: float) -> np.ndarray:
        """Best-response objective for every (state, bid) at the stored values."""
        w1, w0 = _continuations(kernel, self.values, gamma)
        return _objective(w1, w0, market)


def _continuations(kernel: ClientKernel, v: np.ndarray, gamma: float):
    w1 = kernel.expected_qoe[:, 1] + gamma * (kernel.probs[:, 1, :] @ v)
    w0 = kernel.expected_qoe[:, 0] + gamma * (kernel.probs[:, 0, :] @ v)
    return w1, w0


def _objective(w1: np.ndarray, w0: np.ndarray, market: Market) -> np.ndarray:
    pw = market.p_win[None, :]
    return pw * w1[:, None] - market.pay_win[None, :] + (1.0 - pw) * w0[:, None]


def solve_bid_mdp(
    kernel: ClientKernel,
    rho=None,
    gamma: float = 0.95,
    tol: float = 1e-8,
    m_opponents: int = 5,
    n_slots: int = 2,
    bids: np.ndarray | None = None,
    market: Market | None = None,
    max_iter: int = 100_000,
) -> MfgSolution:
    if market is None:
        bids = bid_grid() if bids is None else np.asarray(bids)
        market = Market.from_rho(rho, m_opponents, n_slots, bids)
    if not 0.0 < gamma < 1.0:
        raise ValueError("gamma must lie in (0, 1)")
    # any object with probs (S, 2, S) and expected_qoe (S, 2) will do
    v = np.zeros(kernel.probs.shape[0])
    res = math.inf
    for it in range(1, max_iter + 1):
        w1, w0 = _continuations(kernel, v, gamma)
        v_new = _objective(w1, w0, market).max(axis=1)
        res = float(np.abs(v_new - v).max())
        v = v_new
        if res < tol:
            break
    else:
        raise NotConvergedError("bid value iteration did not converge", res)
    w1, w0 = _continuations(kernel, v, gamma)
    choice = np.argmax(_objective(w1, w0, market), axis=1)  # lowest bid on ties
    rho_arr = None if rho is None else np.asarray(rho, dtype=float)
    return MfgSolution(v, choice, market.bids, w1 - w0, res, it, rho_arr)


# -- running the auction ----------------------------------------------------------------


@dataclass
class AuctionResult:
    winners: frozenset
    price: float


def run_auction(bids: Sequence[tuple[int, float]], n_slots: int, rng: np.random.Generator) -> AuctionResult:
    if not bids:
        raise ValueError("no bids")
    if len(bids) <= n_slots:
        return AuctionResult(frozenset(c for c, _ in bids), 0.0)
    values = sorted((b for _, b in bids), reverse=True)
    price = float(values[n_slots])
    cutoff = values[n_slots - 1]
    above = [c for c, b in bids if b > cutoff + TIE_TOL]
    tied = sorted(c for c, b in bids if abs(b - cutoff) <= TIE_TOL)
    need = n_slots - len(above)
    picked = rng.permutation(len(tied))[:need]
    winners = frozenset(above) | frozenset(tied[i] for i in picked)
    return AuctionResult(winners, price)


class AuctionPolicy:
    """Clients bid their best-response bid for their current label."""

    def __init__(self, solution: MfgSolution):
        self.bid_of = solution.bid_policy

    def bids(self, clients: Sequence[ClientObs]) -> list[tuple[int, float]]:
        return [(c.client_id, float(self.bid_of[label_of(c.buffer, c.stalls, c.qoe)])) for c in clients]

    def __call__(self, clients: Sequence[ClientObs], ctx, n_hi: int) -> frozenset[int]:
        ordered = sorted(clients, key=lambda c: c.client_id)
        return run_auction(self.bids(ordered), n_hi, ctx.rng).winners


# -- population fixed point ------------------------------------------------------------


@dataclass
class FixedPointResult:
    rho: np.ndarray
    solution: MfgSolution
    l1_trace: list[float] = field(default_factory=list)
    converged: bool = False


def empirical_bid_pmf(
    solution: MfgSolution,
    config: SimConfig,
    horizon: int,
    rng: np.random.Generator,
    n_slots: int = 2,
) -> np.ndarray:
    """Run the simulator with everyone bidding and histogram the bids."""
    sim = StreamSim(config, np.random.default_rng(rng.integers(2**63)))
    policy = AuctionPolicy(solution)
    hist = np.zeros(len(solution.bids))
    index_of = solution.bid_index
    for _ in range(horizon):
        obs = sim.observe()
        for c in obs:
            hist[index_of[label_of(c.buffer, c.stalls, c.qoe)]] += 1
        winners = run_auction(policy.bids(obs), n_slots, rng).winners
        sim.step_dp({0: winners})
    return hist / hist.sum()


def mfg_fixed_point(
    kernel: ClientKernel,
    rho0,
    config: SimConfig | None = None,
    damping: float = 0.3,
    outer_iters: int = 30,
    rng: np.random.Generator | None = None,
    gamma: float = 0.95,
    tol: float = 1e-3,
    horizon: int = 400,
    n_slots: int = 2,
    bids: np.ndarray | None = None,
    pmf_fn: Callable[[MfgSolution], np.ndarray] | None = None,
) -> FixedPointResult:
    """Damped best-response / empirical-distribution iteration.

    Stops when the empirical bid pmf is within ``tol`` (L1) of the belief
    that produced it; otherwise returns the last iterate with
    ``converged=False`` and the L1 trace.
    """
    if not 0.0 <= damping <= 1.0:
        raise ValueError("damping must lie in [0, 1]")
    config = config or SimConfig()
    rng = rng if rng is not None else np.random.default_rng(config.seed)
    bids = bid_grid() if bids is None else np.asarray(bids)
    rho = validate_rho(rho0, bids).copy()
    m_opponents = config.n_clients - 1
    trace: list[float] = []
    sol = None
    for it in range(outer_iters):
        sol = solve_bid_mdp(kernel, rho, gamma, m_opponents=m_opponents, n_slots=n_slots, bids=bids)
        rho_new = pmf_fn(sol) if pmf_fn else empirical_bid_pmf(sol, config, horizon, rng, n_slots)
        l1 = float(np.abs(rho_new - rho).sum())
        trace.append(l1)
        log.info("fixed point iteration %d: L1 %.4g", it + 1, l1)
        if l1 < tol:
            return FixedPointResult(rho, sol, trace, True)
        rho = (1.0 - damping) * rho + damping * rho_new
        rho /= rho.sum()
    # re-solve so the returned solution matches the returned belief
    sol = solve_bid_mdp(kernel, rho, gamma, m_opponents=m_opponents, n_slots=n_slots, bids=bids)
    log.warning("bid distribution did not settle after %d iterations: %s", outer_iters, trace)
    return FixedPointResult(rho, sol, trace, False)


# -- text serialisation --------------------------------------------------------------------


def save_solution(path, solution: MfgSolution, rho, gamma: float, m_opponents: int, n_slots: int) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(f"mfg-solution\t1\t{len(solution.bids)}\t{float(gamma)!r}\t{m_opponents}\t{n_slots}\n")
        fh.write("bids\t" + " ".join(repr(float(b)) for b in solution.bids) + "\n")
        fh.write("rho\t" + " ".join(repr(float(p)) for p in rho) + "\n")
        for s in range(N_LABELS):
            fh.write(
                f"{s}\t{float(solution.values[s])!r}\t{float(solution.bid_policy[s])!r}\t{float(solution.gap[s])!r}\n"
            )


def load_solution(path) -> tuple[MfgSolution, np.ndarray, dict]:
    with open(path, encoding="utf-8") as fh:
        head = fh.readline().rstrip("\n").split("\t")
        if head[0] != "mfg-solution" or head[1] != "1":
            raise ValueError("not a version-1 auction solution file")
        meta = {"gamma": float(head[3]), "m_opponents": int(head[4]), "n_slots": int(head[5])}
        bids = np.array([float(x) for x in fh.readline().split("\t")[1].split()])
        rho = np.array([float(x) for x in fh.readline().split("\t")[1].split()])
        values = np.zeros(N_LABELS)
        bid_index = np.zeros(N_LABELS, dtype=np.int64)
        gap = np.zeros(N_LABELS)
        for line in fh:
            s, v, b, g = line.rstrip("\n").split("\t")
            s = int(s)
            values[s] = float(v)
            bid_index[s] = int(np.argmin(np.abs(bids - float(b))))
            gap[s] = float(g)
    return MfgSolution(values, bid_index, bids, gap, 0.0, 0, rho), rho, meta
