from itertools import product
from types import SimpleNamespace

import numpy as np
import pytest
from oracles import brute_force_bid_values

from qoesched.auction import (
    AuctionPolicy,
    Market,
    bid_grid,
    expected_payment,
    load_solution,
    mfg_fixed_point,
    p_win,
    pay_if_win,
    run_auction,
    save_solution,
    solve_bid_mdp,
)
from qoesched.baselines import PolicyContext
from qoesched.mdp import N_LABELS, ClientObs
from qoesched.model_based import ClientKernel

GRID3 = np.array([1.0, 2.0, 3.0])
UNIFORM3 = np.full(3, 1 / 3)


def brute_p_win(b, bids, rho, m, n):
    """Enumerate every opponent profile with a fair tie-break."""
    total = 0.0
    for combo in product(range(len(bids)), repeat=m):
        prob = np.prod([rho[i] for i in combo])
        others = [bids[i] for i in combo]
        h = sum(x > b for x in others)
        e = sum(x == b for x in others)
        free = n - h
        total += prob * (0 if free <= 0 else min(1.0, free / (e + 1)))
    return total


def test_p_win_examples():
    grid = bid_grid()
    point = np.zeros(len(grid))
    point[10] = 1.0  # everyone bids 1.0
    assert p_win(2.0, point, 4, 1, grid) == 1.0
    assert p_win(1.0, point, 2, 1, grid) == pytest.approx(1 / 3)
    assert p_win(2.0, UNIFORM3, 2, 1, GRID3) == pytest.approx(7 / 27, abs=1e-15)


def test_p_win_matches_enumeration():
    rng = np.random.default_rng(0)
    grid = np.arange(5.0)
    for _ in range(30):
        rho = rng.dirichlet(np.ones(5))
        m, n = int(rng.integers(1, 5)), int(rng.integers(1, 4))
        b = float(rng.integers(5))
        assert p_win(b, rho, m, n, grid) == pytest.approx(brute_p_win(b, grid, rho, m, n), abs=1e-12)


def test_p_win_monotone_in_bid():
    rng = np.random.default_rng(1)
    grid = bid_grid(11, 0, 5)
    rho = rng.dirichlet(np.ones(11))
    wins = [p_win(b, rho, 5, 2, grid) for b in grid]
    assert all(x <= y + 1e-12 for x, y in zip(wins, wins[1:]))


def test_payment_examples():
    grid = bid_grid(11, 0, 5)
    point = np.zeros(11)
    point[4] = 1.0  # everyone else bids 2.0
    pay, se = expected_payment(3.0, point, 2, 1, bids=grid)
    assert pay == pytest.approx(2.0) and se == 0.0
    with pytest.raises(ValueError):
        expected_payment(1.0, point, 2, 1, bids=grid)


def test_payment_methods_agree():
    for b in (1.0, 2.0, 3.0):
        exact, _ = expected_payment(b, UNIFORM3, 2, 1, bids=GRID3)
        enum, _ = expected_payment(b, UNIFORM3, 2, 1, bids=GRID3, method="enumerate")
        mc, se = expected_payment(b, UNIFORM3, 2, 1, np.random.default_rng(2), GRID3, "mc", 100_000)
        assert exact == pytest.approx(enum, abs=1e-12)
        assert abs(mc - exact) <= max(0.01, 3 * se)


def test_pay_if_win_random_cases():
    rng = np.random.default_rng(5)
    grid = np.arange(4.0)
    for _ in range(20):
        rho = rng.dirichlet(np.ones(4))
        m, n = int(rng.integers(1, 4)), int(rng.integers(1, 3))
        b = float(rng.integers(4))
        if p_win(b, rho, m, n, grid) == 0:
            continue
        enum, _ = expected_payment(b, rho, m, n, bids=grid, method="enumerate")
        assert pay_if_win(b, rho, m, n, grid) / p_win(b, rho, m, n, grid) == pytest.approx(enum, abs=1e-12)


def test_run_auction_examples():
    rng = np.random.default_rng(0)
    res = run_auction([(i, float(5 - i)) for i in range(6)], 2, rng)
    assert res.winners == {0, 1} and res.price == 3.0
    res = run_auction([(0, 1.0), (1, 4.0)], 2, rng)
    assert res.winners == {0, 1} and res.price == 0.0
    counts = {}
    for _ in range(3000):
        res = run_auction([(i, 2.0) for i in range(6)], 2, rng)
        assert res.price == 2.0 and len(res.winners) == 2
        counts[res.winners] = counts.get(res.winners, 0) + 1
    assert len(counts) == 15
    assert max(counts.values()) < 2 * min(counts.values())


def three_state_kernel(seed):
    rng = np.random.default_rng(seed)
    probs = rng.dirichlet(np.ones(3), size=(3, 2))
    expected = rng.uniform(1, 5, size=(3, 2))
    return SimpleNamespace(probs=probs, expected_qoe=expected)


@pytest.mark.parametrize("seed", range(4))
def test_bid_mdp_matches_enumeration(seed):
    kernel = three_state_kernel(seed)
    market = Market.from_rho(UNIFORM3, 2, 1, GRID3)
    sol = solve_bid_mdp(kernel, UNIFORM3, 0.9, tol=1e-12, market=market)
    oracle = brute_force_bid_values(kernel.probs, kernel.expected_qoe, market.p_win, market.pay_win, 0.9)
    assert np.abs(sol.values - oracle).max() < 1e-8


def test_bid_mdp_degenerate_markets():
    kernel = three_state_kernel(9)
    gamma = 0.8
    lose = Market(GRID3, np.zeros(3), np.zeros(3))
    v0 = np.linalg.solve(np.eye(3) - gamma * kernel.probs[:, 0], kernel.expected_qoe[:, 0])
    assert solve_bid_mdp(kernel, gamma=gamma, tol=1e-12, market=lose).values == pytest.approx(v0)
    win = Market(GRID3, np.ones(3), np.zeros(3))
    v1 = np.linalg.solve(np.eye(3) - gamma * kernel.probs[:, 1], kernel.expected_qoe[:, 1])
    assert solve_bid_mdp(kernel, gamma=gamma, tol=1e-12, market=win).values == pytest.approx(v1)


def flat_kernel():
    counts = np.zeros((N_LABELS, 2, N_LABELS), dtype=np.int64)
    rng = np.random.default_rng(0)
    for s in range(N_LABELS):
        nxt = rng.integers(N_LABELS, size=3)
        counts[s, 0, nxt] += 1
        counts[s, 1, nxt] += 1
    return ClientKernel(counts)


def test_no_gain_means_minimum_bid():
    grid = bid_grid(11, 0, 5)
    sol = solve_bid_mdp(flat_kernel(), np.full(11, 1 / 11), m_opponents=5, n_slots=2, bids=grid)
    assert np.abs(sol.gap).max() < 1e-9
    assert (sol.bid_policy == 0.0).all()
    res = mfg_fixed_point(flat_kernel(), np.full(11, 1 / 11), damping=1.0, outer_iters=2, horizon=3, bids=grid)
    assert res.rho[0] == pytest.approx(1.0)
    assert res.converged


def test_zero_damping_keeps_rho():
    grid = bid_grid(11, 0, 5)
    rho0 = np.random.default_rng(1).dirichlet(np.ones(11))
    absorbing = SimpleNamespace(probs=np.zeros((N_LABELS, 2, N_LABELS)), expected_qoe=np.zeros((N_LABELS, 2)))
    absorbing.probs[:, :, 0] = 1.0
    res = mfg_fixed_point(absorbing, rho0, damping=0.0, outer_iters=3, bids=grid, pmf_fn=lambda s: np.eye(11)[0])
    assert np.array_equal(res.rho, rho0)
    assert not res.converged and len(res.l1_trace) == 3


def test_fixed_point_resolve_reproduces_policy():
    grid = bid_grid(11, 0, 5)
    k = flat_kernel()
    res = mfg_fixed_point(k, np.full(11, 1 / 11), damping=1.0, outer_iters=3, horizon=3, bids=grid)
    again = solve_bid_mdp(k, res.rho, 0.95, m_opponents=5, n_slots=2, bids=grid)
    assert np.array_equal(again.bid_policy, res.solution.bid_policy)


def test_auction_policy_and_roundtrip(tmp_path):
    grid = bid_grid(11, 0, 5)
    sol = solve_bid_mdp(flat_kernel(), np.full(11, 1 / 11), bids=grid)
    pol = AuctionPolicy(sol)
    clients = [ClientObs(i, float(i), 0, 4.0) for i in range(6)]
    assert len(pol(clients, PolicyContext(0, np.random.default_rng(0)), 2)) == 2
    save_solution(tmp_path / "a.txt", sol, np.full(11, 1 / 11), 0.95, 5, 2)
    back, rho, meta = load_solution(tmp_path / "a.txt")
    assert meta == {"gamma": 0.95, "m_opponents": 5, "n_slots": 2}
    assert np.array_equal(back.values, sol.values)
    assert np.array_equal(back.bid_index, sol.bid_index)
    assert rho.sum() == pytest.approx(1.0)


def test_validation():
    with pytest.raises(ValueError):
        p_win(1.0, [0.5, 0.6, 0.0], 2, 1, GRID3)
    with pytest.raises(ValueError):
        bid_grid(1)
    with pytest.raises(ValueError):
        run_auction([], 2, np.random.default_rng(0))
    with pytest.raises(ValueError):
        solve_bid_mdp(three_state_kernel(0), gamma=1.0, market=Market(GRID3, np.ones(3), np.zeros(3)))
