import numpy as np
import pytest
from oracles import best_by_enumeration, random_mdp

from qoesched.baselines import PolicyContext
from qoesched.mdp import N_LABELS, PAD_CLIENT, ClientObs, label_of
from qoesched.model_based import (
    ClientKernel,
    FrequentStateSet,
    ModelBasedPolicy,
    NotConvergedError,
    SystemKernel,
    TraceLog,
    canonical,
    default_actions,
    fit_client_kernel,
    load_client_kernel,
    load_model,
    project,
    save_client_kernel,
    save_model,
    synthesize_system_kernel,
    top_states,
    value_iteration,
)


def test_fit_counts():
    k = fit_client_kernel([(7, 1, 9), (7, 1, 9), (7, 1, 3)])
    row = k.row(7, 1)
    assert row[9] == pytest.approx(2 / 3) and row[3] == pytest.approx(1 / 3)
    assert k.row(100, 0) == {100: 1.0}
    assert np.allclose(k.probs.sum(axis=2), 1.0, atol=1e-9)


def test_fit_rejects_bad_traces():
    with pytest.raises(ValueError):
        fit_client_kernel([])
    with pytest.raises(ValueError):
        fit_client_kernel([(0, 2, 0)])
    with pytest.raises(ValueError):
        fit_client_kernel([(945, 0, 0)])


def test_kernel_sampler_matches_probabilities():
    k = fit_client_kernel([(5, 0, 1)] * 3 + [(5, 0, 2)] + [(5, 1, 9)])
    rng = np.random.default_rng(0)
    draws = k.sample(np.full(40_000, 5), np.zeros(40_000, dtype=int), rng)
    assert set(np.unique(draws)) == {1, 2}
    assert (draws == 1).mean() == pytest.approx(0.75, abs=0.01)
    assert (k.sample(np.array([5, 6]), np.array([1, 1]), rng) == [9, 6]).all()


def test_top_states():
    a, b, c = (1, 2, 3), (0, 0, 0), (4, 4, 4)
    sp = top_states([a] * 5 + [b] * 3 + [c], k=2)
    assert [tuple(s) for s in sp.states] == [a, b]
    full = top_states([a, b, c], k=3)
    assert sorted(map(tuple, full.states)) == sorted([a, b, c])
    with pytest.raises(ValueError):
        top_states([a], k=2)


def test_top_states_canonicalizes():
    sp = top_states([(3, 1, 2), (1, 2, 3), (2, 3, 1), (0, 0, 0)], k=1)
    assert tuple(sp.states[0]) == (1, 2, 3)
    assert canonical([5, 1]) == (1, 5)


def test_project():
    sp = FrequentStateSet(np.array([[0, 0, 0], [944, 944, 944]]))
    assert project((0, 0, 0), sp) == 0
    assert project((944, 944, 944), sp) == 1
    assert project((1, 45, 0), sp) == 0
    assert project((900, 944, 940), sp) == 1


def test_synthesize_deterministic_kernel():
    counts = np.zeros((N_LABELS, 2, N_LABELS), dtype=np.int64)
    for s in range(N_LABELS):
        counts[s, 0, s] = 1
        counts[s, 1, min(s + 45, N_LABELS - 1)] = 1
    k = ClientKernel(counts)
    sp = FrequentStateSet(np.array([[0, 0], [0, 45], [45, 45]]))
    sysk = synthesize_system_kernel(k, sp, default_actions(2, 1), samples_per=20)
    for s in range(3):
        for a in range(2):
            assert len(sysk.row(s, a)) == 1
    assert sysk.row(0, 0) == {1: pytest.approx(1.0)}


def test_synthesize_single_client_matches_kernel():
    rng = np.random.default_rng(4)
    traces = [(int(s), int(rng.integers(2)), int(t)) for s, t in rng.integers(0, 30, size=(3000, 2))]
    k = fit_client_kernel(traces)
    sp = FrequentStateSet(np.arange(N_LABELS)[:, None])
    n = 100
    sysk = synthesize_system_kernel(k, sp, [frozenset(), frozenset({0})], samples_per=n, rng=rng)
    dense = sysk.transitions.toarray().reshape(N_LABELS, 2, N_LABELS)
    sigma = np.sqrt(k.probs * (1 - k.probs) / n)
    assert (np.abs(dense - k.probs) <= 3 * sigma + 1e-12).mean() > 0.99


def test_value_iteration_examples():
    one = SystemKernel.from_dense(np.ones((1, 1, 1)), np.ones((1, 1)))
    assert value_iteration(one, 0.9, tol=1e-10).values[0] == pytest.approx(10.0, abs=1e-8)
    swap = SystemKernel.from_dense(np.array([[[0.0, 1.0]], [[1.0, 0.0]]]), np.array([[0.0], [1.0]]))
    v = value_iteration(swap, 0.5, tol=1e-12).values
    assert v == pytest.approx([2 / 3, 4 / 3], abs=1e-9)


@pytest.mark.parametrize("seed", range(5))
def test_value_iteration_matches_enumeration(seed):
    rng = np.random.default_rng(seed)
    p, r = random_mdp(rng)
    sol = value_iteration(SystemKernel.from_dense(p, r), 0.9, tol=1e-10)
    assert np.abs(sol.values - best_by_enumeration(p, r, 0.9)).max() < 1e-6


def test_value_iteration_errors():
    k = SystemKernel.from_dense(np.ones((1, 1, 1)), np.ones((1, 1)))
    with pytest.raises(ValueError):
        value_iteration(k, 1.0)
    with pytest.raises(NotConvergedError) as info:
        value_iteration(k, 0.99, max_iter=3)
    assert info.value.partial is not None
    with pytest.raises(ValueError):
        SystemKernel.from_dense(np.full((1, 1, 2), 0.3), np.zeros((1, 1)))


def small_pipeline(seed=0):
    rng = np.random.default_rng(seed)
    traces = [(int(s), int(a), int(min(s + 45 * a, N_LABELS - 1))) for s in range(N_LABELS) for a in (0, 1)]
    k = fit_client_kernel(traces)
    states = [canonical(rng.choice(np.arange(0, N_LABELS, 45), size=3)) for _ in range(400)]
    sp = top_states(states, k=30)
    acts = default_actions(3, 1)
    sysk = synthesize_system_kernel(k, sp, acts, samples_per=10, rng=rng)
    return k, sp, acts, sysk, value_iteration(sysk, 0.9)


def test_pipeline_deterministic():
    a = small_pipeline(1)
    b = small_pipeline(1)
    assert np.array_equal(a[4].values, b[4].values)
    assert (a[3].transitions != b[3].transitions).nnz == 0


def test_policy_with_padding():
    k, sp, acts, sysk, sol = small_pipeline()
    for kernel in (None, k):
        pol = ModelBasedPolicy.from_solution(sp, acts, sysk, sol, 0.9, kernel)
        ctx = PolicyContext(0, np.random.default_rng(0))
        two = [ClientObs(4, 0.0, 0, 5.0), ClientObs(9, 3.0, 0, 5.0)]
        choice = pol(two, ctx, 1)
        assert len(choice) == 1 and choice <= {4, 9}
        three = two + [ClientObs(11, 20.0, 0, 5.0)]
        assert len(pol(three, ctx, 1)) == 1
        assert pol(two[:1], ctx, 1) == {4}


def test_pad_label_is_idle_client():
    assert label_of(*PAD_CLIENT) == 20 * 45 + 8 * 5


def test_kernel_and_model_roundtrip(tmp_path):
    k, sp, acts, sysk, sol = small_pipeline()
    save_client_kernel(k, tmp_path / "k.txt")
    assert np.array_equal(load_client_kernel(tmp_path / "k.txt").counts, k.counts)
    save_model(tmp_path / "m.txt", sp, acts, sysk, sol, 0.9)
    sp2, acts2, sysk2, sol2, gamma = load_model(tmp_path / "m.txt")
    assert gamma == 0.9 and acts2 == acts
    assert np.array_equal(sp2.states, sp.states)
    assert np.array_equal(sol2.values, sol.values)
    assert np.abs(sysk2.transitions - sysk.transitions).max() < 1e-8


def test_tracelog():
    log = TraceLog()
    log.extend(TraceLog(client=[(0, 0, 0)], system=[((0, 1), frozenset({0}), (1, 1))]))
    assert log.system_states() == [(0, 1)]
