import math

import pytest
from hypothesis import given
from hypothesis import strategies as st

from qoesched.mdp import (
    LABEL_QOE,
    N_LABELS,
    ClientStateDisc,
    RewardConfig,
    decode,
    discretize,
    encode,
    enumerate_actions,
    label_of,
    pad_state,
    qoe_midpoint,
    reward,
    reward_disc,
)


@pytest.mark.parametrize(
    "obs, bins, label",
    [
        ((0, 0, 1.0), (0, 0, 0), 0),
        ((20, 7, 5.0), (20, 8, 4), 944),
        ((9.6, 1, 3.2), (10, 4, 1), 471),
    ],
)
def test_discretize_examples(obs, bins, label):
    d = discretize(*obs)
    assert tuple(d) == bins
    assert d.label == label == label_of(*obs)


def test_buffer_rounds_half_up():
    assert discretize(0.5, 0, 5.0).buffer_bin == 1
    assert discretize(2.5, 0, 5.0).buffer_bin == 3
    assert discretize(-3.0, 0, 5.0).buffer_bin == 0
    assert discretize(25.0, 0, 5.0).buffer_bin == 20


def test_qoe_top_edge_inclusive():
    assert discretize(0, 0, 5.0).qoe_bin == 8
    assert discretize(0, 0, 4.5).qoe_bin == 7
    assert discretize(0, 0, 4.4999).qoe_bin == 6


def test_nan_rejected():
    with pytest.raises(ValueError):
        discretize(math.nan, 0, 5.0)


@pytest.mark.parametrize("disc, label", [((0, 0, 0), 0), ((1, 0, 0), 45), ((0, 1, 0), 5)])
def test_encode_examples(disc, label):
    assert encode(disc) == label
    assert tuple(decode(label)) == disc


def test_bijection_exhaustive():
    seen = set()
    for label in range(N_LABELS):
        d = decode(label)
        assert encode(d) == label
        seen.add(tuple(d))
    assert len(seen) == N_LABELS == 945


@pytest.mark.parametrize("label", [-1, 945, 10_000])
def test_decode_out_of_range(label):
    with pytest.raises(ValueError):
        decode(label)


def test_encode_out_of_range():
    with pytest.raises(ValueError):
        encode(ClientStateDisc(21, 0, 0))


@given(
    st.floats(-5, 30), st.floats(-5, 30), st.integers(0, 9), st.integers(0, 9), st.floats(1, 5), st.floats(1, 5)
)
def test_discretize_monotone(b1, b2, s1, s2, q1, q2):
    lo = discretize(min(b1, b2), min(s1, s2), min(q1, q2))
    hi = discretize(max(b1, b2), max(s1, s2), max(q1, q2))
    assert lo.buffer_bin <= hi.buffer_bin
    assert lo.stall_bin <= hi.stall_bin
    assert lo.qoe_bin <= hi.qoe_bin


def test_pad_state():
    six = [(1.0, 0, 3.0)] * 6
    assert pad_state(six) == six
    four = pad_state([(1.0, 0, 3.0)] * 4)
    assert four[4:] == [(20.0, 0, 5.0), (20.0, 0, 5.0)]
    assert pad_state([]) == [(20.0, 0, 5.0)] * 6
    assert pad_state(four) == four
    with pytest.raises(ValueError):
        pad_state([(0, 0, 1)] * 7)


def test_enumerate_actions():
    assert len(enumerate_actions(6, 2)) == 15
    assert enumerate_actions(2, 2) == [frozenset({0, 1})]
    assert enumerate_actions(3, 1) == [frozenset({0}), frozenset({1}), frozenset({2})]
    with pytest.raises(ValueError):
        enumerate_actions(2, 3)


def test_reward_examples():
    assert reward([5.0] * 6) == 5.0
    assert reward([1.0, 5.0]) == 3.0
    bins = [ClientStateDisc(0, 8, 0), ClientStateDisc(0, 8, 0), ClientStateDisc(0, 0, 0)]
    assert reward_disc(bins) == pytest.approx(3.75)
    with pytest.raises(ValueError):
        reward([])


@given(st.lists(st.floats(1, 5), min_size=1, max_size=9), st.randoms())
def test_reward_permutation_invariant(qoes, rnd):
    shuffled = list(qoes)
    rnd.shuffle(shuffled)
    assert reward(shuffled) == pytest.approx(reward(qoes))


def test_midpoints():
    assert qoe_midpoint(0) == 1.25
    assert qoe_midpoint(8) == 5.0
    assert LABEL_QOE[944] == 5.0 and LABEL_QOE[0] == 1.25


def test_reward_config():
    assert RewardConfig().gamma == 0.95
    with pytest.raises(ValueError):
        RewardConfig(gamma=1.0)
