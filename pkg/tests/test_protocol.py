import socket

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from qoesched import harness
from qoesched.baselines import PolicyContext, round_robin
from qoesched.protocol import (
    Channel,
    ClientStats,
    Envelope,
    ErrorMsg,
    Hello,
    MsgType,
    PolicyCmd,
    ProtocolError,
    QueueStats,
    SolicitedResp,
    decode_message,
    encode_message,
    run_over_socketpair,
)
from qoesched.sim import SimConfig, StreamSim

ints = st.integers(-(2**40), 2**40)
reals = st.integers(-(10**12), 10**12).map(lambda k: k / 1e6)
texts = st.text(st.characters(blacklist_characters="\t\n\r", blacklist_categories=("Cs",)), max_size=20)
pairs = st.lists(st.tuples(st.integers(0, 10**6), st.integers(0, 10**6)), max_size=9).map(tuple)

payloads = st.one_of(
    st.builds(Hello, texts),
    st.builds(PolicyCmd, ints, pairs),
    st.builds(SolicitedResp, ints, ints, texts, texts),
    st.builds(ClientStats, ints, reals, reals, ints, reals, reals, ints),
    st.builds(QueueStats, ints, reals, reals, reals, reals),
    st.builds(ErrorMsg, ints, texts),
)


@settings(max_examples=1000, deadline=None)
@given(st.integers(1, 2**31), payloads)
def test_roundtrip_fuzz(seq, payload):
    env = Envelope(seq, payload)
    assert decode_message(encode_message(env)) == env


def test_hello_wire_format():
    assert encode_message(Envelope(1, Hello())) == b"1\t1\tHELLO\n"
    assert decode_message(b"1\t1\tHELLO\n") == Envelope(1, Hello())


def test_field_formats():
    line = encode_message(Envelope(3, PolicyCmd(2, ((0, 0), (1, 1)))))
    assert line == b"1\t3\tPOLICY_CMD\t2\t0:0,1:1\n"
    line = encode_message(Envelope(4, QueueStats(0, 1.0, 2.5, 0.0, 0.0)))
    assert line == b"1\t4\tQUEUE_STATS\t0\t1.000000\t2.500000\t0.000000\t0.000000\n"


@pytest.mark.parametrize(
    "line",
    [
        b"1\t1\tHELLO",
        b"1\t1\n",
        b"2\t1\tHELLO\n",
        b"1\t1\tNOPE\n",
        b"1\tx\tHELLO\n",
        b"1\t1\tQUEUE_STATS\t0\t1.0\n",
        b"1\t1\tPOLICY_CMD\t0\t1:x\n",
    ],
)
def test_malformed_lines_raise(line):
    with pytest.raises(ProtocolError):
        decode_message(line)


def test_text_with_tab_rejected():
    with pytest.raises(ValueError):
        encode_message(Envelope(1, ErrorMsg(1, "a\tb")))


def test_out_of_order_seq():
    a, b = socket.socketpair()
    with a, b:
        a.sendall(encode_message(Envelope(1, Hello())) + encode_message(Envelope(3, Hello())))
        chan = Channel(b)
        assert chan.recv(1.0).seq == 1
        with pytest.raises(ProtocolError):
            chan.recv(1.0)


def test_decode_error_reported_to_peer():
    a, b = socket.socketpair()
    with a, b:
        a.sendall(b"1\t1\tBOGUS\n")
        with pytest.raises(ProtocolError):
            Channel(b).recv(1.0)
        reply = decode_message(a.recv(4096))
        assert isinstance(reply.payload, ErrorMsg) and reply.payload.offending_seq == 1


def test_recv_timeout_and_eof():
    a, b = socket.socketpair()
    chan = Channel(b)
    with pytest.raises(TimeoutError):
        chan.recv(0.05)
    a.close()
    assert chan.recv(1.0) is None
    b.close()


def test_round_robin_commands_and_cadence():
    sim = StreamSim(SimConfig(), np.random.default_rng(0))
    results, ctl = run_over_socketpair(sim, round_robin, 3, np.random.default_rng(1))
    assert len(results) == 3
    ids = [o.client_id for o in StreamSim(SimConfig(), np.random.default_rng(0)).observe()]
    for t, cmd in enumerate(ctl.commands):
        expected = round_robin([o for o in StreamSim(SimConfig(), np.random.default_rng(0)).observe()], PolicyContext(t), 2)
        high = {cid for cid, q in cmd.assignments if q == 0}
        assert high == expected
        assert sorted(cid for cid, _ in cmd.assignments) == ids
    assert ctl.statuses == ["OK"] * 3
    assert all(counts == {cid: 10 for cid in ids} for counts in ctl.stats_per_dp)


@pytest.mark.parametrize("scenario", ["static6", "dynamic4to6", "channel_bins", "vanilla"])
@pytest.mark.parametrize("policy", ["round_robin", "random"])
def test_transparency(scenario, policy):
    base = harness.ExperimentConfig(scenario=scenario, policy=policy, episodes=1, dps_per_episode=12, seed=5, period=4)
    direct = harness.run_experiment(base)
    remote = harness.run_experiment(harness.ExperimentConfig(**{**base.__dict__, "via_protocol": True}))
    assert direct.transcript == remote.transcript


def test_timeout_falls_back_to_previous_assignment():
    sim = StreamSim(SimConfig(), np.random.default_rng(0))
    slow = {1: 0.6, 2: 0.6}
    results, ctl = run_over_socketpair(
        sim, round_robin, 4, np.random.default_rng(0), timeout=0.3, delay=lambda t: slow.get(t, 0.0)
    )
    assert len(results) == 4
    assert ctl.statuses[0] == "OK" and "ERROR" in ctl.statuses
    # the fallback repeats DP 0's choice
    first = {r.client_id for r in results[0].rows if r.queue == 0}
    second = {r.client_id for r in results[1].rows if r.queue == 0}
    assert first == second == {0, 1}
    for counts in ctl.stats_per_dp:
        assert all(v % 10 == 0 for v in counts.values())


def test_message_type_names():
    assert {t.value for t in MsgType} == {
        "POLICY_CMD", "SOLICITED_RESP", "CLIENT_STATS", "QUEUE_STATS", "HELLO", "ERROR"
    }
