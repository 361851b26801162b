"""Line-oriented control channel between an environment and a controller.

Every message is one UTF-8 line::

    version \\t seq \\t TYPE [\\t field ...] \\n

Reals are written with six decimals. Each side numbers its own messages
1, 2, 3, ... and the receiver rejects any gap or reordering.

Conversation (E = environment, C = controller)::

    C: HELLO
    E: HELLO "dps=<n>;bins=<n_hi>:<single>,..."
    E: CLIENT_STATS ... QUEUE_STATS ...       (snapshot at t = 0)
    E: SOLICITED_RESP <hello seq> -1 OK
    per DP:
      C: POLICY_CMD dp assignments
      E: 10 x (CLIENT_STATS per client, QUEUE_STATS per queue)
      E: SOLICITED_RESP <cmd seq> dp OK|ERROR detail

If no command arrives in time the environment repeats the previous
assignment and closes the DP with an ERROR status.
"""

from __future__ import annotations

import logging
import socket
import threading
from dataclasses import dataclass, fields
from enum import Enum
from typing import Callable, Sequence

import numpy as np

from .mdp import ClientObs
from .scheduling import BinLayout, Scheduler
from .sim import StepResult, StreamSim, queue_id

log = logging.getLogger(__name__)

VERSION = 1


class MsgType(str, Enum):
    POLICY_CMD = "POLICY_CMD"
    SOLICITED_RESP = "SOLICITED_RESP"
    CLIENT_STATS = "CLIENT_STATS"
    QUEUE_STATS = "QUEUE_STATS"
    HELLO = "HELLO"
    ERROR = "ERROR"


class ProtocolError(Exception):
    def __init__(self, message: str, seq: int | None = None):
        super().__init__(message)
        self.seq = seq


# -- payloads ----------------------------------------------------------------------
# field kinds: int, real (6 decimals), text (no tabs or newlines), pairs


@dataclass(frozen=True)
class Hello:
    info: str = ""


@dataclass(frozen=True)
class PolicyCmd:
    dp_index: int
    assignments: tuple[tuple[int, int], ...]  # (client_id, queue_id)


@dataclass(frozen=True)
class SolicitedResp:
    ack_seq: int
    dp_index: int
    status: str  # OK or ERROR
    detail: str = ""


@dataclass(frozen=True)
class ClientStats:
    client_id: int
    sim_time: float
    buffer: float
    stall_count: int
    bitrate: float
    qoe: float
    bin: int


@dataclass(frozen=True)
class QueueStats:
    queue_id: int
    sim_time: float
    served_mbits: float
    backlog_mbits: float
    drops: float


@dataclass(frozen=True)
class ErrorMsg:
    offending_seq: int
    reason: str


PAYLOADS = {
    MsgType.HELLO: Hello,
    MsgType.POLICY_CMD: PolicyCmd,
    MsgType.SOLICITED_RESP: SolicitedResp,
    MsgType.CLIENT_STATS: ClientStats,
    MsgType.QUEUE_STATS: QueueStats,
    MsgType.ERROR: ErrorMsg,
}
TYPE_OF = {cls: t for t, cls in PAYLOADS.items()}


@dataclass(frozen=True)
class Envelope:
    seq: int
    payload: object
    version: int = VERSION

    @property
    def msg_type(self) -> MsgType:
        return TYPE_OF[type(self.payload)]


def _fmt(value, kind) -> str:
    if kind is int:
        return str(int(value))
    if kind is float:
        return f"{value:.6f}"
    if kind is str:
        if "\t" in value or "\n" in value or "\r" in value:
            raise ValueError("text fields may not contain tabs or newlines")
        return value
    return ",".join(f"{a}:{b}" for a, b in value)


def _parse(text: str, kind):
    if kind is int:
        return int(text)
    if kind is float:
        return float(text)
    if kind is str:
        return text
    if not text:
        return ()
    return tuple(tuple(int(x) for x in pair.split(":", 1)) for pair in text.split(","))


_KINDS = {"int": int, "float": float, "str": str}


def _kinds(cls) -> list:
    return [_KINDS.get(f.type, tuple) for f in fields(cls)]


def encode_message(env: Envelope) -> bytes:
    cls = type(env.payload)
    if cls not in TYPE_OF:
        raise ValueError(f"unknown payload {cls.__name__}")
    parts = [str(env.version), str(env.seq), TYPE_OF[cls].value]
    values = [getattr(env.payload, f.name) for f in fields(cls)]
    kinds = _kinds(cls)
    # trailing empty text fields are omitted (a bare HELLO has no fields)
    while values and kinds[-1] is str and values[-1] == "":
        values, kinds = values[:-1], kinds[:-1]
    parts += [_fmt(v, k) for v, k in zip(values, kinds)]
    return ("\t".join(parts) + "\n").encode("utf-8")


def decode_message(data: bytes | str) -> Envelope:
    text = data.decode("utf-8") if isinstance(data, bytes) else data
    if not text.endswith("\n"):
        raise ProtocolError("truncated message")
    parts = text[:-1].split("\t")
    if len(parts) < 3:
        raise ProtocolError("malformed header")
    try:
        version, seq = int(parts[0]), int(parts[1])
    except ValueError:
        raise ProtocolError("malformed header") from None
    if version != VERSION:
        raise ProtocolError(f"unsupported version {version}", seq)
    try:
        mtype = MsgType(parts[2])
    except ValueError:
        raise ProtocolError(f"unknown message type {parts[2]!r}", seq) from None
    cls = PAYLOADS[mtype]
    kinds = _kinds(cls)
    body = parts[3:]
    n_required = len(kinds)
    while n_required and kinds[n_required - 1] is str:
        n_required -= 1
    if not n_required <= len(body) <= len(kinds):
        raise ProtocolError(f"{mtype.value} expects {len(kinds)} fields, got {len(body)}", seq)
    try:
        values = [_parse(t, k) for t, k in zip(body, kinds)]
    except ValueError:
        raise ProtocolError(f"malformed {mtype.value} field", seq) from None
    values += [""] * (len(kinds) - len(values))  # omitted trailing text
    return Envelope(seq, cls(*values), version)


# -- transport -----------------------------------------------------------------------


class Channel:
    """Numbered message stream over a connected socket."""

    def __init__(self, sock: socket.socket):
        self.sock = sock
        self._buf = bytearray()
        self._out_seq = 0
        self._in_seq = 0

    def send(self, payload) -> int:
        self._out_seq += 1
        self.sock.sendall(encode_message(Envelope(self._out_seq, payload)))
        return self._out_seq

    def _readline(self, timeout: float | None) -> bytes | None:
        while True:
            nl = self._buf.find(b"\n")
            if nl >= 0:
                line = bytes(self._buf[: nl + 1])
                del self._buf[: nl + 1]
                return line
            # the timeout covers waiting for input only; sends always block
            self.sock.settimeout(timeout)
            try:
                chunk = self.sock.recv(65536)
            finally:
                self.sock.settimeout(None)
            if not chunk:
                if self._buf:
                    raise ProtocolError("connection closed mid-message")
                return None
            self._buf.extend(chunk)

    def recv(self, timeout: float | None = None) -> Envelope | None:
        """Next envelope, ``None`` at end of stream; raises ``TimeoutError``."""
        line = self._readline(timeout)
        if line is None:
            return None
        try:
            env = decode_message(line)
        except ProtocolError as exc:
            self.send(ErrorMsg(exc.seq if exc.seq is not None else -1, str(exc)))
            raise
        if env.seq != self._in_seq + 1:
            raise ProtocolError(f"expected seq {self._in_seq + 1}, got {env.seq}", env.seq)
        self._in_seq = env.seq
        return env

    def close(self) -> None:
        self.sock.close()


# -- environment side ------------------------------------------------------------------


Hook = Callable[[StreamSim, int], None]


def layout_of(sim: StreamSim) -> list[BinLayout]:
    return [BinLayout(b.n_hi, b.single_queue) for b in sim.config.bins]


def _layout_text(layout: Sequence[BinLayout], n_dps: int) -> str:
    bins = ",".join(f"{b.n_hi}:{int(b.single_queue)}" for b in layout)
    return f"dps={n_dps};bins={bins}"


def _parse_layout(text: str) -> tuple[int, list[BinLayout]]:
    items = dict(part.split("=", 1) for part in text.split(";"))
    layout = []
    for spec in items["bins"].split(","):
        n_hi, single = spec.split(":")
        layout.append(BinLayout(int(n_hi), bool(int(single))))
    return int(items["dps"]), layout


def _send_stats(chan: Channel, sim: StreamSim) -> None:
    t = sim.time
    for c in sorted(sim.clients, key=lambda c: c.id):
        o = ClientStats(c.id, t, c.buffer, c.dqs.stall_count, c.video.bitrate, c.dqs.qoe, c.bin)
        chan.send(o)
    for q in sim.queue_stats():
        chan.send(QueueStats(q.queue_id, t, q.served_mbits, q.backlog_mbits, q.drops))


def _action_from(cmd: PolicyCmd, sim: StreamSim) -> dict[int, frozenset[int]]:
    bin_of = {c.id: c.bin for c in sim.clients}
    action: dict[int, set[int]] = {}
    for cid, qid in cmd.assignments:
        if cid not in bin_of:
            raise ValueError(f"unknown client {cid}")
        b = bin_of[cid]
        if qid == queue_id(b, True):
            action.setdefault(b, set()).add(cid)
        elif qid != queue_id(b, False):
            raise ValueError(f"queue {qid} is not in client {cid}'s bin")
    return sim.validate_action({b: frozenset(ids) for b, ids in action.items()})


def _fallback(previous: dict[int, frozenset[int]], sim: StreamSim) -> dict[int, frozenset[int]]:
    """Previous assignment, trimmed or topped up (lowest ids) to stay valid."""
    action = {}
    for b, cfg in enumerate(sim.bins):
        if cfg.single_queue:
            continue
        members = sim.clients_in_bin(b)
        keep = [c for c in sorted(previous.get(b, ())) if c in members]
        rest = [c for c in members if c not in keep]
        need = min(cfg.n_hi, len(members))
        action[b] = frozenset((keep + rest)[:need])
    return action


def serve_environment(
    sim: StreamSim,
    chan: Channel,
    n_dps: int,
    hook: Hook | None = None,
    timeout: float | None = None,
) -> list[StepResult]:
    """Serve ``n_dps`` decision periods to one controller; returns the results."""
    hook = hook or (lambda s, t: None)
    hello = chan.recv()
    if hello is None or hello.msg_type is not MsgType.HELLO:
        raise ProtocolError("expected HELLO")
    hook(sim, 0)
    chan.send(Hello(_layout_text(layout_of(sim), n_dps)))
    _send_stats(chan, sim)
    chan.send(SolicitedResp(hello.seq, -1, "OK"))
    previous: dict[int, frozenset[int]] = {}
    results = []
    t = 0
    while t < n_dps:
        status, detail, ack = "OK", "", -1
        try:
            env = chan.recv(timeout)
        except TimeoutError:
            env = None
            status, detail = "ERROR", "timeout"
        if env is not None and env.msg_type is MsgType.HELLO:
            raise ProtocolError("unexpected HELLO", env.seq)
        if env is not None and not isinstance(env.payload, PolicyCmd):
            chan.send(ErrorMsg(env.seq, f"unexpected {env.msg_type.value}"))
            continue
        if env is not None:
            ack = env.seq
            if env.payload.dp_index != t:
                # a late command for a DP that already ran
                chan.send(ErrorMsg(env.seq, f"stale command for DP {env.payload.dp_index}"))
                continue
            try:
                action = _action_from(env.payload, sim)
            except ValueError as exc:
                status, detail = "ERROR", str(exc)
        elif status == "OK":
            return results  # controller hung up
        if status == "ERROR":
            action = _fallback(previous, sim)
        sim.begin_dp(action)
        for sec in range(sim.config.seconds_per_dp):
            sim.advance_second()
            if sec < sim.config.seconds_per_dp - 1:
                _send_stats(chan, sim)
        results.append(sim.end_dp())
        hook(sim, t + 1)
        _send_stats(chan, sim)
        chan.send(SolicitedResp(ack, t, status, detail))
        previous = action
        t += 1
    return results


# -- controller side -------------------------------------------------------------------


@dataclass
class ControllerLog:
    commands: list[PolicyCmd]
    statuses: list[str]
    stats_per_dp: list[dict[int, int]]  # client id -> CLIENT_STATS count


def _assignments(action: dict[int, frozenset[int]], clients: dict[int, ClientStats], layout) -> tuple:
    out = []
    for cid in sorted(clients):
        b = clients[cid].bin
        high = layout[b].single_queue or cid in action.get(b, ())
        out.append((cid, queue_id(b, high)))
    return tuple(out)


def run_controller(
    policy,
    chan: Channel,
    rng: np.random.Generator,
    kernel=None,
    delay: Callable[[int], float] | None = None,
) -> ControllerLog:
    """Drive an environment with ``policy``; the scheduler mirrors the
    in-process harness so both paths make identical decisions."""
    hello_seq = chan.send(Hello())
    latest: dict[int, ClientStats] = {}
    counts: dict[int, int] = {}
    n_dps, layout = None, None
    log_ = ControllerLog([], [], [])

    def pump() -> SolicitedResp:
        while True:
            env = chan.recv()
            if env is None:
                raise ProtocolError("environment closed the connection")
            p = env.payload
            if isinstance(p, ClientStats):
                latest[p.client_id] = p
                counts[p.client_id] = counts.get(p.client_id, 0) + 1
            elif isinstance(p, SolicitedResp):
                return p
            elif isinstance(p, Hello):
                nonlocal n_dps, layout
                n_dps, layout = _parse_layout(p.info)
            elif isinstance(p, ErrorMsg):
                log.warning("environment reported: %s (seq %d)", p.reason, p.offending_seq)

    resp = pump()
    if resp.ack_seq != hello_seq or layout is None:
        raise ProtocolError("bad handshake")
    scheduler = Scheduler(policy, layout, rng, kernel)
    for t in range(n_dps):
        now = max(s.sim_time for s in latest.values())
        current = {cid: s for cid, s in latest.items() if s.sim_time == now}
        obs = [ClientObs(cid, s.buffer, s.stall_count, s.qoe) for cid, s in sorted(current.items())]
        action = scheduler.decide(obs, {cid: s.bin for cid, s in current.items()}, t)
        if delay is not None:
            threading.Event().wait(delay(t))
        cmd = PolicyCmd(t, _assignments(action, current, layout))
        counts.clear()
        chan.send(cmd)
        log_.commands.append(cmd)
        resp = pump()
        log_.statuses.append(resp.status)
        log_.stats_per_dp.append(dict(counts))
    return log_


def run_over_socketpair(
    sim: StreamSim,
    policy,
    n_dps: int,
    rng: np.random.Generator,
    hook: Hook | None = None,
    kernel=None,
    timeout: float | None = None,
    delay: Callable[[int], float] | None = None,
) -> tuple[list[StepResult], ControllerLog]:
    """Environment in a thread, controller in the caller, joined by a socketpair."""
    a, b = socket.socketpair()
    env_chan, ctl_chan = Channel(a), Channel(b)
    out: dict = {}

    def serve():
        try:
            out["results"] = serve_environment(sim, env_chan, n_dps, hook, timeout)
        except BaseException as exc:  # surfaced in the caller
            out["error"] = exc
        finally:
            a.shutdown(socket.SHUT_WR)

    thread = threading.Thread(target=serve, daemon=True)
    thread.start()
    try:
        ctl_log = run_controller(policy, ctl_chan, rng, kernel, delay)
    except ProtocolError:
        thread.join()
        # a failure on the environment side is the root cause
        if "error" in out:
            raise out["error"] from None
        raise
    finally:
        b.close()
        thread.join()
        a.close()
    if "error" in out:
        raise out["error"]
    return out["results"], ctl_log
