"""Discrete-time model of an access point serving video clients.

Each bin holds a high- and a low-priority queue with fixed bandwidth. Once per
decision period (DP) the controller picks which clients of a bin enter the
high-priority queue; inside a queue the bandwidth is split among its flows by
symmetric Dirichlet weights drawn at the start of the DP. Client buffers,
playback and QoE are integrated on a fixed substep grid.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field, replace
from typing import Iterable, Mapping, NamedTuple

import numpy as np

from .dqs import DqsParams, DqsTracker, Phase, dqs_init, dqs_reset_for_new_video
from .mdp import ClientObs

EPS = 1e-9
STATS_DECIMALS = 6


@dataclass(frozen=True)
class TruncNormal:
    """Normal(mean, variance) restricted to ``[low, high]``."""

    mean: float
    var: float
    low: float
    high: float

    def __post_init__(self):
        if self.var < 0 or self.low > self.high:
            raise ValueError(f"bad truncated normal {self}")

    def sample(self, rng: np.random.Generator) -> float:
        if self.var == 0:
            return min(max(self.mean, self.low), self.high)
        sd = math.sqrt(self.var)
        while True:
            x = rng.normal(self.mean, sd)
            if self.low <= x <= self.high:
                return float(x)


@dataclass(frozen=True)
class VideoSpec:
    bitrate: float  # Mbps
    length: float  # seconds

    def __post_init__(self):
        if not (self.bitrate > 0 and self.length > 0):
            raise ValueError(f"invalid video {self}")


@dataclass(frozen=True)
class BinConfig:
    hi_bw: float
    lo_bw: float
    n_hi: int = 2
    single_queue: bool = False

    def __post_init__(self):
        if not (self.hi_bw > self.lo_bw > 0):
            raise ValueError("need hi_bw > lo_bw > 0")
        if self.n_hi < 1:
            raise ValueError("n_hi must be at least 1")

    def scaled(self, factor: float) -> "BinConfig":
        return replace(self, hi_bw=self.hi_bw * factor, lo_bw=self.lo_bw * factor)


GOOD_BIN = BinConfig(hi_bw=11.0, lo_bw=4.3, n_hi=2)
# one queue carrying the combined bandwidth of both priority queues
VANILLA_BIN = BinConfig(hi_bw=11.0, lo_bw=4.3, n_hi=2, single_queue=True)


@dataclass(frozen=True)
class SimConfig:
    bins: tuple[BinConfig, ...] = (GOOD_BIN,)
    n_clients: int = 6
    max_clients: int = 9
    dp_seconds: float = 10.0
    bitrate_dist: TruncNormal = TruncNormal(2.9, 10.0, 0.2, 10.0)
    length_dist: TruncNormal = TruncNormal(600.0, 50.0, 60.0, 1200.0)
    rebuffer_threshold: float = 10.0
    buffer_cap: float = 20.0
    dirichlet_alpha: float = 1.0
    substep: float = 0.1
    bad_scale: float = 0.4
    dqs: DqsParams = field(default_factory=DqsParams)
    seed: int = 0

    def __post_init__(self):
        if not self.bins:
            raise ValueError("at least one bin is required")
        ratio = self.dp_seconds / self.substep
        if abs(ratio - round(ratio)) > 1e-9:
            raise ValueError("dp_seconds must be a multiple of substep")
        if abs(1.0 / self.substep - round(1.0 / self.substep)) > 1e-9:
            raise ValueError("substep must divide one second")
        if self.rebuffer_threshold > self.buffer_cap:
            raise ValueError("rebuffer_threshold must not exceed buffer_cap")
        if not 1 <= self.n_clients <= self.max_clients:
            raise ValueError("n_clients out of range")
        if self.dirichlet_alpha <= 0:
            raise ValueError("dirichlet_alpha must be positive")
        self.dqs.validate()

    @property
    def substeps_per_second(self) -> int:
        return int(round(1.0 / self.substep))

    @property
    def seconds_per_dp(self) -> int:
        return int(round(self.dp_seconds))


def sample_video(rng: np.random.Generator, config: SimConfig) -> VideoSpec:
    bitrate = config.bitrate_dist.sample(rng)
    length = config.length_dist.sample(rng)
    return VideoSpec(bitrate, length)


class ClientSim:
    __slots__ = (
        "id", "bin", "buffer", "playhead", "video", "dqs", "mode",
        "cumulative_stall", "rate", "queue", "served", "dp_served", "dp_stall",
        "stall_start",
    )

    def __init__(self, client_id: int, video: VideoSpec, params: DqsParams, bin_index: int = 0):
        self.id = client_id
        self.bin = bin_index
        self.buffer = 0.0
        self.playhead = 0.0
        self.video = video
        self.dqs: DqsTracker = dqs_init(params)
        self.mode = Phase.INITIAL_BUFFERING
        self.cumulative_stall = 0.0
        self.rate = 0.0  # Mbps granted for the current DP
        self.queue = -1
        self.served = 0.0  # cumulative Mbit accepted into the buffer
        self.dp_served = 0.0
        self.dp_stall = 0.0
        self.stall_start: float | None = None


class TranscriptRow(NamedTuple):
    dp_index: int
    client_id: int
    buffer: float
    stall_count: int
    qoe: float
    queue: int
    bin: int
    served_mbits: float


class StallInterval(NamedTuple):
    client_id: int
    start: float
    end: float


class QueueStat(NamedTuple):
    queue_id: int
    served_mbits: float
    backlog_mbits: float
    drops: float


@dataclass
class StepResult:
    dp_index: int
    qoe: dict[int, float]
    rows: list[TranscriptRow]
    stalls: list[StallInterval]


def queue_id(bin_index: int, high: bool) -> int:
    return 2 * bin_index + (0 if high else 1)


def normalize_action(action) -> dict[int, frozenset[int]]:
    """Accept either ``{bin: ids}`` or a bare id collection for bin 0."""
    if isinstance(action, Mapping):
        return {int(b): frozenset(int(c) for c in ids) for b, ids in action.items()}
    return {0: frozenset(int(c) for c in action)}


class StreamSim:
    """The environment. Owns its clients and its random stream."""

    def __init__(self, config: SimConfig | None = None, rng: np.random.Generator | None = None):
        self.config = config or SimConfig()
        self.rng = rng if rng is not None else np.random.default_rng(self.config.seed)
        self.bins: list[BinConfig] = list(self.config.bins)
        self.bin_quality: list[str] = ["good"] * len(self.bins)
        self.clients: list[ClientSim] = []
        self.next_id = 0
        self.time = 0.0
        self.dp_index = 0
        self.queue_served: dict[int, float] = {}
        self.queue_drops: dict[int, float] = {}
        self._in_dp = False
        self._dp_elapsed = 0
        self._dp_stalls: list[StallInterval] = []
        for _ in range(self.config.n_clients):
            self._add_client(0)

    # -- population -------------------------------------------------------

    def _add_client(self, bin_index: int) -> ClientSim:
        client = ClientSim(self.next_id, sample_video(self.rng, self.config), self.config.dqs, bin_index)
        self.next_id += 1
        self.clients.append(client)
        return client

    def set_population(self, n: int) -> None:
        if self._in_dp:
            raise RuntimeError("cannot change population inside a DP")
        if not 1 <= n <= self.config.max_clients:
            raise ValueError(f"population {n} outside [1, {self.config.max_clients}]")
        self.clients.sort(key=lambda c: c.id)
        while len(self.clients) > n:
            self.clients.pop()
        while len(self.clients) < n:
            self._add_client(0)

    def assign_bins(self, mapping: Mapping[int, int]) -> None:
        """Move clients (by id) between bins."""
        by_id = {c.id: c for c in self.clients}
        for cid, b in mapping.items():
            if not 0 <= b < len(self.bins):
                raise ValueError(f"unknown bin {b}")
            by_id[cid].bin = b

    def set_bin_quality(self, bin_index: int, quality: str) -> None:
        if not 0 <= bin_index < len(self.bins):
            raise ValueError(f"unknown bin {bin_index}")
        base = self.config.bins[bin_index]
        if quality == "good":
            self.bins[bin_index] = base
        elif quality == "bad":
            self.bins[bin_index] = base.scaled(self.config.bad_scale)
        else:
            raise ValueError(f"quality must be 'good' or 'bad', got {quality!r}")
        self.bin_quality[bin_index] = quality

    # -- observation ------------------------------------------------------

    def observe(self, bin_index: int | None = None) -> list[ClientObs]:
        """Per-client (buffer, stall count, QoE), at statistics precision."""
        return [
            ClientObs(
                c.id,
                round(c.buffer, STATS_DECIMALS),
                c.dqs.stall_count,
                round(c.dqs.qoe, STATS_DECIMALS),
            )
            for c in sorted(self.clients, key=lambda c: c.id)
            if bin_index is None or c.bin == bin_index
        ]

    def clients_in_bin(self, bin_index: int) -> list[int]:
        return sorted(c.id for c in self.clients if c.bin == bin_index)

    def queue_stats(self) -> list[QueueStat]:
        out = []
        cap = self.config.buffer_cap
        for b, cfg in enumerate(self.bins):
            qids = [queue_id(b, True)] if cfg.single_queue else [queue_id(b, True), queue_id(b, False)]
            for q in qids:
                backlog = sum(
                    max(min(cap, c.video.length - c.playhead) - c.buffer, 0.0) * c.video.bitrate
                    for c in self.clients
                    if c.queue == q
                )
                out.append(QueueStat(q, self.queue_served.get(q, 0.0), backlog, self.queue_drops.get(q, 0.0)))
        return out

    # -- dynamics ---------------------------------------------------------

    def validate_action(self, action) -> dict[int, frozenset[int]]:
        act = normalize_action(action)
        known = {c.id for c in self.clients}
        for b, ids in act.items():
            if not 0 <= b < len(self.bins):
                raise ValueError(f"action names unknown bin {b}")
            unknown = ids - known
            if unknown:
                raise ValueError(f"action names unknown clients {sorted(unknown)}")
        for b, cfg in enumerate(self.bins):
            members = set(self.clients_in_bin(b))
            if cfg.single_queue:
                continue
            ids = act.get(b, frozenset())
            if not ids <= members:
                raise ValueError(f"bin {b} action includes clients outside the bin")
            need = min(cfg.n_hi, len(members))
            if len(ids) != need:
                raise ValueError(f"bin {b} needs exactly {need} high-priority clients, got {len(ids)}")
        return act

    def begin_dp(self, action) -> None:
        if self._in_dp:
            raise RuntimeError("previous DP not finished")
        act = self.validate_action(action)
        alpha = self.config.dirichlet_alpha
        for b, cfg in enumerate(self.bins):
            members = self.clients_in_bin(b)
            if cfg.single_queue:
                queues = [(queue_id(b, True), cfg.hi_bw + cfg.lo_bw, members)]
            else:
                hi = act.get(b, frozenset())
                queues = [
                    (queue_id(b, True), cfg.hi_bw, [c for c in members if c in hi]),
                    (queue_id(b, False), cfg.lo_bw, [c for c in members if c not in hi]),
                ]
            by_id = {c.id: c for c in self.clients}
            for q, bw, flows in queues:
                weights = dirichlet_weights(self.rng, len(flows), alpha)
                for cid, w in zip(flows, weights):
                    client = by_id[cid]
                    client.rate = float(w) * bw
                    client.queue = q
        for c in self.clients:
            c.dp_served = 0.0
            c.dp_stall = 0.0
        self._dp_stalls = []
        self._dp_elapsed = 0
        self._in_dp = True

    def advance_second(self) -> None:
        """Integrate one simulated second of the current DP."""
        if not self._in_dp:
            raise RuntimeError("begin_dp must be called first")
        if self._dp_elapsed >= self.config.seconds_per_dp:
            raise RuntimeError("DP already complete")
        n = self.config.substeps_per_second
        for c in sorted(self.clients, key=lambda c: c.id):
            self._integrate(c, n)
        self._dp_elapsed += 1
        self.time = round(self.time + 1.0, 9)

    def _integrate(self, c: ClientSim, n_sub: int) -> None:
        cfg = self.config
        dt = cfg.substep
        cap = cfg.buffer_cap
        threshold = cfg.rebuffer_threshold
        tracker = c.dqs
        video = c.video
        gain = c.rate * dt / video.bitrate
        served = 0.0
        dropped = 0.0
        t0 = self.time
        for k in range(n_sub):
            mode = c.mode
            tracker.advance(mode, dt)
            if mode is Phase.PLAYING:
                # playback first, then the substep's download, so a full
                # buffer reads as full at the substep boundary
                consumed = dt if c.buffer > dt else c.buffer
                c.buffer -= consumed
                c.playhead += consumed
                if c.buffer <= EPS:
                    c.buffer = 0.0
                    if video.length - c.playhead <= EPS:
                        video = c.video = sample_video(self.rng, cfg)
                        tracker = c.dqs = dqs_reset_for_new_video(tracker)
                        c.playhead = 0.0
                        c.mode = Phase.INITIAL_BUFFERING
                        gain = c.rate * dt / video.bitrate
                    else:
                        c.mode = Phase.STALLED
                        tracker.enter(Phase.STALLED)
                        c.stall_start = t0 + (k + 1) * dt
            room = min(cap, video.length - c.playhead) - c.buffer
            accepted = gain if gain <= room else max(room, 0.0)
            c.buffer += accepted
            served += accepted * video.bitrate
            dropped += (gain - accepted) * video.bitrate
            if mode is not Phase.PLAYING:
                if mode is Phase.STALLED:
                    c.cumulative_stall += dt
                    c.dp_stall += dt
                remaining = video.length - c.playhead
                if c.buffer >= threshold - EPS or c.buffer >= remaining - EPS:
                    if mode is Phase.STALLED:
                        self._close_stall(c, t0 + (k + 1) * dt)
                    c.mode = Phase.PLAYING
                    tracker.enter(Phase.PLAYING)
        c.served += served
        c.dp_served += served
        if c.queue >= 0:
            self.queue_served[c.queue] = self.queue_served.get(c.queue, 0.0) + served
            self.queue_drops[c.queue] = self.queue_drops.get(c.queue, 0.0) + dropped

    def _close_stall(self, c: ClientSim, end: float) -> None:
        start = c.stall_start if c.stall_start is not None else end
        self._dp_stalls.append(StallInterval(c.id, round(start, 9), round(end, 9)))
        c.stall_start = None

    def end_dp(self) -> StepResult:
        if not self._in_dp or self._dp_elapsed != self.config.seconds_per_dp:
            raise RuntimeError("DP not complete")
        end = self.time
        for c in self.clients:
            if c.mode is Phase.STALLED and c.stall_start is not None:
                # split open stalls at the DP boundary
                self._dp_stalls.append(StallInterval(c.id, round(c.stall_start, 9), end))
                c.stall_start = end
        rows = [
            TranscriptRow(
                self.dp_index,
                o.client_id,
                o.buffer,
                o.stalls,
                o.qoe,
                self._client(o.client_id).queue,
                self._client(o.client_id).bin,
                self._client(o.client_id).dp_served,
            )
            for o in self.observe()
        ]
        result = StepResult(self.dp_index, {r.client_id: r.qoe for r in rows}, rows, self._dp_stalls)
        self._in_dp = False
        self.dp_index += 1
        return result

    def step_dp(self, action) -> StepResult:
        self.begin_dp(action)
        for _ in range(self.config.seconds_per_dp):
            self.advance_second()
        return self.end_dp()

    def _client(self, cid: int) -> ClientSim:
        for c in self.clients:
            if c.id == cid:
                return c
        raise KeyError(cid)


def dirichlet_weights(rng: np.random.Generator, k: int, alpha: float) -> np.ndarray:
    if k == 0:
        return np.empty(0)
    if k == 1:
        return np.ones(1)
    return rng.dirichlet(np.full(k, alpha))


TRANSCRIPT_HEADER = ("dp_index", "client_id", "buffer", "stall_count", "qoe", "queue", "bin", "served_mbits")


def format_row(row: TranscriptRow) -> list[str]:
    return [
        str(row.dp_index), str(row.client_id), f"{row.buffer:.6f}", str(row.stall_count),
        f"{row.qoe:.6f}", str(row.queue), str(row.bin), f"{row.served_mbits:.6f}",
    ]


def write_transcript_csv(rows: Iterable[TranscriptRow], path) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(TRANSCRIPT_HEADER)
        for row in rows:
            w.writerow(format_row(row))


def read_transcript_csv(path) -> list[TranscriptRow]:
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        header = next(reader)
        if tuple(header) != TRANSCRIPT_HEADER:
            raise ValueError(f"unexpected transcript header {header}")
        return [
            TranscriptRow(int(r[0]), int(r[1]), float(r[2]), int(r[3]), float(r[4]), int(r[5]), int(r[6]), float(r[7]))
            for r in reader
        ]
