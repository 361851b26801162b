"""Stall-driven QoE state machine.

QoE decays along linear ramps while the player is initially buffering or
stalled, and recovers towards the ceiling along a raised cosine once playback
resumes. Every stall makes the next decay steeper and the next recovery
slower.
"""

from __future__ import annotations

import enum
import math
from dataclasses import dataclass


class Phase(str, enum.Enum):
    INITIAL_BUFFERING = "initial_buffering"
    PLAYING = "playing"
    STALLED = "stalled"


@dataclass(frozen=True)
class DqsParams:
    q_max: float = 5.0
    q_min: float = 1.0
    r_stall: float = 0.15
    kappa: float = 0.5
    r_init: float = 0.05
    t_recover0: float = 30.0
    recover_growth: float = 1.0

    def validate(self) -> None:
        if not self.q_min < self.q_max:
            raise ValueError(f"q_min ({self.q_min}) must be below q_max ({self.q_max})")
        for name in ("r_stall", "kappa", "r_init", "t_recover0", "recover_growth"):
            value = getattr(self, name)
            if not (value > 0 and math.isfinite(value)):
                raise ValueError(f"{name} must be positive and finite, got {value}")
        if not self.r_init < self.r_stall:
            raise ValueError("initial-buffering decay must be slower than stall decay")

    def recovery_time(self, stalls: int) -> float:
        return self.t_recover0 * (1.0 + self.recover_growth * stalls)

    def stall_rate(self, stalls: int) -> float:
        """Decay rate during the ``stalls``-th stall (1-based)."""
        return self.r_stall * (1.0 + self.kappa * (stalls - 1))


class DqsTracker:
    """Mutable per-client tracker.

    The simulator drives one tracker per client through :meth:`advance`; the
    module-level :func:`dqs_step` offers the same transition as a pure
    function.
    """

    __slots__ = ("params", "phase", "qoe", "stall_count", "recovery_anchor", "phase_elapsed")

    def __init__(self, params: DqsParams):
        self.params = params
        self.phase = Phase.INITIAL_BUFFERING
        self.qoe = params.q_max
        self.stall_count = 0
        self.recovery_anchor = params.q_max
        self.phase_elapsed = 0.0

    def copy(self) -> "DqsTracker":
        other = DqsTracker.__new__(DqsTracker)
        other.params = self.params
        other.phase = self.phase
        other.qoe = self.qoe
        other.stall_count = self.stall_count
        other.recovery_anchor = self.recovery_anchor
        other.phase_elapsed = self.phase_elapsed
        return other

    def enter(self, phase: Phase) -> None:
        """Switch phase without letting time pass."""
        phase = Phase(phase)
        if phase is self.phase:
            return
        if phase is Phase.STALLED and self.phase is Phase.PLAYING:
            self.stall_count += 1
        if phase is Phase.PLAYING:
            self.recovery_anchor = self.qoe
        self.phase = phase
        self.phase_elapsed = 0.0

    def advance(self, event: Phase, dt: float) -> None:
        if not dt > 0:
            raise ValueError(f"dt must be positive, got {dt}")
        self.enter(event)
        p = self.params
        if self.phase is Phase.PLAYING:
            horizon = p.recovery_time(self.stall_count)
            frac = min(self.phase_elapsed + dt, horizon) / horizon
            anchor = self.recovery_anchor
            self.qoe = anchor + (p.q_max - anchor) * 0.5 * (1.0 - math.cos(math.pi * frac))
        elif self.phase is Phase.STALLED:
            self.qoe = max(p.q_min, self.qoe - p.stall_rate(self.stall_count) * dt)
        else:
            self.qoe = max(p.q_min, self.qoe - p.r_init * dt)
        self.phase_elapsed += dt

    def __repr__(self) -> str:
        return (
            f"DqsTracker(phase={self.phase.value}, qoe={self.qoe:.6f}, "
            f"stall_count={self.stall_count}, phase_elapsed={self.phase_elapsed:.3f})"
        )


def dqs_init(params: DqsParams | None = None) -> DqsTracker:
    params = params or DqsParams()
    params.validate()
    return DqsTracker(params)


def dqs_step(tracker: DqsTracker, event: Phase | str, dt: float) -> DqsTracker:
    """Return a new tracker advanced by ``dt`` seconds under ``event``."""
    nxt = tracker.copy()
    nxt.advance(Phase(event), dt)
    return nxt


def dqs_reset_for_new_video(tracker: DqsTracker) -> DqsTracker:
    return DqsTracker(tracker.params)

