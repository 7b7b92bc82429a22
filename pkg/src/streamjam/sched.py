"""Simulated real-time scheduler for chunked streaming generation.

Answers whether a (t_f, k) operating point can run against a wall clock with a
given latency profile, two ways: a closed-form feasibility predicate and a
discrete-event simulation of the chunk pipeline.

Timing model. Playback consumes frames at 50 Hz, frame m plays during
[m/50, (m+1)/50). Chunk j covers output frames [j*k, (j+1)*k) and must be
delivered before playback reaches its first frame:

    request_j   = (j*k + t_f) / 50      last conditioning input has arrived
    start_j     = max(request_j, done_{j-1})
    done_j      = start_j + t_gen(k)    generator occupancy, gates chunk j+1
    delivered_j = start_j + tau_sys + jitter_j
    deadline_j  = j*k / 50
    underrun_j  iff delivered_j > deadline_j

Generation compute is prefix-incremental (the cache absorbs input as it
streams), so a chunk's delivery is limited by input availability and the
fixed system latency, not by its own t_gen; t_gen(k) only serializes chunk
starts and therefore shows up as a throughput condition. Negative request
times are fine: they are the pre-roll where t_f < 0 lets generation run
ahead of playback.

All event arithmetic uses exact rationals. Float quantities (jitter draws,
k^alpha for non-integer alpha) enter as the exact binary value of the double
via Fraction(float(x)), so trace comparisons and reruns are exact.
"""

from __future__ import annotations

import csv
import json
import math
from dataclasses import dataclass, field
from fractions import Fraction
from typing import Optional, Sequence, Union

import numpy as np

from .grids import FRAME_RATE
from .streams import StreamSpec

Seconds = Union[int, float, Fraction]

# default sweep grid, in seconds
DEFAULT_T_F_GRID = (-4.0, -2.0, -1.0, -0.4, -0.2, 0.0, 0.2, 0.4, 1.0, 2.0, 4.0)
DEFAULT_K_GRID = (0.04, 0.1, 0.2, 1.0, 2.0)


class SchedError(ValueError):
    pass


def _frac(x: Seconds, name: str) -> Fraction:
    if isinstance(x, Fraction):
        return x
    if isinstance(x, bool) or not isinstance(x, (int, float)):
        raise SchedError(f"{name} must be a number, got {x!r}")
    if isinstance(x, float) and not math.isfinite(x):
        raise SchedError(f"{name} must be finite, got {x!r}")
    return Fraction(x)


@dataclass(frozen=True)
class LatencyProfile:
    """System latency budget plus a wall-time model for chunk generation.

    tau_sys is the fixed input-to-output latency of everything around the
    model (sensing, buffering, rendering). tau_jitter is the variability
    budget that feasible() reserves on top of it. t_gen(k) = a + b * k^alpha
    in seconds of generator occupancy per chunk of k seconds.

    The simulated jitter distribution is a separate knob from the budget:
    `jitter` is "none" or "uniform" (over (0, jitter_width]), and
    jitter_width defaults to tau_jitter.
    """

    tau_sys: Seconds
    tau_jitter: Seconds = 0
    a: Seconds = 0
    b: Seconds = 0
    alpha: float = 1.0
    jitter: str = "uniform"
    jitter_width: Optional[Seconds] = None
    seed: int = 0

    def __post_init__(self):
        for name in ("tau_sys", "tau_jitter", "a", "b"):
            object.__setattr__(self, name, _frac(getattr(self, name), name))
        if self.tau_sys < 0 or self.tau_jitter < 0:
            raise SchedError("tau_sys and tau_jitter must be >= 0")
        if self.a < 0 or self.b < 0:
            raise SchedError("gen-time coefficients a, b must be >= 0")
        if not isinstance(self.alpha, (int, float)) or not math.isfinite(self.alpha) or self.alpha < 0:
            raise SchedError(f"alpha must be a finite number >= 0, got {self.alpha!r}")
        if self.jitter not in ("none", "uniform"):
            raise SchedError(f"unknown jitter kind {self.jitter!r}")
        width = self.tau_jitter if self.jitter_width is None else _frac(self.jitter_width, "jitter_width")
        if width < 0:
            raise SchedError("jitter_width must be >= 0")
        object.__setattr__(self, "jitter_width", width)

    def t_gen(self, k_frames: int) -> Fraction:
        """Wall seconds of generator occupancy for a chunk of k frames."""
        if k_frames < 1:
            raise SchedError(f"k must be >= 1 frame, got {k_frames}")
        k_sec = Fraction(k_frames, FRAME_RATE)
        if self.alpha == 1.0:
            power = k_sec
        elif self.alpha == 0.0:
            power = Fraction(1)
        else:
            # irrational in general; pin the exact double so reruns agree
            power = Fraction(float(k_sec) ** float(self.alpha))
        return self.a + self.b * power


@dataclass(frozen=True)
class Feasibility:
    feasible: bool
    latency_margin: Fraction  # lambda - tau_sys - tau_jitter
    throughput_margin: Fraction  # k seconds - t_gen(k)
    lead: Fraction  # lambda = -t_f / 50
    t_gen: Fraction

    def as_dict(self) -> dict:
        return {
            "feasible": self.feasible,
            "latency_margin": float(self.latency_margin),
            "throughput_margin": float(self.throughput_margin),
            "lead_seconds": float(self.lead),
            "t_gen_seconds": float(self.t_gen),
        }


def feasible(spec: StreamSpec, profile: LatencyProfile) -> Feasibility:
    """Closed-form check: lead covers tau_sys + tau_jitter and t_gen(k) <= k."""
    lead = spec.lead_time_seconds()
    t_gen = profile.t_gen(spec.k)
    lat = lead - profile.tau_sys - profile.tau_jitter
    thr = Fraction(spec.k, FRAME_RATE) - t_gen
    return Feasibility(lat >= 0 and thr >= 0, lat, thr, lead, t_gen)


@dataclass(frozen=True)
class ChunkEvent:
    chunk: int
    request: Fraction
    start: Fraction
    done: Fraction
    delivered: Fraction
    deadline: Fraction

    @property
    def slack(self) -> Fraction:
        return self.deadline - self.delivered

    @property
    def underrun(self) -> bool:
        return self.delivered > self.deadline


@dataclass(frozen=True)
class SimTrace:
    spec: StreamSpec
    profile: LatencyProfile
    events: list

    @property
    def n_chunks(self) -> int:
        return len(self.events)

    @property
    def underruns(self) -> int:
        return sum(1 for e in self.events if e.underrun)

    @property
    def underrun_rate(self) -> float:
        return self.underruns / len(self.events) if self.events else 0.0

    @property
    def max_lateness(self) -> Fraction:
        worst = max((-e.slack for e in self.events), default=Fraction(0))
        return max(worst, Fraction(0))

    @property
    def update_rate_hz(self) -> Fraction:
        return Fraction(FRAME_RATE, self.spec.k)

    def summary(self) -> dict:
        return {
            "t_f_frames": self.spec.t_f,
            "k_frames": self.spec.k,
            "chunks": self.n_chunks,
            "underruns": self.underruns,
            "underrun_rate": self.underrun_rate,
            "max_lateness_seconds": float(self.max_lateness),
            "update_rate_hz": float(self.update_rate_hz),
        }


def _draw_jitter(profile: LatencyProfile, rng: np.random.Generator) -> Fraction:
    if profile.jitter == "none" or profile.jitter_width == 0:
        return Fraction(0)
    # uniform over (0, width]: width * (1 - U[0,1)), pinned to the exact double
    u = rng.random()
    return profile.jitter_width * (1 - Fraction(u))


def simulate(
    spec: StreamSpec,
    profile: LatencyProfile,
    n_chunks: int,
    seed: Optional[int] = None,
) -> SimTrace:
    """Run the chunk pipeline for n_chunks and record every event time."""
    if n_chunks < 1:
        raise SchedError(f"n_chunks must be >= 1, got {n_chunks}")
    rng = np.random.default_rng(profile.seed if seed is None else seed)
    t_gen = profile.t_gen(spec.k)
    events = []
    prev_done: Optional[Fraction] = None
    for j in range(n_chunks):
        request = Fraction(j * spec.k + spec.t_f, FRAME_RATE)
        start = request if prev_done is None else max(request, prev_done)
        done = start + t_gen
        delivered = start + profile.tau_sys + _draw_jitter(profile, rng)
        events.append(ChunkEvent(j, request, start, done, delivered, Fraction(j * spec.k, FRAME_RATE)))
        prev_done = done
    return SimTrace(spec, profile, events)


def underrun_rate_closed_form(spec: StreamSpec, profile: LatencyProfile) -> float:
    """Steady-state underrun probability for uniform delivery jitter.

    Valid when t_gen(k) <= k seconds (chunk starts stay input-bound, draws
    are independent); with a throughput violation the backlog grows without
    bound and the long-run rate is 1 regardless of jitter.
    """
    margin = spec.lead_time_seconds() - profile.tau_sys
    if profile.t_gen(spec.k) > Fraction(spec.k, FRAME_RATE):
        return 1.0
    width = profile.jitter_width if profile.jitter != "none" else Fraction(0)
    if width == 0:
        return 0.0 if margin >= 0 else 1.0
    return float(min(Fraction(1), max(Fraction(0), 1 - margin / width)))


def sweep_feasibility(
    profile: LatencyProfile,
    t_f_grid_seconds: Sequence[Seconds] = DEFAULT_T_F_GRID,
    k_grid_seconds: Sequence[Seconds] = DEFAULT_K_GRID,
) -> list:
    """Evaluate feasible() on a (t_f, k) grid; returns one dict per cell."""
    cells = []
    for t_f_s in t_f_grid_seconds:
        for k_s in k_grid_seconds:
            sp = StreamSpec.from_seconds(float(t_f_s), float(k_s))
            rep = feasible(sp, profile)
            cell = {"t_f_seconds": float(t_f_s), "k_seconds": float(k_s),
                    "t_f_frames": sp.t_f, "k_frames": sp.k}
            cell.update(rep.as_dict())
            cells.append(cell)
    return cells


_SWEEP_COLUMNS = ("t_f_seconds", "k_seconds", "t_f_frames", "k_frames",
                  "feasible", "latency_margin", "throughput_margin",
                  "lead_seconds", "t_gen_seconds")

_TRACE_COLUMNS = ("chunk", "request", "start", "done", "delivered",
                  "deadline", "slack", "underrun")


def sweep_to_csv(cells: Sequence[dict], path) -> None:
    with open(path, "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(_SWEEP_COLUMNS)
        for c in cells:
            w.writerow([repr(c[k]) if isinstance(c[k], float) else c[k] for k in _SWEEP_COLUMNS])


def trace_to_csv(trace: SimTrace, path) -> None:
    with open(path, "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(_TRACE_COLUMNS)
        for e in trace.events:
            w.writerow([e.chunk, repr(float(e.request)), repr(float(e.start)),
                        repr(float(e.done)), repr(float(e.delivered)),
                        repr(float(e.deadline)), repr(float(e.slack)), int(e.underrun)])


def trace_to_json(trace: SimTrace, path) -> None:
    with open(path, "w") as f:
        json.dump(trace.summary(), f, indent=2, sort_keys=True)
        f.write("\n")
