"""Poisson arrivals and the event-driven composition engine.

An :class:`EventStream` holds the arrivals of an intensity-1 Poisson process
on ``[window_lo, window_hi] x [0, horizon]``.  The backward process composes
the slit maps latest-outermost, which makes every tracked point a Markov
chain: at each arrival the point jumps by ``phi_x(F) - F``.  The forward
process composes earliest-outermost and is only used for pictures of the
aggregate boundary.

Random numbers come from numpy's Philox, a counter-based generator keyed by
``(seed, stream_id)``.  The arrival count, positions and times are drawn from
three disjoint counter ranges of that key, so a stream is fully determined by
its key regardless of which parts a caller needs or how work is scheduled.
"""

from __future__ import annotations

import hashlib
import json
import math
from dataclasses import asdict, dataclass, field, replace
from enum import Enum
from typing import Iterator, NamedTuple, Sequence

import numpy as np
from numba import njit

from .conformal import _derivative, _increment, _window_drift

HALF_PI = 0.5 * math.pi
NUDGE = 1e-12
# Refuse to materialise streams beyond this many expected arrivals (~1.6 GB).
MAX_EXPECTED_EVENTS = 1e8

_MASK64 = (1 << 64) - 1
_SUB_COUNT, _SUB_POSITIONS, _SUB_TIMES = 0, 1, 2


class CapacityError(MemoryError):
    """Raised when a stream or grid would exceed the configured memory budget."""


class DriftMode(str, Enum):
    ASYMPTOTIC = "asymptotic"
    EXACT = "exact_quadrature"


class Arrival(NamedTuple):
    x: float
    t: float


def _generator(seed: int, stream_id: int, substream: int) -> np.random.Generator:
    key = ((seed & _MASK64) << 64) | (stream_id & _MASK64)
    return np.random.Generator(np.random.Philox(key=key, counter=substream << 192))


@dataclass(frozen=True, eq=False)
class EventStream:
    window_lo: float
    window_hi: float
    horizon: float
    xs: np.ndarray
    ts: np.ndarray | None
    seed: int = 0
    stream_id: int = 0

    def __len__(self) -> int:
        return int(self.xs.shape[0])

    def __iter__(self) -> Iterator[Arrival]:
        if self.ts is None:
            raise ValueError("stream was generated without arrival times")
        for x, t in zip(self.xs.tolist(), self.ts.tolist()):
            yield Arrival(x, t)

    def __getitem__(self, k: int) -> Arrival:
        if self.ts is None:
            raise ValueError("stream was generated without arrival times")
        return Arrival(float(self.xs[k]), float(self.ts[k]))

    @property
    def arrivals(self) -> list[Arrival]:
        return list(self)

    @classmethod
    def from_arrivals(cls, arrivals: Sequence[tuple[float, float]], window_lo: float,
                      window_hi: float, horizon: float) -> "EventStream":
        """Build a stream from explicit ``(x, t)`` pairs, sorted by time."""
        arr = sorted((float(t), float(x)) for x, t in arrivals)
        ts = np.array([a[0] for a in arr], dtype=np.float64)
        xs = np.array([a[1] for a in arr], dtype=np.float64)
        if len(arr) and (xs.min() < window_lo or xs.max() > window_hi or ts[0] < 0 or ts[-1] > horizon):
            raise ValueError("arrival outside the stream window")
        return cls(float(window_lo), float(window_hi), float(horizon), xs, ts)

    def restrict(self, lo: float, hi: float) -> "EventStream":
        """Sub-stream of arrivals with ``lo <= x <= hi`` (same randomness)."""
        keep = (self.xs >= lo) & (self.xs <= hi)
        ts = None if self.ts is None else self.ts[keep]
        return replace(self, window_lo=float(lo), window_hi=float(hi), xs=self.xs[keep], ts=ts)


def sample_arrivals(window_lo: float, window_hi: float, horizon: float, seed: int,
                    stream_id: int = 0, *, with_times: bool = True,
                    max_expected: float = MAX_EXPECTED_EVENTS) -> EventStream:
    """Draw the Poisson arrivals in ``[window_lo, window_hi] x [0, horizon]``.

    The count is Poisson with mean equal to the area, positions are i.i.d.
    uniform and times are the ordered uniforms on ``[0, horizon]``, produced in
    increasing order from normalised exponential spacings.  ``with_times=False``
    skips the times; positions and count are unaffected.
    """
    if not window_lo < window_hi:
        raise ValueError("window_lo must be < window_hi")
    if not horizon >= 0.0:
        raise ValueError("horizon must be >= 0")
    area = (window_hi - window_lo) * horizon
    if area > max_expected:
        raise CapacityError(f"expected {area:.3g} arrivals exceeds budget {max_expected:.3g}")
    n = int(_generator(seed, stream_id, _SUB_COUNT).poisson(area)) if area > 0 else 0
    xs = window_lo + (window_hi - window_lo) * _generator(seed, stream_id, _SUB_POSITIONS).random(n)
    ts = None
    if with_times:
        gaps = _generator(seed, stream_id, _SUB_TIMES).standard_exponential(n + 1)
        cum = np.cumsum(gaps)
        ts = horizon * (cum[:n] / cum[n])
    return EventStream(float(window_lo), float(window_hi), float(horizon), xs, ts, seed, stream_id)


# ---------------------------------------------------------------------------
# tracked points


@dataclass(frozen=True)
class TrackedPoint:
    initial: complex
    value: complex
    deriv: complex = 1.0 + 0.0j
    compensator: complex = 0.0j
    last_time: float = 0.0

    @classmethod
    def start(cls, z: complex) -> "TrackedPoint":
        z = complex(z)
        if z.imag < 0.0:
            raise ValueError(f"initial point {z!r} below the real axis")
        return cls(initial=z, value=z)

    @property
    def has_derivative(self) -> bool:
        return self.initial.imag > 0.0


@dataclass(frozen=True)
class Snapshot:
    time: float
    points: tuple[TrackedPoint, ...]
    nudges: int = 0


@njit(cache=True, nogil=True)
def _evolve_kernel(xs, ts, plo, phi, value, deriv, comp, track, exact, t0, checkpoints,
                   out_v, out_d, out_c):
    npts = value.shape[0]
    ncp = checkpoints.shape[0]
    timed = ts.shape[0] == xs.shape[0]
    nudges = 0
    last = t0
    dt = 0.0
    ci = 0
    for k in range(xs.shape[0]):
        if timed:
            tk = ts[k]
            if tk <= t0:
                continue
            while ci < ncp and tk > checkpoints[ci]:
                c = checkpoints[ci]
                for p in range(npts):
                    if exact:
                        comp[p] += (c - last) * _window_drift(value[p], plo[p], phi[p])
                    out_v[ci, p] = value[p]
                    out_d[ci, p] = deriv[p]
                    out_c[ci, p] = comp[p]
                last = c
                ci += 1
            if ci == ncp:
                break
            dt = tk - last
            last = tk
        x = xs[k]
        for p in range(npts):
            v = value[p]
            if exact:
                comp[p] += dt * _window_drift(v, plo[p], phi[p])
            if x < plo[p] or x > phi[p]:
                continue
            w = v - x
            if w.real == 0.0 and w.imag == 0.0:
                v = complex(v.real, v.imag + 1e-12)
                w = v - x
                nudges += 1
            if track[p]:
                deriv[p] = deriv[p] * _derivative(w)
            value[p] = v + _increment(w)
    while ci < ncp:
        c = checkpoints[ci]
        for p in range(npts):
            if exact:
                comp[p] += (c - last) * _window_drift(value[p], plo[p], phi[p])
            out_v[ci, p] = value[p]
            out_d[ci, p] = deriv[p]
            out_c[ci, p] = comp[p]
        last = c
        ci += 1
    return nudges


@njit(cache=True, nogil=True)
def _forward_kernel(xs, count, grid):
    out = grid.copy()
    for p in range(grid.shape[0]):
        v = out[p]
        for k in range(count - 1, -1, -1):
            w = v - xs[k]
            if w.real == 0.0 and w.imag == 0.0:
                v = complex(v.real, v.imag + 1e-12)
                w = v - xs[k]
            v = v + _increment(w)
        out[p] = v
    return out


@dataclass
class PointBatch:
    """Array form of a set of tracked points, evolved in place by the kernel."""

    initial: np.ndarray
    lo: np.ndarray
    hi: np.ndarray
    value: np.ndarray = field(init=False)
    deriv: np.ndarray = field(init=False)
    comp: np.ndarray = field(init=False)
    track: np.ndarray = field(init=False)

    def __post_init__(self):
        self.initial = np.ascontiguousarray(self.initial, dtype=np.complex128)
        n = self.initial.shape[0]
        self.lo = np.ascontiguousarray(np.broadcast_to(self.lo, n), dtype=np.float64)
        self.hi = np.ascontiguousarray(np.broadcast_to(self.hi, n), dtype=np.float64)
        if np.any(self.initial.imag < 0):
            raise ValueError("tracked points must lie in the closed upper half-plane")
        self.value = self.initial.copy()
        self.deriv = np.ones(n, dtype=np.complex128)
        self.comp = np.zeros(n, dtype=np.complex128)
        self.track = self.initial.imag > 0


@dataclass
class RunResult:
    """Per-checkpoint arrays of shape ``(n_checkpoints, n_points)``."""

    checkpoints: np.ndarray
    initial: np.ndarray
    value: np.ndarray
    deriv: np.ndarray
    compensator: np.ndarray
    nudges: int
    n_events: int

    def fluctuation(self, drift_mode: DriftMode) -> np.ndarray:
        if DriftMode(drift_mode) is DriftMode.EXACT:
            return self.value - self.initial - self.compensator
        return self.value - self.initial - 1j * HALF_PI * self.checkpoints[:, None]


def run_batch(stream: EventStream, batch: PointBatch, drift_mode: DriftMode,
              checkpoints: Sequence[float] | None = None, t0: float = 0.0) -> RunResult:
    """Evolve ``batch`` through ``stream`` and record it at each checkpoint."""
    drift_mode = DriftMode(drift_mode)
    cps = np.asarray([stream.horizon] if checkpoints is None else checkpoints, dtype=np.float64)
    if cps.size and (np.any(np.diff(cps) < 0) or cps[-1] > stream.horizon or cps[0] < t0):
        raise ValueError("checkpoints must be ascending within [t0, horizon]")
    exact = drift_mode is DriftMode.EXACT
    untimed_ok = t0 == 0.0 and not exact and (cps.size == 0 or np.all(cps == stream.horizon))
    if stream.ts is None and not untimed_ok:
        raise ValueError("this run needs arrival times; sample the stream with with_times=True")
    ts = stream.ts if stream.ts is not None and not untimed_ok else np.empty(0)
    shape = (cps.size, batch.initial.shape[0])
    out_v = np.empty(shape, dtype=np.complex128)
    out_d = np.empty(shape, dtype=np.complex128)
    out_c = np.empty(shape, dtype=np.complex128)
    nudges = _evolve_kernel(stream.xs, ts, batch.lo, batch.hi, batch.value, batch.deriv,
                            batch.comp, batch.track, exact, float(t0), cps, out_v, out_d, out_c)
    if not exact:
        out_c = np.broadcast_to(1j * HALF_PI * cps[:, None], shape).copy()
    return RunResult(cps, batch.initial.copy(), out_v, out_d, out_c, int(nudges), len(stream))


def evolve(stream: EventStream, points: Sequence[TrackedPoint],
           drift_mode: DriftMode = DriftMode.ASYMPTOTIC,
           checkpoints: Sequence[float] | None = None) -> list[Snapshot]:
    """Run the backward process on ``points`` and snapshot them at ``checkpoints``.

    Every arrival ``(x_k, t_k)`` with ``t_k`` after the points' common
    ``last_time`` maps each point by ``phi_{x_k}``, so later arrivals act
    outermost.  Derivatives follow the chain rule for points that started
    strictly inside the half-plane.  In exact mode the compensator integrates
    the window drift of the current value, which is piecewise constant
    between arrivals.
    """
    drift_mode = DriftMode(drift_mode)
    if not points:
        raise ValueError("need at least one tracked point")
    t0 = points[0].last_time
    if any(p.last_time != t0 for p in points):
        raise ValueError("tracked points must share last_time")
    batch = PointBatch(np.array([p.initial for p in points]), stream.window_lo, stream.window_hi)
    batch.value[:] = [p.value for p in points]
    batch.deriv[:] = [p.deriv for p in points]
    batch.comp[:] = [p.compensator for p in points]
    if drift_mode is DriftMode.ASYMPTOTIC:
        batch.comp[:] = 0.0
    res = run_batch(stream, batch, drift_mode, checkpoints, t0)
    snaps = []
    for i, c in enumerate(res.checkpoints):
        comp = res.compensator[i]
        pts = tuple(
            TrackedPoint(p.initial, complex(res.value[i, j]),
                         complex(res.deriv[i, j]) if p.has_derivative else 1.0 + 0.0j,
                         complex(comp[j]), float(c))
            for j, p in enumerate(points)
        )
        snaps.append(Snapshot(float(c), pts, res.nudges))
    return snaps


def fluctuation(point: TrackedPoint, at_time: float,
                drift_mode: DriftMode = DriftMode.ASYMPTOTIC) -> complex:
    """``M = F - z - drift`` for a point evolved up to ``at_time``."""
    if DriftMode(drift_mode) is DriftMode.EXACT:
        return point.value - point.initial - point.compensator
    return point.value - point.initial - 1j * HALF_PI * at_time


def render_forward(stream: EventStream, grid: Sequence[float], at_time: float | None = None) -> np.ndarray:
    """Image of ``grid`` under the forward map (earliest arrival outermost)."""
    grid = np.ascontiguousarray(np.asarray(grid, dtype=np.float64).astype(np.complex128))
    if at_time is None or at_time >= stream.horizon:
        count = len(stream)
    else:
        if stream.ts is None:
            raise ValueError("rendering before the horizon needs arrival times")
        count = int(np.searchsorted(stream.ts, at_time, side="right"))
    return _forward_kernel(stream.xs, count, grid)


# ---------------------------------------------------------------------------
# configuration


def auto_window(t: float) -> float:
    return max(64.0, 8.0 * t * math.log(2.0 + t) ** 2)


@dataclass(frozen=True)
class Grid:
    lo: float
    hi: float
    spacing: float
    height: float = 0.0

    def __post_init__(self):
        if not self.spacing > 0:
            raise ValueError("grid spacing must be > 0")
        if self.height < 0:
            raise ValueError("grid height must be >= 0")
        if self.hi < self.lo:
            raise ValueError("grid needs lo <= hi")

    def points(self) -> np.ndarray:
        n = int(math.floor((self.hi - self.lo) / self.spacing + 1e-9)) + 1
        return self.lo + self.spacing * np.arange(n) + 1j * self.height


@dataclass(frozen=True)
class SimConfig:
    t: float = 16.0
    window_halfwidth: float | None = None
    extra_points: tuple[float, ...] = ()
    grid: Grid | None = None
    drift_mode: DriftMode = DriftMode.ASYMPTOTIC
    master_seed: int = 0
    n_samples: int = 1000
    threads: int = 1

    def __post_init__(self):
        object.__setattr__(self, "drift_mode", DriftMode(self.drift_mode))
        object.__setattr__(self, "extra_points", tuple(float(b) for b in self.extra_points))
        if not self.t > 0:
            raise ValueError("horizon t must be > 0")
        if self.n_samples < 1:
            raise ValueError("n_samples must be positive")
        if self.threads < 1:
            raise ValueError("threads must be positive")
        self.window_for(self.t)

    def window_for(self, t: float) -> float:
        """Window half-width used at horizon ``t``: explicit, or the auto policy."""
        if self.window_halfwidth is None:
            return auto_window(t)
        if self.window_halfwidth < 2.0 * t:
            raise ValueError(f"window half-width {self.window_halfwidth} < 2t = {2 * t}")
        return float(self.window_halfwidth)

    def echo(self) -> dict:
        """Config as plain data, excluding scheduling-only fields (threads)."""
        d = asdict(self)
        d.pop("threads")
        d["drift_mode"] = self.drift_mode.value
        d["extra_points"] = list(self.extra_points)
        return d

    def digest(self) -> str:
        blob = json.dumps(self.echo(), sort_keys=True).encode()
        return hashlib.sha256(blob).hexdigest()[:16]


@dataclass
class FieldSample:
    sample_id: int
    t: float
    window: tuple[float, float]
    drift_mode: DriftMode
    initial: np.ndarray
    m: np.ndarray
    deriv: np.ndarray | None
    im_f_at_0: float
    nudges: int = 0

    @property
    def max_im_over_grid(self) -> float:
        return float(np.max(self.m.imag))

    def to_record(self) -> dict:
        return {
            "sample_id": self.sample_id,
            "t": self.t,
            "window": list(self.window),
            "drift_mode": DriftMode(self.drift_mode).value,
            "points": [[z.real, z.imag] for z in self.initial.tolist()],
            "re_m": self.m.real.tolist(),
            "im_m": self.m.imag.tolist(),
        }


def simulate_field(seed: int, stream_id: int, t: float, points: Sequence[complex],
                   window: tuple[float, float], drift_mode: DriftMode = DriftMode.ASYMPTOTIC,
                   point_windows: Sequence[tuple[float, float]] | None = None) -> tuple[RunResult, FieldSample]:
    """One Monte Carlo sample: draw a stream and evolve ``points`` to time ``t``.

    ``point_windows`` restricts which arrivals act on each point; it is how
    nested windows are coupled on common randomness.
    """
    drift_mode = DriftMode(drift_mode)
    lo, hi = window
    stream = sample_arrivals(lo, hi, t, seed, stream_id, with_times=drift_mode is DriftMode.EXACT)
    z = np.asarray(points, dtype=np.complex128)
    if point_windows is None:
        batch = PointBatch(z, lo, hi)
    else:
        pw = np.asarray(point_windows, dtype=np.float64)
        if np.any(pw[:, 0] < lo) or np.any(pw[:, 1] > hi):
            raise ValueError("point windows must lie inside the stream window")
        batch = PointBatch(z, pw[:, 0], pw[:, 1])
    res = run_batch(stream, batch, drift_mode)
    m = res.fluctuation(drift_mode)[-1]
    sample = FieldSample(
        sample_id=stream_id, t=t, window=(lo, hi), drift_mode=drift_mode, initial=z, m=m,
        deriv=np.where(batch.track, res.deriv[-1], np.nan), im_f_at_0=float(res.value[-1, 0].imag),
        nudges=res.nudges,
    )
    return res, sample
