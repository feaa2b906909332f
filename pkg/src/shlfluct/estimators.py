"""Monte Carlo estimators for the fluctuation field.

Every estimator is a pure function of its arguments and ``cfg.master_seed``.
Sample ``i`` of a run on horizon ``t`` and stream window ``[lo, hi]`` uses the
Philox key ``(cell_seed(master_seed, t, lo, hi), i)``, so runs that share a
geometry share randomness (which is what makes the covariance, truncation and
tail estimators coupled) and the thread count never changes a result.
Samples are gathered in index order before any reduction.
"""

from __future__ import annotations

import math
import struct
import warnings
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field
from typing import Callable, Sequence

import numpy as np
from scipy import stats

from .process import (
    CapacityError,
    DriftMode,
    Grid,
    PointBatch,
    SimConfig,
    _generator,
    run_batch,
    sample_arrivals,
)

MAX_GRID_POINTS = 100_000
KOEBE_CONSTANT = 16.0
_MASK64 = (1 << 64) - 1


class InsufficientSamplesError(RuntimeError):
    pass


class FitError(ValueError):
    pass


# ---------------------------------------------------------------------------
# result types


@dataclass(frozen=True)
class EstimateResult:
    estimate: float
    stderr: float
    n: int
    config_echo: str
    label: dict = field(default_factory=dict)
    extra: dict = field(default_factory=dict)

    @property
    def ci95(self) -> tuple[float, float]:
        return (self.estimate - 1.96 * self.stderr, self.estimate + 1.96 * self.stderr)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["ci95"] = list(self.ci95)
        return d


def mean_estimate(values: np.ndarray, config_echo: str = "", **label) -> EstimateResult:
    """Sample mean with standard error ``sd / sqrt(n)``."""
    values = np.asarray(values, dtype=np.float64)
    n = values.size
    if n == 0:
        raise InsufficientSamplesError("no samples")
    est = float(np.mean(values))
    se = float(np.std(values, ddof=1) / math.sqrt(n)) if n > 1 else math.inf
    return EstimateResult(est, se, n, config_echo, label)


@dataclass(frozen=True)
class SlopeFit:
    slope: float
    intercept: float
    slope_stderr: float
    points: tuple[tuple[float, float, float], ...]
    residuals: tuple[float, ...]
    chi2: float

    def to_dict(self) -> dict:
        d = asdict(self)
        d["points"] = [list(p) for p in self.points]
        d["residuals"] = list(self.residuals)
        return d


def fit_log_slope(points: Sequence[tuple[float, float, float]]) -> SlopeFit:
    """Weighted least squares of ``estimate`` on ``ln t`` with weights ``1/stderr**2``.

    ``points`` are ``(t, estimate, stderr)`` triples; the stored points are
    ``(ln t, estimate, stderr)``.
    """
    if len(points) < 3:
        raise FitError("need at least 3 points")
    t = np.array([p[0] for p in points], dtype=np.float64)
    y = np.array([p[1] for p in points], dtype=np.float64)
    se = np.array([p[2] for p in points], dtype=np.float64)
    if np.unique(t).size != t.size:
        raise FitError("horizons must be distinct")
    if np.any(t <= 0) or not np.all(se > 0):
        raise FitError("need t > 0 and stderr > 0")
    x = np.log(t)
    w = 1.0 / se**2
    xbar = np.sum(w * x) / np.sum(w)
    ybar = np.sum(w * y) / np.sum(w)
    sxx = np.sum(w * (x - xbar) ** 2)
    if not sxx > 0:
        raise FitError("singular design")
    slope = float(np.sum(w * (x - xbar) * (y - ybar)) / sxx)
    intercept = float(ybar - slope * xbar)
    resid = y - (intercept + slope * x)
    return SlopeFit(
        slope=slope,
        intercept=intercept,
        slope_stderr=float(1.0 / math.sqrt(sxx)),
        points=tuple((float(a), float(b), float(c)) for a, b, c in zip(x, y, se)),
        residuals=tuple(float(r) for r in resid),
        chi2=float(np.sum(w * resid**2)),
    )


# ---------------------------------------------------------------------------
# sampling machinery


def cell_seed(master_seed: int, *values: float) -> int:
    """64-bit seed for one simulation geometry, derived from the master seed."""
    words = []
    for v in values:
        words.extend(struct.unpack("<II", struct.pack("<d", float(v))))
    ss = np.random.SeedSequence(master_seed & _MASK64, spawn_key=tuple(words))
    return int(ss.generate_state(1, np.uint64)[0])


def map_samples(fn: Callable[[int], object], n: int, threads: int = 1) -> list:
    """``[fn(0), ..., fn(n-1)]``, optionally on a thread pool (order preserved)."""
    if threads <= 1 or n <= 1:
        return [fn(i) for i in range(n)]
    with ThreadPoolExecutor(max_workers=threads) as pool:
        return list(pool.map(fn, range(n)))


@dataclass
class FieldRun:
    """Stacked per-sample outputs, shape ``(n_samples, n_points)``."""

    points: np.ndarray
    m: np.ndarray
    value: np.ndarray
    deriv: np.ndarray
    nudges: int
    seed: int


def run_field(cfg: SimConfig, t: float, points: Sequence[complex], window: tuple[float, float],
              drift_mode: DriftMode | None = None,
              point_windows: Sequence[tuple[float, float]] | None = None,
              n_samples: int | None = None) -> FieldRun:
    drift_mode = DriftMode(drift_mode or cfg.drift_mode)
    n = cfg.n_samples if n_samples is None else n_samples
    lo, hi = float(window[0]), float(window[1])
    z = np.asarray(points, dtype=np.complex128)
    seed = cell_seed(cfg.master_seed, t, lo, hi)
    exact = drift_mode is DriftMode.EXACT
    if point_windows is None:
        plo, phi = lo, hi
    else:
        pw = np.asarray(point_windows, dtype=np.float64)
        plo, phi = pw[:, 0], pw[:, 1]

    def one(i):
        stream = sample_arrivals(lo, hi, t, seed, i, with_times=exact)
        res = run_batch(stream, PointBatch(z, plo, phi), drift_mode)
        return res.fluctuation(drift_mode)[-1], res.value[-1], res.deriv[-1], res.nudges

    out = map_samples(one, n, cfg.threads)
    return FieldRun(
        points=z,
        m=np.array([o[0] for o in out]),
        value=np.array([o[1] for o in out]),
        deriv=np.array([o[2] for o in out]),
        nudges=int(sum(o[3] for o in out)),
        seed=seed,
    )


_ORIGIN_CACHE: dict[tuple, FieldRun] = {}


def clear_cache() -> None:
    _ORIGIN_CACHE.clear()


def origin_run(cfg: SimConfig, t: float) -> FieldRun:
    """Samples of the point 0 at horizon ``t``; memoised on everything but threads."""
    m = cfg.window_for(t)
    key = (cfg.master_seed, float(t), m, cfg.drift_mode.value, cfg.n_samples)
    if key not in _ORIGIN_CACHE:
        _ORIGIN_CACHE[key] = run_field(cfg, t, [0j], (-m, m))
    return _ORIGIN_CACHE[key]


def _check_precision(res: EstimateResult, max_rel_stderr: float | None) -> None:
    if max_rel_stderr is None:
        return
    if res.n < 2 or not res.stderr <= max_rel_stderr * abs(res.estimate):
        raise InsufficientSamplesError(
            f"relative stderr {res.stderr / abs(res.estimate) if res.estimate else math.inf:.3g} "
            f"exceeds {max_rel_stderr} at {res.label}; raise n_samples"
        )


# ---------------------------------------------------------------------------
# estimators


def estimate_variance(t_list: Sequence[float], cfg: SimConfig,
                      max_rel_stderr: float | None = 0.2) -> tuple[list[EstimateResult], SlopeFit | None]:
    """``E|M_t(0)|^2`` per horizon, and its weighted slope against ``ln t``."""
    results = []
    for t in t_list:
        run = origin_run(cfg, t)
        r = mean_estimate(np.abs(run.m[:, 0]) ** 2, cfg.digest(), t=float(t))
        r.extra.update(window=cfg.window_for(t), drift_mode=cfg.drift_mode.value, nudges=run.nudges)
        _check_precision(r, max_rel_stderr)
        results.append(r)
    fit = None
    if len(results) >= 3:
        fit = fit_log_slope([(r.label["t"], r.estimate, r.stderr) for r in results])
    return results, fit


def inner_product(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """``Re a Re b + Im a Im b``: real pairing of two complex fluctuations."""
    return a.real * b.real + a.imag * b.imag


def log_profile(t: float, b: float) -> float:
    """Logarithmic covariance profile ``(pi/4) max(ln t - ln b, 0)``."""
    return 0.25 * math.pi * max(math.log(t) - math.log(b), 0.0)


def estimate_covariance(t: float, b_list: Sequence[float], cfg: SimConfig,
                        max_rel_stderr: float | None = 0.2) -> list[EstimateResult]:
    """``E[Re<M_t(0), M_t(b)>]`` for each offset, all points on one stream.

    The stream covers ``[-m, max(b) + m]`` so every offset sees common
    randomness, and each point is driven by the arrivals within ``m`` of it.
    A shared lopsided window would give each point a deterministic real
    drift of order ``t ln((b + m)/m)`` with opposite signs at 0 and b.
    The relative-precision check only applies for ``b < t``, where the
    covariance is bounded away from zero.
    """
    if any(b < 0 for b in b_list):
        raise ValueError("offsets must be >= 0")
    m = cfg.window_for(t)
    bmax = max(b_list)
    offsets = [0.0] + [float(b) for b in b_list]
    run = run_field(cfg, t, [complex(b) for b in offsets], (-m, bmax + m),
                    point_windows=[(b - m, b + m) for b in offsets])
    out = []
    for j, b in enumerate(b_list, start=1):
        r = mean_estimate(inner_product(run.m[:, 0], run.m[:, j]), cfg.digest(), t=float(t), b=float(b))
        r.extra.update(
            convention="Re(M0)Re(Mb)+Im(M0)Im(Mb)", common_randomness=True,
            window=[-m, bmax + m], log_profile=log_profile(t, b) if b > 0 else None,
            far_bound=math.sqrt(t / b * math.log(t)) if b > 0 and t > 1 else None,
        )
        if b < t:
            _check_precision(r, max_rel_stderr)
        out.append(r)
    return out


@dataclass(frozen=True)
class MaxFluctResult:
    t: float
    exceedance: EstimateResult
    scaled_max: EstimateResult
    quantiles: dict
    grid_spacing: float
    height: float
    n_grid: int

    def to_dict(self) -> dict:
        return {
            "t": self.t,
            "exceedance": self.exceedance.to_dict(),
            "scaled_max": self.scaled_max.to_dict(),
            "quantiles": self.quantiles,
            "grid_spacing": self.grid_spacing,
            "height": self.height,
            "n_grid": self.n_grid,
            "grid_max_is_lower_bound": True,
        }


def estimate_max_fluctuation(t_list: Sequence[float], grid_spacing: float, height: float,
                             beta: float, cfg: SimConfig,
                             span: tuple[float, float] = (0.0, 1.0)) -> list[MaxFluctResult]:
    """Grid maximum of ``Im M_t`` over ``[span[0] t, span[1] t] + i height``.

    Reports ``P(max > beta ln t)`` and the distribution of ``max / ln t``.
    The grid maximum is a lower bound for the maximum over the interval.
    """
    out = []
    for t in t_list:
        grid = Grid(span[0] * t, span[1] * t, grid_spacing, height)
        pts = grid.points()
        if pts.size > MAX_GRID_POINTS:
            raise CapacityError(f"grid of {pts.size} points exceeds {MAX_GRID_POINTS}")
        m = cfg.window_for(t)
        run = run_field(cfg, t, pts, (grid.lo - m, grid.hi + m))
        mx = run.m.imag.max(axis=1)
        logt = math.log(t)
        exc = mean_estimate((mx > beta * logt).astype(float), cfg.digest(), t=float(t), beta=beta)
        scaled = mean_estimate(mx / logt, cfg.digest(), t=float(t))
        q = {str(p): float(v) for p, v in zip((0.05, 0.25, 0.5, 0.75, 0.95),
                                               np.quantile(mx / logt, [0.05, 0.25, 0.5, 0.75, 0.95]))}
        out.append(MaxFluctResult(float(t), exc, scaled, q, grid_spacing, height, int(pts.size)))
    return out


def moment_bound(alpha: float, t: float) -> float:
    """Upper bound ``exp((pi/2) a^2 e^a) t^(a^2)`` on ``E exp(a Im M_t)``."""
    return math.exp(0.5 * math.pi * alpha**2 * math.exp(alpha)) * t ** (alpha**2)


def tail_bound(beta: float, t: float) -> float:
    """Chernoff bound ``exp((pi b^2/8) e^(b/2)) t^(-b^2/4)`` on ``P(Im M_t > b ln t)``."""
    return math.exp(math.pi * beta**2 / 8.0 * math.exp(beta / 2.0)) * t ** (-(beta**2) / 4.0)


def estimate_exp_moment(t_list: Sequence[float], alpha: float, cfg: SimConfig,
                        beta: float | None = None) -> list[EstimateResult]:
    if not 0.0 < alpha <= 1.0:
        raise ValueError("alpha must lie in (0, 1]; larger values are not estimable by plain MC")
    out = []
    for t in t_list:
        im = origin_run(cfg, t).m[:, 0].imag
        r = mean_estimate(np.exp(alpha * im), cfg.digest(), t=float(t), alpha=alpha)
        bound = moment_bound(alpha, t)
        r.extra.update(bound=bound, ratio=r.estimate / bound,
                       compliant=bool(r.estimate <= bound + 2.0 * r.stderr))
        if r.stderr > 0.3 * r.estimate:
            warnings.warn(f"exp-moment relative stderr {r.stderr / r.estimate:.2f} > 0.3 at t={t}")
        if beta is not None:
            tail = mean_estimate((im > beta * math.log(t)).astype(float), cfg.digest())
            r.extra.update(beta=beta, tail=tail.estimate, tail_stderr=tail.stderr,
                           tail_bound=tail_bound(beta, t))
        out.append(r)
    return out


def estimate_lln_tail(t_list: Sequence[float], a: float, cfg: SimConfig) -> list[EstimateResult]:
    """``P(Im F_t(0) < pi t / 2 - a sqrt(t))``."""
    if not a > 0:
        raise ValueError("a must be > 0")
    out = []
    for t in t_list:
        im_f = origin_run(cfg, t).value[:, 0].imag
        thr = 0.5 * math.pi * t - a * math.sqrt(t)
        r = mean_estimate((im_f < thr).astype(float), cfg.digest(), t=float(t), a=a)
        r.extra.update(threshold=thr)
        out.append(r)
    return out


def estimate_growth(t_list: Sequence[float], cfg: SimConfig) -> list[EstimateResult]:
    """Sample mean of ``Im F_t(0) / t`` (tends to pi/2)."""
    out = []
    for t in t_list:
        m = cfg.window_for(t)
        r = mean_estimate(origin_run(cfg, t).value[:, 0].imag / t, cfg.digest(), t=float(t))
        # finite windows lose at most (1/m) int_0^t E Im F_s ds ~ pi t^2/(4m) of height
        r.extra.update(window_deficit_bound=0.25 * math.pi * t / m)
        out.append(r)
    return out


def estimate_derivative_moment(t_list: Sequence[float], cfg: SimConfig) -> list[EstimateResult]:
    """``E|F_t'(i ln t)|^2`` via chain-rule derivative tracking."""
    out = []
    for t in t_list:
        if t < 3:
            raise ValueError("need t >= 3 so that ln t > 1")
        m = cfg.window_for(t)
        run = run_field(cfg, t, [1j * math.log(t)], (-m, m))
        r = mean_estimate(np.abs(run.deriv[:, 0]) ** 2, cfg.digest(), t=float(t))
        r.extra.update(window=m)
        out.append(r)
    return out


def window_truncation_errors(t: float, m_smalls: Sequence[float], m_large: float,
                             cfg: SimConfig) -> list[EstimateResult]:
    """``E|M^{m_large}_t(0) - M^{m_small}_t(0)|^2`` for several small windows.

    The small-window processes see exactly the arrivals of the large stream
    with ``|x| <= m_small``.  Both sides use exact compensators, so the
    difference is a martingale and the deterministic drift deficit of a
    finite window does not enter.
    """
    for ms in m_smalls:
        if ms < 2 * t or (ms != m_large and m_large < 8 * ms):
            raise ValueError("need m_large >= 8 m_small >= 16 t (or m_small == m_large)")
    pts = [0j] * (1 + len(m_smalls))
    windows = [(-m_large, m_large)] + [(-ms, ms) for ms in m_smalls]
    run = run_field(cfg, t, pts, (-m_large, m_large), DriftMode.EXACT, windows)
    out = []
    for j, ms in enumerate(m_smalls, start=1):
        r = mean_estimate(np.abs(run.m[:, 0] - run.m[:, j]) ** 2, cfg.digest(),
                          t=float(t), m_small=float(ms), m_large=float(m_large))
        r.extra.update(rate_bound_c10=10.0 * t / ms)
        out.append(r)
    return out


def window_truncation_error(t: float, m_small: float, m_large: float, cfg: SimConfig) -> EstimateResult:
    return window_truncation_errors(t, [m_small], m_large, cfg)[0]


@dataclass(frozen=True)
class KoebeResult:
    max_ratio: float
    n_pairs: int
    n_maps: int

    def to_dict(self) -> dict:
        return asdict(self) | {"constant": KOEBE_CONSTANT}


def koebe_check(n_maps: int, cfg: SimConfig, pairs_per_map: int = 100) -> KoebeResult:
    """Largest ``|F'(w)| / |F'(z)|`` over random ``|w - z| < Im z / 2`` on simulated maps."""
    t = cfg.t
    m = cfg.window_for(t)
    seed = cell_seed(cfg.master_seed, t, -m, m)
    ymax = max(2.0, 2.0 * math.log(2.0 + t))

    def one(i):
        rng = _generator(seed, i, 3)
        y = np.exp(rng.uniform(math.log(0.02), math.log(ymax), pairs_per_map))
        z = rng.uniform(-t, t, pairs_per_map) + 1j * y
        r = 0.5 * y * np.sqrt(rng.random(pairs_per_map)) * (1.0 - 1e-9)
        w = z + r * np.exp(2j * math.pi * rng.random(pairs_per_map))
        stream = sample_arrivals(-m, m, t, seed, i, with_times=False)
        res = run_batch(stream, PointBatch(np.concatenate([z, w]), -m, m), DriftMode.ASYMPTOTIC)
        d = np.abs(res.deriv[-1])
        return float(np.max(d[pairs_per_map:] / d[:pairs_per_map]))

    ratios = map_samples(one, n_maps, cfg.threads)
    return KoebeResult(max(ratios) if ratios else 1.0, n_maps * pairs_per_map, n_maps)


def jackknife_skewness(x: np.ndarray) -> tuple[float, float]:
    """Sample skewness ``g1`` and its delete-one jackknife standard error."""
    x = np.asarray(x, dtype=np.float64)
    n = x.size
    y = x - x.mean()
    s1, s2, s3 = y.sum(), (y**2).sum(), (y**3).sum()
    k = n - 1
    mu = (s1 - y) / k
    m2 = (s2 - y**2) / k - mu**2
    m3 = (s3 - y**3) / k - 3.0 * mu * (s2 - y**2) / k + 2.0 * mu**3
    loo = m3 / m2**1.5
    g1 = float(stats.skew(x))
    se = float(math.sqrt((n - 1) / n * np.sum((loo - loo.mean()) ** 2)))
    return g1, se


@dataclass
class HistogramResult:
    t: float
    n: int
    bins: int
    im_edges: list
    im_counts: list
    re_edges: list
    re_counts: list
    skewness: dict
    kurtosis: dict
    degenerate: dict

    def to_dict(self) -> dict:
        return asdict(self)


def _describe(v: np.ndarray, bins: int):
    lo, hi = float(v.min()), float(v.max())
    if lo == hi:
        counts = np.zeros(bins, dtype=int)
        counts[0] = v.size
        edges = np.linspace(lo, lo + 1.0, bins + 1)
        return edges, counts, (math.nan, math.nan), math.nan, True
    counts, edges = np.histogram(v, bins=bins, range=(lo, hi))
    return edges, counts, jackknife_skewness(v), float(stats.kurtosis(v)), False


def histogram(t: float, cfg: SimConfig, bins: int = 50, values: np.ndarray | None = None) -> HistogramResult:
    """Equal-width histograms of ``Im M_t(0)`` and ``Re M_t(0)`` with shape statistics."""
    if bins < 10:
        raise ValueError("need at least 10 bins")
    m = origin_run(cfg, t).m[:, 0] if values is None else np.asarray(values, dtype=np.complex128)
    ie, ic, isk, iku, ideg = _describe(m.imag, bins)
    re, rc, rsk, rku, rdeg = _describe(m.real, bins)
    return HistogramResult(
        t=float(t), n=int(m.size), bins=bins,
        im_edges=ie.tolist(), im_counts=ic.tolist(), re_edges=re.tolist(), re_counts=rc.tolist(),
        skewness={"im": isk[0], "im_stderr": isk[1], "re": rsk[0], "re_stderr": rsk[1]},
        kurtosis={"im": iku, "re": rku},
        degenerate={"im": ideg, "re": rdeg},
    )
