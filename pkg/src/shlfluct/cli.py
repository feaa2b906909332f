"""Command-line front end.

Each command writes ``results.json``, ``results.csv`` and ``manifest.json``
into ``--out``.  ``results.json`` depends only on the configuration and the
seed (never on ``--threads`` or timing), so repeated runs are byte-identical;
timings live in the manifest.

Exit codes: 0 success, 1 computational failure, 2 usage error.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import math
import secrets
import sys
import time
import xml.etree.ElementTree as ET
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from . import __version__
from . import conformal as cf
from . import estimators as est
from .process import (
    DriftMode,
    PointBatch,
    SimConfig,
    run_batch,
    render_forward,
    sample_arrivals,
)

try:
    import tomllib
except ModuleNotFoundError:  # Python < 3.11
    import tomli as tomllib


# ---------------------------------------------------------------------------
# output helpers


def fmt(v: float) -> str:
    return format(float(v), ".17g")


def _clean(obj):
    if isinstance(obj, float):
        return obj if math.isfinite(obj) else None
    if isinstance(obj, (np.floating,)):
        return _clean(float(obj))
    if isinstance(obj, (np.integer,)):
        return int(obj)
    if isinstance(obj, (np.bool_,)):
        return bool(obj)
    if isinstance(obj, dict):
        return {str(k): _clean(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_clean(v) for v in obj]
    return obj


def write_json(path: Path, obj) -> None:
    path.write_text(json.dumps(_clean(obj), indent=2, sort_keys=True) + "\n")


def write_csv(path: Path, header: Sequence[str], rows: Sequence[Sequence]) -> None:
    lines = [",".join(header)]
    for row in rows:
        lines.append(",".join(fmt(v) if isinstance(v, (float, np.floating)) else str(v) for v in row))
    path.write_text("\n".join(lines) + "\n")


def write_svg(path: Path, xs: np.ndarray, ys: np.ndarray) -> None:
    """Single-polyline SVG; ``ys`` point up, the viewBox is fitted to the data."""
    xs = np.asarray(xs, dtype=float)
    ys = -np.asarray(ys, dtype=float)
    x0, x1 = float(xs.min()), float(xs.max())
    y0, y1 = float(ys.min()), float(ys.max())
    w = max(x1 - x0, 1e-9)
    h = max(y1 - y0, 1e-3 * w)
    pad = 0.02 * max(w, h)
    box = f"{fmt(x0 - pad)} {fmt(y0 - pad)} {fmt(w + 2 * pad)} {fmt(h + 2 * pad)}"
    root = ET.Element("svg", xmlns="http://www.w3.org/2000/svg", viewBox=box,
                      preserveAspectRatio="none", width="1200", height="400")
    ET.SubElement(root, "polyline", fill="none", stroke="black",
                  **{"stroke-width": fmt(0.002 * max(w, h)), "vector-effect": "non-scaling-stroke",
                     "points": " ".join(f"{fmt(a)},{fmt(b)}" for a, b in zip(xs, ys))})
    ET.ElementTree(root).write(path, encoding="unicode", xml_declaration=False)


def write_samples(path: Path, runs: Sequence[tuple[float, tuple[float, float], str, "est.FieldRun"]]) -> None:
    with path.open("w") as fh:
        for t, window, mode, run in runs:
            for i in range(run.m.shape[0]):
                row = run.m[i]
                fh.write(
                    "{" + f'"sample_id": {i}, "t": {fmt(t)}, "window": [{fmt(window[0])}, {fmt(window[1])}], '
                    f'"drift_mode": "{mode}", '
                    f'"re_m": [{", ".join(fmt(v) for v in row.real)}], '
                    f'"im_m": [{", ".join(fmt(v) for v in row.imag)}]' + "}\n"
                )


def sha256(path: Path) -> str:
    return hashlib.sha256(path.read_bytes()).hexdigest()


@dataclass
class Output:
    """What a command produced, before it is written to disk."""

    results: dict
    header: list
    rows: list
    extra_files: dict = field(default_factory=dict)
    ok: bool = True


# ---------------------------------------------------------------------------
# verify


@dataclass
class Check:
    name: str
    passed: bool
    error: float
    threshold: float


def run_verify(rel_tol: float = 1e-10, half_width: float = 1e6, n_random: int = 100_000,
               seed: int = 0, slit: Callable[[float, complex], complex] | None = None) -> list[Check]:
    """Quadrature and property checks of the conformal layer.

    ``slit`` replaces the slit map in the branch-positivity check; it exists so
    that a deliberately wrong branch can be shown to fail.
    """
    slit = slit or cf.slit_apply
    spec = cf.QuadratureSpec(half_width=half_width, rel_tol=rel_tol)
    loose = lambda base, scale: max(base, 10.0 * rel_tol * scale)  # noqa: E731
    checks = []

    err = max(abs(cf.slit_apply(0.0, 1j * y) - 1j * math.sqrt(y * y + 1)) / math.sqrt(y * y + 1)
              for y in (0.1, 1.0, 10.0, 1000.0))
    checks.append(Check("closed_form_phi0_iy", err <= 1e-12, err, 1e-12))

    for y in (1.0, 5.0, 10.0):
        d = cf.drift_integral(1j * y, spec)
        err = abs(d - 0.5j * math.pi)
        thr = loose(1e-6, math.pi / 2)
        checks.append(Check(f"drift_integral_y={y:g}", err <= thr, err, thr))

    for y in (5.0, 10.0, 20.0, 100.0):
        err = abs(cf.squared_displacement_integral(y, spec) - math.pi / (4 * y))
        thr = loose(5.0 / y**3, math.pi / (4 * y))
        checks.append(Check(f"squared_displacement_y={y:g}", err <= thr, err, thr))

    for zeta in (0.0, 1.0, 50.0):
        err = abs(cf.delta_integral(zeta, spec) - 0.5 * math.pi)
        thr = loose(1e-6, math.pi / 2)
        checks.append(Check(f"delta_integral_zeta={zeta:g}", err <= thr, err, thr))

    rng = np.random.Generator(np.random.Philox(key=seed))
    zeta = np.exp(rng.uniform(-5, 5, n_random))
    x = rng.uniform(-50, 50, n_random)
    d = cf.delta_array(zeta, x)
    d0 = cf.delta_array(zeta, np.zeros_like(x))
    viol = float(max(np.max(-d), np.max(d - d0), np.max(d0 - 1 / (1 + zeta)), 0.0))
    checks.append(Check("delta_pointwise_bounds", viol <= 1e-15, viol, 1e-15))

    z = rng.uniform(-20, 20, n_random) + 1j * np.exp(rng.uniform(-8, 4, n_random))
    xs = rng.uniform(-20, 20, n_random)
    k = min(n_random, 5000)
    drop = max(max(z[i].imag - slit(float(xs[i]), complex(z[i])).imag for i in range(k)), 0.0)
    checks.append(Check("branch_positivity", drop <= 0.0, drop, 0.0))

    inc = np.abs(cf.increment_array(xs, z))
    excess = float(max(np.max(inc) - 1.0, 0.0))
    checks.append(Check("bounded_displacement", excess <= 1e-12, excess, 1e-12))

    err = 0.0
    for zz in (2j, 0.7 + 0.3j, -3 + 5j):
        q = cf.drift_integral(zz, cf.QuadratureSpec(half_width=40.0, rel_tol=max(rel_tol, 1e-12), tail_mode="none"))
        err = max(err, abs(cf.window_drift(zz, -40.0, 40.0) - q))
    thr = loose(1e-8, 1.0)
    checks.append(Check("closed_form_drift_vs_quadrature", err <= thr, err, thr))

    kr = est.koebe_check(10, SimConfig(t=4.0, window_halfwidth=16.0, master_seed=seed), pairs_per_map=50)
    checks.append(Check("koebe_distortion", kr.max_ratio <= est.KOEBE_CONSTANT, kr.max_ratio, est.KOEBE_CONSTANT))
    return checks


# ---------------------------------------------------------------------------
# commands


def _float_list(text: str) -> list[float]:
    try:
        return [float(v) for v in text.split(",") if v.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated numbers, got {text!r}")


def _grid(text: str) -> tuple[float, float, float]:
    try:
        lo, hi, step = (float(v) for v in text.split(":"))
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected lo:hi:step, got {text!r}")
    if not step > 0 or hi < lo:
        raise argparse.ArgumentTypeError("grid needs step > 0 and lo <= hi")
    return lo, hi, step


def _config(a, t: float) -> SimConfig:
    return SimConfig(t=t, window_halfwidth=a.window, drift_mode=a.drift_mode,
                     master_seed=a.seed, n_samples=a.samples, threads=a.threads)


def _est_rows(results: Sequence[est.EstimateResult], keys: Sequence[str]):
    header = list(keys) + ["estimate", "stderr", "n", "ci95_lo", "ci95_hi"]
    rows = [[r.label.get(k, "") for k in keys] + [r.estimate, r.stderr, r.n, *r.ci95] for r in results]
    return header, rows


def cmd_variance(a, runs) -> Output:
    cfg = _config(a, max(a.t))
    res, fit = est.estimate_variance(a.t, cfg)
    for t in a.t:
        m = cfg.window_for(t)
        runs.append((t, (-m, m), cfg.drift_mode.value, est.origin_run(cfg, t)))
    header, rows = _est_rows(res, ["t"])
    return Output({"estimates": [r.to_dict() for r in res], "fit": fit.to_dict() if fit else None,
                   "calibrated_constants": {"target_slope": math.pi / 4, "slope_band": [0.55, 1.05]}},
                  header, rows)


def cmd_covariance(a, runs) -> Output:
    if len(a.t) != 1:
        raise est.FitError("covariance takes a single --t")
    t = a.t[0]
    if a.b is None:
        raise ValueError("covariance needs --b")
    cfg = _config(a, t)
    res = est.estimate_covariance(t, a.b, cfg)
    header, rows = _est_rows(res, ["t", "b"])
    return Output({"estimates": [r.to_dict() for r in res], "common_randomness": True,
                   "convention": "Re(M0)Re(Mb)+Im(M0)Im(Mb)",
                   "calibrated_constants": {"profile": "(pi/4) max(ln t - ln b, 0)", "ratio_band": [0.4, 1.6],
                                            "far_c": 5.0}},
                  header, rows)


def cmd_maxfluct(a, runs) -> Output:
    cfg = _config(a, max(a.t))
    res = est.estimate_max_fluctuation(a.t, a.grid_spacing, a.height, a.beta, cfg)
    header = ["t", "beta", "p_exceed", "p_stderr", "mean_max_over_log_t", "stderr", "n"]
    rows = [[r.t, a.beta, r.exceedance.estimate, r.exceedance.stderr, r.scaled_max.estimate,
             r.scaled_max.stderr, r.exceedance.n] for r in res]
    return Output({"estimates": [r.to_dict() for r in res]}, header, rows)


def cmd_expmoment(a, runs) -> Output:
    cfg = _config(a, max(a.t))
    res = est.estimate_exp_moment(a.t, a.alpha, cfg, beta=a.beta)
    header, rows = _est_rows(res, ["t", "alpha"])
    header += ["bound", "ratio"]
    for row, r in zip(rows, res):
        row += [r.extra["bound"], r.extra["ratio"]]
    ok = all(r.extra["compliant"] for r in res)
    return Output({"estimates": [r.to_dict() for r in res]}, header, rows, ok=ok)


def cmd_lln(a, runs) -> Output:
    cfg = _config(a, max(a.t))
    res = est.estimate_lln_tail(a.t, a.a, cfg)
    header, rows = _est_rows(res, ["t", "a"])
    return Output({"estimates": [r.to_dict() for r in res]}, header, rows)


def cmd_derivmoment(a, runs) -> Output:
    cfg = _config(a, max(a.t))
    res = est.estimate_derivative_moment(a.t, cfg)
    header, rows = _est_rows(res, ["t"])
    return Output({"estimates": [r.to_dict() for r in res]}, header, rows)


def cmd_truncation(a, runs) -> Output:
    t = a.t[0]
    cfg = _config(a, t)
    res = est.window_truncation_errors(t, a.m_small, a.m_large, cfg)
    header, rows = _est_rows(res, ["t", "m_small", "m_large"])
    return Output({"estimates": [r.to_dict() for r in res], "drift_mode": "exact_quadrature",
                   "calibrated_constants": {"c": 10.0}}, header, rows)


def cmd_histogram(a, runs) -> Output:
    t = a.t[0]
    cfg = _config(a, t)
    h = est.histogram(t, cfg, a.bins)
    m = cfg.window_for(t)
    runs.append((t, (-m, m), cfg.drift_mode.value, est.origin_run(cfg, t)))
    header = ["component", "bin_lo", "bin_hi", "count"]
    rows = [["im", lo, hi, c] for lo, hi, c in zip(h.im_edges[:-1], h.im_edges[1:], h.im_counts)]
    rows += [["re", lo, hi, c] for lo, hi, c in zip(h.re_edges[:-1], h.re_edges[1:], h.re_counts)]
    return Output(h.to_dict(), header, rows)


def cmd_koebe(a, runs) -> Output:
    cfg = _config(a, a.t[0])
    r = est.koebe_check(a.maps, cfg, a.pairs)
    return Output(r.to_dict(), ["max_ratio", "n_pairs", "n_maps"],
                  [[r.max_ratio, r.n_pairs, r.n_maps]], ok=r.max_ratio <= est.KOEBE_CONSTANT)


def cmd_render(a, runs) -> Output:
    t = a.t[0]
    m = a.window if a.window is not None else max(64.0, 4.0 * t)
    lo, hi, step = a.grid
    grid = lo + step * np.arange(int(math.floor((hi - lo) / step + 1e-9)) + 1)
    wlo, whi = lo - m, hi + m
    seed = est.cell_seed(a.seed, t, wlo, whi)
    stream = sample_arrivals(wlo, whi, t, seed, 0, with_times=False)
    image = render_forward(stream, grid)
    rows = [[x, v.real, v.imag] for x, v in zip(grid, image)]
    out = Output({"t": t, "window": [wlo, whi], "n_grid": int(grid.size), "n_arrivals": len(stream),
                  "max_height": float(image.imag.max())}, ["x", "re", "im"], rows)
    out.extra_files["render.svg"] = lambda p: write_svg(p, image.real, image.imag)
    if a.profile:
        res = run_batch(stream, PointBatch(grid.astype(complex), wlo, whi), DriftMode.ASYMPTOTIC)
        prof = res.fluctuation(DriftMode.ASYMPTOTIC)[-1]
        out.extra_files["profile.csv"] = lambda p: write_csv(
            p, ["x", "re_m", "im_m"], [[x, v.real, v.imag] for x, v in zip(grid, prof)])
        out.extra_files["profile.svg"] = lambda p: write_svg(p, grid, prof.imag)
    return out


COMMANDS = {
    "variance": cmd_variance,
    "covariance": cmd_covariance,
    "maxfluct": cmd_maxfluct,
    "expmoment": cmd_expmoment,
    "lln": cmd_lln,
    "derivmoment": cmd_derivmoment,
    "truncation": cmd_truncation,
    "histogram": cmd_histogram,
    "koebe": cmd_koebe,
    "render": cmd_render,
}

DEFAULTS = {
    "samples": 1000, "window": None, "drift_mode": "asymptotic", "threads": 1, "out": None,
    "grid_spacing": 0.5, "height": 0.0, "alpha": 0.5, "beta": None, "a": 3.0, "bins": 50,
    "m_large": 4096.0, "m_small": [64.0], "maps": 100, "pairs": 100, "grid": None, "b": None,
    "profile": False, "dump_samples": False, "rel_tol": 1e-10, "half_width": 1e6, "seed": None,
}


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="shlfluct", description="Stationary Hastings-Levitov(0) fluctuation experiments")
    p.add_argument("--version", action="version", version=__version__)
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp):
        sp.add_argument("--t", type=_float_list, help="horizon(s), comma-separated (required)")
        sp.add_argument("--seed", type=int)
        sp.add_argument("--samples", type=int)
        sp.add_argument("--window", type=float, help="window half-width (default: auto)")
        sp.add_argument("--drift-mode", choices=[m.value for m in DriftMode])
        sp.add_argument("--threads", type=int)
        sp.add_argument("--out", type=Path)
        sp.add_argument("--config", type=Path, help="TOML file; flags take precedence")
        sp.add_argument("--dump-samples", action="store_true", default=None)

    v = sub.add_parser("verify", help="quadrature and property checks of the slit-map layer")
    v.add_argument("--rel-tol", type=float)
    v.add_argument("--half-width", type=float)
    v.add_argument("--seed", type=int)
    v.add_argument("--out", type=Path)
    v.add_argument("--config", type=Path)

    common(sub.add_parser("variance", help="E|M_t(0)|^2 and its log-slope"))
    sp = sub.add_parser("covariance", help="common-randomness covariance of M_t(0), M_t(b)")
    common(sp)
    sp.add_argument("--b", type=_float_list)
    sp = sub.add_parser("maxfluct", help="grid maximum of Im M_t")
    common(sp)
    sp.add_argument("--grid-spacing", type=float)
    sp.add_argument("--height", type=float)
    sp.add_argument("--beta", type=float)
    sp = sub.add_parser("expmoment", help="E exp(alpha Im M_t(0)) against its bound")
    common(sp)
    sp.add_argument("--alpha", type=float)
    sp.add_argument("--beta", type=float)
    sp = sub.add_parser("lln", help="lower tail of Im F_t(0)")
    common(sp)
    sp.add_argument("--a", type=float)
    common(sub.add_parser("derivmoment", help="E|F_t'(i ln t)|^2"))
    sp = sub.add_parser("truncation", help="coupled window-truncation error")
    common(sp)
    sp.add_argument("--m-small", type=_float_list)
    sp.add_argument("--m-large", type=float)
    sp = sub.add_parser("histogram", help="histogram of M_t(0)")
    common(sp)
    sp.add_argument("--bins", type=int)
    sp = sub.add_parser("koebe", help="distortion ratios on simulated maps")
    common(sp)
    sp.add_argument("--maps", type=int)
    sp.add_argument("--pairs", type=int)
    sp = sub.add_parser("render", help="forward aggregate boundary as SVG + CSV")
    common(sp)
    sp.add_argument("--grid", type=_grid, help="lo:hi:step (required; write --grid=-a:b:h for negative lo)")
    sp.add_argument("--profile", action="store_true", default=None, help="also emit Im M_t(x)")
    return p


def _resolve(args: argparse.Namespace, parser: argparse.ArgumentParser) -> argparse.Namespace:
    conf = {}
    if getattr(args, "config", None):
        try:
            conf = tomllib.loads(Path(args.config).read_text())
        except (OSError, tomllib.TOMLDecodeError) as exc:
            parser.error(f"cannot read config: {exc}")
        conf = {k.replace("-", "_"): v for k, v in conf.items()}
    for key, default in DEFAULTS.items():
        if hasattr(args, key) and getattr(args, key) is None:
            setattr(args, key, conf.get(key, default))
    if args.command != "verify":
        if args.t is None:
            t = conf.get("t")
            args.t = [float(v) for v in (t if isinstance(t, list) else [t])] if t is not None else None
        for key in ("b", "m_small"):
            if isinstance(getattr(args, key, None), (int, float)):
                setattr(args, key, [float(getattr(args, key))])
        if not args.t:
            parser.error(f"{args.command}: the following arguments are required: --t")
        if any(not v > 0 for v in args.t):
            parser.error("--t needs positive horizons")
        if args.samples < 2 or args.threads < 1:
            parser.error("--samples must be >= 2 and --threads >= 1")
        if isinstance(getattr(args, "grid", None), str):
            try:
                args.grid = _grid(args.grid)
            except argparse.ArgumentTypeError as exc:
                parser.error(str(exc))
        if args.command == "render" and args.grid is None:
            parser.error("render: the following arguments are required: --grid")
    if args.seed is None:
        args.seed = secrets.randbits(63)
    if args.out is None:
        args.out = Path("runs") / args.command
    args.out = Path(args.out)
    return args


def main(argv: Sequence[str] | None = None, slit: Callable | None = None) -> int:
    parser = build_parser()
    args = _resolve(parser.parse_args(argv), parser)
    started = time.perf_counter()
    out_dir: Path = args.out
    out_dir.mkdir(parents=True, exist_ok=True)

    if args.command == "verify":
        try:
            checks = run_verify(args.rel_tol, args.half_width, seed=args.seed, slit=slit)
        except (cf.QuadratureError, cf.DomainError) as exc:
            print(f"error: {exc}", file=sys.stderr)
            return 1
        for c in checks:
            print(f"{'PASS' if c.passed else 'FAIL'}  {c.name:<36} error={c.error:.3e}  threshold={c.threshold:.3e}")
        ok = all(c.passed for c in checks)
        output = Output({"checks": [c.__dict__ for c in checks], "rel_tol": args.rel_tol,
                         "half_width": args.half_width},
                        ["check", "passed", "error", "threshold"],
                        [[c.name, c.passed, c.error, c.threshold] for c in checks], ok=ok)
        config_echo = {"rel_tol": args.rel_tol, "half_width": args.half_width}
    else:
        try:
            cfg_echo = _config(args, max(args.t)).echo() if args.command != "render" else None
        except ValueError as exc:
            parser.error(str(exc))
        runs: list = []
        try:
            output = COMMANDS[args.command](args, runs)
        except (est.InsufficientSamplesError, est.FitError, cf.QuadratureError, cf.DomainError,
                MemoryError, ValueError) as exc:
            print(f"error: {exc}", file=sys.stderr)
            return 1
        config_echo = {k: (str(v) if isinstance(v, Path) else v) for k, v in sorted(vars(args).items())
                       if k not in ("threads", "out", "config", "seed", "command")}
        if cfg_echo is not None:
            config_echo["sim"] = cfg_echo
        if args.dump_samples and runs:
            write_samples(out_dir / "samples.ndjson", runs)
    simulated = time.perf_counter()

    results = {"command": args.command, "tool_version": __version__, "seed": args.seed,
               "config": config_echo, "ok": output.ok, **output.results}
    write_json(out_dir / "results.json", results)
    write_csv(out_dir / "results.csv", output.header, output.rows)
    for name, writer in output.extra_files.items():
        writer(out_dir / name)
    written = time.perf_counter()

    files = sorted(p.name for p in out_dir.iterdir() if p.is_file() and p.name != "manifest.json")
    manifest = {
        "tool_version": __version__,
        "command": args.command,
        "config": config_echo,
        "threads": getattr(args, "threads", 1),
        "master_seed": args.seed,
        "digests": {name: sha256(out_dir / name) for name in files},
        "wall_clock": {"compute_s": simulated - started, "write_s": written - simulated},
    }
    write_json(out_dir / "manifest.json", manifest)
    if args.command != "verify":
        print(f"wrote {out_dir}/results.json ({'ok' if output.ok else 'bound violated'})")
    return 0 if output.ok else 1


if __name__ == "__main__":
    sys.exit(main())
