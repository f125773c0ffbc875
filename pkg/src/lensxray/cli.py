"""Command-line runner: ``lensxray <subcommand> <config.toml> [--set key=value]``.

Each subcommand writes ``<subcommand>.csv`` (deterministic body), a JSON
summary and ``manifest.json`` (config hash, versions, timings) into the
output directory.  Exit status: 0 pass, 1 failed check, 2 usage or config
error.
"""
from __future__ import annotations

import argparse
import csv
import io
import json
import platform
import sys
import time
from datetime import datetime, timezone
from pathlib import Path

import numpy as np

from . import __version__
from .config import ConfigError, ExperimentConfig

SUBCOMMANDS = ("trace", "scatter", "identity-check", "xray", "adjoint-check", "potential-check",
               "linearize-check", "decompose", "symbol", "conjugate", "fold-atlas", "assemble", "invert",
               "acceptance")


class Outcome:
    """Rows for the CSV body, a JSON summary and the pass flag."""

    def __init__(self, header, rows=(), summary=None, ok=True, extra_files=()):
        self.header = list(header)
        self.rows = [list(r) for r in rows]
        self.summary = dict(summary or {})
        self.ok = bool(ok)
        self.extra_files = list(extra_files)

    def csv_text(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(self.header)
        for r in self.rows:
            w.writerow([_fmt(v) for v in r])
        return buf.getvalue()


def _fmt(v):
    if isinstance(v, (bool, np.bool_)):
        return int(v)
    if isinstance(v, (int, np.integer)):
        return int(v)
    if isinstance(v, (float, np.floating)):
        return f"{float(v):.10e}"
    return v


def _jsonable(obj):
    if isinstance(obj, dict):
        return {str(k): _jsonable(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_jsonable(v) for v in obj]
    if isinstance(obj, np.ndarray):
        return _jsonable(obj.tolist())
    if isinstance(obj, (np.bool_, bool)):
        return bool(obj)
    if isinstance(obj, np.integer):
        return int(obj)
    if isinstance(obj, (np.floating, float)):
        v = float(obj)
        return v if np.isfinite(v) else str(v)
    return obj


def _rng(cfg, k):
    return np.random.default_rng([cfg.run.seed, 100 + k])


# ---------------------------------------------------------------------------
# subcommands


def cmd_trace(cfg):
    from .geodesic_flow import trace_batch
    from .xray_transform import random_entries
    spec = cfg.metric_spec()
    d = spec.dim
    X0, Xi0 = random_entries(spec.domain.radius, d, cfg.rays.count, rng=_rng(cfg, 1))
    T = cfg.flow.horizon
    times = np.linspace(0.0, T, 65)
    rec = trace_batch(spec, X0, Xi0, T, times=times, tol=cfg.flow.tol, transport=False)
    rows = []
    for i in range(len(X0)):
        for k, t in enumerate(times):
            rows.append([i, t, *rec.states[i, k]])
    header = ["ray", "t"] + [f"x{j}" for j in range(d)] + [f"xi{j}" for j in range(d)]
    ok = not rec.trapped.any()
    return Outcome(header, rows, {"rays": len(X0), "trapped": int(rec.trapped.sum()),
                                  "max_exit_time": float(np.nanmax(rec.exit_time))}, ok)


def cmd_scatter(cfg):
    from .geodesic_flow import chord_entries, trace_batch
    spec = cfg.metric_spec()
    if spec.dim != 2:
        raise ConfigError("scatter uses planar chords; domain.dimension must be 2")
    R = spec.domain.radius
    rng = _rng(cfg, 2)
    beta = rng.uniform(0, 2 * np.pi, cfg.rays.count)
    b = rng.uniform(-0.99 * R, 0.99 * R, cfg.rays.count)
    X0, Xi0 = chord_entries(R, beta, b)
    rec = trace_batch(spec, X0, Xi0, cfg.flow.horizon, times=[cfg.flow.horizon], tol=cfg.flow.tol,
                      transport=False)
    chord = 2 * np.sqrt(R * R - b * b)
    rows = [[i, beta[i], b[i], rec.exit_time[i], chord[i], *rec.exit_state[i]] for i in range(len(b))]
    summary = {"rays": len(b), "trapped": int(rec.trapped.sum())}
    ok = not rec.trapped.any()
    if spec.is_euclidean:
        err = float(np.abs(rec.exit_time - chord).max())
        summary["max_chord_error"] = err
        ok &= err <= 1e-8
    return Outcome(["ray", "beta", "impact", "L", "chord", "x_exit0", "x_exit1", "xi_exit0", "xi_exit1"],
                   rows, summary, ok)


def cmd_identity_check(cfg):
    from .geodesic_flow import verify_flow_scatter_batch
    from .xray_transform import random_entries
    spec = cfg.metric_spec()
    X0, Xi0 = random_entries(spec.domain.radius, spec.dim, cfg.rays.count, rng=_rng(cfg, 3))
    res, _ = verify_flow_scatter_batch(spec, X0, Xi0, cfg.flow.horizon, cfg.flow.tol)
    worst = float(np.nanmax(res))
    rows = [[i, *res[i]] for i in range(len(res))]
    return Outcome(["ray", "flow_vs_scatter", "exit_time", "exit_point"], rows,
                   {"max_residual": worst, "threshold": 1e-7}, worst <= 1e-7)


def cmd_xray(cfg):
    from .xray_transform import random_entries, transform_X_batch
    spec = cfg.metric_spec()
    d = spec.dim
    X0, Xi0 = random_entries(spec.domain.radius, d, cfg.rays.count, rng=_rng(cfg, 4))
    vals = transform_X_batch(spec, cfg.test_field(), X0, Xi0, cfg.flow.horizon, cfg.quadrature.path_nodes,
                             cfg.flow.tol)
    rows = [[i, *X0[i], *Xi0[i], *vals[i]] for i in range(len(X0))]
    header = (["ray"] + [f"x{j}" for j in range(d)] + [f"xi{j}" for j in range(d)]
              + [f"X{j}" for j in range(2 * d)])
    return Outcome(header, rows, {"rays": len(X0), "max_abs": float(np.abs(vals).max())})


def cmd_adjoint_check(cfg):
    from .acceptance import _dual_h
    from .xray_transform import (adjoint_I, pair_on_M, pair_on_boundary, parallel_beam, random_weighted_field,
                       transform_I_batch)
    spec = cfg.metric_spec()
    if spec.dim != 2:
        raise ConfigError("adjoint-check is planar; domain.dimension must be 2")
    T = cfg.flow.horizon
    Pi = random_weighted_field(2, 4, rng=_rng(cfg, 5), support_radius=0.7)
    bd = parallel_beam(spec.domain.radius, cfg.rays.beam_angles, cfg.rays.beam_impacts)
    I = transform_I_batch(spec, Pi, bd.X0, bd.Xi0, T, cfg.quadrature.path_nodes, cfg.flow.tol)
    lhs = pair_on_boundary(bd, I, _dual_h(bd.X0, bd.Xi0))
    ax = np.linspace(-0.7, 0.7, 33)
    X = np.stack(np.meshgrid(ax, ax, indexing="ij"), -1).reshape(-1, 2)
    X = X[(X**2).sum(1) < 0.7**2]
    A = adjoint_I(spec, _dual_h, X, T, cfg.quadrature.fiber_n, cfg.flow.tol)
    rhs = pair_on_M(spec, X, np.full(len(X), (ax[1] - ax[0]) ** 2), Pi(X), A)
    rel = abs(lhs - rhs) / max(abs(lhs), abs(rhs))
    return Outcome(["boundary_pairing", "interior_pairing", "relative_difference"], [[lhs, rhs, rel]],
                   {"relative_difference": rel, "threshold": 1e-3, "rays": len(bd)}, rel <= 1e-3)


def cmd_potential_check(cfg):
    from .inversion import gauge_covector
    from .tensor_fields import PotentialField
    from .xray_transform import random_entries, transform_X_batch
    spec = cfg.metric_spec()
    v = gauge_covector(spec)
    X0, Xi0 = random_entries(spec.domain.radius, spec.dim, cfg.rays.count, rng=_rng(cfg, 6))
    scale = float(np.linalg.norm(v.vectors[0]))
    rows = []
    for q in (64, 128, 256, cfg.quadrature.path_nodes):
        r = np.abs(transform_X_batch(spec, PotentialField(spec, v), X0, Xi0, cfg.flow.horizon, q,
                                     cfg.flow.tol)).max()
        rows.append([q, r, r / scale])
    worst = rows[-1][2]
    return Outcome(["path_nodes", "max_abs", "relative_to_v"], rows, {"max_relative": worst, "threshold": 1e-6},
                   worst <= 1e-6)


def cmd_linearize_check(cfg):
    from .inversion import linearization_suite
    from .xray_transform import random_entries
    spec = cfg.metric_spec()
    d = spec.dim
    X0, Xi0 = random_entries(spec.domain.radius, d, cfg.rays.count, rng=_rng(cfg, 7))
    eps = cfg.linearize.eps if d == 2 else cfg.linearize.eps_3d
    rep = linearization_suite(spec, cfg.test_field(), eps, X0, Xi0, cfg.flow.horizon,
                              quad_n=cfg.quadrature.path_nodes, tol=cfg.flow.tol)
    slopes = rep.slopes
    if rep.exact:
        ok = True
    elif d == 2:
        ok = all(abs(s - 2.0) <= 0.15 for s in slopes.values())
    else:
        ok = all(1.7 <= s <= 2.3 for s in slopes.values())
    return Outcome(["eps", "christoffel", "connection_flow", "metric_flow"], rep.rows(),
                   {"slopes": slopes, "exact": rep.exact}, ok)


def cmd_decompose(cfg):
    from .acceptance import criterion_decomposition
    r = criterion_decomposition(cfg)
    rows = [[c.name, c.value, c.threshold, c.ok] for c in r.checks]
    return Outcome(["check", "value", "threshold", "pass"], rows, {"passed": r.passed}, r.passed)


def cmd_symbol(cfg):
    from .symbol_lab import complete_cutoff, kernel_analysis, symbol_N1
    spec = cfg.metric_spec()
    d = spec.dim
    rng = _rng(cfg, 8)
    rows = []
    ok = True
    for i in range(cfg.symbol.points):
        x = rng.uniform(-1, 1, d)
        x *= cfg.symbol.point_radius * rng.uniform() ** (1 / d) / np.linalg.norm(x)
        om = rng.normal(size=d)
        op = symbol_N1(spec, complete_cutoff(spec, x, om), x, om, cfg.symbol.n_quad, cfg.flow.horizon, cfg.flow.tol)
        rep = kernel_analysis(op)
        good = rep.kernel_dim == d and rep.max_angle <= 1e-4 and rep.min_rayleigh > 0 and not rep.borderline
        ok &= good
        rows.append([i, *x, *om, rep.kernel_dim, rep.rank, rep.max_angle, rep.min_rayleigh,
                     rep.singular_values[0], good])
    header = (["point"] + [f"x{j}" for j in range(d)] + [f"omega{j}" for j in range(d)]
              + ["kernel_dim", "rank", "max_angle", "min_rayleigh", "sigma_max", "pass"])
    return Outcome(header, rows, {"points": cfg.symbol.points}, ok)


def _focus_direction(spec, x, angle):
    from .metric_model import eval_metric
    g = eval_metric(spec, x[None], order=0)[0][0]
    d = len(x)
    u = np.zeros(d)
    u[0], u[1] = np.cos(angle), np.sin(angle)
    return u / np.sqrt(u @ g @ u)


def cmd_conjugate(cfg):
    from .conjugacy import find_conjugate, jacobi_report
    spec = cfg.metric_spec()
    x = np.asarray(cfg.conjugacy.point, dtype=float)
    u = _focus_direction(spec, x, cfg.conjugacy.angle)
    scan = find_conjugate(spec, x, u, cfg.conjugacy.t_max, tol=cfg.flow.tol, scan=True)
    rep = jacobi_report(spec, x, u, cfg.conjugacy.t_max, tol=cfg.flow.tol)
    rows = [[t, D] for t, D in zip(scan.ts, scan.dets)]
    return Outcome(["t", "det_dexp"], rows, {"point": x, "direction": u, "conjugate": rep.rows(),
                                             "degenerate": scan.degenerate})


def cmd_fold_atlas(cfg):
    from .conjugacy import jacobi_report
    spec = cfg.metric_spec()
    x = np.asarray(cfg.conjugacy.point, dtype=float)
    rows = []
    n = cfg.conjugacy.atlas_angles
    for k in range(n):
        a = cfg.conjugacy.angle + 2 * np.pi * k / n
        u = _focus_direction(spec, x, a)
        rep = jacobi_report(spec, x, u, cfg.conjugacy.t_max, tol=cfg.flow.tol)
        if not rep.radii:
            rows.append([k, a, "", "none", "", "", ""])
            continue
        r = rep.rows()[0]
        rows.append([k, a, r["t"], r["classification"], r["transversality"],
                     "" if r["strong_rank"] is None else r["strong_rank"],
                     "" if r["strong_cokernel_rank"] is None else r["strong_cokernel_rank"]])
    return Outcome(["direction", "angle", "first_conjugate", "classification", "transversality", "strong_rank",
                    "strong_cokernel_rank"], rows, {"directions": n})


def _system(cfg):
    from .inversion import assemble_forward
    from .tensor_fields import GridSpec
    from .xray_transform import boundary_fan, quadrant_bundles
    spec = cfg.metric_spec()
    if spec.dim != 2:
        raise ConfigError("assembly is planar; domain.dimension must be 2")
    grid = GridSpec(spec.domain, cfg.grid.n)
    rays = boundary_fan(spec.domain.radius, cfg.rays.points, cfg.rays.angles)
    S = assemble_forward(spec, grid, rays, quadrant_bundles(cfg.rays.bundles), cfg.flow.horizon,
                         cfg.quadrature.assembly_nodes, cfg.flow.tol)
    return S


def cmd_assemble(cfg, out: Path):
    S = _system(cfg)
    path = out / "forward_system.npz"
    S.save(path)
    summary = {"rows": S.matrix.shape[0], "columns": S.matrix.shape[1], "nnz": S.meta["nnz"],
               "active_columns": len(S.active), "potential_residual": S.potential_residual,
               "path_nodes": S.quad_n, "horizon": S.T, "interpolation": S.meta["interpolation"],
               "bundles": S.meta["bundles"]}
    rows = [[k, v] for k, v in summary.items()]
    ok = np.isfinite(S.potential_residual)
    return Outcome(["key", "value"], rows, summary, ok, [path.name])


def cmd_invert(cfg):
    from .inversion import reconstruct, sample_truth
    S = _system(cfg)
    inv = cfg.inversion
    f, fs = sample_truth(S.spec, S.grid, cfg.test_field())
    data = S.apply(f)
    r0 = reconstruct(S, S.rays.with_values(data), inv.reg, inv.iters, inv.tol, truth=fs)
    runs = [("noiseless", r0)]
    if inv.noise > 0:
        rng = _rng(cfg, 9)
        noisy = data + rng.normal(size=data.shape) * inv.noise * np.sqrt(np.mean(data**2))
        runs.append(("noisy", reconstruct(S, S.rays.with_values(noisy), inv.reg, inv.iters, inv.tol, truth=fs)))
    rows = []
    for label, r in runs:
        rows += [[label, k, v] for k, v in enumerate(r.residual_history)]
    summary = {label: {"relative_error": r.relative_error, "iterations": r.iterations, "converged": r.converged,
                       "reg": r.reg} for label, r in runs}
    ok = r0.relative_error <= 0.10 and all(r.relative_error <= 0.30 for _, r in runs)
    return Outcome(["run", "iteration", "residual"], rows, summary, ok)


def cmd_acceptance(cfg, only=None):
    from .acceptance import csv_body, run_acceptance
    results = run_acceptance(cfg, only=only)
    text = csv_body(results)
    reader = list(csv.reader(io.StringIO(text)))
    out = Outcome(reader[0], reader[1:], {f"criterion_{r.number}": {"passed": r.passed, "title": r.title}
                                          for r in results}, all(r.passed for r in results))
    out.timings = {f"criterion_{r.number}": r.seconds for r in results}
    return out


# ---------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="lensxray", description="Geodesic X-ray transform experiments.")
    p.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    p.add_argument("subcommand", choices=SUBCOMMANDS)
    p.add_argument("config", help="TOML experiment config")
    p.add_argument("--set", dest="overrides", action="append", default=[], metavar="KEY=VALUE",
                   help="override a dotted config key (repeatable)")
    p.add_argument("--out", help="output directory (default: run.output)")
    p.add_argument("--only", help="comma-separated criteria for 'acceptance'")
    p.add_argument("--quiet", action="store_true")
    return p


def run(subcommand: str, config_path, overrides=(), out=None, only=None, quiet=False) -> int:
    try:
        cfg = ExperimentConfig.load(config_path).with_overrides(overrides)
    except FileNotFoundError:
        print(f"error: config file {config_path} not found", file=sys.stderr)
        return 2
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 2
    outdir = Path(out or cfg.run.output)
    outdir.mkdir(parents=True, exist_ok=True)
    t0 = time.perf_counter()
    try:
        if subcommand == "acceptance":
            sel = None
            if only:
                try:
                    sel = [int(s) for s in only.split(",")]
                except ValueError:
                    print("error: --only takes comma-separated integers", file=sys.stderr)
                    return 2
            result = cmd_acceptance(cfg, sel)
        elif subcommand == "assemble":
            result = cmd_assemble(cfg, outdir)
        else:
            result = COMMANDS[subcommand](cfg)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 2
    seconds = time.perf_counter() - t0
    stem = subcommand.replace("-", "_")
    (outdir / f"{stem}.csv").write_text(result.csv_text())
    (outdir / f"{stem}.json").write_text(json.dumps(_jsonable({"subcommand": subcommand, "passed": result.ok,
                                                                **result.summary}), indent=2, sort_keys=True))
    manifest = {
        "subcommand": subcommand,
        "config": str(config_path),
        "config_hash": cfg.hash(),
        "overrides": list(overrides),
        "seed": cfg.run.seed,
        "passed": result.ok,
        "seconds": seconds,
        "timings": getattr(result, "timings", {}),
        "created": datetime.now(timezone.utc).isoformat(),
        "files": [f"{stem}.csv", f"{stem}.json"] + result.extra_files,
        "versions": _versions(),
    }
    (outdir / "manifest.json").write_text(json.dumps(_jsonable(manifest), indent=2, sort_keys=True))
    if not quiet:
        print(f"{subcommand}: {'pass' if result.ok else 'FAIL'} ({seconds:.1f}s) -> {outdir}")
    return 0 if result.ok else 1


def _versions() -> dict:
    import numba
    import scipy
    return {"lensxray": __version__, "python": platform.python_version(), "numpy": np.__version__,
            "scipy": scipy.__version__, "numba": numba.__version__}


COMMANDS = {
    "trace": cmd_trace,
    "scatter": cmd_scatter,
    "identity-check": cmd_identity_check,
    "xray": cmd_xray,
    "adjoint-check": cmd_adjoint_check,
    "potential-check": cmd_potential_check,
    "linearize-check": cmd_linearize_check,
    "decompose": cmd_decompose,
    "symbol": cmd_symbol,
    "conjugate": cmd_conjugate,
    "fold-atlas": cmd_fold_atlas,
    "invert": cmd_invert,
}


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    return run(args.subcommand, args.config, args.overrides, args.out, args.only, args.quiet)


if __name__ == "__main__":
    sys.exit(main())
