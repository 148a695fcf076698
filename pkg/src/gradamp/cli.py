"""Command-line pipeline: design, simulate, verify, sweep, report.

Exit codes: 0 success, 2 validation error (bad config, missing artifact,
infeasible geometry), 3 numerical failure (fit, solver, root finding).
"""
from __future__ import annotations

import argparse
import copy
import csv
import json
import logging
import math
import sys
from pathlib import Path

import numpy as np

from . import __version__
from .amplify import (Constants, InfeasibleParams, VerificationReport, grad_sup, select_params,
                      superlevel_measure, verify_snapshots)
from .config import ConfigError, ExperimentConfig
from .geometry import AmplificationSites, EmptyRegion, PlacementInfeasible, Union, place_centers
from .herglotz import (FitError, build_fit_target, exact_single_ball_kernel_2d, fit_kernel,
                       kernel_report, load_kernel, make_u0, save_kernel, sweep_lambda)
from .schrodinger import (Bump, CoefficientError, CoefficientSet, ComplexField, FixedPointStall,
                          Grid2D, MatrixProfile, SolverDivergence, assemble_F1, assemble_F2,
                          assemble_hat_c, integrate, relative_l2, solve_linear_auxiliary,
                          solve_linear_ibvp, solve_nonlinear_auxiliary, solve_nonlinear_cauchy)
from .transmission import NoRootError, ScanLimitError, TransmissionMode

log = logging.getLogger("gradamp")

EXIT_OK, EXIT_VALIDATION, EXIT_NUMERICAL = 0, 2, 3


class MissingArtifact(FileNotFoundError):
    """A pipeline stage ran before its predecessor produced its files."""


VALIDATION_ERRORS = (ConfigError, MissingArtifact, PlacementInfeasible, EmptyRegion, CoefficientError)
NUMERICAL_ERRORS = (FitError, SolverDivergence, FixedPointStall, NoRootError, ScanLimitError,
                    InfeasibleParams, FloatingPointError, np.linalg.LinAlgError)


# ---------------------------------------------------------------------------
# Artifact helpers
# ---------------------------------------------------------------------------

def _write_json(path: Path, data) -> None:
    path.write_text(json.dumps(data, indent=2, sort_keys=True), encoding="utf-8")


def _read_json(path: Path) -> dict:
    if not path.exists():
        raise MissingArtifact(f"missing artifact: {path}")
    return json.loads(path.read_text(encoding="utf-8"))


def _require(path: Path) -> Path:
    if not path.exists():
        raise MissingArtifact(f"missing artifact: {path}")
    return path


def _snapshot_files(folder: Path) -> list[Path]:
    files = sorted(folder.glob("snap_*.txt")) if folder.is_dir() else []
    if not files:
        raise MissingArtifact(f"no snapshots found in {folder}")
    return files


def simulation_grid(cfg: ExperimentConfig, sites: AmplificationSites) -> Grid2D:
    """Square box around D and the amplification balls, widened by the margin.

    The box is square so that ``grid.n`` nodes per side give an ``n x n`` grid.
    """
    lo, hi = _work_window(cfg, sites)
    m = cfg.geometry.margin
    lo, hi = lo - m, hi + m
    centre, half = 0.5 * (lo + hi), 0.5 * float(np.max(hi - lo))
    return Grid2D.around(centre - half, centre + half, cfg.grid.n, cfg.grid.dt, cfg.T)


def _work_window(cfg: ExperimentConfig, sites: AmplificationSites):
    lo, hi = cfg.region().bbox()
    reach = 3.0 * sites.r0
    lo = np.minimum(lo, (sites.points_x - reach).min(axis=0))
    hi = np.maximum(hi, (sites.points_x + reach).max(axis=0))
    lo = np.minimum(lo, (sites.centers_y - sites.r0).min(axis=0))
    hi = np.maximum(hi, (sites.centers_y + sites.r0).max(axis=0))
    return lo, hi


# ---------------------------------------------------------------------------
# Stages
# ---------------------------------------------------------------------------

def run_design(cfg: ExperimentConfig, out: Path, exact_kernel: bool = False) -> dict:
    """Parameters, sites, modes and kernel; writes ``design.json`` and ``kernel.txt``."""
    out.mkdir(parents=True, exist_ok=True)
    D = cfg.region()
    points = np.asarray(cfg.geometry.points, float)
    rule = select_params(cfg.M_target, points, D, cfg.omega(), cfg.constants(),
                         problem=cfg.problem, dim=2, T=cfg.T)
    r0 = cfg.construction.r0 or rule.r0
    m = cfg.construction.m or rule.m
    sites = place_centers(points, r0, D, cfg.omega())
    modes = [TransmissionMode.build(2, m, r0, y) for y in sites.centers_y]
    f = cfg.fitter
    target = build_fit_target(modes, D, r0, n_radial=f.n_radial, n_angular=f.n_angular,
                              d_spacing=f.d_spacing, ball_weight=f.ball_weight, d_weight=f.d_weight)
    sweep = None
    if exact_kernel:
        if sites.n != 1:
            raise ConfigError("the exact-kernel path needs exactly one site")
        target = build_fit_target(modes, None, r0, n_radial=f.n_radial, n_angular=f.n_angular)
        kernel = exact_single_ball_kernel_2d(modes[0])
        report = kernel_report(target, kernel, "exact")
    else:
        lam = f.lam
        if lam is None:
            sweep = sweep_lambda(target, f.n_nodes, f.lambdas)
            lam = sweep.chosen
        kernel, report = fit_kernel(target, f.n_nodes, lam, method=f.method)
    feasible = report.eps_hat <= rule.eps
    if cfg.construction.strict and not feasible:
        raise InfeasibleParams(f"achieved residual {report.eps_hat:.4g} exceeds the required {rule.eps:.4g}")
    save_kernel(kernel, out / "kernel.txt")
    design = {
        "version": __version__,
        "rule_params": rule.to_dict(),
        "r0": r0, "m": m,
        "sites": sites.to_dict(),
        "modes": [md.to_dict() for md in modes],
        "fit": report.to_dict(),
        "lambda_sweep": sweep.to_dict() if sweep is not None else None,
        "exact_kernel": bool(exact_kernel),
        "feasible": bool(feasible),
    }
    _write_json(out / "design.json", design)
    log.info("design: r0=%g m=%d eps_hat=%.6g (required %.6g)", r0, m, report.eps_hat, rule.eps)
    return design


def _homogeneous_drift(cfg: ExperimentConfig, coeffs: CoefficientSet, grid: Grid2D, u0) -> float:
    """Mass drift of a windowed copy of ``u0`` with zero boundary data."""
    coarse = grid.with_steps((grid.nx - 1) // 2 + 1, grid.dt)
    lo = np.array([coarse.x0, coarse.y0])
    hi = np.array([coarse.x1, coarse.y1])
    window = Bump(tuple(0.5 * (lo + hi)), 0.45 * float(np.min(hi - lo)))
    pts = coarse.points()
    phi = (u0.value(pts, 0.0) * window.value(pts)).reshape(coarse.shape)
    profile = coeffs.A
    traj = integrate(coarse, profile, phi, stride=cfg.stride, solver=cfg.solver.method,
                     stencil=cfg.solver.stencil)
    mass = np.asarray(traj.mass)
    return float(np.max(np.abs(mass - mass[0])) / mass[0]) if mass[0] > 0 else 0.0


def _truncation_study(cfg: ExperimentConfig, coeffs: CoefficientSet, grid: Grid2D, u0) -> float:
    """Margin-doubling check of the truncated Cauchy problem on a half-resolution grid.

    Returns the relative L2 difference at ``T`` on the original box between
    the run on the box and the run on a box widened by one more margin per
    side. Wider boxes reach where ``u0`` is orders of magnitude larger than
    near ``D``, and its discretisation error there swamps the comparison.
    """
    coarse = grid.with_steps((grid.nx - 1) // 2 + 1, grid.dt)
    h = coarse.dx
    kx = ky = max(1, int(round(cfg.geometry.margin / h)))
    wide = Grid2D(coarse.x0 - kx * h, coarse.x1 + kx * h, coarse.y0 - ky * h, coarse.y1 + ky * h,
                  coarse.nx + 2 * kx, coarse.ny + 2 * ky, grid.dt, grid.T)
    opts = {"stride": grid.n_steps, "solver": cfg.solver.method, "stencil": cfg.solver.stencil}
    small = solve_nonlinear_cauchy(coeffs, coarse, lambda p: u0.value(p, 0.0), u0, **opts)
    big = solve_nonlinear_cauchy(coeffs, wide, lambda p: u0.value(p, 0.0), u0, **opts)
    inner = big.final.values[kx:kx + coarse.nx, ky:ky + coarse.ny]
    return relative_l2(small.final.values, inner)


def _direct_run(cfg: ExperimentConfig, coeffs: CoefficientSet, grid: Grid2D, u0):
    """Full problem with ``u0`` as initial and boundary (or far-field) data."""
    opts = {"stride": cfg.stride, "solver": cfg.solver.method, "stencil": cfg.solver.stencil}
    if cfg.problem == "linear":
        return solve_linear_ibvp(coeffs, grid, lambda p: u0.value(p, 0.0), u0.value, **opts)
    return solve_nonlinear_cauchy(coeffs, grid, lambda p: u0.value(p, 0.0), u0, **opts)


def _dump(traj, folder: Path) -> None:
    folder.mkdir(parents=True, exist_ok=True)
    for old in folder.glob("snap_*.txt"):
        old.unlink()
    for k, snap in enumerate(traj.snapshots):
        snap.save(folder / f"snap_{k:04d}.txt")
    traj.final.save(folder / "final.txt")


def run_simulate(cfg: ExperimentConfig, out: Path) -> dict:
    """Direct and auxiliary runs with snapshot dumps; writes ``simulate.json``."""
    design = _read_json(out / "design.json")
    kernel = load_kernel(_require(out / "kernel.txt"))
    u0 = make_u0(kernel)
    sites = AmplificationSites.from_dict(design["sites"])
    D = cfg.region()
    coeffs = cfg.coefficient_set()
    coeffs.validate(D, seed=cfg.seed)
    grid = simulation_grid(cfg, sites)
    opts = {"stride": cfg.stride, "solver": cfg.solver.method, "stencil": cfg.solver.stencil}
    log.info("simulate: grid %dx%d, %d steps", grid.nx, grid.ny, grid.n_steps)
    direct = _direct_run(cfg, coeffs, grid, u0)
    if cfg.problem == "linear":
        aux = solve_linear_auxiliary(coeffs, grid, assemble_F1(coeffs, u0), **opts)
    else:
        aux = solve_nonlinear_auxiliary(coeffs, grid, assemble_F2(coeffs, u0), assemble_hat_c(coeffs, u0),
                                        u0, **opts)
    _dump(direct, out / "direct")
    _dump(aux, out / "auxiliary")
    pts = grid.points()
    u0_T = u0.value(pts, grid.T)
    recombined = u0_T + aux.final.values.ravel()
    lo, hi = _work_window(cfg, sites)
    window = np.all((pts >= lo) & (pts <= hi), axis=1)
    uT = direct.final.values.ravel()
    summary = {
        "grid": {"x0": grid.x0, "x1": grid.x1, "y0": grid.y0, "y1": grid.y1, "nx": grid.nx,
                 "ny": grid.ny, "dt": grid.dt, "T": grid.T},
        "times": direct.times,
        "n_snapshots": len(direct.snapshots),
        "decomposition_discrepancy": relative_l2(recombined, uT),
        "decomposition_discrepancy_window": relative_l2(recombined[window], uT[window]),
        "auxiliary_relative_size": float(np.linalg.norm(aux.final.values) / max(np.linalg.norm(uT), 1e-300)),
        "picard_direct_max": int(max(direct.picard_counts)) if direct.picard_counts else 0,
        "picard_auxiliary_max": int(max(aux.picard_counts)) if aux.picard_counts else 0,
        "conservation_drift": _homogeneous_drift(cfg, coeffs, grid, u0),
        "truncation_margin_doubling": (_truncation_study(cfg, coeffs, grid, u0)
                                    if cfg.problem == "nonlinear" else None),
    }
    _write_json(out / "simulate.json", summary)
    log.info("simulate: discrepancy %.3e, drift %.3e", summary["decomposition_discrepancy"],
             summary["conservation_drift"])
    return summary


def run_verify(cfg: ExperimentConfig, out: Path) -> VerificationReport:
    """Amplification measurements on every stored direct snapshot."""
    design = _read_json(out / "design.json")
    sim = _read_json(out / "simulate.json")
    files = _snapshot_files(out / "direct")
    g = sim["grid"]
    snaps = []
    for path in files:
        s = ComplexField.load(path, dt=g["dt"], T=g["T"])
        snaps.append(s)
    sites = AmplificationSites.from_dict(design["sites"])
    report = verify_snapshots(snaps, sites, cfg.region(), M_target=cfg.M_target,
                              eps_hat=design["fit"]["eps_hat"], ratio_target=cfg.verify.ratio_target,
                              constants=cfg.constants(), pair_budget=cfg.verify.pair_budget, seed=cfg.seed)
    report.conservation_drift = sim["conservation_drift"]
    report.decomposition_discrepancy = sim["decomposition_discrepancy"]
    report.flags["conservation"] = "pass" if report.conservation_drift <= 1e-10 else "fail"
    report.flags["decomposition"] = "pass" if report.decomposition_discrepancy <= 5e-3 else "fail"
    report.write(out / "report.json", out / "report.txt")
    return report


def run_report(cfg: ExperimentConfig, out: Path) -> str:
    """Human-readable summary of all stage artifacts; writes ``summary.txt``."""
    design = _read_json(out / "design.json")
    sim = _read_json(out / "simulate.json")
    rep = VerificationReport.read(_require(out / "report.json"))
    lines = [
        f"problem: {cfg.problem}   M_target: {cfg.M_target}   T: {cfg.T}",
        f"r0: {design['r0']}   m: {design['m']}   sites: {len(design['sites']['points_x'])}",
        f"rule parameters: r0={design['rule_params']['r0']:.6g} eps={design['rule_params']['eps']:.6g} "
        f"m={design['rule_params']['m']}",
        f"fit: lambda={design['fit']['lam']:.3g} nodes={design['fit']['n_nodes']} "
        f"eps_hat={design['fit']['eps_hat']:.6g} feasible={design['feasible']}",
        f"grid: {sim['grid']['nx']}x{sim['grid']['ny']} dt={sim['grid']['dt']:.6g} snapshots={sim['n_snapshots']}",
        f"picard max (direct/auxiliary): {sim['picard_direct_max']}/{sim['picard_auxiliary_max']}",
        f"decomposition discrepancy (grid / window): {sim['decomposition_discrepancy']:.3e} / "
        f"{sim['decomposition_discrepancy_window']:.3e}",
    ]
    if sim.get("truncation_margin_doubling") is not None:
        lines.append(f"margin-doubling truncation change: {sim['truncation_margin_doubling']:.3e}")
    lines += [
        "",
        rep.summary().rstrip(),
    ]
    text = "\n".join(lines) + "\n"
    (out / "summary.txt").write_text(text, encoding="utf-8")
    return text


# ---------------------------------------------------------------------------
# Sweeps
# ---------------------------------------------------------------------------

def plane_wave_error(n: int, T: float = 1.0, angle: float = 0.3, stencil: str = "auto") -> float:
    """Max error of the free solver against ``exp(i(x.theta - t))`` on ``[0, 2]^2``."""
    steps = max(1, int(round(T * (n - 1) / 1.6)))
    grid = Grid2D(0.0, 2.0, 0.0, 2.0, n, n, T / steps, T)
    theta = np.array([math.cos(angle), math.sin(angle)])

    def exact(p, t):
        return np.exp(1j * (p @ theta - t))

    coeffs = CoefficientSet(MatrixProfile("identity"))
    traj = solve_linear_ibvp(coeffs, grid, lambda p: exact(p, 0.0), exact, stride=steps, stencil=stencil)
    return float(np.max(np.abs(traj.final.values.ravel() - exact(grid.points(), T))))


SWEEP_AXES = ("m", "lambda", "n_nodes", "grid", "g_scale")


def _g_scale_rows(cfg: ExperimentConfig, out: Path, scales: list[float]) -> list[dict]:
    """Re-simulate with the designed kernel times each factor at fixed geometry.

    The super-level area is measured at one absolute level for every factor:
    half the smallest per-site gradient sup of the largest factor. Smaller
    factors therefore probe a higher level relative to their own gradients.
    """
    if any(not s > 0 for s in scales):
        raise ConfigError("g_scale values must be positive")
    design = run_design(cfg, out / "g_scale_base")
    kernel = load_kernel(out / "g_scale_base" / "kernel.txt")
    sites = AmplificationSites.from_dict(design["sites"])
    D = cfg.region()
    coeffs = cfg.coefficient_set()
    coeffs.validate(D, seed=cfg.seed)
    grid = simulation_grid(cfg, sites)
    regions = [sites.amplification_region(i, D) for i in range(sites.n)]
    union = Union(tuple(regions))
    runs: dict[float, list | str] = {}
    for s in sorted(set(scales), reverse=True):
        try:
            traj = _direct_run(cfg, coeffs, grid, make_u0(kernel.scaled(s)))
            runs[s] = [(snap, [grad_sup(snap, r)[0] for r in regions]) for snap in traj.snapshots]
        except NUMERICAL_ERRORS as exc:
            runs[s] = f"error: {exc}"
    ok = [s for s, r in runs.items() if not isinstance(r, str)]
    if not ok:
        return [{"axis": "g_scale", "value": s, "status": runs[s]} for s in scales]
    level = 0.5 * min(min(gs) for _, gs in runs[max(ok)])
    rows = []
    for s in scales:
        row = {"axis": "g_scale", "value": s, "status": "ok", "level": level}
        if isinstance(runs[s], str):
            row["status"] = runs[s]
        else:
            gs = np.min([gs for _, gs in runs[s]], axis=0)
            row.update(eps_hat=s * design["fit"]["eps_hat"],
                       grad_sup=";".join(f"{v:.6g}" for v in gs),
                       relative_level=level / float(gs.min()),
                       area=max(superlevel_measure(snap, level, union) for snap, _ in runs[s]))
        rows.append(row)
    return rows


def run_sweep(cfg: ExperimentConfig, out: Path, axis: str, values: list[float]) -> list[dict]:
    """One row per axis value; failures are recorded and the sweep continues."""
    if axis not in SWEEP_AXES:
        raise ConfigError(f"axis must be one of {SWEEP_AXES}")
    if not values:
        raise ConfigError("sweep needs at least one value")
    out.mkdir(parents=True, exist_ok=True)
    rows: list[dict] = _g_scale_rows(cfg, out, values) if axis == "g_scale" else []
    prev_err = None
    for val in values if axis != "g_scale" else []:
        row = {"axis": axis, "value": val, "status": "ok"}
        try:
            if axis == "grid":
                err = plane_wave_error(int(val), cfg.T)
                row["error"] = err
                row["order"] = math.log2(prev_err / err) if prev_err else ""
                prev_err = err
            else:
                sub = copy.deepcopy(cfg)
                if axis == "m":
                    sub.construction.m = int(val)
                elif axis == "lambda":
                    sub.fitter.lam = float(val)
                else:
                    sub.fitter.n_nodes = int(val)
                sub_out = out / f"{axis}_{val}"
                design = run_design(sub, sub_out)
                sim = run_simulate(sub, sub_out)
                rep = run_verify(sub, sub_out)
                gs = np.asarray(rep.grad_sup_per_site).min(axis=0)
                row.update(eps_hat=design["fit"]["eps_hat"],
                           grad_sup=";".join(f"{v:.6g}" for v in gs),
                           ratio=float(np.min(rep.ratio_per_site)),
                           area=float(np.max(rep.superlevel_area)),
                           discrepancy=sim["decomposition_discrepancy"])
        except (*VALIDATION_ERRORS, *NUMERICAL_ERRORS, ValueError) as exc:
            row["status"] = f"error: {exc}"
        rows.append(row)
    keys = ["axis", "value", "status", "eps_hat", "grad_sup", "ratio", "area", "discrepancy", "error", "order",
            "level", "relative_level"]
    with open(out / f"sweep_{axis}.csv", "w", newline="", encoding="utf-8") as fh:
        writer = csv.DictWriter(fh, fieldnames=keys, restval="")
        writer.writeheader()
        writer.writerows(rows)
    return rows


# ---------------------------------------------------------------------------
# Entry point
# ---------------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="gradamp", description=__doc__.splitlines()[0])
    parser.add_argument("--version", action="version", version=__version__)
    sub = parser.add_subparsers(dest="command", required=True)
    for name in ("design", "simulate", "verify", "sweep", "report"):
        p = sub.add_parser(name)
        p.add_argument("--config", required=True, type=Path, help="experiment YAML file")
        p.add_argument("--out", type=Path, default=None, help="output directory (overrides config)")
        p.add_argument("--seed", type=int, default=None, help="random seed (overrides config)")
        p.add_argument("--stride", type=int, default=None, help="snapshot stride (overrides config)")
        p.add_argument("--exact-kernel", action="store_true", help="closed-form single-site kernel")
        p.add_argument("-v", "--verbose", action="store_true")
        if name == "sweep":
            p.add_argument("--axis", required=True, choices=SWEEP_AXES)
            p.add_argument("--values", required=True, type=float, nargs="+")
    return parser


def _load(args) -> tuple[ExperimentConfig, Path]:
    cfg = ExperimentConfig.load(args.config)
    if args.seed is not None:
        cfg.seed = args.seed
    if args.stride is not None:
        if args.stride < 1:
            raise ConfigError("--stride must be >= 1")
        cfg.stride = args.stride
    out = args.out if args.out is not None else Path(cfg.output)
    if args.out is not None:
        cfg.output = str(args.out)
    return cfg, out


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(message)s")
    try:
        cfg, out = _load(args)
        if args.command == "design":
            d = run_design(cfg, out, args.exact_kernel)
            print(f"eps_hat={d['fit']['eps_hat']:.6g} r0={d['r0']} m={d['m']} -> {out}")
        elif args.command == "simulate":
            s = run_simulate(cfg, out)
            print(f"snapshots={s['n_snapshots']} discrepancy={s['decomposition_discrepancy']:.3e} -> {out}")
        elif args.command == "verify":
            print(run_verify(cfg, out).summary(), end="")
        elif args.command == "sweep":
            for row in run_sweep(cfg, out, args.axis, args.values):
                print(row)
        else:
            print(run_report(cfg, out), end="")
    except VALIDATION_ERRORS as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_VALIDATION
    except NUMERICAL_ERRORS as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERICAL
    return EXIT_OK


if __name__ == "__main__":  # pragma: no cover
    sys.exit(main())
