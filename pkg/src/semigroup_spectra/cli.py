"""Command-line interface and configuration-driven pipeline.

Exit codes
----------
0   success
1   a numerical property check failed (the check is named on stderr)
2   invalid model or atlas axiom failure
3   structural atlas error (unresolved ids)
64  configuration or argument parse error
66  missing upstream artifact (``emit_plot_data``)

The environment variable ``SGS_THREADS`` caps BLAS/LAPACK worker threads.
"""
from __future__ import annotations

import argparse
import csv
import json
import math
import os
import sys
from contextlib import nullcontext
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import __version__
from .branched_surface import AtlasStructureError, atlas_from_json, validate_atlas
from .laplace_inversion import InversionConfig, bromwich_invert, bromwich_ladder
from .measure_space import (
    CellBasis,
    assemble_transfer,
    average_operator,
    d_norm,
    derivative_operators,
    load_measure_csv,
    save_matrix,
    save_measure_csv,
    tv_norm,
    tv_operator_norm,
)
from .resolvent import (
    GeneratorResolvent,
    PanelResolvent,
    ResolventConfig,
    build_generator,
    resolvent_from_generator,
    resolvent_quadrature,
)
from .semiflow_model import ModelError, SamplingError, SuspensionModel, bundled_model, model_from_json, verify_expansion
from .spectra import (
    SpectralReport,
    eigen,
    invariant_measure,
    mixing_verdict,
    numerical_rank,
    pole_scan,
    simplicity_verdict,
    spectral_projector,
)

EXIT_OK, EXIT_CHECK, EXIT_MODEL, EXIT_STRUCTURE, EXIT_USAGE, EXIT_NOINPUT = 0, 1, 2, 3, 64, 66
PRECISION = ".10g"
TASK_ORDER = ["validate", "invariant", "spectrum", "poles", "projector", "invert", "report"]
TASK_DEPENDS = {"projector": ["poles"]}
DEFAULT_TOLERANCES = {
    "column_sum": 1e-12,
    "invariant_eigenvalue": 1e-6,
    "invariant_defect": 5e-2,
    "projector_idempotency": 1e-7,
    "ladder_noise": 0.05,
    "pole_threshold": 1e-6,
}


class UsageError(Exception):
    pass


class CheckFailure(Exception):
    def __init__(self, check: str, detail: str):
        super().__init__(f"{check}: {detail}")
        self.check = check


# --------------------------------------------------------------------------
# serialisation


def _clean(obj):
    """Recursively round reals to fixed precision; complex numbers become ``[re, im]``."""
    if isinstance(obj, dict):
        return {str(k): _clean(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_clean(v) for v in obj]
    if isinstance(obj, np.ndarray):
        return _clean(obj.tolist())
    if isinstance(obj, (bool, np.bool_)):
        return bool(obj)
    if isinstance(obj, (int, np.integer)):
        return int(obj)
    if isinstance(obj, (complex, np.complexfloating)):
        return [_clean(float(obj.real)), _clean(float(obj.imag))]
    if isinstance(obj, (float, np.floating)):
        x = float(obj)
        if math.isnan(x):
            return "nan"
        if math.isinf(x):
            return "inf" if x > 0 else "-inf"
        return float(format(x, PRECISION))
    return obj


def dumps(obj) -> str:
    return json.dumps(_clean(obj), indent=2, sort_keys=True)


def write_json(path: Path, obj) -> None:
    path.write_text(dumps(obj) + "\n")


def write_csv(path: Path, header: list[str], rows) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(header)
        for r in rows:
            w.writerow([format(v, PRECISION) if isinstance(v, float) else v for v in r])


# --------------------------------------------------------------------------
# argument helpers


def parse_model(spec: str) -> SuspensionModel:
    if spec.startswith("bundled:"):
        kind = spec.split(":", 1)[1]
        try:
            return bundled_model(kind)
        except KeyError as exc:
            raise UsageError(f"unknown bundled model {kind!r}") from exc
    try:
        with open(spec) as fh:
            data = json.load(fh)
    except FileNotFoundError as exc:
        raise UsageError(f"model file not found: {spec}") from exc
    except json.JSONDecodeError as exc:
        raise ModelError(f"invalid JSON in {spec}: {exc}") from exc
    return model_from_json(data)


def parse_pair(text: str, kind=float) -> tuple:
    parts = [p.strip() for p in str(text).split(",")]
    if len(parts) != 2:
        raise UsageError(f"expected two comma-separated values, got {text!r}")
    try:
        return kind(parts[0]), kind(parts[1])
    except ValueError as exc:
        raise UsageError(f"cannot parse {text!r}") from exc


def parse_complex(text: str) -> complex:
    re, im = parse_pair(text)
    return complex(re, im)


def parse_triple(text: str) -> tuple[float, float, float]:
    parts = str(text).split(",")
    if len(parts) != 3:
        raise UsageError(f"expected re_min,re_max,im_max, got {text!r}")
    try:
        return tuple(float(p) for p in parts)  # type: ignore[return-value]
    except ValueError as exc:
        raise UsageError(f"cannot parse {text!r}") from exc


def model_issues(model: SuspensionModel) -> list[str]:
    return model.issues()


def expansion_lambda(model: SuspensionModel) -> float:
    try:
        return verify_expansion(model).lambda_hat
    except SamplingError:
        return 0.0


def _thread_limit():
    n = os.environ.get("SGS_THREADS")
    if not n:
        return nullcontext()
    from threadpoolctl import threadpool_limits

    return threadpool_limits(limits=max(1, int(n)))


# --------------------------------------------------------------------------
# task implementations shared by subcommands and the pipeline


@dataclass
class Context:
    model: SuspensionModel
    basis: CellBasis
    out: Path
    seed: int = 0
    tolerances: dict = field(default_factory=lambda: dict(DEFAULT_TOLERANCES))
    _panel: PanelResolvent | None = None
    results: dict = field(default_factory=dict)

    @property
    def panel(self) -> PanelResolvent:
        if self._panel is None:
            self._panel = PanelResolvent(self.model, self.basis)
        return self._panel


def task_validate(ctx: Context, params: dict) -> dict:
    issues = model_issues(ctx.model)
    atlas_report = validate_atlas(ctx.model.atlas, grid=int(params.get("atlas_grid", 16)), seed=ctx.seed)
    exp = verify_expansion(ctx.model, n_samples=int(params.get("samples", 2000)), seed=ctx.seed)
    out = {"model_issues": issues, "atlas": atlas_report.to_dict(), "expansion": exp.to_dict(), "passed": not issues and atlas_report.passed and exp.passed}
    write_json(ctx.out / "validate.json", out)
    return out


def task_invariant(ctx: Context, params: dict) -> dict:
    t_probe = float(params.get("t_probe", 0.5 * (math.sqrt(5) - 1)))
    mu, defect = invariant_measure(ctx.model, ctx.basis, t_probe, float(params.get("t_check", math.sqrt(2))))
    save_measure_csv(mu, ctx.out / "invariant.csv")
    out = {"mass": mu.pair_one(), "tv_norm": tv_norm(mu), "d_norm": d_norm(mu, ctx.basis), "defect": defect}
    write_json(ctx.out / "invariant.json", out)
    if defect > ctx.tolerances["invariant_defect"]:
        raise CheckFailure("invariant_defect", f"|M(t') mu - mu| = {defect:.3g}")
    return out


def task_spectrum(ctx: Context, params: dict) -> dict:
    t = float(params.get("t", 1.0))
    k = int(params.get("k", 8))
    z = complex(params.get("z", 2.0))
    M = assemble_transfer(ctx.model, ctx.basis, t)
    col_err = float(np.max(np.abs(M.matrix.sum(axis=0) - 1)))
    if col_err > ctx.tolerances["column_sum"]:
        raise CheckFailure("column_sum", f"max column-sum error {col_err:.3g}")
    ev_t = [p.eigenvalue for p in eigen(M, k)]
    R = resolvent_quadrature(ctx.model, ctx.basis, z, evaluator=ctx.panel)
    ev_r = [p.eigenvalue for p in eigen(R, k)]
    write_csv(ctx.out / "eigenvalues.csv", ["operator", "re", "im", "modulus"],
              [("M", w.real, w.imag, abs(w)) for w in ev_t] + [("R", w.real, w.imag, abs(w)) for w in ev_r])
    out = {"t": t, "z": z, "transfer_eigenvalues": ev_t, "resolvent_eigenvalues": ev_r, "column_sum_error": col_err}
    write_json(ctx.out / "spectrum.json", out)
    if min(abs(w - 1) for w in ev_t) > ctx.tolerances["invariant_eigenvalue"]:
        raise CheckFailure("transfer_eigenvalue_one", "no eigenvalue of M(t) near 1")
    return out


def task_poles(ctx: Context, params: dict) -> dict:
    strip = params.get("strip", [-0.3, 0.3, 13.0])
    re_min, re_max, im_max = (parse_triple(strip) if isinstance(strip, str) else tuple(float(v) for v in strip))
    d = float(params.get("d", 0.1))
    lam = expansion_lambda(ctx.model)
    sr = pole_scan(ctx.panel, re_min, re_max, im_max, d, d, lambda_fit=lam, threshold=ctx.tolerances["pole_threshold"])
    write_csv(ctx.out / "poles.csv", ["re", "im", "order", "rank", "strength"],
              [(p.location.real, p.location.imag, p.order_label, p.rank, p.strength) for p in sr.poles])
    write_csv(ctx.out / "pole_scan.csv", ["re", "im", "log_norm"],
              [(float(a), float(b), float(sr.log_norm[i, j])) for i, a in enumerate(sr.re_grid) for j, b in enumerate(sr.im_grid)])
    out = {
        "strip": [re_min, re_max, im_max], "spacing": d, "lambda_fit": lam,
        "grid_shape": [len(sr.re_grid), len(sr.im_grid)],
        "poles": [p.to_dict() for p in sr.poles], "unresolved": sr.unresolved,
        "mixing": mixing_verdict(sr.poles), "simple_zero": simplicity_verdict(sr.poles),
    }
    write_json(ctx.out / "poles.json", out)
    ctx.results["_poles"] = sr.poles
    if not any(abs(p.location) < 1e-2 for p in sr.poles):
        raise CheckFailure("zero_pole", "no pole at z = 0")
    return out


def task_projector(ctx: Context, params: dict) -> dict:
    center = params.get("center", [0.0, 0.0])
    c = parse_complex(center) if isinstance(center, str) else complex(*center)
    radius = float(params.get("radius", 0.1))
    P = spectral_projector(ctx.panel, c, radius, int(params.get("n_nodes", 64)))
    save_matrix(P, ctx.out / "projector.bin")
    idem = tv_operator_norm(P.matrix @ P.matrix - P.matrix)
    out = {"center": c, "radius": radius, "rank": numerical_rank(P.matrix), "idempotency": idem, "tv_norm": P.tv_norm()}
    write_json(ctx.out / "projector.json", out)
    if idem > ctx.tolerances["projector_idempotency"]:
        raise CheckFailure("projector_idempotency", f"|P^2 - P| = {idem:.3g}")
    return out


def task_invert(ctx: Context, params: dict) -> dict:
    t = float(params.get("t", 1.0))
    a = float(params.get("a", 1.0))
    ks = [float(k) for k in params.get("ks", [params.get("k", 100.0)])]
    ref = assemble_transfer(ctx.model, ctx.basis, t)
    lad = bromwich_ladder(ctx.panel, a, t, ks, ref, ctx.basis)
    save_matrix(lad.approximants[ks[-1]], ctx.out / "inversion.bin")
    rows = [r.to_dict() for r in lad.rows]
    if len(ks) > 1:
        write_csv(ctx.out / "ladder.csv", ["k", "n_nodes", "weak_error", "tv_error", "budget"],
                  [(r.k, r.n_nodes, r.weak_error, r.tv_error, r.budget) for r in lad.rows])
    last = lad.rows[-1]
    out = {"t": t, "a": a, "k": last.k, "weak_error": last.weak_error, "tv_error": last.tv_error, "budget": last.budget, "ladder": rows}
    write_json(ctx.out / "invert.json", out)
    noise = ctx.tolerances["ladder_noise"]
    for prev, row in zip(lad.rows[:-1], lad.rows[1:]):
        if row.weak_error > prev.weak_error * (1 + noise):
            raise CheckFailure("ladder_monotone", f"weak error grew from k={prev.k} to k={row.k}")
    return out


TASKS = {
    "validate": task_validate,
    "invariant": task_invariant,
    "spectrum": task_spectrum,
    "poles": task_poles,
    "projector": task_projector,
    "invert": task_invert,
}


# --------------------------------------------------------------------------
# pipeline


@dataclass
class RunConfig:
    model: str
    grid: tuple[int, int]
    tasks: list[tuple[str, dict]]
    output_dir: Path
    seed: int = 0
    tolerances: dict = field(default_factory=dict)


def parse_run_config(data: dict, base_dir: Path | None = None) -> RunConfig:
    """Parse and topologically order a run configuration."""
    if not isinstance(data, dict):
        raise UsageError("config must be a JSON object")
    if "model" not in data:
        raise UsageError("config is missing 'model'")
    model = str(data["model"])
    if base_dir is not None and not model.startswith("bundled:") and not os.path.isabs(model):
        model = str(base_dir / model)
    grid = data.get("grid", [8, 16])
    try:
        grid = (int(grid[0]), int(grid[1]))
    except (TypeError, ValueError, IndexError) as exc:
        raise UsageError(f"bad grid {grid!r}") from exc
    raw = data.get("tasks", ["validate"])
    tasks: dict[str, dict] = {}
    for item in raw:
        name, params = (item, {}) if isinstance(item, str) else (item.get("name"), {k: v for k, v in item.items() if k != "name"})
        if name not in TASK_ORDER:
            raise UsageError(f"unknown task {name!r}")
        tasks[name] = params
    for name in list(tasks):
        for dep in TASK_DEPENDS.get(name, []):
            tasks.setdefault(dep, {})
    tasks.setdefault("validate", {})
    ordered = [(n, tasks[n]) for n in TASK_ORDER if n in tasks]
    tol = dict(DEFAULT_TOLERANCES)
    for k, v in (data.get("tolerances") or {}).items():
        if k not in tol:
            raise UsageError(f"unknown tolerance {k!r}")
        if not (isinstance(v, (int, float)) and v > 0):
            raise UsageError(f"tolerance {k!r} must be positive")
        tol[k] = float(v)
    out = Path(data.get("output_dir", "sgs_out"))
    if base_dir is not None and not out.is_absolute():
        out = base_dir / out
    return RunConfig(model, grid, ordered, out, int(data.get("seed", 0)), tol)


def run(cfg: RunConfig) -> int:
    cfg.output_dir.mkdir(parents=True, exist_ok=True)
    report: dict = {"version": __version__, "model": cfg.model, "grid": list(cfg.grid), "seed": cfg.seed,
                    "tolerances": cfg.tolerances, "task_order": [n for n, _ in cfg.tasks],
                    "tasks": {}, "status": "running"}
    status = EXIT_OK
    try:
        model = parse_model(cfg.model)
    except UsageError as exc:
        report["status"] = "error"
        report["error"] = str(exc)
        write_json(cfg.output_dir / "report.json", report)
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except ModelError as exc:
        report["status"] = "invalid_model"
        report["error"] = str(exc)
        write_json(cfg.output_dir / "report.json", report)
        print(f"invalid model: {exc}", file=sys.stderr)
        return EXIT_MODEL
    basis = CellBasis(model, *cfg.grid)
    ctx = Context(model, basis, cfg.output_dir, cfg.seed, cfg.tolerances)
    halted = False
    for name, params in cfg.tasks:
        if halted:
            report["tasks"][name] = {"status": "skipped"}
            continue
        if name == "report":
            report["tasks"][name] = {"status": "ok"}
            continue
        try:
            result = TASKS[name](ctx, params)
            if name == "validate" and not result["passed"]:
                report["tasks"][name] = {"status": "failed", **result}
                report["failed_check"] = "validate"
                status, halted = EXIT_MODEL, True
                print("validate: model or atlas check failed", file=sys.stderr)
                continue
            report["tasks"][name] = {"status": "ok", **{k: v for k, v in result.items() if k != "atlas"}}
        except CheckFailure as exc:
            report["tasks"][name] = {"status": "failed", "check": exc.check, "detail": str(exc)}
            report["failed_check"] = exc.check
            status, halted = EXIT_CHECK, True
            print(f"check failed: {exc}", file=sys.stderr)
        except Exception as exc:  # numerical failure inside a task
            report["tasks"][name] = {"status": "error", "detail": f"{type(exc).__name__}: {exc}"}
            report["failed_check"] = name
            status, halted = EXIT_CHECK, True
            print(f"task {name} failed: {exc}", file=sys.stderr)
    srep = SpectralReport(model.name, cfg.grid)
    if report["tasks"].get("spectrum", {}).get("status") == "ok":
        s = report["tasks"]["spectrum"]
        srep.transfer_eigenvalues = s["transfer_eigenvalues"]
        srep.resolvent_eigenvalues = s["resolvent_eigenvalues"]
    if "_poles" in ctx.results:
        srep.poles = ctx.results["_poles"]
        srep.mixing = mixing_verdict(srep.poles)
        srep.simple_zero = simplicity_verdict(srep.poles)
        srep.thresholds = {"axis_tol": 1e-2, "pole_threshold": cfg.tolerances["pole_threshold"], "rank_rel_tol": 1e-6}
    report["spectral_report"] = srep.to_dict()
    report["status"] = "ok" if status == EXIT_OK else "failed"
    write_json(cfg.output_dir / "report.json", report)
    return status


# --------------------------------------------------------------------------
# plot data


def emit_plot_data(report_dir: Path) -> int:
    """Write plot-ready CSVs from the artifacts in ``report_dir``."""
    report_dir = Path(report_dir)
    if not report_dir.is_dir():
        print(f"missing report directory {report_dir}", file=sys.stderr)
        return EXIT_NOINPUT
    report = None
    if (report_dir / "report.json").exists():
        report = json.loads((report_dir / "report.json").read_text())
    expected = {"spectrum": "spectrum.json", "poles": "pole_scan.csv", "invert": "invert.json"}
    if report is not None:
        for task, fname in expected.items():
            if report.get("tasks", {}).get(task, {}).get("status") == "ok" and not (report_dir / fname).exists():
                print(f"missing upstream artifact {fname}", file=sys.stderr)
                return EXIT_NOINPUT
    written = []
    if (report_dir / "spectrum.json").exists():
        data = json.loads((report_dir / "spectrum.json").read_text())
        rows = [("M", re, im, math.hypot(re, im)) for re, im in data["transfer_eigenvalues"]]
        rows += [("R", re, im, math.hypot(re, im)) for re, im in data["resolvent_eigenvalues"]]
        write_csv(report_dir / "plot_spectrum.csv", ["operator", "re", "im", "modulus"], rows)
        written.append("plot_spectrum.csv")
    if (report_dir / "pole_scan.csv").exists():
        with open(report_dir / "pole_scan.csv") as fh:
            rows = list(csv.reader(fh))[1:]
        write_csv(report_dir / "plot_pole_heatmap.csv", ["re", "im", "log_norm"], rows)
        written.append("plot_pole_heatmap.csv")
    if (report_dir / "invert.json").exists():
        data = json.loads((report_dir / "invert.json").read_text())
        rows = sorted((r["k"], r["weak_error"]) for r in data["ladder"])
        write_csv(report_dir / "plot_inversion_ladder.csv", ["k", "weak_error"], rows)
        written.append("plot_inversion_ladder.csv")
    if not written:
        print("no upstream artifacts (spectrum.json, pole_scan.csv, invert.json) found", file=sys.stderr)
        return EXIT_NOINPUT
    print(dumps({"written": written}))
    return EXIT_OK


# --------------------------------------------------------------------------
# argparse front end


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(message)


def _common(p: argparse.ArgumentParser, grid: bool = True) -> None:
    p.add_argument("--model", default="bundled:constant", help="model JSON path or bundled:constant|bundled:perturbed")
    if grid:
        p.add_argument("--grid", default="8,16", help="cells per strip chart as nx,ny (default 8,16)")
    p.add_argument("--out-dir", default=".", help="directory for artifacts")
    p.add_argument("--seed", type=int, default=0)


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(
        prog="semigroup-spectra",
        description="Transfer-operator semigroups of suspension semiflows: resolvents, poles, inversion.",
        epilog="exit codes: 0 ok, 1 numerical check failed, 2 invalid model / axiom failure, "
        "3 structural atlas error, 64 usage error, 66 missing upstream artifact. "
        "SGS_THREADS caps worker threads.",
    )
    p.add_argument("--version", action="version", version=__version__)
    sub = p.add_subparsers(dest="command", parser_class=_Parser)

    v = sub.add_parser("validate", help="validate an atlas (or a model's induced atlas)")
    v.add_argument("path")
    v.add_argument("--grid", type=int, default=64, help="sample grid per chart")
    v.add_argument("--seed", type=int, default=0)

    m = sub.add_parser("model", help="model utilities")
    msub = m.add_subparsers(dest="model_command", parser_class=_Parser)
    mc = msub.add_parser("check", help="validate the induced atlas and the expansion hypothesis")
    mc.add_argument("path")
    mc.add_argument("--samples", type=int, default=2000)
    mc.add_argument("--atlas-grid", type=int, default=16)

    ms = sub.add_parser("measure", help="measure utilities")
    msub2 = ms.add_subparsers(dest="measure_command", parser_class=_Parser)
    mn = msub2.add_parser("norm", help="TV and D-norms of a measure CSV")
    mn.add_argument("path")
    _common(mn)

    t = sub.add_parser("transfer", help="assemble M(t)")
    t.add_argument("--t", type=float, required=True)
    _common(t)

    a = sub.add_parser("average", help="assemble the averaging operator A_s")
    a.add_argument("--s", type=float, required=True)
    a.add_argument("--n-quad", type=int, default=16)
    _common(a)

    r = sub.add_parser("resolvent", help="R(z) on the quadrature or generator path")
    r.add_argument("--z", required=True, help="re,im")
    r.add_argument("--path", choices=["quad", "gen"], default="quad")
    r.add_argument("--anchor", type=float, default=2.0)
    _common(r)

    s = sub.add_parser("spectrum", help="leading eigenvalues of M(t) and R(2)")
    s.add_argument("--t", type=float, default=1.0)
    s.add_argument("--k", type=int, default=8)
    _common(s)

    po = sub.add_parser("poles", help="pole scan in a strip")
    po.add_argument("--strip", default="-0.3,0.3,13", help="re_min,re_max,im_max")
    po.add_argument("--d", type=float, default=0.1, help="scan spacing")
    _common(po)

    iv = sub.add_parser("invariant", help="invariant measure")
    iv.add_argument("--t-probe", type=float, default=0.5 * (math.sqrt(5) - 1))
    _common(iv)

    pr = sub.add_parser("projector", help="spectral projector on a circle")
    pr.add_argument("--center", default="0,0")
    pr.add_argument("--radius", type=float, default=0.1)
    pr.add_argument("--n-nodes", type=int, default=64)
    _common(pr)

    inv = sub.add_parser("invert", help="Bromwich inversion of R(z)")
    inv.add_argument("--t", type=float, default=1.0)
    inv.add_argument("--a", type=float, default=1.0)
    inv.add_argument("--k", type=float, default=100.0)
    inv.add_argument("--ladder", action="store_true", help="sweep k in {k/8, k/4, k/2, k}")
    _common(inv)

    rn = sub.add_parser("run", help="run a JSON pipeline configuration")
    rn.add_argument("config")

    ep = sub.add_parser("emit_plot_data", aliases=["emit-plot-data"], help="plot-ready CSVs from a report directory")
    ep.add_argument("report_dir")
    return p


def _ctx(args) -> Context:
    model = parse_model(args.model)
    issues = model.issues()
    if issues:
        raise ModelError("; ".join(issues))
    grid = parse_pair(args.grid, int)
    out = Path(args.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    return Context(model, CellBasis(model, *grid), out, args.seed)


def _dispatch(args) -> int:
    cmd = args.command
    if cmd is None:
        raise UsageError("a subcommand is required (see --help)")
    if cmd == "validate":
        with open(args.path) as fh:
            try:
                data = json.load(fh)
            except json.JSONDecodeError as exc:
                print(f"structural error: invalid JSON: {exc}", file=sys.stderr)
                return EXIT_STRUCTURE
        try:
            if "base" in data:
                atlas = model_from_json(data).atlas
            else:
                atlas = atlas_from_json(data)
            rep = validate_atlas(atlas, grid=args.grid, seed=args.seed)
        except AtlasStructureError as exc:
            print(f"structural error: {exc}", file=sys.stderr)
            return EXIT_STRUCTURE
        print(dumps(rep.to_dict()))
        return EXIT_OK if rep.passed else EXIT_MODEL
    if cmd == "model":
        if args.model_command != "check":
            raise UsageError("usage: model check <model.json>")
        model = parse_model(args.path)
        issues = model.issues()
        rep = validate_atlas(model.atlas, grid=args.atlas_grid) if not issues else None
        try:
            exp = verify_expansion(model, n_samples=args.samples)
            exp_d = exp.to_dict()
            ok = exp.passed
        except SamplingError as exc:
            exp_d, ok = {"error": str(exc), "pass": False}, False
        out = {**exp_d, "model_issues": issues, "atlas_passed": bool(rep and rep.passed)}
        print(dumps(out))
        return EXIT_OK if ok and not issues and rep is not None and rep.passed else EXIT_MODEL
    if cmd == "measure":
        if args.measure_command != "norm":
            raise UsageError("usage: measure norm <measure.csv>")
        ctx = _ctx(args)
        mu = load_measure_csv(args.path, ctx.basis.id)
        if len(mu.coeffs) != ctx.basis.n_cells:
            raise UsageError(f"measure has {len(mu.coeffs)} cells, basis has {ctx.basis.n_cells}")
        ops = derivative_operators(ctx.basis)
        out = {"tv": tv_norm(mu), "d_norm": d_norm(mu, ctx.basis),
               "dv_tv": float(np.abs(ops.D_V @ mu.coeffs).sum()), "dx_tv": float(np.abs(ops.D_X @ mu.coeffs).sum()),
               "mass": mu.pair_one()}
        print(dumps(out))
        return EXIT_OK
    if cmd in ("transfer", "average"):
        ctx = _ctx(args)
        if cmd == "transfer":
            op = assemble_transfer(ctx.model, ctx.basis, args.t)
            fname = "transfer.bin"
        else:
            op = average_operator(ctx.model, ctx.basis, args.s, args.n_quad)
            fname = "average.bin"
        save_matrix(op, ctx.out / fname)
        col = float(np.max(np.abs(op.matrix.sum(axis=0) - 1)))
        print(dumps({**op.params, "provenance": op.provenance, "dim": op.dim, "tv_norm": op.tv_norm(), "column_sum_error": col, "file": fname}))
        return EXIT_OK
    if cmd == "resolvent":
        ctx = _ctx(args)
        z = parse_complex(args.z)
        if args.path == "quad":
            R = resolvent_quadrature(ctx.model, ctx.basis, z, evaluator=ctx.panel)
            budget = R.params["error_budget"]
        else:
            gen = build_generator(ctx.model, ctx.basis, ResolventConfig(reference_z=args.anchor), evaluator=None)
            R = resolvent_from_generator(gen, z)
            budget = None
        save_matrix(R, ctx.out / "resolvent.bin")
        print(dumps({"z": z, "path": args.path, "error_budget": budget, "tv_norm": R.tv_norm(), "file": "resolvent.bin"}))
        return EXIT_OK
    if cmd in ("spectrum", "poles", "invariant", "projector", "invert"):
        ctx = _ctx(args)
        if cmd == "spectrum":
            res = task_spectrum(ctx, {"t": args.t, "k": args.k})
        elif cmd == "poles":
            res = task_poles(ctx, {"strip": args.strip, "d": args.d})
        elif cmd == "invariant":
            res = task_invariant(ctx, {"t_probe": args.t_probe})
        elif cmd == "projector":
            res = task_projector(ctx, {"center": args.center, "radius": args.radius, "n_nodes": args.n_nodes})
        else:
            ks = [args.k / 8, args.k / 4, args.k / 2, args.k] if args.ladder else [args.k]
            res = task_invert(ctx, {"t": args.t, "a": args.a, "ks": ks})
        print(dumps(res))
        return EXIT_OK
    if cmd == "run":
        try:
            with open(args.config) as fh:
                data = json.load(fh)
        except FileNotFoundError as exc:
            raise UsageError(f"config not found: {args.config}") from exc
        except json.JSONDecodeError as exc:
            raise UsageError(f"config is not valid JSON: {exc}") from exc
        cfg = parse_run_config(data, Path(args.config).resolve().parent)
        return run(cfg)
    if cmd in ("emit_plot_data", "emit-plot-data"):
        return emit_plot_data(Path(args.report_dir))
    raise UsageError(f"unknown command {cmd!r}")


def main(argv: list[str] | None = None) -> int:
    try:
        args = build_parser().parse_args(argv)
    except UsageError as exc:
        print(f"usage error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except SystemExit as exc:  # --help / --version
        return int(exc.code or 0)
    with _thread_limit():
        try:
            return _dispatch(args)
        except UsageError as exc:
            print(f"usage error: {exc}", file=sys.stderr)
            return EXIT_USAGE
        except ModelError as exc:
            print(f"invalid model: {exc}", file=sys.stderr)
            return EXIT_MODEL
        except CheckFailure as exc:
            print(f"check failed: {exc}", file=sys.stderr)
            return EXIT_CHECK
        except FileNotFoundError as exc:
            print(f"missing input: {exc}", file=sys.stderr)
            return EXIT_NOINPUT


if __name__ == "__main__":
    sys.exit(main())
