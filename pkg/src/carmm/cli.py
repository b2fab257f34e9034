"""Command-line pipeline: ``carmm simulate | fit | diagnose | compare | cluster``.

Exit codes: 0 success, 2 bad arguments or missing files, 3 invalid input
data, 4 numerical failure.
"""
from __future__ import annotations

import argparse
import dataclasses
import sys
import warnings
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from . import __version__
from . import io
from .cluster import CATEGORIES, cluster_draws
from .compare import elpd_diff_se, fit_report, loo_elpd
from .diagnostics import RHAT_THRESHOLD, summarize
from .errors import CarmmError, DataFormatError, DivergenceRateExceeded, NumericalError, ValidationError
from .graph import build_graph
from .hmc import FitConfig, hmc_fit
from .membership import build_membership
from .model import Dataset, Hyperpriors, ModelSpec
from .simulate import TruthSpec, simulate_scenario, study_truth

EXIT_OK = 0
EXIT_USAGE = 2
EXIT_DATA = 3
EXIT_NUMERIC = 4

DATA_DIR_FILES = {"graph": "graph.csv", "membership": "membership.csv", "areal": "areal.csv", "mm": "mm.csv"}


class UsageError(CarmmError):
    """Bad command-line arguments or configuration."""


# --------------------------------------------------------------------------
# configuration


def _load_config(path: Optional[str]) -> dict:
    if not path:
        return {}
    cfg = io.read_json(path)
    if not isinstance(cfg, dict):
        raise UsageError(f"{path}: config must be a JSON object")
    unknown = set(cfg) - {"model", "fit", "simulate"}
    if unknown:
        raise UsageError(f"{path}: unknown config sections {sorted(unknown)}")
    return cfg


def _build(cls, values: dict, where: str):
    names = {f.name for f in dataclasses.fields(cls)}
    unknown = set(values) - names
    if unknown:
        raise UsageError(f"{where}: unknown keys {sorted(unknown)}")
    try:
        return cls(**values)
    except (ValidationError, TypeError) as exc:
        raise UsageError(f"{where}: {exc}") from None


def _model_spec(args, cfg: dict) -> ModelSpec:
    section = dict(cfg.get("model", {}))
    hp = _build(Hyperpriors, section.pop("hyperpriors", {}) or {}, "config model.hyperpriors")
    if args.model is not None:
        section["prior_kind"] = args.model
    if args.covariates is not None:
        section["use_covariates"] = args.covariates == "on"
    return _build(ModelSpec, {**section, "hyperpriors": hp}, "config model")


def _fit_config(args, cfg: dict) -> FitConfig:
    section = dict(cfg.get("fit", {}))
    for flag, key in (("chains", "chains"), ("iters", "iterations"), ("seed", "seed")):
        value = getattr(args, flag)
        if value is not None:
            section[key] = value
    return _build(FitConfig, section, "config fit")


def _spec_dict(spec: ModelSpec) -> dict:
    return dataclasses.asdict(spec)


# --------------------------------------------------------------------------
# subcommands


def cmd_simulate(args) -> int:
    cfg = _load_config(args.config)
    section = dict(cfg.get("simulate", {}))
    truth_overrides = section.pop("truth", {}) or {}
    settings = {"rows": 10, "cols": 10, "memberships": 130, "sparsity": 8.0}
    unknown = set(section) - set(settings)
    if unknown:
        raise UsageError(f"config simulate: unknown keys {sorted(unknown)}")
    settings.update(section)
    for key in ("rows", "cols", "memberships", "sparsity"):
        value = getattr(args, key)
        if value is not None:
            settings[key] = value
    model = args.model or "gmcar"
    covariates = (args.covariates or "off") == "on"
    base = study_truth(model, covariates).to_dict()
    unknown = set(truth_overrides) - set(base)
    if unknown:
        raise UsageError(f"config simulate.truth: unknown keys {sorted(unknown)}")
    try:
        truth = TruthSpec.from_dict({**base, **truth_overrides})
    except TypeError as exc:
        raise UsageError(f"config simulate.truth: {exc}") from None
    seed = 0 if args.seed is None else args.seed
    rng = np.random.default_rng(seed)
    sc = simulate_scenario(
        truth, int(settings["rows"]), int(settings["cols"]), int(settings["memberships"]), rng,
        sparsity=float(settings["sparsity"]),
    )
    out = Path(args.out)
    io.write_edges(out / "graph.csv", sc.graph.edges)
    io.write_weights(out / "membership.csv", sc.H.triplets())
    io.write_areal(out / "areal.csv", sc.data.y1, sc.data.E1, sc.X)
    io.write_mm(out / "mm.csv", sc.data.y2, sc.data.E2)
    io.write_json(out / "truth.json", {
        "scalars": truth.scalar_values(),
        "truth": truth.to_dict(),
        "phi1": sc.state.phi1,
        "phi2": sc.state.phi2,
    })
    outputs = ["graph.csv", "membership.csv", "areal.csv", "mm.csv", "truth.json"]
    io.write_json(out / "manifest.json", {
        "command": "simulate",
        "version": __version__,
        "seed": seed,
        "settings": settings,
        "outputs": {name: io.file_sha256(out / name) for name in outputs},
    })
    print(f"simulated n={sc.graph.n} areas, m={sc.H.m} memberships into {out}")
    return EXIT_OK


def _input_paths(args) -> dict:
    paths = {}
    base = Path(args.data_dir) if args.data_dir else None
    for role, flag in (("graph", "graph"), ("membership", "membership"), ("areal", "areal_data"), ("mm", "mm_data")):
        value = getattr(args, flag)
        if value is None and base is not None:
            value = str(base / DATA_DIR_FILES[role])
        if value is None:
            raise UsageError(f"missing input: pass --{flag.replace('_', '-')} or --data-dir")
        paths[role] = value
    paths["areal_age"] = args.areal_age
    paths["mm_age"] = args.mm_age
    for role, p in paths.items():
        if p and not Path(p).is_file():
            raise UsageError(f"{p}: no such file ({role} input)")
    return paths


def _with_file(path, fn, *a, **kw):
    """Run a builder, prefixing validation errors with the file name."""
    try:
        return fn(*a, **kw)
    except DataFormatError:
        raise
    except ValidationError as exc:
        raise DataFormatError(path, str(exc)) from None


def load_inputs(paths: dict):
    """Read and validate the four input tables; returns ``(data, graph, H)``."""
    y1, E1, X = io.read_areal(paths["areal"], offsets_required=not paths.get("areal_age"))
    y2, E2 = io.read_mm(paths["mm"], offsets_required=not paths.get("mm_age"))
    n, m = len(y1), len(y2)
    if paths.get("areal_age"):
        E1 = io.read_age_offsets(paths["areal_age"], n)
    if paths.get("mm_age"):
        E2 = io.read_age_offsets(paths["mm_age"], m)
    graph = _with_file(paths["graph"], build_graph, io.read_edges(paths["graph"]), n)
    H = _with_file(paths["membership"], build_membership, io.read_weights(paths["membership"]), m, n)
    data = _with_file(paths["areal"], Dataset, y1=y1, y2=y2, E1=E1, E2=E2, X=X)
    return data, graph, H


def write_fit(out: Path, samples, data: Dataset, paths: dict, spec: ModelSpec, config: FitConfig) -> list[str]:
    """Write every fit artefact into ``out``; returns the file names written."""
    io.write_posterior(out / "posterior.csv", samples.all_draws(include_fields=True))
    for attr, name in io.DERIVED_FILES.items():
        io.write_derived(out / name, getattr(samples, attr))
    io.write_summary(out / "summary.csv", summarize(samples))
    io.write_json(out / "fit_report.json", {k: v.as_dict() for k, v in fit_report(samples, data).items()})
    io.write_json(out / "sampler.json", {
        "accept_rate": samples.accept_rate,
        "divergences": samples.divergences,
        "step_size": samples.step_size,
    })
    written = ["posterior.csv", *io.DERIVED_FILES.values(), "summary.csv", "fit_report.json", "sampler.json"]
    io.write_json(out / "manifest.json", {
        "command": "fit",
        "version": __version__,
        "seed": config.seed,
        "model": _spec_dict(spec),
        "fit": dataclasses.asdict(config),
        "inputs": io.input_record(paths),
        "dims": {"n": data.n, "m": data.m, "p": data.p, "chains": samples.chains, "draws": samples.draws},
        "outputs": {name: io.file_sha256(out / name) for name in written},
    })
    return written + ["manifest.json"]


def cmd_fit(args) -> int:
    cfg = _load_config(args.config)
    spec = _model_spec(args, cfg)
    config = _fit_config(args, cfg)
    paths = _input_paths(args)
    data, graph, H = load_inputs(paths)
    if spec.use_covariates and data.X is None:
        raise DataFormatError(paths["areal"], "--covariates on but the table has no x columns", 1)
    with warnings.catch_warnings(record=True) as caught:
        warnings.simplefilter("always", DivergenceRateExceeded)
        samples = hmc_fit(data, spec, graph, H, config)
    for w in caught:
        print(f"warning: {w.message}", file=sys.stderr)
    out = Path(args.out)
    write_fit(out, samples, data, paths, spec, config)
    report = summarize(samples, include_fields=False)
    _print_summary(report)
    return EXIT_OK


def _print_summary(report) -> None:
    print(f"{'name':<12}{'mean':>10}{'sd':>10}{'q2.5':>10}{'q97.5':>10}{'rhat':>8}{'ess':>8}")
    for r in report.rows:
        print(f"{r.name:<12}{r.mean:>10.4g}{r.sd:>10.4g}{r.quantiles[0]:>10.4g}"
              f"{r.quantiles[-1]:>10.4g}{r.rhat:>8.4f}{r.ess_bulk:>8.0f}")
    flagged = [r.name for r in report.rows if not r.rhat < RHAT_THRESHOLD]
    print(f"{len(flagged)} of {len(report.rows)} quantities with R-hat >= {RHAT_THRESHOLD}")


def _fit_dir(path: str) -> Path:
    d = Path(path)
    if not (d / "manifest.json").is_file():
        raise UsageError(f"{d}: not a fit output directory (manifest.json missing)")
    return d


def cmd_diagnose(args) -> int:
    d = _fit_dir(args.fit_dir)
    draws = io.read_posterior(d / "posterior.csv")
    report = summarize(draws, rank_normalized=args.rank_normalized)
    if args.out:
        io.write_summary(Path(args.out) / "summary.csv", report)
    scalars = [r for r in report.rows if "[" not in r.name]
    _print_summary(type(report)(tuple(scalars)))
    return EXIT_OK


def _pointwise(d: Path) -> tuple[dict, np.ndarray]:
    manifest = io.read_json(d / "manifest.json")
    n = manifest["dims"]["n"]
    ll = io.read_derived(d / "loglik.csv").astype(float)
    flat = ll.reshape(-1, ll.shape[-1])
    return manifest, {"y1": loo_elpd(flat[:, :n]).pointwise, "y2": loo_elpd(flat[:, n:]).pointwise}


def cmd_compare(args) -> int:
    da, db = _fit_dir(args.fit_a), _fit_dir(args.fit_b)
    ma, pa = _pointwise(da)
    mb, pb = _pointwise(db)
    if (ma["dims"]["n"], ma["dims"]["m"]) != (mb["dims"]["n"], mb["dims"]["m"]):
        raise ValidationError("fits were made on datasets of different sizes")
    pa["total"] = np.concatenate([pa["y1"], pa["y2"]])
    pb["total"] = np.concatenate([pb["y1"], pb["y2"]])
    header = ("outcome", "elpd_a", "elpd_b", "elpd_diff", "se_diff")
    rows = []
    print(f"{'outcome':<8}{'elpd_a':>12}{'elpd_b':>12}{'diff':>10}{'se':>8}")
    for key in ("y1", "y2", "total"):
        diff, se = elpd_diff_se(pa[key], pb[key])
        ea, eb = float(pa[key].sum()), float(pb[key].sum())
        rows.append((key, io.fmt(ea), io.fmt(eb), io.fmt(diff), io.fmt(se)))
        print(f"{key:<8}{ea:>12.2f}{eb:>12.2f}{diff:>10.2f}{se:>8.2f}")
    if args.out:
        io.atomic_write(Path(args.out) / "elpd_diff.csv", io.csv_text(header, rows))
    return EXIT_OK


def cmd_cluster(args) -> int:
    d = _fit_dir(args.fit_dir)
    manifest = io.read_json(d / "manifest.json")
    graph_path = args.graph or manifest.get("inputs", {}).get("graph", {}).get("path")
    if not graph_path or not Path(graph_path).is_file():
        raise UsageError("graph file not found: pass --graph")
    n = manifest["dims"]["n"]
    graph = _with_file(graph_path, build_graph, io.read_edges(graph_path), n)
    rho1 = io.read_derived(d / io.DERIVED_FILES["rho1"]).astype(float)
    zr = io.read_derived(d / io.DERIVED_FILES["zeta2_risk"]).astype(float)
    report = cluster_draws(
        rho1.reshape(-1, n), zr.reshape(-1, n), graph, risk_threshold=args.tr, prob_threshold=args.tp
    )
    out = Path(args.out) if args.out else d
    io.write_clusters(out / "clusters.csv", report)
    io.write_bivariate(out / "bivariate.csv", report)
    if args.boundaries:
        if not Path(args.boundaries).is_file():
            raise UsageError(f"{args.boundaries}: no such file")
        matched = io.geojson_join(args.boundaries, report, out / "clusters.geojson")
        print(f"joined {matched} boundary features")
    table = report.table
    print("outcome 1 rows x outcome 2 columns:")
    print("      " + "".join(f"{c:>6}" for c in CATEGORIES))
    for c, row in zip(CATEGORIES, table):
        print(f"{c:<6}" + "".join(f"{v:>6d}" for v in row))
    return EXIT_OK


# --------------------------------------------------------------------------
# argument parsing


def _positive_float(text):
    v = float(text)
    if not v > 0:
        raise argparse.ArgumentTypeError("must be positive")
    return v


def _probability(text):
    v = float(text)
    if not 0 <= v < 1:
        raise argparse.ArgumentTypeError("must lie in [0, 1)")
    return v


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="carmm", description="Bivariate CAR multiple-membership disease mapping")
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)

    def model_flags(p):
        p.add_argument("--model", choices=("gmcar", "mcar"), default=None)
        p.add_argument("--covariates", choices=("on", "off"), default=None)
        p.add_argument("--config", help="JSON file with model / fit / simulate sections")
        p.add_argument("--seed", type=int)

    p = sub.add_parser("simulate", help="write a synthetic dataset at known parameter values")
    model_flags(p)
    p.add_argument("--rows", type=int)
    p.add_argument("--cols", type=int)
    p.add_argument("--memberships", type=int)
    p.add_argument("--sparsity", type=float, help="mean number of areas per membership")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_simulate)

    p = sub.add_parser("fit", help="sample the posterior and write draws, summaries and fit statistics")
    model_flags(p)
    p.add_argument("--data-dir", help="directory holding graph.csv, membership.csv, areal.csv, mm.csv")
    p.add_argument("--graph")
    p.add_argument("--membership")
    p.add_argument("--areal-data")
    p.add_argument("--mm-data")
    p.add_argument("--areal-age", help="age table giving areal offsets")
    p.add_argument("--mm-age", help="age table giving membership offsets")
    p.add_argument("--chains", type=int)
    p.add_argument("--iters", type=int, help="iterations per chain, warm-up included")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_fit)

    p = sub.add_parser("diagnose", help="recompute R-hat / ESS summaries from a fit directory")
    p.add_argument("fit_dir")
    p.add_argument("--rank-normalized", action="store_true")
    p.add_argument("--out")
    p.set_defaults(func=cmd_diagnose)

    p = sub.add_parser("compare", help="LOO elpd difference between two fits")
    p.add_argument("fit_a")
    p.add_argument("fit_b")
    p.add_argument("--out")
    p.set_defaults(func=cmd_compare)

    p = sub.add_parser("cluster", help="exceedance-probability risk clusters")
    p.add_argument("fit_dir")
    p.add_argument("--graph", help="edge list (defaults to the one recorded by fit)")
    p.add_argument("--tr", type=_positive_float, default=1.0, help="risk threshold")
    p.add_argument("--tp", type=_probability, default=0.9, help="probability threshold")
    p.add_argument("--boundaries", help="GeoJSON FeatureCollection with an integer 'area' property")
    p.add_argument("--out")
    p.set_defaults(func=cmd_cluster)
    return parser


def run(argv: Optional[Sequence[str]] = None) -> int:
    """Parse ``argv`` and run one subcommand; returns the exit code."""
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    try:
        return args.func(args)
    except (UsageError, FileNotFoundError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except NumericalError as exc:
        print(f"numerical error: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except ValidationError as exc:
        print(f"invalid input: {exc}", file=sys.stderr)
        return EXIT_DATA


def main(argv: Optional[Sequence[str]] = None) -> None:
    sys.exit(run(argv))


if __name__ == "__main__":
    main()
