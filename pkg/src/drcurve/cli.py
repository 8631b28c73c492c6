"""Command-line interface.

Subcommands: ``estimate`` fits an effect curve from a CSV dataset,
``simulate`` runs the replication study, ``bandwidth`` reports the
cross-validated bandwidth and a risk table, and ``export`` converts a
curve JSON artifact back to CSV.  Exit codes: 0 success, 2 malformed
input or configuration, 3 numerical failure.
"""

from __future__ import annotations

import argparse
import csv
import json
import math
import sys
from pathlib import Path

import jsonschema
import numpy as np

from . import simulate
from .bandwidth import BandwidthSearch, default_search_range, loo_risk, select_bandwidth
from .estimator import add_wald_ci, default_grid, estimate_curve
from .exceptions import DomainError, DRCurveError
from .kernels import KERNEL_FAMILIES, KernelSpec
from .nuisance import (
    Dataset,
    FeatureMap,
    NuisanceFit,
    fit_outcome_regression,
    fit_treatment_density_beta,
    fit_treatment_density_locscale,
    marginalize,
)
from .pseudo import compute_pseudo

EXIT_OK = 0
EXIT_INPUT = 2
EXIT_NUMERIC = 3


class InputError(Exception):
    """Malformed input file or configuration (exit code 2)."""


_TERMS_SCHEMA = {"type": "array", "items": {"type": "string"}, "minItems": 1}
_RANGE_SCHEMA = {
    "type": "array",
    "items": {"type": "number"},
    "minItems": 2,
    "maxItems": 2,
}

ESTIMATE_SCHEMA = {
    "type": "object",
    "properties": {
        "schema": {"const": 1},
        "kind": {"enum": ["reg", "ipw", "dr"]},
        "kernel": {"enum": list(KERNEL_FAMILIES)},
        "ci_level": {"type": "number", "exclusiveMinimum": 0, "exclusiveMaximum": 1},
        "variance_method": {"enum": ["influence", "residual"]},
        "grid": {
            "type": "object",
            "properties": {
                "size": {"type": "integer", "minimum": 2},
                "lower_pct": {"type": "number"},
                "upper_pct": {"type": "number"},
                "points": {"type": "array", "items": {"type": "number"}, "minItems": 2},
            },
            "additionalProperties": False,
        },
        "bandwidth": {
            "type": "object",
            "properties": {
                "mode": {"enum": ["loo", "oracle", "fixed"]},
                "value": {"type": "number", "exclusiveMinimum": 0},
                "range": _RANGE_SCHEMA,
                "grid_size": {"type": "integer", "minimum": 2},
                "optimizer": {"enum": ["golden_section", "grid"]},
            },
            "additionalProperties": False,
        },
        "outcome_model": {
            "type": "object",
            "properties": {
                "link": {"enum": ["logistic", "identity"]},
                "terms": _TERMS_SCHEMA,
                "transform": {"type": "string"},
            },
            "additionalProperties": False,
        },
        "treatment_density": {
            "type": "object",
            "properties": {
                "model": {"enum": ["beta", "locscale"]},
                "mean_terms": _TERMS_SCHEMA,
                "scale_terms": _TERMS_SCHEMA,
                "transform": {"type": "string"},
                "total": {"type": "number", "exclusiveMinimum": 0},
                "scale": {"type": "number", "exclusiveMinimum": 0},
            },
            "additionalProperties": False,
        },
        "density_floor": {"type": ["number", "null"], "exclusiveMinimum": 0},
        "support": _RANGE_SCHEMA,
        "seed": {"type": "integer"},
    },
    "additionalProperties": False,
}

SIMULATE_SCHEMA = {
    "type": "object",
    "properties": {
        "schema": {"const": 1},
        "n": {"type": "integer", "minimum": 50},
        "replications": {"type": "integer", "minimum": 1},
        "base_seed": {"type": "integer"},
        "treatment_model": {"enum": ["correct", "misspecified"]},
        "outcome_model": {"enum": ["correct", "misspecified"]},
        "estimators": {
            "type": "array",
            "items": {"enum": ["reg", "ipw", "dr"]},
            "minItems": 1,
        },
        "bandwidth_mode": {"enum": ["loo", "oracle", "both"]},
        "trim_fraction": {"type": "number", "minimum": 0, "exclusiveMaximum": 0.5},
        "bandwidth_range": _RANGE_SCHEMA,
        "kernel": {"enum": list(KERNEL_FAMILIES)},
        "grid_size": {"type": "integer", "minimum": 2},
        "search_grid_size": {"type": "integer", "minimum": 2},
        "jobs": {"type": ["integer", "null"], "minimum": 1},
    },
    "additionalProperties": False,
}


def _load_config(path: str | None, schema: dict) -> dict:
    if path is None:
        return {}
    try:
        with open(path) as fh:
            cfg = json.load(fh)
    except OSError as exc:
        raise InputError(f"cannot read config {path}: {exc}") from exc
    except json.JSONDecodeError as exc:
        raise InputError(f"config {path} is not valid JSON: {exc}") from exc
    try:
        jsonschema.validate(cfg, schema)
    except jsonschema.ValidationError as exc:
        where = "/".join(str(p) for p in exc.absolute_path) or "(top level)"
        raise InputError(f"config {path}: {exc.message} at {where}") from exc
    cfg.pop("schema", None)
    return cfg


def read_dataset_csv(path: str, support=None) -> Dataset:
    """Read a dataset CSV with header ``y,a,l1..lp`` (any column order)."""
    try:
        with open(path, newline="") as fh:
            reader = csv.reader(fh)
            try:
                header = next(reader)
            except StopIteration:
                raise InputError(f"{path}: file is empty") from None
            rows = list(reader)
    except OSError as exc:
        raise InputError(f"cannot read {path}: {exc}") from exc

    header = [h.strip() for h in header]
    for required in ("y", "a"):
        if required not in header:
            raise InputError(f"{path}: missing required column '{required}'")
    l_names = [h for h in header if h not in ("y", "a")]
    expected = [f"l{j}" for j in range(1, len(l_names) + 1)]
    if sorted(l_names) != sorted(expected):
        raise InputError(
            f"{path}: covariate columns must be named l1..l{len(l_names)}, got {l_names}"
        )

    def parse(value: str, column: str, row_idx: int) -> float:
        try:
            return float(value)
        except ValueError:
            raise InputError(
                f"{path}: column '{column}', data row {row_idx}: cannot parse {value!r}"
            ) from None

    col_of = {name: header.index(name) for name in header}
    n = len(rows)
    if n < 2:
        raise InputError(f"{path}: need at least 2 data rows, got {n}")
    y = np.empty(n)
    a = np.empty(n)
    covs = np.empty((n, len(l_names)))
    for i, row in enumerate(rows, start=1):
        if len(row) != len(header):
            raise InputError(f"{path}: data row {i} has {len(row)} fields, expected {len(header)}")
        y[i - 1] = parse(row[col_of["y"]], "y", i)
        a[i - 1] = parse(row[col_of["a"]], "a", i)
        for j, name in enumerate(expected):
            covs[i - 1, j] = parse(row[col_of[name]], name, i)
    if support is None:
        support = (float(a.min()), float(a.max()))
    try:
        return Dataset(covariates=covs, treatment=a, outcome=y, support=tuple(support))
    except (ValueError, DomainError) as exc:
        raise InputError(f"{path}: {exc}") from exc


def _default_terms(p: int, with_treatment: bool) -> list[str]:
    terms = ["1"] + [f"l{j}" for j in range(1, p + 1)]
    if with_treatment:
        terms.append("a")
    return terms


def _build_fit(data: Dataset, cfg: dict) -> NuisanceFit:
    om = cfg.get("outcome_model", {})
    link = om.get("link")
    if link is None:
        binary = bool(np.all((data.outcome == 0.0) | (data.outcome == 1.0)))
        link = "logistic" if binary else "identity"
    terms = om.get("terms", _default_terms(data.p, with_treatment=True))
    outcome = fit_outcome_regression(
        data, FeatureMap(tuple(terms), om.get("transform", "identity")), link
    )

    td = cfg.get("treatment_density", {})
    model = td.get("model", "locscale")
    mean_terms = td.get("mean_terms", _default_terms(data.p, with_treatment=False))
    transform = td.get("transform", "identity")
    mean_map = FeatureMap(tuple(mean_terms), transform)
    if model == "beta":
        density = fit_treatment_density_beta(
            data, mean_map, scale=td.get("scale"), total=td.get("total")
        )
    else:
        scale_terms = td.get("scale_terms", ["1"])
        density = fit_treatment_density_locscale(
            data, mean_map, FeatureMap(tuple(scale_terms), transform)
        )
    return marginalize(data, density, outcome, floor=cfg.get("density_floor"))


def _make_grid(data: Dataset, cfg: dict) -> np.ndarray:
    gcfg = cfg.get("grid", {})
    if "points" in gcfg:
        return np.asarray(gcfg["points"], dtype=float)
    return default_grid(
        data.treatment,
        size=gcfg.get("size", 101),
        lower_pct=gcfg.get("lower_pct", 5.0),
        upper_pct=gcfg.get("upper_pct", 95.0),
    )


def _make_search(data: Dataset, bcfg: dict) -> BandwidthSearch:
    if "range" in bcfg:
        lo, hi = float(bcfg["range"][0]), float(bcfg["range"][1])
        return BandwidthSearch(
            h_min=lo,
            h_max=hi,
            optimizer=bcfg.get("optimizer", "golden_section"),
            grid_size=bcfg.get("grid_size", 20),
        )
    base = default_search_range(data.treatment, grid_size=bcfg.get("grid_size", 20))
    if "optimizer" in bcfg:
        from dataclasses import replace

        base = replace(base, optimizer=bcfg["optimizer"])
    return base


def _resolve_bandwidth(data: Dataset, fit: NuisanceFit, kind: str, cfg: dict) -> float:
    bcfg = dict(cfg.get("bandwidth", {}))
    mode = bcfg.get("mode", "loo")
    if "value" in bcfg and bcfg.get("mode", "fixed") == "fixed":
        return float(bcfg["value"])
    if mode == "fixed":
        raise InputError("bandwidth mode 'fixed' requires a 'value'")
    family = cfg.get("kernel", "epanechnikov")
    search = _make_search(data, bcfg)
    if mode == "oracle":
        # Oracle selection is only defined against the bundled synthetic
        # study's truth; documented as a harness facility.
        from .bandwidth import oracle_bandwidth

        curves = simulate.truth_curves()
        kind_fit = fit.with_zero_outcome() if kind == "ipw" else fit
        result = oracle_bandwidth(
            data.treatment, curves.theta, data, kind_fit, family, search
        )
    else:
        kind_fit = fit.with_zero_outcome() if kind == "ipw" else fit
        pseudo = compute_pseudo(data, kind_fit)
        result = select_bandwidth(data.treatment, pseudo, family, search)
    if not math.isfinite(result.risk_at_selected):
        raise DRCurveError("no feasible bandwidth in the search range")
    return float(result.selected)


def _sibling_json(output: str) -> Path:
    path = Path(output)
    return path.with_suffix(".json") if path.suffix == ".csv" else Path(str(path) + ".json")


def _cmd_estimate(args) -> int:
    cfg = _load_config(args.config, ESTIMATE_SCHEMA)
    if args.kind:
        cfg["kind"] = args.kind
    if args.kernel:
        cfg["kernel"] = args.kernel
    if args.ci_level is not None:
        cfg["ci_level"] = args.ci_level
    if args.bandwidth:
        bcfg = dict(cfg.get("bandwidth", {}))
        if args.bandwidth in ("loo", "oracle"):
            bcfg["mode"] = args.bandwidth
            bcfg.pop("value", None)
        else:
            try:
                bcfg = {"mode": "fixed", "value": float(args.bandwidth)}
            except ValueError:
                raise InputError(
                    f"--bandwidth must be 'loo', 'oracle' or a number, got {args.bandwidth!r}"
                ) from None
        cfg["bandwidth"] = bcfg

    data = read_dataset_csv(args.input, support=cfg.get("support"))
    kind = cfg.get("kind", "dr")
    fit = _build_fit(data, cfg)
    grid = _make_grid(data, cfg)
    if kind == "reg":
        curve = estimate_curve(data, fit, grid, None, "reg")
    else:
        family = cfg.get("kernel", "epanechnikov")
        h = _resolve_bandwidth(data, fit, kind, cfg)
        spec = KernelSpec(family, h)
        curve = estimate_curve(data, fit, grid, spec, kind)
        curve = add_wald_ci(
            curve,
            data,
            fit,
            spec,
            level=cfg.get("ci_level", 0.95),
            method=cfg.get("variance_method", "influence"),
        )
        if curve.failed_points:
            print(
                f"warning: {len(curve.failed_points)} grid points had singular designs",
                file=sys.stderr,
            )
    curve.to_csv(args.output)
    curve.to_json(_sibling_json(args.output))
    print(f"wrote {args.output} and {_sibling_json(args.output)}")
    return EXIT_OK


def _cmd_simulate(args) -> int:
    cfg = _load_config(args.config, SIMULATE_SCHEMA)
    if args.seed is not None:
        cfg["base_seed"] = args.seed
    if args.jobs is not None:
        cfg["jobs"] = args.jobs
    try:
        config = simulate.SimConfig.from_config(cfg)
    except (ValueError, TypeError) as exc:
        raise InputError(f"invalid simulation config: {exc}") from exc

    def progress(done: int, total: int) -> None:
        print(f"replications {done}/{total} done", file=sys.stderr)

    report = simulate.run_study(config, progress=progress)
    report.to_csv(args.output)
    report.to_json(_sibling_json(args.output))
    for cell in report.cells:
        print(
            f"{cell.estimator:>4s} [{cell.bandwidth_mode}] "
            f"bias={cell.integrated_bias:.3f} rmse={cell.integrated_rmse:.3f}"
        )
    print(f"wrote {args.output} and {_sibling_json(args.output)}")
    return EXIT_OK


def _cmd_bandwidth(args) -> int:
    cfg = _load_config(args.config, ESTIMATE_SCHEMA)
    if args.kernel:
        cfg["kernel"] = args.kernel
    data = read_dataset_csv(args.input, support=cfg.get("support"))
    kind = cfg.get("kind", "dr")
    family = cfg.get("kernel", "epanechnikov")
    fit = _build_fit(data, cfg)
    kind_fit = fit.with_zero_outcome() if kind == "ipw" else fit
    pseudo = compute_pseudo(data, kind_fit)
    search = _make_search(data, dict(cfg.get("bandwidth", {})))
    result = select_bandwidth(data.treatment, pseudo, family, search)

    log_grid = np.exp(
        np.linspace(math.log(search.h_min), math.log(search.h_max), search.grid_size)
    )
    risks = [loo_risk(h, data.treatment, pseudo, family) for h in log_grid]
    if not any(math.isfinite(r) for r in risks):
        raise DRCurveError("leave-one-out risk is infinite over the whole range")
    print(f"selected_h={result.selected!r}")
    print(f"risk={result.risk_at_selected!r}")
    lines = [("h", "risk")] + [(repr(float(h)), repr(float(r))) for h, r in zip(log_grid, risks)]
    if args.output:
        with open(args.output, "w", newline="") as fh:
            csv.writer(fh).writerows(lines)
        print(f"wrote {args.output}")
    else:
        for row in lines:
            print(",".join(row))
    return EXIT_OK


def _cmd_export(args) -> int:
    try:
        with open(args.input) as fh:
            payload = json.load(fh)
    except OSError as exc:
        raise InputError(f"cannot read {args.input}: {exc}") from exc
    except json.JSONDecodeError as exc:
        raise InputError(f"{args.input} is not valid JSON: {exc}") from exc
    for key in ("grid", "estimates"):
        if key not in payload:
            raise InputError(f"{args.input}: missing key '{key}'")
    grid = payload["grid"]
    est = payload["estimates"]
    opt = {k: payload.get(k) for k in ("stderr", "ci_low", "ci_high")}
    with open(args.output, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["a", "estimate", "stderr", "ci_low", "ci_high"])
        for i in range(len(grid)):
            row = [repr(float(grid[i])), repr(float(est[i]))]
            for key in ("stderr", "ci_low", "ci_high"):
                col = opt[key]
                row.append("" if col is None else repr(float(col[i])))
            writer.writerow(row)
    print(f"wrote {args.output}")
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="drcurve",
        description="Doubly robust kernel estimation of continuous-treatment effect curves.",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    est = sub.add_parser("estimate", help="estimate an effect curve from a CSV dataset")
    est.add_argument("--input", required=True, help="CSV with header y,a,l1..lp")
    est.add_argument("--output", required=True, help="curve CSV path (JSON written beside it)")
    est.add_argument("--config", help="JSON configuration file")
    est.add_argument("--kind", choices=["reg", "ipw", "dr"])
    est.add_argument("--kernel", choices=list(KERNEL_FAMILIES))
    est.add_argument("--bandwidth", help="'loo', 'oracle' or a fixed numeric value")
    est.add_argument("--ci-level", type=float, dest="ci_level")
    est.add_argument("--seed", type=int)
    est.add_argument("--jobs", type=int)
    est.set_defaults(func=_cmd_estimate)

    sim = sub.add_parser("simulate", help="run the replication study")
    sim.add_argument("--config", help="JSON simulation configuration")
    sim.add_argument("--output", required=True, help="report CSV path (JSON written beside it)")
    sim.add_argument("--seed", type=int, help="override the base seed")
    sim.add_argument("--jobs", type=int, help="parallel workers (default: all cores)")
    sim.set_defaults(func=_cmd_simulate)

    bw = sub.add_parser("bandwidth", help="select a bandwidth and print a risk table")
    bw.add_argument("--input", required=True)
    bw.add_argument("--output", help="risk table CSV (printed to stdout if omitted)")
    bw.add_argument("--config", help="JSON configuration file")
    bw.add_argument("--kernel", choices=list(KERNEL_FAMILIES))
    bw.add_argument("--seed", type=int)
    bw.set_defaults(func=_cmd_bandwidth)

    exp = sub.add_parser("export", help="convert a curve JSON artifact to CSV")
    exp.add_argument("--input", required=True, help="curve JSON file")
    exp.add_argument("--output", required=True, help="CSV destination")
    exp.set_defaults(func=_cmd_export)

    return parser


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except (InputError, DomainError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INPUT
    except DRCurveError as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC


if __name__ == "__main__":
    sys.exit(main())
