"""Batch command line: ``stgamm {fit,trend,map,simulate-grid,diagnose,synthesize}``.

Exit codes: 0 success, 2 input error, 3 convergence failure, 4 I/O error.
Every command writes into ``--out-dir`` and finishes with ``manifest.json``
listing the SHA-256 of each output.  Options may also come from a JSON file
given by ``--config``; command-line flags take precedence.
"""

from __future__ import annotations

import argparse
import csv
import hashlib
import json
import logging
import sys
from dataclasses import fields
from pathlib import Path

import numpy as np

from . import __version__
from .diagnostics import (acf_pacf, empirical_semivariogram, normalized_residuals, write_correlogram_csv,
                          write_residuals_csv, write_variogram_csv)
from .gamm_engine import ConvergenceError, GammError, ModelFileError, OptimizerConfig, fit_gamm, load_model, save_model
from .grid_sim import GridSimError, SimProtocol, build_universe, run_grid_examination, write_plot_rmpe_csv, write_report_csv
from .posterior_trend import (FixedAge, Grid1, Grid2, ObservedAge, Scenario, TrendError, build_scenario_grid,
                              scenario_age, spatial_map, trend, write_map_csv, write_trend_csv)
from .smooth_basis import BasisError, SmoothConfig
from .survey_data import (PlotTable, SchemaError, SurveyDataError, aggregate_survey, load_survey_csv, read_plot_table,
                          write_plot_table, write_survey_csv)
from .svg import heatmap_svg, line_chart_svg
from .synthetic import SyntheticConfig, synthesize_survey

EXIT_INPUT = 2
EXIT_CONVERGENCE = 3
EXIT_IO = 4

logger = logging.getLogger("stgamm")


class InputError(Exception):
    pass


# defaults applied after the config file; None in argparse means "not given"
DEFAULTS = {
    "seed": 0,
    "threads": 1,
    "species": "spruce",
    "k_space": 25,
    "k_time": 20,
    "k_age": 10,
    "correlation": "arma11",
    "max_iter": 60,
    "grid": "grid1",
    "reference_year": None,
    "age": "median",
    "nsim": None,
    "level": 0.95,
    "n_grid": 60,
    "mask": 0.02,
    "approach": "I",
    "exclude_regions": "",
    "window": [2006, 2015],
    "max_lag": 5,
    "n_bins": 20,
}


def _add_common(p: argparse.ArgumentParser) -> None:
    p.add_argument("--out-dir", required=True, type=Path, help="directory for all outputs (created if missing)")
    p.add_argument("--config", type=Path, help="JSON file with option values; flags override it")
    p.add_argument("--seed", type=int, help="master seed recorded in every output (default 0)")
    p.add_argument("--threads", type=int, help="maximum worker threads; results do not depend on it (default 1)")
    p.add_argument("--strict", action="store_true", default=None, help="treat malformed input rows as fatal")
    p.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="stgamm", description="Fit and summarize spatio-temporal defoliation models.")
    parser.add_argument("--version", action="version", version=f"stgamm {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("fit", help="fit the spatio-temporal model to survey data")
    _add_common(p)
    src = p.add_mutually_exclusive_group()
    src.add_argument("--input", type=Path, help="tree-level survey CSV")
    src.add_argument("--plots", type=Path, help="plot-level table CSV (already aggregated)")
    p.add_argument("--species", help="species to model (default spruce)")
    p.add_argument("--k-space", type=int, help="spatial marginal basis dimension (default 25)")
    p.add_argument("--k-time", type=int, help="temporal marginal basis dimension (default 20)")
    p.add_argument("--k-age", type=int, help="stand-age basis dimension (default 10)")
    p.add_argument("--correlation", choices=["arma11", "none"], help="within-plot error correlation (default arma11)")
    p.add_argument("--max-iter", type=int, help="maximum linearization iterations (default 60)")

    p = sub.add_parser("trend", help="age- and grid-adjusted yearly trend with credible band")
    _add_common(p)
    p.add_argument("--model", type=Path, help="model JSON written by 'fit'")
    p.add_argument("--data", type=Path, help="plot table CSV defining the scenario plots")
    p.add_argument("--grid", choices=["grid1", "grid2"], help="grid1: fixed plot set; grid2: yearly plot sets")
    p.add_argument("--reference-year", type=int, help="plot set and median-age year (default: last year)")
    p.add_argument("--age", help="'observed', 'median' (tree-weighted, reference year) or a number of years")
    p.add_argument("--nsim", type=int, help="posterior draws (default 1000)")
    p.add_argument("--level", type=float, help="credible level (default 0.95)")

    p = sub.add_parser("map", help="defoliation surface for one year")
    _add_common(p)
    p.add_argument("--model", type=Path, help="model JSON written by 'fit'")
    p.add_argument("--year", type=int, help="year to map")
    p.add_argument("--age", type=float, help="stand age used everywhere")
    p.add_argument("--n-grid", type=int, help="cells per axis (default 60)")
    p.add_argument("--mask", type=float, help="masking distance as fraction of the box diagonal (default 0.02)")
    p.add_argument("--data", type=Path, help="plot table CSV whose sites define the mask (default: model knots)")

    p = sub.add_parser("simulate-grid", help="grid examination by simulation")
    _add_common(p)
    p.add_argument("--model", type=Path, help="truth model JSON")
    p.add_argument("--data", type=Path, help="plot table CSV the truth was fitted to")
    p.add_argument("--nsim", type=int, help="simulation draws (default 40)")
    p.add_argument("--approach", choices=["I", "II"], help="I: 16 km vs 8 km; II: 16 km vs densification")
    p.add_argument("--exclude-regions", help="comma-separated region tags excluded (approach I)")
    p.add_argument("--reference-year", type=int, help="plot universe year (default: year with most plots)")
    p.add_argument("--window", type=int, nargs=2, metavar=("FIRST", "LAST"),
                   help="years used for the >5%% count (default 2006 2015)")
    p.add_argument("--species", help="species label for the report (default spruce)")

    p = sub.add_parser("diagnose", help="normalized residuals, semivariogram, ACF/PACF")
    _add_common(p)
    p.add_argument("--model", type=Path, help="model JSON written by 'fit'")
    p.add_argument("--data", type=Path, help="plot table CSV the model was fitted to")
    p.add_argument("--max-lag", type=int, help="largest ACF lag (default 5)")
    p.add_argument("--n-bins", type=int, help="semivariogram bins (default 20)")

    p = sub.add_parser("synthesize", help="write a synthetic tree-level survey CSV with known truth")
    _add_common(p)
    for f in fields(SyntheticConfig):
        if f.name in ("anchor", "age_range", "trees_range", "regions"):
            continue
        flag = "--" + f.name.replace("_", "-")
        typ = {"int": int, "float": float}.get(f.type if isinstance(f.type, str) else f.type.__name__, str)
        p.add_argument(flag, type=typ, dest=f"syn_{f.name}", help=f"generator setting (default {f.default!r})")
    return parser


def _resolve(args: argparse.Namespace) -> dict:
    cfg = {}
    if args.config is not None:
        try:
            cfg = json.loads(Path(args.config).read_text(encoding="utf-8"))
        except (OSError, json.JSONDecodeError) as exc:
            raise InputError(f"cannot read config {args.config}: {exc}")
        if not isinstance(cfg, dict):
            raise InputError("config file must hold a JSON object")
    out = {}
    for key, val in vars(args).items():
        if val is None:
            name = key[4:] if key.startswith("syn_") else key
            val = cfg.get(name, DEFAULTS.get(key))
        out[key] = val
    for key in ("model", "data", "input", "plots"):
        if isinstance(out.get(key), str):
            out[key] = Path(out[key])
    out["strict"] = bool(out.get("strict"))
    return out


def _sha256(path: Path) -> str:
    return hashlib.sha256(path.read_bytes()).hexdigest()


class Outputs:
    def __init__(self, out_dir: Path, command: str, opts: dict):
        self.dir = Path(out_dir)
        self.dir.mkdir(parents=True, exist_ok=True)
        self.files: list[str] = []
        self.meta = {"stgamm": __version__, "command": command, "seed": opts["seed"]}

    def path(self, name: str) -> Path:
        self.files.append(name)
        return self.dir / name

    def svg_comment(self, name: str) -> None:
        p = self.dir / name
        text = p.read_text(encoding="utf-8")
        head, rest = text.split("\n", 1)
        comment = "<!-- " + "; ".join(f"{k}: {v}" for k, v in self.meta.items()) + " -->"
        p.write_text(head + "\n" + comment + "\n" + rest, encoding="utf-8")

    def finish(self, opts: dict) -> None:
        keep = {k: (str(v) if isinstance(v, Path) else v) for k, v in opts.items()
                if k not in ("out_dir", "verbose", "threads") and v is not None}
        manifest = {
            "meta": self.meta,
            "options": keep,
            "files": {name: _sha256(self.dir / name) for name in sorted(set(self.files))},
        }
        (self.dir / "manifest.json").write_text(json.dumps(manifest, indent=1, sort_keys=True) + "\n",
                                                encoding="utf-8")


def _require(opts: dict, *keys):
    for k in keys:
        if opts.get(k) is None:
            raise InputError(f"--{k.replace('_', '-')} is required")


def _load_table(path: Path, species: str | None = None) -> PlotTable:
    if not Path(path).exists():
        raise InputError(f"{path}: no such file")
    table = read_plot_table(path)
    if species is not None and np.any(table.species != species):
        table = table.subset(table.species == species)
    keep = np.isfinite(table.age)
    if not np.all(keep):
        table = table.subset(keep)
    return table


def cmd_fit(opts: dict) -> int:
    if opts.get("input") is None and opts.get("plots") is None:
        raise InputError("one of --input or --plots is required")
    species = opts["species"]
    if opts.get("input") is not None:
        if not Path(opts["input"]).exists():
            raise InputError(f"{opts['input']}: no such file")
        loaded = load_survey_csv(opts["input"], strict=opts["strict"])
        table = PlotTable.from_observations(aggregate_survey(loaded.records, species=species))
    else:
        table = _load_table(opts["plots"], species)
    if len(table) == 0:
        raise InputError(f"no usable observations for species {species!r}")
    out = Outputs(opts["out_dir"], "fit", opts)
    write_plot_table(table, out.path("plots.csv"), out.meta)
    smooth = SmoothConfig(k_space=opts["k_space"], k_time=opts["k_time"], k_age=opts["k_age"])
    optimizer = OptimizerConfig(max_pql_iter=opts["max_iter"])
    try:
        model = fit_gamm(table, smooth, correlation=opts["correlation"], optimizer=optimizer)
    except ConvergenceError as exc:
        trace_path = out.path("convergence_trace.json")
        trace_path.write_text(json.dumps({"error": str(exc), "trace": exc.trace}, indent=1, sort_keys=True) + "\n",
                              encoding="utf-8")
        out.finish(opts)
        print(f"error: {exc}; trace written to {trace_path}", file=sys.stderr)
        return EXIT_CONVERGENCE
    save_model(model, out.path("model.json"))
    with out.path("fit_stats.csv").open("w", encoding="utf-8") as fh:
        for k, v in out.meta.items():
            fh.write(f"# {k}: {v}\n")
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["statistic", "value"])
        rows = [("n", model.stats["n"]), ("r2_adj", model.stats["r2_adj"]), ("bic", model.stats["bic"]),
                ("reml", model.stats["reml"]), ("edf_total", model.stats["edf_total"]),
                ("sigma2", model.sigma2), ("phi", model.phi), ("theta", model.theta)]
        rows += [(f"lambda_{j + 1}", lam) for j, lam in enumerate(model.lambdas)]
        rows += [(f"edf[{name}]", e) for name, e in model.term_edf.items()]
        for k, v in rows:
            w.writerow([k, repr(float(v))])
    with out.path("fit.log").open("w", encoding="utf-8") as fh:
        for k, v in out.meta.items():
            fh.write(f"# {k}: {v}\n")
        for rec in model.trace:
            fh.write(json.dumps(rec, sort_keys=True) + "\n")
        fh.write("converged\n")
    out.finish(opts)
    return 0


def _age_spec(text, table: PlotTable, ref_year: int):
    text = str(text)
    if text == "observed":
        return ObservedAge()
    if text == "median":
        return FixedAge(scenario_age(table, ref_year))
    try:
        return FixedAge(float(text))
    except ValueError:
        raise InputError(f"--age must be 'observed', 'median' or a number, got {text!r}")


def cmd_trend(opts: dict) -> int:
    _require(opts, "model", "data")
    model = load_model(opts["model"])
    table = _load_table(opts["data"])
    ref_year = opts["reference_year"] or int(table.year.max())
    grid = Grid1(ref_year) if opts["grid"] == "grid1" else Grid2()
    scenario = Scenario(grid, _age_spec(opts["age"], table, ref_year))
    rows = build_scenario_grid(table, scenario)
    nsim = opts["nsim"] or 1000
    est = trend(model, rows, nsim=nsim, seed=opts["seed"], level=opts["level"],
                scenario=scenario.describe(), threads=opts["threads"])
    out = Outputs(opts["out_dir"], "trend", opts)
    write_trend_csv(est, out.path("trend.csv"), out.meta)
    line_chart_svg(est.years, {"q025": est.lower, "median": est.median, "q975": est.upper},
                   out.path("trend.svg"), title=f"Mean defoliation, {scenario.describe()}",
                   ylabel="defoliation [%]", points={"median": est.median})
    out.svg_comment("trend.svg")
    out.finish(opts)
    return 0


def cmd_map(opts: dict) -> int:
    _require(opts, "model", "year", "age")
    model = load_model(opts["model"])
    sites = None
    if opts.get("data") is not None:
        t = _load_table(opts["data"])
        sites = np.unique(np.column_stack([t.easting, t.northing]), axis=0)
    surf = spatial_map(model, opts["year"], opts["age"], n_grid=opts["n_grid"], mask_distance=opts["mask"],
                       sites=sites)
    out = Outputs(opts["out_dir"], "map", opts)
    write_map_csv(surf, out.path("map.csv"), out.meta)
    heatmap_svg(surf.values, surf.mask, out.path("map.svg"),
                title=f"Defoliation [%] {surf.year}, age {surf.age:g}")
    out.svg_comment("map.svg")
    out.finish(opts)
    return 0


def cmd_simulate_grid(opts: dict) -> int:
    _require(opts, "model", "data")
    truth = load_model(opts["model"])
    table = _load_table(opts["data"])
    excluded = tuple(r for r in str(opts["exclude_regions"] or "").split(",") if r)
    protocol = SimProtocol(nsim=opts["nsim"] or 40, approach=opts["approach"], excluded_regions=excluded,
                           seed=opts["seed"], window=tuple(opts["window"]), threads=opts["threads"],
                           strict=opts["strict"])
    universe = build_universe(table, opts["reference_year"])
    exam = run_grid_examination(truth, universe, protocol)
    out = Outputs(opts["out_dir"], "simulate-grid", opts)
    write_report_csv(exam, out.path("grid_report.csv"), species=opts["species"], meta=out.meta)
    write_plot_rmpe_csv(exam, out.path("plot_rmpe.csv"), meta=out.meta)
    out.finish(opts)
    return 0


def cmd_diagnose(opts: dict) -> int:
    _require(opts, "model", "data")
    model = load_model(opts["model"])
    table = _load_table(opts["data"])
    res = normalized_residuals(model, table)
    vg = empirical_semivariogram(res, n_bins=opts["n_bins"])
    cg = acf_pacf(res, max_lag=opts["max_lag"])
    out = Outputs(opts["out_dir"], "diagnose", opts)
    write_residuals_csv(res, out.path("residuals.csv"), out.meta)
    write_variogram_csv(vg, out.path("variogram.csv"), out.meta)
    write_correlogram_csv(cg, out.path("acf.csv"), out.meta)
    line_chart_svg(vg.center, {"gamma": vg.gamma}, out.path("variogram.svg"),
                   title="Empirical semivariogram of normalized residuals", ylabel="gamma",
                   points={"gamma": vg.gamma})
    out.svg_comment("variogram.svg")
    line_chart_svg(cg.lags, {"acf": cg.acf, "pacf": cg.pacf, "+band": cg.band, "-band": -cg.band},
                   out.path("acf.svg"), title="ACF / PACF of normalized residuals", ylabel="correlation")
    out.svg_comment("acf.svg")
    out.finish(opts)
    return 0


def cmd_synthesize(opts: dict) -> int:
    kw = {}
    for f in fields(SyntheticConfig):
        v = opts.get(f"syn_{f.name}")
        if v is not None:
            kw[f.name] = tuple(v) if isinstance(f.default, tuple) else v
    config = SyntheticConfig(**kw)
    records = synthesize_survey(config, seed=opts["seed"])
    out = Outputs(opts["out_dir"], "synthesize", opts)
    write_survey_csv(records, out.path("survey.csv"), out.meta)
    (out.dir / "truth.json").write_text(json.dumps({"config": config.to_dict(), "seed": opts["seed"]},
                                                   indent=1, sort_keys=True) + "\n", encoding="utf-8")
    out.files.append("truth.json")
    out.finish(opts)
    return 0


COMMANDS = {
    "fit": cmd_fit,
    "trend": cmd_trend,
    "map": cmd_map,
    "simulate-grid": cmd_simulate_grid,
    "diagnose": cmd_diagnose,
    "synthesize": cmd_synthesize,
}


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        opts = _resolve(args)
        rc = COMMANDS[args.command](opts)
    except (InputError, SchemaError, SurveyDataError, BasisError, TrendError, ModelFileError, GridSimError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INPUT
    except ConvergenceError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONVERGENCE
    except GammError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INPUT
    except OSError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_IO
    return rc


if __name__ == "__main__":
    sys.exit(main())
