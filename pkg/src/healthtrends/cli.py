"""Command-line entry point: ``healthtrends {simulate,fit,report,validate}``.

Settings come from a JSON config file (``--config``) with flag overrides.
Paths inside the config are relative to the config file. Every run writes
the fully resolved config to ``<out>/config.json``.

Exit codes: 0 success, 1 calibration gate failure, 2 input or usage error.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
import time
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path

import numpy as np

from . import __version__
from .geo_data import (
    IngestError,
    load_covariates,
    load_hierarchy,
    load_population,
    load_studies,
    write_covariates,
    write_hierarchy,
    write_population,
    write_studies,
)
from .inference import (
    InferenceError,
    aggregate,
    age_standardize,
    linearize_trend,
    plot_trends_svg,
    predict_grid,
    summarize,
    trend_rows,
    variance_decomposition,
    write_decomposition_csv,
    write_slopes_csv,
    write_trends_csv,
)
from .model import HYPER_NAMES, FitData
from .sampler import PosteriorDraws, SamplerConfig, SamplerError, read_draws, run_chains, write_draws
from .util import atomic_write_json, atomic_write_text
from .validation import (
    STATISTICS,
    SyntheticSpec,
    cross_validate,
    posterior_predictive_check,
    recover_parameters,
    simulate_dataset,
)

log = logging.getLogger("healthtrends")

EXIT_OK, EXIT_GATE, EXIT_INPUT = 0, 1, 2
INPUT_KEYS = ("hierarchy", "studies", "covariates", "population", "standard_pop")
INPUT_FILES = {k: f"{k}.csv" for k in INPUT_KEYS}
CHECKS = ("cv", "ppc", "recovery")
RHAT_WARN = 1.05


class ConfigError(ValueError):
    pass


@dataclass
class RunConfig:
    """Fully resolved settings for one subcommand run."""

    inputs: dict = field(default_factory=dict)
    window: tuple | None = None
    sampler: SamplerConfig = field(default_factory=SamplerConfig)
    out: Path = Path("out")
    jobs: int = 1
    draw_format: str = "npy"
    resume: bool = False
    simulate: dict = field(default_factory=dict)
    report: dict = field(default_factory=lambda: {
        "draws": None, "include_study_effect": False, "reference_age": 50.0, "max_draws": 1000, "plots": False})
    validate: dict = field(default_factory=lambda: {
        "checks": ["cv", "ppc"], "mask_fraction": 0.2, "coverage_bounds": [0.90, 0.99],
        "fixed_hypers": {}, "n_replicates": 50, "max_abs_mean_z": 0.5, "recovery_coverage": [0.90, 1.00]})

    def to_dict(self) -> dict:
        return {
            "inputs": {k: str(v) for k, v in self.inputs.items()},
            "window": list(self.window) if self.window else None,
            "sampler": asdict(self.sampler),
            "out": str(self.out),
            "jobs": self.jobs,
            "draw_format": self.draw_format,
            "resume": self.resume,
            "simulate": self.simulate,
            "report": self.report,
            "validate": self.validate,
            "version": __version__,
        }


def _sampler_from(d: dict) -> SamplerConfig:
    known = {f.name for f in fields(SamplerConfig)}
    extra = set(d) - known
    if extra:
        raise ConfigError(f"unknown sampler settings: {sorted(extra)}")
    return SamplerConfig(**d)


def resolve_config(args) -> RunConfig:
    """Defaults, then the config file, then command-line flags."""
    cfg = RunConfig()
    raw = {}
    base = Path.cwd()
    if args.config:
        path = Path(args.config)
        try:
            raw = json.loads(path.read_text(encoding="utf-8"))
        except FileNotFoundError:
            raise ConfigError(f"config file not found: {path}") from None
        except json.JSONDecodeError as exc:
            raise ConfigError(f"{path}: invalid JSON ({exc})") from None
        base = path.resolve().parent
    unknown = set(raw) - {f.name for f in fields(RunConfig)} - {"version"}
    if unknown:
        raise ConfigError(f"unknown config sections: {sorted(unknown)}")
    cfg.inputs = {k: (base / v).resolve() for k, v in raw.get("inputs", {}).items()}
    if raw.get("window") is not None:
        cfg.window = tuple(int(x) for x in raw["window"])
    try:
        sampler = _sampler_from(raw.get("sampler", {}))
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"sampler settings: {exc}") from None
    cfg.simulate = dict(raw.get("simulate", {}))
    cfg.report.update(raw.get("report", {}))
    cfg.validate.update(raw.get("validate", {}))
    cfg.jobs = int(raw.get("jobs", 1))
    cfg.draw_format = raw.get("draw_format", "npy")
    if raw.get("out"):
        cfg.out = (base / raw["out"]).resolve()
    if cfg.report.get("draws"):
        cfg.report["draws"] = str((base / cfg.report["draws"]).resolve())

    # flag overrides
    overrides = {}
    if getattr(args, "seed", None) is not None:
        overrides["rng_seed"] = args.seed
        cfg.simulate["seed"] = args.seed
    for flag, key in (("chains", "n_chains"), ("burnin", "n_burnin"), ("iter", "n_iter"), ("thin", "thin")):
        if getattr(args, flag, None) is not None:
            overrides[key] = getattr(args, flag)
    try:
        cfg.sampler = replace(sampler, **overrides)
    except ValueError as exc:
        raise ConfigError(f"sampler settings: {exc}") from None
    if getattr(args, "jobs", None) is not None:
        cfg.jobs = args.jobs
    if getattr(args, "out", None):
        cfg.out = Path(args.out).resolve()
    if getattr(args, "format", None):
        cfg.draw_format = args.format
    cfg.resume = bool(getattr(args, "resume", False))
    if getattr(args, "draws", None):
        cfg.report["draws"] = str(Path(args.draws).resolve())
    if getattr(args, "include_study_effect", False):
        cfg.report["include_study_effect"] = True
    if getattr(args, "reference_age", None) is not None:
        cfg.report["reference_age"] = float(args.reference_age)
    if getattr(args, "plots", False):
        cfg.report["plots"] = True
    if getattr(args, "mask_fraction", None) is not None:
        cfg.validate["mask_fraction"] = float(args.mask_fraction)
    if getattr(args, "checks", None) is not None:
        cfg.validate["checks"] = parse_checks(args.checks)
    if getattr(args, "replicates", None) is not None:
        cfg.validate["n_replicates"] = int(args.replicates)

    if cfg.jobs < 1:
        raise ConfigError("--jobs must be >= 1")
    if cfg.draw_format not in ("npy", "csv"):
        raise ConfigError("draw format must be 'npy' or 'csv'")
    if cfg.window is not None and cfg.window[0] > cfg.window[1]:
        raise ConfigError(f"window {cfg.window} is not well-ordered")
    return cfg


def parse_checks(text) -> list:
    items = [c.strip() for c in (text.split(",") if isinstance(text, str) else text) if c.strip()]
    if not items or "none" in items:
        raise ConfigError("--checks needs at least one of: " + ", ".join(CHECKS))
    bad = [c for c in items if c not in CHECKS]
    if bad:
        raise ConfigError(f"unknown checks {bad}; choose from {', '.join(CHECKS)}")
    return items


# ----------------------------------------------------------------------------
# shared loading


@dataclass
class LoadedInputs:
    hierarchy: object
    studies: list
    covariates: object
    population: object
    data: FitData


def load_inputs(cfg: RunConfig, need_population=True) -> LoadedInputs:
    missing = [k for k in INPUT_KEYS if k not in cfg.inputs and (need_population or k in INPUT_KEYS[:3])]
    if missing:
        raise ConfigError(f"config is missing input paths: {missing}")
    if cfg.window is None:
        raise ConfigError("config needs a window [first_year, last_year]")
    for k, p in cfg.inputs.items():
        if k in INPUT_KEYS and not Path(p).exists():
            raise IngestError(f"{k} file not found", p)
    h = load_hierarchy(cfg.inputs["hierarchy"])
    studies = load_studies(cfg.inputs["studies"], h, cfg.window)
    cov = load_covariates(cfg.inputs["covariates"], h, years=cfg.window)
    pop = None
    if need_population:
        pop = load_population(cfg.inputs["population"], cfg.inputs["standard_pop"], h, cfg.window)
    data = FitData.from_records(h, studies, cov, tuple(cfg.window))
    return LoadedInputs(h, studies, cov, pop, data)


def _prepare_out(cfg: RunConfig):
    try:
        cfg.out.mkdir(parents=True, exist_ok=True)
        probe = cfg.out / ".write_probe"
        probe.write_text("")
        probe.unlink()
    except OSError as exc:
        raise ConfigError(f"output directory {cfg.out} is not writable: {exc}") from None


def _echo(cfg: RunConfig, name="config.json"):
    atomic_write_json(cfg.out / name, cfg.to_dict())


# ----------------------------------------------------------------------------
# subcommands


def cmd_simulate(cfg: RunConfig) -> int:
    try:
        spec = SyntheticSpec.from_dict(cfg.simulate)
        spec.validate()
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"invalid synthetic spec: {exc}") from None
    _prepare_out(cfg)
    ds = simulate_dataset(spec)
    out = cfg.out
    write_hierarchy(out / INPUT_FILES["hierarchy"], ds.hierarchy)
    write_studies(out / INPUT_FILES["studies"], ds.studies, ds.hierarchy)
    write_covariates(out / INPUT_FILES["covariates"], ds.covariates, ds.hierarchy)
    write_population(out / INPUT_FILES["population"], out / INPUT_FILES["standard_pop"], ds.population, ds.hierarchy)
    atomic_write_json(out / "truth.json", ds.truth_record())
    # the echoed config doubles as a ready-to-use fit config for this dataset
    cfg.inputs = {k: INPUT_FILES[k] for k in INPUT_KEYS}
    cfg.window = tuple(spec.window)
    cfg.simulate = spec.to_dict()
    written_to = cfg.out
    cfg.out = Path("fit")
    atomic_write_json(written_to / "config.json", cfg.to_dict())
    cfg.out = written_to
    log.info("wrote synthetic dataset (%d studies) to %s", len(ds.studies), out)
    return EXIT_OK


def _existing_chains(out: Path) -> list:
    return sorted(list(out.glob("chain_*.npy")) + list(out.glob("chain_*.csv")))


def cmd_fit(cfg: RunConfig) -> int:
    inp = load_inputs(cfg, need_population=False)
    _prepare_out(cfg)
    first_chain = 0
    previous = None
    if cfg.resume:
        files = _existing_chains(cfg.out)
        if files:
            sidecar_path = cfg.out / "fit.json"
            if not sidecar_path.exists():
                raise ConfigError(f"cannot resume: {sidecar_path} is missing")
            previous = json.loads(sidecar_path.read_text())
            if previous["config"].get("rng_seed") != cfg.sampler.rng_seed:
                raise ConfigError("cannot resume with a different seed")
            first_chain = max(int(f.stem.split("_")[1]) for f in files) + 1
            log.info("resuming: adding %d chain(s) starting at chain %d", cfg.sampler.n_chains, first_chain)
    t0 = time.perf_counter()
    draws = run_chains(inp.data, cfg.sampler, jobs=cfg.jobs, first_chain=first_chain)
    runtime = time.perf_counter() - t0
    sidecar = write_draws(cfg.out, draws, inp.data, cfg.draw_format, first_chain=first_chain)
    if previous is not None:
        all_draws = read_draws(cfg.out, sidecar)
        sidecar["rhat"] = all_draws.rhat() if all_draws.n_chains > 1 and all_draws.n_keep >= 4 else {}
        sidecar["seeds"] = previous["seeds"] + sidecar["seeds"]
        sidecar["acceptance"] = previous["acceptance"] + sidecar["acceptance"]
        sidecar["files"] = sorted(set(previous["files"]) | set(sidecar["files"]))
        runtime += float(previous.get("runtime_seconds", 0.0))
    worst = max((v["split_rhat"] for v in sidecar["rhat"].values()), default=float("nan"))
    converged = bool(sidecar["rhat"]) and worst < RHAT_WARN
    sidecar.update({"runtime_seconds": runtime, "max_split_rhat": worst, "converged": converged})
    atomic_write_json(cfg.out / "fit.json", sidecar)
    _echo(cfg)
    if sidecar["rhat"] and not converged:
        log.warning("convergence warning: max split-R-hat %.3f >= %.2f (see fit.json)", worst, RHAT_WARN)
    log.info("fit done in %.1f s; draws in %s", runtime, cfg.out)
    return EXIT_OK


def _load_fit(cfg: RunConfig, inp: LoadedInputs) -> PosteriorDraws:
    draws_dir = Path(cfg.report.get("draws") or cfg.out)
    sidecar_path = draws_dir / "fit.json"
    if not sidecar_path.exists():
        raise ConfigError(f"no fit found in {draws_dir} (missing fit.json)")
    sidecar = json.loads(sidecar_path.read_text())
    draws = read_draws(draws_dir, sidecar)
    h = inp.hierarchy
    if sidecar["hierarchy"] != {"J": h.J, "K": h.K, "L": h.L} or tuple(sidecar["window"]) != tuple(cfg.window):
        raise ConfigError("draws do not match the hierarchy or window of the inputs")
    return draws


def cmd_report(cfg: RunConfig) -> int:
    inp = load_inputs(cfg)
    draws = _load_fit(cfg, inp)
    _prepare_out(cfg)
    rep = cfg.report
    max_draws = rep.get("max_draws")
    pop = inp.population
    grid = predict_grid(draws, inp.hierarchy, inp.covariates, pop.age_groups, rep["include_study_effect"],
                        window=cfg.window, seed=cfg.sampler.rng_seed, max_draws=max_draws)
    agg = aggregate(grid, pop)
    rows = trend_rows(grid, agg, pop.standard_weights)
    write_trends_csv(cfg.out / "trends.csv", rows)

    slopes = {}
    std_country = age_standardize(grid.values, pop.standard_weights)
    for j, lab in enumerate(inp.hierarchy.country_labels):
        slopes[f"country:{lab}"] = linearize_trend(std_country[:, j], grid.years)
    std_agg = {}
    for name in ("subregion", "region", "globe"):
        std_agg[name] = age_standardize(agg.levels[name], pop.standard_weights)
        for g, lab in enumerate(agg.labels[name]):
            slopes[f"{name}:{lab}"] = linearize_trend(std_agg[name][:, g], grid.years)
    write_slopes_csv(cfg.out / "slopes.csv", slopes)

    ref_age = float(rep["reference_age"])
    ref = predict_grid(draws, inp.hierarchy, inp.covariates, [ref_age], rep["include_study_effect"],
                       window=cfg.window, seed=cfg.sampler.rng_seed, max_draws=max_draws)
    table = variance_decomposition(ref.values[..., 0], inp.hierarchy)
    write_decomposition_csv(cfg.out / "decomposition.csv", table)
    atomic_write_text(cfg.out / "decomposition.txt", table.text() + "\n")

    if rep.get("plots"):
        plots = cfg.out / "plots"
        plots.mkdir(exist_ok=True)
        plot_trends_svg(plots / "regions.svg", grid.years,
                        {lab: summarize(std_agg["region"][:, g]) for g, lab in enumerate(agg.labels["region"])},
                        ylabel="age-standardized mean")
        plot_trends_svg(plots / "globe.svg", grid.years, {"globe": summarize(std_agg["globe"][:, 0])},
                        ylabel="age-standardized mean")
    _echo(cfg)
    log.info("report written to %s", cfg.out)
    return EXIT_OK


def cmd_validate(cfg: RunConfig) -> int:
    v = cfg.validate
    checks = parse_checks(v.get("checks", []))
    fixed = dict(v.get("fixed_hypers") or {})
    bad = set(fixed) - set(HYPER_NAMES)
    if bad:
        raise ConfigError(f"unknown fixed hyperparameters {sorted(bad)}")
    inp = load_inputs(cfg, need_population=False) if {"cv", "ppc"} & set(checks) else None
    _prepare_out(cfg)
    report, texts, failures = {}, [], []
    if "cv" in checks:
        cv = cross_validate(inp.data, cfg.sampler, v["mask_fraction"], jobs=cfg.jobs, fixed_hypers=fixed or None)
        report["cross_validation"] = cv.to_dict()
        texts.append(cv.text())
        lo, hi = v["coverage_bounds"]
        if cv.n_masked_studies and not lo <= cv.coverage <= hi:
            failures.append(f"cross-validation coverage {cv.coverage:.3f} outside [{lo}, {hi}]")
    if "ppc" in checks:
        draws = run_chains(inp.data, cfg.sampler, jobs=cfg.jobs, fixed_hypers=fixed or None)
        ppc = posterior_predictive_check(inp.data, draws, STATISTICS, seed=cfg.sampler.rng_seed)
        report["posterior_predictive_check"] = ppc.to_dict()
        texts.append(ppc.text())
    if "recovery" in checks:
        try:
            spec = SyntheticSpec.from_dict(cfg.simulate)
        except (TypeError, ValueError) as exc:
            raise ConfigError(f"invalid synthetic spec: {exc}") from None
        rec = recover_parameters(spec, cfg.sampler, int(v["n_replicates"]), jobs=cfg.jobs)
        report["recovery"] = rec.to_dict()
        texts.append(rec.text())
        lo, hi = v["recovery_coverage"]
        for p in rec.params:
            if not lo <= rec.coverage[p] <= hi:
                failures.append(f"recovery coverage for {p} is {rec.coverage[p]:.2f}")
            if abs(rec.mean_z[p]) >= v["max_abs_mean_z"]:
                failures.append(f"recovery mean z for {p} is {rec.mean_z[p]:.2f}")
    report["gate_failures"] = failures
    report["passed"] = not failures
    atomic_write_json(cfg.out / "validate.json", report)
    atomic_write_text(cfg.out / "validate.txt", "\n\n".join(texts + failures) + "\n")
    _echo(cfg)
    for t in texts:
        print(t)
    if failures:
        for f in failures:
            log.error("calibration gate failed: %s", f)
        return EXIT_GATE
    return EXIT_OK


COMMANDS = {"simulate": cmd_simulate, "fit": cmd_fit, "report": cmd_report, "validate": cmd_validate}


# ----------------------------------------------------------------------------
# argument parsing


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="JSON config file")
    common.add_argument("--seed", type=int, help="master seed (sampler and simulation)")
    common.add_argument("--jobs", type=int, help="worker processes for chains or replicates")
    common.add_argument("--out", help="output directory")
    common.add_argument("-v", "--verbose", action="store_true")
    sampler = argparse.ArgumentParser(add_help=False)
    sampler.add_argument("--chains", type=int)
    sampler.add_argument("--burnin", type=int)
    sampler.add_argument("--iter", type=int)
    sampler.add_argument("--thin", type=int)

    p = argparse.ArgumentParser(prog="healthtrends", description=__doc__.splitlines()[0])
    p.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = p.add_subparsers(dest="command", required=True)
    sub.add_parser("simulate", parents=[common], help="write a synthetic dataset with known truth")
    f = sub.add_parser("fit", parents=[common, sampler], help="run the MCMC sampler")
    f.add_argument("--resume", action="store_true", help="append new chains to existing draws in --out")
    f.add_argument("--format", choices=("npy", "csv"), help="draw file format")
    r = sub.add_parser("report", parents=[common, sampler], help="predictions, aggregates, trends, decomposition")
    r.add_argument("--draws", help="directory holding fit.json and chain files (default: --out)")
    r.add_argument("--include-study-effect", action="store_true")
    r.add_argument("--reference-age", type=float)
    r.add_argument("--plots", action="store_true", help="also write SVG trend plots")
    v = sub.add_parser("validate", parents=[common, sampler], help="cross-validation, PPC and recovery checks")
    v.add_argument("--checks", help="comma-separated subset of: " + ", ".join(CHECKS))
    v.add_argument("--mask-fraction", type=float)
    v.add_argument("--replicates", type=int)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.INFO,
                        format="%(levelname)s %(name)s: %(message)s", stream=sys.stderr)
    try:
        cfg = resolve_config(args)
        return COMMANDS[args.command](cfg)
    except ConfigError as exc:
        parser.print_usage(sys.stderr)
        print(f"healthtrends {args.command}: error: {exc}", file=sys.stderr)
        return EXIT_INPUT
    except SamplerError as exc:
        print(f"healthtrends {args.command}: sampler error: {exc}", file=sys.stderr)
        return EXIT_INPUT
    except (IngestError, InferenceError, FileNotFoundError) as exc:
        print(f"healthtrends {args.command}: input error: {exc}", file=sys.stderr)
        return EXIT_INPUT


if __name__ == "__main__":
    sys.exit(main())
