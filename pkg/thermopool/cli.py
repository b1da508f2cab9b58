"""Command-line front end: ``thermopool <subcommand> [flags]``.

Exit codes: 0 on success, 1 on invalid input or usage, 2 on runtime failure.
"""
from __future__ import annotations

import argparse
import logging
import sys
from pathlib import Path
from typing import Any, Callable, Dict, Iterable, List, Optional, Sequence, Tuple

import pandas as pd
import pydantic

from . import __version__
from .core.config import (
    BIN_LOWER,
    BIN_UPPER,
    BIN_WIDTH,
    CHAINS,
    DAY_WINDOW,
    LKJ_ETA,
    LOG_LEVEL,
    MAX_TREEDEPTH,
    REPLICATION_REFERENCE,
    ROLLING_WINDOW_YEARS,
    SAMPLES,
    SEED,
    TARGET_ACCEPT,
    THREADS,
    WARMUP,
)
from .core.diagnostics import compare_models, convergence_table, predictive_simulate, psis_loo
from .core.errors import (
    MissingFlag,
    RuntimeFailure,
    ThermopoolError,
    UnknownSubcommand,
    ValidationError,
)
from .core.exposure import (
    BinScheme,
    ExposureTable,
    all_width_schemes,
    assign_bin,
    climate_census,
    compute_day_counts,
    compute_exposure,
    make_bin_scheme,
    parse_day_window,
    replication_scheme,
)
from .core.gridio import load_grid_dir, validate_alignment
from .core.inference import ModelSpec, PriorConfig, Variant
from .core.panel import (
    DesignMatrix,
    PanelDataset,
    assemble_panel,
    build_design,
    panel_from_frame,
    panel_to_frame,
)
from .core.report import (
    elasticity_table,
    group_effects_table,
    koyck_table,
    model_spec,
    rolling_windows,
    sensitivity_rows,
    summarize,
    warming_counterfactual,
    windows_frame,
)
from .core.sampler import PosteriorDraws, SamplerConfig, run_chains
from .core.simulate import SimulationConfig, simulate, write_simulation
from .core.storage import (
    RunManifest,
    draws_to_frame,
    input_digests,
    load_draws,
    save_draws,
    utc_now,
    write_csv,
    write_manifest,
)
from .core.twfe import assemble_twfe_panel, twfe_augmented, twfe_fit

logger = logging.getLogger(__name__)

DESIGN_SUFFIX = ".design.csv"


class _Parser(argparse.ArgumentParser):
    """ArgumentParser that raises instead of exiting, so exit codes stay ours."""

    def error(self, message: str):
        self.print_usage(sys.stderr)
        if "invalid choice" in message:
            raise UnknownSubcommand(f"{self.prog}: {message}")
        if "required" in message:
            raise MissingFlag(f"{self.prog}: {message}")
        raise ValidationError(f"{self.prog}: {message}")


# -------------------- config files --------------------
def read_config_file(path: str | Path) -> Dict[str, str]:
    """``key = value`` lines; blank lines and ``#`` comments are ignored."""
    values: Dict[str, str] = {}
    try:
        text = Path(path).read_text(encoding="utf-8")
    except OSError as exc:
        raise ValidationError(f"cannot read config file {path}: {exc}") from exc
    for lineno, line in enumerate(text.splitlines(), start=1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ValidationError(f"{path}:{lineno}: expected key=value, got {line!r}")
        key, value = line.split("=", 1)
        values[key.strip().replace("-", "_")] = value.strip().strip('"').strip("'")
    return values


def _convert(action: argparse.Action, raw: str) -> Any:
    if isinstance(action, (argparse._StoreTrueAction, argparse._StoreFalseAction)):
        flag = raw.lower() in ("1", "true", "yes", "on")
        return flag if isinstance(action, argparse._StoreTrueAction) else not flag
    convert: Callable[[str], Any] = action.type or str
    if action.nargs in ("+", "*"):
        return [convert(v) for v in raw.replace(",", " ").split()]
    return convert(raw)


def _apply_config(sub: argparse.ArgumentParser, path: str) -> None:
    """Config values become subcommand defaults; explicit flags still win."""
    actions = {a.dest: a for a in sub._actions}
    defaults = {}
    for key, raw in read_config_file(path).items():
        action = actions.get(key)
        if action is None or key in ("help", "config"):
            raise ValidationError(f"{path}: unknown key {key!r} for '{sub.prog}'")
        try:
            defaults[key] = _convert(action, raw)
        except ValueError as exc:
            raise ValidationError(f"{path}: bad value for {key}: {raw!r}") from exc
    sub.set_defaults(**defaults)


def _require(args: argparse.Namespace, *names: str) -> None:
    missing = ["--" + n.replace("_", "-") for n in names if getattr(args, n, None) in (None, [], "")]
    if missing:
        raise MissingFlag(f"{args.command}: missing required flag(s) {', '.join(missing)}")


# -------------------- manifests --------------------
def _flags(args: argparse.Namespace) -> Dict[str, Any]:
    out = {}
    for key, value in sorted(vars(args).items()):
        if key == "handler":
            continue
        out[key] = [str(v) for v in value] if isinstance(value, list) else value
    return out


def _manifest(
    args: argparse.Namespace,
    started: str,
    inputs: Iterable[Optional[str | Path]],
    outputs: Sequence[str | Path],
    target: str | Path,
    seed: Optional[int] = None,
    notes: Optional[Dict[str, str]] = None,
) -> None:
    manifest = RunManifest(
        command=args.command,
        flags=_flags(args),
        input_digests=input_digests(p for p in inputs if p),
        seed=seed,
        tool_version=__version__,
        started_at=started,
        finished_at=utc_now(),
        outputs=[str(p) for p in outputs],
        notes=notes or {},
    )
    write_manifest(manifest, target)


# -------------------- shared loaders --------------------
def _read_table(path: str | Path) -> pd.DataFrame:
    try:
        return pd.read_csv(path, dtype={"country": str})
    except FileNotFoundError as exc:
        raise ValidationError(f"no such file: {path}") from exc


def _load_exposure(path: str, reference_temp: Optional[float] = None) -> ExposureTable:
    table = ExposureTable.from_frame(_read_table(path))
    if reference_temp is not None:
        scheme = table.scheme.with_reference([int(assign_bin(reference_temp, table.scheme))])
        table = ExposureTable(scheme, table.keys, table.values, table.hours_count)
    return table


def _sampler_config(args: argparse.Namespace) -> SamplerConfig:
    return SamplerConfig(
        n_chains=args.chains, n_warmup=args.warmup, n_samples=args.samples,
        target_accept=args.target_accept, max_treedepth=args.max_treedepth,
        seed=args.seed, threads=args.threads,
    )


def _prior(args: argparse.Namespace) -> PriorConfig:
    return PriorConfig.from_preset(args.prior_preset)


def _panel_from_args(args: argparse.Namespace) -> PanelDataset:
    _require(args, "energy", "gdp", "price", "exposure")
    exposure = _load_exposure(args.exposure, args.reference_temp)
    return assemble_panel(args.energy, args.gdp, args.price, exposure)


def design_path_for(draws_path: str | Path) -> Path:
    draws_path = Path(draws_path)
    return draws_path.with_name(draws_path.stem + DESIGN_SUFFIX)


def load_design(draws: PosteriorDraws, path: str | Path) -> Tuple[PanelDataset, DesignMatrix]:
    panel = panel_from_frame(_read_table(path), draws.metadata.get("reference_bins"))
    return panel, build_design(panel)


def _draws_and_design(draws_path: str, design: Optional[str]) -> Tuple[PosteriorDraws, ModelSpec, PanelDataset, DesignMatrix]:
    draws = load_draws(draws_path)
    path = design or design_path_for(draws_path)
    panel, dm = load_design(draws, path)
    spec = model_spec(draws)
    if dm.n == 0 or dm.N != spec.N or dm.K_eff != spec.K_eff:
        raise ValidationError(f"design {path} does not match the model in {draws_path}")
    return draws, spec, panel, dm


# -------------------- subcommands --------------------
def cmd_exposure(args: argparse.Namespace) -> int:
    _require(args, "grid_dir", "out")
    started = utc_now()
    tg, pg, cm = load_grid_dir(args.grid_dir)
    report = validate_alignment(tg, pg, cm)
    for entry in report.warnings:
        logger.warning("Alignment: %s", entry.message)
    report.raise_if_fatal()
    window = parse_day_window(args.day_window)
    out = Path(args.out)

    jobs: List[Tuple[Path, BinScheme]] = []
    if args.daycounts:
        jobs.append((out, replication_scheme()))
    elif args.all_widths:
        for scheme in all_width_schemes(args.lower, args.upper):
            jobs.append((out.with_name(f"{out.stem}_w{scheme.width:g}{out.suffix or '.csv'}"), scheme))
    else:
        jobs.append((out, make_bin_scheme(args.width, args.lower, args.upper)))

    written = []
    for path, scheme in jobs:
        if args.daycounts:
            table = compute_day_counts(tg, pg, cm, scheme, threads=args.threads)
        else:
            table = compute_exposure(tg, pg, cm, scheme, window, threads=args.threads)
        write_csv(path, table.to_frame())
        written.append(path)
    _manifest(args, started, [args.grid_dir], written, written[0] if len(written) == 1 else out.parent)
    return 0


def cmd_fit(args: argparse.Namespace) -> int:
    _require(args, "out")
    started = utc_now()
    panel = _panel_from_args(args)
    design = build_design(panel)
    spec = ModelSpec.from_design(
        design, Variant.parse(args.variant), _prior(args), args.lkj_eta, args.likelihood_weight,
    )
    draws = run_chains(design, spec, _sampler_config(args))
    out = Path(args.out)
    save_draws(out, draws)
    design_out = design_path_for(out)
    write_csv(design_out, panel_to_frame(panel))
    written = [out, design_out]
    if args.csv:
        csv_out = out.with_suffix(".csv")
        write_csv(csv_out, draws_to_frame(draws))
        written.append(csv_out)
    if draws.divergences:
        logger.warning("%d divergent transitions", draws.divergences)
    _manifest(args, started, [args.energy, args.gdp, args.price, args.exposure], written, out,
              seed=args.seed, notes={"design": str(design_out), "divergences": str(draws.divergences)})
    return 0


def cmd_diagnose(args: argparse.Namespace) -> int:
    _require(args, "out")
    started = utc_now()
    out = Path(args.out)
    if args.compare:
        results = []
        for path in args.compare:
            draws, spec, _panel, design = _draws_and_design(path, None)
            results.append(psis_loo(draws, design, spec, name=Path(path).stem))
        target = out / "compare.csv"
        write_csv(target, compare_models(results))
        _manifest(args, started, [*args.compare, *(design_path_for(p) for p in args.compare)], [target], out)
        return 0

    _require(args, "draws")
    draws, spec, _panel, design = _draws_and_design(args.draws, args.design)
    written = [out / "rhat_ess.csv", out / "loo.csv", out / "loo_summary.csv"]
    write_csv(written[0], convergence_table(draws))
    loo = psis_loo(draws, design, spec, name=Path(args.draws).stem)
    write_csv(written[1], loo.to_frame())
    write_csv(written[2], compare_models([loo]))
    if args.ppc:
        ppc = predictive_simulate(design, spec, "posterior", args.ppc, draws, seed=args.seed)
        write_csv(out / "ppc.csv", ppc.to_frame(design))
        write_csv(out / "ppc_summary.csv", ppc.summary())
        written += [out / "ppc.csv", out / "ppc_summary.csv"]
    if args.prior_predictive:
        prior = predictive_simulate(design, spec, "prior", args.prior_predictive, seed=args.seed)
        write_csv(out / "prior_predictive.csv", prior.summary())
        written.append(out / "prior_predictive.csv")
    _manifest(args, started, [args.draws, args.design or design_path_for(args.draws)], written, out, seed=args.seed)
    return 0


def cmd_report(args: argparse.Namespace) -> int:
    _require(args, "out")
    started = utc_now()
    out = Path(args.out)
    written: List[Path] = []
    inputs: List[Any] = []

    if args.sensitivity:
        frames = [sensitivity_rows(Path(p).stem, load_draws(p)) for p in args.sensitivity]
        written.append(out / "sensitivity.csv")
        write_csv(written[-1], pd.concat(frames, ignore_index=True))
        inputs += args.sensitivity

    if args.draws:
        draws = load_draws(args.draws)
        inputs.append(args.draws)
        written.append(out / "summary.csv")
        write_csv(written[-1], summarize(draws))
        if args.koyck:
            written.append(out / "koyck.csv")
            write_csv(written[-1], koyck_table(draws, args.shift))
        if args.elasticities:
            written.append(out / "elasticities.csv")
            write_csv(written[-1], elasticity_table(draws))
        if args.group_effects:
            effects, corr = group_effects_table(draws)
            written += [out / "group_effects.csv", out / "group_correlation.csv"]
            write_csv(written[-2], effects)
            write_csv(written[-1], corr.reset_index().rename(columns={"index": "coefficient"}))
        if args.counterfactual is not None:
            _require(args, "base_year", "grid_dir")
            draws, _spec, panel, design = _draws_and_design(args.draws, args.design)
            tg, pg, cm = load_grid_dir(args.grid_dir)
            result = warming_counterfactual(
                draws, tg, pg, cm, panel.scheme, design, args.counterfactual, args.base_year,
                mode=args.mode, day_window=parse_day_window(args.day_window), absolute=args.absolute,
            )
            table = pd.concat([
                result.table,
                pd.DataFrame([{"country": "ALL", "pct_change": result.total_pct_change}]),
            ], ignore_index=True)
            written.append(out / "counterfactual.csv")
            write_csv(written[-1], table)
            inputs += [args.grid_dir, args.design or design_path_for(args.draws)]
    elif not args.sensitivity:
        raise MissingFlag("report: give a draws file or --sensitivity")
    _manifest(args, started, inputs, written, out)
    return 0


def cmd_twfe(args: argparse.Namespace) -> int:
    _require(args, "out")
    started = utc_now()
    panel_dir = Path(args.panel) if args.panel else None

    def pick(flag: Optional[str], name: str) -> Optional[str]:
        if flag:
            return flag
        if panel_dir is not None and (panel_dir / f"{name}.csv").exists():
            return str(panel_dir / f"{name}.csv")
        return None

    energy, gdp, population, price = (pick(args.energy, "energy"), pick(args.gdp, "gdp"),
                                      pick(args.population, "population"), pick(args.price, "price"))
    if not (energy and gdp and population):
        raise MissingFlag("twfe: needs --panel DIR or --energy, --gdp and --population")
    if args.daycounts:
        daycounts = _load_exposure(args.daycounts, args.reference_temp)
    elif args.grid_dir:
        tg, pg, cm = load_grid_dir(args.grid_dir)
        daycounts = compute_day_counts(tg, pg, cm, replication_scheme(), threads=args.threads)
    else:
        raise MissingFlag("twfe: needs --daycounts or --grid-dir")

    panel = assemble_twfe_panel(energy, gdp, population, daycounts, price=price)
    if args.augmented:
        if price is None:
            raise MissingFlag("twfe --augmented needs a price series")
        fit = twfe_augmented(panel)
    else:
        fit = twfe_fit(panel)
    write_csv(args.out, fit.to_frame())
    _manifest(args, started, [energy, gdp, population, price, args.daycounts, args.grid_dir], [args.out], args.out,
              notes={"cluster": fit.cluster, "n_obs": str(fit.n_obs)})
    return 0


def cmd_census(args: argparse.Namespace) -> int:
    _require(args, "grid_dir", "year", "out")
    started = utc_now()
    tg, pg, cm = load_grid_dir(args.grid_dir)
    totals = climate_census(tg, pg, cm, args.year, args.bands)
    frame = pd.DataFrame({"band": list(totals), "population": list(totals.values())})
    write_csv(args.out, frame)
    _manifest(args, started, [args.grid_dir], [args.out], args.out)
    return 0


def cmd_windows(args: argparse.Namespace) -> int:
    _require(args, "out")
    started = utc_now()
    panel = _panel_from_args(args)
    results = rolling_windows(
        panel, _sampler_config(args), args.window, Variant.parse(args.variant), _prior(args), args.lkj_eta,
    )
    write_csv(args.out, windows_frame(results))
    _manifest(args, started, [args.energy, args.gdp, args.price, args.exposure], [args.out], args.out, seed=args.seed)
    return 0


def cmd_simulate(args: argparse.Namespace) -> int:
    _require(args, "out")
    started = utc_now()
    config = SimulationConfig(
        n_countries=args.countries, n_years=args.years, first_year=args.first_year,
        cells_per_country=args.cells, days_per_year=args.days, width=args.width,
        variant=Variant.parse(args.variant), seed=args.seed,
    )
    written = write_simulation(simulate(config), args.out)
    _manifest(args, started, [], written, args.out, seed=args.seed)
    return 0


# -------------------- parser --------------------
def _add_sampler_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--chains", type=int, default=CHAINS)
    p.add_argument("--warmup", type=int, default=WARMUP)
    p.add_argument("--samples", type=int, default=SAMPLES)
    p.add_argument("--target-accept", type=float, default=TARGET_ACCEPT)
    p.add_argument("--max-treedepth", type=int, default=MAX_TREEDEPTH)
    p.add_argument("--seed", type=int, default=SEED)


def _add_model_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--variant", default=Variant.RandomSlopes.value,
                   help="random_slopes | random_intercepts | pooled")
    p.add_argument("--prior-preset", default="default", help="default | vshape | hockey | tight | wide")
    p.add_argument("--lkj-eta", type=float, default=LKJ_ETA)


def _add_panel_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--energy", help="country,year,value demand CSV")
    p.add_argument("--gdp", help="country,year,value GDP CSV")
    p.add_argument("--price", help="country,year,value price CSV")
    p.add_argument("--exposure", help="exposure CSV written by 'thermopool exposure'")
    p.add_argument("--reference-temp", type=float, default=None,
                   help="temperature whose bin is the reference (default: the 16-23 C bins)")


def build_parser() -> Tuple[argparse.ArgumentParser, Dict[str, argparse.ArgumentParser]]:
    parser = _Parser(prog="thermopool", description="Temperature exposure and energy demand toolkit")
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    parser.add_argument("--log-level", default=LOG_LEVEL)
    subs = parser.add_subparsers(dest="command", parser_class=_Parser)
    table: Dict[str, argparse.ArgumentParser] = {}

    def add(name: str, handler: Callable[[argparse.Namespace], int], help_text: str) -> argparse.ArgumentParser:
        p = subs.add_parser(name, help=help_text, description=help_text)
        p.add_argument("--config", help="key=value file with defaults for this subcommand")
        p.add_argument("--threads", type=int, default=THREADS)
        p.set_defaults(handler=handler)
        table[name] = p
        return p

    p = add("exposure", cmd_exposure, "Population-weighted temperature exposure per country-year")
    p.add_argument("--grid-dir")
    p.add_argument("--width", type=float, default=BIN_WIDTH)
    p.add_argument("--lower", type=float, default=BIN_LOWER)
    p.add_argument("--upper", type=float, default=BIN_UPPER)
    p.add_argument("--day-window", default=DAY_WINDOW)
    p.add_argument("--all-widths", action="store_true", help="one file per width 1.0-5.0 step 0.5")
    p.add_argument("--daycounts", action="store_true", help="day counts on the replication bins")
    p.add_argument("--out")

    p = add("fit", cmd_fit, "Fit a hierarchical demand model with NUTS")
    _add_panel_flags(p)
    _add_model_flags(p)
    _add_sampler_flags(p)
    p.add_argument("--likelihood-weight", type=float, default=1.0, help="0 samples the prior")
    p.add_argument("--csv", action="store_true", help="also export draws as CSV")
    p.add_argument("--out")

    p = add("diagnose", cmd_diagnose, "Convergence diagnostics, PSIS-LOO and model comparison")
    p.add_argument("draws", nargs="?")
    p.add_argument("--design")
    p.add_argument("--compare", nargs="+")
    p.add_argument("--ppc", type=int, default=0, help="posterior predictive replicates")
    p.add_argument("--prior-predictive", type=int, default=0)
    p.add_argument("--seed", type=int, default=SEED)
    p.add_argument("--out")

    p = add("report", cmd_report, "Posterior summaries, Koyck multipliers, elasticities, counterfactuals")
    p.add_argument("draws", nargs="?")
    p.add_argument("--design")
    p.add_argument("--koyck", action="store_true")
    p.add_argument("--shift", type=float, default=0.10)
    p.add_argument("--elasticities", action="store_true")
    p.add_argument("--group-effects", action="store_true")
    p.add_argument("--counterfactual", type=float, default=None, metavar="DELTA_T")
    p.add_argument("--base-year", type=int)
    p.add_argument("--grid-dir")
    p.add_argument("--mode", choices=("mean", "full"), default="mean")
    p.add_argument("--absolute", action="store_true")
    p.add_argument("--day-window", default=DAY_WINDOW)
    p.add_argument("--sensitivity", nargs="+")
    p.add_argument("--out")

    p = add("twfe", cmd_twfe, "Two-way fixed-effects baseline on day counts")
    p.add_argument("--panel", help="directory with energy.csv, gdp.csv, population.csv[, price.csv]")
    p.add_argument("--energy")
    p.add_argument("--gdp")
    p.add_argument("--population")
    p.add_argument("--price")
    p.add_argument("--daycounts")
    p.add_argument("--grid-dir")
    p.add_argument("--reference-temp", type=float, default=REPLICATION_REFERENCE)
    p.add_argument("--augmented", action="store_true", help="add lagged demand and lagged price")
    p.add_argument("--out")

    p = add("census", cmd_census, "Population by annual mean temperature band")
    p.add_argument("--grid-dir")
    p.add_argument("--year", type=int)
    p.add_argument("--bands", type=float, nargs="+", default=[0.0, 10.0, 20.0, 25.0])
    p.add_argument("--out")

    p = add("windows", cmd_windows, "Refit on rolling year windows")
    _add_panel_flags(p)
    _add_model_flags(p)
    _add_sampler_flags(p)
    p.add_argument("--window", type=int, default=ROLLING_WINDOW_YEARS)
    p.add_argument("--out")

    p = add("simulate", cmd_simulate, "Write a synthetic grid and panel from a seeded model")
    p.add_argument("--countries", type=int, default=6)
    p.add_argument("--years", type=int, default=8)
    p.add_argument("--first-year", type=int, default=2000)
    p.add_argument("--cells", type=int, default=3)
    p.add_argument("--days", type=int, default=6)
    p.add_argument("--width", type=float, default=BIN_WIDTH)
    p.add_argument("--variant", default=Variant.RandomSlopes.value)
    p.add_argument("--seed", type=int, default=SEED)
    p.add_argument("--out")
    return parser, table


def _preload_config(argv: Sequence[str], table: Dict[str, argparse.ArgumentParser]) -> None:
    command = next((a for a in argv if a in table), None)
    if command is None:
        return
    for i, token in enumerate(argv):
        if token == "--config" and i + 1 < len(argv):
            _apply_config(table[command], argv[i + 1])
        elif token.startswith("--config="):
            _apply_config(table[command], token.split("=", 1)[1])


def main(argv: Optional[Sequence[str]] = None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    parser, table = build_parser()
    try:
        _preload_config(argv, table)
        args = parser.parse_args(argv)
        logging.basicConfig(
            level=getattr(logging, str(args.log_level).upper(), logging.INFO),
            format="%(asctime)s [%(levelname)s] %(message)s",
            datefmt="%Y-%m-%d %H:%M:%S",
        )
        if args.command is None:
            parser.print_usage(sys.stderr)
            raise UnknownSubcommand("no subcommand given")
        return args.handler(args)
    except SystemExit as exc:
        return int(exc.code or 0)
    except RuntimeFailure as exc:
        logger.error("%s", exc)
        return exc.exit_code
    except (ValidationError, pydantic.ValidationError, ValueError, KeyError, FileNotFoundError) as exc:
        print(f"thermopool: error: {exc}", file=sys.stderr)
        return 1
    except ThermopoolError as exc:
        logger.error("%s", exc)
        return exc.exit_code
    except Exception:
        logger.exception("Unexpected failure")
        return 2


if __name__ == "__main__":
    sys.exit(main())
