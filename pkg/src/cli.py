"""
Command-line interface for the Nested Factorization demand engine.
Runs the pipeline one stage at a time; every stage reads the artifacts of
earlier stages from the run directory and records its outputs in a manifest.
"""

import argparse
import sys
from pathlib import Path
from typing import Callable, Dict, List, Optional, Tuple

import pandas as pd

from src.config import OUTPUT_ROOT
from src.data.dataset import ChoiceDataset, build_choice_dataset
from src.data.panel import (
    SampleSplit,
    SessionGrid,
    apply_category_filters,
    build_session_grid,
    export_panel,
    ingest_transactions,
    load_panel,
    resolve_panel_unit_demand,
    restrict_sample,
    split_holdout,
)
from src.data.schemas import RunConfig, TargetingScenario, load_run_config
from src.evaluation import reports
from src.utils.artifacts import run_directory, write_manifest
from src.utils.errors import ConfigError, DataError, MissingArtifactError, NfdError
from src.utils.logger import get_logger, set_package_level

logger = get_logger(__name__)


class CliArgumentParser(argparse.ArgumentParser):
    """Argument parser that exits with the usage error code."""

    def error(self, message: str):
        self.print_usage(sys.stderr)
        self.exit(ConfigError.exit_code, f"{self.prog}: error: {message}\n")


def _common_options() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument('--config', type=Path, help='JSON run configuration (default: all defaults)')
    common.add_argument('--seed', type=int, help='Random seed (default: from config)')
    common.add_argument('--out', type=Path, help=f'Output root (default: {OUTPUT_ROOT})')
    common.add_argument('--threads', type=int, default=1, help='Parallel workers (default: 1)')
    common.add_argument('--verbose', action='store_true', help='Enable debug logging')
    return common


def create_parser() -> argparse.ArgumentParser:
    """Create and configure argument parser."""
    parser = CliArgumentParser(
        prog="nfdemand",
        description="Nested Factorization demand estimation and counterfactual evaluation",
        formatter_class=argparse.RawDescriptionHelpFormatter,
        epilog="""
Examples:
  # Synthetic end-to-end run
  nfdemand synth --config run.json
  nfdemand filter --config run.json
  nfdemand fit-nf --config run.json
  nfdemand evaluate --config run.json

  # Real data: paths come from the config file
  nfdemand ingest --config store.json --out runs/
        """
    )
    common = _common_options()
    sub = parser.add_subparsers(dest="command", required=True, metavar="command")

    ingest = sub.add_parser('ingest', parents=[common], help='Read transaction, hierarchy and household files')
    ingest.add_argument('--transactions', type=Path, help='Transactions file (overrides config)')
    ingest.add_argument('--hierarchy', type=Path, help='Hierarchy file (overrides config)')
    ingest.add_argument('--households', type=Path, help='Household file (overrides config)')
    ingest.add_argument('--trips', type=Path, help='Trip file listing every visit')

    sub.add_parser('filter', parents=[common], help='Restrict the sample, filter categories, build grid and split')
    sub.add_parser('synth', parents=[common], help='Generate a synthetic panel with a known truth')

    fit_nf = sub.add_parser('fit-nf', parents=[common], help='Fit Nested Factorization')
    fit_nf.add_argument('--resume', action='store_true', help='Continue from saved checkpoints')

    sub.add_parser('fit-hpf', parents=[common], help='Fit hierarchical Poisson factorization')

    fit_logit = sub.add_parser('fit-logit', parents=[common], help='Fit the logit baselines')
    fit_logit.add_argument('--specs', nargs='+', help='Specification names to fit (default: all)')

    evaluate = sub.add_parser('evaluate', parents=[common], help='Predictive fit and personalization')
    evaluate.add_argument('--split', default='test', choices=['validation', 'test'])

    events = sub.add_parser('events', parents=[common], help='Counterfactual event likelihoods')
    events.add_argument('--split', default='test', choices=['validation', 'test'])

    sub.add_parser('placebo', parents=[common], help='Placebo price-shift tests')
    sub.add_parser('elasticity', parents=[common], help='Price elasticities and tercile validation')

    target = sub.add_parser('target', parents=[common], help='Coupon targeting and two-price assignment')
    target.add_argument('--categories', nargs='+', type=int, help='Category indices (default: all)')

    report = sub.add_parser('report', parents=[common], help='Assemble comparison tables')
    report.add_argument('--plots', action='store_true', help='Also render figures')
    return parser


class RunContext:
    """Config, seed and run directory shared by one command."""

    def __init__(self, args: argparse.Namespace):
        self.args = args
        self.config: RunConfig = load_run_config(args.config)
        self.seed: int = self.config.seed if args.seed is None else args.seed
        if args.threads < 1:
            raise ConfigError(f"--threads must be at least 1, got {args.threads}")
        self.threads: int = args.threads
        self.run_dir: Path = run_directory(args.out or OUTPUT_ROOT, self.config, self.seed)
        self.outputs: List[Path] = []

    def path(self, *parts: str) -> Path:
        return self.run_dir.joinpath(*parts)

    @property
    def reports_dir(self) -> Path:
        return self.path("reports")

    def record(self, *paths: Path) -> None:
        self.outputs.extend(Path(p) for p in paths)

    def dataset(self) -> ChoiceDataset:
        panel = load_panel(self.path("filtered", "panel"), "filter")
        grid = SessionGrid.load(self.path("filtered", "grid"), "filter")
        split = SampleSplit.load(self.path("filtered", "split.csv"), "filter")
        return build_choice_dataset(
            panel, grid, split, self.config.covariates, self.config.filters.top_items
        )


# Commands

def cmd_ingest(ctx: RunContext) -> None:
    args, config = ctx.args, ctx.config
    transactions = args.transactions or config.transactions
    hierarchy = args.hierarchy or config.hierarchy
    if transactions is None or hierarchy is None:
        raise ConfigError("ingest needs transactions and hierarchy paths (config or flags)")
    panel = ingest_transactions(
        transactions, hierarchy, args.households or config.households,
        separator=config.separator, trips_path=args.trips,
    )
    ctx.record(*export_panel(panel, ctx.path("panel")).values())


def cmd_synth(ctx: RunContext) -> None:
    from src.synthetic.generator import TRUTH_FILE, generate_panel

    panel, grid, truth = generate_panel(ctx.config.synthetic, ctx.seed, ctx.threads)
    ctx.record(*export_panel(panel, ctx.path("panel")).values())
    grid.save(ctx.path("synth", "grid"))
    ctx.record(ctx.path("synth", "grid", "grid.csv"), truth.save(ctx.path("synth", TRUTH_FILE)))


def cmd_filter(ctx: RunContext) -> None:
    config = ctx.config
    tolerance = config.grid.price_change_tolerance
    panel = load_panel(ctx.path("panel"), "ingest")
    restricted = restrict_sample(panel, config.sample)
    kept, filtered = apply_category_filters(restricted, config.filters, tolerance)
    if not kept:
        raise DataError("No category passed the filters")
    filtered = resolve_panel_unit_demand(filtered, ctx.seed)

    true_grid = ctx.path("synth", "grid")
    if (true_grid / "grid.csv").exists():
        upcs = sorted(set(filtered.purchases["upc"]))
        grid = SessionGrid.load(true_grid, "synth").subset(upcs, filtered.weeks)
        logger.info("Using the true synthetic price grid")
    else:
        grid = build_session_grid(filtered, config.grid)
    split = split_holdout(filtered, config.split, ctx.seed, grid, tolerance)
    grid = grid.with_week_rates(filtered, split)

    ctx.record(*export_panel(filtered, ctx.path("filtered", "panel")).values())
    grid.save(ctx.path("filtered", "grid"))
    split.save(ctx.path("filtered", "split.csv"))
    ctx.record(ctx.path("filtered", "grid", "grid.csv"), ctx.path("filtered", "split.csv"))


def cmd_fit_nf(ctx: RunContext) -> None:
    from src.evaluation.counterfactual import counterfactual_event_likelihood
    from src.models.nested_factorization import (
        SELECTION_EVENT_TYPE,
        fit_nested_factorization,
        fit_selected,
    )

    dataset = ctx.dataset()
    config = ctx.config.nf
    if not config.grid:
        model = fit_nested_factorization(dataset, config, ctx.path("nf"), resume=ctx.args.resume)
    else:
        events = _events(ctx, dataset)
        events = events[events["event_type"] == SELECTION_EVENT_TYPE]
        settings = ctx.config.evaluation

        def score(candidate):
            return counterfactual_event_likelihood(
                candidate, events, dataset, "validation", settings.popular_daily_purchases,
                settings.bootstrap_replicates, ctx.seed,
            )

        model, scored = fit_selected(dataset, config, score, ctx.path("nf"), resume=ctx.args.resume)
        table = reports.selection_table(scored, model.config, SELECTION_EVENT_TYPE)
        ctx.record(reports.write_csv(table, ctx.reports_dir / reports.SELECTION_FILE))
    model.save(ctx.path("models", "nf.joblib"))
    ctx.record(ctx.path("models", "nf.joblib"), *sorted(p for p in ctx.path("nf").rglob("*") if p.is_file()))


def cmd_fit_hpf(ctx: RunContext) -> None:
    from src.models.hpf import HpfDemandModel, control_table, fit_hpf_dataset, save_control_table

    dataset = ctx.dataset()
    fit = fit_hpf_dataset(dataset, ctx.config.hpf)
    save_control_table(
        control_table(fit, dataset.item_category, dataset.categories), ctx.path("hpf", "controls.csv")
    )
    HpfDemandModel.from_dataset(fit, dataset).save(ctx.path("models", "hpf.joblib"))
    ctx.record(ctx.path("hpf", "controls.csv"), ctx.path("models", "hpf.joblib"))


def cmd_fit_logit(ctx: RunContext) -> None:
    from src.models.logit import LogitInputs, controls_from_table, fit_logit_models

    dataset = ctx.dataset()
    specs = ctx.config.logit.specs
    if ctx.args.specs:
        unknown = sorted(set(ctx.args.specs) - {s.name for s in specs})
        if unknown:
            raise ConfigError(f"Unknown logit specifications: {unknown}")
        specs = [s for s in specs if s.name in ctx.args.specs]
    inputs = LogitInputs.from_dataset(dataset)
    controlled = None
    if any(s.controls == "hpf" for s in specs):
        from src.models.hpf import load_control_table

        table = load_control_table(ctx.path("hpf", "controls.csv"))
        controlled = inputs.with_controls(*controls_from_table(table, dataset))

    summaries: Dict[str, List[Dict]] = {}
    for spec in specs:
        model = fit_logit_models(
            dataset, spec, ctx.config.logit, controlled if spec.controls == "hpf" else inputs,
            seed=ctx.seed, n_jobs=ctx.threads,
        )
        path = ctx.path("models", "logit", f"{spec.name}.joblib")
        model.save(path)
        summaries[spec.name] = model.summaries()
        ctx.record(path)
    ctx.record(reports.write_json(summaries, ctx.reports_dir / "logit_estimates.json"))


def load_models(ctx: RunContext, dataset: ChoiceDataset, with_truth: bool = True) -> Dict[str, object]:
    """
    Every fitted model of the run, keyed by name; the synthetic truth joins
    when present.

    Raises:
        MissingArtifactError: If nothing has been fitted yet
    """
    from src.models.base import load_model

    paths = [ctx.path("models", "nf.joblib"), ctx.path("models", "hpf.joblib")]
    paths += sorted(ctx.path("models", "logit").glob("*.joblib"))
    models = {}
    for path in paths:
        if path.exists():
            model = load_model(path)
            models[model.name] = model
    if not models:
        raise MissingArtifactError(ctx.path("models", "nf.joblib"), "fit-nf")
    truth = truth_of(ctx, dataset) if with_truth else None
    if truth is not None:
        models[truth.name] = truth
    logger.info(f"Loaded models: {', '.join(sorted(models))}")
    return models


def truth_of(ctx: RunContext, dataset: ChoiceDataset):
    from src.synthetic.generator import TRUTH_FILE, SyntheticTruth, truth_model

    path = ctx.path("synth", TRUTH_FILE)
    if not path.exists():
        return None
    return truth_model(SyntheticTruth.load(path), dataset)


def cmd_evaluate(ctx: RunContext) -> None:
    from src.evaluation.predictive import (
        fit_by_segment,
        fit_table,
        household_rates,
        never_buyer_deciles,
        personalization_metrics,
    )

    dataset = ctx.dataset()
    models = load_models(ctx, dataset)
    label = ctx.args.split
    labels = [lab for lab in ("validation", label) if dataset.split_mask(lab).any()]
    labels = list(dict.fromkeys(labels))
    out = ctx.reports_dir
    ctx.record(reports.write_csv(fit_table(models, dataset, labels), out / reports.FIT_FILE))
    ctx.record(reports.write_csv(fit_by_segment(models, dataset, label), out / reports.SEGMENT_FILE))

    records, deciles = [], []
    for name in sorted(models):
        for level in ("upc", "category"):
            predicted, actual, _, _ = household_rates(models[name], dataset, label, level)
            records.append({"model": name, **personalization_metrics(predicted, actual, level).model_dump()})
            table, skipped = never_buyer_deciles(
                models[name], dataset, label, level, ctx.config.evaluation.min_eligible_households
            )
            if skipped:
                logger.info(f"{name}: {skipped} {level} columns had too few never-buyers")
            deciles.append(table.assign(model=name, level=level))
    ctx.record(reports.write_json(records, out / reports.PERSONALIZATION_FILE))
    ctx.record(reports.write_csv(pd.concat(deciles, ignore_index=True), out / reports.NEVER_BUYER_FILE))


def _events(ctx: RunContext, dataset: ChoiceDataset) -> pd.DataFrame:
    from src.evaluation.counterfactual import extract_events, focal_items

    return extract_events(
        dataset, focal_items(dataset), ctx.config.filters.min_price_change,
        ctx.config.grid.price_change_tolerance,
    )


def cmd_events(ctx: RunContext) -> None:
    from src.evaluation.counterfactual import counterfactual_event_likelihood

    dataset = ctx.dataset()
    models = load_models(ctx, dataset)
    events = _events(ctx, dataset)
    ctx.record(reports.write_csv(events, ctx.reports_dir / reports.EVENTS_FILE))
    settings = ctx.config.evaluation
    results = [
        counterfactual_event_likelihood(
            models[name], events, dataset, ctx.args.split, settings.popular_daily_purchases,
            settings.bootstrap_replicates, ctx.seed,
        )
        for name in sorted(models)
    ]
    ctx.record(reports.write_json(results, ctx.reports_dir / reports.EVENT_LIKELIHOOD_FILE))


def cmd_placebo(ctx: RunContext) -> None:
    from src.evaluation.placebo import run_placebo_suite

    dataset = ctx.dataset()
    report = run_placebo_suite(
        dataset, config=ctx.config.logit, alpha=ctx.config.evaluation.placebo_alpha, n_jobs=ctx.threads
    )
    ctx.record(reports.write_json(report, ctx.reports_dir / reports.PLACEBO_FILE))


def cmd_elasticity(ctx: RunContext) -> None:
    from src.evaluation.elasticity import elasticity_summary, tercile_demand_validation

    dataset = ctx.dataset()
    models = load_models(ctx, dataset)
    events = _events(ctx, dataset)
    summaries, products, buckets, responses = [], [], [], []
    for name in sorted(models):
        summary, per_product = elasticity_summary(models[name], dataset, ctx.config.evaluation, ctx.seed)
        summaries.append(summary)
        products.append(per_product.assign(model=name))
        curve, response = tercile_demand_validation(models[name], dataset, events, ctx.config.evaluation)
        buckets.append(curve.assign(model=name))
        responses.append(response.assign(model=name))
    out = ctx.reports_dir
    ctx.record(
        reports.write_json(summaries, out / reports.ELASTICITY_FILE),
        reports.write_csv(pd.concat(products, ignore_index=True), out / "elasticity_products.csv"),
        reports.write_csv(pd.concat(buckets, ignore_index=True), out / reports.TERCILE_FILE),
        reports.write_csv(pd.concat(responses, ignore_index=True), out / reports.TERCILE_RESPONSE_FILE),
    )


def cmd_target(ctx: RunContext) -> None:
    from src.targeting.coupons import coupon_targeting
    from src.targeting.pricing import bucket_by_fraction, two_price_assignment

    dataset = ctx.dataset()
    candidates = load_models(ctx, dataset, with_truth=False)
    truth = truth_of(ctx, dataset)
    if truth is None:
        if "nested_factorization" not in candidates:
            raise MissingArtifactError(ctx.path("models", "nf.joblib"), "fit-nf")
        truth = candidates["nested_factorization"]
        logger.info("No synthetic truth; allocations are valued by the fitted Nested Factorization")
    else:
        candidates[truth.name] = truth

    categories = ctx.args.categories or list(range(dataset.n_categories))
    bad = [c for c in categories if not 0 <= c < dataset.n_categories]
    if bad:
        raise ConfigError(f"Unknown category indices {bad}")
    settings = ctx.config.targeting
    coupons, two_price, assignments = [], [], []
    for name in sorted(candidates):
        for c in categories:
            scenario = TargetingScenario(category=c, discount=settings.discount, budget=settings.budget)
            try:
                coupons.append(coupon_targeting(scenario, candidates[name], truth, dataset, settings, ctx.seed))
            except DataError as e:
                logger.warning(f"Coupons skipped for {name} in {dataset.categories[c]}: {e}")
            try:
                report, table = two_price_assignment(
                    candidates[name], dataset, dataset.top_item(c),
                    tolerance=ctx.config.grid.price_change_tolerance,
                )
            except DataError as e:
                logger.warning(f"Two-price skipped for {name} in {dataset.categories[c]}: {e}")
                continue
            two_price.append(report)
            assignments.append(table.assign(model=name))

    out = ctx.reports_dir
    ctx.record(reports.write_json(coupons, out / reports.COUPON_FILE))
    ctx.record(reports.write_json(two_price, out / reports.TWO_PRICE_FILE))
    if assignments:
        ctx.record(reports.write_csv(pd.concat(assignments, ignore_index=True), out / reports.ASSIGNMENT_FILE))
        buckets = pd.concat(
            [
                bucket_by_fraction([r for r in two_price if r.model == name]).assign(model=name)
                for name in sorted({r.model for r in two_price})
            ],
            ignore_index=True,
        )
        ctx.record(reports.write_csv(buckets, out / "two_price_buckets.csv"))


def cmd_report(ctx: RunContext) -> None:
    plots = ctx.args.plots or ctx.config.evaluation.plots
    written = reports.assemble_report(ctx.reports_dir, plots=plots)
    ctx.record(*written.values(), ctx.reports_dir / "report_index.json")


HANDLERS: Dict[str, Callable[[RunContext], None]] = {
    "ingest": cmd_ingest,
    "filter": cmd_filter,
    "synth": cmd_synth,
    "fit-nf": cmd_fit_nf,
    "fit-hpf": cmd_fit_hpf,
    "fit-logit": cmd_fit_logit,
    "evaluate": cmd_evaluate,
    "events": cmd_events,
    "placebo": cmd_placebo,
    "elasticity": cmd_elasticity,
    "target": cmd_target,
    "report": cmd_report,
}


def run(args: argparse.Namespace) -> Tuple[Path, List[Path]]:
    """Execute one parsed command and write its manifest."""
    ctx = RunContext(args)
    set_package_level("DEBUG" if args.verbose else ctx.config.log_level)
    logger.info(f"{args.command}: run directory {ctx.run_dir}")
    HANDLERS[args.command](ctx)
    write_manifest(ctx.run_dir, args.command, ctx.config, ctx.seed, ctx.outputs)
    return ctx.run_dir, ctx.outputs


def main(argv: Optional[List[str]] = None) -> int:
    """Main CLI entry point."""
    parser = create_parser()
    args = parser.parse_args(argv)

    try:
        run_dir, _ = run(args)
        print(run_dir)
        return 0
    except NfdError as e:
        print(f"Error: {e}", file=sys.stderr)
        if args.verbose:
            import traceback
            traceback.print_exc()
        return e.exit_code


if __name__ == '__main__':
    sys.exit(main())
