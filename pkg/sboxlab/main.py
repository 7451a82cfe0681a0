"""
S-box Workbench - Command Line Entry Point

Subcommands:
  gen-traces  simulate a trace campaign and store it as a TRC1 file
  cpa         CPA sweep over every intermediate (HW and HD models)
  ttest       fixed-vs-random Welch t-test
  fi          single and multiple bit-flip fault campaigns
  report      aggregate stored results into summary tables and plots
  schedule    dump schedules with their latency / flip-flop table
"""

import argparse
import logging
import sys
from pathlib import Path
from typing import Optional, Sequence

from . import __version__
from .config import Settings, load_settings
from .models.schemas import (
    CpaReport, Design, FaultMatrixReport, LeakageModel, Profile, TTestReport,
)
from .services import reporting
from .services.fi_engine import run_fault_matrix
from .services.leakage_sim import NoiseModel, TraceMatrix, resolve_fake_key, simulate_traces
from .services.sca_engine import cpa_sweep, fixed_vs_random_campaign, function_summary
from .services.scheduler import build_schedule
from .services.trace_file import read_traces, write_traces

logger = logging.getLogger(__name__)

COMMANDS = ("gen-traces", "cpa", "ttest", "fi", "report", "schedule")


# ============================================
# Settings
# ============================================

def resolve_settings(args: argparse.Namespace) -> Settings:
    """Config file plus command-line overrides."""
    settings = load_settings(args.config)
    if args.desk:
        settings = settings.with_desk()

    design_update = {}
    if args.design:
        design_update["design"] = Design(args.design)
    if args.profile:
        design_update["profile"] = Profile(args.profile)
    trace_update = {}
    if args.model:
        trace_update["leakage_model"] = LeakageModel(args.model)
    if args.glitch:
        trace_update["glitch"] = True
    if args.sigma is not None:
        trace_update["sigma"] = args.sigma
    if args.n_traces is not None:
        trace_update["n_traces"] = args.n_traces

    update = {
        "design": settings.design.model_copy(update=design_update),
        "traces": settings.traces.model_copy(update=trace_update),
    }
    if args.seed is not None:
        update["seed"] = args.seed
    if args.jobs is not None:
        update["jobs"] = args.jobs
    if args.out:
        update["output"] = settings.output.model_copy(update={"directory": args.out})
    # round-trip through validation so overrides obey the same constraints as the file
    return Settings.model_validate(settings.model_copy(update=update).model_dump())


def provenance(settings: Settings, command: str):
    return reporting.make_provenance(command, settings.seed, settings.replay_config())


def _progress() -> bool:
    return logging.getLogger().getEffectiveLevel() <= logging.INFO


def _out(settings: Settings) -> Path:
    return Path(settings.output.directory)


def _tag(design: Design, profile: Profile) -> str:
    return f"{design.value}_{profile.value}"


# ============================================
# Commands
# ============================================

def simulate_from_settings(settings: Settings) -> TraceMatrix:
    schedule = build_schedule(settings.design.design, settings.design.profile)
    fake_key = resolve_fake_key(settings.design.fake_key_policy, settings.seed, settings.design.fake_key)
    return simulate_traces(
        schedule, None, settings.design.key, settings.traces.leakage_model,
        NoiseModel(settings.traces.sigma, settings.seed), glitch=settings.traces.glitch,
        fake_key=fake_key, n_traces=settings.traces.n_traces, jobs=settings.jobs,
        chunk_size=settings.traces.chunk_size, progress=_progress(),
    )


def cmd_gen_traces(settings: Settings, args: argparse.Namespace) -> int:
    traces = simulate_from_settings(settings)
    name = f"traces_{_tag(traces.design, traces.profile)}_{traces.model.value}.trc"
    path = write_traces(Path(args.output) if args.output else _out(settings) / name, traces)
    print(f"{path}: {traces.n_traces} traces x {traces.n_samples} samples "
          f"({traces.design.value}/{traces.profile.value}, {traces.model.value}, sigma={traces.sigma})")
    return 0


def cmd_cpa(settings: Settings, args: argparse.Namespace) -> int:
    traces = read_traces(args.traces) if args.traces else simulate_from_settings(settings)
    schedule = build_schedule(traces.design, traces.profile)
    results = cpa_sweep(traces, schedule=schedule)
    summary = function_summary(results, traces.design)
    report = CpaReport(
        design=traces.design,
        profile=traces.profile,
        leakage_model=traces.model,
        n_traces=traces.n_traces,
        results=results,
        summary=summary,
        successes=sum(r.success for r in results),
        provenance=provenance(settings, "cpa"),
    )

    out = _out(settings)
    tag = _tag(traces.design, traces.profile)
    reporting.write_json(out / f"cpa_{tag}.json", report)
    reporting.write_cpa_csv(out / f"cpa_{tag}.csv", results)
    for r in reporting.top_k_results(results, settings.cpa.top_k):
        reporting.plot_key_correlation(
            out / "cpa_plots" / f"{tag}_d{r.descriptor_id:03d}_{r.model.value}.svg", r,
            title=f"{tag} {r.function.value} #{r.descriptor_id} ({r.model.value})",
        )
    print(f"CPA {tag}: {report.successes}/{len(results)} successful attacks")
    for row in summary:
        print(f"  {row.model.value}: " + ", ".join(f"{k}={v}" for k, v in row.counts.items() if v))
    return 0


def cmd_ttest(settings: Settings, args: argparse.Namespace) -> int:
    schedule = build_schedule(settings.design.design, settings.design.profile)
    fake_key = resolve_fake_key(settings.design.fake_key_policy, settings.seed, settings.design.fake_key)
    result = fixed_vs_random_campaign(
        schedule.design, schedule, settings.ttest.n_per_set, settings.traces.leakage_model,
        NoiseModel(settings.traces.sigma, settings.seed), glitch=settings.traces.glitch,
        key=settings.design.key, fixed_plaintext=settings.ttest.fixed_plaintext, fake_key=fake_key,
        threshold=settings.ttest.threshold, jobs=settings.jobs, progress=_progress(),
    )
    report = TTestReport(
        design=schedule.design,
        profile=schedule.profile,
        leakage_model=settings.traces.leakage_model,
        glitch=settings.traces.glitch,
        n_per_set=settings.ttest.n_per_set,
        sigma=settings.traces.sigma,
        fixed_plaintext=settings.ttest.fixed_plaintext,
        result=result,
        provenance=provenance(settings, "ttest"),
    )

    out = _out(settings)
    tag = _tag(schedule.design, schedule.profile)
    suffix = "_glitch" if settings.traces.glitch else ""
    reporting.write_json(out / f"ttest_{tag}{suffix}.json", report)
    reporting.write_t_curve(out / f"ttest_{tag}{suffix}.svg", result.t_values, result.threshold, title=tag)
    print(f"t-test {tag}{suffix}: max|t| = {result.max_abs_t:.2f}, leaky={result.leaky}")
    return 0


def cmd_fi(settings: Settings, args: argparse.Namespace) -> int:
    if args.matrix:
        cells = [(d, p) for d in Design for p in Profile]
    else:
        cells = [(settings.design.design, settings.design.profile)]
    faults = settings.faults
    fake_key = resolve_fake_key(settings.design.fake_key_policy, settings.seed, settings.design.fake_key)

    campaigns = run_fault_matrix(
        [build_schedule(design, profile) for design, profile in cells],
        faults.multiplicities, faults.margin_of_error, faults.confidence, settings.seed, fake_key,
        n_inputs=faults.sbf_inputs, p=faults.proportion, watchdog_factor=faults.watchdog_factor,
        progress=_progress(),
    )

    report = FaultMatrixReport(campaigns=campaigns, provenance=provenance(settings, "fi"))
    out = _out(settings)
    tag = "matrix" if args.matrix else _tag(*cells[0])
    reporting.write_json(out / f"fi_{tag}.json", report)
    reporting.write_fault_rates_csv(out / f"fi_rates_{tag}.csv", campaigns)
    for row in reporting.fault_rate_rows(campaigns):
        print("  ".join(str(v) for v in row))
    return 0


def cmd_report(settings: Settings, args: argparse.Namespace) -> int:
    out = _out(settings)
    written = reporting.aggregate_results(out)
    summaries = [build_schedule(d, p).summary() for d in Design for p in Profile]
    written["schedules"] = reporting.write_schedule_table_csv(out / "schedules.csv", summaries)
    for name, path in sorted(written.items()):
        print(f"{name}: {path}")
    return 0


def cmd_schedule(settings: Settings, args: argparse.Namespace) -> int:
    out = _out(settings)
    if args.matrix:
        cells = [(d, p) for d in Design for p in Profile]
    else:
        cells = [(settings.design.design, settings.design.profile)]
    summaries = []
    for design, profile in cells:
        schedule = build_schedule(design, profile)
        reporting.write_json(out / f"schedule_{_tag(design, profile)}.json", schedule.to_dict())
        summary = schedule.summary()
        summaries.append(summary)
        print(f"{_tag(design, profile)}: latency {summary.nominal_latency}, "
              f"{summary.registers} registers, {summary.flip_flops} flip-flops {summary.flip_flops_by_kind}")
    reporting.write_schedule_table_csv(out / "schedules.csv", summaries)
    return 0


HANDLERS = {
    "gen-traces": cmd_gen_traces,
    "cpa": cmd_cpa,
    "ttest": cmd_ttest,
    "fi": cmd_fi,
    "report": cmd_report,
    "schedule": cmd_schedule,
}


# ============================================
# Entry point
# ============================================

def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="sboxlab",
        description="Side-channel and fault-injection evaluation of HLS S-box designs"
    )
    parser.add_argument('--version', action='version', version=f"%(prog)s {__version__}")
    parser.add_argument('command', choices=COMMANDS, help='Command to run')
    parser.add_argument('--config', '-c', default=None, help='Path to configuration file (YAML or JSON)')
    parser.add_argument('--seed', type=int, default=None, help='Campaign seed (overrides config)')
    parser.add_argument('--jobs', '-j', type=int, default=None, help='Worker processes for trace generation')
    parser.add_argument('--desk', action='store_true', help='Desk-scale campaign sizes')
    parser.add_argument('--out', default=None, help='Output directory')
    parser.add_argument('--design', choices=[d.value for d in Design], default=None)
    parser.add_argument('--profile', choices=[p.value for p in Profile], default=None)
    parser.add_argument('--model', choices=[m.value for m in LeakageModel], default=None,
                        help='Leakage model for trace synthesis')
    parser.add_argument('--glitch', action='store_true', help='Glitch transients (masked design only)')
    parser.add_argument('--sigma', type=float, default=None, help='Gaussian noise sigma')
    parser.add_argument('--n-traces', type=int, default=None, help='Number of traces')
    parser.add_argument('--traces', default=None, help='TRC1 file to attack (cpa)')
    parser.add_argument('--output', '-o', default=None, help='Explicit trace file path (gen-traces)')
    parser.add_argument('--matrix', action='store_true',
                        help='Every design and profile (fi, schedule)')
    return parser


def main(argv: Optional[Sequence[str]] = None) -> int:
    """CLI entry point"""
    args = build_parser().parse_args(argv)

    try:
        settings = resolve_settings(args)
    except (ValueError, OSError) as e:
        logging.basicConfig(level=logging.ERROR)
        logger.error(f"Invalid configuration: {e}")
        return 2

    logging.basicConfig(
        level=getattr(logging, settings.logging.level),
        format=settings.logging.format
    )
    logger.info(f"sboxlab {__version__} {args.command} seed={settings.seed} config={settings.config_hash()[:12]}")

    try:
        return HANDLERS[args.command](settings, args)
    except (ValueError, OSError) as e:
        logger.error(f"{args.command} failed: {e}")
        return 1


if __name__ == '__main__':
    sys.exit(main())
