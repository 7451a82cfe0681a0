"""
Result Persistence and Reporting

Writers for the artifacts of every command: JSON reports (sorted keys, no
timestamps), CSV tables with a header row, and SVG plots rendered through
matplotlib's Agg backend with a fixed hash salt and no date metadata so that
reruns are byte-identical. Every SVG is accompanied by the CSV it is drawn
from.
"""

import csv
import hashlib
import json
import logging
from pathlib import Path
from typing import Dict, Iterable, List, Optional, Sequence, Union

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402
from pydantic import BaseModel  # noqa: E402

from .. import __version__  # noqa: E402
from ..models.schemas import (  # noqa: E402
    CampaignReport, CpaResult, FaultClass, FunctionSummaryRow, RunProvenance,
    ScheduleSummary, SboxFunction,
)

logger = logging.getLogger(__name__)

plt.rcParams["svg.hashsalt"] = "sboxlab"
SVG_METADATA = {"Date": None}
FAULT_CLASS_COLUMNS = (FaultClass.SILENT, FaultClass.CRITICAL, FaultClass.HANG, FaultClass.DETECTED)
FAULT_CLASS_COLORS = {
    FaultClass.SILENT: "#8fbc8f",
    FaultClass.CRITICAL: "#cd5c5c",
    FaultClass.HANG: "#daa520",
    FaultClass.DETECTED: "#4682b4",
}

PathLike = Union[str, Path]


# ============================================
# Provenance and JSON
# ============================================

def make_provenance(command: str, seed: int, config: dict) -> RunProvenance:
    canonical = json.dumps(config, sort_keys=True, separators=(",", ":"))
    return RunProvenance(
        tool_version=__version__,
        command=command,
        seed=seed,
        config_hash=hashlib.sha256(canonical.encode("utf-8")).hexdigest(),
        config=config,
    )


def _prepare(path: PathLike) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    return path


def write_json(path: PathLike, payload: Union[BaseModel, dict]) -> Path:
    if isinstance(payload, BaseModel):
        payload = payload.model_dump(mode="json")
    path = _prepare(path)
    path.write_text(json.dumps(payload, sort_keys=True, indent=2) + "\n", encoding="utf-8")
    logger.info(f"Wrote {path}")
    return path


def write_csv(path: PathLike, header: Sequence[str], rows: Iterable[Sequence]) -> Path:
    path = _prepare(path)
    with open(path, "w", newline="", encoding="utf-8") as csvfile:
        writer = csv.writer(csvfile, lineterminator="\n")
        writer.writerow(header)
        for row in rows:
            writer.writerow(row)
    logger.info(f"Wrote {path}")
    return path


def _save(fig, path: PathLike) -> Path:
    path = _prepare(path)
    fig.savefig(path, format="svg", metadata=SVG_METADATA)
    plt.close(fig)
    logger.info(f"Wrote {path}")
    return path


# ============================================
# CPA
# ============================================

CPA_COLUMNS = (
    "descriptor_id", "function", "model", "best_key", "best_sample_index",
    "true_key", "rank_of_true_key", "rho_true_key", "rho_best_key", "success",
)


def write_cpa_csv(path: PathLike, results: Sequence[CpaResult]) -> Path:
    rows = [
        (
            r.descriptor_id, r.function.value, r.model.value, r.best_key, r.best_sample_index,
            r.true_key, r.rank_of_true_key, f"{r.max_abs_rho[r.true_key]:.6f}",
            f"{r.max_abs_rho[r.best_key]:.6f}", int(r.success),
        )
        for r in results
    ]
    return write_csv(path, CPA_COLUMNS, rows)


def top_k_results(results: Sequence[CpaResult], k: int) -> List[CpaResult]:
    """Leakiest results first: highest true-key correlation, then best rank."""
    ranked = sorted(
        results,
        key=lambda r: (-r.max_abs_rho[r.true_key], r.rank_of_true_key, r.descriptor_id, r.model.value),
    )
    return ranked[:k]


def plot_key_correlation(path: PathLike, result: CpaResult, title: Optional[str] = None) -> Path:
    """Max |rho| for every key hypothesis, true key highlighted."""
    rho = np.asarray(result.max_abs_rho)
    write_csv(
        Path(path).with_suffix(".csv"), ("key_guess", "max_abs_rho"),
        ((k, f"{v:.6f}") for k, v in enumerate(rho)),
    )
    fig, ax = plt.subplots(figsize=(8, 3))
    ax.plot(np.arange(len(rho)), rho, color="#999999", lw=1)
    ax.plot([result.true_key], [rho[result.true_key]], "o", color="#cd5c5c", label=f"true key 0x{result.true_key:02X}")
    ax.set_xlabel("Key guess")
    ax.set_ylabel("max |rho|")
    ax.set_title(title or f"{result.function.value} #{result.descriptor_id} ({result.model.value})")
    ax.set_xlim(0, len(rho) - 1)
    ax.legend(loc="upper right")
    ax.grid(True, alpha=0.3)
    fig.tight_layout()
    return _save(fig, path)


FUNCTION_COLUMNS = [f.value for f in SboxFunction]


def write_function_summary_csv(path: PathLike, rows: Sequence[FunctionSummaryRow]) -> Path:
    """Successful attacks per function column, one row per design and power model."""
    return write_csv(
        path,
        ["design", "model"] + FUNCTION_COLUMNS + ["total"],
        ([r.design.value, r.model.value] + [r.counts.get(c, 0) for c in FUNCTION_COLUMNS] + [r.total] for r in rows),
    )


# ============================================
# T-test
# ============================================

def write_t_curve(path: PathLike, t_values: Sequence[float], threshold: float, title: str = "") -> Path:
    """t statistic per sample with the +-threshold lines (CSV next to the SVG)."""
    t = np.asarray(t_values, dtype=np.float64)
    write_csv(
        Path(path).with_suffix(".csv"), ("sample", "t", "upper", "lower"),
        ((i, f"{v:.6f}", threshold, -threshold) for i, v in enumerate(t)),
    )
    fig, ax = plt.subplots(figsize=(8, 3))
    ax.plot(np.arange(len(t)), t, color="#4682b4", lw=1)
    ax.axhline(threshold, color="#cd5c5c", ls="--", lw=1)
    ax.axhline(-threshold, color="#cd5c5c", ls="--", lw=1)
    ax.set_xlabel("Sample")
    ax.set_ylabel("t")
    if title:
        ax.set_title(title)
    ax.grid(True, alpha=0.3)
    fig.tight_layout()
    return _save(fig, path)


# ============================================
# Fault injection
# ============================================

def campaign_label(report: CampaignReport) -> str:
    return "SBF" if report.multiplicity == 1 else f"MBF{report.multiplicity}"


def fault_rate_rows(reports: Sequence[CampaignReport]) -> List[list]:
    rows = []
    for r in reports:
        rows.append(
            [r.design.value, r.profile.value, campaign_label(r), r.sample_count]
            + [f"{r.rates.get(c, 0.0):.6f}" for c in FAULT_CLASS_COLUMNS]
            + [r.would_be_critical]
        )
    return rows


FAULT_RATE_COLUMNS = (
    ["design", "profile", "campaign", "samples"]
    + [c.value for c in FAULT_CLASS_COLUMNS]
    + ["would_be_critical"]
)


def write_fault_rates_csv(path: PathLike, reports: Sequence[CampaignReport]) -> Path:
    return write_csv(path, FAULT_RATE_COLUMNS, fault_rate_rows(reports))


def plot_fault_rates(path: PathLike, reports: Sequence[CampaignReport]) -> Path:
    """Stacked Silent/Critical/Hang/Detected bars, one per campaign."""
    labels = [f"{r.design.value}\n{r.profile.value}\n{campaign_label(r)}" for r in reports]
    x = np.arange(len(reports))
    fig, ax = plt.subplots(figsize=(max(6, 0.6 * len(reports) + 2), 4))
    bottom = np.zeros(len(reports))
    for cls in FAULT_CLASS_COLUMNS:
        heights = np.array([r.rates.get(cls, 0.0) for r in reports])
        ax.bar(x, heights, bottom=bottom, color=FAULT_CLASS_COLORS[cls], label=cls.value)
        bottom += heights
    ax.set_xticks(x)
    ax.set_xticklabels(labels, fontsize=6)
    ax.set_ylim(0, 1)
    ax.set_ylabel("Rate")
    ax.legend(loc="upper right", fontsize=7)
    fig.tight_layout()
    return _save(fig, path)


# ============================================
# Schedules
# ============================================

SCHEDULE_COLUMNS = ("design", "profile", "latency", "registers", "flip_flops", "data", "control", "memory_read", "intermediates")


def write_schedule_table_csv(path: PathLike, summaries: Sequence[ScheduleSummary]) -> Path:
    return write_csv(
        path,
        SCHEDULE_COLUMNS,
        (
            (
                s.design.value, s.profile.value, s.nominal_latency, s.registers, s.flip_flops,
                s.flip_flops_by_kind.get("data", 0), s.flip_flops_by_kind.get("control", 0),
                s.flip_flops_by_kind.get("memory_read", 0), s.intermediates,
            )
            for s in summaries
        ),
    )


# ============================================
# Aggregation
# ============================================

def aggregate_results(out_dir: PathLike) -> Dict[str, Path]:
    """
    Collect the JSON reports under out_dir into the summary tables.

    Writes function_summary.csv from cpa_*.json and fault_rates.csv/.svg
    from fi_*.json. Files are visited in sorted order.
    """
    out_dir = Path(out_dir)
    written: Dict[str, Path] = {}

    summary_rows: List[FunctionSummaryRow] = []
    for path in sorted(out_dir.glob("cpa_*.json")):
        data = json.loads(path.read_text(encoding="utf-8"))
        summary_rows.extend(FunctionSummaryRow(**row) for row in data.get("summary", []))
    if summary_rows:
        written["function_summary"] = write_function_summary_csv(out_dir / "function_summary.csv", summary_rows)

    campaigns: List[CampaignReport] = []
    for path in sorted(out_dir.glob("fi_*.json")):
        data = json.loads(path.read_text(encoding="utf-8"))
        campaigns.extend(CampaignReport(**c) for c in data.get("campaigns", []))
    if campaigns:
        written["fault_rates"] = write_fault_rates_csv(out_dir / "fault_rates.csv", campaigns)
        written["fault_plot"] = plot_fault_rates(out_dir / "fault_rates.svg", campaigns)

    if not written:
        logger.warning(f"No cpa_*.json or fi_*.json reports under {out_dir}")
    return written
