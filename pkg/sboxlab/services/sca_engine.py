"""
SCA Engine

Correlation power analysis against every intermediate of a design, under
HW and HD hypotheses, and fixed-vs-random Welch t-tests.

Hypotheses are replayed through the same schedule as the traces with zero
masks and a zero fake key: CNG attacks target the true (low) lane, HD
hypotheses use the XOR against the previous occupant of the node's
register, as leakage_sim does.
"""

import logging
from functools import lru_cache
from typing import Dict, List, Optional, Sequence, Union

import numpy as np

from ..models.schemas import (
    CpaResult, Design, FunctionSummaryRow, LeakageModel, PowerModel,
    Profile, SboxFunction, TTestResult,
)
from .leakage_sim import (
    TTEST_FIXED_STREAM, TTEST_RANDOM_STREAM, NoiseModel, TraceMatrix,
    popcount, simulate_traces,
)
from .sbox_models import MaskSet, IntermediateDescriptor, design_inputs, enumerate_intermediates
from .scheduler import Schedule, build_schedule, execute

logger = logging.getLogger(__name__)

TTEST_THRESHOLD = 4.5
DEFAULT_FIXED_PLAINTEXT = 0x00
MIN_TTEST_SET = 100
N_KEYS = 256


class DegenerateInputError(ValueError):
    """Too few traces for a statistic"""


class UnknownDescriptorError(ValueError):
    """Descriptor does not belong to the attacked design"""


def _samples(traces: Union[TraceMatrix, np.ndarray]) -> np.ndarray:
    if isinstance(traces, TraceMatrix):
        traces = traces.samples
    samples = np.asarray(traces, dtype=np.float64)
    if samples.ndim == 1:
        samples = samples[:, None]
    return samples


# ============================================
# Pearson correlation
# ============================================

def pearson(traces: Union[TraceMatrix, np.ndarray], hypotheses: np.ndarray) -> np.ndarray:
    """
    Sample Pearson coefficient of every hypothesis column against every
    trace column: (n_traces x n_keys, n_traces x n_samples) -> n_keys x n_samples.

    Constant columns give 0.
    """
    t = _samples(traces)
    h = np.asarray(hypotheses, dtype=np.float64)
    if h.ndim == 1:
        h = h[:, None]
    if t.shape[0] < 2:
        raise DegenerateInputError(f"Pearson needs at least 2 traces, got {t.shape[0]}")
    if h.shape[0] != t.shape[0]:
        raise DegenerateInputError(f"{h.shape[0]} hypothesis rows for {t.shape[0]} traces")

    tc = t - t.mean(axis=0)
    hc = h - h.mean(axis=0)
    num = hc.T @ tc
    den = np.sqrt(np.outer((hc * hc).sum(axis=0), (tc * tc).sum(axis=0)))
    constant = np.outer(np.ptp(h, axis=0) == 0, np.ones(t.shape[1], dtype=bool))
    constant |= np.ptp(t, axis=0) == 0
    rho = np.zeros_like(num)
    np.divide(num, den, out=rho, where=(den > 0) & ~constant)
    return np.clip(rho, -1.0, 1.0)


class _GroupedTraces:
    """
    Traces reduced by plaintext: with centred samples, sum_t h(p_t) T_t only
    needs per-plaintext sums, so one pass serves every key guess.
    """

    def __init__(self, traces: TraceMatrix):
        if traces.n_traces < 2:
            raise DegenerateInputError(f"CPA needs at least 2 traces, got {traces.n_traces}")
        t = traces.samples.astype(np.float64)
        centred = t - t.mean(axis=0)
        self.plaintexts = traces.plaintexts.astype(np.intp)
        self.counts = np.bincount(self.plaintexts, minlength=N_KEYS).astype(np.float64)
        self.sums = np.zeros((N_KEYS, t.shape[1]), dtype=np.float64)
        np.add.at(self.sums, self.plaintexts, centred)
        self.sumsq = (centred * centred).sum(axis=0)
        self.constant_samples = np.ptp(t, axis=0) == 0
        self.n = float(traces.n_traces)

    def correlate(self, table: np.ndarray) -> np.ndarray:
        """table[k, p] hypothetical leakage -> rho[k, sample]."""
        h = table.astype(np.float64)
        mean = (h @ self.counts) / self.n
        hc = h - mean[:, None]
        var = (hc * hc) @ self.counts
        cov = hc @ self.sums
        den = np.sqrt(np.outer(var, self.sumsq))
        present = self.counts > 0
        constant = np.ptp(h[:, present], axis=1) == 0 if present.any() else np.ones(len(h), bool)
        mask = (den > 0) & ~constant[:, None] & ~self.constant_samples[None, :]
        rho = np.zeros_like(cov)
        np.divide(cov, den, out=rho, where=mask)
        return np.clip(rho, -1.0, 1.0)


# ============================================
# Hypotheses
# ============================================

@lru_cache(maxsize=None)
def hypothesis_table(design: Design, profile: Profile, model: PowerModel) -> np.ndarray:
    """
    Predicted leakage of every node for every (key guess, plaintext).

    Shape (n_nodes, 256, 256), indexed [node, key, plaintext].
    """
    model = PowerModel(model)
    schedule = build_schedule(design, profile)
    dataflow = schedule.dataflow
    keys = np.repeat(np.arange(N_KEYS, dtype=np.uint16), N_KEYS)
    plaintexts = np.tile(np.arange(N_KEYS, dtype=np.uint16), N_KEYS)
    inputs = design_inputs(schedule.design, plaintexts, keys, fake_key=0, masks=MaskSet.zero())
    trace = execute(schedule, inputs, record=True)

    last_writes = {}
    for write in trace.writes:
        if write.node is not None:
            last_writes[write.node] = write
    lane = 0xFF if dataflow.lanes > 1 else 0xFFFF

    table = np.zeros((len(dataflow), N_KEYS, N_KEYS), dtype=np.uint8)
    for op in dataflow.ops:
        if model == PowerModel.HW:
            value = trace.values[op.id]
        else:
            write = last_writes.get(op.id)
            value = 0 if write is None else write.old ^ write.new
        value = np.broadcast_to(np.asarray(value) & lane, keys.shape).astype(np.uint16)
        table[op.id] = popcount(value).reshape(N_KEYS, N_KEYS)
    logger.debug(f"Built {model.value} hypothesis table for {schedule.design.value}/{schedule.profile.value}")
    return table


def _check_descriptor(schedule: Schedule, descriptor: IntermediateDescriptor) -> None:
    descriptors = enumerate_intermediates(schedule.design)
    if not 0 <= descriptor.id < len(descriptors) or descriptors[descriptor.id] != descriptor:
        raise UnknownDescriptorError(
            f"Descriptor {descriptor.id} ({descriptor.function.value}) is not part of {schedule.design.value}"
        )


def hypothesize(plaintexts: Sequence[int], descriptor: IntermediateDescriptor, model: PowerModel,
                key_guess: int, schedule: Schedule) -> np.ndarray:
    """Per-trace predicted leakage of one intermediate under one key guess."""
    _check_descriptor(schedule, descriptor)
    table = hypothesis_table(schedule.design, schedule.profile, PowerModel(model))
    return table[descriptor.id, key_guess & 0xFF][np.asarray(plaintexts, dtype=np.intp)]


# ============================================
# CPA
# ============================================

def key_rank(scores: np.ndarray, true_key: int) -> int:
    """Pessimistic rank: guesses scoring at least as high as the true key."""
    return int(np.count_nonzero(scores >= scores[true_key]))


def _result(descriptor: IntermediateDescriptor, model: PowerModel, rho: np.ndarray, true_key: int) -> CpaResult:
    abs_rho = np.abs(rho)
    scores = abs_rho.max(axis=1)
    best_key = int(np.argmax(scores))
    rank = key_rank(scores, true_key)
    return CpaResult(
        descriptor_id=descriptor.id,
        function=descriptor.function,
        model=model,
        max_abs_rho=[float(s) for s in scores],
        best_key=best_key,
        best_sample_index=int(np.argmax(abs_rho[best_key])),
        true_key=true_key,
        rank_of_true_key=rank,
        success=rank == 1,
    )


def cpa_attack(traces: TraceMatrix, descriptor: IntermediateDescriptor, model: PowerModel,
               schedule: Optional[Schedule] = None, grouped: Optional[_GroupedTraces] = None) -> CpaResult:
    """Attack one intermediate with all 256 key guesses."""
    model = PowerModel(model)
    schedule = schedule or build_schedule(traces.design, traces.profile)
    _check_descriptor(schedule, descriptor)
    grouped = grouped or _GroupedTraces(traces)
    table = hypothesis_table(schedule.design, schedule.profile, model)[descriptor.id]
    return _result(descriptor, model, grouped.correlate(table), traces.true_key)


def cpa_sweep(traces: TraceMatrix, design: Optional[Design] = None,
              schedule: Optional[Schedule] = None) -> List[CpaResult]:
    """Every descriptor under both power models, sorted by descriptor id."""
    design = Design(design or traces.design)
    schedule = schedule or build_schedule(design, traces.profile)
    grouped = _GroupedTraces(traces)
    results = []
    for descriptor in enumerate_intermediates(design):
        for model in (PowerModel.HW, PowerModel.HD):
            results.append(cpa_attack(traces, descriptor, model, schedule, grouped))
    successes = sum(r.success for r in results)
    logger.info(f"CPA sweep on {design.value}: {successes}/{len(results)} successful attacks")
    return results


def function_summary(results: Sequence[CpaResult], design: Design) -> List[FunctionSummaryRow]:
    """Successful attacks per SBOX function, one row per power model."""
    rows = []
    for model in (PowerModel.HW, PowerModel.HD):
        counts: Dict[str, int] = {f.value: 0 for f in SboxFunction}
        for r in results:
            if r.model == model and r.success:
                counts[r.function.value] += 1
        rows.append(FunctionSummaryRow(design=design, model=model, counts=counts, total=sum(counts.values())))
    return rows


# ============================================
# Welch t-test
# ============================================

def welch_ttest(set_a: Union[TraceMatrix, np.ndarray], set_b: Union[TraceMatrix, np.ndarray],
                threshold: float = TTEST_THRESHOLD) -> TTestResult:
    """
    Per-sample t = (mean_a - mean_b) / sqrt(var_a/n_a + var_b/n_b), unbiased
    variances. Samples with zero variance in both sets get t = 0 and are
    reported as degenerate.
    """
    a = _samples(set_a)
    b = _samples(set_b)
    if a.shape[0] < 2 or b.shape[0] < 2:
        raise DegenerateInputError(f"Welch t-test needs >= 2 traces per set, got {a.shape[0]}/{b.shape[0]}")
    if a.shape[1] != b.shape[1]:
        raise DegenerateInputError(f"Sample counts differ: {a.shape[1]} vs {b.shape[1]}")

    den = np.sqrt(a.var(axis=0, ddof=1) / a.shape[0] + b.var(axis=0, ddof=1) / b.shape[0])
    degenerate = den == 0
    t = np.zeros(a.shape[1], dtype=np.float64)
    np.divide(a.mean(axis=0) - b.mean(axis=0), den, out=t, where=~degenerate)
    max_abs_t = float(np.abs(t).max()) if t.size else 0.0
    return TTestResult(
        t_values=[float(v) for v in t],
        max_abs_t=max_abs_t,
        threshold=threshold,
        leaky=max_abs_t > threshold,
        degenerate_samples=[int(i) for i in np.flatnonzero(degenerate)],
    )


def fixed_vs_random_campaign(design: Design, schedule: Schedule, n_per_set: int, model: LeakageModel,
                             noise: NoiseModel, glitch: bool = False, key: int = 0x2B,
                             fixed_plaintext: int = DEFAULT_FIXED_PLAINTEXT, fake_key: Optional[int] = 0,
                             threshold: float = TTEST_THRESHOLD, jobs: int = 1,
                             progress: bool = False) -> TTestResult:
    """Generate a fixed-input and a random-input set and compare them."""
    if n_per_set < MIN_TTEST_SET:
        raise ValueError(f"Need at least {MIN_TTEST_SET} traces per set, got {n_per_set}")
    if Design(design) != schedule.design:
        raise ValueError(f"Schedule is for {schedule.design.value}, campaign for {Design(design).value}")

    common = dict(key=key, model=model, noise=noise, glitch=glitch, fake_key=fake_key,
                  jobs=jobs, progress=progress)
    fixed = simulate_traces(schedule, np.full(n_per_set, fixed_plaintext & 0xFF), stream=TTEST_FIXED_STREAM, **common)
    random = simulate_traces(schedule, None, n_traces=n_per_set, stream=TTEST_RANDOM_STREAM, **common)
    result = welch_ttest(fixed, random, threshold)
    logger.info(
        f"t-test {schedule.design.value}/{schedule.profile.value} {LeakageModel(model).value}"
        f" glitch={glitch}: max|t| = {result.max_abs_t:.2f} (leaky={result.leaky})"
    )
    return result
