"""
Fault Injection Engine

Bit-flip campaigns on scheduled executions:
- exhaustive single bit-flips (every register bit at every cycle, for a
  small set of seeded stimuli)
- statistically sampled multiple bit-flips, m simultaneous flips at one
  cycle, sized by the statistical fault injection formula

Each injection is classified Hang (watchdog expired), Detected (CNG alarm),
Critical (wrong true output) or Silent. Detected takes precedence over
Critical; the report keeps a would-be-critical count for detected faults
that also corrupted the true output.
"""

import logging
import math
from collections import defaultdict
from dataclasses import dataclass
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np
from scipy.stats import norm
from tqdm import tqdm

from ..models.schemas import CampaignReport, Design, FaultClass
from .leakage_sim import fresh_masks
from .sbox_models import MaskSet, build_dataflow, decode_outputs, design_inputs, true_output
from .scheduler import (
    ExecutionTrace, FlipPlan, Machine, RegisterKind, RegisterSpec, Schedule, SliceRole, execute,
)

logger = logging.getLogger(__name__)

SBF_STREAM = 10
MBF_STREAM = 11
SBF_INPUTS = 8
SUPPORTED_CONFIDENCE = (0.90, 0.95, 0.99)
MBF_MULTIPLICITIES = (2, 3, 4, 5)

CLASS_ORDER = (FaultClass.SILENT, FaultClass.CRITICAL, FaultClass.HANG, FaultClass.DETECTED)
_SILENT, _CRITICAL, _HANG, _DETECTED = range(4)


class SampleSizeError(ValueError):
    """Invalid statistical sizing parameters"""


class MultiplicityError(ValueError):
    """Fault multiplicity outside what the register file can hold"""


# ============================================
# Fault model
# ============================================

@dataclass(frozen=True)
class FaultSite:
    register: int
    bit: int
    cycle: int


@dataclass(frozen=True)
class FaultSpec:
    """Simultaneous flips of (register id, bit) at the start of one cycle"""
    flips: Tuple[Tuple[int, int], ...]
    cycle: int

    def __post_init__(self):
        if not self.flips:
            raise ValueError("A fault needs at least one flip")
        if len(set(self.flips)) != len(self.flips):
            raise ValueError(f"Duplicate flip sites in {self.flips}")
        if self.cycle < 0:
            raise ValueError(f"Negative injection cycle {self.cycle}")

    @property
    def multiplicity(self) -> int:
        return len(self.flips)

    def to_flips(self, schedule: Schedule) -> FlipPlan:
        masks: Dict[int, int] = {}
        for register, bit in self.flips:
            masks[register] = masks.get(register, 0) ^ schedule.registers[register].flip_mask(bit)
        return {self.cycle: masks}


@dataclass(frozen=True)
class FaultOutcome:
    spec: FaultSpec
    classification: FaultClass
    would_be_critical: bool = False


def enumerate_fault_sites(schedule: Schedule) -> List[FaultSite]:
    """Every flip-flop at every nominal cycle, register-major."""
    return [
        FaultSite(reg.id, bit, cycle)
        for reg in schedule.registers
        for bit in range(reg.width)
        for cycle in range(schedule.nominal_latency)
    ]


# ============================================
# Statistical sizing
# ============================================

def z_score(confidence: float) -> float:
    """
    Two-sided standard normal quantile rounded to 4 decimals.

    The rounding is deliberate: sample sizes follow the printed z-table
    values (2.5758 at 99 %), which gives 16,587 for e = 1 %, p = 0.5; the
    unrounded quantile would give 16,588.
    """
    if not any(math.isclose(confidence, c) for c in SUPPORTED_CONFIDENCE):
        raise SampleSizeError(f"Confidence must be one of {SUPPORTED_CONFIDENCE}, got {confidence}")
    return round(float(norm.ppf(1 - (1 - confidence) / 2)), 4)


def sample_size(population: Optional[int], e: float = 0.01, confidence: float = 0.99,
                p: float = 0.5) -> int:
    """
    Number of injections for margin e at the given confidence.

    n0 = z^2 p (1-p) / e^2 for an unbounded population; a finite population
    N gives n = N / (1 + (N - 1) / n0).
    """
    if not 0 < e < 1:
        raise SampleSizeError(f"Margin of error must be in (0, 1), got {e}")
    if not 0 < p < 1:
        raise SampleSizeError(f"Proportion must be in (0, 1), got {p}")
    z = z_score(confidence)
    n0 = z * z * p * (1 - p) / (e * e)
    if population is None:
        return math.ceil(n0)
    if population < 1:
        raise SampleSizeError(f"Population must be positive, got {population}")
    return math.ceil(population / (1 + (population - 1) / n0))


# ============================================
# Classification
# ============================================

def classify(trace: ExecutionTrace, golden: ExecutionTrace, design: Design) -> FaultClass:
    """Four-way outcome of one faulty execution against its fault-free twin."""
    codes, _ = _classify_batch(trace, np.atleast_1d(true_output(design, golden.result)), design)
    return CLASS_ORDER[int(codes[0])]


def inject(schedule: Schedule, inputs: Dict[str, object], spec: FaultSpec,
           watchdog: Optional[int] = None) -> FaultOutcome:
    """Run one fault against its fault-free twin on scalar design inputs."""
    golden = execute(schedule, inputs, record=False)
    trace = execute(schedule, inputs, spec, watchdog, record=False)
    codes, wbc = _classify_batch(trace, np.atleast_1d(true_output(schedule.design, golden.result)), schedule.design)
    return FaultOutcome(spec, CLASS_ORDER[int(codes[0])], bool(wbc[0]))


def _classify_batch(trace: ExecutionTrace, golden_true: np.ndarray, design: Design) -> Tuple[np.ndarray, np.ndarray]:
    n = len(golden_true)
    if not trace.completed:
        return np.full(n, _HANG), np.zeros(n, dtype=bool)
    wrong = np.broadcast_to(true_output(design, trace.result) != golden_true, (n,))
    if Design(design) == Design.CNG:
        alarm = np.broadcast_to(trace.result.alarm, (n,))
        codes = np.where(alarm, _DETECTED, np.where(wrong, _CRITICAL, _SILENT))
        return codes, alarm & wrong
    return np.where(wrong, _CRITICAL, _SILENT), np.zeros(n, dtype=bool)


class _Tally:
    """Class counts overall and per breakdown key."""

    def __init__(self):
        self.counts = np.zeros(len(CLASS_ORDER), dtype=np.int64)
        self.would_be_critical = 0
        self.groups: Dict[str, Dict[str, np.ndarray]] = defaultdict(dict)

    def add(self, codes: np.ndarray, would_be_critical: np.ndarray, **keys: str) -> None:
        hist = np.bincount(codes, minlength=len(CLASS_ORDER))
        self.counts += hist
        self.would_be_critical += int(np.count_nonzero(would_be_critical))
        for group, key in keys.items():
            if key is None:
                continue
            bucket = self.groups[group]
            bucket[key] = bucket.get(key, np.zeros(len(CLASS_ORDER), dtype=np.int64)) + hist

    @staticmethod
    def _as_dict(hist: np.ndarray) -> Dict[FaultClass, int]:
        return {cls: int(hist[i]) for i, cls in enumerate(CLASS_ORDER)}

    def report(self, schedule: Schedule, **fields) -> CampaignReport:
        total = int(self.counts.sum())
        return CampaignReport(
            design=schedule.design,
            profile=schedule.profile,
            sample_count=total,
            counts=self._as_dict(self.counts),
            rates={cls: (int(self.counts[i]) / total if total else 0.0) for i, cls in enumerate(CLASS_ORDER)},
            would_be_critical=self.would_be_critical,
            by_register_kind={k: self._as_dict(v) for k, v in sorted(self.groups["kind"].items())},
            by_slice={k: self._as_dict(v) for k, v in sorted(self.groups["slice"].items())},
            by_shared_register={k: self._as_dict(v) for k, v in sorted(self.groups["shared"].items())},
            **fields,
        )


def _shared_name(reg: RegisterSpec, bit: int) -> Optional[str]:
    """Register name for a CNG shared bit, else None."""
    return reg.name if reg.bit_role(bit) == SliceRole.SHARED else None


# ============================================
# Stimuli
# ============================================

def draw_stimuli(design: Design, rngs: Sequence[np.random.Generator],
                 fake_key: Optional[int] = None) -> Dict[str, np.ndarray]:
    """One plaintext/key (and fake key, masks) per generator, as design inputs."""
    n = len(rngs)
    plaintexts = np.zeros(n, dtype=np.uint16)
    keys = np.zeros(n, dtype=np.uint16)
    fake_keys = np.zeros(n, dtype=np.uint16)
    fresh = {name: np.zeros(n, dtype=np.uint16) for name in ("m_in", "m4a", "m4b", "m2")}
    for i, rng in enumerate(rngs):
        plaintexts[i] = rng.integers(0, 256)
        keys[i] = rng.integers(0, 256)
        if design == Design.CNG:
            fake_keys[i] = rng.integers(0, 256) if fake_key is None else fake_key
        if design == Design.MASKED:
            masks = fresh_masks(rng)
            for name in fresh:
                fresh[name][i] = getattr(masks, name)
    mask_set = MaskSet.derive(fresh["m_in"], fresh["m4a"], fresh["m4b"], fresh["m2"])
    return design_inputs(design, plaintexts, keys, fake_keys, mask_set)


def _golden_true(schedule: Schedule, inputs: Dict[str, np.ndarray]) -> np.ndarray:
    dataflow = build_dataflow(schedule.design)
    env = dataflow.evaluate(inputs)
    result = decode_outputs(schedule.design, inputs, dataflow.output_values(env))
    return np.asarray(true_output(schedule.design, result))


# ============================================
# Campaigns
# ============================================

def run_sbf_campaign(schedule: Schedule, n_inputs: int = SBF_INPUTS, seed: int = 0,
                     fake_key: Optional[int] = None, watchdog: Optional[int] = None,
                     progress: bool = False) -> CampaignReport:
    """
    Exhaustive single bit-flips: every site of enumerate_fault_sites, once
    per seeded stimulus.

    Data registers of one cycle are injected together, one batch element per
    (site, stimulus); control registers take one run per site.
    """
    watchdog = watchdog or schedule.default_watchdog
    stimuli_rng = np.random.default_rng([seed, SBF_STREAM])
    inputs = draw_stimuli(schedule.design, [stimuli_rng] * n_inputs, fake_key)
    golden_true = _golden_true(schedule, inputs)

    data_sites = [
        (reg, bit) for reg in schedule.registers if reg.kind != RegisterKind.CONTROL
        for bit in range(reg.width)
    ]
    control_sites = [
        (reg, bit) for reg in schedule.registers if reg.kind == RegisterKind.CONTROL
        for bit in range(reg.width)
    ]
    element_input = np.tile(np.arange(n_inputs), len(data_sites))
    batch_golden = golden_true[element_input]

    tally = _Tally()
    golden = Machine(schedule, inputs, record=False)
    for cycle in tqdm(range(schedule.nominal_latency), desc="SBF", unit="cycle", disable=not progress):
        masks: Dict[int, np.ndarray] = {}
        for s, (reg, bit) in enumerate(data_sites):
            mask = masks.setdefault(reg.id, np.zeros(len(element_input), dtype=np.uint16))
            mask[s * n_inputs:(s + 1) * n_inputs] = reg.flip_mask(bit)
        trace = golden.fork({cycle: masks}, indices=element_input).run(watchdog)
        codes, wbc = _classify_batch(trace, batch_golden, schedule.design)
        for s, (reg, bit) in enumerate(data_sites):
            part = slice(s * n_inputs, (s + 1) * n_inputs)
            tally.add(codes[part], wbc[part], kind=reg.kind.value, slice=reg.bit_role(bit).value,
                      shared=_shared_name(reg, bit))

        for reg, bit in control_sites:
            trace = golden.fork({cycle: {reg.id: reg.flip_mask(bit)}}).run(watchdog)
            codes, wbc = _classify_batch(trace, golden_true, schedule.design)
            tally.add(codes, wbc, kind=reg.kind.value, slice=reg.bit_role(bit).value,
                      shared=_shared_name(reg, bit))
        golden.step()

    report = tally.report(schedule, multiplicity=1, exhaustive=True, seed=seed)
    logger.info(
        f"SBF {schedule.design.value}/{schedule.profile.value}: {report.sample_count} injections, "
        + ", ".join(f"{c.value} {report.rates[c]:.3f}" for c in CLASS_ORDER)
    )
    return report


def run_mbf_campaign(schedule: Schedule, multiplicity: int, e: float = 0.01, confidence: float = 0.99,
                     seed: int = 0, fake_key: Optional[int] = None, p: float = 0.5,
                     watchdog: Optional[int] = None, progress: bool = False) -> CampaignReport:
    """
    Sampled m-bit flips at one cycle.

    Sample s draws its cycle, m distinct flip-flops and its stimulus from
    default_rng([seed, MBF_STREAM, m, s]). Samples are run together up to
    their injection cycle, then split by control-register flip pattern.
    """
    bits = [(reg, bit) for reg in schedule.registers for bit in range(reg.width)]
    if not 1 <= multiplicity <= len(bits):
        raise MultiplicityError(f"Multiplicity {multiplicity} outside 1..{len(bits)} register bits")
    watchdog = watchdog or schedule.default_watchdog
    latency = schedule.nominal_latency
    population = math.comb(len(bits), multiplicity) * latency
    n = sample_size(population, e, confidence, p)

    rngs = [np.random.default_rng([seed, MBF_STREAM, multiplicity, s]) for s in range(n)]
    cycles = np.zeros(n, dtype=np.int64)
    chosen = []
    for s, rng in enumerate(rngs):
        cycles[s] = rng.integers(0, latency)
        chosen.append(tuple(sorted(int(b) for b in rng.choice(len(bits), multiplicity, replace=False))))
    inputs = draw_stimuli(schedule.design, rngs, fake_key)
    golden_true = _golden_true(schedule, inputs)

    tally = _Tally()
    golden = Machine(schedule, inputs, record=False)
    for cycle in tqdm(range(latency), desc=f"MBF m={multiplicity}", unit="cycle", disable=not progress):
        members = np.flatnonzero(cycles == cycle)
        groups: Dict[Tuple, List[int]] = defaultdict(list)
        for s in members:
            pattern = []
            for b in chosen[s]:
                reg, bit = bits[b]
                if reg.kind == RegisterKind.CONTROL:
                    pattern.append((reg.id, bit))
            groups[tuple(pattern)].append(int(s))

        for pattern, samples in sorted(groups.items()):
            samples = np.asarray(samples)
            masks: Dict[int, object] = {}
            for reg_id, bit in pattern:
                masks[reg_id] = masks.get(reg_id, 0) ^ schedule.registers[reg_id].flip_mask(bit)
            for k, s in enumerate(samples):
                for b in chosen[s]:
                    reg, bit = bits[b]
                    if reg.kind != RegisterKind.CONTROL:
                        mask = masks.setdefault(reg.id, np.zeros(len(samples), dtype=np.uint16))
                        mask[k] ^= reg.flip_mask(bit)
            trace = golden.fork({cycle: masks}, indices=samples).run(watchdog)
            codes, wbc = _classify_batch(trace, golden_true[samples], schedule.design)
            for k, s in enumerate(samples):
                kinds = "+".join(sorted({bits[b][0].kind.value for b in chosen[s]}))
                roles = "+".join(sorted({bits[b][0].bit_role(bits[b][1]).value for b in chosen[s]}))
                names = {_shared_name(*bits[b]) for b in chosen[s]}
                shared = None if None in names else "+".join(sorted(names))
                tally.add(codes[k:k + 1], wbc[k:k + 1], kind=kinds, slice=roles, shared=shared)
        golden.step()

    report = tally.report(
        schedule, multiplicity=multiplicity, exhaustive=False, seed=seed,
        margin_of_error=e, confidence=confidence, population=population,
    )
    logger.info(
        f"MBF m={multiplicity} {schedule.design.value}/{schedule.profile.value}: {n} samples, "
        + ", ".join(f"{c.value} {report.rates[c]:.3f}" for c in CLASS_ORDER)
    )
    return report


def run_fault_matrix(schedules: Sequence[Schedule], multiplicities: Sequence[int] = MBF_MULTIPLICITIES,
                     e: float = 0.01, confidence: float = 0.99, seed: int = 0,
                     fake_key: Optional[int] = None, n_inputs: int = SBF_INPUTS, p: float = 0.5,
                     watchdog_factor: int = 4, progress: bool = False) -> List[CampaignReport]:
    """SBF plus every MBF multiplicity for each schedule, in a fixed order."""
    reports = []
    for schedule in schedules:
        watchdog = watchdog_factor * schedule.nominal_latency
        reports.append(run_sbf_campaign(schedule, n_inputs, seed, fake_key, watchdog, progress))
        for m in multiplicities:
            reports.append(run_mbf_campaign(schedule, m, e, confidence, seed, fake_key, p, watchdog, progress))
    return reports
