"""
Leakage Simulator

Synthesises power traces from scheduled executions: one sample per clock
cycle under the HW or HD model, or one sample per intermediate in Value
mode, plus i.i.d. Gaussian noise. Glitch mode (masked design only) adds the
recombined share pairs listed by sbox_models.remask_taps.

Every trace has its own RNG substream default_rng([seed, stream, index]);
the random plaintext (if any) is drawn from it first, then the masks, then
the per-trace fake key, then the noise. Output is therefore independent of
chunking and worker count.
"""

import logging
from contextlib import closing
from dataclasses import dataclass, field
from multiprocessing import Pool
from typing import Dict, List, Optional, Sequence

import numpy as np
from tqdm import tqdm

from ..models.schemas import Design, FakeKeyPolicy, LeakageModel, Profile
from .sbox_models import MASK_INPUT_WIDTHS, MaskSet, design_inputs
from .scheduler import RegisterWrite, Schedule, build_schedule, execute

logger = logging.getLogger(__name__)

# RNG stream ids
TRACE_STREAM = 0
TTEST_FIXED_STREAM = 1
TTEST_RANDOM_STREAM = 2
FAKE_KEY_STREAM = 3

DEFAULT_CHUNK_SIZE = 4096

_POPCOUNT16 = np.unpackbits(
    np.arange(1 << 16, dtype=">u2").view(np.uint8)
).reshape(-1, 16).sum(axis=1).astype(np.uint8)


class LeakageConfigError(ValueError):
    """Invalid trace-generation request"""


def popcount(value):
    """Hamming weight of an int or of every element of a uint16 array."""
    if isinstance(value, np.ndarray):
        return _POPCOUNT16[value.astype(np.uint16)]
    return bin(int(value)).count("1")


def write_leakage(write: RegisterWrite, model: LeakageModel):
    """Contribution of one register write: HW of the new value or HD to the old one."""
    if LeakageModel(model) == LeakageModel.HD:
        return popcount(write.old ^ write.new)
    return popcount(write.new)


@dataclass(frozen=True)
class NoiseModel:
    sigma: float = 1.0
    seed: int = 0

    def __post_init__(self):
        if self.sigma < 0:
            raise LeakageConfigError(f"Noise sigma must be >= 0, got {self.sigma}")
        if not 0 <= self.seed < 2 ** 64:
            raise LeakageConfigError(f"Seed must fit in 64 bits, got {self.seed}")


def fresh_masks(rng: np.random.Generator) -> MaskSet:
    """Draw m_in, m4a, m4b, m2 uniformly and derive the transformed masks."""
    m_in = int(rng.integers(0, 256))
    m4a = int(rng.integers(0, 16))
    m4b = int(rng.integers(0, 16))
    m2 = int(rng.integers(0, 4))
    return MaskSet.derive(m_in, m4a, m4b, m2)


def resolve_fake_key(policy: FakeKeyPolicy, seed: int, fixed: int = 0) -> Optional[int]:
    """Campaign-wide decoy key; None means one key per trace."""
    policy = FakeKeyPolicy(policy)
    if policy == FakeKeyPolicy.FIXED:
        return fixed & 0xFF
    if policy == FakeKeyPolicy.FROM_SEED:
        return int(np.random.default_rng([seed, FAKE_KEY_STREAM]).integers(0, 256))
    return None


# ============================================
# Trace container
# ============================================

@dataclass(eq=False)
class TraceMatrix:
    """n_traces x n_samples float32 leakage plus per-trace metadata"""
    samples: np.ndarray
    plaintexts: np.ndarray
    keys: np.ndarray
    fake_keys: np.ndarray
    masks: Dict[str, np.ndarray]
    model: LeakageModel
    sigma: float
    seed: int
    design: Design = Design.UHLS
    profile: Profile = Profile.ROLLED
    glitch: bool = False

    def __post_init__(self):
        self.samples = np.ascontiguousarray(self.samples, dtype=np.float32)
        if self.samples.ndim != 2:
            raise LeakageConfigError(f"Samples must be 2-D, got shape {self.samples.shape}")
        n = self.samples.shape[0]
        for name in ("plaintexts", "keys", "fake_keys"):
            column = np.asarray(getattr(self, name), dtype=np.uint8)
            if column.shape != (n,):
                raise LeakageConfigError(f"{name} has {column.shape[0]} entries for {n} traces")
            setattr(self, name, column)
        self.masks = {
            name: np.asarray(self.masks.get(name, np.zeros(n)), dtype=np.uint8)
            for name in MASK_INPUT_WIDTHS
        }
        if not np.all(np.isfinite(self.samples)):
            raise LeakageConfigError("Trace samples must be finite")

    @property
    def n_traces(self) -> int:
        return self.samples.shape[0]

    @property
    def n_samples(self) -> int:
        return self.samples.shape[1]

    def mask_set(self) -> MaskSet:
        return MaskSet(**{k: v.astype(np.uint16) for k, v in self.masks.items()})

    def take(self, indices) -> "TraceMatrix":
        """Subset or reorder traces."""
        return TraceMatrix(
            samples=self.samples[indices],
            plaintexts=self.plaintexts[indices],
            keys=self.keys[indices],
            fake_keys=self.fake_keys[indices],
            masks={k: v[indices] for k, v in self.masks.items()},
            model=self.model,
            sigma=self.sigma,
            seed=self.seed,
            design=self.design,
            profile=self.profile,
            glitch=self.glitch,
        )

    @property
    def true_key(self) -> int:
        """The attacked key; traces of one campaign share it."""
        keys = np.unique(self.keys)
        if len(keys) != 1:
            raise LeakageConfigError(f"Traces carry {len(keys)} different keys")
        return int(keys[0])


# ============================================
# Sample synthesis
# ============================================

def sample_count(schedule: Schedule, model: LeakageModel, glitch: bool = False) -> int:
    if LeakageModel(model) == LeakageModel.VALUE:
        return len(schedule.dataflow) + (len(schedule.dataflow.taps) if glitch else 0)
    return schedule.nominal_latency


def noiseless_samples(schedule: Schedule, inputs: Dict[str, object],
                      model: LeakageModel, glitch: bool = False) -> np.ndarray:
    """Leakage of a batch of evaluations before noise, as float64 (n, samples)."""
    model = LeakageModel(model)
    dataflow = schedule.dataflow
    n = len(inputs["plaintext"])
    trace = execute(schedule, inputs, record=True)

    def column(value):
        return np.broadcast_to(np.asarray(value, dtype=np.float64), (n,))

    taps = []
    if glitch:
        for tap in dataflow.taps:
            value = dataflow.read(tap.value, trace.values[tap.value.source])
            mask_raw = inputs[tap.mask.source] if tap.mask.is_input else trace.values[tap.mask.source]
            taps.append((tap.value.source, popcount(value ^ dataflow.read(tap.mask, mask_raw))))

    if model == LeakageModel.VALUE:
        columns = [column(popcount(trace.values[op.id])) for op in dataflow.ops]
        columns.extend(column(leak) for _, leak in taps)
        return np.stack(columns, axis=1)

    samples = np.zeros((n, schedule.nominal_latency), dtype=np.float64)
    for write in trace.writes:
        samples[:, write.cycle] += write_leakage(write, model)
    for node, leak in taps:
        samples[:, schedule.node_cycle[node]] += leak
    return samples


@dataclass
class _Chunk:
    design: Design
    profile: Profile
    model: LeakageModel
    glitch: bool
    plaintexts: np.ndarray
    key: int
    fake_key: Optional[int]
    sigma: float
    seed: int
    stream: int
    start: int
    per_trace_plaintext: bool = False


@dataclass
class _ChunkResult:
    samples: np.ndarray
    plaintexts: np.ndarray
    fake_keys: np.ndarray
    masks: Dict[str, np.ndarray] = field(default_factory=dict)


def _simulate_chunk(chunk: _Chunk) -> _ChunkResult:
    schedule = build_schedule(chunk.design, chunk.profile)
    n = len(chunk.plaintexts)
    rngs = [np.random.default_rng([chunk.seed, chunk.stream, chunk.start + i]) for i in range(n)]

    plaintexts = np.asarray(chunk.plaintexts, dtype=np.uint16).copy()
    fresh = {name: np.zeros(n, dtype=np.uint16) for name in ("m_in", "m4a", "m4b", "m2")}
    decoy = (chunk.fake_key or 0) if chunk.design == Design.CNG else 0
    fake_keys = np.full(n, decoy, dtype=np.uint16)
    for i, rng in enumerate(rngs):
        if chunk.per_trace_plaintext:
            plaintexts[i] = rng.integers(0, 256)
        if chunk.design == Design.MASKED:
            masks = fresh_masks(rng)
            for name in fresh:
                fresh[name][i] = getattr(masks, name)
        if chunk.design == Design.CNG and chunk.fake_key is None:
            fake_keys[i] = rng.integers(0, 256)

    mask_set = MaskSet.derive(fresh["m_in"], fresh["m4a"], fresh["m4b"], fresh["m2"])
    keys = np.full(n, chunk.key, dtype=np.uint16)
    inputs = design_inputs(chunk.design, plaintexts, keys, fake_keys, mask_set)
    samples = noiseless_samples(schedule, inputs, chunk.model, chunk.glitch)
    width = samples.shape[1]
    for i, rng in enumerate(rngs):
        samples[i] += chunk.sigma * rng.standard_normal(width)

    masks = mask_set.to_dict() if chunk.design == Design.MASKED else {}
    return _ChunkResult(
        samples=samples.astype(np.float32),
        plaintexts=plaintexts.astype(np.uint8),
        fake_keys=fake_keys.astype(np.uint8),
        masks={k: np.asarray(v, dtype=np.uint8) for k, v in masks.items()},
    )


def simulate_traces(schedule: Schedule, plaintexts: Optional[Sequence[int]], key: int,
                    model: LeakageModel, noise: NoiseModel, glitch: bool = False,
                    fake_key: Optional[int] = 0, stream: int = TRACE_STREAM,
                    n_traces: Optional[int] = None, jobs: int = 1,
                    chunk_size: int = DEFAULT_CHUNK_SIZE, progress: bool = False) -> TraceMatrix:
    """
    Generate a TraceMatrix for the given plaintexts.

    plaintexts=None draws one plaintext per trace from its substream (n_traces
    required). fake_key=None draws a CNG decoy key per trace.
    """
    model = LeakageModel(model)
    if glitch and schedule.design != Design.MASKED:
        raise LeakageConfigError(f"Glitch mode needs the masked design, got {schedule.design.value}")
    if plaintexts is None:
        if not n_traces:
            raise LeakageConfigError("Random plaintexts need n_traces > 0")
        plaintexts = np.zeros(n_traces, dtype=np.uint16)
        random_plaintexts = True
    else:
        plaintexts = np.asarray(plaintexts, dtype=np.uint16)
        random_plaintexts = False
    if len(plaintexts) == 0:
        raise LeakageConfigError("Plaintexts must be non-empty")

    chunks = [
        _Chunk(
            design=schedule.design, profile=schedule.profile, model=model, glitch=glitch,
            plaintexts=plaintexts[start:start + chunk_size], key=key & 0xFF,
            fake_key=None if fake_key is None else fake_key & 0xFF,
            sigma=noise.sigma, seed=noise.seed, stream=stream, start=start,
            per_trace_plaintext=random_plaintexts,
        )
        for start in range(0, len(plaintexts), chunk_size)
    ]
    logger.info(
        f"Simulating {len(plaintexts)} {model.value} traces of {schedule.design.value}/"
        f"{schedule.profile.value} in {len(chunks)} chunk(s), jobs={jobs}"
    )

    results: List[_ChunkResult] = []
    with tqdm(total=len(chunks), desc="traces", unit="chunk", disable=not progress) as pbar:
        if jobs > 1 and len(chunks) > 1:
            with closing(Pool(processes=jobs)) as pool:
                for result in pool.imap(_simulate_chunk, chunks):
                    results.append(result)
                    pbar.update(1)
        else:
            for chunk in chunks:
                results.append(_simulate_chunk(chunk))
                pbar.update(1)

    masks = {}
    if schedule.design == Design.MASKED:
        masks = {name: np.concatenate([r.masks[name] for r in results]) for name in MASK_INPUT_WIDTHS}
    return TraceMatrix(
        samples=np.concatenate([r.samples for r in results]),
        plaintexts=np.concatenate([r.plaintexts for r in results]),
        keys=np.full(len(plaintexts), key & 0xFF, dtype=np.uint8),
        fake_keys=np.concatenate([r.fake_keys for r in results]),
        masks=masks,
        model=model,
        sigma=noise.sigma,
        seed=noise.seed,
        design=schedule.design,
        profile=schedule.profile,
        glitch=glitch,
    )
