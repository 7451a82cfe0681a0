"""
TRC1 Trace File

Binary container for a TraceMatrix:

  header    <4sHIIBfQ   magic "TRC1", version, n_traces, n_samples,
                        model tag, sigma (f32), seed
  samples   n_traces x n_samples little-endian f32, row-major
  metadata  "META", design u8, profile u8, glitch u8, then per trace
            plaintext, key, fake_key, m_in, m4a, m4b, m2, m_in_t, m_out (u8 each)
"""

import logging
import struct
from pathlib import Path
from typing import Union

import numpy as np

from ..models.schemas import DESIGN_TAGS, LEAKAGE_MODEL_TAGS, PROFILE_TAGS
from .leakage_sim import TraceMatrix
from .sbox_models import MASK_INPUT_WIDTHS

logger = logging.getLogger(__name__)

MAGIC = b"TRC1"
VERSION = 1
META_TAG = b"META"

HEADER = struct.Struct("<4sHIIBfQ")
META_HEADER = struct.Struct("<4sBBB")
METADATA_FIELDS = ("plaintext", "key", "fake_key") + tuple(MASK_INPUT_WIDTHS)

_MODELS = {tag: model for model, tag in LEAKAGE_MODEL_TAGS.items()}
_DESIGNS = {tag: design for design, tag in DESIGN_TAGS.items()}
_PROFILES = {tag: profile for profile, tag in PROFILE_TAGS.items()}


class TraceFormatError(ValueError):
    """Malformed or truncated TRC1 data"""


def encode_traces(traces: TraceMatrix) -> bytes:
    header = HEADER.pack(
        MAGIC, VERSION, traces.n_traces, traces.n_samples,
        LEAKAGE_MODEL_TAGS[traces.model], traces.sigma, traces.seed,
    )
    samples = traces.samples.astype("<f4", copy=False).tobytes(order="C")
    meta = META_HEADER.pack(
        META_TAG, DESIGN_TAGS[traces.design], PROFILE_TAGS[traces.profile], int(traces.glitch)
    )
    columns = [traces.plaintexts, traces.keys, traces.fake_keys]
    columns += [traces.masks[name] for name in MASK_INPUT_WIDTHS]
    rows = np.column_stack(columns).astype(np.uint8) if traces.n_traces else np.zeros((0, 9), np.uint8)
    return header + samples + meta + rows.tobytes(order="C")


def decode_traces(data: bytes) -> TraceMatrix:
    if len(data) < HEADER.size:
        raise TraceFormatError(f"File too short for a TRC1 header ({len(data)} bytes)")
    magic, version, n_traces, n_samples, model_tag, sigma, seed = HEADER.unpack_from(data, 0)
    if magic != MAGIC:
        raise TraceFormatError(f"Bad magic {magic!r}, expected {MAGIC!r}")
    if version != VERSION:
        raise TraceFormatError(f"Unsupported TRC1 version {version}")
    if model_tag not in _MODELS:
        raise TraceFormatError(f"Unknown leakage model tag {model_tag}")

    offset = HEADER.size
    sample_bytes = 4 * n_traces * n_samples
    meta_bytes = META_HEADER.size + len(METADATA_FIELDS) * n_traces
    expected = offset + sample_bytes + meta_bytes
    if len(data) != expected:
        raise TraceFormatError(f"Expected {expected} bytes for {n_traces}x{n_samples} traces, got {len(data)}")

    samples = np.zeros((n_traces, n_samples), dtype=np.float32)
    if sample_bytes:
        samples[:] = np.frombuffer(data, dtype="<f4", count=n_traces * n_samples, offset=offset).reshape(n_traces, n_samples)
    offset += sample_bytes

    tag, design_tag, profile_tag, glitch = META_HEADER.unpack_from(data, offset)
    if tag != META_TAG:
        raise TraceFormatError(f"Bad metadata tag {tag!r}")
    if design_tag not in _DESIGNS or profile_tag not in _PROFILES:
        raise TraceFormatError(f"Unknown design/profile tags {design_tag}/{profile_tag}")
    offset += META_HEADER.size
    rows = np.zeros((n_traces, len(METADATA_FIELDS)), dtype=np.uint8)
    if n_traces:
        rows[:] = np.frombuffer(data, dtype=np.uint8, offset=offset).reshape(n_traces, len(METADATA_FIELDS))

    try:
        return TraceMatrix(
            samples=samples,
            plaintexts=rows[:, 0].copy(),
            keys=rows[:, 1].copy(),
            fake_keys=rows[:, 2].copy(),
            masks={name: rows[:, 3 + i].copy() for i, name in enumerate(MASK_INPUT_WIDTHS)},
            model=_MODELS[model_tag],
            sigma=float(sigma),
            seed=seed,
            design=_DESIGNS[design_tag],
            profile=_PROFILES[profile_tag],
            glitch=bool(glitch),
        )
    except ValueError as e:
        raise TraceFormatError(str(e)) from e


def write_traces(path: Union[str, Path], traces: TraceMatrix) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_bytes(encode_traces(traces))
    logger.info(f"Wrote {traces.n_traces}x{traces.n_samples} traces to {path}")
    return path


def read_traces(path: Union[str, Path]) -> TraceMatrix:
    traces = decode_traces(Path(path).read_bytes())
    logger.info(f"Read {traces.n_traces}x{traces.n_samples} traces from {path}")
    return traces
