"""
SBOX Models

The three designs under evaluation (unprotected, CNG, masked) expressed as
dataflow graphs over the tower-field primitives of gf_tower. Every
elementary operation is one node; evaluating a graph sends each node's
result to an intermediate recorder, which is the attack surface used by
leakage_sim and sca_engine.

CNG runs one graph on 16-bit words: the low byte is computed under the true
key, the high byte under the fake key. Node values are lane-packed: a
w-bit result occupies bits [0, w) and [8, 8 + w).

The masked design uses a perfectly masked tower-field inversion:
input mask m_in, tower-basis mask m_in_t = A2X(m_in), fresh GF(2^4) masks
m4a (the d term) and m4b (inverter output), a fresh GF(2^2) mask m2, and
output mask m_out = X2S(m_in_t).
"""

import logging
from contextlib import contextmanager
from dataclasses import dataclass
from enum import Enum
from functools import lru_cache
from typing import Dict, Iterator, List, Optional, Protocol, Tuple, Union

import numpy as np

from ..models.schemas import Design, SboxFunction
from .gf_tower import (
    A2X, AFFINE_CONSTANT, X2S, BitMatrix8, basis_change, gf256_inv,
    gf4_mul, gf4_scl_N, gf4_scl_N2, gf4_sq,
)

logger = logging.getLogger(__name__)


class OpKind(str, Enum):
    """Elementary operation kinds of a dataflow node"""
    XOR = "xor"
    XOR_CONST = "xor_const"
    CONCAT = "concat"
    KEY_ADD_DUAL = "key_add_dual"
    G4_MUL = "g4_mul"
    G4_SQ = "g4_sq"
    G4_SCL_N = "g4_scl_n"
    G4_SCL_N2 = "g4_scl_n2"
    NEWBASIS = "newbasis"


# Leaf kinds are recorded under their own function column
LEAF_FUNCTIONS = {
    OpKind.G4_MUL: SboxFunction.G4_MUL,
    OpKind.G4_SQ: SboxFunction.G4_SQ,
    OpKind.G4_SCL_N: SboxFunction.G4_SCL_N,
    OpKind.G4_SCL_N2: SboxFunction.G4_SCL_N2,
}

LANE_BITS = 8

# Port names per design, in register-file order
DESIGN_INPUTS = {
    Design.UHLS: ("plaintext", "key"),
    Design.CNG: ("plaintext", "key", "fake_key"),
    Design.MASKED: ("plaintext", "key", "m_in", "m4a", "m4b", "m2", "m_in_t", "m_out"),
}

MASK_INPUT_WIDTHS = {"m_in": 8, "m4a": 4, "m4b": 4, "m2": 2, "m_in_t": 8, "m_out": 8}


def reference_sbox(x):
    """Direct tower-field S-box of x, with no recording."""
    return basis_change(gf256_inv(basis_change(x, A2X)), X2S) ^ AFFINE_CONSTANT


# ============================================
# Records and recorders
# ============================================

@dataclass(frozen=True)
class IntermediateDescriptor:
    """One attackable intermediate: a node of a design's dataflow"""
    id: int
    function: SboxFunction
    op_index: int
    width: int
    kind: OpKind
    call: int

    def to_dict(self) -> dict:
        return {
            "id": self.id,
            "function": self.function.value,
            "op_index": self.op_index,
            "width": self.width,
            "kind": self.kind.value,
            "call": self.call,
        }


@dataclass(frozen=True)
class IntermediateRecord:
    descriptor_id: int
    value: Union[int, np.ndarray]


class Recorder(Protocol):
    def record(self, descriptor_id: int, value) -> None: ...


class ListRecorder:
    """Keeps every record in evaluation order."""

    def __init__(self):
        self.records: List[IntermediateRecord] = []

    def record(self, descriptor_id: int, value) -> None:
        self.records.append(IntermediateRecord(descriptor_id, value))

    def values(self) -> Dict[int, Union[int, np.ndarray]]:
        return {r.descriptor_id: r.value for r in self.records}

    def __len__(self) -> int:
        return len(self.records)


class NullRecorder:
    def record(self, descriptor_id: int, value) -> None:
        pass


# ============================================
# Masks and outputs
# ============================================

@dataclass(frozen=True, eq=False)
class MaskSet:
    """Masking randomness of one SBOX evaluation (ints or equal-length arrays)"""
    m_in: Union[int, np.ndarray]
    m4a: Union[int, np.ndarray]
    m4b: Union[int, np.ndarray]
    m2: Union[int, np.ndarray]
    m_in_t: Union[int, np.ndarray]
    m_out: Union[int, np.ndarray]

    @classmethod
    def derive(cls, m_in, m4a, m4b, m2) -> "MaskSet":
        """Build a mask set from the fresh masks, deriving the transformed ones."""
        m_in_t = basis_change(m_in, A2X)
        return cls(
            m_in=m_in, m4a=m4a, m4b=m4b, m2=m2,
            m_in_t=m_in_t, m_out=basis_change(m_in_t, X2S),
        )

    @classmethod
    def zero(cls) -> "MaskSet":
        return cls.derive(0, 0, 0, 0)

    def is_consistent(self) -> bool:
        m_in_t = basis_change(self.m_in, A2X)
        return bool(np.all(m_in_t == self.m_in_t) and np.all(basis_change(m_in_t, X2S) == self.m_out))

    def to_dict(self) -> Dict[str, Union[int, np.ndarray]]:
        return {name: getattr(self, name) for name in MASK_INPUT_WIDTHS}


@dataclass(frozen=True, eq=False)
class CngOutput:
    """Decoded CNG output word"""
    true_out: Union[int, np.ndarray]
    fake_out: Union[int, np.ndarray]
    alarm: Union[bool, np.ndarray]


# ============================================
# Dataflow graph
# ============================================

@dataclass(frozen=True)
class Operand:
    """A bit slice of an input port or of a node result"""
    source: Union[int, str]
    shift: int = 0
    width: int = 8

    @property
    def hi(self) -> "Operand":
        half = self.width // 2
        return Operand(self.source, self.shift + half, half)

    @property
    def lo(self) -> "Operand":
        return Operand(self.source, self.shift, self.width // 2)

    @property
    def is_input(self) -> bool:
        return isinstance(self.source, str)


@dataclass(frozen=True)
class DataflowOp:
    id: int
    kind: OpKind
    function: SboxFunction
    operands: Tuple[Operand, ...]
    width: int
    call: int
    const: int = 0
    matrix: Optional[BitMatrix8] = None

    @property
    def node_sources(self) -> Tuple[int, ...]:
        return tuple(o.source for o in self.operands if not o.is_input)


@dataclass(frozen=True)
class GlitchTap:
    """A masked node and the mask it carries; glitches recombine the pair"""
    value: Operand
    mask: Operand


@dataclass(frozen=True)
class Dataflow:
    """Ordered (topological) node list of one design"""
    design: Design
    lanes: int
    inputs: Dict[str, int]
    ops: Tuple[DataflowOp, ...]
    outputs: Dict[str, Operand]
    taps: Tuple[GlitchTap, ...] = ()

    def __len__(self) -> int:
        return len(self.ops)

    def storage_width(self, width: int) -> int:
        """Register bits needed to hold a lane-packed value of the given width."""
        return width * self.lanes

    def lane_mask(self, width: int) -> int:
        mask = (1 << width) - 1
        return sum(mask << (LANE_BITS * lane) for lane in range(self.lanes))

    def read(self, operand: Operand, raw):
        return (raw >> operand.shift) & self.lane_mask(operand.width)

    def apply(self, op: DataflowOp, args: List):
        """Compute a node from its already sliced operands."""
        if op.kind == OpKind.KEY_ADD_DUAL:
            p, k, fk = args
            return (p ^ k) | ((p ^ fk) << LANE_BITS)
        if self.lanes == 1:
            return _compute(op, args)
        out = None
        for lane in range(self.lanes):
            s = LANE_BITS * lane
            part = _compute(op, [(a >> s) & 0xFF for a in args]) << s
            out = part if out is None else out | part
        return out

    def replicate(self, byte):
        """Copy a byte into every lane of a packed word."""
        word = byte
        for lane in range(1, self.lanes):
            word = word | (byte << (LANE_BITS * lane))
        return word

    def column_word(self, op: DataflowOp, j: int) -> int:
        """Basis array entry j of a NEWBASIS node, replicated into every lane."""
        return self.replicate(op.matrix.column(j))

    def newbasis_step(self, op: DataflowOp, x, acc, bit: int, column_word):
        """One iteration of the bit-serial basis change: acc ^= x[bit] * column."""
        out = None
        for lane in range(self.lanes):
            s = LANE_BITS * lane
            xb = (x >> (s + bit)) & 1
            col = (column_word >> s) & 0xFF
            part = (((acc >> s) & 0xFF) ^ (xb * col)) << s
            out = part if out is None else out | part
        return out

    def evaluate(self, inputs: Dict[str, object], recorder: Optional[Recorder] = None) -> Dict:
        """Evaluate every node in order; returns node id -> value."""
        env: Dict[Union[int, str], object] = dict(inputs)
        for op in self.ops:
            args = [self.read(o, env[o.source]) for o in op.operands]
            value = self.apply(op, args)
            env[op.id] = value
            if recorder is not None:
                recorder.record(op.id, value)
        return env

    def output_values(self, env: Dict) -> Dict[str, object]:
        return {name: self.read(o, env[o.source]) for name, o in self.outputs.items()}


def _compute(op: DataflowOp, args: List):
    kind = op.kind
    if kind == OpKind.XOR:
        return args[0] ^ args[1]
    if kind == OpKind.XOR_CONST:
        return args[0] ^ op.const
    if kind == OpKind.CONCAT:
        return (args[0] << op.operands[1].width) | args[1]
    if kind == OpKind.G4_MUL:
        return gf4_mul(args[0], args[1])
    if kind == OpKind.G4_SQ:
        return gf4_sq(args[0])
    if kind == OpKind.G4_SCL_N:
        return gf4_scl_N(args[0])
    if kind == OpKind.G4_SCL_N2:
        return gf4_scl_N2(args[0])
    if kind == OpKind.NEWBASIS:
        return basis_change(args[0], op.matrix)
    raise ValueError(f"Cannot compute {kind} lane-wise")


class DataflowBuilder:
    """Records operations as they are called; the call stack tags function and call id."""

    def __init__(self, design: Design, lanes: int = 1):
        self.design = design
        self.lanes = lanes
        self.inputs: Dict[str, int] = {}
        self.ops: List[DataflowOp] = []
        self.outputs: Dict[str, Operand] = {}
        self.taps: List[GlitchTap] = []
        self._calls = 0
        self._stack: List[Tuple[SboxFunction, int]] = [(SboxFunction.SBOX, 0)]

    def input(self, name: str, width: int) -> Operand:
        self.inputs[name] = width
        return Operand(name, 0, width)

    @contextmanager
    def call(self, function: SboxFunction) -> Iterator[None]:
        self._calls += 1
        self._stack.append((function, self._calls))
        try:
            yield
        finally:
            self._stack.pop()

    def _emit(self, kind: OpKind, operands, width: int, const: int = 0,
              matrix: Optional[BitMatrix8] = None) -> Operand:
        function, call = self._stack[-1]
        op = DataflowOp(
            id=len(self.ops),
            kind=kind,
            function=LEAF_FUNCTIONS.get(kind, function),
            operands=tuple(operands),
            width=width,
            call=call,
            const=const,
            matrix=matrix,
        )
        self.ops.append(op)
        return Operand(op.id, 0, width)

    def xor(self, a: Operand, b: Operand) -> Operand:
        if a.width != b.width:
            raise ValueError(f"XOR of {a.width}-bit and {b.width}-bit operands")
        return self._emit(OpKind.XOR, (a, b), a.width)

    def xor_const(self, a: Operand, const: int) -> Operand:
        return self._emit(OpKind.XOR_CONST, (a,), a.width, const=const)

    def concat(self, hi: Operand, lo: Operand) -> Operand:
        return self._emit(OpKind.CONCAT, (hi, lo), hi.width + lo.width)

    def leaf(self, kind: OpKind, *operands: Operand) -> Operand:
        return self._emit(kind, operands, 2)

    def newbasis(self, x: Operand, matrix: BitMatrix8) -> Operand:
        with self.call(SboxFunction.G256_NB):
            return self._emit(OpKind.NEWBASIS, (x,), 8, matrix=matrix)

    def key_add_dual(self, p: Operand, key: Operand, fake_key: Operand) -> Operand:
        return self._emit(OpKind.KEY_ADD_DUAL, (p, key, fake_key), 8)

    def tap(self, value: Operand, mask: Operand) -> None:
        self.taps.append(GlitchTap(value, mask))

    def output(self, name: str, operand: Operand) -> None:
        self.outputs[name] = operand

    def build(self) -> Dataflow:
        return Dataflow(
            design=self.design,
            lanes=self.lanes,
            inputs=dict(self.inputs),
            ops=tuple(self.ops),
            outputs=dict(self.outputs),
            taps=tuple(self.taps),
        )


# ============================================
# Composite functions (mirror gf_tower)
# ============================================

def _g16_mul(b: DataflowBuilder, x: Operand, y: Operand) -> Operand:
    with b.call(SboxFunction.G16_MUL):
        e = b.leaf(OpKind.G4_SCL_N, b.leaf(OpKind.G4_MUL, b.xor(x.hi, x.lo), b.xor(y.hi, y.lo)))
        p = b.xor(b.leaf(OpKind.G4_MUL, x.hi, y.hi), e)
        q = b.xor(b.leaf(OpKind.G4_MUL, x.lo, y.lo), e)
        return b.concat(p, q)


def _g16_sq_scl(b: DataflowBuilder, x: Operand) -> Operand:
    with b.call(SboxFunction.G16_SQ_SCL):
        p = b.leaf(OpKind.G4_SQ, b.xor(x.hi, x.lo))
        q = b.leaf(OpKind.G4_SCL_N2, b.leaf(OpKind.G4_SQ, x.lo))
        return b.concat(p, q)


def _g16_inv(b: DataflowBuilder, x: Operand) -> Operand:
    with b.call(SboxFunction.G16_INV):
        c = b.leaf(OpKind.G4_SCL_N, b.leaf(OpKind.G4_SQ, b.xor(x.hi, x.lo)))
        d = b.leaf(OpKind.G4_MUL, x.hi, x.lo)
        e = b.leaf(OpKind.G4_SQ, b.xor(c, d))
        p = b.leaf(OpKind.G4_MUL, e, x.lo)
        q = b.leaf(OpKind.G4_MUL, e, x.hi)
        return b.concat(p, q)


def _g256_inv(b: DataflowBuilder, x: Operand) -> Operand:
    with b.call(SboxFunction.G256_INV):
        c = _g16_sq_scl(b, b.xor(x.hi, x.lo))
        d = _g16_mul(b, x.hi, x.lo)
        e = _g16_inv(b, b.xor(c, d))
        p = _g16_mul(b, e, x.lo)
        q = _g16_mul(b, e, x.hi)
        return b.concat(p, q)


def _masked_mul(b: DataflowBuilder, mul, x: Operand, y: Operand,
                mx: Operand, my: Operand, fresh: Operand) -> Operand:
    """
    (x^mx)(y^my) product remasked by fresh.

    Sum order is fixed: X*Y, fresh, X*my, Y*mx, mx*my. Every partial sum
    contains the fresh mask.
    """
    acc = b.xor(mul(x, y), fresh)
    acc = b.xor(acc, mul(x, my))
    acc = b.xor(acc, mul(y, mx))
    return b.xor(acc, mul(mx, my))


def _masked_g16_inv(b: DataflowBuilder, g: Operand, m: Operand,
                    m4b: Operand, m2: Operand) -> Tuple[Operand, Operand, Operand, Operand]:
    """Masked GF(2^4) inversion: input g^m, output inverse^m4b."""
    def mul4(u, v):
        return b.leaf(OpKind.G4_MUL, u, v)

    with b.call(SboxFunction.G16_INV):
        c = b.leaf(OpKind.G4_SCL_N, b.leaf(OpKind.G4_SQ, b.xor(g.hi, g.lo)))
        k = b.leaf(OpKind.G4_SCL_N, b.leaf(OpKind.G4_SQ, b.xor(m.hi, m.lo)))
        d = _masked_mul(b, mul4, g.hi, g.lo, m.hi, m.lo, m2)
        f = b.xor(c, d)
        km = b.xor(k, m2)
        e = b.leaf(OpKind.G4_SQ, f)
        me = b.leaf(OpKind.G4_SQ, km)
        p = _masked_mul(b, mul4, e, g.lo, me, m.lo, m4b.hi)
        q = _masked_mul(b, mul4, e, g.hi, me, m.hi, m4b.lo)
        return b.concat(p, q), f, km, e


def _build_uhls() -> Dataflow:
    b = DataflowBuilder(Design.UHLS)
    p = b.input("plaintext", 8)
    k = b.input("key", 8)
    t = b.newbasis(b.xor(p, k), A2X)
    y = b.newbasis(_g256_inv(b, t), X2S)
    b.output("out", b.xor_const(y, AFFINE_CONSTANT))
    return b.build()


def _build_cng() -> Dataflow:
    b = DataflowBuilder(Design.CNG, lanes=2)
    p = b.input("plaintext", 8)
    k = b.input("key", 8)
    fk = b.input("fake_key", 8)
    t = b.newbasis(b.key_add_dual(p, k, fk), A2X)
    y = b.newbasis(_g256_inv(b, t), X2S)
    b.output("out", b.xor_const(y, AFFINE_CONSTANT))
    return b.build()


def _build_masked() -> Dataflow:
    b = DataflowBuilder(Design.MASKED)
    p = b.input("plaintext", 8)
    k = b.input("key", 8)
    m_in = b.input("m_in", 8)
    m4a = b.input("m4a", 4)
    m4b = b.input("m4b", 4)
    m2 = b.input("m2", 2)
    m = b.input("m_in_t", 8)
    m_out = b.input("m_out", 8)

    def mul16(u, v):
        return _g16_mul(b, u, v)

    xm = b.xor(b.xor(p, m_in), k)
    a = b.newbasis(xm, A2X)
    with b.call(SboxFunction.G256_INV):
        cm = _g16_sq_scl(b, b.xor(a.hi, a.lo))
        cmask = _g16_sq_scl(b, b.xor(m.hi, m.lo))
        dm = _masked_mul(b, mul16, a.hi, a.lo, m.hi, m.lo, m4a)
        gm = b.xor(cm, dm)
        m1 = b.xor(cmask, m4a)
        e, f, km, _ = _masked_g16_inv(b, gm, m1, m4b, m2)
        ph = _masked_mul(b, mul16, e, a.lo, m4b, m.lo, m.hi)
        ql = _masked_mul(b, mul16, e, a.hi, m4b, m.hi, m.lo)
        inv_m = b.concat(ph, ql)
    out = b.xor_const(b.newbasis(inv_m, X2S), AFFINE_CONSTANT)
    b.output("out", out)
    b.output("m_out", m_out)

    b.tap(xm, m_in)
    b.tap(a, m)
    b.tap(dm, m4a)
    b.tap(gm, m1)
    b.tap(f, km)
    b.tap(e, m4b)
    b.tap(inv_m, m)
    b.tap(out, m_out)
    return b.build()


_BUILDERS = {
    Design.UHLS: _build_uhls,
    Design.CNG: _build_cng,
    Design.MASKED: _build_masked,
}


@lru_cache(maxsize=None)
def build_dataflow(design: Design) -> Dataflow:
    """Dataflow graph of a design; built once per process."""
    dataflow = _BUILDERS[Design(design)]()
    logger.debug(f"Built {Design(design).value} dataflow: {len(dataflow)} nodes")
    return dataflow


def remask_taps(design: Design) -> Tuple[GlitchTap, ...]:
    """(masked value, matching mask) pairs recombined by the glitch model."""
    return build_dataflow(design).taps


# ============================================
# Public model API
# ============================================

def enumerate_intermediates(design: Design) -> List[IntermediateDescriptor]:
    """One descriptor per node, ids dense and in evaluation order."""
    dataflow = build_dataflow(design)
    per_function: Dict[SboxFunction, int] = {}
    descriptors = []
    for op in dataflow.ops:
        index = per_function.get(op.function, 0)
        per_function[op.function] = index + 1
        width = 16 if dataflow.lanes == 2 else op.width
        descriptors.append(IntermediateDescriptor(op.id, op.function, index, width, op.kind, op.call))
    return descriptors


def design_inputs(design: Design, plaintext, key, fake_key=0,
                  masks: Optional[MaskSet] = None) -> Dict[str, object]:
    """Port values for one evaluation (ints or equal-length uint16 arrays)."""
    design = Design(design)
    inputs = {"plaintext": _word(plaintext), "key": _word(key)}
    if design == Design.CNG:
        inputs["fake_key"] = _word(fake_key)
    elif design == Design.MASKED:
        masks = masks if masks is not None else MaskSet.zero()
        for name, value in masks.to_dict().items():
            inputs[name] = _word(value)
    return inputs


def decode_outputs(design: Design, inputs: Dict[str, object], outputs: Dict[str, object]):
    """
    Turn raw output ports into the design's result.

    UHLS: the S-box byte. CNG: CngOutput, with the alarm recomputed from the
    port values of plaintext and fake key. Masked: (masked_out, m_out).
    """
    design = Design(design)
    if design == Design.UHLS:
        return outputs["out"]
    if design == Design.CNG:
        word = outputs["out"]
        fake_out = (word >> LANE_BITS) & 0xFF
        golden = reference_sbox(inputs["plaintext"] ^ inputs["fake_key"])
        alarm = fake_out != golden
        if not isinstance(alarm, np.ndarray):
            alarm = bool(alarm)
        return CngOutput(true_out=word & 0xFF, fake_out=fake_out, alarm=alarm)
    return outputs["out"], outputs["m_out"]


def true_output(design: Design, result):
    """The unprotected S-box value carried by a decoded result."""
    design = Design(design)
    if design == Design.CNG:
        return result.true_out
    if design == Design.MASKED:
        return remove_mask(*result)
    return result


def _word(value):
    if isinstance(value, np.ndarray):
        return value.astype(np.uint16)
    return int(value)


def _run(design: Design, inputs: Dict[str, object], recorder: Optional[Recorder]):
    dataflow = build_dataflow(design)
    env = dataflow.evaluate(inputs, recorder)
    return decode_outputs(design, inputs, dataflow.output_values(env))


def sbox_unprotected(plaintext, key, recorder: Optional[Recorder] = None):
    """S(plaintext ^ key) through the compact tower-field datapath."""
    return _run(Design.UHLS, design_inputs(Design.UHLS, plaintext, key), recorder)


def sbox_cng(plaintext, key, fake_key, recorder: Optional[Recorder] = None) -> CngOutput:
    """True and decoy S-box computed in lockstep on one 16-bit datapath."""
    return _run(Design.CNG, design_inputs(Design.CNG, plaintext, key, fake_key), recorder)


def sbox_masked(plaintext, key, masks: MaskSet, recorder: Optional[Recorder] = None):
    """Masked S-box; returns (masked_out, m_out)."""
    return _run(Design.MASKED, design_inputs(Design.MASKED, plaintext, key, masks=masks), recorder)


def remove_mask(masked_out, m_out):
    return masked_out ^ m_out
