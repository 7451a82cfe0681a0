"""
Scheduler

Maps a design's dataflow onto clock cycles and registers under three
profiles and executes the result cycle by cycle.

Profiles:
- Rolled: ASAP waves, one wave per cycle, every node registered, registers
  shared by left-edge allocation, each basis change a loop of 8 iterations
  driven by a one-hot FSM and a one-hot loop counter.
- Unrolled: one combinational compute cycle (all nodes are nets), only the
  I/O registers exist.
- Modular: function bodies stay separate and run one after another; basis
  arrays are read through a memory-read register that is prefetched one
  cycle ahead of each basis-change loop.

Cycle semantics: fault flips are XORed into registers at the start of a
cycle, operations read start-of-cycle registers or same-cycle nets, and
register writes land at the end of the cycle. An invalid FSM or loop
counter encoding stalls the controller; a stalled run ends Hung at the
watchdog.
"""

import logging
from dataclasses import dataclass, field
from enum import Enum
from functools import lru_cache
from typing import Dict, List, Optional, Sequence, Tuple, Union

import numpy as np

from ..models.schemas import Design, Profile, ScheduleSummary
from .sbox_models import (
    DESIGN_INPUTS, LANE_BITS, Dataflow, OpKind, Operand,
    build_dataflow, decode_outputs,
)

logger = logging.getLogger(__name__)

LOOP_ITERATIONS = 8
DEFAULT_WATCHDOG_FACTOR = 4

# flips: cycle -> register id -> xor mask (int, or per-element array for data registers)
FlipPlan = Dict[int, Dict[int, Union[int, np.ndarray]]]


class ScheduleError(ValueError):
    """Unknown design/profile or an invalid execution request"""


class RegisterKind(str, Enum):
    DATA = "data"
    CONTROL = "control"
    MEMORY_READ = "memory_read"


class SliceRole(str, Enum):
    """Which CNG computation a register bit belongs to"""
    SINGLE = "single"
    SHARED = "shared"
    TRUE = "true"
    FAKE = "fake"
    SPLIT = "split"


class StateKind(str, Enum):
    COMPUTE = "compute"
    PREFETCH = "prefetch"
    LOOP = "loop"
    DONE = "done"


class MicroOpKind(str, Enum):
    OP = "op"
    NB_STEP = "nb_step"
    MEM_PREFETCH = "mem_prefetch"
    MEM_NEXT = "mem_next"


class ExecutionStatus(str, Enum):
    COMPLETED = "Completed"
    HUNG = "Hung"


# ============================================
# Schedule structure
# ============================================

@dataclass(frozen=True)
class RegisterSpec:
    """
    One register of the register file.

    SPLIT registers hold a lane-packed CNG word; bits [0, lane_width) are the
    true lane and the rest the fake lane.
    """
    id: int
    name: str
    width: int
    kind: RegisterKind
    role: SliceRole = SliceRole.SINGLE
    lane_width: int = 0

    def bit_role(self, bit: int) -> SliceRole:
        if self.role != SliceRole.SPLIT:
            return self.role
        return SliceRole.TRUE if bit < self.lane_width else SliceRole.FAKE

    def flip_mask(self, bit: int) -> int:
        """XOR mask that flips flip-flop `bit` of this register."""
        if not 0 <= bit < self.width:
            raise ScheduleError(f"Bit {bit} outside register {self.name} ({self.width} bits)")
        if self.role == SliceRole.SPLIT and bit >= self.lane_width:
            return 1 << (LANE_BITS + bit - self.lane_width)
        return 1 << bit

    def to_dict(self) -> dict:
        return {
            "id": self.id,
            "name": self.name,
            "width": self.width,
            "kind": self.kind.value,
            "role": self.role.value,
        }


@dataclass(frozen=True)
class MicroOp:
    """
    One register transfer.

    For NB_STEP `iteration` is the loop iteration; for memory reads it is the
    basis array row being fetched.
    """
    kind: MicroOpKind
    node: int
    dest: Optional[int]
    iteration: Optional[int] = None


@dataclass(frozen=True)
class State:
    index: int
    kind: StateKind
    nodes: Tuple[int, ...]
    program: Tuple[Tuple[MicroOp, ...], ...] = ()

    @property
    def cycles(self) -> int:
        return LOOP_ITERATIONS if self.kind == StateKind.LOOP else 1


@dataclass(frozen=True)
class RegisterWrite:
    cycle: int
    register: int
    node: Optional[int]
    old: Union[int, np.ndarray]
    new: Union[int, np.ndarray]


@dataclass(eq=False)
class Schedule:
    """Immutable after build_schedule"""
    design: Design
    profile: Profile
    dataflow: Dataflow
    registers: Tuple[RegisterSpec, ...]
    states: Tuple[State, ...]
    binding: Dict[int, Optional[int]]
    input_registers: Dict[str, int]
    fsm_register: int
    loop_register: Optional[int]
    mem_register: Optional[int]
    node_cycle: Dict[int, int]

    @property
    def nominal_latency(self) -> int:
        return sum(s.cycles for s in self.states)

    @property
    def default_watchdog(self) -> int:
        return DEFAULT_WATCHDOG_FACTOR * self.nominal_latency

    @property
    def register_bits(self) -> int:
        return sum(r.width for r in self.registers)

    @property
    def control_registers(self) -> Tuple[int, ...]:
        return tuple(r.id for r in self.registers if r.kind == RegisterKind.CONTROL)

    def register(self, name: str) -> RegisterSpec:
        for reg in self.registers:
            if reg.name == name:
                return reg
        raise KeyError(name)

    def timeline(self) -> List[Tuple[int, int, Tuple[MicroOp, ...]]]:
        """(cycle, state index, micro-ops) along the fault-free path."""
        rows = []
        cycle = 0
        for state in self.states:
            for iteration in range(state.cycles):
                program = state.program[iteration] if state.program else ()
                rows.append((cycle, state.index, program))
                cycle += 1
        return rows

    def summary(self) -> ScheduleSummary:
        by_kind: Dict[str, int] = {kind.value: 0 for kind in RegisterKind}
        for reg in self.registers:
            by_kind[reg.kind.value] += reg.width
        return ScheduleSummary(
            design=self.design,
            profile=self.profile,
            nominal_latency=self.nominal_latency,
            registers=len(self.registers),
            flip_flops=self.register_bits,
            flip_flops_by_kind=by_kind,
            intermediates=len(self.dataflow),
        )

    def to_dict(self) -> dict:
        """JSON-ready dump of the register file and cycle table."""
        names = {r.id: r.name for r in self.registers}
        return {
            "design": self.design.value,
            "profile": self.profile.value,
            "nominal_latency": self.nominal_latency,
            "registers": [r.to_dict() for r in self.registers],
            "states": [
                {"index": s.index, "kind": s.kind.value, "cycles": s.cycles, "nodes": list(s.nodes)}
                for s in self.states
            ],
            "binding": {
                str(node): (names[reg] if reg is not None else None)
                for node, reg in sorted(self.binding.items())
            },
            "cycles": [
                {
                    "cycle": cycle,
                    "state": state,
                    "ops": [self._micro_op_dict(u, names) for u in program],
                }
                for cycle, state, program in self.timeline()
            ],
        }

    def _micro_op_dict(self, uop: MicroOp, names: Dict[int, str]) -> dict:
        op = self.dataflow.ops[uop.node]
        sources = []
        for operand in op.operands:
            if operand.is_input:
                sources.append(names[self.input_registers[operand.source]])
            else:
                reg = self.binding[operand.source]
                sources.append(names[reg] if reg is not None else f"net{operand.source}")
        if uop.kind in (MicroOpKind.MEM_PREFETCH, MicroOpKind.MEM_NEXT):
            sources = []
        elif uop.kind == MicroOpKind.NB_STEP and self.mem_register is not None:
            sources.append(names[self.mem_register])
        return {
            "kind": uop.kind.value,
            "node": uop.node,
            "function": op.function.value,
            "dest": names[uop.dest] if uop.dest is not None else None,
            "sources": sources,
            "iteration": uop.iteration,
        }


# ============================================
# Building
# ============================================

def _wave_states(dataflow: Dataflow, nodes: Sequence[int], prefetch: bool) -> List[Tuple[StateKind, Tuple[int, ...]]]:
    """ASAP waves over `nodes`; basis changes become (prefetch +) loop states."""
    levels: Dict[int, int] = {}
    for node in nodes:
        level = 0
        for src in dataflow.ops[node].node_sources:
            if src in levels:
                level = max(level, levels[src] + 1)
        levels[node] = level

    states = []
    for level in sorted(set(levels.values())):
        wave = [n for n in nodes if levels[n] == level]
        compute = tuple(n for n in wave if dataflow.ops[n].kind != OpKind.NEWBASIS)
        if compute:
            states.append((StateKind.COMPUTE, compute))
        for n in wave:
            if dataflow.ops[n].kind == OpKind.NEWBASIS:
                if prefetch:
                    states.append((StateKind.PREFETCH, (n,)))
                states.append((StateKind.LOOP, (n,)))
    return states


def _call_runs(dataflow: Dataflow) -> List[List[int]]:
    """Maximal runs of consecutive nodes that belong to the same call."""
    runs: List[List[int]] = []
    for op in dataflow.ops:
        if runs and dataflow.ops[runs[-1][-1]].call == op.call:
            runs[-1].append(op.id)
        else:
            runs.append([op.id])
    return runs


def _state_plan(dataflow: Dataflow, profile: Profile) -> List[Tuple[StateKind, Tuple[int, ...]]]:
    all_nodes = [op.id for op in dataflow.ops]
    if profile == Profile.UNROLLED:
        plan = [(StateKind.COMPUTE, tuple(all_nodes))]
    elif profile == Profile.ROLLED:
        plan = _wave_states(dataflow, all_nodes, prefetch=False)
    else:
        plan = []
        for run in _call_runs(dataflow):
            plan.extend(_wave_states(dataflow, run, prefetch=True))
    plan.append((StateKind.DONE, ()))
    return plan


def _lifetimes(dataflow: Dataflow, plan) -> Tuple[Dict[int, int], Dict[int, int], Dict[int, int]]:
    """First write, final write and last read cycle of every node."""
    first: Dict[int, int] = {}
    final: Dict[int, int] = {}
    last_use: Dict[int, int] = {}
    cycle = 0
    for kind, nodes in plan:
        span = LOOP_ITERATIONS if kind == StateKind.LOOP else 1
        if kind in (StateKind.COMPUTE, StateKind.LOOP):
            for node in nodes:
                first[node] = cycle
                final[node] = cycle + span - 1
                for src in dataflow.ops[node].node_sources:
                    last_use[src] = max(last_use.get(src, 0), cycle + span - 1)
        elif kind == StateKind.DONE:
            for operand in dataflow.outputs.values():
                if not operand.is_input:
                    last_use[operand.source] = cycle
        cycle += span
    for node in first:
        last_use.setdefault(node, final[node])
    return first, final, last_use


def _slice_role(design: Design, name: str) -> SliceRole:
    if design != Design.CNG:
        return SliceRole.SINGLE
    return {"plaintext": SliceRole.SHARED, "key": SliceRole.TRUE, "fake_key": SliceRole.FAKE}[name]


@lru_cache(maxsize=None)
def _build(design: Design, profile: Profile) -> Schedule:
    dataflow = build_dataflow(design)
    plan = _state_plan(dataflow, profile)
    first, final, last_use = _lifetimes(dataflow, plan)
    split = dataflow.lanes > 1

    registers: List[RegisterSpec] = []

    def add(name, width, kind, role=SliceRole.SINGLE, lane_width=0) -> int:
        registers.append(RegisterSpec(len(registers), name, width, kind, role, lane_width))
        return len(registers) - 1

    input_registers = {
        name: add(name, dataflow.inputs[name], RegisterKind.DATA, _slice_role(design, name))
        for name in DESIGN_INPUTS[design]
    }
    data_role = SliceRole.SPLIT if split else SliceRole.SINGLE
    shared_role = SliceRole.SHARED if split else SliceRole.SINGLE
    fsm = add("fsm", len(plan), RegisterKind.CONTROL, shared_role)
    has_loop = any(kind == StateKind.LOOP for kind, _ in plan)
    loop = add("loop", LOOP_ITERATIONS, RegisterKind.CONTROL, shared_role) if has_loop else None
    mem = None
    if profile == Profile.MODULAR:
        # one basis-array read port feeds every lane
        mem = add("mem_rd", LANE_BITS, RegisterKind.MEMORY_READ, shared_role)

    out_node = dataflow.outputs["out"].source
    out_width = dataflow.ops[out_node].width
    binding: Dict[int, Optional[int]] = {op.id: None for op in dataflow.ops}
    binding[out_node] = add("out", dataflow.storage_width(out_width), RegisterKind.DATA, data_role, out_width)

    if profile != Profile.UNROLLED:
        # left-edge allocation per width: reuse once the previous occupant's last read is done
        busy_until: Dict[int, int] = {}
        order = sorted((n for n in first if n != out_node), key=lambda n: (first[n], n))
        for node in order:
            width = dataflow.ops[node].width
            free = [
                rid for rid, until in sorted(busy_until.items())
                if registers[rid].lane_width == width and until <= first[node]
            ]
            if free:
                rid = free[0]
            else:
                count = sum(1 for r in registers if r.name.startswith(f"r{width}_"))
                rid = add(f"r{width}_{count}", dataflow.storage_width(width), RegisterKind.DATA, data_role, width)
            busy_until[rid] = last_use[node]
            binding[node] = rid

    states = []
    for index, (kind, nodes) in enumerate(plan):
        states.append(State(index, kind, nodes, _program(kind, nodes, binding, mem)))

    node_cycle = {}
    for node in first:
        node_cycle[node] = final[node]

    schedule = Schedule(
        design=design,
        profile=profile,
        dataflow=dataflow,
        registers=tuple(registers),
        states=tuple(states),
        binding=binding,
        input_registers=input_registers,
        fsm_register=fsm,
        loop_register=loop,
        mem_register=mem,
        node_cycle=node_cycle,
    )
    logger.debug(
        f"Scheduled {design.value}/{profile.value}: latency {schedule.nominal_latency}, "
        f"{len(registers)} registers, {schedule.register_bits} flip-flops"
    )
    return schedule


def _program(kind: StateKind, nodes: Tuple[int, ...], binding, mem) -> Tuple[Tuple[MicroOp, ...], ...]:
    if kind == StateKind.COMPUTE:
        return (tuple(MicroOp(MicroOpKind.OP, n, binding[n]) for n in nodes),)
    if kind == StateKind.PREFETCH:
        return ((MicroOp(MicroOpKind.MEM_PREFETCH, nodes[0], mem, 0),),)
    if kind == StateKind.LOOP:
        node = nodes[0]
        program = []
        for i in range(LOOP_ITERATIONS):
            step = [MicroOp(MicroOpKind.NB_STEP, node, binding[node], i)]
            if mem is not None and i + 1 < LOOP_ITERATIONS:
                step.append(MicroOp(MicroOpKind.MEM_NEXT, node, mem, i + 1))
            program.append(tuple(step))
        return tuple(program)
    return ((),)


def build_schedule(design: Design, profile: Profile) -> Schedule:
    """Deterministic schedule of a design under a profile (cached per process)."""
    try:
        design = Design(design)
        profile = Profile(profile)
    except ValueError as e:
        raise ScheduleError(f"Unknown design/profile combination: {design}/{profile}") from e
    return _build(design, profile)


# ============================================
# Execution
# ============================================

@dataclass
class ExecutionTrace:
    status: ExecutionStatus
    cycles_used: int
    outputs: Optional[Dict[str, object]] = None
    result: object = None
    writes: List[RegisterWrite] = field(default_factory=list)
    values: Dict[int, object] = field(default_factory=dict)
    snapshots: List[Tuple[object, ...]] = field(default_factory=list)

    @property
    def completed(self) -> bool:
        return self.status == ExecutionStatus.COMPLETED


def _one_hot_index(value, width: int) -> Optional[int]:
    value = int(value)
    if value <= 0 or value & (value - 1) or value >= (1 << width):
        return None
    return value.bit_length() - 1


def normalize_flips(schedule: Schedule, faults) -> FlipPlan:
    """Accept a FlipPlan or any object exposing to_flips(schedule)."""
    if faults is None:
        return {}
    if hasattr(faults, "to_flips"):
        faults = faults.to_flips(schedule)
    control = set(schedule.control_registers)
    plan: FlipPlan = {}
    for cycle, per_register in faults.items():
        for rid, mask in per_register.items():
            if rid in control and isinstance(mask, np.ndarray):
                raise ScheduleError(f"Control register {schedule.registers[rid].name} takes scalar flips only")
            plan.setdefault(int(cycle), {})[int(rid)] = mask
    return plan


class Machine:
    """
    Cycle-accurate interpreter of a Schedule.

    Register values are ints or equal-length numpy arrays (one element per
    parallel evaluation); control registers are always ints.
    """

    def __init__(self, schedule: Schedule, inputs: Dict[str, object],
                 flips: Optional[FlipPlan] = None, record: bool = True, snapshots: bool = False):
        self.schedule = schedule
        self.inputs = dict(inputs)
        self.flips: FlipPlan = flips or {}
        self.record = record
        self.keep_snapshots = snapshots
        self.regs: List[object] = [0] * len(schedule.registers)
        for name, rid in schedule.input_registers.items():
            self.regs[rid] = inputs[name]
        self.regs[schedule.fsm_register] = 1
        if schedule.loop_register is not None:
            self.regs[schedule.loop_register] = 1
        self.cycle = 0
        self.trace = ExecutionTrace(status=ExecutionStatus.HUNG, cycles_used=0)
        self.done = False

    def fork(self, flips: Optional[FlipPlan] = None, indices: Optional[np.ndarray] = None,
             record: bool = False) -> "Machine":
        """Copy of the current machine state, optionally restricted to some elements."""
        other = Machine.__new__(Machine)
        other.schedule = self.schedule
        other.inputs = {k: _take(v, indices) for k, v in self.inputs.items()}
        other.flips = flips if flips is not None else dict(self.flips)
        other.record = record
        other.keep_snapshots = False
        other.regs = [_take(v, indices) for v in self.regs]
        other.cycle = self.cycle
        other.trace = ExecutionTrace(status=ExecutionStatus.HUNG, cycles_used=0)
        other.done = self.done
        return other

    def _read(self, operand: Operand, nets: Dict[int, object]):
        src = operand.source
        if isinstance(src, str):
            raw = self.regs[self.schedule.input_registers[src]]
        elif src in nets:
            raw = nets[src]
        else:
            raw = self.regs[self.schedule.binding[src]]
        return self.schedule.dataflow.read(operand, raw)

    def step(self) -> bool:
        """Run one clock cycle; returns False when the controller stalled."""
        sched = self.schedule
        dataflow = sched.dataflow
        cycle = self.cycle
        for rid, mask in self.flips.get(cycle, {}).items():
            self.regs[rid] = self.regs[rid] ^ mask

        state_index = _one_hot_index(self.regs[sched.fsm_register], len(sched.states))
        if state_index is None:
            return self._stall()
        state = sched.states[state_index]

        if state.kind == StateKind.DONE:
            outputs = {}
            for name, operand in dataflow.outputs.items():
                outputs[name] = self._read(operand, {})
            self.trace.outputs = outputs
            self.trace.result = decode_outputs(sched.design, self.inputs, outputs)
            self.trace.status = ExecutionStatus.COMPLETED
            self.cycle += 1
            self.trace.cycles_used = self.cycle
            self.done = True
            self._snapshot()
            return True

        iteration = 0
        if state.kind == StateKind.LOOP:
            iteration = _one_hot_index(self.regs[sched.loop_register], LOOP_ITERATIONS)
            if iteration is None:
                return self._stall()

        nets: Dict[int, object] = {}
        pending: List[Tuple[int, Optional[int], object]] = []
        for uop in state.program[iteration]:
            op = dataflow.ops[uop.node]
            if uop.kind == MicroOpKind.OP:
                value = dataflow.apply(op, [self._read(o, nets) for o in op.operands])
                if uop.dest is None:
                    nets[uop.node] = value
                    if self.record:
                        self.trace.values[uop.node] = value
                else:
                    pending.append((uop.dest, uop.node, value))
            elif uop.kind == MicroOpKind.NB_STEP:
                x = self._read(op.operands[0], nets)
                acc = 0 if uop.iteration == 0 else self.regs[uop.dest]
                if sched.mem_register is not None:
                    column = dataflow.replicate(self.regs[sched.mem_register])
                else:
                    column = dataflow.column_word(op, uop.iteration)
                pending.append((uop.dest, uop.node, dataflow.newbasis_step(op, x, acc, uop.iteration, column)))
            else:
                pending.append((uop.dest, None, op.matrix.column(uop.iteration)))

        # controller
        if state.kind == StateKind.LOOP and iteration + 1 < LOOP_ITERATIONS:
            pending.append((sched.loop_register, None, 1 << (iteration + 1)))
        else:
            if state.kind == StateKind.LOOP:
                pending.append((sched.loop_register, None, 1))
            pending.append((sched.fsm_register, None, 1 << (state_index + 1)))

        for rid, node, value in pending:
            old = self.regs[rid]
            self.regs[rid] = value
            if self.record:
                self.trace.writes.append(RegisterWrite(cycle, rid, node, old, value))
                if node is not None:
                    self.trace.values[node] = value
        self.cycle += 1
        self._snapshot()
        return True

    def _stall(self) -> bool:
        self.cycle += 1
        self._snapshot()
        return False

    def _snapshot(self) -> None:
        if self.keep_snapshots:
            self.trace.snapshots.append(tuple(self.regs))

    def run(self, watchdog: Optional[int] = None) -> ExecutionTrace:
        watchdog = watchdog if watchdog is not None else self.schedule.default_watchdog
        while not self.done and self.cycle < watchdog:
            progressed = self.step()
            if not progressed and not self.keep_snapshots and not any(c >= self.cycle for c in self.flips):
                # permanent stall: nothing can change the controller any more
                self.cycle = watchdog
        if not self.done:
            self.trace.status = ExecutionStatus.HUNG
            self.trace.cycles_used = watchdog
        return self.trace


def _take(value, indices):
    if indices is not None and isinstance(value, np.ndarray):
        return value[indices]
    return value


def execute(schedule: Schedule, inputs: Dict[str, object], faults=None,
            watchdog: Optional[int] = None, record: bool = True, snapshots: bool = False) -> ExecutionTrace:
    """
    Run a schedule on design inputs (see sbox_models.design_inputs).

    faults is a FlipPlan or an object with to_flips(schedule), such as
    fi_engine.FaultSpec. Hung is reported through the trace status.
    """
    watchdog = watchdog if watchdog is not None else schedule.default_watchdog
    if watchdog < schedule.nominal_latency:
        raise ScheduleError(f"Watchdog {watchdog} below nominal latency {schedule.nominal_latency}")
    machine = Machine(schedule, inputs, normalize_flips(schedule, faults), record=record, snapshots=snapshots)
    return machine.run(watchdog)
