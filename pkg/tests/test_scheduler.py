"""
Tests for the HLS Schedule Model

Schedules of every design under every profile, cycle-accurate execution
and fault hooks.
"""

import json

import numpy as np
import pytest

from sboxlab.models.schemas import Design, Profile
from sboxlab.services.sbox_models import MaskSet, design_inputs, enumerate_intermediates, true_output
from sboxlab.services.scheduler import (
    LOOP_ITERATIONS, ExecutionStatus, Machine, RegisterKind, ScheduleError, SliceRole,
    StateKind, build_schedule, execute,
)

from .test_gf_tower import aes_sbox

AES_SBOX = np.array([aes_sbox(x) for x in range(256)], dtype=np.uint16)
CELLS = [(d, p) for d in Design for p in Profile]


def batch_inputs(design: Design):
    plaintexts = np.tile(np.arange(256, dtype=np.uint16), 16)
    keys = np.repeat(np.arange(0, 256, 16, dtype=np.uint16), 256)
    rng = np.random.default_rng(7)
    n = len(plaintexts)
    masks = MaskSet.derive(
        rng.integers(0, 256, n).astype(np.uint16), rng.integers(0, 16, n).astype(np.uint16),
        rng.integers(0, 16, n).astype(np.uint16), rng.integers(0, 4, n).astype(np.uint16),
    )
    fake_keys = (plaintexts * 3 + 1) & 0xFF
    inputs = design_inputs(design, plaintexts, keys, fake_keys, masks)
    return inputs, AES_SBOX[plaintexts ^ keys]


class TestScheduledExecution:
    """Test fault-free execution of every schedule"""

    @pytest.mark.parametrize("design,profile", CELLS)
    def test_matches_sbox(self, design, profile):
        """Test 256 inputs x 16 keys produce the AES S-box"""
        schedule = build_schedule(design, profile)
        inputs, expected = batch_inputs(design)
        trace = execute(schedule, inputs, record=False)

        assert trace.status == ExecutionStatus.COMPLETED
        assert trace.cycles_used == schedule.nominal_latency
        assert np.array_equal(true_output(design, trace.result), expected)

    @pytest.mark.parametrize("design,profile", CELLS)
    def test_every_intermediate_is_observed(self, design, profile):
        """Test every node value is visible in registers or nets"""
        schedule = build_schedule(design, profile)
        trace = execute(schedule, design_inputs(design, 0x42, 0x2B, fake_key=0x17))
        assert sorted(trace.values) == [d.id for d in enumerate_intermediates(design)]

    def test_cng_alarm_is_quiet(self):
        """Test fault-free CNG never raises the alarm"""
        inputs, _ = batch_inputs(Design.CNG)
        trace = execute(build_schedule(Design.CNG, Profile.ROLLED), inputs, record=False)
        assert not np.any(trace.result.alarm)

    def test_snapshots_per_cycle(self):
        """Test one register-file snapshot per cycle"""
        schedule = build_schedule(Design.UHLS, Profile.ROLLED)
        trace = execute(schedule, design_inputs(Design.UHLS, 1, 2), snapshots=True)
        assert len(trace.snapshots) == schedule.nominal_latency
        assert len(trace.snapshots[0]) == len(schedule.registers)


class TestScheduleStructure:
    """Test latency, registers and state plans"""

    def test_unrolled_has_only_io_registers(self):
        """Test the unrolled schedule runs in one compute cycle plus done"""
        schedule = build_schedule(Design.UHLS, Profile.UNROLLED)
        assert schedule.nominal_latency == 2
        assert [s.kind for s in schedule.states] == [StateKind.COMPUTE, StateKind.DONE]
        assert schedule.loop_register is None
        assert {r.name for r in schedule.registers} == {"plaintext", "key", "fsm", "out"}
        assert schedule.register_bits == 26

    @pytest.mark.parametrize("design", list(Design))
    def test_latency_ordering(self, design):
        """Test unrolled is fastest and modular slowest"""
        rolled = build_schedule(design, Profile.ROLLED).nominal_latency
        unrolled = build_schedule(design, Profile.UNROLLED).nominal_latency
        modular = build_schedule(design, Profile.MODULAR).nominal_latency
        assert unrolled < rolled < modular

    def test_rolled_loops_for_basis_changes(self):
        """Test each basis change runs as an 8-iteration loop state"""
        schedule = build_schedule(Design.UHLS, Profile.ROLLED)
        loops = [s for s in schedule.states if s.kind == StateKind.LOOP]
        assert len(loops) == 2
        assert all(s.cycles == LOOP_ITERATIONS for s in loops)
        assert schedule.register("loop").width == LOOP_ITERATIONS

    def test_modular_memory_register(self):
        """Test the modular profile prefetches basis rows into a memory register"""
        schedule = build_schedule(Design.UHLS, Profile.MODULAR)
        kinds = [s.kind for s in schedule.states]
        assert schedule.mem_register is not None
        assert schedule.registers[schedule.mem_register].kind == RegisterKind.MEMORY_READ
        for i, kind in enumerate(kinds):
            if kind == StateKind.LOOP:
                assert kinds[i - 1] == StateKind.PREFETCH

    def test_cng_memory_register_is_shared(self):
        """Test both CNG lanes read basis rows through one shared byte-wide port"""
        schedule = build_schedule(Design.CNG, Profile.MODULAR)
        mem = schedule.registers[schedule.mem_register]
        assert mem.role == SliceRole.SHARED
        assert mem.width == 8
        assert all(mem.bit_role(bit) == SliceRole.SHARED for bit in range(mem.width))

    def test_fsm_is_one_hot(self):
        """Test the FSM register has one bit per state"""
        for design, profile in CELLS:
            schedule = build_schedule(design, profile)
            assert schedule.registers[schedule.fsm_register].width == len(schedule.states)
            assert schedule.states[-1].kind == StateKind.DONE

    def test_cng_slice_roles(self):
        """Test the CNG register file is tagged shared/true/fake/split"""
        schedule = build_schedule(Design.CNG, Profile.ROLLED)
        assert schedule.register("plaintext").role == SliceRole.SHARED
        assert schedule.register("key").role == SliceRole.TRUE
        assert schedule.register("fake_key").role == SliceRole.FAKE
        assert schedule.register("fsm").role == SliceRole.SHARED
        out = schedule.register("out")
        assert out.role == SliceRole.SPLIT
        assert out.width == 16
        assert out.bit_role(0) == SliceRole.TRUE
        assert out.bit_role(15) == SliceRole.FAKE

    def test_split_flip_mask(self):
        """Test flip masks of a lane-packed register address both lanes"""
        schedule = build_schedule(Design.CNG, Profile.ROLLED)
        nibble = next(r for r in schedule.registers if r.role == SliceRole.SPLIT and r.lane_width == 4)
        assert nibble.width == 8
        assert nibble.flip_mask(3) == 1 << 3
        assert nibble.flip_mask(4) == 1 << 8
        assert nibble.flip_mask(7) == 1 << 11
        with pytest.raises(ScheduleError):
            nibble.flip_mask(8)

    def test_summary_and_dump(self):
        """Test the summary table and JSON dump"""
        schedule = build_schedule(Design.MASKED, Profile.ROLLED)
        summary = schedule.summary()
        assert summary.intermediates == 175
        assert summary.flip_flops == schedule.register_bits
        assert sum(summary.flip_flops_by_kind.values()) == summary.flip_flops
        dump = json.loads(json.dumps(schedule.to_dict()))
        assert dump["nominal_latency"] == schedule.nominal_latency
        assert len(dump["cycles"]) == schedule.nominal_latency

    def test_build_is_deterministic(self):
        """Test repeated builds give the same schedule"""
        a = build_schedule(Design.CNG, Profile.MODULAR).to_dict()
        b = build_schedule("CNG", "Modular").to_dict()
        assert a == b

    def test_unknown_profile(self):
        """Test unknown designs or profiles are rejected"""
        with pytest.raises(ScheduleError):
            build_schedule(Design.UHLS, "Pipelined")
        with pytest.raises(ScheduleError):
            build_schedule("AES", Profile.ROLLED)


class TestFaultHooks:
    """Test flips applied during execution"""

    def setup_method(self):
        self.schedule = build_schedule(Design.UHLS, Profile.UNROLLED)
        self.inputs = design_inputs(Design.UHLS, 0x53, 0x00)

    def test_data_flip_corrupts_output(self):
        """Test a plaintext flip before the compute cycle changes the output"""
        pid = self.schedule.input_registers["plaintext"]
        trace = execute(self.schedule, self.inputs, faults={0: {pid: 0x01}})
        assert trace.completed
        assert trace.result == aes_sbox(0x52)

    def test_output_flip_after_write(self):
        """Test a flip of the output register before done is visible"""
        out = self.schedule.register("out").id
        trace = execute(self.schedule, self.inputs, faults={1: {out: 0x80}})
        assert trace.result == 0xED ^ 0x80

    def test_overwritten_flip_is_silent(self):
        """Test a flip of the output register before it is written is masked"""
        out = self.schedule.register("out").id
        trace = execute(self.schedule, self.inputs, faults={0: {out: 0xFF}})
        assert trace.result == 0xED

    def test_fsm_flip_hangs(self):
        """Test an invalid FSM encoding ends at the watchdog"""
        fsm = self.schedule.fsm_register
        trace = execute(self.schedule, self.inputs, faults={0: {fsm: 0b10}})
        assert trace.status == ExecutionStatus.HUNG
        assert trace.cycles_used == self.schedule.default_watchdog

    def test_loop_counter_flip_hangs(self):
        """Test a corrupted loop counter stalls the rolled schedule"""
        schedule = build_schedule(Design.UHLS, Profile.ROLLED)
        first_loop_cycle = next(c for c, s, _ in schedule.timeline() if schedule.states[s].kind == StateKind.LOOP)
        trace = execute(schedule, self.inputs, faults={first_loop_cycle: {schedule.loop_register: 0b10}})
        assert not trace.completed

    def test_array_flip_on_control_rejected(self):
        """Test control registers take scalar flips only"""
        with pytest.raises(ScheduleError):
            execute(self.schedule, self.inputs, faults={0: {self.schedule.fsm_register: np.array([1])}})

    def test_watchdog_below_latency(self):
        """Test a watchdog shorter than the schedule is rejected"""
        schedule = build_schedule(Design.UHLS, Profile.ROLLED)
        with pytest.raises(ScheduleError):
            execute(schedule, self.inputs, watchdog=schedule.nominal_latency - 1)

    def test_fork_matches_fresh_run(self):
        """Test forking a machine mid-run gives the same result"""
        schedule = build_schedule(Design.UHLS, Profile.ROLLED)
        machine = Machine(schedule, design_inputs(Design.UHLS, np.arange(4, dtype=np.uint16), 0x2B), record=False)
        for _ in range(5):
            machine.step()
        forked = machine.fork(indices=np.array([2, 3])).run()
        assert forked.completed
        assert list(forked.result) == [aes_sbox(2 ^ 0x2B), aes_sbox(3 ^ 0x2B)]
