"""
Tests for the Fault Injection Engine

Sample sizing, classification and the SBF/MBF campaign properties of the
three designs.
"""

import math

import numpy as np
import pytest
from scipy.stats import norm

from sboxlab.models.schemas import Design, FaultClass, Profile
from sboxlab.services.fi_engine import (
    CLASS_ORDER, FaultSpec, MultiplicityError, SampleSizeError, classify, enumerate_fault_sites,
    inject, run_fault_matrix, run_mbf_campaign, run_sbf_campaign, sample_size, z_score,
)
from sboxlab.services.sbox_models import design_inputs
from sboxlab.services.scheduler import SliceRole, build_schedule, execute


class TestSampleSize:
    """Test statistical fault injection sizing"""

    def test_unbounded_population(self):
        """Test e = 1 %, 99 % confidence, p = 0.5"""
        assert sample_size(None, 0.01, 0.99, 0.5) == 16587

    def test_z_scores(self):
        """Test tabulated quantiles"""
        assert z_score(0.99) == 2.5758
        assert z_score(0.95) == 1.96
        assert z_score(0.90) == 1.6449

    def test_table_precision_quantile(self):
        """Test sizing uses the 4-decimal quantile rather than the exact one"""
        exact = norm.ppf(0.995)
        assert z_score(0.99) != exact
        assert math.ceil(exact ** 2 * 0.25 / 1e-4) == 16588
        assert sample_size(None, 0.01, 0.99) == math.ceil(z_score(0.99) ** 2 * 0.25 / 1e-4)

    def test_finite_population_monotone(self):
        """Test n(N) <= n(N + 1) and n(N) <= N"""
        previous = 0
        for population in list(range(1, 3000)) + [10 ** 4, 10 ** 6, 10 ** 9]:
            n = sample_size(population, 0.01, 0.99)
            assert n >= previous
            assert n <= population
            previous = n

    def test_finite_population_approaches_unbounded(self):
        """Test a huge population needs the unbounded sample size"""
        assert sample_size(10 ** 15) == sample_size(None)

    def test_desk_margin(self):
        """Test the desk-scale margin gives a quarter of the samples"""
        assert sample_size(None, 0.02) == math.ceil(2.5758 ** 2 * 0.25 / 0.0004)

    @pytest.mark.parametrize("kwargs", [
        {"e": 0.0}, {"e": 1.5}, {"confidence": 0.8}, {"p": 0.0}, {"p": 1.0},
    ])
    def test_invalid_parameters(self, kwargs):
        """Test out-of-range parameters are rejected"""
        with pytest.raises(SampleSizeError):
            sample_size(None, **kwargs)

    def test_invalid_population(self):
        """Test an empty population is rejected"""
        with pytest.raises(SampleSizeError):
            sample_size(0)


class TestFaultSites:
    """Test site enumeration and fault specs"""

    def test_site_count(self):
        """Test one site per flip-flop and cycle"""
        schedule = build_schedule(Design.UHLS, Profile.ROLLED)
        sites = enumerate_fault_sites(schedule)
        assert len(sites) == schedule.register_bits * schedule.nominal_latency
        assert sites[0].register == 0 and sites[0].bit == 0 and sites[0].cycle == 0
        assert sites[1].cycle == 1
        assert enumerate_fault_sites(schedule) == sites

    def test_rolled_has_more_sites(self):
        """Test the rolled schedule exposes more sites than the unrolled one"""
        for design in Design:
            rolled = enumerate_fault_sites(build_schedule(design, Profile.ROLLED))
            unrolled = enumerate_fault_sites(build_schedule(design, Profile.UNROLLED))
            assert len(rolled) > len(unrolled)

    def test_spec_to_flips(self):
        """Test flips of one register merge into one mask"""
        schedule = build_schedule(Design.CNG, Profile.ROLLED)
        out = schedule.register("out")
        spec = FaultSpec(((out.id, 0), (out.id, 9)), cycle=3)
        assert spec.multiplicity == 2
        assert spec.to_flips(schedule) == {3: {out.id: (1 << 0) | (1 << 9)}}

    def test_invalid_specs(self):
        """Test empty or duplicated flips are rejected"""
        with pytest.raises(ValueError):
            FaultSpec((), cycle=0)
        with pytest.raises(ValueError):
            FaultSpec(((0, 1), (0, 1)), cycle=0)


class TestClassification:
    """Test the four-way outcome classification"""

    def setup_method(self):
        self.schedule = build_schedule(Design.CNG, Profile.UNROLLED)
        self.inputs = design_inputs(Design.CNG, 0x12, 0x34, fake_key=0x56)
        self.golden = execute(self.schedule, self.inputs)

    def _classify(self, register: str, bit: int, cycle: int) -> FaultClass:
        reg = self.schedule.register(register)
        trace = execute(self.schedule, self.inputs, FaultSpec(((reg.id, bit),), cycle))
        return classify(trace, self.golden, Design.CNG)

    def test_silent(self):
        """Test a key flip after the key was consumed is silent"""
        assert self._classify("key", 0, 1) == FaultClass.SILENT

    def test_critical(self):
        """Test a true-key flip before use is critical"""
        assert self._classify("key", 0, 0) == FaultClass.CRITICAL

    def test_detected(self):
        """Test a plaintext flip corrupts both lanes and raises the alarm"""
        assert self._classify("plaintext", 0, 0) == FaultClass.DETECTED

    def test_fake_lane_detected(self):
        """Test a fake-lane output flip is detected"""
        assert self._classify("out", 12, 1) == FaultClass.DETECTED

    def test_hang(self):
        """Test an FSM flip hangs"""
        assert self._classify("fsm", 0, 0) == FaultClass.HANG

    def test_inject_outcome(self):
        """Test a single injection reports its spec and class"""
        key = self.schedule.register("key")
        spec = FaultSpec(((key.id, 3),), cycle=0)
        outcome = inject(self.schedule, self.inputs, spec)
        assert outcome.spec == spec
        assert outcome.classification == FaultClass.CRITICAL
        assert not outcome.would_be_critical

    def test_would_be_critical(self):
        """Test a detected fault that also broke the true lane is flagged"""
        plaintext = self.schedule.register("plaintext")
        outcome = inject(self.schedule, self.inputs, FaultSpec(((plaintext.id, 0),), cycle=0))
        assert outcome.classification == FaultClass.DETECTED
        assert outcome.would_be_critical


class TestSliceIsolation:
    """Test CNG faults confined to one lane"""

    @pytest.mark.parametrize("profile", list(Profile))
    def test_true_slice_flips_keep_fake_output(self, profile):
        """Test every single true-slice flip at every cycle leaves fake_out at its golden value"""
        schedule = build_schedule(Design.CNG, profile)
        sites = [
            (reg, bit) for reg in schedule.registers for bit in range(reg.width)
            if reg.bit_role(bit) == SliceRole.TRUE
        ]
        n = len(sites)
        inputs = design_inputs(
            Design.CNG, np.full(n, 0x12, dtype=np.uint16), np.full(n, 0x34, dtype=np.uint16),
            fake_key=np.full(n, 0x56, dtype=np.uint16),
        )
        golden = execute(schedule, design_inputs(Design.CNG, 0x12, 0x34, fake_key=0x56))

        for cycle in range(schedule.nominal_latency):
            masks = {}
            for s, (reg, bit) in enumerate(sites):
                mask = masks.setdefault(reg.id, np.zeros(n, dtype=np.uint16))
                mask[s] = reg.flip_mask(bit)
            trace = execute(schedule, inputs, {cycle: masks}, record=False)
            assert trace.completed
            assert np.all(trace.result.fake_out == golden.result.fake_out)
            assert not np.any(trace.result.alarm)

    def test_true_key_flip_through_inject(self):
        """Test a true-key flip is critical without touching the decoy lane"""
        schedule = build_schedule(Design.CNG, Profile.ROLLED)
        inputs = design_inputs(Design.CNG, 0x12, 0x34, fake_key=0x56)
        key = schedule.register("key")
        outcome = inject(schedule, inputs, FaultSpec(((key.id, 5),), cycle=0))
        assert outcome.classification == FaultClass.CRITICAL
        assert not outcome.would_be_critical


class TestSbfCampaign:
    """Test exhaustive single bit-flip campaigns"""

    def test_unrolled_uhls_counts(self):
        """Test the unrolled unprotected schedule outcome counts"""
        report = run_sbf_campaign(build_schedule(Design.UHLS, Profile.UNROLLED), n_inputs=8, seed=1)
        assert report.sample_count == 52 * 8
        assert report.counts[FaultClass.CRITICAL] == 24 * 8
        assert report.counts[FaultClass.HANG] == 4 * 8
        assert report.counts[FaultClass.DETECTED] == 0

    @pytest.mark.parametrize("profile", list(Profile))
    def test_cng_shared_registers_never_critical(self, profile):
        """Test faults in the shared input and control registers are never critical"""
        report = run_sbf_campaign(build_schedule(Design.CNG, profile), n_inputs=4, seed=2)
        assert {"plaintext", "fsm"} <= set(report.by_shared_register)
        for name, row in report.by_shared_register.items():
            if name != "mem_rd":
                assert row[FaultClass.CRITICAL] == 0, name
        shared = report.by_slice["shared"]
        for cls in CLASS_ORDER:
            assert sum(row[cls] for row in report.by_shared_register.values()) == shared[cls]
        assert report.counts[FaultClass.DETECTED] > 0
        assert sum(report.rates.values()) == pytest.approx(1.0, abs=1e-9)

    def test_cng_memory_read_counted_separately(self):
        """Test outcomes of the shared basis-array read port are reported on their own"""
        schedule = build_schedule(Design.CNG, Profile.MODULAR)
        report = run_sbf_campaign(schedule, n_inputs=4, seed=2)
        mem = report.by_shared_register["mem_rd"]
        assert sum(mem.values()) == 8 * schedule.nominal_latency * 4
        assert mem[FaultClass.DETECTED] > 0
        assert mem[FaultClass.HANG] == 0
        assert report.by_register_kind["memory_read"] == mem

    @pytest.mark.parametrize("profile", list(Profile))
    def test_cng_fake_slice_never_critical(self, profile):
        """Test flips confined to the decoy lane are detected or silent"""
        report = run_sbf_campaign(build_schedule(Design.CNG, profile), n_inputs=2, seed=6)
        fake = report.by_slice["fake"]
        assert fake[FaultClass.CRITICAL] == 0
        assert fake[FaultClass.DETECTED] > 0

    @pytest.mark.parametrize("design,profile", [(Design.UHLS, Profile.ROLLED), (Design.MASKED, Profile.UNROLLED)])
    def test_no_detection_without_redundancy(self, design, profile):
        """Test designs without a check never report Detected"""
        report = run_sbf_campaign(build_schedule(design, profile), n_inputs=2, seed=3)
        assert report.counts[FaultClass.DETECTED] == 0
        assert report.would_be_critical == 0
        assert sum(report.rates.values()) == pytest.approx(1.0, abs=1e-9)

    def test_unrolled_more_critical_than_rolled(self):
        """Test fewer flip-flops concentrate critical outcomes"""
        unrolled = run_sbf_campaign(build_schedule(Design.UHLS, Profile.UNROLLED), n_inputs=4)
        rolled = run_sbf_campaign(build_schedule(Design.UHLS, Profile.ROLLED), n_inputs=4)
        assert unrolled.rates[FaultClass.CRITICAL] > rolled.rates[FaultClass.CRITICAL]

    def test_breakdown_sums(self):
        """Test per-kind breakdowns add up to the totals"""
        report = run_sbf_campaign(build_schedule(Design.UHLS, Profile.MODULAR), n_inputs=2)
        for cls in CLASS_ORDER:
            assert sum(row[cls] for row in report.by_register_kind.values()) == report.counts[cls]
        assert set(report.by_register_kind) == {"data", "control", "memory_read"}
        assert report.by_register_kind["control"][FaultClass.CRITICAL] == 0

    def test_deterministic(self):
        """Test the same seed gives the same report"""
        schedule = build_schedule(Design.CNG, Profile.UNROLLED)
        assert run_sbf_campaign(schedule, seed=5) == run_sbf_campaign(schedule, seed=5)


class TestMbfCampaign:
    """Test sampled multiple bit-flip campaigns"""

    def test_sample_count_and_population(self):
        """Test the campaign size follows the finite-population formula"""
        schedule = build_schedule(Design.UHLS, Profile.UNROLLED)
        report = run_mbf_campaign(schedule, 2, e=0.05, confidence=0.95, seed=1)
        population = math.comb(schedule.register_bits, 2) * schedule.nominal_latency
        assert report.population == population
        assert report.sample_count == sample_size(population, 0.05, 0.95)
        assert report.multiplicity == 2
        assert not report.exhaustive
        assert sum(report.rates.values()) == pytest.approx(1.0, abs=1e-9)

    def test_deterministic(self):
        """Test the same seed gives the same report"""
        schedule = build_schedule(Design.CNG, Profile.ROLLED)
        a = run_mbf_campaign(schedule, 3, e=0.05, seed=9)
        b = run_mbf_campaign(schedule, 3, e=0.05, seed=9)
        assert a == b

    def test_seeds_agree_within_margin(self):
        """Test two seeds estimate every rate within three margins of error"""
        schedule = build_schedule(Design.UHLS, Profile.ROLLED)
        a = run_mbf_campaign(schedule, 2, e=0.05, seed=1)
        b = run_mbf_campaign(schedule, 2, e=0.05, seed=2)
        for cls in CLASS_ORDER:
            assert abs(a.rates[cls] - b.rates[cls]) < 3 * 0.05

    def test_cng_detects_multi_bit_faults(self):
        """Test the redundancy check fires under multiple flips"""
        report = run_mbf_campaign(build_schedule(Design.CNG, Profile.UNROLLED), 2, e=0.05, seed=4)
        assert report.counts[FaultClass.DETECTED] > 0

    def test_fault_matrix_order(self):
        """Test the matrix runs SBF then each multiplicity per schedule"""
        schedules = [build_schedule(d, Profile.UNROLLED) for d in (Design.UHLS, Design.CNG)]
        reports = run_fault_matrix(schedules, (2, 3), e=0.1, n_inputs=2)
        assert [(r.design, r.multiplicity) for r in reports] == [
            (Design.UHLS, 1), (Design.UHLS, 2), (Design.UHLS, 3),
            (Design.CNG, 1), (Design.CNG, 2), (Design.CNG, 3),
        ]
        assert reports[0].sample_count == 52 * 2

    def test_multiplicity_bounds(self):
        """Test multiplicity must fit the register file"""
        schedule = build_schedule(Design.UHLS, Profile.UNROLLED)
        with pytest.raises(MultiplicityError):
            run_mbf_campaign(schedule, 0, e=0.05)
        with pytest.raises(MultiplicityError):
            run_mbf_campaign(schedule, schedule.register_bits + 1, e=0.05)
