"""
Tests for the Leakage Simulator and TRC1 Trace Files
"""

import numpy as np
import pytest
from scipy.stats import chisquare

from sboxlab.models.schemas import Design, FakeKeyPolicy, LeakageModel, Profile
from sboxlab.services.gf_tower import A2X, basis_change
from sboxlab.services.leakage_sim import (
    LeakageConfigError, NoiseModel, TraceMatrix, fresh_masks, noiseless_samples, popcount,
    resolve_fake_key, sample_count, simulate_traces,
)
from sboxlab.services.sbox_models import design_inputs
from sboxlab.services.scheduler import build_schedule
from sboxlab.services.trace_file import (
    HEADER, TraceFormatError, decode_traces, encode_traces, read_traces, write_traces,
)

from .test_gf_tower import aes_sbox


class TestSampleLayout:
    """Test sample counts and noiseless leakage"""

    def test_cycle_models_have_one_sample_per_cycle(self):
        """Test HW/HD traces are as long as the schedule"""
        schedule = build_schedule(Design.UHLS, Profile.ROLLED)
        for model in (LeakageModel.HW, LeakageModel.HD):
            assert sample_count(schedule, model) == schedule.nominal_latency

    def test_value_model_has_one_sample_per_intermediate(self):
        """Test Value traces have one sample per node, plus taps with glitches"""
        schedule = build_schedule(Design.MASKED, Profile.ROLLED)
        assert sample_count(schedule, LeakageModel.VALUE) == 175
        assert sample_count(schedule, LeakageModel.VALUE, glitch=True) == 183

    def test_value_samples_are_hamming_weights(self, uhls_unrolled):
        """Test the last Value sample of UHLS is HW of the S-box output"""
        schedule = uhls_unrolled
        plaintexts = np.arange(256, dtype=np.uint16)
        samples = noiseless_samples(schedule, design_inputs(Design.UHLS, plaintexts, 0), LeakageModel.VALUE)
        expected = [bin(aes_sbox(p)).count("1") for p in range(256)]
        assert samples.shape == (256, 48)
        assert samples[:, -1].tolist() == expected

    def test_hd_of_unchanged_registers_is_zero(self):
        """Test HD leakage of the done cycle is zero"""
        schedule = build_schedule(Design.UHLS, Profile.ROLLED)
        samples = noiseless_samples(schedule, design_inputs(Design.UHLS, np.arange(4, dtype=np.uint16), 1), LeakageModel.HD)
        assert np.all(samples[:, -1] == 0)

    def test_popcount(self):
        """Test popcount on ints and arrays"""
        assert popcount(0xFFFF) == 16
        assert popcount(np.array([0, 1, 0xFF, 0x8001], dtype=np.uint16)).tolist() == [0, 1, 8, 2]


class TestSimulateTraces:
    """Test trace generation"""

    def setup_method(self):
        self.schedule = build_schedule(Design.UHLS, Profile.ROLLED)
        self.noise = NoiseModel(sigma=1.0, seed=11)

    def test_shape_and_metadata(self):
        """Test matrix shape and per-trace metadata"""
        traces = simulate_traces(self.schedule, None, 0x2B, LeakageModel.HW, self.noise, n_traces=300)
        assert traces.samples.shape == (300, self.schedule.nominal_latency)
        assert traces.samples.dtype == np.float32
        assert traces.true_key == 0x2B
        assert traces.design == Design.UHLS

    def test_independent_of_chunking(self):
        """Test chunk size does not change any sample"""
        a = simulate_traces(self.schedule, None, 0x2B, LeakageModel.HW, self.noise, n_traces=200, chunk_size=200)
        b = simulate_traces(self.schedule, None, 0x2B, LeakageModel.HW, self.noise, n_traces=200, chunk_size=33)
        assert np.array_equal(a.samples, b.samples)
        assert np.array_equal(a.plaintexts, b.plaintexts)

    def test_independent_of_jobs(self):
        """Test worker count does not change any sample"""
        a = simulate_traces(self.schedule, None, 0x2B, LeakageModel.HD, self.noise, n_traces=120, chunk_size=40, jobs=1)
        b = simulate_traces(self.schedule, None, 0x2B, LeakageModel.HD, self.noise, n_traces=120, chunk_size=40, jobs=3)
        assert np.array_equal(a.samples, b.samples)

    def test_noiseless_matches_model(self):
        """Test sigma = 0 reproduces the noiseless samples"""
        plaintexts = np.arange(256)
        traces = simulate_traces(self.schedule, plaintexts, 0x10, LeakageModel.HW, NoiseModel(0.0, 1))
        expected = noiseless_samples(self.schedule, design_inputs(Design.UHLS, plaintexts.astype(np.uint16), 0x10), LeakageModel.HW)
        assert np.array_equal(traces.samples, expected.astype(np.float32))

    def test_noise_is_additive(self):
        """Test sigma = s minus sigma = 0 over 100k traces has mean 0 and variance s^2"""
        schedule = build_schedule(Design.UHLS, Profile.UNROLLED)
        plaintexts = np.random.default_rng(0).integers(0, 256, 100_000)
        clean = simulate_traces(schedule, plaintexts, 0x2B, LeakageModel.HW, NoiseModel(0.0, 5))
        noisy = simulate_traces(schedule, plaintexts, 0x2B, LeakageModel.HW, NoiseModel(2.0, 5))
        diff = noisy.samples.astype(np.float64) - clean.samples.astype(np.float64)
        assert abs(diff.mean()) < 0.05 * 2.0
        assert diff.var() == pytest.approx(4.0, rel=0.05)

    def test_masked_metadata_round_trip(self):
        """Test stored masks are random and consistent"""
        schedule = build_schedule(Design.MASKED, Profile.UNROLLED)
        traces = simulate_traces(schedule, None, 0x2B, LeakageModel.VALUE, self.noise, n_traces=50)
        masks = traces.mask_set()
        assert masks.is_consistent()
        assert len(np.unique(traces.masks["m_in"])) > 1

    def test_cng_fake_key_per_trace(self):
        """Test per-trace decoy keys vary and a fixed one does not"""
        schedule = build_schedule(Design.CNG, Profile.ROLLED)
        per_trace = simulate_traces(schedule, None, 1, LeakageModel.HW, self.noise, fake_key=None, n_traces=100)
        fixed = simulate_traces(schedule, None, 1, LeakageModel.HW, self.noise, fake_key=0x99, n_traces=100)
        assert len(np.unique(per_trace.fake_keys)) > 1
        assert np.all(fixed.fake_keys == 0x99)

    def test_glitch_needs_masked_design(self):
        """Test glitch mode is rejected for unmasked designs"""
        with pytest.raises(LeakageConfigError):
            simulate_traces(self.schedule, None, 0, LeakageModel.HW, self.noise, glitch=True, n_traces=10)

    def test_empty_plaintexts(self):
        """Test empty plaintext lists are rejected"""
        with pytest.raises(LeakageConfigError):
            simulate_traces(self.schedule, [], 0, LeakageModel.HW, self.noise)

    def test_negative_sigma(self):
        """Test invalid noise parameters are rejected"""
        with pytest.raises(ValueError):
            NoiseModel(sigma=-1.0)

    def test_fake_key_policies(self):
        """Test decoy key resolution"""
        assert resolve_fake_key(FakeKeyPolicy.FIXED, 0, 0x1AB) == 0xAB
        assert resolve_fake_key(FakeKeyPolicy.PER_TRACE, 0) is None
        assert resolve_fake_key(FakeKeyPolicy.FROM_SEED, 3) == resolve_fake_key(FakeKeyPolicy.FROM_SEED, 3)

    def test_take_subset(self):
        """Test selecting traces keeps metadata aligned"""
        traces = simulate_traces(self.schedule, np.arange(10), 5, LeakageModel.HW, self.noise)
        subset = traces.take(np.array([9, 0]))
        assert subset.plaintexts.tolist() == [9, 0]
        assert np.array_equal(subset.samples[0], traces.samples[9])


class TestTraceFile:
    """Test the TRC1 container"""

    def setup_method(self):
        schedule = build_schedule(Design.MASKED, Profile.ROLLED)
        self.traces = simulate_traces(schedule, None, 0x2B, LeakageModel.HD, NoiseModel(0.5, 3), n_traces=20)

    def test_write_and_read(self, tmp_path):
        """Test a file read back equals the matrix written"""
        path = write_traces(tmp_path / "t.trc", self.traces)
        loaded = read_traces(path)

        assert np.array_equal(loaded.samples, self.traces.samples)
        assert np.array_equal(loaded.plaintexts, self.traces.plaintexts)
        for name, column in self.traces.masks.items():
            assert np.array_equal(loaded.masks[name], column)
        assert loaded.model == LeakageModel.HD
        assert loaded.design == Design.MASKED
        assert loaded.profile == Profile.ROLLED
        assert loaded.seed == 3
        assert loaded.sigma == pytest.approx(0.5)

    def test_layout(self):
        """Test header size and total length"""
        data = encode_traces(self.traces)
        assert data[:4] == b"TRC1"
        n, s = self.traces.n_traces, self.traces.n_samples
        assert len(data) == HEADER.size + 4 * n * s + 7 + 9 * n

    def test_reencoding_is_identical(self):
        """Test decode then encode reproduces the bytes"""
        data = encode_traces(self.traces)
        assert encode_traces(decode_traces(data)) == data

    def test_bad_magic(self):
        """Test a corrupted magic is rejected"""
        data = b"XXXX" + encode_traces(self.traces)[4:]
        with pytest.raises(TraceFormatError):
            decode_traces(data)

    def test_truncated(self):
        """Test truncated files are rejected"""
        data = encode_traces(self.traces)
        with pytest.raises(TraceFormatError):
            decode_traces(data[:-1])
        with pytest.raises(TraceFormatError):
            decode_traces(data[:10])

    def test_bad_metadata_tag(self):
        """Test a damaged metadata block is rejected"""
        data = bytearray(encode_traces(self.traces))
        offset = HEADER.size + 4 * self.traces.n_traces * self.traces.n_samples
        data[offset] = ord("X")
        with pytest.raises(TraceFormatError):
            decode_traces(bytes(data))

    def test_empty_matrix(self):
        """Test a zero-trace matrix is representable"""
        empty = TraceMatrix(
            samples=np.zeros((0, 5), dtype=np.float32), plaintexts=[], keys=[], fake_keys=[],
            masks={}, model=LeakageModel.HW, sigma=1.0, seed=0,
        )
        assert decode_traces(encode_traces(empty)).n_traces == 0


class TestFreshMasks:
    """Test fresh mask drawing"""

    def setup_method(self):
        self.rng = np.random.default_rng(99)

    def test_successive_draws_differ(self):
        """Test two draws from one stream give different masks"""
        a = fresh_masks(self.rng)
        b = fresh_masks(self.rng)
        assert a.to_dict() != b.to_dict()

    def test_derived_masks(self):
        """Test transformed masks follow from the drawn ones"""
        for _ in range(64):
            masks = fresh_masks(self.rng)
            assert masks.m_in_t == basis_change(masks.m_in, A2X)
            assert masks.is_consistent()

    def test_input_mask_is_uniform(self):
        """Test 2^16 draws put about 256 on every input mask value"""
        draws = [fresh_masks(self.rng).m_in for _ in range(1 << 16)]
        counts = np.bincount(draws, minlength=256)
        assert counts.sum() == 1 << 16
        assert chisquare(counts).pvalue > 1e-3


@pytest.fixture
def uhls_unrolled():
    return build_schedule(Design.UHLS, Profile.UNROLLED)
