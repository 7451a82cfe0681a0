"""Services package"""

from .sbox_models import build_dataflow, enumerate_intermediates, sbox_cng, sbox_masked, sbox_unprotected
from .scheduler import build_schedule, execute
from .leakage_sim import NoiseModel, TraceMatrix, simulate_traces
from .trace_file import read_traces, write_traces
from .sca_engine import cpa_attack, cpa_sweep, fixed_vs_random_campaign, welch_ttest
from .fi_engine import inject, run_fault_matrix, run_mbf_campaign, run_sbf_campaign, sample_size

__all__ = [
    "build_dataflow", "enumerate_intermediates", "sbox_cng", "sbox_masked", "sbox_unprotected",
    "build_schedule", "execute",
    "NoiseModel", "TraceMatrix", "simulate_traces",
    "read_traces", "write_traces",
    "cpa_attack", "cpa_sweep", "fixed_vs_random_campaign", "welch_ttest",
    "inject", "run_fault_matrix", "run_mbf_campaign", "run_sbf_campaign", "sample_size"
]
