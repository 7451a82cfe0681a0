"""
Pydantic Schemas for Evaluation Results

Enumerations shared by every service and the result/report models written
to JSON by the command line driver.
"""

from enum import Enum
from typing import Dict, List, Optional

from pydantic import BaseModel, ConfigDict, Field


# ============================================
# Enumerations
# ============================================

class Design(str, Enum):
    """SBOX designs under evaluation"""
    UHLS = "UHLS"
    CNG = "CNG"
    MASKED = "Masked"


class Profile(str, Enum):
    """Schedule profiles (default HLS flow, full unrolling, no inlining + BRAM)"""
    ROLLED = "Rolled"
    UNROLLED = "Unrolled"
    MODULAR = "Modular"


class SboxFunction(str, Enum):
    """Functions of the compact SBOX; one column each in the attack summary"""
    SBOX = "Sbox"
    G256_NB = "G256_nb"
    G256_INV = "G256_inv"
    G16_SQ_SCL = "G16_sq_scl"
    G16_MUL = "G16_mul"
    G16_INV = "G16_inv"
    G4_SCL_N = "G4_scl_N"
    G4_SCL_N2 = "G4_scl_N2"
    G4_MUL = "G4_mul"
    G4_SQ = "G4_sq"


class LeakageModel(str, Enum):
    """Leakage used to synthesise traces"""
    HW = "HW"
    HD = "HD"
    VALUE = "Value"


class PowerModel(str, Enum):
    """Power model used by CPA hypotheses"""
    HW = "HW"
    HD = "HD"


class FaultClass(str, Enum):
    """Outcome of one fault injection"""
    SILENT = "Silent"
    CRITICAL = "Critical"
    HANG = "Hang"
    DETECTED = "Detected"


class FakeKeyPolicy(str, Enum):
    """How the CNG decoy key is chosen"""
    FROM_SEED = "seed"
    FIXED = "fixed"
    PER_TRACE = "per_trace"


# Stable numeric tags used by the binary trace format
LEAKAGE_MODEL_TAGS = {LeakageModel.HW: 0, LeakageModel.HD: 1, LeakageModel.VALUE: 2}
DESIGN_TAGS = {Design.UHLS: 0, Design.CNG: 1, Design.MASKED: 2}
PROFILE_TAGS = {Profile.ROLLED: 0, Profile.UNROLLED: 1, Profile.MODULAR: 2}


# ============================================
# Provenance
# ============================================

class RunProvenance(BaseModel):
    """Enough context to replay a run byte-identically"""
    tool_version: str
    command: str
    seed: int
    config_hash: str = Field(..., description="sha256 of the effective configuration")
    config: dict = Field(default_factory=dict)


# ============================================
# Side-channel results
# ============================================

class CpaResult(BaseModel):
    """CPA against one intermediate under one power model"""
    model_config = ConfigDict(use_enum_values=False)

    descriptor_id: int
    function: SboxFunction
    model: PowerModel
    max_abs_rho: List[float] = Field(..., description="Per key guess max |rho| over samples")
    best_key: int
    best_sample_index: int
    true_key: int
    rank_of_true_key: int
    success: bool


class TTestResult(BaseModel):
    """Fixed-vs-random Welch t-test outcome"""
    t_values: List[float]
    max_abs_t: float
    threshold: float = 4.5
    leaky: bool
    degenerate_samples: List[int] = Field(
        default_factory=list, description="Samples with zero pooled variance (t forced to 0)"
    )


class FunctionSummaryRow(BaseModel):
    """Successful attacks per SBOX function for one design and power model"""
    design: Design
    model: PowerModel
    counts: Dict[str, int]
    total: int


class CpaReport(BaseModel):
    """Full CPA sweep as written by the cpa command"""
    design: Design
    profile: Profile
    leakage_model: LeakageModel
    n_traces: int
    results: List[CpaResult]
    summary: List[FunctionSummaryRow]
    successes: int
    provenance: Optional[RunProvenance] = None


class TTestReport(BaseModel):
    """T-test result with the campaign parameters"""
    design: Design
    profile: Profile
    leakage_model: LeakageModel
    glitch: bool
    n_per_set: int
    sigma: float
    fixed_plaintext: int
    result: TTestResult
    provenance: Optional[RunProvenance] = None


# ============================================
# Fault injection
# ============================================

class CampaignReport(BaseModel):
    """Classified fault-injection outcomes of one campaign"""
    design: Design
    profile: Profile
    multiplicity: int = Field(..., description="1 for exhaustive SBF, 2..5 for MBF")
    exhaustive: bool
    sample_count: int
    counts: Dict[FaultClass, int]
    rates: Dict[FaultClass, float]
    would_be_critical: int = Field(0, description="Detected outcomes whose true output was wrong")
    by_register_kind: Dict[str, Dict[FaultClass, int]] = Field(default_factory=dict)
    by_slice: Dict[str, Dict[FaultClass, int]] = Field(default_factory=dict)
    by_shared_register: Dict[str, Dict[FaultClass, int]] = Field(
        default_factory=dict, description="CNG: outcomes of flips confined to shared registers, by register name"
    )
    margin_of_error: Optional[float] = None
    confidence: Optional[float] = None
    population: Optional[int] = None
    seed: int


class FaultMatrixReport(BaseModel):
    """All campaigns run by one fi invocation"""
    campaigns: List[CampaignReport]
    provenance: Optional[RunProvenance] = None


# ============================================
# Schedules
# ============================================

class ScheduleSummary(BaseModel):
    """Latency and flip-flop counts of one schedule"""
    design: Design
    profile: Profile
    nominal_latency: int
    registers: int
    flip_flops: int
    flip_flops_by_kind: Dict[str, int]
    intermediates: int
