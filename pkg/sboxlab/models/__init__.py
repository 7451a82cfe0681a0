"""Result and report models package"""

from .schemas import (
    Design, Profile, SboxFunction, LeakageModel, PowerModel, FaultClass, FakeKeyPolicy,
    RunProvenance, CpaResult, TTestResult, FunctionSummaryRow, CpaReport, TTestReport,
    CampaignReport, FaultMatrixReport, ScheduleSummary
)

__all__ = [
    "Design", "Profile", "SboxFunction", "LeakageModel", "PowerModel", "FaultClass", "FakeKeyPolicy",
    "RunProvenance", "CpaResult", "TTestResult", "FunctionSummaryRow", "CpaReport", "TTestReport",
    "CampaignReport", "FaultMatrixReport", "ScheduleSummary"
]
