from .scan import (ScanGrads, ScanInputs, ScanOutput, SsmParams, selective_scan_backward,
                   selective_scan_parallel, selective_scan_seq)
from .zoh import EXACT, SIMPLIFIED, zoh_discretize

__all__ = [
    "EXACT", "SIMPLIFIED", "ScanGrads", "ScanInputs", "ScanOutput", "SsmParams",
    "selective_scan_backward", "selective_scan_parallel", "selective_scan_seq", "zoh_discretize",
]
