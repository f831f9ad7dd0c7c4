"""Functional emulation of a near-memory RPC NIC with a calibrated
discrete-event cost model."""

from .errors import NicSimError
from .interconnect import BusArbiter, CostParams, calibrate, closed_form_rate
from .nic import Nic, NicConfig, Wire
from .protocol import RpcEntry, decode_entry, encode_entry
from .rings import CompletionQueue, RingPair, RxRing, TxRing
from .sim import LoadGenSpec, RunMetrics, Scenario, default_scenario, run, sweep_load

__all__ = [
    "NicSimError",
    "BusArbiter",
    "CostParams",
    "calibrate",
    "closed_form_rate",
    "Nic",
    "NicConfig",
    "Wire",
    "RpcEntry",
    "decode_entry",
    "encode_entry",
    "CompletionQueue",
    "RingPair",
    "RxRing",
    "TxRing",
    "LoadGenSpec",
    "RunMetrics",
    "Scenario",
    "default_scenario",
    "run",
    "sweep_load",
]

__version__ = "0.1.0"
