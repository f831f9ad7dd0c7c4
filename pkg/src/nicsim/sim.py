"""Scenario runner: load generators, metrics reduction, experiment sweeps.

A scenario wires two (or more) NICs to the loop-back wire and the shared
bus arbiter, provisions one connection per client, and drives an echo
workload either open-loop (fixed arrival rate, deterministic or Poisson
intervals) or closed-loop (fixed outstanding window). All timing comes
from the virtual clock; a (seed, scenario) pair fully determines every
output byte.

Latency samples are (issue, complete) pairs; a request issued while the
TX ring is full keeps its arrival time as the issue timestamp, so the
blocking wait shows up as latency once the system saturates. Requests
issued during warmup are excluded from the reduced metrics.
"""

from __future__ import annotations

import json
import random
import struct
from dataclasses import dataclass, field, replace

from . import host as host_mod
from . import interconnect as ic
from . import protocol
from .engine import Engine
from .errors import ConfigInvalid, DrainTimeout
from .interconnect import BusArbiter, CostParams
from .nic import Nic, NicConfig, Wire

try:
    from importlib import resources as _resources
except ImportError:  # pragma: no cover
    _resources = None

METRICS_CSV_HEADER = "load_mrps,achieved_mrps,median_us,p99_us,saturated"
SATURATION_EPSILON = 0.01
NIC_HEADROOM_RPS = 200e6  # emulated NIC pipeline capacity, never binding

DEFAULT_DURATION_US = 2000.0
DEFAULT_WARMUP_US = 200.0


def default_cost_params() -> CostParams:
    with _resources.files("nicsim.data").joinpath("broadwell_a10.json").open() as fh:
        return CostParams.from_dict(json.load(fh))


@dataclass
class LoadGenSpec:
    mode: str = "open_loop"  # open_loop | closed_loop
    rate_mrps: float = 4.0  # aggregate over all connections (open loop)
    arrival: str = "deterministic"  # deterministic | poisson
    window: int = 64  # outstanding per connection (closed loop)

    def validate(self):
        errors = []
        if self.mode not in ("open_loop", "closed_loop"):
            errors.append(f"loadgen.mode must be open_loop|closed_loop, got {self.mode!r}")
        if self.mode == "open_loop" and self.rate_mrps <= 0:
            errors.append("loadgen.rate_mrps must be > 0")
        if self.arrival not in ("deterministic", "poisson"):
            errors.append(f"loadgen.arrival must be deterministic|poisson, got {self.arrival!r}")
        if self.mode == "closed_loop" and self.window < 1:
            errors.append("loadgen.window must be >= 1")
        return errors


@dataclass
class Scenario:
    nic_configs: dict[int, NicConfig]
    connections: list[tuple[int, int]]  # (client_nic, server_nic)
    loadgen: LoadGenSpec
    cost_params: CostParams
    duration_us: float = DEFAULT_DURATION_US
    warmup_us: float = DEFAULT_WARMUP_US
    seed: int = 1
    ring_depth: int = 64

    def validate(self) -> "Scenario":
        errors = []
        if self.ring_depth < 1 or self.ring_depth & (self.ring_depth - 1):
            errors.append("ring_depth must be a power of two")
        if len(self.nic_configs) < 1:
            errors.append("nics: at least one NIC required")
        if not self.connections:
            errors.append("connections: at least one connection required")
        for i, (c, s) in enumerate(self.connections):
            if c not in self.nic_configs:
                errors.append(f"connections[{i}]: client nic {c} not defined")
            if s not in self.nic_configs:
                errors.append(f"connections[{i}]: server nic {s} not defined")
        errors.extend(self.loadgen.validate())
        if self.duration_us <= 0:
            errors.append("duration_us must be > 0")
        if self.warmup_us < 0:
            errors.append("warmup_us must be >= 0")
        if self.duration_us < 10 * self.warmup_us:
            errors.append("duration_us must be >= 10x warmup_us")
        try:
            self.cost_params.validate()
        except ConfigInvalid as exc:
            errors.extend(f"cost_params: {e}" for e in exc.errors)
        for nic_id, cfg in self.nic_configs.items():
            try:
                cfg.validate(self.ring_depth)
            except ConfigInvalid as exc:
                errors.extend(f"nics[{nic_id}]: {e}" for e in exc.errors)
        if errors:
            raise ConfigInvalid(errors)
        return self

    @classmethod
    def from_dict(cls, data: dict, cost_params: CostParams | None = None) -> "Scenario":
        errors = []
        known = {"nics", "connections", "loadgen", "cost_params_path",
                 "duration_us", "warmup_us", "seed", "ring_depth"}
        for key in set(data) - known:
            errors.append(f"unknown scenario key '{key}'")
        nic_configs = {}
        for i, row in enumerate(data.get("nics", [])):
            try:
                nic_configs[int(row["id"])] = NicConfig.from_dict(row.get("config", {}))
            except (KeyError, TypeError) as exc:
                errors.append(f"nics[{i}]: {exc}")
            except ConfigInvalid as exc:
                errors.extend(f"nics[{i}]: {e}" for e in exc.errors)
        connections = []
        for i, row in enumerate(data.get("connections", [])):
            try:
                connections.append((int(row["client_nic"]), int(row["server_nic"])))
            except (KeyError, TypeError) as exc:
                errors.append(f"connections[{i}]: {exc}")
        lg = data.get("loadgen", {})
        lg_known = {"mode", "rate_mrps", "arrival", "window"}
        for key in set(lg) - lg_known:
            errors.append(f"loadgen: unknown key '{key}'")
        loadgen = LoadGenSpec(**{k: v for k, v in lg.items() if k in lg_known})
        if cost_params is None:
            path = data.get("cost_params_path")
            cost_params = CostParams.load(path) if path else default_cost_params()
        scenario = cls(
            nic_configs=nic_configs,
            connections=connections,
            loadgen=loadgen,
            cost_params=cost_params,
            duration_us=float(data.get("duration_us", DEFAULT_DURATION_US)),
            warmup_us=float(data.get("warmup_us", DEFAULT_WARMUP_US)),
            seed=int(data.get("seed", 1)),
            ring_depth=int(data.get("ring_depth", 64)),
        )
        try:
            scenario.validate()
        except ConfigInvalid as exc:
            errors.extend(exc.errors)
        if errors:
            raise ConfigInvalid(errors)
        return scenario


def default_scenario(tx_mode: str = ic.MODE_COHERENT, batch: int = 1,
                     threading_model: str = "async",
                     loadgen: LoadGenSpec | None = None,
                     cost_params: CostParams | None = None,
                     n_connections: int = 1,
                     adaptive: bool = False,
                     duration_us: float = DEFAULT_DURATION_US,
                     warmup_us: float = DEFAULT_WARMUP_US,
                     seed: int = 1,
                     ring_depth: int = 64) -> Scenario:
    """The standard two-NIC echo setup used by the command-line front end.

    Adaptive scenarios use a faster controller window and deeper rings so
    the cold-start transient (the spell spent at the low batch size under
    high offered load) drains inside the warmup window.
    """
    cfg = NicConfig(
        tx_mode=tx_mode,
        threading_model=threading_model,
        batch_B=batch,
    )
    if adaptive:
        cfg.adaptive_batching = replace(cfg.adaptive_batching, enabled=True)
        cfg.rate_window_us = 20.0
        ring_depth = max(ring_depth, 256)
    return Scenario(
        nic_configs={0: cfg, 1: replace(cfg)},
        connections=[(0, 1)] * n_connections,
        loadgen=loadgen or LoadGenSpec(),
        cost_params=cost_params or default_cost_params(),
        duration_us=duration_us,
        warmup_us=warmup_us,
        seed=seed,
        ring_depth=ring_depth,
    ).validate()


@dataclass
class RunMetrics:
    offered_mrps: float
    achieved_mrps: float
    median_us: float
    p99_us: float
    saturated: bool
    n_samples: int

    def csv_row(self) -> str:
        return (
            f"{self.offered_mrps:.4f},{self.achieved_mrps:.4f},"
            f"{self.median_us:.4f},{self.p99_us:.4f},{int(self.saturated)}"
        )


@dataclass
class RunResult:
    metrics: RunMetrics
    samples: list  # (issue_ns, complete_ns) within the measurement window
    controller_logs: dict  # nic_id -> [(ts, controller, old, new)]
    trace: list | None
    total_completed: int
    engine_events: int


def make_payload(conn_id: int, rpc_id: int) -> bytes:
    return struct.pack("<HI", conn_id & 0xFFFF, rpc_id & 0xFFFFFFFF) + b"\x5aPING\x5a"


class _Harness:
    def __init__(self, scenario: Scenario, collect_trace: bool):
        self.scenario = scenario
        self.engine = Engine(trace=collect_trace)
        params = scenario.cost_params
        self.arbiter = BusArbiter(sorted(scenario.nic_configs), params.bus_cap_rps)
        self.wire = Wire(self.engine, params)
        self.nics = {
            nic_id: Nic(nic_id, replace(cfg), params, self.engine, self.arbiter, self.wire)
            for nic_id, cfg in scenario.nic_configs.items()
        }
        self.servers = {}
        self.clients: list[host_mod.ClientEndpoint] = []
        self.samples: list[tuple[float, float]] = []
        self._expected_next: dict[int, int] = {}
        for client_nic_id, server_nic_id in scenario.connections:
            server = self.servers.get(server_nic_id)
            if server is None:
                server = host_mod.ServerEndpoint(self.engine, self.nics[server_nic_id])
                server.register_handler(host_mod.ECHO_FN, host_mod.echo_handler)
                self.servers[server_nic_id] = server
            client = host_mod.connect(
                self.engine, self.wire, self.nics[client_nic_id],
                self.nics[server_nic_id], server,
                threading_model=scenario.nic_configs[client_nic_id].threading_model,
                ring_depth=scenario.ring_depth,
            )
            client.on_complete = self._make_complete_hook(client)
            self._expected_next[client.connection_id] = 0
            self.clients.append(client)

    def _make_complete_hook(self, client):
        conn = client.connection_id

        def hook(rpc_id, issue_ts, complete_ts, payload, kind):
            # per-connection FIFO and payload integrity hold on every run
            expected = self._expected_next[conn]
            if rpc_id != expected:
                raise AssertionError(
                    f"connection {conn}: completion {rpc_id} out of order (expected {expected})"
                )
            self._expected_next[conn] = expected + 1
            if kind != protocol.KIND_RESPONSE or payload != make_payload(conn, rpc_id):
                raise AssertionError(f"connection {conn}: corrupted echo for rpc {rpc_id}")
            if client.cq is not None:
                drained = client.poll_completions()
                assert drained and drained[-1][0] == rpc_id
            self.samples.append((issue_ts, complete_ts))
            if self.scenario.loadgen.mode == "closed_loop":
                client.start_call(host_mod.ECHO_FN, make_payload(conn, client.record.next_rpc_id))

        return hook

    def start_load(self) -> None:
        lg = self.scenario.loadgen
        if lg.mode == "closed_loop":
            for client in self.clients:
                for _ in range(lg.window):
                    conn = client.connection_id
                    client.start_call(host_mod.ECHO_FN, make_payload(conn, client.record.next_rpc_id))
            return
        n = len(self.clients)
        interval_ns = 1e3 / (lg.rate_mrps / n)  # per-connection spacing
        end_ns = self.scenario.duration_us * 1e3
        for i, client in enumerate(self.clients):
            if lg.arrival == "poisson":
                rng = random.Random((self.scenario.seed << 16) ^ client.connection_id)
                first = rng.expovariate(1.0) * interval_ns
                self._schedule_arrival(client, first, end_ns, interval_ns, rng)
            else:
                offset = interval_ns * i / max(n, 1)
                self._schedule_arrival(client, offset, end_ns, interval_ns, None)

    def _schedule_arrival(self, client, at_ns, end_ns, interval_ns, rng) -> None:
        if at_ns > end_ns:
            return

        def arrive():
            conn = client.connection_id
            client.start_call(host_mod.ECHO_FN, make_payload(conn, client.record.next_rpc_id),
                              issue_ts=self.engine.now)
            gap = rng.expovariate(1.0) * interval_ns if rng else interval_ns
            self._schedule_arrival(client, self.engine.now + gap, end_ns, interval_ns, rng)

        self.engine.schedule(at_ns, arrive)

    def outstanding(self) -> int:
        total = sum(c.outstanding() for c in self.clients)
        total += sum(s.outstanding() for s in self.servers.values())
        total += sum(n.outstanding() for n in self.nics.values())
        return total


def run(scenario: Scenario, collect_trace: bool = False) -> RunResult:
    """Execute one scenario and reduce its per-request trace to metrics."""
    scenario.validate()
    harness = _Harness(scenario, collect_trace)
    harness.start_load()
    duration_ns = scenario.duration_us * 1e3
    warmup_ns = scenario.warmup_us * 1e3
    harness.engine.run_until(duration_ns)

    window_us = scenario.duration_us - scenario.warmup_us
    # throughput counts completions inside the window (flux balance at
    # steady state); latency samples additionally exclude warmup issues
    completions_in_window = sum(1 for _, c in harness.samples if c >= warmup_ns)
    samples = [(i, c) for i, c in harness.samples if i >= warmup_ns]
    achieved = completions_in_window / window_us if window_us > 0 else 0.0
    if scenario.loadgen.mode == "open_loop":
        offered = scenario.loadgen.rate_mrps
    else:
        offered = achieved
    lat_us = sorted((c - i) * 1e-3 for i, c in samples)
    if lat_us:
        median = lat_us[(len(lat_us) - 1) // 2] if len(lat_us) % 2 else 0.5 * (
            lat_us[len(lat_us) // 2 - 1] + lat_us[len(lat_us) // 2]
        )
        p99 = lat_us[min(len(lat_us) - 1, max(0, -(-99 * len(lat_us) // 100) - 1))]
    else:
        median = p99 = 0.0
    saturated = achieved < offered * (1 - SATURATION_EPSILON)
    per_nic_rate = achieved * 1e6 / max(len(scenario.nic_configs), 1)
    assert per_nic_rate <= NIC_HEADROOM_RPS, "emulated NIC pipeline limit exceeded"

    metrics = RunMetrics(
        offered_mrps=offered,
        achieved_mrps=achieved,
        median_us=median,
        p99_us=p99,
        saturated=saturated,
        n_samples=len(samples),
    )
    return RunResult(
        metrics=metrics,
        samples=samples,
        controller_logs={nid: list(n.controller_log) for nid, n in harness.nics.items()},
        trace=harness.engine.trace,
        total_completed=len(harness.samples),
        engine_events=harness.engine.events_processed,
    )


def metrics_csv(rows: list[RunMetrics]) -> str:
    lines = [METRICS_CSV_HEADER]
    lines.extend(m.csv_row() for m in rows)
    return "\n".join(lines) + "\n"


def trace_csv(trace) -> str:
    lines = [ic.TRACE_CSV_HEADER]
    lines.extend(t.csv_row() for t in trace)
    return "\n".join(lines) + "\n"


def sweep_load(scenario: Scenario, loads_mrps: list[float]) -> list[RunMetrics]:
    """One run per offered load (ascending); empty list in, empty curve out."""
    if sorted(loads_mrps) != list(loads_mrps):
        raise ConfigInvalid("sweep loads must be ascending")
    out = []
    for load in loads_mrps:
        s = replace(scenario, loadgen=replace(scenario.loadgen, mode="open_loop", rate_mrps=load))
        out.append(run(s).metrics)
    return out


def saturation_point(curve: list[RunMetrics]):
    for m in curve:
        if m.saturated:
            return m.offered_mrps
    return None


def scale_cores(scenario: Scenario, thread_counts: list[int]) -> list[tuple[int, float]]:
    """Closed-loop end-to-end throughput vs number of client threads.

    Client and server are colocated, so every RPC loads the shared bus with
    both its request fetch and its response fetch.
    """
    if sorted(thread_counts) != list(thread_counts):
        raise ConfigInvalid("thread counts must be ascending")
    base_client, base_server = scenario.connections[0]
    out = []
    for t in thread_counts:
        s = replace(
            scenario,
            connections=[(base_client, base_server)] * t,
            loadgen=replace(scenario.loadgen, mode="closed_loop"),
        )
        out.append((t, run(s).metrics.achieved_mrps))
    return out


def raw_bus_benchmark(params: CostParams, thread_counts: list[int],
                      duration_us: float = 1000.0, warmup_us: float = 100.0) -> list[tuple[int, float]]:
    """Bare 64B transactions through the arbiter, bypassing the RPC stack.

    Each thread issues back-to-back raw line transfers (one t_cl of issue
    occupancy apiece) and waits for its grant, so a single thread below the
    cap achieves exactly its offered rate and the aggregate plateaus at
    bus_cap_rps.
    """
    end_ns = duration_us * 1e3
    warmup_ns = warmup_us * 1e3
    out = []
    for t in thread_counts:
        arbiter = BusArbiter(list(range(t)), params.bus_cap_rps)
        ready = [0.0] * t
        done = 0
        while True:
            tid = min(range(t), key=lambda k: (ready[k], k))
            now = ready[tid]
            if now >= end_ns:
                break
            granted = arbiter.request(tid, 1, now)
            finish = max(now + params.t_cl, granted)
            ready[tid] = finish
            if warmup_ns <= finish <= end_ns:
                done += 1
        out.append((t, done / (duration_us - warmup_us)))
    return out


def drain_and_reconfigure(harness_outstanding, engine: Engine, nic: Nic,
                          new_config: NicConfig, budget_ns: float = 10e6) -> None:
    """Quiesce in-flight traffic, then rebuild the NIC with new hard fields."""
    drained = engine.run_while(lambda: harness_outstanding() > 0, engine.now + budget_ns)
    if not drained:
        raise DrainTimeout(f"NIC {nic.nic_id} did not drain within {budget_ns:.0f} ns")
    nic.hard_reconfigure(new_config)
