"""Emulated NIC: TX/RX state machines, loop-back wire, adaptive controllers.

Each connection endpoint owns a TX path (host publishes, NIC fetches via
the configured interface mode) and an RX path (wire arrivals DMA-written
into the RX ring, round-robin balanced across the NIC's connections).

Hard config fields (tx_mode, threading_model) require a drained rebuild;
soft fields (batch size, poll threshold, adaptive batching, rate window)
may change at runtime. Two controllers run per NIC, evaluated once per
rate window with a 10% hysteresis band:

- coherent submode: invalidation-driven at low request rates, direct LLC
  polling above the programmable threshold;
- adaptive batching: a low/high batch-size pair switched around a rate.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace
from enum import Enum

from . import interconnect as ic
from .errors import (
    ConfigInvalid,
    HardFieldViolation,
    InvalidValue,
    TransitionError,
    UnknownDestination,
)
from .rings import DEFAULT_DEPTH, RingPair

HARD_FIELDS = ("tx_mode", "threading_model")
SOFT_FIELDS = ("batch_B", "poll_threshold_rps", "adaptive_batching", "rate_window_us")

CONTROLLER_CSV_HEADER = "ts_ns,controller,old,new"
HYSTERESIS = 0.05  # +/-5% band around a controller threshold


@dataclass
class AdaptiveBatching:
    enabled: bool = False
    low_B: int = 1
    high_B: int = 4
    switch_rate_rps: float = 7e6

    @classmethod
    def from_dict(cls, data: dict) -> "AdaptiveBatching":
        unknown = set(data) - {"enabled", "low_B", "high_B", "switch_rate_rps"}
        if unknown:
            raise ConfigInvalid([f"adaptive_batching: unknown key '{k}'" for k in sorted(unknown)])
        return cls(**data)


@dataclass
class NicConfig:
    tx_mode: str = ic.MODE_COHERENT  # hard
    threading_model: str = "async"  # hard
    batch_B: int = 1  # soft
    poll_threshold_rps: float = 1e6  # soft
    adaptive_batching: AdaptiveBatching = field(default_factory=AdaptiveBatching)
    rate_window_us: float = 100.0  # soft

    def validate(self, ring_depth: int = DEFAULT_DEPTH) -> "NicConfig":
        errors = []
        if self.tx_mode not in ic.TX_MODES:
            errors.append(f"tx_mode must be one of {ic.TX_MODES}, got {self.tx_mode!r}")
        if self.threading_model not in ("sync", "async"):
            errors.append(f"threading_model must be sync|async, got {self.threading_model!r}")
        if not 1 <= self.batch_B <= ring_depth:
            errors.append(f"batch_B must be in 1..{ring_depth}, got {self.batch_B}")
        if self.poll_threshold_rps <= 0:
            errors.append("poll_threshold_rps must be > 0")
        if self.rate_window_us <= 0:
            errors.append("rate_window_us must be > 0")
        ab = self.adaptive_batching
        if ab.enabled:
            if not 1 <= ab.low_B <= ab.high_B <= ring_depth:
                errors.append("adaptive_batching needs 1 <= low_B <= high_B <= ring depth")
            if ab.switch_rate_rps <= 0:
                errors.append("adaptive_batching switch_rate_rps must be > 0")
        if errors:
            raise ConfigInvalid(errors)
        return self

    @classmethod
    def from_dict(cls, data: dict) -> "NicConfig":
        fields_ok = set(HARD_FIELDS) | set(SOFT_FIELDS)
        unknown = set(data) - fields_ok
        if unknown:
            raise ConfigInvalid([f"unknown NicConfig key '{k}'" for k in sorted(unknown)])
        kw = dict(data)
        if "adaptive_batching" in kw and isinstance(kw["adaptive_batching"], dict):
            kw["adaptive_batching"] = AdaptiveBatching.from_dict(kw["adaptive_batching"])
        return cls(**kw).validate()


class TxState(Enum):
    IDLE_POLL = "IdlePoll"
    FETCH = "Fetch"
    FORWARD = "Forward"
    BOOKKEEP = "Bookkeep"


class RxState(Enum):
    AWAIT_WIRE = "AwaitWire"
    DELIVER_DMA = "DeliverDma"
    BOOKKEEP = "Bookkeep"


TX_EDGES = {
    (TxState.IDLE_POLL, TxState.FETCH),
    (TxState.FETCH, TxState.FORWARD),
    (TxState.FORWARD, TxState.BOOKKEEP),
    (TxState.BOOKKEEP, TxState.IDLE_POLL),
}

RX_EDGES = {
    (RxState.AWAIT_WIRE, RxState.DELIVER_DMA),
    (RxState.DELIVER_DMA, RxState.BOOKKEEP),
    (RxState.BOOKKEEP, RxState.AWAIT_WIRE),
    (RxState.DELIVER_DMA, RxState.AWAIT_WIRE),  # backpressure stall release path
}


class _ConnEndpoint:
    """NIC-side state for one connection: rings, FSM states, callbacks."""

    def __init__(self, conn_id, ring_pair, remote_nic, deliver_cb, tx_free_cb):
        self.conn_id = conn_id
        self.rings = ring_pair
        self.remote_nic = remote_nic
        self.deliver_cb = deliver_cb  # (conn_id, ts) -> None, entry is host-visible
        self.tx_free_cb = tx_free_cb  # (conn_id, ts) -> None, TX slots released
        self.tx_state = TxState.IDLE_POLL
        self.rx_state = RxState.AWAIT_WIRE
        self.busy_until = 0.0
        self.inval_known = 0  # publish notifications seen (inval submode)
        self.poll_scheduled = False
        self.rx_backlog = []  # wire arrivals awaiting a free RX slot
        self.fsm_trace = []

    def set_tx(self, new: TxState) -> None:
        if (self.tx_state, new) not in TX_EDGES:
            raise TransitionError(f"TX {self.tx_state.value} -> {new.value}")
        self.tx_state = new

    def set_rx(self, new: RxState) -> None:
        if (self.rx_state, new) not in RX_EDGES:
            raise TransitionError(f"RX {self.rx_state.value} -> {new.value}")
        self.rx_state = new


class Wire:
    """Loop-back transport: loss-free, order-preserving, t_wire per hop."""

    def __init__(self, engine, params):
        self.engine = engine
        self.params = params
        self.nics = {}

    def attach(self, nic: "Nic") -> None:
        self.nics[nic.nic_id] = nic

    def send(self, src_nic_id: int, dst_nic_id: int, conn_id: int, block: bytes,
             rpc: int, extra_ns: float = 0.0) -> None:
        if dst_nic_id not in self.nics:
            raise UnknownDestination(f"nic {dst_nic_id} is not attached to the wire")
        now = self.engine.now
        self.engine.trace_txn(
            ic.Transaction(now, f"nic{src_nic_id}", ic.KIND_WIRE_HOP, 1, conn_id, rpc, critical=True)
        )
        dst = self.nics[dst_nic_id]
        self.engine.schedule(
            now + extra_ns + self.params.t_wire, lambda: dst.rx_arrival(conn_id, block, rpc)
        )


class Nic:
    """One emulated NIC attached to the shared bus arbiter and the wire."""

    def __init__(self, nic_id: int, config: NicConfig, params, engine, arbiter, wire):
        self.nic_id = nic_id
        self.config = config.validate()
        self.params = params
        self.engine = engine
        self.arbiter = arbiter
        self.wire = wire
        wire.attach(self)
        self.conns: dict[int, _ConnEndpoint] = {}
        self.submode = ic.SUBMODE_INVAL  # startup: poll local cache, rely on invalidations
        self.effective_B = config.batch_B
        self.settle_until = 0.0  # post-reconfiguration window with partial flushes
        self.window_publishes = 0
        self.measured_rate = 0.0
        self.controller_log = []  # (ts_ns, controller, old, new)
        self._rx_cursor = 0
        self._controller_started = False
        self.rx_service_counts: dict[int, int] = {}

    # -- connection management --------------------------------------------

    def attach_connection(self, conn_id, ring_pair, remote_nic, deliver_cb, tx_free_cb):
        ep = _ConnEndpoint(conn_id, ring_pair, remote_nic, deliver_cb, tx_free_cb)
        self.conns[conn_id] = ep
        self.rx_service_counts[conn_id] = 0
        if not self._controller_started:
            self._controller_started = True
            self._schedule_controller_tick()
        if self.config.tx_mode == ic.MODE_COHERENT and self.submode == ic.SUBMODE_DIRECT:
            self._start_poll_loop(ep)
        return ep

    def detach_connection(self, conn_id) -> None:
        self.conns.pop(conn_id, None)

    # -- TX path ------------------------------------------------------------

    def on_tx_publish(self, conn_id: int) -> None:
        """Host published one entry into this connection's TX ring."""
        ep = self.conns[conn_id]
        self.window_publishes += 1
        now = self.engine.now
        mode = self.config.tx_mode
        if mode == ic.MODE_COHERENT:
            if self.submode == ic.SUBMODE_INVAL:
                # a publish invalidates exactly the published line
                self.engine.trace_txn(
                    ic.Transaction(now, f"host{self.nic_id}", ic.KIND_INVALIDATION, 1, conn_id)
                )
                self.engine.schedule(now + self.params.t_inval, lambda: self._on_inval(ep))
            else:
                # direct polling discovers the entry half a poll period later
                # on average; modeled as a fixed half-period so steady state
                # is phase-free
                self.engine.schedule(now + self.params.t_poll / 2, lambda: self._try_fetch(ep))
        else:
            self._try_fetch(ep)

    def _on_inval(self, ep: _ConnEndpoint) -> None:
        ep.inval_known += 1
        self._try_fetch(ep)

    def _trigger_batch(self, ep: _ConnEndpoint) -> int:
        """How many entries the next fetch should take; 0 = no trigger yet.

        Batches wait until full (no timeout); inside a short settling window
        after a controller transition a partial batch is flushed instead, so
        the batch alignment left over from the old configuration drains out.
        """
        mode = self.config.tx_mode
        dirty = ep.rings.tx.dirty_run()
        if mode == ic.MODE_MMIO:
            return 1 if dirty >= 1 else 0
        want = self.effective_B
        avail = min(dirty, ep.inval_known) if (
            mode == ic.MODE_COHERENT and self.submode == ic.SUBMODE_INVAL
        ) else dirty
        if avail >= want:
            return want
        if avail and self.engine.now < self.settle_until:
            return avail
        return 0

    def _try_fetch(self, ep: _ConnEndpoint) -> None:
        now = self.engine.now
        if ep.busy_until > now:
            return  # channel busy; re-checked at busy end
        k = self._trigger_batch(ep)
        if k:
            self._fetch(ep, k)

    def _fetch(self, ep: _ConnEndpoint, k: int) -> None:
        now = self.engine.now
        mode = self.config.tx_mode
        ep.set_tx(TxState.FETCH)
        entries = ep.rings.tx.nic_fetch(k)
        assert len(entries) == k, "trigger said k entries were dirty"
        if mode == ic.MODE_COHERENT and self.submode == ic.SUBMODE_INVAL:
            ep.inval_known -= k
        units = 0
        for kind, count in ic.tx_batch_transactions(mode, k):
            units += count
            if kind == ic.KIND_MMIO_STORE:
                continue  # the CPU store was traced at publish time
            self.engine.trace_txn(
                ic.Transaction(now, f"nic{self.nic_id}", kind, count, ep.conn_id,
                               critical=(kind != ic.KIND_DOORBELL))
            )
        granted = self.arbiter.request(self.nic_id, units, now)
        occ_end = max(now + ic.tx_occupancy_ns(self.params, mode, k), granted)
        ep.busy_until = occ_end
        self.engine.schedule(occ_end, lambda: self._forward(ep, entries))

    def _forward(self, ep: _ConnEndpoint, entries) -> None:
        """Channel freed: hand the batch to the interconnect (any remaining
        traversal latency rides the delivery path), bookkeep, go idle."""
        extra = ic.tx_extra_latency_ns(self.params, self.config.tx_mode)
        ep.set_tx(TxState.FORWARD)
        for slot, block in entries:
            rpc = int.from_bytes(block[4:8], "little")
            self.wire.send(self.nic_id, ep.remote_nic, ep.conn_id, block, rpc, extra_ns=extra)
        ep.set_tx(TxState.BOOKKEEP)
        ep.rings.tx.nic_release([slot for slot, _ in entries])
        ep.set_tx(TxState.IDLE_POLL)
        ep.tx_free_cb(ep.conn_id, self.engine.now)
        self._tx_resume(ep)

    def _tx_resume(self, ep: _ConnEndpoint) -> None:
        """Channel became free: chain the next batch or resume polling."""
        if self.config.tx_mode == ic.MODE_COHERENT and self.submode == ic.SUBMODE_DIRECT:
            k = self._trigger_batch(ep)
            if k and ep.busy_until <= self.engine.now:
                self._fetch(ep, k)  # FSM is hot: back-to-back batch
            else:
                self._arm_poll(ep, self.engine.now)
        else:
            self._try_fetch(ep)

    # -- direct-poll loop ----------------------------------------------------

    def _start_poll_loop(self, ep: _ConnEndpoint) -> None:
        self._arm_poll(ep, self.engine.now)

    def _arm_poll(self, ep: _ConnEndpoint, ts: float) -> None:
        if not ep.poll_scheduled and not self.engine.ended(ts):
            ep.poll_scheduled = True
            self.engine.schedule(ts, lambda: self._poll(ep))

    def _poll(self, ep: _ConnEndpoint) -> None:
        """Idle spin of the direct-polling FSM. Empty polls consume bus
        budget but never hold the channel: fetch starts are publish-driven
        (on_tx_publish) or chained at fetch end (_tx_resume), so the steady
        state does not depend on poll phase."""
        ep.poll_scheduled = False
        if self.config.tx_mode != ic.MODE_COHERENT or self.submode != ic.SUBMODE_DIRECT:
            return  # submode switched; the invalidation path takes over
        now = self.engine.now
        if ep.busy_until > now:
            self._arm_poll(ep, ep.busy_until)  # fetch in flight; not a miss
            return
        if self._trigger_batch(ep):
            # data is pending and a fetch check owns it; spin silently
            self._arm_poll(ep, now + self.params.t_poll)
            return
        # empty poll: consumes bus budget
        self.engine.trace_txn(
            ic.Transaction(now, f"nic{self.nic_id}", ic.KIND_POLL_MISS, 1, ep.conn_id)
        )
        granted = self.arbiter.request(self.nic_id, 1, now)
        self._arm_poll(ep, max(now + self.params.t_poll, granted))

    # -- RX path ---------------------------------------------------------------

    def rx_arrival(self, conn_id: int, block: bytes, rpc: int) -> None:
        ep = self.conns.get(conn_id)
        if ep is None:
            raise UnknownDestination(f"nic {self.nic_id} has no connection {conn_id}")
        ep.rx_backlog.append((block, rpc))
        self._rx_dispatch()

    def _rx_dispatch(self) -> None:
        """Round-robin across connections with pending arrivals; a full RX
        ring stalls only its own connection (head-of-line isolation)."""
        conn_ids = list(self.conns)
        n = len(conn_ids)
        stalled = set()
        while True:
            progressed = False
            for step in range(n):
                idx = (self._rx_cursor + step) % n
                cid = conn_ids[idx]
                ep = self.conns[cid]
                if not ep.rx_backlog or cid in stalled:
                    continue
                if self._rx_deliver_one(ep):
                    self._rx_cursor = (idx + 1) % n
                    progressed = True
                else:
                    stalled.add(cid)
                break
            else:
                return
            if not progressed and len(stalled) == n:
                return

    def _rx_deliver_one(self, ep: _ConnEndpoint) -> bool:
        now = self.engine.now
        block, rpc = ep.rx_backlog[0]
        ep.set_rx(RxState.DELIVER_DMA)
        if not ep.rings.rx.rx_deliver(block):
            # backpressure: stay queued, FSM returns to waiting
            ep.set_rx(RxState.AWAIT_WIRE)
            return False
        ep.rx_backlog.pop(0)
        self.rx_service_counts[ep.conn_id] += 1
        self.engine.trace_txn(
            ic.Transaction(now, f"nic{self.nic_id}", ic.KIND_DMA_WRITE, 1, ep.conn_id, rpc,
                           critical=True)
        )
        ep.set_rx(RxState.BOOKKEEP)
        ep.set_rx(RxState.AWAIT_WIRE)
        self.engine.schedule(
            now + self.params.t_dma_write, lambda: ep.deliver_cb(ep.conn_id, self.engine.now)
        )
        return True

    def on_rx_slot_freed(self, conn_id: int) -> None:
        ep = self.conns[conn_id]
        if ep.rx_backlog:
            self._rx_dispatch()

    # -- controllers -------------------------------------------------------------

    def _schedule_controller_tick(self) -> None:
        window_ns = self.config.rate_window_us * 1000.0
        self.engine.schedule(self.engine.now + window_ns, self._controller_tick)

    def _controller_tick(self) -> None:
        window_s = self.config.rate_window_us * 1e-6
        self.measured_rate = self.window_publishes / window_s
        self.window_publishes = 0
        self.adaptive_controllers_step(self.measured_rate)
        if not self.engine.ended(self.engine.now):
            self._schedule_controller_tick()

    def adaptive_controllers_step(self, measured_rate: float) -> None:
        """Evaluate both controllers against one measured-rate sample."""
        now = self.engine.now
        if self.config.tx_mode == ic.MODE_COHERENT:
            thr = self.config.poll_threshold_rps
            if self.submode == ic.SUBMODE_INVAL and measured_rate > thr * (1 + HYSTERESIS):
                self._set_submode(ic.SUBMODE_DIRECT, now)
            elif self.submode == ic.SUBMODE_DIRECT and measured_rate < thr * (1 - HYSTERESIS):
                self._set_submode(ic.SUBMODE_INVAL, now)
        ab = self.config.adaptive_batching
        if ab.enabled:
            if self.effective_B == ab.low_B and measured_rate > ab.switch_rate_rps * (1 + HYSTERESIS):
                self._set_batch(ab.high_B, now)
            elif self.effective_B == ab.high_B and measured_rate < ab.switch_rate_rps * (1 - HYSTERESIS):
                self._set_batch(ab.low_B, now)

    def _settle(self, now: float) -> None:
        self.settle_until = now + self.config.rate_window_us * 1000.0

    def _set_submode(self, new: str, now: float) -> None:
        self.controller_log.append((now, "poll_mode", self.submode, new))
        self.submode = new
        self._settle(now)
        for ep in self.conns.values():
            if new == ic.SUBMODE_DIRECT:
                ep.inval_known = 0
                self._start_poll_loop(ep)
                self._try_fetch(ep)  # pick up any backlog published pre-switch
            else:
                # entries published under direct polling are already visible
                ep.inval_known = ep.rings.tx.dirty_run()

    def _set_batch(self, new_b: int, now: float) -> None:
        self.controller_log.append((now, "batch", str(self.effective_B), str(new_b)))
        self.effective_B = new_b
        self._settle(now)
        for ep in self.conns.values():
            self._try_fetch(ep)

    def controller_csv(self) -> str:
        lines = [CONTROLLER_CSV_HEADER]
        for ts, name, old, new in self.controller_log:
            lines.append(f"{ts:.1f},{name},{old},{new}")
        return "\n".join(lines) + "\n"

    # -- reconfiguration -----------------------------------------------------------

    def soft_reconfigure(self, field_name: str, value) -> None:
        if field_name in HARD_FIELDS:
            raise HardFieldViolation(f"{field_name} requires hard reconfiguration")
        if field_name not in SOFT_FIELDS:
            raise InvalidValue(f"unknown soft field {field_name!r}")
        if field_name == "adaptive_batching" and isinstance(value, dict):
            value = AdaptiveBatching.from_dict(value)
        candidate = replace(self.config, **{field_name: value})
        try:
            candidate.validate()
        except ConfigInvalid as exc:
            raise InvalidValue(str(exc)) from None
        self.config = candidate
        if field_name == "batch_B" and not self.config.adaptive_batching.enabled:
            self.effective_B = value
            for ep in self.conns.values():
                self._try_fetch(ep)

    def outstanding(self) -> int:
        total = 0
        for ep in self.conns.values():
            total += ep.rings.tx.outstanding() + len(ep.rx_backlog)
        return total

    def hard_reconfigure(self, new_config: NicConfig) -> None:
        """Rebuild the pipeline with new hard fields. Caller must have
        drained in-flight traffic first (see sim.drain_and_reconfigure)."""
        new_config.validate()
        if self.outstanding():
            raise HardFieldViolation("NIC not drained; outstanding entries remain")
        self.config = new_config
        self.submode = ic.SUBMODE_INVAL
        self.effective_B = new_config.batch_B
        for ep in self.conns.values():
            ep.rings.tx = type(ep.rings.tx)(ep.rings.tx.depth)
            ep.rings.rx = type(ep.rings.rx)(ep.rings.rx.depth)
            ep.tx_state = TxState.IDLE_POLL
            ep.rx_state = RxState.AWAIT_WIRE
            ep.busy_until = self.engine.now
            ep.inval_known = 0

    @property
    def state(self) -> dict:
        return {
            "submode": self.submode,
            "effective_B": self.effective_B,
            "measured_rate": self.measured_rate,
            "tx_states": {c: ep.tx_state.value for c, ep in self.conns.items()},
            "rx_states": {c: ep.rx_state.value for c, ep in self.conns.items()},
        }
