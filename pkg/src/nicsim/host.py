"""Application-facing RPC endpoints over the emulated NICs.

A client endpoint owns one connection and issues requests into its TX
ring; a server endpoint serves every connection attached to its NIC
through a function-id handler table. Both threading models share the
datapath; a synchronous endpoint simply never has more than one call in
flight and hands the response straight back to the blocked caller instead
of a completion queue. The response payload copy to the application is
paid either way; what the sync model drops is the completion-queue and
TX-bookkeeping machinery, which is off the critical path.
"""

from __future__ import annotations

from collections import deque

from . import interconnect as ic
from . import protocol
from .errors import (
    ContractViolation,
    DuplicateHandler,
    PayloadTooLarge,
    ResourceExhausted,
    RpcCallError,
    UnknownDestination,
    WouldBlock,
)
from .protocol import ConnectionRecord, FlowTable, RpcEntry
from .rings import CompletionQueue, RingPair

ECHO_FN = 0

ERR_UNKNOWN_FN = b"EBADFN"
ERR_REPLY_TOO_BIG = b"E2BIG"


class _TxIssuer:
    """Shared publish machinery: blocked-issue queue + mode-aware publish."""

    def __init__(self, engine, nic, conn_id, tx_ring):
        self.engine = engine
        self.nic = nic
        self.conn_id = conn_id
        self.tx = tx_ring
        self._blocked = deque()

    def submit(self, entry: RpcEntry, meta=None) -> bool:
        """Publish an entry, or queue it until a TX slot frees up.

        Returns True if the entry went out immediately.
        """
        slot = self.tx.tx_acquire()
        if slot is None:
            self._blocked.append((entry, meta))
            return False
        self._publish(slot, entry)
        return True

    def try_submit(self, entry: RpcEntry, meta=None) -> None:
        slot = self.tx.tx_acquire()
        if slot is None:
            raise WouldBlock("TX ring full")
        self._publish(slot, entry)

    def _publish(self, slot: int, entry: RpcEntry) -> None:
        block = protocol.encode_entry(entry)
        now = self.engine.now
        host = f"host{self.nic.nic_id}"
        if self.nic.config.tx_mode == ic.MODE_MMIO:
            # the AVX store into device I/O space is itself the publication
            self.engine.trace_txn(
                ic.Transaction(now, host, ic.KIND_MMIO_STORE, 1, self.conn_id,
                               entry.rpc_id, critical=True)
            )
            self.tx.tx_publish(slot, block)
            self.nic.on_tx_publish(self.conn_id)
        else:
            self.engine.trace_txn(
                ic.Transaction(now, host, ic.KIND_HOST_MEMCPY, 1, self.conn_id,
                               entry.rpc_id, critical=True)
            )
            self.engine.schedule(
                now + self.nic.params.t_memcpy, lambda: self._finish_publish(slot, block)
            )

    def _finish_publish(self, slot: int, block: bytes) -> None:
        self.tx.tx_publish(slot, block)
        self.nic.on_tx_publish(self.conn_id)

    def on_tx_free(self) -> None:
        while self._blocked:
            slot = self.tx.tx_acquire()
            if slot is None:
                return
            entry, _meta = self._blocked.popleft()
            self._publish(slot, entry)

    def blocked_count(self) -> int:
        return len(self._blocked)


class ClientEndpoint:
    """One connection's application side on the client NIC."""

    def __init__(self, engine, nic, record: ConnectionRecord):
        self.engine = engine
        self.nic = nic
        self.record = record
        self.threading_model = record.threading_model
        self.rings: RingPair = record.ring_pair
        self.issuer = _TxIssuer(engine, nic, record.connection_id, self.rings.tx)
        self.cq = CompletionQueue() if self.threading_model == "async" else None
        self.pending: dict[int, float] = {}  # rpc_id -> issue timestamp
        self.blocked_on: int | None = None  # sync: rpc id the caller waits for
        self.on_complete = None  # harness hook: (rpc, issue, complete, payload, kind)
        self.completed = 0

    @property
    def connection_id(self) -> int:
        return self.record.connection_id

    def start_call(self, function_id: int, payload: bytes, issue_ts: float | None = None) -> int:
        """Issue one RPC; blocks virtually (queues) when the TX ring is full.

        issue_ts defaults to the current virtual time and is what latency is
        measured from, so a blocked caller accrues the wait.
        """
        if len(payload) > protocol.MAX_PAYLOAD:
            raise PayloadTooLarge(f"payload {len(payload)} > {protocol.MAX_PAYLOAD}")
        if self.threading_model == "sync" and self.pending:
            raise ContractViolation("sync endpoint already has a call in flight")
        rpc_id = self.record.take_rpc_id()
        self.pending[rpc_id] = self.engine.now if issue_ts is None else issue_ts
        if self.threading_model == "sync":
            self.blocked_on = rpc_id
        entry = RpcEntry(
            kind=protocol.KIND_REQUEST,
            connection_id=self.connection_id,
            rpc_id=rpc_id,
            function_id=function_id,
            payload=payload,
        )
        self.issuer.submit(entry)
        return rpc_id

    def try_call_async(self, function_id: int, payload: bytes) -> int:
        """Non-blocking variant: raises WouldBlock instead of queueing."""
        if len(payload) > protocol.MAX_PAYLOAD:
            raise PayloadTooLarge(f"payload {len(payload)} > {protocol.MAX_PAYLOAD}")
        rpc_id = self.record.take_rpc_id()
        entry = RpcEntry(
            kind=protocol.KIND_REQUEST,
            connection_id=self.connection_id,
            rpc_id=rpc_id,
            function_id=function_id,
            payload=payload,
        )
        try:
            self.issuer.try_submit(entry)
        except WouldBlock:
            self.record.next_rpc_id = rpc_id  # roll back the id we took
            raise
        self.pending[rpc_id] = self.engine.now
        return rpc_id

    def poll_completions(self):
        """Async only: drain finished (rpc_id, payload) pairs in arrival order."""
        if self.cq is None:
            raise ContractViolation("poll_completions on a sync endpoint")
        return self.cq.cq_drain()

    # -- NIC-driven delivery path -----------------------------------------

    def on_rx_visible(self, conn_id: int, ts: float) -> None:
        self.engine.trace_txn(
            ic.Transaction(ts, f"host{self.nic.nic_id}", ic.KIND_HOST_MEMCPY, 1, conn_id)
        )
        self.engine.schedule(ts + self.nic.params.t_memcpy, self._pickup)

    def _pickup(self) -> None:
        polled = self.rings.rx.rx_poll()
        assert polled is not None, "delivery event without a dirty RX slot"
        slot, block = polled
        entry = protocol.decode_entry(block)
        self.rings.rx.rx_release(slot)
        self.nic.on_rx_slot_freed(self.connection_id)
        if entry.rpc_id not in self.pending:
            raise ContractViolation(
                f"completion for unknown rpc {entry.rpc_id} on connection {self.connection_id}"
            )
        issue_ts = self.pending.pop(entry.rpc_id)
        now = self.engine.now
        self.completed += 1
        if self.threading_model == "async":
            self.cq.cq_push((entry.rpc_id, entry.payload, entry.kind))
        else:
            self.blocked_on = None
        if self.on_complete is not None:
            self.on_complete(entry.rpc_id, issue_ts, now, entry.payload, entry.kind)

    def on_tx_free(self, conn_id: int, ts: float) -> None:
        self.issuer.on_tx_free()

    def outstanding(self) -> int:
        return len(self.pending) + self.issuer.blocked_count()


class ServerEndpoint:
    """Serving side: one per NIC, dispatching by function id."""

    def __init__(self, engine, nic):
        self.engine = engine
        self.nic = nic
        self.handlers = {}
        self.issuers: dict[int, _TxIssuer] = {}
        self.rings_by_conn: dict[int, RingPair] = {}
        self.served = 0

    def register_handler(self, function_id: int, handler) -> None:
        if function_id in self.handlers:
            raise DuplicateHandler(f"handler for function {function_id} already registered")
        self.handlers[function_id] = handler

    def attach(self, record: ConnectionRecord) -> None:
        self.rings_by_conn[record.connection_id] = record.ring_pair
        self.issuers[record.connection_id] = _TxIssuer(
            self.engine, self.nic, record.connection_id, record.ring_pair.tx
        )

    def on_rx_visible(self, conn_id: int, ts: float) -> None:
        self.engine.trace_txn(
            ic.Transaction(ts, f"host{self.nic.nic_id}", ic.KIND_HOST_MEMCPY, 1, conn_id)
        )
        self.engine.schedule(ts + self.nic.params.t_memcpy, lambda: self._pickup(conn_id))

    def _pickup(self, conn_id: int) -> None:
        rings = self.rings_by_conn[conn_id]
        polled = rings.rx.rx_poll()
        assert polled is not None, "delivery event without a dirty RX slot"
        slot, block = polled
        request = protocol.decode_entry(block)
        rings.rx.rx_release(slot)
        self.nic.on_rx_slot_freed(conn_id)
        self.served += 1
        self._respond(request)

    def _respond(self, request: RpcEntry) -> None:
        handler = self.handlers.get(request.function_id)
        if handler is None:
            kind, payload = protocol.KIND_ERROR, ERR_UNKNOWN_FN
        else:
            payload = handler(request.payload)
            if len(payload) > protocol.MAX_PAYLOAD:
                kind, payload = protocol.KIND_ERROR, ERR_REPLY_TOO_BIG
            else:
                kind = protocol.KIND_RESPONSE
        response = RpcEntry(
            kind=kind,
            connection_id=request.connection_id,
            rpc_id=request.rpc_id,
            function_id=request.function_id,
            payload=payload,
        )
        self.issuers[request.connection_id].submit(response)

    def on_tx_free(self, conn_id: int, ts: float) -> None:
        self.issuers[conn_id].on_tx_free()

    def outstanding(self) -> int:
        return sum(issuer.blocked_count() for issuer in self.issuers.values())


def echo_handler(payload: bytes) -> bytes:
    return payload


def connect(engine, wire, client_nic, server_nic, server_endpoint,
            threading_model: str = "async", conn_id: int | None = None,
            ring_depth: int | None = None, flow_tables: dict | None = None) -> ClientEndpoint:
    """Install a connection on both NICs and hand back the client endpoint.

    Allocates a fresh ring pair per side (per-connection provisioning) and
    registers flow-table records at both ends.
    """
    if server_nic.nic_id not in wire.nics or client_nic.nic_id not in wire.nics:
        raise UnknownDestination("both NICs must be attached to the wire")
    if flow_tables is not None:
        client_table = flow_tables.setdefault(client_nic.nic_id, FlowTable())
        server_table = flow_tables.setdefault(server_nic.nic_id, FlowTable())
    else:
        client_table = getattr(client_nic, "flow_table", None) or FlowTable()
        client_nic.flow_table = client_table
        server_table = getattr(server_nic, "flow_table", None) or FlowTable()
        server_nic.flow_table = server_table

    if conn_id is None:
        conn_id = max((r.connection_id for r in client_table), default=-1) + 1
    depth = ring_depth or 64
    try:
        client_rings = RingPair(depth)
        server_rings = RingPair(depth)
    except MemoryError as exc:  # pragma: no cover
        raise ResourceExhausted(str(exc)) from exc

    client_record = ConnectionRecord(
        connection_id=conn_id,
        local_nic=client_nic.nic_id,
        remote_nic=server_nic.nic_id,
        ring_pair=client_rings,
        threading_model=threading_model,
    )
    server_record = ConnectionRecord(
        connection_id=conn_id,
        local_nic=server_nic.nic_id,
        remote_nic=client_nic.nic_id,
        ring_pair=server_rings,
        threading_model=threading_model,
    )
    client_table.register(client_record)
    server_table.register(server_record)

    client = ClientEndpoint(engine, client_nic, client_record)
    client_nic.attach_connection(
        conn_id, client_rings, server_nic.nic_id, client.on_rx_visible, client.on_tx_free
    )
    server_endpoint.attach(server_record)
    server_nic.attach_connection(
        conn_id, server_rings, client_nic.nic_id,
        server_endpoint.on_rx_visible, server_endpoint.on_tx_free,
    )
    return client


def call_sync(client: ClientEndpoint, function_id: int, payload: bytes,
              limit_ns: float = 1e9):
    """Blocking call: runs the engine until the response arrives.

    Returns the response payload; raises RpcCallError on an error response.
    """
    if client.threading_model != "sync":
        raise ContractViolation("call_sync needs a sync endpoint")
    result = {}

    prev_hook = client.on_complete

    def hook(rpc, issue, complete, payload, kind):
        result["value"] = (payload, kind)
        if prev_hook is not None:
            prev_hook(rpc, issue, complete, payload, kind)

    client.on_complete = hook
    client.start_call(function_id, payload)
    finished = client.engine.run_while(lambda: "value" not in result, limit_ns)
    client.on_complete = prev_hook
    if not finished:
        raise ContractViolation("sync call did not complete within the time limit")
    reply, kind = result["value"]
    if kind == protocol.KIND_ERROR:
        raise RpcCallError(reply.decode(errors="replace"))
    return reply
