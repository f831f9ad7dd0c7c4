"""RPC entry wire format and the connection flow table.

Every transfer unit is one 64-byte cache-line-sized entry. Byte layout
(little-endian, normative):

    offset  size  field
    ------  ----  -----------------------------------------------
    0       1     valid_flag   0 = free slot, 1 = occupied/dirty
    1       1     kind         0 = request, 1 = response, 2 = error response
    2       2     connection_id  (u16)
    4       4     rpc_id         (u32, per-connection monotonic)
    8       2     function_id    (u16)
    10      1     payload_len    (u8, 0..48)
    11      5     reserved       (zero)
    16      48    payload        (first payload_len bytes meaningful,
                                  rest zero)

The 16-byte header + 48-byte payload split keeps the total at exactly one
cache line; the valid flag sits in byte 0 so a polling reader inspects a
single leading byte.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field

from .errors import DuplicateConnection, ConnectionNotFound, MalformedEntry, PayloadTooLarge

ENTRY_SIZE = 64
HEADER_SIZE = 16
MAX_PAYLOAD = ENTRY_SIZE - HEADER_SIZE  # 48

KIND_REQUEST = 0
KIND_RESPONSE = 1
KIND_ERROR = 2  # error response (unknown function id, oversized reply, ...)
_KINDS = (KIND_REQUEST, KIND_RESPONSE, KIND_ERROR)

_HEADER_FMT = "<BBHIHB5s"
_ENTRY_FMT = _HEADER_FMT + "48s"
assert struct.calcsize(_ENTRY_FMT) == ENTRY_SIZE

RPC_ID_MODULUS = 1 << 32


@dataclass
class RpcEntry:
    """Decoded form of one 64-byte entry."""

    kind: int
    connection_id: int
    rpc_id: int
    function_id: int
    payload: bytes
    valid_flag: int = 1

    def is_request(self) -> bool:
        return self.kind == KIND_REQUEST


def encode_entry(entry: RpcEntry) -> bytes:
    """Pack an entry into its 64-byte wire form.

    Raises PayloadTooLarge if the payload exceeds 48 bytes.
    """
    if len(entry.payload) > MAX_PAYLOAD:
        raise PayloadTooLarge(
            f"payload is {len(entry.payload)} bytes, limit {MAX_PAYLOAD}"
        )
    return struct.pack(
        _ENTRY_FMT,
        entry.valid_flag,
        entry.kind,
        entry.connection_id,
        entry.rpc_id % RPC_ID_MODULUS,
        entry.function_id,
        len(entry.payload),
        b"\x00" * 5,
        entry.payload,
    )


def decode_entry(block: bytes) -> RpcEntry:
    """Unpack a 64-byte block. Inverse of encode_entry.

    valid_flag is returned verbatim (an all-zero block decodes to a free
    slot). Raises MalformedEntry on an illegal length byte or kind byte.
    """
    if len(block) != ENTRY_SIZE:
        raise MalformedEntry(f"expected {ENTRY_SIZE} bytes, got {len(block)}")
    valid, kind, conn, rpc, fn, plen, _reserved, payload = struct.unpack(
        _ENTRY_FMT, block
    )
    if plen > MAX_PAYLOAD:
        raise MalformedEntry(f"payload_len {plen} exceeds {MAX_PAYLOAD}")
    if kind not in _KINDS:
        raise MalformedEntry(f"unrecognized kind byte {kind}")
    return RpcEntry(
        kind=kind,
        connection_id=conn,
        rpc_id=rpc,
        function_id=fn,
        payload=payload[:plen],
        valid_flag=valid,
    )


@dataclass
class ConnectionRecord:
    """One registered connection: route, ring pair, threading model."""

    connection_id: int
    local_nic: int
    remote_nic: int
    ring_pair: object
    threading_model: str  # "sync" | "async"
    next_rpc_id: int = 0

    def take_rpc_id(self) -> int:
        rid = self.next_rpc_id
        self.next_rpc_id = (self.next_rpc_id + 1) % RPC_ID_MODULUS
        return rid


class FlowTable:
    """connection_id -> ConnectionRecord, insertion-ordered.

    Mutated only during connection setup/teardown; ring pairs are never
    shared between records.
    """

    def __init__(self):
        self._records: dict[int, ConnectionRecord] = {}

    def register(self, record: ConnectionRecord) -> int:
        cid = record.connection_id
        if cid in self._records:
            raise DuplicateConnection(f"connection {cid} already registered")
        if record.ring_pair is not None:
            for other in self._records.values():
                if other.ring_pair is record.ring_pair:
                    raise DuplicateConnection(
                        f"ring pair of connection {cid} already bound to "
                        f"connection {other.connection_id}"
                    )
        self._records[cid] = record
        return cid

    def lookup(self, connection_id: int) -> ConnectionRecord:
        try:
            return self._records[connection_id]
        except KeyError:
            raise ConnectionNotFound(f"connection {connection_id} not registered") from None

    def remove(self, connection_id: int) -> None:
        self._records.pop(connection_id, None)

    def __contains__(self, connection_id: int) -> bool:
        return connection_id in self._records

    def __iter__(self):
        return iter(self._records.values())

    def __len__(self) -> int:
        return len(self._records)
