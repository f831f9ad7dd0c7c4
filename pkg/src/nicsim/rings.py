"""Per-connection TX/RX rings with the dirty-bit publication contract.

Design notes:
- Strict SPSC per side: the host side (acquire/publish, completion-ring
  read, RX poll/release) and the NIC side (fetch/release, RX deliver) are
  each owned by exactly one thread, enforced at first use. The simulated
  backend drives both sides from the single event-loop thread, which
  trivially satisfies the constraint.
- No locks. The valid byte at offset 0 of each 64-byte slot is the
  publication point: the writer stores the 63 body bytes first and flips
  the flag last, the reader inspects the flag before touching the body.
  Under CPython each of those is a single atomic bytecode operation, so a
  reader that observes flag=1 observes the full entry.
- Completion ring and cursors use monotonically increasing counters, each
  written by one side only.
- Ring state is fully described by the slab bytes plus cursors; snapshot()
  and restore() give an exact round trip (used for determinism checks).
"""

from __future__ import annotations

import threading
import zlib
from collections import deque

from . import protocol
from .errors import ContractViolation

DEFAULT_DEPTH = 64  # slots per ring; 64 x 64B = one 4KB page per direction
COMPLETION_QUEUE_CAPACITY = 4096

_SLOT = protocol.ENTRY_SIZE


def _require_pow2(depth: int) -> int:
    if depth < 1 or depth & (depth - 1):
        raise ValueError(f"ring depth must be a power of two, got {depth}")
    return depth


class _SideGuard:
    """Records the owning thread of one ring side on first use."""

    __slots__ = ("name", "ident")

    def __init__(self, name: str):
        self.name = name
        self.ident = None

    def check(self) -> None:
        me = threading.get_ident()
        if self.ident is None:
            self.ident = me
        elif self.ident != me:
            raise ContractViolation(f"{self.name} side used from two threads")


class TxRing:
    """Host-to-NIC ring: slot slab + completion ring for freed indices.

    Slot lifecycle: free -> acquired -> published(dirty) -> fetched -> free.
    The host may write a slot only if it was never used or its index came
    back through the completion ring; the NIC fetches only dirty slots.
    """

    def __init__(self, depth: int = DEFAULT_DEPTH):
        self.depth = _require_pow2(depth)
        self.slab = bytearray(_SLOT * self.depth)
        # completion ring: NIC writes freed indices, host consumes them.
        # Starts pre-populated in ring order so the host's allocation order
        # always matches the NIC's circular fetch cursor.
        self._comp = list(range(self.depth))
        self._comp_wr = self.depth  # advanced by the NIC side only
        self._comp_rd = 0  # advanced by the host side only
        self.nic_fetch_cursor = 0
        self._acquired: list[int] = []  # acquire order; published as a FIFO prefix
        self._fetched: list[int] = []  # fetch order; released as a FIFO prefix
        self._host = _SideGuard("TxRing host")
        self._nic = _SideGuard("TxRing nic")

    # -- host side -------------------------------------------------------

    def tx_acquire(self):
        """Take ownership of a free slot; None when all slots outstanding."""
        self._host.check()
        if self._comp_rd >= self._comp_wr:
            return None
        idx = self._comp[self._comp_rd % self.depth]
        self._comp_rd += 1
        self._acquired.append(idx)
        return idx

    def tx_publish(self, slot: int, block: bytes) -> None:
        """Write an encoded entry into an acquired slot and flip its flag.

        Publishes follow acquire order (one writer, one entry at a time),
        which keeps publish order aligned with the NIC's circular cursor.
        The flag byte is stored last; the caller's flag byte is ignored.
        """
        self._host.check()
        if not self._acquired or self._acquired[0] != slot:
            raise ContractViolation(
                f"publish of slot {slot} out of acquire order "
                f"(oldest acquired: {self._acquired[:1]})"
            )
        if len(block) != _SLOT:
            raise ContractViolation(f"publish needs {_SLOT} bytes, got {len(block)}")
        base = slot * _SLOT
        self.slab[base + 1 : base + _SLOT] = block[1:]
        self._acquired.pop(0)
        self.slab[base] = 1  # publication point

    def free_slots(self) -> int:
        return self._comp_wr - self._comp_rd

    # -- NIC side --------------------------------------------------------

    def dirty_run(self) -> int:
        """Length of the consecutive dirty run at the fetch cursor."""
        self._nic.check()
        fetched = set(self._fetched)
        n = 0
        while n < self.depth:
            idx = (self.nic_fetch_cursor + n) % self.depth
            if self.slab[idx * _SLOT] != 1 or idx in fetched:
                break
            n += 1
        return n

    def nic_fetch(self, max_batch: int):
        """Fetch up to max_batch consecutive dirty entries, in publish order.

        Returns a list of (slot index, 64-byte copy); empty when nothing is
        dirty.
        """
        self._nic.check()
        if max_batch < 1:
            raise ContractViolation("max_batch must be >= 1")
        fetched = set(self._fetched)
        out = []
        while len(out) < max_batch:
            idx = self.nic_fetch_cursor
            base = idx * _SLOT
            if self.slab[base] != 1 or idx in fetched:
                break
            out.append((idx, bytes(self.slab[base : base + _SLOT])))
            self._fetched.append(idx)
            fetched.add(idx)
            self.nic_fetch_cursor = (idx + 1) % self.depth
        return out

    def nic_release(self, slots) -> None:
        """Reset flags and hand the indices back through the completion ring.

        Bookkeeping follows fetch order: the released set must be the oldest
        fetched entries (the NIC FSM frees what it just forwarded).
        """
        self._nic.check()
        slots = list(slots)
        prefix = self._fetched[: len(slots)]
        if sorted(slots) != sorted(prefix) or len(set(slots)) != len(slots):
            raise ContractViolation(
                f"release {slots} is not the oldest fetched prefix {prefix}"
            )
        del self._fetched[: len(slots)]
        for idx in prefix:  # completion ring keeps circular order
            self.slab[idx * _SLOT] = 0
            self._comp[self._comp_wr % self.depth] = idx
            self._comp_wr += 1

    # -- diagnostics -----------------------------------------------------

    def outstanding(self) -> int:
        return self.depth - self.free_slots() - len(self._acquired)

    def dump_csv(self) -> str:
        return _dump_slab(self.slab, self.depth)

    def snapshot(self) -> dict:
        return {
            "slab": self.slab.hex(),
            "comp": list(self._comp),
            "comp_wr": self._comp_wr,
            "comp_rd": self._comp_rd,
            "fetch_cursor": self.nic_fetch_cursor,
            "acquired": list(self._acquired),
            "fetched": list(self._fetched),
        }

    def restore(self, state: dict) -> None:
        self.slab[:] = bytes.fromhex(state["slab"])
        self._comp = list(state["comp"])
        self._comp_wr = state["comp_wr"]
        self._comp_rd = state["comp_rd"]
        self.nic_fetch_cursor = state["fetch_cursor"]
        self._acquired = list(state["acquired"])
        self._fetched = list(state["fetched"])


class RxRing:
    """NIC-to-host ring. The NIC writes arrivals in order to the next free
    slot; a dirty slot at the write cursor means the host has not caught up
    and the NIC must stall (backpressure, never drop).
    """

    def __init__(self, depth: int = DEFAULT_DEPTH):
        self.depth = _require_pow2(depth)
        self.slab = bytearray(_SLOT * self.depth)
        self.nic_free_cursor = 0
        self.host_poll_cursor = 0
        self._host = _SideGuard("RxRing host")
        self._nic = _SideGuard("RxRing nic")

    def rx_deliver(self, block: bytes) -> bool:
        """NIC side: write one entry; False signals backpressure (ring full)."""
        self._nic.check()
        idx = self.nic_free_cursor
        base = idx * _SLOT
        if self.slab[base] == 1:
            return False
        self.slab[base + 1 : base + _SLOT] = block[1:]
        self.slab[base] = 1
        self.nic_free_cursor = (idx + 1) % self.depth
        return True

    def rx_poll(self):
        """Host side: next delivered entry as (slot, bytes), or None."""
        self._host.check()
        idx = self.host_poll_cursor
        base = idx * _SLOT
        if self.slab[base] != 1:
            return None
        self.host_poll_cursor = (idx + 1) % self.depth
        return idx, bytes(self.slab[base : base + _SLOT])

    def rx_release(self, slot: int) -> None:
        """Host side: mark a consumed slot free for the NIC again."""
        self._host.check()
        self.slab[slot * _SLOT] = 0

    def dump_csv(self) -> str:
        return _dump_slab(self.slab, self.depth)

    def snapshot(self) -> dict:
        return {
            "slab": self.slab.hex(),
            "free_cursor": self.nic_free_cursor,
            "poll_cursor": self.host_poll_cursor,
        }

    def restore(self, state: dict) -> None:
        self.slab[:] = bytes.fromhex(state["slab"])
        self.nic_free_cursor = state["free_cursor"]
        self.host_poll_cursor = state["poll_cursor"]


class CompletionQueue:
    """FIFO of decoded responses delivered to an async application."""

    def __init__(self, capacity: int = COMPLETION_QUEUE_CAPACITY):
        self.capacity = capacity
        self._q = deque()

    def cq_push(self, response) -> None:
        if len(self._q) >= self.capacity:
            raise ContractViolation("completion queue overflow")
        self._q.append(response)

    def cq_drain(self):
        out = list(self._q)
        self._q.clear()
        return out

    def __len__(self) -> int:
        return len(self._q)


class RingPair:
    """The TX/RX rings provisioned for one connection (one queue pair)."""

    def __init__(self, depth: int = DEFAULT_DEPTH):
        self.tx = TxRing(depth)
        self.rx = RxRing(depth)


def _dump_slab(slab: bytearray, depth: int) -> str:
    # one line per slot: idx,valid,conn,rpc,fn,len,crc
    lines = ["idx,valid,conn,rpc,fn,len,crc"]
    for idx in range(depth):
        raw = bytes(slab[idx * _SLOT : (idx + 1) * _SLOT])
        valid = raw[0]
        conn = int.from_bytes(raw[2:4], "little")
        rpc = int.from_bytes(raw[4:8], "little")
        fn = int.from_bytes(raw[8:10], "little")
        plen = raw[10]
        crc = zlib.crc32(raw) & 0xFFFFFFFF
        lines.append(f"{idx},{valid},{conn},{rpc},{fn},{plen},{crc:08x}")
    return "\n".join(lines) + "\n"
