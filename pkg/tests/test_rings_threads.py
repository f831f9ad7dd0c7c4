"""Publication-contract checks under real threads.

The heavyweight million-RPC versions of these runs live in the acceptance
suite; here the same rigs run at a smaller scale as regression guards.
"""

from nicsim.realthreads import (
    checksummed_payload,
    payload_intact,
    run_echo_stress,
    run_spsc_stress,
)


def test_checksum_helpers():
    p = checksummed_payload(1234, 99)
    assert len(p) == 48
    assert payload_intact(p)
    torn = p[:20] + bytes([p[20] ^ 0xFF]) + p[21:]
    assert not payload_intact(torn)


def test_spsc_publication_contract_threaded():
    stats = run_spsc_stress(150_000)
    assert stats.completed == 150_000
    assert stats.clean, stats


def test_echo_roundtrip_threaded():
    stats = run_echo_stress(100_000)
    assert stats.completed == 100_000
    assert stats.clean, stats
