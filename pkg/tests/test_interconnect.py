"""Cost-model unit tests: closed forms, channel simulation, arbiter, fit."""

import json

import pytest

import nicsim.interconnect as ic
from nicsim.errors import ConfigInvalid, UnderdeterminedFit
from nicsim.interconnect import (
    BusArbiter,
    CostParams,
    Transaction,
    arbiter_grant,
    bandwidth_headroom_ratio,
    calibrate,
    closed_form_rate,
    steady_rate_mrps,
    tx_coherent_submit,
    tx_doorbell_submit,
    tx_mmio_submit,
)

P = CostParams()


def _dense_publishes(n=20_000, gap_ns=5.0):
    return [i * gap_ns for i in range(n)]


# -- closed forms vs channel simulation (dual route, within 2%) -------------


@pytest.mark.parametrize(
    "mode,batch",
    [("mmio", 1), ("doorbell", 1), ("doorbell", 3), ("doorbell", 4),
     ("doorbell", 7), ("doorbell", 11), ("doorbell", 32),
     ("coherent", 1), ("coherent", 4)],
)
def test_channel_sim_matches_closed_form(mode, batch):
    pubs = _dense_publishes()
    if mode == "mmio":
        _, visible = tx_mmio_submit(P, pubs)
    elif mode == "doorbell":
        _, visible = tx_doorbell_submit(P, pubs, batch)
    else:
        _, visible = tx_coherent_submit(P, pubs, batch)
    simulated = steady_rate_mrps(visible, pubs)
    expected = closed_form_rate(P, mode, batch) / 1e6
    assert simulated == pytest.approx(expected, rel=0.02)


def test_saturated_mmio_rate_hits_published_bar():
    _, visible = tx_mmio_submit(P, _dense_publishes())
    assert steady_rate_mrps(visible, _dense_publishes()) == pytest.approx(4.2, rel=0.05)


def test_single_mmio_store_visibility():
    txns, visible = tx_mmio_submit(P, [0.0])
    assert [t.kind for t in txns] == [ic.KIND_MMIO_STORE]
    # issue occupancy plus the calibrated interconnect traversals
    assert visible[0] == pytest.approx(P.t_mmio + 3 * P.t_dma_write)


def test_doorbell_published_bars():
    for batch, target in [(1, 4.3), (3, 7.9), (7, 9.9), (11, 10.8)]:
        assert closed_form_rate(P, "doorbell", batch) / 1e6 == pytest.approx(target, rel=0.05)
    assert closed_form_rate(P, "doorbell", 32) / 1e6 == pytest.approx(12.0, rel=0.05)


def test_doorbell_waits_for_full_batch():
    txns, visible = tx_doorbell_submit(P, [0.0, 10.0], batch=4)
    assert txns == [] and visible == []  # no timeout: two pending, four needed


def test_coherent_published_bars():
    assert closed_form_rate(P, "coherent", 1) / 1e6 == pytest.approx(8.1, rel=0.01)
    assert closed_form_rate(P, "coherent", 4) / 1e6 == pytest.approx(12.4, rel=0.01)


def test_coherent_submodes_latency_split():
    _, inval_vis = tx_coherent_submit(P, [0.0], 1, submode=ic.SUBMODE_INVAL)
    _, direct_vis = tx_coherent_submit(P, [0.0], 1, submode=ic.SUBMODE_DIRECT)
    assert inval_vis[0] == pytest.approx(P.t_inval + P.t_poll + P.t_cl)
    assert direct_vis[0] == pytest.approx(P.t_poll / 2 + P.t_poll + P.t_cl)


def test_throughput_monotone_in_batch():
    for mode in ("doorbell", "coherent"):
        rates = [closed_form_rate(P, mode, b) for b in range(1, 64)]
        assert rates == sorted(rates)


# -- cost params -------------------------------------------------------------


def test_params_json_roundtrip(tmp_path):
    path = tmp_path / "params.json"
    P.save(path)
    assert CostParams.load(path) == P


def test_params_unknown_key_rejected(tmp_path):
    path = tmp_path / "params.json"
    data = json.loads(P.to_json())
    data["t_bogus"] = 5
    path.write_text(json.dumps(data))
    with pytest.raises(ConfigInvalid, match="t_bogus"):
        CostParams.load(path)


def test_params_positivity_enforced():
    with pytest.raises(ConfigInvalid, match="t_mmio"):
        P.replace(t_mmio=0)


def test_transaction_csv_row():
    txn = Transaction(1234.5, "nic0", ic.KIND_DMA_READ, 4)
    assert txn.csv_row() == "1234.5,nic0,DmaReadBatch,4"
    assert ic.TRACE_CSV_HEADER == "ts_ns,issuer,kind,count"


# -- calibration --------------------------------------------------------------


def test_calibrate_exact_interpolation_coherent():
    params, residuals = calibrate([("coherent", 1, 8.1), ("coherent", 4, 12.4)])
    assert closed_form_rate(params, "coherent", 1) / 1e6 == pytest.approx(8.1, abs=1e-9)
    assert closed_form_rate(params, "coherent", 4) / 1e6 == pytest.approx(12.4, abs=1e-9)
    assert all(err < 1e-9 for *_ , err in residuals)


def test_calibrate_heldout_doorbell_prediction():
    params, _ = calibrate([("doorbell", 1, 4.3), ("doorbell", 32, 12.0)])
    for batch, target in [(3, 7.9), (7, 9.9), (11, 10.8)]:
        predicted = closed_form_rate(params, "doorbell", batch) / 1e6
        assert abs(predicted - target) / target < 0.10


def test_calibrate_empty_and_underdetermined():
    with pytest.raises(UnderdeterminedFit):
        calibrate([])
    with pytest.raises(UnderdeterminedFit):
        calibrate([("doorbell", 1, 4.3)])


def test_shipped_defaults_match_calibration_of_shipped_datapoints():
    from nicsim.interconnect import load_datapoints
    from importlib import resources

    with resources.files("nicsim.data").joinpath("calibration_points.json").open() as fh:
        import json as _json

        raw = _json.load(fh)
    points = [(r["mode"], r["B"], r["mrps"]) for r in raw]
    fitted, _ = calibrate(points)
    from nicsim.sim import default_cost_params

    shipped = default_cost_params()
    for name in ("t_mmio", "t_doorbell", "t_entry", "t_poll", "t_cl"):
        assert getattr(fitted, name) == pytest.approx(getattr(shipped, name), rel=1e-9)


# -- arbiter -----------------------------------------------------------------


def test_arbiter_fairness_both_backlogged():
    arb = BusArbiter([0, 1], 80e6)
    schedule = arbiter_grant(arb, {0: 5000, 1: 5000})
    assert abs(arb.grant_counts[0] - arb.grant_counts[1]) <= 1
    # alternating grants while both are backlogged
    first_hundred = [who for _, who in schedule[:100]]
    assert first_hundred == [i % 2 for i in range(100)] or first_hundred == [
        (i + 1) % 2 for i in range(100)
    ]
    for (t1, _), (t2, _) in zip(schedule, schedule[1:]):
        assert t2 - t1 == pytest.approx(12.5)


def test_arbiter_idle_peer_gets_full_budget():
    arb = BusArbiter([0, 1], 80e6)
    schedule = arbiter_grant(arb, {0: 1000, 1: 0})
    assert all(who == 0 for _, who in schedule)
    assert schedule[-1][0] == pytest.approx(1000 * 12.5)


def test_arbiter_caps_aggregate_rate():
    arb = BusArbiter([0, 1], 80e6)
    # 100 Mrps offered for 1 ms -> 100k transactions submitted at t=0
    schedule = arbiter_grant(arb, {0: 50_000, 1: 50_000})
    within_window = sum(1 for t, _ in schedule if t <= 1e6)
    assert within_window / 1e6 * 1e3 == pytest.approx(80.0, rel=0.01)  # Mrps


def test_bandwidth_headroom_ratio():
    assert bandwidth_headroom_ratio(84e6, 41.6) == pytest.approx(7.74, abs=0.01)
