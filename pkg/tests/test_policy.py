import json

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from oracles import knapsack_dp

from subsidysim.errors import DataError
from subsidysim.policy import (BandedEffects, FillOrder, LossProjection, allocate, allocate_arrays,
                               losses_from_deltas, plot_data, project_losses, realize, subsidy_caps, sweep,
                               sweep_order, write_losses, write_sweep)
from subsidysim.population import PersonTable

TABLE3 = {"138-150": -0.67, "151-200": -0.64, "201-250": -0.29, "251-300": -0.25, "301-400": -0.20}


def enrollees(fpl, ages=None):
    n = len(fpl)
    return PersonTable.from_columns({
        "person_id": [f"E{i:03d}" for i in range(n)], "hiu_id": [f"H{i}" for i in range(n)],
        "year": [2024] * n, "age": ages or [40] * n, "female": [0] * n, "fpl": fpl,
        "rating_area": ["RA1"] * n, "weight": [1.0] * n, "insured": [1] * n,
        "source": ["enrollee"] * n, "hiu_size": [1] * n,
    })


def test_banded_effects_boundaries():
    me = BandedEffects.from_dict(TABLE3)
    np.testing.assert_allclose(me.marginal_effect([138, 150, 150.01, 200, 200.5, 300, 400]),
                               [-0.67, -0.67, -0.64, -0.64, -0.29, -0.25, -0.20])
    with pytest.raises(DataError):
        me.marginal_effect([401])


def test_zero_delta_zero_losses():
    proj = losses_from_deltas([150, 250, 350], [0, 0, 0], [-0.5, -0.5, -0.5])
    assert proj.total_loss == 0 and proj.projected == proj.baseline == 3
    assert proj.band_shares == (0.0, 0.0, 0.0)


def test_zero_effects_zero_losses():
    proj = losses_from_deltas([150, 250, 350], [50, 80, 100], 0.0)
    assert proj.total_loss == 0


def test_probabilities_clamped():
    proj = losses_from_deltas([150, 250], [1e6, -1e6], -0.5)
    assert proj.band_losses[0] == 1.0 and proj.band_losses[1] == 0.0


def test_loss_identity_and_shares():
    rng = np.random.default_rng(0)
    fpl = rng.uniform(138, 400, 500)
    proj = losses_from_deltas(fpl, rng.uniform(0, 150, 500), BandedEffects.from_dict(TABLE3).marginal_effect(fpl))
    assert sum(proj.band_losses) == pytest.approx(proj.baseline - proj.projected, abs=1e-9)
    assert sum(proj.band_shares) == pytest.approx(1.0, abs=1e-9)


def test_reference_loss_fixture():
    proj = LossProjection(136_308, 80_065, ("138-200", "201-300", "301-400"), (32_775, 19_661, 3_807))
    assert [round(s, 3) for s in proj.band_shares] == [0.583, 0.350, 0.068]
    assert round(proj.loss_share, 3) == 0.413
    with pytest.raises(DataError):
        LossProjection(136_308, 80_000, ("a",), (32_775,))


def test_project_losses_uses_quotes(ira, aca, simple_plans):
    e = enrollees([140.0, 180.0, 260.0, 390.0], ages=[25, 40, 50, 60])
    me = BandedEffects.from_dict(TABLE3)
    proj = project_losses(e, me, ira, aca, simple_plans)
    assert 0 < proj.total_loss < len(e)
    assert proj.baseline == 4


def test_two_enrollee_example():
    res = allocate_arrays([0.65, 0.25], [150.0, 200.0], 21_600)
    np.testing.assert_allclose(res.subsidies, [150.0, 200.0])
    assert res.spend == pytest.approx(12 * 350)
    assert res.gain == pytest.approx(150 * 0.0065 + 200 * 0.0025)


def test_partial_marginal_enrollee():
    res = allocate_arrays([0.65, 0.25], [150.0, 200.0], 12 * 200)
    np.testing.assert_allclose(res.subsidies, [150.0, 50.0])
    assert res.marginal_cost_per_pp == pytest.approx(1 / 0.25)


def test_slack_budget_fills_every_cap():
    rate = np.array([0.5, 0.3, 0.2])
    caps = np.array([10.0, 20.0, 30.0])
    res = allocate_arrays(rate, caps, 1e9)
    np.testing.assert_array_equal(res.subsidies, caps)
    assert res.gain == pytest.approx(np.sum(caps * rate) / 100)


def test_zero_budget():
    res = allocate_arrays([0.5], [10.0], 0.0)
    assert res.gain == 0 and res.spend == 0 and res.n_subsidized == 0
    assert np.isnan(res.mean_subsidy) and np.isnan(res.marginal_enrollee_fpl)


def test_tie_break_smaller_cap_then_id():
    e = enrollees([160.0, 170.0, 180.0])
    me = BandedEffects.from_dict(TABLE3)
    res = allocate(e, me, np.array([30.0, 10.0, 10.0]), 12 * 15)
    np.testing.assert_allclose(res.subsidies, [0.0, 10.0, 5.0])
    assert res.marginal_enrollee_fpl == 180.0


def test_zero_response_never_funded():
    res = allocate_arrays([0.0, 0.5], [100.0, 10.0], 12 * 100)
    np.testing.assert_allclose(res.subsidies, [0.0, 10.0])


def test_spend_identity():
    rng = np.random.default_rng(1)
    res = allocate_arrays(rng.uniform(0.1, 0.7, 200), rng.uniform(0, 200, 200), 5e5)
    assert res.gain * res.mean_subsidy * 12 == pytest.approx(res.spend, rel=1e-6)
    assert res.spend <= 5e5 + 1e-6
    assert np.all(res.subsidies <= res.caps + 1e-12)


@settings(max_examples=150, deadline=None)
@given(st.lists(st.tuples(st.integers(0, 9), st.integers(0, 25)), min_size=1, max_size=12), st.integers(0, 320))
def test_greedy_matches_dp(items, monthly):
    rates = np.array([r for r, _ in items])
    caps = np.array([c for _, c in items])
    res = allocate_arrays(rates.astype(float), caps.astype(float), 12.0 * monthly)
    assert int(round(res.gain * 100)) == knapsack_dp(rates, caps, monthly)


def test_sweep_single_point_matches_allocate():
    rng = np.random.default_rng(2)
    fpl = rng.uniform(138, 400, 300)
    e = enrollees(list(fpl))
    caps = rng.uniform(0, 150, 300)
    me = BandedEffects.from_dict(TABLE3)
    row = sweep(e, me, caps, [1e5])[0]
    res = allocate(e, me, caps, 1e5)
    assert row.total_gain == res.gain and row.mean_subsidy == res.mean_subsidy


def test_sweep_monotone_and_differences():
    rng = np.random.default_rng(3)
    order = FillOrder(rng.uniform(0.1, 0.7, 400), rng.uniform(0, 150, 400), rng.uniform(138, 400, 400))
    budgets = [i * 5e4 for i in range(1, 16)]
    rows = sweep_order(order, budgets)
    gains = [r.total_gain for r in rows]
    assert all(b >= a for a, b in zip(gains, gains[1:]))
    marg = [r.marginal_gain for r in rows]
    assert all(b <= a + 1e-9 for a, b in zip(marg, marg[1:]))
    assert marg[3] == pytest.approx(gains[3] - gains[2])
    assert rows[0].cost_effectiveness_marginal == pytest.approx(rows[0].marginal_gain / (5e4 / 1e7))


def test_sweep_requires_ascending():
    order = FillOrder([0.5], [10.0])
    with pytest.raises(ValueError):
        sweep_order(order, [2e6, 1e6])


def test_subsidy_caps_are_headroom(ira, aca, simple_plans):
    e = enrollees([140.0, 250.0, 380.0])
    caps = subsidy_caps(e, ira, aca, simple_plans)
    assert np.all(caps >= 0) and caps[0] > 0


def test_realize_seeded():
    res = allocate_arrays([50.0] * 100, [1.0] * 100, 12 * 60)
    a = realize(res, [50.0] * 100, seed=5)
    assert a == realize(res, [50.0] * 100, seed=5)
    assert 10 <= a <= 50


def test_writers(tmp_path):
    order = FillOrder([0.6, 0.3], [100.0, 100.0], [150.0, 250.0])
    rows = sweep_order(order, [1200.0, 2400.0, 3600.0])
    write_sweep(rows, tmp_path / "s.csv", ["seed: 1"])
    lines = (tmp_path / "s.csv").read_text().splitlines()
    assert lines[0] == "# seed: 1" and lines[1].startswith("# units:") and len(lines) == 6
    data = plot_data(rows)
    assert len(data["panels"]) == 8 and data["panels"][0]["x"] == [0.0012, 0.0024, 0.0036]
    json.dumps(data)
    write_losses(losses_from_deltas([150, 250], [10, 10], -0.5), tmp_path / "l.csv")
    assert "138-200" in (tmp_path / "l.csv").read_text()
