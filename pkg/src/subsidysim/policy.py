"""Coverage-loss projection and budget-constrained subsidy allocation.

The allocation problem is a linear program with box constraints and one
budget row::

    max_s  sum_i s_i * |ME_i| / 100
    s.t.   0 <= s_i <= cap_i,   12 * sum_i s_i <= B

whose optimum is the fractional-knapsack fill: sort by |ME| descending and
fill caps until the monthly pool ``B / 12`` runs out. ``ME_i`` is the
coverage response in percentage points per monthly dollar, so dividing by 100
gives expected persons retained.

Anything exposing ``marginal_effect(fpl)`` can drive the simulation: a fitted
:class:`~subsidysim.demand.DemandFit` or a :class:`BandedEffects` table.
"""

from __future__ import annotations

import csv
import json
from dataclasses import asdict, dataclass, fields

import numpy as np

from .bands import EFFECT_BANDS, LOSS_BANDS, Band
from .errors import ConfigError, DataError
from .population import PersonTable, _fmt
from .premium import PovertyGuidelines, quote_delta_table, quote_table

PER = 10_000_000.0  # cost-effectiveness unit: persons per $10M


@dataclass(frozen=True)
class BandedEffects:
    """Piecewise-constant marginal effects (pp per $/month) by income band."""

    bands: tuple[Band, ...]
    values: tuple[float, ...]

    def __post_init__(self):
        if len(self.bands) != len(self.values):
            raise ConfigError("one marginal effect per band required")

    @classmethod
    def from_dict(cls, mapping: dict) -> BandedEffects:
        """Keys are band names such as ``"151-200"`` or band dicts.

        Standard names resolve to the built-in effect bands, whose lower ends
        are open at the previous band's top (so "151-200" covers (150, 200]).
        """
        known = {b.name: b for b in EFFECT_BANDS}
        bands, values = [], []
        for key, val in mapping.items():
            bands.append(known[key] if isinstance(key, str) and key in known else Band.parse(key))
            values.append(float(val))
        return cls(tuple(bands), tuple(values))

    def marginal_effect(self, fpl):
        fpl = np.asarray(fpl, dtype=float)
        out = np.full(fpl.shape, np.nan)
        for b, v in zip(self.bands, self.values):
            out = np.where(np.isnan(out) & b.contains(fpl), v, out)
        if np.isnan(out).any():
            bad = fpl[np.isnan(out)]
            raise DataError(f"{bad.size} FPL value(s) outside the effect bands, e.g. {float(bad.flat[0])}")
        return out


# -- loss projection -----------------------------------------------------------

@dataclass(frozen=True)
class LossProjection:
    baseline: float
    projected: float
    band_names: tuple[str, ...]
    band_losses: tuple[float, ...]

    def __post_init__(self):
        total = sum(self.band_losses)
        scale = max(abs(self.baseline), 1.0)
        if abs(total - (self.baseline - self.projected)) > 1e-9 * scale:
            raise DataError(
                f"band losses sum to {total} but baseline - projected = {self.baseline - self.projected}"
            )

    @property
    def total_loss(self) -> float:
        return self.baseline - self.projected

    @property
    def loss_share(self) -> float:
        return self.total_loss / self.baseline if self.baseline else 0.0

    @property
    def band_shares(self) -> tuple[float, ...]:
        total = sum(self.band_losses)
        if total == 0:
            return tuple(0.0 for _ in self.band_losses)
        return tuple(x / total for x in self.band_losses)

    def rows(self):
        for name, loss, share in zip(self.band_names, self.band_losses, self.band_shares):
            yield {"band": name, "loss": loss, "share": share}


def losses_from_deltas(fpl, delta, marginal_effect, bands=LOSS_BANDS, weights=None) -> LossProjection:
    """Aggregate expected coverage losses from per-person premium increases.

    Every enrollee starts at probability 100; the projected probability is
    ``100 + ME * delta`` clipped to [0, 100].
    """
    fpl = np.asarray(fpl, dtype=float)
    delta = np.asarray(delta, dtype=float)
    me = np.broadcast_to(np.asarray(marginal_effect, dtype=float), fpl.shape)
    w = np.ones_like(fpl) if weights is None else np.asarray(weights, dtype=float)
    if np.isnan(delta).any():
        raise DataError("premium change missing for some enrollees")
    prob = np.clip(100.0 + me * delta, 0.0, 100.0)
    loss = w * (100.0 - prob) / 100.0
    assigned = np.zeros(fpl.shape, bool)
    band_losses = []
    for b in bands:
        m = b.contains(fpl) & ~assigned
        assigned |= m
        band_losses.append(float(loss[m].sum()))
    if not assigned.all():
        raise DataError(f"{int((~assigned).sum())} enrollee(s) fall outside the loss bands")
    baseline = float(w.sum())
    # projected derived from the band sum so the identity is exact
    return LossProjection(baseline, baseline - float(sum(band_losses)), tuple(b.name for b in bands), tuple(band_losses))


def project_losses(enrollees: PersonTable, fit, regime_ira, regime_aca, plans,
                   guidelines: PovertyGuidelines | None = None, bands=LOSS_BANDS) -> LossProjection:
    """Expected enrollment if enhanced subsidies lapse (IRA -> ACA terms)."""
    guidelines = guidelines or PovertyGuidelines.bundled()
    qa = quote_table(enrollees, regime_ira, plans, guidelines)
    qb = quote_table(enrollees, regime_aca, plans, guidelines)
    if not (qa.quotable.all() and qb.quotable.all()):
        raise DataError("some enrollees are not quotable under both regimes")
    delta, _ = quote_delta_table(qa, qb)
    return losses_from_deltas(enrollees.fpl, delta, fit.marginal_effect(enrollees.fpl), bands)


def write_losses(proj: LossProjection, path, header_lines=()) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        for line in header_lines:
            fh.write(f"# {line}\n")
        fh.write("# units: expected enrollees\n")
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["band", "loss", "share"])
        for r in proj.rows():
            w.writerow([r["band"], _fmt(round(r["loss"], 4)), _fmt(round(r["share"], 6))])
        w.writerow(["total", _fmt(round(proj.total_loss, 4)), _fmt(round(proj.loss_share, 6))])
        w.writerow(["baseline", _fmt(round(proj.baseline, 4)), ""])
        w.writerow(["projected", _fmt(round(proj.projected, 4)), ""])


# -- allocation ----------------------------------------------------------------

@dataclass(frozen=True)
class AllocationResult:
    budget: float
    subsidies: np.ndarray
    caps: np.ndarray
    spend: float
    gain: float
    marginal_enrollee_fpl: float
    mean_subsidy: float
    cost_effectiveness: float
    marginal_cost_per_pp: float

    @property
    def n_subsidized(self) -> int:
        return int(np.count_nonzero(self.subsidies))


class FillOrder:
    """Greedy order for one population; evaluating a budget is O(log n).

    Persons with zero response are never funded since spending on them buys
    nothing. Ties in |ME| go to the smaller cap first, then ``ids`` order.
    """

    def __init__(self, rate, caps, fpl=None, ids=None):
        rate = np.abs(np.asarray(rate, dtype=float))
        caps = np.asarray(caps, dtype=float)
        if rate.shape != caps.shape:
            raise ValueError("rate and caps must align")
        if np.any(caps < 0) or np.isnan(caps).any() or np.isnan(rate).any():
            raise DataError("caps must be non-negative and finite; rates finite")
        n = len(rate)
        ids = np.arange(n) if ids is None else np.asarray(ids)
        self.n = n
        self.rate_all = rate
        self.caps_all = caps
        self.fpl_all = np.full(n, np.nan) if fpl is None else np.asarray(fpl, dtype=float)
        order = np.lexsort((ids, caps, -rate))
        order = order[(rate[order] > 0) & (caps[order] > 0)]
        self.order = order
        self.rate = rate[order]
        self.caps = caps[order]
        self.cum_cap = np.cumsum(self.caps)
        self.cum_gain = np.cumsum(self.caps * self.rate / 100.0)

    def _split(self, budget):
        """(number fully filled, partial amount for the next person) for a budget."""
        monthly = budget / 12.0
        k = int(np.searchsorted(self.cum_cap, monthly, side="right"))
        filled = self.cum_cap[k - 1] if k else 0.0
        partial = 0.0
        if k < len(self.order):
            partial = min(monthly - filled, self.caps[k])
        return k, max(partial, 0.0)

    def result(self, budget: float) -> AllocationResult:
        if budget < 0:
            raise ValueError("budget must be non-negative")
        k, partial = self._split(budget)
        s = np.zeros(self.n)
        s[self.order[:k]] = self.caps[:k]
        if partial > 0:
            s[self.order[k]] = partial
        monthly_spend = (self.cum_cap[k - 1] if k else 0.0) + partial
        gain = (self.cum_gain[k - 1] if k else 0.0) + partial * (self.rate[k] / 100.0 if partial > 0 else 0.0)
        last = k if partial > 0 else k - 1
        if last >= 0:
            fpl_m = float(self.fpl_all[self.order[last]])
            cost_pp = 1.0 / self.rate[last]
        else:
            fpl_m = cost_pp = float("nan")
        return AllocationResult(
            budget=float(budget),
            subsidies=s,
            caps=self.caps_all,
            spend=12.0 * monthly_spend,
            gain=float(gain),
            marginal_enrollee_fpl=fpl_m,
            mean_subsidy=monthly_spend / gain if gain > 0 else float("nan"),
            cost_effectiveness=gain / (budget / PER) if budget > 0 else float("nan"),
            marginal_cost_per_pp=cost_pp,
        )


def allocate(enrollees: PersonTable, fit, caps, budget: float) -> AllocationResult:
    """Optimal allocation of an annual ``budget`` across ``enrollees``."""
    rate = fit.marginal_effect(enrollees.fpl)
    return FillOrder(rate, caps, enrollees.fpl, enrollees.person_id).result(budget)


def allocate_arrays(rate, caps, budget: float, fpl=None) -> AllocationResult:
    return FillOrder(rate, caps, fpl).result(budget)


def subsidy_caps(enrollees: PersonTable, regime_ira, regime_aca, plans,
                 guidelines: PovertyGuidelines | None = None):
    """Per-person monthly cap: IRA-era subsidy above what ACA terms would pay."""
    guidelines = guidelines or PovertyGuidelines.bundled()
    qa = quote_table(enrollees, regime_ira, plans, guidelines)
    qb = quote_table(enrollees, regime_aca, plans, guidelines)
    if not (qa.quotable.all() and qb.quotable.all()):
        raise DataError("some enrollees are not quotable under both regimes")
    return quote_delta_table(qa, qb)[1]


@dataclass(frozen=True)
class SweepRow:
    budget: float
    total_gain: float
    marginal_gain: float
    marginal_enrollee_fpl: float
    cost_effectiveness_total: float
    cost_effectiveness_marginal: float
    mean_subsidy: float
    spend: float
    marginal_cost_per_pp: float


SWEEP_COLUMNS = tuple(f.name for f in fields(SweepRow))
SWEEP_UNITS = {
    "budget": "$/yr",
    "total_gain": "expected enrollees",
    "marginal_gain": "expected enrollees vs previous row",
    "marginal_enrollee_fpl": "%FPL",
    "cost_effectiveness_total": "enrollees per $10M",
    "cost_effectiveness_marginal": "enrollees per $10M",
    "mean_subsidy": "$/month per retained enrollee",
    "spend": "$/yr actually allocated",
    "marginal_cost_per_pp": "$/month per pp for marginal enrollee (derived extra column)",
}


def sweep_order(order: FillOrder, budgets) -> list[SweepRow]:
    budgets = [float(b) for b in budgets]
    if any(b < 0 for b in budgets) or any(b2 < b1 for b1, b2 in zip(budgets, budgets[1:])):
        raise ValueError("budgets must be non-negative and ascending")
    rows = []
    prev_b, prev_g = 0.0, 0.0
    for b in budgets:
        r = order.result(b)
        dg = r.gain - prev_g
        db = b - prev_b
        rows.append(SweepRow(
            budget=b,
            total_gain=r.gain,
            marginal_gain=dg,
            marginal_enrollee_fpl=r.marginal_enrollee_fpl,
            cost_effectiveness_total=r.cost_effectiveness,
            cost_effectiveness_marginal=dg / (db / PER) if db > 0 else float("nan"),
            mean_subsidy=r.mean_subsidy,
            spend=r.spend,
            marginal_cost_per_pp=r.marginal_cost_per_pp,
        ))
        prev_b, prev_g = b, r.gain
    return rows


def sweep(enrollees: PersonTable, fit, caps, budgets) -> list[SweepRow]:
    """Table of allocations over ascending budgets sharing one fill order."""
    rate = fit.marginal_effect(enrollees.fpl)
    return sweep_order(FillOrder(rate, caps, enrollees.fpl, enrollees.person_id), budgets)


def realize(result: AllocationResult, rate, seed: int) -> int:
    """One seeded Bernoulli draw of enrollees retained by ``result``."""
    p = np.clip(result.subsidies * np.abs(np.asarray(rate, dtype=float)) / 100.0, 0.0, 1.0)
    rng = np.random.default_rng(seed)
    return int((rng.random(p.shape) < p).sum())


def write_sweep(rows, path, header_lines=()) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        for line in header_lines:
            fh.write(f"# {line}\n")
        fh.write("# units: " + "; ".join(f"{k}={v}" for k, v in SWEEP_UNITS.items()) + "\n")
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(SWEEP_COLUMNS)
        for r in rows:
            w.writerow([_fmt(round(v, 6)) for v in asdict(r).values()])


def sweep_to_dicts(rows) -> list[dict]:
    return [{k: (None if isinstance(v, float) and np.isnan(v) else v) for k, v in asdict(r).items()} for r in rows]


def plot_data(rows) -> dict:
    """x/y series for each sweep panel, budgets in $M on x."""
    x = [r.budget / 1e6 for r in rows]
    panels = []
    for col in SWEEP_COLUMNS[1:]:
        ys = [getattr(r, col) for r in rows]
        panels.append({
            "panel": col,
            "x_label": "annual budget ($M)",
            "y_label": SWEEP_UNITS[col],
            "x": x,
            "y": [None if np.isnan(v) else v for v in ys],
        })
    return {
        "panels": panels,
        "note": "one panel per sweep column, keyed by column name",
    }


def write_plot_data(rows, path, provenance=None) -> None:
    data = plot_data(rows)
    if provenance is not None:
        data = {"provenance": provenance, **data}
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(data, fh, indent=2, sort_keys=False)
        fh.write("\n")
