"""Premium subsidy calculation.

The computation per person-year:

1. lowest and second-lowest (benchmark) silver base premiums in the
   rating-area-year;
2. age-rate both;
3. federal PTC = aged benchmark - expected contribution, floored at zero, and
   zero for PTC-ineligible incomes;
4. state supplement, then the post-subsidy lowest-silver premium floored at zero.

Dollar amounts are monthly and per person. The household expected
contribution is split evenly across HIU members because age rating (and hence
premiums) are per person while income is a household attribute.
"""

from __future__ import annotations

import csv
import json
from dataclasses import dataclass, fields
from importlib import resources
from typing import Any

import numpy as np

from .errors import ConfigError, DataError
from .population import Person, PersonTable, PlanOffering, _fmt
from .regimes import ECP_REDUCTION, FIXED_DOLLAR, AgeCurve, Regime, ptc_eligible


@dataclass(frozen=True)
class PovertyGuidelines:
    """Annual poverty guideline by guideline year: first person + each additional.

    PTCs for coverage year Y use the guidelines published in year Y - ``lag``.
    """

    table: dict[int, tuple[float, float]]
    lag: int = 1

    @classmethod
    def from_dict(cls, data: dict[str, Any]) -> PovertyGuidelines:
        try:
            table = {int(y): (float(v["first_person"]), float(v["additional_person"]))
                     for y, v in data["guidelines"].items()}
            return cls(table, int(data.get("coverage_year_lag", 1)))
        except (KeyError, TypeError, ValueError) as exc:
            raise ConfigError(f"malformed poverty guideline table: {exc!r}") from exc

    @classmethod
    def bundled(cls) -> PovertyGuidelines:
        text = resources.files("subsidysim.data").joinpath("poverty_guidelines.json").read_text(encoding="utf-8")
        return cls.from_dict(json.loads(text))

    def annual(self, coverage_year, household_size):
        """Guideline dollars for a household; vectorised over both arguments."""
        cy = np.asarray(coverage_year, dtype=np.int64) - self.lag
        size = np.asarray(household_size, dtype=float)
        years = np.unique(cy)
        missing = [int(y) for y in years if int(y) not in self.table]
        if missing:
            raise DataError(f"no poverty guidelines for guideline year(s) {missing}")
        first = np.zeros(cy.shape)
        extra = np.zeros(cy.shape)
        for y in years:
            f, e = self.table[int(y)]
            first = np.where(cy == y, f, first)
            extra = np.where(cy == y, e, extra)
        out = first + extra * (size - 1)
        return float(out) if out.ndim == 0 else out


def monthly_income_per_person(fpl, year, hiu_size, guidelines: PovertyGuidelines):
    return np.asarray(fpl) / 100.0 * guidelines.annual(year, hiu_size) / 12.0 / np.asarray(hiu_size)


def expected_contribution(ecp_pct, annual_income):
    """Monthly dollars owed toward the benchmark plan."""
    return ecp_pct / 100.0 * annual_income / 12.0


def age_adjusted(base_premium, age, curve: AgeCurve):
    out = np.asarray(base_premium, dtype=float) * curve.factor(age)
    return float(out) if np.ndim(out) == 0 else out


def benchmark_plans(plans, rating_area, year) -> tuple[PlanOffering, PlanOffering]:
    """(lowest silver, second-lowest silver) for one cell; ties broken by plan_id."""
    silver = sorted(
        (p for p in plans if p.metal == "silver" and p.rating_area == rating_area and p.year == year),
        key=lambda p: (p.base_premium, p.plan_id),
    )
    if len(silver) < 2:
        raise DataError(f"rating area {rating_area!r} year {year}: {len(silver)} silver plan(s), cell unquotable")
    return silver[0], silver[1]


class PlanBook:
    """Lowest / benchmark silver base premiums indexed by (rating_area, year)."""

    def __init__(self, plans):
        self.plans = list(plans)
        cells = {(p.rating_area, p.year) for p in self.plans}
        self.cells: dict[tuple[str, int], tuple[float, float]] = {}
        self.unquotable: set[tuple[str, int]] = set()
        for area, year in sorted(cells):
            try:
                lo, bench = benchmark_plans(self.plans, area, year)
            except DataError:
                self.unquotable.add((area, year))
                continue
            self.cells[(area, year)] = (lo.base_premium, bench.base_premium)

    def lookup(self, rating_area, year) -> tuple[float, float]:
        try:
            return self.cells[(rating_area, int(year))]
        except KeyError:
            raise DataError(f"rating area {rating_area!r} year {year} is not quotable") from None

    def lookup_many(self, rating_area, year):
        """Arrays (lowest, benchmark) with NaN where the cell is unquotable."""
        lo = np.full(len(year), np.nan)
        bench = np.full(len(year), np.nan)
        for (area, y), (l, b) in self.cells.items():
            m = (rating_area == area) & (year == y)
            lo[m] = l
            bench[m] = b
        return lo, bench


def _as_book(plans) -> PlanBook:
    return plans if isinstance(plans, PlanBook) else PlanBook(plans)


@dataclass(frozen=True)
class SubsidyQuote:
    person_id: str
    regime: str
    benchmark_premium: float
    min_silver_premium: float
    expected_contribution: float
    federal_ptc: float
    state_supplement: float
    post_subsidy_premium: float


QUOTE_COLUMNS = tuple(f.name for f in fields(SubsidyQuote))


def _state_terms(regime: Regime, year, age, fpl):
    """Total ECP reduction (pp) and fixed-dollar amount, vectorised over persons."""
    year = np.asarray(year)
    red = np.zeros(np.shape(age))
    fixed = np.zeros(np.shape(age))
    for rule in regime.state_rules:
        applies = np.isin(year, rule.applicable_years)
        if not applies.any():
            continue
        v = np.where(applies, rule.value(age, fpl), 0.0)
        if rule.kind == ECP_REDUCTION:
            red = red + v
        elif rule.kind == FIXED_DOLLAR:
            fixed = fixed + v
    return red, fixed


def _compute(regime, lo_base, bench_base, age, fpl, year, hiu_size, guidelines):
    factor = regime.age_curve.factor(age)
    min_silver = lo_base * factor
    bench = bench_base * factor
    income = monthly_income_per_person(fpl, year, hiu_size, guidelines)
    ecp = regime.ecp_schedule(fpl)
    contrib = ecp / 100.0 * income
    eligible = ptc_eligible(regime, fpl)
    ptc = np.where(eligible, np.maximum(bench - contrib, 0.0), 0.0)
    after_federal = np.maximum(min_silver - ptc, 0.0)
    red_pp, fixed = _state_terms(regime, year, age, fpl)
    reduced_ecp = np.maximum(ecp - red_pp, 0.0)
    state_value = (ecp - reduced_ecp) / 100.0 * income + fixed
    state = np.where(eligible, np.minimum(after_federal, state_value), 0.0)
    post = np.maximum(after_federal - state, 0.0)
    return bench, min_silver, contrib, ptc, state, post


def quote(person: Person, regime: Regime, plans, guidelines: PovertyGuidelines | None = None) -> SubsidyQuote:
    guidelines = guidelines or PovertyGuidelines.bundled()
    lo, bench = _as_book(plans).lookup(person.rating_area, person.year)
    vals = _compute(regime, lo, bench, person.age, person.fpl, person.year, person.hiu_size, guidelines)
    return SubsidyQuote(person.person_id, regime.name, *(float(v) for v in vals))


@dataclass(frozen=True)
class QuoteTable:
    """Column-wise quotes for a PersonTable; NaN rows where ``quotable`` is False."""

    regime: str
    person_id: np.ndarray
    benchmark_premium: np.ndarray
    min_silver_premium: np.ndarray
    expected_contribution: np.ndarray
    federal_ptc: np.ndarray
    state_supplement: np.ndarray
    post_subsidy_premium: np.ndarray
    quotable: np.ndarray

    def __len__(self):
        return len(self.person_id)

    def __getitem__(self, i) -> SubsidyQuote:
        return SubsidyQuote(
            str(self.person_id[i]), self.regime,
            *(float(getattr(self, c)[i]) for c in QUOTE_COLUMNS[2:]),
        )

    @property
    def total_subsidy(self):
        return self.federal_ptc + self.state_supplement


def quote_table(persons: PersonTable, regime: Regime, plans, guidelines: PovertyGuidelines | None = None) -> QuoteTable:
    guidelines = guidelines or PovertyGuidelines.bundled()
    lo, bench = _as_book(plans).lookup_many(persons.rating_area, persons.year)
    ok = ~np.isnan(lo)
    vals = _compute(regime, lo, bench, persons.age, persons.fpl, persons.year, persons.hiu_size, guidelines) \
        if len(persons) else [np.zeros(0)] * 6
    vals = [np.where(ok, v, np.nan) for v in vals]
    return QuoteTable(regime.name, persons.person_id, *vals, quotable=ok)


def quote_delta(person: Person, regime_a: Regime, regime_b: Regime, plans,
                guidelines: PovertyGuidelines | None = None) -> tuple[float, float]:
    """Premium change moving from regime ``a`` to ``b``, and the subsidy headroom.

    Returns ``(post_b - post_a, max(0, subsidy_a - subsidy_b))`` where subsidy is
    federal PTC plus state supplement. With ``a`` = IRA and ``b`` = ACA the
    headroom is the most a state may add without exceeding IRA-era generosity.
    """
    book = _as_book(plans)
    qa = quote(person, regime_a, book, guidelines)
    qb = quote(person, regime_b, book, guidelines)
    delta = qb.post_subsidy_premium - qa.post_subsidy_premium
    headroom = max(0.0, qa.federal_ptc + qa.state_supplement - qb.federal_ptc - qb.state_supplement)
    return delta, headroom


def quote_delta_table(qa: QuoteTable, qb: QuoteTable) -> tuple[np.ndarray, np.ndarray]:
    delta = qb.post_subsidy_premium - qa.post_subsidy_premium
    headroom = np.maximum(0.0, qa.total_subsidy - qb.total_subsidy)
    return delta, headroom


def write_quotes(tables, path, header_lines=()) -> None:
    """One row per person x regime, currency rounded to cents."""
    with open(path, "w", newline="", encoding="utf-8") as fh:
        for line in header_lines:
            fh.write(f"# {line}\n")
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(QUOTE_COLUMNS)
        for t in tables:
            money = [np.round(getattr(t, c), 2) for c in QUOTE_COLUMNS[2:]]
            for i in np.flatnonzero(t.quotable):
                w.writerow([t.person_id[i], t.regime] + [_fmt(float(m[i])) for m in money])
