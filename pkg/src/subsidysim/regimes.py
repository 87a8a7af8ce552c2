"""Subsidy regimes as data.

A regime bundles an expected-contribution schedule, PTC eligibility bounds,
an age rating curve and any state supplement rules. The premium engine has a
single code path; the ACA and IRA regimes differ only in the values loaded
here.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from importlib import resources
from pathlib import Path
from typing import Any

import numpy as np

from .errors import ConfigError

SCHEMA_VERSION = 1

ECP_REDUCTION = "ecp-reduction"
FIXED_DOLLAR = "fixed-dollar"
RULE_KINDS = (ECP_REDUCTION, FIXED_DOLLAR)


@dataclass(frozen=True)
class EcpSchedule:
    """Expected contribution percentage as a piecewise-linear function of %FPL.

    Evaluation is flat beyond the first and last breakpoints.
    """

    breakpoints: tuple[tuple[float, float], ...]

    def __post_init__(self):
        pts = tuple((float(x), float(y)) for x, y in self.breakpoints)
        if not pts:
            raise ConfigError("ECP schedule needs at least one breakpoint")
        xs = [p[0] for p in pts]
        if any(b <= a for a, b in zip(xs, xs[1:])):
            raise ConfigError(f"ECP breakpoints must be strictly increasing in income: {xs}")
        for x, y in pts:
            if not 0.0 <= y <= 100.0:
                raise ConfigError(f"ECP contribution {y} at {x}% FPL outside [0, 100]")
        object.__setattr__(self, "breakpoints", pts)

    @property
    def incomes(self) -> np.ndarray:
        return np.array([p[0] for p in self.breakpoints])

    @property
    def contributions(self) -> np.ndarray:
        return np.array([p[1] for p in self.breakpoints])

    def __call__(self, fpl):
        return np.interp(fpl, self.incomes, self.contributions)


@dataclass(frozen=True)
class AgeCurve:
    """Premium rating factor by integer age, linearly interpolated if sparse."""

    factors: dict[int, float]

    def __post_init__(self):
        table = {int(a): float(f) for a, f in self.factors.items()}
        if not table:
            raise ConfigError("age curve is empty")
        if min(table) < 0 or max(table) > 120:
            raise ConfigError("age curve ages must lie in [0, 120]")
        if any(f <= 0 for f in table.values()):
            raise ConfigError("age factors must be positive")
        object.__setattr__(self, "factors", dict(sorted(table.items())))
        ages = np.arange(21, 121)
        vals = self.factor(ages)
        if vals[0] != 1.0:
            raise ConfigError(f"age factor at 21 must be 1.0, got {vals[0]}")
        if np.any(vals[ages >= 64] != 3.0):
            raise ConfigError("age factor must equal 3.0 for every age >= 64")
        if np.any(np.diff(vals[ages <= 64]) < 0):
            raise ConfigError("age factors must be non-decreasing on [21, 64]")

    def factor(self, age):
        ages = np.fromiter(self.factors.keys(), float)
        vals = np.fromiter(self.factors.values(), float)
        return np.interp(age, ages, vals)


@dataclass(frozen=True)
class StateSupplementRule:
    """Age-targeted state supplement.

    For ``ecp-reduction`` rules ``base_reduction`` is in percentage points of
    ECP; for ``fixed-dollar`` rules it is dollars per month. Full value applies
    on ``[full_age_lo, full_age_hi]``, then falls by ``phaseout_step`` per year
    of age and is zero from ``phaseout_end_age`` on. ``fpl_lo``/``fpl_hi``
    optionally restrict the income range.
    """

    name: str
    kind: str
    base_reduction: float
    full_age_lo: int
    full_age_hi: int
    phaseout_step: float
    phaseout_end_age: int
    applicable_years: tuple[int, ...]
    fpl_lo: float | None = None
    fpl_hi: float | None = None

    def __post_init__(self):
        if self.kind not in RULE_KINDS:
            raise ConfigError(f"rule {self.name!r}: unknown kind {self.kind!r}")
        if self.base_reduction < 0 or self.phaseout_step < 0:
            raise ConfigError(f"rule {self.name!r}: reductions must be non-negative")
        if not self.full_age_lo <= self.full_age_hi < self.phaseout_end_age:
            raise ConfigError(f"rule {self.name!r}: need full_age_lo <= full_age_hi < phaseout_end_age")
        object.__setattr__(self, "applicable_years", tuple(int(y) for y in self.applicable_years))

    def applies(self, year) -> bool:
        return int(year) in self.applicable_years

    def value(self, age, fpl=None):
        """Reduction at ``age`` (vectorised), ignoring the calendar year."""
        age = np.asarray(age, dtype=float)
        over = np.maximum(age - self.full_age_hi, 0.0)
        out = np.maximum(self.base_reduction - self.phaseout_step * over, 0.0)
        out = np.where((age < self.full_age_lo) | (age >= self.phaseout_end_age), 0.0, out)
        if fpl is not None:
            fpl = np.asarray(fpl, dtype=float)
            if self.fpl_lo is not None:
                out = np.where(fpl < self.fpl_lo, 0.0, out)
            if self.fpl_hi is not None:
                out = np.where(fpl > self.fpl_hi, 0.0, out)
        return out


def state_ecp_reduction(rule: StateSupplementRule, age, year) -> float:
    """Percentage points of ECP removed by ``rule`` for a person of ``age`` in ``year``."""
    if rule.kind != ECP_REDUCTION or not rule.applies(year):
        return 0.0
    return float(rule.value(age))


@dataclass(frozen=True)
class Regime:
    name: str
    ecp_schedule: EcpSchedule
    eligibility_floor: float
    eligibility_cap: float | None
    age_curve: AgeCurve
    state_rules: tuple[StateSupplementRule, ...] = field(default=())

    def __post_init__(self):
        if self.eligibility_cap is not None and not self.eligibility_floor < self.eligibility_cap:
            raise ConfigError(
                f"regime {self.name!r}: eligibility floor {self.eligibility_floor} "
                f"must be below cap {self.eligibility_cap}"
            )
        object.__setattr__(self, "state_rules", tuple(self.state_rules))

    def rules_for(self, year) -> list[StateSupplementRule]:
        return [r for r in self.state_rules if r.applies(year)]

    def replace_subsidy_terms(self, other: Regime, name: str | None = None) -> Regime:
        """This regime with ``other``'s schedule, eligibility bounds and state rules."""
        return Regime(
            name=name or self.name,
            ecp_schedule=other.ecp_schedule,
            eligibility_floor=other.eligibility_floor,
            eligibility_cap=other.eligibility_cap,
            age_curve=self.age_curve,
            state_rules=other.state_rules,
        )


def expected_contribution_pct(regime: Regime, fpl):
    """ECP (% of income) at ``fpl``; applies above any cap too."""
    if np.any(np.asarray(fpl) <= 0):
        raise ValueError("fpl must be positive")
    out = regime.ecp_schedule(fpl)
    return float(out) if np.ndim(out) == 0 else out


def ptc_eligible(regime: Regime, fpl):
    fpl = np.asarray(fpl, dtype=float)
    ok = fpl >= regime.eligibility_floor
    if regime.eligibility_cap is not None:
        ok &= fpl <= regime.eligibility_cap
    return bool(ok) if ok.ndim == 0 else ok


# -- serialisation -----------------------------------------------------------

def regime_to_dict(regime: Regime) -> dict[str, Any]:
    return {
        "schema_version": SCHEMA_VERSION,
        "name": regime.name,
        "ecp_schedule": [list(p) for p in regime.ecp_schedule.breakpoints],
        "eligibility_floor": regime.eligibility_floor,
        "eligibility_cap": regime.eligibility_cap,
        "age_curve": {str(a): f for a, f in regime.age_curve.factors.items()},
        "state_rules": [
            {
                "name": r.name,
                "kind": r.kind,
                "base_reduction": r.base_reduction,
                "full_age_lo": r.full_age_lo,
                "full_age_hi": r.full_age_hi,
                "phaseout_step": r.phaseout_step,
                "phaseout_end_age": r.phaseout_end_age,
                "applicable_years": list(r.applicable_years),
                "fpl_lo": r.fpl_lo,
                "fpl_hi": r.fpl_hi,
            }
            for r in regime.state_rules
        ],
    }


def regime_from_dict(data: dict[str, Any]) -> Regime:
    version = data.get("schema_version")
    if version != SCHEMA_VERSION:
        raise ConfigError(f"unsupported regime schema_version {version!r}")
    try:
        rules = [
            StateSupplementRule(
                name=r["name"],
                kind=r["kind"],
                base_reduction=float(r["base_reduction"]),
                full_age_lo=int(r["full_age_lo"]),
                full_age_hi=int(r["full_age_hi"]),
                phaseout_step=float(r["phaseout_step"]),
                phaseout_end_age=int(r["phaseout_end_age"]),
                applicable_years=tuple(r["applicable_years"]),
                fpl_lo=None if r.get("fpl_lo") is None else float(r["fpl_lo"]),
                fpl_hi=None if r.get("fpl_hi") is None else float(r["fpl_hi"]),
            )
            for r in data.get("state_rules", [])
        ]
        cap = data.get("eligibility_cap")
        return Regime(
            name=str(data["name"]),
            ecp_schedule=EcpSchedule(tuple(tuple(p) for p in data["ecp_schedule"])),
            eligibility_floor=float(data["eligibility_floor"]),
            eligibility_cap=None if cap is None else float(cap),
            age_curve=AgeCurve(data["age_curve"]),
            state_rules=tuple(rules),
        )
    except (KeyError, TypeError, ValueError) as exc:
        raise ConfigError(f"malformed regime config: {exc!r}") from exc


def dumps_regime(regime: Regime) -> str:
    return json.dumps(regime_to_dict(regime), indent=2) + "\n"


def loads_regime(text: str) -> Regime:
    try:
        data = json.loads(text)
    except json.JSONDecodeError as exc:
        raise ConfigError(f"regime file is not valid JSON: {exc}") from exc
    return regime_from_dict(data)


def load_regime(path) -> Regime:
    return loads_regime(Path(path).read_text(encoding="utf-8"))


BUNDLED_REGIMES = ("aca", "ira")


def bundled_regime_text(name: str) -> str:
    if name not in BUNDLED_REGIMES:
        raise ConfigError(f"no bundled regime named {name!r}; choose from {BUNDLED_REGIMES}")
    return resources.files("subsidysim.data").joinpath(f"regime_{name}.json").read_text(encoding="utf-8")


def bundled_regime(name: str) -> Regime:
    return loads_regime(bundled_regime_text(name))
