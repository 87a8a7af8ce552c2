"""Synthetic person-year populations and CSV ingestion.

Persons are held column-wise in :class:`PersonTable` (numpy arrays) because
populations run to several hundred thousand rows; :class:`Person` is the
single-record view used by the scalar quoting path and by ingestion.
"""

from __future__ import annotations

import csv
import hashlib
import math
from collections import Counter
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Iterator

import numpy as np
from scipy import optimize, stats

from .errors import ConfigError, DataError

FPL_MIN, FPL_MAX = 138.0, 400.0
AGE_MIN, AGE_MAX = 18, 64
METALS = ("bronze", "silver", "gold", "platinum")
ENROLLEE, POTENTIAL = "enrollee", "potential"

PERSON_COLUMNS = (
    "person_id", "hiu_id", "year", "age", "female", "fpl",
    "rating_area", "weight", "insured", "source", "hiu_size",
)
PLAN_COLUMNS = ("plan_id", "metal", "rating_area", "year", "base_premium")


def derive_seed(root: int, *labels) -> int:
    """Child seed from a root seed and a label path (stable across platforms)."""
    text = ":".join([str(int(root))] + [str(x) for x in labels])
    return int.from_bytes(hashlib.sha256(text.encode()).digest()[:8], "little")


@dataclass(frozen=True)
class Person:
    person_id: str
    hiu_id: str
    year: int
    age: int
    female: bool
    fpl: float
    rating_area: str
    weight: float
    insured: bool
    source: str
    hiu_size: int = 1


@dataclass(frozen=True)
class PlanOffering:
    plan_id: str
    metal: str
    rating_area: str
    year: int
    base_premium: float


@dataclass(frozen=True)
class PersonTable:
    person_id: np.ndarray
    hiu_id: np.ndarray
    year: np.ndarray
    age: np.ndarray
    female: np.ndarray
    fpl: np.ndarray
    rating_area: np.ndarray
    weight: np.ndarray
    insured: np.ndarray
    source: np.ndarray
    hiu_size: np.ndarray

    def __len__(self):
        return len(self.person_id)

    def __getitem__(self, i) -> Person:
        return Person(
            person_id=str(self.person_id[i]),
            hiu_id=str(self.hiu_id[i]),
            year=int(self.year[i]),
            age=int(self.age[i]),
            female=bool(self.female[i]),
            fpl=float(self.fpl[i]),
            rating_area=str(self.rating_area[i]),
            weight=float(self.weight[i]),
            insured=bool(self.insured[i]),
            source=str(self.source[i]),
            hiu_size=int(self.hiu_size[i]),
        )

    def __iter__(self) -> Iterator[Person]:
        for i in range(len(self)):
            yield self[i]

    def take(self, idx) -> PersonTable:
        return PersonTable(**{c: getattr(self, c)[idx] for c in PERSON_COLUMNS})

    def where(self, mask) -> PersonTable:
        return self.take(np.flatnonzero(mask))

    @classmethod
    def empty(cls) -> PersonTable:
        return cls.from_columns({c: [] for c in PERSON_COLUMNS})

    @classmethod
    def from_columns(cls, cols: dict[str, Any]) -> PersonTable:
        return cls(
            person_id=np.asarray(cols["person_id"], dtype=str),
            hiu_id=np.asarray(cols["hiu_id"], dtype=str),
            year=np.asarray(cols["year"], dtype=np.int64),
            age=np.asarray(cols["age"], dtype=np.int64),
            female=np.asarray(cols["female"], dtype=bool),
            fpl=np.asarray(cols["fpl"], dtype=float),
            rating_area=np.asarray(cols["rating_area"], dtype=str),
            weight=np.asarray(cols["weight"], dtype=float),
            insured=np.asarray(cols["insured"], dtype=bool),
            source=np.asarray(cols["source"], dtype=str),
            hiu_size=np.asarray(cols["hiu_size"], dtype=np.int64),
        )

    @classmethod
    def from_persons(cls, persons) -> PersonTable:
        persons = list(persons)
        return cls.from_columns({c: [getattr(p, c) for p in persons] for c in PERSON_COLUMNS})

    @classmethod
    def concat(cls, tables) -> PersonTable:
        tables = [t for t in tables if len(t)]
        if not tables:
            return cls.empty()
        return cls(**{c: np.concatenate([getattr(t, c) for t in tables]) for c in PERSON_COLUMNS})


# -- bounded marginal distributions ----------------------------------------

@dataclass(frozen=True)
class BoundedMarginal:
    """Distribution on [lo, hi] with a prescribed mean and SD.

    ``family`` is ``truncnorm`` (normal truncated to the interval, location and
    scale solved so the *truncated* moments hit the targets) or ``beta``
    (scaled beta, closed-form). A truncated normal is log-concave, so its SD can
    never exceed the uniform SD on the interval; targets beyond that are
    rejected and need ``beta``.
    """

    family: str
    lo: float
    hi: float
    mean: float
    sd: float
    params: tuple[float, float]

    @classmethod
    def fit(cls, family: str, lo: float, hi: float, mean: float, sd: float) -> BoundedMarginal:
        if not lo < mean < hi:
            raise ConfigError(f"mean {mean} outside truncation bounds [{lo}, {hi}]")
        if sd <= 0:
            raise ConfigError(f"SD must be positive, got {sd}")
        if family == "beta":
            m = (mean - lo) / (hi - lo)
            v = (sd / (hi - lo)) ** 2
            if v >= m * (1 - m):
                raise ConfigError(f"no beta on [{lo}, {hi}] has mean {mean} and SD {sd}")
            common = m * (1 - m) / v - 1
            return cls(family, lo, hi, mean, sd, (m * common, (1 - m) * common))
        if family == "truncnorm":
            return cls(family, lo, hi, mean, sd, _solve_truncnorm(lo, hi, mean, sd))
        raise ConfigError(f"unknown distribution family {family!r}")

    def ppf(self, u):
        a, b = self.params
        if self.family == "beta":
            return self.lo + (self.hi - self.lo) * stats.beta.ppf(u, a, b)
        mu, sigma = a, b
        return stats.truncnorm.ppf(u, (self.lo - mu) / sigma, (self.hi - mu) / sigma, loc=mu, scale=sigma)


def _truncnorm_moments(lo, hi, mu, sigma):
    m, v = stats.truncnorm.stats((lo - mu) / sigma, (hi - mu) / sigma, loc=mu, scale=sigma, moments="mv")
    return float(m), math.sqrt(float(v))


def _solve_truncnorm(lo, hi, mean, sd):
    width = hi - lo
    uniform_sd = width / math.sqrt(12)
    if sd >= uniform_sd:
        raise ConfigError(
            f"truncated normal on [{lo}, {hi}] cannot reach SD {sd} "
            f"(limit {uniform_sd:.3f}); use the beta family"
        )

    def resid(theta):
        m, s = _truncnorm_moments(lo, hi, theta[0], math.exp(theta[1]))
        return [(m - mean) / width, (s - sd) / width]

    best = None
    for start_mu in (mean, lo, hi, lo - width, hi + width):
        for start_sd in (sd, 2 * sd, 5 * sd):
            sol = optimize.least_squares(resid, [start_mu, math.log(start_sd)], xtol=1e-14, ftol=1e-14, gtol=1e-14)
            if best is None or sol.cost < best.cost:
                best = sol
            if best.cost < 1e-20:
                break
        if best.cost < 1e-20:
            break
    m, s = _truncnorm_moments(lo, hi, best.x[0], math.exp(best.x[1]))
    if abs(m - mean) > 1e-6 * width or abs(s - sd) > 1e-6 * width:
        raise ConfigError(f"no truncated normal on [{lo}, {hi}] has mean {mean} and SD {sd}")
    return float(best.x[0]), float(math.exp(best.x[1]))


# -- population spec -------------------------------------------------------

@dataclass(frozen=True)
class PoolSpec:
    source: str
    year: int
    count: int
    income_mean: float
    income_sd: float
    age_mean: float
    age_sd: float
    female_share: float
    income_family: str = "truncnorm"
    age_family: str = "truncnorm"
    sample_fraction: float = 1.0
    weight_cv: float = 0.0

    def __post_init__(self):
        if self.source not in (ENROLLEE, POTENTIAL):
            raise ConfigError(f"unknown pool source {self.source!r}")
        if self.count < 0:
            raise ConfigError("pool counts must be non-negative")
        if not 0.0 <= self.female_share <= 1.0:
            raise ConfigError("female share must lie in [0, 1]")
        if not 0.0 < self.sample_fraction <= 1.0:
            raise ConfigError("sample_fraction must lie in (0, 1]")
        if self.source == ENROLLEE and self.sample_fraction != 1.0:
            raise ConfigError("enrollee pools are complete administrative records; sample_fraction must be 1")

    def income_marginal(self) -> BoundedMarginal:
        return BoundedMarginal.fit(self.income_family, FPL_MIN, FPL_MAX, self.income_mean, self.income_sd)

    def age_marginal(self) -> BoundedMarginal:
        # integer ages come from rounding a continuous draw on [17.5, 64.5]
        sd = math.sqrt(max(self.age_sd**2 - 1.0 / 12.0, 1e-12))
        return BoundedMarginal.fit(self.age_family, AGE_MIN - 0.5, AGE_MAX + 0.5, self.age_mean, sd)


@dataclass(frozen=True)
class PlanSpec:
    silver_per_area: int = 5
    bronze_per_area: int = 3
    gold_per_area: int = 3
    platinum_per_area: int = 1
    silver_base_mean: dict[int, float] = field(default_factory=dict)
    area_sd: float = 0.08
    plan_sd: float = 0.06
    metal_ratios: dict[str, float] = field(
        default_factory=lambda: {"bronze": 0.80, "silver": 1.0, "gold": 1.10, "platinum": 1.30}
    )

    def __post_init__(self):
        if self.silver_per_area < 2:
            raise ConfigError("need at least two silver plans per rating-area-year")


@dataclass(frozen=True)
class PopulationSpec:
    seed: int
    pools: tuple[PoolSpec, ...]
    rating_areas: tuple[str, ...] = ("RA1", "RA2", "RA3", "RA4")
    area_shares: tuple[float, ...] = (0.25, 0.25, 0.25, 0.25)
    hiu_size_probs: tuple[float, ...] = (0.78, 0.17, 0.04, 0.01)
    age_corr: float = 0.5
    plans: PlanSpec = field(default_factory=PlanSpec)

    def __post_init__(self):
        if len(self.rating_areas) != len(self.area_shares):
            raise ConfigError("one share per rating area required")
        if any(s < 0 for s in self.area_shares) or abs(sum(self.area_shares) - 1) > 1e-9:
            raise ConfigError("rating-area shares must be non-negative and sum to 1")
        if not 1 <= len(self.hiu_size_probs) <= 4:
            raise ConfigError("HIU sizes range over 1..4")
        if any(p < 0 for p in self.hiu_size_probs) or abs(sum(self.hiu_size_probs) - 1) > 1e-9:
            raise ConfigError("HIU size probabilities must be non-negative and sum to 1")
        if not 0.0 <= self.age_corr < 1.0:
            raise ConfigError("age_corr must lie in [0, 1)")
        years = {p.year for p in self.pools}
        missing = years - set(self.plans.silver_base_mean)
        if missing:
            raise ConfigError(f"plan spec lacks silver_base_mean for years {sorted(missing)}")

    @property
    def years(self) -> list[int]:
        return sorted({p.year for p in self.pools})


def population_spec_from_dict(data: dict[str, Any]) -> PopulationSpec:
    """Build a spec from its JSON form.

    A pool entry may carry ``"copy_from": <year>`` to reuse another pool of the
    same source (how the missing 2024 survey year is imputed).
    """
    try:
        raw = list(data["pools"])
        by_key = {(p["source"], int(p["year"])): p for p in raw if "copy_from" not in p}
        pools = []
        for p in raw:
            if "copy_from" in p:
                src = by_key.get((p["source"], int(p["copy_from"])))
                if src is None:
                    raise ConfigError(f"copy_from refers to missing pool {p['source']} {p['copy_from']}")
                p = {**src, "year": p["year"]}
            pools.append(PoolSpec(
                source=p["source"],
                year=int(p["year"]),
                count=int(p["count"]),
                income_mean=float(p["income_mean"]),
                income_sd=float(p["income_sd"]),
                age_mean=float(p["age_mean"]),
                age_sd=float(p["age_sd"]),
                female_share=float(p["female_share"]),
                income_family=p.get("income_family", "truncnorm"),
                age_family=p.get("age_family", "truncnorm"),
                sample_fraction=float(p.get("sample_fraction", 1.0)),
                weight_cv=float(p.get("weight_cv", 0.0)),
            ))
        plans = dict(data.get("plans", {}))
        if "silver_base_mean" in plans:
            plans["silver_base_mean"] = {int(k): float(v) for k, v in plans["silver_base_mean"].items()}
        kwargs = {}
        if "rating_areas" in data:
            areas = data["rating_areas"]
            if isinstance(areas, int):
                kwargs["rating_areas"] = tuple(f"RA{i + 1}" for i in range(areas))
                kwargs["area_shares"] = tuple([1.0 / areas] * areas)
            else:
                kwargs["rating_areas"] = tuple(areas)
                kwargs["area_shares"] = tuple(data.get("area_shares", [1.0 / len(areas)] * len(areas)))
        for key in ("hiu_size_probs",):
            if key in data:
                kwargs[key] = tuple(float(x) for x in data[key])
        if "age_corr" in data:
            kwargs["age_corr"] = float(data["age_corr"])
        return PopulationSpec(seed=int(data["seed"]), pools=tuple(pools), plans=PlanSpec(**plans), **kwargs)
    except (KeyError, TypeError, ValueError) as exc:
        raise ConfigError(f"malformed population spec: {exc!r}") from exc


# -- generation --------------------------------------------------------------

def _hiu_layout(rng, n: int, probs) -> np.ndarray:
    """HIU index for each of ``n`` persons; sizes drawn from ``probs`` (last HIU may be cut)."""
    if n == 0:
        return np.zeros(0, dtype=np.int64)
    sizes = rng.choice(np.arange(1, len(probs) + 1), size=n, p=probs)
    ends = np.cumsum(sizes)
    k = int(np.searchsorted(ends, n)) + 1
    sizes = sizes[:k]
    sizes[-1] -= ends[k - 1] - n
    return np.repeat(np.arange(k), sizes)


def _generate_pool(spec: PopulationSpec, pool: PoolSpec) -> PersonTable:
    n = pool.count if pool.source == ENROLLEE else int(round(pool.count * pool.sample_fraction))
    if n == 0:
        return PersonTable.empty()
    income = pool.income_marginal()
    agedist = pool.age_marginal()
    rng = np.random.default_rng(derive_seed(spec.seed, "pool", pool.source, pool.year))

    hiu = _hiu_layout(rng, n, spec.hiu_size_probs)
    n_hiu = int(hiu[-1]) + 1
    hiu_size = np.bincount(hiu)[hiu]

    # household-level draws: income (%FPL is a household attribute), area, weight
    u_income = rng.random(n_hiu)
    fpl = np.round(np.clip(income.ppf(u_income), FPL_MIN, FPL_MAX), 2)[hiu]
    area_idx = rng.choice(len(spec.rating_areas), size=n_hiu, p=spec.area_shares)
    area = np.asarray(spec.rating_areas, dtype=str)[area_idx][hiu]

    # ages share a household factor through a Gaussian copula
    rho = spec.age_corr
    z = math.sqrt(rho) * rng.standard_normal(n_hiu)[hiu] + math.sqrt(1 - rho) * rng.standard_normal(n)
    age = np.clip(np.floor(agedist.ppf(stats.norm.cdf(z)) + 0.5), AGE_MIN, AGE_MAX).astype(np.int64)

    female = rng.random(n) < pool.female_share

    if pool.source == ENROLLEE:
        weight = np.ones(n)
    else:
        jitter = rng.lognormal(0.0, pool.weight_cv, n_hiu) if pool.weight_cv > 0 else np.ones(n_hiu)
        w = jitter[hiu]
        weight = w * (pool.count / w.sum())

    tag = "E" if pool.source == ENROLLEE else "P"
    ids = np.char.add(f"{tag}{pool.year}-", np.char.zfill(np.arange(n).astype(str), 7))
    hids = np.char.add(f"H{tag}{pool.year}-", np.char.zfill(hiu.astype(str), 7))
    return PersonTable(
        person_id=ids,
        hiu_id=hids,
        year=np.full(n, pool.year, dtype=np.int64),
        age=age,
        female=female,
        fpl=fpl,
        rating_area=area,
        weight=weight,
        insured=np.full(n, pool.source == ENROLLEE),
        source=np.full(n, pool.source).astype(str),
        hiu_size=hiu_size.astype(np.int64),
    )


def generate_plans(spec: PopulationSpec) -> list[PlanOffering]:
    ps = spec.plans
    rng = np.random.default_rng(derive_seed(spec.seed, "plans"))
    area_effect = np.exp(rng.normal(0.0, ps.area_sd, len(spec.rating_areas)))
    counts = {"bronze": ps.bronze_per_area, "silver": ps.silver_per_area,
              "gold": ps.gold_per_area, "platinum": ps.platinum_per_area}
    plans = []
    for year in spec.years:
        level = ps.silver_base_mean[year]
        for a, area in enumerate(spec.rating_areas):
            for metal in METALS:
                draws = np.exp(rng.normal(0.0, ps.plan_sd, counts[metal]))
                for k, d in enumerate(draws):
                    prem = round(float(level * area_effect[a] * ps.metal_ratios[metal] * d), 2)
                    plans.append(PlanOffering(f"{metal[0].upper()}-{area}-{year}-{k + 1}", metal, area, year, prem))
    return plans


def generate(spec: PopulationSpec) -> tuple[PersonTable, list[PlanOffering]]:
    """Persons for every pool in ``spec`` plus plan offerings; pure in (spec, seed)."""
    for pool in spec.pools:  # fail fast on infeasible moments, before any drawing
        pool.income_marginal()
        pool.age_marginal()
    persons = PersonTable.concat(_generate_pool(spec, p) for p in spec.pools)
    return persons, generate_plans(spec)


# -- CSV I/O -----------------------------------------------------------------

def _fmt(v) -> str:
    if isinstance(v, (bool, np.bool_)):
        return "1" if v else "0"
    if isinstance(v, (float, np.floating)):
        return repr(float(v))
    return str(v)


def write_persons(table: PersonTable, path, header_lines=()) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        for line in header_lines:
            fh.write(f"# {line}\n")
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(PERSON_COLUMNS)
        cols = [getattr(table, c) for c in PERSON_COLUMNS]
        for row in zip(*cols):
            w.writerow([_fmt(v) for v in row])


def write_plans(plans, path, header_lines=()) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        for line in header_lines:
            fh.write(f"# {line}\n")
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(PLAN_COLUMNS)
        for p in plans:
            w.writerow([p.plan_id, p.metal, p.rating_area, p.year, _fmt(float(p.base_premium))])


def _read_rows(path, required):
    with open(path, newline="", encoding="utf-8") as fh:
        lines = [ln for ln in fh if not ln.startswith("#")]
    reader = csv.DictReader(lines)
    header = reader.fieldnames or []
    missing = [c for c in required if c not in header]
    if missing:
        raise DataError(f"{path}: missing columns {missing}")
    return list(reader)


def _parse_bool(text: str) -> bool:
    t = text.strip().lower()
    if t in ("1", "true", "t", "yes", "y"):
        return True
    if t in ("0", "false", "f", "no", "n"):
        return False
    raise ValueError(f"not a boolean: {text!r}")


def read_persons(path) -> tuple[PersonTable, list[tuple[int, str]]]:
    """Parse and validate a person CSV.

    Returns the valid records and ``(row, reason)`` for every rejected data row
    (rows counted from 1, header excluded). ``hiu_size`` is optional and
    derived from ``hiu_id`` counts per year when absent.
    """
    required = [c for c in PERSON_COLUMNS if c != "hiu_size"]
    rows = _read_rows(path, required)
    good, rejects, seen = [], [], {}
    for i, row in enumerate(rows, start=1):
        try:
            pid = row["person_id"].strip()
            if not pid:
                raise ValueError("empty person_id")
            if pid in seen:
                raise ValueError(f"duplicate person_id {pid!r} (first seen at row {seen[pid]})")
            fpl = float(row["fpl"])
            age = int(row["age"])
            weight = float(row["weight"])
            source = row["source"].strip()
            if not FPL_MIN <= fpl <= FPL_MAX:
                raise ValueError(f"fpl {fpl} outside [{FPL_MIN:g}, {FPL_MAX:g}]")
            if not AGE_MIN <= age <= AGE_MAX:
                raise ValueError(f"age {age} outside [{AGE_MIN}, {AGE_MAX}]")
            if source not in (ENROLLEE, POTENTIAL):
                raise ValueError(f"unknown source {source!r}")
            if not weight >= 0 or not math.isfinite(weight):
                raise ValueError(f"weight {weight} must be non-negative")
            if source == ENROLLEE and weight != 1.0:
                raise ValueError("enrollee weight must be 1")
            size = row.get("hiu_size")
            good.append(dict(
                person_id=pid, hiu_id=row["hiu_id"].strip(), year=int(row["year"]), age=age,
                female=_parse_bool(row["female"]), fpl=fpl, rating_area=row["rating_area"].strip(),
                weight=weight, insured=_parse_bool(row["insured"]), source=source,
                hiu_size=int(size) if size not in (None, "") else None,
            ))
            seen[pid] = i
        except (ValueError, TypeError) as exc:
            rejects.append((i, str(exc)))
    counts = Counter((g["year"], g["hiu_id"]) for g in good)
    for g in good:
        if g["hiu_size"] is None:
            g["hiu_size"] = counts[(g["year"], g["hiu_id"])]
    return PersonTable.from_persons(Person(**g) for g in good), rejects


def ingest_persons(path) -> PersonTable:
    table, rejects = read_persons(path)
    if rejects:
        detail = "; ".join(f"row {r}: {why}" for r, why in rejects)
        raise DataError(f"{path}: {len(rejects)} rejected row(s): {detail}", rejects)
    return table


def read_plans(path) -> tuple[list[PlanOffering], list[tuple[int, str]]]:
    rows = _read_rows(path, PLAN_COLUMNS)
    good, rejects, seen = [], [], set()
    for i, row in enumerate(rows, start=1):
        try:
            pid = row["plan_id"].strip()
            if pid in seen:
                raise ValueError(f"duplicate plan_id {pid!r}")
            metal = row["metal"].strip().lower()
            if metal not in METALS:
                raise ValueError(f"unknown metal {metal!r}")
            prem = float(row["base_premium"])
            if not prem > 0:
                raise ValueError(f"base_premium {prem} must be positive")
            good.append(PlanOffering(pid, metal, row["rating_area"].strip(), int(row["year"]), prem))
            seen.add(pid)
        except (ValueError, TypeError) as exc:
            rejects.append((i, str(exc)))
    return good, rejects


def ingest_plans(path) -> list[PlanOffering]:
    plans, rejects = read_plans(path)
    if rejects:
        detail = "; ".join(f"row {r}: {why}" for r, why in rejects)
        raise DataError(f"{path}: {len(rejects)} rejected row(s): {detail}", rejects)
    return plans


def weighted_moments(x, w) -> tuple[float, float]:
    """Weighted mean and (population) SD."""
    x = np.asarray(x, dtype=float)
    w = np.asarray(w, dtype=float)
    m = float(np.sum(w * x) / np.sum(w))
    return m, float(np.sqrt(np.sum(w * (x - m) ** 2) / np.sum(w)))
