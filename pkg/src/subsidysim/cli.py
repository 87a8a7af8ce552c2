"""Command-line pipeline: generate -> quote -> fit -> effects -> project -> allocate -> sweep.

Every subcommand recomputes its inputs from the scenario config, so running
``all`` or the individual steps on the same config and seed writes the same
files. Artifacts carry the config hash and seed and no timestamps, so reruns
are byte-identical.
"""

from __future__ import annotations

import argparse
import copy
import csv
import hashlib
import json
import sys
from dataclasses import asdict, dataclass, field
from functools import cached_property
from importlib import resources
from pathlib import Path
from typing import Any

import numpy as np

from . import __version__
from .bands import EFFECT_BANDS, LOSS_BANDS, Band
from .demand import EFFECTS_COLUMNS, build_design, effects_table, fit_2sls, fit_ols
from .errors import ConfigError, DataError, NumericalError, SubsidySimError
from .policy import (SWEEP_COLUMNS, SWEEP_UNITS, BandedEffects, FillOrder, losses_from_deltas,
                     sweep_order, write_losses, write_plot_data, write_sweep)
from .population import (ENROLLEE, PERSON_COLUMNS, PLAN_COLUMNS, PersonTable, _fmt, generate,
                         ingest_plans, ingest_persons, population_spec_from_dict, write_persons,
                         write_plans)
from .premium import QUOTE_COLUMNS, PovertyGuidelines, quote_delta_table, quote_table, write_quotes
from .regimes import BUNDLED_REGIMES, bundled_regime, load_regime, regime_from_dict

SUBCOMMANDS = ("generate", "quote", "fit", "effects", "project", "allocate", "sweep", "all")


# -- config --------------------------------------------------------------------

def _canonical(data) -> str:
    return json.dumps(data, sort_keys=True, separators=(",", ":"))


@dataclass
class ScenarioConfig:
    """Resolved scenario. ``raw`` is the (override-applied) JSON it came from."""

    raw: dict[str, Any]
    base_dir: Path
    seed: int
    budgets: list[float]
    output_dir: Path
    population_scale: float = 1.0
    effect_bands: tuple[Band, ...] = EFFECT_BANDS
    loss_bands: tuple[Band, ...] = LOSS_BANDS
    fmt: str = "csv"
    regime_refs: dict[str, Any] = field(default_factory=dict)

    @property
    def config_hash(self) -> str:
        hashed = {k: v for k, v in self.raw.items() if k != "output_dir"}
        return hashlib.sha256(_canonical(hashed).encode()).hexdigest()

    def provenance(self) -> dict[str, Any]:
        return {"tool": f"subsidysim {__version__}", "config_sha256": self.config_hash, "seed": self.seed}

    def header_lines(self, artifact: str) -> list[str]:
        p = self.provenance()
        return [f"artifact: {artifact}", f"tool: {p['tool']}", f"config_sha256: {p['config_sha256']}",
                f"seed: {p['seed']}"]


def default_config_text() -> str:
    return resources.files("subsidysim.data").joinpath("default_scenario.json").read_text(encoding="utf-8")


def parse_budgets(text: str) -> list[float]:
    """``"10M,20M"`` or an inclusive range ``"10M:150M:10M"``; k/M/B suffixes allowed."""
    def num(tok):
        tok = tok.strip()
        mult = {"k": 1e3, "K": 1e3, "m": 1e6, "M": 1e6, "b": 1e9, "B": 1e9}.get(tok[-1:], None)
        try:
            return float(tok[:-1]) * mult if mult else float(tok)
        except ValueError:
            raise ConfigError(f"cannot parse budget {tok!r}") from None

    text = text.strip()
    if ":" in text:
        parts = text.split(":")
        if len(parts) != 3:
            raise ConfigError("budget range must be start:stop:step")
        start, stop, step = (num(p) for p in parts)
        if step <= 0:
            raise ConfigError("budget step must be positive")
        n = int(np.floor((stop - start) / step + 1e-9)) + 1
        return [start + i * step for i in range(n)]
    return [num(t) for t in text.split(",") if t.strip()]


def load_config(path=None, *, seed=None, budgets=None, out=None, fmt="csv") -> ScenarioConfig:
    if path is None:
        text, base = default_config_text(), Path.cwd()
    else:
        try:
            text = Path(path).read_text(encoding="utf-8")
        except OSError as exc:
            raise ConfigError(f"cannot read config {path}: {exc.strerror}") from exc
        base = Path(path).resolve().parent
    try:
        raw = json.loads(text)
    except json.JSONDecodeError as exc:
        raise ConfigError(f"config is not valid JSON: {exc}") from exc
    if not isinstance(raw, dict):
        raise ConfigError("config must be a JSON object")
    raw = copy.deepcopy(raw)
    if seed is not None:
        raw["seed"] = int(seed)
    if budgets is not None:
        raw["budgets"] = list(budgets)
    if "seed" not in raw:
        raise ConfigError("config lacks a seed")
    seed_val = int(raw["seed"])
    if not 0 <= seed_val < 2**64:
        raise ConfigError("seed must be an unsigned 64-bit integer")
    bud = [float(b) for b in raw.get("budgets", [])]
    if any(b < 0 for b in bud) or any(b2 < b1 for b1, b2 in zip(bud, bud[1:])):
        raise ConfigError("budgets must be non-negative and ascending")
    scale = float(raw.get("population_scale", 1.0))
    if not scale > 0:
        raise ConfigError("population_scale must be positive")
    if fmt not in ("csv", "json"):
        raise ConfigError(f"unknown format {fmt!r}")
    cfg = ScenarioConfig(
        raw=raw,
        base_dir=base,
        seed=seed_val,
        budgets=bud,
        output_dir=Path(out if out is not None else raw.get("output_dir", "out")),
        population_scale=scale,
        effect_bands=tuple(Band.parse(b) for b in raw["effect_bands"]) if "effect_bands" in raw else EFFECT_BANDS,
        loss_bands=tuple(Band.parse(b) for b in raw["loss_bands"]) if "loss_bands" in raw else LOSS_BANDS,
        fmt=fmt,
        regime_refs=dict(raw.get("regimes", {"actual": "ira", "counterfactual": "aca"})),
    )
    for role in ("actual", "counterfactual"):
        if role not in cfg.regime_refs:
            raise ConfigError(f"config lacks regimes.{role}")
    return cfg


# -- pipeline ------------------------------------------------------------------

class Pipeline:
    """Lazily computed stages for one scenario."""

    def __init__(self, cfg: ScenarioConfig):
        self.cfg = cfg

    def _path(self, ref: str) -> Path:
        p = Path(ref)
        return p if p.is_absolute() else self.cfg.base_dir / p

    def _regime(self, ref):
        if isinstance(ref, dict):
            return regime_from_dict(ref)
        if isinstance(ref, str) and ref in BUNDLED_REGIMES:
            return bundled_regime(ref)
        if isinstance(ref, str) and ref.endswith(".json"):
            p = self._path(ref)
            if not p.exists():
                raise ConfigError(f"regime file not found: {ref}")
            return load_regime(p)
        raise ConfigError(f"unknown regime {ref!r}; use one of {BUNDLED_REGIMES}, a .json path or an inline object")

    @cached_property
    def regimes(self):
        return self._regime(self.cfg.regime_refs["actual"]), self._regime(self.cfg.regime_refs["counterfactual"])

    @cached_property
    def guidelines(self) -> PovertyGuidelines:
        ref = self.cfg.raw.get("poverty_guidelines")
        if ref is None:
            return PovertyGuidelines.bundled()
        try:
            return PovertyGuidelines.from_dict(json.loads(self._path(ref).read_text(encoding="utf-8")))
        except (OSError, json.JSONDecodeError) as exc:
            raise ConfigError(f"cannot load poverty guidelines {ref}: {exc}") from exc

    @cached_property
    def population(self) -> tuple[PersonTable, list]:
        pop = self.cfg.raw.get("population")
        if pop is None:
            raise ConfigError("config lacks a population section")
        if "persons" in pop:
            return ingest_persons(self._path(pop["persons"])), ingest_plans(self._path(pop["plans"]))
        data = copy.deepcopy(pop)
        data["seed"] = self.cfg.seed
        if self.cfg.population_scale != 1.0:
            for p in data.get("pools", []):
                if "count" in p:
                    p["count"] = int(round(p["count"] * self.cfg.population_scale))
        return generate(population_spec_from_dict(data))

    @cached_property
    def quotes(self):
        persons, plans = self.population
        ira, aca = self.regimes
        return quote_table(persons, ira, plans, self.guidelines), quote_table(persons, aca, plans, self.guidelines)

    @cached_property
    def design(self):
        est = self.cfg.raw.get("estimation", {})
        qa, qb = self.quotes
        return build_design(self.population[0], qa, qb, poly_degree=int(est.get("poly_degree", 1)))

    @cached_property
    def fits(self):
        cov = self.cfg.raw.get("estimation", {}).get("cov_type", "cluster")
        return fit_ols(self.design, cov), fit_2sls(self.design, cov)

    @cached_property
    def effects(self):
        return effects_table(self.fits[1], self.design, self.cfg.effect_bands)

    @cached_property
    def response(self):
        me = self.cfg.raw.get("marginal_effects", "fit")
        if me == "fit":
            return self.fits[1]
        if isinstance(me, dict):
            return BandedEffects.from_dict(me)
        raise ConfigError("marginal_effects must be \"fit\" or a mapping of band -> effect")

    @cached_property
    def projection_mask(self):
        persons = self.population[0]
        year = int(self.cfg.raw.get("projection_year", max(persons.year) if len(persons) else 0))
        qa, qb = self.quotes
        m = (persons.source == ENROLLEE) & (persons.year == year)
        if not m.any():
            raise DataError(f"no enrollees in projection year {year}")
        bad = m & ~(qa.quotable & qb.quotable)
        if bad.any():
            raise DataError(f"{int(bad.sum())} projection enrollee(s) not quotable under both regimes")
        return m

    @cached_property
    def deltas(self):
        qa, qb = self.quotes
        delta, caps = quote_delta_table(qa, qb)
        m = self.projection_mask
        return delta[m], caps[m]

    @cached_property
    def enrollees(self) -> PersonTable:
        return self.population[0].where(self.projection_mask)

    @cached_property
    def losses(self):
        e = self.enrollees
        return losses_from_deltas(e.fpl, self.deltas[0], self.response.marginal_effect(e.fpl), self.cfg.loss_bands)

    @cached_property
    def fill_order(self) -> FillOrder:
        e = self.enrollees
        return FillOrder(self.response.marginal_effect(e.fpl), self.deltas[1], e.fpl, e.person_id)

    @cached_property
    def sweep(self):
        if not self.cfg.budgets:
            raise ConfigError("no budgets configured")
        return sweep_order(self.fill_order, self.cfg.budgets)


# -- artifact writers ------------------------------------------------------------

def _json_value(v):
    if isinstance(v, (np.bool_, bool)):
        return bool(v)
    if isinstance(v, (np.integer,)):
        return int(v)
    if isinstance(v, (float, np.floating)):
        return None if np.isnan(v) else float(v)
    if isinstance(v, np.str_):
        return str(v)
    return v


def _write_json(path: Path, cfg: ScenarioConfig, payload: dict) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        json.dump({"provenance": cfg.provenance(), **payload}, fh, indent=2)
        fh.write("\n")


def _write_rows_json(path: Path, cfg: ScenarioConfig, columns, rows, units=None) -> None:
    payload = {"columns": list(columns), "rows": [{c: _json_value(v) for c, v in zip(columns, r)} for r in rows]}
    if units:
        payload["units"] = units
    _write_json(path, cfg, payload)


def _write_csv(path: Path, cfg: ScenarioConfig, artifact, columns, rows) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        for line in cfg.header_lines(artifact):
            fh.write(f"# {line}\n")
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(columns)
        for r in rows:
            w.writerow([_fmt(v) for v in r])


def run_generate(pl: Pipeline) -> list[Path]:
    cfg, out = pl.cfg, pl.cfg.output_dir
    persons, plans = pl.population
    if cfg.fmt == "json":
        paths = [out / "persons.json", out / "plans.json"]
        _write_rows_json(paths[0], cfg, PERSON_COLUMNS, zip(*[getattr(persons, c) for c in PERSON_COLUMNS]))
        _write_rows_json(paths[1], cfg, PLAN_COLUMNS, ([getattr(p, c) for c in PLAN_COLUMNS] for p in plans))
        return paths
    paths = [out / "persons.csv", out / "plans.csv"]
    write_persons(persons, paths[0], cfg.header_lines("persons"))
    write_plans(plans, paths[1], cfg.header_lines("plans"))
    return paths


def run_quote(pl: Pipeline) -> list[Path]:
    cfg = pl.cfg
    tables = pl.quotes
    if cfg.fmt == "json":
        path = cfg.output_dir / "quotes.json"
        rows = []
        for t in tables:
            money = [np.round(getattr(t, c), 2) for c in QUOTE_COLUMNS[2:]]
            rows += [[t.person_id[i], t.regime] + [m[i] for m in money] for i in np.flatnonzero(t.quotable)]
        _write_rows_json(path, cfg, QUOTE_COLUMNS, rows, units={c: "$/month" for c in QUOTE_COLUMNS[2:]})
        return [path]
    path = cfg.output_dir / "quotes.csv"
    write_quotes(tables, path, cfg.header_lines("quotes") + ["units: $/month per person"])
    return [path]


def run_fit(pl: Pipeline) -> list[Path]:
    ols, iv = pl.fits
    path = pl.cfg.output_dir / "fit.json"
    _write_json(path, pl.cfg, {"2sls": iv.to_dict(), "ols": ols.to_dict()})
    return [path]


def run_effects(pl: Pipeline) -> list[Path]:
    rows = [list(asdict(r).values()) for r in pl.effects]
    if pl.cfg.fmt == "json":
        path = pl.cfg.output_dir / "effects.json"
        _write_rows_json(path, pl.cfg, EFFECTS_COLUMNS, rows)
    else:
        path = pl.cfg.output_dir / "effects.csv"
        _write_csv(path, pl.cfg, "effects", EFFECTS_COLUMNS, rows)
    return [path]


def run_project(pl: Pipeline) -> list[Path]:
    proj = pl.losses
    if pl.cfg.fmt == "json":
        path = pl.cfg.output_dir / "losses.json"
        _write_json(path, pl.cfg, {
            "baseline": proj.baseline, "projected": proj.projected, "total_loss": proj.total_loss,
            "loss_share": proj.loss_share, "bands": list(proj.rows()),
        })
    else:
        path = pl.cfg.output_dir / "losses.csv"
        write_losses(proj, path, pl.cfg.header_lines("losses"))
    return [path]


def run_allocate(pl: Pipeline) -> list[Path]:
    """Per-enrollee subsidies at the first configured budget."""
    if not pl.cfg.budgets:
        raise ConfigError("no budgets configured")
    budget = pl.cfg.budgets[0]
    res = pl.fill_order.result(budget)
    e = pl.enrollees
    rate = np.abs(pl.response.marginal_effect(e.fpl))
    cols = ("person_id", "fpl", "marginal_effect_abs", "cap", "subsidy")
    keep = np.flatnonzero(res.subsidies > 0)
    rows = [[e.person_id[i], e.fpl[i], rate[i], round(float(res.caps[i]), 6), round(float(res.subsidies[i]), 6)]
            for i in keep]
    summary = {"budget": budget, "spend": res.spend, "gain": res.gain, "n_subsidized": res.n_subsidized,
               "marginal_enrollee_fpl": res.marginal_enrollee_fpl, "mean_subsidy": res.mean_subsidy,
               "cost_effectiveness_per_10M": res.cost_effectiveness}
    if pl.cfg.fmt == "json":
        path = pl.cfg.output_dir / "allocation.json"
        payload = {"columns": list(cols), "rows": [dict(zip(cols, map(_json_value, r))) for r in rows],
                   "summary": {k: _json_value(v) for k, v in summary.items()}}
        _write_json(path, pl.cfg, payload)
    else:
        path = pl.cfg.output_dir / "allocation.csv"
        with open(path, "w", newline="", encoding="utf-8") as fh:
            for line in pl.cfg.header_lines("allocation"):
                fh.write(f"# {line}\n")
            for k, v in summary.items():
                fh.write(f"# {k}: {_fmt(v)}\n")
        with open(path, "a", newline="", encoding="utf-8") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(cols)
            for r in rows:
                w.writerow([_fmt(v) for v in r])
    return [path]


def run_sweep(pl: Pipeline) -> list[Path]:
    rows = pl.sweep
    plot = pl.cfg.output_dir / "plot_data.json"
    if pl.cfg.fmt == "json":
        path = pl.cfg.output_dir / "sweep.json"
        _write_rows_json(path, pl.cfg, SWEEP_COLUMNS, [list(asdict(r).values()) for r in rows], units=SWEEP_UNITS)
    else:
        path = pl.cfg.output_dir / "sweep.csv"
        write_sweep(rows, path, pl.cfg.header_lines("sweep"))
    write_plot_data(rows, plot, pl.cfg.provenance())
    return [path, plot]


RUNNERS = {
    "generate": run_generate,
    "quote": run_quote,
    "fit": run_fit,
    "effects": run_effects,
    "project": run_project,
    "allocate": run_allocate,
    "sweep": run_sweep,
}


def run_subcommand(name: str, cfg: ScenarioConfig) -> list[Path]:
    if name not in SUBCOMMANDS:
        raise ConfigError(f"unknown subcommand {name!r}")
    cfg.output_dir.mkdir(parents=True, exist_ok=True)
    pl = Pipeline(cfg)
    pl.regimes  # resolve regime references before any heavy work
    names = [n for n in SUBCOMMANDS if n != "all"] if name == "all" else [name]
    written = []
    for n in names:
        written += RUNNERS[n](pl)
    return written


# -- entry point ---------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="subsidysim", description=__doc__.splitlines()[0])
    parser.add_argument("--version", action="version", version=f"subsidysim {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)
    for name in SUBCOMMANDS:
        p = sub.add_parser(name)
        p.add_argument("--config", help="scenario JSON (default: bundled scenario)")
        p.add_argument("--seed", type=int, help="override the root seed")
        p.add_argument("--out", help="output directory (default: config output_dir or ./out)")
        p.add_argument("--budgets", help="annual budgets, e.g. 10M,20M or 10M:150M:10M")
        p.add_argument("--format", choices=("csv", "json"), default="csv", dest="fmt")
    return parser


def _report_error(exc: BaseException, code: int, kind: str, out_dir) -> None:
    report = {"error": kind, "exit_code": code, "message": str(exc)}
    if isinstance(exc, DataError) and exc.rejects:
        report["rejects"] = [{"row": r, "reason": why} for r, why in exc.rejects[:100]]
    text = json.dumps(report, indent=2)
    print(text, file=sys.stderr)
    if out_dir is not None:
        try:
            Path(out_dir).mkdir(parents=True, exist_ok=True)
            (Path(out_dir) / "error.json").write_text(text + "\n", encoding="utf-8")
        except OSError:
            pass


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    out_dir = args.out
    try:
        budgets = parse_budgets(args.budgets) if args.budgets else None
        cfg = load_config(args.config, seed=args.seed, budgets=budgets, out=args.out, fmt=args.fmt)
        out_dir = cfg.output_dir
        paths = run_subcommand(args.command, cfg)
    except SubsidySimError as exc:
        _report_error(exc, exc.exit_code, exc.kind, out_dir)
        return exc.exit_code
    except np.linalg.LinAlgError as exc:
        _report_error(exc, NumericalError.exit_code, NumericalError.kind, out_dir)
        return NumericalError.exit_code
    for p in paths:
        print(p)
    return 0


if __name__ == "__main__":
    sys.exit(main())
