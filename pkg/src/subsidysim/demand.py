"""Linear-probability coverage demand: OLS and simulated-instrument 2SLS.

Coverage is scored 0/100, so coefficients read in percentage points. The
endogenous block is the post-subsidy lowest-silver premium under the regime
in force (IRA era) and its interactions with z-scored FPL and an indicator for
FPL strictly above 200; the excluded instruments are the same three terms
built from the premium the ACA schedule would have produced. Rating-area-by-year
fixed effects are absorbed by weighted within-transformation and standard
errors are clustered by health insurance unit.

Sign convention: ``alphas`` are the signed regression coefficients on the three
premium terms, so a marginal effect of coverage per dollar is negative.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field

import numpy as np

from .bands import EFFECT_BANDS, Band
from .errors import DataError, NumericalError
from .population import ENROLLEE, PersonTable, weighted_moments
from .premium import QuoteTable

ENDOG_NAMES = ("premium", "premium_x_fpl", "premium_x_fpl_gt200")
INSTRUMENT_NAMES = ("aca_premium", "aca_premium_x_fpl", "aca_premium_x_fpl_gt200")
FPL_THRESHOLD = 200.0


@dataclass(frozen=True)
class DesignMatrix:
    y: np.ndarray
    endog: np.ndarray
    instruments: np.ndarray
    exog: np.ndarray
    exog_names: tuple[str, ...]
    fe: np.ndarray
    fe_labels: tuple[str, ...]
    clusters: np.ndarray
    weights: np.ndarray
    fpl: np.ndarray
    fpl_norm: tuple[float, float]
    year: np.ndarray = field(default=None)
    is_enrollee: np.ndarray = field(default=None)
    n_excluded: int = 0

    def __len__(self):
        return len(self.y)

    @property
    def premium(self):
        return self.endog[:, 0]

    @property
    def fplz(self):
        return (self.fpl - self.fpl_norm[0]) / self.fpl_norm[1]

    @classmethod
    def from_arrays(cls, *, y, premium, instrument_premium, fpl, exog, exog_names, fe, clusters,
                    weights, year=None, is_enrollee=None, fpl_norm=None, n_excluded=0) -> DesignMatrix:
        """Assemble the interaction blocks from raw premiums and FPL.

        ``fe`` and ``clusters`` may be any hashable labels; they are factorised
        here. ``fpl_norm`` defaults to the weighted mean/SD of ``fpl``.
        """
        fpl = np.asarray(fpl, dtype=float)
        w = np.asarray(weights, dtype=float)
        if fpl_norm is None:
            fpl_norm = weighted_moments(fpl, w)
        if not fpl_norm[1] > 0:
            raise NumericalError("FPL has zero weighted SD; cannot z-score")
        z = (fpl - fpl_norm[0]) / fpl_norm[1]
        gt = (fpl > FPL_THRESHOLD).astype(float)
        p = np.asarray(premium, dtype=float)
        q = np.asarray(instrument_premium, dtype=float)
        fe_labels, fe_codes = np.unique(np.asarray(fe).astype(str), return_inverse=True)
        _, cl_codes = np.unique(np.asarray(clusters).astype(str), return_inverse=True)
        n = len(fpl)
        return cls(
            y=np.asarray(y, dtype=float),
            endog=np.column_stack([p, p * z, p * gt]),
            instruments=np.column_stack([q, q * z, q * gt]),
            exog=np.asarray(exog, dtype=float).reshape(n, -1),
            exog_names=tuple(exog_names),
            fe=fe_codes.astype(np.int64),
            fe_labels=tuple(str(x) for x in fe_labels),
            clusters=cl_codes.astype(np.int64),
            weights=w,
            fpl=fpl,
            fpl_norm=(float(fpl_norm[0]), float(fpl_norm[1])),
            year=None if year is None else np.asarray(year),
            is_enrollee=np.ones(n, bool) if is_enrollee is None else np.asarray(is_enrollee, bool),
            n_excluded=n_excluded,
        )

    def take(self, idx, clusters=None) -> DesignMatrix:
        return DesignMatrix(
            y=self.y[idx], endog=self.endog[idx], instruments=self.instruments[idx], exog=self.exog[idx],
            exog_names=self.exog_names, fe=self.fe[idx], fe_labels=self.fe_labels,
            clusters=self.clusters[idx] if clusters is None else clusters,
            weights=self.weights[idx], fpl=self.fpl[idx], fpl_norm=self.fpl_norm,
            year=None if self.year is None else self.year[idx],
            is_enrollee=self.is_enrollee[idx], n_excluded=self.n_excluded,
        )

    def resample_clusters(self, rng) -> DesignMatrix:
        """Cluster bootstrap draw; repeated clusters get distinct ids."""
        order = np.argsort(self.clusters, kind="stable")
        sizes = np.bincount(self.clusters)
        members = np.split(order, np.cumsum(sizes)[:-1])
        draws = rng.integers(len(sizes), size=len(sizes))
        idx = np.concatenate([members[d] for d in draws])
        new_ids = np.repeat(np.arange(len(draws)), sizes[draws])
        return self.take(idx, clusters=new_ids)


def build_design(persons: PersonTable, quotes_ira: QuoteTable, quotes_aca: QuoteTable,
                 poly_degree: int = 1) -> DesignMatrix:
    """Estimation sample from persons quoted under both regimes.

    Rows unquotable under either regime are dropped and counted in
    ``n_excluded``. Enrollees get weight one; survey respondents keep theirs.
    ``poly_degree`` > 1 adds z-scored FPL powers to the controls.
    """
    if not 1 <= poly_degree <= 3:
        raise ValueError("poly_degree must be 1, 2 or 3")
    ok = quotes_ira.quotable & quotes_aca.quotable
    p = persons.where(ok)
    enrollee = p.source == ENROLLEE
    w = np.where(enrollee, 1.0, p.weight)
    if not w.sum() > 0:
        raise DataError("estimation sample has zero total weight")
    norm = weighted_moments(p.fpl, w)
    exog = [p.female.astype(float), p.age.astype(float), (p.fpl - norm[0]) / norm[1]]
    names = ["female", "age", "fpl"]
    for k in range(2, poly_degree + 1):
        m, s = weighted_moments(p.fpl**k, w)
        exog.append((p.fpl**k - m) / s)
        names.append(f"fpl^{k}")
    return DesignMatrix.from_arrays(
        y=np.where(p.insured, 100.0, 0.0),
        premium=quotes_ira.post_subsidy_premium[ok],
        instrument_premium=quotes_aca.post_subsidy_premium[ok],
        fpl=p.fpl,
        exog=np.column_stack(exog),
        exog_names=names,
        fe=np.char.add(np.char.add(p.rating_area, ":"), p.year.astype(str)),
        clusters=p.hiu_id,
        weights=w,
        year=p.year,
        is_enrollee=enrollee,
        fpl_norm=norm,
        n_excluded=int((~ok).sum()),
    )


# -- estimation ----------------------------------------------------------------

def absorb(M, groups, w):
    """Subtract weighted group means (single-way fixed effects)."""
    M = np.asarray(M, dtype=float)
    flat = M.ndim == 1
    M2 = M.reshape(len(M), -1)
    wsum = np.bincount(groups, weights=w)
    safe = np.where(wsum > 0, wsum, 1.0)
    out = np.empty_like(M2)
    for j in range(M2.shape[1]):
        means = np.bincount(groups, weights=w * M2[:, j], minlength=len(wsum)) / safe
        out[:, j] = M2[:, j] - means[groups]
    return out[:, 0] if flat else out


def _check_rank(A, what):
    s = np.linalg.svd(A, compute_uv=False)
    if s.size == 0 or s[-1] <= s[0] * 1e-10:
        raise NumericalError(f"{what} is rank deficient after fixed-effect absorption")


def _sandwich(bread, scores, clusters, n_obs, k_total, cov_type, resid=None, w=None):
    if cov_type == "cluster":
        g = np.unique(clusters)
        n_cl = len(g)
        if n_cl < 2:
            raise DataError("cluster-robust covariance needs at least two clusters")
        S = np.zeros((np.max(clusters) + 1, scores.shape[1]))
        for j in range(scores.shape[1]):
            S[:, j] = np.bincount(clusters, weights=scores[:, j], minlength=S.shape[0])
        meat = S.T @ S
        c = n_cl / (n_cl - 1) * (n_obs - 1) / (n_obs - k_total)
    elif cov_type == "robust":
        meat = scores.T @ scores
        c = n_obs / (n_obs - k_total)
    elif cov_type == "unadjusted":
        sigma2 = np.sum(w * resid**2) / (n_obs - k_total)
        V = sigma2 * bread
        return 0.5 * (V + V.T)
    else:
        raise ValueError(f"unknown cov_type {cov_type!r}")
    V = c * bread @ meat @ bread
    return 0.5 * (V + V.T)


@dataclass(frozen=True)
class FirstStage:
    endogenous: str
    instruments: tuple[str, ...]
    coefs: tuple[float, ...]
    ses: tuple[float, ...]
    f_stat: float
    df: tuple[int, int]


@dataclass(frozen=True)
class DemandFit:
    method: str
    names: tuple[str, ...]
    params: np.ndarray
    vcov: np.ndarray
    fe: dict[str, float]
    norm: tuple[float, float]
    first_stage: tuple[FirstStage, ...]
    n_obs: int
    n_clusters: int
    n_excluded: int
    cov_type: str

    @property
    def alphas(self):
        return self.params[:3]

    @property
    def gammas(self):
        return self.params[3:]

    @property
    def se(self):
        return np.sqrt(np.diag(self.vcov))

    def marginal_effect(self, fpl):
        """d coverage (pp) / d premium ($/month) at ``fpl``."""
        fpl = np.asarray(fpl, dtype=float)
        z = (fpl - self.norm[0]) / self.norm[1]
        a = self.alphas
        return a[0] + a[1] * z + a[2] * (fpl > FPL_THRESHOLD)

    def to_dict(self) -> dict:
        return {
            "method": self.method,
            "cov_type": self.cov_type,
            "coefficients": {n: float(v) for n, v in zip(self.names, self.params)},
            "std_errors": {n: float(v) for n, v in zip(self.names, self.se)},
            "vcov": [[float(x) for x in row] for row in self.vcov],
            "fixed_effects": {k: float(v) for k, v in self.fe.items()},
            "fpl_norm": {"mean": self.norm[0], "sd": self.norm[1]},
            "first_stage": [
                {
                    "endogenous": fs.endogenous,
                    "rows": [
                        {"instrument": i, "estimate": c, "se": s}
                        for i, c, s in zip(fs.instruments, fs.coefs, fs.ses)
                    ],
                    "f_stat": fs.f_stat,
                    "df": list(fs.df),
                }
                for fs in self.first_stage
            ],
            "n_obs": self.n_obs,
            "n_clusters": self.n_clusters,
            "n_excluded": self.n_excluded,
        }

    @classmethod
    def from_dict(cls, d: dict) -> DemandFit:
        names = tuple(d["coefficients"])
        return cls(
            method=d["method"],
            names=names,
            params=np.array([d["coefficients"][n] for n in names]),
            vcov=np.array(d["vcov"]),
            fe=dict(d["fixed_effects"]),
            norm=(d["fpl_norm"]["mean"], d["fpl_norm"]["sd"]),
            first_stage=tuple(
                FirstStage(
                    fs["endogenous"],
                    tuple(r["instrument"] for r in fs["rows"]),
                    tuple(r["estimate"] for r in fs["rows"]),
                    tuple(r["se"] for r in fs["rows"]),
                    fs["f_stat"],
                    tuple(fs["df"]),
                )
                for fs in d["first_stage"]
            ),
            n_obs=d["n_obs"],
            n_clusters=d["n_clusters"],
            n_excluded=d["n_excluded"],
            cov_type=d["cov_type"],
        )

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2)


def _prepare(design: DesignMatrix):
    w = design.weights
    if not np.sum(w) > 0:
        raise DataError("total weight is zero")
    if np.any(w < 0):
        raise DataError("negative weights")
    keep = w > 0
    fe_present = np.unique(design.fe[keep])
    n_obs = int(keep.sum())
    n_cl = len(np.unique(design.clusters[keep]))
    if n_cl < 2:
        raise DataError("need at least two clusters")
    return w, n_obs, len(fe_present)


@dataclass(frozen=True)
class _Solved:
    beta: np.ndarray
    bread: np.ndarray
    Xhat: np.ndarray
    u: np.ndarray
    X: np.ndarray
    Z: np.ndarray
    Xd: np.ndarray
    Zd: np.ndarray
    w: np.ndarray
    n_obs: int
    n_fe: int


def _solve(design: DesignMatrix, method: str) -> _Solved:
    w, n_obs, n_fe = _prepare(design)
    X = np.column_stack([design.endog, design.exog])
    Z = np.column_stack([design.instruments, design.exog]) if method == "2sls" else X
    Xd = absorb(X, design.fe, w)
    Zd = absorb(Z, design.fe, w)
    yd = absorb(design.y, design.fe, w)
    sw = np.sqrt(w)[:, None]
    _check_rank(Zd * sw, "instrument matrix")
    _check_rank(Xd * sw, "regressor matrix")

    if method == "2sls":
        Pi = np.linalg.lstsq(Zd * sw, Xd * sw, rcond=None)[0]
        Xhat = Zd @ Pi
    else:
        Xhat = Xd
    H = Xhat.T @ (w[:, None] * Xd)
    try:
        beta = np.linalg.solve(H, Xhat.T @ (w * yd))
        bread = np.linalg.inv(Xhat.T @ (w[:, None] * Xhat))
    except np.linalg.LinAlgError as exc:
        raise NumericalError(f"singular normal equations: {exc}") from exc
    return _Solved(beta, bread, Xhat, yd - Xd @ beta, X, Z, Xd, Zd, w, n_obs, n_fe)


def _fit(design: DesignMatrix, method: str, cov_type: str) -> DemandFit:
    sol = _solve(design, method)
    beta, bread, X, Z, Xd, Zd, w, u = sol.beta, sol.bread, sol.X, sol.Z, sol.Xd, sol.Zd, sol.w, sol.u
    n_obs, n_fe = sol.n_obs, sol.n_fe
    names = ENDOG_NAMES + design.exog_names
    k_total = X.shape[1] + n_fe
    scores = sol.Xhat * (w * u)[:, None]
    vcov = _sandwich(bread, scores, design.clusters, n_obs, k_total, cov_type, resid=u, w=w)

    # fixed effects recovered from undemeaned data
    r = design.y - X @ beta
    wsum = np.bincount(design.fe, weights=w, minlength=len(design.fe_labels))
    fe_vals = np.bincount(design.fe, weights=w * r, minlength=len(design.fe_labels)) / np.where(wsum > 0, wsum, 1)
    fe = {lab: float(v) for lab, v, ws in zip(design.fe_labels, fe_vals, wsum) if ws > 0}

    first = ()
    if method == "2sls":
        first = tuple(_first_stage(Zd, Xd[:, j], w, design.clusters, n_obs, k_total_fs=Z.shape[1] + n_fe,
                                   name=ENDOG_NAMES[j], cov_type=cov_type) for j in range(3))
    return DemandFit(
        method=method.upper() if method == "ols" else "2SLS",
        names=names,
        params=beta,
        vcov=vcov,
        fe=fe,
        norm=design.fpl_norm,
        first_stage=first,
        n_obs=n_obs,
        n_clusters=len(np.unique(design.clusters[w > 0])),
        n_excluded=design.n_excluded,
        cov_type=cov_type,
    )


def _first_stage(Zd, x, w, clusters, n_obs, k_total_fs, name, cov_type) -> FirstStage:
    ZW = Zd * w[:, None]
    bread = np.linalg.inv(Zd.T @ ZW)
    b = bread @ (ZW.T @ x)
    v = x - Zd @ b
    V = _sandwich(bread, Zd * (w * v)[:, None], clusters, n_obs, k_total_fs, cov_type, resid=v, w=w)
    q = 3
    bq = b[:q]
    Vq = V[:q, :q]
    f = float(bq @ np.linalg.solve(Vq, bq) / q)
    df2 = (len(np.unique(clusters)) - 1) if cov_type == "cluster" else n_obs - k_total_fs
    return FirstStage(name, INSTRUMENT_NAMES, tuple(float(x) for x in bq),
                      tuple(float(x) for x in np.sqrt(np.diag(Vq))), f, (q, int(df2)))


def fit_ols(design: DesignMatrix, cov_type: str = "cluster") -> DemandFit:
    return _fit(design, "ols", cov_type)


def fit_2sls(design: DesignMatrix, cov_type: str = "cluster") -> DemandFit:
    return _fit(design, "2sls", cov_type)


# -- marginal effects and elasticities ----------------------------------------

@dataclass(frozen=True)
class EffectsRow:
    band: str
    mean_annual_enrollment: float
    mean_premium: float
    enrollment_rate: float
    marginal_effect: float
    marginal_effect_se: float
    semi_elasticity: float
    semi_elasticity_se: float
    elasticity: float
    elasticity_se: float


EFFECTS_COLUMNS = tuple(EffectsRow.__dataclass_fields__)


def response_measures(marginal_effect, enrollment_rate, mean_premium):
    """(semi-elasticity, elasticity) from a marginal effect in pp per $.

    Semi-elasticity is the percent change in coverage per $100; elasticity
    rescales it by the mean premium.
    """
    semi = 100.0 * marginal_effect / enrollment_rate
    return semi, semi * mean_premium / 100.0


def band_means(design: DesignMatrix, band: Band):
    """Weighted (mean premium, coverage rate %, mean FPLz, share above 200) in ``band``."""
    m = band.contains(design.fpl) & (design.weights > 0)
    w = design.weights[m]
    W = w.sum()
    if not W > 0:
        raise DataError(f"band {band.name} is empty under the weights")
    prem = float(np.sum(w * design.premium[m]) / W)
    cvg = float(np.sum(w * design.y[m]) / W)
    z = float(np.sum(w * design.fplz[m]) / W)
    gt = float(np.sum(w * (design.fpl[m] > FPL_THRESHOLD)) / W)
    return prem, cvg, z, gt


def coef_influence(fit: DemandFit, design: DesignMatrix) -> np.ndarray:
    """Per-observation influence of the coefficient vector, shape ``(n, k)``.

    Summed within clusters and crossed, this reproduces the sandwich
    covariance up to its small-sample factor.
    """
    sol = _solve(design, "2sls" if fit.method == "2SLS" else "ols")
    return (sol.Xhat * (sol.w * sol.u)[:, None]) @ sol.bread


def _cluster_cov(psi, design: DesignMatrix, fit: DemandFit) -> np.ndarray:
    """Covariance of stacked influence functions with the fit's small-sample factor."""
    n_obs = fit.n_obs
    k_total = len(fit.params) + len(fit.fe)
    if fit.cov_type == "cluster":
        cl = design.clusters
        S = np.zeros((int(cl.max()) + 1, psi.shape[1]))
        for j in range(psi.shape[1]):
            S[:, j] = np.bincount(cl, weights=psi[:, j], minlength=S.shape[0])
        g = len(np.unique(cl[design.weights > 0]))
        c = g / (g - 1) * (n_obs - 1) / (n_obs - k_total)
    else:
        S = psi
        c = n_obs / (n_obs - k_total)
    return c * S.T @ S


def effects(fit: DemandFit, design: DesignMatrix, band: Band, fixed_means: bool = False,
            influence: np.ndarray | None = None) -> EffectsRow:
    """Marginal effect, semi-elasticity and elasticity at the band's weighted means.

    The band's representative FPL is its weighted mean. Delta-method SEs by
    default also propagate sampling noise in the band means (coverage rate,
    premium, FPL terms), stacked with the coefficient influence functions and
    clustered like the fit. ``fixed_means=True`` uses the coefficient
    covariance alone. ``influence`` may pass a precomputed
    :func:`coef_influence` to avoid refitting.
    """
    prem, cvg, z, gt = band_means(design, band)
    if cvg == 0:
        raise DataError(f"band {band.name} has zero enrollment rate")
    a = fit.alphas
    g = np.array([1.0, z, gt])
    me = float(g @ a)
    semi, el = response_measures(me, cvg, prem)
    if fixed_means:
        me_se = float(np.sqrt(g @ fit.vcov[:3, :3] @ g))
        semi_se, el_se = 100.0 * me_se / cvg, abs(prem / cvg) * me_se
    else:
        if influence is None:
            influence = coef_influence(fit, design)
        m = band.contains(design.fpl) & (design.weights > 0)
        wb = np.where(m, design.weights, 0.0)
        W = wb.sum()
        means = np.column_stack([
            wb * (design.y - cvg),
            wb * (design.premium - prem),
            wb * (design.fplz - z),
            wb * ((design.fpl > FPL_THRESHOLD) - gt),
        ]) / W
        V = _cluster_cov(np.column_stack([influence[:, :3], means]), design, fit)
        # parameters: a1, a2, a3, cvg, prem, z, gt
        d_me = np.array([1.0, z, gt, 0.0, 0.0, a[1], a[2]])
        d_semi = 100.0 / cvg * d_me
        d_semi[3] = -100.0 * me / cvg**2
        d_el = prem / cvg * d_me
        d_el[3] = -me * prem / cvg**2
        d_el[4] = me / cvg
        me_se, semi_se, el_se = (float(np.sqrt(d @ V @ d)) for d in (d_me, d_semi, d_el))
    m = band.contains(design.fpl) & design.is_enrollee
    n_years = len(np.unique(design.year)) if design.year is not None and len(design.year) else 1
    return EffectsRow(
        band=band.name,
        mean_annual_enrollment=float(np.sum(design.weights[m]) / n_years),
        mean_premium=prem,
        enrollment_rate=cvg,
        marginal_effect=me,
        marginal_effect_se=me_se,
        semi_elasticity=semi,
        semi_elasticity_se=semi_se,
        elasticity=el,
        elasticity_se=el_se,
    )


def effects_table(fit: DemandFit, design: DesignMatrix, bands=EFFECT_BANDS,
                  fixed_means: bool = False) -> list[EffectsRow]:
    psi = None if fixed_means else coef_influence(fit, design)
    return [effects(fit, design, b, fixed_means, psi) for b in bands]


def bootstrap_effects(design: DesignMatrix, bands=EFFECT_BANDS, reps: int = 500, seed: int = 0,
                      method: str = "2sls") -> np.ndarray:
    """Cluster-bootstrap replicates of (ME, semi, elasticity) per band.

    Each replicate refits the model and recomputes band means. Returns an
    array of shape ``(reps, len(bands), 3)``.
    """
    fitter = fit_2sls if method == "2sls" else fit_ols
    rng = np.random.default_rng(seed)
    out = np.empty((reps, len(bands), 3))
    for r in range(reps):
        d = design.resample_clusters(rng)
        f = fitter(d)
        for b, band in enumerate(bands):
            row = effects(f, d, band, fixed_means=True)
            out[r, b] = (row.marginal_effect, row.semi_elasticity, row.elasticity)
    return out


def effects_to_dict(rows) -> list[dict]:
    return [asdict(r) for r in rows]
