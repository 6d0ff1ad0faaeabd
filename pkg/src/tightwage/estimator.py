"""High-dimensional fixed-effects OLS and 2SLS with cluster-robust inference.

Fixed effects are absorbed by alternating projections (iterated group
demeaning, with Irons-Tuck extrapolation); the regression then runs on the
residualized columns.  Covariances are CR1 sandwiches clustered on one
dimension.
"""

from __future__ import annotations

import logging
import warnings
from dataclasses import asdict, dataclass, field
from typing import Mapping, Optional, Sequence

import numpy as np
import pandas as pd
from scipy import stats
from scipy.sparse import coo_matrix
from scipy.sparse.csgraph import connected_components

from .errors import CollinearityError, ConvergenceError, EstimationError

log = logging.getLogger(__name__)

# named fixed-effect designs accepted in regression spec files
FE_ALIASES = {
    "worker": "worker_id",
    "person": "worker_id",
    "firm": "firm_id",
    "labor-market": "market",
    "labor_market": "market",
    "occupation-by-year": "occupation_key*year",
    "industry-by-year": "industry*year",
    "firm-by-year": "firm_id*year",
}


@dataclass
class RegressionSpec:
    """Declarative description of one wage regression.

    ``fe`` entries are column names, ``a*b`` interactions or aliases from
    :data:`FE_ALIASES`.  ``trim`` gives lower and upper percentiles, e.g.
    ``(5, 95)``, applied to the outcome and the first explanatory variable.  With ``quadratic`` the first
    endogenous column and the first instrument enter squared as well.
    """

    outcome: str
    endogenous: Sequence[str] = ()
    instruments: Sequence[str] = ()
    exog: Sequence[str] = ()
    fe: Sequence[str] = ()
    cluster: Optional[str] = "market"
    weight: Optional[str] = None
    trim: Optional[tuple] = None
    quadratic: bool = False
    tol: float = 1e-8
    max_sweeps: int = 10_000
    drop_singletons: bool = True
    f_floor: float = 10.0

    def __post_init__(self):
        self.endogenous = list(self.endogenous)
        self.instruments = list(self.instruments)
        self.exog = list(self.exog)
        self.fe = [FE_ALIASES.get(f, f) for f in self.fe]
        if len(self.instruments) < len(self.endogenous):
            raise EstimationError("need at least as many instruments as endogenous regressors")
        if self.trim is not None:
            lo, hi = self.trim
            if not (0 <= lo < 50 < hi <= 100):
                raise EstimationError(
                    f"trim needs a lower percentile in [0, 50) and an upper one in (50, 100], got {self.trim}")
            self.trim = (float(lo), float(hi))
        if self.quadratic and not self.endogenous:
            raise EstimationError("the quadratic design needs an instrumented regressor")

    @classmethod
    def from_dict(cls, d: Mapping) -> "RegressionSpec":
        d = dict(d)
        if d.get("trim") is not None:
            d["trim"] = tuple(d["trim"])
        return cls(**d)

    def to_dict(self):
        d = asdict(self)
        d["trim"] = list(self.trim) if self.trim is not None else None
        return d

    @property
    def is_iv(self):
        return bool(self.endogenous)


@dataclass
class FirstStage:
    endogenous: str
    coef: dict
    se: dict
    f_stat: float


@dataclass
class EstimationResult:
    coef: dict
    se: dict
    cov: np.ndarray
    names: list
    n_obs: int
    n_clusters: int
    k: int
    df_fe: int
    df_fe_exact: bool
    small_sample_factor: float
    first_stage: list = field(default_factory=list)
    residuals: Optional[np.ndarray] = field(default=None, repr=False)
    sample_index: Optional[np.ndarray] = field(default=None, repr=False)
    n_singletons: int = 0
    n_missing: int = 0
    n_trimmed: int = 0
    demean_iterations: int = 0
    degenerate: bool = False
    method: str = "ols"
    warnings: list = field(default_factory=list)
    spec: Optional[RegressionSpec] = None

    def t_stat(self, name):
        return self.coef[name] / self.se[name] if self.se[name] > 0 else np.inf

    def p_value(self, name):
        """Two-sided p-value from a t distribution with G - 1 degrees of freedom."""
        return float(2 * stats.t.sf(abs(self.t_stat(name)), df=max(self.n_clusters - 1, 1)))

    def stars(self, name):
        p = self.p_value(name)
        return "***" if p < 0.01 else "**" if p < 0.05 else "*" if p < 0.10 else ""

    def to_dict(self):
        return {
            "method": self.method,
            "names": list(self.names),
            "coefficients": {n: float(v) for n, v in self.coef.items()},
            "std_errors": {n: float(v) for n, v in self.se.items()},
            "p_values": {n: self.p_value(n) for n in self.names},
            "stars": {n: self.stars(n) for n in self.names},
            "cov": np.asarray(self.cov).tolist(),
            "n_obs": self.n_obs,
            "n_clusters": self.n_clusters,
            "k": self.k,
            "df_fe": self.df_fe,
            "df_fe_exact": self.df_fe_exact,
            "small_sample_factor": self.small_sample_factor,
            "first_stage": [asdict(fs) for fs in self.first_stage],
            "n_singletons": self.n_singletons,
            "n_missing": self.n_missing,
            "n_trimmed": self.n_trimmed,
            "demean_iterations": self.demean_iterations,
            "degenerate": self.degenerate,
            "warnings": list(self.warnings),
            "spec": self.spec.to_dict() if self.spec is not None else None,
        }

    def summary(self):
        lines = [f"{self.method.upper()}  N={self.n_obs}  G={self.n_clusters}"]
        for n in self.names:
            lines.append(f"  {n:<24s} {self.coef[n]: .6f}{self.stars(n):<3s} ({self.se[n]:.6f})")
        for fs in self.first_stage:
            lines.append(f"  first stage {fs.endogenous}: F = {fs.f_stat:.2f}")
        return "\n".join(lines)


# --------------------------------------------------------------------------- fixed effects


def fe_codes(panel: pd.DataFrame, dim: str) -> np.ndarray:
    """Dense integer codes for a fixed-effect dimension (``a*b`` for interactions)."""
    dim = FE_ALIASES.get(dim, dim)
    parts = dim.split("*")
    if len(parts) == 1:
        codes, _ = pd.factorize(panel[parts[0]], sort=False)
    else:
        codes, _ = pd.factorize(pd.MultiIndex.from_frame(panel[parts]), sort=False)
    if (codes < 0).any():
        raise EstimationError(f"fixed-effect dimension {dim!r} has missing values")
    return codes.astype(np.int64)


def _recode(codes: np.ndarray) -> np.ndarray:
    _, dense = np.unique(codes, return_inverse=True)
    return dense.astype(np.int64)


def singleton_mask(codes_list: Sequence[np.ndarray]) -> np.ndarray:
    """Boolean mask of rows surviving iterative singleton removal."""
    if not codes_list:
        raise EstimationError("singleton dropping needs at least one fixed-effect dimension")
    keep = np.ones(len(codes_list[0]), dtype=bool)
    changed = True
    while changed:
        changed = False
        for codes in codes_list:
            counts = np.bincount(codes[keep], minlength=codes.max() + 1 if len(codes) else 0)
            single = keep & (counts[codes] == 1)
            if single.any():
                keep &= ~single
                changed = True
    return keep


def drop_singletons(panel: pd.DataFrame, fe_dims: Sequence[str]) -> pd.DataFrame:
    """Remove, to a fixpoint, observations alone in any fixed-effect group."""
    if not fe_dims:
        raise EstimationError("singleton dropping needs at least one fixed-effect dimension")
    keep = singleton_mask([fe_codes(panel, d) for d in fe_dims])
    if not keep.any():
        raise EstimationError("no identifying variation: every observation is a singleton")
    return panel.loc[keep]


class _Projector:
    """Weighted group-mean sweeps over a fixed set of dimensions."""

    def __init__(self, codes_list, weights):
        self.codes = [np.asarray(c, dtype=np.int64) for c in codes_list]
        self.w = None if weights is None else np.asarray(weights, float)
        self.sizes = [int(c.max()) + 1 for c in self.codes]
        if self.w is None:
            self.inv_wsum = [1.0 / np.bincount(c, minlength=s) for c, s in zip(self.codes, self.sizes)]
        else:
            self.inv_wsum = [1.0 / np.bincount(c, weights=self.w, minlength=s) for c, s in zip(self.codes, self.sizes)]

    def sweep(self, x):
        """One pass of group-mean subtraction over every dimension, in order."""
        x = x.copy()
        for codes, size, inv in zip(self.codes, self.sizes, self.inv_wsum):
            wx = x if self.w is None else x * self.w
            means = np.bincount(codes, weights=wx, minlength=size) * inv
            x -= means[codes]
        return x


def _demean_column(proj: _Projector, x, tol, max_sweeps):
    if len(proj.codes) == 1:
        return proj.sweep(x), 1
    x0 = x
    sweeps = 0
    while sweeps < max_sweeps:
        x1 = proj.sweep(x0)
        sweeps += 1
        delta = np.max(np.abs(x1 - x0))
        if delta < tol:
            return x1, sweeps
        x2 = proj.sweep(x1)
        sweeps += 1
        delta = np.max(np.abs(x2 - x1))
        if delta < tol:
            return x2, sweeps
        d1 = x2 - x1
        d2 = d1 - (x1 - x0)
        denom = d2 @ d2
        if denom > 0:
            x0 = x2 - (d1 @ d2) / denom * d1
        else:
            x0 = x2
    raise ConvergenceError(f"demeaning did not converge in {max_sweeps} sweeps (last change {delta:.3g})",
                           last=x0, delta=float(delta))


def demean_array(X, codes_list, weights=None, tol=1e-8, max_sweeps=10_000):
    """Residualize each column of ``X`` on the fixed effects.

    Columns are processed independently, so the result for one column does not
    depend on which others are passed along.  Returns ``(residuals, sweeps)``
    with ``sweeps`` the maximum over columns.
    """
    X = np.asarray(X, dtype=float)
    squeeze = X.ndim == 1
    if squeeze:
        X = X[:, None]
    if not codes_list:
        if weights is None:
            return (X - X.mean(axis=0)).squeeze() if squeeze else X - X.mean(axis=0), 0
        w = np.asarray(weights, float)
        out = X - (w @ X) / w.sum()
        return (out[:, 0] if squeeze else out), 0
    proj = _Projector(codes_list, weights)
    out = np.empty_like(X)
    most = 0
    for j in range(X.shape[1]):
        out[:, j], sweeps = _demean_column(proj, X[:, j], tol, max_sweeps)
        most = max(most, sweeps)
    return (out[:, 0] if squeeze else out), most


def demean(panel: pd.DataFrame, columns: Sequence[str], fe_dims: Sequence[str], tol: float = 1e-8,
           weights: Optional[str] = None, max_sweeps: int = 10_000) -> pd.DataFrame:
    """Within-transform ``columns`` of ``panel`` with respect to ``fe_dims``."""
    codes = [fe_codes(panel, d) for d in fe_dims]
    w = panel[weights].to_numpy(float) if weights else None
    res, _ = demean_array(panel[list(columns)].to_numpy(float), codes, w, tol, max_sweeps)
    return pd.DataFrame(res, index=panel.index, columns=list(columns))


def absorbed_dof(codes_list: Sequence[np.ndarray]) -> tuple[int, bool]:
    """Degrees of freedom used by the fixed effects.

    Sum of group counts, less one per dimension after the first, less the
    extra redundancy from connected components of the first two dimensions.
    Exact for one or two dimensions, an upper bound beyond that.
    """
    if not codes_list:
        return 1, True  # the intercept
    sizes = [int(c.max()) + 1 for c in codes_list]
    dof = sizes[0] + sum(s - 1 for s in sizes[1:])
    if len(codes_list) >= 2:
        a, b = codes_list[0], codes_list[1]
        n = sizes[0] + sizes[1]
        graph = coo_matrix((np.ones(len(a)), (a, b + sizes[0])), shape=(n, n))
        ncomp, _ = connected_components(graph, directed=False)
        dof -= ncomp - 1
    return int(dof), len(codes_list) <= 2


# --------------------------------------------------------------------------- estimation core


def _check_rank(Xt, raw_norms, names, what="regressor"):
    """Raise on a column absorbed by the fixed effects or spanned by earlier ones."""
    norms = np.sqrt(np.sum(Xt ** 2, axis=0))
    for j, name in enumerate(names):
        if norms[j] <= 1e-6 * max(raw_norms[j], 1e-300):
            raise CollinearityError(name, f"{what} {name!r} is absorbed by the fixed effects")
    kept = []
    for j, name in enumerate(names):
        if kept:
            Q, _ = np.linalg.qr(Xt[:, kept])
            resid = Xt[:, j] - Q @ (Q.T @ Xt[:, j])
        else:
            resid = Xt[:, j]
        if np.linalg.norm(resid) <= 1e-9 * norms[j]:
            raise CollinearityError(name, f"{what} {name!r} is collinear with {[names[k] for k in kept]}")
        kept.append(j)


def _cluster_sums(scores, clusters, G):
    return np.stack([np.bincount(clusters, weights=scores[:, j], minlength=G) for j in range(scores.shape[1])], axis=1)


def cr1(Xhat, resid, w, clusters, df_fe):
    """CR1 covariance and small-sample factor for a (possibly projected) design."""
    n, p = Xhat.shape
    G = int(clusters.max()) + 1
    wX = Xhat * w[:, None]
    bread = np.linalg.inv(Xhat.T @ wX)
    S = _cluster_sums(wX * resid[:, None], clusters, G)
    meat = S.T @ S
    K = p + df_fe
    if G < 2 or n <= K:
        raise EstimationError(f"too few clusters ({G}) or observations ({n}) for K = {K}")
    c = G / (G - 1) * (n - 1) / (n - K)
    V = c * bread @ meat @ bread
    return (V + V.T) / 2, c, G, K


def _linear_iv(y, X, Z, w, clusters, df_fe):
    """Weighted IV (OLS when Z is X) on already-residualized data."""
    wZ = Z * w[:, None]
    if Z is X:
        Xhat = X
    else:
        Pi = np.linalg.solve(Z.T @ wZ, wZ.T @ X)
        Xhat = Z @ Pi
    wXhat = Xhat * w[:, None]
    beta = np.linalg.solve(wXhat.T @ X, wXhat.T @ y)
    resid = y - X @ beta
    V, c, G, K = cr1(Xhat, resid, w, clusters, df_fe)
    return beta, resid, V, c, G, K


@dataclass
class _Sample:
    frame: pd.DataFrame
    arrays: dict
    weights: np.ndarray
    clusters: np.ndarray
    codes: list
    n_missing: int
    n_trimmed: int
    n_singletons: int


def _columns(spec: RegressionSpec):
    endog = list(spec.endogenous)
    inst = list(spec.instruments)
    if spec.quadratic:
        endog.append(f"{endog[0]}_sq")
        inst.append(f"{inst[0]}_sq")
    return endog, inst


def _prepare(spec: RegressionSpec, panel: pd.DataFrame) -> _Sample:
    endog, inst = _columns(spec)
    frame = panel
    if spec.quadratic:
        frame = frame.assign(**{endog[-1]: frame[spec.endogenous[0]] ** 2,
                                inst[-1]: frame[spec.instruments[0]] ** 2})
    fe_cols = sorted({c for d in spec.fe for c in d.split("*")})
    for c in fe_cols + ([spec.cluster] if spec.cluster else []):
        if c not in frame:
            raise EstimationError(f"column {c!r} not in panel")
    needed = [spec.outcome] + endog + inst + list(spec.exog) + ([spec.weight] if spec.weight else [])
    for c in needed:
        if c not in frame:
            raise EstimationError(f"column {c!r} not in panel")
    extra = fe_cols + ([spec.cluster] if spec.cluster else [])
    frame = frame[list(dict.fromkeys(needed + extra))]  # avoid copying unused columns when filtering
    values = frame[needed].to_numpy(float)
    ok = np.isfinite(values).all(axis=1)
    if spec.weight:
        ok &= frame[spec.weight].to_numpy(float) > 0
    n_missing = int((~ok).sum())
    frame = frame.loc[ok]

    n_trimmed = 0
    if spec.trim is not None:
        lo, hi = spec.trim
        keep = np.ones(len(frame), dtype=bool)
        explanatory = (endog or list(spec.exog))[:1]
        for c in [spec.outcome] + explanatory:
            v = frame[c].to_numpy(float)
            a, b = np.percentile(v, [lo, hi])
            keep &= (v >= a) & (v <= b)
        n_trimmed = int((~keep).sum())
        frame = frame.loc[keep]

    codes = [fe_codes(frame, d) for d in spec.fe]
    n_singletons = 0
    if codes and spec.drop_singletons:
        keep = singleton_mask(codes)
        n_singletons = int((~keep).sum())
        if not keep.any():
            raise EstimationError("no identifying variation: every observation is a singleton")
        frame = frame.loc[keep]
        codes = [_recode(c[keep]) for c in codes]
    if len(frame) == 0:
        raise EstimationError("estimation sample is empty")

    if spec.cluster:
        clusters, _ = pd.factorize(frame[spec.cluster])
    else:
        clusters = np.arange(len(frame))
    weights = frame[spec.weight].to_numpy(float) if spec.weight else np.ones(len(frame))
    arrays = {c: frame[c].to_numpy(float) for c in [spec.outcome] + endog + inst + list(spec.exog)}
    return _Sample(frame, arrays, weights, clusters.astype(np.int64), codes, n_missing, n_trimmed, n_singletons)


def estimate(spec: RegressionSpec, panel: pd.DataFrame) -> EstimationResult:
    """Fit ``spec`` on ``panel``: OLS without endogenous columns, else 2SLS."""
    endog, inst = _columns(spec)
    sample = _prepare(spec, panel)
    names = endog + list(spec.exog)
    cols = [spec.outcome] + names + [c for c in inst if c not in names]
    raw = np.column_stack([sample.arrays[c] for c in cols])
    w = sample.weights if spec.weight else None
    tilde, sweeps = demean_array(raw, sample.codes, w, spec.tol, spec.max_sweeps)
    pos = {c: j for j, c in enumerate(cols)}
    raw_norms = np.sqrt(np.sum((raw - raw.mean(axis=0)) ** 2, axis=0))
    raw_norms = np.where(raw_norms > 0, raw_norms, np.sqrt(np.sum(raw ** 2, axis=0)))

    y = tilde[:, pos[spec.outcome]]
    X = tilde[:, [pos[c] for c in names]]
    _check_rank(X, raw_norms[[pos[c] for c in names]], names)
    df_fe, exact = absorbed_dof(sample.codes)
    if not sample.codes:
        df_fe = 1
    wt = sample.weights
    notes = []

    first_stage = []
    if spec.is_iv:
        znames = inst + list(spec.exog)
        Z = tilde[:, [pos[c] for c in znames]]
        _check_rank(Z, raw_norms[[pos[c] for c in znames]], znames, what="instrument")
        q = len(inst)
        for e in endog:
            b, _, V, _, _, _ = _linear_iv(tilde[:, pos[e]], Z, Z, wt, sample.clusters, df_fe)
            bq, Vq = b[:q], V[:q, :q]
            try:
                f_stat = float(bq @ np.linalg.solve(Vq, bq) / q)
            except np.linalg.LinAlgError:
                f_stat = float("inf")
            first_stage.append(FirstStage(e, dict(zip(znames, map(float, b))),
                                          dict(zip(znames, map(float, np.sqrt(np.diag(V))))), f_stat))
            if f_stat < spec.f_floor:
                msg = f"weak first stage for {e}: F = {f_stat:.2f} < {spec.f_floor}"
                warnings.warn(msg)
                notes.append(msg)
        beta, resid, V, c, G, K = _linear_iv(y, X, Z, wt, sample.clusters, df_fe)
    else:
        beta, resid, V, c, G, K = _linear_iv(y, X, X, wt, sample.clusters, df_fe)

    scale = max(np.max(np.abs(y)), 1e-300)
    degenerate = bool(np.max(np.abs(resid)) <= 1e-9 * scale)
    if degenerate:
        notes.append("exact fit: residuals are numerically zero")
    if not exact:
        notes.append("absorbed degrees of freedom approximated beyond the first two dimensions")
    se = np.sqrt(np.clip(np.diag(V), 0.0, None))
    log.info("%s: N=%d G=%d sweeps=%d", "2SLS" if spec.is_iv else "OLS", len(y), G, sweeps)
    return EstimationResult(
        coef=dict(zip(names, map(float, beta))),
        se=dict(zip(names, map(float, se))),
        cov=V,
        names=names,
        n_obs=len(y),
        n_clusters=G,
        k=K,
        df_fe=df_fe,
        df_fe_exact=exact,
        small_sample_factor=float(c),
        first_stage=first_stage,
        residuals=resid,
        sample_index=sample.frame.index.to_numpy(),
        n_singletons=sample.n_singletons,
        n_missing=sample.n_missing,
        n_trimmed=sample.n_trimmed,
        demean_iterations=sweeps,
        degenerate=degenerate,
        method="2sls" if spec.is_iv else "ols",
        warnings=notes,
        spec=spec,
    )


def ols(spec: RegressionSpec, panel: pd.DataFrame) -> EstimationResult:
    if spec.endogenous:
        raise EstimationError("ols() called with endogenous regressors; use tsls()")
    return estimate(spec, panel)


def tsls(spec: RegressionSpec, panel: pd.DataFrame) -> EstimationResult:
    if not spec.endogenous:
        raise EstimationError("tsls() needs at least one endogenous regressor")
    return estimate(spec, panel)
