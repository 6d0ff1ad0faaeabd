"""Right-censored (Tobit) wage regressions and two-step imputation of top-coded wages."""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import Mapping, Optional, Sequence

import numpy as np
import pandas as pd
from scipy.special import log_ndtr

from .data import requirement_digit
from .errors import ConvergenceError, EstimationError

log = logging.getLogger(__name__)

_LOG_SQRT_2PI = 0.5 * np.log(2.0 * np.pi)

DEFAULT_CONTROLS = ("age", "age_sq", "requirement", "east")
CELL = ("year", "gender", "education")


def _log_phi(a):
    return -0.5 * a * a - _LOG_SQRT_2PI


def upper_hazard(a):
    """phi(a) / (1 - Phi(a)), the mean excess of a standard normal above a."""
    a = np.asarray(a, dtype=float)
    return np.exp(_log_phi(a) - log_ndtr(-a))


def _mills(a):
    """phi(a) / Phi(a)."""
    return np.exp(_log_phi(a) - log_ndtr(a))


def tobit_loglik(beta, sigma, y, X, limit, censored) -> float:
    """Log-likelihood of the right-censored normal regression."""
    y = np.asarray(y, float)
    limit = np.broadcast_to(np.asarray(limit, float), y.shape)
    censored = np.asarray(censored, bool)
    xb = np.asarray(X, float) @ np.asarray(beta, float)
    unc = ~censored
    r = (y[unc] - xb[unc]) / sigma
    ll = np.sum(-0.5 * r * r - _LOG_SQRT_2PI - np.log(sigma))
    ll += np.sum(log_ndtr((xb[censored] - limit[censored]) / sigma))
    return float(ll)


@dataclass
class TobitFit:
    beta: np.ndarray
    sigma: float
    cov: np.ndarray
    loglik: float
    loglik_start: float
    iterations: int
    n: int
    n_censored: int
    columns: tuple = ()
    key: Optional[tuple] = None

    @property
    def se_beta(self):
        return np.sqrt(np.diag(self.cov)[:-1])

    @property
    def se_sigma(self):
        return float(np.sqrt(self.cov[-1, -1]))

    def predict(self, X):
        return np.asarray(X, float) @ self.beta

    def expected_above(self, X, limit):
        """E[y | y > limit] under the fitted model."""
        xb = self.predict(X)
        return xb + self.sigma * upper_hazard((np.asarray(limit, float) - xb) / self.sigma)


def _derivatives(theta, y, X, limit, censored):
    """Log-likelihood, gradient and Hessian in (gamma = beta/sigma, tau = 1/sigma)."""
    k = X.shape[1]
    gamma, tau = theta[:k], theta[k]
    unc = ~censored
    Xu, yu = X[unc], y[unc]
    r = tau * yu - Xu @ gamma
    ll = np.sum(np.log(tau) - 0.5 * r * r - _LOG_SQRT_2PI)
    g = np.empty(k + 1)
    g[:k] = Xu.T @ r
    g[k] = np.sum(1.0 / tau - r * yu)
    H = np.empty((k + 1, k + 1))
    H[:k, :k] = -Xu.T @ Xu
    H[:k, k] = Xu.T @ yu
    H[k, k] = -np.sum(1.0 / tau ** 2 + yu * yu)
    if censored.any():
        Xc, c = X[censored], limit[censored]
        a = Xc @ gamma - tau * c
        ll += np.sum(log_ndtr(a))
        lam = _mills(a)
        curv = lam * (a + lam)
        D = np.column_stack([Xc, -c])
        g += D.T @ lam
        H -= (D * curv[:, None]).T @ D
    H[k, :k] = H[:k, k]
    return ll, g, H


def fit_tobit(y, X, limit, censored, *, max_iter: int = 200, gtol: float = 1e-10,
              columns: Sequence[str] = (), key=None) -> TobitFit:
    """Maximum-likelihood fit of a right-censored normal regression.

    Newton steps with step halving on the concave (beta/sigma, 1/sigma)
    parametrisation, started from OLS on the uncensored rows.  ``gtol``
    bounds the largest gradient entry of the per-observation log-likelihood.
    """
    y = np.asarray(y, float)
    X = np.asarray(X, float)
    if X.ndim == 1:
        X = X[:, None]
    censored = np.asarray(censored, bool)
    limit = np.broadcast_to(np.asarray(limit, float), y.shape).astype(float)
    n, k = X.shape
    unc = ~censored
    if unc.sum() == 0:
        raise EstimationError("Tobit needs at least one uncensored observation")
    if np.linalg.matrix_rank(X[unc]) < k:
        raise EstimationError("regressors are not of full column rank on the uncensored rows")

    b0, *_ = np.linalg.lstsq(X[unc], y[unc], rcond=None)
    resid = y[unc] - X[unc] @ b0
    s0 = float(np.sqrt(np.mean(resid ** 2)))
    if not s0 > 0:
        s0 = max(1e-3 * float(np.std(y)), 1e-8) if np.std(y) > 0 else 1.0
    theta = np.append(b0 / s0, 1.0 / s0)
    ll, g, H = _derivatives(theta, y, X, limit, censored)
    ll_start = ll
    for it in range(1, max_iter + 1):
        if np.max(np.abs(g)) / n < gtol:
            break
        try:
            step = np.linalg.solve(H, -g)
        except np.linalg.LinAlgError:
            step = np.linalg.lstsq(H, -g, rcond=None)[0]
        t = 1.0
        while True:
            cand = theta + t * step
            if cand[k] > 0:
                ll_new, g_new, H_new = _derivatives(cand, y, X, limit, censored)
                if ll_new >= ll - 1e-12 * abs(ll):
                    break
            t *= 0.5
            if t < 1e-12:
                raise ConvergenceError("Tobit line search failed", last=theta)
        theta, ll, g, H = cand, ll_new, g_new, H_new
    else:
        if np.max(np.abs(g)) / n >= gtol:
            raise ConvergenceError(f"Tobit did not converge in {max_iter} iterations", last=theta,
                                   delta=float(np.max(np.abs(g)) / n))
        it = max_iter

    gamma, tau = theta[:k], theta[k]
    beta, sigma = gamma / tau, 1.0 / tau
    try:
        cov_theta = np.linalg.inv(-H)
    except np.linalg.LinAlgError:
        cov_theta = np.linalg.pinv(-H)
    J = np.zeros((k + 1, k + 1))
    J[:k, :k] = np.eye(k) / tau
    J[:k, k] = -gamma / tau ** 2
    J[k, k] = -1.0 / tau ** 2
    cov = J @ cov_theta @ J.T
    return TobitFit(beta, float(sigma), cov, float(ll), float(ll_start), it, n, int(censored.sum()),
                    tuple(columns), key)


# --------------------------------------------------------------------------- imputation


@dataclass
class ImputationResult:
    spells: pd.DataFrame
    fits: dict = field(default_factory=dict)
    skipped: list = field(default_factory=list)


def _design(frame: pd.DataFrame, controls: Sequence[str], extra: Sequence[str] = ()):
    cols = {"const": np.ones(len(frame))}
    for c in controls:
        if c == "age_sq":
            cols[c] = frame["age"].to_numpy(float) ** 2 / 100.0
        elif c == "requirement":
            req = frame["occupation"].map(requirement_digit).to_numpy()
            for level in (2, 3, 4):
                cols[f"req{level}"] = (req == level).astype(float)
        elif c == "education":
            for level in ("medium", "high"):
                cols[f"educ_{level}"] = (frame["education"] == level).to_numpy(float)
        else:
            cols[c] = frame[c].to_numpy(float)
    for c in extra:
        cols[c] = frame[c].to_numpy(float)
    X = pd.DataFrame(cols, index=frame.index)
    return X


def _full_rank_columns(X: pd.DataFrame, rows) -> list:
    """Drop constant and linearly dependent columns (intercept kept first)."""
    keep = []
    sub = X.loc[rows]
    for c in X.columns:
        if c != "const" and np.ptp(sub[c].to_numpy()) == 0:
            continue
        trial = keep + [c]
        if np.linalg.matrix_rank(sub[trial].to_numpy()) == len(trial):
            keep.append(c)
    return keep


def _fit_cells(frame, y, limit, controls, extra, max_iter):
    fits, skipped = {}, []
    completed = pd.Series(np.nan, index=frame.index)
    for key, cell in frame.groupby(list(CELL), sort=True):
        idx = cell.index
        cens = cell["censored"].to_numpy(bool)
        if (~cens).sum() == 0:
            skipped.append(key)
            continue
        X = _design(cell, controls, extra)
        cols = _full_rank_columns(X, idx[~cens])
        fit = fit_tobit(y[idx].to_numpy(), X[cols].to_numpy(), limit[idx].to_numpy(), cens,
                        max_iter=max_iter, columns=cols, key=key)
        fits[key] = fit
        vals = y[idx].to_numpy().copy()
        if cens.any():
            vals[cens] = fit.expected_above(X[cols].to_numpy()[cens], limit[idx].to_numpy()[cens])
        completed[idx] = vals
    return fits, skipped, completed


def _loo_firm_mean(frame, values):
    """Mean of ``values`` over the other workers of the same firm and year.

    Singleton firm-years fall back to their (year, gender, education) cell mean.
    """
    keys = [frame["firm_id"], frame["year"]]
    total = values.groupby(keys).transform("sum")
    count = values.groupby(keys).transform("count")
    loo = (total - values) / (count - 1)
    cell_mean = values.groupby([frame[c] for c in CELL]).transform("mean")
    return loo.where(count > 1, cell_mean)


def impute(spells: pd.DataFrame, limits: Optional[Mapping[int, float]] = None,
           controls: Sequence[str] = DEFAULT_CONTROLS, max_iter: int = 200) -> ImputationResult:
    """Two-step Tobit imputation of censored wages, fitted on log wages.

    Step one fits a Tobit per (year, gender, education) cell on individual
    controls and completes censored log wages with their conditional mean
    above the limit.  Step two adds each worker's leave-one-out firm mean of
    the completed log wages as a regressor, refits and imputes again.
    Uncensored wages pass through untouched.  ``limits`` maps year to the
    nominal censoring limit; without it a censored wage is its own limit.
    """
    frame = spells.copy()
    if "east" in frame:
        frame["east"] = frame["east"].astype(float)
    y = np.log(frame["wage"].astype(float))
    if limits:
        lim = frame["year"].map(limits).astype(float)
        lim = lim.fillna(frame["wage"].astype(float))
    else:
        lim = frame["wage"].astype(float)
    limit = np.log(lim)

    if not frame["censored"].any():
        out = spells.copy()
        out["wage_imputed"] = out["wage"].astype(float)
        out["imputed"] = False
        out["impute_flag"] = "observed"
        return ImputationResult(out)

    _, skipped, completed = _fit_cells(frame, y, limit, controls, (), max_iter)
    completed.name = "completed"
    usable = completed.notna()
    frame["loo_firm_mean"] = np.nan
    frame.loc[usable, "loo_firm_mean"] = _loo_firm_mean(frame.loc[usable], completed[usable])
    fits, skipped2, final = _fit_cells(frame.loc[usable], y, limit, controls, ("loo_firm_mean",), max_iter)

    out = spells.copy()
    cens = out["censored"].to_numpy(bool)
    done = final.reindex(out.index).notna().to_numpy()
    wage_imp = out["wage"].to_numpy(float).copy()
    sel = cens & done
    wage_imp[sel] = np.exp(final.reindex(out.index).to_numpy()[sel])
    out["wage_imputed"] = wage_imp
    out["imputed"] = sel
    flag = np.where(cens, np.where(done, "imputed", "unimputed"), "observed")
    out["impute_flag"] = flag
    all_skipped = sorted(set(skipped) | set(skipped2))
    if all_skipped:
        log.warning("%d cells without uncensored wages were not imputed", len(all_skipped))
    return ImputationResult(out, fits, all_skipped)
