"""Post-estimation arithmetic and reporting tables."""

from __future__ import annotations

import warnings
from dataclasses import dataclass
from typing import Optional, Sequence

import numpy as np
import pandas as pd

from .errors import EstimationError, ValidationError
from .estimator import demean_array, fe_codes


def contribution_share(elasticity: float, tightness_growth_pct: float, wage_growth_pct: float):
    """Wage effect of a tightness change and its share of observed wage growth.

    Effects use the percent convention: elasticity times percent change in
    tightness gives the percent change in wages.  Returns
    ``(wage_effect_pct, share_pct)``.
    """
    if wage_growth_pct == 0:
        raise ValidationError("wage growth must be nonzero to compute a contribution share")
    effect = elasticity * tightness_growth_pct
    return effect, 100.0 * effect / wage_growth_pct


def daily_productivity(gva: float, workforce: float, days: float = 365.0) -> float:
    return gva / (workforce * days)


def wage_setting_level(elasticity: float, base_wage: float, base_theta: float, gva: float,
                       workforce: float, days: float = 365.0) -> float:
    """Slope of wages (relative to productivity) in tightness levels.

    The log-log elasticity is scaled by the base wage-to-tightness ratio and
    then normalised by average daily gross value added per worker.
    """
    for name, val in (("base_wage", base_wage), ("base_theta", base_theta), ("gva", gva),
                      ("workforce", workforce), ("days", days)):
        if not val > 0:
            raise ValidationError(f"{name} must be positive")
    return elasticity * (base_wage / base_theta) / daily_productivity(gva, workforce, days)


@dataclass
class DecileCounterfactual:
    table: pd.DataFrame
    observed_gap: float
    counterfactual_gap: float

    @property
    def gap_change(self):
        """How much of the observed top-minus-bottom growth gap tightness accounts for."""
        return self.observed_gap - self.counterfactual_gap


def decile_counterfactual(observed_growth_pct, elasticity, tightness_growth_pct) -> DecileCounterfactual:
    """Wage growth per decile group had tightness stayed constant.

    The tightness contribution (elasticity times tightness growth) is
    subtracted from each group's observed growth.  Gaps compare the top and
    the bottom group.
    """
    obs = np.asarray(observed_growth_pct, float)
    el = np.asarray(elasticity, float)
    tg = np.asarray(tightness_growth_pct, float)
    if not (obs.shape == el.shape == tg.shape) or obs.ndim != 1:
        raise ValidationError("decile vectors must have equal length")
    if len(obs) < 2:
        raise ValidationError("need at least two groups")
    cf = obs - el * tg
    table = pd.DataFrame({
        "group": np.arange(1, len(obs) + 1),
        "observed": obs,
        "tightness_effect": el * tg,
        "counterfactual": cf,
    })
    return DecileCounterfactual(table, float(obs[-1] - obs[0]), float(cf[-1] - cf[0]))


def wage_decile_groups(spells: pd.DataFrame, wage_col: str = "wage_real", by: str = "worker",
                       n_groups: int = 10) -> pd.Series:
    """Predetermined wage groups: quantile group of the first observed wage.

    ``by="worker"`` uses each worker's wage in their first year; ``by="firm"``
    uses the firm's mean wage in its first year.  Returns a group number
    (1 = lowest) aligned with ``spells``.
    """
    if by == "worker":
        first = spells.sort_values(["worker_id", "year"], kind="mergesort").groupby("worker_id")[wage_col].first()
        keys = spells["worker_id"]
    elif by == "firm":
        first_year = spells.groupby("firm_id")["year"].transform("min")
        at_first = spells[spells["year"] == first_year]
        first = at_first.groupby("firm_id")[wage_col].mean()
        keys = spells["firm_id"]
    else:
        raise ValidationError("by must be 'worker' or 'firm'")
    ranks = first.rank(method="first")
    groups = np.ceil(ranks * n_groups / len(ranks)).astype(int).clip(1, n_groups)
    return keys.map(groups).rename(f"{by}_decile")


def worker_effects(panel: pd.DataFrame, outcome: str = "log_wage", other_fe: Sequence[str] = ("year",),
                   tol: float = 1e-10, max_sweeps: int = 10_000) -> pd.Series:
    """Worker fixed effects from ``outcome = worker + other FEs + error``.

    Backfitting: each dimension's effects are updated as group means of the
    outcome net of all other dimensions until the largest update is below
    ``tol``.  Returned effects are indexed by worker and centred on zero.
    """
    dims = ["worker_id"] + list(other_fe)
    codes = [fe_codes(panel, d) for d in dims]
    y = panel[outcome].to_numpy(float)
    counts = [np.bincount(c) for c in codes]
    effects = [np.zeros(len(n)) for n in counts]
    total = np.zeros_like(y)
    for _ in range(max_sweeps):
        change = 0.0
        for d, c in enumerate(codes):
            part = effects[d][c]
            new = np.bincount(c, weights=y - (total - part)) / counts[d]
            change = max(change, float(np.max(np.abs(new - effects[d]))))
            total += new[c] - part
            effects[d] = new
        if change < tol:
            break
    else:
        raise EstimationError("worker effects did not converge")
    first = pd.Series(codes[0]).groupby(panel["worker_id"].to_numpy()).first()
    eff = pd.Series(effects[0][first.to_numpy()], index=first.index)
    return eff - eff.mean()


def firm_average_outcome(spells: pd.DataFrame, effects: pd.Series, outcome: str = "log_wage") -> pd.DataFrame:
    """Firm-year mean of the outcome net of each worker's own effect."""
    partialled = spells[outcome].to_numpy(float) - spells["worker_id"].map(effects).to_numpy(float)
    frame = pd.DataFrame({"firm_id": spells["firm_id"].to_numpy(), "year": spells["year"].to_numpy(),
                          "partialled": partialled})
    frame = frame[np.isfinite(frame["partialled"])]
    out = frame.groupby(["firm_id", "year"], sort=True)["partialled"].agg(["mean", "size"]).reset_index()
    return out.rename(columns={"mean": "firm_outcome", "size": "n_workers"})


@dataclass
class PartialOut:
    """Residualization applied to both binscatter axes before binning."""

    fe: Sequence[str] = ()
    controls: Sequence[str] = ()
    instrument: Optional[str] = None
    weight: Optional[str] = None
    tol: float = 1e-8


def _residualize(panel: pd.DataFrame, cols: Sequence[str], po: PartialOut) -> np.ndarray:
    codes = [fe_codes(panel, d) for d in po.fe]
    w = panel[po.weight].to_numpy(float) if po.weight else None
    raw = panel[list(cols) + list(po.controls)].to_numpy(float)
    tilde, _ = demean_array(raw, codes, w, po.tol)
    k = len(cols)
    target, C = tilde[:, :k], tilde[:, k:]
    if C.shape[1]:
        sw = np.ones(len(panel)) if w is None else np.sqrt(w)
        coef, *_ = np.linalg.lstsq(C * sw[:, None], target * sw[:, None], rcond=None)
        target = target - C @ coef
    return target


def binscatter(panel: pd.DataFrame, x: str, y: str, n_bins: int = 20,
               partial_out: Optional[PartialOut] = None) -> pd.DataFrame:
    """Equal-count bins of ``x`` with the mean of ``x`` and ``y`` per bin.

    With ``partial_out`` both variables are residualized on the fixed
    effects and controls first (and ``x`` is replaced by its first-stage
    fit when an instrument is named); sample means are added back so the
    axes stay in levels.
    """
    if n_bins < 2:
        raise ValidationError("need at least two bins")
    cols = [x, y] + ([partial_out.instrument] if partial_out and partial_out.instrument else [])
    if partial_out is not None:
        cols += list(partial_out.controls)
    frame = panel.loc[np.isfinite(panel[cols].to_numpy(float)).all(axis=1)]
    if len(frame) == 0:
        raise EstimationError("no complete rows to bin")
    xv = frame[x].to_numpy(float)
    yv = frame[y].to_numpy(float)
    if partial_out is not None:
        res_cols = [x, y] + ([partial_out.instrument] if partial_out.instrument else [])
        res = _residualize(frame, res_cols, partial_out)
        rx, ry = res[:, 0], res[:, 1]
        if partial_out.instrument:
            rz = res[:, 2]
            rx = rz * (rz @ rx) / (rz @ rz)
        xv = rx + xv.mean()
        yv = ry + yv.mean()
    distinct = len(np.unique(xv))
    if distinct < n_bins:
        warnings.warn(f"only {distinct} distinct x values for {n_bins} bins; bins collapse")
    # ties share the bin of their lowest rank, so equal x values never split
    ranks = np.searchsorted(np.sort(xv), xv, side="left")
    bins = (ranks * n_bins) // len(xv)
    out = pd.DataFrame({"bin": bins, "x": xv, "y": yv}).groupby("bin", sort=True).agg(
        x_mean=("x", "mean"), y_mean=("y", "mean"), n=("x", "size")).reset_index()
    out["bin"] = np.arange(len(out))
    out["bin"] = out["bin"] + 1
    return out[["bin", "x_mean", "y_mean", "n"]]


def fitted_slope(bins: pd.DataFrame) -> float:
    """OLS slope through bin means, weighted by bin counts."""
    x, y, n = bins["x_mean"].to_numpy(), bins["y_mean"].to_numpy(), bins["n"].to_numpy(float)
    xm, ym = np.average(x, weights=n), np.average(y, weights=n)
    return float(np.sum(n * (x - xm) * (y - ym)) / np.sum(n * (x - xm) ** 2))
