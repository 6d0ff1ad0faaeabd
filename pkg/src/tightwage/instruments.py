"""Leave-one-out instruments and the leave-one-out vacancy control.

Each statistic for cell (o, r, t) is built from the other regions of the
same occupation and year only.
"""

from __future__ import annotations

import warnings

import numpy as np
import pandas as pd

GROUP = ["occupation", "year"]


def _loo_sums(cells: pd.DataFrame, values: np.ndarray):
    """Sum over the other regions of the same (occupation, year).

    Sums are formed against a zero-diagonal mask rather than by subtracting the
    own value from a total, so the result does not depend on the focal cell's
    value even in floating point.
    """
    codes, _ = pd.factorize(pd.MultiIndex.from_frame(cells[GROUP]))
    regions, _ = pd.factorize(cells["region"])
    grid = np.zeros((codes.max() + 1 if len(codes) else 0, regions.max() + 1 if len(regions) else 0))
    grid[codes, regions] = values
    others = grid @ (1.0 - np.eye(grid.shape[1]))
    return others[codes, regions], codes


def z1(cells: pd.DataFrame) -> pd.Series:
    """Mean of log tightness over the other regions with defined tightness."""
    theta = cells["theta"].to_numpy(float)
    defined = np.isfinite(theta) & (theta > 0)
    logs = np.where(defined, np.log(np.where(defined, theta, 1.0)), 0.0)
    other_sum, _ = _loo_sums(cells, logs)
    other_n, _ = _loo_sums(cells, defined.astype(float))
    with np.errstate(invalid="ignore", divide="ignore"):
        out = np.where(other_n > 0.5, other_sum / other_n, np.nan)
    return pd.Series(out, index=cells.index, name="z1")


def z2(cells: pd.DataFrame) -> pd.Series:
    """Log ratio of leave-one-out vacancy and seeker sums."""
    v, _ = _loo_sums(cells, cells["v_total"].to_numpy(float))
    u, _ = _loo_sums(cells, cells["u"].to_numpy(float))
    ok = (v > 0) & (u > 0)
    out = np.where(ok, np.log(np.where(ok, v, 1.0) / np.where(ok, u, 1.0)), np.nan)
    return pd.Series(out, index=cells.index, name="z2")


def loo_vacancy_sum(cells: pd.DataFrame) -> pd.Series:
    """Log of the leave-one-out vacancy sum; missing where the sum is zero."""
    v, _ = _loo_sums(cells, cells["v_total"].to_numpy(float))
    ok = v > 0
    out = np.where(ok, np.log(np.where(ok, v, 1.0)), np.nan)
    return pd.Series(out, index=cells.index, name="loo_log_v_sum")


def add_instruments(cells: pd.DataFrame) -> pd.DataFrame:
    out = cells.copy()
    out["z1"] = z1(cells)
    out["z2"] = z2(cells)
    out["loo_log_v_sum"] = loo_vacancy_sum(cells)
    return out


def interact(column: pd.Series, groups: pd.Series, name: str | None = None) -> pd.DataFrame:
    """Split ``column`` into one column per group level (value times indicator).

    Levels of a categorical ``groups`` that never occur are dropped with a
    warning.
    """
    name = name or column.name or "x"
    if isinstance(groups.dtype, pd.CategoricalDtype):
        levels = list(groups.cat.categories)
    else:
        levels = sorted(pd.unique(groups.dropna()))
    values = column.to_numpy(float)
    out = {}
    for level in levels:
        mask = (groups == level).to_numpy()
        if not mask.any():
            warnings.warn(f"group {level!r} is empty; its interaction column is dropped")
            continue
        out[f"{name}_x_{level}"] = np.where(mask, values, 0.0)
    if len(out) < 2:
        warnings.warn("interaction produced fewer than two columns")
    return pd.DataFrame(out, index=column.index)
