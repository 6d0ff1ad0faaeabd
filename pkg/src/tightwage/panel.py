"""Merge worker spells with market cells into an estimation panel."""

from __future__ import annotations

from typing import Mapping, Optional

import numpy as np
import pandas as pd

from .data import occupation_key, region_of, requirement_digit

CELL_VARS = ("theta", "theta_flow", "z1", "z2", "loo_log_v_sum", "v_total", "u")


def _map_codes(series: pd.Series, func) -> pd.Series:
    """Apply ``func`` once per distinct value."""
    uniq = pd.unique(series)
    lookup = {v: func(v) for v in uniq}
    return series.map(lookup)


def build_panel(spells: pd.DataFrame, cells: pd.DataFrame, occupation_digits: int = 3,
                region_scheme: str = "zones", zone_map: Optional[Mapping] = None,
                wage_col: Optional[str] = None) -> pd.DataFrame:
    """Attach cell-level tightness and instruments to each spell.

    Adds ``log_wage``, ``log_theta``, ``log_theta_flow``, ``z1``, ``z2``,
    ``loo_log_v_sum``, ``market`` (occupation-by-region cell, the default
    cluster), ``age_sq`` and, when present, ``hire`` as a float.
    """
    if wage_col is None:
        wage_col = next(c for c in ("wage_real", "wage_imputed", "wage") if c in spells)
    out = spells.copy()
    if "occ_key" not in out or out["occ_key"].isna().any():
        out["occ_key"] = _map_codes(out["occupation"].astype(str), lambda c: occupation_key(c, occupation_digits))
    out["region"] = region_of(out["district"].astype(str), region_scheme, zone_map).to_numpy()
    cell_cols = ["occupation", "region", "year"] + [c for c in CELL_VARS if c in cells]
    right = cells[cell_cols].rename(columns={"occupation": "occ_key"})
    right = right.assign(occ_key=right["occ_key"].astype(str), region=right["region"].astype(str))
    out["occ_key"] = out["occ_key"].astype(str)
    out = out.merge(right, on=["occ_key", "region", "year"], how="left", validate="many_to_one")
    out["log_wage"] = np.log(out[wage_col].astype(float))
    with np.errstate(divide="ignore", invalid="ignore"):
        out["log_theta"] = np.log(out["theta"].astype(float))
        if "theta_flow" in out:
            out["log_theta_flow"] = np.log(out["theta_flow"].astype(float))
    out["market"] = out["occ_key"] + "|" + out["region"]
    out["occupation_key"] = out["occ_key"]
    if "age" in out:
        out["age_sq"] = out["age"].astype(float) ** 2 / 100.0
    if "hire" in out:
        out["hire"] = out["hire"].astype(float)
    if "east" in out:
        out["east"] = out["east"].astype(float)
    if "occupation" in out:
        out["requirement"] = _map_codes(out["occupation"].astype(str), requirement_digit)
    return out
