"""Market cells: extrapolated vacancies, job seekers and tightness.

Also builds occupation-to-occupation transition weights and the
flow-adjusted tightness that adds neighbouring occupations' vacancies and
job seekers with those weights.
"""

from __future__ import annotations

import logging
import warnings
from dataclasses import dataclass
from typing import Mapping, Optional

import numpy as np
import pandas as pd

from .data import PanelConfig, REQUIREMENT_GROUPS, occupation_key, region_of, requirement_digit
from .errors import ValidationError

log = logging.getLogger(__name__)

CELL_KEY = ["occupation", "region", "year"]
CELL_COLUMNS = CELL_KEY + ["v_registered", "v_total", "u", "theta", "theta_flow", "flag"]

_GROUP_OF_DIGIT = {1: "helpers", 2: "professionals", 3: "specialists_experts", 4: "specialists_experts"}


def requirement_group(digit: int) -> str:
    try:
        return _GROUP_OF_DIGIT[int(digit)]
    except KeyError:
        raise ValidationError(f"requirement digit must be 1-4, got {digit}") from None


class ShareTable:
    """Notification-share lookup by (year, requirement group).

    ``mode`` is ``"yearly"`` (time-varying shares), ``"pooled"`` (one
    time-constant share per group: the file's ``pooled`` rows when present,
    otherwise the mean over years) or ``"registered"`` (share 1, i.e. no
    extrapolation).
    """

    def __init__(self, shares: pd.DataFrame | None, mode: str = "yearly"):
        if mode not in ("yearly", "pooled", "registered"):
            raise ValidationError(f"unknown share mode {mode!r}")
        self.mode = mode
        self._yearly = {}
        self._pooled = {}
        if shares is None:
            if mode != "registered":
                raise ValidationError("a share table is required unless mode='registered'")
            return
        years = shares["year"].astype(str)
        for y, g, s in zip(years, shares["requirement_group"], shares["share"]):
            if y == "pooled":
                self._pooled[g] = float(s)
            else:
                self._yearly[(int(y), g)] = float(s)
        if mode == "pooled":
            for g in REQUIREMENT_GROUPS:
                if g not in self._pooled:
                    vals = [s for (y, gg), s in self._yearly.items() if gg == g]
                    if vals:
                        self._pooled[g] = float(np.mean(vals))

    def __call__(self, year: int, group: str) -> float:
        if self.mode == "registered":
            return 1.0
        if self.mode == "pooled":
            try:
                return self._pooled[group]
            except KeyError:
                raise ValidationError(f"no pooled share for {group}") from None
        try:
            return self._yearly[(int(year), group)]
        except KeyError:
            raise ValidationError(f"no notification share for year {year}, group {group}") from None


def extrapolate_vacancies(v_registered, share):
    """Total vacancies implied by a registered count and its notification share."""
    share = np.asarray(share, dtype=float)
    if np.any(~((share > 0) & (share <= 1))):
        raise ValidationError("notification shares must lie in (0, 1]")
    return np.asarray(v_registered, dtype=float) / share


def _attach_shares(vacancies: pd.DataFrame, shares: ShareTable) -> np.ndarray:
    groups = vacancies["occupation"].map(lambda c: requirement_group(requirement_digit(c)))
    pairs = pd.DataFrame({"year": vacancies["year"].to_numpy(), "group": groups.to_numpy()})
    lookup = {k: shares(*k) for k in set(zip(pairs["year"], pairs["group"]))}
    return np.array([lookup[k] for k in zip(pairs["year"], pairs["group"])], dtype=float)


def mark_theta(cells: pd.DataFrame) -> pd.DataFrame:
    """Fill ``theta`` and ``flag`` from ``v_total`` and ``u``."""
    u = cells["u"].to_numpy(float)
    v = cells["v_total"].to_numpy(float)
    ok = (u > 0) & (v > 0)
    cells["theta"] = np.where(ok, v / np.where(u > 0, u, 1.0), np.nan)
    flag = np.full(len(cells), "ok", dtype=object)
    flag[v <= 0] = "zero_v"
    flag[u <= 0] = "zero_u"
    flag[(u <= 0) & (v <= 0)] = "zero_uv"
    cells["flag"] = flag
    return cells


def build_cells(vacancies: pd.DataFrame, seekers: pd.DataFrame, shares: ShareTable,
                zone_map: Optional[Mapping] = None, config: PanelConfig = PanelConfig()) -> pd.DataFrame:
    """Aggregate district-level counts into (occupation key, region, year) cells.

    Vacancies are extrapolated at the 5-digit level first, then summed.  Cells
    where either count is zero stay in the table with ``theta`` missing and a
    flag saying why.
    """
    vac = vacancies.copy()
    vac["v_total"] = extrapolate_vacancies(vac["v_registered"], _attach_shares(vac, shares))
    parts = []
    for frame, cols in ((vac, ["v_registered", "v_total"]), (seekers, ["u"])):
        f = frame[["occupation", "district", "year"] + cols].copy()
        f["region"] = region_of(f["district"], config.region_scheme, zone_map).to_numpy()
        f["occupation"] = f["occupation"].map(lambda c: occupation_key(c, config.occupation_digits))
        parts.append(f.groupby(CELL_KEY, sort=True)[cols].sum())
    cells = parts[0].join(parts[1], how="outer").fillna(0.0).reset_index()
    cells = cells.sort_values(CELL_KEY, kind="mergesort").reset_index(drop=True)
    cells["theta_flow"] = np.nan
    cells = mark_theta(cells)
    lo, hi = config.years
    cells = cells[(cells["year"] >= lo) & (cells["year"] <= hi)].reset_index(drop=True)
    n_bad = int((cells["flag"] != "ok").sum())
    if n_bad:
        log.info("%d of %d cells have undefined tightness", n_bad, len(cells))
    return cells[CELL_COLUMNS]


# --------------------------------------------------------------------------- flow adjustment


@dataclass(frozen=True)
class FlowWeights:
    """Relative value ``omega[o, h]`` of occupation h's vacancies/seekers for o.

    ``undefined`` lists occupations without stayers; their rows fall back to
    the indicator of the occupation itself.
    """

    occupations: tuple
    omega: np.ndarray
    employment: np.ndarray
    undefined: tuple = ()

    def frame(self):
        return pd.DataFrame(self.omega, index=list(self.occupations), columns=list(self.occupations))


def transition_weights(spells: pd.DataFrame, occ_col: str = "occ_key") -> FlowWeights:
    """Weights from pooled year-to-year occupation transitions.

    ``P(h|o)`` is the share of workers observed in o in year t who are in h in
    t+1; ``L_o`` counts all spells in o.  Then
    ``omega[o, h] = P(h|o) / P(o|o) * L_o / L_h``.
    """
    s = spells[["worker_id", "year", occ_col]]
    nxt = s.assign(year=s["year"] - 1).rename(columns={occ_col: "occ_next"})
    pairs = s.merge(nxt, on=["worker_id", "year"], how="inner")
    occs = tuple(sorted(set(s[occ_col])))
    pos = {o: i for i, o in enumerate(occs)}
    n = len(occs)
    moves = np.zeros((n, n))
    np.add.at(moves, (pairs[occ_col].map(pos).to_numpy(), pairs["occ_next"].map(pos).to_numpy()), 1.0)
    origin = moves.sum(axis=1)
    with np.errstate(invalid="ignore", divide="ignore"):
        p = moves / origin[:, None]
    p = np.nan_to_num(p)
    employment = s[occ_col].map(pos).value_counts().reindex(range(n), fill_value=0).to_numpy(float)
    stay = np.diag(p).copy()
    omega = np.zeros((n, n))
    undefined = []
    for o in range(n):
        if stay[o] > 0:
            omega[o] = p[o] / stay[o] * employment[o] / employment
        else:
            undefined.append(occs[o])
            omega[o, o] = 1.0
    if undefined:
        warnings.warn(f"{len(undefined)} occupations without stayers; using indicator weights for them")
    return FlowWeights(occs, omega, employment, tuple(undefined))


def flow_adjust(cells: pd.DataFrame, weights: FlowWeights) -> pd.DataFrame:
    """Add ``v_flow``, ``u_flow`` and ``theta_flow`` within each (region, year).

    Occupation o receives ``sum_h omega[o, h] * V_h`` (likewise for U), with
    h running over the occupations of the same region and year.
    """
    pos = {o: i for i, o in enumerate(weights.occupations)}
    unknown = set(cells["occupation"]) - set(pos)
    if unknown:
        raise ValidationError(f"no flow weights for occupations {sorted(unknown)[:10]}")
    out = cells.copy()
    occ_idx = out["occupation"].map(pos).to_numpy()
    ry = pd.MultiIndex.from_frame(out[["region", "year"]])
    ry_codes, _ = pd.factorize(ry)
    n_ry, n_occ = ry_codes.max() + 1, len(weights.occupations)
    v = np.zeros((n_ry, n_occ))
    u = np.zeros((n_ry, n_occ))
    np.add.at(v, (ry_codes, occ_idx), out["v_total"].to_numpy(float))
    np.add.at(u, (ry_codes, occ_idx), out["u"].to_numpy(float))
    v_flow = (v @ weights.omega.T)[ry_codes, occ_idx]
    u_flow = (u @ weights.omega.T)[ry_codes, occ_idx]
    ok = (u_flow > 0) & (v_flow > 0)
    out["v_flow"] = v_flow
    out["u_flow"] = u_flow
    out["theta_flow"] = np.where(ok, v_flow / np.where(u_flow > 0, u_flow, 1.0), np.nan)
    return out
