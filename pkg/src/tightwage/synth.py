"""Synthetic worker panels with a known wage elasticity of tightness.

The generator plants the two identification threats the leave-one-out design
is built around: a local wage shock that feeds back negatively into
tightness (``rho``) and a national occupation-year demand shock that moves
tightness everywhere and also passes into wages directly (``delta``).  A
separate national supply shock shifts job-seeker counts only, which leaves
the instrument with variation once vacancy-side national shocks are
controlled for.

Random draws come from counter-based Philox streams, one per component:

====== =====================================
stream component
====== =====================================
0      market, occupation and region levels
1      national demand shocks
2      national supply shocks
3      local tightness shocks
4      market wage shocks
5      job-seeker counts
6      worker attributes and effects
7      firm effects and sectors
8      job mobility
9      idiosyncratic wage noise
====== =====================================
"""

from __future__ import annotations

from dataclasses import asdict, dataclass, fields
from typing import Mapping, Optional

import numpy as np
import pandas as pd

from .data import EDUCATION, GENDER, NATIONALITY, REQUIREMENT_GROUPS
from .errors import ValidationError
from .tightness import CELL_COLUMNS, mark_theta

STREAMS = {
    "levels": 0, "demand": 1, "supply": 2, "local": 3, "wage_shock": 4,
    "seekers": 5, "workers": 6, "firms": 7, "mobility": 8, "noise": 9,
}


@dataclass(frozen=True)
class SynthConfig:
    alpha_true: float = 0.011
    rho: float = 0.0
    delta: float = 0.0
    n_occupations: int = 200
    n_regions: int = 10
    n_years: int = 11
    workers_per_market: int = 50
    firms_per_market: int = 5
    first_year: int = 2012
    seed: int = 0
    # log tightness components
    theta_level: float = np.log(0.24)
    theta_trend: float = 0.085
    sd_occupation: float = 0.4
    sd_region: float = 0.2
    sd_market: float = 0.2
    sd_demand: float = 0.15
    sd_supply: float = 0.15
    sd_local: float = 0.1
    # wage components
    sd_wage_shock: float = 0.03
    sd_worker: float = 0.3
    sd_firm: float = 0.1
    sd_market_wage: float = 0.1
    sd_noise: float = 0.05
    wage_trend: float = 0.008
    beta_age_sq: float = -0.04
    beta_hire: float = -0.02
    move_prob: float = 0.15
    seekers_mean: float = 200.0
    inflation: float = 0.015
    east_share: float = 0.3

    def __post_init__(self):
        if self.n_occupations < 2 or self.n_regions < 3 or self.n_years < 2:
            raise ValidationError("need at least 2 occupations, 3 regions and 2 years")
        if self.workers_per_market < 1 or self.firms_per_market < 1:
            raise ValidationError("need at least one worker and one firm per market")
        if self.rho < 0 or self.delta < 0:
            raise ValidationError("rho and delta must be nonnegative")
        for f in fields(self):
            if f.name.startswith("sd_") and getattr(self, f.name) < 0:
                raise ValidationError(f"{f.name} must be nonnegative")

    @classmethod
    def from_dict(cls, d: Mapping) -> "SynthConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ValidationError(f"unknown synth settings {sorted(unknown)}")
        return cls(**d)

    def to_dict(self):
        return {k: (float(v) if isinstance(v, (np.floating,)) else v) for k, v in asdict(self).items()}


def _rng(seed: int, stream: str) -> np.random.Generator:
    return np.random.Generator(np.random.Philox(np.random.SeedSequence([seed, STREAMS[stream]])))


def occupation_codes(n: int) -> list[str]:
    """Distinct 5-digit codes whose 3-digit keys are distinct too."""
    return [f"{100 + o // 4}1{o % 4 + 1}" for o in range(n)]


def district_codes(n: int) -> list[str]:
    return [f"{10001 + r}" for r in range(n)]


@dataclass
class SynthData:
    cells: pd.DataFrame
    spells: pd.DataFrame
    truth: dict
    cpi: pd.DataFrame
    shares: pd.DataFrame
    # tightness the counts were rounded from, aligned with ``cells``
    theta_target: Optional[np.ndarray] = None

    @property
    def zone_map(self):
        return {d: str(r) for r, d in enumerate(district_codes(self.truth["config"]["n_regions"]))}


def generate(config: SynthConfig) -> SynthData:
    """Draw one synthetic economy.

    Returns market cells (counts and tightness per occupation key, region
    and year), worker spells in the ingestion schema plus ``wage_real``,
    ``hire`` and ``occ_key``, and a truth record.
    """
    cfg = config
    O, R, T = cfg.n_occupations, cfg.n_regions, cfg.n_years
    years = cfg.first_year + np.arange(T)

    g = _rng(cfg.seed, "levels")
    occ_level = g.normal(0, cfg.sd_occupation, O)
    reg_level = g.normal(0, cfg.sd_region, R)
    mkt_level = occ_level[:, None] + reg_level[None, :] + g.normal(0, cfg.sd_market, (O, R))
    log_u_base = np.log(cfg.seekers_mean) + g.normal(0, 0.5, (O, R))
    market_wage = g.normal(0, cfg.sd_market_wage, (O, R))

    demand = _rng(cfg.seed, "demand").normal(0, cfg.sd_demand, (O, T))
    supply = _rng(cfg.seed, "supply").normal(0, cfg.sd_supply, (O, T))
    local = _rng(cfg.seed, "local").normal(0, cfg.sd_local, (O, R, T))
    wage_shock = _rng(cfg.seed, "wage_shock").normal(0, cfg.sd_wage_shock, (O, R, T))

    log_theta_latent = (cfg.theta_level + mkt_level[:, :, None] + cfg.theta_trend * np.arange(T)[None, None, :]
                        + demand[:, None, :] + supply[:, None, :] + local)
    log_theta_target = log_theta_latent - cfg.rho * wage_shock
    lam = np.exp(log_u_base[:, :, None] - supply[:, None, :]) - 5.0
    u = 5 + _rng(cfg.seed, "seekers").poisson(np.clip(lam, 0.0, None))
    # at least one vacancy keeps log tightness defined; |V/U - theta| <= 1/U still holds
    v = np.maximum(np.rint(np.exp(log_theta_target) * u), 1.0)
    theta = v / u

    occ_codes = occupation_codes(O)
    occ_keys = [f"{c[:3]}-{c[4]}" for c in occ_codes]
    dists = district_codes(R)
    oo, rr, tt = np.meshgrid(np.arange(O), np.arange(R), np.arange(T), indexing="ij")
    cells = pd.DataFrame({
        "occupation": np.asarray(occ_keys)[oo.ravel()],
        "region": np.arange(R).astype(str)[rr.ravel()],
        "year": years[tt.ravel()],
        "v_registered": v.ravel(),
        "v_total": v.ravel(),
        "u": u.ravel().astype(float),
    })
    cells["theta_flow"] = np.nan
    cells = mark_theta(cells)[CELL_COLUMNS]

    # workers: W per market, observed every year
    W, F = cfg.workers_per_market, cfg.firms_per_market
    n_workers = O * R * W
    gw = _rng(cfg.seed, "workers")
    w_market = np.repeat(np.arange(O * R), W)
    w_occ, w_reg = w_market // R, w_market % R
    worker_fe = gw.normal(0, cfg.sd_worker, n_workers)
    age0 = gw.integers(20, 51, n_workers)
    educ = gw.integers(0, 3, n_workers)
    gender = gw.integers(0, 2, n_workers)
    foreign = gw.random(n_workers) < 0.12

    gf = _rng(cfg.seed, "firms")
    n_firms = O * R * F
    firm_fe = gf.normal(0, cfg.sd_firm, n_firms)
    firm_industry = gf.integers(1, 10, n_firms)

    gm = _rng(cfg.seed, "mobility")
    slot = np.empty((n_workers, T), dtype=np.int64)
    slot[:, 0] = gm.integers(0, F, n_workers)
    for t in range(1, T):
        move = gm.random(n_workers) < cfg.move_prob
        shift = gm.integers(1, F, n_workers) if F > 1 else np.zeros(n_workers, dtype=np.int64)
        slot[:, t] = np.where(move, (slot[:, t - 1] + shift) % F, slot[:, t - 1])
    firm = w_market[:, None] * F + slot
    hire = np.ones((n_workers, T), dtype=bool)
    hire[:, 1:] = firm[:, 1:] != firm[:, :-1]

    age = age0[:, None] + np.arange(T)[None, :]
    age_sq = age.astype(float) ** 2 / 100.0
    year_fe = cfg.wage_trend * np.arange(T)
    log_theta = np.log(theta)  # (O, R, T); v > 0 for practical settings
    lt = log_theta[w_occ, w_reg, :]
    noise = _rng(cfg.seed, "noise").normal(0, cfg.sd_noise, (n_workers, T))
    log_wage_real = (4.6 + cfg.alpha_true * lt + cfg.beta_age_sq * age_sq + cfg.beta_hire * hire
                     + worker_fe[:, None] + year_fe[None, :] + market_wage[w_occ, w_reg][:, None]
                     + firm_fe[firm] + cfg.delta * demand[w_occ, :] + wage_shock[w_occ, w_reg, :] + noise)

    cpi_index = 100.0 * (1.0 + cfg.inflation) ** np.arange(T)
    n = n_workers * T
    wid = np.repeat(np.arange(n_workers), T)
    tidx = np.tile(np.arange(T), n_workers)
    occ_cat = pd.Categorical.from_codes(np.repeat(w_occ, T), categories=occ_codes)
    key_cat = pd.Categorical.from_codes(np.repeat(w_occ, T), categories=occ_keys)
    dist_cat = pd.Categorical.from_codes(np.repeat(w_reg, T), categories=dists)
    east_region = np.arange(R) < int(round(cfg.east_share * R))
    wage_real = np.exp(log_wage_real.ravel())
    spells = pd.DataFrame({
        "worker_id": wid,
        "year": years[tidx],
        "firm_id": firm.ravel(),
        "occupation": occ_cat,
        "district": dist_cat,
        "wage": wage_real * cpi_index[tidx] / 100.0,
        "censored": np.zeros(n, dtype=bool),
        "age": age.ravel().astype(float),
        "education": pd.Categorical.from_codes(np.repeat(educ, T), categories=list(EDUCATION)),
        "gender": pd.Categorical.from_codes(np.repeat(gender, T), categories=list(GENDER)),
        "nationality": pd.Categorical.from_codes(np.repeat(foreign.astype(int), T), categories=list(NATIONALITY)),
        "east": np.repeat(east_region[w_reg], T),
        "industry": firm_industry[firm.ravel()].astype(str),
        "weight": np.ones(n),
        "wage_real": wage_real,
        "hire": hire.ravel(),
        "occ_key": key_cat,
    })
    truth = {
        "alpha_true": cfg.alpha_true,
        "rho": cfg.rho,
        "delta": cfg.delta,
        "seed": cfg.seed,
        "beta_age_sq": cfg.beta_age_sq,
        "beta_hire": cfg.beta_hire,
        "config": cfg.to_dict(),
    }
    cpi = pd.DataFrame({"year": years, "index": cpi_index})
    shares = pd.DataFrame([(str(y), grp, 1.0) for y in years for grp in REQUIREMENT_GROUPS],
                          columns=["year", "requirement_group", "share"])
    return SynthData(cells, spells, truth, cpi, shares, np.exp(log_theta_target).ravel())


def vacancy_tables(data: SynthData):
    """District-level vacancy and seeker tables matching the synthetic cells."""
    cfg = data.truth["config"]
    occ_codes = occupation_codes(cfg["n_occupations"])
    key_to_code = {f"{c[:3]}-{c[4]}": c for c in occ_codes}
    dists = district_codes(cfg["n_regions"])
    cells = data.cells
    base = pd.DataFrame({
        "occupation": cells["occupation"].map(key_to_code),
        "district": cells["region"].astype(int).map(lambda r: dists[r]),
        "year": cells["year"],
    })
    vac = base.assign(v_registered=cells["v_registered"].astype(int))
    seek = base.assign(u=cells["u"].astype(int))
    return vac, seek
