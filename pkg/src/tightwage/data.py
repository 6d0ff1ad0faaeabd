"""Domain records, table ingestion and the two derived spell columns.

All tables travel as :class:`pandas.DataFrame` objects with canonical column
names.  Loading validates every row against the record invariants; malformed
rows are rejected with their file line number, while duplicate keys and
unknown enum values abort the load.
"""

from __future__ import annotations

import csv
import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Mapping, Optional

import numpy as np
import pandas as pd

from .errors import ValidationError

log = logging.getLogger(__name__)

EDUCATION = ("low", "medium", "high")
GENDER = ("male", "female")
NATIONALITY = ("native", "foreign")
REQUIREMENT_GROUPS = ("helpers", "professionals", "specialists_experts")
REGION_SCHEMES = ("zones", "states", "government_regions", "districts")

SCHEMAS = {
    "spells": ["worker_id", "year", "firm_id", "occupation", "district", "wage", "censored",
               "age", "education", "gender", "nationality", "east", "industry", "weight"],
    "vacancies": ["occupation", "district", "year", "v_registered"],
    "seekers": ["occupation", "district", "year", "u"],
    "shares": ["year", "requirement_group", "share"],
    "cpi": ["year", "index"],
    "flows": ["origin_district", "destination_district", "commuters"],
    "adjacency": ["district_a", "district_b"],
    "limits": ["year", "limit"],
}
# columns that may be absent or blank in a spell file
OPTIONAL_SPELL_COLUMNS = {"censored", "weight"}

KEYS = {
    "spells": ["worker_id", "year"],
    "vacancies": ["occupation", "district", "year"],
    "seekers": ["occupation", "district", "year"],
    "shares": ["year", "requirement_group"],
    "cpi": ["year"],
    "flows": ["origin_district", "destination_district"],
    "limits": ["year"],
}

_TRUE = {"1", "true", "t", "yes", "y"}
_FALSE = {"0", "false", "f", "no", "n"}


@dataclass(frozen=True)
class PanelConfig:
    """Labor-market granularity and sample settings."""

    occupation_digits: int = 3
    region_scheme: str = "zones"
    base_year: int = 2012
    censor_limits: Mapping[int, float] = field(default_factory=dict)
    trim: Optional[tuple[float, float]] = None
    years: tuple[int, int] = (2012, 2022)

    def __post_init__(self):
        if self.occupation_digits not in (2, 3, 4):
            raise ValidationError(f"occupation_digits must be 2, 3 or 4, got {self.occupation_digits}")
        if self.region_scheme not in REGION_SCHEMES:
            raise ValidationError(f"unknown region_scheme {self.region_scheme!r}")
        if self.trim is not None:
            lo, hi = self.trim
            if not (0 <= lo < 50 < hi <= 100):
                raise ValidationError(
                    f"trim needs a lower percentile in [0, 50) and an upper one in (50, 100], got {self.trim}")
        if self.years[0] > self.years[1]:
            raise ValidationError(f"empty year range {self.years}")

    @classmethod
    def from_dict(cls, d: Mapping) -> "PanelConfig":
        d = dict(d)
        if "censor_limits" in d:
            d["censor_limits"] = {int(k): float(v) for k, v in d["censor_limits"].items()}
        if d.get("trim") is not None:
            d["trim"] = tuple(d["trim"])
        if "years" in d:
            d["years"] = tuple(int(y) for y in d["years"])
        return cls(**d)


@dataclass(frozen=True)
class TableBundle:
    """Validated tables plus per-table row counts and rejected-row diagnostics."""

    tables: Mapping[str, pd.DataFrame]
    counts: Mapping[str, int]
    rejects: Mapping[str, list]

    def __getitem__(self, name):
        return self.tables[name]

    def __contains__(self, name):
        return name in self.tables


def occupation_key(code: str, digits: int) -> str:
    """Collapse a 5-digit occupation code to a labor-market key.

    >>> occupation_key("26342", 3)
    '263-2'
    """
    code = str(code)
    return f"{code[:digits]}-{code[4]}"


def requirement_digit(code) -> int:
    """Requirement level (last character) of a 5-digit code or an occupation key."""
    return int(str(code)[-1])


def region_of(districts: pd.Series, scheme: str, zone_map: Optional[Mapping] = None) -> pd.Series:
    """Map district codes to region ids under a region scheme.

    ``states`` and ``government_regions`` use the leading two and three
    characters of the (official, 5-digit) district code.
    """
    districts = districts.astype(str)
    if scheme == "districts":
        return districts
    if scheme == "states":
        return districts.str[:2]
    if scheme == "government_regions":
        return districts.str[:3]
    if zone_map is None:
        raise ValidationError("region_scheme 'zones' requires a zone map")
    mapped = districts.map(zone_map)
    missing = districts[mapped.isna()].unique()
    if len(missing):
        raise ValidationError(f"districts missing from zone map: {sorted(missing)[:10]}")
    return mapped.astype(str)


# --------------------------------------------------------------------------- loading


def _sniff_delimiter(path: Path) -> str:
    with open(path, encoding="utf-8") as fh:
        header = fh.readline()
    if not header.strip():
        raise ValidationError(f"{path}: missing header row")
    return "\t" if header.count("\t") > header.count(",") else ","


def _read_raw(path, kind) -> pd.DataFrame:
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(path)
    sep = _sniff_delimiter(path)
    frame = pd.read_csv(path, sep=sep, dtype=str, keep_default_na=False, quoting=csv.QUOTE_MINIMAL)
    frame.columns = [c.strip() for c in frame.columns]
    required = [c for c in SCHEMAS[kind] if not (kind == "spells" and c in OPTIONAL_SPELL_COLUMNS)]
    missing = [c for c in required if c not in frame.columns]
    if missing:
        raise ValidationError(f"{path}: missing columns {missing}")
    for c in frame.columns:
        frame[c] = frame[c].str.strip()
    # line numbers in the source file (header is line 1)
    frame.index = pd.RangeIndex(2, len(frame) + 2, name="line")
    return frame


class _Checker:
    """Accumulates row rejections for one table."""

    def __init__(self, frame, kind):
        self.frame = frame
        self.kind = kind
        self.bad = pd.Series(False, index=frame.index)
        self.reasons: list[tuple[int, str]] = []

    def reject(self, mask, reason):
        mask = mask & ~self.bad
        for line in mask.index[mask.to_numpy()]:
            self.reasons.append((int(line), reason))
        self.bad |= mask

    def number(self, col, integer=False):
        values = pd.to_numeric(self.frame[col], errors="coerce")
        self.reject(values.isna(), f"{col}: not a number")
        if integer:
            frac = values.notna() & (values != values.round())
            self.reject(frac, f"{col}: not an integer")
        return values

    def boolean(self, col, allow_blank=False):
        raw = self.frame[col].str.lower()
        known = raw.isin(_TRUE | _FALSE) | (allow_blank & (raw == ""))
        self.reject(~known, f"{col}: not a boolean")
        out = raw.isin(_TRUE).astype(object)
        if allow_blank:
            out[raw == ""] = None
        return out

    def enum(self, col, allowed):
        raw = self.frame[col].str.lower()
        blank = raw == ""
        self.reject(blank, f"{col}: missing")
        unknown = ~blank & ~raw.isin(allowed)
        if unknown.any():
            line = int(unknown.index[unknown.to_numpy()][0])
            raise ValidationError(
                f"{self.kind} line {line}: unknown {col} value {self.frame.at[line, col]!r}; expected one of {allowed}")
        return raw

    def occupation(self, col="occupation"):
        raw = self.frame[col]
        ok = raw.str.fullmatch(r"\d{5}") & raw.str[4].isin(["1", "2", "3", "4"])
        self.reject(~ok, f"{col}: not a 5-digit code with requirement digit 1-4")
        return raw

    def finish(self):
        kept = self.frame.loc[~self.bad]
        return kept, sorted(self.reasons)


def _check_duplicates(frame, kind):
    key = KEYS.get(kind)
    if not key or frame.empty:
        return
    dup = frame.duplicated(key, keep=False)
    if dup.any():
        first = frame.loc[dup, key].iloc[0].tolist()
        raise ValidationError(f"{kind}: duplicate key {dict(zip(key, first))}")


def _validate_spells(raw, config: PanelConfig):
    ck = _Checker(raw, "spells")
    for col in ("worker_id", "firm_id", "district", "industry"):
        ck.reject(raw[col] == "", f"{col}: missing")
    year = ck.number("year", integer=True)
    occ = ck.occupation()
    wage = ck.number("wage")
    ck.reject(wage.notna() & ~(wage > 0), "wage: must be positive")
    age = ck.number("age")
    ck.reject(age.notna() & ~age.between(14, 100), "age: outside [14, 100]")
    education = ck.enum("education", EDUCATION)
    gender = ck.enum("gender", GENDER)
    nationality = ck.enum("nationality", NATIONALITY)
    east = ck.boolean("east")
    if "censored" in raw:
        censored = ck.boolean("censored", allow_blank=True)
    else:
        censored = pd.Series(None, index=raw.index, dtype=object)
    if "weight" in raw:
        wraw = raw["weight"].where(raw["weight"] != "", "1")
        weight = pd.to_numeric(wraw, errors="coerce")
        ck.reject(weight.isna(), "weight: not a number")
        ck.reject(weight.notna() & (weight < 0), "weight: negative")
    else:
        weight = pd.Series(1.0, index=raw.index)
    kept, reasons = ck.finish()
    idx = kept.index
    out = pd.DataFrame({
        "worker_id": kept["worker_id"],
        "year": year[idx].astype(np.int64),
        "firm_id": kept["firm_id"],
        "occupation": occ[idx],
        "district": kept["district"],
        "wage": wage[idx].astype(float),
        "censored": censored[idx],
        "age": age[idx].astype(float),
        "education": education[idx],
        "gender": gender[idx],
        "nationality": nationality[idx],
        "east": east[idx].astype(bool),
        "industry": kept["industry"],
        "weight": weight[idx].astype(float),
    })
    out["censored"] = _resolve_censoring(out, config.censor_limits)
    return out, reasons


def _resolve_censoring(spells, limits):
    """Explicit flags win; blanks fall back to ``wage >= limit(year)``."""
    explicit = spells["censored"]
    limit = spells["year"].map(limits) if limits else pd.Series(np.nan, index=spells.index)
    derived = (spells["wage"] >= limit).fillna(False)
    return explicit.where(explicit.notna(), derived).astype(bool)


def _validate_counts(raw, kind, count_col):
    ck = _Checker(raw, kind)
    ck.reject(raw["district"] == "", "district: missing")
    occ = ck.occupation()
    year = ck.number("year", integer=True)
    n = ck.number(count_col)
    ck.reject(n.notna() & (n < 0), f"{count_col}: negative")
    kept, reasons = ck.finish()
    idx = kept.index
    out = pd.DataFrame({
        "occupation": occ[idx],
        "district": kept["district"],
        "year": year[idx].astype(np.int64),
        count_col: n[idx].astype(float),
    })
    return out, reasons


def _validate_shares(raw):
    ck = _Checker(raw, "shares")
    year_raw = raw["year"].str.lower()
    pooled = year_raw == "pooled"
    year = pd.to_numeric(year_raw.where(~pooled, "0"), errors="coerce")
    ck.reject(year.isna(), "year: not a number or 'pooled'")
    group = ck.enum("requirement_group", REQUIREMENT_GROUPS)
    share = ck.number("share")
    ck.reject(share.notna() & ~((share > 0) & (share <= 1)), "share: outside (0, 1]")
    kept, reasons = ck.finish()
    idx = kept.index
    out = pd.DataFrame({
        "year": year_raw[idx].where(pooled[idx], year[idx].astype("Int64").astype(str)),
        "requirement_group": group[idx],
        "share": share[idx].astype(float),
    })
    return out, reasons


def _validate_cpi(raw, base_year):
    ck = _Checker(raw, "cpi")
    year = ck.number("year", integer=True)
    index = ck.number("index")
    ck.reject(index.notna() & ~(index > 0), "index: must be positive")
    kept, reasons = ck.finish()
    out = pd.DataFrame({"year": year[kept.index].astype(np.int64), "index": index[kept.index].astype(float)})
    base = out.loc[out["year"] == base_year, "index"]
    if base.empty or not np.isclose(base.iloc[0], 100.0):
        raise ValidationError(f"cpi: base year {base_year} must be present with index 100")
    return out, reasons


def _validate_flows(raw):
    ck = _Checker(raw, "flows")
    for col in ("origin_district", "destination_district"):
        ck.reject(raw[col] == "", f"{col}: missing")
    n = ck.number("commuters")
    ck.reject(n.notna() & (n < 0), "commuters: negative")
    kept, reasons = ck.finish()
    out = kept[["origin_district", "destination_district"]].copy()
    out["commuters"] = n[kept.index].astype(float)
    return out, reasons


def _validate_adjacency(raw):
    ck = _Checker(raw, "adjacency")
    ck.reject((raw["district_a"] == "") | (raw["district_b"] == ""), "district: missing")
    kept, reasons = ck.finish()
    return kept[["district_a", "district_b"]].copy(), reasons


def _validate_limits(raw):
    ck = _Checker(raw, "limits")
    year = ck.number("year", integer=True)
    limit = ck.number("limit")
    ck.reject(limit.notna() & ~(limit > 0), "limit: must be positive")
    kept, reasons = ck.finish()
    return pd.DataFrame({"year": year[kept.index].astype(np.int64),
                         "limit": limit[kept.index].astype(float)}), reasons


def validate_table(raw: pd.DataFrame, kind: str, config: PanelConfig):
    """Validate one raw (all-string) table; returns ``(frame, rejects)``."""
    if kind == "spells":
        out, reasons = _validate_spells(raw, config)
    elif kind == "vacancies":
        out, reasons = _validate_counts(raw, kind, "v_registered")
    elif kind == "seekers":
        out, reasons = _validate_counts(raw, kind, "u")
    elif kind == "shares":
        out, reasons = _validate_shares(raw)
    elif kind == "cpi":
        out, reasons = _validate_cpi(raw, config.base_year)
    elif kind == "flows":
        out, reasons = _validate_flows(raw)
    elif kind == "adjacency":
        out, reasons = _validate_adjacency(raw)
    elif kind == "limits":
        out, reasons = _validate_limits(raw)
    else:
        raise ValidationError(f"unknown table kind {kind!r}")
    _check_duplicates(out, kind)
    if "occupation" in out:
        out["occ_key"] = out["occupation"].map(lambda c: occupation_key(c, config.occupation_digits))
    return out.reset_index(drop=True), reasons


def load_tables(paths: Mapping[str, str | Path], config: PanelConfig) -> TableBundle:
    """Read and validate the given delimited files.

    ``paths`` maps a table kind (see :data:`SCHEMAS`) to a file.  Occupation
    codes are collapsed to ``config.occupation_digits`` in an ``occ_key``
    column.
    """
    tables, counts, rejects = {}, {}, {}
    for kind, path in paths.items():
        if kind not in SCHEMAS:
            raise ValidationError(f"unknown table kind {kind!r}")
        raw = _read_raw(path, kind)
        frame, reasons = validate_table(raw, kind, config)
        for line, reason in reasons:
            log.warning("%s line %d rejected: %s", kind, line, reason)
        tables[kind] = frame
        counts[kind] = len(frame)
        rejects[kind] = reasons
        log.info("loaded %s: %d rows, %d rejected", kind, len(frame), len(reasons))
    return TableBundle(tables=tables, counts=counts, rejects=rejects)


def _format_bool(s):
    return s.map({True: "1", False: "0"})


def write_table(frame: pd.DataFrame, kind: str, path) -> None:
    """Serialize a table in its ingestion schema (derived columns dropped)."""
    out = frame[[c for c in SCHEMAS[kind] if c in frame]].copy()
    for col in ("censored", "east"):
        if col in out:
            out[col] = _format_bool(out[col].astype(bool))
    out.to_csv(path, index=False, lineterminator="\n")


def write_tables(bundle: TableBundle, directory) -> dict:
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    paths = {}
    for kind, frame in bundle.tables.items():
        paths[kind] = directory / f"{kind}.csv"
        write_table(frame, kind, paths[kind])
    return paths


# --------------------------------------------------------------------------- derived columns


def derive_hires(spells: pd.DataFrame) -> pd.DataFrame:
    """Flag hires: a spell at firm j in year t with no spell at j in t-1.

    A worker's first observed year always counts as a hire.
    """
    prev = spells[["worker_id", "year", "firm_id"]].copy()
    prev["year"] = prev["year"] + 1
    key = pd.MultiIndex.from_frame(spells[["worker_id", "year", "firm_id"]])
    continued = key.isin(pd.MultiIndex.from_frame(prev))
    out = spells.copy()
    out["hire"] = ~continued
    return out


def cpi_lookup(cpi) -> pd.Series:
    if isinstance(cpi, pd.DataFrame):
        return cpi.set_index("year")["index"]
    if isinstance(cpi, Mapping):
        return pd.Series(cpi, dtype=float)
    return cpi


def deflate(spells: pd.DataFrame, cpi, base_year: int | None = None, wage_col: str = "wage") -> pd.DataFrame:
    """Add ``wage_real = wage * 100 / cpi(year)``.

    ``base_year`` is only checked for presence in the index; the series is
    expected to be normalised to 100 there already.
    """
    index = cpi_lookup(cpi)
    if base_year is not None and base_year not in index.index:
        raise ValidationError(f"cpi has no entry for base year {base_year}")
    missing = sorted(set(spells["year"].unique()) - set(index.index))
    if missing:
        raise ValidationError(f"cpi missing years {missing}")
    out = spells.copy()
    out["wage_real"] = out[wage_col] * 100.0 / out["year"].map(index).to_numpy()
    return out
