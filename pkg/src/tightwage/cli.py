"""Command-line entry point: ``tightwage <subcommand> [options]``.

Every run resolves its settings from three layers (built-in defaults, the
TOML file given by ``--config``, then command-line flags), logs to stderr,
writes its outputs and finishes with a JSON manifest listing input and
output digests.

Exit codes: 0 success, 2 usage, 3 validation, 4 estimation, 5 I/O.
"""

from __future__ import annotations

import argparse
import copy
import dataclasses
import hashlib
import json
import logging
import os
import sys
import time
from pathlib import Path

EXIT_OK, EXIT_USAGE, EXIT_VALIDATION, EXIT_ESTIMATION, EXIT_IO = 0, 2, 3, 4, 5

log = logging.getLogger("tightwage")

# Every tunable the subcommands read.  The config file may override any key;
# unknown sections or keys are rejected.
DEFAULTS = {
    "run": {"seed": 0, "threads": 1, "log_level": "INFO"},
    "panel": {"occupation_digits": 3, "region_scheme": "zones", "base_year": 2012, "years": [2012, 2022],
              "censor_limits": {}, "trim": None},
    "zones": {"grid": "0.02:0.20:0.01"},
    "tightness": {"share_mode": "yearly", "flow_adjust": True},
    "imputation": {"controls": ["age", "age_sq", "requirement", "east"], "max_iter": 200},
    "synth": {},  # filled from SynthConfig below, minus the seed (lives in [run])
    "estimator": {"cluster": "market", "tol": 1e-8, "max_sweeps": 10_000, "drop_singletons": True,
                  "f_floor": 10.0},
    "report": {"n_bins": 20},
}

PANEL_COLUMNS = ["worker_id", "year", "firm_id", "occupation", "occupation_key", "district", "region", "market",
                 "industry", "age", "age_sq", "hire", "east", "weight", "censored", "log_wage", "log_theta",
                 "log_theta_flow", "z1", "z2", "loo_log_v_sum"]
PANEL_STR_COLUMNS = {c: str for c in ("worker_id", "firm_id", "occupation", "occupation_key", "district", "region",
                                      "market", "industry")}


def _synth_defaults():
    from .synth import SynthConfig
    d = SynthConfig().to_dict()
    d.pop("seed")
    return d


def default_config() -> dict:
    cfg = copy.deepcopy(DEFAULTS)
    cfg["synth"] = _synth_defaults()
    return cfg


def _load_toml(path):
    if sys.version_info >= (3, 11):
        import tomllib
    else:
        import tomli as tomllib
    with open(path, "rb") as fh:
        return tomllib.load(fh)


def resolve_config(file_values: dict | None = None, flags: dict | None = None) -> dict:
    """Merge defaults, file values and flags (later layers win).

    ``flags`` maps ``"section.key"`` to a value; ``None`` means the flag was
    not given.
    """
    from .errors import ValidationError

    cfg = default_config()
    for section, values in (file_values or {}).items():
        if section not in cfg:
            raise ValidationError(f"unknown config section [{section}]")
        if not isinstance(values, dict):
            raise ValidationError(f"config section [{section}] must be a table")
        for key, val in values.items():
            if key not in cfg[section]:
                hint = " (set the seed under [run])" if section == "synth" and key == "seed" else ""
                raise ValidationError(f"unknown config key {section}.{key}{hint}")
            cfg[section][key] = val
    for dotted, val in (flags or {}).items():
        if val is None:
            continue
        section, key = dotted.split(".", 1)
        cfg[section][key] = val
    return cfg


def config_hash(cfg: dict) -> str:
    return hashlib.sha256(json.dumps(cfg, sort_keys=True, default=str).encode()).hexdigest()


def file_digest(path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def _write_json(obj, path):
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(obj, fh, indent=2, sort_keys=True, allow_nan=True)
        fh.write("\n")


def _write_csv(frame, path):
    frame.to_csv(path, index=False, lineterminator="\n")


# --------------------------------------------------------------------------- subcommands


def _panel_config(cfg):
    from .data import PanelConfig
    return PanelConfig.from_dict(cfg["panel"])


def _zone_map(path):
    import pandas as pd
    from .errors import ValidationError

    frame = pd.read_csv(path, dtype={"district": str, "zone": str})
    if not {"district", "zone"} <= set(frame.columns):
        raise ValidationError(f"{path}: zone file needs district and zone columns")
    return dict(zip(frame["district"], frame["zone"]))


def cmd_delineate(args, cfg):
    from .data import load_tables
    from .zones import FlowMatrix, delineate, parse_grid

    paths = {"flows": args.flows}
    if args.adjacency:
        paths["adjacency"] = args.adjacency
    bundle = load_tables(paths, _panel_config(cfg))
    fm = FlowMatrix.from_tables(bundle["flows"], bundle.tables.get("adjacency"))
    part = delineate(fm, parse_grid(str(cfg["zones"]["grid"])))
    log.info("%d districts -> %d zones at threshold %s (Q=%.6f)", fm.n, part.n_zones, part.threshold, part.q)
    _write_csv(part.to_frame(), args.out)
    return [args.out], {"threshold": part.threshold, "q": part.q, "n_zones": part.n_zones}


def enrich_cells(cells, spells, cfg):
    """Flow-adjusted tightness (when configured) and leave-one-out instruments."""
    from .instruments import add_instruments
    from .tightness import flow_adjust, transition_weights

    if cfg["tightness"]["flow_adjust"] and spells is not None:
        weights = transition_weights(spells, occ_col="occ_key")
        covered = cells["occupation"].isin(set(weights.occupations)).to_numpy()
        adjusted = flow_adjust(cells[covered], weights)
        cells = cells.copy()
        cells.loc[covered, "theta_flow"] = adjusted["theta_flow"]
    return add_instruments(cells)


def assemble_panel(spells, cells, cfg, zone_map, cpi=None):
    """Validated spells + enriched cells -> estimation panel."""
    from .data import deflate, derive_hires
    from .panel import build_panel

    spells = derive_hires(spells)
    if cpi is not None:
        spells = deflate(spells, cpi, cfg["panel"]["base_year"])
    return build_panel(spells, cells, cfg["panel"]["occupation_digits"], cfg["panel"]["region_scheme"], zone_map)


def _panel_frame(panel):
    out = panel[[c for c in PANEL_COLUMNS if c in panel]].copy()
    for c in ("censored",):
        if c in out:
            out[c] = out[c].astype(bool).astype(int)
    return out


def cmd_build_tightness(args, cfg):
    from .data import load_tables
    from .errors import ValidationError
    from .tightness import CELL_COLUMNS, ShareTable, build_cells

    pcfg = _panel_config(cfg)
    paths = {"vacancies": args.vacancies, "seekers": args.seekers}
    if args.shares:
        paths["shares"] = args.shares
    if args.spells:
        paths["spells"] = args.spells
    if args.cpi:
        paths["cpi"] = args.cpi
    bundle = load_tables(paths, pcfg)
    zone_map = _zone_map(args.zones) if args.zones else None
    if pcfg.region_scheme == "zones" and zone_map is None:
        raise ValidationError("region_scheme 'zones' needs --zones")
    shares = ShareTable(bundle.tables.get("shares"), cfg["tightness"]["share_mode"])
    cells = build_cells(bundle["vacancies"], bundle["seekers"], shares, zone_map, pcfg)
    outputs = [args.out]
    info = {"n_cells": len(cells), "n_undefined": int((cells["flag"] != "ok").sum())}
    if args.spells:
        cells = enrich_cells(cells, bundle["spells"], cfg)
        panel = assemble_panel(bundle["spells"], cells, cfg, zone_map, bundle.tables.get("cpi"))
        if args.panel_out:
            _write_csv(_panel_frame(panel), args.panel_out)
            outputs.append(args.panel_out)
        info["n_panel_rows"] = len(panel)
    _write_csv(cells[CELL_COLUMNS], args.out)
    return outputs, info


def cmd_impute(args, cfg):
    import numpy as np
    from .data import SCHEMAS, load_tables
    from .imputation import impute

    pcfg = _panel_config(cfg)
    limits = dict(pcfg.censor_limits)
    if args.limits:
        table = load_tables({"limits": args.limits}, pcfg)["limits"]
        limits.update(zip(table["year"].astype(int), table["limit"].astype(float)))
        # blank censoring flags fall back to these limits
        pcfg = dataclasses.replace(pcfg, censor_limits=limits)
    bundle = load_tables({"spells": args.spells}, pcfg)
    res = impute(bundle["spells"], limits or None, controls=tuple(cfg["imputation"]["controls"]),
                 max_iter=int(cfg["imputation"]["max_iter"]))
    out = res.spells
    frame = out[SCHEMAS["spells"]].copy()
    frame["wage_observed"] = frame["wage"]
    frame["wage"] = out["wage_imputed"]
    frame["impute_flag"] = out["impute_flag"]
    for c in ("censored", "east"):
        frame[c] = frame[c].astype(bool).astype(int)
    _write_csv(frame, args.out)
    info = {"n_censored": int(out["censored"].sum()), "n_imputed": int(out["imputed"].sum()),
            "cells_fitted": len(res.fits), "cells_skipped": [list(map(str, k)) for k in res.skipped]}
    log.info("imputed %d of %d censored wages", info["n_imputed"], info["n_censored"])
    return [args.out], info


def cmd_simulate(args, cfg):
    from .data import write_table
    from .synth import SynthConfig, generate, vacancy_tables
    from .tightness import CELL_COLUMNS

    out_dir = Path(args.out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    scfg = SynthConfig.from_dict({**cfg["synth"], "seed": int(cfg["run"]["seed"])})
    data = generate(scfg)
    vac, seek = vacancy_tables(data)
    files = {}
    for kind, frame in (("spells", data.spells), ("vacancies", vac), ("seekers", seek), ("shares", data.shares),
                        ("cpi", data.cpi)):
        files[kind] = out_dir / f"{kind}.csv"
        write_table(frame, kind, files[kind])
    import pandas as pd
    zones = pd.DataFrame({"district": list(data.zone_map), "zone": list(data.zone_map.values())})
    files["zones"] = out_dir / "zones.csv"
    _write_csv(zones, files["zones"])
    files["cells"] = out_dir / "cells.csv"
    _write_csv(data.cells[CELL_COLUMNS], files["cells"])
    panel = assemble_panel(data.spells, enrich_cells(data.cells, None, cfg), cfg, data.zone_map)
    files["panel"] = out_dir / "panel.csv"
    _write_csv(_panel_frame(panel), files["panel"])
    files["truth"] = out_dir / "truth.json"
    _write_json(data.truth, files["truth"])
    log.info("simulated %d spells in %d cells", len(data.spells), len(data.cells))
    return list(files.values()), {"seed": scfg.seed}


def read_panel(path):
    import pandas as pd
    return pd.read_csv(path, dtype=PANEL_STR_COLUMNS)


def _spec_from_file(path, cfg):
    from .errors import ValidationError
    from .estimator import RegressionSpec

    raw = _load_toml(path)
    if "estimate" in raw:
        raw = raw["estimate"]
    known = set(RegressionSpec.__dataclass_fields__)
    unknown = set(raw) - known
    if unknown:
        raise ValidationError(f"unknown spec keys {sorted(unknown)}")
    merged = {**cfg["estimator"], "trim": cfg["panel"]["trim"], **raw}
    return raw, RegressionSpec.from_dict(merged)


def cmd_estimate(args, cfg):
    from .estimator import estimate

    raw_spec, spec = _spec_from_file(args.spec, cfg)
    panel = read_panel(args.panel)
    res = estimate(spec, panel)
    log.info("%s", res.summary())
    payload = res.to_dict()
    payload["spec_file"] = raw_spec
    _write_json(payload, args.out)
    info = {"fe_dims": list(raw_spec.get("fe", [])), "fe_columns": list(spec.fe), "method": res.method,
            "n_obs": res.n_obs}
    return [args.out], info


def _elasticity_from_result(result):
    from .errors import ValidationError

    spec = result.get("spec") or {}
    coefs = result["coefficients"]
    for name in list(spec.get("endogenous") or []) + ["log_theta"]:
        if name in coefs:
            return float(coefs[name])
    raise ValidationError("result has no tightness coefficient; set elasticities in the interpret file")


def cmd_report(args, cfg):
    from . import analysis
    from .errors import ValidationError

    interp = _load_toml(args.interpret) if args.interpret else {}
    result = None
    if args.result:
        with open(args.result, encoding="utf-8") as fh:
            result = json.load(fh)
    report = {}
    outputs = [args.out]
    if "contribution" in interp:
        c = interp["contribution"]
        els = c.get("elasticities")
        if els is None:
            if result is None:
                raise ValidationError("contribution needs elasticities or --result")
            els = [_elasticity_from_result(result)]
        rows = []
        for e in els:
            effect, share = analysis.contribution_share(float(e), float(c["tightness_growth_pct"]),
                                                        float(c["wage_growth_pct"]))
            rows.append({"elasticity": float(e), "wage_effect_pct": effect, "share_pct": share})
        report["contribution"] = rows
    if "wage_setting" in interp:
        w = interp["wage_setting"]
        els = w.get("elasticities")
        if els is None:
            if result is None:
                raise ValidationError("wage_setting needs elasticities or --result")
            els = [_elasticity_from_result(result)]
        report["wage_setting"] = [
            {"elasticity": float(e),
             "coefficient": analysis.wage_setting_level(float(e), float(w["base_wage"]), float(w["base_theta"]),
                                                        float(w["gva"]), float(w["workforce"]),
                                                        float(w.get("days", 365)))}
            for e in els]
    if "deciles" in interp:
        d = interp["deciles"]
        cf = analysis.decile_counterfactual(d["observed_growth_pct"], d["elasticity"], d["tightness_growth_pct"])
        report["deciles"] = {"table": cf.table.to_dict(orient="records"), "observed_gap": cf.observed_gap,
                             "counterfactual_gap": cf.counterfactual_gap, "gap_change": cf.gap_change}
    if "binscatter" in interp:
        b = interp["binscatter"]
        panel = read_panel(b["panel"])
        po = None
        if any(k in b for k in ("fe", "controls", "instrument")):
            po = analysis.PartialOut(fe=b.get("fe", []), controls=b.get("controls", []),
                                     instrument=b.get("instrument"))
        bins = analysis.binscatter(panel, b["x"], b["y"], int(b.get("n_bins", cfg["report"]["n_bins"])), po)
        out_csv = b.get("out") or str(Path(args.out).with_suffix("")) + "_binscatter.csv"
        _write_csv(bins, out_csv)
        outputs.append(out_csv)
        report["binscatter"] = {"file": Path(out_csv).name, "slope": analysis.fitted_slope(bins), "n_bins": len(bins)}
    if result is not None:
        report["source"] = {"method": result.get("method"), "n_obs": result.get("n_obs")}
    _write_json(report, args.out)
    return outputs, {"sections": sorted(report)}


# --------------------------------------------------------------------------- parser and driver


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="TOML settings file")
    common.add_argument("--seed", type=int)
    common.add_argument("--threads", type=int)
    common.add_argument("--log-level", choices=["DEBUG", "INFO", "WARNING", "ERROR"])

    p = argparse.ArgumentParser(prog="tightwage", description=__doc__.splitlines()[0])
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("delineate-zones", parents=[common], help="commuting zones from district flows")
    s.add_argument("--flows", required=True)
    s.add_argument("--adjacency")
    s.add_argument("--grid", help="start:stop:step or comma list of thresholds")
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_delineate)

    s = sub.add_parser("build-tightness", parents=[common], help="market cells (and optionally a panel)")
    s.add_argument("--vacancies", required=True)
    s.add_argument("--seekers", required=True)
    s.add_argument("--shares")
    s.add_argument("--zones", help="district,zone file")
    s.add_argument("--spells", help="spells for flow weights and the estimation panel")
    s.add_argument("--cpi", help="price index used to deflate spell wages")
    s.add_argument("--panel-out")
    s.add_argument("--occupation-digits", type=int, choices=[2, 3, 4])
    s.add_argument("--region-scheme")
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_build_tightness)

    s = sub.add_parser("impute", parents=[common], help="Tobit imputation of censored wages")
    s.add_argument("--spells", required=True)
    s.add_argument("--limits")
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_impute)

    s = sub.add_parser("simulate", parents=[common], help="synthetic panel with known elasticity")
    s.add_argument("--out-dir", "--out", dest="out_dir", required=True)
    s.set_defaults(func=cmd_simulate)

    s = sub.add_parser("estimate", parents=[common], help="OLS / 2SLS with absorbed fixed effects")
    s.add_argument("--panel", required=True)
    s.add_argument("--spec", required=True)
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_estimate)

    s = sub.add_parser("report", parents=[common], help="interpretation arithmetic and binscatter")
    s.add_argument("--result")
    s.add_argument("--interpret")
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_report)
    return p


def _flag_layer(args) -> dict:
    return {
        "run.seed": args.seed,
        "run.threads": args.threads,
        "run.log_level": args.log_level,
        "zones.grid": getattr(args, "grid", None),
        "panel.occupation_digits": getattr(args, "occupation_digits", None),
        "panel.region_scheme": getattr(args, "region_scheme", None),
    }


def _inputs(args) -> list:
    names = ("flows", "adjacency", "vacancies", "seekers", "shares", "zones", "spells", "cpi", "limits", "panel",
             "spec", "result", "interpret", "config")
    return [getattr(args, n) for n in names if getattr(args, n, None)]


def _manifest_path(args) -> Path:
    if args.command == "simulate":
        return Path(args.out_dir) / "manifest.json"
    return Path(str(args.out) + ".manifest.json")


def _set_threads(n):
    for var in ("OMP_NUM_THREADS", "OPENBLAS_NUM_THREADS", "MKL_NUM_THREADS", "NUMBA_NUM_THREADS"):
        os.environ[var] = str(n)


def run(argv=None) -> tuple[int, dict | None]:
    """Parse ``argv``, execute the subcommand and return ``(exit code, manifest)``."""
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return (EXIT_OK if exc.code == 0 else EXIT_USAGE), None

    from . import __version__
    from .errors import EstimationError, ValidationError

    start = time.perf_counter()
    try:
        file_values = _load_toml(args.config) if args.config else {}
        cfg = resolve_config(file_values, _flag_layer(args))
    except OSError as exc:
        print(f"tightwage: cannot read config: {exc}", file=sys.stderr)
        return EXIT_IO, None
    except ValidationError as exc:
        print(f"tightwage: {exc}", file=sys.stderr)
        return EXIT_VALIDATION, None
    except ValueError as exc:  # TOML syntax
        print(f"tightwage: config does not parse: {exc}", file=sys.stderr)
        return EXIT_VALIDATION, None

    logging.basicConfig(stream=sys.stderr, level=cfg["run"]["log_level"],
                        format="%(asctime)s %(levelname)s %(name)s: %(message)s", force=True)
    _set_threads(int(cfg["run"]["threads"]))
    try:
        outputs, info = args.func(args, cfg)
    except ValidationError as exc:
        log.error("validation failed: %s", exc)
        return EXIT_VALIDATION, None
    except EstimationError as exc:
        log.error("estimation failed: %s", exc)
        return EXIT_ESTIMATION, None
    except OSError as exc:
        log.error("I/O error: %s", exc)
        return EXIT_IO, None

    manifest = {
        "command": args.command,
        "version": __version__,
        "config_hash": config_hash(cfg),
        "config": cfg,
        "seed": cfg["run"]["seed"],
        "inputs": {str(p): file_digest(p) for p in _inputs(args)},
        "outputs": {str(p): file_digest(p) for p in outputs},
        "wall_time_s": round(time.perf_counter() - start, 3),
        **info,
    }
    try:
        _write_json(manifest, _manifest_path(args))
    except OSError as exc:
        log.error("cannot write manifest: %s", exc)
        return EXIT_IO, manifest
    return EXIT_OK, manifest


def main(argv=None) -> int:
    code, _ = run(argv)
    return code


if __name__ == "__main__":
    sys.exit(main())
