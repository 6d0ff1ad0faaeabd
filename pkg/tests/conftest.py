import numpy as np
import pandas as pd
import pytest

from tightwage.synth import SynthConfig, generate

SMALL = dict(n_occupations=20, n_regions=5, n_years=4, workers_per_market=10, firms_per_market=3)


@pytest.fixture(scope="session")
def small_synth():
    return generate(SynthConfig(seed=11, **SMALL))


def spell_frame(rows):
    """Spells in ingestion schema from (worker, year, firm) triples plus defaults."""
    base = dict(occupation="26342", district="01001", wage=100.0, censored=False, age=40.0, education="medium",
                gender="female", nationality="native", east=False, industry="3", weight=1.0)
    out = [dict(base, worker_id=str(w), year=int(y), firm_id=str(f)) for w, y, f in rows]
    return pd.DataFrame(out)


def random_fe_panel(rng, n, n_fe, n_x=2):
    """Random panel with n_fe categorical columns, regressors and an outcome."""
    cols = {}
    for d in range(n_fe):
        cols[f"fe{d}"] = rng.integers(0, rng.integers(3, max(4, n // 10)), n)
    X = rng.normal(size=(n, n_x))
    for j in range(n_x):
        cols[f"x{j}"] = X[:, j] + 0.3 * cols["fe0"]
    effects = sum(rng.normal(size=cols[f"fe{d}"].max() + 1)[cols[f"fe{d}"]] for d in range(n_fe))
    cols["y"] = X @ rng.normal(size=n_x) + effects + rng.normal(size=n)
    cols["cl"] = rng.integers(0, 15, n)
    return pd.DataFrame(cols)


# one line per acceptance criterion, filled in by test_acceptance.py
ACCEPTANCE = {}


def record_criterion(number, passed, detail):
    line = f"criterion {number:2d}: {'PASS' if passed else 'FAIL'}  {detail}"
    ACCEPTANCE[number] = line
    print(line)
    return passed


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE:
        terminalreporter.section("acceptance criteria")
        for k in sorted(ACCEPTANCE):
            terminalreporter.write_line(ACCEPTANCE[k])
