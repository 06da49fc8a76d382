import sys
from pathlib import Path

import numpy as np
import pytest
from hypothesis import HealthCheck, settings

sys.path.insert(0, str(Path(__file__).parent))

settings.register_profile("default", deadline=None, max_examples=50,
                          suppress_health_check=[HealthCheck.too_slow])
settings.load_profile("default")


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture(scope="session")
def small_records():
    from cdml.synthetic import SyntheticConfig, make_records

    return make_records(SyntheticConfig(records_per_label=4, seed=3))


@pytest.fixture(scope="session")
def small_split(small_records):
    """Normalised arrays from the small synthetic record set."""
    from cdml import data
    from cdml.train import SplitArrays

    split = data.split_dataset(small_records, 0)
    wtr, wte = split.windows()
    Xtr, ytr, _ = data.stack(wtr)
    Xte, yte, _ = data.stack(wte)
    st = data.normalize_fit(Xtr)
    return SplitArrays(data.normalize_apply(st, Xtr), ytr, data.normalize_apply(st, Xte), yte)


# acceptance verdicts, echoed in the terminal summary
ACCEPTANCE: list[str] = []


@pytest.fixture
def verdict(capsys):
    """Record one PASS/FAIL line for an acceptance criterion and print it."""

    def record(label: str, ok: bool, detail: str = "") -> bool:
        line = f"{'PASS' if ok else 'FAIL'} {label}" + (f": {detail}" if detail else "")
        ACCEPTANCE.append(line)
        with capsys.disabled():
            print("\n" + line)
        return ok

    return record


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE:
            terminalreporter.write_line(line)
