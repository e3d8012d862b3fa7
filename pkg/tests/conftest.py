import csv

import numpy as np
import pytest

from edgetwin.flow_model import load_schema


def write_profile_csv(path, profile, counts, shifted, seed=0):
    """Raw CSV in a dataset profile's column layout.

    ``counts`` maps label -> rows.  Normal rows sit near 0.3 in every scaled
    numeric column; attack rows move the ``shifted`` columns up to 0.7.
    """
    schema = load_schema(profile)
    rng = np.random.default_rng(seed)
    rows = []
    for label, n in counts.items():
        for _ in range(n):
            row = {}
            for f in schema.features:
                if f.kind == "categorical":
                    row[f.name] = sorted(f.categories)[0]
                    continue
                v = 0.7 if (label != "Normal" and f.name in shifted) else 0.3
                v = float(np.clip(rng.normal(v, 0.04), 0, 1))
                row[f.name] = repr(f.low + v * (f.high - f.low)) if f.scaled else repr(v)
            row[schema.label_column] = label
            if schema.ip_column:
                row[schema.ip_column] = f"192.168.{rng.integers(0, 4)}.{rng.integers(1, 250)}"
            rows.append(row)
    order = rng.permutation(len(rows))
    cols = schema.feature_names + [schema.label_column] + ([schema.ip_column] if schema.ip_column else [])
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.DictWriter(fh, fieldnames=cols)
        w.writeheader()
        for i in order:
            w.writerow(rows[i])
    return path


@pytest.fixture
def profile_csv(tmp_path):
    def make(name, profile, counts, shifted, seed=0):
        return write_profile_csv(tmp_path / name, profile, counts, shifted, seed)

    return make


# one line per acceptance criterion, echoed in the terminal summary
ACCEPTANCE_LINES = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES):
            terminalreporter.write_line(line)
