import itertools
import os
import sys

import numpy as np
import pandas as pd
import pytest
from hypothesis import HealthCheck, settings

from dtrmon.cohort import CohortTable, cohort_from_frame

sys.path.insert(0, os.path.dirname(__file__))

settings.register_profile("repo", deadline=None, max_examples=100,
                          suppress_health_check=[HealthCheck.too_slow])
settings.load_profile("repo")


def patient_rows(pid, y, a1, a2, n, i):
    """Long-format rows for one patient; all sequences have the trajectory's length."""
    return [{"id": pid, "t": t, "y": y[t], "a1": a1[t], "a2": a2[t], "n": n[t], "i": i[t]}
            for t in range(len(y))]


def make_cohort(patients, horizon, validate=True):
    rows = list(itertools.chain.from_iterable(patients))
    df = pd.DataFrame(rows, columns=["id", "t", "y", "a1", "a2", "n", "i"])
    return cohort_from_frame(df, horizon=horizon, validate=validate)


def raw_cohort(pid, horizon, **cols):
    """CohortTable assembled directly, bypassing the loader's structural checks."""
    T = len(cols["y"])
    wide = {}
    for name in ("y", "a1", "a2", "n", "i"):
        arr = np.full((1, horizon + 1), np.nan if name == "i" else 0.0)
        arr[0, :T] = cols[name]
        wide[name] = arr
    return CohortTable(ids=[pid], length=[T], horizon=horizon, **wide)


def all_binary_trajectories(K, levels=(7.0, 9.0)):
    """Every valid observed trajectory with K + 1 decision periods and two A1c levels.

    Terminal rows follow the cohort conventions: a failure or horizon row
    repeats the previous a1 and n with a2 = 0; a censored row keeps the
    previous n.
    """
    out = []

    def grow(rows, prev_a1, prev_n, i_prev):
        t = len(rows)
        if t == K + 1:
            out.append(rows + [dict(y=0, a1=prev_a1, a2=0, n=prev_n, i=i_prev)])
            return
        ys = (0,) if t == 0 else (0, 1)
        for y in ys:
            if y == 1:
                out.append(rows + [dict(y=1, a1=prev_a1, a2=0, n=prev_n, i=i_prev)])
                continue
            i_opts = levels if (t == 0 or prev_n == 1) else (i_prev,)
            for i in i_opts:
                for a1 in ((1,) if prev_a1 else (0, 1)):
                    out.append(rows + [dict(y=0, a1=a1, a2=1, n=prev_n, i=i)])
                    for n in (0, 1):
                        grow(rows + [dict(y=0, a1=a1, a2=0, n=n, i=i)], a1, n, i)

    grow([], 0, 1, None)
    return out


def trajectories_cohort(trajs, horizon):
    patients = []
    for k, rows in enumerate(trajs):
        cols = {c: [r[c] for r in rows] for c in ("y", "a1", "a2", "n", "i")}
        patients.append(patient_rows(f"T{k:06d}", **cols))
    return make_cohort(patients, horizon)


@pytest.fixture(scope="session")
def binary_k2_cohort():
    return trajectories_cohort(all_binary_trajectories(2), horizon=3)


@pytest.fixture
def rng():
    return np.random.default_rng(20240917)
