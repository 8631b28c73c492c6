import os

import numpy as np
import pytest

from drcurve import simulate as sim

# Keep worker pools matched to the machine; the studies are deterministic
# regardless of the worker count.
JOBS = min(2, os.cpu_count() or 1)


@pytest.fixture(scope="session")
def truth():
    return sim.truth_curves()


@pytest.fixture(scope="session")
def coverage_500(truth):
    """Shared 500-replication fixed-bandwidth experiment at a=8, h=1.2.

    Used both for interval coverage and for checking the asymptotic
    variance formula against the empirical spread of the estimates.
    """
    return sim.coverage_study(
        n=1000, replications=500, h=1.2, a=8.0, base_seed=7_000, jobs=JOBS
    )


# The three desk-scale replication cells used by the acceptance suite.
# The same datasets (same base seed) are analyzed under each correctness
# configuration, mirroring the usual study design.
_TABLE_SEED = 100
_TABLE_REPS = 200


@pytest.fixture(scope="session")
def table_both():
    return sim.run_study(
        sim.SimConfig(
            n=1000,
            replications=_TABLE_REPS,
            base_seed=_TABLE_SEED,
            bandwidth_mode="both",
            jobs=JOBS,
        )
    )


@pytest.fixture(scope="session")
def table_treatment_correct():
    return sim.run_study(
        sim.SimConfig(
            n=1000,
            replications=_TABLE_REPS,
            base_seed=_TABLE_SEED,
            outcome_model="misspecified",
            jobs=JOBS,
        )
    )


@pytest.fixture(scope="session")
def table_outcome_correct():
    return sim.run_study(
        sim.SimConfig(
            n=1000,
            replications=_TABLE_REPS,
            base_seed=_TABLE_SEED,
            treatment_model="misspecified",
            jobs=JOBS,
        )
    )


def rng(seed: int) -> np.random.Generator:
    return np.random.default_rng(seed)
