from __future__ import annotations

import numpy as np
import pytest

from policy_phases.dataset import Episode, FeatureSchema, TrajectoryDataset


def dataset_from_lengths(lengths, ds=1, da=1, seed=0):
    """Random dataset with the given episode lengths (labels are supplied separately)."""
    rng = np.random.default_rng(seed)
    eps = tuple(
        Episode(e, rng.normal(size=(n, ds)), rng.normal(size=(n, da))) for e, n in enumerate(lengths)
    )
    return TrajectoryDataset(eps, FeatureSchema.generic(ds, da))


@pytest.fixture
def tiny_dataset():
    return dataset_from_lengths([3, 3], ds=2, da=1)


def pytest_terminal_summary(terminalreporter):
    from ._report import RESULTS

    if RESULTS:
        terminalreporter.section("acceptance criteria")
        for line in RESULTS:
            terminalreporter.write_line(line)
