import csv
from pathlib import Path

import numpy as np
import pytest

from mvfilter.config import DataSettings, SamplerSettings, load_config
from mvfilter.data import Dataset, load_dataset

REPO = Path(__file__).resolve().parents[1]


@pytest.fixture(scope="session")
def epilepsy():
    settings = DataSettings(path="", response="count", grouping_factors=("patient", "visit", "obs"))
    return load_dataset(REPO / "data" / "epilepsy.csv", settings)


@pytest.fixture(scope="session")
def part1_config():
    return load_config(REPO / "configs" / "epilepsy_part1.yaml")


def make_dataset(y, columns=None, groups=None, response="y"):
    """Small in-memory dataset helper for model tests."""
    y = np.asarray(y, dtype=np.float64)
    cols = {response: y}
    if columns:
        cols.update({k: np.asarray(v, dtype=np.float64) for k, v in columns.items()})
    group_codes, group_levels = {}, {}
    if groups:
        for name, codes in groups.items():
            codes = np.asarray(codes, dtype=np.int64)
            group_codes[name] = codes
            group_levels[name] = list(range(1, int(codes.max()) + 2))
    return Dataset(
        n_obs=len(y),
        columns=cols,
        response=response,
        group_codes=group_codes,
        group_levels=group_levels,
    )


@pytest.fixture()
def funnel_dataset():
    """Balanced two-per-group dataset: all group means equal, wide noise.

    The group deviations carry no information, so the group-scale
    posterior funnels towards zero; a centred parameterisation breaks down
    while the non-centred one samples cleanly.
    """
    G, delta = 8, 20.0
    codes = np.repeat(np.arange(G), 2)
    yv = np.tile([-delta, delta], G)
    return make_dataset(yv, groups={"school": codes})


def write_csv_dataset(path, header, rows):
    with open(path, "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(header)
        w.writerows(rows)


def fast_sampler(seed=1, chains=2, warmup=300, sampling=300, **kw):
    return SamplerSettings(chains=chains, warmup_iters=warmup, sampling_iters=sampling, seed=seed, **kw)
