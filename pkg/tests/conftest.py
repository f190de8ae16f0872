import numpy as np
import pytest

from latentreg.data import Group, GroupedData, ObservationSet
from latentreg.rng import stream


@pytest.fixture
def three_rows():
    return ObservationSet([0.0, 1.0, 2.0], [0.0, 1.0, 2.0], np.sqrt([0.5, 0.5, 0.5]))


def hetero_sample(n=2000, seed=0, beta=1.5, beta_sigma=0.0, mu_dep=0.0):
    """mu | sigma normal with optional mean dependence; sigma log-uniform on [.2, 1]."""
    rng = stream(seed, 99)
    ls = rng.uniform(np.log10(0.2), 0.0, n)
    sigma = 10.0**ls
    mu = mu_dep * ls + rng.standard_normal(n)
    x = mu + sigma * rng.standard_normal(n)
    y = 0.5 + beta * mu + beta_sigma * ls + rng.standard_normal(n)
    return ObservationSet(y, x, sigma), mu


def grouped_sample(seed=0, n_groups=30, z="none", sizes=(2, 7)):
    rng = np.random.default_rng(seed)
    groups = []
    for g in range(n_groups):
        size = int(rng.integers(sizes[0], sizes[1] + 1))
        mu = rng.normal()
        x = mu + rng.normal(size=size)
        if z == "teacher":
            zz = np.repeat(rng.normal(size=(1, 2)), size, axis=0)
        elif z == "student":
            zz = rng.normal(size=(size, 2))
        else:
            zz = None
        y = 0.3 + 1.2 * mu + rng.normal(size=size)
        if zz is not None:
            y = y + zz @ np.array([0.5, -0.25])
        groups.append(Group(f"t{g:03d}", y, x, zz))
    return GroupedData(tuple(groups))
