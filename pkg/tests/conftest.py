import numpy as np
import pytest

from swmrs.data import TrialDataset


def random_trial(rng, I=None, J=None, binary=False, min_size=1, max_size=8, n_cov=2,
                 empty_cells=False, loco_safe=False):
    """Small random stepped-wedge trial with a valid rollout.

    Some cluster adopts at period 2 and some at J, so every rollout period
    has both arms. With loco_safe two clusters adopt at each end, so both
    arms survive dropping any single cluster.
    """
    J = int(rng.integers(3, 7)) if J is None else J
    lo = J + 3 if loco_safe else 4
    I = int(rng.integers(lo, lo + 9)) if I is None else I
    steps = np.arange(2, J + 1)
    base = steps if I >= len(steps) else np.array([2, J])
    if loco_safe:
        base = np.concatenate([base, [2, J]])
    adoption = np.concatenate([base, rng.choice(steps, I - len(base))])
    adoption = rng.permutation(adoption)
    N = rng.integers(min_size, max_size + 1, size=(I, J))
    if empty_cells:
        N[:, 0] = np.where(rng.random(I) < 0.3, 0, N[:, 0])
    cl = np.repeat(np.repeat(np.arange(I), J), N.ravel())
    pe = np.repeat(np.tile(np.arange(1, J + 1), I), N.ravel())
    n = cl.size
    z = (pe >= adoption[cl]).astype(int)
    X = rng.normal(size=(n, n_cov))
    eta = 0.3 * pe / J + 0.8 * z + X @ np.linspace(0.5, -0.3, n_cov) + rng.normal(0, 0.5, I)[cl]
    if binary:
        y = (rng.random(n) < 1 / (1 + np.exp(-eta))).astype(float)
    else:
        y = eta + rng.normal(size=n)
    return TrialDataset.from_arrays(cl, pe, z, y, X)


@pytest.fixture
def rng():
    return np.random.default_rng(20240611)


def toy_trial():
    """I=4, J=3; clusters 1,2 adopt at period 2, clusters 3,4 at period 3.

    Period-2 cell means: treated 3 and 5, control 1 and 2, two rows each.
    """
    rows = []
    means = {1: 3.0, 2: 5.0, 3: 1.0, 4: 2.0}
    adopt = {1: 2, 2: 2, 3: 3, 4: 3}
    for c in (1, 2, 3, 4):
        for j in (1, 2, 3):
            m = means[c] if j == 2 else 0.0
            for y in (m - 0.5, m + 0.5):
                rows.append((c, j, int(j >= adopt[c]), y))
    c, j, z, y = map(np.array, zip(*rows))
    return TrialDataset.from_arrays(c, j, z, y)
