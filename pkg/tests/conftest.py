import numpy as np
import pytest

from spectomo.linops import KroneckerMap, RadonGeometry, RayRadon
from spectomo.spectral import SqrtLossMap


def make_weighted_instance(seed=0, side=16, n_views=12, n_det=None, n_mat=2,
                           n_bins=2, weight_spread=(0.5, 2.0), mix=None):
    """Small spectral least-squares instance with dense-checkable pieces.

    Pass an explicit ``mix`` to control conditioning; the random default can
    be nearly singular.
    """
    rng = np.random.default_rng(seed)
    if n_det is None:
        n_det = int(1.5 * side) // 2 * 2 + 1
    geom = RadonGeometry.uniform(side, n_views, n_det)
    radon = RayRadon(geom)
    if mix is None:
        mix = rng.uniform(0.2, 1.0, size=(n_bins, n_mat))
    else:
        mix = np.asarray(mix, dtype=float)
    A = KroneckerMap(mix, radon)
    w = rng.uniform(*weight_spread, A.rows)
    B = SqrtLossMap(A, w)
    return geom, radon, A, B, rng


WELL_CONDITIONED_MIX = np.array([[1.0, 0.3], [0.25, 0.9]])


@pytest.fixture
def weighted_instance():
    return make_weighted_instance()
