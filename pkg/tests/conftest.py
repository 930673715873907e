import numpy as np
import pytest

from parabolic_eqflux.mesh import MeshHierarchy, bisect, coarsen, unit_square


@pytest.fixture
def rng():
    return np.random.default_rng(20240611)


def changing_hierarchy(level=2, steps=4, seed=0):
    """Meshes that refine at some steps and coarsen at others."""
    rng = np.random.default_rng(seed)
    m = unit_square(level)
    meshes = [m]
    for n in range(steps):
        if n % 2 == 0:
            m = bisect(m, rng.random(m.num_cells) < 0.3)
        else:
            m = coarsen(m, rng.random(m.num_cells) < 0.7)
        meshes.append(m)
    return MeshHierarchy(meshes)


def fe_callable(space, coeffs):
    """Pointwise evaluation of an FE function as ``g(x)`` for x of shape (..., 2)."""
    def g(x):
        x = np.asarray(x, dtype=float)
        return space.evaluate(coeffs, x.reshape(-1, 2)).reshape(x.shape[:-1])
    return g
