"""Shared oracles and fixtures-in-code for the test suite."""

import numpy as np


def dense_grid(n: int) -> np.ndarray:
    """All cells of an n^3 cube, x slowest."""
    g = np.arange(n)
    return np.stack(np.meshgrid(g, g, g, indexing="ij"), -1).reshape(-1, 3)


# Central differences on an O(10) loss carry roughly 50*eps*|f|/h absolute error:
# ~5e-10 at h = 1e-5 and ~5e-11 at h = 1e-4 (measured; it scales as 1/h, so it is
# roundoff, not truncation). Composite checks therefore use the largest allowed
# step, and gradient entries below the floor are compared on an absolute scale.
COMPOSITE_STEP = 1e-4
ROUNDOFF_FLOOR = 1e-6
