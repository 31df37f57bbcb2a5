import numpy as np
import pytest

from soapfda import make_bspline_basis, validate_dataset
from soapfda.basis import eval_basis_matrix


def orthonormal_pair_in_span(basis, rng):
    """Two G-orthonormal coefficient vectors inside the basis span."""
    G = basis.gram
    c1 = rng.normal(size=basis.size)
    c1 = c1 / np.sqrt(c1 @ G @ c1)
    c2 = rng.normal(size=basis.size)
    c2 = c2 - (c1 @ G @ c2) * c1
    c2 = c2 / np.sqrt(c2 @ G @ c2)
    return c1, c2


def dense_rank2_dataset(basis, n, grid, scores, coef_pair):
    """Noise-free fully observed curves from two in-span components."""
    B = eval_basis_matrix(basis, grid)
    f1, f2 = B @ coef_pair[0], B @ coef_pair[1]
    X = np.outer(scores[:, 0], f1) + np.outer(scores[:, 1], f2)
    rows = [
        (f"s{i:03d}", float(grid[j]), float(X[i, j]))
        for i in range(n)
        for j in range(len(grid))
    ]
    return validate_dataset(rows, basis.domain), X


@pytest.fixture
def cubic_basis():
    return make_bspline_basis((0.0, 1.0), 8, 4)


@pytest.fixture
def rng():
    return np.random.default_rng(20240817)
