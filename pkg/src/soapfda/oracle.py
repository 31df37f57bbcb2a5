"""Dense-grid reference: eigenfunctions of the uncentered sample covariance.

For fully observed noise-free curves, the optimal approximating orthonormal
functions are the leading eigenfunctions of K(s,t) = (1/n) sum_i x_i(s)x_i(t);
this module computes them by quadrature-weighted eigen-decomposition and is
used as the ground-truth oracle against the sparse fit.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .core import DataValidationError, FecModel


@dataclass(frozen=True)
class DenseCurveSet:
    """n curves fully observed on a common equally spaced grid."""

    grid: np.ndarray
    curves: np.ndarray  # (n, Q)

    def __post_init__(self):
        grid, curves = self.grid, self.curves
        if grid.ndim != 1 or len(grid) < 2:
            raise ValueError("grid must be 1-D with at least two points")
        steps = np.diff(grid)
        if np.any(steps <= 0):
            raise ValueError("grid must be strictly increasing")
        h = (grid[-1] - grid[0]) / (len(grid) - 1)
        if not np.allclose(steps, h, rtol=1e-8, atol=1e-12 * max(1.0, abs(h))):
            raise ValueError("grid must be equally spaced")
        if curves.ndim != 2 or curves.shape[1] != len(grid):
            raise ValueError(f"curves must be (n, {len(grid)}), got {curves.shape}")
        grid.setflags(write=False)
        curves.setflags(write=False)

    @property
    def n_curves(self) -> int:
        return self.curves.shape[0]


def trapezoid_weights(grid) -> np.ndarray:
    """Trapezoid quadrature weights: h everywhere, h/2 at the endpoints."""
    grid = np.asarray(grid, dtype=float)
    h = (grid[-1] - grid[0]) / (len(grid) - 1)
    w = np.full(len(grid), h)
    w[0] = w[-1] = h / 2.0
    return w


def uncentered_cov(curve_set: DenseCurveSet) -> np.ndarray:
    """K[p, q] = (1/n) sum_i x_i(t_p) x_i(t_q); symmetric PSD."""
    X = curve_set.curves
    K = X.T @ X / curve_set.n_curves
    return (K + K.T) / 2.0


def grid_eigenfunctions(K, grid, n_components: int) -> tuple[np.ndarray, np.ndarray]:
    """Leading eigenfunctions of the covariance operator on the grid.

    Solves the quadrature-weighted symmetric problem W^(1/2) K W^(1/2) and
    maps eigenvectors back so that sum_p w_p psi(t_p)^2 = 1. Returns
    (values, eigenvalues) with values of shape (Q, M), eigenvalues
    descending.
    """
    grid = np.asarray(grid, dtype=float)
    K = np.asarray(K, dtype=float)
    Q = len(grid)
    if n_components > Q:
        raise ValueError(f"cannot extract {n_components} eigenfunctions from a {Q}-point grid")
    if K.shape != (Q, Q):
        raise ValueError(f"covariance shape {K.shape} does not match grid length {Q}")
    w = trapezoid_weights(grid)
    sw = np.sqrt(w)
    A = sw[:, None] * K * sw[None, :]
    vals, vecs = np.linalg.eigh((A + A.T) / 2.0)
    order = np.argsort(vals)[::-1][:n_components]
    eigenvalues = vals[order]
    funcs = vecs[:, order] / sw[:, None]
    return funcs, eigenvalues


def sign_aligned_imse(f_hat, f_ref, grid) -> float:
    """min over signs of the trapezoid integral of (f_hat -+ f_ref)^2."""
    f_hat = np.asarray(f_hat, dtype=float)
    f_ref = np.asarray(f_ref, dtype=float)
    grid = np.asarray(grid, dtype=float)
    if f_hat.shape != f_ref.shape or f_hat.shape != grid.shape:
        raise ValueError("functions and grid must share one shape")
    same = np.trapezoid((f_hat - f_ref) ** 2, grid)
    flip = np.trapezoid((f_hat + f_ref) ** 2, grid)
    return float(min(same, flip))


def compare_to_soap(model: FecModel, oracle_values, grid) -> np.ndarray:
    """Per-component sign-aligned IMSE between fitted and oracle components."""
    grid = np.asarray(grid, dtype=float)
    oracle_values = np.asarray(oracle_values, dtype=float)
    if oracle_values.ndim != 2 or oracle_values.shape[0] != len(grid):
        raise ValueError("oracle values must be (len(grid), M)")
    fitted = model.component_values(grid)
    n_cmp = min(fitted.shape[1], oracle_values.shape[1])
    return np.array(
        [sign_aligned_imse(fitted[:, m], oracle_values[:, m], grid) for m in range(n_cmp)]
    )


def dense_curves_from_rows(rows) -> DenseCurveSet:
    """Assemble a DenseCurveSet from (id, t, y) triples sharing one grid.

    Subjects are ordered by id; every subject must be observed on the same
    strictly increasing, equally spaced grid.
    """
    by_subject: dict[str, list[tuple[float, float]]] = {}
    for sid, t, y in rows:
        by_subject.setdefault(str(sid), []).append((float(t), float(y)))
    if not by_subject:
        raise DataValidationError("empty input: no observation rows")
    ids = sorted(by_subject)
    grid = None
    curves = []
    for sid in ids:
        pairs = sorted(by_subject[sid], key=lambda p: p[0])
        t = np.array([p[0] for p in pairs])
        y = np.array([p[1] for p in pairs])
        if grid is None:
            grid = t
        elif len(t) != len(grid) or not np.allclose(t, grid, rtol=0, atol=1e-12):
            raise DataValidationError(f"subject {sid} is not observed on the common grid")
        curves.append(y)
    return DenseCurveSet(grid=grid, curves=np.vstack(curves))
