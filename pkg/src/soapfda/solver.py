"""Alternating estimation of orthonormal empirical components from sparse curves.

The fit minimizes

    (1/n) sum_i (1/n_i) sum_j [y_ij - sum_m a_im psi_m(t_ij)]^2
        + sum_m gamma_m * int psi_m''(t)^2 dt

over per-subject scores a_im and components psi_m = coef_m' b(t), subject to
the components being orthonormal in L2. Components are extracted one at a
time (each holding the earlier ones fixed), then jointly refined in sweeps;
every score update is an exact per-subject least squares and every component
update is an exact minimization over its feasible set, so the recorded
objective trace is non-increasing.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import NamedTuple, Sequence

import numpy as np
from scipy import linalg as sla

from .basis import BasisSystem, eval_basis_matrix
from .core import FecModel, FitReport, LongitudinalDataset

# relative rank tolerance for per-subject score least squares
SCORE_RANK_TOL = 1e-10
# absolute singular-value floor for per-subject score designs: components are
# unit-norm functions, so their values are O(1) and a direction a subject sees
# below this level carries no usable information about it. Without the floor,
# subjects whose few observation times make the component values nearly
# collinear receive arbitrarily large scores and then dominate the component
# update through their squared-score weights.
SCORE_SINGULAR_FLOOR = 0.2
# rank tolerance for normal-equation component solves
_NORMAL_RANK_TOL = 1e-12
# accepted relative uphill movement attributable to floating point
_UPHILL_TOL = 1e-12


class SingularStepError(RuntimeError):
    """A least-squares step had no usable solution; the message names the cause."""


@dataclass(frozen=True)
class SolverOptions:
    """Iteration controls for the alternating fit.

    ``init_rule`` is one of ``svd_ridge`` (deterministic spectral start from
    per-subject ridge fits), ``first_basis`` (G-normalized basis functions),
    or ``user_supplied`` (``init_coef`` holds a vector or L x M matrix).
    ``rng_seed`` is reserved for randomized fallbacks; the default rules are
    fully deterministic and never draw from it.
    """

    max_inner_iters: int = 200
    max_outer_sweeps: int = 20
    rel_tol: float = 1e-7
    init_rule: str = "svd_ridge"
    rng_seed: int = 0
    init_coef: np.ndarray | None = None

    def __post_init__(self):
        if self.rel_tol <= 0:
            raise ValueError("rel_tol must be > 0")
        if self.max_inner_iters < 1 or self.max_outer_sweeps < 1:
            raise ValueError("iteration caps must be >= 1")
        if self.init_rule not in ("svd_ridge", "first_basis", "user_supplied"):
            raise ValueError(f"unknown init_rule {self.init_rule!r}")


class PenalizedStepResult(NamedTuple):
    beta: np.ndarray
    multiplier: float
    fallback: bool


# ---------------------------------------------------------------------------
# Workspace: design matrix, weights and per-subject row slices, built once
# per (dataset, basis) pair and shared across iterations and CV folds.
# ---------------------------------------------------------------------------


class _Workspace:
    def __init__(self, dataset: LongitudinalDataset, basis: BasisSystem):
        if tuple(dataset.domain) != tuple(basis.domain):
            raise ValueError(
                f"basis domain {basis.domain} does not match dataset domain {dataset.domain}"
            )
        self.dataset = dataset
        self.basis = basis
        sizes = np.array([s.n_obs for s in dataset.subjects])
        self.sizes = sizes
        self.offsets = np.concatenate([[0], np.cumsum(sizes)])
        self.t = np.concatenate([s.t for s in dataset.subjects])
        self.y = np.concatenate([s.y for s in dataset.subjects])
        self.subj_of_row = np.repeat(np.arange(len(sizes)), sizes)
        self.B = eval_basis_matrix(basis, self.t)
        self.w2 = np.repeat(1.0 / (len(sizes) * sizes), sizes)
        self._ridge_coefs: np.ndarray | None = None
        self._groups: list[tuple[np.ndarray, np.ndarray, np.ndarray]] | None = None

    @property
    def n(self) -> int:
        return len(self.sizes)

    def rows(self, i: int) -> slice:
        return slice(self.offsets[i], self.offsets[i + 1])

    def ridge_coefs(self) -> np.ndarray:
        """Per-subject basis coefficients from a small ridge fit (init cache)."""
        if self._ridge_coefs is None:
            L = self.basis.size
            lam = 1e-6 * np.trace(self.basis.gram)
            eye = lam * np.eye(L)
            out = np.empty((self.n, L))
            for i in range(self.n):
                Bi = self.B[self.rows(i)]
                out[i] = sla.solve(Bi.T @ Bi + eye, Bi.T @ self.y[self.rows(i)], assume_a="pos")
            self._ridge_coefs = out
        return self._ridge_coefs

    def size_groups(self):
        """Subjects grouped by observation count: (indices, designs, values).

        ``designs`` is (k, n_i, L) and ``values`` (k, n_i); built once and
        reused by every batched score step.
        """
        if self._groups is None:
            groups = []
            for size in np.unique(self.sizes):
                idx = np.flatnonzero(self.sizes == size)
                designs = np.stack([self.B[self.rows(i)] for i in idx])
                values = np.stack([self.y[self.rows(i)] for i in idx])
                groups.append((idx, designs, values))
            self._groups = groups
        return self._groups

    def drop_subject(self, i: int) -> "_Workspace":
        """Fold workspace with subject i removed; shares basis evaluations."""
        keep = np.ones(len(self.t), dtype=bool)
        keep[self.rows(i)] = False
        sub = object.__new__(_Workspace)
        sub.dataset = LongitudinalDataset(
            domain=self.dataset.domain,
            subjects=self.dataset.subjects[:i] + self.dataset.subjects[i + 1 :],
        )
        sub.basis = self.basis
        sub.sizes = np.delete(self.sizes, i)
        sub.offsets = np.concatenate([[0], np.cumsum(sub.sizes)])
        sub.t = self.t[keep]
        sub.y = self.y[keep]
        sub.subj_of_row = np.repeat(np.arange(len(sub.sizes)), sub.sizes)
        sub.B = self.B[keep]
        sub.w2 = np.repeat(1.0 / (len(sub.sizes) * sub.sizes), sub.sizes)
        sub._ridge_coefs = (
            None if self._ridge_coefs is None else np.delete(self._ridge_coefs, i, axis=0)
        )
        sub._groups = None
        return sub


def _minnorm_lstsq(a: np.ndarray, b: np.ndarray, cond: float) -> np.ndarray:
    sol, *_ = sla.lstsq(a, b, cond=cond, lapack_driver="gelsy", check_finite=False)
    return sol


def _solve_scores(values: np.ndarray, y: np.ndarray, floor: float) -> np.ndarray:
    """Minimum-norm least-squares scores with a truncated singular spectrum.

    Directions are kept when their singular value clears both the relative
    rank tolerance and the absolute floor (see SCORE_SINGULAR_FLOOR); the
    rule depends only on the component values, never on y, so score
    estimation stays exactly linear and scale-equivariant in the data.
    """
    u, s, vt = np.linalg.svd(values, full_matrices=False)
    if s.size == 0 or s[0] == 0.0:
        return np.zeros(values.shape[1])
    keep = s > max(SCORE_RANK_TOL * s[0], floor)
    if not np.any(keep):
        return np.zeros(values.shape[1])
    return vt[keep].T @ ((u[:, keep].T @ y) / s[keep])


def _loss(ws: _Workspace, coef, scores, gammas) -> tuple[float, float]:
    """Full objective and its residual part for the current state."""
    fit = ((scores[ws.subj_of_row]) * (ws.B @ coef)).sum(axis=1)
    resid = ws.y - fit
    base = float(ws.w2 @ (resid * resid))
    pen = 0.0
    for k in range(coef.shape[1]):
        pen += float(gammas[k]) * float(coef[:, k] @ ws.basis.penalty @ coef[:, k])
    return base + pen, base


# ---------------------------------------------------------------------------
# Public step operations.
# ---------------------------------------------------------------------------


def objective(dataset: LongitudinalDataset, model: FecModel) -> float:
    """Observed loss of the model on the dataset, including roughness penalties."""
    ws = _Workspace(dataset, model.basis)
    if model.scores.shape[0] != ws.n:
        raise ValueError("model scores do not match the dataset's subject count")
    full, _ = _loss(ws, model.coef, model.scores, model.gammas)
    return full


def score_step(
    dataset: LongitudinalDataset,
    fec_values: Sequence[np.ndarray],
    floor: float = SCORE_SINGULAR_FLOOR,
) -> np.ndarray:
    """Per-subject least-squares scores given component values at observation times.

    ``fec_values[i]`` holds the n_i x M matrix of component values at subject
    i's times. Rank-deficient or underdetermined systems (n_i < M, collinear
    columns) get the minimum-norm solution on the truncated spectrum.
    """
    if len(fec_values) != dataset.n_subjects:
        raise ValueError("need one value matrix per subject")
    m_cols = {np.atleast_2d(v).shape[1] for v in fec_values}
    if len(m_cols) != 1:
        raise ValueError(f"inconsistent component counts across subjects: {sorted(m_cols)}")
    out = np.empty((dataset.n_subjects, m_cols.pop()))
    for i, subject in enumerate(dataset.subjects):
        vals = np.atleast_2d(np.asarray(fec_values[i], dtype=float))
        if vals.shape[0] != subject.n_obs:
            raise ValueError(f"subject {subject.id}: {vals.shape[0]} rows for {subject.n_obs} observations")
        out[i] = _solve_scores(vals, subject.y, floor)
    return out


def _score_step_ws(
    ws: _Workspace,
    coef: np.ndarray,
    prev: np.ndarray | None = None,
    floor: float = SCORE_SINGULAR_FLOOR,
) -> np.ndarray:
    """Per-subject truncated least-squares scores under the current components.

    With ``prev`` given, each subject keeps its previous scores when those
    fit it at least as well under the current components: the truncation
    subspace can change between iterations as components rotate, and this
    guard is what keeps the recorded objective trace non-increasing. Guarded
    steps run batched over subjects with equal observation counts.

    Without ``prev`` (the final refit), the per-subject product is taken on
    the sliced rows so the result is bit-identical to projecting that
    subject's design alone: prediction reuses that exact computation.
    """
    if prev is not None:
        return _score_step_batched(ws, coef, prev, floor)
    out = np.empty((ws.n, coef.shape[1]))
    for i in range(ws.n):
        sl = ws.rows(i)
        psi_i = ws.B[sl] @ coef
        out[i] = _solve_scores(psi_i, ws.y[sl], floor)
    return out


def _score_step_batched(ws: _Workspace, coef, prev, floor: float) -> np.ndarray:
    out = np.empty((ws.n, coef.shape[1]))
    for idx, designs, values in ws.size_groups():
        psi = designs @ coef  # (k, n_i, M)
        u, s, vt = np.linalg.svd(psi, full_matrices=False)
        inv = np.zeros_like(s)
        np.divide(1.0, s, out=inv, where=s > np.maximum(SCORE_RANK_TOL * s[..., :1], floor))
        uy = np.matmul(u.transpose(0, 2, 1), values[..., None])[..., 0]
        sol = np.matmul(vt.transpose(0, 2, 1), (inv * uy)[..., None])[..., 0]
        r_new = values - np.matmul(psi, sol[..., None])[..., 0]
        r_old = values - np.matmul(psi, prev[idx][..., None])[..., 0]
        worse = np.einsum("ki,ki->k", r_new, r_new) > np.einsum("ki,ki->k", r_old, r_old)
        sol[worse] = prev[idx][worse]
        out[idx] = sol
    return out


def _psi_normal(ws: _Workspace, scores, coef, m: int) -> tuple[np.ndarray, np.ndarray]:
    """Normal matrix and right-hand side for updating component m.

    Rows of the implied design are w_ij * a_im * b(t_ij) with
    w_ij = 1/sqrt(n*n_i); the target is w_ij times the residual after
    subtracting every other component's contribution.
    """
    psi = ws.B @ coef
    s_rows = scores[ws.subj_of_row]
    alpha = s_rows[:, m]
    fit_others = (s_rows * psi).sum(axis=1) - alpha * psi[:, m]
    resid = ws.y - fit_others
    wa = ws.w2 * alpha
    ata = (ws.B * (wa * alpha)[:, None]).T @ ws.B
    rhs = ws.B.T @ (wa * resid)
    return (ata + ata.T) / 2.0, rhs


def _normalized_unconstrained(ata, rhs, gram) -> tuple[np.ndarray, float]:
    """Minimum-norm solve of the normal equations, scaled to unit G-norm.

    Returns (beta, s) with s the norm of the unscaled solution: rescaling
    the corresponding score column by s preserves the fitted values exactly,
    which is what makes this step monotone in the unpenalized objective.
    """
    btilde = _minnorm_lstsq(ata, rhs, cond=_NORMAL_RANK_TOL)
    nrm2 = float(btilde @ gram @ btilde)
    if not (nrm2 > 0 and np.isfinite(nrm2)):
        raise SingularStepError(
            "component update is identically zero "
            "(all scores zero, or observations do not span the basis support)"
        )
    s = math.sqrt(nrm2)
    return btilde / s, s


def _solve_norm_constrained(H, rhs, gram) -> tuple[np.ndarray, float, bool]:
    """Global minimizer of b'Hb - 2 rhs'b subject to b' gram b = 1.

    Reduces to a secular equation via the generalized eigenproblem
    H v = mu * gram * v: the stationarity system (H - lam*gram) b = rhs
    decouples, and the constraint function is strictly increasing in lam on
    (-inf, mu_1), so the root on that branch (which is the objective-minimal
    stationary point) is found by bisection plus safeguarded Newton polish.
    Returns (beta, lam, fallback); fallback=True means no root was bracketed
    (hard case: rhs orthogonal to the lowest eigenvector) and a scaled ridge
    solution is returned instead.
    """
    rhs_norm = float(np.linalg.norm(rhs))
    if rhs_norm == 0.0:
        raise SingularStepError("zero right-hand side in norm-constrained component step")
    mu, V = sla.eigh(H, gram)
    d = V.T @ rhs
    mu1 = mu[0]
    scale = max(abs(mu[0]), abs(mu[-1]), 1.0)
    nonzero = d != 0.0

    def coords(lam):
        # directions with zero rhs component contribute nothing, even at a pole
        z = np.zeros_like(d)
        z[nonzero] = d[nonzero] / (mu[nonzero] - lam)
        return z

    def constraint(lam):
        z = coords(lam)
        return float(z @ z)

    # bracket the root: expand right end toward the pole at mu1, left end away
    hi = None
    eps = 1e-3 * scale
    for _ in range(80):
        if constraint(mu1 - eps) > 1.0:
            hi = mu1 - eps
            break
        eps *= 0.5
        if eps < 1e-18 * scale:
            break
    if hi is None:
        return _ridge_fallback(H, rhs, gram)
    lo = None
    step = scale
    for _ in range(200):
        cand = mu1 - step
        if constraint(cand) < 1.0:
            lo = cand
            break
        step *= 2.0
    if lo is None:
        return _ridge_fallback(H, rhs, gram)

    for _ in range(90):
        mid = 0.5 * (lo + hi)
        if constraint(mid) < 1.0:
            lo = mid
        else:
            hi = mid
    lam = 0.5 * (lo + hi)
    for _ in range(4):  # Newton polish, kept inside the bracket
        z = coords(lam)
        f = float(z @ z) - 1.0
        fp = float(2.0 * np.sum(z[nonzero] ** 2 / (mu[nonzero] - lam)))
        if fp <= 0:
            break
        lam_new = lam - f / fp
        if lo < lam_new < hi:
            lam = lam_new
    beta = V @ coords(lam)
    nrm = math.sqrt(float(beta @ gram @ beta))
    return beta / nrm, lam, False


def _ridge_fallback(H, rhs, gram) -> tuple[np.ndarray, float, bool]:
    L = H.shape[0]
    eps = 1e-10 * max(float(np.trace(H)) / L, 1.0)
    try:
        beta = sla.solve(H + eps * np.eye(L), rhs, assume_a="sym")
    except sla.LinAlgError:
        beta = _minnorm_lstsq(H + eps * np.eye(L), rhs, cond=_NORMAL_RANK_TOL)
    nrm2 = float(beta @ gram @ beta)
    if not (nrm2 > 0 and np.isfinite(nrm2)):
        raise SingularStepError("norm-constrained step degenerate even under ridge fallback")
    return beta / math.sqrt(nrm2), math.nan, True


def psi_step_penalized(normal_matrix, rhs, gram, penalty, gamma: float) -> PenalizedStepResult:
    """Solve the (possibly penalized) norm-constrained component update.

    With gamma == 0 this returns the unconstrained minimizer scaled to unit
    G-norm (the scaling is absorbed by the paired score column, so the norm
    constraint costs nothing). With gamma > 0 the penalty breaks that scale
    invariance and the constrained problem is solved exactly through its
    secular equation; if no root can be bracketed, a G-normalized ridge
    solution is returned with ``fallback=True``.
    """
    if gamma < 0:
        raise ValueError("gamma must be >= 0")
    normal_matrix = np.asarray(normal_matrix, dtype=float)
    rhs = np.asarray(rhs, dtype=float)
    if gamma == 0:
        beta, _ = _normalized_unconstrained(normal_matrix, rhs, gram)
        return PenalizedStepResult(beta, 0.0, False)
    beta, lam, fb = _solve_norm_constrained(normal_matrix + gamma * penalty, rhs, gram)
    return PenalizedStepResult(beta, lam, fb)


def kkt_residual(normal_matrix, rhs, gram, penalty, gamma, beta, multiplier) -> float:
    """Norm of the stationarity residual (H - lam*G) beta - rhs."""
    H = np.asarray(normal_matrix) + gamma * np.asarray(penalty)
    return float(np.linalg.norm(H @ beta - multiplier * (gram @ beta) - rhs))


def _psi_update(ws: _Workspace, scores, coef, m: int, gamma: float):
    """Update component m with all other columns fixed.

    The new coefficient vector is constrained to be G-orthogonal to every
    other component (null-space reduction) and has exact unit G-norm.
    Returns (beta, score_scale, fallback).
    """
    gram, penalty = ws.basis.gram, ws.basis.penalty
    if not np.any(scores[:, m]):
        raise SingularStepError(f"all scores for component {m + 1} are zero")
    ata, rhs = _psi_normal(ws, scores, coef, m)
    others = np.delete(coef, m, axis=1)
    if others.shape[1]:
        Z = sla.null_space(others.T @ gram)
        ata, rhs = Z.T @ ata @ Z, Z.T @ rhs
        gram_r, penalty_r = Z.T @ gram @ Z, Z.T @ penalty @ Z
    else:
        Z = None
        gram_r, penalty_r = gram, penalty
    if gamma == 0:
        beta, s = _normalized_unconstrained(ata, rhs, gram_r)
        fallback = False
    else:
        beta, _, fallback = _solve_norm_constrained(ata + gamma * penalty_r, rhs, gram_r)
        s = 1.0
    if Z is not None:
        beta = Z @ beta
    beta = beta / math.sqrt(float(beta @ gram @ beta))
    return beta, s, fallback


def psi_step_first(dataset: LongitudinalDataset, scores, basis: BasisSystem) -> np.ndarray:
    """Unpenalized update of a single component from its score vector.

    Solves the weighted least squares over basis coefficients and scales the
    result to unit G-norm. Raises ``SingularStepError`` when the design is
    degenerate (all scores zero, or no observation overlaps the basis).
    """
    scores = np.asarray(scores, dtype=float).reshape(-1, 1)
    ws = _Workspace(dataset, basis)
    if scores.shape[0] != ws.n:
        raise ValueError("score vector length does not match subject count")
    beta, _, _ = _psi_update(ws, scores, np.zeros((basis.size, 1)), 0, 0.0)
    return beta


def psi_step_orthogonal(
    dataset: LongitudinalDataset,
    scores,
    basis: BasisSystem,
    fixed_coefs,
    gamma: float = 0.0,
) -> np.ndarray:
    """Update the last-scored component subject to orthogonality with fixed ones.

    ``scores`` has one column per fixed component plus a final column for the
    target; ``fixed_coefs`` is L x (m-1) and must be G-orthonormal. The
    equality constraints are eliminated by parametrizing over the
    G-orthogonal complement of the fixed components, after which the reduced
    problem is solved and scaled to unit norm (penalized exactly when
    gamma > 0).
    """
    scores = np.asarray(scores, dtype=float)
    fixed = np.asarray(fixed_coefs, dtype=float)
    if fixed.ndim == 1:
        fixed = fixed[:, None]
    if fixed.size:
        err = np.max(np.abs(fixed.T @ basis.gram @ fixed - np.eye(fixed.shape[1])))
        if err > 1e-6:
            raise ValueError(f"fixed components are not G-orthonormal (error {err:.2e})")
    k = fixed.shape[1] if fixed.size else 0
    if scores.ndim != 2 or scores.shape[1] != k + 1:
        raise ValueError(f"scores must have {k + 1} columns (fixed components plus target)")
    ws = _Workspace(dataset, basis)
    coef = np.column_stack([fixed, np.zeros(basis.size)]) if k else np.zeros((basis.size, 1))
    beta, _, _ = _psi_update(ws, scores, coef, k, gamma)
    return beta


# ---------------------------------------------------------------------------
# Full fits.
# ---------------------------------------------------------------------------


def _orthonormal_against(v: np.ndarray, fixed: np.ndarray, gram: np.ndarray) -> np.ndarray | None:
    """G-normalize v after projecting out the fixed components; None if degenerate."""
    u = v.copy()
    for _ in range(2):  # repeated Gram-Schmidt for numerical orthogonality
        if fixed.shape[1]:
            u -= fixed @ (fixed.T @ (gram @ u))
    nrm2 = float(u @ gram @ u)
    if nrm2 > 1e-16 * max(1.0, float(v @ gram @ v)):
        return u / math.sqrt(nrm2)
    return None


def _init_candidates(ws: _Workspace, opts: SolverOptions, m: int):
    if opts.init_rule == "user_supplied" and opts.init_coef is not None:
        arr = np.asarray(opts.init_coef, dtype=float)
        if arr.ndim == 1:
            arr = arr[:, None]
        if arr.shape[0] != ws.basis.size:
            raise ValueError("init_coef rows do not match basis size")
        if m < arr.shape[1]:
            yield "user_supplied", arr[:, m].copy()
    if opts.init_rule in ("svd_ridge", "user_supplied"):
        coefs = ws.ridge_coefs()
        _, _, vt = np.linalg.svd(coefs, full_matrices=False)
        for row in vt:
            yield "svd_ridge", row.copy()
    for j in range(ws.basis.size):
        e = np.zeros(ws.basis.size)
        e[j] = 1.0
        yield "first_basis", e


def _stage_inits(ws: _Workspace, opts: SolverOptions, fixed: np.ndarray) -> list[np.ndarray]:
    """Distinct starting vectors for one component stage, one per init family.

    The alternation is a local method, so each extraction is started from
    every available family (user vector, leading ridge-SVD direction,
    first viable basis function) and the best final objective wins.
    """
    gram = ws.basis.gram
    inits: list[np.ndarray] = []
    seen_rules: set[str] = set()
    for rule, v in _init_candidates(ws, opts, fixed.shape[1]):
        if rule in seen_rules:
            continue
        u = _orthonormal_against(v, fixed, gram)
        if u is None:
            continue
        if any(abs(float(u @ gram @ w)) > 1.0 - 1e-8 for w in inits):
            seen_rules.add(rule)
            continue
        inits.append(u)
        seen_rules.add(rule)
    if not inits:
        raise SingularStepError("no usable initial direction orthogonal to fixed components")
    return inits


def _extract_stage(ws: _Workspace, coef, scores, gammas, opts: SolverOptions):
    """Append and fit one more component, starting from every init family.

    ``coef`` holds the already-fitted components (kept fixed as constraints
    during this stage); the run with the lowest final objective wins.
    Returns (coef, scores, converged, cycles, n_fallbacks, trace_segment).
    """
    m = coef.shape[1]
    best = None
    last_error: SingularStepError | None = None
    for beta0 in _stage_inits(ws, opts, coef):
        segment: list[float] = []
        try:
            result = _alternate(
                ws,
                np.column_stack([coef, beta0]),
                np.column_stack([scores, np.zeros(ws.n)]),
                m,
                gammas,
                opts,
                segment,
            )
        except SingularStepError as exc:
            last_error = exc
            continue
        final = segment[-1] if segment else math.inf
        if best is None or final < best[0]:
            best = (final, result, segment)
    if best is None:
        if last_error is not None:
            raise last_error
        raise SingularStepError(f"component {m + 1}: every start failed")
    _, (coef, scores, conv, cycles, fb), segment = best
    return coef, scores, conv, cycles, fb, segment


def _alternate(ws, coef, scores, m, gammas, opts, trace):
    """Alternate joint score steps with updates of component m until converged.

    Returns (coef, scores, converged, n_cycles, n_fallbacks). Component
    updates that would move the objective uphill beyond floating-point noise
    are rejected and treated as convergence at the numerical floor.
    """
    prev_cycle = None
    converged = False
    n_fb = 0
    cycles = 0
    for it in range(opts.max_inner_iters):
        cycles += 1
        scores = _score_step_ws(ws, coef, prev=scores)
        full, _ = _loss(ws, coef, scores, gammas)
        trace.append(full)
        try:
            beta, s, fb = _psi_update(ws, scores, coef, m, gammas[m])
        except SingularStepError as exc:
            raise SingularStepError(f"component {m + 1}, iteration {it + 1}: {exc}") from exc
        n_fb += int(fb)
        new_coef = coef.copy()
        new_coef[:, m] = beta
        new_scores = scores.copy()
        new_scores[:, m] = scores[:, m] * s
        new_full, _ = _loss(ws, new_coef, new_scores, gammas)
        if new_full > full + _UPHILL_TOL * max(1.0, full):
            converged = True  # stalled at the numerical floor; keep previous iterate
            break
        coef, scores = new_coef, new_scores
        trace.append(new_full)
        if prev_cycle is not None and abs(prev_cycle - new_full) <= opts.rel_tol * max(
            1.0, abs(prev_cycle)
        ):
            converged = True
            break
        prev_cycle = new_full
    return coef, scores, converged, cycles, n_fb


def _fix_signs(ws: _Workspace, coef: np.ndarray) -> np.ndarray:
    """Flip each component so its integral (or midpoint value) is nonnegative."""
    q = ws.basis.gram @ np.ones(ws.basis.size)
    mid = eval_basis_matrix(ws.basis, [(ws.basis.domain[0] + ws.basis.domain[1]) / 2.0])[0]
    out = coef.copy()
    for m in range(coef.shape[1]):
        integral = float(coef[:, m] @ q)
        pivot = integral if abs(integral) > 1e-12 else float(coef[:, m] @ mid)
        if pivot < 0:
            out[:, m] = -out[:, m]
    return out


def fit_soap(
    dataset: LongitudinalDataset,
    basis: BasisSystem,
    n_components: int,
    gammas,
    opts: SolverOptions | None = None,
) -> FecModel:
    """Fit M orthonormal components and per-subject scores to sparse curves.

    Components are extracted sequentially: component m is alternated to
    convergence with components 1..m-1 fixed (and is constrained orthogonal
    to them), trying one start per init family and keeping the best. With
    M >= 2, refinement sweeps then re-optimize each component in turn
    against all the others, with a joint score refit after every component
    update, until the full objective's relative change drops below
    ``opts.rel_tol`` or ``opts.max_outer_sweeps`` is hit.

    ``gammas`` is a scalar or a length-M sequence of roughness penalty
    weights. The returned model has G-orthonormal coefficient columns, a
    sign convention of nonnegative component integrals, scores from a final
    joint refit, and ``noise_var`` set to the mean squared residual.
    """
    if opts is None:
        opts = SolverOptions()
    if n_components < 1:
        raise ValueError("need at least one component")
    if n_components > basis.size:
        raise ValueError(f"cannot fit {n_components} components in a basis of size {basis.size}")
    gam = np.asarray(gammas, dtype=float)
    if gam.ndim == 0:
        gam = np.full(n_components, float(gam))
    if gam.shape != (n_components,):
        raise ValueError(f"expected {n_components} gamma values, got shape {gam.shape}")
    if np.any(gam < 0):
        raise ValueError("gammas must be >= 0")

    ws = _Workspace(dataset, basis)
    coef = np.zeros((basis.size, 0))
    scores = np.zeros((ws.n, 0))
    trace: list[float] = []
    stage_offsets: list[int] = []
    n_fb = 0
    all_converged = True
    inner_cycles = 0

    for m in range(n_components):
        stage_offsets.append(len(trace))
        coef, scores, conv, cycles, fb, segment = _extract_stage(
            ws, coef, scores, gam[: m + 1], opts
        )
        trace.extend(segment)
        all_converged &= conv
        inner_cycles += cycles
        n_fb += fb

    sweep_objectives: list[float] = []
    n_sweeps = 0
    if n_components > 1:
        prev = trace[-1]
        refined = False
        for _ in range(opts.max_outer_sweeps):
            n_sweeps += 1
            for m in range(n_components):
                try:
                    beta, s, fb = _psi_update(ws, scores, coef, m, gam[m])
                except SingularStepError as exc:
                    raise SingularStepError(f"refinement of component {m + 1}: {exc}") from exc
                n_fb += int(fb)
                new_coef = coef.copy()
                new_coef[:, m] = beta
                new_scores = scores.copy()
                new_scores[:, m] = scores[:, m] * s
                full_before, _ = _loss(ws, coef, scores, gam)
                full_after, _ = _loss(ws, new_coef, new_scores, gam)
                if full_after <= full_before + _UPHILL_TOL * max(1.0, full_before):
                    coef, scores = new_coef, new_scores
                    trace.append(full_after)
                scores = _score_step_ws(ws, coef, prev=scores)
                full, _ = _loss(ws, coef, scores, gam)
                trace.append(full)
            cur = trace[-1]
            sweep_objectives.append(cur)
            if abs(prev - cur) <= opts.rel_tol * max(1.0, abs(prev)):
                refined = True
                break
            prev = cur
        all_converged &= refined

    # Finalize with pure projections: the returned scores are exactly the
    # per-subject least-squares projections onto the final components (the
    # same computation `predict.project_scores` performs), not the guarded
    # iterates, so fitting and prediction agree bitwise on training data.
    coef = _fix_signs(ws, coef)
    scores = _score_step_ws(ws, coef)
    _, base = _loss(ws, coef, scores, gam)

    report = FitReport(
        loss_trace=tuple(trace),
        converged=bool(all_converged),
        n_sweeps=n_sweeps if n_components > 1 else inner_cycles,
        tolerance_used=opts.rel_tol,
        sweep_objectives=tuple(sweep_objectives),
        stage_offsets=tuple(stage_offsets),
        n_fallbacks=n_fb,
    )
    return FecModel(
        basis=basis,
        coef=coef,
        scores=scores,
        gammas=gam,
        noise_var=base,
        report=report,
    )


def fit_first_fec(
    dataset: LongitudinalDataset,
    basis: BasisSystem,
    gamma: float = 0.0,
    opts: SolverOptions | None = None,
) -> tuple[np.ndarray, np.ndarray, FitReport]:
    """Fit the leading component only; returns (coef vector, score column, report)."""
    model = fit_soap(dataset, basis, 1, [gamma], opts)
    return model.coef[:, 0], model.scores[:, 0], model.report
