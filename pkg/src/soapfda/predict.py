"""Score projection for new subjects, trajectory reconstruction, and the
held-out-last-observation evaluation protocol."""

from __future__ import annotations

import warnings
from dataclasses import dataclass

import numpy as np

from .basis import BasisSystem
from .core import FecModel, LongitudinalDataset, Subject
from .solver import SCORE_SINGULAR_FLOOR, SolverOptions, _solve_scores, fit_soap


@dataclass(frozen=True)
class TrajectoryEstimate:
    """Reconstructed trajectory: values = component_values(grid) @ scores."""

    subject_id: str
    grid: np.ndarray
    values: np.ndarray
    scores: np.ndarray


@dataclass(frozen=True)
class MspeReport:
    """Held-out-last-observation results across eligible test subjects."""

    mspe_mean: float
    mspe_median: float
    n_eligible: int
    n_excluded: int
    per_subject: tuple[tuple[str, float], ...]

    def to_dict(self) -> dict:
        return {
            "mspe_mean": self.mspe_mean,
            "mspe_median": self.mspe_median,
            "n_eligible": self.n_eligible,
            "n_excluded": self.n_excluded,
            "per_subject": [{"subject_id": sid, "sq_error": e} for sid, e in self.per_subject],
        }


def project_scores(
    subject: Subject, model: FecModel, floor: float = SCORE_SINGULAR_FLOOR
) -> np.ndarray:
    """Least-squares scores for a subject from its observations.

    Uses the same truncated minimum-norm rule as the fitting score step, so
    projecting a training subject reproduces its fitted scores exactly. If
    every component is zero at all of the subject's times there is nothing
    to project onto: the scores are zero and a warning is issued.
    """
    psi = model.component_values(subject.t)
    if not np.any(psi):
        warnings.warn(
            f"subject {subject.id}: all components vanish at its observation times; "
            "returning zero scores",
            stacklevel=2,
        )
        return np.zeros(model.n_components)
    return _solve_scores(psi, subject.y, floor)


def reconstruct(model: FecModel, scores, grid, subject_id: str = "") -> TrajectoryEstimate:
    """Linear combination of the fitted components on the grid."""
    scores = np.asarray(scores, dtype=float)
    if scores.shape != (model.n_components,):
        raise ValueError(f"expected {model.n_components} scores, got shape {scores.shape}")
    grid = np.asarray(grid, dtype=float)
    values = model.component_values(grid) @ scores
    return TrajectoryEstimate(subject_id=subject_id, grid=grid, values=values, scores=scores)


def predict_trajectory(subject: Subject, model: FecModel, grid) -> TrajectoryEstimate:
    """Project a subject's scores and reconstruct it on the grid."""
    scores = project_scores(subject, model)
    return reconstruct(model, scores, grid, subject_id=subject.id)


def default_grid(domain: tuple[float, float], size: int = 101) -> np.ndarray:
    return np.linspace(domain[0], domain[1], size)


def holdout_last_mspe_model(model: FecModel, test: LongitudinalDataset) -> MspeReport:
    """Apply the held-out-last protocol to test subjects under a fitted model.

    For each subject with at least two observations, the final observation
    (largest time; exact ties resolve to the later input row) is removed,
    scores are projected from the remainder, and the squared error of the
    prediction at the dropped time is recorded. Single-observation subjects
    are excluded and counted.
    """
    errors: list[tuple[str, float]] = []
    n_excluded = 0
    for subject in test.subjects:
        if subject.n_obs < 2:
            n_excluded += 1
            continue
        kept = Subject(id=subject.id, t=subject.t[:-1].copy(), y=subject.y[:-1].copy())
        scores = project_scores(kept, model)
        pred = float((model.component_values(subject.t[-1:]) @ scores)[0])
        errors.append((subject.id, (pred - float(subject.y[-1])) ** 2))
    if not errors:
        raise ValueError("no eligible test subjects (all have a single observation)")
    values = np.array([e for _, e in errors])
    return MspeReport(
        mspe_mean=float(values.mean()),
        mspe_median=float(np.median(values)),
        n_eligible=len(errors),
        n_excluded=n_excluded,
        per_subject=tuple(errors),
    )


def holdout_last_mspe(
    train: LongitudinalDataset,
    test: LongitudinalDataset,
    basis: BasisSystem,
    n_components: int,
    gammas,
    opts: SolverOptions | None = None,
) -> MspeReport:
    """Fit on the training set, then run the held-out-last protocol on test."""
    model = fit_soap(train, basis, n_components, gammas, opts)
    return holdout_last_mspe_model(model, test)
