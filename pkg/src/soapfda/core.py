"""Domain data model: subjects, datasets, fitted models, and their (de)serialization."""

from __future__ import annotations

import csv
import json
from dataclasses import dataclass, field
from typing import Iterable, NamedTuple

import numpy as np

from .basis import BasisSystem, make_bspline_basis


class DataValidationError(ValueError):
    """Raised when raw input rows violate the dataset contract."""


class Observation(NamedTuple):
    t: float
    y: float


@dataclass(frozen=True)
class Subject:
    """One subject's irregular observations, sorted ascending by time.

    Ties in time are kept in input order; they are legitimate repeated
    measurements and the least-squares steps handle the duplicated rows.
    """

    id: str
    t: np.ndarray
    y: np.ndarray

    def __post_init__(self):
        self.t.setflags(write=False)
        self.y.setflags(write=False)

    @property
    def n_obs(self) -> int:
        return len(self.t)

    @property
    def obs(self) -> tuple[Observation, ...]:
        return tuple(Observation(float(a), float(b)) for a, b in zip(self.t, self.y))


@dataclass(frozen=True)
class LongitudinalDataset:
    """n subjects observed irregularly on a common interval."""

    domain: tuple[float, float]
    subjects: tuple[Subject, ...]

    @property
    def n_subjects(self) -> int:
        return len(self.subjects)

    @property
    def n_obs_total(self) -> int:
        return sum(s.n_obs for s in self.subjects)

    @property
    def ids(self) -> tuple[str, ...]:
        return tuple(s.id for s in self.subjects)

    def all_times(self) -> np.ndarray:
        return np.concatenate([s.t for s in self.subjects])


@dataclass(frozen=True)
class FitReport:
    """Diagnostics from a fit.

    ``loss_trace`` records the full objective (residual term plus any
    roughness penalties at the current component count) after every score
    and component update. ``sweep_objectives`` holds the objective at the
    end of each refinement sweep; ``stage_offsets`` marks where each
    component's extraction begins in ``loss_trace``.
    """

    loss_trace: tuple[float, ...]
    converged: bool
    n_sweeps: int
    tolerance_used: float
    sweep_objectives: tuple[float, ...] = ()
    stage_offsets: tuple[int, ...] = ()
    n_fallbacks: int = 0


@dataclass(frozen=True)
class FecModel:
    """Fitted orthonormal components with per-subject scores.

    ``coef`` is L x M: column m holds the basis coefficients of component m,
    G-orthonormal across columns. ``scores`` is n x M in dataset subject
    order.
    """

    basis: BasisSystem
    coef: np.ndarray
    scores: np.ndarray
    gammas: np.ndarray
    noise_var: float
    report: FitReport | None = field(default=None, compare=False)

    def __post_init__(self):
        L, M = self.coef.shape
        if M < 1 or L < M:
            raise ValueError(f"need 1 <= M <= L, got coef shape {self.coef.shape}")
        if L != self.basis.size:
            raise ValueError("coefficient rows do not match basis size")
        if self.scores.shape[1] != M or len(self.gammas) != M:
            raise ValueError("scores/gammas do not match the number of components")
        if self.noise_var < 0:
            raise ValueError("noise_var must be >= 0")
        for arr in (self.coef, self.scores, self.gammas):
            arr.setflags(write=False)

    @property
    def n_components(self) -> int:
        return self.coef.shape[1]

    def component_values(self, grid) -> np.ndarray:
        """Values of every component at the grid points, shape (len(grid), M)."""
        from .basis import eval_basis_matrix

        return eval_basis_matrix(self.basis, grid) @ self.coef

    def orthonormality_error(self) -> float:
        """max |coef_m' G coef_l - delta_ml| over all component pairs."""
        gram = self.coef.T @ self.basis.gram @ self.coef
        return float(np.max(np.abs(gram - np.eye(self.n_components))))


def validate_dataset(
    raw: Iterable[tuple[str, float, float]],
    domain: tuple[float, float] | None = None,
) -> LongitudinalDataset:
    """Group (id, t, y) triples into a validated dataset.

    Rows are grouped by subject id and sorted ascending by time within each
    subject (stable, so exact time ties keep their input order). Subjects
    are ordered by id, making the result independent of input row order.
    The domain defaults to (0, max observed t) when not supplied.

    Raises
    ------
    DataValidationError
        On empty input, non-finite values or out-of-domain times; the
        message names the offending input row index.
    """
    rows = list(raw)
    if not rows:
        raise DataValidationError("empty input: no observation rows")

    for idx, row in enumerate(rows):
        if len(row) != 3:
            raise DataValidationError(f"row {idx}: expected (id, t, y), got {row!r}")
        _, t, y = row
        if not np.isfinite(t):
            raise DataValidationError(f"row {idx}: non-finite time {t!r}")
        if not np.isfinite(y):
            raise DataValidationError(f"row {idx}: non-finite value {y!r}")

    if domain is None:
        t_max = max(float(r[1]) for r in rows)
        domain = (0.0, t_max)
    lo, hi = float(domain[0]), float(domain[1])
    if lo >= hi:
        raise DataValidationError(f"invalid domain ({lo}, {hi})")
    for idx, (_, t, _) in enumerate(rows):
        if not (lo <= t <= hi):
            raise DataValidationError(f"row {idx}: time {t} outside domain [{lo}, {hi}]")

    grouped: dict[str, list[tuple[float, float]]] = {}
    for sid, t, y in rows:
        grouped.setdefault(str(sid), []).append((float(t), float(y)))

    subjects = []
    for sid in sorted(grouped):
        pairs = grouped[sid]
        t = np.array([p[0] for p in pairs])
        y = np.array([p[1] for p in pairs])
        order = np.argsort(t, kind="stable")
        subjects.append(Subject(id=sid, t=t[order], y=y[order]))
    return LongitudinalDataset(domain=(lo, hi), subjects=tuple(subjects))


# ---------------------------------------------------------------------------
# CSV long format: header subject_id,t,y, one row per observation.
# ---------------------------------------------------------------------------

CSV_HEADER = ("subject_id", "t", "y")


def read_long_csv(path) -> list[tuple[str, float, float]]:
    """Read (id, t, y) triples from a long-format CSV with the standard header."""
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header is None or tuple(h.strip() for h in header) != CSV_HEADER:
            raise DataValidationError(
                f"expected header {','.join(CSV_HEADER)}, got {header!r}"
            )
        rows = []
        for lineno, rec in enumerate(reader, start=2):
            if not rec:
                continue
            if len(rec) != 3:
                raise DataValidationError(f"line {lineno}: expected 3 fields, got {len(rec)}")
            try:
                rows.append((rec[0], float(rec[1]), float(rec[2])))
            except ValueError as exc:
                raise DataValidationError(f"line {lineno}: {exc}") from exc
    return rows


def write_long_csv(path, rows: Iterable[tuple[str, float, float]]) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(CSV_HEADER)
        for sid, t, y in rows:
            writer.writerow([sid, repr(float(t)), repr(float(y))])


def dataset_to_rows(dataset: LongitudinalDataset) -> list[tuple[str, float, float]]:
    rows = []
    for s in dataset.subjects:
        for t, y in zip(s.t, s.y):
            rows.append((s.id, float(t), float(y)))
    return rows


# ---------------------------------------------------------------------------
# Model JSON document. The basis is stored as its defining parameters only;
# gram/penalty matrices are recomputed on load (bit-exact: same quadrature).
# ---------------------------------------------------------------------------


def model_to_dict(model: FecModel) -> dict:
    L, M = model.coef.shape
    doc = {
        "basis": {
            "domain": [model.basis.domain[0], model.basis.domain[1]],
            "order": model.basis.order,
            "interior_knots": model.basis.interior_knots.tolist(),
        },
        "l": L,
        "m": M,
        "coef": model.coef.ravel(order="F").tolist(),
        "scores": model.scores.tolist(),
        "gammas": np.asarray(model.gammas, dtype=float).tolist(),
        "noise_var": float(model.noise_var),
    }
    if model.report is not None:
        r = model.report
        doc["report"] = {
            "loss_trace": list(r.loss_trace),
            "converged": r.converged,
            "n_sweeps": r.n_sweeps,
            "tolerance_used": r.tolerance_used,
            "sweep_objectives": list(r.sweep_objectives),
            "stage_offsets": list(r.stage_offsets),
            "n_fallbacks": r.n_fallbacks,
        }
    return doc


def model_from_dict(doc: dict) -> FecModel:
    b = doc["basis"]
    basis = make_bspline_basis(
        domain=(float(b["domain"][0]), float(b["domain"][1])),
        size=int(doc["l"]),
        order=int(b["order"]),
        interior_knots=np.asarray(b["interior_knots"], dtype=float),
    )
    L, M = int(doc["l"]), int(doc["m"])
    # C-contiguous so downstream BLAS calls match the freshly fitted model bitwise
    coef = np.ascontiguousarray(np.asarray(doc["coef"], dtype=float).reshape((L, M), order="F"))
    report = None
    if "report" in doc:
        r = doc["report"]
        report = FitReport(
            loss_trace=tuple(r["loss_trace"]),
            converged=bool(r["converged"]),
            n_sweeps=int(r["n_sweeps"]),
            tolerance_used=float(r["tolerance_used"]),
            sweep_objectives=tuple(r.get("sweep_objectives", ())),
            stage_offsets=tuple(r.get("stage_offsets", ())),
            n_fallbacks=int(r.get("n_fallbacks", 0)),
        )
    return FecModel(
        basis=basis,
        coef=coef,
        scores=np.asarray(doc["scores"], dtype=float).reshape(-1, M),
        gammas=np.asarray(doc["gammas"], dtype=float),
        noise_var=float(doc["noise_var"]),
        report=report,
    )


def save_model(model: FecModel, path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(model_to_dict(model), fh, indent=2, sort_keys=True)
        fh.write("\n")


def load_model(path) -> FecModel:
    with open(path, encoding="utf-8") as fh:
        return model_from_dict(json.load(fh))
