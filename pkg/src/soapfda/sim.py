"""Synthetic sparse-curve generation and the integrated error metrics.

Curves are rank-2: X_i(t) = a_i1 psi_1(t) + a_i2 psi_2(t) with an
orthonormal pair psi_1, psi_2, subject counts and sampling laws chosen to
mimic sparse longitudinal designs (few observations per subject at uniform
random times, Gaussian measurement noise).
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace
from typing import Callable

import numpy as np

from .basis import default_basis_size, make_bspline_basis
from .core import LongitudinalDataset, validate_dataset
from .predict import default_grid, predict_trajectory
from .solver import SolverOptions, fit_soap


def cosine_pair(domain: tuple[float, float]) -> tuple[Callable, Callable]:
    """Default orthonormal pair on the domain: scaled cos(pi u), cos(2 pi u)."""
    lo, hi = domain
    width = hi - lo
    amp = np.sqrt(2.0 / width)

    def f1(t):
        u = (np.asarray(t, dtype=float) - lo) / width
        return amp * np.cos(np.pi * u)

    def f2(t):
        u = (np.asarray(t, dtype=float) - lo) / width
        return amp * np.cos(2.0 * np.pi * u)

    return f1, f2


def check_orthonormal(f1, f2, domain, tol: float = 1e-10) -> None:
    """Verify <f1,f1> = <f2,f2> = 1 and <f1,f2> = 0 by composite quadrature.

    256 Gauss-Legendre panels resolve smooth pairs exactly and piecewise
    polynomials (spline-representable pairs) to well below the tolerance.
    """
    lo, hi = domain
    x, w = np.polynomial.legendre.leggauss(12)
    edges = np.linspace(lo, hi, 257)
    half = np.diff(edges) / 2.0
    mid = (edges[:-1] + edges[1:]) / 2.0
    pts = (mid[:, None] + half[:, None] * x[None, :]).ravel()
    wts = (half[:, None] * w[None, :]).ravel()
    v1 = np.asarray(f1(pts), dtype=float)
    v2 = np.asarray(f2(pts), dtype=float)
    worst = max(
        abs(float(wts @ (v1 * v1)) - 1.0),
        abs(float(wts @ (v2 * v2)) - 1.0),
        abs(float(wts @ (v1 * v2))),
    )
    if worst > tol:
        raise ValueError(f"component pair is not orthonormal (error {worst:.2e} > {tol:g})")


@dataclass(frozen=True)
class SimulationConfig:
    """Generator settings.

    ``score_scales`` are the Gaussian standard deviations per component (set
    ``normal_scale_is_sd=False`` to read them as variances instead);
    ``gamma_rates`` are the rate parameters of the centered-Gamma score law.
    ``components`` may supply any orthonormal pair; the default is the
    cosine pair above.
    """

    n_train: int = 300
    n_test: int = 300
    score_dist: str = "gaussian"  # gaussian | gamma_centered
    score_scales: tuple[float, float] = (30.0, 10.0)
    gamma_rates: tuple[float, float] = (0.03, 0.1)
    normal_scale_is_sd: bool = True
    noise_sd: float = 2.0
    ni_range: tuple[int, int] = (1, 5)
    domain: tuple[float, float] = (0.0, 1.0)
    seed: int = 0
    components: tuple[Callable, Callable] | None = field(default=None, compare=False)

    def __post_init__(self):
        if self.score_dist not in ("gaussian", "gamma_centered"):
            raise ValueError(f"unknown score_dist {self.score_dist!r}")
        if min(self.score_scales) <= 0 or min(self.gamma_rates) <= 0:
            raise ValueError("score scales and gamma rates must be > 0")
        if self.noise_sd < 0:
            raise ValueError("noise_sd must be >= 0")
        lo, hi = self.ni_range
        if lo < 1 or hi < lo:
            raise ValueError(f"invalid ni_range {self.ni_range}")
        if self.domain[0] >= self.domain[1]:
            raise ValueError(f"invalid domain {self.domain}")

    def component_pair(self) -> tuple[Callable, Callable]:
        pair = self.components if self.components is not None else cosine_pair(self.domain)
        check_orthonormal(pair[0], pair[1], self.domain)
        return pair


@dataclass(frozen=True)
class TrueCurves:
    """Noise-free generating curves: scores plus the component pair."""

    scores: np.ndarray  # (n, 2)
    f1: Callable
    f2: Callable

    def curve(self, i: int, grid) -> np.ndarray:
        return self.scores[i, 0] * self.f1(grid) + self.scores[i, 1] * self.f2(grid)

    def curves_matrix(self, grid) -> np.ndarray:
        return np.outer(self.scores[:, 0], self.f1(grid)) + np.outer(self.scores[:, 1], self.f2(grid))


def gen_scores(config: SimulationConfig, n: int, rng: np.random.Generator | None = None) -> np.ndarray:
    """Draw the n x 2 score matrix under the configured law.

    Gaussian scores are independent N(0, s_m^2) with s_m from
    ``score_scales``; centered-Gamma scores are Gamma(shape 1, rate r_m)
    draws minus their sample column mean (so each column sums to zero
    exactly).
    """
    if rng is None:
        rng = np.random.default_rng(config.seed)
    if config.score_dist == "gaussian":
        sds = np.asarray(config.score_scales, dtype=float)
        if not config.normal_scale_is_sd:
            sds = np.sqrt(sds)
        return rng.normal(0.0, 1.0, size=(n, 2)) * sds[None, :]
    raw = np.column_stack(
        [rng.gamma(shape=1.0, scale=1.0 / rate, size=n) for rate in config.gamma_rates]
    )
    return raw - raw.mean(axis=0, keepdims=True)


def gen_sparse_dataset(
    config: SimulationConfig,
    n: int | None = None,
    rng: np.random.Generator | None = None,
) -> tuple[LongitudinalDataset, np.ndarray, TrueCurves]:
    """Generate one sparse noisy dataset plus the generating truth.

    Per subject: n_i uniform on ``ni_range``, times uniform on the domain
    (sorted), y = X(t) + Normal(0, noise_sd^2). Returns (dataset, scores,
    truth handle); subject ids are zero-padded so dataset order matches
    generation order.
    """
    if rng is None:
        rng = np.random.default_rng(config.seed)
    if n is None:
        n = config.n_train
    f1, f2 = config.component_pair()
    scores = gen_scores(config, n, rng)
    lo, hi = config.domain
    ni_lo, ni_hi = config.ni_range
    width = len(str(max(n, 1)))
    rows = []
    for i in range(n):
        n_i = int(rng.integers(ni_lo, ni_hi + 1))
        t = np.sort(rng.uniform(lo, hi, size=n_i))
        x = scores[i, 0] * f1(t) + scores[i, 1] * f2(t)
        y = x + rng.normal(0.0, config.noise_sd, size=n_i) if config.noise_sd > 0 else x
        sid = f"s{i:0{width}d}"
        rows.extend((sid, float(tj), float(yj)) for tj, yj in zip(t, y))
    dataset = validate_dataset(rows, domain=config.domain)
    return dataset, scores, TrueCurves(scores=scores, f1=f1, f2=f2)


def impe(predicted: np.ndarray, true_curves: np.ndarray, grid) -> float:
    """Mean over subjects of the trapezoid integral of (xhat - x)^2."""
    predicted = np.asarray(predicted, dtype=float)
    true_curves = np.asarray(true_curves, dtype=float)
    if predicted.shape != true_curves.shape:
        raise ValueError(f"shape mismatch: {predicted.shape} vs {true_curves.shape}")
    grid = np.asarray(grid, dtype=float)
    if predicted.shape[1] != len(grid):
        raise ValueError("curves do not match the grid length")
    per_subject = np.trapezoid((predicted - true_curves) ** 2, grid, axis=1)
    return float(per_subject.mean())


def imse(psi_hat, psi_true, grid, sign_align: bool = True) -> float:
    """Integral of (psi_hat - psi_true)^2; components are identified only up
    to sign, so by default the better of the two orientations is reported."""
    psi_hat = np.asarray(psi_hat, dtype=float)
    psi_true = np.asarray(psi_true, dtype=float)
    grid = np.asarray(grid, dtype=float)
    if psi_hat.shape != psi_true.shape or psi_hat.shape != grid.shape:
        raise ValueError("functions and grid must share one shape")
    raw = float(np.trapezoid((psi_hat - psi_true) ** 2, grid))
    if not sign_align:
        return raw
    flipped = float(np.trapezoid((psi_hat + psi_true) ** 2, grid))
    return min(raw, flipped)


@dataclass(frozen=True)
class MetricStats:
    mean: float
    sd: float
    median: float
    minimum: float
    maximum: float

    @classmethod
    def from_values(cls, values) -> "MetricStats":
        v = np.asarray(values, dtype=float)
        return cls(
            mean=float(v.mean()),
            sd=float(v.std(ddof=1)) if len(v) > 1 else 0.0,
            median=float(np.median(v)),
            minimum=float(v.min()),
            maximum=float(v.max()),
        )

    def to_dict(self) -> dict:
        return {
            "mean": self.mean,
            "sd": self.sd,
            "median": self.median,
            "min": self.minimum,
            "max": self.maximum,
        }


@dataclass(frozen=True)
class StudySummary:
    n_reps: int
    n_failed: int
    failed_reps: tuple[int, ...]
    impe: MetricStats
    imse_components: tuple[MetricStats, ...]
    per_rep: tuple[dict, ...]

    def to_dict(self) -> dict:
        return {
            "n_reps": self.n_reps,
            "n_failed": self.n_failed,
            "failed_reps": list(self.failed_reps),
            "impe": self.impe.to_dict(),
            "imse": [s.to_dict() for s in self.imse_components],
        }


def run_replication_study(
    config: SimulationConfig,
    n_reps: int,
    n_components: int = 2,
    gammas=1e-3,
    basis_size: int | None = None,
    order: int = 4,
    grid_size: int = 101,
    opts: SolverOptions | None = None,
    threads: int = 1,
) -> StudySummary:
    """Repeatedly generate train/test data, fit, predict, and aggregate errors.

    Each replication draws from its own substream (config seed plus the
    replication index), so the study is reproducible, replications are
    independent, and running them on ``threads`` workers changes nothing but
    wall time. Per replication we record IMPE of the predicted test
    trajectories and the sign-aligned IMSE of each fitted component against
    the generating pair; failed replications are excluded and counted.
    """
    if n_reps < 1:
        raise ValueError("need at least one replication")
    grid = default_grid(config.domain, grid_size)
    f1, f2 = config.component_pair()
    true_values = [f1(grid), f2(grid)]
    n_cmp_tracked = min(n_components, 2)

    def one_rep(rep: int) -> dict | None:
        rng = np.random.default_rng(config.seed + rep)
        try:
            train, _, _ = gen_sparse_dataset(config, config.n_train, rng)
            test, _, truth_test = gen_sparse_dataset(config, config.n_test, rng)
            L = basis_size if basis_size is not None else default_basis_size(train.n_obs_total, order)
            basis = make_bspline_basis(config.domain, L, order)
            model = fit_soap(train, basis, n_components, gammas, opts)
            predicted = np.vstack(
                [predict_trajectory(s, model, grid).values for s in test.subjects]
            )
            truth = truth_test.curves_matrix(grid)
            fitted = model.component_values(grid)
            record = {
                "rep": rep,
                "impe": impe(predicted, truth, grid),
            }
            for m in range(n_cmp_tracked):
                record[f"imse_{m + 1}"] = imse(fitted[:, m], true_values[m], grid)
            return record
        except Exception:  # noqa: BLE001 - a failed replication is data, not a crash
            return None

    if threads > 1:
        from concurrent.futures import ThreadPoolExecutor

        with ThreadPoolExecutor(max_workers=threads) as pool:
            results = list(pool.map(one_rep, range(n_reps)))
    else:
        results = [one_rep(rep) for rep in range(n_reps)]
    per_rep = [r for r in results if r is not None]
    failed = [rep for rep, r in enumerate(results) if r is None]

    if not per_rep:
        raise RuntimeError(f"all {n_reps} replications failed")
    return StudySummary(
        n_reps=n_reps,
        n_failed=len(failed),
        failed_reps=tuple(failed),
        impe=MetricStats.from_values([r["impe"] for r in per_rep]),
        imse_components=tuple(
            MetricStats.from_values([r[f"imse_{m + 1}"] for r in per_rep])
            for m in range(n_cmp_tracked)
        ),
        per_rep=tuple(per_rep),
    )


# ---------------------------------------------------------------------------
# Plain-text key=value config files for the CLI.
# ---------------------------------------------------------------------------

_CONFIG_KEYS = {
    "n_train": int,
    "n_test": int,
    "score_dist": str,
    "score_scale_1": float,
    "score_scale_2": float,
    "gamma_rate_1": float,
    "gamma_rate_2": float,
    "normal_scale_is_sd": lambda s: s.strip().lower() in ("1", "true", "yes"),
    "noise_sd": float,
    "ni_min": int,
    "ni_max": int,
    "domain_lo": float,
    "domain_hi": float,
    "seed": int,
}


def parse_config_file(path) -> SimulationConfig:
    """Read a key=value config file ('#' starts a comment) into a SimulationConfig."""
    raw: dict[str, object] = {}
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            line = line.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" not in line:
                raise ValueError(f"{path}:{lineno}: expected key=value, got {line!r}")
            key, value = (part.strip() for part in line.split("=", 1))
            if key not in _CONFIG_KEYS:
                raise ValueError(f"{path}:{lineno}: unknown key {key!r}")
            raw[key] = _CONFIG_KEYS[key](value)

    config = SimulationConfig()
    updates: dict[str, object] = {}
    for name in ("n_train", "n_test", "score_dist", "noise_sd", "seed", "normal_scale_is_sd"):
        if name in raw:
            updates[name] = raw[name]
    if "score_scale_1" in raw or "score_scale_2" in raw:
        updates["score_scales"] = (
            float(raw.get("score_scale_1", config.score_scales[0])),
            float(raw.get("score_scale_2", config.score_scales[1])),
        )
    if "gamma_rate_1" in raw or "gamma_rate_2" in raw:
        updates["gamma_rates"] = (
            float(raw.get("gamma_rate_1", config.gamma_rates[0])),
            float(raw.get("gamma_rate_2", config.gamma_rates[1])),
        )
    if "ni_min" in raw or "ni_max" in raw:
        updates["ni_range"] = (
            int(raw.get("ni_min", config.ni_range[0])),
            int(raw.get("ni_max", config.ni_range[1])),
        )
    if "domain_lo" in raw or "domain_hi" in raw:
        updates["domain"] = (
            float(raw.get("domain_lo", config.domain[0])),
            float(raw.get("domain_hi", config.domain[1])),
        )
    return replace(config, **updates) if updates else config
