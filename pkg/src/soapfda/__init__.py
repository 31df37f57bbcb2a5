"""Sparse orthonormal approximation of longitudinal trajectories.

Estimates orthonormal empirical components and per-subject scores directly
from sparse, irregular, noisy observations by alternating constrained least
squares, then reconstructs each subject's underlying curve — no mean or
covariance function estimation and no covariance-matrix inversion.
"""

from .basis import (
    BasisSystem,
    default_basis_size,
    eval_basis,
    eval_basis_matrix,
    eval_function,
    make_bspline_basis,
    quantile_interior_knots,
)
from .core import (
    DataValidationError,
    FecModel,
    FitReport,
    LongitudinalDataset,
    Observation,
    Subject,
    load_model,
    read_long_csv,
    save_model,
    validate_dataset,
    write_long_csv,
)
from .oracle import (
    DenseCurveSet,
    compare_to_soap,
    grid_eigenfunctions,
    sign_aligned_imse,
    uncentered_cov,
)
from .predict import (
    MspeReport,
    TrajectoryEstimate,
    holdout_last_mspe,
    holdout_last_mspe_model,
    predict_trajectory,
    project_scores,
    reconstruct,
)
from .selection import (
    AicResult,
    CvResult,
    aic,
    aic_values,
    loco_cv_gamma,
    select_component_count,
    select_gammas_sequential,
    sigma2_hat,
)
from .sim import (
    SimulationConfig,
    TrueCurves,
    gen_scores,
    gen_sparse_dataset,
    impe,
    imse,
    run_replication_study,
)
from .solver import (
    PenalizedStepResult,
    SingularStepError,
    SolverOptions,
    fit_first_fec,
    fit_soap,
    kkt_residual,
    objective,
    psi_step_first,
    psi_step_orthogonal,
    psi_step_penalized,
    score_step,
)

__version__ = "0.1.0"
