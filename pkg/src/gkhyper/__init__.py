"""Empirical Bayes hyperparameter estimation for linear-Gaussian inverse problems.

Matrix-free throughout: the forward map and the Matern prior covariance are
touched only through matvecs; the marginal-posterior objective and gradient
are approximated with a generalized Golub-Kahan bidiagonalization, with dense
oracles and runnable error bounds for verification at desk scale.
"""

from .operators import (
    LinearOperatorHandle,
    DenseOperator,
    SparseOperator,
    IdentityOperator,
    ZeroOperator,
    MaskedOperator,
    NoiseCovariance,
    dense_matrix,
    adjoint_probe_defect,
)
from .covariance import (
    MaternKernel,
    RegularGrid,
    CovarianceOperator,
    matern_eval,
    matern_deriv,
    build_cov_operator,
)
from .gengk import GenGKFactorization, gengk_bidiag, verify_relations, bidiagonal_matrix
from .marginal import (
    HyperParams,
    Hyperprior,
    MarginalModel,
    ObjectiveEvaluation,
    hyperprior_neglog,
    objective_exact,
    objective_gengk,
    gradient_gengk,
    objective_svd,
)
from .monitor import (
    MonitorReport,
    xi_recurrence,
    mc_xi_estimate,
    err_indicator,
    prop2_bound,
    sample_size_bound,
    normal_matrix_apply,
)
from .estimate import (
    OptimizeOptions,
    OptimizeTrace,
    TwoParamModel,
    optimize_hyperparams,
    two_param_rescale,
    precompute_two_param,
    objective_two_param,
    optimize_two_param,
    map_reconstruct,
    map_reconstruct_exact,
    optimal_lambda_sweep,
)
from .problems import (
    ProblemInstance,
    heat_1d,
    heat_true_signal,
    ray_tomo_2d,
    smooth_phantom,
    add_noise,
    relative_error,
    build_heat_problem,
    build_ray_tomo_problem,
)

__version__ = "0.1.0"
