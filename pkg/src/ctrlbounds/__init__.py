"""Monte-Carlo primal lower bounds and dual upper bounds for the value
function of stochastic optimal control problems with controlled drift
and controlled diffusion, plus a search over parametric test functions
that shrinks the duality gap."""

__version__ = "0.1.0"

from .dual import (
    DegeneracyReport,
    PathwiseDPConfig,
    SpatialBox,
    degeneracy_diagnostic,
    dual_v1,
    dual_v2,
    pathwise_inner_max,
    pathwise_policy_value,
)
from .errors import (
    AllCandidatesInvalid,
    BoundaryMaximum,
    ConfigError,
    CtrlBoundsError,
    DerivativeMismatch,
    DimensionMismatch,
    MismatchedProblem,
    NonFinite,
    ParameterDomain,
    RiccatiBlowup,
    StateBoxExit,
    UnknownIdentifier,
)
from .hamiltonian import HamiltonianQuery, hamiltonian_sup, hcv
from .hjb_bench import (
    BenchmarkProblem,
    HJBReport,
    LQParams,
    brownian_quadratic,
    hjb_residual,
    merton_oracle,
    riccati_oracle,
    supersolution_probe,
)
from .model import (
    ControlProblem,
    ParametricFamily,
    Policy,
    TestFunction,
    check_test_function,
    default_check_points,
    make_policy,
    validate_problem,
)
from .paths import (
    BrownianPath,
    TimeGrid,
    TrajectoryRecord,
    integrate,
    penalty_mean_test,
    sample_brownian,
    simulate_batch,
)
from .primal import BoundEstimate, primal_bound, primal_path_values
from .registry import (
    get_benchmark,
    get_family,
    list_families,
    list_problems,
    oracle_params,
    perturbed_params,
    resolve_policy,
)
from .search import GapReport, SearchConfig, SearchTrace, gap_report, minimize_dual
