"""Taylor-Lagrange integration of ODEs with a learned midpoint correction."""

from .dynamics import LinearField, Mlp, MlpField, PendulumField, exact_linear_solution, expm, stiff_system
from .enclosure import apriori_enclosure, contains, gronwall_variation_bound
from .integrators import (
    IntegratorConfig,
    ResidualNet,
    Scheme,
    StiffnessError,
    Trajectory,
    dopri5_adaptive,
    integrate,
    normalized_error,
    rk4_step,
    tl_step,
)
from .midpoint import (
    AnalyticLinearMidpoint,
    DegenerateMidpoint,
    LearnedMidpoint,
    analytic_linear_gammabar,
    predict_midpoint,
    remainder_estimate,
)
from .taylor_jets import Jet, nested_jvp_oracle, ode_taylor_coefficients, solution_jet
from .training import Dataset, TrainingConfig, TrainingLog, distill_dataset, dynamics_loss, midpoint_loss, train

__version__ = "0.1.0"
