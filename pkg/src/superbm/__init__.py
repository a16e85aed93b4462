"""superbm: super-Brownian motion as a branching particle system, with the
stochastic-integration, Dupire-derivative and martingale-representation
machinery needed to verify the functional calculus numerically."""

__version__ = "0.1.0"

from .measures import AtomicMeasure, ScalarField, add_atom, bl_distance, pair, total_mass
from .paths import MeasurePath, StoppedPath, TimeGrid, bump, d_infty, stop
from .testfuncs import (AdaptedWeight, BoundedMap, ProductIntegrand, SchwartzTestFunction,
                        adapted_weight, clip_map, const_map, gaussian_bump, hermite_bump,
                        tanh_map, unit_weight, validate_half_laplacian)
from .events import BranchEvent, BranchEventLog
from .simulate import (MartingaleProblemReport, PopulationCapExceeded, SimParams,
                       martingale_series, replicate_rng, simulate, simulate_total_mass,
                       verify_martingale_problem)
from .stats import Estimate, MomentAccumulator, mean_se, variance_se

__all__ = [name for name in dir() if not name.startswith("_")]

from .integrals import (ConstantIntegrand, CovariationReport, LinearCombinationIntegrand,
                        PathFieldCache, PredictableIntegrand, closed_form_series, covariation,
                        integrate, integrate_series, integrate_u_closed_form, l2_norm,
                        norm_bound_report, quadrature_cross)
from .functionals import (ConstantFunctional, NonAnticipativeFunctional, PairingFunctional,
                          ProductIntegralFunctional, SquaredPairingFunctional,
                          WeightFunctional, pathwise_representation_error,
                          vertical_derivative, vertical_derivative2, vertical_derivative_fd,
                          vertical_derivative_richardson)
from .galerkin import (BasisSamples, GalerkinSolution, IntegrandBasis, check_adjoint,
                       coefficient_covariance, collect_basis_samples, fit, fitted_norm_sq,
                       gram_matrix, planted_target, residual, rhs_vector, solve)
from .events import EventLogError
from .storage import (EventLogFormatError, read_event_log, read_states, write_event_log,
                      write_states)
from .config import ConfigError, ExperimentConfig, RunManifest
