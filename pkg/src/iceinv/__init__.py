"""
Basal sliding inversion and uncertainty quantification for a 2D flowline
nonlinear Stokes ice model.

The pipeline runs from a forward Glen-law Stokes solve with exponential
basal friction, through adjoint-based MAP estimation of the log friction
field, to a low-rank Gaussian posterior and the linearized uncertainty of
a scalar mass-flux prediction.  Units are MPa, km, and years throughout.
"""

from .mesh import (DomainSpec, FlowlineMesh, build_mesh, GeometryError,
                   ConfigurationError)
from .stokes import (GlenRheology, PhysicsParams, NewtonConfig, StokesState,
                     StokesAssembler, ForwardRecord, NonlinearSolveError,
                     solve_forward, surface_velocity, rho_g_mpa_per_km,
                     effective_viscosity)
from .verification import manufactured_problem, convergence_rates
from .prior import PriorModel
from .adjoint import (ObservationSet, SurfaceMisfit, MapContext, linearize,
                      eval_cost_and_gradient, dense_hessian, MISFIT_MODES)
from .inversion import (NewtonCGConfig, InversionRecord, SolveCounter,
                        invert, lcurve_scan, menger_corner, LCurvePoint)
from .lowrank import (MisfitHessianOperator, GEVDResult, randomized_gevd,
                      dense_gevd, LowRankPosterior, build_posterior)
from .prediction import (QoISpec, PredictionReport, flux_functional, eval_qoi,
                         prediction_gradient, prediction_variance,
                         ifp_direction, posterior_solve_cg, predict)
from .config import (RunConfig, FieldSpec, GammaLadder, parse_config,
                     load_config, serialize_config, with_seed, with_output)
from .pipeline import Pipeline, StageError, STAGES

__version__ = "0.1.0"
