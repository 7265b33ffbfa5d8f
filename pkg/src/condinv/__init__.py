"""Reconstruction of piecewise constant diffusion coefficients.

The forward model is the stationary diffusion equation
div(sigma grad u) = 1 on the unit square with homogeneous Dirichlet
boundary values, discretized by P1 finite elements.  Reconstruction
runs a damped Landweber iteration with discrepancy stopping, either
full-order or accelerated by an adaptively enriched reduced basis with
a rigorous a posteriori bound on the model reduction error.
"""

from .fem import (ComponentSystem, Grid, Partition, SolverFailure,
                  assemble_components, assemble_stiffness, check_admissible,
                  coercivity_bound, continuity_bound, l2_inner, l2_norm,
                  make_grid, make_partition, parameter_l2_norm, solve_sparse)
from .forward import (ForwardCache, adjoint_apply, dual_solve,
                      estimate_operator_norm, forward, jacobian_apply,
                      landweber_update)
from .reduced import (EstimatorWorkspace, ReducedModel, error_estimator,
                      error_estimator_gram, reduced_dual, reduced_forward,
                      reduced_update, residual_norm)
from .solvers import (Measurement, RunTrace, SolverConfig, extend, landweber,
                      rbl, restrict, update_error_probe)
from .phantom import Disk, PhantomSpec, Rect, rasterize_phantom
from .experiment import (ExperimentConfig, measurement_mask, noise_sweep,
                         read_grid, run_experiment, synthesize_measurement,
                         write_grid)

__version__ = "0.1.0"
