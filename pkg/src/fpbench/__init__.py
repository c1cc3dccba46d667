"""Windowed Anderson extrapolation for fixed-point problems.

Forward iteration and Anderson acceleration over abstract maps, a
desk-scale deep-equilibrium layer, implicit-function-theorem gradients,
analytic test problems, a synthetic training demo, and a benchmarking CLI.
"""

from .errors import (ConfigError, DivergenceError, FpbenchError, InputError,
                     NotReachedError, SingularSystemError)
from .linalg import (AndersonStepSolution, axpy, gram, lin_comb, matvec,
                     norm2, solve_bordered)
from .solvers import (AndersonConfig, CallableMap, FixedPointMap, History,
                      SolverTrace, anderson_iterate, anderson_step,
                      forward_iterate, relative_residual, wall_clock)
from .deq import (DeqLayer, DeqParams, GroupNormSpec, deq_forward,
                  group_norm, init_params, load_params, relu, save_params)
from .implicit import (GradResult, adjoint_solve, equilibrium_gradients,
                       grad_input, grad_params, jacobian_fd)
from .problems import (LinearContraction, SimpleDeq, analytic_fixed_point,
                       make_linear_contraction, make_simple_deq,
                       scalar_probe_suite, simple_deq_map)
from .bench import (BenchConfig, CrossoverReport, detect_crossover,
                    fevals_to_tol, read_trace_csv, run, speedup, time_to_tol,
                    write_trace_csv)
from .training import (BlobDataset, TrainReport, cross_entropy,
                       evaluate_accuracy, generate_blobs, model_forward,
                       train)

__version__ = "0.1.0"
