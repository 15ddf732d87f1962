"""Total deep variation: a learned multiscale regularizer, its gradient flow,
optimal-control training and analysis tools."""

from .errors import ContractError, NumericalError, ShapeError, TDVError, TrainingDiverged, UsageError
from .rng import CounterRNG
from .regularizer import (TdvParams, evaluate, init_params, parameter_count, project_zero_mean,
                          tdv_energies, tdv_energy, tdv_grad, tdv_hvp, tdv_r)
from .operators import (BicubicDown, Identity, LinearOperator, MriOp, RadonOp, cartesian_mask,
                        cg_solve, estimate_opnorm, make_operator)
from .flow import T_MAX, FlowConfig, Trajectory, rescale_wrap, run_flow, semi_implicit_step
from .training import (LossSpec, TrainConfig, adjoint_recursion, optimality_residual,
                       param_gradients, sensitivity_bound, train)
from .analysis import (Eigenpair, LandscapeGrid, agd_lipschitz_solve, eigenpair_solve, landscape,
                       psnr, tdv_eigenpair, to_luma, transfer_reconstruct)
from .data import Dataset, synth_dataset

__version__ = "0.1.0"
