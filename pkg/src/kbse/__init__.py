"""Kernel-based safe exploration: reinforcement learning with kernel barrier certificates."""

from .barrier import BarrierModel, certify, compute_bc, eval_barrier, fit_barrier
from .cme import CmeModel, epsilon_bound, expected_value, fit_cme, zeta_bound
from .envs import make_env
from .kernels import KernelSpec, gram_matrix, rbf_eval, rkhs_norm
from .loop import RunConfig, RunMetrics, run_kbse
from .safety import Constraint, SafetySpec, is_unsafe

__version__ = "0.1.0"
