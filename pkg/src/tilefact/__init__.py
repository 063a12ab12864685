"""Tiled Cholesky, QR and LU factorizations over Block Data Layout matrices.

Plans of tile kernels are executed by a dependency-driven thread pool; the
``stability`` module studies the backward error of tiled pairwise pivoting.
"""

from .factor import (FactorizationError, FactorizationPlan, Task, execute_sequential,
                     factorize, make_plan, plan_cholesky, plan_lu, plan_qr)
from .kernels import KernelError, NotPositiveDefiniteError, SingularError
from .runtime import execute_parallel, validate_trace
from .tilemat import DimensionError, TileMatrix, gen_random, gen_spd

__version__ = "0.1.0"

__all__ = [
    "TileMatrix", "DimensionError", "gen_random", "gen_spd",
    "KernelError", "NotPositiveDefiniteError", "SingularError",
    "Task", "FactorizationPlan", "FactorizationError", "make_plan", "plan_cholesky",
    "plan_qr", "plan_lu", "execute_sequential", "execute_parallel", "validate_trace",
    "factorize",
]
