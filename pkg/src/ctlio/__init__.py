"""Continuous-time LiDAR-inertial trajectory estimation on cumulative B-splines."""

from .bspline import KnotGrid, OutOfRangeError, SplineR3, SplineSO3, cumulative_basis
from .geometry import RigidTransform, exp_so3, hat, log_so3, vee
from .trajectory import Trajectory

__all__ = ["KnotGrid", "OutOfRangeError", "RigidTransform", "SplineR3", "SplineSO3",
           "Trajectory", "cumulative_basis", "exp_so3", "hat", "log_so3", "vee"]
