"""Subgoal-angle conditioned imitation driving in a small deterministic 2D town."""
from .errors import ConfigError, DataError, RuntimeFailure, SubgoalDriveError
from .geometry import (Branch, PathSpec, Pose, ProgressCursor, discretize_branch, discretize_path,
                       navigation_command, select_subgoal, subgoal_angle, subgoal_direction)

__version__ = "0.1.0"

__all__ = ["Branch", "ConfigError", "DataError", "PathSpec", "Pose", "ProgressCursor", "RuntimeFailure",
           "SubgoalDriveError", "discretize_branch", "discretize_path", "navigation_command", "select_subgoal",
           "subgoal_angle", "subgoal_direction", "__version__"]
