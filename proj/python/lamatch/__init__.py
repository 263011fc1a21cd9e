"""Linear-attention keypoint matching."""

from ._lamatch import *  # noqa: F401,F403
from ._lamatch import ConfigError, DataError, LamatchError

__all__ = [name for name in dir() if not name.startswith("_")]
