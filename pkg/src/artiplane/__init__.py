"""Articulated tri-plane radiance fields with a self-contained gradient
engine and a cost benchmark harness."""

__version__ = "0.1.0"

from . import autodiff, diffengine, harness, io, kinematics, objectives, renderer, rng, triplane, variants  # noqa: F401
from .errors import NumericalError, ValidationError  # noqa: F401
