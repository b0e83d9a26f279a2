from .errors import *
from .rng import RngStream

TOOL_VERSION = "0.4.0"

__all__ = ['RngStream', 'TOOL_VERSION']
