"""spheremix: a numerical laboratory for randomly forced bilinear
Schrodinger dynamics on the complex unit sphere.

Subpackages cover the noise model driving the system, norm-preserving
propagation and the induced unit-time Markov chain, constructive steering
(moment problems, feedback, global plans), partition-based mixing and
coupling diagnostics, and the sine-basis truncation that produces the
canonical examples.
"""

from . import _backend
from ._backend import available_backends, backend_name, set_backend
from .core import SystemSpec, fixture, system_a

__all__ = [
    "SystemSpec",
    "available_backends",
    "backend_name",
    "fixture",
    "set_backend",
    "system_a",
]

__version__ = "0.1.0"
