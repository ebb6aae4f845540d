"""Desk-scale atmospheric-turbulence video restoration.

Dual-module restoration network (deformable-3D-conv registration followed
by a selective-SSM enhancement UNet) with its own autodiff tensor core,
training loop, synthetic turbulence generator, and evaluation tooling.
"""

__version__ = "0.1.0"

from .tensor import Tensor, Tape, ShapeError, FormatError  # noqa: F401
