"""Spatio-temporal CT perfusion segmentation engine.

Thin Python surface over the C++ core: convolution calculus (2D/3D/4D and
the grouped spatio-temporal layer), segmentation losses and metrics, the
preprocessing chain, and synthetic phantom generation.
"""

from ._core import *  # noqa: F401,F403
from ._core import __version__  # noqa: F401
