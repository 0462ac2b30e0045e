"""Stereo event/intensity video frame interpolation at desk scale.

Submodules are imported lazily by callers (``from sevfi import tensor``)
so that the CLI can pin BLAS thread counts before numpy loads.
"""

__version__ = "0.1.0"
