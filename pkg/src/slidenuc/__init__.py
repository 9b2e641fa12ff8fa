"""Whole-slide nuclei detection engine: slide IO, stain math, overlapped
tiling with central-crop merging, pluggable window detectors, matching and
loss math, the F1 evaluation protocol, and a timing benchmark harness."""

__version__ = "0.1.0"

from ._kernels import ACTIVE_KERNELS

__all__ = ["ACTIVE_KERNELS", "__version__"]
