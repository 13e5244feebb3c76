"""Conditional 3D shape generation.

A coarse stage generates quantized voxel tokens with a masked
transformer decoded in a handful of parallel steps; a refinement stage
lifts the extracted surface to a dense point cloud through smoothing and
patch-wise upsampling.  Everything runs on a small numpy-backed
reverse-mode autodiff engine; no GPU frameworks are involved.
"""

__version__ = "0.1.0"
