"""Fisher-Kolmogorov tumor growth coupled to a flow-matching volume generator.

Voxel layout everywhere is row-major with z slowest: the flat index of voxel
(x, y, z) is ``x + nx * (y + ny * z)``.
"""

__version__ = "0.1.0"
