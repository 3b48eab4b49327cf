"""primvol: volumetric primitives, a BVH renderer with a hand-derived backward pass, and primitive generators."""

__all__ = ["__version__"]
__version__ = "0.1.0"
