"""
Pixel codec avatar: a variational face codec that decodes a dense mesh and
view-conditioned expression codes once per object, then decodes color only
at rasterized pixels with a tiny sine-activated network.
"""

__version__ = "1.0.0"
