"""Unsupervised landmark learning with factorized foreground/background rendering.

The package factors image reconstruction into a landmark-conditioned
foreground render, a low-capacity background render, and a predicted
blending mask, and uses the reconstruction task to learn landmarks
that stay on the foreground object.
"""

__version__ = "0.1.0"
