"""Desk-scale laboratory for transformer normalization placement.

Implements HybridNorm and the competing Pre-/Post-Norm placements, analytic
attention Jacobians with bound evaluators, layer diagnostics and a toy
training loop, all in float64 numpy.
"""

__version__ = "0.1.0"
