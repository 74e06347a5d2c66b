"""Adaptive contact-implicit MPC with online residual learning.

Layered as: LCP/QP solvers -> linear complementarity system stepping ->
rigid-body contact models and their linearization -> online residual
learning on the complementarity constraint -> consensus MPC -> closed-loop
experiment harness.
"""

__version__ = "0.1.0"
