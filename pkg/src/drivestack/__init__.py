"""Differentiable modular driving stack on synthetic scenarios.

Prediction (GMM trajectory predictor), planning (sampling-based lane planner
with a softmax relaxation) and control (box-constrained iLQR) share one
unicycle dynamics model, and gradients of downstream planning/control losses
propagate back through the controller and planner into the predictor and the
cost weights.
"""

__version__ = "0.1.0"
