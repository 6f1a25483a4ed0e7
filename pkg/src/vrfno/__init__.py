"""Viscous rectified flow with noise optimization on 2D synthetic data.

Joint training of a noise-optimizing encoder and a history-aware velocity
field, plus rectified-flow and reflow baselines, ODE samplers, and a
metrics suite (flow straightness, endpoint gaps, two-sample tests,
trajectory-crossing estimates).
"""

__version__ = "0.1.0"

from .backend import NAME as backend_name  # noqa: F401
