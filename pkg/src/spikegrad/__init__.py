"""Surrogate-gradient and stochastic-AD tools for deterministic and stochastic spiking networks."""

from .errors import SpikeGradError
from .rng import CounterRNG
from .tape import SpikeGradRule, TRUE_GRADIENT

__all__ = ["CounterRNG", "SpikeGradError", "SpikeGradRule", "TRUE_GRADIENT"]
__version__ = "0.1.0"
