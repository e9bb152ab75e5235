"""mslab: Monte Carlo lab for fast-slow SDEs.

Simulates three-time-scale stochastic systems, computes averaged and
homogenized limit equations via ergodic cell-problem solves, and estimates
strong/weak convergence rates against their predicted exponents.
"""

__version__ = "0.1.0"

from .backend import backend_name
from .model import (DeviationRegime, DevTag, MultiscaleSystem, RateModel,
                    Regime, ScaleSchedule, classify_averaging_regime,
                    classify_deviation_regime, make_system,
                    predicted_strong_rate, predicted_weak_rate,
                    verify_assumptions)
from .rng import NoiseBundle, TimeGrid, generate_noise

__all__ = [
    "backend_name",
    "DeviationRegime", "DevTag", "MultiscaleSystem", "RateModel", "Regime",
    "ScaleSchedule", "classify_averaging_regime", "classify_deviation_regime",
    "make_system", "predicted_strong_rate", "predicted_weak_rate",
    "verify_assumptions",
    "NoiseBundle", "TimeGrid", "generate_noise",
]
