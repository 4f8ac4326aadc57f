"""Single-shot optical spin readout: simulation and analysis toolkit."""

from .core import (DomainError, EfficiencyBudget, FitError, Geometry, ReadoutScenario, Source, Spin,
                   overall_efficiency, scenario_preset)

__version__ = "0.1.0"

__all__ = [
    "DomainError", "EfficiencyBudget", "FitError", "Geometry", "ReadoutScenario", "Source", "Spin",
    "overall_efficiency", "scenario_preset", "__version__",
]
