"""Dataset condensation with class-wise BN supervision and prunable soft-label stores."""

__version__ = "0.1.0"

from lpld.tensor import Tensor
from lpld.bn import (
    BNLayerState,
    BoundInputs,
    class_appearance_prob,
    required_updates,
    monte_carlo_convergence,
)

__all__ = [
    "Tensor",
    "BNLayerState",
    "BoundInputs",
    "class_appearance_prob",
    "required_updates",
    "monte_carlo_convergence",
    "__version__",
]
