"""One-step generator distillation against analytic teachers, with the
divergence being minimized selectable from a closed-form catalog and every
approximated quantity checkable against exact oracles."""

from .distill import RunConfig, TrainState, train, train_step
from .divergence import catalog, make_custom, weight_h
from .errors import FDistillError
from .teacher import IsotropicGaussianMixture, NoiseSchedule, make_teacher

__version__ = "0.1.0"

__all__ = [
    "RunConfig",
    "TrainState",
    "train",
    "train_step",
    "catalog",
    "make_custom",
    "weight_h",
    "FDistillError",
    "IsotropicGaussianMixture",
    "NoiseSchedule",
    "make_teacher",
    "__version__",
]
