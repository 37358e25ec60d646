from .gradcheck import numeric_gradient, relative_error
from .layers import (BatchNorm, Conv1d, Dense, Dropout, Flatten, Layer, Parameter, ReLU,
                     Sequential, ShapeError, StateError)
from .optim import SGDMomentum, TrainingError

__all__ = [
    "BatchNorm", "Conv1d", "Dense", "Dropout", "Flatten", "Layer", "Parameter", "ReLU",
    "Sequential", "ShapeError", "StateError", "SGDMomentum", "TrainingError",
    "numeric_gradient", "relative_error",
]
