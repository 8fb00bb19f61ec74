"""Complex-valued convolutional networks for SAR target recognition, in numpy."""
from .tensor import ComplexTensor, RealTensor, ShapeError

__version__ = "0.1.0"

__all__ = ["ComplexTensor", "RealTensor", "ShapeError", "__version__"]
