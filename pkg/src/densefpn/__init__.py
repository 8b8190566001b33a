"""Dense multiscale feature-fusion pyramid detector kit on a small numpy autodiff engine."""

from .tensor import Parameter, Tensor, backward, no_grad

__version__ = "0.1.0"

__all__ = ["Parameter", "Tensor", "backward", "no_grad", "__version__"]
