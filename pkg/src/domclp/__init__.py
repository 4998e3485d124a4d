"""Domain-wise contrastive learning with prototype mixup, at desk scale."""
from .kernels import BACKEND

__version__ = "0.1.0"
__all__ = ["BACKEND", "__version__"]
