"""Attention-based context detector (numpy implementation).

Submodules: ``tensor`` (autodiff), ``backbone``, ``local_context``,
``global_attention``, ``head``, ``synth``, ``evaluation``, ``model``,
``runner`` and ``cli``.
"""

from .model import ACCNN, ModelConfig
from .tensor import Tensor, backward, grad_check, no_grad

__version__ = "0.1.0"

__all__ = ["ACCNN", "ModelConfig", "Tensor", "backward", "grad_check", "no_grad", "__version__"]
