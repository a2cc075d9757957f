"""Counterspeech generation pipeline: multi-task SFT, LoRA adaptation and PPO.

Everything is float64 numpy on a tape-based autodiff engine; the hot kernels
(layer norm, softmax, gelu, cross-entropy, LCS) run under numba when available.
"""

from .kernels import BACKEND

__version__ = "0.1.0"

__all__ = ["BACKEND", "__version__"]
