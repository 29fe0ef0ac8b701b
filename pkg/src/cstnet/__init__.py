"""RGB-T tracking with cross-modal fusion inside a shared-weight ViT.

Set ``CSTNET_THREADS`` before import to cap the BLAS worker threads.
"""
import os as _os

_threads = _os.environ.get("CSTNET_THREADS")
if _threads:
    for _var in ("OMP_NUM_THREADS", "OPENBLAS_NUM_THREADS", "MKL_NUM_THREADS"):
        _os.environ.setdefault(_var, _threads)

from .config import FULL, SMALL, TINY, TINY_SMALL, ModelConfig  # noqa: E402
from .model import CSTNet, build_model  # noqa: E402
from .tensor import Tape, Tensor, precision  # noqa: E402

__all__ = ["ModelConfig", "FULL", "SMALL", "TINY", "TINY_SMALL", "CSTNet", "build_model",
           "Tape", "Tensor", "precision"]
__version__ = "0.1.0"
