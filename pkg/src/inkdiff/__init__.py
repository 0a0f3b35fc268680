"""Toy-scale text-conditioned diffusion with LoRA and DreamBooth fine-tuning."""

import os as _os

# cap BLAS threads before numpy is first imported
_threads = _os.environ.get("INKDIFF_THREADS")
if _threads:
    for _var in ("OMP_NUM_THREADS", "OPENBLAS_NUM_THREADS", "MKL_NUM_THREADS"):
        _os.environ.setdefault(_var, _threads)

__version__ = "0.1.0"
