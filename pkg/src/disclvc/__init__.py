"""Controllable zero-shot voice conversion at desk scale.

Content/prosody/timbre disentanglement, a flow-matching mel generator and a
masked prosody-token transformer, all on a small numpy autodiff engine.
"""
import os as _os

# DVC_THREADS caps BLAS worker threads; it must be applied before numpy loads.
if _os.environ.get("DVC_THREADS"):
    for _var in ("OMP_NUM_THREADS", "OPENBLAS_NUM_THREADS", "MKL_NUM_THREADS"):
        _os.environ.setdefault(_var, _os.environ["DVC_THREADS"])

__version__ = "0.1.0"
