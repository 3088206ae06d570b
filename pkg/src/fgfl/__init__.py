"""Federated graph-attention learning on multilayer brain-connectivity graphs."""

import os

# Every matrix in this workload is small (tens of KiB); multithreaded BLAS
# only adds dispatch overhead and nondeterministic timing. Respect any
# explicit user setting. Effective only if numpy is not yet loaded.
os.environ.setdefault("OPENBLAS_NUM_THREADS", "1")
os.environ.setdefault("OMP_NUM_THREADS", "1")

from . import autodiff, dataio, datagen, explain, federation, graphs, model, training, transport, wire  # noqa: E402,F401

__version__ = "0.1.0"
