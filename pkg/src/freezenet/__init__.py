"""FreezeNet: train a small trainable subset of weights, freeze the rest at
their seeded random initialization, and store networks as seed + mask + the
trained values.

Replay determinism is part of the package contract (two runs with the same
manifest must produce byte-identical artifacts), so BLAS thread pools are
pinned to one thread before numpy is first imported. Override the env vars
beforehand to opt out.
"""

import os as _os

for _var in ("OPENBLAS_NUM_THREADS", "OMP_NUM_THREADS", "MKL_NUM_THREADS"):
    _os.environ.setdefault(_var, "1")

__version__ = "0.1.0"
