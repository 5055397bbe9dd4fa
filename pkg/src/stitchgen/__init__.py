"""Latent-space model stitching and reward alignment on synthetic scenes."""

import os

# Pin BLAS to one thread before numpy loads anywhere in the package, so that
# reduction order (and therefore every artifact byte) is reproducible.
for _var in ("OPENBLAS_NUM_THREADS", "OMP_NUM_THREADS", "MKL_NUM_THREADS"):
    os.environ.setdefault(_var, "1")

__version__ = "0.1.0"
