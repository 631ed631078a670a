"""Keep BLAS single-threaded so measured runtimes reflect one core.

Must run before numpy's first import, which is why it sits at conftest top.
"""
import os

for var in ("OPENBLAS_NUM_THREADS", "OMP_NUM_THREADS", "MKL_NUM_THREADS"):
    os.environ.setdefault(var, "1")
