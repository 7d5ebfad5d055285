import os

# keep BLAS single-threaded: the arrays are small and campaigns parallelize
# across processes instead
os.environ.setdefault("OPENBLAS_NUM_THREADS", "1")
os.environ.setdefault("OMP_NUM_THREADS", "1")
os.environ.setdefault("MKL_NUM_THREADS", "1")
