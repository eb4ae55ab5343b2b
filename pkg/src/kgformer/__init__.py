"""Knowledge-graph-enhanced encoder-decoder forecasting toolkit."""

import threadpoolctl as _threadpoolctl

# One BLAS thread: the batched attention gemms are too small for threading
# to pay off here, and a fixed thread count keeps runs bit-reproducible.
_BLAS_LIMIT = _threadpoolctl.threadpool_limits(limits=1, user_api="blas")

__version__ = "0.1.0"
