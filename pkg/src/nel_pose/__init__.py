"""Render-and-compare 6D pose inference with a per-pixel embedding mixture likelihood."""

import os

# the bundled TBB is too old for numba and only produces a warning; the
# work-queue layer is always available
os.environ.setdefault("NUMBA_THREADING_LAYER", "workqueue")
