import os

# pin BLAS threading before numpy loads: determinism contract is per thread
# count, and single-threaded GEMM is faster at these tensor sizes anyway
os.environ.setdefault("OMP_NUM_THREADS", "1")
os.environ.setdefault("OPENBLAS_NUM_THREADS", "1")
os.environ.setdefault("MKL_NUM_THREADS", "1")

import numpy as np
import pytest

from panomamba.pano import EquirectImage, equirect_dir_grid
from panomamba.tensor import Tensor


def band_limited_panorama(w=256, h=128):
    """Smooth full-sphere test image (low angular frequencies only)."""
    dirs = equirect_dir_grid(w, h)
    x, y, z = dirs[..., 0], dirs[..., 1], dirs[..., 2]
    img = np.stack(
        [
            0.5 + 0.25 * np.sin(2 * x) + 0.15 * y,
            0.5 + 0.2 * np.cos(2 * z) + 0.1 * np.sin(1.5 * y),
            0.5 + 0.2 * x * z + 0.15 * np.cos(2 * y),
        ],
        axis=-1,
    )
    return EquirectImage(Tensor(np.clip(img, 0, 1)))


@pytest.fixture(scope="session")
def smooth_pano():
    return band_limited_panorama()
