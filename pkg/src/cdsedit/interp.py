"""Exact bilinear interpolation as explicit matrices.

Keeping the resampling linear map materialized makes its transpose (the
parameter gradient of grid-based generators) exact rather than approximate.
"""

from __future__ import annotations

import numpy as np


def bilinear_matrix(n_out: int, n_in: int) -> np.ndarray:
    """Row-stochastic align-corners interpolation matrix (n_out x n_in)."""
    mat = np.zeros((n_out, n_in))
    if n_in == 1:
        mat[:, 0] = 1.0
        return mat
    src = np.linspace(0.0, n_in - 1, n_out)
    lo = np.minimum(np.floor(src).astype(int), n_in - 2)
    frac = src - lo
    mat[np.arange(n_out), lo] = 1.0 - frac
    mat[np.arange(n_out), lo + 1] = frac
    return mat


def upsample_bilinear(grid: np.ndarray, height: int, width: int) -> np.ndarray:
    """Bilinearly upsample a (C, gh, gw) grid to (C, height, width)."""
    _, gh, gw = grid.shape
    uh = bilinear_matrix(height, gh)
    uw = bilinear_matrix(width, gw)
    return np.einsum("hg,cgk,wk->chw", uh, grid, uw)
