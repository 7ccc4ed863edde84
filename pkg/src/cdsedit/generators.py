"""Differentiable generators whose render is the latent being edited.

Two desk-scale parameterizations: the latent itself (identity), and a
trainable low-resolution grid bilinearly upsampled to latent shape, the
minimal stand-in for optimizing a parametric scene model through the
distillation pipeline. Updates are applied by pulling a latent-space
gradient back through render's (linear) Jacobian.
"""

from __future__ import annotations

import numpy as np

from .interp import bilinear_matrix


class IdentityLatentGenerator:
    """The parameters are the latent; render is the identity."""

    kind = "identity_latent"

    def __init__(self, latent: np.ndarray):
        self._z = np.array(latent, dtype=np.float64)

    def render(self, view: int = 0) -> np.ndarray:
        return self._z

    def param_gradient(self, grad_latent: np.ndarray) -> np.ndarray:
        return grad_latent

    def apply_latent_gradient(self, grad_latent: np.ndarray, step_size: float) -> None:
        self._z -= step_size * grad_latent

    @property
    def params(self) -> np.ndarray:
        return self._z

    def state_arrays(self) -> dict:
        return {"params": self._z}

    def load_state_arrays(self, arrays: dict) -> None:
        self._z = np.array(arrays["params"], dtype=np.float64)


class GridGenerator:
    """Trainable (C, G, G) grid rendered by bilinear upsampling.

    render(theta) = U_h theta U_w^T per channel, a fixed linear map, so the
    parameter gradient is the exact transpose U_h^T g U_w. Updates use a
    momentum-free adaptive rule (accumulated squared-gradient scaling) by
    default; plain gradient descent is available with ``adaptive=False``.
    """

    kind = "coordinate_grid_toy"

    def __init__(self, grid: np.ndarray, latent_shape, adaptive: bool = True):
        c, h, w = latent_shape
        if grid.shape[0] != c:
            raise ValueError("grid channel count must match the latent")
        self.grid = np.array(grid, dtype=np.float64)
        self.latent_shape = tuple(latent_shape)
        self._uh = bilinear_matrix(h, grid.shape[1])
        self._uw = bilinear_matrix(w, grid.shape[2])
        self.adaptive = adaptive
        self._accum = np.zeros_like(self.grid)

    @classmethod
    def fit(cls, source: np.ndarray, grid_size: int = 16, adaptive: bool = True):
        """Least-squares grid initialization approximating ``source``."""
        c, h, w = source.shape
        uh = bilinear_matrix(h, grid_size)
        uw = bilinear_matrix(w, grid_size)
        ph = np.linalg.pinv(uh)
        pw = np.linalg.pinv(uw)
        grid = np.einsum("gh,chw,kw->cgk", ph, source, pw)
        return cls(grid, source.shape, adaptive=adaptive)

    def render(self, view: int = 0) -> np.ndarray:
        return np.einsum("hg,cgk,wk->chw", self._uh, self.grid, self._uw)

    def param_gradient(self, grad_latent: np.ndarray) -> np.ndarray:
        return np.einsum("hg,chw,wk->cgk", self._uh, grad_latent, self._uw)

    def apply_latent_gradient(self, grad_latent: np.ndarray, step_size: float) -> None:
        g = self.param_gradient(grad_latent)
        if self.adaptive:
            self._accum += g * g
            g = g / np.sqrt(self._accum + 1e-12)
        self.grid -= step_size * g

    @property
    def params(self) -> np.ndarray:
        return self.grid

    def state_arrays(self) -> dict:
        return {"params": self.grid, "accum": self._accum}

    def load_state_arrays(self, arrays: dict) -> None:
        self.grid = np.array(arrays["params"], dtype=np.float64)
        self._accum = np.array(arrays["accum"], dtype=np.float64)
