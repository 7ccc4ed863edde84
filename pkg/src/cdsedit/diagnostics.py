"""Gradient heatmaps, a structure-distance proxy, and run-log summaries.

The structure proxy compares spatial cosine self-similarity matrices of
feature maps: positions whose pairwise similarity pattern changed move the
Frobenius distance away from zero, while global rescaling does not. It is
a pseudometric (nonnegative, symmetric, zero on identical inputs).
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .backend import FeatureMap


@dataclass
class Heatmap:
    data: np.ndarray  # (H, W), in [0, 1] after normalization
    normalization: str  # "per_image" | "global"
    colormap: str = "gray"


@dataclass
class StructureDistance:
    value: float
    layer_id: str
    definition: str = "self-similarity-frobenius"


def gradient_heatmap(grad: np.ndarray, normalization: str = "per_image",
                     global_max: float = None, colormap: str = "gray") -> Heatmap:
    """Per-pixel channel L2 magnitude of a latent-shaped gradient."""
    grad = np.asarray(grad, dtype=np.float64)
    if not np.all(np.isfinite(grad)):
        raise ValueError("gradient contains NaN/Inf")
    if grad.ndim == 2:
        grad = grad[None]
    mag = np.sqrt(np.sum(grad * grad, axis=0))
    if normalization == "per_image":
        peak = mag.max()
    elif normalization == "global":
        if global_max is None or global_max <= 0:
            raise ValueError("global normalization requires a positive global_max")
        peak = global_max
    else:
        raise ValueError(f"unknown normalization {normalization!r}")
    if peak > 0:
        mag = np.minimum(mag / peak, 1.0)
    return Heatmap(data=mag, normalization=normalization, colormap=colormap)


def heatmap_pixels(hm: Heatmap) -> np.ndarray:
    """Render a heatmap to uint8 pixels (grayscale or colormapped RGB)."""
    if hm.colormap == "gray":
        return np.rint(hm.data * 255.0).astype(np.uint8)
    import matplotlib

    cmap = matplotlib.colormaps[hm.colormap]
    rgba = cmap(hm.data)
    return np.rint(rgba[..., :3] * 255.0).astype(np.uint8)


def _cosine_self_similarity(fm: FeatureMap) -> np.ndarray:
    c = fm.data.shape[0]
    vectors = fm.data.reshape(c, -1).T  # (N, C)
    norms = np.linalg.norm(vectors, axis=1, keepdims=True)
    unit = np.where(norms > 0, vectors / np.where(norms > 0, norms, 1.0), 0.0)
    return unit @ unit.T


def self_similarity_distance(features_a: FeatureMap, features_b: FeatureMap) -> StructureDistance:
    """Frobenius distance of spatial cosine self-similarity matrices, / N."""
    if features_a.data.shape != features_b.data.shape:
        raise ValueError(
            f"feature shape mismatch: {features_a.data.shape} vs {features_b.data.shape}"
        )
    sim_a = _cosine_self_similarity(features_a)
    sim_b = _cosine_self_similarity(features_b)
    n = sim_a.shape[0]
    value = float(np.linalg.norm(sim_a - sim_b, ord="fro") / n)
    return StructureDistance(value=value, layer_id=features_a.layer_id)


def default_structure_layer(descriptor) -> str:
    """Coarsest non-bottleneck tap layer (the most spatially summarized)."""
    candidates = descriptor.tap_layers[:-1] or descriptor.tap_layers
    coarsest = min(candidates, key=lambda s: s.height * s.width)
    return coarsest.layer_id

def structure_distance_between_latents(backend, z_a, z_b, layer_id: str = None) -> StructureDistance:
    """Structure proxy between two clean latents via the backend's taps."""
    if layer_id is None:
        layer_id = default_structure_layer(backend.descriptor)
    fa = backend.feature_taps(z_a, taps=(layer_id,))[0]
    fb = backend.feature_taps(z_b, taps=(layer_id,))[0]
    return self_similarity_distance(fa, fb)


def summarize_run(result) -> dict:
    """Min/max/final per logged series plus the largest contrastive drop."""
    log = result.log
    if not log:
        raise ValueError("cannot summarize an empty run log")
    out = {"steps": len(log), "wall_clock_s": result.duration_s}
    for name in ("dds_norm", "cut_loss"):
        series = np.array([getattr(r, name) for r in log])
        out[name] = {
            "min": float(series.min()),
            "min_step": int(series.argmin()),
            "max": float(series.max()),
            "max_step": int(series.argmax()),
            "final": float(series[-1]),
        }
    cut = np.array([r.cut_loss for r in log])
    if len(cut) > 1:
        drops = cut[:-1] - cut[1:]
        best = int(drops.argmax())
        out["cut_loss"]["max_drop_step"] = best + 1 if drops[best] > 0 else None
    else:
        out["cut_loss"]["max_drop_step"] = None
    return out
