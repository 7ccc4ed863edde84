"""Patch sampling and the patch-wise contrastive (PatchNCE) loss.

Queries are patches of the target-branch feature maps; the positive for a
query is the co-located patch of the reference-branch map, and the
negatives are that layer's remaining reference patches. Each (layer, s)
term is the temperature-scaled cross-entropy

    l(h, h+, h-) = -log( exp(h.h+/tau) / (exp(h.h+/tau) + sum exp(h.h-/tau)) )

computed with a stable log-sum-exp. Reference features never receive
gradient; the analytic gradient with respect to the target features is
exposed alongside the loss for the optimization loop.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .backend import FeatureMap

LAYER_POLICIES = ("up_path_no_bottleneck", "all_tapped", "explicit")


@dataclass(frozen=True)
class PatchConfig:
    """Patch geometry and NCE parameters.

    ``patch_size=None`` selects the mixed assignment: 1x1 patches on the
    two coarsest active layers, 2x2 on the finer ones.
    """

    num_patches: int = 256
    patch_size: int | None = None
    tau: float = 0.07
    layer_policy: str = "up_path_no_bottleneck"
    layers: tuple = ()
    normalize: bool = True
    aggregation: str = "sum"
    debug_locations: bool = False

    def __post_init__(self):
        if self.num_patches < 1:
            raise ValueError("num_patches must be >= 1")
        if self.patch_size is not None and self.patch_size < 1:
            raise ValueError("patch_size must be >= 1")
        if self.tau <= 0:
            raise ValueError("tau must be > 0")
        if self.layer_policy not in LAYER_POLICIES:
            raise ValueError(f"unknown layer_policy {self.layer_policy!r}")
        if self.aggregation not in ("mean", "sum"):
            raise ValueError("aggregation must be 'mean' or 'sum'")
        object.__setattr__(self, "layers", tuple(self.layers))


@dataclass
class PatchSet:
    """Flattened patch vectors for one layer and one role."""

    layer_id: str
    locations: tuple
    vectors: np.ndarray  # (S, p*p*C)
    role: str  # "query" | "positive"

    def __post_init__(self):
        if self.role not in ("query", "positive"):
            raise ValueError(f"unknown patch role {self.role!r}")
        if len(set(self.locations)) != len(self.locations):
            raise ValueError("duplicate locations within one patch set")


@dataclass
class CutLoss:
    """Aggregated contrastive loss with per-layer breakdown.

    ``value`` aggregates every (layer, s) term with the configured mode;
    ``per_layer`` holds each layer's own aggregate under the same mode.
    ``locations`` records the sampled patch locations for audit dumps.
    """

    value: float
    per_layer: dict
    num_terms: int
    locations: dict = field(default_factory=dict)


def resolve_layer_policy(layer_ids, cfg: PatchConfig):
    """Select active layers, in depth order, from the tappable list."""
    layer_ids = list(layer_ids)
    if cfg.layer_policy == "all_tapped":
        return layer_ids
    if cfg.layer_policy == "up_path_no_bottleneck":
        return layer_ids[:-1]
    unknown = [l for l in cfg.layers if l not in layer_ids]
    if unknown:
        raise ValueError(f"explicit layer list names unknown layers {unknown}")
    return [l for l in layer_ids if l in cfg.layers]


def assign_patch_sizes(active_specs, cfg: PatchConfig):
    """Per-layer patch side length for (layer_id, (H, W)) active specs."""
    if cfg.patch_size is not None:
        return {layer_id: cfg.patch_size for layer_id, _ in active_specs}
    by_area = sorted(active_specs, key=lambda spec: spec[1][0] * spec[1][1])
    coarse = {layer_id for layer_id, _ in by_area[:2]}
    return {layer_id: (1 if layer_id in coarse else 2) for layer_id, _ in active_specs}


def sample_locations(map_shape, cfg: PatchConfig, rng: np.random.Generator, patch_size=None):
    """Uniform distinct top-left patch coordinates on an (H, W) map.

    Returns min(num_patches, available positions) locations, drawn without
    replacement; deterministic for a given generator state.
    """
    h, w = map_shape
    p = patch_size if patch_size is not None else (cfg.patch_size or 1)
    if h < p or w < p:
        raise ValueError(f"feature map {map_shape} smaller than patch size {p}")
    rows, cols = h - p + 1, w - p + 1
    n_pos = rows * cols
    m = min(cfg.num_patches, n_pos)
    flat = rng.choice(n_pos, size=m, replace=False)
    return [(int(f) // cols, int(f) % cols) for f in flat]


def extract_patches(fm: FeatureMap, locations, p: int, normalize: bool, role: str = "query") -> PatchSet:
    """Gather p x p patches at the given top-left locations.

    Row s is the (C, p, p) block at locations[s] flattened channel-major,
    L2-normalized when requested (all-zero rows are left at zero).
    """
    data = fm.data
    vectors = _gather(data, locations, p)
    if normalize:
        vectors = _normalize_rows(vectors)[0]
    return PatchSet(layer_id=fm.layer_id, locations=tuple(locations), vectors=vectors, role=role)


def _gather(data: np.ndarray, locations, p: int) -> np.ndarray:
    c, h, w = data.shape
    out = np.empty((len(locations), c * p * p))
    for s, (r, col) in enumerate(locations):
        if not (0 <= r <= h - p and 0 <= col <= w - p):
            raise ValueError(f"location {(r, col)} out of bounds for {(h, w)} with p={p}")
        out[s] = data[:, r : r + p, col : col + p].ravel()
    return out


def _normalize_rows(vectors: np.ndarray):
    norms = np.linalg.norm(vectors, axis=1, keepdims=True)
    safe = np.where(norms > 0, norms, 1.0)
    return vectors / safe, norms


def _logsumexp(x: np.ndarray, axis=-1):
    m = np.max(x, axis=axis, keepdims=True)
    return (m + np.log(np.sum(np.exp(x - m), axis=axis, keepdims=True))).squeeze(axis)


def info_nce(query, positive, negatives, tau: float) -> float:
    """Single-term contrastive cross-entropy over one positive and M negatives."""
    if tau <= 0:
        raise ValueError("tau must be > 0")
    query = np.asarray(query, dtype=np.float64)
    positive = np.asarray(positive, dtype=np.float64)
    negatives = np.atleast_2d(np.asarray(negatives, dtype=np.float64))
    if query.shape != positive.shape or negatives.shape[1] != query.shape[0]:
        raise ValueError("query, positive and negatives must share one dimension")
    logits = np.concatenate(([query @ positive], negatives @ query)) / tau
    return float(_logsumexp(logits) - logits[0])


def _match_layers(features_tgt, features_ref):
    ref_by_id = {fm.layer_id: fm for fm in features_ref}
    pairs = []
    for fm in features_tgt:
        if fm.layer_id not in ref_by_id:
            raise ValueError(f"reference branch is missing layer {fm.layer_id!r}")
        other = ref_by_id[fm.layer_id]
        if fm.data.shape != other.data.shape:
            raise ValueError(
                f"layer {fm.layer_id!r} shape mismatch: {fm.data.shape} vs {other.data.shape}"
            )
        pairs.append((fm, other))
    return pairs


def _layer_terms(fm_tgt, fm_ref, locations, p, cfg):
    """Per-patch NCE terms for one layer; keeps what the backward needs."""
    raw_q = _gather(fm_tgt.data, locations, p)
    raw_p = _gather(fm_ref.data, locations, p)
    if cfg.normalize:
        q, q_norms = _normalize_rows(raw_q)
        pos = _normalize_rows(raw_p)[0]
    else:
        q, q_norms = raw_q, None
        pos = raw_p
    logits = (q @ pos.T) / cfg.tau  # (S, S); diagonal = positives
    lse = _logsumexp(logits, axis=1)
    terms = lse - np.diag(logits)
    return terms, (q, q_norms, pos, logits)


def patchnce_loss(features_tgt, features_ref, cfg: PatchConfig, rng: np.random.Generator,
                  locations=None) -> CutLoss:
    """Patch-wise contrastive loss between matched feature-map lists.

    Layers are filtered by ``cfg.layer_policy``; each active layer samples
    its own locations (or reuses ``locations[layer_id]`` when provided,
    which freezes the stochastic part for replay tests).
    """
    return _patchnce(features_tgt, features_ref, cfg, rng, locations, want_grad=False)[0]


def patchnce_loss_and_grad(features_tgt, features_ref, cfg: PatchConfig,
                           rng: np.random.Generator = None, locations=None):
    """Loss plus its analytic gradient w.r.t. each target feature map.

    Returns (CutLoss, {layer_id: array matching the target map}). The
    reference branch is treated as constant.
    """
    return _patchnce(features_tgt, features_ref, cfg, rng, locations, want_grad=True)


def _patchnce(features_tgt, features_ref, cfg, rng, locations, want_grad):
    pairs = _match_layers(features_tgt, features_ref)
    active_ids = resolve_layer_policy([fm.layer_id for fm, _ in pairs], cfg)
    if not active_ids:
        raise ValueError("no layers remain after layer_policy filtering")
    pairs = [(fm, other) for fm, other in pairs if fm.layer_id in active_ids]
    p_sizes = assign_patch_sizes([(fm.layer_id, fm.spatial_shape) for fm, _ in pairs], cfg)

    per_layer = {}
    layer_locs = {}
    layer_ctx = {}
    total = 0.0
    num_terms = 0
    for fm_tgt, fm_ref in pairs:
        lid = fm_tgt.layer_id
        p = p_sizes[lid]
        if locations is not None and lid in locations:
            locs = [tuple(loc) for loc in locations[lid]]
        else:
            if rng is None:
                raise ValueError("an rng is required when locations are not provided")
            locs = sample_locations(fm_tgt.spatial_shape, cfg, rng, patch_size=p)
        terms, ctx = _layer_terms(fm_tgt, fm_ref, locs, p, cfg)
        layer_locs[lid] = tuple(locs)
        layer_ctx[lid] = (ctx, locs, p, fm_tgt.data.shape)
        layer_sum = float(terms.sum())
        per_layer[lid] = layer_sum / len(terms) if cfg.aggregation == "mean" else layer_sum
        total += layer_sum
        num_terms += len(terms)

    value = total / num_terms if cfg.aggregation == "mean" else total
    loss = CutLoss(value=value, per_layer=per_layer, num_terms=num_terms, locations=layer_locs)
    if not want_grad:
        return loss, None

    scale = 1.0 / num_terms if cfg.aggregation == "mean" else 1.0
    grads = {}
    for lid, (ctx, locs, p, map_shape) in layer_ctx.items():
        q, q_norms, pos, logits = ctx
        alpha = np.exp(logits - logits.max(axis=1, keepdims=True))
        alpha /= alpha.sum(axis=1, keepdims=True)
        # d term_s / d logits[s, :] = alpha_s - onehot(s)
        dlogits = alpha.copy()
        dlogits[np.arange(len(locs)), np.arange(len(locs))] -= 1.0
        dq = (dlogits @ pos) * (scale / cfg.tau)
        if cfg.normalize:
            # back through q = raw / ||raw||, zero rows left untouched
            proj = np.sum(dq * q, axis=1, keepdims=True)
            safe = np.where(q_norms > 0, q_norms, 1.0)
            dq = (dq - proj * q) / safe
        grad_map = np.zeros(map_shape)
        c = map_shape[0]
        for s, (r, col) in enumerate(locs):
            grad_map[:, r : r + p, col : col + p] += dq[s].reshape(c, p, p)
        grads[lid] = grad_map
    return loss, grads
