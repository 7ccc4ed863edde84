"""Score-distillation update directions (SDS and DDS).

Both follow the Jacobian-free convention: the squared distillation
objective's gradient is taken as the guided-noise residual itself,

    SDS direction:  eps_g(z_t, y, t) - eps
    DDS direction:  eps_g(z_t, y, t) - eps_g(z_hat_t, y_hat, t)

with one shared (t, eps) draw perturbing both DDS branches, so that
identical branches cancel exactly per draw, not merely in expectation.
The reference branch is a constant: no gradient flows into the source.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .backend import GuidanceConfig, TextEmbedding, cfg_compose
from .schedule import NoiseSchedule, perturb


@dataclass
class BranchResult:
    """One branch evaluation: guided prediction plus conditional-pass taps."""

    eps_guided: np.ndarray
    features: list = field(default_factory=list)
    t: int = 0
    eps_drawn: np.ndarray = None


@dataclass
class DistillGrad:
    grad: np.ndarray
    kind: str  # "sds" | "dds"

    def __post_init__(self):
        if self.kind not in ("sds", "dds"):
            raise ValueError(f"unknown distillation kind {self.kind!r}")
        if not np.all(np.isfinite(self.grad)):
            raise ValueError("distillation gradient contains NaN/Inf")


def eval_branch(backend, z0, emb: TextEmbedding, null_emb: TextEmbedding, t: int,
                eps, g: GuidanceConfig, sched: NoiseSchedule, taps=()) -> BranchResult:
    """Perturb, run conditional and null predictions, compose with CFG.

    Feature maps are tapped from the conditional pass only.
    """
    z_t = perturb(z0, eps, t, sched)
    cond = backend.predict_noise(z_t, emb, t, taps=taps)
    null = backend.predict_noise(z_t, null_emb, t)
    guided = cfg_compose(cond.eps_hat, null.eps_hat, g)
    return BranchResult(eps_guided=guided, features=cond.features, t=int(t), eps_drawn=eps)


def sds_grad(backend, z0, emb, null_emb, t, eps, g, sched) -> DistillGrad:
    """Guided residual against the drawn noise."""
    branch = eval_branch(backend, z0, emb, null_emb, t, eps, g, sched)
    return DistillGrad(grad=branch.eps_guided - eps, kind="sds")


def dds_grad(backend, z0_tgt, z0_ref, emb_tgt, emb_ref, null_emb, t, eps, g, sched,
             taps=()):
    """Difference of the two branches' guided predictions under shared (t, eps).

    Returns (DistillGrad, target BranchResult, reference BranchResult); the
    branch results carry the conditional-pass feature maps for the
    contrastive loss.
    """
    z0_tgt = np.asarray(z0_tgt, dtype=np.float64)
    z0_ref = np.asarray(z0_ref, dtype=np.float64)
    if z0_tgt.shape != z0_ref.shape:
        raise ValueError(f"latent shape mismatch: {z0_tgt.shape} vs {z0_ref.shape}")
    tgt = eval_branch(backend, z0_tgt, emb_tgt, null_emb, t, eps, g, sched, taps=taps)
    ref = eval_branch(backend, z0_ref, emb_ref, null_emb, t, eps, g, sched, taps=taps)
    grad = DistillGrad(grad=tgt.eps_guided - ref.eps_guided, kind="dds")
    return grad, tgt, ref
