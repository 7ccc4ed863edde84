"""The contrastive score-distillation editing loop.

Each step draws one (t, eps) pair, evaluates the target and reference
branches on it, and updates the generator parameters along

    (dz0/dtheta)^T [ dds_direction + lambda * d l_con / d z0 ]

where the DDS direction is the Jacobian-free guided residual difference
and the contrastive gradient flows through the backend's feature taps
(or, for the score-output ablation arm, through the guided predictions
themselves). Timestep/noise draws and patch-location draws come from two
independent seeded streams so that sweeps over lambda see identical
(t, eps) sequences under a shared seed.
"""

from __future__ import annotations

import time
import warnings
from dataclasses import dataclass, field, replace

import numpy as np

from .arrayio import load_arrays, save_arrays
from .backend import FeatureMap, GuidanceConfig, cfg_compose
from .cut import PatchConfig, patchnce_loss_and_grad, resolve_layer_policy
from .errors import NonFiniteUpdateError
from .generators import GridGenerator, IdentityLatentGenerator
from .interp import bilinear_matrix
from .schedule import NoiseSchedule, TimestepRange, perturb, sample_timestep

LOSS_LOCATIONS = ("self_attention", "score_output", "cross_attention_placeholder")


@dataclass(frozen=True)
class EditConfig:
    guidance: GuidanceConfig = field(default_factory=GuidanceConfig)
    lambda_con: float = 3.0
    steps: int = 200
    step_size: float = 0.02
    t_range: TimestepRange = field(default_factory=TimestepRange)
    patch: PatchConfig = field(default_factory=PatchConfig)
    seed: int = 0
    log_every: int = 20
    loss_location: str = "self_attention"

    def __post_init__(self):
        if self.steps < 1:
            raise ValueError("steps must be >= 1")
        if self.step_size <= 0:
            raise ValueError("step_size must be > 0")
        if self.lambda_con < 0:
            raise ValueError("lambda_con must be >= 0")
        if self.log_every < 1:
            raise ValueError("log_every must be >= 1")
        if self.loss_location not in LOSS_LOCATIONS:
            raise ValueError(f"unknown loss_location {self.loss_location!r}")

    @property
    def method(self) -> str:
        return "cds" if self.lambda_con > 0 else "dds"

    def effective_step_size(self, step: int) -> float:
        """Constant step with a linear cooldown over the final 20% of steps.

        The cooldown freezes the iterate at its stochastic steady state
        instead of sampling one jittery endpoint; the transient phase is
        untouched.
        """
        frac = step / self.steps
        if frac <= 0.8:
            return self.step_size
        return self.step_size * max(0.05, 1.0 - (frac - 0.8) / 0.2 * 0.95)


@dataclass
class StepRecord:
    step: int
    t: int
    dds_norm: float
    cut_loss: float
    locations: dict | None = None


@dataclass
class EditState:
    generator: object
    step: int = 0
    history: list = field(default_factory=list)
    rng_noise: np.random.Generator = None
    rng_patches: np.random.Generator = None
    warned_fallback: bool = False

    @classmethod
    def fresh(cls, generator, seed: int):
        return cls(
            generator=generator,
            rng_noise=np.random.default_rng(np.random.SeedSequence([int(seed), 0])),
            rng_patches=np.random.default_rng(np.random.SeedSequence([int(seed), 1])),
        )


@dataclass
class EditResult:
    final_latent: np.ndarray
    log: list
    duration_s: float
    config: EditConfig
    snapshots: list = field(default_factory=list)  # (step, latent-space gradient)


def resolve_active_layers(descriptor, cfg: EditConfig):
    """Tap layers the contrastive term uses for this loss location."""
    if cfg.loss_location == "score_output":
        return ()
    if cfg.loss_location == "cross_attention_placeholder":
        # The toy backend has no text cross-attention; its bottleneck layer is
        # the designated semantic-mixing analogue for this ablation arm.
        return (descriptor.bottleneck_layer,)
    return tuple(resolve_layer_policy(descriptor.tap_layer_ids, cfg.patch))


def _fallback_latent_gradient(grads: dict, latent_shape, warned: bool):
    """Degraded contrastive pullback for non-differentiable backends.

    Channel-averages each feature-space gradient, bilinearly resizes it to
    the latent plane, and broadcasts it over latent channels. A loud,
    documented approximation, not a substitute for real backpropagation.
    """
    if not warned:
        warnings.warn(
            "backend is not differentiable: applying the contrastive gradient "
            "through a final-layer linearization only",
            RuntimeWarning,
            stacklevel=3,
        )
    c, h, w = latent_shape
    acc = np.zeros((h, w))
    for g in grads.values():
        plane = g.mean(axis=0)
        if plane.shape != (h, w):
            uh = bilinear_matrix(h, plane.shape[0])
            uw = bilinear_matrix(w, plane.shape[1])
            plane = uh @ plane @ uw.T
        acc += plane
    acc /= max(len(grads), 1)
    return np.broadcast_to(acc, (c, h, w)).copy()


def _cut_gradient(patch_cfg: PatchConfig, loss_location: str, a_t: float, omega: float,
                  guided_tgt, guided_ref, feats_tgt, feats_ref, vjp_tgt, vjp_null_tgt,
                  differentiable: bool, latent_shape, rng, locations, warned: bool):
    """Contrastive loss and its gradient w.r.t. the clean target latent.

    Returns (CutLoss, dz0, fallback_used).
    """
    if loss_location == "score_output":
        fm_t = [FeatureMap("score_output", guided_tgt, "score_output")]
        fm_r = [FeatureMap("score_output", guided_ref, "score_output")]
        pcfg = replace(patch_cfg, layer_policy="explicit", layers=("score_output",))
        loss, grads = patchnce_loss_and_grad(fm_t, fm_r, pcfg, rng, locations)
        d_guided = grads["score_output"]
        if differentiable:
            dz_t = (1.0 + omega) * vjp_tgt(d_eps=d_guided) - omega * vjp_null_tgt(d_eps=d_guided)
            return loss, a_t * dz_t, False
        return loss, _fallback_latent_gradient(grads, latent_shape, warned), True

    active = tuple(fm.layer_id for fm in feats_tgt)
    pcfg = replace(patch_cfg, layer_policy="explicit", layers=active)
    loss, grads = patchnce_loss_and_grad(feats_tgt, feats_ref, pcfg, rng, locations)
    if differentiable:
        dz_t = vjp_tgt(d_features=grads)
        return loss, a_t * dz_t, False
    return loss, _fallback_latent_gradient(grads, latent_shape, warned), True


def _step_core(state: EditState, source, emb_tgt, emb_ref, null_emb, cfg: EditConfig,
               backend, sched: NoiseSchedule, source_view: int = 0):
    """One optimization step; returns the latent-space gradient and record."""
    descriptor = backend.descriptor
    t = sample_timestep(state.rng_noise, cfg.t_range)
    eps = state.rng_noise.standard_normal(descriptor.latent_shape)
    a_t = sched.a[t]

    z0 = state.generator.render(view=source_view)
    z_t = perturb(z0, eps, t, sched)
    zr_t = perturb(source, eps, t, sched)

    use_cut = cfg.lambda_con > 0
    taps = resolve_active_layers(descriptor, cfg) if use_cut else ()
    need_vjp = use_cut and descriptor.differentiable
    need_null_vjp = need_vjp and cfg.loss_location == "score_output"

    if need_vjp:
        out_cond_tgt, vjp_tgt = backend.predict_noise_with_vjp(z_t, emb_tgt, t, taps=taps)
    else:
        out_cond_tgt, vjp_tgt = backend.predict_noise(z_t, emb_tgt, t, taps=taps), None
    if need_null_vjp:
        out_null_tgt, vjp_null_tgt = backend.predict_noise_with_vjp(z_t, null_emb, t)
    else:
        out_null_tgt, vjp_null_tgt = backend.predict_noise(z_t, null_emb, t), None
    out_cond_ref = backend.predict_noise(zr_t, emb_ref, t, taps=taps)
    out_null_ref = backend.predict_noise(zr_t, null_emb, t)

    guided_tgt = cfg_compose(out_cond_tgt.eps_hat, out_null_tgt.eps_hat, cfg.guidance)
    guided_ref = cfg_compose(out_cond_ref.eps_hat, out_null_ref.eps_hat, cfg.guidance)
    dds = guided_tgt - guided_ref

    cut_value = 0.0
    locations = None
    grad = dds
    if use_cut:
        loss, dz0_cut, fallback = _cut_gradient(
            cfg.patch, cfg.loss_location, a_t, cfg.guidance.omega,
            guided_tgt, guided_ref, out_cond_tgt.features, out_cond_ref.features,
            vjp_tgt, vjp_null_tgt, descriptor.differentiable,
            descriptor.latent_shape, state.rng_patches, None, state.warned_fallback,
        )
        state.warned_fallback = state.warned_fallback or fallback
        cut_value = loss.value
        if cfg.patch.debug_locations:
            locations = {k: [list(loc) for loc in v] for k, v in loss.locations.items()}
        grad = dds + cfg.lambda_con * dz0_cut

    if not np.all(np.isfinite(grad)):
        raise NonFiniteUpdateError(state.step, "gradient")
    state.generator.apply_latent_gradient(grad, cfg.effective_step_size(state.step))
    if not np.all(np.isfinite(state.generator.params)):
        raise NonFiniteUpdateError(state.step, "parameters")

    record = StepRecord(
        step=state.step,
        t=t,
        dds_norm=float(np.linalg.norm(dds)),
        cut_loss=float(cut_value),
        locations=locations,
    )
    state.history.append(record)
    state.step += 1
    return grad, record


def cds_step(state: EditState, source, emb_tgt, emb_ref, null_emb, cfg: EditConfig,
             backend, sched: NoiseSchedule) -> EditState:
    """Apply one contrastive score-distillation update to the state."""
    _step_core(state, np.asarray(source, dtype=np.float64), emb_tgt, emb_ref, null_emb,
               cfg, backend, sched)
    return state


def contrastive_term(backend, z0_tgt, z0_ref, t, eps, sched, patch_cfg: PatchConfig,
                     emb_tgt=None, null_emb=None, guidance: GuidanceConfig = None,
                     loss_location: str = "self_attention", rng=None, locations=None):
    """Standalone contrastive loss + gradient at a fixed (t, eps) draw.

    Mirrors the in-loop wiring exactly; used for finite-difference checks
    and frozen-randomness descent tests. Returns (CutLoss, dz0).
    """
    descriptor = backend.descriptor
    guidance = guidance or GuidanceConfig()
    z_t = perturb(z0_tgt, eps, t, sched)
    zr_t = perturb(z0_ref, eps, t, sched)
    a_t = sched.a[t]
    if loss_location == "score_output":
        if emb_tgt is None or null_emb is None:
            raise ValueError("score_output term requires emb_tgt and null_emb")
        out_cond, vjp_tgt = backend.predict_noise_with_vjp(z_t, emb_tgt, t)
        out_null, vjp_null = backend.predict_noise_with_vjp(z_t, null_emb, t)
        guided_tgt = cfg_compose(out_cond.eps_hat, out_null.eps_hat, guidance)
        ref_cond = backend.predict_noise(zr_t, emb_tgt, t)
        ref_null = backend.predict_noise(zr_t, null_emb, t)
        guided_ref = cfg_compose(ref_cond.eps_hat, ref_null.eps_hat, guidance)
        loss, dz0, _ = _cut_gradient(
            patch_cfg, loss_location, a_t, guidance.omega, guided_tgt, guided_ref,
            [], [], vjp_tgt, vjp_null, descriptor.differentiable,
            descriptor.latent_shape, rng, locations, False,
        )
        return loss, dz0
    if loss_location == "cross_attention_placeholder":
        taps = (descriptor.bottleneck_layer,)
    else:
        taps = tuple(resolve_layer_policy(descriptor.tap_layer_ids, patch_cfg))
    # toy taps are prompt-independent, so the null embedding is a fine default
    emb = emb_tgt if emb_tgt is not None else backend.embed_prompt("")
    out_tgt, vjp_tgt = backend.predict_noise_with_vjp(z_t, emb, t, taps=taps)
    feats_ref = backend.predict_noise(zr_t, emb, t, taps=taps).features
    loss, dz0, _ = _cut_gradient(
        patch_cfg, "self_attention", a_t, guidance.omega, None, None,
        out_tgt.features, feats_ref, vjp_tgt, None, descriptor.differentiable,
        descriptor.latent_shape, rng, locations, False,
    )
    return loss, dz0


def _run_loop(state: EditState, sources, emb_tgt, emb_ref, null_emb, cfg, backend, sched,
              checkpoint_dir=None):
    cfg.t_range.validate_against(sched)
    t0 = time.perf_counter()
    snapshots = []
    n_views = len(sources)
    while state.step < cfg.steps:
        view = state.step % n_views
        grad, _ = _step_core(state, sources[view], emb_tgt, emb_ref, null_emb, cfg,
                             backend, sched, source_view=view)
        done = state.step - 1
        if done % cfg.log_every == 0 or state.step == cfg.steps:
            snapshots.append((done, grad))
            if checkpoint_dir is not None:
                save_edit_state(f"{checkpoint_dir}/state_step_{done:05d}.ckpt", state)
    duration = time.perf_counter() - t0
    return EditResult(
        final_latent=state.generator.render().copy(),
        log=state.history,
        duration_s=duration,
        config=cfg,
        snapshots=snapshots,
    )


def run_edit(source, prompt_ref: str, prompt_tgt: str, cfg: EditConfig, backend,
             sched: NoiseSchedule, state: EditState = None, checkpoint_dir=None) -> EditResult:
    """Optimize a copy of ``source`` from the reference toward the target prompt.

    ``state`` may be a previously checkpointed EditState to resume from;
    the caller must pass the same source, prompts and config.
    """
    source = np.asarray(source, dtype=np.float64)
    if source.shape != tuple(backend.descriptor.latent_shape):
        raise ValueError(
            f"source shape {source.shape} != backend latent {backend.descriptor.latent_shape}"
        )
    emb_ref = backend.embed_prompt(prompt_ref)
    emb_tgt = backend.embed_prompt(prompt_tgt)
    null_emb = backend.embed_prompt("")
    if state is None:
        state = EditState.fresh(IdentityLatentGenerator(source), cfg.seed)
    return _run_loop(state, [source], emb_tgt, emb_ref, null_emb, cfg, backend, sched,
                     checkpoint_dir)


def run_generator_edit(generator, source_views, prompt_ref: str, prompt_tgt: str,
                       cfg: EditConfig, backend, sched: NoiseSchedule,
                       state: EditState = None, checkpoint_dir=None) -> EditResult:
    """Same update rule as run_edit, with gradients pulled into generator params.

    With several source views, step k pairs the render with
    ``source_views[k % len(source_views)]``.
    """
    if not source_views:
        raise ValueError("at least one source view is required")
    sources = [np.asarray(v, dtype=np.float64) for v in source_views]
    for v in sources:
        if v.shape != tuple(backend.descriptor.latent_shape):
            raise ValueError("every source view must match the backend latent shape")
    emb_ref = backend.embed_prompt(prompt_ref)
    emb_tgt = backend.embed_prompt(prompt_tgt)
    null_emb = backend.embed_prompt("")
    if state is None:
        state = EditState.fresh(generator, cfg.seed)
    return _run_loop(state, sources, emb_tgt, emb_ref, null_emb, cfg, backend, sched,
                     checkpoint_dir)


def encode_image(backend, image: np.ndarray) -> np.ndarray:
    """Image -> latent via the backend's encoder hook."""
    return backend.encode_image(image)


def decode_latent(backend, z: np.ndarray) -> np.ndarray:
    """Latent -> image via the backend's decoder hook."""
    return backend.decode_latent(z)


# -- checkpointing -----------------------------------------------------------


def save_edit_state(path, state: EditState) -> None:
    """Serialize an EditState to the binary array container."""
    gen = state.generator
    arrays = {f"gen.{k}": v for k, v in gen.state_arrays().items()}
    hist = state.history
    arrays["history.step"] = np.array([r.step for r in hist], dtype=np.int64)
    arrays["history.t"] = np.array([r.t for r in hist], dtype=np.int64)
    arrays["history.dds_norm"] = np.array([r.dds_norm for r in hist])
    arrays["history.cut_loss"] = np.array([r.cut_loss for r in hist])
    meta = {
        "step": state.step,
        "generator_kind": gen.kind,
        "latent_shape": list(gen.render().shape),
        "rng_noise_state": state.rng_noise.bit_generator.state,
        "rng_patches_state": state.rng_patches.bit_generator.state,
        "warned_fallback": state.warned_fallback,
    }
    save_arrays(path, arrays, meta)


def load_edit_state(path) -> EditState:
    arrays, meta = load_arrays(path)
    gen_arrays = {k[4:]: v for k, v in arrays.items() if k.startswith("gen.")}
    if meta["generator_kind"] == IdentityLatentGenerator.kind:
        gen = IdentityLatentGenerator(gen_arrays["params"])
    elif meta["generator_kind"] == GridGenerator.kind:
        gen = GridGenerator(gen_arrays["params"], tuple(meta["latent_shape"]))
        gen.load_state_arrays(gen_arrays)
    else:
        raise ValueError(f"unknown generator kind {meta['generator_kind']!r}")
    history = [
        StepRecord(step=int(s), t=int(t), dds_norm=float(d), cut_loss=float(c))
        for s, t, d, c in zip(
            arrays["history.step"], arrays["history.t"],
            arrays["history.dds_norm"], arrays["history.cut_loss"],
        )
    ]
    rng_noise = np.random.default_rng()
    rng_noise.bit_generator.state = meta["rng_noise_state"]
    rng_patches = np.random.default_rng()
    rng_patches.bit_generator.state = meta["rng_patches_state"]
    return EditState(
        generator=gen,
        step=int(meta["step"]),
        history=history,
        rng_noise=rng_noise,
        rng_patches=rng_patches,
        warned_fallback=bool(meta["warned_fallback"]),
    )
