"""Denoiser backends: noise prediction plus tapped feature maps.

The analytic toy backend models clean latents as a K-class Gaussian
mixture, one smooth mean field per vocabulary word, and predicts noise
with the exact posterior-mean estimator. For the forward process
z_t = a z0 + b eps with prior N(mu, sigma^2 I) per class,

    E[z0 | z_t, k] = mu_k + (a sigma^2 / (a^2 sigma^2 + b^2)) (z_t - a mu_k)
    eps_hat_k      = (z_t - a E[z0 | z_t, k]) / b
                   = b (z_t - a mu_k) / (a^2 sigma^2 + b^2)

The null-prompt prediction marginalizes over classes with the posterior
mixture weights, which keeps it closed-form and differentiable. A real
latent-diffusion adapter is specified as an interface stub only.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import BackendUnavailableError
from .interp import upsample_bilinear
from .schedule import NoiseSchedule
from .taps import FeatureTapStack

DEFAULT_VOCAB = ("cat", "dog", "cow", "pig", "horse", "sheep", "tiger", "rabbit")
NULL_PROMPT = ""


@dataclass(frozen=True)
class TextEmbedding:
    """Prompt embedding; the null kind corresponds to the empty prompt."""

    vector: np.ndarray
    kind: str  # "conditional" | "null"

    def __post_init__(self):
        v = np.asarray(self.vector, dtype=np.float64)
        if not np.all(np.isfinite(v)):
            raise ValueError("embedding entries must be finite")
        v.setflags(write=False)
        object.__setattr__(self, "vector", v)
        if self.kind not in ("conditional", "null"):
            raise ValueError(f"unknown embedding kind {self.kind!r}")


@dataclass
class FeatureMap:
    """One tapped activation: (C_l, H_l, W_l) array plus tap metadata."""

    layer_id: str
    data: np.ndarray
    tap_point: str

    @property
    def spatial_shape(self):
        return self.data.shape[1:]


@dataclass
class DenoiserOutput:
    """Noise prediction and the requested feature maps, ordered by depth."""

    eps_hat: np.ndarray
    features: list[FeatureMap] = field(default_factory=list)


@dataclass(frozen=True)
class GuidanceConfig:
    """Classifier-free guidance scale."""

    omega: float = 7.5

    def __post_init__(self):
        if not np.isfinite(self.omega) or self.omega < 0:
            raise ValueError("guidance omega must be finite and >= 0")


@dataclass(frozen=True)
class TapLayerSpec:
    layer_id: str
    channels: int
    height: int
    width: int
    tap_point: str


@dataclass(frozen=True)
class BackendDescriptor:
    name: str
    latent_shape: tuple
    embedding_dim: int
    tap_layers: tuple
    differentiable: bool

    def __post_init__(self):
        if not self.tap_layers:
            raise ValueError("a backend must expose at least one tappable layer")

    @property
    def tap_layer_ids(self):
        return tuple(spec.layer_id for spec in self.tap_layers)

    @property
    def bottleneck_layer(self):
        return self.tap_layers[-1].layer_id

    def to_json_dict(self) -> dict:
        return {
            "name": self.name,
            "latent_shape": list(self.latent_shape),
            "embedding_dim": self.embedding_dim,
            "tap_layers": [
                {
                    "layer_id": s.layer_id,
                    "channels": s.channels,
                    "height": s.height,
                    "width": s.width,
                    "tap_point": s.tap_point,
                }
                for s in self.tap_layers
            ],
            "differentiable": self.differentiable,
        }


def cfg_compose(eps_cond: np.ndarray, eps_uncond: np.ndarray, g: GuidanceConfig) -> np.ndarray:
    """Classifier-free guidance: (1 + omega) * cond - omega * uncond."""
    eps_cond = np.asarray(eps_cond, dtype=np.float64)
    eps_uncond = np.asarray(eps_uncond, dtype=np.float64)
    if eps_cond.shape != eps_uncond.shape:
        raise ValueError(
            f"shape mismatch: cond {eps_cond.shape} vs uncond {eps_uncond.shape}"
        )
    return (1.0 + g.omega) * eps_cond - g.omega * eps_uncond


@dataclass(frozen=True)
class ToyBackendConfig:
    latent_shape: tuple = (4, 64, 64)
    sigma: float = 0.25
    seed: int = 0
    vocab: tuple = DEFAULT_VOCAB
    tap_channels: tuple = (16, 16, 16, 16)
    attn_dim: int = 8
    mean_amplitude: float = 0.7
    object_amplitude: float = 1.0
    object_radius: float = 0.38
    mean_grid: int = 8

    def __post_init__(self):
        if self.sigma <= 0:
            raise ValueError("sigma must be positive")
        if len(self.vocab) < 1:
            raise ValueError("vocabulary must be non-empty")
        if not 0 < self.object_radius <= 1:
            raise ValueError("object_radius is a fraction of the image side in (0, 1]")
        object.__setattr__(self, "latent_shape", tuple(self.latent_shape))
        object.__setattr__(self, "vocab", tuple(self.vocab))
        object.__setattr__(self, "tap_channels", tuple(self.tap_channels))


class ToyBackend:
    """Gaussian-mixture latent prior with an exact posterior-mean predictor.

    Each vocabulary word owns a smooth seeded mean field; prompts embed as
    one-hot (orthonormal) vectors. Feature taps come from a fixed seeded
    conv/attention pyramid and are purely observational: requesting them
    never changes the noise prediction.
    """

    name = "toy"

    def __init__(self, config: ToyBackendConfig, sched: NoiseSchedule):
        self.config = config
        self.sched = sched
        c, h, w = config.latent_shape
        rng = np.random.default_rng(np.random.SeedSequence([config.seed, 0x3C5]))
        k = len(config.vocab)
        g = min(config.mean_grid, h, w)
        # class means share one smooth background; each class adds its own
        # smooth pattern inside a central raised-cosine "object" region, so
        # a prompt swap is a localized semantic change on a fixed scene
        background = upsample_bilinear(
            rng.normal(0.0, config.mean_amplitude, size=(c, g, g)), h, w
        )
        yy, xx = np.mgrid[0:h, 0:w]
        radius = np.sqrt((yy - h / 2 + 0.5) ** 2 + (xx - w / 2 + 0.5) ** 2)
        radius /= config.object_radius * min(h, w)
        mask = 0.5 * (1.0 + np.cos(np.pi * np.minimum(radius, 1.0)))
        self.object_mask = mask
        self.means = np.stack(
            [
                background
                + mask[None]
                * upsample_bilinear(
                    rng.normal(0.0, config.object_amplitude, size=(c, g, g)), h, w
                )
                for _ in range(k)
            ]
        )
        self.taps = FeatureTapStack(
            config.latent_shape,
            seed=config.seed,
            channels=config.tap_channels,
            attn_dim=config.attn_dim,
        )
        self._vocab_index = {word: i for i, word in enumerate(config.vocab)}
        self.descriptor = BackendDescriptor(
            name=self.name,
            latent_shape=config.latent_shape,
            embedding_dim=k,
            tap_layers=tuple(TapLayerSpec(*spec) for spec in self.taps.specs),
            differentiable=True,
        )

    # -- prompts -----------------------------------------------------------

    def embed_prompt(self, prompt: str) -> TextEmbedding:
        """Map a vocabulary word to its one-hot embedding; "" is the null prompt."""
        k = len(self.config.vocab)
        if prompt == NULL_PROMPT:
            return TextEmbedding(np.zeros(k), kind="null")
        if prompt not in self._vocab_index:
            raise ValueError(
                f"unknown vocabulary word {prompt!r}; toy vocabulary is {self.config.vocab}"
            )
        vec = np.zeros(k)
        vec[self._vocab_index[prompt]] = 1.0
        return TextEmbedding(vec, kind="conditional")

    def class_mean(self, word: str) -> np.ndarray:
        return self.means[self._vocab_index[word]]

    # -- noise prediction ---------------------------------------------------

    def _coeffs(self, t: int):
        t = int(t)
        if not 0 <= t < self.sched.num_steps:
            raise ValueError(f"timestep {t} out of range [0, {self.sched.num_steps})")
        a = self.sched.a[t]
        b = self.sched.b[t]
        v = a * a * self.config.sigma**2 + b * b
        return a, b, v

    def _check_latent(self, z_t):
        z_t = np.asarray(z_t, dtype=np.float64)
        if z_t.shape != self.config.latent_shape:
            raise ValueError(
                f"latent shape {z_t.shape} != descriptor shape {self.config.latent_shape}"
            )
        return z_t

    def _mixture_weights(self, z_t, a, v):
        d2 = np.array([np.sum((z_t - a * mu) ** 2) for mu in self.means])
        logw = -d2 / (2.0 * v)
        logw -= logw.max()
        w = np.exp(logw)
        return w / w.sum()

    def _eps_conditional(self, z_t, class_idx, a, b, v):
        return b * (z_t - a * self.means[class_idx]) / v

    def _eps_null(self, z_t, a, b, v):
        w = self._mixture_weights(z_t, a, v)
        mu_bar = np.tensordot(w, self.means, axes=1)
        return b * (z_t - a * mu_bar) / v, w, mu_bar

    def predict_noise(self, z_t, emb: TextEmbedding, t: int, taps=()) -> DenoiserOutput:
        """Posterior-mean noise prediction plus the requested feature taps."""
        z_t = self._check_latent(z_t)
        a, b, v = self._coeffs(t)
        if emb.kind == "null":
            eps_hat, _, _ = self._eps_null(z_t, a, b, v)
        else:
            eps_hat = self._eps_conditional(z_t, self._class_of(emb), a, b, v)
        features = self.feature_taps(z_t, taps) if taps else []
        return DenoiserOutput(eps_hat=eps_hat, features=features)

    def predict_noise_with_vjp(self, z_t, emb: TextEmbedding, t: int, taps=()):
        """Like predict_noise, returning a pullback to the input latent.

        The returned callable maps cotangents (d_eps, d_features) to the
        gradient with respect to z_t; either argument may be None / empty.
        """
        z_t = self._check_latent(z_t)
        a, b, v = self._coeffs(t)
        if emb.kind == "null":
            eps_hat, w, mu_bar = self._eps_null(z_t, a, b, v)
        else:
            eps_hat = self._eps_conditional(z_t, self._class_of(emb), a, b, v)
            w = mu_bar = None
        tap_ids = tuple(taps)
        if tap_ids:
            for layer in tap_ids:
                self.taps.layer_index(layer)
            maps, ctx = self.taps.forward_with_ctx(z_t, tap_ids)
            features = self._wrap_maps(maps)
        else:
            features, ctx = [], None

        c_lin = b / v

        def vjp(d_eps=None, d_features=None):
            dz = np.zeros_like(z_t)
            if d_eps is not None:
                g = np.asarray(d_eps, dtype=np.float64)
                if w is None:
                    dz += c_lin * g
                else:
                    # pullback of eps = (b/v) (z - a * sum_k w_k(z) mu_k)
                    u = -(z_t[None] - a * self.means) / v  # d logw_k / dz
                    u_bar = np.tensordot(w, u, axes=1)
                    m = np.array([np.sum(g * mu) for mu in self.means])
                    dz += c_lin * g
                    dz -= (c_lin * a) * (
                        np.tensordot(w * m, u, axes=1) - np.dot(w, m) * u_bar
                    )
            if d_features:
                dz += self.taps.vjp(ctx, d_features)
            return dz

        return DenoiserOutput(eps_hat=eps_hat, features=features), vjp

    def _class_of(self, emb: TextEmbedding) -> int:
        if len(emb.vector) != len(self.config.vocab):
            raise ValueError("embedding dimension does not match the toy vocabulary")
        return int(np.argmax(emb.vector))

    # -- feature taps --------------------------------------------------------

    def feature_taps(self, z, taps=None) -> list[FeatureMap]:
        """Tap the seeded feature pyramid for any latent-shaped input."""
        z = self._check_latent(z)
        if taps is None:
            taps = self.descriptor.tap_layer_ids
        maps = self.taps.forward(z, tuple(taps))
        return self._wrap_maps(maps)

    def _wrap_maps(self, maps: dict) -> list[FeatureMap]:
        tap_points = {s.layer_id: s.tap_point for s in self.descriptor.tap_layers}
        ordered = [lid for lid in self.descriptor.tap_layer_ids if lid in maps]
        return [FeatureMap(lid, maps[lid], tap_points[lid]) for lid in ordered]

    # -- image hooks (identity spatial map, affine range map) ----------------

    def encode_image(self, image: np.ndarray) -> np.ndarray:
        """uint8 (H, W, 3) -> latent; pixel v maps to 2 v / 255 - 1."""
        image = np.asarray(image)
        c, h, w = self.config.latent_shape
        if c < 3:
            raise ValueError("toy image encoding requires at least 3 latent channels")
        if image.shape != (h, w, 3):
            raise ValueError(f"image shape {image.shape} incompatible with latent ({h}, {w})")
        z = np.zeros(self.config.latent_shape)
        z[:3] = 2.0 * image.transpose(2, 0, 1).astype(np.float64) / 255.0 - 1.0
        return z

    def decode_latent(self, z: np.ndarray) -> np.ndarray:
        """Latent -> uint8 (H, W, 3); inverse of encode_image on its range."""
        z = self._check_latent(z)
        if self.config.latent_shape[0] < 3:
            raise ValueError("toy image decoding requires at least 3 latent channels")
        rgb = (z[:3].transpose(1, 2, 0) + 1.0) * 255.0 / 2.0
        return np.clip(np.rint(rgb), 0, 255).astype(np.uint8)


class LatentDiffusionAdapter:
    """Adapter contract for a real latent diffusion model (not wired here).

    A concrete adapter must expose ``predict_noise`` taking integer
    timesteps of the wrapped model's training schedule, declare its
    tappable up-path self-attention layers by name in the descriptor, and
    provide VAE ``encode_image``/``decode_latent`` hooks. This stub raises
    on every call so that mis-configuration fails loudly.
    """

    name = "ldm_adapter"

    def __init__(self, model_name: str = "unconfigured"):
        self.model_name = model_name

    def _unavailable(self):
        raise BackendUnavailableError(
            f"latent-diffusion adapter {self.model_name!r} is not wired to a model; "
            "install and register a concrete adapter"
        )

    @property
    def descriptor(self):
        self._unavailable()

    def embed_prompt(self, prompt):
        self._unavailable()

    def predict_noise(self, z_t, emb, t, taps=()):
        self._unavailable()

    def predict_noise_with_vjp(self, z_t, emb, t, taps=()):
        self._unavailable()

    def feature_taps(self, z, taps=None):
        self._unavailable()

    def encode_image(self, image):
        self._unavailable()

    def decode_latent(self, z):
        self._unavailable()


BACKEND_REGISTRY = {"toy": ToyBackend}
