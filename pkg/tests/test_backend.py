import json

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from cdsedit import (
    BackendUnavailableError,
    GuidanceConfig,
    LatentDiffusionAdapter,
    ToyBackend,
    ToyBackendConfig,
    cfg_compose,
    make_schedule,
)
from conftest import directional_fd


def posterior_eps_oracle(z, mu, sigma, a, b):
    """Straight-line scalar evaluation of the posterior-mean predictor."""
    post_mean = mu + (a * sigma**2 / (a**2 * sigma**2 + b**2)) * (z - a * mu)
    return (z - a * post_mean) / b


class TestEmbeddings:
    def test_null_prompt(self, small_backend):
        emb = small_backend.embed_prompt("")
        assert emb.kind == "null"

    def test_deterministic(self, small_backend):
        a = small_backend.embed_prompt("cat")
        b = small_backend.embed_prompt("cat")
        assert np.array_equal(a.vector, b.vector)

    def test_cat_is_basis_zero(self, small_backend):
        emb = small_backend.embed_prompt("cat")
        expected = np.zeros(len(small_backend.config.vocab))
        expected[0] = 1.0
        assert np.array_equal(emb.vector, expected)
        dog = small_backend.embed_prompt("dog")
        assert dog.vector[1] == 1.0 and np.dot(emb.vector, dog.vector) == 0.0

    def test_unknown_word(self, small_backend):
        with pytest.raises(ValueError, match="unknown vocabulary word"):
            small_backend.embed_prompt("zebra")


class TestPredictNoise:
    def test_zero_noise_at_scaled_mean(self, small_backend, sched):
        t = 400
        emb = small_backend.embed_prompt("cow")
        z_t = sched.a[t] * small_backend.class_mean("cow")
        out = small_backend.predict_noise(z_t, emb, t)
        assert np.abs(out.eps_hat).max() <= 1e-5

    def test_taps_are_observational(self, small_backend, sched):
        rng = np.random.default_rng(0)
        z_t = rng.standard_normal(small_backend.config.latent_shape)
        emb = small_backend.embed_prompt("cat")
        plain = small_backend.predict_noise(z_t, emb, 300)
        tapped = small_backend.predict_noise(z_t, emb, 300, taps=("conv0", "attn1"))
        assert plain.features == []
        assert len(tapped.features) == 2
        assert np.array_equal(plain.eps_hat, tapped.eps_hat)

    def test_scalar_posterior_oracle(self):
        # single-entry latent so the documented scalar case is exact
        sched = make_schedule("linear", 2)
        import cdsedit.backend as bk_mod

        cfg = ToyBackendConfig(latent_shape=(1, 8, 8), sigma=1.0, seed=0, vocab=("cat",))
        backend = ToyBackend(cfg, sched)
        backend.means = np.zeros_like(backend.means)  # mu = 0
        a, b = 0.6, 0.8
        backend.sched = bk_mod.NoiseSchedule(
            num_steps=2, a=np.array([1.0, a]), b=np.array([0.0, b]), kind="linear"
        )
        z_t = np.full(cfg.latent_shape, 1.0)
        out = backend.predict_noise(z_t, backend.embed_prompt("cat"), 1)
        expected = posterior_eps_oracle(1.0, 0.0, 1.0, a, b)
        assert np.abs(out.eps_hat - expected).max() <= 1e-12
        assert abs(expected - 0.8) <= 1e-12

    def test_validation_errors(self, small_backend):
        emb = small_backend.embed_prompt("cat")
        with pytest.raises(ValueError, match="latent shape"):
            small_backend.predict_noise(np.zeros((1, 4, 4)), emb, 100)
        z = np.zeros(small_backend.config.latent_shape)
        with pytest.raises(ValueError, match="out of range"):
            small_backend.predict_noise(z, emb, 10**6)
        with pytest.raises(ValueError, match="unknown tap layer"):
            small_backend.predict_noise(z, emb, 100, taps=("conv9",))

    def test_eps_finite_and_lipschitz_on_probes(self, small_backend):
        rng = np.random.default_rng(7)
        emb = small_backend.embed_prompt("")
        for _ in range(10):
            t = int(rng.integers(0, 1000))
            z = 3.0 * rng.standard_normal(small_backend.config.latent_shape)
            d = rng.standard_normal(z.shape)
            d *= 1e-3 / np.linalg.norm(d)
            e1 = small_backend.predict_noise(z, emb, t).eps_hat
            e2 = small_backend.predict_noise(z + d, emb, t).eps_hat
            assert np.all(np.isfinite(e1))
            slope = np.linalg.norm(e2 - e1) / np.linalg.norm(d)
            assert slope < 1e3

    def test_eps_gradient_matches_fd(self, small_backend, sched):
        rng = np.random.default_rng(5)
        t = 300
        for emb in (small_backend.embed_prompt("dog"), small_backend.embed_prompt("")):
            z = rng.standard_normal(small_backend.config.latent_shape)
            w = rng.standard_normal(z.shape)
            _, vjp = small_backend.predict_noise_with_vjp(z, emb, t)
            grad = vjp(d_eps=w)

            def f(zz):
                return float(np.sum(w * small_backend.predict_noise(zz, emb, t).eps_hat))

            directional_fd(f, z, grad, rng, probes=10, rel_tol=1e-4)


class TestFeatureTaps:
    def test_deterministic(self, small_backend):
        rng = np.random.default_rng(2)
        z = rng.standard_normal(small_backend.config.latent_shape)
        a = small_backend.feature_taps(z)
        b = small_backend.feature_taps(z.copy())
        for fa, fb in zip(a, b):
            assert fa.layer_id == fb.layer_id
            assert np.array_equal(fa.data, fb.data)

    def test_depth_order_and_resolutions(self, small_backend):
        z = np.zeros(small_backend.config.latent_shape)
        feats = small_backend.feature_taps(z)
        ids = [f.layer_id for f in feats]
        assert ids == ["conv0", "attn1", "attn2", "attn3"]
        sizes = [f.data.shape[1] for f in feats]
        assert sizes == [16, 8, 4, 2]
        assert feats[0].tap_point == "conv_output"
        assert feats[1].tap_point == "residual_plus_attention"

    def test_conv0_cyclic_translation_equivariance(self, small_backend):
        rng = np.random.default_rng(3)
        z = rng.standard_normal(small_backend.config.latent_shape)
        base = small_backend.feature_taps(z, taps=("conv0",))[0].data
        rolled_in = np.roll(z, shift=(1, 2), axis=(1, 2))
        rolled_out = small_backend.feature_taps(rolled_in, taps=("conv0",))[0].data
        assert np.abs(np.roll(base, shift=(1, 2), axis=(1, 2)) - rolled_out).max() <= 1e-10

    def test_tap_stack_gradient_matches_fd(self, small_backend):
        rng = np.random.default_rng(4)
        z = rng.standard_normal(small_backend.config.latent_shape)
        taps = ("conv0", "attn1", "attn2")
        maps, ctx = small_backend.taps.forward_with_ctx(z, taps)
        cots = {k: rng.standard_normal(v.shape) for k, v in maps.items()}
        grad = small_backend.taps.vjp(ctx, cots)

        def f(zz):
            ms = small_backend.taps.forward(zz, taps)
            return float(sum(np.sum(cots[k] * ms[k]) for k in ms))

        directional_fd(f, z, grad, rng, probes=10, rel_tol=1e-4)

    def test_layer0_fd_probe(self, small_backend):
        rng = np.random.default_rng(8)
        z = rng.standard_normal(small_backend.config.latent_shape)
        maps, ctx = small_backend.taps.forward_with_ctx(z, ("conv0",))
        cot = {"conv0": rng.standard_normal(maps["conv0"].shape)}
        grad = small_backend.taps.vjp(ctx, cot)

        def f(zz):
            return float(
                np.sum(cot["conv0"] * small_backend.taps.forward(zz, ("conv0",))["conv0"])
            )

        directional_fd(f, z, grad, rng, probes=10, rel_tol=1e-4)


class TestCfgCompose:
    def test_omega_zero_identity(self):
        rng = np.random.default_rng(0)
        c, u = rng.standard_normal((2, 3, 3)), rng.standard_normal((2, 3, 3))
        out = cfg_compose(c, u, GuidanceConfig(0.0))
        assert np.abs(out - c).max() <= 1e-6

    def test_equal_predictions_cancel(self):
        rng = np.random.default_rng(1)
        c = rng.standard_normal((2, 3, 3))
        out = cfg_compose(c, c.copy(), GuidanceConfig(11.25))
        assert np.abs(out - c).max() <= 1e-6

    def test_scalar_example(self):
        out = cfg_compose(np.array([1.0]), np.array([0.5]), GuidanceConfig(7.5))
        assert out[0] == pytest.approx(4.75, abs=0)

    def test_shape_mismatch(self):
        with pytest.raises(ValueError, match="shape mismatch"):
            cfg_compose(np.zeros(3), np.zeros(4), GuidanceConfig())

    @settings(max_examples=40, deadline=None)
    @given(
        omega=st.floats(min_value=0, max_value=30, allow_nan=False),
        s=st.floats(min_value=-2, max_value=2, allow_nan=False),
    )
    def test_affine_in_both_arguments(self, omega, s):
        rng = np.random.default_rng(2)
        c1, c2, u = rng.standard_normal((3, 4))
        g = GuidanceConfig(omega)
        lhs = cfg_compose(c1 + s * c2, u, g)
        rhs = cfg_compose(c1, u, g) + s * (cfg_compose(c2, u, g) - cfg_compose(np.zeros_like(c2), u, g))
        assert np.abs(lhs - rhs).max() <= 1e-6 * max(1.0, abs(s)) * max(1.0, omega)

    def test_invalid_guidance(self):
        with pytest.raises(ValueError):
            GuidanceConfig(-1.0)
        with pytest.raises(ValueError):
            GuidanceConfig(float("nan"))


class TestDescriptorAndAdapter:
    def test_descriptor_json_roundtrip(self, small_backend):
        d = small_backend.descriptor.to_json_dict()
        text = json.dumps(d)
        back = json.loads(text)
        assert back["name"] == "toy"
        assert back["differentiable"] is True
        assert len(back["tap_layers"]) == 4
        assert back["latent_shape"] == [3, 16, 16]

    def test_adapter_stub_raises(self):
        adapter = LatentDiffusionAdapter("sd-v1.4")
        with pytest.raises(BackendUnavailableError):
            adapter.predict_noise(None, None, 0)
        with pytest.raises(BackendUnavailableError):
            adapter.embed_prompt("cat")
        with pytest.raises(BackendUnavailableError):
            adapter.encode_image(None)
        with pytest.raises(BackendUnavailableError):
            _ = adapter.descriptor


class TestImageHooks:
    def test_roundtrip_bit_exact(self, small_backend):
        rng = np.random.default_rng(0)
        img = rng.integers(0, 256, size=(16, 16, 3), dtype=np.uint8)
        z = small_backend.encode_image(img)
        back = small_backend.decode_latent(z)
        assert np.array_equal(img, back)

    def test_black_image_maps_to_minus_one(self, small_backend):
        img = np.zeros((16, 16, 3), dtype=np.uint8)
        z = small_backend.encode_image(img)
        assert np.all(z[:3] == -1.0)

    def test_midpoint_affine_value(self, small_backend):
        img = np.full((16, 16, 3), 128, dtype=np.uint8)
        z = small_backend.encode_image(img)
        assert np.abs(z[:3] - (2 * 128 / 255 - 1)).max() <= 1e-12

    def test_dimension_mismatch(self, small_backend):
        with pytest.raises(ValueError, match="incompatible"):
            small_backend.encode_image(np.zeros((8, 8, 3), dtype=np.uint8))
