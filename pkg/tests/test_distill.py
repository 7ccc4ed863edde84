import numpy as np
import pytest

from cdsedit import (
    GuidanceConfig,
    ToyBackend,
    ToyBackendConfig,
    dds_grad,
    eval_branch,
    make_schedule,
    sds_grad,
)


def naive_guided_eps(backend, z0, word, t, eps, omega):
    """Straight-line recomputation: perturb, posterior means, CFG arithmetic."""
    sched = backend.sched
    a, b = float(sched.a[t]), float(sched.b[t])
    sigma = backend.config.sigma
    v = a * a * sigma * sigma + b * b
    z_t = a * np.asarray(z0) + b * np.asarray(eps)
    mu = backend.class_mean(word)
    eps_cond = b * (z_t - a * mu) / v
    d2 = [float(np.sum((z_t - a * m) ** 2)) for m in backend.means]
    logw = -np.array(d2) / (2 * v)
    w = np.exp(logw - logw.max())
    w /= w.sum()
    mu_bar = sum(float(wk) * m for wk, m in zip(w, backend.means))
    eps_null = b * (z_t - a * mu_bar) / v
    return (1 + omega) * eps_cond - omega * eps_null


@pytest.fixture(scope="module")
def setup(sched, small_backend):
    rng = np.random.default_rng(100)
    shape = small_backend.config.latent_shape
    return {
        "backend": small_backend,
        "sched": sched,
        "z0": rng.standard_normal(shape),
        "zr": rng.standard_normal(shape),
        "eps": rng.standard_normal(shape),
        "emb_dog": small_backend.embed_prompt("dog"),
        "emb_cat": small_backend.embed_prompt("cat"),
        "null": small_backend.embed_prompt(""),
    }


class TestEvalBranch:
    def test_omega_zero_is_conditional_prediction(self, setup):
        s = setup
        br = eval_branch(s["backend"], s["z0"], s["emb_dog"], s["null"], 300, s["eps"],
                         GuidanceConfig(0.0), s["sched"])
        from cdsedit.schedule import perturb

        z_t = perturb(s["z0"], s["eps"], 300, s["sched"])
        cond = s["backend"].predict_noise(z_t, s["emb_dog"], 300).eps_hat
        assert np.abs(br.eps_guided - cond).max() <= 1e-12

    def test_identical_embeddings_independent_of_omega(self, setup):
        s = setup
        out = [
            eval_branch(s["backend"], s["z0"], s["emb_cat"], s["emb_cat"], 400, s["eps"],
                        GuidanceConfig(om), s["sched"]).eps_guided
            for om in (0.0, 7.5, 30.0)
        ]
        assert np.abs(out[0] - out[1]).max() <= 1e-9
        assert np.abs(out[0] - out[2]).max() <= 1e-9

    def test_matches_naive_recomputation(self, setup):
        s = setup
        t, omega = 275, 7.5
        br = eval_branch(s["backend"], s["z0"], s["emb_dog"], s["null"], t, s["eps"],
                         GuidanceConfig(omega), s["sched"])
        expected = naive_guided_eps(s["backend"], s["z0"], "dog", t, s["eps"], omega)
        assert np.abs(br.eps_guided - expected).max() <= 1e-6

    def test_features_from_conditional_pass(self, setup):
        s = setup
        br = eval_branch(s["backend"], s["z0"], s["emb_dog"], s["null"], 300, s["eps"],
                         GuidanceConfig(7.5), s["sched"], taps=("conv0", "attn1"))
        assert [f.layer_id for f in br.features] == ["conv0", "attn1"]
        assert br.t == 300 and br.eps_drawn is s["eps"]


class TestSdsGrad:
    def test_constructed_fixed_point_gives_zero(self, sched):
        # single-class backend: guided eps is affine in eps, solve for the
        # fixed point eps* with guided(z_t(eps*)) == eps* and check grad == 0
        cfg = ToyBackendConfig(latent_shape=(2, 8, 8), sigma=0.5, seed=1, vocab=("cat",))
        backend = ToyBackend(cfg, sched)
        rng = np.random.default_rng(0)
        z0 = rng.standard_normal(cfg.latent_shape)
        t = 350
        a, b = float(sched.a[t]), float(sched.b[t])
        v = a * a * cfg.sigma**2 + b * b
        mu = backend.class_mean("cat")
        eps_star = a * b * (z0 - mu) / (v - b * b)
        emb = backend.embed_prompt("cat")
        grad = sds_grad(backend, z0, emb, emb, t, eps_star, GuidanceConfig(7.5), sched)
        assert grad.kind == "sds"
        assert np.abs(grad.grad).max() <= 1e-9

    def test_zero_mean_at_prior_mean_small_sigma(self, sched):
        cfg = ToyBackendConfig(latent_shape=(2, 8, 8), sigma=1e-3, seed=2)
        backend = ToyBackend(cfg, sched)
        emb = backend.embed_prompt("dog")
        null = backend.embed_prompt("")
        z0 = backend.class_mean("dog").copy()
        rng = np.random.default_rng(1)
        draws = 1000
        grads = np.empty((draws,) + cfg.latent_shape)
        for i in range(draws):
            t = int(rng.integers(50, 951))
            eps = rng.standard_normal(cfg.latent_shape)
            grads[i] = sds_grad(backend, z0, emb, null, t, eps, GuidanceConfig(7.5), sched).grad
        mean = grads.mean(axis=0)
        std_err = grads.std(axis=0, ddof=1) / np.sqrt(draws)
        t_stat = np.abs(mean) / np.maximum(std_err, 1e-300)
        assert np.mean(t_stat) <= 3.0
        assert np.abs(mean).max() <= 1e-5

    def test_mean_grad_points_from_mean_to_latent(self, sched):
        cfg = ToyBackendConfig(latent_shape=(2, 8, 8), sigma=0.25, seed=3)
        backend = ToyBackend(cfg, sched)
        emb = backend.embed_prompt("dog")
        null = backend.embed_prompt("")
        mu = backend.class_mean("dog")
        hits = 0
        for seed in range(100):
            rng = np.random.default_rng(seed)
            offset = rng.standard_normal(cfg.latent_shape)
            z0 = mu + offset
            mean_grad = np.zeros_like(z0)
            for _ in range(30):
                t = int(rng.integers(50, 951))
                eps = rng.standard_normal(cfg.latent_shape)
                mean_grad += sds_grad(backend, z0, emb, null, t, eps,
                                      GuidanceConfig(7.5), sched).grad
            hits += float(np.sum(mean_grad * offset)) > 0
        assert hits >= 95


class TestDdsGrad:
    def test_identical_branches_cancel_exactly(self, setup):
        s = setup
        rng = np.random.default_rng(55)
        for _ in range(100):
            t = int(rng.integers(0, 1000))
            eps = rng.standard_normal(s["z0"].shape)
            grad, _, _ = dds_grad(s["backend"], s["z0"], s["z0"], s["emb_cat"], s["emb_cat"],
                                  s["null"], t, eps, GuidanceConfig(7.5), s["sched"])
            assert np.all(grad.grad == 0.0)

    def test_omega_zero_equals_conditional_difference(self, setup):
        s = setup
        from cdsedit.schedule import perturb

        t = 500
        grad, _, _ = dds_grad(s["backend"], s["z0"], s["zr"], s["emb_cat"], s["emb_cat"],
                              s["null"], t, s["eps"], GuidanceConfig(0.0), s["sched"])
        z_t = perturb(s["z0"], s["eps"], t, s["sched"])
        zr_t = perturb(s["zr"], s["eps"], t, s["sched"])
        cond_t = s["backend"].predict_noise(z_t, s["emb_cat"], t).eps_hat
        cond_r = s["backend"].predict_noise(zr_t, s["emb_cat"], t).eps_hat
        assert np.abs(grad.grad - (cond_t - cond_r)).max() <= 1e-12

    def test_equals_difference_of_sds_directions(self, setup):
        s = setup
        rng = np.random.default_rng(7)
        g = GuidanceConfig(7.5)
        for _ in range(20):
            t = int(rng.integers(0, 1000))
            eps = rng.standard_normal(s["z0"].shape)
            dds, _, _ = dds_grad(s["backend"], s["z0"], s["zr"], s["emb_dog"], s["emb_cat"],
                                 s["null"], t, eps, g, s["sched"])
            sds_t = sds_grad(s["backend"], s["z0"], s["emb_dog"], s["null"], t, eps, g, s["sched"])
            sds_r = sds_grad(s["backend"], s["zr"], s["emb_cat"], s["null"], t, eps, g, s["sched"])
            assert np.abs(dds.grad - (sds_t.grad - sds_r.grad)).max() <= 1e-6

    def test_directional_cat_to_dog(self, sched):
        cfg = ToyBackendConfig(latent_shape=(2, 8, 8), sigma=0.25, seed=4)
        backend = ToyBackend(cfg, sched)
        emb_t, emb_r = backend.embed_prompt("dog"), backend.embed_prompt("cat")
        null = backend.embed_prompt("")
        mu_c, mu_d = backend.class_mean("cat"), backend.class_mean("dog")
        rng = np.random.default_rng(11)
        z0 = mu_c + 0.1 * rng.standard_normal(cfg.latent_shape)
        total = np.zeros_like(z0)
        for _ in range(1000):
            t = int(rng.integers(50, 951))
            eps = rng.standard_normal(cfg.latent_shape)
            g, _, _ = dds_grad(backend, z0, z0, emb_t, emb_r, null, t, eps,
                               GuidanceConfig(7.5), sched)
            total += g.grad
        # descent moves z0 along -grad; the mean direction must oppose mu_d - mu_c
        assert float(np.sum(total * (mu_d - mu_c))) < 0

    def test_branch_features_returned_for_both(self, setup):
        s = setup
        _, tgt, ref = dds_grad(s["backend"], s["z0"], s["zr"], s["emb_dog"], s["emb_cat"],
                               s["null"], 321, s["eps"], GuidanceConfig(7.5), s["sched"],
                               taps=("attn1",))
        assert [f.layer_id for f in tgt.features] == ["attn1"]
        assert [f.layer_id for f in ref.features] == ["attn1"]
        assert tgt.t == ref.t == 321

    def test_shape_mismatch(self, setup):
        s = setup
        with pytest.raises(ValueError, match="shape mismatch"):
            dds_grad(s["backend"], s["z0"], np.zeros((1, 2, 2)), s["emb_dog"], s["emb_cat"],
                     s["null"], 100, s["eps"], GuidanceConfig(), s["sched"])

    def test_norm_triangle_bound_and_finiteness(self, setup):
        s = setup
        rng = np.random.default_rng(8)
        omega = 7.5
        for _ in range(20):
            t = int(rng.integers(0, 1000))
            eps = rng.standard_normal(s["z0"].shape)
            grad, tgt, ref = dds_grad(s["backend"], s["z0"], s["zr"], s["emb_dog"],
                                      s["emb_cat"], s["null"], t, eps,
                                      GuidanceConfig(omega), s["sched"])
            assert np.all(np.isfinite(grad.grad))
            bound = np.linalg.norm(tgt.eps_guided) + np.linalg.norm(ref.eps_guided)
            assert np.linalg.norm(grad.grad) <= bound + 1e-9
