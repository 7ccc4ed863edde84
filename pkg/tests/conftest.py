import numpy as np
import pytest

from cdsedit import ToyBackend, ToyBackendConfig, make_schedule


@pytest.fixture(scope="session")
def sched():
    return make_schedule("scaled_linear", 1000)


@pytest.fixture(scope="session")
def small_backend(sched):
    cfg = ToyBackendConfig(latent_shape=(3, 16, 16), sigma=0.25, seed=3)
    return ToyBackend(cfg, sched)


@pytest.fixture(scope="session")
def edit_backend(sched):
    cfg = ToyBackendConfig(latent_shape=(4, 24, 24), sigma=0.25, seed=0)
    return ToyBackend(cfg, sched)


def source_near(backend, word: str, seed: int, amplitude: float = 0.1):
    rng = np.random.default_rng(np.random.SeedSequence([seed, 0xA3]))
    return backend.class_mean(word) + amplitude * rng.standard_normal(
        backend.config.latent_shape
    )


def directional_fd(f, x, grad, rng, probes=10, h=1e-6, rel_tol=1e-4):
    """Central-difference directional-derivative check against a gradient."""
    scale = max(float(np.abs(grad).max()), 1e-12)
    for _ in range(probes):
        d = rng.standard_normal(x.shape)
        d /= np.linalg.norm(d)
        fd = (f(x + h * d) - f(x - h * d)) / (2 * h)
        an = float(np.sum(grad * d))
        assert abs(fd - an) <= rel_tol * max(abs(fd), abs(an), scale * 1e-3), (
            f"directional derivative mismatch: fd={fd} analytic={an}"
        )
