import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from cdsedit import NoiseSchedule, TimestepRange, make_schedule, perturb, sample_timestep


def scaled_linear_oracle(num_steps, beta_start, beta_end, t):
    """Scalar product recurrence for alpha-bar, independent of the module."""
    abar = 1.0
    for s in range(t + 1):
        root = math.sqrt(beta_start) + (math.sqrt(beta_end) - math.sqrt(beta_start)) * s / (
            num_steps - 1
        )
        abar *= 1.0 - root * root
    return math.sqrt(abar), math.sqrt(1.0 - abar)


def test_linear_two_step_endpoints():
    sched = make_schedule("linear", 2)
    assert sched.a.tolist() == [1.0, 0.0]
    assert sched.b.tolist() == [0.0, 1.0]


@pytest.mark.parametrize("kind", ["scaled_linear", "cosine", "linear"])
@pytest.mark.parametrize("num_steps", [2, 17, 1000])
def test_unit_identity_all_kinds(kind, num_steps):
    sched = make_schedule(kind, num_steps)
    assert np.abs(sched.a**2 + sched.b**2 - 1.0).max() <= 1e-6


def test_scaled_linear_matches_recurrence_oracle():
    sched = make_schedule("scaled_linear", 1000, beta_start=8.5e-4, beta_end=0.012)
    for t in (0, 500, 999):
        a_ref, b_ref = scaled_linear_oracle(1000, 8.5e-4, 0.012, t)
        assert abs(sched.a[t] - a_ref) <= 1e-9
        assert abs(sched.b[t] - b_ref) <= 1e-9


def test_monotonicity():
    sched = make_schedule("scaled_linear", 500)
    assert np.all(np.diff(sched.a) <= 1e-12)
    assert np.all(np.diff(sched.b) >= -1e-12)


def test_bad_params_rejected():
    with pytest.raises(ValueError, match="unknown schedule kind"):
        make_schedule("quadratic", 100)
    with pytest.raises(ValueError):
        make_schedule("linear", 10, start=0.0, end=1.0)  # increasing a^2
    with pytest.raises(ValueError):
        make_schedule("scaled_linear", 1)
    with pytest.raises(ValueError):
        make_schedule("scaled_linear", 10, bogus=1.0)


def test_direct_construction_validates():
    with pytest.raises(ValueError, match="num_steps entries"):
        NoiseSchedule(num_steps=3, a=np.array([1.0, 0.5]), b=np.array([0.0, 0.5]), kind="linear")
    with pytest.raises(ValueError, match="deviates"):
        NoiseSchedule(
            num_steps=2, a=np.array([1.0, 0.9]), b=np.array([0.0, 0.9]), kind="linear"
        )


def test_perturb_identity_endpoint():
    sched = make_schedule("linear", 4)
    z0 = np.arange(12.0).reshape(3, 2, 2)
    eps = np.ones_like(z0)
    assert np.abs(perturb(z0, eps, 0, sched) - z0).max() <= 1e-7


def test_perturb_zero_signal():
    sched = make_schedule("linear", 4)
    eps = np.arange(4.0).reshape(1, 2, 2)
    t = 2
    out = perturb(np.zeros_like(eps), eps, t, sched)
    assert np.allclose(out, sched.b[t] * eps)


def test_perturb_elementwise_example():
    # a_t = 0.6, b_t = 0.8 via a hand-built schedule
    sched = NoiseSchedule(
        num_steps=2, a=np.array([1.0, 0.6]), b=np.array([0.0, 0.8]), kind="linear"
    )
    out = perturb(np.array([1.0, 2.0]), np.array([1.0, -1.0]), 1, sched)
    assert np.allclose(out, [1.4, 0.4])


def test_perturb_errors():
    sched = make_schedule("linear", 4)
    z = np.zeros((2, 2))
    with pytest.raises(ValueError, match="shape mismatch"):
        perturb(z, np.zeros((2, 3)), 1, sched)
    with pytest.raises(ValueError, match="out of range"):
        perturb(z, z, 4, sched)
    with pytest.raises(ValueError, match="out of range"):
        perturb(z, z, -1, sched)


@settings(max_examples=50, deadline=None)
@given(
    t=st.integers(min_value=0, max_value=99),
    alpha=st.floats(min_value=-3, max_value=3, allow_nan=False),
)
def test_perturb_linearity(t, alpha):
    sched = make_schedule("scaled_linear", 100)
    rng = np.random.default_rng(0)
    z0 = rng.standard_normal((2, 4, 4))
    eps = rng.standard_normal((2, 4, 4))
    lhs = perturb(alpha * z0, alpha * eps, t, sched)
    rhs = alpha * perturb(z0, eps, t, sched)
    assert np.abs(lhs - rhs).max() <= 1e-6 * max(1.0, abs(alpha))


def test_sample_timestep_singleton():
    rng = np.random.default_rng(1)
    r = TimestepRange(7, 7)
    assert all(sample_timestep(rng, r) == 7 for _ in range(20))


def test_sample_timestep_uniformity_chi2():
    from scipy.stats import chisquare

    rng = np.random.default_rng(1234)
    r = TimestepRange(50, 950)
    draws = np.array([sample_timestep(rng, r) for _ in range(10_000)])
    assert draws.min() >= 50 and draws.max() <= 950
    # bin into 30 equal-width cells over the inclusive range
    counts, _ = np.histogram(draws, bins=30, range=(50, 951))
    _, p = chisquare(counts)
    assert p > 0.01


def test_sample_timestep_deterministic_replay():
    r = TimestepRange(50, 950)
    a = [sample_timestep(np.random.default_rng(5), r) for _ in range(1)]
    b = [sample_timestep(np.random.default_rng(5), r) for _ in range(1)]
    assert a == b
    rng1, rng2 = np.random.default_rng(9), np.random.default_rng(9)
    seq1 = [sample_timestep(rng1, r) for _ in range(100)]
    seq2 = [sample_timestep(rng2, r) for _ in range(100)]
    assert seq1 == seq2


def test_timestep_range_validation():
    with pytest.raises(ValueError):
        TimestepRange(5, 4)
    with pytest.raises(ValueError):
        TimestepRange(-1, 4)
    r = TimestepRange(0, 2000)
    with pytest.raises(ValueError, match="out of range"):
        r.validate_against(make_schedule("linear", 100))


def test_schedule_csv():
    sched = make_schedule("scaled_linear", 10)
    lines = sched.to_csv().strip().split("\n")
    assert lines[0] == "t,a_t,b_t"
    assert len(lines) == 11
    t, a, b = lines[3].split(",")
    assert int(t) == 2
    assert float(a) == sched.a[2] and float(b) == sched.b[2]
