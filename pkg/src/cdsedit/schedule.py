"""Discrete diffusion noise schedules and the forward perturbation.

A schedule is a pair of per-timestep coefficient tables (a_t, b_t) with
a_t^2 + b_t^2 = 1; the forward noising of a clean latent is

    z_t = a_t * z_0 + b_t * eps,   eps ~ N(0, I).

Timesteps are discrete integer indices 0..num_steps-1, with t=0 nearly
clean (a ~ 1) and t=num_steps-1 nearly pure noise (b ~ 1).
"""

from __future__ import annotations

import io
from dataclasses import dataclass, field

import numpy as np

SCHEDULE_KINDS = ("scaled_linear", "cosine", "linear")

_IDENTITY_TOL = 1e-6
_MONOTONE_TOL = 1e-12


@dataclass(frozen=True)
class NoiseSchedule:
    """Signal/noise coefficient tables for a discrete forward process.

    ``a`` is non-increasing and ``b`` non-decreasing in t, both in [0, 1],
    with a_t^2 + b_t^2 = 1 enforced at construction.
    """

    num_steps: int
    a: np.ndarray
    b: np.ndarray
    kind: str

    def __post_init__(self):
        a = np.asarray(self.a, dtype=np.float64)
        b = np.asarray(self.b, dtype=np.float64)
        if self.num_steps < 2:
            raise ValueError("num_steps must be >= 2")
        if len(a) != self.num_steps or len(b) != self.num_steps:
            raise ValueError("coefficient tables must have num_steps entries")
        if np.any(a < -_MONOTONE_TOL) or np.any(a > 1 + _MONOTONE_TOL):
            raise ValueError("signal coefficients a_t must lie in [0, 1]")
        if np.any(b < -_MONOTONE_TOL) or np.any(b > 1 + _MONOTONE_TOL):
            raise ValueError("noise coefficients b_t must lie in [0, 1]")
        ident = np.abs(a * a + b * b - 1.0)
        if ident.max() > _IDENTITY_TOL:
            raise ValueError(
                f"a_t^2 + b_t^2 deviates from 1 by {ident.max():.3g} (> {_IDENTITY_TOL:g})"
            )
        if np.any(np.diff(a) > _MONOTONE_TOL):
            raise ValueError("a_t must be non-increasing (bad schedule parameters)")
        if np.any(np.diff(b) < -_MONOTONE_TOL):
            raise ValueError("b_t must be non-decreasing (bad schedule parameters)")
        a.setflags(write=False)
        b.setflags(write=False)
        object.__setattr__(self, "a", a)
        object.__setattr__(self, "b", b)

    def to_csv(self) -> str:
        """Render ``t,a_t,b_t`` rows with a one-line header."""
        buf = io.StringIO()
        buf.write("t,a_t,b_t\n")
        for t in range(self.num_steps):
            buf.write(f"{t},{float(self.a[t])!r},{float(self.b[t])!r}\n")
        return buf.getvalue()


@dataclass(frozen=True)
class TimestepRange:
    """Inclusive index range from which optimization timesteps are drawn."""

    t_min: int = 50
    t_max: int = 950

    def __post_init__(self):
        if self.t_min < 0:
            raise ValueError("t_min must be >= 0")
        if self.t_min > self.t_max:
            raise ValueError("t_min must be <= t_max")

    def validate_against(self, sched: NoiseSchedule) -> None:
        if self.t_max >= sched.num_steps:
            raise ValueError(
                f"t_max={self.t_max} out of range for a {sched.num_steps}-step schedule"
            )


def _alpha_bar_scaled_linear(num_steps: int, beta_start: float, beta_end: float) -> np.ndarray:
    # Stable-Diffusion convention: betas linear in sqrt-space.
    betas = np.linspace(beta_start**0.5, beta_end**0.5, num_steps) ** 2
    return np.cumprod(1.0 - betas)


def _alpha_bar_cosine(num_steps: int, offset: float) -> np.ndarray:
    u = np.arange(num_steps, dtype=np.float64) / (num_steps - 1)
    f = np.cos((u + offset) / (1.0 + offset) * np.pi / 2.0) ** 2
    f0 = np.cos(offset / (1.0 + offset) * np.pi / 2.0) ** 2
    return np.clip(f / f0, 0.0, 1.0)


def _alpha_bar_linear(num_steps: int, start: float, end: float) -> np.ndarray:
    if not (0.0 <= end <= 1.0 and 0.0 <= start <= 1.0):
        raise ValueError("linear kind expects a^2 endpoints in [0, 1]")
    return np.linspace(start, end, num_steps)


def make_schedule(kind: str, num_steps: int, **params) -> NoiseSchedule:
    """Construct a schedule of the given kind.

    Supported kinds and their parameters:

    * ``scaled_linear`` — betas linear in sqrt-space, ``beta_start`` (8.5e-4)
      to ``beta_end`` (0.012); a_t = sqrt(prod(1 - beta_s)).
    * ``cosine`` — squared-cosine alpha-bar with small ``offset`` (0.008).
    * ``linear`` — a_t^2 linear from ``start`` (1.0) to ``end`` (0.0).
    """
    if num_steps < 2:
        raise ValueError("num_steps must be >= 2")
    if kind == "scaled_linear":
        abar = _alpha_bar_scaled_linear(
            num_steps, params.pop("beta_start", 8.5e-4), params.pop("beta_end", 0.012)
        )
    elif kind == "cosine":
        abar = _alpha_bar_cosine(num_steps, params.pop("offset", 0.008))
    elif kind == "linear":
        abar = _alpha_bar_linear(num_steps, params.pop("start", 1.0), params.pop("end", 0.0))
    else:
        raise ValueError(f"unknown schedule kind {kind!r}; expected one of {SCHEDULE_KINDS}")
    if params:
        raise ValueError(f"unexpected parameters for kind {kind!r}: {sorted(params)}")
    a = np.sqrt(abar)
    b = np.sqrt(1.0 - abar)
    return NoiseSchedule(num_steps=num_steps, a=a, b=b, kind=kind)


def perturb(z0: np.ndarray, eps: np.ndarray, t: int, sched: NoiseSchedule) -> np.ndarray:
    """Forward-noise a clean latent: a_t * z0 + b_t * eps."""
    z0 = np.asarray(z0, dtype=np.float64)
    eps = np.asarray(eps, dtype=np.float64)
    if z0.shape != eps.shape:
        raise ValueError(f"shape mismatch: z0 {z0.shape} vs eps {eps.shape}")
    t = int(t)
    if not 0 <= t < sched.num_steps:
        raise ValueError(f"timestep {t} out of range [0, {sched.num_steps})")
    return sched.a[t] * z0 + sched.b[t] * eps


def sample_timestep(rng: np.random.Generator, trange: TimestepRange) -> int:
    """Draw t uniformly from the inclusive range {t_min, ..., t_max}."""
    return int(rng.integers(trange.t_min, trange.t_max + 1))
