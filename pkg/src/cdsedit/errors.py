"""Exception types shared across the package."""


class BackendUnavailableError(RuntimeError):
    """A denoiser backend was requested but is not wired to a real model."""


class NonFiniteUpdateError(RuntimeError):
    """An optimization step produced NaN/Inf; carries the failing step index."""

    def __init__(self, step: int, detail: str = ""):
        self.step = step
        msg = f"non-finite update at step {step}"
        if detail:
            msg += f": {detail}"
        super().__init__(msg)
