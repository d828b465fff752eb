"""Exception types shared across the package."""


class FlowforgeError(Exception):
    """Base class for all package-specific failures."""


class ShapeError(FlowforgeError):
    """An input array has the wrong shape or width."""


class DivergenceError(FlowforgeError):
    """An integrator produced a non-finite state."""

    def __init__(self, step: int, t: float):
        super().__init__(f"non-finite state at step {step} (t={t:.6g})")
        self.step = step
        self.t = t


class DegenerateKernelError(FlowforgeError):
    """Transition density requested for a zero-noise kernel."""


class CheckpointError(FlowforgeError):
    """Checkpoint file is missing, corrupt, or incompatible."""


class DatasetError(FlowforgeError):
    """Dataset file is missing, corrupt, or incompatible."""


class ConfigError(FlowforgeError):
    """Run configuration failed validation."""


class GenerationError(FlowforgeError):
    """Sample construction kept producing degenerate draws."""
