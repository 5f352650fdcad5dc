"""Exception hierarchy shared by all modules."""


class DissolutionUQError(Exception):
    """Base class for every error raised by this package."""


class DimensionError(DissolutionUQError, ValueError):
    """Input dimensionality does not match the network or grid."""


class NonFiniteGradientError(DissolutionUQError, FloatingPointError):
    """A task gradient contains NaN or inf."""

    def __init__(self, task, message=None):
        self.task = task
        super().__init__(message or f"non-finite gradient in task {task!r}")


class NonFiniteResidualError(DissolutionUQError, FloatingPointError):
    """A task residual evaluated to NaN or inf."""

    def __init__(self, task, message=None):
        self.task = task
        super().__init__(message or f"non-finite residual in task {task!r}")


class DivergenceError(DissolutionUQError, FloatingPointError):
    """Leapfrog integration produced a non-finite state."""


class SamplerAbort(DissolutionUQError, RuntimeError):
    """Too many divergent iterations; the chain cannot continue."""


class ConvergenceError(DissolutionUQError, RuntimeError):
    """Inner fixed-point iterations of the direct solver did not converge."""

    def __init__(self, step, message=None):
        self.step = step
        super().__init__(message or f"inner iterations did not converge at time step {step}")


class GeometryError(DissolutionUQError, ValueError):
    """Invalid geometry description (e.g. overlapping cores)."""


class RegionQuotaError(DissolutionUQError, ValueError):
    """A region holds fewer voxels than its sampling quota."""

    def __init__(self, region, available, requested):
        self.region = region
        super().__init__(
            f"region {region} has {available} candidate voxels, {requested} requested"
        )


class EmptyRegionError(DissolutionUQError, RuntimeError):
    """A region required by a later step is empty."""

    def __init__(self, region, message=None):
        self.region = region
        super().__init__(message or f"region {region} is empty")


class DegenerateTaskError(DissolutionUQError, ValueError):
    """A task gradient has zero variance, so its weight is undefined."""

    def __init__(self, task):
        self.task = task
        super().__init__(f"task {task} has zero gradient variance")


class ConfigError(DissolutionUQError, ValueError):
    """Invalid run configuration."""


class StepError(DissolutionUQError, RuntimeError):
    """Wraps a numeric abort with the pipeline step it happened in."""

    def __init__(self, step, cause):
        self.step = step
        self.cause = cause
        super().__init__(f"step {step}: {cause}")
