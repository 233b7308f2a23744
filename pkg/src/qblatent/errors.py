"""Exception types raised across the package."""

import numpy as np


class QBLatentError(Exception):
    """Base class for all package errors."""


class InvalidParameterError(QBLatentError, ValueError):
    """Mixture or prior parameters violate their invariants."""


class DegeneratePointError(QBLatentError, ArithmeticError):
    """The candidate characteristic function is below the floor at ``t``."""

    def __init__(self, t, modulus, floor):
        self.t = t
        self.modulus = modulus
        self.floor = floor
        super().__init__(
            f"characteristic function modulus {modulus:.3e} below floor {floor:.1e} "
            f"at t={[float(v) for v in np.ravel(t)]}"
        )


class NonInvertibleError(QBLatentError, ValueError):
    """Parameters lie outside the image of the unconstraining map."""


class IdentificationError(QBLatentError, ValueError):
    """The factor loadings do not identify the latent factors."""

    def __init__(self, rank, required):
        self.rank = rank
        self.required = required
        super().__init__(
            f"Q matrix has rank {rank}, full column rank {required} is required"
        )


class ResourceError(QBLatentError, MemoryError):
    """A requested quadrature would exceed the node budget."""


class QuadratureEvaluationError(QBLatentError, RuntimeError):
    """A field evaluated on quadrature nodes produced a non-finite value."""

    def __init__(self, node, message="non-finite value"):
        self.node = node
        super().__init__(f"{message} at node {[float(v) for v in np.ravel(node)]}")


class SamplerAbort(QBLatentError, RuntimeError):
    """The sampler could not make progress (persistent divergences)."""


class ConfigError(QBLatentError, ValueError):
    """A run configuration failed validation."""

    def __init__(self, path, message):
        self.path = path
        super().__init__(f"{path}: {message}")
