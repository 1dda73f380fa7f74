"""Exception types raised by the library."""


class ParameterDomainError(ValueError):
    """A primitive parameter is outside the domain of its activation."""


class CameraDomainError(ValueError):
    """A pixel maps outside the camera model's valid field of view."""


class SceneValidationError(ValueError):
    """A scene failed invariant validation."""


class NumericalInstabilityError(RuntimeError):
    """A backward pass reconstructed a non-finite ray state."""


class TapeOverflowError(RuntimeError):
    """A ray recorded more intersections than the hard tape cap."""


class TrainingDivergedError(RuntimeError):
    """The training loss became non-finite."""
