"""Exception types raised across the package."""


class ParameterError(ValueError):
    pass


class MalformedDagError(ValueError):
    pass


class CatalogError(ValueError):
    pass


class ConfigError(ValueError):
    """Invalid configuration: weights that do not sum to one, bad ranges, unknown keys."""


class IncompleteDeploymentError(ValueError):
    pass


class OrderingError(RuntimeError):
    """A task was evaluated before all of its predecessors were placed."""


class ActionError(ValueError):
    pass


class LifecycleError(RuntimeError):
    pass


class ShapeError(ValueError):
    pass


class NumericError(FloatingPointError):
    pass


class TapeError(RuntimeError):
    pass


class CheckpointError(ValueError):
    pass
