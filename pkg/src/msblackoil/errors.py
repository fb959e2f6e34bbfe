"""Exception hierarchy shared across the package."""


class BlackOilError(Exception):
    """Base class for all package errors."""


class ConfigurationError(BlackOilError, ValueError):
    """Invalid grid, well or run configuration."""


class DataError(BlackOilError, ValueError):
    """Bad input data (permeability, porosity, files)."""


class ConsistencyError(BlackOilError, ValueError):
    """A state violates a constraint such as the saturation sum."""


class StateError(BlackOilError, ValueError):
    """A computed state is unphysical (e.g. negative free-gas saturation)."""


class SolverError(BlackOilError, RuntimeError):
    """Linear or nonlinear solver failure."""


class TimeStepUnderflow(SolverError):
    """Time step was cut below the minimum allowed value."""
