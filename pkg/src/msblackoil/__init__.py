"""Three-phase black-oil simulation with mixed finite elements and two multiscale back-ends."""

__version__ = "0.1.0"
