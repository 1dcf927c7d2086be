"""Exception types shared across the surrogate pipeline"""

from typing import Optional


class InvalidInputError(ValueError):
    """Malformed grid, spec or array shape"""


class NumericalError(ArithmeticError):
    """A numerical procedure produced or received non-finite values"""


class DivergenceError(NumericalError):
    """Raised when a time integration blows up

    Attributes:
        time: Simulation time (s) of the first non-finite state
        sample_index: Index of the offending sample in a batch, if known
    """

    def __init__(self, message: str, time: float, sample_index: Optional[int] = None):
        super().__init__(message)
        self.time = time
        self.sample_index = sample_index


class ConfigurationError(ValueError):
    """Invalid experiment configuration or inconsistent artifacts"""


class ArtifactExistsError(FileExistsError):
    """An output artifact exists and overwriting was not requested"""
