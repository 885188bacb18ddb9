from .errors import FieReaderError
from .tensor import Array, Parameter, Tape, backward

__all__ = [
    "Array",
    "FieReaderError",
    "Parameter",
    "Tape",
    "backward",
]
