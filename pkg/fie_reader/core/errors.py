from __future__ import annotations


class FieReaderError(Exception):
    pass


class ShapeError(FieReaderError):
    pass


class DegenerateError(FieReaderError):
    pass


class NumericError(FieReaderError):
    pass


class ContractError(FieReaderError):
    pass


class DeterminismError(FieReaderError):
    pass


class ConfigError(FieReaderError):
    pass


class VocabularyError(FieReaderError):
    pass


class ModeError(FieReaderError):
    pass


class DataError(FieReaderError):
    pass


class SpecError(FieReaderError):
    pass


class UsageError(FieReaderError):
    pass


class NoPredictionError(DegenerateError):
    pass


class InstrumentationError(ContractError):
    pass
