# retrieval_xattn/errors.py
#
# One hierarchy for every failure the engine raises. The CLI turns the
# `category` of an error into its exit code and a single-line report.

from __future__ import annotations

EXIT_CODES = {
    "usage": 1,
    "config": 2,
    "io": 3,
    "numeric": 4,
    "selftest": 5,
}


class EngineError(Exception):
    category = "numeric"

    @property
    def exit_code(self) -> int:
        return EXIT_CODES[self.category]


# ---------- numeric / argument failures ----------

class ShapeError(EngineError):
    pass


class ArgumentError(EngineError):
    pass


class NumericError(EngineError):
    pass


class WindowError(EngineError):
    """Input longer than the model window; the caller must chunk."""


class VocabError(EngineError):
    pass


class StateError(EngineError):
    pass


class RangeError(EngineError):
    pass


class BenchmarkError(EngineError):
    pass


class ProviderError(EngineError):
    def __init__(self, layer: int, head: int, cause: Exception):
        super().__init__(f"cross-attention provider failed at layer {layer} head {head}: {cause}")
        self.layer = layer
        self.head = head


# ---------- configuration ----------

class ConfigError(EngineError):
    category = "config"


class ConfigParseError(ConfigError):
    def __init__(self, message: str, line: int | None = None, column: int | None = None):
        where = f" (line {line}, column {column})" if line is not None else ""
        super().__init__(f"{message}{where}")
        self.line = line
        self.column = column


class ConfigValidationError(ConfigError):
    pass


# ---------- files ----------

class StorageError(EngineError):
    category = "io"


class DataError(EngineError):
    category = "io"

    def __init__(self, message: str, line: int | None = None):
        super().__init__(f"line {line}: {message}" if line is not None else message)
        self.line = line


class SelftestFailure(EngineError):
    category = "selftest"


def shape_error(op: str, a_shape, b_shape) -> ShapeError:
    return ShapeError(f"{op}: incompatible shapes {tuple(a_shape)} and {tuple(b_shape)}")
