"""Exception types shared across the package."""


class ColnetError(Exception):
    pass


class ShapeError(ColnetError, ValueError):
    pass


class ConfigError(ColnetError, ValueError):
    pass


class ParseError(ColnetError, ValueError):
    def __init__(self, path, line, message):
        super().__init__(f"{path}:{line}: {message}")
        self.path = path
        self.line = line


class ReferentialError(ColnetError, ValueError):
    pass


class ValidationError(ColnetError, ValueError):
    pass


class ConsistencyError(ColnetError, RuntimeError):
    pass


class DivergenceError(ColnetError, RuntimeError):
    def __init__(self, message, epoch=None):
        super().__init__(message)
        self.epoch = epoch
