"""Exception hierarchy shared by the engine, the file formats and the CLI."""


class SnnError(Exception):
    """Base class for all errors raised by this package."""


class DimensionError(SnnError, ValueError):
    pass


class InputError(SnnError, ValueError):
    pass


class ConfigurationError(SnnError, ValueError):
    pass


class UnsupportedConfigurationError(ConfigurationError):
    pass


class StateError(SnnError, RuntimeError):
    pass


class ParseError(SnnError, ValueError):
    pass


class UnsupportedLayerError(ParseError):
    pass
