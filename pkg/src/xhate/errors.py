"""Exception hierarchy. Each class carries the CLI exit code it maps to."""


class XhateError(Exception):
    exit_code = 1


class UsageError(XhateError):
    exit_code = 1


class DataError(XhateError):
    exit_code = 2


class SchemaError(DataError):
    pass


class ComparisonRefused(DataError):
    pass


class ConfigError(XhateError):
    exit_code = 3


class NumericError(XhateError):
    exit_code = 3


class CapabilityError(XhateError):
    exit_code = 3


class StaleCacheError(XhateError):
    exit_code = 3
