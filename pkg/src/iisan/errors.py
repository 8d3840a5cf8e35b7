"""Error hierarchy. Each family maps to one CLI exit code."""


class IisanError(Exception):
    exit_code = 1


class ConfigError(IisanError, ValueError):
    exit_code = 2


class DataError(IisanError, ValueError):
    exit_code = 3


class CacheError(IisanError):
    exit_code = 4


class CacheMissError(CacheError, KeyError):
    def __str__(self):
        return Exception.__str__(self)


class ConfigDriftError(CacheError):
    pass
