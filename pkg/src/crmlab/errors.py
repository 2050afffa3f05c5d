class CRMError(Exception):
    """Base class for errors raised by crmlab."""


class ShapeError(CRMError, ValueError):
    pass


class ConfigError(CRMError, ValueError):
    pass


class NonFiniteError(CRMError, FloatingPointError):
    pass


class DataError(CRMError, ValueError):
    pass
