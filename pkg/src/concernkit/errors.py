"""Exception types shared across the toolkit."""


class ConcernKitError(Exception):
    pass


class ConfigError(ConcernKitError, ValueError):
    """Bad configuration: unknown names, missing definitions, unreadable inputs."""


class ValidationError(ConcernKitError, ValueError):
    pass


class NotFound(ConcernKitError, LookupError):
    pass


class ProtocolError(ConcernKitError):
    """A client answered, but the answer violates the client contract."""

    def __init__(self, message, post_id=None):
        super().__init__(message)
        self.post_id = post_id


class RetryableError(ConcernKitError):
    """Transport failure or timeout; the call may succeed if repeated."""

    def __init__(self, message, post_id=None):
        super().__init__(message)
        self.post_id = post_id


class FitError(ConcernKitError):
    pass
