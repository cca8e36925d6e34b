"""Exception hierarchy shared across the toolkit.

Every error raised by this package derives from CorpointError so callers
(and the CLI) can catch one base class and report a structured failure.
"""


class CorpointError(Exception):
    """Base class for all toolkit errors."""

    #: short machine-readable code used in CLI error output
    code = "Error"

    def payload(self) -> dict:
        return {"error": self.code, "message": str(self)}


class ConfigError(CorpointError):
    code = "ConfigError"

    def __init__(self, message: str, keys: list[str] | None = None):
        super().__init__(message)
        self.keys = list(keys or [])

    def payload(self) -> dict:
        out = super().payload()
        if self.keys:
            out["keys"] = self.keys
        return out
