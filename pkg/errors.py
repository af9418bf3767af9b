"""Exception types shared by the library modules and their CLI exit codes"""

from __future__ import annotations


class DimensionError(ValueError):
    """Shape mismatch between operands"""


class ContractError(ValueError):
    """A call violated the documented pre-conditions"""


class ConfigError(ValueError):
    """Invalid model or experiment setting"""


class SceneError(ConfigError):
    """A synthetic scene that cannot be rendered as specified"""


class NumericError(ArithmeticError):
    """Non-finite values produced or consumed"""


class MissingArtifactError(FileNotFoundError):
    """A required input file or directory is absent"""

    def __init__(self, missing: list[str], context: str = "") -> None:
        self.missing = list(missing)
        prefix = f"{context}: " if context else ""
        super().__init__(f"{prefix}missing required artifact(s): {', '.join(self.missing)}")


EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_RUNTIME = 3
EXIT_MISSING = 4


def exit_code_for(exc: BaseException) -> int:
    """Map an exception raised by a command implementation to a process exit code"""
    if isinstance(exc, ConfigError):
        return EXIT_CONFIG
    if isinstance(exc, FileNotFoundError):
        return EXIT_MISSING
    return EXIT_RUNTIME
