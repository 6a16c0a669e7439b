"""Exception hierarchy shared by the library and the CLI.

Each class carries the process exit code the CLI maps it to.
"""


class IterLNLError(Exception):
    exit_code = 1


class ConfigError(IterLNLError, ValueError):
    """Invalid hyperparameters, flags or dataset specs."""

    exit_code = 2


class DataError(IterLNLError, ValueError):
    """Malformed or inconsistent input data."""

    exit_code = 3


class ParseError(DataError):
    def __init__(self, message, path=None, line=None):
        self.path = path
        self.line = line
        where = ""
        if path is not None:
            where = f"{path}"
            if line is not None:
                where += f":{line}"
            where += ": "
        super().__init__(where + message)


class CheckpointError(DataError):
    pass


class TransportError(IterLNLError, ConnectionError):
    """Remote black box unreachable after retries."""

    exit_code = 4


class ProtocolError(IterLNLError):
    """Remote black box answered with something that is not a valid prediction."""

    exit_code = 4
