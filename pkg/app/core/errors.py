"""
Exception hierarchy shared by every service.

Each category maps to a process exit code so scripted runs can tell a bad
config from bad data from a numerical failure.
"""

from typing import Optional


class TsmomError(Exception):
    exit_code = 1


class ConfigError(TsmomError):
    exit_code = 2


class DataError(TsmomError):
    exit_code = 3

    def __init__(
        self,
        message: str,
        file: Optional[str] = None,
        row: Optional[int] = None,
        asset_id: Optional[str] = None,
        month: Optional[str] = None,
    ):
        self.file = file
        self.row = row
        self.asset_id = asset_id
        self.month = month
        context = [
            f"{name}={value}"
            for name, value in (
                ("file", file),
                ("row", row),
                ("asset", asset_id),
                ("month", month),
            )
            if value is not None
        ]
        if context:
            message = f"{message} ({', '.join(context)})"
        super().__init__(message)


class NumericError(TsmomError):
    exit_code = 4
