import logging

from rich.console import Console
from rich.logging import RichHandler

_configured = False


def setup_logging(level: int = logging.INFO) -> None:
    """Rich logs on stderr so CSV/JSON results on stdout stay clean."""
    global _configured
    root = logging.getLogger()
    root.setLevel(level)
    if _configured:
        return
    handler = RichHandler(console=Console(stderr=True), rich_tracebacks=True, show_path=False)
    handler.setFormatter(logging.Formatter("%(name)s: %(message)s"))
    root.addHandler(handler)
    _configured = True
