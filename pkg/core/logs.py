# core/logs.py
import logging

from rich.logging import RichHandler

ROOT_LOGGER = "dataplane"

_configured = False


def get_logger(name: str) -> logging.Logger:
    """Module logger under the shared ``dataplane`` namespace."""
    return logging.getLogger(f"{ROOT_LOGGER}.{name}")


def setup_logging(level: str = "WARNING", rich: bool = True) -> logging.Logger:
    """Attach a single handler to the namespace root; repeated calls only change the level."""
    global _configured
    root = logging.getLogger(ROOT_LOGGER)
    root.setLevel(level.upper())
    if not _configured:
        if rich:
            handler = RichHandler(rich_tracebacks=True, show_path=False, markup=False)
            handler.setFormatter(logging.Formatter("%(name)s: %(message)s"))
        else:
            handler = logging.StreamHandler()
            handler.setFormatter(logging.Formatter("%(levelname)s %(name)s: %(message)s"))
        root.addHandler(handler)
        root.propagate = False
        _configured = True
    return root
