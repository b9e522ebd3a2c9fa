import logging
import logging.handlers
import os
import sys
from pathlib import Path

# Determine log directory
# Use XDG_STATE_HOME if available (standard for logs/history), otherwise ~/.local/state/ctrlmv
_xdg_state = os.environ.get("XDG_STATE_HOME")
if _xdg_state:
    LOG_DIR = os.path.join(_xdg_state, "ctrlmv")
else:
    LOG_DIR = os.path.join(os.path.expanduser("~"), ".local", "state", "ctrlmv")

try:
    Path(LOG_DIR).mkdir(parents=True, exist_ok=True)
    LOG_FILE = os.path.join(LOG_DIR, "ctrlmv.log")
except Exception:
    import tempfile

    LOG_DIR = tempfile.gettempdir()
    LOG_FILE = os.path.join(LOG_DIR, "ctrlmv.log")

LOG_FORMAT = "[%(asctime)s] [%(name)s] [%(levelname)s] %(message)s"
DATE_FORMAT = "%Y-%m-%d %H:%M:%S"


def console_level() -> int:
    """Console verbosity from CTRL_MV_LOG_LEVEL (default INFO)."""
    name = os.environ.get("CTRL_MV_LOG_LEVEL", "INFO").upper()
    level = logging.getLevelName(name)
    return level if isinstance(level, int) else logging.INFO


def set_console_level(level: int | str) -> None:
    """Change the console level of every ctrlmv logger created so far."""
    if isinstance(level, str):
        os.environ["CTRL_MV_LOG_LEVEL"] = level.upper()
        level = console_level()
    for logger in _configured:
        for handler in logger.handlers:
            if getattr(handler, "_ctrlmv_console", False):
                handler.setLevel(level)


_configured: list[logging.Logger] = []


def get_logger(name):
    """Get a configured logger instance."""
    logger = logging.getLogger(f"ctrlmv.{name}")

    if not logger.handlers:
        logger.setLevel(logging.DEBUG)
        logger.propagate = False

        formatter = logging.Formatter(LOG_FORMAT, datefmt=DATE_FORMAT)

        console_handler = logging.StreamHandler(sys.stderr)
        console_handler.setLevel(console_level())
        console_handler.setFormatter(formatter)
        console_handler._ctrlmv_console = True
        logger.addHandler(console_handler)

        try:
            # 1MB max size, keep 3 backups
            file_handler = logging.handlers.RotatingFileHandler(
                LOG_FILE, maxBytes=1024 * 1024, backupCount=3, encoding="utf-8"
            )
            file_handler.setLevel(logging.DEBUG)
            file_handler.setFormatter(formatter)
            logger.addHandler(file_handler)
        except Exception as e:
            print(f"Failed to setup file logging: {e}", file=sys.stderr)

        _configured.append(logger)

    return logger
