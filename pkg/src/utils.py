import logging
import os

logger = logging.getLogger(__name__)

LOG_FORMAT = '%(asctime)s - %(levelname)s - %(message)s'


def ensure_dir(path):
    """Create ``path`` (and parents) if missing; return it."""
    os.makedirs(path, exist_ok=True)
    return path


def default_workers():
    """Worker count from OEDOPF_WORKERS, else None (let the executor decide)."""
    value = os.environ.get("OEDOPF_WORKERS")
    if not value:
        return None
    try:
        workers = int(value)
    except ValueError:
        logger.warning("Ignoring non-integer OEDOPF_WORKERS=%r", value)
        return None
    return workers if workers > 0 else None


def configure_logging(level=None):
    level = level or os.environ.get("OEDOPF_LOG_LEVEL", "INFO")
    logging.basicConfig(level=getattr(logging, str(level).upper(), logging.INFO), format=LOG_FORMAT)
