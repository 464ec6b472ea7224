"""Deterministic simulator of federated multi-task transfer learning for wearable-sensor HAR."""

from importlib import resources
from pathlib import Path

__version__ = "0.1.0"


def bundled_config(name: str) -> Path:
    """Path of a config shipped in ``fedmtl/configs``."""
    return Path(str(resources.files("fedmtl").joinpath("configs", name)))
