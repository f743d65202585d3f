"""Open-vocabulary segmentation from mixed pixel- and image-level labels, at desk scale."""

from .config import RunConfig, load_config
from .errors import LarvSegError

__version__ = "0.1.0"
__all__ = ["RunConfig", "load_config", "LarvSegError", "__version__"]
