"""Identity-aware feature decoupling for clothing-change person re-identification."""
from .config import RunConfig, load_config
from .errors import ConfigError, IFDError, LoadError, NumericError, ProtocolError, ValidationError
from .network import IFDNetwork

__all__ = [
    "ConfigError",
    "IFDError",
    "IFDNetwork",
    "LoadError",
    "NumericError",
    "ProtocolError",
    "RunConfig",
    "ValidationError",
    "load_config",
]
__version__ = "0.1.0"
