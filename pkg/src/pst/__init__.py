"""Parameter-efficient sparse training with magnitude and movement pruning baselines."""

from .config import RunConfig, load_config
from .trainer import RunReport, Trainer

__all__ = ["RunConfig", "RunReport", "Trainer", "load_config"]
__version__ = "0.1.0"
