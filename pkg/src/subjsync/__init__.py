"""Training-free subject consistency mechanisms on a deterministic toy denoiser."""

from subjsync.config import RunConfig, load_config
from subjsync.pipeline import RunResult, run

__all__ = ["RunConfig", "RunResult", "load_config", "run"]
__version__ = "0.1.0"
