"""echoclean: streaming joint acoustic echo control and speech enhancement."""

from .pipeline import Engine, EngineConfig, StreamStats, erle_star, process_files

__all__ = ["Engine", "EngineConfig", "StreamStats", "erle_star", "process_files"]
__version__ = "0.1.0"
