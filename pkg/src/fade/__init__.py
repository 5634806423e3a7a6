"""Fisher-guided online adaptation under sequential covariate shift."""

from .adapter import AdapterConfig, RunLog, run_sequential
from .data_stream import FeatureBatch, StreamSpec, generate_stream
from .detector import DetectorConfig, ShiftSignal
from .fisher import DiagonalFim
from .models import Model, ModelSpec

__version__ = "0.1.0"

__all__ = [
    "AdapterConfig", "DetectorConfig", "DiagonalFim", "FeatureBatch", "Model",
    "ModelSpec", "RunLog", "ShiftSignal", "StreamSpec", "generate_stream",
    "run_sequential",
]
