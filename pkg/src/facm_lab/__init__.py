"""Flow-anchored consistency models on low-dimensional toy distributions."""

from .flow_process import ConditioningScheme, Task, TimeSchedule
from .network import Checkpoint, Network, NetworkConfig
from .objectives import GuidanceSpec, WeightingSpec
from .trainer import TrainConfig

__all__ = [
    "Checkpoint",
    "ConditioningScheme",
    "GuidanceSpec",
    "Network",
    "NetworkConfig",
    "Task",
    "TimeSchedule",
    "TrainConfig",
    "WeightingSpec",
]
__version__ = "0.1.0"
