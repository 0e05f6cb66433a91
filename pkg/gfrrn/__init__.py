import gfrrn.adapters as adapters
import gfrrn.attention as attention
import gfrrn.evaluation as evaluation
import gfrrn.frequency as frequency
import gfrrn.labels as labels
import gfrrn.losses as losses
import gfrrn.network as network
import gfrrn.training as training
from gfrrn.network import GFRRN, ModelConfig
from gfrrn.training import RunConfig, TrainConfig, fit

__version__ = "0.1.0"

__all__ = [
    "GFRRN",
    "ModelConfig",
    "RunConfig",
    "TrainConfig",
    "fit",
]
