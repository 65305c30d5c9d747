"""molfuse: training framework pairing a SMILES token encoder with a
molecular message-passing network via contrastive and fusion strategies."""

from .autodiff import Tape, Tensor, backward, check_gradients
from .integration import STRATEGIES, IntegratedModel
from .training import RunConfig, run_seeds, train_one

__version__ = "0.1.0"

__all__ = [
    "Tape",
    "Tensor",
    "backward",
    "check_gradients",
    "STRATEGIES",
    "IntegratedModel",
    "RunConfig",
    "run_seeds",
    "train_one",
    "__version__",
]
