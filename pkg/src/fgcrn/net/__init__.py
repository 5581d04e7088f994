from . import autodiff
from .adam import AdamState, adam_step, learning_rate
from .checkpoint import load_checkpoint, save_checkpoint
from .model import Network, Trace

__all__ = ["autodiff", "AdamState", "adam_step", "learning_rate",
           "load_checkpoint", "save_checkpoint", "Network", "Trace"]
