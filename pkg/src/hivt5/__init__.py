"""Hierarchical multi-page document question answering on a small numpy autograd."""

from .corpus import Corpus, Document, OcrToken, Page, QASample, SyntheticConfig, generate_synthetic
from .errors import CheckpointError, ConfigError, StageError, ValidationError
from .evaluation import anls, evaluate, levenshtein
from .model import HiVt5, HiVt5Config, page_budget
from .tensor import Tensor, no_grad
from .training import Trainer, TrainConfig, load_checkpoint, save_checkpoint
from .vocab import Vocab

__version__ = "0.1.0"

__all__ = [
    "CheckpointError", "ConfigError", "Corpus", "Document", "HiVt5", "HiVt5Config", "OcrToken", "Page",
    "QASample", "StageError", "SyntheticConfig", "Tensor", "TrainConfig", "Trainer", "ValidationError",
    "Vocab", "anls", "evaluate", "generate_synthetic", "levenshtein", "load_checkpoint", "no_grad",
    "page_budget", "save_checkpoint",
]
