"""Session-based next-item recommendation with TAGNN++ on a small numpy
autodiff engine."""

from .autograd import Rng, Tensor, backward, no_grad
from .data import Corpus, LabeledExample, Session, Vocabulary, make_batches, preprocess
from .errors import ConfigError, ContractError, DimensionError, NumericError, TrainingDiverged
from .graph import SessionGraph, build_graph
from .metrics import MetricsReport, evaluate, hit_rate_at_n, mrr_at_n, topk
from .model import ModelConfig, TAGNNPlusPlus, load_checkpoint, save_checkpoint
from .train import TrainConfig, agc_clip, cross_entropy, fit, lr_schedule

__version__ = "0.1.0"
