"""Tree-LSTM encoders with tree-over-tree attention for natural language inference."""

from .autodiff import Tape, Tensor
from .data import Example, ParseTree, load_corpus, parse_conll, parse_sexpr
from .model import ModelParams, Variant, forward, loss
from .train import TrainConfig, init_params, train_loop

__version__ = "0.1.0"
