from .autodiff import (
    DEFAULT_DTYPE,
    Graph,
    Node,
    NumericError,
    ShapeError,
    Tensor,
    activation,
    as_tensor,
    backward,
    concat,
    exp,
    getitem,
    log,
    masked_max,
    masked_softmax,
    matmul,
    mean,
    no_grad,
    relu,
    reshape,
    sigmoid,
    softmax,
    take_rows,
    tanh,
    transpose,
    tsum,
)
from .dropout import (
    DropoutSpec,
    dropout_mask,
    embed_with_dropout,
    embedding_dropout_mask,
    variational_dropout_mask,
)
from .gradcheck import REL_FLOOR, check_gradients, numeric_grad, relative_error
from .module import Dense, LSTMLayer, Module, uniform_fan_in
from .nn import LSTMParams, bce_loss, ce_loss, lstm_cell, lstm_sequence, lstm_sequence_reference
from .optim import Adam, AdamState, adam_step

__all__ = [
    "DEFAULT_DTYPE", "Graph", "Node", "NumericError", "ShapeError", "Tensor", "activation", "as_tensor",
    "backward", "concat", "exp", "getitem", "log", "masked_max", "masked_softmax", "matmul", "mean",
    "no_grad", "relu", "reshape", "sigmoid", "softmax", "take_rows", "tanh", "transpose", "tsum",
    "DropoutSpec", "dropout_mask", "embed_with_dropout", "embedding_dropout_mask", "variational_dropout_mask",
    "REL_FLOOR", "check_gradients", "numeric_grad", "relative_error",
    "Dense", "LSTMLayer", "Module", "uniform_fan_in",
    "LSTMParams", "bce_loss", "ce_loss", "lstm_cell", "lstm_sequence", "lstm_sequence_reference",
    "Adam", "AdamState", "adam_step",
]
