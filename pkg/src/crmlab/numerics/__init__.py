"""Hand-written dense numerics: layers, causal attention, losses, SGD, grad checks."""

from crmlab.numerics.attention import (
    CausalSelfAttention,
    TransformerBlock,
    block_backward,
    block_forward,
    causal_attention_backward,
    causal_attention_forward,
)
from crmlab.numerics.checkpoint import load_checkpoint, save_checkpoint
from crmlab.numerics.gradcheck import grad_check
from crmlab.numerics.layers import (
    Dense,
    Embedding,
    LayerNorm,
    Param,
    ParamSet,
    l2_normalize,
    l2_normalize_backward,
    layer_norm_backward,
    layer_norm_forward,
    mlp_backward,
    mlp_forward,
)
from crmlab.numerics.losses import inbatch_softmax_loss, softmax_rows
from crmlab.numerics.optim import Adam, make_optimizer, sgd_step

__all__ = [
    "Adam",
    "CausalSelfAttention",
    "Dense",
    "Embedding",
    "LayerNorm",
    "Param",
    "ParamSet",
    "TransformerBlock",
    "block_backward",
    "block_forward",
    "causal_attention_backward",
    "causal_attention_forward",
    "grad_check",
    "inbatch_softmax_loss",
    "l2_normalize",
    "l2_normalize_backward",
    "layer_norm_backward",
    "layer_norm_forward",
    "load_checkpoint",
    "make_optimizer",
    "mlp_backward",
    "mlp_forward",
    "save_checkpoint",
    "sgd_step",
    "softmax_rows",
]
