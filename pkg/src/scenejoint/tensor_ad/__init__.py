"""Small dense-tensor autodiff: a tape, numpy-backed primitives, layers, Adam and checkpoints."""

from scenejoint.tensor_ad import ops
from scenejoint.tensor_ad.checkpoint import CheckpointError, checkpoint_id, load_into, read_checkpoint, save_checkpoint
from scenejoint.tensor_ad.nn import (
    AttentionParams,
    DenseLayer,
    ParamStore,
    dense,
    layer_norm,
    mlp_forward,
    multihead_attention,
)
from scenejoint.tensor_ad.optim import Param, adam_step, clip_grad_norm, global_grad_norm
from scenejoint.tensor_ad.tape import Tape, Tensor

smooth_l1 = ops.smooth_l1
softmax_cross_entropy = ops.softmax_cross_entropy


def backward(tape: Tape, loss: Tensor) -> None:
    tape.backward(loss)


__all__ = [
    "AttentionParams",
    "CheckpointError",
    "DenseLayer",
    "Param",
    "ParamStore",
    "Tape",
    "Tensor",
    "adam_step",
    "backward",
    "checkpoint_id",
    "clip_grad_norm",
    "dense",
    "global_grad_norm",
    "layer_norm",
    "load_into",
    "mlp_forward",
    "multihead_attention",
    "ops",
    "read_checkpoint",
    "save_checkpoint",
    "smooth_l1",
    "softmax_cross_entropy",
]
