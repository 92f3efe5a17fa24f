"""Network building blocks: conv block, BiLSTM, additive attention, heads.

All functions are pure maps over the autodiff core; parameters are plain
dataclasses of tensors.
"""

from __future__ import annotations

from dataclasses import dataclass

from . import tensor as T
from .tensor import Tensor


@dataclass
class ConvBlockParams:
    """Two same-length convolutions (large kernel first) plus their biases."""

    kernels_large: Tensor   # [K1, Cin, Cf]
    bias_large: Tensor      # [Cf]
    kernels_small: Tensor   # [K2, Cf, Cf]
    bias_small: Tensor      # [Cf]

    def __post_init__(self):
        k1 = self.kernels_large.shape[0]
        k2 = self.kernels_small.shape[0]
        if k1 % 2 == 0 or k2 % 2 == 0:
            raise ValueError(f"kernel lengths must be odd, got ({k1}, {k2})")
        if k1 <= k2:
            raise ValueError(f"large kernel must exceed small kernel, got ({k1}, {k2})")


@dataclass
class LSTMParams:
    """One direction of an LSTM layer; gate order (input, forget, output, candidate)."""

    w_x: Tensor   # [D, 4H]
    w_h: Tensor   # [H, 4H]
    b: Tensor     # [4H]

    @property
    def units(self) -> int:
        return self.w_h.shape[0]


@dataclass
class AttentionParams:
    w: Tensor   # [D, 1]
    b: Tensor   # [1]


@dataclass
class HeadParams:
    """1x1-convolution output branches: one arousal channel, num_stages stage channels."""

    arousal_kernels: Tensor   # [1, D, 1]
    arousal_bias: Tensor      # [1]
    stage_kernels: Tensor     # [1, D, S]
    stage_bias: Tensor        # [S]


def conv_block_forward(x: Tensor, p: ConvBlockParams) -> Tensor:
    """conv(K1, same) -> relu -> conv(K2, same) -> relu -> maxpool(2, 2).

    Halves the time axis exactly, so the input length must be even.
    """
    if x.shape[0] % 2 != 0:
        raise ValueError(f"conv block needs an even input length, got {x.shape[0]}")
    y = T.relu(T.conv1d_same(x, p.kernels_large, p.bias_large))
    y = T.relu(T.conv1d_same(y, p.kernels_small, p.bias_small))
    return T.maxpool1d(y, 2, 2)


def bilstm_forward(x: Tensor, fwd: LSTMParams, bwd: LSTMParams) -> Tensor:
    """Concatenated forward and backward hidden-state sequences, [T, 2H]."""
    h_f = T.lstm_sequence(x, fwd.w_x, fwd.w_h, fwd.b)
    h_b = T.lstm_sequence(x, bwd.w_x, bwd.w_h, bwd.b, reverse=True)
    return T.concat_lastdim(h_f, h_b)


def attention_forward(h: Tensor, p: AttentionParams) -> tuple[Tensor, Tensor]:
    """Additive attention over time.

    A scalar score tanh(h_t . w + b) per step is softmax-normalized along the
    time axis into weights alpha; the context vector (the alpha-weighted sum
    of hidden states) is broadcast-added back onto every step.
    Returns (h + context, alpha).
    """
    t_steps = h.shape[0]
    scores = T.tanh(T.dense(h, p.w, p.b))             # [T, 1]
    alpha_row = T.softmax_lastdim(T.reshape(scores, (1, t_steps)))
    context = T.dense(alpha_row, h)                   # [1, D]
    h_tilde = T.add(h, T.reshape(context, (h.shape[1],)))
    return h_tilde, T.reshape(alpha_row, (t_steps,))


def segmentation_heads_forward(h_tilde: Tensor, p: HeadParams) -> tuple[Tensor, Tensor]:
    """Sigmoid arousal mask [T, 1] and softmax stage mask [T, S]."""
    arousal = T.sigmoid(T.conv1d_same(h_tilde, p.arousal_kernels, p.arousal_bias))
    stage = T.softmax_lastdim(T.conv1d_same(h_tilde, p.stage_kernels, p.stage_bias))
    return arousal, stage
