"""Model assembly: configuration, parameter construction, forward pass, checkpoints.

The architecture is a stack of halving conv blocks, an optional BiLSTM stack,
optional additive attention, and two 1x1-conv output heads. The four ablation
variants toggle the recurrent and attention modules:

    C    conv + heads
    CR   conv + recurrent + heads
    CA   conv + attention (over conv features) + heads
    CRA  conv + recurrent + attention + heads
"""

from __future__ import annotations

import dataclasses
import json
import struct
from dataclasses import dataclass, field

import numpy as np

from . import tensor as T
from .layers import (
    AttentionParams,
    ConvBlockParams,
    HeadParams,
    LSTMParams,
    attention_forward,
    bilstm_forward,
    conv_block_forward,
    segmentation_heads_forward,
)
from .tensor import Tensor

CHECKPOINT_MAGIC = b"FSNW"
CHECKPOINT_VERSION = 1

VARIANTS = ("C", "CR", "CA", "CRA")

# filter counts ramp from 32 to 192 and kernel pairs shrink from (11, 9) to
# (5, 3) across the eight blocks; intermediate values are a monotone ramp in
# multiples of 32
DEFAULT_FILTERS = (32, 32, 64, 64, 96, 128, 160, 192)
DEFAULT_KERNELS = ((11, 9), (11, 9), (9, 7), (9, 7), (7, 5), (7, 5), (5, 3), (5, 3))


class CheckpointError(Exception):
    """Raised for malformed or inconsistent checkpoint files."""


@dataclass
class ModelConfig:
    num_blocks: int = 8
    filters: tuple[int, ...] = DEFAULT_FILTERS
    kernels: tuple[tuple[int, int], ...] = DEFAULT_KERNELS
    lstm_layers: int = 3
    lstm_units: int = 128
    enable_recurrent: bool = True
    enable_attention: bool = True
    num_stages: int = 5
    seed: int = 0

    def __post_init__(self):
        self.filters = tuple(int(f) for f in self.filters)
        self.kernels = tuple((int(a), int(b)) for a, b in self.kernels)
        if self.num_blocks < 1:
            raise ValueError("need at least one conv block")
        if len(self.filters) != self.num_blocks or len(self.kernels) != self.num_blocks:
            raise ValueError(
                f"filters/kernels schedules must have length num_blocks={self.num_blocks}, "
                f"got {len(self.filters)}/{len(self.kernels)}"
            )
        for k1, k2 in self.kernels:
            if k1 % 2 == 0 or k2 % 2 == 0 or k1 <= k2:
                raise ValueError(f"each kernel pair needs odd k1 > odd k2, got ({k1}, {k2})")
        if self.enable_recurrent and (self.lstm_layers < 1 or self.lstm_units < 1):
            raise ValueError("recurrent module needs positive lstm_layers and lstm_units")

    @property
    def downsample_factor(self) -> int:
        return 2 ** self.num_blocks

    @property
    def variant(self) -> str:
        return "C" + ("R" if self.enable_recurrent else "") + ("A" if self.enable_attention else "")

    @property
    def feature_width(self) -> int:
        """Channel width entering the segmentation heads."""
        if self.enable_recurrent:
            return 2 * self.lstm_units
        return self.filters[-1]

    @classmethod
    def toy(cls, seed: int = 0, variant: str = "CRA") -> "ModelConfig":
        """Small desk-scale configuration: 3 blocks, 16 filters, one BiLSTM x16."""
        rec, att = variant_flags(variant)
        return cls(
            num_blocks=3,
            filters=(16, 16, 16),
            kernels=((11, 9), (9, 7), (7, 5)),
            lstm_layers=1,
            lstm_units=16,
            enable_recurrent=rec,
            enable_attention=att,
            seed=seed,
        )


def variant_flags(variant: str) -> tuple[bool, bool]:
    if variant not in VARIANTS:
        raise ValueError(f"variant must be one of {VARIANTS}, got {variant!r}")
    return "R" in variant, "A" in variant


# parameter map ------------------------------------------------------------

ModelParams = dict[str, Tensor]


def _glorot(rng: np.random.Generator, shape: tuple[int, ...], fan_in: int, fan_out: int, dtype) -> np.ndarray:
    limit = np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-limit, limit, size=shape).astype(dtype)


def expected_param_names(cfg: ModelConfig) -> list[str]:
    names = []
    for i in range(cfg.num_blocks):
        names += [f"block{i}.kernels_large", f"block{i}.bias_large",
                  f"block{i}.kernels_small", f"block{i}.bias_small"]
    if cfg.enable_recurrent:
        for i in range(cfg.lstm_layers):
            for d in ("fwd", "bwd"):
                names += [f"lstm{i}.{d}.w_x", f"lstm{i}.{d}.w_h", f"lstm{i}.{d}.b"]
    if cfg.enable_attention:
        names += ["attention.w", "attention.b"]
    names += ["arousal_head.kernels", "arousal_head.bias", "stage_head.kernels", "stage_head.bias"]
    return names


def build_model(cfg: ModelConfig, dtype=np.float64) -> ModelParams:
    """Initialize all named parameter tensors, deterministically from cfg.seed.

    Conv and dense weights get fan-based uniform init; recurrent weights get
    the same uniform treatment; biases are zero except the LSTM forget gate,
    which starts at 1.
    """
    rng = np.random.default_rng(cfg.seed)
    params: ModelParams = {}

    def add(name: str, data: np.ndarray) -> None:
        params[name] = Tensor(np.asarray(data, dtype=dtype), requires_grad=True)

    cin = 1
    for i, (cf, (k1, k2)) in enumerate(zip(cfg.filters, cfg.kernels)):
        add(f"block{i}.kernels_large", _glorot(rng, (k1, cin, cf), k1 * cin, k1 * cf, dtype))
        add(f"block{i}.bias_large", np.zeros(cf))
        add(f"block{i}.kernels_small", _glorot(rng, (k2, cf, cf), k2 * cf, k2 * cf, dtype))
        add(f"block{i}.bias_small", np.zeros(cf))
        cin = cf

    if cfg.enable_recurrent:
        h = cfg.lstm_units
        d = cfg.filters[-1]
        for i in range(cfg.lstm_layers):
            for direction in ("fwd", "bwd"):
                add(f"lstm{i}.{direction}.w_x", _glorot(rng, (d, 4 * h), d, 4 * h, dtype))
                add(f"lstm{i}.{direction}.w_h", _glorot(rng, (h, 4 * h), h, 4 * h, dtype))
                b = np.zeros(4 * h)
                b[h:2 * h] = 1.0   # forget gate
                add(f"lstm{i}.{direction}.b", b)
            d = 2 * h

    width = cfg.feature_width
    if cfg.enable_attention:
        add("attention.w", _glorot(rng, (width, 1), width, 1, dtype))
        add("attention.b", np.zeros(1))

    add("arousal_head.kernels", _glorot(rng, (1, width, 1), width, 1, dtype))
    add("arousal_head.bias", np.zeros(1))
    add("stage_head.kernels", _glorot(rng, (1, width, cfg.num_stages), width, cfg.num_stages, dtype))
    add("stage_head.bias", np.zeros(cfg.num_stages))
    return params


def _block_params(params: ModelParams, i: int) -> ConvBlockParams:
    return ConvBlockParams(
        kernels_large=params[f"block{i}.kernels_large"],
        bias_large=params[f"block{i}.bias_large"],
        kernels_small=params[f"block{i}.kernels_small"],
        bias_small=params[f"block{i}.bias_small"],
    )


def _lstm_params(params: ModelParams, i: int, direction: str) -> LSTMParams:
    return LSTMParams(
        w_x=params[f"lstm{i}.{direction}.w_x"],
        w_h=params[f"lstm{i}.{direction}.w_h"],
        b=params[f"lstm{i}.{direction}.b"],
    )


def model_forward(params: ModelParams, cfg: ModelConfig, signal: Tensor) -> tuple[Tensor, Tensor]:
    """Run the network on one [L, 1] record; returns ([T, 1] arousal, [T, S] stage).

    L must be a multiple of 2**num_blocks so every block can halve it; the
    caller is responsible for standardizing and padding.
    """
    L = signal.shape[0]
    factor = cfg.downsample_factor
    if signal.data.ndim != 2 or signal.shape[1] != 1:
        raise ValueError(f"expected an [L, 1] signal, got {signal.shape}")
    if L % factor != 0:
        raise ValueError(f"signal length {L} is not a multiple of the downsampling factor {factor}")

    x = signal
    for i in range(cfg.num_blocks):
        x = conv_block_forward(x, _block_params(params, i))
    if cfg.enable_recurrent:
        for i in range(cfg.lstm_layers):
            x = bilstm_forward(x, _lstm_params(params, i, "fwd"), _lstm_params(params, i, "bwd"))
    if cfg.enable_attention:
        att = AttentionParams(w=params["attention.w"], b=params["attention.b"])
        x, _ = attention_forward(x, att)
    heads = HeadParams(
        arousal_kernels=params["arousal_head.kernels"],
        arousal_bias=params["arousal_head.bias"],
        stage_kernels=params["stage_head.kernels"],
        stage_bias=params["stage_head.bias"],
    )
    return segmentation_heads_forward(x, heads)


# checkpoints ---------------------------------------------------------------
#
# Layout: magic "FSNW", u32 little-endian header length, UTF-8 JSON header
# {format_version, config, tensors: name -> [dtype, shape, offset, length]},
# then raw little-endian tensor payloads in directory order. Offsets are
# relative to the end of the header.

def save_checkpoint(params: ModelParams, cfg: ModelConfig, path) -> None:
    directory = {}
    payloads = []
    offset = 0
    for name, tensor in params.items():
        raw = np.ascontiguousarray(tensor.data).astype(tensor.data.dtype.newbyteorder("<")).tobytes()
        directory[name] = [str(tensor.data.dtype), list(tensor.shape), offset, len(raw)]
        payloads.append(raw)
        offset += len(raw)
    header = json.dumps({
        "format_version": CHECKPOINT_VERSION,
        "config": dataclasses.asdict(cfg),
        "tensors": directory,
    }).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(CHECKPOINT_MAGIC)
        fh.write(struct.pack("<I", len(header)))
        fh.write(header)
        for raw in payloads:
            fh.write(raw)


def load_checkpoint(path) -> tuple[ModelParams, ModelConfig]:
    with open(path, "rb") as fh:
        magic = fh.read(4)
        if magic != CHECKPOINT_MAGIC:
            raise CheckpointError(f"bad magic {magic!r}, not a checkpoint file")
        raw_len = fh.read(4)
        if len(raw_len) != 4:
            raise CheckpointError("truncated checkpoint header length")
        (header_len,) = struct.unpack("<I", raw_len)
        raw_header = fh.read(header_len)
        if len(raw_header) != header_len:
            raise CheckpointError("truncated checkpoint header")
        try:
            header = json.loads(raw_header.decode("utf-8"))
        except (UnicodeDecodeError, json.JSONDecodeError) as exc:
            raise CheckpointError(f"unreadable checkpoint header: {exc}") from exc
        if header.get("format_version") != CHECKPOINT_VERSION:
            raise CheckpointError(f"unsupported format version {header.get('format_version')!r}")
        cfg_dict = dict(header["config"])
        cfg_dict["kernels"] = tuple(tuple(k) for k in cfg_dict["kernels"])
        cfg_dict["filters"] = tuple(cfg_dict["filters"])
        try:
            cfg = ModelConfig(**cfg_dict)
        except (TypeError, ValueError) as exc:
            raise CheckpointError(f"invalid config in checkpoint: {exc}") from exc

        expected = expected_param_names(cfg)
        directory = header["tensors"]
        if set(directory) != set(expected):
            missing = sorted(set(expected) - set(directory))
            extra = sorted(set(directory) - set(expected))
            raise CheckpointError(
                f"tensor directory does not match config (variant {cfg.variant}): "
                f"missing {missing}, unexpected {extra}"
            )
        payload = fh.read()

    params: ModelParams = {}
    for name in expected:
        dtype_str, shape, offset, length = directory[name]
        chunk = payload[offset:offset + length]
        if len(chunk) != length:
            raise CheckpointError(f"truncated payload for tensor {name}")
        arr = np.frombuffer(chunk, dtype=np.dtype(dtype_str).newbyteorder("<")).copy()
        if arr.size != int(np.prod(shape)):
            raise CheckpointError(f"payload size mismatch for tensor {name}")
        params[name] = Tensor(arr.reshape(shape).astype(dtype_str), requires_grad=True)
    return params, cfg


def parameter_count(params: ModelParams) -> int:
    return sum(t.data.size for t in params.values())
