"""Multi-task loss, Adam, augmentation and the early-stopped training loop.

The two cross-entropy terms are fused tape ops (forward and gradient written
out by hand, validated by grad_check) so a loss evaluation adds two tape
entries instead of a chain of elementwise ones. Probabilities are clamped to
[1e-7, 1 - 1e-7] before any log, which keeps the loss finite for any
prediction in [0, 1].

Both losses average over the valid (unpadded) mask steps only; pass
include_padding=True in TrainConfig to reproduce the literal zero-padded
behaviour, where the arousal term counts padded steps as negatives.
"""

from __future__ import annotations

import time
from dataclasses import dataclass, field

import numpy as np

from . import tensor as T
from .data import PreparedExample
from .model import ModelConfig, ModelParams, build_model, model_forward
from .tensor import Tape, Tensor, record_op

CLAMP = 1e-7


class NonFiniteLossError(RuntimeError):
    """Raised when training produces a non-finite loss."""


@dataclass
class LossWeights:
    w1: float = 1.0   # arousal (binary) term
    w2: float = 1.0   # stage (categorical) term

    def __post_init__(self):
        if self.w1 < 0 or self.w2 < 0:
            raise ValueError("loss weights must be nonnegative")


def bce_loss(pred: Tensor, target: np.ndarray, valid: int) -> Tensor:
    """Mean binary cross-entropy over the first `valid` steps of a [T, 1] mask."""
    if valid < 1:
        raise ValueError("empty valid range")
    p = pred.data.reshape(-1)[:valid]
    y = np.asarray(target, dtype=p.dtype).reshape(-1)[:valid]
    pc = np.clip(p, CLAMP, 1.0 - CLAMP)
    value = -(y * np.log(pc) + (1.0 - y) * np.log(1.0 - pc)).mean()
    out = Tensor(np.asarray(value, dtype=pred.dtype))

    def backward_fn(g: np.ndarray) -> None:
        if not pred.requires_grad:
            return
        dp = np.zeros_like(pred.data)
        inside = (p > CLAMP) & (p < 1.0 - CLAMP)   # clamp saturates the gradient
        dflat = (pc - y) / (pc * (1.0 - pc) * valid) * inside
        dp.reshape(-1)[:valid] = dflat * g
        T._accumulate(pred, dp)

    return record_op(out, (pred,), backward_fn)


def cce_loss(pred: Tensor, target: np.ndarray, valid: int) -> Tensor:
    """Mean categorical cross-entropy over the first `valid` rows of [T, C].

    All-zero target rows (padding / unscored epochs) contribute exactly 0.
    """
    if valid < 1:
        raise ValueError("empty valid range")
    p = pred.data[:valid]
    y = np.asarray(target, dtype=p.dtype)[:valid]
    pc = np.clip(p, CLAMP, 1.0 - CLAMP)
    value = -(y * np.log(pc)).sum() / valid
    out = Tensor(np.asarray(value, dtype=pred.dtype))

    def backward_fn(g: np.ndarray) -> None:
        if not pred.requires_grad:
            return
        dp = np.zeros_like(pred.data)
        inside = (p > CLAMP) & (p < 1.0 - CLAMP)
        dp[:valid] = -(y / pc) * inside / valid * g
        T._accumulate(pred, dp)

    return record_op(out, (pred,), backward_fn)


def combined_loss(
    arousal_pred: Tensor,
    arousal_target: np.ndarray,
    stage_pred: Tensor,
    stage_target: np.ndarray,
    weights: LossWeights,
    valid: int,
) -> Tensor:
    """weights.w1 * BCE + weights.w2 * CCE; with unit weights the exact sum."""
    bce = bce_loss(arousal_pred, arousal_target, valid)
    cce = cce_loss(stage_pred, stage_target, valid)
    if weights.w1 == 1.0 and weights.w2 == 1.0:
        return T.add(bce, cce)
    dtype = arousal_pred.dtype
    return T.add(
        T.mul(bce, Tensor(np.asarray(weights.w1, dtype=dtype))),
        T.mul(cce, Tensor(np.asarray(weights.w2, dtype=dtype))),
    )


# optimizer -------------------------------------------------------------------

@dataclass
class AdamState:
    m: dict[str, np.ndarray]
    v: dict[str, np.ndarray]
    step: int
    lr: float = 1e-4
    beta1: float = 0.9
    beta2: float = 0.999
    epsilon: float = 1e-7


def init_adam(params: ModelParams, lr: float = 1e-4, beta1: float = 0.9,
              beta2: float = 0.999, epsilon: float = 1e-7) -> AdamState:
    return AdamState(
        m={k: np.zeros_like(p.data) for k, p in params.items()},
        v={k: np.zeros_like(p.data) for k, p in params.items()},
        step=0, lr=lr, beta1=beta1, beta2=beta2, epsilon=epsilon,
    )


def adam_step(params: ModelParams, grads: dict[str, np.ndarray], state: AdamState) -> AdamState:
    """One bias-corrected Adam update; a missing gradient counts as zero."""
    state.step += 1
    bc1 = 1.0 - state.beta1 ** state.step
    bc2 = 1.0 - state.beta2 ** state.step
    for name, p in params.items():
        g = grads.get(name)
        if g is None:
            g = np.zeros_like(p.data)
        m = state.m[name]
        v = state.v[name]
        m *= state.beta1
        m += (1.0 - state.beta1) * g
        v *= state.beta2
        v += (1.0 - state.beta2) * (g * g)
        m_hat = m / bc1
        v_hat = v / bc2
        p.data -= state.lr * m_hat / (np.sqrt(v_hat) + state.epsilon)
    return state


def augment_scale(signal: np.ndarray, rng: np.random.Generator) -> np.ndarray:
    """Multiply the whole signal by one scalar drawn uniformly from [0.9, 1.1]."""
    return signal * rng.uniform(0.9, 1.1)


def clip_gradients(grads: dict[str, np.ndarray], max_norm: float) -> None:
    total = np.sqrt(sum(float((g * g).sum()) for g in grads.values() if g is not None))
    if total > max_norm and total > 0:
        scale = max_norm / total
        for g in grads.values():
            if g is not None:
                g *= scale


# training loop ------------------------------------------------------------------

@dataclass
class TrainConfig:
    lr: float = 1e-4
    beta1: float = 0.9
    beta2: float = 0.999
    epsilon: float = 1e-7
    weights: LossWeights = field(default_factory=LossWeights)
    patience: int = 20
    max_epochs: int = 200
    max_steps: int | None = None
    augment: bool = True
    clip_norm: float | None = None
    include_padding: bool = False
    seed: int = 0


@dataclass
class TrainState:
    epoch: int = 0
    best_val_loss: float = float("inf")
    epochs_since_improvement: int = 0
    patience: int = 20
    max_epochs: int = 200
    seed: int = 0


@dataclass
class TrainResult:
    params: ModelParams
    cfg: ModelConfig
    history: list[tuple[int, float, float, float]]   # epoch, train loss, val loss, seconds
    step_losses: list[float]
    state: TrainState


def _example_loss(params, cfg, ex: PreparedExample, weights, include_padding):
    valid = ex.stage_target.shape[0] if include_padding else ex.valid_steps
    arousal, stage = model_forward(params, cfg, Tensor(ex.signal))
    return combined_loss(arousal, ex.arousal_target, stage, ex.stage_target, weights, valid)


def validation_loss(params: ModelParams, cfg: ModelConfig, examples: list[PreparedExample],
                    weights: LossWeights, include_padding: bool = False) -> float:
    """Unweighted mean of per-record losses, evaluated in the given order."""
    if not examples:
        raise ValueError("validation set is empty")
    total = 0.0
    for ex in examples:
        total += float(_example_loss(params, cfg, ex, weights, include_padding).data)
    return total / len(examples)


def train(
    cfg: ModelConfig,
    train_examples: list[PreparedExample],
    val_examples: list[PreparedExample],
    tc: TrainConfig,
    dtype=np.float64,
) -> TrainResult:
    """Batch-of-one training with augmentation, Adam and early stopping.

    Returns the parameters with the lowest validation loss seen, plus the
    per-epoch history and per-step training losses. Fully deterministic for a
    fixed TrainConfig: init, shuffling and augmentation draws all derive from
    tc.seed and cfg.seed.
    """
    if not train_examples or not val_examples:
        raise ValueError("train and validation splits must be nonempty")
    params = build_model(cfg, dtype=dtype)
    adam = init_adam(params, lr=tc.lr, beta1=tc.beta1, beta2=tc.beta2, epsilon=tc.epsilon)
    rng = np.random.default_rng(tc.seed)
    state = TrainState(patience=tc.patience, max_epochs=tc.max_epochs, seed=tc.seed)

    best_params = {k: p.data.copy() for k, p in params.items()}
    history: list[tuple[int, float, float, float]] = []
    step_losses: list[float] = []
    step = 0
    stop = False

    for epoch in range(1, tc.max_epochs + 1):
        t0 = time.perf_counter()
        state.epoch = epoch
        order = rng.permutation(len(train_examples))
        epoch_total = 0.0
        seen = 0
        for idx in order:
            ex = train_examples[idx]
            sig = augment_scale(ex.signal, rng) if tc.augment else ex.signal
            aug_ex = PreparedExample(
                signal=sig, valid_len=ex.valid_len,
                arousal_target=ex.arousal_target, stage_target=ex.stage_target,
                valid_steps=ex.valid_steps, record_id=ex.record_id,
                sampling_rate_hz=ex.sampling_rate_hz,
            )
            T.zero_grads(params.values())
            with Tape() as tape:
                loss = _example_loss(params, cfg, aug_ex, tc.weights, tc.include_padding)
            loss_value = float(loss.data)
            if not np.isfinite(loss_value):
                raise NonFiniteLossError(
                    f"non-finite loss {loss_value} on record {ex.record_id} at step {step + 1}"
                )
            T.backward(loss, tape)
            grads = {k: p.grad for k, p in params.items()}
            if tc.clip_norm is not None:
                clip_gradients(grads, tc.clip_norm)
            adam_step(params, grads, adam)
            step += 1
            step_losses.append(loss_value)
            epoch_total += loss_value
            seen += 1
            if tc.max_steps is not None and step >= tc.max_steps:
                stop = True
                break

        train_loss = epoch_total / max(seen, 1)
        val_loss = validation_loss(params, cfg, val_examples, tc.weights, tc.include_padding)
        history.append((epoch, train_loss, val_loss, time.perf_counter() - t0))

        if val_loss < state.best_val_loss:
            state.best_val_loss = val_loss
            state.epochs_since_improvement = 0
            for k, p in params.items():
                best_params[k] = p.data.copy()
        else:
            state.epochs_since_improvement += 1
        if stop or state.epochs_since_improvement >= tc.patience:
            break

    result_params = {k: Tensor(v, requires_grad=True) for k, v in best_params.items()}
    return TrainResult(params=result_params, cfg=cfg, history=history,
                       step_losses=step_losses, state=state)


def write_history_tsv(history, path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        fh.write("epoch\ttrain_loss\tval_loss\tseconds\n")
        for epoch, tr, va, sec in history:
            fh.write(f"{epoch}\t{tr:.10g}\t{va:.10g}\t{sec:.3f}\n")
