"""Dense tensors with tape-based reverse-mode automatic differentiation.

Everything the network needs is expressed through a small set of vectorized
numpy primitives. Each primitive computes its forward result eagerly and, when
a Tape is active and an input requires gradients, records a closure that
propagates the output gradient back to its inputs. A full recurrence
(`lstm_sequence`) is exposed as a single fused primitive so that the time loop
runs in plain numpy instead of creating thousands of tape entries per record.

Precision policy: float64 is the default and is what every gradient check
assumes; float32 can be selected per tensor for training speed.
"""

from __future__ import annotations

import threading
from typing import Callable, Iterable, Sequence

import numpy as np

__all__ = [
    "Tensor",
    "Tape",
    "record_op",
    "conv1d_same",
    "maxpool1d",
    "dense",
    "activation",
    "relu",
    "tanh",
    "sigmoid",
    "softmax_lastdim",
    "add",
    "mul",
    "reshape",
    "concat_lastdim",
    "reduce_sum",
    "lstm_sequence",
    "backward",
    "grad_check",
    "zero_grads",
]

_FLOAT_DTYPES = (np.float32, np.float64)


class Tensor:
    """N-dimensional real array with an attached gradient slot."""

    __slots__ = ("data", "grad", "requires_grad")

    def __init__(self, data, requires_grad: bool = False, dtype=None):
        arr = np.asarray(data, dtype=dtype)
        if arr.dtype not in _FLOAT_DTYPES:
            arr = arr.astype(np.float64)
        self.data = arr
        self.grad: np.ndarray | None = None
        self.requires_grad = requires_grad

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else float(self.data)

    def __repr__(self) -> str:
        return f"Tensor(shape={self.data.shape}, dtype={self.data.dtype}, requires_grad={self.requires_grad})"


_tls = threading.local()


def _active_tape() -> "Tape | None":
    stack = getattr(_tls, "tapes", None)
    return stack[-1] if stack else None


class Tape:
    """Ordered record of executed operations for one forward pass.

    Used as a context manager; ops executed inside record themselves here.
    A tape and the tensors created under it belong to a single thread.
    """

    def __init__(self):
        self._entries: list[tuple[Tensor, Callable[[np.ndarray], None]]] = []
        self._watched: list[Tensor] = []

    def __enter__(self) -> "Tape":
        if not hasattr(_tls, "tapes"):
            _tls.tapes = []
        _tls.tapes.append(self)
        return self

    def __exit__(self, exc_type, exc, tb):
        _tls.tapes.pop()
        return False

    def __len__(self) -> int:
        return len(self._entries)


def record_op(out: Tensor, inputs: Sequence[Tensor], backward_fn: Callable[[np.ndarray], None]) -> Tensor:
    """Attach a backward closure to the active tape, if any input needs it."""
    tape = _active_tape()
    if tape is None or not any(t.requires_grad for t in inputs):
        return out
    out.requires_grad = True
    for t in inputs:
        if t.requires_grad:
            tape._watched.append(t)
    tape._entries.append((out, backward_fn))
    return out


def _accumulate(t: Tensor, g: np.ndarray, owned: bool = True) -> None:
    # `owned` means g is a fresh array that nothing else aliases
    if t.grad is None:
        t.grad = g if owned else g.copy()
    else:
        t.grad += g


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """Sum a gradient over the axes that broadcasting expanded."""
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for axis, extent in enumerate(shape):
        if extent == 1 and g.shape[axis] != 1:
            g = g.sum(axis=axis, keepdims=True)
    return g


def _sigmoid(x: np.ndarray) -> np.ndarray:
    # exp of a non-positive argument never overflows
    e = np.exp(-np.abs(x))
    return np.where(x >= 0, 1.0 / (1.0 + e), e / (1.0 + e))


# ---------------------------------------------------------------------------
# primitives
# ---------------------------------------------------------------------------

def conv1d_same(x: Tensor, kernels: Tensor, bias: Tensor) -> Tensor:
    """Length-preserving 1-D convolution, stride 1, zero padding.

    x: [T, Cin], kernels: [K, Cin, Cout] with K odd, bias: [Cout].
    out[t, o] = bias[o] + sum_{k,c} x[t + k - (K-1)/2, c] * kernels[k, c, o].
    """
    K, cin, cout = kernels.shape
    if K % 2 == 0:
        raise ValueError(f"kernel length must be odd, got {K}")
    if x.data.ndim != 2 or x.shape[1] != cin:
        raise ValueError(f"input channels {x.shape} do not match kernels {kernels.shape}")
    if bias.shape != (cout,):
        raise ValueError(f"bias shape {bias.shape} does not match {cout} output channels")
    T = x.shape[0]
    half = (K - 1) // 2
    xp = np.zeros((T + K - 1, cin), dtype=x.dtype)
    xp[half:half + T] = x.data
    out_data = np.tile(bias.data, (T, 1))
    for k in range(K):
        out_data += xp[k:k + T] @ kernels.data[k]
    out = Tensor(out_data)

    def backward_fn(g: np.ndarray) -> None:
        if bias.requires_grad:
            _accumulate(bias, g.sum(axis=0))
        if kernels.requires_grad:
            dk = np.empty_like(kernels.data)
            for k in range(K):
                dk[k] = xp[k:k + T].T @ g
            _accumulate(kernels, dk)
        if x.requires_grad:
            dxp = np.zeros_like(xp)
            for k in range(K):
                dxp[k:k + T] += g @ kernels.data[k].T
            _accumulate(x, dxp[half:half + T].copy())

    return record_op(out, (x, kernels, bias), backward_fn)


def maxpool1d(x: Tensor, window: int, stride: int) -> Tensor:
    """Max pooling over time per channel; ties route gradient to the first max."""
    if x.data.ndim != 2:
        raise ValueError("maxpool1d expects a [T, C] input")
    T, C = x.shape
    if T < window:
        raise ValueError(f"input length {T} shorter than pooling window {window}")
    n_out = (T - window) // stride + 1
    idx = stride * np.arange(n_out)[:, None] + np.arange(window)[None, :]
    windows = x.data[idx]                     # [n_out, window, C]
    arg = windows.argmax(axis=1)              # first occurrence on ties
    out = Tensor(np.take_along_axis(windows, arg[:, None, :], axis=1)[:, 0, :])

    def backward_fn(g: np.ndarray) -> None:
        if not x.requires_grad:
            return
        dx = np.zeros_like(x.data)
        rows = (stride * np.arange(n_out)[:, None] + arg).reshape(-1)
        cols = np.tile(np.arange(C), n_out)
        np.add.at(dx, (rows, cols), g.reshape(-1))
        _accumulate(x, dx)

    return record_op(out, (x,), backward_fn)


def dense(x: Tensor, weight: Tensor, bias: Tensor | None = None) -> Tensor:
    """Affine map over the last axis: out = x @ weight (+ bias)."""
    din, dout = weight.shape
    if x.shape[-1] != din:
        raise ValueError(f"last extent {x.shape[-1]} does not match weight rows {din}")
    lead = x.shape[:-1]
    x2 = x.data.reshape(-1, din)
    out2 = x2 @ weight.data
    if bias is not None:
        out2 += bias.data
    out = Tensor(out2.reshape(lead + (dout,)))

    def backward_fn(g: np.ndarray) -> None:
        g2 = g.reshape(-1, dout)
        if bias is not None and bias.requires_grad:
            _accumulate(bias, g2.sum(axis=0))
        if weight.requires_grad:
            _accumulate(weight, x2.T @ g2)
        if x.requires_grad:
            _accumulate(x, (g2 @ weight.data.T).reshape(x.shape))

    inputs = (x, weight) if bias is None else (x, weight, bias)
    return record_op(out, inputs, backward_fn)


def activation(x: Tensor, kind: str) -> Tensor:
    """Elementwise nonlinearity: relu, tanh or sigmoid."""
    if kind == "relu":
        out = Tensor(np.maximum(x.data, 0.0))
    elif kind == "tanh":
        out = Tensor(np.tanh(x.data))
    elif kind == "sigmoid":
        out = Tensor(_sigmoid(x.data))
    else:
        raise ValueError(f"unknown activation {kind!r}")

    def backward_fn(g: np.ndarray) -> None:
        if not x.requires_grad:
            return
        y = out.data
        if kind == "relu":
            _accumulate(x, g * (y > 0))       # derivative at 0 is 0
        elif kind == "tanh":
            _accumulate(x, g * (1.0 - y * y))
        else:
            _accumulate(x, g * y * (1.0 - y))

    return record_op(out, (x,), backward_fn)


def relu(x: Tensor) -> Tensor:
    return activation(x, "relu")


def tanh(x: Tensor) -> Tensor:
    return activation(x, "tanh")


def sigmoid(x: Tensor) -> Tensor:
    return activation(x, "sigmoid")


def softmax_lastdim(x: Tensor) -> Tensor:
    """Softmax along the last axis, stabilized by max subtraction."""
    shifted = x.data - x.data.max(axis=-1, keepdims=True)
    e = np.exp(shifted)
    out = Tensor(e / e.sum(axis=-1, keepdims=True))

    def backward_fn(g: np.ndarray) -> None:
        if not x.requires_grad:
            return
        y = out.data
        _accumulate(x, y * (g - (g * y).sum(axis=-1, keepdims=True)))

    return record_op(out, (x,), backward_fn)


def _check_broadcastable(a: tuple[int, ...], b: tuple[int, ...]) -> None:
    for ea, eb in zip(reversed(a), reversed(b)):
        if ea != eb and ea != 1 and eb != 1:
            raise ValueError(f"shapes {a} and {b} are not broadcastable")


def add(a: Tensor, b: Tensor) -> Tensor:
    """Elementwise sum with numpy broadcasting; grads sum over broadcast axes."""
    _check_broadcastable(a.shape, b.shape)
    out = Tensor(a.data + b.data)

    def backward_fn(g: np.ndarray) -> None:
        if a.requires_grad:
            _accumulate(a, _unbroadcast(g, a.shape), owned=False)
        if b.requires_grad:
            _accumulate(b, _unbroadcast(g, b.shape), owned=False)

    return record_op(out, (a, b), backward_fn)


def mul(a: Tensor, b: Tensor) -> Tensor:
    """Elementwise product with numpy broadcasting."""
    _check_broadcastable(a.shape, b.shape)
    out = Tensor(a.data * b.data)

    def backward_fn(g: np.ndarray) -> None:
        if a.requires_grad:
            _accumulate(a, _unbroadcast(g * b.data, a.shape), owned=False)
        if b.requires_grad:
            _accumulate(b, _unbroadcast(g * a.data, b.shape), owned=False)

    return record_op(out, (a, b), backward_fn)


def reshape(x: Tensor, shape: tuple[int, ...]) -> Tensor:
    out = Tensor(x.data.reshape(shape))

    def backward_fn(g: np.ndarray) -> None:
        if x.requires_grad:
            _accumulate(x, g.reshape(x.shape), owned=False)

    return record_op(out, (x,), backward_fn)


def concat_lastdim(a: Tensor, b: Tensor) -> Tensor:
    if a.shape[:-1] != b.shape[:-1]:
        raise ValueError(f"cannot concatenate {a.shape} and {b.shape} on the last axis")
    na = a.shape[-1]
    out = Tensor(np.concatenate([a.data, b.data], axis=-1))

    def backward_fn(g: np.ndarray) -> None:
        if a.requires_grad:
            _accumulate(a, g[..., :na], owned=False)
        if b.requires_grad:
            _accumulate(b, g[..., na:], owned=False)

    return record_op(out, (a, b), backward_fn)


def reduce_sum(x: Tensor) -> Tensor:
    out = Tensor(x.data.sum())

    def backward_fn(g: np.ndarray) -> None:
        if x.requires_grad:
            _accumulate(x, np.full(x.shape, g, dtype=x.dtype))

    return record_op(out, (x,), backward_fn)


def lstm_sequence(x: Tensor, w_x: Tensor, w_h: Tensor, b: Tensor, reverse: bool = False) -> Tensor:
    """One LSTM direction over a [T, D] sequence, fused into a single tape op.

    Gate layout along the 4H axis is (input, forget, output, candidate);
    initial hidden and cell states are zero. With reverse=True the recurrence
    runs from the last step to the first and the output is returned in the
    original time order. The whole backward-through-time pass is implemented
    here so the tape holds one entry instead of ~10 per time step.
    """
    T, D = x.shape
    H = w_h.shape[0]
    if w_x.shape != (D, 4 * H):
        raise ValueError(f"input weights {w_x.shape} do not match input width {D} and {H} units")
    if w_h.shape != (H, 4 * H) or b.shape != (4 * H,):
        raise ValueError("recurrent weights/bias shapes are inconsistent")

    # contiguous reversal keeps BLAS summation order identical to a forward
    # run on pre-reversed data, which the time-reversal invariant relies on
    xd = np.ascontiguousarray(x.data[::-1]) if reverse else x.data
    xproj = xd @ w_x.data + b.data
    gates = np.empty((T, 4 * H), dtype=x.dtype)
    hs = np.empty((T, H), dtype=x.dtype)
    cs = np.empty((T, H), dtype=x.dtype)
    tcs = np.empty((T, H), dtype=x.dtype)
    h = np.zeros(H, dtype=x.dtype)
    c = np.zeros(H, dtype=x.dtype)
    whd = w_h.data
    # direct 1/(1+exp(-z)) saturates to the correct 0/1 limits on overflow,
    # so the warning is suppressed rather than the value repaired
    with np.errstate(over="ignore"):
        for t in range(T):
            z = xproj[t] + h @ whd
            gz = gates[t]
            gz[:3 * H] = 1.0 / (1.0 + np.exp(-z[:3 * H]))
            gz[3 * H:] = np.tanh(z[3 * H:])
            c = gz[H:2 * H] * c + gz[:H] * gz[3 * H:]
            tc = np.tanh(c)
            h = gz[2 * H:3 * H] * tc
            cs[t] = c
            tcs[t] = tc
            hs[t] = h
    out = Tensor(hs[::-1].copy() if reverse else hs)

    def backward_fn(g: np.ndarray) -> None:
        gd = np.ascontiguousarray(g[::-1]) if reverse else g
        dz_all = np.empty((T, 4 * H), dtype=x.dtype)
        dh = np.zeros(H, dtype=x.dtype)
        dc = np.zeros(H, dtype=x.dtype)
        zeros_h = np.zeros(H, dtype=x.dtype)
        wht = whd.T
        # local gate derivatives, vectorized over time before the step loop
        dgate = np.empty_like(gates)
        sig = gates[:, :3 * H]
        dgate[:, :3 * H] = sig * (1.0 - sig)
        dgate[:, 3 * H:] = 1.0 - gates[:, 3 * H:] ** 2
        dtanh_c = 1.0 - tcs * tcs
        for t in range(T - 1, -1, -1):
            gz = gates[t]
            i, f, o, cand = gz[:H], gz[H:2 * H], gz[2 * H:3 * H], gz[3 * H:]
            dht = gd[t] + dh
            dcur = dc + dht * o * dtanh_c[t]
            cprev = cs[t - 1] if t > 0 else zeros_h
            dz = dz_all[t]
            dz[:H] = dcur * cand
            dz[H:2 * H] = dcur * cprev
            dz[2 * H:3 * H] = dht * tcs[t]
            dz[3 * H:] = dcur * i
            dz *= dgate[t]
            dc = dcur * f
            dh = dz @ wht
        if b.requires_grad:
            _accumulate(b, dz_all.sum(axis=0))
        if w_x.requires_grad:
            _accumulate(w_x, xd.T @ dz_all)
        if w_h.requires_grad:
            hprev = np.vstack([zeros_h[None, :], hs[:-1]])
            _accumulate(w_h, hprev.T @ dz_all)
        if x.requires_grad:
            dx = dz_all @ w_x.data.T
            _accumulate(x, dx[::-1].copy() if reverse else dx)

    return record_op(out, (x, w_x, w_h, b), backward_fn)


# ---------------------------------------------------------------------------
# reverse pass and verification
# ---------------------------------------------------------------------------

def backward(loss: Tensor, tape: Tape) -> None:
    """Populate gradients for everything reachable from a scalar loss.

    Parameters that were used under the tape but did not influence the loss
    end up with an all-zero gradient rather than None.
    """
    if loss.data.size != 1:
        raise ValueError(f"backward expects a scalar loss, got shape {loss.shape}")
    loss.grad = np.ones_like(loss.data)
    for out, fn in reversed(tape._entries):
        g = out.grad
        if g is not None:
            fn(g)
    seen: set[int] = set()
    for t in tape._watched:
        if id(t) in seen:
            continue
        seen.add(id(t))
        if t.grad is None:
            t.grad = np.zeros_like(t.data)


def zero_grads(params: Iterable[Tensor]) -> None:
    for p in params:
        p.grad = None


def grad_check(
    f: Callable[[], Tensor],
    params: Sequence[Tensor],
    step: float = 1e-5,
    rng: np.random.Generator | None = None,
    max_coords_per_param: int | None = None,
    exclude_kinks: bool = False,
) -> float:
    """Compare analytic gradients of f() against central finite differences.

    f must be a deterministic closure returning a scalar Tensor; it is called
    once under a fresh tape for the analytic pass and twice per probed
    coordinate for the numeric pass. Returns the maximum relative error
    |analytic - numeric| / max(1, |analytic|, |numeric|) over the probed
    coordinates (all of them unless max_coords_per_param caps the sample).

    A central difference is invalid when the probe interval straddles a
    non-smooth point (a ReLU boundary or a max-pool argmax switch).
    exclude_kinks=True detects that by re-estimating at step/100 and skips
    coordinates whose two numeric estimates disagree; the guard never looks at
    the analytic gradient, so it cannot hide a wrong backward pass, which
    produces mutually consistent numeric estimates that still mismatch.
    """
    zero_grads(params)
    with Tape() as tape:
        loss = f()
    if loss.data.size != 1:
        raise ValueError("grad_check requires a scalar-valued function")
    if not np.isfinite(loss.data):
        raise FloatingPointError("non-finite loss in grad_check forward pass")
    backward(loss, tape)
    analytic = [p.grad.copy() if p.grad is not None else np.zeros_like(p.data) for p in params]

    worst = 0.0
    for p, a in zip(params, analytic):
        flat = p.data.reshape(-1)
        aflat = a.reshape(-1)
        n = flat.size
        if max_coords_per_param is not None and n > max_coords_per_param:
            gen = rng if rng is not None else np.random.default_rng(0)
            coords = gen.choice(n, size=max_coords_per_param, replace=False)
        else:
            coords = range(n)
        for i in coords:
            saved = flat[i]

            def central(h: float) -> float:
                flat[i] = saved + h
                hi = float(f().data)
                flat[i] = saved - h
                lo = float(f().data)
                flat[i] = saved
                if not (np.isfinite(hi) and np.isfinite(lo)):
                    raise FloatingPointError("non-finite loss while probing gradients")
                return (hi - lo) / (2.0 * h)

            numeric = central(step)
            if exclude_kinks:
                refined = central(step / 100.0)
                if abs(numeric - refined) > 1e-5 * max(1.0, abs(numeric), abs(refined)):
                    continue
            rel = abs(aflat[i] - numeric) / max(1.0, abs(aflat[i]), abs(numeric))
            worst = max(worst, rel)
    return worst
