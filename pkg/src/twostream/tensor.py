"""Dense-tensor math with explicit forward/backward passes.

Every layer comes as a `*_forward` returning (output, cache) and a matching
`*_backward` consuming the upstream gradient and the cache.  All arrays are
float64 so that central finite differences are a meaningful oracle for the
analytic gradients (see `grad_check`).

Spatial/temporal ops accept either a single sample (C, ...) or a batch
(B, C, ...); the output ndim mirrors the input.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Optional

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .errors import EmptySequenceError, ShapeError

Array = np.ndarray
ParamDict = dict[str, Array]


def _as_batch(x: Array, sample_ndim: int) -> tuple[Array, bool]:
    """Promote a single sample to a batch of one; report whether we did."""
    if x.ndim == sample_ndim:
        return x[None], True
    if x.ndim == sample_ndim + 1:
        return x, False
    raise ShapeError(f"expected {sample_ndim}- or {sample_ndim + 1}-d input, got shape {x.shape}")


# ---------------------------------------------------------------------------
# matmul


def matmul(a: Array, b: Array) -> Array:
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul shapes incompatible: {a.shape} x {b.shape}")
    return a @ b


# ---------------------------------------------------------------------------
# linear layer (y = x W^T + b)


def linear_forward(x: Array, w: Array, b: Array) -> tuple[Array, tuple]:
    if x.shape[-1] != w.shape[1]:
        raise ShapeError(f"linear: input {x.shape} vs weight {w.shape}")
    return x @ w.T + b, (x, w)


def linear_backward(dy: Array, cache: tuple) -> tuple[Array, Array, Array]:
    x, w = cache
    dx = dy @ w
    if dy.ndim == 1:
        dw = np.outer(dy, x)
        db = dy.copy()
    else:
        dw = dy.T @ x
        db = dy.sum(axis=0)
    return dx, dw, db


# ---------------------------------------------------------------------------
# relu


def relu(x: Array) -> Array:
    return np.maximum(x, 0.0)


def relu_forward(x: Array) -> tuple[Array, Array]:
    return np.maximum(x, 0.0), x


def relu_backward(dy: Array, cache: Array) -> Array:
    return dy * (cache > 0.0)


# ---------------------------------------------------------------------------
# temporal (1-d) convolution, valid padding


def temporal_conv_forward(x: Array, w: Array, b: Array) -> tuple[Array, tuple]:
    """x: (C_in, L) or (B, C_in, L); w: (C_out, C_in, k); b: (C_out,)."""
    xb, squeeze = _as_batch(np.asarray(x, dtype=np.float64), 2)
    if w.ndim != 3 or xb.shape[1] != w.shape[1]:
        raise ShapeError(f"temporal_conv: input {x.shape} vs weights {w.shape}")
    k = w.shape[2]
    if k > xb.shape[2]:
        raise ShapeError(f"temporal_conv: kernel width {k} exceeds length {xb.shape[2]}")
    cols = sliding_window_view(xb, k, axis=2)  # (B, C_in, L_out, k)
    bsz, _, l_out = cols.shape[:3]
    cols2 = np.ascontiguousarray(cols.transpose(0, 2, 1, 3)
                                 ).reshape(bsz * l_out, -1)
    y = (cols2 @ w.reshape(w.shape[0], -1).T).reshape(bsz, l_out, -1)
    y = np.ascontiguousarray(y.transpose(0, 2, 1)) + b[None, :, None]
    cache = (xb.shape, cols2, w, squeeze, (bsz, l_out))
    return (y[0] if squeeze else y), cache


def temporal_conv_backward(dy: Array, cache: tuple, need_dx: bool = True
                           ) -> tuple[Optional[Array], Array, Array]:
    x_shape, cols2, w, squeeze, (bsz, l_out) = cache
    dyb = dy[None] if squeeze else dy  # (B, C_out, L_out)
    k = w.shape[2]
    dy2 = np.ascontiguousarray(dyb.transpose(0, 2, 1)).reshape(-1, w.shape[0])
    dw = (dy2.T @ cols2).reshape(w.shape)
    db = dy2.sum(axis=0)
    if not need_dx:
        return None, dw, db
    dcols = (dy2 @ w.reshape(w.shape[0], -1)).reshape(bsz, l_out, w.shape[1], k)
    dx = np.zeros(x_shape)
    for i in range(k):
        dx[:, :, i : i + l_out] += dcols[:, :, :, i].transpose(0, 2, 1)
    return (dx[0] if squeeze else dx), dw, db


def temporal_conv(x: Array, w: Array, b: Array) -> Array:
    return temporal_conv_forward(x, w, b)[0]


# ---------------------------------------------------------------------------
# temporal max pooling


def temporal_maxpool_forward(x: Array, width: int, stride: int) -> tuple[Array, tuple]:
    """x: (C, L) or (B, C, L); windowed max per channel, argmax cached."""
    xb, squeeze = _as_batch(np.asarray(x, dtype=np.float64), 2)
    if stride < 1:
        raise ShapeError(f"temporal_maxpool: stride must be >= 1, got {stride}")
    if width > xb.shape[2]:
        raise ShapeError(f"temporal_maxpool: width {width} exceeds length {xb.shape[2]}")
    windows = sliding_window_view(xb, width, axis=2)[:, :, ::stride]  # (B, C, L_out, width)
    y = windows.max(axis=3)
    # np.argmax takes the first maximal element, which fixes tie-breaking.
    arg = windows.argmax(axis=3)
    cache = (xb.shape, arg, width, stride, squeeze)
    return (y[0] if squeeze else y), cache


def temporal_maxpool_backward(dy: Array, cache: tuple) -> Array:
    x_shape, arg, width, stride, squeeze = cache
    dyb = dy[None] if squeeze else dy
    b, c, l_out = dyb.shape
    dx = np.zeros(x_shape)
    starts = np.arange(l_out) * stride
    pos = starts[None, None, :] + arg  # (B, C, L_out) absolute indices
    bi, ci = np.ogrid[:b, :c]
    idx = (np.broadcast_to(bi[..., None], pos.shape),
           np.broadcast_to(ci[..., None], pos.shape), pos)
    if stride >= width:  # windows disjoint, targets unique
        dx[idx] = dyb
    else:
        np.add.at(dx, idx, dyb)
    return dx[0] if squeeze else dx


def temporal_maxpool(x: Array, width: int, stride: int) -> Array:
    return temporal_maxpool_forward(x, width, stride)[0]


# ---------------------------------------------------------------------------
# 2-d convolution, valid padding


def conv2d_forward(x: Array, w: Array, b: Array) -> tuple[Array, tuple]:
    """x: (C_in, H, W) or (B, C_in, H, W); w: (C_out, C_in, k, k); b: (C_out,)."""
    xb, squeeze = _as_batch(np.asarray(x, dtype=np.float64), 3)
    if w.ndim != 4 or xb.shape[1] != w.shape[1]:
        raise ShapeError(f"conv2d: input {x.shape} vs weights {w.shape}")
    k = w.shape[2]
    if k > xb.shape[2] or w.shape[3] > xb.shape[3]:
        raise ShapeError(f"conv2d: kernel {w.shape[2:]} exceeds input {xb.shape[2:]}")
    # im2col once, contiguous, shared by forward and backward: both reduce to
    # plain GEMMs against the (C_in*k*k)-wide patch matrix
    cols = sliding_window_view(xb, (k, w.shape[3]), axis=(2, 3))  # (B, C, Ho, Wo, k, k)
    bsz, _, ho, wo = cols.shape[:4]
    cols2 = np.ascontiguousarray(cols.transpose(0, 2, 3, 1, 4, 5)
                                 ).reshape(bsz * ho * wo, -1)
    w2 = w.reshape(w.shape[0], -1)
    y = (cols2 @ w2.T).reshape(bsz, ho, wo, -1)
    y = np.ascontiguousarray(y.transpose(0, 3, 1, 2)) + b[None, :, None, None]
    cache = (xb.shape, cols2, w, squeeze, (bsz, ho, wo))
    return (y[0] if squeeze else y), cache


def conv2d_backward(dy: Array, cache: tuple) -> tuple[Array, Array, Array]:
    x_shape, cols2, w, squeeze, (bsz, ho, wo) = cache
    dyb = dy[None] if squeeze else dy  # (B, C_out, Ho, Wo)
    kh, kw = w.shape[2], w.shape[3]
    dy2 = np.ascontiguousarray(dyb.transpose(0, 2, 3, 1)).reshape(-1, w.shape[0])
    dw = (dy2.T @ cols2).reshape(w.shape)
    db = dy2.sum(axis=0)
    dcols = (dy2 @ w.reshape(w.shape[0], -1)).reshape(
        bsz, ho, wo, w.shape[1], kh, kw)
    dx = np.zeros(x_shape)
    for i in range(kh):
        for j in range(kw):
            dx[:, :, i : i + ho, j : j + wo] += dcols[:, :, :, :, i, j].transpose(0, 3, 1, 2)
    return (dx[0] if squeeze else dx), dw, db


def conv2d(x: Array, w: Array, b: Array) -> Array:
    return conv2d_forward(x, w, b)[0]


# ---------------------------------------------------------------------------
# 2-d max pooling


def maxpool2d_forward(x: Array, width: int, stride: int) -> tuple[Array, tuple]:
    xb, squeeze = _as_batch(np.asarray(x, dtype=np.float64), 3)
    if stride < 1:
        raise ShapeError(f"maxpool2d: stride must be >= 1, got {stride}")
    if width > xb.shape[2] or width > xb.shape[3]:
        raise ShapeError(f"maxpool2d: window {width} exceeds input {xb.shape[2:]}")
    windows = sliding_window_view(xb, (width, width), axis=(2, 3))[:, :, ::stride, ::stride]
    b, c, ho, wo = windows.shape[:4]
    flat = windows.reshape(b, c, ho, wo, width * width)
    y = flat.max(axis=4)
    arg = flat.argmax(axis=4)  # first occurrence on ties
    cache = (xb.shape, arg, width, stride, squeeze)
    return (y[0] if squeeze else y), cache


def maxpool2d_backward(dy: Array, cache: tuple) -> Array:
    x_shape, arg, width, stride, squeeze = cache
    dyb = dy[None] if squeeze else dy
    b, c, ho, wo = dyb.shape
    dx = np.zeros(x_shape)
    rows = (np.arange(ho) * stride)[None, None, :, None] + arg // width
    colx = (np.arange(wo) * stride)[None, None, None, :] + arg % width
    bi = np.broadcast_to(np.arange(b)[:, None, None, None], arg.shape)
    ci = np.broadcast_to(np.arange(c)[None, :, None, None], arg.shape)
    if stride >= width:  # windows disjoint, targets unique
        dx[bi, ci, rows, colx] = dyb
    else:
        np.add.at(dx, (bi, ci, rows, colx), dyb)
    return dx[0] if squeeze else dx


def maxpool2d(x: Array, width: int, stride: int) -> Array:
    return maxpool2d_forward(x, width, stride)[0]


# ---------------------------------------------------------------------------
# tanh recurrent cell with full backpropagation through time


def rnn_step(x_t: Array, h_prev: Array, w_x: Array, w_h: Array, b: Array) -> Array:
    """h_t = tanh(W_x x_t + W_h h_prev + b)."""
    if x_t.shape[-1] != w_x.shape[1] or h_prev.shape[-1] != w_h.shape[1]:
        raise ShapeError(
            f"rnn_step: x {x_t.shape}, h {h_prev.shape} vs W_x {w_x.shape}, W_h {w_h.shape}"
        )
    return np.tanh(x_t @ w_x.T + h_prev @ w_h.T + b)


def rnn_forward(xs: Array, h0: Array, w_x: Array, w_h: Array, b: Array) -> tuple[Array, tuple]:
    """xs: (L, d_in) or (B, L, d_in); returns hidden states for every step."""
    xsb, squeeze = _as_batch(np.asarray(xs, dtype=np.float64), 2)
    bsz, length, _ = xsb.shape
    h0b = np.broadcast_to(h0, (bsz, w_h.shape[0]))
    hs = np.empty((bsz, length, w_h.shape[0]))
    h = h0b
    for t in range(length):
        h = rnn_step(xsb[:, t], h, w_x, w_h, b)
        hs[:, t] = h
    cache = (xsb, h0b, hs, w_x, w_h, squeeze)
    return (hs[0] if squeeze else hs), cache


def rnn_backward(dhs: Array, cache: tuple) -> tuple[Array, Array, Array, Array, Array]:
    xsb, h0b, hs, w_x, w_h, squeeze = cache
    dhsb = dhs[None] if squeeze else dhs
    bsz, length, _ = xsb.shape
    dxs = np.zeros_like(xsb)
    dwx = np.zeros_like(w_x)
    dwh = np.zeros_like(w_h)
    db = np.zeros(w_h.shape[0])
    dh_next = np.zeros((bsz, w_h.shape[0]))
    for t in range(length - 1, -1, -1):
        dh = dhsb[:, t] + dh_next
        dz = dh * (1.0 - hs[:, t] ** 2)  # tanh'
        h_prev = hs[:, t - 1] if t > 0 else h0b
        dwx += dz.T @ xsb[:, t]
        dwh += dz.T @ h_prev
        db += dz.sum(axis=0)
        dxs[:, t] = dz @ w_x
        dh_next = dz @ w_h
    dh0 = dh_next
    if squeeze:
        return dxs[0], dh0[0], dwx, dwh, db
    return dxs, dh0, dwx, dwh, db


# ---------------------------------------------------------------------------
# temporal mean


def mean_over_time_forward(h: Array) -> tuple[Array, tuple]:
    """h: (L, d) or (B, L, d); mean over the time axis."""
    hb, squeeze = _as_batch(np.asarray(h, dtype=np.float64), 2)
    if hb.shape[1] == 0:
        raise EmptySequenceError("mean_over_time: empty sequence")
    y = hb.mean(axis=1)
    cache = (hb.shape, squeeze)
    return (y[0] if squeeze else y), cache


def mean_over_time_backward(dy: Array, cache: tuple) -> Array:
    h_shape, squeeze = cache
    dyb = dy[None] if squeeze else dy
    dx = np.broadcast_to(dyb[:, None, :] / h_shape[1], h_shape).copy()
    return dx[0] if squeeze else dx


def mean_over_time(h: Array) -> Array:
    return mean_over_time_forward(h)[0]


# ---------------------------------------------------------------------------
# softmax and cross-entropy


def softmax(logits: Array) -> Array:
    z = logits - logits.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


def softmax_cross_entropy(logits: Array, label: int) -> tuple[float, Array]:
    """Stabilized softmax + NLL for a single sample; returns (loss, dlogits)."""
    logits = np.asarray(logits, dtype=np.float64)
    k = logits.shape[0]
    if not 0 <= label < k:
        raise IndexError(f"label {label} out of range for {k} classes")
    p = softmax(logits)
    loss = -np.log(p[label])
    grad = p.copy()
    grad[label] -= 1.0
    return float(loss), grad


def softmax_cross_entropy_batch(logits: Array, labels: Array,
                                label_smoothing: float = 0.0
                                ) -> tuple[float, Array]:
    """Mean NLL over a batch; gradient already divided by the batch size.

    With ``label_smoothing`` = eps the target distribution is
    (1-eps)*onehot + eps/K, which bounds the converged softmax confidence
    and keeps the classifier's probabilities useful for score fusion.
    """
    logits = np.asarray(logits, dtype=np.float64)
    labels = np.asarray(labels)
    bsz, k = logits.shape
    if labels.min() < 0 or labels.max() >= k:
        raise IndexError(f"labels out of range for {k} classes")
    if not 0.0 <= label_smoothing < 1.0:
        raise ShapeError(f"label_smoothing must be in [0,1), got {label_smoothing}")
    p = softmax(logits)
    logp = np.log(p)
    eps = label_smoothing
    nll = -logp[np.arange(bsz), labels]
    if eps == 0.0:
        loss = float(nll.mean())
    else:
        loss = float(((1.0 - eps) * nll - (eps / k) * logp.sum(axis=1)).mean())
    grad = p.copy()
    grad[np.arange(bsz), labels] -= 1.0 - eps
    grad -= eps / k
    return loss, grad / bsz


# ---------------------------------------------------------------------------
# RMSprop


@dataclass
class RmspropState:
    """Per-parameter running mean of squared gradients plus hyperparameters."""

    learning_rate: float
    decay: float = 0.9
    epsilon: float = 1e-8
    mean_square: ParamDict = field(default_factory=dict)


def rmsprop_step(params: ParamDict, grads: ParamDict, state: RmspropState
                 ) -> tuple[ParamDict, RmspropState]:
    """One RMSprop update; pure, returns fresh params and state."""
    new_params: ParamDict = {}
    new_ms: ParamDict = {}
    for name, value in params.items():
        g = grads[name]
        ms_prev = state.mean_square.get(name, np.zeros_like(value))
        ms = state.decay * ms_prev + (1.0 - state.decay) * g * g
        new_params[name] = value - state.learning_rate * g / np.sqrt(ms + state.epsilon)
        new_ms[name] = ms
    new_state = RmspropState(state.learning_rate, state.decay, state.epsilon, new_ms)
    return new_params, new_state


# ---------------------------------------------------------------------------
# finite-difference gradient checker


def grad_check(
    f: Callable[[ParamDict], tuple[float, ParamDict]],
    params: ParamDict,
    h: float = 1e-5,
    rng: Optional[np.random.Generator] = None,
    max_coords_per_param: Optional[int] = None,
    atol: float = 1e-9,
) -> float:
    """Max relative error between analytic gradients and central differences.

    `f` evaluates the scalar loss and its analytic gradients at the given
    parameters.  When `max_coords_per_param` is set, a random coordinate
    subset of each parameter is probed (rng required), otherwise every
    coordinate is.

    Differences below `atol` count as zero: for a coordinate whose true
    gradient is exactly 0, the central difference is rounding noise of order
    eps * |loss| / h (~1e-11), which the relative formula would otherwise
    amplify against its 1e-8 floor.
    """
    _, analytic = f(params)
    worst = 0.0
    for name, value in params.items():
        flat = value.reshape(-1)
        n = flat.size
        if max_coords_per_param is not None and n > max_coords_per_param:
            if rng is None:
                raise ValueError("rng required when sampling coordinates")
            idxs = rng.choice(n, size=max_coords_per_param, replace=False)
        else:
            idxs = np.arange(n)
        a_flat = analytic[name].reshape(-1)
        for i in idxs:
            orig = flat[i]
            flat[i] = orig + h
            lp, _ = f(params)
            flat[i] = orig - h
            lm, _ = f(params)
            flat[i] = orig
            numeric = (lp - lm) / (2.0 * h)
            a = a_flat[i]
            diff = abs(a - numeric)
            err = 0.0 if diff <= atol else diff / max(abs(a), abs(numeric), 1e-8)
            worst = max(worst, err)
    return worst
