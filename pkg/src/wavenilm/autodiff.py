"""Minimal reverse-mode differentiation for the three disaggregation networks.

Every operation comes as an explicit forward/backward pair. Parameters live in
:class:`Tensor` objects whose ``grad`` buffers are *accumulated into* by the
backward functions; activations are plain numpy arrays.

Convolutions are valid (unpadded) correlations. Internally they run on
channels-last arrays ``[batch, time, channels]`` so that every layer reduces to
a single matrix product; :func:`conv1d_forward` exposes the channels-first
``[k_in, T]`` view.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Dict, Mapping, Optional, Tuple

import numpy as np

SIGMOID_CLAMP = 1e-7


class Tensor:
    """An n-dimensional array with an optional gradient buffer."""

    __slots__ = ("values", "grad")

    def __init__(self, values, grad=None, dtype=None):
        values = np.asarray(values, dtype=dtype if dtype is not None else np.float64)
        if values.ndim == 0:
            values = values.reshape(1)
        self.values = np.ascontiguousarray(values)
        if grad is not None:
            grad = np.asarray(grad, dtype=self.values.dtype)
            if grad.shape != self.values.shape:
                raise ValueError(f"grad shape {grad.shape} != values shape {self.values.shape}")
        self.grad = grad

    @property
    def shape(self) -> Tuple[int, ...]:
        return self.values.shape

    @property
    def dtype(self):
        return self.values.dtype

    def __len__(self):
        return self.values.shape[0]

    def __repr__(self):
        return f"Tensor(shape={self.shape}, dtype={self.dtype}, grad={'yes' if self.grad is not None else 'no'})"

    def ensure_grad(self) -> np.ndarray:
        if self.grad is None:
            self.grad = np.zeros_like(self.values)
        return self.grad

    def zero_grad(self):
        if self.grad is not None:
            self.grad.fill(0.0)

    def accumulate(self, g: np.ndarray):
        self.ensure_grad()
        self.grad += g.reshape(self.values.shape)

    def astype(self, dtype) -> "Tensor":
        return Tensor(self.values.astype(dtype), None)


def _values(x) -> np.ndarray:
    return x.values if isinstance(x, Tensor) else np.asarray(x)


ROW_BLOCK = 128


def matmul(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """2-D product whose rows do not depend on how many rows are stacked.

    BLAS picks kernels by matrix shape (gemv for a single row or column, tail
    kernels for partial tiles), and those sum in different orders. Feeding it
    fixed ``ROW_BLOCK``-row blocks, zero-padding the last one, keeps each row's
    result bit-identical whether it is computed alone or inside a large batch.
    """
    m = a.shape[0]
    out = np.empty((m, b.shape[1]), dtype=np.result_type(a, b))
    full = m - m % ROW_BLOCK
    for i in range(0, full, ROW_BLOCK):
        np.matmul(a[i:i + ROW_BLOCK], b, out=out[i:i + ROW_BLOCK])
    if full < m:
        tail = np.zeros((ROW_BLOCK, a.shape[1]), dtype=a.dtype)
        tail[:m - full] = a[full:]
        out[full:] = (tail @ b)[:m - full]
    return out


# ---------------------------------------------------------------------------
# convolution


@dataclass
class Conv1dParams:
    """Filters ``[k_out, k_in, m]``, bias ``[k_out]`` and a dilation step."""

    filters: Tensor
    bias: Tensor
    dilation: int = 1

    def __post_init__(self):
        if self.filters.values.ndim != 3:
            raise ValueError(f"filters must be [k_out, k_in, m], got shape {self.filters.shape}")
        if self.bias.shape != (self.filters.shape[0],):
            raise ValueError(f"bias shape {self.bias.shape} does not match k_out={self.filters.shape[0]}")
        if self.dilation < 1:
            raise ValueError("dilation must be >= 1")

    @property
    def m(self) -> int:
        return self.filters.shape[2]

    @property
    def k_in(self) -> int:
        return self.filters.shape[1]

    @property
    def k_out(self) -> int:
        return self.filters.shape[0]

    @property
    def shrinkage(self) -> int:
        return (self.m - 1) * self.dilation

    def weight_matrix(self) -> np.ndarray:
        # rows ordered (tap, in_channel) to match _unfold
        k_out, k_in, m = self.filters.shape
        return self.filters.values.transpose(2, 1, 0).reshape(m * k_in, k_out)


def _unfold(x: np.ndarray, m: int, dilation: int, t_out: int) -> np.ndarray:
    if m == 1:
        return x[:, :t_out, :]
    return np.concatenate([x[:, k * dilation:k * dilation + t_out, :] for k in range(m)], axis=2)


def conv_nlc_forward(x: np.ndarray, params: Conv1dParams, return_cols: bool = False):
    """Valid dilated correlation on a channels-last batch ``[B, T, k_in]``.

    With ``return_cols`` the unfolded input is returned too, so the backward
    pass can skip rebuilding it.
    """
    B, T, C = x.shape
    if C != params.k_in:
        raise ValueError(f"input has {C} channels but filters expect k_in={params.k_in}")
    t_out = T - params.shrinkage
    if t_out < 1:
        raise ValueError(
            f"input time extent {T} too short for filter length {params.m} at dilation {params.dilation}"
        )
    cols = np.ascontiguousarray(_unfold(x, params.m, params.dilation, t_out)).reshape(B * t_out, -1)
    w = params.weight_matrix().astype(x.dtype, copy=False)
    out = matmul(cols, w)
    out += params.bias.values
    out = out.reshape(B, t_out, params.k_out)
    return (out, cols) if return_cols else out


def conv_nlc_backward(x: np.ndarray, params: Conv1dParams, grad_out: np.ndarray,
                      need_input_grad: bool = True, cols: Optional[np.ndarray] = None) -> Optional[np.ndarray]:
    """Accumulate filter/bias gradients; return the input gradient."""
    B, T, C = x.shape
    t_out = T - params.shrinkage
    if grad_out.shape != (B, t_out, params.k_out):
        raise ValueError(f"grad_out shape {grad_out.shape} != forward output shape {(B, t_out, params.k_out)}")
    m, d = params.m, params.dilation
    g2 = grad_out.reshape(B * t_out, params.k_out)
    if cols is None:
        cols = np.ascontiguousarray(_unfold(x, m, d, t_out)).reshape(B * t_out, m * C)
    gw = cols.T @ g2
    params.filters.accumulate(gw.reshape(m, C, params.k_out).transpose(2, 1, 0))
    params.bias.accumulate(g2.sum(axis=0))
    if not need_input_grad:
        return None
    gcols = (g2 @ params.weight_matrix().T.astype(g2.dtype, copy=False)).reshape(B, t_out, m * C)
    if m == 1:
        gx = np.zeros_like(x)
        gx[:, :t_out, :] = gcols
        return gx
    gx = np.zeros_like(x)
    for k in range(m):
        gx[:, k * d:k * d + t_out, :] += gcols[:, :, k * C:(k + 1) * C]
    return gx


def conv1d_forward(x, params: Conv1dParams) -> Tensor:
    """Channels-first valid convolution: ``[k_in, T]`` (or ``[B, k_in, T]``) in,
    ``[k_out, T - (m-1)*dilation]`` out."""
    xv = _values(x)
    batched = xv.ndim == 3
    if xv.ndim not in (2, 3):
        raise ValueError(f"expected [k_in, T] or [B, k_in, T], got shape {xv.shape}")
    xb = xv if batched else xv[None]
    if xb.shape[1] != params.k_in:
        raise ValueError(f"input has {xb.shape[1]} channels but filters expect k_in={params.k_in}")
    if xb.shape[2] <= params.shrinkage:
        raise ValueError(
            f"input time extent {xb.shape[2]} must exceed (m-1)*dilation = {params.shrinkage}"
        )
    out = conv_nlc_forward(xb.transpose(0, 2, 1), params).transpose(0, 2, 1)
    return Tensor(out if batched else out[0])


def conv1d_backward(x, params: Conv1dParams, grad_out) -> Tuple[np.ndarray, Dict[str, np.ndarray]]:
    """Reverse mode of :func:`conv1d_forward`.

    Gradients are added to ``params.filters.grad``/``params.bias.grad`` (and to
    ``x.grad`` when ``x`` is a Tensor). Returns the input gradient and the
    parameter gradient increments.
    """
    xv = _values(x)
    gv = _values(grad_out)
    batched = xv.ndim == 3
    xb = xv if batched else xv[None]
    gb = gv if batched else gv[None]
    before_f = params.filters.ensure_grad().copy()
    before_b = params.bias.ensure_grad().copy()
    gx = conv_nlc_backward(xb.transpose(0, 2, 1), params, gb.transpose(0, 2, 1)).transpose(0, 2, 1)
    gx = gx if batched else gx[0]
    if isinstance(x, Tensor):
        x.accumulate(gx)
    return gx, {"filters": params.filters.grad - before_f, "bias": params.bias.grad - before_b}


# ---------------------------------------------------------------------------
# dense layer and pointwise ops


def dense_forward(x: np.ndarray, weight: Tensor, bias: Tensor) -> np.ndarray:
    """``x @ weight.T + bias`` over the last axis; weight is ``[out, in]``."""
    x = _values(x)
    lead = x.shape[:-1]
    if x.shape[-1] != weight.shape[1]:
        raise ValueError(f"dense input width {x.shape[-1]} != weight in-features {weight.shape[1]}")
    out = matmul(x.reshape(-1, x.shape[-1]), weight.values.T.astype(x.dtype, copy=False))
    out += bias.values
    return out.reshape(*lead, weight.shape[0])


def dense_backward(x: np.ndarray, weight: Tensor, bias: Tensor, grad_out: np.ndarray) -> np.ndarray:
    x = _values(x)
    g2 = np.asarray(grad_out).reshape(-1, weight.shape[0])
    x2 = x.reshape(-1, x.shape[-1])
    weight.accumulate(g2.T @ x2)
    bias.accumulate(g2.sum(axis=0))
    return (g2 @ weight.values.astype(g2.dtype, copy=False)).reshape(x.shape)


def relu_forward(x):
    return np.maximum(x, 0)


def relu_backward(x, grad):
    return grad * (x > 0)


def sigmoid_forward(x):
    # tanh form: no overflow for large |x|, no branching
    x = np.asarray(x)
    return 0.5 * (1.0 + np.tanh(0.5 * x))


def sigmoid_backward(y, grad):
    """Gradient through a sigmoid given its *output* ``y``."""
    return grad * y * (1.0 - y)


def tanh_forward(x):
    return np.tanh(x)


def tanh_backward(y, grad):
    """Gradient through tanh given its *output* ``y``."""
    return grad * (1.0 - y * y)


def add_forward(a, b):
    return a + b


def add_backward(grad):
    return grad, grad


def mul_forward(a, b):
    return a * b


def mul_backward(a, b, grad):
    return grad * b, grad * a


# ---------------------------------------------------------------------------
# losses


def mae_loss(pred, target) -> Tuple[float, np.ndarray]:
    """Mean absolute error and its (sub)gradient; ``sign(0)`` is taken as 0.

    With a batch of windows ``[B, r]`` the result is the mean of per-window
    losses, which is the same as the mean over all elements.
    """
    p, t = _values(pred), _values(target)
    if p.shape != t.shape:
        raise ValueError(f"pred shape {p.shape} != target shape {t.shape}")
    if p.size == 0:
        raise ValueError("mae_loss needs at least one element")
    diff = p - t
    loss = float(np.mean(np.abs(diff)))
    grad = np.sign(diff) / p.size
    return loss, grad.astype(p.dtype, copy=False)


def bce_loss(prob, target) -> Tuple[float, np.ndarray]:
    """Binary cross-entropy of probabilities against {0, 1} targets.

    Probabilities are clamped to ``[1e-7, 1 - 1e-7]`` before the logarithm;
    the returned gradient is taken at the clamped value.
    """
    p, z = _values(prob), _values(target)
    if p.shape != z.shape:
        raise ValueError(f"prob shape {p.shape} != target shape {z.shape}")
    if not np.all((z == 0) | (z == 1)):
        raise ValueError("bce_loss targets must be binary (0 or 1)")
    pc = np.clip(p, SIGMOID_CLAMP, 1.0 - SIGMOID_CLAMP)
    loss = float(-np.mean(z * np.log(pc) + (1.0 - z) * np.log(1.0 - pc)))
    grad = (pc - z) / (pc * (1.0 - pc)) / p.size
    return loss, grad.astype(p.dtype, copy=False)


# ---------------------------------------------------------------------------
# GRU


GRU_PARAM_NAMES = ("w_r", "w_z", "w_h", "u_r", "u_z", "u_h", "b_r", "b_z", "b_h")


@dataclass
class GruCellParams:
    """Input transforms ``w_*`` ``[hidden, input]``, recurrent transforms
    ``u_*`` ``[hidden, hidden]`` and biases ``b_*`` ``[hidden]`` for the
    reset (r), update (z) and candidate (h) paths."""

    w_r: Tensor
    w_z: Tensor
    w_h: Tensor
    u_r: Tensor
    u_z: Tensor
    u_h: Tensor
    b_r: Tensor
    b_z: Tensor
    b_h: Tensor

    def __post_init__(self):
        if not (self.w_r.shape == self.w_z.shape == self.w_h.shape):
            raise ValueError("input transforms must share a shape")
        if not (self.u_r.shape == self.u_z.shape == self.u_h.shape):
            raise ValueError("recurrent transforms must share a shape")
        hidden = self.w_r.shape[0]
        if self.u_r.shape != (hidden, hidden):
            raise ValueError(f"recurrent transforms must be [{hidden}, {hidden}], got {self.u_r.shape}")
        for b in (self.b_r, self.b_z, self.b_h):
            if b.shape != (hidden,):
                raise ValueError(f"bias must be [{hidden}], got {b.shape}")

    @property
    def hidden_size(self) -> int:
        return self.w_r.shape[0]

    @property
    def input_size(self) -> int:
        return self.w_r.shape[1]

    def tensors(self) -> Dict[str, Tensor]:
        return {name: getattr(self, name) for name in GRU_PARAM_NAMES}


@dataclass
class _GruCache:
    x: np.ndarray          # [B, T, I], already in processing order
    h_prev: np.ndarray     # [T, B, H]
    r: np.ndarray
    z: np.ndarray
    hh: np.ndarray
    reverse: bool
    batched: bool


def gru_forward_cached(inputs: np.ndarray, h0: np.ndarray, params: GruCellParams,
                       direction: str = "forward"):
    """Run the GRU recurrence and keep what the backward pass needs.

    ``inputs`` is ``[T, I]`` or ``[B, T, I]``; ``h0`` is ``[H]`` or ``[B, H]``.
    Returns ``(outputs, cache)`` with outputs shaped like the inputs but with
    ``H`` features.
    """
    if direction not in ("forward", "backward"):
        raise ValueError(f"direction must be 'forward' or 'backward', got {direction!r}")
    x = np.asarray(inputs)
    batched = x.ndim == 3
    if not batched:
        if x.ndim != 2:
            raise ValueError(f"inputs must be [T, input] or [B, T, input], got shape {x.shape}")
        x = x[None]
    B, T, I = x.shape
    H = params.hidden_size
    if I != params.input_size:
        raise ValueError(f"input width {I} != GRU input size {params.input_size}")
    h = np.asarray(h0, dtype=x.dtype)
    if h.shape[-1] != H:
        raise ValueError(f"h0 length {h.shape[-1]} != hidden size {H}")
    h = np.broadcast_to(h, (B, H)).copy()
    reverse = direction == "backward"
    if reverse:
        x = x[:, ::-1, :]
    x = np.ascontiguousarray(x)
    dt = x.dtype
    w_all = np.concatenate([params.w_r.values, params.w_z.values, params.w_h.values], axis=0).astype(dt, copy=False)
    b_all = np.concatenate([params.b_r.values, params.b_z.values, params.b_h.values]).astype(dt, copy=False)
    ur = params.u_r.values.T.astype(dt, copy=False)
    uz = params.u_z.values.T.astype(dt, copy=False)
    uh = params.u_h.values.T.astype(dt, copy=False)
    if T:
        xw = (matmul(x.reshape(B * T, I), w_all.T) + b_all).reshape(B, T, 3 * H)
    else:
        xw = np.zeros((B, 0, 3 * H), dtype=dt)
    out = np.empty((B, T, H), dtype=dt)
    h_prev = np.empty((T, B, H), dtype=dt)
    rs = np.empty((T, B, H), dtype=dt)
    zs = np.empty((T, B, H), dtype=dt)
    hhs = np.empty((T, B, H), dtype=dt)
    for t in range(T):
        a = xw[:, t, :]
        r = sigmoid_forward(a[:, :H] + matmul(h, ur))
        z = sigmoid_forward(a[:, H:2 * H] + matmul(h, uz))
        hh = np.tanh(a[:, 2 * H:] + matmul(r * h, uh))
        h_prev[t] = h
        h = z * h + (1.0 - z) * hh
        rs[t], zs[t], hhs[t] = r, z, hh
        out[:, t, :] = h
    if reverse:
        out = out[:, ::-1, :]
    out = np.ascontiguousarray(out)
    cache = _GruCache(x, h_prev, rs, zs, hhs, reverse, batched)
    return (out if batched else out[0]), cache


def gru_backward_cached(cache: _GruCache, params: GruCellParams, grad_out: np.ndarray):
    """Backpropagation through time. Accumulates parameter gradients and
    returns ``(grad_inputs, grad_h0)``."""
    g = np.asarray(grad_out)
    if not cache.batched:
        g = g[None]
    if cache.reverse:
        g = g[:, ::-1, :]
    x = cache.x
    B, T, I = x.shape
    H = params.hidden_size
    dt = x.dtype
    ur, uz, uh = (params.u_r.values.astype(dt, copy=False), params.u_z.values.astype(dt, copy=False),
                  params.u_h.values.astype(dt, copy=False))
    da_all = np.empty((B, T, 3 * H), dtype=dt)
    gur = np.zeros((H, H), dtype=dt)
    guz = np.zeros((H, H), dtype=dt)
    guh = np.zeros((H, H), dtype=dt)
    dh = np.zeros((B, H), dtype=dt)
    for t in range(T - 1, -1, -1):
        dh = dh + g[:, t, :]
        hp, r, z, hh = cache.h_prev[t], cache.r[t], cache.z[t], cache.hh[t]
        dz = dh * (hp - hh)
        dhh = dh * (1.0 - z)
        dh_prev = dh * z
        da_h = dhh * (1.0 - hh * hh)
        guh += da_h.T @ (r * hp)
        drh = da_h @ uh
        dr = drh * hp
        dh_prev += drh * r
        da_z = dz * z * (1.0 - z)
        da_r = dr * r * (1.0 - r)
        dh_prev += da_z @ uz + da_r @ ur
        gur += da_r.T @ hp
        guz += da_z.T @ hp
        da_all[:, t, :H] = da_r
        da_all[:, t, H:2 * H] = da_z
        da_all[:, t, 2 * H:] = da_h
        dh = dh_prev
    params.u_r.accumulate(gur)
    params.u_z.accumulate(guz)
    params.u_h.accumulate(guh)
    da2 = da_all.reshape(B * T, 3 * H)
    x2 = x.reshape(B * T, I)
    gw = da2.T @ x2
    gb = da2.sum(axis=0)
    params.w_r.accumulate(gw[:H])
    params.w_z.accumulate(gw[H:2 * H])
    params.w_h.accumulate(gw[2 * H:])
    params.b_r.accumulate(gb[:H])
    params.b_z.accumulate(gb[H:2 * H])
    params.b_h.accumulate(gb[2 * H:])
    w_all = np.concatenate([params.w_r.values, params.w_z.values, params.w_h.values], axis=0).astype(dt, copy=False)
    gx = (da2 @ w_all).reshape(B, T, I)
    if cache.reverse:
        gx = gx[:, ::-1, :]
    gx = np.ascontiguousarray(gx)
    if not cache.batched:
        return gx[0], dh[0]
    return gx, dh


def gru_forward(inputs, h0, params: GruCellParams, direction: str = "forward") -> Tensor:
    """GRU over ``inputs`` ``[T, input]``; returns hidden states ``[T, hidden]``.

    ``direction='backward'`` reverses the time axis before and after the
    recurrence.
    """
    out, _ = gru_forward_cached(_values(inputs), _values(h0), params, direction)
    return Tensor(out)


def gru_backward(inputs, h0, params: GruCellParams, grad_out, direction: str = "forward"):
    """Reverse mode of :func:`gru_forward`; returns ``(grad_inputs, grad_h0)``
    and accumulates into parameter (and Tensor input) gradient buffers."""
    _, cache = gru_forward_cached(_values(inputs), _values(h0), params, direction)
    gx, gh0 = gru_backward_cached(cache, params, _values(grad_out))
    if isinstance(inputs, Tensor):
        inputs.accumulate(gx)
    if isinstance(h0, Tensor):
        h0.accumulate(gh0 if gh0.shape == h0.shape else gh0.sum(axis=0))
    return gx, gh0


# ---------------------------------------------------------------------------
# Adam


@dataclass
class AdamState:
    lr: float = 0.001
    beta1: float = 0.9
    beta2: float = 0.999
    epsilon: float = 1e-8
    step: int = 0
    m1: Dict[str, np.ndarray] = field(default_factory=dict)
    m2: Dict[str, np.ndarray] = field(default_factory=dict)


def adam_step(params: Mapping[str, Tensor], grads: Optional[Mapping[str, np.ndarray]],
              state: AdamState):
    """One bias-corrected Adam update, in place.

    ``grads`` defaults to each parameter's ``grad`` buffer (missing buffers
    count as zero gradient).
    """
    state.step += 1
    b1, b2 = state.beta1, state.beta2
    c1 = 1.0 - b1 ** state.step
    c2 = 1.0 - b2 ** state.step
    for name, p in params.items():
        if grads is not None:
            g = np.asarray(grads[name])
        else:
            g = p.grad if p.grad is not None else np.zeros_like(p.values)
        if g.shape != p.shape:
            raise ValueError(f"gradient for {name!r} has shape {g.shape}, parameter has {p.shape}")
        m1 = state.m1.get(name)
        if m1 is None:
            m1 = state.m1[name] = np.zeros_like(p.values)
            state.m2[name] = np.zeros_like(p.values)
        m2 = state.m2[name]
        m1 *= b1
        m1 += (1.0 - b1) * g
        m2 *= b2
        m2 += (1.0 - b2) * (g * g)
        p.values -= (state.lr * (m1 / c1) / (np.sqrt(m2 / c2) + state.epsilon)).astype(p.dtype, copy=False)
    return params, state
