"""Dense tensors with reverse-mode gradients, the convolution/GDN primitives the
codec is built from, and an Adam optimizer.

Values are numpy arrays wrapped in :class:`Tensor`.  Storage is float32 by
default; every op follows the dtype of its inputs, so a float64 copy of a
model can be used for finite-difference checks.  Reductions accumulate in
float64.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable, Iterable, Sequence

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view
from scipy.special import expit

DEFAULT_DTYPE = np.float32


class DimensionError(ValueError):
    """Raised when tensor shapes are incompatible with an op."""


class ParameterDomainError(ValueError):
    """Raised when a parameter lies outside its valid domain."""


class TrainingStateError(RuntimeError):
    """Raised when optimizer state is inconsistent with the params."""


class HarnessError(RuntimeError):
    """Raised by the gradient checker when the loss is not deterministic."""


def make_rng(seed: int, *keys: int) -> np.random.Generator:
    """Counter-based generator for the stream identified by ``(seed, *keys)``."""
    return np.random.Generator(np.random.Philox(np.random.SeedSequence([seed, *keys])))


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward")

    def __init__(self, data, requires_grad: bool = False, _parents=(), _backward=None):
        arr = np.asarray(data)
        if arr.dtype.kind != "f":
            arr = arr.astype(DEFAULT_DTYPE)
        self.data = arr
        self.grad: np.ndarray | None = None
        self.requires_grad = requires_grad
        self._parents: tuple[Tensor, ...] = _parents
        self._backward: Callable | None = _backward

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, dtype={self.dtype}, requires_grad={self.requires_grad})"

    def item(self) -> float:
        return float(self.data)

    def numpy(self) -> np.ndarray:
        return self.data

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def _accumulate(self, g: np.ndarray) -> None:
        g = np.asarray(g, dtype=self.data.dtype)
        if g.shape != self.data.shape:
            g = _unbroadcast(g, self.data.shape)
        if self.grad is None:
            self.grad = g.copy()
        else:
            self.grad = self.grad + g

    def backward(self, grad: np.ndarray | None = None) -> None:
        if grad is None:
            if self.data.size != 1:
                raise DimensionError("backward() without a seed gradient needs a scalar tensor")
            grad = np.ones_like(self.data)
        order = _topological_order(self)
        self.grad = np.asarray(grad, dtype=self.data.dtype)
        for node in reversed(order):
            if node._backward is None or node.grad is None:
                continue
            grads = node._backward(node.grad)
            for parent, g in zip(node._parents, grads):
                if g is not None and parent.requires_grad:
                    parent._accumulate(g)
            # free intermediate buffers; leaves keep theirs
            node.grad = None

    # elementwise arithmetic -------------------------------------------------
    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return add(self, neg(_as_tensor(other, self.dtype)))

    def __rsub__(self, other):
        return add(_as_tensor(other, self.dtype), neg(self))

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        return neg(self)

    def __getitem__(self, index):
        return take(self, index)


class Param(Tensor):
    """A named leaf tensor.  ``trainable`` gates both gradient flow and updates."""

    __slots__ = ("name",)

    def __init__(self, name: str, data, trainable: bool = True):
        super().__init__(data, requires_grad=trainable)
        self.name = name

    @property
    def trainable(self) -> bool:
        return self.requires_grad

    @trainable.setter
    def trainable(self, flag: bool) -> None:
        self.requires_grad = bool(flag)
        if not flag:
            self.grad = None

    def __repr__(self) -> str:
        return f"Param({self.name!r}, shape={self.shape}, trainable={self.trainable})"


def _topological_order(root: Tensor) -> list[Tensor]:
    order: list[Tensor] = []
    seen: set[int] = set()
    stack: list[tuple[Tensor, bool]] = [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for p in node._parents:
            if p.requires_grad and id(p) not in seen:
                stack.append((p, False))
    return order


def _as_tensor(x, dtype=None) -> Tensor:
    if isinstance(x, Tensor):
        return x
    return Tensor(np.asarray(x, dtype=dtype or DEFAULT_DTYPE))


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for axis, n in enumerate(shape):
        if n == 1 and g.shape[axis] != 1:
            g = g.sum(axis=axis, keepdims=True)
    return g


def _result(data: np.ndarray, parents: Sequence[Tensor], backward: Callable) -> Tensor:
    if any(p.requires_grad for p in parents):
        return Tensor(data, True, tuple(parents), backward)
    return Tensor(data)


# ---------------------------------------------------------------------------
# elementwise and structural ops


def add(a, b) -> Tensor:
    a = _as_tensor(a)
    b = _as_tensor(b, a.dtype)
    return _result(a.data + b.data, (a, b), lambda g: (g, g))


def neg(a: Tensor) -> Tensor:
    return _result(-a.data, (a,), lambda g: (-g,))


def mul(a, b) -> Tensor:
    a = _as_tensor(a)
    b = _as_tensor(b, a.dtype)

    def backward(g):
        return (g * b.data if a.requires_grad else None, g * a.data if b.requires_grad else None)

    return _result(a.data * b.data, (a, b), backward)


def take(a: Tensor, index) -> Tensor:
    """Basic (slice) indexing; the gradient scatters back into a zero buffer."""

    def backward(g):
        out = np.zeros_like(a.data)
        out[index] = g
        return (out,)

    return _result(a.data[index], (a,), backward)


def reshape(a: Tensor, shape) -> Tensor:
    return _result(a.data.reshape(shape), (a,), lambda g: (g.reshape(a.shape),))


def relu(a: Tensor) -> Tensor:
    mask = a.data > 0
    return _result(np.where(mask, a.data, 0).astype(a.dtype), (a,), lambda g: (g * mask,))


def softplus(a: Tensor) -> Tensor:
    x = a.data
    out = np.logaddexp(0, x).astype(a.dtype)
    return _result(out, (a,), lambda g: (g * expit(x).astype(a.dtype),))


def exp(a: Tensor) -> Tensor:
    out = np.exp(a.data)
    return _result(out, (a,), lambda g: (g * out,))


def lower_bound(a: Tensor, bound: float) -> Tensor:
    """max(a, bound); the gradient also passes below the bound when it pushes upward."""
    x = a.data
    out = np.maximum(x, np.asarray(bound, dtype=a.dtype))

    def backward(g):
        return (g * ((x >= bound) | (g < 0)),)

    return _result(out, (a,), backward)


def sum_all(a: Tensor) -> Tensor:
    total = np.asarray(np.sum(a.data, dtype=np.float64))
    return _result(total, (a,), lambda g: (np.broadcast_to(g.astype(a.dtype), a.shape),))


def mean_all(a: Tensor) -> Tensor:
    n = a.data.size
    total = np.asarray(np.sum(a.data, dtype=np.float64) / n)
    return _result(total, (a,), lambda g: (np.broadcast_to((g / n).astype(a.dtype), a.shape),))


def mse(a: Tensor, b) -> Tensor:
    """Mean squared error, accumulated in float64."""
    b = _as_tensor(b, a.dtype)
    diff = a.data.astype(np.float64) - b.data
    n = diff.size
    value = np.asarray(np.mean(diff * diff))

    def backward(g):
        d = (2.0 * float(g) / n) * diff
        return (d if a.requires_grad else None, -d if b.requires_grad else None)

    return _result(value, (a, b), backward)


def crop(a: Tensor, height: int, width: int) -> Tensor:
    """Top-left spatial crop of a BCHW tensor."""
    if a.shape[2] == height and a.shape[3] == width:
        return a
    if a.shape[2] < height or a.shape[3] < width:
        raise DimensionError(f"cannot crop {a.shape[2:]} to ({height}, {width})")
    return take(a, (slice(None), slice(None), slice(0, height), slice(0, width)))


# ---------------------------------------------------------------------------
# convolutions


def _check_conv_shapes(x: np.ndarray, w: np.ndarray, stride: int, pad: int, transposed: bool) -> None:
    if x.ndim != 4:
        raise DimensionError(f"input must be 4-D (batch, channel, height, width), got {x.ndim}-D")
    if w.ndim != 4 or w.shape[2] != w.shape[3]:
        raise DimensionError(f"weight must be 4-D with a square kernel, got shape {w.shape}")
    c_in = w.shape[0] if transposed else w.shape[1]
    if x.shape[1] != c_in:
        raise DimensionError(f"channel axis mismatch: input has {x.shape[1]} channels, weight expects {c_in}")
    if stride < 1:
        raise DimensionError(f"stride must be >= 1, got {stride}")
    if pad < 0:
        raise DimensionError(f"pad must be >= 0, got {pad}")


def _windows(xp: np.ndarray, k: int, stride: int, oh: int, ow: int) -> np.ndarray:
    win = sliding_window_view(xp, (k, k), axis=(2, 3))
    return win[:, :, : (oh - 1) * stride + 1 : stride, : (ow - 1) * stride + 1 : stride]


def _scatter_windows(cols: np.ndarray, height: int, width: int, stride: int) -> np.ndarray:
    """Adjoint of :func:`_windows`: cols is (B, C, oh, ow, k, k)."""
    b, c, oh, ow, k, _ = cols.shape
    out = np.zeros((b, c, height, width), dtype=cols.dtype)
    for i in range(k):
        for j in range(k):
            out[:, :, i : i + stride * (oh - 1) + 1 : stride, j : j + stride * (ow - 1) + 1 : stride] += cols[
                :, :, :, :, i, j
            ]
    return out


def _spread(x: np.ndarray, w: np.ndarray, stride: int, height: int, width: int) -> np.ndarray:
    """out[b, o, s*a + i, s*a' + j] += sum_c x[b, c, a, a'] * w[c, o, i, j].

    Shared by the transposed convolution and the input gradient of conv2d.
    Taps are grouped by output phase (kernel zero-extended to a multiple of
    the stride) so each accumulation is one channels-last block add.
    """
    b, c, h, wd = x.shape
    _, co, k, _ = w.shape
    q = -(-k // stride)
    kp = q * stride
    if kp != k:
        w = np.pad(w, ((0, 0), (0, 0), (0, kp - k), (0, kp - k)))
    w2 = w.transpose(0, 2, 3, 1).reshape(c, q, stride, q, stride, co)
    cols = np.tensordot(x.transpose(0, 2, 3, 1), w2, axes=([3], [0]))
    acc = np.zeros((b, h + q - 1, stride, wd + q - 1, stride, co), dtype=cols.dtype)
    for qi in range(q):
        for qj in range(q):
            acc[:, qi : qi + h, :, qj : qj + wd, :, :] += cols[:, :, :, qi, :, qj, :, :].transpose(0, 1, 3, 2, 4, 5)
    full = acc.reshape(b, (h + q - 1) * stride, (wd + q - 1) * stride, co)
    out = np.zeros((b, co, height, width), dtype=cols.dtype)
    hh, ww = min(height, full.shape[1]), min(width, full.shape[2])
    out[:, :, :hh, :ww] = full[:, :hh, :ww].transpose(0, 3, 1, 2)
    return out


def _pad(x: np.ndarray, pad: int) -> np.ndarray:
    if pad == 0:
        return x
    return np.pad(x, ((0, 0), (0, 0), (pad, pad), (pad, pad)))


def conv2d(x: Tensor, weight: Tensor, bias: Tensor | None, stride: int = 1, pad: int = 0) -> Tensor:
    """Zero-padded cross-correlation. weight is (c_out, c_in, k, k)."""
    _check_conv_shapes(x.data, weight.data, stride, pad, transposed=False)
    b, _, h, w = x.shape
    c_out, c_in, k, _ = weight.shape
    oh = (h + 2 * pad - k) // stride + 1
    ow = (w + 2 * pad - k) // stride + 1
    if oh < 1 or ow < 1:
        raise DimensionError(f"kernel {k} larger than padded input ({h + 2 * pad}, {w + 2 * pad})")

    if k == 1 and stride == 1 and pad == 0:
        wm = weight.data[:, :, 0, 0]
        out = np.einsum("oc,bchw->bohw", wm, x.data, optimize=True)
        if bias is not None:
            out = out + bias.data[:, None, None]

        def backward_1x1(g):
            gx = np.einsum("oc,bohw->bchw", wm, g, optimize=True) if x.requires_grad else None
            gw = np.einsum("bohw,bchw->oc", g, x.data, optimize=True)[:, :, None, None] if weight.requires_grad else None
            gb = g.sum(axis=(0, 2, 3)) if bias is not None and bias.requires_grad else None
            return gx, gw, gb

        parents = (x, weight) if bias is None else (x, weight, bias)
        return _result(out, parents, backward_1x1)

    xp = _pad(x.data, pad)
    cols = np.ascontiguousarray(_windows(xp, k, stride, oh, ow))
    out = np.tensordot(cols, weight.data, axes=([1, 4, 5], [1, 2, 3])).transpose(0, 3, 1, 2)
    out = np.ascontiguousarray(out)
    if bias is not None:
        out += bias.data[:, None, None]

    def backward(g):
        gx = gw = gb = None
        if x.requires_grad:
            gxp = _spread(g, weight.data, stride, h + 2 * pad, w + 2 * pad)
            gx = gxp[:, :, pad : pad + h, pad : pad + w]
        if weight.requires_grad:
            gw = np.tensordot(g, cols, axes=([0, 2, 3], [0, 2, 3]))
        if bias is not None and bias.requires_grad:
            gb = g.sum(axis=(0, 2, 3))
        return gx, gw, gb

    parents = (x, weight) if bias is None else (x, weight, bias)
    return _result(out, parents, backward)


def conv_transpose2d(x: Tensor, weight: Tensor, bias: Tensor | None, stride: int = 1, pad: int = 0) -> Tensor:
    """Transposed convolution (adjoint of :func:`conv2d`). weight is (c_in, c_out, k, k).

    Output spatial size is ``(H - 1) * stride - 2 * pad + k``.
    """
    _check_conv_shapes(x.data, weight.data, stride, pad, transposed=True)
    b, _, h, w = x.shape
    c_in, c_out, k, _ = weight.shape
    hf = (h - 1) * stride + k
    wf = (w - 1) * stride + k
    oh, ow = hf - 2 * pad, wf - 2 * pad
    if oh < 1 or ow < 1:
        raise DimensionError(f"pad {pad} too large for transposed output ({hf}, {wf})")

    full = _spread(x.data, weight.data, stride, hf, wf)
    out = np.ascontiguousarray(full[:, :, pad : pad + oh, pad : pad + ow])
    if bias is not None:
        out += bias.data[:, None, None]

    def backward(g):
        gx = gw = gb = None
        gwin = np.ascontiguousarray(_windows(_pad(g, pad), k, stride, h, w))
        if x.requires_grad:
            gx = np.tensordot(gwin, weight.data, axes=([1, 4, 5], [1, 2, 3])).transpose(0, 3, 1, 2)
        if weight.requires_grad:
            gw = np.tensordot(x.data, gwin, axes=([0, 2, 3], [0, 2, 3]))
        if bias is not None and bias.requires_grad:
            gb = g.sum(axis=(0, 2, 3))
        return gx, gw, gb

    parents = (x, weight) if bias is None else (x, weight, bias)
    return _result(out, parents, backward)


def depthwise_conv2d(x: Tensor, weight: Tensor, bias: Tensor | None, pad: int = 1) -> Tensor:
    """Per-channel stride-1 convolution. weight is (c, 1, k, k)."""
    if x.data.ndim != 4 or weight.data.ndim != 4 or weight.shape[1] != 1:
        raise DimensionError(f"depthwise weight must be (c, 1, k, k), got {weight.shape}")
    if x.shape[1] != weight.shape[0]:
        raise DimensionError(f"channel axis mismatch: input has {x.shape[1]}, weight has {weight.shape[0]}")
    _, _, h, w = x.shape
    k = weight.shape[2]
    oh, ow = h + 2 * pad - k + 1, w + 2 * pad - k + 1
    kern = weight.data[:, 0]
    cols = _windows(_pad(x.data, pad), k, 1, oh, ow)
    out = np.einsum("bchwij,cij->bchw", cols, kern, optimize=True)
    if bias is not None:
        out = out + bias.data[:, None, None]

    def backward(g):
        gx = gw = gb = None
        if x.requires_grad:
            dcols = g[:, :, :, :, None, None] * kern[None, :, None, None]
            gx = _scatter_windows(dcols, h + 2 * pad, w + 2 * pad, 1)[:, :, pad : pad + h, pad : pad + w]
        if weight.requires_grad:
            gw = np.einsum("bchw,bchwij->cij", g, cols, optimize=True)[:, None]
        if bias is not None and bias.requires_grad:
            gb = g.sum(axis=(0, 2, 3))
        return gx, gw, gb

    parents = (x, weight) if bias is None else (x, weight, bias)
    return _result(out, parents, backward)


# ---------------------------------------------------------------------------
# GDN


def gdn(x: Tensor, beta: Tensor, gamma: Tensor, inverse: bool = False) -> Tensor:
    """Generalized divisive normalization, y_i = x_i / sqrt(beta_i + sum_j gamma_ij x_j^2).

    ``inverse=True`` multiplies by the root instead (IGDN).  ``beta``/``gamma``
    are the effective (already non-negative) parameters.
    """
    c = x.shape[1]
    if beta.shape != (c,) or gamma.shape != (c, c):
        raise DimensionError(f"GDN over {c} channels needs beta ({c},) and gamma ({c}, {c})")
    if np.any(beta.data <= 0):
        raise ParameterDomainError("GDN beta must be strictly positive")
    if np.any(gamma.data < 0):
        raise ParameterDomainError("GDN gamma must be non-negative")
    xd = x.data
    sq = xd * xd
    norm = np.einsum("ij,bjhw->bihw", gamma.data, sq, optimize=True) + beta.data[:, None, None]
    root = np.sqrt(norm)
    out = xd * root if inverse else xd / root

    def backward(g):
        if inverse:
            gnorm = g * xd * 0.5 / root
            gx_direct = g * root
        else:
            gnorm = -0.5 * g * xd / (norm * root)
            gx_direct = g / root
        gx = gb = gg = None
        if x.requires_grad:
            gx = gx_direct + 2.0 * xd * np.einsum("ij,bihw->bjhw", gamma.data, gnorm, optimize=True)
        if beta.requires_grad:
            gb = gnorm.sum(axis=(0, 2, 3))
        if gamma.requires_grad:
            gg = np.einsum("bihw,bjhw->ij", gnorm, sq, optimize=True)
        return gx, gb, gg

    return _result(out, (x, beta, gamma), backward)


_PEDESTAL = 2.0**-36


def nonneg_value(raw: Tensor, minimum: float = 0.0) -> Tensor:
    """Effective value of a non-negativity reparameterized tensor.

    Stored ``raw`` maps to ``max(raw, sqrt(minimum + p))**2 - p`` with a tiny
    pedestal ``p``.  Evaluated in float64 and cast back, so a raw value created
    by :func:`nonneg_init` reproduces integers such as 1 and 0 exactly.
    """
    bound = np.sqrt(minimum + _PEDESTAL)
    r = raw.data.astype(np.float64)
    v = np.maximum(r, bound)
    out = (v * v - _PEDESTAL).astype(raw.dtype)

    def backward(g):
        pass_mask = (r >= bound) | (g < 0)
        return ((2.0 * v * g * pass_mask).astype(raw.dtype),)

    return _result(out, (raw,), backward)


def nonneg_init(value: np.ndarray, dtype=DEFAULT_DTYPE) -> np.ndarray:
    return np.sqrt(np.asarray(value, dtype=np.float64) + _PEDESTAL).astype(dtype)


# ---------------------------------------------------------------------------
# optimizer


@dataclass
class OptimState:
    lr: float
    betas: tuple[float, float] = (0.9, 0.999)
    eps: float = 1e-8
    step: int = 0
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)


def adam_step(params: Iterable[Param], state: OptimState) -> None:
    """One bias-corrected Adam update, in place.  Frozen params are skipped."""
    params = list(params)
    for p in params:
        if p.trainable and p.grad is None:
            raise TrainingStateError(f"trainable param {p.name!r} has no gradient")
    state.step += 1
    b1, b2 = state.betas
    c1 = 1.0 - b1**state.step
    c2 = 1.0 - b2**state.step
    for p in params:
        if not p.trainable:
            continue
        g = p.grad.astype(np.float64)
        m = state.m.get(p.name)
        if m is None or m.shape != p.shape:
            m = state.m[p.name] = np.zeros(p.shape)
            state.v[p.name] = np.zeros(p.shape)
        v = state.v[p.name]
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * g * g
        update = state.lr * (m / c1) / (np.sqrt(v / c2) + state.eps)
        p.data = (p.data - update).astype(p.dtype)


def clip_grad_norm(params: Iterable[Param], max_norm: float) -> float:
    """Rescale trainable gradients so their global L2 norm is at most ``max_norm``."""
    grads = [p.grad for p in params if p.trainable and p.grad is not None]
    norm = math.sqrt(sum(float(np.sum(g.astype(np.float64) ** 2)) for g in grads))
    if norm > max_norm:
        scale = max_norm / norm
        for g in grads:
            g *= g.dtype.type(scale)
    return norm


def zero_grad(params: Iterable[Param]) -> None:
    for p in params:
        p.grad = None


# ---------------------------------------------------------------------------
# finite-difference checker


def grad_check(
    loss_fn: Callable[[], Tensor],
    params: Sequence[Param],
    h: float = 1e-3,
    samples_per_param: int = 8,
    seed: int = 0,
) -> float:
    """Max relative error between analytic and central-difference gradients.

    ``loss_fn`` must be deterministic; params should be float64 for tight
    agreement.  Coordinates are sampled per param with a seeded generator.
    """
    zero_grad(params)
    loss = loss_fn()
    base = float(loss.data)
    loss.backward()
    if float(loss_fn().data) != base:
        raise HarnessError("loss_fn is not deterministic: two evaluations differ")
    analytic = {p.name: (np.zeros(p.shape) if p.grad is None else p.grad.astype(np.float64)) for p in params}

    rng = make_rng(seed, 0x6772)
    worst = 0.0
    for p in params:
        flat = p.data.reshape(-1)
        count = min(samples_per_param, flat.size)
        for idx in rng.choice(flat.size, size=count, replace=False):
            orig = flat[idx]
            flat[idx] = orig + h
            up = float(loss_fn().data)
            flat[idx] = orig - h
            down = float(loss_fn().data)
            flat[idx] = orig
            cd = (up - down) / (2.0 * h)
            an = analytic[p.name].reshape(-1)[idx]
            err = abs(an - cd) / max(abs(an), abs(cd), 1e-8)
            worst = max(worst, err)
    zero_grad(params)
    return worst
