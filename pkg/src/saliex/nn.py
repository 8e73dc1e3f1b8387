"""Minimal float64 tensors with tape-based reverse-mode differentiation.

Operations record themselves on the active :class:`Tape` (a context-local
variable, so separate threads each see their own tape).  Outside a tape every
op is a plain numpy computation, which is what inference uses.

    with Tape() as tape:
        loss = bce_loss(model_logits, target)
    backward(loss)
"""

from __future__ import annotations

import contextvars
from functools import lru_cache
from typing import Callable, Sequence

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .errors import ConfigError, ContractError, DataError

_ACTIVE_TAPE: contextvars.ContextVar["Tape | None"] = contextvars.ContextVar(
    "saliex_active_tape", default=None
)


class Tensor:
    """Dense float64 array plus an optional accumulated gradient."""

    __slots__ = ("data", "grad", "requires_grad", "_tape")

    def __init__(self, data, requires_grad: bool = False):
        arr = np.asarray(data, dtype=np.float64)
        self.data = arr
        self.grad: np.ndarray | None = None
        self.requires_grad = requires_grad
        self._tape: Tape | None = None

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    def numpy(self) -> np.ndarray:
        return self.data

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad})"


class Parameter(Tensor):
    """Trainable tensor with a gradient and a momentum buffer of the same shape."""

    __slots__ = ("name", "momentum")

    def __init__(self, data, name: str = ""):
        super().__init__(np.array(data, dtype=np.float64), requires_grad=True)
        self.name = name
        self.grad = np.zeros_like(self.data)
        self.momentum = np.zeros_like(self.data)

    @property
    def value(self) -> np.ndarray:
        return self.data

    def zero_grad(self) -> None:
        self.grad = np.zeros_like(self.data)

    def __repr__(self) -> str:
        return f"Parameter({self.name!r}, shape={self.shape})"


GradFn = Callable[[np.ndarray], Sequence["np.ndarray | None"]]


class Tape:
    """Ordered record of executed ops; replayed backwards by :meth:`backward`."""

    def __init__(self):
        self.records: list[tuple[Tensor, tuple[Tensor, ...], GradFn]] = []
        self._token = None

    def __enter__(self) -> "Tape":
        self._token = _ACTIVE_TAPE.set(self)
        return self

    def __exit__(self, *exc) -> None:
        _ACTIVE_TAPE.reset(self._token)
        self._token = None

    def __len__(self) -> int:
        return len(self.records)

    def record(self, out: Tensor, inputs: tuple[Tensor, ...], grad_fn: GradFn) -> None:
        out.requires_grad = True
        out._tape = self
        self.records.append((out, inputs, grad_fn))

    def backward(self, loss: Tensor) -> None:
        if loss.data.size != 1:
            raise ContractError(f"backward needs a scalar loss, got shape {loss.shape}")
        produced = {id(out) for out, _, _ in self.records}
        grads: dict[int, tuple[Tensor, np.ndarray]] = {
            id(loss): (loss, np.ones_like(loss.data))
        }
        for out, inputs, grad_fn in reversed(self.records):
            entry = grads.get(id(out))
            if entry is None:
                continue
            del grads[id(out)]
            in_grads = grad_fn(entry[1])
            for t, g in zip(inputs, in_grads):
                if g is None or not t.requires_grad:
                    continue
                prev = grads.get(id(t))
                grads[id(t)] = (t, g if prev is None else prev[1] + g)
        # leaves (parameters and user tensors) receive accumulated gradients
        for key, (t, g) in grads.items():
            if key in produced:
                continue
            t.grad = g.copy() if t.grad is None else t.grad + g


def backward(loss: Tensor) -> None:
    """Populate ``.grad`` of every leaf reachable from the scalar ``loss``."""
    if loss.data.size != 1:
        raise ContractError(f"backward needs a scalar loss, got shape {loss.shape}")
    if loss._tape is None:
        raise ContractError("loss was not produced under an active Tape")
    loss._tape.backward(loss)


def _record(out: Tensor, inputs: tuple[Tensor, ...], grad_fn: GradFn) -> Tensor:
    tape = _ACTIVE_TAPE.get()
    if tape is not None and any(t.requires_grad for t in inputs):
        tape.record(out, inputs, grad_fn)
    return out


# ---------------------------------------------------------------------------
# elementwise


def relu(x: Tensor) -> Tensor:
    mask = x.data > 0
    out = Tensor(np.where(mask, x.data, 0.0))
    return _record(out, (x,), lambda g: (g * mask,))


_SIGMOID_LO = np.nextafter(0.0, 1.0)
_SIGMOID_HI = np.nextafter(1.0, 0.0)


def _sigmoid(z: np.ndarray) -> np.ndarray:
    # branch-free stable form: exp never sees a positive argument
    e = np.exp(-np.abs(z))
    s = np.where(z >= 0, 1.0 / (1.0 + e), e / (1.0 + e))
    # keep the open interval (0, 1) even where float64 saturates
    return np.clip(s, _SIGMOID_LO, _SIGMOID_HI)


def sigmoid(x: Tensor) -> Tensor:
    s = _sigmoid(x.data)
    out = Tensor(s)
    return _record(out, (x,), lambda g: (g * s * (1.0 - s),))


def add(a: Tensor, b: Tensor) -> Tensor:
    if a.shape != b.shape:
        raise ContractError(f"add: shape mismatch {a.shape} vs {b.shape}")
    out = Tensor(a.data + b.data)
    return _record(out, (a, b), lambda g: (g, g))


def mul(a: Tensor, b: Tensor) -> Tensor:
    if a.shape != b.shape:
        raise ContractError(f"mul: shape mismatch {a.shape} vs {b.shape}")
    out = Tensor(a.data * b.data)
    return _record(out, (a, b), lambda g: (g * b.data, g * a.data))


def scale(x: Tensor, c: float) -> Tensor:
    out = Tensor(x.data * c)
    return _record(out, (x,), lambda g: (g * c,))


def sum_all(x: Tensor) -> Tensor:
    out = Tensor(np.sum(x.data))
    shape = x.shape
    return _record(out, (x,), lambda g: (np.broadcast_to(g, shape).copy(),))


# ---------------------------------------------------------------------------
# convolution / pooling / resampling


def _im2col(xp: np.ndarray, kh: int, kw: int, stride: int, ho: int, wo: int) -> np.ndarray:
    """[C,Hp,Wp] -> [C*kh*kw, ho*wo] patch matrix (channel-major, then kernel row/col)."""
    c = xp.shape[0]
    if kh == 1 and kw == 1:
        return xp[:, : stride * ho : stride, : stride * wo : stride].reshape(c, ho * wo)
    win = sliding_window_view(xp, (kh, kw), axis=(1, 2))[:, ::stride, ::stride]
    return win.transpose(0, 3, 4, 1, 2).reshape(c * kh * kw, ho * wo)


def conv2d(
    x: Tensor, kernel: Tensor, bias: Tensor, stride: int = 1, pad: int = 0
) -> Tensor:
    """Cross-correlation of a [C_in,H,W] map with [C_out,C_in,kh,kw] weights."""
    if x.data.ndim != 3 or kernel.data.ndim != 4:
        raise ContractError(
            f"conv2d expects x[C,H,W] and kernel[O,C,kh,kw], got {x.shape}, {kernel.shape}"
        )
    c_in, h, w = x.shape
    c_out, kc, kh, kw = kernel.shape
    if kc != c_in:
        raise ContractError(f"conv2d: input has {c_in} channels, kernel expects {kc}")
    if bias.shape != (c_out,):
        raise ContractError(f"conv2d: bias shape {bias.shape} != ({c_out},)")
    if stride < 1 or pad < 0:
        raise ConfigError(f"conv2d: invalid stride={stride} / pad={pad}")
    span_h, span_w = h + 2 * pad - kh, w + 2 * pad - kw
    if span_h < 0 or span_w < 0 or span_h % stride or span_w % stride:
        raise ConfigError(
            f"conv2d: output size not integral for input {h}x{w}, kernel {kh}x{kw}, "
            f"stride {stride}, pad {pad}"
        )
    ho, wo = span_h // stride + 1, span_w // stride + 1

    xp = np.pad(x.data, ((0, 0), (pad, pad), (pad, pad))) if pad else x.data
    cols = _im2col(xp, kh, kw, stride, ho, wo)
    wmat = kernel.data.reshape(c_out, -1)
    out = wmat @ cols
    out += bias.data[:, None]
    result = Tensor(out.reshape(c_out, ho, wo))

    def grad_fn(g):
        g2 = g.reshape(c_out, ho * wo)
        gk = (g2 @ cols.T).reshape(kernel.shape) if kernel.requires_grad else None
        gb = g2.sum(axis=1) if bias.requires_grad else None
        gx = None
        if x.requires_grad and stride == 1 and pad < min(kh, kw):
            # stride-1 input gradient is a full correlation with the flipped kernel
            ph, pw = kh - 1 - pad, kw - 1 - pad
            gp = np.pad(g, ((0, 0), (ph, ph), (pw, pw))) if ph or pw else g
            wflip = kernel.data[:, :, ::-1, ::-1].transpose(1, 0, 2, 3).reshape(c_in, -1)
            gx = (wflip @ _im2col(gp, kh, kw, 1, h, w)).reshape(c_in, h, w)
        elif x.requires_grad:
            gcols = (wmat.T @ g2).reshape(c_in, kh, kw, ho, wo)
            gxp = np.zeros_like(xp)
            for u in range(kh):
                for v in range(kw):
                    gxp[:, u : u + stride * ho : stride, v : v + stride * wo : stride] += gcols[
                        :, u, v
                    ]
            gx = gxp[:, pad : pad + h, pad : pad + w] if pad else gxp
        return gx, gk, gb

    return _record(result, (x, kernel, bias), grad_fn)


def maxpool2d(x: Tensor, k: int) -> Tensor:
    """k x k max pooling; gradient goes to the first maximum in scan order."""
    c, h, w = x.shape
    if k < 1 or h % k or w % k:
        raise ConfigError(f"maxpool2d: {h}x{w} not divisible by k={k}")
    ho, wo = h // k, w // k
    blocks = x.data.reshape(c, ho, k, wo, k).transpose(0, 1, 3, 2, 4).reshape(c, ho, wo, k * k)
    arg = np.argmax(blocks, axis=-1)  # numpy returns the first occurrence
    out = Tensor(np.take_along_axis(blocks, arg[..., None], axis=-1)[..., 0])

    def grad_fn(g):
        gb = np.zeros((c, ho, wo, k * k))
        np.put_along_axis(gb, arg[..., None], g[..., None], axis=-1)
        gx = gb.reshape(c, ho, wo, k, k).transpose(0, 1, 3, 2, 4).reshape(c, h, w)
        return (gx,)

    return _record(out, (x,), grad_fn)


@lru_cache(maxsize=256)
def interpolation_matrix(n_out: int, n_in: int) -> np.ndarray:
    """[n_out, n_in] linear interpolation weights, half-pixel-centre convention.

    Source coordinate ``s = (d + 0.5) * n_in / n_out - 0.5`` clamped to
    ``[0, n_in - 1]``.  Rows sum to one, so constants are preserved exactly.
    """
    m = np.zeros((n_out, n_in))
    for d in range(n_out):
        s = (d + 0.5) * (n_in / n_out) - 0.5
        s = min(max(s, 0.0), n_in - 1.0)
        lo = int(np.floor(s))
        hi = min(lo + 1, n_in - 1)
        frac = s - lo
        m[d, lo] += 1.0 - frac
        m[d, hi] += frac
    m.setflags(write=False)
    return m


def bilinear_upsample(x: Tensor, height: int, width: int) -> Tensor:
    c, h, w = x.shape
    if height < h or width < w:
        raise ContractError(f"bilinear_upsample: target {height}x{width} smaller than {h}x{w}")
    if (height, width) == (h, w):
        out = Tensor(x.data.copy())
        return _record(out, (x,), lambda g: (g,))
    mh = interpolation_matrix(height, h)
    mw = interpolation_matrix(width, w)
    out = Tensor(np.matmul(np.matmul(mh, x.data), mw.T))
    return _record(out, (x,), lambda g: (np.matmul(np.matmul(mh.T, g), mw),))


def concat_channels(xs: Sequence[Tensor]) -> Tensor:
    if not xs:
        raise ContractError("concat_channels: empty sequence")
    spatial = xs[0].shape[1:]
    for t in xs:
        if t.data.ndim != 3 or t.shape[1:] != spatial:
            raise ContractError(
                f"concat_channels: spatial mismatch {t.shape} vs (*, {spatial[0]}, {spatial[1]})"
            )
    if len(xs) == 1:
        out = Tensor(xs[0].data.copy())
        return _record(out, (xs[0],), lambda g: (g,))
    bounds = np.cumsum([0] + [t.shape[0] for t in xs])
    out = Tensor(np.concatenate([t.data for t in xs], axis=0))

    def grad_fn(g):
        return tuple(g[bounds[i] : bounds[i + 1]] for i in range(len(xs)))

    return _record(out, tuple(xs), grad_fn)


# ---------------------------------------------------------------------------
# loss and optimizer


def bce_loss(logits: Tensor, target) -> Tensor:
    """Mean sigmoid cross-entropy, ``max(z,0) - z*t + log(1 + exp(-|z|))``."""
    t = target.data if isinstance(target, Tensor) else np.asarray(target, dtype=np.float64)
    if t.shape != logits.shape:
        raise ContractError(f"bce_loss: target shape {t.shape} != logits shape {logits.shape}")
    if not np.all((t == 0.0) | (t == 1.0)):
        raise DataError("bce_loss: target values must be 0 or 1")
    z = logits.data
    n = z.size
    value = np.mean(np.maximum(z, 0.0) - z * t + np.log1p(np.exp(-np.abs(z))))
    out = Tensor(value)
    return _record(out, (logits,), lambda g: (g * (_sigmoid(z) - t) / n,))


def sgd_step(
    params: Sequence[Parameter], lr: float, momentum: float = 0.9, weight_decay: float = 0.0
) -> None:
    """Heavy-ball SGD with coupled L2 decay, then clear gradients.

    ``v <- momentum*v - lr*(g + weight_decay*w)``; ``w <- w + v``.
    """
    for p in params:
        v = p.momentum
        v *= momentum
        v -= lr * (p.grad + weight_decay * p.data)
        p.data += v
        p.zero_grad()
