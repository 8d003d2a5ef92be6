"""Dense tensor operators with tape-based reverse-mode differentiation.

Tensors are plain ``numpy.ndarray`` objects. Operators accept either arrays or
:class:`Var` handles; when any argument is a ``Var`` the result is recorded on
that variable's :class:`GradTape` so :meth:`GradTape.backward` can replay the
graph in reverse. Without a tape the operators are ordinary numpy functions,
which is what inference uses.

Batched image tensors are laid out ``(N, C, H, W)``; the unbatched ``(C, H, W)``
form is accepted wherever the batch axis is optional.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

__all__ = [
    "ShapeError",
    "Var",
    "GradTape",
    "ParamSet",
    "BatchNormState",
    "conv2d",
    "maxpool2d",
    "batchnorm2d",
    "dense",
    "relu",
    "sigmoid",
    "softmax",
    "log_softmax",
    "global_avg_pool",
    "channel_scale",
    "add",
    "sum_all",
    "bilinear_resize",
    "resize_matrix",
    "gradcheck",
]


class ShapeError(ValueError):
    """Operand shapes are incompatible with the operator."""


# --------------------------------------------------------------------------
# tape


class Var:
    """Handle to a value recorded on a :class:`GradTape`."""

    __slots__ = ("data", "tape", "index", "name")

    def __init__(self, data: np.ndarray, tape: "GradTape", index: int, name: str | None = None):
        self.data = data
        self.tape = tape
        self.index = index
        self.name = name

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    def __repr__(self) -> str:
        label = f" {self.name!r}" if self.name else ""
        return f"<Var{label} #{self.index} shape={self.data.shape} dtype={self.data.dtype}>"


@dataclass
class _Record:
    out: int
    parents: tuple
    backward: Callable


class GradTape:
    """Ordered record of executed operators.

    Leaves are registered with :meth:`param` (trainable, reported under their
    path) or :meth:`input` (differentiable but not reported). Everything else
    appears through operator calls.
    """

    def __init__(self) -> None:
        self._records: list[_Record] = []
        self._params: dict[int, Var] = {}
        self._count = 0

    def _new(self, data: np.ndarray, name: str | None = None) -> Var:
        v = Var(data, self, self._count, name)
        self._count += 1
        return v

    def param(self, path: str, value: np.ndarray) -> Var:
        if any(p.name == path for p in self._params.values()):
            raise ValueError(f"parameter {path!r} registered twice on the same tape")
        v = self._new(value, path)
        self._params[v.index] = v
        return v

    def input(self, value: np.ndarray) -> Var:
        return self._new(value)

    def record(self, out: np.ndarray, parents: Sequence, backward: Callable) -> Var:
        """Register ``out`` as produced from ``parents``.

        ``backward(grad, needs)`` must return one gradient (or ``None``) per
        parent; ``needs[i]`` is true when parent ``i`` is a ``Var``.
        """
        v = self._new(out)
        self._records.append(_Record(v.index, tuple(parents), backward))
        return v

    def backward(self, loss: Var, loss_grad: float = 1.0, retain_graph: bool = False) -> dict[str, np.ndarray]:
        """Propagate ``d loss`` back through the tape.

        Returns a map from parameter path to gradient. Parameters that were
        registered but received no signal (e.g. behind a dead ReLU) get zeros.
        Unless ``retain_graph`` is set the records are dropped afterwards:
        variables point back at their tape, so the cycle would otherwise keep
        every activation alive until the cyclic collector happens to run.
        """
        if not isinstance(loss, Var) or loss.tape is not self:
            raise ValueError("backward needs a scalar loss recorded on this tape")
        if loss.data.size != 1:
            raise ValueError(f"loss must be scalar, got shape {loss.data.shape}")
        if not any(r.out == loss.index for r in self._records):
            raise ValueError("loss was not produced by a recorded operator")

        grads: dict[int, np.ndarray] = {
            loss.index: np.full(loss.data.shape, loss_grad, dtype=loss.data.dtype)
        }
        for rec in reversed(self._records):
            g = grads.pop(rec.out, None)
            if g is None:
                continue
            needs = tuple(isinstance(p, Var) for p in rec.parents)
            parent_grads = rec.backward(g, needs)
            for p, pg in zip(rec.parents, parent_grads):
                if pg is None or not isinstance(p, Var):
                    continue
                if p.index in grads:
                    grads[p.index] = grads[p.index] + pg
                else:
                    grads[p.index] = pg

        out = {}
        for idx, v in self._params.items():
            g = grads.get(idx)
            out[v.name] = g if g is not None else np.zeros_like(v.data)
        if not retain_graph:
            self._records.clear()
        return out


def _data(x):
    return x.data if isinstance(x, Var) else x


def _tape_of(*args) -> GradTape | None:
    tape = None
    for a in args:
        if isinstance(a, Var):
            if tape is not None and a.tape is not tape:
                raise ValueError("operands recorded on different tapes")
            tape = a.tape
    return tape


# --------------------------------------------------------------------------
# parameters and state


class ParamSet(dict):
    """Named parameter arrays. Shapes are fixed once a path is created."""

    def __setitem__(self, path: str, value: np.ndarray) -> None:
        value = np.asarray(value)
        if path in self and self[path].shape != value.shape:
            raise ShapeError(
                f"parameter {path!r} has shape {self[path].shape}; refusing {value.shape}"
            )
        super().__setitem__(path, value)

    def update(self, *args, **kwargs):
        for k, v in dict(*args, **kwargs).items():
            self[k] = v

    def copy(self) -> "ParamSet":
        return ParamSet({k: v.copy() for k, v in self.items()})

    def count(self) -> int:
        return int(sum(v.size for v in self.values()))


@dataclass
class BatchNormState:
    """Running statistics for one batchnorm layer."""

    mean: np.ndarray
    var: np.ndarray
    momentum: float = 0.1
    eps: float = 1e-5

    @classmethod
    def fresh(cls, channels: int, dtype=np.float64) -> "BatchNormState":
        return cls(np.zeros(channels, dtype=dtype), np.ones(channels, dtype=dtype))

    def copy(self) -> "BatchNormState":
        return BatchNormState(self.mean.copy(), self.var.copy(), self.momentum, self.eps)


# --------------------------------------------------------------------------
# convolution


def _as_batched(x: np.ndarray, ndim: int) -> tuple[np.ndarray, bool]:
    if x.ndim == ndim - 1:
        return x[None], True
    if x.ndim != ndim:
        raise ShapeError(f"expected a {ndim - 1}-d or {ndim}-d tensor, got shape {x.shape}")
    return x, False


def _padding(mode, kh: int, kw: int) -> tuple[int, int]:
    if mode == "same":
        if kh % 2 == 0 or kw % 2 == 0:
            raise ShapeError(f"'same' padding needs odd kernel extents, got {kh}x{kw}")
        return (kh - 1) // 2, (kw - 1) // 2
    if mode == "valid":
        return 0, 0
    if isinstance(mode, int):
        return mode, mode
    raise ValueError(f"unknown padding mode {mode!r}")


def _im2col(xp: np.ndarray, kh: int, kw: int) -> np.ndarray:
    """(N, C, Hp, Wp) -> (N, C*kh*kw, Ho*Wo), stride 1."""
    n, c = xp.shape[:2]
    win = sliding_window_view(xp, (kh, kw), axis=(2, 3))  # N,C,Ho,Wo,kh,kw
    ho, wo = win.shape[2:4]
    cols = np.ascontiguousarray(win.transpose(0, 1, 4, 5, 2, 3))
    return cols.reshape(n, c * kh * kw, ho * wo)


def _conv_valid(xp: np.ndarray, w: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    o, c, kh, kw = w.shape
    n = xp.shape[0]
    ho, wo = xp.shape[2] - kh + 1, xp.shape[3] - kw + 1
    cols = _im2col(xp, kh, kw)
    out = np.matmul(w.reshape(o, c * kh * kw), cols)
    return out.reshape(n, o, ho, wo), cols


def conv2d(x, kernel, bias, padding="same"):
    """Stride-1 cross-correlation of ``x`` with ``kernel`` plus per-channel bias.

    ``x`` is ``(C_in, H, W)`` or ``(N, C_in, H, W)``; ``kernel`` is
    ``(C_out, C_in, kh, kw)``; ``bias`` may be ``None``. ``padding`` is ``"same"``, ``"valid"`` or an
    int of zero padding on every side.
    """
    xd, wd = _data(x), _data(kernel)
    bd = _data(bias) if bias is not None else None
    xb, squeeze = _as_batched(xd, 4)
    if wd.ndim != 4:
        raise ShapeError(f"kernel must be (C_out, C_in, kh, kw), got {wd.shape}")
    o, c, kh, kw = wd.shape
    if xb.shape[1] != c:
        raise ShapeError(f"input has {xb.shape[1]} channels but kernel expects {c} (kernel {wd.shape})")
    if bd is not None and bd.shape != (o,):
        raise ShapeError(f"bias must have shape ({o},), got {bd.shape}")
    ph, pw = _padding(padding, kh, kw)
    h, w = xb.shape[2:]
    if kh > h + 2 * ph or kw > w + 2 * pw:
        raise ShapeError(f"kernel {kh}x{kw} larger than padded input {h + 2 * ph}x{w + 2 * pw}")

    xp = np.pad(xb, ((0, 0), (0, 0), (ph, ph), (pw, pw))) if (ph or pw) else xb
    out, cols = _conv_valid(xp, wd)
    if bd is not None:
        out += bd.reshape(1, o, 1, 1)
    result = out[0] if squeeze else out

    tape = _tape_of(x, kernel, bias)
    if tape is None:
        return result

    def backward(g, needs):
        gb = g[None] if squeeze else g
        n, _, ho, wo = gb.shape
        g2 = gb.reshape(n, o, ho * wo)
        gx = gw = gbias = None
        if needs[1]:
            gw = np.matmul(g2, cols.transpose(0, 2, 1)).sum(axis=0).reshape(wd.shape)
        if len(needs) > 2 and needs[2]:
            gbias = g2.sum(axis=(0, 2))
        if needs[0]:
            # full correlation with the flipped, channel-transposed kernel
            wf = np.ascontiguousarray(wd[:, :, ::-1, ::-1].transpose(1, 0, 2, 3))
            qh, qw = kh - 1 - ph, kw - 1 - pw
            gp = np.pad(gb, ((0, 0), (0, 0), (qh, qh), (qw, qw)))
            gx, _ = _conv_valid(gp, wf)
            if squeeze:
                gx = gx[0]
        return gx, gw, gbias

    parents = (x, kernel, bias) if bias is not None else (x, kernel)
    return tape.record(result, parents, backward)


def maxpool2d(x, window: int = 2, stride: int = 2):
    """Non-overlapping max pooling; ties resolve to the first position in
    row-major window order."""
    if window != stride:
        raise ValueError("only non-overlapping pooling (window == stride) is supported")
    xd = _data(x)
    xb, squeeze = _as_batched(xd, 4)
    n, c, h, w = xb.shape
    k = window
    if h % k:
        raise ShapeError(f"height {h} is not divisible by pooling window {k}")
    if w % k:
        raise ShapeError(f"width {w} is not divisible by pooling window {k}")
    # separable argmax: best column inside each row segment, then best row.
    # Strict comparisons keep the earliest index, which reproduces row-major
    # first-index tie-breaking over the whole window.
    cols = xb[..., 0::k]
    col_arg = np.zeros(cols.shape, dtype=np.uint8)
    for j in range(1, k):
        cand = xb[..., j::k]
        col_arg = np.where(cand > cols, np.uint8(j), col_arg)
        cols = np.maximum(cols, cand)
    out = cols[:, :, 0::k]
    row_arg = np.zeros(out.shape, dtype=np.uint8)
    for i in range(1, k):
        cand = cols[:, :, i::k]
        row_arg = np.where(cand > out, np.uint8(i), row_arg)
        out = np.maximum(out, cand)
    result = out[0] if squeeze else out

    tape = _tape_of(x)
    if tape is None:
        return result

    def backward(g, needs):
        gb = g[None] if squeeze else g
        gcols = np.empty(cols.shape, dtype=gb.dtype)
        for i in range(k):
            np.multiply(gb, row_arg == i, out=gcols[:, :, i::k])
        gx = np.empty(xb.shape, dtype=gb.dtype)
        for j in range(k):
            np.multiply(gcols, col_arg == j, out=gx[..., j::k])
        return (gx[0] if squeeze else gx,)

    return tape.record(result, (x,), backward)


def batchnorm2d(x, scale, shift, state: BatchNormState, training: bool):
    """Per-channel batch normalization over ``(N, H, W)``.

    In training mode the batch statistics normalize the input and the running
    statistics move by ``state.momentum`` (unbiased variance). In eval mode the
    running statistics are used as constants.
    """
    xd, gd, bd = _data(x), _data(scale), _data(shift)
    if xd.ndim != 4:
        raise ShapeError(f"batchnorm2d expects (N, C, H, W), got {xd.shape}")
    n, c, h, w = xd.shape
    if gd.shape != (c,) or bd.shape != (c,):
        raise ShapeError(f"scale/shift must have shape ({c},), got {gd.shape} and {bd.shape}")
    m = n * h * w
    shp = (1, c, 1, 1)
    if training:
        if m < 2:
            raise ValueError("batchnorm2d in training mode needs at least 2 values per channel")
        mean = xd.mean(axis=(0, 2, 3))
        centered = xd - mean.reshape(shp)
        var = np.einsum("nchw,nchw->c", centered, centered) / m
        inv_std = 1.0 / np.sqrt(var + state.eps)
        xhat = centered
        xhat *= inv_std.reshape(shp)
        mom = state.momentum
        state.mean = (1 - mom) * state.mean + mom * mean.astype(state.mean.dtype)
        state.var = (1 - mom) * state.var + mom * (var * m / (m - 1)).astype(state.var.dtype)
    else:
        inv_std = (1.0 / np.sqrt(state.var + state.eps)).astype(xd.dtype)
        xhat = (xd - state.mean.astype(xd.dtype).reshape(shp)) * inv_std.reshape(shp)
    out = xhat * gd.reshape(shp) + bd.reshape(shp)

    tape = _tape_of(x, scale, shift)
    if tape is None:
        return out

    def backward(g, needs):
        gscale = np.einsum("nchw,nchw->c", g, xhat) if (needs[1] or needs[0]) else None
        gshift = g.sum(axis=(0, 2, 3)) if (needs[2] or needs[0]) else None
        gx = None
        if needs[0]:
            k = (gd * inv_std).reshape(shp)
            if training:
                gx = g - (gshift / m).reshape(shp) - xhat * (gscale / m).reshape(shp)
                gx *= k
            else:
                gx = g * k
        return gx, (gscale if needs[1] else None), (gshift if needs[2] else None)

    return tape.record(out, (x, scale, shift), backward)


# --------------------------------------------------------------------------
# dense and elementwise


def dense(x, weight, bias):
    """``weight @ x + bias`` for ``x`` of shape ``(d_in,)`` or ``(N, d_in)``."""
    xd, wd, bd = _data(x), _data(weight), _data(bias) if bias is not None else None
    if wd.ndim != 2:
        raise ShapeError(f"weight must be 2-d, got {wd.shape}")
    if xd.shape[-1] != wd.shape[1]:
        raise ShapeError(f"input width {xd.shape[-1]} does not match weight {wd.shape}")
    if bd is not None and bd.shape != (wd.shape[0],):
        raise ShapeError(f"bias must have shape ({wd.shape[0]},), got {bd.shape}")
    out = xd @ wd.T
    if bd is not None:
        out = out + bd

    tape = _tape_of(x, weight, bias)
    if tape is None:
        return out

    def backward(g, needs):
        gx = g @ wd if needs[0] else None
        gw = gb = None
        if needs[1]:
            gw = np.outer(g, xd) if g.ndim == 1 else g.T @ xd
        if len(needs) > 2 and needs[2]:
            gb = g if g.ndim == 1 else g.sum(axis=0)
        return gx, gw, gb

    parents = (x, weight, bias) if bias is not None else (x, weight)
    return tape.record(out, parents, backward)


def relu(x):
    xd = _data(x)
    out = np.maximum(xd, 0)
    tape = _tape_of(x)
    if tape is None:
        return out
    mask = xd > 0
    return tape.record(out, (x,), lambda g, needs: (g * mask,))


def sigmoid(x):
    xd = _data(x)
    # split by sign so exp never overflows
    out = np.empty_like(xd)
    pos = xd >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-xd[pos]))
    e = np.exp(xd[~pos])
    out[~pos] = e / (1.0 + e)
    tape = _tape_of(x)
    if tape is None:
        return out
    return tape.record(out, (x,), lambda g, needs: (g * out * (1.0 - out),))


def softmax(x, axis: int = -1):
    xd = _data(x)
    if not np.all(np.isfinite(xd)):
        raise FloatingPointError("softmax received non-finite logits")
    z = xd - xd.max(axis=axis, keepdims=True)
    e = np.exp(z)
    out = e / e.sum(axis=axis, keepdims=True)
    tape = _tape_of(x)
    if tape is None:
        return out

    def backward(g, needs):
        return (out * (g - (g * out).sum(axis=axis, keepdims=True)),)

    return tape.record(out, (x,), backward)


def log_softmax(x, axis: int = -1):
    xd = _data(x)
    if not np.all(np.isfinite(xd)):
        raise FloatingPointError("log_softmax received non-finite logits")
    z = xd - xd.max(axis=axis, keepdims=True)
    out = z - np.log(np.exp(z).sum(axis=axis, keepdims=True))
    tape = _tape_of(x)
    if tape is None:
        return out

    def backward(g, needs):
        return (g - np.exp(out) * g.sum(axis=axis, keepdims=True),)

    return tape.record(out, (x,), backward)


def global_avg_pool(x):
    """Mean over the two trailing spatial axes: ``(..., H, W) -> (...)``."""
    xd = _data(x)
    if xd.ndim < 3:
        raise ShapeError(f"global_avg_pool expects (C, H, W) or (N, C, H, W), got {xd.shape}")
    h, w = xd.shape[-2:]
    out = xd.mean(axis=(-2, -1))
    tape = _tape_of(x)
    if tape is None:
        return out

    def backward(g, needs):
        return (np.broadcast_to((g / (h * w))[..., None, None], xd.shape).copy(),)

    return tape.record(out, (x,), backward)


def channel_scale(x, s):
    """Multiply each channel map of ``x`` (``(N, C, H, W)`` or ``(C, H, W)``)
    by the matching scalar in ``s`` (``(N, C)`` or ``(C,)``)."""
    xd, sd = _data(x), _data(s)
    if xd.shape[:-2] != sd.shape:
        raise ShapeError(f"scale shape {sd.shape} does not match channels of {xd.shape}")
    out = xd * sd[..., None, None]
    tape = _tape_of(x, s)
    if tape is None:
        return out

    def backward(g, needs):
        gx = g * sd[..., None, None] if needs[0] else None
        gs = np.einsum("...hw,...hw->...", g, xd) if needs[1] else None
        return gx, gs

    return tape.record(out, (x, s), backward)


def add(a, b):
    ad, bd = _data(a), _data(b)
    if ad.shape != bd.shape:
        raise ShapeError(f"add operands differ in shape: {ad.shape} vs {bd.shape}")
    out = ad + bd
    tape = _tape_of(a, b)
    if tape is None:
        return out
    return tape.record(out, (a, b), lambda g, needs: (g, g))


def sum_all(x):
    xd = _data(x)
    out = np.asarray(xd.sum())
    tape = _tape_of(x)
    if tape is None:
        return out
    return tape.record(out, (x,), lambda g, needs: (np.full(xd.shape, g, dtype=xd.dtype),))


# --------------------------------------------------------------------------
# resizing


def _interp_coords(n_in: int, n_out: int) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    # half-pixel centres: src = (dst + 0.5) * n_in / n_out - 0.5, clamped
    src = (np.arange(n_out, dtype=np.float64) + 0.5) * (n_in / n_out) - 0.5
    src = np.clip(src, 0.0, n_in - 1)
    i0 = np.floor(src).astype(np.intp)
    i1 = np.minimum(i0 + 1, n_in - 1)
    return i0, i1, src - i0


def resize_matrix(n_in: int, n_out: int) -> np.ndarray:
    """Dense ``(n_out, n_in)`` matrix of the 1-d interpolation weights."""
    i0, i1, t = _interp_coords(n_in, n_out)
    r = np.zeros((n_out, n_in))
    rows = np.arange(n_out)
    np.add.at(r, (rows, i0), 1.0 - t)
    np.add.at(r, (rows, i1), t)
    return r


def _lerp_axis(a: np.ndarray, n_out: int, axis: int) -> np.ndarray:
    n_in = a.shape[axis]
    if n_in == n_out:
        return a
    i0, i1, t = _interp_coords(n_in, n_out)
    lo = np.take(a, i0, axis=axis)
    hi = np.take(a, i1, axis=axis)
    shape = [1] * a.ndim
    shape[axis] = n_out
    t = t.reshape(shape).astype(a.dtype, copy=False)
    out = lo + (hi - lo) * t
    # keep each output inside its two source samples despite rounding
    return np.clip(out, np.minimum(lo, hi), np.maximum(lo, hi))


def bilinear_resize(x, out_h: int, out_w: int):
    """Bilinear resize of the two trailing axes with half-pixel centres."""
    if out_h <= 0 or out_w <= 0:
        raise ValueError(f"target extents must be positive, got {out_h}x{out_w}")
    xd = _data(x)
    if xd.ndim < 2 or min(xd.shape[-2:]) < 1:
        raise ShapeError(f"bilinear_resize needs a (..., H, W) input, got {xd.shape}")
    h, w = xd.shape[-2:]
    out = _lerp_axis(_lerp_axis(xd, out_h, xd.ndim - 2), out_w, xd.ndim - 1)
    if out is xd:
        out = xd.copy()
    tape = _tape_of(x)
    if tape is None:
        return out
    ry = resize_matrix(h, out_h).astype(xd.dtype)
    rx = resize_matrix(w, out_w).astype(xd.dtype)
    return tape.record(out, (x,), lambda g, needs: (ry.T @ g @ rx,))


# --------------------------------------------------------------------------
# finite differences


def gradcheck(
    loss_fn: Callable[[dict[str, np.ndarray]], float],
    params: dict[str, np.ndarray],
    analytic: dict[str, np.ndarray],
    n_coords: int = 10,
    h: float = 1e-4,
    rng: np.random.Generator | None = None,
    floor: float = 1e-8,
) -> dict[str, float]:
    """Compare analytic gradients against central differences.

    ``loss_fn`` must evaluate the loss for the (mutated in place) ``params``.
    For each parameter a random sample of up to ``n_coords`` coordinates is
    perturbed by ``±h``. The per-coordinate error is
    ``|a - n| / max(|a|, |n|, floor)``; the returned map holds the worst error
    per parameter path.
    """
    rng = np.random.default_rng(0) if rng is None else rng
    worst = {}
    for path, value in params.items():
        flat = value.reshape(-1)
        k = min(n_coords, flat.size)
        idx = rng.choice(flat.size, size=k, replace=False)
        a = analytic[path].reshape(-1)
        err = 0.0
        for i in idx:
            old = flat[i]
            flat[i] = old + h
            fp = loss_fn(params)
            flat[i] = old - h
            fm = loss_fn(params)
            flat[i] = old
            num = (fp - fm) / (2 * h)
            denom = max(abs(a[i]), abs(num), floor)
            err = max(err, abs(a[i] - num) / denom)
        worst[path] = err
    return worst
