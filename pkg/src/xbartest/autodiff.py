"""Dense tensor operations with reverse-mode gradients to the network input.

All values are float64 numpy arrays.  Each forward operation optionally
records itself on a :class:`GradTape`; the tape caches the forward values it
needs, so a reverse sweep never recomputes activations.  Gradients are only
defined for the operations in this module plus any caller-recorded entries
(loss functions register their own closures through ``GradTape.record``).

Convolution is cross-correlation (no kernel flip).  The ReLU gradient at
exactly zero is zero.
"""

from __future__ import annotations

from typing import Callable, Sequence

import numpy as np

from .errors import NumericError, ShapeError


def as_input(x) -> np.ndarray:
    """Coerce to a float64 array, rejecting non-finite values."""
    arr = np.asarray(x, dtype=np.float64)
    if not np.all(np.isfinite(arr)):
        raise NumericError("input contains NaN or Inf")
    return arr


class GradTape:
    """Ordered record of operations for one reverse sweep.

    Entries are (output, inputs, backward) where ``backward`` maps the
    upstream gradient of the output to a tuple of gradients aligned with
    ``inputs``.  Arrays are identified by object identity; the tape keeps
    references alive so ids stay valid.  A tape is single-threaded.
    """

    def __init__(self):
        self._records: list[tuple[np.ndarray, tuple, Callable]] = []
        self._watched: list[np.ndarray] = []

    def watch(self, arr: np.ndarray) -> None:
        """Mark a leaf whose gradient will be requested."""
        self._watched.append(arr)

    @property
    def watched(self) -> list[np.ndarray]:
        return list(self._watched)

    def record(self, out: np.ndarray, inputs: Sequence[np.ndarray],
               backward: Callable) -> None:
        self._records.append((out, tuple(inputs), backward))

    @property
    def result(self) -> np.ndarray:
        if not self._records:
            raise ValueError("tape is empty")
        return self._records[-1][0]

    def gradients(self, upstream=None) -> dict[int, np.ndarray]:
        """Reverse sweep from the last recorded output; returns grads by id."""
        root = self.result
        if upstream is None:
            if root.size != 1:
                raise ValueError(
                    "tape not finalized: last recorded output is not scalar")
            upstream = np.ones_like(root)
        else:
            upstream = np.asarray(upstream, dtype=np.float64)
            if upstream.shape != root.shape:
                raise ShapeError(
                    f"upstream shape {upstream.shape} != result shape {root.shape}")
        grads: dict[int, np.ndarray] = {id(root): upstream}
        for out, inputs, backward in reversed(self._records):
            g = grads.get(id(out))
            if g is None:
                continue
            for inp, gi in zip(inputs, backward(g)):
                if gi is None:
                    continue
                acc = grads.get(id(inp))
                grads[id(inp)] = gi if acc is None else acc + gi
        return grads

    def gradient(self, arr: np.ndarray, upstream=None) -> np.ndarray:
        g = self.gradients(upstream).get(id(arr))
        if g is None:
            g = np.zeros_like(arr)
        return g


def backward_to_input(tape: GradTape, upstream=None) -> np.ndarray:
    """Gradient of the tape's (scalar) result with respect to the watched input."""
    if not tape.watched:
        raise ValueError("tape has no watched input")
    return tape.gradient(tape.watched[0], upstream)


# ---------------------------------------------------------------------------
# forward operations


def linear_forward(x: np.ndarray, w: np.ndarray, b: np.ndarray,
                   tape: GradTape | None = None) -> np.ndarray:
    if x.ndim != 1 or w.ndim != 2 or b.ndim != 1:
        raise ShapeError(
            f"linear expects x[in], w[out,in], b[out]; got {x.shape}, {w.shape}, {b.shape}")
    if w.shape[1] != x.shape[0] or w.shape[0] != b.shape[0]:
        raise ShapeError(f"linear shapes do not conform: {x.shape}, {w.shape}, {b.shape}")
    out = w @ x + b

    if tape is not None:
        def backward(g):
            return w.T @ g, np.outer(g, x), g
        tape.record(out, (x, w, b), backward)
    return out


def _pool_geometry(length: int, k: int, stride: int, padding: int) -> int:
    return (length + 2 * padding - k) // stride + 1


def _im2col(x: np.ndarray, kh: int, kw: int, stride: int, padding: int):
    c, h, w = x.shape
    oh = _pool_geometry(h, kh, stride, padding)
    ow = _pool_geometry(w, kw, stride, padding)
    xp = np.pad(x, ((0, 0), (padding, padding), (padding, padding))) if padding else x
    win = np.lib.stride_tricks.sliding_window_view(xp, (kh, kw), axis=(1, 2))
    win = win[:, ::stride, ::stride]                      # [C, oh, ow, kh, kw]
    cols = win.transpose(1, 2, 0, 3, 4).reshape(oh * ow, c * kh * kw)
    return cols, oh, ow


def _col2im(dcols: np.ndarray, shape, kh: int, kw: int, stride: int,
            padding: int, oh: int, ow: int) -> np.ndarray:
    c, h, w = shape
    dxp = np.zeros((c, h + 2 * padding, w + 2 * padding))
    d = dcols.reshape(oh, ow, c, kh, kw).transpose(2, 3, 4, 0, 1)  # [C,kh,kw,oh,ow]
    for i in range(kh):
        for j in range(kw):
            dxp[:, i:i + stride * oh:stride, j:j + stride * ow:stride] += d[:, i, j]
    if padding:
        return dxp[:, padding:-padding, padding:-padding]
    return dxp


def conv2d_forward(x: np.ndarray, k: np.ndarray, b: np.ndarray,
                   stride: int = 1, padding: int = 0,
                   tape: GradTape | None = None) -> np.ndarray:
    if x.ndim != 3 or k.ndim != 4 or b.ndim != 1:
        raise ShapeError(
            f"conv2d expects x[C,H,W], k[F,C,kh,kw], b[F]; got {x.shape}, {k.shape}, {b.shape}")
    f, c, kh, kw = k.shape
    if c != x.shape[0] or b.shape[0] != f:
        raise ShapeError(f"conv2d shapes do not conform: {x.shape}, {k.shape}, {b.shape}")
    if stride < 1:
        raise ValueError(f"stride must be >= 1, got {stride}")
    if kh > x.shape[1] + 2 * padding or kw > x.shape[2] + 2 * padding:
        raise ShapeError(f"kernel {kh}x{kw} larger than padded input {x.shape}")

    cols, oh, ow = _im2col(x, kh, kw, stride, padding)
    kmat = k.reshape(f, c * kh * kw)
    out = (cols @ kmat.T + b).T.reshape(f, oh, ow)

    if tape is not None:
        def backward(g):
            gmat = g.reshape(f, oh * ow)           # [F, P]
            dcols = gmat.T @ kmat                  # [P, C*kh*kw]
            dx = _col2im(dcols, x.shape, kh, kw, stride, padding, oh, ow)
            dk = (gmat @ cols).reshape(k.shape)
            return dx, dk, gmat.sum(axis=1)
        tape.record(out, (x, k, b), backward)
    return out


def relu_forward(x: np.ndarray, tape: GradTape | None = None) -> np.ndarray:
    out = np.maximum(x, 0.0)
    if tape is not None:
        mask = x > 0
        tape.record(out, (x,), lambda g: (g * mask,))
    return out


def batchnorm_inference_forward(x: np.ndarray, mean: np.ndarray, var: np.ndarray,
                                beta: np.ndarray, gamma: np.ndarray, eps: float,
                                tape: GradTape | None = None) -> np.ndarray:
    if eps <= 0:
        raise ValueError(f"eps must be > 0, got {eps}")
    if np.any(var < 0):
        raise ValueError("variance must be nonnegative")
    n = mean.shape[0]
    for name, arr in (("mean", mean), ("var", var), ("beta", beta), ("gamma", gamma)):
        if arr.shape != (n,):
            raise ShapeError(f"batchnorm {name} must have shape ({n},), got {arr.shape}")
    if x.ndim == 1:
        if x.shape[0] != n:
            raise ShapeError(f"batchnorm channels {n} do not match input {x.shape}")
        shape = (n,)
    elif x.ndim == 3:
        if x.shape[0] != n:
            raise ShapeError(f"batchnorm channels {n} do not match input {x.shape}")
        shape = (n, 1, 1)
    else:
        raise ShapeError(f"batchnorm expects 1-D or 3-D input, got {x.shape}")

    scale = (beta / np.sqrt(var + eps)).reshape(shape)
    out = (x - mean.reshape(shape)) * scale + gamma.reshape(shape)

    if tape is not None:
        tape.record(out, (x,), lambda g: (g * scale,))
    return out


def residual_add(a: np.ndarray, b: np.ndarray,
                 tape: GradTape | None = None) -> np.ndarray:
    if a.shape != b.shape:
        raise ShapeError(f"residual operands differ in shape: {a.shape} vs {b.shape}")
    out = a + b
    if tape is not None:
        tape.record(out, (a, b), lambda g: (g, g))
    return out


def softmax(x: np.ndarray, tape: GradTape | None = None) -> np.ndarray:
    if x.size == 0:
        raise ShapeError("softmax of an empty tensor")
    e = np.exp(x - np.max(x))
    out = e / e.sum()
    if tape is not None:
        def backward(g):
            return (out * (g - np.dot(g.ravel(), out.ravel())),)
        tape.record(out, (x,), backward)
    return out


def maxpool2d_forward(x: np.ndarray, size: int, stride: int | None = None,
                      tape: GradTape | None = None) -> np.ndarray:
    windows, geom = _pool_windows(x, size, stride)
    flat = windows.reshape(*windows.shape[:3], -1)
    arg = flat.argmax(axis=3)
    out = np.take_along_axis(flat, arg[..., None], axis=3)[..., 0]
    if tape is not None:
        c, oh, ow, st = geom
        ci, ii, ji = np.meshgrid(np.arange(c), np.arange(oh), np.arange(ow),
                                 indexing="ij")
        ai, aj = np.divmod(arg, size)
        rows = ii * st + ai
        cols = ji * st + aj

        def backward(g):
            dx = np.zeros_like(x)
            np.add.at(dx, (ci, rows, cols), g)
            return (dx,)
        tape.record(out, (x,), backward)
    return out


def avgpool2d_forward(x: np.ndarray, size: int, stride: int | None = None,
                      tape: GradTape | None = None) -> np.ndarray:
    windows, geom = _pool_windows(x, size, stride)
    out = windows.mean(axis=(3, 4))
    if tape is not None:
        c, oh, ow, st = geom

        def backward(g):
            dx = np.zeros_like(x)
            gd = g / (size * size)
            for i in range(size):
                for j in range(size):
                    dx[:, i:i + st * oh:st, j:j + st * ow:st] += gd
            return (dx,)
        tape.record(out, (x,), backward)
    return out


def _pool_windows(x: np.ndarray, size: int, stride: int | None):
    if x.ndim != 3:
        raise ShapeError(f"pooling expects x[C,H,W], got {x.shape}")
    st = size if stride is None else stride
    if size < 1 or st < 1:
        raise ValueError(f"pool size/stride must be >= 1, got {size}/{st}")
    c, h, w = x.shape
    if size > h or size > w:
        raise ShapeError(f"pool window {size} larger than input {x.shape}")
    oh = _pool_geometry(h, size, st, 0)
    ow = _pool_geometry(w, size, st, 0)
    win = np.lib.stride_tricks.sliding_window_view(x, (size, size), axis=(1, 2))
    return win[:, ::st, ::st], (c, oh, ow, st)


def flatten_forward(x: np.ndarray, tape: GradTape | None = None) -> np.ndarray:
    out = x.reshape(-1).copy()
    if tape is not None:
        tape.record(out, (x,), lambda g: (g.reshape(x.shape),))
    return out


def sum_all(x: np.ndarray, tape: GradTape | None = None) -> np.ndarray:
    """Scalar sum; handy as a reduction head in gradient tests."""
    out = np.asarray(x.sum())
    if tape is not None:
        tape.record(out, (x,), lambda g: (np.broadcast_to(g, x.shape).copy(),))
    return out


def finite_difference_gradient(f: Callable[[np.ndarray], float], x: np.ndarray,
                               h: float = 1e-4) -> np.ndarray:
    """Central-difference gradient of a scalar function, one coordinate at a time."""
    if h <= 0:
        raise ValueError(f"h must be > 0, got {h}")
    x = np.asarray(x, dtype=np.float64)
    grad = np.empty_like(x)
    flat = grad.ravel()
    base = x.copy()
    bflat = base.ravel()
    for i in range(base.size):
        orig = bflat[i]
        bflat[i] = orig + h
        fp = float(f(base))
        bflat[i] = orig - h
        fm = float(f(base))
        bflat[i] = orig
        flat[i] = (fp - fm) / (2.0 * h)
    return grad
