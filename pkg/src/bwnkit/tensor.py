"""Dense tensors, a reverse-mode gradient tape, and the conv-net primitives.

Tensors are immutable values: every operation returns a fresh ``Tensor`` and
never mutates its inputs.  Operations accept single images ``[c, h, w]`` or
batches ``[b, c, h, w]``; reductions inside a convolution always run in the
same (channel, kernel-row, kernel-col) order, so repeated runs on the same
inputs are bit-identical.

Recording is explicit: pass a ``Tape`` to an operation to make it
differentiable, pass ``None`` for plain inference.  ``Tape.gradients`` replays
the recorded operations in exact reverse execution order.

Two precisions are supported: float32 for training and serialization,
float64 for the finite-difference harness (``finite_diff_check``), where
float32 central differences would be too noisy to bound meaningfully.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Iterable, Sequence

import numpy as np

__all__ = [
    "Tensor",
    "TensorError",
    "Tape",
    "OpRecord",
    "conv2d",
    "leaky_relu",
    "max_pool2",
    "reorg2",
    "concat_channels",
    "batch_norm_infer",
    "batch_norm_train",
    "add",
    "sub",
    "mul",
    "scale",
    "sum_all",
    "take_range",
    "finite_diff_check",
]


class TensorError(ValueError):
    """Raised when an operation's preconditions are violated."""


class Tensor:
    """Immutable dense array of finite float32/float64 values.

    The wrapped buffer must never be written after construction; all
    operations in this module allocate fresh outputs.
    """

    __slots__ = ("data",)

    def __init__(self, data, dtype=None):
        arr = np.asarray(data, dtype=dtype)
        if arr.dtype == np.float32 or arr.dtype == np.float64:
            pass
        else:
            arr = arr.astype(np.float64)
        if any(d <= 0 for d in arr.shape):
            raise TensorError(f"tensor dimensions must be positive, got {arr.shape}")
        if not np.all(np.isfinite(arr)):
            raise TensorError("tensor elements must be finite")
        self.data = arr

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    @property
    def dtype(self):
        return self.data.dtype

    def item(self) -> float:
        return float(self.data)

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, dtype={self.data.dtype})"


@dataclass
class OpRecord:
    """One executed operation: kind, operand identities, and its backward."""

    kind: str
    inputs: tuple[Tensor, ...]
    outputs: tuple[Tensor, ...]
    backward: Callable[..., tuple]


class Tape:
    """Ordered log of executed operations for reverse-mode differentiation."""

    def __init__(self):
        self.records: list[OpRecord] = []

    def record(self, kind: str, inputs: Sequence[Tensor],
               outputs: Sequence[Tensor], backward: Callable[..., tuple]) -> None:
        """Append an operation record.

        ``backward`` receives one upstream gradient array per output (zeros
        where an output was unused) and must return one gradient array per
        input, in order, with ``None`` for non-differentiable inputs.
        """
        self.records.append(OpRecord(kind, tuple(inputs), tuple(outputs), backward))

    def gradients(self, loss: Tensor, sources: Iterable[Tensor]) -> dict[Tensor, np.ndarray]:
        """Gradients of a scalar ``loss`` with respect to ``sources``.

        Walks the records in exact reverse execution order, accumulating
        gradients per tensor identity.  Sources never reached by the loss get
        zero gradients of their own shape.
        """
        if loss.size != 1:
            raise TensorError(f"loss must be a scalar, got shape {loss.shape}")
        grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
        for rec in reversed(self.records):
            out_grads = [grads.get(id(o)) for o in rec.outputs]
            if all(g is None for g in out_grads):
                continue
            out_grads = [
                np.zeros_like(o.data) if g is None else g
                for o, g in zip(rec.outputs, out_grads)
            ]
            in_grads = rec.backward(*out_grads)
            for tensor, g in zip(rec.inputs, in_grads):
                if g is None:
                    continue
                if g.shape != tensor.shape:
                    raise TensorError(
                        f"{rec.kind}: gradient shape {g.shape} does not match "
                        f"input shape {tensor.shape}")
                seen = grads.get(id(tensor))
                grads[id(tensor)] = g if seen is None else seen + g
        return {s: grads.get(id(s), np.zeros_like(s.data)) for s in sources}


def _as_batch(x: Tensor) -> tuple[np.ndarray, bool]:
    """View a [c,h,w] or [b,c,h,w] tensor as a 4-d array."""
    if x.ndim == 3:
        return x.data[None], True
    if x.ndim == 4:
        return x.data, False
    raise TensorError(f"expected rank 3 or 4, got shape {x.shape}")


def _unbatch(arr: np.ndarray, squeeze: bool) -> Tensor:
    return Tensor(arr[0] if squeeze else arr)


def _im2col(xb: np.ndarray, kh: int, kw: int, stride: int, pad: int):
    """Gather conv patches into a [c*kh*kw, b*ho*wo] matrix.

    Column index order is (channel, kernel row, kernel col); this fixes the
    reduction layout so results are reproducible run to run.
    """
    b, c, h, w = xb.shape
    if pad:
        xp = np.zeros((b, c, h + 2 * pad, w + 2 * pad), dtype=xb.dtype)
        xp[:, :, pad:pad + h, pad:pad + w] = xb
    else:
        xp = xb
    ho = (h + 2 * pad - kh) // stride + 1
    wo = (w + 2 * pad - kw) // stride + 1
    cols = np.empty((c, kh, kw, b, ho, wo), dtype=xb.dtype)
    for i in range(kh):
        for j in range(kw):
            cols[:, i, j] = xp[:, :, i:i + stride * ho:stride,
                               j:j + stride * wo:stride].transpose(1, 0, 2, 3)
    return cols.reshape(c * kh * kw, b * ho * wo), ho, wo


def _col2im(gcols: np.ndarray, xshape, kh, kw, stride, pad) -> np.ndarray:
    """Scatter-add the transpose of _im2col."""
    b, c, h, w = xshape
    ho = (h + 2 * pad - kh) // stride + 1
    wo = (w + 2 * pad - kw) // stride + 1
    g6 = gcols.reshape(c, kh, kw, b, ho, wo)
    gp = np.zeros((b, c, h + 2 * pad, w + 2 * pad), dtype=gcols.dtype)
    for i in range(kh):
        for j in range(kw):
            gp[:, :, i:i + stride * ho:stride, j:j + stride * wo:stride] += \
                g6[:, i, j].transpose(1, 0, 2, 3)
    if pad:
        return gp[:, :, pad:pad + h, pad:pad + w]
    return gp


def conv2d(x: Tensor, w: Tensor, b: Tensor | None, stride: int = 1,
           pad: int = 0, tape: Tape | None = None) -> Tensor:
    """Cross-correlation of ``x`` [c_in,h,w] with filters ``w`` [c_out,c_in,kh,kw].

    Output spatial size is ``(h + 2*pad - kh)/stride + 1``, which must be a
    positive integer.  Differentiable with respect to input, weights and bias.
    """
    if w.ndim != 4:
        raise TensorError(f"weights must be [c_out,c_in,kh,kw], got {w.shape}")
    xb, squeeze = _as_batch(x)
    c_out, c_in, kh, kw = w.shape
    if xb.shape[1] != c_in:
        raise TensorError(
            f"input channels {xb.shape[1]} (input shape {x.shape}) do not match "
            f"weight channels {c_in} (weight shape {w.shape})")
    if stride < 1 or pad < 0:
        raise TensorError(f"need stride >= 1 and pad >= 0, got {stride}, {pad}")
    h, wid = xb.shape[2], xb.shape[3]
    for name, dim, k in (("height", h, kh), ("width", wid, kw)):
        span = dim + 2 * pad - k
        if span < 0 or span % stride != 0:
            raise TensorError(
                f"kernel does not fit padded input {name} ({dim} + 2*{pad} vs {k} "
                f"at stride {stride})")
    if b is not None and b.shape != (c_out,):
        raise TensorError(f"bias shape {b.shape} does not match c_out {c_out}")

    cols, ho, wo = _im2col(xb, kh, kw, stride, pad)
    w2 = w.data.reshape(c_out, c_in * kh * kw)
    out2 = w2 @ cols  # [c_out, b*ho*wo]
    out = out2.reshape(c_out, xb.shape[0], ho, wo).transpose(1, 0, 2, 3)
    if b is not None:
        out = out + b.data[None, :, None, None]
    result = _unbatch(np.ascontiguousarray(out), squeeze)

    if tape is not None:
        xshape = xb.shape

        def backward(g):
            gb4 = g[None] if squeeze else g
            g2 = gb4.transpose(1, 0, 2, 3).reshape(c_out, -1)
            gw = (g2 @ cols.T).reshape(w.shape)
            gcols = w2.T @ g2
            gx4 = _col2im(gcols, xshape, kh, kw, stride, pad)
            gx = gx4[0] if squeeze else gx4
            gbias = g2.sum(axis=1) if b is not None else None
            return gx, gw, gbias

        inputs = (x, w) if b is None else (x, w, b)

        def backward_adapter(g):
            gx, gw, gbias = backward(g)
            return (gx, gw) if b is None else (gx, gw, gbias)

        tape.record("conv2d", inputs, (result,), backward_adapter)
    return result


def leaky_relu(x: Tensor, slope: float, tape: Tape | None = None) -> Tensor:
    """Elementwise ``v if v > 0 else slope*v`` with slope in (0, 1)."""
    if not 0.0 < slope < 1.0:
        raise TensorError(f"slope must lie in (0, 1), got {slope}")
    pos = x.data > 0
    out = Tensor(np.where(pos, x.data, slope * x.data))
    if tape is not None:
        def backward(g):
            return (np.where(pos, g, slope * g),)
        tape.record("leaky_relu", (x,), (out,), backward)
    return out


def _pool_windows(xb: np.ndarray) -> np.ndarray:
    """[b,c,h,w] -> [b,c,h/2,w/2,4] with window order (0,0),(0,1),(1,0),(1,1)."""
    b, c, h, w = xb.shape
    return (xb.reshape(b, c, h // 2, 2, w // 2, 2)
              .transpose(0, 1, 2, 4, 3, 5)
              .reshape(b, c, h // 2, w // 2, 4))


def max_pool2(x: Tensor, tape: Tape | None = None) -> Tensor:
    """Non-overlapping 2x2 max pooling; ties route to the first element in
    row-major window order."""
    xb, squeeze = _as_batch(x)
    b, c, h, w = xb.shape
    if h % 2 or w % 2:
        raise TensorError(f"max_pool2 needs even spatial dims, got {h}x{w}")
    windows = _pool_windows(xb)
    idx = np.argmax(windows, axis=-1)
    out4 = np.take_along_axis(windows, idx[..., None], axis=-1)[..., 0]
    out = _unbatch(np.ascontiguousarray(out4), squeeze)
    if tape is not None:
        def backward(g):
            gb = g[None] if squeeze else g
            gwin = np.zeros_like(windows)
            np.put_along_axis(gwin, idx[..., None], gb[..., None], axis=-1)
            gx = (gwin.reshape(b, c, h // 2, w // 2, 2, 2)
                      .transpose(0, 1, 2, 4, 3, 5)
                      .reshape(b, c, h, w))
            return (gx[0] if squeeze else gx,)
        tape.record("max_pool2", (x,), (out,), backward)
    return out


def reorg2(x: Tensor, tape: Tape | None = None) -> Tensor:
    """Stack each 2x2 spatial neighborhood into 4 channel blocks.

    Output channel ``(2*dr + dc)*c + k`` holds input channel ``k`` at spatial
    offset (dr, dc): offset blocks are ordered before the original channel
    index.
    """
    xb, squeeze = _as_batch(x)
    b, c, h, w = xb.shape
    if h % 2 or w % 2:
        raise TensorError(f"reorg2 needs even spatial dims, got {h}x{w}")
    out4 = (xb.reshape(b, c, h // 2, 2, w // 2, 2)
              .transpose(0, 3, 5, 1, 2, 4)
              .reshape(b, 4 * c, h // 2, w // 2))
    out = _unbatch(np.ascontiguousarray(out4), squeeze)
    if tape is not None:
        def backward(g):
            gb = g[None] if squeeze else g
            gx = (gb.reshape(b, 2, 2, c, h // 2, w // 2)
                    .transpose(0, 3, 4, 1, 5, 2)
                    .reshape(b, c, h, w))
            return (np.ascontiguousarray(gx[0] if squeeze else gx),)
        tape.record("reorg2", (x,), (out,), backward)
    return out


def concat_channels(a: Tensor, b: Tensor, tape: Tape | None = None) -> Tensor:
    """Concatenate along the channel axis; ``a``'s channels come first."""
    ab, sq_a = _as_batch(a)
    bb, sq_b = _as_batch(b)
    if sq_a != sq_b:
        raise TensorError(f"rank mismatch: {a.shape} vs {b.shape}")
    if ab.shape[0] != bb.shape[0] or ab.shape[2:] != bb.shape[2:]:
        raise TensorError(f"spatial/batch mismatch: {a.shape} vs {b.shape}")
    ca = ab.shape[1]
    out = _unbatch(np.concatenate([ab, bb], axis=1), sq_a)
    if tape is not None:
        def backward(g):
            gb4 = g[None] if sq_a else g
            ga, gb_ = gb4[:, :ca], gb4[:, ca:]
            if sq_a:
                ga, gb_ = ga[0], gb_[0]
            return np.ascontiguousarray(ga), np.ascontiguousarray(gb_)
        tape.record("concat_channels", (a, b), (out,), backward)
    return out


def _check_bn_params(c: int, *params: Tensor) -> None:
    for p in params:
        if p.shape != (c,):
            raise TensorError(
                f"per-channel parameter shape {p.shape} does not match {c} channels")


def batch_norm_infer(x: Tensor, mean: Tensor, var: Tensor, gamma: Tensor,
                     beta: Tensor, eps: float, tape: Tape | None = None) -> Tensor:
    """Per-channel ``(x - mean)/sqrt(var + eps) * gamma + beta`` with fixed
    statistics.  Differentiable w.r.t. x, gamma, beta."""
    if eps <= 0:
        raise TensorError(f"eps must be positive, got {eps}")
    if np.any(var.data < 0):
        raise TensorError("variance must be non-negative")
    xb, squeeze = _as_batch(x)
    c = xb.shape[1]
    _check_bn_params(c, mean, var, gamma, beta)
    inv = 1.0 / np.sqrt(var.data + eps)
    xhat = (xb - mean.data[None, :, None, None]) * inv[None, :, None, None]
    out4 = xhat * gamma.data[None, :, None, None] + beta.data[None, :, None, None]
    out = _unbatch(out4, squeeze)
    if tape is not None:
        def backward(g):
            gb = g[None] if squeeze else g
            gx = gb * (gamma.data * inv)[None, :, None, None]
            ggamma = (gb * xhat).sum(axis=(0, 2, 3))
            gbeta = gb.sum(axis=(0, 2, 3))
            return (gx[0] if squeeze else gx), None, None, ggamma, gbeta
        tape.record("batch_norm_infer", (x, mean, var, gamma, beta), (out,), backward)
    return out


def batch_norm_train(x: Tensor, gamma: Tensor, beta: Tensor, eps: float,
                     tape: Tape | None = None) -> tuple[Tensor, np.ndarray, np.ndarray]:
    """Batch normalization with statistics computed from ``x`` itself.

    Statistics reduce over every axis except the channel axis.  Returns the
    normalized tensor plus the batch mean and (biased) variance so the caller
    can fold them into running averages; gradients flow through the batch
    statistics but never through the running averages.
    """
    if eps <= 0:
        raise TensorError(f"eps must be positive, got {eps}")
    xb, squeeze = _as_batch(x)
    c = xb.shape[1]
    _check_bn_params(c, gamma, beta)
    axes = (0, 2, 3)
    m = xb.shape[0] * xb.shape[2] * xb.shape[3]
    mean = xb.mean(axis=axes)
    var = ((xb - mean[None, :, None, None]) ** 2).mean(axis=axes)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = (xb - mean[None, :, None, None]) * inv[None, :, None, None]
    out4 = xhat * gamma.data[None, :, None, None] + beta.data[None, :, None, None]
    out = _unbatch(out4, squeeze)
    if tape is not None:
        def backward(g):
            gb = g[None] if squeeze else g
            ggamma = (gb * xhat).sum(axis=axes)
            gbeta = gb.sum(axis=axes)
            gxhat = gb * gamma.data[None, :, None, None]
            s1 = gxhat.sum(axis=axes)
            s2 = (gxhat * xhat).sum(axis=axes)
            gx = (inv[None, :, None, None] / m) * (
                m * gxhat
                - s1[None, :, None, None]
                - xhat * s2[None, :, None, None])
            return (gx[0] if squeeze else gx), ggamma, gbeta
        tape.record("batch_norm_train", (x, gamma, beta), (out,), backward)
    return out, mean, var


def _same_shape(a: Tensor, b: Tensor, op: str) -> None:
    if a.shape != b.shape:
        raise TensorError(f"{op}: shape mismatch {a.shape} vs {b.shape}")


def add(a: Tensor, b: Tensor, tape: Tape | None = None) -> Tensor:
    _same_shape(a, b, "add")
    out = Tensor(a.data + b.data)
    if tape is not None:
        tape.record("add", (a, b), (out,), lambda g: (g, g))
    return out


def sub(a: Tensor, b: Tensor, tape: Tape | None = None) -> Tensor:
    _same_shape(a, b, "sub")
    out = Tensor(a.data - b.data)
    if tape is not None:
        tape.record("sub", (a, b), (out,), lambda g: (g, -g))
    return out


def mul(a: Tensor, b: Tensor, tape: Tape | None = None) -> Tensor:
    _same_shape(a, b, "mul")
    out = Tensor(a.data * b.data)
    if tape is not None:
        tape.record("mul", (a, b), (out,), lambda g: (g * b.data, g * a.data))
    return out


def scale(x: Tensor, k: float, tape: Tape | None = None) -> Tensor:
    out = Tensor(x.data * k)
    if tape is not None:
        tape.record("scale", (x,), (out,), lambda g: (g * k,))
    return out


def sum_all(x: Tensor, tape: Tape | None = None) -> Tensor:
    """Sum of all elements, as a 0-d tensor."""
    out = Tensor(np.asarray(x.data.sum()))
    if tape is not None:
        tape.record("sum_all", (x,), (out,),
                    lambda g: (np.full_like(x.data, float(g)),))
    return out


def take_range(x: Tensor, start: int, shape: tuple[int, ...],
               tape: Tape | None = None) -> Tensor:
    """Slice ``prod(shape)`` elements from the flattened tensor and reshape.

    Lets a harness expose one flat parameter vector and carve per-layer
    pieces out of it without breaking the gradient chain.
    """
    count = int(np.prod(shape))
    flat = x.data.reshape(-1)
    if start < 0 or start + count > flat.size:
        raise TensorError(
            f"slice [{start}, {start + count}) out of range for {flat.size} elements")
    out = Tensor(flat[start:start + count].reshape(shape).copy())
    if tape is not None:
        def backward(g):
            gx = np.zeros_like(flat)
            gx[start:start + count] = g.reshape(-1)
            return (gx.reshape(x.shape),)
        tape.record("take_range", (x,), (out,), backward)
    return out


def finite_diff_check(lossfn: Callable[[Tensor, Tape | None], Tensor],
                      point: Tensor, eps: float) -> float:
    """Compare tape gradients against central finite differences.

    ``lossfn(x, tape)`` must return a scalar tensor built from recorded
    operations.  Returns the maximum over coordinates of
    ``|analytic - central| / max(|analytic|, |central|, 1e-8)``.
    """
    if eps <= 0:
        raise TensorError(f"eps must be positive, got {eps}")
    tape = Tape()
    out = lossfn(point, tape)
    analytic = tape.gradients(out, [point])[point].reshape(-1)

    base = point.data.reshape(-1)
    max_rel = 0.0
    for i in range(base.size):
        probes = []
        for sign in (1.0, -1.0):
            shifted = base.copy()
            shifted[i] += sign * eps
            val = lossfn(Tensor(shifted.reshape(point.shape)), None).item()
            if not np.isfinite(val):
                raise TensorError(f"non-finite loss at perturbed coordinate {i}")
            probes.append(val)
        central = (probes[0] - probes[1]) / (2.0 * eps)
        rel = abs(analytic[i] - central) / max(abs(analytic[i]), abs(central), 1e-8)
        max_rel = max(max_rel, rel)
    return max_rel
