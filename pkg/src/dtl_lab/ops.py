"""Differentiable primitives.

Shape rules, per op:

* ``matmul(a, b)``: ``a[..., n, k] @ b[..., k, m]`` with numpy batch broadcasting.
* ``add``/``mul``: numpy broadcasting; gradients are summed back to input shape.
* ``reshape``/``transpose``/``expand``: pure layout changes.
* ``concat_tokens``/``split_tokens``: join or slice along the token axis (-2).
* ``softmax``: last axis.  ``layer_norm``: last axis with learnable gamma/beta.
* ``depthwise_conv2d(x[..., C, H, W], k[C, kh, kw], b[C])``: stride 1, odd kernel,
  zero padding so H and W are preserved.
* ``cross_entropy(logits[B, K], labels)``: mean over the batch, returns a scalar.
"""

from __future__ import annotations

import math
from typing import Sequence

import numpy as np
from scipy.special import erf

from .tensor import Op, Tensor, record, register

_SQRT2 = math.sqrt(2.0)
_INV_SQRT_2PI = 1.0 / math.sqrt(2.0 * math.pi)


def _unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    if grad.shape == shape:
        return grad
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, extent in enumerate(shape):
        if extent == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


def _broadcast_or_raise(kind: str, shapes: list[tuple[int, ...]]) -> tuple[int, ...]:
    try:
        return np.broadcast_shapes(*shapes)
    except ValueError:
        raise ValueError(f"{kind}: shapes {[list(s) for s in shapes]} do not broadcast") from None


def sigmoid(x: np.ndarray) -> np.ndarray:
    """Overflow-free logistic function (separate branches for x >= 0 and x < 0)."""
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    e = np.exp(x[~pos])
    out[~pos] = e / (1.0 + e)
    return out


@register
class MatMul(Op):
    kind = "matmul"

    def check(self, shapes, attrs):
        a, b = shapes
        if len(a) < 2 or len(b) < 2 or a[-1] != b[-2]:
            raise ValueError(f"matmul: incompatible shapes {list(a)} @ {list(b)}")
        _broadcast_or_raise("matmul", [a[:-2], b[:-2]])

    def forward(self, a, b):
        return np.matmul(a, b), {"a_shape": a.shape, "b_shape": b.shape}

    def saves(self, needs):
        keep = []
        if needs[1]:
            keep.append(0)
        if needs[0]:
            keep.append(1)
        return tuple(keep)

    def backward(self, grad, saved, ctx, needs):
        it = iter(saved)
        a = next(it) if needs[1] else None
        b = next(it) if needs[0] else None
        ga = gb = None
        if needs[0]:
            ga = _unbroadcast(np.matmul(grad, np.swapaxes(b, -1, -2)), ctx["a_shape"])
        if needs[1]:
            gb = _unbroadcast(np.matmul(np.swapaxes(a, -1, -2), grad), ctx["b_shape"])
        return ga, gb


@register
class Add(Op):
    kind = "add"

    def check(self, shapes, attrs):
        _broadcast_or_raise("add", shapes)

    def forward(self, a, b):
        return a + b, {"a_shape": a.shape, "b_shape": b.shape}

    def backward(self, grad, saved, ctx, needs):
        return (
            _unbroadcast(grad, ctx["a_shape"]) if needs[0] else None,
            _unbroadcast(grad, ctx["b_shape"]) if needs[1] else None,
        )


@register
class Mul(Op):
    kind = "mul"

    def check(self, shapes, attrs):
        _broadcast_or_raise("mul", shapes)

    def forward(self, a, b):
        return a * b, {"a_shape": a.shape, "b_shape": b.shape}

    def saves(self, needs):
        keep = []
        if needs[0]:
            keep.append(1)
        if needs[1]:
            keep.append(0)
        return tuple(keep)

    def backward(self, grad, saved, ctx, needs):
        it = iter(saved)
        b = next(it) if needs[0] else None
        a = next(it) if needs[1] else None
        return (
            _unbroadcast(grad * b, ctx["a_shape"]) if needs[0] else None,
            _unbroadcast(grad * a, ctx["b_shape"]) if needs[1] else None,
        )


@register
class Scale(Op):
    kind = "scale"

    def forward(self, a, factor):
        return a * np.asarray(factor, dtype=a.dtype), {"factor": factor}

    def backward(self, grad, saved, ctx, needs):
        return (grad * np.asarray(ctx["factor"], dtype=grad.dtype),)


@register
class Sum(Op):
    kind = "sum"

    def forward(self, a):
        return np.asarray(a.sum(), dtype=a.dtype), {"shape": a.shape}

    def backward(self, grad, saved, ctx, needs):
        return (np.broadcast_to(grad, ctx["shape"]).copy(),)


@register
class Reshape(Op):
    kind = "reshape"

    def check(self, shapes, attrs):
        (shape,) = shapes
        target = tuple(attrs["shape"])
        if -1 not in target and math.prod(target) != math.prod(shape):
            raise ValueError(f"reshape: cannot view {list(shape)} as {list(target)}")

    def forward(self, a, shape):
        return a.reshape(shape), {"shape": a.shape}

    def backward(self, grad, saved, ctx, needs):
        return (grad.reshape(ctx["shape"]),)


@register
class Transpose(Op):
    kind = "transpose"

    def check(self, shapes, attrs):
        if sorted(attrs["axes"]) != list(range(len(shapes[0]))):
            raise ValueError(f"transpose: axes {attrs['axes']} invalid for shape {list(shapes[0])}")

    def forward(self, a, axes):
        return np.ascontiguousarray(np.transpose(a, axes)), {"inv": tuple(np.argsort(axes))}

    def backward(self, grad, saved, ctx, needs):
        return (np.ascontiguousarray(np.transpose(grad, ctx["inv"])),)


@register
class Expand(Op):
    kind = "expand"

    def check(self, shapes, attrs):
        try:
            np.broadcast_shapes(shapes[0], tuple(attrs["shape"]))
        except ValueError:
            raise ValueError(f"expand: cannot broadcast {list(shapes[0])} to {list(attrs['shape'])}") from None

    def forward(self, a, shape):
        return np.broadcast_to(a, shape).copy(), {"shape": a.shape}

    def backward(self, grad, saved, ctx, needs):
        return (_unbroadcast(grad, ctx["shape"]),)


@register
class ConcatTokens(Op):
    kind = "concat_tokens"

    def check(self, shapes, attrs):
        ref = shapes[0]
        for s in shapes[1:]:
            if len(s) != len(ref) or s[:-2] != ref[:-2] or s[-1] != ref[-1]:
                raise ValueError(f"concat_tokens: shapes {[list(x) for x in shapes]} disagree off the token axis")

    def forward(self, *xs):
        return np.concatenate(xs, axis=-2), {"sizes": tuple(x.shape[-2] for x in xs)}

    def backward(self, grad, saved, ctx, needs):
        bounds = np.cumsum(ctx["sizes"])[:-1]
        return tuple(np.ascontiguousarray(p) for p in np.split(grad, bounds, axis=-2))


@register
class SplitTokens(Op):
    kind = "split_tokens"

    def check(self, shapes, attrs):
        n = shapes[0][-2]
        if not 0 <= attrs["start"] < attrs["stop"] <= n:
            raise ValueError(f"split_tokens: range [{attrs['start']}, {attrs['stop']}) invalid for {n} tokens")

    def forward(self, a, start, stop):
        return np.ascontiguousarray(a[..., start:stop, :]), {"shape": a.shape, "start": start, "stop": stop}

    def backward(self, grad, saved, ctx, needs):
        full = np.zeros(ctx["shape"], dtype=grad.dtype)
        full[..., ctx["start"] : ctx["stop"], :] = grad
        return (full,)


@register
class Softmax(Op):
    kind = "softmax"

    def check(self, shapes, attrs):
        if not shapes[0] or shapes[0][-1] == 0:
            raise ValueError("softmax: empty last axis")

    def forward(self, a):
        shifted = a - a.max(axis=-1, keepdims=True)
        e = np.exp(shifted)
        return e / e.sum(axis=-1, keepdims=True), {}

    def saves(self, needs):
        return (-1,)

    def backward(self, grad, saved, ctx, needs):
        (y,) = saved
        return (y * (grad - (grad * y).sum(axis=-1, keepdims=True)),)


@register
class LayerNorm(Op):
    kind = "layer_norm"

    def check(self, shapes, attrs):
        x, g, b = shapes
        if not x or x[-1] == 0:
            raise ValueError("layer_norm: empty normalized axis")
        if g != (x[-1],) or b != (x[-1],):
            raise ValueError(f"layer_norm: gamma/beta {list(g)}, {list(b)} do not match width {x[-1]}")

    def forward(self, x, gamma, beta, eps):
        mu = x.mean(axis=-1, keepdims=True)
        var = ((x - mu) ** 2).mean(axis=-1, keepdims=True)
        xhat = (x - mu) / np.sqrt(var + eps)
        return xhat * gamma + beta, {"eps": eps, "shape": x.shape}

    def saves(self, needs):
        if needs[0]:
            return (0, 1)
        if needs[1]:
            return (0,)
        return ()

    def backward(self, grad, saved, ctx, needs):
        x = saved[0] if (needs[0] or needs[1]) else None
        gx = gg = gb = None
        if x is not None:
            mu = x.mean(axis=-1, keepdims=True)
            var = ((x - mu) ** 2).mean(axis=-1, keepdims=True)
            rstd = 1.0 / np.sqrt(var + ctx["eps"])
            xhat = (x - mu) * rstd
            if needs[1]:
                gg = (grad * xhat).reshape(-1, x.shape[-1]).sum(axis=0)
            if needs[0]:
                gamma = saved[1]
                gxhat = grad * gamma
                gx = rstd * (
                    gxhat
                    - gxhat.mean(axis=-1, keepdims=True)
                    - xhat * (gxhat * xhat).mean(axis=-1, keepdims=True)
                )
        if needs[2]:
            gb = grad.reshape(-1, grad.shape[-1]).sum(axis=0)
        return gx, gg, gb


@register
class Gelu(Op):
    kind = "gelu"

    def forward(self, x):
        return 0.5 * x * (1.0 + erf(x / _SQRT2)), {}

    def saves(self, needs):
        return (0,)

    def backward(self, grad, saved, ctx, needs):
        (x,) = saved
        cdf = 0.5 * (1.0 + erf(x / _SQRT2))
        pdf = _INV_SQRT_2PI * np.exp(-0.5 * x * x)
        return (grad * (cdf + x * pdf),)


@register
class Swish(Op):
    kind = "swish"

    def check(self, shapes, attrs):
        if not attrs["beta"] > 0:
            raise ValueError(f"swish: beta must be positive, got {attrs['beta']}")

    def forward(self, x, beta):
        return x * sigmoid(beta * x), {"beta": beta}

    def saves(self, needs):
        return (0,)

    def backward(self, grad, saved, ctx, needs):
        (x,) = saved
        beta = ctx["beta"]
        s = sigmoid(beta * x)
        return (grad * (s + beta * x * s * (1.0 - s)),)


def _pad_hw(x: np.ndarray, ph: int, pw: int) -> np.ndarray:
    pad = [(0, 0)] * (x.ndim - 2) + [(ph, ph), (pw, pw)]
    return np.pad(x, pad)


@register
class DepthwiseConv2d(Op):
    kind = "depthwise_conv2d"

    def check(self, shapes, attrs):
        x, k, b = shapes
        if len(x) < 3 or len(k) != 3:
            raise ValueError(f"depthwise_conv2d: expected x[..., C, H, W] and k[C, kh, kw], got {list(x)}, {list(k)}")
        if k[1] % 2 == 0 or k[2] % 2 == 0:
            raise ValueError(f"depthwise_conv2d: kernel {k[1]}x{k[2]} must be odd-sized to preserve H, W")
        if k[0] != x[-3] or b != (x[-3],):
            raise ValueError(f"depthwise_conv2d: {x[-3]} channels but kernel {list(k)}, bias {list(b)}")

    def forward(self, x, k, b):
        kh, kw = k.shape[1:]
        ph, pw = kh // 2, kw // 2
        H, W = x.shape[-2:]
        xp = _pad_hw(x, ph, pw)
        out = np.zeros_like(x)
        for u in range(kh):
            for v in range(kw):
                out = out + xp[..., u : u + H, v : v + W] * k[:, u, v][:, None, None]
        out = out + b[:, None, None]
        return out, {"kshape": k.shape}

    def saves(self, needs):
        keep = []
        if needs[1]:
            keep.append(0)
        if needs[0]:
            keep.append(1)
        return tuple(keep)

    def backward(self, grad, saved, ctx, needs):
        it = iter(saved)
        x = next(it) if needs[1] else None
        k = next(it) if needs[0] else None
        C, kh, kw = ctx["kshape"]
        ph, pw = kh // 2, kw // 2
        H, W = grad.shape[-2:]
        gx = gk = gb = None
        if needs[0]:
            gp = _pad_hw(grad, ph, pw)
            gx = np.zeros_like(grad)
            for u in range(kh):
                for v in range(kw):
                    gx = gx + gp[..., kh - 1 - u : kh - 1 - u + H, kw - 1 - v : kw - 1 - v + W] * k[:, u, v][:, None, None]
        if needs[1]:
            xp = _pad_hw(x, ph, pw)
            gk = np.zeros(ctx["kshape"], dtype=grad.dtype)
            lead = tuple(range(grad.ndim - 3))
            for u in range(kh):
                for v in range(kw):
                    gk[:, u, v] = (xp[..., u : u + H, v : v + W] * grad).sum(axis=lead + (-2, -1))
        if needs[2]:
            lead = tuple(range(grad.ndim - 3))
            gb = grad.sum(axis=lead + (-2, -1))
        return gx, gk, gb


@register
class CrossEntropy(Op):
    kind = "cross_entropy"

    def check(self, shapes, attrs):
        (logits,) = shapes
        labels = attrs["labels"]
        if len(logits) != 2 or labels.shape != (logits[0],):
            raise ValueError(f"cross_entropy: logits {list(logits)} vs labels {list(labels.shape)}")
        if labels.size and (labels.min() < 0 or labels.max() >= logits[1]):
            raise ValueError(f"cross_entropy: labels outside [0, {logits[1]})")

    def forward(self, logits, labels):
        shifted = logits - logits.max(axis=-1, keepdims=True)
        logz = np.log(np.exp(shifted).sum(axis=-1))
        nll = logz - shifted[np.arange(len(labels)), labels]
        return np.asarray(nll.mean(), dtype=logits.dtype), {"labels": labels}

    def saves(self, needs):
        return (0,)

    def backward(self, grad, saved, ctx, needs):
        (logits,) = saved
        labels = ctx["labels"]
        shifted = logits - logits.max(axis=-1, keepdims=True)
        p = np.exp(shifted)
        p /= p.sum(axis=-1, keepdims=True)
        p[np.arange(len(labels)), labels] -= 1.0
        return (p * (grad / len(labels)),)


# ---------------------------------------------------------------------------
# functional front end


def matmul(a: Tensor, b: Tensor) -> Tensor:
    return record("matmul", [a, b])


def add(a: Tensor, b: Tensor) -> Tensor:
    return record("add", [a, b])


def mul(a: Tensor, b: Tensor) -> Tensor:
    return record("mul", [a, b])


def scale(a: Tensor, factor: float) -> Tensor:
    return record("scale", [a], factor=float(factor))


def sum(a: Tensor) -> Tensor:  # noqa: A001 - mirrors the primitive name
    return record("sum", [a])


def reshape(a: Tensor, shape: Sequence[int]) -> Tensor:
    return record("reshape", [a], shape=tuple(shape))


def transpose(a: Tensor, axes: Sequence[int]) -> Tensor:
    return record("transpose", [a], axes=tuple(axes))


def expand(a: Tensor, shape: Sequence[int]) -> Tensor:
    return record("expand", [a], shape=tuple(shape))


def concat_tokens(parts: Sequence[Tensor]) -> Tensor:
    return record("concat_tokens", list(parts))


def split_tokens(a: Tensor, start: int, stop: int) -> Tensor:
    return record("split_tokens", [a], start=int(start), stop=int(stop))


def softmax(a: Tensor) -> Tensor:
    return record("softmax", [a])


def layer_norm(x: Tensor, gamma: Tensor, beta: Tensor, eps: float = 1e-6) -> Tensor:
    return record("layer_norm", [x, gamma, beta], eps=eps)


def gelu(x: Tensor) -> Tensor:
    return record("gelu", [x])


def swish(x: Tensor, beta: float) -> Tensor:
    return record("swish", [x], beta=float(beta))


def depthwise_conv2d(x: Tensor, kernel: Tensor, bias: Tensor) -> Tensor:
    return record("depthwise_conv2d", [x, kernel, bias])


def cross_entropy(logits: Tensor, labels: np.ndarray) -> Tensor:
    return record("cross_entropy", [logits], labels=np.asarray(labels, dtype=np.int64))


def linear(x: Tensor, w: Tensor, b: Tensor | None = None) -> Tensor:
    y = matmul(x, w)
    return y if b is None else add(y, b)
