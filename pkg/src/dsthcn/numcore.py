"""Dense array kernels with hand-derived adjoints.

Feature maps are numpy arrays laid out channels-first, ``(..., C, T, V)``,
where the optional leading axes are batch (and, inside a block, the spatial
topology index).  Each differentiable kernel is a ``*_forward`` /
``*_backward`` pair; the forward returns whatever the backward needs.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

BN_EPS = 1e-5
BN_MOMENTUM = 0.1


class DimensionError(ValueError):
    """Array extents do not line up."""


class InputError(ValueError):
    """An argument is outside its admissible range."""


class NumericError(FloatingPointError):
    """A non-finite value appeared."""


@dataclass
class Param:
    """A learned array together with its accumulated gradient."""

    value: np.ndarray
    decay: bool = True
    grad: np.ndarray = field(init=False)

    def __post_init__(self):
        self.grad = np.zeros_like(self.value)

    @property
    def shape(self):
        return self.value.shape

    def zero_grad(self):
        self.grad[...] = 0


def check_finite(x, what="array"):
    if not np.all(np.isfinite(x)):
        raise NumericError(f"non-finite values in {what}")
    return x


def unbroadcast(grad, shape):
    """Sum ``grad`` down to ``shape`` (the inverse of numpy broadcasting)."""
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, n in enumerate(shape):
        if n == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


# ---------------------------------------------------------------------------
# axis contraction (X . M on the vertex or time axis)


def _rows(x, axis):
    # (..., C, T, V) -> (..., C*T, V) for the vertex axis, (..., C*V, T) for time
    c, t, v = x.shape[-3:]
    if axis == "vertex":
        return x.reshape(x.shape[:-3] + (c * t, v))
    return np.swapaxes(x, -1, -2).reshape(x.shape[:-3] + (c * v, t))


def _unrows(r, c, t, v, axis):
    if axis == "vertex":
        return r.reshape(r.shape[:-2] + (c, t, v))
    return np.swapaxes(r.reshape(r.shape[:-2] + (c, v, t)), -1, -2)


def contract_axis(x, m, axis="vertex"):
    """Multiply the vertex or time axis of ``x`` by a square matrix.

    For ``axis="vertex"``: ``out[..., c, t, w] = sum_v x[..., c, t, v] m[v, w]``.
    For ``axis="time"``:   ``out[..., c, t, v] = sum_s x[..., c, s, v] m[s, t]``.
    ``m`` may carry leading batch axes; they broadcast against ``x``'s.
    """
    x = np.asarray(x)
    m = np.asarray(m)
    if m.ndim < 2 or m.shape[-1] != m.shape[-2]:
        raise DimensionError(f"contraction matrix must be square, got {m.shape}")
    if x.ndim < 3:
        raise DimensionError(f"expected (..., C, T, V) input, got {x.shape}")
    if axis not in ("vertex", "time"):
        raise InputError(f"unknown axis {axis!r}")
    extent = x.shape[-1] if axis == "vertex" else x.shape[-2]
    if extent != m.shape[-1]:
        raise DimensionError(f"{axis} extent {extent} vs matrix {m.shape}")
    return _unrows(_rows(x, axis) @ m, *x.shape[-3:], axis)


def contract_backward(x, m, dy, axis="vertex", need_op=False):
    """Return ``(dx, dm)``; ``dm`` is None unless ``need_op``."""
    c, t, v = x.shape[-3:]
    dr = _rows(dy, axis)
    dx = unbroadcast(_unrows(dr @ np.swapaxes(m, -1, -2), c, t, v, axis), x.shape)
    dm = None
    if need_op:
        dm = unbroadcast(np.swapaxes(_rows(x, axis), -1, -2) @ dr, m.shape)
    return dx, dm


# ---------------------------------------------------------------------------
# pointwise channel map (1x1 convolution)


def channel_map(x, theta, bias=None):
    """``out[..., d, t, v] = sum_c x[..., c, t, v] theta[c, d] + bias[d]``."""
    theta = np.asarray(theta)
    if theta.ndim != 2 or x.shape[-3] != theta.shape[0]:
        raise DimensionError(f"theta {theta.shape} does not map {x.shape[-3]} channels")
    out = np.moveaxis(np.tensordot(x, theta, axes=([x.ndim - 3], [0])), -1, -3)
    if bias is not None:
        if np.shape(bias) != (theta.shape[1],):
            raise DimensionError(f"bias shape {np.shape(bias)} vs {theta.shape[1]} outputs")
        out = out + bias[:, None, None]
    return out


def channel_map_backward(x, theta, dy):
    """Return ``(dx, dtheta, dbias)``."""
    dx = np.moveaxis(np.tensordot(dy, theta, axes=([dy.ndim - 3], [1])), -1, -3)
    axes = [i for i in range(x.ndim) if i != x.ndim - 3]
    dtheta = np.tensordot(x, dy, axes=(axes, axes))
    dbias = dy.sum(axis=tuple(axes))
    return dx, dtheta, dbias


# ---------------------------------------------------------------------------
# temporal convolution and pooling


def _out_frames(t, stride):
    return (t - 1) // stride + 1


def _time_windows(xp, k, dilation, stride, t_out):
    # (..., C, T_pad, V) -> (..., C, k, T_out, V)
    last = (t_out - 1) * stride + 1
    return np.stack(
        [xp[..., j * dilation : j * dilation + last : stride, :] for j in range(k)],
        axis=-3,
    )


def temporal_conv(x, weight, bias=None, dilation=1, stride=1):
    """Convolve along time, independently per joint, with 'same' zero padding.

    ``weight`` has shape ``(C_out, C_in, k)`` with odd ``k``; the output has
    ``ceil(T / stride)`` frames.
    """
    c_out, c_in, k = weight.shape
    if k % 2 != 1:
        raise InputError(f"temporal kernel must be odd, got {k}")
    if x.shape[-3] != c_in:
        raise DimensionError(f"weight expects {c_in} channels, input has {x.shape[-3]}")
    t = x.shape[-2]
    if t < 1:
        raise DimensionError("empty time axis")
    pad = dilation * (k - 1) // 2
    widths = [(0, 0)] * (x.ndim - 2) + [(pad, pad), (0, 0)]
    xp = np.pad(x, widths)
    t_out = _out_frames(t, stride)
    cols = _time_windows(xp, k, dilation, stride, t_out)
    nd = cols.ndim
    out = np.tensordot(cols, weight, axes=([nd - 4, nd - 3], [1, 2]))
    out = np.moveaxis(out, -1, -3)
    if bias is not None:
        out = out + bias[:, None, None]
    return out, (cols, x.shape, pad)


def temporal_conv_backward(cache, weight, dy, dilation=1, stride=1):
    """Return ``(dx, dweight, dbias)``."""
    cols, x_shape, pad = cache
    k = weight.shape[2]
    nd = cols.ndim
    lead = list(range(nd - 4))
    # dweight[o, i, j] = sum cols[..., i, j, t, v] dy[..., o, t, v]
    dweight = np.tensordot(dy, cols, axes=(lead + [nd - 3, nd - 2], lead + [nd - 2, nd - 1]))
    dbias = dy.sum(axis=tuple(i for i in range(dy.ndim) if i != dy.ndim - 3))
    # dcols[..., i, j, t, v] = sum_o weight[o, i, j] dy[..., o, t, v]
    dcols = np.tensordot(dy, weight, axes=([dy.ndim - 3], [0]))  # (..., T_out, V, C_in, k)
    dcols = np.moveaxis(dcols, [-2, -1], [-4, -3])  # (..., C_in, k, T_out, V)
    t_out = dy.shape[-2]
    last = (t_out - 1) * stride + 1
    padded = list(x_shape)
    padded[-2] += 2 * pad
    dxp = np.zeros(padded, dtype=dy.dtype)
    for j in range(k):
        dxp[..., j * dilation : j * dilation + last : stride, :] += dcols[..., j, :, :]
    dx = dxp[..., pad : pad + x_shape[-2], :]
    return dx, dweight, dbias


def max_pool_time(x, kernel=3, stride=1):
    """Max over a window of ``kernel`` frames, padded so the output has ceil(T/stride) frames."""
    pad = (kernel - 1) // 2
    widths = [(0, 0)] * (x.ndim - 2) + [(pad, pad), (0, 0)]
    xp = np.pad(x, widths, constant_values=-np.inf)
    t_out = _out_frames(x.shape[-2], stride)
    cols = _time_windows(xp, kernel, 1, stride, t_out)  # (..., C, k, T_out, V)
    arg = cols.argmax(axis=-3)
    out = np.take_along_axis(cols, arg[..., None, :, :], axis=-3)[..., 0, :, :]
    return out, (arg, x.shape, pad, kernel)


def max_pool_time_backward(cache, dy, stride=1):
    arg, x_shape, pad, kernel = cache
    padded = list(x_shape)
    padded[-2] += 2 * pad
    dxp = np.zeros(padded, dtype=dy.dtype)
    t_out = dy.shape[-2]
    last = (t_out - 1) * stride + 1
    for j in range(kernel):
        dxp[..., j : j + last : stride, :] += np.where(arg == j, dy, 0)
    return dxp[..., pad : pad + x_shape[-2], :]


# ---------------------------------------------------------------------------
# batch normalisation


def batch_norm(x, gamma, beta, running_mean, running_var, training,
               momentum=BN_MOMENTUM, eps=BN_EPS):
    """Per-channel normalisation over every axis except the channel axis (-3).

    In training mode the running statistics are updated in place.
    """
    if x.size == 0:
        raise DimensionError("batch norm over an empty batch")
    axes = tuple(i for i in range(x.ndim) if i != x.ndim - 3)
    shape = (-1, 1, 1)
    if training:
        mean = x.mean(axis=axes)
        var = x.var(axis=axes)
        n = x.size // x.shape[-3]
        running_mean *= 1 - momentum
        running_mean += momentum * mean
        running_var *= 1 - momentum
        running_var += momentum * var * (n / max(n - 1, 1))
    else:
        mean, var = running_mean, running_var
    inv_std = 1.0 / np.sqrt(var + eps)
    xhat = (x - mean.reshape(shape)) * inv_std.reshape(shape)
    out = gamma.reshape(shape) * xhat + beta.reshape(shape)
    return out, (xhat, inv_std, axes, training)


def batch_norm_backward(cache, gamma, dy):
    """Return ``(dx, dgamma, dbeta)``."""
    xhat, inv_std, axes, training = cache
    shape = (-1, 1, 1)
    dgamma = (dy * xhat).sum(axis=axes)
    dbeta = dy.sum(axis=axes)
    dxhat = dy * gamma.reshape(shape)
    if not training:
        return dxhat * inv_std.reshape(shape), dgamma, dbeta
    n = xhat.size // xhat.shape[-3]
    dx = (
        n * dxhat
        - dxhat.sum(axis=axes).reshape(shape)
        - xhat * (dxhat * xhat).sum(axis=axes).reshape(shape)
    ) * (inv_std / n).reshape(shape)
    return dx, dgamma, dbeta


# ---------------------------------------------------------------------------
# activations


def relu(x):
    return np.maximum(x, 0)


def sigmoid(x):
    return 0.5 * (np.tanh(0.5 * x) + 1.0)


def tanh(x):
    return np.tanh(x)


def activation(x, kind):
    try:
        fn = {"relu": relu, "sigmoid": sigmoid, "tanh": tanh}[kind]
    except KeyError:
        raise InputError(f"unknown activation {kind!r}") from None
    return fn(x)


def activation_backward(x, y, dy, kind):
    """Adjoint given input ``x`` and output ``y``."""
    if kind == "relu":
        return dy * (x > 0)
    if kind == "sigmoid":
        return dy * y * (1 - y)
    if kind == "tanh":
        return dy * (1 - y * y)
    raise InputError(f"unknown activation {kind!r}")


# ---------------------------------------------------------------------------
# loss


def softmax(logits):
    z = logits - logits.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


def softmax_cross_entropy(logits, labels):
    """Mean cross entropy over the batch and its gradient w.r.t. the logits."""
    logits = np.asarray(logits)
    labels = np.asarray(labels, dtype=np.int64)
    if logits.ndim != 2 or logits.shape[1] < 2:
        raise DimensionError(f"logits must be (B, K>=2), got {logits.shape}")
    b, k = logits.shape
    if labels.shape != (b,):
        raise DimensionError(f"{labels.shape[0]} labels for {b} rows")
    if np.any(labels < 0) or np.any(labels >= k):
        raise InputError(f"labels must lie in [0, {k})")
    z = logits - logits.max(axis=1, keepdims=True)
    logsum = np.log(np.exp(z).sum(axis=1))
    rows = np.arange(b)
    loss = float(np.mean(logsum - z[rows, labels]))
    grad = np.exp(z - logsum[:, None])
    grad[rows, labels] -= 1.0
    grad /= b
    return loss, grad


# ---------------------------------------------------------------------------
# finite-difference verification


@dataclass
class GradCheckReport:
    errors: dict
    tolerance: float

    @property
    def max_error(self):
        return max(self.errors.values(), default=0.0)

    @property
    def ok(self):
        return self.max_error < self.tolerance

    def __str__(self):
        worst = max(self.errors, key=self.errors.get) if self.errors else "-"
        return f"max rel. error {self.max_error:.3e} ({worst}), tol {self.tolerance:g}"


def relative_error(analytic, numeric, atol=1e-8):
    """Max-norm relative error; gradients that both stay under ``atol`` count as zero."""
    scale = max(np.abs(analytic).max(initial=0.0), np.abs(numeric).max(initial=0.0))
    if scale < atol:
        return 0.0
    return float(np.abs(analytic - numeric).max() / scale)


def grad_check(loss_fn, arrays, analytic, h=1e-5, tolerance=1e-4, atol=1e-8):
    """Compare analytic gradients with central differences.

    ``arrays`` maps names to float64 arrays that ``loss_fn()`` reads; each
    entry is perturbed in place and restored.  ``analytic`` maps the same
    names to the gradients under test.  An array whose analytic and numeric
    gradients both stay below ``atol`` (a bias cancelled by batch norm, say)
    is reported as exact: there the difference quotient is pure roundoff.
    """
    errors = {}
    for name, arr in arrays.items():
        if arr.dtype != np.float64:
            raise InputError(f"{name}: gradient checks run in float64")
        if not arr.flags.c_contiguous:
            raise InputError(f"{name}: must be contiguous to be perturbed in place")
        numeric = np.zeros_like(arr)
        flat = arr.reshape(-1)
        nflat = numeric.reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + h
            up = loss_fn()
            flat[i] = orig - h
            down = loss_fn()
            flat[i] = orig
            if not (np.isfinite(up) and np.isfinite(down)):
                raise NumericError(f"non-finite loss while perturbing {name}[{i}]")
            nflat[i] = (up - down) / (2 * h)
        errors[name] = relative_error(np.asarray(analytic[name]), numeric, atol)
    return GradCheckReport(errors, tolerance)
