"""Network layers with explicit forward/backward passes.

Every module caches what its backward pass needs during ``forward`` and
accumulates parameter gradients into ``Param.grad`` during ``backward``.
Inputs are batched ``(B, C, T, V)`` arrays.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import hypergraph as hg
from . import numcore as nc
from .numcore import DimensionError, InputError, Param

BETA_FLOOR = 1e-3
TOPOLOGIES = ("knn", "kmeans", "parts")


class Module:
    training = True

    def __init__(self):
        self._params = {}
        self._buffers = {}
        self._modules = {}

    def param(self, name, value, decay=True):
        p = Param(np.ascontiguousarray(value), decay=decay)
        self._params[name] = p
        return p

    def buffer(self, name, value):
        self._buffers[name] = np.ascontiguousarray(value)
        return self._buffers[name]

    def add(self, name, module):
        self._modules[name] = module
        return module

    def named_parameters(self, prefix=""):
        for name, p in self._params.items():
            yield prefix + name, p
        for name, m in self._modules.items():
            yield from m.named_parameters(f"{prefix}{name}.")

    def named_buffers(self, prefix=""):
        for name, b in self._buffers.items():
            yield prefix + name, b
        for name, m in self._modules.items():
            yield from m.named_buffers(f"{prefix}{name}.")

    def parameters(self):
        return [p for _, p in self.named_parameters()]

    def zero_grad(self):
        for p in self.parameters():
            p.zero_grad()

    def train(self, mode=True):
        self.training = mode
        for m in self._modules.values():
            m.train(mode)
        return self

    def eval(self):
        return self.train(False)


def param_count(params):
    """Total number of learned scalars in a module or a name -> array mapping."""
    if isinstance(params, Module):
        params = dict(params.named_parameters())
    return int(sum(np.size(getattr(p, "value", p)) for p in params.values()))


def _normal(rng, shape, fan_in, dtype, gain=1.0):
    return (rng.standard_normal(shape) * gain / np.sqrt(fan_in)).astype(dtype)


# ---------------------------------------------------------------------------
# primitives


class ChannelMap(Module):
    """1x1 convolution: a linear map over the channel axis."""

    def __init__(self, c_in, c_out, rng, dtype=np.float64, bias=True, gain=1.0):
        super().__init__()
        self.weight = self.param("weight", _normal(rng, (c_in, c_out), c_in, dtype, gain))
        self.bias = self.param("bias", np.zeros(c_out, dtype)) if bias else None

    def forward(self, x):
        self._x = x
        return nc.channel_map(x, self.weight.value, None if self.bias is None else self.bias.value)

    def backward(self, dy):
        dx, dw, db = nc.channel_map_backward(self._x, self.weight.value, dy)
        self.weight.grad += dw
        if self.bias is not None:
            self.bias.grad += db
        return dx


class TemporalConv(Module):
    def __init__(self, c_in, c_out, kernel, dilation, stride, rng, dtype=np.float64):
        super().__init__()
        self.dilation, self.stride = dilation, stride
        self.weight = self.param(
            "weight", _normal(rng, (c_out, c_in, kernel), c_in * kernel, dtype)
        )
        self.bias = self.param("bias", np.zeros(c_out, dtype))

    def forward(self, x):
        y, self._cache = nc.temporal_conv(
            x, self.weight.value, self.bias.value, self.dilation, self.stride
        )
        return y

    def backward(self, dy):
        dx, dw, db = nc.temporal_conv_backward(
            self._cache, self.weight.value, dy, self.dilation, self.stride
        )
        self.weight.grad += dw
        self.bias.grad += db
        return dx


class BatchNorm(Module):
    def __init__(self, c, dtype=np.float64):
        super().__init__()
        self.gamma = self.param("gamma", np.ones(c, dtype), decay=False)
        self.beta = self.param("beta", np.zeros(c, dtype), decay=False)
        self.running_mean = self.buffer("running_mean", np.zeros(c, dtype))
        self.running_var = self.buffer("running_var", np.ones(c, dtype))

    def forward(self, x):
        y, self._cache = nc.batch_norm(
            x, self.gamma.value, self.beta.value,
            self.running_mean, self.running_var, self.training,
        )
        return y

    def backward(self, dy):
        dx, dg, db = nc.batch_norm_backward(self._cache, self.gamma.value, dy)
        self.gamma.grad += dg
        self.beta.grad += db
        return dx


class Head(Module):
    """Global average pool over (T, V) followed by a linear classifier."""

    def __init__(self, c, num_classes, rng, dtype=np.float64):
        super().__init__()
        self.weight = self.param("weight", _normal(rng, (c, num_classes), c, dtype))
        self.bias = self.param("bias", np.zeros(num_classes, dtype))

    def forward(self, x):
        self._shape = x.shape
        self._g = x.mean(axis=(-2, -1))
        return self._g @ self.weight.value + self.bias.value

    def backward(self, dy):
        self.weight.grad += self._g.T @ dy
        self.bias.grad += dy.sum(axis=0)
        dg = dy @ self.weight.value.T
        t, v = self._shape[-2:]
        return np.broadcast_to((dg / (t * v))[..., None, None], self._shape).copy()


# ---------------------------------------------------------------------------
# graph and hypergraph convolutions


class GraphConv(Module):
    """Skeleton graph convolution ``sum_k X A_k M_k`` over fixed partitions."""

    def __init__(self, c_in, c_out, partitions, rng, dtype=np.float64):
        super().__init__()
        partitions = np.asarray(partitions, dtype=dtype)
        if partitions.ndim != 3 or partitions.shape[1] != partitions.shape[2]:
            raise DimensionError(f"partitions must be (K, V, V), got {partitions.shape}")
        self.partitions = partitions
        k = len(partitions)
        self.weight = self.param("weight", _normal(rng, (k, c_in, c_out), c_in * k, dtype))
        self.bias = self.param("bias", np.zeros(c_out, dtype))

    def forward(self, x):
        if x.shape[-1] != self.partitions.shape[-1]:
            raise DimensionError(
                f"{x.shape[-1]} joints vs partitions over {self.partitions.shape[-1]}"
            )
        self._x = x
        self._z = [nc.contract_axis(x, a) for a in self.partitions]
        out = sum(nc.channel_map(z, w) for z, w in zip(self._z, self.weight.value))
        return out + self.bias.value[:, None, None]

    def backward(self, dy):
        dx = np.zeros_like(self._x)
        for k, (z, a) in enumerate(zip(self._z, self.partitions)):
            dz, dw, _ = nc.channel_map_backward(z, self.weight.value[k], dy)
            self.weight.grad[k] += dw
            dx += nc.contract_backward(self._x, a, dz)[0]
        self.bias.grad += dy.sum(axis=(0, 2, 3))
        return dx


def graph_conv(x, partitions, weights, bias=None):
    """Functional form of :class:`GraphConv`."""
    out = sum(nc.channel_map(nc.contract_axis(x, a), w) for a, w in zip(partitions, weights))
    return out if bias is None else out + np.asarray(bias)[:, None, None]


class HyperConv(Module):
    """Hypergraph convolution: contract with ``H~`` (or ``H~ + H~^T``), then map channels.

    ``op`` may carry leading axes (topology, batch) that broadcast against the
    input; the output then carries them too.
    """

    def __init__(self, c_in, c_out, axis, symmetric, rng, dtype=np.float64):
        super().__init__()
        if axis not in ("vertex", "time"):
            raise InputError(f"unknown axis {axis!r}")
        self.axis, self.symmetric = axis, symmetric
        self.theta = self.add("theta", ChannelMap(c_in, c_out, rng, dtype))

    def forward(self, x, op):
        s = op + np.swapaxes(op, -1, -2) if self.symmetric else op
        self._x, self._s = x, s
        z = nc.contract_axis(x, s, self.axis)
        return self.theta.forward(z)

    def backward(self, dy, need_op=False):
        dz = self.theta.backward(dy)
        dx, ds = nc.contract_backward(self._x, self._s, dz, self.axis, need_op)
        if need_op and self.symmetric:
            ds = ds + np.swapaxes(ds, -1, -2)
        return (dx, ds) if need_op else dx


def hyper_conv(x, op, theta, bias=None, axis="vertex", symmetric=False):
    """Functional form of :class:`HyperConv`."""
    op = np.asarray(op)
    s = op + np.swapaxes(op, -1, -2) if symmetric else op
    return nc.channel_map(nc.contract_axis(x, s, axis), theta, bias)


class TimePointHypergraph(Module):
    """Per-sample k-NN hypergraph over frames of the reduced block input.

    The incidence is piecewise constant in every input, so no gradient flows
    through it; the reducer is kept out of weight decay for the same reason.
    """

    def __init__(self, c_in, k, rng, dtype=np.float64):
        super().__init__()
        self.k = k
        c_r = hg.reduced_dim(c_in)
        self.reducer = self.param("reducer", _normal(rng, (c_in, c_r), c_in, dtype), decay=False)

    def forward(self, x):
        h_t = hg.tph_incidence(x, self.k, self.reducer.value).astype(x.dtype)
        op, _ = hg.normalize_forward(h_t)
        return h_t, op


class CrossHypergraph(Module):
    """Learned joint<->frame incidences and their normalised operators."""

    def __init__(self, h_n, frames, rng, dtype=np.float64):
        super().__init__()
        self.h_n = np.asarray(h_n, dtype=dtype)
        v, e = self.h_n.shape
        t = frames
        self.mu_st = self.param("mu_st", _normal(rng, (e, t), e, dtype))
        self.phi_st = self.param("phi_st", _normal(rng, (v, t), t, dtype))
        self.mu_ts = self.param("mu_ts", _normal(rng, (t, v), t, dtype))
        self.phi_ts = self.param("phi_ts", _normal(rng, (t, e), e, dtype))

    def forward(self, h_t):
        h_st, h_ts = hg.cross_hypergraphs(
            self.h_n, h_t, self.mu_st.value, self.phi_st.value,
            self.mu_ts.value, self.phi_ts.value,
        )
        op_st, c_st = hg.normalize_forward(h_st)
        op_ts, c_ts = hg.normalize_forward(h_ts)
        self._cache = (h_t, h_st, h_ts, c_st, c_ts)
        return op_st, op_ts

    def backward(self, d_op_st, d_op_ts):
        h_t, h_st, h_ts, c_st, c_ts = self._cache
        d_st = hg.normalize_backward(c_st, d_op_st)
        d_ts = hg.normalize_backward(c_ts, d_op_ts)
        grads = hg.cross_hypergraphs_backward(self.h_n, h_t, h_st, h_ts, d_st, d_ts)
        for p, g in zip((self.mu_st, self.phi_st, self.mu_ts, self.phi_ts), grads):
            p.grad += g


# ---------------------------------------------------------------------------
# high-order information fusion


def _beta_divisor(beta):
    sign = np.where(beta < 0, -1.0, 1.0)
    return sign * np.maximum(np.abs(beta), BETA_FLOOR)


def hif_fuse(a, b, c, d, e, beta, mixer_w, mixer_b=None):
    """Fuse one feature bundle into ``c_out`` channels.

    ``a``..``e`` are the hypergraph-, time-point-, graph- and cross-hypergraph
    features.  The temporal features gate the spatial ones, the spatial and
    graph features are averaged with a learned divisor, the two cross
    features are summed, and the three results are concatenated over channels
    and mixed.
    """
    shapes = {np.shape(f) for f in (a, b, c, d, e)}
    if len(shapes) != 1:
        raise DimensionError(f"bundle features differ in shape: {sorted(shapes)}")
    y1 = a * nc.sigmoid(b)
    y2 = (a + c) / _beta_divisor(np.asarray(beta, dtype=float))
    y3 = d + e
    return nc.channel_map(np.concatenate([y1, y2, y3], axis=-3), mixer_w, mixer_b)


class HIF(Module):
    """Fusion over all spatial topologies; the mixer is shared, ``beta`` is per topology.

    ``a``, ``d`` and ``e`` carry a leading topology axis; ``b`` (time-point)
    and ``c`` (graph) are common to every topology.  Returns the sum of the
    per-topology outputs.
    """

    def __init__(self, c_mid, c_out, n_topologies, rng, dtype=np.float64):
        super().__init__()
        self.beta = self.param("beta", np.full(n_topologies, 2.0, dtype), decay=False)
        self.mixer = self.add("mixer", ChannelMap(3 * c_mid, c_out, rng, dtype))

    def forward(self, a, b, c, d, e):
        if not (a.shape == d.shape == e.shape and a.shape[1:] == b.shape == c.shape):
            raise DimensionError("bundle features differ in shape")
        p = a.shape[0]
        if p != self.beta.shape[0]:
            raise DimensionError(f"{p} topologies vs {self.beta.shape[0]} fusion weights")
        gate = nc.sigmoid(b)
        div = _beta_divisor(self.beta.value).reshape(p, 1, 1, 1, 1)
        sc = a + c
        y1 = a * gate
        y2 = sc / div
        y3 = d + e
        self.concat = np.concatenate([y1, y2, y3], axis=-3)
        self.per_topology = self.mixer.forward(self.concat)
        self._cache = (a, gate, div, sc)
        return self.per_topology.sum(axis=0)

    def backward(self, dy):
        a, gate, div, sc = self._cache
        p = a.shape[0]
        dcat = self.mixer.backward(np.broadcast_to(dy, (p,) + dy.shape))
        c_mid = a.shape[-3]
        dy1, dy2, dy3 = (dcat[..., i * c_mid:(i + 1) * c_mid, :, :] for i in range(3))
        da = dy1 * gate + dy2 / div
        db = (dy1 * a * gate * (1 - gate)).sum(axis=0)
        dc = (dy2 / div).sum(axis=0)
        live = np.abs(self.beta.value) > BETA_FLOOR
        dbeta = -(dy2 * sc).sum(axis=(1, 2, 3, 4)) / div.reshape(p) ** 2
        self.beta.grad += np.where(live, dbeta, 0.0)
        return da, db, dc, dy3, dy3.copy()


# ---------------------------------------------------------------------------
# multi-scale temporal fusion with channel attention


class TemporalFusion(Module):
    """Four temporal branches (two dilated convs, max-pool, 1x1) and a channel gate."""

    def __init__(self, c, stride, rng, dtype=np.float64):
        super().__init__()
        if c % 4:
            raise InputError(f"temporal fusion needs channels divisible by 4, got {c}")
        w = c // 4
        self.stride = stride
        self.reduce = [self.add(f"reduce_{n}", ChannelMap(c, w, rng, dtype)) for n in "abcd"]
        self.conv_a = self.add("conv_a", TemporalConv(w, w, 5, 1, stride, rng, dtype))
        self.conv_b = self.add("conv_b", TemporalConv(w, w, 5, 2, stride, rng, dtype))
        hidden = max(1, c // 4)
        self.fc1 = self.param("att_w1", _normal(rng, (c, hidden), c, dtype))
        self.fc1_b = self.param("att_b1", np.zeros(hidden, dtype))
        self.fc2 = self.param("att_w2", _normal(rng, (hidden, c), hidden, dtype))
        self.fc2_b = self.param("att_b2", np.zeros(c, dtype))

    def forward(self, x):
        if x.shape[-2] < self.stride:
            raise DimensionError(f"{x.shape[-2]} frames cannot be strided by {self.stride}")
        s = self.stride
        ra, rb, rc, rd = (m.forward(x) for m in self.reduce)
        oa = self.conv_a.forward(nc.relu(ra))
        ob = self.conv_b.forward(nc.relu(rb))
        oc, pool_cache = nc.max_pool_time(nc.relu(rc), 3, s)
        od = rd[..., ::s, :]
        cat = np.concatenate([oa, ob, oc, od], axis=-3)
        g = cat.mean(axis=(-2, -1))
        h_pre = g @ self.fc1.value + self.fc1_b.value
        h = nc.relu(h_pre)
        att = nc.sigmoid(h @ self.fc2.value + self.fc2_b.value)
        self._cache = (x.shape, ra, rb, rc, pool_cache, cat, g, h_pre, h, att)
        self.attention = att
        return cat * att[..., None, None]

    def backward(self, dy):
        x_shape, ra, rb, rc, pool_cache, cat, g, h_pre, h, att = self._cache
        s = self.stride
        dcat = dy * att[..., None, None]
        datt = (dy * cat).sum(axis=(-2, -1))
        dz2 = datt * att * (1 - att)
        self.fc2.grad += h.T @ dz2
        self.fc2_b.grad += dz2.sum(axis=0)
        dh = (dz2 @ self.fc2.value.T) * (h_pre > 0)
        self.fc1.grad += g.T @ dh
        self.fc1_b.grad += dh.sum(axis=0)
        dg = dh @ self.fc1.value.T
        t_out, v = cat.shape[-2:]
        dcat = dcat + (dg / (t_out * v))[..., None, None]
        w = cat.shape[-3] // 4
        doa, dob, doc, dod = (dcat[..., i * w:(i + 1) * w, :, :] for i in range(4))
        dra = self.conv_a.backward(doa) * (ra > 0)
        drb = self.conv_b.backward(dob) * (rb > 0)
        drc = nc.max_pool_time_backward(pool_cache, doc, s) * (rc > 0)
        drd = np.zeros(dod.shape[:-2] + (x_shape[-2], v), dtype=dod.dtype)
        drd[..., ::s, :] = dod
        dx = 0
        for m, d in zip(self.reduce, (dra, drb, drc, drd)):
            dx = dx + m.backward(d)
        return dx


class Residual(Module):
    """Identity, or a strided 1x1 projection when the shape changes."""

    def __init__(self, c_in, c_out, stride, rng, dtype=np.float64):
        super().__init__()
        self.stride = stride
        self.proj = None
        if c_in != c_out or stride != 1:
            self.proj = self.add("proj", ChannelMap(c_in, c_out, rng, dtype))

    def forward(self, x):
        self._t = x.shape[-2]
        if self.proj is None:
            return x
        return self.proj.forward(x[..., ::self.stride, :])

    def backward(self, dy):
        if self.proj is None:
            return dy
        d = self.proj.backward(dy)
        dx = np.zeros(d.shape[:-2] + (self._t, d.shape[-1]), dtype=d.dtype)
        dx[..., ::self.stride, :] = d
        return dx


# ---------------------------------------------------------------------------
# block and network


@dataclass
class BlockConfig:
    c_in: int
    c_out: int
    temporal_stride: int = 1

    def __post_init__(self):
        if self.c_in <= 0 or self.c_out <= 0:
            raise InputError("channel counts must be positive")
        if self.temporal_stride not in (1, 2):
            raise InputError(f"temporal stride must be 1 or 2, got {self.temporal_stride}")

    @property
    def c_mid(self):
        return self.c_out


@dataclass
class FeatureBundle:
    A: np.ndarray
    B: np.ndarray
    C: np.ndarray
    D: np.ndarray
    E: np.ndarray

    def __post_init__(self):
        shapes = {f.shape for f in (self.A, self.B, self.C, self.D, self.E)}
        if len(shapes) != 1:
            raise DimensionError(f"bundle features differ in shape: {sorted(shapes)}")


def compute_bundle(x, spatial_op, tph_op, cross_ops, graph_partitions, thetas):
    """One feature bundle for a single spatial topology (reference form).

    ``thetas`` maps ``"A"``..``"E"`` to ``(weight, bias)`` pairs; for ``"C"``
    the weight is the ``(K, C_in, C_mid)`` stack over graph partitions.
    """
    op_st, op_ts = cross_ops
    return FeatureBundle(
        A=hyper_conv(x, spatial_op, *thetas["A"], axis="vertex", symmetric=True),
        B=hyper_conv(x, tph_op, *thetas["B"], axis="time", symmetric=True),
        C=graph_conv(x, graph_partitions, *thetas["C"]),
        D=hyper_conv(x, op_st, *thetas["D"], axis="vertex"),
        E=hyper_conv(x, op_ts, *thetas["E"], axis="time"),
    )


class DSTHCNBlock(Module):
    """Dynamic spatial-temporal hypergraph block.

    ``spatial`` is a list of binary ``V x E_i`` incidences (one per
    topology); ``frames`` is the input length, which fixes the shape of the
    learned cross-hypergraph projections.
    """

    def __init__(self, cfg, spatial, partitions, frames, k_temporal, rng,
                 dtype=np.float64, residual=True):
        super().__init__()
        self.cfg = cfg
        c_in, c_out, s = cfg.c_in, cfg.c_out, cfg.temporal_stride
        self.frames = frames
        self.k_temporal = min(k_temporal, frames)
        self.h_n = [np.asarray(h, dtype=dtype) for h in spatial]
        self.op_n = np.stack([hg.normalize_forward(h)[0] for h in self.h_n])[:, None]
        self.tph = self.add("tph", TimePointHypergraph(c_in, self.k_temporal, rng, dtype))
        self.hc_a = self.add("hc_a", HyperConv(c_in, cfg.c_mid, "vertex", True, rng, dtype))
        self.hc_b = self.add("hc_b", HyperConv(c_in, cfg.c_mid, "time", True, rng, dtype))
        self.gconv = self.add("gconv", GraphConv(c_in, cfg.c_mid, partitions, rng, dtype))
        self.hc_d = self.add("hc_d", HyperConv(c_in, cfg.c_mid, "vertex", False, rng, dtype))
        self.hc_e = self.add("hc_e", HyperConv(c_in, cfg.c_mid, "time", False, rng, dtype))
        self.cross = [
            self.add(f"cross_{i}", CrossHypergraph(h, frames, rng, dtype))
            for i, h in enumerate(self.h_n)
        ]
        self.hif = self.add("hif", HIF(cfg.c_mid, c_out, len(self.h_n), rng, dtype))
        self.tf = self.add("tf", TemporalFusion(c_out, s, rng, dtype))
        self.residual = self.add("residual", Residual(c_in, c_out, s, rng, dtype)) if residual else None
        self.bn = self.add("bn", BatchNorm(c_out, dtype))
        self.features = {}

    def forward(self, x):
        if x.shape[-3:] != (self.cfg.c_in, self.frames, self.h_n[0].shape[0]):
            raise DimensionError(
                f"block expects (C, T, V) = {(self.cfg.c_in, self.frames, self.h_n[0].shape[0])}, "
                f"got {x.shape[-3:]}"
            )
        h_t, op_t = self.tph.forward(x)
        ops = [m.forward(h_t) for m in self.cross]
        op_st = np.stack([o[0] for o in ops])
        op_ts = np.stack([o[1] for o in ops])
        a = self.hc_a.forward(x, self.op_n)
        b = self.hc_b.forward(x, op_t)
        c = self.gconv.forward(x)
        d = self.hc_d.forward(x, op_st)
        e = self.hc_e.forward(x, op_ts)
        f = self.hif.forward(a, b, c, d, e)
        z = self.tf.forward(f)
        pre = z + self.residual.forward(x) if self.residual is not None else z
        y = self.bn.forward(pre)
        self._y = y
        out = nc.relu(y)
        self.features = {
            "H_T": h_t, "A": a, "B": b, "C": c, "D": d, "E": e,
            "concat": self.hif.concat, "F_topology": self.hif.per_topology,
            "F_out": f, "Z_out": z, "out": out,
        }
        return out

    def backward(self, dy):
        dpre = self.bn.backward(dy * (self._y > 0))
        dx = self.residual.backward(dpre) if self.residual is not None else 0
        df = self.tf.backward(dpre)
        da, db, dc, dd, de = self.hif.backward(df)
        dx = dx + self.hc_a.backward(da)
        dx = dx + self.hc_b.backward(db)
        dx = dx + self.gconv.backward(dc)
        ddx, d_op_st = self.hc_d.backward(dd, need_op=True)
        dex, d_op_ts = self.hc_e.backward(de, need_op=True)
        for i, m in enumerate(self.cross):
            m.backward(d_op_st[i], d_op_ts[i])
        return dx + ddx + dex


DEFAULT_CHANNELS = (64, 64, 64, 64, 128, 128, 128, 256, 256, 256)


def default_strides(channels):
    """Stride 2 wherever the width grows, except at the first block."""
    return [2 if i > 0 and c > channels[i - 1] else 1 for i, c in enumerate(channels)]


@dataclass
class ModelConfig:
    channels: list = field(default_factory=lambda: list(DEFAULT_CHANNELS))
    strides: list = None
    k_temporal: int = 5
    k_spatial: int = 4
    kmeans_clusters: int = 5
    kmeans_seed: int = 0
    residual: bool = True
    bn_stem: bool = True
    dual_correlation: bool = False
    dtype: str = "float32"

    def __post_init__(self):
        self.channels = [int(c) for c in self.channels]
        if not self.channels:
            raise InputError("channel plan is empty")
        if self.strides is None:
            self.strides = default_strides(self.channels)
        self.strides = [int(s) for s in self.strides]
        if len(self.strides) != len(self.channels):
            raise InputError("strides and channels differ in length")
        if self.dtype not in ("float32", "float64"):
            raise InputError(f"dtype must be float32 or float64, got {self.dtype!r}")
        for name in ("k_temporal", "k_spatial", "kmeans_clusters"):
            if getattr(self, name) < 1:
                raise InputError(f"{name} must be >= 1")


def spatial_topologies(sk, cfg):
    """The three static spatial incidences, in the order k-NN, k-means, parts."""
    return [
        hg.spatial_knn(sk, min(cfg.k_spatial, sk.num_joints)).H,
        hg.spatial_kmeans(sk, min(cfg.kmeans_clusters, sk.num_joints), cfg.kmeans_seed).H,
        hg.spatial_parts(sk).H,
    ]


class _Identity(Module):
    def forward(self, x):
        return x

    def backward(self, dy):
        return dy


class DSTHCN(Module):
    """Input batch norm, a stack of DST-HC blocks, pooled linear head."""

    def __init__(self, cfg, skeleton, num_classes, in_channels, frames, seed=0):
        super().__init__()
        if num_classes < 2:
            raise InputError("need at least two classes")
        self.cfg = cfg
        self.skeleton = skeleton
        self.num_classes, self.in_channels, self.frames = num_classes, in_channels, frames
        dtype = np.dtype(cfg.dtype)
        self.dtype = dtype
        rng = np.random.default_rng(seed)
        spatial = spatial_topologies(skeleton, cfg)
        partitions = hg.graph_partitions(skeleton)
        self.stem = self.add("stem", BatchNorm(in_channels, dtype)) if cfg.bn_stem else _Identity()
        self.blocks = []
        c_in, t = in_channels, frames
        for i, (c_out, s) in enumerate(zip(cfg.channels, cfg.strides)):
            block = DSTHCNBlock(
                BlockConfig(c_in, c_out, s), spatial, partitions, t,
                cfg.k_temporal, rng, dtype, cfg.residual,
            )
            self.blocks.append(self.add(f"blocks.{i}", block))
            c_in, t = c_out, (t - 1) // s + 1
        self.head = self.add("head", Head(c_in, num_classes, rng, dtype))

    def forward(self, x):
        x = np.asarray(x, dtype=self.dtype)
        if x.ndim != 4 or x.shape[1:] != (self.in_channels, self.frames, self.skeleton.num_joints):
            raise DimensionError(
                f"expected (B, {self.in_channels}, {self.frames}, {self.skeleton.num_joints}), "
                f"got {x.shape}"
            )
        h = self.stem.forward(x)
        for block in self.blocks:
            h = block.forward(h)
        return self.head.forward(h)

    def backward(self, dlogits):
        dh = self.head.backward(np.asarray(dlogits, dtype=self.dtype))
        for block in reversed(self.blocks):
            dh = block.backward(dh)
        return self.stem.backward(dh)

    def predict_proba(self, x, batch_size=64):
        was = self.training
        self.eval()
        try:
            out = [nc.softmax(self.forward(x[i:i + batch_size]).astype(np.float64))
                   for i in range(0, len(x), batch_size)]
        finally:
            self.train(was)
        return np.concatenate(out) if out else np.zeros((0, self.num_classes))
