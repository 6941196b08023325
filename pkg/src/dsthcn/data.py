"""Skeleton datasets: the SKL binary format, preprocessing and synthetic data.

SKL layout (little-endian)::

    magic   4s   b"SKL1"
    version u16  1
    skel    u8   0 = custom, 1 = ntu25, 2 = ucla20
    pad     u8   0
    K       u32  class count
    N       u32  sample count
    N x { label u32, C u32, T u32, V u32, C*T*V f32 (index (c*T + t)*V + v) }
"""

from __future__ import annotations

import io
import os
import struct
import tempfile
from dataclasses import dataclass, field

import numpy as np

from .hypergraph import spatial_kmeans
from .numcore import InputError
from .skeleton import get_skeleton

MAGIC = b"SKL1"
VERSION = 1
SKELETON_IDS = {"custom": 0, "ntu25": 1, "ucla20": 2}
SKELETON_NAMES = {v: k for k, v in SKELETON_IDS.items()}

_HEADER = struct.Struct("<4sHBBII")
_SAMPLE = struct.Struct("<IIII")


class FormatError(ValueError):
    """Malformed SKL content; ``offset`` is the byte position of the problem."""

    def __init__(self, message, offset):
        super().__init__(f"{message} (at byte {offset})")
        self.offset = offset


@dataclass
class SkeletonSample:
    label: int
    tensor: np.ndarray  # C x T x V

    def __post_init__(self):
        self.tensor = np.asarray(self.tensor)
        if self.tensor.ndim != 3 or self.tensor.shape[1] < 1:
            raise InputError(f"sample must be C x T x V with T >= 1, got {self.tensor.shape}")
        if not np.all(np.isfinite(self.tensor)):
            raise InputError("sample contains non-finite values")


@dataclass
class Dataset:
    skeleton: str
    num_classes: int
    samples: list = field(default_factory=list)

    def __post_init__(self):
        if self.skeleton not in SKELETON_IDS:
            raise InputError(f"unknown skeleton id {self.skeleton!r}")
        vs = {s.tensor.shape[2] for s in self.samples}
        if len(vs) > 1:
            raise InputError(f"samples disagree on joint count: {sorted(vs)}")
        if any(not 0 <= s.label < self.num_classes for s in self.samples):
            raise InputError(f"labels must lie in [0, {self.num_classes})")

    def __len__(self):
        return len(self.samples)

    def arrays(self, dtype=np.float64):
        """Stack into ``(N, C, T, V)`` values and ``(N,)`` labels."""
        if not self.samples:
            raise InputError("dataset is empty")
        shapes = {s.tensor.shape for s in self.samples}
        if len(shapes) != 1:
            raise InputError(f"samples differ in shape: {sorted(shapes)}")
        x = np.stack([s.tensor for s in self.samples]).astype(dtype)
        y = np.array([s.label for s in self.samples], dtype=np.int64)
        return x, y


# ---------------------------------------------------------------------------
# SKL io


def dumps(ds):
    buf = io.BytesIO()
    buf.write(_HEADER.pack(MAGIC, VERSION, SKELETON_IDS[ds.skeleton], 0,
                           ds.num_classes, len(ds.samples)))
    for s in ds.samples:
        c, t, v = s.tensor.shape
        buf.write(_SAMPLE.pack(s.label, c, t, v))
        buf.write(np.ascontiguousarray(s.tensor, dtype="<f4").tobytes())
    return buf.getvalue()


def loads(raw):
    raw = memoryview(raw)
    if len(raw) < _HEADER.size:
        raise FormatError(f"truncated header: {len(raw)} of {_HEADER.size} bytes", len(raw))
    magic, version, skel, reserved, k, n = _HEADER.unpack_from(raw, 0)
    if magic != MAGIC:
        raise FormatError(f"bad magic {bytes(magic)!r}", 0)
    if version != VERSION:
        raise FormatError(f"unsupported version {version}", 4)
    if skel not in SKELETON_NAMES:
        raise FormatError(f"unknown skeleton id {skel}", 6)
    if reserved != 0:
        raise FormatError(f"reserved byte is {reserved}, expected 0", 7)
    pos = _HEADER.size
    samples = []
    for i in range(n):
        if pos + _SAMPLE.size > len(raw):
            raise FormatError(f"truncated header of sample {i}", pos)
        label, c, t, v = _SAMPLE.unpack_from(raw, pos)
        if label >= k:
            raise FormatError(f"sample {i} label {label} >= class count {k}", pos)
        if t < 1:
            raise FormatError(f"sample {i} has no frames", pos + 8)
        pos += _SAMPLE.size
        nbytes = 4 * c * t * v
        if pos + nbytes > len(raw):
            raise FormatError(f"truncated values of sample {i}", len(raw))
        values = np.frombuffer(raw, dtype="<f4", count=c * t * v, offset=pos)
        if not np.all(np.isfinite(values)):
            raise FormatError(f"sample {i} holds non-finite values", pos)
        samples.append(SkeletonSample(label, values.astype(np.float32).reshape(c, t, v)))
        pos += nbytes
    if pos != len(raw):
        raise FormatError(f"{len(raw) - pos} trailing bytes", pos)
    try:
        return Dataset(SKELETON_NAMES[skel], k, samples)
    except InputError as exc:
        raise FormatError(str(exc), _HEADER.size) from None


def atomic_write(path, data):
    """Write bytes or text via a temporary file in the same directory, then rename."""
    path = os.fspath(path)
    directory = os.path.dirname(os.path.abspath(path))
    fd, tmp = tempfile.mkstemp(dir=directory, prefix=".tmp-", suffix=os.path.basename(path))
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(data.encode() if isinstance(data, str) else data)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def write_skl(path, ds):
    atomic_write(path, dumps(ds))


def read_skl(path):
    with open(path, "rb") as fh:
        return loads(fh.read())


# ---------------------------------------------------------------------------
# preprocessing


def preprocess(x, sk):
    """Centre each frame on the skeleton's centre joint and rescale.

    The scale is the mean bone length of the first frame (floored at 1e-6),
    so the result is invariant to translation and equivariant to rotation.
    ``x`` is ``(..., 3, T, V)``.
    """
    x = np.asarray(x, dtype=float)
    centered = x - x[..., sk.center_joint][..., None]
    child = [j for j, p in enumerate(sk.parent) if p != j]
    if child:
        parent = [sk.parent[j] for j in child]
        first = x[..., :, 0, :]
        bones = np.linalg.norm(first[..., child] - first[..., parent], axis=-2)
        scale = np.maximum(bones.mean(axis=-1), 1e-6)
    else:
        scale = np.ones(x.shape[:-3])
    return centered / np.asarray(scale)[..., None, None, None]


# ---------------------------------------------------------------------------
# synthetic data


def _class_patterns(sk, num_classes, frames, seed):
    rng = np.random.default_rng([seed, 0])
    groups = spatial_kmeans(sk, min(5, sk.num_joints), seed=seed).edge_sets()
    patterns = []
    for c in range(num_classes):
        direction = rng.normal(size=3)
        direction /= np.linalg.norm(direction)
        patterns.append({
            "joints": sorted(groups[c % len(groups)]),
            "freq": 1.0 + (c // len(groups)) + 0.5 * (c % 2),
            "phase": rng.uniform(0, 2 * np.pi),
            "direction": direction,
            "amplitude": 0.12,
        })
    return patterns


def gen_synthetic(num_classes, per_class, frames, skeleton="ntu25", seed=0,
                  noise=0.01, jitter=1.0):
    """Balanced synthetic action set.

    Each class moves one body part (a k-means cluster of the rest pose)
    sinusoidally with its own direction, frequency and phase.  Per sample
    the phase, amplitude and global position are jittered in proportion to
    ``jitter`` and Gaussian noise of std ``noise`` is added.
    """
    if num_classes < 2:
        raise InputError(f"need at least two classes, got {num_classes}")
    if per_class < 0 or frames < 1:
        raise InputError("per_class must be >= 0 and frames >= 1")
    sk = get_skeleton(skeleton)
    patterns = _class_patterns(sk, num_classes, frames, seed)
    rng = np.random.default_rng([seed, 1])
    t = np.arange(frames) / frames
    samples = []
    for c, pat in enumerate(patterns):
        for _ in range(per_class):
            phase = pat["phase"] + jitter * rng.uniform(-np.pi, np.pi)
            amp = pat["amplitude"] * (1 + jitter * rng.uniform(-0.3, 0.3))
            offset = jitter * rng.normal(scale=0.5, size=3)
            x = np.repeat((sk.rest_pose + offset).T[:, None, :], frames, axis=1)
            wave = amp * np.sin(2 * np.pi * pat["freq"] * t + phase)
            x[:, :, pat["joints"]] += (pat["direction"][:, None] * wave)[:, :, None]
            x += rng.normal(scale=noise, size=x.shape) if noise > 0 else 0.0
            samples.append(SkeletonSample(c, x.astype(np.float32)))
    return Dataset(skeleton, num_classes, samples)


def split_per_class(ds, first):
    """Split into the first ``first`` samples of every class and the rest."""
    seen = {}
    head, tail = [], []
    for s in ds.samples:
        n = seen.get(s.label, 0)
        (head if n < first else tail).append(s)
        seen[s.label] = n + 1
    return (Dataset(ds.skeleton, ds.num_classes, head),
            Dataset(ds.skeleton, ds.num_classes, tail))


# ---------------------------------------------------------------------------
# CSV export


def feature_csv(x, fmt="%.9g"):
    """``C x T x V`` array as CSV: one row per (channel, frame), one column per joint."""
    x = np.asarray(x)
    c, t, v = x.shape
    lines = ["channel,t," + ",".join(f"v{j}" for j in range(v))]
    for ci in range(c):
        for ti in range(t):
            lines.append(f"{ci},{ti}," + ",".join(fmt % val for val in x[ci, ti]))
    return "\n".join(lines) + "\n"


def read_feature_csv(path):
    arr = np.loadtxt(path, delimiter=",", skiprows=1, ndmin=2)
    c = int(arr[:, 0].max()) + 1
    t = int(arr[:, 1].max()) + 1
    return arr[:, 2:].reshape(c, t, -1)
