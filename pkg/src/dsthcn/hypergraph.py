"""Hypergraph construction and HGNN-style normalisation.

Incidence matrices are ``nodes x hyperedges``.  Constructed hypergraphs are
binary; the joint/frame cross hypergraphs are signed and real valued.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .numcore import DimensionError, InputError, channel_map

DEGREE_FLOOR = 1e-6


@dataclass
class IncidenceMatrix:
    H: np.ndarray
    weights: np.ndarray = None

    def __post_init__(self):
        self.H = np.asarray(self.H, dtype=float)
        if self.H.ndim != 2 or self.H.size == 0:
            raise InputError(f"incidence must be a non-empty matrix, got shape {self.H.shape}")
        if self.weights is None:
            self.weights = np.ones(self.H.shape[1])
        self.weights = np.asarray(self.weights, dtype=float)
        if self.weights.shape != (self.H.shape[1],):
            raise DimensionError(f"{self.weights.size} weights for {self.H.shape[1]} hyperedges")
        if np.any(self.weights <= 0):
            raise InputError("hyperedge weights must be strictly positive")

    @property
    def num_nodes(self):
        return self.H.shape[0]

    @property
    def num_edges(self):
        return self.H.shape[1]

    @property
    def is_binary(self):
        return bool(np.all((self.H == 0) | (self.H == 1)))

    def edge_sets(self):
        return [frozenset(np.flatnonzero(col).tolist()) for col in self.H.T]

    @classmethod
    def from_edges(cls, num_nodes, edges, weights=None):
        H = np.zeros((num_nodes, len(edges)))
        for e, members in enumerate(edges):
            H[list(members), e] = 1.0
        return cls(H, weights)


@dataclass
class NormalizedOperator:
    matrix: np.ndarray
    source: IncidenceMatrix


# ---------------------------------------------------------------------------
# normalisation  D_v^-1/2 H W D_e^-1 H^T D_v^-1/2


def normalize_forward(H, w=None, floor=DEGREE_FLOOR):
    """Normalised operator of a (possibly batched) incidence array ``(..., n, e)``.

    Degrees use absolute incidence values so that signed matrices stay
    well defined; degrees below ``floor`` are clamped to it.
    """
    H = np.asarray(H)
    if H.ndim < 2 or H.shape[-1] == 0 or H.shape[-2] == 0:
        raise InputError(f"empty incidence {H.shape}")
    if w is None:
        w = np.ones(H.shape[-1], dtype=H.dtype)
    a = np.abs(H)
    dv_raw = a @ w
    de_raw = a.sum(axis=-2)
    dv = np.maximum(dv_raw, floor)
    de = np.maximum(de_raw, floor)
    s = dv ** -0.5
    q = w / de
    hs = H * s[..., :, None]
    out = (hs * q[..., None, :]) @ np.swapaxes(hs, -1, -2)
    cache = (H, w, s, q, dv, de, dv_raw >= floor, de_raw >= floor)
    return out, cache


def normalize_backward(cache, grad):
    """Gradient of the normalised operator w.r.t. the incidence array."""
    H, w, s, q, dv, de, dv_live, de_live = cache
    g = grad * s[..., :, None] * s[..., None, :]  # dL/dK with K = H diag(q) H^T
    gsym = g + np.swapaxes(g, -1, -2)
    hq = H * q[..., None, :]
    dH = gsym @ hq
    # dL/dq_e = sum_ij g_ij H_ie H_je
    dq = ((g @ H) * H).sum(axis=-2)
    K = hq @ np.swapaxes(H, -1, -2)
    gk = grad * K
    ds = (gk * s[..., None, :]).sum(axis=-1) + (gk * s[..., :, None]).sum(axis=-2)
    ddv = np.where(dv_live, -0.5 * ds * dv ** -1.5, 0.0)
    dde = np.where(de_live, -dq * w / de ** 2, 0.0)
    sign = np.sign(H)
    dH = dH + sign * (ddv[..., :, None] * w + dde[..., None, :])
    return dH


def normalize(inc):
    """Normalised operator for an :class:`IncidenceMatrix`."""
    if not isinstance(inc, IncidenceMatrix):
        inc = IncidenceMatrix(inc)
    out, _ = normalize_forward(inc.H, inc.weights)
    return NormalizedOperator(out, inc)


# ---------------------------------------------------------------------------
# k-NN hypergraphs


def knn_columns(dist, k):
    """Binary incidence with column ``i`` = node ``i`` plus its ``k-1`` nearest nodes.

    ``dist`` is ``(..., n, n)``; the node itself always comes first and ties
    go to the smaller index.
    """
    n = dist.shape[-1]
    if not 1 <= k <= n:
        raise InputError(f"k must lie in [1, {n}], got {k}")
    key = np.array(dist, dtype=float, copy=True)
    idx = np.arange(n)
    key[..., idx, idx] = -1.0
    order = np.argsort(key, axis=-1, kind="stable")[..., :k]  # (..., n_edges, k)
    H = np.zeros(dist.shape, dtype=float)
    # the swapped view is indexed [..., edge, member]
    np.put_along_axis(np.swapaxes(H, -1, -2), order, 1.0, axis=-1)
    return H


def frame_distances(emb):
    """Squared Euclidean distances between rows of ``(..., T, D)`` embeddings."""
    sq = (emb * emb).sum(axis=-1)
    d = sq[..., :, None] + sq[..., None, :] - 2.0 * (emb @ np.swapaxes(emb, -1, -2))
    return np.maximum(d, 0.0)


def reduced_dim(c):
    return max(2, c // 4)


def frame_embeddings(x, reducer_w, reducer_b=None):
    """Reduce channels with a linear map and flatten each frame to a vector."""
    r = channel_map(x, reducer_w, reducer_b)  # (..., C_r, T, V)
    r = np.swapaxes(r, -3, -2)  # (..., T, C_r, V)
    return r.reshape(r.shape[:-2] + (-1,))


def tph_incidence(x, k, reducer_w, reducer_b=None):
    """Time-point hypergraph incidence ``(..., T, T)`` from features ``(..., C, T, V)``."""
    t = x.shape[-2]
    if not 1 <= k <= t:
        raise InputError(f"k must lie in [1, {t}], got {k}")
    emb = frame_embeddings(x, reducer_w, reducer_b)
    return knn_columns(frame_distances(emb), k)


def tph_knn(x, k, reducer_w, reducer_b=None):
    """Time-point hypergraph for one ``C x T x V`` sample."""
    x = np.asarray(x, dtype=float)
    if x.ndim != 3:
        raise DimensionError(f"expected a C x T x V sample, got {x.shape}")
    return IncidenceMatrix(tph_incidence(x, k, reducer_w, reducer_b))


# ---------------------------------------------------------------------------
# static spatial hypergraphs


def spatial_knn(sk, k):
    """One hyperedge per joint: the joint and its ``k-1`` hop-nearest joints."""
    if not 1 <= k <= sk.num_joints:
        raise InputError(f"k must lie in [1, {sk.num_joints}], got {k}")
    return IncidenceMatrix(knn_columns(sk.hop_distances.astype(float), k))


def _kmeans_pp(points, clusters, rng):
    n = len(points)
    centers = [points[rng.integers(n)]]
    for _ in range(1, clusters):
        d2 = ((points[:, None, :] - np.array(centers)[None]) ** 2).sum(-1).min(axis=1)
        total = d2.sum()
        if total <= 0:
            idx = rng.integers(n)
        else:
            idx = rng.choice(n, p=d2 / total)
        centers.append(points[idx])
    return np.array(centers)


def lloyd(points, centers, max_iter=100, tol=1e-9):
    """Lloyd iterations; empty clusters are re-seeded with the farthest point."""
    centers = centers.copy()
    k = len(centers)
    labels = None
    for _ in range(max_iter):
        d2 = ((points[:, None, :] - centers[None]) ** 2).sum(-1)
        labels = d2.argmin(axis=1)
        for c in range(k):
            if np.any(labels == c):
                continue
            own = d2[np.arange(len(points)), labels]
            sizes = np.bincount(labels, minlength=k)
            movable = sizes[labels] > 1
            cand = np.flatnonzero(movable)
            j = cand[np.argmax(own[cand])]
            labels[j] = c
        new = np.array([points[labels == c].mean(axis=0) for c in range(k)])
        shift = np.sqrt(((new - centers) ** 2).sum(-1)).max()
        centers = new
        if shift < tol:
            break
    d2 = ((points - centers[labels]) ** 2).sum()
    return labels, centers, float(d2)


def kmeans(points, clusters, seed, n_init=50, max_iter=100, tol=1e-9):
    """k-means++ seeded Lloyd's algorithm, best of ``n_init`` restarts."""
    points = np.asarray(points, dtype=float)
    if not 1 <= clusters <= len(points):
        raise InputError(f"clusters must lie in [1, {len(points)}], got {clusters}")
    rng = np.random.default_rng(seed)
    best = None
    for _ in range(n_init):
        labels, _, inertia = lloyd(points, _kmeans_pp(points, clusters, rng), max_iter, tol)
        if best is None or inertia < best[1]:
            best = (labels, inertia)
    return best


def partition_incidence(labels, v):
    """Binary incidence of a partition, columns ordered by smallest member."""
    groups = {}
    for j, lab in enumerate(labels):
        groups.setdefault(int(lab), []).append(j)
    cols = sorted(groups.values(), key=min)
    return IncidenceMatrix.from_edges(v, cols)


def spatial_kmeans(sk, clusters, seed=0, n_init=50):
    """Partition the joints by k-means on their rest-pose coordinates.

    Points are visited in lexicographic coordinate order so the result does
    not depend on how the joints happen to be numbered.
    """
    pose = np.asarray(sk.rest_pose, dtype=float)
    order = np.lexsort(pose.T[::-1])
    labels_sorted, _ = kmeans(pose[order], clusters, seed, n_init=n_init)
    labels = np.empty(sk.num_joints, dtype=int)
    labels[order] = labels_sorted
    return partition_incidence(labels, sk.num_joints)


def spatial_parts(sk):
    """Centripetal and centrifugal hyperedges around every joint.

    For joint ``v`` at hop distance ``d(v)`` from the centre joint, the
    centripetal edge holds ``v`` and its bone neighbours closer to the centre,
    the centrifugal edge ``v`` and the neighbours farther away.  Duplicate
    columns are dropped, keeping the first.
    """
    d = sk.hops_from(sk.center_joint)
    edges, seen = [], set()
    for v in range(sk.num_joints):
        petal = frozenset([v] + [u for u in sk.neighbors[v] if d[u] < d[v]])
        fugal = frozenset([v] + [u for u in sk.neighbors[v] if d[u] > d[v]])
        for e in (petal, fugal):
            if e not in seen:
                seen.add(e)
                edges.append(sorted(e))
    return IncidenceMatrix.from_edges(sk.num_joints, edges)


def graph_partitions(sk):
    """Row-normalised ``D^-1 (A_k + I)`` for the self / centripetal / centrifugal split."""
    v = sk.num_joints
    d = sk.hops_from(sk.center_joint)
    inward = np.zeros((v, v))
    outward = np.zeros((v, v))
    for a in range(v):
        for b in sk.neighbors[a]:
            if d[b] < d[a]:
                inward[a, b] = 1.0
            else:
                outward[a, b] = 1.0
    parts = []
    for a_k in (np.zeros((v, v)), inward, outward):
        m = a_k + np.eye(v)
        parts.append(m / m.sum(axis=1, keepdims=True))
    return np.stack(parts)


# ---------------------------------------------------------------------------
# joint <-> frame cross hypergraphs


def cross_hypergraphs(h_n, h_t, mu_st, phi_st, mu_ts, phi_ts):
    """Signed joint-frame and frame-joint incidences.

    ``H_ST = tanh(H_N mu_st - phi_st H_T)`` is ``V x T`` and
    ``H_TS = tanh(H_T mu_ts - phi_ts H_N^T)`` is ``T x V``.  ``h_t`` may be
    batched ``(B, T, T)``.
    """
    h_n = np.asarray(h_n)
    h_t = np.asarray(h_t)
    v, e = h_n.shape
    t = h_t.shape[-1]
    expected = {"mu_st": (e, t), "phi_st": (v, t), "mu_ts": (t, v), "phi_ts": (t, e)}
    for name, arr in zip(expected, (mu_st, phi_st, mu_ts, phi_ts)):
        if np.shape(arr) != expected[name]:
            raise DimensionError(f"{name} must be {expected[name]}, got {np.shape(arr)}")
    h_st = np.tanh(h_n @ mu_st - phi_st @ h_t)
    h_ts = np.tanh(h_t @ mu_ts - phi_ts @ h_n.T)
    return h_st, h_ts


def cross_hypergraphs_backward(h_n, h_t, h_st, h_ts, d_st, d_ts):
    """Gradients for ``(mu_st, phi_st, mu_ts, phi_ts)``; the inputs are constants."""
    g_st = d_st * (1 - h_st * h_st)
    g_ts = d_ts * (1 - h_ts * h_ts)
    lead = tuple(range(g_st.ndim - 2))
    d_mu_st = (h_n.T @ g_st).sum(axis=lead)
    d_phi_st = -(g_st @ np.swapaxes(h_t, -1, -2)).sum(axis=lead)
    d_mu_ts = (np.swapaxes(h_t, -1, -2) @ g_ts).sum(axis=lead)
    d_phi_ts = -(g_ts @ h_n).sum(axis=lead)
    return d_mu_st, d_phi_st, d_mu_ts, d_phi_ts
