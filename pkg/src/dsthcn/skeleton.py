"""Skeleton definitions: bone tree, centre joint and a rest pose."""

from __future__ import annotations

from collections import deque
from dataclasses import dataclass
from functools import cached_property

import numpy as np

from .numcore import InputError


@dataclass(frozen=True, eq=False)
class SkeletonDefinition:
    name: str
    parent: tuple
    center_joint: int
    rest_pose: np.ndarray

    def __post_init__(self):
        v = len(self.parent)
        if v < 1:
            raise InputError("skeleton needs at least one joint")
        if not 0 <= self.center_joint < v:
            raise InputError(f"center joint {self.center_joint} out of range")
        if np.shape(self.rest_pose) != (v, 3):
            raise InputError(f"rest pose must be ({v}, 3), got {np.shape(self.rest_pose)}")
        roots = [j for j, p in enumerate(self.parent) if p == j]
        if len(roots) != 1:
            raise InputError(f"parent links need exactly one root, found {len(roots)}")
        # every joint must reach the root without cycling
        for j in range(v):
            seen = set()
            while self.parent[j] != j:
                if j in seen or not 0 <= self.parent[j] < v:
                    raise InputError("parent links do not form a tree")
                seen.add(j)
                j = self.parent[j]

    @property
    def num_joints(self):
        return len(self.parent)

    @property
    def root(self):
        return next(j for j, p in enumerate(self.parent) if p == j)

    @cached_property
    def neighbors(self):
        nbrs = [[] for _ in self.parent]
        for j, p in enumerate(self.parent):
            if p != j:
                nbrs[j].append(p)
                nbrs[p].append(j)
        return [sorted(n) for n in nbrs]

    @cached_property
    def adjacency(self):
        a = np.zeros((self.num_joints, self.num_joints))
        for j, p in enumerate(self.parent):
            if p != j:
                a[j, p] = a[p, j] = 1.0
        return a

    def hops_from(self, source):
        dist = [-1] * self.num_joints
        dist[source] = 0
        queue = deque([source])
        while queue:
            u = queue.popleft()
            for w in self.neighbors[u]:
                if dist[w] < 0:
                    dist[w] = dist[u] + 1
                    queue.append(w)
        return np.array(dist)

    @cached_property
    def hop_distances(self):
        return np.stack([self.hops_from(j) for j in range(self.num_joints)])

    def permuted(self, perm):
        """Relabel joints so that new joint ``i`` is old joint ``perm[i]``."""
        perm = np.asarray(perm)
        inv = np.argsort(perm)
        parent = tuple(int(inv[self.parent[perm[i]]]) for i in range(len(perm)))
        return SkeletonDefinition(
            self.name, parent, int(inv[self.center_joint]), self.rest_pose[perm]
        )


def _tree(v, edges, root):
    nbrs = [[] for _ in range(v)]
    for a, b in edges:
        nbrs[a].append(b)
        nbrs[b].append(a)
    parent = [-1] * v
    parent[root] = root
    queue = deque([root])
    while queue:
        u = queue.popleft()
        for w in sorted(nbrs[u]):
            if parent[w] < 0:
                parent[w] = u
                queue.append(w)
    return tuple(parent)


# Kinect v2 joint order (0-based)
_NTU_EDGES = [
    (0, 1), (1, 20), (2, 20), (3, 2), (4, 20), (5, 4), (6, 5), (7, 6),
    (8, 20), (9, 8), (10, 9), (11, 10), (12, 0), (13, 12), (14, 13),
    (15, 14), (16, 0), (17, 16), (18, 17), (19, 18), (21, 7), (22, 7),
    (23, 11), (24, 11),
]
_NTU_REST = [
    (0.00, 0.00, 0.00),    # spine base
    (0.00, 0.30, 0.00),    # spine mid
    (0.00, 0.60, 0.00),    # neck
    (0.00, 0.74, 0.02),    # head
    (-0.18, 0.50, 0.00),   # shoulder L
    (-0.26, 0.25, 0.02),   # elbow L
    (-0.29, 0.02, 0.04),   # wrist L
    (-0.30, -0.06, 0.05),  # hand L
    (0.18, 0.50, 0.00),    # shoulder R
    (0.26, 0.25, 0.02),    # elbow R
    (0.29, 0.02, 0.04),    # wrist R
    (0.30, -0.06, 0.05),   # hand R
    (-0.09, -0.03, 0.00),  # hip L
    (-0.10, -0.43, 0.01),  # knee L
    (-0.10, -0.81, -0.02), # ankle L
    (-0.11, -0.86, 0.09),  # foot L
    (0.09, -0.03, 0.00),   # hip R
    (0.10, -0.43, 0.01),   # knee R
    (0.10, -0.81, -0.02),  # ankle R
    (0.11, -0.86, 0.09),   # foot R
    (0.00, 0.52, 0.00),    # spine shoulder
    (-0.31, -0.14, 0.06),  # hand tip L
    (-0.26, -0.08, 0.09),  # thumb L
    (0.31, -0.14, 0.06),   # hand tip R
    (0.26, -0.08, 0.09),   # thumb R
]

# Kinect v1 joint order (0-based)
_UCLA_EDGES = [
    (0, 1), (1, 2), (2, 3), (2, 4), (4, 5), (5, 6), (6, 7), (2, 8), (8, 9),
    (9, 10), (10, 11), (0, 12), (12, 13), (13, 14), (14, 15), (0, 16),
    (16, 17), (17, 18), (18, 19),
]
_UCLA_REST = [
    (0.00, 0.00, 0.00),    # hip centre
    (0.00, 0.28, 0.01),    # spine
    (0.00, 0.55, 0.00),    # shoulder centre
    (0.00, 0.72, 0.02),    # head
    (-0.17, 0.50, 0.00),   # shoulder L
    (-0.25, 0.24, 0.02),   # elbow L
    (-0.28, 0.01, 0.04),   # wrist L
    (-0.29, -0.07, 0.05),  # hand L
    (0.17, 0.50, 0.00),    # shoulder R
    (0.25, 0.24, 0.02),    # elbow R
    (0.28, 0.01, 0.04),    # wrist R
    (0.29, -0.07, 0.05),   # hand R
    (-0.09, -0.04, 0.00),  # hip L
    (-0.10, -0.44, 0.01),  # knee L
    (-0.10, -0.82, -0.02), # ankle L
    (-0.11, -0.87, 0.09),  # foot L
    (0.09, -0.04, 0.00),   # hip R
    (0.10, -0.44, 0.01),   # knee R
    (0.10, -0.82, -0.02),  # ankle R
    (0.11, -0.87, 0.09),   # foot R
]

NTU25 = SkeletonDefinition("ntu25", _tree(25, _NTU_EDGES, 0), 1, np.array(_NTU_REST))
UCLA20 = SkeletonDefinition("ucla20", _tree(20, _UCLA_EDGES, 0), 1, np.array(_UCLA_REST))

BUILTIN = {"ntu25": NTU25, "ucla20": UCLA20}


def get_skeleton(name):
    try:
        return BUILTIN[name]
    except KeyError:
        raise InputError(f"unknown skeleton {name!r}; choose from {sorted(BUILTIN)}") from None


def chain_skeleton(v, center=None):
    """A straight chain of ``v`` joints along x; handy for tiny experiments."""
    parent = tuple(max(j - 1, 0) for j in range(v))
    pose = np.zeros((v, 3))
    pose[:, 0] = np.arange(v, dtype=float)
    return SkeletonDefinition(f"chain{v}", parent, v // 2 if center is None else center, pose)


def from_edges(name, v, edges, center, rest_pose, root=0):
    return SkeletonDefinition(name, _tree(v, edges, root), center, np.asarray(rest_pose, float))
