"""Midpoint 1-to-4 triangle subdivision with synchronized vertex attributes.

Each subdivision step inserts one vertex per unique undirected edge at the
edge midpoint and replaces every face with four.  Old vertices keep their
indices and positions, so level-k vertex data is always a prefix of level
k+1 data.  New vertices are ordered by their parent edge's sorted
(min, max) index pair, which makes the whole operation independent of face
ordering.
"""
from __future__ import annotations

from dataclasses import dataclass, field, replace

import numpy as np

DEFAULT_MAX_LEVEL = 2


class NonManifoldError(ValueError):
    pass


@dataclass
class LodMesh:
    """Triangle mesh at one subdivision level.

    ``parent_edges[i]`` holds the endpoint indices (into the previous level)
    of the edge that spawned vertex ``n_parent_vertices + i``; empty at the
    base level.
    """

    level: int
    vertices: np.ndarray            # (N, 3) float64
    faces: np.ndarray               # (M, 3) uint32
    attrs: np.ndarray               # (N, C) float32
    parent_edges: np.ndarray = field(
        default_factory=lambda: np.zeros((0, 2), dtype=np.uint32))

    def __post_init__(self):
        self.vertices = np.ascontiguousarray(self.vertices, dtype=np.float64)
        self.faces = np.ascontiguousarray(self.faces, dtype=np.uint32)
        self.attrs = np.ascontiguousarray(self.attrs, dtype=np.float32)
        self.parent_edges = np.ascontiguousarray(self.parent_edges, dtype=np.uint32)
        if self.vertices.ndim != 2 or self.vertices.shape[1] != 3:
            raise ValueError("vertices must be (N, 3)")
        if self.faces.ndim != 2 or self.faces.shape[1] != 3:
            raise ValueError("faces must be (M, 3)")
        if self.attrs.shape[0] != self.vertices.shape[0]:
            raise ValueError(
                f"attrs rows ({self.attrs.shape[0]}) must match vertex count "
                f"({self.vertices.shape[0]})")
        if self.faces.size and int(self.faces.max()) >= len(self.vertices):
            raise ValueError("face index out of range")

    @property
    def n_vertices(self) -> int:
        return self.vertices.shape[0]

    @property
    def n_faces(self) -> int:
        return self.faces.shape[0]

    @property
    def n_parent_vertices(self) -> int:
        return self.n_vertices - self.parent_edges.shape[0]

    def validate(self) -> None:
        """Check structural invariants; raises on violation."""
        if self.level > 0 and self.n_faces % (4 ** self.level) != 0:
            raise ValueError(
                f"face count {self.n_faces} not divisible by 4^{self.level}")
        if self.parent_edges.size:
            if int(self.parent_edges.max()) >= self.n_parent_vertices:
                raise ValueError("parent edge index out of range")
        unique_edges(self.faces, check_manifold=True)


def unique_edges(faces: np.ndarray, check_manifold: bool = False):
    """Canonical undirected edge list of a triangle soup.

    Returns (edges, inverse): ``edges`` is (E, 2) with each row sorted and
    rows in lexicographic order; ``inverse[3*f + s]`` maps face f's edge slot
    s ((0,1), (1,2), (2,0)) to its row in ``edges``.
    """
    f = np.asarray(faces, dtype=np.int64)
    raw = f[:, [0, 1, 1, 2, 2, 0]].reshape(-1, 2)
    raw = np.sort(raw, axis=1)
    edges, inverse = np.unique(raw, axis=0, return_inverse=True)
    if check_manifold:
        counts = np.bincount(inverse, minlength=len(edges))
        bad = np.nonzero(counts > 2)[0]
        if bad.size:
            a, b = edges[bad[0]]
            raise NonManifoldError(
                f"edge ({a}, {b}) shared by {counts[bad[0]]} faces")
    return edges, inverse.reshape(-1)


def euler_characteristic(n_vertices: int, faces: np.ndarray) -> int:
    edges, _ = unique_edges(faces)
    return int(n_vertices) - len(edges) + len(np.asarray(faces))


def mean_edge_length(vertices: np.ndarray, faces: np.ndarray) -> float:
    edges, _ = unique_edges(faces)
    v = np.asarray(vertices, dtype=np.float64)
    d = v[edges[:, 0]] - v[edges[:, 1]]
    return float(np.linalg.norm(d, axis=1).mean())


def subdivide(mesh: LodMesh, k_max: int = DEFAULT_MAX_LEVEL) -> LodMesh:
    """One midpoint split: level k -> k+1.

    New vertex count is N + E; every face becomes four (three corner faces
    plus the center face); attributes of a new vertex are the mean of its
    parent edge endpoints' attributes.
    """
    if mesh.level >= k_max:
        raise ValueError(f"subdivision level {mesh.level} already at cap {k_max}")
    edges, inverse = unique_edges(mesh.faces, check_manifold=True)
    n_old = mesh.n_vertices
    midpoint_ids = (n_old + inverse).reshape(-1, 3)  # per face: m01, m12, m20

    midpoints = 0.5 * (mesh.vertices[edges[:, 0]] + mesh.vertices[edges[:, 1]])
    vertices = np.concatenate([mesh.vertices, midpoints])

    f = mesh.faces.astype(np.int64)
    a, b, c = f[:, 0], f[:, 1], f[:, 2]
    mab, mbc, mca = midpoint_ids[:, 0], midpoint_ids[:, 1], midpoint_ids[:, 2]
    faces = np.stack([
        np.stack([a, mab, mca], axis=1),
        np.stack([b, mbc, mab], axis=1),
        np.stack([c, mca, mbc], axis=1),
        np.stack([mab, mbc, mca], axis=1),
    ], axis=1).reshape(-1, 3)

    new_attrs = 0.5 * (mesh.attrs[edges[:, 0]].astype(np.float32)
                       + mesh.attrs[edges[:, 1]].astype(np.float32))
    attrs = np.concatenate([mesh.attrs, new_attrs.astype(np.float32)])

    return LodMesh(
        level=mesh.level + 1,
        vertices=vertices,
        faces=faces.astype(np.uint32),
        attrs=attrs,
        parent_edges=edges.astype(np.uint32),
    )


def subdivide_attrs(child: LodMesh, values: np.ndarray) -> np.ndarray:
    """Propagate per-vertex values from the parent level through ``child``.

    ``values`` is aligned with the parent level's vertices (any channel
    count); old vertices keep their rows, each new vertex receives the mean
    of its parent edge's two rows.
    """
    vals = np.asarray(values)
    flat = vals.ndim == 1
    v = vals[:, None] if flat else vals
    n_old = child.n_parent_vertices
    if v.shape[0] != n_old:
        raise ValueError(
            f"values rows ({v.shape[0]}) must match parent vertex count ({n_old})")
    pe = child.parent_edges.astype(np.int64)
    new = 0.5 * (v[pe[:, 0]] + v[pe[:, 1]])
    out = np.concatenate([v, new.astype(v.dtype, copy=False)])
    return out[:, 0] if flat else out


def subdivide_with_mlp(mesh: LodMesh, mlp, k_max: int = DEFAULT_MAX_LEVEL) -> LodMesh:
    """Transform attributes with ``mlp`` first, then midpoint-subdivide."""
    transformed = np.asarray(mlp(mesh.attrs), dtype=np.float32)
    if transformed.shape[0] != mesh.n_vertices:
        raise ValueError("mlp changed the vertex row count")
    return subdivide(replace(mesh, attrs=transformed), k_max=k_max)
