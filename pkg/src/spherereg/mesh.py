"""Icosphere meshes and the geometric primitives built on them.

Everything in the registration engine lives on subdivided icosahedra
projected to the unit sphere.  This module constructs those meshes with a
deterministic vertex ordering (parent vertices first, then edge midpoints
in sorted parent-edge order), which makes resolution transfers pure index
operations, and provides feature down/upsampling, pooling, barycentric
point location / interpolation, and a one-ring least-squares tangent
gradient estimator.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from functools import lru_cache

import numpy as np

MAX_ORDER = 8


def vertex_count(order: int) -> int:
    """Number of vertices of an icosphere at the given subdivision order."""
    return 10 * 4**order + 2


def face_count(order: int) -> int:
    return 20 * 4**order


def edge_count(order: int) -> int:
    return 30 * 4**order


@dataclass(frozen=True)
class Icosphere:
    """Immutable subdivided icosahedron projected onto the unit sphere.

    ``neighbors`` lists each vertex's one-ring in ascending index order.
    ``midpoint_edges[i]`` gives the two parent vertices of vertex
    ``n_parent + i`` (empty at order 0).  ``nbr_pad`` is a (V, 7) table:
    column 0 is the vertex itself, columns 1.. hold neighbors, padded by
    repeating the vertex itself; ``nbr_mask`` marks real entries.
    """

    order: int
    vertices: np.ndarray
    faces: np.ndarray
    neighbors: tuple
    midpoint_edges: np.ndarray
    nbr_pad: np.ndarray = field(repr=False)
    nbr_mask: np.ndarray = field(repr=False)
    vertex_faces: np.ndarray = field(repr=False)

    @property
    def n_vertices(self) -> int:
        return self.vertices.shape[0]

    @property
    def n_faces(self) -> int:
        return self.faces.shape[0]


def _base_icosahedron():
    phi = (1.0 + math.sqrt(5.0)) / 2.0
    verts = np.array(
        [
            [-1, phi, 0], [1, phi, 0], [-1, -phi, 0], [1, -phi, 0],
            [0, -1, phi], [0, 1, phi], [0, -1, -phi], [0, 1, -phi],
            [phi, 0, -1], [phi, 0, 1], [-phi, 0, -1], [-phi, 0, 1],
        ],
        dtype=np.float64,
    )
    verts /= np.linalg.norm(verts, axis=1, keepdims=True)
    faces = np.array(
        [
            [0, 11, 5], [0, 5, 1], [0, 1, 7], [0, 7, 10], [0, 10, 11],
            [1, 5, 9], [5, 11, 4], [11, 10, 2], [10, 7, 6], [7, 1, 8],
            [3, 9, 4], [3, 4, 2], [3, 2, 6], [3, 6, 8], [3, 8, 9],
            [4, 9, 5], [2, 4, 11], [6, 2, 10], [8, 6, 7], [9, 8, 1],
        ],
        dtype=np.int64,
    )
    # Outward (counter-clockwise seen from outside) orientation for every face.
    a, b, c = verts[faces[:, 0]], verts[faces[:, 1]], verts[faces[:, 2]]
    det = np.einsum("ij,ij->i", a, np.cross(b, c))
    flip = det < 0
    faces[flip, 1], faces[flip, 2] = faces[flip, 2].copy(), faces[flip, 1].copy()
    return verts, faces


def _subdivide(vertices: np.ndarray, faces: np.ndarray):
    n_old = vertices.shape[0]
    pairs = np.concatenate(
        [faces[:, [0, 1]], faces[:, [1, 2]], faces[:, [2, 0]]], axis=0
    )
    pairs = np.sort(pairs, axis=1)
    edges = np.unique(pairs, axis=0)  # lexicographically sorted (min, max)
    edge_id = {(int(e[0]), int(e[1])): n_old + i for i, e in enumerate(edges)}
    mids = vertices[edges[:, 0]] + vertices[edges[:, 1]]
    mids /= np.linalg.norm(mids, axis=1, keepdims=True)
    new_vertices = np.concatenate([vertices, mids], axis=0)

    def mid(i, j):
        return edge_id[(min(i, j), max(i, j))]

    new_faces = np.empty((faces.shape[0] * 4, 3), dtype=np.int64)
    for f, (a, b, c) in enumerate(faces):
        ab, bc, ca = mid(a, b), mid(b, c), mid(c, a)
        new_faces[4 * f + 0] = (a, ab, ca)
        new_faces[4 * f + 1] = (b, bc, ab)
        new_faces[4 * f + 2] = (c, ca, bc)
        new_faces[4 * f + 3] = (ab, bc, ca)
    return new_vertices, new_faces, edges


def _adjacency(n_vertices: int, faces: np.ndarray):
    nbr_sets = [set() for _ in range(n_vertices)]
    for a, b, c in faces:
        nbr_sets[a].update((b, c))
        nbr_sets[b].update((a, c))
        nbr_sets[c].update((a, b))
    return tuple(np.array(sorted(s), dtype=np.int64) for s in nbr_sets)


@lru_cache(maxsize=None)
def build_icosphere(order: int) -> Icosphere:
    """Construct the icosphere at the given order (0..8).

    Vertex ordering is hierarchical: the first ``vertex_count(order - 1)``
    vertices coincide with the next-coarser sphere's vertices.
    """
    if not 0 <= order <= MAX_ORDER:
        raise ValueError(f"icosphere order must be in [0, {MAX_ORDER}], got {order}")
    if order == 0:
        vertices, faces = _base_icosahedron()
        midpoint_edges = np.empty((0, 2), dtype=np.int64)
    else:
        parent = build_icosphere(order - 1)
        vertices, faces, midpoint_edges = _subdivide(parent.vertices, parent.faces)

    neighbors = _adjacency(vertices.shape[0], faces)
    n = vertices.shape[0]
    nbr_pad = np.tile(np.arange(n, dtype=np.int64)[:, None], (1, 7))
    nbr_mask = np.zeros((n, 7), dtype=bool)
    nbr_mask[:, 0] = True
    for i, nb in enumerate(neighbors):
        nbr_pad[i, 1 : 1 + len(nb)] = nb
        nbr_mask[i, 1 : 1 + len(nb)] = True

    vertex_faces = np.full((n, 6), -1, dtype=np.int64)
    counts = np.zeros(n, dtype=np.int64)
    for f, tri in enumerate(faces):
        for v in tri:
            vertex_faces[v, counts[v]] = f
            counts[v] += 1

    return Icosphere(
        order=order,
        vertices=vertices,
        faces=faces,
        neighbors=neighbors,
        midpoint_edges=midpoint_edges,
        nbr_pad=nbr_pad,
        nbr_mask=nbr_mask,
        vertex_faces=vertex_faces,
    )


@dataclass
class SphericalFeatureMap:
    """Per-vertex multi-channel feature values on an icosphere.

    ``mask`` is True for valid vertices; masked-out vertices still take part
    in geometry operations but are excluded from losses and metrics.
    """

    sphere_order: int
    values: np.ndarray
    mask: np.ndarray | None = None

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=np.float64)
        if self.values.ndim == 1:
            self.values = self.values[:, None]
        expected = vertex_count(self.sphere_order)
        if self.values.shape[0] != expected:
            raise ValueError(
                f"feature map has {self.values.shape[0]} rows, "
                f"order {self.sphere_order} needs {expected}"
            )
        if self.mask is not None:
            self.mask = np.asarray(self.mask, dtype=bool)
            if self.mask.shape != (expected,):
                raise ValueError("mask length does not match vertex count")

    @property
    def channels(self) -> int:
        return self.values.shape[1]

    def valid_mask(self) -> np.ndarray:
        if self.mask is None:
            return np.ones(self.values.shape[0], dtype=bool)
        return self.mask


def _transfer_mask(mask, n_out):
    return None if mask is None else mask[:n_out]


def downsample_features(fmap: SphericalFeatureMap) -> SphericalFeatureMap:
    """Drop to the next-coarser order by extracting the nested vertex rows."""
    if fmap.sphere_order < 1:
        raise ValueError("cannot downsample an order-0 feature map")
    n_out = vertex_count(fmap.sphere_order - 1)
    return SphericalFeatureMap(
        fmap.sphere_order - 1,
        fmap.values[:n_out].copy(),
        _transfer_mask(fmap.mask, n_out),
    )


def upsample_features(fmap: SphericalFeatureMap) -> SphericalFeatureMap:
    """Lift to the next-finer order; each new edge-midpoint vertex takes the
    mean of its two parent edge endpoints."""
    if fmap.sphere_order >= MAX_ORDER:
        raise ValueError(f"cannot upsample beyond order {MAX_ORDER}")
    fine = build_icosphere(fmap.sphere_order + 1)
    edges = fine.midpoint_edges
    new_vals = 0.5 * (fmap.values[edges[:, 0]] + fmap.values[edges[:, 1]])
    values = np.concatenate([fmap.values, new_vals], axis=0)
    mask = None
    if fmap.mask is not None:
        mask = np.concatenate(
            [fmap.mask, fmap.mask[edges[:, 0]] & fmap.mask[edges[:, 1]]]
        )
    return SphericalFeatureMap(fmap.sphere_order + 1, values, mask)


def pool_features(fmap: SphericalFeatureMap, mode: str = "mean") -> SphericalFeatureMap:
    """Pool {vertex} ∪ one-ring on the input sphere, then keep the coarse rows."""
    if mode not in ("mean", "max"):
        raise ValueError(f"unknown pooling mode {mode!r}")
    if fmap.sphere_order < 1:
        raise ValueError("cannot pool an order-0 feature map")
    sphere = build_icosphere(fmap.sphere_order)
    gathered = fmap.values[sphere.nbr_pad]  # (V, 7, C)
    if mode == "mean":
        w = sphere.nbr_mask[:, :, None].astype(np.float64)
        pooled = (gathered * w).sum(axis=1) / w.sum(axis=1)
    else:
        gathered = np.where(sphere.nbr_mask[:, :, None], gathered, -np.inf)
        pooled = gathered.max(axis=1)
    n_out = vertex_count(fmap.sphere_order - 1)
    return SphericalFeatureMap(
        fmap.sphere_order - 1, pooled[:n_out], _transfer_mask(fmap.mask, n_out)
    )


@dataclass(frozen=True)
class BarycentricMap:
    """Per-query (face index, three nonnegative weights summing to one)."""

    source_order: int
    face_index: np.ndarray
    weights: np.ndarray


def _face_weights(queries: np.ndarray, tri: np.ndarray) -> np.ndarray:
    """Unnormalized spherical barycentric weights of queries (N,3) in
    triangles tri (N,3,3): signed triple products against each opposite edge."""
    a, b, c = tri[:, 0], tri[:, 1], tri[:, 2]
    w = np.empty((queries.shape[0], 3))
    w[:, 0] = np.einsum("ij,ij->i", queries, np.cross(b, c))
    w[:, 1] = np.einsum("ij,ij->i", queries, np.cross(c, a))
    w[:, 2] = np.einsum("ij,ij->i", queries, np.cross(a, b))
    return w


def _exhaustive_locate(sphere: Icosphere, queries: np.ndarray) -> np.ndarray:
    tri = sphere.vertices[sphere.faces]  # (F, 3, 3)
    a, b, c = tri[:, 0], tri[:, 1], tri[:, 2]
    w0 = queries @ np.cross(b, c).T  # (N, F)
    w1 = queries @ np.cross(c, a).T
    w2 = queries @ np.cross(a, b).T
    score = _containment_score(w0, w1, w2)
    return np.argmax(score, axis=1)


def _containment_score(w0, w1, w2):
    """Larger is better; positive iff the query's gnomonic projection lies
    inside the face.  Far-side faces (non-positive weight sum) are excluded."""
    s = w0 + w1 + w2
    with np.errstate(divide="ignore", invalid="ignore"):
        score = np.minimum(np.minimum(w0, w1), w2) / s
    return np.where(s > 1e-12, score, -np.inf)


def locate_faces(sphere: Icosphere, queries: np.ndarray) -> np.ndarray:
    """Find, per unit query point, the face containing it.

    Exhaustive search at order <= 2, then hierarchical descent through the
    subdivision children (face f at order k splits into faces 4f..4f+3 at
    order k+1).  Ties on shared edges resolve to the lowest face index.
    """
    base_order = min(sphere.order, 2)
    faces = _exhaustive_locate(build_icosphere(base_order), queries)
    for level in range(base_order + 1, sphere.order + 1):
        fine = build_icosphere(level)
        cand = faces[:, None] * 4 + np.arange(4)[None, :]  # (N, 4)
        tri = fine.vertices[fine.faces[cand]]  # (N, 4, 3, 3)
        a, b, c = tri[:, :, 0], tri[:, :, 1], tri[:, :, 2]
        w0 = np.einsum("nj,nkj->nk", queries, np.cross(b, c))
        w1 = np.einsum("nj,nkj->nk", queries, np.cross(c, a))
        w2 = np.einsum("nj,nkj->nk", queries, np.cross(a, b))
        score = _containment_score(w0, w1, w2)
        faces = cand[np.arange(len(faces)), np.argmax(score, axis=1)]
    return faces


def barycentric_map(sphere: Icosphere, queries: np.ndarray) -> BarycentricMap:
    """Locate unit query points on the sphere and compute their barycentric
    weights in the containing face."""
    queries = np.asarray(queries, dtype=np.float64)
    if queries.ndim == 1:
        queries = queries[None, :]
    norms = np.linalg.norm(queries, axis=1)
    if np.any(norms < 1e-12):
        raise ValueError("degenerate (zero) query point")
    queries = queries / norms[:, None]
    faces = locate_faces(sphere, queries)
    tri = sphere.vertices[sphere.faces[faces]]
    w = _face_weights(queries, tri)
    w = np.clip(w, 0.0, None)
    w /= w.sum(axis=1, keepdims=True)
    return BarycentricMap(sphere.order, faces, w)


def interpolate(bmap: BarycentricMap, fmap: SphericalFeatureMap) -> np.ndarray:
    """Barycentric interpolation of feature rows at the map's query points."""
    if fmap.sphere_order != bmap.source_order:
        raise ValueError("barycentric map was built for a different sphere order")
    sphere = build_icosphere(bmap.source_order)
    if bmap.face_index.max(initial=-1) >= sphere.n_faces:
        raise ValueError("barycentric map references a face outside the mesh")
    corners = fmap.values[sphere.faces[bmap.face_index]]  # (N, 3, C)
    return np.einsum("nk,nkc->nc", bmap.weights, corners)


def tangent_basis(vertices: np.ndarray):
    """A deterministic orthonormal tangent frame (e1, e2) at each unit vertex."""
    n = vertices
    ref = np.where(
        np.abs(n[:, 2:3]) < 0.9,
        np.tile(np.array([0.0, 0.0, 1.0]), (len(n), 1)),
        np.tile(np.array([1.0, 0.0, 0.0]), (len(n), 1)),
    )
    e1 = ref - np.einsum("ij,ij->i", ref, n)[:, None] * n
    e1 /= np.linalg.norm(e1, axis=1, keepdims=True)
    e2 = np.cross(n, e1)
    return e1, e2


@lru_cache(maxsize=None)
def gradient_coefficients(order: int) -> np.ndarray:
    """Per-vertex linear stencil turning one-ring feature values into the
    least-squares tangent-plane gradient.

    Returns (V, 2, 7) coefficients aligned with ``Icosphere.nbr_pad``:
    applying them to gathered values gives the 2-vector gradient in the
    vertex's tangent frame.  Slot 0 (the vertex itself) carries minus the
    sum of the neighbor coefficients, so constants map to zero exactly.
    """
    sphere = build_icosphere(order)
    e1, e2 = tangent_basis(sphere.vertices)
    coeffs = np.zeros((sphere.n_vertices, 2, 7))
    for i, nb in enumerate(sphere.neighbors):
        off = sphere.vertices[nb] - sphere.vertices[i]
        p = np.stack([off @ e1[i], off @ e2[i]], axis=1)  # (deg, 2)
        w = np.linalg.solve(p.T @ p, p.T)  # (2, deg)
        coeffs[i, :, 1 : 1 + len(nb)] = w
        coeffs[i, :, 0] = -w.sum(axis=1)
    return coeffs


def hex_gradient_vectors(fmap: SphericalFeatureMap) -> np.ndarray:
    """Tangent-frame gradient 2-vectors, shape (V, 2, C)."""
    sphere = build_icosphere(fmap.sphere_order)
    coeffs = gradient_coefficients(fmap.sphere_order)
    gathered = fmap.values[sphere.nbr_pad]  # (V, 7, C)
    return np.einsum("vds,vsc->vdc", coeffs, gathered)


def hex_gradient(fmap: SphericalFeatureMap) -> np.ndarray:
    """Per-vertex, per-channel magnitude of the tangent-plane gradient."""
    g = hex_gradient_vectors(fmap)
    return np.sqrt((g**2).sum(axis=1))


def write_ico(path, sphere: Icosphere) -> None:
    with open(path, "w") as fh:
        fh.write(f"ICO1 {sphere.order} {sphere.n_vertices} {sphere.n_faces}\n")
        for v in sphere.vertices:
            fh.write(f"v {v[0]:.17g} {v[1]:.17g} {v[2]:.17g}\n")
        for f in sphere.faces:
            fh.write(f"f {f[0]} {f[1]} {f[2]}\n")


def read_ico(path) -> Icosphere:
    """Read an ICO1 file and return the matching constructed icosphere.

    The file must describe an icosphere this library generates; the stored
    vertices are checked against the reconstruction.
    """
    with open(path) as fh:
        header = fh.readline().split()
        if len(header) != 4 or header[0] != "ICO1":
            raise ValueError(f"{path}: not an ICO1 file")
        order, nv, nf = int(header[1]), int(header[2]), int(header[3])
        sphere = build_icosphere(order)
        if nv != sphere.n_vertices or nf != sphere.n_faces:
            raise ValueError(f"{path}: vertex/face counts do not match order {order}")
        verts = np.empty((nv, 3))
        for i in range(nv):
            parts = fh.readline().split()
            if len(parts) != 4 or parts[0] != "v":
                raise ValueError(f"{path}: bad vertex line {i + 2}")
            verts[i] = [float(x) for x in parts[1:]]
    if not np.allclose(verts, sphere.vertices, atol=1e-9):
        raise ValueError(f"{path}: vertices differ from the canonical icosphere")
    return sphere


def write_sfm(path, fmap: SphericalFeatureMap) -> None:
    has_mask = 1 if fmap.mask is not None else 0
    n, c = fmap.values.shape
    with open(path, "w") as fh:
        fh.write(f"SFM1 {fmap.sphere_order} {n} {c} {has_mask}\n")
        for i in range(n):
            row = " ".join(f"{x:.17g}" for x in fmap.values[i])
            if has_mask:
                row += f" {int(fmap.mask[i])}"
            fh.write(row + "\n")


def read_sfm(path) -> SphericalFeatureMap:
    with open(path) as fh:
        header = fh.readline().split()
        if len(header) != 5 or header[0] != "SFM1":
            raise ValueError(f"{path}: line 1: not an SFM1 file")
        order, n, c, has_mask = (int(x) for x in header[1:])
        if n != vertex_count(order):
            raise ValueError(f"{path}: line 1: vertex count does not match order")
        values = np.empty((n, c))
        mask = np.empty(n, dtype=bool) if has_mask else None
        for i in range(n):
            parts = fh.readline().split()
            if len(parts) != c + has_mask:
                raise ValueError(f"{path}: line {i + 2}: expected {c + has_mask} columns")
            values[i] = [float(x) for x in parts[:c]]
            if has_mask:
                mask[i] = bool(int(parts[c]))
    return SphericalFeatureMap(order, values, mask)
