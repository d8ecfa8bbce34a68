"""The discrete deformation alphabet and everything that moves features
around the sphere: per-control-point candidate endpoints, probability-
weighted deformation, barycentric upsampling of control displacements, and
resampling of moving features through a warped vertex cloud."""

from __future__ import annotations

from dataclasses import dataclass
from functools import lru_cache

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .mesh import (
    Icosphere,
    SphericalFeatureMap,
    _containment_score,
    barycentric_map,
    build_icosphere,
    interpolate,
    vertex_count,
)

DEGENERATE_NORM = 1e-6


@dataclass(frozen=True)
class ControlGrid:
    control_order: int
    points: np.ndarray  # (N_c, 3) unit vectors


def control_grid(order: int) -> ControlGrid:
    return ControlGrid(order, build_icosphere(order).vertices)


@dataclass(frozen=True)
class LabelSpace:
    """Ordered candidate endpoints per control point, nearest first."""

    control_order: int
    label_order: int
    n_labels: int
    indices: np.ndarray  # (N_c, N_l) into the label sphere
    endpoints: np.ndarray  # (N_c, N_l, 3)

    def max_radius(self) -> float:
        """Largest geodesic distance from any control point to its labels."""
        control = build_icosphere(self.control_order).vertices
        dots = np.einsum("id,ikd->ik", control, self.endpoints)
        return float(np.arccos(np.clip(dots, -1.0, 1.0)).max())


def build_label_space(control: ControlGrid, label_order: int,
                      n_labels: int) -> LabelSpace:
    """The geodesically nearest ``n_labels`` label-sphere vertices per
    control point, ties broken by vertex index."""
    if label_order <= control.control_order:
        raise ValueError("label sphere must be finer than the control grid")
    label_sphere = build_icosphere(label_order)
    if n_labels > label_sphere.n_vertices:
        raise ValueError(
            f"{n_labels} labels requested but the order-{label_order} sphere "
            f"has {label_sphere.n_vertices} vertices"
        )
    dots = control.points @ label_sphere.vertices.T
    dist = np.arccos(np.clip(dots, -1.0, 1.0))
    # stable argsort on (distance, index)
    order = np.argsort(dist, axis=1, kind="stable")[:, :n_labels]
    return LabelSpace(
        control.control_order, label_order, n_labels,
        order, label_sphere.vertices[order],
    )


@dataclass
class DeformationField:
    """Per-vertex unit endpoint of the deformation on an icosphere."""

    order: int
    endpoints: np.ndarray

    def __post_init__(self):
        self.endpoints = np.asarray(self.endpoints, dtype=np.float64)
        if self.endpoints.shape != (vertex_count(self.order), 3):
            raise ValueError("endpoint array does not match the sphere order")


def identity_field(order: int) -> DeformationField:
    return DeformationField(order, build_icosphere(order).vertices.copy())


def soft_deform_tensor(labels: LabelSpace, q: Tensor) -> Tensor:
    """Probability-weighted label endpoints, renormalized to the sphere.

    Rows whose expectation nearly cancels fall back to the most probable
    label endpoint (constant w.r.t. the tape).
    """
    expect = ad.einsum("ik,ikd->id", q, labels.endpoints)
    norms = np.linalg.norm(expect.value, axis=1)
    ok = norms >= DEGENERATE_NORM
    if not ok.all():
        best = np.argmax(q.value, axis=1)
        fallback = labels.endpoints[np.arange(len(best)), best]
        expect = ad.where_const(ok[:, None], expect, 0.0) + \
            np.where(ok[:, None], 0.0, fallback)
    return ad.normalize_rows(expect)


def soft_deform(control: ControlGrid, labels: LabelSpace,
                q: np.ndarray) -> DeformationField:
    if q.shape != (len(control.points), labels.n_labels):
        raise ValueError("probability matrix shape does not match the label space")
    out = soft_deform_tensor(labels, ad.constant(q))
    return DeformationField(control.control_order, out.value)


def argmax_deform(control: ControlGrid, labels: LabelSpace,
                  q: np.ndarray) -> DeformationField:
    best = np.argmax(q, axis=1)
    return DeformationField(
        control.control_order,
        labels.endpoints[np.arange(len(best)), best].copy(),
    )


@lru_cache(maxsize=None)
def _transfer_map(coarse_order: int, fine_order: int):
    """Barycentric map of the fine sphere's vertices on the coarse sphere."""
    coarse = build_icosphere(coarse_order)
    fine = build_icosphere(fine_order)
    return barycentric_map(coarse, fine.vertices)


def upsample_deformation_tensor(endpoints: Tensor, coarse_order: int,
                                target_order: int) -> Tensor:
    """Interpolate the coarse displacement field barycentrically onto the
    target sphere's vertices and renormalize."""
    coarse = build_icosphere(coarse_order)
    target = build_icosphere(target_order)
    bmap = _transfer_map(coarse_order, target_order)
    disp = endpoints - coarse.vertices
    corners = ad.gather(disp, coarse.faces[bmap.face_index])  # (V_t, 3, 3)
    interp = ad.einsum("nk,nkd->nd", bmap.weights, corners)
    return ad.normalize_rows(interp + target.vertices)


def upsample_deformation(coarse: DeformationField,
                         target: Icosphere) -> DeformationField:
    if target.order <= coarse.order:
        raise ValueError("target sphere must be finer than the control grid")
    out = upsample_deformation_tensor(ad.constant(coarse.endpoints),
                                      coarse.order, target.order)
    return DeformationField(target.order, out.value)


def locate_warped_faces(endpoints: np.ndarray, sphere: Icosphere,
                        queries: np.ndarray) -> np.ndarray:
    """Per query, the face of the warped vertex cloud containing it.

    Candidates come from the one- then two-ring of the nearest warped
    vertex, with an exhaustive sweep for any stragglers, so the result is
    deterministic even when the warp slightly shears the mesh.
    """
    nearest = np.argmax(queries @ endpoints.T, axis=1)
    faces, score = _best_subset(endpoints, sphere, queries,
                                sphere.vertex_faces[nearest])
    missing = score < -1e-9
    if missing.any():
        ring2 = sphere.vertex_faces[sphere.nbr_pad[nearest[missing]]]
        cand2, score2 = _best_subset(endpoints, sphere,
                                     queries[missing],
                                     ring2.reshape(missing.sum(), -1))
        faces[missing] = cand2
        score[missing] = score2
        missing2 = np.zeros_like(missing)
        missing2[missing] = score2 < -1e-9
        if missing2.any():
            tri = endpoints[sphere.faces]
            a, b, c = tri[:, 0], tri[:, 1], tri[:, 2]
            qq = queries[missing2]
            w0 = qq @ np.cross(b, c).T
            w1 = qq @ np.cross(c, a).T
            w2 = qq @ np.cross(a, b).T
            faces[missing2] = np.argmax(_containment_score(w0, w1, w2), axis=1)
    return faces


def _best_subset(endpoints, sphere, queries, cand):
    tri = endpoints[sphere.faces[np.clip(cand, 0, None)]]
    a, b, c = tri[:, :, 0], tri[:, :, 1], tri[:, :, 2]
    w0 = np.einsum("nj,nkj->nk", queries, np.cross(b, c))
    w1 = np.einsum("nj,nkj->nk", queries, np.cross(c, a))
    w2 = np.einsum("nj,nkj->nk", queries, np.cross(a, b))
    score = _containment_score(w0, w1, w2)
    score = np.where(cand >= 0, score, -np.inf)
    pick = np.argmax(score, axis=1)
    rows = np.arange(len(queries))
    return cand[rows, pick], score[rows, pick]


def resample_tensor(moving_values: np.ndarray, endpoints: Tensor,
                    order: int) -> Tensor:
    """Pull moving features through the warp onto the fixed sphere.

    The moving vertices are carried to ``endpoints``; each fixed-sphere
    vertex is then interpolated inside the warped face containing it.  The
    weights stay differentiable w.r.t. the endpoints; the face assignment
    itself is a constant of the tape.
    """
    sphere = build_icosphere(order)
    queries = sphere.vertices
    faces = locate_warped_faces(endpoints.value, sphere, queries)
    corner_idx = sphere.faces[faces]  # (V, 3)
    a = ad.gather(endpoints, corner_idx[:, 0])
    b = ad.gather(endpoints, corner_idx[:, 1])
    c = ad.gather(endpoints, corner_idx[:, 2])
    w0 = ad.sum_(queries * ad.cross(b, c), axis=1, keepdims=True)
    w1 = ad.sum_(queries * ad.cross(c, a), axis=1, keepdims=True)
    w2 = ad.sum_(queries * ad.cross(a, b), axis=1, keepdims=True)
    total = w0 + w1 + w2
    vals = moving_values
    out = (w0 / total) * vals[corner_idx[:, 0]] + \
          (w1 / total) * vals[corner_idx[:, 1]] + \
          (w2 / total) * vals[corner_idx[:, 2]]
    return out


def resample_moving(moving: SphericalFeatureMap, warped: DeformationField,
                    fixed_sphere: Icosphere) -> SphericalFeatureMap:
    if warped.order != moving.sphere_order:
        raise ValueError("deformation field is not at the moving map's order")
    if fixed_sphere.order != moving.sphere_order:
        raise ValueError("fixed sphere order differs from the moving map's")
    out = resample_tensor(moving.values, ad.constant(warped.endpoints),
                          fixed_sphere.order)
    mask = None
    if moving.mask is not None:
        # a fixed vertex stays valid only if its whole containing warped face is
        faces = locate_warped_faces(warped.endpoints, fixed_sphere,
                                    fixed_sphere.vertices)
        mask = moving.mask[fixed_sphere.faces[faces]].all(axis=1)
    return SphericalFeatureMap(fixed_sphere.order, out.value, mask)


def compose(first: DeformationField, second: DeformationField) -> DeformationField:
    """Apply ``first`` then ``second``: evaluate the second displacement
    field barycentrically at the first field's endpoints."""
    if first.order != second.order:
        raise ValueError("cannot compose fields at different orders")
    sphere = build_icosphere(first.order)
    bmap = barycentric_map(sphere, first.endpoints)
    disp = SphericalFeatureMap(second.order, second.endpoints - sphere.vertices)
    moved = first.endpoints + interpolate(bmap, disp)
    moved /= np.linalg.norm(moved, axis=1, keepdims=True)
    return DeformationField(first.order, moved)


def write_def(path, field: DeformationField) -> None:
    with open(path, "w") as fh:
        fh.write(f"DEF1 {field.order} {len(field.endpoints)}\n")
        for p in field.endpoints:
            fh.write(f"{p[0]:.17g} {p[1]:.17g} {p[2]:.17g}\n")


def read_def(path) -> DeformationField:
    with open(path) as fh:
        header = fh.readline().split()
        if len(header) != 3 or header[0] != "DEF1":
            raise ValueError(f"{path}: not a DEF1 file")
        order, n = int(header[1]), int(header[2])
        if n != vertex_count(order):
            raise ValueError(f"{path}: vertex count does not match order {order}")
        pts = np.empty((n, 3))
        for i in range(n):
            pts[i] = [float(x) for x in fh.readline().split()]
    return DeformationField(order, pts)
