"""Tests for the discrete deformation machinery and warped resampling."""

import numpy as np
import pytest

from spherereg import autodiff as ad
from spherereg.mesh import SphericalFeatureMap, build_icosphere, vertex_count
from spherereg.optim import ParamStore, grad_check
from spherereg.warp import (
    DeformationField,
    LabelSpace,
    argmax_deform,
    build_label_space,
    compose,
    control_grid,
    identity_field,
    locate_warped_faces,
    read_def,
    resample_moving,
    resample_tensor,
    soft_deform,
    soft_deform_tensor,
    upsample_deformation,
    write_def,
)


def _rotation(axis, angle):
    axis = np.asarray(axis, dtype=float)
    axis /= np.linalg.norm(axis)
    k = np.array([[0, -axis[2], axis[1]],
                  [axis[2], 0, -axis[0]],
                  [-axis[1], axis[0], 0]])
    return np.eye(3) + np.sin(angle) * k + (1 - np.cos(angle)) * (k @ k)


# -- label space -----------------------------------------------------------

def test_label_space_nearest_is_self():
    # control vertices are nested in the finer label sphere with the same
    # index, so the nearest label of control point i is i itself
    labels = build_label_space(control_grid(1), 3, 12)
    assert np.array_equal(labels.indices[:, 0], np.arange(42))


def test_label_space_distances_nondecreasing():
    control = control_grid(1)
    labels = build_label_space(control, 2, 20)
    dots = np.einsum("id,ikd->ik", control.points, labels.endpoints)
    dist = np.arccos(np.clip(dots, -1, 1))
    assert np.all(np.diff(dist, axis=1) >= -1e-12)


def test_label_space_max_radius():
    labels = build_label_space(control_grid(1), 3, 12)
    r = labels.max_radius()
    assert 0 < r < np.pi / 2
    # with more labels the neighborhood can only grow
    wider = build_label_space(control_grid(1), 3, 40)
    assert wider.max_radius() >= r


def test_label_space_validation():
    with pytest.raises(ValueError):
        build_label_space(control_grid(2), 2, 5)
    with pytest.raises(ValueError):
        build_label_space(control_grid(1), 2, 1000)


# -- soft deformation ------------------------------------------------------

def test_soft_deform_one_hot_hits_endpoints():
    control = control_grid(1)
    labels = build_label_space(control, 2, 6)
    rng = np.random.Generator(np.random.Philox(0))
    pick = rng.integers(6, size=42)
    q = np.zeros((42, 6))
    q[np.arange(42), pick] = 1.0
    field = soft_deform(control, labels, q)
    assert np.allclose(field.endpoints,
                       labels.endpoints[np.arange(42), pick], atol=1e-15)
    hard = argmax_deform(control, labels, q)
    assert np.allclose(field.endpoints, hard.endpoints, atol=1e-15)


def test_soft_deform_uniform_is_normalized_mean():
    control = control_grid(1)
    labels = build_label_space(control, 2, 6)
    q = np.full((42, 6), 1.0 / 6.0)
    field = soft_deform(control, labels, q)
    mean = labels.endpoints.mean(axis=1)
    expect = mean / np.linalg.norm(mean, axis=1, keepdims=True)
    assert np.allclose(field.endpoints, expect, atol=1e-12)
    assert np.allclose(np.linalg.norm(field.endpoints, axis=1), 1.0, atol=1e-12)


def test_soft_deform_degenerate_falls_back_to_argmax():
    # two antipodal candidates with equal mass cancel; the fallback picks
    # the (first) most probable endpoint
    e = np.array([[[0.0, 0.0, 1.0], [0.0, 0.0, -1.0]]])
    labels = LabelSpace(0, 1, 2, np.array([[0, 1]]), e)
    q = ad.constant(np.array([[0.5, 0.5]]))
    out = soft_deform_tensor(labels, q)
    assert np.allclose(out.value, [[0.0, 0.0, 1.0]], atol=1e-15)


def test_soft_deform_shape_check():
    control = control_grid(1)
    labels = build_label_space(control, 2, 6)
    with pytest.raises(ValueError):
        soft_deform(control, labels, np.zeros((42, 5)))


def test_soft_deform_gradients_finite_difference():
    labels = build_label_space(control_grid(0), 2, 5)
    rng = np.random.Generator(np.random.Philox(2))
    store = ParamStore()
    store.add("q", rng.random((12, 5)) + 0.1)
    probe = rng.standard_normal((12, 3))

    def loss_fn(params):
        out = soft_deform_tensor(labels, ad.softmax_rows(params["q"]))
        return ad.sum_(out * probe)

    assert grad_check(loss_fn, store, n_probes=15, seed=3) < 1e-4


# -- upsampling and composition --------------------------------------------

def test_upsample_identity_stays_identity():
    fine = build_icosphere(3)
    up = upsample_deformation(identity_field(1), fine)
    assert np.allclose(up.endpoints, fine.vertices, atol=1e-12)


def test_upsample_rotation_stays_rotation():
    # a global rotation is linear, so barycentric interpolation of its
    # displacement reproduces it (up to the radial renormalization)
    rot = _rotation([1, 2, 3], 0.05)
    coarse = DeformationField(2, build_icosphere(2).vertices @ rot.T)
    fine = build_icosphere(4)
    up = upsample_deformation(coarse, fine)
    assert np.allclose(up.endpoints, fine.vertices @ rot.T, atol=2e-3)


def test_upsample_requires_finer_target():
    with pytest.raises(ValueError):
        upsample_deformation(identity_field(2), build_icosphere(1))


def test_compose_with_identity():
    rot = _rotation([0, 0, 1], 0.1)
    field = DeformationField(2, build_icosphere(2).vertices @ rot.T)
    ident = identity_field(2)
    left = compose(ident, field)
    right = compose(field, ident)
    assert np.allclose(left.endpoints, field.endpoints, atol=1e-12)
    assert np.allclose(right.endpoints, field.endpoints, atol=1e-12)


def test_compose_two_rotations():
    r1 = _rotation([0, 0, 1], 0.08)
    r2 = _rotation([1, 0, 0], 0.06)
    sphere = build_icosphere(3)
    f1 = DeformationField(3, sphere.vertices @ r1.T)
    f2 = DeformationField(3, sphere.vertices @ r2.T)
    both = compose(f1, f2)
    expect = sphere.vertices @ (r2 @ r1).T
    assert np.allclose(both.endpoints, expect, atol=2e-3)


def test_compose_order_mismatch_rejected():
    with pytest.raises(ValueError):
        compose(identity_field(1), identity_field(2))


# -- face location and resampling ------------------------------------------

def test_locate_warped_faces_identity_contains_queries():
    sphere = build_icosphere(2)
    rng = np.random.Generator(np.random.Philox(9))
    q = rng.standard_normal((200, 3))
    q /= np.linalg.norm(q, axis=1, keepdims=True)
    faces = locate_warped_faces(sphere.vertices, sphere, q)
    tri = sphere.vertices[sphere.faces[faces]]
    w0 = np.einsum("ij,ij->i", q, np.cross(tri[:, 1], tri[:, 2]))
    w1 = np.einsum("ij,ij->i", q, np.cross(tri[:, 2], tri[:, 0]))
    w2 = np.einsum("ij,ij->i", q, np.cross(tri[:, 0], tri[:, 1]))
    assert np.all(np.minimum(np.minimum(w0, w1), w2) >= -1e-9)


def test_resample_identity_reproduces_values():
    sphere = build_icosphere(3)
    rng = np.random.Generator(np.random.Philox(4))
    vals = rng.standard_normal((sphere.n_vertices, 2))
    moving = SphericalFeatureMap(3, vals)
    out = resample_moving(moving, identity_field(3), sphere)
    assert np.allclose(out.values, vals, atol=1e-9)


def test_resample_rotation_oracle():
    # [DERIVED] carry a linear field f(p) = p.a through a global rotation:
    # the value resampled at q approximates f(R^-1 q)
    sphere = build_icosphere(4)
    a = np.array([0.3, -1.1, 0.7])
    rot = _rotation([1, 1, 0], 0.12)
    moving = SphericalFeatureMap(4, (sphere.vertices @ a)[:, None])
    warped = DeformationField(4, sphere.vertices @ rot.T)
    out = resample_moving(moving, warped, sphere)
    expect = (sphere.vertices @ rot) @ a  # R^-1 q . a = q . R a
    assert np.allclose(out.values[:, 0], expect, atol=2e-3)


def test_resample_mask_propagation():
    sphere = build_icosphere(2)
    mask = np.ones(sphere.n_vertices, dtype=bool)
    mask[7] = False
    moving = SphericalFeatureMap(2, np.ones((sphere.n_vertices, 1)), mask)
    out = resample_moving(moving, identity_field(2), sphere)
    # the invalid vertex itself is in every incident face, so it is invalid
    assert not out.mask[7]
    # vertices far from it stay valid
    far = np.argmin(sphere.vertices @ sphere.vertices[7])
    assert out.mask[far]


def test_resample_order_checks():
    moving = SphericalFeatureMap(2, np.ones((162, 1)))
    with pytest.raises(ValueError):
        resample_moving(moving, identity_field(1), build_icosphere(2))
    with pytest.raises(ValueError):
        resample_moving(moving, identity_field(2), build_icosphere(1))


def test_resample_gradients_finite_difference():
    sphere = build_icosphere(1)
    rng = np.random.Generator(np.random.Philox(6))
    vals = rng.standard_normal((42, 2))
    rot = _rotation([0, 1, 1], 0.05)
    store = ParamStore()
    store.add("end", sphere.vertices @ rot.T)
    probe = rng.standard_normal((42, 2))

    def loss_fn(params):
        out = resample_tensor(vals, params["end"], 1)
        return ad.sum_(out * probe)

    assert grad_check(loss_fn, store, n_probes=20, seed=5) < 1e-4


# -- deformation field I/O -------------------------------------------------

def test_field_shape_validation():
    with pytest.raises(ValueError):
        DeformationField(1, np.zeros((41, 3)))


def test_def_roundtrip(tmp_path):
    rot = _rotation([2, 1, 0], 0.3)
    field = DeformationField(2, build_icosphere(2).vertices @ rot.T)
    path = tmp_path / "warp.def"
    write_def(path, field)
    back = read_def(path)
    assert back.order == 2
    assert np.array_equal(back.endpoints, field.endpoints)


def test_def_rejects_bad_header(tmp_path):
    path = tmp_path / "bad.def"
    path.write_text("NOPE 1 42\n")
    with pytest.raises(ValueError):
        read_def(path)
    path.write_text("DEF1 1 40\n")
    with pytest.raises(ValueError):
        read_def(path)
