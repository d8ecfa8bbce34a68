"""Tests for the mixture-kernel surface convolutions and the networks."""

import numpy as np
import pytest

from spherereg import autodiff as ad
from spherereg import conv
from spherereg.conv import (
    Classifier,
    FcbBlock,
    FeatureExtractor,
    MoNetLayer,
    NetConfig,
    RegistrationNet,
    ResBlock,
    pseudo_coords,
    read_arch,
    tape_downsample,
    tape_maxpool,
    tape_upsample,
    write_arch,
)
from spherereg.mesh import (
    SphericalFeatureMap,
    build_icosphere,
    downsample_features,
    pool_features,
    upsample_features,
    vertex_count,
)
from spherereg.optim import ParamStore, grad_check


# -- pseudo-coordinates ----------------------------------------------------

def test_pseudo_coords_shapes_and_padding():
    pc = pseudo_coords(2)
    sphere = build_icosphere(2)
    assert pc.offsets.shape == (162, 7, 2)
    # self slot and padded slots carry exactly zero
    assert np.all(pc.offsets[:, 0, :] == 0.0)
    assert np.all(pc.offsets[~sphere.nbr_mask] == 0.0)
    # counts include the center: 6 for the 12 pentagons, 7 elsewhere
    assert sorted(set(pc.counts.tolist())) == [6.0, 7.0]
    assert np.sum(pc.counts == 6.0) == 12


def test_pseudo_coords_match_direct_formula():
    # [DERIVED] recompute the offsets for an arbitrary non-polar vertex
    # from the definition: (theta_y - theta_x, wrap(phi_y - phi_x) sin theta_x)
    sphere = build_icosphere(2)
    pc = pseudo_coords(2)
    v = sphere.vertices
    x = 37
    assert abs(abs(v[x, 2]) - 1.0) > 1e-3  # not at a coordinate pole
    tx = np.arccos(v[x, 2])
    px = np.arctan2(v[x, 1], v[x, 0])
    for s, y in enumerate(sphere.nbr_pad[x]):
        if s == 0 or not sphere.nbr_mask[x, s]:
            continue
        ty = np.arccos(v[y, 2])
        py = np.arctan2(v[y, 1], v[y, 0])
        dphi = (py - px + np.pi) % (2 * np.pi) - np.pi
        assert pc.offsets[x, s, 0] == pytest.approx(ty - tx, abs=1e-12)
        assert pc.offsets[x, s, 1] == pytest.approx(dphi * np.sin(tx), abs=1e-12)


def test_pseudo_coords_bounded_by_edge_length():
    # offsets live on the tangent chart, so their norm is close to the
    # geodesic edge length (inflated near the poles by chart distortion,
    # but never more than pi)
    for order in (1, 3):
        pc = pseudo_coords(order)
        norms = np.linalg.norm(pc.offsets, axis=2)[pc.mask]
        assert norms[norms > 0].min() > 0
        assert norms.max() <= np.pi + 1e-9


def test_pseudo_coords_finite_everywhere():
    for order in range(5):
        assert np.all(np.isfinite(pseudo_coords(order).offsets))


# -- MoNet layer -----------------------------------------------------------

def _single_kernel_layer(sigma2=0.1, mu=(0.0, 0.0)):
    """A 1-kernel 1->1 layer with hand-set parameters and unit mixing."""
    store = ParamStore()
    rng = np.random.Generator(np.random.Philox(0))
    layer = MoNetLayer(store, "m", 1, 1, 1, 0.5, rng)
    store["m.mu"].value = np.array([list(mu)])
    lraw = np.zeros((1, 3))
    lraw[:, 0] = lraw[:, 2] = 0.5 * np.log(sigma2)
    store["m.lraw"].value = lraw
    store["m.g"].value = np.ones((1, 1, 1))
    return store, layer


def test_kernel_weights_isotropic_oracle():
    # [DERIVED] with Sigma = sigma^2 I and mean mu the weight is the plain
    # isotropic Gaussian of the offset
    store, layer = _single_kernel_layer(sigma2=0.07, mu=(0.1, -0.05))
    pc = pseudo_coords(1)
    w = layer.kernel_weights(pc).value[:, :, 0]
    d = pc.offsets - np.array([0.1, -0.05])
    expect = np.exp(-0.5 * (d**2).sum(axis=2) / 0.07)
    expect[~pc.mask] = 0.0
    assert np.allclose(w, expect, atol=1e-12)


def test_covariances_match_parameterization():
    store, layer = _single_kernel_layer(sigma2=0.1)
    sig = layer.covariances()
    assert np.allclose(sig, 0.1 * np.eye(2), atol=1e-12)


def test_constant_field_convolution_oracle():
    # [DERIVED] constant input c with unit mixing: out_v = c * mean ring weight
    store, layer = _single_kernel_layer()
    pc = pseudo_coords(1)
    w = layer.kernel_weights(pc).value[:, :, 0]
    const = 3.25
    x = ad.constant(np.full((42, 1), const))
    out = layer.forward(pc, x).value[:, 0]
    assert np.allclose(out, const * w.sum(axis=1) / pc.counts, atol=1e-12)


def test_monet_channel_mismatch_rejected():
    store = ParamStore()
    rng = np.random.Generator(np.random.Philox(0))
    layer = MoNetLayer(store, "m", 3, 2, 4, 0.5, rng)
    with pytest.raises(ValueError):
        layer.forward(pseudo_coords(1), ad.constant(np.zeros((42, 5))))


def test_monet_gradients_finite_difference():
    store = ParamStore()
    rng = np.random.Generator(np.random.Philox(7))
    layer = MoNetLayer(store, "m", 2, 3, 4, pseudo_coords(1).box, rng)
    x = rng.standard_normal((42, 2))
    probe = rng.standard_normal((42, 3))

    def loss_fn(params):
        out = layer.forward(pseudo_coords(1), ad.constant(x))
        return ad.sum_(out * probe)

    assert grad_check(loss_fn, store, n_probes=20, seed=1) < 1e-4


# -- tape-level transfers match the numpy references -----------------------

def test_tape_transfers_match_feature_ops():
    rng = np.random.Generator(np.random.Philox(3))
    vals = rng.standard_normal((vertex_count(2), 4))
    fmap = SphericalFeatureMap(2, vals)
    t = ad.constant(vals)
    assert np.array_equal(tape_downsample(t, 2).value,
                          downsample_features(fmap).values)
    assert np.array_equal(tape_upsample(t, 2).value,
                          upsample_features(fmap).values)
    assert np.array_equal(tape_maxpool(t, 2).value,
                          pool_features(fmap, "max").values)


# -- blocks ----------------------------------------------------------------

def test_fcb_block_shape_and_order():
    store = ParamStore()
    rng = np.random.Generator(np.random.Philox(5))
    blk = FcbBlock(store, "b0", 2, 3, 4, 3, 6, "A", 4, rng)
    x = ad.constant(rng.standard_normal((vertex_count(2), 3)))
    raw = ad.constant(rng.standard_normal((vertex_count(1), 3)))
    out = blk.forward(x, raw)
    assert out.shape == (vertex_count(1), 6)
    with pytest.raises(ValueError):
        blk.forward(raw, raw)  # features at the wrong order


def test_resblock_identity_skip_when_convs_zeroed():
    # [DERIVED] zeroing the mixing weights leaves LeakyReLU(x) of the skip
    store = ParamStore()
    rng = np.random.Generator(np.random.Philox(5))
    blk = ResBlock(store, "r0", 1, 3, 3, 4, rng)
    store["r0.conv1.g"].value[:] = 0.0
    store["r0.conv2.g"].value[:] = 0.0
    x = rng.standard_normal((42, 3))
    out = blk.forward(ad.constant(x)).value
    assert np.allclose(out, np.where(x > 0, x, 0.2 * x), atol=1e-15)


def test_resblock_projection_created_only_when_needed():
    store = ParamStore()
    rng = np.random.Generator(np.random.Philox(5))
    ResBlock(store, "a", 1, 3, 3, 2, rng)
    assert "a.proj" not in store
    ResBlock(store, "b", 1, 3, 5, 2, rng)
    assert "b.proj" in store


# -- architecture config ---------------------------------------------------

def _tiny_cfg(**kw):
    base = dict(input_order=2, in_channels=2, fcb_channels=(4, 4),
                res_channels=(6, 10), control_order=1, label_order=2,
                n_labels=10, n_kernels=3, shared_fcbs=1)
    base.update(kw)
    return NetConfig(**base)


def test_netconfig_properties():
    cfg = _tiny_cfg()
    assert cfg.latent_order == 0
    assert cfg.fcb_gates == ("A", "B")


def test_netconfig_validation():
    with pytest.raises(ValueError):
        _tiny_cfg(res_channels=(6, 7))  # last width != n_labels
    with pytest.raises(ValueError):
        _tiny_cfg(fcb_channels=(4, 4, 4))  # latent below order 0
    with pytest.raises(ValueError):
        _tiny_cfg(res_channels=(6, 6, 10))  # does not return to input order
    with pytest.raises(ValueError):
        _tiny_cfg(label_order=1)  # label sphere not finer than control
    with pytest.raises(ValueError):
        _tiny_cfg(n_labels=200, res_channels=(6, 200))  # too many labels


def test_extractor_and_classifier_shapes():
    cfg = _tiny_cfg()
    store = ParamStore()
    rng = np.random.Generator(np.random.Philox(11))
    net = RegistrationNet(store, cfg, rng)
    v = vertex_count(cfg.input_order)
    moving = rng.standard_normal((v, cfg.in_channels))
    fixed = rng.standard_normal((v, cfg.in_channels))
    latent = net.extractor.forward(moving, fixed)
    assert latent.shape == (vertex_count(cfg.latent_order),
                            2 * cfg.fcb_channels[-1])
    logits = net.classifier.forward(latent)
    assert logits.shape == (vertex_count(cfg.control_order), cfg.n_labels)


def test_shared_blocks_share_parameters():
    cfg = _tiny_cfg(shared_fcbs=1)
    store = ParamStore()
    rng = np.random.Generator(np.random.Philox(11))
    FeatureExtractor(store, cfg, rng)
    names = store.names()
    # first block is per-path, second is shared
    assert any(n.startswith("fx.m.b0") for n in names)
    assert any(n.startswith("fx.f.b0") for n in names)
    assert any(n.startswith("fx.s.b1") for n in names)
    assert not any(n.startswith("fx.m.b1") for n in names)


def test_network_initialization_deterministic():
    cfg = _tiny_cfg()
    stores = []
    for _ in range(2):
        store = ParamStore()
        RegistrationNet(store, cfg, np.random.Generator(np.random.Philox(42)))
        stores.append(store)
    assert stores[0].names() == stores[1].names()
    for name in stores[0].names():
        assert np.array_equal(stores[0][name].value, stores[1][name].value)


def test_classifier_rejects_wrong_latent_order():
    cfg = _tiny_cfg()
    store = ParamStore()
    rng = np.random.Generator(np.random.Philox(1))
    cls = Classifier(store, cfg, rng)
    bad = ad.constant(np.zeros((42, 2 * cfg.fcb_channels[-1])))
    with pytest.raises(ValueError):
        cls.forward(bad)


def test_arch_roundtrip(tmp_path):
    cfg = _tiny_cfg()
    path = tmp_path / "net.arch"
    write_arch(path, cfg)
    back = read_arch(path)
    assert back == cfg


def test_arch_missing_key_rejected(tmp_path):
    path = tmp_path / "bad.arch"
    path.write_text("input_order = 2\n")
    with pytest.raises(ValueError):
        read_arch(path)
