import json

import numpy as np
import pytest

from elastoreg import autodiff as ad
from elastoreg.network import (Arch, CheckpointVersionError, encode, init_model, load_checkpoint,
                               load_model, per_point_features, predict, save_model, tnet4)

from conftest import SMALL


def _q(n, seed=0):
    return np.random.default_rng(seed).normal(size=(n, 3)) * 0.2


def test_tnet_identity_at_init():
    m = init_model(0, SMALL)
    np.testing.assert_array_equal(tnet4(m, _q(30)), np.eye(4))


def test_tnet_keeps_homogeneous_row():
    m = init_model(1, SMALL)
    m.params["tnet.out.weight"] = np.random.default_rng(0).normal(size=(12, 16))
    t = tnet4(m, _q(20))
    np.testing.assert_array_equal(t[3], [0, 0, 0, 1])
    homog = np.c_[_q(5, 1), np.ones(5)] @ t.T
    np.testing.assert_array_equal(homog[:, 3], 1.0)


@pytest.mark.parametrize("seed", range(5))
def test_tnet_permutation_invariant(seed):
    m = init_model(seed, SMALL)
    m.params["tnet.out.weight"] = np.random.default_rng(seed).normal(size=(12, 16))
    q = _q(64, seed)
    perm = np.random.default_rng(seed + 10).permutation(64)
    assert tnet4(m, q).tobytes() == tnet4(m, q[perm]).tobytes()


def test_encode_single_point_is_its_feature():
    m = init_model(0, SMALL)
    q = _q(1)
    np.testing.assert_array_equal(encode(m, q), per_point_features(m, q)[0])


def test_encode_duplicates_change_nothing():
    m = init_model(0, SMALL)
    q = _q(40)
    assert encode(m, q).tobytes() == encode(m, np.vstack([q, q])).tobytes()


def test_encode_permutation_bitwise_full_width():
    m = init_model(3)
    q = _q(256, 3)
    g = encode(m, q)
    assert g.shape == (1024,)
    assert g.tobytes() == encode(m, q[np.random.default_rng(0).permutation(256)]).tobytes()


def test_default_arch_widths():
    m = init_model(0)
    assert m.arch.global_width == 1024
    assert m.arch.trunk_input_width == 2051
    assert m.params["trunk.0.weight"].shape == (1024, 2051)
    assert m.params["disp_head.weight"].shape == (3, 256)
    for k in range(6):
        assert m.params[f"stress_head.{k}.weight"].shape == (1, 256)


def test_init_seeds():
    a, b, c = init_model(4, SMALL), init_model(4, SMALL), init_model(5, SMALL)
    assert all(a.params[k].tobytes() == b.params[k].tobytes() for k in a.params)
    assert any(a.params[k].tobytes() != c.params[k].tobytes() for k in a.params)


def test_zero_heads_give_zero_outputs(cloud):
    m = init_model(0, SMALL, zero_heads=True)
    out = predict(m, cloud(30), cloud(17, 1)).numpy()
    for key in ("displacements", "stresses", "disp_grad", "stress_grad"):
        assert np.all(out[key] == 0), key
    assert out["displacements"].shape == (30, 3) and out["stresses"].shape == (30, 6)


def test_rows_follow_source_not_target(cloud):
    m = init_model(0, SMALL)
    for nt in (5, 50):
        out = predict(m, cloud(12), cloud(nt, 2), want_gradients=False)
        assert out.displacements.shape == (12, 3)


def test_source_permutation_equivariance(cloud):
    m = init_model(2, SMALL)
    src, tgt = cloud(40), cloud(35, 1)
    perm = np.random.default_rng(1).permutation(40)
    a = predict(m, src, tgt).numpy()
    b = predict(m, src[perm], tgt).numpy()
    for key in a:
        np.testing.assert_allclose(b[key], a[key][perm], rtol=1e-12, atol=1e-12)


def test_target_permutation_invariance(cloud):
    m = init_model(2, SMALL)
    src, tgt = cloud(40), cloud(35, 1)
    perm = np.random.default_rng(2).permutation(35)
    a = predict(m, src, tgt).numpy()
    b = predict(m, src, tgt[perm]).numpy()
    for key in a:
        assert a[key].tobytes() == b[key].tobytes()


def test_gradient_and_plain_paths_agree(cloud):
    m = init_model(7, SMALL)
    src, tgt = cloud(25), cloud(25, 3)
    a = predict(m, src, tgt, want_gradients=True)
    b = predict(m, src, tgt, want_gradients=False)
    np.testing.assert_allclose(a.displacements.data, b.displacements.data, rtol=1e-12, atol=1e-12)
    np.testing.assert_allclose(a.stresses.data, b.stresses.data, rtol=1e-12, atol=1e-12)
    assert b.disp_grad is None and not b.has_gradients and a.has_gradients


def _fd_jacobians(m, src, tgt, pts, h=1e-4):
    """Central differences in mm with the global features frozen (query path)."""
    jd = np.zeros((len(pts), 3, 3))
    js = np.zeros((len(pts), 6, 3))
    for j in range(3):
        e = np.zeros(3)
        e[j] = h
        hi = predict(m, src, tgt, want_gradients=False, query=pts + e)
        lo = predict(m, src, tgt, want_gradients=False, query=pts - e)
        jd[:, :, j] = (hi.displacements.data - lo.displacements.data) / (2 * h)
        js[:, :, j] = (hi.stresses.data - lo.stresses.data) / (2 * h)
    return jd, js


@pytest.mark.parametrize("arch", [SMALL, Arch(), Arch(concat_transformed_coords=True,
                                                          stress_scale_kpa=50.0)],
                         ids=["small", "full", "transformed"])
def test_spatial_jacobians_match_fd(arch, cloud):
    m = init_model(11, arch)
    if arch.concat_transformed_coords:
        m.params["tnet.out.weight"] = np.random.default_rng(0).normal(
            size=m.params["tnet.out.weight"].shape) * 0.05
    src, tgt = cloud(24), cloud(20, 5)
    out = predict(m, src, tgt).numpy()
    jd, js = _fd_jacobians(m, src, tgt, src)
    for a, fd in ((out["disp_grad"], jd), (out["stress_grad"], js)):
        err = np.abs(a - fd).max() / np.abs(fd).max()
        assert err < 1e-4


def test_tanh_trunk_jacobians_match_fd(cloud):
    m = init_model(4, Arch(tnet_point=(16,), tnet_fc=(8,), encoder=(16,), trunk=(32, 16),
                           hidden=8, trunk_activation="tanh"))
    src, tgt = cloud(10), cloud(10, 1)
    out = predict(m, src, tgt).numpy()
    jd, _ = _fd_jacobians(m, src, tgt, src)
    assert np.abs(out["disp_grad"] - jd).max() / np.abs(jd).max() < 1e-4


def test_bad_inputs(cloud):
    m = init_model(0, SMALL)
    with pytest.raises(ad.StructuralError):
        predict(m, np.zeros((0, 3)), cloud(4))
    with pytest.raises(ad.StructuralError):
        predict(m, np.zeros((4, 2)), cloud(4))
    bad = m.copy()
    bad.params["trunk.0.weight"] = bad.params["trunk.0.weight"][:, :-1]
    with pytest.raises(ad.StructuralError):
        predict(bad, cloud(4), cloud(4))
    with pytest.raises(ValueError):
        Arch(trunk_activation="gelu")


def test_checkpoint_roundtrip_bitwise(tmp_path):
    m = init_model(9, SMALL)
    opt = {"t": 3, "m": {k: v * 0.5 for k, v in m.params.items()}}
    path = tmp_path / "m.json"
    save_model(m, path, opt, {"epochs_done": 3})
    ck = load_checkpoint(path)
    back = ck["model"]
    assert back.arch == m.arch and back.seed == 9
    assert all(back.params[k].tobytes() == m.params[k].tobytes() for k in m.params)
    assert ck["optimizer"]["t"] == 3
    assert ck["optimizer"]["m"]["hidden.bias"].tobytes() == opt["m"]["hidden.bias"].tobytes()
    assert ck["extra"] == {"epochs_done": 3}


def test_checkpoint_version_errors(tmp_path):
    path = tmp_path / "m.json"
    save_model(init_model(0, SMALL), path)
    doc = json.loads(path.read_text())
    doc["version"] = 99
    path.write_text(json.dumps(doc))
    with pytest.raises(CheckpointVersionError):
        load_model(path)
    path.write_text(json.dumps({"format": "other"}))
    with pytest.raises(CheckpointVersionError):
        load_model(path)
