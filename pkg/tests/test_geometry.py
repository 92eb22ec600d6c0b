import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from elastoreg.geometry import (GeometryError, KDTree, LandmarkPair, PointSet,
                                chamfer_distance_metric, chamfer_loss, deformation_magnitude,
                                nearest_neighbors, procrustes, read_landmarks, read_pointset,
                                read_vectors, rigid_residuals, rmse, tre, write_landmarks,
                                write_pointset, write_vectors)
from elastoreg.geometry import neighbors
from elastoreg.synthdata import rotation_matrix

BACKENDS = ["python"] + (["cython"] if neighbors._compiled is not None else [])


def cloud(n=50, seed=0, scale=10.0):
    return np.random.default_rng(seed).normal(size=(n, 3)) * scale


# --- chamfer / CD -------------------------------------------------------------------

def test_chamfer_identical_is_zero():
    p = cloud()
    assert chamfer_loss(p, p) == 0.0


def test_chamfer_hand_example():
    assert chamfer_loss([[0, 0, 0]], [[1, 0, 0], [3, 0, 0]]) == 6.0


def test_chamfer_translation_invariant():
    a, b = cloud(seed=1), cloud(seed=2)
    shift = np.array([5.0, -3.0, 2.5])
    assert chamfer_loss(a + shift, b + shift) == pytest.approx(chamfer_loss(a, b), rel=1e-12)


def test_chamfer_empty_subset_rejected():
    with pytest.raises(GeometryError):
        chamfer_loss(np.zeros((0, 3)), cloud())
    with pytest.raises(GeometryError):
        chamfer_distance_metric(cloud(), np.zeros((0, 3)))


def test_cd_examples():
    p = cloud()
    assert chamfer_distance_metric(p, p) == 0.0
    assert chamfer_distance_metric([[0, 0, 0]], [[2, 0, 0]]) == 2.0
    q = cloud(seed=3)
    perm = np.random.default_rng(4).permutation(len(q))
    assert chamfer_distance_metric(p, q[perm]) == pytest.approx(chamfer_distance_metric(p, q),
                                                               rel=1e-15)


@settings(max_examples=50, deadline=None)
@given(seed=st.integers(0, 10_000), n=st.integers(1, 40), m=st.integers(1, 40))
def test_chamfer_nonnegative_and_symmetric(seed, n, m):
    rng = np.random.default_rng(seed)
    a, b = rng.normal(size=(n, 3)), rng.normal(size=(m, 3))
    v = chamfer_loss(a, b)
    assert v >= 0
    assert v == pytest.approx(chamfer_loss(b, a), rel=1e-12)
    assert chamfer_distance_metric(a, b) >= 0


def test_chamfer_zero_iff_coincident():
    a = cloud(10)
    b = np.vstack([a, a[:3]])           # same support, with duplicates
    assert chamfer_loss(a, b) == 0.0
    c = b.copy()
    c[0, 0] += 1e-6
    assert chamfer_loss(a, c) > 0.0


# --- nearest neighbours -------------------------------------------------------------

def _exhaustive(q, r):
    d = ((q[:, None, :] - r[None, :, :]) ** 2).sum(-1)
    return d.argmin(axis=1), d.min(axis=1)      # argmin returns the first minimum


@pytest.mark.parametrize("backend", BACKENDS)
def test_nn_matches_exhaustive_on_100_clouds(backend):
    rng = np.random.default_rng(11)
    for trial in range(100):
        n, m = int(rng.integers(1, 501)), int(rng.integers(1, 501))
        r = rng.normal(size=(n, 3))
        q = rng.normal(size=(m, 3))
        if trial % 3 == 0:                   # coarse grid -> many exact ties
            r, q = np.round(r * 2) / 2, np.round(q * 2) / 2
        idx0, d0 = _exhaustive(q, r)
        for method in ("brute", "tree"):
            idx, d = nearest_neighbors(q, r, method=method, backend=backend)
            np.testing.assert_array_equal(idx, idx0)
            np.testing.assert_array_equal(d, d0)


def test_backends_agree_bitwise_above_tree_threshold():
    rng = np.random.default_rng(3)
    r = np.round(rng.normal(size=(3000, 3)) * 4) / 4
    q = np.round(rng.normal(size=(700, 3)) * 4) / 4
    results = [nearest_neighbors(q, r, backend=b) for b in BACKENDS]
    for idx, d in results[1:]:
        assert idx.tobytes() == results[0][0].tobytes()
        assert d.tobytes() == results[0][1].tobytes()
    idx0, _ = _exhaustive(q, r)
    np.testing.assert_array_equal(results[0][0], idx0)


def test_kdtree_leaves_partition_points():
    pts = cloud(300, seed=9)
    tree = KDTree.build(pts)
    assert sorted(tree.perm.tolist()) == list(range(300))
    np.testing.assert_array_equal(tree.points, pts[tree.perm])


# --- procrustes / DM ----------------------------------------------------------------

def test_procrustes_exact_rigid_motion():
    src = cloud(40, seed=5)
    R = rotation_matrix([0, 0, 90])
    t = np.array([1.0, 2.0, 3.0])
    fit = procrustes(src, src @ R.T + t)
    np.testing.assert_allclose(fit.rotation, R, atol=1e-12)
    np.testing.assert_allclose(fit.translation, t, atol=1e-12)
    assert rigid_residuals(src, src @ R.T + t).max() < 1e-9


def test_procrustes_identity():
    src = cloud(30, seed=6)
    fit = procrustes(src, src)
    np.testing.assert_allclose(fit.rotation, np.eye(3), atol=1e-12)
    np.testing.assert_allclose(fit.translation, 0.0, atol=1e-12)


def test_procrustes_returns_proper_rotation_for_reflection():
    src = cloud(30, seed=7)
    mirrored = src * np.array([-1.0, 1.0, 1.0])
    R = procrustes(src, mirrored).rotation
    np.testing.assert_allclose(R.T @ R, np.eye(3), atol=1e-9)
    assert np.linalg.det(R) == pytest.approx(1.0, abs=1e-9)


def test_procrustes_degenerate():
    with pytest.raises(GeometryError):
        procrustes(np.zeros((2, 3)), np.zeros((2, 3)))
    line = np.outer(np.arange(5.0), [1.0, 2.0, 3.0])
    with pytest.raises(GeometryError):
        procrustes(line, line)
    with pytest.raises(GeometryError):
        procrustes(cloud(5), cloud(6))


def _quat_to_rot(q):
    q = q / np.linalg.norm(q, axis=-1, keepdims=True)
    w, x, y, z = np.moveaxis(q, -1, 0)
    return np.stack([
        np.stack([1 - 2 * (y * y + z * z), 2 * (x * y - z * w), 2 * (x * z + y * w)], -1),
        np.stack([2 * (x * y + z * w), 1 - 2 * (x * x + z * z), 2 * (y * z - x * w)], -1),
        np.stack([2 * (x * z - y * w), 2 * (y * z + x * w), 1 - 2 * (x * x + y * y)], -1),
    ], -2)


def _grid_search(a, b):
    """Coarse-to-fine brute force over unit quaternions (translation solved exactly)."""
    ac, bc = a - a.mean(0), b - b.mean(0)

    def cost(quats):
        R = _quat_to_rot(quats)
        return ((np.einsum("kij,nj->kni", R, ac) - bc) ** 2).sum(axis=(1, 2))
    axis = np.linspace(-1, 1, 13)
    grid = np.stack(np.meshgrid(axis, axis, axis, axis, indexing="ij"), -1).reshape(-1, 4)
    grid = grid[np.linalg.norm(grid, axis=1) > 1e-9]
    best = grid[np.argmin(cost(grid))]
    step = axis[1] - axis[0]
    offs = np.linspace(-1, 1, 7)
    local = np.stack(np.meshgrid(offs, offs, offs, offs, indexing="ij"), -1).reshape(-1, 4)
    for _ in range(25):
        cand = best / np.linalg.norm(best) + step * local
        best = cand[np.argmin(cost(cand))]
        step *= 0.5
    return float(cost(best[None])[0])


def test_procrustes_matches_quaternion_grid_oracle():
    rng = np.random.default_rng(12)
    src = rng.normal(size=(200, 3)) * 10
    R = rotation_matrix([20, -35, 70])
    warped = src @ R.T + np.array([3.0, -1.0, 2.0]) + rng.normal(scale=0.1, size=src.shape)
    fit = procrustes(src, warped)
    res = float(((fit.apply(src) - warped) ** 2).sum())
    oracle = _grid_search(src, warped)
    assert res <= oracle * (1 + 1e-9)
    assert abs(res - oracle) <= 1e-3 * oracle


@settings(max_examples=40, deadline=None)
@given(seed=st.integers(0, 10_000))
def test_procrustes_not_worse_than_identity(seed):
    rng = np.random.default_rng(seed)
    src = rng.normal(size=(20, 3)) * 5
    warped = src + rng.normal(size=src.shape)
    fit = procrustes(src, warped)
    assert ((fit.apply(src) - warped) ** 2).sum() <= ((src - warped) ** 2).sum() + 1e-9
    np.testing.assert_allclose(fit.rotation.T @ fit.rotation, np.eye(3), atol=1e-9)
    assert np.linalg.det(fit.rotation) == pytest.approx(1.0, abs=1e-9)


def test_dm_pure_rigid_zero_for_every_subset():
    src = cloud(60, seed=13)
    warped = src @ rotation_matrix([10, 20, 30]).T + 4.0
    mask = np.arange(60) % 2 == 0
    for subset in (None, mask, ~mask):
        assert deformation_magnitude(src, warped, subset) < 1e-9


def test_dm_scaling_closed_form():
    rng = np.random.default_rng(2024)
    v = rng.normal(size=(500, 3))
    src = v / np.linalg.norm(v, axis=1, keepdims=True)
    c = src.mean(axis=0)
    warped = c + 1.1 * (src - c)
    expected = np.mean(0.1 * np.linalg.norm(src - c, axis=1))
    assert deformation_magnitude(src, warped) == pytest.approx(expected, rel=1e-9)


def test_dm_union_between_compartments():
    rng = np.random.default_rng(14)
    src = rng.normal(size=(80, 3)) * 10
    warped = src + rng.normal(size=src.shape) * np.where(np.arange(80) < 40, 0.2, 2.0)[:, None]
    a, b = np.arange(80) < 40, np.arange(80) >= 40
    dm_a, dm_b = deformation_magnitude(src, warped, a), deformation_magnitude(src, warped, b)
    dm = deformation_magnitude(src, warped)
    assert min(dm_a, dm_b) <= dm <= max(dm_a, dm_b)


def test_dm_empty_subset_rejected():
    src = cloud(10)
    with pytest.raises(GeometryError):
        deformation_magnitude(src, src, np.zeros(10, bool))


@settings(max_examples=30, deadline=None)
@given(seed=st.integers(0, 10_000))
def test_dm_invariant_under_global_rigid_motion(seed):
    rng = np.random.default_rng(seed)
    src = rng.normal(size=(30, 3)) * 8
    warped = src + rng.normal(size=src.shape)
    R = rotation_matrix(rng.uniform(-180, 180, 3))
    t = rng.normal(size=3) * 10
    assert deformation_magnitude(src @ R.T + t, warped @ R.T + t) == pytest.approx(
        deformation_magnitude(src, warped), rel=1e-9, abs=1e-12)


# --- TRE / rmse ---------------------------------------------------------------------

def test_tre_examples():
    z = np.zeros((1, 3))
    assert tre([LandmarkPair("a", z, z)]) == 0.0
    assert tre([LandmarkPair("a", z, [[3.0, 4.0, 0.0]])]) == 5.0
    pairs = [LandmarkPair("a", z, [[2.0, 0, 0]]), LandmarkPair("b", z, [[0, 4.0, 0]])]
    assert tre(pairs) == 3.0
    # the warp moves source clusters before centroids are compared
    assert tre(pairs, lambda p: p + [2.0, 0, 0]) == pytest.approx((0 + np.hypot(2, 4)) / 2)
    with pytest.raises(GeometryError):
        tre([])
    with pytest.raises(GeometryError):
        LandmarkPair("empty", np.zeros((0, 3)), z)


def test_rmse_examples():
    f = cloud(10)
    assert rmse(f, f) == 0.0
    assert rmse([[1.0, 2.0, 2.0]], [[0.0, 0.0, 0.0]]) == 3.0
    b = np.array([0.3, -1.2, 2.0])
    assert rmse(f + b, f) == pytest.approx(np.linalg.norm(b), rel=1e-12)
    with pytest.raises(GeometryError):
        rmse(f, f[:5])


# --- PointSet and file formats ------------------------------------------------------

def _labelled(n=12, seed=0):
    rng = np.random.default_rng(seed)
    return PointSet(rng.normal(size=(n, 3)) * 10,
                    np.where(np.arange(n) % 2 == 0, "surface", "internal"),
                    np.where(np.arange(n) < n // 3, "soft", "rigid"), "s")


def test_pointset_validation():
    with pytest.raises(GeometryError):
        PointSet.unlabeled(np.zeros((3, 3)))
    with pytest.raises(GeometryError):
        PointSet.unlabeled(np.array([[0, 0, 0], [1, 0, 0], [0, 1, 0], [1, 1, 0.0]]))
    ps = _labelled()
    with pytest.raises(GeometryError):
        PointSet(ps.points, ps.region[:-1], ps.compartment)
    with pytest.raises(GeometryError):
        PointSet(ps.points, np.full(len(ps), "edge"), ps.compartment)


def test_pointset_csv_roundtrip_bitwise(tmp_path):
    ps = _labelled(seed=3)
    write_pointset(tmp_path / "p.csv", ps)
    back = read_pointset(tmp_path / "p.csv")
    assert back.points.tobytes() == ps.points.tobytes()
    assert (back.region == ps.region).all() and (back.compartment == ps.compartment).all()
    assert (tmp_path / "p.csv").read_text().splitlines()[0] == "x,y,z,region,compartment"


def test_pointset_csv_errors(tmp_path):
    bad = tmp_path / "bad.csv"
    bad.write_text("x,y,z,region\n1,2,3,surface\n")
    with pytest.raises(GeometryError):
        read_pointset(bad)
    bad.write_text("x,y,z,region,compartment\n1,2,nope,surface,rigid\n")
    with pytest.raises(GeometryError):
        read_pointset(bad)


def test_landmark_and_vector_roundtrip(tmp_path):
    rng = np.random.default_rng(1)
    pairs = [LandmarkPair("apex", rng.normal(size=(8, 3)), rng.normal(size=(8, 3))),
             LandmarkPair("base", rng.normal(size=(8, 3)), rng.normal(size=(8, 3)))]
    write_landmarks(tmp_path / "l.csv", pairs)
    back = read_landmarks(tmp_path / "l.csv")
    assert [p.name for p in back] == ["apex", "base"]
    for a, b in zip(pairs, back):
        assert a.source_cluster.tobytes() == b.source_cluster.tobytes()
        assert a.target_cluster.tobytes() == b.target_cluster.tobytes()
    assert (tmp_path / "l.csv").read_text().splitlines()[0] == "landmark_name,side,x,y,z"
    pts, vec = rng.normal(size=(5, 3)), rng.normal(size=(5, 3))
    write_vectors(tmp_path / "v.csv", pts, vec)
    p2, v2 = read_vectors(tmp_path / "v.csv")
    assert p2.tobytes() == pts.tobytes() and v2.tobytes() == vec.tobytes()
