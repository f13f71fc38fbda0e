import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from tonguekit.geometry import OrientedPointCloud, RigidTransform, SurfaceMesh
from tonguekit.palate import (PalateError, above_palate, align_palate, augment_cloud, load_transform, ncc,
                              palate_energy, sample_profile, save_transform)
from tonguekit.synthdata import palate_template, random_rigid, resample_rigid, synth_palate_volume
from tonguekit.volume import GrayVolume


@pytest.fixture(scope="module")
def palate():
    return palate_template(n_boundary=40, n_interior=160)


@pytest.fixture(scope="module")
def pvol(palate):
    return synth_palate_volume(palate, seed=4)


def _flat():
    v = np.array([[-5, -5, 0], [5, -5, 0], [5, 5, 0], [-5, 5, 0], [0, 0, 0]], float)
    return SurfaceMesh(v, np.array([[0, 1, 4], [1, 2, 4], [2, 3, 4], [3, 0, 4]]))


def test_profile_constant_and_ramp():
    mesh = _flat()
    const = GrayVolume(np.full((12, 12, 25), 128.0), (1, 1, 1), (-6, -6, -2))
    assert np.all(sample_profile(mesh, const, 4).samples == 128)
    z = np.broadcast_to(np.arange(25.0), (12, 12, 25)) - 2.0 + 100.0
    ramp = GrayVolume(np.array(z), (1, 1, 1), (-6, -6, -2))
    p = sample_profile(mesh, ramp, 4, length=15, d=1.0)
    assert p.valid and np.allclose(p.samples, 100 + np.arange(1, 16))


def test_profile_outside_volume_invalid():
    small = GrayVolume(np.zeros((12, 12, 6)), (1, 1, 1), (-6, -6, -2))
    assert not sample_profile(_flat(), small, 4).valid
    with pytest.raises(PalateError):
        sample_profile(_flat(), small, 4, d=0)


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 2**31 - 1))
def test_ncc_properties(seed):
    a = np.random.default_rng(seed).standard_normal(15)
    assert ncc(a, a) == pytest.approx(1.0)
    assert ncc(a, -a) == pytest.approx(-1.0)
    assert ncc(a, 2 * a + 5) == pytest.approx(1.0)
    b = np.random.default_rng(seed + 1).standard_normal(15)
    assert -1 <= ncc(a, b) <= 1 and ncc(a, b) == pytest.approx(ncc(b, a))


def test_ncc_errors():
    with pytest.raises(PalateError):
        ncc(np.ones(5), np.arange(5.0))
    with pytest.raises(PalateError):
        ncc(np.arange(3.0), np.arange(4.0))


def test_self_alignment(palate, pvol):
    e0 = palate_energy(palate, pvol, pvol)
    t, e = align_palate(palate, pvol, pvol, seeds=2)
    assert e >= e0 - 1e-9
    assert np.linalg.norm(t.translation) < 0.1 and t.angle_deg() < 0.2


def test_rigid_recovery_with_brightness(palate, pvol):
    truth = random_rigid(np.random.default_rng(1), 6.0, 3.0, palate.vertices.mean(0))
    moved = resample_rigid(pvol, truth, brightness=30.0)
    t, _ = align_palate(palate, pvol, moved, seeds=3)
    c = palate.vertices.mean(0)
    assert np.linalg.norm(t.apply(c) - truth.apply(c)) < 0.5
    assert t.compose(truth.inverse()).angle_deg() < 1.0


def test_transform_roundtrip(tmp_path):
    t = RigidTransform.from_params([0.1, -0.2, 0.3, 1, 2, 3])
    save_transform(t, tmp_path / "t.json")
    back = load_transform(tmp_path / "t.json")
    assert np.allclose(back.rotation, t.rotation, atol=1e-15) and np.array_equal(back.translation, t.translation)


def _cloud(points):
    pts = np.asarray(points, float)
    return OrientedPointCloud(pts, np.tile([0.0, 0.0, 1.0], (len(pts), 1)))


def test_augment_noop_below(palate):
    low = palate.vertices.min(0)[2] - 5
    cloud = _cloud([[0, 0, low], [3, 1, low]])
    out = augment_cloud(cloud, palate)
    assert len(out) == 2 + palate.n_vertices
    assert np.array_equal(out.points[:2], cloud.points)


def test_augment_removes_point_above_flat():
    flat = _flat()
    out = augment_cloud(_cloud([[1, 1, 2.0], [1, 1, -2.0], [20, 0, 2.0]]), flat)
    # only the point above the footprint goes
    assert len(out) == 2 + flat.n_vertices
    assert above_palate([[1, 1, 2.0]], flat).tolist() == [True]


def test_augment_idempotent_on_points(palate):
    rng = np.random.default_rng(0)
    c = palate.vertices.mean(0)
    cloud = _cloud(c + rng.uniform(-25, 25, (300, 3)))
    once = augment_cloud(cloud, palate)
    kept = once.points[:len(once) - palate.n_vertices]
    assert not above_palate(kept, palate).any()
