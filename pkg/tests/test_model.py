import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from scipy.linalg import subspace_angles

from tonguekit.geometry import SurfaceMesh
from tonguekit.model import (MeshCollection, ModelError, TrainingTensor, build_model, build_tensor, complete_missing,
                             generate, generate_vector, hosvd, load_model, mode_multiply, reconstruct, save_model,
                             truncate, unfold)

FACES = np.array([[0, 1, 2], [0, 2, 3]])


def _mesh(v):
    return SurfaceMesh(np.asarray(v, float).reshape(4, 3), FACES)


def _grid(vals):
    return MeshCollection([[None if v is None else _mesh(v) for v in row] for row in vals])


def _tensor(a):
    return TrainingTensor(np.asarray(a, float), np.zeros(a.shape[2]))


def _orth(rng, n, k):
    return np.linalg.qr(rng.standard_normal((n, k)))[0]


# ------------------------------------------------------------------ collection

def test_complete_identical_shapes(rng):
    x = rng.standard_normal(12)
    out = complete_missing(_grid([[x, x], [x, None]]))
    assert np.allclose(out.meshes[1][1].vertices.ravel(), x)


def test_complete_formula(rng):
    v = rng.standard_normal((3, 3, 12))
    out = complete_missing(_grid([[v[0, 0], v[0, 1], v[0, 2]], [v[1, 0], None, v[1, 2]], [v[2, 0], v[2, 1], v[2, 2]]]))
    expect = 0.5 * ((v[1, 0] + v[1, 2]) / 2 + (v[0, 1] + v[2, 1]) / 2)
    assert np.allclose(out.meshes[1][1].vertices.ravel(), expect, atol=1e-15)


def test_complete_additive_collection(rng):
    a, b = rng.standard_normal((4, 12)), rng.standard_normal((3, 12))
    full = [[a[i] + b[j] for j in range(3)] for i in range(4)]
    holed = [row[:] for row in full]
    holed[2][1] = None
    got = complete_missing(_grid(holed)).meshes[2][1].vertices.ravel()
    # speaker mean a2 + mean(b0, b2); pose mean b1 + mean of the other a's
    expect = 0.5 * (a[2] + (b[0] + b[2]) / 2 + b[1] + np.mean(a[[0, 1, 3]], axis=0))
    assert np.allclose(got, expect)


def test_complete_errors(rng):
    x = rng.standard_normal(12)
    with pytest.raises(ModelError):
        complete_missing(_grid([[x, None], [x, None]]))
    with pytest.raises(ModelError):
        build_tensor(_grid([[x, None], [x, x]]))
    with pytest.raises(ModelError):
        MeshCollection([[_mesh(x)], [SurfaceMesh(np.zeros((3, 3)), FACES[:1])]])


def test_build_tensor_identical(rng):
    x = rng.standard_normal(12)
    t = build_tensor(_grid([[x, x], [x, x]]))
    assert t.data.shape == (2, 2, 12) and not np.any(t.data) and np.allclose(t.mean, x)
    with pytest.raises(ModelError):
        hosvd(t)


def test_centering_identity(rng):
    t = build_tensor(_grid(rng.standard_normal((3, 4, 12))))
    assert np.allclose(t.data.reshape(-1, 12).mean(axis=0), 0, atol=1e-14)


# ------------------------------------------------------------------ algebra

def test_mode_multiply_examples(rng):
    t = rng.standard_normal((2, 2, 2))
    assert np.array_equal(mode_multiply(t, np.eye(2), 2), t)
    swap = mode_multiply(t, [[0, 1], [1, 0]], 1)
    assert np.array_equal(swap[0], t[1]) and np.array_equal(swap[1], t[0])
    with pytest.raises(ModelError):
        mode_multiply(t, np.eye(3), 1)


@settings(max_examples=20, deadline=None)
@given(st.integers(0, 2**31 - 1))
def test_mode_multiply_commutes(seed):
    rng = np.random.default_rng(seed)
    t = rng.standard_normal((3, 4, 5))
    a, b = rng.standard_normal((2, 3)), rng.standard_normal((6, 4))
    x = mode_multiply(mode_multiply(t, a, 1), b, 2)
    y = mode_multiply(mode_multiply(t, b, 2), a, 1)
    assert x.shape == (2, 6, 5) and np.allclose(x, y, atol=1e-12)
    brute = np.einsum("ia,jb,abk->ijk", a, b, t)
    assert np.allclose(x, brute, atol=1e-12)


def test_hosvd_scalar_modes(rng):
    a = rng.standard_normal((1, 1, 7))
    m = hosvd(_tensor(a))
    assert abs(m.u1[0, 0]) == 1 and abs(m.u2[0, 0]) == 1
    assert np.allclose(reconstruct(m), a)


@settings(max_examples=15, deadline=None)
@given(st.integers(0, 2**31 - 1))
def test_hosvd_exact_and_orthonormal(seed):
    rng = np.random.default_rng(seed)
    a = rng.standard_normal((3, 4, 5))
    m = hosvd(_tensor(a))
    assert np.linalg.norm(reconstruct(m) - a) / np.linalg.norm(a) < 1e-9
    assert np.allclose(m.u1.T @ m.u1, np.eye(3), atol=1e-9)
    assert np.allclose(m.u2.T @ m.u2, np.eye(4), atol=1e-9)
    ref = np.linalg.svd(unfold(a, 1), full_matrices=False)
    assert np.allclose(m.sv1, ref[1], atol=1e-9)
    # largest-magnitude entry of every singular vector is positive
    for u in (m.u1, m.u2):
        assert np.all(u[np.argmax(np.abs(u), axis=0), np.arange(u.shape[1])] > 0)


def test_hosvd_constructed_subspaces(rng):
    q1, q2 = _orth(rng, 6, 3), _orth(rng, 5, 2)
    a = mode_multiply(mode_multiply(rng.standard_normal((3, 2, 40)), q1, 1), q2, 2)
    m = hosvd(_tensor(a))
    assert np.max(subspace_angles(m.u1[:, :3], q1)) < 1e-6
    assert np.max(subspace_angles(m.u2[:, :2], q2)) < 1e-6
    exact = truncate(m, 3, 2)
    assert np.linalg.norm(reconstruct(exact) - a) / np.linalg.norm(a) < 1e-8
    assert np.linalg.norm(reconstruct(truncate(m, 2, 2)) - a) > np.linalg.norm(reconstruct(exact) - a)


def test_truncate_noop_and_range(rng):
    m = hosvd(_tensor(rng.standard_normal((3, 4, 6))))
    assert np.allclose(reconstruct(truncate(m, 3, 4)), reconstruct(m))
    for bad in [(0, 1), (4, 1), (1, 5)]:
        with pytest.raises(ModelError):
            truncate(m, *bad)


# ------------------------------------------------------------------ generation

def test_generate_cells_and_mean(rng):
    vals = rng.standard_normal((3, 2, 12))
    c = _grid(vals)
    m = build_model(c)
    assert np.allclose(generate(m, np.zeros(3), np.zeros(2)).vertices.ravel(), vals.reshape(-1, 12).mean(0))
    for i in range(3):
        for j in range(2):
            assert np.max(np.abs(generate_vector(m, m.u1[i], m.u2[j]) - vals[i, j])) < 1e-6


def test_generate_bilinear_and_batch(rng):
    m = build_model(_grid(rng.standard_normal((3, 4, 12))))
    s, p = rng.standard_normal(3), rng.standard_normal(4)
    v = generate_vector(m, s, p) - m.mean
    assert np.allclose(generate_vector(m, 2 * s, p) - m.mean, 2 * v)
    assert np.allclose(generate_vector(m, s, 3 * p) - m.mean, 3 * v)
    ss, pp = rng.standard_normal((5, 3)), rng.standard_normal((5, 4))
    batch = generate_vector(m, ss, pp)
    assert np.allclose(batch, [generate_vector(m, a, b) for a, b in zip(ss, pp)])
    with pytest.raises(ModelError):
        generate_vector(m, np.zeros(2), p)


def test_stats_of_exact_model(synth):
    model = synth[0]
    assert np.allclose(model.speaker_mean, model.u1.mean(0))
    assert np.all(model.speaker_std >= 0)


# ------------------------------------------------------------------ file I/O

def test_model_roundtrip(tmp_path, rng):
    m = truncate(build_model(_grid(rng.standard_normal((3, 4, 12)))), 2, 3)
    save_model(m, tmp_path / "m.bin")
    back = load_model(tmp_path / "m.bin")
    for name in m.__dataclass_fields__:
        assert np.array_equal(getattr(back, name), getattr(m, name)), name


def test_model_file_errors(tmp_path, rng):
    m = build_model(_grid(rng.standard_normal((2, 2, 12))))
    save_model(m, tmp_path / "m.bin")
    raw = (tmp_path / "m.bin").read_bytes()
    (tmp_path / "magic.bin").write_bytes(b"XXXX" + raw[4:])
    (tmp_path / "short.bin").write_bytes(raw[:100])
    (tmp_path / "ver.bin").write_bytes(raw[:4] + (99).to_bytes(4, "little") + raw[8:])
    for name in ("magic.bin", "short.bin", "ver.bin"):
        with pytest.raises(ModelError):
            load_model(tmp_path / name)
