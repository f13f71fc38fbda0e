"""Multilinear (speaker x pose) shape model built by higher-order SVD."""

from __future__ import annotations

import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .geometry import SurfaceMesh, serialize_vertices

MODEL_MAGIC = b"MLTM"
MODEL_VERSION = 1


class ModelError(ValueError):
    pass


@dataclass
class MeshCollection:
    """Grid of meshes indexed [speaker][pose]; ``None`` marks a missing scan."""

    meshes: list
    speakers: list = field(default_factory=list)
    poses: list = field(default_factory=list)

    def __post_init__(self):
        self.meshes = [list(row) for row in self.meshes]
        m = len(self.meshes)
        n = len(self.meshes[0]) if m else 0
        if m == 0 or n == 0 or any(len(r) != n for r in self.meshes):
            raise ModelError("collection must be a non-empty rectangular grid")
        self.speakers = list(self.speakers) or [f"S{i + 1:02d}" for i in range(m)]
        self.poses = list(self.poses) or [f"P{j + 1:02d}" for j in range(n)]
        if len(self.speakers) != m or len(self.poses) != n:
            raise ModelError("label count does not match grid shape")
        ref = self.reference
        if ref is None:
            raise ModelError("collection holds no meshes")
        for mesh in self.present():
            if not mesh.same_topology(ref):
                raise ModelError("all meshes in a collection must share topology")

    @property
    def shape(self):
        return len(self.meshes), len(self.meshes[0])

    @property
    def reference(self):
        return next(iter(self.present()), None)

    def present(self):
        return [mesh for row in self.meshes for mesh in row if mesh is not None]

    def missing(self):
        return [(i, j) for i, row in enumerate(self.meshes) for j, mesh in enumerate(row) if mesh is None]

    def is_complete(self) -> bool:
        return not self.missing()

    def without_speaker(self, i) -> "MeshCollection":
        keep = [r for r in range(self.shape[0]) if r != i]
        return MeshCollection([self.meshes[r] for r in keep], [self.speakers[r] for r in keep], self.poses)

    def without_pose(self, j) -> "MeshCollection":
        keep = [c for c in range(self.shape[1]) if c != j]
        return MeshCollection([[row[c] for c in keep] for row in self.meshes], self.speakers,
                              [self.poses[c] for c in keep])


def complete_missing(c: MeshCollection) -> MeshCollection:
    """Fill each missing (speaker, pose) cell with the average of the speaker's
    mean shape and the pose's mean shape over the other speakers."""
    m, n = c.shape
    for i in range(m):
        if all(mesh is None for mesh in c.meshes[i]):
            raise ModelError(f"speaker {c.speakers[i]!r} has no meshes")
    for j in range(n):
        if all(c.meshes[i][j] is None for i in range(m)):
            raise ModelError(f"pose {c.poses[j]!r} is available from no speaker")
    out = [list(row) for row in c.meshes]
    for i, j in c.missing():
        spk = np.mean([mesh.vertices for mesh in c.meshes[i] if mesh is not None], axis=0)
        pose = np.mean([c.meshes[r][j].vertices for r in range(m) if r != i and c.meshes[r][j] is not None],
                       axis=0)
        out[i][j] = c.reference.with_vertices(0.5 * (spk + pose))
    return MeshCollection(out, c.speakers, c.poses)


@dataclass(frozen=True)
class TrainingTensor:
    data: np.ndarray  # (m, n, k), centered
    mean: np.ndarray  # (k,)
    faces: np.ndarray = None


def build_tensor(c: MeshCollection) -> TrainingTensor:
    if not c.is_complete():
        raise ModelError(f"collection has missing cells: {c.missing()}")
    m, n = c.shape
    feats = np.array([[serialize_vertices(c.meshes[i][j]) for j in range(n)] for i in range(m)])
    mu = feats.reshape(m * n, -1).mean(axis=0)
    return TrainingTensor(feats - mu, mu, c.reference.faces)


def unfold(t, mode) -> np.ndarray:
    """Mode-n unfolding (1-based mode): rows index that mode."""
    return np.moveaxis(np.asarray(t), mode - 1, 0).reshape(t.shape[mode - 1], -1)


def mode_multiply(t, mat, mode) -> np.ndarray:
    t = np.asarray(t, dtype=np.float64)
    mat = np.atleast_2d(np.asarray(mat, dtype=np.float64))
    if mode not in (1, 2, 3):
        raise ModelError("mode must be 1, 2 or 3")
    if mat.shape[1] != t.shape[mode - 1]:
        raise ModelError(f"matrix has {mat.shape[1]} columns, tensor mode {mode} has extent {t.shape[mode - 1]}")
    return np.moveaxis(np.tensordot(mat, t, axes=(1, mode - 1)), 0, mode - 1)


def _fix_signs(u):
    idx = np.argmax(np.abs(u), axis=0)
    sgn = np.sign(u[idx, np.arange(u.shape[1])])
    sgn[sgn == 0] = 1.0
    return u * sgn


def _left_singular(a):
    """Left singular vectors and values of a wide matrix via its Gram matrix."""
    g = a @ a.T
    evals, evecs = np.linalg.eigh(g)
    order = np.argsort(evals)[::-1]
    evals, evecs = evals[order], evecs[:, order]
    return _fix_signs(evecs), np.sqrt(np.clip(evals, 0.0, None))


@dataclass(frozen=True)
class MultilinearModel:
    mean: np.ndarray          # (k,)
    core: np.ndarray          # (m~, n~, k)
    u1: np.ndarray            # (m, m~)
    u2: np.ndarray            # (n, n~)
    sv1: np.ndarray           # (m,) speaker-mode singular values, full rank
    sv2: np.ndarray           # (n,)
    speaker_mean: np.ndarray  # (m~,)
    speaker_std: np.ndarray
    pose_mean: np.ndarray     # (n~,)
    pose_std: np.ndarray
    faces: np.ndarray

    @property
    def dims(self):
        """(m, n, k, m~, n~)."""
        return (self.u1.shape[0], self.u2.shape[0], self.mean.size, self.u1.shape[1], self.u2.shape[1])

    @property
    def n_vertices(self):
        return self.mean.size // 3

    def speaker_stats(self):
        return self.speaker_mean, self.speaker_std

    def pose_stats(self):
        return self.pose_mean, self.pose_std

    def template(self, landmarks=None) -> SurfaceMesh:
        return SurfaceMesh(self.mean.reshape(-1, 3), self.faces, landmarks or {})


def _stats(u):
    # rows of an orthonormal matrix: deviations at round-off level are exactly constant columns
    sd = u.std(axis=0)
    return u.mean(axis=0), np.where(sd < 1e-10, 0.0, sd)


def hosvd(t: TrainingTensor) -> MultilinearModel:
    a = np.asarray(t.data, dtype=np.float64)
    if a.ndim != 3:
        raise ModelError("training tensor must be of order 3")
    if not np.any(a):
        raise ModelError("degenerate (all-zero) training tensor")
    u1, sv1 = _left_singular(unfold(a, 1))
    u2, sv2 = _left_singular(unfold(a, 2))
    core = mode_multiply(mode_multiply(a, u1.T, 1), u2.T, 2)
    faces = t.faces if t.faces is not None else np.zeros((0, 3), dtype=np.int64)
    return MultilinearModel(np.asarray(t.mean, dtype=np.float64).copy(), core, u1, u2, sv1, sv2,
                            *_stats(u1), *_stats(u2), np.asarray(faces, dtype=np.int64))


def build_model(c: MeshCollection) -> MultilinearModel:
    return hosvd(build_tensor(c))


def build_pca_model(meshes) -> MultilinearModel:
    """Single-mode model: every mesh is a 'speaker' of one shared pose."""
    return build_model(MeshCollection([[m] for m in meshes]))


def truncate(model: MultilinearModel, m_t: int, n_t: int) -> MultilinearModel:
    m, n = model.u1.shape[0], model.u2.shape[0]
    if not (1 <= m_t <= min(m, model.u1.shape[1]) and 1 <= n_t <= min(n, model.u2.shape[1])):
        raise ModelError(f"truncation ({m_t}, {n_t}) out of range for model {model.dims}")
    u1, u2 = model.u1[:, :m_t], model.u2[:, :n_t]
    return MultilinearModel(model.mean, model.core[:m_t, :n_t].copy(), u1.copy(), u2.copy(),
                            model.sv1, model.sv2, *_stats(u1), *_stats(u2), model.faces)


def reconstruct(model: MultilinearModel) -> np.ndarray:
    return mode_multiply(mode_multiply(model.core, model.u1, 1), model.u2, 2)


def generate_vector(model, s, p) -> np.ndarray:
    s = np.asarray(s, dtype=np.float64)
    p = np.asarray(p, dtype=np.float64)
    mt, nt = model.core.shape[:2]
    if s.shape[-1] != mt or p.shape[-1] != nt:
        raise ModelError(f"coordinates ({s.shape[-1]}, {p.shape[-1]}) do not match model ({mt}, {nt})")
    if s.ndim == 1 and p.ndim == 1:
        return model.mean + np.einsum("a,b,abk->k", s, p, model.core)
    s, p = np.broadcast_arrays(s[..., :, None], p[..., None, :])
    outer = (s * p).reshape(*s.shape[:-2], mt * nt)
    return model.mean + outer @ model.core.reshape(mt * nt, -1)


def generate(model, s, p, landmarks=None) -> SurfaceMesh:
    return SurfaceMesh(generate_vector(model, s, p).reshape(-1, 3), model.faces, landmarks or {})


# ------------------------------------------------------------------ file I/O

def save_model(model: MultilinearModel, path):
    m, n, k, mt, nt = model.dims
    head = MODEL_MAGIC + struct.pack("<6I", MODEL_VERSION, m, n, k, mt, nt) + struct.pack("<I", len(model.faces))
    parts = [model.mean, model.core, model.u1, model.u2, model.sv1, model.sv2,
             model.speaker_mean, model.speaker_std, model.pose_mean, model.pose_std]
    body = b"".join(np.ascontiguousarray(x, dtype="<f8").tobytes() for x in parts)
    Path(path).write_bytes(head + body + np.ascontiguousarray(model.faces, dtype="<u4").tobytes())


def load_model(path) -> MultilinearModel:
    raw = Path(path).read_bytes()
    if raw[:4] != MODEL_MAGIC:
        raise ModelError(f"{path}: bad magic, not a model file")
    if len(raw) < 32:
        raise ModelError(f"{path}: truncated header")
    version, m, n, k, mt, nt, nf = struct.unpack("<7I", raw[4:32])
    if version != MODEL_VERSION:
        raise ModelError(f"{path}: unsupported model version {version}")
    shapes = [(k,), (mt, nt, k), (m, mt), (n, nt), (m,), (n,), (mt,), (mt,), (nt,), (nt,)]
    n_float = sum(int(np.prod(s)) for s in shapes)
    expected = 32 + 8 * n_float + 12 * nf
    if len(raw) != expected:
        raise ModelError(f"{path}: truncated or oversized model file ({len(raw)} != {expected} bytes)")
    flat = np.frombuffer(raw, dtype="<f8", count=n_float, offset=32)
    arrays, pos = [], 0
    for s in shapes:
        size = int(np.prod(s))
        arrays.append(flat[pos:pos + size].reshape(s).astype(np.float64))
        pos += size
    faces = np.frombuffer(raw, dtype="<u4", count=3 * nf, offset=32 + 8 * n_float).reshape(nf, 3).astype(np.int64)
    return MultilinearModel(*arrays, faces)
