"""Meshes, oriented point clouds, rigid transforms and Procrustes alignment."""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy.spatial import cKDTree


class GeometryError(ValueError):
    pass


@dataclass(frozen=True)
class SurfaceMesh:
    vertices: np.ndarray
    faces: np.ndarray
    landmarks: dict = field(default_factory=dict)

    def __post_init__(self):
        v = np.array(self.vertices, dtype=np.float64).reshape(-1, 3)
        f = np.array(self.faces, dtype=np.int64).reshape(-1, 3)
        if f.size and (f.min() < 0 or f.max() >= len(v)):
            raise GeometryError("face index out of range")
        if f.size and np.any((f[:, 0] == f[:, 1]) | (f[:, 1] == f[:, 2]) | (f[:, 0] == f[:, 2])):
            raise GeometryError("degenerate face with repeated vertex index")
        lm = {str(k): int(i) for k, i in dict(self.landmarks).items()}
        for name, i in lm.items():
            if not 0 <= i < len(v):
                raise GeometryError(f"landmark {name!r} index {i} out of range")
        v.flags.writeable = False
        f.flags.writeable = False
        object.__setattr__(self, "vertices", v)
        object.__setattr__(self, "faces", f)
        object.__setattr__(self, "landmarks", lm)

    @property
    def n_vertices(self) -> int:
        return len(self.vertices)

    def with_vertices(self, vertices) -> "SurfaceMesh":
        return SurfaceMesh(vertices, self.faces, self.landmarks)

    def face_normals(self, normalize=True) -> np.ndarray:
        v, f = self.vertices, self.faces
        n = np.cross(v[f[:, 1]] - v[f[:, 0]], v[f[:, 2]] - v[f[:, 0]])
        if normalize:
            n = n / np.maximum(np.linalg.norm(n, axis=1, keepdims=True), 1e-300)
        return n

    def face_areas(self) -> np.ndarray:
        return 0.5 * np.linalg.norm(self.face_normals(normalize=False), axis=1)

    def vertex_normals(self) -> np.ndarray:
        """Area-weighted average of incident face normals, unit length."""
        return vertex_normals(self.vertices, self.faces)

    def edges(self) -> np.ndarray:
        return mesh_edges(self.faces)

    def mean_edge_length(self) -> float:
        e = self.edges()
        return float(np.linalg.norm(self.vertices[e[:, 0]] - self.vertices[e[:, 1]], axis=1).mean())

    def same_topology(self, other: "SurfaceMesh") -> bool:
        return self.vertices.shape == other.vertices.shape and np.array_equal(self.faces, other.faces)


def vertex_normals(vertices, faces) -> np.ndarray:
    v = np.asarray(vertices, dtype=np.float64)
    f = np.asarray(faces)
    # unnormalized cross product is already area-weighted
    fn = np.cross(v[f[:, 1]] - v[f[:, 0]], v[f[:, 2]] - v[f[:, 0]])
    n = np.zeros_like(v)
    for c in range(3):
        np.add.at(n, f[:, c], fn)
    norm = np.linalg.norm(n, axis=1, keepdims=True)
    return n / np.where(norm > 0, norm, 1.0)


def mesh_edges(faces) -> np.ndarray:
    f = np.asarray(faces)
    e = np.concatenate([f[:, [0, 1]], f[:, [1, 2]], f[:, [2, 0]]])
    e.sort(axis=1)
    return np.unique(e, axis=0)


@dataclass(frozen=True)
class OrientedPointCloud:
    points: np.ndarray
    normals: np.ndarray

    def __post_init__(self):
        p = np.array(self.points, dtype=np.float64).reshape(-1, 3)
        n = np.array(self.normals, dtype=np.float64).reshape(-1, 3)
        if p.shape != n.shape:
            raise GeometryError("points and normals differ in length")
        if len(n) and np.max(np.abs(np.linalg.norm(n, axis=1) - 1.0)) > 1e-6:
            raise GeometryError("normals must have unit length")
        p.flags.writeable = False
        n.flags.writeable = False
        object.__setattr__(self, "points", p)
        object.__setattr__(self, "normals", n)

    def __len__(self):
        return len(self.points)

    def concat(self, other: "OrientedPointCloud") -> "OrientedPointCloud":
        return OrientedPointCloud(np.vstack([self.points, other.points]),
                                  np.vstack([self.normals, other.normals]))

    def subset(self, mask) -> "OrientedPointCloud":
        return OrientedPointCloud(self.points[mask], self.normals[mask])


@dataclass(frozen=True)
class RigidTransform:
    rotation: np.ndarray
    translation: np.ndarray

    def __post_init__(self):
        r = np.array(self.rotation, dtype=np.float64).reshape(3, 3)
        t = np.array(self.translation, dtype=np.float64).reshape(3)
        if np.max(np.abs(r.T @ r - np.eye(3))) > 1e-9 or abs(np.linalg.det(r) - 1.0) > 1e-9:
            raise GeometryError("rotation is not a proper orthogonal matrix")
        r.flags.writeable = False
        t.flags.writeable = False
        object.__setattr__(self, "rotation", r)
        object.__setattr__(self, "translation", t)

    @classmethod
    def identity(cls) -> "RigidTransform":
        return cls(np.eye(3), np.zeros(3))

    @classmethod
    def from_params(cls, params) -> "RigidTransform":
        """Axis-angle (rad) followed by translation."""
        params = np.asarray(params, dtype=np.float64)
        return cls(rotation_matrix(params[:3]), params[3:6])

    def apply(self, points) -> np.ndarray:
        return np.asarray(points, dtype=np.float64) @ self.rotation.T + self.translation

    def compose(self, other: "RigidTransform") -> "RigidTransform":
        """self after other."""
        return RigidTransform(self.rotation @ other.rotation,
                              self.rotation @ other.translation + self.translation)

    def inverse(self) -> "RigidTransform":
        return RigidTransform(self.rotation.T, -self.rotation.T @ self.translation)

    def angle_deg(self) -> float:
        c = np.clip((np.trace(self.rotation) - 1.0) / 2.0, -1.0, 1.0)
        return float(np.degrees(np.arccos(c)))

    def to_json(self) -> dict:
        return {"rotation": [float(x) for x in self.rotation.ravel()],
                "translation": [float(x) for x in self.translation]}

    @classmethod
    def from_json(cls, d) -> "RigidTransform":
        return cls(np.reshape(d["rotation"], (3, 3)), d["translation"])


def skew(v) -> np.ndarray:
    """Cross-product matrices for (..., 3) vectors."""
    v = np.asarray(v, dtype=np.float64)
    z = np.zeros(v.shape[:-1])
    return np.stack([
        np.stack([z, -v[..., 2], v[..., 1]], -1),
        np.stack([v[..., 2], z, -v[..., 0]], -1),
        np.stack([-v[..., 1], v[..., 0], z], -1),
    ], -2)


def rotation_matrix(r) -> np.ndarray:
    """Rodrigues formula, vectorized over leading axes."""
    r = np.asarray(r, dtype=np.float64)
    theta = np.linalg.norm(r, axis=-1)[..., None, None]
    k = skew(r)
    small = theta < 1e-6
    th = np.where(small, 1.0, theta)
    a = np.where(small, 1.0 - theta ** 2 / 6.0, np.sin(th) / th)
    b = np.where(small, 0.5 - theta ** 2 / 24.0, (1.0 - np.cos(th)) / th ** 2)
    return np.eye(3) + a * k + b * (k @ k)


def rotation_vector(rot) -> np.ndarray:
    from scipy.spatial.transform import Rotation
    return Rotation.from_matrix(rot).as_rotvec()


def kabsch(src, dst) -> RigidTransform:
    src = np.asarray(src, dtype=np.float64)
    dst = np.asarray(dst, dtype=np.float64)
    if src.shape != dst.shape or src.ndim != 2 or src.shape[1] != 3:
        raise GeometryError("kabsch needs two equally sized (N, 3) point sets")
    if len(src) < 3:
        raise GeometryError("kabsch needs at least 3 points")
    cs, cd = src.mean(0), dst.mean(0)
    h = (src - cs).T @ (dst - cd)
    u, sv, vt = np.linalg.svd(h)
    if sv[1] <= 1e-12 * max(sv[0], 1e-300):
        raise GeometryError("rank-deficient covariance (collinear points)")
    d = np.sign(np.linalg.det(vt.T @ u.T))
    if d == 0:
        d = 1.0
    r = vt.T @ np.diag([1.0, 1.0, d]) @ u.T
    # re-orthonormalize against round-off so the invariants hold at 1e-9
    uu, _, vv = np.linalg.svd(r)
    r = uu @ vv
    return RigidTransform(r, cd - r @ cs)


def rmsd(a, b) -> float:
    a, b = np.asarray(a), np.asarray(b)
    return float(np.sqrt(np.mean(np.sum((a - b) ** 2, axis=1))))


def procrustes_align(meshes, tol=1e-8, max_iter=100):
    """Rigid generalized Procrustes alignment (no scaling).

    The first mesh seeds the reference; every mesh is aligned to the running
    mean until the mean moves less than ``tol`` mm. The final mean is centered
    at the origin.
    """
    meshes = list(meshes)
    if len(meshes) < 2:
        raise GeometryError("procrustes_align needs at least two meshes")
    for m in meshes[1:]:
        if not m.same_topology(meshes[0]):
            raise GeometryError("procrustes_align needs meshes with shared topology")
    shapes = [m.vertices.copy() for m in meshes]
    mean = shapes[0] - shapes[0].mean(0)
    for _ in range(max_iter):
        shapes = [kabsch(s, mean).apply(s) for s in shapes]
        new_mean = np.mean(shapes, axis=0)
        new_mean -= new_mean.mean(0)
        # re-anchor the mean to the previous one; removes rotational drift
        new_mean = kabsch(new_mean, mean).apply(new_mean)
        moved = np.max(np.linalg.norm(new_mean - mean, axis=1))
        mean = new_mean
        if moved < tol:
            break
    shapes = [kabsch(s, mean).apply(s) for s in shapes]
    return [m.with_vertices(s) for m, s in zip(meshes, shapes)]


def transfer_alignment(palate_in_scan, palate_gpa, tongue):
    """Move ``tongue`` by the rigid motion taking the scan palate onto its aligned pose.

    Returns the moved tongue and the RMS residual of the palate fit.
    """
    if not palate_in_scan.same_topology(palate_gpa):
        raise GeometryError("palate meshes must share topology")
    tr = kabsch(palate_in_scan.vertices, palate_gpa.vertices)
    res = rmsd(tr.apply(palate_in_scan.vertices), palate_gpa.vertices)
    return tongue.with_vertices(tr.apply(tongue.vertices)), res


def serialize_vertices(mesh) -> np.ndarray:
    return np.asarray(mesh.vertices, dtype=np.float64).reshape(-1).copy()


def deserialize_vertices(vec, template) -> SurfaceMesh:
    vec = np.asarray(vec, dtype=np.float64)
    if vec.size != 3 * template.n_vertices:
        raise GeometryError("feature vector length does not match template")
    return template.with_vertices(vec.reshape(-1, 3))


def closest_points_on_mesh(points, mesh, k=16):
    """Closest points on the triangle surface; exact among the ``k`` nearest faces."""
    points = np.asarray(points, dtype=np.float64).reshape(-1, 3)
    v, f = mesh.vertices, mesh.faces
    tri = v[f]
    k = min(k, len(f))
    _, idx = cKDTree(tri.mean(1)).query(points, k=k)
    idx = idx.reshape(len(points), k)
    a, b, c = (tri[idx, j] for j in range(3))
    p = np.broadcast_to(points[:, None, :], a.shape)
    cp = _closest_on_triangle(p, a, b, c)
    d = np.linalg.norm(cp - p, axis=-1)
    best = np.argmin(d, axis=1)
    rows = np.arange(len(points))
    return cp[rows, best], d[rows, best]


def _closest_on_triangle(p, a, b, c):
    # Ericson, Real-Time Collision Detection, 5.1.5; vectorized
    ab, ac, ap = b - a, c - a, p - a
    d1 = np.einsum("...i,...i", ab, ap)
    d2 = np.einsum("...i,...i", ac, ap)
    bp = p - b
    d3 = np.einsum("...i,...i", ab, bp)
    d4 = np.einsum("...i,...i", ac, bp)
    cp_ = p - c
    d5 = np.einsum("...i,...i", ab, cp_)
    d6 = np.einsum("...i,...i", ac, cp_)
    va = d3 * d6 - d5 * d4
    vb = d5 * d2 - d1 * d6
    vc = d1 * d4 - d3 * d2
    with np.errstate(divide="ignore", invalid="ignore"):
        denom = va + vb + vc
        v_ = vb / denom
        w_ = vc / denom
        out = a + ab * v_[..., None] + ac * w_[..., None]
        # edge bc
        w_bc = (d4 - d3) / ((d4 - d3) + (d5 - d6))
        m = (va <= 0) & ((d4 - d3) >= 0) & ((d5 - d6) >= 0)
        out = np.where(m[..., None], b + (c - b) * w_bc[..., None], out)
        # edge ac
        w_ac = d2 / (d2 - d6)
        m = (vb <= 0) & (d2 >= 0) & (d6 <= 0)
        out = np.where(m[..., None], a + ac * w_ac[..., None], out)
        # edge ab
        v_ab = d1 / (d1 - d3)
        m = (vc <= 0) & (d1 >= 0) & (d3 <= 0)
        out = np.where(m[..., None], a + ab * v_ab[..., None], out)
    out = np.where(((d6 >= 0) & (d5 <= d6))[..., None], c, out)
    out = np.where(((d3 >= 0) & (d4 <= d3))[..., None], b, out)
    out = np.where(((d1 <= 0) & (d2 <= 0))[..., None], a, out)
    return out


def surface_distance(points, mesh) -> np.ndarray:
    return closest_points_on_mesh(points, mesh)[1]


# ---------------------------------------------------------------- file I/O

def load_obj(path, landmarks_path=None) -> SurfaceMesh:
    verts, faces = [], []
    with open(path) as fh:
        for lineno, line in enumerate(fh, 1):
            parts = line.split()
            if not parts or parts[0].startswith("#"):
                continue
            if parts[0] == "v":
                verts.append([float(x) for x in parts[1:4]])
            elif parts[0] == "f":
                idx = [int(p.split("/")[0]) for p in parts[1:]]
                if len(idx) != 3:
                    raise GeometryError(f"{path}:{lineno}: only triangle faces are supported")
                faces.append([i - 1 for i in idx])
    landmarks = load_template_landmarks(landmarks_path) if landmarks_path else {}
    return SurfaceMesh(np.array(verts).reshape(-1, 3), np.array(faces, dtype=np.int64).reshape(-1, 3), landmarks)


def save_obj(mesh, path):
    lines = [f"v {x!r} {y!r} {z!r}" for x, y, z in mesh.vertices.tolist()]
    lines += [f"f {a + 1} {b + 1} {c + 1}" for a, b, c in mesh.faces.tolist()]
    Path(path).write_text("\n".join(lines) + "\n")


def load_template_landmarks(path) -> dict:
    return {e["name"]: int(e["vertex_index"]) for e in json.loads(Path(path).read_text())}


def save_template_landmarks(landmarks, path):
    data = [{"name": k, "vertex_index": int(v)} for k, v in landmarks.items()]
    Path(path).write_text(json.dumps(data, indent=1) + "\n")


@dataclass(frozen=True)
class LandmarkSet:
    names: tuple
    targets: np.ndarray

    def __post_init__(self):
        names = tuple(str(n) for n in self.names)
        if len(set(names)) != len(names):
            raise GeometryError("landmark names must be unique")
        t = np.array(self.targets, dtype=np.float64).reshape(len(names), 3)
        object.__setattr__(self, "names", names)
        object.__setattr__(self, "targets", t)

    def __len__(self):
        return len(self.names)

    def resolve(self, mesh) -> np.ndarray:
        try:
            return np.array([mesh.landmarks[n] for n in self.names], dtype=np.int64)
        except KeyError as e:
            raise GeometryError(f"landmark {e.args[0]!r} is not defined on the mesh") from None

    @classmethod
    def from_mesh(cls, mesh, names=None) -> "LandmarkSet":
        names = list(mesh.landmarks) if names is None else list(names)
        return cls(names, mesh.vertices[[mesh.landmarks[n] for n in names]])

    @classmethod
    def load(cls, path) -> "LandmarkSet":
        data = json.loads(Path(path).read_text())
        return cls([e["name"] for e in data], [[e["x"], e["y"], e["z"]] for e in data])

    def save(self, path):
        data = [{"name": n, "x": float(p[0]), "y": float(p[1]), "z": float(p[2])}
                for n, p in zip(self.names, self.targets)]
        Path(path).write_text(json.dumps(data, indent=1) + "\n")


def load_regions(path) -> dict:
    """Region masks: JSON array of {"name", "vertices": [...]}."""
    return {e["name"]: np.array(e["vertices"], dtype=np.int64) for e in json.loads(Path(path).read_text())}


def save_regions(regions, path):
    data = [{"name": k, "vertices": [int(i) for i in v]} for k, v in regions.items()]
    Path(path).write_text(json.dumps(data) + "\n")


def load_cloud(path) -> OrientedPointCloud:
    """ASCII cloud: one ``x y z nx ny nz`` record per line."""
    a = np.loadtxt(path, ndmin=2, comments="#")
    if a.size == 0:
        return OrientedPointCloud(np.zeros((0, 3)), np.zeros((0, 3)))
    if a.shape[1] != 6:
        raise GeometryError(f"{path}: expected 6 columns per point")
    n = a[:, 3:]
    n = n / np.linalg.norm(n, axis=1, keepdims=True)
    return OrientedPointCloud(a[:, :3], n)


def save_cloud(cloud, path):
    rows = np.hstack([cloud.points, cloud.normals])
    np.savetxt(path, rows, fmt="%.17g")
