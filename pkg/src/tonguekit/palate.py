"""Palate alignment by gray-value profile correlation, and cloud augmentation.

Palate meshes are oriented with normals pointing away from the oral cavity
(up, into the bony palate). Profiles are sampled along those normals.
"""

from __future__ import annotations

import json
import logging
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from scipy.spatial import cKDTree

from .geometry import OrientedPointCloud, RigidTransform, SurfaceMesh, rotation_matrix, vertex_normals

log = logging.getLogger(__name__)


class PalateError(ValueError):
    pass


@dataclass(frozen=True)
class ColorProfile:
    samples: np.ndarray
    d: float
    valid: bool = True


def _profiles(points, normals, vol, length, d):
    """(n, length) samples at p + j d n for j = 1..length, plus validity mask."""
    j = np.arange(1, length + 1, dtype=np.float64) * d
    pts = points[:, None, :] + j[None, :, None] * normals[:, None, :]
    vals, inside = vol.sample(pts)
    return vals, np.all(inside, axis=1)


def sample_profile(mesh: SurfaceMesh, vol, i: int, length: int = 15, d: float = 1.0) -> ColorProfile:
    if d <= 0:
        raise PalateError("sampling distance must be positive")
    if length < 2:
        raise PalateError("profile length must be at least 2")
    n = mesh.vertex_normals()[i:i + 1]
    vals, ok = _profiles(mesh.vertices[i:i + 1], n, vol, length, d)
    return ColorProfile(vals[0], float(d), bool(ok[0]))


def ncc(a, b) -> float:
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape or a.ndim != 1 or len(a) < 2:
        raise PalateError("ncc needs two vectors of equal length >= 2")
    sa, sb = a.std(), b.std()
    if sa == 0 or sb == 0:
        raise PalateError("ncc of a zero-variance vector")
    return float(np.clip(np.mean((a - a.mean()) * (b - b.mean())) / (sa * sb), -1.0, 1.0))


def _row_ncc(a, b, eps=1e-9):
    """Row-wise ncc; rows where either operand is flat are returned as NaN."""
    ac = a - a.mean(axis=1, keepdims=True)
    bc = b - b.mean(axis=1, keepdims=True)
    sa = np.sqrt(np.mean(ac * ac, axis=1))
    sb = np.sqrt(np.mean(bc * bc, axis=1))
    ok = (sa > eps) & (sb > eps)
    out = np.full(len(a), np.nan)
    out[ok] = np.mean(ac[ok] * bc[ok], axis=1) / (sa[ok] * sb[ok])
    return out


class PalateObjective:
    """Sum of profile correlations between ``src`` at M and ``dst`` at A(M).

    The transform is parametrized as rotation (axis-angle, scaled to mm at the
    palate's radius of gyration) about the palate centroid, then translation.
    """

    def __init__(self, mesh: SurfaceMesh, src, dst, length=15, d=1.0):
        if d <= 0 or length < 2:
            raise PalateError("invalid profile parameters")
        self.v = mesh.vertices
        self.n = mesh.vertex_normals()
        self.dst, self.length, self.d = dst, int(length), float(d)
        self.center = self.v.mean(axis=0)
        self.radius = max(float(np.sqrt(np.mean(np.sum((self.v - self.center) ** 2, axis=1)))), 1e-6)
        ref, ok = _profiles(self.v, self.n, src, self.length, self.d)
        ok &= ref.std(axis=1) > 1e-9
        if not np.any(ok):
            raise PalateError("all source profiles are invalid")
        self.keep = np.flatnonzero(ok)
        self.ref = ref[self.keep]

    def transform(self, x) -> RigidTransform:
        x = np.asarray(x, dtype=np.float64)
        rot = rotation_matrix(x[:3] / self.radius)
        return RigidTransform(rot, self.center - rot @ self.center + x[3:])

    def params(self, a: RigidTransform) -> np.ndarray:
        from .geometry import rotation_vector
        r = rotation_vector(a.rotation)
        return np.r_[r * self.radius, a.translation - self.center + a.rotation @ self.center]

    def __call__(self, x) -> float:
        a = self.transform(x)
        pts = a.apply(self.v[self.keep])
        nrm = self.n[self.keep] @ a.rotation.T
        vals, ok = _profiles(pts, nrm, self.dst, self.length, self.d)
        c = _row_ncc(self.ref, vals)
        c[~ok] = np.nan
        return float(np.nansum(c))


def _ascend(f, x0, fd_step=0.05, step0=1.0, min_step=1e-2, max_iter=300):
    """Normalized central-difference gradient ascent with backtracking."""
    x = np.asarray(x0, dtype=np.float64).copy()
    fx = f(x)
    step = step0
    eye = np.eye(len(x)) * fd_step
    for _ in range(max_iter):
        g = np.array([f(x + e) - f(x - e) for e in eye]) / (2 * fd_step)
        gn = np.linalg.norm(g)
        if gn == 0:
            break
        while step >= min_step:
            xn = x + step * g / gn
            fn = f(xn)
            if fn > fx:
                x, fx = xn, fn
                step *= 1.5
                break
            step *= 0.5
        else:
            break
    return x, fx


def align_palate(mesh: SurfaceMesh, src, dst, length=15, d=1.0, seeds=8, jitter_mm=2.0,
                 jitter_deg=4.0, seed=0):
    """Rigid transform A maximizing the profile correlation between src and dst.

    Returns (transform, objective value). The first start is the identity, the
    others are jittered by up to ``jitter_mm`` / ``jitter_deg``.
    """
    obj = PalateObjective(mesh, src, dst, length, d)
    rng = np.random.default_rng(seed)
    starts = [np.zeros(6)]
    for _ in range(max(seeds, 1) - 1):
        axis = rng.standard_normal(3)
        axis /= np.linalg.norm(axis)
        ang = np.radians(rng.uniform(-jitter_deg, jitter_deg))
        starts.append(np.r_[axis * ang * obj.radius, rng.uniform(-jitter_mm, jitter_mm, 3)])
    best_x, best_f = None, -np.inf
    for k, x0 in enumerate(starts):
        x, fx = _ascend(obj, x0)
        log.debug("palate start %d: E = %.6f", k, fx)
        if fx > best_f:
            best_x, best_f = x, fx
    return obj.transform(best_x), best_f


def palate_energy(mesh, src, dst, transform=None, length=15, d=1.0) -> float:
    obj = PalateObjective(mesh, src, dst, length, d)
    return obj(np.zeros(6) if transform is None else obj.params(transform))


def save_transform(t: RigidTransform, path):
    Path(path).write_text(json.dumps(t.to_json(), indent=2) + "\n")


def load_transform(path) -> RigidTransform:
    return RigidTransform.from_json(json.loads(Path(path).read_text()))


# ------------------------------------------------------------- augmentation

def _up_axis(palate):
    fn = palate.face_normals(normalize=False)
    a = fn.sum(axis=0)
    return a / np.linalg.norm(a)


def in_footprint(points, palate, k=8) -> np.ndarray:
    """Whether each point projects into the palate along its mean normal axis."""
    up = _up_axis(palate)
    e1 = np.cross(up, [1.0, 0.0, 0.0])
    if np.linalg.norm(e1) < 1e-6:
        e1 = np.cross(up, [0.0, 1.0, 0.0])
    e1 /= np.linalg.norm(e1)
    e2 = np.cross(up, e1)
    basis = np.stack([e1, e2], axis=1)
    tri = (palate.vertices @ basis)[palate.faces]
    q = np.asarray(points, dtype=np.float64) @ basis
    k = min(k, len(tri))
    _, cand = cKDTree(tri.mean(axis=1)).query(q, k=k)
    cand = cand.reshape(len(q), k)
    a, b, c = tri[cand, 0], tri[cand, 1], tri[cand, 2]
    v0, v1, v2 = b - a, c - a, q[:, None, :] - a
    den = v0[..., 0] * v1[..., 1] - v0[..., 1] * v1[..., 0]
    den = np.where(np.abs(den) < 1e-15, np.nan, den)
    s = (v2[..., 0] * v1[..., 1] - v2[..., 1] * v1[..., 0]) / den
    t = (v0[..., 0] * v2[..., 1] - v0[..., 1] * v2[..., 0]) / den
    tol = 1e-9
    hit = (s >= -tol) & (t >= -tol) & (s + t <= 1 + tol)
    return np.any(hit, axis=1)


def above_palate(points, palate) -> np.ndarray:
    """Positive offset along the nearest palate vertex normal, within the footprint."""
    pts = np.asarray(points, dtype=np.float64).reshape(-1, 3)
    if len(pts) == 0:
        return np.zeros(0, dtype=bool)
    nrm = vertex_normals(palate.vertices, palate.faces)
    _, idx = cKDTree(palate.vertices).query(pts)
    off = np.einsum("ij,ij->i", pts - palate.vertices[idx], nrm[idx])
    return (off > 0) & in_footprint(pts, palate)


def remove_above(cloud: OrientedPointCloud, palate: SurfaceMesh) -> OrientedPointCloud:
    return cloud.subset(~above_palate(cloud.points, palate))


def augment_cloud(cloud: OrientedPointCloud, palate: SurfaceMesh) -> OrientedPointCloud:
    """Drop points above the palate and append the palate vertices.

    Appended normals point out of the oral cavity, i.e. flipped relative to the
    palate tissue's own boundary normals, so they agree with the tongue surface
    wherever the two touch.
    """
    kept = remove_above(cloud, palate)
    return kept.concat(OrientedPointCloud(palate.vertices, palate.vertex_normals()))
