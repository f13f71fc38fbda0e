"""Non-rigid template matching with per-vertex rigid motions.

Each vertex i carries an axis-angle vector r_i and a translation t_i acting as
A_i(x) = R(r_i)(x - v_i) + v_i + t_i. The energy combines a data term toward
frozen cloud correspondences, an embedded-deformation smoothness term over
mesh edges and a landmark term; each term is averaged over its items.
"""

from __future__ import annotations

import logging
import struct
from dataclasses import dataclass, replace
from pathlib import Path

import numpy as np
from scipy import sparse
from scipy.optimize import minimize
from scipy.spatial import cKDTree

from .geometry import (LandmarkSet, OrientedPointCloud, SurfaceMesh,
                       rotation_matrix, skew, vertex_normals)

log = logging.getLogger(__name__)

BELOW = -1
ABOVE = 1


class RegistrationError(ValueError):
    pass


@dataclass(frozen=True)
class MatchWeights:
    alpha: float = 1.0
    beta: float = 10.0
    beta_min: float = 6.0
    gamma: float = 10.0
    gamma_min: float = 0.0
    t_max: int = 40
    search_radius: float = 4.0
    max_normal_angle: float = 60.0
    inner_max_iter: int = 200
    inner_gtol: float = 1e-6

    def __post_init__(self):
        if min(self.alpha, self.beta_min, self.gamma_min) < 0:
            raise RegistrationError("weights must be nonnegative")
        if self.beta < self.beta_min or self.gamma < self.gamma_min:
            raise RegistrationError("need beta >= beta_min and gamma >= gamma_min")
        if self.t_max < 1:
            raise RegistrationError("t_max must be >= 1")
        if self.search_radius <= 0:
            raise RegistrationError("search_radius must be positive")
        if not 0 < self.max_normal_angle <= 180:
            raise RegistrationError("max_normal_angle must lie in (0, 180]")

    def replace(self, **kw) -> "MatchWeights":
        return replace(self, **kw)


@dataclass(frozen=True)
class CandidateMatch:
    vertex: int
    point: int
    side: int
    distance: float


@dataclass(frozen=True)
class DeformationField:
    params: np.ndarray  # (N, 6): axis-angle, translation

    def __post_init__(self):
        p = np.array(self.params, dtype=np.float64).reshape(-1, 6)
        if not np.all(np.isfinite(p)):
            raise RegistrationError("deformation parameters must be finite")
        p.flags.writeable = False
        object.__setattr__(self, "params", p)

    @classmethod
    def identity(cls, n) -> "DeformationField":
        return cls(np.zeros((n, 6)))

    def __len__(self):
        return len(self.params)

    def apply(self, mesh) -> SurfaceMesh:
        return mesh.with_vertices(mesh.vertices + self.params[:, 3:])

    def transform_point(self, i, rest, x) -> np.ndarray:
        r = rotation_matrix(self.params[i, :3])
        return r @ (np.asarray(x) - rest) + rest + self.params[i, 3:]


_FIELD_MAGIC = b"DFLD"


def save_field(field, path):
    Path(path).write_bytes(_FIELD_MAGIC + struct.pack("<I", len(field))
                           + np.asarray(field.params, dtype="<f8").tobytes())


def load_field(path) -> DeformationField:
    raw = Path(path).read_bytes()
    if raw[:4] != _FIELD_MAGIC:
        raise RegistrationError(f"{path}: not a deformation field file")
    (n,) = struct.unpack("<I", raw[4:8])
    if len(raw) != 8 + 48 * n:
        raise RegistrationError(f"{path}: truncated deformation field")
    return DeformationField(np.frombuffer(raw[8:], dtype="<f8").reshape(n, 6))


def schedule_weights(w: MatchWeights, t: int):
    if not 1 <= t <= w.t_max:
        raise RegistrationError(f"step {t} outside [1, {w.t_max}]")
    if w.t_max == 1:
        return w.beta, w.gamma
    f = (t - 1) / (w.t_max - 1)
    return w.beta - f * (w.beta - w.beta_min), w.gamma - f * (w.gamma - w.gamma_min)


# ------------------------------------------------------------ correspondences

class CloudIndex:
    """KD-tree over an oriented cloud for radius queries."""

    def __init__(self, cloud: OrientedPointCloud):
        self.cloud = cloud
        self.tree = cKDTree(cloud.points) if len(cloud) else None

    def candidates(self, positions, normals, radius, max_angle, k=32, side_frame="vertex"):
        """Best candidate per query: nearest valid BELOW point, else nearest ABOVE.

        Returns (point index or -1, side, distance) arrays. Points with zero
        offset along the normal count as BELOW (they lie on the surface).
        ``side_frame`` picks the normal of the side test: the query vertex
        normal ("vertex") or the cloud point normal ("point").
        A k-nearest query settles most vertices; the rest fall back to an
        exhaustive radius query, so the result is exact either way.
        """
        if side_frame not in ("vertex", "point"):
            raise RegistrationError(f"unknown side frame {side_frame!r}")
        positions = np.asarray(positions, dtype=np.float64).reshape(-1, 3)
        normals = np.asarray(normals, dtype=np.float64).reshape(-1, 3)
        nq = len(positions)
        best = np.full(nq, -1, dtype=np.int64)
        side = np.zeros(nq, dtype=np.int64)
        dist = np.full(nq, np.inf)
        if self.tree is None or nq == 0:
            return best, side, dist
        k = min(k, len(self.cloud))
        d, pi = self.tree.query(positions, k=k, distance_upper_bound=radius)
        d, pi = d.reshape(nq, k), pi.reshape(nq, k)
        found = pi < len(self.cloud)
        qi = np.nonzero(found)[0]
        self._pick(qi, pi[found], d[found], positions, normals, radius, max_angle, best, side, dist, side_frame)
        # a full k-list may hide a nearer-ranked BELOW point beyond the k-th neighbour
        redo = np.flatnonzero(found[:, -1] & (side != BELOW))
        if len(redo):
            lists = self.tree.query_ball_point(positions[redo], radius)
            lens = np.fromiter((len(l) for l in lists), dtype=np.int64, count=len(redo))
            qi = np.repeat(redo, lens)
            pj = np.concatenate([np.asarray(l, dtype=np.int64) for l in lists])
            dj = np.linalg.norm(self.cloud.points[pj] - positions[qi], axis=1)
            best[redo], side[redo], dist[redo] = -1, 0, np.inf
            self._pick(qi, pj, dj, positions, normals, radius, max_angle, best, side, dist, side_frame)
        return best, side, dist

    def _pick(self, qi, pi, d, positions, normals, radius, max_angle, best, side, dist, side_frame="vertex"):
        if len(qi) == 0:
            return
        cos = np.einsum("ij,ij->i", self.cloud.normals[pi], normals[qi])
        ok = (cos >= np.cos(np.radians(max_angle)) - 1e-12) & (d <= radius)
        qi, pi, d = qi[ok], pi[ok], d[ok]
        frame = normals[qi] if side_frame == "vertex" else self.cloud.normals[pi]
        off = np.einsum("ij,ij->i", self.cloud.points[pi] - positions[qi], frame)
        s = np.where(off <= 0, BELOW, ABOVE)
        order = np.lexsort((pi, d, s, qi))
        qi, pi, d, s = qi[order], pi[order], d[order], s[order]
        first = np.ones(len(qi), dtype=bool)
        first[1:] = qi[1:] != qi[:-1]
        best[qi[first]] = pi[first]
        side[qi[first]] = s[first]
        dist[qi[first]] = d[first]


def find_candidate(position, normal, cloud, w: MatchWeights, index=None):
    index = index or CloudIndex(cloud)
    b, s, d = index.candidates(np.reshape(position, (1, 3)), np.reshape(normal, (1, 3)),
                               w.search_radius, w.max_normal_angle)
    if b[0] < 0:
        return None
    return CandidateMatch(0, int(b[0]), int(s[0]), float(d[0]))


# ------------------------------------------------------------------- energy

def _rodrigues_coeffs(r):
    """Coefficients a, b with R(r) = I + a K + b K^2 and J_r(r) = I - c K + d K^2."""
    th2 = np.einsum("ij,ij->i", r, r)
    th = np.sqrt(th2)
    small = th < 1e-4
    t = np.where(small, 1.0, th)
    s, co = np.sin(t), np.cos(t)
    a = np.where(small, 1.0 - th2 / 6.0, s / t)
    b = np.where(small, 0.5 - th2 / 24.0, (1.0 - co) / t ** 2)
    d = np.where(small, 1.0 / 6.0 - th2 / 120.0, (t - s) / t ** 3)
    return a, b, d


def _cross(u, v):
    """Row-wise cross product of (3, n) arrays."""
    return np.stack([u[1] * v[2] - u[2] * v[1], u[2] * v[0] - u[0] * v[2], u[0] * v[1] - u[1] * v[0]])


def _right_jacobian(r):
    r = np.atleast_2d(r)
    _, b, d = _rodrigues_coeffs(r)
    k = skew(r)
    return np.eye(3) - b[:, None, None] * k + d[:, None, None] * (k @ k)


class DeformationEnergy:
    """alpha*E_data + beta*E_smooth + gamma*E_landmark for fixed correspondences."""

    def __init__(self, rest, edges, alpha, beta, gamma,
                 data_idx=(), data_targets=np.zeros((0, 3)),
                 lm_idx=(), lm_targets=np.zeros((0, 3))):
        self.rest = np.asarray(rest, dtype=np.float64)
        n = len(self.rest)
        e = np.asarray(edges, dtype=np.int64).reshape(-1, 2)
        # directed edges i -> j, both orientations
        self.src = np.concatenate([e[:, 0], e[:, 1]])
        self.dst = np.concatenate([e[:, 1], e[:, 0]])
        self.d = self.rest[self.dst] - self.rest[self.src]
        self._dt = np.ascontiguousarray(self.d.T)
        m = len(self.src)
        ones = np.ones(m)
        # signed incidence: +1 at source, -1 at destination
        self._inc = sparse.csr_matrix(
            (np.concatenate([ones, -ones]), (np.concatenate([self.src, self.dst]), np.tile(np.arange(m), 2))),
            shape=(n, m))
        self._src_inc = sparse.csr_matrix((ones, (self.src, np.arange(m))), shape=(n, m))
        self.alpha, self.beta, self.gamma = float(alpha), float(beta), float(gamma)
        self.data_idx = np.asarray(data_idx, dtype=np.int64)
        self.data_targets = np.asarray(data_targets, dtype=np.float64).reshape(-1, 3)
        self.lm_idx = np.asarray(lm_idx, dtype=np.int64)
        self.lm_targets = np.asarray(lm_targets, dtype=np.float64).reshape(-1, 3)

    def _edge_parts(self, x):
        r = x[:, :3]
        a, b, d = _rodrigues_coeffs(r)
        rs = np.ascontiguousarray(r[self.src].T)
        c1 = _cross(rs, self._dt)
        c2 = _cross(rs, c1)
        # R d - d = a (r x d) + b r x (r x d)
        e = a[self.src] * c1 + b[self.src] * c2 + (self._inc.T @ x[:, 3:]).T
        return e, (r, a, b, d, rs)

    def terms(self, x):
        x = np.asarray(x, dtype=np.float64).reshape(-1, 6)
        pos = self.rest + x[:, 3:]
        data = lm = 0.0
        if len(self.data_idx):
            data = np.mean(np.sum((pos[self.data_idx] - self.data_targets) ** 2, axis=1))
        if len(self.lm_idx):
            lm = np.mean(np.sum((pos[self.lm_idx] - self.lm_targets) ** 2, axis=1))
        smooth = 0.0
        if len(self.src):
            e, _ = self._edge_parts(x)
            smooth = np.sum(e * e) / e.shape[1]
        return data, smooth, lm

    def __call__(self, x):
        data, smooth, lm = self.terms(x)
        return self.alpha * data + self.beta * smooth + self.gamma * lm

    def value_and_grad(self, x):
        x = np.asarray(x, dtype=np.float64).reshape(-1, 6)
        n = len(x)
        g = np.zeros((n, 6))
        pos = self.rest + x[:, 3:]
        f = 0.0
        if len(self.data_idx) and self.alpha:
            res = pos[self.data_idx] - self.data_targets
            f += self.alpha * np.mean(np.sum(res ** 2, axis=1))
            _accumulate(g[:, 3:], self.data_idx, (2.0 * self.alpha / len(res)) * res)
        if len(self.lm_idx) and self.gamma:
            res = pos[self.lm_idx] - self.lm_targets
            f += self.gamma * np.mean(np.sum(res ** 2, axis=1))
            _accumulate(g[:, 3:], self.lm_idx, (2.0 * self.gamma / len(res)) * res)
        if len(self.src) and self.beta:
            e, (r, a, b, d, rs) = self._edge_parts(x)
            m = e.shape[1]
            f += self.beta * np.sum(e * e) / m
            ge = (2.0 * self.beta / m) * e
            g[:, 3:] += (self._inc @ ge.T)
            # R^T v = v - a (r x v) + b r x (r x v)
            c1 = _cross(rs, ge)
            rte = ge - a[self.src] * c1 + b[self.src] * _cross(rs, c1)
            # d(R d)/dr = -R [d]x J_r  =>  grad_r = J_r^T (d x R^T e)
            acc = np.ascontiguousarray((self._src_inc @ _cross(self._dt, rte).T).T)
            # J_r^T v = v + b (r x v) + d r x (r x v)
            rt = np.ascontiguousarray(r.T)
            k1 = _cross(rt, acc)
            g[:, :3] += (acc + b * k1 + d * _cross(rt, k1)).T
        return f, g.ravel()


def _accumulate(out, idx, vals):
    for c in range(out.shape[1]):
        out[:, c] += np.bincount(idx, weights=vals[:, c], minlength=len(out))


# ---------------------------------------------------------------- matching

def match_template(template: SurfaceMesh, cloud: OrientedPointCloud, landmarks: LandmarkSet,
                   w: MatchWeights = MatchWeights(), history=None, index=None):
    """Deform ``template`` toward ``cloud``; returns (deformed mesh, field).

    Runs the energy series t = 1..t_max with annealed smoothness and landmark
    weights. Correspondences are frozen for each energy. When ``history`` is a
    list, one dict per energy (weights, correspondence count, per-iteration
    energies) is appended to it.
    """
    if len(cloud) == 0:
        raise RegistrationError("empty point cloud")
    lm_idx = landmarks.resolve(template) if landmarks is not None and len(landmarks) else np.zeros(0, int)
    lm_targets = landmarks.targets if len(lm_idx) else np.zeros((0, 3))
    index = index or CloudIndex(cloud)
    rest = template.vertices
    edges = template.edges()
    x = np.zeros(rest.size * 2)
    for t in range(1, w.t_max + 1):
        beta_t, gamma_t = schedule_weights(w, t)
        pos = rest + x.reshape(-1, 6)[:, 3:]
        nrm = vertex_normals(pos, template.faces)
        best, _, _ = index.candidates(pos, nrm, w.search_radius, w.max_normal_angle)
        valid = np.flatnonzero(best >= 0)
        energy = DeformationEnergy(rest, edges, w.alpha, beta_t, gamma_t,
                                   valid, cloud.points[best[valid]], lm_idx, lm_targets)
        trace = [energy(x)]

        def record(intermediate_result):
            trace.append(float(intermediate_result.fun))

        res = minimize(energy.value_and_grad, x, jac=True, method="L-BFGS-B", callback=record,
                       options={"maxiter": w.inner_max_iter, "gtol": w.inner_gtol,
                                "ftol": 1e-15, "maxcor": 10})
        x = res.x
        if history is not None:
            history.append({"t": t, "beta": beta_t, "gamma": gamma_t,
                            "matched": int(len(valid)), "energies": trace})
        log.debug("energy %d/%d: %d matches, E %.6g -> %.6g (%d it)",
                  t, w.t_max, len(valid), trace[0], res.fun, res.nit)
    field = DeformationField(x.reshape(-1, 6))
    return field.apply(template), field


def mesh_to_cloud_distance(mesh, cloud) -> np.ndarray:
    """Per-vertex distance to the nearest cloud point."""
    return cKDTree(cloud.points).query(mesh.vertices)[0]
