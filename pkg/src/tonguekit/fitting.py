"""Box-constrained fitting of multilinear models, and bootstrapped matching."""

from __future__ import annotations

import logging
from dataclasses import dataclass, field, replace

import numpy as np
from scipy.optimize import lsq_linear, minimize_scalar

from .geometry import LandmarkSet, OrientedPointCloud, SurfaceMesh, vertex_normals
from .model import MeshCollection, build_model, complete_missing, generate
from .registration import CloudIndex, MatchWeights, match_template

log = logging.getLogger(__name__)

NEAREST = "nearest"
FIXED = "fixed"


class FitError(ValueError):
    pass


@dataclass(frozen=True)
class FitConfig:
    alpha: float = 1.0
    gamma: float = 1.0
    h: float = 0.5
    series: int = 10
    correspondence: str = NEAREST
    outer: int = 10
    search_radius: float = 4.0
    max_normal_angle: float = 60.0
    canonical: bool = True

    def __post_init__(self):
        if self.alpha < 0 or self.gamma < 0:
            raise FitError("weights must be nonnegative")
        if self.h < 0:
            raise FitError("h must be nonnegative")
        if self.series < 1 or self.outer < 1:
            raise FitError("series and outer counts must be >= 1")
        if self.correspondence not in (NEAREST, FIXED):
            raise FitError(f"unknown correspondence mode {self.correspondence!r}")

    def replace(self, **kw) -> "FitConfig":
        return replace(self, **kw)


@dataclass
class FitResult:
    s: np.ndarray
    p: np.ndarray
    mesh: SurfaceMesh
    residuals: np.ndarray  # per vertex, NaN where no correspondence
    energy: float
    energies: list = field(default_factory=list)

    def to_json(self) -> dict:
        r = self.residuals[np.isfinite(self.residuals)]
        return {"s": [float(x) for x in self.s], "p": [float(x) for x in self.p],
                "energy": float(self.energy),
                "residual": {"count": int(r.size), "mean": float(r.mean()) if r.size else None,
                             "max": float(r.max()) if r.size else None,
                             "rms": float(np.sqrt(np.mean(r ** 2))) if r.size else None}}


def box(stats, h):
    mean, std = (np.asarray(a, dtype=np.float64) for a in stats)
    return mean - h * std, mean + h * std


def clamp_coords(x, stats, h) -> np.ndarray:
    lo, hi = box(stats, h)
    x = np.asarray(x, dtype=np.float64)
    if x.shape != lo.shape:
        raise FitError("coordinate and statistics lengths differ")
    return np.minimum(np.maximum(x, lo), hi)


def _box_lsq(a, b, lo, hi):
    """argmin ||a x - b|| on the box; coordinates with lo == hi are held fixed."""
    x = lo.copy()
    free = hi > lo
    if not np.any(free):
        return x
    rhs = b - a[:, ~free] @ x[~free]
    af = a[:, free]
    res = lsq_linear(af, rhs, bounds=(lo[free], hi[free]), method="bvls", tol=1e-12, lsmr_tol=None)
    x[free] = np.clip(res.x, lo[free], hi[free])
    return x


class FitProblem:
    """E(s, p) = alpha * mean ||v_i(s,p) - q_i||^2 + gamma * mean ||v_l(s,p) - L_l||^2."""

    def __init__(self, model, data_idx, data_targets, lm_idx, lm_targets, alpha, gamma):
        self.model = model
        mu = model.mean.reshape(-1, 3)
        core = model.core.reshape(model.core.shape[0], model.core.shape[1], -1, 3)
        rows, rhs, w = [], [], []
        for idx, tgt, weight in ((data_idx, data_targets, alpha), (lm_idx, lm_targets, gamma)):
            idx = np.asarray(idx, dtype=np.int64)
            if len(idx) == 0 or weight == 0:
                continue
            c = np.sqrt(weight / len(idx))
            rows.append(core[:, :, idx, :].reshape(core.shape[0], core.shape[1], -1))
            rhs.append((np.asarray(tgt, dtype=np.float64).reshape(-1, 3) - mu[idx]).ravel())
            w.append(np.full(3 * len(idx), c))
        if not rows:
            raise FitError("fit has no data or landmark terms")
        self.core = np.concatenate(rows, axis=2) * np.concatenate(w)
        self.rhs = np.concatenate(rhs) * np.concatenate(w)

    def energy(self, s, p) -> float:
        r = np.einsum("a,b,abk->k", s, p, self.core) - self.rhs
        return float(r @ r)

    def rank_one_start(self, s_box, p_box):
        """Best rank-1 (s, p) from the unconstrained solve for the outer product.

        The free scale between s and p is set so that coordinates pinned by
        a zero-width box get their pinned values, if any are nonzero.
        """
        a, b = self.core.shape[:2]
        w, *_ = np.linalg.lstsq(self.core.reshape(a * b, -1).T, self.rhs, rcond=None)
        u, sv, vt = np.linalg.svd(w.reshape(a, b))
        s, p = u[:, 0] * np.sqrt(sv[0]), vt[0] * np.sqrt(sv[0])
        fs = (s_box[0] == s_box[1]) & (s != 0)
        fp = (p_box[0] == p_box[1]) & (p != 0)
        if np.any(fs & (s_box[0] != 0)):
            c = (s[fs] @ s_box[0][fs]) / (s[fs] @ s[fs])
            s, p = s * c, p / c
        elif np.any(fp & (p_box[0] != 0)):
            c = (p[fp] @ p_box[0][fp]) / (p[fp] @ p[fp])
            s, p = s / c, p * c
        return s, p

    def solve_s(self, p, lo, hi):
        return _box_lsq(np.einsum("b,abk->ka", p, self.core), self.rhs, lo, hi)

    def solve_p(self, s, lo, hi):
        return _box_lsq(np.einsum("a,abk->kb", s, self.core), self.rhs, lo, hi)


def _scale_interval(s, p, s_box, p_box):
    """Range of c > 0 keeping c*s and p/c inside their boxes."""
    lo, hi = 0.0, np.inf
    for x, (a, b), inverse in ((s, s_box, False), (p, p_box, True)):
        for xi, ai, bi in zip(x, a, b):
            if xi == 0:
                continue
            u, v = sorted((ai / xi, bi / xi))
            if inverse:
                # u <= 1/c <= v
                if v <= 0:
                    return None
                u, v = 1.0 / v, (np.inf if u <= 0 else 1.0 / u)
            lo, hi = max(lo, u), min(hi, v)
    return (lo, hi) if lo <= 1.0 <= hi else None


def canonical_scale(s, p, s_stats, p_stats, h):
    """Pick the representative (c s, p / c), c > 0, closest to the coordinate means.

    The generated shape depends only on the outer product of s and p, so
    fits are determined only up to this rescaling. Closeness is measured in
    units of the per-coordinate deviations; the boxes stay satisfied.
    """
    span = _scale_interval(s, p, box(s_stats, h), box(p_stats, h))
    if span is None:
        return s, p
    t_lo = max(np.log(span[0]) if span[0] > 0 else -np.inf, -20.0)
    t_hi = min(np.log(span[1]), 20.0)
    if t_hi - t_lo < 1e-12:
        return s, p
    sm, ss = (np.asarray(a, dtype=np.float64) for a in s_stats)
    pm, ps = (np.asarray(a, dtype=np.float64) for a in p_stats)
    ks, kp = ss > 0, ps > 0

    def cost(t):
        c = np.exp(t)
        return (np.sum(((c * s[ks] - sm[ks]) / ss[ks]) ** 2)
                + np.sum(((p[kp] / c - pm[kp]) / ps[kp]) ** 2))

    res = minimize_scalar(cost, bounds=(t_lo, t_hi), method="bounded", options={"xatol": 1e-12})
    if cost(res.x) >= cost(0.0):
        return s, p
    c = np.exp(res.x)
    return clamp_coords(c * s, s_stats, h), clamp_coords(p / c, p_stats, h)


def _minimize(problem, s, p, s_box, p_box, outer, free_s=True, free_p=True):
    energies = [problem.energy(s, p)]
    if free_s and free_p:
        # the bilinear energy has a saddle where s or p vanishes; start from a rank-1 solve
        s1, p1 = problem.rank_one_start(s_box, p_box)
        s1, p1 = np.clip(s1, *s_box), np.clip(p1, *p_box)
        if problem.energy(s1, p1) < energies[0]:
            s, p = s1, p1
            energies.append(problem.energy(s, p))
    for _ in range(outer):
        s_new = problem.solve_s(p, *s_box) if free_s else s
        p_new = problem.solve_p(s_new, *p_box) if free_p else p
        e = problem.energy(s_new, p_new)
        # guard against solver round-off breaking monotonicity
        if e > energies[-1]:
            break
        s, p = s_new, p_new
        energies.append(e)
        if energies[-2] - e <= 1e-15 * max(energies[0], 1e-300):
            break
    return s, p, energies


def fit_model(model, cloud: OrientedPointCloud = None, landmarks: LandmarkSet = None,
              cfg: FitConfig = FitConfig(), targets=None, init=None, free=("s", "p"),
              fixed_coords=None, template_landmarks=None) -> FitResult:
    """Fit (s, p) to a cloud (nearest-neighbor correspondences) or to fixed targets.

    ``targets`` is either an (N, 3) array of per-vertex target points or a
    pair (vertex indices, points); it selects FIXED mode. ``free`` names the
    coordinate blocks that are optimized; the others stay at ``fixed_coords``
    (default: their means). ``template_landmarks`` names landmark vertices when
    the model template carries none.
    """
    mode = FIXED if targets is not None else cfg.correspondence
    if mode == FIXED and targets is None:
        raise FitError("FIXED correspondences need targets")
    if mode == NEAREST and (cloud is None or len(cloud) == 0):
        raise FitError("empty point cloud without fixed correspondences")
    s_stats, p_stats = model.speaker_stats(), model.pose_stats()
    s_box, p_box = box(s_stats, cfg.h), box(p_stats, cfg.h)
    fixed_coords = fixed_coords or {}
    s = clamp_coords(fixed_coords.get("s", s_stats[0]), s_stats, cfg.h)
    p = clamp_coords(fixed_coords.get("p", p_stats[0]), p_stats, cfg.h)
    if init is not None:
        s = clamp_coords(init[0], s_stats, cfg.h) if "s" in free else s
        p = clamp_coords(init[1], p_stats, cfg.h) if "p" in free else p
    free_s, free_p = "s" in free, "p" in free
    template = model.template(template_landmarks)
    lm_idx = landmarks.resolve(template) if landmarks is not None and len(landmarks) else np.zeros(0, int)
    lm_targets = landmarks.targets if len(lm_idx) else np.zeros((0, 3))
    trace = []
    nv = model.n_vertices
    if mode == FIXED:
        if isinstance(targets, tuple):
            idx, pts = np.asarray(targets[0], dtype=np.int64), np.asarray(targets[1], dtype=np.float64)
        else:
            pts = np.asarray(targets, dtype=np.float64).reshape(-1, 3)
            if len(pts) != nv:
                raise FitError(f"{len(pts)} targets for a {nv}-vertex model")
            idx = np.arange(nv)
        problem = FitProblem(model, idx, pts, lm_idx, lm_targets, cfg.alpha, cfg.gamma)
        s, p, trace = _minimize(problem, s, p, s_box, p_box, cfg.outer, free_s, free_p)
        matched_idx, matched = idx, pts
    else:
        index = CloudIndex(cloud)
        matched_idx, matched = np.zeros(0, int), np.zeros((0, 3))
        for t in range(cfg.series):
            v = generate(model, s, p).vertices
            # side test in the cloud's frame: with the vertex frame a fit that
            # starts below a convex target keeps sinking
            best, _, _ = index.candidates(v, vertex_normals(v, model.faces), cfg.search_radius,
                                          cfg.max_normal_angle, side_frame="point")
            matched_idx = np.flatnonzero(best >= 0)
            matched = cloud.points[best[matched_idx]]
            if len(matched_idx) == 0 and len(lm_idx) == 0:
                raise FitError("no correspondences found")
            problem = FitProblem(model, matched_idx, matched, lm_idx, lm_targets, cfg.alpha, cfg.gamma)
            s, p, e = _minimize(problem, s, p, s_box, p_box, cfg.outer, free_s, free_p)
            trace.extend(e)
            log.debug("fit energy %d/%d: %d matches, E = %.6g", t + 1, cfg.series, len(matched_idx), e[-1])
    if cfg.canonical and free_s and free_p:
        s, p = canonical_scale(s, p, s_stats, p_stats, cfg.h)
    mesh = generate(model, s, p, dict(template.landmarks))
    res = np.full(nv, np.nan)
    if len(matched_idx):
        res[matched_idx] = np.linalg.norm(mesh.vertices[matched_idx] - matched, axis=1)
    energy = problem.energy(s, p)
    return FitResult(s, p, mesh, res, energy, trace)


def fit_pca(model, cloud=None, landmarks=None, cfg: FitConfig = FitConfig(), targets=None,
            mode="speaker", other=None) -> FitResult:
    """Fit one coordinate block with the other held at ``other`` (default: its mean)."""
    if mode not in ("speaker", "pose"):
        raise FitError("mode must be 'speaker' or 'pose'")
    free = ("s",) if mode == "speaker" else ("p",)
    fixed = {} if other is None else {("p" if mode == "speaker" else "s"): other}
    return fit_model(model, cloud, landmarks, cfg, targets=targets, free=free, fixed_coords=fixed)


# ----------------------------------------------------------------- bootstrap

@dataclass
class BootstrapLog:
    residuals: list = field(default_factory=list)  # mean cloud distance per iteration


def _mean_cloud_residual(mesh, cloud):
    from .registration import mesh_to_cloud_distance
    return float(np.mean(mesh_to_cloud_distance(mesh, cloud)))


def bootstrap(clouds, template: SurfaceMesh, landmarks, iterations: int,
              weights: MatchWeights = MatchWeights(), fit_cfg: FitConfig = FitConfig(),
              kind="multilinear", log_out: BootstrapLog = None, speakers=None, poses=None):
    """Template matching refined by model-based re-initialization.

    ``clouds`` is a [speaker][pose] grid (``None`` for missing scans), or a
    flat list for a single-mode (``kind='pca'``) corpus. ``landmarks`` has the
    same layout. Iteration 0 is plain template matching; each of the
    ``iterations`` further rounds builds a model from the current meshes, fits
    it to every cloud and restarts matching from the fitted mesh.
    """
    if iterations < 0:
        raise FitError("iterations must be >= 0")
    if kind == "pca":
        clouds = [[c] for c in clouds]
        landmarks = [[l] for l in landmarks]
    elif kind != "multilinear":
        raise FitError(f"unknown model kind {kind!r}")
    m, n = len(clouds), len(clouds[0])
    cells = [(i, j) for i in range(m) for j in range(n) if clouds[i][j] is not None]
    meshes = [[None] * n for _ in range(m)]
    for i, j in cells:
        meshes[i][j], _ = match_template(template, clouds[i][j], landmarks[i][j], weights)

    def residual():
        return float(np.mean([_mean_cloud_residual(meshes[i][j], clouds[i][j]) for i, j in cells]))

    log_out = log_out if log_out is not None else BootstrapLog()
    log_out.residuals.append(residual())
    for it in range(iterations):
        coll = MeshCollection(meshes, speakers or [], poses or [])
        if not coll.is_complete():
            coll = complete_missing(coll)
        model = build_model(coll)
        for i, j in cells:
            fit = fit_model(model, clouds[i][j], landmarks[i][j], fit_cfg,
                            template_landmarks=dict(template.landmarks))
            start = SurfaceMesh(fit.mesh.vertices, template.faces, template.landmarks)
            meshes[i][j], _ = match_template(start, clouds[i][j], landmarks[i][j], weights)
        log_out.residuals.append(residual())
        log.info("bootstrap iteration %d: mean residual %.4f mm", it + 1, log_out.residuals[-1])
    if kind == "pca":
        return MeshCollection(meshes, speakers or [], ["P01"])
    return MeshCollection(meshes, speakers or [], poses or [])
