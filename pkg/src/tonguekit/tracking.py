"""Sparse-marker tracking with a multilinear model."""

from __future__ import annotations

import json
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np
from scipy.optimize import lsq_linear

from .fitting import FIXED as FIXED_CORR, FitConfig, box, clamp_coords, fit_model
from .model import generate, generate_vector
from .synthdata import sample_coordinates

FREE = "free"
FIXED = "fixed"


class TrackingError(ValueError):
    pass


@dataclass(frozen=True)
class MarkerFrame:
    t: float
    positions: np.ndarray
    names: tuple

    def __post_init__(self):
        pos = np.array(self.positions, dtype=np.float64).reshape(-1, 3)
        if not np.all(np.isfinite(pos)):
            raise TrackingError("marker positions must be finite")
        names = tuple(self.names)
        if len(names) != len(pos):
            raise TrackingError("one name per marker required")
        pos.flags.writeable = False
        object.__setattr__(self, "positions", pos)
        object.__setattr__(self, "names", names)
        object.__setattr__(self, "t", float(self.t))


@dataclass(frozen=True)
class Correspondences:
    mapping: dict  # marker name -> vertex index

    def indices(self, names) -> np.ndarray:
        try:
            return np.array([self.mapping[n] for n in names], dtype=np.int64)
        except KeyError as e:
            raise TrackingError(f"no correspondence for marker {e.args[0]!r}") from None

    def to_json(self) -> dict:
        return {k: int(v) for k, v in self.mapping.items()}


@dataclass(frozen=True)
class TrackConfig:
    alpha: float = 1.0
    beta: float = 5.0
    gamma: float = 5.0
    h: float = 5.0
    anatomy: str = FREE
    s: tuple = None  # fixed anatomy coordinates in FIXED mode
    outer: int = 10

    def __post_init__(self):
        if min(self.alpha, self.beta, self.gamma) < 0:
            raise TrackingError("weights must be nonnegative")
        if self.h <= 0:
            raise TrackingError("h must be positive")
        if self.anatomy not in (FREE, FIXED):
            raise TrackingError(f"unknown anatomy mode {self.anatomy!r}")
        if self.anatomy == FIXED and self.s is None:
            raise TrackingError("FIXED anatomy needs speaker coordinates")

    def replace(self, **kw) -> "TrackConfig":
        return replace(self, **kw)


@dataclass
class Trajectory:
    times: np.ndarray
    s: np.ndarray          # (T, m~)
    p: np.ndarray          # (T, n~)
    residuals: np.ndarray  # (T,) mean marker distance, mm
    energies: np.ndarray   # (T,)
    marker_names: tuple = ()
    meshes: list = field(default_factory=list)


def normalize_weights(x, stats) -> np.ndarray:
    """(x - m) / sigma; coordinates with sigma = 0 map to 0."""
    m, sd = (np.asarray(a, dtype=np.float64) for a in stats)
    x = np.asarray(x, dtype=np.float64)
    safe = np.where(sd > 0, sd, 1.0)
    return np.where(sd > 0, (x - m) / safe, 0.0)


def denormalize_weights(z, stats) -> np.ndarray:
    m, sd = (np.asarray(a, dtype=np.float64) for a in stats)
    return m + np.asarray(z, dtype=np.float64) * sd


# -------------------------------------------------------------- frame solve

class FrameProblem:
    """Per-frame tracking energy for fixed markers and previous coordinates."""

    def __init__(self, model, idx, markers, cfg: TrackConfig, prev=None):
        self.cfg = cfg
        mu = model.mean.reshape(-1, 3)[idx].ravel()
        core = model.core.reshape(model.core.shape[0], model.core.shape[1], -1, 3)[:, :, idx, :]
        w = np.sqrt(cfg.alpha / len(idx))
        self.core = core.reshape(core.shape[0], core.shape[1], -1) * w
        self.rhs = (np.asarray(markers, dtype=np.float64).ravel() - mu) * w
        self.s_stats, self.p_stats = model.speaker_stats(), model.pose_stats()
        self.prev = prev

    def _prior_rows(self, stats, prev, use_smooth):
        m, sd = (np.asarray(a, dtype=np.float64) for a in stats)
        n = len(m)
        rows, rhs = [], []
        live = sd > 0
        if self.cfg.beta > 0 and np.any(live):
            a = np.zeros((int(live.sum()), n))
            a[np.arange(a.shape[0]), np.flatnonzero(live)] = np.sqrt(self.cfg.beta) / sd[live]
            rows.append(a)
            rhs.append(a @ m)
        if use_smooth and prev is not None and self.cfg.gamma > 0:
            rows.append(np.sqrt(self.cfg.gamma) * np.eye(n))
            rhs.append(np.sqrt(self.cfg.gamma) * np.asarray(prev, dtype=np.float64))
        if rows:
            return np.vstack(rows), np.concatenate(rhs)
        return np.zeros((0, n)), np.zeros(0)

    def _terms(self, s, p):
        r = np.einsum("a,b,abk->k", s, p, self.core) - self.rhs
        data = float(r @ r)
        sm, ss = (np.asarray(a) for a in self.s_stats)
        pm, ps = (np.asarray(a) for a in self.p_stats)
        # anatomy terms are constant when s is held fixed, so FIXED and FREE share one energy
        k = ss > 0
        bias = float(np.sum(((s[k] - sm[k]) / ss[k]) ** 2))
        k = ps > 0
        bias += float(np.sum(((p[k] - pm[k]) / ps[k]) ** 2))
        smooth = 0.0
        if self.prev is not None:
            smooth = float(np.sum((p - self.prev[1]) ** 2) + np.sum((s - self.prev[0]) ** 2))
        return data, bias, smooth

    def energy(self, s, p) -> float:
        data, bias, smooth = self._terms(s, p)
        return data + self.cfg.beta * bias + self.cfg.gamma * smooth

    def _solve(self, a_data, stats, prev, use_smooth, lo, hi):
        a_p, b_p = self._prior_rows(stats, prev, use_smooth)
        a = np.vstack([a_data, a_p])
        b = np.concatenate([self.rhs, b_p])
        x = lo.copy()
        free = hi > lo
        if np.any(free):
            res = lsq_linear(a[:, free], b - a[:, ~free] @ x[~free], bounds=(lo[free], hi[free]),
                             method="bvls", tol=1e-12)
            x[free] = np.clip(res.x, lo[free], hi[free])
        return x

    def solve_p(self, s):
        lo, hi = box(self.p_stats, self.cfg.h)
        prev = None if self.prev is None else self.prev[1]
        return self._solve(np.einsum("a,abk->kb", s, self.core), self.p_stats, prev, True, lo, hi)

    def solve_s(self, p):
        lo, hi = box(self.s_stats, self.cfg.h)
        prev = None if self.prev is None else self.prev[0]
        return self._solve(np.einsum("b,abk->ka", p, self.core), self.s_stats, prev, True, lo, hi)

    def minimize(self, s, p):
        """Block-coordinate minimization from (s, p); energy never increases."""
        e = self.energy(s, p)
        for _ in range(self.cfg.outer if self.cfg.anatomy == FREE else 1):
            s_new = self.solve_s(p) if self.cfg.anatomy == FREE else s
            p_new = self.solve_p(s_new)
            e_new = self.energy(s_new, p_new)
            if e_new > e:
                break
            done = e - e_new <= 1e-14 * max(e, 1e-300)
            s, p, e = s_new, p_new, e_new
            if done:
                break
        return s, p, e


def track(model, frames, corr: Correspondences, cfg: TrackConfig = TrackConfig(), keep_meshes=False,
          init=None) -> Trajectory:
    """Fit the model to every frame in order, warm-starting from the previous frame."""
    if not frames:
        raise TrackingError("no frames to track")
    names = frames[0].names
    idx = corr.indices(names)
    for f in frames:
        if f.names != names:
            raise TrackingError("marker names change within the sequence")
    s_stats, p_stats = model.speaker_stats(), model.pose_stats()
    if cfg.anatomy == FIXED:
        s = np.asarray(cfg.s, dtype=np.float64)
        if s.shape != s_stats[0].shape:
            raise TrackingError("fixed anatomy has the wrong dimension")
    else:
        s = clamp_coords(s_stats[0], s_stats, cfg.h)
    p = clamp_coords(p_stats[0], p_stats, cfg.h)
    if init is not None:
        s, p = np.asarray(init[0], dtype=np.float64), np.asarray(init[1], dtype=np.float64)
    out_s, out_p, res, en, meshes = [], [], [], [], []
    prev = None
    for f in frames:
        prob = FrameProblem(model, idx, f.positions, cfg, prev)
        s, p, e = prob.minimize(s, p)
        v = generate_vector(model, s, p).reshape(-1, 3)
        res.append(float(np.mean(np.linalg.norm(v[idx] - f.positions, axis=1))))
        out_s.append(s)
        out_p.append(p)
        en.append(e)
        if keep_meshes:
            meshes.append(generate(model, s, p))
        prev = (s, p)
    return Trajectory(np.array([f.t for f in frames]), np.array(out_s), np.array(out_p),
                      np.array(res), np.array(en), names, meshes)


def free_energy_at(model, frames, corr, cfg: TrackConfig, traj: Trajectory) -> np.ndarray:
    """Per-frame FREE-anatomy optimum given the previous state of ``traj``.

    Each frame is warm-started from ``traj``'s own solution, so the result
    never exceeds the energy ``traj`` attained under its own configuration.
    """
    free_cfg = cfg.replace(anatomy=FREE, s=None)
    idx = corr.indices(frames[0].names)
    out = []
    for t, f in enumerate(frames):
        prev = None if t == 0 else (traj.s[t - 1], traj.p[t - 1])
        prob = FrameProblem(model, idx, f.positions, free_cfg, prev)
        out.append(prob.minimize(traj.s[t], traj.p[t])[2])
    return np.array(out)


def estimate_anatomy(traj: Trajectory) -> np.ndarray:
    if len(traj.s) == 0:
        raise TrackingError("empty trajectory")
    return traj.s.mean(axis=0)


def cumulative_error(residuals, thresholds) -> np.ndarray:
    """Fraction of frames whose mean residual is at most each threshold."""
    r = np.sort(np.asarray(residuals, dtype=np.float64))
    return np.searchsorted(r, np.asarray(thresholds, dtype=np.float64), side="right") / max(len(r), 1)


# ---------------------------------------------------------- correspondences

def _nearest_masked(v, mask, pts):
    d = np.linalg.norm(v[mask][None, :, :] - pts[:, None, :], axis=2)
    j = np.argmin(d, axis=1)
    return mask[j], d[np.arange(len(pts)), j]


def _one_restart(model, pts, mask, seed, h, rounds):
    rng = np.random.default_rng(seed)
    s = sample_coordinates(rng, *model.speaker_stats(), trunc=h)
    p = sample_coordinates(rng, *model.pose_stats(), trunc=h)
    v = generate_vector(model, s, p).reshape(-1, 3)
    assign, dist = _nearest_masked(v, mask, pts)
    cfg = FitConfig(h=h, correspondence=FIXED_CORR, canonical=False)
    for _ in range(rounds):
        fit = fit_model(model, targets=(assign, pts), cfg=cfg, init=(s, p))
        s, p = fit.s, fit.p
        new, dist = _nearest_masked(fit.mesh.vertices, mask, pts)
        if np.array_equal(new, assign):
            break
        assign = new
    return float(dist.mean()), assign


def estimate_correspondences(model, frame: MarkerFrame, mask, restarts=10, seed=0, h=1.0, rounds=20,
                             jobs=1) -> Correspondences:
    """Marker-to-vertex assignment by randomized fit-and-reassign restarts."""
    mask = np.asarray(mask, dtype=np.int64)
    if mask.size == 0:
        raise TrackingError("empty mid-sagittal mask")
    if restarts < 1:
        raise TrackingError("restarts must be >= 1")
    seeds = np.random.SeedSequence(seed).spawn(restarts)
    pts = frame.positions

    def run(ss):
        return _one_restart(model, pts, mask, ss, h, rounds)

    if jobs > 1:
        with ThreadPoolExecutor(jobs) as ex:
            results = list(ex.map(run, seeds))
    else:
        results = [run(ss) for ss in seeds]
    # ties go to the lowest restart index
    best = min(range(restarts), key=lambda r: (results[r][0], r))
    return Correspondences({n: int(i) for n, i in zip(frame.names, results[best][1])})


# ---------------------------------------------------------------------- I/O

def load_markers(path):
    d = json.loads(Path(path).read_text())
    try:
        names = d["markers"]
        return [MarkerFrame(f["t"], f["positions"], names) for f in d["frames"]]
    except (KeyError, TypeError) as e:
        raise TrackingError(f"{path}: malformed marker file ({e})") from None


def save_markers(frames, path):
    d = {"markers": list(frames[0].names) if frames else [],
         "frames": [{"t": f.t, "positions": f.positions.tolist()} for f in frames]}
    Path(path).write_text(json.dumps(d) + "\n")


def trajectory_json(traj: Trajectory, model) -> dict:
    s_stats, p_stats = model.speaker_stats(), model.pose_stats()
    return {"markers": list(traj.marker_names),
            "frames": [{"t": float(t), "speaker": normalize_weights(s, s_stats).tolist(),
                        "pose": normalize_weights(p, p_stats).tolist(), "residual": float(r),
                        "energy": float(e)}
                       for t, s, p, r, e in zip(traj.times, traj.s, traj.p, traj.residuals, traj.energies)]}


def save_trajectory(traj: Trajectory, model, path):
    Path(path).write_text(json.dumps(trajectory_json(traj, model), indent=1) + "\n")
