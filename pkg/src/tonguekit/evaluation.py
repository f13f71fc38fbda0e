"""Model quality metrics: compactness, generalization and specificity."""

from __future__ import annotations

import csv
import io
import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .fitting import FitConfig, clamp_coords, fit_model
from .model import MeshCollection, ModelError, build_model, generate_vector, truncate
from .synthdata import sample_coordinates

log = logging.getLogger(__name__)

SPEAKER = "speaker"
POSE = "pose"
REGION_NAMES = ("tip", "blade", "back", "dorsum", "lateral")
VOWELS = ("i", "e", "E", "a", "A", "2", "O", "o", "u", "0", "@")
SIBILANTS = ("s", "S")
# voxel size of the scans, drawn next to generalization curves
MEASUREMENT_PRECISION_MM = 1.2
# pose dim when varying speaker, speaker dim when varying pose
DEFAULT_OTHER_DIM = {SPEAKER: 4, POSE: 5}


class EvaluationError(ValueError):
    pass


@dataclass(frozen=True)
class RegionMask:
    name: str
    indices: np.ndarray

    def __post_init__(self):
        idx = np.unique(np.asarray(self.indices, dtype=np.int64))
        object.__setattr__(self, "indices", idx)

    def check(self, n_vertices):
        if len(self.indices) and (self.indices[0] < 0 or self.indices[-1] >= n_vertices):
            raise EvaluationError(f"region {self.name!r} has indices outside the template")
        return self

    @staticmethod
    def union(masks, name=None) -> "RegionMask":
        masks = list(masks)
        idx = np.concatenate([m.indices for m in masks]) if masks else np.zeros(0, np.int64)
        return RegionMask(name or "+".join(m.name for m in masks), idx)


def region_masks(regions: dict, n_vertices=None) -> dict:
    """RegionMask per name; the named speech regions must be disjoint."""
    out = {k: RegionMask(k, v) for k, v in regions.items()}
    if n_vertices is not None:
        for m in out.values():
            m.check(n_vertices)
    named = [out[k].indices for k in REGION_NAMES if k in out]
    if named:
        allidx = np.concatenate(named)
        if len(np.unique(allidx)) != len(allidx):
            raise EvaluationError("speech regions overlap")
    return out


def phone_region(phone, regions: dict) -> RegionMask:
    masks = regions if all(isinstance(v, RegionMask) for v in regions.values()) else region_masks(regions)
    if phone in VOWELS:
        names = ("blade", "back", "dorsum")
    elif phone in SIBILANTS:
        names = ("tip", "blade")
    else:
        raise EvaluationError(f"no region rule for phone {phone!r}")
    missing = [n for n in names if n not in masks]
    if missing:
        raise EvaluationError(f"region file lacks {missing}")
    return RegionMask.union([masks[n] for n in names], name="+".join(names))


@dataclass(frozen=True)
class MetricCurve:
    x: np.ndarray
    mean: np.ndarray
    std: np.ndarray
    name: str = ""

    def __post_init__(self):
        x = np.asarray(self.x, dtype=np.int64)
        if len(x) > 1 and np.any(np.diff(x) <= 0):
            raise EvaluationError("curve dimensions must be strictly increasing")
        object.__setattr__(self, "x", x)
        object.__setattr__(self, "mean", np.asarray(self.mean, dtype=np.float64))
        object.__setattr__(self, "std", np.asarray(self.std, dtype=np.float64))

    def at(self, d) -> float:
        return float(self.mean[np.flatnonzero(self.x == d)[0]])

    def rows(self):
        return [(int(x), float(m), float(s)) for x, m, s in zip(self.x, self.mean, self.std)]


def _check_mode(mode):
    if mode not in (SPEAKER, POSE):
        raise EvaluationError(f"mode must be {SPEAKER!r} or {POSE!r}, got {mode!r}")


# -------------------------------------------------------------- compactness

def compactness(model, mode=SPEAKER) -> MetricCurve:
    _check_mode(mode)
    sv = np.asarray(model.sv1 if mode == SPEAKER else model.sv2, dtype=np.float64)
    var = sv ** 2
    total = var.sum()
    if total <= 0:
        raise EvaluationError("model has no variance")
    pct = 100.0 * np.cumsum(var) / total
    pct[-1] = 100.0
    return MetricCurve(np.arange(1, len(sv) + 1), pct, np.zeros(len(sv)), f"compactness_{mode}")


# ----------------------------------------------------------- generalization

def _dims_for(model, mode):
    return model.u1.shape[1] if mode == SPEAKER else model.u2.shape[1]


def _pad(sp, model, mode, h):
    """Previous optimum extended by zeros, which reproduce the same mesh, clipped to the box."""
    s, p = sp
    if mode == SPEAKER:
        s = clamp_coords(np.r_[s, np.zeros(model.u1.shape[1] - len(s))], model.speaker_stats(), h)
    else:
        p = clamp_coords(np.r_[p, np.zeros(model.u2.shape[1] - len(p))], model.pose_stats(), h)
    return s, p


def _fold(collection, mode, k, other_dim, h, dims, held_in):
    if held_in:
        train = collection
    else:
        train = collection.without_speaker(k) if mode == SPEAKER else collection.without_pose(k)
    model = build_model(train)
    m, n = collection.shape
    cells = [(k, j) for j in range(n)] if mode == SPEAKER else [(i, k) for i in range(m)]
    avail = _dims_for(model, mode)
    other = min(other_dim, _dims_for(model, POSE if mode == SPEAKER else SPEAKER))
    cfg = FitConfig(h=h)
    out, prev = {}, {}
    for d in dims:
        if d > avail:
            continue
        sub = truncate(model, d, other) if mode == SPEAKER else truncate(model, other, d)
        errs = []
        for i, j in cells:
            target = collection.meshes[i][j].vertices
            fit = fit_model(sub, cfg=cfg, targets=target)
            if (i, j) in prev:
                warm = fit_model(sub, cfg=cfg, targets=target, init=_pad(prev[i, j], sub, mode, h))
                fit = warm if warm.energy < fit.energy else fit
            prev[i, j] = (fit.s, fit.p)
            errs.append(float(np.linalg.norm(fit.mesh.vertices - target, axis=1).mean()))
        out[d] = errs
    return out


def generalization(collection: MeshCollection, mode=SPEAKER, other_dim=None, h=2.0, dims=None, jobs=1,
                   held_in=False) -> MetricCurve:
    """Leave-one-out fit error per subspace dimensionality.

    Each fold rebuilds the model without one speaker (or pose) and fits it, with
    fixed vertex correspondences, to every mesh of the held-out slice. With
    ``held_in`` the full collection is used for training (sanity check).
    """
    _check_mode(mode)
    if not collection.is_complete():
        raise EvaluationError("generalization needs a complete collection")
    m, n = collection.shape
    count = m if mode == SPEAKER else n
    if count < 2 or (m < 2 if mode == POSE else n < 1):
        raise EvaluationError("too few slices for leave-one-out")
    other_dim = DEFAULT_OTHER_DIM[mode] if other_dim is None else int(other_dim)
    top = count if held_in else count - 1
    dims = list(range(1, top + 1)) if dims is None else sorted(set(int(d) for d in dims))
    with ThreadPoolExecutor(max_workers=max(1, int(jobs))) as ex:
        folds = list(ex.map(lambda k: _fold(collection, mode, k, other_dim, h, dims, held_in), range(count)))
    xs, means, stds = [], [], []
    for d in dims:
        errs = [e for f in folds for e in f.get(d, [])]
        if not errs:
            continue
        xs.append(d)
        means.append(np.mean(errs))
        stds.append(np.std(errs))
    if not xs:
        raise EvaluationError("no dimensionality is available in every fold")
    return MetricCurve(np.array(xs), np.array(means), np.array(stds), f"generalization_{mode}")


# -------------------------------------------------------------- specificity

def closest_distances(samples, training, region) -> np.ndarray:
    """Distance from each sample to its closest training mesh.

    The distance between two meshes is the mean Euclidean distance between
    corresponding region vertices. ``samples`` is (S, V, 3), ``training`` (T, V, 3).
    """
    idx = region.indices if isinstance(region, RegionMask) else np.asarray(region, dtype=np.int64)
    if len(idx) == 0:
        raise EvaluationError("empty region")
    # coordinate-major layout: the per-vertex norm becomes three contiguous passes
    s = np.ascontiguousarray(np.moveaxis(np.asarray(samples, dtype=np.float64)[:, idx], 2, 0))
    best = np.full(s.shape[1], np.inf)
    acc, tmp = np.empty(s.shape[1:]), np.empty(s.shape[1:])
    for t in np.asarray(training, dtype=np.float64)[:, idx]:
        np.subtract(s[0], t[:, 0], out=acc)
        acc *= acc
        for c in (1, 2):
            np.subtract(s[c], t[:, c], out=tmp)
            tmp *= tmp
            acc += tmp
        np.sqrt(acc, out=acc)
        np.minimum(best, acc.mean(axis=1), out=best)
    return best


def _chunks(samples, chunk):
    starts = list(range(0, samples, chunk))
    return [(c, min(chunk, samples - s)) for c, s in enumerate(starts)]


def _chunk_rng(seed, d, c):
    return np.random.default_rng([int(seed), int(d), int(c)])


def sample_vertices(model, n, rng, pose=None, sigma_scale=1.0, trunc=3.0) -> np.ndarray:
    """Random meshes (n, V, 3). Speaker coordinates are always drawn; pose
    coordinates are drawn too unless ``pose`` freezes them."""
    sm, ss = model.speaker_stats()
    s = sample_coordinates(rng, sm, ss * sigma_scale, size=n, trunc=trunc)
    if pose is None:
        pm, ps = model.pose_stats()
        p = sample_coordinates(rng, pm, ps * sigma_scale, size=n, trunc=trunc)
    else:
        p = np.broadcast_to(np.asarray(pose, dtype=np.float64), (n, model.core.shape[1]))
    return generate_vector(model, s, p).reshape(n, -1, 3)


def _sub_model(model, mode, d, other_dim):
    if mode == SPEAKER:
        return truncate(model, d, min(other_dim, model.u2.shape[1]))
    return truncate(model, min(other_dim, model.u1.shape[1]), d)


def _sampled_curve(name, dims, models, training, region, samples, seed, chunk, jobs, sigma_scale,
                   pose_for, return_distances):
    if samples < 1:
        raise EvaluationError("samples must be >= 1")
    region = region if isinstance(region, RegionMask) else RegionMask("region", region)
    if len(region.indices) == 0:
        raise EvaluationError("empty region")
    tasks = [(d, c, size) for d in dims for c, size in _chunks(int(samples), int(chunk))]

    def run(task):
        d, c, size = task
        mdl = models[d]
        verts = sample_vertices(mdl, size, _chunk_rng(seed, d, c), pose_for(mdl), sigma_scale)
        return closest_distances(verts, training, region)

    with ThreadPoolExecutor(max_workers=max(1, int(jobs))) as ex:
        parts = list(ex.map(run, tasks))
    per_d = {d: [] for d in dims}
    for (d, _, _), part in zip(tasks, parts):
        per_d[d].append(part)
    dist = {d: np.concatenate(per_d[d]) for d in dims}
    curve = MetricCurve(np.array(dims), [dist[d].mean() for d in dims], [dist[d].std() for d in dims], name)
    return (curve, dist) if return_distances else curve


def specificity(model, collection: MeshCollection, region, mode=SPEAKER, samples=10_000, seed=0, dims=None,
                other_dim=None, jobs=1, chunk=1000, sigma_scale=1.0, return_distances=False):
    """Mean distance of random model samples to their closest training mesh.

    Samples are drawn chunk by chunk, each chunk with its own seed derived from
    (seed, d, chunk), so the result does not depend on ``jobs``.
    """
    _check_mode(mode)
    other_dim = DEFAULT_OTHER_DIM[mode] if other_dim is None else int(other_dim)
    dims = list(range(1, _dims_for(model, mode) + 1)) if dims is None else sorted(set(int(d) for d in dims))
    models = {d: _sub_model(model, mode, d, other_dim) for d in dims}
    training = np.array([mesh.vertices for mesh in collection.present()])
    return _sampled_curve(f"specificity_{mode}", dims, models, training, region, samples, seed, chunk,
                          jobs, sigma_scale, lambda mdl: None, return_distances)


def specificity_samples(model, d, samples, seed=0, mode=SPEAKER, other_dim=None, chunk=1000,
                        sigma_scale=1.0) -> np.ndarray:
    """The meshes ``specificity`` draws at dimensionality d, in the same order."""
    other_dim = DEFAULT_OTHER_DIM[mode] if other_dim is None else int(other_dim)
    mdl = _sub_model(model, mode, d, other_dim)
    return np.concatenate([sample_vertices(mdl, size, _chunk_rng(seed, d, c), None, sigma_scale)
                           for c, size in _chunks(int(samples), int(chunk))])


def fixed_phone_specificity(model, collection: MeshCollection, phone, region=None, regions=None,
                            samples=10_000, seed=0, dims=None, jobs=1, chunk=1000, sigma_scale=1.0,
                            return_distances=False):
    """Specificity with the pose frozen to one phone's row of U2.

    Distances are measured only against that phone's training meshes. When
    ``region`` is None it is chosen from ``regions`` by the phone class.
    """
    if phone not in collection.poses:
        raise EvaluationError(f"unknown phone {phone!r}")
    j = collection.poses.index(phone)
    if region is None:
        if regions is None:
            raise EvaluationError("need a region or a region table")
        region = phone_region(phone, regions)
    dims = list(range(1, model.u1.shape[1] + 1)) if dims is None else sorted(set(int(d) for d in dims))
    nt = model.u2.shape[1]
    models = {d: truncate(model, d, nt) for d in dims}
    training = np.array([row[j].vertices for row in collection.meshes if row[j] is not None])
    if len(training) == 0:
        raise EvaluationError(f"no training meshes for phone {phone!r}")
    pose = model.u2[j]
    return _sampled_curve(f"fixed_phone_{phone}", dims, models, training, region, samples, seed, chunk,
                          jobs, sigma_scale, lambda mdl: pose[:mdl.core.shape[1]], return_distances)


# ------------------------------------------------------------------- output

def curve_csv(curve: MetricCurve) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["dimension", "mean", "std"])
    for x, m, s in curve.rows():
        w.writerow([x, repr(m), repr(s)])
    return buf.getvalue()


def save_curve_csv(curve: MetricCurve, path):
    Path(path).write_text(curve_csv(curve))


def load_curve_csv(path, name="") -> MetricCurve:
    with open(path, newline="") as fh:
        rows = list(csv.DictReader(fh))
    return MetricCurve([int(r["dimension"]) for r in rows], [float(r["mean"]) for r in rows],
                       [float(r["std"]) for r in rows], name or Path(path).stem)


def save_gnuplot(curves, path, precision=MEASUREMENT_PRECISION_MM):
    """One whitespace-separated block per curve, separated by two blank lines
    so gnuplot can address them with ``index``."""
    lines = [f"# measurement precision {precision!r} mm"]
    for c in curves:
        lines.append(f"# {c.name}")
        lines.append("# dimension mean std")
        lines.extend(f"{x} {m!r} {s!r}" for x, m, s in c.rows())
        lines.extend(["", ""])
    Path(path).write_text("\n".join(lines))


def check_model_for(model, collection):
    if model.n_vertices != collection.reference.n_vertices:
        raise ModelError("model and collection differ in vertex count")
