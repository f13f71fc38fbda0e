"""Volumetric scans: I/O, cropping, quantization, edge-enhancing diffusion,
Otsu segmentation and oriented surface extraction.

Arrays are indexed ``data[i, j, k]`` with ``i`` along x. Files store the
payload x-fastest, i.e. in Fortran order of that array.
"""

from __future__ import annotations

import itertools
from dataclasses import dataclass
from fractions import Fraction
from pathlib import Path

import numpy as np
from scipy import ndimage

from .geometry import OrientedPointCloud

OBJECT = 1
BACKGROUND = 0

MAGIC = "MVOL1"


class VolumeError(ValueError):
    pass


@dataclass(frozen=True)
class ScalarVolume:
    data: np.ndarray
    spacing: tuple = (1.0, 1.0, 1.0)
    origin: tuple = (0.0, 0.0, 0.0)

    def __post_init__(self):
        d = np.array(self.data, dtype=np.float64)
        if d.ndim != 3 or min(d.shape) < 1:
            raise VolumeError("volume data must be a non-empty 3D array")
        sp = tuple(float(h) for h in self.spacing)
        if len(sp) != 3 or min(sp) <= 0:
            raise VolumeError("spacing must be three positive values")
        if not np.all(np.isfinite(d)):
            raise VolumeError("volume contains non-finite values")
        d.flags.writeable = False
        object.__setattr__(self, "data", d)
        object.__setattr__(self, "spacing", sp)
        object.__setattr__(self, "origin", tuple(float(o) for o in self.origin))

    @property
    def dims(self):
        return self.data.shape

    def replace(self, data) -> "ScalarVolume":
        return type(self)(data, self.spacing, self.origin)

    def index_to_world(self, idx) -> np.ndarray:
        return np.asarray(idx, dtype=np.float64) * self.spacing + self.origin

    def world_to_index(self, pts) -> np.ndarray:
        return (np.asarray(pts, dtype=np.float64) - self.origin) / self.spacing

    def sample(self, pts):
        """Trilinear interpolation at world points; returns (values, inside mask)."""
        idx = self.world_to_index(pts)
        shape = np.array(self.dims) - 1
        inside = np.all((idx >= 0) & (idx <= shape), axis=-1)
        flat = idx.reshape(-1, 3).T
        vals = ndimage.map_coordinates(self.data, flat, order=1, mode="nearest")
        return vals.reshape(idx.shape[:-1]), inside


class GrayVolume(ScalarVolume):
    def __post_init__(self):
        super().__post_init__()
        if self.data.min() < 0 or self.data.max() > 255:
            raise VolumeError("gray volume values must lie in [0, 255]")


@dataclass(frozen=True)
class TissuePartition:
    labels: np.ndarray
    spacing: tuple = (1.0, 1.0, 1.0)
    origin: tuple = (0.0, 0.0, 0.0)

    def __post_init__(self):
        lab = np.array(self.labels, dtype=np.uint8)
        if lab.ndim != 3:
            raise VolumeError("partition must be 3D")
        if not np.isin(lab, (OBJECT, BACKGROUND)).all():
            raise VolumeError("partition labels must be 0 or 1")
        lab.flags.writeable = False
        object.__setattr__(self, "labels", lab)
        object.__setattr__(self, "spacing", tuple(float(h) for h in self.spacing))
        object.__setattr__(self, "origin", tuple(float(o) for o in self.origin))

    @property
    def dims(self):
        return self.labels.shape


# ------------------------------------------------------------------ file I/O

def _read_header(raw: bytes, path):
    lines = []
    pos = 0
    while True:
        end = raw.find(b"\n", pos)
        if end < 0:
            raise VolumeError(f"{path}: malformed header (no blank separator line)")
        line = raw[pos:end].decode("ascii", errors="replace").strip()
        pos = end + 1
        if not line:
            break
        lines.append(line)
    if not lines or lines[0] != MAGIC:
        raise VolumeError(f"{path}: malformed header (missing {MAGIC} magic)")
    fields = {}
    for line in lines[1:]:
        key, *vals = line.split()
        fields[key] = vals
    try:
        dims = tuple(int(x) for x in fields["dims"])
        spacing = tuple(float(x) for x in fields["spacing"])
        origin = tuple(float(x) for x in fields.get("origin", ["0", "0", "0"]))
        dtype = fields["data"]
    except (KeyError, ValueError) as e:
        raise VolumeError(f"{path}: malformed header ({e})") from None
    if len(dims) != 3 or min(dims) < 1 or len(spacing) != 3 or len(origin) != 3:
        raise VolumeError(f"{path}: malformed header (bad dims/spacing/origin)")
    if min(spacing) <= 0:
        raise VolumeError(f"{path}: malformed header (spacing must be positive)")
    return dims, spacing, origin, dtype, raw[pos:]


def _header(dims, spacing, origin, dtype):
    return (f"{MAGIC}\ndims {dims[0]} {dims[1]} {dims[2]}\n"
            f"spacing {spacing[0]!r} {spacing[1]!r} {spacing[2]!r}\n"
            f"origin {origin[0]!r} {origin[1]!r} {origin[2]!r}\n"
            f"data {dtype}\n\n").encode("ascii")


def load_volume(path) -> ScalarVolume:
    raw = Path(path).read_bytes()
    dims, spacing, origin, dtype, payload = _read_header(raw, path)
    if dtype != ["float32", "little-endian"]:
        raise VolumeError(f"{path}: malformed header (expected 'data float32 little-endian')")
    n = dims[0] * dims[1] * dims[2]
    if len(payload) != 4 * n:
        raise VolumeError(f"{path}: payload size mismatch ({len(payload)} bytes for {n} voxels)")
    data = np.frombuffer(payload, dtype="<f4").astype(np.float64).reshape(dims, order="F")
    if not np.all(np.isfinite(data)):
        raise VolumeError(f"{path}: non-finite values in payload")
    return ScalarVolume(data, spacing, origin)


def save_volume(vol, path):
    payload = np.asarray(vol.data, dtype="<f4").ravel(order="F").tobytes()
    Path(path).write_bytes(_header(vol.dims, vol.spacing, vol.origin, "float32 little-endian") + payload)


def load_partition(path) -> TissuePartition:
    raw = Path(path).read_bytes()
    dims, spacing, origin, dtype, payload = _read_header(raw, path)
    if dtype != ["uint8"]:
        raise VolumeError(f"{path}: malformed header (expected 'data uint8')")
    n = dims[0] * dims[1] * dims[2]
    if len(payload) != n:
        raise VolumeError(f"{path}: payload size mismatch ({len(payload)} bytes for {n} voxels)")
    lab = np.frombuffer(payload, dtype=np.uint8).reshape(dims, order="F")
    return TissuePartition(lab, spacing, origin)


def save_partition(part, path):
    payload = np.asarray(part.labels, dtype=np.uint8).ravel(order="F").tobytes()
    Path(path).write_bytes(_header(part.dims, part.spacing, part.origin, "uint8") + payload)


# --------------------------------------------------------------- operations

def crop_roi(v, lo, hi):
    lo = np.asarray(lo, dtype=int)
    hi = np.asarray(hi, dtype=int)
    dims = np.asarray(v.dims)
    if lo.shape != (3,) or hi.shape != (3,) or np.any(lo < 0) or np.any(hi > dims) or np.any(lo >= hi):
        raise VolumeError(f"crop box {lo.tolist()}..{hi.tolist()} invalid for dims {dims.tolist()}")
    sl = tuple(slice(a, b) for a, b in zip(lo, hi))
    origin = tuple(np.asarray(v.origin) + lo * np.asarray(v.spacing))
    if isinstance(v, TissuePartition):
        return TissuePartition(v.labels[sl], v.spacing, origin)
    return type(v)(v.data[sl], v.spacing, origin)


def quantize(v) -> GrayVolume:
    lo, hi = v.data.min(), v.data.max()
    if hi == lo:
        return GrayVolume(np.zeros(v.dims), v.spacing, v.origin)
    g = (v.data - lo) * (255.0 / (hi - lo))
    return GrayVolume(np.clip(g, 0.0, 255.0), v.spacing, v.origin)


# --- edge-enhancing diffusion

# axis offsets and face diagonals; each pair (a, b) covers one mixed term
_AXES = ((1, 0, 0), (0, 1, 0), (0, 0, 1))
_PAIRS = ((0, 1), (0, 2), (1, 2))


def eed_stability_bound(spacing) -> float:
    """Largest explicit time step for which every update is a convex combination.

    The per-voxel conductivities sum to at most tr(H^-1 D H^-1) <= sum 1/h^2
    (D positive semidefinite, eigenvalues <= 1), and each voxel has a +/- pair
    of neighbours per stencil direction.
    """
    h = np.asarray(spacing, dtype=np.float64)
    return float(1.0 / (2.0 * np.sum(1.0 / h ** 2)))


def eed_diffusivity(s2, lam):
    """Weickert's edge-enhancing diffusivity of the squared gradient norm."""
    s2 = np.asarray(s2, dtype=np.float64)
    out = np.ones_like(s2)
    pos = s2 > 0
    out[pos] = 1.0 - np.exp(-3.31488 / (s2[pos] / lam ** 2) ** 4)
    return out


def _stencil_weights(u, spacing, sigma, lam):
    """Nonnegative directional conductivities c_k with D ~ sum_k c_k d_k d_k^T."""
    h = np.asarray(spacing, dtype=np.float64)
    us = ndimage.gaussian_filter(u, sigma=sigma / h, mode="nearest") if sigma > 0 else u
    grads = np.gradient(us, *h, edge_order=1)
    g = np.stack(grads, axis=-1)
    s2 = np.sum(g * g, axis=-1)
    a = 1.0 - eed_diffusivity(s2, lam)  # D = I - a n n^T
    norm = np.sqrt(s2)
    n = np.where(norm[..., None] > 0, g / np.where(norm > 0, norm, 1.0)[..., None], 0.0)
    D = np.eye(3) - a[..., None, None] * n[..., :, None] * n[..., None, :]
    diag_w = {}
    axis_w = [D[..., i, i].copy() for i in range(3)]
    for (i, j) in _PAIRS:
        dij = D[..., i, j]
        diag_w[(i, j, +1)] = np.maximum(dij, 0.0) / (h[i] * h[j])
        diag_w[(i, j, -1)] = np.maximum(-dij, 0.0) / (h[i] * h[j])
        axis_w[i] -= np.abs(dij) * h[i] / h[j]
        axis_w[j] -= np.abs(dij) * h[j] / h[i]
    axis_w = [np.maximum(w, 0.0) / h[i] ** 2 for i, w in enumerate(axis_w)]
    return axis_w, diag_w


def _shift_pair(arr, off):
    """Views (arr[x], arr[x+off]) over all x where both lie in the grid."""
    a_sl, b_sl = [], []
    for o, n in zip(off, arr.shape):
        if o >= 0:
            a_sl.append(slice(0, n - o))
            b_sl.append(slice(o, n))
        else:
            a_sl.append(slice(-o, n))
            b_sl.append(slice(0, n + o))
    return tuple(a_sl), tuple(b_sl)


def _flux_update(u, axis_w, diag_w):
    du = np.zeros_like(u)
    offsets = [(np.array(_AXES[i]), axis_w[i]) for i in range(3)]
    for (i, j, sgn), w in diag_w.items():
        off = np.zeros(3, dtype=int)
        off[i], off[j] = 1, sgn
        offsets.append((off, w))
    for off, w in offsets:
        a, b = _shift_pair(u, off)
        # symmetric edge conductivity keeps the scheme conservative
        flux = 0.5 * (w[a] + w[b]) * (u[b] - u[a])
        du[a] += flux
        du[b] -= flux
    return du


def denoise_eed(v, sigma=1.0, lam=3.0, tau=0.1, steps=20) -> GrayVolume:
    """Explicit 3D edge-enhancing diffusion with reflecting boundaries.

    ``sigma`` is the presmoothing scale in mm, ``lam`` the contrast parameter
    in gray units per mm. The discretization splits the diffusion tensor into
    nonnegative axis and face-diagonal conductivities, so each step is a
    convex combination of neighbouring values: the mean is conserved and no
    new extrema appear.
    """
    if sigma < 0 or lam <= 0 or steps < 0:
        raise VolumeError("denoise_eed needs sigma >= 0, lambda > 0, steps >= 0")
    bound = eed_stability_bound(v.spacing)
    if tau <= 0 or tau > bound:
        raise VolumeError(f"tau={tau} outside the stability range (0, {bound:.6g}]")
    u = np.array(v.data, dtype=np.float64)
    lo, hi = u.min(), u.max()
    for _ in range(int(steps)):
        axis_w, diag_w = _stencil_weights(u, v.spacing, sigma, lam)
        u = u + tau * _flux_update(u, axis_w, diag_w)
    # round-off can leak a few ulps past the input range
    u = np.clip(u, lo, hi)
    return GrayVolume(u, v.spacing, v.origin)


# --- Otsu

def gray_histogram(v) -> np.ndarray:
    bins = np.clip(np.floor(v.data).astype(np.int64), 0, 255)
    return np.bincount(bins.ravel(), minlength=256)


def otsu_from_histogram(hist) -> int:
    """Threshold t maximizing between-class variance for classes {<= t} / {> t}.

    Scores are compared exactly (integer arithmetic) so plateaus of equal
    variance resolve to the smallest t.
    """
    hist = [int(c) for c in hist]
    if sum(1 for c in hist if c > 0) < 2:
        raise VolumeError("degenerate histogram")
    total = sum(hist)
    total_sum = sum(i * c for i, c in enumerate(hist))
    best_t, best = None, None
    n0 = s0 = 0
    for t in range(255):
        n0 += hist[t]
        s0 += t * hist[t]
        n1 = total - n0
        if n0 == 0 or n1 == 0:
            continue
        # sigma_B^2 * N^2 = (N*s0 - S*n0)^2 / (n0*n1)
        score = Fraction((total * s0 - total_sum * n0) ** 2, n0 * n1)
        if best is None or score > best:
            best, best_t = score, t
    return best_t


def otsu_threshold(v):
    t = otsu_from_histogram(gray_histogram(v))
    bins = np.clip(np.floor(v.data).astype(np.int64), 0, 255)
    labels = np.where(bins > t, OBJECT, BACKGROUND).astype(np.uint8)
    return t, TissuePartition(labels, v.spacing, v.origin)


# --- surface extraction

_N6 = [o for o in itertools.product((-1, 0, 1), repeat=3) if sum(map(abs, o)) == 1]
_N26 = [o for o in itertools.product((-1, 0, 1), repeat=3) if o != (0, 0, 0)]


def _neighbor(padded, off, shape):
    sl = tuple(slice(1 + o, 1 + o + n) for o, n in zip(off, shape))
    return padded[sl]


def extract_surface(p: TissuePartition) -> OrientedPointCloud:
    """OBJECT voxels with a BACKGROUND 6-neighbour, with normals pointing
    from tissue toward background.

    Outside the grid, labels are replicated from the border, so the domain
    boundary itself never creates surface points.
    """
    obj = p.labels == OBJECT
    if not obj.any():
        raise VolumeError("partition has no OBJECT voxels")
    shape = obj.shape
    pad = np.pad(obj, 1, mode="edge")
    surface = np.zeros(shape, dtype=bool)
    for off in _N6:
        surface |= ~_neighbor(pad, off, shape)
    surface &= obj
    h = np.asarray(p.spacing)
    idx = np.argwhere(surface)
    acc = np.zeros((len(idx), 3))
    for off in _N26:
        bg = ~_neighbor(pad, off, shape)[surface]
        acc += bg[:, None] * (np.asarray(off) * h)
    norm = np.linalg.norm(acc, axis=1)
    keep = norm > 1e-12 * h.max()
    pts = idx[keep] * h + np.asarray(p.origin)
    nrm = acc[keep] / norm[keep, None]
    return OrientedPointCloud(pts, nrm)


def surface_voxel_count(p: TissuePartition) -> int:
    obj = p.labels == OBJECT
    er = ndimage.binary_erosion(obj, structure=ndimage.generate_binary_structure(3, 1), border_value=1)
    return int((obj & ~er).sum())
