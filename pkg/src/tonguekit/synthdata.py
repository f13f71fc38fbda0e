"""Ground-truth synthetic data: templates, corpora, clouds, volumes, markers.

The shipped templates are generated here as well: smooth domes triangulated
over an elliptic footprint, with the vertex/face counts of the tongue and
hard-palate templates the pipeline expects.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy import ndimage
from scipy.spatial import Delaunay

from .geometry import LandmarkSet, OrientedPointCloud, RigidTransform, SurfaceMesh, mesh_edges
from .model import MeshCollection, build_model, generate_vector, mode_multiply
from .volume import GrayVolume

TISSUE_GRAY = 200.0
BACKGROUND_GRAY = 50.0

PAPER_PHONES = ["i", "e", "E", "a", "A", "2", "O", "o", "u", "0", "@", "s", "S"]

TONGUE_SHAPE = dict(n_boundary=96, n_interior=3004, semi_axes=(48.0, 30.0), height=22.0, center=(0.0, 0.0, 0.0))
PALATE_SHAPE = dict(n_boundary=158, n_interior=836, semi_axes=(30.0, 20.0), height=10.0, center=(12.0, 0.0, 25.0))


class SynthError(ValueError):
    pass


# ----------------------------------------------------------------- templates

def _disk_points(n_boundary, n_interior):
    golden = np.pi * (3.0 - np.sqrt(5.0))
    i = np.arange(n_interior)
    rho = np.sqrt((i + 0.5) / n_interior) * 0.985
    inner = np.c_[rho * np.cos(i * golden), rho * np.sin(i * golden)]
    a = 2.0 * np.pi * np.arange(n_boundary) / n_boundary
    return np.vstack([np.c_[np.cos(a), np.sin(a)], inner])


def _oriented(faces, verts, up):
    n = np.cross(verts[faces[:, 1]] - verts[faces[:, 0]], verts[faces[:, 2]] - verts[faces[:, 0]])
    flip = (n @ up) < 0
    faces = faces.copy()
    faces[flip] = faces[flip][:, [0, 2, 1]]
    return faces


def dome_mesh(n_boundary, n_interior, semi_axes, height, center=(0.0, 0.0, 0.0)):
    """Paraboloid cap over an elliptic footprint; normals point +z.

    Returns the mesh and the normalized footprint coordinates (u, v) in the
    unit disk, which index regions and landmarks.
    """
    uv = _disk_points(n_boundary, n_interior)
    faces = Delaunay(uv).simplices.astype(np.int64)
    a, b = semi_axes
    rho2 = np.sum(uv ** 2, axis=1)
    verts = np.c_[a * uv[:, 0], b * uv[:, 1], height * (1.0 - rho2)] + np.asarray(center)
    faces = _oriented(faces, verts, np.array([0.0, 0.0, 1.0]))
    return SurfaceMesh(verts, faces), uv


def _nearest(uv, target):
    return int(np.argmin(np.sum((uv - np.asarray(target)) ** 2, axis=1)))


def tongue_template(n_boundary=96, n_interior=3004, semi_axes=(48.0, 30.0), height=22.0,
                    center=(0.0, 0.0, 0.0)) -> SurfaceMesh:
    """Synthetic tongue surface; x points to the tip, z up, y lateral."""
    mesh, uv = dome_mesh(n_boundary, n_interior, semi_axes, height, center)
    lm = {"tip": _nearest(uv, (1.0, 0.0)), "blade": _nearest(uv, (0.55, 0.0)),
          "dorsum": _nearest(uv, (0.0, 0.0)), "back": _nearest(uv, (-1.0, 0.0)),
          "left": _nearest(uv, (0.0, 1.0)), "right": _nearest(uv, (0.0, -1.0))}
    return SurfaceMesh(mesh.vertices, mesh.faces, lm)


def palate_template(n_boundary=158, n_interior=836, semi_axes=(30.0, 20.0), height=10.0,
                    center=(12.0, 0.0, 25.0)) -> SurfaceMesh:
    """Synthetic hard palate vault; normals point up, away from the oral cavity."""
    mesh, uv = dome_mesh(n_boundary, n_interior, semi_axes, height, center)
    lm = {"front": _nearest(uv, (1.0, 0.0)), "back": _nearest(uv, (-1.0, 0.0)),
          "apex": _nearest(uv, (0.0, 0.0)), "left": _nearest(uv, (0.0, 1.0)),
          "right": _nearest(uv, (0.0, -1.0))}
    return SurfaceMesh(mesh.vertices, mesh.faces, lm)


def tongue_regions(mesh, semi_axes=(48.0, 30.0), center=(0.0, 0.0, 0.0)) -> dict:
    """Five disjoint speech-related regions from footprint coordinates."""
    u = (mesh.vertices[:, 0] - center[0]) / semi_axes[0]
    v = (mesh.vertices[:, 1] - center[1]) / semi_axes[1]
    lateral = np.abs(v) > 0.6
    mid = ~lateral
    return {"tip": np.flatnonzero(mid & (u > 0.6)),
            "blade": np.flatnonzero(mid & (u > 0.25) & (u <= 0.6)),
            "dorsum": np.flatnonzero(mid & (u > -0.2) & (u <= 0.25)),
            "back": np.flatnonzero(mid & (u <= -0.2)),
            "lateral": np.flatnonzero(lateral)}


def midsagittal_mask(mesh, half_width=2.0, plane_y=0.0) -> np.ndarray:
    return np.flatnonzero(np.abs(mesh.vertices[:, 1] - plane_y) <= half_width)


def closed_dome(n_boundary, n_interior, semi_axes, height, bottom_depth, center=(0.0, 0.0, 0.0)):
    """Watertight solid: the dome cap plus a shallow bottom cap sharing its rim."""
    top, uv = dome_mesh(n_boundary, n_interior, semi_axes, height, center)
    nb = n_boundary
    rho2 = np.sum(uv[nb:] ** 2, axis=1)
    a, b = semi_axes
    bottom = np.c_[a * uv[nb:, 0], b * uv[nb:, 1], -bottom_depth * (1.0 - rho2)] + np.asarray(center)
    verts = np.vstack([top.vertices, bottom])
    remap = np.r_[np.arange(nb), len(uv) + np.arange(len(uv) - nb)]
    bfaces = remap[top.faces][:, [0, 2, 1]]
    return SurfaceMesh(verts, np.vstack([top.faces, bfaces]))


def closed_tongue(**kw) -> SurfaceMesh:
    shape = {**TONGUE_SHAPE, **kw}
    return closed_dome(shape["n_boundary"], shape["n_interior"], shape["semi_axes"], shape["height"],
                       bottom_depth=6.0, center=shape["center"])


def is_watertight(mesh) -> bool:
    f = mesh.faces
    e = np.sort(np.concatenate([f[:, [0, 1]], f[:, [1, 2]], f[:, [2, 0]]]), axis=1)
    _, counts = np.unique(e, axis=0, return_counts=True)
    return bool(np.all(counts == 2))


# ---------------------------------------------------------- model corpora

@dataclass(frozen=True)
class SynthSpec:
    speakers: int = 6
    poses: int = 5
    rank_speaker: int = 3
    rank_pose: int = 2
    amplitude: float = 3.0
    noise: float = 15.0
    spacing: tuple = (1.1875, 1.1875, 1.2)
    seed: int = 0
    template: SurfaceMesh = None
    basis: str = "smooth"

    def __post_init__(self):
        if not (1 <= self.rank_speaker < self.speakers and 1 <= self.rank_pose < self.poses):
            raise SynthError("ranks must satisfy 1 <= rank < count (centering removes one dimension)")
        if self.amplitude < 0:
            raise SynthError("amplitude must be >= 0")
        if self.basis not in ("smooth", "articulatory"):
            raise SynthError(f"unknown basis {self.basis!r}")


def smooth_basis(mesh, count, max_order=2) -> np.ndarray:
    """Orthonormal smooth displacement fields (columns, length 3*|V|).

    Products of low-order cosines in the normalized bounding box coordinates,
    each applied along one axis.
    """
    v = mesh.vertices
    lo, hi = v.min(0), v.max(0)
    x = (v - lo) / np.where(hi > lo, hi - lo, 1.0)
    fields = []
    for order_sum in range(0, 2 * max_order + 1):
        for a in range(max_order + 1):
            b = order_sum - a
            if not 0 <= b <= max_order:
                continue
            phi = np.cos(np.pi * a * x[:, 0]) * np.cos(np.pi * b * x[:, 1])
            for axis in range(3):
                f = np.zeros_like(v)
                f[:, axis] = phi
                fields.append(f.ravel())
    basis = np.array(fields).T
    if count > basis.shape[1]:
        raise SynthError(f"at most {basis.shape[1]} smooth fields available")
    q, _ = np.linalg.qr(basis[:, :count])
    return q


def articulatory_basis(mesh, count) -> np.ndarray:
    """Orthonormal fields that bend the surface in the mid-sagittal plane.

    Cosine profiles along x drive vertical and front-back displacement,
    tapered laterally, so sparse markers on the midline observe every field.
    """
    v = mesh.vertices
    lo, hi = v.min(0), v.max(0)
    x = (v - lo) / np.where(hi > lo, hi - lo, 1.0)
    taper = np.cos(0.5 * np.pi * (2.0 * x[:, 1] - 1.0)) ** 2
    fields = []
    for a in range(count):
        phi = np.cos(np.pi * (a // 2) * x[:, 0]) * taper
        f = np.zeros_like(v)
        f[:, 2 if a % 2 == 0 else 0] = phi
        fields.append(f.ravel())
    q, _ = np.linalg.qr(np.array(fields).T)
    return q


def _factor(rng, rows, cols, constant):
    """Orthonormal columns summing to zero, optionally led by a constant column."""
    a = rng.standard_normal((rows, cols - int(constant)))
    a -= a.mean(axis=0)
    if constant:
        a = np.c_[np.ones(rows), a]
    q, _ = np.linalg.qr(a)
    return q * np.where(np.sign(q[0]) == 0, 1.0, np.sign(q[0]))


def synth_model(spec: SynthSpec):
    """Exact multilinear-rank corpus: returns (model, collection, ground truth dict).

    The speaker factor holds a constant column, carrying the pose effects
    every speaker shares, plus zero-sum columns; the pose factor has zero-sum
    columns only. Hence the grand mean of the collection is the template and
    the centered tensor has exact multilinear rank (rank_speaker, rank_pose).
    """
    rng = np.random.default_rng(spec.seed)
    template = spec.template if spec.template is not None else tongue_template()
    m, n, rs, rp = spec.speakers, spec.poses, spec.rank_speaker, spec.rank_pose
    q = min(rs * rp + 2, 27)
    basis = smooth_basis(template, q) if spec.basis == "smooth" else articulatory_basis(template, q)
    # orthonormal core slices with decaying weights: an all-orthogonal core, so
    # the factor columns are the singular vectors of the two unfoldings
    e, _ = np.linalg.qr(rng.standard_normal((q, rs * rp)))
    w = np.outer(0.8 ** np.arange(rs), 0.75 ** np.arange(rp))
    g = (e.T.reshape(rs, rp, q)) * w[:, :, None]
    core0 = np.einsum("abq,kq->abk", g, basis)
    q1 = _factor(rng, m, rs, True)
    q2 = _factor(rng, n, rp, False)
    a = mode_multiply(mode_multiply(core0, q1, 1), q2, 2)
    peak = np.max(np.linalg.norm(a.reshape(m, n, -1, 3), axis=-1)) if np.any(a) else 1.0
    a *= spec.amplitude / peak
    base = template.vertices.ravel()
    meshes = [[template.with_vertices((base + a[i, j]).reshape(-1, 3)) for j in range(n)] for i in range(m)]
    poses = PAPER_PHONES[:n] if n <= len(PAPER_PHONES) else []
    coll = MeshCollection(meshes, poses=poses)
    return build_model(coll), coll, {"template": template, "tensor": a, "u1": q1, "u2": q2}


def sample_coordinates(rng, mean, std, size=None, trunc=3.0):
    """Per-coordinate normal law truncated at ``trunc`` standard deviations."""
    mean = np.asarray(mean, dtype=np.float64)
    std = np.asarray(std, dtype=np.float64)
    shape = (size, mean.size) if size is not None else (mean.size,)
    z = rng.standard_normal(shape)
    bad = np.abs(z) > trunc
    while np.any(bad):
        z[bad] = rng.standard_normal(int(bad.sum()))
        bad = np.abs(z) > trunc
    return mean + z * std


# -------------------------------------------------------------------- clouds

def synth_cloud(mesh, density=2.0, noise=0.0, hole=None, seed=0) -> OrientedPointCloud:
    """Area-weighted surface samples with face normals.

    ``density`` is in points per mm^2; ``hole`` = (center, radius) deletes
    every sample inside that sphere.
    """
    if density <= 0:
        raise SynthError("density must be positive")
    rng = np.random.default_rng(seed)
    areas = mesh.face_areas()
    count = max(1, int(round(density * areas.sum())))
    face = rng.choice(len(areas), size=count, p=areas / areas.sum())
    r1, r2 = rng.random(count), rng.random(count)
    flip = r1 + r2 > 1
    r1[flip], r2[flip] = 1 - r1[flip], 1 - r2[flip]
    tri = mesh.vertices[mesh.faces[face]]
    pts = tri[:, 0] + r1[:, None] * (tri[:, 1] - tri[:, 0]) + r2[:, None] * (tri[:, 2] - tri[:, 0])
    nrm = mesh.face_normals()[face]
    if noise > 0:
        pts = pts + rng.normal(0.0, noise, pts.shape)
    if hole is not None:
        center, radius = hole
        keep = np.linalg.norm(pts - np.asarray(center), axis=1) > radius
        pts, nrm = pts[keep], nrm[keep]
    return OrientedPointCloud(pts, nrm)


def vertex_cloud(mesh) -> OrientedPointCloud:
    return OrientedPointCloud(mesh.vertices, mesh.vertex_normals())


# ------------------------------------------------------------------- volumes

def voxelize(mesh, dims, spacing, origin) -> np.ndarray:
    """Inside test by z-ray parity through voxel centers."""
    if not is_watertight(mesh):
        raise SynthError("voxelize needs a watertight mesh")
    nx, ny, nz = dims
    h = np.asarray(spacing, dtype=np.float64)
    o = np.asarray(origin, dtype=np.float64)
    inside = np.zeros(dims, dtype=bool)
    hits = [[[] for _ in range(ny)] for _ in range(nx)]
    tri = mesh.vertices[mesh.faces]
    # tiny offset keeps rays off vertices and edges of axis-aligned geometry
    eps = np.array([1e-7, 2.3e-7])
    for t in tri:
        x0, x1 = t[:, 0].min(), t[:, 0].max()
        y0, y1 = t[:, 1].min(), t[:, 1].max()
        i0, i1 = int(np.ceil((x0 - o[0]) / h[0] - eps[0])), int(np.floor((x1 - o[0]) / h[0] - eps[0]))
        j0, j1 = int(np.ceil((y0 - o[1]) / h[1] - eps[1])), int(np.floor((y1 - o[1]) / h[1] - eps[1]))
        i0, j0 = max(i0, 0), max(j0, 0)
        i1, j1 = min(i1, nx - 1), min(j1, ny - 1)
        if i0 > i1 or j0 > j1:
            continue
        a, b, c = t
        den = (b[1] - c[1]) * (a[0] - c[0]) + (c[0] - b[0]) * (a[1] - c[1])
        if abs(den) < 1e-14:
            continue
        for i in range(i0, i1 + 1):
            px = o[0] + (i + eps[0]) * h[0]
            for j in range(j0, j1 + 1):
                py = o[1] + (j + eps[1]) * h[1]
                l1 = ((b[1] - c[1]) * (px - c[0]) + (c[0] - b[0]) * (py - c[1])) / den
                l2 = ((c[1] - a[1]) * (px - c[0]) + (a[0] - c[0]) * (py - c[1])) / den
                l3 = 1.0 - l1 - l2
                if l1 >= 0 and l2 >= 0 and l3 >= 0:
                    hits[i][j].append(l1 * a[2] + l2 * b[2] + l3 * c[2])
    zc = o[2] + np.arange(nz) * h[2]
    for i in range(nx):
        for j in range(ny):
            zs = np.sort(hits[i][j])
            if len(zs) >= 2:
                inside[i, j] = (np.searchsorted(zs, zc) % 2) == 1
    return inside


def synth_volume(mesh, spacing=(1.0, 1.0, 1.0), noise=15.0, margin=4.0, seed=0):
    """Two-plateau phantom (tissue 200, background 50) plus Gaussian noise.

    Returns (GrayVolume, inside mask).
    """
    if not is_watertight(mesh):
        raise SynthError("synth_volume needs a watertight solid")
    h = np.asarray(spacing, dtype=np.float64)
    lo = mesh.vertices.min(0) - margin
    hi = mesh.vertices.max(0) + margin
    dims = tuple(int(d) for d in np.ceil((hi - lo) / h).astype(int) + 1)
    inside = voxelize(mesh, dims, h, lo)
    data = np.where(inside, TISSUE_GRAY, BACKGROUND_GRAY)
    if noise > 0:
        rng = np.random.default_rng(seed)
        data = np.clip(data + rng.normal(0.0, noise, data.shape), 0.0, 255.0)
    return GrayVolume(data, tuple(h), tuple(lo)), inside


def synth_palate_volume(palate, spacing=(1.0, 1.0, 1.0), margin=20.0, texture=30.0, seed=0):
    """Layered scan around a palate: dark oral cavity below the surface, a bright
    bony band above it, plus smooth texture so every rigid DOF is observable."""
    rng = np.random.default_rng(seed)
    h = np.asarray(spacing, dtype=np.float64)
    lo = palate.vertices.min(0) - margin
    hi = palate.vertices.max(0) + margin
    dims = tuple(int(d) for d in np.ceil((hi - lo) / h).astype(int) + 1)
    grid = np.stack(np.meshgrid(*[lo[a] + np.arange(dims[a]) * h[a] for a in range(3)], indexing="ij"), -1)
    from scipy.spatial import cKDTree
    dist, idx = cKDTree(palate.vertices).query(grid.reshape(-1, 3))
    nrm = palate.vertex_normals()
    signed = np.einsum("ij,ij->i", grid.reshape(-1, 3) - palate.vertices[idx], nrm[idx]).reshape(dims)
    layers = (60.0 + 120.0 * np.exp(-((signed - 4.0) / 3.0) ** 2)
              + 40.0 * np.exp(-((signed - 12.0) / 2.5) ** 2))
    tex = ndimage.gaussian_filter(rng.standard_normal(dims), sigma=3.0 / h)
    tex *= texture / max(tex.std(), 1e-12)
    data = np.clip(layers + tex, 0.0, 255.0)
    return GrayVolume(data, tuple(h), tuple(lo))


def resample_rigid(vol, transform: RigidTransform, brightness=0.0):
    """Volume g with g(A x) = f(x) + brightness, by trilinear resampling."""
    dims = vol.dims
    idx = np.stack(np.meshgrid(*[np.arange(d) for d in dims], indexing="ij"), -1).reshape(-1, 3)
    world = vol.index_to_world(idx)
    src = transform.inverse().apply(world)
    vals = ndimage.map_coordinates(vol.data, vol.world_to_index(src).T, order=1, mode="nearest")
    data = np.clip(vals.reshape(dims) + brightness, 0.0, 255.0)
    return GrayVolume(data, vol.spacing, vol.origin)


def random_rigid(rng, max_deg, max_mm, center=(0.0, 0.0, 0.0)) -> RigidTransform:
    """Rotation about ``center`` by <= max_deg, then translation <= max_mm."""
    axis = rng.standard_normal(3)
    axis /= np.linalg.norm(axis)
    ang = np.radians(rng.uniform(0.3, 1.0) * max_deg)
    d = rng.standard_normal(3)
    d *= rng.uniform(0.3, 1.0) * max_mm / np.linalg.norm(d)
    rot = RigidTransform.from_params(np.r_[axis * ang, 0, 0, 0])
    c = np.asarray(center, dtype=np.float64)
    return RigidTransform(rot.rotation, c - rot.rotation @ c + d)


# ------------------------------------------------------------ contact phantom

def synth_contact_phantom(tongue=None, palate=None, bump=9.0, width=10.0, density=2.0, seed=0):
    """Tongue pressed against the palate, scanned with a hole at the contact.

    The default palate vault hangs about 4 mm above the template. The true
    tongue is the template with a Gaussian bump of height ``bump`` under the
    palate apex, clipped by the palate underside, so the two surfaces coincide
    over the contact patch. Returns a dict with the true tongue, palate, the
    holed cloud (including some unrelated points above the palate), landmarks
    and the contact vertex indices.
    """
    rng = np.random.default_rng(seed)
    tongue = tongue if tongue is not None else tongue_template()
    palate = palate if palate is not None else palate_template(center=(0.0, 0.0, 16.0))
    v = tongue.vertices.copy()
    apex = palate.vertices[palate.landmarks["apex"]] if "apex" in palate.landmarks else palate.vertices.mean(0)
    r2 = (v[:, 0] - apex[0]) ** 2 + (v[:, 1] - apex[1]) ** 2
    v[:, 2] += bump * np.exp(-r2 / (2.0 * width ** 2))
    pz = _palate_height(palate, v[:, :2])
    contact = np.isfinite(pz) & (v[:, 2] >= pz)
    v[contact, 2] = pz[contact]
    true_tongue = tongue.with_vertices(v)
    cloud = synth_cloud(true_tongue, density=density, seed=seed)
    cz = _palate_height(palate, cloud.points[:, :2])
    # no tissue/air boundary where tongue touches palate
    keep = ~(np.isfinite(cz) & (cloud.points[:, 2] >= cz - 0.75))
    cloud = cloud.subset(keep)
    # unrelated tissue above the palate (nasal cavity side)
    lo, hi = palate.vertices.min(0), palate.vertices.max(0)
    n_extra = 400
    extra = np.c_[rng.uniform(lo[0] + 2, hi[0] - 2, n_extra), rng.uniform(lo[1] + 2, hi[1] - 2, n_extra),
                  rng.uniform(hi[2] + 2, hi[2] + 10, n_extra)]
    en = rng.standard_normal((n_extra, 3))
    en /= np.linalg.norm(en, axis=1, keepdims=True)
    cloud = cloud.concat(OrientedPointCloud(extra, en))
    return {"true_tongue": true_tongue, "palate": palate, "cloud": cloud,
            "landmarks": LandmarkSet.from_mesh(true_tongue), "contact": np.flatnonzero(contact)}


def _palate_height(palate, xy):
    """Height of the palate surface above (x, y); NaN outside its footprint."""
    from scipy.interpolate import LinearNDInterpolator
    interp = LinearNDInterpolator(palate.vertices[:, :2], palate.vertices[:, 2])
    return interp(np.asarray(xy))


# ------------------------------------------------------------------- markers

def smooth_path(rng, frames, mean, std, knots=6, scale=1.0):
    """Smooth random trajectory in coordinate space (cubic interpolation of knots)."""
    from scipy.interpolate import CubicSpline
    tk = np.linspace(0.0, 1.0, knots)
    vals = np.asarray(mean) + scale * np.asarray(std) * rng.uniform(-1.0, 1.0, (knots, len(mean)))
    return CubicSpline(tk, vals, axis=0)(np.linspace(0.0, 1.0, frames))


def synth_marker_sequence(model, s, poses, vertices, rate=100.0, jitter=0.0, seed=0):
    """Marker frames from generated meshes at (s, p_t); markers sit on ``vertices``."""
    from .tracking import MarkerFrame
    rng = np.random.default_rng(seed)
    names = [f"coil{i + 1}" for i in range(len(vertices))]
    frames = []
    idx = np.asarray(vertices)
    for t, p in enumerate(poses):
        v = generate_vector(model, s, p).reshape(-1, 3)[idx]
        if jitter > 0:
            v = v + rng.normal(0.0, jitter, v.shape)
        frames.append(MarkerFrame(t / rate, v, names))
    return frames


def edge_count(mesh) -> int:
    return len(mesh_edges(mesh.faces))

