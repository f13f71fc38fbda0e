"""Acceptance suite. Each test prints one PASS/FAIL line for its criterion."""

import time
from fractions import Fraction

import numpy as np
import pytest
from scipy.linalg import subspace_angles

from tonguekit import templates
from tonguekit.cli import main
from tonguekit.evaluation import (POSE, SPEAKER, RegionMask, closest_distances, generalization, specificity,
                                  specificity_samples)
from tonguekit.fitting import FitConfig, box, fit_model
from tonguekit.geometry import LandmarkSet, RigidTransform, rotation_matrix, surface_distance
from tonguekit.model import (MeshCollection, TrainingTensor, build_model, build_tensor, generate, hosvd,
                             mode_multiply, truncate, unfold)
from tonguekit.palate import align_palate, augment_cloud
from tonguekit.registration import MatchWeights, match_template
from tonguekit.synthdata import (SynthSpec, random_rigid, resample_rigid, sample_coordinates, smooth_path,
                                 synth_cloud, synth_contact_phantom, synth_marker_sequence, synth_model,
                                 synth_palate_volume, tongue_template, vertex_cloud)
from tonguekit.tracking import FIXED, Correspondences, TrackConfig, free_energy_at, track
from tonguekit.volume import GrayVolume, denoise_eed, eed_stability_bound, gray_histogram, otsu_threshold


def _random_tensor(rng):
    m, n, v = rng.integers(2, 9), rng.integers(2, 9), rng.integers(1, 101)
    return rng.standard_normal((m, n, 3 * v)) * rng.uniform(0.1, 10)


def _noisy_collection(template, m, n, rng, scale=1.0):
    return MeshCollection([[template.with_vertices(template.vertices + rng.normal(0, scale, template.vertices.shape))
                            for _ in range(n)] for _ in range(m)])


# ------------------------------------------------------------------ 1-4: model algebra

def test_c01_hosvd_exactness(verdict):
    rng = np.random.default_rng(101)
    tensors = [_random_tensor(rng) for _ in range(49)] + [rng.standard_normal((8, 8, 300))]
    t0 = time.perf_counter()
    worst_rel, worst_orth = 0.0, 0.0
    for a in tensors:
        mdl = hosvd(TrainingTensor(a, np.zeros(a.shape[2])))
        rec = mode_multiply(mode_multiply(mdl.core, mdl.u1, 1), mdl.u2, 2)
        worst_rel = max(worst_rel, np.linalg.norm(rec - a) / np.linalg.norm(a))
        for u in (mdl.u1, mdl.u2):
            worst_orth = max(worst_orth, np.abs(u.T @ u - np.eye(u.shape[1])).max())
    elapsed = time.perf_counter() - t0
    ok = worst_rel < 1e-9 and worst_orth < 1e-9 and elapsed < 10
    verdict(1, ok, f"rel {worst_rel:.1e}, orthonormality {worst_orth:.1e}, {elapsed:.2f} s")
    assert ok


def test_c02_unfolding_oracle(verdict):
    rng = np.random.default_rng(202)
    worst = 0.0
    for _ in range(20):
        a = _random_tensor(rng)
        mdl = hosvd(TrainingTensor(a, np.zeros(a.shape[2])))
        for mode, u in ((1, mdl.u1), (2, mdl.u2)):
            ref = np.linalg.svd(unfold(a, mode), full_matrices=False)[0]
            # every leading subspace, not just the whole (trivial) column space
            for r in range(1, u.shape[1]):
                worst = max(worst, subspace_angles(u[:, :r], ref[:, :r]).max())
    ok = worst < 1e-6
    verdict(2, ok, f"max principal angle {worst:.1e} rad")
    assert ok


def test_c03_training_cells(verdict, synth):
    worst = 0.0
    noisy = _noisy_collection(synth[1].reference, 6, 5, np.random.default_rng(3))
    for coll in (synth[1], noisy):
        mdl = build_model(coll)
        for i in range(6):
            for j in range(5):
                got = generate(mdl, mdl.u1[i], mdl.u2[j]).vertices
                worst = max(worst, np.linalg.norm(got - coll.meshes[i][j].vertices, axis=1).max())
    ok = worst < 1e-6
    verdict(3, ok, f"max vertex error {worst:.1e} mm over 60 cells")
    assert ok


def test_c04_tensor_shape(verdict):
    template = templates.tongue()
    coll = _noisy_collection(template, 11, 13, np.random.default_rng(4), 0.1)
    shape = build_tensor(coll).data.shape
    ok = template.n_vertices == 3100 and shape == (11, 13, 9300)
    verdict(4, ok, f"tensor {shape}")
    assert ok


# ------------------------------------------------------------------ 5-6: volume

def _exhaustive_otsu(hist):
    hist = [int(c) for c in hist]
    total, mass = sum(hist), sum(g * c for g, c in enumerate(hist))
    best, best_t, w0, m0 = Fraction(-1), None, 0, 0
    for t in range(256):
        w0 += hist[t]
        m0 += t * hist[t]
        w1 = total - w0
        score = Fraction(0) if w0 == 0 or w1 == 0 else Fraction((m0 * total - w0 * mass) ** 2, w0 * w1)
        if score > best:
            best, best_t = score, t
    return best_t


def test_c05_otsu_oracle(verdict):
    rng = np.random.default_rng(505)
    agree = 0
    for _ in range(100):
        shape = tuple(rng.integers(4, 16, 3))
        lo, hi = sorted(rng.uniform(0, 255, 2))
        frac = rng.uniform(0.1, 0.9)
        data = np.where(rng.random(shape) < frac, rng.normal(lo, rng.uniform(2, 40), shape),
                        rng.normal(hi, rng.uniform(2, 40), shape))
        v = GrayVolume(np.clip(data, 0, 255))
        t, _ = otsu_threshold(v)
        agree += t == _exhaustive_otsu(gray_histogram(v))
    ok = agree == 100
    verdict(5, ok, f"{agree}/100 volumes equal the exhaustive search")
    assert ok


def test_c06_diffusion(verdict):
    rng = np.random.default_rng(606)
    worst_mean, range_ok = 0.0, True
    for k in range(20):
        spacing = [(1.0, 1.0, 1.0), (1.1875, 1.1875, 1.2), (0.5, 1.0, 2.0)][k % 3]
        v = GrayVolume(rng.uniform(0, 255, tuple(rng.integers(5, 14, 3))), spacing)
        out = denoise_eed(v, tau=min(0.1, eed_stability_bound(spacing)), steps=20)
        m0 = v.data.mean()
        worst_mean = max(worst_mean, abs(out.data.mean() - m0) / m0)
        range_ok &= bool(out.data.min() >= v.data.min() and out.data.max() <= v.data.max())

    n = 64
    clean = np.where(np.arange(n)[:, None, None] < n // 2, 60.0, 200.0) * np.ones((n, n, n))
    noisy = GrayVolume(np.clip(clean + rng.normal(0, 15, clean.shape), 0, 255))
    t0 = time.perf_counter()
    out = denoise_eed(noisy, steps=20).data
    elapsed = time.perf_counter() - t0
    ratios = [out[sl].var() / noisy.data[sl].var() for sl in (slice(2, n // 2 - 4), slice(n // 2 + 4, n - 2))]

    def edge(d):
        prof = d.mean(axis=(1, 2))
        i = int(np.flatnonzero(prof >= 130.0)[0])
        return i - 1 + (130.0 - prof[i - 1]) / (prof[i] - prof[i - 1])

    shift = abs(edge(out) - edge(clean))
    ok = worst_mean < 1e-6 and range_ok and max(ratios) <= 0.5 and shift <= 1.0 and elapsed < 30
    verdict(6, ok, f"mean drift {worst_mean:.1e}, range kept {range_ok}, plateau variance ratio "
                   f"{max(ratios):.3f}, edge shift {shift:.2f} vox, 64^3 in {elapsed:.1f} s")
    assert ok


# ------------------------------------------------------------------ 7-8: registration and palate

def test_c07_registration(verdict):
    template = templates.tongue()
    idx = list(template.landmarks.values())
    names = list(template.landmarks)

    hist_self = []
    t0 = time.perf_counter()
    out, _ = match_template(template, vertex_cloud(template), LandmarkSet(names, template.vertices[idx]),
                            history=hist_self)
    t_self = time.perf_counter() - t0
    disp = np.linalg.norm(out.vertices - template.vertices, axis=1).mean()

    rng = np.random.default_rng(707)
    # the largest admissible displacement: 10 deg about the centroid, then 5 mm
    c = template.vertices.mean(0)
    axis, shift = rng.standard_normal(3), rng.standard_normal(3)
    rot = rotation_matrix(np.radians(10.0) * axis / np.linalg.norm(axis))
    truth = RigidTransform(rot, c - rot @ c + 5.0 * shift / np.linalg.norm(shift))
    target = template.with_vertices(truth.apply(template.vertices))
    cloud = vertex_cloud(target).concat(synth_cloud(target, density=2.0, seed=7))
    hist_rigid = []
    t0 = time.perf_counter()
    moved, _ = match_template(template, cloud, LandmarkSet(names, target.vertices[idx]), history=hist_rigid)
    t_rigid = time.perf_counter() - t0
    dist = surface_distance(moved.vertices, target).mean()

    monotone = all(np.all(np.diff(h["energies"]) <= 1e-9 * max(1.0, abs(h["energies"][0])))
                   for h in hist_self + hist_rigid)
    ok = disp < 0.1 and dist < 0.5 and monotone and max(t_self, t_rigid) < 60
    verdict(7, ok, f"self displacement {disp:.4f} mm, rigid ({truth.angle_deg():.1f} deg, "
                   f"{np.linalg.norm(truth.apply(c) - c):.1f} mm) "
                   f"distance {dist:.3f} mm, inner energies nonincreasing {monotone}, "
                   f"{t_self:.0f} s / {t_rigid:.0f} s")
    assert ok


def test_c08_palate_alignment(verdict):
    palate = templates.palate()
    vol = synth_palate_volume(palate, seed=0)
    c = palate.vertices.mean(0)
    rng = np.random.default_rng(808)
    voxel = min(vol.spacing)
    hits, worst_mm, worst_deg = 0, 0.0, 0.0
    for k in range(10):
        truth = random_rigid(rng, 10.0, 5.0, c)
        moved = resample_rigid(vol, truth, brightness=30.0 if k % 2 else 0.0)
        est, _ = align_palate(palate, vol, moved, seed=k)
        err_mm = np.linalg.norm(est.apply(c) - truth.apply(c))
        err_deg = est.compose(truth.inverse()).angle_deg()
        worst_mm, worst_deg = max(worst_mm, err_mm), max(worst_deg, err_deg)
        hits += err_mm <= 0.5 * voxel and err_deg <= 1.0
    ok = hits == 10
    verdict(8, ok, f"{hits}/10 recovered (5 with +30 bias), worst {worst_mm:.3f} mm / {worst_deg:.3f} deg")
    assert ok


# ------------------------------------------------------------------ 9: fitting

def _in_box(x, stats, h):
    lo, hi = box(stats, h)
    return bool(np.all(x >= lo) and np.all(x <= hi))


def test_c09_fit_recovery(verdict, synth):
    exact = truncate(synth[0], 3, 2)
    rng = np.random.default_rng(909)
    cfg = FitConfig(h=10.0)
    hits, boxed, worst = 0, True, 0.0
    for _ in range(50):
        s0 = sample_coordinates(rng, *exact.speaker_stats(), trunc=2.0)
        p0 = sample_coordinates(rng, *exact.pose_stats(), trunc=2.0)
        target = generate(exact, s0, p0).vertices
        fit = fit_model(exact, targets=target, cfg=cfg)
        err = max(np.linalg.norm(fit.s - s0) / np.linalg.norm(s0), np.linalg.norm(fit.p - p0) / np.linalg.norm(p0))
        worst = max(worst, err)
        hits += err <= 1e-3
        # the default box binds for most of these targets
        tight = fit_model(exact, targets=target, cfg=FitConfig())
        for f, h in ((fit, cfg.h), (tight, FitConfig().h)):
            boxed &= _in_box(f.s, exact.speaker_stats(), h) and _in_box(f.p, exact.pose_stats(), h)
    ok = hits == 50 and boxed
    verdict(9, ok, f"{hits}/50 within 1e-3 (worst {worst:.1e}), boxes respected {boxed}")
    assert ok


def test_c09_gauge_free_product(small_mesh):
    # no pinned coordinate: (s, p) is identifiable only up to (c s, p / c), so compare s (x) p
    mdl = truncate(build_model(_noisy_collection(small_mesh, 6, 5, np.random.default_rng(9), 0.5)), 3, 2)
    assert np.all(mdl.speaker_std > 0) and np.all(mdl.pose_std > 0)
    rng = np.random.default_rng(10)
    for _ in range(20):
        s0 = sample_coordinates(rng, *mdl.speaker_stats(), trunc=1.5)
        p0 = sample_coordinates(rng, *mdl.pose_stats(), trunc=1.5)
        fit = fit_model(mdl, targets=generate(mdl, s0, p0).vertices, cfg=FitConfig(h=10.0))
        want = np.outer(s0, p0)
        assert np.linalg.norm(np.outer(fit.s, fit.p) - want) <= 1e-3 * np.linalg.norm(want)


# ------------------------------------------------------------------ 10-11: evaluation

@pytest.fixture(scope="module")
def rank32(small_mesh):
    return synth_model(SynthSpec(seed=2, template=small_mesh))


def _generalization_ok(coll, h):
    sp = generalization(coll, SPEAKER, h=h)
    po = generalization(coll, POSE, h=h)
    ok = all(np.all(c.mean[c.x >= d] < 1e-3) and np.all(np.diff(c.mean) <= 1e-12)
             for c, d in ((sp, 3), (po, 2)))
    return ok, sp, po


@pytest.mark.xfail(strict=True, reason="held-out speaker/pose coordinates lie outside the training boxes at h=2")
def test_c10_generalization(verdict, rank32):
    ok, sp, po = _generalization_ok(rank32[1], h=2.0)
    verdict(10, ok, f"h=2: speaker {np.round(sp.mean, 3).tolist()}, pose {np.round(po.mean, 3).tolist()}"
                    + ("" if ok else " (expected failure, see ledger)"))
    assert ok


def test_c10_generalization_without_box(rank32):
    ok, sp, po = _generalization_ok(rank32[1], h=1e6)
    assert ok, (sp.mean, po.mean)


def test_c11_specificity(verdict, rank32):
    model, coll, _ = rank32
    region = RegionMask("all", np.arange(model.n_vertices))
    kw = dict(samples=300, seed=11, chunk=64)
    runs = [specificity(model, coll, region, SPEAKER, jobs=j, return_distances=True, **kw) for j in (1, 2, 5)]
    identical = all(np.array_equal(runs[0][0].mean, r[0].mean) and np.array_equal(runs[0][0].std, r[0].std)
                    and all(np.array_equal(runs[0][1][d], r[1][d]) for d in runs[0][1]) for r in runs[1:])

    samples = specificity_samples(model, 3, 300, seed=11, chunk=64)[:100]
    training = [m.vertices for m in coll.present()]
    brute = np.array([min(np.mean([np.sqrt(sum((s[v][c] - t[v][c]) ** 2 for c in range(3)))
                                   for v in range(len(s))]) for t in training) for s in samples])
    fast = closest_distances(samples, np.array(training), region)
    oracle_err = np.abs(fast - brute).max()
    ok = identical and oracle_err < 1e-12 and np.array_equal(fast, runs[0][1][3][:100])
    verdict(11, ok, f"jobs 1/2/5 bit-identical {identical}, oracle deviation {oracle_err:.1e} on 100 samples")
    assert ok


# ------------------------------------------------------------------ 12: tracking

def test_c12_tracking(verdict):
    art = truncate(synth_model(SynthSpec(seed=1, amplitude=60.0, basis="articulatory"))[0], 3, 2)
    rng = np.random.default_rng(1212)
    s0 = art.u1[1]
    path = smooth_path(rng, 200, *art.pose_stats())
    lm = templates.tongue().landmarks
    idx = np.array([lm[k] for k in ("tip", "blade", "dorsum")])
    frames = synth_marker_sequence(art, s0, path, idx)
    corr = Correspondences({n: int(i) for n, i in zip(frames[0].names, idx)})
    cfg = TrackConfig(anatomy=FIXED, s=tuple(s0))
    t0 = time.perf_counter()
    traj = track(art, frames, corr, cfg)
    elapsed = time.perf_counter() - t0
    live = np.flatnonzero(art.pose_std > 0)
    corr_min = min(np.corrcoef(traj.p[:, k], path[:, k])[0, 1] for k in live)
    resid = traj.residuals.mean()
    free = free_energy_at(art, frames, corr, cfg, traj)
    dominated = bool(np.all(traj.energies >= free - 1e-9))
    ok = corr_min >= 0.95 and resid < 0.5 and dominated and elapsed < 30
    verdict(12, ok, f"min correlation {corr_min:.4f}, mean residual {resid:.3f} mm, "
                    f"FIXED >= FREE {dominated}, {elapsed:.1f} s")
    assert ok


# ------------------------------------------------------------------ 13: palatal contact

def test_c13_contact_hole(verdict):
    ph = synth_contact_phantom()
    template = tongue_template()
    aug = augment_cloud(ph["cloud"], ph["palate"])
    out, _ = match_template(template, aug, ph["landmarks"], MatchWeights())
    hole = ph["contact"]
    dist = surface_distance(out.vertices[hole], ph["true_tongue"]).mean()
    ok = dist < 1.0
    verdict(13, ok, f"mean distance over {len(hole)} contact vertices {dist:.3f} mm")
    assert ok


# ------------------------------------------------------------------ 14: determinism

def _tree(root):
    return {str(p.relative_to(root)): p.read_bytes() for p in sorted(root.rglob("*"))
            if p.is_file() and not p.name.endswith(".runlog.json")}


def test_c14_end_to_end_determinism(verdict, tmp_path):
    def run(*args):
        return main([str(a) for a in args])

    for k, jobs in ((1, 1), (2, 3)):
        d = tmp_path / f"run{k}"
        codes = [run("--seed", 7, "synth", d / "synth", "--amplitude", 60, "--basis", "articulatory",
                     "--frames", 30),
                 run("build-model", d / "synth" / "manifest.json", d / "model.bin", "--truncate", 3, 2),
                 run("--seed", 7, "--jobs", jobs, "evaluate", d / "model.bin", d / "synth" / "manifest.json",
                     d / "eval", "--samples", 50, "--metrics", "compactness,specificity,fixed-phone"),
                 run("track", d / "model.bin", d / "synth" / "markers.json", d / "track" / "traj.json",
                     "--correspondences", d / "synth" / "correspondences.json", "--anatomy", "fixed")]
        assert codes == [0, 0, 0, 0]
    a, b = _tree(tmp_path / "run1"), _tree(tmp_path / "run2")
    differ = sorted(k for k in set(a) | set(b) if a.get(k) != b.get(k))
    ok = not differ and len(a) > 0
    verdict(14, ok, f"{len(a)} output files byte-identical" if ok else f"differing: {differ[:5]}")
    assert ok
