"""Command line entry point: one subcommand per pipeline stage."""

from __future__ import annotations

import argparse
import dataclasses
import hashlib
import json
import logging
import sys
import time
from pathlib import Path

import numpy as np

from . import evaluation as ev
from .config import ConfigError, load_config
from .geometry import (LandmarkSet, load_cloud, load_obj, load_regions, save_cloud, save_obj,
                       save_template_landmarks)
from .model import MeshCollection, build_model, complete_missing, load_model, save_model, truncate

log = logging.getLogger("tonguekit")

COMMANDS = ("denoise", "segment", "extract-cloud", "match-template", "align-palate", "augment-cloud",
            "build-model", "fit-model", "bootstrap", "evaluate", "track", "synth")


class UsageError(ValueError):
    pass


def _sha256(path):
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for block in iter(lambda: fh.read(1 << 20), b""):
            h.update(block)
    return h.hexdigest()


def _require(path, what):
    p = Path(path)
    if not p.exists():
        raise ConfigError(f"{what} not found: {p}")
    return p


class Run:
    """Collects inputs, outputs and timings for the run log."""

    def __init__(self):
        self.inputs, self.outputs, self.timings = [], [], {}

    def input(self, path, what="input"):
        p = _require(path, what)
        self.inputs.append(p)
        return p

    def output(self, path):
        p = Path(path)
        p.parent.mkdir(parents=True, exist_ok=True)
        self.outputs.append(p)
        return p

    def timed(self, name, fn, *a, **kw):
        t0 = time.perf_counter()
        out = fn(*a, **kw)
        self.timings[name] = time.perf_counter() - t0
        return out


def _json_out(data, path):
    Path(path).write_text(json.dumps(data, indent=1, sort_keys=True) + "\n")


def _read_json(path):
    try:
        return json.loads(Path(path).read_text())
    except json.JSONDecodeError as e:
        raise ConfigError(f"{path}: invalid JSON ({e})") from None


# ------------------------------------------------------------------ volume

def cmd_denoise(a, cfg, run):
    from .volume import denoise_eed, load_volume, save_volume
    d = cfg.denoise
    vol = load_volume(run.input(a.input))
    out = run.timed("denoise", denoise_eed, vol, sigma=d.sigma if a.sigma is None else a.sigma,
                    lam=d.lam if a.lam is None else a.lam, tau=d.tau if a.tau is None else a.tau,
                    steps=d.steps if a.steps is None else a.steps)
    save_volume(out, run.output(a.output))


def cmd_segment(a, cfg, run):
    from .volume import load_volume, otsu_threshold, quantize, save_partition
    vol = load_volume(run.input(a.input))
    t, part = run.timed("otsu", otsu_threshold, quantize(vol))
    save_partition(part, run.output(a.output))
    print(f"threshold {t}")
    return {"threshold": int(t)}


def cmd_extract_cloud(a, cfg, run):
    from .volume import extract_surface, load_partition
    cloud = run.timed("extract", extract_surface, load_partition(run.input(a.input)))
    save_cloud(cloud, run.output(a.output))
    return {"points": len(cloud)}


# ------------------------------------------------------------ registration

def _template(cfg, organ, run, a):
    obj = a.template or cfg.path(f"{organ}_template")
    lms = a.template_landmarks or cfg.path(f"{organ}_landmarks")
    return load_obj(run.input(obj, f"{organ}_template"), run.input(lms, f"{organ}_landmarks"))


def cmd_match_template(a, cfg, run):
    from .registration import match_template, save_field
    template = _template(cfg, a.organ, run, a)
    cloud = load_cloud(run.input(a.cloud))
    lms = LandmarkSet.load(run.input(a.landmarks)) if a.landmarks else None
    w = cfg.match if a.organ == "tongue" else cfg.palate_match
    history = []
    mesh, field = run.timed("match", match_template, template, cloud, lms, w, history=history)
    save_obj(mesh, run.output(a.output))
    if a.field:
        save_field(field, run.output(a.field))
    return {"energies": len(history)}


def cmd_align_palate(a, cfg, run):
    from .palate import align_palate, save_transform
    from .volume import load_volume
    mesh = load_obj(run.input(a.mesh))
    src = load_volume(run.input(a.source))
    dst = load_volume(run.input(a.target))
    p = cfg.palate
    t, value = run.timed("align", align_palate, mesh, src, dst, length=p.length, d=p.d, seeds=p.seeds,
                         seed=cfg.seed)
    save_transform(t, run.output(a.output))
    return {"energy": value}


def cmd_augment_cloud(a, cfg, run):
    from .palate import augment_cloud
    cloud = load_cloud(run.input(a.cloud))
    palate = load_obj(run.input(a.palate))
    out = augment_cloud(cloud, palate)
    save_cloud(out, run.output(a.output))
    return {"points_in": len(cloud), "points_out": len(out)}


# ------------------------------------------------------------------- model

def read_manifest(path, key="mesh"):
    """Manifest: {"entries": [{"speaker", "pose", <key>: path, ...}], "missing": [...]}.

    Returns (speakers, poses, grid of entry dicts with resolved paths or None).
    """
    path = Path(path)
    d = _read_json(path)
    if not isinstance(d, dict) or "entries" not in d:
        raise ConfigError(f"{path}: manifest needs an 'entries' list")
    speakers, poses = list(d.get("speakers", [])), list(d.get("poses", []))
    for e in d["entries"]:
        for k in ("speaker", "pose", key):
            if k not in e:
                raise ConfigError(f"{path}: manifest entry lacks {k!r}")
        if e["speaker"] not in speakers:
            speakers.append(e["speaker"])
        if e["pose"] not in poses:
            poses.append(e["pose"])
    grid = [[None] * len(poses) for _ in speakers]
    for e in d["entries"]:
        i, j = speakers.index(e["speaker"]), poses.index(e["pose"])
        if grid[i][j] is not None:
            raise ConfigError(f"{path}: duplicate cell ({e['speaker']}, {e['pose']})")
        grid[i][j] = {k: (str(path.parent / v) if k in ("mesh", "cloud", "landmarks") else v)
                      for k, v in e.items()}
    for miss in d.get("missing", []):
        i, j = speakers.index(miss["speaker"]), poses.index(miss["pose"])
        if grid[i][j] is not None:
            raise ConfigError(f"{path}: cell ({miss['speaker']}, {miss['pose']}) both present and missing")
    return speakers, poses, grid


def load_collection(path, run, complete=True) -> MeshCollection:
    speakers, poses, grid = read_manifest(run.input(path, "manifest"))
    meshes = [[None if e is None else load_obj(run.input(e["mesh"])) for e in row] for row in grid]
    coll = MeshCollection(meshes, speakers, poses)
    if complete and not coll.is_complete():
        coll = complete_missing(coll)
    return coll


def cmd_build_model(a, cfg, run):
    coll = load_collection(a.manifest, run)
    model = run.timed("hosvd", build_model, coll)
    if a.truncate:
        model = truncate(model, *a.truncate)
    save_model(model, run.output(a.output))
    return {"dims": list(model.dims)}


def cmd_fit_model(a, cfg, run):
    from .fitting import FIXED, fit_model
    model = load_model(run.input(a.model))
    fc = cfg.fit
    over = {k: getattr(a, k) for k in ("alpha", "gamma", "h", "series") if getattr(a, k) is not None}
    fc = fc.replace(**over)
    lms, named = None, None
    if a.landmarks:
        from .geometry import load_template_landmarks
        lms = LandmarkSet.load(run.input(a.landmarks))
        named = load_template_landmarks(run.input(a.template_landmarks or cfg.path("tongue_landmarks"),
                                                  "tongue_landmarks"))
    if a.fixed_correspondences:
        target = load_obj(run.input(a.fixed_correspondences)).vertices
        res = run.timed("fit", fit_model, model, None, None, fc.replace(correspondence=FIXED), targets=target)
    else:
        if a.cloud is None:
            raise UsageError("fit-model needs a cloud or --fixed-correspondences")
        cloud = load_cloud(run.input(a.cloud))
        res = run.timed("fit", fit_model, model, cloud, lms, fc, template_landmarks=named)
    _json_out(res.to_json(), run.output(a.output))
    if a.mesh:
        save_obj(res.mesh, run.output(a.mesh))
    return {"energy": res.energy}


def cmd_bootstrap(a, cfg, run):
    from .fitting import BootstrapLog, bootstrap
    from .plotting import plot_residuals
    speakers, poses, grid = read_manifest(run.input(a.manifest, "manifest"), key="cloud")
    template = _template(cfg, a.organ, run, a)
    clouds = [[None if e is None else load_cloud(run.input(e["cloud"])) for e in row] for row in grid]
    lms = [[None if e is None or "landmarks" not in e else LandmarkSet.load(run.input(e["landmarks"]))
            for e in row] for row in grid]
    its = a.iterations
    if its is None:
        its = cfg.bootstrap.tongue_iterations if a.organ == "tongue" else cfg.bootstrap.palate_iterations
    w = cfg.match if a.organ == "tongue" else cfg.palate_match
    fc = cfg.fit if a.organ == "tongue" else cfg.palate_fit
    blog = BootstrapLog()
    kind = "pca" if a.organ == "palate" else "multilinear"
    if kind == "pca":
        cells = [(i, j) for i, row in enumerate(grid) for j, e in enumerate(row) if e is not None]
        flat_c = [clouds[i][j] for i, j in cells]
        flat_l = [lms[i][j] for i, j in cells]
        coll = run.timed("bootstrap", bootstrap, flat_c, template, flat_l, its, w, fc, kind="pca", log_out=blog)
        names = [f"{speakers[i]}_{poses[j]}" for i, j in cells]
        meshes = [row[0] for row in coll.meshes]
    else:
        coll = run.timed("bootstrap", bootstrap, clouds, template, lms, its, w, fc, log_out=blog,
                         speakers=speakers, poses=poses)
        names, meshes = [], []
        for i, row in enumerate(coll.meshes):
            for j, mesh in enumerate(row):
                if grid[i][j] is not None:
                    names.append(f"{speakers[i]}_{poses[j]}")
                    meshes.append(mesh)
    out = Path(a.output)
    entries = []
    for name, mesh in zip(names, meshes):
        save_obj(mesh, run.output(out / "meshes" / f"{name}.obj"))
        spk, pose = name.split("_", 1)
        entries.append({"speaker": spk, "pose": pose, "mesh": f"meshes/{name}.obj"})
    _json_out({"speakers": speakers, "poses": poses, "entries": entries}, run.output(out / "manifest.json"))
    _json_out({"residuals": blog.residuals}, run.output(out / "bootstrap_log.json"))
    plot_residuals(blog.residuals, run.output(out / "bootstrap_residuals.png"))
    return {"residuals": blog.residuals}


# -------------------------------------------------------------- evaluation

METRICS = ("compactness", "generalization", "specificity", "fixed-phone")


def cmd_evaluate(a, cfg, run):
    from .plotting import plot_curve
    model = load_model(run.input(a.model))
    coll = load_collection(a.manifest, run)
    regions = ev.region_masks(load_regions(run.input(a.regions or cfg.path("regions"), "regions")),
                              model.n_vertices)
    metrics = a.metrics.split(",") if a.metrics else list(METRICS)
    bad = [m for m in metrics if m not in METRICS]
    if bad:
        raise UsageError(f"unknown metric(s): {', '.join(bad)}")
    e = cfg.evaluation
    samples = e.samples if a.samples is None else a.samples
    other = {ev.SPEAKER: e.pose_dim, ev.POSE: e.speaker_dim}
    whole = ev.RegionMask.union(regions.values(), name="all")
    curves = []
    for mode in (ev.SPEAKER, ev.POSE):
        if "compactness" in metrics:
            curves.append(ev.compactness(model, mode))
        if "generalization" in metrics:
            curves.append(run.timed(f"generalization_{mode}", ev.generalization, coll, mode, other[mode],
                                    h=e.generalization_h, jobs=a.jobs))
        if "specificity" in metrics:
            curves.append(run.timed(f"specificity_{mode}", ev.specificity, model, coll, whole, mode,
                                    samples=samples, seed=cfg.seed, other_dim=other[mode], jobs=a.jobs,
                                    chunk=e.chunk))
    if "fixed-phone" in metrics:
        for phone in coll.poses:
            if phone not in ev.VOWELS + ev.SIBILANTS:
                log.info("no region rule for pose %r, skipped", phone)
                continue
            curves.append(run.timed(f"fixed_phone_{phone}", ev.fixed_phone_specificity, model, coll, phone,
                                    regions=regions, samples=samples, seed=cfg.seed, jobs=a.jobs,
                                    chunk=e.chunk))
    out = Path(a.output)
    for c in curves:
        ev.save_curve_csv(c, run.output(out / f"{c.name}.csv"))
        ylabel = "variance (%)" if c.name.startswith("compactness") else "distance (mm)"
        ref = ev.MEASUREMENT_PRECISION_MM if c.name.startswith("generalization") else None
        plot_curve(c, run.output(out / "figures" / f"{c.name}.png"), ylabel, ref)
    ev.save_gnuplot(curves, run.output(out / "curves.dat"))
    return {"curves": [c.name for c in curves]}


# ---------------------------------------------------------------- tracking

def cmd_track(a, cfg, run):
    from .plotting import plot_cumulative, plot_trajectory
    from .tracking import (FIXED, FREE, Correspondences, cumulative_error, estimate_anatomy,
                           estimate_correspondences, load_markers, save_trajectory, track)
    model = load_model(run.input(a.model))
    frames = load_markers(run.input(a.markers))
    if not frames:
        raise UsageError("marker file holds no frames")
    if a.correspondences:
        corr = Correspondences({k: int(v) for k, v in _read_json(run.input(a.correspondences)).items()})
    else:
        mask = np.array(_read_json(run.input(a.midsagittal or cfg.path("midsagittal"), "midsagittal")))
        cc = cfg.correspondence
        corr = run.timed("correspondences", estimate_correspondences, model, frames[0], mask,
                         restarts=cc.restarts, seed=cfg.seed, h=cc.h, rounds=cc.rounds, jobs=a.jobs)
    tc = cfg.track
    anatomy = a.anatomy or tc.anatomy
    if anatomy == FIXED:
        if a.speaker:
            s = np.asarray(_read_json(run.input(a.speaker)), dtype=np.float64)
        elif tc.s is not None:
            s = np.asarray(tc.s, dtype=np.float64)
        else:
            # unknown anatomy: average the speaker weights of a FREE pass
            s = estimate_anatomy(run.timed("free_pass", track, model, frames, corr, tc.replace(anatomy=FREE)))
        tc = tc.replace(anatomy=FIXED, s=tuple(float(x) for x in s))
    else:
        tc = tc.replace(anatomy=FREE)
    traj = run.timed("track", track, model, frames, corr, tc, keep_meshes=bool(a.dump_obj))
    out = Path(a.output)
    save_trajectory(traj, model, run.output(out))
    _json_out(corr.to_json(), run.output(out.with_name(out.stem + "_correspondences.json")))
    if a.dump_obj:
        for k, mesh in enumerate(traj.meshes):
            save_obj(mesh, run.output(Path(a.dump_obj) / f"frame_{k:05d}.obj"))
    fig_dir = out.parent / "figures"
    plot_trajectory(traj, model, run.output(fig_dir / f"{out.stem}_weights.png"))
    thr = np.linspace(0.0, 5.0, 101)
    plot_cumulative(thr, cumulative_error(traj.residuals, thr), run.output(fig_dir / f"{out.stem}_cumulative.png"))
    return {"frames": len(frames), "mean_residual": float(np.mean(traj.residuals))}


# ------------------------------------------------------------------- synth

def cmd_synth(a, cfg, run):
    from . import synthdata as sd
    from .tracking import Correspondences, save_markers
    seed = cfg.seed
    spec = sd.SynthSpec(speakers=a.speakers, poses=a.poses, rank_speaker=a.rank_speaker,
                        rank_pose=a.rank_pose, amplitude=a.amplitude, seed=seed, basis=a.basis)
    model, coll, truth = run.timed("model", sd.synth_model, spec)
    out = Path(a.output)
    template = truth["template"]
    entries = []
    for i, spk in enumerate(coll.speakers):
        for j, pose in enumerate(coll.poses):
            mesh = coll.meshes[i][j]
            name = f"{spk}_{pose}"
            save_obj(mesh, run.output(out / "meshes" / f"{name}.obj"))
            entry = {"speaker": spk, "pose": pose, "mesh": f"meshes/{name}.obj"}
            if a.clouds:
                cloud = sd.synth_cloud(mesh, density=a.density, noise=a.noise, seed=seed * 1000 + i * 100 + j)
                save_cloud(cloud, run.output(out / "clouds" / f"{name}.txt"))
                LandmarkSet.from_mesh(template.with_vertices(mesh.vertices)).save(
                    run.output(out / "landmarks" / f"{name}.json"))
                entry.update(cloud=f"clouds/{name}.txt", landmarks=f"landmarks/{name}.json")
            entries.append(entry)
    _json_out({"speakers": coll.speakers, "poses": coll.poses, "entries": entries},
              run.output(out / "manifest.json"))
    save_obj(template, run.output(out / "template.obj"))
    save_template_landmarks(template.landmarks, run.output(out / "template_landmarks.json"))
    if a.frames > 0:
        sub = truncate(model, spec.rank_speaker, spec.rank_pose)
        rng = np.random.default_rng(seed)
        path = sd.smooth_path(rng, a.frames, *sub.pose_stats())
        s0 = sub.u1[min(1, len(sub.u1) - 1)]
        verts = [template.landmarks[k] for k in ("tip", "blade", "dorsum")]
        frames = sd.synth_marker_sequence(sub, s0, path, verts, seed=seed)
        save_markers(frames, run.output(out / "markers.json"))
        names = frames[0].names
        _json_out(Correspondences(dict(zip(names, verts))).to_json(), run.output(out / "correspondences.json"))
        pose_mesh = [np.asarray(x).tolist() for x in path]
        _json_out({"speaker": s0.tolist(), "poses": pose_mesh}, run.output(out / "markers_truth.json"))
    return {"cells": len(entries)}


# ------------------------------------------------------------------ parser

def build_parser():
    p = argparse.ArgumentParser(prog="tonguekit", description="Multilinear tongue model toolkit.")
    p.add_argument("--config", help="pipeline config JSON")
    p.add_argument("--seed", type=int, help="override the config seed")
    p.add_argument("--jobs", type=int, default=1, help="worker threads (results do not depend on it)")
    p.add_argument("--run-log", help="run log path (default: next to the outputs)")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", metavar="COMMAND")
    sub.required = True

    s = sub.add_parser("denoise", help="edge-enhancing diffusion")
    s.add_argument("input")
    s.add_argument("output")
    for k, t in (("sigma", float), ("lam", float), ("tau", float), ("steps", int)):
        s.add_argument(f"--{k}", type=t)

    s = sub.add_parser("segment", help="Otsu tissue/background partition")
    s.add_argument("input")
    s.add_argument("output")

    s = sub.add_parser("extract-cloud", help="oriented boundary points of a partition")
    s.add_argument("input")
    s.add_argument("output")

    def template_args(s):
        s.add_argument("--organ", choices=("tongue", "palate"), default="tongue")
        s.add_argument("--template")
        s.add_argument("--template-landmarks")

    s = sub.add_parser("match-template", help="deform the template to a point cloud")
    s.add_argument("cloud")
    s.add_argument("output")
    s.add_argument("--landmarks")
    s.add_argument("--field", help="write the deformation field")
    template_args(s)

    s = sub.add_parser("align-palate", help="rigid palate alignment between two scans")
    s.add_argument("mesh", help="palate mesh registered in the source scan")
    s.add_argument("source")
    s.add_argument("target")
    s.add_argument("output")

    s = sub.add_parser("augment-cloud", help="replace points above the palate by palate vertices")
    s.add_argument("cloud")
    s.add_argument("palate")
    s.add_argument("output")

    s = sub.add_parser("build-model", help="HOSVD model from a mesh manifest")
    s.add_argument("manifest")
    s.add_argument("output")
    s.add_argument("--truncate", type=int, nargs=2, metavar=("M", "N"),
                   help="keep M speaker and N pose dimensions")

    s = sub.add_parser("fit-model", help="fit model coordinates to a cloud")
    s.add_argument("model")
    s.add_argument("cloud", nargs="?")
    s.add_argument("output", help="FitResult JSON")
    s.add_argument("--mesh", help="write the fitted OBJ")
    s.add_argument("--landmarks")
    s.add_argument("--template-landmarks")
    s.add_argument("--alpha", type=float)
    s.add_argument("--gamma", type=float)
    s.add_argument("--h", type=float)
    s.add_argument("--series", type=int)
    s.add_argument("--fixed-correspondences", metavar="OBJ",
                   help="fit to this mesh's vertices one-to-one instead of a cloud")

    s = sub.add_parser("bootstrap", help="template matching with model-based restarts")
    s.add_argument("manifest", help="manifest whose entries name clouds (and landmarks)")
    s.add_argument("output", help="output directory")
    s.add_argument("--iterations", type=int)
    template_args(s)

    s = sub.add_parser("evaluate", help="compactness, generalization and specificity curves")
    s.add_argument("model")
    s.add_argument("manifest")
    s.add_argument("output", help="output directory")
    s.add_argument("--regions")
    s.add_argument("--samples", type=int)
    s.add_argument("--metrics", help=f"comma-separated subset of {','.join(METRICS)}")

    s = sub.add_parser("track", help="fit the model to a marker sequence")
    s.add_argument("model")
    s.add_argument("markers")
    s.add_argument("output", help="trajectory JSON")
    s.add_argument("--correspondences", help="JSON {marker: vertex}; estimated when omitted")
    s.add_argument("--midsagittal")
    s.add_argument("--anatomy", choices=("free", "fixed"))
    s.add_argument("--speaker", help="JSON list of fixed speaker coordinates")
    s.add_argument("--dump-obj", metavar="DIR")

    s = sub.add_parser("synth", help="write a synthetic corpus")
    s.add_argument("output")
    s.add_argument("--speakers", type=int, default=6)
    s.add_argument("--poses", type=int, default=5)
    s.add_argument("--rank-speaker", type=int, default=3)
    s.add_argument("--rank-pose", type=int, default=2)
    s.add_argument("--amplitude", type=float, default=3.0)
    s.add_argument("--basis", choices=("smooth", "articulatory"), default="smooth")
    s.add_argument("--frames", type=int, default=200)
    s.add_argument("--clouds", action="store_true", help="also write clouds and landmarks")
    s.add_argument("--density", type=float, default=1.0)
    s.add_argument("--noise", type=float, default=0.0)
    return p


HANDLERS = {name: globals()["cmd_" + name.replace("-", "_")] for name in COMMANDS}


def _write_run_log(a, cfg, run, result, status, error=None):
    path = a.run_log
    if path is None:
        if not run.outputs:
            return
        out = Path(getattr(a, "output"))
        base = out if out.is_dir() else out.parent
        path = base / f"{a.command}.runlog.json"
    data = {"command": a.command, "argv": sys.argv[1:], "status": status, "error": error,
            "seed": cfg.seed, "jobs": a.jobs, "config": cfg.to_dict(),
            "inputs": {str(p): _sha256(p) for p in dict.fromkeys(run.inputs) if p.is_file()},
            "outputs": [str(p) for p in dict.fromkeys(run.outputs)],
            "timings": run.timings, "result": result}
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    Path(path).write_text(json.dumps(data, indent=1, default=str) + "\n")


def main(argv=None) -> int:
    parser = build_parser()
    try:
        a = parser.parse_args(argv)
    except SystemExit as e:
        return int(e.code or 0)
    logging.basicConfig(level=logging.DEBUG if a.verbose else logging.INFO, format="%(levelname)s %(message)s")
    try:
        cfg = load_config(a.config)
        if a.seed is not None:
            cfg = dataclasses.replace(cfg, seed=a.seed)
        if a.jobs < 1:
            raise UsageError("--jobs must be >= 1")
    except (ConfigError, UsageError) as e:
        print(f"tonguekit: config error: {e}", file=sys.stderr)
        return 2
    run = Run()
    t0 = time.perf_counter()
    try:
        result = HANDLERS[a.command](a, cfg, run)
    except (ConfigError, UsageError) as e:
        print(f"tonguekit: config error: {e}", file=sys.stderr)
        return 2
    except (ValueError, OSError, KeyError) as e:
        print(f"tonguekit: {a.command} failed: {type(e).__name__}: {e}", file=sys.stderr)
        run.timings["total"] = time.perf_counter() - t0
        _write_run_log(a, cfg, run, None, "error", str(e))
        return 1
    run.timings["total"] = time.perf_counter() - t0
    _write_run_log(a, cfg, run, result, "ok")
    return 0


if __name__ == "__main__":
    sys.exit(main())
