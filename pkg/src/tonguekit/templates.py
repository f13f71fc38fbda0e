"""Shipped template meshes, landmarks and region masks."""

from __future__ import annotations

import json
from importlib import resources
from pathlib import Path

from .geometry import load_obj, load_regions, save_obj, save_regions, save_template_landmarks

FILES = {
    "tongue": "tongue.obj",
    "tongue_landmarks": "tongue_landmarks.json",
    "tongue_regions": "tongue_regions.json",
    "tongue_midsagittal": "tongue_midsagittal.json",
    "tongue_closed": "tongue_closed.obj",
    "palate": "palate.obj",
    "palate_landmarks": "palate_landmarks.json",
}


def data_path(key) -> Path:
    return Path(str(resources.files("tonguekit") / "data" / FILES[key]))


def tongue():
    return load_obj(data_path("tongue"), data_path("tongue_landmarks"))


def palate():
    return load_obj(data_path("palate"), data_path("palate_landmarks"))


def tongue_regions():
    return load_regions(data_path("tongue_regions"))


def tongue_midsagittal():
    return json.loads(data_path("tongue_midsagittal").read_text())


def write_templates(out):
    """Regenerate every shipped file from the synthetic generators."""
    from . import synthdata as sd
    out = Path(out)
    out.mkdir(parents=True, exist_ok=True)
    t = sd.tongue_template()
    p = sd.palate_template()
    save_obj(t, out / FILES["tongue"])
    save_template_landmarks(t.landmarks, out / FILES["tongue_landmarks"])
    save_regions(sd.tongue_regions(t), out / FILES["tongue_regions"])
    (out / FILES["tongue_midsagittal"]).write_text(json.dumps(sd.midsagittal_mask(t).tolist()) + "\n")
    save_obj(sd.closed_tongue(), out / FILES["tongue_closed"])
    save_obj(p, out / FILES["palate"])
    save_template_landmarks(p.landmarks, out / FILES["palate_landmarks"])
