import numpy as np
import pytest

from tonguekit.geometry import surface_distance
from tonguekit.model import build_model, generate_vector, reconstruct, truncate
from tonguekit.synthdata import (SynthError, SynthSpec, closed_tongue, edge_count, is_watertight,
                                 sample_coordinates, synth_cloud, synth_contact_phantom, synth_model,
                                 synth_volume, tongue_template)


def test_template_counts():
    t = tongue_template()
    assert (t.n_vertices, len(t.faces)) == (3100, 6102)
    assert edge_count(t) == t.n_vertices + len(t.faces) - 1
    assert is_watertight(closed_tongue(n_boundary=24, n_interior=60))
    assert not is_watertight(t)


def test_exact_rank(small_mesh):
    model, coll, truth = synth_model(SynthSpec(seed=1, template=small_mesh))
    sv1, sv2 = model.sv1 / model.sv1[0], model.sv2 / model.sv2[0]
    assert np.all(sv1[3:] < 1e-6) and np.all(sv1[:3] > 1e-3)
    assert np.all(sv2[2:] < 1e-6) and np.all(sv2[:2] > 1e-3)
    # grand mean of the collection is the template
    assert np.allclose(model.mean.reshape(-1, 3), small_mesh.vertices, atol=1e-12)
    t = truncate(model, 3, 2)
    assert np.allclose(reconstruct(t), reconstruct(model), atol=1e-9)


def test_amplitude(small_mesh):
    _, coll, _ = synth_model(SynthSpec(seed=0, amplitude=5.0, template=small_mesh))
    d = max(np.max(np.linalg.norm(m.vertices - small_mesh.vertices, axis=1)) for m in coll.present())
    assert d == pytest.approx(5.0)


def test_spec_validation():
    with pytest.raises(SynthError):
        SynthSpec(speakers=3, rank_speaker=3)
    with pytest.raises(SynthError):
        SynthSpec(basis="wavy")


def test_sample_coordinates_truncated(rng):
    x = sample_coordinates(rng, np.zeros(3), np.ones(3), size=5000, trunc=2.0)
    assert np.abs(x).max() <= 2.0 and abs(x.mean()) < 0.1


def test_cloud_on_surface(small_mesh):
    c = synth_cloud(small_mesh, density=2.0, seed=0)
    assert np.max(surface_distance(c.points, small_mesh)) < 1e-9
    assert np.allclose(np.linalg.norm(c.normals, axis=1), 1)


def test_volume_plateaus():
    vol, inside = synth_volume(closed_tongue(n_boundary=24, n_interior=60), spacing=(2.0, 2.0, 2.0), noise=0)
    assert inside.any() and (~inside).any()
    assert set(np.unique(vol.data)) == {50.0, 200.0}


def test_contact_phantom():
    ph = synth_contact_phantom()
    assert len(ph["contact"]) > 0
    cz = ph["true_tongue"].vertices[ph["contact"]]
    assert np.all(np.isfinite(cz))
    # the hole: no cloud points close to the contact patch
    from scipy.spatial import cKDTree
    d, _ = cKDTree(ph["cloud"].points).query(cz)
    assert np.median(d) > 0.5


def test_generate_matches_collection(small_mesh):
    model, coll, _ = synth_model(SynthSpec(seed=4, template=small_mesh))
    v = generate_vector(model, model.u1[2], model.u2[1]).reshape(-1, 3)
    assert np.max(np.abs(v - coll.meshes[2][1].vertices)) < 1e-9
    assert build_model(coll).dims == model.dims
