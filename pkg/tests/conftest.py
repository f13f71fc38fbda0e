import numpy as np
import pytest
from scipy.spatial.transform import Rotation

from tonguekit.geometry import SurfaceMesh
from tonguekit.synthdata import SynthSpec, dome_mesh, synth_model


def random_rotation(rng, max_deg=180.0):
    axis = rng.standard_normal(3)
    axis /= np.linalg.norm(axis)
    return Rotation.from_rotvec(axis * np.radians(rng.uniform(-max_deg, max_deg))).as_matrix()


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


@pytest.fixture(scope="session")
def small_mesh():
    mesh, _ = dome_mesh(24, 60, (10.0, 8.0), 4.0)
    return SurfaceMesh(mesh.vertices, mesh.faces, {"a": 0, "b": 12, "c": 40})


@pytest.fixture(scope="session")
def synth():
    """Exact rank-(3, 2) corpus: (model, collection, truth)."""
    return synth_model(SynthSpec(seed=0))


_VERDICTS = []


@pytest.fixture
def verdict(capsys):
    """Record one acceptance line: verdict(n, ok, detail)."""
    def report(n, ok, detail=""):
        line = f"CRITERION {n}: {'PASS' if ok else 'FAIL'}  {detail}".rstrip()
        _VERDICTS.append(line)
        with capsys.disabled():
            print("\n" + line)
        return ok
    return report


def pytest_terminal_summary(terminalreporter):
    if _VERDICTS:
        terminalreporter.section("acceptance criteria")
        for line in _VERDICTS:
            terminalreporter.write_line(line)
