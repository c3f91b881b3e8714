import numpy as np
import pytest

from lifisim import photometry as ph
from lifisim import scene as sc

# collected acceptance outcomes, printed in the terminal summary
ACCEPTANCE_RESULTS: list[tuple[str, bool, str]] = []


def record_criterion(name: str, passed: bool, detail: str = ""):
    ACCEPTANCE_RESULTS.append((name, passed, detail))
    assert passed, f"{name}: {detail}"


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    if not ACCEPTANCE_RESULTS:
        return
    terminalreporter.section("acceptance criteria")
    for name, passed, detail in ACCEPTANCE_RESULTS:
        status = "PASS" if passed else "FAIL"
        line = f"[{status}] {name}"
        if detail:
            line += f" -- {detail}"
        terminalreporter.write_line(line)


@pytest.fixture(scope="session")
def flat_source_model():
    return ph.SourceModel(
        spectrum=ph.SpectralCurve.from_samples([(0.35, 1.0), (1.1, 1.0)]),
        directivity=ph.AngularProfile(fallback_order=1.0),
    )


def make_box_scene(size=(100.0, 80.0, 120.0), detector=None, sources=(),
                   wall_material="white_plastic", floor_material="carpet",
                   extra_surfaces=(), materials=None):
    """Closed box room with inward normals, optional contents."""
    surfaces = []
    hull = []
    for s in sc._box_quads("cabin", (0.0, 0.0, 0.0), size, wall_material):
        mat = floor_material if s.id == "cabin_y-" else wall_material
        flipped = sc.Surface(s.id, s.vertices[::-1], -s.normal, mat)
        surfaces.append(flipped)
        hull.append((flipped.normal.copy(), flipped.plane_offset))
    surfaces.extend(extra_surfaces)
    dets = (detector,) if detector is not None else ()
    return sc.CabinScene(
        surfaces=tuple(surfaces),
        sources=tuple(sources),
        detectors=dets,
        materials=materials or ph.default_materials(),
        hull_planes=tuple(hull),
        box_bounds=((0.0, 0.0, 0.0), tuple(size)),
        box_face_materials=(wall_material, wall_material, floor_material,
                            wall_material, wall_material, wall_material),
    )
