"""Cabin scenario geometry: surfaces, reading lights, photodiode placements.

All coordinates are centimetres in a right-handed global frame: x across the
cabin, y up from the floor, z along the aisle.  Scenes are immutable after
construction and safe to share across concurrent ray workers; intersection
queries are read-only.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .photometry import DetectorModel, MaterialSpectrum, SourceModel

SPEED_OF_LIGHT_CM_PER_NS = 29.9792458

# Default narrow-body cabin section (planar model): the curved shell is
# replaced by a box; one 3-seat side of a 3-3 layout is populated.
CABIN_WIDTH = 390.0
CABIN_HEIGHT = 215.0
CABIN_LENGTH = 760.0

SEAT_POSITIONS = {
    "31C": (215.199, 42.643, 270.0),
    "31B": (268.199, 42.643, 270.0),
    "31A": (321.199, 42.643, 270.0),
    "30C": (215.199, 42.643, 351.0),
    "30B": (268.199, 42.643, 351.0),
    "30A": (321.199, 42.643, 351.0),
    "29C": (215.199, 42.643, 432.0),
    "29B": (268.199, 42.643, 432.0),
    "29A": (321.199, 42.643, 432.0),
}

READING_LIGHT_POSITIONS = {
    "r1": (289.199, 167.643, 408.0),
    "r2": (292.199, 167.643, 408.0),
    "r3": (295.199, 167.643, 408.0),
}
READING_LIGHT_AIM_DEG = {"r1": -33.0, "r2": 0.0, "r3": 33.0}

PD_POSITIONS = {
    "C1": (221.699, 100.443, 408.0),
    "C2": (239.199, 100.443, 408.0),
    "C3": (256.699, 100.443, 408.0),
    "B1": (274.699, 100.443, 408.0),
    "B2": (292.199, 100.443, 408.0),
    "B3": (309.699, 100.443, 408.0),
    "A1": (327.699, 100.443, 408.0),
    "A2": (345.199, 100.443, 408.0),
    "A3": (362.699, 100.443, 408.0),
}

# Seat box stand-in: cushion slab plus backrest slab.  The backrest centre
# sits 84 cm below the reading-light plane, which fixes the aim geometry.
SEAT_WIDTH = 48.0
SEAT_DEPTH = 48.0
SEAT_CUSHION_THICKNESS = 10.0
SEAT_BACK_HEIGHT = 82.0
SEAT_BACK_THICKNESS = 12.0

INTERSECT_EPS = 1e-6  # cm, self-intersection guard
_EDGE_TOL = 1e-7


class SceneError(ValueError):
    """Raised for invalid scene configurations."""


def vec3(x, y, z) -> np.ndarray:
    v = np.array([x, y, z], dtype=float)
    if not np.all(np.isfinite(v)):
        raise SceneError("vector components must be finite")
    return v


def unit(v) -> np.ndarray:
    v = np.asarray(v, dtype=float)
    n = np.linalg.norm(v)
    if n == 0:
        raise SceneError("zero-length direction")
    return v / n


@dataclass(frozen=True)
class Surface:
    """Planar convex polygon with a unit normal and a material reference."""

    id: str
    vertices: np.ndarray  # (n, 3), ordered
    normal: np.ndarray
    material_id: str

    def __post_init__(self):
        v = np.asarray(self.vertices, dtype=float)
        if v.ndim != 2 or v.shape[0] < 3 or v.shape[1] != 3:
            raise SceneError(f"surface {self.id}: need >= 3 vertices")
        n = np.asarray(self.normal, dtype=float)
        if abs(np.linalg.norm(n) - 1.0) > 1e-9:
            raise SceneError(f"surface {self.id}: normal must be unit length")
        d = n @ v[0]
        if np.max(np.abs(v @ n - d)) > 1e-6:
            raise SceneError(f"surface {self.id}: vertices not coplanar")
        object.__setattr__(self, "vertices", v)
        object.__setattr__(self, "normal", n)

    @property
    def plane_offset(self) -> float:
        return float(self.normal @ self.vertices[0])


def make_surface(sid: str, vertices, material_id: str) -> Surface:
    """Build a surface, deriving the unit normal from the vertex winding."""
    v = np.asarray(vertices, dtype=float)
    n = unit(np.cross(v[1] - v[0], v[2] - v[0]))
    return Surface(sid, v, n, material_id)


@dataclass(frozen=True)
class PlacedSource:
    """A reading light: a grid of point emitters sharing one emitter model."""

    id: str
    position: np.ndarray
    aim_deg: float  # rotation about the z axis; 0 aims straight down
    chip_rows: int = 4
    chip_cols: int = 4
    chip_pitch_cm: float = 0.4
    power_total_w: float = 16.0
    emitter: SourceModel | None = None

    def __post_init__(self):
        if self.power_total_w <= 0:
            raise SceneError(f"source {self.id}: total power must be positive")
        if self.chip_pitch_cm <= 0:
            raise SceneError(f"source {self.id}: chip pitch must be positive")
        if self.chip_rows < 1 or self.chip_cols < 1:
            raise SceneError(f"source {self.id}: chip grid must be at least 1x1")
        object.__setattr__(self, "position", np.asarray(self.position, dtype=float))

    @property
    def n_chips(self) -> int:
        return self.chip_rows * self.chip_cols

    def beam_axis(self) -> np.ndarray:
        """Unit beam axis: straight down, rotated by aim_deg about z."""
        a = math.radians(self.aim_deg)
        return np.array([math.sin(a), -math.cos(a), 0.0])

    def chip_centres(self) -> np.ndarray:
        """(n_chips, 3) emitter positions; the grid plane rotates with the aim."""
        a = math.radians(self.aim_deg)
        rot = np.array(
            [[math.cos(a), -math.sin(a), 0.0],
             [math.sin(a), math.cos(a), 0.0],
             [0.0, 0.0, 1.0]]
        )
        i = np.arange(self.chip_rows) - (self.chip_rows - 1) / 2.0
        j = np.arange(self.chip_cols) - (self.chip_cols - 1) / 2.0
        dx, dz = np.meshgrid(i * self.chip_pitch_cm, j * self.chip_pitch_cm, indexing="ij")
        local = np.stack([dx.ravel(), np.zeros(dx.size), dz.ravel()], axis=1)
        return self.position + local @ rot.T

    def emission_frame(self) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
        """Orthonormal (t1, t2, axis) with axis the beam direction."""
        w = self.beam_axis()
        t1 = unit(np.cross(w, np.array([0.0, 0.0, 1.0])))
        t2 = np.cross(w, t1)
        return t1, t2, w


@dataclass(frozen=True)
class PlacedDetector:
    """Rectangular bare photodiode with an upward-facing default orientation."""

    id: str
    position: np.ndarray
    normal: np.ndarray = field(default_factory=lambda: np.array([0.0, 1.0, 0.0]))
    width_cm: float = 1.0
    height_cm: float = 1.0
    receiver: DetectorModel | None = None

    def __post_init__(self):
        if self.width_cm * self.height_cm <= 0:
            raise SceneError(f"detector {self.id}: active area must be positive")
        object.__setattr__(self, "position", np.asarray(self.position, dtype=float))
        object.__setattr__(self, "normal", unit(self.normal))

    @property
    def area_cm2(self) -> float:
        return self.width_cm * self.height_cm

    def frame(self) -> tuple[np.ndarray, np.ndarray]:
        """In-plane unit axes (u along width, v along height)."""
        n = self.normal
        helper = np.array([0.0, 0.0, 1.0])
        if abs(n @ helper) > 0.9:
            helper = np.array([1.0, 0.0, 0.0])
        u = unit(np.cross(n, helper))
        v = np.cross(n, u)
        return u, v


@dataclass(frozen=True)
class CabinScene:
    """Immutable cabin scenario: geometry, emitters, receivers, materials.

    When the shell is an axis-aligned box, box_bounds/box_face_materials carry
    it in analytic form (faces ordered x-,x+,y-,y+,z-,z+) so the tracer can
    resolve wall exits without polygon tests; the equivalent `cabin_*` quads
    stay in `surfaces` for generic queries.
    """

    surfaces: tuple[Surface, ...]
    sources: tuple[PlacedSource, ...]
    detectors: tuple[PlacedDetector, ...]
    materials: dict[str, MaterialSpectrum]
    hull_planes: tuple[tuple[np.ndarray, float], ...] = ()
    box_bounds: tuple[tuple[float, float, float], tuple[float, float, float]] | None = None
    box_face_materials: tuple[str, ...] | None = None

    def __post_init__(self):
        known = set(self.materials)
        for s in self.surfaces:
            if s.material_id not in known:
                raise SceneError(f"surface {s.id}: unknown material {s.material_id!r}")
        for det in self.detectors:
            if self.hull_planes and not self.contains(det.position, margin=1e-9):
                raise SceneError(f"detector {det.id}: position outside the cabin hull")

    def contains(self, point, margin: float = 0.0) -> bool:
        """True when the point lies inside the cabin hull."""
        p = np.asarray(point, dtype=float)
        return all(n @ p >= d + margin for n, d in self.hull_planes)

    def source(self, sid: str) -> PlacedSource:
        for s in self.sources:
            if s.id == sid:
                return s
        raise SceneError(f"unknown source {sid!r}")

    def detector(self, did: str) -> PlacedDetector:
        for d in self.detectors:
            if d.id == did:
                return d
        raise SceneError(f"unknown detector {did!r}")


@dataclass(frozen=True)
class Hit:
    kind: str  # "surface" or "detector"
    id: str
    point: np.ndarray
    distance: float
    normal: np.ndarray


def _poly_hit_t(origin, direction, vertices, normal, plane_d, eps):
    denom = normal @ direction
    if abs(denom) < 1e-15:
        return None
    t = (plane_d - normal @ origin) / denom
    if t <= eps:
        return None
    p = origin + t * direction
    nv = len(vertices)
    for i in range(nv):
        a = vertices[i]
        b = vertices[(i + 1) % nv]
        if np.cross(b - a, p - a) @ normal < -_EDGE_TOL:
            return None
    return t


def _detector_hit_t(origin, direction, det: PlacedDetector, eps):
    n = det.normal
    denom = n @ direction
    if abs(denom) < 1e-15:
        return None
    t = (n @ det.position - n @ origin) / denom
    if t <= eps:
        return None
    u, v = det.frame()
    q = origin + t * direction - det.position
    if abs(q @ u) > det.width_cm / 2.0 + _EDGE_TOL:
        return None
    if abs(q @ v) > det.height_cm / 2.0 + _EDGE_TOL:
        return None
    return t


def intersect(origin, direction, scene: CabinScene, eps: float = INTERSECT_EPS) -> Hit | None:
    """Nearest ray intersection against all surfaces and detectors.

    Detectors are first-class geometry.  Ties in distance break on the lexically
    smaller id so the result never depends on scene ordering.  Returns None on
    a miss.
    """
    origin = np.asarray(origin, dtype=float)
    direction = np.asarray(direction, dtype=float)
    best = None
    for s in scene.surfaces:
        t = _poly_hit_t(origin, direction, s.vertices, s.normal, s.plane_offset, eps)
        if t is None:
            continue
        cand = (t, "surface", s.id, s.normal)
        if best is None or t < best[0] or (t == best[0] and cand[1:3] < best[1:3]):
            best = cand
    for det in scene.detectors:
        t = _detector_hit_t(origin, direction, det, eps)
        if t is None:
            continue
        cand = (t, "detector", det.id, det.normal)
        if best is None or t < best[0] or (t == best[0] and cand[1:3] < best[1:3]):
            best = cand
    if best is None:
        return None
    t, kind, sid, normal = best
    return Hit(kind, sid, origin + t * direction, float(t), normal)


def aim_rotation(source_xz, target_xz, drop_cm: float) -> float:
    """Signed z-axis rotation (degrees) that points the beam at the target.

    Positive angles tilt toward +x.  The drop is the vertical distance from
    the light plane down to the aim height.
    """
    if drop_cm <= 0:
        raise SceneError("drop must be positive")
    offset = float(np.asarray(target_xz, dtype=float)[0] - np.asarray(source_xz, dtype=float)[0])
    return math.degrees(math.atan(offset / drop_cm))


def ceil_aim_angle(angle_deg: float) -> float:
    """Round an aim angle outward to the next integer degree magnitude."""
    return math.copysign(math.ceil(abs(angle_deg)), angle_deg)


def _box_quads(prefix: str, lo, hi, material: str) -> list[Surface]:
    """Six outward-facing quads of an axis-aligned box."""
    x0, y0, z0 = lo
    x1, y1, z1 = hi
    c = lambda x, y, z: (x, y, z)
    faces = {
        "x-": [c(x0, y0, z0), c(x0, y0, z1), c(x0, y1, z1), c(x0, y1, z0)],
        "x+": [c(x1, y0, z0), c(x1, y1, z0), c(x1, y1, z1), c(x1, y0, z1)],
        "y-": [c(x0, y0, z0), c(x1, y0, z0), c(x1, y0, z1), c(x0, y0, z1)],
        "y+": [c(x0, y1, z0), c(x0, y1, z1), c(x1, y1, z1), c(x1, y1, z0)],
        "z-": [c(x0, y0, z0), c(x0, y1, z0), c(x1, y1, z0), c(x1, y0, z0)],
        "z+": [c(x0, y0, z1), c(x1, y0, z1), c(x1, y1, z1), c(x0, y1, z1)],
    }
    return [make_surface(f"{prefix}_{k}", v, material) for k, v in faces.items()]


def seat_surfaces(seat_id: str, position, material: str = "fabric") -> list[Surface]:
    """Cushion and backrest slabs for one seat at its reference corner."""
    px, py, pz = np.asarray(position, dtype=float)
    cushion = _box_quads(
        f"seat_{seat_id}_cushion",
        (px, py - SEAT_CUSHION_THICKNESS, pz),
        (px + SEAT_WIDTH, py, pz + SEAT_DEPTH),
        material,
    )
    back = _box_quads(
        f"seat_{seat_id}_back",
        (px, py, pz + SEAT_DEPTH - SEAT_BACK_THICKNESS),
        (px + SEAT_WIDTH, py + SEAT_BACK_HEIGHT, pz + SEAT_DEPTH),
        material,
    )
    return cushion + back


def _shell_box(width, height, length, wall_material, floor_material) -> tuple[list[Surface], list]:
    lo, hi = (0.0, 0.0, 0.0), (width, height, length)
    quads = _box_quads("cabin", lo, hi, wall_material)
    surfaces = []
    for s in quads:
        mat = floor_material if s.id == "cabin_y-" else wall_material
        # flip normals inward for the shell
        surfaces.append(Surface(s.id, s.vertices[::-1], -s.normal, mat))
    hull = [(s.normal.copy(), s.plane_offset) for s in surfaces]
    return surfaces, hull


def _tessellated_shell(width, height, length, segments, wall_material, floor_material):
    """Curved-wall approximation: a convex arched cross-section extruded in z.

    The cross-section is a circular arc clipped by the floor and ceiling; the
    arc is split into `segments` planar strips per side.
    """
    cx, cy, r = width / 2.0, 80.0, 200.0
    y_top = min(height, cy + r)
    ys = np.linspace(0.0, y_top, segments + 1)
    right = [(cx + math.sqrt(max(r * r - (y - cy) ** 2, 0.0)), y) for y in ys]
    # cross-section loop: right arc up, mirrored left arc down
    loop = right + [(2 * cx - x, y) for x, y in right[::-1]]
    surfaces: list[Surface] = []
    hull = []
    pts = loop
    n_pts = len(pts)
    for i in range(n_pts):
        (xa, ya), (xb, yb) = pts[i], pts[(i + 1) % n_pts]
        if math.hypot(xb - xa, yb - ya) < 1e-9:
            continue
        mat = floor_material if max(ya, yb) < 1e-9 else wall_material
        quad = [(xa, ya, 0.0), (xb, yb, 0.0), (xb, yb, length), (xa, ya, length)]
        s = make_surface(f"shell_{i}", quad, mat)
        # orient inward: the section centroid must be on the normal side
        centre = np.array([cx, y_top / 2.0, length / 2.0])
        if (centre - np.asarray(quad[0])) @ s.normal < 0:
            s = Surface(s.id, s.vertices[::-1], -s.normal, mat)
        surfaces.append(s)
        hull.append((s.normal.copy(), s.plane_offset))
    for z, sid, nrm in ((0.0, "shell_z-", np.array([0.0, 0.0, 1.0])),
                        (length, "shell_z+", np.array([0.0, 0.0, -1.0]))):
        verts = np.array([(x, y, z) for x, y in pts])
        if nrm[2] < 0:
            verts = verts[::-1]
        surfaces.append(Surface(sid, verts, nrm, wall_material))
        hull.append((nrm.copy(), float(nrm @ verts[0])))
    return surfaces, hull


def build_simplified_cabin(config) -> CabinScene:
    """Assemble the planar cabin scene described by a scenario config.

    The default layout places nine seats, three reading lights aimed at the
    seat-back centres (aim angles -33/0/+33 degrees) and up to nine photodiode
    positions.  Seats or detectors protruding outside the hull are rejected.
    """
    from . import config as cfgmod

    cfg = config if config is not None else cfgmod.ScenarioConfig()
    cab = cfg.cabin
    if min(cab.width, cab.height, cab.length) <= 0:
        raise SceneError("cabin dimensions must be positive")

    materials = cfg.resolve_materials()
    wall_mat, floor_mat, seat_mat = cfg.wall_material, cfg.floor_material, cfg.seat_material
    for name in (wall_mat, floor_mat, seat_mat):
        if name not in materials:
            raise SceneError(f"unknown material {name!r}")

    if cab.variant == "tessellated-realistic":
        surfaces, hull = _tessellated_shell(
            cab.width, cab.height, cab.length, cab.tessellation_segments, wall_mat, floor_mat
        )
    else:
        surfaces, hull = _shell_box(cab.width, cab.height, cab.length, wall_mat, floor_mat)

    def inside(p, pad=0.0):
        return all(np.asarray(n) @ np.asarray(p) >= d + pad for n, d in hull)

    for seat_id, pos in cfg.seats.items():
        quads = seat_surfaces(seat_id, pos, seat_mat)
        for q in quads:
            for v in q.vertices:
                if not inside(v, pad=-1e-9):
                    raise SceneError(f"seat {seat_id} protrudes outside the hull")
        surfaces.extend(quads)

    for spec in cfg.extra_surfaces:
        surfaces.append(make_surface(spec["id"], spec["vertices"], spec["material"]))

    emitter = cfg.source_model()
    sources = tuple(
        PlacedSource(
            id=sid,
            position=np.asarray(spec["position"], dtype=float),
            aim_deg=float(spec["aim_deg"]),
            chip_rows=int(spec.get("chip_rows", 4)),
            chip_cols=int(spec.get("chip_cols", 4)),
            chip_pitch_cm=float(spec.get("chip_pitch_cm", 0.4)),
            power_total_w=float(spec.get("power_w", 16.0)),
            emitter=emitter,
        )
        for sid, spec in cfg.sources.items()
    )

    receiver = cfg.detector_model()
    detectors = []
    for did, spec in cfg.detectors.items():
        det = PlacedDetector(
            id=did,
            position=np.asarray(spec["position"], dtype=float),
            normal=np.asarray(spec.get("normal", (0.0, 1.0, 0.0)), dtype=float),
            width_cm=float(spec.get("width_cm", 1.0)),
            height_cm=float(spec.get("height_cm", 1.0)),
            receiver=receiver,
        )
        if not inside(det.position):
            raise SceneError(f"detector {did} lies outside the hull")
        detectors.append(det)

    box_bounds = None
    box_face_materials = None
    if cab.variant != "tessellated-realistic":
        box_bounds = ((0.0, 0.0, 0.0), (cab.width, cab.height, cab.length))
        box_face_materials = (wall_mat, wall_mat, floor_mat, wall_mat, wall_mat, wall_mat)

    return CabinScene(
        surfaces=tuple(surfaces),
        sources=sources,
        detectors=tuple(detectors),
        materials=materials,
        hull_planes=tuple((np.asarray(n), float(d)) for n, d in hull),
        box_bounds=box_bounds,
        box_face_materials=box_face_materials,
    )
