"""Non-sequential Monte-Carlo ray tracing over a cabin scene.

Primary rays leave each LED chip with power P_t / (chips * rays_per_chip), a
wavelength drawn from the source spectrum and a direction from the directivity
profile.  Every diffuse bounce multiplies power by the coating reflectance at
the ray's wavelength and splits it equally over nu_s cosine-distributed
children (specular share zero).  A ray ends when its relative intensity drops
to the configured floor, its bounce order reaches kappa_max, it escapes, or it
strikes a detector, which records power x angular responsivity x spectral
responsivity along with the elapsed propagation time.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace

import numpy as np

from . import _kernel, photometry
from .rdb import RECORD_DTYPE, RayDataBank
from .scene import SPEED_OF_LIGHT_CM_PER_NS, CabinScene, PlacedSource, unit


class TraceError(ValueError):
    pass


class TraceBudgetError(TraceError):
    """Estimated ray-tree size exceeds the configured budget."""


@dataclass(frozen=True)
class Ray:
    origin: np.ndarray
    direction: np.ndarray
    power_w: float
    wavelength_um: float
    elapsed_ns: float = 0.0
    kappa: int = 0
    rel_intensity: float = 1.0

    def __post_init__(self):
        if self.power_w < 0:
            raise TraceError("ray power must be >= 0")
        if not 0.0 < self.rel_intensity <= 1.0:
            raise TraceError("relative intensity must lie in (0, 1]")
        object.__setattr__(self, "origin", np.asarray(self.origin, dtype=float))
        object.__setattr__(self, "direction", unit(self.direction))


@dataclass(frozen=True)
class TraceConfig:
    band: str = photometry.IR_BAND
    rays_per_chip: int = 10_000
    nu_s: int = 5
    kappa_max: int | None = None            # None: 4 for IR, 6 for VL
    min_rel_intensity: float | None = None  # None: 1e-4 for IR, 1e-5 for VL
    seed: int = 1
    stratified: bool = True
    max_segment_budget: float = 5e9

    def __post_init__(self):
        if self.rays_per_chip < 1:
            raise TraceError("rays_per_chip must be >= 1")
        if self.nu_s < 1:
            raise TraceError("nu_s must be >= 1")
        mri = self.resolved_min_rel
        if not 0.0 < mri < 1.0:
            raise TraceError("min_rel_intensity must lie in (0, 1)")
        if self.resolved_kappa_max < 0:
            raise TraceError("kappa_max must be >= 0")

    @property
    def resolved_kappa_max(self) -> int:
        if self.kappa_max is not None:
            return int(self.kappa_max)
        return 4 if self.band == photometry.IR_BAND else 6

    @property
    def resolved_min_rel(self) -> float:
        if self.min_rel_intensity is not None:
            return float(self.min_rel_intensity)
        return 1e-4 if self.band == photometry.IR_BAND else 1e-5


def emit_diffuse_children(parent: Ray, hit_normal, reflectance: float, nu_s: int,
                          rng: np.random.Generator) -> list[Ray]:
    """Split a reflected ray into nu_s equal-power diffuse children.

    Each child carries parent power x reflectance / nu_s and a cosine-weighted
    direction about the hit normal; bounce order increments, elapsed time is
    carried over unchanged (the child has not propagated yet).
    """
    if not 0.0 <= reflectance <= 1.0:
        raise TraceError("reflectance must lie in [0, 1]")
    n = unit(hit_normal)
    if n @ parent.direction > 0:
        n = -n
    helper = np.array([1.0, 0.0, 0.0]) if abs(n[2]) > 0.9 else np.array([0.0, 0.0, 1.0])
    t1 = unit(np.cross(n, helper))
    t2 = np.cross(n, t1)
    children = []
    for _ in range(nu_s):
        u1, u2 = rng.random(), rng.random()
        r = math.sqrt(u1)
        phi = 2.0 * math.pi * u2
        d = r * math.cos(phi) * t1 + r * math.sin(phi) * t2 + math.sqrt(1.0 - u1) * n
        children.append(
            Ray(
                origin=parent.origin,
                direction=d,
                power_w=parent.power_w * reflectance / nu_s,
                wavelength_um=parent.wavelength_um,
                elapsed_ns=parent.elapsed_ns,
                kappa=parent.kappa + 1,
                rel_intensity=max(parent.rel_intensity * reflectance / nu_s, 1e-300),
            )
        )
    return children


@dataclass
class CompiledScene:
    """Flat array form of a scene, ready for the tracing kernel."""

    verts: np.ndarray
    poly_off: np.ndarray
    poly_n: np.ndarray
    poly_d: np.ndarray
    poly_mat: np.ndarray
    group_off: np.ndarray
    group_bb: np.ndarray
    det_pos: np.ndarray
    det_u: np.ndarray
    det_v: np.ndarray
    det_n: np.ndarray
    det_hw: np.ndarray
    det_hh: np.ndarray
    det_ang_m: np.ndarray
    det_ang_off: np.ndarray
    det_ang_x: np.ndarray
    det_ang_w: np.ndarray
    det_spec_off: np.ndarray
    det_spec_x: np.ndarray
    det_spec_w: np.ndarray
    mat_off: np.ndarray
    mat_x: np.ndarray
    mat_w: np.ndarray
    max_refl: float
    material_names: list[str]
    detector_ids: list[str]
    has_box: bool = False
    box_lo: np.ndarray = field(default_factory=lambda: np.zeros(3))
    box_hi: np.ndarray = field(default_factory=lambda: np.zeros(3))
    box_mat: np.ndarray = field(default_factory=lambda: np.zeros(6, dtype=np.int64))
    rect_axis: np.ndarray = field(default_factory=lambda: np.zeros(0, dtype=np.int64))
    rect_b: np.ndarray = field(default_factory=lambda: np.zeros((0, 5)))
    super_bb: np.ndarray = field(default_factory=lambda: np.zeros((1, 6)))
    det_single_plane: bool = False
    dp_n: np.ndarray = field(default_factory=lambda: np.zeros(3))
    dp_d: float = 0.0


def _surface_group_key(surface_id: str) -> str:
    # seats become one culling group each; everything else is a singleton
    if surface_id.startswith("seat_"):
        return "_".join(surface_id.split("_")[:2])
    return surface_id


def _rect_form(surface) -> tuple[int, np.ndarray] | None:
    """Axis-aligned rectangle parameters, or None for general polygons."""
    v = surface.vertices
    if v.shape[0] != 4:
        return None
    n = surface.normal
    axis = int(np.argmax(np.abs(n)))
    if abs(abs(n[axis]) - 1.0) > 1e-12:
        return None
    if np.ptp(v[:, axis]) > 1e-9:
        return None
    a1, a2 = [a for a in (0, 1, 2) if a != axis]  # ascending, matching the kernel
    lo1, hi1 = v[:, a1].min(), v[:, a1].max()
    lo2, hi2 = v[:, a2].min(), v[:, a2].max()
    # vertices must sit on the bounding-box corners for the range test to hold
    corners = {(x, y) for x in (lo1, hi1) for y in (lo2, hi2)}
    if {(p[a1], p[a2]) for p in v} != corners:
        return None
    return axis, np.array([v[0, axis], lo1, hi1, lo2, hi2])


def compile_scene(scene: CabinScene) -> CompiledScene:
    mat_names = sorted(scene.materials)
    mat_index = {m: i for i, m in enumerate(mat_names)}
    mat_x_parts, mat_w_parts, mat_off = [], [], [0]
    max_refl = 0.0
    for name in mat_names:
        curve = scene.materials[name].reflectance
        mat_x_parts.append(curve.x)
        mat_w_parts.append(curve.weight)
        mat_off.append(mat_off[-1] + curve.x.size)
        max_refl = max(max_refl, float(curve.weight.max()))

    has_box = scene.box_bounds is not None
    groups: dict[str, list] = {}
    for s in scene.surfaces:
        if has_box and s.id.startswith("cabin_"):
            continue  # shell handled analytically via box_bounds
        groups.setdefault(_surface_group_key(s.id), []).append(s)

    verts_parts, poly_off, poly_n, poly_d, poly_mat = [], [0], [], [], []
    rect_axis, rect_b = [], []
    group_off = [0]
    group_bb = []
    for key in sorted(groups):
        lo = np.full(3, np.inf)
        hi = np.full(3, -np.inf)
        for s in groups[key]:
            verts_parts.append(s.vertices)
            poly_off.append(poly_off[-1] + len(s.vertices))
            poly_n.append(s.normal)
            poly_d.append(s.plane_offset)
            poly_mat.append(mat_index[s.material_id])
            rect = _rect_form(s)
            rect_axis.append(-1 if rect is None else rect[0])
            rect_b.append(np.zeros(5) if rect is None else rect[1])
            lo = np.minimum(lo, s.vertices.min(axis=0))
            hi = np.maximum(hi, s.vertices.max(axis=0))
        group_off.append(len(poly_n))
        group_bb.append(np.concatenate([lo - 1e-9, hi + 1e-9]))

    dets = scene.detectors
    det_pos = np.array([d.position for d in dets], dtype=float).reshape(len(dets), 3)
    det_n = np.array([d.normal for d in dets], dtype=float).reshape(len(dets), 3)
    det_single_plane = len(dets) > 0
    dp_n = det_n[0] if len(dets) else np.zeros(3)
    dp_d = float(dp_n @ det_pos[0]) if len(dets) else 0.0
    for j in range(len(dets)):
        if (np.max(np.abs(det_n[j] - dp_n)) > 1e-12
                or abs(dp_n @ det_pos[j] - dp_d) > 1e-9):
            det_single_plane = False
            break
    det_u = np.zeros_like(det_pos)
    det_v = np.zeros_like(det_pos)
    det_hw = np.zeros(len(dets))
    det_hh = np.zeros(len(dets))
    ang_m = np.zeros(len(dets))
    ang_off, ang_x, ang_w = [0], [], []
    spec_off, spec_x, spec_w = [0], [], []
    for j, d in enumerate(dets):
        u, v = d.frame()
        det_u[j], det_v[j] = u, v
        det_hw[j] = d.width_cm / 2.0
        det_hh[j] = d.height_cm / 2.0
        model = d.receiver if d.receiver is not None else photometry.flat_detector_model()
        prof = model.angular_response
        if prof.is_tabulated:
            ang_m[j] = -1.0
            ang_x.extend(prof.samples[:, 0])
            ang_w.extend(prof.samples[:, 1])
            ang_off.append(len(ang_x))
        else:
            ang_m[j] = prof.fallback_order
            ang_off.append(len(ang_x))
        spec = model.spectral_response
        spec_x.extend(spec.x)
        spec_w.extend(spec.weight)
        spec_off.append(len(spec_x))

    return CompiledScene(
        verts=np.vstack(verts_parts) if verts_parts else np.zeros((0, 3)),
        poly_off=np.asarray(poly_off, dtype=np.int64),
        poly_n=np.asarray(poly_n, dtype=float).reshape(len(poly_n), 3)
        if poly_n
        else np.zeros((0, 3)),
        poly_d=np.asarray(poly_d, dtype=float),
        poly_mat=np.asarray(poly_mat, dtype=np.int64),
        group_off=np.asarray(group_off, dtype=np.int64),
        group_bb=np.asarray(group_bb, dtype=float).reshape(len(group_bb), 6)
        if group_bb
        else np.zeros((0, 6)),
        det_pos=det_pos,
        det_u=det_u,
        det_v=det_v,
        det_n=det_n,
        det_hw=det_hw,
        det_hh=det_hh,
        det_ang_m=ang_m,
        det_ang_off=np.asarray(ang_off, dtype=np.int64),
        det_ang_x=np.asarray(ang_x, dtype=float),
        det_ang_w=np.asarray(ang_w, dtype=float),
        det_spec_off=np.asarray(spec_off, dtype=np.int64),
        det_spec_x=np.asarray(spec_x, dtype=float),
        det_spec_w=np.asarray(spec_w, dtype=float),
        mat_off=np.asarray(mat_off, dtype=np.int64),
        mat_x=np.concatenate(mat_x_parts) if mat_x_parts else np.zeros(0),
        mat_w=np.concatenate(mat_w_parts) if mat_w_parts else np.zeros(0),
        max_refl=max_refl,
        material_names=mat_names,
        detector_ids=[d.id for d in dets],
        has_box=has_box,
        box_lo=np.asarray(scene.box_bounds[0], dtype=float) if has_box else np.zeros(3),
        box_hi=np.asarray(scene.box_bounds[1], dtype=float) if has_box else np.ones(3),
        box_mat=np.asarray(
            [mat_index[m] for m in scene.box_face_materials], dtype=np.int64
        )
        if has_box
        else np.zeros(6, dtype=np.int64),
        rect_axis=np.asarray(rect_axis, dtype=np.int64),
        rect_b=np.asarray(rect_b, dtype=float).reshape(len(rect_b), 5)
        if rect_b
        else np.zeros((0, 5)),
        super_bb=np.concatenate(
            [np.asarray(group_bb).reshape(-1, 6)[:, :3].min(axis=0),
             np.asarray(group_bb).reshape(-1, 6)[:, 3:].max(axis=0)]
        ).reshape(1, 6)
        if group_bb
        else np.zeros((1, 6)),
        det_single_plane=det_single_plane,
        dp_n=np.ascontiguousarray(dp_n),
        dp_d=dp_d,
    )


def _stratification_grid(n: int, stratified: bool) -> tuple[int, int]:
    """Jittered-grid dims for n rays; (0, 1) disables stratification."""
    if not stratified:
        return 0, 1
    n1 = max(int(math.isqrt(n)), 1)
    return n1, max(n // n1, 1)


def emit_chip_primaries(source: PlacedSource, chip_index: int, config: TraceConfig,
                        start: int = 0, count: int | None = None):
    """Primary ray block for one LED chip: directions and wavelengths.

    Every ray's uniforms come from its own counter-based stream keyed by
    (seed, chip, ray index), so any block slicing yields identical rays.
    Directions are jitter-stratified over the emission CDF grid by default.
    """
    n = config.rays_per_chip
    count = n - start if count is None else count
    n1, n2 = _stratification_grid(n, config.stratified)
    u1 = np.empty(count)
    u2 = np.empty(count)
    uw = np.empty(count)
    _kernel.fill_emission_uniforms(
        np.uint64(config.seed & (2**64 - 1)), np.int64(chip_index), np.int64(start),
        np.int64(n1), np.int64(n2), u1, u2, uw,
    )
    model = source.emitter if source.emitter is not None else photometry.source_model(config.band)
    local = photometry.sample_emission_direction(model.directivity, u1, u2)
    t1, t2, axis = source.emission_frame()
    dirs = local[:, 0:1] * t1 + local[:, 1:2] * t2 + local[:, 2:3] * axis
    wavelengths = np.asarray(photometry.sample_wavelength(model.spectrum, uw), dtype=float)
    power = source.power_total_w / (source.n_chips * n)
    return dirs, wavelengths, np.full(count, power)


def trace(scene: CabinScene, config: TraceConfig, source_id: str | None = None) -> RayDataBank:
    """Trace every chip of the selected source and collect detector records.

    The bank is sorted by arrival time and stamped with the trace metadata.
    Raises TraceBudgetError before tracing when the worst-case splitting tree
    (primaries * nu_s**kappa_max) exceeds the configured budget.
    """
    if source_id is None:
        if len(scene.sources) != 1:
            raise TraceError("scene has multiple sources; pass source_id")
        source = scene.sources[0]
    else:
        source = scene.source(source_id)

    kappa_max = config.resolved_kappa_max
    min_rel = config.resolved_min_rel
    n_primaries = source.n_chips * config.rays_per_chip
    worst = n_primaries * float(config.nu_s) ** kappa_max
    if worst > config.max_segment_budget:
        raise TraceBudgetError(
            f"estimated {worst:.3g} leaf rays exceeds budget {config.max_segment_budget:.3g}"
        )

    comp = compile_scene(scene)
    seg_per_primary = sum(config.nu_s**k for k in range(kappa_max + 1))
    chunk = int(np.clip(8_000_000 // max(seg_per_primary, 1), 1024, 262144))
    gen_power = np.zeros(kappa_max + 1)
    seg_count = np.zeros(2, dtype=np.int64)

    parts = []
    chip_origins = source.chip_centres()
    for chip in range(source.n_chips):
        origin = np.ascontiguousarray(chip_origins[chip])
        for start in range(0, config.rays_per_chip, chunk):
            m = min(chunk, config.rays_per_chip - start)
            dirs, wavelengths, powers = emit_chip_primaries(source, chip, config, start, m)
            gen_power[0] += powers.sum()
            streams = np.empty(m, dtype=np.uint64)
            _kernel.fill_stream_seeds(
                np.uint64(config.seed & (2**64 - 1)), np.int64(chip), np.int64(start), streams
            )
            cap = max(4096, 16 * m)
            while True:
                out_det = np.empty(cap, dtype=np.int64)
                out_kappa = np.empty(cap, dtype=np.int64)
                out_wl = np.empty(cap, dtype=np.float64)
                out_t = np.empty(cap, dtype=np.float64)
                out_pw = np.empty(cap, dtype=np.float64)
                n_hit = _kernel.trace_chunk(
                    origin, dirs, wavelengths, powers, streams,
                    comp.verts, comp.poly_off, comp.poly_n, comp.poly_d, comp.poly_mat,
                    comp.rect_axis, comp.rect_b, comp.group_off, comp.group_bb,
                    comp.super_bb,
                    comp.has_box, comp.box_lo, comp.box_hi, comp.box_mat,
                    comp.det_single_plane, comp.dp_n, comp.dp_d,
                    comp.det_pos, comp.det_u, comp.det_v, comp.det_n, comp.det_hw, comp.det_hh,
                    comp.det_ang_m, comp.det_ang_off, comp.det_ang_x, comp.det_ang_w,
                    comp.det_spec_off, comp.det_spec_x, comp.det_spec_w,
                    comp.mat_off, comp.mat_x, comp.mat_w, comp.max_refl,
                    config.nu_s, kappa_max, min_rel,
                    out_det, out_kappa, out_wl, out_t, out_pw,
                    gen_power, seg_count,
                )
                if n_hit >= 0:
                    break
                cap *= 4
            if n_hit:
                rec = np.empty(n_hit, dtype=RECORD_DTYPE)
                rec["detector_id"] = out_det[:n_hit]
                rec["kappa"] = out_kappa[:n_hit]
                rec["wavelength_um"] = out_wl[:n_hit]
                rec["t_ns"] = out_t[:n_hit] / SPEED_OF_LIGHT_CM_PER_NS
                rec["power_w"] = out_pw[:n_hit]
                parts.append(rec)

    records = np.concatenate(parts) if parts else np.empty(0, dtype=RECORD_DTYPE)
    meta = {
        "seed": int(config.seed),
        "band": config.band,
        "source_id": source.id,
        "rays_per_chip": int(config.rays_per_chip),
        "n_chips": int(source.n_chips),
        "n_primaries": int(n_primaries),
        "nu_s": int(config.nu_s),
        "kappa_max": int(kappa_max),
        "min_rel_intensity": float(min_rel),
        "stratified": bool(config.stratified),
        "source_power_w": float(source.power_total_w),
        "detector_ids": comp.detector_ids,
        "gen_power_w": [float(p) for p in gen_power],
        "segments": [int(seg_count[0]), int(seg_count[1])],
    }
    return RayDataBank(records=records, meta=meta).finalize()


def trace_with_digest(scene, config, source_id=None, digest: str | None = None) -> RayDataBank:
    bank = trace(scene, config, source_id)
    if digest is not None:
        bank.meta["digest"] = digest
    return bank
