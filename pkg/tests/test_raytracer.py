import numpy as np
import pytest

from lifisim import _kernel
from lifisim import photometry as ph
from lifisim import scene as sc
from lifisim.raytracer import (
    Ray,
    TraceBudgetError,
    TraceConfig,
    emit_chip_primaries,
    emit_diffuse_children,
    trace,
)
from lifisim.scene import SPEED_OF_LIGHT_CM_PER_NS, intersect

from conftest import make_box_scene


def los_scene(power=1.0, det_width=1.0, offset=(0.0, 67.2, 0.0), aim=0.0):
    src = sc.PlacedSource(
        id="s", position=(50.0, 70.0, 60.0), aim_deg=aim, chip_rows=1, chip_cols=1,
        power_total_w=power,
        emitter=ph.SourceModel(
            spectrum=ph.SpectralCurve.from_samples([(0.35, 1.0), (1.1, 1.0)]),
            directivity=ph.AngularProfile(fallback_order=1.0),
        ),
    )
    det = sc.PlacedDetector(
        id="D", position=tuple(np.array(src.position) - np.array(offset)),
        width_cm=det_width, height_cm=det_width, receiver=ph.flat_detector_model(),
    )
    return sc.CabinScene(surfaces=(), sources=(src,), detectors=(det,),
                         materials=ph.default_materials(), hull_planes=())


def reference_trace(scene, config, source_id=None):
    """Slow, independent re-implementation of the trace semantics.

    Uses scene.intersect for geometry and the same counter-based streams, so
    any divergence isolates a kernel defect.
    """
    source = scene.sources[0] if source_id is None else scene.source(source_id)
    max_refl = max(float(m.reflectance.weight.max()) for m in scene.materials.values())
    kappa_max = config.resolved_kappa_max
    min_rel = config.resolved_min_rel
    mat_of = {s.id: s.material_id for s in scene.surfaces}
    recs = []
    for chip in range(source.n_chips):
        dirs, wls, pws = emit_chip_primaries(source, chip, config)
        origin = source.chip_centres()[chip]
        for i in range(config.rays_per_chip):
            state = _kernel.stream_seed(np.uint64(config.seed), chip, i)
            wl = wls[i]
            stack = [(origin, dirs[i], pws[i], 1.0, 0.0, 0)]
            while stack:
                o, d, p, rel, plen, kap = stack.pop()
                hit = intersect(o, d, scene)
                if hit is None:
                    continue
                if hit.kind == "detector":
                    det = scene.detector(hit.id)
                    cosi = float(-(d @ det.normal))
                    if cosi > 0:
                        theta = np.degrees(np.arccos(min(cosi, 1.0)))
                        ang = float(det.receiver.angular_response(theta))
                        spec = float(ph.evaluate(det.receiver.spectral_response, wl))
                        recs.append((hit.id, kap, wl,
                                     (plen + hit.distance) / SPEED_OF_LIGHT_CM_PER_NS,
                                     p * ang * spec))
                    continue
                if kap >= kappa_max or rel * max_refl / config.nu_s <= min_rel:
                    continue
                refl = float(ph.evaluate(scene.materials[mat_of[hit.id]].reflectance, wl))
                child_p = p * refl / config.nu_s
                child_rel = rel * refl / config.nu_s
                if child_rel <= min_rel:
                    continue
                n = hit.normal if (hit.normal @ d) < 0 else -hit.normal
                helper = (np.array([1.0, 0.0, 0.0]) if abs(n[2]) > 0.9
                          else np.array([0.0, 0.0, 1.0]))
                t1 = np.cross(n, helper)
                t1 /= np.linalg.norm(t1)
                t2 = np.cross(n, t1)
                for _ in range(config.nu_s):
                    state, u1 = _kernel._next_u01(np.uint64(state))
                    state, u2 = _kernel._next_u01(np.uint64(state))
                    r = np.sqrt(u1)
                    phi = 2.0 * np.pi * u2
                    cd = r * np.cos(phi) * t1 + r * np.sin(phi) * t2 + np.sqrt(1.0 - u1) * n
                    stack.append((hit.point, cd, child_p, child_rel,
                                  plen + hit.distance, kap + 1))
    return sorted(recs, key=lambda r: r[3])


def small_scene_with_contents():
    src = sc.PlacedSource(id="s", position=(50, 70, 60), aim_deg=15.0, chip_rows=2,
                          chip_cols=1, power_total_w=2.0, emitter=ph.source_model("ir"))
    det = sc.PlacedDetector(id="D", position=(50, 40, 60), width_cm=8, height_cm=8,
                            receiver=ph.detector_model("ir"))
    slab = sc._box_quads("seat_X_cushion", (30, 20, 40), (60, 30, 70), "fabric")
    return make_box_scene(detector=det, sources=(src,), extra_surfaces=slab)


def test_kernel_matches_reference_tracer():
    scene = small_scene_with_contents()
    config = TraceConfig(band="ir", rays_per_chip=300, seed=11, kappa_max=3,
                         min_rel_intensity=1e-4)
    bank = trace(scene, config)
    ref = reference_trace(scene, config)
    assert bank.records.size == len(ref)
    assert bank.records.size > 50
    for r, g in zip(ref, bank.records):
        assert bank.detector_ids[g["detector_id"]] == r[0]
        assert g["kappa"] == r[1]
        assert g["wavelength_um"] == pytest.approx(r[2], abs=1e-12)
        assert g["t_ns"] == pytest.approx(r[3], abs=1e-9)
        assert g["power_w"] == pytest.approx(r[4], rel=1e-12)


def test_emit_diffuse_children_power_split():
    parent = Ray(origin=(0, 0, 0), direction=(0, -1, 0), power_w=2.0,
                 wavelength_um=0.86, elapsed_ns=1.5, kappa=1)
    rng = np.random.default_rng(0)
    lossless = emit_diffuse_children(parent, (0, 1, 0), 1.0, 5, rng)
    assert sum(c.power_w for c in lossless) == pytest.approx(2.0, rel=1e-12)
    kids = emit_diffuse_children(parent, (0, 1, 0), 0.8, 5, rng)
    for c in kids:
        assert c.power_w == pytest.approx(0.16 * 2.0, rel=1e-12)
        assert c.kappa == 2
        assert c.elapsed_ns == 1.5
        assert c.direction @ np.array([0, 1, 0]) > 0


def test_emit_diffuse_children_mean_cosine():
    parent = Ray(origin=(0, 0, 0), direction=(0, -1, 0), power_w=1.0, wavelength_um=0.86)
    rng = np.random.default_rng(123)
    cos_sum, n = 0.0, 100_000
    normal = np.array([0.0, 1.0, 0.0])
    for _ in range(n // 5):
        for c in emit_diffuse_children(parent, normal, 1.0, 5, rng):
            cos_sum += c.direction @ normal
    assert cos_sum / n == pytest.approx(2.0 / 3.0, rel=5e-3)


def test_los_trace_delay_and_multiplicity():
    scene = los_scene(det_width=4.0)
    bank = trace(scene, TraceConfig(band="ir", rays_per_chip=40_000, seed=2, kappa_max=0))
    assert bank.records.size > 0
    assert np.all(bank.records["kappa"] == 0)
    # 67.2 cm straight down: every strike arrives together
    expect = 67.2 / SPEED_OF_LIGHT_CM_PER_NS
    assert np.mean(bank.records["t_ns"]) == pytest.approx(expect, abs=0.01)
    assert np.all(np.abs(bank.records["t_ns"] - expect) < 0.01)


def test_absorbing_walls_keep_only_direct_hits():
    det = sc.PlacedDetector(id="D", position=(50, 40, 60), width_cm=8, height_cm=8,
                            receiver=ph.flat_detector_model())
    src = sc.PlacedSource(id="s", position=(50, 70, 60), aim_deg=0.0, chip_rows=1,
                          chip_cols=1, power_total_w=1.0,
                          emitter=ph.source_model("ir"))
    scene = make_box_scene(detector=det, sources=(src,), wall_material="absorber",
                           floor_material="absorber")
    bank = trace(scene, TraceConfig(band="ir", rays_per_chip=20_000, seed=4))
    assert bank.records.size > 0
    assert np.all(bank.records["kappa"] == 0)


def test_splitting_tree_size_and_energy_conservation():
    # unit reflectance, closed box, no detectors: every bounce generation
    # carries the emitted power and the tree has the full nu_s**kappa width
    mats = ph.default_materials()
    mats["mirror_white"] = ph.MaterialSpectrum(
        ph.SpectralCurve.from_samples([(0.3, 1.0), (1.2, 1.0)]), 5)
    src = sc.PlacedSource(id="s", position=(50, 40, 60), aim_deg=0.0, chip_rows=1,
                          chip_cols=1, power_total_w=1.0,
                          emitter=ph.source_model("ir"))
    scene = make_box_scene(sources=(src,), wall_material="mirror_white",
                           floor_material="mirror_white", materials=mats)
    config = TraceConfig(band="ir", rays_per_chip=64, seed=1, kappa_max=4,
                         min_rel_intensity=1e-9)
    bank = trace(scene, config)
    gen = np.asarray(bank.meta["gen_power_w"])
    assert gen.shape == (5,)
    np.testing.assert_allclose(gen, 1.0, rtol=1e-12)
    full, term = bank.meta["segments"]
    n_prim = 64
    assert term == n_prim * 5**4
    assert full == n_prim * (1 + 5 + 25 + 125)


def test_power_bound_per_record():
    scene = small_scene_with_contents()
    config = TraceConfig(band="ir", rays_per_chip=500, seed=5)
    bank = trace(scene, config)
    src = scene.sources[0]
    bound = src.power_total_w / (src.n_chips * config.rays_per_chip)
    assert np.all(bank.records["power_w"] <= bound * (1 + 1e-12))
    assert np.all(bank.records["t_ns"] > 0)


def test_trace_determinism_and_seed_sensitivity():
    scene = small_scene_with_contents()
    config = TraceConfig(band="ir", rays_per_chip=300, seed=9)
    a = trace(scene, config)
    b = trace(scene, config)
    assert a.records.tobytes() == b.records.tobytes()
    c = trace(scene, TraceConfig(band="ir", rays_per_chip=300, seed=10))
    assert c.records.tobytes() != a.records.tobytes()


def test_hit_count_scales_linearly_with_rays():
    det = sc.PlacedDetector(id="D", position=(50, 40, 60), width_cm=12, height_cm=12,
                            receiver=ph.flat_detector_model())
    src = sc.PlacedSource(id="s", position=(50, 70, 60), aim_deg=0.0, chip_rows=1,
                          chip_cols=1, power_total_w=1.0, emitter=ph.source_model("ir"))
    scene = make_box_scene(detector=det, sources=(src,))
    ratios = []
    for seed in range(10):
        small = trace(scene, TraceConfig(band="ir", rays_per_chip=2000, seed=seed,
                                         kappa_max=2)).records.size
        big = trace(scene, TraceConfig(band="ir", rays_per_chip=4000, seed=seed,
                                       kappa_max=2)).records.size
        ratios.append(big / small)
    assert np.mean(ratios) == pytest.approx(2.0, rel=0.05)


def test_budget_guard():
    scene = small_scene_with_contents()
    with pytest.raises(TraceBudgetError):
        trace(scene, TraceConfig(band="vl", rays_per_chip=10_000, seed=1,
                                 max_segment_budget=1e4))


def test_band_defaults():
    ir = TraceConfig(band="ir")
    vl = TraceConfig(band="vl")
    assert ir.resolved_kappa_max == 4 and ir.resolved_min_rel == 1e-4
    assert vl.resolved_kappa_max == 6 and vl.resolved_min_rel == 1e-5


def test_multi_source_requires_selection():
    cfg_scene = small_scene_with_contents()
    two = sc.CabinScene(
        surfaces=cfg_scene.surfaces,
        sources=cfg_scene.sources + (sc.PlacedSource(id="s2", position=(20, 70, 60),
                                                     aim_deg=0.0,
                                                     emitter=ph.source_model("ir")),),
        detectors=cfg_scene.detectors, materials=cfg_scene.materials,
        hull_planes=cfg_scene.hull_planes, box_bounds=cfg_scene.box_bounds,
        box_face_materials=cfg_scene.box_face_materials,
    )
    with pytest.raises(Exception):
        trace(two, TraceConfig(band="ir", rays_per_chip=10))
    bank = trace(two, TraceConfig(band="ir", rays_per_chip=10), source_id="s2")
    assert bank.meta["source_id"] == "s2"
