"""End-to-end acceptance checks.

Each test exercises one exit criterion at its stated tolerance and reports a
pass/fail line in the terminal summary.  The channel-ordering and link-level
checks run fresh Monte-Carlo traces, so the full module takes tens of minutes
on a single core; traces are shared across criteria through a module cache.
"""

import math
import time

import numpy as np
import pytest
from scipy.special import erfcinv

from lifisim import channel as ch
from lifisim import cli, ofdm
from lifisim import photometry as ph
from lifisim import scene as sc
from lifisim.config import ScenarioConfig
from lifisim.raytracer import TraceConfig, trace
from lifisim.rdb import RECORD_DTYPE, load_rdb, save_rdb
from lifisim.scene import SPEED_OF_LIGHT_CM_PER_NS

from conftest import record_criterion

PAIRS = [("r1", "C1"), ("r2", "B2"), ("r3", "A3")]
SEEDS = (1, 2, 3)

# ordering-study scenario: the three studied photodiodes are enlarged to
# 10 x 10 cm so desk-scale ray budgets resolve the per-seat statistics; the
# orderings themselves are area-independent.  The visible band uses a 2 x 2
# chip grid (10_000 primaries per chip either way) to bound the runtime of
# its much deeper splitting tree.
CHIP_GRID = {"ir": 4, "vl": 2}


def ordering_config(band: str) -> ScenarioConfig:
    cfg = ScenarioConfig()
    cfg.band = band
    cfg.detectors = {
        det: {"position": list(sc.PD_POSITIONS[det]), "normal": [0, 1, 0],
              "width_cm": 10.0, "height_cm": 10.0}
        for det in ("C1", "B2", "A3")
    }
    for spec in cfg.sources.values():
        spec["chip_rows"] = spec["chip_cols"] = CHIP_GRID[band]
    cfg.trace.rays_per_chip = 10_000
    return cfg


_SCENES: dict = {}
_BANKS: dict = {}


def ordering_bank(band: str, seed: int, source: str):
    key = (band, seed, source)
    if key not in _BANKS:
        if band not in _SCENES:
            _SCENES[band] = ordering_config(band).build_scene()
        tc = TraceConfig(band=band, rays_per_chip=10_000, seed=seed)
        _BANKS[key] = trace(_SCENES[band], tc, source_id=source)
    return _BANKS[key]


def pair_stats(band: str, seed: int):
    out = {}
    for src, det in PAIRS:
        bank = ordering_bank(band, seed, src)
        rec = bank.records_for(det)
        cir = ch.bin_rays(rec, ch.DEFAULT_BIN_WIDTH_NS)
        out[det] = (cir, ch.channel_stats(cir, rec.size, 16.0))
    return out


# --------------------------------------------------------------------------
# 1. line-of-sight oracle agreement
# --------------------------------------------------------------------------

def los_scene():
    src = sc.PlacedSource(
        id="r2", position=sc.READING_LIGHT_POSITIONS["r2"], aim_deg=0.0,
        chip_rows=1, chip_cols=1, power_total_w=1.0,
        emitter=ph.SourceModel(
            spectrum=ph.SpectralCurve.from_samples([(0.35, 1.0), (1.1, 1.0)]),
            directivity=ph.AngularProfile(fallback_order=1.0),
        ),
    )
    det = sc.PlacedDetector(id="B2", position=sc.PD_POSITIONS["B2"],
                            receiver=ph.flat_detector_model())
    return sc.CabinScene(surfaces=(), sources=(src,), detectors=(det,),
                         materials=ph.default_materials(), hull_planes=())


def test_criterion_1_los_oracle_agreement():
    scene = los_scene()
    src, det = scene.sources[0], scene.detectors[0]
    h_ref, delay_ref = ch.analytical_los(src, det, lambertian_m=1.0)

    t0 = time.time()
    trace(scene, TraceConfig(band="ir", rays_per_chip=100_000, seed=1, kappa_max=0))
    runtime_gate = time.time() - t0

    bank = trace(scene, TraceConfig(band="ir", rays_per_chip=60_000_000, seed=1,
                                    kappa_max=0, max_segment_budget=1e9))
    h0 = float(bank.records["power_w"].sum())
    delay = float(np.mean(bank.records["t_ns"]))
    h_err = abs(h0 / h_ref - 1.0)
    d_err = abs(delay - 2.2417)
    record_criterion(
        "criterion 1: LoS oracle agreement",
        h_err < 0.03 and d_err < 0.01 and runtime_gate < 60.0,
        f"H0={h0:.4e} vs {h_ref:.4e} ({h_err * 100:.2f}%), "
        f"delay={delay:.4f} ns (|d|={d_err:.4f}), 1e5-ray trace {runtime_gate:.1f}s",
    )


# --------------------------------------------------------------------------
# 2. binning and statistics against brute force
# --------------------------------------------------------------------------

def _brute_stats(powers, times, kappas, dw):
    t1, tl = times.min(), times.max()
    n_bins = max(math.ceil((tl - t1) / dw), 1)
    k_max = int(kappas.max())
    per = np.zeros((k_max + 1, n_bins))
    for p, t, k in zip(powers, times, kappas):
        for n in range(n_bins):
            lo, hi = t1 + n * dw, t1 + (n + 1) * dw
            if (lo <= t < hi) or (n == n_bins - 1 and lo <= t <= hi):
                per[int(k), n] += p
                break
    bins = per.sum(axis=0)
    h2 = bins**2
    mean_n = (np.arange(n_bins) * h2).sum() / h2.sum()
    rms = math.sqrt((((np.arange(n_bins) - mean_n) ** 2) * h2).sum() / h2.sum()) * dw
    mean_ns = t1 + mean_n * dw
    gain = bins.sum()
    rho = per[0].sum() / gain
    return per, mean_ns, rms, gain, rho


def test_criterion_2_binning_statistics_oracle():
    rng = np.random.default_rng(2024)
    worst = 0.0
    for trial in range(100):
        n = int(rng.integers(1, 400))
        powers = rng.uniform(0.0, 1e-5, n)
        times = rng.uniform(1.0, 40.0, n)
        kappas = rng.integers(0, 5, n)
        dw = float(rng.uniform(0.05, 1.0))
        rec = np.zeros(n, dtype=RECORD_DTYPE)
        rec["power_w"], rec["t_ns"], rec["kappa"] = powers, times, kappas
        cir = ch.bin_rays(rec, dw)
        per, mean_ref, rms_ref, gain_ref, rho_ref = _brute_stats(powers, times, kappas, dw)
        assert cir.per_bounce.shape == per.shape
        np.testing.assert_array_equal(cir.per_bounce, per)  # power exact
        mean, rms = ch.delay_stats(cir)
        gain = ch.dc_gain(cir)
        rho = ch.flatness(cir)
        for got, ref in ((mean, mean_ref), (rms, rms_ref), (gain, gain_ref), (rho, rho_ref)):
            err = abs(got - ref) / max(abs(ref), 1e-300)
            worst = max(worst, err)
            assert err < 1e-12
    record_criterion("criterion 2: binning/statistics oracle",
                     True, f"100 sets exact in power, moments within {worst:.1e}")


# --------------------------------------------------------------------------
# 3. clipped-Gaussian closed forms
# --------------------------------------------------------------------------

def _check_bussgang(model, n, seed):
    params = ofdm.bussgang(model)
    rng = np.random.default_rng(seed)
    x = rng.normal(0.0, model.sigma_drive_ma, n)
    xh = ofdm.bias_clip(x, model)
    p_opt = float(np.mean(xh))
    p_elec = float(np.mean(xh**2))
    a_hat = float(np.mean(x * xh) / model.sigma_drive_ma**2)
    c = (xh - model.bias_ma - params.mu_z_ma) - params.A * x
    corr = float(np.corrcoef(x, c)[0, 1]) if np.std(c) > 0 else 0.0
    errs = (
        abs(p_opt / params.p_opt_ma - 1.0),
        abs(p_elec / params.p_elec_ma2 - 1.0),
        abs(a_hat / params.A - 1.0),
    )
    return max(errs), abs(corr)


def test_criterion_3_bussgang_closed_forms():
    cases = [ofdm.ClippingModel.from_bias_db(19.19)]
    rng = np.random.default_rng(99)
    for _ in range(5):
        beta = float(rng.uniform(150.0, 650.0))
        sigma = float(rng.uniform(40.0, 320.0))
        cases.append(ofdm.ClippingModel(100.0, 700.0, beta, sigma))
    worst_m, worst_c = 0.0, 0.0
    for i, model in enumerate(cases):
        m_err, corr = _check_bussgang(model, 20_000_000, seed=500 + i)
        worst_m, worst_c = max(worst_m, m_err), max(worst_c, corr)
    record_criterion(
        "criterion 3: Bussgang closed forms",
        worst_m < 1e-3 and worst_c < 1e-3,
        f"max moment err {worst_m:.2e}, max |corr| {worst_c:.2e} over 6 parameter sets",
    )


# --------------------------------------------------------------------------
# 4/5. link-level agreement between simulation and the analytic curve
# --------------------------------------------------------------------------

def _axis_for_theory_ber(taps, params, cfg, target):
    """Bisect the noise axis for a wanted analytic BER."""
    lo, hi = -80.0, 200.0
    for _ in range(80):
        mid = 0.5 * (lo + hi)
        ber, _ = ofdm.ber_theory(taps, params, cfg,
                                 ofdm.noise_var_for_axis(mid, params, cfg))
        if ber > target:
            lo = mid
        else:
            hi = mid
    return 0.5 * (lo + hi)


def _agreement_curve(taps, model, cfg, seed, min_bits=10_000_000, n_points=6,
                     ber_span=(2e-2, 5e-5)):
    params = ofdm.bussgang(model)
    a0 = _axis_for_theory_ber(taps, params, cfg, ber_span[0])
    a1 = _axis_for_theory_ber(taps, params, cfg, ber_span[1])
    axis = np.linspace(a0, a1, n_points)
    noise = [ofdm.noise_var_for_axis(a, params, cfg) for a in axis]
    frames = math.ceil(min_bits / cfg.bits_per_frame)
    return ofdm.ber_montecarlo(taps, model, cfg, noise, frames=frames, seed=seed)


def _within_binomial(result, min_ber=1e-4):
    checked, fails, detail = 0, 0, []
    for sim, theo in zip(result.ber_sim, result.ber_theory):
        if theo < min_ber:
            continue
        checked += 1
        half = 1.96 * math.sqrt(theo * (1.0 - theo) / result.bits_per_point)
        if abs(sim - theo) > half:
            fails += 1
            detail.append(f"sim={sim:.3e} theo={theo:.3e} ci={half:.2e}")
    return checked, fails, detail


def b2_taps_ir():
    bank = ordering_bank("ir", 1, "r2")
    cir = ch.bin_rays(bank.records_for("B2"), ch.DEFAULT_BIN_WIDTH_NS)
    return ch.top_l_taps(cir, 7).rebased()


def test_criterion_4_ber_theory_sim_agreement():
    model = ofdm.ClippingModel.from_bias_db(19.19)
    channels = {"flat": ofdm.unit_taps(), "B2-taps": b2_taps_ir()}
    total_checked, total_fails, notes = 0, 0, []
    for name, taps in channels.items():
        for m in (4, 64):
            cfg = ofdm.OfdmConfig(n_subcarriers=512, qam_order=m,
                                  cp_len=max(7, taps.span))
            res = _agreement_curve(taps, model, cfg, seed=40 + m)
            checked, fails, detail = _within_binomial(res)
            total_checked += checked
            total_fails += fails
            if fails:
                notes.append(f"{name}/M{m}: {detail}")
    record_criterion(
        "criterion 4: BER theory/simulation agreement",
        total_fails == 0 and total_checked >= 16,
        f"{total_checked} swept points >= 1e-4 inside the 95% binomial interval"
        + ("; " + " | ".join(notes) if notes else ""),
    )


def test_criterion_5_qpsk_sanity():
    model = ofdm.ClippingModel.unclipped(sigma_drive_ma=ofdm.DEFAULT_SIGMA_DRIVE_MA,
                                         bias_ma=400.0)
    cfg = ofdm.OfdmConfig(n_subcarriers=512, qam_order=4, cp_len=7)
    res = _agreement_curve(ofdm.unit_taps(), model, cfg, seed=77)
    fails = 0
    for axis_db, sim in zip(res.axis_db, res.ber_sim):
        expected = float(ofdm.qfunc(math.sqrt(2.0 * 10 ** (axis_db / 10.0))))
        if expected < 1e-4:
            continue
        half = 1.96 * math.sqrt(expected * (1 - expected) / res.bits_per_point)
        if abs(sim - expected) > half:
            fails += 1
    record_criterion(
        "criterion 5: unclipped 4-QAM matches Q(sqrt(2 Eb/N0))",
        fails == 0,
        f"{len(res.axis_db)} points, bits/point={res.bits_per_point}",
    )


# --------------------------------------------------------------------------
# 6/7. fresh-trace channel structure
# --------------------------------------------------------------------------

def test_criterion_6_channel_orderings():
    failures = []
    summary = {}
    for band in ("ir", "vl"):
        for seed in SEEDS:
            stats = {det: s for det, (_, s) in pair_stats(band, seed).items()}
            h0 = {d: s.dc_gain for d, s in stats.items()}
            tau = {d: s.rms_delay_spread_ns for d, s in stats.items()}
            rho = {d: s.flatness for d, s in stats.items()}
            ok = (
                h0["B2"] > h0["A3"] > h0["C1"]
                and tau["A3"] > tau["C1"] > tau["B2"]
                and rho["B2"] > rho["C1"] > rho["A3"]
            )
            if not ok:
                failures.append(f"{band}/seed{seed}: H0={h0} tau={tau} rho={rho}")
            summary[f"{band}{seed}"] = ok
    record_criterion(
        "criterion 6: qualitative channel orderings (3 seeds, both bands)",
        not failures,
        "all orderings hold" if not failures else "; ".join(failures),
    )


def test_criterion_7_top7_tap_power():
    fracs = {}
    for src, det in PAIRS:
        bank = ordering_bank("ir", 1, src)
        cir = ch.bin_rays(bank.records_for(det), ch.DEFAULT_BIN_WIDTH_NS)
        fracs[det] = ch.top_l_taps(cir, 7).fraction
    record_criterion(
        "criterion 7: top-7 taps keep >= 80% optical power (IR)",
        all(f >= 0.80 for f in fracs.values()),
        ", ".join(f"{d}={f:.3f}" for d, f in fracs.items()),
    )


# --------------------------------------------------------------------------
# 8. seat-gap property on fresh traces
# --------------------------------------------------------------------------

def _sim_crossing(taps, model, cfg, seed, level=1e-3, bits=2_000_000):
    params = ofdm.bussgang(model)
    centre = _axis_for_theory_ber(taps, params, cfg, level)
    axis = centre + np.arange(-2.0, 2.1, 1.0)
    noise = [ofdm.noise_var_for_axis(a, params, cfg) for a in axis]
    frames = math.ceil(bits / cfg.bits_per_frame)
    res = ofdm.ber_montecarlo(taps, model, cfg, noise, frames=frames, seed=seed)
    cross = cli._ber_crossing(res.axis_db, res.ber_sim, level)
    return cross if cross is not None else centre


def test_criterion_8_seat_gap():
    model = ofdm.ClippingModel.from_bias_db(19.19)
    gaps = {}
    ok = True
    for band in ("ir", "vl"):
        taps = {}
        for src, det in PAIRS:
            bank = ordering_bank(band, 1, src)
            cir = ch.bin_rays(bank.records_for(det), ch.DEFAULT_BIN_WIDTH_NS)
            taps[det] = ch.top_l_taps(cir, 7).rebased()
        for m in (4, 64):
            span = max(7, max(t.span for t in taps.values()))
            cfg = ofdm.OfdmConfig(n_subcarriers=512, qam_order=m, cp_len=span)
            cross = {
                det: _sim_crossing(taps[det], model, cfg, seed=80 + m)
                for det in taps
            }
            g_c1 = cross["C1"] - cross["B2"]
            g_a3 = cross["A3"] - cross["B2"]
            gaps[f"{band}/M{m}"] = (g_c1, g_a3)
            ok &= g_c1 >= 8.0 and g_a3 >= 8.0
    record_criterion(
        "criterion 8: seat B at least 8 dB ahead at BER 1e-3",
        ok,
        "; ".join(f"{k}: C1+{v[0]:.1f} dB, A3+{v[1]:.1f} dB" for k, v in gaps.items()),
    )


# --------------------------------------------------------------------------
# 9. determinism and persistence
# --------------------------------------------------------------------------

def test_criterion_9_determinism_and_persistence(tmp_path):
    cfg = ScenarioConfig()
    cfg.seed = 33
    cfg.seats = {"29B": list(sc.SEAT_POSITIONS["29B"])}
    for spec in cfg.sources.values():
        spec["chip_rows"] = spec["chip_cols"] = 1
    cfg.detectors = {"B2": {"position": list(sc.PD_POSITIONS["B2"]), "normal": [0, 1, 0],
                            "width_cm": 10.0, "height_cm": 10.0}}
    cfg.source_select = ["r2"]
    cfg.trace.rays_per_chip = 4000
    config_path = tmp_path / "scenario.json"
    cfg.to_json(config_path)

    outputs = []
    for sub in ("a", "b"):
        out = tmp_path / sub
        assert cli.main(["trace", "--config", str(config_path), "--out", str(out)]) == 0
        assert cli.main(["characterize", "--rdb", str(out / "rdb_ir_r2.lrdb"),
                         "--config", str(config_path), "--out", str(out)]) == 0
        assert cli.main(["ber", "--cir", str(out / "cir_ir_r2_B2.csv"),
                         "--frames", "30", "--sweep-start", "-45", "--sweep-stop", "-35",
                         "--sweep-step", "5", "--out", str(out)]) == 0
        outputs.append({
            "rdb": (out / "rdb_ir_r2.lrdb").read_bytes(),
            "stats": (out / "stats_ir_r2.csv").read_bytes(),
            "cir": (out / "cir_ir_r2_B2.csv").read_bytes(),
            "ber": (out / "ber_ir_r2_B2_m4.csv").read_bytes(),
        })
    identical = all(outputs[0][k] == outputs[1][k] for k in outputs[0])

    bank = load_rdb(tmp_path / "a" / "rdb_ir_r2.lrdb")
    resaved = tmp_path / "resaved.lrdb"
    save_rdb(bank, resaved)
    lossless = resaved.read_bytes() == outputs[0]["rdb"]
    record_criterion(
        "criterion 9: determinism and lossless persistence",
        identical and lossless,
        f"byte-identical RDB/CSVs across reruns: {identical}; round-trip: {lossless}",
    )
