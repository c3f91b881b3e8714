"""Batch driver: trace, characterize, ber and report subcommands.

Every artifact written to an output directory carries the scenario digest and
seed, and all commands are deterministic given (config, seed).  Exit codes:
0 success, 2 configuration error, 3 runtime error.
"""

from __future__ import annotations

import argparse
import json
import os
import sys
from pathlib import Path

import numpy as np

from . import channel, ofdm, photometry, rdb
from .config import ConfigError, ScenarioConfig
from .raytracer import TraceConfig, trace

FMT = "{:.17g}"


def _fmt(x) -> str:
    return FMT.format(float(x))


def _out_dir(args, cfg: ScenarioConfig | None = None) -> Path:
    root = args.out or os.environ.get("LIFISIM_OUT") or (cfg.output_dir if cfg else "runs")
    path = Path(root)
    path.mkdir(parents=True, exist_ok=True)
    return path


def _load_config(args) -> ScenarioConfig:
    cfg = ScenarioConfig.from_json(args.config) if args.config else ScenarioConfig()
    if getattr(args, "band", None):
        cfg = cfg.with_band(args.band)
    if getattr(args, "seed", None) is not None:
        cfg.seed = args.seed
    return cfg


def _write_csv(path: Path, header: str, rows, meta: dict) -> None:
    with open(path, "w", newline="") as fh:
        for key in sorted(meta):
            fh.write(f"# {key}={meta[key]}\n")
        fh.write(header + "\n")
        for row in rows:
            fh.write(",".join(row) + "\n")


def _read_csv(path: Path) -> tuple[dict, list[str], list[list[str]]]:
    meta, header, rows = {}, None, []
    with open(path) as fh:
        for line in fh:
            line = line.rstrip("\n")
            if not line:
                continue
            if line.startswith("#"):
                key, _, val = line[1:].strip().partition("=")
                meta[key.strip()] = val
            elif header is None:
                header = line.split(",")
            else:
                rows.append(line.split(","))
    if header is None:
        raise IOError(f"{path}: no header row")
    return meta, header, rows


# -- trace -------------------------------------------------------------------

def cmd_trace(args) -> int:
    cfg = _load_config(args)
    out = _out_dir(args, cfg)
    scene = cfg.build_scene()
    digest = cfg.digest()
    cfg.to_json(out / "scenario.json")
    tc = TraceConfig(
        band=cfg.band,
        rays_per_chip=cfg.trace.rays_per_chip,
        nu_s=cfg.trace.nu_s,
        kappa_max=cfg.trace.kappa_max,
        min_rel_intensity=cfg.trace.min_rel_intensity,
        seed=cfg.seed,
        stratified=cfg.trace.stratified,
        max_segment_budget=cfg.trace.max_segment_budget,
    )
    for sid in cfg.active_sources():
        bank = trace(scene, tc, source_id=sid)
        bank.meta["digest"] = digest
        path = out / f"rdb_{cfg.band}_{sid}.lrdb"
        rdb.save_rdb(bank, path)
        if args.export_csv:
            rdb.export_csv(bank, path.with_suffix(".csv"))
        print(f"wrote {path} ({bank.records.size} records)")
        for did in bank.detector_ids:
            print(f"  i_hit[{sid}->{did}] = {bank.i_hit(did)}")
    return 0


# -- characterize --------------------------------------------------------------

def cmd_characterize(args) -> int:
    bank_path = Path(args.rdb)
    cfg = None
    expect = None
    config_path = args.config or (bank_path.parent / "scenario.json")
    if Path(config_path).exists():
        cfg = ScenarioConfig.from_json(config_path)
        expect = cfg.digest()
    bank = rdb.load_rdb(bank_path, expect_digest=expect)
    out = _out_dir(args, cfg)
    band = bank.meta.get("band", "ir")
    sid = bank.meta.get("source_id", "src")
    meta = {"digest": bank.meta.get("digest", ""), "seed": bank.seed, "band": band,
            "source_id": sid, "bin_width_ns": args.bin_width}
    scene = cfg.build_scene() if cfg is not None else None

    rows = []
    for did in bank.detector_ids:
        rec = bank.records_for(did)
        if rec.size == 0:
            print(f"note: no records for detector {did}")
            rows.append([f"{sid}->{did}", "0"] + [""] * 7)
            continue
        cir = channel.bin_rays(rec, args.bin_width)
        stats = channel.channel_stats(cir, rec.size, float(bank.meta.get("source_power_w", 1.0)))
        h0_los = delay_los = float("nan")
        if scene is not None:
            src = scene.source(sid)
            det = scene.detector(did)
            m = photometry.lambertian_order(cfg.source_fwhm_deg)
            h0_los, delay_los = channel.analytical_los(src, det, m)
            h0_los /= 1.0  # already a gain; detector area is in the formula
        rows.append(
            [
                f"{sid}->{did}",
                str(stats.i_hit),
                _fmt(stats.dc_gain),
                _fmt(stats.path_loss_db),
                _fmt(stats.mean_delay_ns),
                _fmt(stats.rms_delay_spread_ns),
                _fmt(stats.flatness),
                _fmt(h0_los),
                _fmt(delay_los),
            ]
        )
        _write_cir_csv(out / f"cir_{band}_{sid}_{did}.csv", cir, meta)
        _write_cfr_csv(out / f"cfr_{band}_{sid}_{did}.csv", cir, meta)
    stats_path = out / f"stats_{band}_{sid}.csv"
    _write_csv(
        stats_path,
        "S_R,i_hit,H0,PL_db,tau_mean_ns,tau_rms_ns,rho,H0_los,los_delay_ns",
        rows,
        meta,
    )
    print(f"wrote {stats_path}")
    return 0


def _write_cir_csv(path: Path, cir: channel.DiscreteCir, meta: dict) -> None:
    n_orders = cir.per_bounce.shape[0] if cir.per_bounce is not None else 0
    header = "t_ns,power_w" + "".join(f",kappa{k}_w" for k in range(n_orders))
    local = dict(meta)
    local["t_first_ns"] = _fmt(cir.t_first_ns)
    local["bin_width_ns"] = _fmt(cir.bin_width_ns)
    rows = []
    times = cir.times_ns
    for n in range(cir.n_bins):
        row = [_fmt(times[n]), _fmt(cir.bins[n])]
        for k in range(n_orders):
            row.append(_fmt(cir.per_bounce[k, n]))
        rows.append(row)
    _write_csv(path, header, rows, local)


def _write_cfr_csv(path: Path, cir: channel.DiscreteCir, meta: dict) -> None:
    response = channel.cfr(cir)
    freqs, mags = response.single_sided()
    rows = []
    for f, m in zip(freqs, mags):
        db = 20.0 * np.log10(m) if m > 0 else float("-inf")
        rows.append([_fmt(f), _fmt(m), _fmt(db)])
    _write_csv(path, "f_hz,mag,mag_db", rows, meta)


def read_cir_csv(path) -> channel.DiscreteCir:
    meta, header, rows = _read_csv(Path(path))
    data = np.array([[float(v) for v in row] for row in rows])
    bins = data[:, 1]
    per_bounce = data[:, 2:].T.copy() if data.shape[1] > 2 else None
    return channel.DiscreteCir(
        bins=bins,
        bin_width_ns=float(meta.get("bin_width_ns", channel.DEFAULT_BIN_WIDTH_NS)),
        t_first_ns=float(meta.get("t_first_ns", data[0, 0])),
        per_bounce=per_bounce,
    )


# -- ber -----------------------------------------------------------------------

def cmd_ber(args) -> int:
    cir_path = Path(args.cir)
    meta, _, _ = _read_csv(cir_path)
    cir = read_cir_csv(cir_path)
    taps = channel.top_l_taps(cir, args.taps).rebased()
    cfg = ofdm.OfdmConfig(
        n_subcarriers=args.n, qam_order=args.m, cp_len=max(args.cp, taps.span)
    )
    if cfg.cp_len != args.cp:
        print(f"note: cyclic prefix grown to {cfg.cp_len} to cover the tap span")
    if cfg.cp_len < taps.L:
        raise ofdm.OfdmError("cyclic prefix shorter than the tap count")
    model = (
        ofdm.ClippingModel.from_bias_db(args.bias_db, args.bias_ma, args.i_min, args.i_max)
        if args.bias_db is not None
        else ofdm.ClippingModel(args.i_min, args.i_max, args.bias_ma)
    )
    params = ofdm.bussgang(model)
    axis = np.arange(args.sweep_start, args.sweep_stop + 1e-9, args.sweep_step)
    shift = args.axis_shift
    noise_vars = [ofdm.noise_var_for_axis(a - shift, params, cfg) for a in axis]
    result = ofdm.ber_montecarlo(
        taps, model, cfg, noise_vars, frames=args.frames, seed=args.seed, axis_shift_db=shift
    )
    out = _out_dir(args)
    tag = f"{cir_path.stem.replace('cir_', '')}_m{args.m}"
    local = {
        "digest": meta.get("digest", ""),
        "seed": args.seed,
        "taps": taps.L,
        "tap_fraction": _fmt(taps.fraction),
        "eta_bits_per_s_per_hz": _fmt(result.spectral_efficiency),
        "axis_shift_db": _fmt(shift),
    }
    rows = [
        [_fmt(a), _fmt(bs), _fmt(bt), str(result.bits_per_point), str(result.frames)]
        for a, bs, bt in zip(result.axis_db, result.ber_sim, result.ber_theory)
    ]
    ber_path = out / f"ber_{tag}.csv"
    _write_csv(ber_path, "snr_db,ber_sim,ber_theory,bits,frames", rows, local)
    sub_rows = [
        [str(k + 1), _fmt(g), _fmt(result.bit_rate_bps), _fmt(result.spectral_efficiency)]
        for k, g in enumerate(result.gamma_db[-1])
    ]
    _write_csv(out / f"subc_{tag}.csv", "k,gamma_db,Rk_bps,eta", sub_rows, local)
    print(f"wrote {ber_path}")
    return 0


# -- report ----------------------------------------------------------------------

def _ber_crossing(axis_db, ber, level=1e-3):
    """Axis value where the BER curve crosses `level` (log-linear interpolation)."""
    axis_db = np.asarray(axis_db, dtype=float)
    ber = np.asarray(ber, dtype=float)
    ok = ber > 0
    axis_db, ber = axis_db[ok], ber[ok]
    if ber.size < 2 or ber.min() > level or ber.max() < level:
        return None
    logb = np.log10(ber)
    for i in range(len(ber) - 1):
        lo, hi = logb[i], logb[i + 1]
        target = np.log10(level)
        if (lo - target) * (hi - target) <= 0 and lo != hi:
            f = (target - lo) / (hi - lo)
            return float(axis_db[i] + f * (axis_db[i + 1] - axis_db[i]))
    return None


def cmd_report(args) -> int:
    run_dir = Path(args.run_dir)
    out_lines = ["# Run report", ""]
    stats_files = sorted(run_dir.glob("stats_*.csv"))
    ber_files = sorted(run_dir.glob("ber_*.csv"))
    if not stats_files and not ber_files:
        print(f"empty report: no stats or BER outputs under {run_dir}")
        (run_dir / "report.md").write_text("# Run report\n\n(no outputs found)\n")
        return 0

    digests = set()
    per_band: dict[str, dict[str, dict]] = {}
    for path in stats_files:
        meta, header, rows = _read_csv(path)
        digests.add(meta.get("digest", ""))
        band = meta.get("band", "?")
        for row in rows:
            rec = dict(zip(header, row))
            if rec.get("i_hit") in ("", "0"):
                continue
            per_band.setdefault(band, {})[rec["S_R"]] = rec
    if len(digests) > 1 and not args.allow_mixed:
        print(f"error: mixed scenario digests in {run_dir}: {sorted(digests)}", file=sys.stderr)
        return 3

    for band, pairs in sorted(per_band.items()):
        out_lines.append(f"## {band.upper()} band channels")
        out_lines.append("")
        out_lines.append("| S,R | i_hit | H0 | PL (dB) | tau_RMS (ns) | rho |")
        out_lines.append("|---|---|---|---|---|---|")
        for name, rec in sorted(pairs.items()):
            out_lines.append(
                f"| {name} | {rec['i_hit']} | {float(rec['H0']):.4g} | "
                f"{float(rec['PL_db']):.2f} | {float(rec['tau_rms_ns']):.4g} | "
                f"{float(rec['rho']):.4g} |"
            )
        orderings = _orderings(pairs)
        out_lines.extend(["", *orderings, ""])

    if ber_files:
        out_lines.append("## BER sweeps")
        out_lines.append("")
        crossings = {}
        for path in ber_files:
            meta, header, rows = _read_csv(path)
            digests.add(meta.get("digest", ""))
            axis = [float(r[0]) for r in rows]
            sim = [float(r[1]) for r in rows]
            cross = _ber_crossing(axis, sim)
            crossings[path.stem] = cross
            txt = f"{cross:.2f} dB" if cross is not None else "not reached"
            out_lines.append(f"- {path.name}: BER 1e-3 at {txt}"
                             f" (eta = {float(meta.get('eta_bits_per_s_per_hz', 'nan')):.3f})")
        gaps = _seat_gaps(crossings)
        if gaps:
            out_lines.append("")
            out_lines.extend(gaps)
    report = "\n".join(out_lines) + "\n"
    (run_dir / "report.md").write_text(report)
    print(f"wrote {run_dir / 'report.md'}")
    return 0


def _orderings(pairs: dict) -> list[str]:
    def seat(name):
        return name.split("->")[-1]

    lines = []
    by_h0 = sorted(pairs.items(), key=lambda kv: -float(kv[1]["H0"]))
    lines.append("H0: " + " > ".join(seat(k) for k, _ in by_h0))
    by_rms = sorted(pairs.items(), key=lambda kv: -float(kv[1]["tau_rms_ns"]))
    lines.append("tau_RMS: " + " > ".join(seat(k) for k, _ in by_rms))
    by_rho = sorted(pairs.items(), key=lambda kv: -float(kv[1]["rho"]))
    lines.append("rho: " + " > ".join(seat(k) for k, _ in by_rho))
    return lines


def _seat_gaps(crossings: dict) -> list[str]:
    lines = []
    by_seat = {}
    for stem, cross in crossings.items():
        if cross is None:
            continue
        parts = stem.split("_")  # ber_<band>_<src>_<det>_m<M>
        if len(parts) >= 5:
            by_seat.setdefault((parts[1], parts[4]), {})[parts[3]] = cross
    for (band, m), seats in sorted(by_seat.items()):
        ref = seats.get("B2")
        if ref is None:
            continue
        for det, val in sorted(seats.items()):
            if det == "B2":
                continue
            lines.append(
                f"seat gap {band}/{m}: {det} needs {val - ref:+.2f} dB vs B2 at BER 1e-3"
            )
    return lines


def main(argv=None) -> int:
    parser = argparse.ArgumentParser(prog="lifisim", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("trace", help="run the ray tracer and persist ray data banks")
    p.add_argument("--config", help="scenario JSON (defaults apply when omitted)")
    p.add_argument("--band", choices=["ir", "vl"])
    p.add_argument("--seed", type=int)
    p.add_argument("--export-csv", action="store_true",
                   help="also write each bank as CSV with identical columns")
    p.add_argument("--out")
    p.set_defaults(func=cmd_trace)

    p = sub.add_parser("characterize", help="bin a ray data bank into CIR/CFR/stats")
    p.add_argument("--rdb", required=True)
    p.add_argument("--config")
    p.add_argument("--bin-width", type=float, default=channel.DEFAULT_BIN_WIDTH_NS)
    p.add_argument("--out")
    p.set_defaults(func=cmd_characterize)

    p = sub.add_parser("ber", help="run a BER sweep over the strongest CIR taps")
    p.add_argument("--cir", required=True, help="CIR CSV from characterize")
    p.add_argument("--taps", type=int, default=7)
    p.add_argument("--m", type=int, default=4)
    p.add_argument("--n", type=int, default=512)
    p.add_argument("--cp", type=int, default=7)
    p.add_argument("--i-min", type=float, default=100.0)
    p.add_argument("--i-max", type=float, default=700.0)
    p.add_argument("--bias-ma", type=float, default=400.0)
    p.add_argument("--bias-db", type=float, default=None)
    p.add_argument("--frames", type=int, default=2000)
    p.add_argument("--seed", type=int, default=1)
    p.add_argument("--sweep-start", type=float, default=0.0)
    p.add_argument("--sweep-stop", type=float, default=20.0)
    p.add_argument("--sweep-step", type=float, default=2.0)
    p.add_argument("--axis-shift", type=float, default=0.0,
                   help="axis relabel, e.g. -100 for raw trace gains")
    p.add_argument("--out")
    p.set_defaults(func=cmd_ber)

    p = sub.add_parser("report", help="aggregate stats and BER outputs")
    p.add_argument("--run-dir", required=True)
    p.add_argument("--allow-mixed", action="store_true")
    p.set_defaults(func=cmd_report)

    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 2
    except Exception as exc:  # runtime failures map to exit code 3
        print(f"error: {exc}", file=sys.stderr)
        return 3


if __name__ == "__main__":
    sys.exit(main())
