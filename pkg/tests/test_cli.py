import json
from pathlib import Path

import numpy as np
import pytest

from lifisim import cli
from lifisim.config import ConfigError, ScenarioConfig, drive_sigma_ma
from lifisim.rdb import RECORD_DTYPE, RayDataBank, save_rdb


def tiny_config(tmp_path, band="ir", seed=7):
    """Desk-scale scenario: single-chip sources, one seat, large detectors."""
    cfg = ScenarioConfig()
    cfg.band = band
    cfg.seed = seed
    cfg.seats = {"31B": [268.199, 42.643, 270.0]}
    for spec in cfg.sources.values():
        spec["chip_rows"] = spec["chip_cols"] = 1
    cfg.detectors = {
        k: {"position": list(v), "normal": [0, 1, 0], "width_cm": 10.0, "height_cm": 10.0}
        for k, v in [("C1", (221.699, 100.443, 408.0)), ("B2", (292.199, 100.443, 408.0))]
    }
    cfg.source_select = ["r2"]
    cfg.trace.rays_per_chip = 3000
    path = tmp_path / "scenario.json"
    cfg.to_json(path)
    return cfg, path


def test_config_json_roundtrip(tmp_path):
    cfg, path = tiny_config(tmp_path)
    loaded = ScenarioConfig.from_json(path)
    assert loaded.digest() == cfg.digest()
    assert loaded.trace.rays_per_chip == 3000


def test_config_rejects_unknown_fields(tmp_path):
    path = tmp_path / "bad.json"
    path.write_text(json.dumps({"bandz": "ir"}))
    with pytest.raises(ConfigError, match="bandz"):
        ScenarioConfig.from_json(path)
    path.write_text(json.dumps({"trace": {"raysss": 5}}))
    with pytest.raises(ConfigError, match="raysss"):
        ScenarioConfig.from_json(path)
    path.write_text("{not json")
    with pytest.raises(ConfigError, match="1:"):
        ScenarioConfig.from_json(path)


def test_config_band_validation():
    with pytest.raises(ConfigError):
        ScenarioConfig(band="uv")
    with pytest.raises(ConfigError):
        ScenarioConfig(source_select=["r9"])


def test_drive_sigma_inversion():
    assert drive_sigma_ma(400.0, 19.19) == pytest.approx(44.18, abs=0.01)
    with pytest.raises(ConfigError):
        drive_sigma_ma(400.0, 0.0)


def test_trace_cmd_writes_bank_and_reports_hits(tmp_path, capsys):
    cfg, path = tiny_config(tmp_path)
    out = tmp_path / "run"
    rc = cli.main(["trace", "--config", str(path), "--out", str(out)])
    assert rc == 0
    text = capsys.readouterr().out
    assert "i_hit[r2->B2]" in text
    assert (out / "rdb_ir_r2.lrdb").exists()
    assert (out / "scenario.json").exists()


def test_trace_cmd_missing_curve_file(tmp_path, capsys):
    cfg, path = tiny_config(tmp_path)
    data = json.loads(path.read_text())
    data["material_curves"] = {"white_plastic": str(tmp_path / "nope.csv")}
    path.write_text(json.dumps(data))
    rc = cli.main(["trace", "--config", str(path), "--out", str(tmp_path / "r")])
    assert rc == 2
    assert "nope.csv" in capsys.readouterr().err


def test_trace_determinism_byte_identical(tmp_path):
    cfg, path = tiny_config(tmp_path)
    out1, out2 = tmp_path / "a", tmp_path / "b"
    assert cli.main(["trace", "--config", str(path), "--out", str(out1)]) == 0
    assert cli.main(["trace", "--config", str(path), "--out", str(out2)]) == 0
    a = (out1 / "rdb_ir_r2.lrdb").read_bytes()
    b = (out2 / "rdb_ir_r2.lrdb").read_bytes()
    assert a == b


def test_characterize_cmd_outputs(tmp_path):
    cfg, path = tiny_config(tmp_path)
    out = tmp_path / "run"
    assert cli.main(["trace", "--config", str(path), "--out", str(out)]) == 0
    rc = cli.main(["characterize", "--rdb", str(out / "rdb_ir_r2.lrdb"),
                   "--config", str(out / "scenario.json"), "--out", str(out)])
    assert rc == 0
    stats = out / "stats_ir_r2.csv"
    meta, header, rows = cli._read_csv(stats)
    assert header == ["S_R", "i_hit", "H0", "PL_db", "tau_mean_ns", "tau_rms_ns",
                      "rho", "H0_los", "los_delay_ns"]
    assert meta["digest"] == cfg.digest()
    by_pair = {r[0]: r for r in rows}
    assert float(by_pair["r2->B2"][2]) > 0
    assert (out / "cir_ir_r2_B2.csv").exists()
    assert (out / "cfr_ir_r2_B2.csv").exists()


def test_characterize_digest_mismatch(tmp_path, capsys):
    cfg, path = tiny_config(tmp_path)
    out = tmp_path / "run"
    assert cli.main(["trace", "--config", str(path), "--out", str(out)]) == 0
    other = ScenarioConfig()
    other.seed = 12345
    other.to_json(out / "scenario.json")  # stale bank vs new scenario
    rc = cli.main(["characterize", "--rdb", str(out / "rdb_ir_r2.lrdb"),
                   "--out", str(out)])
    assert rc == 3
    assert "digest" in capsys.readouterr().err


def test_characterize_single_ray_bank(tmp_path):
    rec = np.zeros(1, dtype=RECORD_DTYPE)
    rec["power_w"] = 1e-5
    rec["t_ns"] = 2.0
    bank = RayDataBank(records=rec, meta={
        "seed": 1, "band": "ir", "source_id": "r2", "detector_ids": ["B2"],
        "source_power_w": 1.0, "digest": "x",
    }).finalize()
    path = tmp_path / "one.lrdb"
    save_rdb(bank, path)
    rc = cli.main(["characterize", "--rdb", str(path), "--out", str(tmp_path)])
    assert rc == 0
    _, header, rows = cli._read_csv(tmp_path / "stats_ir_r2.csv")
    rec = dict(zip(header, rows[0]))
    assert float(rec["rho"]) == 1.0
    assert float(rec["tau_rms_ns"]) == 0.0
    assert int(rec["i_hit"]) == 1


def test_ber_cmd_and_report(tmp_path):
    cfg, path = tiny_config(tmp_path)
    out = tmp_path / "run"
    assert cli.main(["trace", "--config", str(path), "--out", str(out)]) == 0
    assert cli.main(["characterize", "--rdb", str(out / "rdb_ir_r2.lrdb"),
                     "--config", str(out / "scenario.json"), "--out", str(out)]) == 0
    rc = cli.main([
        "ber", "--cir", str(out / "cir_ir_r2_B2.csv"), "--frames", "40",
        "--sweep-start", "-45", "--sweep-stop", "-25", "--sweep-step", "5",
        "--axis-shift", "-100", "--out", str(out),
    ])
    assert rc == 0
    meta, header, rows = cli._read_csv(out / "ber_ir_r2_B2_m4.csv")
    assert header == ["snr_db", "ber_sim", "ber_theory", "bits", "frames"]
    sims = [float(r[1]) for r in rows]
    theos = [float(r[2]) for r in rows]
    assert theos == sorted(theos, reverse=True)  # monotone decreasing theory
    _, sub_header, sub_rows = cli._read_csv(out / "subc_ir_r2_B2_m4.csv")
    assert sub_header == ["k", "gamma_db", "Rk_bps", "eta"]
    assert len(sub_rows) == 255

    rc = cli.main(["report", "--run-dir", str(out)])
    assert rc == 0
    report = (out / "report.md").read_text()
    assert "H0:" in report and "rho:" in report
    assert "BER 1e-3" in report
    # idempotent regeneration
    assert cli.main(["report", "--run-dir", str(out)]) == 0
    assert (out / "report.md").read_text() == report


def test_report_empty_dir(tmp_path, capsys):
    rc = cli.main(["report", "--run-dir", str(tmp_path)])
    assert rc == 0
    assert "empty report" in capsys.readouterr().out
    assert (tmp_path / "report.md").exists()


def test_report_refuses_mixed_digests(tmp_path):
    (tmp_path / "stats_ir_r1.csv").write_text(
        "# digest=aaa\n# band=ir\nS_R,i_hit,H0,PL_db,tau_mean_ns,tau_rms_ns,rho,H0_los,los_delay_ns\n"
        "r1->C1,5,1e-5,50,2,0.1,0.9,1e-5,2.2\n")
    (tmp_path / "stats_ir_r2.csv").write_text(
        "# digest=bbb\n# band=ir\nS_R,i_hit,H0,PL_db,tau_mean_ns,tau_rms_ns,rho,H0_los,los_delay_ns\n"
        "r2->B2,5,1e-5,50,2,0.1,0.9,1e-5,2.2\n")
    assert cli.main(["report", "--run-dir", str(tmp_path)]) == 3
    assert cli.main(["report", "--run-dir", str(tmp_path), "--allow-mixed"]) == 0


def test_cir_csv_roundtrip(tmp_path):
    cfg, path = tiny_config(tmp_path)
    out = tmp_path / "run"
    assert cli.main(["trace", "--config", str(path), "--out", str(out)]) == 0
    assert cli.main(["characterize", "--rdb", str(out / "rdb_ir_r2.lrdb"),
                     "--config", str(out / "scenario.json"), "--out", str(out)]) == 0
    from lifisim import channel as ch
    from lifisim.rdb import load_rdb
    cir = cli.read_cir_csv(out / "cir_ir_r2_B2.csv")
    bank = load_rdb(out / "rdb_ir_r2.lrdb")
    direct = ch.bin_rays(bank.records_for("B2"), 0.2)
    np.testing.assert_allclose(cir.bins, direct.bins, rtol=1e-12)
    np.testing.assert_allclose(cir.per_bounce, direct.per_bounce, rtol=1e-12)
    assert cir.t_first_ns == pytest.approx(direct.t_first_ns, rel=1e-12)
