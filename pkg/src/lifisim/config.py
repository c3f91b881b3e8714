"""Scenario configuration: JSON-loadable description of one simulation run.

A scenario bundles the cabin variant and dimensions, seat/source/detector
placements, material assignments, trace parameters and link parameters.  All
defaults reproduce the reference narrow-body layout; every field can be
overridden from a JSON file.
"""

from __future__ import annotations

import hashlib
import json
import math
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path

import numpy as np

from . import photometry, scene


class ConfigError(ValueError):
    """Raised for malformed or inconsistent scenario configurations."""


BAND_TRACE_DEFAULTS = {
    # band: (max bounce order, minimum relative ray intensity)
    photometry.IR_BAND: (4, 1e-4),
    photometry.VL_BAND: (6, 1e-5),
}


@dataclass
class CabinSpec:
    variant: str = "simplified"  # or "tessellated-realistic"
    width: float = scene.CABIN_WIDTH
    height: float = scene.CABIN_HEIGHT
    length: float = scene.CABIN_LENGTH
    tessellation_segments: int = 32


@dataclass
class TraceSpec:
    rays_per_chip: int = 10_000
    nu_s: int = 5
    kappa_max: int | None = None          # None: band default
    min_rel_intensity: float | None = None  # None: band default
    stratified: bool = True
    max_segment_budget: float = 5e9


@dataclass
class OfdmSpec:
    n_subcarriers: int = 512
    qam_order: int = 4
    cp_len: int = 7
    n_taps: int = 7
    bandwidth_hz: float = 5e9
    channel_bandwidth_hz: float = 5e9
    i_min_ma: float = 100.0
    i_max_ma: float = 700.0
    bias_ma: float = 400.0
    bias_db: float = 19.19


def _default_sources() -> dict:
    return {
        sid: {
            "position": list(pos),
            "aim_deg": scene.READING_LIGHT_AIM_DEG[sid],
            "chip_rows": 4,
            "chip_cols": 4,
            "chip_pitch_cm": 0.4,
            "power_w": 16.0,
        }
        for sid, pos in scene.READING_LIGHT_POSITIONS.items()
    }


def _default_detectors() -> dict:
    return {
        did: {"position": list(pos), "normal": [0.0, 1.0, 0.0], "width_cm": 1.0, "height_cm": 1.0}
        for did, pos in scene.PD_POSITIONS.items()
    }


@dataclass
class ScenarioConfig:
    band: str = photometry.IR_BAND
    cabin: CabinSpec = field(default_factory=CabinSpec)
    seats: dict = field(default_factory=lambda: {k: list(v) for k, v in scene.SEAT_POSITIONS.items()})
    sources: dict = field(default_factory=_default_sources)
    detectors: dict = field(default_factory=_default_detectors)
    source_select: list = field(default_factory=list)  # empty: trace every source
    wall_material: str = "white_plastic"
    floor_material: str = "carpet"
    seat_material: str = "fabric"
    scatter_count: int = 5
    material_curves: dict = field(default_factory=dict)  # material name -> CSV path
    extra_surfaces: list = field(default_factory=list)  # {id, vertices, material}
    source_spectrum: str = "band"   # "band" | "flat" | CSV path
    source_fwhm_deg: float = 120.0
    detector_spectrum: str = "band"  # "band" | "flat" | CSV path
    detector_angular: str = "band"   # "band" | "cosine" | CSV path
    trace: TraceSpec = field(default_factory=TraceSpec)
    ofdm: OfdmSpec = field(default_factory=OfdmSpec)
    seed: int = 1
    output_dir: str = "runs"

    def __post_init__(self):
        if self.band not in (photometry.IR_BAND, photometry.VL_BAND):
            raise ConfigError(f"band must be 'ir' or 'vl', got {self.band!r}")
        for sid in self.source_select:
            if sid not in self.sources:
                raise ConfigError(f"source_select references unknown source {sid!r}")

    # -- resolution helpers ------------------------------------------------

    def kappa_max(self) -> int:
        if self.trace.kappa_max is not None:
            return int(self.trace.kappa_max)
        return BAND_TRACE_DEFAULTS[self.band][0]

    def min_rel_intensity(self) -> float:
        if self.trace.min_rel_intensity is not None:
            return float(self.trace.min_rel_intensity)
        return BAND_TRACE_DEFAULTS[self.band][1]

    def active_sources(self) -> list[str]:
        return list(self.source_select) if self.source_select else list(self.sources)

    def resolve_materials(self) -> dict:
        mats = photometry.default_materials(self.scatter_count)
        for name, path in self.material_curves.items():
            if not Path(path).exists():
                raise ConfigError(f"material curve file missing: {path}")
            curve = photometry.SpectralCurve.from_samples(photometry.load_curve_csv(path))
            mats[name] = photometry.MaterialSpectrum(curve, self.scatter_count)
        return mats

    def source_model(self) -> photometry.SourceModel:
        if self.source_spectrum == "band":
            spectrum = (
                photometry.ir_source_spectrum()
                if self.band == photometry.IR_BAND
                else photometry.vl_source_spectrum()
            )
        elif self.source_spectrum == "flat":
            spectrum = photometry.SpectralCurve.from_samples([(0.35, 1.0), (1.1, 1.0)])
        else:
            path = Path(self.source_spectrum)
            if not path.exists():
                raise ConfigError(f"source spectrum file missing: {path}")
            spectrum = photometry.SpectralCurve.from_samples(photometry.load_curve_csv(path))
        return photometry.SourceModel(
            spectrum=spectrum,
            directivity=photometry.AngularProfile(
                fallback_order=photometry.lambertian_order(self.source_fwhm_deg)
            ),
            fwhm_deg=self.source_fwhm_deg,
        )

    def detector_model(self) -> photometry.DetectorModel:
        band_model = photometry.detector_model(self.band)
        if self.detector_spectrum == "band":
            spectral = band_model.spectral_response
            peak = band_model.peak_wavelength_um
        elif self.detector_spectrum == "flat":
            spectral = photometry.SpectralCurve.from_samples([(0.2, 1.0), (2.0, 1.0)])
            peak = 0.9
        else:
            path = Path(self.detector_spectrum)
            if not path.exists():
                raise ConfigError(f"detector spectrum file missing: {path}")
            spectral = photometry.SpectralCurve.from_samples(photometry.load_curve_csv(path))
            peak = float(spectral.x[np.argmax(spectral.weight)])
        if self.detector_angular == "band":
            angular = band_model.angular_response
        elif self.detector_angular == "cosine":
            angular = photometry.AngularProfile(fallback_order=1.0)
        else:
            path = Path(self.detector_angular)
            if not path.exists():
                raise ConfigError(f"detector angular file missing: {path}")
            angular = photometry.AngularProfile(samples=photometry.load_curve_csv(path))
        return photometry.DetectorModel(
            spectral_response=spectral, angular_response=angular, peak_wavelength_um=peak
        )

    def build_scene(self) -> scene.CabinScene:
        return scene.build_simplified_cabin(self)

    # -- serialization -----------------------------------------------------

    def to_dict(self) -> dict:
        return asdict(self)

    def to_json(self, path=None) -> str:
        text = json.dumps(self.to_dict(), indent=2, sort_keys=True)
        if path is not None:
            Path(path).write_text(text + "\n")
        return text

    def digest(self) -> str:
        canonical = json.dumps(self.to_dict(), sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(canonical.encode()).hexdigest()[:16]

    @classmethod
    def from_dict(cls, data: dict) -> "ScenarioConfig":
        if not isinstance(data, dict):
            raise ConfigError("scenario config must be a JSON object")
        data = dict(data)
        known = {f for f in cls.__dataclass_fields__}
        unknown = set(data) - known
        if unknown:
            raise ConfigError(f"unknown config fields: {sorted(unknown)}")
        for key, sub in (("cabin", CabinSpec), ("trace", TraceSpec), ("ofdm", OfdmSpec)):
            if key in data and isinstance(data[key], dict):
                sub_known = set(sub.__dataclass_fields__)
                sub_unknown = set(data[key]) - sub_known
                if sub_unknown:
                    raise ConfigError(f"unknown {key} fields: {sorted(sub_unknown)}")
                try:
                    data[key] = sub(**data[key])
                except TypeError as exc:
                    raise ConfigError(f"bad {key} section: {exc}") from exc
        try:
            return cls(**data)
        except TypeError as exc:
            raise ConfigError(str(exc)) from exc

    @classmethod
    def from_json(cls, path) -> "ScenarioConfig":
        try:
            data = json.loads(Path(path).read_text())
        except json.JSONDecodeError as exc:
            raise ConfigError(f"{path}:{exc.lineno}:{exc.colno}: {exc.msg}") from exc
        except OSError as exc:
            raise ConfigError(f"cannot read config {path}: {exc}") from exc
        return cls.from_dict(data)

    def with_band(self, band: str) -> "ScenarioConfig":
        return replace(self, band=band)


def drive_sigma_ma(bias_ma: float, bias_db: float) -> float:
    """Drive-signal standard deviation implied by a bias and its dB setting.

    Inverts bias_db = 10*log10(r^2 + 1) with r = bias/sigma.
    """
    r2 = 10.0 ** (bias_db / 10.0) - 1.0
    if r2 <= 0:
        raise ConfigError("bias_db must exceed 0 dB")
    return bias_ma / math.sqrt(r2)
