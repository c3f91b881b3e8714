"""Spectral and angular characteristics of emitters, detectors and coatings.

All curves are tabulated relative weights: spectra over wavelength (micron),
angular profiles over polar angle (degrees).  Evaluation is piecewise linear
with zero weight outside the tabulated span.  Sampling consumes caller-supplied
uniform variates, so every random decision stays reproducible from the caller's
RNG stream.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

VL_BAND = "vl"
IR_BAND = "ir"


class CurveError(ValueError):
    """Raised for malformed tabulated curves."""


def _as_xy(samples) -> tuple[np.ndarray, np.ndarray]:
    arr = np.asarray(samples, dtype=float)
    if arr.ndim != 2 or arr.shape[1] != 2:
        raise CurveError("samples must be an (n, 2) table of (x, weight)")
    return np.ascontiguousarray(arr[:, 0]), np.ascontiguousarray(arr[:, 1])


@dataclass(frozen=True)
class SpectralCurve:
    """Relative weight versus wavelength in micron, linearly interpolated."""

    x: np.ndarray
    weight: np.ndarray

    def __post_init__(self):
        if self.x.size < 2:
            raise CurveError("need at least 2 samples")
        if not np.all(np.diff(self.x) > 0):
            raise CurveError("wavelengths must be strictly increasing")
        if np.any(self.weight < 0) or not np.all(np.isfinite(self.weight)):
            raise CurveError("weights must be finite and >= 0")

    @classmethod
    def from_samples(cls, samples) -> "SpectralCurve":
        x, w = _as_xy(samples)
        return cls(x, w)

    @property
    def span(self) -> tuple[float, float]:
        return float(self.x[0]), float(self.x[-1])

    def __call__(self, x):
        return evaluate(self, x)


@dataclass(frozen=True)
class AngularProfile:
    """Relative weight versus polar angle in degrees on [0, 90].

    Either a tabulated curve (normalized so weight(0) = 1) or, when no samples
    are given, the analytic generalized-Lambertian profile cos(theta)**order.
    """

    samples: np.ndarray | None = None
    fallback_order: float = 1.0

    def __post_init__(self):
        if self.samples is not None:
            x, w = _as_xy(self.samples)
            if x[0] < 0 or x[-1] > 90:
                raise CurveError("angles must lie in [0, 90] degrees")
            if not np.all(np.diff(x) > 0):
                raise CurveError("angles must be strictly increasing")
            if np.any(w < 0):
                raise CurveError("weights must be >= 0")
            if w[0] <= 0:
                raise CurveError("weight at 0 degrees must be positive")
            # normalize so the on-axis weight is exactly 1
            object.__setattr__(self, "samples", np.column_stack([x, w / w[0]]))
        elif self.fallback_order <= 0:
            raise CurveError("fallback Lambertian order must be positive")

    @property
    def is_tabulated(self) -> bool:
        return self.samples is not None

    def __call__(self, theta_deg):
        """Relative weight at polar angle(s) in degrees (0 beyond 90)."""
        theta_deg = np.asarray(theta_deg, dtype=float)
        if self.samples is not None:
            x, w = self.samples[:, 0], self.samples[:, 1]
            out = np.interp(theta_deg, x, w, left=w[0], right=0.0)
            return np.where(theta_deg > x[-1], 0.0, out)
        ct = np.cos(np.radians(np.clip(theta_deg, 0.0, 90.0)))
        out = np.where(theta_deg >= 90.0, 0.0, ct ** self.fallback_order)
        return out


@dataclass(frozen=True)
class MaterialSpectrum:
    """Coating reflectance curve plus its diffuse split count."""

    reflectance: SpectralCurve
    scatter_count: int = 5

    def __post_init__(self):
        if np.any(self.reflectance.weight > 1.0):
            raise CurveError("reflectance must lie in [0, 1]")
        if self.scatter_count < 1:
            raise CurveError("scatter count must be >= 1")


@dataclass(frozen=True)
class SourceModel:
    """Emitter: relative spectrum, angular directivity and beam FWHM."""

    spectrum: SpectralCurve
    directivity: AngularProfile
    fwhm_deg: float = 120.0

    def __post_init__(self):
        if not 0.0 < self.fwhm_deg < 180.0:
            raise CurveError("FWHM must lie in (0, 180) degrees")


@dataclass(frozen=True)
class DetectorModel:
    """Receiver: relative spectral response, angular response, peak wavelength."""

    spectral_response: SpectralCurve
    angular_response: AngularProfile
    peak_wavelength_um: float

    def __post_init__(self):
        peak = evaluate(self.spectral_response, self.peak_wavelength_um)
        if not math.isclose(peak, 1.0, rel_tol=1e-9, abs_tol=1e-9):
            raise CurveError("spectral response must peak at 1 at the peak wavelength")


def evaluate(curve, x):
    """Piecewise-linear evaluation of a curve; zero outside its span."""
    if isinstance(curve, AngularProfile):
        return curve(x)
    xs, ws = curve.x, curve.weight
    x = np.asarray(x, dtype=float)
    inside = (x >= xs[0]) & (x <= xs[-1])
    return np.where(inside, np.interp(x, xs, ws), 0.0)


def lambertian_order(fwhm_deg: float) -> float:
    """Generalized-Lambertian order m for a given full-width-half-maximum.

    m = -ln 2 / ln cos(fwhm/2); 120 deg maps to the ideal diffuse m = 1.
    """
    if not 1.0 <= fwhm_deg < 180.0:
        raise ValueError("FWHM must lie in [1, 180) degrees")
    return -math.log(2.0) / math.log(math.cos(math.radians(fwhm_deg / 2.0)))


def _density_cdf(x: np.ndarray, w: np.ndarray) -> np.ndarray:
    """Trapezoid CDF of a piecewise-linear density at its knots."""
    seg = 0.5 * (w[1:] + w[:-1]) * np.diff(x)
    cdf = np.concatenate([[0.0], np.cumsum(seg)])
    total = cdf[-1]
    if total <= 0:
        raise CurveError("degenerate curve: zero total weight")
    return cdf / total


def _invert_piecewise_linear(x, w, cdf, u):
    """Exact inverse-CDF of a piecewise-linear density.

    Within a segment the CDF is quadratic; solve it analytically per sample.
    """
    u = np.asarray(u, dtype=float)
    j = np.clip(np.searchsorted(cdf, u, side="right") - 1, 0, x.size - 2)
    x0, x1 = x[j], x[j + 1]
    w0, w1 = w[j], w[j + 1]
    dx = x1 - x0
    total = 0.5 * (w[1:] + w[:-1]) * np.diff(x)
    total_sum = total.sum()
    a = (u - cdf[j]) * total_sum  # unnormalized mass to place inside segment j
    k = (w1 - w0) / dx
    with np.errstate(divide="ignore", invalid="ignore"):
        t_lin = a / w0
        disc = np.maximum(w0 * w0 + 2.0 * k * a, 0.0)
        t_quad = (np.sqrt(disc) - w0) / k
    t = np.where(np.abs(k) < 1e-300, t_lin, t_quad)
    t = np.where(~np.isfinite(t), 0.0, t)
    return x0 + np.clip(t, 0.0, dx)


def sample_wavelength(spectrum: SpectralCurve, u):
    """Inverse-CDF wavelength sample(s) from the piecewise-linear spectrum.

    Higher relative weight raises the likelihood of the associated wavelength;
    scaling all weights by a constant leaves the distribution unchanged.
    """
    cdf = _density_cdf(spectrum.x, spectrum.weight)
    out = _invert_piecewise_linear(spectrum.x, spectrum.weight, cdf, u)
    return out if np.ndim(u) else float(out)


def _emission_theta_cdf(profile: AngularProfile, grid: int = 4096):
    """CDF of the polar-angle emission density weight(theta) * sin(theta)."""
    if profile.is_tabulated:
        theta_max = math.radians(float(profile.samples[-1, 0]))
    else:
        theta_max = math.pi / 2.0
    theta = np.linspace(0.0, theta_max, grid)
    dens = profile(np.degrees(theta)) * np.sin(theta)
    cdf = np.concatenate([[0.0], np.cumsum(0.5 * (dens[1:] + dens[:-1]) * np.diff(theta))])
    if cdf[-1] <= 0:
        raise CurveError("degenerate angular profile")
    return theta, cdf / cdf[-1]


def sample_emission_direction(profile: AngularProfile, u1, u2):
    """Unit direction(s) in the emitter frame (+z is the beam axis).

    The polar angle follows density weight(theta)*sin(theta) (axial symmetry);
    azimuth is uniform.  Analytic cos^m profiles invert exactly; tabulated
    profiles use a dense numeric CDF.
    """
    u1 = np.asarray(u1, dtype=float)
    u2 = np.asarray(u2, dtype=float)
    if profile.is_tabulated:
        theta_grid, cdf = _emission_theta_cdf(profile)
        theta = np.interp(u1, cdf, theta_grid)
    else:
        m = profile.fallback_order
        theta = np.arccos(np.clip((1.0 - u1) ** (1.0 / (m + 1.0)), -1.0, 1.0))
    phi = 2.0 * math.pi * u2
    st = np.sin(theta)
    d = np.stack([st * np.cos(phi), st * np.sin(phi), np.cos(theta)], axis=-1)
    return d


def load_curve_csv(path) -> np.ndarray:
    """Read an `x,weight` CSV into an (n, 2) sample table.

    x is wavelength in micron for spectra or polar angle in degrees for
    angular profiles.  Lines starting with `#` are skipped.
    """
    rows = []
    with open(path, newline="") as fh:
        for row in csv.reader(fh):
            if not row or row[0].lstrip().startswith("#"):
                continue
            if row[0].strip().lower() in ("x", "wavelength", "angle"):
                continue
            rows.append((float(row[0]), float(row[1])))
    if len(rows) < 2:
        raise CurveError(f"{path}: fewer than 2 samples")
    return np.asarray(rows, dtype=float)


# ---------------------------------------------------------------------------
# Built-in synthetic stand-ins.  Overridable by CSV curves in the scenario
# config; these reproduce the qualitative band contrasts (narrow IR emitter,
# two-peak white emitter, band-dependent coating absorption).
# ---------------------------------------------------------------------------

def _gaussian_table(center, sigma, lo, hi, n=81, floor=0.0):
    x = np.linspace(lo, hi, n)
    w = np.exp(-0.5 * ((x - center) / sigma) ** 2) + floor
    return np.column_stack([x, w])


def ir_source_spectrum() -> SpectralCurve:
    """Narrow-band IR emitter centred at 0.860 um."""
    return SpectralCurve.from_samples(_gaussian_table(0.860, 0.020, 0.770, 0.950, n=76))


def vl_source_spectrum() -> SpectralCurve:
    """Two-peak white emitter: blue peak 0.450 um, broad yellow peak 0.604 um.

    Peak heights are set so the yellow lobe carries twice the blue lobe's area.
    """
    x = np.linspace(0.382, 0.780, 133)
    sig_b, sig_y = 0.012, 0.050
    blue = np.exp(-0.5 * ((x - 0.450) / sig_b) ** 2)
    yellow = np.exp(-0.5 * ((x - 0.604) / sig_y) ** 2)
    w = blue + (2.0 * sig_b / sig_y) * yellow
    return SpectralCurve(x, w / w.max())


def _triangle(lo, peak, hi):
    return SpectralCurve.from_samples([(lo, 0.0), (peak, 1.0), (hi, 0.0)])


def vl_detector_model() -> DetectorModel:
    """Bare visible-band photodiode: triangular response peaking at 0.620 um."""
    return DetectorModel(
        spectral_response=_triangle(0.350, 0.620, 1.050),
        angular_response=AngularProfile(fallback_order=lambertian_order(120.0)),
        peak_wavelength_um=0.620,
    )


def ir_detector_model() -> DetectorModel:
    """Bare IR photodiode: triangular response peaking at 0.900 um, 132 deg FWHM."""
    return DetectorModel(
        spectral_response=_triangle(0.400, 0.900, 1.100),
        angular_response=AngularProfile(fallback_order=lambertian_order(132.0)),
        peak_wavelength_um=0.900,
    )


def flat_detector_model() -> DetectorModel:
    """Idealized detector: unit spectral response, ideal cosine angular response."""
    return DetectorModel(
        spectral_response=SpectralCurve.from_samples([(0.2, 1.0), (0.9, 1.0), (2.0, 1.0)]),
        angular_response=AngularProfile(fallback_order=1.0),
        peak_wavelength_um=0.9,
    )


def source_model(band: str, fwhm_deg: float = 120.0) -> SourceModel:
    spectrum = ir_source_spectrum() if band == IR_BAND else vl_source_spectrum()
    return SourceModel(
        spectrum=spectrum,
        directivity=AngularProfile(fallback_order=lambertian_order(fwhm_deg)),
        fwhm_deg=fwhm_deg,
    )


def detector_model(band: str) -> DetectorModel:
    return ir_detector_model() if band == IR_BAND else vl_detector_model()


def _band_step(vl_value, ir_value):
    """Constant per-band reflectance with a smooth step between the bands."""
    return SpectralCurve.from_samples(
        [(0.350, vl_value), (0.780, vl_value), (0.800, ir_value), (1.100, ir_value)]
    )


def default_materials(scatter_count: int = 5) -> dict[str, MaterialSpectrum]:
    """Cabin coating set: white interior plastic, seat fabric, floor carpet."""
    return {
        "white_plastic": MaterialSpectrum(_band_step(0.80, 0.85), scatter_count),
        "fabric": MaterialSpectrum(_band_step(0.25, 0.70), scatter_count),
        "carpet": MaterialSpectrum(_band_step(0.08, 0.55), scatter_count),
        "absorber": MaterialSpectrum(_band_step(0.0, 0.0), scatter_count),
    }
