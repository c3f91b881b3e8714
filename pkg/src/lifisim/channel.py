"""Channel impulse responses and their characterization.

Detector hit records are binned into a discrete CIR with a per-bounce-order
decomposition; from it come the frequency response, DC gain, path loss, mean
delay, RMS delay spread (power weighting uses the squared impulse response),
flatness factor (line-of-sight share of the total power) and the strongest-tap
truncation used by the link simulator.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .scene import SPEED_OF_LIGHT_CM_PER_NS, PlacedDetector, PlacedSource

DEFAULT_BIN_WIDTH_NS = 0.2


class ChannelError(ValueError):
    pass


@dataclass(frozen=True)
class DiscreteCir:
    """Binned impulse response: bins[n] is the power landing in bin n (W)."""

    bins: np.ndarray
    bin_width_ns: float
    t_first_ns: float
    per_bounce: np.ndarray | None = None  # (kappa_max+1, n_bins)

    @property
    def n_bins(self) -> int:
        return int(self.bins.size)

    @property
    def times_ns(self) -> np.ndarray:
        return self.t_first_ns + np.arange(self.n_bins) * self.bin_width_ns

    def total_power(self) -> float:
        return float(np.sum(self.bins))


@dataclass(frozen=True)
class Cfr:
    """Discrete frequency response of a CIR, zero-padded to a power of two."""

    values: np.ndarray  # complex, ordered k = 0 .. N-1
    fft_size: int
    freq_resolution_hz: float

    @property
    def frequencies_hz(self) -> np.ndarray:
        return np.arange(self.fft_size) * self.freq_resolution_hz

    def single_sided(self) -> tuple[np.ndarray, np.ndarray]:
        """(f, |H|) over [0, f_s/2]: real CIRs are conjugate symmetric."""
        half = self.fft_size // 2 + 1
        return self.frequencies_hz[:half], np.abs(self.values[:half])


@dataclass(frozen=True)
class ChannelStats:
    i_hit: int
    dc_gain: float
    path_loss_db: float
    mean_delay_ns: float
    rms_delay_spread_ns: float
    flatness: float


@dataclass(frozen=True)
class TapSet:
    """Strongest-L CIR taps, re-sorted by delay, plus the retained power share."""

    delays: np.ndarray        # integer bin indices relative to the first bin
    gains: np.ndarray
    fraction: float
    bin_width_ns: float = DEFAULT_BIN_WIDTH_NS
    t_first_ns: float = 0.0

    @property
    def L(self) -> int:
        return int(self.gains.size)

    @property
    def span(self) -> int:
        """Number of sample periods between first and last selected tap."""
        if self.delays.size == 0:
            return 0
        return int(self.delays.max() - self.delays.min())

    def rebased(self) -> "TapSet":
        """Shift delays so the earliest selected tap sits at index 0."""
        if self.delays.size == 0:
            return self
        d0 = int(self.delays.min())
        return TapSet(self.delays - d0, self.gains, self.fraction,
                      self.bin_width_ns, self.t_first_ns + d0 * self.bin_width_ns)


def bin_rays(hits, bin_width_ns: float = DEFAULT_BIN_WIDTH_NS) -> DiscreteCir:
    """Cluster hit records into fixed-width time bins.

    Bin n spans [t_n, t_{n+1}) with t_n = t_first + n*dw; the final bin is
    closed on the right so the last arrival is kept.  A per-bounce-order
    decomposition is accumulated alongside the total.
    """
    rec = np.asarray(hits)
    if rec.size == 0:
        raise ChannelError("empty hit list")
    if bin_width_ns <= 0:
        raise ChannelError("bin width must be positive")
    t = np.asarray(rec["t_ns"], dtype=float)
    p = np.asarray(rec["power_w"], dtype=float)
    kappa = np.asarray(rec["kappa"], dtype=np.int64)
    t1 = float(t.min())
    t_last = float(t.max())
    n_bins = max(int(math.ceil((t_last - t1) / bin_width_ns)), 1)
    idx = np.floor((t - t1) / bin_width_ns).astype(np.int64)
    np.clip(idx, 0, n_bins - 1, out=idx)
    k_max = int(kappa.max())
    per_bounce = np.zeros((k_max + 1, n_bins))
    np.add.at(per_bounce, (kappa, idx), p)
    return DiscreteCir(
        bins=per_bounce.sum(axis=0),
        bin_width_ns=float(bin_width_ns),
        t_first_ns=t1,
        per_bounce=per_bounce,
    )


def cfr(cir: DiscreteCir) -> Cfr:
    """Discrete frequency response, zero-padded to the next power of two.

    The bin rate sets the sampling frequency (df = 1/dw); |H(0)| equals the
    summed bin power.
    """
    n_fft = 1 << max(int(math.ceil(math.log2(max(cir.n_bins, 1)))), 0)
    values = np.fft.fft(cir.bins, n=n_fft)
    fs = 1.0 / (cir.bin_width_ns * 1e-9)
    return Cfr(values=values, fft_size=n_fft, freq_resolution_hz=fs / n_fft)


def dc_gain(cir: DiscreteCir, source_power_w: float = 1.0) -> float:
    """Total impulse-response power over the transmitted power."""
    if source_power_w <= 0:
        raise ChannelError("source power must be positive")
    if cir.per_bounce is not None:
        return float(cir.per_bounce.sum()) / source_power_w
    return cir.total_power() / source_power_w


def path_loss_db(gain: float) -> float:
    if gain <= 0:
        raise ChannelError("path loss undefined for zero DC gain")
    return -10.0 * math.log10(gain)


def delay_stats(cir: DiscreteCir) -> tuple[float, float]:
    """(mean delay, RMS delay spread) in ns, weighting bins by power squared."""
    h2 = np.asarray(cir.bins, dtype=float) ** 2
    total = h2.sum()
    if total <= 0:
        raise ChannelError("zero-energy impulse response")
    n = np.arange(cir.n_bins)
    mean_n = float((n * h2).sum() / total)
    var_n = float((((n - mean_n) ** 2) * h2).sum() / total)
    mean_ns = cir.t_first_ns + mean_n * cir.bin_width_ns
    return mean_ns, math.sqrt(var_n) * cir.bin_width_ns


def flatness(cir: DiscreteCir) -> float:
    """Line-of-sight power share: sum of the zero-bounce component over total."""
    if cir.per_bounce is None:
        raise ChannelError("per-bounce decomposition required for flatness")
    total = float(cir.per_bounce.sum())
    if total <= 0:
        raise ChannelError("zero-energy impulse response")
    return float(cir.per_bounce[0].sum()) / total


def channel_stats(cir: DiscreteCir, i_hit: int, source_power_w: float = 1.0) -> ChannelStats:
    gain = dc_gain(cir, source_power_w)
    mean_ns, rms_ns = delay_stats(cir)
    return ChannelStats(
        i_hit=int(i_hit),
        dc_gain=gain,
        path_loss_db=path_loss_db(gain),
        mean_delay_ns=mean_ns,
        rms_delay_spread_ns=rms_ns,
        flatness=flatness(cir),
    )


def top_l_taps(cir: DiscreteCir, L: int) -> TapSet:
    """Keep the L largest bins as the effective channel.

    Ties break toward the earlier delay; L clamps to the bin count.  The
    fraction reports how much of the total optical power the selection keeps.
    """
    if L < 1:
        raise ChannelError("L must be >= 1")
    bins = np.asarray(cir.bins, dtype=float)
    L = min(L, bins.size)
    order = np.lexsort((np.arange(bins.size), -bins))
    chosen = np.sort(order[:L])
    total = bins.sum()
    fraction = float(bins[chosen].sum() / total) if total > 0 else 0.0
    return TapSet(
        delays=chosen.astype(np.int64),
        gains=bins[chosen],
        fraction=fraction,
        bin_width_ns=cir.bin_width_ns,
        t_first_ns=cir.t_first_ns,
    )


def analytical_los(source: PlacedSource, detector: PlacedDetector,
                   lambertian_m: float, area_cm2: float | None = None) -> tuple[float, float]:
    """Point-source Lambertian line-of-sight gain and propagation delay.

    H = (m+1) A cos^m(phi) cos(psi) / (2 pi d^2); the delay is d over the
    speed of light.  Geometry behind either element yields zero gain.
    """
    area = detector.area_cm2 if area_cm2 is None else area_cm2
    delta = detector.position - source.position
    d = float(np.linalg.norm(delta))
    if d <= 0:
        raise ChannelError("source and detector coincide")
    u = delta / d
    cos_phi = float(source.beam_axis() @ u)
    cos_psi = float(detector.normal @ (-u))
    delay_ns = d / SPEED_OF_LIGHT_CM_PER_NS
    if cos_phi <= 0.0 or cos_psi <= 0.0:
        return 0.0, delay_ns
    gain = (lambertian_m + 1.0) * area * cos_phi**lambertian_m * cos_psi / (2.0 * math.pi * d * d)
    return gain, delay_ns


def characterize_bank(bank, bin_width_ns: float = DEFAULT_BIN_WIDTH_NS) -> dict:
    """Per-detector CIR and stats for every detector with at least one record."""
    out = {}
    power = float(bank.meta.get("source_power_w", 1.0))
    for idx, did in enumerate(bank.detector_ids):
        rec = bank.records[bank.records["detector_id"] == idx]
        if rec.size == 0:
            out[did] = None
            continue
        cir = bin_rays(rec, bin_width_ns)
        out[did] = (cir, channel_stats(cir, rec.size, power))
    return out
