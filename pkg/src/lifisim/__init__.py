"""Reading-light cabin LiFi simulator.

Pipeline: build a cabin scene, Monte-Carlo trace reading-light rays into a
ray data bank, characterize the per-detector optical channels (impulse and
frequency responses, gain, delay spread, flatness), then drive the strongest
taps through a clipped DCO-OFDM link for simulated and analytic BER curves.
"""

from .channel import (
    Cfr,
    ChannelStats,
    DiscreteCir,
    TapSet,
    analytical_los,
    bin_rays,
    cfr,
    channel_stats,
    dc_gain,
    delay_stats,
    flatness,
    path_loss_db,
    top_l_taps,
)
from .config import ConfigError, ScenarioConfig
from .ofdm import (
    BussgangParams,
    ClippingModel,
    LinkResult,
    OfdmConfig,
    apply_channel_and_noise,
    ber_montecarlo,
    ber_theory,
    bias_clip,
    bit_rate_bps,
    bussgang,
    demodulate_zf,
    modulate,
    spectral_efficiency,
    subcarrier_gamma,
)
from .photometry import (
    AngularProfile,
    DetectorModel,
    MaterialSpectrum,
    SourceModel,
    SpectralCurve,
    evaluate,
    lambertian_order,
    sample_emission_direction,
    sample_wavelength,
)
from .raytracer import Ray, TraceConfig, emit_diffuse_children, trace
from .rdb import RayDataBank, load_rdb, save_rdb
from .scene import (
    CabinScene,
    Hit,
    PlacedDetector,
    PlacedSource,
    Surface,
    aim_rotation,
    build_simplified_cabin,
    intersect,
)

__version__ = "0.1.0"
