//! Time–frequency frontend: mel spectrogram, log compression, PCEN and
//! distribution diagnostics.

mod pcen;
mod spectrogram;
mod stats;

use serde::{Deserialize, Serialize};

pub use pcen::{
    burn_in_frames, ema_smooth, pcen, smoothing_coefficient, EmaState, PcenParams, PcenState,
};
pub use spectrogram::{
    hann, hz_to_mel, logmelspec, mel_to_hz, melspectrogram, Kind, MelFilter, MelFilterbank,
    MelSpectrogram, SpectrogramConfig, TimeFrequencyMatrix, LOG_FLOOR, MEL_VARIANT,
};
pub use stats::{
    distribution_stats, pooled_distribution_stats, pooled_moments, standardized_stats,
    DistributionStats, HIST_BINS, HIST_RANGE,
};

use crate::audio::Waveform;
use crate::error::Result;

/// Energy gain applied before PCEN: audio decoded to [-1, 1) is brought to
/// the [-2^31, 2^31) amplitude range, i.e. energies are scaled by 2^62.
/// PCEN with `alpha < 1` and `delta > 0` is not scale invariant, and its
/// presets assume that range.
pub const PCEN_ENERGY_SCALE: f64 = 4_611_686_018_427_387_904.0;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum Compression {
    Logmel,
    Pcen {
        params: PcenParams,
        #[serde(default = "default_pcen_scale")]
        energy_scale: f64,
    },
}

fn default_pcen_scale() -> f64 {
    PCEN_ENERGY_SCALE
}

impl Compression {
    pub fn pcen(params: PcenParams) -> Self {
        Compression::Pcen {
            params,
            energy_scale: PCEN_ENERGY_SCALE,
        }
    }

    pub fn kind(&self) -> Kind {
        match self {
            Compression::Logmel => Kind::Logmel,
            Compression::Pcen { .. } => Kind::Pcen,
        }
    }

    pub fn apply(&self, e: &TimeFrequencyMatrix) -> Result<TimeFrequencyMatrix> {
        match self {
            Compression::Logmel => logmelspec(e),
            Compression::Pcen {
                params,
                energy_scale,
            } => pcen(&e.scaled(*energy_scale), params),
        }
    }

    /// Representation value of a zero-energy cell; used to pad patches
    /// that extend past the recording.
    pub fn silence_value(&self) -> f64 {
        match self {
            Compression::Logmel => LOG_FLOOR.log10(),
            Compression::Pcen { .. } => 0.0,
        }
    }
}

/// Spectrogram settings plus the loudness mapping.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FrontendConfig {
    pub spectrogram: SpectrogramConfig,
    pub compression: Compression,
}

impl Default for FrontendConfig {
    fn default() -> Self {
        Self {
            spectrogram: SpectrogramConfig::default(),
            compression: Compression::pcen(PcenParams::OUTDOOR),
        }
    }
}

impl FrontendConfig {
    pub fn desk(compression: Compression) -> Self {
        Self {
            spectrogram: SpectrogramConfig::desk(),
            compression,
        }
    }

    pub fn features(&self, w: &Waveform) -> Result<TimeFrequencyMatrix> {
        let e = melspectrogram(w, &self.spectrogram)?;
        self.compression.apply(&e)
    }
}
