use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::data::{DataError, SeriesFrame};

/// Sinusoid with scheduled period changes, level shifts and spikes.
///
/// Channel `c` is phase-shifted by `2 pi c / channels`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SynthSpec {
    pub base_period: f64,
    pub amplitude: f64,
    /// `(index, new period)`, effective from `index` on
    pub period_changes: Vec<(usize, f64)>,
    /// `(index, offset)`, added from `index` on
    pub level_shifts: Vec<(usize, f64)>,
    /// `(index, magnitude)`, added at `index` only
    pub spikes: Vec<(usize, f64)>,
    pub noise_std: f64,
    pub length: usize,
    pub channels: usize,
    pub seed: u64,
}

impl Default for SynthSpec {
    fn default() -> Self {
        Self {
            base_period: 24.0,
            amplitude: 1.0,
            period_changes: Vec::new(),
            level_shifts: Vec::new(),
            spikes: Vec::new(),
            noise_std: 0.0,
            length: 2000,
            channels: 1,
            seed: 0,
        }
    }
}

impl SynthSpec {
    pub fn validate(&self) -> Result<(), DataError> {
        if self.length == 0 || self.channels == 0 {
            return Err(DataError::Synth(
                "length and channels must be positive".into(),
            ));
        }
        if !(self.base_period > 0.0) || self.period_changes.iter().any(|&(_, p)| !(p > 0.0)) {
            return Err(DataError::Synth("periods must be positive".into()));
        }
        if !(self.noise_std >= 0.0) {
            return Err(DataError::Synth("noise std must be non-negative".into()));
        }
        let events = self
            .period_changes
            .iter()
            .chain(&self.level_shifts)
            .chain(&self.spikes);
        if let Some(&(i, _)) = events.into_iter().find(|&&(i, _)| i >= self.length) {
            return Err(DataError::Synth(format!(
                "event index {i} outside [0, {})",
                self.length
            )));
        }
        Ok(())
    }

    /// Seeded regime-shift series: the period switches among a few values at
    /// random times, the level jumps now and then, and sparse spikes appear.
    pub fn regime_shift(seed: u64, length: usize, channels: usize) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed_5eed);
        let periods = [12.0, 24.0, 48.0];
        let mut period_changes = Vec::new();
        let mut level_shifts = Vec::new();
        let mut spikes = Vec::new();
        let mut t = rng.random_range(60..240);
        while t < length {
            period_changes.push((t, periods[rng.random_range(0..periods.len())]));
            t += rng.random_range(120..360);
        }
        let mut t = rng.random_range(100..400);
        while t < length {
            level_shifts.push((t, rng.random_range(-1.5..1.5)));
            t += rng.random_range(200..600);
        }
        let mut t = rng.random_range(20..80);
        while t < length {
            let sign = if rng.random::<bool>() { 1.0 } else { -1.0 };
            spikes.push((t, sign * rng.random_range(2.0..4.0)));
            t += rng.random_range(40..160);
        }
        Self {
            base_period: 24.0,
            amplitude: 1.0,
            period_changes,
            level_shifts,
            spikes,
            noise_std: 0.1,
            length,
            channels,
            seed,
        }
    }
}

pub fn synth_generate(spec: &SynthSpec) -> Result<SeriesFrame, DataError> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let noise = Normal::new(0.0, spec.noise_std).map_err(|e| DataError::Synth(e.to_string()))?;
    let mut period_at = vec![spec.base_period; spec.length];
    let mut changes = spec.period_changes.clone();
    changes.sort_by_key(|&(i, _)| i);
    for &(i, p) in &changes {
        period_at[i..].iter_mut().for_each(|v| *v = p);
    }
    let mut level = vec![0.0; spec.length];
    for &(i, off) in &spec.level_shifts {
        level[i..].iter_mut().for_each(|v| *v += off);
    }
    let tau = std::f64::consts::TAU;
    let mut channels = Vec::with_capacity(spec.channels);
    for c in 0..spec.channels {
        let mut phase = tau * c as f64 / spec.channels as f64;
        let mut series = Vec::with_capacity(spec.length);
        for t in 0..spec.length {
            let mut v = spec.amplitude * phase.sin() + level[t];
            if spec.noise_std > 0.0 {
                v += noise.sample(&mut rng);
            }
            series.push(v);
            // phase accumulates so period changes stay continuous
            phase += tau / period_at[t];
        }
        for &(i, m) in &spec.spikes {
            series[i] += m;
        }
        channels.push(series);
    }
    let names = (0..spec.channels).map(|c| format!("synth_{c}")).collect();
    SeriesFrame::new(names, channels, "synthetic")
}
