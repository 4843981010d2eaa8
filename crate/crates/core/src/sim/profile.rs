//! Time-varying input profiles: CSV-backed, inline, or synthetic.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum ProfileError {
    #[error("profile has no samples")]
    EmptyProfile,
    #[error("linear interpolation needs at least 2 samples")]
    TooFewSamples,
    #[error("sample times must be strictly increasing (at index {0})")]
    NonMonotonicTime(usize),
    #[error("profile CSV line {0}: expected `time_s,value`")]
    BadCsvLine(usize),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Interpolation {
    Linear,
    Step,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ProfileUnit {
    Watts,
    Pu,
}

#[derive(Debug, Clone)]
pub struct Profile {
    samples: Vec<(f64, f64)>,
    pub interpolation: Interpolation,
    pub unit: ProfileUnit,
}

impl Profile {
    pub fn new(
        samples: Vec<(f64, f64)>,
        interpolation: Interpolation,
        unit: ProfileUnit,
    ) -> Result<Self, ProfileError> {
        if samples.is_empty() {
            return Err(ProfileError::EmptyProfile);
        }
        if interpolation == Interpolation::Linear && samples.len() < 2 {
            return Err(ProfileError::TooFewSamples);
        }
        for i in 1..samples.len() {
            if samples[i].0 <= samples[i - 1].0 {
                return Err(ProfileError::NonMonotonicTime(i));
            }
        }
        Ok(Self {
            samples,
            interpolation,
            unit,
        })
    }

    /// `time_s,value` rows with a header line.
    pub fn from_csv(
        text: &str,
        interpolation: Interpolation,
        unit: ProfileUnit,
    ) -> Result<Self, ProfileError> {
        let mut samples = Vec::new();
        for (i, line) in text.lines().enumerate() {
            let line = line.trim();
            if i == 0 || line.is_empty() {
                continue; // header
            }
            let mut parts = line.split(',');
            let t = parts
                .next()
                .and_then(|s| s.trim().parse::<f64>().ok())
                .ok_or(ProfileError::BadCsvLine(i + 1))?;
            let v = parts
                .next()
                .and_then(|s| s.trim().parse::<f64>().ok())
                .ok_or(ProfileError::BadCsvLine(i + 1))?;
            samples.push((t, v));
        }
        Self::new(samples, interpolation, unit)
    }

    pub fn samples(&self) -> &[(f64, f64)] {
        &self.samples
    }

    /// Value at time t, clamped to the endpoints outside the sampled range.
    pub fn value_at(&self, t: f64) -> f64 {
        let s = &self.samples;
        if t <= s[0].0 {
            return s[0].1;
        }
        if t >= s[s.len() - 1].0 {
            return s[s.len() - 1].1;
        }
        // Index of the last sample with time <= t.
        let i = match s.binary_search_by(|(st, _)| st.partial_cmp(&t).unwrap()) {
            Ok(i) => return s[i].1, // exact sample time
            Err(i) => i - 1,
        };
        match self.interpolation {
            Interpolation::Step => s[i].1,
            Interpolation::Linear => {
                let (t0, v0) = s[i];
                let (t1, v1) = s[i + 1];
                v0 + (v1 - v0) * (t - t0) / (t1 - t0)
            }
        }
    }

    /// Value converted to pu on the given power base.
    pub fn value_pu(&self, t: f64, s_base_va: f64) -> f64 {
        match self.unit {
            ProfileUnit::Pu => self.value_at(t),
            ProfileUnit::Watts => self.value_at(t) / s_base_va,
        }
    }
}

/// Seeded generator combining a piecewise-linear backbone, an optional
/// square wave and uniform noise. Used for test scenarios; realistic
/// profiles are ingested from CSV.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SyntheticSpec {
    pub start_s: f64,
    pub end_s: f64,
    pub resolution_s: f64,
    pub interpolation: Interpolation,
    pub unit: ProfileUnit,
    #[serde(default)]
    pub base: f64,
    /// Piecewise-linear anchor points added to the base.
    #[serde(default)]
    pub anchors: Vec<(f64, f64)>,
    #[serde(default)]
    pub square: Option<SquareSpec>,
    /// Uniform noise in [-amplitude, amplitude], redrawn per sample.
    #[serde(default)]
    pub noise_amplitude: f64,
    /// Values are clamped below at this floor (default 0).
    #[serde(default)]
    pub floor: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SquareSpec {
    pub amplitude: f64,
    pub period_s: f64,
    /// Fraction of the period spent high.
    pub duty: f64,
    #[serde(default)]
    pub phase_s: f64,
}

impl SyntheticSpec {
    pub fn generate(&self, seed: u64) -> Result<Profile, ProfileError> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let anchor_profile = if self.anchors.len() >= 2 {
            Some(Profile::new(
                self.anchors.clone(),
                Interpolation::Linear,
                self.unit,
            )?)
        } else {
            None
        };
        let mut samples = Vec::new();
        let mut t = self.start_s;
        while t <= self.end_s + 1e-9 {
            let mut v = self.base;
            if let Some(a) = &anchor_profile {
                v += a.value_at(t);
            } else if let Some(&(_, av)) = self.anchors.first() {
                v += av;
            }
            if let Some(sq) = &self.square {
                let phase = (t + sq.phase_s).rem_euclid(sq.period_s) / sq.period_s;
                if phase < sq.duty {
                    v += sq.amplitude;
                }
            }
            if self.noise_amplitude > 0.0 {
                v += rng.gen_range(-self.noise_amplitude..=self.noise_amplitude);
            }
            samples.push((t, v.max(self.floor)));
            t += self.resolution_s;
        }
        Profile::new(samples, self.interpolation, self.unit)
    }
}
