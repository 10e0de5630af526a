//! Two-modality synthetic cohorts with one planted cross-modal dependency.
//!
//! Feature `signal_a` of the first modality and `signal_b` of the second
//! carry the label signal; every other feature is label-independent noise.
//! Noise features within a modality share a common factor weighted by
//! `noise_coupling`, so they are mutually dependent but independent of the
//! signal features. At strength 0 no feature carries label information.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::record::{Dataset, PatientRecord};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LabelRule {
    /// One latent `u ~ N(0,1)` drives both signal features; label `1[u > 0]`.
    #[default]
    SharedLatent,
    /// Independent latents `u_a`, `u_b` drive one signal feature each;
    /// label `1[u_a·u_b > 0]`.
    Xor,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SynthSpec {
    pub n: usize,
    pub modality_sizes: [usize; 2],
    /// Signal amplitude relative to unit feature noise.
    pub strength: f64,
    pub signal_a: usize,
    pub signal_b: usize,
    /// Weight in `[0, 1)` of the shared factor in each noise feature.
    pub noise_coupling: f64,
    pub label_rule: LabelRule,
    pub seed: u64,
}

/// Amplitude used for the "high" dependency setting.
pub const HIGH_STRENGTH: f64 = 10.0;

impl Default for SynthSpec {
    fn default() -> Self {
        SynthSpec {
            n: 400,
            modality_sizes: [8, 8],
            strength: HIGH_STRENGTH,
            signal_a: 0,
            signal_b: 0,
            noise_coupling: 0.95,
            label_rule: LabelRule::SharedLatent,
            seed: 0,
        }
    }
}

impl SynthSpec {
    pub fn validate(&self) -> Result<()> {
        if self.n < 2 {
            return Err(Error::contract(format!("synthetic cohort needs n >= 2, got {}", self.n)));
        }
        if self.modality_sizes.contains(&0) {
            return Err(Error::contract("synthetic modalities need at least one feature"));
        }
        if self.signal_a >= self.modality_sizes[0] || self.signal_b >= self.modality_sizes[1] {
            return Err(Error::contract(format!(
                "signal features ({}, {}) out of range for sizes {:?}",
                self.signal_a, self.signal_b, self.modality_sizes
            )));
        }
        if !(self.strength >= 0.0 && self.strength.is_finite()) {
            return Err(Error::contract(format!("strength must be finite and >= 0, got {}", self.strength)));
        }
        if !(0.0..1.0).contains(&self.noise_coupling) {
            return Err(Error::contract(format!(
                "noise_coupling must lie in [0, 1), got {}",
                self.noise_coupling
            )));
        }
        Ok(())
    }

    pub fn digest(&self) -> String {
        let json = serde_json::to_string(self).expect("spec serializes");
        hex::encode(Sha256::digest(json.as_bytes()))
    }

    pub fn from_toml(text: &str) -> Result<Self> {
        let spec: SynthSpec = toml::from_str(text).map_err(|e| Error::Format {
            what: "synthetic spec",
            message: e.to_string(),
        })?;
        spec.validate()?;
        Ok(spec)
    }
}

pub fn generate(spec: &SynthSpec) -> Result<Dataset> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let width = spec.n.to_string().len().max(3);
    let c = spec.noise_coupling;
    let spread = (1.0 - c * c).sqrt();
    let mut records = Vec::with_capacity(spec.n);
    for i in 0..spec.n {
        let ua: f64 = StandardNormal.sample(&mut rng);
        let ub: f64 = match spec.label_rule {
            LabelRule::SharedLatent => ua,
            LabelRule::Xor => StandardNormal.sample(&mut rng),
        };
        let label = match spec.label_rule {
            LabelRule::SharedLatent => ua > 0.0,
            LabelRule::Xor => ua * ub > 0.0,
        };
        let mut modalities = Vec::with_capacity(2);
        for (m, &size) in spec.modality_sizes.iter().enumerate() {
            let (signal, latent) = if m == 0 { (spec.signal_a, ua) } else { (spec.signal_b, ub) };
            let shared: f64 = StandardNormal.sample(&mut rng);
            let row: Vec<f64> = (0..size)
                .map(|j| {
                    let noise: f64 = StandardNormal.sample(&mut rng);
                    if j == signal {
                        spec.strength * latent + noise
                    } else {
                        c * shared + spread * noise
                    }
                })
                .collect();
            modalities.push(row);
        }
        records.push(PatientRecord {
            id: format!("P{i:0width$}"),
            modalities,
            label: u8::from(label),
        });
    }
    Dataset::new(
        format!("synthetic-s{}-n{}", spec.strength, spec.n),
        vec!["modality_a".into(), "modality_b".into()],
        records,
        spec.digest(),
    )
}
