//! TOML configuration files.
//!
//! Configs are flat key/value tables. Unknown keys are rejected, missing
//! keys take their defaults, and `parse(render(c)) == c` for every config.
//! Seeds are TOML integers and therefore limited to `0..=i64::MAX`.

use std::fs;
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::Matrix;
use crate::sim::{self, AttentionKind, SimConfig};

pub fn parse_toml<T: DeserializeOwned>(text: &str) -> Result<T> {
    toml::from_str(text).map_err(|e| Error::Config(e.to_string()))
}

pub fn render_toml<T: Serialize>(value: &T) -> Result<String> {
    toml::to_string(value).map_err(|e| Error::Config(e.to_string()))
}

pub fn load_toml<T: DeserializeOwned>(path: impl AsRef<Path>) -> Result<T> {
    let path = path.as_ref();
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_toml(&text).map_err(|e| match e {
        Error::Config(msg) => Error::Config(format!("{}: {msg}", path.display())),
        other => other,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ValueMapKind {
    #[default]
    Identity,
    /// Gaussian entries scaled by `1/√d`, drawn from the run seed.
    Random,
}

/// Simulator settings as stored in `sim.toml`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SimFileConfig {
    pub dim: usize,
    pub slots: usize,
    pub subspace_dim: usize,
    pub steps: usize,
    /// Linear logit-scale ramp, used when `betas` is absent.
    pub beta_start: f64,
    pub beta_end: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub betas: Option<Vec<f64>>,
    pub noise_sigma: f64,
    pub noise_in_subspace: bool,
    pub attention: AttentionKind,
    pub value_map: ValueMapKind,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub seed: Option<u64>,
}

impl Default for SimFileConfig {
    fn default() -> Self {
        Self {
            dim: 32,
            slots: 16,
            subspace_dim: 32,
            steps: 64,
            beta_start: 0.0,
            beta_end: 20.0,
            betas: None,
            noise_sigma: 0.0,
            noise_in_subspace: false,
            attention: AttentionKind::Softmax,
            value_map: ValueMapKind::Identity,
            seed: None,
        }
    }
}

impl SimFileConfig {
    pub fn betas(&self) -> Vec<f64> {
        self.betas
            .clone()
            .unwrap_or_else(|| sim::beta_ramp(self.beta_start, self.beta_end, self.steps))
    }

    pub fn to_sim_config(&self, seed: u64) -> Result<SimConfig> {
        let mut config = SimConfig::new(self.dim, self.slots, self.subspace_dim, self.steps, seed)?
            .with_betas(self.betas())
            .with_noise(self.noise_sigma, self.noise_in_subspace)
            .with_attention(self.attention);
        if self.value_map == ValueMapKind::Random {
            let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x0057_A1E0_3A90);
            let scale = 1.0 / (self.dim as f64).sqrt();
            let data = sim::gaussian_vec(&mut rng, self.dim * self.dim)
                .into_iter()
                .map(|x| x * scale)
                .collect();
            config = config.with_value_map(Matrix::new(self.dim, self.dim, data)?);
        }
        config.validate()?;
        Ok(config)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_fill_missing_keys() {
        let c: SimFileConfig = parse_toml("dim = 8\nslots = 4\nsubspace_dim = 3\n").unwrap();
        assert_eq!(c.dim, 8);
        assert_eq!(c.steps, 64);
        assert_eq!(c.betas().len(), 64);
        assert_eq!(c.betas()[63], 20.0);
    }

    #[test]
    fn unknown_keys_rejected() {
        assert!(matches!(parse_toml::<SimFileConfig>("dims = 3"), Err(Error::Config(_))));
    }

    #[test]
    fn render_parse_round_trip() {
        let c = SimFileConfig {
            betas: Some(vec![0.5, 1.25]),
            steps: 2,
            seed: Some(17),
            value_map: ValueMapKind::Random,
            attention: AttentionKind::Linear,
            noise_sigma: 0.1,
            ..Default::default()
        };
        let back: SimFileConfig = parse_toml(&render_toml(&c).unwrap()).unwrap();
        assert_eq!(back, c);
    }

    #[test]
    fn builds_a_valid_sim_config() {
        let c = SimFileConfig {
            dim: 6,
            slots: 4,
            subspace_dim: 2,
            steps: 3,
            value_map: ValueMapKind::Random,
            ..Default::default()
        };
        let s = c.to_sim_config(5).unwrap();
        assert_eq!(s.betas, vec![0.0, 10.0, 20.0]);
        assert_ne!(s.value_map, Matrix::identity(6));
    }
}
