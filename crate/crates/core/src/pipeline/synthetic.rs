//! A deterministic, model-free backend for tests and demos.
//!
//! Tokens are short words whose hidden state is a fixed function of the
//! token text inside a shared "world" of dimension `d`:
//!
//! * ` t<hex>` teacher samples lie in an `m`-dimensional subspace `S`,
//!   plus a little isotropic noise;
//! * ` s<hex>` student tokens mix a half-scale `S` part with a random
//!   out-of-`S` part of random weight;
//! * ` g<hex>` greedy-trace tokens at position `p` spread over all `d`
//!   directions with amplitudes `exp(−p·i/decay)`, so the trace loses
//!   effective rank as it grows;
//! * anything else maps into `S`.
//!
//! The greedy trace (temperature 0) opens each step with a `Step k:` line.
//! Sampled sequences depend only on the backend seed, the context, the
//! temperature and the sequence index.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::linalg::Matrix;
use crate::pipeline::backend::{GenerateRequest, GeneratedSequence, GenerationBackend};
use crate::pipeline::Role;
use crate::sim::{gaussian_vec, random_subspace};
use crate::spectral::StateTrajectory;

fn fnv1a(parts: &[&[u8]]) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for part in parts {
        for &b in *part {
            h ^= b as u64;
            h = h.wrapping_mul(0x0100_0000_01b3);
        }
        h ^= 0xff;
        h = h.wrapping_mul(0x0100_0000_01b3);
    }
    h
}

/// The shared token-to-state map.
#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticWorld {
    pub dim: usize,
    pub subspace_dim: usize,
    pub seed: u64,
    /// `d × d` orthonormal; the first `subspace_dim` columns span `S`.
    basis: Matrix,
    offset: Vec<f64>,
    pub decay: f64,
    pub teacher_noise: f64,
}

impl SyntheticWorld {
    pub fn new(dim: usize, subspace_dim: usize, seed: u64) -> Result<Self> {
        if subspace_dim == 0 || subspace_dim >= dim {
            return Err(Error::invalid(format!(
                "subspace dimension {subspace_dim} must be in 1..{dim}"
            )));
        }
        let basis = random_subspace(dim, dim, seed)?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x0FF5_E7);
        let offset = gaussian_vec(&mut rng, dim);
        Ok(Self {
            dim,
            subspace_dim,
            seed,
            basis,
            offset,
            decay: 32.0,
            teacher_noise: 0.02,
        })
    }

    fn coefficients(&self, kind: &str, id: &[u8]) -> Vec<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(fnv1a(&[&self.seed.to_le_bytes(), kind.as_bytes(), id]));
        gaussian_vec(&mut rng, self.dim)
    }

    fn combine(&self, coeffs: &[f64]) -> Vec<f64> {
        let mut v = self.offset.clone();
        for (c, &a) in coeffs.iter().enumerate() {
            if a != 0.0 {
                for (r, x) in v.iter_mut().enumerate() {
                    *x += a * self.basis.get(r, c);
                }
            }
        }
        v
    }

    /// Hidden state of one token.
    pub fn state_of(&self, token: &str) -> Vec<f64> {
        let word = token.trim();
        let m = self.subspace_dim;
        let (kind, rest) = word.split_at(word.chars().next().map_or(0, char::len_utf8));
        let hex = u64::from_str_radix(rest, 16).ok().filter(|_| !rest.is_empty());
        let c = match (kind, hex) {
            ("t", Some(_)) => {
                let mut c = self.coefficients("t", rest.as_bytes());
                c[m..].iter_mut().for_each(|x| *x *= self.teacher_noise);
                c
            }
            ("s", Some(_)) => {
                let mut c = self.coefficients("s", rest.as_bytes());
                let weight = 3.0 * c[0].abs().min(1.5) / ((self.dim - m) as f64).sqrt();
                c[..m].iter_mut().for_each(|x| *x *= 0.5);
                c[m..].iter_mut().for_each(|x| *x *= weight);
                c
            }
            ("g", Some(pos)) => {
                let mut c = self.coefficients("g", rest.as_bytes());
                for (i, x) in c.iter_mut().enumerate() {
                    *x *= (-(pos as f64) * i as f64 / self.decay).exp();
                }
                c
            }
            _ => {
                let mut c = self.coefficients("w", word.as_bytes());
                c[m..].iter_mut().for_each(|x| *x = 0.0);
                c
            }
        };
        self.combine(&c)
    }
}

#[derive(Debug, Clone)]
pub struct SyntheticBackend {
    pub world: SyntheticWorld,
    pub role: Role,
    pub seed: u64,
    pub greedy_steps: usize,
    pub tokens_per_step: usize,
    /// Length of a sampled sequence when `max_tokens` allows it.
    pub sample_len: usize,
}

impl SyntheticBackend {
    pub fn new(world: SyntheticWorld, role: Role, seed: u64) -> Self {
        Self {
            world,
            role,
            seed,
            greedy_steps: 6,
            tokens_per_step: 31,
            sample_len: 32,
        }
    }

    pub fn greedy_tokens(&self, max_tokens: usize) -> Vec<String> {
        let mut tokens = Vec::new();
        for step in 1..=self.greedy_steps {
            let marker = if step == 1 { "Step 1:".to_string() } else { format!("\nStep {step}:") };
            tokens.push(marker);
            for _ in 0..self.tokens_per_step {
                tokens.push(format!(" g{:x}", tokens.len()));
            }
        }
        tokens.truncate(max_tokens);
        tokens
    }

    fn sampled_tokens(&self, request: &GenerateRequest, index: usize) -> Vec<String> {
        let key = fnv1a(&[
            &self.seed.to_le_bytes(),
            request.context.as_bytes(),
            &request.temperature.to_bits().to_le_bytes(),
            &(index as u64).to_le_bytes(),
        ]);
        let mut rng = ChaCha8Rng::seed_from_u64(key);
        let prefix = match self.role {
            Role::Teacher => 't',
            Role::Student => 's',
        };
        (0..self.sample_len.min(request.max_tokens))
            .map(|_| format!(" {prefix}{:x}", rng.random::<u64>() >> 16))
            .collect()
    }

    fn states_of(&self, tokens: &[String]) -> Result<StateTrajectory> {
        let rows: Vec<Vec<f64>> = tokens.iter().map(|t| self.world.state_of(t)).collect();
        StateTrajectory::from_rows(&rows)
    }
}

impl GenerationBackend for SyntheticBackend {
    fn generate(&mut self, request: &GenerateRequest) -> Result<Vec<GeneratedSequence>> {
        if request.max_tokens == 0 {
            return Err(Error::Backend("max_tokens must be positive".into()));
        }
        (0..request.n)
            .map(|i| {
                let tokens = if request.temperature == 0.0 && self.role == Role::Teacher {
                    self.greedy_tokens(request.max_tokens)
                } else {
                    self.sampled_tokens(request, i)
                };
                let states = if request.want_states {
                    Some(self.states_of(&tokens)?.with_tokens(tokens.clone())?)
                } else {
                    None
                };
                Ok(GeneratedSequence {
                    text: tokens.concat(),
                    tokens,
                    states,
                })
            })
            .collect()
    }

    /// State of the last whitespace-separated word of the context.
    fn forward(&mut self, context: &str) -> Result<Vec<f64>> {
        let last = context.split_whitespace().last().unwrap_or("");
        Ok(self.world.state_of(last))
    }

    fn seed(&self) -> Option<u64> {
        Some(self.seed)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::linalg;

    fn world() -> SyntheticWorld {
        SyntheticWorld::new(16, 4, 3).unwrap()
    }

    fn out_of_span_fraction(w: &SyntheticWorld, v: &[f64]) -> f64 {
        let c: Vec<f64> = v.iter().zip(&w.offset).map(|(a, b)| a - b).collect();
        let coeffs = w.basis.tr_mat_vec(&c).unwrap();
        let out: f64 = coeffs[w.subspace_dim..].iter().map(|x| x * x).sum();
        (out / linalg::dot(&c, &c)).sqrt()
    }

    #[test]
    fn token_geometry() {
        let w = world();
        assert!(out_of_span_fraction(&w, &w.state_of(" t1f")) < 0.1);
        assert!(out_of_span_fraction(&w, &w.state_of("hello")) < 1e-12);
        assert_eq!(w.state_of(" s3"), w.state_of("s3"));
        assert!(SyntheticWorld::new(4, 4, 0).is_err());
    }

    #[test]
    fn greedy_trace_has_markers_and_is_deterministic() {
        let mut b = SyntheticBackend::new(world(), Role::Teacher, 1);
        let req = GenerateRequest {
            context: "Q".into(),
            temperature: 0.0,
            n: 2,
            max_tokens: 8192,
            want_states: true,
        };
        let out = b.generate(&req).unwrap();
        assert_eq!(out[0], out[1]);
        assert_eq!(out[0].tokens.len(), 6 * 32);
        assert!(out[0].text.starts_with("Step 1: g1 g2"));
        assert!(out[0].text.contains("\nStep 6:"));
        assert_eq!(out[0].states.as_ref().unwrap().len(), 192);
    }

    #[test]
    fn sampling_depends_on_seed_context_and_index() {
        let mut a = SyntheticBackend::new(world(), Role::Student, 1);
        let req = |ctx: &str| GenerateRequest {
            context: ctx.into(),
            temperature: 1.0,
            n: 3,
            max_tokens: 8,
            want_states: false,
        };
        let x = a.generate(&req("c")).unwrap();
        assert_eq!(x, a.generate(&req("c")).unwrap());
        assert_ne!(x[0], x[1]);
        assert_eq!(x[0].tokens.len(), 8);
        assert!(x[0].tokens.iter().all(|t| t.starts_with(" s")));
        assert_ne!(x, a.generate(&req("d")).unwrap());
        let mut b = SyntheticBackend::new(world(), Role::Student, 2);
        assert_ne!(x, b.generate(&req("c")).unwrap());
    }

    #[test]
    fn forward_uses_last_word() {
        let mut b = SyntheticBackend::new(world(), Role::Teacher, 1);
        assert_eq!(b.forward("Step 1: g1 s7").unwrap(), b.world.state_of("s7"));
    }
}
