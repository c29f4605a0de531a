//! Temperature / top-k / nucleus filtering and seeded draws.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SamplerConfig {
    pub temperature: f64,
    pub top_p: f64,
    pub top_k: usize,
}

impl Default for SamplerConfig {
    fn default() -> Self {
        Self {
            temperature: 0.95,
            top_p: 0.7,
            top_k: 50,
        }
    }
}

impl SamplerConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.temperature > 0.0) || !(self.top_p > 0.0 && self.top_p <= 1.0) || self.top_k == 0 {
            return Err(Error::Config(format!(
                "sampler needs temperature > 0, top_p in (0, 1], top_k ≥ 1; got {self:?}"
            )));
        }
        Ok(())
    }
}

/// Kept `(token, probability)` pairs after filtering, renormalized, most likely first.
///
/// Ties in probability keep the lower token id first.
pub fn filter_distribution(logits: &[f64], cfg: &SamplerConfig) -> Result<Vec<(usize, f64)>> {
    cfg.validate()?;
    if logits.is_empty() {
        return Err(Error::Empty("logits"));
    }
    if logits.iter().any(|v| v.is_nan()) {
        return Err(Error::NonFinite { op: "sample" });
    }
    let scaled: Vec<f64> = logits.iter().map(|l| l / cfg.temperature).collect();
    let max = scaled.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut probs: Vec<(usize, f64)> = scaled.iter().map(|l| (l - max).exp()).enumerate().collect();
    let z: f64 = probs.iter().map(|p| p.1).sum();
    for p in &mut probs {
        p.1 /= z;
    }
    probs.sort_by(|a, b| b.1.total_cmp(&a.1).then(a.0.cmp(&b.0)));
    probs.truncate(cfg.top_k);

    let mut cum = 0.0;
    let mut keep = probs.len();
    for (i, p) in probs.iter().enumerate() {
        cum += p.1;
        if cum >= cfg.top_p {
            keep = i + 1;
            break;
        }
    }
    probs.truncate(keep);
    let z: f64 = probs.iter().map(|p| p.1).sum();
    for p in &mut probs {
        p.1 /= z;
    }
    Ok(probs)
}

/// Inverse-CDF draw from a filtered distribution.
pub fn draw(dist: &[(usize, f64)], rng: &mut impl Rng) -> usize {
    let u: f64 = rng.random();
    let mut cum = 0.0;
    for &(tok, p) in dist {
        cum += p;
        if u < cum {
            return tok;
        }
    }
    dist.last().expect("nonempty distribution").0
}

#[cfg(test)]
mod tests {
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    use super::*;

    #[test]
    fn top_k_one_is_greedy() {
        let cfg = SamplerConfig {
            top_k: 1,
            ..Default::default()
        };
        let d = filter_distribution(&[0.1, 2.0, 1.9, -3.0], &cfg).unwrap();
        assert_eq!(d, vec![(1, 1.0)]);
    }

    #[test]
    fn nucleus_keeps_smallest_prefix() {
        let cfg = SamplerConfig {
            temperature: 1.0,
            top_p: 0.7,
            top_k: 50,
        };
        // probabilities 0.5, 0.3, 0.2
        let logits = [0.5f64.ln(), 0.3f64.ln(), 0.2f64.ln()];
        let d = filter_distribution(&logits, &cfg).unwrap();
        assert_eq!(d.len(), 2);
        assert!((d[0].1 - 0.625).abs() < 1e-12);
        assert!((d[1].1 - 0.375).abs() < 1e-12);
    }

    #[test]
    fn invalid_settings() {
        let bad = SamplerConfig {
            top_p: 0.0,
            ..Default::default()
        };
        assert!(filter_distribution(&[1.0], &bad).is_err());
        assert!(filter_distribution(&[f64::NAN], &SamplerConfig::default()).is_err());
    }

    #[test]
    fn draw_respects_mass() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let d = [(7, 1.0)];
        assert!((0..100).all(|_| draw(&d, &mut rng) == 7));
    }
}
