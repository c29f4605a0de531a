use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use ropo::lm::{draw, filter_distribution, SamplerConfig};

/// Empirical frequencies of 1e5 draws stay within 3σ of the filtered probabilities.
#[test]
fn draw_frequencies_match_filtered_distribution() {
    let logits = [1.2, -0.3, 0.8, 2.0, -1.5, 0.1, 0.0, -4.0];
    let cfgs = [
        SamplerConfig { temperature: 1.0, top_p: 1.0, top_k: 50 },
        SamplerConfig::default(),
        SamplerConfig { temperature: 0.5, top_p: 0.9, top_k: 3 },
        SamplerConfig { temperature: 2.0, top_p: 0.95, top_k: 6 },
    ];
    let n = 100_000usize;
    for (ci, cfg) in cfgs.iter().enumerate() {
        let dist = filter_distribution(&logits, cfg).unwrap();
        assert!((dist.iter().map(|d| d.1).sum::<f64>() - 1.0).abs() < 1e-12);
        assert!(dist.len() <= cfg.top_k);
        let mut rng = ChaCha8Rng::seed_from_u64(ci as u64);
        let mut counts = [0usize; 8];
        for _ in 0..n {
            counts[draw(&dist, &mut rng)] += 1;
        }
        for (tok, &c) in counts.iter().enumerate() {
            let p = dist.iter().find(|d| d.0 == tok).map_or(0.0, |d| d.1);
            let sigma = (n as f64 * p * (1.0 - p)).sqrt();
            let dev = (c as f64 - n as f64 * p).abs();
            assert!(dev <= 3.0 * sigma, "cfg {ci} token {tok}: {c} draws, expected {}", n as f64 * p);
        }
    }
}

#[test]
fn temperature_oracle_without_truncation() {
    let logits = [0.0, 1.0, 2.0];
    let cfg = SamplerConfig { temperature: 0.5, top_p: 1.0, top_k: 3 };
    let dist = filter_distribution(&logits, &cfg).unwrap();
    let z: f64 = logits.iter().map(|l: &f64| (l / 0.5).exp()).sum();
    for (tok, p) in dist {
        assert!((p - (logits[tok] / 0.5).exp() / z).abs() < 1e-12);
    }
}
