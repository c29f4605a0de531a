use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::*;
use crate::adapters::Variant;

fn tiny(seed: u64) -> TransformerLM<f64> {
    let cfg = LMConfig {
        vocab_size: 12,
        d_model: 8,
        n_layers: 2,
        n_heads: 2,
        d_ff: 16,
        max_seq_len: 16,
        attach_points: vec![MatrixKind::Q, MatrixKind::V],
    };
    TransformerLM::new(cfg, &mut ChaCha8Rng::seed_from_u64(seed)).unwrap()
}

fn ropo(variant: Variant) -> AdapterMethod {
    AdapterMethod::Rotation { variant }
}

#[test]
fn config_validation() {
    let mut cfg = LMConfig::desk(40);
    assert!(cfg.validate().is_ok());
    cfg.n_heads = 3;
    assert!(cfg.validate().unwrap_err().is_config());
    cfg.n_heads = 2;
    cfg.max_seq_len = 1;
    assert!(cfg.validate().is_err());
}

#[test]
fn logits_shape_and_length_limit() {
    let m = tiny(0);
    assert_eq!(m.forward_logits(&[1]).unwrap().shape(), &[1, 12]);
    assert_eq!(m.forward_logits(&[1, 4, 5]).unwrap().shape(), &[3, 12]);
    let long = vec![4; 17];
    assert!(matches!(m.forward_logits(&long), Err(Error::SequenceTooLong { len: 17, max: 16 })));
    assert!(m.forward_logits(&[1, 12]).is_err());
}

#[test]
fn causal_perturbation_leaves_prefix_bitwise() {
    let m = tiny(1);
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    for _ in 0..10 {
        let len = rng.random_range(2..=16);
        let toks: Vec<usize> = (0..len).map(|_| rng.random_range(0..12)).collect();
        let t = rng.random_range(0..len - 1);
        let mut other = toks.clone();
        other[t + 1] = (other[t + 1] + 1 + rng.random_range(0..10)) % 12;
        let a = m.forward_logits(&toks).unwrap();
        let b = m.forward_logits(&other).unwrap();
        for i in 0..=t * 12 + 11 {
            assert_eq!(a.data()[i].to_bits(), b.data()[i].to_bits(), "position {}", i / 12);
        }
    }
}

#[test]
fn identity_adapters_leave_logits_bitwise() {
    let base = tiny(2);
    let toks = [1, 5, 6, 7, 2, 9];
    let want = base.forward_logits(&toks).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    for method in [
        ropo(Variant::Full),
        ropo(Variant::UniD),
        ropo(Variant::Single),
        ropo(Variant::NoMagnitude),
        ropo(Variant::RotRight),
        AdapterMethod::LowRank { rank: 2, scale: 1.0 },
    ] {
        let mut m = base.clone();
        m.attach_adapters(method, &MatrixKind::ALL, &mut rng).unwrap();
        assert!(m.forward_logits(&toks).unwrap().bitwise_eq(&want), "{method}");
    }
}

#[test]
fn attach_counts_and_reattach() {
    let cfg = LMConfig::desk(40);
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let base = TransformerLM::<f32>::new(cfg, &mut rng).unwrap();

    let mut m = base.clone();
    m.attach_adapters(ropo(Variant::Full), &[MatrixKind::Q, MatrixKind::V], &mut rng).unwrap();
    assert_eq!(m.trainable_count(Trainable::Adapters), 376);
    assert_eq!(m.trainable_mut(Trainable::Adapters).iter().map(|(_, t)| t.numel()).sum::<usize>(), 376);
    assert!(m.attach_adapters(ropo(Variant::Full), &[MatrixKind::Q], &mut rng).is_err());
    m.detach_adapters();
    m.attach_adapters(AdapterMethod::LowRank { rank: 4, scale: 1.0 }, &[MatrixKind::Q, MatrixKind::V], &mut rng)
        .unwrap();
    assert_eq!(m.trainable_count(Trainable::Adapters), 1024);

    let mut e = base.clone();
    e.attach_adapters(ropo(Variant::Full), &[], &mut rng).unwrap();
    assert_eq!(e.trainable_count(Trainable::Adapters), 0);
    let mut g = Graph::new();
    let b = e.bind(&mut g, Trainable::Adapters, false).unwrap();
    assert!(b.trainable.is_empty());
}

#[test]
fn bound_trainables_follow_canonical_order() {
    let mut m = tiny(3);
    m.attach_adapters(ropo(Variant::Full), &[MatrixKind::Q, MatrixKind::V], &mut ChaCha8Rng::seed_from_u64(0))
        .unwrap();
    for mode in [Trainable::BaseWeights, Trainable::Adapters] {
        let mut g = Graph::new();
        let names: Vec<String> = m.bind(&mut g, mode, false).unwrap().trainable.into_iter().map(|p| p.0).collect();
        let want: Vec<String> = m.trainable_mut(mode).into_iter().map(|p| p.0).collect();
        assert_eq!(names, want);
    }
}

#[test]
fn sequence_logprob_matches_stepwise_oracle() {
    let m = tiny(4);
    let prompt = [1, 4, 5];
    let response = [6, 7, 2];
    let got = m.sequence_logprob(&prompt, &response).unwrap();
    let mut want = 0.0;
    let mut ctx = prompt.to_vec();
    for &tok in &response {
        let logits = m.forward_logits(&ctx).unwrap();
        let row = &logits.data()[(ctx.len() - 1) * 12..];
        let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let lse = max + row.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
        want += row[tok] - lse;
        ctx.push(tok);
    }
    assert!((got - want).abs() < 1e-10, "{got} vs {want}");

    let single = m.sequence_logprob(&prompt, &[2]).unwrap();
    let logits = m.forward_logits(&prompt).unwrap();
    let row = &logits.data()[2 * 12..];
    let lse = row.iter().map(|v| v.exp()).sum::<f64>().ln();
    assert!((single - (row[2] - lse)).abs() < 1e-12);

    assert!(matches!(m.sequence_logprob(&prompt, &[6, 7]), Err(Error::MissingEos)));
}

#[test]
fn certain_model_scores_zero() {
    // blocks contribute nothing; position t's one-hot embedding selects the target token
    let cfg = LMConfig {
        vocab_size: 8,
        d_model: 8,
        n_layers: 1,
        n_heads: 1,
        d_ff: 4,
        max_seq_len: 8,
        attach_points: vec![],
    };
    let mut w: BTreeMap<String, Tensor<f64>> =
        weight_shapes(&cfg).into_iter().map(|(n, s)| (n, Tensor::zeros(&s))).collect();
    for n in ["layer.0.ln1.g", "layer.0.ln2.g", "ln_f.g"] {
        w.insert(n.into(), Tensor::ones(&[8]));
    }
    let prompt = [1, 5];
    let response = [6, 3, 2];
    let mut pos = Tensor::zeros(&[8, 8]);
    let mut head = Tensor::zeros(&[8, 8]);
    for (t, &tok) in response.iter().enumerate() {
        let p = prompt.len() - 1 + t;
        pos.data_mut()[p * 8 + p] = 1.0;
        head.data_mut()[tok * 8 + p] = 100.0;
    }
    w.insert("pos_emb".into(), pos);
    w.insert("head.w".into(), head);
    let m = TransformerLM::from_weights(cfg, w).unwrap();
    let lp = m.sequence_logprob(&prompt, &response).unwrap();
    assert!(lp > -1e-6 && lp <= 0.0, "{lp}");
}

#[test]
fn from_weights_checks_architecture() {
    let m = tiny(5);
    let mut w = m.weights().clone();
    assert!(TransformerLM::from_weights(m.config().clone(), w.clone()).is_ok());
    w.insert("head.w".into(), Tensor::zeros(&[3, 3]));
    assert!(matches!(
        TransformerLM::from_weights(m.config().clone(), w.clone()),
        Err(Error::ArchitectureMismatch(_))
    ));
    w.remove("head.w");
    assert!(TransformerLM::from_weights(m.config().clone(), w).is_err());
}

#[test]
fn bypass_detects_mutated_base() {
    let mut m = tiny(6);
    assert!(m.check_bypass().is_err());
    m.attach_adapters(ropo(Variant::Full), &[MatrixKind::Q], &mut ChaCha8Rng::seed_from_u64(0))
        .unwrap();
    assert!(m.check_bypass().is_ok());
    for (name, t) in m.trainable_mut(Trainable::BaseWeights) {
        if name == "head.w" {
            t.data_mut()[0] += 1.0;
        }
    }
    assert!(m.check_bypass().is_err());
}

#[test]
fn merge_adapters_matches_attached_logits() {
    let mut m = tiny(7);
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    m.attach_adapters(ropo(Variant::Full), &[MatrixKind::Q, MatrixKind::V], &mut rng).unwrap();
    for (_, t) in m.trainable_mut(Trainable::Adapters) {
        for v in t.data_mut() {
            *v += rng.random_range(-0.3..0.3);
        }
    }
    let toks = [1, 3, 4, 5, 6];
    let attached = m.forward_logits(&toks).unwrap();
    let mut merged = m.clone();
    merged.merge_adapters().unwrap();
    assert!(merged.adapters().is_none());
    assert!(merged.forward_logits(&toks).unwrap().bitwise_eq(&attached));
}

#[test]
fn sampling_determinism_and_greedy() {
    let m = tiny(8);
    let cfg = SamplerConfig::default();
    let a = m.sample(&[1, 4], &cfg, 10, 3).unwrap();
    assert_eq!(a, m.sample(&[1, 4], &cfg, 10, 3).unwrap());
    assert!(!a.is_empty() && a.len() <= 10);
    let greedy = SamplerConfig { top_k: 1, ..cfg };
    let g1 = m.sample(&[1, 4], &greedy, 8, 1).unwrap();
    for seed in 2..6 {
        assert_eq!(m.sample(&[1, 4], &greedy, 8, seed).unwrap(), g1);
    }
    assert!(m.sample(&[1, 4], &cfg, 0, 0).is_err());
    // context limit caps generation
    let long = m.sample(&[1; 14], &cfg, 40, 0).unwrap();
    assert!(long.len() <= 2);
}
