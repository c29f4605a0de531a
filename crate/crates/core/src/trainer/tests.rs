use std::f64::consts::LN_2;

use super::*;
use crate::corpus::{gen_synthetic, CorpusDir, SynthConfig};
use crate::store::load_model;

fn corpus(n_train: usize) -> (tempfile::TempDir, CorpusDir) {
    let dir = tempfile::tempdir().unwrap();
    let cfg = SynthConfig {
        n_train,
        n_dev: 8,
        content_vocab: 12,
        max_seq_len: 32,
        ..SynthConfig::default()
    };
    gen_synthetic(&cfg, dir.path()).unwrap();
    let c = CorpusDir::load(dir.path()).unwrap();
    (dir, c)
}

fn small_sft() -> SftConfig {
    SftConfig {
        d_model: 8,
        n_layers: 1,
        n_heads: 2,
        d_ff: 16,
        max_seq_len: 32,
        lr: 1e-2,
        steps: Some(6),
        batch_size: 4,
        ..SftConfig::default()
    }
}

#[test]
fn schedule_examples() {
    assert_eq!(cosine_warmup_lr(0, 1e-3, 100, 0.1).unwrap(), 0.0);
    assert_eq!(cosine_warmup_lr(10, 1e-3, 100, 0.1).unwrap(), 1e-3);
    assert!((cosine_warmup_lr(55, 1e-3, 100, 0.1).unwrap() - 0.5e-3).abs() < 1e-18);
    assert!(cosine_warmup_lr(100, 1e-3, 100, 0.1).unwrap().abs() < 1e-18);
    assert!((cosine_warmup_lr(5, 2.0, 100, 0.1).unwrap() - 1.0).abs() < 1e-15);
    assert!(cosine_warmup_lr(101, 1e-3, 100, 0.1).is_err());
    assert!(cosine_warmup_lr(0, 1e-3, 100, 1.0).is_err());
    assert!(cosine_warmup_lr(0, 1e-3, 0, 0.1).is_err());
    // monotone decay after warmup
    let tail: Vec<f64> = (10..=100).map(|s| cosine_warmup_lr(s, 1.0, 100, 0.1).unwrap()).collect();
    assert!(tail.windows(2).all(|w| w[1] <= w[0]));
}

#[test]
fn adam_single_step_oracle() {
    let mut p = Tensor::<f64>::scalar(1.0);
    let mut opt = Adam::new();
    opt.step(vec![("w".into(), &mut p)], &[Tensor::scalar(2.0)], 0.1).unwrap();
    // m̂ = 2, v̂ = 4
    let want = 1.0 - 0.1 * 2.0 / (2.0 + ADAM_EPS);
    assert!((p.item() - want).abs() < 1e-15);
    assert!((p.item() - 0.9).abs() < 1e-8);
    assert_eq!(opt.t, 1);
}

#[test]
fn adam_zero_gradient_and_nan() {
    let mut p = Tensor::<f64>::new(&[3], vec![0.5, -1.0, 2.0]).unwrap();
    let before = p.clone();
    let mut opt = Adam::new();
    for _ in 0..3 {
        opt.step(vec![("w".into(), &mut p)], &[Tensor::zeros(&[3])], 0.1).unwrap();
    }
    assert!(p.bitwise_eq(&before));

    let mut q = Tensor::<f64>::scalar(1.0);
    let err = opt
        .step(
            vec![("w".into(), &mut p), ("bad".into(), &mut q)],
            &[Tensor::ones(&[3]), Tensor::scalar(f64::NAN)],
            0.1,
        )
        .unwrap_err();
    assert!(matches!(err, Error::NanGradient(ref n) if n == "bad"));
    assert!(p.bitwise_eq(&before));
    assert_eq!(opt.t, 3);
    assert!(opt.step(vec![("w".into(), &mut p)], &[Tensor::ones(&[2])], 0.1).is_err());
}

#[test]
fn clipping_bounds_norm() {
    let mut g = vec![Tensor::<f64>::new(&[2], vec![3.0, 0.0]).unwrap(), Tensor::scalar(4.0)];
    assert_eq!(clip_global_norm(&mut g, 1.0), 5.0);
    assert!((g[0].data()[0] - 0.6).abs() < 1e-15 && (g[1].item() - 0.8).abs() < 1e-15);
    let mut small = vec![Tensor::<f64>::scalar(0.5)];
    clip_global_norm(&mut small, 1.0);
    assert_eq!(small[0].item(), 0.5);
}

#[test]
fn batches_partition_each_epoch() {
    let (n, b) = (37, 8);
    for epoch in 0..3 {
        let mut seen: Vec<usize> = (0..5).flat_map(|s| batch_indices(n, b, 7, epoch * 5 + s)).collect();
        seen.sort_unstable();
        assert_eq!(seen, (0..n).collect::<Vec<_>>());
    }
    assert_ne!(batch_indices(n, b, 7, 0), batch_indices(n, b, 7, 5));
    assert_eq!(batch_indices(n, b, 7, 3), batch_indices(n, b, 7, 3));
}

#[test]
fn config_parsing_and_validation() {
    let c: TrainConfig = serde_json::from_str(r#"{"method":"dpo","beta":0.05}"#).unwrap();
    assert_eq!(c.method, MethodKind::Dpo);
    assert_eq!(c.batch_size, 16);
    assert!(serde_json::from_str::<TrainConfig>(r#"{"bogus":1}"#).is_err());
    assert!(TrainConfig { beta: 0.0, ..c.clone() }.validate().is_err());
    assert!(TrainConfig { warmup_frac: 1.0, ..c.clone() }.validate().is_err());
    assert!(TrainConfig { steps: Some(0), ..c.clone() }.validate().is_err());
    assert_eq!("lopo".parse::<MethodKind>().unwrap(), MethodKind::Lopo);
    assert!("ppo".parse::<MethodKind>().unwrap_err().is_config());
    assert_eq!(TrainConfig::default().method_label(), "ropo-full");
}

#[test]
fn sft_initial_loss_near_uniform_entropy() {
    let (_d, c) = corpus(40);
    let cfg = SftConfig { steps: Some(1), ..small_sft() };
    let run = sft_train::<f64>(&c.sft, c.vocab.len(), &cfg, None).unwrap();
    let ln_v = (c.vocab.len() as f64).ln();
    let l0 = run.log[0].loss;
    assert!((l0 - ln_v).abs() < 0.2 * ln_v, "{l0} vs ln V = {ln_v}");
}

#[test]
fn sft_step_reduces_batch_loss() {
    let (_d, c) = corpus(40);
    let cfg = SftConfig { steps: Some(1), warmup_frac: 0.0, lr: 1e-3, ..small_sft() };
    let mcfg = cfg.model_config(c.vocab.len());
    let init = TransformerLM::<f64>::new(mcfg, &mut ChaCha8Rng::seed_from_u64(cfg.seed)).unwrap();
    let idx = batch_indices(c.sft.len(), cfg.batch_size, cfg.seed, 0);
    let batch: Vec<&SftExample> = idx.iter().map(|&i| &c.sft[i]).collect();
    let eval = |m: &TransformerLM<f64>| {
        let mut g = Graph::new();
        let b = m.bind(&mut g, Trainable::Nothing, false).unwrap();
        let l = sft_loss(&mut g, m, &b, &batch).unwrap();
        g.value(l).item()
    };
    let run = sft_train::<f64>(&c.sft, c.vocab.len(), &cfg, None).unwrap();
    assert_eq!(eval(&init), run.log[0].loss);
    assert!(eval(&run.model) < eval(&init));
}

#[test]
fn sft_masks_prompt_positions() {
    let mut g = Graph::<f64>::new();
    let logits = g.param(Tensor::from_fn(&[5, 6], |i| (i as f64 * 0.37).sin()));
    // prompt of 3 tokens, response of 3: rows 2..5 carry the loss
    let lp = pick_response(&mut g, logits, 3, &[4, 1, 2]).unwrap();
    let s = g.sum(lp);
    g.backward(s).unwrap();
    let grad = g.grad(logits).unwrap();
    assert!(grad.data()[..2 * 6].iter().all(|&v| v == 0.0));
    assert!(grad.data()[2 * 6..].iter().any(|&v| v != 0.0));
}

#[test]
fn sft_rejects_empty_corpus() {
    assert!(matches!(
        sft_train::<f64>(&[], 20, &small_sft(), None),
        Err(Error::Empty(_))
    ));
}

fn sft_model(c: &CorpusDir) -> TransformerLM<f64> {
    sft_train::<f64>(&c.sft, c.vocab.len(), &small_sft(), None).unwrap().model
}

fn align_cfg(method: MethodKind) -> TrainConfig {
    TrainConfig {
        method,
        rank: 2,
        lr: Some(5e-3),
        steps: Some(6),
        batch_size: 4,
        checkpoint_every: 2,
        ..TrainConfig::default()
    }
}

#[test]
fn step_zero_loss_is_ln2_for_every_method() {
    let (_d, c) = corpus(24);
    let sft = sft_train::<f32>(&c.sft, c.vocab.len(), &small_sft(), None).unwrap().model;
    for method in [MethodKind::Dpo, MethodKind::Ropo, MethodKind::Lopo] {
        let run = align_train(&sft, &c.train, &TrainConfig { steps: Some(1), ..align_cfg(method) }, None).unwrap();
        assert!((run.log[0].loss - LN_2).abs() < 1e-6, "{method}: {}", run.log[0].loss);
        assert_eq!(run.log[0].margin_mean, 0.0, "{method}");
    }
}

#[test]
fn adapter_runs_keep_base_bitwise_and_write_artifacts() {
    let (_d, c) = corpus(24);
    let sft = sft_model(&c);
    for method in [MethodKind::Ropo, MethodKind::Lopo] {
        let out = tempfile::tempdir().unwrap();
        let cfg = align_cfg(method);
        let run = align_train(&sft, &c.train, &cfg, Some(out.path())).unwrap();
        let (first, _) = load_model::<f64>(&out.path().join(checkpoint_name(0))).unwrap();
        let (last, meta) = load_model::<f64>(&out.path().join(FINAL_CKPT)).unwrap();
        assert_eq!(meta.step, 6);
        for (name, w) in first.weights() {
            assert!(w.bitwise_eq(last.weight(name).unwrap()), "{method}: {name}");
            assert!(w.bitwise_eq(sft.weight(name).unwrap()));
        }
        // adapters actually moved
        let moved = run
            .model
            .adapters()
            .unwrap()
            .named_tensors()
            .iter()
            .zip(first.adapters().unwrap().named_tensors())
            .any(|(a, b)| !a.1.bitwise_eq(b.1));
        assert!(moved, "{method}");
        for name in [checkpoint_name(2), checkpoint_name(4), ADAPTER_FILE.into(), TRAIN_LOG.into()] {
            assert!(out.path().join(&name).exists(), "{name}");
        }
        let rows: Vec<AlignLogRow> = read_log(&out.path().join(TRAIN_LOG)).unwrap();
        assert_eq!(rows, run.log);
    }
}

#[test]
fn ropo_full_trainable_count_matches_formula() {
    let (_d, c) = corpus(8);
    let sft = sft_model(&c);
    let run = align_train(&sft, &c.train, &TrainConfig { steps: Some(1), ..align_cfg(MethodKind::Ropo) }, None).unwrap();
    let cfg = sft.config();
    let per_layer: usize = [MatrixKind::Q, MatrixKind::V]
        .iter()
        .map(|&k| {
            let (d, n) = cfg.adapted_dims(k);
            2 * (d - 1) + n
        })
        .sum();
    assert_eq!(run.model.trainable_count(Trainable::Adapters), cfg.n_layers * per_layer);
    let enumerated: usize = run.optimizer.m.values().map(Tensor::numel).sum();
    assert_eq!(enumerated, cfg.n_layers * per_layer);
}

#[test]
fn lr_trace_matches_closed_form() {
    let (_d, c) = corpus(24);
    let sft = sft_model(&c);
    let cfg = TrainConfig { steps: Some(10), ..align_cfg(MethodKind::Ropo) };
    let run = align_train(&sft, &c.train, &cfg, None).unwrap();
    for r in &run.log {
        assert_eq!(r.lr, cosine_warmup_lr(r.step, 5e-3, 10, 0.1).unwrap());
    }
    assert_eq!(run.log.len(), 10);
}

#[test]
fn identical_configs_give_identical_checkpoints() {
    let (_d, c) = corpus(24);
    let sft = sft_model(&c);
    for method in [MethodKind::Dpo, MethodKind::Ropo] {
        let a = tempfile::tempdir().unwrap();
        let b = tempfile::tempdir().unwrap();
        align_train(&sft, &c.train, &align_cfg(method), Some(a.path())).unwrap();
        align_train(&sft, &c.train, &align_cfg(method), Some(b.path())).unwrap();
        for name in [FINAL_CKPT, TRAIN_LOG, &checkpoint_name(2)] {
            let x = std::fs::read(a.path().join(name)).unwrap();
            let y = std::fs::read(b.path().join(name)).unwrap();
            assert!(x == y, "{method}: {name}");
        }
    }
}

#[test]
fn resume_reproduces_loss_trace() {
    let (_d, c) = corpus(24);
    let sft = sft_model(&c);
    for method in [MethodKind::Dpo, MethodKind::Ropo, MethodKind::Lopo] {
        let out = tempfile::tempdir().unwrap();
        let full = align_train(&sft, &c.train, &align_cfg(method), Some(out.path())).unwrap();
        for k in [0, 2, 4] {
            let ck = Checkpoint::load(&out.path().join(checkpoint_name(k))).unwrap();
            let resumed = align_resume(&ck, &sft, &c.train, None).unwrap();
            assert_eq!(resumed.log.len(), 6 - k);
            for (a, b) in resumed.log.iter().zip(&full.log[k..]) {
                assert_eq!(a.step, b.step);
                assert!((a.loss - b.loss).abs() <= 1e-12, "{method} from {k}: {} vs {}", a.loss, b.loss);
            }
            for ((na, ta), (nb, tb)) in resumed.model.weights().iter().zip(full.model.weights()) {
                assert_eq!(na, nb);
                assert!(ta.max_abs_diff(tb).unwrap() <= 1e-12);
            }
        }
    }
}

#[test]
fn empty_training_set_is_rejected() {
    let (_d, c) = corpus(8);
    let sft = sft_model(&c);
    assert!(matches!(
        align_train(&sft, &[], &align_cfg(MethodKind::Ropo), None),
        Err(Error::Empty(_))
    ));
}

#[test]
fn divergence_aborts_and_keeps_earlier_checkpoints() {
    let (_d, c) = corpus(8);
    let sft = sft_model(&c);
    let out = tempfile::tempdir().unwrap();
    // an absurd step size overflows the weights after one update
    let cfg = TrainConfig {
        lr: Some(1e300),
        warmup_frac: 0.0,
        clip_norm: 0.0,
        checkpoint_every: 1,
        ..align_cfg(MethodKind::Dpo)
    };
    let err = align_train(&sft, &c.train, &cfg, Some(out.path())).unwrap_err();
    let Error::NanLoss { step } = err else { panic!("{err}") };
    assert!(step >= 1);
    assert!(out.path().join(checkpoint_name(0)).exists());
    assert!(load_model::<f64>(&out.path().join(checkpoint_name(step - 1))).is_ok());
    assert!(!out.path().join(FINAL_CKPT).exists());
}
