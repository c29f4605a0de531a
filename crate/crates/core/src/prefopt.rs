//! DPO objective, implicit reward, preference probability and reference log-probs.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::adapters::{AdapterMethod, Variant};
use crate::energy::MatrixKind;
use crate::lm::{check_response, BoundLM, LMConfig, Trainable, TransformerLM};
use crate::tensor::gradcheck::{check_gradients, GradCheck};
use crate::tensor::{sigmoid, softplus};
use crate::tensor::{Graph, Scalar, Tensor, Var};

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PreferencePair {
    pub prompt: Vec<usize>,
    pub chosen: Vec<usize>,
    pub rejected: Vec<usize>,
}

impl PreferencePair {
    pub fn validate(&self, max_seq_len: usize) -> Result<()> {
        for side in [&self.chosen, &self.rejected] {
            check_response(&self.prompt, side)?;
            let len = self.prompt.len() + side.len();
            if len > max_seq_len {
                return Err(Error::SequenceTooLong { len, max: max_seq_len });
            }
        }
        Ok(())
    }
}

/// Sequence log-probabilities of both answers of a pair.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PairLogprobs {
    pub chosen: f64,
    pub rejected: f64,
}

/// `β·(log π_θ − log π_ref)`.
pub fn implicit_reward(policy_lp: f64, ref_lp: f64, beta: f64) -> f64 {
    beta * (policy_lp - ref_lp)
}

/// Log-ratio margin `(π_w − ref_w) − (π_l − ref_l)`.
pub fn margin(policy: PairLogprobs, reference: PairLogprobs) -> f64 {
    (policy.chosen - reference.chosen) - (policy.rejected - reference.rejected)
}

/// Bradley–Terry preference probability in two algebraically equal forms.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PreferenceProb {
    /// `σ(β·[Δ_w − Δ_l])`.
    pub prob: f64,
    /// `σ(β·log π_θ(y_w)/π_θ(y_l) − γ)`.
    pub prob_gamma_form: f64,
    /// `β·log π_ref(y_w)/π_ref(y_l)`, constant in the policy.
    pub gamma: f64,
}

pub fn preference_prob_from_logprobs(policy: PairLogprobs, reference: PairLogprobs, beta: f64) -> PreferenceProb {
    let gamma = beta * (reference.chosen - reference.rejected);
    PreferenceProb {
        prob: sigmoid(beta * margin(policy, reference)),
        prob_gamma_form: sigmoid(beta * (policy.chosen - policy.rejected) - gamma),
        gamma,
    }
}

/// `−log σ(β·margin)`, as `softplus(−β·margin)`.
pub fn dpo_pair_loss(margin: f64, beta: f64) -> f64 {
    softplus(-beta * margin)
}

/// How reference log-probabilities are obtained.
#[derive(Debug, Clone)]
pub enum Reference<T> {
    /// Same weights with adapters switched off.
    Bypass,
    /// A retained frozen copy.
    Frozen(Box<TransformerLM<T>>),
}

pub fn reference_logprob<T: Scalar>(
    policy: &TransformerLM<T>,
    reference: &Reference<T>,
    prompt: &[usize],
    response: &[usize],
) -> Result<f64> {
    match reference {
        Reference::Bypass => {
            policy.check_bypass()?;
            policy.sequence_logprob_with(prompt, response, true)
        }
        Reference::Frozen(m) => m.sequence_logprob(prompt, response),
    }
}

/// Reference log-probs of every pair, in order.
pub fn reference_logprobs<T: Scalar>(
    policy: &TransformerLM<T>,
    reference: &Reference<T>,
    pairs: &[PreferencePair],
) -> Result<Vec<PairLogprobs>> {
    let (model, bypass) = match reference {
        Reference::Bypass => {
            policy.check_bypass()?;
            (policy, true)
        }
        Reference::Frozen(m) => (m.as_ref(), false),
    };
    pairs
        .iter()
        .map(|p| {
            Ok(PairLogprobs {
                chosen: model.sequence_logprob_with(&p.prompt, &p.chosen, bypass)?,
                rejected: model.sequence_logprob_with(&p.prompt, &p.rejected, bypass)?,
            })
        })
        .collect()
}

/// Policy log-probs of every pair with adapters applied.
pub fn policy_logprobs<T: Scalar>(policy: &TransformerLM<T>, pairs: &[PreferencePair]) -> Result<Vec<PairLogprobs>> {
    pairs
        .iter()
        .map(|p| {
            Ok(PairLogprobs {
                chosen: policy.sequence_logprob(&p.prompt, &p.chosen)?,
                rejected: policy.sequence_logprob(&p.prompt, &p.rejected)?,
            })
        })
        .collect()
}

/// Fraction of pairs whose log-ratio margin is positive.
pub fn margin_accuracy(policy: &[PairLogprobs], reference: &[PairLogprobs]) -> Result<f64> {
    if policy.is_empty() || policy.len() != reference.len() {
        return Err(Error::Empty("margin accuracy input"));
    }
    let wins = policy.iter().zip(reference).filter(|(p, r)| margin(**p, **r) > 0.0).count();
    Ok(wins as f64 / policy.len() as f64)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BatchStats {
    pub loss: f64,
    pub margin_mean: f64,
    pub margin_acc: f64,
    pub lp_chosen: f64,
    pub lp_rejected: f64,
    /// Mean log-probability of the `<eos>` closing the chosen answer.
    pub lp_eos: f64,
}

/// Mean DPO loss over `batch` on a bound graph; `refs` are detached constants.
pub fn dpo_loss<T: Scalar>(
    g: &mut Graph<T>,
    model: &TransformerLM<T>,
    bound: &BoundLM,
    batch: &[PreferencePair],
    refs: &[PairLogprobs],
    beta: f64,
) -> Result<(Var, BatchStats)> {
    if batch.is_empty() {
        return Err(Error::Empty("preference batch"));
    }
    if refs.len() != batch.len() {
        return Err(Error::InvalidShape {
            op: "dpo_loss",
            msg: format!("{} pairs but {} reference entries", batch.len(), refs.len()),
        });
    }
    if !(beta > 0.0) {
        return Err(Error::Config(format!("beta must be positive, got {beta}")));
    }
    let n = batch.len() as f64;
    let mut losses = Vec::with_capacity(batch.len());
    let (mut m_sum, mut wins, mut lpw_sum, mut lpl_sum, mut eos_sum) = (0.0, 0usize, 0.0, 0.0, 0.0);
    for (p, r) in batch.iter().zip(refs) {
        let tok_w = model.response_logprobs(g, bound, &p.prompt, &p.chosen)?;
        let tok_l = model.response_logprobs(g, bound, &p.prompt, &p.rejected)?;
        let lw = g.sum(tok_w);
        let ll = g.sum(tok_l);
        let diff = g.sub(lw, ll)?;
        let shifted = g.add_const(diff, T::from_f64(-(r.chosen - r.rejected)));
        let neg_z = g.scale(shifted, T::from_f64(-beta));
        losses.push(g.softplus(neg_z));

        let (vw, vl) = (g.value(lw).item().as_f64(), g.value(ll).item().as_f64());
        let m = margin(PairLogprobs { chosen: vw, rejected: vl }, *r);
        m_sum += m;
        wins += usize::from(m > 0.0);
        lpw_sum += vw;
        lpl_sum += vl;
        eos_sum += g.value(tok_w).data().last().expect("nonempty").as_f64();
    }
    let stacked = g.stack(&losses)?;
    let loss = g.mean(stacked);
    let stats = BatchStats {
        loss: g.value(loss).item().as_f64(),
        margin_mean: m_sum / n,
        margin_acc: wins as f64 / n,
        lp_chosen: lpw_sum / n,
        lp_rejected: lpl_sum / n,
        lp_eos: eos_sum / n,
    };
    Ok((loss, stats))
}

/// Evaluates the DPO loss and statistics without building gradients.
pub fn dpo_eval<T: Scalar>(
    model: &TransformerLM<T>,
    batch: &[PreferencePair],
    refs: &[PairLogprobs],
    beta: f64,
) -> Result<BatchStats> {
    let mut g = Graph::new();
    let b = model.bind(&mut g, Trainable::Nothing, false)?;
    Ok(dpo_loss(&mut g, model, &b, batch, refs, beta)?.1)
}

/// Finite-difference checks of the full DPO loss on a 2-layer, width-16 model.
///
/// Three parameter groups are checked: all base weights (frozen-copy reference),
/// full rotation adapters and rank-2 low-rank adapters (bypass reference), each
/// perturbed away from identity so no gradient vanishes by symmetry.
pub fn dpo_gradient_checks(seed: u64, h: f64, max_coords: usize) -> Result<Vec<(String, Vec<GradCheck>)>> {
    use rand::{Rng, SeedableRng};

    let cfg = LMConfig {
        vocab_size: 12,
        d_model: 16,
        n_layers: 2,
        n_heads: 2,
        d_ff: 32,
        max_seq_len: 16,
        attach_points: vec![MatrixKind::Q, MatrixKind::V],
    };
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
    let base = TransformerLM::<f64>::new(cfg, &mut rng)?;
    let batch = vec![
        PreferencePair {
            prompt: vec![1, 4, 5],
            chosen: vec![6, 7, 2],
            rejected: vec![6, 8, 9, 2],
        },
        PreferencePair {
            prompt: vec![1, 10, 4, 5],
            chosen: vec![4, 2],
            rejected: vec![11, 11, 4, 2],
        },
    ];
    let beta = 0.1;
    let mut jitter = |t: &mut Tensor<f64>, amp: f64| {
        for v in t.data_mut() {
            *v += rng.random_range(-amp..amp);
        }
    };

    let mut scenarios = Vec::new();
    let mut dpo = base.clone();
    for (_, t) in dpo.trainable_mut(Trainable::BaseWeights) {
        jitter(t, 0.05);
    }
    scenarios.push(("base weights", dpo, Reference::Frozen(Box::new(base.clone())), Trainable::BaseWeights));
    for (label, method) in [
        ("rotation adapters", AdapterMethod::Rotation { variant: Variant::Full }),
        ("low-rank adapters", AdapterMethod::LowRank { rank: 2, scale: 1.0 }),
    ] {
        let mut m = base.clone();
        let mut init = rand_chacha::ChaCha8Rng::seed_from_u64(seed ^ 1);
        m.attach_adapters(method, &[MatrixKind::Q, MatrixKind::V], &mut init)?;
        for (_, t) in m.trainable_mut(Trainable::Adapters) {
            jitter(t, 0.3);
        }
        scenarios.push((label, m, Reference::Bypass, Trainable::Adapters));
    }

    let mut out = Vec::new();
    for (label, mut model, reference, mode) in scenarios {
        let refs = reference_logprobs(&model, &reference, &batch)?;
        let params: Vec<Tensor<f64>> = model.trainable_mut(mode).into_iter().map(|(_, t)| t.clone()).collect();
        let checks = check_gradients(&params, h, max_coords, seed, |g, vars| {
            let mut it = vars.iter();
            let b = model.bind_leaves(g, mode, false, |_, _| *it.next().expect("one leaf per tensor"))?;
            Ok(dpo_loss(g, &model, &b, &batch, &refs, beta)?.0)
        })?;
        out.push((label.to_string(), checks));
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn reward_cases() {
        assert_eq!(implicit_reward(-3.0, -3.0, 0.1), 0.0);
        assert!((implicit_reward(-1.0, -11.0, 0.1) - 1.0).abs() < 1e-12);
        assert!((implicit_reward(4.0, 0.0, 0.2) - implicit_reward(8.0, 0.0, 0.1)).abs() < 1e-12);
    }

    #[test]
    fn probability_forms() {
        let same = PairLogprobs { chosen: -4.0, rejected: -7.0 };
        assert_eq!(preference_prob_from_logprobs(same, same, 0.1).prob, 0.5);
        let pol = PairLogprobs { chosen: 0.0, rejected: -10.0 };
        let refp = PairLogprobs { chosen: 0.0, rejected: 0.0 };
        let p = preference_prob_from_logprobs(pol, refp, 0.1);
        assert!((p.prob - 0.731_058_578_630_005).abs() < 1e-12);
    }

    #[test]
    fn loss_values() {
        assert!((dpo_pair_loss(0.0, 0.1) - std::f64::consts::LN_2).abs() < 1e-15);
        assert!((dpo_pair_loss(10.0, 0.1) - 0.313_261_687_518_222_8).abs() < 1e-12);
        assert!((dpo_pair_loss(5.0, 0.2) - dpo_pair_loss(10.0, 0.1)).abs() < 1e-15);
        assert!(dpo_pair_loss(-1e4, 0.1).is_finite());
        let grid: Vec<f64> = (-50..=50).map(|i| dpo_pair_loss(i as f64, 0.3)).collect();
        assert!(grid.windows(2).all(|w| w[1] < w[0]));
    }
}
