//! Diversity, length-weighted win rate, and the evaluation suite.

use std::collections::HashSet;
use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::corpus::Vocab;
use crate::error::{Error, Result};
use crate::lm::{SamplerConfig, TransformerLM};
use crate::prefopt::{margin_accuracy, policy_logprobs, reference_logprobs, PreferencePair, Reference};
use crate::tensor::Scalar;

/// Geometric mean over n = 1..4 of unique/total n-grams, pooled across outputs.
///
/// N-grams never straddle two outputs.
pub fn distinct_n_geomean(outputs: &[Vec<usize>]) -> Result<f64> {
    if outputs.is_empty() {
        return Err(Error::Empty("output list"));
    }
    let pooled: usize = outputs.iter().map(Vec::len).sum();
    if pooled < 4 {
        return Err(Error::InvalidShape {
            op: "distinct_n_geomean",
            msg: format!("pooled length {pooled} < 4"),
        });
    }
    let mut log_sum = 0.0;
    for n in 1..=4 {
        let mut seen: HashSet<&[usize]> = HashSet::new();
        let mut total = 0usize;
        for o in outputs {
            for w in o.windows(n) {
                seen.insert(w);
                total += 1;
            }
        }
        if total == 0 {
            return Err(Error::InvalidShape {
                op: "distinct_n_geomean",
                msg: format!("no output is long enough for {n}-grams"),
            });
        }
        log_sum += (seen.len() as f64 / total as f64).ln();
    }
    Ok((log_sum / 4.0).exp())
}

/// Length-weighted win rate: `wr · len_ref / len_gen`.
pub fn wwr(win_rate_percent: f64, len_ref: f64, len_gen: f64) -> Result<f64> {
    if !(len_gen > 0.0) {
        return Err(Error::Config(format!("generation length must be positive, got {len_gen}")));
    }
    Ok(win_rate_percent * len_ref / len_gen)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EvalSettings {
    pub n_prompts: usize,
    pub max_new: usize,
    pub sampler: SamplerConfig,
    pub seed: u64,
}

impl Default for EvalSettings {
    fn default() -> Self {
        Self {
            n_prompts: 200,
            max_new: 40,
            sampler: SamplerConfig::default(),
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Generation {
    pub prompt: String,
    pub output: String,
    pub length: usize,
}

/// Where a report came from; excluded when comparing reports for equality of content.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize, Default)]
pub struct Provenance {
    pub method: String,
    pub checkpoint: String,
    pub checkpoint_sha256: String,
    pub reference: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub settings: EvalSettings,
    pub n_prompts: usize,
    /// Mean generated tokens per prompt, `<eos>` included.
    pub mean_length: f64,
    /// `None` when some n-gram order is absent (e.g. every output is a bare `<eos>`).
    pub distinct_n: Option<f64>,
    pub margin_acc: Option<f64>,
    pub generations: Vec<Generation>,
    pub provenance: Provenance,
}

impl EvalReport {
    /// Equality of everything except provenance.
    pub fn same_content(&self, other: &EvalReport) -> bool {
        let strip = |r: &EvalReport| EvalReport {
            provenance: Provenance::default(),
            ..r.clone()
        };
        strip(self) == strip(other)
    }

    pub fn csv_header() -> [&'static str; 7] {
        ["method", "checkpoint", "n_prompts", "mean_length", "distinct_n", "margin_acc", "seed"]
    }

    pub fn csv_row(&self) -> [String; 7] {
        [
            self.provenance.method.clone(),
            self.provenance.checkpoint.clone(),
            self.n_prompts.to_string(),
            format!("{:?}", self.mean_length),
            self.distinct_n.map_or(String::new(), |v| format!("{v:?}")),
            self.margin_acc.map_or(String::new(), |v| format!("{v:?}")),
            self.settings.seed.to_string(),
        ]
    }

    /// Writes a header and this report's row.
    pub fn write_csv<W: Write>(&self, out: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        w.write_record(Self::csv_header())?;
        w.write_record(self.csv_row())?;
        w.flush().map_err(|e| Error::io("<csv>", e))?;
        Ok(())
    }

    pub fn save_json(&self, path: &Path) -> Result<()> {
        let mut text = serde_json::to_string_pretty(self)?;
        text.push('\n');
        std::fs::write(path, text).map_err(|e| Error::io(path, e))
    }

    pub fn load_json(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Ok(serde_json::from_str(&text)?)
    }
}

/// Samples one completion per dev prompt (seed `settings.seed ^ index`) and scores the set.
///
/// Margin accuracy is computed only when a reference is supplied.
pub fn eval_suite<T: Scalar>(
    model: &TransformerLM<T>,
    reference: Option<&Reference<T>>,
    dev: &[PreferencePair],
    vocab: &Vocab,
    settings: &EvalSettings,
    provenance: Provenance,
) -> Result<EvalReport> {
    settings.sampler.validate()?;
    let n = settings.n_prompts.min(dev.len());
    if n == 0 {
        return Err(Error::Empty("dev set"));
    }
    let pairs = &dev[..n];
    let mut generations = Vec::with_capacity(n);
    let mut outputs = Vec::with_capacity(n);
    for (i, p) in pairs.iter().enumerate() {
        let out = model.sample(&p.prompt, &settings.sampler, settings.max_new, settings.seed ^ i as u64)?;
        generations.push(Generation {
            prompt: vocab.detokenize(&p.prompt),
            output: vocab.detokenize(&out),
            length: out.len(),
        });
        outputs.push(out);
    }
    let mean_length = outputs.iter().map(Vec::len).sum::<usize>() as f64 / n as f64;
    let distinct_n = match distinct_n_geomean(&outputs) {
        Ok(v) => Some(v),
        Err(e @ Error::InvalidShape { .. }) => {
            log::warn!("distinct-n undefined: {e}");
            None
        }
        Err(e) => return Err(e),
    };
    let margin_acc = match reference {
        Some(r) => {
            let refs = reference_logprobs(model, r, pairs)?;
            let pol = policy_logprobs(model, pairs)?;
            Some(margin_accuracy(&pol, &refs)?)
        }
        None => None,
    };
    Ok(EvalReport {
        settings: *settings,
        n_prompts: n,
        mean_length,
        distinct_n,
        margin_acc,
        generations,
        provenance,
    })
}
