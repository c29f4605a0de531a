//! `ropo`: synthetic data, SFT, preference alignment, energy diagnostics, evaluation, merging.
//!
//! Exit codes: 0 success, 1 usage or configuration error, 2 runtime or data error.
//! Errors go to stderr as a single `error[<code>]: <message>` line.

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use serde::de::DeserializeOwned;
use serde_json::{json, Map, Value};

use ropo::corpus::{gen_synthetic, CorpusDir, SynthConfig};
use ropo::energy::{energy_report, MatrixKind};
use ropo::lm::{SamplerConfig, TransformerLM};
use ropo::metrics::{eval_suite, EvalSettings, Provenance};
use ropo::prefopt::Reference;
use ropo::store::{
    attach_adapter_checkpoint, load_model, model_checkpoint, sha256_file, Checkpoint, ModelMeta, RunManifest,
};
use ropo::trainer::{align_train, sft_train, SftConfig, TrainConfig};
use ropo::Error;

#[derive(Parser)]
#[command(name = "ropo", version, about = "Desk-scale rotated preference optimization")]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Generate the synthetic copy-with-terminate corpus.
    GenData(GenDataArgs),
    /// Supervised fine-tuning of a fresh model.
    Sft(SftArgs),
    /// Preference optimization from an SFT checkpoint.
    Align(AlignArgs),
    /// Hyperspherical-energy deltas between two checkpoints.
    Diagnose(DiagnoseArgs),
    /// Sample the dev prompts and score the generations.
    Eval(EvalArgs),
    /// Fold an adapter file into its base checkpoint.
    Merge(MergeArgs),
}

#[derive(Args)]
struct GenDataArgs {
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Args)]
struct SftArgs {
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    data: Option<PathBuf>,
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    steps: Option<usize>,
}

#[derive(Args)]
struct AlignArgs {
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    method: Option<String>,
    #[arg(long)]
    variant: Option<String>,
    #[arg(long)]
    beta: Option<f64>,
    #[arg(long)]
    sft: Option<PathBuf>,
    #[arg(long)]
    data: Option<PathBuf>,
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    steps: Option<usize>,
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long)]
    rank: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    checkpoint_every: Option<usize>,
}

#[derive(Args)]
struct DiagnoseArgs {
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    before: Option<PathBuf>,
    #[arg(long)]
    after: Option<PathBuf>,
    /// Comma-separated subset of q,k,v,o,ffn.
    #[arg(long)]
    kinds: Option<String>,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct EvalArgs {
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    ckpt: Option<PathBuf>,
    /// Adapter file to attach to `--ckpt` before evaluating.
    #[arg(long)]
    adapter: Option<PathBuf>,
    /// Reference checkpoint for margin accuracy; adapter-attached models default to bypass.
    #[arg(long)]
    reference: Option<PathBuf>,
    #[arg(long)]
    data: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long)]
    n_prompts: Option<usize>,
    #[arg(long)]
    max_new: Option<usize>,
}

#[derive(Args)]
struct MergeArgs {
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    base: Option<PathBuf>,
    #[arg(long)]
    adapter: Option<PathBuf>,
    #[arg(long)]
    out: Option<PathBuf>,
}

enum Fail {
    Usage(String),
    Run(Error),
}

impl From<Error> for Fail {
    fn from(e: Error) -> Self {
        Fail::Run(e)
    }
}

impl Fail {
    fn report(&self) -> (u8, String) {
        match self {
            Fail::Usage(m) => (1, format!("error[usage]: {m}")),
            Fail::Run(e) => {
                let code = if e.is_config() { 1 } else { 2 };
                (code, format!("error[{}]: {e}", e.code()))
            }
        }
    }
}

type Res<T> = std::result::Result<T, Fail>;

fn config_err(msg: impl Into<String>) -> Fail {
    Fail::Run(Error::Config(msg.into()))
}

/// Settings from `--config` (a JSON object) with flags layered on top.
struct Layered {
    obj: Map<String, Value>,
}

impl Layered {
    fn load(path: Option<&Path>) -> Res<Self> {
        let Some(path) = path else {
            return Ok(Self { obj: Map::new() });
        };
        let text = std::fs::read_to_string(path)
            .map_err(|e| config_err(format!("cannot read config {}: {e}", path.display())))?;
        match serde_json::from_str::<Value>(&text) {
            Ok(Value::Object(obj)) => Ok(Self { obj }),
            Ok(_) => Err(config_err(format!("{}: config must be a JSON object", path.display()))),
            Err(e) => Err(config_err(format!("{}: {e}", path.display()))),
        }
    }

    fn set<V: serde::Serialize>(&mut self, key: &str, flag: Option<V>) {
        if let Some(v) = flag {
            self.obj.insert(key.into(), serde_json::to_value(v).expect("flag serializes"));
        }
    }

    fn snapshot(&self) -> Value {
        Value::Object(self.obj.clone())
    }

    fn take_path(&mut self, key: &str) -> Res<PathBuf> {
        match self.obj.remove(key) {
            Some(Value::String(s)) => Ok(PathBuf::from(s)),
            Some(other) => Err(config_err(format!("'{key}' must be a path string, got {other}"))),
            None => Err(Fail::Usage(format!("missing --{}", key.replace('_', "-")))),
        }
    }

    fn take_opt_path(&mut self, key: &str) -> Res<Option<PathBuf>> {
        if self.obj.contains_key(key) {
            self.take_path(key).map(Some)
        } else {
            Ok(None)
        }
    }

    fn take<T: DeserializeOwned>(&mut self, key: &str) -> Res<Option<T>> {
        match self.obj.remove(key) {
            None => Ok(None),
            Some(v) => serde_json::from_value(v)
                .map(Some)
                .map_err(|e| config_err(format!("'{key}': {e}"))),
        }
    }

    /// Deserializes what remains; unknown keys are rejected by the target type.
    fn finish<T: DeserializeOwned>(self, what: &str) -> Res<T> {
        serde_json::from_value(Value::Object(self.obj)).map_err(|e| config_err(format!("{what}: {e}")))
    }
}

fn manifest_beside(file: &Path) -> PathBuf {
    let mut name = file.file_name().map(|n| n.to_os_string()).unwrap_or_default();
    name.push(".manifest.json");
    file.with_file_name(name)
}

fn ensure_parent(path: &Path) -> Res<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    Ok(())
}

fn gen_data(a: GenDataArgs) -> Res<()> {
    let mut l = Layered::load(a.config.as_deref())?;
    l.set("out", a.out);
    l.set("seed", a.seed);
    let snapshot = l.snapshot();
    let out = l.take_path("out")?;
    let cfg: SynthConfig = l.finish("gen-data config")?;
    let files = gen_synthetic(&cfg, &out)?;
    let mut m = RunManifest::new("gen-data", snapshot, cfg.seed);
    for f in &files {
        m.add_output(f);
    }
    m.save(&out.join("manifest.json"))?;
    log::info!("wrote {} files to {}", files.len(), out.display());
    Ok(())
}

fn sft(a: SftArgs) -> Res<()> {
    let mut l = Layered::load(a.config.as_deref())?;
    l.set("data", a.data);
    l.set("out", a.out);
    l.set("seed", a.seed);
    l.set("lr", a.lr);
    l.set("epochs", a.epochs);
    l.set("steps", a.steps);
    let snapshot = l.snapshot();
    let data = l.take_path("data")?;
    let out = l.take_path("out")?;
    let cfg: SftConfig = l.finish("sft config")?;
    cfg.validate()?;
    let corpus = CorpusDir::load(&data)?;
    ensure_parent(&out)?;
    let run = sft_train::<f32>(&corpus.sft, corpus.vocab.len(), &cfg, Some(&out))?;
    let mut m = RunManifest::new("sft", snapshot, cfg.seed);
    for f in CorpusDir::files(&data) {
        m.add_input(&f)?;
    }
    for f in &run.outputs {
        m.add_output(f);
    }
    m.details.insert("parameters".into(), json!(run.model.base_param_count()));
    if let Some(last) = run.log.last() {
        m.details.insert("final_loss".into(), json!(last.loss));
        log::info!("sft: {} steps, final batch loss {:.4}", last.step + 1, last.loss);
    }
    m.save(&manifest_beside(&out))?;
    Ok(())
}

fn align(a: AlignArgs) -> Res<()> {
    let mut l = Layered::load(a.config.as_deref())?;
    l.set("method", a.method);
    l.set("variant", a.variant);
    l.set("beta", a.beta);
    l.set("sft", a.sft);
    l.set("data", a.data);
    l.set("out", a.out);
    l.set("lr", a.lr);
    l.set("epochs", a.epochs);
    l.set("steps", a.steps);
    l.set("batch_size", a.batch_size);
    l.set("rank", a.rank);
    l.set("seed", a.seed);
    l.set("checkpoint_every", a.checkpoint_every);
    let snapshot = l.snapshot();
    let sft_path = l.take_path("sft")?;
    let data = l.take_path("data")?;
    let out = l.take_path("out")?;
    let cfg: TrainConfig = l.finish("align config")?;
    cfg.validate()?;
    let (sft, _) = load_model::<f32>(&sft_path)?;
    let corpus = CorpusDir::load(&data)?;
    let run = align_train(&sft, &corpus.train, &cfg, Some(&out))?;
    let mut m = RunManifest::new("align", snapshot, cfg.seed);
    m.add_input(&sft_path)?;
    for f in CorpusDir::files(&data) {
        m.add_input(&f)?;
    }
    for f in &run.outputs {
        m.add_output(f);
    }
    let mode = match cfg.method {
        ropo::trainer::MethodKind::Dpo => ropo::lm::Trainable::BaseWeights,
        _ => ropo::lm::Trainable::Adapters,
    };
    m.details.insert("method".into(), json!(cfg.method_label()));
    m.details.insert("trainable_parameters".into(), json!(run.model.trainable_count(mode)));
    m.details.insert("total_steps".into(), json!(cfg.total_steps(corpus.train.len())));
    m.save(&out.join("manifest.json"))?;
    if let Some(last) = run.log.last() {
        log::info!(
            "{}: {} steps, last loss {:.4}, margin acc {:.3}",
            cfg.method_label(),
            last.step + 1,
            last.loss,
            last.margin_acc
        );
    }
    Ok(())
}

fn diagnose(a: DiagnoseArgs) -> Res<()> {
    let mut l = Layered::load(a.config.as_deref())?;
    l.set("before", a.before);
    l.set("after", a.after);
    l.set("kinds", a.kinds);
    l.set("out", a.out);
    let snapshot = l.snapshot();
    let before = l.take_path("before")?;
    let after = l.take_path("after")?;
    let out = l.take_path("out")?;
    let kinds = match l.take::<String>("kinds")? {
        Some(s) => MatrixKind::parse_list(&s)?,
        None => vec![MatrixKind::Q, MatrixKind::K, MatrixKind::V],
    };
    reject_rest(l, "diagnose")?;
    let report = energy_report(&before, &after, &kinds)?;
    ensure_parent(&out)?;
    report.save_csv(&out)?;
    let mut m = RunManifest::new("diagnose", snapshot, 0);
    m.add_input(&before)?;
    m.add_input(&after)?;
    m.add_output(&out);
    m.details.insert("sahe".into(), json!(report.sahe));
    m.save(&manifest_beside(&out))?;
    println!("sahe {:?}", report.sahe);
    Ok(())
}

fn reject_rest(l: Layered, what: &str) -> Res<()> {
    if l.obj.is_empty() {
        Ok(())
    } else {
        Err(config_err(format!("unknown {what} settings: {:?}", l.obj.keys().collect::<Vec<_>>())))
    }
}

fn eval(a: EvalArgs) -> Res<()> {
    let mut l = Layered::load(a.config.as_deref())?;
    l.set("ckpt", a.ckpt);
    l.set("adapter", a.adapter);
    l.set("reference", a.reference);
    l.set("data", a.data);
    l.set("seed", a.seed);
    l.set("out", a.out);
    l.set("n_prompts", a.n_prompts);
    l.set("max_new", a.max_new);
    let snapshot = l.snapshot();
    let ckpt = l.take_path("ckpt")?;
    let adapter = l.take_opt_path("adapter")?;
    let reference_path = l.take_opt_path("reference")?;
    let data = l.take_path("data")?;
    let out = l.take_path("out")?;
    let defaults = EvalSettings::default();
    let settings = EvalSettings {
        seed: l.take("seed")?.unwrap_or(defaults.seed),
        n_prompts: l.take("n_prompts")?.unwrap_or(defaults.n_prompts),
        max_new: l.take("max_new")?.unwrap_or(defaults.max_new),
        sampler: l.take::<SamplerConfig>("sampler")?.unwrap_or(defaults.sampler),
    };
    reject_rest(l, "eval")?;
    settings.sampler.validate()?;

    let (mut model, meta) = load_model::<f32>(&ckpt)?;
    let mut method = meta.method.clone();
    if let Some(path) = &adapter {
        let am = attach_adapter_checkpoint(&mut model, &Checkpoint::load(path)?)?;
        method = am.method;
    }
    let (reference, ref_label): (Option<Reference<f32>>, String) = match (&reference_path, model.adapters()) {
        (Some(p), _) => {
            let (r, _) = load_model::<f32>(p)?;
            if !r.config().same_architecture(model.config()) {
                return Err(Error::ArchitectureMismatch("reference and evaluated model differ".into()).into());
            }
            (Some(Reference::Frozen(Box::new(r))), p.display().to_string())
        }
        (None, Some(_)) => (Some(Reference::Bypass), "bypass".into()),
        (None, None) => (None, String::new()),
    };
    let corpus = CorpusDir::load(&data)?;
    let provenance = Provenance {
        method,
        checkpoint: ckpt.display().to_string(),
        checkpoint_sha256: sha256_file(&ckpt)?,
        reference: ref_label,
    };
    let report = eval_suite(&model, reference.as_ref(), &corpus.dev, &corpus.vocab, &settings, provenance)?;
    ensure_parent(&out)?;
    report.save_json(&out)?;
    let csv_path = out.with_extension("csv");
    let f = std::fs::File::create(&csv_path).map_err(|e| Error::io(&csv_path, e))?;
    report.write_csv(f)?;

    let mut m = RunManifest::new("eval", snapshot, settings.seed);
    m.add_input(&ckpt)?;
    for p in adapter.iter().chain(reference_path.iter()) {
        m.add_input(p)?;
    }
    for f in CorpusDir::files(&data) {
        m.add_input(&f)?;
    }
    m.add_output(&out);
    m.add_output(&csv_path);
    m.save(&manifest_beside(&out))?;
    log::info!(
        "eval: mean length {:.3}, distinct-n {}, margin acc {}",
        report.mean_length,
        report.distinct_n.map_or("n/a".into(), |v| format!("{v:.4}")),
        report.margin_acc.map_or("n/a".into(), |v| format!("{v:.3}"))
    );
    Ok(())
}

fn merge(a: MergeArgs) -> Res<()> {
    let mut l = Layered::load(a.config.as_deref())?;
    l.set("base", a.base);
    l.set("adapter", a.adapter);
    l.set("out", a.out);
    let snapshot = l.snapshot();
    let base = l.take_path("base")?;
    let adapter = l.take_path("adapter")?;
    let out = l.take_path("out")?;
    reject_rest(l, "merge")?;

    let (mut model, base_meta): (TransformerLM<f32>, ModelMeta) = load_model(&base)?;
    if model.adapters().is_some() {
        return Err(config_err("base checkpoint already carries adapters; merge expects a plain model"));
    }
    let am = attach_adapter_checkpoint(&mut model, &Checkpoint::load(&adapter)?)?;
    if let Some(a) = &am.adapter {
        if a.base_fingerprint != model.base_fingerprint() {
            log::warn!("adapter was trained on a different base model than {}", base.display());
        }
    }
    model.merge_adapters()?;
    let mut meta = ModelMeta::new(&model, &format!("{}+merged", am.method), am.step, am.seed);
    meta.extra = json!({ "base_sha256": sha256_file(&base)?, "base_method": base_meta.method });
    ensure_parent(&out)?;
    model_checkpoint(&model, &meta)?.save(&out)?;
    let mut m = RunManifest::new("merge", snapshot, am.seed);
    m.add_input(&base)?;
    m.add_input(&adapter)?;
    m.add_output(&out);
    m.save(&manifest_beside(&out))?;
    Ok(())
}

fn init_logging() -> Option<String> {
    let (level, bad) = match std::env::var("ROPO_LOG").ok().as_deref() {
        None | Some("info") => (log::LevelFilter::Info, None),
        Some("quiet") => (log::LevelFilter::Error, None),
        Some("debug") => (log::LevelFilter::Debug, None),
        Some(other) => (log::LevelFilter::Info, Some(other.to_string())),
    };
    env_logger::Builder::new()
        .filter_level(level)
        .format_timestamp(None)
        .format_target(false)
        .init();
    bad
}

fn run(cli: Cli) -> Res<()> {
    match cli.cmd {
        Cmd::GenData(a) => gen_data(a),
        Cmd::Sft(a) => sft(a),
        Cmd::Align(a) => align(a),
        Cmd::Diagnose(a) => diagnose(a),
        Cmd::Eval(a) => eval(a),
        Cmd::Merge(a) => merge(a),
    }
}

fn main() -> ExitCode {
    if let Some(bad) = init_logging() {
        eprintln!("error[usage]: ROPO_LOG must be quiet, info or debug, got '{bad}'");
        return ExitCode::from(1);
    }
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            use clap::error::ErrorKind;
            if matches!(e.kind(), ErrorKind::DisplayHelp | ErrorKind::DisplayVersion) {
                print!("{e}");
                return ExitCode::SUCCESS;
            }
            let msg = e.to_string();
            let first = msg.lines().next().unwrap_or("invalid arguments");
            eprintln!("error[usage]: {}", first.trim_start_matches("error: "));
            return ExitCode::from(1);
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            let (code, line) = f.report();
            eprintln!("{line}");
            ExitCode::from(code)
        }
    }
}
