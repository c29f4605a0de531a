//! Whitespace vocabulary, the copy-with-terminate preference task, and JSONL I/O.
//!
//! Task: the prompt lists a few content symbols and the preferred answer
//! copies them and stops. The dispreferred answer copies imperfectly, then
//! rambles for a geometric number of filler tokens before stopping, so
//! rejected answers are both less correct and longer.

use std::collections::HashMap;
use std::fs;
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};

use rand::seq::IndexedRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Geometric};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::prefopt::PreferencePair;

pub const PAD: usize = 0;
pub const BOS: usize = 1;
pub const EOS: usize = 2;
pub const UNK: usize = 3;
pub const RESERVED: [&str; 4] = ["<pad>", "<bos>", "<eos>", "<unk>"];

pub const QUERY: &str = "q";
pub const SEP: &str = ":";
pub const FILLERS: [&str; 5] = ["um", "uh", "well", "so", "like"];
pub const LEAD_INS: [&str; 4] = ["sure", "ok", "here", "yes"];

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Vocab {
    tokens: Vec<String>,
    index: HashMap<String, usize>,
}

impl Vocab {
    /// Builds a vocabulary; the reserved tokens are prepended and duplicates rejected.
    pub fn new<S: AsRef<str>>(words: &[S]) -> Result<Self> {
        let mut tokens: Vec<String> = RESERVED.iter().map(|s| s.to_string()).collect();
        tokens.extend(words.iter().map(|w| w.as_ref().to_string()));
        Self::from_tokens(tokens)
    }

    fn from_tokens(tokens: Vec<String>) -> Result<Self> {
        if tokens.len() < RESERVED.len() || tokens[..RESERVED.len()] != RESERVED {
            return Err(Error::Config(format!("vocabulary must start with {RESERVED:?}")));
        }
        let mut index = HashMap::with_capacity(tokens.len());
        for (i, t) in tokens.iter().enumerate() {
            if t.is_empty() || t.chars().any(char::is_whitespace) {
                return Err(Error::Config(format!("invalid token {t:?} at id {i}")));
            }
            if index.insert(t.clone(), i).is_some() {
                return Err(Error::Config(format!("duplicate token {t:?}")));
            }
        }
        Ok(Self { tokens, index })
    }

    /// Vocabulary of the synthetic task with `content` content symbols.
    pub fn synthetic(content: usize) -> Result<Self> {
        let mut words: Vec<String> = vec![QUERY.into(), SEP.into()];
        words.extend(FILLERS.iter().map(|s| s.to_string()));
        words.extend(LEAD_INS.iter().map(|s| s.to_string()));
        words.extend((0..content).map(content_token));
        Self::new(&words)
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn id(&self, token: &str) -> usize {
        self.index.get(token).copied().unwrap_or(UNK)
    }

    pub fn token(&self, id: usize) -> &str {
        self.tokens.get(id).map_or("<unk>", String::as_str)
    }

    pub fn tokens(&self) -> &[String] {
        &self.tokens
    }

    pub fn tokenize(&self, text: &str) -> Vec<usize> {
        text.split_whitespace().map(|w| self.id(w)).collect()
    }

    pub fn detokenize(&self, ids: &[usize]) -> String {
        ids.iter().map(|&i| self.token(i)).collect::<Vec<_>>().join(" ")
    }

    /// One token per line, line index = id.
    pub fn save(&self, path: &Path) -> Result<()> {
        let mut text = self.tokens.join("\n");
        text.push('\n');
        fs::write(path, text).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_tokens(text.lines().map(str::to_string).collect())
    }
}

fn content_token(i: usize) -> String {
    format!("c{i:02}")
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SynthConfig {
    pub n_train: usize,
    pub n_dev: usize,
    pub content_vocab: usize,
    pub len_min: usize,
    pub len_max: usize,
    /// Success probability of the filler-length geometric distribution.
    pub filler_p: f64,
    /// Per-token probability of corrupting the rejected answer's copy.
    pub corruption: f64,
    /// Fraction of SFT targets that open with a lead-in word.
    pub sft_variety: f64,
    pub max_seq_len: usize,
    pub seed: u64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            n_train: 2000,
            n_dev: 200,
            content_vocab: 50,
            len_min: 3,
            len_max: 6,
            filler_p: 0.25,
            corruption: 0.2,
            sft_variety: 0.2,
            max_seq_len: 64,
            seed: 0,
        }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.n_train == 0 {
            return bad("n_train must be positive".into());
        }
        if self.content_vocab < 2 {
            return bad(format!("content_vocab {} < 2", self.content_vocab));
        }
        if self.len_min == 0 || self.len_min > self.len_max {
            return bad(format!("invalid length range [{}, {}]", self.len_min, self.len_max));
        }
        if !(self.filler_p > 0.0 && self.filler_p < 1.0) {
            return bad(format!("filler_p {} outside (0, 1)", self.filler_p));
        }
        if !(0.0..=1.0).contains(&self.corruption) || !(0.0..=1.0).contains(&self.sft_variety) {
            return bad("corruption and sft_variety must lie in [0, 1]".into());
        }
        // prompt (len_max + 3) + chosen (len_max + 1) must fit, with room for one filler
        if 2 * self.len_max + 5 > self.max_seq_len {
            return bad(format!(
                "max_seq_len {} too small for answers of length {}",
                self.max_seq_len, self.len_max
            ));
        }
        Ok(())
    }
}

/// One preference record as text.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PrefRecord {
    pub prompt: String,
    pub chosen: String,
    pub rejected: String,
}

/// One supervised record as text.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SftRecord {
    pub prompt: String,
    pub response: String,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SynthCorpus {
    pub vocab: Vocab,
    pub train: Vec<PrefRecord>,
    pub dev: Vec<PrefRecord>,
    pub sft: Vec<SftRecord>,
}

struct Generator<'a> {
    cfg: &'a SynthConfig,
    content: Vec<String>,
    filler_len: Geometric,
}

impl Generator<'_> {
    fn symbols(&self, rng: &mut ChaCha8Rng) -> Vec<String> {
        let len = rng.random_range(self.cfg.len_min..=self.cfg.len_max);
        (0..len).map(|_| self.content.choose(rng).expect("content").clone()).collect()
    }

    fn prompt(symbols: &[String]) -> String {
        format!("<bos> {QUERY} {} {SEP}", symbols.join(" "))
    }

    fn pair(&self, rng: &mut ChaCha8Rng) -> PrefRecord {
        let s = self.symbols(rng);
        let prompt_len = s.len() + 3;
        let max_filler = self.cfg.max_seq_len - prompt_len - s.len() - 1;
        let chosen: Vec<&str> = s.iter().map(String::as_str).chain(["<eos>"]).collect();
        loop {
            let mut rejected: Vec<&str> = s
                .iter()
                .map(|tok| {
                    if rng.random_bool(self.cfg.corruption) {
                        loop {
                            let c = self.content.choose(rng).expect("content");
                            if c != tok {
                                break c.as_str();
                            }
                        }
                    } else {
                        tok.as_str()
                    }
                })
                .collect();
            let n_filler = (self.filler_len.sample(rng) as usize).min(max_filler);
            for _ in 0..n_filler {
                rejected.push(FILLERS.choose(rng).expect("fillers"));
            }
            rejected.push("<eos>");
            // an uncorrupted, filler-free draw equals the chosen answer and carries no preference
            if rejected != chosen {
                return PrefRecord {
                    prompt: Self::prompt(&s),
                    chosen: chosen.join(" "),
                    rejected: rejected.join(" "),
                };
            }
        }
    }

    fn sft(&self, rng: &mut ChaCha8Rng) -> SftRecord {
        let s = self.symbols(rng);
        let mut resp: Vec<&str> = Vec::with_capacity(s.len() + 2);
        if rng.random_bool(self.cfg.sft_variety) {
            resp.push(LEAD_INS.choose(rng).expect("lead-ins"));
        }
        resp.extend(s.iter().map(String::as_str));
        resp.push("<eos>");
        SftRecord {
            prompt: Self::prompt(&s),
            response: resp.join(" "),
        }
    }
}

/// Generates the synthetic corpus; a pure function of `cfg`.
pub fn synthesize(cfg: &SynthConfig) -> Result<SynthCorpus> {
    cfg.validate()?;
    let vocab = Vocab::synthetic(cfg.content_vocab)?;
    let gen = Generator {
        cfg,
        content: (0..cfg.content_vocab).map(content_token).collect(),
        filler_len: Geometric::new(cfg.filler_p).map_err(|e| Error::Config(e.to_string()))?,
    };
    // independent streams so that resizing one split leaves the others unchanged
    let mut rng_train = ChaCha8Rng::seed_from_u64(cfg.seed);
    rng_train.set_stream(1);
    let mut rng_dev = ChaCha8Rng::seed_from_u64(cfg.seed);
    rng_dev.set_stream(2);
    let mut rng_sft = ChaCha8Rng::seed_from_u64(cfg.seed);
    rng_sft.set_stream(3);
    let train = (0..cfg.n_train).map(|_| gen.pair(&mut rng_train)).collect();
    let dev = (0..cfg.n_dev).map(|_| gen.pair(&mut rng_dev)).collect();
    let sft = (0..cfg.n_train).map(|_| gen.sft(&mut rng_sft)).collect();
    Ok(SynthCorpus { vocab, train, dev, sft })
}

pub const TRAIN_FILE: &str = "train.jsonl";
pub const DEV_FILE: &str = "dev.jsonl";
pub const SFT_FILE: &str = "sft.jsonl";
pub const VOCAB_FILE: &str = "vocab.txt";

fn write_jsonl<R: Serialize>(path: &Path, records: &[R]) -> Result<()> {
    let f = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = std::io::BufWriter::new(f);
    for r in records {
        serde_json::to_writer(&mut w, r)?;
        w.write_all(b"\n").map_err(|e| Error::io(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

/// Writes the corpus files into `dir`, returning their paths.
pub fn gen_synthetic(cfg: &SynthConfig, dir: &Path) -> Result<Vec<PathBuf>> {
    let corpus = synthesize(cfg)?;
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let paths: Vec<PathBuf> = [TRAIN_FILE, DEV_FILE, SFT_FILE, VOCAB_FILE].iter().map(|f| dir.join(f)).collect();
    write_jsonl(&paths[0], &corpus.train)?;
    write_jsonl(&paths[1], &corpus.dev)?;
    write_jsonl(&paths[2], &corpus.sft)?;
    corpus.vocab.save(&paths[3])?;
    Ok(paths)
}

/// Records parsed from a JSONL file plus how many answers lacked `<eos>`.
#[derive(Debug, Clone, PartialEq)]
pub struct Loaded<T> {
    pub items: Vec<T>,
    pub eos_appended: usize,
}

fn read_records<R: for<'de> Deserialize<'de>>(path: &Path) -> Result<Vec<(usize, R)>> {
    let f = fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let mut out = Vec::new();
    for (i, line) in BufReader::new(f).lines().enumerate() {
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let rec = serde_json::from_str(&line).map_err(|e| Error::Data {
            path: path.to_path_buf(),
            line: i + 1,
            msg: e.to_string(),
        })?;
        out.push((i + 1, rec));
    }
    Ok(out)
}

fn answer(vocab: &Vocab, text: &str, appended: &mut usize) -> Vec<usize> {
    let mut ids = vocab.tokenize(text);
    if ids.last() != Some(&EOS) {
        ids.push(EOS);
        *appended += 1;
    }
    ids
}

fn nonempty_prompt(path: &Path, line: usize, ids: Vec<usize>) -> Result<Vec<usize>> {
    if ids.is_empty() {
        return Err(Error::Data {
            path: path.to_path_buf(),
            line,
            msg: "empty prompt".into(),
        });
    }
    Ok(ids)
}

/// Loads preference pairs; an empty file yields an empty list.
pub fn load_jsonl(path: &Path, vocab: &Vocab) -> Result<Loaded<PreferencePair>> {
    let mut eos_appended = 0;
    let mut items = Vec::new();
    for (line, r) in read_records::<PrefRecord>(path)? {
        items.push(PreferencePair {
            prompt: nonempty_prompt(path, line, vocab.tokenize(&r.prompt))?,
            chosen: answer(vocab, &r.chosen, &mut eos_appended),
            rejected: answer(vocab, &r.rejected, &mut eos_appended),
        });
    }
    if eos_appended > 0 {
        log::warn!("{}: appended <eos> to {eos_appended} answers", path.display());
    }
    Ok(Loaded { items, eos_appended })
}

/// A supervised example: the loss covers `response` only.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SftExample {
    pub prompt: Vec<usize>,
    pub response: Vec<usize>,
}

pub fn load_sft_jsonl(path: &Path, vocab: &Vocab) -> Result<Loaded<SftExample>> {
    let mut eos_appended = 0;
    let mut items = Vec::new();
    for (line, r) in read_records::<SftRecord>(path)? {
        items.push(SftExample {
            prompt: nonempty_prompt(path, line, vocab.tokenize(&r.prompt))?,
            response: answer(vocab, &r.response, &mut eos_appended),
        });
    }
    if eos_appended > 0 {
        log::warn!("{}: appended <eos> to {eos_appended} responses", path.display());
    }
    Ok(Loaded { items, eos_appended })
}

/// Vocabulary, preference splits and SFT examples read from a corpus directory.
#[derive(Debug, Clone)]
pub struct CorpusDir {
    pub vocab: Vocab,
    pub train: Vec<PreferencePair>,
    pub dev: Vec<PreferencePair>,
    pub sft: Vec<SftExample>,
}

impl CorpusDir {
    pub fn load(dir: &Path) -> Result<Self> {
        let vocab = Vocab::load(&dir.join(VOCAB_FILE))?;
        let train = load_jsonl(&dir.join(TRAIN_FILE), &vocab)?.items;
        let dev = load_jsonl(&dir.join(DEV_FILE), &vocab)?.items;
        let sft_path = dir.join(SFT_FILE);
        let sft = if sft_path.exists() {
            load_sft_jsonl(&sft_path, &vocab)?.items
        } else {
            Vec::new()
        };
        Ok(Self { vocab, train, dev, sft })
    }

    pub fn files(dir: &Path) -> Vec<PathBuf> {
        [TRAIN_FILE, DEV_FILE, SFT_FILE, VOCAB_FILE]
            .iter()
            .map(|f| dir.join(f))
            .filter(|p| p.exists())
            .collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn tokenize_cases() {
        let v = Vocab::synthetic(10).unwrap();
        assert!(v.tokenize("").is_empty());
        let s = "<bos> q c01 c09 : um <eos>";
        assert_eq!(v.detokenize(&v.tokenize(s)), s);
        assert_eq!(v.tokenize("c99 zebra"), vec![UNK, UNK]);
        assert_eq!(v.id("<eos>"), EOS);
        assert_eq!(v.id("<bos>"), BOS);
        assert_eq!(v.token(PAD), "<pad>");
    }

    #[test]
    fn vocab_rejects_duplicates_and_bad_prefix() {
        assert!(Vocab::new(&["a", "a"]).is_err());
        assert!(Vocab::from_tokens(vec!["x".into()]).is_err());
    }

    #[test]
    fn synthetic_shape() {
        let cfg = SynthConfig {
            n_train: 300,
            n_dev: 20,
            ..Default::default()
        };
        let c = synthesize(&cfg).unwrap();
        assert_eq!(c.train.len(), 300);
        assert_eq!(c.sft.len(), 300);
        for r in c.train.iter().chain(&c.dev) {
            assert!(r.chosen.ends_with("<eos>") && r.rejected.ends_with("<eos>"));
            assert_ne!(r.chosen, r.rejected);
            let p = c.vocab.tokenize(&r.prompt);
            let rej = c.vocab.tokenize(&r.rejected);
            assert!(p.len() + rej.len() <= cfg.max_seq_len);
            let ch = c.vocab.tokenize(&r.chosen);
            assert_eq!(&p[2..p.len() - 1], &ch[..ch.len() - 1]);
        }
        let with_lead = c.sft.iter().filter(|r| LEAD_INS.iter().any(|l| r.response.starts_with(l))).count();
        assert!(with_lead > 30 && with_lead < 90, "{with_lead}");
    }

    #[test]
    fn invalid_configs() {
        for cfg in [
            SynthConfig {
                filler_p: 1.0,
                ..Default::default()
            },
            SynthConfig {
                len_min: 5,
                len_max: 4,
                ..Default::default()
            },
            SynthConfig {
                corruption: 1.5,
                ..Default::default()
            },
            SynthConfig {
                max_seq_len: 10,
                ..Default::default()
            },
        ] {
            assert!(synthesize(&cfg).unwrap_err().is_config());
        }
    }

    #[test]
    fn load_errors_and_eos_repair() {
        let dir = tempfile::tempdir().unwrap();
        let v = Vocab::synthetic(4).unwrap();
        let p = dir.path().join("x.jsonl");
        fs::write(&p, "").unwrap();
        assert!(load_jsonl(&p, &v).unwrap().items.is_empty());
        fs::write(
            &p,
            "{\"prompt\":\"<bos> q c01 :\",\"chosen\":\"c01\",\"rejected\":\"c02 um <eos>\"}\n{\"prompt\":\"q\",\"chosen\":\"c01 <eos>\"}\n",
        )
        .unwrap();
        match load_jsonl(&p, &v) {
            Err(Error::Data { line, .. }) => assert_eq!(line, 2),
            other => panic!("{other:?}"),
        }
        fs::write(&p, "{\"prompt\":\"<bos> q c01 :\",\"chosen\":\"c01\",\"rejected\":\"c02 um <eos>\"}\n").unwrap();
        let l = load_jsonl(&p, &v).unwrap();
        assert_eq!(l.eos_appended, 1);
        assert_eq!(l.items[0].chosen, vec![v.id("c01"), EOS]);
        fs::write(&p, "not json\n").unwrap();
        assert!(matches!(load_jsonl(&p, &v), Err(Error::Data { line: 1, .. })));
    }
}
