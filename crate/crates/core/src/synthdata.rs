//! Synthetic monotonic transduction task.
//!
//! Every symbol owns a fixed random prototype vector. An utterance is a
//! token sequence rendered as consecutive spans of noisy prototype copies,
//! so each token's boundary (its last frame) is known exactly.

use std::collections::HashSet;
use std::fs;
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};

use rand::Rng;
use rand_distr::{Distribution, Normal, StandardNormal};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::numerics::{RngStreams, Tensor};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TaskConfig {
    /// Number of task symbols `V_s`.
    pub vocab_size: usize,
    pub d_in: usize,
    /// Span duration range in raw frames.
    pub d_min: usize,
    pub d_max: usize,
    pub noise_sigma: f32,
    pub u_min: usize,
    pub u_max: usize,
    pub train: usize,
    pub dev: usize,
    pub test: usize,
    pub seed: u64,
    /// Frame stacking factor used to map raw boundaries to encoder frames.
    pub stack_factor: usize,
}

impl Default for TaskConfig {
    fn default() -> Self {
        Self {
            vocab_size: 20,
            d_in: 8,
            d_min: 4,
            d_max: 8,
            noise_sigma: 0.1,
            u_min: 4,
            u_max: 12,
            train: 2000,
            dev: 200,
            test: 200,
            seed: 0,
            stack_factor: 4,
        }
    }
}

impl TaskConfig {
    pub fn validate(&self) -> Result<()> {
        let fail = |m: &str| Err(Error::Config(format!("task: {m}")));
        if self.vocab_size < 2 {
            return fail("vocab_size must be at least 2");
        }
        if self.d_in == 0 {
            return fail("d_in must be positive");
        }
        if self.d_min < 1 || self.d_min > self.d_max {
            return fail("need 1 <= d_min <= d_max");
        }
        if self.u_min < 1 || self.u_min > self.u_max {
            return fail("need 1 <= u_min <= u_max");
        }
        if !(self.noise_sigma >= 0.0) {
            return fail("noise_sigma must be non-negative");
        }
        if self.stack_factor < 1 {
            return fail("stack_factor must be positive");
        }
        if self.d_min < self.stack_factor {
            return fail("d_min must be at least stack_factor so boundaries stay distinct");
        }
        Ok(())
    }

    fn total(&self) -> usize {
        self.train + self.dev + self.test
    }

    /// Number of distinct sequences of the shortest length.
    fn shortest_sequences(&self) -> f64 {
        self.vocab_size as f64 * ((self.vocab_size - 1) as f64).powi(self.u_min as i32 - 1)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Sample {
    pub id: String,
    /// `[T_raw × d_in]`
    pub frames: Tensor,
    /// Symbol ids in `0..V_s`.
    pub tokens: Vec<usize>,
    /// Last raw frame of each token's span (1-based).
    pub raw_boundaries: Vec<usize>,
    /// Last encoder frame of each token's span after stacking (1-based).
    pub true_boundaries: Vec<usize>,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct Splits {
    pub train: Vec<Sample>,
    pub dev: Vec<Sample>,
    pub test: Vec<Sample>,
}

impl Splits {
    pub fn named(&self) -> [(&'static str, &[Sample]); 3] {
        [("train", &self.train), ("dev", &self.dev), ("test", &self.test)]
    }
}

/// Per-symbol prototype vectors, `[V_s × d_in]`, fixed by the seed.
pub fn prototypes(cfg: &TaskConfig) -> Tensor {
    let mut rng = RngStreams::new(cfg.seed).stream("prototypes");
    let data = (0..cfg.vocab_size * cfg.d_in).map(|_| StandardNormal.sample(&mut rng)).collect();
    Tensor { shape: vec![cfg.vocab_size, cfg.d_in], data, grad: None, requires_grad: false }
}

/// Generate train/dev/test splits whose token sequences are pairwise
/// distinct. Returns warnings alongside the data.
pub fn generate(cfg: &TaskConfig) -> Result<(Splits, Vec<String>)> {
    cfg.validate()?;
    let mut warnings = Vec::new();
    if cfg.shortest_sequences() < cfg.total() as f64 {
        warnings.push(format!(
            "only {} distinct sequences of length {}; duplicates across draws are likely",
            cfg.shortest_sequences(),
            cfg.u_min
        ));
    }
    let protos = prototypes(cfg);
    let streams = RngStreams::new(cfg.seed);
    let noise = Normal::new(0.0f32, cfg.noise_sigma).map_err(|e| Error::Config(e.to_string()))?;
    let mut seen: HashSet<Vec<usize>> = HashSet::new();
    let mut splits = Splits::default();
    for (name, n, out) in [
        ("train", cfg.train, &mut splits.train),
        ("dev", cfg.dev, &mut splits.dev),
        ("test", cfg.test, &mut splits.test),
    ] {
        let budget = (n as u64 + 1) * 1000;
        let mut draw = 0u64;
        while out.len() < n {
            if draw >= budget {
                return Err(Error::Config(format!("could not draw {n} distinct {name} sequences")));
            }
            let mut rng = streams.substream(name, draw);
            draw += 1;
            let s = sample(cfg, &protos, &noise, &mut rng, format!("{name}-{:05}", out.len()));
            if seen.insert(s.tokens.clone()) {
                out.push(s);
            }
        }
    }
    Ok((splits, warnings))
}

fn sample<R: Rng>(cfg: &TaskConfig, protos: &Tensor, noise: &Normal<f32>, rng: &mut R, id: String) -> Sample {
    let u = rng.gen_range(cfg.u_min..=cfg.u_max);
    let mut tokens: Vec<usize> = Vec::with_capacity(u);
    for i in 0..u {
        let tok = if i == 0 {
            rng.gen_range(0..cfg.vocab_size)
        } else {
            // uniform over symbols other than the previous one
            let t = rng.gen_range(0..cfg.vocab_size - 1);
            if t >= tokens[i - 1] {
                t + 1
            } else {
                t
            }
        };
        tokens.push(tok);
    }
    let mut data = Vec::new();
    let mut raw_boundaries = Vec::with_capacity(u);
    let mut end = 0;
    for &tok in &tokens {
        let dur = rng.gen_range(cfg.d_min..=cfg.d_max);
        for _ in 0..dur {
            data.extend(protos.row(tok).iter().map(|&p| p + noise.sample(rng)));
        }
        end += dur;
        raw_boundaries.push(end);
    }
    let true_boundaries = raw_boundaries.iter().map(|&b| b.div_ceil(cfg.stack_factor)).collect();
    Sample {
        id,
        frames: Tensor { shape: vec![end, cfg.d_in], data, grad: None, requires_grad: false },
        tokens,
        raw_boundaries,
        true_boundaries,
    }
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Record {
    id: String,
    tokens: Vec<usize>,
    raw_boundaries: Vec<usize>,
    true_boundaries: Vec<usize>,
    frames: Vec<Vec<f32>>,
}

impl From<&Sample> for Record {
    fn from(s: &Sample) -> Self {
        Record {
            id: s.id.clone(),
            tokens: s.tokens.clone(),
            raw_boundaries: s.raw_boundaries.clone(),
            true_boundaries: s.true_boundaries.clone(),
            frames: (0..s.frames.rows()).map(|i| s.frames.row(i).to_vec()).collect(),
        }
    }
}

impl Record {
    fn into_sample(self) -> std::result::Result<Sample, String> {
        let rows = self.frames.len();
        let cols = self.frames.first().map_or(0, Vec::len);
        if self.frames.iter().any(|r| r.len() != cols) {
            return Err("ragged frame rows".into());
        }
        if self.tokens.len() != self.true_boundaries.len() || self.tokens.len() != self.raw_boundaries.len() {
            return Err("tokens and boundaries differ in length".into());
        }
        let data = self.frames.into_iter().flatten().collect();
        Ok(Sample {
            id: self.id,
            frames: Tensor { shape: vec![rows, cols], data, grad: None, requires_grad: false },
            tokens: self.tokens,
            raw_boundaries: self.raw_boundaries,
            true_boundaries: self.true_boundaries,
        })
    }
}

/// One JSON object per line.
pub fn to_jsonl(samples: &[Sample]) -> Result<String> {
    let mut out = String::new();
    for s in samples {
        out.push_str(&serde_json::to_string(&Record::from(s))?);
        out.push('\n');
    }
    Ok(out)
}

pub fn save(samples: &[Sample], path: &Path) -> Result<()> {
    let mut f = fs::File::create(path)?;
    f.write_all(to_jsonl(samples)?.as_bytes())?;
    Ok(())
}

/// Inverse of [`save`]. Blank lines are skipped; a malformed line is an
/// error naming its 1-based line number.
pub fn load(path: &Path) -> Result<Vec<Sample>> {
    let reader = BufReader::new(fs::File::open(path)?);
    let mut out = Vec::new();
    for (i, line) in reader.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let rec: Record = serde_json::from_str(&line).map_err(|e| Error::Parse { line: i + 1, msg: e.to_string() })?;
        out.push(rec.into_sample().map_err(|msg| Error::Parse { line: i + 1, msg })?);
    }
    Ok(out)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SplitEntry {
    pub path: PathBuf,
    pub count: usize,
    pub sha256: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub config: TaskConfig,
    pub train: SplitEntry,
    pub dev: SplitEntry,
    pub test: SplitEntry,
}

pub const MANIFEST_FILE: &str = "manifest.json";

/// Write `{train,dev,test}.jsonl` plus a manifest into `dir`.
pub fn write_dataset(dir: &Path, cfg: &TaskConfig, splits: &Splits) -> Result<Manifest> {
    fs::create_dir_all(dir)?;
    let mut entries = Vec::new();
    for (name, samples) in splits.named() {
        let body = to_jsonl(samples)?;
        let file = format!("{name}.jsonl");
        fs::write(dir.join(&file), &body)?;
        entries.push(SplitEntry {
            path: PathBuf::from(file),
            count: samples.len(),
            sha256: format!("{:x}", Sha256::digest(body.as_bytes())),
        });
    }
    let mut it = entries.into_iter();
    let manifest = Manifest {
        config: cfg.clone(),
        train: it.next().expect("three splits"),
        dev: it.next().expect("three splits"),
        test: it.next().expect("three splits"),
    };
    fs::write(dir.join(MANIFEST_FILE), serde_json::to_string_pretty(&manifest)?)?;
    Ok(manifest)
}

/// Load one split listed in a manifest, checking its hash.
pub fn read_split(dir: &Path, entry: &SplitEntry) -> Result<Vec<Sample>> {
    let path = dir.join(&entry.path);
    let body = fs::read(&path)?;
    let digest = format!("{:x}", Sha256::digest(&body));
    if digest != entry.sha256 {
        return Err(Error::Config(format!("{}: content hash mismatch", path.display())));
    }
    load(&path)
}

pub fn read_manifest(dir: &Path) -> Result<Manifest> {
    Ok(serde_json::from_slice(&fs::read(dir.join(MANIFEST_FILE))?)?)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small() -> TaskConfig {
        TaskConfig { train: 20, dev: 5, test: 5, ..Default::default() }
    }

    #[test]
    fn span_arithmetic() {
        let cfg = TaskConfig { d_min: 2, d_max: 4, u_min: 3, u_max: 3, stack_factor: 2, ..small() };
        let (s, _) = generate(&cfg).unwrap();
        for x in &s.train {
            let t = x.frames.rows();
            assert!((6..=12).contains(&t));
            assert_eq!(*x.raw_boundaries.last().unwrap(), t);
            let mut prev = 0;
            for &b in &x.raw_boundaries {
                assert!((2..=4).contains(&(b - prev)));
                prev = b;
            }
        }
    }

    #[test]
    fn splits_are_disjoint_and_deterministic() {
        let (a, _) = generate(&small()).unwrap();
        let (b, _) = generate(&small()).unwrap();
        assert_eq!(a, b);
        let all: Vec<&Vec<usize>> = a.train.iter().chain(&a.dev).chain(&a.test).map(|s| &s.tokens).collect();
        let set: HashSet<_> = all.iter().collect();
        assert_eq!(set.len(), all.len());
    }

    #[test]
    fn small_vocab_warns_about_duplicates() {
        let cfg = TaskConfig { vocab_size: 3, u_min: 1, u_max: 6, ..small() };
        let (_, w) = generate(&cfg).unwrap();
        assert_eq!(w.len(), 1);
    }

    #[test]
    fn config_rejects_bad_durations() {
        assert!(TaskConfig { d_min: 0, ..small() }.validate().is_err());
        assert!(TaskConfig { d_min: 5, d_max: 4, ..small() }.validate().is_err());
        assert!(TaskConfig { d_min: 3, ..small() }.validate().is_err());
    }
}
