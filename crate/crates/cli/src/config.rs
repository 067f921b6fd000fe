//! Run configuration: defaults, JSON config file, `--key value` overrides.

use std::path::{Path, PathBuf};

use mma_core::decoding::{BeamConfig, SearchMode};
use mma_core::model::{ModelConfig, TrainConfig};
use mma_core::synthdata::TaskConfig;
use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::CliError;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Dev,
    #[default]
    Test,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct Paths {
    /// Dataset directory (manifest plus split files).
    pub data: PathBuf,
    /// Output directory for everything else.
    pub out: PathBuf,
    /// Defaults to `<out>/model.ckpt`.
    pub checkpoint: Option<PathBuf>,
    /// Decode JSONL; defaults to `<out>/decode.jsonl`.
    pub decodes: Option<PathBuf>,
}

impl Default for Paths {
    fn default() -> Self {
        Self { data: "data".into(), out: "out".into(), checkpoint: None, decodes: None }
    }
}

impl Paths {
    pub fn checkpoint(&self) -> PathBuf {
        self.checkpoint.clone().unwrap_or_else(|| self.out.join("model.ckpt"))
    }

    pub fn decodes(&self) -> PathBuf {
        self.decodes.clone().unwrap_or_else(|| self.out.join("decode.jsonl"))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AlignConfig {
    /// Number of utterances, taken from the start of the split.
    pub utterances: usize,
}

impl Default for AlignConfig {
    fn default() -> Self {
        Self { utterances: 4 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AblateConfig {
    /// Defaults to every `0..dec_layers`.
    pub d_lm_values: Option<Vec<usize>>,
    pub headdrop_values: Vec<bool>,
    pub modes: Vec<SearchMode>,
    /// Defaults to the run seed alone.
    pub seeds: Option<Vec<u64>>,
}

impl Default for AblateConfig {
    fn default() -> Self {
        Self {
            d_lm_values: None,
            headdrop_values: vec![true, false],
            modes: vec![SearchMode::HeadSync, SearchMode::Standard],
            seeds: None,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    /// Model initialization and training order.
    pub seed: u64,
    /// `false` trains with `p_hd = 0` regardless of `model.p_hd`.
    pub headdrop: bool,
    pub mode: SearchMode,
    pub threads: usize,
    /// Split used by decode, align and ablate.
    pub split: Split,
    /// Decode only the first `limit` utterances.
    pub limit: Option<usize>,
    /// Training progress goes to stderr every this many steps; 0 silences it.
    pub log_every: u64,
    pub model: ModelConfig,
    pub task: TaskConfig,
    pub train: TrainConfig,
    pub beam: BeamConfig,
    pub paths: Paths,
    pub align: AlignConfig,
    pub ablate: AblateConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            seed: 1,
            headdrop: true,
            mode: SearchMode::HeadSync,
            threads: 1,
            split: Split::Test,
            limit: None,
            log_every: 100,
            model: ModelConfig::default(),
            task: TaskConfig::default(),
            train: TrainConfig::default(),
            beam: BeamConfig::default(),
            paths: Paths::default(),
            align: AlignConfig::default(),
            ablate: AblateConfig::default(),
        }
    }
}

impl RunConfig {
    pub fn validate(&self) -> Result<(), CliError> {
        let bad = |m: String| Err(CliError::Usage(m));
        self.model.validate().map_err(|e| CliError::Usage(format!("model: {e}")))?;
        self.task.validate().map_err(|e| CliError::Usage(format!("task: {e}")))?;
        self.beam.validate().map_err(|e| CliError::Usage(format!("beam: {e}")))?;
        if self.model.d_in != self.task.d_in {
            return bad(format!("model.d_in {} differs from task.d_in {}", self.model.d_in, self.task.d_in));
        }
        if self.model.vocab_size != self.task.vocab_size + 3 {
            return bad(format!(
                "model.vocab_size {} must be task.vocab_size {} plus 3 special tokens",
                self.model.vocab_size, self.task.vocab_size
            ));
        }
        if self.model.frame_stack_factor != self.task.stack_factor {
            return bad(format!(
                "model.frame_stack_factor {} differs from task.stack_factor {}",
                self.model.frame_stack_factor, self.task.stack_factor
            ));
        }
        if self.train.steps == 0 || self.train.batch_size == 0 {
            return bad("train.steps and train.batch_size must be positive".into());
        }
        if self.threads == 0 {
            return bad("threads must be at least 1".into());
        }
        if self.limit == Some(0) {
            return bad("limit must be positive".into());
        }
        if let Some(v) = &self.ablate.d_lm_values {
            if let Some(d) = v.iter().find(|&&d| d >= self.model.dec_layers) {
                return bad(format!("ablate.d_lm_values: {d} must be below model.dec_layers {}", self.model.dec_layers));
            }
        }
        if self.ablate.headdrop_values.is_empty() || self.ablate.modes.is_empty() {
            return bad("ablate grid has an empty axis".into());
        }
        Ok(())
    }

    /// Model config actually trained: HeadDrop off zeroes `p_hd`.
    pub fn effective_model(&self) -> ModelConfig {
        let mut m = self.model.clone();
        if !self.headdrop {
            m.p_hd = 0.0;
        }
        m
    }

    pub fn split_name(&self) -> &'static str {
        match self.split {
            Split::Train => "train",
            Split::Dev => "dev",
            Split::Test => "test",
        }
    }
}

/// Defaults, then the config file, then `--key value` overrides.
/// `--config PATH` may also appear among the overrides.
pub fn resolve(file: Option<&Path>, overrides: &[String]) -> Result<RunConfig, CliError> {
    let pairs = parse_overrides(overrides)?;
    let mut file = file.map(Path::to_path_buf);
    let mut rest = Vec::new();
    for (k, v) in pairs {
        if k == "config" {
            file = Some(PathBuf::from(v));
        } else {
            rest.push((k, v));
        }
    }
    let base = match &file {
        Some(p) => {
            let text = std::fs::read_to_string(p).map_err(|e| CliError::Usage(format!("{}: {e}", p.display())))?;
            serde_json::from_str::<RunConfig>(&text).map_err(|e| CliError::Usage(format!("{}: {e}", p.display())))?
        }
        None => RunConfig::default(),
    };
    let mut tree = serde_json::to_value(&base).expect("config serializes");
    for (k, v) in &rest {
        apply_override(&mut tree, k, v)?;
    }
    let cfg: RunConfig = serde_json::from_value(tree).map_err(|e| CliError::Usage(format!("config: {e}")))?;
    cfg.validate()?;
    Ok(cfg)
}

/// `--key value` or `--key=value`; dashes in keys read as underscores.
pub fn parse_overrides(args: &[String]) -> Result<Vec<(String, String)>, CliError> {
    let mut out = Vec::new();
    let mut it = args.iter();
    while let Some(a) = it.next() {
        let Some(body) = a.strip_prefix("--") else {
            return Err(CliError::Usage(format!("expected --key, got {a:?}")));
        };
        let (k, v) = match body.split_once('=') {
            Some((k, v)) => (k.to_string(), v.to_string()),
            None => {
                let v = it.next().ok_or_else(|| CliError::Usage(format!("--{body} needs a value")))?;
                (body.to_string(), v.clone())
            }
        };
        if k.is_empty() {
            return Err(CliError::Usage("empty key".into()));
        }
        out.push((k.replace('-', "_"), v));
    }
    Ok(out)
}

/// Sets a dotted path, or a bare key naming a unique field anywhere in the
/// tree. A top-level scalar wins over deeper ones with the same name.
pub fn apply_override(tree: &mut Value, key: &str, raw: &str) -> Result<(), CliError> {
    let path: Vec<String> = if key.contains('.') {
        key.split('.').map(str::to_string).collect()
    } else {
        find_field(tree, key)?
    };
    let mut node = &mut *tree;
    for (i, seg) in path.iter().enumerate() {
        let obj = node
            .as_object_mut()
            .ok_or_else(|| CliError::Usage(format!("{key}: {} is not a section", path[..i].join("."))))?;
        node = obj.get_mut(seg).ok_or_else(|| CliError::Usage(format!("unknown config key {key:?}")))?;
    }
    *node = if node.is_string() {
        Value::String(raw.to_string())
    } else {
        serde_json::from_str(raw).unwrap_or_else(|_| Value::String(raw.to_string()))
    };
    Ok(())
}

fn find_field(tree: &Value, name: &str) -> Result<Vec<String>, CliError> {
    fn walk(v: &Value, prefix: &mut Vec<String>, name: &str, hits: &mut Vec<(Vec<String>, bool)>) {
        if let Value::Object(map) = v {
            for (k, child) in map {
                prefix.push(k.clone());
                if k == name {
                    hits.push((prefix.clone(), child.is_object()));
                }
                walk(child, prefix, name, hits);
                prefix.pop();
            }
        }
    }
    let mut hits = Vec::new();
    walk(tree, &mut Vec::new(), name, &mut hits);
    let scalars: Vec<&Vec<String>> = hits.iter().filter(|(_, obj)| !obj).map(|(p, _)| p).collect();
    let pick = match scalars.as_slice() {
        [one] => Some((*one).clone()),
        [] if hits.len() == 1 => Some(hits[0].0.clone()),
        [] => None,
        many => many.iter().find(|p| p.len() == 1).map(|p| (*p).clone()),
    };
    match pick {
        Some(p) => Ok(p),
        None if hits.is_empty() => Err(CliError::Usage(format!("unknown config key {name:?}"))),
        None => {
            let all: Vec<String> = hits.iter().map(|(p, _)| p.join(".")).collect();
            Err(CliError::Usage(format!("ambiguous key {name:?}; use one of {}", all.join(", "))))
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn args(s: &str) -> Vec<String> {
        s.split_whitespace().map(str::to_string).collect()
    }

    #[test]
    fn leaf_and_dotted_overrides() {
        let c = resolve(None, &args("--steps 7 --model.d_lm 2 --mode standard --beam 3 --eps-wait=4")).unwrap();
        assert_eq!(c.train.steps, 7);
        assert_eq!(c.model.d_lm, 2);
        assert_eq!(c.mode, SearchMode::Standard);
        assert_eq!(c.beam.beam, 3);
        assert_eq!(c.beam.eps_wait, 4);
    }

    #[test]
    fn top_level_wins_and_ambiguity_is_reported() {
        let c = resolve(None, &args("--seed 9")).unwrap();
        assert_eq!((c.seed, c.task.seed), (9, 0));
        let e = resolve(None, &args("--d_in 4")).unwrap_err();
        assert!(e.to_string().contains("model.d_in"), "{e}");
    }

    #[test]
    fn unknown_keys_are_rejected() {
        assert!(resolve(None, &args("--bogus 1")).is_err());
        assert!(resolve(None, &args("--model.bogus 1")).is_err());
        assert!(resolve(None, &args("--steps")).is_err());
    }

    #[test]
    fn cli_beats_file_beats_defaults() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("c.json");
        std::fs::write(&p, r#"{"train": {"steps": 11, "batch_size": 3}, "threads": 2}"#).unwrap();
        let c = resolve(Some(&p), &args("--steps 5")).unwrap();
        assert_eq!((c.train.steps, c.train.batch_size, c.threads), (5, 3, 2));
        assert_eq!(c.beam, BeamConfig::default());
        std::fs::write(&p, r#"{"trian": {}}"#).unwrap();
        assert!(resolve(Some(&p), &[]).is_err());
    }

    #[test]
    fn cross_section_consistency_is_checked() {
        assert!(resolve(None, &args("--task.vocab_size 10")).is_err());
        assert!(resolve(None, &args("--task.vocab_size 10 --model.vocab_size 13")).is_ok());
    }

    #[test]
    fn string_fields_keep_numeric_looking_values() {
        let c = resolve(None, &args("--out 123")).unwrap();
        assert_eq!(c.paths.out, PathBuf::from("123"));
    }
}
