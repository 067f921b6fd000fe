//! Beam search over the incremental decoder: head-synchronous and standard.

use std::cmp::Ordering;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::infer::{BoundarySearch, DecoderState, HeadOutcome, LayerSearch};
use crate::model::{Model, Vocab};
use crate::monoattn::ACTIVATION_THRESHOLD;
use crate::numerics::Tensor;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct BeamConfig {
    pub beam: usize,
    pub eps_wait: usize,
    pub alpha_lm: f32,
    pub beta_len: f32,
    pub max_len: usize,
}

impl Default for BeamConfig {
    fn default() -> Self {
        Self { beam: 10, eps_wait: 8, alpha_lm: 0.5, beta_len: 2.0, max_len: 200 }
    }
}

impl BeamConfig {
    pub fn validate(&self) -> Result<()> {
        if self.beam < 1 || self.eps_wait < 1 || self.max_len < 1 {
            return Err(Error::Config("beam, eps_wait and max_len must be at least 1".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum SearchMode {
    #[default]
    HeadSync,
    Standard,
}

impl SearchMode {
    pub fn as_str(self) -> &'static str {
        match self {
            Self::HeadSync => "head-sync",
            Self::Standard => "standard",
        }
    }
}

impl std::str::FromStr for SearchMode {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "head-sync" => Ok(Self::HeadSync),
            "standard" => Ok(Self::Standard),
            _ => Err(Error::Config(format!("unknown decode mode {s:?}"))),
        }
    }
}

/// Next-token scorer fused into the beam score.
pub trait LanguageModel {
    /// Log-probabilities over the model vocabulary given the prefix
    /// (starting with sos).
    fn score_next(&self, prefix: &[usize]) -> Vec<f32>;
}

/// Uniform distribution over the vocabulary.
#[derive(Clone, Copy, Debug)]
pub struct NullLm {
    pub vocab_size: usize,
}

impl LanguageModel for NullLm {
    fn score_next(&self, _prefix: &[usize]) -> Vec<f32> {
        vec![-(self.vocab_size as f32).ln(); self.vocab_size]
    }
}

/// Heads scan in lockstep; once the leftmost head activates, the others
/// get `eps_wait` frames (counting that one) before being forced onto the
/// rightmost boundary found this step.
#[derive(Clone, Copy, Debug)]
pub struct HeadSync {
    pub eps_wait: usize,
}

impl BoundarySearch for HeadSync {
    fn search(&self, prev: &[usize], frames: usize, prob: &mut dyn FnMut(usize, usize) -> f32) -> LayerSearch {
        let n = prev.len();
        let mut stop: Vec<Option<usize>> = vec![None; n];
        let mut first: Option<usize> = None;
        let mut read = 0;
        let mut j = prev.iter().copied().min().unwrap_or(1).max(1);
        while j <= first.map_or(frames, |f| (f + self.eps_wait - 1).min(frames)) {
            for m in 0..n {
                if stop[m].is_none() && prev[m] <= j {
                    read = j;
                    if prob(m, j) >= ACTIVATION_THRESHOLD {
                        stop[m] = Some(j);
                        first.get_or_insert(j);
                    }
                }
            }
            j += 1;
        }
        let heads = match stop.iter().flatten().max() {
            None => vec![HeadOutcome { boundary: None, forced: false }; n],
            Some(&tail) => stop
                .iter()
                .zip(prev)
                .map(|(s, &p)| match s {
                    Some(t) => HeadOutcome { boundary: Some(*t), forced: false },
                    None => HeadOutcome { boundary: Some(tail.max(p)), forced: true },
                })
                .collect(),
        };
        LayerSearch { heads, frames_read: read }
    }
}

/// Each head scans independently up to the last frame.
#[derive(Clone, Copy, Debug)]
pub struct Standard;

impl BoundarySearch for Standard {
    fn search(&self, prev: &[usize], frames: usize, prob: &mut dyn FnMut(usize, usize) -> f32) -> LayerSearch {
        let mut read = 0;
        let heads = prev
            .iter()
            .enumerate()
            .map(|(m, &p)| {
                let b = (p.max(1)..=frames).find(|&j| {
                    read = read.max(j);
                    prob(m, j) >= ACTIVATION_THRESHOLD
                });
                HeadOutcome { boundary: b, forced: false }
            })
            .collect();
        LayerSearch { heads, frames_read: read }
    }
}

/// One head's boundary at one output step. `t = T + 1` means the head
/// never activated.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct BoundaryEvent {
    pub layer: usize,
    pub head: usize,
    pub t: usize,
    pub forced: bool,
}

#[derive(Clone, Debug)]
pub struct Hypothesis {
    /// Starts with sos; ends with eos once finished.
    pub tokens: Vec<usize>,
    pub log_prob_mma: f64,
    pub lm_score: f64,
    pub score: f64,
    pub state: DecoderState,
    pub finished: bool,
    /// Per output step, one event per MA head.
    pub boundary_log: Vec<Vec<BoundaryEvent>>,
    /// Per output step, highest encoder frame read.
    pub frames_read: Vec<usize>,
    /// Cumulative number of (head, step) pairs with a boundary.
    pub activated: usize,
}

impl Hypothesis {
    /// Tokens emitted after sos (eos included).
    pub fn emitted(&self) -> usize {
        self.tokens.len() - 1
    }

    /// Output steps excluding a final eos.
    pub fn length(&self) -> usize {
        self.emitted() - usize::from(self.finished)
    }

    pub fn forced_count(&self) -> usize {
        self.boundary_log.iter().flatten().filter(|e| e.forced).count()
    }

    /// Task symbols, without sos/eos.
    pub fn symbols(&self, vocab: &Vocab) -> Vec<usize> {
        self.tokens.iter().filter_map(|&t| vocab.decode(t)).collect()
    }
}

#[derive(Clone, Debug)]
pub struct DecodeOutput {
    /// Finished hypotheses, best first; the single best unfinished one if
    /// nothing finished.
    pub ranked: Vec<Hypothesis>,
    pub unfinished: bool,
    /// Per step, the cumulative activated count of every candidate kept
    /// in the beam after pruning.
    pub q_table: Vec<Vec<usize>>,
    pub num_frames: usize,
    pub num_heads: usize,
}

impl DecodeOutput {
    pub fn best(&self) -> &Hypothesis {
        &self.ranked[0]
    }

    /// Every beam candidate had every head activated at every step up to
    /// the best hypothesis's length. The eos step is not part of that length.
    pub fn streamable(&self) -> bool {
        is_streamable(&self.q_table, self.best().length(), self.num_heads)
    }
}

pub fn is_streamable(q_table: &[Vec<usize>], steps: usize, heads: usize) -> bool {
    q_table.iter().take(steps).enumerate().all(|(i, row)| row.iter().all(|&q| q == heads * (i + 1)))
}

/// Descending score; ties by shorter length then lexicographic tokens.
fn rank(a: &Hypothesis, b: &Hypothesis) -> Ordering {
    b.score
        .partial_cmp(&a.score)
        .unwrap_or(Ordering::Equal)
        .then(a.tokens.len().cmp(&b.tokens.len()))
        .then_with(|| a.tokens.cmp(&b.tokens))
}

/// Split scored candidates: eos-terminated ones ranked within the top `beam`
/// join `finished` (kept to the best `beam`), and the best `beam`
/// unfinished candidates form the next beam.
pub fn prune(mut candidates: Vec<Hypothesis>, mut finished: Vec<Hypothesis>, beam: usize) -> Result<(Vec<Hypothesis>, Vec<Hypothesis>)> {
    if candidates.is_empty() {
        return Err(Error::Decode("no candidates to prune".into()));
    }
    candidates.sort_by(rank);
    let mut next = Vec::with_capacity(beam);
    for (i, c) in candidates.into_iter().enumerate() {
        if c.finished {
            if i < beam {
                finished.push(c);
            }
        } else if next.len() < beam {
            next.push(c);
        }
    }
    finished.sort_by(rank);
    finished.truncate(beam);
    Ok((next, finished))
}

pub fn decode(model: &Model, frames: &Tensor, cfg: &BeamConfig, mode: SearchMode, lm: &dyn LanguageModel) -> Result<DecodeOutput> {
    let mem = model.memory(frames)?;
    match mode {
        SearchMode::HeadSync => beam_search(model, &mem, cfg, &HeadSync { eps_wait: cfg.eps_wait }, lm),
        SearchMode::Standard => beam_search(model, &mem, cfg, &Standard, lm),
    }
}

pub fn beam_search(
    model: &Model,
    mem: &crate::model::infer::EncoderMemory,
    cfg: &BeamConfig,
    search: &dyn BoundarySearch,
    lm: &dyn LanguageModel,
) -> Result<DecodeOutput> {
    cfg.validate()?;
    let t_frames = mem.frames();
    if t_frames == 0 {
        return Err(Error::Decode("empty encoder output".into()));
    }
    let mc = &model.config;
    let vocab = mc.vocab_size;
    let num_heads = mc.total_ma_heads();
    let (alpha, beta) = (cfg.alpha_lm as f64, cfg.beta_len as f64);

    let mut beam = vec![Hypothesis {
        tokens: vec![Vocab::SOS],
        log_prob_mma: 0.0,
        lm_score: 0.0,
        score: 0.0,
        state: model.initial_state(),
        finished: false,
        boundary_log: Vec::new(),
        frames_read: Vec::new(),
        activated: 0,
    }];
    let mut finished: Vec<Hypothesis> = Vec::new();
    let mut q_table = Vec::new();

    for _ in 0..cfg.max_len {
        let states: Vec<&DecoderState> = beam.iter().map(|h| &h.state).collect();
        let last: Vec<usize> = beam.iter().map(|h| *h.tokens.last().expect("sos")).collect();
        let results = model.step_batch(mem, &states, &last, search)?;
        let mut candidates = Vec::new();
        for (hyp, res) in beam.iter().zip(results) {
            let lm_lp = lm.score_next(&hyp.tokens);
            if lm_lp.len() != vocab {
                return Err(Error::Decode(format!("language model returned {} scores for {vocab} tokens", lm_lp.len())));
            }
            let events: Vec<BoundaryEvent> = res
                .layers
                .iter()
                .enumerate()
                .flat_map(|(li, ls)| {
                    ls.heads.iter().enumerate().map(move |(head, o)| BoundaryEvent {
                        layer: mc.d_lm + li,
                        head,
                        t: o.boundary.unwrap_or(t_frames + 1),
                        forced: o.forced,
                    })
                })
                .collect();
            let activated = hyp.activated + events.iter().filter(|e| e.t <= t_frames).count();
            let mut scored: Vec<(f64, usize)> = (0..vocab)
                .filter(|&v| v != Vocab::PAD && v != Vocab::SOS)
                .map(|v| {
                    let s = hyp.log_prob_mma
                        + res.log_probs[v] as f64
                        + alpha * (hyp.lm_score + lm_lp[v] as f64)
                        + beta * (hyp.emitted() + 1) as f64;
                    (s, v)
                })
                .collect();
            scored.sort_by(|a, b| b.0.partial_cmp(&a.0).unwrap_or(Ordering::Equal).then(a.1.cmp(&b.1)));
            for &(score, v) in scored.iter().take(cfg.beam) {
                let mut tokens = hyp.tokens.clone();
                tokens.push(v);
                let mut boundary_log = hyp.boundary_log.clone();
                boundary_log.push(events.clone());
                let mut frames_read = hyp.frames_read.clone();
                frames_read.push(res.frames_read);
                candidates.push(Hypothesis {
                    tokens,
                    log_prob_mma: hyp.log_prob_mma + res.log_probs[v] as f64,
                    lm_score: hyp.lm_score + lm_lp[v] as f64,
                    score,
                    state: res.state.clone(),
                    finished: v == Vocab::EOS,
                    boundary_log,
                    frames_read,
                    activated,
                });
            }
        }
        let (next, fin) = prune(candidates, finished, cfg.beam)?;
        q_table.push(next.iter().map(|h| h.activated).collect());
        finished = fin;
        beam = next;
        if beam.is_empty() || finished.len() >= cfg.beam {
            break;
        }
    }

    let unfinished = finished.is_empty();
    let ranked = if unfinished {
        beam.sort_by(rank);
        beam.truncate(1);
        if beam.is_empty() {
            return Err(Error::Decode("search produced no hypotheses".into()));
        }
        beam
    } else {
        finished
    };
    Ok(DecodeOutput { ranked, unfinished, q_table, num_frames: t_frames, num_heads })
}

/// One line of decode output.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DecodeRecord {
    pub id: String,
    /// Best hypothesis as task symbols.
    pub tokens: Vec<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub reference: Option<Vec<usize>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub true_boundaries: Option<Vec<usize>>,
    pub score: f64,
    pub log_prob_mma: f64,
    pub lm_score: f64,
    /// Per output step of the best hypothesis, one event per MA head.
    pub boundary_log: Vec<Vec<BoundaryEvent>>,
    #[serde(default)]
    pub frames_read: Vec<usize>,
    pub forced_count: usize,
    pub streamable: bool,
    pub num_frames: usize,
    pub num_heads: usize,
    /// Per step, cumulative activated-head counts of every beam candidate.
    pub q_table: Vec<Vec<usize>>,
    #[serde(default)]
    pub unfinished: bool,
}

impl DecodeRecord {
    pub fn new(id: impl Into<String>, out: &DecodeOutput, vocab: &Vocab) -> Self {
        let best = out.best();
        DecodeRecord {
            id: id.into(),
            tokens: best.symbols(vocab),
            reference: None,
            true_boundaries: None,
            score: best.score,
            log_prob_mma: best.log_prob_mma,
            lm_score: best.lm_score,
            boundary_log: best.boundary_log.clone(),
            frames_read: best.frames_read.clone(),
            forced_count: best.forced_count(),
            streamable: out.streamable(),
            num_frames: out.num_frames,
            num_heads: out.num_heads,
            q_table: out.q_table.clone(),
            unfinished: out.unfinished,
        }
    }
}

pub fn write_records(records: &[DecodeRecord], path: &std::path::Path) -> Result<()> {
    let mut body = String::new();
    for r in records {
        body.push_str(&serde_json::to_string(r)?);
        body.push('\n');
    }
    std::fs::write(path, body)?;
    Ok(())
}

pub fn read_records(path: &std::path::Path) -> Result<Vec<DecodeRecord>> {
    let body = std::fs::read_to_string(path)?;
    body.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, l)| serde_json::from_str(l).map_err(|e| Error::Parse { line: i + 1, msg: e.to_string() }))
        .collect()
}
