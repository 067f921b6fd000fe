//! WER, boundary coverage, streamability and boundary latency, computed
//! from decode records.

use serde::Serialize;

use crate::decoding::{is_streamable, DecodeRecord};
use crate::error::{Error, Result};

/// Unit-cost Levenshtein distance.
pub fn edit_distance<T: PartialEq>(hyp: &[T], reference: &[T]) -> usize {
    let mut prev: Vec<usize> = (0..=reference.len()).collect();
    let mut cur = vec![0; reference.len() + 1];
    for (i, h) in hyp.iter().enumerate() {
        cur[0] = i + 1;
        for (j, r) in reference.iter().enumerate() {
            let sub = prev[j] + usize::from(h != r);
            cur[j + 1] = sub.min(prev[j + 1] + 1).min(cur[j] + 1);
        }
        std::mem::swap(&mut prev, &mut cur);
    }
    prev[reference.len()]
}

/// `100 · (S + D + I) / |ref|`.
pub fn word_error_rate<T: PartialEq>(hyp: &[T], reference: &[T]) -> Result<f64> {
    if reference.is_empty() {
        return Err(Error::Metric("empty reference".into()));
    }
    Ok(100.0 * edit_distance(hyp, reference) as f64 / reference.len() as f64)
}

/// Pairs `(hyp index, ref index)` of equal tokens on one minimum-cost
/// alignment.
pub fn matched_pairs<T: PartialEq>(hyp: &[T], reference: &[T]) -> Vec<(usize, usize)> {
    let (n, m) = (hyp.len(), reference.len());
    let mut d = vec![vec![0usize; m + 1]; n + 1];
    for (i, row) in d.iter_mut().enumerate() {
        row[0] = i;
    }
    for j in 0..=m {
        d[0][j] = j;
    }
    for i in 1..=n {
        for j in 1..=m {
            let sub = d[i - 1][j - 1] + usize::from(hyp[i - 1] != reference[j - 1]);
            d[i][j] = sub.min(d[i - 1][j] + 1).min(d[i][j - 1] + 1);
        }
    }
    let (mut i, mut j) = (n, m);
    let mut pairs = Vec::new();
    while i > 0 && j > 0 {
        let same = hyp[i - 1] == reference[j - 1];
        if d[i][j] == d[i - 1][j - 1] + usize::from(!same) {
            if same {
                pairs.push((i - 1, j - 1));
            }
            i -= 1;
            j -= 1;
        } else if d[i][j] == d[i - 1][j] + 1 {
            i -= 1;
        } else {
            j -= 1;
        }
    }
    pairs.reverse();
    pairs
}

/// Boundaries of the best hypothesis over its token steps (eos step
/// excluded), averaged over heads: `Q^{n,1}`.
pub fn boundary_count(rec: &DecodeRecord) -> f64 {
    let hits = rec.boundary_log.iter().take(rec.tokens.len()).flatten().filter(|e| e.t <= rec.num_frames).count();
    hits as f64 / rec.num_heads.max(1) as f64
}

/// `100 · Q / |ŷ|` for one utterance, `None` for an empty hypothesis.
pub fn utterance_coverage(rec: &DecodeRecord) -> Option<f64> {
    let steps = rec.tokens.len();
    (steps > 0).then(|| 100.0 * boundary_count(rec) / steps as f64)
}

/// Utterance-mean coverage; empty hypotheses are skipped with a warning.
pub fn boundary_coverage(records: &[DecodeRecord], warnings: &mut Vec<String>) -> f64 {
    let mut vals = Vec::new();
    for r in records {
        match utterance_coverage(r) {
            Some(c) => vals.push(c),
            None => warnings.push(format!("{}: empty hypothesis skipped for coverage", r.id)),
        }
    }
    mean(&vals)
}

/// `δ_n`: every beam candidate had every head activated at every step up
/// to the best hypothesis's length.
pub fn utterance_streamable(rec: &DecodeRecord) -> bool {
    is_streamable(&rec.q_table, rec.tokens.len(), rec.num_heads)
}

/// Percentage of streamable utterances; empty hypotheses are skipped.
pub fn streamability(records: &[DecodeRecord]) -> f64 {
    let kept: Vec<&DecodeRecord> = records.iter().filter(|r| !r.tokens.is_empty()).collect();
    if kept.is_empty() {
        return 0.0;
    }
    100.0 * kept.iter().filter(|r| utterance_streamable(r)).count() as f64 / kept.len() as f64
}

/// Fraction of input frames read before the first step where some
/// candidate had a head without a boundary.
pub fn frames_streamed_fraction(rec: &DecodeRecord) -> f64 {
    let steps = rec.tokens.len();
    let fail = rec
        .q_table
        .iter()
        .take(steps)
        .enumerate()
        .position(|(i, row)| row.iter().any(|&q| q != rec.num_heads * (i + 1)));
    match fail {
        None => 1.0,
        Some(0) => 0.0,
        Some(i) => {
            let read = rec.frames_read.iter().take(i).copied().max().unwrap_or(0);
            read as f64 / rec.num_frames.max(1) as f64
        }
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize)]
pub struct LatencyStats {
    pub mean: f64,
    pub max: f64,
    /// Number of (token, head) delays aggregated.
    pub count: usize,
}

/// Delays `detected − true` for every head on every hypothesis token that
/// aligns to an identical reference token. Sentinels are skipped.
pub fn delays(tokens: &[usize], reference: &[usize], log: &[Vec<crate::decoding::BoundaryEvent>], truth: &[usize], frames: usize) -> Vec<i64> {
    let mut out = Vec::new();
    for (a, b) in matched_pairs(tokens, reference) {
        let (Some(events), Some(&t)) = (log.get(a), truth.get(b)) else { continue };
        out.extend(events.iter().filter(|e| e.t <= frames).map(|e| e.t as i64 - t as i64));
    }
    out
}

pub fn latency_stats(delays: &[i64]) -> LatencyStats {
    if delays.is_empty() {
        return LatencyStats::default();
    }
    let sum: i64 = delays.iter().sum();
    LatencyStats {
        mean: sum as f64 / delays.len() as f64,
        max: *delays.iter().max().expect("non-empty") as f64,
        count: delays.len(),
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct UtteranceEval {
    pub id: String,
    pub hyp_len: usize,
    pub ref_len: Option<usize>,
    pub errors: Option<usize>,
    pub coverage: Option<f64>,
    pub streamable: bool,
    pub forced_count: usize,
    pub frames_streamed_fraction: f64,
    pub mean_delay: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct EvalReport {
    pub wer_percent: Option<f64>,
    pub r_cov_percent: f64,
    pub r_str_percent: f64,
    pub mean_frames_streamed: f64,
    pub forced_total: usize,
    pub latency: LatencyStats,
    pub utterances: Vec<UtteranceEval>,
    pub warnings: Vec<String>,
}

/// Corpus WER over records with references (total errors / total reference
/// tokens), plus the boundary metrics over all records.
pub fn evaluate(records: &[DecodeRecord]) -> Result<EvalReport> {
    let mut warnings = Vec::new();
    let r_cov = boundary_coverage(records, &mut warnings);
    let r_str = streamability(records);
    let (mut errs, mut ref_total) = (0usize, 0usize);
    let mut all_delays = Vec::new();
    let mut utterances = Vec::with_capacity(records.len());
    for r in records {
        let errors = match &r.reference {
            Some(reference) if reference.is_empty() => return Err(Error::Metric(format!("{}: empty reference", r.id))),
            Some(reference) => Some(edit_distance(&r.tokens, reference)),
            None => None,
        };
        if let (Some(e), Some(reference)) = (errors, &r.reference) {
            errs += e;
            ref_total += reference.len();
        }
        let d = match (&r.reference, &r.true_boundaries) {
            (Some(reference), Some(truth)) => Some(delays(&r.tokens, reference, &r.boundary_log, truth, r.num_frames)),
            _ => None,
        };
        let mean_delay = d.as_ref().filter(|d| !d.is_empty()).map(|d| latency_stats(d).mean);
        all_delays.extend(d.unwrap_or_default());
        utterances.push(UtteranceEval {
            id: r.id.clone(),
            hyp_len: r.tokens.len(),
            ref_len: r.reference.as_ref().map(Vec::len),
            errors,
            coverage: utterance_coverage(r),
            streamable: utterance_streamable(r),
            forced_count: r.forced_count,
            frames_streamed_fraction: frames_streamed_fraction(r),
            mean_delay,
        });
    }
    let mean_frames_streamed = mean(&utterances.iter().map(|u| u.frames_streamed_fraction).collect::<Vec<_>>());
    Ok(EvalReport {
        wer_percent: (ref_total > 0).then(|| 100.0 * errs as f64 / ref_total as f64),
        r_cov_percent: r_cov,
        r_str_percent: r_str,
        mean_frames_streamed,
        forced_total: records.iter().map(|r| r.forced_count).sum(),
        latency: latency_stats(&all_delays),
        utterances,
        warnings,
    })
}

fn mean(v: &[f64]) -> f64 {
    if v.is_empty() {
        0.0
    } else {
        v.iter().sum::<f64>() / v.len() as f64
    }
}

impl EvalReport {
    /// `metric,value` rows.
    pub fn summary_csv(&self) -> String {
        let mut out = String::from("metric,value\n");
        let mut row = |k: &str, v: String| out.push_str(&format!("{k},{v}\n"));
        row("wer_percent", self.wer_percent.map_or_else(String::new, |w| w.to_string()));
        row("r_cov_percent", self.r_cov_percent.to_string());
        row("r_str_percent", self.r_str_percent.to_string());
        row("mean_frames_streamed", self.mean_frames_streamed.to_string());
        row("forced_total", self.forced_total.to_string());
        row("latency_mean", self.latency.mean.to_string());
        row("latency_max", self.latency.max.to_string());
        row("latency_count", self.latency.count.to_string());
        row("utterances", self.utterances.len().to_string());
        out
    }

    pub fn utterance_csv(&self) -> String {
        let opt = |v: Option<String>| v.unwrap_or_default();
        let mut out = String::from("id,hyp_len,ref_len,errors,coverage,streamable,forced_count,frames_streamed_fraction,mean_delay\n");
        for u in &self.utterances {
            out.push_str(&format!(
                "{},{},{},{},{},{},{},{},{}\n",
                u.id,
                u.hyp_len,
                opt(u.ref_len.map(|v| v.to_string())),
                opt(u.errors.map(|v| v.to_string())),
                opt(u.coverage.map(|v| v.to_string())),
                u.streamable as u8,
                u.forced_count,
                u.frames_streamed_fraction,
                opt(u.mean_delay.map(|v| v.to_string())),
            ));
        }
        out
    }
}
