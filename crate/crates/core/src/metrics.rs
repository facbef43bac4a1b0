//! Corpus metrics for generated responses: Distinct-n, BLEU-n, ROUGE-1,
//! greedy-matching BERTScore and a paired t-test between two systems.
//!
//! Every metric works on [`metric_tokens`], so Chinese text is scored per
//! character and other scripts per whitespace word.

use std::collections::{BTreeMap, HashMap, HashSet};
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};
use statrs::distribution::{ContinuousCDF, StudentsT};

use crate::encoder::{DiagEncoder, Truncation};
use crate::error::ModelResult;
use crate::kb::cosine;
use crate::text::{metric_tokens, normalize};

/// Numerator used in place of a zero n-gram match count.
pub const BLEU_EPSILON: f64 = 1e-9;
pub const MAX_N: usize = 4;

#[derive(Debug, thiserror::Error)]
pub enum MetricError {
    #[error("ids do not align: missing predictions {missing_predictions:?}, missing references {missing_references:?}")]
    Alignment {
        missing_predictions: Vec<String>,
        missing_references: Vec<String>,
    },
    #[error("empty text after normalization for ids {0:?}")]
    Empty(Vec<String>),
    #[error("duplicate id {0}")]
    Duplicate(String),
    #[error("paired test needs two equal-length vectors of at least 2 scores, got {0} and {1}")]
    Pairing(usize, usize),
    #[error("embedding: {0}")]
    Embedding(#[from] crate::error::ModelError),
}

fn ngrams(tokens: &[String], n: usize) -> impl Iterator<Item = &[String]> {
    tokens.windows(n.max(1)).filter(move |_| n > 0)
}

fn counts(tokens: &[String], n: usize) -> HashMap<&[String], usize> {
    let mut m = HashMap::new();
    for g in ngrams(tokens, n) {
        *m.entry(g).or_insert(0) += 1;
    }
    m
}

/// Distinct n-grams over all texts divided by the total n-gram count.
pub fn distinct_n_tokens(texts: &[Vec<String>], n: usize) -> f64 {
    assert!(n >= 1, "distinct-n needs n >= 1");
    let mut seen = HashSet::new();
    let mut total = 0usize;
    for t in texts {
        for g in ngrams(t, n) {
            seen.insert(g);
            total += 1;
        }
    }
    if total == 0 {
        tracing::warn!(n, "no text long enough for distinct-n");
        return 0.0;
    }
    seen.len() as f64 / total as f64
}

pub fn distinct_n(texts: &[&str], n: usize) -> f64 {
    let toks: Vec<Vec<String>> = texts.iter().map(|t| metric_tokens(t)).collect();
    distinct_n_tokens(&toks, n)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BleuScore {
    pub value: f64,
    /// Whether a zero match count was replaced by [`BLEU_EPSILON`].
    pub smoothed: bool,
}

/// Cumulative BLEU-n: geometric mean of clipped precisions 1..=n times the
/// brevity penalty.
pub fn bleu_n_tokens(candidate: &[String], reference: &[String], n: usize) -> BleuScore {
    assert!((1..=MAX_N).contains(&n), "bleu order must be 1..=4");
    if candidate.is_empty() {
        return BleuScore {
            value: 0.0,
            smoothed: false,
        };
    }
    let mut smoothed = false;
    let mut log_sum = 0.0;
    for k in 1..=n {
        let cand = counts(candidate, k);
        let refc = counts(reference, k);
        let total: usize = cand.values().sum();
        let matched: usize = cand.iter().map(|(g, c)| (*c).min(*refc.get(g).unwrap_or(&0))).sum();
        let p = if matched == 0 {
            smoothed = true;
            BLEU_EPSILON / total.max(1) as f64
        } else {
            matched as f64 / total as f64
        };
        log_sum += p.ln();
    }
    let (c, r) = (candidate.len() as f64, reference.len() as f64);
    let bp = (1.0 - r / c).min(0.0).exp();
    BleuScore {
        value: bp * (log_sum / n as f64).exp(),
        smoothed,
    }
}

pub fn bleu_n(candidate: &str, reference: &str, n: usize) -> f64 {
    bleu_n_tokens(&metric_tokens(candidate), &metric_tokens(reference), n).value
}

fn f1(p: f64, r: f64) -> f64 {
    if p + r == 0.0 {
        0.0
    } else {
        2.0 * p * r / (p + r)
    }
}

/// Unigram-overlap F1 with clipped counts.
pub fn rouge_1_tokens(candidate: &[String], reference: &[String]) -> f64 {
    if candidate.is_empty() || reference.is_empty() {
        return 0.0;
    }
    let cand = counts(candidate, 1);
    let refc = counts(reference, 1);
    let overlap: usize = cand.iter().map(|(g, c)| (*c).min(*refc.get(g).unwrap_or(&0))).sum();
    f1(
        overlap as f64 / candidate.len() as f64,
        overlap as f64 / reference.len() as f64,
    )
}

pub fn rouge_1(candidate: &str, reference: &str) -> f64 {
    rouge_1_tokens(&metric_tokens(candidate), &metric_tokens(reference))
}

/// Longest-common-subsequence F1.
pub fn rouge_l_tokens(candidate: &[String], reference: &[String]) -> f64 {
    if candidate.is_empty() || reference.is_empty() {
        return 0.0;
    }
    let mut prev = vec![0usize; reference.len() + 1];
    for c in candidate {
        let mut cur = vec![0usize; reference.len() + 1];
        for (j, r) in reference.iter().enumerate() {
            cur[j + 1] = if c == r { prev[j] + 1 } else { cur[j].max(prev[j + 1]) };
        }
        prev = cur;
    }
    let lcs = prev[reference.len()] as f64;
    f1(lcs / candidate.len() as f64, lcs / reference.len() as f64)
}

pub fn rouge_l(candidate: &str, reference: &str) -> f64 {
    rouge_l_tokens(&metric_tokens(candidate), &metric_tokens(reference))
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct BertScore {
    pub recall: f64,
    pub precision: f64,
    pub f1: f64,
}

/// Per-token contextual vectors of a text.
pub trait TokenEmbedder {
    fn embed(&self, text: &str) -> ModelResult<Vec<Vec<f64>>>;
}

/// Final-layer encoder states, structural tokens dropped.
pub struct EncoderEmbedder<'a>(pub &'a DiagEncoder);

impl TokenEmbedder for EncoderEmbedder<'_> {
    fn embed(&self, text: &str) -> ModelResult<Vec<Vec<f64>>> {
        let out = self.0.encode_text(text, Truncation::Right)?;
        let h = &out.hidden_states;
        let rows = h.shape()[0];
        // Row 0 is [CLS] and the last row is [SEP].
        Ok((1..rows.saturating_sub(1)).map(|i| h.row(i).to_vec()).collect())
    }
}

/// Greedy matching: each token takes its best cosine on the other side
/// (floored at zero so scores stay in [0, 1]).
pub fn bert_score_vectors(candidate: &[Vec<f64>], reference: &[Vec<f64>]) -> BertScore {
    if candidate.is_empty() || reference.is_empty() {
        tracing::warn!("bert score on an empty side");
        return BertScore::default();
    }
    let best = |from: &[Vec<f64>], to: &[Vec<f64>]| -> f64 {
        from.iter()
            .map(|a| to.iter().map(|b| cosine(a, b)).fold(f64::NEG_INFINITY, f64::max).max(0.0))
            .sum::<f64>()
            / from.len() as f64
    };
    let precision = best(candidate, reference).min(1.0);
    let recall = best(reference, candidate).min(1.0);
    BertScore {
        recall,
        precision,
        f1: f1(precision, recall),
    }
}

pub fn bert_score(candidate: &str, reference: &str, embedder: &dyn TokenEmbedder) -> ModelResult<BertScore> {
    let c = if candidate.trim().is_empty() { Vec::new() } else { embedder.embed(candidate)? };
    let r = if reference.trim().is_empty() { Vec::new() } else { embedder.embed(reference)? };
    Ok(bert_score_vectors(&c, &r))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Degenerate {
    /// Every difference is zero.
    NoDifference,
    /// Constant nonzero difference: infinitely significant.
    ConstantShift,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TTest {
    pub t: f64,
    pub p: f64,
    pub df: usize,
    pub degenerate: Option<Degenerate>,
}

/// Two-sided paired t-test on `a - b`.
pub fn paired_t_test(a: &[f64], b: &[f64]) -> Result<TTest, MetricError> {
    if a.len() != b.len() || a.len() < 2 {
        return Err(MetricError::Pairing(a.len(), b.len()));
    }
    let n = a.len();
    let diffs: Vec<f64> = a.iter().zip(b).map(|(x, y)| x - y).collect();
    let mean = diffs.iter().sum::<f64>() / n as f64;
    let var = diffs.iter().map(|d| (d - mean).powi(2)).sum::<f64>() / (n - 1) as f64;
    let df = n - 1;
    if var == 0.0 {
        return Ok(if mean == 0.0 {
            TTest {
                t: 0.0,
                p: 1.0,
                df,
                degenerate: Some(Degenerate::NoDifference),
            }
        } else {
            TTest {
                t: mean.signum() * f64::INFINITY,
                p: 0.0,
                df,
                degenerate: Some(Degenerate::ConstantShift),
            }
        });
    }
    let t = mean / (var / n as f64).sqrt();
    let dist = StudentsT::new(0.0, 1.0, df as f64).expect("df >= 1");
    let p = (2.0 * (1.0 - dist.cdf(t.abs()))).clamp(0.0, 1.0);
    Ok(TTest {
        t,
        p,
        df,
        degenerate: None,
    })
}

/// One line of a predictions or references file.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct EvalRecord {
    pub id: String,
    pub text: String,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct MetricConfig {
    pub rouge_l: bool,
    pub bert: bool,
}

impl Default for MetricConfig {
    fn default() -> Self {
        Self {
            rouge_l: false,
            bert: true,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExampleScores {
    pub id: String,
    pub rouge_1: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub rouge_l: Option<f64>,
    pub bleu: [f64; MAX_N],
    pub distinct: [f64; MAX_N],
    #[serde(skip_serializing_if = "Option::is_none")]
    pub bert: Option<BertScore>,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct Aggregate {
    pub rouge_1: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub rouge_l: Option<f64>,
    pub bleu: [f64; MAX_N],
    /// Corpus-level.
    pub distinct: [f64; MAX_N],
    #[serde(skip_serializing_if = "Option::is_none")]
    pub bert: Option<BertScore>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub examples: Vec<ExampleScores>,
    pub aggregate: Aggregate,
    /// Some BLEU precision needed smoothing.
    pub bleu_smoothed: bool,
    #[serde(default, skip_serializing_if = "BTreeMap::is_empty")]
    pub significance: BTreeMap<String, TTest>,
}

fn by_id(records: &[EvalRecord]) -> Result<BTreeMap<&str, &str>, MetricError> {
    let mut m = BTreeMap::new();
    for r in records {
        if m.insert(r.id.as_str(), r.text.as_str()).is_some() {
            return Err(MetricError::Duplicate(r.id.clone()));
        }
    }
    Ok(m)
}

/// Scores predictions against references matched by id, in reference order.
pub fn evaluate(
    predictions: &[EvalRecord],
    references: &[EvalRecord],
    config: &MetricConfig,
    embedder: Option<&dyn TokenEmbedder>,
) -> Result<MetricReport, MetricError> {
    let preds = by_id(predictions)?;
    let refs = by_id(references)?;
    let missing_predictions: Vec<String> = refs.keys().filter(|k| !preds.contains_key(*k)).map(|k| k.to_string()).collect();
    let missing_references: Vec<String> = preds.keys().filter(|k| !refs.contains_key(*k)).map(|k| k.to_string()).collect();
    if !missing_predictions.is_empty() || !missing_references.is_empty() {
        return Err(MetricError::Alignment {
            missing_predictions,
            missing_references,
        });
    }
    let empty: Vec<String> = references
        .iter()
        .filter(|r| normalize(&r.text).is_empty() || normalize(preds[r.id.as_str()]).is_empty())
        .map(|r| r.id.clone())
        .collect();
    if !empty.is_empty() {
        return Err(MetricError::Empty(empty));
    }
    let embedder = embedder.filter(|_| config.bert);
    let mut examples = Vec::with_capacity(references.len());
    let mut corpus = Vec::with_capacity(references.len());
    let mut smoothed = false;
    for r in references {
        let pred = preds[r.id.as_str()];
        let c = metric_tokens(&normalize(pred));
        let t = metric_tokens(&normalize(&r.text));
        let mut bleu = [0.0; MAX_N];
        let mut distinct = [0.0; MAX_N];
        for n in 1..=MAX_N {
            let b = bleu_n_tokens(&c, &t, n);
            smoothed |= b.smoothed;
            bleu[n - 1] = b.value;
            distinct[n - 1] = distinct_n_tokens(std::slice::from_ref(&c), n);
        }
        let bert = match embedder {
            Some(e) => Some(bert_score(pred, &r.text, e)?),
            None => None,
        };
        examples.push(ExampleScores {
            id: r.id.clone(),
            rouge_1: rouge_1_tokens(&c, &t),
            rouge_l: config.rouge_l.then(|| rouge_l_tokens(&c, &t)),
            bleu,
            distinct,
            bert,
        });
        corpus.push(c);
    }
    let mean = |f: &dyn Fn(&ExampleScores) -> f64| examples.iter().map(f).sum::<f64>() / examples.len().max(1) as f64;
    let mut aggregate = Aggregate {
        rouge_1: mean(&|e| e.rouge_1),
        rouge_l: config.rouge_l.then(|| mean(&|e| e.rouge_l.unwrap_or(0.0))),
        ..Aggregate::default()
    };
    for n in 0..MAX_N {
        aggregate.bleu[n] = mean(&|e| e.bleu[n]);
        aggregate.distinct[n] = distinct_n_tokens(&corpus, n + 1);
    }
    if embedder.is_some() {
        let get = |e: &ExampleScores| e.bert.unwrap_or_default();
        aggregate.bert = Some(BertScore {
            recall: mean(&|e| get(e).recall),
            precision: mean(&|e| get(e).precision),
            f1: mean(&|e| get(e).f1),
        });
    }
    Ok(MetricReport {
        examples,
        aggregate,
        bleu_smoothed: smoothed,
        significance: BTreeMap::new(),
    })
}

/// Per-example score vectors keyed by column name.
fn columns(report: &MetricReport) -> Vec<(String, Vec<f64>)> {
    let mut cols = vec![("R-1".to_string(), report.examples.iter().map(|e| e.rouge_1).collect())];
    for n in 0..MAX_N {
        cols.push((format!("Bleu-{}", n + 1), report.examples.iter().map(|e| e.bleu[n]).collect()));
    }
    for n in 0..MAX_N {
        cols.push((format!("Dist-{}", n + 1), report.examples.iter().map(|e| e.distinct[n]).collect()));
    }
    if report.examples.iter().all(|e| e.bert.is_some()) && !report.examples.is_empty() {
        cols.push((
            "F_BERT".to_string(),
            report.examples.iter().map(|e| e.bert.unwrap_or_default().f1).collect(),
        ));
    }
    cols
}

/// Paired tests of `report` against `baseline` on every shared column.
/// Both reports must cover the same ids in the same order.
pub fn compare(report: &mut MetricReport, baseline: &MetricReport) -> Result<(), MetricError> {
    let a: Vec<&str> = report.examples.iter().map(|e| e.id.as_str()).collect();
    let b: Vec<&str> = baseline.examples.iter().map(|e| e.id.as_str()).collect();
    if a != b {
        let (sa, sb): (HashSet<_>, HashSet<_>) = (a.iter().collect(), b.iter().collect());
        return Err(MetricError::Alignment {
            missing_predictions: sb.difference(&sa).map(|s| s.to_string()).collect(),
            missing_references: sa.difference(&sb).map(|s| s.to_string()).collect(),
        });
    }
    let base: BTreeMap<String, Vec<f64>> = columns(baseline).into_iter().collect();
    for (name, values) in columns(report) {
        if let Some(other) = base.get(&name) {
            report.significance.insert(name, paired_t_test(&values, other)?);
        }
    }
    Ok(())
}

/// One row of the generation table.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TableRow {
    pub system: String,
    pub aggregate: Aggregate,
    /// Columns whose difference from the baseline has p < 0.05.
    #[serde(default)]
    pub significant: Vec<String>,
}

pub const GENERATION_COLUMNS: [&str; 9] = [
    "R-1", "Bleu-1", "Bleu-2", "Bleu-3", "Bleu-4", "Dist-1", "Dist-2", "Dist-3", "Dist-4",
];
pub const BERT_COLUMNS: [&str; 3] = ["R_BERT", "P_BERT", "F_BERT"];

fn system_width(rows: &[TableRow]) -> usize {
    rows.iter().map(|r| r.system.chars().count()).max().unwrap_or(0).max(6)
}

fn render(rows: &[TableRow], header: &[&str], values: impl Fn(&Aggregate) -> Vec<f64>) -> String {
    let w = system_width(rows);
    let mut out = format!("{:<w$}", "System");
    for h in header {
        let _ = write!(out, " {h:>8}");
    }
    out.push('\n');
    out.push_str(&"-".repeat(w + 9 * header.len()));
    out.push('\n');
    for r in rows {
        let _ = write!(out, "{:<w$}", r.system);
        for (h, v) in header.iter().zip(values(&r.aggregate)) {
            let mark = if r.significant.iter().any(|s| s == h) { "*" } else { " " };
            let _ = write!(out, " {v:>7.4}{mark}");
        }
        out.push('\n');
    }
    out
}

/// Fixed-width R-1 / Bleu-1..4 / Dist-1..4 table; `*` marks p < 0.05.
pub fn render_generation_table(rows: &[TableRow]) -> String {
    render(rows, &GENERATION_COLUMNS, |a| {
        let mut v = vec![a.rouge_1];
        v.extend(a.bleu);
        v.extend(a.distinct);
        v
    })
}

/// Fixed-width R_BERT / P_BERT / F_BERT table.
pub fn render_bert_table(rows: &[TableRow]) -> String {
    render(rows, &BERT_COLUMNS, |a| {
        let b = a.bert.unwrap_or_default();
        vec![b.recall, b.precision, b.f1]
    })
}

impl MetricReport {
    pub fn row(&self, system: impl Into<String>) -> TableRow {
        TableRow {
            system: system.into(),
            aggregate: self.aggregate.clone(),
            significant: self
                .significance
                .iter()
                .filter(|(_, t)| t.p < 0.05)
                .map(|(k, _)| k.clone())
                .collect(),
        }
    }
}
