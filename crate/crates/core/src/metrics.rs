//! The nine retrieval-augmented generation metrics.
//!
//! Similarity is the cosine of the configured embedder's vectors. A metric
//! whose inputs are missing (no response, no contexts, no statements) comes
//! back as `None` with a reason, so aggregates can report coverage instead
//! of averaging in silent zeros.

use std::collections::{BTreeMap, HashSet};
use std::fmt;
use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::chunking::{split_units, ChunkingConfig};
use crate::embedding::{cosine, Embedder, EmbeddingVector};
use crate::text::{content_tokens, normalize_for_match, WhitespaceTokenizer, Tokenizer};
use crate::{par, Error, Result};

pub const DEFAULT_TAU: f64 = 0.7;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RetrievedContext {
    pub file_id: String,
    pub text: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct EvalInstance {
    pub file_name: String,
    pub question: String,
    pub answer: String,
    pub answer_source: String,
    pub generated_response: String,
    pub retrieved: Vec<RetrievedContext>,
    pub source_file_id: String,
}

/// How the retrieved contexts enter CR and GR.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ContextMode {
    /// Rank-ordered texts joined by newlines and embedded once.
    #[default]
    Concatenated,
    /// Mean of the per-context similarities.
    PerChunkMean,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct MetricConfig {
    pub tau: f64,
    pub context_mode: ContextMode,
}

impl Default for MetricConfig {
    fn default() -> Self {
        Self { tau: DEFAULT_TAU, context_mode: ContextMode::Concatenated }
    }
}

impl MetricConfig {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.tau) {
            return Err(Error::Config(format!("tau must be in [0, 1], got {}", self.tau)));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Metric {
    AR,
    CR,
    GR,
    FIM,
    CC,
    ASM,
    LF,
    ORP,
    FT,
}

impl Metric {
    /// Report column order.
    pub const ALL: [Metric; 9] =
        [Metric::AR, Metric::CR, Metric::GR, Metric::FIM, Metric::CC, Metric::ASM, Metric::LF, Metric::ORP, Metric::FT];

    pub fn name(self) -> &'static str {
        match self {
            Metric::AR => "AR",
            Metric::CR => "CR",
            Metric::GR => "GR",
            Metric::FIM => "FIM",
            Metric::CC => "CC",
            Metric::ASM => "ASM",
            Metric::LF => "LF",
            Metric::ORP => "ORP",
            Metric::FT => "FT",
        }
    }
}

impl fmt::Display for Metric {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct EvalResult {
    pub values: BTreeMap<Metric, Option<f64>>,
    /// Why a metric is `None`.
    #[serde(default, skip_serializing_if = "BTreeMap::is_empty")]
    pub reasons: BTreeMap<Metric, String>,
}

impl EvalResult {
    pub fn get(&self, m: Metric) -> Option<f64> {
        self.values.get(&m).copied().flatten()
    }

    fn set(&mut self, m: Metric, v: Result<f64>) {
        match v {
            Ok(x) => {
                self.values.insert(m, Some(x));
            }
            Err(e) => {
                self.values.insert(m, None);
                self.reasons.insert(m, e.to_string());
            }
        }
    }
}

pub trait FluencyScorer: Send + Sync {
    fn identity(&self) -> String;

    /// A score in `[0, 10]`.
    fn score(&self, text: &str) -> Result<f64>;
}

/// Offline fluency estimate:
///
/// `ψ = 10 · (0.5 · length_score + 0.5 · ttr)`
///
/// where `ttr` is the distinct/total ratio of content tokens and
/// `length_score` is 1 for a mean sentence length of 8 to 25 whitespace
/// tokens, `len / 8` below that band and `max(0, 1 − (len − 25) / 25)` above.
#[derive(Debug, Clone, Copy, Default)]
pub struct HeuristicFluency;

pub fn heuristic_fluency(text: &str) -> Result<f64> {
    let statements = segment_statements(text);
    let tokens = WhitespaceTokenizer.count(text);
    if statements.is_empty() || tokens == 0 {
        return Err(Error::EmptyInput("response"));
    }
    let mean_len = tokens as f64 / statements.len() as f64;
    let length_score = if mean_len < 8.0 {
        mean_len / 8.0
    } else if mean_len <= 25.0 {
        1.0
    } else {
        (1.0 - (mean_len - 25.0) / 25.0).max(0.0)
    };
    let words = content_tokens(text);
    let ttr = if words.is_empty() {
        0.0
    } else {
        words.iter().collect::<HashSet<_>>().len() as f64 / words.len() as f64
    };
    Ok(10.0 * (0.5 * length_score + 0.5 * ttr))
}

impl FluencyScorer for HeuristicFluency {
    fn identity(&self) -> String {
        "heuristic-fluency-v1".to_string()
    }

    fn score(&self, text: &str) -> Result<f64> {
        heuristic_fluency(text)
    }
}

/// `1[id* ∈ R]`.
pub fn file_id_match<S: AsRef<str>>(retrieved_ids: &[S], source_id: &str) -> f64 {
    if retrieved_ids.iter().any(|id| id.as_ref() == source_id) {
        1.0
    } else {
        0.0
    }
}

/// `max_i Sim(c_i, s)`.
pub fn context_coverage(contexts: &[EmbeddingVector], source: &EmbeddingVector) -> Result<f64> {
    if contexts.is_empty() {
        return Err(Error::EmptyInput("contexts"));
    }
    let mut best = f64::NEG_INFINITY;
    for c in contexts {
        best = best.max(cosine(c, source)?);
    }
    Ok(best)
}

/// Sentence statements of a response, segmented like chunking units.
pub fn segment_statements(response: &str) -> Vec<String> {
    let config = ChunkingConfig { max_tokens: usize::MAX, ..ChunkingConfig::default() };
    split_units(response, &config)
        .into_iter()
        .map(|u| u.text.trim().to_string())
        .filter(|s| !normalize_for_match(s).is_empty())
        .collect()
}

/// Fraction of response statements found verbatim, after normalization, in
/// at least one context.
pub fn faithfulness<S: AsRef<str>>(response: &str, contexts: &[S]) -> Result<f64> {
    let statements = segment_statements(response);
    if statements.is_empty() {
        return Err(Error::EmptyInput("statements"));
    }
    let normalized: Vec<String> = contexts.iter().map(|c| normalize_for_match(c.as_ref())).collect();
    let supported = statements
        .iter()
        .filter(|s| {
            let s = normalize_for_match(s);
            normalized.iter().any(|c| c.contains(&s))
        })
        .count();
    Ok(supported as f64 / statements.len() as f64)
}

/// `1 − |{c_i : Sim(c_i, s) > τ}| / |{c_i}|`.
pub fn over_retrieval_penalty(contexts: &[EmbeddingVector], source: &EmbeddingVector, tau: f64) -> Result<f64> {
    if contexts.is_empty() {
        return Err(Error::EmptyInput("contexts"));
    }
    let mut above = 0usize;
    for c in contexts {
        if cosine(c, source)? > tau {
            above += 1;
        }
    }
    Ok(1.0 - above as f64 / contexts.len() as f64)
}

/// `ψ(r) / 10`, clamped to `[0, 1]`.
pub fn language_fluency(response: &str, scorer: &dyn FluencyScorer) -> Result<f64> {
    let psi = scorer.score(response)?;
    if !psi.is_finite() {
        return Err(Error::NonFinite("fluency score"));
    }
    if !(0.0..=10.0).contains(&psi) {
        tracing::warn!(scorer = %scorer.identity(), psi, "fluency score outside [0, 10], clamping");
    }
    Ok((psi / 10.0).clamp(0.0, 1.0))
}

pub struct Evaluator<'a> {
    pub embedder: &'a dyn Embedder,
    pub fluency: &'a dyn FluencyScorer,
    pub config: MetricConfig,
}

/// First missing input among `checks`, as an error.
fn need(checks: &[(bool, &'static str)]) -> Result<()> {
    match checks.iter().find(|(present, _)| !present) {
        Some((_, what)) => Err(Error::EmptyInput(what)),
        None => Ok(()),
    }
}

impl<'a> Evaluator<'a> {
    pub fn new(embedder: &'a dyn Embedder, fluency: &'a dyn FluencyScorer, config: MetricConfig) -> Result<Self> {
        config.validate()?;
        Ok(Self { embedder, fluency, config })
    }

    pub fn evaluate_instance(&self, inst: &EvalInstance) -> Result<EvalResult> {
        let contexts: Vec<String> = inst.retrieved.iter().map(|c| c.text.clone()).collect();
        let joined = contexts.join("\n");
        let mut texts = vec![inst.question.clone(), inst.generated_response.clone(), inst.answer_source.clone(), joined];
        texts.extend(contexts.iter().cloned());
        let vecs = self.embedder.embed_batch(&texts)?;
        let (q, r, s, c) = (&vecs[0], &vecs[1], &vecs[2], &vecs[3]);
        let ctx_vecs = &vecs[4..];

        let response = (!inst.generated_response.trim().is_empty(), "response");
        let retrieved = (!contexts.is_empty(), "contexts");
        let source = (!inst.answer_source.trim().is_empty(), "answer_source");
        let against_contexts = |v: &EmbeddingVector| -> Result<f64> {
            match self.config.context_mode {
                ContextMode::Concatenated => cosine(v, c),
                ContextMode::PerChunkMean => {
                    let mut total = 0.0;
                    for cv in ctx_vecs {
                        total += cosine(v, cv)?;
                    }
                    Ok(total / ctx_vecs.len() as f64)
                }
            }
        };

        let mut out = EvalResult::default();
        out.set(Metric::AR, need(&[response]).and_then(|_| cosine(q, r)));
        out.set(Metric::CR, need(&[retrieved]).and_then(|_| against_contexts(q)));
        out.set(Metric::GR, need(&[response, retrieved]).and_then(|_| against_contexts(r)));
        let ids: Vec<&str> = inst.retrieved.iter().map(|c| c.file_id.as_str()).collect();
        out.set(Metric::FIM, Ok(file_id_match(&ids, &inst.source_file_id)));
        out.set(Metric::CC, need(&[source]).and_then(|_| context_coverage(ctx_vecs, s)));
        out.set(Metric::ASM, need(&[response, source]).and_then(|_| cosine(r, s)));
        out.set(Metric::LF, need(&[response]).and_then(|_| language_fluency(&inst.generated_response, self.fluency)));
        out.set(Metric::ORP, need(&[source]).and_then(|_| over_retrieval_penalty(ctx_vecs, s, self.config.tau)));
        out.set(Metric::FT, need(&[response]).and_then(|_| faithfulness(&inst.generated_response, &contexts)));
        Ok(out)
    }

    /// Evaluates instances in parallel; results keep input order. An
    /// embedder failure for one instance becomes null metrics for it.
    pub fn evaluate_batch(&self, instances: &[EvalInstance]) -> Vec<EvalResult> {
        par::map(instances, |inst| {
            self.evaluate_instance(inst).unwrap_or_else(|e| {
                let reason = e.to_string();
                EvalResult {
                    values: Metric::ALL.iter().map(|&m| (m, None)).collect(),
                    reasons: Metric::ALL.iter().map(|&m| (m, reason.clone())).collect(),
                }
            })
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricSummary {
    pub mean: Option<f64>,
    /// Instances with a value.
    pub count: usize,
    pub total: usize,
}

/// Per-metric means over the instances that produced a value.
pub fn aggregate(results: &[EvalResult]) -> BTreeMap<Metric, MetricSummary> {
    Metric::ALL
        .iter()
        .map(|&m| {
            let vals: Vec<f64> = results.iter().filter_map(|r| r.get(m)).collect();
            let mean = if vals.is_empty() { None } else { Some(vals.iter().sum::<f64>() / vals.len() as f64) };
            (m, MetricSummary { mean, count: vals.len(), total: results.len() })
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReportRow {
    pub config: String,
    pub k: usize,
    pub metrics: BTreeMap<Metric, MetricSummary>,
}

pub const CSV_HEADER: [&str; 11] = ["config", "K", "AR", "CR", "GR", "FIM", "CC", "ASM", "LF", "ORP", "FT"];

fn fmt_value(v: Option<f64>) -> String {
    v.map(|x| format!("{x:.4}")).unwrap_or_default()
}

/// CSV with one row per configuration and K. Metrics with no value are
/// left empty.
pub fn write_report_csv<W: Write>(rows: &[ReportRow], out: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(CSV_HEADER)?;
    for row in rows {
        let mut rec = vec![row.config.clone(), row.k.to_string()];
        rec.extend(Metric::ALL.iter().map(|m| fmt_value(row.metrics.get(m).and_then(|s| s.mean))));
        w.write_record(&rec)?;
    }
    w.flush().map_err(|e| Error::io("<csv>", e))?;
    Ok(())
}

/// Aligned plain-text rendering of the report, with τ and per-metric
/// coverage where it is incomplete.
pub fn render_report_table(rows: &[ReportRow], config: &MetricConfig) -> String {
    let mut cells: Vec<Vec<String>> = vec![CSV_HEADER.iter().map(|s| s.to_string()).collect()];
    for row in rows {
        let mut line = vec![row.config.clone(), row.k.to_string()];
        line.extend(Metric::ALL.iter().map(|m| match row.metrics.get(m) {
            Some(s) if s.count < s.total => format!("{} ({}/{})", fmt_value(s.mean), s.count, s.total),
            Some(s) => fmt_value(s.mean),
            None => String::new(),
        }));
        cells.push(line);
    }
    let widths: Vec<usize> =
        (0..CSV_HEADER.len()).map(|i| cells.iter().map(|r| r[i].chars().count()).max().unwrap_or(0)).collect();
    let mut out = format!("tau = {}  context_mode = {:?}\n", config.tau, config.context_mode);
    for r in &cells {
        let line: Vec<String> = r.iter().zip(&widths).map(|(c, w)| format!("{c:<w$}")).collect();
        out.push_str(line.join("  ").trim_end());
        out.push('\n');
    }
    out
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InstanceRecord {
    pub config: String,
    pub k: usize,
    pub file_name: String,
    pub question: String,
    pub result: EvalResult,
}

pub fn write_instances_jsonl(records: &[InstanceRecord], path: &Path) -> Result<()> {
    let mut buf = Vec::new();
    for r in records {
        serde_json::to_writer(&mut buf, r)?;
        buf.push(b'\n');
    }
    crate::ingest::write_atomic(path, &buf)
}
