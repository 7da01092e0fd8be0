//! Listwise reranking: softmax normalization, target distributions, the
//! cross-entropy loss with its analytic gradient, and the scorer contract
//! used to re-order retrieved candidates.

use std::collections::HashMap;
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::Mutex;

use serde::{Deserialize, Serialize};

use crate::text::{content_tokens, Tokenizer, WhitespaceTokenizer};
use crate::wire::Transport;
use crate::{Error, Result};

pub const DEFAULT_MAX_INPUT_TOKENS: usize = 512;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CandidateList {
    pub query: String,
    pub passages: Vec<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub labels: Option<Vec<u8>>,
}

impl CandidateList {
    pub fn new(query: impl Into<String>, passages: Vec<String>) -> Self {
        Self { query: query.into(), passages, labels: None }
    }

    pub fn validate(&self) -> Result<()> {
        if self.passages.is_empty() {
            return Err(Error::EmptyInput("passages"));
        }
        if let Some(labels) = &self.labels {
            if labels.len() != self.passages.len() {
                return Err(Error::Config(format!(
                    "{} labels for {} passages",
                    labels.len(),
                    self.passages.len()
                )));
            }
        }
        Ok(())
    }
}

/// One line of a listwise training file. `answer` and `answer_source` are
/// present on positives only.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ListwiseExample {
    pub question: String,
    pub passage: String,
    pub label: u8,
    pub file_id: String,
    pub file_name: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub answer: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub answer_source: Option<String>,
}

/// Groups examples by question, in order of first appearance.
pub fn group_by_question(examples: &[ListwiseExample]) -> Vec<CandidateList> {
    let mut order: Vec<CandidateList> = Vec::new();
    let mut slot: HashMap<&str, usize> = HashMap::new();
    for ex in examples {
        let i = *slot.entry(ex.question.as_str()).or_insert_with(|| {
            order.push(CandidateList { query: ex.question.clone(), passages: Vec::new(), labels: Some(Vec::new()) });
            order.len() - 1
        });
        order[i].passages.push(ex.passage.clone());
        order[i].labels.as_mut().unwrap().push(ex.label);
    }
    order
}

fn check_finite(scores: &[f64]) -> Result<()> {
    if scores.is_empty() {
        return Err(Error::EmptyInput("scores"));
    }
    if scores.iter().any(|s| !s.is_finite()) {
        return Err(Error::NonFinite("scores"));
    }
    Ok(())
}

/// `exp(s_i) / Σ exp(s_j)`, shifted by the maximum score.
pub fn softmax_normalize(scores: &[f64]) -> Result<Vec<f64>> {
    check_finite(scores)?;
    let max = scores.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = scores.iter().map(|s| (s - max).exp()).collect();
    let total: f64 = exps.iter().sum();
    Ok(exps.into_iter().map(|e| e / total).collect())
}

fn log_softmax(scores: &[f64]) -> Result<Vec<f64>> {
    check_finite(scores)?;
    let max = scores.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let lse = scores.iter().map(|s| (s - max).exp()).sum::<f64>().ln() + max;
    Ok(scores.iter().map(|s| s - lse).collect())
}

/// `y_i = r_i / Σ r_j`.
pub fn target_distribution(labels: &[u8]) -> Result<Vec<f64>> {
    if labels.is_empty() {
        return Err(Error::EmptyInput("labels"));
    }
    if let Some(bad) = labels.iter().find(|&&l| l > 1) {
        return Err(Error::Config(format!("label {bad} is not 0 or 1")));
    }
    let positives = labels.iter().filter(|&&l| l == 1).count();
    if positives == 0 {
        return Err(Error::NoPositive);
    }
    Ok(labels.iter().map(|&l| f64::from(l) / positives as f64).collect())
}

fn check_lengths(scores: &[f64], labels: &[u8]) -> Result<()> {
    if scores.len() != labels.len() {
        return Err(Error::Config(format!("{} scores for {} labels", scores.len(), labels.len())));
    }
    Ok(())
}

/// `−Σ y_i log P(d_i | q)`.
pub fn listwise_loss(scores: &[f64], labels: &[u8]) -> Result<f64> {
    check_lengths(scores, labels)?;
    let y = target_distribution(labels)?;
    let logp = log_softmax(scores)?;
    let loss: f64 = y.iter().zip(&logp).filter(|(y, _)| **y > 0.0).map(|(y, lp)| -y * lp).sum();
    Ok(loss.max(0.0))
}

/// `∂L/∂s_i = P(d_i | q) − y_i`.
pub fn listwise_loss_gradient(scores: &[f64], labels: &[u8]) -> Result<Vec<f64>> {
    check_lengths(scores, labels)?;
    let y = target_distribution(labels)?;
    let p = softmax_normalize(scores)?;
    Ok(p.iter().zip(&y).map(|(p, y)| p - y).collect())
}

pub trait Scorer: Send + Sync {
    fn identity(&self) -> String;

    fn max_input_tokens(&self) -> usize {
        DEFAULT_MAX_INPUT_TOKENS
    }

    /// One finite score per passage, in passage order.
    fn score(&self, query: &str, passages: &[String]) -> Result<Vec<f64>>;
}

impl<S: Scorer + ?Sized> Scorer for Box<S> {
    fn identity(&self) -> String {
        (**self).identity()
    }
    fn max_input_tokens(&self) -> usize {
        (**self).max_input_tokens()
    }
    fn score(&self, query: &str, passages: &[String]) -> Result<Vec<f64>> {
        (**self).score(query, passages)
    }
}

impl<S: Scorer + ?Sized> Scorer for std::sync::Arc<S> {
    fn identity(&self) -> String {
        (**self).identity()
    }
    fn max_input_tokens(&self) -> usize {
        (**self).max_input_tokens()
    }
    fn score(&self, query: &str, passages: &[String]) -> Result<Vec<f64>> {
        (**self).score(query, passages)
    }
}

/// Truncates a (query, passage) pair to `max_tokens` whitespace tokens in
/// total, cutting the passage tail first and the query only when it alone
/// exceeds the budget.
pub fn truncate_pair(query: &str, passage: &str, max_tokens: usize) -> (String, String) {
    let tok = WhitespaceTokenizer;
    let cut = |text: &str, keep: usize| -> String {
        let spans = tok.spans(text);
        match spans.get(keep.wrapping_sub(1)) {
            _ if keep == 0 => String::new(),
            Some(last) if spans.len() > keep => text[spans[0].start..last.end].to_string(),
            _ => text.to_string(),
        }
    };
    let q_tokens = tok.count(query);
    if q_tokens >= max_tokens {
        return (cut(query, max_tokens), String::new());
    }
    (query.to_string(), cut(passage, max_tokens - q_tokens))
}

/// Multiset overlap `|Q ∩ P| / |Q|` over content tokens.
#[derive(Debug, Clone, Copy, Default)]
pub struct LexicalOverlapScorer;

pub fn lexical_overlap(query: &str, passage: &str) -> f64 {
    let q = content_tokens(query);
    if q.is_empty() {
        return 0.0;
    }
    let mut counts: HashMap<String, usize> = HashMap::new();
    for t in content_tokens(passage) {
        *counts.entry(t).or_default() += 1;
    }
    let mut hits = 0usize;
    for t in &q {
        if let Some(c) = counts.get_mut(t) {
            if *c > 0 {
                *c -= 1;
                hits += 1;
            }
        }
    }
    hits as f64 / q.len() as f64
}

impl Scorer for LexicalOverlapScorer {
    fn identity(&self) -> String {
        "lexical-overlap-v1".to_string()
    }

    fn score(&self, query: &str, passages: &[String]) -> Result<Vec<f64>> {
        Ok(passages.iter().map(|p| lexical_overlap(query, p)).collect())
    }
}

/// Returns preset scores; used to replay retrieval similarities or to
/// inject fixed scores.
#[derive(Debug, Clone)]
pub struct FixedScorer(pub Vec<f64>);

impl Scorer for FixedScorer {
    fn identity(&self) -> String {
        "fixed".to_string()
    }

    fn score(&self, _query: &str, passages: &[String]) -> Result<Vec<f64>> {
        if passages.len() > self.0.len() {
            return Err(Error::Scorer(format!("{} fixed scores for {} passages", self.0.len(), passages.len())));
        }
        Ok(self.0[..passages.len()].to_vec())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RerankedItem {
    pub passage: String,
    /// Zero-based position in the retrieval order.
    pub original_rank: usize,
    pub score: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RerankOutcome {
    pub query: String,
    pub items: Vec<RerankedItem>,
    pub fell_back: bool,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub warning: Option<String>,
}

/// Re-orders candidates by descending scorer output (stable on ties) and
/// keeps the first `m`. A failing scorer leaves the retrieval order in place
/// and sets `fell_back`.
pub fn rerank_topk(candidates: &CandidateList, scorer: &dyn Scorer, m: usize) -> Result<RerankOutcome> {
    candidates.validate()?;
    if m == 0 || m > candidates.passages.len() {
        return Err(Error::Config(format!("m must be in 1..={}", candidates.passages.len())));
    }
    let max = scorer.max_input_tokens();
    let mut query = candidates.query.clone();
    let inputs: Vec<String> = candidates
        .passages
        .iter()
        .map(|p| {
            let (q, p) = truncate_pair(&candidates.query, p, max);
            query = q;
            p
        })
        .collect();
    let scored = scorer.score(&query, &inputs).and_then(|s| {
        if s.len() != inputs.len() {
            return Err(Error::Scorer(format!("{} scores for {} passages", s.len(), inputs.len())));
        }
        check_finite(&s)?;
        Ok(s)
    });
    let mut items: Vec<RerankedItem>;
    let (fell_back, warning) = match scored {
        Ok(scores) => {
            items = candidates
                .passages
                .iter()
                .zip(scores)
                .enumerate()
                .map(|(i, (p, s))| RerankedItem { passage: p.clone(), original_rank: i, score: Some(s) })
                .collect();
            items.sort_by(|a, b| b.score.partial_cmp(&a.score).unwrap_or(std::cmp::Ordering::Equal));
            (false, None)
        }
        Err(e) => {
            tracing::warn!(scorer = %scorer.identity(), error = %e, "scorer failed, keeping retrieval order");
            items = candidates
                .passages
                .iter()
                .enumerate()
                .map(|(i, p)| RerankedItem { passage: p.clone(), original_rank: i, score: None })
                .collect();
            (true, Some(e.to_string()))
        }
    };
    items.truncate(m);
    Ok(RerankOutcome { query: candidates.query.clone(), items, fell_back, warning })
}

// ---------------------------------------------------------------------------
// Scorer wire protocol

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScoreRequest {
    pub request_id: String,
    pub query: String,
    pub passages: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScoreResponse {
    pub request_id: String,
    pub scores: Vec<f64>,
}

pub fn encode_request(req: &ScoreRequest) -> String {
    serde_json::to_string(req).expect("request serializes")
}

pub fn decode_request(body: &str) -> Result<ScoreRequest> {
    serde_json::from_str(body).map_err(|e| Error::Protocol(format!("bad score request: {e}")))
}

pub fn encode_response(resp: &ScoreResponse) -> String {
    serde_json::to_string(resp).expect("response serializes")
}

pub fn decode_response(body: &str) -> Result<ScoreResponse> {
    serde_json::from_str(body).map_err(|e| Error::Protocol(format!("bad score response: {e}")))
}

/// Validates a response against the request it answers.
pub fn check_response(req: &ScoreRequest, resp: &ScoreResponse) -> Result<()> {
    if resp.request_id != req.request_id {
        return Err(Error::Protocol(format!(
            "response id `{}` does not match request `{}`",
            resp.request_id, req.request_id
        )));
    }
    if resp.scores.len() != req.passages.len() {
        return Err(Error::Protocol(format!(
            "{} scores for {} passages",
            resp.scores.len(),
            req.passages.len()
        )));
    }
    if resp.scores.iter().any(|s| !s.is_finite()) {
        return Err(Error::NonFinite("scores"));
    }
    Ok(())
}

/// Scorer backed by an external process speaking the score protocol.
/// Requests on one transport are serialized.
pub struct WireScorer<T> {
    transport: T,
    identity: String,
    max_input_tokens: usize,
    next_id: AtomicU64,
    gate: Mutex<()>,
}

impl<T: Transport> WireScorer<T> {
    pub fn new(transport: T, identity: impl Into<String>) -> Self {
        Self {
            transport,
            identity: identity.into(),
            max_input_tokens: DEFAULT_MAX_INPUT_TOKENS,
            next_id: AtomicU64::new(1),
            gate: Mutex::new(()),
        }
    }

    pub fn with_max_input_tokens(mut self, n: usize) -> Self {
        self.max_input_tokens = n;
        self
    }

    pub fn transport(&self) -> &T {
        &self.transport
    }
}

impl<T: Transport> Scorer for WireScorer<T> {
    fn identity(&self) -> String {
        self.identity.clone()
    }

    fn max_input_tokens(&self) -> usize {
        self.max_input_tokens
    }

    fn score(&self, query: &str, passages: &[String]) -> Result<Vec<f64>> {
        let req = ScoreRequest {
            request_id: format!("req-{:08}", self.next_id.fetch_add(1, Ordering::Relaxed)),
            query: query.to_string(),
            passages: passages.to_vec(),
        };
        let _guard = self.gate.lock().unwrap_or_else(|p| p.into_inner());
        let resp = self.transport.call(&encode_request(&req))?;
        if !resp.is_success() {
            return Err(Error::Scorer(format!("{} returned status {}", self.transport.describe(), resp.status)));
        }
        let parsed = decode_response(&resp.body)?;
        check_response(&req, &parsed)?;
        Ok(parsed.scores)
    }
}
