//! Embedding providers, cosine similarity, and rate-limit backoff.

use std::sync::Mutex;
use std::time::Duration;

use serde::{Deserialize, Serialize};

use crate::text::{content_tokens, fnv1a};
use crate::wire::Transport;
use crate::{par, Error, Result};

/// Dense embedding. Entries are finite; dimension is fixed per provider.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct EmbeddingVector(pub Vec<f64>);

impl EmbeddingVector {
    pub fn dim(&self) -> usize {
        self.0.len()
    }

    pub fn norm(&self) -> f64 {
        self.0.iter().map(|x| x * x).sum::<f64>().sqrt()
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }

    /// Unit-length copy, or `ZeroVector` if the norm is zero.
    pub fn normalized(&self) -> Result<EmbeddingVector> {
        let n = self.norm();
        if n == 0.0 {
            return Err(Error::ZeroVector);
        }
        Ok(EmbeddingVector(self.0.iter().map(|x| x / n).collect()))
    }
}

impl From<Vec<f64>> for EmbeddingVector {
    fn from(v: Vec<f64>) -> Self {
        Self(v)
    }
}

pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// `a·b / (‖a‖‖b‖)`. A zero vector on either side is an error rather than 0.
pub fn cosine(a: &EmbeddingVector, b: &EmbeddingVector) -> Result<f64> {
    cosine_slices(a.as_slice(), b.as_slice())
}

pub fn cosine_slices(a: &[f64], b: &[f64]) -> Result<f64> {
    if a.len() != b.len() {
        return Err(Error::DimensionMismatch { expected: a.len(), actual: b.len() });
    }
    let na = dot(a, a).sqrt();
    let nb = dot(b, b).sqrt();
    if na == 0.0 || nb == 0.0 {
        return Err(Error::ZeroVector);
    }
    Ok(dot(a, b) / (na * nb))
}

/// The embedding function used for chunking, retrieval and evaluation.
pub trait Embedder: Send + Sync {
    /// Stable identity recorded in run manifests.
    fn identity(&self) -> String;

    fn dimension(&self) -> usize;

    /// One vector per text, in input order.
    fn embed_batch(&self, texts: &[String]) -> Result<Vec<EmbeddingVector>>;

    fn embed(&self, text: &str) -> Result<EmbeddingVector> {
        let mut v = self.embed_batch(&[text.to_string()])?;
        v.pop().ok_or(Error::Protocol("provider returned no vector".into()))
    }
}

pub const DEFAULT_REFERENCE_DIM: usize = 256;

/// Deterministic offline embedder: hashed character trigrams plus content
/// tokens, folded into `d` signed buckets and L2-normalized.
#[derive(Debug, Clone, Copy)]
pub struct ReferenceEmbedder {
    pub dim: usize,
}

impl Default for ReferenceEmbedder {
    fn default() -> Self {
        Self { dim: DEFAULT_REFERENCE_DIM }
    }
}

impl ReferenceEmbedder {
    pub fn new(dim: usize) -> Result<Self> {
        if dim == 0 {
            return Err(Error::Config("embedding dimension must be positive".into()));
        }
        Ok(Self { dim })
    }
}

/// Hashed n-gram embedding of `text` in `d` dimensions.
///
/// Features are the character trigrams of the lowercased, whitespace-collapsed
/// text padded with one space on each side, plus its content tokens. Each
/// feature adds ±1 to bucket `h mod d`, the sign taken from the top bit of
/// `h`. In the rare case signs cancel to an all-zero vector for non-empty text
/// the unsigned counts are used instead. Empty text maps to the zero vector.
pub fn reference_embedder(text: &str, d: usize) -> EmbeddingVector {
    assert!(d > 0, "embedding dimension must be positive");
    let norm_text = text.split_whitespace().collect::<Vec<_>>().join(" ").to_lowercase();
    if norm_text.is_empty() {
        return EmbeddingVector(vec![0.0; d]);
    }
    let mut hashes = Vec::new();
    let padded: Vec<char> = std::iter::once(' ')
        .chain(norm_text.chars())
        .chain(std::iter::once(' '))
        .collect();
    let mut buf = String::new();
    for w in padded.windows(3) {
        buf.clear();
        buf.extend(w);
        hashes.push(fnv1a(buf.as_bytes()));
    }
    for tok in content_tokens(&norm_text) {
        buf.clear();
        buf.push_str("w:");
        buf.push_str(&tok);
        hashes.push(fnv1a(buf.as_bytes()));
    }

    let fold = |signed: bool| {
        let mut v = vec![0.0f64; d];
        for h in &hashes {
            let sign = if signed && (h >> 63) == 1 { -1.0 } else { 1.0 };
            v[(h % d as u64) as usize] += sign;
        }
        v
    };
    let mut v = fold(true);
    if v.iter().all(|x| *x == 0.0) {
        v = fold(false);
    }
    let n = dot(&v, &v).sqrt();
    EmbeddingVector(v.into_iter().map(|x| x / n).collect())
}

impl Embedder for ReferenceEmbedder {
    fn identity(&self) -> String {
        format!("reference-ngram3-fnv1a-d{}", self.dim)
    }

    fn dimension(&self) -> usize {
        self.dim
    }

    fn embed_batch(&self, texts: &[String]) -> Result<Vec<EmbeddingVector>> {
        let d = self.dim;
        Ok(par::map(texts, |t| reference_embedder(t, d)))
    }
}

/// Exponential backoff: `delay(i) = min(base · factor^i, max_delay)`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BackoffPolicy {
    pub base_delay: Duration,
    pub factor: f64,
    pub max_delay: Duration,
    /// Number of throttled calls that will be retried before giving up.
    pub max_attempts: u32,
}

impl Default for BackoffPolicy {
    fn default() -> Self {
        Self {
            base_delay: Duration::from_secs(1),
            factor: 2.0,
            max_delay: Duration::from_secs(60),
            max_attempts: 8,
        }
    }
}

impl BackoffPolicy {
    pub fn validate(&self) -> Result<()> {
        if self.base_delay.is_zero() || self.max_delay.is_zero() {
            return Err(Error::Config("backoff delays must be positive".into()));
        }
        if self.factor.is_nan() || self.factor <= 1.0 {
            return Err(Error::Config("backoff factor must exceed 1".into()));
        }
        Ok(())
    }

    pub fn exponential(&self, attempt: u32) -> Duration {
        let secs = self.base_delay.as_secs_f64() * self.factor.powi(attempt.min(i32::MAX as u32) as i32);
        let max = self.max_delay.as_secs_f64();
        if !secs.is_finite() || secs >= max {
            self.max_delay
        } else {
            Duration::from_secs_f64(secs)
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum RateLimitSignal {
    Ok,
    /// Throttled, with the server's requested wait in seconds if it sent one.
    Throttled { retry_after: Option<f64> },
}

/// How long to wait before retrying after the `attempt`-th throttled call
/// (0-based). A server-provided `retry_after` wins over the policy.
pub fn next_delay(policy: &BackoffPolicy, attempt: u32, signal: &RateLimitSignal) -> Result<Duration> {
    if attempt >= policy.max_attempts {
        return Err(Error::ExhaustedRetries { attempts: attempt });
    }
    match signal {
        RateLimitSignal::Throttled { retry_after: Some(secs) } if secs.is_finite() && *secs >= 0.0 => {
            Ok(Duration::from_secs_f64(*secs))
        }
        _ => Ok(policy.exponential(attempt)),
    }
}

pub trait Clock: Send + Sync {
    fn sleep(&self, d: Duration);
}

#[derive(Debug, Default, Clone, Copy)]
pub struct SystemClock;

impl Clock for SystemClock {
    fn sleep(&self, d: Duration) {
        std::thread::sleep(d);
    }
}

/// Records requested sleeps instead of blocking.
#[derive(Debug, Default)]
pub struct SimulatedClock {
    waits: Mutex<Vec<Duration>>,
}

impl SimulatedClock {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn waits(&self) -> Vec<Duration> {
        self.waits.lock().unwrap().clone()
    }

    pub fn total_wait(&self) -> Duration {
        self.waits.lock().unwrap().iter().sum()
    }
}

impl Clock for SimulatedClock {
    fn sleep(&self, d: Duration) {
        self.waits.lock().unwrap().push(d);
    }
}

impl<C: Clock + ?Sized> Clock for std::sync::Arc<C> {
    fn sleep(&self, d: Duration) {
        (**self).sleep(d)
    }
}

#[derive(Serialize)]
struct EmbedRequest<'a> {
    texts: &'a [String],
}

#[derive(Deserialize)]
struct EmbedResponse {
    vectors: Vec<Vec<f64>>,
}

/// Client for the remote embedding protocol with throttle handling.
///
/// Request `{"texts": [...]}`, response `{"vectors": [[...], ...]}`. Calls
/// from one client are serialized so its backoff state is consistent.
pub struct RemoteEmbedder<T, C = SystemClock> {
    transport: T,
    clock: C,
    policy: BackoffPolicy,
    dim: usize,
    batch_size: usize,
    gate: Mutex<()>,
}

impl<T: Transport, C: Clock> RemoteEmbedder<T, C> {
    pub fn new(transport: T, clock: C, policy: BackoffPolicy, dim: usize) -> Result<Self> {
        policy.validate()?;
        if dim == 0 {
            return Err(Error::Config("embedding dimension must be positive".into()));
        }
        Ok(Self { transport, clock, policy, dim, batch_size: 64, gate: Mutex::new(()) })
    }

    pub fn with_batch_size(mut self, n: usize) -> Self {
        self.batch_size = n.max(1);
        self
    }

    pub fn transport(&self) -> &T {
        &self.transport
    }

    fn embed_chunk(&self, texts: &[String]) -> Result<Vec<EmbeddingVector>> {
        let body = serde_json::to_string(&EmbedRequest { texts })?;
        let mut attempt = 0u32;
        loop {
            let resp = self.transport.call(&body)?;
            if resp.is_success() {
                return self.decode(&resp.body, texts.len());
            }
            if resp.status != 429 {
                return Err(Error::Transport(format!("embedding provider returned status {}", resp.status)));
            }
            let signal = RateLimitSignal::Throttled { retry_after: resp.retry_after };
            let delay = next_delay(&self.policy, attempt, &signal)?;
            tracing::warn!(attempt, delay_secs = delay.as_secs_f64(), "embedding provider throttled");
            self.clock.sleep(delay);
            attempt += 1;
        }
    }

    fn decode(&self, body: &str, expected: usize) -> Result<Vec<EmbeddingVector>> {
        let resp: EmbedResponse =
            serde_json::from_str(body).map_err(|e| Error::Protocol(format!("embedding response: {e}")))?;
        if resp.vectors.len() != expected {
            return Err(Error::Protocol(format!(
                "expected {expected} vectors, got {}",
                resp.vectors.len()
            )));
        }
        resp.vectors
            .into_iter()
            .map(|v| {
                if v.len() != self.dim {
                    Err(Error::DimensionMismatch { expected: self.dim, actual: v.len() })
                } else if v.iter().any(|x| !x.is_finite()) {
                    Err(Error::Protocol("non-finite embedding entry".into()))
                } else {
                    Ok(EmbeddingVector(v))
                }
            })
            .collect()
    }
}

impl<T: Transport, C: Clock> Embedder for RemoteEmbedder<T, C> {
    fn identity(&self) -> String {
        format!("remote:{}:d{}", self.transport.describe(), self.dim)
    }

    fn dimension(&self) -> usize {
        self.dim
    }

    fn embed_batch(&self, texts: &[String]) -> Result<Vec<EmbeddingVector>> {
        let _guard = self.gate.lock().expect("embedder gate poisoned");
        let mut out = Vec::with_capacity(texts.len());
        for chunk in texts.chunks(self.batch_size) {
            out.extend(self.embed_chunk(chunk)?);
        }
        Ok(out)
    }
}

impl<E: Embedder + ?Sized> Embedder for Box<E> {
    fn identity(&self) -> String {
        (**self).identity()
    }
    fn dimension(&self) -> usize {
        (**self).dimension()
    }
    fn embed_batch(&self, texts: &[String]) -> Result<Vec<EmbeddingVector>> {
        (**self).embed_batch(texts)
    }
}

impl<E: Embedder + ?Sized> Embedder for std::sync::Arc<E> {
    fn identity(&self) -> String {
        (**self).identity()
    }
    fn dimension(&self) -> usize {
        (**self).dimension()
    }
    fn embed_batch(&self, texts: &[String]) -> Result<Vec<EmbeddingVector>> {
        (**self).embed_batch(texts)
    }
}
