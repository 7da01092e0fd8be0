//! Listwise training data and evaluation question sets.
//!
//! Training files hold one positive and several labelled negatives per
//! question. Negatives come from three tiers in order: chunks of other
//! files, distinct chunks of the same file, then a random fill; a tier that
//! cannot meet its quota passes the shortfall to the next.

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::io::BufRead;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::chunking::ChunkRecord;
use crate::embedding::{dot, Embedder, EmbeddingVector};
use crate::ingest::{DocumentRecord, NormalizedDocument};
use crate::metrics::segment_statements;
use crate::rerank::ListwiseExample;
use crate::text::{fnv1a, normalize_for_match, sentences, Tokenizer, WhitespaceTokenizer};
use crate::{par, Error, Result};

pub const MAX_QA_PER_DOCUMENT: usize = 15;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct QAPair {
    pub question: String,
    pub answer: String,
    pub answer_source: String,
    pub file_id: String,
    pub file_name: String,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct NegativeQuota {
    pub cross_document: usize,
    pub intra_document: usize,
    pub fallback: usize,
}

impl NegativeQuota {
    pub fn total(&self) -> usize {
        self.cross_document + self.intra_document + self.fallback
    }
}

impl Default for NegativeQuota {
    fn default() -> Self {
        Self { cross_document: 3, intra_document: 2, fallback: 1 }
    }
}

impl std::str::FromStr for NegativeQuota {
    type Err = Error;

    /// `cross,intra,fallback`, e.g. `3,2,1`.
    fn from_str(s: &str) -> Result<Self> {
        let parts: Vec<usize> = s
            .split(',')
            .map(|p| p.trim().parse::<usize>())
            .collect::<std::result::Result<_, _>>()
            .map_err(|_| Error::Config(format!("bad quota `{s}`, expected cross,intra,fallback")))?;
        match parts[..] {
            [cross_document, intra_document, fallback] => Ok(Self { cross_document, intra_document, fallback }),
            _ => Err(Error::Config(format!("bad quota `{s}`, expected three counts"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SamplingConfig {
    pub sample_fraction: f64,
    pub seed: u64,
    pub negatives_per_positive: usize,
    pub quota: NegativeQuota,
    /// Same-file chunks at or above this cosine to the answer source are
    /// not used as intra-document negatives.
    pub distinct_ceiling: f64,
    pub max_pairs_per_document: usize,
}

impl Default for SamplingConfig {
    fn default() -> Self {
        Self::train()
    }
}

impl SamplingConfig {
    pub fn train() -> Self {
        Self {
            sample_fraction: 0.20,
            seed: 13,
            negatives_per_positive: 6,
            quota: NegativeQuota::default(),
            distinct_ceiling: 0.8,
            max_pairs_per_document: MAX_QA_PER_DOCUMENT,
        }
    }

    pub fn eval() -> Self {
        Self { sample_fraction: 0.25, seed: 29, ..Self::train() }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.sample_fraction > 0.0 && self.sample_fraction <= 1.0) {
            return Err(Error::Config(format!("sample fraction must be in (0, 1], got {}", self.sample_fraction)));
        }
        if self.negatives_per_positive == 0 {
            return Err(Error::Config("negatives_per_positive must be at least 1".into()));
        }
        if self.quota.total() != self.negatives_per_positive {
            return Err(Error::Config(format!(
                "quotas sum to {} but negatives_per_positive is {}",
                self.quota.total(),
                self.negatives_per_positive
            )));
        }
        if !(1..=MAX_QA_PER_DOCUMENT).contains(&self.max_pairs_per_document) {
            return Err(Error::Config(format!("max_pairs_per_document must be in 1..={MAX_QA_PER_DOCUMENT}")));
        }
        Ok(())
    }
}

fn rng_for(seed: u64, salt: &str) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed ^ fnv1a(salt.as_bytes()))
}

/// Samples `round(fraction · n)` records (at least one) from each mime-type
/// stratum. The result is sorted by file id.
pub fn stratified_sample(records: &[DocumentRecord], fraction: f64, seed: u64) -> Result<Vec<DocumentRecord>> {
    if records.is_empty() {
        return Err(Error::EmptyInput("corpus"));
    }
    if !(fraction > 0.0 && fraction <= 1.0) {
        return Err(Error::Config(format!("sample fraction must be in (0, 1], got {fraction}")));
    }
    let mut strata: BTreeMap<&str, Vec<&DocumentRecord>> = BTreeMap::new();
    for r in records {
        strata.entry(r.mime_type.as_str()).or_default().push(r);
    }
    let mut out = Vec::new();
    for (mime, mut members) in strata {
        members.sort_by(|a, b| a.file_id.cmp(&b.file_id));
        let n = ((fraction * members.len() as f64).round() as usize).clamp(1, members.len());
        members.shuffle(&mut rng_for(seed, mime));
        out.extend(members.into_iter().take(n).cloned());
    }
    out.sort_by(|a, b| a.file_id.cmp(&b.file_id));
    Ok(out)
}

/// Produces question/answer pairs grounded in a document.
pub trait QaGenerator: Send + Sync {
    fn identity(&self) -> String;

    fn generate(&self, doc: &NormalizedDocument, max_pairs: usize) -> Result<Vec<QAPair>>;
}

/// Template questions over evenly spread sentences of the document; each
/// answer and answer source is the sentence itself.
#[derive(Debug, Clone, Copy)]
pub struct TemplateQaGenerator {
    pub min_tokens: usize,
}

impl Default for TemplateQaGenerator {
    fn default() -> Self {
        Self { min_tokens: 6 }
    }
}

impl QaGenerator for TemplateQaGenerator {
    fn identity(&self) -> String {
        format!("template-qa-v1-min{}", self.min_tokens)
    }

    fn generate(&self, doc: &NormalizedDocument, max_pairs: usize) -> Result<Vec<QAPair>> {
        let text = doc.text();
        let mut seen = BTreeSet::new();
        let eligible: Vec<&str> = sentences(&text)
            .into_iter()
            .map(str::trim)
            .filter(|s| WhitespaceTokenizer.count(s) >= self.min_tokens && seen.insert(normalize_for_match(s)))
            .collect();
        if eligible.is_empty() || max_pairs == 0 {
            return Ok(Vec::new());
        }
        let n = eligible.len().min(max_pairs);
        Ok((0..n)
            .map(|i| {
                let sentence = eligible[i * eligible.len() / n];
                let lead: Vec<&str> = sentence.split_whitespace().take(6).collect();
                QAPair {
                    question: format!("According to {}, what is stated about \"{}\"?", doc.file_name, lead.join(" ")),
                    answer: sentence.to_string(),
                    answer_source: sentence.to_string(),
                    file_id: doc.file_id.clone(),
                    file_name: doc.file_name.clone(),
                }
            })
            .collect())
    }
}

/// Replays QA pairs read from a JSONL fixture, matched by file id.
#[derive(Debug, Clone, Default)]
pub struct FixtureQaGenerator {
    by_file: BTreeMap<String, Vec<QAPair>>,
}

impl FixtureQaGenerator {
    pub fn new(pairs: Vec<QAPair>) -> Self {
        let mut by_file: BTreeMap<String, Vec<QAPair>> = BTreeMap::new();
        for p in pairs {
            by_file.entry(p.file_id.clone()).or_default().push(p);
        }
        Self { by_file }
    }

    pub fn from_jsonl<R: BufRead>(r: R) -> Result<Self> {
        Ok(Self::new(read_jsonl(r)?))
    }
}

impl QaGenerator for FixtureQaGenerator {
    fn identity(&self) -> String {
        "fixture-qa".to_string()
    }

    fn generate(&self, doc: &NormalizedDocument, max_pairs: usize) -> Result<Vec<QAPair>> {
        Ok(self.by_file.get(&doc.file_id).map(|v| v.iter().take(max_pairs).cloned().collect()).unwrap_or_default())
    }
}

/// Checks that the pair has an answer and that its answer source occurs in
/// the document text.
pub fn check_grounded(pair: &QAPair, doc_text: &str) -> Result<()> {
    let fail = |reason: &str| Err(Error::Ungrounded { question: pair.question.clone(), reason: reason.to_string() });
    if pair.answer.trim().is_empty() {
        return fail("empty answer");
    }
    if pair.answer_source.trim().is_empty() {
        return fail("empty answer_source");
    }
    if !doc_text.contains(&pair.answer_source) {
        return fail("answer_source not found in document text");
    }
    Ok(())
}

/// QA pairs for each document, capped per document and checked for
/// grounding. Documents that yield no pairs are skipped and returned in
/// the second list.
pub fn generate_pairs(
    docs: &[NormalizedDocument],
    generator: &dyn QaGenerator,
    max_per_document: usize,
) -> Result<(Vec<QAPair>, Vec<String>)> {
    let max = max_per_document.clamp(1, MAX_QA_PER_DOCUMENT);
    let per_doc = par::try_map(docs, |doc| -> Result<Vec<QAPair>> {
        let text = doc.text();
        let pairs = generator.generate(doc, max)?;
        for p in &pairs {
            check_grounded(p, &text)?;
        }
        Ok(pairs.into_iter().take(max).collect())
    })?;
    let mut pairs = Vec::new();
    let mut skipped = Vec::new();
    for (doc, ps) in docs.iter().zip(per_doc) {
        if ps.is_empty() {
            tracing::warn!(file_id = %doc.file_id, "no QA pairs generated; document skipped");
            skipped.push(doc.file_id.clone());
        }
        pairs.extend(ps);
    }
    Ok((pairs, skipped))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NegativeTier {
    CrossDocument,
    IntraDocument,
    Fallback,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SampledNegative {
    /// Index into the corpus chunks.
    pub chunk: usize,
    pub tier: NegativeTier,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QuestionGroup {
    pub pair: QAPair,
    /// Corpus chunk used as the positive passage, if one contains the source.
    pub positive_chunk: Option<usize>,
    pub negatives: Vec<SampledNegative>,
    /// Positive first, then negatives in sampling order.
    pub examples: Vec<ListwiseExample>,
}

/// Corpus chunks with their embeddings, shared by every question.
pub struct NegativePool<'a> {
    pub chunks: &'a [ChunkRecord],
    vectors: Vec<EmbeddingVector>,
    normalized: Vec<String>,
}

impl<'a> NegativePool<'a> {
    pub fn new(chunks: &'a [ChunkRecord], embedder: &dyn Embedder) -> Result<Self> {
        let texts: Vec<String> = chunks.iter().map(|c| c.text.clone()).collect();
        let vectors = embedder
            .embed_batch(&texts)?
            .into_iter()
            .map(|v| v.normalized().unwrap_or(v))
            .collect();
        let normalized = par::map(&texts, |t| normalize_for_match(t));
        Ok(Self { chunks, vectors, normalized })
    }

    pub fn vector(&self, i: usize) -> &EmbeddingVector {
        &self.vectors[i]
    }
}

/// Whether a chunk carries any of the answer source: it contains one of
/// the source's statements, or lies inside the source.
pub fn overlaps_source(chunk_text: &str, answer_source: &str) -> bool {
    let chunk = normalize_for_match(chunk_text);
    let source = normalize_for_match(answer_source);
    if chunk.is_empty() || source.contains(&chunk) || chunk.contains(&source) {
        return true;
    }
    segment_statements(answer_source).iter().any(|s| chunk.contains(&normalize_for_match(s)))
}

fn source_overlap(pool: &NegativePool, i: usize, source: &str, statements: &[String]) -> bool {
    let chunk = &pool.normalized[i];
    let norm_source = normalize_for_match(source);
    chunk.is_empty() || norm_source.contains(chunk.as_str()) || chunk.contains(&norm_source) || statements.iter().any(|s| chunk.contains(s))
}

/// Samples negatives for one QA pair.
pub fn sample_negatives(
    pair: &QAPair,
    pool: &NegativePool,
    source_vec: &EmbeddingVector,
    config: &SamplingConfig,
) -> Result<Vec<SampledNegative>> {
    let statements: Vec<String> = segment_statements(&pair.answer_source).iter().map(|s| normalize_for_match(s)).collect();
    let eligible: Vec<usize> =
        (0..pool.chunks.len()).filter(|&i| !source_overlap(pool, i, &pair.answer_source, &statements)).collect();
    let src = source_vec.normalized()?;
    let cross: Vec<usize> = eligible.iter().copied().filter(|&i| pool.chunks[i].file_id != pair.file_id).collect();
    let intra: Vec<usize> = eligible
        .iter()
        .copied()
        .filter(|&i| {
            pool.chunks[i].file_id == pair.file_id && dot(pool.vectors[i].as_slice(), src.as_slice()) < config.distinct_ceiling
        })
        .collect();

    let mut rng = rng_for(config.seed, &pair.question);
    let mut taken: BTreeSet<usize> = BTreeSet::new();
    let mut out = Vec::with_capacity(config.negatives_per_positive);
    let mut carry = 0;
    let tiers = [
        (NegativeTier::CrossDocument, config.quota.cross_document, cross),
        (NegativeTier::IntraDocument, config.quota.intra_document, intra),
        (NegativeTier::Fallback, config.quota.fallback, eligible),
    ];
    for (tier, quota, mut candidates) in tiers {
        let want = quota + carry;
        candidates.retain(|i| !taken.contains(i));
        candidates.shuffle(&mut rng);
        let got: Vec<usize> = candidates.into_iter().take(want).collect();
        carry = want - got.len();
        for chunk in got {
            taken.insert(chunk);
            out.push(SampledNegative { chunk, tier });
        }
    }
    if carry > 0 {
        return Err(Error::InsufficientNegatives {
            question: pair.question.clone(),
            wanted: config.negatives_per_positive,
            found: out.len(),
        });
    }
    Ok(out)
}

fn positive_chunk(pair: &QAPair, chunks: &[ChunkRecord]) -> Option<usize> {
    chunks
        .iter()
        .enumerate()
        .filter(|(_, c)| c.file_id == pair.file_id && c.text.contains(&pair.answer_source))
        .min_by_key(|(_, c)| c.chunk_index)
        .map(|(i, _)| i)
}

/// Builds one question group per QA pair, in input order.
pub fn build_rerank_dataset(
    pairs: &[QAPair],
    pool: &NegativePool,
    embedder: &dyn Embedder,
    config: &SamplingConfig,
) -> Result<Vec<QuestionGroup>> {
    config.validate()?;
    let sources: Vec<String> = pairs.iter().map(|p| p.answer_source.clone()).collect();
    let source_vecs = embedder.embed_batch(&sources)?;
    let indices: Vec<usize> = (0..pairs.len()).collect();
    par::try_map(&indices, |&i| {
        let pair = &pairs[i];
        if pair.answer.trim().is_empty() || pair.answer_source.trim().is_empty() {
            return Err(Error::Ungrounded { question: pair.question.clone(), reason: "empty answer or answer_source".into() });
        }
        let negatives = sample_negatives(pair, pool, &source_vecs[i], config)?;
        let positive = positive_chunk(pair, pool.chunks);
        let mut examples = vec![ListwiseExample {
            question: pair.question.clone(),
            passage: positive.map_or_else(|| pair.answer_source.clone(), |p| pool.chunks[p].text.clone()),
            label: 1,
            file_id: pair.file_id.clone(),
            file_name: pair.file_name.clone(),
            answer: Some(pair.answer.clone()),
            answer_source: Some(pair.answer_source.clone()),
        }];
        examples.extend(negatives.iter().map(|n| {
            let c = &pool.chunks[n.chunk];
            ListwiseExample {
                question: pair.question.clone(),
                passage: c.text.clone(),
                label: 0,
                file_id: c.file_id.clone(),
                file_name: c.file_name.clone(),
                answer: None,
                answer_source: None,
            }
        }));
        Ok(QuestionGroup { pair: pair.clone(), positive_chunk: positive, negatives, examples })
    })
}

/// Problems found in built groups; empty when every constraint holds.
pub fn validate_groups(groups: &[QuestionGroup], pool: &NegativePool, config: &SamplingConfig) -> Vec<String> {
    let mut problems = Vec::new();
    for g in groups {
        let q = &g.pair.question;
        let src = match g.examples.first() {
            Some(p) if p.label == 1 => p.answer_source.clone().unwrap_or_default(),
            _ => {
                problems.push(format!("{q}: first example is not the positive"));
                continue;
            }
        };
        if g.negatives.len() != config.negatives_per_positive {
            problems.push(format!("{q}: {} negatives", g.negatives.len()));
        }
        let mut seen = BTreeSet::new();
        for (n, ex) in g.negatives.iter().zip(&g.examples[1..]) {
            let c = &pool.chunks[n.chunk];
            if ex.label != 0 {
                problems.push(format!("{q}: negative with label {}", ex.label));
            }
            if !seen.insert(n.chunk) {
                problems.push(format!("{q}: chunk {} sampled twice", c.chunk_id()));
            }
            if Some(n.chunk) == g.positive_chunk || ex.passage == g.examples[0].passage {
                problems.push(format!("{q}: gold passage sampled as negative"));
            }
            if overlaps_source(&c.text, &src) {
                problems.push(format!("{q}: negative {} overlaps the answer source", c.chunk_id()));
            }
            match n.tier {
                NegativeTier::CrossDocument if c.file_id == g.pair.file_id => {
                    problems.push(format!("{q}: cross-document negative from the same file"))
                }
                NegativeTier::IntraDocument if c.file_id != g.pair.file_id => {
                    problems.push(format!("{q}: intra-document negative from another file"))
                }
                _ => {}
            }
        }
    }
    problems
}

pub fn examples_of(groups: &[QuestionGroup]) -> Vec<ListwiseExample> {
    groups.iter().flat_map(|g| g.examples.iter().cloned()).collect()
}

/// Fails with [`Error::Leakage`] on the first file id present in both sets.
pub fn check_leakage<'a>(train: impl IntoIterator<Item = &'a str>, eval: impl IntoIterator<Item = &'a str>) -> Result<()> {
    let train: BTreeSet<&str> = train.into_iter().collect();
    let mut shared: Vec<&str> = eval.into_iter().filter(|id| train.contains(id)).collect();
    shared.sort_unstable();
    match shared.first() {
        Some(id) => Err(Error::Leakage(id.to_string())),
        None => Ok(()),
    }
}

/// Draws the evaluation sample from the documents outside the training
/// sample, using a seed that must differ from the training one.
pub fn sample_eval_documents(
    records: &[DocumentRecord],
    train_file_ids: &BTreeSet<String>,
    config: &SamplingConfig,
    train_seed: u64,
) -> Result<Vec<DocumentRecord>> {
    if config.seed == train_seed {
        return Err(Error::Config("evaluation seed must differ from the training seed".into()));
    }
    let pool: Vec<DocumentRecord> = records.iter().filter(|r| !train_file_ids.contains(&r.file_id)).cloned().collect();
    let sample = stratified_sample(&pool, config.sample_fraction, config.seed)?;
    check_leakage(train_file_ids.iter().map(String::as_str), sample.iter().map(|r| r.file_id.as_str()))?;
    Ok(sample)
}

/// One line of an evaluation file. `file_id` is optional on input and never
/// written.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EvalRecord {
    pub file_name: String,
    pub question: String,
    pub answer: String,
    pub answer_source: String,
    #[serde(default, skip_serializing)]
    pub file_id: Option<String>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EvalBuild {
    pub records: Vec<EvalRecord>,
    /// Documents that produced no QA pairs.
    pub skipped: Vec<String>,
}

pub fn build_eval_dataset(
    docs: &[NormalizedDocument],
    train_file_ids: &BTreeSet<String>,
    generator: &dyn QaGenerator,
    config: &SamplingConfig,
) -> Result<EvalBuild> {
    check_leakage(train_file_ids.iter().map(String::as_str), docs.iter().map(|d| d.file_id.as_str()))?;
    let (pairs, skipped) = generate_pairs(docs, generator, config.max_pairs_per_document)?;
    let records = pairs
        .into_iter()
        .map(|p| EvalRecord {
            file_name: p.file_name,
            question: p.question,
            answer: p.answer,
            answer_source: p.answer_source,
            file_id: Some(p.file_id),
        })
        .collect();
    Ok(EvalBuild { records, skipped })
}

/// Maps each record's `file_name` to a file id unless one is given.
/// Ambiguous or unknown names are errors.
pub fn resolve_file_ids(records: &mut [EvalRecord], docs: &[DocumentRecord]) -> Result<()> {
    let mut by_name: HashMap<&str, Vec<&str>> = HashMap::new();
    for d in docs {
        by_name.entry(d.file_name.as_str()).or_default().push(d.file_id.as_str());
    }
    for r in records.iter_mut().filter(|r| r.file_id.is_none()) {
        match by_name.get(r.file_name.as_str()).map(Vec::as_slice) {
            Some([id]) => r.file_id = Some(id.to_string()),
            Some(ids) => {
                return Err(Error::Config(format!(
                    "file name `{}` matches {} documents; add file_id to the record",
                    r.file_name,
                    ids.len()
                )))
            }
            None => return Err(Error::Config(format!("file name `{}` not found in corpus", r.file_name))),
        }
    }
    Ok(())
}

pub fn to_jsonl<T: Serialize>(items: &[T]) -> Result<String> {
    let mut out = String::new();
    for item in items {
        out.push_str(&serde_json::to_string(item)?);
        out.push('\n');
    }
    Ok(out)
}

pub fn read_jsonl<T: serde::de::DeserializeOwned, R: BufRead>(r: R) -> Result<Vec<T>> {
    let mut out = Vec::new();
    for (n, line) in r.lines().enumerate() {
        let line = line.map_err(|e| Error::io("<jsonl>", e))?;
        if line.trim().is_empty() {
            continue;
        }
        out.push(
            serde_json::from_str(&line)
                .map_err(|e| Error::Manifest { line: n + 1, reason: e.to_string() })?,
        );
    }
    Ok(out)
}
