//! End-to-end driver: incremental ingestion into an index, question
//! answering retrieval with optional reranking, the ablation grid and
//! latency profiling.

use std::collections::{BTreeMap, BTreeSet};
use std::io::BufReader;
use std::path::Path;
use std::time::{Duration, Instant};

use chrono::Utc;
use serde::{Deserialize, Serialize};

use crate::chunking::{chunk_document, read_chunk_dump, write_chunk_dump, ChunkRecord, ChunkingConfig, Strategy};
use crate::dataset::EvalRecord;
use crate::embedding::Embedder;
use crate::index::{IndexedChunk, IvfParams, VectorIndex};
use crate::ingest::{
    checksum, diff_manifest, format_timestamp, normalize_document, scan_source, write_atomic, ExtractionStatus,
    ExtractorRegistry, NormalizedDocument, SourceConnector, SyncManifest,
};
use crate::metrics::{
    aggregate, EvalInstance, Evaluator, FluencyScorer, InstanceRecord, MetricConfig, ReportRow, RetrievedContext,
};
use crate::rerank::{rerank_topk, CandidateList, Scorer};
use crate::{par, Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum IndexSpec {
    Flat,
    /// `nlist` and `nprobe` default to `round(√n)` and `max(1, nlist / 4)`.
    Ivf { nlist: Option<usize>, nprobe: Option<usize>, seed: u64 },
}

impl Default for IndexSpec {
    fn default() -> Self {
        IndexSpec::Ivf { nlist: None, nprobe: None, seed: 7 }
    }
}

impl IndexSpec {
    pub fn params_for(&self, n: usize) -> Option<IvfParams> {
        match *self {
            IndexSpec::Flat => None,
            IndexSpec::Ivf { nlist, nprobe, seed } => {
                let auto = IvfParams::for_size(n, seed);
                let nlist = nlist.unwrap_or(auto.nlist);
                Some(IvfParams { nlist, nprobe: nprobe.unwrap_or((nlist / 4).max(1)), ..auto })
            }
        }
    }

    pub fn build(&self, chunks: Vec<IndexedChunk>) -> Result<VectorIndex> {
        match self.params_for(chunks.len()) {
            Some(p) if !chunks.is_empty() => VectorIndex::build_ivf(chunks, p),
            _ => VectorIndex::build_flat(chunks),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PipelineConfig {
    pub strategy: Strategy,
    pub chunking: ChunkingConfig,
    pub index: IndexSpec,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        Self { strategy: Strategy::Hisacc, chunking: ChunkingConfig::default(), index: IndexSpec::default() }
    }
}

/// Nearest-rank percentile of the samples, in the samples' unit.
pub fn percentile(samples: &[f64], p: f64) -> Option<f64> {
    if samples.is_empty() {
        return None;
    }
    let mut sorted = samples.to_vec();
    sorted.sort_by(|a, b| a.partial_cmp(b).unwrap_or(std::cmp::Ordering::Equal));
    let rank = ((p / 100.0) * sorted.len() as f64).ceil() as usize;
    Some(sorted[rank.clamp(1, sorted.len()) - 1])
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TimingSummary {
    pub samples: usize,
    pub p50_ms: f64,
    pub p90_ms: f64,
    pub p99_ms: f64,
    pub total_ms: f64,
}

impl TimingSummary {
    pub fn from_durations(durations: &[Duration]) -> Option<Self> {
        let ms: Vec<f64> = durations.iter().map(|d| d.as_secs_f64() * 1e3).collect();
        Some(Self {
            samples: ms.len(),
            p50_ms: percentile(&ms, 50.0)?,
            p90_ms: percentile(&ms, 90.0)?,
            p99_ms: percentile(&ms, 99.0)?,
            total_ms: ms.iter().sum(),
        })
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FileFailure {
    pub file_id: String,
    pub stage: String,
    pub reason: String,
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct DeltaCounts {
    pub added: usize,
    pub updated: usize,
    pub deleted: usize,
    pub unchanged: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub config: PipelineConfig,
    pub embedder: String,
    pub started_at: String,
    pub finished_at: String,
    pub delta: DeltaCounts,
    pub embedded_chunks: usize,
    pub indexed_chunks: usize,
    pub failures: Vec<FileFailure>,
    /// sha256 of the persisted sync manifest and chunk dump.
    pub digests: BTreeMap<String, String>,
    pub timings: BTreeMap<String, TimingSummary>,
}

/// Everything an incremental run carries over from the previous one.
#[derive(Debug, Clone, Default)]
pub struct PipelineState {
    pub manifest: SyncManifest,
    /// Chunks per file id.
    pub chunks: BTreeMap<String, Vec<ChunkRecord>>,
    pub index: VectorIndex,
}

pub const MANIFEST_FILE: &str = "manifest.tsv";
pub const CHUNKS_FILE: &str = "chunks.jsonl";
pub const INDEX_FILE: &str = "index.bin";
pub const RUN_FILE: &str = "run.json";

impl PipelineState {
    pub fn all_chunks(&self) -> Vec<ChunkRecord> {
        self.chunks.values().flatten().cloned().collect()
    }

    fn chunk_dump(&self) -> Vec<u8> {
        let mut buf = Vec::new();
        write_chunk_dump(&mut buf, &self.all_chunks()).expect("writing to a buffer");
        buf
    }

    /// Loads state from `dir`; missing files mean a first run.
    pub fn load(dir: &Path) -> Result<Self> {
        let manifest = SyncManifest::load(&dir.join(MANIFEST_FILE))?;
        let chunks_path = dir.join(CHUNKS_FILE);
        let mut chunks: BTreeMap<String, Vec<ChunkRecord>> = BTreeMap::new();
        if chunks_path.exists() {
            let f = std::fs::File::open(&chunks_path).map_err(|e| Error::io(&chunks_path, e))?;
            for c in read_chunk_dump(BufReader::new(f))? {
                chunks.entry(c.file_id.clone()).or_default().push(c);
            }
        }
        let index_path = dir.join(INDEX_FILE);
        let index = if index_path.exists() { VectorIndex::load(&index_path)? } else { VectorIndex::default() };
        Ok(Self { manifest, chunks, index })
    }

    pub fn save(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        write_atomic(&dir.join(CHUNKS_FILE), &self.chunk_dump())?;
        self.index.persist(&dir.join(INDEX_FILE))?;
        self.manifest.save(&dir.join(MANIFEST_FILE))
    }
}

/// Chunks one normalized document into dump records.
pub fn chunk_records(
    doc: &NormalizedDocument,
    strategy: Strategy,
    embedder: &dyn Embedder,
    config: &ChunkingConfig,
) -> Result<Vec<ChunkRecord>> {
    if doc.extraction_status != ExtractionStatus::Ok {
        return Ok(Vec::new());
    }
    let chunks = chunk_document(doc, strategy, embedder, config)?;
    Ok(ChunkRecord::from_chunks(&doc.file_name, &chunks))
}

pub fn chunk_corpus(
    docs: &[NormalizedDocument],
    strategy: Strategy,
    embedder: &dyn Embedder,
    config: &ChunkingConfig,
) -> Result<Vec<ChunkRecord>> {
    config.validate()?;
    let per_doc = par::try_map(docs, |d| chunk_records(d, strategy, embedder, config))?;
    Ok(per_doc.into_iter().flatten().collect())
}

pub fn embed_chunks(chunks: &[ChunkRecord], embedder: &dyn Embedder) -> Result<Vec<IndexedChunk>> {
    let texts: Vec<String> = chunks.iter().map(|c| c.text.clone()).collect();
    let vectors = embedder.embed_batch(&texts)?;
    Ok(chunks
        .iter()
        .zip(vectors)
        .map(|(c, vector)| IndexedChunk {
            chunk_id: c.chunk_id(),
            vector,
            file_id: c.file_id.clone(),
            chunk_index: c.chunk_index,
            text: c.text.clone(),
        })
        .collect())
}

struct FileWork {
    file_id: String,
    outcome: Result<(Vec<ChunkRecord>, Vec<IndexedChunk>), FileFailure>,
    fetch: Duration,
    normalize: Duration,
    chunk: Duration,
    embed: Duration,
}

fn process_file(
    connector: &dyn SourceConnector,
    record: &crate::ingest::DocumentRecord,
    registry: &ExtractorRegistry,
    embedder: &dyn Embedder,
    config: &PipelineConfig,
) -> FileWork {
    let mut work = FileWork {
        file_id: record.file_id.clone(),
        outcome: Ok((Vec::new(), Vec::new())),
        fetch: Duration::ZERO,
        normalize: Duration::ZERO,
        chunk: Duration::ZERO,
        embed: Duration::ZERO,
    };
    let fail = |stage: &str, e: Error| FileFailure { file_id: record.file_id.clone(), stage: stage.into(), reason: e.to_string() };
    let t = Instant::now();
    let bytes = match connector.fetch(&record.file_id) {
        Ok(b) => b,
        Err(e) => {
            work.outcome = Err(fail("fetch", e));
            return work;
        }
    };
    work.fetch = t.elapsed();
    let t = Instant::now();
    let doc = normalize_document(record, &bytes, registry);
    work.normalize = t.elapsed();
    if doc.extraction_status != ExtractionStatus::Ok {
        tracing::info!(file_id = %record.file_id, status = ?doc.extraction_status, reason = ?doc.reason, "no text indexed");
        return work;
    }
    let t = Instant::now();
    let chunks = match chunk_records(&doc, config.strategy, embedder, &config.chunking) {
        Ok(c) => c,
        Err(e) => {
            work.outcome = Err(fail("chunk", e));
            return work;
        }
    };
    work.chunk = t.elapsed();
    let t = Instant::now();
    match embed_chunks(&chunks, embedder) {
        Ok(indexed) => work.outcome = Ok((chunks, indexed)),
        Err(e) => work.outcome = Err(fail("embed", e)),
    }
    work.embed = t.elapsed();
    work
}

/// Scan, diff, normalize, chunk, embed and index. Only added and updated
/// files are processed; deleted and updated files are evicted first. A file
/// that fails is left out of the new manifest, so the next run retries it.
pub fn run_pipeline(
    state: &mut PipelineState,
    connector: &dyn SourceConnector,
    registry: &ExtractorRegistry,
    embedder: &dyn Embedder,
    config: &PipelineConfig,
) -> Result<RunManifest> {
    config.chunking.validate()?;
    let started = Utc::now();
    let mut timings: BTreeMap<String, Vec<Duration>> = BTreeMap::new();
    let mut failures = Vec::new();

    let t = Instant::now();
    let scan = scan_source(connector)?;
    timings.entry("scan".into()).or_default().push(t.elapsed());
    for (path, reason) in &scan.failures {
        failures.push(FileFailure { file_id: path.clone(), stage: "scan".into(), reason: reason.clone() });
    }

    let t = Instant::now();
    let delta = diff_manifest(&state.manifest, &scan.records)?;
    timings.entry("diff".into()).or_default().push(t.elapsed());
    let counts = DeltaCounts {
        added: delta.added.len(),
        updated: delta.updated.len(),
        deleted: delta.deleted.len(),
        unchanged: scan.records.len() - delta.added.len() - delta.updated.len(),
    };

    let t = Instant::now();
    for file_id in delta.deleted.iter().chain(delta.updated.iter().map(|r| &r.file_id)) {
        state.index.remove_file(file_id);
        state.chunks.remove(file_id);
    }
    timings.entry("evict".into()).or_default().push(t.elapsed());

    let todo: Vec<&crate::ingest::DocumentRecord> = delta.added.iter().chain(&delta.updated).collect();
    let work = par::map(&todo, |r| process_file(connector, r, registry, embedder, config));

    let mut failed: BTreeSet<String> = BTreeSet::new();
    let mut new_vectors = Vec::new();
    let mut embedded = 0;
    for w in work {
        for (stage, d) in [("fetch", w.fetch), ("normalize", w.normalize), ("chunk", w.chunk), ("embed", w.embed)] {
            timings.entry(stage.into()).or_default().push(d);
        }
        match w.outcome {
            Ok((chunks, vectors)) => {
                embedded += vectors.len();
                new_vectors.extend(vectors);
                if !chunks.is_empty() {
                    state.chunks.insert(w.file_id, chunks);
                }
            }
            Err(f) => {
                tracing::warn!(file_id = %f.file_id, stage = %f.stage, reason = %f.reason, "file failed");
                failed.insert(f.file_id.clone());
                failures.push(f);
            }
        }
    }

    // An empty index holds no surviving chunks, so the new vectors are the
    // whole corpus and IVF can be trained on them.
    let t = Instant::now();
    if state.index.is_empty() {
        state.index = config.index.build(new_vectors)?;
    } else {
        state.index.upsert(new_vectors)?;
    }
    timings.entry("index".into()).or_default().push(t.elapsed());

    let kept: Vec<_> = scan.records.iter().filter(|r| !failed.contains(&r.file_id)).cloned().collect();
    state.manifest = SyncManifest::from_records(kept, Utc::now())?;

    let digests = BTreeMap::from([
        ("manifest".to_string(), checksum(state.manifest.to_text().as_bytes())),
        ("chunks".to_string(), checksum(&state.chunk_dump())),
    ]);
    Ok(RunManifest {
        config: config.clone(),
        embedder: embedder.identity(),
        started_at: format_timestamp(&started),
        finished_at: format_timestamp(&Utc::now()),
        delta: counts,
        embedded_chunks: embedded,
        indexed_chunks: state.index.len(),
        failures,
        digests,
        timings: timings.iter().filter_map(|(k, v)| Some((k.clone(), TimingSummary::from_durations(v)?))).collect(),
    })
}

pub fn write_run_manifest(manifest: &RunManifest, dir: &Path) -> Result<()> {
    let json = serde_json::to_vec_pretty(manifest)?;
    write_atomic(&dir.join(RUN_FILE), &json)
}

// ---------------------------------------------------------------------------
// Retrieval

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ContextHit {
    /// 1-based position in the final order.
    pub rank: usize,
    pub chunk_id: String,
    pub file_id: String,
    pub chunk_index: usize,
    pub text: String,
    /// 1-based position in the retrieval order.
    pub retrieval_rank: usize,
    pub retrieval_score: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub rerank_score: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RetrievalAnswer {
    pub question: String,
    pub k: usize,
    pub rerank: bool,
    pub contexts: Vec<ContextHit>,
    /// Chunk ids in retrieval order, before reranking.
    pub retrieval_order: Vec<String>,
    #[serde(default, skip_serializing_if = "std::ops::Not::not")]
    pub rerank_fell_back: bool,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub warning: Option<String>,
}

pub struct Retriever<'a> {
    pub index: &'a VectorIndex,
    pub embedder: &'a dyn Embedder,
    pub scorer: &'a dyn Scorer,
    /// With reranking on, `pool · k` candidates are retrieved and reranked
    /// down to `k`.
    pub pool: usize,
}

impl<'a> Retriever<'a> {
    pub fn new(index: &'a VectorIndex, embedder: &'a dyn Embedder, scorer: &'a dyn Scorer) -> Self {
        Self { index, embedder, scorer, pool: 1 }
    }

    pub fn answer_retrieve(&self, question: &str, k: usize, rerank: bool) -> Result<RetrievalAnswer> {
        if k == 0 {
            return Err(Error::Config("k must be at least 1".into()));
        }
        if self.index.is_empty() {
            return Err(Error::EmptyIndex);
        }
        let q = self.embedder.embed(question)?;
        let fetch = if rerank { k * self.pool.max(1) } else { k };
        let result = self.index.search_topk(&q, fetch)?;
        let retrieval_order: Vec<String> = result.hits.iter().map(|h| h.chunk_id.clone()).collect();
        let hit = |rank: usize, i: usize, rerank_score: Option<f64>| {
            let h = &result.hits[i];
            ContextHit {
                rank,
                chunk_id: h.chunk_id.clone(),
                file_id: h.file_id.clone(),
                chunk_index: h.chunk_index,
                text: h.text.clone(),
                retrieval_rank: i + 1,
                retrieval_score: h.similarity,
                rerank_score,
            }
        };
        let mut answer = RetrievalAnswer {
            question: question.to_string(),
            k,
            rerank,
            contexts: Vec::new(),
            retrieval_order,
            rerank_fell_back: false,
            warning: None,
        };
        if !rerank {
            answer.contexts = (0..result.hits.len()).map(|i| hit(i + 1, i, None)).collect();
            return Ok(answer);
        }
        let candidates = CandidateList::new(question, result.hits.iter().map(|h| h.text.clone()).collect());
        let keep = k.min(candidates.passages.len());
        let outcome = rerank_topk(&candidates, self.scorer, keep)?;
        answer.contexts = outcome.items.iter().enumerate().map(|(r, it)| hit(r + 1, it.original_rank, it.score)).collect();
        answer.rerank_fell_back = outcome.fell_back;
        answer.warning = outcome.warning;
        Ok(answer)
    }
}

// ---------------------------------------------------------------------------
// Ablation

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AblationConfig {
    pub strategies: Vec<Strategy>,
    pub rerank: Vec<bool>,
    pub k_values: Vec<usize>,
    pub seed: u64,
    pub chunking: ChunkingConfig,
    pub index: IndexSpec,
    pub metrics: MetricConfig,
    pub rerank_pool: usize,
}

impl Default for AblationConfig {
    fn default() -> Self {
        Self {
            strategies: vec![Strategy::Rcs, Strategy::Hisacc],
            rerank: vec![false, true],
            k_values: vec![3, 5, 10, 15],
            seed: 7,
            chunking: ChunkingConfig::default(),
            index: IndexSpec::Flat,
            metrics: MetricConfig::default(),
            rerank_pool: 1,
        }
    }
}

impl AblationConfig {
    pub fn validate(&self) -> Result<()> {
        if self.strategies.is_empty() || self.rerank.is_empty() || self.k_values.is_empty() {
            return Err(Error::Config("strategies, rerank and k_values must be non-empty".into()));
        }
        if self.k_values.contains(&0) {
            return Err(Error::Config("k values must be at least 1".into()));
        }
        self.chunking.validate()?;
        self.metrics.validate()
    }

    fn with_seed(&self) -> IndexSpec {
        match self.index {
            IndexSpec::Ivf { nlist, nprobe, .. } => IndexSpec::Ivf { nlist, nprobe, seed: self.seed },
            flat => flat,
        }
    }
}

pub fn config_label(strategy: Strategy, rerank: bool) -> String {
    if rerank {
        format!("{}+rerank", strategy.label())
    } else {
        strategy.label().to_string()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationReport {
    pub rows: Vec<ReportRow>,
    pub instances: Vec<InstanceRecord>,
    pub metrics: MetricConfig,
    pub embedder: String,
    pub scorer: String,
    pub fluency: String,
}

/// Runs every (strategy, rerank, K) cell. One index is built per strategy
/// and reused across K. Generation is stubbed: the reference answer stands
/// in for the generated response.
pub fn run_ablation(
    docs: &[NormalizedDocument],
    eval: &[EvalRecord],
    embedder: &dyn Embedder,
    scorer: &dyn Scorer,
    fluency: &dyn FluencyScorer,
    config: &AblationConfig,
) -> Result<AblationReport> {
    config.validate()?;
    if eval.is_empty() {
        return Err(Error::EmptyInput("evaluation set"));
    }
    for r in eval {
        if r.file_id.is_none() {
            return Err(Error::Config(format!("evaluation record `{}` has no resolved file id", r.question)));
        }
    }
    let evaluator = Evaluator::new(embedder, fluency, config.metrics)?;
    let mut rows = Vec::new();
    let mut instances = Vec::new();
    for &strategy in &config.strategies {
        let chunks = chunk_corpus(docs, strategy, embedder, &config.chunking)?;
        let index = config.with_seed().build(embed_chunks(&chunks, embedder)?)?;
        let mut retriever = Retriever::new(&index, embedder, scorer);
        retriever.pool = config.rerank_pool.max(1);
        for &rerank in &config.rerank {
            let label = config_label(strategy, rerank);
            for &k in &config.k_values {
                let answers = par::try_map(eval, |r| retriever.answer_retrieve(&r.question, k, rerank))?;
                let cell: Vec<EvalInstance> = eval
                    .iter()
                    .zip(&answers)
                    .map(|(r, a)| EvalInstance {
                        file_name: r.file_name.clone(),
                        question: r.question.clone(),
                        answer: r.answer.clone(),
                        answer_source: r.answer_source.clone(),
                        generated_response: r.answer.clone(),
                        retrieved: a
                            .contexts
                            .iter()
                            .map(|c| RetrievedContext { file_id: c.file_id.clone(), text: c.text.clone() })
                            .collect(),
                        source_file_id: r.file_id.clone().unwrap_or_default(),
                    })
                    .collect();
                let results = evaluator.evaluate_batch(&cell);
                rows.push(ReportRow { config: label.clone(), k, metrics: aggregate(&results) });
                instances.extend(eval.iter().zip(results).map(|(r, result)| InstanceRecord {
                    config: label.clone(),
                    k,
                    file_name: r.file_name.clone(),
                    question: r.question.clone(),
                    result,
                }));
            }
        }
    }
    Ok(AblationReport {
        rows,
        instances,
        metrics: config.metrics,
        embedder: embedder.identity(),
        scorer: scorer.identity(),
        fluency: fluency.identity(),
    })
}

// ---------------------------------------------------------------------------
// Latency

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LatencyRow {
    pub k: usize,
    pub rerank: bool,
    pub timing: TimingSummary,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LatencyProfile {
    pub rows: Vec<LatencyRow>,
    /// Rerank-on P50 never decreases as k grows.
    pub rerank_cost_monotone: bool,
}

impl LatencyProfile {
    pub fn p50(&self, k: usize, rerank: bool) -> Option<f64> {
        self.rows.iter().find(|r| r.k == k && r.rerank == rerank).map(|r| r.timing.p50_ms)
    }
}

/// Times end-to-end retrieval for each k with and without reranking. The
/// configurations are interleaved round-robin so drift affects them alike.
pub fn profile_latency(
    retriever: &Retriever,
    questions: &[String],
    k_values: &[usize],
    rounds: usize,
) -> Result<LatencyProfile> {
    if questions.is_empty() || k_values.is_empty() {
        return Err(Error::EmptyInput("workload"));
    }
    let configs: Vec<(usize, bool)> = k_values.iter().flat_map(|&k| [(k, false), (k, true)]).collect();
    let mut samples: Vec<Vec<Duration>> = vec![Vec::new(); configs.len()];
    for round in 0..rounds.max(1) {
        for (qi, q) in questions.iter().enumerate() {
            let offset = (round + qi) % configs.len();
            for step in 0..configs.len() {
                let slot = (offset + step) % configs.len();
                let (k, rerank) = configs[slot];
                let t = Instant::now();
                std::hint::black_box(retriever.answer_retrieve(q, k, rerank)?);
                samples[slot].push(t.elapsed());
            }
        }
    }
    let rows: Vec<LatencyRow> = configs
        .iter()
        .zip(&samples)
        .map(|(&(k, rerank), s)| LatencyRow { k, rerank, timing: TimingSummary::from_durations(s).expect("samples") })
        .collect();
    let mut on: Vec<&LatencyRow> = rows.iter().filter(|r| r.rerank).collect();
    on.sort_by_key(|r| r.k);
    let rerank_cost_monotone = on.windows(2).all(|w| w[1].timing.p50_ms >= w[0].timing.p50_ms);
    Ok(LatencyProfile { rows, rerank_cost_monotone })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::embedding::ReferenceEmbedder;
    use crate::ingest::LocalFsConnector;
    use crate::rerank::{FixedScorer, LexicalOverlapScorer};

    #[test]
    fn nearest_rank_percentiles() {
        let s: Vec<f64> = (1..=10).map(f64::from).collect();
        assert_eq!(percentile(&s, 50.0), Some(5.0));
        assert_eq!(percentile(&s, 90.0), Some(9.0));
        assert_eq!(percentile(&s, 99.0), Some(10.0));
        assert_eq!(percentile(&[3.0], 50.0), Some(3.0));
        assert_eq!(percentile(&[], 50.0), None);
    }

    fn write(dir: &Path, name: &str, text: &str) {
        std::fs::write(dir.join(name), text).unwrap();
    }

    #[test]
    fn empty_corpus_and_noop_rerun() {
        let corpus = tempfile::tempdir().unwrap();
        let e = ReferenceEmbedder::default();
        let reg = ExtractorRegistry::default();
        let conn = LocalFsConnector::new(corpus.path());
        let mut state = PipelineState::default();
        let run = run_pipeline(&mut state, &conn, &reg, &e, &PipelineConfig::default()).unwrap();
        assert_eq!(run.indexed_chunks, 0);
        assert!(run.failures.is_empty());

        write(corpus.path(), "a.txt", "Invoices are archived for ten years. Receipts follow the same rule.");
        write(corpus.path(), "b.md", "# Access\n\nBadges are renewed every year.");
        let first = run_pipeline(&mut state, &conn, &reg, &e, &PipelineConfig::default()).unwrap();
        assert_eq!(first.delta.added, 2);
        assert!(first.embedded_chunks > 0);
        let again = run_pipeline(&mut state, &conn, &reg, &e, &PipelineConfig::default()).unwrap();
        assert_eq!(again.embedded_chunks, 0);
        assert_eq!(again.delta.unchanged, 2);
        assert_eq!(again.digests, first.digests);
    }

    #[test]
    fn state_round_trips_through_disk() {
        let corpus = tempfile::tempdir().unwrap();
        let store = tempfile::tempdir().unwrap();
        write(corpus.path(), "a.txt", "Cash counts happen daily. Discrepancies go to the controller.");
        let e = ReferenceEmbedder::default();
        let conn = LocalFsConnector::new(corpus.path());
        let mut state = PipelineState::default();
        let config = PipelineConfig { index: IndexSpec::Flat, ..Default::default() };
        run_pipeline(&mut state, &conn, &ExtractorRegistry::default(), &e, &config).unwrap();
        state.save(store.path()).unwrap();
        let back = PipelineState::load(store.path()).unwrap();
        assert_eq!(back.all_chunks(), state.all_chunks());
        assert_eq!(back.index.to_bytes(), state.index.to_bytes());
        assert_eq!(back.manifest, state.manifest);
    }

    fn tiny_index(e: &ReferenceEmbedder) -> VectorIndex {
        let texts = ["apples and pears", "pears only", "nothing related"];
        let chunks: Vec<ChunkRecord> = texts
            .iter()
            .enumerate()
            .map(|(i, t)| ChunkRecord {
                file_id: format!("f{i}"),
                file_name: format!("f{i}.txt"),
                chunk_index: 0,
                unit_indices: vec![0],
                token_count: 2,
                text: t.to_string(),
            })
            .collect();
        VectorIndex::build_flat(embed_chunks(&chunks, e).unwrap()).unwrap()
    }

    #[test]
    fn retrieval_provenance() {
        let e = ReferenceEmbedder::default();
        let index = tiny_index(&e);
        let flip = FixedScorer(vec![0.0, 1.0, 0.5]);
        let r = Retriever::new(&index, &e, &flip);
        let plain = r.answer_retrieve("apples and pears", 3, false).unwrap();
        assert_eq!(plain.contexts[0].text, "apples and pears");
        let one = r.answer_retrieve("apples and pears", 1, false).unwrap();
        assert_eq!(one.retrieval_order[..], plain.retrieval_order[..1]);
        let re = r.answer_retrieve("apples and pears", 3, true).unwrap();
        assert_eq!(re.retrieval_order, plain.retrieval_order);
        assert_eq!(re.contexts[0].retrieval_rank, 2);
        assert_eq!(re.contexts[1].retrieval_rank, 3);
        assert_eq!(re.contexts[0].rerank_score, Some(1.0));
        let empty = VectorIndex::default();
        assert!(matches!(Retriever::new(&empty, &e, &flip).answer_retrieve("x", 1, false), Err(Error::EmptyIndex)));
    }

    #[test]
    fn single_chunk_profile() {
        let e = ReferenceEmbedder::default();
        let index = tiny_index(&e);
        let s = LexicalOverlapScorer;
        let r = Retriever::new(&index, &e, &s);
        let p = profile_latency(&r, &["pears".to_string()], &[1], 1).unwrap();
        assert_eq!(p.rows.len(), 2);
        for row in &p.rows {
            assert_eq!(row.timing.samples, 1);
            assert_eq!(row.timing.p50_ms, row.timing.p99_ms);
        }
    }
}
