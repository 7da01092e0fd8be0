//! Recursive character splitting and two-stage hierarchical semantic
//! chunking.
//!
//! The hierarchical pipeline segments text into sentence units, embeds them,
//! aggregates adjacent units whose cosine similarity reaches `theta` into
//! local groups, then merges each group with any of the next `window` groups
//! whose mean pairwise unit similarity reaches `gamma`. All steps respect the
//! token budget `max_tokens`.

use std::io::{BufRead, Write};
use std::ops::Range;

use serde::{Deserialize, Serialize};

use crate::embedding::{dot, Embedder, EmbeddingVector};
use crate::ingest::NormalizedDocument;
use crate::text::{sentence_spans, Tokenizer, WhitespaceTokenizer};
use crate::{Error, Result};

pub fn default_delimiters() -> Vec<String> {
    ["\n\n", "\n", "。", ". ", "！", "? ", "! ", "；", "; "]
        .into_iter()
        .map(String::from)
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ChunkingConfig {
    /// Token budget for every chunk.
    pub max_tokens: usize,
    /// Tokens shared by consecutive recursive-split chunks.
    pub overlap: usize,
    /// Split delimiters in priority order.
    pub delimiters: Vec<String>,
    /// Adjacent-unit similarity threshold for local grouping.
    pub theta: f64,
    /// Inter-group similarity threshold for skip-window merging.
    pub gamma: f64,
    /// Number of following groups examined for a merge.
    pub window: usize,
}

impl Default for ChunkingConfig {
    fn default() -> Self {
        Self {
            max_tokens: 512,
            overlap: 50,
            delimiters: default_delimiters(),
            theta: 0.75,
            gamma: 0.80,
            window: 3,
        }
    }
}

impl ChunkingConfig {
    pub fn validate(&self) -> Result<()> {
        if self.max_tokens == 0 {
            return Err(Error::Config("max_tokens must be positive".into()));
        }
        if self.overlap >= self.max_tokens {
            return Err(Error::Config("overlap must be smaller than max_tokens".into()));
        }
        if self.delimiters.is_empty() || self.delimiters.iter().any(|d| d.is_empty()) {
            return Err(Error::Config("delimiters must be non-empty strings".into()));
        }
        if self.window == 0 {
            return Err(Error::Config("window must be at least 1".into()));
        }
        if !self.theta.is_finite() || !self.gamma.is_finite() {
            return Err(Error::Config("thresholds must be finite".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Strategy {
    Rcs,
    Hisacc,
    Sentence,
}

impl Strategy {
    pub fn label(self) -> &'static str {
        match self {
            Strategy::Rcs => "RCS",
            Strategy::Hisacc => "HiSACC",
            Strategy::Sentence => "Sentence",
        }
    }
}

impl std::str::FromStr for Strategy {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "rcs" => Ok(Strategy::Rcs),
            "hisacc" => Ok(Strategy::Hisacc),
            "sentence" => Ok(Strategy::Sentence),
            other => Err(Error::Config(format!("unknown chunking strategy `{other}`"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Unit {
    pub index: usize,
    pub text: String,
    pub token_count: usize,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Group {
    pub unit_indices: Vec<usize>,
    pub token_count: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Chunk {
    pub text: String,
    /// Member unit indices in document order. For recursive splitting these
    /// index the atomic split pieces.
    pub unit_indices: Vec<usize>,
    pub token_count: usize,
    pub source_file_id: String,
}

// ---------------------------------------------------------------------------
// Recursive character splitting

pub fn split_rcs(text: &str, config: &ChunkingConfig) -> Vec<Chunk> {
    split_rcs_with(text, config, &WhitespaceTokenizer)
}

/// Recursive character splitting with a fixed overlap.
///
/// A segment within budget is kept whole; otherwise it is split on the next
/// delimiter and each piece recursed on. A segment that still exceeds the
/// budget once the delimiters are exhausted falls back to single tokens,
/// which the packer then lays out as hard token windows. Pieces are packed
/// greedily: the first chunk may hold `max_tokens`, later chunks
/// `max_tokens - overlap` fresh tokens preceded by the last `overlap` tokens
/// of the previous chunk. Every chunk is a contiguous slice of `text`.
pub fn split_rcs_with(text: &str, config: &ChunkingConfig, tok: &dyn Tokenizer) -> Vec<Chunk> {
    let trimmed = trim_range(text, 0..text.len());
    if trimmed.is_empty() {
        return Vec::new();
    }
    let total = tok.count(&text[trimmed.clone()]);
    if total <= config.max_tokens {
        return vec![Chunk {
            text: text[trimmed.clone()].to_string(),
            unit_indices: vec![0],
            token_count: total,
            source_file_id: String::new(),
        }];
    }

    let piece_budget = config.max_tokens - config.overlap;
    let mut pieces = Vec::new();
    atomize(text, trimmed, 0, piece_budget, config, tok, &mut pieces);

    let mut chunks = Vec::new();
    let mut i = 0;
    let mut prev: Option<Range<usize>> = None;
    while i < pieces.len() {
        let budget = if prev.is_none() { config.max_tokens } else { piece_budget };
        let start_piece = i;
        let mut used = 0;
        while i < pieces.len() && (i == start_piece || used + pieces[i].1 <= budget) {
            used += pieces[i].1;
            i += 1;
        }
        let content = pieces[start_piece].0.start..pieces[i - 1].0.end;
        let start = match &prev {
            Some(p) if config.overlap > 0 => overlap_start(text, p, config.overlap, tok).min(content.start),
            _ => content.start,
        };
        let range = start..content.end;
        let chunk_text = &text[range.clone()];
        chunks.push(Chunk {
            text: chunk_text.to_string(),
            unit_indices: (start_piece..i).collect(),
            token_count: tok.count(chunk_text),
            source_file_id: String::new(),
        });
        prev = Some(range);
    }
    chunks
}

fn overlap_start(text: &str, prev: &Range<usize>, overlap: usize, tok: &dyn Tokenizer) -> usize {
    let spans = tok.spans(&text[prev.clone()]);
    let from = spans.len().saturating_sub(overlap);
    spans.get(from).map_or(prev.end, |s| prev.start + s.start)
}

fn trim_range(text: &str, r: Range<usize>) -> Range<usize> {
    let s = &text[r.clone()];
    let lead = s.len() - s.trim_start().len();
    let t = s.trim();
    r.start + lead..r.start + lead + t.len()
}

fn atomize(
    text: &str,
    range: Range<usize>,
    level: usize,
    budget: usize,
    config: &ChunkingConfig,
    tok: &dyn Tokenizer,
    out: &mut Vec<(Range<usize>, usize)>,
) {
    let range = trim_range(text, range);
    if range.is_empty() {
        return;
    }
    let n = tok.count(&text[range.clone()]);
    if n == 0 {
        return;
    }
    if n <= budget {
        out.push((range, n));
        return;
    }
    if level >= config.delimiters.len() {
        for span in tok.spans(&text[range.clone()]) {
            out.push((range.start + span.start..range.start + span.end, 1));
        }
        return;
    }
    let delim = config.delimiters[level].as_str();
    let segment = &text[range.clone()];
    if !segment.contains(delim) {
        atomize(text, range, level + 1, budget, config, tok, out);
        return;
    }
    let mut piece_start = 0;
    for (pos, _) in segment.match_indices(delim) {
        let piece_end = pos + delim.len();
        atomize(text, range.start + piece_start..range.start + piece_end, level + 1, budget, config, tok, out);
        piece_start = piece_end;
    }
    atomize(text, range.start + piece_start..range.end, level + 1, budget, config, tok, out);
}

// ---------------------------------------------------------------------------
// Sentence units

pub fn split_units(text: &str, config: &ChunkingConfig) -> Vec<Unit> {
    split_units_with(text, config, &WhitespaceTokenizer)
}

/// Sentence units in document order. A sentence longer than the token budget
/// is cut into budget-sized token windows so every unit fits a chunk.
pub fn split_units_with(text: &str, config: &ChunkingConfig, tok: &dyn Tokenizer) -> Vec<Unit> {
    let mut units = Vec::new();
    for range in sentence_spans(text) {
        let sentence = &text[range];
        let spans = tok.spans(sentence);
        if spans.is_empty() {
            continue;
        }
        if spans.len() <= config.max_tokens {
            units.push(Unit { index: units.len(), text: sentence.to_string(), token_count: spans.len() });
            continue;
        }
        for window in spans.chunks(config.max_tokens) {
            let piece = &sentence[window[0].start..window[window.len() - 1].end];
            units.push(Unit { index: units.len(), text: piece.to_string(), token_count: window.len() });
        }
    }
    units
}

/// Greedy packing of sentence units up to the token budget.
pub fn split_sentences(text: &str, config: &ChunkingConfig) -> Vec<Chunk> {
    let units = split_units(text, config);
    let mut groups: Vec<Group> = Vec::new();
    for u in &units {
        match groups.last_mut() {
            Some(g) if g.token_count + u.token_count <= config.max_tokens => {
                g.unit_indices.push(u.index);
                g.token_count += u.token_count;
            }
            _ => groups.push(Group { unit_indices: vec![u.index], token_count: u.token_count }),
        }
    }
    groups.iter().map(|g| chunk_from_group(&units, &g.unit_indices, &WhitespaceTokenizer)).collect()
}

// ---------------------------------------------------------------------------
// Hierarchical semantic aggregation

fn check_embeddings(units: &[Unit], embeddings: &[EmbeddingVector]) -> Result<()> {
    if embeddings.len() != units.len() {
        return Err(Error::DimensionMismatch { expected: units.len(), actual: embeddings.len() });
    }
    if let Some(first) = embeddings.first() {
        for e in embeddings {
            if e.dim() != first.dim() {
                return Err(Error::DimensionMismatch { expected: first.dim(), actual: e.dim() });
            }
        }
    }
    Ok(())
}

fn normalized(embeddings: &[EmbeddingVector]) -> Result<Vec<EmbeddingVector>> {
    embeddings.iter().map(EmbeddingVector::normalized).collect()
}

/// Stage one: a left-to-right sweep that extends the current group with the
/// next unit while their cosine reaches `theta` and the budget allows.
pub fn aggregate_local(units: &[Unit], embeddings: &[EmbeddingVector], config: &ChunkingConfig) -> Result<Vec<Group>> {
    check_embeddings(units, embeddings)?;
    let unit_vecs = normalized(embeddings)?;
    let mut groups: Vec<Group> = Vec::new();
    for (i, u) in units.iter().enumerate() {
        if let Some(g) = groups.last_mut() {
            let sim = dot(unit_vecs[i - 1].as_slice(), unit_vecs[i].as_slice());
            if sim >= config.theta && g.token_count + u.token_count <= config.max_tokens {
                g.unit_indices.push(i);
                g.token_count += u.token_count;
                continue;
            }
        }
        groups.push(Group { unit_indices: vec![i], token_count: u.token_count });
    }
    Ok(groups)
}

/// Mean cosine over all cross pairs of member units.
pub fn group_similarity(a: &Group, b: &Group, embeddings: &[EmbeddingVector]) -> Result<f64> {
    if a.unit_indices.is_empty() || b.unit_indices.is_empty() {
        return Err(Error::EmptyInput("group"));
    }
    let mut total = 0.0;
    for &i in &a.unit_indices {
        for &j in &b.unit_indices {
            total += crate::embedding::cosine(&embeddings[i], &embeddings[j])?;
        }
    }
    Ok(total / (a.unit_indices.len() * b.unit_indices.len()) as f64)
}

fn group_similarity_unit(a: &Group, b: &Group, unit_vecs: &[EmbeddingVector]) -> f64 {
    let mut total = 0.0;
    for &i in &a.unit_indices {
        for &j in &b.unit_indices {
            total += dot(unit_vecs[i].as_slice(), unit_vecs[j].as_slice());
        }
    }
    total / (a.unit_indices.len() * b.unit_indices.len()) as f64
}

/// Whether `b` may be absorbed into `a` under the thresholds and budget.
pub fn merge_admissible(a: &Group, b: &Group, embeddings: &[EmbeddingVector], config: &ChunkingConfig) -> Result<bool> {
    Ok(a.token_count + b.token_count <= config.max_tokens && group_similarity(a, b, embeddings)? >= config.gamma)
}

/// Stage two: skip-window merging over groups in document order.
///
/// At each surviving group `a`, the next `window` surviving groups are
/// scanned in order; the first one that is similar enough and fits the
/// budget is absorbed and the scan restarts at `a` with the window measured
/// from `a`'s new neighbours. When nothing more merges into `a` the pass
/// moves on.
pub fn merge_groups(groups: &[Group], embeddings: &[EmbeddingVector], config: &ChunkingConfig) -> Result<Vec<Group>> {
    let unit_vecs = normalized(embeddings)?;
    let mut live: Vec<Group> = groups.to_vec();
    let mut a = 0;
    while a < live.len() {
        let mut merged = false;
        let end = (a + config.window).min(live.len() - 1);
        for b in a + 1..=end {
            if live[a].token_count + live[b].token_count > config.max_tokens {
                continue;
            }
            if group_similarity_unit(&live[a], &live[b], &unit_vecs) >= config.gamma {
                let absorbed = live.remove(b);
                let target = &mut live[a];
                target.unit_indices.extend(absorbed.unit_indices);
                target.unit_indices.sort_unstable();
                target.token_count += absorbed.token_count;
                merged = true;
                break;
            }
        }
        if !merged {
            a += 1;
        }
    }
    Ok(live)
}

pub fn merge_skip_window(
    units: &[Unit],
    groups: &[Group],
    embeddings: &[EmbeddingVector],
    config: &ChunkingConfig,
) -> Result<Vec<Chunk>> {
    check_embeddings(units, embeddings)?;
    let merged = merge_groups(groups, embeddings, config)?;
    Ok(merged.iter().map(|g| chunk_from_group(units, &g.unit_indices, &WhitespaceTokenizer)).collect())
}

fn chunk_from_group(units: &[Unit], indices: &[usize], tok: &dyn Tokenizer) -> Chunk {
    let text = indices.iter().map(|&i| units[i].text.as_str()).collect::<Vec<_>>().join(" ");
    Chunk {
        token_count: tok.count(&text),
        text,
        unit_indices: indices.to_vec(),
        source_file_id: String::new(),
    }
}

/// Full hierarchical pipeline: units, embeddings, local groups, skip-window
/// merge.
pub fn chunk_hisacc(text: &str, embedder: &dyn Embedder, config: &ChunkingConfig) -> Result<Vec<Chunk>> {
    let units = split_units(text, config);
    if units.is_empty() {
        return Ok(Vec::new());
    }
    let texts: Vec<String> = units.iter().map(|u| u.text.clone()).collect();
    let embeddings = embedder.embed_batch(&texts)?;
    let groups = aggregate_local(&units, &embeddings, config)?;
    merge_skip_window(&units, &groups, &embeddings, config)
}

pub fn chunk_text(text: &str, strategy: Strategy, embedder: &dyn Embedder, config: &ChunkingConfig) -> Result<Vec<Chunk>> {
    config.validate()?;
    match strategy {
        Strategy::Rcs => Ok(split_rcs(text, config)),
        Strategy::Sentence => Ok(split_sentences(text, config)),
        Strategy::Hisacc => chunk_hisacc(text, embedder, config),
    }
}

/// Document text as fed to the chunkers: blocks joined by blank lines.
pub fn document_text(doc: &NormalizedDocument) -> String {
    doc.blocks.join("\n\n")
}

pub fn chunk_document(
    doc: &NormalizedDocument,
    strategy: Strategy,
    embedder: &dyn Embedder,
    config: &ChunkingConfig,
) -> Result<Vec<Chunk>> {
    let mut chunks = chunk_text(&document_text(doc), strategy, embedder, config)?;
    for c in &mut chunks {
        c.source_file_id = doc.file_id.clone();
    }
    Ok(chunks)
}

// ---------------------------------------------------------------------------
// Chunk dump

/// One line of the chunk dump JSONL.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChunkRecord {
    pub file_id: String,
    #[serde(default)]
    pub file_name: String,
    pub chunk_index: usize,
    pub unit_indices: Vec<usize>,
    pub token_count: usize,
    pub text: String,
}

impl ChunkRecord {
    pub fn from_chunks(file_name: &str, chunks: &[Chunk]) -> Vec<ChunkRecord> {
        chunks
            .iter()
            .enumerate()
            .map(|(i, c)| ChunkRecord {
                file_id: c.source_file_id.clone(),
                file_name: file_name.to_string(),
                chunk_index: i,
                unit_indices: c.unit_indices.clone(),
                token_count: c.token_count,
                text: c.text.clone(),
            })
            .collect()
    }

    pub fn chunk_id(&self) -> String {
        format!("{}#{}", self.file_id, self.chunk_index)
    }
}

pub fn write_chunk_dump<W: Write>(mut w: W, records: &[ChunkRecord]) -> Result<()> {
    for r in records {
        serde_json::to_writer(&mut w, r)?;
        w.write_all(b"\n").map_err(|e| Error::io("<chunk dump>", e))?;
    }
    Ok(())
}

pub fn read_chunk_dump<R: BufRead>(r: R) -> Result<Vec<ChunkRecord>> {
    let mut out = Vec::new();
    for line in r.lines() {
        let line = line.map_err(|e| Error::io("<chunk dump>", e))?;
        if line.trim().is_empty() {
            continue;
        }
        out.push(serde_json::from_str(&line)?);
    }
    Ok(out)
}
