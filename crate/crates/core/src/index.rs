//! In-process vector store: exact flat search plus an IVF index with
//! seeded spherical k-means and incremental updates.
//!
//! Stored vectors are L2-normalized on insert, so cosine similarity is a dot
//! product. Results are ordered by descending similarity with ties broken by
//! ascending chunk id.

use std::cmp::Ordering;
use std::collections::HashMap;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::embedding::{dot, EmbeddingVector};
use crate::text::fnv1a;
use crate::{par, Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IndexedChunk {
    pub chunk_id: String,
    pub vector: EmbeddingVector,
    pub file_id: String,
    pub chunk_index: usize,
    pub text: String,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct IvfParams {
    pub nlist: usize,
    pub nprobe: usize,
    pub kmeans_iters: usize,
    pub seed: u64,
}

impl IvfParams {
    /// `nlist = round(√n)`, `nprobe = max(1, nlist / 4)`.
    pub fn for_size(n: usize, seed: u64) -> Self {
        let nlist = ((n as f64).sqrt().round() as usize).clamp(1, n.max(1));
        Self { nlist, nprobe: (nlist / 4).max(1), kmeans_iters: 20, seed }
    }

    pub fn validate(&self) -> Result<()> {
        if self.nlist == 0 {
            return Err(Error::Config("nlist must be at least 1".into()));
        }
        if self.nprobe == 0 || self.nprobe > self.nlist {
            return Err(Error::Config(format!("nprobe must be in 1..={}", self.nlist)));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RetrievalHit {
    pub chunk_id: String,
    pub similarity: f64,
    pub file_id: String,
    pub chunk_index: usize,
    pub text: String,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct RetrievalResult {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub query: Option<String>,
    pub hits: Vec<RetrievalHit>,
}

#[derive(Debug, Clone, PartialEq)]
struct Ivf {
    params: IvfParams,
    centroids: Vec<Vec<f64>>,
    lists: Vec<Vec<usize>>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct VectorIndex {
    dim: usize,
    entries: Vec<IndexedChunk>,
    assignment: Vec<usize>,
    slots: HashMap<String, usize>,
    ivf: Option<Ivf>,
}

fn order(a: &(f64, &str), b: &(f64, &str)) -> Ordering {
    b.0.partial_cmp(&a.0).unwrap_or(Ordering::Equal).then_with(|| a.1.cmp(b.1))
}

impl VectorIndex {
    fn empty() -> Self {
        Self { dim: 0, entries: Vec::new(), assignment: Vec::new(), slots: HashMap::new(), ivf: None }
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn is_ivf(&self) -> bool {
        self.ivf.is_some()
    }

    pub fn ivf_params(&self) -> Option<IvfParams> {
        self.ivf.as_ref().map(|i| i.params)
    }

    pub fn centroids(&self) -> Option<&[Vec<f64>]> {
        self.ivf.as_ref().map(|i| i.centroids.as_slice())
    }

    pub fn contains(&self, chunk_id: &str) -> bool {
        self.slots.contains_key(chunk_id)
    }

    pub fn get(&self, chunk_id: &str) -> Option<&IndexedChunk> {
        self.slots.get(chunk_id).map(|&s| &self.entries[s])
    }

    /// Stored chunks sorted by chunk id; vectors are normalized.
    pub fn chunks(&self) -> Vec<&IndexedChunk> {
        let mut v: Vec<&IndexedChunk> = self.entries.iter().collect();
        v.sort_by(|a, b| a.chunk_id.cmp(&b.chunk_id));
        v
    }

    pub fn set_nprobe(&mut self, nprobe: usize) -> Result<()> {
        if let Some(ivf) = &mut self.ivf {
            let p = IvfParams { nprobe, ..ivf.params };
            p.validate()?;
            ivf.params = p;
        }
        Ok(())
    }

    fn prepare(chunks: Vec<IndexedChunk>) -> Result<(usize, Vec<IndexedChunk>)> {
        let dim = chunks.first().map_or(0, |c| c.vector.dim());
        let mut seen = HashMap::new();
        let mut out = Vec::with_capacity(chunks.len());
        for mut c in chunks {
            if c.vector.dim() != dim {
                return Err(Error::DimensionMismatch { expected: dim, actual: c.vector.dim() });
            }
            if seen.insert(c.chunk_id.clone(), ()).is_some() {
                return Err(Error::DuplicateChunkId(c.chunk_id));
            }
            c.vector = c.vector.normalized()?;
            out.push(c);
        }
        out.sort_by(|a, b| a.chunk_id.cmp(&b.chunk_id));
        Ok((dim, out))
    }

    fn from_entries(dim: usize, entries: Vec<IndexedChunk>) -> Self {
        let slots = entries.iter().enumerate().map(|(i, c)| (c.chunk_id.clone(), i)).collect();
        let assignment = vec![0; entries.len()];
        Self { dim, entries, assignment, slots, ivf: None }
    }

    /// Exact index over all chunks.
    pub fn build_flat(chunks: Vec<IndexedChunk>) -> Result<Self> {
        let (dim, entries) = Self::prepare(chunks)?;
        Ok(Self::from_entries(dim, entries))
    }

    /// IVF index: seeded k-means over the normalized vectors, each chunk
    /// listed under its nearest centroid.
    pub fn build_ivf(chunks: Vec<IndexedChunk>, params: IvfParams) -> Result<Self> {
        params.validate()?;
        if params.nlist > chunks.len() {
            return Err(Error::TooManyLists { nlist: params.nlist, count: chunks.len() });
        }
        let (dim, entries) = Self::prepare(chunks)?;
        let mut index = Self::from_entries(dim, entries);
        index.cluster(params);
        Ok(index)
    }

    fn cluster(&mut self, params: IvfParams) {
        // Canonical order, so a rebuild matches a fresh build of the same set.
        self.entries.sort_by(|a, b| a.chunk_id.cmp(&b.chunk_id));
        self.slots = self.entries.iter().enumerate().map(|(i, c)| (c.chunk_id.clone(), i)).collect();
        let vectors: Vec<&[f64]> = self.entries.iter().map(|c| c.vector.as_slice()).collect();
        let centroids = kmeans(&vectors, params.nlist, params.kmeans_iters, params.seed);
        let assignment = par::map(&vectors, |v| nearest(&centroids, v));
        let mut lists = vec![Vec::new(); centroids.len()];
        for (slot, &list) in assignment.iter().enumerate() {
            lists[list].push(slot);
        }
        self.assignment = assignment;
        self.ivf = Some(Ivf { params, centroids, lists });
    }

    /// Re-clusters an IVF index from its current contents. No-op for flat.
    pub fn rebuild(&mut self) -> Result<()> {
        let Some(ivf) = &self.ivf else { return Ok(()) };
        let params = ivf.params;
        if params.nlist > self.entries.len() {
            return Err(Error::TooManyLists { nlist: params.nlist, count: self.entries.len() });
        }
        self.cluster(params);
        Ok(())
    }

    /// Inserts or replaces chunks. IVF indexes assign new vectors to the
    /// nearest existing centroid without moving centroids.
    pub fn upsert(&mut self, chunks: Vec<IndexedChunk>) -> Result<()> {
        for mut c in chunks {
            if self.entries.is_empty() && self.ivf.is_none() {
                self.dim = c.vector.dim();
            }
            if c.vector.dim() != self.dim {
                return Err(Error::DimensionMismatch { expected: self.dim, actual: c.vector.dim() });
            }
            c.vector = c.vector.normalized()?;
            if self.slots.contains_key(&c.chunk_id) {
                self.remove_one(&c.chunk_id);
            }
            let slot = self.entries.len();
            let list = match &mut self.ivf {
                Some(ivf) => {
                    let l = nearest(&ivf.centroids, c.vector.as_slice());
                    ivf.lists[l].push(slot);
                    l
                }
                None => 0,
            };
            self.slots.insert(c.chunk_id.clone(), slot);
            self.entries.push(c);
            self.assignment.push(list);
        }
        Ok(())
    }

    /// Removes chunks by id; unknown ids are skipped with a warning. Returns
    /// the number removed.
    pub fn remove(&mut self, chunk_ids: &[String]) -> usize {
        let mut removed = 0;
        for id in chunk_ids {
            if self.remove_one(id) {
                removed += 1;
            } else {
                tracing::warn!(chunk_id = %id, "remove of unknown chunk id ignored");
            }
        }
        removed
    }

    /// Removes every chunk that belongs to `file_id`.
    pub fn remove_file(&mut self, file_id: &str) -> usize {
        let ids: Vec<String> = self.entries.iter().filter(|c| c.file_id == file_id).map(|c| c.chunk_id.clone()).collect();
        self.remove(&ids)
    }

    fn remove_one(&mut self, chunk_id: &str) -> bool {
        let Some(slot) = self.slots.remove(chunk_id) else { return false };
        let last = self.entries.len() - 1;
        if let Some(ivf) = &mut self.ivf {
            let list = &mut ivf.lists[self.assignment[slot]];
            list.retain(|&s| s != slot);
            if slot != last {
                let moved = &mut ivf.lists[self.assignment[last]];
                for s in moved.iter_mut() {
                    if *s == last {
                        *s = slot;
                    }
                }
            }
        }
        self.entries.swap_remove(slot);
        self.assignment.swap_remove(slot);
        if slot != last {
            self.slots.insert(self.entries[slot].chunk_id.clone(), slot);
        }
        true
    }

    fn candidate_slots(&self, q: &[f64]) -> Vec<usize> {
        match &self.ivf {
            None => (0..self.entries.len()).collect(),
            Some(ivf) => {
                let mut ranked: Vec<(f64, usize)> = ivf.centroids.iter().map(|c| dot(c, q)).zip(0..).collect();
                ranked.sort_by(|a, b| b.0.partial_cmp(&a.0).unwrap_or(Ordering::Equal).then(a.1.cmp(&b.1)));
                let mut slots: Vec<usize> = ranked
                    .iter()
                    .take(ivf.params.nprobe)
                    .flat_map(|&(_, l)| ivf.lists[l].iter().copied())
                    .collect();
                slots.sort_unstable();
                slots
            }
        }
    }

    /// Top-`k` chunks by cosine similarity to `query`.
    pub fn search_topk(&self, query: &EmbeddingVector, k: usize) -> Result<RetrievalResult> {
        if k == 0 {
            return Err(Error::Config("k must be at least 1".into()));
        }
        if self.entries.is_empty() {
            return Ok(RetrievalResult::default());
        }
        if query.dim() != self.dim {
            return Err(Error::DimensionMismatch { expected: self.dim, actual: query.dim() });
        }
        let q = query.normalized()?;
        let q = q.as_slice();
        let slots = self.candidate_slots(q);
        let scores = par::map(&slots, |&s| dot(self.entries[s].vector.as_slice(), q));
        let mut scored: Vec<(f64, &str, usize)> = scores
            .into_iter()
            .zip(&slots)
            .map(|(score, &s)| (score, self.entries[s].chunk_id.as_str(), s))
            .collect();
        let cmp = |a: &(f64, &str, usize), b: &(f64, &str, usize)| order(&(a.0, a.1), &(b.0, b.1));
        if scored.len() > k {
            scored.select_nth_unstable_by(k - 1, cmp);
            scored.truncate(k);
        }
        scored.sort_by(cmp);
        let hits = scored
            .into_iter()
            .map(|(similarity, _, s)| {
                let c = &self.entries[s];
                RetrievalHit {
                    chunk_id: c.chunk_id.clone(),
                    similarity,
                    file_id: c.file_id.clone(),
                    chunk_index: c.chunk_index,
                    text: c.text.clone(),
                }
            })
            .collect();
        Ok(RetrievalResult { query: None, hits })
    }

    // -----------------------------------------------------------------------
    // Persistence

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut w = Writer(Vec::new());
        w.0.extend_from_slice(INDEX_MAGIC);
        w.u32(INDEX_VERSION);
        w.u32(self.dim as u32);
        let (kind, params) = match &self.ivf {
            Some(ivf) => (1u8, ivf.params),
            None => (0u8, IvfParams { nlist: 0, nprobe: 0, kmeans_iters: 0, seed: 0 }),
        };
        w.0.push(kind);
        w.u32(params.nlist as u32);
        w.u32(params.nprobe as u32);
        w.u32(params.kmeans_iters as u32);
        w.u64(params.seed);
        w.u64(self.entries.len() as u64);
        if let Some(ivf) = &self.ivf {
            for c in &ivf.centroids {
                c.iter().for_each(|x| w.f64(*x));
            }
        }
        let mut slots: Vec<usize> = (0..self.entries.len()).collect();
        slots.sort_by(|&a, &b| self.entries[a].chunk_id.cmp(&self.entries[b].chunk_id));
        for s in slots {
            let c = &self.entries[s];
            w.str(&c.chunk_id);
            w.str(&c.file_id);
            w.u64(c.chunk_index as u64);
            w.str(&c.text);
            w.u32(self.assignment[s] as u32);
            c.vector.as_slice().iter().for_each(|x| w.f64(*x));
        }
        let sum = fnv1a(&w.0);
        w.u64(sum);
        w.0
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < INDEX_MAGIC.len() + 4 || &bytes[..INDEX_MAGIC.len()] != INDEX_MAGIC {
            return Err(Error::Corrupt("not an index file".into()));
        }
        let mut r = Reader { buf: bytes, pos: INDEX_MAGIC.len() };
        let version = r.u32()?;
        if version != INDEX_VERSION {
            return Err(Error::VersionMismatch(version));
        }
        if bytes.len() < r.pos + 8 {
            return Err(Error::Corrupt("truncated header".into()));
        }
        let (body, trailer) = bytes.split_at(bytes.len() - 8);
        if fnv1a(body) != u64::from_le_bytes(trailer.try_into().unwrap()) {
            return Err(Error::Corrupt("checksum mismatch or truncated file".into()));
        }
        r.buf = body;
        let dim = r.u32()? as usize;
        let kind = r.u8()?;
        let params = IvfParams {
            nlist: r.u32()? as usize,
            nprobe: r.u32()? as usize,
            kmeans_iters: r.u32()? as usize,
            seed: r.u64()?,
        };
        let count = r.u64()? as usize;
        let centroids = if kind == 1 {
            (0..params.nlist).map(|_| (0..dim).map(|_| r.f64()).collect::<Result<Vec<_>>>()).collect::<Result<Vec<_>>>()?
        } else if kind == 0 {
            Vec::new()
        } else {
            return Err(Error::Corrupt(format!("unknown index kind {kind}")));
        };
        let mut entries = Vec::with_capacity(count.min(1 << 20));
        let mut assignment = Vec::with_capacity(count.min(1 << 20));
        for _ in 0..count {
            let chunk_id = r.str()?;
            let file_id = r.str()?;
            let chunk_index = r.u64()? as usize;
            let text = r.str()?;
            let list = r.u32()? as usize;
            let vector = EmbeddingVector((0..dim).map(|_| r.f64()).collect::<Result<Vec<_>>>()?);
            if kind == 1 && list >= params.nlist {
                return Err(Error::Corrupt("list id out of range".into()));
            }
            entries.push(IndexedChunk { chunk_id, vector, file_id, chunk_index, text });
            assignment.push(list);
        }
        if r.pos != body.len() {
            return Err(Error::Corrupt("trailing bytes".into()));
        }
        let mut index = Self::from_entries(dim, entries);
        if index.slots.len() != index.entries.len() {
            return Err(Error::Corrupt("duplicate chunk id".into()));
        }
        index.assignment = assignment;
        if kind == 1 {
            let mut lists = vec![Vec::new(); params.nlist];
            for (slot, &l) in index.assignment.iter().enumerate() {
                lists[l].push(slot);
            }
            index.ivf = Some(Ivf { params, centroids, lists });
        }
        Ok(index)
    }

    pub fn persist(&self, path: &Path) -> Result<()> {
        crate::ingest::write_atomic(path, &self.to_bytes())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes)
    }
}

impl Default for VectorIndex {
    fn default() -> Self {
        Self::empty()
    }
}

pub const INDEX_MAGIC: &[u8; 8] = b"RGKIDX\0\0";
pub const INDEX_VERSION: u32 = 1;

struct Writer(Vec<u8>);

impl Writer {
    fn u32(&mut self, v: u32) {
        self.0.extend_from_slice(&v.to_le_bytes());
    }
    fn u64(&mut self, v: u64) {
        self.0.extend_from_slice(&v.to_le_bytes());
    }
    fn f64(&mut self, v: f64) {
        self.0.extend_from_slice(&v.to_le_bytes());
    }
    fn str(&mut self, s: &str) {
        self.u32(s.len() as u32);
        self.0.extend_from_slice(s.as_bytes());
    }
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl Reader<'_> {
    fn take(&mut self, n: usize) -> Result<&[u8]> {
        if self.pos + n > self.buf.len() {
            return Err(Error::Corrupt("unexpected end of file".into()));
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }
    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }
    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }
    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
    fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
    fn str(&mut self) -> Result<String> {
        let n = self.u32()? as usize;
        String::from_utf8(self.take(n)?.to_vec()).map_err(|_| Error::Corrupt("invalid utf-8".into()))
    }
}

fn nearest(centroids: &[Vec<f64>], v: &[f64]) -> usize {
    let mut best = 0;
    let mut best_score = f64::NEG_INFINITY;
    for (i, c) in centroids.iter().enumerate() {
        let s = dot(c, v);
        if s > best_score {
            best_score = s;
            best = i;
        }
    }
    best
}

/// Spherical k-means over unit vectors with k-means++ seeding.
fn kmeans(vectors: &[&[f64]], k: usize, iters: usize, seed: u64) -> Vec<Vec<f64>> {
    let n = vectors.len();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut centroids: Vec<Vec<f64>> = vec![vectors[rng.random_range(0..n)].to_vec()];
    let mut dist: Vec<f64> = vectors.iter().map(|v| sq_dist(v, &centroids[0])).collect();
    while centroids.len() < k {
        let total: f64 = dist.iter().sum();
        let pick = if total > 0.0 {
            let mut target = rng.random::<f64>() * total;
            let mut chosen = n - 1;
            for (i, d) in dist.iter().enumerate() {
                if target < *d {
                    chosen = i;
                    break;
                }
                target -= d;
            }
            chosen
        } else {
            rng.random_range(0..n)
        };
        let c = vectors[pick].to_vec();
        for (d, v) in dist.iter_mut().zip(vectors) {
            *d = d.min(sq_dist(v, &c));
        }
        centroids.push(c);
    }

    for _ in 0..iters {
        let assignment = par::map(vectors, |v| nearest(&centroids, v));
        let dim = vectors[0].len();
        let mut sums = vec![vec![0.0; dim]; k];
        let mut counts = vec![0usize; k];
        for (v, &a) in vectors.iter().zip(&assignment) {
            counts[a] += 1;
            for (s, x) in sums[a].iter_mut().zip(v.iter()) {
                *s += x;
            }
        }
        let mut moved = false;
        for ((c, sum), &count) in centroids.iter_mut().zip(sums).zip(&counts) {
            if count == 0 {
                continue;
            }
            let norm = dot(&sum, &sum).sqrt();
            if norm == 0.0 {
                continue;
            }
            let next: Vec<f64> = sum.iter().map(|x| x / norm).collect();
            if next != *c {
                moved = true;
                *c = next;
            }
        }
        if !moved {
            break;
        }
    }
    centroids
}

fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}
