//! Source enumeration, manifest-based change detection, and normalization
//! of files into ordered text blocks.

use std::collections::{BTreeMap, BTreeSet, HashMap, HashSet};
use std::fmt::Write as _;
use std::path::{Component, Path, PathBuf};

use chrono::{DateTime, NaiveDateTime, SubsecRound, Utc};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::{Error, Result};

pub const MANIFEST_MAGIC: &str = "regkit-manifest";
pub const MANIFEST_VERSION: &str = "v1";
pub const DIGEST_ALGO: &str = "sha256";
const TS_FORMAT: &str = "%Y-%m-%dT%H:%M:%SZ";

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DocumentRecord {
    pub file_id: String,
    pub file_name: String,
    pub path: String,
    pub mime_type: String,
    pub modified_at: DateTime<Utc>,
    pub checksum: String,
    pub size_bytes: u64,
}

pub fn checksum(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

pub fn format_timestamp(ts: &DateTime<Utc>) -> String {
    ts.format(TS_FORMAT).to_string()
}

pub fn parse_timestamp(s: &str) -> Option<DateTime<Utc>> {
    NaiveDateTime::parse_from_str(s, TS_FORMAT).ok().map(|n| n.and_utc())
}

/// Persisted snapshot of a source, keyed by file id.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SyncManifest {
    pub records: BTreeMap<String, DocumentRecord>,
    pub snapshot_at: DateTime<Utc>,
}

impl Default for SyncManifest {
    fn default() -> Self {
        Self { records: BTreeMap::new(), snapshot_at: DateTime::<Utc>::UNIX_EPOCH }
    }
}

fn escape_field(s: &str) -> String {
    let mut out = String::with_capacity(s.len());
    for c in s.chars() {
        match c {
            '\\' => out.push_str("\\\\"),
            '\t' => out.push_str("\\t"),
            '\n' => out.push_str("\\n"),
            '\r' => out.push_str("\\r"),
            c => out.push(c),
        }
    }
    out
}

fn unescape_field(s: &str) -> Option<String> {
    let mut out = String::with_capacity(s.len());
    let mut chars = s.chars();
    while let Some(c) = chars.next() {
        if c != '\\' {
            out.push(c);
            continue;
        }
        match chars.next()? {
            '\\' => out.push('\\'),
            't' => out.push('\t'),
            'n' => out.push('\n'),
            'r' => out.push('\r'),
            _ => return None,
        }
    }
    Some(out)
}

impl SyncManifest {
    pub fn from_records(records: Vec<DocumentRecord>, snapshot_at: DateTime<Utc>) -> Result<Self> {
        let mut map = BTreeMap::new();
        for r in records {
            if map.contains_key(&r.file_id) {
                return Err(Error::DuplicateFileId(r.file_id));
            }
            map.insert(r.file_id.clone(), r);
        }
        Ok(Self { records: map, snapshot_at: snapshot_at.trunc_subsecs(0) })
    }

    /// Tab-separated text form: a header line
    /// `regkit-manifest  v1  sha256  <snapshot_at>` followed by one record per
    /// line in file-id order. Tabs, newlines and backslashes inside fields are
    /// backslash-escaped.
    pub fn to_text(&self) -> String {
        let mut out = String::new();
        let _ = writeln!(
            out,
            "{MANIFEST_MAGIC}\t{MANIFEST_VERSION}\t{DIGEST_ALGO}\t{}",
            format_timestamp(&self.snapshot_at)
        );
        for r in self.records.values() {
            let _ = writeln!(
                out,
                "{}\t{}\t{}\t{}\t{}\t{}\t{}",
                escape_field(&r.file_id),
                escape_field(&r.file_name),
                escape_field(&r.path),
                escape_field(&r.mime_type),
                format_timestamp(&r.modified_at),
                r.checksum,
                r.size_bytes
            );
        }
        out
    }

    pub fn parse(text: &str) -> Result<Self> {
        let bad = |line: usize, reason: &str| Error::Manifest { line, reason: reason.to_string() };
        let mut lines = text.lines();
        let header = lines.next().ok_or_else(|| bad(1, "missing header"))?;
        let h: Vec<&str> = header.split('\t').collect();
        if h.len() != 4 || h[0] != MANIFEST_MAGIC {
            return Err(bad(1, "not a manifest header"));
        }
        if h[1] != MANIFEST_VERSION {
            return Err(bad(1, &format!("unsupported version {}", h[1])));
        }
        if h[2] != DIGEST_ALGO {
            return Err(bad(1, &format!("unsupported digest {}", h[2])));
        }
        let snapshot_at = parse_timestamp(h[3]).ok_or_else(|| bad(1, "bad snapshot timestamp"))?;
        let mut records = BTreeMap::new();
        for (i, line) in lines.enumerate() {
            let n = i + 2;
            let f: Vec<&str> = line.split('\t').collect();
            if f.len() != 7 {
                return Err(bad(n, "expected 7 tab-separated fields"));
            }
            let field = |s: &str| unescape_field(s).ok_or_else(|| bad(n, "bad escape"));
            let rec = DocumentRecord {
                file_id: field(f[0])?,
                file_name: field(f[1])?,
                path: field(f[2])?,
                mime_type: field(f[3])?,
                modified_at: parse_timestamp(f[4]).ok_or_else(|| bad(n, "bad modified_at"))?,
                checksum: f[5].to_string(),
                size_bytes: f[6].parse().map_err(|_| bad(n, "bad size"))?,
            };
            if records.contains_key(&rec.file_id) {
                return Err(bad(n, &format!("duplicate file id {}", rec.file_id)));
            }
            records.insert(rec.file_id.clone(), rec);
        }
        Ok(Self { records, snapshot_at })
    }

    /// Missing file loads as an empty manifest.
    pub fn load(path: &Path) -> Result<Self> {
        match std::fs::read_to_string(path) {
            Ok(text) => Self::parse(&text),
            Err(e) if e.kind() == std::io::ErrorKind::NotFound => Ok(Self::default()),
            Err(e) => Err(Error::io(path, e)),
        }
    }

    /// Writes through a temporary sibling and renames it into place.
    pub fn save(&self, path: &Path) -> Result<()> {
        write_atomic(path, self.to_text().as_bytes())
    }
}

pub(crate) fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    if let Some(dir) = path.parent() {
        if !dir.as_os_str().is_empty() {
            std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        }
    }
    let tmp = path.with_extension("tmp");
    std::fs::write(&tmp, bytes).map_err(|e| Error::io(&tmp, e))?;
    std::fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct SyncDelta {
    pub added: Vec<DocumentRecord>,
    pub updated: Vec<DocumentRecord>,
    pub deleted: Vec<String>,
}

impl SyncDelta {
    pub fn is_empty(&self) -> bool {
        self.added.is_empty() && self.updated.is_empty() && self.deleted.is_empty()
    }
}

/// Partitions `old ∪ new` into added, updated, deleted, and (implicitly)
/// unchanged. A file counts as updated when its checksum or modification
/// time differs, or any other recorded metadata changed.
pub fn diff_manifest(old: &SyncManifest, new: &[DocumentRecord]) -> Result<SyncDelta> {
    let mut seen = HashSet::new();
    for r in new {
        if !seen.insert(r.file_id.as_str()) {
            return Err(Error::DuplicateFileId(r.file_id.clone()));
        }
    }
    let mut delta = SyncDelta::default();
    let mut sorted: Vec<&DocumentRecord> = new.iter().collect();
    sorted.sort_by(|a, b| a.file_id.cmp(&b.file_id));
    for r in sorted {
        match old.records.get(&r.file_id) {
            None => delta.added.push(r.clone()),
            Some(prev) if prev != r => delta.updated.push(r.clone()),
            Some(_) => {}
        }
    }
    delta.deleted = old.records.keys().filter(|id| !seen.contains(id.as_str())).cloned().collect();
    Ok(delta)
}

pub fn apply_delta(old: &SyncManifest, delta: &SyncDelta, snapshot_at: DateTime<Utc>) -> SyncManifest {
    let mut records = old.records.clone();
    for id in &delta.deleted {
        records.remove(id);
    }
    for r in delta.added.iter().chain(&delta.updated) {
        records.insert(r.file_id.clone(), r.clone());
    }
    SyncManifest { records, snapshot_at: snapshot_at.trunc_subsecs(0) }
}

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct ScanOutcome {
    /// Sorted by file id.
    pub records: Vec<DocumentRecord>,
    /// Files that could not be stat'ed or read, with the reason.
    pub failures: Vec<(String, String)>,
}

pub trait SourceConnector: Send + Sync {
    fn list(&self) -> Result<ScanOutcome>;

    fn fetch(&self, file_id: &str) -> Result<Vec<u8>>;
}

pub fn scan_source(connector: &dyn SourceConnector) -> Result<ScanOutcome> {
    let mut out = connector.list()?;
    out.records.sort_by(|a, b| a.file_id.cmp(&b.file_id));
    for (path, reason) in &out.failures {
        tracing::warn!(%path, %reason, "skipping unreadable file");
    }
    Ok(out)
}

pub fn mime_for_path(path: &Path) -> &'static str {
    let ext = path.extension().and_then(|e| e.to_str()).unwrap_or("").to_ascii_lowercase();
    match ext.as_str() {
        "txt" | "text" => "text/plain",
        "md" | "markdown" => "text/markdown",
        "csv" => "text/csv",
        "pdf" => "application/pdf",
        "doc" => "application/msword",
        "docx" => "application/vnd.openxmlformats-officedocument.wordprocessingml.document",
        "xls" => "application/vnd.ms-excel",
        "xlsx" => "application/vnd.openxmlformats-officedocument.spreadsheetml.sheet",
        "ppt" => "application/vnd.ms-powerpoint",
        "pptx" => "application/vnd.openxmlformats-officedocument.presentationml.presentation",
        "url" | "webloc" => "application/internet-shortcut",
        "sh" | "bash" => "application/x-sh",
        "py" => "text/x-python",
        "js" => "text/javascript",
        "bat" | "cmd" | "ps1" => "application/x-msdos-program",
        _ => "application/octet-stream",
    }
}

/// Files under a local directory. File ids are `/`-separated paths relative
/// to the root; hidden entries are skipped.
#[derive(Debug, Clone)]
pub struct LocalFsConnector {
    root: PathBuf,
}

impl LocalFsConnector {
    pub fn new(root: impl Into<PathBuf>) -> Self {
        Self { root: root.into() }
    }

    pub fn root(&self) -> &Path {
        &self.root
    }

    fn resolve(&self, file_id: &str) -> Result<PathBuf> {
        let rel = Path::new(file_id);
        if rel.components().any(|c| !matches!(c, Component::Normal(_))) {
            return Err(Error::SourceUnreachable(format!("invalid file id {file_id}")));
        }
        Ok(self.root.join(rel))
    }

    fn record_for(&self, path: &Path) -> std::result::Result<DocumentRecord, String> {
        let rel = path.strip_prefix(&self.root).map_err(|e| e.to_string())?;
        let file_id = rel
            .components()
            .map(|c| c.as_os_str().to_string_lossy().into_owned())
            .collect::<Vec<_>>()
            .join("/");
        let meta = std::fs::metadata(path).map_err(|e| e.to_string())?;
        let bytes = std::fs::read(path).map_err(|e| e.to_string())?;
        let modified: DateTime<Utc> = meta.modified().map_err(|e| e.to_string())?.into();
        Ok(DocumentRecord {
            file_name: path.file_name().map(|n| n.to_string_lossy().into_owned()).unwrap_or_default(),
            path: path.to_string_lossy().into_owned(),
            mime_type: mime_for_path(path).to_string(),
            modified_at: modified.trunc_subsecs(0),
            checksum: checksum(&bytes),
            size_bytes: bytes.len() as u64,
            file_id,
        })
    }
}

impl SourceConnector for LocalFsConnector {
    fn list(&self) -> Result<ScanOutcome> {
        if !self.root.is_dir() {
            return Err(Error::SourceUnreachable(self.root.display().to_string()));
        }
        let mut out = ScanOutcome::default();
        let walker = walkdir::WalkDir::new(&self.root)
            .sort_by_file_name()
            .into_iter()
            .filter_entry(|e| e.depth() == 0 || !e.file_name().to_string_lossy().starts_with('.'));
        for entry in walker {
            match entry {
                Ok(e) if e.file_type().is_file() => match self.record_for(e.path()) {
                    Ok(r) => out.records.push(r),
                    Err(reason) => out.failures.push((e.path().display().to_string(), reason)),
                },
                Ok(_) => {}
                Err(e) => out
                    .failures
                    .push((e.path().map(|p| p.display().to_string()).unwrap_or_default(), e.to_string())),
            }
        }
        out.records.sort_by(|a, b| a.file_id.cmp(&b.file_id));
        Ok(out)
    }

    fn fetch(&self, file_id: &str) -> Result<Vec<u8>> {
        let path = self.resolve(file_id)?;
        std::fs::read(&path).map_err(|e| Error::io(path, e))
    }
}

// ---------------------------------------------------------------------------
// Normalization

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ExtractionStatus {
    Ok,
    Failed,
    Excluded,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct NormalizedDocument {
    pub file_id: String,
    pub file_name: String,
    pub blocks: Vec<String>,
    pub extraction_status: ExtractionStatus,
    /// Why extraction failed or the file was excluded.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub reason: Option<String>,
}

impl NormalizedDocument {
    fn rejected(record: &DocumentRecord, status: ExtractionStatus, reason: String) -> Self {
        Self {
            file_id: record.file_id.clone(),
            file_name: record.file_name.clone(),
            blocks: Vec::new(),
            extraction_status: status,
            reason: Some(reason),
        }
    }

    pub fn text(&self) -> String {
        self.blocks.join("\n\n")
    }
}

/// Converts raw bytes to text. Blank lines in the output separate blocks.
pub trait Extractor: Send + Sync {
    fn extract(&self, bytes: &[u8]) -> std::result::Result<String, String>;
}

fn utf8(bytes: &[u8]) -> std::result::Result<&str, String> {
    let s = std::str::from_utf8(bytes).map_err(|e| format!("invalid utf-8: {e}"))?;
    Ok(s.strip_prefix('\u{feff}').unwrap_or(s))
}

pub struct PlainTextExtractor;

impl Extractor for PlainTextExtractor {
    fn extract(&self, bytes: &[u8]) -> std::result::Result<String, String> {
        utf8(bytes).map(str::to_string)
    }
}

/// Headings become their own block with the `#` markers removed.
pub struct MarkdownExtractor;

impl Extractor for MarkdownExtractor {
    fn extract(&self, bytes: &[u8]) -> std::result::Result<String, String> {
        let text = utf8(bytes)?;
        let mut out = String::with_capacity(text.len());
        for line in text.lines() {
            let trimmed = line.trim_start();
            let hashes = trimmed.chars().take_while(|c| *c == '#').count();
            if (1..=6).contains(&hashes) && trimmed[hashes..].starts_with([' ', '\t']) {
                out.push_str("\n\n");
                out.push_str(trimmed[hashes..].trim().trim_end_matches('#').trim_end());
                out.push_str("\n\n");
            } else {
                out.push_str(line);
                out.push('\n');
            }
        }
        Ok(out)
    }
}

/// Each data row becomes a block of `header: value` pairs.
pub struct CsvExtractor;

impl Extractor for CsvExtractor {
    fn extract(&self, bytes: &[u8]) -> std::result::Result<String, String> {
        let text = utf8(bytes)?;
        let mut reader = csv::ReaderBuilder::new().flexible(true).from_reader(text.as_bytes());
        let headers: Vec<String> = reader.headers().map_err(|e| e.to_string())?.iter().map(str::to_string).collect();
        let mut out = String::new();
        for row in reader.records() {
            let row = row.map_err(|e| e.to_string())?;
            let cells: Vec<String> = row
                .iter()
                .enumerate()
                .filter(|(_, v)| !v.trim().is_empty())
                .map(|(i, v)| match headers.get(i) {
                    Some(h) if !h.trim().is_empty() => format!("{}: {}", h.trim(), v.trim()),
                    _ => v.trim().to_string(),
                })
                .collect();
            if !cells.is_empty() {
                out.push_str(&cells.join("; "));
                out.push_str("\n\n");
            }
        }
        Ok(out)
    }
}

pub fn default_deny_list() -> Vec<String> {
    [
        "application/internet-shortcut",
        "application/x-sh",
        "text/x-python",
        "text/javascript",
        "application/x-msdos-program",
        "application/vnd.ms-powerpoint",
        "application/vnd.openxmlformats-officedocument.presentationml.presentation",
    ]
    .into_iter()
    .map(String::from)
    .collect()
}

/// Extractors keyed by mime type, plus a deny-list of excluded types.
pub struct ExtractorRegistry {
    extractors: HashMap<String, Box<dyn Extractor>>,
    deny: BTreeSet<String>,
}

impl Default for ExtractorRegistry {
    fn default() -> Self {
        let mut r = Self::empty();
        r.register("text/plain", PlainTextExtractor);
        r.register("text/markdown", MarkdownExtractor);
        r.register("text/csv", CsvExtractor);
        r.deny = default_deny_list().into_iter().collect();
        r
    }
}

impl ExtractorRegistry {
    pub fn empty() -> Self {
        Self { extractors: HashMap::new(), deny: BTreeSet::new() }
    }

    pub fn register(&mut self, mime: &str, extractor: impl Extractor + 'static) {
        self.extractors.insert(mime.to_string(), Box::new(extractor));
    }

    pub fn set_deny_list(&mut self, deny: impl IntoIterator<Item = String>) {
        self.deny = deny.into_iter().collect();
    }

    pub fn is_denied(&self, mime: &str) -> bool {
        self.deny.contains(mime)
    }

    pub fn get(&self, mime: &str) -> Option<&dyn Extractor> {
        self.extractors.get(mime).map(|b| b.as_ref())
    }
}

/// Splits extracted text into blocks at blank lines. Within a block,
/// line breaks and whitespace runs collapse to single spaces.
pub fn text_blocks(text: &str) -> Vec<String> {
    let text = text.replace("\r\n", "\n").replace('\r', "\n");
    let mut blocks = Vec::new();
    let mut current: Vec<String> = Vec::new();
    for line in text.split('\n') {
        let words: Vec<&str> = line.split_whitespace().collect();
        if words.is_empty() {
            if !current.is_empty() {
                blocks.push(current.join(" "));
                current.clear();
            }
        } else {
            current.push(words.join(" "));
        }
    }
    if !current.is_empty() {
        blocks.push(current.join(" "));
    }
    blocks
}

pub fn normalize_document(record: &DocumentRecord, bytes: &[u8], registry: &ExtractorRegistry) -> NormalizedDocument {
    if registry.is_denied(&record.mime_type) {
        return NormalizedDocument::rejected(record, ExtractionStatus::Excluded, format!("denied mime type {}", record.mime_type));
    }
    let Some(extractor) = registry.get(&record.mime_type) else {
        return NormalizedDocument::rejected(record, ExtractionStatus::Excluded, format!("no extractor for {}", record.mime_type));
    };
    let fail = |reason: String| {
        tracing::warn!(file_id = %record.file_id, %reason, "extraction failed");
        NormalizedDocument::rejected(record, ExtractionStatus::Failed, reason)
    };
    if bytes.is_empty() {
        return fail("empty".into());
    }
    let extracted = std::panic::catch_unwind(std::panic::AssertUnwindSafe(|| extractor.extract(bytes)));
    let text = match extracted {
        Ok(Ok(t)) => t,
        Ok(Err(reason)) => return fail(reason),
        Err(_) => return fail("extractor panicked".into()),
    };
    let blocks = text_blocks(&text);
    if blocks.is_empty() {
        return fail("empty".into());
    }
    NormalizedDocument {
        file_id: record.file_id.clone(),
        file_name: record.file_name.clone(),
        blocks,
        extraction_status: ExtractionStatus::Ok,
        reason: None,
    }
}
