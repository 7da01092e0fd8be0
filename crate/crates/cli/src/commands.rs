use std::collections::BTreeSet;
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use anyhow::{bail, Context, Result};
use serde::{Deserialize, Serialize};

use regkit_core::chunking::{read_chunk_dump, write_chunk_dump, ChunkRecord, ChunkingConfig, Strategy};
use regkit_core::dataset::{
    build_eval_dataset, build_rerank_dataset, examples_of, generate_pairs, read_jsonl, sample_eval_documents,
    stratified_sample, to_jsonl, validate_groups, EvalRecord, FixtureQaGenerator, NegativePool, QaGenerator,
    TemplateQaGenerator,
};
use regkit_core::harness::{
    chunk_corpus, embed_chunks, profile_latency, run_ablation, run_pipeline, write_run_manifest, IndexSpec,
    PipelineConfig, PipelineState, Retriever,
};
use regkit_core::index::VectorIndex;
use regkit_core::ingest::{
    normalize_document, scan_source, DocumentRecord, ExtractorRegistry, LocalFsConnector, NormalizedDocument,
    SourceConnector,
};
use regkit_core::metrics::{
    aggregate, render_report_table, write_instances_jsonl, write_report_csv, EvalInstance, Evaluator,
    HeuristicFluency, ReportRow,
};
use regkit_core::rerank::ListwiseExample;

use crate::config::{build_embedder, build_scorer, Config};
use crate::{
    AblateArgs, ChunkArgs, EvalDataArgs, EvaluateArgs, IndexCommand, IndexKindArgs, IngestArgs, ProfileArgs,
    QueryArgs, StrategyArg, SyncArgs, TrainArgs,
};

/// One line of an ingest file.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct IngestedDocument {
    pub record: DocumentRecord,
    pub document: NormalizedDocument,
}

fn open(path: &Path) -> Result<BufReader<File>> {
    Ok(BufReader::new(File::open(path).with_context(|| format!("opening {}", path.display()))?))
}

fn write_file(path: &Path, contents: &[u8]) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
    }
    std::fs::write(path, contents).with_context(|| format!("writing {}", path.display()))
}

fn print_json<T: Serialize>(value: &T) -> Result<()> {
    let mut out = std::io::stdout().lock();
    serde_json::to_writer_pretty(&mut out, value)?;
    writeln!(out)?;
    Ok(())
}

fn read_docs(path: &Path) -> Result<Vec<IngestedDocument>> {
    Ok(read_jsonl(open(path)?)?)
}

fn read_chunks(path: &Path) -> Result<Vec<ChunkRecord>> {
    Ok(read_chunk_dump(open(path)?)?)
}

fn chunking_config(config: &Config, a: &StrategyArg) -> Result<(Strategy, ChunkingConfig)> {
    let mut c = config.chunking.clone();
    if let Some(v) = a.max_tokens {
        c.max_tokens = v;
    }
    if let Some(v) = a.overlap {
        c.overlap = v;
    }
    if let Some(v) = a.theta {
        c.theta = v;
    }
    if let Some(v) = a.gamma {
        c.gamma = v;
    }
    if let Some(v) = a.window {
        c.window = v;
    }
    c.validate()?;
    Ok((a.strategy.or(config.strategy).unwrap_or(Strategy::Hisacc), c))
}

fn index_spec(config: &Config, a: &IndexKindArgs) -> Result<IndexSpec> {
    let base = config.index;
    let kind = a.kind.as_deref().unwrap_or(match base {
        IndexSpec::Flat => "flat",
        IndexSpec::Ivf { .. } => "ivf",
    });
    match kind {
        "flat" => Ok(IndexSpec::Flat),
        "ivf" => {
            let (nlist, nprobe, seed) = match base {
                IndexSpec::Ivf { nlist, nprobe, seed } => (nlist, nprobe, seed),
                IndexSpec::Flat => (None, None, 7),
            };
            Ok(IndexSpec::Ivf { nlist: a.nlist.or(nlist), nprobe: a.nprobe.or(nprobe), seed: a.seed.unwrap_or(seed) })
        }
        other => bail!("unknown index kind `{other}`, expected flat or ivf"),
    }
}

fn qa_generator(path: Option<&Path>) -> Result<Box<dyn QaGenerator>> {
    match path {
        Some(p) => Ok(Box::new(FixtureQaGenerator::from_jsonl(open(p)?)?)),
        None => Ok(Box::new(TemplateQaGenerator::default())),
    }
}

pub fn sync(config: &Config, a: SyncArgs) -> Result<()> {
    let (strategy, chunking) = chunking_config(config, &a.chunking)?;
    let pipeline = PipelineConfig { strategy, chunking, index: config.index };
    let embedder = build_embedder(&config.embedder)?;
    let mut state = PipelineState::load(&a.state)?;
    let connector = LocalFsConnector::new(&a.source);
    let run = run_pipeline(&mut state, &connector, &ExtractorRegistry::default(), embedder.as_ref(), &pipeline)?;
    state.save(&a.state)?;
    write_run_manifest(&run, &a.state)?;
    print_json(&serde_json::json!({
        "delta": run.delta,
        "embedded_chunks": run.embedded_chunks,
        "indexed_chunks": run.indexed_chunks,
        "failures": run.failures,
    }))
}

pub fn ingest(a: IngestArgs) -> Result<()> {
    let connector = LocalFsConnector::new(&a.source);
    let registry = ExtractorRegistry::default();
    let scan = scan_source(&connector)?;
    let mut docs = Vec::with_capacity(scan.records.len());
    for record in scan.records {
        let document = match connector.fetch(&record.file_id) {
            Ok(bytes) => normalize_document(&record, &bytes, &registry),
            Err(e) => {
                tracing::warn!(file_id = %record.file_id, error = %e, "fetch failed");
                continue;
            }
        };
        docs.push(IngestedDocument { record, document });
    }
    write_file(&a.out, to_jsonl(&docs)?.as_bytes())?;
    let ok = docs.iter().filter(|d| d.document.extraction_status == regkit_core::ingest::ExtractionStatus::Ok).count();
    eprintln!("{} documents ({ok} extracted, {} scan failures) -> {}", docs.len(), scan.failures.len(), a.out.display());
    Ok(())
}

pub fn chunk(config: &Config, a: ChunkArgs) -> Result<()> {
    let (strategy, chunking) = chunking_config(config, &a.chunking)?;
    let docs: Vec<NormalizedDocument> = read_docs(&a.docs)?.into_iter().map(|d| d.document).collect();
    let embedder = build_embedder(&config.embedder)?;
    let chunks = chunk_corpus(&docs, strategy, embedder.as_ref(), &chunking)?;
    let mut buf = Vec::new();
    write_chunk_dump(&mut buf, &chunks)?;
    write_file(&a.out, &buf)?;
    eprintln!("{} chunks ({}) -> {}", chunks.len(), strategy.label(), a.out.display());
    Ok(())
}

pub fn index(config: &Config, c: IndexCommand) -> Result<()> {
    let embedder = build_embedder(&config.embedder)?;
    match c {
        IndexCommand::Build { chunks, out, kind } => {
            let spec = index_spec(config, &kind)?;
            let vectors = embed_chunks(&read_chunks(&chunks)?, embedder.as_ref())?;
            let index = spec.build(vectors)?;
            index.persist(&out)?;
            eprintln!("{} chunks, {} -> {}", index.len(), if index.is_ivf() { "ivf" } else { "flat" }, out.display());
        }
        IndexCommand::Search { index, query, k, nprobe } => {
            let mut idx = VectorIndex::load(&index)?;
            if let Some(n) = nprobe {
                idx.set_nprobe(n)?;
            }
            let mut result = idx.search_topk(&embedder.embed(&query)?, k)?;
            result.query = Some(query);
            print_json(&result)?;
        }
        IndexCommand::Upsert { index, chunks } => {
            let mut idx = VectorIndex::load(&index)?;
            let vectors = embed_chunks(&read_chunks(&chunks)?, embedder.as_ref())?;
            let n = vectors.len();
            idx.upsert(vectors)?;
            idx.persist(&index)?;
            eprintln!("upserted {n} chunks, {} total", idx.len());
        }
        IndexCommand::Rebuild { index } => {
            let mut idx = VectorIndex::load(&index)?;
            idx.rebuild()?;
            idx.persist(&index)?;
            eprintln!("rebuilt {} chunks", idx.len());
        }
    }
    Ok(())
}

pub fn query(config: &Config, a: QueryArgs) -> Result<()> {
    let state = PipelineState::load(&a.state)?;
    let embedder = build_embedder(&config.embedder)?;
    let scorer = build_scorer(&config.scorer)?;
    let retriever = Retriever::new(&state.index, embedder.as_ref(), scorer.as_ref());
    print_json(&retriever.answer_retrieve(&a.question, a.k, a.rerank)?)
}

pub fn build_train_data(config: &Config, a: TrainArgs) -> Result<()> {
    let mut sampling = config.train_sampling();
    if let Some(v) = a.fraction {
        sampling.sample_fraction = v;
    }
    if let Some(v) = a.seed {
        sampling.seed = v;
    }
    if let Some(v) = a.negatives {
        sampling.negatives_per_positive = v;
    }
    if let Some(v) = a.quotas {
        sampling.quota = v;
    }
    sampling.validate()?;
    let docs = read_docs(&a.docs)?;
    let records: Vec<DocumentRecord> = docs.iter().map(|d| d.record.clone()).collect();
    let sample: BTreeSet<String> =
        stratified_sample(&records, sampling.sample_fraction, sampling.seed)?.into_iter().map(|r| r.file_id).collect();
    let sampled: Vec<NormalizedDocument> =
        docs.iter().filter(|d| sample.contains(&d.record.file_id)).map(|d| d.document.clone()).collect();
    let generator = qa_generator(a.qa.as_deref())?;
    let (pairs, skipped) = generate_pairs(&sampled, generator.as_ref(), sampling.max_pairs_per_document)?;

    let chunks = read_chunks(&a.chunks)?;
    let embedder = build_embedder(&config.embedder)?;
    let pool = NegativePool::new(&chunks, embedder.as_ref())?;
    let groups = build_rerank_dataset(&pairs, &pool, embedder.as_ref(), &sampling)?;
    let violations = validate_groups(&groups, &pool, &sampling);
    if !violations.is_empty() {
        bail!("{} constraint violations, first: {}", violations.len(), violations[0]);
    }
    let examples = examples_of(&groups);
    write_file(&a.out, to_jsonl(&examples)?.as_bytes())?;
    print_json(&serde_json::json!({
        "sampled_documents": sample.len(),
        "skipped_documents": skipped,
        "questions": groups.len(),
        "examples": examples.len(),
        "qa_generator": generator.identity(),
    }))
}

pub fn build_eval_data(config: &Config, a: EvalDataArgs) -> Result<()> {
    let train_seed = config.train_sampling().seed;
    let mut sampling = config.eval_sampling();
    if let Some(v) = a.fraction {
        sampling.sample_fraction = v;
    }
    if let Some(v) = a.seed {
        sampling.seed = v;
    }
    sampling.validate()?;
    let train: Vec<ListwiseExample> = read_jsonl(open(&a.train)?)?;
    let train_ids: BTreeSet<String> = train.iter().filter(|e| e.label == 1).map(|e| e.file_id.clone()).collect();
    let docs = read_docs(&a.docs)?;
    let records: Vec<DocumentRecord> = docs.iter().map(|d| d.record.clone()).collect();
    let sample: BTreeSet<String> = sample_eval_documents(&records, &train_ids, &sampling, train_seed)?
        .into_iter()
        .map(|r| r.file_id)
        .collect();
    let eval_docs: Vec<NormalizedDocument> =
        docs.iter().filter(|d| sample.contains(&d.record.file_id)).map(|d| d.document.clone()).collect();
    let generator = qa_generator(a.qa.as_deref())?;
    let built = build_eval_dataset(&eval_docs, &train_ids, generator.as_ref(), &sampling)?;
    write_file(&a.out, to_jsonl(&built.records)?.as_bytes())?;
    print_json(&serde_json::json!({
        "train_files": train_ids.len(),
        "sampled_documents": sample.len(),
        "skipped_documents": built.skipped,
        "records": built.records.len(),
    }))
}

pub fn evaluate(config: &Config, a: EvaluateArgs) -> Result<()> {
    let mut metrics = config.metrics;
    if let Some(t) = a.tau {
        metrics.tau = t;
    }
    let instances: Vec<EvalInstance> = read_jsonl(open(&a.instances)?)?;
    let embedder = build_embedder(&config.embedder)?;
    let evaluator = Evaluator::new(embedder.as_ref(), &HeuristicFluency, metrics)?;
    let results = evaluator.evaluate_batch(&instances);
    if let Some(out) = &a.out {
        write_file(out, to_jsonl(&results)?.as_bytes())?;
    }
    let row = ReportRow { config: "evaluate".into(), k: 0, metrics: aggregate(&results) };
    print!("{}", render_report_table(&[row], &metrics));
    Ok(())
}

pub fn ablate(config: &Config, a: AblateArgs) -> Result<()> {
    let mut ablation = config.ablation.clone();
    if let Some(k) = a.k {
        ablation.k_values = k;
    }
    if let Some(s) = a.seed {
        ablation.seed = s;
    }
    let docs = read_docs(&a.docs)?;
    let records: Vec<DocumentRecord> = docs.iter().map(|d| d.record.clone()).collect();
    let mut eval: Vec<EvalRecord> = read_jsonl(open(&a.eval)?)?;
    regkit_core::dataset::resolve_file_ids(&mut eval, &records)?;
    let docs: Vec<NormalizedDocument> = docs.into_iter().map(|d| d.document).collect();
    let embedder = build_embedder(&config.embedder)?;
    let scorer = build_scorer(&config.scorer)?;
    let report = run_ablation(&docs, &eval, embedder.as_ref(), scorer.as_ref(), &HeuristicFluency, &ablation)?;

    std::fs::create_dir_all(&a.out_dir)?;
    let mut csv = BufWriter::new(File::create(a.out_dir.join("report.csv"))?);
    write_report_csv(&report.rows, &mut csv)?;
    csv.flush()?;
    let table = render_report_table(&report.rows, &report.metrics);
    write_file(&a.out_dir.join("report.txt"), table.as_bytes())?;
    write_instances_jsonl(&report.instances, &a.out_dir.join("instances.jsonl"))?;
    print!("{table}");
    Ok(())
}

fn read_questions(path: &Path) -> Result<Vec<String>> {
    let mut out = Vec::new();
    for line in open(path)?.lines() {
        let line = line?;
        let line = line.trim();
        if line.is_empty() {
            continue;
        }
        match serde_json::from_str::<serde_json::Value>(line) {
            Ok(v) if v.get("question").and_then(|q| q.as_str()).is_some() => {
                out.push(v["question"].as_str().unwrap_or_default().to_string())
            }
            _ => out.push(line.to_string()),
        }
    }
    if out.is_empty() {
        bail!("no questions in {}", path.display());
    }
    Ok(out)
}

pub fn profile(config: &Config, a: ProfileArgs) -> Result<()> {
    let state = PipelineState::load(&a.state)?;
    let embedder = build_embedder(&config.embedder)?;
    let scorer = build_scorer(&config.scorer)?;
    let retriever = Retriever::new(&state.index, embedder.as_ref(), scorer.as_ref());
    let questions = read_questions(&a.questions)?;
    print_json(&profile_latency(&retriever, &questions, &a.k, a.rounds)?)
}
