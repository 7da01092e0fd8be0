//! Deterministic synthetic corpora for tests, benchmarks and demos.

use rand::seq::IndexedRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::dataset::EvalRecord;
use crate::ingest::{ExtractionStatus, NormalizedDocument};

const TOPICS: [&str; 12] = [
    "pharmacovigilance",
    "batch release",
    "stability testing",
    "supplier qualification",
    "cold chain",
    "label artwork",
    "complaint handling",
    "equipment calibration",
    "cleaning validation",
    "change control",
    "data integrity",
    "sterile filling",
];

const BOILERPLATE: [&str; 16] = [
    "This document is controlled and printed copies are uncontrolled.",
    "Readers should confirm they hold the current version before use.",
    "Questions about this procedure go to the local quality unit.",
    "Training on this procedure is recorded in the learning system.",
    "Deviations from this procedure require a documented rationale.",
    "Signatures are captured in the electronic document system.",
    "Superseded versions are archived by document control.",
    "The owner reviews this document at least every three years.",
    "Definitions used here follow the corporate glossary.",
    "Local procedures may add detail but may not relax requirements.",
    "Records created under this procedure are quality records.",
    "Audit findings against this procedure are tracked to closure.",
    "Translations are issued only after bilingual review.",
    "Attachments form part of this document unless stated otherwise.",
    "Responsibilities are summarised in the table of roles.",
    "Revision history is kept at the end of the document.",
];

fn doc(file_id: String, blocks: Vec<String>) -> NormalizedDocument {
    NormalizedDocument {
        file_name: format!("{file_id}.txt"),
        file_id,
        blocks,
        extraction_status: ExtractionStatus::Ok,
        reason: None,
    }
}

fn boilerplate_block(rng: &mut ChaCha8Rng, sentences: usize) -> String {
    (0..sentences).map(|_| *BOILERPLATE.choose(rng).unwrap()).collect::<Vec<_>>().join(" ")
}

/// Split-topic corpus with its evaluation questions.
///
/// Each topic has one gold procedure whose evidence sentence appears in a
/// body block and again, nearly verbatim, in an appendix, with boilerplate
/// paragraphs around both. `decoys` short notes per topic mention the topic
/// without answering the question. Fixed-size splitting packs the evidence
/// into boilerplate-heavy chunks, while sentence-similarity grouping keeps
/// it in a chunk of its own.
pub fn split_topic_corpus(decoys: usize, seed: u64) -> (Vec<NormalizedDocument>, Vec<EvalRecord>) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut docs = Vec::new();
    let mut eval = Vec::new();
    for (t, topic) in TOPICS.iter().enumerate() {
        let years = 3 + t;
        let evidence = format!("The retention period for {topic} records is {years} years from closure.");
        let appendix = format!("Appendix: the retention period for {topic} records is {years} years from closure.");
        let mut blocks = Vec::new();
        for _ in 0..6 {
            blocks.push(boilerplate_block(&mut rng, 8));
        }
        blocks.push(evidence.clone());
        for _ in 0..6 {
            blocks.push(boilerplate_block(&mut rng, 8));
        }
        blocks.push(appendix);
        blocks.push(boilerplate_block(&mut rng, 8));
        let file_id = format!("sop-{t:02}");
        eval.push(EvalRecord {
            file_name: format!("{file_id}.txt"),
            question: format!("What is the retention period for {topic} records?"),
            answer: evidence.clone(),
            answer_source: evidence,
            file_id: Some(file_id.clone()),
        });
        docs.push(doc(file_id, blocks));
        for j in 0..decoys {
            let n = rng.random_range(100..999);
            docs.push(doc(
                format!("note-{t:02}-{j:02}"),
                vec![format!("Meeting note {n}: {topic} records were discussed and the period for review is open.")],
            ));
        }
    }
    (docs, eval)
}

const WORDS: [&str; 48] = [
    "audit", "batch", "record", "review", "sample", "release", "deviation", "approval", "supplier", "quality",
    "control", "storage", "label", "training", "document", "signature", "procedure", "risk", "change", "system",
    "report", "data", "testing", "method", "limit", "retention", "archive", "inspection", "finding", "action",
    "owner", "period", "schedule", "site", "product", "material", "equipment", "cleaning", "validation",
    "protocol", "result", "trend", "complaint", "recall", "market", "customer", "filing", "authority",
];

/// Random prose documents: paragraphs of sentences drawn from a small
/// vocabulary, with a share of paragraphs repeating an earlier sentence so
/// similarity grouping has something to find.
pub fn random_documents(n: usize, seed: u64) -> Vec<NormalizedDocument> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n)
        .map(|d| {
            let mut sentences: Vec<String> = Vec::new();
            let paragraphs = rng.random_range(1..8);
            let blocks = (0..paragraphs)
                .map(|_| {
                    let count = rng.random_range(1..7);
                    (0..count)
                        .map(|_| {
                            let s = if !sentences.is_empty() && rng.random_bool(0.25) {
                                sentences.choose(&mut rng).unwrap().clone()
                            } else {
                                let len = rng.random_range(3..30);
                                let mut words: Vec<&str> = (0..len).map(|_| *WORDS.choose(&mut rng).unwrap()).collect();
                                words[0] = "The";
                                format!("{}.", words.join(" "))
                            };
                            sentences.push(s.clone());
                            s
                        })
                        .collect::<Vec<_>>()
                        .join(" ")
                })
                .collect();
            doc(format!("doc-{d:03}"), blocks)
        })
        .collect()
}
