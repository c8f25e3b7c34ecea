//! Random retrieval fixtures and a brute-force reference search.

use bounty_core::corpus::Status;
use bounty_core::embedding::{test_embedder, UnitVector};
use bounty_core::retrieval::{Hit, Index, IndexEntry, RetrievalParams};
use rand::seq::SliceRandom;
use rand::Rng;

// A small vocabulary so that many texts land above the 0.8 threshold and
// identical texts produce exact similarity ties.
const WORDS: [&str; 8] = [
    "server", "banner", "version", "email", "leak", "path", "token", "debug",
];
const WEAKNESSES: [&str; 3] = ["Information Disclosure", "Clickjacking", "Open Redirect"];

pub struct Fixture {
    pub index: Index,
    pub query: UnitVector,
    pub query_id: Option<String>,
    pub weakness: String,
    pub params: RetrievalParams,
}

fn random_text<R: Rng>(rng: &mut R) -> String {
    let len = rng.gen_range(1..=4);
    (0..len)
        .map(|_| *WORDS.choose(rng).unwrap())
        .collect::<Vec<_>>()
        .join(" ")
}

fn random_status<R: Rng>(rng: &mut R) -> Status {
    match rng.gen_range(0..6) {
        0 => Status::Resolved,
        1 => Status::Informative,
        2 => Status::NotApplicable,
        3 => Status::Spam,
        4 => Status::Duplicate,
        _ => Status::Other("Needs more info".into()),
    }
}

pub fn random_fixture<R: Rng>(rng: &mut R) -> Fixture {
    let n = rng.gen_range(0..=200);
    let entries: Vec<IndexEntry> = (0..n)
        .map(|i| IndexEntry {
            report_id: format!("{:04}", rng.gen_range(0..10_000) * 1000 + i),
            weakness: WEAKNESSES.choose(rng).unwrap().to_string(),
            status: random_status(rng),
            vector: test_embedder(&random_text(rng)).unwrap(),
        })
        .collect();
    let (query, query_id) = if !entries.is_empty() && rng.gen_bool(0.5) {
        let pick = &entries[rng.gen_range(0..entries.len())];
        (pick.vector.clone(), Some(pick.report_id.clone()))
    } else {
        (test_embedder(&random_text(rng)).unwrap(), None)
    };
    let params = RetrievalParams {
        k: rng.gen_range(1..=6),
        threshold: *[0.8, 0.8, 0.5, 0.0, 1.0].choose(rng).unwrap(),
    };
    Fixture {
        index: Index::build("offline/fnv1a-token-hash-256", entries).unwrap(),
        query,
        query_id,
        weakness: WEAKNESSES.choose(rng).unwrap().to_string(),
        params,
    }
}

/// Scores every entry, filters, sorts the whole list and truncates.
pub fn naive_top_k(f: &Fixture) -> Vec<Hit> {
    let mut all: Vec<Hit> = f
        .index
        .entries()
        .iter()
        .filter(|e| e.weakness == f.weakness)
        .filter(|e| e.status != Status::Duplicate)
        .filter(|e| Some(&e.report_id) != f.query_id.as_ref())
        .map(|e| Hit {
            report_id: e.report_id.clone(),
            similarity: f
                .query
                .as_slice()
                .iter()
                .zip(e.vector.as_slice())
                .map(|(a, b)| a * b)
                .sum(),
        })
        .filter(|h| h.similarity >= f.params.threshold)
        .collect();
    all.sort_by(|a, b| {
        b.similarity
            .partial_cmp(&a.similarity)
            .unwrap()
            .then_with(|| a.report_id.cmp(&b.report_id))
    });
    all.truncate(f.params.k);
    all
}

/// Checks the hit invariants that hold regardless of ordering.
pub fn hits_respect_filters(f: &Fixture, hits: &[Hit]) -> bool {
    hits.iter().all(|h| {
        let entry = f.index.get(&h.report_id).unwrap();
        entry.weakness == f.weakness
            && entry.status != Status::Duplicate
            && Some(&h.report_id) != f.query_id.as_ref()
            && h.similarity >= f.params.threshold
    }) && hits.len() <= f.params.k
}
