//! Inputs behind the stored prompt goldens in `tests/golden/`.

use bounty_core::corpus::{parse_corpus, Report};
use bounty_core::knowledge::{default_taxonomy, TaxonomyEntry};
use bounty_core::scope::{parse_scopes, render_scope_block, scope_for};
use bounty_core::triage::{build_prompt, Reference, Setting};

const REPORTS: &str = r#"{"id": "q1", "title": "Server version disclosed in response headers", "body": "The Server response header on https://app.example.com reveals nginx/1.18.0.", "weakness": "Information Disclosure", "program": "Example Corp", "status": "Resolved", "reporter": {"name": "alice", "reputation": 120}}
{"id": "k1", "title": "Nginx version in Server header", "body": "The Server header discloses the exact nginx version number.", "weakness": "Information Disclosure", "program": "Example Corp", "status": "Informative", "reporter": {"name": "bob", "reputation": 15}}
{"id": "k2", "title": "Private bucket listing exposes customer invoices", "body": "An unauthenticated request lists every object in the invoices bucket.", "weakness": "Information Disclosure", "program": "Example Corp", "status": "Resolved", "reporter": {"name": "carol", "reputation": 900}}"#;

const SCOPES: &str = r#"{"Example Corp": [
    {"asset_name": "app.example.com", "asset_type": "Domain", "in_scope": true},
    {"asset_name": "legacy.example.com", "asset_type": "Domain", "in_scope": false}
]}"#;

/// Golden files end with a newline; prompts do not.
pub fn read_golden(setting: Setting) -> String {
    let text = match setting {
        Setting::Baseline => include_str!("../golden/baseline.txt"),
        Setting::WithScope => include_str!("../golden/scope.txt"),
        Setting::WithTaxRag => include_str!("../golden/tax-rag.txt"),
        Setting::WithTaxRagAndScope => include_str!("../golden/tax-rag+scope.txt"),
    };
    text.strip_suffix('\n').unwrap_or(text).to_string()
}

fn entry<'a>(taxonomy: &'a [TaxonomyEntry], category: &str) -> &'a TaxonomyEntry {
    taxonomy.iter().find(|e| e.category == category).expect("category")
}

pub fn render(setting: Setting) -> String {
    let reports: Vec<Report> = parse_corpus(REPORTS).unwrap().reports;
    let taxonomy = default_taxonomy();
    let scopes = parse_scopes(SCOPES).unwrap();
    let query = &reports[0];
    let scope_block = setting
        .uses_scope()
        .then(|| render_scope_block(scope_for(query, &scopes).unwrap()).unwrap());
    // The valid reference carries a tag too; the prompt must drop it.
    let references = [
        Reference {
            report: &reports[1],
            similarity: 0.93,
            taxonomy: Some(entry(&taxonomy, "Version Disclosure Related")),
        },
        Reference {
            report: &reports[2],
            similarity: 0.81,
            taxonomy: Some(entry(&taxonomy, "Risk Assessment")),
        },
    ];
    build_prompt(
        setting,
        query,
        scope_block.as_deref(),
        setting.uses_retrieval().then_some(&references[..]),
    )
    .unwrap()
}
