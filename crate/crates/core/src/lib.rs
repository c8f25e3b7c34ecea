//! Triage toolkit for bug-bounty reports: corpus loading and splitting,
//! a rejection taxonomy knowledge base, embedding retrieval, scope
//! rendering, LLM prompting, evaluation metrics and reputation-bias audits.

pub mod cache;
pub mod chat;
pub mod corpus;
pub mod embedding;
pub mod evaluation;
pub mod fairness;
pub mod knowledge;
pub mod provider;
pub mod retrieval;
pub mod scope;
pub mod triage;
