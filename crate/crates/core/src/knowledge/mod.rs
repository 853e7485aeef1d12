//! Biased-knowledge data model, tokenizer, prompt rendering and corpus synthesis.

pub mod corpus;
pub mod dataset;
pub mod prompt;
pub mod tokenizer;

pub use corpus::{generate_corpus, read_corpus, CorpusSpec, CorpusStats, GeneratedCorpus, DEFAULT_PREFIXES};
pub use dataset::{
    load_knowledge_base, BiasedPair, DifferentiationFact, FlipKind, KnowledgeBase, KnowledgeTriple,
    ParaphrasePair, Record,
};
pub use prompt::{render, render_prompt, render_simple_prompt, Prompt};
pub use tokenizer::{Tokenizer, MASK_ID, PAD_ID, UNK_ID};
