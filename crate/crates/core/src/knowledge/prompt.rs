use std::ops::Range;

use crate::error::{FastError, Result};
use crate::knowledge::dataset::KnowledgeTriple;
use crate::knowledge::tokenizer::{Tokenizer, MASK_ID};

/// Relation used for the subject-perception prompt `"{subject} is a [MASK]"`.
pub const SIMPLE_RELATION: &str = "is a";

/// A token sequence with a single mask.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Prompt {
    pub tokens: Vec<usize>,
    pub mask_index: usize,
    pub subject_span: Range<usize>,
}

impl Prompt {
    /// Prepends `prefix`, shifting the mask and subject span by its length.
    pub fn with_prefix(&self, prefix: &[usize], max_seq_len: usize) -> Result<Prompt> {
        let n = prefix.len();
        let mut tokens = Vec::with_capacity(n + self.tokens.len());
        tokens.extend_from_slice(prefix);
        tokens.extend_from_slice(&self.tokens);
        check_len(&tokens, max_seq_len)?;
        Ok(Prompt {
            tokens,
            mask_index: self.mask_index + n,
            subject_span: self.subject_span.start + n..self.subject_span.end + n,
        })
    }

    pub fn subject_positions(&self) -> Vec<usize> {
        self.subject_span.clone().collect()
    }
}

fn check_len(tokens: &[usize], max_seq_len: usize) -> Result<()> {
    if tokens.len() > max_seq_len {
        return Err(FastError::Input(format!(
            "prompt of {} tokens exceeds max_seq_len {max_seq_len}",
            tokens.len()
        )));
    }
    Ok(())
}

/// `tokens(subject) ++ tokens(relation) ++ [MASK]`.
pub fn render(tokenizer: &Tokenizer, subject: &str, relation: &str, max_seq_len: usize) -> Result<Prompt> {
    let s = tokenizer.encode(subject)?;
    let r = tokenizer.encode(relation)?;
    let mut tokens = s.clone();
    tokens.extend(r);
    tokens.push(MASK_ID);
    check_len(&tokens, max_seq_len)?;
    Ok(Prompt {
        mask_index: tokens.len() - 1,
        subject_span: 0..s.len(),
        tokens,
    })
}

/// Prompt for a triple with the object slot masked.
pub fn render_prompt(tokenizer: &Tokenizer, triple: &KnowledgeTriple, max_seq_len: usize) -> Result<Prompt> {
    render(tokenizer, &triple.subject, &triple.relation, max_seq_len)
}

pub fn render_simple_prompt(tokenizer: &Tokenizer, subject: &str, max_seq_len: usize) -> Result<Prompt> {
    render(tokenizer, subject, SIMPLE_RELATION, max_seq_len)
}
