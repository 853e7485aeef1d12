//! Biased pairs, paraphrases and differentiation facts, plus the `knowledge.jsonl` format.
//!
//! Each file is line-delimited JSON. A non-empty file starts with a header
//! record carrying the schema version; the remaining lines are `pair`,
//! `paraphrase` or `fact` records. Paraphrase `source` indices refer to the
//! position of a pair among all pairs loaded so far, across files.

use std::collections::BTreeSet;
use std::fmt;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{FastError, Result};
use crate::knowledge::tokenizer::{split_words, Tokenizer};

pub const SCHEMA_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct KnowledgeTriple {
    pub subject: String,
    pub relation: String,
    pub object: String,
}

impl KnowledgeTriple {
    pub fn new(subject: &str, relation: &str, object: &str) -> Self {
        KnowledgeTriple {
            subject: normalize(subject),
            relation: normalize(relation),
            object: normalize(object),
        }
    }

    /// The same prompt completed by another object.
    pub fn with_object(&self, object: &str) -> Self {
        KnowledgeTriple::new(&self.subject, &self.relation, object)
    }
}

impl fmt::Display for KnowledgeTriple {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "({}, {}, {})", self.subject, self.relation, self.object)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum FlipKind {
    Subject,
    Object,
}

/// A stereotyped triple and its counterfactual twin.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct BiasedPair {
    pub stereotyped: KnowledgeTriple,
    pub counterfactual: KnowledgeTriple,
    pub irrelevant_object: String,
    pub flip: FlipKind,
}

impl BiasedPair {
    pub fn new(s1: &str, s2: &str, r: &str, o1: &str, o2: &str, o_ir: &str, flip: FlipKind) -> Self {
        BiasedPair {
            stereotyped: KnowledgeTriple::new(s1, r, o1),
            counterfactual: KnowledgeTriple::new(s2, r, o2),
            irrelevant_object: normalize(o_ir),
            flip,
        }
    }

    pub fn label(&self) -> String {
        format!(
            "{} / {} {} {}",
            self.stereotyped.subject,
            self.counterfactual.subject,
            self.stereotyped.relation,
            self.stereotyped.object
        )
    }

    fn validate(&self) -> std::result::Result<(), String> {
        let (k1, k2) = (&self.stereotyped, &self.counterfactual);
        if k1.relation.is_empty() || k1.subject.is_empty() || k2.subject.is_empty() {
            return Err("empty subject or relation".into());
        }
        if k1.relation != k2.relation {
            return Err("relations differ".into());
        }
        for o in [&k1.object, &k2.object, &self.irrelevant_object] {
            if word_count(o) != 1 {
                return Err(format!("object `{o}` is not a single token"));
            }
        }
        match self.flip {
            FlipKind::Subject => {
                if k1.subject == k2.subject || k1.object != k2.object {
                    return Err("subject flip must change the subject and keep the object".into());
                }
                let (n1, n2) = (word_count(&k1.subject), word_count(&k2.subject));
                if n1 != n2 {
                    return Err(format!(
                        "subjects `{}` and `{}` tokenize to {n1} vs {n2} tokens",
                        k1.subject, k2.subject
                    ));
                }
            }
            FlipKind::Object => {
                if k1.subject != k2.subject || k1.object == k2.object {
                    return Err("object flip must keep the subject and change the object".into());
                }
            }
        }
        if self.irrelevant_object == k1.object || self.irrelevant_object == k2.object {
            return Err("irrelevant object coincides with a scored object".into());
        }
        Ok(())
    }
}

/// A pair whose relation has been reworded.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ParaphrasePair {
    pub source: usize,
    pub stereotyped: KnowledgeTriple,
    pub counterfactual: KnowledgeTriple,
}

/// Commonsense fact about a subject that editing must not disturb.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct DifferentiationFact {
    pub subject: String,
    pub relation: String,
    pub correct_object: String,
    pub distractors: Vec<String>,
}

impl DifferentiationFact {
    pub fn candidates(&self) -> impl Iterator<Item = &str> {
        std::iter::once(self.correct_object.as_str()).chain(self.distractors.iter().map(String::as_str))
    }
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct KnowledgeBase {
    pub pairs: Vec<BiasedPair>,
    pub paraphrases: Vec<ParaphrasePair>,
    pub facts: Vec<DifferentiationFact>,
    /// Non-fatal findings from loading, e.g. duplicate records.
    pub warnings: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum Record {
    Header {
        schema_version: u32,
    },
    Pair {
        s1: String,
        s2: String,
        r: String,
        o1: String,
        o2: String,
        o_ir: String,
        flip: FlipKind,
    },
    Paraphrase {
        source: usize,
        r: String,
    },
    Fact {
        s: String,
        r: String,
        o: String,
        distractors: Vec<String>,
    },
}

pub(crate) fn normalize(text: &str) -> String {
    split_words(text).collect::<Vec<_>>().join(" ")
}

fn word_count(text: &str) -> usize {
    text.split_whitespace().count()
}

impl KnowledgeBase {
    /// Builds and validates a base from records; `origin` labels error messages.
    pub fn from_records(records: impl IntoIterator<Item = Record>) -> Result<Self> {
        let mut kb = KnowledgeBase::default();
        let mut pending_paraphrases = Vec::new();
        for rec in records {
            match rec {
                Record::Header { schema_version } => check_version(schema_version)?,
                Record::Pair {
                    s1,
                    s2,
                    r,
                    o1,
                    o2,
                    o_ir,
                    flip,
                } => {
                    let pair = BiasedPair::new(&s1, &s2, &r, &o1, &o2, &o_ir, flip);
                    pair.validate().map_err(|e| {
                        FastError::Validation(format!("pair {} `{}`: {e}", kb.pairs.len(), pair.label()))
                    })?;
                    kb.pairs.push(pair);
                }
                Record::Paraphrase { source, r } => pending_paraphrases.push((source, r)),
                Record::Fact { s, r, o, distractors } => kb.facts.push(DifferentiationFact {
                    subject: normalize(&s),
                    relation: normalize(&r),
                    correct_object: normalize(&o),
                    distractors: distractors.iter().map(|d| normalize(d)).collect(),
                }),
            }
        }
        for (source, r) in pending_paraphrases {
            let pair = kb.pairs.get(source).ok_or_else(|| {
                FastError::Validation(format!("paraphrase source {source} does not name a pair"))
            })?;
            let r = normalize(&r);
            if r.is_empty() || r == pair.stereotyped.relation {
                return Err(FastError::Validation(format!(
                    "paraphrase of pair {source} must reword the relation `{}`",
                    pair.stereotyped.relation
                )));
            }
            kb.paraphrases.push(ParaphrasePair {
                source,
                stereotyped: KnowledgeTriple::new(&pair.stereotyped.subject, &r, &pair.stereotyped.object),
                counterfactual: KnowledgeTriple::new(
                    &pair.counterfactual.subject,
                    &r,
                    &pair.counterfactual.object,
                ),
            });
        }
        kb.validate_facts()?;
        kb.collect_warnings();
        Ok(kb)
    }

    fn validate_facts(&self) -> Result<()> {
        let subjects = self.subjects();
        let prompts = self.pair_prompts();
        for (i, f) in self.facts.iter().enumerate() {
            let fail = |msg: String| Err(FastError::Validation(format!("fact {i} ({}, {}): {msg}", f.subject, f.relation)));
            if f.distractors.is_empty() {
                return fail("needs at least one distractor".into());
            }
            if let Some(o) = f.candidates().find(|o| word_count(o) != 1) {
                return fail(format!("object `{o}` is not a single token"));
            }
            if f.distractors.contains(&f.correct_object) {
                return fail("distractor equals the correct object".into());
            }
            if !subjects.contains(&f.subject) {
                return fail("subject does not occur among the biased pairs".into());
            }
            if prompts.contains(&(f.subject.clone(), f.relation.clone())) {
                return fail("prompt collides with a biased-pair prompt".into());
            }
        }
        Ok(())
    }

    fn collect_warnings(&mut self) {
        let mut seen = BTreeSet::new();
        for (i, p) in self.pairs.iter().enumerate() {
            if !seen.insert((&p.stereotyped, &p.counterfactual)) {
                self.warnings.push(format!("pair {i} duplicates an earlier pair"));
            }
        }
        let mut seen = BTreeSet::new();
        for (i, f) in self.facts.iter().enumerate() {
            if !seen.insert((&f.subject, &f.relation)) {
                self.warnings.push(format!("fact {i} duplicates an earlier fact prompt"));
            }
        }
    }

    /// Distinct subjects of the biased pairs, in first-seen order.
    pub fn subjects(&self) -> Vec<String> {
        let mut out: Vec<String> = Vec::new();
        for p in &self.pairs {
            for s in [&p.stereotyped.subject, &p.counterfactual.subject] {
                if !out.contains(s) {
                    out.push(s.clone());
                }
            }
        }
        out
    }

    fn pair_prompts(&self) -> BTreeSet<(String, String)> {
        self.pairs
            .iter()
            .flat_map(|p| [&p.stereotyped, &p.counterfactual])
            .map(|k| (k.subject.clone(), k.relation.clone()))
            .collect()
    }

    /// Every word that must be in the vocabulary.
    pub fn texts(&self) -> Vec<&str> {
        let mut out = Vec::new();
        for p in &self.pairs {
            for k in [&p.stereotyped, &p.counterfactual] {
                out.extend([k.subject.as_str(), k.relation.as_str(), k.object.as_str()]);
            }
            out.push(p.irrelevant_object.as_str());
        }
        for p in &self.paraphrases {
            out.push(p.stereotyped.relation.as_str());
        }
        for f in &self.facts {
            out.extend([f.subject.as_str(), f.relation.as_str()]);
            out.extend(f.candidates());
        }
        out
    }

    pub fn check_vocab(&self, tokenizer: &Tokenizer) -> Result<()> {
        for t in self.texts() {
            tokenizer.encode(t)?;
        }
        Ok(())
    }

    pub fn to_records(&self) -> Vec<Record> {
        let mut out = vec![Record::Header {
            schema_version: SCHEMA_VERSION,
        }];
        out.extend(self.pairs.iter().map(|p| Record::Pair {
            s1: p.stereotyped.subject.clone(),
            s2: p.counterfactual.subject.clone(),
            r: p.stereotyped.relation.clone(),
            o1: p.stereotyped.object.clone(),
            o2: p.counterfactual.object.clone(),
            o_ir: p.irrelevant_object.clone(),
            flip: p.flip,
        }));
        out.extend(self.paraphrases.iter().map(|p| Record::Paraphrase {
            source: p.source,
            r: p.stereotyped.relation.clone(),
        }));
        out.extend(self.facts.iter().map(|f| Record::Fact {
            s: f.subject.clone(),
            r: f.relation.clone(),
            o: f.correct_object.clone(),
            distractors: f.distractors.clone(),
        }));
        out
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut buf = Vec::new();
        for rec in self.to_records() {
            serde_json::to_writer(&mut buf, &rec).expect("records serialize");
            buf.push(b'\n');
        }
        let mut f = fs::File::create(path).map_err(|e| FastError::io(path, e))?;
        f.write_all(&buf).map_err(|e| FastError::io(path, e))
    }
}

fn check_version(v: u32) -> Result<()> {
    if v != SCHEMA_VERSION {
        return Err(FastError::Validation(format!(
            "knowledge schema version {v} is not supported (expected {SCHEMA_VERSION})"
        )));
    }
    Ok(())
}

pub fn parse_records(path: &Path, text: &str) -> Result<Vec<Record>> {
    let mut out = Vec::new();
    for (i, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let rec: Record = serde_json::from_str(line).map_err(|e| FastError::Parse {
            path: path.to_path_buf(),
            line: i + 1,
            reason: e.to_string(),
        })?;
        let is_header = matches!(rec, Record::Header { .. });
        if out.is_empty() != is_header {
            return Err(FastError::Parse {
                path: path.to_path_buf(),
                line: i + 1,
                reason: "a header record must come first, exactly once".into(),
            });
        }
        out.push(rec);
    }
    Ok(out)
}

/// Loads and validates Ω_S, Ω_P and Ω_D from one or more files.
pub fn load_knowledge_base<P: AsRef<Path>>(paths: &[P]) -> Result<KnowledgeBase> {
    let mut records = Vec::new();
    for p in paths {
        let p: PathBuf = p.as_ref().to_path_buf();
        let text = fs::read_to_string(&p).map_err(|e| FastError::io(&p, e))?;
        records.extend(parse_records(&p, &text)?);
    }
    KnowledgeBase::from_records(records)
}
