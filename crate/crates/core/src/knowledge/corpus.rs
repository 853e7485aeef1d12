//! Deterministic synthetic corpus with injected stereotyped associations.
//!
//! Every subject pair `(a, b)` is split into two sides. For each bias relation
//! with objects `(x, y)`, side `a` is completed with `x` at rate `rho` and side
//! `b` with `y` at the same rate. Paraphrased relations follow the same skew.
//! Facts are always completed with their correct object, and filler templates
//! are drawn uniformly for every subject so they carry no skew.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{FastError, Result};
use crate::knowledge::dataset::{normalize, BiasedPair, DifferentiationFact, FlipKind, KnowledgeBase, ParaphrasePair, KnowledgeTriple};

/// Context phrases prepended to prompts during stamp training and sprinkled into the corpus.
pub const DEFAULT_PREFIXES: [&str; 8] = [
    "my father told me that",
    "i heard that",
    "people often say that",
    "it is known that",
    "they told me that",
    "i read that",
    "we learned that",
    "someone said that",
];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BiasRelation {
    pub relation: String,
    pub paraphrase: String,
    /// `[object favoured by side a, object favoured by side b]`.
    pub objects: [String; 2],
    pub irrelevant: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FactSpec {
    pub subject: String,
    pub relation: String,
    pub object: String,
    pub distractors: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FillerSpec {
    pub relation: String,
    pub objects: Vec<String>,
}

/// Relative weights of sentence categories and the share of prefixed sentences.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CorpusMix {
    pub bias: f64,
    pub paraphrase: f64,
    pub fact: f64,
    pub filler: f64,
    pub prefix_rate: f64,
}

impl Default for CorpusMix {
    fn default() -> Self {
        CorpusMix {
            bias: 0.45,
            paraphrase: 0.15,
            fact: 0.15,
            filler: 0.25,
            prefix_rate: 0.15,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CorpusSpec {
    pub seed: u64,
    pub rho: f64,
    pub n_sentences: usize,
    pub subject_pairs: Vec<[String; 2]>,
    pub relations: Vec<BiasRelation>,
    #[serde(default)]
    pub facts: Vec<FactSpec>,
    #[serde(default)]
    pub fillers: Vec<FillerSpec>,
    #[serde(default = "default_prefixes")]
    pub prefixes: Vec<String>,
    #[serde(default)]
    pub mix: CorpusMix,
}

fn default_prefixes() -> Vec<String> {
    DEFAULT_PREFIXES.iter().map(|s| s.to_string()).collect()
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct Cooccurrence {
    pub total: usize,
    pub stereotyped: usize,
    pub ratio: f64,
}

impl Cooccurrence {
    fn add(&mut self, stereotyped: bool) {
        self.total += 1;
        self.stereotyped += stereotyped as usize;
        self.ratio = self.stereotyped as f64 / self.total as f64;
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct CorpusStats {
    pub n_sentences: usize,
    pub prefixed: usize,
    pub by_category: BTreeMap<String, usize>,
    /// Stereotyped share over all bias sentences (original relations only).
    pub cooccurrence: Cooccurrence,
    pub paraphrase_cooccurrence: Cooccurrence,
    /// Keyed by `"subject | relation"`.
    pub per_prompt: BTreeMap<String, Cooccurrence>,
}

#[derive(Debug, Clone)]
pub struct GeneratedCorpus {
    pub sentences: Vec<String>,
    pub knowledge: KnowledgeBase,
    pub stats: CorpusStats,
}

impl CorpusSpec {
    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| FastError::io(path, e))?;
        serde_json::from_str(&text).map_err(|e| FastError::Parse {
            path: path.to_path_buf(),
            line: e.line(),
            reason: e.to_string(),
        })
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.rho > 0.5 && self.rho <= 1.0) {
            return Err(FastError::Spec(format!(
                "rho = {} must lie in (0.5, 1]; otherwise no skew is learnable",
                self.rho
            )));
        }
        if self.n_sentences == 0 {
            return Err(FastError::Spec("n_sentences must be positive".into()));
        }
        if self.subject_pairs.is_empty() || self.relations.is_empty() {
            return Err(FastError::Spec("need at least one subject pair and one relation".into()));
        }
        for [a, b] in &self.subject_pairs {
            if a.split_whitespace().count() != b.split_whitespace().count() {
                return Err(FastError::Spec(format!("subjects `{a}` and `{b}` differ in token count")));
            }
        }
        let m = self.mix;
        let weights = [m.bias, m.paraphrase, m.fact, m.filler];
        if weights.iter().any(|w| *w < 0.0) || weights.iter().sum::<f64>() <= 0.0 || !(0.0..=1.0).contains(&m.prefix_rate) {
            return Err(FastError::Spec(format!("invalid mix {m:?}")));
        }
        if m.fact > 0.0 && self.facts.is_empty() || m.filler > 0.0 && self.fillers.is_empty() {
            return Err(FastError::Spec("mix weights reference empty fact or filler lists".into()));
        }
        if m.prefix_rate > 0.0 && self.prefixes.is_empty() {
            return Err(FastError::Spec("prefix_rate > 0 with an empty prefix pool".into()));
        }
        Ok(())
    }

    fn all_subjects(&self) -> Vec<&str> {
        self.subject_pairs
            .iter()
            .flat_map(|p| [p[0].as_str(), p[1].as_str()])
            .collect()
    }

    /// Ω_S, Ω_P and Ω_D matching this corpus. Relation `i` is paired with subject
    /// pair `i mod n` in both directions, giving two biased pairs per relation.
    pub fn knowledge_base(&self) -> Result<KnowledgeBase> {
        let mut kb = KnowledgeBase::default();
        for (i, rel) in self.relations.iter().enumerate() {
            let [a, b] = &self.subject_pairs[i % self.subject_pairs.len()];
            for (s1, s2, o) in [(a, b, &rel.objects[0]), (b, a, &rel.objects[1])] {
                kb.pairs.push(BiasedPair::new(s1, s2, &rel.relation, o, o, &rel.irrelevant, FlipKind::Subject));
                let source = kb.pairs.len() - 1;
                kb.paraphrases.push(ParaphrasePair {
                    source,
                    stereotyped: KnowledgeTriple::new(s1, &rel.paraphrase, o),
                    counterfactual: KnowledgeTriple::new(s2, &rel.paraphrase, o),
                });
            }
        }
        kb.facts = self
            .facts
            .iter()
            .map(|f| DifferentiationFact {
                subject: normalize(&f.subject),
                relation: normalize(&f.relation),
                correct_object: normalize(&f.object),
                distractors: f.distractors.iter().map(|d| normalize(d)).collect(),
            })
            .collect();
        // Round-trip through the record path so the fixture obeys every loader check.
        KnowledgeBase::from_records(kb.to_records())
    }
}

/// Pure function of `spec`, seed included.
pub fn generate_corpus(spec: &CorpusSpec) -> Result<GeneratedCorpus> {
    spec.validate()?;
    let knowledge = spec.knowledge_base()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let m = spec.mix;
    let weights = [m.bias, m.paraphrase, m.fact, m.filler];
    let total_w: f64 = weights.iter().sum();
    let subjects = spec.all_subjects();
    let mut stats = CorpusStats {
        n_sentences: spec.n_sentences,
        ..CorpusStats::default()
    };
    let mut sentences = Vec::with_capacity(spec.n_sentences);

    for _ in 0..spec.n_sentences {
        let mut u = rng.random::<f64>() * total_w;
        let mut category = 3;
        for (c, w) in weights.iter().enumerate() {
            if u < *w {
                category = c;
                break;
            }
            u -= w;
        }
        let body = match category {
            0 | 1 => {
                let pair = &spec.subject_pairs[rng.random_range(0..spec.subject_pairs.len())];
                let side = rng.random_range(0..2usize);
                let rel = &spec.relations[rng.random_range(0..spec.relations.len())];
                let stereotyped = rng.random::<f64>() < spec.rho;
                let object = &rel.objects[if stereotyped { side } else { 1 - side }];
                let relation = if category == 0 { &rel.relation } else { &rel.paraphrase };
                let subject = &pair[side];
                if category == 0 {
                    stats.cooccurrence.add(stereotyped);
                    stats
                        .per_prompt
                        .entry(format!("{} | {}", normalize(subject), normalize(relation)))
                        .or_default()
                        .add(stereotyped);
                } else {
                    stats.paraphrase_cooccurrence.add(stereotyped);
                }
                format!("{subject} {relation} {object}")
            }
            2 => {
                let f = &spec.facts[rng.random_range(0..spec.facts.len())];
                format!("{} {} {}", f.subject, f.relation, f.object)
            }
            _ => {
                let f = &spec.fillers[rng.random_range(0..spec.fillers.len())];
                let subject = subjects[rng.random_range(0..subjects.len())];
                let object = &f.objects[rng.random_range(0..f.objects.len())];
                format!("{subject} {} {object}", f.relation)
            }
        };
        let name = ["bias", "paraphrase", "fact", "filler"][category];
        *stats.by_category.entry(name.to_string()).or_default() += 1;
        let sentence = if m.prefix_rate > 0.0 && rng.random::<f64>() < m.prefix_rate {
            stats.prefixed += 1;
            let prefix = &spec.prefixes[rng.random_range(0..spec.prefixes.len())];
            format!("{prefix} {body}")
        } else {
            body
        };
        sentences.push(normalize(&sentence));
    }

    Ok(GeneratedCorpus {
        sentences,
        knowledge,
        stats,
    })
}

impl GeneratedCorpus {
    pub fn corpus_text(&self) -> String {
        let mut s = self.sentences.join("\n");
        s.push('\n');
        s
    }

    /// Writes `corpus.txt`, `knowledge.jsonl` and `stats.json` into `dir`.
    pub fn write_to(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir).map_err(|e| FastError::io(dir, e))?;
        let corpus = dir.join("corpus.txt");
        fs::write(&corpus, self.corpus_text()).map_err(|e| FastError::io(&corpus, e))?;
        self.knowledge.save(&dir.join("knowledge.jsonl"))?;
        let stats = dir.join("stats.json");
        let json = serde_json::to_string_pretty(&self.stats).expect("stats serialize");
        fs::write(&stats, json + "\n").map_err(|e| FastError::io(&stats, e))
    }
}

pub fn read_corpus(path: &Path) -> Result<Vec<String>> {
    let text = fs::read_to_string(path).map_err(|e| FastError::io(path, e))?;
    Ok(text
        .lines()
        .map(normalize)
        .filter(|l| !l.is_empty())
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn spec(rho: f64, n: usize, seed: u64) -> CorpusSpec {
        CorpusSpec {
            seed,
            rho,
            n_sentences: n,
            subject_pairs: vec![["man".into(), "woman".into()]],
            relations: vec![BiasRelation {
                relation: "is good at".into(),
                paraphrase: "is skilled at".into(),
                objects: ["math".into(), "art".into()],
                irrelevant: "spoon".into(),
            }],
            facts: vec![FactSpec {
                subject: "man".into(),
                relation: "has a".into(),
                object: "beard".into(),
                distractors: vec!["tail".into()],
            }],
            fillers: vec![FillerSpec {
                relation: "walks to the".into(),
                objects: vec!["park".into(), "store".into()],
            }],
            prefixes: default_prefixes(),
            mix: CorpusMix::default(),
        }
    }

    #[test]
    fn rho_boundary_rejected() {
        assert!(matches!(generate_corpus(&spec(0.5, 10, 1)), Err(FastError::Spec(_))));
        assert!(generate_corpus(&spec(1.2, 10, 1)).is_err());
        assert!(generate_corpus(&spec(1.0, 10, 1)).is_ok());
    }

    #[test]
    fn same_seed_same_corpus() {
        let a = generate_corpus(&spec(0.9, 500, 3)).unwrap();
        let b = generate_corpus(&spec(0.9, 500, 3)).unwrap();
        assert_eq!(a.corpus_text(), b.corpus_text());
        let c = generate_corpus(&spec(0.9, 500, 4)).unwrap();
        assert_ne!(a.corpus_text(), c.corpus_text());
    }

    #[test]
    fn cooccurrence_ratio_tracks_rho() {
        let g = generate_corpus(&spec(0.9, 20_000, 7)).unwrap();
        // Count directly from the emitted text rather than trusting the stats.
        let (mut total, mut stereo) = (0usize, 0usize);
        for s in &g.sentences {
            let words: Vec<&str> = s.split(' ').collect();
            let Some(pos) = words.windows(3).position(|w| w == ["is", "good", "at"]) else { continue };
            let (subject, object) = (words[pos - 1], words[pos + 3]);
            total += 1;
            stereo += ((subject == "man") == (object == "math")) as usize;
        }
        let ratio = stereo as f64 / total as f64;
        assert!((ratio - 0.9).abs() <= 0.02, "ratio {ratio}");
        assert_eq!(total, g.stats.cooccurrence.total);
        assert_eq!(stereo, g.stats.cooccurrence.stereotyped);
    }

    #[test]
    fn fixture_pairs_are_mirrored() {
        let kb = spec(0.9, 10, 1).knowledge_base().unwrap();
        assert_eq!(kb.pairs.len(), 2);
        assert_eq!(kb.pairs[0].stereotyped, KnowledgeTriple::new("man", "is good at", "math"));
        assert_eq!(kb.pairs[1].stereotyped, KnowledgeTriple::new("woman", "is good at", "art"));
        assert_eq!(kb.paraphrases.len(), 2);
        assert_eq!(kb.facts.len(), 1);
    }
}
