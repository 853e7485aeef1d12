//! Pipeline stages behind each subcommand. Every stage writes its artifacts into an
//! output directory; wall-clock data goes only to `metadata.json`.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::time::{Instant, SystemTime, UNIX_EPOCH};

use anyhow::{bail, Context, Result};
use fast_core::knowledge::{generate_corpus, load_knowledge_base, read_corpus, CorpusSpec, CorpusStats, KnowledgeBase, Tokenizer};
use fast_core::localization::{aggregate, trace_pair, AieProfile, TraceResult};
use fast_core::metrics::{evaluate, ItemRecord, MetricsReport, ModelScorer};
use fast_core::model::MicroTransformer;
use fast_core::persistence::{checkpoint_checksum, load_checkpoint, save_checkpoint, Checkpoint};
use fast_core::pretrain::{train_base as pretrain_base, PretrainReport, TrainingState};
use fast_core::stamp::{default_prefix_pool, train_stamp, EditConfig, EditReport};
use fast_core::FastError;
use serde::{Deserialize, Serialize};

use crate::config::{read_json, write_json, RunConfig};
use crate::plot::{bar_chart, line_chart};

pub const METADATA_FILE: &str = "metadata.json";

/// Wall-clock record of one output directory.
#[derive(Debug, Clone, Default, Serialize, Deserialize)]
pub struct Metadata {
    pub updated_unix_s: u64,
    pub commands: Vec<String>,
    /// Seconds per stage.
    pub stages: BTreeMap<String, f64>,
}

/// Merges stage timings into `dir/metadata.json`.
pub fn record_timings(dir: &Path, command: &str, stages: &[(&str, f64)]) -> Result<()> {
    let path = dir.join(METADATA_FILE);
    let mut meta: Metadata = if path.exists() { read_json(&path)? } else { Metadata::default() };
    meta.updated_unix_s = SystemTime::now().duration_since(UNIX_EPOCH).map(|d| d.as_secs()).unwrap_or(0);
    meta.commands.push(command.to_string());
    for (k, v) in stages {
        meta.stages.insert(k.to_string(), *v);
    }
    write_json(&path, &meta)
}

fn progress(msg: impl AsRef<str>) {
    eprintln!("[fast] {}", msg.as_ref());
}

fn ensure_dir(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    fs::write(path, text).with_context(|| format!("writing {}", path.display()))
}

fn write_csv<T: Serialize>(path: &Path, rows: &[T]) -> Result<()> {
    let mut w = csv::Writer::from_path(path).with_context(|| format!("writing {}", path.display()))?;
    for r in rows {
        w.serialize(r)?;
    }
    w.flush()?;
    Ok(())
}

pub fn load_knowledge(path: &Path) -> Result<KnowledgeBase> {
    let kb = load_knowledge_base(&[path])?;
    for w in &kb.warnings {
        progress(format!("warning: {w}"));
    }
    Ok(kb)
}

fn load_base(path: &Path) -> Result<Checkpoint> {
    load_checkpoint(path).with_context(|| format!("loading checkpoint {}", path.display()))
}

// ---------------------------------------------------------------------------
// gen-corpus

pub fn gen_corpus(spec_path: &Path, seed: Option<u64>, out: &Path) -> Result<CorpusStats> {
    let mut spec = CorpusSpec::load(spec_path)?;
    if let Some(s) = seed {
        spec.seed = s;
    }
    let gen = generate_corpus(&spec)?;
    ensure_dir(out)?;
    gen.write_to(out)?;
    progress(format!(
        "corpus: {} sentences, {} pairs, {} paraphrases, {} facts",
        gen.sentences.len(),
        gen.knowledge.pairs.len(),
        gen.knowledge.paraphrases.len(),
        gen.knowledge.facts.len()
    ));
    Ok(gen.stats)
}

// ---------------------------------------------------------------------------
// train-base

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TrainOutcome {
    pub report: PretrainReport,
    pub vocab_size: usize,
    pub parameters: usize,
    pub checksum: u64,
}

/// Trains a fresh model, or continues `resume` for `cfg.pretrain.epochs` more epochs.
pub fn train_base(
    corpus: &Path,
    knowledge: Option<&Path>,
    cfg: &RunConfig,
    resume: Option<&Path>,
    checkpoint: &Path,
) -> Result<TrainOutcome> {
    let sentences = read_corpus(corpus)?;
    if sentences.is_empty() {
        bail!("corpus {} is empty", corpus.display());
    }
    let (mut model, tokenizer, state) = match resume {
        Some(p) => {
            let ck = load_base(p)?;
            progress(format!("resuming after epoch {} (loss {:.4})", ck.training.epochs_completed, ck.training.last_loss));
            (ck.model, ck.tokenizer, ck.training)
        }
        None => {
            let kb = knowledge.map(load_knowledge).transpose()?;
            let mut texts: Vec<&str> = sentences.iter().map(String::as_str).collect();
            if let Some(kb) = &kb {
                texts.extend(kb.texts());
            }
            let tokenizer = Tokenizer::build(texts);
            let mc = fast_core::model::ModelConfig {
                vocab_size: tokenizer.len(),
                ..cfg.model
            };
            let model = MicroTransformer::new(mc, cfg.seed)?;
            (
                model,
                tokenizer,
                TrainingState {
                    epochs_completed: 0,
                    last_loss: f64::NAN,
                },
            )
        }
    };
    progress(format!(
        "training {} parameters on {} sentences for {} epochs",
        model.config().param_count(),
        sentences.len(),
        cfg.pretrain.epochs
    ));
    let report = pretrain_base(&mut model, &tokenizer, &sentences, &cfg.pretrain, state)?;
    for e in &report.epochs {
        progress(format!("epoch {} loss {:.4}", e.epoch, e.loss));
    }
    progress(format!(
        "held-out mask accuracy {:.3} over {} masks",
        report.heldout_accuracy, report.heldout_masks
    ));
    let vocab_size = tokenizer.len();
    let parameters = model.config().param_count();
    let ck = Checkpoint {
        model,
        tokenizer,
        training: report.state,
    };
    save_checkpoint(&ck, checkpoint)?;
    Ok(TrainOutcome {
        report,
        vocab_size,
        parameters,
        checksum: checkpoint_checksum(checkpoint)?,
    })
}

// ---------------------------------------------------------------------------
// locate

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct LocateOutcome {
    pub profile: AieProfile,
    pub traces: Vec<TraceResult>,
    /// Pairs that could not be traced, with the reason.
    pub skipped: Vec<String>,
}

#[derive(Serialize)]
struct AieRow {
    layer: usize,
    mean_indirect_effect: f64,
    pairs: usize,
    decisive: bool,
}

#[derive(Serialize)]
struct TraceRow<'a> {
    pair: usize,
    label: &'a str,
    layer: usize,
    indirect_effect: f64,
    biased_probability: f64,
    counterfactual_probability: f64,
}

pub fn locate_model(model: &MicroTransformer, tok: &Tokenizer, kb: &KnowledgeBase) -> Result<LocateOutcome> {
    let mut traces = Vec::new();
    let mut skipped = Vec::new();
    for p in &kb.pairs {
        match trace_pair(model, tok, p) {
            Ok(t) => traces.push(t),
            Err(e @ FastError::UnsupportedTrace(_)) => {
                progress(format!("skipping: {e}"));
                skipped.push(e.to_string());
            }
            Err(e) => return Err(e.into()),
        }
    }
    if traces.is_empty() {
        bail!("no traceable pairs: {}", skipped.join("; "));
    }
    Ok(LocateOutcome {
        profile: aggregate(&traces)?,
        traces,
        skipped,
    })
}

pub fn write_locate(loc: &LocateOutcome, out: &Path) -> Result<()> {
    let p = &loc.profile;
    let rows: Vec<AieRow> = p
        .mean_effects
        .iter()
        .enumerate()
        .map(|(layer, &m)| AieRow {
            layer,
            mean_indirect_effect: m,
            pairs: p.pairs,
            decisive: layer == p.decisive_layer,
        })
        .collect();
    write_csv(&out.join("aie.csv"), &rows)?;
    let trace_rows: Vec<TraceRow> = loc
        .traces
        .iter()
        .enumerate()
        .flat_map(|(i, t)| {
            t.indirect_effects.iter().enumerate().map(move |(layer, &ie)| TraceRow {
                pair: i,
                label: &t.label,
                layer,
                indirect_effect: ie,
                biased_probability: t.biased_probability,
                counterfactual_probability: t.counterfactual_probability,
            })
        })
        .collect();
    write_csv(&out.join("traces.csv"), &trace_rows)?;
    let bars: Vec<(String, f64)> = p.mean_effects.iter().enumerate().map(|(l, &m)| (l.to_string(), m)).collect();
    let svg = bar_chart(
        &format!("Average indirect effect over {} pairs", p.pairs),
        "layer",
        "AIE",
        &bars,
        Some(p.decisive_layer),
    );
    write_text(&out.join("aie.svg"), &svg)?;
    write_json(&out.join("aie.json"), loc)
}

pub fn locate(checkpoint: &Path, knowledge: &Path, out: &Path) -> Result<LocateOutcome> {
    let ck = load_base(checkpoint)?;
    let kb = load_knowledge(knowledge)?;
    ensure_dir(out)?;
    let loc = locate_model(&ck.model.without_stamps(), &ck.tokenizer, &kb)?;
    write_locate(&loc, out)?;
    progress(format!(
        "AIE {:?}; decisive layer {}",
        loc.profile.mean_effects.iter().map(|v| format!("{v:.4}")).collect::<Vec<_>>(),
        loc.profile.decisive_layer
    ));
    Ok(loc)
}

// ---------------------------------------------------------------------------
// edit

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EditOutcome {
    pub report: EditReport,
    pub checksum: u64,
    /// Seconds spent tracing when the layer had to be located first.
    #[serde(skip)]
    pub locate_time_s: Option<f64>,
}

/// Stamp layer: explicit choice, then a saved AIE profile, then a fresh trace.
fn resolve_layer(
    explicit: Option<usize>,
    aie: Option<&Path>,
    model: &MicroTransformer,
    tok: &Tokenizer,
    kb: &KnowledgeBase,
) -> Result<(usize, Option<f64>)> {
    if let Some(l) = explicit {
        return Ok((l, None));
    }
    if let Some(p) = aie.filter(|p| p.exists()) {
        let loc: LocateOutcome = read_json(p)?;
        return Ok((loc.profile.decisive_layer, None));
    }
    let t = Instant::now();
    let loc = locate_model(model, tok, kb)?;
    Ok((loc.profile.decisive_layer, Some(t.elapsed().as_secs_f64())))
}

pub fn edit_model(
    model: &mut MicroTransformer,
    tok: &Tokenizer,
    kb: &KnowledgeBase,
    layer: usize,
    cfg: &EditConfig,
) -> Result<EditReport> {
    let pool = default_prefix_pool(tok)?;
    let (_, report) = train_stamp(model, tok, &kb.pairs, layer, cfg, &pool)?;
    Ok(report)
}

pub fn edit(
    checkpoint: &Path,
    knowledge: &Path,
    cfg: &EditConfig,
    aie: Option<&Path>,
    out: &Path,
) -> Result<EditOutcome> {
    let ck = load_base(checkpoint)?;
    let kb = load_knowledge(knowledge)?;
    kb.check_vocab(&ck.tokenizer)?;
    ensure_dir(out)?;
    let mut model = ck.model;
    let (layer, locate_time_s) = resolve_layer(cfg.target_layer, aie, &model, &ck.tokenizer, &kb)?;
    progress(format!("training a d_c={} stamp at layer {layer}", cfg.d_c));
    let report = edit_model(&mut model, &ck.tokenizer, &kb, layer, cfg)?;
    for g in &report.gaps {
        progress(format!("  {:<40} gap {:+.3} -> {:+.3}", g.label, g.before, g.after));
    }
    let path = out.join("edited.fstm");
    save_checkpoint(
        &Checkpoint {
            model,
            tokenizer: ck.tokenizer,
            training: ck.training,
        },
        &path,
    )?;
    write_json(&out.join("edit_report.json"), &report)?;
    Ok(EditOutcome {
        checksum: checkpoint_checksum(&path)?,
        report,
        locate_time_s,
    })
}

// ---------------------------------------------------------------------------
// eval

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Scores {
    pub ss: f64,
    pub ps: Option<f64>,
    pub ds: Option<f64>,
    pub lms: f64,
    pub icat: f64,
}

impl From<&MetricsReport> for Scores {
    fn from(r: &MetricsReport) -> Self {
        Scores {
            ss: r.ss,
            ps: r.ps,
            ds: r.ds,
            lms: r.lms,
            icat: r.icat,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EvalOutcome {
    pub base: Scores,
    pub edited: Scores,
    pub items: Vec<ItemRecord>,
}

#[derive(Serialize)]
struct ComparisonRow {
    metric: &'static str,
    base: Option<f64>,
    edited: Option<f64>,
}

pub fn evaluate_models(
    base: &MicroTransformer,
    edited: &MicroTransformer,
    tok: &Tokenizer,
    kb: &KnowledgeBase,
) -> Result<EvalOutcome> {
    kb.check_vocab(tok)?;
    let b = ModelScorer::new(base, tok, kb)?;
    let e = ModelScorer::new(edited, tok, kb)?;
    let base_report = evaluate(&b, &b, kb)?;
    let edited_report = evaluate(&b, &e, kb)?;
    Ok(EvalOutcome {
        base: Scores::from(&base_report),
        edited: Scores::from(&edited_report),
        items: edited_report.records,
    })
}

pub fn comparison_table(ev: &EvalOutcome) -> String {
    let cell = |v: Option<f64>| v.map_or_else(|| "-".to_string(), |v| format!("{v:.2}"));
    let mut s = format!("{:<6} {:>8} {:>8}\n", "metric", "base", "edited");
    for (name, b, e) in [
        ("SS", Some(ev.base.ss), Some(ev.edited.ss)),
        ("PS", ev.base.ps, ev.edited.ps),
        ("DS", ev.base.ds, ev.edited.ds),
        ("LMS", Some(ev.base.lms), Some(ev.edited.lms)),
        ("ICAT", Some(ev.base.icat), Some(ev.edited.icat)),
    ] {
        s += &format!("{name:<6} {:>8} {:>8}\n", cell(b), cell(e));
    }
    s
}

pub fn write_eval(ev: &EvalOutcome, out: &Path) -> Result<()> {
    let rows = [
        ComparisonRow {
            metric: "ss",
            base: Some(ev.base.ss),
            edited: Some(ev.edited.ss),
        },
        ComparisonRow {
            metric: "ps",
            base: ev.base.ps,
            edited: ev.edited.ps,
        },
        ComparisonRow {
            metric: "ds",
            base: ev.base.ds,
            edited: ev.edited.ds,
        },
        ComparisonRow {
            metric: "lms",
            base: Some(ev.base.lms),
            edited: Some(ev.edited.lms),
        },
        ComparisonRow {
            metric: "icat",
            base: Some(ev.base.icat),
            edited: Some(ev.edited.icat),
        },
    ];
    write_csv(&out.join("comparison.csv"), &rows)?;
    write_csv(&out.join("items.csv"), &ev.items)?;
    write_json(&out.join("metrics.json"), ev)
}

pub fn eval(base: &Path, edited: &Path, knowledge: &Path, out: &Path) -> Result<EvalOutcome> {
    let b = load_base(base)?;
    let e = load_base(edited)?;
    if b.tokenizer != e.tokenizer {
        bail!(
            "vocabulary mismatch: {} has {} words, {} has {}",
            base.display(),
            b.tokenizer.len(),
            edited.display(),
            e.tokenizer.len()
        );
    }
    let kb = load_knowledge(knowledge)?;
    ensure_dir(out)?;
    let ev = evaluate_models(&b.model, &e.model, &b.tokenizer, &kb)?;
    write_eval(&ev, out)?;
    Ok(ev)
}

// ---------------------------------------------------------------------------
// sweep

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "lowercase")]
pub enum SweepKind {
    Layer,
    Dim,
}

impl SweepKind {
    pub fn name(self) -> &'static str {
        match self {
            SweepKind::Layer => "layer",
            SweepKind::Dim => "dim",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub layer: usize,
    pub d_c: usize,
    pub stamp_parameters: Option<usize>,
    pub ss: Option<f64>,
    pub ps: Option<f64>,
    pub ds: Option<f64>,
    pub lms: Option<f64>,
    pub icat: Option<f64>,
    pub error: Option<String>,
}

/// One edit and evaluation per setting, all from the same unedited base and seed.
/// Failed settings are recorded and the sweep continues.
pub fn sweep_model(
    base: &MicroTransformer,
    tok: &Tokenizer,
    kb: &KnowledgeBase,
    settings: &[(usize, usize)],
    cfg: &EditConfig,
) -> Result<Vec<SweepRow>> {
    let base = base.without_stamps();
    let base_scorer = ModelScorer::new(&base, tok, kb)?;
    let mut rows = Vec::with_capacity(settings.len());
    for &(layer, d_c) in settings {
        let ec = EditConfig {
            d_c,
            target_layer: Some(layer),
            ..cfg.clone()
        };
        let mut m = base.clone();
        let run = edit_model(&mut m, tok, kb, layer, &ec).and_then(|rep| {
            let s = ModelScorer::new(&m, tok, kb)?;
            Ok((rep, evaluate(&base_scorer, &s, kb)?))
        });
        let row = match run {
            Ok((rep, r)) => SweepRow {
                layer,
                d_c,
                stamp_parameters: Some(rep.stamp_parameters),
                ss: Some(r.ss),
                ps: r.ps,
                ds: r.ds,
                lms: Some(r.lms),
                icat: Some(r.icat),
                error: None,
            },
            Err(e) => {
                progress(format!("setting layer={layer} d_c={d_c} failed: {e:#}"));
                SweepRow {
                    layer,
                    d_c,
                    stamp_parameters: None,
                    ss: None,
                    ps: None,
                    ds: None,
                    lms: None,
                    icat: None,
                    error: Some(format!("{e:#}")),
                }
            }
        };
        progress(format!(
            "  layer {layer} d_c {d_c}: SS {:?} DS {:?} LMS {:?}",
            row.ss, row.ds, row.lms
        ));
        rows.push(row);
    }
    Ok(rows)
}

pub fn sweep_settings(kind: SweepKind, cfg: &RunConfig, n_layers: usize, layer: usize) -> Result<Vec<(usize, usize)>> {
    Ok(match kind {
        SweepKind::Layer => {
            let layers = cfg.sweep.layers.clone().unwrap_or_else(|| (0..n_layers).collect());
            if let Some(&l) = layers.iter().find(|&&l| l >= n_layers) {
                bail!("sweep layer {l} out of range for a {n_layers}-layer model");
            }
            layers.into_iter().map(|l| (l, cfg.edit.d_c)).collect()
        }
        SweepKind::Dim => cfg.sweep.dims.iter().map(|&d| (layer, d)).collect(),
    })
}

pub fn write_sweep(kind: SweepKind, rows: &[SweepRow], out: &Path) -> Result<()> {
    let name = kind.name();
    write_csv(&out.join(format!("sweep_{name}.csv")), rows)?;
    let xs: Vec<String> = rows
        .iter()
        .map(|r| match kind {
            SweepKind::Layer => r.layer.to_string(),
            SweepKind::Dim => r.d_c.to_string(),
        })
        .collect();
    let col = |f: fn(&SweepRow) -> Option<f64>| rows.iter().map(|r| f(r).unwrap_or(f64::NAN)).collect::<Vec<_>>();
    let series = [
        ("SS", col(|r| r.ss)),
        ("PS", col(|r| r.ps)),
        ("DS", col(|r| r.ds)),
        ("LMS", col(|r| r.lms)),
        ("ICAT", col(|r| r.icat)),
    ];
    let (title, x_label) = match kind {
        SweepKind::Layer => ("Single-layer edits", "stamp layer"),
        SweepKind::Dim => ("Stamp hidden dimension", "d_c"),
    };
    write_text(&out.join(format!("sweep_{name}.svg")), &line_chart(title, x_label, "score", &xs, &series))
}

pub fn sweep(
    kind: SweepKind,
    checkpoint: &Path,
    knowledge: &Path,
    cfg: &RunConfig,
    aie: Option<&Path>,
    out: &Path,
) -> Result<Vec<SweepRow>> {
    let ck = load_base(checkpoint)?;
    let kb = load_knowledge(knowledge)?;
    kb.check_vocab(&ck.tokenizer)?;
    ensure_dir(out)?;
    let base = ck.model.without_stamps();
    let layer = match kind {
        SweepKind::Layer => 0,
        SweepKind::Dim => resolve_layer(cfg.edit.target_layer, aie, &base, &ck.tokenizer, &kb)?.0,
    };
    let settings = sweep_settings(kind, cfg, base.config().n_layers, layer)?;
    let rows = sweep_model(&base, &ck.tokenizer, &kb, &settings, &cfg.edit)?;
    write_sweep(kind, &rows, out)?;
    Ok(rows)
}

// ---------------------------------------------------------------------------
// demo

/// Everything the demo measured, minus wall-clock data.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct DemoSummary {
    pub corpus: CorpusStats,
    pub training: TrainOutcome,
    pub locate: AieProfile,
    pub edit_layer: usize,
    pub stamp_parameters: usize,
    pub edited_checksum: u64,
    pub base: Scores,
    pub edited: Scores,
    pub layer_sweep: Vec<SweepRow>,
    pub dim_sweep: Vec<SweepRow>,
}

#[derive(Debug, Clone)]
pub struct DemoOutcome {
    pub summary: DemoSummary,
    /// `(stage, seconds)` in execution order.
    pub timings: Vec<(String, f64)>,
    pub out: PathBuf,
}

/// gen-corpus, train-base, locate, edit, eval, then the layer and dimension sweeps.
pub fn demo(cfg: &RunConfig, out: &Path, sweeps: bool) -> Result<DemoOutcome> {
    cfg.validate()?;
    ensure_dir(out)?;
    cfg.write_resolved(out)?;
    let mut timings: Vec<(String, f64)> = Vec::new();
    let mut timed = |name: &str, t: Instant| {
        let s = t.elapsed().as_secs_f64();
        progress(format!("{name}: {s:.1}s"));
        timings.push((name.to_string(), s));
    };

    let t = Instant::now();
    let corpus_dir = out.join("corpus");
    let corpus = gen_corpus(&cfg.corpus_spec, Some(cfg.seed), &corpus_dir)?;
    timed("gen_corpus", t);
    let knowledge = corpus_dir.join("knowledge.jsonl");

    let t = Instant::now();
    let base_path = out.join("base.fstm");
    let training = train_base(&corpus_dir.join("corpus.txt"), Some(&knowledge), cfg, None, &base_path)?;
    write_json(&out.join("train_report.json"), &training)?;
    timed("train_base", t);

    let ck = load_base(&base_path)?;
    let kb = load_knowledge(&knowledge)?;
    let tok = &ck.tokenizer;

    let t = Instant::now();
    let loc = locate_model(&ck.model, tok, &kb)?;
    write_locate(&loc, out)?;
    timed("locate", t);
    let layer = cfg.edit.target_layer.unwrap_or(loc.profile.decisive_layer);

    let t = Instant::now();
    let mut edited = ck.model.clone();
    progress(format!("training a d_c={} stamp at layer {layer}", cfg.edit.d_c));
    let report = edit_model(&mut edited, tok, &kb, layer, &cfg.edit)?;
    let edited_path = out.join("edited.fstm");
    save_checkpoint(
        &Checkpoint {
            model: edited.clone(),
            tokenizer: tok.clone(),
            training: ck.training,
        },
        &edited_path,
    )?;
    write_json(&out.join("edit_report.json"), &report)?;
    timed("edit", t);

    let t = Instant::now();
    let ev = evaluate_models(&ck.model, &edited, tok, &kb)?;
    write_eval(&ev, out)?;
    timed("eval", t);
    progress(format!("\n{}", comparison_table(&ev)));

    let (mut layer_sweep, mut dim_sweep) = (Vec::new(), Vec::new());
    if sweeps {
        let n = ck.model.config().n_layers;
        let t = Instant::now();
        layer_sweep = sweep_model(&ck.model, tok, &kb, &sweep_settings(SweepKind::Layer, cfg, n, layer)?, &cfg.edit)?;
        write_sweep(SweepKind::Layer, &layer_sweep, out)?;
        timed("sweep_layer", t);
        let t = Instant::now();
        dim_sweep = sweep_model(&ck.model, tok, &kb, &sweep_settings(SweepKind::Dim, cfg, n, layer)?, &cfg.edit)?;
        write_sweep(SweepKind::Dim, &dim_sweep, out)?;
        timed("sweep_dim", t);
    }

    let summary = DemoSummary {
        corpus,
        training,
        locate: loc.profile,
        edit_layer: layer,
        stamp_parameters: report.stamp_parameters,
        edited_checksum: checkpoint_checksum(&edited_path)?,
        base: ev.base,
        edited: ev.edited,
        layer_sweep,
        dim_sweep,
    };
    write_json(&out.join("demo_summary.json"), &summary)?;
    let stage_refs: Vec<(&str, f64)> = timings.iter().map(|(k, v)| (k.as_str(), *v)).collect();
    record_timings(out, "demo", &stage_refs)?;
    Ok(DemoOutcome {
        summary,
        timings,
        out: out.to_path_buf(),
    })
}
