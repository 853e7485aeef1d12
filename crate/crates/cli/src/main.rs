use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Instant;

use anyhow::Result;
use clap::{Args, Parser, Subcommand};
use fast_cli::commands::{self, record_timings, SweepKind};
use fast_cli::config::{write_json, RunConfig};

#[derive(Parser)]
#[command(name = "fast", version, about = "Locate and calibrate biased knowledge in a micro masked LM")]
struct Cli {
    /// Seed for every random stage (overrides the config and corpus spec).
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Output directory.
    #[arg(long, global = true, default_value = "out")]
    out: PathBuf,
    /// JSON run configuration; flags override its values.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Synthesize the biased corpus and knowledge fixtures.
    GenCorpus {
        #[arg(long)]
        spec: Option<PathBuf>,
    },
    /// Masked-LM pre-training of the base model.
    TrainBase {
        #[arg(long)]
        corpus: PathBuf,
        /// Knowledge fixtures whose words must be in the vocabulary.
        #[arg(long)]
        knowledge: Option<PathBuf>,
        /// Continue training this checkpoint.
        #[arg(long)]
        resume: Option<PathBuf>,
        #[arg(long)]
        epochs: Option<usize>,
        #[arg(long)]
        lr: Option<f64>,
    },
    /// Causal tracing; writes aie.csv, aie.svg and aie.json.
    Locate {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        knowledge: PathBuf,
    },
    /// Train a fairness stamp and save the edited checkpoint.
    Edit {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        knowledge: PathBuf,
        /// Saved locate result; defaults to `<out>/aie.json` when present.
        #[arg(long)]
        aie: Option<PathBuf>,
        #[command(flatten)]
        edit: EditFlags,
    },
    /// Side-by-side metrics for a base and an edited checkpoint.
    Eval {
        #[arg(long)]
        base: PathBuf,
        #[arg(long)]
        edited: PathBuf,
        #[arg(long)]
        knowledge: PathBuf,
    },
    /// One edit and evaluation per layer or per stamp width.
    Sweep {
        #[arg(long, value_enum)]
        kind: SweepKind,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        knowledge: PathBuf,
        #[arg(long)]
        aie: Option<PathBuf>,
        /// Layers for a layer sweep (default: all).
        #[arg(long, value_delimiter = ',')]
        layers: Option<Vec<usize>>,
        /// Widths for a dimension sweep.
        #[arg(long, value_delimiter = ',')]
        dims: Option<Vec<usize>>,
        #[command(flatten)]
        edit: EditFlags,
    },
    /// gen-corpus, train-base, locate, edit, eval and both sweeps with the shipped config.
    Demo {
        #[arg(long)]
        no_sweeps: bool,
    },
}

#[derive(Args)]
struct EditFlags {
    #[arg(long)]
    layer: Option<usize>,
    #[arg(long)]
    d_c: Option<usize>,
    #[arg(long)]
    alpha: Option<f64>,
    #[arg(long)]
    beta: Option<f64>,
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long)]
    iters: Option<usize>,
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long)]
    prefixes: Option<usize>,
}

impl EditFlags {
    fn apply(&self, cfg: &mut RunConfig) {
        let e = &mut cfg.edit;
        if self.layer.is_some() {
            e.target_layer = self.layer;
        }
        macro_rules! set {
            ($($flag:ident => $field:ident),*) => {
                $(if let Some(v) = self.$flag { e.$field = v; })*
            };
        }
        set!(d_c => d_c, alpha => alpha, beta => beta, lr => lr, iters => iters_per_batch,
             batch_size => batch_size, prefixes => prefix_count);
    }
}

fn default_config() -> Result<RunConfig> {
    let shipped = Path::new("data/demo/config.json");
    if shipped.exists() {
        RunConfig::load(shipped)
    } else {
        Ok(RunConfig::default())
    }
}

fn run(cli: Cli) -> Result<()> {
    let mut cfg = match &cli.config {
        Some(p) => RunConfig::load(p)?,
        None => default_config()?,
    };
    if let Some(s) = cli.seed {
        cfg = cfg.with_seed(s);
    }
    let out = cli.out.as_path();
    let start = Instant::now();
    let name = match &cli.command {
        Command::GenCorpus { .. } => "gen_corpus",
        Command::TrainBase { .. } => "train_base",
        Command::Locate { .. } => "locate",
        Command::Edit { .. } => "edit",
        Command::Eval { .. } => "eval",
        Command::Sweep { kind, .. } => match kind {
            SweepKind::Layer => "sweep_layer",
            SweepKind::Dim => "sweep_dim",
        },
        Command::Demo { .. } => "demo",
    };
    let mut extra: Vec<(&str, f64)> = Vec::new();
    match cli.command {
        Command::GenCorpus { spec } => {
            let spec = spec.unwrap_or_else(|| cfg.corpus_spec.clone());
            cfg.corpus_spec = spec.clone();
            commands::gen_corpus(&spec, cli.seed, out)?;
        }
        Command::TrainBase {
            corpus,
            knowledge,
            resume,
            epochs,
            lr,
        } => {
            if let Some(e) = epochs {
                cfg.pretrain.epochs = e;
            }
            if let Some(lr) = lr {
                cfg.pretrain.lr = lr;
            }
            cfg.validate()?;
            std::fs::create_dir_all(out)?;
            let o = commands::train_base(&corpus, knowledge.as_deref(), &cfg, resume.as_deref(), &out.join("base.fstm"))?;
            write_json(&out.join("train_report.json"), &o)?;
        }
        Command::Locate { checkpoint, knowledge } => {
            commands::locate(&checkpoint, &knowledge, out)?;
        }
        Command::Edit {
            checkpoint,
            knowledge,
            aie,
            edit,
        } => {
            edit.apply(&mut cfg);
            cfg.validate()?;
            let aie = aie.unwrap_or_else(|| out.join("aie.json"));
            let o = commands::edit(&checkpoint, &knowledge, &cfg.edit, Some(&aie), out)?;
            println!(
                "layer {} | stamp parameters {} (2 x {} x {}) | checksum {:016x}",
                o.report.layer, o.report.stamp_parameters, o.report.d_c, o.report.d_model, o.checksum
            );
            if let Some(t) = o.locate_time_s {
                extra.push(("locate", t));
            }
            extra.push(("edit_stamp", o.report.wall_time_s));
        }
        Command::Eval { base, edited, knowledge } => {
            let ev = commands::eval(&base, &edited, &knowledge, out)?;
            print!("{}", commands::comparison_table(&ev));
        }
        Command::Sweep {
            kind,
            checkpoint,
            knowledge,
            aie,
            layers,
            dims,
            edit,
        } => {
            edit.apply(&mut cfg);
            if layers.is_some() {
                cfg.sweep.layers = layers;
            }
            if let Some(d) = dims {
                cfg.sweep.dims = d;
            }
            cfg.validate()?;
            let aie = aie.unwrap_or_else(|| out.join("aie.json"));
            let rows = commands::sweep(kind, &checkpoint, &knowledge, &cfg, Some(&aie), out)?;
            let failed = rows.iter().filter(|r| r.error.is_some()).count();
            println!("{} settings, {failed} failed", rows.len());
        }
        Command::Demo { no_sweeps } => {
            let o = commands::demo(&cfg, out, !no_sweeps)?;
            let s = &o.summary;
            println!("decisive layer {} | AIE {:?}", s.locate.decisive_layer, s.locate.mean_effects);
            print!(
                "{}",
                commands::comparison_table(&commands::EvalOutcome {
                    base: s.base,
                    edited: s.edited,
                    items: Vec::new(),
                })
            );
            return Ok(());
        }
    }
    cfg.write_resolved(out)?;
    extra.push((name, start.elapsed().as_secs_f64()));
    record_timings(out, name, &extra)
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
