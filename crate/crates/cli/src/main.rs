use std::fs::File;
use std::io::{BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};
use serde::Serialize;
use taxoclap::corpus::{check_split_invariants, generate_corpus, Split};
use taxoclap::eval::{
    export_embeddings_2d, write_projection, zero_shot_classify, EvalClip, MetricsReport,
    ZeroShotScores,
};
use taxoclap::model::{
    read_checkpoint, write_checkpoint, CheckpointSidecar, EncoderParams, CHECKPOINT_VERSION,
};
use taxoclap::optim::{write_loss_log, TemplateMode};
use taxoclap::pipeline::{
    checked_splits, read_corpus, read_split_file, write_corpus, write_split_file, Dataset,
    RunConfig, WavDir,
};
use taxoclap::taxonomy::{PromptTemplate, TaxonRecord};
use taxoclap::{Error, Result};

#[derive(Parser, Debug)]
#[command(name = "taxoclap", version, about = "Taxonomy-aware audio-text contrastive pipeline")]
struct Cli {
    /// TOML (.toml) or JSON run configuration; flags override its values.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Base configuration when no --config is given.
    #[arg(long, global = true, value_enum, default_value_t = Preset::Desk)]
    preset: Preset,
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Worker threads; 0 uses every available core.
    #[arg(long, global = true, default_value_t = 0)]
    threads: usize,
    /// Directory receiving every artifact.
    #[arg(long, global = true, default_value = "out")]
    out: PathBuf,
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum Preset {
    /// 16 kHz, 3 s crops.
    Desk,
    /// 48 kHz, 10 s crops.
    Paper,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
enum SplitArg {
    Train,
    Test,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Generate the synthetic corpus (tables and WAVs).
    Synth,
    /// Build train/val/test splits.
    Split,
    /// Train both encoders.
    Train {
        /// mixed, shuffled-tax or a template name (Com, Sci, Tax, SciCom, TaxCom).
        #[arg(long)]
        template_mode: Option<TemplateMode>,
        #[arg(long)]
        epochs: Option<usize>,
        #[arg(long)]
        lr: Option<f64>,
    },
    /// Zero-shot classification metrics.
    Eval {
        /// Template to score; repeatable. Defaults to the configured list.
        #[arg(long)]
        template: Vec<PromptTemplate>,
        /// Clips to classify; candidates are the species of that split.
        #[arg(long, value_enum, default_value_t = SplitArg::Test)]
        split: SplitArg,
    },
    /// Linear trait probes on frozen audio embeddings.
    Probe,
    /// Rank agreement among species-level errors.
    Hierarchy {
        #[arg(long)]
        template: Option<PromptTemplate>,
    },
    /// 2-D projection of audio embeddings.
    ExportEmb {
        #[arg(long, value_enum, default_value_t = SplitArg::Test)]
        split: SplitArg,
        /// Also write the raw embeddings.
        #[arg(long)]
        raw: bool,
    },
}

struct Layout {
    out: PathBuf,
    corpus: PathBuf,
    checkpoint: PathBuf,
    reports: PathBuf,
}

impl Layout {
    fn new(out: &Path, cfg: &RunConfig) -> Self {
        let p = &cfg.paths;
        Layout {
            out: out.to_path_buf(),
            corpus: p.corpus_dir.clone().unwrap_or_else(|| out.join("corpus")),
            checkpoint: p.checkpoint.clone().unwrap_or_else(|| out.join("model.txcl")),
            reports: p.reports_dir.clone().unwrap_or_else(|| out.join("reports")),
        }
    }

    fn splits(&self) -> PathBuf {
        self.out.join("splits.csv")
    }

    fn sidecar(&self) -> PathBuf {
        self.checkpoint.with_extension("json")
    }
}

#[derive(Serialize)]
struct RunRecord<'a> {
    command: &'a str,
    seed: u64,
    config_hash: String,
    config: &'a RunConfig,
}

fn ensure_dir(dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir)
        .map_err(|e| Error::Invalid(format!("cannot create {}: {e}", dir.display())))
}

fn create(path: &Path) -> Result<BufWriter<File>> {
    if let Some(parent) = path.parent() {
        ensure_dir(parent)?;
    }
    File::create(path)
        .map(BufWriter::new)
        .map_err(|e| Error::Invalid(format!("cannot write {}: {e}", path.display())))
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut out = create(path)?;
    serde_json::to_writer_pretty(&mut out, value)?;
    out.write_all(b"\n")?;
    out.flush()?;
    Ok(())
}

fn write_report(path: &Path, report: &MetricsReport) -> Result<()> {
    let mut out = create(path)?;
    report.write(&mut out)?;
    out.flush()?;
    Ok(())
}

fn load_config(cli: &Cli) -> Result<RunConfig> {
    let mut cfg = match (&cli.config, cli.preset) {
        (Some(path), _) => RunConfig::from_path(path)?,
        (None, Preset::Desk) => RunConfig::desk(),
        (None, Preset::Paper) => RunConfig::default(),
    };
    if let Some(seed) = cli.seed {
        cfg.seed = seed;
    }
    Ok(cfg.resolved())
}

fn load_checkpoint(path: &Path) -> Result<EncoderParams> {
    if !path.exists() {
        return Err(Error::MissingInput(path.to_path_buf()));
    }
    read_checkpoint(BufReader::new(File::open(path)?))
}

fn load_dataset(cfg: &RunConfig, layout: &Layout) -> Result<Dataset> {
    let tables = read_corpus(&layout.corpus)?;
    let split = read_split_file(&layout.splits())?;
    let violations = check_split_invariants(&split, &tables.manifest, &tables.taxonomy, &cfg.split);
    if let Some(first) = violations.first() {
        return Err(Error::Invariant {
            check: "split post-conditions".into(),
            detail: format!("{first} ({} violations)", violations.len()),
        });
    }
    Dataset::assemble(
        tables.taxonomy,
        tables.manifest,
        tables.traits,
        split,
        &WavDir(layout.corpus.clone()),
        &cfg.front_end,
        cfg.seed,
    )
}

fn clips_and_candidates(data: &Dataset, split: SplitArg) -> (&[EvalClip], Vec<TaxonRecord>) {
    match split {
        SplitArg::Test => (&data.test_clips, data.test_species.clone()),
        SplitArg::Train => {
            let ids: std::collections::BTreeSet<&str> =
                data.train_entries.iter().map(|e| e.species_id.as_str()).collect();
            let species = data
                .taxonomy
                .iter()
                .filter(|r| ids.contains(r.species_id.as_str()))
                .cloned()
                .collect();
            (&data.train_clips, species)
        }
    }
}

fn run(cli: &Cli) -> Result<()> {
    let mut cfg = load_config(cli)?;
    let layout = Layout::new(&cli.out, &cfg);
    ensure_dir(&layout.out)?;
    let name = match &cli.command {
        Command::Synth => "synth",
        Command::Split => "split",
        Command::Train { .. } => "train",
        Command::Eval { .. } => "eval",
        Command::Probe => "probe",
        Command::Hierarchy { .. } => "hierarchy",
        Command::ExportEmb { .. } => "export-emb",
    };
    if let Command::Train {
        template_mode,
        epochs,
        lr,
    } = &cli.command
    {
        if let Some(m) = template_mode {
            cfg.train.template_mode = *m;
        }
        if let Some(e) = epochs {
            cfg.train.epochs = *e;
        }
        if let Some(lr) = lr {
            cfg.train.adamw.lr = *lr;
        }
    }

    match &cli.command {
        Command::Synth => {
            let corpus = generate_corpus(&cfg.synth)?;
            write_corpus(&corpus, &layout.corpus)?;
            eprintln!(
                "{} species, {} clips -> {}",
                corpus.taxonomy.len(),
                corpus.manifest.len(),
                layout.corpus.display()
            );
        }
        Command::Split => {
            let tables = read_corpus(&layout.corpus)?;
            let split = checked_splits(&tables.manifest, &tables.taxonomy, &cfg.split, cfg.seed)?;
            write_split_file(&split, &tables.manifest, &layout.splits())?;
            eprintln!(
                "train {} val {} test {} ({} test species)",
                split.count(Split::Train),
                split.count(Split::Val),
                split.count(Split::Test),
                split.test_species.len()
            );
        }
        Command::Train { .. } => {
            let data = load_dataset(&cfg, &layout)?;
            let outcome = data.train(&cfg.train)?;
            let mut out = create(&layout.checkpoint)?;
            write_checkpoint(&outcome.params, &mut out)?;
            out.flush()?;
            let p = &outcome.params;
            write_json(
                &layout.sidecar(),
                &CheckpointSidecar {
                    format_version: CHECKPOINT_VERSION,
                    dims: p.dims,
                    gamma: p.gamma,
                    gamma_trainable: p.gamma_trainable,
                    seed: cfg.seed,
                    config_hash: cfg.hash(),
                },
            )?;
            let mut log = create(&layout.out.join("loss.csv"))?;
            write_loss_log(&outcome.log, &mut log)?;
            log.flush()?;
            if let (Some(first), Some(last)) = (outcome.log.first(), outcome.log.last()) {
                eprintln!(
                    "{} steps, loss {:.4} -> {:.4}",
                    outcome.log.len(),
                    first.loss,
                    last.loss
                );
            }
        }
        Command::Eval { template, split } => {
            let params = load_checkpoint(&layout.checkpoint)?;
            let data = load_dataset(&cfg, &layout)?;
            let templates = if template.is_empty() {
                cfg.eval.templates.clone()
            } else {
                template.clone()
            };
            let (clips, candidates) = clips_and_candidates(&data, *split);
            let mut report = MetricsReport {
                seed: cfg.seed,
                ..MetricsReport::default()
            };
            for t in templates {
                let preds = zero_shot_classify(&params, clips, &candidates, t, &cfg.train.text)?;
                report
                    .zero_shot
                    .insert(t.name().to_string(), ZeroShotScores::from_predictions(&preds)?);
            }
            let file = match split {
                SplitArg::Test => "eval.json",
                SplitArg::Train => "eval_train.json",
            };
            write_report(&layout.reports.join(file), &report)?;
        }
        Command::Probe => {
            let params = load_checkpoint(&layout.checkpoint)?;
            let data = load_dataset(&cfg, &layout)?;
            let (traits, notes) = data.probe_scores(&params, &cfg.probe)?;
            let report = MetricsReport {
                seed: cfg.seed,
                traits,
                notes,
                ..MetricsReport::default()
            };
            write_report(&layout.reports.join("traits.json"), &report)?;
        }
        Command::Hierarchy { template } => {
            let params = load_checkpoint(&layout.checkpoint)?;
            let data = load_dataset(&cfg, &layout)?;
            let t = template.unwrap_or(cfg.eval.hierarchy_template);
            let mut report = MetricsReport {
                seed: cfg.seed,
                ..MetricsReport::default()
            };
            report.set_hierarchy(&data.hierarchy(&params, t, &cfg.train.text)?);
            write_report(&layout.reports.join("hierarchy.json"), &report)?;
        }
        Command::ExportEmb { split, raw } => {
            let params = load_checkpoint(&layout.checkpoint)?;
            let data = load_dataset(&cfg, &layout)?;
            let (clips, _) = clips_and_candidates(&data, *split);
            let (rows, embeddings) = export_embeddings_2d(&params, clips, &data.taxonomy)?;
            let mut out = create(&layout.reports.join("projection.csv"))?;
            write_projection(&rows, &mut out)?;
            out.flush()?;
            if *raw {
                let mut out = create(&layout.reports.join("embeddings.csv"))?;
                let dim = embeddings.first().map_or(0, Vec::len);
                let header: Vec<String> = std::iter::once("clip_id".to_string())
                    .chain((0..dim).map(|k| format!("e{k}")))
                    .collect();
                writeln!(out, "{}", header.join(","))?;
                for (clip, e) in clips.iter().zip(&embeddings) {
                    let values: Vec<String> = e.iter().map(|v| format!("{v:e}")).collect();
                    writeln!(out, "{},{}", clip.clip_id, values.join(","))?;
                }
                out.flush()?;
            }
        }
    }
    write_json(
        &layout.out.join("runs").join(format!("{name}.json")),
        &RunRecord {
            command: name,
            seed: cfg.seed,
            config_hash: cfg.hash(),
            config: &cfg,
        },
    )
}

fn exit_code(e: &Error) -> u8 {
    match e {
        Error::Invariant { .. } | Error::NonFinite(_) => 3,
        _ => 2,
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    if cli.threads > 0 {
        if let Err(e) = rayon::ThreadPoolBuilder::new().num_threads(cli.threads).build_global() {
            eprintln!("error: {e}");
            return ExitCode::from(2);
        }
    }
    match run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}
