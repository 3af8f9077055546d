//! Command-line front end: synth, prototype, refine, train, eval, pipeline, render.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use proto_refine::classifier::ClassifierHead;
use proto_refine::data::{
    load_label_table, load_manifest, load_prototypes, load_slide, save_label_table,
    save_prototypes, save_slide, LabelTable, PrototypeSet, SlideDataset,
};
use proto_refine::metrics::{
    aggregate_reports, confusion_matrix, summarize_seeds, Aggregation, MetricReport,
};
use proto_refine::pipeline::{
    build_prototypes, run_pipeline, train_pooled, train_slide, PipelineConfig, PipelineOutcome,
    SlideInput, TrainOutcome,
};
use proto_refine::pseudo::pseudo_label_slide;
use proto_refine::render::render_pgm;
use proto_refine::synth::{generate_cohort, SynthSpec};
use proto_refine::{Error, Result};

const SEED_ENV: &str = "PROTO_REFINE_SEED";

#[derive(Parser)]
#[command(
    name = "proto-refine",
    version,
    about = "Refine coarse slide annotations into patch labels"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic cohort with ground truth.
    Synth {
        /// SynthSpec JSON; omitted fields take defaults.
        #[arg(long)]
        spec: PathBuf,
        #[arg(long)]
        out_dir: PathBuf,
        #[arg(long, default_value_t = 8)]
        n_slides: u32,
    },
    /// Extract local prototypes per slide and aggregate the global set.
    Prototype {
        #[command(flatten)]
        config: ConfigArg,
        #[arg(long)]
        out_dir: PathBuf,
        /// Slide manifests (.jsonl); embeddings are read from the matching .pemb.
        #[arg(required = true)]
        slides: Vec<PathBuf>,
    },
    /// Pseudo-label one slide with a prototype set.
    Refine {
        #[command(flatten)]
        config: ConfigArg,
        #[arg(long)]
        slide: PathBuf,
        #[arg(long)]
        prototypes: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train the classifier head and write head, loss history and predictions.
    Train {
        #[command(flatten)]
        config: ConfigArg,
        /// Repeat with --labels for pooled training.
        #[arg(long = "slide", required = true)]
        slides: Vec<PathBuf>,
        #[arg(long = "labels", required = true)]
        labels: Vec<PathBuf>,
        #[arg(long)]
        out_dir: PathBuf,
    },
    /// Compare predicted label tables with ground truth; prints a JSON report.
    Eval {
        #[arg(long = "pred", required = true)]
        pred: Vec<PathBuf>,
        #[arg(long = "truth", required = true)]
        truth: Vec<PathBuf>,
        #[arg(long, default_value = "macro")]
        aggregation: Aggregation,
    },
    /// Run every stage end to end from one config file.
    Pipeline {
        #[arg(long)]
        config: PathBuf,
        /// Repeat the run with consecutive seeds and summarise mean and sd.
        #[arg(long)]
        seeds: Option<u32>,
        /// Overrides out_dir from the config file.
        #[arg(long)]
        out_dir: Option<PathBuf>,
    },
    /// Write a label table as a PGM mask on the patch grid.
    Render {
        #[arg(long)]
        labels: PathBuf,
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
}

#[derive(Args)]
struct ConfigArg {
    /// Pipeline config JSON; only hyperparameters and toggles are used here.
    #[arg(long)]
    config: Option<PathBuf>,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.kind().exit_code() as u8)
        }
    }
}

fn run(command: Command) -> Result<()> {
    match command {
        Command::Synth {
            spec,
            out_dir,
            n_slides,
        } => {
            let spec: SynthSpec = read_json(&spec)?;
            write_cohort(&spec, n_slides, &out_dir)?;
            eprintln!("wrote {n_slides} slides to {}", out_dir.display());
            Ok(())
        }
        Command::Prototype {
            config,
            out_dir,
            slides,
        } => {
            let cfg = config.load()?;
            let slides = slides
                .iter()
                .map(|p| load_slide_at(p))
                .collect::<Result<Vec<_>>>()?;
            let (locals, global) = build_prototypes(&slides, &cfg.refine, cfg.toggles.use_global)?;
            write_prototypes(&out_dir, &locals, global.as_ref())
        }
        Command::Refine {
            config,
            slide,
            prototypes,
            out,
        } => {
            let cfg = config.load()?;
            let slide = load_slide_at(&slide)?;
            let set = load_prototypes(&prototypes)?;
            let result = pseudo_label_slide(&slide, &set, &cfg.refine)?;
            save_label_table(&result.labels, &out)
        }
        Command::Train {
            config,
            slides,
            labels,
            out_dir,
        } => {
            let cfg = config.load()?;
            if slides.len() != labels.len() {
                return Err(Error::Config(format!(
                    "{} --slide but {} --labels",
                    slides.len(),
                    labels.len()
                )));
            }
            if slides.len() > 1 && !cfg.pooled_training {
                return Err(Error::Config(
                    "several slides given; set pooled_training or train them one at a time".into(),
                ));
            }
            let slides = slides
                .iter()
                .map(|p| load_slide_at(p))
                .collect::<Result<Vec<_>>>()?;
            let tables = slides
                .iter()
                .zip(&labels)
                .map(|(s, p)| load_label_table(p, s.slide_id()))
                .collect::<Result<Vec<_>>>()?;
            fs::create_dir_all(&out_dir).map_err(|e| Error::io(&out_dir, e))?;
            let hash = cfg.refine.hash();
            if cfg.pooled_training {
                let out = train_pooled(&slides, &tables, &cfg.refine, &cfg.toggles)?;
                write_head(&out_dir, "pooled", &out.head, &out.losses, &hash)?;
                for (slide, t) in slides.iter().zip(&out.slides) {
                    write_trained(&out_dir, slide, t, &hash)?;
                }
            } else {
                let out = train_slide(&slides[0], &tables[0], &cfg.refine, &cfg.toggles)?;
                write_trained(&out_dir, &slides[0], &out, &hash)?;
            }
            Ok(())
        }
        Command::Eval {
            pred,
            truth,
            aggregation,
        } => {
            let report = eval_files(&pred, &truth, aggregation)?;
            print!("{}", report);
            Ok(())
        }
        Command::Pipeline {
            config,
            seeds,
            out_dir,
        } => {
            let mut cfg = load_config(&config)?;
            if let Some(dir) = out_dir {
                cfg.out_dir = dir;
            }
            cfg.validate()?;
            match seeds {
                None => run_configured(&cfg, &cfg.out_dir).map(drop),
                Some(0) => Err(Error::Config("--seeds must be at least 1".into())),
                Some(n) => run_seeds(&cfg, n),
            }
        }
        Command::Render {
            labels,
            manifest,
            out,
        } => {
            let patches = load_manifest(&manifest)?;
            let table = load_label_table(&labels, &table_slide_id(&labels))?;
            write_bytes(&out, &render_pgm(&table, &patches)?)
        }
    }
}

impl ConfigArg {
    fn load(&self) -> Result<PipelineConfig> {
        let cfg = match &self.config {
            Some(p) => load_config(p)?,
            None => with_seed_override(PipelineConfig::default())?,
        };
        cfg.refine.validate()?;
        cfg.toggles.validate()?;
        Ok(cfg)
    }
}

/// Reads a config file, resolving relative paths against its directory.
fn load_config(path: &Path) -> Result<PipelineConfig> {
    let mut cfg: PipelineConfig = read_json(path)?;
    let base = path.parent().unwrap_or(Path::new(""));
    let resolve = |p: &mut PathBuf| {
        if p.is_relative() {
            *p = base.join(&*p);
        }
    };
    resolve(&mut cfg.out_dir);
    for s in &mut cfg.slides {
        resolve(&mut s.manifest);
        resolve(&mut s.embeddings);
        if let Some(t) = &mut s.truth {
            resolve(t);
        }
    }
    with_seed_override(cfg)
}

fn with_seed_override(mut cfg: PipelineConfig) -> Result<PipelineConfig> {
    if let Ok(v) = std::env::var(SEED_ENV) {
        cfg.refine.seed = v
            .trim()
            .parse()
            .map_err(|_| Error::Config(format!("{SEED_ENV}={v:?} is not an unsigned integer")))?;
    }
    Ok(cfg)
}

fn read_json<T: serde::de::DeserializeOwned>(path: &Path) -> Result<T> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    serde_json::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))
}

fn write_bytes(path: &Path, bytes: &[u8]) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

fn load_slide_at(manifest: &Path) -> Result<SlideDataset> {
    load_slide(manifest, &manifest.with_extension("pemb"))
}

/// Slide id of a label file: the file name up to its first dot.
fn table_slide_id(path: &Path) -> String {
    let name = path
        .file_name()
        .map(|n| n.to_string_lossy().into_owned())
        .unwrap_or_default();
    name.split('.').next().unwrap_or_default().to_string()
}

fn write_cohort(spec: &SynthSpec, n_slides: u32, dir: &Path) -> Result<Vec<SlideInput>> {
    let cohort = generate_cohort(spec, n_slides)?;
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    cohort
        .iter()
        .map(|s| {
            let id = s.slide.slide_id();
            let input = SlideInput {
                manifest: dir.join(format!("{id}.jsonl")),
                embeddings: dir.join(format!("{id}.pemb")),
                truth: Some(dir.join(format!("{id}.truth.csv"))),
            };
            save_slide(&s.slide, &input.manifest, &input.embeddings)?;
            save_label_table(&s.truth, input.truth.as_ref().unwrap())?;
            Ok(input)
        })
        .collect()
}

fn write_prototypes(
    dir: &Path,
    locals: &[PrototypeSet],
    global: Option<&PrototypeSet>,
) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    for set in locals {
        let id = set.source_slide().unwrap_or("slide");
        save_prototypes(set, &dir.join(format!("local_{id}.pemb")))?;
    }
    if let Some(g) = global {
        save_prototypes(g, &dir.join("global.pemb"))?;
    }
    Ok(())
}

fn write_head(
    dir: &Path,
    name: &str,
    head: &ClassifierHead,
    losses: &[(usize, f64)],
    hash: &str,
) -> Result<()> {
    write_bytes(
        &dir.join(format!("{name}.head.json")),
        head.to_json(hash).as_bytes(),
    )?;
    let mut csv = String::from("iteration,loss\n");
    for (i, loss) in losses {
        csv.push_str(&format!("{i},{loss}\n"));
    }
    write_bytes(&dir.join(format!("{name}.train.csv")), csv.as_bytes())
}

fn write_trained(dir: &Path, slide: &SlideDataset, out: &TrainOutcome, hash: &str) -> Result<()> {
    let id = slide.slide_id();
    if out.collapsed {
        eprintln!("warning: {id}: re-finetune labels hold a single class");
    }
    write_head(dir, id, &out.head, &out.losses, hash)?;
    save_label_table(&out.predictions, &dir.join(format!("{id}.refined.csv")))
}

fn eval_files(pred: &[PathBuf], truth: &[PathBuf], aggregation: Aggregation) -> Result<String> {
    if pred.len() != truth.len() {
        return Err(Error::Config(format!(
            "{} --pred but {} --truth",
            pred.len(),
            truth.len()
        )));
    }
    let cms = pred
        .iter()
        .zip(truth)
        .map(|(p, t)| {
            let id = table_slide_id(p);
            let predicted = load_label_table(p, &id)?;
            let truth = load_label_table(t, &id)?;
            Ok((id, confusion_matrix(&predicted, &truth)?))
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(aggregate_reports(&cms, aggregation)?.to_json())
}

/// Loads or generates the cohort, runs it and writes every artifact under `out_dir`.
fn run_configured(cfg: &PipelineConfig, out_dir: &Path) -> Result<Option<MetricReport>> {
    let inputs = match &cfg.synth {
        Some(spec) => write_cohort(spec, cfg.n_slides, &out_dir.join("cohort"))?,
        None => cfg.slides.clone(),
    };
    let slides = inputs
        .iter()
        .map(|s| load_slide(&s.manifest, &s.embeddings))
        .collect::<Result<Vec<_>>>()?;
    let truths: Option<Vec<LabelTable>> = inputs
        .iter()
        .zip(&slides)
        .map(|(i, s)| i.truth.as_ref().map(|t| load_label_table(t, s.slide_id())))
        .collect::<Option<Result<Vec<_>>>>()
        .transpose()?;

    let out = run_pipeline(&slides, truths.as_deref(), &cfg.refine, cfg.run_mode())?;
    write_outcome(cfg, out_dir, &slides, &out)?;
    if let Some(report) = &out.report {
        eprintln!(
            "{}: {} dice {}",
            cfg.toggles.label(),
            out_dir.display(),
            report
                .values
                .dice
                .map_or("undefined".into(), |d| format!("{d:.4}"))
        );
    }
    Ok(out.report)
}

fn write_outcome(
    cfg: &PipelineConfig,
    dir: &Path,
    slides: &[SlideDataset],
    out: &PipelineOutcome,
) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    if cfg.toggles.use_local {
        write_prototypes(&dir.join("prototypes"), &out.locals, out.global.as_ref())?;
    }
    let hash = cfg.refine.hash();
    if let Some((head, _, losses)) = &out.pooled {
        write_head(dir, "pooled", head, losses, &hash)?;
    }
    for (slide, s) in slides.iter().zip(&out.slides) {
        let id = slide.slide_id();
        if cfg.toggles.use_local {
            save_label_table(&s.training_labels, &dir.join(format!("{id}.pseudo.csv")))?;
        }
        write_trained(dir, slide, &s.train, &hash)?;
        write_bytes(
            &dir.join(format!("{id}.pgm")),
            &render_pgm(&s.train.predictions, slide.patches())?,
        )?;
    }
    if let Some(report) = &out.report {
        write_bytes(&dir.join("report.json"), report.to_json().as_bytes())?;
    }
    Ok(())
}

fn run_seeds(cfg: &PipelineConfig, n: u32) -> Result<()> {
    let mut reports = Vec::new();
    for k in 0..n {
        let mut run = cfg.clone();
        run.refine.seed = cfg.refine.seed.wrapping_add(u64::from(k));
        if let Some(spec) = &mut run.synth {
            spec.seed = spec.seed.wrapping_add(u64::from(k));
        }
        let dir = cfg.out_dir.join(format!("seed_{}", run.refine.seed));
        if let Some(report) = run_configured(&run, &dir)? {
            reports.push((run.refine.seed, report));
        }
    }
    if reports.is_empty() {
        eprintln!("no ground truth; skipping seed summary");
        return Ok(());
    }
    let summary = summarize_seeds(&reports)?;
    write_bytes(
        &cfg.out_dir.join("summary.json"),
        summary.to_json().as_bytes(),
    )?;
    if let (Some(m), Some(sd)) = (summary.mean.dice, summary.sd.dice) {
        eprintln!("dice over {n} seeds: {m:.4} ± {sd:.4}");
    }
    Ok(())
}
