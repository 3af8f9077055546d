//! End-to-end refinement: prototypes, pseudo-labels, classifier, evaluation.

use std::path::PathBuf;

use serde::{Deserialize, Serialize};

use crate::classifier::{
    predict_labels, refinetune, train_dynamic_samples, train_uniform_samples, ClassifierHead,
    Samples, TrainRecord, DECISION_THRESHOLD,
};
use crate::config::RefineConfig;
use crate::data::{LabelTable, PrototypeSet, SlideDataset};
use crate::error::{Error, Result};
use crate::metrics::{
    aggregate_reports, confusion_matrix, Aggregation, ConfusionMatrix, MetricReport,
};
use crate::prototype::{aggregate_global_prototypes, extract_local_prototypes};
use crate::pseudo::pseudo_label_slide;
use crate::synth::SynthSpec;

/// Stage switches. All on is the full method; coarse-only training is all off.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct Toggles {
    /// Pseudo-label with prototypes instead of training on the coarse labels.
    #[serde(rename = "use_local_only")]
    pub use_local: bool,
    /// Aggregate local prototypes across slides and label with the global set.
    pub use_global: bool,
    pub use_dynamic_sampling: bool,
    pub use_refinetune: bool,
}

impl Default for Toggles {
    fn default() -> Self {
        Self::FULL
    }
}

impl Toggles {
    pub const FULL: Self = Self {
        use_local: true,
        use_global: true,
        use_dynamic_sampling: true,
        use_refinetune: true,
    };
    pub const COARSE_ONLY: Self = Self {
        use_local: false,
        use_global: false,
        use_dynamic_sampling: false,
        use_refinetune: false,
    };
    pub const LOCAL: Self = Self {
        use_local: true,
        ..Self::COARSE_ONLY
    };
    pub const LOCAL_GLOBAL: Self = Self {
        use_global: true,
        ..Self::LOCAL
    };
    pub const LOCAL_GLOBAL_DDS: Self = Self {
        use_dynamic_sampling: true,
        ..Self::LOCAL_GLOBAL
    };

    pub fn validate(&self) -> Result<()> {
        if self.use_global && !self.use_local {
            return Err(Error::Config("use_global requires use_local_only".into()));
        }
        Ok(())
    }

    /// Short name in the style of the ablation table, e.g. `CA+LP+GP`.
    pub fn label(&self) -> String {
        let mut s = String::from("CA");
        for (on, tag) in [
            (self.use_local, "LP"),
            (self.use_global, "GP"),
            (self.use_dynamic_sampling, "DDS"),
            (self.use_refinetune, "RF"),
        ] {
            if on {
                s.push('+');
                s.push_str(tag);
            }
        }
        s
    }
}

/// Local prototype seed for the `index`-th slide of a run.
pub fn local_seed(seed: u64, index: usize) -> u64 {
    seed.wrapping_add(1 + index as u64)
}

/// Prototype stage over a cohort: one local set per slide, plus the global set.
pub fn build_prototypes(
    slides: &[SlideDataset],
    cfg: &RefineConfig,
    with_global: bool,
) -> Result<(Vec<PrototypeSet>, Option<PrototypeSet>)> {
    let locals = slides
        .iter()
        .enumerate()
        .map(|(i, s)| extract_local_prototypes(s, cfg.c_local, local_seed(cfg.seed, i), cfg))
        .collect::<Result<Vec<_>>>()?;
    let global = if with_global {
        Some(aggregate_global_prototypes(
            &locals,
            cfg.k_global,
            cfg.seed,
            cfg,
        )?)
    } else {
        None
    };
    Ok((locals, global))
}

/// Classifier stage for one slide: training, optional re-finetuning, final predictions.
#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub head: ClassifierHead,
    /// Balanced-batch records; empty without dynamic sampling.
    pub records: Vec<TrainRecord>,
    /// `(iteration, loss)` of every optimiser step, training then re-finetuning.
    pub losses: Vec<(usize, f64)>,
    pub predictions: LabelTable,
    pub collapsed: bool,
}

pub fn train_slide(
    slide: &SlideDataset,
    labels: &LabelTable,
    cfg: &RefineConfig,
    toggles: &Toggles,
) -> Result<TrainOutcome> {
    let samples = Samples::from_slide(slide, labels)?;
    let (head, records, losses) = fit_head(&samples, cfg, toggles)?;
    finish_slide(slide, head, records, losses, cfg, toggles)
}

fn fit_head(
    samples: &Samples<'_>,
    cfg: &RefineConfig,
    toggles: &Toggles,
) -> Result<(ClassifierHead, Vec<TrainRecord>, Vec<f64>)> {
    if toggles.use_dynamic_sampling {
        let (head, records) = train_dynamic_samples(samples, cfg)?;
        let losses = records.iter().map(|r| r.loss).collect();
        Ok((head, records, losses))
    } else {
        let (head, losses) = train_uniform_samples(samples, cfg)?;
        Ok((head, Vec::new(), losses))
    }
}

/// Re-finetunes `head` on the slide when enabled, then predicts.
fn finish_slide(
    slide: &SlideDataset,
    head: ClassifierHead,
    records: Vec<TrainRecord>,
    mut losses: Vec<f64>,
    cfg: &RefineConfig,
    toggles: &Toggles,
) -> Result<TrainOutcome> {
    let (head, predictions, collapsed) = if toggles.use_refinetune {
        let out = refinetune(slide, &head, cfg)?;
        losses.extend(out.losses);
        (out.head, out.labels, out.collapsed)
    } else {
        let p = predict_labels(&head, slide, DECISION_THRESHOLD)?;
        (head, p, false)
    };
    Ok(TrainOutcome {
        head,
        records,
        losses: losses.into_iter().enumerate().collect(),
        predictions,
        collapsed,
    })
}

/// One head trained on every slide's labels at once.
#[derive(Debug, Clone)]
pub struct PooledOutcome {
    pub head: ClassifierHead,
    pub records: Vec<TrainRecord>,
    pub losses: Vec<(usize, f64)>,
    /// Per slide: the pooled head, re-finetuned on that slide when enabled.
    pub slides: Vec<TrainOutcome>,
}

pub fn train_pooled(
    slides: &[SlideDataset],
    labels: &[LabelTable],
    cfg: &RefineConfig,
    toggles: &Toggles,
) -> Result<PooledOutcome> {
    if slides.len() != labels.len() {
        return Err(Error::InvalidData(format!(
            "{} label tables for {} slides",
            labels.len(),
            slides.len()
        )));
    }
    let pairs: Vec<(&SlideDataset, &LabelTable)> = slides.iter().zip(labels).collect();
    let samples = Samples::pooled(&pairs)?;
    let (head, records, losses) = fit_head(&samples, cfg, toggles)?;
    let per_slide = slides
        .iter()
        .map(|s| finish_slide(s, head.clone(), Vec::new(), Vec::new(), cfg, toggles))
        .collect::<Result<Vec<_>>>()?;
    Ok(PooledOutcome {
        head,
        records,
        losses: losses.into_iter().enumerate().collect(),
        slides: per_slide,
    })
}

#[derive(Debug, Clone)]
pub struct SlideOutcome {
    pub slide_id: String,
    /// Labels the classifier was trained on.
    pub training_labels: LabelTable,
    pub train: TrainOutcome,
    pub confusion: Option<ConfusionMatrix>,
}

/// Shared head of a pooled run with its batch records and `(iteration, loss)` history.
pub type PooledHead = (ClassifierHead, Vec<TrainRecord>, Vec<(usize, f64)>);

#[derive(Debug, Clone)]
pub struct PipelineOutcome {
    pub locals: Vec<PrototypeSet>,
    pub global: Option<PrototypeSet>,
    pub slides: Vec<SlideOutcome>,
    /// Shared head and its training history in pooled mode.
    pub pooled: Option<PooledHead>,
    /// Present when every slide has ground truth.
    pub report: Option<MetricReport>,
}

impl PipelineOutcome {
    pub fn report_with(&self, mode: Aggregation) -> Result<Option<MetricReport>> {
        let cms: Option<Vec<(String, ConfusionMatrix)>> = self
            .slides
            .iter()
            .map(|s| s.confusion.map(|c| (s.slide_id.clone(), c)))
            .collect();
        cms.map(|c| aggregate_reports(&c, mode)).transpose()
    }
}

/// How a cohort run is carried out, besides the hyperparameters.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct RunMode {
    pub toggles: Toggles,
    /// Train one head on all slides instead of one per slide.
    pub pooled_training: bool,
    pub aggregation: Aggregation,
}

impl From<Toggles> for RunMode {
    fn from(toggles: Toggles) -> Self {
        Self {
            toggles,
            pooled_training: false,
            aggregation: Aggregation::Macro,
        }
    }
}

/// Labels each slide is trained on: coarse, or pseudo-labels from the local or global set.
pub fn training_labels(
    slides: &[SlideDataset],
    locals: &[PrototypeSet],
    global: Option<&PrototypeSet>,
    cfg: &RefineConfig,
    toggles: &Toggles,
) -> Result<Vec<LabelTable>> {
    slides
        .iter()
        .enumerate()
        .map(|(i, slide)| {
            if toggles.use_local {
                let protos = global.unwrap_or(&locals[i]);
                Ok(pseudo_label_slide(slide, protos, cfg)?.labels)
            } else {
                Ok(slide.coarse_labels())
            }
        })
        .collect()
}

/// Runs every enabled stage over a cohort. `truths`, when given, are matched to slides by position.
pub fn run_pipeline(
    slides: &[SlideDataset],
    truths: Option<&[LabelTable]>,
    cfg: &RefineConfig,
    mode: impl Into<RunMode>,
) -> Result<PipelineOutcome> {
    let mode = mode.into();
    let toggles = &mode.toggles;
    cfg.validate()?;
    toggles.validate()?;
    if slides.is_empty() {
        return Err(Error::InvalidData("no slides".into()));
    }
    if let Some(t) = truths {
        if t.len() != slides.len() {
            return Err(Error::InvalidData(format!(
                "{} ground-truth tables for {} slides",
                t.len(),
                slides.len()
            )));
        }
    }
    let (locals, global) = if toggles.use_local {
        build_prototypes(slides, cfg, toggles.use_global)?
    } else {
        (Vec::new(), None)
    };
    let labels = training_labels(slides, &locals, global.as_ref(), cfg, toggles)?;

    let (trained, pooled) = if mode.pooled_training {
        let out = train_pooled(slides, &labels, cfg, toggles)?;
        (out.slides, Some((out.head, out.records, out.losses)))
    } else {
        let per_slide = slides
            .iter()
            .zip(&labels)
            .map(|(s, l)| train_slide(s, l, cfg, toggles))
            .collect::<Result<Vec<_>>>()?;
        (per_slide, None)
    };

    let mut outcomes = Vec::with_capacity(slides.len());
    for (i, ((slide, training_labels), train)) in slides.iter().zip(labels).zip(trained).enumerate()
    {
        let confusion = truths
            .map(|t| confusion_matrix(&train.predictions, &t[i]))
            .transpose()?;
        outcomes.push(SlideOutcome {
            slide_id: slide.slide_id().to_string(),
            training_labels,
            train,
            confusion,
        });
    }
    let mut out = PipelineOutcome {
        locals,
        global,
        slides: outcomes,
        pooled,
        report: None,
    };
    out.report = out.report_with(mode.aggregation)?;
    Ok(out)
}

/// A slide given by file paths.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SlideInput {
    pub manifest: PathBuf,
    pub embeddings: PathBuf,
    #[serde(default)]
    pub truth: Option<PathBuf>,
}

/// Flat JSON document describing a whole run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PipelineConfig {
    #[serde(flatten)]
    pub refine: RefineConfig,
    #[serde(flatten)]
    pub toggles: Toggles,
    /// Generate the cohort instead of loading `slides`.
    pub synth: Option<SynthSpec>,
    pub n_slides: u32,
    pub slides: Vec<SlideInput>,
    pub out_dir: PathBuf,
    pub aggregation: Aggregation,
    pub pooled_training: bool,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        Self {
            refine: RefineConfig::default(),
            toggles: Toggles::FULL,
            synth: None,
            n_slides: 8,
            slides: Vec::new(),
            out_dir: PathBuf::from("out"),
            aggregation: Aggregation::Macro,
            pooled_training: false,
        }
    }
}

impl PipelineConfig {
    pub fn run_mode(&self) -> RunMode {
        RunMode {
            toggles: self.toggles,
            pooled_training: self.pooled_training,
            aggregation: self.aggregation,
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.refine.validate()?;
        self.toggles.validate()?;
        match (&self.synth, self.slides.is_empty()) {
            (Some(spec), true) => {
                spec.validate()?;
                if self.n_slides < 1 {
                    return Err(Error::Config("n_slides must be at least 1".into()));
                }
            }
            (None, false) => {}
            (Some(_), false) => {
                return Err(Error::Config(
                    "give either `synth` or `slides`, not both".into(),
                ))
            }
            (None, true) => return Err(Error::Config("config needs `synth` or `slides`".into())),
        }
        Ok(())
    }
}
