//! Prototype-guided pseudo-labelling.
//!
//! Patches inside the coarse annotation vote for their closest global
//! prototype. The most frequent prototypes are taken as major (cancer)
//! prototypes, and every patch on the slide is relabelled positive iff its
//! best cosine similarity to a major prototype exceeds `theta`.

use crate::config::{MajorRule, RefineConfig};
use crate::data::{LabelEntry, LabelTable, PrototypeSet, SlideDataset};
use crate::error::{Error, Result};
use crate::prototype::{assign_slide, norm, Assignment, WidenedPrototypes};

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct FrequencyStats {
    /// `counts[q]`: annotated patches whose closest prototype is `q`.
    pub counts: Vec<u64>,
    pub total_in_annotation: u64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct MajorSelection {
    /// Descending by count, ties by lowest index.
    pub major_indices: Vec<usize>,
    pub rule_used: MajorRule,
}

pub fn prototype_frequencies(
    slide: &SlideDataset,
    assignments: &[Assignment],
    k: usize,
) -> Result<FrequencyStats> {
    if assignments.len() != slide.len() {
        return Err(Error::InvalidData(format!(
            "{} assignments for {} patches",
            assignments.len(),
            slide.len()
        )));
    }
    let mut counts = vec![0u64; k];
    let mut total = 0u64;
    for (p, a) in slide.patches().iter().zip(assignments) {
        if p.coarse_label != 1 {
            continue;
        }
        let slot = counts.get_mut(a.prototype_index).ok_or_else(|| {
            Error::InvalidData(format!(
                "prototype index {} out of range {k}",
                a.prototype_index
            ))
        })?;
        *slot += 1;
        total += 1;
    }
    if total == 0 {
        return Err(Error::EmptyCoarseAnnotation(slide.slide_id().to_string()));
    }
    Ok(FrequencyStats {
        counts,
        total_in_annotation: total,
    })
}

pub fn select_major_prototypes(stats: &FrequencyStats, rule: MajorRule) -> Result<MajorSelection> {
    let mut order: Vec<usize> = (0..stats.counts.len())
        .filter(|&q| stats.counts[q] > 0)
        .collect();
    order.sort_by(|&a, &b| stats.counts[b].cmp(&stats.counts[a]).then(a.cmp(&b)));

    let take = match rule {
        MajorRule::FixedM(m) => {
            if m < 1 {
                return Err(Error::Config("m must be at least 1".into()));
            }
            if m > order.len() {
                return Err(Error::InvalidData(format!(
                    "m = {m} exceeds the number of prototypes with in-annotation patches; maximum feasible m is {}",
                    order.len()
                )));
            }
            m
        }
        MajorRule::Coverage(rho) => {
            if !(rho > 0.0 && rho <= 1.0) {
                return Err(Error::Config(format!("coverage {rho} must lie in (0, 1]")));
            }
            let target = rho * stats.total_in_annotation as f64;
            let mut cumulative = 0u64;
            let mut taken = order.len();
            for (i, &q) in order.iter().enumerate() {
                cumulative += stats.counts[q];
                if cumulative as f64 + 1e-9 >= target {
                    taken = i + 1;
                    break;
                }
            }
            taken
        }
    };
    order.truncate(take);
    Ok(MajorSelection {
        major_indices: order,
        rule_used: rule,
    })
}

/// Labels each patch 1 iff its best cosine similarity to a major prototype is strictly above `theta`.
///
/// The recorded score is that similarity, floored at 0 to fit the table's `[0, 1]` score range.
pub fn assign_pseudo_labels(
    slide: &SlideDataset,
    globals: &PrototypeSet,
    major: &MajorSelection,
    theta: f64,
) -> Result<LabelTable> {
    if major.major_indices.is_empty() {
        return Err(Error::InvalidData("no major prototypes selected".into()));
    }
    if let Some(&q) = major.major_indices.iter().find(|&&q| q >= globals.len()) {
        return Err(Error::InvalidData(format!(
            "major prototype {q} out of range {}",
            globals.len()
        )));
    }
    if !(theta > -1.0 && theta < 1.0) {
        return Err(Error::Config(format!(
            "theta = {theta} must lie in (-1, 1)"
        )));
    }
    let widened = WidenedPrototypes::new(globals);
    widened.check_dim(slide.dim())?;
    let entries = slide
        .patches()
        .iter()
        .zip(slide.embeddings().rows())
        .map(|(p, z)| {
            let z: Vec<f64> = z.iter().map(|&v| f64::from(v)).collect();
            let z_norm = norm(z.iter().copied());
            let score = major
                .major_indices
                .iter()
                .map(|&q| widened.similarity(&z, z_norm, q))
                .fold(f64::NEG_INFINITY, f64::max);
            LabelEntry {
                patch_id: p.patch_id.clone(),
                label: u8::from(score > theta),
                score: score.max(0.0) as f32,
            }
        })
        .collect();
    LabelTable::new(slide.slide_id(), entries)
}

/// Everything the pseudo-labelling stage produced for one slide.
#[derive(Debug, Clone)]
pub struct PseudoLabeling {
    pub assignments: Vec<Assignment>,
    pub stats: FrequencyStats,
    pub major: MajorSelection,
    pub labels: LabelTable,
}

/// Runs assignment, frequency counting, major selection and thresholding.
///
/// With `cfg.preserve_coarse_positives`, patches inside the coarse annotation stay positive.
pub fn pseudo_label_slide(
    slide: &SlideDataset,
    prototypes: &PrototypeSet,
    cfg: &RefineConfig,
) -> Result<PseudoLabeling> {
    let assignments = assign_slide(slide, prototypes)?;
    let stats = prototype_frequencies(slide, &assignments, prototypes.len())?;
    let major = select_major_prototypes(&stats, cfg.major_rule)?;
    let mut labels = assign_pseudo_labels(slide, prototypes, &major, cfg.theta)?;
    if cfg.preserve_coarse_positives {
        for (e, p) in labels.entries.iter_mut().zip(slide.patches()) {
            e.label |= p.coarse_label;
        }
    }
    Ok(PseudoLabeling {
        assignments,
        stats,
        major,
        labels,
    })
}
