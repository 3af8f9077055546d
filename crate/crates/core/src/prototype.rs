//! Local-to-global prototype extraction and patch-to-prototype alignment.

use crate::config::RefineConfig;
use crate::data::{Matrix, PrototypeLevel, PrototypeSet, SlideDataset};
use crate::error::{Error, Result};
use crate::kmeans::{kmeans_fit, KMeansParams, KMeansResult};

/// Cosine similarity of every global prototype to one patch embedding.
#[derive(Debug, Clone, PartialEq)]
pub struct SimilarityVector {
    pub values: Vec<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Assignment {
    pub prototype_index: usize,
    pub similarity: f64,
}

fn kmeans_params(cfg: &RefineConfig) -> KMeansParams {
    KMeansParams {
        max_iters: cfg.kmeans_max_iters,
        tol: cfg.kmeans_tol,
        ..KMeansParams::default()
    }
}

fn to_prototypes(
    fit: &KMeansResult,
    level: PrototypeLevel,
    source_slide: Option<String>,
) -> Result<PrototypeSet> {
    PrototypeSet::new(
        level,
        source_slide,
        fit.centroids.to_f32(),
        fit.cluster_sizes(),
    )
}

/// Clusters all patch embeddings of a slide (inside and outside the coarse
/// annotation) into `c` local prototypes.
pub fn extract_local_prototypes(
    slide: &SlideDataset,
    c: usize,
    seed: u64,
    cfg: &RefineConfig,
) -> Result<PrototypeSet> {
    if c < 1 {
        return Err(Error::Config(
            "number of local prototypes must be at least 1".into(),
        ));
    }
    if c > slide.len() {
        return Err(Error::Config(format!(
            "c = {c} exceeds the {} patches of slide {}",
            slide.len(),
            slide.slide_id()
        )));
    }
    let fit = kmeans_fit(&slide.embeddings().to_f64(), c, seed, &kmeans_params(cfg))?;
    to_prototypes(
        &fit,
        PrototypeLevel::Local,
        Some(slide.slide_id().to_string()),
    )
}

/// Pools the local prototypes of several slides (unweighted) and clusters them into `k` global ones.
///
/// `member_counts` of the result counts local prototypes per global cluster.
pub fn aggregate_global_prototypes(
    locals: &[PrototypeSet],
    k: usize,
    seed: u64,
    cfg: &RefineConfig,
) -> Result<PrototypeSet> {
    let first = locals
        .first()
        .ok_or_else(|| Error::InvalidData("no local prototype sets to aggregate".into()))?;
    let d = first.dim();
    let mut pooled = Vec::new();
    for set in locals {
        if set.level() != PrototypeLevel::Local {
            return Err(Error::InvalidData(
                "aggregation expects local prototype sets".into(),
            ));
        }
        if set.dim() != d {
            return Err(Error::DimensionMismatch {
                expected: d,
                actual: set.dim(),
            });
        }
        pooled.extend(set.vectors().as_slice().iter().map(|&v| f64::from(v)));
    }
    let n = pooled.len() / d;
    if k < 1 || k > n {
        return Err(Error::Config(format!(
            "K = {k} must lie in [1, {n}] (pooled local prototypes)"
        )));
    }
    let rows = Matrix::from_vec(n, d, pooled)?;
    let fit = kmeans_fit(&rows, k, seed, &kmeans_params(cfg))?;
    to_prototypes(&fit, PrototypeLevel::Global, None)
}

pub(crate) fn norm(v: impl Iterator<Item = f64>) -> f64 {
    v.map(|x| x * x).sum::<f64>().sqrt()
}

/// `z·h / (‖z‖‖h‖)`, clamped to `[-1, 1]`.
pub fn cosine_similarity(z: &[f64], h: &[f64]) -> Result<f64> {
    if z.len() != h.len() {
        return Err(Error::DimensionMismatch {
            expected: z.len(),
            actual: h.len(),
        });
    }
    let nz = norm(z.iter().copied());
    let nh = norm(h.iter().copied());
    if nz == 0.0 || nh == 0.0 {
        return Err(Error::InvalidData(
            "cosine similarity of a zero-norm vector".into(),
        ));
    }
    let dot: f64 = z.iter().zip(h).map(|(a, b)| a * b).sum();
    Ok((dot / (nz * nh)).clamp(-1.0, 1.0))
}

/// Prototypes widened to f64 with their norms cached. Produces the same bits as
/// [`cosine_similarity`] on the widened vectors.
#[derive(Debug, Clone)]
pub(crate) struct WidenedPrototypes {
    dim: usize,
    rows: Vec<Vec<f64>>,
    norms: Vec<f64>,
}

impl WidenedPrototypes {
    pub(crate) fn new(set: &PrototypeSet) -> Self {
        let rows: Vec<Vec<f64>> = set
            .vectors()
            .rows()
            .map(|h| h.iter().map(|&v| f64::from(v)).collect())
            .collect();
        let norms = rows.iter().map(|h| norm(h.iter().copied())).collect();
        Self {
            dim: set.dim(),
            rows,
            norms,
        }
    }

    pub(crate) fn similarity(&self, z: &[f64], z_norm: f64, k: usize) -> f64 {
        let dot: f64 = z.iter().zip(&self.rows[k]).map(|(a, b)| a * b).sum();
        (dot / (z_norm * self.norms[k])).clamp(-1.0, 1.0)
    }

    pub(crate) fn check_dim(&self, d: usize) -> Result<()> {
        if d != self.dim {
            return Err(Error::DimensionMismatch {
                expected: self.dim,
                actual: d,
            });
        }
        Ok(())
    }
}

pub fn similarity_vector(z: &[f32], globals: &PrototypeSet) -> Result<SimilarityVector> {
    if z.len() != globals.dim() {
        return Err(Error::DimensionMismatch {
            expected: globals.dim(),
            actual: z.len(),
        });
    }
    let zf: Vec<f64> = z.iter().map(|&v| f64::from(v)).collect();
    let values = globals
        .vectors()
        .rows()
        .map(|h| {
            let hf: Vec<f64> = h.iter().map(|&v| f64::from(v)).collect();
            cosine_similarity(&zf, &hf)
        })
        .collect::<Result<_>>()?;
    Ok(SimilarityVector { values })
}

/// Index of the largest entry, lowest index on ties.
pub fn argmax(values: &[f64]) -> Option<Assignment> {
    let mut best: Option<Assignment> = None;
    for (k, &v) in values.iter().enumerate() {
        if best.is_none_or(|b| v > b.similarity) {
            best = Some(Assignment {
                prototype_index: k,
                similarity: v,
            });
        }
    }
    best
}

pub fn assign_to_prototype(z: &[f32], globals: &PrototypeSet) -> Result<Assignment> {
    let sims = similarity_vector(z, globals)?;
    Ok(argmax(&sims.values).expect("prototype sets are non-empty"))
}

/// Assigns every patch of a slide to its closest prototype.
pub fn assign_slide(slide: &SlideDataset, globals: &PrototypeSet) -> Result<Vec<Assignment>> {
    let widened = WidenedPrototypes::new(globals);
    widened.check_dim(slide.dim())?;
    let mut sims = vec![0.0; globals.len()];
    Ok(slide
        .embeddings()
        .rows()
        .map(|z| {
            let z: Vec<f64> = z.iter().map(|&v| f64::from(v)).collect();
            let z_norm = norm(z.iter().copied());
            for (k, s) in sims.iter_mut().enumerate() {
                *s = widened.similarity(&z, z_norm, k);
            }
            argmax(&sims).expect("prototype sets are non-empty")
        })
        .collect())
}
