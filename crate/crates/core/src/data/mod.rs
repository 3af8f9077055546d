//! Domain types shared by every pipeline stage.
//!
//! All types validate their invariants on construction and are immutable
//! afterwards, so they can be shared read-only between workers.

mod io;
mod matrix;

use std::collections::HashSet;

pub use io::{
    decode_embeddings, encode_embeddings, format_score, load_label_table, load_manifest,
    load_prototypes, load_slide, read_embeddings, save_label_table, save_prototypes, save_slide,
    sidecar_path, slide_meta_path, write_embeddings, EMBEDDING_MAGIC, EMBEDDING_VERSION,
};
pub use matrix::Matrix;

use crate::error::{Error, Result};

/// One patch of the slide grid and its coarse annotation label.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PatchRecord {
    pub patch_id: String,
    pub grid_x: u32,
    pub grid_y: u32,
    pub coarse_label: u8,
}

/// A slide's patch grid together with one embedding row per patch.
#[derive(Debug, Clone, PartialEq)]
pub struct SlideDataset {
    slide_id: String,
    patches: Vec<PatchRecord>,
    embeddings: Matrix<f32>,
    patch_size_px: u32,
    magnification: String,
}

impl SlideDataset {
    pub fn new(
        slide_id: impl Into<String>,
        patches: Vec<PatchRecord>,
        embeddings: Matrix<f32>,
        patch_size_px: u32,
        magnification: impl Into<String>,
    ) -> Result<Self> {
        let slide_id = slide_id.into();
        if embeddings.n_rows() != patches.len() {
            return Err(Error::InvalidData(format!(
                "count mismatch: {} patches but {} embedding rows",
                patches.len(),
                embeddings.n_rows()
            )));
        }
        if patches.is_empty() {
            return Err(Error::InvalidData(format!(
                "slide {slide_id} has no patches"
            )));
        }
        if embeddings.n_cols() == 0 {
            return Err(Error::InvalidData("embedding dimension is zero".into()));
        }
        let mut ids = HashSet::with_capacity(patches.len());
        let mut cells = HashSet::with_capacity(patches.len());
        for (j, p) in patches.iter().enumerate() {
            if p.coarse_label > 1 {
                return Err(Error::InvalidData(format!(
                    "coarse_label {} at line {j} is not 0 or 1",
                    p.coarse_label
                )));
            }
            if !ids.insert(p.patch_id.as_str()) {
                return Err(Error::InvalidData(format!(
                    "duplicate patch_id {:?} at line {j}",
                    p.patch_id
                )));
            }
            if !cells.insert((p.grid_x, p.grid_y)) {
                return Err(Error::InvalidData(format!(
                    "duplicate grid coordinate ({}, {}) at line {j}",
                    p.grid_x, p.grid_y
                )));
            }
        }
        for (j, row) in embeddings.rows().enumerate() {
            if row.iter().any(|v| !v.is_finite()) {
                return Err(Error::InvalidData(format!(
                    "non-finite embedding at row {j}"
                )));
            }
            if row.iter().all(|&v| v == 0.0) {
                return Err(Error::InvalidData(format!(
                    "zero-norm embedding at row {j}"
                )));
            }
        }
        Ok(Self {
            slide_id,
            patches,
            embeddings,
            patch_size_px,
            magnification: magnification.into(),
        })
    }

    pub fn slide_id(&self) -> &str {
        &self.slide_id
    }

    pub fn patches(&self) -> &[PatchRecord] {
        &self.patches
    }

    pub fn embeddings(&self) -> &Matrix<f32> {
        &self.embeddings
    }

    pub fn embedding(&self, j: usize) -> &[f32] {
        self.embeddings.row(j)
    }

    pub fn len(&self) -> usize {
        self.patches.len()
    }

    pub fn is_empty(&self) -> bool {
        self.patches.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.embeddings.n_cols()
    }

    pub fn patch_size_px(&self) -> u32 {
        self.patch_size_px
    }

    pub fn magnification(&self) -> &str {
        &self.magnification
    }

    pub fn coarse_positive_count(&self) -> usize {
        self.patches.iter().filter(|p| p.coarse_label == 1).count()
    }

    /// Coarse annotation as a label table with score equal to the label.
    pub fn coarse_labels(&self) -> LabelTable {
        let entries = self
            .patches
            .iter()
            .map(|p| LabelEntry {
                patch_id: p.patch_id.clone(),
                label: p.coarse_label,
                score: f32::from(p.coarse_label),
            })
            .collect();
        LabelTable {
            slide_id: self.slide_id.clone(),
            entries,
        }
    }

    /// Copy of this slide with the coarse labels replaced.
    pub fn with_coarse_labels(&self, labels: &[u8]) -> Result<Self> {
        if labels.len() != self.len() {
            return Err(Error::InvalidData(format!(
                "count mismatch: {} labels for {} patches",
                labels.len(),
                self.len()
            )));
        }
        let patches = self
            .patches
            .iter()
            .zip(labels)
            .map(|(p, &l)| PatchRecord {
                coarse_label: l,
                ..p.clone()
            })
            .collect();
        Self::new(
            self.slide_id.clone(),
            patches,
            self.embeddings.clone(),
            self.patch_size_px,
            self.magnification.clone(),
        )
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PrototypeLevel {
    Local,
    Global,
}

/// Prototype vectors with their cluster sizes.
#[derive(Debug, Clone, PartialEq)]
pub struct PrototypeSet {
    level: PrototypeLevel,
    source_slide: Option<String>,
    vectors: Matrix<f32>,
    member_counts: Vec<u64>,
}

impl PrototypeSet {
    pub fn new(
        level: PrototypeLevel,
        source_slide: Option<String>,
        vectors: Matrix<f32>,
        member_counts: Vec<u64>,
    ) -> Result<Self> {
        match (level, &source_slide) {
            (PrototypeLevel::Local, None) => {
                return Err(Error::InvalidData(
                    "local prototype set requires a source slide".into(),
                ))
            }
            (PrototypeLevel::Global, Some(_)) => {
                return Err(Error::InvalidData(
                    "global prototype set must not name a source slide".into(),
                ))
            }
            _ => {}
        }
        if vectors.n_rows() == 0 {
            return Err(Error::InvalidData("prototype set is empty".into()));
        }
        if member_counts.len() != vectors.n_rows() {
            return Err(Error::InvalidData(format!(
                "member_counts has {} entries for {} prototypes",
                member_counts.len(),
                vectors.n_rows()
            )));
        }
        if let Some(k) = member_counts.iter().position(|&c| c == 0) {
            return Err(Error::InvalidData(format!("prototype {k} has no members")));
        }
        for (k, row) in vectors.rows().enumerate() {
            if row.iter().any(|v| !v.is_finite()) {
                return Err(Error::InvalidData(format!(
                    "non-finite prototype at row {k}"
                )));
            }
            if row.iter().all(|&v| v == 0.0) {
                return Err(Error::InvalidData(format!(
                    "zero-norm prototype at row {k}"
                )));
            }
        }
        let mut seen = HashSet::with_capacity(vectors.n_rows());
        for (k, row) in vectors.rows().enumerate() {
            let bits: Vec<u32> = row.iter().map(|v| v.to_bits()).collect();
            if !seen.insert(bits) {
                return Err(Error::InvalidData(format!(
                    "prototype {k} duplicates an earlier prototype"
                )));
            }
        }
        Ok(Self {
            level,
            source_slide,
            vectors,
            member_counts,
        })
    }

    pub fn level(&self) -> PrototypeLevel {
        self.level
    }

    pub fn source_slide(&self) -> Option<&str> {
        self.source_slide.as_deref()
    }

    pub fn vectors(&self) -> &Matrix<f32> {
        &self.vectors
    }

    pub fn vector(&self, k: usize) -> &[f32] {
        self.vectors.row(k)
    }

    pub fn member_counts(&self) -> &[u64] {
        &self.member_counts
    }

    pub fn len(&self) -> usize {
        self.vectors.n_rows()
    }

    pub fn is_empty(&self) -> bool {
        self.vectors.n_rows() == 0
    }

    pub fn dim(&self) -> usize {
        self.vectors.n_cols()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LabelEntry {
    pub patch_id: String,
    pub label: u8,
    pub score: f32,
}

/// Per-patch binary labels with the score that produced them.
#[derive(Debug, Clone, PartialEq)]
pub struct LabelTable {
    pub slide_id: String,
    pub entries: Vec<LabelEntry>,
}

impl LabelTable {
    pub fn new(slide_id: impl Into<String>, entries: Vec<LabelEntry>) -> Result<Self> {
        let mut ids = HashSet::with_capacity(entries.len());
        for (i, e) in entries.iter().enumerate() {
            if e.label > 1 {
                return Err(Error::InvalidData(format!(
                    "label {} at row {i} is not 0 or 1",
                    e.label
                )));
            }
            if !(0.0..=1.0).contains(&e.score) {
                return Err(Error::InvalidData(format!(
                    "score {} at row {i} outside [0, 1]",
                    e.score
                )));
            }
            if !ids.insert(e.patch_id.as_str()) {
                return Err(Error::InvalidData(format!(
                    "duplicate patch_id {:?} at row {i}",
                    e.patch_id
                )));
            }
        }
        Ok(Self {
            slide_id: slide_id.into(),
            entries,
        })
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn labels(&self) -> Vec<u8> {
        self.entries.iter().map(|e| e.label).collect()
    }

    pub fn positive_count(&self) -> usize {
        self.entries.iter().filter(|e| e.label == 1).count()
    }

    /// Checks that this table has exactly one entry per patch of `slide`, in slide order.
    pub fn check_matches(&self, slide: &SlideDataset) -> Result<()> {
        if self.entries.len() != slide.len() {
            return Err(Error::InvalidData(format!(
                "label table has {} entries for {} patches",
                self.entries.len(),
                slide.len()
            )));
        }
        for (j, (e, p)) in self.entries.iter().zip(slide.patches()).enumerate() {
            if e.patch_id != p.patch_id {
                return Err(Error::InvalidData(format!(
                    "label row {j} is {:?}, expected {:?}",
                    e.patch_id, p.patch_id
                )));
            }
        }
        Ok(())
    }
}
