//! Synthetic slide cohorts with planted embedding structure and coarse-annotation noise.
//!
//! Each tissue pattern is an isotropic Gaussian blob. Pattern means share a
//! common anchor direction (so embeddings occupy a cone, as foundation-model
//! features do) plus mutually orthogonal offsets, which puts every pair of
//! means exactly `6·blob_sigma` apart. Noise of cancer patterns has expected
//! norm `blob_sigma`; the other patterns are `tissue_spread` times more
//! diffuse, like heterogeneous stroma around compact tumour. Cancer regions are unions of
//! rectangles. The coarse annotation is the true mask dilated by
//! `dilation_radius`, with labels in a band around the true boundary flipped
//! at `boundary_flip_rate`.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Exp1, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::data::{LabelEntry, LabelTable, Matrix, PatchRecord, SlideDataset};
use crate::error::{Error, Result};

/// Distance between every pair of pattern means, in units of `blob_sigma`.
pub const PATTERN_SEPARATION_SIGMAS: f64 = 6.0;

const STREAM_MEANS: u64 = 0;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SynthSpec {
    pub grid_w: u32,
    pub grid_h: u32,
    pub d: usize,
    pub n_tissue_patterns: usize,
    /// The first `n_cancer_patterns` patterns are the positive ones.
    pub n_cancer_patterns: usize,
    /// Expected norm of the within-pattern noise of cancer patterns.
    pub blob_sigma: f64,
    /// Noise norm of the non-cancer patterns, in units of `blob_sigma`.
    pub tissue_spread: f64,
    /// Norm of the shared anchor component of every pattern mean, in units of `blob_sigma`.
    pub anchor_sigmas: f64,
    pub region_count: u32,
    pub boundary_flip_rate: f64,
    pub dilation_radius: u32,
    pub seed: u64,
}

impl Default for SynthSpec {
    fn default() -> Self {
        Self {
            grid_w: 64,
            grid_h: 32,
            d: 32,
            n_tissue_patterns: 6,
            n_cancer_patterns: 2,
            blob_sigma: 0.1,
            tissue_spread: 4.0,
            anchor_sigmas: 2.0,
            region_count: 2,
            boundary_flip_rate: 0.25,
            dilation_radius: 2,
            seed: 0,
        }
    }
}

impl SynthSpec {
    pub fn validate(&self) -> Result<()> {
        let fail = |m: String| Err(Error::Config(m));
        if self.grid_w == 0 || self.grid_h == 0 {
            return fail("grid must be non-empty".into());
        }
        if self.n_cancer_patterns < 1 {
            return fail("n_cancer_patterns must be at least 1".into());
        }
        if self.n_cancer_patterns >= self.n_tissue_patterns {
            return fail(format!(
                "n_cancer_patterns ({}) must be below n_tissue_patterns ({}) so negatives have a pattern",
                self.n_cancer_patterns, self.n_tissue_patterns
            ));
        }
        if self.d < self.n_tissue_patterns + 1 {
            return fail(format!(
                "d = {} too small for {} orthogonal pattern offsets plus an anchor",
                self.d, self.n_tissue_patterns
            ));
        }
        if !(self.blob_sigma > 0.0 && self.blob_sigma.is_finite()) {
            return fail(format!("blob_sigma = {} must be > 0", self.blob_sigma));
        }
        if !(self.tissue_spread > 0.0 && self.tissue_spread.is_finite()) {
            return fail(format!(
                "tissue_spread = {} must be > 0",
                self.tissue_spread
            ));
        }
        if !(self.anchor_sigmas >= 0.0 && self.anchor_sigmas.is_finite()) {
            return fail(format!(
                "anchor_sigmas = {} must be >= 0",
                self.anchor_sigmas
            ));
        }
        if !(0.0..1.0).contains(&self.boundary_flip_rate) {
            return fail(format!(
                "boundary_flip_rate = {} must lie in [0, 1)",
                self.boundary_flip_rate
            ));
        }
        Ok(())
    }

    fn slide_rng(&self, slide_index: u32, purpose: u64) -> ChaCha8Rng {
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        rng.set_stream(1 + 3 * u64::from(slide_index) + purpose);
        rng
    }
}

/// One generated slide with its ground truth.
#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticSlide {
    pub slide: SlideDataset,
    pub truth: LabelTable,
    /// Tissue pattern each patch was drawn from.
    pub patterns: Vec<usize>,
}

/// Pattern means, row `p` for pattern `p`. Shared by every slide of a seed.
pub fn pattern_means(spec: &SynthSpec) -> Result<Matrix<f64>> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    rng.set_stream(STREAM_MEANS);
    let basis = orthonormal_basis(spec.d, spec.n_tissue_patterns + 1, &mut rng);
    let sigma = spec.blob_sigma;
    let anchor = spec.anchor_sigmas * sigma;
    let offset = PATTERN_SEPARATION_SIGMAS * sigma / std::f64::consts::SQRT_2;
    let rows: Vec<Vec<f64>> = (0..spec.n_tissue_patterns)
        .map(|p| {
            basis[0]
                .iter()
                .zip(&basis[p + 1])
                .map(|(a, o)| anchor * a + offset * o)
                .collect()
        })
        .collect();
    for i in 0..rows.len() {
        for j in 0..i {
            let dist = rows[i]
                .iter()
                .zip(&rows[j])
                .map(|(a, b)| (a - b) * (a - b))
                .sum::<f64>()
                .sqrt();
            if dist < PATTERN_SEPARATION_SIGMAS * sigma * (1.0 - 1e-9) {
                return Err(Error::Internal(format!(
                    "patterns {i} and {j} only {dist} apart"
                )));
            }
        }
    }
    Matrix::from_rows(&rows)
}

fn orthonormal_basis(d: usize, n: usize, rng: &mut ChaCha8Rng) -> Vec<Vec<f64>> {
    let mut basis: Vec<Vec<f64>> = Vec::with_capacity(n);
    while basis.len() < n {
        let mut v: Vec<f64> = (0..d).map(|_| rng.sample(StandardNormal)).collect();
        // Gram-Schmidt, applied twice
        for _ in 0..2 {
            for b in &basis {
                let dot: f64 = v.iter().zip(b).map(|(x, y)| x * y).sum();
                v.iter_mut().zip(b).for_each(|(x, y)| *x -= dot * y);
            }
        }
        let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        if norm > 1e-6 {
            v.iter_mut().for_each(|x| *x /= norm);
            basis.push(v);
        }
    }
    basis
}

/// Union of random overlapping rectangles per region.
fn cancer_mask(spec: &SynthSpec, rng: &mut ChaCha8Rng) -> Result<Vec<bool>> {
    let (w, h) = (spec.grid_w, spec.grid_h);
    let mut mask = vec![false; (w * h) as usize];
    if spec.region_count == 0 {
        return Ok(mask);
    }
    const MIN_SIDE: u32 = 2;
    if w < MIN_SIDE || h < MIN_SIDE {
        return Err(Error::Config(format!(
            "region larger than grid: minimum region side {MIN_SIDE} exceeds {w}x{h} grid"
        )));
    }
    let side = |extent: u32, rng: &mut ChaCha8Rng| {
        let lo = (extent / 8).max(MIN_SIDE);
        let hi = (extent / 3).max(lo);
        rng.gen_range(lo..=hi)
    };
    for _ in 0..spec.region_count {
        let rw = side(w, rng);
        let rh = side(h, rng);
        let x0 = rng.gen_range(0..=w - rw);
        let y0 = rng.gen_range(0..=h - rh);
        let mut rects = vec![(x0, y0, rw, rh)];
        for _ in 0..rng.gen_range(0..=2) {
            // satellite rectangle anchored inside the first one
            let sw = side(w, rng);
            let sh = side(h, rng);
            let ax = rng.gen_range(x0..x0 + rw);
            let ay = rng.gen_range(y0..y0 + rh);
            let sx = ax.saturating_sub(rng.gen_range(0..sw)).min(w - sw);
            let sy = ay.saturating_sub(rng.gen_range(0..sh)).min(h - sh);
            rects.push((sx, sy, sw, sh));
        }
        for (rx, ry, rw, rh) in rects {
            for y in ry..ry + rh {
                for x in rx..rx + rw {
                    mask[(y * w + x) as usize] = true;
                }
            }
        }
    }
    Ok(mask)
}

/// Square (Chebyshev) dilation; negative radius erodes.
fn morph(mask: &[bool], w: u32, h: u32, radius: i64) -> Vec<bool> {
    if radius == 0 {
        return mask.to_vec();
    }
    let r = radius.abs();
    let dilate = radius > 0;
    let (w, h) = (i64::from(w), i64::from(h));
    let mut out = vec![false; mask.len()];
    for y in 0..h {
        for x in 0..w {
            let mut hit = !dilate;
            'scan: for dy in -r..=r {
                for dx in -r..=r {
                    let (nx, ny) = (x + dx, y + dy);
                    let inside = nx >= 0 && ny >= 0 && nx < w && ny < h;
                    let v = inside && mask[(ny * w + nx) as usize];
                    if dilate && v {
                        hit = true;
                        break 'scan;
                    }
                    // out-of-grid cells count as background when eroding
                    if !dilate && !v {
                        hit = false;
                        break 'scan;
                    }
                }
            }
            out[(y * w + x) as usize] = hit;
        }
    }
    out
}

/// Cells where coarse labels may differ from the truth: one patch inside the
/// true boundary out to one patch beyond the dilated boundary.
pub fn noise_band(truth: &[bool], spec: &SynthSpec) -> Vec<bool> {
    let outer = morph(
        truth,
        spec.grid_w,
        spec.grid_h,
        i64::from(spec.dilation_radius) + 1,
    );
    let inner = morph(truth, spec.grid_w, spec.grid_h, -1);
    outer.iter().zip(&inner).map(|(&o, &i)| o && !i).collect()
}

fn sample_weighted(weights: &[f64], rng: &mut ChaCha8Rng) -> usize {
    let total: f64 = weights.iter().sum();
    let mut target = rng.gen::<f64>() * total;
    for (i, &w) in weights.iter().enumerate() {
        if target < w {
            return i;
        }
        target -= w;
    }
    weights.len() - 1
}

pub fn generate_slide(spec: &SynthSpec, slide_index: u32) -> Result<SyntheticSlide> {
    let means = pattern_means(spec)?;
    generate_with_means(spec, slide_index, &means)
}

fn generate_with_means(
    spec: &SynthSpec,
    slide_index: u32,
    means: &Matrix<f64>,
) -> Result<SyntheticSlide> {
    let mut layout_rng = spec.slide_rng(slide_index, 0);
    let mut embed_rng = spec.slide_rng(slide_index, 1);
    let mut flip_rng = spec.slide_rng(slide_index, 2);

    let truth_mask = cancer_mask(spec, &mut layout_rng)?;
    // per-slide pattern proportions, flat Dirichlet
    let weights: Vec<f64> = (0..spec.n_tissue_patterns)
        .map(|_| layout_rng.sample::<f64, _>(Exp1))
        .collect();
    let (cancer_w, normal_w) = weights.split_at(spec.n_cancer_patterns);

    let dilated = morph(
        &truth_mask,
        spec.grid_w,
        spec.grid_h,
        i64::from(spec.dilation_radius),
    );
    let band = noise_band(&truth_mask, spec);
    // one draw per cell in grid order
    let flips: Vec<bool> = band
        .iter()
        .map(|&in_band| {
            let u: f64 = flip_rng.gen();
            in_band && u < spec.boundary_flip_rate
        })
        .collect();

    let n = truth_mask.len();
    let d = spec.d;
    // per-coordinate scale giving an expected noise norm of blob_sigma
    let coord_sigma = spec.blob_sigma / (d as f64).sqrt();
    let tissue_sigma = coord_sigma * spec.tissue_spread;
    let mut patches = Vec::with_capacity(n);
    let mut truth_entries = Vec::with_capacity(n);
    let mut data = Vec::with_capacity(n * d);
    let mut patterns = Vec::with_capacity(n);
    for y in 0..spec.grid_h {
        for x in 0..spec.grid_w {
            let cell = (y * spec.grid_w + x) as usize;
            let positive = truth_mask[cell];
            let pattern = if positive {
                sample_weighted(cancer_w, &mut embed_rng)
            } else {
                spec.n_cancer_patterns + sample_weighted(normal_w, &mut embed_rng)
            };
            let scale = if positive { coord_sigma } else { tissue_sigma };
            for &m in means.row(pattern) {
                let noise: f64 = embed_rng.sample(StandardNormal);
                data.push((m + scale * noise) as f32);
            }
            let patch_id = format!("x{x}_y{y}");
            let coarse = dilated[cell] ^ flips[cell];
            patches.push(PatchRecord {
                patch_id: patch_id.clone(),
                grid_x: x,
                grid_y: y,
                coarse_label: u8::from(coarse),
            });
            truth_entries.push(LabelEntry {
                patch_id,
                label: u8::from(positive),
                score: if positive { 1.0 } else { 0.0 },
            });
            patterns.push(pattern);
        }
    }
    let slide_id = format!("slide_{slide_index:03}");
    let slide = SlideDataset::new(
        slide_id.clone(),
        patches,
        Matrix::from_vec(n, d, data)?,
        256,
        "40x",
    )?;
    Ok(SyntheticSlide {
        slide,
        truth: LabelTable::new(slide_id, truth_entries)?,
        patterns,
    })
}

pub fn generate_cohort(spec: &SynthSpec, n_slides: u32) -> Result<Vec<SyntheticSlide>> {
    if n_slides < 1 {
        return Err(Error::Config("n_slides must be at least 1".into()));
    }
    let means = pattern_means(spec)?;
    (0..n_slides)
        .map(|i| generate_with_means(spec, i, &means))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small() -> SynthSpec {
        SynthSpec {
            grid_w: 24,
            grid_h: 16,
            d: 8,
            n_tissue_patterns: 4,
            n_cancer_patterns: 1,
            ..Default::default()
        }
    }

    #[test]
    fn means_are_exactly_separated() {
        let spec = SynthSpec::default();
        let m = pattern_means(&spec).unwrap();
        for i in 0..m.n_rows() {
            for j in 0..i {
                let d: f64 = m
                    .row(i)
                    .iter()
                    .zip(m.row(j))
                    .map(|(a, b)| (a - b).powi(2))
                    .sum::<f64>()
                    .sqrt();
                assert!((d - 6.0 * spec.blob_sigma).abs() < 1e-12, "{d}");
            }
        }
    }

    #[test]
    fn invalid_specs_rejected() {
        let bad = SynthSpec {
            n_cancer_patterns: 7,
            ..Default::default()
        };
        assert!(matches!(bad.validate(), Err(Error::Config(_))));
        let tiny = SynthSpec {
            grid_w: 1,
            ..small()
        };
        let err = generate_slide(&tiny, 0).unwrap_err();
        assert!(err.to_string().contains("region larger than grid"), "{err}");
    }

    #[test]
    fn no_noise_means_coarse_equals_truth() {
        let spec = SynthSpec {
            dilation_radius: 0,
            boundary_flip_rate: 0.0,
            ..small()
        };
        let s = generate_slide(&spec, 2).unwrap();
        assert_eq!(s.slide.coarse_labels().labels(), s.truth.labels());
        assert!(s.truth.positive_count() > 0);
    }

    #[test]
    fn coarse_errors_stay_in_band() {
        let spec = SynthSpec {
            boundary_flip_rate: 0.5,
            dilation_radius: 3,
            ..small()
        };
        let s = generate_slide(&spec, 1).unwrap();
        let truth: Vec<bool> = s.truth.entries.iter().map(|e| e.label == 1).collect();
        let band = noise_band(&truth, &spec);
        for (j, p) in s.slide.patches().iter().enumerate() {
            if p.coarse_label != s.truth.entries[j].label {
                assert!(band[j], "patch {} differs outside band", p.patch_id);
            }
        }
    }

    #[test]
    fn generation_is_deterministic() {
        let a = generate_slide(&small(), 3).unwrap();
        let b = generate_slide(&small(), 3).unwrap();
        assert_eq!(a, b);
        let c = generate_slide(&small(), 4).unwrap();
        assert_ne!(a.slide.embeddings(), c.slide.embeddings());
    }

    #[test]
    fn cohort_of_one_is_the_single_slide() {
        let cohort = generate_cohort(&small(), 1).unwrap();
        assert_eq!(cohort[0], generate_slide(&small(), 0).unwrap());
        assert!(generate_cohort(&small(), 0).is_err());
    }

    #[test]
    fn nearest_mean_recovers_truth() {
        let spec = SynthSpec::default();
        let means = pattern_means(&spec).unwrap();
        let cohort = generate_cohort(&spec, 4).unwrap();
        let (mut right, mut total) = (0usize, 0usize);
        for s in &cohort {
            for j in 0..s.slide.len() {
                let z = s.slide.embedding(j);
                let nearest = (0..means.n_rows())
                    .map(|p| {
                        let d: f64 = z
                            .iter()
                            .zip(means.row(p))
                            .map(|(&a, b)| (f64::from(a) - b).powi(2))
                            .sum();
                        (d, p)
                    })
                    .min_by(|a, b| a.0.total_cmp(&b.0))
                    .unwrap()
                    .1;
                let predicted = u8::from(nearest < spec.n_cancer_patterns);
                right += usize::from(predicted == s.truth.entries[j].label);
                total += 1;
            }
        }
        assert!(right as f64 / total as f64 >= 0.999, "{right}/{total}");
    }

    #[test]
    fn slides_share_pattern_means() {
        let spec = SynthSpec::default();
        let cohort = generate_cohort(&spec, 2).unwrap();
        let empirical = |s: &SyntheticSlide, p: usize| {
            let mut sum = vec![0.0f64; spec.d];
            let mut n = 0;
            for j in (0..s.slide.len()).filter(|&j| s.patterns[j] == p) {
                sum.iter_mut()
                    .zip(s.slide.embedding(j))
                    .for_each(|(a, &b)| *a += f64::from(b));
                n += 1;
            }
            assert!(n > 10, "pattern {p} has only {n} patches");
            sum.into_iter().map(|v| v / n as f64).collect::<Vec<_>>()
        };
        for p in 0..spec.n_cancer_patterns {
            let a = empirical(&cohort[0], p);
            let b = empirical(&cohort[1], p);
            let dist = a
                .iter()
                .zip(&b)
                .map(|(x, y)| (x - y).powi(2))
                .sum::<f64>()
                .sqrt();
            assert!(dist < spec.blob_sigma, "pattern {p}: {dist}");
        }
    }

    #[test]
    fn coarse_dice_falls_with_dilation() {
        let dice = |r: u32| {
            let spec = SynthSpec {
                boundary_flip_rate: 0.3,
                dilation_radius: r,
                ..SynthSpec::default()
            };
            let s = generate_slide(&spec, 0).unwrap();
            let coarse = s.slide.coarse_labels();
            let (mut tp, mut pos) = (0usize, 0usize);
            for (c, t) in coarse.entries.iter().zip(&s.truth.entries) {
                tp += usize::from(c.label == 1 && t.label == 1);
                pos += usize::from(c.label == 1) + usize::from(t.label == 1);
            }
            2.0 * tp as f64 / pos as f64
        };
        let values: Vec<f64> = [0, 1, 2, 4].into_iter().map(dice).collect();
        assert!(values[2] < 1.0);
        assert!(values.windows(2).all(|w| w[1] < w[0]), "{values:?}");
    }

    #[test]
    fn morphology_on_a_point() {
        let mut m = vec![false; 25];
        m[12] = true;
        let d = morph(&m, 5, 5, 1);
        assert_eq!(d.iter().filter(|&&v| v).count(), 9);
        let e = morph(&d, 5, 5, -1);
        assert_eq!(e, m);
    }
}
