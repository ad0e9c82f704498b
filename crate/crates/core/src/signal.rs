//! Signal windows, patching, mask sampling and session-position statistics.

use std::collections::BTreeMap;

use ndarray::Array2;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{invalid, shape_err, Error, Result};
use crate::tape::Real;

/// Variance below which a window is treated as a flat line.
pub const FLAT_VARIANCE: f64 = 1e-12;

/// One fixed-length single-channel window.
#[derive(Clone, Debug, PartialEq)]
pub struct Epoch {
    pub modality: usize,
    pub samples: Vec<f32>,
    pub session_id: u32,
    /// Position of this window within its session.
    pub segment_index: usize,
    pub labels: BTreeMap<String, usize>,
}

impl Epoch {
    pub fn new(modality: usize, samples: Vec<f32>, session_id: u32, segment_index: usize) -> Self {
        Self { modality, samples, session_id, segment_index, labels: BTreeMap::new() }
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Normalized {
    pub values: Vec<f32>,
    /// Set when the input had (numerically) zero variance.
    pub degenerate: bool,
}

/// Zero mean, unit population variance. Flat inputs map to zeros.
pub fn zscore_normalize(samples: &[f32]) -> Result<Normalized> {
    if samples.is_empty() {
        return invalid("cannot normalize an empty signal");
    }
    let n = samples.len() as f64;
    let mean = samples.iter().map(|&x| x as f64).sum::<f64>() / n;
    let var = samples.iter().map(|&x| (x as f64 - mean).powi(2)).sum::<f64>() / n;
    if var < FLAT_VARIANCE {
        return Ok(Normalized { values: vec![0.0; samples.len()], degenerate: true });
    }
    let sd = var.sqrt();
    Ok(Normalized {
        values: samples.iter().map(|&x| ((x as f64 - mean) / sd) as f32).collect(),
        degenerate: false,
    })
}

/// A window cut into `P` non-overlapping patches, one per row.
#[derive(Clone, Debug, PartialEq)]
pub struct PatchSequence<F: Real = f32> {
    pub patches: Array2<F>,
}

impl<F: Real> PatchSequence<F> {
    pub fn num_patches(&self) -> usize {
        self.patches.nrows()
    }

    pub fn patch_size(&self) -> usize {
        self.patches.ncols()
    }

    pub fn cast<G: Real>(&self) -> PatchSequence<G> {
        PatchSequence { patches: self.patches.mapv(|x| G::lift(x.as_f64())) }
    }
}

pub fn patchify_samples<F: Real>(samples: &[f32], patch_size: usize) -> Result<PatchSequence<F>> {
    if patch_size == 0 || samples.is_empty() || samples.len() % patch_size != 0 {
        return shape_err(format!(
            "window length {} is not a positive multiple of patch size {patch_size}",
            samples.len()
        ));
    }
    let p = samples.len() / patch_size;
    let data = samples.iter().map(|&x| F::lift32(x)).collect();
    let patches = Array2::from_shape_vec((p, patch_size), data).expect("length checked");
    Ok(PatchSequence { patches })
}

pub fn patchify<F: Real>(epoch: &Epoch, patch_size: usize) -> Result<PatchSequence<F>> {
    patchify_samples(&epoch.samples, patch_size)
}

pub fn depatchify<F: Real>(seq: &PatchSequence<F>) -> Vec<F> {
    seq.patches.iter().copied().collect()
}

/// Partition of patch indices into masked and visible sets.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct MaskPlan {
    pub masked: Vec<usize>,
    pub visible: Vec<usize>,
    pub num_patches: usize,
}

impl MaskPlan {
    /// Every patch visible.
    pub fn full(num_patches: usize) -> Self {
        Self { masked: Vec::new(), visible: (0..num_patches).collect(), num_patches }
    }

    /// Builds a plan from an explicit masked set.
    pub fn from_masked(num_patches: usize, mut masked: Vec<usize>) -> Result<Self> {
        masked.sort_unstable();
        masked.dedup();
        if masked.last().is_some_and(|&m| m >= num_patches) {
            return invalid("masked index out of range");
        }
        let visible = (0..num_patches).filter(|i| masked.binary_search(i).is_err()).collect();
        Ok(Self { masked, visible, num_patches })
    }

    pub fn num_visible(&self) -> usize {
        self.visible.len()
    }

    pub fn is_masked(&self, p: usize) -> bool {
        self.masked.binary_search(&p).is_ok()
    }
}

/// Number of masked patches for a ratio: round half up.
pub fn masked_count(num_patches: usize, ratio: f64) -> usize {
    (ratio * num_patches as f64 + 0.5).floor() as usize
}

/// Uniformly samples `round(ratio·P)` masked patches without replacement.
pub fn sample_mask(num_patches: usize, ratio: f64, rng: &mut impl Rng) -> Result<MaskPlan> {
    if !(ratio > 0.0 && ratio < 1.0) {
        return invalid(format!("mask ratio {ratio} must lie in (0, 1)"));
    }
    let k = masked_count(num_patches, ratio);
    if k < 1 || k + 1 > num_patches {
        return invalid(format!("mask ratio {ratio} over {num_patches} patches leaves no masked or no visible patch"));
    }
    let masked = rand::seq::index::sample(rng, num_patches, k).into_vec();
    MaskPlan::from_masked(num_patches, masked)
}

/// Mean and population std of session lengths (in windows), training split only.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SessionStats {
    pub mean_len: f64,
    pub std_len: f64,
}

pub fn compute_session_stats(lengths: &[usize]) -> Result<SessionStats> {
    if lengths.len() < 2 {
        return invalid("session statistics need at least two sessions");
    }
    let n = lengths.len() as f64;
    let mean = lengths.iter().map(|&l| l as f64).sum::<f64>() / n;
    let var = lengths.iter().map(|&l| (l as f64 - mean).powi(2)).sum::<f64>() / n;
    if var <= 0.0 {
        return Err(Error::DegenerateStats(format!("all {} sessions have length {mean}", lengths.len())));
    }
    Ok(SessionStats { mean_len: mean, std_len: var.sqrt() })
}

/// Standardized position of a window within its session. Not clamped.
pub fn normalize_session_index(segment_index: usize, stats: &SessionStats) -> f64 {
    (segment_index as f64 - stats.mean_len) / stats.std_len
}
