//! Grid-artifact metric (q1). Scanner stitching faults show up as
//! periodic brightness seams, so content-free patches of a clean slide
//! should have near-homogeneous gray levels. The metric compares the mean
//! gray-level variance of five background patches against a calibrated
//! no-grid reference variance.

use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::num::Real;
use crate::pyramid::{white_fraction, PatchRecord};
use crate::raster::PatchPixels;

#[derive(Debug, Error, PartialEq, Eq)]
pub enum GridError {
    #[error("need 5 content-free patches, found {0}")]
    InsufficientBackground(usize),
    #[error("calibration needs at least {need} patches, got {got}")]
    TooFewSamples { got: usize, need: usize },
    #[error("degenerate calibration: reference variance is zero")]
    DegenerateCalibration,
}

/// Minimum number of reference patches for a calibration run.
pub const CALIBRATION_MIN_SAMPLES: usize = 30;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum ThresholdSource {
    #[default]
    Percentile95,
    StdUpper,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum GrayscaleConvention {
    #[default]
    Bt601,
}

/// Reference statistics of content-free patches from clean slides.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GridCalibration<R> {
    pub v_nogrid: R,
    pub percentile95: R,
    pub sample_count: usize,
    #[serde(default)]
    pub grayscale: GrayscaleConvention,
    #[serde(default)]
    pub threshold_source: ThresholdSource,
}

impl<R: Real + Serialize + for<'de> Deserialize<'de>> GridCalibration<R> {
    pub fn load(path: &Path) -> std::io::Result<Self> {
        let text = std::fs::read_to_string(path)?;
        serde_json::from_str(&text).map_err(std::io::Error::other)
    }

    pub fn save(&self, path: &Path) -> std::io::Result<()> {
        std::fs::write(path, serde_json::to_string_pretty(self).map_err(std::io::Error::other)?)
    }
}

/// The measurements behind one q1 evaluation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GridMeasurement<R> {
    /// Grid coordinates of the five selected patches.
    pub patches: Vec<(u32, u32)>,
    /// Mean gray level per selected patch.
    pub m_patch: Vec<R>,
    /// Population gray-level variance per selected patch.
    pub v_patch: Vec<R>,
    /// Mean of the five patch variances.
    pub v_wsi: R,
    pub q1: R,
}

/// Population mean and variance of the patch's non-padding gray levels.
pub fn patch_mean_var<R: Real>(pixels: &PatchPixels) -> (R, R) {
    let gray = pixels.gray_valid();
    assert!(!gray.is_empty(), "patch has no valid pixels");
    let n = R::of_usize(gray.len());
    let mut sum = R::zero();
    for &g in &gray {
        sum += R::of(g as f64);
    }
    let mean = sum / n;
    let mut ss = R::zero();
    for &g in &gray {
        let d = R::of(g as f64) - mean;
        ss += d * d;
    }
    (mean, ss / n)
}

/// Pick the five content-free patches used for the grid measurement:
/// the white patches with the highest white fraction, ties resolved by
/// proximity to the four corners and the center of the grid so that the
/// selection spreads spatially and is independent of enumeration order.
pub fn select_content_free_patches<'a>(
    patches: &[&'a PatchRecord],
    rows: u32,
    cols: u32,
) -> Result<[&'a PatchRecord; 5], GridError> {
    let mut candidates: Vec<(&PatchRecord, f64)> = patches
        .iter()
        .filter(|p| p.is_white)
        .map(|p| (*p, white_fraction(&p.pixels)))
        .collect();
    if candidates.len() < 5 {
        return Err(GridError::InsufficientBackground(candidates.len()));
    }
    let max_i = (rows - 1) as f64;
    let max_j = (cols - 1) as f64;
    let anchors = [
        (0.0, 0.0),
        (0.0, max_j),
        (max_i, 0.0),
        (max_i, max_j),
        (max_i / 2.0, max_j / 2.0),
    ];
    let mut picked: Vec<&PatchRecord> = Vec::with_capacity(5);
    for (ai, aj) in anchors {
        let best = candidates
            .iter()
            .enumerate()
            .min_by(|(_, (a, fa)), (_, (b, fb))| {
                let da = dist2(a, ai, aj);
                let db = dist2(b, ai, aj);
                fb.partial_cmp(fa)
                    .unwrap()
                    .then(da.partial_cmp(&db).unwrap())
                    .then((a.grid_i, a.grid_j).cmp(&(b.grid_i, b.grid_j)))
            })
            .map(|(idx, _)| idx)
            .expect("candidates not empty");
        picked.push(candidates.swap_remove(best).0);
    }
    Ok(picked.try_into().map_err(|_| GridError::InsufficientBackground(0)).unwrap())
}

fn dist2(p: &PatchRecord, ai: f64, aj: f64) -> f64 {
    let di = p.grid_i as f64 - ai;
    let dj = p.grid_j as f64 - aj;
    di * di + dj * dj
}

/// Relative deviation of the measured variance from the reference,
/// mapped onto [0, 1] where 1 means no deviation.
pub fn q1_from_deviation<R: Real>(v_wsi: R, v_nogrid: R) -> R {
    let d = (v_wsi - v_nogrid).abs() / v_nogrid;
    (R::one() - d).clamp01()
}

pub fn compute_q1<R: Real>(
    patches: &[&PatchRecord; 5],
    cal: &GridCalibration<R>,
) -> GridMeasurement<R> {
    let mut m_patch = Vec::with_capacity(5);
    let mut v_patch = Vec::with_capacity(5);
    let mut coords = Vec::with_capacity(5);
    for p in patches {
        let (m, v) = patch_mean_var::<R>(&p.pixels);
        m_patch.push(m);
        v_patch.push(v);
        coords.push((p.grid_i, p.grid_j));
    }
    let v_wsi = v_patch.iter().fold(R::zero(), |a, &b| a + b) / R::of_usize(5);
    GridMeasurement {
        patches: coords,
        m_patch,
        v_patch,
        v_wsi,
        q1: q1_from_deviation(v_wsi, cal.v_nogrid),
    }
}

/// Fit a calibration from content-free patches of clean, grid-free
/// reference slides.
pub fn calibrate_grid<R: Real>(
    reference_patches: &[&PatchPixels],
) -> Result<GridCalibration<R>, GridError> {
    if reference_patches.len() < CALIBRATION_MIN_SAMPLES {
        return Err(GridError::TooFewSamples {
            got: reference_patches.len(),
            need: CALIBRATION_MIN_SAMPLES,
        });
    }
    let variances: Vec<R> =
        reference_patches.iter().map(|p| patch_mean_var::<R>(p).1).collect();
    let n = variances.len();
    let v_nogrid = variances.iter().fold(R::zero(), |a, &b| a + b) / R::of_usize(n);
    if v_nogrid <= R::zero() {
        return Err(GridError::DegenerateCalibration);
    }
    let mut sorted = variances;
    sorted.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let rank = ((0.95 * n as f64).ceil() as usize).clamp(1, n);
    Ok(GridCalibration {
        v_nogrid,
        percentile95: sorted[rank - 1],
        sample_count: n,
        grayscale: GrayscaleConvention::Bt601,
        threshold_source: ThresholdSource::Percentile95,
    })
}
