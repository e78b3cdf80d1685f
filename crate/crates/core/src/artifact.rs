//! Marker (q3) and air/gel bubble (q4) occlusion metrics. Both consume
//! per-patch binary segmentation masks from an inference backend; the
//! metric itself is the complement of the mean occluded fraction over the
//! content patches of the slide.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::num::Real;
use crate::pyramid::Magnification;
use crate::raster::PATCH_SIZE;

#[derive(Debug, Error, PartialEq, Eq)]
pub enum ArtifactError {
    #[error("mask is {w}x{h}, expected {expected}x{expected}", expected = PATCH_SIZE)]
    MaskSizeMismatch { w: usize, h: usize },
    #[error("no content patches: occlusion is not evaluable")]
    NoContentPatches,
    #[error("{got} detected patches exceed {content} content patches")]
    MoreDetectionsThanPatches { got: usize, content: usize },
}

/// Artifact class a segmentation mask belongs to.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MaskClass {
    Marker,
    Bubble,
}

impl MaskClass {
    pub fn as_str(self) -> &'static str {
        match self {
            MaskClass::Marker => "marker",
            MaskClass::Bubble => "bubble",
        }
    }

    pub fn from_str(s: &str) -> Option<Self> {
        match s {
            "marker" => Some(MaskClass::Marker),
            "bubble" => Some(MaskClass::Bubble),
            _ => None,
        }
    }
}

/// A packed 512x512 binary mask.
#[derive(Clone, PartialEq, Eq)]
pub struct MaskBits {
    words: Vec<u64>,
}

impl MaskBits {
    const WORDS: usize = PATCH_SIZE * PATCH_SIZE / 64;

    pub fn empty() -> Self {
        Self { words: vec![0; Self::WORDS] }
    }

    pub fn full() -> Self {
        Self { words: vec![u64::MAX; Self::WORDS] }
    }

    pub fn set(&mut self, x: usize, y: usize, value: bool) {
        let bit = y * PATCH_SIZE + x;
        if value {
            self.words[bit / 64] |= 1 << (bit % 64);
        } else {
            self.words[bit / 64] &= !(1 << (bit % 64));
        }
    }

    pub fn get(&self, x: usize, y: usize) -> bool {
        let bit = y * PATCH_SIZE + x;
        self.words[bit / 64] >> (bit % 64) & 1 == 1
    }

    pub fn count_ones(&self) -> u64 {
        self.words.iter().map(|w| w.count_ones() as u64).sum()
    }

    /// Build from row-major booleans; dimensions must be exactly one patch.
    pub fn from_rows(rows: &[Vec<bool>]) -> Result<Self, ArtifactError> {
        let h = rows.len();
        let w = rows.first().map(|r| r.len()).unwrap_or(0);
        if w != PATCH_SIZE || h != PATCH_SIZE {
            return Err(ArtifactError::MaskSizeMismatch { w, h });
        }
        let mut bits = Self::empty();
        for (y, row) in rows.iter().enumerate() {
            for (x, &v) in row.iter().enumerate() {
                if v {
                    bits.set(x, y, true);
                }
            }
        }
        Ok(bits)
    }
}

impl std::fmt::Debug for MaskBits {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "MaskBits({} set)", self.count_ones())
    }
}

/// One per-patch segmentation mask delivered by a backend.
#[derive(Debug, Clone)]
pub struct SegMask {
    pub magnification: Magnification,
    pub grid_i: u32,
    pub grid_j: u32,
    pub class: MaskClass,
    pub bits: MaskBits,
}

/// Fraction of the patch covered by the mask.
pub fn patch_occlusion<R: Real>(mask: &SegMask) -> R {
    R::of(mask.bits.count_ones() as f64) / R::of((PATCH_SIZE * PATCH_SIZE) as f64)
}

/// Slide-level occlusion quality for one artifact class.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OcclusionScore<R> {
    pub class: MaskClass,
    /// Patches in which the class was detected.
    pub detected_patches: usize,
    /// Content patches the slide was divided into.
    pub content_patches: usize,
    /// Mean occlusion over all content patches (undetected contribute 0).
    pub mean_occlusion: R,
    /// Quality score: 1 - mean occlusion, clamped to [0, 1].
    pub quality: R,
    /// Diagnostic: mean occlusion over the detected patches only.
    pub detected_only_mean: Option<R>,
}

/// Aggregate per-patch occlusion ratios into the slide-level score.
/// `ratios` holds the occluded fraction of each patch where the class was
/// detected; patches without detections contribute zero occlusion.
pub fn aggregate_occlusion<R: Real>(
    ratios: &[R],
    class: MaskClass,
    total_content_patches: usize,
) -> Result<OcclusionScore<R>, ArtifactError> {
    if total_content_patches == 0 {
        return Err(ArtifactError::NoContentPatches);
    }
    if ratios.len() > total_content_patches {
        return Err(ArtifactError::MoreDetectionsThanPatches {
            got: ratios.len(),
            content: total_content_patches,
        });
    }
    let sum = ratios.iter().fold(R::zero(), |a, &b| a + b);
    let mean = sum / R::of_usize(total_content_patches);
    Ok(OcclusionScore {
        class,
        detected_patches: ratios.len(),
        content_patches: total_content_patches,
        mean_occlusion: mean,
        quality: (R::one() - mean).clamp01(),
        detected_only_mean: (!ratios.is_empty()).then(|| sum / R::of_usize(ratios.len())),
    })
}
