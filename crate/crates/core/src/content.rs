//! Cell-count (q6), cell-mass (q7) and neutrophil-coverage (q8) metrics,
//! computed from detection-backend outputs. Neutrophil area comes from
//! Otsu threshold segmentation inside each detection box; detections that
//! straddle patch borders are deduplicated against their neighbors.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::num::Real;
use crate::pyramid::Magnification;
use crate::raster::{gray_bt601, PatchPixels, PixelRect, PATCH_SIZE};

#[derive(Debug, Error, PartialEq, Eq)]
pub enum ContentError {
    #[error("zero content area: q8 is not evaluable")]
    ZeroContentArea,
}

/// Detection classes emitted by the object-detection backend.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DetectionClass {
    SquamousCell,
    CellMass,
    Neutrophil,
}

impl DetectionClass {
    pub fn as_str(self) -> &'static str {
        match self {
            DetectionClass::SquamousCell => "squamous_cell",
            DetectionClass::CellMass => "cell_mass",
            DetectionClass::Neutrophil => "neutrophil",
        }
    }

    pub fn from_str(s: &str) -> Option<Self> {
        match s {
            "squamous_cell" => Some(DetectionClass::SquamousCell),
            "cell_mass" => Some(DetectionClass::CellMass),
            "neutrophil" => Some(DetectionClass::Neutrophil),
            _ => None,
        }
    }
}

/// A detection box in patch-local pixels. The origin is signed: a box for
/// an object straddling a patch border may spill beyond the patch extent,
/// which is what makes cross-patch duplicates geometrically comparable.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DetBox {
    pub x: i32,
    pub y: i32,
    pub w: u32,
    pub h: u32,
}

impl DetBox {
    pub fn new(x: i32, y: i32, w: u32, h: u32) -> Self {
        Self { x, y, w, h }
    }

    /// Clamp to the patch's valid region for in-patch pixel measurements.
    pub fn clamped(&self, valid_w: usize, valid_h: usize) -> PixelRect {
        let x0 = self.x.clamp(0, valid_w as i32) as u32;
        let y0 = self.y.clamp(0, valid_h as i32) as u32;
        let x1 = (self.x + self.w as i32).clamp(0, valid_w as i32) as u32;
        let y1 = (self.y + self.h as i32).clamp(0, valid_h as i32) as u32;
        PixelRect::new(x0, y0, x1 - x0, y1 - y0)
    }
}

/// One detection delivered by the object-detection backend.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Detection {
    pub magnification: Magnification,
    pub grid_i: u32,
    pub grid_j: u32,
    pub class: DetectionClass,
    pub bbox: DetBox,
    pub confidence: f64,
}

/// Half-open interval box in slide coordinates.
type GlobalBox = (i64, i64, i64, i64);

fn iou_global(a: GlobalBox, b: GlobalBox) -> f64 {
    let ix = a.0.max(b.0);
    let iy = a.1.max(b.1);
    let ir = a.2.min(b.2);
    let ib = a.3.min(b.3);
    if ir <= ix || ib <= iy {
        return 0.0;
    }
    let inter = ((ir - ix) * (ib - iy)) as f64;
    let area = |r: GlobalBox| ((r.2 - r.0) * (r.3 - r.1)) as f64;
    inter / (area(a) + area(b) - inter)
}

impl Detection {
    /// Box in slide coordinates at the detection's magnification.
    pub fn global_bbox(&self) -> GlobalBox {
        let x0 = self.grid_j as i64 * PATCH_SIZE as i64 + self.bbox.x as i64;
        let y0 = self.grid_i as i64 * PATCH_SIZE as i64 + self.bbox.y as i64;
        (x0, y0, x0 + self.bbox.w as i64, y0 + self.bbox.h as i64)
    }

    pub fn iou(&self, other: &Detection) -> f64 {
        iou_global(self.global_bbox(), other.global_bbox())
    }

    fn center(&self) -> (f64, f64) {
        (
            self.bbox.x as f64 + self.bbox.w as f64 / 2.0,
            self.bbox.y as f64 + self.bbox.h as f64 / 2.0,
        )
    }

    /// Whether the box center is close enough to a patch edge that the
    /// same object may have been detected in a neighboring patch.
    fn is_border(&self) -> bool {
        let (cx, cy) = self.center();
        let m = BORDER_MARGIN as f64;
        let s = PATCH_SIZE as f64;
        cx < m || cy < m || cx > s - m || cy > s - m
    }
}

/// Detections below this confidence are ignored.
pub const DEFAULT_CONFIDENCE_FLOOR: f64 = 0.5;
/// Distance from a patch edge within which a detection joins border
/// deduplication.
pub const BORDER_MARGIN: u32 = 16;
/// Two detections in different patches are the same object when their
/// slide-coordinate boxes overlap at least this much.
pub const DEDUP_IOU: f64 = 0.5;

/// Filter one class by the confidence floor and suppress duplicate border
/// detections. The border pass is a single sequential sweep over
/// detections sorted by (i, j, bbox), so the outcome does not depend on
/// input order.
pub fn dedup_class<'a>(
    detections: &'a [Detection],
    class: DetectionClass,
    confidence_floor: f64,
) -> Vec<&'a Detection> {
    let eligible: Vec<&Detection> = detections
        .iter()
        .filter(|d| d.class == class && d.confidence >= confidence_floor)
        .collect();
    let mut kept: Vec<&Detection> = Vec::with_capacity(eligible.len());
    let mut border: Vec<&Detection> = Vec::new();
    for d in eligible {
        if d.is_border() {
            border.push(d);
        } else {
            kept.push(d);
        }
    }
    border.sort_by_key(|d| (d.grid_i, d.grid_j, d.bbox.x, d.bbox.y, d.bbox.w, d.bbox.h));
    let mut kept_border: Vec<&Detection> = Vec::new();
    'candidates: for cand in border {
        for other in kept.iter().chain(kept_border.iter()) {
            let same_patch = other.grid_i == cand.grid_i && other.grid_j == cand.grid_j;
            if !same_patch && cand.iou(other) >= DEDUP_IOU {
                continue 'candidates; // duplicate of an already-kept box
            }
        }
        kept_border.push(cand);
    }
    kept.extend(kept_border);
    kept
}

/// Number of squamous epithelial cells after confidence filtering and
/// border deduplication.
pub fn count_cells(detections: &[Detection], confidence_floor: f64) -> u64 {
    dedup_class(detections, DetectionClass::SquamousCell, confidence_floor).len() as u64
}

pub fn count_masses(detections: &[Detection], confidence_floor: f64) -> u64 {
    dedup_class(detections, DetectionClass::CellMass, confidence_floor).len() as u64
}

/// Cell-count adequacy: full credit at 5000 squamous cells, linear below.
pub fn q6_from_count<R: Real>(x: u64) -> R {
    if x >= 5000 {
        R::one()
    } else {
        R::of(x as f64) / R::of(5000.0)
    }
}

/// Cell-mass burden: full credit at up to 50 masses, hyperbolic above.
pub fn q7_from_mass_count<R: Real>(mass_count: u64) -> R {
    if mass_count <= 50 {
        R::one()
    } else {
        R::of(50.0) / R::of(mass_count as f64)
    }
}

/// Otsu threshold over a 256-bin gray histogram: the level maximizing
/// between-class variance, with classes `[0..=t]` and `(t..=255]`.
/// `None` when the histogram is single-mode (no split has positive
/// between-class variance).
pub fn otsu_threshold(histogram: &[u64; 256]) -> Option<u8> {
    let total: u64 = histogram.iter().sum();
    if total == 0 {
        return None;
    }
    let sum_all: f64 = histogram.iter().enumerate().map(|(g, &c)| g as f64 * c as f64).sum();
    let mut w0 = 0u64;
    let mut sum0 = 0.0f64;
    let mut best: Option<(f64, u8)> = None;
    for t in 0..255usize {
        w0 += histogram[t];
        if w0 == 0 {
            continue;
        }
        let w1 = total - w0;
        if w1 == 0 {
            break;
        }
        sum0 += t as f64 * histogram[t] as f64;
        let m0 = sum0 / w0 as f64;
        let m1 = (sum_all - sum0) / w1 as f64;
        let variance = w0 as f64 * w1 as f64 * (m0 - m1) * (m0 - m1);
        if variance > best.map(|(v, _)| v).unwrap_or(0.0) {
            best = Some((variance, t as u8));
        }
    }
    best.map(|(_, t)| t)
}

/// Foreground (dark-side) pixel count inside a detection box, via Otsu
/// segmentation of the box's BT.601 gray levels. A box with a single-mode
/// histogram has no foreground.
pub fn box_area(patch: &PatchPixels, bbox: &PixelRect) -> u64 {
    let x1 = (bbox.right() as usize).min(patch.valid_w());
    let y1 = (bbox.bottom() as usize).min(patch.valid_h());
    let x0 = (bbox.x as usize).min(x1);
    let y0 = (bbox.y as usize).min(y1);
    let mut histogram = [0u64; 256];
    for y in y0..y1 {
        for x in x0..x1 {
            let [r, g, b] = patch.pixel(x, y);
            histogram[gray_bt601(r, g, b) as usize] += 1;
        }
    }
    let Some(t) = otsu_threshold(&histogram) else {
        return 0;
    };
    histogram[..=t as usize].iter().sum()
}

/// TBS adequacy note derived from neutrophil coverage.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum TbsAnnotation {
    #[default]
    None,
    InflammatoryObscuration,
    Unsatisfactory,
}

/// Neutrophil coverage score and the TBS annotation it implies.
/// Coverage of 50-75% is reported as inflammatory obscuration; above 75%
/// the sample is unsatisfactory.
pub fn q8_from_areas<R: Real>(
    s_neutrophil: u64,
    s_total: u64,
) -> Result<(R, TbsAnnotation), ContentError> {
    if s_total == 0 {
        return Err(ContentError::ZeroContentArea);
    }
    let coverage = (s_neutrophil as f64 / s_total as f64).min(1.0);
    let annotation = if coverage > 0.75 {
        TbsAnnotation::Unsatisfactory
    } else if coverage >= 0.5 {
        TbsAnnotation::InflammatoryObscuration
    } else {
        TbsAnnotation::None
    };
    Ok((R::of(1.0 - coverage), annotation))
}

/// Raw measurements behind q6-q8 for one slide.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ContentMeasurement<R> {
    pub cell_count: u64,
    pub mass_count: u64,
    /// Effective content area: 512^2 times the number of content patches.
    pub s_total: u64,
    pub s_neutrophil: u64,
    pub q6: R,
    pub q7: R,
    pub q8: Option<R>,
    pub tbs_annotation: TbsAnnotation,
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::prelude::*;
    use rand_chacha::ChaCha8Rng;

    fn det(i: u32, j: u32, class: DetectionClass, bbox: DetBox, conf: f64) -> Detection {
        Detection {
            magnification: Magnification::X20,
            grid_i: i,
            grid_j: j,
            class,
            bbox,
            confidence: conf,
        }
    }

    #[test]
    fn empty_input_counts_zero() {
        assert_eq!(count_cells(&[], DEFAULT_CONFIDENCE_FLOOR), 0);
    }

    #[test]
    fn low_confidence_detections_are_dropped() {
        let d = vec![
            det(0, 0, DetectionClass::SquamousCell, DetBox::new(100, 100, 20, 20), 0.49),
            det(0, 0, DetectionClass::SquamousCell, DetBox::new(200, 200, 20, 20), 0.5),
        ];
        assert_eq!(count_cells(&d, DEFAULT_CONFIDENCE_FLOOR), 1);
    }

    #[test]
    fn planted_cells_count_exactly() {
        // 5000 interior cells scattered over a 10x10 patch grid
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut detections = Vec::new();
        for _ in 0..5000 {
            let i = rng.random_range(0..10);
            let j = rng.random_range(0..10);
            let x = rng.random_range(32..460);
            let y = rng.random_range(32..460);
            detections.push(det(
                i,
                j,
                DetectionClass::SquamousCell,
                DetBox::new(x, y, 20, 20),
                1.0,
            ));
        }
        assert_eq!(count_cells(&detections, DEFAULT_CONFIDENCE_FLOOR), 5000);
    }

    #[test]
    fn straddling_pair_counts_once() {
        // one object at slide x [500, 520), reported from both sides of
        // the border at x = 512
        let left = det(0, 0, DetectionClass::SquamousCell, DetBox::new(500, 240, 20, 20), 0.9);
        let right = det(0, 1, DetectionClass::SquamousCell, DetBox::new(-12, 240, 20, 20), 0.8);
        assert_eq!(left.iou(&right), 1.0);
        let mut detections = vec![left.clone(), right.clone()];
        assert_eq!(count_cells(&detections, DEFAULT_CONFIDENCE_FLOOR), 1);
        detections.reverse();
        assert_eq!(count_cells(&detections, DEFAULT_CONFIDENCE_FLOOR), 1);
    }

    #[test]
    fn border_detection_without_a_match_survives() {
        let lone = det(0, 0, DetectionClass::SquamousCell, DetBox::new(500, 240, 10, 20), 0.9);
        assert_eq!(count_cells(&[lone], DEFAULT_CONFIDENCE_FLOOR), 1);
    }

    #[test]
    fn dedup_is_order_independent() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        // chains of duplicates along a vertical border
        let mut detections = Vec::new();
        for k in 0..8 {
            let y = 60 * k;
            detections.push(det(
                1,
                1,
                DetectionClass::SquamousCell,
                DetBox::new(502, y, 10, 18),
                0.9,
            ));
            detections.push(det(
                1,
                2,
                DetectionClass::SquamousCell,
                DetBox::new(-10, y, 10, 18),
                0.9,
            ));
        }
        let baseline = count_cells(&detections, DEFAULT_CONFIDENCE_FLOOR);
        assert_eq!(baseline, 8);
        for _ in 0..10 {
            detections.shuffle(&mut rng);
            assert_eq!(count_cells(&detections, DEFAULT_CONFIDENCE_FLOOR), baseline);
        }
    }

    #[test]
    fn classes_do_not_interfere() {
        let cell = det(0, 0, DetectionClass::SquamousCell, DetBox::new(100, 100, 20, 20), 0.9);
        let mass = det(0, 0, DetectionClass::CellMass, DetBox::new(100, 100, 20, 20), 0.9);
        let detections = vec![cell, mass];
        assert_eq!(count_cells(&detections, DEFAULT_CONFIDENCE_FLOOR), 1);
        assert_eq!(count_masses(&detections, DEFAULT_CONFIDENCE_FLOOR), 1);
    }

    #[test]
    fn spilled_box_clamps_to_patch_for_area_measurement() {
        let b = DetBox::new(-10, 500, 30, 30);
        let clamped = b.clamped(512, 512);
        assert_eq!(clamped, PixelRect::new(0, 500, 20, 12));
    }

    #[test]
    fn q6_point_values() {
        assert_eq!(q6_from_count::<f64>(5000), 1.0);
        assert_eq!(q6_from_count::<f64>(2500), 0.5);
        assert_eq!(q6_from_count::<f64>(0), 0.0);
        assert_eq!(q6_from_count::<f64>(10_000), 1.0);
    }

    #[test]
    fn q7_point_values() {
        assert_eq!(q7_from_mass_count::<f64>(50), 1.0);
        assert_eq!(q7_from_mass_count::<f64>(100), 0.5);
        assert_eq!(q7_from_mass_count::<f64>(0), 1.0);
    }

    #[test]
    fn q6_monotone_q7_antitone() {
        for x in 0..6000u64 {
            assert!(q6_from_count::<f64>(x + 1) >= q6_from_count::<f64>(x));
        }
        for c in 50..300u64 {
            assert!(q7_from_mass_count::<f64>(c + 1) < q7_from_mass_count::<f64>(c));
        }
    }

    #[test]
    fn uniform_box_has_no_foreground() {
        let patch = PatchPixels::filled([120, 120, 120]);
        assert_eq!(box_area(&patch, &PixelRect::new(10, 10, 100, 100)), 0);
    }

    #[test]
    fn half_dark_box_measures_the_dark_half() {
        let mut patch = PatchPixels::filled([255, 255, 255]);
        for y in 0..100 {
            for x in 0..50 {
                patch.set_pixel(10 + x, 10 + y, [0, 0, 0]);
            }
        }
        assert_eq!(box_area(&patch, &PixelRect::new(10, 10, 100, 100)), 5000);
    }

    #[test]
    fn disk_area_is_close_to_analytic() {
        let mut patch = PatchPixels::filled([240, 240, 240]);
        let (cx, cy, r) = (100.0f64, 100.0f64, 10.0f64);
        let mut planted = 0u64;
        for y in 0..512 {
            for x in 0..512 {
                let dx = x as f64 + 0.5 - cx;
                let dy = y as f64 + 0.5 - cy;
                if dx * dx + dy * dy <= r * r {
                    patch.set_pixel(x, y, [60, 50, 90]);
                    planted += 1;
                }
            }
        }
        let bbox = PixelRect::new(85, 85, 30, 30);
        let measured = box_area(&patch, &bbox);
        assert_eq!(measured, planted);
        let analytic = std::f64::consts::PI * r * r;
        assert!((measured as f64 - analytic).abs() / analytic < 0.10);
    }

    #[test]
    fn q8_point_values_and_annotations() {
        let (q8, tbs) = q8_from_areas::<f64>(0, 1000).unwrap();
        assert_eq!((q8, tbs), (1.0, TbsAnnotation::None));

        let (q8, tbs) = q8_from_areas::<f64>(600, 1000).unwrap();
        assert_eq!((q8, tbs), (0.4, TbsAnnotation::InflammatoryObscuration));

        let (q8, tbs) = q8_from_areas::<f64>(800, 1000).unwrap();
        assert!((q8 - 0.2).abs() < 1e-15);
        assert_eq!(tbs, TbsAnnotation::Unsatisfactory);

        let (_, tbs) = q8_from_areas::<f64>(500, 1000).unwrap();
        assert_eq!(tbs, TbsAnnotation::InflammatoryObscuration);
        let (_, tbs) = q8_from_areas::<f64>(750, 1000).unwrap();
        assert_eq!(tbs, TbsAnnotation::InflammatoryObscuration);
        let (_, tbs) = q8_from_areas::<f64>(751, 1000).unwrap();
        assert_eq!(tbs, TbsAnnotation::Unsatisfactory);

        assert_eq!(q8_from_areas::<f64>(0, 0).unwrap_err(), ContentError::ZeroContentArea);
    }

    #[test]
    fn q8_strictly_decreasing_in_neutrophil_area() {
        let mut prev = 2.0f64;
        for s in (0..=1000).step_by(50) {
            let (q8, _) = q8_from_areas::<f64>(s, 1000).unwrap();
            assert!(q8 < prev);
            prev = q8;
        }
    }
}
