//! Staining-standard metric (q5). Separates hematoxylin and eosin by
//! color deconvolution in optical-density space, measures the mean gray
//! level of the stained pixels per channel, and scores each channel
//! against a calibrated gray range. Stains mix additively in OD space
//! (Beer-Lambert), so concentrations are recovered with the pseudo-inverse
//! of the two stain vectors.

use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::num::Real;
use crate::raster::{gray_bt601, PatchPixels};

#[derive(Debug, Error, PartialEq, Eq)]
pub enum StainError {
    #[error("calibration needs at least {need} reference slides, got {got}")]
    TooFewSamples { got: usize, need: usize },
    #[error("invalid gray range: min {0} > max {1}")]
    InvalidRange(String, String),
}

/// The two stain channels, in deconvolution order.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StainChannel {
    Hematoxylin,
    Eosin,
}

/// Default concentration threshold separating stained pixels from faint
/// counterstain bleed.
pub const DEFAULT_TAU: f64 = 0.15;

/// Minimum number of usable pixels for adaptive basis estimation.
pub const BASIS_MIN_PIXELS: usize = 1000;

/// Optical-density vectors of the two stains (unit length, non-negative).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(bound(serialize = "R: Real + Serialize", deserialize = "R: Real + Deserialize<'de>"))]
pub struct StainBasis<R> {
    pub h: [R; 3],
    pub e: [R; 3],
    /// Per-channel background intensity.
    #[serde(default = "default_i0", skip_serializing_if = "is_default_i0")]
    pub i0: [R; 3],
}

fn default_i0<R: Real>() -> [R; 3] {
    [R::of(255.0); 3]
}

fn is_default_i0<R: Real>(i0: &[R; 3]) -> bool {
    i0.iter().all(|&v| v == R::of(255.0))
}

fn normalize<R: Real>(v: [R; 3]) -> [R; 3] {
    let n = (v[0] * v[0] + v[1] * v[1] + v[2] * v[2]).sqrt();
    [v[0] / n, v[1] / n, v[2] / n]
}

fn dot<R: Real>(a: &[R; 3], b: &[R; 3]) -> R {
    a[0] * b[0] + a[1] * b[1] + a[2] * b[2]
}

impl<R: Real> Default for StainBasis<R> {
    /// The standard published H&E optical-density basis.
    fn default() -> Self {
        StainBasis {
            h: normalize([R::of(0.650), R::of(0.704), R::of(0.286)]),
            e: normalize([R::of(0.072), R::of(0.990), R::of(0.105)]),
            i0: default_i0(),
        }
    }
}

impl<R: Real> StainBasis<R> {
    /// OD of one pixel: `-log10(max(I, 1) / I0)` per channel.
    pub fn od(&self, rgb: [R; 3]) -> [R; 3] {
        let one = R::one();
        [0, 1, 2].map(|c| -(rgb[c].max(one) / self.i0[c]).log10())
    }

    /// Recover the two stain concentrations of one pixel via the
    /// pseudo-inverse of `[h e]`; negative concentrations clamp to zero.
    pub fn deconvolve_rgb(&self, rgb: [R; 3]) -> [R; 2] {
        let od = self.od(rgb);
        let hh = dot(&self.h, &self.h);
        let he = dot(&self.h, &self.e);
        let ee = dot(&self.e, &self.e);
        let det = hh * ee - he * he;
        let bh = dot(&self.h, &od);
        let be = dot(&self.e, &od);
        let ch = (ee * bh - he * be) / det;
        let ce = (hh * be - he * bh) / det;
        [ch.max(R::zero()), ce.max(R::zero())]
    }

    /// Beer-Lambert forward model: intensity of a pixel with the given
    /// stain concentrations over a clean background.
    pub fn synthesize(&self, c: [R; 2]) -> [R; 3] {
        let ten = R::of(10.0);
        [0, 1, 2].map(|k| self.i0[k] * ten.powf(-(c[0] * self.h[k] + c[1] * self.e[k])))
    }

    /// Angle in degrees between a stored vector and another basis' vector.
    pub fn angle_to(&self, other: &StainBasis<R>, channel: StainChannel) -> R {
        let (a, b) = match channel {
            StainChannel::Hematoxylin => (&self.h, &other.h),
            StainChannel::Eosin => (&self.e, &other.e),
        };
        let cos = dot(a, b).clamp01();
        cos.acos() * R::of(180.0 / std::f64::consts::PI)
    }
}

/// Per-channel concentration maps of one patch (valid region only,
/// row-major).
pub struct ConcentrationMaps<R> {
    pub h: Vec<R>,
    pub e: Vec<R>,
    pub width: usize,
    pub height: usize,
}

/// Deconvolve every non-padding pixel of a patch.
pub fn deconvolve<R: Real>(patch: &PatchPixels, basis: &StainBasis<R>) -> ConcentrationMaps<R> {
    let (w, h) = (patch.valid_w(), patch.valid_h());
    let mut ch = Vec::with_capacity(w * h);
    let mut ce = Vec::with_capacity(w * h);
    for [r, g, b] in patch.valid_pixels() {
        let c = basis.deconvolve_rgb([R::of(r as f64), R::of(g as f64), R::of(b as f64)]);
        ch.push(c[0]);
        ce.push(c[1]);
    }
    ConcentrationMaps { h: ch, e: ce, width: w, height: h }
}

/// Mean BT.601 gray of the original pixels whose concentration exceeds
/// `tau`, with the pixel count. `None` when no pixel passes the mask.
pub fn channel_gray<R: Real>(
    patch: &PatchPixels,
    concentration: &[R],
    tau: R,
) -> Option<(R, u64)> {
    let mut sum = R::zero();
    let mut count = 0u64;
    for (px, &c) in patch.valid_pixels().zip(concentration) {
        if c > tau {
            sum += R::of(gray_bt601(px[0], px[1], px[2]) as f64);
            count += 1;
        }
    }
    (count > 0).then(|| (sum / R::of(count as f64), count))
}

/// Per-patch masked gray sums for both channels, for slide-level
/// pixel-count-weighted reduction.
pub fn patch_channel_sums<R: Real>(
    patch: &PatchPixels,
    basis: &StainBasis<R>,
    tau: R,
) -> [(R, u64); 2] {
    let maps = deconvolve(patch, basis);
    let mut out = [(R::zero(), 0u64); 2];
    for (px, (&ch, &ce)) in patch.valid_pixels().zip(maps.h.iter().zip(&maps.e)) {
        let gray = R::of(gray_bt601(px[0], px[1], px[2]) as f64);
        if ch > tau {
            out[0].0 += gray;
            out[0].1 += 1;
        }
        if ce > tau {
            out[1].0 += gray;
            out[1].1 += 1;
        }
    }
    out
}

/// Score one channel's mean gray against the calibrated range: 1 inside,
/// a linear ramp hitting 0 at twice the upper bound above the range and
/// at gray 0 below it.
pub fn score_q5<R: Real>(v_gray: R, range: &GrayRange<R>) -> R {
    if v_gray >= range.min && v_gray <= range.max {
        R::one()
    } else if v_gray > range.max {
        (R::one() - (v_gray - range.max) / range.max).clamp01()
    } else {
        (R::one() - (range.min - v_gray) / range.min).clamp01()
    }
}

/// Slide-level q5: the weaker of the two channel scores. Channels that
/// could not be measured are skipped; `None` when neither channel was
/// measurable.
pub fn combine_q5<R: Real>(
    h_score: Option<R>,
    e_score: Option<R>,
) -> Option<R> {
    match (h_score, e_score) {
        (Some(a), Some(b)) => Some(a.min(b)),
        (Some(a), None) | (None, Some(a)) => Some(a),
        (None, None) => None,
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GrayRange<R> {
    pub min: R,
    pub max: R,
}

/// Calibrated staining-standard ranges plus the deconvolution setup.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(bound(serialize = "R: Real + Serialize", deserialize = "R: Real + Deserialize<'de>"))]
pub struct StainCalibration<R> {
    pub hematoxylin: GrayRange<R>,
    pub eosin: GrayRange<R>,
    pub basis: StainBasis<R>,
    pub tau: R,
}

impl<R: Real> Default for StainCalibration<R> {
    /// Shipped defaults: hematoxylin 180-200, eosin 185-190 gray.
    fn default() -> Self {
        StainCalibration {
            hematoxylin: GrayRange { min: R::of(180.0), max: R::of(200.0) },
            eosin: GrayRange { min: R::of(185.0), max: R::of(190.0) },
            basis: StainBasis::default(),
            tau: R::of(DEFAULT_TAU),
        }
    }
}

impl<R: Real + Serialize + for<'de> Deserialize<'de>> StainCalibration<R> {
    pub fn load(path: &Path) -> std::io::Result<Self> {
        let text = std::fs::read_to_string(path)?;
        serde_json::from_str(&text).map_err(std::io::Error::other)
    }

    pub fn save(&self, path: &Path) -> std::io::Result<()> {
        std::fs::write(path, serde_json::to_string_pretty(self).map_err(std::io::Error::other)?)
    }
}

/// Minimum number of reference slides for a stain calibration run.
pub const STAIN_CALIBRATION_MIN_SLIDES: usize = 20;

/// Fit per-channel gray ranges as mean +/- 2 sigma over per-slide mean
/// grays, intersected with [0, 255].
pub fn calibrate_stain<R: Real>(
    per_slide_gray: &[[R; 2]],
    basis: StainBasis<R>,
    tau: R,
) -> Result<StainCalibration<R>, StainError> {
    if per_slide_gray.len() < STAIN_CALIBRATION_MIN_SLIDES {
        return Err(StainError::TooFewSamples {
            got: per_slide_gray.len(),
            need: STAIN_CALIBRATION_MIN_SLIDES,
        });
    }
    let n = R::of_usize(per_slide_gray.len());
    let range_for = |channel: usize| {
        let mean = per_slide_gray.iter().fold(R::zero(), |a, s| a + s[channel]) / n;
        let ss = per_slide_gray
            .iter()
            .fold(R::zero(), |a, s| a + (s[channel] - mean) * (s[channel] - mean));
        let sd = (ss / (n - R::one())).sqrt();
        let two = R::of(2.0);
        GrayRange {
            min: (mean - two * sd).max(R::zero()),
            max: (mean + two * sd).min(R::of(255.0)),
        }
    };
    Ok(StainCalibration { hematoxylin: range_for(0), eosin: range_for(1), basis, tau })
}

/// How the working basis was obtained.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BasisEstimate {
    Adaptive,
    FallbackTooFewPixels,
    FallbackDegenerate,
}

/// Estimate the stain basis from slide pixels: principal-plane fit of the
/// high-OD pixels followed by robust (1st/99th percentile) angular
/// extremes within that plane. Falls back to the provided default basis
/// on degeneracy.
pub fn estimate_basis<R: Real>(
    pixels: &[[u8; 3]],
    default: &StainBasis<R>,
) -> (StainBasis<R>, BasisEstimate) {
    const OD_MIN: f64 = 0.15;
    let mut ods: Vec<[f64; 3]> = Vec::new();
    for &[r, g, b] in pixels {
        if r > 200 && g > 200 && b > 200 {
            continue; // background
        }
        let od = [r, g, b].map(|v| -((v.max(1) as f64 / 255.0).log10()));
        let norm = (od[0] * od[0] + od[1] * od[1] + od[2] * od[2]).sqrt();
        if norm > OD_MIN {
            ods.push(od);
        }
    }
    if ods.len() < BASIS_MIN_PIXELS {
        return (default.clone(), BasisEstimate::FallbackTooFewPixels);
    }

    // uncentered second-moment matrix (OD lives in a cone at the origin)
    let mut m = [[0.0f64; 3]; 3];
    for od in &ods {
        for i in 0..3 {
            for j in 0..3 {
                m[i][j] += od[i] * od[j];
            }
        }
    }
    let (eigvals, eigvecs) = jacobi_eigen(m);
    // eigvals sorted descending with matching vectors
    if eigvals[1] < 1e-4 * eigvals[0].max(1e-12) {
        return (default.clone(), BasisEstimate::FallbackDegenerate);
    }
    let mut v1 = eigvecs[0];
    let mut v2 = eigvecs[1];
    // deterministic orientation: mean projection positive on v1, dominant
    // component positive on v2
    let mean_dot: f64 = ods.iter().map(|od| dot3(od, &v1)).sum();
    if mean_dot < 0.0 {
        v1 = v1.map(|x| -x);
    }
    let dom = (0..3).max_by(|&a, &b| v2[a].abs().partial_cmp(&v2[b].abs()).unwrap()).unwrap();
    if v2[dom] < 0.0 {
        v2 = v2.map(|x| -x);
    }

    let mut angles: Vec<f64> =
        ods.iter().map(|od| dot3(od, &v2).atan2(dot3(od, &v1))).collect();
    angles.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let pct = |p: f64| angles[((p * angles.len() as f64).ceil() as usize).clamp(1, angles.len()) - 1];
    let lo = pct(0.01);
    let hi = pct(0.99);
    let to_vec = |phi: f64| -> Option<[f64; 3]> {
        let mut v = [0.0f64; 3];
        for k in 0..3 {
            v[k] = phi.cos() * v1[k] + phi.sin() * v2[k];
        }
        if v.iter().sum::<f64>() < 0.0 {
            v = v.map(|x| -x);
        }
        if v.iter().any(|&x| x < -0.2) {
            return None; // not a plausible absorption direction
        }
        let v = v.map(|x| x.max(0.0));
        let n = (v[0] * v[0] + v[1] * v[1] + v[2] * v[2]).sqrt();
        (n > 1e-6).then(|| v.map(|x| x / n))
    };
    let (Some(a), Some(b)) = (to_vec(lo), to_vec(hi)) else {
        return (default.clone(), BasisEstimate::FallbackDegenerate);
    };
    // assign extremes to channels by similarity with the default vectors
    let dh = default.h.map(|x| x.as_f64());
    let (h, e) = if dot3(&a, &dh) >= dot3(&b, &dh) { (a, b) } else { (b, a) };
    let basis = StainBasis {
        h: h.map(R::of),
        e: e.map(R::of),
        i0: default.i0,
    };
    (basis, BasisEstimate::Adaptive)
}

fn dot3(a: &[f64; 3], b: &[f64; 3]) -> f64 {
    a[0] * b[0] + a[1] * b[1] + a[2] * b[2]
}

/// Eigen-decomposition of a symmetric 3x3 matrix by cyclic Jacobi
/// rotations. Returns eigenvalues (descending) and matching unit vectors.
fn jacobi_eigen(mut m: [[f64; 3]; 3]) -> ([f64; 3], [[f64; 3]; 3]) {
    let mut v = [[0.0; 3]; 3];
    for (k, row) in v.iter_mut().enumerate() {
        row[k] = 1.0;
    }
    for _sweep in 0..64 {
        let off = m[0][1].abs() + m[0][2].abs() + m[1][2].abs();
        if off < 1e-14 {
            break;
        }
        for (p, q) in [(0usize, 1usize), (0, 2), (1, 2)] {
            if m[p][q].abs() < 1e-300 {
                continue;
            }
            let theta = (m[q][q] - m[p][p]) / (2.0 * m[p][q]);
            let t = theta.signum() / (theta.abs() + (theta * theta + 1.0).sqrt());
            let c = 1.0 / (t * t + 1.0).sqrt();
            let s = t * c;
            for k in 0..3 {
                let (mkp, mkq) = (m[k][p], m[k][q]);
                m[k][p] = c * mkp - s * mkq;
                m[k][q] = s * mkp + c * mkq;
            }
            for k in 0..3 {
                let (mpk, mqk) = (m[p][k], m[q][k]);
                m[p][k] = c * mpk - s * mqk;
                m[q][k] = s * mpk + c * mqk;
            }
            for row in v.iter_mut() {
                let (vp, vq) = (row[p], row[q]);
                row[p] = c * vp - s * vq;
                row[q] = s * vp + c * vq;
            }
        }
    }
    let mut order = [0usize, 1, 2];
    order.sort_by(|&a, &b| m[b][b].partial_cmp(&m[a][a]).unwrap());
    let vals = order.map(|k| m[k][k]);
    let vecs = order.map(|k| [v[0][k], v[1][k], v[2][k]]);
    (vals, vecs)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::prelude::*;
    use rand_chacha::ChaCha8Rng;

    fn basis() -> StainBasis<f64> {
        StainBasis::default()
    }

    #[test]
    fn default_vectors_are_unit_and_nonnegative() {
        let b = basis();
        for v in [b.h, b.e] {
            let n: f64 = v.iter().map(|x| x * x).sum::<f64>().sqrt();
            assert!((n - 1.0).abs() < 1e-12);
            assert!(v.iter().all(|&x| x >= 0.0));
        }
    }

    #[test]
    fn white_pixel_has_zero_concentrations() {
        let c = basis().deconvolve_rgb([255.0, 255.0, 255.0]);
        assert_eq!(c, [0.0, 0.0]);
    }

    #[test]
    fn beer_lambert_round_trip_pure_hematoxylin() {
        let b = basis();
        let rgb = b.synthesize([0.7, 0.0]);
        let c = b.deconvolve_rgb(rgb);
        assert!((c[0] - 0.7).abs() < 1e-6, "got {c:?}");
        assert!(c[1].abs() < 1e-6);
    }

    #[test]
    fn beer_lambert_round_trip_mixed() {
        let b = basis();
        let rgb = b.synthesize([0.4, 0.9]);
        let c = b.deconvolve_rgb(rgb);
        assert!((c[0] - 0.4).abs() < 1e-6);
        assert!((c[1] - 0.9).abs() < 1e-6);
    }

    #[test]
    fn quantized_round_trip_stays_within_one_gray_level() {
        // moderate concentrations: at extreme darkness the u8 quantization
        // residual perpendicular to the stain plane exceeds a gray level
        let b = basis();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..500 {
            let c = [rng.random_range(0.0..0.9), rng.random_range(0.0..0.9)];
            let rgb = b.synthesize(c).map(|v: f64| v.round().clamp(0.0, 255.0));
            let back = b.deconvolve_rgb(rgb);
            let resynth = b.synthesize(back);
            for k in 0..3 {
                assert!(
                    (resynth[k] - rgb[k]).abs() <= 1.0,
                    "channel {k}: {} vs {}",
                    resynth[k],
                    rgb[k]
                );
            }
        }
    }

    #[test]
    fn channel_gray_of_uniform_region_is_its_gray() {
        let b = basis();
        let rgb = b.synthesize([0.5, 0.0]).map(|v: f64| v.round() as u8);
        let patch = PatchPixels::filled(rgb);
        let maps = deconvolve(&patch, &b);
        let (v, count) = channel_gray(&patch, &maps.h, 0.15).unwrap();
        assert_eq!(count, 512 * 512);
        assert_eq!(v, gray_bt601(rgb[0], rgb[1], rgb[2]) as f64);
    }

    #[test]
    fn channel_gray_without_stained_pixels_is_none() {
        let patch = PatchPixels::filled([255, 255, 255]);
        let b = basis();
        let maps = deconvolve(&patch, &b);
        assert_eq!(channel_gray(&patch, &maps.h, 0.15), None);
        assert_eq!(channel_gray(&patch, &maps.e, 0.15), None);
    }

    #[test]
    fn two_region_patch_matches_region_oracle() {
        let b = basis();
        let dark = b.synthesize([0.8, 0.0]).map(|v: f64| v.round() as u8);
        let light = b.synthesize([0.3, 0.0]).map(|v: f64| v.round() as u8);
        let mut patch = PatchPixels::blank(512, 512);
        for y in 0..512 {
            for x in 0..512 {
                patch.set_pixel(x, y, if y < 256 { dark } else { light });
            }
        }
        let maps = deconvolve(&patch, &b);
        let (v, count) = channel_gray(&patch, &maps.h, 0.15).unwrap();
        assert_eq!(count, 512 * 512);
        let oracle = (gray_bt601(dark[0], dark[1], dark[2]) as f64
            + gray_bt601(light[0], light[1], light[2]) as f64)
            / 2.0;
        assert!((v - oracle).abs() < 1e-9);
    }

    #[test]
    fn q5_point_values() {
        let eosin = GrayRange { min: 185.0f64, max: 190.0 };
        assert_eq!(score_q5(187.0, &eosin), 1.0);
        assert_eq!(score_q5(185.0, &eosin), 1.0);
        assert_eq!(score_q5(190.0, &eosin), 1.0);
        assert_eq!(score_q5(380.0, &eosin), 0.0); // 2 * v_max
        assert_eq!(score_q5(285.0, &eosin), 0.5); // 1.5 * v_max
        assert_eq!(score_q5(0.0, &eosin), 0.0);
        assert!((score_q5(92.5, &eosin) - 0.5).abs() < 1e-12); // half of v_min
    }

    #[test]
    fn q5_is_continuous_and_monotone_away_from_range() {
        let range = GrayRange { min: 180.0f64, max: 200.0 };
        let mut prev = score_q5(179.999, &range);
        assert!((prev - 1.0).abs() < 1e-3);
        for step in 1..2000 {
            let v = 180.0 - step as f64 * 0.09;
            let s = score_q5(v, &range);
            assert!(s <= prev + 1e-12);
            prev = s;
        }
        let mut prev = score_q5(200.001, &range);
        for step in 1..2000 {
            let v = 200.0 + step as f64 * 0.1;
            let s = score_q5(v, &range);
            assert!(s <= prev + 1e-12);
            prev = s;
        }
    }

    #[test]
    fn slide_score_is_the_channel_minimum() {
        assert_eq!(combine_q5(Some(0.8), Some(0.6)), Some(0.6));
        assert_eq!(combine_q5(Some(0.8), None), Some(0.8));
        assert_eq!(combine_q5::<f64>(None, None), None);
    }

    #[test]
    fn default_calibration_matches_shipped_ranges() {
        let c = StainCalibration::<f64>::default();
        assert_eq!(c.hematoxylin, GrayRange { min: 180.0, max: 200.0 });
        assert_eq!(c.eosin, GrayRange { min: 185.0, max: 190.0 });
        assert_eq!(c.tau, DEFAULT_TAU);
    }

    #[test]
    fn calibration_recovers_two_sigma_ranges() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let normal = rand_distr::Normal::new(188.0f64, 1.0).unwrap();
        let slides: Vec<[f64; 2]> = (0..200)
            .map(|_| {
                [
                    190.0 + rng.random_range(-0.5..0.5),
                    rand_distr::Distribution::sample(&normal, &mut rng),
                ]
            })
            .collect();
        let cal = calibrate_stain(&slides, basis(), 0.15).unwrap();
        assert!((cal.eosin.min - 186.0).abs() < 0.5, "got {:?}", cal.eosin);
        assert!((cal.eosin.max - 190.0).abs() < 0.5, "got {:?}", cal.eosin);
    }

    #[test]
    fn too_few_reference_slides_is_an_error() {
        let slides = vec![[188.0f64, 190.0]; 19];
        assert_eq!(
            calibrate_stain(&slides, basis(), 0.15).unwrap_err(),
            StainError::TooFewSamples { got: 19, need: 20 }
        );
    }

    #[test]
    fn calibration_json_round_trips() {
        let dir = tempfile::TempDir::new().unwrap();
        let path = dir.path().join("stain.json");
        let c = StainCalibration::<f64>::default();
        c.save(&path).unwrap();
        let text = std::fs::read_to_string(&path).unwrap();
        assert!(text.contains("\"hematoxylin\""));
        assert!(text.contains("\"tau\""));
        let back = StainCalibration::<f64>::load(&path).unwrap();
        assert_eq!(back, c);
    }

    fn synth_sample(rng: &mut ChaCha8Rng, n: usize) -> Vec<[u8; 3]> {
        let b = basis();
        (0..n)
            .map(|k| {
                let c = match k % 10 {
                    0 => [rng.random_range(0.4..1.2), 0.0],
                    1 => [0.0, rng.random_range(0.4..1.2)],
                    _ => [rng.random_range(0.05..0.9), rng.random_range(0.05..0.9)],
                };
                b.synthesize(c).map(|v: f64| v.round().clamp(0.0, 255.0) as u8)
            })
            .collect()
    }

    #[test]
    fn adaptive_estimation_recovers_planted_basis() {
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        let pixels = synth_sample(&mut rng, 5000);
        let (estimated, how) = estimate_basis::<f64>(&pixels, &basis());
        assert_eq!(how, BasisEstimate::Adaptive);
        let dh = estimated.angle_to(&basis(), StainChannel::Hematoxylin);
        let de = estimated.angle_to(&basis(), StainChannel::Eosin);
        assert!(dh < 2.0, "hematoxylin off by {dh} degrees");
        assert!(de < 2.0, "eosin off by {de} degrees");
    }

    #[test]
    fn grayscale_image_falls_back_to_default() {
        let pixels: Vec<[u8; 3]> = (0..3000)
            .map(|k| {
                let g = 40 + (k % 150) as u8;
                [g, g, g]
            })
            .collect();
        let (estimated, how) = estimate_basis::<f64>(&pixels, &basis());
        assert_eq!(how, BasisEstimate::FallbackDegenerate);
        assert_eq!(estimated, basis());
    }

    #[test]
    fn too_few_pixels_falls_back_to_default() {
        let mut rng = ChaCha8Rng::seed_from_u64(22);
        let pixels = synth_sample(&mut rng, 200);
        let (estimated, how) = estimate_basis::<f64>(&pixels, &basis());
        assert_eq!(how, BasisEstimate::FallbackTooFewPixels);
        assert_eq!(estimated, basis());
    }
}
