//! Out-of-focus metric (q2). A deliberately small sharpness predictor:
//! one bank of 7x7x3 convolution kernels applied with stride 5, pooled by
//! a trainable combination of the per-filter response extrema:
//!
//! `y = sum_n(w1[n] * min(r[n]) + w2[n] * max(r[n])) + w3`
//!
//! Patch scores come from 64x64 windows densely sampled on a 128-pixel
//! grid; slide q2 is the normalized mean over interval-sampled content
//! patches. Scores nominally live in 0..12 (sharpest = 12), so q2 divides
//! by 12 and clamps.

pub mod train;

use std::io::{Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::num::Real;
use crate::raster::PatchPixels;

pub const KERNEL_SIZE: usize = 7;
pub const CONV_STRIDE: usize = 5;
pub const DENSE_WINDOW: usize = 64;
pub const DENSE_STRIDE: usize = 128;
/// Nominal top of the training-label scale; q2 normalizes by this.
pub const SCORE_SCALE: f64 = 12.0;
pub const DEFAULT_FILTERS: usize = 2;

/// Magic prefix of the binary weight format.
pub const WEIGHTS_MAGIC: [u8; 16] = *b"FOCUSATTNETv1\0\0\0";

#[derive(Debug, Error)]
pub enum FocusError {
    #[error("window {w}x{h} is smaller than the {k}x{k} kernel", k = KERNEL_SIZE)]
    WindowTooSmall { w: usize, h: usize },
    #[error("no content patches: q2 is not evaluable")]
    NoContentPatches,
    #[error("training targets are degenerate (fewer than 2 distinct values)")]
    DegenerateTargets,
    #[error("sample_every must be at least 1")]
    BadSampleInterval,
    #[error("weight file: {0}")]
    BadWeightFile(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// Kernel bank plus pooling parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct FocusNetWeights<R> {
    pub n_filters: usize,
    /// `[n_filters][3][7][7]`, flattened row-major.
    pub kernels: Vec<R>,
    pub bias: Vec<R>,
    pub w1: Vec<R>,
    pub w2: Vec<R>,
    pub w3: R,
}

impl<R: Real> FocusNetWeights<R> {
    pub fn zeros(n_filters: usize) -> Self {
        FocusNetWeights {
            n_filters,
            kernels: vec![R::zero(); n_filters * 3 * KERNEL_SIZE * KERNEL_SIZE],
            bias: vec![R::zero(); n_filters],
            w1: vec![R::zero(); n_filters],
            w2: vec![R::zero(); n_filters],
            w3: R::zero(),
        }
    }

    #[inline]
    pub(crate) fn kernel_at(&self, filter: usize, ch: usize, u: usize, v: usize) -> R {
        self.kernels[((filter * 3 + ch) * KERNEL_SIZE + u) * KERNEL_SIZE + v]
    }

    pub fn parameter_count(&self) -> usize {
        self.kernels.len() + self.bias.len() + self.w1.len() + self.w2.len() + 1
    }

    fn validate(&self) -> Result<(), FocusError> {
        let n = self.n_filters;
        let ok = self.kernels.len() == n * 3 * KERNEL_SIZE * KERNEL_SIZE
            && self.bias.len() == n
            && self.w1.len() == n
            && self.w2.len() == n
            && self
                .kernels
                .iter()
                .chain(&self.bias)
                .chain(&self.w1)
                .chain(&self.w2)
                .chain(std::iter::once(&self.w3))
                .all(|v| v.is_finite());
        if ok {
            Ok(())
        } else {
            Err(FocusError::BadWeightFile("inconsistent shapes or non-finite values".into()))
        }
    }
}

/// A real-valued RGB window, pixel channels normalized to [0, 1].
#[derive(Debug, Clone)]
pub struct ImageWindow<R> {
    pub width: usize,
    pub height: usize,
    /// `[height][width][3]`, flattened.
    pub data: Vec<R>,
}

impl<R: Real> ImageWindow<R> {
    pub fn new(width: usize, height: usize) -> Self {
        ImageWindow { width, height, data: vec![R::zero(); width * height * 3] }
    }

    #[inline]
    pub fn at(&self, x: usize, y: usize, ch: usize) -> R {
        self.data[(y * self.width + x) * 3 + ch]
    }

    #[inline]
    pub fn set(&mut self, x: usize, y: usize, rgb: [R; 3]) {
        let o = (y * self.width + x) * 3;
        self.data[o..o + 3].copy_from_slice(&rgb);
    }

    /// Cut a window out of a patch, scaling pixels to [0, 1]. The region
    /// must lie inside the patch's valid area.
    pub fn from_patch(patch: &PatchPixels, x0: usize, y0: usize, size: usize) -> Self {
        assert!(x0 + size <= patch.valid_w() && y0 + size <= patch.valid_h());
        let scale = R::of(1.0 / 255.0);
        let mut win = ImageWindow::new(size, size);
        for y in 0..size {
            for x in 0..size {
                let [r, g, b] = patch.pixel(x0 + x, y0 + y);
                win.set(x, y, [
                    R::of(r as f64) * scale,
                    R::of(g as f64) * scale,
                    R::of(b as f64) * scale,
                ]);
            }
        }
        win
    }

    pub fn response_shape(&self) -> (usize, usize) {
        (
            (self.height - KERNEL_SIZE) / CONV_STRIDE + 1,
            (self.width - KERNEL_SIZE) / CONV_STRIDE + 1,
        )
    }
}

/// Per-filter response extrema with their (row-major) grid positions;
/// ties resolve to the lowest linear index.
#[derive(Debug, Clone)]
pub struct WindowForward<R> {
    pub mins: Vec<(R, usize)>,
    pub maxs: Vec<(R, usize)>,
    pub y: R,
}

/// Full response grid of one filter, row-major.
pub(crate) fn conv_response_grid<R: Real>(
    x: &ImageWindow<R>,
    w: &FocusNetWeights<R>,
    filter: usize,
) -> Vec<R> {
    let (out_h, out_w) = x.response_shape();
    let mut grid = Vec::with_capacity(out_h * out_w);
    for py in 0..out_h {
        for px in 0..out_w {
            let mut acc = w.bias[filter];
            for ch in 0..3 {
                for u in 0..KERNEL_SIZE {
                    for v in 0..KERNEL_SIZE {
                        acc += w.kernel_at(filter, ch, u, v)
                            * x.at(px * CONV_STRIDE + v, py * CONV_STRIDE + u, ch);
                    }
                }
            }
            grid.push(acc);
        }
    }
    grid
}

/// Forward pass recording the extremum locations the pooling picked.
pub fn forward_window<R: Real>(
    x: &ImageWindow<R>,
    w: &FocusNetWeights<R>,
) -> Result<WindowForward<R>, FocusError> {
    if x.width < KERNEL_SIZE || x.height < KERNEL_SIZE {
        return Err(FocusError::WindowTooSmall { w: x.width, h: x.height });
    }
    let mut mins = Vec::with_capacity(w.n_filters);
    let mut maxs = Vec::with_capacity(w.n_filters);
    let mut y = w.w3;
    for filter in 0..w.n_filters {
        let grid = conv_response_grid(x, w, filter);
        let mut min = (grid[0], 0usize);
        let mut max = (grid[0], 0usize);
        for (pos, &r) in grid.iter().enumerate() {
            if r < min.0 {
                min = (r, pos);
            }
            if r > max.0 {
                max = (r, pos);
            }
        }
        y += w.w1[filter] * min.0 + w.w2[filter] * max.0;
        mins.push(min);
        maxs.push(max);
    }
    Ok(WindowForward { mins, maxs, y })
}

/// Sharpness of one window.
pub fn predict_window<R: Real>(
    x: &ImageWindow<R>,
    w: &FocusNetWeights<R>,
) -> Result<R, FocusError> {
    forward_window(x, w).map(|f| f.y)
}

/// Mean window score over the dense 64-on-128 sampling grid of a patch.
/// Windows that would overlap border padding are skipped; `None` when no
/// full window fits in the valid region.
pub fn score_patch<R: Real>(patch: &PatchPixels, w: &FocusNetWeights<R>) -> Option<R> {
    let mut sum = R::zero();
    let mut count = 0usize;
    let mut y0 = 0usize;
    while y0 + DENSE_WINDOW <= patch.valid_h() {
        let mut x0 = 0usize;
        while x0 + DENSE_WINDOW <= patch.valid_w() {
            let win = ImageWindow::from_patch(patch, x0, y0, DENSE_WINDOW);
            let y = predict_window(&win, w).expect("dense window exceeds kernel size");
            sum += y;
            count += 1;
            x0 += DENSE_STRIDE;
        }
        y0 += DENSE_STRIDE;
    }
    (count > 0).then(|| sum / R::of_usize(count))
}

/// Normalize mean patch scores to the q2 range.
pub fn q2_from_patch_scores<R: Real>(scores: &[R]) -> Option<R> {
    if scores.is_empty() {
        return None;
    }
    let mean = scores.iter().fold(R::zero(), |a, &b| a + b) / R::of_usize(scores.len());
    Some((mean / R::of(SCORE_SCALE)).clamp01())
}

/// Slide-level focus measurements.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FocusScore<R> {
    /// (grid_i, grid_j, mean window score) of each sampled patch.
    pub sampled: Vec<(u32, u32, R)>,
    pub q2: R,
}

/// Score every `sample_every`-th content patch of the 20x view, in
/// enumeration order.
pub fn score_slide<R: Real>(
    view: &crate::pyramid::MagView<'_>,
    w: &FocusNetWeights<R>,
    sample_every: usize,
) -> Result<FocusScore<R>, FocusError> {
    if sample_every == 0 {
        return Err(FocusError::BadSampleInterval);
    }
    let mut sampled = Vec::new();
    let mut content_index = 0usize;
    for patch in view.iter() {
        let patch = patch.map_err(|e| FocusError::Io(std::io::Error::other(e)))?;
        if patch.is_white {
            continue;
        }
        if content_index % sample_every == 0 {
            if let Some(score) = score_patch(&patch.pixels, w) {
                sampled.push((patch.grid_i, patch.grid_j, score));
            }
        }
        content_index += 1;
    }
    let scores: Vec<R> = sampled.iter().map(|s| s.2).collect();
    match q2_from_patch_scores(&scores) {
        Some(q2) => Ok(FocusScore { sampled, q2 }),
        None => Err(FocusError::NoContentPatches),
    }
}

// ---- weight file formats ----

#[derive(Serialize, Deserialize)]
struct WeightsFile {
    n_filters: usize,
    /// `[n][3][7][7]`
    kernel: Vec<Vec<Vec<Vec<f64>>>>,
    bias: Vec<f64>,
    w1: Vec<f64>,
    w2: Vec<f64>,
    w3: f64,
}

impl<R: Real> FocusNetWeights<R> {
    fn to_file(&self) -> WeightsFile {
        let kernel = (0..self.n_filters)
            .map(|n| {
                (0..3)
                    .map(|ch| {
                        (0..KERNEL_SIZE)
                            .map(|u| {
                                (0..KERNEL_SIZE)
                                    .map(|v| self.kernel_at(n, ch, u, v).as_f64())
                                    .collect()
                            })
                            .collect()
                    })
                    .collect()
            })
            .collect();
        WeightsFile {
            n_filters: self.n_filters,
            kernel,
            bias: self.bias.iter().map(|v| v.as_f64()).collect(),
            w1: self.w1.iter().map(|v| v.as_f64()).collect(),
            w2: self.w2.iter().map(|v| v.as_f64()).collect(),
            w3: self.w3.as_f64(),
        }
    }

    fn from_file(file: WeightsFile) -> Result<Self, FocusError> {
        let mut kernels = Vec::with_capacity(file.n_filters * 3 * KERNEL_SIZE * KERNEL_SIZE);
        for filter in &file.kernel {
            for ch in filter {
                for row in ch {
                    for &v in row {
                        kernels.push(R::of(v));
                    }
                }
            }
        }
        let weights = FocusNetWeights {
            n_filters: file.n_filters,
            kernels,
            bias: file.bias.into_iter().map(R::of).collect(),
            w1: file.w1.into_iter().map(R::of).collect(),
            w2: file.w2.into_iter().map(R::of).collect(),
            w3: R::of(file.w3),
        };
        weights.validate()?;
        Ok(weights)
    }

    pub fn save_json(&self, path: &Path) -> Result<(), FocusError> {
        let text = serde_json::to_string_pretty(&self.to_file())
            .map_err(|e| FocusError::BadWeightFile(e.to_string()))?;
        std::fs::write(path, text)?;
        Ok(())
    }

    pub fn load_json(path: &Path) -> Result<Self, FocusError> {
        let text = std::fs::read_to_string(path)?;
        let file: WeightsFile =
            serde_json::from_str(&text).map_err(|e| FocusError::BadWeightFile(e.to_string()))?;
        Self::from_file(file)
    }

    /// Binary variant: 16-byte magic, little-endian u32 filter count, then
    /// the f64 parameters in kernel/bias/w1/w2/w3 order.
    pub fn save_binary(&self, path: &Path) -> Result<(), FocusError> {
        let mut out = std::fs::File::create(path)?;
        out.write_all(&WEIGHTS_MAGIC)?;
        out.write_all(&(self.n_filters as u32).to_le_bytes())?;
        let mut write_all = |values: &[R]| -> std::io::Result<()> {
            for v in values {
                out.write_all(&v.as_f64().to_le_bytes())?;
            }
            Ok(())
        };
        write_all(&self.kernels)?;
        write_all(&self.bias)?;
        write_all(&self.w1)?;
        write_all(&self.w2)?;
        write_all(&[self.w3])?;
        Ok(())
    }

    pub fn load_binary(path: &Path) -> Result<Self, FocusError> {
        let mut file = std::fs::File::open(path)?;
        let mut magic = [0u8; 16];
        file.read_exact(&mut magic)?;
        if magic != WEIGHTS_MAGIC {
            return Err(FocusError::BadWeightFile("bad magic".into()));
        }
        let mut word = [0u8; 4];
        file.read_exact(&mut word)?;
        let n = u32::from_le_bytes(word) as usize;
        if n == 0 || n > 1024 {
            return Err(FocusError::BadWeightFile(format!("implausible filter count {n}")));
        }
        let mut read_vec = |len: usize| -> Result<Vec<R>, FocusError> {
            let mut out = Vec::with_capacity(len);
            let mut buf = [0u8; 8];
            for _ in 0..len {
                file.read_exact(&mut buf)?;
                out.push(R::of(f64::from_le_bytes(buf)));
            }
            Ok(out)
        };
        let kernels = read_vec(n * 3 * KERNEL_SIZE * KERNEL_SIZE)?;
        let bias = read_vec(n)?;
        let w1 = read_vec(n)?;
        let w2 = read_vec(n)?;
        let w3 = read_vec(1)?[0];
        let weights = FocusNetWeights { n_filters: n, kernels, bias, w1, w2, w3 };
        weights.validate()?;
        Ok(weights)
    }

    /// Load either format, sniffing the binary magic.
    pub fn load(path: &Path) -> Result<Self, FocusError> {
        let mut head = [0u8; 16];
        let mut file = std::fs::File::open(path)?;
        let n = file.read(&mut head)?;
        drop(file);
        if n == 16 && head == WEIGHTS_MAGIC {
            Self::load_binary(path)
        } else {
            Self::load_json(path)
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::prelude::*;
    use rand_chacha::ChaCha8Rng;

    fn random_weights(seed: u64, n: usize) -> FocusNetWeights<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut w = FocusNetWeights::zeros(n);
        for k in w.kernels.iter_mut() {
            *k = rng.random_range(-0.3..0.3);
        }
        for b in w.bias.iter_mut() {
            *b = rng.random_range(-0.1..0.1);
        }
        for v in w.w1.iter_mut() {
            *v = rng.random_range(-1.0..1.0);
        }
        for v in w.w2.iter_mut() {
            *v = rng.random_range(-1.0..1.0);
        }
        w.w3 = rng.random_range(-1.0..1.0);
        w
    }

    fn random_window(seed: u64, size: usize) -> ImageWindow<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut win = ImageWindow::new(size, size);
        for v in win.data.iter_mut() {
            *v = rng.random_range(0.0..1.0);
        }
        win
    }

    #[test]
    fn constant_input_has_analytic_score() {
        let w = random_weights(1, 2);
        let c = 0.37f64;
        let mut win = ImageWindow::new(32, 32);
        for v in win.data.iter_mut() {
            *v = c;
        }
        let mut expected = w.w3;
        for n in 0..w.n_filters {
            let mut kernel_sum = 0.0f64;
            for ch in 0..3 {
                for u in 0..KERNEL_SIZE {
                    for v in 0..KERNEL_SIZE {
                        kernel_sum += w.kernel_at(n, ch, u, v);
                    }
                }
            }
            let response = c * kernel_sum + w.bias[n];
            expected += (w.w1[n] + w.w2[n]) * response;
        }
        let got = predict_window(&win, &w).unwrap();
        assert!((got - expected).abs() < 1e-9, "{got} vs {expected}");
    }

    #[test]
    fn degenerate_pooling_weights_give_the_pool_bias() {
        let mut w = random_weights(2, 2);
        for v in w.w1.iter_mut() {
            *v = 0.0;
        }
        for v in w.w2.iter_mut() {
            *v = 0.0;
        }
        w.w3 = 5.0;
        let win = random_window(3, 40);
        assert_eq!(predict_window(&win, &w).unwrap(), 5.0);
    }

    #[test]
    fn matches_naive_convolution_oracle() {
        let w = random_weights(4, 3);
        let win = random_window(5, 64);
        // independent oracle: recompute everything with plain loops
        let (out_h, out_w) = win.response_shape();
        let mut expected = w.w3;
        for n in 0..w.n_filters {
            let mut rmin = f64::INFINITY;
            let mut rmax = f64::NEG_INFINITY;
            for py in 0..out_h {
                for px in 0..out_w {
                    let mut acc = w.bias[n];
                    for u in 0..KERNEL_SIZE {
                        for v in 0..KERNEL_SIZE {
                            for ch in 0..3 {
                                acc += w.kernel_at(n, ch, u, v)
                                    * win.at(px * CONV_STRIDE + v, py * CONV_STRIDE + u, ch);
                            }
                        }
                    }
                    rmin = rmin.min(acc);
                    rmax = rmax.max(acc);
                }
            }
            expected += w.w1[n] * rmin + w.w2[n] * rmax;
        }
        let got = predict_window(&win, &w).unwrap();
        let rel = (got - expected).abs() / expected.abs().max(1e-9);
        assert!(rel < 1e-6, "{got} vs {expected}");
    }

    #[test]
    fn window_smaller_than_kernel_is_rejected() {
        let w = random_weights(6, 1);
        let win = random_window(7, 6);
        assert!(matches!(
            predict_window(&win, &w),
            Err(FocusError::WindowTooSmall { w: 6, h: 6 })
        ));
    }

    #[test]
    fn responses_shift_with_stride_aligned_translation() {
        let w = random_weights(8, 1);
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        // a window and its copy translated right by one stride step
        let base = random_window(10, 47);
        let mut shifted = ImageWindow::new(52, 47);
        for v in shifted.data.iter_mut() {
            *v = rng.random_range(0.0..1.0);
        }
        for y in 0..47 {
            for x in 0..47 {
                shifted.set(x + CONV_STRIDE, y, [base.at(x, y, 0), base.at(x, y, 1), base.at(x, y, 2)]);
            }
        }
        let r_base = conv_response_grid(&base, &w, 0);
        let r_shift = conv_response_grid(&shifted, &w, 0);
        let (bh, bw) = base.response_shape();
        let (_, sw) = shifted.response_shape();
        for py in 0..bh {
            for px in 0..bw {
                let a = r_base[py * bw + px];
                let b = r_shift[py * sw + px + 1];
                assert!((a - b).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn dense_sampling_is_translation_invariant_at_the_stride() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        // 128-periodic texture: translating content by 128 px changes nothing
        let mut tile = vec![[0u8; 3]; DENSE_STRIDE * DENSE_STRIDE];
        for px in tile.iter_mut() {
            *px = [rng.random(), rng.random(), rng.random()];
        }
        let value = |x: usize, y: usize| tile[(y % DENSE_STRIDE) * DENSE_STRIDE + (x % DENSE_STRIDE)];
        let mut a = PatchPixels::blank(512, 512);
        let mut b = PatchPixels::blank(512, 512);
        for y in 0..512 {
            for x in 0..512 {
                a.set_pixel(x, y, value(x, y));
                b.set_pixel(x, y, value(x + DENSE_STRIDE, y));
            }
        }
        let w = random_weights(12, 2);
        assert_eq!(score_patch(&a, &w).unwrap(), score_patch(&b, &w).unwrap());
    }

    #[test]
    fn padded_patch_skips_partial_windows() {
        let w = random_weights(13, 1);
        // valid region fits a single 64x64 window column
        let mut p = PatchPixels::blank(100, 512);
        for y in 0..512 {
            for x in 0..100 {
                p.set_pixel(x, y, [((x * y) % 256) as u8; 3]);
            }
        }
        assert!(score_patch(&p, &w).is_some());
        let tiny = PatchPixels::blank(50, 50);
        assert_eq!(score_patch(&tiny, &w), None);
    }

    #[test]
    fn q2_normalization_clamps() {
        assert_eq!(q2_from_patch_scores(&[6.0f64]), Some(0.5));
        assert_eq!(q2_from_patch_scores(&[30.0f64]), Some(1.0));
        assert_eq!(q2_from_patch_scores(&[-5.0f64]), Some(0.0));
        assert_eq!(q2_from_patch_scores::<f64>(&[]), None);
    }

    #[test]
    fn weight_files_round_trip_both_formats() {
        let dir = tempfile::TempDir::new().unwrap();
        let w = random_weights(14, 2);

        let json_path = dir.path().join("weights.json");
        w.save_json(&json_path).unwrap();
        let text = std::fs::read_to_string(&json_path).unwrap();
        assert!(text.contains("\"kernel\""));
        let back = FocusNetWeights::<f64>::load(&json_path).unwrap();
        assert_eq!(back, w);

        let bin_path = dir.path().join("weights.fan");
        w.save_binary(&bin_path).unwrap();
        let bytes = std::fs::read(&bin_path).unwrap();
        assert_eq!(&bytes[..16], &WEIGHTS_MAGIC);
        assert_eq!(bytes.len(), 16 + 4 + 8 * w.parameter_count());
        let back = FocusNetWeights::<f64>::load(&bin_path).unwrap();
        assert_eq!(back, w);
    }

    #[test]
    fn corrupt_weight_files_are_rejected() {
        let dir = tempfile::TempDir::new().unwrap();
        let path = dir.path().join("weights.bin");
        std::fs::write(&path, b"FOCUSATTNETv1\0\0\0ZZ").unwrap();
        assert!(FocusNetWeights::<f64>::load(&path).is_err());
        let path = dir.path().join("weights.json");
        std::fs::write(&path, "{\"n_filters\": 1}").unwrap();
        assert!(FocusNetWeights::<f64>::load(&path).is_err());
    }
}
