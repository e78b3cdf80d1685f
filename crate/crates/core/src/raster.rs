//! Shared 8-bit RGB raster primitives: patch buffers, the fixed BT.601
//! grayscale conversion, and deterministic box (area-average) resampling.

use serde::{Deserialize, Serialize};

/// Side length of every patch and tile in the system, in pixels.
pub const PATCH_SIZE: usize = 512;

/// BT.601 luma, rounded to the nearest integer. Fixed so that gray-level
/// statistics are identical across platforms.
#[inline]
pub fn gray_bt601(r: u8, g: u8, b: u8) -> u8 {
    let y = 0.299 * r as f64 + 0.587 * g as f64 + 0.114 * b as f64;
    y.round() as u8
}

/// An owned interleaved-RGB raster.
#[derive(Clone, PartialEq, Eq)]
pub struct RgbRaster {
    width: usize,
    height: usize,
    data: Vec<u8>,
}

impl RgbRaster {
    pub fn new(width: usize, height: usize) -> Self {
        Self { width, height, data: vec![0; width * height * 3] }
    }

    pub fn filled(width: usize, height: usize, rgb: [u8; 3]) -> Self {
        let mut data = Vec::with_capacity(width * height * 3);
        for _ in 0..width * height {
            data.extend_from_slice(&rgb);
        }
        Self { width, height, data }
    }

    pub fn from_vec(width: usize, height: usize, data: Vec<u8>) -> Self {
        assert_eq!(data.len(), width * height * 3, "raster buffer size mismatch");
        Self { width, height, data }
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn data(&self) -> &[u8] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [u8] {
        &mut self.data
    }

    #[inline]
    pub fn pixel(&self, x: usize, y: usize) -> [u8; 3] {
        let o = (y * self.width + x) * 3;
        [self.data[o], self.data[o + 1], self.data[o + 2]]
    }

    #[inline]
    pub fn set_pixel(&mut self, x: usize, y: usize, rgb: [u8; 3]) {
        let o = (y * self.width + x) * 3;
        self.data[o..o + 3].copy_from_slice(&rgb);
    }

    /// Copy the rectangle starting at `(x0, y0)` into a zero-padded
    /// `PATCH_SIZE` square buffer.
    pub fn extract_patch(&self, x0: usize, y0: usize) -> PatchPixels {
        let valid_w = self.width.saturating_sub(x0).min(PATCH_SIZE);
        let valid_h = self.height.saturating_sub(y0).min(PATCH_SIZE);
        let mut patch = PatchPixels::blank(valid_w, valid_h);
        for row in 0..valid_h {
            let src = ((y0 + row) * self.width + x0) * 3;
            let dst = row * PATCH_SIZE * 3;
            patch.data[dst..dst + valid_w * 3].copy_from_slice(&self.data[src..src + valid_w * 3]);
        }
        patch
    }

    /// Area-average resample to `target_w` x `target_h`. Exact block means
    /// on integer ratios, fractional pixel coverage otherwise. Output pixels
    /// are rounded to the nearest integer.
    pub fn box_resample(&self, target_w: usize, target_h: usize) -> RgbRaster {
        assert!(target_w >= 1 && target_h >= 1);
        assert!(target_w <= self.width && target_h <= self.height, "box_resample only shrinks");
        if target_w == self.width && target_h == self.height {
            return self.clone();
        }
        let mut out = RgbRaster::new(target_w, target_h);
        let sx = self.width as f64 / target_w as f64;
        let sy = self.height as f64 / target_h as f64;
        let integer_ratio = self.width % target_w == 0 && self.height % target_h == 0;
        for ty in 0..target_h {
            for tx in 0..target_w {
                let rgb = if integer_ratio {
                    let bx = self.width / target_w;
                    let by = self.height / target_h;
                    self.block_mean(tx * bx, ty * by, bx, by)
                } else {
                    self.area_mean(tx as f64 * sx, ty as f64 * sy, sx, sy)
                };
                out.set_pixel(tx, ty, rgb);
            }
        }
        out
    }

    fn block_mean(&self, x0: usize, y0: usize, bw: usize, bh: usize) -> [u8; 3] {
        let mut acc = [0u64; 3];
        for y in y0..y0 + bh {
            let base = (y * self.width + x0) * 3;
            for x in 0..bw {
                for c in 0..3 {
                    acc[c] += self.data[base + x * 3 + c] as u64;
                }
            }
        }
        let n = (bw * bh) as f64;
        [0, 1, 2].map(|c| (acc[c] as f64 / n).round() as u8)
    }

    /// Mean over the axis-aligned source window `[x0, x0+w) x [y0, y0+h)`
    /// with fractional edge coverage.
    fn area_mean(&self, x0: f64, y0: f64, w: f64, h: f64) -> [u8; 3] {
        let x1 = (x0 + w).min(self.width as f64);
        let y1 = (y0 + h).min(self.height as f64);
        let mut acc = [0.0f64; 3];
        let mut weight = 0.0f64;
        let mut y = y0.floor() as usize;
        while (y as f64) < y1 {
            let wy = ((y + 1) as f64).min(y1) - (y as f64).max(y0);
            let mut x = x0.floor() as usize;
            while (x as f64) < x1 {
                let wx = ((x + 1) as f64).min(x1) - (x as f64).max(x0);
                let px = self.pixel(x.min(self.width - 1), y.min(self.height - 1));
                let cov = wx * wy;
                for c in 0..3 {
                    acc[c] += cov * px[c] as f64;
                }
                weight += cov;
                x += 1;
            }
            y += 1;
        }
        [0, 1, 2].map(|c| (acc[c] / weight).round() as u8)
    }
}

impl std::fmt::Debug for RgbRaster {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "RgbRaster({}x{})", self.width, self.height)
    }
}

/// One `PATCH_SIZE` square of interleaved RGB with an explicit valid
/// (non-padding) region anchored at the top-left corner. Padding bytes are
/// always zero.
#[derive(Clone, PartialEq, Eq)]
pub struct PatchPixels {
    data: Vec<u8>,
    valid_w: usize,
    valid_h: usize,
}

impl PatchPixels {
    pub fn blank(valid_w: usize, valid_h: usize) -> Self {
        assert!(valid_w <= PATCH_SIZE && valid_h <= PATCH_SIZE);
        Self { data: vec![0; PATCH_SIZE * PATCH_SIZE * 3], valid_w, valid_h }
    }

    pub fn filled(rgb: [u8; 3]) -> Self {
        let mut p = Self::blank(PATCH_SIZE, PATCH_SIZE);
        for px in p.data.chunks_exact_mut(3) {
            px.copy_from_slice(&rgb);
        }
        p
    }

    /// Wrap a full-size interleaved buffer; `valid_w`/`valid_h` mark the
    /// non-padding region.
    pub fn from_vec(data: Vec<u8>, valid_w: usize, valid_h: usize) -> Self {
        assert_eq!(data.len(), PATCH_SIZE * PATCH_SIZE * 3);
        assert!(valid_w <= PATCH_SIZE && valid_h <= PATCH_SIZE);
        Self { data, valid_w, valid_h }
    }

    pub fn data(&self) -> &[u8] {
        &self.data
    }

    pub fn valid_w(&self) -> usize {
        self.valid_w
    }

    pub fn valid_h(&self) -> usize {
        self.valid_h
    }

    pub fn is_padded(&self) -> bool {
        self.valid_w < PATCH_SIZE || self.valid_h < PATCH_SIZE
    }

    /// Fraction of the patch area occupied by zero padding.
    pub fn padded_fraction(&self) -> f64 {
        1.0 - (self.valid_w * self.valid_h) as f64 / (PATCH_SIZE * PATCH_SIZE) as f64
    }

    #[inline]
    pub fn pixel(&self, x: usize, y: usize) -> [u8; 3] {
        let o = (y * PATCH_SIZE + x) * 3;
        [self.data[o], self.data[o + 1], self.data[o + 2]]
    }

    #[inline]
    pub fn set_pixel(&mut self, x: usize, y: usize, rgb: [u8; 3]) {
        let o = (y * PATCH_SIZE + x) * 3;
        self.data[o..o + 3].copy_from_slice(&rgb);
    }

    /// BT.601 grayscale of the valid region, row-major, `valid_w * valid_h`
    /// entries.
    pub fn gray_valid(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(self.valid_w * self.valid_h);
        for y in 0..self.valid_h {
            for x in 0..self.valid_w {
                let [r, g, b] = self.pixel(x, y);
                out.push(gray_bt601(r, g, b));
            }
        }
        out
    }

    /// Iterate the valid-region pixels in row-major order.
    pub fn valid_pixels(&self) -> impl Iterator<Item = [u8; 3]> + '_ {
        (0..self.valid_h)
            .flat_map(move |y| (0..self.valid_w).map(move |x| self.pixel(x, y)))
    }
}

impl std::fmt::Debug for PatchPixels {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "PatchPixels(valid {}x{})", self.valid_w, self.valid_h)
    }
}

/// Axis-aligned rectangle in pixel coordinates, used for detection boxes
/// and scene geometry.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PixelRect {
    pub x: u32,
    pub y: u32,
    pub w: u32,
    pub h: u32,
}

impl PixelRect {
    pub fn new(x: u32, y: u32, w: u32, h: u32) -> Self {
        Self { x, y, w, h }
    }

    pub fn area(&self) -> u64 {
        self.w as u64 * self.h as u64
    }

    pub fn right(&self) -> u32 {
        self.x + self.w
    }

    pub fn bottom(&self) -> u32 {
        self.y + self.h
    }

    pub fn intersects(&self, other: &PixelRect) -> bool {
        self.x < other.right() && other.x < self.right() && self.y < other.bottom() && other.y < self.bottom()
    }

    pub fn iou(&self, other: &PixelRect) -> f64 {
        let ix = self.x.max(other.x);
        let iy = self.y.max(other.y);
        let ir = self.right().min(other.right());
        let ib = self.bottom().min(other.bottom());
        if ir <= ix || ib <= iy {
            return 0.0;
        }
        let inter = (ir - ix) as u64 * (ib - iy) as u64;
        let union = self.area() + other.area() - inter;
        inter as f64 / union as f64
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn gray_weights_sum_to_unity() {
        assert_eq!(gray_bt601(255, 255, 255), 255);
        assert_eq!(gray_bt601(0, 0, 0), 0);
        assert_eq!(gray_bt601(128, 128, 128), 128);
    }

    #[test]
    fn patch_extraction_zero_pads_borders() {
        let mut r = RgbRaster::filled(600, 520, [10, 20, 30]);
        r.set_pixel(599, 519, [1, 2, 3]);
        let p = r.extract_patch(512, 512);
        assert_eq!(p.valid_w(), 88);
        assert_eq!(p.valid_h(), 8);
        assert!(p.is_padded());
        assert_eq!(p.pixel(87, 7), [1, 2, 3]);
        assert_eq!(p.pixel(88, 7), [0, 0, 0]);
        assert_eq!(p.pixel(0, 8), [0, 0, 0]);
        let expected = 1.0 - (88.0 * 8.0) / (512.0 * 512.0);
        assert!((p.padded_fraction() - expected).abs() < 1e-15);
    }

    #[test]
    fn integer_box_resample_is_exact_block_mean() {
        let mut r = RgbRaster::new(4, 4);
        // one 2x2 block of 100s, rest 0
        for y in 0..2 {
            for x in 0..2 {
                r.set_pixel(x, y, [100, 100, 100]);
            }
        }
        let small = r.box_resample(2, 2);
        assert_eq!(small.pixel(0, 0), [100, 100, 100]);
        assert_eq!(small.pixel(1, 0), [0, 0, 0]);
        assert_eq!(small.pixel(1, 1), [0, 0, 0]);
    }

    #[test]
    fn fractional_resample_preserves_constant_rasters() {
        let r = RgbRaster::filled(10, 7, [42, 43, 44]);
        let s = r.box_resample(3, 2);
        for y in 0..2 {
            for x in 0..3 {
                assert_eq!(s.pixel(x, y), [42, 43, 44]);
            }
        }
    }

    #[test]
    fn iou_of_identical_rects_is_one() {
        let a = PixelRect::new(5, 5, 10, 10);
        assert_eq!(a.iou(&a), 1.0);
        let b = PixelRect::new(15, 5, 10, 10);
        assert_eq!(a.iou(&b), 0.0);
        let c = PixelRect::new(10, 5, 10, 10); // half overlap
        assert!((a.iou(&c) - 50.0 / 150.0).abs() < 1e-12);
    }
}
