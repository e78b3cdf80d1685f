//! Pyramidal slide access: open a slide container, enumerate 512x512
//! patches at a requested magnification, and classify patches as white
//! background vs content.
//!
//! Two containers are supported:
//! * tiled multi-page TIFF (one page per level, 512-pixel tiles, RGB8),
//! * a "tile tree" directory of PNG tiles with a JSON manifest, which is
//!   also what the synthetic slide generator writes.

mod tiff;
mod tiletree;

pub use tiff::write_slide_tiff;
pub use tiletree::write_slide_tree;

use std::path::Path;
use std::sync::Arc;

use num_rational::Ratio;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::raster::{PatchPixels, RgbRaster, PATCH_SIZE};

#[derive(Debug, Error)]
pub enum PyramidError {
    #[error("unsupported slide format: {0}")]
    UnsupportedFormat(String),
    #[error("corrupt pyramid: {0}")]
    CorruptPyramid(String),
    #[error("magnification {requested} exceeds base magnification {base}x")]
    MagnificationUnavailable { requested: Magnification, base: u32 },
    #[error("patch index ({i},{j}) outside grid {rows}x{cols}")]
    PatchOutOfRange { i: u32, j: u32, rows: u32, cols: u32 },
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error("json: {0}")]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, PyramidError>;

/// Objective power a patch grid is addressed at. The two canonical passes
/// of the evaluation pipeline get dedicated variants.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Magnification {
    X4,
    X20,
    Other(Ratio<u32>),
}

impl Magnification {
    pub fn from_power(power: Ratio<u32>) -> Self {
        if power == Ratio::from_integer(4) {
            Magnification::X4
        } else if power == Ratio::from_integer(20) {
            Magnification::X20
        } else {
            Magnification::Other(power)
        }
    }

    pub fn from_integer(power: u32) -> Self {
        Self::from_power(Ratio::from_integer(power))
    }

    pub fn power(&self) -> Ratio<u32> {
        match self {
            Magnification::X4 => Ratio::from_integer(4),
            Magnification::X20 => Ratio::from_integer(20),
            Magnification::Other(r) => *r,
        }
    }

    /// Integer objective power, when the power is integral. Used for
    /// backend artifact keys.
    pub fn as_integer(&self) -> Option<u32> {
        let p = self.power();
        (*p.denom() == 1).then(|| *p.numer())
    }
}

impl std::fmt::Display for Magnification {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let p = self.power();
        if *p.denom() == 1 {
            write!(f, "{}x", p.numer())
        } else {
            write!(f, "{}/{}x", p.numer(), p.denom())
        }
    }
}

impl Serialize for Magnification {
    fn serialize<S: serde::Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        s.serialize_str(&self.to_string())
    }
}

impl<'de> Deserialize<'de> for Magnification {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        let text = String::deserialize(d)?;
        let body = text.strip_suffix('x').unwrap_or(&text);
        let ratio = parse_ratio(body).map_err(serde::de::Error::custom)?;
        Ok(Magnification::from_power(ratio))
    }
}

pub(crate) fn parse_ratio(text: &str) -> std::result::Result<Ratio<u32>, String> {
    let mut parts = text.splitn(2, '/');
    let numer: u32 = parts
        .next()
        .unwrap_or("")
        .trim()
        .parse()
        .map_err(|_| format!("bad rational {text:?}"))?;
    let denom: u32 = match parts.next() {
        Some(d) => d.trim().parse().map_err(|_| format!("bad rational {text:?}"))?,
        None => 1,
    };
    if numer == 0 || denom == 0 {
        return Err(format!("rational {text:?} must be positive"));
    }
    Ok(Ratio::new(numer, denom))
}

pub(crate) fn format_ratio(r: Ratio<u32>) -> String {
    format!("{}/{}", r.numer(), r.denom())
}

/// One pyramid level: its magnification factor relative to the base level
/// and its raster dimensions.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct LevelInfo {
    pub factor: Ratio<u32>,
    pub width: u32,
    pub height: u32,
}

/// Expected level dimensions: base dimensions scaled by the factor,
/// rounded down.
pub fn scaled_dimension(base: u32, factor: Ratio<u32>) -> u32 {
    ((base as u64 * *factor.numer() as u64) / *factor.denom() as u64) as u32
}

/// Validate the level table invariants shared by both containers: the
/// first level is the base (factor 1), factors strictly decrease, and
/// every level's dimensions match the scaled base dimensions.
pub fn validate_levels(levels: &[LevelInfo]) -> Result<()> {
    let base = levels
        .first()
        .ok_or_else(|| PyramidError::CorruptPyramid("no levels".into()))?;
    if base.factor != Ratio::from_integer(1) {
        return Err(PyramidError::CorruptPyramid(format!(
            "first level factor must be 1/1, got {}",
            format_ratio(base.factor)
        )));
    }
    if base.width == 0 || base.height == 0 {
        return Err(PyramidError::CorruptPyramid("base level has zero dimension".into()));
    }
    for (k, level) in levels.iter().enumerate() {
        if k > 0 && level.factor >= levels[k - 1].factor {
            return Err(PyramidError::CorruptPyramid(format!(
                "level factors must strictly decrease, level {k} has {}",
                format_ratio(level.factor)
            )));
        }
        let want_w = scaled_dimension(base.width, level.factor);
        let want_h = scaled_dimension(base.height, level.factor);
        if level.width != want_w || level.height != want_h {
            return Err(PyramidError::CorruptPyramid(format!(
                "level {k} is {}x{}, expected {}x{} from factor {}",
                level.width,
                level.height,
                want_w,
                want_h,
                format_ratio(level.factor)
            )));
        }
    }
    Ok(())
}

pub(crate) enum TileStore {
    Tree(tiletree::TileTreeStore),
    Tiff(tiff::TiffStore),
}

impl TileStore {
    /// Full 512x512x3 tile bytes. Padding beyond the level extent is zero.
    fn read_tile(&self, level: usize, i: u32, j: u32) -> Result<Vec<u8>> {
        match self {
            TileStore::Tree(t) => t.read_tile(level, i, j),
            TileStore::Tiff(t) => t.read_tile(level, i, j),
        }
    }
}

/// A multi-resolution tiled slide. Opening validates the level table and
/// tile directory but reads no pixel data. The handle is immutable and can
/// be shared across worker threads; patch reads are pure.
pub struct SlidePyramid {
    id: String,
    base_magnification: u32,
    levels: Vec<LevelInfo>,
    store: TileStore,
}

impl SlidePyramid {
    pub fn open(path: &Path) -> Result<SlidePyramid> {
        if path.is_dir() {
            tiletree::open(path)
        } else {
            match path.extension().and_then(|e| e.to_str()) {
                Some("tif") | Some("tiff") => tiff::open(path),
                other => Err(PyramidError::UnsupportedFormat(format!(
                    "{} (extension {:?})",
                    path.display(),
                    other
                ))),
            }
        }
    }

    pub(crate) fn from_parts(
        id: String,
        base_magnification: u32,
        levels: Vec<LevelInfo>,
        store: TileStore,
    ) -> Result<SlidePyramid> {
        if base_magnification == 0 {
            return Err(PyramidError::CorruptPyramid("base magnification is zero".into()));
        }
        validate_levels(&levels)?;
        Ok(SlidePyramid { id, base_magnification, levels, store })
    }

    pub fn id(&self) -> &str {
        &self.id
    }

    pub fn base_magnification(&self) -> u32 {
        self.base_magnification
    }

    pub fn levels(&self) -> &[LevelInfo] {
        &self.levels
    }

    /// Read one patch of a native level, zero-padded at the right/bottom
    /// border.
    pub fn read_patch(&self, level: usize, i: u32, j: u32) -> Result<PatchPixels> {
        let info = self.levels.get(level).ok_or_else(|| {
            PyramidError::CorruptPyramid(format!("level {level} out of range"))
        })?;
        let (rows, cols) = grid_shape(info.width, info.height);
        if i >= rows || j >= cols {
            return Err(PyramidError::PatchOutOfRange { i, j, rows, cols });
        }
        let bytes = self.store.read_tile(level, i, j)?;
        let valid_w = (info.width - j * PATCH_SIZE as u32).min(PATCH_SIZE as u32) as usize;
        let valid_h = (info.height - i * PATCH_SIZE as u32).min(PATCH_SIZE as u32) as usize;
        let mut patch = PatchPixels::from_vec(bytes, valid_w, valid_h);
        scrub_padding(&mut patch);
        Ok(patch)
    }

    /// Assemble the full raster of a native level.
    pub fn level_raster(&self, level: usize) -> Result<RgbRaster> {
        let info = self.levels[level];
        let (rows, cols) = grid_shape(info.width, info.height);
        let mut raster = RgbRaster::new(info.width as usize, info.height as usize);
        for i in 0..rows {
            for j in 0..cols {
                let patch = self.read_patch(level, i, j)?;
                blit(&mut raster, &patch, j as usize * PATCH_SIZE, i as usize * PATCH_SIZE);
            }
        }
        Ok(raster)
    }

    /// Resolve a requested magnification to a patch-addressable view.
    /// The nearest level with a factor >= the requested relative factor is
    /// used; when the match is not exact the level is box-downsampled to
    /// the exact magnification.
    pub fn at_magnification(&self, mag: Magnification) -> Result<MagView<'_>> {
        let rel = ratio_div(mag.power(), Ratio::from_integer(self.base_magnification));
        if rel > Ratio::from_integer(1) {
            return Err(PyramidError::MagnificationUnavailable {
                requested: mag,
                base: self.base_magnification,
            });
        }
        // levels are sorted by decreasing factor; pick the smallest factor
        // that still covers the request
        let level = self
            .levels
            .iter()
            .rposition(|l| l.factor >= rel)
            .expect("base level factor 1 covers any request <= 1");
        let info = self.levels[level];
        let plan = if info.factor == rel {
            Plan::Native(level)
        } else {
            let base = self.levels[0];
            let tw = scaled_dimension(base.width, rel) as usize;
            let th = scaled_dimension(base.height, rel) as usize;
            let src = self.level_raster(level)?;
            Plan::Resampled(Arc::new(src.box_resample(tw.max(1), th.max(1))))
        };
        let (width, height) = match &plan {
            Plan::Native(k) => (self.levels[*k].width, self.levels[*k].height),
            Plan::Resampled(r) => (r.width() as u32, r.height() as u32),
        };
        let (rows, cols) = grid_shape(width, height);
        Ok(MagView { slide: self, plan, mag, width, height, rows, cols })
    }
}

enum Plan {
    Native(usize),
    Resampled(Arc<RgbRaster>),
}

/// A patch grid over the slide at one magnification. Cheap to share with
/// worker threads; `patch` is pure.
pub struct MagView<'a> {
    slide: &'a SlidePyramid,
    plan: Plan,
    mag: Magnification,
    width: u32,
    height: u32,
    rows: u32,
    cols: u32,
}

impl<'a> MagView<'a> {
    pub fn magnification(&self) -> Magnification {
        self.mag
    }

    pub fn grid(&self) -> (u32, u32) {
        (self.rows, self.cols)
    }

    pub fn dimensions(&self) -> (u32, u32) {
        (self.width, self.height)
    }

    pub fn patch_count(&self) -> usize {
        self.rows as usize * self.cols as usize
    }

    pub fn patch(&self, i: u32, j: u32) -> Result<PatchRecord> {
        if i >= self.rows || j >= self.cols {
            return Err(PyramidError::PatchOutOfRange { i, j, rows: self.rows, cols: self.cols });
        }
        let pixels = match &self.plan {
            Plan::Native(level) => self.slide.read_patch(*level, i, j)?,
            Plan::Resampled(raster) => {
                raster.extract_patch(j as usize * PATCH_SIZE, i as usize * PATCH_SIZE)
            }
        };
        Ok(PatchRecord::classify(self.mag, i, j, pixels))
    }

    /// Patches in row-major order.
    pub fn iter(&self) -> impl Iterator<Item = Result<PatchRecord>> + '_ {
        (0..self.rows).flat_map(move |i| (0..self.cols).map(move |j| self.patch(i, j)))
    }
}

fn ratio_div(a: Ratio<u32>, b: Ratio<u32>) -> Ratio<u32> {
    a / b
}

pub fn grid_shape(width: u32, height: u32) -> (u32, u32) {
    let rows = height.div_ceil(PATCH_SIZE as u32);
    let cols = width.div_ceil(PATCH_SIZE as u32);
    (rows, cols)
}

fn blit(raster: &mut RgbRaster, patch: &PatchPixels, x0: usize, y0: usize) {
    for y in 0..patch.valid_h() {
        for x in 0..patch.valid_w() {
            raster.set_pixel(x0 + x, y0 + y, patch.pixel(x, y));
        }
    }
}

fn scrub_padding(patch: &mut PatchPixels) {
    if !patch.is_padded() {
        return;
    }
    let (vw, vh) = (patch.valid_w(), patch.valid_h());
    for y in 0..PATCH_SIZE {
        for x in 0..PATCH_SIZE {
            if x >= vw || y >= vh {
                patch.set_pixel(x, y, [0, 0, 0]);
            }
        }
    }
}

/// One enumerated patch with its white/content classification.
#[derive(Debug, Clone)]
pub struct PatchRecord {
    pub magnification: Magnification,
    pub grid_i: u32,
    pub grid_j: u32,
    pub pixels: PatchPixels,
    pub is_white: bool,
    pub padded_fraction: f64,
}

impl PatchRecord {
    pub fn classify(mag: Magnification, i: u32, j: u32, pixels: PatchPixels) -> PatchRecord {
        let white = white_fraction(&pixels);
        PatchRecord {
            magnification: mag,
            grid_i: i,
            grid_j: j,
            padded_fraction: pixels.padded_fraction(),
            is_white: white > WHITE_PATCH_FRACTION,
            pixels,
        }
    }
}

/// Gray level a pixel must exceed, in every channel, to count as bright
/// background.
pub const WHITE_PIXEL_LEVEL: u8 = 200;
/// A patch is white when strictly more than this fraction of its
/// non-padding pixels are bright.
pub const WHITE_PATCH_FRACTION: f64 = 0.8;

/// Fraction of non-padding pixels whose channels all exceed
/// [`WHITE_PIXEL_LEVEL`]. All three channels are required so that pen
/// marks that are bright in a single channel still count as content.
pub fn white_fraction(pixels: &PatchPixels) -> f64 {
    let total = pixels.valid_w() * pixels.valid_h();
    if total == 0 {
        return 0.0;
    }
    let bright = pixels
        .valid_pixels()
        .filter(|[r, g, b]| {
            *r > WHITE_PIXEL_LEVEL && *g > WHITE_PIXEL_LEVEL && *b > WHITE_PIXEL_LEVEL
        })
        .count();
    bright as f64 / total as f64
}
