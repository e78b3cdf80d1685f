//! The "tile tree" container: `level_<k>/<i>_<j>.png` tiles plus a JSON
//! manifest. Tiles are full 512x512 RGB8 PNGs, zero-padded at the level
//! border. This is the fixture format the synthetic generator writes.

use std::fs;
use std::io::BufWriter;
use std::path::{Path, PathBuf};

use num_rational::Ratio;
use serde::{Deserialize, Serialize};

use super::{
    format_ratio, grid_shape, parse_ratio, LevelInfo, PyramidError, Result, SlidePyramid,
    TileStore,
};
use crate::raster::{RgbRaster, PATCH_SIZE};

pub(crate) const MANIFEST: &str = "manifest.json";

#[derive(Serialize, Deserialize)]
struct Manifest {
    base_magnification: u32,
    levels: Vec<ManifestLevel>,
}

#[derive(Serialize, Deserialize)]
struct ManifestLevel {
    factor: String,
    width: u32,
    height: u32,
}

pub(crate) struct TileTreeStore {
    root: PathBuf,
}

impl TileTreeStore {
    fn tile_path(root: &Path, level: usize, i: u32, j: u32) -> PathBuf {
        root.join(format!("level_{level}")).join(format!("{i}_{j}.png"))
    }

    pub(crate) fn read_tile(&self, level: usize, i: u32, j: u32) -> Result<Vec<u8>> {
        let path = Self::tile_path(&self.root, level, i, j);
        let file = fs::File::open(&path)?;
        let mut decoder = png::Decoder::new(std::io::BufReader::new(file));
        decoder.set_transformations(png::Transformations::EXPAND);
        let mut reader = decoder
            .read_info()
            .map_err(|e| PyramidError::CorruptPyramid(format!("{}: {e}", path.display())))?;
        let mut buf = vec![0u8; reader.output_buffer_size().unwrap_or(0)];
        let info = reader
            .next_frame(&mut buf)
            .map_err(|e| PyramidError::CorruptPyramid(format!("{}: {e}", path.display())))?;
        if info.width as usize != PATCH_SIZE
            || info.height as usize != PATCH_SIZE
            || info.color_type != png::ColorType::Rgb
            || info.bit_depth != png::BitDepth::Eight
        {
            return Err(PyramidError::CorruptPyramid(format!(
                "{}: tile must be {PATCH_SIZE}x{PATCH_SIZE} RGB8",
                path.display()
            )));
        }
        buf.truncate(info.buffer_size());
        Ok(buf)
    }
}

pub(crate) fn open(dir: &Path) -> Result<SlidePyramid> {
    let manifest_path = dir.join(MANIFEST);
    if !manifest_path.is_file() {
        return Err(PyramidError::UnsupportedFormat(format!(
            "{}: no {MANIFEST}",
            dir.display()
        )));
    }
    let text = fs::read_to_string(&manifest_path)?;
    let manifest: Manifest = serde_json::from_str(&text)
        .map_err(|e| PyramidError::CorruptPyramid(format!("{MANIFEST}: {e}")))?;
    let mut levels = Vec::with_capacity(manifest.levels.len());
    for level in &manifest.levels {
        let factor = parse_ratio(&level.factor)
            .map_err(|e| PyramidError::CorruptPyramid(format!("{MANIFEST}: {e}")))?;
        levels.push(LevelInfo { factor, width: level.width, height: level.height });
    }
    // every expected tile file must exist before we hand out the handle
    for (k, level) in levels.iter().enumerate() {
        let (rows, cols) = grid_shape(level.width, level.height);
        for i in 0..rows {
            for j in 0..cols {
                let path = TileTreeStore::tile_path(dir, k, i, j);
                if !path.is_file() {
                    return Err(PyramidError::CorruptPyramid(format!(
                        "missing tile {}",
                        path.display()
                    )));
                }
            }
        }
    }
    let id = dir
        .file_name()
        .map(|n| n.to_string_lossy().into_owned())
        .unwrap_or_else(|| dir.display().to_string());
    SlidePyramid::from_parts(
        id,
        manifest.base_magnification,
        levels,
        TileStore::Tree(TileTreeStore { root: dir.to_path_buf() }),
    )
}

/// Write a tile-tree slide. `levels` pairs each relative factor with the
/// full raster of that level, base level first.
pub fn write_slide_tree(
    dir: &Path,
    base_magnification: u32,
    levels: &[(Ratio<u32>, &RgbRaster)],
) -> Result<()> {
    let manifest = Manifest {
        base_magnification,
        levels: levels
            .iter()
            .map(|(factor, raster)| ManifestLevel {
                factor: format_ratio(*factor),
                width: raster.width() as u32,
                height: raster.height() as u32,
            })
            .collect(),
    };
    fs::create_dir_all(dir)?;
    fs::write(dir.join(MANIFEST), serde_json::to_string_pretty(&manifest)?)?;
    for (k, (_, raster)) in levels.iter().enumerate() {
        let level_dir = dir.join(format!("level_{k}"));
        fs::create_dir_all(&level_dir)?;
        let (rows, cols) = grid_shape(raster.width() as u32, raster.height() as u32);
        for i in 0..rows {
            for j in 0..cols {
                let patch =
                    raster.extract_patch(j as usize * PATCH_SIZE, i as usize * PATCH_SIZE);
                write_tile_png(&level_dir.join(format!("{i}_{j}.png")), patch.data())?;
            }
        }
    }
    Ok(())
}

fn write_tile_png(path: &Path, data: &[u8]) -> Result<()> {
    let file = fs::File::create(path)?;
    let mut encoder =
        png::Encoder::new(BufWriter::new(file), PATCH_SIZE as u32, PATCH_SIZE as u32);
    encoder.set_color(png::ColorType::Rgb);
    encoder.set_depth(png::BitDepth::Eight);
    let mut writer = encoder
        .write_header()
        .map_err(|e| PyramidError::CorruptPyramid(format!("png encode: {e}")))?;
    writer
        .write_image_data(data)
        .map_err(|e| PyramidError::CorruptPyramid(format!("png encode: {e}")))?;
    Ok(())
}
