//! Tiled multi-page TIFF container. One page per pyramid level, 512-pixel
//! uncompressed RGB8 tiles, little-endian classic TIFF. The magnification
//! factor of each page and the base objective power ride in the
//! ImageDescription tag as `key=value` pairs, e.g.
//! `base-magnification=20;factor=1/5`.

use std::fs;
use std::os::unix::fs::FileExt;
use std::path::Path;

use num_rational::Ratio;

use super::{
    format_ratio, grid_shape, parse_ratio, LevelInfo, PyramidError, Result, SlidePyramid,
    TileStore,
};
use crate::raster::{RgbRaster, PATCH_SIZE};

const TILE_BYTES: usize = PATCH_SIZE * PATCH_SIZE * 3;

const TAG_IMAGE_WIDTH: u16 = 256;
const TAG_IMAGE_LENGTH: u16 = 257;
const TAG_BITS_PER_SAMPLE: u16 = 258;
const TAG_COMPRESSION: u16 = 259;
const TAG_PHOTOMETRIC: u16 = 262;
const TAG_IMAGE_DESCRIPTION: u16 = 270;
const TAG_SAMPLES_PER_PIXEL: u16 = 277;
const TAG_TILE_WIDTH: u16 = 322;
const TAG_TILE_LENGTH: u16 = 323;
const TAG_TILE_OFFSETS: u16 = 324;
const TAG_TILE_BYTE_COUNTS: u16 = 325;

const TYPE_SHORT: u16 = 3;
const TYPE_LONG: u16 = 4;
const TYPE_ASCII: u16 = 2;

pub(crate) struct TiffStore {
    file: fs::File,
    /// Per level: tile grid columns and per-tile file offsets.
    levels: Vec<TiffLevel>,
}

struct TiffLevel {
    cols: u32,
    offsets: Vec<u64>,
}

impl TiffStore {
    pub(crate) fn read_tile(&self, level: usize, i: u32, j: u32) -> Result<Vec<u8>> {
        let lv = &self.levels[level];
        let idx = (i * lv.cols + j) as usize;
        let mut buf = vec![0u8; TILE_BYTES];
        self.file.read_exact_at(&mut buf, lv.offsets[idx])?;
        Ok(buf)
    }
}

struct Cursor<'a> {
    data: &'a [u8],
}

impl<'a> Cursor<'a> {
    fn u16_at(&self, pos: usize) -> Result<u16> {
        let b = self
            .data
            .get(pos..pos + 2)
            .ok_or_else(|| PyramidError::CorruptPyramid("tiff: truncated".into()))?;
        Ok(u16::from_le_bytes([b[0], b[1]]))
    }

    fn u32_at(&self, pos: usize) -> Result<u32> {
        let b = self
            .data
            .get(pos..pos + 4)
            .ok_or_else(|| PyramidError::CorruptPyramid("tiff: truncated".into()))?;
        Ok(u32::from_le_bytes([b[0], b[1], b[2], b[3]]))
    }
}

#[derive(Clone)]
struct RawEntry {
    field_type: u16,
    count: u32,
    value_or_offset: u32,
}

struct PageMeta {
    width: u32,
    height: u32,
    factor: Ratio<u32>,
    base_magnification: Option<u32>,
    offsets: Vec<u64>,
}

pub(crate) fn open(path: &Path) -> Result<SlidePyramid> {
    let bytes = fs::read(path)?;
    let cur = Cursor { data: &bytes };
    if bytes.len() < 8 {
        return Err(PyramidError::UnsupportedFormat("tiff: file too short".into()));
    }
    match &bytes[0..4] {
        [0x49, 0x49, 42, 0] => {}
        [0x4d, 0x4d, 0, 42] => {
            return Err(PyramidError::UnsupportedFormat(
                "tiff: big-endian files are not supported".into(),
            ))
        }
        _ => return Err(PyramidError::UnsupportedFormat("tiff: bad magic".into())),
    }
    let mut ifd_offset = cur.u32_at(4)? as usize;
    let mut pages = Vec::new();
    while ifd_offset != 0 {
        let (page, next) = parse_ifd(&cur, ifd_offset, bytes.len())?;
        pages.push(page);
        ifd_offset = next;
        if pages.len() > 64 {
            return Err(PyramidError::CorruptPyramid("tiff: too many pages".into()));
        }
    }
    if pages.is_empty() {
        return Err(PyramidError::CorruptPyramid("tiff: no pages".into()));
    }
    let base_magnification = pages[0].base_magnification.ok_or_else(|| {
        PyramidError::CorruptPyramid("tiff: first page lacks base-magnification".into())
    })?;
    let levels: Vec<LevelInfo> = pages
        .iter()
        .map(|p| LevelInfo { factor: p.factor, width: p.width, height: p.height })
        .collect();
    let store = TiffStore {
        file: fs::File::open(path)?,
        levels: pages
            .iter()
            .map(|p| TiffLevel { cols: grid_shape(p.width, p.height).1, offsets: p.offsets.clone() })
            .collect(),
    };
    let id = path
        .file_stem()
        .map(|n| n.to_string_lossy().into_owned())
        .unwrap_or_else(|| path.display().to_string());
    SlidePyramid::from_parts(id, base_magnification, levels, TileStore::Tiff(store))
}

fn parse_ifd(cur: &Cursor, offset: usize, file_len: usize) -> Result<(PageMeta, usize)> {
    let entry_count = cur.u16_at(offset)? as usize;
    let mut entries = std::collections::BTreeMap::new();
    for e in 0..entry_count {
        let base = offset + 2 + e * 12;
        let tag = cur.u16_at(base)?;
        entries.insert(
            tag,
            RawEntry {
                field_type: cur.u16_at(base + 2)?,
                count: cur.u32_at(base + 4)?,
                value_or_offset: cur.u32_at(base + 8)?,
            },
        );
    }
    let next = cur.u32_at(offset + 2 + entry_count * 12)? as usize;

    let scalar = |tag: u16| -> Result<u32> {
        let e = entries
            .get(&tag)
            .ok_or_else(|| PyramidError::CorruptPyramid(format!("tiff: missing tag {tag}")))?;
        if e.count != 1 {
            return Err(PyramidError::CorruptPyramid(format!("tiff: tag {tag} not scalar")));
        }
        Ok(match e.field_type {
            TYPE_SHORT => e.value_or_offset & 0xffff,
            TYPE_LONG => e.value_or_offset,
            t => {
                return Err(PyramidError::CorruptPyramid(format!(
                    "tiff: tag {tag} has unsupported type {t}"
                )))
            }
        })
    };

    let long_array = |tag: u16| -> Result<Vec<u32>> {
        let e = entries
            .get(&tag)
            .ok_or_else(|| PyramidError::CorruptPyramid(format!("tiff: missing tag {tag}")))?;
        if e.field_type != TYPE_LONG {
            return Err(PyramidError::CorruptPyramid(format!("tiff: tag {tag} must be LONG")));
        }
        let n = e.count as usize;
        if n == 1 {
            return Ok(vec![e.value_or_offset]);
        }
        let start = e.value_or_offset as usize;
        (0..n).map(|k| cur.u32_at(start + k * 4)).collect()
    };

    // enforce the fixed profile
    if scalar(TAG_COMPRESSION)? != 1 {
        return Err(PyramidError::UnsupportedFormat("tiff: only uncompressed tiles".into()));
    }
    if scalar(TAG_PHOTOMETRIC)? != 2 {
        return Err(PyramidError::UnsupportedFormat("tiff: only RGB photometric".into()));
    }
    if scalar(TAG_SAMPLES_PER_PIXEL)? != 3 {
        return Err(PyramidError::UnsupportedFormat("tiff: expected 3 samples per pixel".into()));
    }
    let bits = entries
        .get(&TAG_BITS_PER_SAMPLE)
        .ok_or_else(|| PyramidError::CorruptPyramid("tiff: missing BitsPerSample".into()))?;
    if bits.count == 3 {
        let start = bits.value_or_offset as usize;
        for k in 0..3 {
            if cur.u16_at(start + k * 2)? != 8 {
                return Err(PyramidError::UnsupportedFormat("tiff: samples must be 8-bit".into()));
            }
        }
    } else {
        return Err(PyramidError::UnsupportedFormat("tiff: expected 3 BitsPerSample".into()));
    }
    if scalar(TAG_TILE_WIDTH)? as usize != PATCH_SIZE
        || scalar(TAG_TILE_LENGTH)? as usize != PATCH_SIZE
    {
        return Err(PyramidError::UnsupportedFormat(format!(
            "tiff: tiles must be {PATCH_SIZE}x{PATCH_SIZE}"
        )));
    }

    let width = scalar(TAG_IMAGE_WIDTH)?;
    let height = scalar(TAG_IMAGE_LENGTH)?;
    let (rows, cols) = grid_shape(width, height);
    let tile_count = (rows * cols) as usize;

    let offsets = long_array(TAG_TILE_OFFSETS)?;
    let counts = long_array(TAG_TILE_BYTE_COUNTS)?;
    if offsets.len() != tile_count || counts.len() != tile_count {
        return Err(PyramidError::CorruptPyramid(format!(
            "tiff: expected {tile_count} tiles, offsets/counts have {}/{}",
            offsets.len(),
            counts.len()
        )));
    }
    for (&off, &count) in offsets.iter().zip(&counts) {
        if count as usize != TILE_BYTES || off as usize + count as usize > file_len {
            return Err(PyramidError::CorruptPyramid("tiff: tile outside file".into()));
        }
    }

    let description = {
        let e = entries
            .get(&TAG_IMAGE_DESCRIPTION)
            .ok_or_else(|| PyramidError::CorruptPyramid("tiff: missing ImageDescription".into()))?;
        if e.field_type != TYPE_ASCII {
            return Err(PyramidError::CorruptPyramid("tiff: ImageDescription not ASCII".into()));
        }
        let n = e.count as usize;
        let raw: Vec<u8> = if n <= 4 {
            e.value_or_offset.to_le_bytes()[..n].to_vec()
        } else {
            let start = e.value_or_offset as usize;
            cur.data
                .get(start..start + n)
                .ok_or_else(|| PyramidError::CorruptPyramid("tiff: truncated".into()))?
                .to_vec()
        };
        String::from_utf8_lossy(raw.split(|&b| b == 0).next().unwrap_or(&[])).into_owned()
    };

    let mut factor = None;
    let mut base_magnification = None;
    for pair in description.split(';') {
        let mut kv = pair.splitn(2, '=');
        match (kv.next().map(str::trim), kv.next().map(str::trim)) {
            (Some("factor"), Some(v)) => {
                factor =
                    Some(parse_ratio(v).map_err(|e| {
                        PyramidError::CorruptPyramid(format!("tiff: factor: {e}"))
                    })?)
            }
            (Some("base-magnification"), Some(v)) => {
                base_magnification = Some(v.parse().map_err(|_| {
                    PyramidError::CorruptPyramid("tiff: bad base-magnification".into())
                })?)
            }
            _ => {}
        }
    }
    let factor = factor.ok_or_else(|| {
        PyramidError::CorruptPyramid("tiff: page description lacks factor".into())
    })?;

    Ok((
        PageMeta {
            width,
            height,
            factor,
            base_magnification,
            offsets: offsets.into_iter().map(u64::from).collect(),
        },
        next,
    ))
}

struct IfdEntry {
    tag: u16,
    field_type: u16,
    count: u32,
    inline: Option<u32>,
    external: Vec<u8>,
}

fn short_entry(tag: u16, value: u16) -> IfdEntry {
    IfdEntry { tag, field_type: TYPE_SHORT, count: 1, inline: Some(value as u32), external: vec![] }
}

fn long_entry(tag: u16, value: u32) -> IfdEntry {
    IfdEntry { tag, field_type: TYPE_LONG, count: 1, inline: Some(value), external: vec![] }
}

fn long_array_entry(tag: u16, values: &[u32]) -> IfdEntry {
    if values.len() == 1 {
        long_entry(tag, values[0])
    } else {
        let mut external = Vec::with_capacity(values.len() * 4);
        for v in values {
            external.extend_from_slice(&v.to_le_bytes());
        }
        IfdEntry { tag, field_type: TYPE_LONG, count: values.len() as u32, inline: None, external }
    }
}

fn ascii_entry(tag: u16, text: &str) -> IfdEntry {
    let mut external = text.as_bytes().to_vec();
    external.push(0);
    if external.len() <= 4 {
        let mut word = [0u8; 4];
        word[..external.len()].copy_from_slice(&external);
        IfdEntry {
            tag,
            field_type: TYPE_ASCII,
            count: external.len() as u32,
            inline: Some(u32::from_le_bytes(word)),
            external: vec![],
        }
    } else {
        IfdEntry {
            tag,
            field_type: TYPE_ASCII,
            count: external.len() as u32,
            inline: None,
            external,
        }
    }
}

fn shorts_entry(tag: u16, values: &[u16]) -> IfdEntry {
    if values.len() <= 2 {
        let mut word = [0u8; 4];
        for (k, v) in values.iter().enumerate() {
            word[k * 2..k * 2 + 2].copy_from_slice(&v.to_le_bytes());
        }
        return IfdEntry {
            tag,
            field_type: TYPE_SHORT,
            count: values.len() as u32,
            inline: Some(u32::from_le_bytes(word)),
            external: vec![],
        };
    }
    let mut external = Vec::with_capacity(values.len() * 2);
    for v in values {
        external.extend_from_slice(&v.to_le_bytes());
    }
    IfdEntry { tag, field_type: TYPE_SHORT, count: values.len() as u32, inline: None, external }
}

/// Write a tiled pyramid TIFF. `levels` pairs each relative factor with
/// the full raster of that level, base level first.
pub fn write_slide_tiff(
    path: &Path,
    base_magnification: u32,
    levels: &[(Ratio<u32>, &RgbRaster)],
) -> Result<()> {
    assert!(!levels.is_empty());
    let mut out: Vec<u8> = Vec::new();
    out.extend_from_slice(&[0x49, 0x49, 42, 0]);
    out.extend_from_slice(&[0, 0, 0, 0]); // patched with the first IFD offset

    let mut pending_ifd_link: usize = 4;
    for (k, (factor, raster)) in levels.iter().enumerate() {
        let (rows, cols) = grid_shape(raster.width() as u32, raster.height() as u32);
        let mut offsets = Vec::with_capacity((rows * cols) as usize);
        for i in 0..rows {
            for j in 0..cols {
                let patch =
                    raster.extract_patch(j as usize * PATCH_SIZE, i as usize * PATCH_SIZE);
                offsets.push(out.len() as u32);
                out.extend_from_slice(patch.data());
            }
        }
        let counts = vec![TILE_BYTES as u32; offsets.len()];
        let description = if k == 0 {
            format!("base-magnification={base_magnification};factor={}", format_ratio(*factor))
        } else {
            format!("factor={}", format_ratio(*factor))
        };
        let entries = vec![
            long_entry(TAG_IMAGE_WIDTH, raster.width() as u32),
            long_entry(TAG_IMAGE_LENGTH, raster.height() as u32),
            shorts_entry(TAG_BITS_PER_SAMPLE, &[8, 8, 8]),
            short_entry(TAG_COMPRESSION, 1),
            short_entry(TAG_PHOTOMETRIC, 2),
            ascii_entry(TAG_IMAGE_DESCRIPTION, &description),
            short_entry(TAG_SAMPLES_PER_PIXEL, 3),
            long_entry(TAG_TILE_WIDTH, PATCH_SIZE as u32),
            long_entry(TAG_TILE_LENGTH, PATCH_SIZE as u32),
            long_array_entry(TAG_TILE_OFFSETS, &offsets),
            long_array_entry(TAG_TILE_BYTE_COUNTS, &counts),
        ];

        // external blobs precede the IFD so entry offsets are known when
        // the table is emitted
        let mut external_offsets = Vec::with_capacity(entries.len());
        for entry in &entries {
            if entry.external.is_empty() {
                external_offsets.push(0u32);
            } else {
                external_offsets.push(out.len() as u32);
                out.extend_from_slice(&entry.external);
            }
        }
        if out.len() % 2 == 1 {
            out.push(0); // IFDs must start on a word boundary
        }
        let ifd_offset = out.len() as u32;
        out[pending_ifd_link..pending_ifd_link + 4].copy_from_slice(&ifd_offset.to_le_bytes());
        out.extend_from_slice(&(entries.len() as u16).to_le_bytes());
        for (entry, ext_off) in entries.iter().zip(&external_offsets) {
            out.extend_from_slice(&entry.tag.to_le_bytes());
            out.extend_from_slice(&entry.field_type.to_le_bytes());
            out.extend_from_slice(&entry.count.to_le_bytes());
            let word = entry.inline.unwrap_or(*ext_off);
            out.extend_from_slice(&word.to_le_bytes());
        }
        pending_ifd_link = out.len();
        out.extend_from_slice(&[0, 0, 0, 0]); // next-IFD link, patched or left 0
    }
    fs::write(path, out)?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::pyramid::Magnification;
    use rand::prelude::*;
    use rand_chacha::ChaCha8Rng;
    use tempfile::TempDir;

    fn noise_raster(w: usize, h: usize, seed: u64) -> RgbRaster {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut r = RgbRaster::new(w, h);
        rng.fill_bytes(r.data_mut());
        r
    }

    #[test]
    fn tiff_round_trips_pixels_and_metadata() {
        let dir = TempDir::new().unwrap();
        let path = dir.path().join("slide.tiff");
        let base = noise_raster(1100, 700, 11);
        let low = base.box_resample(550, 350);
        write_slide_tiff(&path, 20, &[(Ratio::new(1, 1), &base), (Ratio::new(1, 2), &low)])
            .unwrap();

        let slide = SlidePyramid::open(&path).unwrap();
        assert_eq!(slide.base_magnification(), 20);
        assert_eq!(slide.levels().len(), 2);
        assert_eq!(slide.levels()[1].width, 550);

        let view = slide.at_magnification(Magnification::X20).unwrap();
        assert_eq!(view.grid(), (2, 3));
        for patch in view.iter() {
            let patch = patch.unwrap();
            let expected = base.extract_patch(
                patch.grid_j as usize * PATCH_SIZE,
                patch.grid_i as usize * PATCH_SIZE,
            );
            assert_eq!(patch.pixels.data(), expected.data());
        }
    }

    #[test]
    fn tiff_and_tiletree_agree_on_the_same_content() {
        let dir = TempDir::new().unwrap();
        let base = noise_raster(900, 640, 12);
        let tiff_path = dir.path().join("slide.tif");
        write_slide_tiff(&tiff_path, 10, &[(Ratio::new(1, 1), &base)]).unwrap();
        let tree_path = dir.path().join("slide_tree");
        crate::pyramid::write_slide_tree(&tree_path, 10, &[(Ratio::new(1, 1), &base)]).unwrap();

        let a = SlidePyramid::open(&tiff_path).unwrap();
        let b = SlidePyramid::open(&tree_path).unwrap();
        for i in 0..2 {
            for j in 0..2 {
                assert_eq!(
                    a.read_patch(0, i, j).unwrap().data(),
                    b.read_patch(0, i, j).unwrap().data()
                );
            }
        }
    }

    #[test]
    fn external_decoder_reads_our_tiles() {
        // cross-check the writer against an independent TIFF implementation
        let dir = TempDir::new().unwrap();
        let path = dir.path().join("slide.tiff");
        let base = noise_raster(700, 600, 13);
        write_slide_tiff(&path, 20, &[(Ratio::new(1, 1), &base)]).unwrap();

        let file = std::fs::File::open(&path).unwrap();
        let mut decoder = tiff::decoder::Decoder::new(std::io::BufReader::new(file)).unwrap();
        let (w, h) = decoder.dimensions().unwrap();
        assert_eq!((w, h), (700, 600));
        let img = decoder.read_image().unwrap();
        let tiff::decoder::DecodingResult::U8(data) = img else {
            panic!("expected u8 image");
        };
        assert_eq!(data.len(), 700 * 600 * 3);
        assert_eq!(&data, base.data());
    }

    #[test]
    fn truncated_file_is_rejected() {
        let dir = TempDir::new().unwrap();
        let path = dir.path().join("slide.tiff");
        let base = noise_raster(512, 512, 14);
        write_slide_tiff(&path, 20, &[(Ratio::new(1, 1), &base)]).unwrap();
        let bytes = fs::read(&path).unwrap();
        fs::write(&path, &bytes[..bytes.len() / 2]).unwrap();
        assert!(matches!(
            SlidePyramid::open(&path),
            Err(PyramidError::CorruptPyramid(_)) | Err(PyramidError::UnsupportedFormat(_))
        ));
    }

    #[test]
    fn unknown_extension_is_unsupported() {
        let dir = TempDir::new().unwrap();
        let path = dir.path().join("slide.jp2");
        fs::write(&path, b"junk").unwrap();
        assert!(matches!(
            SlidePyramid::open(&path),
            Err(PyramidError::UnsupportedFormat(_))
        ));
    }
}
