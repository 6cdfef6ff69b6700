//! Image slices, paired datasets, patch extraction and the F32R raster format.
//!
//! F32R layout (little-endian):
//!
//! ```text
//! offset 0   magic "CTR1"
//! offset 4   u32 width
//! offset 8   u32 height
//! offset 12  u32 unit code (0 = HU, 1 = normalized)
//! offset 16  width * height f32, row-major
//! ```
//!
//! The slice id is not stored in the file; it is carried by the file stem.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const F32R_MAGIC: &[u8; 4] = b"CTR1";
pub const F32R_HEADER_LEN: usize = 16;
pub const F32R_EXTENSION: &str = "f32r";

/// Full 12-bit CT range.
pub const DEFAULT_HU_WINDOW: (f32, f32) = (-1024.0, 3071.0);

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Unit {
    Hu,
    Normalized,
}

impl Unit {
    pub fn code(self) -> u32 {
        match self {
            Unit::Hu => 0,
            Unit::Normalized => 1,
        }
    }

    pub fn from_code(code: u32) -> Option<Unit> {
        match code {
            0 => Some(Unit::Hu),
            1 => Some(Unit::Normalized),
            _ => None,
        }
    }
}

/// A 2-D scalar field stored row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct ImageSlice {
    width: usize,
    height: usize,
    pixels: Vec<f32>,
    unit: Unit,
    id: String,
}

impl ImageSlice {
    /// Validates dimensions, finiteness and (for normalized slices) the `[0, 1]` range.
    pub fn new(width: usize, height: usize, pixels: Vec<f32>, unit: Unit, id: impl Into<String>) -> Result<Self> {
        let id = id.into();
        if width == 0 || height == 0 {
            return Err(Error::Shape(format!(
                "slice {id}: dimensions must be positive, got {width}x{height}"
            )));
        }
        let expected = width
            .checked_mul(height)
            .ok_or_else(|| Error::Shape(format!("slice {id}: {width}x{height} overflows")))?;
        if pixels.len() != expected {
            return Err(Error::Shape(format!(
                "slice {id}: {} pixels for {width}x{height}",
                pixels.len()
            )));
        }
        check_finite(&pixels, &format!("slice {id}"))?;
        if unit == Unit::Normalized {
            if let Some(index) = pixels.iter().position(|v| !(0.0..=1.0).contains(v)) {
                return Err(Error::Domain(format!(
                    "slice {id}: normalized pixel {index} = {} outside [0, 1]",
                    pixels[index]
                )));
            }
        }
        Ok(ImageSlice {
            width,
            height,
            pixels,
            unit,
            id,
        })
    }

    pub fn zeros(width: usize, height: usize, unit: Unit, id: impl Into<String>) -> Result<Self> {
        Self::new(width, height, vec![0.0; width * height], unit, id)
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn pixels(&self) -> &[f32] {
        &self.pixels
    }

    pub fn into_pixels(self) -> Vec<f32> {
        self.pixels
    }

    pub fn unit(&self) -> Unit {
        self.unit
    }

    pub fn id(&self) -> &str {
        &self.id
    }

    pub fn with_id(mut self, id: impl Into<String>) -> Self {
        self.id = id.into();
        self
    }

    pub fn get(&self, row: usize, col: usize) -> f32 {
        self.pixels[row * self.width + col]
    }

    pub fn same_geometry(&self, other: &ImageSlice) -> bool {
        self.width == other.width && self.height == other.height
    }

    /// Copies the `size_h x size_w` window whose top-left corner is `(row, col)`.
    pub fn crop(&self, row: usize, col: usize, size_h: usize, size_w: usize) -> Result<ImageSlice> {
        if row + size_h > self.height || col + size_w > self.width {
            return Err(Error::Shape(format!(
                "crop {size_h}x{size_w} at ({row}, {col}) exceeds {}x{} slice {}",
                self.height, self.width, self.id
            )));
        }
        let mut pixels = Vec::with_capacity(size_h * size_w);
        for r in row..row + size_h {
            let start = r * self.width + col;
            pixels.extend_from_slice(&self.pixels[start..start + size_w]);
        }
        Ok(ImageSlice {
            width: size_w,
            height: size_h,
            pixels,
            unit: self.unit,
            id: format!("{}@{row}_{col}", self.id),
        })
    }
}

pub(crate) fn check_finite(values: &[f32], context: &str) -> Result<()> {
    match values.iter().position(|v| !v.is_finite()) {
        Some(index) => Err(Error::NonFinite {
            context: context.to_string(),
            index,
        }),
        None => Ok(()),
    }
}

/// Maps HU to `[0, 1]` with clamping.
pub fn normalize_hu(slice: &ImageSlice, window: (f32, f32)) -> Result<ImageSlice> {
    let (lo, hi) = window;
    if !(lo < hi) {
        return Err(Error::Config(format!("HU window ({lo}, {hi}) must satisfy lo < hi")));
    }
    if slice.unit != Unit::Hu {
        return Err(Error::Domain(format!("slice {} is not in HU", slice.id)));
    }
    check_finite(&slice.pixels, &format!("slice {}", slice.id))?;
    let span = f64::from(hi) - f64::from(lo);
    let pixels = slice
        .pixels
        .iter()
        .map(|&v| (((f64::from(v) - f64::from(lo)) / span).clamp(0.0, 1.0)) as f32)
        .collect();
    ImageSlice::new(slice.width, slice.height, pixels, Unit::Normalized, slice.id.clone())
}

/// Inverse of [`normalize_hu`] for display; clamped values are not recovered.
pub fn denormalize_hu(slice: &ImageSlice, window: (f32, f32)) -> Result<ImageSlice> {
    let (lo, hi) = window;
    if !(lo < hi) {
        return Err(Error::Config(format!("HU window ({lo}, {hi}) must satisfy lo < hi")));
    }
    if slice.unit != Unit::Normalized {
        return Err(Error::Domain(format!("slice {} is not normalized", slice.id)));
    }
    let span = f64::from(hi) - f64::from(lo);
    let pixels = slice
        .pixels
        .iter()
        .map(|&v| (f64::from(lo) + f64::from(v) * span) as f32)
        .collect();
    ImageSlice::new(slice.width, slice.height, pixels, Unit::Hu, slice.id.clone())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SplitTag {
    Train,
    Test,
}

/// Ordered LDCT/NDCT pairs. Members of a pair share geometry and unit.
#[derive(Debug, Clone, PartialEq)]
pub struct PairedDataset {
    pairs: Vec<(ImageSlice, ImageSlice)>,
    split: SplitTag,
}

impl PairedDataset {
    pub fn new(pairs: Vec<(ImageSlice, ImageSlice)>, split: SplitTag) -> Result<Self> {
        let mut seen = std::collections::HashSet::new();
        for (ldct, ndct) in &pairs {
            if !ldct.same_geometry(ndct) {
                return Err(Error::Geometry {
                    id: ldct.id.clone(),
                    detail: format!(
                        "ldct {}x{} vs ndct {}x{}",
                        ldct.width, ldct.height, ndct.width, ndct.height
                    ),
                });
            }
            if ldct.unit != ndct.unit {
                return Err(Error::Geometry {
                    id: ldct.id.clone(),
                    detail: format!("ldct unit {:?} vs ndct unit {:?}", ldct.unit, ndct.unit),
                });
            }
            if !seen.insert(ldct.id.clone()) {
                return Err(Error::Config(format!("duplicate slice id {}", ldct.id)));
            }
        }
        Ok(PairedDataset { pairs, split })
    }

    pub fn pairs(&self) -> &[(ImageSlice, ImageSlice)] {
        &self.pairs
    }

    pub fn split(&self) -> SplitTag {
        self.split
    }

    pub fn len(&self) -> usize {
        self.pairs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.pairs.is_empty()
    }

    /// Applies [`normalize_hu`] to HU pairs; normalized pairs pass through.
    pub fn normalized(&self, window: (f32, f32)) -> Result<PairedDataset> {
        let pairs = self
            .pairs
            .iter()
            .map(|(l, n)| match l.unit {
                Unit::Normalized => Ok((l.clone(), n.clone())),
                Unit::Hu => Ok((normalize_hu(l, window)?, normalize_hu(n, window)?)),
            })
            .collect::<Result<Vec<_>>>()?;
        PairedDataset::new(pairs, self.split)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PatchPair {
    pub ldct: ImageSlice,
    pub ndct: ImageSlice,
    pub origin: (usize, usize),
    pub source_id: String,
}

/// Number of patches one `height x width` slice yields.
pub fn patch_count(height: usize, width: usize, size: usize, stride: usize) -> usize {
    if size == 0 || stride == 0 || size > height || size > width {
        return 0;
    }
    ((height - size) / stride + 1) * ((width - size) / stride + 1)
}

/// Square patches at origins `(r * stride, c * stride)`, slice order then row-major.
pub fn extract_patches(data: &PairedDataset, size: usize, stride: usize) -> Result<Vec<PatchPair>> {
    if size == 0 || stride == 0 {
        return Err(Error::Config(format!(
            "patch size ({size}) and stride ({stride}) must be at least 1"
        )));
    }
    let mut out = Vec::new();
    for (ldct, ndct) in &data.pairs {
        if size > ldct.width.min(ldct.height) {
            return Err(Error::Config(format!(
                "patch size {size} exceeds {}x{} slice {}",
                ldct.width, ldct.height, ldct.id
            )));
        }
        for row in (0..=ldct.height - size).step_by(stride) {
            for col in (0..=ldct.width - size).step_by(stride) {
                out.push(PatchPair {
                    ldct: ldct.crop(row, col, size, size)?,
                    ndct: ndct.crop(row, col, size, size)?,
                    origin: (row, col),
                    source_id: ldct.id.clone(),
                });
            }
        }
    }
    Ok(out)
}

/// Encodes a slice as F32R bytes.
pub fn encode_f32r(slice: &ImageSlice) -> Result<Vec<u8>> {
    check_finite(&slice.pixels, &format!("slice {}", slice.id))?;
    let width = u32::try_from(slice.width).map_err(|_| Error::Shape(format!("width {} exceeds u32", slice.width)))?;
    let height =
        u32::try_from(slice.height).map_err(|_| Error::Shape(format!("height {} exceeds u32", slice.height)))?;
    let mut bytes = Vec::with_capacity(F32R_HEADER_LEN + slice.pixels.len() * 4);
    bytes.extend_from_slice(F32R_MAGIC);
    bytes.extend_from_slice(&width.to_le_bytes());
    bytes.extend_from_slice(&height.to_le_bytes());
    bytes.extend_from_slice(&slice.unit.code().to_le_bytes());
    for v in &slice.pixels {
        bytes.extend_from_slice(&v.to_le_bytes());
    }
    Ok(bytes)
}

/// Decodes F32R bytes; `id` becomes the slice id.
pub fn decode_f32r(bytes: &[u8], id: &str) -> Result<ImageSlice> {
    let format = |offset: usize, message: String| Error::Format {
        offset: offset as u64,
        message,
    };
    if bytes.len() < 4 {
        return Err(format(bytes.len(), "truncated magic".into()));
    }
    if &bytes[..4] != F32R_MAGIC {
        return Err(format(
            0,
            format!(
                "bad magic {:?}, expected \"CTR1\"",
                String::from_utf8_lossy(&bytes[..4])
            ),
        ));
    }
    if bytes.len() < F32R_HEADER_LEN {
        return Err(format(bytes.len(), "truncated header".into()));
    }
    let word = |at: usize| u32::from_le_bytes(bytes[at..at + 4].try_into().unwrap());
    let width = word(4) as usize;
    let height = word(8) as usize;
    let unit = Unit::from_code(word(12)).ok_or_else(|| format(12, format!("unknown unit code {}", word(12))))?;
    let payload = width
        .checked_mul(height)
        .and_then(|n| n.checked_mul(4))
        .ok_or_else(|| format(4, format!("dimensions {width}x{height} overflow")))?;
    if bytes.len() - F32R_HEADER_LEN < payload {
        return Err(format(
            bytes.len(),
            format!("truncated payload: need {payload} bytes after header"),
        ));
    }
    if bytes.len() - F32R_HEADER_LEN > payload {
        return Err(format(F32R_HEADER_LEN + payload, "trailing bytes after payload".into()));
    }
    let pixels: Vec<f32> = bytes[F32R_HEADER_LEN..]
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
        .collect();
    if let Some(index) = pixels.iter().position(|v| !v.is_finite()) {
        return Err(format(
            F32R_HEADER_LEN + 4 * index,
            format!("non-finite pixel at index {index}"),
        ));
    }
    ImageSlice::new(width, height, pixels, unit, id)
}

pub fn save_slice(slice: &ImageSlice, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let bytes = encode_f32r(slice)?;
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

/// Writes `<dir>/<id>.f32r`.
pub fn save_slice_in_dir(slice: &ImageSlice, dir: impl AsRef<Path>) -> Result<PathBuf> {
    let path = dir.as_ref().join(format!("{}.{F32R_EXTENSION}", slice.id));
    save_slice(slice, &path)?;
    Ok(path)
}

/// Reads an F32R file; the id is the file stem.
pub fn load_slice(path: impl AsRef<Path>) -> Result<ImageSlice> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    let id = path
        .file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_default();
    decode_f32r(&bytes, &id)
}

/// F32R files of a directory keyed by stem, sorted.
pub fn list_slices(dir: impl AsRef<Path>) -> Result<BTreeMap<String, PathBuf>> {
    let dir = dir.as_ref();
    let mut out = BTreeMap::new();
    for entry in fs::read_dir(dir).map_err(|e| Error::io(dir, e))? {
        let entry = entry.map_err(|e| Error::io(dir, e))?;
        let path = entry.path();
        if path.extension().and_then(|e| e.to_str()) == Some(F32R_EXTENSION) {
            if let Some(stem) = path.file_stem() {
                out.insert(stem.to_string_lossy().into_owned(), path);
            }
        }
    }
    Ok(out)
}

/// Pairs F32R files of two directories by filename.
pub fn load_paired_dir(
    ldct_dir: impl AsRef<Path>,
    ndct_dir: impl AsRef<Path>,
    split: SplitTag,
) -> Result<PairedDataset> {
    let ldct = list_slices(ldct_dir)?;
    let ndct = list_slices(ndct_dir)?;
    let orphans: Vec<String> = ldct
        .keys()
        .filter(|k| !ndct.contains_key(*k))
        .chain(ndct.keys().filter(|k| !ldct.contains_key(*k)))
        .cloned()
        .collect();
    if !orphans.is_empty() {
        return Err(Error::Unmatched(orphans));
    }
    let mut pairs = Vec::with_capacity(ldct.len());
    for (id, lpath) in &ldct {
        let l = load_slice(lpath)?;
        let n = load_slice(&ndct[id])?;
        if !l.same_geometry(&n) {
            return Err(Error::Geometry {
                id: id.clone(),
                detail: format!("ldct {}x{} vs ndct {}x{}", l.width, l.height, n.width, n.height),
            });
        }
        pairs.push((l, n));
    }
    PairedDataset::new(pairs, split)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn hu(pixels: Vec<f32>) -> ImageSlice {
        let n = pixels.len();
        ImageSlice::new(n, 1, pixels, Unit::Hu, "s").unwrap()
    }

    #[test]
    fn normalize_window_endpoints() {
        let out = normalize_hu(&hu(vec![-1024.0, 3071.0, 0.0, -5000.0]), DEFAULT_HU_WINDOW).unwrap();
        assert_eq!(out.pixels()[0], 0.0);
        assert_eq!(out.pixels()[1], 1.0);
        assert!((out.pixels()[2] - 1024.0 / 4095.0).abs() < 1e-7);
        assert!((out.pixels()[2] - 0.25006).abs() < 1e-5);
        assert_eq!(out.pixels()[3], 0.0);
    }

    #[test]
    fn normalize_rejects_bad_window_and_nan() {
        assert!(matches!(
            normalize_hu(&hu(vec![0.0]), (10.0, 10.0)),
            Err(Error::Config(_))
        ));
        let bad = ImageSlice {
            width: 3,
            height: 1,
            pixels: vec![0.0, f32::NAN, 1.0],
            unit: Unit::Hu,
            id: "x".into(),
        };
        match normalize_hu(&bad, DEFAULT_HU_WINDOW) {
            Err(Error::NonFinite { index, .. }) => assert_eq!(index, 1),
            other => panic!("expected non-finite error, got {other:?}"),
        }
    }

    #[test]
    fn slice_invariants() {
        assert!(ImageSlice::new(0, 1, vec![], Unit::Hu, "a").is_err());
        assert!(ImageSlice::new(2, 2, vec![0.0; 3], Unit::Hu, "a").is_err());
        assert!(ImageSlice::new(1, 1, vec![1.5], Unit::Normalized, "a").is_err());
        assert!(ImageSlice::new(1, 1, vec![f32::INFINITY], Unit::Hu, "a").is_err());
    }

    fn square_pair(size: usize, id: &str) -> (ImageSlice, ImageSlice) {
        let l: Vec<f32> = (0..size * size).map(|i| i as f32).collect();
        let n: Vec<f32> = (0..size * size).map(|i| -(i as f32)).collect();
        (
            ImageSlice::new(size, size, l, Unit::Hu, id).unwrap(),
            ImageSlice::new(size, size, n, Unit::Hu, id).unwrap(),
        )
    }

    #[test]
    fn patch_counts_for_full_slices() {
        let data = PairedDataset::new(vec![square_pair(512, "a")], SplitTag::Train).unwrap();
        assert_eq!(extract_patches(&data, 64, 64).unwrap().len(), 64);
        assert_eq!(extract_patches(&data, 64, 32).unwrap().len(), 225);
        assert_eq!(patch_count(512, 512, 64, 32), 225);
    }

    #[test]
    fn whole_slice_patch() {
        let pair = square_pair(64, "a");
        let data = PairedDataset::new(vec![pair.clone()], SplitTag::Train).unwrap();
        let patches = extract_patches(&data, 64, 1).unwrap();
        assert_eq!(patches.len(), 1);
        assert_eq!(patches[0].ldct.pixels(), pair.0.pixels());
        assert_eq!(patches[0].ndct.pixels(), pair.1.pixels());
        assert_eq!(patches[0].origin, (0, 0));
    }

    #[test]
    fn oversized_patch_is_config_error() {
        let data = PairedDataset::new(vec![square_pair(16, "a")], SplitTag::Train).unwrap();
        assert!(matches!(extract_patches(&data, 17, 1), Err(Error::Config(_))));
        assert!(matches!(extract_patches(&data, 4, 0), Err(Error::Config(_))));
    }

    #[test]
    fn f32r_round_trip_and_size() {
        let s = ImageSlice::new(2, 2, vec![1.0, 2.0, 3.0, 4.0], Unit::Hu, "rt").unwrap();
        let bytes = encode_f32r(&s).unwrap();
        assert_eq!(bytes.len(), 16 + 16);
        assert_eq!(decode_f32r(&bytes, "rt").unwrap(), s);

        let big = ImageSlice::zeros(512, 512, Unit::Normalized, "big").unwrap();
        assert_eq!(encode_f32r(&big).unwrap().len(), 1_048_592);
    }

    #[test]
    fn f32r_format_errors() {
        let s = ImageSlice::new(2, 2, vec![1.0, 2.0, 3.0, 4.0], Unit::Hu, "rt").unwrap();
        let mut bytes = encode_f32r(&s).unwrap();
        let mut bad = bytes.clone();
        bad[..4].copy_from_slice(b"XXXX");
        assert!(matches!(decode_f32r(&bad, "x"), Err(Error::Format { offset: 0, .. })));
        bytes.truncate(20);
        assert!(matches!(
            decode_f32r(&bytes, "x"),
            Err(Error::Format { offset: 20, .. })
        ));
        let mut huge = encode_f32r(&s).unwrap();
        huge[4..8].copy_from_slice(&u32::MAX.to_le_bytes());
        huge[8..12].copy_from_slice(&u32::MAX.to_le_bytes());
        assert!(decode_f32r(&huge, "x").is_err());
    }
}
