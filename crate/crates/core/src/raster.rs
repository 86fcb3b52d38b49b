//! Screenshot rasters and their decomposition into square patch grids.
//!
//! A [`PatchGrid`] stores every patch as a contiguous `patch_size × patch_size ×
//! channels` block. Patch `(r, c)` has linear index `r * cols + c`, which is also
//! its position id downstream.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::binio;
use crate::{Error, Result};

pub const RASTER_MAGIC: &[u8; 4] = b"RVRS";

/// Default patch edge in pixels. A 1988×1092 screenshot yields 71×39 = 2,769 patches.
pub const DEFAULT_PATCH_SIZE: u32 = 28;

/// A row-major 8-bit image with 1 (gray) or 3 (RGB) interleaved channels.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Raster {
    width: u32,
    height: u32,
    channels: u32,
    data: Vec<u8>,
}

impl Raster {
    pub fn new(width: u32, height: u32, channels: u32, data: Vec<u8>) -> Result<Self> {
        if width == 0 || height == 0 {
            return Err(Error::EmptyImage);
        }
        if channels != 1 && channels != 3 {
            return Err(Error::Channels(channels));
        }
        let expected = width as usize * height as usize * channels as usize;
        if data.len() != expected {
            return Err(Error::RasterSize {
                width,
                height,
                channels,
                actual: data.len(),
            });
        }
        Ok(Self {
            width,
            height,
            channels,
            data,
        })
    }

    /// A raster filled with one value in every sample.
    pub fn filled(width: u32, height: u32, channels: u32, value: u8) -> Result<Self> {
        let len = width as usize * height as usize * channels as usize;
        Self::new(width, height, channels, vec![value; len])
    }

    pub fn width(&self) -> u32 {
        self.width
    }

    pub fn height(&self) -> u32 {
        self.height
    }

    pub fn channels(&self) -> u32 {
        self.channels
    }

    pub fn data(&self) -> &[u8] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [u8] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<u8> {
        self.data
    }

    #[inline]
    pub fn sample(&self, x: u32, y: u32, ch: u32) -> u8 {
        self.data[self.offset(x, y, ch)]
    }

    #[inline]
    pub fn set_sample(&mut self, x: u32, y: u32, ch: u32, value: u8) {
        let i = self.offset(x, y, ch);
        self.data[i] = value;
    }

    #[inline]
    fn offset(&self, x: u32, y: u32, ch: u32) -> usize {
        ((y as usize * self.width as usize) + x as usize) * self.channels as usize + ch as usize
    }

    /// Reads the raw `RVRS` format.
    ///
    /// Header (16 bytes): magic, u32 width, u32 height, u16 channels, u16 reserved,
    /// all little-endian; followed by row-major samples.
    pub fn read_from<R: Read>(r: &mut R) -> Result<Self> {
        binio::read_magic(r, RASTER_MAGIC)?;
        let width = binio::read_u32(r, "width")?;
        let height = binio::read_u32(r, "height")?;
        let channels = binio::read_u16(r, "channels")? as u32;
        let _reserved = binio::read_u16(r, "reserved")?;
        if width == 0 || height == 0 {
            return Err(Error::EmptyImage);
        }
        if channels != 1 && channels != 3 {
            return Err(Error::Channels(channels));
        }
        let len = width as usize * height as usize * channels as usize;
        let mut data = vec![0u8; len];
        binio::read_exact(r, &mut data, "raster samples")?;
        binio::expect_eof(r)?;
        Self::new(width, height, channels, data)
    }

    pub fn write_to<W: Write>(&self, w: &mut W) -> Result<()> {
        w.write_all(RASTER_MAGIC)?;
        w.write_all(&self.width.to_le_bytes())?;
        w.write_all(&self.height.to_le_bytes())?;
        w.write_all(&(self.channels as u16).to_le_bytes())?;
        w.write_all(&0u16.to_le_bytes())?;
        w.write_all(&self.data)?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let mut r = BufReader::new(File::open(path)?);
        Self::read_from(&mut r)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let mut w = BufWriter::new(File::create(path)?);
        self.write_to(&mut w)?;
        w.flush()?;
        Ok(())
    }
}

/// What to do with images whose sides are not a multiple of the patch size.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum PadPolicy {
    Reject,
    #[default]
    ZeroPad,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct GridSpec {
    pub patch_size: u32,
    pub pad_policy: PadPolicy,
}

impl Default for GridSpec {
    fn default() -> Self {
        Self {
            patch_size: DEFAULT_PATCH_SIZE,
            pad_policy: PadPolicy::ZeroPad,
        }
    }
}

impl GridSpec {
    pub fn new(patch_size: u32, pad_policy: PadPolicy) -> Self {
        Self {
            patch_size,
            pad_policy,
        }
    }
}

/// Axis-aligned pixel rectangle, half-open: `[x0, x1) × [y0, y1)`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct PixelRect {
    pub x0: u32,
    pub y0: u32,
    pub x1: u32,
    pub y1: u32,
}

impl PixelRect {
    pub fn new(x0: u32, y0: u32, x1: u32, y1: u32) -> Self {
        Self { x0, y0, x1, y1 }
    }

    pub fn width(&self) -> u32 {
        self.x1.saturating_sub(self.x0)
    }

    pub fn height(&self) -> u32 {
        self.y1.saturating_sub(self.y0)
    }

    pub fn area(&self) -> u64 {
        self.width() as u64 * self.height() as u64
    }

    pub fn contains_rect(&self, other: &PixelRect) -> bool {
        other.x0 >= self.x0 && other.y0 >= self.y0 && other.x1 <= self.x1 && other.y1 <= self.y1
    }

    pub fn intersection(&self, other: &PixelRect) -> Option<PixelRect> {
        let x0 = self.x0.max(other.x0);
        let y0 = self.y0.max(other.y0);
        let x1 = self.x1.min(other.x1);
        let y1 = self.y1.min(other.y1);
        (x0 < x1 && y0 < y1).then_some(PixelRect { x0, y0, x1, y1 })
    }
}

/// An image decomposed into `rows × cols` square patches.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PatchGrid {
    rows: usize,
    cols: usize,
    patch_size: u32,
    channels: u32,
    source_dims: (u32, u32),
    data: Vec<u8>,
}

impl PatchGrid {
    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn patch_size(&self) -> u32 {
        self.patch_size
    }

    pub fn channels(&self) -> u32 {
        self.channels
    }

    /// `(width, height)` of the raster this grid was cut from.
    pub fn source_dims(&self) -> (u32, u32) {
        self.source_dims
    }

    pub fn len(&self) -> usize {
        self.rows * self.cols
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Samples per patch block.
    pub fn patch_len(&self) -> usize {
        (self.patch_size * self.patch_size * self.channels) as usize
    }

    pub fn index_of(&self, row: usize, col: usize) -> usize {
        row * self.cols + col
    }

    pub fn position_of(&self, index: usize) -> (usize, usize) {
        (index / self.cols, index % self.cols)
    }

    /// The `patch_size × patch_size × channels` block at `index`, row-major.
    pub fn patch_at(&self, index: usize) -> Result<&[u8]> {
        if index >= self.len() {
            return Err(Error::IndexOutOfRange {
                index,
                len: self.len(),
            });
        }
        Ok(self.patch(index))
    }

    #[inline]
    pub(crate) fn patch(&self, index: usize) -> &[u8] {
        let n = self.patch_len();
        &self.data[index * n..(index + 1) * n]
    }

    pub fn patches(&self) -> impl ExactSizeIterator<Item = &[u8]> {
        self.data.chunks_exact(self.patch_len())
    }

    /// Pixel footprint of a patch, clipped to the source image extent.
    pub fn patch_rect(&self, index: usize) -> PixelRect {
        let (r, c) = self.position_of(index);
        let ps = self.patch_size;
        let (w, h) = self.source_dims;
        let x0 = c as u32 * ps;
        let y0 = r as u32 * ps;
        PixelRect::new(x0, y0, (x0 + ps).min(w), (y0 + ps).min(h))
    }
}

/// Splits an image into a patch grid. Partial border patches are zero-filled
/// outside the image extent under [`PadPolicy::ZeroPad`].
pub fn decompose(image: &Raster, spec: &GridSpec) -> Result<PatchGrid> {
    let ps = spec.patch_size;
    if ps == 0 {
        return Err(Error::PatchSize(ps));
    }
    let (w, h, ch) = (image.width(), image.height(), image.channels());
    if w == 0 || h == 0 {
        return Err(Error::EmptyImage);
    }
    if spec.pad_policy == PadPolicy::Reject && (w % ps != 0 || h % ps != 0) {
        return Err(Error::DimensionMismatch {
            width: w,
            height: h,
            patch_size: ps,
        });
    }
    let rows = h.div_ceil(ps) as usize;
    let cols = w.div_ceil(ps) as usize;
    let ps_us = ps as usize;
    let ch_us = ch as usize;
    let row_len = ps_us * ch_us;
    let patch_len = ps_us * row_len;
    let mut data = vec![0u8; rows * cols * patch_len];
    let src = image.data();
    let src_stride = w as usize * ch_us;

    for r in 0..rows {
        for c in 0..cols {
            let base = (r * cols + c) * patch_len;
            let x0 = c * ps_us;
            let copy_w = (w as usize - x0).min(ps_us) * ch_us;
            for dy in 0..ps_us {
                let y = r * ps_us + dy;
                if y >= h as usize {
                    break;
                }
                let s = y * src_stride + x0 * ch_us;
                let d = base + dy * row_len;
                data[d..d + copy_w].copy_from_slice(&src[s..s + copy_w]);
            }
        }
    }

    Ok(PatchGrid {
        rows,
        cols,
        patch_size: ps,
        channels: ch,
        source_dims: (w, h),
        data,
    })
}

/// Consecutive images can only be compared patch-for-patch on identical grids.
pub fn grids_compatible(a: &PatchGrid, b: &PatchGrid) -> bool {
    a.rows == b.rows && a.cols == b.cols && a.patch_size == b.patch_size
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn gradient(w: u32, h: u32, ch: u32) -> Raster {
        let data = (0..w * h * ch).map(|i| (i % 251) as u8).collect();
        Raster::new(w, h, ch, data).unwrap()
    }

    #[test]
    fn exact_division() {
        let img = gradient(56, 56, 1);
        let g = decompose(&img, &GridSpec::new(14, PadPolicy::Reject)).unwrap();
        assert_eq!((g.rows(), g.cols(), g.len()), (4, 4, 16));
    }

    #[test]
    fn single_pixel() {
        let img = Raster::filled(1, 1, 1, 9).unwrap();
        let g = decompose(&img, &GridSpec::new(1, PadPolicy::Reject)).unwrap();
        assert_eq!(g.len(), 1);
        assert_eq!(g.patch_at(0).unwrap(), &[9]);
    }

    #[test]
    fn zero_pad_border() {
        let img = Raster::filled(30, 30, 1, 200).unwrap();
        let g = decompose(&img, &GridSpec::new(14, PadPolicy::ZeroPad)).unwrap();
        assert_eq!((g.rows(), g.cols()), (3, 3));
        // Bottom-right patch covers pixels 28..30 in both axes; the rest is padding.
        let p = g.patch_at(8).unwrap();
        for y in 0..14 {
            for x in 0..14 {
                let expected = if x < 2 && y < 2 { 200 } else { 0 };
                assert_eq!(p[y * 14 + x], expected, "({x},{y})");
            }
        }
        // Right-column middle patch: 2 columns in extent, 14 rows.
        let p = g.patch_at(5).unwrap();
        assert_eq!(p.iter().filter(|&&v| v == 200).count(), 2 * 14);
        assert_eq!(g.patch_rect(8), PixelRect::new(28, 28, 30, 30));
    }

    #[test]
    fn reject_indivisible() {
        let img = Raster::filled(30, 28, 3, 1).unwrap();
        let err = decompose(&img, &GridSpec::new(14, PadPolicy::Reject)).unwrap_err();
        assert!(matches!(err, Error::DimensionMismatch { .. }));
    }

    #[test]
    fn empty_and_bad_inputs() {
        assert!(matches!(Raster::new(0, 4, 1, vec![]), Err(Error::EmptyImage)));
        assert!(matches!(Raster::new(2, 2, 2, vec![0; 8]), Err(Error::Channels(2))));
        assert!(matches!(Raster::new(2, 2, 1, vec![0; 3]), Err(Error::RasterSize { .. })));
        let img = Raster::filled(4, 4, 1, 0).unwrap();
        assert!(matches!(decompose(&img, &GridSpec::new(0, PadPolicy::ZeroPad)), Err(Error::PatchSize(0))));
    }

    #[test]
    fn patch_indexing() {
        let img = gradient(56, 56, 1);
        let g = decompose(&img, &GridSpec::new(14, PadPolicy::Reject)).unwrap();
        assert_eq!(g.patch_at(0).unwrap()[0], img.sample(0, 0, 0));
        // Index 5 is row 1, col 1.
        assert_eq!(g.position_of(5), (1, 1));
        assert_eq!(g.patch_at(5).unwrap()[0], img.sample(14, 14, 0));
        assert!(matches!(g.patch_at(16), Err(Error::IndexOutOfRange { index: 16, len: 16 })));
    }

    #[test]
    fn compatibility() {
        let a = decompose(&gradient(56, 56, 1), &GridSpec::new(14, PadPolicy::Reject)).unwrap();
        let b = decompose(&gradient(56, 56, 3), &GridSpec::new(14, PadPolicy::Reject)).unwrap();
        assert!(grids_compatible(&a, &b));
        let c = decompose(&gradient(70, 56, 1), &GridSpec::new(14, PadPolicy::Reject)).unwrap();
        assert!(!grids_compatible(&a, &c));
        let d = decompose(&gradient(56, 56, 1), &GridSpec::new(7, PadPolicy::Reject)).unwrap();
        assert!(!grids_compatible(&a, &d));
    }

    #[test]
    fn file_roundtrip_and_corruption() {
        let img = gradient(5, 3, 3);
        let mut buf = Vec::new();
        img.write_to(&mut buf).unwrap();
        assert_eq!(buf.len(), 16 + 45);
        assert_eq!(&buf[..4], b"RVRS");
        assert_eq!(Raster::read_from(&mut buf.as_slice()).unwrap(), img);

        let truncated = &buf[..buf.len() - 1];
        assert!(matches!(Raster::read_from(&mut &truncated[..]), Err(Error::CorruptFile(_))));
        let mut bad = buf.clone();
        bad[0] = b'X';
        assert!(matches!(Raster::read_from(&mut bad.as_slice()), Err(Error::CorruptFile(_))));
    }

    proptest! {
        #[test]
        fn decompose_roundtrips_pixels(
            w in 1u32..40, h in 1u32..40, ps in 1u32..12, rgb in any::<bool>(), seed in any::<u64>()
        ) {
            let ch = if rgb { 3 } else { 1 };
            let data: Vec<u8> = (0..(w * h * ch) as u64)
                .map(|i| (i.wrapping_mul(0x9E37_79B9).wrapping_add(seed) >> 3) as u8)
                .collect();
            let img = Raster::new(w, h, ch, data).unwrap();
            let g = decompose(&img, &GridSpec::new(ps, PadPolicy::ZeroPad)).unwrap();
            prop_assert_eq!(g.rows(), h.div_ceil(ps) as usize);
            prop_assert_eq!(g.cols(), w.div_ceil(ps) as usize);
            for y in 0..h {
                for x in 0..w {
                    let idx = g.index_of((y / ps) as usize, (x / ps) as usize);
                    let block = g.patch_at(idx).unwrap();
                    for c in 0..ch {
                        let off = (((y % ps) * ps + x % ps) * ch + c) as usize;
                        prop_assert_eq!(block[off], img.sample(x, y, c));
                    }
                }
            }
            // Bijection between (r, c) and linear indices.
            for i in 0..g.len() {
                let (r, c) = g.position_of(i);
                prop_assert_eq!(g.index_of(r, c), i);
            }
            prop_assert_eq!(decompose(&img, &GridSpec::new(ps, PadPolicy::ZeroPad)).unwrap(), g);
        }
    }
}
