//! MNIST IDX ingestion, binarization and the top/bottom half two-view split.

use std::fs;
use std::io::{Read, Write};
use std::path::{Path, PathBuf};

use flate2::read::GzDecoder;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const IMAGE_MAGIC: u32 = 0x0000_0803;
pub const LABEL_MAGIC: u32 = 0x0000_0801;
pub const SIDE: usize = 28;
pub const PIXELS: usize = SIDE * SIDE;
pub const HALF: usize = PIXELS / 2;
pub const DEFAULT_THRESHOLD: u8 = 128;
/// Training images kept from the 60,000-image archive.
pub const TRAIN_IMAGES: usize = 50_000;

const CACHE_MAGIC: &[u8; 8] = b"HVDCACHE";
const CACHE_VERSION: u32 = 1;

/// Raw greyscale images as parsed from IDX.
#[derive(Clone, Debug, PartialEq)]
pub struct RawImages {
    pub count: usize,
    pub rows: usize,
    pub cols: usize,
    pub pixels: Vec<u8>,
    pub labels: Vec<u8>,
}

fn read_maybe_gz(path: &Path) -> Result<Vec<u8>> {
    let raw = fs::read(path)?;
    if raw.starts_with(&[0x1f, 0x8b]) {
        let mut out = Vec::new();
        GzDecoder::new(&raw[..]).read_to_end(&mut out)?;
        Ok(out)
    } else {
        Ok(raw)
    }
}

fn be_u32(bytes: &[u8], offset: usize) -> Result<u32> {
    bytes
        .get(offset..offset + 4)
        .map(|b| u32::from_be_bytes([b[0], b[1], b[2], b[3]]))
        .ok_or_else(|| Error::parse(offset as u64, "truncated header"))
}

fn check_magic(bytes: &[u8], want: u32) -> Result<()> {
    let magic = be_u32(bytes, 0)?;
    if magic != want {
        return Err(Error::parse(
            0,
            format!("wrong magic 0x{magic:08x} (expected 0x{want:08x})"),
        ));
    }
    Ok(())
}

/// Parses an IDX3 image file: `(count, rows, cols, pixels)`.
pub fn parse_idx_images(bytes: &[u8]) -> Result<(usize, usize, usize, Vec<u8>)> {
    check_magic(bytes, IMAGE_MAGIC)?;
    let n = be_u32(bytes, 4)? as usize;
    let r = be_u32(bytes, 8)? as usize;
    let c = be_u32(bytes, 12)? as usize;
    let need = n * r * c;
    let body = &bytes[16..];
    if body.len() < need {
        return Err(Error::parse(
            bytes.len() as u64,
            format!("truncated image data: {need} bytes declared, {} present", body.len()),
        ));
    }
    Ok((n, r, c, body[..need].to_vec()))
}

pub fn parse_idx_labels(bytes: &[u8]) -> Result<Vec<u8>> {
    check_magic(bytes, LABEL_MAGIC)?;
    let n = be_u32(bytes, 4)? as usize;
    let body = &bytes[8..];
    if body.len() < n {
        return Err(Error::parse(
            bytes.len() as u64,
            format!("truncated label data: {n} labels declared, {} present", body.len()),
        ));
    }
    if let Some(pos) = body[..n].iter().position(|&l| l > 9) {
        return Err(Error::parse((8 + pos) as u64, format!("label {} outside 0..=9", body[pos])));
    }
    Ok(body[..n].to_vec())
}

/// Loads an image/label IDX pair; gzip-compressed files are detected by
/// their header and decompressed.
pub fn load_mnist_idx(images_path: &Path, labels_path: &Path) -> Result<RawImages> {
    let (count, rows, cols, pixels) = parse_idx_images(&read_maybe_gz(images_path)?)?;
    let labels = parse_idx_labels(&read_maybe_gz(labels_path)?)?;
    if labels.len() != count {
        return Err(Error::parse(
            4,
            format!("count mismatch: {count} images but {} labels", labels.len()),
        ));
    }
    Ok(RawImages {
        count,
        rows,
        cols,
        pixels,
        labels,
    })
}

/// Row-major matrix of 0/1 pixels.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct BinaryImages {
    rows: usize,
    cols: usize,
    bits: Vec<u8>,
}

impl BinaryImages {
    pub fn new(rows: usize, cols: usize, bits: Vec<u8>) -> Result<Self> {
        if bits.len() != rows * cols {
            return Err(Error::dim(format!("{} pixels for a {rows}x{cols} matrix", bits.len())));
        }
        if bits.iter().any(|&b| b > 1) {
            return Err(Error::dim("binary matrix holds a value other than 0 or 1"));
        }
        Ok(BinaryImages { rows, cols, bits })
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn bits(&self) -> &[u8] {
        &self.bits
    }

    pub fn row(&self, i: usize) -> &[u8] {
        &self.bits[i * self.cols..(i + 1) * self.cols]
    }

    pub fn to_tensor(&self) -> Tensor {
        Tensor::new(self.rows, self.cols, self.bits.iter().map(|&b| f64::from(b)).collect())
            .expect("shape matches")
    }

    /// Gathers the given rows as a float tensor.
    pub fn rows_tensor(&self, idx: &[usize]) -> Tensor {
        let mut data = Vec::with_capacity(idx.len() * self.cols);
        for &i in idx {
            data.extend(self.row(i).iter().map(|&b| f64::from(b)));
        }
        Tensor::new(idx.len(), self.cols, data).expect("shape matches")
    }

    pub fn range_tensor(&self, start: usize, end: usize) -> Tensor {
        let idx: Vec<usize> = (start..end).collect();
        self.rows_tensor(&idx)
    }

    pub fn take(&self, n: usize) -> BinaryImages {
        let n = n.min(self.rows);
        BinaryImages {
            rows: n,
            cols: self.cols,
            bits: self.bits[..n * self.cols].to_vec(),
        }
    }
}

/// `pixel >= threshold` becomes 1. `threshold` must lie strictly inside (0, 255).
pub fn binarize(pixels: &[u8], width: usize, threshold: u8) -> Result<BinaryImages> {
    if threshold == 0 || threshold == 255 {
        return Err(Error::Config(format!("threshold {threshold} outside (0,255)")));
    }
    if width == 0 || pixels.len() % width != 0 {
        return Err(Error::dim("pixel buffer is not a whole number of rows"));
    }
    let bits = pixels.iter().map(|&p| u8::from(p >= threshold)).collect();
    BinaryImages::new(pixels.len() / width, width, bits)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Test,
}

/// Paired top-half / bottom-half views with digit labels.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ViewPairDataset {
    pub view1: BinaryImages,
    pub view2: BinaryImages,
    pub labels: Vec<u8>,
    pub split: Split,
}

impl ViewPairDataset {
    pub fn new(view1: BinaryImages, view2: BinaryImages, labels: Vec<u8>, split: Split) -> Result<Self> {
        if view1.rows() != view2.rows() || view1.rows() != labels.len() {
            return Err(Error::dim(format!(
                "row counts disagree: view1 {}, view2 {}, labels {}",
                view1.rows(),
                view2.rows(),
                labels.len()
            )));
        }
        Ok(ViewPairDataset {
            view1,
            view2,
            labels,
            split,
        })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn view(&self, i: usize) -> &BinaryImages {
        if i == 1 {
            &self.view1
        } else {
            &self.view2
        }
    }

    pub fn take(&self, n: usize) -> ViewPairDataset {
        let n = n.min(self.len());
        ViewPairDataset {
            view1: self.view1.take(n),
            view2: self.view2.take(n),
            labels: self.labels[..n].to_vec(),
            split: self.split,
        }
    }

    pub fn labels_usize(&self) -> Vec<usize> {
        self.labels.iter().map(|&l| usize::from(l)).collect()
    }

    /// Re-stacks the two halves into full `N x 784` images.
    pub fn stacked(&self) -> BinaryImages {
        let c = self.view1.cols() + self.view2.cols();
        let mut bits = Vec::with_capacity(self.len() * c);
        for i in 0..self.len() {
            bits.extend_from_slice(self.view1.row(i));
            bits.extend_from_slice(self.view2.row(i));
        }
        BinaryImages {
            rows: self.len(),
            cols: c,
            bits,
        }
    }

    /// SHA-256 over dimensions, pixels and labels.
    pub fn content_hash(&self) -> String {
        let mut h = Sha256::new();
        h.update((self.len() as u64).to_le_bytes());
        h.update((self.view1.cols() as u64).to_le_bytes());
        h.update((self.view2.cols() as u64).to_le_bytes());
        h.update(&self.view1.bits);
        h.update(&self.view2.bits);
        h.update(&self.labels);
        hex::encode(h.finalize())
    }
}

/// Splits 28x28 images into rows 0-13 (view 1) and rows 14-27 (view 2).
pub fn make_hvd(images: &BinaryImages, labels: &[u8], split: Split) -> Result<ViewPairDataset> {
    if images.cols() != PIXELS {
        return Err(Error::dim(format!("images must be {PIXELS} wide, got {}", images.cols())));
    }
    let n = images.rows();
    let mut top = Vec::with_capacity(n * HALF);
    let mut bottom = Vec::with_capacity(n * HALF);
    for i in 0..n {
        let r = images.row(i);
        top.extend_from_slice(&r[..HALF]);
        bottom.extend_from_slice(&r[HALF..]);
    }
    ViewPairDataset::new(
        BinaryImages::new(n, HALF, top)?,
        BinaryImages::new(n, HALF, bottom)?,
        labels.to_vec(),
        split,
    )
}

#[derive(Clone, Debug)]
pub struct HvdMnist {
    pub train: ViewPairDataset,
    pub test: ViewPairDataset,
}

fn locate(dir: &Path, stem: &str) -> Result<PathBuf> {
    for name in [stem.to_string(), format!("{stem}.gz")] {
        let p = dir.join(&name);
        if p.exists() {
            return Ok(p);
        }
    }
    Err(Error::Io(std::io::Error::new(
        std::io::ErrorKind::NotFound,
        format!("{stem}[.gz] not found in {}", dir.display()),
    )))
}

/// Builds the two-view train/test splits from the standard archive names in
/// `dir`. The train split keeps the first `train_limit` images (default
/// 50,000).
pub fn load_hvd_mnist(dir: &Path, threshold: u8, train_limit: Option<usize>, test_limit: Option<usize>) -> Result<HvdMnist> {
    let build = |img: &str, lab: &str, split: Split, limit: usize| -> Result<ViewPairDataset> {
        let raw = load_mnist_idx(&locate(dir, img)?, &locate(dir, lab)?)?;
        if raw.rows * raw.cols != PIXELS {
            return Err(Error::dim(format!("expected 28x28 images, got {}x{}", raw.rows, raw.cols)));
        }
        let keep = limit.min(raw.count);
        let bin = binarize(&raw.pixels[..keep * PIXELS], PIXELS, threshold)?;
        make_hvd(&bin, &raw.labels[..keep], split)
    };
    Ok(HvdMnist {
        train: build(
            "train-images-idx3-ubyte",
            "train-labels-idx1-ubyte",
            Split::Train,
            train_limit.unwrap_or(TRAIN_IMAGES),
        )?,
        test: build(
            "t10k-images-idx3-ubyte",
            "t10k-labels-idx1-ubyte",
            Split::Test,
            test_limit.unwrap_or(usize::MAX),
        )?,
    })
}

fn pack_bits(bits: &[u8]) -> Vec<u8> {
    bits.chunks(8)
        .map(|chunk| chunk.iter().enumerate().fold(0u8, |acc, (i, &b)| acc | (b << (7 - i))))
        .collect()
}

fn unpack_bits(packed: &[u8], count: usize) -> Vec<u8> {
    (0..count).map(|i| (packed[i / 8] >> (7 - i % 8)) & 1).collect()
}

/// Packed cache layout (little-endian): magic `HVDCACHE`, version `u32`,
/// split `u8`, rows `u64`, widths `u32 u32`, bit-packed view 1, bit-packed
/// view 2, one label byte per row.
pub fn write_cache(path: &Path, ds: &ViewPairDataset) -> Result<()> {
    let mut out = Vec::new();
    out.extend_from_slice(CACHE_MAGIC);
    out.extend_from_slice(&CACHE_VERSION.to_le_bytes());
    out.push(match ds.split {
        Split::Train => 0,
        Split::Test => 1,
    });
    out.extend_from_slice(&(ds.len() as u64).to_le_bytes());
    out.extend_from_slice(&(ds.view1.cols() as u32).to_le_bytes());
    out.extend_from_slice(&(ds.view2.cols() as u32).to_le_bytes());
    out.extend_from_slice(&pack_bits(ds.view1.bits()));
    out.extend_from_slice(&pack_bits(ds.view2.bits()));
    out.extend_from_slice(&ds.labels);
    fs::File::create(path)?.write_all(&out)?;
    Ok(())
}

pub fn read_cache(path: &Path) -> Result<ViewPairDataset> {
    let bytes = fs::read(path)?;
    let header = 8 + 4 + 1 + 8 + 4 + 4;
    if bytes.len() < header {
        return Err(Error::parse(bytes.len() as u64, "truncated header"));
    }
    if &bytes[..8] != CACHE_MAGIC {
        return Err(Error::parse(0, "wrong magic"));
    }
    let version = u32::from_le_bytes(bytes[8..12].try_into().expect("4 bytes"));
    if version != CACHE_VERSION {
        return Err(Error::Version {
            found: version,
            expected: CACHE_VERSION,
        });
    }
    let split = match bytes[12] {
        0 => Split::Train,
        1 => Split::Test,
        other => return Err(Error::parse(12, format!("unknown split tag {other}"))),
    };
    let n = u64::from_le_bytes(bytes[13..21].try_into().expect("8 bytes")) as usize;
    let c1 = u32::from_le_bytes(bytes[21..25].try_into().expect("4 bytes")) as usize;
    let c2 = u32::from_le_bytes(bytes[25..29].try_into().expect("4 bytes")) as usize;
    let l1 = (n * c1).div_ceil(8);
    let l2 = (n * c2).div_ceil(8);
    let need = header + l1 + l2 + n;
    if bytes.len() < need {
        return Err(Error::parse(bytes.len() as u64, format!("truncated cache: {need} bytes expected")));
    }
    let mut at = header;
    let v1 = unpack_bits(&bytes[at..at + l1], n * c1);
    at += l1;
    let v2 = unpack_bits(&bytes[at..at + l2], n * c2);
    at += l2;
    let labels = bytes[at..at + n].to_vec();
    ViewPairDataset::new(
        BinaryImages::new(n, c1, v1)?,
        BinaryImages::new(n, c2, v2)?,
        labels,
        split,
    )
}

/// Writes an IDX pair; used for fixtures and for exporting subsets.
pub fn write_idx(images_path: &Path, labels_path: &Path, rows: usize, cols: usize, pixels: &[u8], labels: &[u8]) -> Result<()> {
    let n = labels.len();
    if pixels.len() != n * rows * cols {
        return Err(Error::dim("pixel count does not match labels"));
    }
    let mut img = Vec::with_capacity(16 + pixels.len());
    for v in [IMAGE_MAGIC, n as u32, rows as u32, cols as u32] {
        img.extend_from_slice(&v.to_be_bytes());
    }
    img.extend_from_slice(pixels);
    fs::write(images_path, img)?;
    let mut lab = Vec::with_capacity(8 + n);
    for v in [LABEL_MAGIC, n as u32] {
        lab.extend_from_slice(&v.to_be_bytes());
    }
    lab.extend_from_slice(labels);
    fs::write(labels_path, lab)?;
    Ok(())
}
