//! Labeled image data: IDX files, normalization and synthetic sets.

use std::fs;
use std::io::Write;
use std::path::Path;
use std::str::FromStr;

use ndarray::Array2;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::flow::{GridImage, Image, ImageShape, MultiChannelImage};
use crate::rng::SeedStream;
use crate::{Error, Result};

pub const IDX_IMAGES_MAGIC: u32 = 0x0000_0803;
pub const IDX_LABELS_MAGIC: u32 = 0x0000_0801;

/// Normalized images with class labels in `0..num_classes`.
#[derive(Clone, Debug, PartialEq)]
pub struct LabeledDataset {
    images: Vec<Image>,
    labels: Vec<usize>,
    num_classes: usize,
}

impl LabeledDataset {
    pub fn new(images: Vec<Image>, labels: Vec<usize>, num_classes: usize) -> Result<Self> {
        if images.len() != labels.len() {
            return Err(Error::Pairing {
                images: images.len(),
                labels: labels.len(),
            });
        }
        if let Some(&bad) = labels.iter().find(|&&l| l >= num_classes) {
            return Err(Error::InvalidArgument(format!("label {bad} outside 0..{num_classes}")));
        }
        if let Some(first) = images.first() {
            let shape = first.shape();
            if let Some(other) = images.iter().find(|i| i.shape() != shape) {
                return Err(Error::dims(shape, other.shape()));
            }
        }
        Ok(LabeledDataset {
            images,
            labels,
            num_classes,
        })
    }

    pub fn images(&self) -> &[Image] {
        &self.images
    }

    pub fn labels(&self) -> &[usize] {
        &self.labels
    }

    pub fn num_classes(&self) -> usize {
        self.num_classes
    }

    pub fn len(&self) -> usize {
        self.images.len()
    }

    pub fn is_empty(&self) -> bool {
        self.images.is_empty()
    }

    /// Shape of the images; `1 x 0 x 0` for an empty set.
    pub fn shape(&self) -> ImageShape {
        self.images.first().map_or(ImageShape::gray(0, 0), Image::shape)
    }

    /// The first `count` examples.
    pub fn take(&self, count: usize) -> LabeledDataset {
        let count = count.min(self.len());
        LabeledDataset {
            images: self.images[..count].to_vec(),
            labels: self.labels[..count].to_vec(),
            num_classes: self.num_classes,
        }
    }

    /// Writes one row per image: `id,label,p0,p1,...` (channel-major pixels).
    pub fn write_csv<W: Write>(&self, out: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        let mut header = vec!["id".to_string(), "label".to_string()];
        header.extend((0..self.shape().input_len()).map(|k| format!("p{k}")));
        w.write_record(&header)?;
        for (id, (img, label)) in self.images.iter().zip(&self.labels).enumerate() {
            let mut row = vec![id.to_string(), label.to_string()];
            row.extend(img.flatten().iter().map(|v| v.to_string()));
            w.write_record(&row)?;
        }
        w.flush()?;
        Ok(())
    }
}

/// Unnormalized byte images and labels as stored in an IDX pair.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct IdxData {
    pub rows: usize,
    pub cols: usize,
    pub images: Vec<Vec<u8>>,
    pub labels: Vec<u8>,
}

impl IdxData {
    pub fn grid(&self, index: usize) -> Array2<f64> {
        Array2::from_shape_fn((self.rows, self.cols), |(i, j)| self.images[index][i * self.cols + j] as f64)
    }

    /// Normalizes every image to unit mass. Zero-mass images are skipped and
    /// their indices returned.
    pub fn normalize(&self, num_classes: usize) -> Result<(LabeledDataset, Vec<usize>)> {
        let mut images = Vec::new();
        let mut labels = Vec::new();
        let mut skipped = Vec::new();
        for (k, &label) in self.labels.iter().enumerate() {
            match normalize(self.grid(k)) {
                Ok(img) => {
                    images.push(Image::Gray(img));
                    labels.push(label as usize);
                }
                Err(Error::DegenerateImage) => skipped.push(k),
                Err(e) => return Err(e),
            }
        }
        Ok((LabeledDataset::new(images, labels, num_classes)?, skipped))
    }
}

fn read_u32(bytes: &[u8], offset: usize) -> Result<u32> {
    bytes
        .get(offset..offset + 4)
        .map(|b| u32::from_be_bytes([b[0], b[1], b[2], b[3]]))
        .ok_or(Error::Length {
            expected: offset + 4,
            found: bytes.len(),
        })
}

/// Parses an IDX3 unsigned-byte image buffer into `(rows, cols, images)`.
pub fn parse_idx_images(bytes: &[u8]) -> Result<(usize, usize, Vec<Vec<u8>>)> {
    let magic = read_u32(bytes, 0)?;
    if magic != IDX_IMAGES_MAGIC {
        return Err(Error::Format(format!("image magic {magic:#010x}, expected {IDX_IMAGES_MAGIC:#010x}")));
    }
    let count = read_u32(bytes, 4)? as usize;
    let rows = read_u32(bytes, 8)? as usize;
    let cols = read_u32(bytes, 12)? as usize;
    let size = rows * cols;
    let expected = 16 + count * size;
    if bytes.len() < expected {
        return Err(Error::Length {
            expected,
            found: bytes.len(),
        });
    }
    let images = bytes[16..expected].chunks(size.max(1)).take(count).map(<[u8]>::to_vec).collect();
    Ok((rows, cols, images))
}

/// Parses an IDX1 unsigned-byte label buffer.
pub fn parse_idx_labels(bytes: &[u8]) -> Result<Vec<u8>> {
    let magic = read_u32(bytes, 0)?;
    if magic != IDX_LABELS_MAGIC {
        return Err(Error::Format(format!("label magic {magic:#010x}, expected {IDX_LABELS_MAGIC:#010x}")));
    }
    let count = read_u32(bytes, 4)? as usize;
    let expected = 8 + count;
    if bytes.len() < expected {
        return Err(Error::Length {
            expected,
            found: bytes.len(),
        });
    }
    Ok(bytes[8..expected].to_vec())
}

pub fn load_idx(images_path: &Path, labels_path: &Path) -> Result<IdxData> {
    let (rows, cols, images) = parse_idx_images(&fs::read(images_path)?)?;
    let labels = parse_idx_labels(&fs::read(labels_path)?)?;
    if images.len() != labels.len() {
        return Err(Error::Pairing {
            images: images.len(),
            labels: labels.len(),
        });
    }
    Ok(IdxData {
        rows,
        cols,
        images,
        labels,
    })
}

pub fn encode_idx_images(data: &IdxData) -> Vec<u8> {
    let mut out = Vec::with_capacity(16 + data.images.len() * data.rows * data.cols);
    for v in [IDX_IMAGES_MAGIC, data.images.len() as u32, data.rows as u32, data.cols as u32] {
        out.extend_from_slice(&v.to_be_bytes());
    }
    for img in &data.images {
        out.extend_from_slice(img);
    }
    out
}

pub fn encode_idx_labels(labels: &[u8]) -> Vec<u8> {
    let mut out = Vec::with_capacity(8 + labels.len());
    out.extend_from_slice(&IDX_LABELS_MAGIC.to_be_bytes());
    out.extend_from_slice(&(labels.len() as u32).to_be_bytes());
    out.extend_from_slice(labels);
    out
}

pub fn write_idx(data: &IdxData, images_path: &Path, labels_path: &Path) -> Result<()> {
    fs::write(images_path, encode_idx_images(data))?;
    fs::write(labels_path, encode_idx_labels(&data.labels))?;
    Ok(())
}

/// Divides a nonnegative grid by its total.
pub fn normalize(values: Array2<f64>) -> Result<GridImage> {
    if let Some((index, &value)) = values.iter().enumerate().find(|(_, v)| **v < 0.0) {
        return Err(Error::Negative { index, value });
    }
    let total = values.sum();
    if !(total > 0.0) {
        return Err(Error::DegenerateImage);
    }
    GridImage::new(values / total)
}

/// Packs nonnegative channels into one image normalized by the grand total.
pub fn pack_channels(channels: Vec<Array2<f64>>) -> Result<MultiChannelImage> {
    for c in &channels {
        if let Some((index, &value)) = c.iter().enumerate().find(|(_, v)| **v < 0.0) {
            return Err(Error::Negative { index, value });
        }
    }
    let total: f64 = channels.iter().map(|c| c.sum()).sum();
    if !(total > 0.0) {
        return Err(Error::DegenerateImage);
    }
    MultiChannelImage::new(channels.into_iter().map(|c| c / total).collect())
}

/// Families of generated images; the class is set by where the mass sits.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SyntheticKind {
    /// Two classes: a horizontal bar (0) or a vertical bar (1).
    Bars,
    /// Four classes: mass near the top-left, top-right, bottom-left or bottom-right corner.
    Corners,
    /// Four classes: a Gaussian blob inside one quadrant.
    Blobs,
}

impl SyntheticKind {
    pub fn num_classes(self) -> usize {
        match self {
            SyntheticKind::Bars => 2,
            SyntheticKind::Corners | SyntheticKind::Blobs => 4,
        }
    }
}

impl FromStr for SyntheticKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "bars" => Ok(SyntheticKind::Bars),
            "corners" => Ok(SyntheticKind::Corners),
            "blobs" => Ok(SyntheticKind::Blobs),
            other => Err(Error::InvalidArgument(format!("unknown synthetic kind {other:?}"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SyntheticSpec {
    pub kind: SyntheticKind,
    pub size: usize,
    pub height: usize,
    pub width: usize,
    #[serde(default = "one")]
    pub channels: usize,
    pub seed: u64,
}

fn one() -> usize {
    1
}

/// Deterministic synthetic dataset; class `k` images differ from the others
/// only in the placement of their mass.
pub fn synthetic_dataset(spec: &SyntheticSpec) -> Result<LabeledDataset> {
    if spec.size == 0 || spec.channels == 0 {
        return Err(Error::InvalidArgument("size and channels must be >= 1".into()));
    }
    if spec.height < 2 || spec.width < 2 {
        return Err(Error::InvalidArgument("synthetic grids need at least 2x2 pixels".into()));
    }
    let seed = SeedStream::new(spec.seed);
    let k = spec.kind.num_classes();
    let mut images = Vec::with_capacity(spec.size);
    let mut labels = Vec::with_capacity(spec.size);
    for idx in 0..spec.size {
        let mut rng = seed.rng_at(idx as u64);
        let label = rng.random_range(0..k);
        let grids: Vec<Array2<f64>> = (0..spec.channels)
            .map(|_| {
                let weight = if spec.channels == 1 { 1.0 } else { rng.random_range(0.2..1.0) };
                draw(spec.kind, label, spec.height, spec.width, &mut rng) * weight
            })
            .collect();
        let image = if spec.channels == 1 {
            Image::Gray(normalize(grids.into_iter().next().expect("one channel"))?)
        } else {
            Image::Color(pack_channels(grids)?)
        };
        images.push(image);
        labels.push(label);
    }
    LabeledDataset::new(images, labels, k)
}

fn draw<R: Rng + ?Sized>(kind: SyntheticKind, label: usize, n: usize, m: usize, rng: &mut R) -> Array2<f64> {
    let background = 0.02;
    match kind {
        SyntheticKind::Bars => {
            let mut g = Array2::from_elem((n, m), background);
            if label == 0 {
                let row = rng.random_range(0..n);
                let (lo, hi) = span(m, rng);
                for j in lo..hi {
                    g[(row, j)] += rng.random_range(0.7..1.0);
                }
            } else {
                let col = rng.random_range(0..m);
                let (lo, hi) = span(n, rng);
                for i in lo..hi {
                    g[(i, col)] += rng.random_range(0.7..1.0);
                }
            }
            g
        }
        SyntheticKind::Corners => {
            let (ci, cj) = corner(label, n, m);
            let reach = rng.random_range(0.25..0.45) * n.min(m) as f64;
            Array2::from_shape_fn((n, m), |(i, j)| {
                let d = (i as f64 - ci).abs() + (j as f64 - cj).abs();
                background + (1.0 - d / reach).max(0.0)
            })
        }
        SyntheticKind::Blobs => {
            let (half_n, half_m) = (n as f64 / 2.0, m as f64 / 2.0);
            let top = if label < 2 { 0.0 } else { half_n };
            let left = if label.is_multiple_of(2) { 0.0 } else { half_m };
            let ci = top + rng.random_range(0.3..0.7) * half_n - 0.5;
            let cj = left + rng.random_range(0.3..0.7) * half_m - 0.5;
            let width = rng.random_range(0.12..0.22) * n.min(m) as f64;
            Array2::from_shape_fn((n, m), |(i, j)| {
                let r2 = (i as f64 - ci).powi(2) + (j as f64 - cj).powi(2);
                background * 0.5 + (-r2 / (2.0 * width * width)).exp()
            })
        }
    }
}

fn span<R: Rng + ?Sized>(len: usize, rng: &mut R) -> (usize, usize) {
    let length = rng.random_range(len.div_ceil(2)..=len);
    let lo = rng.random_range(0..=len - length);
    (lo, lo + length)
}

fn corner(label: usize, n: usize, m: usize) -> (f64, f64) {
    let bottom = (n - 1) as f64;
    let right = (m - 1) as f64;
    match label {
        0 => (0.0, 0.0),
        1 => (0.0, right),
        2 => (bottom, 0.0),
        _ => (bottom, right),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::flow::{row_masses, GridLike};
    use approx::assert_abs_diff_eq;
    use ndarray::array;

    fn tiny_idx() -> IdxData {
        IdxData {
            rows: 2,
            cols: 2,
            images: vec![vec![0, 255, 3, 4], vec![9, 0, 0, 1]],
            labels: vec![7, 1],
        }
    }

    #[test]
    fn hand_built_idx_pair() {
        let mut bytes = vec![0, 0, 8, 3, 0, 0, 0, 2, 0, 0, 0, 2, 0, 0, 0, 2];
        bytes.extend([0, 255, 3, 4, 9, 0, 0, 1]);
        assert_eq!(encode_idx_images(&tiny_idx()), bytes);
        let (rows, cols, images) = parse_idx_images(&bytes).unwrap();
        assert_eq!((rows, cols), (2, 2));
        assert_eq!(images, tiny_idx().images);
        assert_eq!(tiny_idx().grid(0), array![[0.0, 255.0], [3.0, 4.0]]);

        let dir = tempfile::tempdir().unwrap();
        let (ip, lp) = (dir.path().join("i.idx"), dir.path().join("l.idx"));
        write_idx(&tiny_idx(), &ip, &lp).unwrap();
        assert_eq!(load_idx(&ip, &lp).unwrap(), tiny_idx());
    }

    #[test]
    fn wrong_magic_is_format_error() {
        let mut bytes = encode_idx_images(&tiny_idx());
        bytes[3] = 0x02;
        assert!(matches!(parse_idx_images(&bytes), Err(Error::Format(_))));
        assert!(matches!(parse_idx_labels(&bytes), Err(Error::Format(_))));
    }

    #[test]
    fn truncated_payload_is_length_error() {
        let bytes = encode_idx_images(&tiny_idx());
        assert!(matches!(parse_idx_images(&bytes[..bytes.len() - 1]), Err(Error::Length { .. })));
        let labels = encode_idx_labels(&[1, 2, 3]);
        assert!(matches!(parse_idx_labels(&labels[..9]), Err(Error::Length { .. })));
    }

    #[test]
    fn count_mismatch_is_pairing_error() {
        let dir = tempfile::tempdir().unwrap();
        let (ip, lp) = (dir.path().join("i.idx"), dir.path().join("l.idx"));
        fs::write(&ip, encode_idx_images(&tiny_idx())).unwrap();
        fs::write(&lp, encode_idx_labels(&[1])).unwrap();
        assert!(matches!(load_idx(&ip, &lp), Err(Error::Pairing { images: 2, labels: 1 })));
    }

    #[test]
    fn empty_idx_is_empty_dataset() {
        let empty = IdxData {
            rows: 28,
            cols: 28,
            images: vec![],
            labels: vec![],
        };
        let (_, _, images) = parse_idx_images(&encode_idx_images(&empty)).unwrap();
        assert!(images.is_empty());
        let (ds, skipped) = empty.normalize(10).unwrap();
        assert!(ds.is_empty() && skipped.is_empty());
    }

    #[test]
    fn normalize_examples() {
        let g = normalize(array![[2.0, 2.0], [0.0, 0.0]]).unwrap();
        assert_eq!(g.values(), &array![[0.5, 0.5], [0.0, 0.0]]);
        let again = normalize(g.values().clone()).unwrap();
        assert_abs_diff_eq!(again.values(), g.values(), epsilon = 1e-12);
        assert!(matches!(normalize(Array2::zeros((2, 2))), Err(Error::DegenerateImage)));
    }

    #[test]
    fn idx_normalization_skips_blank_images() {
        let mut data = tiny_idx();
        data.images.push(vec![0; 4]);
        data.labels.push(3);
        let (ds, skipped) = data.normalize(10).unwrap();
        assert_eq!(ds.len(), 2);
        assert_eq!(skipped, vec![2]);
    }

    #[test]
    fn synthetic_is_deterministic() {
        let spec = SyntheticSpec {
            kind: SyntheticKind::Blobs,
            size: 20,
            height: 8,
            width: 8,
            channels: 1,
            seed: 3,
        };
        assert_eq!(synthetic_dataset(&spec).unwrap(), synthetic_dataset(&spec).unwrap());
    }

    #[test]
    fn horizontal_bar_concentrates_in_one_row() {
        let spec = SyntheticSpec {
            kind: SyntheticKind::Bars,
            size: 40,
            height: 8,
            width: 8,
            channels: 1,
            seed: 5,
        };
        let ds = synthetic_dataset(&spec).unwrap();
        let mut seen = 0;
        for (img, &label) in ds.images().iter().zip(ds.labels()) {
            let Image::Gray(g) = img else { panic!("gray expected") };
            let rows = row_masses(g);
            let max = rows.iter().copied().fold(0.0, f64::max);
            if label == 0 {
                seen += 1;
                let others = rows.iter().filter(|r| **r < max).copied().fold(0.0, f64::max);
                assert!(max > 3.0 * others, "row masses {rows:?}");
            }
        }
        assert!(seen > 0);
    }

    #[test]
    fn multichannel_packing_has_unit_mass() {
        let spec = SyntheticSpec {
            kind: SyntheticKind::Corners,
            size: 5,
            height: 4,
            width: 4,
            channels: 3,
            seed: 1,
        };
        let ds = synthetic_dataset(&spec).unwrap();
        for img in ds.images() {
            let Image::Color(c) = img else { panic!("color expected") };
            assert_abs_diff_eq!(c.masses().iter().sum::<f64>(), 1.0, epsilon = 1e-12);
        }
        assert!(pack_channels(vec![Array2::zeros((2, 2))]).is_err());
    }

    #[test]
    fn csv_export_has_header_and_rows() {
        let ds = synthetic_dataset(&SyntheticSpec {
            kind: SyntheticKind::Bars,
            size: 3,
            height: 2,
            width: 2,
            channels: 1,
            seed: 0,
        })
        .unwrap();
        let mut buf = Vec::new();
        ds.write_csv(&mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        let lines: Vec<&str> = text.lines().collect();
        assert_eq!(lines[0], "id,label,p0,p1,p2,p3");
        assert_eq!(lines.len(), 4);
    }
}
