//! IDX files and two-digit Multi-MNIST composition.
//!
//! IDX headers are big-endian: a magic number (`0x00000803` for u8 image
//! tensors, `0x00000801` for u8 label vectors) followed by one u32 per
//! dimension. Pixel or label bytes follow the header.

use std::fs;
use std::io::{Cursor, Read};
use std::path::Path;

use byteorder::{BigEndian, ReadBytesExt};
use ndarray::Array2;
use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::net::{Batch, LossKind, Targets};
use crate::rng::{stream, Stream};
use crate::tasks::{TaskInfo, TaskSuite};

pub const IDX_IMAGES_MAGIC: u32 = 0x0000_0803;
pub const IDX_LABELS_MAGIC: u32 = 0x0000_0801;

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct IdxImages {
    pub count: usize,
    pub rows: usize,
    pub cols: usize,
    pub pixels: Vec<u8>,
}

impl IdxImages {
    pub fn image(&self, i: usize) -> &[u8] {
        let n = self.rows * self.cols;
        &self.pixels[i * n..(i + 1) * n]
    }
}

fn ingestion(path: &Path, offset: u64, detail: impl Into<String>) -> Error {
    Error::Ingestion {
        path: path.to_path_buf(),
        offset,
        detail: detail.into(),
    }
}

fn header(cur: &mut Cursor<&[u8]>, path: &Path, magic: u32, dims: usize) -> Result<Vec<usize>> {
    let found = cur
        .read_u32::<BigEndian>()
        .map_err(|_| ingestion(path, 0, "file shorter than the IDX magic number"))?;
    if found != magic {
        return Err(ingestion(path, 0, format!("magic {found:#010x}, expected {magic:#010x}")));
    }
    (0..dims)
        .map(|k| {
            let at = cur.position();
            cur.read_u32::<BigEndian>()
                .map(|v| v as usize)
                .map_err(|_| ingestion(path, at, format!("truncated header, dimension {k} missing")))
        })
        .collect()
}

fn body(cur: &mut Cursor<&[u8]>, path: &Path, len: usize) -> Result<Vec<u8>> {
    let start = cur.position();
    let available = cur.get_ref().len() as u64 - start;
    if (len as u64) > available {
        return Err(ingestion(
            path,
            start + available,
            format!("truncated data: expected {len} bytes after offset {start}, found {available}"),
        ));
    }
    let mut out = vec![0u8; len];
    cur.read_exact(&mut out)?;
    if cur.position() != cur.get_ref().len() as u64 {
        return Err(ingestion(path, cur.position(), "trailing bytes after IDX data"));
    }
    Ok(out)
}

/// Parses an IDX image tensor (`count x rows x cols` unsigned bytes).
pub fn parse_idx_images(bytes: &[u8], path: &Path) -> Result<IdxImages> {
    let mut cur = Cursor::new(bytes);
    let dims = header(&mut cur, path, IDX_IMAGES_MAGIC, 3)?;
    let (count, rows, cols) = (dims[0], dims[1], dims[2]);
    let len = count
        .checked_mul(rows)
        .and_then(|v| v.checked_mul(cols))
        .ok_or_else(|| ingestion(path, 4, "image dimensions overflow"))?;
    let pixels = body(&mut cur, path, len)?;
    Ok(IdxImages {
        count,
        rows,
        cols,
        pixels,
    })
}

/// Parses an IDX label vector.
pub fn parse_idx_labels(bytes: &[u8], path: &Path) -> Result<Vec<u8>> {
    let mut cur = Cursor::new(bytes);
    let dims = header(&mut cur, path, IDX_LABELS_MAGIC, 1)?;
    body(&mut cur, path, dims[0])
}

fn read(path: &Path) -> Result<Vec<u8>> {
    fs::read(path).map_err(|e| ingestion(path, 0, e.to_string()))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MultiMnistConfig {
    pub canvas: usize,
    /// Row and column offset of the second digit.
    pub offset: usize,
    /// Source images reserved for training pairs; the rest feed validation.
    pub train_sources: usize,
    pub train_pairs: usize,
    pub val_pairs: usize,
    pub test_pairs: usize,
}

impl Default for MultiMnistConfig {
    fn default() -> Self {
        MultiMnistConfig {
            canvas: 32,
            offset: 4,
            train_sources: 50_000,
            train_pairs: 50_000,
            val_pairs: 10_000,
            test_pairs: 10_000,
        }
    }
}

/// Places `a` at the top-left corner and `b` at `(offset, offset)` on a
/// `canvas x canvas` grid, keeps the elementwise maximum, and rescales to
/// `[0, 1]`.
pub fn compose(a: &[u8], b: &[u8], rows: usize, cols: usize, canvas: usize, offset: usize) -> Vec<f64> {
    let mut out = vec![0u8; canvas * canvas];
    for (img, o) in [(a, 0), (b, offset)] {
        for r in 0..rows {
            for c in 0..cols {
                let cell = &mut out[(r + o) * canvas + c + o];
                *cell = (*cell).max(img[r * cols + c]);
            }
        }
    }
    out.into_iter().map(|v| v as f64 / 255.0).collect()
}

fn pairs(
    images: &IdxImages,
    labels: &[u8],
    pool: std::ops::Range<usize>,
    count: usize,
    cfg: &MultiMnistConfig,
    rng: &mut crate::rng::Rng,
) -> Result<Batch> {
    let side = cfg.canvas * cfg.canvas;
    let mut x = Array2::zeros((count, side));
    let mut first = Vec::with_capacity(count);
    let mut second = Vec::with_capacity(count);
    for r in 0..count {
        let i = rng.random_range(pool.clone());
        let j = rng.random_range(pool.clone());
        let img = compose(images.image(i), images.image(j), images.rows, images.cols, cfg.canvas, cfg.offset);
        x.row_mut(r).iter_mut().zip(img).for_each(|(d, v)| *d = v);
        first.push(labels[i] as usize);
        second.push(labels[j] as usize);
    }
    Batch::new(x, vec![Targets::Classes(first), Targets::Classes(second)])
}

/// Builds a two-task suite from MNIST-format IDX files. Training pairs draw
/// both digits uniformly from the first `train_sources` training images and
/// validation pairs from the remaining ones. Test pairs come from the test
/// files when given, otherwise from the validation pool. Task 1 predicts the
/// top-left digit and task 2 the shifted one.
pub fn load_multimnist(
    train_images: &Path,
    train_labels: &Path,
    test: Option<(&Path, &Path)>,
    cfg: &MultiMnistConfig,
    seed: u64,
) -> Result<TaskSuite> {
    let images = parse_idx_images(&read(train_images)?, train_images)?;
    let labels = parse_idx_labels(&read(train_labels)?, train_labels)?;
    check_pair(&images, &labels, train_labels)?;
    if cfg.offset + images.rows > cfg.canvas || cfg.offset + images.cols > cfg.canvas {
        return Err(Error::Config(format!(
            "{}x{} digits at offset {} do not fit a {} canvas",
            images.rows, images.cols, cfg.offset, cfg.canvas
        )));
    }
    if cfg.train_sources == 0 || cfg.train_sources >= images.count {
        return Err(Error::Config(format!(
            "train_sources {} must leave validation images out of {}",
            cfg.train_sources, images.count
        )));
    }
    let mut rng = stream(seed, Stream::Generator);
    let train = pairs(&images, &labels, 0..cfg.train_sources, cfg.train_pairs, cfg, &mut rng)?;
    let val = pairs(&images, &labels, cfg.train_sources..images.count, cfg.val_pairs, cfg, &mut rng)?;
    let test = match test {
        Some((img_path, lbl_path)) => {
            let t_images = parse_idx_images(&read(img_path)?, img_path)?;
            let t_labels = parse_idx_labels(&read(lbl_path)?, lbl_path)?;
            check_pair(&t_images, &t_labels, lbl_path)?;
            if (t_images.rows, t_images.cols) != (images.rows, images.cols) {
                return Err(ingestion(img_path, 8, "test image size differs from training images"));
            }
            pairs(&t_images, &t_labels, 0..t_images.count, cfg.test_pairs, cfg, &mut rng)?
        }
        None => pairs(&images, &labels, cfg.train_sources..images.count, cfg.test_pairs, cfg, &mut rng)?,
    };
    let info = (0..2)
        .map(|_| TaskInfo {
            loss: LossKind::CrossEntropy,
            classes: 10,
            scale: 1.0,
        })
        .collect();
    TaskSuite::new("multi-mnist", info, train, val, test)
}

fn check_pair(images: &IdxImages, labels: &[u8], label_path: &Path) -> Result<()> {
    if images.count != labels.len() {
        return Err(ingestion(
            label_path,
            4,
            format!("{} labels for {} images", labels.len(), images.count),
        ));
    }
    if let Some(pos) = labels.iter().position(|&l| l > 9) {
        return Err(ingestion(label_path, 8 + pos as u64, format!("label {} is not a digit", labels[pos])));
    }
    Ok(())
}

/// Serializes images to IDX bytes.
pub fn encode_idx_images(images: &IdxImages) -> Vec<u8> {
    let mut out = Vec::with_capacity(16 + images.pixels.len());
    for v in [IDX_IMAGES_MAGIC, images.count as u32, images.rows as u32, images.cols as u32] {
        out.extend_from_slice(&v.to_be_bytes());
    }
    out.extend_from_slice(&images.pixels);
    out
}

/// Serializes labels to IDX bytes.
pub fn encode_idx_labels(labels: &[u8]) -> Vec<u8> {
    let mut out = Vec::with_capacity(8 + labels.len());
    out.extend_from_slice(&IDX_LABELS_MAGIC.to_be_bytes());
    out.extend_from_slice(&(labels.len() as u32).to_be_bytes());
    out.extend_from_slice(labels);
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    fn fake_images(count: usize) -> IdxImages {
        let pixels = (0..count * 28 * 28).map(|i| ((i * 37) % 251) as u8).collect();
        IdxImages {
            count,
            rows: 28,
            cols: 28,
            pixels,
        }
    }

    #[test]
    fn header_is_big_endian() {
        let bytes = encode_idx_labels(&[3, 1, 4]);
        assert_eq!(&bytes[..8], &[0, 0, 8, 1, 0, 0, 0, 3]);
        assert_eq!(parse_idx_labels(&bytes, Path::new("l")).unwrap(), vec![3, 1, 4]);
        let imgs = fake_images(2);
        assert_eq!(parse_idx_images(&encode_idx_images(&imgs), Path::new("i")).unwrap(), imgs);
    }

    #[test]
    fn corrupt_files_name_the_offset() {
        let p = Path::new("x");
        let err = |r: Result<_>| match r {
            Err(Error::Ingestion { offset, .. }) => offset,
            _ => panic!("expected ingestion error"),
        };
        let good = encode_idx_images(&fake_images(2));
        assert_eq!(err(parse_idx_images(&good[..2], p).map(|_| ())), 0);
        assert_eq!(err(parse_idx_images(&good[..10], p).map(|_| ())), 8);
        assert_eq!(err(parse_idx_images(&good[..100], p).map(|_| ())), 100);
        let mut wrong = good.clone();
        wrong[3] = 1;
        assert_eq!(err(parse_idx_images(&wrong, p).map(|_| ())), 0);
        let labels = encode_idx_labels(&[1, 2]);
        assert!(parse_idx_images(&labels, p).is_err());
        let mut long = labels.clone();
        long.push(7);
        assert_eq!(err(parse_idx_labels(&long, p).map(|_| ())), 10);
    }

    #[test]
    fn composing_with_blank_keeps_the_digit_in_its_corner() {
        let a = fake_images(1);
        let blank = vec![0u8; 28 * 28];
        let out = compose(a.image(0), &blank, 28, 28, 32, 4);
        for r in 0..32 {
            for c in 0..32 {
                let expected = if r < 28 && c < 28 { a.image(0)[r * 28 + c] as f64 / 255.0 } else { 0.0 };
                assert_eq!(out[r * 32 + c], expected);
            }
        }
        let out = compose(&blank, a.image(0), 28, 28, 32, 4);
        assert_eq!(out[4 * 32 + 4], a.image(0)[0] as f64 / 255.0);
        assert_eq!(out[31 * 32 + 31], a.image(0)[27 * 28 + 27] as f64 / 255.0);
        assert_eq!(out[0], 0.0);
    }
}
