//! Dataset ingestion and preprocessing.
//!
//! Inputs are scaled to [0,1] and then divided by √n_in so vector lengths
//! land near the unit scale the volume-preserving layers work at; odd widths
//! gain one always-zero coordinate. Supported sources: MNIST IDX files, a
//! CSV interchange format (`label,f0,f1,...`, features pre-scaled to [0,1]),
//! and a seeded synthetic Gaussian-blob generator used where a text pipeline
//! would be overkill.

use std::fs::File;
use std::io::{BufReader, Read};
use std::path::Path;

use crate::error::{Error, Result};
use crate::rng::SeededRng;

const IDX_IMAGES_MAGIC: u32 = 0x0000_0803;
const IDX_LABELS_MAGIC: u32 = 0x0000_0801;

/// Unprocessed inputs plus the scale that maps them into [0,1].
#[derive(Debug, Clone)]
pub struct RawDataset {
    pub inputs: Vec<Vec<f64>>,
    pub labels: Vec<usize>,
    pub n_classes: usize,
    pub name: String,
    /// Raw feature values live in [0, value_scale].
    pub value_scale: f64,
}

/// Preprocessed inputs: even width, entries in [0, 1/√n_in], labels in range.
#[derive(Debug, Clone)]
pub struct Dataset {
    inputs: Vec<Vec<f64>>,
    labels: Vec<usize>,
    n_classes: usize,
    name: String,
}

impl Dataset {
    /// Wraps already-preprocessed data (even width, entries at the
    /// 1/√n_in scale, labels in range).
    pub fn from_parts(
        inputs: Vec<Vec<f64>>,
        labels: Vec<usize>,
        n_classes: usize,
        name: impl Into<String>,
    ) -> Result<Dataset> {
        let Some(first) = inputs.first() else {
            return Err(Error::InvalidConfig("dataset has no records".into()));
        };
        let width = first.len();
        if width == 0 || !width.is_multiple_of(2) {
            return Err(Error::InvalidConfig(format!(
                "dataset width must be even and positive, got {width}"
            )));
        }
        if inputs.iter().any(|v| v.len() != width) {
            return Err(Error::InvalidConfig("ragged dataset rows".into()));
        }
        if labels.len() != inputs.len() {
            return Err(Error::InvalidConfig(format!(
                "{} inputs but {} labels",
                inputs.len(),
                labels.len()
            )));
        }
        if n_classes < 2 || labels.iter().any(|&l| l >= n_classes) {
            return Err(Error::InvalidConfig(
                "labels must lie in 0..n_classes with n_classes >= 2".into(),
            ));
        }
        Ok(Dataset {
            inputs,
            labels,
            n_classes,
            name: name.into(),
        })
    }

    pub fn len(&self) -> usize {
        self.inputs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.inputs.is_empty()
    }

    pub fn width(&self) -> usize {
        self.inputs[0].len()
    }

    pub fn n_classes(&self) -> usize {
        self.n_classes
    }

    pub fn name(&self) -> &str {
        &self.name
    }

    pub fn input(&self, i: usize) -> &[f64] {
        &self.inputs[i]
    }

    pub fn label(&self, i: usize) -> usize {
        self.labels[i]
    }

    pub fn labels(&self) -> &[usize] {
        &self.labels
    }

    /// The first `n` records as their own dataset (deterministic subset).
    pub fn take(&self, n: usize) -> Dataset {
        let n = n.min(self.len());
        Dataset {
            inputs: self.inputs[..n].to_vec(),
            labels: self.labels[..n].to_vec(),
            n_classes: self.n_classes,
            name: format!("{}[..{n}]", self.name),
        }
    }

    /// Deterministic tail split: the last `fraction` of records becomes the
    /// held-out set.
    pub fn split_tail(&self, fraction: f64) -> (Dataset, Dataset) {
        let hold = ((self.len() as f64 * fraction).round() as usize)
            .clamp(1, self.len().saturating_sub(1));
        let cut = self.len() - hold;
        let head = Dataset {
            inputs: self.inputs[..cut].to_vec(),
            labels: self.labels[..cut].to_vec(),
            n_classes: self.n_classes,
            name: format!("{}[train]", self.name),
        };
        let tail = Dataset {
            inputs: self.inputs[cut..].to_vec(),
            labels: self.labels[cut..].to_vec(),
            n_classes: self.n_classes,
            name: format!("{}[held-out]", self.name),
        };
        (head, tail)
    }

    /// Index batches for one epoch: a seeded shuffle chunked by `batch_size`,
    /// final short batch included. Deterministic per (seed, epoch).
    pub fn batches(&self, batch_size: usize, shuffle_seed: u64, epoch: u64) -> Vec<Vec<usize>> {
        assert!(batch_size >= 1, "batch size must be positive");
        let mut order: Vec<usize> = (0..self.len()).collect();
        let mut rng = SeededRng::new(crate::rng::derive_seed(shuffle_seed, epoch));
        rng.shuffle(&mut order);
        order
            .chunks(batch_size)
            .map(|chunk| chunk.to_vec())
            .collect()
    }
}

struct IdxReader<R: Read> {
    inner: R,
    offset: u64,
}

impl<R: Read> IdxReader<R> {
    fn fill(&mut self, buf: &mut [u8]) -> Result<()> {
        self.inner.read_exact(buf).map_err(|e| {
            if e.kind() == std::io::ErrorKind::UnexpectedEof {
                Error::Format {
                    offset: self.offset,
                    what: "unexpected end of IDX file".into(),
                }
            } else {
                Error::Io(e)
            }
        })?;
        self.offset += buf.len() as u64;
        Ok(())
    }

    fn u32_be(&mut self) -> Result<u32> {
        let mut b = [0u8; 4];
        self.fill(&mut b)?;
        Ok(u32::from_be_bytes(b))
    }
}

/// Parses the big-endian MNIST IDX pair (images magic 2051, labels magic
/// 2049) into a raw dataset with pixel values 0..=255.
pub fn load_mnist_idx(images_path: &Path, labels_path: &Path) -> Result<RawDataset> {
    let mut img = IdxReader {
        inner: BufReader::new(File::open(images_path)?),
        offset: 0,
    };
    let magic = img.u32_be()?;
    if magic != IDX_IMAGES_MAGIC {
        return Err(Error::Format {
            offset: 0,
            what: format!("bad image magic 0x{magic:08x}, expected 0x{IDX_IMAGES_MAGIC:08x}"),
        });
    }
    let count = img.u32_be()? as usize;
    let rows = img.u32_be()? as usize;
    let cols = img.u32_be()? as usize;
    if rows == 0 || cols == 0 || count == 0 {
        return Err(Error::Format {
            offset: 4,
            what: format!("degenerate image dimensions {count}x{rows}x{cols}"),
        });
    }
    let width = rows * cols;
    let mut inputs = Vec::with_capacity(count);
    let mut pixel = vec![0u8; width];
    for _ in 0..count {
        img.fill(&mut pixel)?;
        inputs.push(pixel.iter().map(|&p| p as f64).collect());
    }

    let mut lbl = IdxReader {
        inner: BufReader::new(File::open(labels_path)?),
        offset: 0,
    };
    let magic = lbl.u32_be()?;
    if magic != IDX_LABELS_MAGIC {
        return Err(Error::Format {
            offset: 0,
            what: format!("bad label magic 0x{magic:08x}, expected 0x{IDX_LABELS_MAGIC:08x}"),
        });
    }
    let label_count = lbl.u32_be()? as usize;
    if label_count != count {
        return Err(Error::Format {
            offset: 4,
            what: format!("{count} images but {label_count} labels"),
        });
    }
    let mut labels = Vec::with_capacity(count);
    let mut byte = [0u8; 1];
    for _ in 0..count {
        lbl.fill(&mut byte)?;
        labels.push(byte[0] as usize);
    }
    let n_classes = labels.iter().max().copied().unwrap_or(0) + 1;
    Ok(RawDataset {
        inputs,
        labels,
        n_classes,
        name: "mnist".into(),
        value_scale: 255.0,
    })
}

/// Reads the CSV interchange format: header `label,f0,f1,...`, one record
/// per row, features already scaled to [0,1].
pub fn load_csv(path: &Path) -> Result<RawDataset> {
    let mut reader = csv::ReaderBuilder::new().has_headers(true).from_path(path)?;
    let mut inputs = Vec::new();
    let mut labels = Vec::new();
    let mut width = None;
    for (row, record) in reader.records().enumerate() {
        let record = record?;
        if record.is_empty() {
            continue;
        }
        let label: usize = record[0].trim().parse().map_err(|_| Error::Format {
            offset: row as u64 + 1,
            what: format!("row {}: label '{}' is not a class index", row + 1, &record[0]),
        })?;
        let features: Vec<f64> = record
            .iter()
            .skip(1)
            .map(|f| {
                f.trim().parse::<f64>().map_err(|_| Error::Format {
                    offset: row as u64 + 1,
                    what: format!("row {}: feature '{f}' is not a float", row + 1),
                })
            })
            .collect::<Result<_>>()?;
        if let Some(w) = width {
            if features.len() != w {
                return Err(Error::Format {
                    offset: row as u64 + 1,
                    what: format!("row {} has {} features, expected {w}", row + 1, features.len()),
                });
            }
        } else {
            width = Some(features.len());
        }
        inputs.push(features);
        labels.push(label);
    }
    if inputs.is_empty() {
        return Err(Error::Format {
            offset: 0,
            what: "csv dataset has no records".into(),
        });
    }
    let n_classes = labels.iter().max().copied().unwrap_or(0) + 1;
    Ok(RawDataset {
        inputs,
        labels,
        n_classes,
        name: path.file_stem().map_or("csv".into(), |s| s.to_string_lossy().into_owned()),
        value_scale: 1.0,
    })
}

/// Scales entries to [0,1] (dividing by the raw value scale), divides by
/// √n_in, and pads odd widths with one always-zero coordinate.
pub fn preprocess(raw: RawDataset) -> Dataset {
    let width = raw.inputs.first().map_or(0, |v| v.len());
    let scale = 1.0 / (raw.value_scale * (width as f64).sqrt());
    let pad = !width.is_multiple_of(2);
    let inputs = raw
        .inputs
        .into_iter()
        .map(|mut v| {
            for x in v.iter_mut() {
                *x *= scale;
            }
            if pad {
                v.push(0.0);
            }
            v
        })
        .collect();
    Dataset {
        inputs,
        labels: raw.labels,
        n_classes: raw.n_classes,
        name: raw.name,
    }
}

/// Seeded Gaussian clusters around random unit-vector centers scaled by
/// `separation` (unit per-coordinate noise), then preprocessed. Gaussians
/// are unbounded, so features are min-max normalized into [0,1] (one global
/// affine map, which preserves separability) before the √n_in scaling.
pub fn synthetic_blobs(
    n_per_class: usize,
    dim: usize,
    n_classes: usize,
    separation: f64,
    seed: u64,
) -> Result<Dataset> {
    if dim == 0 || !dim.is_multiple_of(2) {
        return Err(Error::InvalidConfig(format!(
            "blob dimension must be even and positive, got {dim}"
        )));
    }
    if n_classes < 2 {
        return Err(Error::InvalidConfig(format!(
            "need at least 2 classes, got {n_classes}"
        )));
    }
    if n_per_class == 0 {
        return Err(Error::InvalidConfig("n_per_class must be positive".into()));
    }
    if separation < 0.0 {
        return Err(Error::InvalidConfig(format!(
            "separation must be nonnegative, got {separation}"
        )));
    }
    let mut rng = SeededRng::new(seed);
    let centers: Vec<Vec<f64>> = (0..n_classes)
        .map(|_| {
            let mut c: Vec<f64> = (0..dim).map(|_| rng.normal()).collect();
            let norm = crate::math::l2_norm(&c).max(1e-12);
            for x in c.iter_mut() {
                *x *= separation / norm;
            }
            c
        })
        .collect();

    let mut inputs = Vec::with_capacity(n_per_class * n_classes);
    let mut labels = Vec::with_capacity(n_per_class * n_classes);
    for (class, center) in centers.iter().enumerate() {
        for _ in 0..n_per_class {
            let sample: Vec<f64> = center.iter().map(|&c| c + rng.normal()).collect();
            inputs.push(sample);
            labels.push(class);
        }
    }

    let mut lo = f64::INFINITY;
    let mut hi = f64::NEG_INFINITY;
    for v in &inputs {
        for &x in v {
            lo = lo.min(x);
            hi = hi.max(x);
        }
    }
    let span = (hi - lo).max(1e-12);
    for v in &mut inputs {
        for x in v.iter_mut() {
            *x = (*x - lo) / span;
        }
    }

    // A final shuffle so contiguous slices (subsets, tail holdouts) are
    // class-balanced.
    let mut order: Vec<usize> = (0..inputs.len()).collect();
    rng.shuffle(&mut order);
    let inputs: Vec<Vec<f64>> = order.iter().map(|&i| std::mem::take(&mut inputs[i])).collect();
    let labels: Vec<usize> = order.iter().map(|&i| labels[i]).collect();

    Ok(preprocess(RawDataset {
        inputs,
        labels,
        n_classes,
        name: format!("blobs(d={dim},c={n_classes},sep={separation},seed={seed})"),
        value_scale: 1.0,
    }))
}
