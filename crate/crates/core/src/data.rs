//! Datasets, IDX ingestion, synthetic blobs, and seeded mini-batching.

use crate::error::{Error, Result};
use crate::seed;
use crate::Float;
use byteorder::{BigEndian, ReadBytesExt, WriteBytesExt};
use ndarray::{Array2, Axis};
use rand::seq::SliceRandom;
use rand_distr::{Distribution as _, StandardNormal};
use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

const IDX_IMAGES_MAGIC: u32 = 0x0000_0803;
const IDX_LABELS_MAGIC: u32 = 0x0000_0801;

/// Global scalar normalization statistics, kept so a held-out split can be
/// normalized with the statistics of the split a model was trained on.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct NormStats<F> {
    pub mean: F,
    pub std: F,
}

/// An immutable collection of images with optional class labels.
///
/// Images are stored row-major as `N × (C·H·W)`; `shape` records the
/// per-sample `(C, H, W)` layout.
#[derive(Debug, Clone)]
pub struct Dataset<F: Float> {
    images: Array2<F>,
    shape: (usize, usize, usize),
    labels: Option<Vec<usize>>,
    name: String,
    norm_stats: Option<NormStats<F>>,
}

impl<F: Float> Dataset<F> {
    /// Build a dataset, validating the label invariants: when labels are
    /// present every label lies in `[0, K)` and every class id below `K`
    /// occurs at least once.
    pub fn new(
        images: Array2<F>,
        shape: (usize, usize, usize),
        labels: Option<Vec<usize>>,
        name: impl Into<String>,
    ) -> Result<Self> {
        let name = name.into();
        let n = images.nrows();
        if n == 0 {
            return Err(Error::DegenerateData(format!("dataset '{name}' is empty")));
        }
        let (c, h, w) = shape;
        if c * h * w != images.ncols() {
            return Err(Error::ShapeMismatch(format!(
                "dataset '{name}': {c}x{h}x{w} != {} columns",
                images.ncols()
            )));
        }
        if let Some(ref labels) = labels {
            if labels.len() != n {
                return Err(Error::IdxCountMismatch {
                    images: n,
                    labels: labels.len(),
                });
            }
            let k = labels.iter().max().map_or(0, |m| m + 1);
            let mut seen = vec![false; k];
            for &l in labels {
                seen[l] = true;
            }
            if seen.iter().any(|s| !s) {
                return Err(Error::DegenerateData(format!(
                    "dataset '{name}': class ids must cover 0..{k} without gaps"
                )));
            }
        }
        Ok(Dataset {
            images,
            shape,
            labels,
            name,
            norm_stats: None,
        })
    }

    pub fn len(&self) -> usize {
        self.images.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn images(&self) -> &Array2<F> {
        &self.images
    }

    /// Per-sample `(C, H, W)` shape.
    pub fn shape(&self) -> (usize, usize, usize) {
        self.shape
    }

    pub fn labels(&self) -> Option<&[usize]> {
        self.labels.as_deref()
    }

    pub fn name(&self) -> &str {
        &self.name
    }

    /// The same images with labels dropped, e.g. to treat a labeled corpus
    /// as an unlabeled clustering target.
    pub fn without_labels(&self) -> Dataset<F> {
        Dataset {
            labels: None,
            ..self.clone()
        }
    }

    pub fn norm_stats(&self) -> Option<NormStats<F>> {
        self.norm_stats
    }

    /// Number of classes (labels are validated to be a gapless `0..K`).
    pub fn num_classes(&self) -> Option<usize> {
        self.labels
            .as_ref()
            .map(|l| l.iter().max().map_or(0, |m| m + 1))
    }

    /// Global scalar mean and population standard deviation over all pixels.
    pub fn pixel_stats(&self) -> NormStats<F> {
        let n = F::cast(self.images.len() as f64);
        let mean = self.images.iter().copied().sum::<F>() / n;
        let var = self
            .images
            .iter()
            .map(|&x| (x - mean) * (x - mean))
            .sum::<F>()
            / n;
        NormStats {
            mean,
            std: var.sqrt(),
        }
    }

    /// Normalize to zero global mean and unit global standard deviation,
    /// storing the statistics of *this* data so another split can reuse them.
    pub fn normalize(&self) -> Result<Dataset<F>> {
        if self.len() < 2 {
            return Err(Error::DegenerateData(format!(
                "dataset '{}': need at least 2 samples to normalize",
                self.name
            )));
        }
        let stats = self.pixel_stats();
        if stats.std <= F::zero() || !stats.std.is_finite() {
            return Err(Error::DegenerateData(format!(
                "dataset '{}': zero pixel variance",
                self.name
            )));
        }
        Ok(self.normalize_with(stats))
    }

    /// Apply externally supplied normalization statistics (e.g. the training
    /// split's) to this dataset.
    pub fn normalize_with(&self, stats: NormStats<F>) -> Dataset<F> {
        let images = self.images.mapv(|x| (x - stats.mean) / stats.std);
        Dataset {
            images,
            shape: self.shape,
            labels: self.labels.clone(),
            name: self.name.clone(),
            norm_stats: Some(stats),
        }
    }

    /// Rows whose class id is in `classes`, with labels remapped to the dense
    /// range `0..classes.len()` following the order given.
    pub fn subset_by_classes(&self, classes: &[usize]) -> Result<Dataset<F>> {
        let labels = self
            .labels
            .as_ref()
            .ok_or_else(|| Error::MissingLabels(self.name.clone()))?;
        let mut remap = std::collections::HashMap::new();
        for (new, &old) in classes.iter().enumerate() {
            if remap.insert(old, new).is_some() {
                return Err(Error::InvalidConfig(format!(
                    "duplicate class id {old} in subset request"
                )));
            }
        }
        let keep: Vec<usize> = (0..self.len())
            .filter(|&i| remap.contains_key(&labels[i]))
            .collect();
        if keep.is_empty() {
            return Err(Error::DegenerateData(format!(
                "dataset '{}': class subset {classes:?} selects no rows",
                self.name
            )));
        }
        let images = self.images.select(Axis(0), &keep);
        let new_labels: Vec<usize> = keep.iter().map(|&i| remap[&labels[i]]).collect();
        Dataset::new(
            images,
            self.shape,
            Some(new_labels),
            format!("{}[{} classes]", self.name, classes.len()),
        )
    }

    /// Split off the first `round(fraction·N)` rows of each class as one
    /// dataset and the rest as another. Deterministic; row order preserved.
    pub fn split_per_class(&self, fraction: f64) -> Result<(Dataset<F>, Dataset<F>)> {
        let labels = self
            .labels
            .as_ref()
            .ok_or_else(|| Error::MissingLabels(self.name.clone()))?;
        let k = self.num_classes().unwrap_or(0);
        let mut taken = vec![0usize; k];
        let mut want = vec![0usize; k];
        for &l in labels {
            want[l] += 1;
        }
        for w in &mut want {
            *w = ((*w as f64) * fraction).round() as usize;
        }
        let (mut first, mut second) = (Vec::new(), Vec::new());
        for (i, &l) in labels.iter().enumerate() {
            if taken[l] < want[l] {
                taken[l] += 1;
                first.push(i);
            } else {
                second.push(i);
            }
        }
        let make = |rows: &[usize], tag: &str| -> Result<Dataset<F>> {
            Dataset::new(
                self.images.select(Axis(0), rows),
                self.shape,
                Some(rows.iter().map(|&i| labels[i]).collect()),
                format!("{}[{tag}]", self.name),
            )
        };
        Ok((make(&first, "a")?, make(&second, "b")?))
    }
}

/// Specification of a synthetic isotropic-Gaussian blob dataset.
#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct BlobSpec {
    pub num_classes: usize,
    pub dim: usize,
    pub points_per_class: usize,
    pub class_std: f64,
    pub center_scale: f64,
    pub seed: u64,
}

impl BlobSpec {
    fn validate(&self) -> Result<()> {
        if self.num_classes < 2 {
            return Err(Error::InvalidConfig(format!(
                "blobs need at least 2 classes, got {}",
                self.num_classes
            )));
        }
        if self.dim < 1 {
            return Err(Error::InvalidConfig("blob dim must be >= 1".into()));
        }
        if self.points_per_class < 1 {
            return Err(Error::InvalidConfig(
                "blobs need at least 1 point per class".into(),
            ));
        }
        if self.class_std <= 0.0 {
            return Err(Error::InvalidConfig("blob class_std must be > 0".into()));
        }
        Ok(())
    }
}

/// Gaussian blobs: one seeded random center per class, drawn uniformly on the
/// sphere of radius `center_scale`, with isotropic class noise `class_std`.
/// Labels are attached. Bit-deterministic given the spec.
pub fn make_blobs<F: Float>(spec: &BlobSpec) -> Result<Dataset<F>> {
    spec.validate()?;
    let mut rng = seed::rng(seed::mix(spec.seed, &[seed::tag("blob-centers")]));
    let normal = StandardNormal;
    let mut centers = Vec::with_capacity(spec.num_classes);
    for _ in 0..spec.num_classes {
        let mut c: Vec<f64> = (0..spec.dim).map(|_| normal.sample(&mut rng)).collect();
        let norm = c.iter().map(|x| x * x).sum::<f64>().sqrt().max(1e-12);
        for x in &mut c {
            *x *= spec.center_scale / norm;
        }
        centers.push(c);
    }

    let n = spec.num_classes * spec.points_per_class;
    let mut rng = seed::rng(seed::mix(spec.seed, &[seed::tag("blob-points")]));
    let mut images = Array2::<F>::zeros((n, spec.dim));
    let mut labels = Vec::with_capacity(n);
    let mut row = 0;
    for (class, center) in centers.iter().enumerate() {
        for _ in 0..spec.points_per_class {
            for d in 0..spec.dim {
                let noise: f64 = normal.sample(&mut rng);
                images[(row, d)] = F::cast(center[d] + spec.class_std * noise);
            }
            labels.push(class);
            row += 1;
        }
    }
    Dataset::new(
        images,
        (1, 1, spec.dim),
        Some(labels),
        format!("blobs-k{}-d{}", spec.num_classes, spec.dim),
    )
}

fn read_u32(reader: &mut impl Read, path: &str) -> Result<u32> {
    reader
        .read_u32::<BigEndian>()
        .map_err(|e| Error::io(path, e))
}

fn read_payload(reader: &mut impl Read, expected: usize, path: &str) -> Result<Vec<u8>> {
    let mut buf = Vec::with_capacity(expected);
    reader
        .read_to_end(&mut buf)
        .map_err(|e| Error::io(path, e))?;
    if buf.len() != expected {
        return Err(Error::IdxPayloadMismatch {
            path: path.to_string(),
            expected,
            found: buf.len(),
        });
    }
    Ok(buf)
}

/// Load an IDX image file (and optionally its label file) into a dataset.
/// Pixel bytes are scaled to `[0, 1]`; normalization is a separate step.
pub fn load_idx<F: Float>(
    images_path: impl AsRef<Path>,
    labels_path: Option<&Path>,
) -> Result<Dataset<F>> {
    let img_path = images_path.as_ref();
    let img_name = img_path.display().to_string();
    let file = File::open(img_path).map_err(|e| Error::io(&img_name, e))?;
    let mut reader = BufReader::new(file);

    let magic = read_u32(&mut reader, &img_name)?;
    if magic != IDX_IMAGES_MAGIC {
        return Err(Error::IdxBadMagic {
            path: img_name,
            expected: IDX_IMAGES_MAGIC,
            found: magic,
        });
    }
    let count = read_u32(&mut reader, &img_name)? as usize;
    let rows = read_u32(&mut reader, &img_name)? as usize;
    let cols = read_u32(&mut reader, &img_name)? as usize;
    let payload = read_payload(&mut reader, count * rows * cols, &img_name)?;

    // Divide rather than multiply by a reciprocal: b/255 is the exact
    // rounding of the true value, so it agrees bitwise with anything else
    // computing the textbook expression.
    let denom = F::cast(255.0);
    let images = Array2::from_shape_vec(
        (count, rows * cols),
        payload
            .iter()
            .map(|&b| F::cast(f64::from(b)) / denom)
            .collect(),
    )
    .expect("payload length checked above");

    let labels = match labels_path {
        None => None,
        Some(lbl_path) => {
            let lbl_name = lbl_path.display().to_string();
            let file = File::open(lbl_path).map_err(|e| Error::io(&lbl_name, e))?;
            let mut reader = BufReader::new(file);
            let magic = read_u32(&mut reader, &lbl_name)?;
            if magic != IDX_LABELS_MAGIC {
                return Err(Error::IdxBadMagic {
                    path: lbl_name,
                    expected: IDX_LABELS_MAGIC,
                    found: magic,
                });
            }
            let lbl_count = read_u32(&mut reader, &lbl_name)? as usize;
            if lbl_count != count {
                return Err(Error::IdxCountMismatch {
                    images: count,
                    labels: lbl_count,
                });
            }
            let payload = read_payload(&mut reader, lbl_count, &lbl_name)?;
            Some(payload.into_iter().map(usize::from).collect())
        }
    };

    let stem = img_path
        .file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_else(|| "idx".to_string());
    Dataset::new(images, (1, rows, cols), labels, stem)
}

/// Write a dataset back to IDX files. Pixels must be in `[0, 1]` (the raw
/// scale produced by [`load_idx`]); each is mapped to `round(x·255)`, so a
/// load → save → load round trip reproduces pixel bytes exactly.
pub fn save_idx<F: Float>(
    ds: &Dataset<F>,
    images_path: impl AsRef<Path>,
    labels_path: Option<&Path>,
) -> Result<()> {
    let (c, h, w) = ds.shape();
    if c != 1 {
        return Err(Error::InvalidConfig(
            "IDX image files hold single-channel data".into(),
        ));
    }
    let img_path = images_path.as_ref();
    let img_name = img_path.display().to_string();
    let file = File::create(img_path).map_err(|e| Error::io(&img_name, e))?;
    let mut out = BufWriter::new(file);
    out.write_u32::<BigEndian>(IDX_IMAGES_MAGIC)
        .and_then(|()| out.write_u32::<BigEndian>(ds.len() as u32))
        .and_then(|()| out.write_u32::<BigEndian>(h as u32))
        .and_then(|()| out.write_u32::<BigEndian>(w as u32))
        .map_err(|e| Error::io(&img_name, e))?;
    for &x in ds.images().iter() {
        let v = x.to_f64c();
        if !(0.0..=1.0).contains(&v) {
            return Err(Error::InvalidConfig(format!(
                "pixel {v} outside [0,1]; only raw-scale datasets can be saved as IDX"
            )));
        }
        out.write_u8((v * 255.0).round() as u8)
            .map_err(|e| Error::io(&img_name, e))?;
    }
    out.flush().map_err(|e| Error::io(&img_name, e))?;

    if let Some(lbl_path) = labels_path {
        let labels = ds
            .labels()
            .ok_or_else(|| Error::MissingLabels(ds.name().to_string()))?;
        let lbl_name = lbl_path.display().to_string();
        let file = File::create(lbl_path).map_err(|e| Error::io(&lbl_name, e))?;
        let mut out = BufWriter::new(file);
        out.write_u32::<BigEndian>(IDX_LABELS_MAGIC)
            .and_then(|()| out.write_u32::<BigEndian>(labels.len() as u32))
            .map_err(|e| Error::io(&lbl_name, e))?;
        for &l in labels {
            out.write_u8(l as u8).map_err(|e| Error::io(&lbl_name, e))?;
        }
        out.flush().map_err(|e| Error::io(&lbl_name, e))?;
    }
    Ok(())
}

/// A loadable description of a dataset, suitable for config files and
/// checkpoint metadata.
#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum DatasetSpec {
    Blobs(BlobSpec),
    Idx {
        images: std::path::PathBuf,
        labels: Option<std::path::PathBuf>,
    },
}

impl DatasetSpec {
    pub fn load<F: Float>(&self) -> Result<Dataset<F>> {
        match self {
            DatasetSpec::Blobs(spec) => make_blobs(spec),
            DatasetSpec::Idx { images, labels } => load_idx(images, labels.as_deref()),
        }
    }
}

/// One shuffled mini-batch: dataset row ids plus their images and labels.
#[derive(Debug, Clone)]
pub struct Batch<F: Float> {
    pub indices: Vec<usize>,
    pub images: Array2<F>,
    pub labels: Option<Vec<usize>>,
}

impl<F: Float> Batch<F> {
    pub fn len(&self) -> usize {
        self.indices.len()
    }

    pub fn is_empty(&self) -> bool {
        self.indices.is_empty()
    }

    /// Stable fingerprint of the batch composition, used to derive per-batch
    /// noise seeds.
    pub fn fingerprint(&self) -> u64 {
        let words: Vec<u64> = self.indices.iter().map(|&i| i as u64).collect();
        seed::mix(seed::tag("batch"), &words)
    }
}

/// Iterate one epoch of shuffled mini-batches. The permutation is a fresh
/// deterministic function of `(seed, epoch)`; the final batch may be partial,
/// so `N = 60000, batch_size = 256` yields 235 batches.
pub fn batch_iter<'a, F: Float>(
    ds: &'a Dataset<F>,
    batch_size: usize,
    seed_value: u64,
    epoch: u64,
) -> impl Iterator<Item = Batch<F>> + 'a {
    assert!(batch_size >= 2, "batch_size must be >= 2");
    let mut order: Vec<usize> = (0..ds.len()).collect();
    let mut rng = seed::rng(seed::mix(seed_value, &[seed::tag("shuffle"), epoch]));
    order.shuffle(&mut rng);
    let n = ds.len();
    (0..n.div_ceil(batch_size)).map(move |b| {
        let lo = b * batch_size;
        let hi = (lo + batch_size).min(n);
        let indices = order[lo..hi].to_vec();
        let images = ds.images().select(Axis(0), &indices);
        let labels = ds
            .labels()
            .map(|l| indices.iter().map(|&i| l[i]).collect());
        Batch {
            indices,
            images,
            labels,
        }
    })
}
