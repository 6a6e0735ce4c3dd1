//! IDX ingestion and class-incremental task streams.

use std::collections::BTreeSet;
use std::fmt;
use std::fs;
use std::io::{Read, Write};
use std::path::{Path, PathBuf};

use flate2::read::GzDecoder;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const IMAGE_MAGIC: u32 = 0x0000_0803;
pub const LABEL_MAGIC: u32 = 0x0000_0801;

/// Row-major feature vectors with every value in `[0, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct ImageSet {
    samples: Vec<f32>,
    count: usize,
    dim: usize,
    /// `(rows, cols)` when the samples are images.
    shape: Option<(usize, usize)>,
}

impl ImageSet {
    pub fn new(samples: Vec<f32>, dim: usize) -> Result<Self> {
        if dim == 0 {
            return Err(Error::DimensionMismatch {
                expected: 1,
                got: 0,
            });
        }
        if !samples.len().is_multiple_of(dim) {
            return Err(Error::DimensionMismatch {
                expected: dim,
                got: samples.len() % dim,
            });
        }
        if let Some(bad) = samples.iter().find(|v| !(0.0..=1.0).contains(*v)) {
            return Err(Error::InvalidConfig(format!(
                "feature value {bad} outside [0, 1]"
            )));
        }
        let count = samples.len() / dim;
        Ok(Self {
            samples,
            count,
            dim,
            shape: None,
        })
    }

    /// Builds a set from rows, clamping nothing: callers must stay in `[0, 1]`.
    pub fn from_rows<R: AsRef<[f32]>>(rows: &[R], dim: usize) -> Result<Self> {
        let mut samples = Vec::with_capacity(rows.len() * dim);
        for r in rows {
            let r = r.as_ref();
            if r.len() != dim {
                return Err(Error::DimensionMismatch {
                    expected: dim,
                    got: r.len(),
                });
            }
            samples.extend_from_slice(r);
        }
        Self::new(samples, dim)
    }

    pub fn empty(dim: usize) -> Self {
        Self {
            samples: Vec::new(),
            count: 0,
            dim,
            shape: None,
        }
    }

    pub fn with_shape(mut self, rows: usize, cols: usize) -> Result<Self> {
        if rows * cols != self.dim {
            return Err(Error::DimensionMismatch {
                expected: self.dim,
                got: rows * cols,
            });
        }
        self.shape = Some((rows, cols));
        Ok(self)
    }

    pub fn count(&self) -> usize {
        self.count
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn is_empty(&self) -> bool {
        self.count == 0
    }

    pub fn shape(&self) -> Option<(usize, usize)> {
        self.shape
    }

    pub fn as_slice(&self) -> &[f32] {
        &self.samples
    }

    pub fn row(&self, i: usize) -> &[f32] {
        &self.samples[i * self.dim..(i + 1) * self.dim]
    }

    pub fn rows(&self) -> std::slice::ChunksExact<'_, f32> {
        self.samples.chunks_exact(self.dim)
    }

    pub fn select(&self, indices: &[usize]) -> ImageSet {
        let mut samples = Vec::with_capacity(indices.len() * self.dim);
        for &i in indices {
            samples.extend_from_slice(self.row(i));
        }
        ImageSet {
            samples,
            count: indices.len(),
            dim: self.dim,
            shape: self.shape,
        }
    }

    pub fn append(&mut self, other: &ImageSet) -> Result<()> {
        if other.dim != self.dim {
            return Err(Error::DimensionMismatch {
                expected: self.dim,
                got: other.dim,
            });
        }
        self.samples.extend_from_slice(&other.samples);
        self.count += other.count;
        if self.shape.is_none() {
            self.shape = other.shape;
        }
        Ok(())
    }

    /// Swaps rows and columns of every image (EMNIST files are stored transposed).
    pub fn transposed(&self) -> Result<ImageSet> {
        let (rows, cols) = self
            .shape
            .ok_or_else(|| Error::InvalidConfig("transpose needs image rows/cols".to_string()))?;
        let mut samples = vec![0.0; self.samples.len()];
        for (src, dst) in self
            .samples
            .chunks_exact(self.dim)
            .zip(samples.chunks_exact_mut(self.dim))
        {
            for r in 0..rows {
                for c in 0..cols {
                    dst[c * rows + r] = src[r * cols + c];
                }
            }
        }
        Ok(ImageSet {
            samples,
            count: self.count,
            dim: self.dim,
            shape: Some((cols, rows)),
        })
    }

    /// Per-dimension mean over all samples.
    pub fn mean(&self) -> Vec<f64> {
        let mut mean = vec![0.0f64; self.dim];
        for row in self.rows() {
            for (m, &v) in mean.iter_mut().zip(row) {
                *m += v as f64;
            }
        }
        let n = self.count.max(1) as f64;
        mean.iter_mut().for_each(|m| *m /= n);
        mean
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LabelSet {
    labels: Vec<usize>,
    num_classes: usize,
}

impl LabelSet {
    /// `num_classes` of `None` means `max(label) + 1`.
    pub fn new(labels: Vec<usize>, num_classes: Option<usize>) -> Result<Self> {
        let needed = labels.iter().max().map_or(0, |m| m + 1);
        let num_classes = num_classes.unwrap_or(needed);
        if needed > num_classes {
            return Err(Error::UnknownClass {
                class: needed - 1,
                num_classes,
            });
        }
        Ok(Self {
            labels,
            num_classes,
        })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn num_classes(&self) -> usize {
        self.num_classes
    }

    pub fn as_slice(&self) -> &[usize] {
        &self.labels
    }

    pub fn get(&self, i: usize) -> usize {
        self.labels[i]
    }

    pub fn select(&self, indices: &[usize]) -> LabelSet {
        LabelSet {
            labels: indices.iter().map(|&i| self.labels[i]).collect(),
            num_classes: self.num_classes,
        }
    }

    pub fn append(&mut self, other: &LabelSet) {
        self.labels.extend_from_slice(&other.labels);
        self.num_classes = self.num_classes.max(other.num_classes);
    }

    pub fn distinct(&self) -> BTreeSet<usize> {
        self.labels.iter().copied().collect()
    }
}

/// Images with aligned labels.
#[derive(Debug, Clone, PartialEq)]
pub struct Labeled {
    pub images: ImageSet,
    pub labels: LabelSet,
}

impl Labeled {
    pub fn new(images: ImageSet, labels: LabelSet) -> Result<Self> {
        if images.count() != labels.len() {
            return Err(Error::LengthMismatch {
                left: images.count(),
                right: labels.len(),
            });
        }
        Ok(Self { images, labels })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn select(&self, indices: &[usize]) -> Labeled {
        Labeled {
            images: self.images.select(indices),
            labels: self.labels.select(indices),
        }
    }

    pub fn append(&mut self, other: &Labeled) -> Result<()> {
        self.images.append(&other.images)?;
        self.labels.append(&other.labels);
        Ok(())
    }

    /// Samples whose label is in `classes`, in original order.
    pub fn restrict(&self, classes: &BTreeSet<usize>) -> Labeled {
        let idx: Vec<usize> = (0..self.len())
            .filter(|&i| classes.contains(&self.labels.get(i)))
            .collect();
        self.select(&idx)
    }

    /// Deterministic random subset of `ceil(fraction * len)` samples, order kept.
    pub fn subsample(&self, fraction: f64, seed: u64) -> Labeled {
        if fraction >= 1.0 {
            return self.clone();
        }
        let keep = ((self.len() as f64 * fraction).ceil() as usize).min(self.len());
        let mut idx: Vec<usize> = (0..self.len()).collect();
        idx.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
        idx.truncate(keep);
        idx.sort_unstable();
        self.select(&idx)
    }
}

fn read_maybe_gz(path: &Path) -> Result<Vec<u8>> {
    let raw = fs::read(path).map_err(|e| Error::io(path, e))?;
    if raw.starts_with(&[0x1f, 0x8b]) {
        let mut out = Vec::new();
        GzDecoder::new(raw.as_slice())
            .read_to_end(&mut out)
            .map_err(|e| Error::io(path, e))?;
        Ok(out)
    } else {
        Ok(raw)
    }
}

fn be_u32(bytes: &[u8], at: usize, path: &Path) -> Result<u32> {
    bytes
        .get(at..at + 4)
        .map(|b| u32::from_be_bytes([b[0], b[1], b[2], b[3]]))
        .ok_or_else(|| Error::TruncatedPayload {
            path: path.to_path_buf(),
            expected: at + 4,
            found: bytes.len(),
        })
}

fn check_magic(bytes: &[u8], expected: u32, path: &Path) -> Result<()> {
    let found = be_u32(bytes, 0, path)?;
    if found != expected {
        return Err(Error::WrongMagic {
            path: path.to_path_buf(),
            found,
            expected,
        });
    }
    Ok(())
}

pub fn parse_idx_images(bytes: &[u8], path: &Path) -> Result<ImageSet> {
    check_magic(bytes, IMAGE_MAGIC, path)?;
    let count = be_u32(bytes, 4, path)? as usize;
    let rows = be_u32(bytes, 8, path)? as usize;
    let cols = be_u32(bytes, 12, path)? as usize;
    let payload = &bytes[16..];
    let expected = count * rows * cols;
    if payload.len() != expected {
        return Err(Error::TruncatedPayload {
            path: path.to_path_buf(),
            expected,
            found: payload.len(),
        });
    }
    let samples = payload.iter().map(|&b| b as f32 / 255.0).collect();
    Ok(ImageSet {
        samples,
        count,
        dim: rows * cols,
        shape: Some((rows, cols)),
    })
}

pub fn parse_idx_labels(bytes: &[u8], path: &Path) -> Result<LabelSet> {
    check_magic(bytes, LABEL_MAGIC, path)?;
    let count = be_u32(bytes, 4, path)? as usize;
    let payload = &bytes[8..];
    if payload.len() != count {
        return Err(Error::TruncatedPayload {
            path: path.to_path_buf(),
            expected: count,
            found: payload.len(),
        });
    }
    LabelSet::new(payload.iter().map(|&b| b as usize).collect(), None)
}

pub fn load_idx_images(path: impl AsRef<Path>) -> Result<ImageSet> {
    let path = path.as_ref();
    parse_idx_images(&read_maybe_gz(path)?, path)
}

pub fn load_idx_labels(path: impl AsRef<Path>) -> Result<LabelSet> {
    let path = path.as_ref();
    parse_idx_labels(&read_maybe_gz(path)?, path)
}

/// IDX bytes for an image set; pixels are `round(v * 255)`.
pub fn encode_idx_images(images: &ImageSet) -> Vec<u8> {
    let (rows, cols) = images.shape.unwrap_or((1, images.dim));
    let mut out = Vec::with_capacity(16 + images.samples.len());
    out.extend_from_slice(&IMAGE_MAGIC.to_be_bytes());
    for v in [images.count, rows, cols] {
        out.extend_from_slice(&(v as u32).to_be_bytes());
    }
    out.extend(
        images
            .samples
            .iter()
            .map(|&v| (v * 255.0).round().clamp(0.0, 255.0) as u8),
    );
    out
}

pub fn encode_idx_labels(labels: &LabelSet) -> Vec<u8> {
    let mut out = Vec::with_capacity(8 + labels.len());
    out.extend_from_slice(&LABEL_MAGIC.to_be_bytes());
    out.extend_from_slice(&(labels.len() as u32).to_be_bytes());
    out.extend(labels.labels.iter().map(|&l| l as u8));
    out
}

pub fn write_idx_images(path: impl AsRef<Path>, images: &ImageSet) -> Result<()> {
    let path = path.as_ref();
    write_atomic(path, &encode_idx_images(images))
}

pub fn write_idx_labels(path: impl AsRef<Path>, labels: &LabelSet) -> Result<()> {
    let path = path.as_ref();
    write_atomic(path, &encode_idx_labels(labels))
}

pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let tmp = path.with_extension("tmp~");
    let mut f = fs::File::create(&tmp).map_err(|e| Error::io(&tmp, e))?;
    f.write_all(bytes).map_err(|e| Error::io(&tmp, e))?;
    f.sync_all().map_err(|e| Error::io(&tmp, e))?;
    fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum DatasetKind {
    Mnist,
    FashionMnist,
    EmnistBalanced,
}

impl DatasetKind {
    fn file_stems(self) -> [&'static str; 4] {
        match self {
            DatasetKind::Mnist | DatasetKind::FashionMnist => [
                "train-images-idx3-ubyte",
                "train-labels-idx1-ubyte",
                "t10k-images-idx3-ubyte",
                "t10k-labels-idx1-ubyte",
            ],
            DatasetKind::EmnistBalanced => [
                "emnist-balanced-train-images-idx3-ubyte",
                "emnist-balanced-train-labels-idx1-ubyte",
                "emnist-balanced-test-images-idx3-ubyte",
                "emnist-balanced-test-labels-idx1-ubyte",
            ],
        }
    }

    fn transposed(self) -> bool {
        matches!(self, DatasetKind::EmnistBalanced)
    }
}

impl fmt::Display for DatasetKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            DatasetKind::Mnist => "mnist",
            DatasetKind::FashionMnist => "fashion-mnist",
            DatasetKind::EmnistBalanced => "emnist-balanced",
        })
    }
}

/// A dataset with its published train/test split.
#[derive(Debug, Clone)]
pub struct Dataset {
    pub kind: DatasetKind,
    pub train: Labeled,
    pub test: Labeled,
}

impl Dataset {
    /// Resolves `<stem>` or `<stem>.gz` inside `dir` for each of the four files.
    pub fn locate(kind: DatasetKind, dir: &Path) -> Result<[PathBuf; 4]> {
        let stems = kind.file_stems();
        let mut out: [PathBuf; 4] = Default::default();
        for (slot, stem) in out.iter_mut().zip(stems) {
            let plain = dir.join(stem);
            let gz = dir.join(format!("{stem}.gz"));
            *slot = if plain.is_file() {
                plain
            } else if gz.is_file() {
                gz
            } else {
                return Err(Error::io(
                    plain,
                    std::io::Error::new(std::io::ErrorKind::NotFound, "dataset file not found"),
                ));
            };
        }
        Ok(out)
    }

    pub fn load(kind: DatasetKind, dir: impl AsRef<Path>) -> Result<Self> {
        let [tr_x, tr_y, te_x, te_y] = Self::locate(kind, dir.as_ref())?;
        let fix = |set: ImageSet| -> Result<ImageSet> {
            if kind.transposed() {
                set.transposed()
            } else {
                Ok(set)
            }
        };
        let train_images = fix(load_idx_images(&tr_x)?)?;
        let test_images = fix(load_idx_images(&te_x)?)?;
        let train_labels = load_idx_labels(&tr_y)?;
        let test_labels = load_idx_labels(&te_y)?;
        let classes = train_labels.num_classes().max(test_labels.num_classes());
        let train = Labeled::new(
            train_images,
            LabelSet::new(train_labels.labels, Some(classes))?,
        )?;
        let test = Labeled::new(
            test_images,
            LabelSet::new(test_labels.labels, Some(classes))?,
        )?;
        Ok(Self { kind, train, test })
    }

    pub fn num_classes(&self) -> usize {
        self.train.labels.num_classes()
    }
}

/// Ordered list of disjoint class sets, one per sub-task.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CilProblem {
    pub name: String,
    pub task_class_lists: Vec<Vec<usize>>,
}

const BUILTIN_PROBLEMS: &[&str] = &[
    "D5-1^5A", "D5-1^5B", "D7-1^3A", "D7-1^3B", "D20-1^5A", "D20-1^5B",
];

impl CilProblem {
    pub fn builtin_names() -> &'static [&'static str] {
        BUILTIN_PROBLEMS
    }

    pub fn new(name: impl Into<String>, task_class_lists: Vec<Vec<usize>>) -> Result<Self> {
        if task_class_lists.len() < 2 {
            return Err(Error::TooFewTasks(task_class_lists.len()));
        }
        let mut seen = BTreeSet::new();
        for (i, classes) in task_class_lists.iter().enumerate() {
            if classes.is_empty() {
                return Err(Error::EmptyTask(i));
            }
            for &c in classes {
                if !seen.insert(c) {
                    return Err(Error::OverlappingClasses(c));
                }
            }
        }
        Ok(Self {
            name: name.into(),
            task_class_lists,
        })
    }

    /// A built-in problem name or an explicit partition such as `0,1,2|3|4`.
    pub fn by_name(name: &str) -> Result<Self> {
        let range = |a: usize, b: usize| (a..=b).collect::<Vec<_>>();
        let tail = |first: Vec<usize>, rest: &[usize]| {
            let mut v = vec![first];
            v.extend(rest.iter().map(|&c| vec![c]));
            v
        };
        let lists = match name {
            "D5-1^5A" => tail(range(0, 4), &[5, 6, 7, 8, 9]),
            "D5-1^5B" => tail(range(5, 9), &[0, 1, 2, 3, 4]),
            "D7-1^3A" => tail(range(0, 6), &[7, 8, 9]),
            "D7-1^3B" => tail(range(3, 9), &[0, 1, 2]),
            "D20-1^5A" => tail(range(0, 19), &[20, 21, 22, 23, 24]),
            "D20-1^5B" => tail(range(5, 24), &[0, 1, 2, 3, 4]),
            other if other.contains(|c: char| c.is_ascii_digit()) && !other.starts_with('D') => {
                return Self::parse_partition(other);
            }
            other => {
                return Err(Error::UnknownProblem {
                    name: other.to_string(),
                    valid: format!(
                        "{} or an explicit partition like 0,1,2|3|4",
                        BUILTIN_PROBLEMS.join(", ")
                    ),
                })
            }
        };
        Self::new(name, lists)
    }

    fn parse_partition(spec: &str) -> Result<Self> {
        let mut lists = Vec::new();
        for part in spec.split('|') {
            let mut classes = Vec::new();
            for tok in part.split(',').map(str::trim).filter(|t| !t.is_empty()) {
                if let Some((a, b)) = tok.split_once('-') {
                    let a: usize = parse_class(a)?;
                    let b: usize = parse_class(b)?;
                    classes.extend(a..=b);
                } else {
                    classes.push(parse_class(tok)?);
                }
            }
            lists.push(classes);
        }
        Self::new(spec, lists)
    }

    pub fn num_tasks(&self) -> usize {
        self.task_class_lists.len()
    }

    pub fn all_classes(&self) -> BTreeSet<usize> {
        self.task_class_lists.iter().flatten().copied().collect()
    }
}

fn parse_class(tok: &str) -> Result<usize> {
    tok.trim()
        .parse()
        .map_err(|_| Error::InvalidConfig(format!("bad class index {tok:?}")))
}

/// Per-task training data, matching test splits, and the union test set.
#[derive(Debug, Clone)]
pub struct TaskStream {
    pub problem: CilProblem,
    pub tasks: Vec<Labeled>,
    pub test_tasks: Vec<Labeled>,
    pub baseline_test: Labeled,
}

impl TaskStream {
    pub fn build(problem: &CilProblem, dataset: &Dataset) -> Result<Self> {
        let num_classes = dataset.num_classes();
        for &c in problem.task_class_lists.iter().flatten() {
            if c >= num_classes {
                return Err(Error::UnknownClass {
                    class: c,
                    num_classes,
                });
            }
        }
        let mut tasks = Vec::new();
        let mut test_tasks = Vec::new();
        for (i, classes) in problem.task_class_lists.iter().enumerate() {
            let set: BTreeSet<usize> = classes.iter().copied().collect();
            let train = dataset.train.restrict(&set);
            if train.is_empty() {
                return Err(Error::EmptyTask(i));
            }
            tasks.push(train);
            test_tasks.push(dataset.test.restrict(&set));
        }
        let baseline_test = dataset.test.restrict(&problem.all_classes());
        Ok(Self {
            problem: problem.clone(),
            tasks,
            test_tasks,
            baseline_test,
        })
    }

    pub fn num_tasks(&self) -> usize {
        self.tasks.len()
    }

    pub fn num_classes(&self) -> usize {
        self.tasks[0].labels.num_classes()
    }

    pub fn dim(&self) -> usize {
        self.tasks[0].images.dim()
    }

    /// Union of all training tasks (joint training data).
    pub fn joint_train(&self) -> Result<Labeled> {
        let mut all = self.tasks[0].clone();
        for t in &self.tasks[1..] {
            all.append(t)?;
        }
        Ok(all)
    }

    /// Keeps a deterministic fraction of every training task; test sets stay whole.
    pub fn subsample_train(&self, fraction: f64, seed: u64) -> TaskStream {
        let tasks = self
            .tasks
            .iter()
            .enumerate()
            .map(|(i, t)| t.subsample(fraction, seed.wrapping_add(i as u64)))
            .collect();
        TaskStream {
            problem: self.problem.clone(),
            tasks,
            test_tasks: self.test_tasks.clone(),
            baseline_test: self.baseline_test.clone(),
        }
    }
}

pub fn make_cil_problem(name: &str, dataset: &Dataset) -> Result<TaskStream> {
    TaskStream::build(&CilProblem::by_name(name)?, dataset)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny_dataset() -> Dataset {
        // 12 samples of dim 2, labels 0..5 twice (train) and once (test).
        let labels: Vec<usize> = (0..12).map(|i| i % 6).collect();
        let pix: Vec<f32> = (0..24).map(|i| (i % 7) as f32 / 7.0).collect();
        let train = Labeled::new(
            ImageSet::new(pix, 2).unwrap(),
            LabelSet::new(labels, Some(6)).unwrap(),
        )
        .unwrap();
        let test = train.select(&[0, 1, 2, 3, 4, 5]);
        Dataset {
            kind: DatasetKind::Mnist,
            train,
            test,
        }
    }

    #[test]
    fn image_magic_on_label_file_is_rejected() {
        let labels = LabelSet::new(vec![1, 2, 3], None).unwrap();
        let bytes = encode_idx_labels(&labels);
        let err = parse_idx_images(&bytes, Path::new("x")).unwrap_err();
        assert!(matches!(err, Error::WrongMagic { found: 0x801, .. }));
    }

    #[test]
    fn label_header_without_payload_is_truncated() {
        let mut bytes = LABEL_MAGIC.to_be_bytes().to_vec();
        bytes.extend_from_slice(&10u32.to_be_bytes());
        let err = parse_idx_labels(&bytes, Path::new("x")).unwrap_err();
        assert!(matches!(
            err,
            Error::TruncatedPayload {
                expected: 10,
                found: 0,
                ..
            }
        ));
    }

    #[test]
    fn short_header_is_truncated_not_panic() {
        let err = parse_idx_images(&[0, 0, 8], Path::new("x")).unwrap_err();
        assert!(matches!(err, Error::TruncatedPayload { .. }));
    }

    #[test]
    fn pixels_scale_to_unit_interval() {
        let mut bytes = IMAGE_MAGIC.to_be_bytes().to_vec();
        for v in [1u32, 1, 3] {
            bytes.extend_from_slice(&v.to_be_bytes());
        }
        bytes.extend_from_slice(&[0, 128, 255]);
        let set = parse_idx_images(&bytes, Path::new("x")).unwrap();
        assert_eq!(set.count(), 1);
        assert_eq!(set.dim(), 3);
        assert_eq!(set.row(0), &[0.0, 128.0 / 255.0, 1.0]);
    }

    #[test]
    fn gzip_input_is_detected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("l.gz");
        let labels = LabelSet::new(vec![3, 1, 4, 1, 5], None).unwrap();
        let mut enc = flate2::write::GzEncoder::new(Vec::new(), flate2::Compression::fast());
        enc.write_all(&encode_idx_labels(&labels)).unwrap();
        fs::write(&path, enc.finish().unwrap()).unwrap();
        let back = load_idx_labels(&path).unwrap();
        assert_eq!(back, labels);
        assert_eq!(back.num_classes(), 6);
    }

    #[test]
    fn missing_file_is_io_failure() {
        let err = load_idx_images("/nonexistent/file").unwrap_err();
        assert!(matches!(err, Error::IoFailure { .. }));
    }

    #[test]
    fn transpose_swaps_axes() {
        let set = ImageSet::new(vec![0.0, 0.1, 0.2, 0.3, 0.4, 0.5], 6)
            .unwrap()
            .with_shape(2, 3)
            .unwrap();
        let t = set.transposed().unwrap();
        assert_eq!(t.shape(), Some((3, 2)));
        assert_eq!(t.row(0), &[0.0, 0.3, 0.1, 0.4, 0.2, 0.5]);
        assert_eq!(t.transposed().unwrap().row(0), set.row(0));
    }

    #[test]
    fn builtin_problems_match_table() {
        let p = CilProblem::by_name("D5-1^5A").unwrap();
        assert_eq!(
            p.task_class_lists,
            vec![
                vec![0, 1, 2, 3, 4],
                vec![5],
                vec![6],
                vec![7],
                vec![8],
                vec![9]
            ]
        );
        let p = CilProblem::by_name("D20-1^5B").unwrap();
        assert_eq!(p.task_class_lists[0], (5..=24).collect::<Vec<_>>());
        assert_eq!(
            &p.task_class_lists[1..],
            &[vec![0], vec![1], vec![2], vec![3], vec![4]]
        );
        let p = CilProblem::by_name("D7-1^3B").unwrap();
        assert_eq!(p.task_class_lists[0], (3..=9).collect::<Vec<_>>());
        assert_eq!(p.num_tasks(), 4);
    }

    #[test]
    fn overlapping_partition_rejected() {
        let err = CilProblem::by_name("0,1|1,2").unwrap_err();
        assert!(matches!(err, Error::OverlappingClasses(1)));
    }

    #[test]
    fn unknown_name_lists_valid_names() {
        let err = CilProblem::by_name("D9-1").unwrap_err();
        assert!(err.to_string().contains("D5-1^5A"));
    }

    #[test]
    fn partition_ranges_parse() {
        let p = CilProblem::by_name("0-2|5").unwrap();
        assert_eq!(p.task_class_lists, vec![vec![0, 1, 2], vec![5]]);
    }

    #[test]
    fn stream_tasks_hold_only_their_classes() {
        let ds = tiny_dataset();
        let p = CilProblem::new("t", vec![vec![0, 1], vec![2], vec![4, 5]]).unwrap();
        let s = TaskStream::build(&p, &ds).unwrap();
        for (task, classes) in s.tasks.iter().zip(&p.task_class_lists) {
            assert!(task.labels.as_slice().iter().all(|c| classes.contains(c)));
        }
        let total: usize = s.tasks.iter().map(Labeled::len).sum();
        assert_eq!(total, 10);
        let test_total: usize = s.test_tasks.iter().map(Labeled::len).sum();
        assert_eq!(s.baseline_test.len(), test_total);
    }

    #[test]
    fn unknown_class_rejected_by_stream() {
        let ds = tiny_dataset();
        let p = CilProblem::by_name("D20-1^5A").unwrap();
        assert!(matches!(
            TaskStream::build(&p, &ds),
            Err(Error::UnknownClass { .. })
        ));
    }

    #[test]
    fn subsample_is_deterministic() {
        let ds = tiny_dataset();
        let a = ds.train.subsample(0.5, 7);
        let b = ds.train.subsample(0.5, 7);
        assert_eq!(a, b);
        assert_eq!(a.len(), 6);
    }
}
