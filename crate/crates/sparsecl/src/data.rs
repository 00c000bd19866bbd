//! MNIST ingestion from raw IDX files (optionally gzip-compressed) and
//! construction of the three evaluation regimes: 5-task Split-MNIST,
//! i.i.d. MNIST, and N-task Permuted MNIST, with deterministic shuffling
//! and batching.

use std::fs::File;
use std::io::{BufReader, Read};
use std::path::{Path, PathBuf};

use crate::matrix::Matrix2D;
use crate::rng::RngStream;

pub const IMAGE_SIDE: usize = 28;
pub const IMAGE_PIXELS: usize = IMAGE_SIDE * IMAGE_SIDE;
pub const NUM_CLASSES: usize = 10;
pub const DEFAULT_BATCH_SIZE: usize = 64;

/// Environment variable holding the default MNIST directory.
pub const DATA_DIR_ENV: &str = "SPARSECL_DATA_DIR";

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Split {
    Train,
    Test,
}

/// A loaded MNIST split: images scaled into `[0, 1]`, one example per row.
#[derive(Debug, Clone)]
pub struct Dataset {
    pub images: Matrix2D,
    pub labels: Vec<u8>,
    pub split: Split,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }
}

#[derive(Debug, thiserror::Error)]
pub enum DataError {
    #[error("cannot open {path}: {source}")]
    Open {
        path: PathBuf,
        source: std::io::Error,
    },
    #[error("{path}: truncated while reading {field}")]
    Truncated { path: PathBuf, field: &'static str },
    #[error("{path}: magic is {found:#010x}, expected {expected:#010x}")]
    BadMagic {
        path: PathBuf,
        found: u32,
        expected: u32,
    },
    #[error("{path}: image dims {rows}x{cols}, expected 28x28")]
    BadImageDims {
        path: PathBuf,
        rows: u32,
        cols: u32,
    },
    #[error("label count {labels} does not match image count {images}")]
    CountMismatch { images: usize, labels: usize },
    #[error("{path}: label {label} out of range 0..10")]
    BadLabel { path: PathBuf, label: u8 },
    #[error(
        "MNIST data directory not found; tried {tried:?}. Point {env} or --data-dir at the four IDX files",
        env = DATA_DIR_ENV
    )]
    NoDataDir { tried: Vec<PathBuf> },
}

const IMAGES_MAGIC: u32 = 0x0000_0803;
const LABELS_MAGIC: u32 = 0x0000_0801;

/// Opens a file, transparently decompressing if it starts with the gzip
/// magic bytes.
fn open_maybe_gz(path: &Path) -> Result<Box<dyn Read>, DataError> {
    let file = File::open(path).map_err(|source| DataError::Open {
        path: path.to_path_buf(),
        source,
    })?;
    let mut reader = BufReader::new(file);
    let mut probe = [0u8; 2];
    let peeked = reader.fill_buf_probe(&mut probe);
    if peeked && probe == [0x1f, 0x8b] {
        Ok(Box::new(flate2::bufread::GzDecoder::new(reader)))
    } else {
        Ok(Box::new(reader))
    }
}

// Small helper trait: peek the first two bytes without consuming them.
trait Probe {
    fn fill_buf_probe(&mut self, out: &mut [u8; 2]) -> bool;
}

impl Probe for BufReader<File> {
    fn fill_buf_probe(&mut self, out: &mut [u8; 2]) -> bool {
        use std::io::BufRead;
        match self.fill_buf() {
            Ok(buf) if buf.len() >= 2 => {
                out.copy_from_slice(&buf[..2]);
                true
            }
            _ => false,
        }
    }
}

fn read_u32_be(r: &mut dyn Read, path: &Path, field: &'static str) -> Result<u32, DataError> {
    let mut buf = [0u8; 4];
    r.read_exact(&mut buf).map_err(|_| DataError::Truncated {
        path: path.to_path_buf(),
        field,
    })?;
    Ok(u32::from_be_bytes(buf))
}

/// Parses the canonical IDX pair into a [`Dataset`]. Headers are big-endian;
/// pixels are scaled by 1/255 so `{0, 255}` map exactly to `{0, 1}`.
pub fn load_idx(images_path: &Path, labels_path: &Path, split: Split) -> Result<Dataset, DataError> {
    let mut r = open_maybe_gz(images_path)?;
    let magic = read_u32_be(&mut r, images_path, "images magic")?;
    if magic != IMAGES_MAGIC {
        return Err(DataError::BadMagic {
            path: images_path.to_path_buf(),
            found: magic,
            expected: IMAGES_MAGIC,
        });
    }
    let count = read_u32_be(&mut r, images_path, "image count")? as usize;
    let rows = read_u32_be(&mut r, images_path, "image rows")?;
    let cols = read_u32_be(&mut r, images_path, "image cols")?;
    if rows as usize != IMAGE_SIDE || cols as usize != IMAGE_SIDE {
        return Err(DataError::BadImageDims {
            path: images_path.to_path_buf(),
            rows,
            cols,
        });
    }
    let mut raw = vec![0u8; count * IMAGE_PIXELS];
    r.read_exact(&mut raw).map_err(|_| DataError::Truncated {
        path: images_path.to_path_buf(),
        field: "pixel data",
    })?;
    let images = Matrix2D::from_vec(
        count,
        IMAGE_PIXELS,
        raw.iter().map(|&b| b as f32 / 255.0).collect(),
    );

    let mut r = open_maybe_gz(labels_path)?;
    let magic = read_u32_be(&mut r, labels_path, "labels magic")?;
    if magic != LABELS_MAGIC {
        return Err(DataError::BadMagic {
            path: labels_path.to_path_buf(),
            found: magic,
            expected: LABELS_MAGIC,
        });
    }
    let label_count = read_u32_be(&mut r, labels_path, "label count")? as usize;
    if label_count != count {
        return Err(DataError::CountMismatch {
            images: count,
            labels: label_count,
        });
    }
    let mut labels = vec![0u8; label_count];
    r.read_exact(&mut labels).map_err(|_| DataError::Truncated {
        path: labels_path.to_path_buf(),
        field: "label data",
    })?;
    if let Some(&bad) = labels.iter().find(|&&l| l as usize >= NUM_CLASSES) {
        return Err(DataError::BadLabel {
            path: labels_path.to_path_buf(),
            label: bad,
        });
    }
    Ok(Dataset {
        images,
        labels,
        split,
    })
}

/// Loads the canonical four-file MNIST distribution from a directory,
/// accepting either raw or `.gz` files.
pub fn load_mnist(dir: &Path) -> Result<(Dataset, Dataset), DataError> {
    let find = |stem: &str| -> PathBuf {
        let raw = dir.join(stem);
        if raw.exists() {
            raw
        } else {
            dir.join(format!("{stem}.gz"))
        }
    };
    let train = load_idx(
        &find("train-images-idx3-ubyte"),
        &find("train-labels-idx1-ubyte"),
        Split::Train,
    )?;
    let test = load_idx(
        &find("t10k-images-idx3-ubyte"),
        &find("t10k-labels-idx1-ubyte"),
        Split::Test,
    )?;
    Ok((train, test))
}

/// Resolves the MNIST directory: explicit path, then `SPARSECL_DATA_DIR`,
/// then `./data/mnist`.
pub fn resolve_data_dir(explicit: Option<&Path>) -> Result<PathBuf, DataError> {
    let mut tried = Vec::new();
    if let Some(p) = explicit {
        if p.exists() {
            return Ok(p.to_path_buf());
        }
        tried.push(p.to_path_buf());
    } else {
        if let Ok(env_dir) = std::env::var(DATA_DIR_ENV) {
            let p = PathBuf::from(env_dir);
            if p.exists() {
                return Ok(p);
            }
            tried.push(p);
        }
        let fallback = PathBuf::from("data/mnist");
        if fallback.exists() {
            return Ok(fallback);
        }
        tried.push(fallback);
    }
    Err(DataError::NoDataDir { tried })
}

/// One task of a stream: which train/test examples it owns and an optional
/// pixel permutation applied to both.
#[derive(Debug, Clone)]
pub struct Task {
    pub id: usize,
    pub train_indices: Vec<u32>,
    pub test_indices: Vec<u32>,
    /// `permuted[j] = source pixel index for output pixel j`.
    pub permutation: Option<Vec<u32>>,
}

/// An ordered list of tasks defining one experiment regime.
#[derive(Debug, Clone)]
pub struct TaskStream {
    pub tasks: Vec<Task>,
}

impl TaskStream {
    pub fn len(&self) -> usize {
        self.tasks.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tasks.is_empty()
    }
}

/// Class-incremental Split-MNIST: five tasks of ascending digit pairs
/// {0,1}, {2,3}, {4,5}, {6,7}, {8,9}.
pub fn make_split_tasks(train: &Dataset, test: &Dataset) -> TaskStream {
    let tasks = (0..5)
        .map(|t| {
            let classes = [2 * t as u8, 2 * t as u8 + 1];
            let pick = |labels: &[u8]| -> Vec<u32> {
                labels
                    .iter()
                    .enumerate()
                    .filter(|(_, &l)| classes.contains(&l))
                    .map(|(i, _)| i as u32)
                    .collect()
            };
            Task {
                id: t,
                train_indices: pick(&train.labels),
                test_indices: pick(&test.labels),
                permutation: None,
            }
        })
        .collect();
    TaskStream { tasks }
}

/// i.i.d. MNIST as a single task holding every class.
pub fn make_iid_task(train: &Dataset, test: &Dataset) -> TaskStream {
    TaskStream {
        tasks: vec![Task {
            id: 0,
            train_indices: (0..train.len() as u32).collect(),
            test_indices: (0..test.len() as u32).collect(),
            permutation: None,
        }],
    }
}

/// Permuted MNIST: task 0 is the identity, every later task carries its own
/// deterministic pixel permutation of the full train/test sets, derived from
/// the run seed and the task index.
pub fn make_permuted_tasks(
    train: &Dataset,
    test: &Dataset,
    n_tasks: usize,
    root: &RngStream,
) -> TaskStream {
    assert!(n_tasks >= 1, "make_permuted_tasks: need at least one task");
    let tasks = (0..n_tasks)
        .map(|t| Task {
            id: t,
            train_indices: (0..train.len() as u32).collect(),
            test_indices: (0..test.len() as u32).collect(),
            permutation: if t == 0 {
                None
            } else {
                let mut rng = root.derive_indexed("perm", t as u64);
                Some(rng.permutation(IMAGE_PIXELS))
            },
        })
        .collect();
    TaskStream { tasks }
}

/// Deterministically shuffled batch index lists for one task epoch.
///
/// The order is a permutation of the task's train indices derived from
/// `(run seed, task id, epoch)`; the last batch may be short.
pub fn shuffled_batches(
    task: &Task,
    epoch: usize,
    root: &RngStream,
    batch_size: usize,
) -> Vec<Vec<u32>> {
    assert!(batch_size >= 1, "shuffled_batches: batch_size must be >= 1");
    let mut order = task.train_indices.clone();
    let mut rng = root
        .derive_indexed("shuffle/task", task.id as u64)
        .derive_indexed("epoch", epoch as u64);
    rng.shuffle(&mut order);
    order.chunks(batch_size).map(<[u32]>::to_vec).collect()
}

/// Gathers `indices` into a dense batch, applying the task's pixel
/// permutation if present. Returns the batch and its labels.
pub fn assemble_batch(dataset: &Dataset, indices: &[u32], task: &Task) -> (Matrix2D, Vec<u8>) {
    let width = dataset.images.cols();
    let mut batch = Matrix2D::zeros(indices.len(), width);
    let mut labels = Vec::with_capacity(indices.len());
    for (row, &idx) in indices.iter().enumerate() {
        let src = dataset.images.row(idx as usize);
        let dst = batch.row_mut(row);
        match &task.permutation {
            None => dst.copy_from_slice(src),
            Some(perm) => {
                for (d, &p) in dst.iter_mut().zip(perm) {
                    *d = src[p as usize];
                }
            }
        }
        labels.push(dataset.labels[idx as usize]);
    }
    (batch, labels)
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::io::Write;

    /// Builds a tiny synthetic IDX pair on disk.
    fn write_idx(dir: &Path, count: u32, labels: &[u8]) -> (PathBuf, PathBuf) {
        let images = dir.join("imgs-idx3-ubyte");
        let mut f = File::create(&images).unwrap();
        f.write_all(&IMAGES_MAGIC.to_be_bytes()).unwrap();
        f.write_all(&count.to_be_bytes()).unwrap();
        f.write_all(&28u32.to_be_bytes()).unwrap();
        f.write_all(&28u32.to_be_bytes()).unwrap();
        let mut px = vec![0u8; count as usize * IMAGE_PIXELS];
        px.iter_mut().enumerate().for_each(|(i, p)| *p = (i % 256) as u8);
        f.write_all(&px).unwrap();

        let labels_path = dir.join("labels-idx1-ubyte");
        let mut f = File::create(&labels_path).unwrap();
        f.write_all(&LABELS_MAGIC.to_be_bytes()).unwrap();
        f.write_all(&(labels.len() as u32).to_be_bytes()).unwrap();
        f.write_all(labels).unwrap();
        (images, labels_path)
    }

    #[test]
    fn loads_synthetic_idx_pair() {
        let dir = tempfile::tempdir().unwrap();
        let (images, labels) = write_idx(dir.path(), 3, &[0, 5, 9]);
        let ds = load_idx(&images, &labels, Split::Train).unwrap();
        assert_eq!(ds.len(), 3);
        assert_eq!(ds.labels, vec![0, 5, 9]);
        assert!(ds.images.data().iter().all(|&v| (0.0..=1.0).contains(&v)));
        // 255 maps exactly to 1.0, 0 to 0.0.
        assert_eq!(ds.images.data()[255], 1.0);
        assert_eq!(ds.images.data()[0], 0.0);
    }

    #[test]
    fn rejects_bad_magic() {
        let dir = tempfile::tempdir().unwrap();
        let (images, labels) = write_idx(dir.path(), 2, &[1, 2]);
        let err = load_idx(&labels, &images, Split::Train).unwrap_err();
        assert!(matches!(err, DataError::BadMagic { .. }), "{err}");
    }

    #[test]
    fn rejects_truncated_images() {
        let dir = tempfile::tempdir().unwrap();
        let (images, labels) = write_idx(dir.path(), 3, &[0, 1, 2]);
        let bytes = std::fs::read(&images).unwrap();
        std::fs::write(&images, &bytes[..bytes.len() - 100]).unwrap();
        let err = load_idx(&images, &labels, Split::Train).unwrap_err();
        assert!(
            matches!(err, DataError::Truncated { field: "pixel data", .. }),
            "{err}"
        );
    }

    #[test]
    fn rejects_count_mismatch() {
        let dir = tempfile::tempdir().unwrap();
        let (images, _) = write_idx(dir.path(), 3, &[0, 1, 2]);
        let dir2 = tempfile::tempdir().unwrap();
        let (_, labels2) = write_idx(dir2.path(), 2, &[0, 1]);
        let err = load_idx(&images, &labels2, Split::Train).unwrap_err();
        assert!(matches!(err, DataError::CountMismatch { .. }), "{err}");
    }

    #[test]
    fn rejects_out_of_range_label() {
        let dir = tempfile::tempdir().unwrap();
        let (images, labels) = write_idx(dir.path(), 2, &[3, 11]);
        let err = load_idx(&images, &labels, Split::Train).unwrap_err();
        assert!(matches!(err, DataError::BadLabel { label: 11, .. }), "{err}");
    }

    #[test]
    fn gzip_files_load_transparently() {
        let dir = tempfile::tempdir().unwrap();
        let (images, labels) = write_idx(dir.path(), 2, &[4, 7]);
        for p in [&images, &labels] {
            let bytes = std::fs::read(p).unwrap();
            let gz_path = p.with_extension("gz");
            let f = File::create(&gz_path).unwrap();
            let mut enc = flate2::write::GzEncoder::new(f, flate2::Compression::fast());
            enc.write_all(&bytes).unwrap();
            enc.finish().unwrap();
        }
        let ds = load_idx(
            &images.with_extension("gz"),
            &labels.with_extension("gz"),
            Split::Test,
        )
        .unwrap();
        assert_eq!(ds.labels, vec![4, 7]);
    }

    fn toy_dataset(labels: Vec<u8>, split: Split) -> Dataset {
        let n = labels.len();
        let mut images = Matrix2D::zeros(n, IMAGE_PIXELS);
        for i in 0..n {
            for j in 0..IMAGE_PIXELS {
                images.set(i, j, ((i * 31 + j * 7) % 256) as f32 / 255.0);
            }
        }
        Dataset {
            images,
            labels,
            split,
        }
    }

    #[test]
    fn split_tasks_partition_by_ascending_pairs() {
        let labels: Vec<u8> = (0..40).map(|i| (i % 10) as u8).collect();
        let train = toy_dataset(labels.clone(), Split::Train);
        let test = toy_dataset(labels, Split::Test);
        let stream = make_split_tasks(&train, &test);
        assert_eq!(stream.len(), 5);

        let mut seen = vec![false; 40];
        for (t, task) in stream.tasks.iter().enumerate() {
            let classes = [2 * t as u8, 2 * t as u8 + 1];
            for &i in &task.train_indices {
                assert!(classes.contains(&train.labels[i as usize]));
                assert!(!seen[i as usize], "index {i} appears in two tasks");
                seen[i as usize] = true;
            }
        }
        assert!(seen.iter().all(|&b| b), "split tasks must cover the train set");
        // Task 2 holds exactly labels {4, 5}.
        for &i in &stream.tasks[2].test_indices {
            assert!(matches!(test.labels[i as usize], 4 | 5));
        }
        let total: usize = stream.tasks.iter().map(|t| t.test_indices.len()).sum();
        assert_eq!(total, 40);
    }

    #[test]
    fn permuted_tasks_are_identity_then_deterministic_bijections() {
        let train = toy_dataset(vec![0, 1, 2, 3], Split::Train);
        let test = toy_dataset(vec![4, 5], Split::Test);
        let root = RngStream::new(123);
        let stream = make_permuted_tasks(&train, &test, 4, &root);
        assert!(stream.tasks[0].permutation.is_none());

        let again = make_permuted_tasks(&train, &test, 4, &RngStream::new(123));
        for t in 1..4 {
            let p = stream.tasks[t].permutation.as_ref().unwrap();
            assert_eq!(p, again.tasks[t].permutation.as_ref().unwrap());
            // Bijection: applying the inverse recovers the identity.
            let mut inverse = vec![0u32; p.len()];
            for (j, &src) in p.iter().enumerate() {
                inverse[src as usize] = j as u32;
            }
            let mut recovered: Vec<u32> = (0..p.len() as u32).collect();
            recovered = recovered.iter().map(|&j| p[j as usize]).collect();
            recovered = recovered.iter().map(|&j| inverse[j as usize]).collect();
            assert!(recovered.iter().enumerate().all(|(j, &v)| v == j as u32));
        }
        // Distinct tasks carry distinct permutations.
        assert_ne!(
            stream.tasks[1].permutation,
            stream.tasks[2].permutation
        );
    }

    #[test]
    fn assemble_batch_applies_permutation() {
        let train = toy_dataset(vec![0, 1], Split::Train);
        let root = RngStream::new(5);
        let stream = make_permuted_tasks(&train, &train, 2, &root);
        let task = &stream.tasks[1];
        let (batch, labels) = assemble_batch(&train, &[1], task);
        assert_eq!(labels, vec![1]);
        let perm = task.permutation.as_ref().unwrap();
        for j in 0..IMAGE_PIXELS {
            assert_eq!(batch.get(0, j), train.images.get(1, perm[j] as usize));
        }
        // Identity task reproduces the original row.
        let (batch0, _) = assemble_batch(&train, &[1], &stream.tasks[0]);
        assert_eq!(batch0.row(0), train.images.row(1));
    }

    #[test]
    fn batches_cover_each_example_once() {
        let labels: Vec<u8> = (0..33).map(|i| (i % 10) as u8).collect();
        let train = toy_dataset(labels, Split::Train);
        let stream = make_iid_task(&train, &train);
        let root = RngStream::new(9);
        let batches = shuffled_batches(&stream.tasks[0], 0, &root, 8);
        assert_eq!(batches.len(), 33usize.div_ceil(8));
        assert_eq!(batches.last().unwrap().len(), 1);
        let mut seen = vec![false; 33];
        for b in &batches {
            for &i in b {
                assert!(!seen[i as usize]);
                seen[i as usize] = true;
            }
        }
        assert!(seen.iter().all(|&b| b));
        // Identical seed, identical order.
        let again = shuffled_batches(&stream.tasks[0], 0, &RngStream::new(9), 8);
        assert_eq!(batches, again);
        // Different epoch, different order.
        let other = shuffled_batches(&stream.tasks[0], 1, &root, 8);
        assert_ne!(batches, other);
    }

    #[test]
    fn task_and_epoch_streams_do_not_collide() {
        let labels: Vec<u8> = (0..64).map(|i| (i % 10) as u8).collect();
        let train = toy_dataset(labels.clone(), Split::Train);
        let test = toy_dataset(labels, Split::Test);
        let stream = make_split_tasks(&train, &test);
        let root = RngStream::new(1);
        let mut orders = std::collections::HashSet::new();
        for task in &stream.tasks {
            for epoch in 0..3 {
                let b = shuffled_batches(task, epoch, &root, 64);
                assert!(orders.insert(b), "colliding shuffle for task {}", task.id);
            }
        }
    }
}
