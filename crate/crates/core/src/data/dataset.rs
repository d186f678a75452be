//! The standardized dataset flowing through every pipeline stage, plus
//! splitting and a bit-exact binary serialization.

use std::io::{Read, Write};
use std::path::Path;

use ndarray::{Array2, Axis};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};

const MAGIC: &[u8; 4] = b"DYDS";
const VERSION: u32 = 1;

/// Standardized feature matrix with integer class labels.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    features: Array2<f64>,
    labels: Vec<usize>,
    n_classes: usize,
    feature_names: Vec<String>,
}

impl Dataset {
    /// Validates the no-NaN and label-range invariants at construction.
    pub fn new(
        features: Array2<f64>,
        labels: Vec<usize>,
        n_classes: usize,
        feature_names: Vec<String>,
    ) -> Result<Self> {
        if features.nrows() != labels.len() {
            return Err(Error::DatasetInvariant(format!(
                "{} feature rows but {} labels",
                features.nrows(),
                labels.len()
            )));
        }
        if features.ncols() != feature_names.len() {
            return Err(Error::DatasetInvariant(format!(
                "{} feature columns but {} names",
                features.ncols(),
                feature_names.len()
            )));
        }
        if n_classes == 0 {
            return Err(Error::DatasetInvariant("n_classes must be > 0".into()));
        }
        if let Some(bad) = labels.iter().find(|&&y| y >= n_classes) {
            return Err(Error::DatasetInvariant(format!(
                "label {bad} out of range for {n_classes} classes"
            )));
        }
        if features.iter().any(|v| !v.is_finite()) {
            return Err(Error::DatasetInvariant(
                "features contain NaN or infinite entries".into(),
            ));
        }
        Ok(Dataset {
            features,
            labels,
            n_classes,
            feature_names,
        })
    }

    pub fn n(&self) -> usize {
        self.labels.len()
    }

    pub fn d(&self) -> usize {
        self.features.ncols()
    }

    pub fn n_classes(&self) -> usize {
        self.n_classes
    }

    pub fn features(&self) -> &Array2<f64> {
        &self.features
    }

    pub fn labels(&self) -> &[usize] {
        &self.labels
    }

    pub fn feature_names(&self) -> &[String] {
        &self.feature_names
    }

    /// Per-class sample counts.
    pub fn class_counts(&self) -> Vec<usize> {
        let mut counts = vec![0usize; self.n_classes];
        for &y in &self.labels {
            counts[y] += 1;
        }
        counts
    }

    /// New dataset holding the given rows (indices into `self`).
    pub fn subset(&self, indices: &[usize]) -> Result<Dataset> {
        let features = self.features.select(Axis(0), indices);
        let labels = indices.iter().map(|&i| self.labels[i]).collect();
        Dataset::new(features, labels, self.n_classes, self.feature_names.clone())
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let bytes = self.to_bytes();
        std::fs::write(path, bytes).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Dataset> {
        let path = path.as_ref();
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Dataset::from_bytes(&bytes, path)
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.write_all(MAGIC).unwrap();
        out.write_all(&VERSION.to_le_bytes()).unwrap();
        out.write_all(&(self.n() as u64).to_le_bytes()).unwrap();
        out.write_all(&(self.d() as u64).to_le_bytes()).unwrap();
        out.write_all(&(self.n_classes as u64).to_le_bytes()).unwrap();
        for name in &self.feature_names {
            let b = name.as_bytes();
            out.write_all(&(b.len() as u32).to_le_bytes()).unwrap();
            out.write_all(b).unwrap();
        }
        for v in self.features.iter() {
            out.write_all(&v.to_bits().to_le_bytes()).unwrap();
        }
        for &y in &self.labels {
            out.write_all(&(y as u64).to_le_bytes()).unwrap();
        }
        out
    }

    pub fn from_bytes(bytes: &[u8], path: &Path) -> Result<Dataset> {
        let mut cursor = std::io::Cursor::new(bytes);
        let mut magic = [0u8; 4];
        cursor
            .read_exact(&mut magic)
            .map_err(|_| Error::corrupt(path, "truncated magic"))?;
        if &magic != MAGIC {
            return Err(Error::corrupt(path, "bad magic; not a dataset file"));
        }
        let version = read_u32(&mut cursor, path)?;
        if version != VERSION {
            return Err(Error::VersionMismatch {
                path: path.to_path_buf(),
                found: version,
                expected: VERSION,
            });
        }
        let n = read_u64(&mut cursor, path)? as usize;
        let d = read_u64(&mut cursor, path)? as usize;
        let n_classes = read_u64(&mut cursor, path)? as usize;
        let mut feature_names = Vec::with_capacity(d);
        for _ in 0..d {
            let len = read_u32(&mut cursor, path)? as usize;
            let mut buf = vec![0u8; len];
            cursor
                .read_exact(&mut buf)
                .map_err(|_| Error::corrupt(path, "truncated feature name"))?;
            feature_names.push(
                String::from_utf8(buf).map_err(|_| Error::corrupt(path, "non-utf8 name"))?,
            );
        }
        let mut values = Vec::with_capacity(n * d);
        for _ in 0..n * d {
            values.push(f64::from_bits(read_u64(&mut cursor, path)?));
        }
        let mut labels = Vec::with_capacity(n);
        for _ in 0..n {
            labels.push(read_u64(&mut cursor, path)? as usize);
        }
        if cursor.position() != bytes.len() as u64 {
            return Err(Error::corrupt(path, "trailing bytes"));
        }
        let features = Array2::from_shape_vec((n, d), values)
            .map_err(|_| Error::corrupt(path, "shape mismatch"))?;
        Dataset::new(features, labels, n_classes, feature_names)
    }
}

fn read_u32(cursor: &mut std::io::Cursor<&[u8]>, path: &Path) -> Result<u32> {
    let mut buf = [0u8; 4];
    cursor
        .read_exact(&mut buf)
        .map_err(|_| Error::corrupt(path, "truncated u32"))?;
    Ok(u32::from_le_bytes(buf))
}

fn read_u64(cursor: &mut std::io::Cursor<&[u8]>, path: &Path) -> Result<u64> {
    let mut buf = [0u8; 8];
    cursor
        .read_exact(&mut buf)
        .map_err(|_| Error::corrupt(path, "truncated u64"))?;
    Ok(u64::from_le_bytes(buf))
}

/// Index sets for a train/test split; exposed separately so the partition
/// property (disjoint, exhaustive) is directly testable.
pub fn split_indices(
    labels: &[usize],
    n_classes: usize,
    test_fraction: f64,
    seed: u64,
    stratified: bool,
) -> Result<(Vec<usize>, Vec<usize>)> {
    let n = labels.len();
    if !(test_fraction > 0.0 && test_fraction < 1.0) {
        return Err(Error::InvalidArgument(format!(
            "test_fraction must be in (0,1), got {test_fraction}"
        )));
    }
    if n < 2 {
        return Err(Error::InvalidArgument("need at least 2 samples to split".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut test = Vec::new();
    let mut train = Vec::new();
    if stratified {
        for class in 0..n_classes {
            let mut members: Vec<usize> =
                (0..n).filter(|&i| labels[i] == class).collect();
            if members.is_empty() {
                continue;
            }
            if members.len() < 2 {
                return Err(Error::InvalidArgument(format!(
                    "class {class} has a single sample; stratified split impossible"
                )));
            }
            members.shuffle(&mut rng);
            let want = (members.len() as f64 * test_fraction).round() as usize;
            let take = want.clamp(1, members.len() - 1);
            test.extend_from_slice(&members[..take]);
            train.extend_from_slice(&members[take..]);
        }
    } else {
        let mut all: Vec<usize> = (0..n).collect();
        all.shuffle(&mut rng);
        let want = (n as f64 * test_fraction).round() as usize;
        let take = want.clamp(1, n - 1);
        test.extend_from_slice(&all[..take]);
        train.extend_from_slice(&all[take..]);
    }
    train.sort_unstable();
    test.sort_unstable();
    Ok((train, test))
}

/// Deterministic train/test partition. With `stratified`, class
/// proportions are preserved within one sample per class. The training
/// side must contain every class.
pub fn split(
    data: &Dataset,
    test_fraction: f64,
    seed: u64,
    stratified: bool,
) -> Result<(Dataset, Dataset)> {
    let (train_idx, test_idx) = split_indices(
        data.labels(),
        data.n_classes(),
        test_fraction,
        seed,
        stratified,
    )?;
    let train = data.subset(&train_idx)?;
    let test = data.subset(&test_idx)?;
    let counts = train.class_counts();
    if let Some(missing) = counts.iter().position(|&c| c == 0) {
        return Err(Error::DatasetInvariant(format!(
            "class {missing} absent from the training split"
        )));
    }
    Ok((train, test))
}
