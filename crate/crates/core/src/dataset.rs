//! Feature datasets: CSV and PNNL binary loading, seeded train/val/test
//! splitting, and train-only standardization.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use log::warn;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::{Matrix, RngState};

pub const DATASET_MAGIC: [u8; 4] = *b"PNNL";
pub const DATASET_VERSION: u16 = 1;
const HEADER_LEN: usize = 4 + 2 + 4 * 3;

/// Smallest per-column standard deviation used when scaling.
pub const STDDEV_FLOOR: f64 = 1e-8;

/// Minimum members every class needs before splitting is stratified.
pub const STRATIFY_MIN_PER_CLASS: usize = 10;

#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    features: Matrix,
    labels: Vec<usize>,
    num_classes: usize,
}

impl Dataset {
    pub fn new(features: Matrix, labels: Vec<usize>, num_classes: usize) -> Result<Self> {
        if features.rows() == 0 {
            return Err(Error::Empty("dataset has no rows".into()));
        }
        if features.cols() == 0 {
            return Err(Error::Empty("dataset has no feature columns".into()));
        }
        if labels.len() != features.rows() {
            return Err(Error::Dimension(format!(
                "{} labels for {} rows",
                labels.len(),
                features.rows()
            )));
        }
        if num_classes < 2 {
            return Err(Error::InvalidData(format!(
                "need at least 2 classes, got {num_classes}"
            )));
        }
        if let Some((row, &y)) = labels.iter().enumerate().find(|(_, &y)| y >= num_classes) {
            return Err(Error::InvalidData(format!(
                "row {row}: label {y} out of range for {num_classes} classes"
            )));
        }
        if let Some(pos) = features.data().iter().position(|v| !v.is_finite()) {
            return Err(Error::InvalidData(format!(
                "non-finite feature at row {}, column {}",
                pos / features.cols(),
                pos % features.cols()
            )));
        }
        Ok(Self {
            features,
            labels,
            num_classes,
        })
    }

    pub fn features(&self) -> &Matrix {
        &self.features
    }

    pub fn labels(&self) -> &[usize] {
        &self.labels
    }

    pub fn num_classes(&self) -> usize {
        self.num_classes
    }

    pub fn len(&self) -> usize {
        self.features.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.features.rows() == 0
    }

    pub fn dim(&self) -> usize {
        self.features.cols()
    }

    /// Class indices below `num_classes` with no members.
    pub fn missing_classes(&self) -> Vec<usize> {
        let mut seen = vec![false; self.num_classes];
        for &y in &self.labels {
            seen[y] = true;
        }
        (0..self.num_classes).filter(|&c| !seen[c]).collect()
    }

    /// Rows `indices`, in order, as a new dataset with the same class count.
    pub fn subset(&self, indices: &[usize]) -> Result<Dataset> {
        if let Some(&bad) = indices.iter().find(|&&i| i >= self.len()) {
            return Err(Error::Dimension(format!(
                "row {bad} out of range for {} rows",
                self.len()
            )));
        }
        Dataset::new(
            self.features.select_rows(indices),
            indices.iter().map(|&i| self.labels[i]).collect(),
            self.num_classes,
        )
    }

    /// Features rounded through binary32, as stored in the binary format.
    pub fn quantized_f32(&self) -> Dataset {
        let mut features = self.features.clone();
        features.map_inplace(|v| v as f32 as f64);
        Dataset {
            features,
            labels: self.labels.clone(),
            num_classes: self.num_classes,
        }
    }
}

/// Which CSV column holds the label.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum LabelColumn {
    Index(usize),
    Name(String),
}

impl From<&str> for LabelColumn {
    /// Numeric strings are read as column indices, anything else as a name.
    fn from(s: &str) -> Self {
        s.parse()
            .map(LabelColumn::Index)
            .unwrap_or_else(|_| LabelColumn::Name(s.to_string()))
    }
}

/// Loads a comma-separated file with one header row.
///
/// Every column except the label column is a feature. The class count is
/// `max label + 1` unless `num_classes` overrides it.
pub fn load_csv(
    path: impl AsRef<Path>,
    label_column: &LabelColumn,
    num_classes: Option<usize>,
) -> Result<Dataset> {
    let path = path.as_ref();
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_csv(&text, label_column, num_classes)
}

pub fn parse_csv(
    text: &str,
    label_column: &LabelColumn,
    num_classes: Option<usize>,
) -> Result<Dataset> {
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(true)
        .flexible(true)
        .trim(csv::Trim::All)
        .from_reader(text.as_bytes());
    let header: Vec<String> = reader
        .headers()
        .map_err(|e| Error::Csv(e.to_string()))?
        .iter()
        .map(str::to_string)
        .collect();
    if header.is_empty() || header.iter().all(String::is_empty) {
        return Err(Error::Empty("csv has no header row".into()));
    }
    let label_idx = match label_column {
        LabelColumn::Name(name) => header
            .iter()
            .position(|h| h == name)
            .ok_or_else(|| Error::MissingLabelColumn(name.clone()))?,
        LabelColumn::Index(i) => {
            if *i >= header.len() {
                return Err(Error::MissingLabelColumn(i.to_string()));
            }
            *i
        }
    };
    let width = header.len();
    let mut data = Vec::new();
    let mut labels = Vec::new();
    for (row, record) in reader.records().enumerate() {
        let record = record.map_err(|e| Error::Csv(e.to_string()))?;
        if record.len() != width {
            return Err(Error::RaggedRow {
                row: row + 1,
                expected: width,
                found: record.len(),
            });
        }
        for (col, cell) in record.iter().enumerate() {
            if col == label_idx {
                labels.push(parse_label(cell).ok_or_else(|| Error::InvalidLabel {
                    row: row + 1,
                    value: cell.to_string(),
                })?);
            } else {
                let v: f64 = cell.parse().map_err(|_| Error::NonNumeric {
                    row: row + 1,
                    column: header[col].clone(),
                    value: cell.to_string(),
                })?;
                if !v.is_finite() {
                    return Err(Error::NonNumeric {
                        row: row + 1,
                        column: header[col].clone(),
                        value: cell.to_string(),
                    });
                }
                data.push(v);
            }
        }
    }
    if labels.is_empty() {
        return Err(Error::Empty("csv has no data rows".into()));
    }
    let inferred = labels.iter().max().map_or(0, |&m| m + 1);
    let k = num_classes.unwrap_or(inferred);
    let features = Matrix::from_vec(labels.len(), width - 1, data)?;
    let ds = Dataset::new(features, labels, k)?;
    let missing = ds.missing_classes();
    if !missing.is_empty() {
        warn!("classes {missing:?} have no samples (K = {k})");
    }
    Ok(ds)
}

fn parse_label(cell: &str) -> Option<usize> {
    if let Ok(v) = cell.parse::<usize>() {
        return Some(v);
    }
    let v: f64 = cell.parse().ok()?;
    (v.is_finite() && v >= 0.0 && v.fract() == 0.0 && v <= u32::MAX as f64).then_some(v as usize)
}

/// Serializes to the PNNL binary format (features stored as binary32).
pub fn to_binary(ds: &Dataset) -> Result<Vec<u8>> {
    let to_u32 = |v: usize, what: &str| {
        u32::try_from(v).map_err(|_| Error::InvalidData(format!("{what} {v} exceeds u32")))
    };
    let (n, d) = (to_u32(ds.len(), "N")?, to_u32(ds.dim(), "D")?);
    let k = to_u32(ds.num_classes, "K")?;
    let mut out = Vec::with_capacity(HEADER_LEN + ds.len() * (ds.dim() + 1) * 4);
    out.extend_from_slice(&DATASET_MAGIC);
    out.extend_from_slice(&DATASET_VERSION.to_le_bytes());
    for v in [n, d, k] {
        out.extend_from_slice(&v.to_le_bytes());
    }
    for &v in ds.features.data() {
        out.extend_from_slice(&(v as f32).to_le_bytes());
    }
    for &y in &ds.labels {
        out.extend_from_slice(&to_u32(y, "label")?.to_le_bytes());
    }
    Ok(out)
}

pub fn from_binary(bytes: &[u8]) -> Result<Dataset> {
    if bytes.len() < 4 || bytes[..4] != DATASET_MAGIC {
        return Err(Error::BadMagic {
            expected: DATASET_MAGIC,
            found: bytes[..bytes.len().min(4)].to_vec(),
        });
    }
    if bytes.len() < HEADER_LEN {
        return Err(Error::Truncated(format!(
            "header needs {HEADER_LEN} bytes, file has {}",
            bytes.len()
        )));
    }
    let version = u16::from_le_bytes([bytes[4], bytes[5]]);
    if version != DATASET_VERSION {
        return Err(Error::Version {
            expected: DATASET_VERSION,
            found: version,
        });
    }
    let read_u32 = |at: usize| u32::from_le_bytes(bytes[at..at + 4].try_into().unwrap()) as usize;
    let (n, d, k) = (read_u32(6), read_u32(10), read_u32(14));
    let expected = HEADER_LEN + n * d * 4 + n * 4;
    if bytes.len() < expected {
        return Err(Error::Truncated(format!(
            "header claims N={n}, D={d}: need {expected} bytes, file has {}",
            bytes.len()
        )));
    }
    if bytes.len() > expected {
        return Err(Error::InvalidData(format!(
            "{} trailing bytes after payload",
            bytes.len() - expected
        )));
    }
    let feat_bytes = &bytes[HEADER_LEN..HEADER_LEN + n * d * 4];
    let data = feat_bytes
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().unwrap()) as f64)
        .collect();
    let labels = bytes[HEADER_LEN + n * d * 4..]
        .chunks_exact(4)
        .map(|c| u32::from_le_bytes(c.try_into().unwrap()) as usize)
        .collect();
    Dataset::new(Matrix::from_vec(n, d, data)?, labels, k)
}

pub fn save_binary(ds: &Dataset, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    fs::write(path, to_binary(ds)?).map_err(|e| Error::io(path, e))
}

pub fn load_binary(path: impl AsRef<Path>) -> Result<Dataset> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    from_binary(&bytes)
}

/// Disjoint, sorted train/validation/test row indices covering `[0, N)`.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct DataSplit {
    pub train_idx: Vec<usize>,
    pub val_idx: Vec<usize>,
    pub test_idx: Vec<usize>,
}

impl DataSplit {
    pub fn validate(&self, n: usize) -> Result<()> {
        let mut seen = vec![false; n];
        for &i in self.train_idx.iter().chain(&self.val_idx).chain(&self.test_idx) {
            if i >= n || seen[i] {
                return Err(Error::InvalidSplit(format!(
                    "index {i} out of range or repeated"
                )));
            }
            seen[i] = true;
        }
        if seen.iter().any(|s| !s) {
            return Err(Error::InvalidSplit("split does not cover every row".into()));
        }
        Ok(())
    }
}

/// Seeded permutation followed by a contiguous cut.
///
/// When every present class has at least [`STRATIFY_MIN_PER_CLASS`] members,
/// each class is shuffled on its own and the classes are interleaved by
/// relative rank before cutting, so every split sees the class mix of the
/// whole. Split sizes are `round(f * N)` for validation and test; training
/// takes the rest.
pub fn split(ds: &Dataset, fractions: (f64, f64, f64), seed: u64) -> Result<DataSplit> {
    let (ft, fv, fs) = fractions;
    if !(ft > 0.0 && fv > 0.0 && fs > 0.0) || ((ft + fv + fs) - 1.0).abs() > 1e-9 {
        return Err(Error::InvalidSplit(format!(
            "fractions {fractions:?} must be positive and sum to 1"
        )));
    }
    let n = ds.len();
    if n < 10 {
        return Err(Error::InvalidSplit(format!("{n} rows; need at least 10")));
    }
    let n_val = (fv * n as f64).round() as usize;
    let n_test = (fs * n as f64).round() as usize;
    let n_train = n.saturating_sub(n_val + n_test);
    if n_val == 0 || n_test == 0 || n_train == 0 {
        return Err(Error::InvalidSplit(format!(
            "{n} rows cannot give every split at least one sample"
        )));
    }

    let mut rng = RngState::new(seed);
    let mut by_class: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
    for (i, &y) in ds.labels.iter().enumerate() {
        by_class.entry(y).or_default().push(i);
    }
    let stratify = by_class
        .values()
        .all(|members| members.len() >= STRATIFY_MIN_PER_CLASS);
    let order: Vec<usize> = if stratify {
        let mut keyed = Vec::with_capacity(n);
        for (&class, members) in by_class.iter_mut() {
            rng.shuffle(members);
            let len = members.len() as f64;
            for (rank, &idx) in members.iter().enumerate() {
                keyed.push(((rank as f64 + 0.5) / len, class, idx));
            }
        }
        keyed.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
        keyed.into_iter().map(|(_, _, idx)| idx).collect()
    } else {
        let mut order: Vec<usize> = (0..n).collect();
        rng.shuffle(&mut order);
        order
    };

    let sorted = |s: &[usize]| {
        let mut v = s.to_vec();
        v.sort_unstable();
        v
    };
    Ok(DataSplit {
        train_idx: sorted(&order[..n_train]),
        val_idx: sorted(&order[n_train..n_train + n_val]),
        test_idx: sorted(&order[n_train + n_val..]),
    })
}

/// Per-column affine scaling fitted on training rows.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Standardizer {
    pub mean: Vec<f64>,
    pub stddev: Vec<f64>,
}

impl Standardizer {
    /// Population mean and standard deviation over `rows`, stddev floored.
    pub fn fit(features: &Matrix, rows: &[usize]) -> Result<Self> {
        if rows.is_empty() {
            return Err(Error::Empty("no rows to fit standardizer".into()));
        }
        let d = features.cols();
        let count = rows.len() as f64;
        let mut mean = vec![0.0; d];
        for &r in rows {
            for (m, v) in mean.iter_mut().zip(features.row(r)) {
                *m += v;
            }
        }
        mean.iter_mut().for_each(|m| *m /= count);
        let mut var = vec![0.0; d];
        for &r in rows {
            for ((s, v), m) in var.iter_mut().zip(features.row(r)).zip(&mean) {
                *s += (v - m) * (v - m);
            }
        }
        let stddev = var
            .into_iter()
            .map(|s| (s / count).sqrt().max(STDDEV_FLOOR))
            .collect();
        Ok(Self { mean, stddev })
    }

    pub fn transform(&self, features: &Matrix) -> Result<Matrix> {
        if features.cols() != self.mean.len() {
            return Err(Error::Dimension(format!(
                "standardizer fitted on {} columns, got {}",
                self.mean.len(),
                features.cols()
            )));
        }
        let mut out = features.clone();
        for r in 0..out.rows() {
            for ((v, m), s) in out.row_mut(r).iter_mut().zip(&self.mean).zip(&self.stddev) {
                *v = (*v - m) / s;
            }
        }
        Ok(out)
    }

    pub fn apply(&self, ds: &Dataset) -> Result<Dataset> {
        Dataset::new(self.transform(&ds.features)?, ds.labels.clone(), ds.num_classes)
    }
}

/// Fits on the training rows of `split` and transforms every row.
pub fn standardize_fit_apply(ds: &Dataset, split: &DataSplit) -> Result<(Dataset, Standardizer)> {
    split.validate(ds.len())?;
    let st = Standardizer::fit(&ds.features, &split.train_idx)?;
    Ok((st.apply(ds)?, st))
}
