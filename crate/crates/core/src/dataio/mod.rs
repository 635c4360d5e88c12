//! Matrices, labelled datasets, splits and the stratified sampler.

pub mod npy;

use std::collections::{BTreeMap, HashSet};
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::{seed, textprep, Matrix};

/// Largest CSV matrix accepted, in cells.
pub const CSV_MAX_CELLS: usize = 1_000_000;

/// On-disk element type of a matrix. Data is always held as `f64` in memory.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Dtype {
    F4,
    F8,
}

impl Dtype {
    pub fn width(self) -> usize {
        match self {
            Dtype::F4 => 4,
            Dtype::F8 => 8,
        }
    }
}

/// An n×d matrix of latent embeddings, one row per instance.
#[derive(Debug, Clone, PartialEq)]
pub struct ActivationMatrix {
    data: Matrix,
    dtype: Dtype,
    row_ids: Option<Vec<String>>,
}

impl ActivationMatrix {
    /// Wraps `data`, rejecting NaN and infinite entries.
    pub fn new(data: Matrix) -> Result<Self> {
        Self::with_dtype(data, Dtype::F8)
    }

    pub fn with_dtype(data: Matrix, dtype: Dtype) -> Result<Self> {
        for (col, column) in data.column_iter().enumerate() {
            if let Some(row) = column.iter().position(|v| !v.is_finite()) {
                return Err(Error::NonFinite { row, col });
            }
        }
        Ok(Self { data, dtype, row_ids: None })
    }

    pub fn with_row_ids(mut self, ids: Vec<String>) -> Result<Self> {
        if ids.len() != self.data.nrows() {
            return Err(Error::Shape(format!(
                "{} row ids for {} rows",
                ids.len(),
                self.data.nrows()
            )));
        }
        self.row_ids = Some(ids);
        Ok(self)
    }

    pub fn data(&self) -> &Matrix {
        &self.data
    }

    pub fn into_data(self) -> Matrix {
        self.data
    }

    pub fn dtype(&self) -> Dtype {
        self.dtype
    }

    pub fn row_ids(&self) -> Option<&[String]> {
        self.row_ids.as_deref()
    }

    pub fn nrows(&self) -> usize {
        self.data.nrows()
    }

    pub fn ncols(&self) -> usize {
        self.data.ncols()
    }

    pub fn is_non_negative(&self) -> bool {
        self.data.iter().all(|v| *v >= 0.0)
    }

    /// Returns the first negative entry, if any.
    pub fn first_negative(&self) -> Option<(usize, usize, f64)> {
        for (col, column) in self.data.column_iter().enumerate() {
            if let Some(row) = column.iter().position(|v| *v < 0.0) {
                return Some((row, col, column[row]));
            }
        }
        None
    }

    pub fn select_rows(&self, rows: &[usize]) -> Self {
        Self {
            data: self.data.select_rows(rows),
            dtype: self.dtype,
            row_ids: self
                .row_ids
                .as_ref()
                .map(|ids| rows.iter().map(|r| ids[*r].clone()).collect()),
        }
    }
}

/// Sidecar metadata written next to a matrix file as `<stem>.meta.json`.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct MatrixMeta {
    pub shape: [usize; 2],
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub row_ids: Option<Vec<String>>,
}

fn sidecar_path(path: &Path) -> PathBuf {
    path.with_extension("meta.json")
}

/// Loads a matrix from `.npy` or `.csv`, checking the optional sidecar.
pub fn load_matrix(path: impl AsRef<Path>) -> Result<ActivationMatrix> {
    let path = path.as_ref();
    let is_csv = path
        .extension()
        .is_some_and(|e| e.eq_ignore_ascii_case("csv"));
    let (data, dtype) = if is_csv {
        (read_csv_matrix(path)?, Dtype::F8)
    } else {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        npy::parse(&bytes)?
    };
    let mut matrix = ActivationMatrix::with_dtype(data, dtype)?;

    let sidecar = sidecar_path(path);
    if sidecar.exists() {
        let text = std::fs::read_to_string(&sidecar).map_err(|e| Error::io(&sidecar, e))?;
        let meta: MatrixMeta = serde_json::from_str(&text)?;
        if meta.shape != [matrix.nrows(), matrix.ncols()] {
            return Err(Error::Shape(format!(
                "sidecar declares {:?}, file holds [{}, {}]",
                meta.shape,
                matrix.nrows(),
                matrix.ncols()
            )));
        }
        if let Some(ids) = meta.row_ids {
            matrix = matrix.with_row_ids(ids)?;
        }
    }
    Ok(matrix)
}

/// Writes `.npy` (or `.csv` when the extension says so) plus a sidecar when
/// row ids are present.
pub fn save_matrix(path: impl AsRef<Path>, matrix: &ActivationMatrix) -> Result<()> {
    let path = path.as_ref();
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut out = BufWriter::new(file);
    let is_csv = path
        .extension()
        .is_some_and(|e| e.eq_ignore_ascii_case("csv"));
    if is_csv {
        write_csv_matrix(&mut out, matrix.data()).map_err(|e| Error::io(path, e))?;
    } else {
        npy::write(&mut out, matrix.data(), matrix.dtype()).map_err(|e| Error::io(path, e))?;
    }
    out.flush().map_err(|e| Error::io(path, e))?;

    if let Some(ids) = matrix.row_ids() {
        let meta = MatrixMeta {
            shape: [matrix.nrows(), matrix.ncols()],
            row_ids: Some(ids.to_vec()),
        };
        write_json(sidecar_path(path), &meta)?;
    }
    Ok(())
}

/// Shorthand for writing a bare `f64` matrix as `.npy`.
pub fn save_npy(path: impl AsRef<Path>, data: &Matrix) -> Result<()> {
    save_matrix(path, &ActivationMatrix::new(data.clone())?)
}

pub fn load_npy(path: impl AsRef<Path>) -> Result<Matrix> {
    Ok(load_matrix(path)?.into_data())
}

fn read_csv_matrix(path: &Path) -> Result<Matrix> {
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(true)
        .from_path(path)
        .map_err(|e| Error::Format(format!("{}: {e}", path.display())))?;
    let cols = reader
        .headers()
        .map_err(|e| Error::Format(e.to_string()))?
        .len();
    let mut values = Vec::new();
    let mut rows = 0;
    for record in reader.records() {
        let record = record.map_err(|e| Error::Format(e.to_string()))?;
        if record.len() != cols {
            return Err(Error::Format(format!(
                "row {rows} has {} fields, header has {cols}",
                record.len()
            )));
        }
        for field in record.iter() {
            let v: f64 = field
                .trim()
                .parse()
                .map_err(|_| Error::Format(format!("row {rows}: cannot parse {field:?}")))?;
            values.push(v);
        }
        rows += 1;
        if rows * cols > CSV_MAX_CELLS {
            return Err(Error::Format(format!(
                "CSV matrices are limited to {CSV_MAX_CELLS} cells"
            )));
        }
    }
    Ok(Matrix::from_row_slice(rows, cols, &values))
}

fn write_csv_matrix<W: Write>(out: &mut W, data: &Matrix) -> std::io::Result<()> {
    let header: Vec<String> = (0..data.ncols()).map(|j| format!("c{j}")).collect();
    writeln!(out, "{}", header.join(","))?;
    for row in data.row_iter() {
        // `{:?}` prints the shortest representation that round-trips.
        let fields: Vec<String> = row.iter().map(|v| format!("{v:?}")).collect();
        writeln!(out, "{}", fields.join(","))?;
    }
    Ok(())
}

pub(crate) fn write_json<T: Serialize>(path: impl AsRef<Path>, value: &T) -> Result<()> {
    let path = path.as_ref();
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    std::fs::write(path, text).map_err(|e| Error::io(path, e))
}

pub(crate) fn read_json<T: serde::de::DeserializeOwned>(path: impl AsRef<Path>) -> Result<T> {
    let path = path.as_ref();
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    Ok(serde_json::from_str(&text)?)
}

/// A token span `[start, end)` tagged with an aspect name.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Annotation {
    pub start: usize,
    pub end: usize,
    pub aspect: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Instance {
    pub id: String,
    pub y: usize,
    pub g: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub text: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub annotations: Option<Vec<Annotation>>,
}

/// Header file of a dataset: class and group names.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetHeader {
    pub class_names: Vec<String>,
    pub group_names: Vec<String>,
}

/// Instances with a task label `y` in `[0, K)` and a binary group `g`.
#[derive(Debug, Clone, PartialEq)]
pub struct LabeledDataset {
    instances: Vec<Instance>,
    header: DatasetHeader,
}

impl LabeledDataset {
    pub fn new(instances: Vec<Instance>, class_names: Vec<String>, group_names: Vec<String>) -> Result<Self> {
        if group_names.len() != 2 {
            return Err(Error::invalid(format!(
                "exactly two group names required, got {}",
                group_names.len()
            )));
        }
        let k = class_names.len();
        let mut seen = HashSet::with_capacity(instances.len());
        for inst in &instances {
            if inst.y >= k {
                return Err(Error::invalid(format!("instance {}: class {} >= K={k}", inst.id, inst.y)));
            }
            if inst.g >= 2 {
                return Err(Error::invalid(format!("instance {}: group {} not binary", inst.id, inst.g)));
            }
            if !seen.insert(inst.id.as_str()) {
                return Err(Error::invalid(format!("duplicate instance id {}", inst.id)));
            }
            if let (Some(text), Some(spans)) = (&inst.text, &inst.annotations) {
                let len = textprep::tokenize(text).len();
                if let Some(a) = spans.iter().find(|a| a.start > a.end || a.end > len) {
                    return Err(Error::invalid(format!(
                        "instance {}: span [{}, {}) outside {len} tokens",
                        inst.id, a.start, a.end
                    )));
                }
            }
        }
        Ok(Self { instances, header: DatasetHeader { class_names, group_names } })
    }

    /// Builds a dataset from bare label vectors with generated ids and names.
    pub fn from_labels(y: &[usize], g: &[usize], n_classes: usize) -> Result<Self> {
        if y.len() != g.len() {
            return Err(Error::Shape(format!("{} labels vs {} groups", y.len(), g.len())));
        }
        let instances = y
            .iter()
            .zip(g)
            .enumerate()
            .map(|(i, (y, g))| Instance {
                id: i.to_string(),
                y: *y,
                g: *g,
                text: None,
                annotations: None,
            })
            .collect();
        let classes = (0..n_classes).map(|c| format!("class{c}")).collect();
        Self::new(instances, classes, vec!["group0".into(), "group1".into()])
    }

    pub fn instances(&self) -> &[Instance] {
        &self.instances
    }

    pub fn len(&self) -> usize {
        self.instances.len()
    }

    pub fn is_empty(&self) -> bool {
        self.instances.is_empty()
    }

    pub fn n_classes(&self) -> usize {
        self.header.class_names.len()
    }

    pub fn class_names(&self) -> &[String] {
        &self.header.class_names
    }

    pub fn group_names(&self) -> &[String] {
        &self.header.group_names
    }

    pub fn header(&self) -> &DatasetHeader {
        &self.header
    }

    pub fn labels(&self) -> Vec<usize> {
        self.instances.iter().map(|i| i.y).collect()
    }

    pub fn groups(&self) -> Vec<usize> {
        self.instances.iter().map(|i| i.g).collect()
    }

    pub fn subset(&self, rows: &[usize]) -> Self {
        Self {
            instances: rows.iter().map(|r| self.instances[*r].clone()).collect(),
            header: self.header.clone(),
        }
    }

    /// Instance counts per `(class, group)` cell.
    pub fn cell_counts(&self) -> BTreeMap<(usize, usize), usize> {
        let mut counts = BTreeMap::new();
        for inst in &self.instances {
            *counts.entry((inst.y, inst.g)).or_insert(0) += 1;
        }
        counts
    }
}

/// Path of the header file belonging to a JSON-Lines dataset.
pub fn header_path_for(jsonl: &Path) -> PathBuf {
    jsonl.with_extension("header.json")
}

pub fn load_dataset(jsonl: impl AsRef<Path>, header: impl AsRef<Path>) -> Result<LabeledDataset> {
    let jsonl = jsonl.as_ref();
    let header: DatasetHeader = read_json(header)?;
    let file = File::open(jsonl).map_err(|e| Error::io(jsonl, e))?;
    let mut instances = Vec::new();
    for (lineno, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|e| Error::io(jsonl, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let inst: Instance = serde_json::from_str(&line)
            .map_err(|e| Error::Format(format!("{}:{}: {e}", jsonl.display(), lineno + 1)))?;
        instances.push(inst);
    }
    LabeledDataset::new(instances, header.class_names, header.group_names)
}

pub fn save_dataset(jsonl: impl AsRef<Path>, header: impl AsRef<Path>, ds: &LabeledDataset) -> Result<()> {
    let jsonl = jsonl.as_ref();
    let mut out = String::new();
    for inst in &ds.instances {
        out.push_str(&serde_json::to_string(inst)?);
        out.push('\n');
    }
    std::fs::write(jsonl, out).map_err(|e| Error::io(jsonl, e))?;
    write_json(header, &ds.header)
}

/// Train/validation/test fractions and the shuffle seed.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SplitSpec {
    pub train_frac: f64,
    pub valid_frac: f64,
    pub test_frac: f64,
    pub seed: u64,
}

impl Default for SplitSpec {
    fn default() -> Self {
        Self { train_frac: 0.7, valid_frac: 0.1, test_frac: 0.2, seed: 0 }
    }
}

impl SplitSpec {
    pub fn new(train_frac: f64, valid_frac: f64, test_frac: f64, seed: u64) -> Result<Self> {
        let spec = Self { train_frac, valid_frac, test_frac, seed };
        spec.validate()?;
        Ok(spec)
    }

    pub fn validate(&self) -> Result<()> {
        let fracs = [self.train_frac, self.valid_frac, self.test_frac];
        if fracs.iter().any(|f| !(*f > 0.0 && *f < 1.0)) {
            return Err(Error::invalid(format!("split fractions must lie in (0,1): {fracs:?}")));
        }
        if (fracs.iter().sum::<f64>() - 1.0).abs() > 1e-9 {
            return Err(Error::invalid(format!("split fractions must sum to 1: {fracs:?}")));
        }
        Ok(())
    }

    /// Sizes for `n` items: each part gets `floor(n·frac)`, the leftover goes
    /// to train.
    pub fn sizes(&self, n: usize) -> (usize, usize, usize) {
        let part = |f: f64| ((n as f64) * f + 1e-9).floor() as usize;
        let valid = part(self.valid_frac);
        let test = part(self.test_frac);
        (n - valid - test, valid, test)
    }
}

/// Index sets of a three-way split.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Split {
    pub train: Vec<usize>,
    pub valid: Vec<usize>,
    pub test: Vec<usize>,
}

/// Seeded random partition of `0..n`.
pub fn split_indices(n: usize, spec: &SplitSpec) -> Result<Split> {
    spec.validate()?;
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut seed::stream(spec.seed, "split"));
    let (n_train, n_valid, _) = spec.sizes(n);
    let test = order.split_off(n_train + n_valid);
    let valid = order.split_off(n_train);
    Ok(Split { train: order, valid, test })
}

pub fn split(ds: &LabeledDataset, spec: &SplitSpec) -> Result<(LabeledDataset, LabeledDataset, LabeledDataset)> {
    let s = split_indices(ds.len(), spec)?;
    Ok((ds.subset(&s.train), ds.subset(&s.valid), ds.subset(&s.test)))
}

/// Hamilton (largest-remainder) apportionment of `m` seats over `counts`.
///
/// Ties between equal remainders go to the earlier cell.
pub fn apportion(counts: &[usize], m: usize) -> Vec<usize> {
    let n: usize = counts.iter().sum();
    if n == 0 {
        return vec![0; counts.len()];
    }
    let quotas: Vec<f64> = counts.iter().map(|c| m as f64 * *c as f64 / n as f64).collect();
    let mut seats: Vec<usize> = quotas.iter().map(|q| q.floor() as usize).collect();
    let assigned: usize = seats.iter().sum();
    let mut order: Vec<usize> = (0..counts.len()).collect();
    order.sort_by(|a, b| {
        let ra = quotas[*a] - quotas[*a].floor();
        let rb = quotas[*b] - quotas[*b].floor();
        rb.total_cmp(&ra).then(a.cmp(b))
    });
    for idx in order.into_iter().take(m.saturating_sub(assigned)) {
        seats[idx] += 1;
    }
    seats
}

/// Row indices (ascending) of a stratified sample of size `m` that keeps
/// every `(class, group)` cell's share of the source.
pub fn stratified_indices(ds: &LabeledDataset, m: usize, seed: u64) -> Result<Vec<usize>> {
    let n = ds.len();
    if m > n {
        return Err(Error::invalid(format!("sample size {m} exceeds dataset size {n}")));
    }
    let mut cells: BTreeMap<(usize, usize), Vec<usize>> = BTreeMap::new();
    for (i, inst) in ds.instances.iter().enumerate() {
        cells.entry((inst.y, inst.g)).or_default().push(i);
    }
    let counts: Vec<usize> = cells.values().map(Vec::len).collect();
    let seats = apportion(&counts, m);

    let mut rng = seed::stream(seed, "stratified");
    let mut chosen = Vec::with_capacity(m);
    for (members, take) in cells.into_values().zip(seats) {
        let mut members = members;
        members.shuffle(&mut rng);
        chosen.extend_from_slice(&members[..take]);
    }
    chosen.sort_unstable();
    Ok(chosen)
}

pub fn stratified_sample(ds: &LabeledDataset, m: usize, seed: u64) -> Result<LabeledDataset> {
    Ok(ds.subset(&stratified_indices(ds, m, seed)?))
}
