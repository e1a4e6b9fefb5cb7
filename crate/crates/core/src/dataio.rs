//! Sparse binary-classification datasets in LibSVM text format.
//!
//! Rows are stored in CSR layout with 0-based feature indices internally;
//! the text format uses 1-based indices. Labels are normalized to ±1 at
//! parse time.

use std::collections::HashMap;
use std::io::{BufRead, Write};

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum DataError {
    #[error("line {line}: {reason}")]
    Parse { line: usize, reason: String },
    #[error("invalid argument: {0}")]
    Argument(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

fn parse_err(line: usize, reason: impl Into<String>) -> DataError {
    DataError::Parse {
        line,
        reason: reason.into(),
    }
}

/// Borrowed view of one sparse row.
#[derive(Debug, Clone, Copy)]
pub struct RowView<'a> {
    pub indices: &'a [u32],
    pub values: &'a [f64],
}

impl RowView<'_> {
    #[inline]
    pub fn dot(&self, dense: &[f64]) -> f64 {
        self.indices
            .iter()
            .zip(self.values)
            .map(|(&j, &v)| v * dense[j as usize])
            .sum()
    }

    /// `out += scale * row`
    #[inline]
    pub fn axpy(&self, scale: f64, out: &mut [f64]) {
        for (&j, &v) in self.indices.iter().zip(self.values) {
            out[j as usize] += scale * v;
        }
    }

    pub fn nnz(&self) -> usize {
        self.indices.len()
    }
}

/// Immutable sparse dataset with ±1 labels.
#[derive(Debug, Clone, PartialEq)]
pub struct SparseDataset {
    row_ptr: Vec<usize>,
    col_idx: Vec<u32>,
    values: Vec<f64>,
    labels: Vec<f64>,
    n_features: usize,
}

impl SparseDataset {
    /// Builds a dataset from rows of `(0-based index, value)` pairs.
    ///
    /// Indices in each row must strictly increase and stay below `n_features`;
    /// labels must be exactly ±1.
    pub fn from_rows(
        rows: Vec<Vec<(u32, f64)>>,
        labels: Vec<f64>,
        n_features: usize,
    ) -> Result<Self, DataError> {
        if rows.len() != labels.len() {
            return Err(DataError::Argument(format!(
                "{} rows but {} labels",
                rows.len(),
                labels.len()
            )));
        }
        let mut row_ptr = Vec::with_capacity(rows.len() + 1);
        let mut col_idx = Vec::new();
        let mut values = Vec::new();
        row_ptr.push(0);
        for (i, row) in rows.iter().enumerate() {
            if labels[i] != 1.0 && labels[i] != -1.0 {
                return Err(DataError::Argument(format!(
                    "row {i}: label {} is not ±1",
                    labels[i]
                )));
            }
            let mut prev: Option<u32> = None;
            for &(j, v) in row {
                if prev.is_some_and(|p| j <= p) {
                    return Err(DataError::Argument(format!(
                        "row {i}: feature indices not strictly increasing"
                    )));
                }
                if j as usize >= n_features {
                    return Err(DataError::Argument(format!(
                        "row {i}: feature index {} exceeds n_features {n_features}",
                        j + 1
                    )));
                }
                if !v.is_finite() {
                    return Err(DataError::Argument(format!("row {i}: non-finite value")));
                }
                prev = Some(j);
                col_idx.push(j);
                values.push(v);
            }
            row_ptr.push(col_idx.len());
        }
        Ok(Self {
            row_ptr,
            col_idx,
            values,
            labels,
            n_features,
        })
    }

    pub fn n_points(&self) -> usize {
        self.labels.len()
    }

    pub fn n_features(&self) -> usize {
        self.n_features
    }

    pub fn nnz(&self) -> usize {
        self.values.len()
    }

    pub fn labels(&self) -> &[f64] {
        &self.labels
    }

    #[inline]
    pub fn label(&self, i: usize) -> f64 {
        self.labels[i]
    }

    #[inline]
    pub fn row(&self, i: usize) -> RowView<'_> {
        let (lo, hi) = (self.row_ptr[i], self.row_ptr[i + 1]);
        RowView {
            indices: &self.col_idx[lo..hi],
            values: &self.values[lo..hi],
        }
    }

    /// Copies the given rows, in order, into a new dataset with the same
    /// feature dimension.
    pub fn select(&self, indices: &[usize]) -> SparseDataset {
        let mut row_ptr = Vec::with_capacity(indices.len() + 1);
        let mut col_idx = Vec::new();
        let mut values = Vec::new();
        let mut labels = Vec::with_capacity(indices.len());
        row_ptr.push(0);
        for &i in indices {
            let r = self.row(i);
            col_idx.extend_from_slice(r.indices);
            values.extend_from_slice(r.values);
            labels.push(self.labels[i]);
            row_ptr.push(col_idx.len());
        }
        SparseDataset {
            row_ptr,
            col_idx,
            values,
            labels,
            n_features: self.n_features,
        }
    }

    /// Returns a copy with a constant feature `value` appended as a new last
    /// column on every row.
    pub fn with_bias(&self, value: f64) -> SparseDataset {
        let bias_idx = self.n_features as u32;
        let mut row_ptr = Vec::with_capacity(self.row_ptr.len());
        let mut col_idx = Vec::with_capacity(self.nnz() + self.n_points());
        let mut vals = Vec::with_capacity(self.nnz() + self.n_points());
        row_ptr.push(0);
        for i in 0..self.n_points() {
            let r = self.row(i);
            col_idx.extend_from_slice(r.indices);
            vals.extend_from_slice(r.values);
            col_idx.push(bias_idx);
            vals.push(value);
            row_ptr.push(col_idx.len());
        }
        SparseDataset {
            row_ptr,
            col_idx,
            values: vals,
            labels: self.labels.clone(),
            n_features: self.n_features + 1,
        }
    }

    /// Writes the dataset as LibSVM text. Values use Rust's shortest
    /// round-trip representation, so reparsing reproduces the dataset.
    pub fn write_libsvm<W: Write>(&self, mut out: W) -> std::io::Result<()> {
        for i in 0..self.n_points() {
            out.write_all(if self.labels[i] > 0.0 { b"+1" } else { b"-1" })?;
            let r = self.row(i);
            for (&j, &v) in r.indices.iter().zip(r.values) {
                write!(out, " {}:{}", j + 1, v)?;
            }
            out.write_all(b"\n")?;
        }
        Ok(())
    }

    pub fn to_libsvm_string(&self) -> String {
        let mut buf = Vec::new();
        self.write_libsvm(&mut buf).expect("writing to a Vec cannot fail");
        String::from_utf8(buf).expect("LibSVM output is ASCII")
    }
}

/// A set of distinct point indices. `Full` stands for every point of a
/// dataset without materializing the list.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum IndexSubset {
    Full(usize),
    Explicit(Vec<usize>),
}

impl IndexSubset {
    pub fn full(n_points: usize) -> Self {
        IndexSubset::Full(n_points)
    }

    /// Validates uniqueness and range against `n_points`.
    pub fn explicit(indices: Vec<usize>, n_points: usize) -> Result<Self, DataError> {
        let mut seen = vec![false; n_points];
        for &i in &indices {
            if i >= n_points {
                return Err(DataError::Argument(format!(
                    "index {i} out of range for {n_points} points"
                )));
            }
            if std::mem::replace(&mut seen[i], true) {
                return Err(DataError::Argument(format!("duplicate index {i}")));
            }
        }
        Ok(IndexSubset::Explicit(indices))
    }

    pub fn len(&self) -> usize {
        match self {
            IndexSubset::Full(n) => *n,
            IndexSubset::Explicit(v) => v.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn is_full(&self) -> bool {
        matches!(self, IndexSubset::Full(_))
    }

    pub fn iter(&self) -> SubsetIter<'_> {
        match self {
            IndexSubset::Full(n) => SubsetIter::Range(0..*n),
            IndexSubset::Explicit(v) => SubsetIter::List(v.iter()),
        }
    }

    pub fn to_vec(&self) -> Vec<usize> {
        self.iter().collect()
    }
}

pub enum SubsetIter<'a> {
    Range(std::ops::Range<usize>),
    List(std::slice::Iter<'a, usize>),
}

impl Iterator for SubsetIter<'_> {
    type Item = usize;

    #[inline]
    fn next(&mut self) -> Option<usize> {
        match self {
            SubsetIter::Range(r) => r.next(),
            SubsetIter::List(it) => it.next().copied(),
        }
    }

    fn size_hint(&self) -> (usize, Option<usize>) {
        match self {
            SubsetIter::Range(r) => r.size_hint(),
            SubsetIter::List(it) => it.size_hint(),
        }
    }
}

impl ExactSizeIterator for SubsetIter<'_> {}

/// Parses LibSVM text. `n_features` overrides the dimension inferred from
/// the largest index; it must not be smaller than that index.
pub fn parse_libsvm<R: BufRead>(
    reader: R,
    n_features: Option<usize>,
) -> Result<SparseDataset, DataError> {
    let mut rows = Vec::new();
    let mut raw_labels = Vec::new();
    let mut distinct: Vec<f64> = Vec::with_capacity(2);
    let mut max_index = 0usize;

    for (lineno, line) in reader.lines().enumerate() {
        let lineno = lineno + 1;
        let line = line?;
        let line = line.strip_suffix('\r').unwrap_or(&line);
        if line.contains('#') {
            return Err(parse_err(lineno, "comments are not supported"));
        }
        let mut tokens = line.split_whitespace();
        let Some(label_tok) = tokens.next() else {
            continue;
        };
        let label: f64 = label_tok
            .parse()
            .map_err(|_| parse_err(lineno, format!("invalid label {label_tok:?}")))?;
        if !label.is_finite() {
            return Err(parse_err(lineno, format!("invalid label {label_tok:?}")));
        }
        if !distinct.contains(&label) {
            if distinct.len() == 2 {
                return Err(parse_err(
                    lineno,
                    format!("third distinct label {label_tok:?}; only binary labels are supported"),
                ));
            }
            distinct.push(label);
        }

        let mut row = Vec::new();
        let mut prev = 0usize;
        for tok in tokens {
            let (idx_s, val_s) = tok
                .split_once(':')
                .ok_or_else(|| parse_err(lineno, format!("expected index:value, got {tok:?}")))?;
            let idx: usize = idx_s
                .parse()
                .map_err(|_| parse_err(lineno, format!("invalid feature index {idx_s:?}")))?;
            if idx == 0 {
                return Err(parse_err(lineno, "feature indices are 1-based"));
            }
            if idx <= prev {
                return Err(parse_err(
                    lineno,
                    format!("feature index {idx} does not increase (previous {prev})"),
                ));
            }
            if idx > u32::MAX as usize {
                return Err(parse_err(lineno, format!("feature index {idx} too large")));
            }
            let val: f64 = val_s
                .parse()
                .map_err(|_| parse_err(lineno, format!("invalid feature value {val_s:?}")))?;
            if !val.is_finite() {
                return Err(parse_err(lineno, format!("non-finite feature value {val_s:?}")));
            }
            prev = idx;
            row.push(((idx - 1) as u32, val));
        }
        max_index = max_index.max(prev);
        rows.push(row);
        raw_labels.push(label);
    }

    let n_features = match n_features {
        Some(n) if n < max_index => {
            return Err(DataError::Argument(format!(
                "n_features override {n} is smaller than the largest index {max_index}"
            )))
        }
        Some(n) => n,
        None => max_index,
    };
    let positive = positive_label(&distinct);
    let labels = raw_labels
        .into_iter()
        .map(|l| if l == positive { 1.0 } else { -1.0 })
        .collect();
    SparseDataset::from_rows(rows, labels, n_features)
}

/// Picks which raw label maps to +1. `{1,2}` follows the LibSVM convention
/// 1 → +1, 2 → −1; otherwise the larger label is positive.
fn positive_label(distinct: &[f64]) -> f64 {
    match *distinct {
        [] => 1.0,
        [only] => {
            if only == 1.0 || (only > 0.0 && only != 2.0) {
                only
            } else {
                f64::NAN
            }
        }
        [a, b] => {
            let (lo, hi) = if a < b { (a, b) } else { (b, a) };
            if lo == 1.0 && hi == 2.0 {
                1.0
            } else {
                hi
            }
        }
        _ => unreachable!("at most two distinct labels"),
    }
}

pub fn parse_libsvm_str(text: &str, n_features: Option<usize>) -> Result<SparseDataset, DataError> {
    parse_libsvm(text.as_bytes(), n_features)
}

fn shuffled(n: usize, seed: u64) -> Vec<usize> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut idx: Vec<usize> = (0..n).collect();
    for i in (1..n).rev() {
        let j = rng.random_range(0..=i);
        idx.swap(i, j);
    }
    idx
}

/// Random train/test partition. Each side keeps the original row order.
pub fn split_train_test(
    data: &SparseDataset,
    train_fraction: f64,
    seed: u64,
) -> Result<(SparseDataset, SparseDataset), DataError> {
    if !(train_fraction > 0.0 && train_fraction < 1.0) {
        return Err(DataError::Argument(format!(
            "train fraction {train_fraction} must lie in (0, 1)"
        )));
    }
    let n = data.n_points();
    if n < 2 {
        return Err(DataError::Argument(format!(
            "cannot split a dataset of {n} points"
        )));
    }
    let n_train = ((n as f64 * train_fraction).round() as usize).clamp(1, n - 1);
    let perm = shuffled(n, seed);
    let mut train = perm[..n_train].to_vec();
    let mut test = perm[n_train..].to_vec();
    train.sort_unstable();
    test.sort_unstable();
    Ok((data.select(&train), data.select(&test)))
}

/// K-fold partition into `(train, test)` index subsets. Test folds differ in
/// size by at most one.
pub fn k_fold(
    data: &SparseDataset,
    k: usize,
    seed: u64,
) -> Result<Vec<(IndexSubset, IndexSubset)>, DataError> {
    let n = data.n_points();
    if k < 2 || k > n {
        return Err(DataError::Argument(format!(
            "k = {k} folds requires 2 <= k <= {n}"
        )));
    }
    let perm = shuffled(n, seed);
    let (base, extra) = (n / k, n % k);
    let mut folds = Vec::with_capacity(k);
    let mut start = 0;
    for f in 0..k {
        let len = base + usize::from(f < extra);
        let mut test = perm[start..start + len].to_vec();
        test.sort_unstable();
        let mut in_test = vec![false; n];
        for &i in &test {
            in_test[i] = true;
        }
        let train = (0..n).filter(|&i| !in_test[i]).collect();
        folds.push((IndexSubset::Explicit(train), IndexSubset::Explicit(test)));
        start += len;
    }
    Ok(folds)
}

/// Draws `size` distinct indices uniformly from `0..n_points` by a partial
/// Fisher-Yates shuffle over a sparse swap table. The result is sorted.
/// Drawing the whole range returns `Full` without touching the RNG.
pub fn draw_subsample<R: Rng + ?Sized>(
    n_points: usize,
    size: usize,
    rng: &mut R,
) -> Result<IndexSubset, DataError> {
    if size == 0 || size > n_points {
        return Err(DataError::Argument(format!(
            "subsample size {size} must lie in 1..={n_points}"
        )));
    }
    if size == n_points {
        return Ok(IndexSubset::Full(n_points));
    }
    let mut swapped: HashMap<usize, usize> = HashMap::with_capacity(2 * size);
    let mut out = Vec::with_capacity(size);
    for i in 0..size {
        let j = rng.random_range(i..n_points);
        let at_j = *swapped.get(&j).unwrap_or(&j);
        let at_i = *swapped.get(&i).unwrap_or(&i);
        swapped.insert(j, at_i);
        out.push(at_j);
    }
    out.sort_unstable();
    Ok(IndexSubset::Explicit(out))
}
