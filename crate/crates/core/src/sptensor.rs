//! Sparse labeled tensors in coordinate (COO) form.
//!
//! A [`SparseTensor`] is the dataset representation used throughout this
//! crate: a shape with per-mode semantics (element modes are nominal, count
//! modes are ordinal), a label/index bijection per mode, and a list of
//! observed entries in insertion order. The full tensor is never
//! materialized; completion models only ever touch observed entries.
//!
//! Duplicate coordinates are permitted while building and are collapsed by
//! [`SparseTensor::dedup`]. Train/test splitting refuses tensors that have
//! not been deduplicated first, so a coordinate can never land on both sides
//! of a split.

use std::collections::{HashMap, HashSet};
use std::fmt;
use std::fs::File;
use std::io::{self, BufRead, BufReader, Read, Write};
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::rng::Rng;

#[derive(Debug, Error)]
pub enum TensorError {
    #[error("index {index} out of bounds on mode {mode} (extent {extent})")]
    OutOfBounds {
        mode: usize,
        index: usize,
        extent: usize,
    },
    #[error("coordinate has {got} modes, tensor has {want}")]
    ArityMismatch { got: usize, want: usize },
    #[error("invalid shape: {0}")]
    InvalidShape(String),
    #[error("invalid index map: {0}")]
    InvalidIndexMap(String),
    #[error("split requires a deduplicated tensor; call dedup first")]
    NotDeduped,
    #[error("train_count {train_count} out of range for {entries} entries (need 0 < train_count < entries)")]
    TrainCountOutOfRange { train_count: usize, entries: usize },
    #[error("tensor text format, line {line}: {msg}")]
    Format { line: usize, msg: String },
    #[error(transparent)]
    Io(#[from] io::Error),
}

/// What a tensor mode indexes: a nominal element symbol or an ordinal atom
/// count.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ModeKind {
    Element,
    Count,
}

impl fmt::Display for ModeKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            ModeKind::Element => f.write_str("element"),
            ModeKind::Count => f.write_str("count"),
        }
    }
}

impl FromStr for ModeKind {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "element" => Ok(ModeKind::Element),
            "count" => Ok(ModeKind::Count),
            other => Err(format!("unknown mode kind {other:?}")),
        }
    }
}

/// Tensor extents plus the kind tag of every mode.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Shape {
    dims: Vec<usize>,
    kinds: Vec<ModeKind>,
}

impl Shape {
    pub fn new(dims: Vec<usize>, kinds: Vec<ModeKind>) -> Result<Self, TensorError> {
        if dims.len() != kinds.len() {
            return Err(TensorError::InvalidShape(format!(
                "{} extents but {} mode kinds",
                dims.len(),
                kinds.len()
            )));
        }
        if dims.len() < 2 {
            return Err(TensorError::InvalidShape(format!(
                "need at least 2 modes, got {}",
                dims.len()
            )));
        }
        if let Some(pos) = dims.iter().position(|&d| d == 0) {
            return Err(TensorError::InvalidShape(format!(
                "mode {pos} has extent 0"
            )));
        }
        Ok(Shape { dims, kinds })
    }

    pub fn ndims(&self) -> usize {
        self.dims.len()
    }

    pub fn dims(&self) -> &[usize] {
        &self.dims
    }

    pub fn kinds(&self) -> &[ModeKind] {
        &self.kinds
    }

    pub fn dim(&self, mode: usize) -> usize {
        self.dims[mode]
    }

    pub fn kind(&self, mode: usize) -> ModeKind {
        self.kinds[mode]
    }

    /// Modes tagged [`ModeKind::Count`], in order.
    pub fn count_modes(&self) -> Vec<usize> {
        (0..self.ndims())
            .filter(|&n| self.kinds[n] == ModeKind::Count)
            .collect()
    }

    /// Total cell count as an `f64` (extents can overflow `usize` products).
    pub fn cell_count(&self) -> f64 {
        self.dims.iter().map(|&d| d as f64).product()
    }

    pub fn check_coord(&self, coord: &[usize]) -> Result<(), TensorError> {
        if coord.len() != self.ndims() {
            return Err(TensorError::ArityMismatch {
                got: coord.len(),
                want: self.ndims(),
            });
        }
        for (mode, (&index, &extent)) in coord.iter().zip(&self.dims).enumerate() {
            if index >= extent {
                return Err(TensorError::OutOfBounds {
                    mode,
                    index,
                    extent,
                });
            }
        }
        Ok(())
    }
}

/// Bidirectional label/index mapping for one mode. Indices are contiguous
/// from zero; labels are distinct and printable in the text format (no
/// commas, no newlines, no leading `#`).
#[derive(Clone, Debug)]
pub struct ModeIndex {
    labels: Vec<String>,
    by_label: HashMap<String, usize>,
}

impl PartialEq for ModeIndex {
    fn eq(&self, other: &Self) -> bool {
        self.labels == other.labels
    }
}

impl ModeIndex {
    pub fn from_labels(labels: Vec<String>) -> Result<Self, TensorError> {
        let mut by_label = HashMap::with_capacity(labels.len());
        for (i, label) in labels.iter().enumerate() {
            if label.is_empty() {
                return Err(TensorError::InvalidIndexMap(format!(
                    "empty label at index {i}"
                )));
            }
            if label.contains(',') || label.contains('\n') || label.contains('\r') {
                return Err(TensorError::InvalidIndexMap(format!(
                    "label {label:?} contains a reserved character"
                )));
            }
            if label.starts_with('#') {
                return Err(TensorError::InvalidIndexMap(format!(
                    "label {label:?} may not start with '#'"
                )));
            }
            if by_label.insert(label.clone(), i).is_some() {
                return Err(TensorError::InvalidIndexMap(format!(
                    "duplicate label {label:?}"
                )));
            }
        }
        Ok(ModeIndex { labels, by_label })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn index_of(&self, label: &str) -> Option<usize> {
        self.by_label.get(label).copied()
    }

    pub fn label_of(&self, index: usize) -> &str {
        &self.labels[index]
    }

    pub fn labels(&self) -> &[String] {
        &self.labels
    }
}

/// One [`ModeIndex`] per mode.
#[derive(Clone, Debug, PartialEq)]
pub struct IndexMap {
    modes: Vec<ModeIndex>,
}

impl IndexMap {
    pub fn new(modes: Vec<ModeIndex>) -> Self {
        IndexMap { modes }
    }

    /// Generic labels for tensors that do not come from formulas: element
    /// modes get `e0, e1, ...`, count modes get `1, 2, ...` so the ordinal
    /// label still names the count it stands for.
    pub fn default_for(shape: &Shape) -> Self {
        let modes = shape
            .dims()
            .iter()
            .zip(shape.kinds())
            .map(|(&extent, kind)| {
                let labels = (0..extent)
                    .map(|i| match kind {
                        ModeKind::Element => format!("e{i}"),
                        ModeKind::Count => format!("{}", i + 1),
                    })
                    .collect();
                ModeIndex::from_labels(labels).expect("generated labels are valid")
            })
            .collect();
        IndexMap { modes }
    }

    pub fn mode(&self, n: usize) -> &ModeIndex {
        &self.modes[n]
    }

    pub fn modes(&self) -> &[ModeIndex] {
        &self.modes
    }

    pub fn len(&self) -> usize {
        self.modes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.modes.is_empty()
    }
}

/// One observed cell: a coordinate and the property value at it.
#[derive(Clone, Debug, PartialEq)]
pub struct Entry {
    pub(crate) coord: Vec<usize>,
    pub(crate) value: f64,
}

impl Entry {
    pub fn coord(&self) -> &[usize] {
        &self.coord
    }

    pub fn value(&self) -> f64 {
        self.value
    }
}

/// How [`SparseTensor::dedup`] collapses coordinates that were inserted more
/// than once.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DedupPolicy {
    /// Replace each duplicate group by its arithmetic-mean value.
    Mean,
    /// Keep the first-inserted value of each group.
    First,
    /// Remove every coordinate that appeared more than once.
    DropAll,
}

impl fmt::Display for DedupPolicy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            DedupPolicy::Mean => f.write_str("mean"),
            DedupPolicy::First => f.write_str("first"),
            DedupPolicy::DropAll => f.write_str("drop_all"),
        }
    }
}

impl FromStr for DedupPolicy {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "mean" => Ok(DedupPolicy::Mean),
            "first" => Ok(DedupPolicy::First),
            "drop_all" => Ok(DedupPolicy::DropAll),
            other => Err(format!(
                "unknown dedup policy {other:?} (expected mean, first, or drop_all)"
            )),
        }
    }
}

/// Audit counts from a [`SparseTensor::dedup`] pass.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct DedupReport {
    /// Coordinates that appeared more than once.
    pub duplicate_coords: usize,
    /// Total entries sitting at those coordinates.
    pub duplicate_entries: usize,
    pub entries_in: usize,
    pub entries_out: usize,
}

/// Sparse coordinate-list tensor with labeled modes.
#[derive(Clone, Debug, PartialEq)]
pub struct SparseTensor {
    shape: Shape,
    index_map: IndexMap,
    entries: Vec<Entry>,
    deduped: bool,
}

impl SparseTensor {
    pub fn new(shape: Shape, index_map: IndexMap) -> Result<Self, TensorError> {
        if index_map.len() != shape.ndims() {
            return Err(TensorError::InvalidIndexMap(format!(
                "{} mode maps for {} modes",
                index_map.len(),
                shape.ndims()
            )));
        }
        for (n, mode) in index_map.modes().iter().enumerate() {
            if mode.len() != shape.dim(n) {
                return Err(TensorError::InvalidIndexMap(format!(
                    "mode {n} has {} labels but extent {}",
                    mode.len(),
                    shape.dim(n)
                )));
            }
            if shape.kind(n) == ModeKind::Count {
                for label in mode.labels() {
                    let ok = label.parse::<u64>().map(|v| v >= 1).unwrap_or(false);
                    if !ok {
                        return Err(TensorError::InvalidIndexMap(format!(
                            "count-mode {n} label {label:?} is not a positive integer"
                        )));
                    }
                }
            }
        }
        Ok(SparseTensor {
            shape,
            index_map,
            entries: Vec::new(),
            deduped: true,
        })
    }

    /// Empty tensor with generated labels; handy for synthetic data.
    pub fn with_default_labels(shape: Shape) -> Self {
        let index_map = IndexMap::default_for(&shape);
        SparseTensor::new(shape, index_map).expect("generated index map matches shape")
    }

    pub fn shape(&self) -> &Shape {
        &self.shape
    }

    pub fn index_map(&self) -> &IndexMap {
        &self.index_map
    }

    pub fn entries(&self) -> &[Entry] {
        &self.entries
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Whether this value is known duplicate-free (fresh, deduped, or loaded
    /// from a file that was scanned for duplicates).
    pub fn is_deduped(&self) -> bool {
        self.deduped
    }

    /// Appends an entry. Duplicates are permitted until [`dedup`] is called.
    ///
    /// [`dedup`]: SparseTensor::dedup
    pub fn insert(&mut self, coord: Vec<usize>, value: f64) -> Result<(), TensorError> {
        self.shape.check_coord(&coord)?;
        self.entries.push(Entry { coord, value });
        // Conservative: inserting may have created a duplicate.
        self.deduped = false;
        Ok(())
    }

    /// Collapses duplicate coordinates under `policy`. Output order is the
    /// first-seen order of each surviving coordinate. Idempotent.
    pub fn dedup(&self, policy: DedupPolicy) -> (SparseTensor, DedupReport) {
        let mut groups: HashMap<&[usize], (usize, f64)> =
            HashMap::with_capacity(self.entries.len());
        let mut first_seen: Vec<usize> = Vec::with_capacity(self.entries.len());
        for (i, entry) in self.entries.iter().enumerate() {
            match groups.get_mut(entry.coord.as_slice()) {
                Some((count, sum)) => {
                    *count += 1;
                    *sum += entry.value;
                }
                None => {
                    groups.insert(&entry.coord, (1, entry.value));
                    first_seen.push(i);
                }
            }
        }

        let mut report = DedupReport {
            entries_in: self.entries.len(),
            ..DedupReport::default()
        };
        let mut out = SparseTensor {
            shape: self.shape.clone(),
            index_map: self.index_map.clone(),
            entries: Vec::with_capacity(first_seen.len()),
            deduped: true,
        };
        for &i in &first_seen {
            let first = &self.entries[i];
            let (count, sum) = groups[first.coord.as_slice()];
            if count > 1 {
                report.duplicate_coords += 1;
                report.duplicate_entries += count;
            }
            let value = match policy {
                DedupPolicy::Mean => sum / count as f64,
                DedupPolicy::First => first.value,
                DedupPolicy::DropAll => {
                    if count > 1 {
                        continue;
                    }
                    first.value
                }
            };
            out.entries.push(Entry {
                coord: first.coord.clone(),
                value,
            });
        }
        report.entries_out = out.entries.len();
        (out, report)
    }

    /// Uniform train/test split without replacement, deterministic in `seed`.
    /// Both halves keep this tensor's insertion order.
    pub fn split(
        &self,
        train_count: usize,
        seed: u64,
    ) -> Result<(SparseTensor, SparseTensor), TensorError> {
        if !self.deduped {
            return Err(TensorError::NotDeduped);
        }
        let n = self.entries.len();
        if train_count == 0 || train_count >= n {
            return Err(TensorError::TrainCountOutOfRange {
                train_count,
                entries: n,
            });
        }
        let mut order: Vec<usize> = (0..n).collect();
        Rng::for_domain(seed, "sptensor.split").shuffle(&mut order);
        let mut train_idx = order[..train_count].to_vec();
        let mut test_idx = order[train_count..].to_vec();
        train_idx.sort_unstable();
        test_idx.sort_unstable();

        let pick = |idx: &[usize]| SparseTensor {
            shape: self.shape.clone(),
            index_map: self.index_map.clone(),
            entries: idx.iter().map(|&i| self.entries[i].clone()).collect(),
            deduped: true,
        };
        Ok((pick(&train_idx), pick(&test_idx)))
    }

    /// Distinct-coordinate count divided by the total cell count.
    pub fn density(&self) -> f64 {
        if self.entries.is_empty() {
            return 0.0;
        }
        let distinct = if self.deduped {
            self.entries.len()
        } else {
            self.entries
                .iter()
                .map(|e| e.coord.as_slice())
                .collect::<HashSet<_>>()
                .len()
        };
        distinct as f64 / self.shape.cell_count()
    }

    /// Writes the text format: `#shape`, `#kinds`, one `#labels` line per
    /// mode, then one `i1,i2,...,iN,value` line per entry with the value in
    /// 17 significant digits (lossless for `f64`).
    pub fn write_text(&self, w: &mut impl Write) -> io::Result<()> {
        let dims: Vec<String> = self.shape.dims().iter().map(|d| d.to_string()).collect();
        writeln!(w, "#shape {}", dims.join(","))?;
        let kinds: Vec<String> = self.shape.kinds().iter().map(|k| k.to_string()).collect();
        writeln!(w, "#kinds {}", kinds.join(","))?;
        for (n, mode) in self.index_map.modes().iter().enumerate() {
            writeln!(w, "#labels mode={n}: {}", mode.labels().join(","))?;
        }
        for entry in &self.entries {
            for index in &entry.coord {
                write!(w, "{index},")?;
            }
            writeln!(w, "{:.16e}", entry.value)?;
        }
        Ok(())
    }

    pub fn to_text(&self) -> String {
        let mut buf = Vec::new();
        self.write_text(&mut buf)
            .expect("writing to Vec cannot fail");
        String::from_utf8(buf).expect("text format is UTF-8")
    }

    /// Parses the text format produced by [`write_text`]. The result's
    /// dedup state is computed by scanning for duplicate coordinates.
    ///
    /// [`write_text`]: SparseTensor::write_text
    pub fn read_text(reader: impl Read) -> Result<SparseTensor, TensorError> {
        let fmt = |line: usize, msg: String| TensorError::Format { line, msg };
        let mut lines = BufReader::new(reader).lines().enumerate();

        let mut next_line = |what: &str| -> Result<(usize, String), TensorError> {
            match lines.next() {
                Some((i, line)) => Ok((i + 1, line?)),
                None => Err(TensorError::Format {
                    line: 0,
                    msg: format!("unexpected end of file, expected {what}"),
                }),
            }
        };

        let (line_no, shape_line) = next_line("#shape header")?;
        let dims_text = shape_line
            .strip_prefix("#shape ")
            .ok_or_else(|| fmt(line_no, "expected #shape header".into()))?;
        let dims = dims_text
            .split(',')
            .map(|d| d.trim().parse::<usize>())
            .collect::<Result<Vec<_>, _>>()
            .map_err(|e| fmt(line_no, format!("bad extent: {e}")))?;

        let (line_no, kinds_line) = next_line("#kinds header")?;
        let kinds_text = kinds_line
            .strip_prefix("#kinds ")
            .ok_or_else(|| fmt(line_no, "expected #kinds header".into()))?;
        let kinds = kinds_text
            .split(',')
            .map(|k| k.trim().parse::<ModeKind>())
            .collect::<Result<Vec<_>, _>>()
            .map_err(|e| fmt(line_no, e))?;

        let shape = Shape::new(dims, kinds).map_err(|e| fmt(line_no, e.to_string()))?;

        let mut modes = Vec::with_capacity(shape.ndims());
        for n in 0..shape.ndims() {
            let (line_no, label_line) = next_line("#labels header")?;
            let prefix = format!("#labels mode={n}: ");
            let labels_text = label_line
                .strip_prefix(&prefix)
                .ok_or_else(|| fmt(line_no, format!("expected a line starting with {prefix:?}")))?;
            let labels: Vec<String> = labels_text.split(',').map(str::to_string).collect();
            modes.push(ModeIndex::from_labels(labels).map_err(|e| fmt(line_no, e.to_string()))?);
        }

        let mut tensor =
            SparseTensor::new(shape, IndexMap::new(modes)).map_err(|e| fmt(0, e.to_string()))?;
        let mut seen: HashSet<Vec<usize>> = HashSet::new();
        let mut any_duplicate = false;
        for (i, line) in lines {
            let line_no = i + 1;
            let line = line?;
            if line.is_empty() {
                continue;
            }
            let fields: Vec<&str> = line.split(',').collect();
            if fields.len() != tensor.shape.ndims() + 1 {
                return Err(fmt(
                    line_no,
                    format!(
                        "expected {} comma-separated fields, got {}",
                        tensor.shape.ndims() + 1,
                        fields.len()
                    ),
                ));
            }
            let coord = fields[..fields.len() - 1]
                .iter()
                .map(|f| f.parse::<usize>())
                .collect::<Result<Vec<_>, _>>()
                .map_err(|e| fmt(line_no, format!("bad index: {e}")))?;
            let value = fields[fields.len() - 1]
                .parse::<f64>()
                .map_err(|e| fmt(line_no, format!("bad value: {e}")))?;
            if !seen.insert(coord.clone()) {
                any_duplicate = true;
            }
            tensor
                .insert(coord, value)
                .map_err(|e| fmt(line_no, e.to_string()))?;
        }
        tensor.deduped = !any_duplicate;
        Ok(tensor)
    }

    pub fn from_text(text: &str) -> Result<SparseTensor, TensorError> {
        SparseTensor::read_text(text.as_bytes())
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<(), TensorError> {
        let mut file = File::create(path)?;
        self.write_text(&mut file)?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<SparseTensor, TensorError> {
        SparseTensor::read_text(File::open(path)?)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn shape22() -> Shape {
        Shape::new(vec![2, 2], vec![ModeKind::Element, ModeKind::Element]).unwrap()
    }

    #[test]
    fn insert_appends_entry() {
        let mut t = SparseTensor::with_default_labels(shape22());
        t.insert(vec![0, 1], 3.5).unwrap();
        assert_eq!(t.len(), 1);
        assert_eq!(t.entries()[0].coord(), &[0, 1]);
        assert_eq!(t.entries()[0].value(), 3.5);
    }

    #[test]
    fn insert_out_of_bounds_names_mode() {
        let mut t = SparseTensor::with_default_labels(shape22());
        let err = t.insert(vec![2, 0], 1.0).unwrap_err();
        match err {
            TensorError::OutOfBounds {
                mode,
                index,
                extent,
            } => {
                assert_eq!((mode, index, extent), (0, 2, 2));
            }
            other => panic!("unexpected error {other:?}"),
        }
    }

    #[test]
    fn duplicate_inserts_both_kept_until_dedup() {
        let mut t = SparseTensor::with_default_labels(shape22());
        t.insert(vec![0, 0], 1.0).unwrap();
        t.insert(vec![0, 0], 3.0).unwrap();
        assert_eq!(t.len(), 2);
        assert_eq!(t.density(), 0.25);
        let (d, _) = t.dedup(DedupPolicy::Mean);
        assert_eq!(d.len(), 1);
        assert_eq!(d.density(), 0.25);
    }

    #[test]
    fn dedup_mean_averages_groups() {
        let mut t = SparseTensor::with_default_labels(shape22());
        t.insert(vec![0, 0], 1.0).unwrap();
        t.insert(vec![0, 0], 3.0).unwrap();
        let (d, report) = t.dedup(DedupPolicy::Mean);
        assert_eq!(d.len(), 1);
        assert_eq!(d.entries()[0].value(), 2.0);
        assert_eq!(report.duplicate_coords, 1);
        assert_eq!(report.duplicate_entries, 2);
        assert_eq!(report.entries_in, 2);
        assert_eq!(report.entries_out, 1);
    }

    #[test]
    fn dedup_first_keeps_first_seen() {
        let mut t = SparseTensor::with_default_labels(shape22());
        t.insert(vec![0, 0], 1.0).unwrap();
        t.insert(vec![1, 1], 9.0).unwrap();
        t.insert(vec![0, 0], 3.0).unwrap();
        let (d, _) = t.dedup(DedupPolicy::First);
        assert_eq!(d.entries()[0].value(), 1.0);
        assert_eq!(d.entries()[1].value(), 9.0);
    }

    #[test]
    fn dedup_drop_all_removes_duplicated_coords() {
        let mut t = SparseTensor::with_default_labels(shape22());
        t.insert(vec![0, 0], 1.0).unwrap();
        t.insert(vec![0, 0], 3.0).unwrap();
        let (d, report) = t.dedup(DedupPolicy::DropAll);
        assert!(d.is_empty());
        assert_eq!(report.duplicate_coords, 1);
        assert_eq!(report.duplicate_entries, 2);
        assert_eq!(report.entries_out, 0);
    }

    #[test]
    fn dedup_without_duplicates_is_identity() {
        let mut t = SparseTensor::with_default_labels(shape22());
        t.insert(vec![0, 0], 1.0).unwrap();
        t.insert(vec![1, 0], 2.0).unwrap();
        for policy in [DedupPolicy::Mean, DedupPolicy::First, DedupPolicy::DropAll] {
            let (d, report) = t.dedup(policy);
            assert_eq!(d.entries(), t.entries());
            assert_eq!(
                report,
                DedupReport {
                    duplicate_coords: 0,
                    duplicate_entries: 0,
                    entries_in: 2,
                    entries_out: 2,
                }
            );
        }
    }

    #[test]
    fn split_rejects_non_deduped() {
        let mut t = SparseTensor::with_default_labels(shape22());
        t.insert(vec![0, 0], 1.0).unwrap();
        t.insert(vec![1, 0], 2.0).unwrap();
        assert!(matches!(t.split(1, 0), Err(TensorError::NotDeduped)));
    }

    #[test]
    fn split_rejects_out_of_range_train_count() {
        let t = dense_tensor(4);
        assert!(matches!(
            t.split(4, 0),
            Err(TensorError::TrainCountOutOfRange { .. })
        ));
        assert!(matches!(
            t.split(0, 0),
            Err(TensorError::TrainCountOutOfRange { .. })
        ));
    }

    #[test]
    fn split_is_deterministic_and_seed_sensitive() {
        let t = dense_tensor(100);
        let (a_train, a_test) = t.split(60, 7).unwrap();
        let (b_train, b_test) = t.split(60, 7).unwrap();
        assert_eq!(a_train, b_train);
        assert_eq!(a_test, b_test);
        let (c_train, _) = t.split(60, 8).unwrap();
        assert_ne!(a_train, c_train);
    }

    #[test]
    fn density_examples() {
        let mut t = SparseTensor::with_default_labels(shape22());
        assert_eq!(t.density(), 0.0);
        t.insert(vec![0, 1], 3.5).unwrap();
        assert_eq!(t.density(), 0.25);
    }

    #[test]
    fn density_task_scale() {
        // 100,000 distinct cells of a (90,90,12,12) tensor.
        let dims_product = 90.0 * 90.0 * 12.0 * 12.0;
        assert_eq!(dims_product, 1_166_400.0);
        let expected = 100_000.0 / dims_product;
        let shape = Shape::new(
            vec![90, 90, 12, 12],
            vec![
                ModeKind::Element,
                ModeKind::Element,
                ModeKind::Count,
                ModeKind::Count,
            ],
        )
        .unwrap();
        // Walk cells in lexicographic coordinate order; the first 100k are distinct.
        let mut t = SparseTensor::with_default_labels(shape);
        let mut inserted = 0usize;
        'outer: for a in 0..90 {
            for b in 0..90 {
                for c in 0..12 {
                    for d in 0..12 {
                        if inserted == 100_000 {
                            break 'outer;
                        }
                        t.insert(vec![a, b, c, d], 0.0).unwrap();
                        inserted += 1;
                    }
                }
            }
        }
        let rel = (t.density() - expected).abs() / expected;
        assert!(rel < 1e-12, "density {} vs {}", t.density(), expected);
        assert!((t.density() - 0.08573).abs() < 1e-4);
    }

    #[test]
    fn text_round_trip_is_exact() {
        let shape = Shape::new(
            vec![2, 2, 3],
            vec![ModeKind::Element, ModeKind::Element, ModeKind::Count],
        )
        .unwrap();
        let maps = IndexMap::new(vec![
            ModeIndex::from_labels(vec!["Au".into(), "Br".into()]).unwrap(),
            ModeIndex::from_labels(vec!["Au".into(), "Br".into()]).unwrap(),
            ModeIndex::from_labels(vec!["1".into(), "2".into(), "3".into()]).unwrap(),
        ]);
        let mut t = SparseTensor::new(shape, maps).unwrap();
        t.insert(vec![0, 1, 2], 0.1 + 0.2).unwrap();
        t.insert(vec![1, 0, 0], -1.5e-13).unwrap();
        let (t, _) = t.dedup(DedupPolicy::Mean);

        let text = t.to_text();
        let back = SparseTensor::from_text(&text).unwrap();
        assert_eq!(back.shape(), t.shape());
        assert_eq!(back.index_map(), t.index_map());
        assert!(back.is_deduped());
        for (a, b) in t.entries().iter().zip(back.entries()) {
            assert_eq!(a.coord(), b.coord());
            assert_eq!(a.value().to_bits(), b.value().to_bits());
        }
    }

    #[test]
    fn read_text_detects_duplicates() {
        let text = "#shape 2,2\n#kinds element,element\n#labels mode=0: a,b\n#labels mode=1: a,b\n0,0,1e0\n0,0,2e0\n";
        let t = SparseTensor::from_text(text).unwrap();
        assert!(!t.is_deduped());
        assert_eq!(t.len(), 2);
    }

    #[test]
    fn read_text_reports_line_numbers() {
        let text = "#shape 2,2\n#kinds element,element\n#labels mode=0: a,b\n#labels mode=1: a,b\n0,9,1e0\n";
        match SparseTensor::from_text(text).unwrap_err() {
            TensorError::Format { line, .. } => assert_eq!(line, 5),
            other => panic!("unexpected error {other:?}"),
        }
    }

    #[test]
    fn count_mode_labels_must_be_positive_integers() {
        let shape = Shape::new(vec![2, 2], vec![ModeKind::Element, ModeKind::Count]).unwrap();
        let maps = IndexMap::new(vec![
            ModeIndex::from_labels(vec!["a".into(), "b".into()]).unwrap(),
            ModeIndex::from_labels(vec!["x".into(), "y".into()]).unwrap(),
        ]);
        assert!(matches!(
            SparseTensor::new(shape, maps),
            Err(TensorError::InvalidIndexMap(_))
        ));
    }

    /// Dense helper: n entries at distinct coordinates of an (n, 2) tensor.
    fn dense_tensor(n: usize) -> SparseTensor {
        let shape = Shape::new(vec![n, 2], vec![ModeKind::Element, ModeKind::Element]).unwrap();
        let mut t = SparseTensor::with_default_labels(shape);
        for i in 0..n {
            t.insert(vec![i, i % 2], i as f64).unwrap();
        }
        t.dedup(DedupPolicy::First).0
    }

    fn arb_tensor() -> impl Strategy<Value = SparseTensor> {
        // 2-3 modes with small extents, entries may collide.
        (2usize..4, 1usize..4, 1usize..5).prop_flat_map(|(nmodes, _, extent)| {
            let shape_dims = vec![extent.max(2); nmodes];
            let coords = proptest::collection::vec(
                proptest::collection::vec(0..extent.max(2), nmodes),
                1..40,
            );
            (
                Just(shape_dims),
                coords,
                proptest::collection::vec(-10.0..10.0f64, 40),
            )
                .prop_map(|(dims, coords, values)| {
                    let kinds = vec![ModeKind::Element; dims.len()];
                    let shape = Shape::new(dims, kinds).unwrap();
                    let mut t = SparseTensor::with_default_labels(shape);
                    for (i, coord) in coords.iter().enumerate() {
                        t.insert(coord.clone(), values[i % values.len()]).unwrap();
                    }
                    t
                })
        })
    }

    proptest! {
        #[test]
        fn prop_split_partitions(t in arb_tensor(), seed in 0u64..50, frac in 0.1f64..0.9) {
            let (d, _) = t.dedup(DedupPolicy::Mean);
            let n = d.len();
            prop_assume!(n >= 2);
            let k = ((n as f64 * frac) as usize).clamp(1, n - 1);
            let (train, test) = d.split(k, seed).unwrap();
            prop_assert_eq!(train.len(), k);
            prop_assert_eq!(test.len(), n - k);
            let train_coords: HashSet<_> = train.entries().iter().map(|e| e.coord().to_vec()).collect();
            for e in test.entries() {
                prop_assert!(!train_coords.contains(e.coord()));
            }
            // Union equals input (coords are distinct after dedup).
            let mut union: Vec<_> = train.entries().iter().chain(test.entries())
                .map(|e| (e.coord().to_vec(), e.value().to_bits())).collect();
            union.sort();
            let mut original: Vec<_> = d.entries().iter()
                .map(|e| (e.coord().to_vec(), e.value().to_bits())).collect();
            original.sort();
            prop_assert_eq!(union, original);
        }

        #[test]
        fn prop_dedup_idempotent(t in arb_tensor()) {
            for policy in [DedupPolicy::Mean, DedupPolicy::First, DedupPolicy::DropAll] {
                let (once, _) = t.dedup(policy);
                let (twice, report) = once.dedup(policy);
                prop_assert_eq!(&twice, &once);
                prop_assert_eq!(report.duplicate_coords, 0);
            }
        }

        #[test]
        fn prop_dedup_mean_preserves_sums(t in arb_tensor()) {
            let (d, _) = t.dedup(DedupPolicy::Mean);
            for entry in d.entries() {
                let group: Vec<f64> = t.entries().iter()
                    .filter(|e| e.coord() == entry.coord())
                    .map(|e| e.value())
                    .collect();
                let sum: f64 = group.iter().sum();
                let recovered = entry.value() * group.len() as f64;
                let scale = sum.abs().max(1.0);
                prop_assert!((recovered - sum).abs() <= 1e-12 * scale);
            }
        }
    }
}
