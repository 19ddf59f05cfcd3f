//! Chemical formula parsing and dataset encoding.
//!
//! A formula string like `AuBr5` is parsed into a [`Composition`] (element
//! symbols with positive integer counts, canonically ordered), and a list of
//! `(formula, value)` records is encoded as a [`SparseTensor`] of order
//! `2 * arity`: one mode per element slot followed by one count mode per
//! element slot, with atom count `k` stored at index `k - 1`.
//!
//! Records that cannot be encoded under the configured arity and count range
//! are skipped, never silently mutated, and every skip is tallied in a
//! [`SkipReport`] whose counts always reconcile with the input size.

use std::collections::BTreeSet;
use std::fmt;
use std::io::{BufRead, BufReader, Read};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::sptensor::{
    DedupPolicy, DedupReport, IndexMap, ModeIndex, ModeKind, Shape, SparseTensor, TensorError,
};

/// All 118 IUPAC element symbols in atomic-number order.
pub const ELEMENT_SYMBOLS: [&str; 118] = [
    "H", "He", "Li", "Be", "B", "C", "N", "O", "F", "Ne", "Na", "Mg", "Al", "Si", "P", "S", "Cl",
    "Ar", "K", "Ca", "Sc", "Ti", "V", "Cr", "Mn", "Fe", "Co", "Ni", "Cu", "Zn", "Ga", "Ge", "As",
    "Se", "Br", "Kr", "Rb", "Sr", "Y", "Zr", "Nb", "Mo", "Tc", "Ru", "Rh", "Pd", "Ag", "Cd", "In",
    "Sn", "Sb", "Te", "I", "Xe", "Cs", "Ba", "La", "Ce", "Pr", "Nd", "Pm", "Sm", "Eu", "Gd", "Tb",
    "Dy", "Ho", "Er", "Tm", "Yb", "Lu", "Hf", "Ta", "W", "Re", "Os", "Ir", "Pt", "Au", "Hg", "Tl",
    "Pb", "Bi", "Po", "At", "Rn", "Fr", "Ra", "Ac", "Th", "Pa", "U", "Np", "Pu", "Am", "Cm", "Bk",
    "Cf", "Es", "Fm", "Md", "No", "Lr", "Rf", "Db", "Sg", "Bh", "Hs", "Mt", "Ds", "Rg", "Cn", "Nh",
    "Fl", "Mc", "Lv", "Ts", "Og",
];

pub fn is_element_symbol(symbol: &str) -> bool {
    ELEMENT_SYMBOLS.contains(&symbol)
}

#[derive(Debug, Error, PartialEq)]
pub enum FormulaError {
    #[error("empty formula")]
    Empty,
    #[error("illegal character {ch:?} at byte {offset}")]
    IllegalChar { ch: char, offset: usize },
    #[error("count at byte {offset} has no preceding element symbol")]
    DanglingCount { offset: usize },
    #[error("unknown element symbol {symbol:?} at byte {offset}")]
    UnknownSymbol { symbol: String, offset: usize },
    #[error("bad count {text:?} at byte {offset}: {reason}")]
    BadCount {
        text: String,
        offset: usize,
        reason: String,
    },
    #[error("count {count} for {symbol:?} at byte {offset} is not a positive integer")]
    NonIntegerCount {
        symbol: String,
        count: f64,
        offset: usize,
    },
}

#[derive(Debug, Error)]
pub enum TensorizeError {
    #[error("invalid tensorize config: {0}")]
    InvalidConfig(String),
    #[error("no records could be encoded ({ingested} ingested, all skipped)")]
    EmptyDataset { ingested: usize },
    #[error("symbol {symbol:?} is not in the tensor's element alphabet")]
    UnknownLabel { symbol: String },
    #[error("records file, line {line}: {msg}")]
    Csv { line: usize, msg: String },
    #[error(transparent)]
    Formula(#[from] FormulaError),
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// Element symbols with positive integer atom counts, ascending by symbol.
/// Repeated symbols have already been merged by summing.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Composition {
    parts: Vec<(String, u64)>,
}

impl Composition {
    pub fn parts(&self) -> &[(String, u64)] {
        &self.parts
    }

    /// Number of distinct elements.
    pub fn arity(&self) -> usize {
        self.parts.len()
    }
}

impl fmt::Display for Composition {
    /// Canonical formula text; counts of 1 are omitted.
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for (symbol, count) in &self.parts {
            f.write_str(symbol)?;
            if *count != 1 {
                write!(f, "{count}")?;
            }
        }
        Ok(())
    }
}

/// One scanned formula token before integer validation.
struct ScannedPart {
    symbol: String,
    count: f64,
    count_offset: usize,
}

/// Grammar-level scan: `(ElementSymbol count?)+` where a symbol is an
/// uppercase ASCII letter plus an optional lowercase one, and a count is a
/// decimal number (fractions allowed here; integer enforcement happens in
/// the callers so that a `round` policy can still rescue the record).
/// Repeated symbols are merged by summing and the result is sorted.
fn scan_formula(s: &str, validate_symbols: bool) -> Result<Vec<ScannedPart>, FormulaError> {
    if s.is_empty() {
        return Err(FormulaError::Empty);
    }
    let bytes = s.as_bytes();
    let mut i = 0usize;
    let mut parts: Vec<ScannedPart> = Vec::new();
    while i < bytes.len() {
        let b = bytes[i];
        if b.is_ascii_uppercase() {
            let symbol_offset = i;
            let mut symbol = String::new();
            symbol.push(b as char);
            i += 1;
            if i < bytes.len() && bytes[i].is_ascii_lowercase() {
                symbol.push(bytes[i] as char);
                i += 1;
            }
            if validate_symbols && !is_element_symbol(&symbol) {
                return Err(FormulaError::UnknownSymbol {
                    symbol,
                    offset: symbol_offset,
                });
            }
            let count_offset = i;
            let mut count = 1.0f64;
            if i < bytes.len() && (bytes[i].is_ascii_digit() || bytes[i] == b'.') {
                let start = i;
                let mut digits = 0usize;
                let mut dots = 0usize;
                while i < bytes.len() && (bytes[i].is_ascii_digit() || bytes[i] == b'.') {
                    if bytes[i] == b'.' {
                        dots += 1;
                    } else {
                        digits += 1;
                    }
                    i += 1;
                }
                let text = &s[start..i];
                if digits == 0 || dots > 1 {
                    return Err(FormulaError::BadCount {
                        text: text.to_string(),
                        offset: start,
                        reason: "expected a decimal number".to_string(),
                    });
                }
                count = text.parse::<f64>().map_err(|e| FormulaError::BadCount {
                    text: text.to_string(),
                    offset: start,
                    reason: e.to_string(),
                })?;
                if !count.is_finite() || count <= 0.0 {
                    return Err(FormulaError::BadCount {
                        text: text.to_string(),
                        offset: start,
                        reason: "count must be positive and finite".to_string(),
                    });
                }
            }
            match parts.iter_mut().find(|p| p.symbol == symbol) {
                Some(existing) => existing.count += count,
                None => parts.push(ScannedPart {
                    symbol,
                    count,
                    count_offset,
                }),
            }
        } else if b.is_ascii_digit() || b == b'.' {
            return Err(FormulaError::DanglingCount { offset: i });
        } else {
            let ch = s[i..].chars().next().expect("offset is on a char boundary");
            return Err(FormulaError::IllegalChar { ch, offset: i });
        }
    }
    parts.sort_by(|a, b| a.symbol.cmp(&b.symbol));
    Ok(parts)
}

/// Counts within this distance of an integer are treated as that integer,
/// absorbing decimal-text artifacts like `2.0`.
const COUNT_INTEGER_TOLERANCE: f64 = 1e-9;

fn as_exact_count(count: f64) -> Option<u64> {
    let rounded = count.round();
    if (count - rounded).abs() <= COUNT_INTEGER_TOLERANCE && rounded >= 1.0 {
        Some(rounded as u64)
    } else {
        None
    }
}

/// Parses a formula into a canonical [`Composition`], validating symbols
/// against the 118-element table and requiring integer counts.
pub fn parse_formula(s: &str) -> Result<Composition, FormulaError> {
    let scanned = scan_formula(s, true)?;
    let mut parts = Vec::with_capacity(scanned.len());
    for part in scanned {
        match as_exact_count(part.count) {
            Some(count) => parts.push((part.symbol, count)),
            None => {
                return Err(FormulaError::NonIntegerCount {
                    symbol: part.symbol,
                    count: part.count,
                    offset: part.count_offset,
                })
            }
        }
    }
    Ok(Composition { parts })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CountPolicy {
    /// Skip records with any atom count above `max_count`.
    Skip,
    /// Clamp oversized counts to `max_count`.
    Clip,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NonIntegerPolicy {
    /// Skip records with fractional atom counts.
    Skip,
    /// Round fractional counts to the nearest integer; a count that rounds
    /// below 1 still skips the record.
    Round,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TensorizeConfig {
    /// Distinct elements per material; the tensor has `2 * arity` modes.
    pub arity: usize,
    /// Largest representable atom count per element (count-mode extent).
    pub max_count: usize,
    pub count_policy: CountPolicy,
    pub noninteger_policy: NonIntegerPolicy,
    pub dedup_policy: DedupPolicy,
    /// Reject symbols outside the 118-element table.
    pub validate_symbols: bool,
}

impl Default for TensorizeConfig {
    fn default() -> Self {
        TensorizeConfig {
            arity: 2,
            max_count: 8,
            count_policy: CountPolicy::Skip,
            noninteger_policy: NonIntegerPolicy::Skip,
            dedup_policy: DedupPolicy::Mean,
            validate_symbols: true,
        }
    }
}

impl TensorizeConfig {
    pub fn validate(&self) -> Result<(), TensorizeError> {
        if self.arity < 1 {
            return Err(TensorizeError::InvalidConfig("arity must be >= 1".into()));
        }
        if self.max_count < 1 {
            return Err(TensorizeError::InvalidConfig(
                "max_count must be >= 1".into(),
            ));
        }
        Ok(())
    }
}

/// Why a record was left out of the tensor.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SkipReason {
    ParseError,
    WrongArity,
    CountOverflow,
    NonIntegerCount,
}

/// Per-reason skip tallies for one [`tensorize`] run. `ingested` always
/// equals `encoded` plus the sum of the skip counters.
#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct SkipReport {
    pub ingested: usize,
    pub encoded: usize,
    pub parse_error: usize,
    pub wrong_arity: usize,
    pub count_overflow: usize,
    pub noninteger_count: usize,
    /// Duplicate-coordinate collapse applied after encoding.
    pub dedup: DedupReport,
}

impl SkipReport {
    pub fn skipped(&self) -> usize {
        self.parse_error + self.wrong_arity + self.count_overflow + self.noninteger_count
    }

    pub fn is_conserved(&self) -> bool {
        self.ingested == self.encoded + self.skipped()
    }

    fn tally(&mut self, reason: SkipReason) {
        match reason {
            SkipReason::ParseError => self.parse_error += 1,
            SkipReason::WrongArity => self.wrong_arity += 1,
            SkipReason::CountOverflow => self.count_overflow += 1,
            SkipReason::NonIntegerCount => self.noninteger_count += 1,
        }
    }
}

/// Outcome of encoding one composition against a fixed index map.
#[derive(Clone, Debug, PartialEq)]
pub enum Encoded {
    Coord(Vec<usize>),
    Skipped(SkipReason),
}

/// Maps a composition to a tensor coordinate: element indices in canonical
/// order followed by count indices aligned to the same order, count `k` at
/// index `k - 1`. Arity mismatches and (under the `skip` policy) oversized
/// counts come back as [`Encoded::Skipped`]; a symbol missing from the
/// element alphabet is a hard error.
pub fn coordinate_of(
    c: &Composition,
    maps: &IndexMap,
    cfg: &TensorizeConfig,
) -> Result<Encoded, TensorizeError> {
    cfg.validate()?;
    if c.arity() != cfg.arity {
        return Ok(Encoded::Skipped(SkipReason::WrongArity));
    }
    let element_mode = maps.mode(0);
    let mut coord = Vec::with_capacity(2 * cfg.arity);
    for (symbol, _) in c.parts() {
        match element_mode.index_of(symbol) {
            Some(idx) => coord.push(idx),
            None => {
                return Err(TensorizeError::UnknownLabel {
                    symbol: symbol.clone(),
                })
            }
        }
    }
    for (_, count) in c.parts() {
        let count = *count;
        let effective = if count > cfg.max_count as u64 {
            match cfg.count_policy {
                CountPolicy::Skip => return Ok(Encoded::Skipped(SkipReason::CountOverflow)),
                CountPolicy::Clip => cfg.max_count as u64,
            }
        } else {
            count
        };
        coord.push((effective - 1) as usize);
    }
    Ok(Encoded::Coord(coord))
}

/// Reverses [`coordinate_of`]: reads element and count labels back into a
/// composition. Exact for coordinates produced without clipping.
pub fn composition_of_coord(
    coord: &[usize],
    shape: &Shape,
    maps: &IndexMap,
) -> Result<Composition, TensorizeError> {
    shape.check_coord(coord)?;
    let arity = shape.ndims() / 2;
    let mut parts = Vec::with_capacity(arity);
    for slot in 0..arity {
        let symbol = maps.mode(slot).label_of(coord[slot]).to_string();
        let count_label = maps.mode(arity + slot).label_of(coord[arity + slot]);
        let count: u64 = count_label
            .parse()
            .expect("count-mode labels are validated positive integers");
        parts.push((symbol, count));
    }
    parts.sort_by(|a, b| a.0.cmp(&b.0));
    Ok(Composition { parts })
}

/// Classification of one record during the first tensorize pass.
enum Classified {
    Keep(Composition),
    Skip(SkipReason),
}

fn classify(formula: &str, cfg: &TensorizeConfig) -> Classified {
    let scanned = match scan_formula(formula, cfg.validate_symbols) {
        Ok(parts) => parts,
        Err(_) => return Classified::Skip(SkipReason::ParseError),
    };
    let mut parts = Vec::with_capacity(scanned.len());
    for part in scanned {
        let count = match as_exact_count(part.count) {
            Some(count) => count,
            None => match cfg.noninteger_policy {
                NonIntegerPolicy::Skip => return Classified::Skip(SkipReason::NonIntegerCount),
                NonIntegerPolicy::Round => {
                    let rounded = part.count.round();
                    if rounded < 1.0 {
                        return Classified::Skip(SkipReason::NonIntegerCount);
                    }
                    rounded as u64
                }
            },
        };
        parts.push((part.symbol, count));
    }
    let c = Composition { parts };
    if c.arity() != cfg.arity {
        return Classified::Skip(SkipReason::WrongArity);
    }
    if cfg.count_policy == CountPolicy::Skip
        && c.parts().iter().any(|(_, k)| *k > cfg.max_count as u64)
    {
        return Classified::Skip(SkipReason::CountOverflow);
    }
    Classified::Keep(c)
}

/// Encodes `(formula, value)` records as a sparse tensor.
///
/// Two passes: the first classifies every record (in order: parse error,
/// non-integer count, wrong arity, count overflow) and collects the element
/// alphabet from the records that survive; the second maps survivors to
/// coordinates and inserts them in input order, then applies the configured
/// duplicate policy. Element modes share the one alphabet, so the tensor
/// shape is `(E, ..., E, max_count, ..., max_count)` with `E` the number of
/// distinct symbols among encoded records.
pub fn tensorize(
    records: &[(String, f64)],
    cfg: &TensorizeConfig,
) -> Result<(SparseTensor, SkipReport), TensorizeError> {
    cfg.validate()?;
    let mut report = SkipReport {
        ingested: records.len(),
        ..SkipReport::default()
    };
    let mut kept: Vec<(Composition, f64)> = Vec::with_capacity(records.len());
    let mut alphabet: BTreeSet<String> = BTreeSet::new();
    for (formula, value) in records {
        match classify(formula, cfg) {
            Classified::Keep(c) => {
                for (symbol, _) in c.parts() {
                    alphabet.insert(symbol.clone());
                }
                kept.push((c, *value));
            }
            Classified::Skip(reason) => report.tally(reason),
        }
    }
    if kept.is_empty() {
        return Err(TensorizeError::EmptyDataset {
            ingested: records.len(),
        });
    }
    report.encoded = kept.len();
    debug_assert!(report.is_conserved());

    let element_labels: Vec<String> = alphabet.into_iter().collect();
    let element_mode = ModeIndex::from_labels(element_labels)?;
    let count_mode = ModeIndex::from_labels((1..=cfg.max_count).map(|k| k.to_string()).collect())?;
    let mut dims = vec![element_mode.len(); cfg.arity];
    dims.extend(vec![cfg.max_count; cfg.arity]);
    let mut kinds = vec![ModeKind::Element; cfg.arity];
    kinds.extend(vec![ModeKind::Count; cfg.arity]);
    let shape = Shape::new(dims, kinds)?;
    let mut modes = vec![element_mode; cfg.arity];
    modes.extend(vec![count_mode; cfg.arity]);
    let mut tensor = SparseTensor::new(shape, IndexMap::new(modes))?;

    for (c, value) in &kept {
        match coordinate_of(c, tensor.index_map(), cfg)? {
            Encoded::Coord(coord) => tensor.insert(coord, *value)?,
            Encoded::Skipped(reason) => {
                // The first pass already applied every skip rule.
                unreachable!("record classified as encodable was skipped: {reason:?}");
            }
        }
    }

    let (tensor, dedup_report) = tensor.dedup(cfg.dedup_policy);
    report.dedup = dedup_report;
    Ok((tensor, report))
}

/// Reads `formula,value` records from CSV text with that exact header.
/// Formula problems are deferred to [`tensorize`] skip accounting, but a
/// malformed value cell is a hard error naming the line.
pub fn read_records_csv(reader: impl Read) -> Result<Vec<(String, f64)>, TensorizeError> {
    let mut lines = BufReader::new(reader).lines();
    let header = match lines.next() {
        Some(line) => line?,
        None => {
            return Err(TensorizeError::Csv {
                line: 1,
                msg: "missing header, expected formula,value".to_string(),
            })
        }
    };
    if header.trim() != "formula,value" {
        return Err(TensorizeError::Csv {
            line: 1,
            msg: format!("bad header {:?}, expected formula,value", header.trim()),
        });
    }
    let mut records = Vec::new();
    for (i, line) in lines.enumerate() {
        let line_no = i + 2;
        let line = line?;
        let trimmed = line.trim();
        if trimmed.is_empty() {
            continue;
        }
        let (formula, value_text) = trimmed.split_once(',').ok_or_else(|| TensorizeError::Csv {
            line: line_no,
            msg: "expected formula,value".to_string(),
        })?;
        let value: f64 = value_text.trim().parse().map_err(|e| TensorizeError::Csv {
            line: line_no,
            msg: format!("bad value {:?}: {e}", value_text.trim()),
        })?;
        records.push((formula.trim().to_string(), value));
    }
    Ok(records)
}
