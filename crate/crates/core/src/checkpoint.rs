//! Decimal-text model checkpoints.
//!
//! Values are written with 17 significant digits, which round-trips every
//! finite `f64` bit-exactly through text. Checkpoints therefore reload to
//! bit-identical predictions. A cheap FNV-1a digest over the formatted
//! text names parameter snapshots in reports.
//!
//! A checkpoint file carries the tensor metadata (shape, mode kinds, mode
//! labels) alongside the parameters, so a loaded model can be addressed by
//! chemical formula without the original dataset: the labels rebuild the
//! formula-to-coordinate mapping. It also echoes the training config as a
//! single JSON line for provenance.

use std::fs::File;
use std::io::{self, BufRead, BufReader, Read, Write};
use std::num::ParseFloatError;
use std::path::Path;

use thiserror::Error;

use crate::baseline::{MlpRegressor, MlpTrainConfig, OneHotEncoder};
use crate::cpd::{CPModel, CPTrainConfig};
use crate::mat::Mat;
use crate::neat::{NeatModel, NeatTrainConfig};
use crate::neural::{Activation, DenseLayer, DenseNet};
use crate::sptensor::{IndexMap, ModeIndex, ModeKind, Shape, SparseTensor};
use crate::tensorize::{
    coordinate_of, parse_formula, CountPolicy, Encoded, FormulaError, SkipReason, TensorizeConfig,
    TensorizeError,
};
use crate::trainer::{PredictError, ValueStats};

/// Formats one value in scientific notation with 17 significant digits.
pub fn format_value(v: f64) -> String {
    format!("{v:.16e}")
}

pub fn parse_value(text: &str) -> Result<f64, ParseFloatError> {
    text.parse::<f64>()
}

/// FNV-1a 64 digest of the formatted parameter stream, as fixed-width hex.
pub fn digest(values: impl Iterator<Item = f64>) -> String {
    let mut hash: u64 = 0xcbf2_9ce4_8422_2325;
    let mut absorb = |bytes: &[u8]| {
        for &b in bytes {
            hash ^= b as u64;
            hash = hash.wrapping_mul(0x0000_0100_0000_01b3);
        }
    };
    for v in values {
        absorb(format_value(v).as_bytes());
        absorb(b"\n");
    }
    format!("{hash:016x}")
}

#[derive(Debug, Error)]
pub enum CheckpointError {
    #[error("checkpoint line {line}: {msg}")]
    Format { line: usize, msg: String },
    #[error("invalid checkpoint: {0}")]
    Invalid(String),
    #[error("formula does not address this model: {0}")]
    Unmappable(String),
    #[error(transparent)]
    Formula(#[from] FormulaError),
    #[error(transparent)]
    Predict(#[from] PredictError),
    #[error(transparent)]
    Io(#[from] io::Error),
}

/// Shape, mode kinds, and mode labels of the tensor a model was trained
/// on. Enough to map a formula to a coordinate at predict time.
#[derive(Clone, Debug, PartialEq)]
pub struct TensorMeta {
    shape: Shape,
    index_map: IndexMap,
}

impl TensorMeta {
    pub fn new(shape: Shape, index_map: IndexMap) -> Result<Self, CheckpointError> {
        if index_map.len() != shape.ndims() {
            return Err(CheckpointError::Invalid(format!(
                "index map covers {} modes, shape has {}",
                index_map.len(),
                shape.ndims()
            )));
        }
        for (n, mode) in index_map.modes().iter().enumerate() {
            if mode.len() != shape.dim(n) {
                return Err(CheckpointError::Invalid(format!(
                    "mode {n} has {} labels for extent {}",
                    mode.len(),
                    shape.dim(n)
                )));
            }
        }
        Ok(TensorMeta { shape, index_map })
    }

    pub fn of_tensor(tensor: &SparseTensor) -> Self {
        TensorMeta {
            shape: tensor.shape().clone(),
            index_map: tensor.index_map().clone(),
        }
    }

    pub fn shape(&self) -> &Shape {
        &self.shape
    }

    pub fn index_map(&self) -> &IndexMap {
        &self.index_map
    }

    /// Maps a formula string to a coordinate using the stored labels.
    /// Requires the (element..., count...) mode layout the tensorizer
    /// produces. Counts above the count-mode extent are errors here, never
    /// clipped, so a prediction is only served for cells the model covers.
    pub fn coordinate_of_formula(&self, formula: &str) -> Result<Vec<usize>, CheckpointError> {
        let ndims = self.shape.ndims();
        let arity = ndims / 2;
        let layout_ok = ndims % 2 == 0
            && (0..arity).all(|n| self.shape.kind(n) == ModeKind::Element)
            && (arity..ndims).all(|n| self.shape.kind(n) == ModeKind::Count);
        if !layout_ok {
            return Err(CheckpointError::Unmappable(
                "model's modes are not in the (element..., count...) layout".into(),
            ));
        }
        let max_count = self.shape.dim(arity);
        if (arity..ndims).any(|n| self.shape.dim(n) != max_count) {
            return Err(CheckpointError::Unmappable(
                "count modes have unequal extents".into(),
            ));
        }
        let composition = parse_formula(formula)?;
        let cfg = TensorizeConfig {
            arity,
            max_count,
            count_policy: CountPolicy::Skip,
            ..TensorizeConfig::default()
        };
        match coordinate_of(&composition, &self.index_map, &cfg) {
            Ok(Encoded::Coord(coord)) => Ok(coord),
            Ok(Encoded::Skipped(SkipReason::WrongArity)) => {
                Err(CheckpointError::Unmappable(format!(
                    "formula has {} distinct elements, model expects {arity}",
                    composition.arity()
                )))
            }
            Ok(Encoded::Skipped(SkipReason::CountOverflow)) => Err(CheckpointError::Unmappable(
                format!("a count exceeds the model's maximum of {max_count}"),
            )),
            Ok(Encoded::Skipped(other)) => Err(CheckpointError::Unmappable(format!(
                "formula was rejected: {other:?}"
            ))),
            Err(TensorizeError::UnknownLabel { symbol }) => Err(CheckpointError::Unmappable(
                format!("element {symbol} is not in the model's alphabet"),
            )),
            Err(e) => Err(CheckpointError::Invalid(e.to_string())),
        }
    }
}

/// A trained model plus the config it was trained with.
#[derive(Clone, Debug, PartialEq)]
pub enum SavedModel {
    Cpd(CPModel, CPTrainConfig),
    Neat(NeatModel, NeatTrainConfig),
    Mlp(MlpRegressor, MlpTrainConfig),
}

impl SavedModel {
    /// A factorization trained with a smoothness weight reports itself as
    /// `cpd_s`; the payload layout is the same either way.
    pub fn kind(&self) -> &'static str {
        match self {
            SavedModel::Cpd(_, cfg) if cfg.effective_smooth_lambda() != 0.0 => "cpd_s",
            SavedModel::Cpd(..) => "cpd",
            SavedModel::Neat(..) => "neat",
            SavedModel::Mlp(..) => "mlp",
        }
    }

    fn mode_dims(&self) -> Vec<usize> {
        match self {
            SavedModel::Cpd(m, _) => m.mode_dims(),
            SavedModel::Neat(m, _) => m.mode_dims(),
            SavedModel::Mlp(m, _) => m.encoder().shape().dims().to_vec(),
        }
    }

    pub fn predict(&self, coord: &[usize]) -> Result<f64, PredictError> {
        match self {
            SavedModel::Cpd(m, _) => m.predict(coord),
            SavedModel::Neat(m, _) => m.predict(coord),
            SavedModel::Mlp(m, _) => m.predict(coord),
        }
    }

    pub fn stats(&self) -> ValueStats {
        match self {
            SavedModel::Cpd(m, _) => m.stats(),
            SavedModel::Neat(m, _) => m.stats(),
            SavedModel::Mlp(m, _) => m.stats(),
        }
    }
}

/// Tensor metadata plus a trained model, serializable as one text file.
#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    meta: TensorMeta,
    model: SavedModel,
}

impl Checkpoint {
    pub fn new(meta: TensorMeta, model: SavedModel) -> Result<Self, CheckpointError> {
        if model.mode_dims() != meta.shape.dims() {
            return Err(CheckpointError::Invalid(format!(
                "model dims {:?} do not match tensor shape {:?}",
                model.mode_dims(),
                meta.shape.dims()
            )));
        }
        Ok(Checkpoint { meta, model })
    }

    pub fn meta(&self) -> &TensorMeta {
        &self.meta
    }

    pub fn model(&self) -> &SavedModel {
        &self.model
    }

    pub fn predict_coord(&self, coord: &[usize]) -> Result<f64, PredictError> {
        self.model.predict(coord)
    }

    pub fn predict_formula(&self, formula: &str) -> Result<f64, CheckpointError> {
        let coord = self.meta.coordinate_of_formula(formula)?;
        Ok(self.model.predict(&coord)?)
    }

    /// Writes the checkpoint text: tensor metadata headers, the stats and
    /// config echo, then the parameter matrices.
    pub fn write_text(&self, w: &mut impl Write) -> io::Result<()> {
        writeln!(w, "#matten-checkpoint v1")?;
        writeln!(w, "#model {}", self.model.kind())?;
        let dims: Vec<String> = self
            .meta
            .shape
            .dims()
            .iter()
            .map(|d| d.to_string())
            .collect();
        writeln!(w, "#shape {}", dims.join(","))?;
        let kinds: Vec<String> = self
            .meta
            .shape
            .kinds()
            .iter()
            .map(|k| k.to_string())
            .collect();
        writeln!(w, "#kinds {}", kinds.join(","))?;
        for (n, mode) in self.meta.index_map.modes().iter().enumerate() {
            writeln!(w, "#labels mode={n}: {}", mode.labels().join(","))?;
        }
        let stats = self.model.stats();
        writeln!(
            w,
            "#stats {},{}",
            format_value(stats.mean),
            format_value(stats.std)
        )?;
        match &self.model {
            SavedModel::Cpd(model, cfg) => {
                let cfg_json = serde_json::to_string(cfg).expect("config serializes");
                writeln!(w, "#config {cfg_json}")?;
                writeln!(
                    w,
                    "#factors {} rank={}",
                    model.factors().len(),
                    model.rank()
                )?;
                for (n, factor) in model.factors().iter().enumerate() {
                    write_mat(w, &format!("factor{n}"), factor)?;
                }
            }
            SavedModel::Neat(model, cfg) => {
                let cfg_json = serde_json::to_string(cfg).expect("config serializes");
                writeln!(w, "#config {cfg_json}")?;
                writeln!(
                    w,
                    "#components {} embed_dim={}",
                    model.components().len(),
                    model.embed_dim()
                )?;
                for (r, set) in model.embeddings().iter().enumerate() {
                    for (n, emb) in set.iter().enumerate() {
                        write_mat(w, &format!("emb{r}.{n}"), emb)?;
                    }
                    write_net(w, &format!("comp{r}"), &model.components()[r])?;
                }
            }
            SavedModel::Mlp(model, cfg) => {
                let cfg_json = serde_json::to_string(cfg).expect("config serializes");
                writeln!(w, "#config {cfg_json}")?;
                write_net(w, "mlp", model.net())?;
            }
        }
        Ok(())
    }

    pub fn to_text(&self) -> String {
        let mut buf = Vec::new();
        self.write_text(&mut buf)
            .expect("writing to Vec cannot fail");
        String::from_utf8(buf).expect("text format is UTF-8")
    }

    /// Parses the text format produced by [`write_text`].
    ///
    /// [`write_text`]: Checkpoint::write_text
    pub fn read_text(reader: impl Read) -> Result<Checkpoint, CheckpointError> {
        let mut lines = LineReader::new(reader);

        let magic = lines.expect_line("header")?;
        if magic.trim_end() != "#matten-checkpoint v1" {
            return Err(lines.err("expected '#matten-checkpoint v1'"));
        }
        let kind = lines.expect_prefixed("#model ")?.trim().to_string();
        if !matches!(kind.as_str(), "cpd" | "cpd_s" | "neat" | "mlp") {
            return Err(lines.err(&format!("unknown model kind {kind:?}")));
        }

        let shape_text = lines.expect_prefixed("#shape ")?;
        let dims = shape_text
            .split(',')
            .map(|d| d.trim().parse::<usize>())
            .collect::<Result<Vec<_>, _>>()
            .map_err(|e| lines.err(&format!("bad extent: {e}")))?;
        let kinds_text = lines.expect_prefixed("#kinds ")?;
        let kinds = kinds_text
            .split(',')
            .map(|k| k.trim().parse::<ModeKind>())
            .collect::<Result<Vec<_>, _>>()
            .map_err(|e| lines.err(&e))?;
        let shape = Shape::new(dims, kinds).map_err(|e| lines.err(&e.to_string()))?;

        let mut modes = Vec::with_capacity(shape.ndims());
        for n in 0..shape.ndims() {
            let prefix = format!("#labels mode={n}: ");
            let labels_text = lines.expect_prefixed(&prefix)?;
            let labels: Vec<String> = labels_text.split(',').map(str::to_string).collect();
            modes.push(ModeIndex::from_labels(labels).map_err(|e| lines.err(&e.to_string()))?);
        }
        let meta = TensorMeta::new(shape.clone(), IndexMap::new(modes))
            .map_err(|e| lines.err(&e.to_string()))?;

        let stats_text = lines.expect_prefixed("#stats ")?;
        let stats = {
            let (mean, std) = stats_text
                .split_once(',')
                .ok_or_else(|| lines.err("expected mean,std"))?;
            ValueStats {
                mean: parse_value(mean.trim()).map_err(|e| lines.err(&format!("bad mean: {e}")))?,
                std: parse_value(std.trim()).map_err(|e| lines.err(&format!("bad std: {e}")))?,
            }
        };
        let config_json = lines.expect_prefixed("#config ")?;

        let model = match kind.as_str() {
            "cpd" | "cpd_s" => {
                let cfg: CPTrainConfig = serde_json::from_str(&config_json)
                    .map_err(|e| lines.err(&format!("bad config echo: {e}")))?;
                let header = lines.expect_prefixed("#factors ")?;
                let (count_text, rank_text) = header
                    .trim()
                    .split_once(" rank=")
                    .ok_or_else(|| lines.err("expected '#factors <n> rank=<r>'"))?;
                let n_factors: usize = count_text
                    .parse()
                    .map_err(|e| lines.err(&format!("bad factor count: {e}")))?;
                let rank: usize = rank_text
                    .parse()
                    .map_err(|e| lines.err(&format!("bad rank: {e}")))?;
                let mut factors = Vec::with_capacity(n_factors);
                for n in 0..n_factors {
                    let factor = read_mat(&mut lines, &format!("factor{n}"))?;
                    if factor.cols() != rank {
                        return Err(lines.err(&format!(
                            "factor{n} has {} columns, expected rank {rank}",
                            factor.cols()
                        )));
                    }
                    factors.push(factor);
                }
                let model = CPModel::from_parts(factors, stats)
                    .map_err(|e| CheckpointError::Invalid(e.to_string()))?;
                SavedModel::Cpd(model, cfg)
            }
            "neat" => {
                let cfg: NeatTrainConfig = serde_json::from_str(&config_json)
                    .map_err(|e| lines.err(&format!("bad config echo: {e}")))?;
                let header = lines.expect_prefixed("#components ")?;
                let (count_text, dim_text) = header
                    .trim()
                    .split_once(" embed_dim=")
                    .ok_or_else(|| lines.err("expected '#components <r> embed_dim=<d>'"))?;
                let n_components: usize = count_text
                    .parse()
                    .map_err(|e| lines.err(&format!("bad component count: {e}")))?;
                let _embed_dim: usize = dim_text
                    .parse()
                    .map_err(|e| lines.err(&format!("bad embed_dim: {e}")))?;
                let mut embeddings = Vec::with_capacity(n_components);
                let mut components = Vec::with_capacity(n_components);
                for r in 0..n_components {
                    let mut set = Vec::with_capacity(shape.ndims());
                    for n in 0..shape.ndims() {
                        set.push(read_mat(&mut lines, &format!("emb{r}.{n}"))?);
                    }
                    embeddings.push(set);
                    components.push(read_net(&mut lines, &format!("comp{r}"))?);
                }
                let model = NeatModel::from_parts(embeddings, components, stats)
                    .map_err(|e| CheckpointError::Invalid(e.to_string()))?;
                SavedModel::Neat(model, cfg)
            }
            "mlp" => {
                let cfg: MlpTrainConfig = serde_json::from_str(&config_json)
                    .map_err(|e| lines.err(&format!("bad config echo: {e}")))?;
                let net = read_net(&mut lines, "mlp")?;
                let model = MlpRegressor::from_parts(OneHotEncoder::new(shape.clone()), net, stats)
                    .map_err(|e| CheckpointError::Invalid(e.to_string()))?;
                SavedModel::Mlp(model, cfg)
            }
            _ => unreachable!("kind was validated at the header"),
        };

        Checkpoint::new(meta, model)
    }

    pub fn from_text(text: &str) -> Result<Checkpoint, CheckpointError> {
        Checkpoint::read_text(text.as_bytes())
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<(), CheckpointError> {
        let mut file = File::create(path)?;
        self.write_text(&mut file)?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Checkpoint, CheckpointError> {
        Checkpoint::read_text(File::open(path)?)
    }
}

fn write_mat(w: &mut impl Write, name: &str, m: &Mat) -> io::Result<()> {
    writeln!(w, "#mat {name} {}x{}", m.rows(), m.cols())?;
    for i in 0..m.rows() {
        let row: Vec<String> = m.row(i).iter().map(|&v| format_value(v)).collect();
        writeln!(w, "{}", row.join(","))?;
    }
    Ok(())
}

fn write_net(w: &mut impl Write, name: &str, net: &DenseNet) -> io::Result<()> {
    writeln!(w, "#net {name} layers={}", net.layers().len())?;
    for layer in net.layers() {
        writeln!(
            w,
            "#layer {} {}x{}",
            match layer.activation() {
                Activation::Relu => "relu",
                Activation::Identity => "identity",
            },
            layer.out_dim(),
            layer.in_dim()
        )?;
        for i in 0..layer.out_dim() {
            let row: Vec<String> = layer
                .weights()
                .row(i)
                .iter()
                .map(|&v| format_value(v))
                .collect();
            writeln!(w, "{}", row.join(","))?;
        }
        let bias: Vec<String> = layer.bias().iter().map(|&v| format_value(v)).collect();
        writeln!(w, "#bias {}", bias.join(","))?;
    }
    Ok(())
}

struct LineReader<R: Read> {
    lines: std::iter::Enumerate<io::Lines<BufReader<R>>>,
    current: usize,
}

impl<R: Read> LineReader<R> {
    fn new(reader: R) -> Self {
        LineReader {
            lines: BufReader::new(reader).lines().enumerate(),
            current: 0,
        }
    }

    fn err(&self, msg: &str) -> CheckpointError {
        CheckpointError::Format {
            line: self.current,
            msg: msg.to_string(),
        }
    }

    fn expect_line(&mut self, what: &str) -> Result<String, CheckpointError> {
        match self.lines.next() {
            Some((i, line)) => {
                self.current = i + 1;
                Ok(line?)
            }
            None => Err(CheckpointError::Format {
                line: self.current,
                msg: format!("unexpected end of file, expected {what}"),
            }),
        }
    }

    fn expect_prefixed(&mut self, prefix: &str) -> Result<String, CheckpointError> {
        let line = self.expect_line(prefix)?;
        line.strip_prefix(prefix)
            .map(str::to_string)
            .ok_or_else(|| self.err(&format!("expected a line starting with {prefix:?}")))
    }
}

fn parse_dims(text: &str) -> Option<(usize, usize)> {
    let (rows, cols) = text.trim().split_once('x')?;
    Some((rows.parse().ok()?, cols.parse().ok()?))
}

fn read_values_line<R: Read>(
    lines: &mut LineReader<R>,
    expected: usize,
    text: &str,
) -> Result<Vec<f64>, CheckpointError> {
    let values = text
        .split(',')
        .map(|v| parse_value(v.trim()))
        .collect::<Result<Vec<_>, _>>()
        .map_err(|e| lines.err(&format!("bad value: {e}")))?;
    if values.len() != expected {
        return Err(lines.err(&format!("expected {expected} values, got {}", values.len())));
    }
    Ok(values)
}

fn read_mat<R: Read>(lines: &mut LineReader<R>, name: &str) -> Result<Mat, CheckpointError> {
    let prefix = format!("#mat {name} ");
    let dims_text = lines.expect_prefixed(&prefix)?;
    let (rows, cols) =
        parse_dims(&dims_text).ok_or_else(|| lines.err("expected '<rows>x<cols>'"))?;
    let mut data = Vec::with_capacity(rows * cols);
    for _ in 0..rows {
        let row_text = lines.expect_line("matrix row")?;
        data.extend(read_values_line(lines, cols, &row_text)?);
    }
    Ok(Mat::from_vec(rows, cols, data))
}

fn read_net<R: Read>(lines: &mut LineReader<R>, name: &str) -> Result<DenseNet, CheckpointError> {
    let prefix = format!("#net {name} layers=");
    let count_text = lines.expect_prefixed(&prefix)?;
    let n_layers: usize = count_text
        .trim()
        .parse()
        .map_err(|e| lines.err(&format!("bad layer count: {e}")))?;
    let mut layers = Vec::with_capacity(n_layers);
    for _ in 0..n_layers {
        let header = lines.expect_prefixed("#layer ")?;
        let (act_text, dims_text) = header
            .trim()
            .split_once(' ')
            .ok_or_else(|| lines.err("expected '#layer <activation> <out>x<in>'"))?;
        let activation = match act_text {
            "relu" => Activation::Relu,
            "identity" => Activation::Identity,
            other => return Err(lines.err(&format!("unknown activation {other:?}"))),
        };
        let (out_dim, in_dim) =
            parse_dims(dims_text).ok_or_else(|| lines.err("expected '<out>x<in>'"))?;
        let mut data = Vec::with_capacity(out_dim * in_dim);
        for _ in 0..out_dim {
            let row_text = lines.expect_line("weight row")?;
            data.extend(read_values_line(lines, in_dim, &row_text)?);
        }
        let bias_text = lines.expect_prefixed("#bias ")?;
        let bias = read_values_line(lines, out_dim, &bias_text)?;
        let layer = DenseLayer::new(Mat::from_vec(out_dim, in_dim, data), bias, activation)
            .map_err(|e| CheckpointError::Invalid(e.to_string()))?;
        layers.push(layer);
    }
    DenseNet::new(layers).map_err(|e| CheckpointError::Invalid(e.to_string()))
}
