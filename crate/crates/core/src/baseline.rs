//! One-hot MLP regression baseline.
//!
//! A non-tensor reference point: each coordinate is expanded into a
//! concatenation of per-mode one-hot vectors and fed to a single dense
//! network. The encoder has no trainable parameters, so unlike the additive
//! tensor models nothing ties rows of different modes together beyond what
//! the network learns from the features themselves.

use serde::{Deserialize, Serialize};

use crate::checkpoint;
use crate::neural::{AdamHyper, AdamState, DenseNet, NetGrads};
use crate::rng::Rng;
use crate::sptensor::{Shape, SparseTensor};
use crate::trainer::{
    run_training, PredictError, TrainError, TrainLoop, TrainReport, Trainable, ValueStats,
};

/// Expands in-bounds coordinates into concatenated one-hot vectors.
#[derive(Clone, Debug, PartialEq)]
pub struct OneHotEncoder {
    shape: Shape,
    total_width: usize,
}

impl OneHotEncoder {
    pub fn new(shape: Shape) -> Self {
        let total_width = shape.dims().iter().sum();
        OneHotEncoder { shape, total_width }
    }

    pub fn shape(&self) -> &Shape {
        &self.shape
    }

    /// Sum of mode extents, the encoded feature width.
    pub fn total_width(&self) -> usize {
        self.total_width
    }

    /// Writes the encoding into `out` (resized to `total_width`). The
    /// vector has exactly one 1.0 per mode, at offset
    /// `sum(extents before mode) + coord[mode]`.
    pub fn encode_into(&self, coord: &[usize], out: &mut Vec<f64>) -> Result<(), PredictError> {
        self.shape
            .check_coord(coord)
            .map_err(|_| match coord.len() == self.shape.ndims() {
                false => PredictError::ArityMismatch {
                    got: coord.len(),
                    want: self.shape.ndims(),
                },
                true => {
                    let (mode, &index) = coord
                        .iter()
                        .enumerate()
                        .find(|(n, &i)| i >= self.shape.dim(*n))
                        .expect("check_coord failed, so some index is out of range");
                    PredictError::OutOfBounds {
                        mode,
                        index,
                        extent: self.shape.dim(mode),
                    }
                }
            })?;
        out.clear();
        out.resize(self.total_width, 0.0);
        let mut offset = 0;
        for (n, &i) in coord.iter().enumerate() {
            out[offset + i] = 1.0;
            offset += self.shape.dim(n);
        }
        Ok(())
    }

    pub fn encode(&self, coord: &[usize]) -> Result<Vec<f64>, PredictError> {
        let mut out = Vec::new();
        self.encode_into(coord, &mut out)?;
        Ok(out)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct MlpTrainConfig {
    /// Hidden relu layer widths, applied in order.
    pub hidden: Vec<usize>,
    pub learning_rate: f64,
    pub epochs: usize,
    pub batch_size: usize,
    /// L2 weight on all network parameters.
    pub l2: f64,
    pub seed: u64,
    pub patience: Option<usize>,
}

impl Default for MlpTrainConfig {
    fn default() -> Self {
        MlpTrainConfig {
            hidden: vec![64, 64],
            learning_rate: 1e-3,
            epochs: 200,
            batch_size: 256,
            l2: 1e-4,
            seed: 0,
            patience: None,
        }
    }
}

impl MlpTrainConfig {
    pub fn validate(&self) -> Result<(), TrainError> {
        if self.hidden.is_empty() || self.hidden.iter().any(|&h| h == 0) {
            return Err(TrainError::InvalidConfig(
                "hidden widths must be non-empty and >= 1".into(),
            ));
        }
        if !(self.learning_rate > 0.0) {
            return Err(TrainError::InvalidConfig(
                "learning_rate must be > 0".into(),
            ));
        }
        if self.batch_size < 1 {
            return Err(TrainError::InvalidConfig("batch_size must be >= 1".into()));
        }
        if self.l2 < 0.0 {
            return Err(TrainError::InvalidConfig("l2 must be >= 0".into()));
        }
        if self.patience == Some(0) {
            return Err(TrainError::InvalidConfig("patience must be >= 1".into()));
        }
        Ok(())
    }
}

/// Dense network over one-hot coordinate features plus target stats.
#[derive(Clone, Debug, PartialEq)]
pub struct MlpRegressor {
    encoder: OneHotEncoder,
    net: DenseNet,
    stats: ValueStats,
}

impl MlpRegressor {
    pub fn from_parts(
        encoder: OneHotEncoder,
        net: DenseNet,
        stats: ValueStats,
    ) -> Result<Self, TrainError> {
        if net.in_dim() != encoder.total_width() || net.out_dim() != 1 {
            return Err(TrainError::InvalidConfig(format!(
                "net maps {} -> {}, expected {} -> 1",
                net.in_dim(),
                net.out_dim(),
                encoder.total_width()
            )));
        }
        Ok(MlpRegressor {
            encoder,
            net,
            stats,
        })
    }

    pub fn encoder(&self) -> &OneHotEncoder {
        &self.encoder
    }

    pub fn net(&self) -> &DenseNet {
        &self.net
    }

    pub fn stats(&self) -> ValueStats {
        self.stats
    }

    /// Standardized-scale prediction.
    pub fn predict_raw(&self, coord: &[usize]) -> Result<f64, PredictError> {
        let x = self.encoder.encode(coord)?;
        let (y, _) = self.net.forward(&x).expect("input width matches encoder");
        Ok(y[0])
    }

    /// Original-unit prediction.
    pub fn predict(&self, coord: &[usize]) -> Result<f64, PredictError> {
        if !self.stats.is_bound() {
            return Err(PredictError::StatsUnbound);
        }
        Ok(self.stats.destandardize(self.predict_raw(coord)?))
    }

    fn params_digest(&self) -> String {
        checkpoint::digest(self.net.params_to_vec().into_iter())
    }
}

/// Fresh glorot-initialized regressor for a tensor shape, drawn from the
/// seed's `mlp.init` stream.
pub fn init_model(shape: &Shape, cfg: &MlpTrainConfig) -> MlpRegressor {
    let encoder = OneHotEncoder::new(shape.clone());
    let mut rng = Rng::for_domain(cfg.seed, "mlp.init");
    let net = DenseNet::mlp(encoder.total_width(), &cfg.hidden, 1, &mut rng);
    MlpRegressor {
        encoder,
        net,
        stats: ValueStats::default(),
    }
}

/// Batch objective: mean squared standardized error plus `l2` times the
/// squared norm of all network parameters.
pub fn batch_objective(
    model: &MlpRegressor,
    coords: &[&[usize]],
    targets_std: &[f64],
    l2: f64,
) -> f64 {
    assert_eq!(coords.len(), targets_std.len());
    assert!(!coords.is_empty(), "objective needs at least one entry");
    let mut x = Vec::new();
    let mut data = 0.0;
    for (coord, &z) in coords.iter().zip(targets_std) {
        model
            .encoder
            .encode_into(coord, &mut x)
            .expect("training coords are in-bounds");
        let (y, _) = model.net.forward(&x).expect("width matches");
        let r = y[0] - z;
        data += r * r;
    }
    let mut objective = data / coords.len() as f64;
    if l2 > 0.0 {
        objective += l2 * model.net.params_to_vec().iter().map(|w| w * w).sum::<f64>();
    }
    objective
}

/// Analytic gradient of [`batch_objective`]. The encoder contributes no
/// parameters, so the input gradient from the backward pass is discarded.
pub fn batch_gradients(
    model: &MlpRegressor,
    coords: &[&[usize]],
    targets_std: &[f64],
    l2: f64,
) -> NetGrads {
    let (_, grads) = objective_and_gradients(model, coords, targets_std, l2);
    grads
}

fn objective_and_gradients(
    model: &MlpRegressor,
    coords: &[&[usize]],
    targets_std: &[f64],
    l2: f64,
) -> (f64, NetGrads) {
    assert_eq!(coords.len(), targets_std.len());
    assert!(!coords.is_empty(), "gradient needs at least one entry");
    let mut grads = NetGrads::zeros_like(&model.net);
    let scale = 2.0 / coords.len() as f64;
    let mut x = Vec::new();
    let mut data = 0.0;
    for (coord, &z) in coords.iter().zip(targets_std) {
        model
            .encoder
            .encode_into(coord, &mut x)
            .expect("training coords are in-bounds");
        let (y, tape) = model.net.forward(&x).expect("width matches");
        let residual = y[0] - z;
        data += residual * residual;
        let (net_grads, _input_grad) = model
            .net
            .backward(&tape, &[scale * residual])
            .expect("tape from this forward pass");
        grads.accumulate(&net_grads);
    }
    let mut objective = data / coords.len() as f64;
    if l2 > 0.0 {
        objective += l2 * model.net.params_to_vec().iter().map(|w| w * w).sum::<f64>();
        for (k, layer) in model.net.layers().iter().enumerate() {
            for (slot, &w) in grads.weights[k]
                .data_mut()
                .iter_mut()
                .zip(layer.weights().data())
            {
                *slot += 2.0 * l2 * w;
            }
            for (slot, &b) in grads.biases[k].iter_mut().zip(layer.bias()) {
                *slot += 2.0 * l2 * b;
            }
        }
    }
    (objective, grads)
}

struct MlpTrainer<'a> {
    model: &'a mut MlpRegressor,
    coords: Vec<&'a [usize]>,
    targets_std: Vec<f64>,
    val: Option<(Vec<&'a [usize]>, Vec<f64>)>,
    l2: f64,
    adam: AdamState,
    batch_coords: Vec<&'a [usize]>,
    batch_targets: Vec<f64>,
}

impl Trainable for MlpTrainer<'_> {
    type Snapshot = DenseNet;

    fn batch_step(&mut self, indices: &[usize]) -> f64 {
        self.batch_coords.clear();
        self.batch_targets.clear();
        for &i in indices {
            self.batch_coords.push(self.coords[i]);
            self.batch_targets.push(self.targets_std[i]);
        }
        let (objective, grads) =
            objective_and_gradients(self.model, &self.batch_coords, &self.batch_targets, self.l2);
        self.model.net.adam_step(&mut self.adam, &grads);
        objective
    }

    fn val_mae(&mut self) -> Option<f64> {
        let (coords, values) = self.val.as_ref()?;
        let mut x = Vec::new();
        let mut total = 0.0;
        for (coord, &y) in coords.iter().zip(values) {
            self.model
                .encoder
                .encode_into(coord, &mut x)
                .expect("validation coords are in-bounds");
            let (out, _) = self.model.net.forward(&x).expect("width matches");
            total += (self.model.stats.destandardize(out[0]) - y).abs();
        }
        Some(total / values.len() as f64)
    }

    fn snapshot(&self) -> Self::Snapshot {
        self.model.net.clone()
    }

    fn restore(&mut self, snapshot: Self::Snapshot) {
        self.model.net = snapshot;
    }

    fn params_digest(&self) -> String {
        self.model.params_digest()
    }
}

/// Trains on the observed entries under the same contracts as the tensor
/// models: stats bound from training targets, seeded shuffles from the
/// `mlp.shuffle` stream, divergence abort, optional early stopping.
pub fn train(
    mut model: MlpRegressor,
    train: &SparseTensor,
    cfg: &MlpTrainConfig,
    val: Option<&SparseTensor>,
) -> Result<(MlpRegressor, TrainReport), TrainError> {
    cfg.validate()?;
    if !train.is_deduped() {
        return Err(TrainError::Data(
            "training tensor has not been deduplicated".into(),
        ));
    }
    if train.is_empty() {
        return Err(TrainError::Data("training tensor is empty".into()));
    }
    if train.shape().dims() != model.encoder.shape().dims() {
        return Err(TrainError::Data(format!(
            "training tensor shape {:?} does not match encoder shape {:?}",
            train.shape().dims(),
            model.encoder.shape().dims()
        )));
    }
    if let Some(v) = val {
        if v.shape().dims() != model.encoder.shape().dims() {
            return Err(TrainError::Data(format!(
                "validation tensor shape {:?} does not match encoder shape {:?}",
                v.shape().dims(),
                model.encoder.shape().dims()
            )));
        }
    }

    let values: Vec<f64> = train.entries().iter().map(|e| e.value()).collect();
    model.stats = ValueStats::from_values(&values);
    let targets_std: Vec<f64> = values.iter().map(|&y| model.stats.standardize(y)).collect();
    let coords: Vec<&[usize]> = train.entries().iter().map(|e| e.coord()).collect();
    let val_data = val.map(|v| {
        (
            v.entries().iter().map(|e| e.coord()).collect::<Vec<_>>(),
            v.entries().iter().map(|e| e.value()).collect::<Vec<_>>(),
        )
    });

    let adam = AdamState::new(
        model.net.param_count(),
        AdamHyper::with_learning_rate(cfg.learning_rate),
    );
    let n_entries = coords.len();
    let mut trainer = MlpTrainer {
        model: &mut model,
        coords,
        targets_std,
        val: val_data,
        l2: cfg.l2,
        adam,
        batch_coords: Vec::with_capacity(cfg.batch_size),
        batch_targets: Vec::with_capacity(cfg.batch_size),
    };
    let loop_cfg = TrainLoop {
        epochs: cfg.epochs,
        batch_size: cfg.batch_size,
        patience: cfg.patience,
        learning_rate: cfg.learning_rate,
    };
    let mut rng = Rng::for_domain(cfg.seed, "mlp.shuffle");
    let report = run_training(&mut trainer, n_entries, &loop_cfg, &mut rng)?;
    Ok((model, report))
}
