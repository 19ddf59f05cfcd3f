//! Neural additive tensor completion.
//!
//! The model keeps CP's additive skeleton (a sum over R components) but
//! replaces each component's multilinear product with a small relu network:
//! component `r` owns one embedding matrix per mode (extent rows, `d`
//! columns) and a one-hidden-layer net that maps the concatenation of the
//! addressed embedding rows to a scalar. Gradients flow through the nets
//! into the embedding rows via the input gradient of the backward pass.
//!
//! Standardization, divergence handling, early stopping, and determinism
//! follow the same contracts as the CP trainer.

use serde::{Deserialize, Serialize};

use crate::checkpoint;
use crate::mat::Mat;
use crate::neural::{AdamHyper, AdamState, DenseNet, NetGrads};
use crate::rng::Rng;
use crate::sptensor::{Shape, SparseTensor};
use crate::trainer::{
    run_training, PredictError, TrainError, TrainLoop, TrainReport, Trainable, ValueStats,
};

/// Half-width of the uniform interval embedding entries are drawn from.
pub const EMBED_INIT_HALF_WIDTH: f64 = 0.5;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct NeatTrainConfig {
    /// Number of additive components R.
    pub components: usize,
    /// Embedding width d per mode per component.
    pub embed_dim: usize,
    /// Hidden layer width of each component net.
    pub hidden: usize,
    pub learning_rate: f64,
    pub epochs: usize,
    pub batch_size: usize,
    /// L2 weight on embeddings and network parameters.
    pub l2: f64,
    pub seed: u64,
    pub patience: Option<usize>,
}

impl Default for NeatTrainConfig {
    fn default() -> Self {
        NeatTrainConfig {
            components: 8,
            embed_dim: 4,
            hidden: 16,
            learning_rate: 1e-3,
            epochs: 300,
            batch_size: 256,
            l2: 1e-4,
            seed: 0,
            patience: None,
        }
    }
}

impl NeatTrainConfig {
    pub fn validate(&self) -> Result<(), TrainError> {
        if self.components < 1 || self.embed_dim < 1 || self.hidden < 1 {
            return Err(TrainError::InvalidConfig(
                "components, embed_dim, and hidden must be >= 1".into(),
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

/// Additive sum of per-component embedding nets plus target stats.
#[derive(Clone, Debug, PartialEq)]
pub struct NeatModel {
    /// `embeddings[r][n]`: extent(n) x embed_dim matrix for component r.
    embeddings: Vec<Vec<Mat>>,
    components: Vec<DenseNet>,
    embed_dim: usize,
    stats: ValueStats,
}

impl NeatModel {
    pub fn components(&self) -> &[DenseNet] {
        &self.components
    }

    pub fn embeddings(&self) -> &[Vec<Mat>] {
        &self.embeddings
    }

    pub fn embed_dim(&self) -> usize {
        self.embed_dim
    }

    pub fn stats(&self) -> ValueStats {
        self.stats
    }

    pub fn ndims(&self) -> usize {
        self.embeddings[0].len()
    }

    pub fn mode_dims(&self) -> Vec<usize> {
        self.embeddings[0].iter().map(Mat::rows).collect()
    }

    /// Assembles a model from parts (checkpoint loading). Validates that
    /// all components agree on mode extents and input widths.
    pub fn from_parts(
        embeddings: Vec<Vec<Mat>>,
        components: Vec<DenseNet>,
        stats: ValueStats,
    ) -> Result<Self, TrainError> {
        if embeddings.is_empty() || embeddings.len() != components.len() {
            return Err(TrainError::InvalidConfig(
                "need one embedding set per component".into(),
            ));
        }
        let ndims = embeddings[0].len();
        if ndims == 0 {
            return Err(TrainError::InvalidConfig("no modes".into()));
        }
        let embed_dim = embeddings[0][0].cols();
        let dims: Vec<usize> = embeddings[0].iter().map(Mat::rows).collect();
        for (r, set) in embeddings.iter().enumerate() {
            if set.len() != ndims {
                return Err(TrainError::InvalidConfig(format!(
                    "component {r} has {} modes, expected {ndims}",
                    set.len()
                )));
            }
            for (n, emb) in set.iter().enumerate() {
                if emb.rows() != dims[n] || emb.cols() != embed_dim {
                    return Err(TrainError::InvalidConfig(format!(
                        "component {r} mode {n} embedding is {}x{}, expected {}x{embed_dim}",
                        emb.rows(),
                        emb.cols(),
                        dims[n]
                    )));
                }
            }
            if components[r].in_dim() != ndims * embed_dim || components[r].out_dim() != 1 {
                return Err(TrainError::InvalidConfig(format!(
                    "component {r} net maps {} -> {}, expected {} -> 1",
                    components[r].in_dim(),
                    components[r].out_dim(),
                    ndims * embed_dim
                )));
            }
        }
        Ok(NeatModel {
            embeddings,
            components,
            embed_dim,
            stats,
        })
    }

    fn check_coord(&self, coord: &[usize]) -> Result<(), PredictError> {
        let dims = self.mode_dims();
        if coord.len() != dims.len() {
            return Err(PredictError::ArityMismatch {
                got: coord.len(),
                want: dims.len(),
            });
        }
        for (mode, (&index, &extent)) in coord.iter().zip(&dims).enumerate() {
            if index >= extent {
                return Err(PredictError::OutOfBounds {
                    mode,
                    index,
                    extent,
                });
            }
        }
        Ok(())
    }

    fn gather_input(&self, r: usize, coord: &[usize], out: &mut Vec<f64>) {
        out.clear();
        for (n, &i) in coord.iter().enumerate() {
            out.extend_from_slice(self.embeddings[r][n].row(i));
        }
    }

    /// Standardized-scale prediction: sum over components of each net's
    /// scalar output on its concatenated embedding rows.
    pub fn predict_raw(&self, coord: &[usize]) -> Result<f64, PredictError> {
        self.check_coord(coord)?;
        Ok(self.predict_raw_unchecked(coord))
    }

    pub(crate) fn predict_raw_unchecked(&self, coord: &[usize]) -> f64 {
        let mut input = Vec::with_capacity(self.ndims() * self.embed_dim);
        let mut total = 0.0;
        for r in 0..self.components.len() {
            self.gather_input(r, coord, &mut input);
            let (y, _) = self.components[r]
                .forward(&input)
                .expect("input width matches component net");
            total += y[0];
        }
        total
    }

    /// Original-unit prediction.
    pub fn predict(&self, coord: &[usize]) -> Result<f64, PredictError> {
        if !self.stats.is_bound() {
            return Err(PredictError::StatsUnbound);
        }
        Ok(self.stats.destandardize(self.predict_raw(coord)?))
    }

    fn params_sq_norm(&self) -> f64 {
        let emb: f64 = self
            .embeddings
            .iter()
            .flat_map(|set| set.iter())
            .map(Mat::sq_norm)
            .sum();
        let nets: f64 = self
            .components
            .iter()
            .map(|net| net.params_to_vec().iter().map(|w| w * w).sum::<f64>())
            .sum();
        emb + nets
    }

    fn params_digest(&self) -> String {
        let emb = self
            .embeddings
            .iter()
            .flat_map(|set| set.iter())
            .flat_map(|m| m.data().iter().copied());
        let nets: Vec<f64> = self
            .components
            .iter()
            .flat_map(|net| net.params_to_vec())
            .collect();
        checkpoint::digest(emb.chain(nets))
    }
}

/// Fresh model: embeddings uniform on the init interval, nets
/// glorot-initialized, all drawn in a fixed order from the seed's
/// `neat.init` stream (per component: embeddings mode by mode, then the
/// net layer by layer).
pub fn init_model(shape: &Shape, cfg: &NeatTrainConfig) -> NeatModel {
    let mut rng = Rng::for_domain(cfg.seed, "neat.init");
    let ndims = shape.ndims();
    let mut embeddings = Vec::with_capacity(cfg.components);
    let mut components = Vec::with_capacity(cfg.components);
    for _ in 0..cfg.components {
        let set: Vec<Mat> = shape
            .dims()
            .iter()
            .map(|&extent| {
                let mut emb = Mat::zeros(extent, cfg.embed_dim);
                for i in 0..extent {
                    for j in 0..cfg.embed_dim {
                        emb.set(
                            i,
                            j,
                            rng.uniform(-EMBED_INIT_HALF_WIDTH, EMBED_INIT_HALF_WIDTH),
                        );
                    }
                }
                emb
            })
            .collect();
        embeddings.push(set);
        components.push(DenseNet::mlp(
            ndims * cfg.embed_dim,
            &[cfg.hidden],
            1,
            &mut rng,
        ));
    }
    NeatModel {
        embeddings,
        components,
        embed_dim: cfg.embed_dim,
        stats: ValueStats::default(),
    }
}

/// Gradients mirroring a [`NeatModel`]'s parameters.
#[derive(Clone, Debug)]
pub struct NeatGrads {
    pub embeddings: Vec<Vec<Mat>>,
    pub nets: Vec<NetGrads>,
}

impl NeatGrads {
    pub fn zeros_like(model: &NeatModel) -> Self {
        NeatGrads {
            embeddings: model
                .embeddings
                .iter()
                .map(|set| set.iter().map(|m| Mat::zeros(m.rows(), m.cols())).collect())
                .collect(),
            nets: model.components.iter().map(NetGrads::zeros_like).collect(),
        }
    }
}

/// Batch objective: mean squared standardized error plus `l2` times the
/// squared norm of all embeddings and network parameters.
pub fn batch_objective(
    model: &NeatModel,
    coords: &[&[usize]],
    targets_std: &[f64],
    l2: f64,
) -> f64 {
    assert_eq!(coords.len(), targets_std.len());
    assert!(!coords.is_empty(), "objective needs at least one entry");
    let mut data = 0.0;
    for (coord, &z) in coords.iter().zip(targets_std) {
        let r = model.predict_raw_unchecked(coord) - z;
        data += r * r;
    }
    data / coords.len() as f64 + l2 * model.params_sq_norm()
}

/// Analytic gradient of [`batch_objective`]. One forward pass per entry per
/// component; the upstream residual is pushed back through each net and its
/// input gradient is scattered into the addressed embedding rows.
pub fn batch_gradients(
    model: &NeatModel,
    coords: &[&[usize]],
    targets_std: &[f64],
    l2: f64,
) -> NeatGrads {
    let (_, grads) = objective_and_gradients(model, coords, targets_std, l2);
    grads
}

fn objective_and_gradients(
    model: &NeatModel,
    coords: &[&[usize]],
    targets_std: &[f64],
    l2: f64,
) -> (f64, NeatGrads) {
    assert_eq!(coords.len(), targets_std.len());
    assert!(!coords.is_empty(), "gradient needs at least one entry");
    let mut grads = NeatGrads::zeros_like(model);
    let n_components = model.components.len();
    let scale = 2.0 / coords.len() as f64;
    let mut input = Vec::with_capacity(model.ndims() * model.embed_dim);
    let mut data = 0.0;
    let mut tapes = Vec::with_capacity(n_components);
    for (coord, &z) in coords.iter().zip(targets_std) {
        tapes.clear();
        let mut prediction = 0.0;
        for r in 0..n_components {
            model.gather_input(r, coord, &mut input);
            let (y, tape) = model.components[r]
                .forward(&input)
                .expect("input width matches component net");
            prediction += y[0];
            tapes.push(tape);
        }
        let residual = prediction - z;
        data += residual * residual;
        let upstream = [scale * residual];
        for (r, tape) in tapes.iter().enumerate() {
            let (net_grads, input_grad) = model.components[r]
                .backward(tape, &upstream)
                .expect("tape from this forward pass");
            grads.nets[r].accumulate(&net_grads);
            for (n, &i) in coord.iter().enumerate() {
                let row = grads.embeddings[r][n].row_mut(i);
                let from = &input_grad[n * model.embed_dim..(n + 1) * model.embed_dim];
                for (slot, g) in row.iter_mut().zip(from) {
                    *slot += g;
                }
            }
        }
    }
    let mut objective = data / coords.len() as f64;
    if l2 > 0.0 {
        objective += l2 * model.params_sq_norm();
        for (gset, eset) in grads.embeddings.iter_mut().zip(&model.embeddings) {
            for (g, e) in gset.iter_mut().zip(eset) {
                for (slot, &w) in g.data_mut().iter_mut().zip(e.data()) {
                    *slot += 2.0 * l2 * w;
                }
            }
        }
        for (g, net) in grads.nets.iter_mut().zip(&model.components) {
            for (k, layer) in net.layers().iter().enumerate() {
                for (slot, &w) in g.weights[k]
                    .data_mut()
                    .iter_mut()
                    .zip(layer.weights().data())
                {
                    *slot += 2.0 * l2 * w;
                }
                for (slot, &b) in g.biases[k].iter_mut().zip(layer.bias()) {
                    *slot += 2.0 * l2 * b;
                }
            }
        }
    }
    (objective, grads)
}

struct NeatTrainer<'a> {
    model: &'a mut NeatModel,
    coords: Vec<&'a [usize]>,
    targets_std: Vec<f64>,
    val: Option<(Vec<&'a [usize]>, Vec<f64>)>,
    l2: f64,
    emb_adam: AdamState,
    net_adams: Vec<AdamState>,
    batch_coords: Vec<&'a [usize]>,
    batch_targets: Vec<f64>,
}

impl Trainable for NeatTrainer<'_> {
    type Snapshot = (Vec<Vec<Mat>>, Vec<DenseNet>);

    fn batch_step(&mut self, indices: &[usize]) -> f64 {
        self.batch_coords.clear();
        self.batch_targets.clear();
        for &i in indices {
            self.batch_coords.push(self.coords[i]);
            self.batch_targets.push(self.targets_std[i]);
        }
        let (objective, grads) =
            objective_and_gradients(self.model, &self.batch_coords, &self.batch_targets, self.l2);
        self.emb_adam.begin_step();
        let mut covered = 0usize;
        for (eset, gset) in self.model.embeddings.iter_mut().zip(&grads.embeddings) {
            for (emb, g) in eset.iter_mut().zip(gset) {
                covered += g.data().len();
                self.emb_adam.update_chunk(emb.data_mut(), g.data());
            }
        }
        self.emb_adam.end_step(covered);
        for ((net, state), g) in self
            .model
            .components
            .iter_mut()
            .zip(&mut self.net_adams)
            .zip(&grads.nets)
        {
            net.adam_step(state, g);
        }
        objective
    }

    fn val_mae(&mut self) -> Option<f64> {
        let (coords, values) = self.val.as_ref()?;
        let mut total = 0.0;
        for (coord, &y) in coords.iter().zip(values) {
            let pred = self
                .model
                .stats
                .destandardize(self.model.predict_raw_unchecked(coord));
            total += (pred - y).abs();
        }
        Some(total / values.len() as f64)
    }

    fn snapshot(&self) -> Self::Snapshot {
        (self.model.embeddings.clone(), self.model.components.clone())
    }

    fn restore(&mut self, snapshot: Self::Snapshot) {
        self.model.embeddings = snapshot.0;
        self.model.components = snapshot.1;
    }

    fn params_digest(&self) -> String {
        self.model.params_digest()
    }
}

/// Trains on the observed entries, sharing the CP trainer's contracts:
/// stats bound from training targets, per-epoch seeded shuffles from the
/// `neat.shuffle` stream, divergence abort on non-finite loss, optional
/// early stopping on validation MAE.
pub fn train(
    mut model: NeatModel,
    train: &SparseTensor,
    cfg: &NeatTrainConfig,
    val: Option<&SparseTensor>,
) -> Result<(NeatModel, TrainReport), TrainError> {
    cfg.validate()?;
    if !train.is_deduped() {
        return Err(TrainError::Data(
            "training tensor has not been deduplicated".into(),
        ));
    }
    if train.is_empty() {
        return Err(TrainError::Data("training tensor is empty".into()));
    }
    let dims = model.mode_dims();
    if train.shape().dims() != dims.as_slice() {
        return Err(TrainError::Data(format!(
            "training tensor shape {:?} does not match model dims {:?}",
            train.shape().dims(),
            dims
        )));
    }
    if let Some(v) = val {
        if v.shape().dims() != dims.as_slice() {
            return Err(TrainError::Data(format!(
                "validation tensor shape {:?} does not match model dims {:?}",
                v.shape().dims(),
                dims
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

    let emb_params: usize = model
        .embeddings
        .iter()
        .flat_map(|set| set.iter())
        .map(|m| m.data().len())
        .sum();
    let hyper = AdamHyper::with_learning_rate(cfg.learning_rate);
    let net_adams: Vec<AdamState> = model
        .components
        .iter()
        .map(|net| AdamState::new(net.param_count(), hyper))
        .collect();
    let n_entries = coords.len();
    let mut trainer = NeatTrainer {
        model: &mut model,
        coords,
        targets_std,
        val: val_data,
        l2: cfg.l2,
        emb_adam: AdamState::new(emb_params, hyper),
        net_adams,
        batch_coords: Vec::with_capacity(cfg.batch_size),
        batch_targets: Vec::with_capacity(cfg.batch_size),
    };
    let loop_cfg = TrainLoop {
        epochs: cfg.epochs,
        batch_size: cfg.batch_size,
        patience: cfg.patience,
        learning_rate: cfg.learning_rate,
    };
    let mut rng = Rng::for_domain(cfg.seed, "neat.shuffle");
    let report = run_training(&mut trainer, n_entries, &loop_cfg, &mut rng)?;
    Ok((model, report))
}
