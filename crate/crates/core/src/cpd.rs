//! CP factorization trained on observed entries only.
//!
//! A [`CPModel`] holds one factor matrix per tensor mode (rows match the
//! mode extent, columns are the shared rank R). A raw prediction at a
//! coordinate is the sum over components of the product of one factor row
//! entry per mode. Training minimizes squared error on standardized targets
//! plus an L2 term over all factors and, optionally, a squared-difference
//! smoothness penalty over ordinal (count) modes; a positive
//! `smooth_lambda` is what turns plain CPD into its smoothed variant.
//!
//! The optimizer is minibatch Adam over the full factor set. There is no
//! alternating least squares path: entries are observed sparsely, and the
//! gradient machinery is shared with the neural models.

use serde::{Deserialize, Serialize};

use crate::checkpoint;
use crate::mat::Mat;
use crate::neural::{AdamHyper, AdamState};
use crate::rng::Rng;
use crate::sptensor::{Shape, SparseTensor};
use crate::trainer::{
    run_training, PredictError, TrainError, TrainLoop, TrainReport, Trainable, ValueStats,
};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CPTrainConfig {
    pub rank: usize,
    pub learning_rate: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub l2: f64,
    /// Smoothness weight; unset means 0 (plain CPD). Positive values select
    /// the smoothed variant. The objective applies it to the mean squared
    /// row difference over ordinal modes, amortized per batch row, so its
    /// useful range does not depend on mode extents, rank, or batch size:
    /// single digits bend count-mode factors gently, tens of thousands
    /// force them flat.
    pub smooth_lambda: Option<f64>,
    /// Modes the smoothness penalty applies to; unset means every
    /// count-kind mode of the training tensor.
    pub ordinal_modes: Option<Vec<usize>>,
    pub seed: u64,
    /// Factor init half-width; unset picks a width from the rank and the
    /// tensor's mode count so fresh raw predictions start near 0.2 of the
    /// target scale. Too small an init strands a high-order factorization
    /// on the flat region around the origin, where minibatch gradients
    /// average out and the loss never leaves the target variance.
    pub init_scale: Option<f64>,
    /// Early-stopping patience in epochs, used only when a validation set
    /// is supplied.
    pub patience: Option<usize>,
}

impl Default for CPTrainConfig {
    fn default() -> Self {
        CPTrainConfig {
            rank: 8,
            learning_rate: 1e-2,
            epochs: 200,
            batch_size: 256,
            l2: 1e-4,
            smooth_lambda: None,
            ordinal_modes: None,
            seed: 0,
            init_scale: None,
            patience: None,
        }
    }
}

impl CPTrainConfig {
    pub fn effective_smooth_lambda(&self) -> f64 {
        self.smooth_lambda.unwrap_or(0.0)
    }

    /// Resolves the init half-width for a tensor with `ndims` modes. The
    /// default solves scale^ndims = 0.2/sqrt(rank), so each component's
    /// product of typical entries lands at 0.2/sqrt(rank) and the rank-R
    /// sum starts around 0.2 of the standardized target scale.
    pub fn effective_init_scale(&self, ndims: usize) -> f64 {
        self.init_scale.unwrap_or_else(|| {
            let target = 0.2 / (self.rank.max(1) as f64).sqrt();
            target.powf(1.0 / ndims.max(1) as f64)
        })
    }

    pub fn validate(&self) -> Result<(), TrainError> {
        if self.rank < 1 {
            return Err(TrainError::InvalidConfig("rank must be >= 1".into()));
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
        if let Some(lambda) = self.smooth_lambda {
            if lambda < 0.0 {
                return Err(TrainError::InvalidConfig(
                    "smooth_lambda must be >= 0".into(),
                ));
            }
        }
        if let Some(scale) = self.init_scale {
            if scale < 0.0 {
                return Err(TrainError::InvalidConfig("init_scale must be >= 0".into()));
            }
        }
        if self.patience == Some(0) {
            return Err(TrainError::InvalidConfig("patience must be >= 1".into()));
        }
        Ok(())
    }
}

/// CP factor model plus the target standardization it was trained under.
#[derive(Clone, Debug, PartialEq)]
pub struct CPModel {
    factors: Vec<Mat>,
    rank: usize,
    stats: ValueStats,
}

impl CPModel {
    /// Assembles a model from existing factors (checkpoint loading).
    pub fn from_parts(factors: Vec<Mat>, stats: ValueStats) -> Result<Self, TrainError> {
        if factors.len() < 2 {
            return Err(TrainError::InvalidConfig(
                "a CP model needs at least 2 factor matrices".into(),
            ));
        }
        let rank = factors[0].cols();
        if rank < 1 {
            return Err(TrainError::InvalidConfig("rank must be >= 1".into()));
        }
        if factors.iter().any(|f| f.cols() != rank) {
            return Err(TrainError::InvalidConfig(
                "factor matrices disagree on rank".into(),
            ));
        }
        Ok(CPModel {
            factors,
            rank,
            stats,
        })
    }

    pub fn factors(&self) -> &[Mat] {
        &self.factors
    }

    pub fn rank(&self) -> usize {
        self.rank
    }

    pub fn stats(&self) -> ValueStats {
        self.stats
    }

    pub fn ndims(&self) -> usize {
        self.factors.len()
    }

    pub fn mode_dims(&self) -> Vec<usize> {
        self.factors.iter().map(|f| f.rows()).collect()
    }

    fn check_coord(&self, coord: &[usize]) -> Result<(), PredictError> {
        if coord.len() != self.factors.len() {
            return Err(PredictError::ArityMismatch {
                got: coord.len(),
                want: self.factors.len(),
            });
        }
        for (mode, (&index, factor)) in coord.iter().zip(&self.factors).enumerate() {
            if index >= factor.rows() {
                return Err(PredictError::OutOfBounds {
                    mode,
                    index,
                    extent: factor.rows(),
                });
            }
        }
        Ok(())
    }

    /// Standardized-scale prediction: sum over components of the product of
    /// one factor entry per mode.
    pub fn predict_raw(&self, coord: &[usize]) -> Result<f64, PredictError> {
        self.check_coord(coord)?;
        Ok(self.predict_raw_unchecked(coord))
    }

    #[inline]
    pub(crate) fn predict_raw_unchecked(&self, coord: &[usize]) -> f64 {
        let mut total = 0.0;
        for r in 0..self.rank {
            let mut product = 1.0;
            for (factor, &i) in self.factors.iter().zip(coord) {
                product *= factor.get(i, r);
            }
            total += product;
        }
        total
    }

    /// Original-unit prediction: `mean + std * predict_raw`.
    pub fn predict(&self, coord: &[usize]) -> Result<f64, PredictError> {
        if !self.stats.is_bound() {
            return Err(PredictError::StatsUnbound);
        }
        Ok(self.stats.destandardize(self.predict_raw(coord)?))
    }

    /// Sum over the given modes of squared differences between successive
    /// factor rows. Zero for constant factors and for an empty mode set.
    pub fn smoothness_penalty(&self, ordinal_modes: &[usize]) -> f64 {
        let mut total = 0.0;
        for &n in ordinal_modes {
            let factor = &self.factors[n];
            for i in 0..factor.rows().saturating_sub(1) {
                for r in 0..factor.cols() {
                    let d = factor.get(i + 1, r) - factor.get(i, r);
                    total += d * d;
                }
            }
        }
        total
    }

    fn sq_norm_all(&self) -> f64 {
        self.factors.iter().map(Mat::sq_norm).sum()
    }

    /// Number of squared-difference terms inside [`smoothness_penalty`]:
    /// one per row gap per component. The training objective divides the
    /// penalty by this so `smooth_lambda` weights the mean squared row
    /// difference and stays comparable across extents and ranks.
    fn smoothness_terms(&self, ordinal_modes: &[usize]) -> usize {
        ordinal_modes
            .iter()
            .map(|&n| self.factors[n].rows().saturating_sub(1) * self.factors[n].cols())
            .sum()
    }
}

/// `smooth_lambda` rescaled so it weights the mean squared row difference
/// against a single batch row's squared error. Values around 1 to 100 bend
/// ordinal factors gently; values in the tens of thousands force them flat.
fn smoothness_weight(
    model: &CPModel,
    smooth_lambda: f64,
    ordinal_modes: &[usize],
    batch_len: usize,
) -> f64 {
    if smooth_lambda <= 0.0 {
        return 0.0;
    }
    match model.smoothness_terms(ordinal_modes) {
        0 => 0.0,
        terms => smooth_lambda / (terms * batch_len.max(1)) as f64,
    }
}

/// Fresh model with factor entries i.i.d. uniform on the init interval,
/// read off factor by factor in row-major order from the seed's `cpd.init`
/// stream. Value stats stay unbound until training.
pub fn init_model(shape: &Shape, cfg: &CPTrainConfig) -> CPModel {
    let scale = cfg.effective_init_scale(shape.ndims());
    let mut rng = Rng::for_domain(cfg.seed, "cpd.init");
    let factors = shape
        .dims()
        .iter()
        .map(|&extent| {
            let mut f = Mat::zeros(extent, cfg.rank);
            for i in 0..extent {
                for r in 0..cfg.rank {
                    f.set(i, r, rng.uniform(-scale, scale));
                }
            }
            f
        })
        .collect();
    CPModel {
        factors,
        rank: cfg.rank,
        stats: ValueStats::default(),
    }
}

/// The training objective on one batch of (coordinate, standardized target)
/// pairs: mean squared raw-prediction error plus `l2` times the squared
/// norm of all factors plus the smoothness term. The smoothness term is
/// `smooth_lambda` times the mean squared difference between successive
/// ordinal-mode factor rows, divided by the batch length like the data
/// term, so a given `smooth_lambda` keeps the same relative strength
/// whatever the mode extents, rank, and batch size.
pub fn batch_objective(
    model: &CPModel,
    coords: &[&[usize]],
    targets_std: &[f64],
    l2: f64,
    smooth_lambda: f64,
    ordinal_modes: &[usize],
) -> f64 {
    assert_eq!(coords.len(), targets_std.len());
    assert!(!coords.is_empty(), "objective needs at least one entry");
    let mut data = 0.0;
    for (coord, &z) in coords.iter().zip(targets_std) {
        let r = model.predict_raw_unchecked(coord) - z;
        data += r * r;
    }
    data / coords.len() as f64
        + l2 * model.sq_norm_all()
        + smoothness_weight(model, smooth_lambda, ordinal_modes, coords.len())
            * model.smoothness_penalty(ordinal_modes)
}

/// Analytic gradient of [`batch_objective`] with respect to every factor
/// entry, as one matrix per mode.
pub fn batch_gradients(
    model: &CPModel,
    coords: &[&[usize]],
    targets_std: &[f64],
    l2: f64,
    smooth_lambda: f64,
    ordinal_modes: &[usize],
) -> Vec<Mat> {
    assert_eq!(coords.len(), targets_std.len());
    assert!(!coords.is_empty(), "gradient needs at least one entry");
    let mut grads: Vec<Mat> = model
        .factors
        .iter()
        .map(|f| Mat::zeros(f.rows(), f.cols()))
        .collect();
    let ndims = model.factors.len();
    let mut fwd = vec![0.0; ndims + 1];
    let mut bwd = vec![0.0; ndims + 1];
    accumulate_data_gradients(model, coords, targets_std, &mut grads, &mut fwd, &mut bwd);
    let weight = smoothness_weight(model, smooth_lambda, ordinal_modes, coords.len());
    add_regularizer_gradients(model, &mut grads, l2, weight, ordinal_modes);
    grads
}

/// Adds the data-term gradient (2/B) * residual * leave-one-out product for
/// every batch entry, using forward/backward partial products instead of
/// divisions so zero factor entries stay exact.
fn accumulate_data_gradients(
    model: &CPModel,
    coords: &[&[usize]],
    targets_std: &[f64],
    grads: &mut [Mat],
    fwd: &mut [f64],
    bwd: &mut [f64],
) {
    let ndims = model.factors.len();
    let scale = 2.0 / coords.len() as f64;
    for (coord, &z) in coords.iter().zip(targets_std) {
        let prediction = model.predict_raw_unchecked(coord);
        let coeff = scale * (prediction - z);
        for r in 0..model.rank {
            fwd[0] = 1.0;
            for n in 0..ndims {
                fwd[n + 1] = fwd[n] * model.factors[n].get(coord[n], r);
            }
            bwd[ndims] = 1.0;
            for n in (0..ndims).rev() {
                bwd[n] = bwd[n + 1] * model.factors[n].get(coord[n], r);
            }
            for n in 0..ndims {
                grads[n].add_at(coord[n], r, coeff * fwd[n] * bwd[n + 1]);
            }
        }
    }
}

fn add_regularizer_gradients(
    model: &CPModel,
    grads: &mut [Mat],
    l2: f64,
    smooth_weight: f64,
    ordinal_modes: &[usize],
) {
    if l2 > 0.0 {
        for (grad, factor) in grads.iter_mut().zip(&model.factors) {
            for (g, &w) in grad.data_mut().iter_mut().zip(factor.data()) {
                *g += 2.0 * l2 * w;
            }
        }
    }
    if smooth_weight > 0.0 {
        for &n in ordinal_modes {
            let factor = &model.factors[n];
            let rows = factor.rows();
            for i in 0..rows {
                for r in 0..factor.cols() {
                    let mut g = 0.0;
                    if i > 0 {
                        g += 2.0 * (factor.get(i, r) - factor.get(i - 1, r));
                    }
                    if i + 1 < rows {
                        g -= 2.0 * (factor.get(i + 1, r) - factor.get(i, r));
                    }
                    grads[n].add_at(i, r, smooth_weight * g);
                }
            }
        }
    }
}

struct CpdTrainer<'a> {
    model: &'a mut CPModel,
    coords: Vec<&'a [usize]>,
    targets_std: Vec<f64>,
    val: Option<(Vec<&'a [usize]>, Vec<f64>)>,
    l2: f64,
    smooth_lambda: f64,
    ordinal_modes: Vec<usize>,
    adam: AdamState,
    grads: Vec<Mat>,
    fwd: Vec<f64>,
    bwd: Vec<f64>,
    batch_coords: Vec<&'a [usize]>,
    batch_targets: Vec<f64>,
}

impl Trainable for CpdTrainer<'_> {
    type Snapshot = Vec<Mat>;

    fn batch_step(&mut self, indices: &[usize]) -> f64 {
        self.batch_coords.clear();
        self.batch_targets.clear();
        for &i in indices {
            self.batch_coords.push(self.coords[i]);
            self.batch_targets.push(self.targets_std[i]);
        }
        for g in &mut self.grads {
            g.fill(0.0);
        }
        let objective = batch_objective(
            self.model,
            &self.batch_coords,
            &self.batch_targets,
            self.l2,
            self.smooth_lambda,
            &self.ordinal_modes,
        );
        accumulate_data_gradients(
            self.model,
            &self.batch_coords,
            &self.batch_targets,
            &mut self.grads,
            &mut self.fwd,
            &mut self.bwd,
        );
        let smooth_weight = smoothness_weight(
            self.model,
            self.smooth_lambda,
            &self.ordinal_modes,
            self.batch_coords.len(),
        );
        add_regularizer_gradients(
            self.model,
            &mut self.grads,
            self.l2,
            smooth_weight,
            &self.ordinal_modes,
        );
        self.adam.begin_step();
        let total: usize = self.model.factors.iter().map(|f| f.data().len()).sum();
        for (factor, grad) in self.model.factors.iter_mut().zip(&self.grads) {
            self.adam.update_chunk(factor.data_mut(), grad.data());
        }
        self.adam.end_step(total);
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

    fn snapshot(&self) -> Vec<Mat> {
        self.model.factors.clone()
    }

    fn restore(&mut self, snapshot: Vec<Mat>) {
        self.model.factors = snapshot;
    }

    fn params_digest(&self) -> String {
        checkpoint::digest(
            self.model
                .factors
                .iter()
                .flat_map(|f| f.data().iter().copied()),
        )
    }
}

fn check_tensor_matches(
    model: &CPModel,
    tensor: &SparseTensor,
    what: &str,
) -> Result<(), TrainError> {
    let dims = model.mode_dims();
    if tensor.shape().dims() != dims.as_slice() {
        return Err(TrainError::Data(format!(
            "{what} tensor shape {:?} does not match model dims {:?}",
            tensor.shape().dims(),
            dims
        )));
    }
    Ok(())
}

/// Trains `model` on the observed entries of `train`, binding its value
/// stats from the training targets first. Entry order is reshuffled every
/// epoch from the seed's `cpd.shuffle` stream; the optimizer state is fresh
/// per call, so staged schedules can chain several calls with decreasing
/// learning rates.
pub fn train(
    mut model: CPModel,
    train: &SparseTensor,
    cfg: &CPTrainConfig,
    val: Option<&SparseTensor>,
) -> Result<(CPModel, TrainReport), TrainError> {
    cfg.validate()?;
    if cfg.rank != model.rank {
        return Err(TrainError::InvalidConfig(format!(
            "config rank {} does not match model rank {}",
            cfg.rank, model.rank
        )));
    }
    if !train.is_deduped() {
        return Err(TrainError::Data(
            "training tensor has not been deduplicated".into(),
        ));
    }
    if train.is_empty() {
        return Err(TrainError::Data("training tensor is empty".into()));
    }
    check_tensor_matches(&model, train, "training")?;
    if let Some(v) = val {
        check_tensor_matches(&model, v, "validation")?;
    }
    let ordinal_modes = match &cfg.ordinal_modes {
        Some(modes) => {
            for &n in modes {
                if n >= train.shape().ndims() {
                    return Err(TrainError::InvalidConfig(format!(
                        "ordinal mode {n} out of range for {} modes",
                        train.shape().ndims()
                    )));
                }
            }
            modes.clone()
        }
        None => train.shape().count_modes(),
    };

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

    let param_count: usize = model.factors.iter().map(|f| f.data().len()).sum();
    let grads: Vec<Mat> = model
        .factors
        .iter()
        .map(|f| Mat::zeros(f.rows(), f.cols()))
        .collect();
    let ndims = model.factors.len();
    let n_entries = coords.len();
    let mut trainer = CpdTrainer {
        model: &mut model,
        coords,
        targets_std,
        val: val_data,
        l2: cfg.l2,
        smooth_lambda: cfg.effective_smooth_lambda(),
        ordinal_modes,
        adam: AdamState::new(
            param_count,
            AdamHyper::with_learning_rate(cfg.learning_rate),
        ),
        grads,
        fwd: vec![0.0; ndims + 1],
        bwd: vec![0.0; ndims + 1],
        batch_coords: Vec::with_capacity(cfg.batch_size),
        batch_targets: Vec::with_capacity(cfg.batch_size),
    };
    let loop_cfg = TrainLoop {
        epochs: cfg.epochs,
        batch_size: cfg.batch_size,
        patience: cfg.patience,
        learning_rate: cfg.learning_rate,
    };
    let mut rng = Rng::for_domain(cfg.seed, "cpd.shuffle");
    let report = run_training(&mut trainer, n_entries, &loop_cfg, &mut rng)?;
    Ok((model, report))
}
