//! Minimal feedforward network kernel: dense layers with relu or identity
//! activations, fixed-topology reverse-mode gradients, and bias-corrected
//! Adam. No general autodiff; the network topology never changes after
//! construction, so [`forward`] records a plain tape of activations and
//! [`backward`] walks the layers in reverse.
//!
//! [`forward`]: DenseNet::forward
//! [`backward`]: DenseNet::backward
//!
//! Backward also returns the gradient with respect to the input vector,
//! which is how embedding tables upstream of a net receive their updates.

use thiserror::Error;

use crate::mat::Mat;
use crate::rng::Rng;

#[derive(Debug, Error)]
pub enum NeuralError {
    #[error("input length {got} does not match first-layer input {want}")]
    InputMismatch { got: usize, want: usize },
    #[error("upstream length {got} does not match output length {want}")]
    UpstreamMismatch { got: usize, want: usize },
    #[error("invalid network: {0}")]
    InvalidNet(String),
    #[error("stale tape: network parameters changed after the forward pass")]
    StaleTape,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Activation {
    Relu,
    Identity,
}

impl Activation {
    #[inline]
    fn apply(self, z: f64) -> f64 {
        match self {
            Activation::Relu => {
                if z > 0.0 {
                    z
                } else {
                    0.0
                }
            }
            Activation::Identity => z,
        }
    }

    /// Derivative at pre-activation `z`; relu uses 0 at the kink.
    #[inline]
    fn derivative(self, z: f64) -> f64 {
        match self {
            Activation::Relu => {
                if z > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
            Activation::Identity => 1.0,
        }
    }
}

/// One affine layer: `a = act(W x + b)` with `W` of shape out×in.
#[derive(Clone, Debug, PartialEq)]
pub struct DenseLayer {
    weights: Mat,
    bias: Vec<f64>,
    activation: Activation,
}

impl DenseLayer {
    pub fn new(weights: Mat, bias: Vec<f64>, activation: Activation) -> Result<Self, NeuralError> {
        if weights.rows() != bias.len() {
            return Err(NeuralError::InvalidNet(format!(
                "weight rows {} but bias length {}",
                weights.rows(),
                bias.len()
            )));
        }
        Ok(DenseLayer {
            weights,
            bias,
            activation,
        })
    }

    /// Seeded fan-scaled init: weights uniform on ±sqrt(6/(in+out)) read off
    /// in row-major order, biases zero.
    pub fn glorot(in_dim: usize, out_dim: usize, activation: Activation, rng: &mut Rng) -> Self {
        let bound = (6.0 / (in_dim + out_dim) as f64).sqrt();
        let mut weights = Mat::zeros(out_dim, in_dim);
        for i in 0..out_dim {
            for j in 0..in_dim {
                weights.set(i, j, rng.uniform(-bound, bound));
            }
        }
        DenseLayer {
            weights,
            bias: vec![0.0; out_dim],
            activation,
        }
    }

    pub fn in_dim(&self) -> usize {
        self.weights.cols()
    }

    pub fn out_dim(&self) -> usize {
        self.weights.rows()
    }

    pub fn weights(&self) -> &Mat {
        &self.weights
    }

    pub fn bias(&self) -> &[f64] {
        &self.bias
    }

    pub fn activation(&self) -> Activation {
        self.activation
    }
}

/// Cached activations from one forward pass. `acts[0]` is the input and
/// `acts[k+1]` the post-activation of layer `k`; `pres[k]` holds layer `k`
/// pre-activations. The version stamp ties the tape to the parameter state
/// it was computed under.
#[derive(Clone, Debug)]
pub struct Tape {
    acts: Vec<Vec<f64>>,
    pres: Vec<Vec<f64>>,
    version: u64,
}

impl Tape {
    pub fn output(&self) -> &[f64] {
        self.acts.last().expect("tape has at least the input")
    }
}

/// Parameter gradients mirroring a [`DenseNet`]'s layers.
#[derive(Clone, Debug, PartialEq)]
pub struct NetGrads {
    pub weights: Vec<Mat>,
    pub biases: Vec<Vec<f64>>,
}

impl NetGrads {
    pub fn zeros_like(net: &DenseNet) -> Self {
        NetGrads {
            weights: net
                .layers
                .iter()
                .map(|l| Mat::zeros(l.out_dim(), l.in_dim()))
                .collect(),
            biases: net.layers.iter().map(|l| vec![0.0; l.out_dim()]).collect(),
        }
    }

    pub fn accumulate(&mut self, other: &NetGrads) {
        for (a, b) in self.weights.iter_mut().zip(&other.weights) {
            for (x, y) in a.data_mut().iter_mut().zip(b.data()) {
                *x += y;
            }
        }
        for (a, b) in self.biases.iter_mut().zip(&other.biases) {
            for (x, y) in a.iter_mut().zip(b) {
                *x += y;
            }
        }
    }

    pub fn scale(&mut self, s: f64) {
        for w in &mut self.weights {
            for x in w.data_mut() {
                *x *= s;
            }
        }
        for b in &mut self.biases {
            for x in b.iter_mut() {
                *x *= s;
            }
        }
    }
}

/// Feedforward network with a regression head (final activation identity).
#[derive(Clone, Debug)]
pub struct DenseNet {
    layers: Vec<DenseLayer>,
    version: u64,
}

/// Equality is parameter equality. The tape version counter is run-local
/// bookkeeping, so a reloaded net compares equal to the one it was saved
/// from.
impl PartialEq for DenseNet {
    fn eq(&self, other: &Self) -> bool {
        self.layers == other.layers
    }
}

impl DenseNet {
    pub fn new(layers: Vec<DenseLayer>) -> Result<Self, NeuralError> {
        if layers.is_empty() {
            return Err(NeuralError::InvalidNet("no layers".to_string()));
        }
        for k in 1..layers.len() {
            if layers[k].in_dim() != layers[k - 1].out_dim() {
                return Err(NeuralError::InvalidNet(format!(
                    "layer {} takes {} inputs but layer {} emits {}",
                    k,
                    layers[k].in_dim(),
                    k - 1,
                    layers[k - 1].out_dim()
                )));
            }
        }
        if layers.last().expect("non-empty").activation != Activation::Identity {
            return Err(NeuralError::InvalidNet(
                "final layer must have identity activation".to_string(),
            ));
        }
        Ok(DenseNet { layers, version: 0 })
    }

    /// Relu hidden layers of the given widths plus an identity output layer,
    /// all glorot-initialized from `rng`.
    pub fn mlp(in_dim: usize, hidden: &[usize], out_dim: usize, rng: &mut Rng) -> Self {
        let mut layers = Vec::with_capacity(hidden.len() + 1);
        let mut prev = in_dim;
        for &width in hidden {
            layers.push(DenseLayer::glorot(prev, width, Activation::Relu, rng));
            prev = width;
        }
        layers.push(DenseLayer::glorot(prev, out_dim, Activation::Identity, rng));
        DenseNet::new(layers).expect("constructed dimensions chain")
    }

    pub fn layers(&self) -> &[DenseLayer] {
        &self.layers
    }

    pub fn in_dim(&self) -> usize {
        self.layers[0].in_dim()
    }

    pub fn out_dim(&self) -> usize {
        self.layers.last().expect("non-empty").out_dim()
    }

    pub fn param_count(&self) -> usize {
        self.layers
            .iter()
            .map(|l| l.weights.data().len() + l.bias.len())
            .sum()
    }

    /// Flat parameter vector: per layer, weights row-major then bias.
    pub fn params_to_vec(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.param_count());
        for layer in &self.layers {
            out.extend_from_slice(layer.weights.data());
            out.extend_from_slice(&layer.bias);
        }
        out
    }

    /// Restores parameters from [`params_to_vec`] order. Invalidates tapes.
    ///
    /// [`params_to_vec`]: DenseNet::params_to_vec
    pub fn set_params(&mut self, flat: &[f64]) -> Result<(), NeuralError> {
        if flat.len() != self.param_count() {
            return Err(NeuralError::InvalidNet(format!(
                "{} parameters supplied, network has {}",
                flat.len(),
                self.param_count()
            )));
        }
        let mut offset = 0;
        for layer in &mut self.layers {
            let w = layer.weights.data_mut();
            w.copy_from_slice(&flat[offset..offset + w.len()]);
            offset += w.len();
            let b = layer.bias.len();
            layer.bias.copy_from_slice(&flat[offset..offset + b]);
            offset += b;
        }
        self.version += 1;
        Ok(())
    }

    pub fn forward(&self, x: &[f64]) -> Result<(Vec<f64>, Tape), NeuralError> {
        if x.len() != self.in_dim() {
            return Err(NeuralError::InputMismatch {
                got: x.len(),
                want: self.in_dim(),
            });
        }
        let mut acts = Vec::with_capacity(self.layers.len() + 1);
        let mut pres = Vec::with_capacity(self.layers.len());
        acts.push(x.to_vec());
        for layer in &self.layers {
            let input = acts.last().expect("pushed above");
            let mut pre = vec![0.0; layer.out_dim()];
            for (i, pre_i) in pre.iter_mut().enumerate() {
                let row = layer.weights.row(i);
                let mut z = layer.bias[i];
                for (w, xi) in row.iter().zip(input) {
                    z += w * xi;
                }
                *pre_i = z;
            }
            let post: Vec<f64> = pre.iter().map(|&z| layer.activation.apply(z)).collect();
            pres.push(pre);
            acts.push(post);
        }
        let y = acts.last().expect("non-empty").clone();
        Ok((
            y,
            Tape {
                acts,
                pres,
                version: self.version,
            },
        ))
    }

    /// Reverse-mode gradients of `upstream · forward(x)` with respect to all
    /// parameters and to the input. The tape must come from a forward pass
    /// on this network's current parameters.
    pub fn backward(
        &self,
        tape: &Tape,
        upstream: &[f64],
    ) -> Result<(NetGrads, Vec<f64>), NeuralError> {
        if tape.version != self.version || tape.pres.len() != self.layers.len() {
            return Err(NeuralError::StaleTape);
        }
        if upstream.len() != self.out_dim() {
            return Err(NeuralError::UpstreamMismatch {
                got: upstream.len(),
                want: self.out_dim(),
            });
        }
        let mut grads = NetGrads::zeros_like(self);
        let mut delta = upstream.to_vec();
        for (k, layer) in self.layers.iter().enumerate().rev() {
            let pre = &tape.pres[k];
            for (d, &z) in delta.iter_mut().zip(pre) {
                *d *= layer.activation.derivative(z);
            }
            let input = &tape.acts[k];
            let wg = &mut grads.weights[k];
            for (i, &d) in delta.iter().enumerate() {
                let row = wg.row_mut(i);
                for (slot, &xj) in row.iter_mut().zip(input) {
                    *slot += d * xj;
                }
                grads.biases[k][i] += d;
            }
            let mut prev = vec![0.0; layer.in_dim()];
            for (i, &d) in delta.iter().enumerate() {
                let row = layer.weights.row(i);
                for (p, &w) in prev.iter_mut().zip(row) {
                    *p += w * d;
                }
            }
            delta = prev;
        }
        Ok((grads, delta))
    }

    /// One Adam update from accumulated gradients. Invalidates tapes.
    pub fn adam_step(&mut self, state: &mut AdamState, grads: &NetGrads) {
        state.begin_step();
        for (k, layer) in self.layers.iter_mut().enumerate() {
            state.update_chunk(layer.weights.data_mut(), grads.weights[k].data());
            state.update_chunk(&mut layer.bias, &grads.biases[k]);
        }
        state.end_step(self.param_count());
        self.version += 1;
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AdamHyper {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
}

impl AdamHyper {
    pub fn with_learning_rate(learning_rate: f64) -> Self {
        AdamHyper {
            learning_rate,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
        }
    }
}

/// Bias-corrected Adam moments over one flat parameter vector. Chunked
/// updates walk the vector in a fixed order; [`step`] handles the common
/// single-slice case.
///
/// [`step`]: AdamState::step
#[derive(Clone, Debug, PartialEq)]
pub struct AdamState {
    m: Vec<f64>,
    v: Vec<f64>,
    t: u64,
    hyper: AdamHyper,
    cursor: usize,
}

impl AdamState {
    pub fn new(param_count: usize, hyper: AdamHyper) -> Self {
        AdamState {
            m: vec![0.0; param_count],
            v: vec![0.0; param_count],
            t: 0,
            hyper,
            cursor: 0,
        }
    }

    pub fn t(&self) -> u64 {
        self.t
    }

    pub fn hyper(&self) -> AdamHyper {
        self.hyper
    }

    pub fn set_learning_rate(&mut self, learning_rate: f64) {
        self.hyper.learning_rate = learning_rate;
    }

    /// Single update over the whole parameter vector.
    pub fn step(&mut self, params: &mut [f64], grads: &[f64]) {
        self.begin_step();
        self.update_chunk(params, grads);
        self.end_step(params.len());
    }

    pub(crate) fn begin_step(&mut self) {
        self.t += 1;
        self.cursor = 0;
    }

    pub(crate) fn update_chunk(&mut self, params: &mut [f64], grads: &[f64]) {
        assert_eq!(
            params.len(),
            grads.len(),
            "parameter/gradient length mismatch"
        );
        let AdamHyper {
            learning_rate,
            beta1,
            beta2,
            epsilon,
        } = self.hyper;
        let start = self.cursor;
        let end = start + params.len();
        assert!(
            end <= self.m.len(),
            "chunks exceed the {} parameters this state was built for",
            self.m.len()
        );
        let correction1 = 1.0 - beta1.powi(self.t as i32);
        let correction2 = 1.0 - beta2.powi(self.t as i32);
        for (i, (p, &g)) in params.iter_mut().zip(grads).enumerate() {
            let m = &mut self.m[start + i];
            *m = beta1 * *m + (1.0 - beta1) * g;
            let v = &mut self.v[start + i];
            *v = beta2 * *v + (1.0 - beta2) * g * g;
            let m_hat = *m / correction1;
            let v_hat = *v / correction2;
            *p -= learning_rate * m_hat / (v_hat.sqrt() + epsilon);
        }
        self.cursor = end;
    }

    pub(crate) fn end_step(&mut self, total: usize) {
        assert_eq!(
            self.cursor, total,
            "step covered {} of {} parameters",
            self.cursor, total
        );
        assert_eq!(self.m.len(), total, "state sized for different parameters");
    }
}
