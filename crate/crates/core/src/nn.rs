//! Fully connected classifier with manual backpropagation.
//!
//! Hidden layers are `linear -> batchnorm -> ReLU -> dropout`; the output
//! layer is `linear -> softmax` over two classes (0 = benign, 1 = attack).

use rand::{Rng, SeedableRng};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::Matrix;
use crate::SoulRng;

pub const NUM_CLASSES: usize = 2;
const BN_EPSILON: f64 = 1e-5;
const BN_MOMENTUM: f64 = 0.1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Activation {
    Relu,
    Identity,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BatchNorm {
    pub gamma: Vec<f64>,
    pub beta: Vec<f64>,
    pub running_mean: Vec<f64>,
    pub running_var: Vec<f64>,
    pub epsilon: f64,
    pub momentum: f64,
}

impl BatchNorm {
    pub fn new(width: usize) -> Self {
        BatchNorm {
            gamma: vec![1.0; width],
            beta: vec![0.0; width],
            running_mean: vec![0.0; width],
            running_var: vec![1.0; width],
            epsilon: BN_EPSILON,
            momentum: BN_MOMENTUM,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DenseLayer {
    /// Shape `out x in`.
    pub weights: Matrix,
    pub bias: Vec<f64>,
    pub batchnorm: Option<BatchNorm>,
    pub activation: Activation,
}

impl DenseLayer {
    pub fn input_dim(&self) -> usize {
        self.weights.cols()
    }

    pub fn output_dim(&self) -> usize {
        self.weights.rows()
    }
}

/// Architecture description: input width, hidden widths, and the output head
/// of width two appended implicitly.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelSpec {
    pub input_dim: usize,
    pub hidden: Vec<usize>,
    #[serde(default = "default_true")]
    pub batchnorm: bool,
    #[serde(default = "default_dropout")]
    pub dropout: f64,
}

fn default_true() -> bool {
    true
}

fn default_dropout() -> f64 {
    0.2
}

impl ModelSpec {
    /// Parse `"FC:100,150,50,10,2"`; the trailing `2` is the output head.
    pub fn from_fc_string(input_dim: usize, arch: &str) -> Result<Self> {
        let body = arch
            .trim()
            .trim_start_matches("FC:")
            .trim_start_matches("fc:");
        let widths: Vec<usize> = body
            .split(',')
            .map(|w| w.trim().parse::<usize>())
            .collect::<std::result::Result<_, _>>()
            .map_err(|e| Error::Config(format!("bad architecture {arch:?}: {e}")))?;
        match widths.split_last() {
            Some((&NUM_CLASSES, hidden)) if hidden.iter().all(|&w| w > 0) => Ok(ModelSpec {
                input_dim,
                hidden: hidden.to_vec(),
                batchnorm: true,
                dropout: 0.2,
            }),
            _ => Err(Error::Config(format!(
                "architecture {arch:?} must end with an output width of 2"
            ))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MlpModel {
    pub layers: Vec<DenseLayer>,
    pub dropout_prob: f64,
}

/// Per-hidden-layer post-activation outputs for a single input.
#[derive(Debug, Clone, PartialEq)]
pub struct ActivationTrace(pub Vec<Vec<f64>>);

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    /// Running batchnorm statistics, no dropout.
    Eval,
    /// Batch statistics; dropout when a mask seed is supplied.
    Train { dropout_seed: Option<u64> },
}

/// Gradients with the same layout as [`MlpModel`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LayerGradients {
    pub weights: Matrix,
    pub bias: Vec<f64>,
    pub gamma: Option<Vec<f64>>,
    pub beta: Option<Vec<f64>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Gradients {
    pub layers: Vec<LayerGradients>,
}

impl Gradients {
    pub fn zeros_like(model: &MlpModel) -> Self {
        Gradients {
            layers: model
                .layers
                .iter()
                .map(|l| LayerGradients {
                    weights: Matrix::zeros(l.weights.rows(), l.weights.cols()),
                    bias: vec![0.0; l.bias.len()],
                    gamma: l.batchnorm.as_ref().map(|b| vec![0.0; b.gamma.len()]),
                    beta: l.batchnorm.as_ref().map(|b| vec![0.0; b.beta.len()]),
                })
                .collect(),
        }
    }

    /// Parameter slices in canonical order: per layer weights, bias, gamma, beta.
    pub fn slices(&self) -> Vec<&[f64]> {
        let mut out = Vec::new();
        for l in &self.layers {
            out.push(l.weights.as_slice());
            out.push(&l.bias[..]);
            if let (Some(g), Some(b)) = (&l.gamma, &l.beta) {
                out.push(&g[..]);
                out.push(&b[..]);
            }
        }
        out
    }

    pub fn slices_mut(&mut self) -> Vec<&mut [f64]> {
        let mut out = Vec::new();
        for l in &mut self.layers {
            out.push(l.weights.as_mut_slice());
            out.push(&mut l.bias[..]);
            if let (Some(g), Some(b)) = (&mut l.gamma, &mut l.beta) {
                out.push(&mut g[..]);
                out.push(&mut b[..]);
            }
        }
        out
    }

    pub fn flatten(&self) -> Vec<f64> {
        self.slices().concat()
    }

    /// Adds `weight_decay * theta` to every gradient entry.
    pub fn add_weight_decay(&mut self, model: &MlpModel, weight_decay: f64) -> Result<()> {
        if weight_decay == 0.0 {
            return Ok(());
        }
        let params = model.param_slices();
        let mut grads = self.slices_mut();
        check_layout(&params, &grads)?;
        for (g, p) in grads.iter_mut().zip(&params) {
            for (gi, pi) in g.iter_mut().zip(p.iter()) {
                *gi += weight_decay * pi;
            }
        }
        Ok(())
    }

    pub fn is_finite(&self) -> bool {
        self.slices()
            .iter()
            .all(|s| s.iter().all(|v| v.is_finite()))
    }
}

fn check_layout<A: AsRef<[f64]>, B: AsRef<[f64]>>(a: &[A], b: &[B]) -> Result<()> {
    if a.len() != b.len() {
        return Err(Error::dims(
            format!("{} parameter blocks", a.len()),
            b.len(),
        ));
    }
    for (i, (x, y)) in a.iter().zip(b).enumerate() {
        if x.as_ref().len() != y.as_ref().len() {
            return Err(Error::dims(
                format!("block {i} of length {}", x.as_ref().len()),
                y.as_ref().len(),
            ));
        }
    }
    Ok(())
}

/// A training batch. Rows `unlabeled_start..` are unlabeled samples whose
/// `targets` are teacher pseudo-labels; they also carry the distillation term.
#[derive(Debug, Clone)]
pub struct TrainBatch {
    pub inputs: Matrix,
    pub targets: Vec<u8>,
    pub unlabeled_start: usize,
}

impl TrainBatch {
    pub fn labeled(inputs: Matrix, targets: Vec<u8>) -> Self {
        let n = inputs.rows();
        TrainBatch {
            inputs,
            targets,
            unlabeled_start: n,
        }
    }

    pub fn unlabeled_count(&self) -> usize {
        self.inputs.rows().saturating_sub(self.unlabeled_start)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossWeights {
    pub distill_weight: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights {
            distill_weight: 1.0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub classification: f64,
    pub distillation: f64,
}

impl LossBreakdown {
    pub fn total(&self) -> f64 {
        self.classification + self.distillation
    }
}

/// `(mean, biased variance, batch size)` of one batchnorm layer.
pub type LayerStats = (Vec<f64>, Vec<f64>, usize);

/// Per batchnorm layer statistics from a train-mode pass.
#[derive(Debug, Clone, PartialEq)]
pub struct BatchStats(pub Vec<Option<LayerStats>>);

#[derive(Debug, Clone)]
pub struct LossOutput {
    pub loss: LossBreakdown,
    pub gradients: Gradients,
    pub batch_stats: BatchStats,
}

struct LayerCache {
    input: Matrix,
    /// Normalised pre-activation (`x_hat`) when batchnorm is present.
    xhat: Option<Matrix>,
    inv_std: Option<Vec<f64>>,
    /// Post-activation, pre-dropout output.
    activated: Matrix,
    dropout_mask: Option<Vec<f64>>,
}

struct Pass {
    caches: Vec<LayerCache>,
    logits: Matrix,
    stats: BatchStats,
}

impl MlpModel {
    pub fn new(spec: &ModelSpec, rng: &mut SoulRng) -> Result<Self> {
        if spec.input_dim == 0 || spec.hidden.contains(&0) {
            return Err(Error::Config("layer widths must be positive".into()));
        }
        if !(0.0..1.0).contains(&spec.dropout) {
            return Err(Error::Config(format!(
                "dropout {} not in [0, 1)",
                spec.dropout
            )));
        }
        let mut widths = vec![spec.input_dim];
        widths.extend(&spec.hidden);
        widths.push(NUM_CLASSES);
        let n_layers = widths.len() - 1;
        let layers = (0..n_layers)
            .map(|k| {
                let (fan_in, fan_out) = (widths[k], widths[k + 1]);
                let limit = (6.0 / (fan_in + fan_out) as f64).sqrt();
                let data = (0..fan_in * fan_out)
                    .map(|_| rng.random_range(-limit..=limit))
                    .collect();
                let hidden = k + 1 < n_layers;
                DenseLayer {
                    weights: Matrix::new(fan_out, fan_in, data).expect("finite init"),
                    bias: vec![0.0; fan_out],
                    batchnorm: (hidden && spec.batchnorm).then(|| BatchNorm::new(fan_out)),
                    activation: if hidden {
                        Activation::Relu
                    } else {
                        Activation::Identity
                    },
                }
            })
            .collect();
        Ok(MlpModel {
            layers,
            dropout_prob: spec.dropout,
        })
    }

    /// Build from explicit layers; validates the chain and the two-way head.
    pub fn from_layers(layers: Vec<DenseLayer>, dropout_prob: f64) -> Result<Self> {
        let last = layers
            .last()
            .ok_or_else(|| Error::Config("model needs at least one layer".into()))?;
        if last.output_dim() != NUM_CLASSES {
            return Err(Error::dims(NUM_CLASSES, last.output_dim()));
        }
        for w in layers.windows(2) {
            if w[0].output_dim() != w[1].input_dim() {
                return Err(Error::dims(w[0].output_dim(), w[1].input_dim()));
            }
        }
        for l in &layers {
            if l.bias.len() != l.output_dim() {
                return Err(Error::dims(l.output_dim(), l.bias.len()));
            }
        }
        Ok(MlpModel {
            layers,
            dropout_prob,
        })
    }

    pub fn input_dim(&self) -> usize {
        self.layers[0].input_dim()
    }

    pub fn hidden_count(&self) -> usize {
        self.layers.len() - 1
    }

    pub fn param_count(&self) -> usize {
        self.param_slices().iter().map(|s| s.len()).sum()
    }

    pub fn param_slices(&self) -> Vec<&[f64]> {
        let mut out = Vec::new();
        for l in &self.layers {
            out.push(l.weights.as_slice());
            out.push(&l.bias[..]);
            if let Some(bn) = &l.batchnorm {
                out.push(&bn.gamma[..]);
                out.push(&bn.beta[..]);
            }
        }
        out
    }

    pub fn param_slices_mut(&mut self) -> Vec<&mut [f64]> {
        let mut out = Vec::new();
        for l in &mut self.layers {
            out.push(l.weights.as_mut_slice());
            out.push(&mut l.bias[..]);
            if let Some(bn) = &mut l.batchnorm {
                out.push(&mut bn.gamma[..]);
                out.push(&mut bn.beta[..]);
            }
        }
        out
    }

    pub fn flat_params(&self) -> Vec<f64> {
        self.param_slices().concat()
    }

    pub fn set_flat_params(&mut self, values: &[f64]) -> Result<()> {
        let total = self.param_count();
        if values.len() != total {
            return Err(Error::dims(total, values.len()));
        }
        let mut offset = 0;
        for s in self.param_slices_mut() {
            s.copy_from_slice(&values[offset..offset + s.len()]);
            offset += s.len();
        }
        Ok(())
    }

    /// Class probabilities, one row per input row.
    pub fn forward(&self, batch: &Matrix, mode: Mode) -> Result<Matrix> {
        Ok(softmax_rows(&self.pass(batch, mode)?.logits))
    }

    /// Eval-mode logits.
    pub fn forward_logits(&self, batch: &Matrix) -> Result<Matrix> {
        Ok(self.pass(batch, Mode::Eval)?.logits)
    }

    pub fn predict_proba(&self, batch: &Matrix) -> Result<Matrix> {
        self.forward(batch, Mode::Eval)
    }

    pub fn forward_with_activations(&self, x: &[f64]) -> Result<([f64; 2], ActivationTrace)> {
        let input = Matrix::new(1, x.len(), x.to_vec())?;
        let (probs, trace) = self.forward_trace_batch(&input)?;
        let trace = trace.into_iter().map(|m| m.row(0).to_vec()).collect();
        Ok(([probs[(0, 0)], probs[(0, 1)]], ActivationTrace(trace)))
    }

    /// Eval-mode probabilities plus each hidden layer's output for every row.
    pub fn forward_trace_batch(&self, batch: &Matrix) -> Result<(Matrix, Vec<Matrix>)> {
        let pass = self.pass(batch, Mode::Eval)?;
        let probs = softmax_rows(&pass.logits);
        let trace = pass
            .caches
            .into_iter()
            .take(self.hidden_count())
            .map(|c| c.activated)
            .collect();
        Ok((probs, trace))
    }

    fn pass(&self, batch: &Matrix, mode: Mode) -> Result<Pass> {
        if batch.cols() != self.input_dim() {
            return Err(Error::dims(
                format!("{} input features", self.input_dim()),
                batch.cols(),
            ));
        }
        let n = batch.rows();
        let mut dropout_rng = match mode {
            Mode::Train {
                dropout_seed: Some(seed),
            } if self.dropout_prob > 0.0 => Some(SoulRng::seed_from_u64(seed)),
            _ => None,
        };
        let train = matches!(mode, Mode::Train { .. });

        let mut caches = Vec::with_capacity(self.layers.len());
        let mut stats = Vec::with_capacity(self.layers.len());
        let mut current = batch.clone();
        let last = self.layers.len() - 1;
        for (k, layer) in self.layers.iter().enumerate() {
            let mut z = current.matmul_nt(&layer.weights)?;
            for i in 0..n {
                for (v, b) in z.row_mut(i).iter_mut().zip(&layer.bias) {
                    *v += b;
                }
            }
            if k == last {
                caches.push(LayerCache {
                    input: current,
                    xhat: None,
                    inv_std: None,
                    activated: z.clone(),
                    dropout_mask: None,
                });
                stats.push(None);
                return Ok(Pass {
                    caches,
                    logits: z,
                    stats: BatchStats(stats),
                });
            }

            let width = layer.output_dim();
            let (mut act, xhat, inv_std, layer_stats) = match &layer.batchnorm {
                Some(bn) => {
                    let (mean, var) = if train && n > 0 {
                        column_mean_var(&z)
                    } else {
                        (bn.running_mean.clone(), bn.running_var.clone())
                    };
                    let inv_std: Vec<f64> =
                        var.iter().map(|v| 1.0 / (v + bn.epsilon).sqrt()).collect();
                    let mut xhat = z;
                    for i in 0..n {
                        for (j, v) in xhat.row_mut(i).iter_mut().enumerate() {
                            *v = (*v - mean[j]) * inv_std[j];
                        }
                    }
                    let mut y = xhat.clone();
                    for i in 0..n {
                        for (j, v) in y.row_mut(i).iter_mut().enumerate() {
                            *v = bn.gamma[j] * *v + bn.beta[j];
                        }
                    }
                    let out = train.then_some((mean, var, n));
                    (y, Some(xhat), Some(inv_std), out)
                }
                None => (z, None, None, None),
            };
            if layer.activation == Activation::Relu {
                for v in act.as_mut_slice() {
                    if *v < 0.0 {
                        *v = 0.0;
                    }
                }
            }
            let mask = dropout_rng.as_mut().map(|rng| {
                let keep = 1.0 - self.dropout_prob;
                (0..n * width)
                    .map(|_| {
                        if rng.random::<f64>() < keep {
                            1.0 / keep
                        } else {
                            0.0
                        }
                    })
                    .collect::<Vec<f64>>()
            });
            let next = match &mask {
                Some(m) => {
                    let mut d = act.clone();
                    for (v, s) in d.as_mut_slice().iter_mut().zip(m) {
                        *v *= s;
                    }
                    d
                }
                None => act.clone(),
            };
            caches.push(LayerCache {
                input: current,
                xhat,
                inv_std,
                activated: act,
                dropout_mask: mask,
            });
            stats.push(layer_stats);
            current = next;
        }
        unreachable!("output layer returns")
    }

    /// Loss (mean cross-entropy over all rows plus weighted KL
    /// distillation on the unlabeled rows) and its gradient. Never mutates
    /// the model; train-mode batchnorm statistics are returned for the caller
    /// to fold into the running averages.
    pub fn loss_and_gradients(
        &self,
        teacher: Option<&MlpModel>,
        batch: &TrainBatch,
        weights: LossWeights,
        mode: Mode,
    ) -> Result<LossOutput> {
        let n = batch.inputs.rows();
        if n == 0 {
            return Err(Error::EmptyBatch);
        }
        if batch.targets.len() != n {
            return Err(Error::dims(n, batch.targets.len()));
        }
        if let Some(bad) = batch.targets.iter().find(|&&y| y as usize >= NUM_CLASSES) {
            return Err(Error::Task(format!("label {bad} outside {{0,1}}")));
        }
        let pass = self.pass(&batch.inputs, mode)?;
        let log_probs = log_softmax_rows(&pass.logits);

        let mut d_logits = Matrix::zeros(n, NUM_CLASSES);
        let mut ce = 0.0;
        for i in 0..n {
            let y = batch.targets[i] as usize;
            ce -= log_probs[(i, y)];
            for c in 0..NUM_CLASSES {
                let p = log_probs[(i, c)].exp();
                let target = if c == y { 1.0 } else { 0.0 };
                d_logits[(i, c)] = (p - target) / n as f64;
            }
        }
        ce /= n as f64;

        let mut distill = 0.0;
        let n_u = batch.unlabeled_count();
        if let (Some(teacher), true) = (teacher, n_u > 0 && weights.distill_weight != 0.0) {
            let start = batch.unlabeled_start;
            let rows: Vec<usize> = (start..n).collect();
            let teacher_probs = teacher.forward(&batch.inputs.select_rows(&rows), Mode::Eval)?;
            let scale = weights.distill_weight / n_u as f64;
            for (r, i) in rows.iter().enumerate() {
                for c in 0..NUM_CLASSES {
                    let t = teacher_probs[(r, c)];
                    let log_p = log_probs[(*i, c)];
                    if t > 0.0 {
                        distill += t * (t.ln() - log_p);
                    }
                    d_logits[(*i, c)] += scale * (log_p.exp() - t);
                }
            }
            distill *= scale;
        }

        let gradients = self.backward(&pass, d_logits, matches!(mode, Mode::Train { .. }))?;
        Ok(LossOutput {
            loss: LossBreakdown {
                classification: ce,
                distillation: distill,
            },
            gradients,
            batch_stats: pass.stats,
        })
    }

    fn backward(&self, pass: &Pass, d_logits: Matrix, train: bool) -> Result<Gradients> {
        let mut grads = Gradients::zeros_like(self);
        let mut upstream = d_logits;
        for k in (0..self.layers.len()).rev() {
            let layer = &self.layers[k];
            let cache = &pass.caches[k];
            let n = upstream.rows();
            let is_output = k + 1 == self.layers.len();

            let dz = if is_output {
                upstream
            } else {
                // dropout, then ReLU on the post-activation output
                let mut dy = upstream;
                if let Some(mask) = &cache.dropout_mask {
                    for (v, m) in dy.as_mut_slice().iter_mut().zip(mask) {
                        *v *= m;
                    }
                }
                if layer.activation == Activation::Relu {
                    for (v, a) in dy.as_mut_slice().iter_mut().zip(cache.activated.as_slice()) {
                        if *a <= 0.0 {
                            *v = 0.0;
                        }
                    }
                }
                match (&layer.batchnorm, &cache.xhat, &cache.inv_std) {
                    (Some(bn), Some(xhat), Some(inv_std)) => {
                        let width = layer.output_dim();
                        let mut dgamma = vec![0.0; width];
                        let mut dbeta = vec![0.0; width];
                        for i in 0..n {
                            for j in 0..width {
                                dgamma[j] += dy[(i, j)] * xhat[(i, j)];
                                dbeta[j] += dy[(i, j)];
                            }
                        }
                        let mut dz = Matrix::zeros(n, width);
                        if train {
                            let nf = n as f64;
                            for j in 0..width {
                                // sum(dxhat) = gamma*dbeta, sum(dxhat*xhat) = gamma*dgamma
                                let s1 = bn.gamma[j] * dbeta[j];
                                let s2 = bn.gamma[j] * dgamma[j];
                                for i in 0..n {
                                    let dxhat = dy[(i, j)] * bn.gamma[j];
                                    dz[(i, j)] =
                                        inv_std[j] / nf * (nf * dxhat - s1 - xhat[(i, j)] * s2);
                                }
                            }
                        } else {
                            for i in 0..n {
                                for j in 0..width {
                                    dz[(i, j)] = dy[(i, j)] * bn.gamma[j] * inv_std[j];
                                }
                            }
                        }
                        let lg = &mut grads.layers[k];
                        lg.gamma = Some(dgamma);
                        lg.beta = Some(dbeta);
                        dz
                    }
                    _ => dy,
                }
            };

            let lg = &mut grads.layers[k];
            lg.weights = dz.matmul_tn(&cache.input)?;
            for i in 0..n {
                for (b, v) in lg.bias.iter_mut().zip(dz.row(i)) {
                    *b += v;
                }
            }
            if k > 0 {
                upstream = dz.matmul(&layer.weights)?;
            } else {
                break;
            }
        }
        Ok(grads)
    }

    /// Fold train-mode batch statistics into the running averages
    /// (`running = (1 - momentum) * running + momentum * batch`, unbiased var).
    pub fn update_running_stats(&mut self, stats: &BatchStats) {
        for (layer, s) in self.layers.iter_mut().zip(&stats.0) {
            if let (Some(bn), Some((mean, var, n))) = (&mut layer.batchnorm, s) {
                let unbias = if *n > 1 {
                    *n as f64 / (*n as f64 - 1.0)
                } else {
                    1.0
                };
                for j in 0..mean.len() {
                    bn.running_mean[j] =
                        (1.0 - bn.momentum) * bn.running_mean[j] + bn.momentum * mean[j];
                    bn.running_var[j] =
                        (1.0 - bn.momentum) * bn.running_var[j] + bn.momentum * var[j] * unbias;
                }
            }
        }
    }
}

fn column_mean_var(z: &Matrix) -> (Vec<f64>, Vec<f64>) {
    let (n, w) = z.shape();
    let mut mean = vec![0.0; w];
    for i in 0..n {
        for (m, v) in mean.iter_mut().zip(z.row(i)) {
            *m += v;
        }
    }
    mean.iter_mut().for_each(|m| *m /= n as f64);
    let mut var = vec![0.0; w];
    for i in 0..n {
        for (j, v) in z.row(i).iter().enumerate() {
            let d = v - mean[j];
            var[j] += d * d;
        }
    }
    var.iter_mut().for_each(|v| *v /= n as f64);
    (mean, var)
}

pub fn log_softmax_rows(logits: &Matrix) -> Matrix {
    let mut out = logits.clone();
    for i in 0..out.rows() {
        let row = out.row_mut(i);
        let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let lse = max + row.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
        row.iter_mut().for_each(|v| *v -= lse);
    }
    out
}

pub fn softmax_rows(logits: &Matrix) -> Matrix {
    let mut out = logits.clone();
    for i in 0..out.rows() {
        let row = out.row_mut(i);
        let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        row.iter_mut().for_each(|v| *v = (*v - max).exp());
        let sum: f64 = row.iter().sum();
        row.iter_mut().for_each(|v| *v /= sum);
    }
    out
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum EpochDecision {
    Continue,
    Stop,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EarlyStopping {
    pub patience: usize,
    pub delta: f64,
    pub best_val_loss: Option<f64>,
    pub epochs_without_improvement: usize,
}

impl Default for EarlyStopping {
    fn default() -> Self {
        EarlyStopping {
            patience: 3,
            delta: 0.01,
            best_val_loss: None,
            epochs_without_improvement: 0,
        }
    }
}

/// SGD with Nesterov momentum, weight decay, per-epoch multiplicative
/// learning-rate decay and early stopping.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OptimizerState {
    pub learning_rate: f64,
    pub base_learning_rate: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    pub epoch_decay: f64,
    pub early_stopping: EarlyStopping,
    pub velocity: Vec<Vec<f64>>,
}

impl OptimizerState {
    pub fn new(model: &MlpModel, learning_rate: f64, weight_decay: f64) -> Result<Self> {
        if !(learning_rate > 0.0) {
            return Err(Error::Config(format!(
                "learning rate {learning_rate} must be > 0"
            )));
        }
        Ok(OptimizerState {
            learning_rate,
            base_learning_rate: learning_rate,
            momentum: 0.9,
            weight_decay,
            epoch_decay: 0.96,
            early_stopping: EarlyStopping::default(),
            velocity: model
                .param_slices()
                .iter()
                .map(|s| vec![0.0; s.len()])
                .collect(),
        })
    }

    /// Fresh velocities, base learning rate and early-stopping state.
    pub fn reset(&mut self) {
        self.learning_rate = self.base_learning_rate;
        self.early_stopping = EarlyStopping {
            best_val_loss: None,
            epochs_without_improvement: 0,
            ..self.early_stopping.clone()
        };
        self.velocity.iter_mut().for_each(|v| v.fill(0.0));
    }

    /// Nesterov step with weight decay folded into the gradient.
    pub fn step(&mut self, model: &mut MlpModel, g: &Gradients) -> Result<()> {
        self.apply(model, g, self.weight_decay)
    }

    /// Nesterov step for a gradient that already contains the weight-decay
    /// term (used when the decayed gradient is projected first).
    pub fn step_decayed(&mut self, model: &mut MlpModel, g: &Gradients) -> Result<()> {
        self.apply(model, g, 0.0)
    }

    fn apply(&mut self, model: &mut MlpModel, g: &Gradients, weight_decay: f64) -> Result<()> {
        let grads = g.slices();
        let mut params = model.param_slices_mut();
        check_layout(&params, &grads)?;
        check_layout(&self.velocity, &grads)?;
        let (lr, mu) = (self.learning_rate, self.momentum);
        for ((p, gr), v) in params.iter_mut().zip(&grads).zip(&mut self.velocity) {
            for ((pi, gi), vi) in p.iter_mut().zip(gr.iter()).zip(v.iter_mut()) {
                let d = gi + weight_decay * *pi;
                *vi = mu * *vi + d;
                *pi -= lr * (d + mu * *vi);
            }
        }
        Ok(())
    }

    /// Early-stopping bookkeeping; decays the learning rate when training continues.
    pub fn epoch_end(&mut self, val_loss: f64) -> EpochDecision {
        let es = &mut self.early_stopping;
        let improved = match es.best_val_loss {
            None => true,
            Some(best) => best - val_loss >= es.delta,
        };
        if improved {
            es.best_val_loss = Some(val_loss);
            es.epochs_without_improvement = 0;
        } else {
            es.epochs_without_improvement += 1;
            if let Some(best) = es.best_val_loss {
                es.best_val_loss = Some(best.min(val_loss));
            }
        }
        if es.epochs_without_improvement >= es.patience {
            EpochDecision::Stop
        } else {
            self.learning_rate *= self.epoch_decay;
            EpochDecision::Continue
        }
    }
}
