//! Monte-Carlo-dropout population network.
//!
//! A ReLU multilayer perceptron with dropout after the last hidden layer and
//! two linear heads: the predictive mean and the log aleatoric variance.
//! Predictions average several stochastic passes; the reported variance is the
//! mean aleatoric variance plus the spread of the per-pass means.
//!
//! Outputs pass through a fixed affine [`OutputScaling`] so the network works
//! on roughly unit-scale targets while losses stay on the objective scale.

use ndarray::{Array1, Array2, Axis, LinalgScalar, ScalarOperand};
use num_traits::Float;
use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::{self, StreamRng};
use crate::{Observation, Prediction};

pub const LOG_VAR_MIN: f64 = -10.0;
pub const LOG_VAR_MAX: f64 = 10.0;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BnnArchitecture {
    pub input_dim: usize,
    pub hidden_layers: usize,
    pub hidden_width: usize,
    pub dropout_rate: f64,
}

impl Default for BnnArchitecture {
    fn default() -> Self {
        Self {
            input_dim: 2,
            hidden_layers: 3,
            hidden_width: 100,
            dropout_rate: 0.1,
        }
    }
}

impl BnnArchitecture {
    fn validate(&self) -> Result<()> {
        if self.input_dim == 0 || self.hidden_layers == 0 || self.hidden_width == 0 {
            return Err(Error::InvalidParameter("network dimensions must be positive".into()));
        }
        if !(0.0..1.0).contains(&self.dropout_rate) {
            return Err(Error::InvalidParameter("dropout rate must lie in [0, 1)".into()));
        }
        Ok(())
    }
}

/// Optimizer settings shared by replay training and online updates.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainSettings {
    pub learning_rate: f64,
    pub batch_size: usize,
    /// Re-draw all weights before each replay round.
    pub reinitialize: bool,
}

impl Default for TrainSettings {
    fn default() -> Self {
        Self {
            learning_rate: 1e-3,
            batch_size: 64,
            reinitialize: true,
        }
    }
}

/// Affine map from the mean head to the objective scale. The log-variance
/// head is shifted by `2·ln(scale)` accordingly.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct OutputScaling {
    pub shift: f64,
    pub scale: f64,
    pub calibrated: bool,
}

impl OutputScaling {
    fn identity() -> Self {
        Self {
            shift: 0.0,
            scale: 1.0,
            calibrated: false,
        }
    }

    fn fitted(values: &[f64]) -> Self {
        let n = values.len() as f64;
        let mean = values.iter().sum::<f64>() / n;
        let std = (values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n).sqrt();
        Self {
            shift: mean,
            scale: if std > 1e-8 { std } else { 1.0 },
            calibrated: true,
        }
    }
}

/// A replay target: one prior-user GP's belief at one location.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetaSample {
    pub x: Vec<f64>,
    pub target_mean: f64,
    pub target_variance: f64,
    pub source_user: usize,
}

/// Per-epoch losses from a training run.
#[derive(Clone, Debug, PartialEq)]
pub struct TrainReport {
    pub epoch_losses: Vec<f64>,
    pub final_loss: f64,
}

/// Floating-point type the network computes in.
pub trait Real: Float + LinalgScalar + ScalarOperand + std::fmt::Debug + Send + Sync {
    fn of(v: f64) -> Self;
    fn get(self) -> f64;
}

impl Real for f32 {
    fn of(v: f64) -> Self {
        v as f32
    }
    fn get(self) -> f64 {
        self as f64
    }
}

impl Real for f64 {
    fn of(v: f64) -> Self {
        v
    }
    fn get(self) -> f64 {
        self
    }
}

#[derive(Clone, Debug)]
struct Dense<F> {
    w: Array2<F>,
    b: Array1<F>,
}

type Gradients<F> = Vec<(Array2<F>, Array1<F>)>;

struct Trace<F> {
    acts: Vec<Array2<F>>,
    pre: Vec<Array2<F>>,
    out: Array2<F>,
}

/// Layer weights without any of the model's bookkeeping.
#[derive(Clone, Debug)]
struct Network<F> {
    layers: Vec<Dense<F>>,
}

impl<F: Real> Network<F> {
    fn init(arch: &BnnArchitecture, rng: &mut StreamRng) -> Self {
        let layers = layer_dims(arch)
            .windows(2)
            .map(|io| {
                let bound = 1.0 / (io[0] as f64).sqrt();
                Dense {
                    w: Array2::from_shape_simple_fn((io[0], io[1]), || F::of(rng.gen_range(-bound..bound))),
                    b: Array1::from_shape_simple_fn(io[1], || F::of(rng.gen_range(-bound..bound))),
                }
            })
            .collect();
        Self { layers }
    }

    fn parameter_count(&self) -> usize {
        self.layers.iter().map(|l| l.w.len() + l.b.len()).sum()
    }

    fn parameters(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.parameter_count());
        for l in &self.layers {
            out.extend(l.w.iter().chain(l.b.iter()).map(|v| v.get()));
        }
        out
    }

    fn set_parameters(&mut self, params: &[f64]) {
        let mut it = params.iter();
        for l in &mut self.layers {
            l.w.iter_mut().chain(l.b.iter_mut()).for_each(|p| *p = F::of(*it.next().expect("length checked")));
        }
    }

    /// Last hidden layer activations, before dropout.
    fn trunk(&self, x: &Array2<F>) -> Array2<F> {
        let hidden = &self.layers[..self.layers.len() - 1];
        let mut a = x.clone();
        for l in hidden {
            a = a.dot(&l.w) + &l.b;
            a.mapv_inplace(|v| v.max(F::zero()));
        }
        a
    }

    fn head(&self, h: &Array2<F>) -> Array2<F> {
        let last = self.layers.last().expect("output layer");
        h.dot(&last.w) + &last.b
    }

    fn forward_train(&self, x: &Array2<F>, mask: &Array2<F>) -> Trace<F> {
        let (out_layer, hidden) = self.layers.split_last().expect("at least one layer");
        let mut acts = Vec::with_capacity(self.layers.len());
        let mut pre = Vec::with_capacity(hidden.len());
        let mut a = x.clone();
        for l in hidden {
            let z = a.dot(&l.w) + &l.b;
            acts.push(a);
            a = z.mapv(|v| v.max(F::zero()));
            pre.push(z);
        }
        let dropped = a * mask;
        let out = dropped.dot(&out_layer.w) + &out_layer.b;
        acts.push(dropped);
        Trace { acts, pre, out }
    }

    fn backward(&self, trace: &Trace<F>, mask: &Array2<F>, dout: &Array2<F>) -> Gradients<F> {
        let n = self.layers.len();
        let mut grads = Vec::with_capacity(n);
        grads.push((trace.acts[n - 1].t().dot(dout), dout.sum_axis(Axis(0))));
        let mut da = dout.dot(&self.layers[n - 1].w.t()) * mask;
        for l in (0..n - 1).rev() {
            let mut dz = da;
            dz.zip_mut_with(&trace.pre[l], |g, z| {
                if *z <= F::zero() {
                    *g = F::zero()
                }
            });
            grads.push((trace.acts[l].t().dot(&dz), dz.sum_axis(Axis(0))));
            da = if l > 0 { dz.dot(&self.layers[l].w.t()) } else { dz };
        }
        grads.reverse();
        grads
    }
}

fn layer_dims(arch: &BnnArchitecture) -> Vec<usize> {
    let mut dims = vec![arch.input_dim];
    dims.extend(std::iter::repeat_n(arch.hidden_width, arch.hidden_layers));
    dims.push(2);
    dims
}

#[cfg(test)]
fn flatten<F: Real>(grads: &Gradients<F>) -> Vec<f64> {
    let mut out = Vec::new();
    for (w, b) in grads {
        out.extend(w.iter().chain(b.iter()).map(|v| v.get()));
    }
    out
}

#[derive(Clone, Debug, PartialEq)]
struct Adam<F> {
    step: u64,
    m: Vec<F>,
    v: Vec<F>,
}

const BETA1: f64 = 0.9;
const BETA2: f64 = 0.999;
const ADAM_EPS: f64 = 1e-8;

impl<F: Real> Adam<F> {
    fn new(n: usize) -> Self {
        Self {
            step: 0,
            m: vec![F::zero(); n],
            v: vec![F::zero(); n],
        }
    }

    fn apply(&mut self, net: &mut Network<F>, grads: &Gradients<F>, lr: f64) {
        self.step += 1;
        let bc1 = 1.0 - BETA1.powi(self.step as i32);
        let bc2 = 1.0 - BETA2.powi(self.step as i32);
        let (b1, b2) = (F::of(BETA1), F::of(BETA2));
        let (c1, c2) = (F::of(1.0 - BETA1), F::of(1.0 - BETA2));
        let rate = F::of(lr / bc1);
        let unbias = F::of(1.0 / bc2.sqrt());
        let eps = F::of(ADAM_EPS);
        // Moments of dead units decay geometrically into subnormals, which are
        // very slow to compute with.
        let v_floor = F::min_positive_value();
        let m_floor = v_floor.sqrt();
        let mut offset = 0;
        for (layer, (gw, gb)) in net.layers.iter_mut().zip(grads) {
            for (p, g) in [
                (layer.w.as_slice_mut().expect("standard layout"), gw.as_slice().expect("standard layout")),
                (layer.b.as_slice_mut().expect("standard layout"), gb.as_slice().expect("standard layout")),
            ] {
                let m = &mut self.m[offset..offset + p.len()];
                let v = &mut self.v[offset..offset + p.len()];
                for (((p, g), m), v) in p.iter_mut().zip(g).zip(m.iter_mut()).zip(v.iter_mut()) {
                    let mi = b1 * *m + c1 * *g;
                    let vi = b2 * *v + c2 * *g * *g;
                    *m = if mi.abs() < m_floor { F::zero() } else { mi };
                    *v = if vi < v_floor { F::zero() } else { vi };
                    *p = *p - rate * *m / (v.sqrt() * unbias + eps);
                }
                offset += p.len();
            }
        }
    }
}

/// Multiplicative dropout mask, already scaled by `1 / (1 - rate)`.
fn dropout_mask<F: Real>(rows: usize, width: usize, rate: f64, rng: &mut StreamRng) -> Array2<F> {
    if rate == 0.0 {
        return Array2::ones((rows, width));
    }
    let keep = 1.0 - rate;
    let threshold = keep_threshold(keep);
    let inv = F::of(1.0 / keep);
    Array2::from_shape_simple_fn((rows, width), || if rng.gen::<u32>() < threshold { inv } else { F::zero() })
}

fn keep_threshold(keep: f64) -> u32 {
    (keep * 4_294_967_296.0).min(u32::MAX as f64) as u32
}

/// Training objective for one batch.
#[derive(Clone, Copy, Debug)]
pub enum Objective<'a> {
    /// Squared error on the mean plus squared error on the variance.
    Replay { means: &'a [f64], variances: &'a [f64] },
    /// Gaussian negative log-likelihood of observed targets.
    Nll { targets: &'a [f64] },
}

/// Gaussian negative log-likelihood without the `½·ln 2π` constant.
pub fn gaussian_nll(pred_mean: f64, pred_log_var: f64, y: f64) -> f64 {
    let r = y - pred_mean;
    0.5 * pred_log_var + r * r / (2.0 * pred_log_var.exp())
}

/// Loss on the objective scale and its gradient with respect to the raw
/// network outputs.
fn output_loss<F: Real>(out: &Array2<F>, scaling: &OutputScaling, objective: &Objective) -> (f64, Array2<F>) {
    let rows = out.nrows();
    let nf = rows as f64;
    let OutputScaling { shift, scale, .. } = *scaling;
    let mut dout = Array2::zeros((rows, 2));
    let mut loss = 0.0;
    for i in 0..rows {
        let mu = shift + scale * out[[i, 0]].get();
        let raw_lv = out[[i, 1]].get();
        let lv = raw_lv.clamp(LOG_VAR_MIN, LOG_VAR_MAX);
        let inside = raw_lv > LOG_VAR_MIN && raw_lv < LOG_VAR_MAX;
        let var = scale * scale * lv.exp();
        let (d0, d1) = match objective {
            Objective::Replay { means, variances } => {
                let em = mu - means[i];
                let ev = var - variances[i];
                loss += em * em + ev * ev;
                (2.0 * em * scale / nf, 2.0 * ev * var / nf)
            }
            Objective::Nll { targets } => {
                let r = targets[i] - mu;
                loss += gaussian_nll(mu, lv + 2.0 * scale.ln(), targets[i]);
                (-r * scale / var / nf, (0.5 - r * r / (2.0 * var)) / nf)
            }
        };
        dout[[i, 0]] = F::of(d0);
        if inside {
            dout[[i, 1]] = F::of(d1);
        }
    }
    (loss / nf, dout)
}

/// Batch loss and its gradient with respect to `params` for a double
/// precision network with the given architecture. The dropout mask is drawn
/// from `mask_seed`, so repeated calls with the same seed see the same mask.
pub fn batch_loss_and_gradient(
    arch: &BnnArchitecture,
    params: &[f64],
    scaling: &OutputScaling,
    xs: &[Vec<f64>],
    mask_seed: u64,
    objective: Objective,
) -> Result<(f64, Vec<f64>)> {
    arch.validate()?;
    let expected: usize = layer_dims(arch).windows(2).map(|io| (io[0] + 1) * io[1]).sum();
    if params.len() != expected {
        return Err(Error::DimensionMismatch {
            expected,
            found: params.len(),
        });
    }
    let n = match objective {
        Objective::Replay { means, variances } if means.len() == variances.len() => means.len(),
        Objective::Nll { targets } => targets.len(),
        Objective::Replay { .. } => return Err(Error::InvalidParameter("replay means and variances differ in length".into())),
    };
    if n != xs.len() || n == 0 {
        return Err(Error::InvalidParameter("targets must match the inputs one to one".into()));
    }
    let x = to_matrix::<f64>(xs, arch.input_dim)?;
    let mut net: Network<f64> = Network::init(arch, &mut rng::stream(0));
    net.set_parameters(params);
    let mask = dropout_mask::<f64>(xs.len(), arch.hidden_width, arch.dropout_rate, &mut rng::stream(mask_seed));
    let trace = net.forward_train(&x, &mask);
    let (loss, dout) = output_loss(&trace.out, scaling, &objective);
    let mut grad = Vec::with_capacity(expected);
    for (w, b) in net.backward(&trace, &mask, &dout) {
        grad.extend(w.iter().chain(b.iter()));
    }
    Ok((loss, grad))
}

fn to_matrix<F: Real>(xs: &[Vec<f64>], d: usize) -> Result<Array2<F>> {
    let mut m = Array2::zeros((xs.len(), d));
    for (i, x) in xs.iter().enumerate() {
        if x.len() != d {
            return Err(Error::DimensionMismatch {
                expected: d,
                found: x.len(),
            });
        }
        for (j, v) in x.iter().enumerate() {
            m[[i, j]] = F::of(*v);
        }
    }
    Ok(m)
}

/// The population model: network weights (single precision), output scaling,
/// and its own random stream for initialization, shuffling and training masks.
#[derive(Clone, Debug)]
pub struct PopulationModel {
    arch: BnnArchitecture,
    net: Network<f32>,
    scaling: OutputScaling,
    rng: StreamRng,
    online_opt: Option<Adam<f32>>,
}

impl PopulationModel {
    /// Fresh network with fan-in scaled uniform weights, deterministic in `seed`.
    pub fn new(arch: BnnArchitecture, seed: u64) -> Result<Self> {
        arch.validate()?;
        let mut rng = rng::stream(seed);
        Ok(Self {
            net: Network::init(&arch, &mut rng),
            scaling: OutputScaling::identity(),
            rng,
            online_opt: None,
            arch,
        })
    }

    pub fn architecture(&self) -> &BnnArchitecture {
        &self.arch
    }

    pub fn scaling(&self) -> &OutputScaling {
        &self.scaling
    }

    fn reinitialize(&mut self) {
        self.net = Network::init(&self.arch, &mut self.rng);
        self.scaling = OutputScaling::identity();
        self.online_opt = None;
    }

    pub fn parameter_count(&self) -> usize {
        self.net.parameter_count()
    }

    pub fn parameters(&self) -> Vec<f64> {
        self.net.parameters()
    }

    pub fn set_parameters(&mut self, params: &[f64]) -> Result<()> {
        if params.len() != self.parameter_count() {
            return Err(Error::DimensionMismatch {
                expected: self.parameter_count(),
                found: params.len(),
            });
        }
        self.net.set_parameters(params);
        Ok(())
    }

    fn check_inputs(&self, xs: &[Vec<f64>]) -> Result<Array2<f32>> {
        to_matrix(xs, self.arch.input_dim)
    }

    fn to_objective_scale(&self, o0: f64, o1: f64) -> (f64, f64) {
        let OutputScaling { shift, scale, .. } = self.scaling;
        (shift + scale * o0, scale * scale * o1.clamp(LOG_VAR_MIN, LOG_VAR_MAX).exp())
    }

    /// Dropout-free forward pass: `(mean, log_variance)` on the objective scale.
    pub fn forward_deterministic(&self, x: &[f64]) -> Result<(f64, f64)> {
        let input = self.check_inputs(std::slice::from_ref(&x.to_vec()))?;
        let out = self.net.head(&self.net.trunk(&input));
        let OutputScaling { shift, scale, .. } = self.scaling;
        let lv = out[[0, 1]].get().clamp(LOG_VAR_MIN, LOG_VAR_MAX);
        Ok((shift + scale * out[[0, 0]].get(), lv + 2.0 * scale.ln()))
    }

    pub fn predict(&self, x: &[f64], n_mc: usize, rng: &mut StreamRng) -> Result<Prediction> {
        Ok(self.predict_many(std::slice::from_ref(&x.to_vec()), n_mc, rng)?[0])
    }

    /// MC-dropout predictions: mean of per-pass means; variance is the mean
    /// aleatoric variance plus the population variance of per-pass means.
    pub fn predict_many(&self, xs: &[Vec<f64>], n_mc: usize, rng: &mut StreamRng) -> Result<Vec<Prediction>> {
        if n_mc == 0 {
            return Err(Error::InvalidParameter("n_mc must be at least 1".into()));
        }
        let input = self.check_inputs(xs)?;
        let h = self.net.trunk(&input);

        if self.arch.dropout_rate == 0.0 {
            return Ok(self
                .net
                .head(&h)
                .rows()
                .into_iter()
                .map(|r| {
                    let (m, v) = self.to_objective_scale(r[0].get(), r[1].get());
                    Prediction::new(m, v)
                })
                .collect());
        }

        // Per-pass heads are cheap, so each pass draws its own mask over the
        // shared trunk activations.
        let last = self.net.layers.last().expect("output layer");
        let keep = 1.0 - self.arch.dropout_rate;
        let threshold = keep_threshold(keep);
        let inv = 1.0 / keep;
        let w0: Vec<f64> = last.w.column(0).iter().map(|v| v.get()).collect();
        let w1: Vec<f64> = last.w.column(1).iter().map(|v| v.get()).collect();
        let (b0, b1) = (last.b[0].get(), last.b[1].get());
        let mut preds = Vec::with_capacity(xs.len());
        let mut means = vec![0.0; n_mc];
        let mut row = vec![0.0; h.ncols()];
        for hr in h.rows() {
            row.iter_mut().zip(hr).for_each(|(r, v)| *r = v.get() * inv);
            let mut alea = 0.0;
            for m in means.iter_mut() {
                let (mut o0, mut o1) = (b0, b1);
                for j in 0..row.len() {
                    if rng.gen::<u32>() < threshold {
                        o0 += row[j] * w0[j];
                        o1 += row[j] * w1[j];
                    }
                }
                let (mu, var) = self.to_objective_scale(o0, o1);
                *m = mu;
                alea += var;
            }
            let nf = n_mc as f64;
            let mean = means.iter().sum::<f64>() / nf;
            let epi = means.iter().map(|m| (m - mean) * (m - mean)).sum::<f64>() / nf;
            preds.push(Prediction::new(mean, alea / nf + epi));
        }
        Ok(preds)
    }

    fn train_epochs(
        &mut self,
        xs: &[Vec<f64>],
        first: &[f64],
        second: Option<&[f64]>,
        epochs: usize,
        cfg: &TrainSettings,
        adam: &mut Adam<f32>,
    ) -> Vec<f64> {
        let n = xs.len();
        let batch = cfg.batch_size.max(1).min(n);
        let width = self.arch.hidden_width;
        let rate = self.arch.dropout_rate;
        let mut order: Vec<usize> = (0..n).collect();
        let mut losses = Vec::with_capacity(epochs);
        let d = self.arch.input_dim;
        for _ in 0..epochs {
            if n > batch {
                order.shuffle(&mut self.rng);
            }
            let mut total = 0.0;
            for chunk in order.chunks(batch) {
                let mut x = Array2::zeros((chunk.len(), d));
                for (r, &i) in chunk.iter().enumerate() {
                    for j in 0..d {
                        x[[r, j]] = xs[i][j] as f32;
                    }
                }
                let a: Vec<f64> = chunk.iter().map(|&i| first[i]).collect();
                let b: Option<Vec<f64>> = second.map(|s| chunk.iter().map(|&i| s[i]).collect());
                let objective = match &b {
                    Some(v) => Objective::Replay { means: &a, variances: v },
                    None => Objective::Nll { targets: &a },
                };
                let mask = dropout_mask(chunk.len(), width, rate, &mut self.rng);
                let trace = self.net.forward_train(&x, &mask);
                let (loss, dout) = output_loss(&trace.out, &self.scaling, &objective);
                let grads = self.net.backward(&trace, &mask, &dout);
                adam.apply(&mut self.net, &grads, cfg.learning_rate);
                total += loss * chunk.len() as f64;
            }
            losses.push(total / n as f64);
        }
        losses
    }

    /// Replay training on GP-generated targets.
    ///
    /// Samples sharing a location are merged: the regression target there is
    /// the average mean and average variance over the contributing users.
    pub fn meta_train(&mut self, samples: &[MetaSample], epochs: usize, cfg: &TrainSettings) -> Result<TrainReport> {
        if samples.is_empty() {
            return Err(Error::Empty("meta-training samples"));
        }
        if epochs == 0 {
            return Err(Error::InvalidParameter("meta-training needs at least one epoch".into()));
        }
        let (xs, means, variances) = aggregate_by_location(samples, self.arch.input_dim)?;
        if cfg.reinitialize {
            self.reinitialize();
        }
        self.scaling = OutputScaling::fitted(&means);
        let mut adam = Adam::new(self.parameter_count());
        let losses = self.train_epochs(&xs, &means, Some(&variances), epochs, cfg, &mut adam);
        self.online_opt = None;
        Ok(TrainReport {
            final_loss: *losses.last().expect("epochs >= 1"),
            epoch_losses: losses,
        })
    }

    /// Trains from scratch on raw observations with the Gaussian NLL.
    pub fn fit_observations(&mut self, observations: &[Observation], epochs: usize, cfg: &TrainSettings) -> Result<TrainReport> {
        if observations.is_empty() {
            return Err(Error::Empty("training observations"));
        }
        let (xs, ys) = self.split_observations(observations)?;
        if cfg.reinitialize {
            self.reinitialize();
        }
        self.scaling = OutputScaling::fitted(&ys);
        let mut adam = Adam::new(self.parameter_count());
        let losses = self.train_epochs(&xs, &ys, None, epochs.max(1), cfg, &mut adam);
        self.online_opt = None;
        Ok(TrainReport {
            final_loss: *losses.last().expect("epochs >= 1"),
            epoch_losses: losses,
        })
    }

    /// Online adaptation: `epochs` passes of the Gaussian NLL over all of the
    /// current user's observations. Optimizer moments persist across calls
    /// until the next replay round.
    pub fn online_update(&mut self, observations: &[Observation], epochs: usize, cfg: &TrainSettings) -> Result<()> {
        if observations.is_empty() {
            return Err(Error::Empty("online update observations"));
        }
        if epochs == 0 {
            return Ok(());
        }
        let (xs, ys) = self.split_observations(observations)?;
        // An untrained network adopts the user's scale once it is observable.
        if !self.scaling.calibrated && ys.len() >= 2 && ys.iter().any(|y| *y != ys[0]) {
            self.scaling = OutputScaling::fitted(&ys);
        }
        let mut adam = self.online_opt.take().unwrap_or_else(|| Adam::new(self.parameter_count()));
        self.train_epochs(&xs, &ys, None, epochs, cfg, &mut adam);
        self.online_opt = Some(adam);
        Ok(())
    }

    fn split_observations(&self, observations: &[Observation]) -> Result<(Vec<Vec<f64>>, Vec<f64>)> {
        let d = self.arch.input_dim;
        let mut xs = Vec::with_capacity(observations.len());
        let mut ys = Vec::with_capacity(observations.len());
        for o in observations {
            if o.x.len() != d {
                return Err(Error::DimensionMismatch {
                    expected: d,
                    found: o.x.len(),
                });
            }
            if !o.y.is_finite() {
                return Err(Error::NonFinite("objective values"));
            }
            xs.push(o.x.clone());
            ys.push(o.y);
        }
        Ok((xs, ys))
    }

    pub fn to_record(&self) -> PopulationRecord {
        PopulationRecord {
            arch: self.arch.clone(),
            layers: self
                .net
                .layers
                .iter()
                .map(|l| LayerRecord {
                    inputs: l.w.nrows(),
                    outputs: l.w.ncols(),
                    weights: l.w.iter().map(|v| v.get()).collect(),
                    bias: l.b.iter().map(|v| v.get()).collect(),
                })
                .collect(),
            scaling: self.scaling.clone(),
            rng: self.rng.clone(),
            optimizer: self.online_opt.as_ref().map(|a| AdamRecord {
                step: a.step,
                m: a.m.iter().map(|v| v.get()).collect(),
                v: a.v.iter().map(|v| v.get()).collect(),
            }),
        }
    }

    /// Rebuilds a model from a record. Values are narrowed to single
    /// precision, which is exact for records written by [`Self::to_record`].
    pub fn from_record(record: &PopulationRecord) -> Result<Self> {
        record.arch.validate()?;
        let dims = layer_dims(&record.arch);
        if record.layers.len() != dims.len() - 1 {
            return Err(Error::State("population layer count does not match architecture".into()));
        }
        let narrow = |v: &[f64]| -> Vec<f32> { v.iter().map(|x| *x as f32).collect() };
        let mut layers = Vec::with_capacity(record.layers.len());
        for (l, io) in record.layers.iter().zip(dims.windows(2)) {
            if l.inputs != io[0] || l.outputs != io[1] || l.weights.len() != io[0] * io[1] || l.bias.len() != io[1] {
                return Err(Error::State("population layer shape does not match architecture".into()));
            }
            layers.push(Dense {
                w: Array2::from_shape_vec((io[0], io[1]), narrow(&l.weights)).map_err(|e| Error::State(e.to_string()))?,
                b: Array1::from(narrow(&l.bias)),
            });
        }
        let net = Network { layers };
        let count = net.parameter_count();
        let online_opt = match &record.optimizer {
            Some(a) if a.m.len() == count && a.v.len() == count => Some(Adam {
                step: a.step,
                m: narrow(&a.m),
                v: narrow(&a.v),
            }),
            Some(_) => return Err(Error::State("optimizer state size does not match network".into())),
            None => None,
        };
        Ok(Self {
            arch: record.arch.clone(),
            net,
            scaling: record.scaling.clone(),
            rng: record.rng.clone(),
            online_opt,
        })
    }
}

/// Locations with their averaged target means and variances.
type LocationTargets = (Vec<Vec<f64>>, Vec<f64>, Vec<f64>);

fn aggregate_by_location(samples: &[MetaSample], dim: usize) -> Result<LocationTargets> {
    use std::collections::HashMap;
    let mut index: HashMap<Vec<u64>, usize> = HashMap::new();
    let mut xs = Vec::new();
    let mut sums: Vec<(f64, f64, usize)> = Vec::new();
    for s in samples {
        if s.x.len() != dim {
            return Err(Error::DimensionMismatch {
                expected: dim,
                found: s.x.len(),
            });
        }
        if !(s.target_mean.is_finite() && s.target_variance.is_finite()) {
            return Err(Error::NonFinite("meta-sample targets"));
        }
        let key: Vec<u64> = s.x.iter().map(|v| v.to_bits()).collect();
        let i = *index.entry(key).or_insert_with(|| {
            xs.push(s.x.clone());
            sums.push((0.0, 0.0, 0));
            xs.len() - 1
        });
        sums[i].0 += s.target_mean;
        sums[i].1 += s.target_variance;
        sums[i].2 += 1;
    }
    let means = sums.iter().map(|(m, _, c)| m / *c as f64).collect();
    let variances = sums.iter().map(|(_, v, c)| v / *c as f64).collect();
    Ok((xs, means, variances))
}

/// Per-location averaged replay targets, in first-appearance order.
pub fn replay_targets(samples: &[MetaSample], dim: usize) -> Result<Vec<(Vec<f64>, f64, f64)>> {
    let (xs, m, v) = aggregate_by_location(samples, dim)?;
    Ok(xs.into_iter().zip(m).zip(v).map(|((x, m), v)| (x, m, v)).collect())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LayerRecord {
    pub inputs: usize,
    pub outputs: usize,
    /// Row-major `inputs × outputs`.
    pub weights: Vec<f64>,
    pub bias: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AdamRecord {
    pub step: u64,
    pub m: Vec<f64>,
    pub v: Vec<f64>,
}

/// Serialized population model: architecture, flat weights, output scaling,
/// random stream position and online optimizer moments.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PopulationRecord {
    pub arch: BnnArchitecture,
    pub layers: Vec<LayerRecord>,
    pub scaling: OutputScaling,
    pub rng: StreamRng,
    pub optimizer: Option<AdamRecord>,
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small(width: usize, rate: f64, seed: u64) -> PopulationModel {
        PopulationModel::new(
            BnnArchitecture {
                input_dim: 2,
                hidden_layers: 3,
                hidden_width: width,
                dropout_rate: rate,
            },
            seed,
        )
        .unwrap()
    }

    fn grid(k: usize) -> Vec<Vec<f64>> {
        let mut pts = Vec::new();
        for i in 0..k {
            for j in 0..k {
                pts.push(vec![i as f64 / (k - 1) as f64, j as f64 / (k - 1) as f64]);
            }
        }
        pts
    }

    #[test]
    fn nll_values() {
        assert_eq!(gaussian_nll(1.5, 0.0, 1.5), 0.0);
        assert_eq!(gaussian_nll(1.5, 2.0, 1.5), 1.0);
        assert_eq!(gaussian_nll(2.5, 0.0, 1.5), 0.5);
    }

    #[test]
    fn init_is_deterministic_in_seed() {
        assert_eq!(small(8, 0.1, 3).parameters(), small(8, 0.1, 3).parameters());
        assert_ne!(small(8, 0.1, 3).parameters(), small(8, 0.1, 4).parameters());
    }

    #[test]
    fn fresh_model_is_finite_on_unit_square() {
        let m = PopulationModel::new(BnnArchitecture::default(), 1).unwrap();
        let mut r = rng::stream(0);
        for p in m.predict_many(&grid(11), 8, &mut r).unwrap() {
            assert!(p.mean.is_finite() && p.variance.is_finite() && p.variance >= 0.0);
        }
    }

    #[test]
    fn zero_dropout_prediction_is_exact_head_output() {
        let m = small(16, 0.0, 5);
        let x = [0.3, 0.6];
        let (mean, lv) = m.forward_deterministic(&x).unwrap();
        for n_mc in [1, 7, 32] {
            let p = m.predict(&x, n_mc, &mut rng::stream(1)).unwrap();
            assert_eq!(p.mean, mean);
            assert_eq!(p.variance, lv.exp());
        }
    }

    #[test]
    fn single_pass_has_no_epistemic_term() {
        let m = small(16, 0.5, 5);
        let x = vec![0.3, 0.6];
        let mut a = rng::stream(9);
        let p = m.predict(&x, 1, &mut a).unwrap();
        // Replay the same mask draw by hand.
        let mut b = rng::stream(9);
        let h = m.net.trunk(&m.check_inputs(&[x]).unwrap());
        let last = m.net.layers.last().unwrap();
        let thr = keep_threshold(0.5);
        let (mut o0, mut o1) = (last.b[0] as f64, last.b[1] as f64);
        for j in 0..16 {
            if b.gen::<u32>() < thr {
                o0 += h[[0, j]] as f64 * 2.0 * last.w[[j, 0]] as f64;
                o1 += h[[0, j]] as f64 * 2.0 * last.w[[j, 1]] as f64;
            }
        }
        assert!((p.mean - o0).abs() < 1e-12);
        assert!((p.variance - o1.clamp(LOG_VAR_MIN, LOG_VAR_MAX).exp()).abs() < 1e-12);
    }

    #[test]
    fn variance_is_non_negative() {
        let m = small(12, 0.3, 2);
        let mut r = rng::stream(4);
        for p in m.predict_many(&grid(6), 5, &mut r).unwrap() {
            assert!(p.variance >= 0.0);
        }
    }

    #[test]
    fn replay_targets_average_users_per_location() {
        let s = |x: f64, m: f64, v: f64, u: usize| MetaSample {
            x: vec![x, 0.5],
            target_mean: m,
            target_variance: v,
            source_user: u,
        };
        let t = replay_targets(&[s(0.1, 2.0, 1.0, 1), s(0.2, 5.0, 3.0, 1), s(0.1, 4.0, 2.0, 2)], 2).unwrap();
        assert_eq!(t.len(), 2);
        assert_eq!(t[0], (vec![0.1, 0.5], 3.0, 1.5));
        assert_eq!(t[1], (vec![0.2, 0.5], 5.0, 3.0));
    }

    #[test]
    fn meta_train_rejects_empty_samples() {
        let mut m = small(8, 0.1, 0);
        assert!(matches!(m.meta_train(&[], 10, &TrainSettings::default()), Err(Error::Empty(_))));
    }

    #[test]
    fn constant_targets_are_learned() {
        let mut m = small(32, 0.1, 7);
        let samples: Vec<MetaSample> = grid(8)
            .into_iter()
            .map(|x| MetaSample {
                x,
                target_mean: 3.0,
                target_variance: 0.5,
                source_user: 1,
            })
            .collect();
        let report = m.meta_train(&samples, 400, &TrainSettings::default()).unwrap();
        assert!(report.final_loss < 1e-2, "{}", report.final_loss);
    }

    #[test]
    fn online_update_with_zero_epochs_is_a_no_op() {
        let mut m = small(8, 0.1, 0);
        let before = m.to_record();
        m.online_update(&[Observation::new(vec![0.2, 0.2], 1.0)], 0, &TrainSettings::default())
            .unwrap();
        assert_eq!(before, m.to_record());
    }

    #[test]
    fn online_update_is_deterministic() {
        let obs = vec![
            Observation::new(vec![0.2, 0.2], 1.0),
            Observation::new(vec![0.7, 0.1], -1.0),
        ];
        let mut a = small(8, 0.1, 0);
        let mut b = small(8, 0.1, 0);
        a.online_update(&obs, 5, &TrainSettings::default()).unwrap();
        b.online_update(&obs, 5, &TrainSettings::default()).unwrap();
        assert_eq!(a.parameters(), b.parameters());
    }

    #[test]
    fn repeated_online_updates_fit_a_single_point() {
        let mut m = PopulationModel::new(BnnArchitecture::default(), 21).unwrap();
        let obs = [Observation::new(vec![0.4, 0.7], 2.5)];
        m.online_update(&obs, 500, &TrainSettings::default()).unwrap();
        let p = m.predict(&[0.4, 0.7], 32, &mut rng::stream(0)).unwrap();
        assert!((p.mean - 2.5).abs() < 0.5, "{}", p.mean);
    }

    #[test]
    fn record_round_trip_is_bitwise() {
        let mut m = small(10, 0.1, 8);
        m.online_update(
            &[Observation::new(vec![0.1, 0.9], 3.0), Observation::new(vec![0.5, 0.5], 1.0)],
            3,
            &TrainSettings::default(),
        )
        .unwrap();
        let json = serde_json::to_string(&m.to_record()).unwrap();
        let back = PopulationModel::from_record(&serde_json::from_str(&json).unwrap()).unwrap();
        for x in grid(5) {
            assert_eq!(m.forward_deterministic(&x).unwrap(), back.forward_deterministic(&x).unwrap());
        }
        assert_eq!(serde_json::to_string(&back.to_record()).unwrap(), json);
    }

    #[test]
    fn gradients_match_finite_differences() {
        let arch = BnnArchitecture {
            hidden_width: 6,
            dropout_rate: 0.2,
            ..BnnArchitecture::default()
        };
        let mut r = rng::stream(13);
        let net: Network<f64> = Network::init(&arch, &mut r);
        let scaling = OutputScaling {
            shift: 0.4,
            scale: 1.7,
            calibrated: true,
        };
        let xs = grid(3);
        let x = to_matrix::<f64>(&xs, 2).unwrap();
        let means: Vec<f64> = xs.iter().map(|x| x[0] - 2.0 * x[1]).collect();
        let vars: Vec<f64> = xs.iter().map(|x| 0.5 + x[0]).collect();
        let mask = dropout_mask::<f64>(xs.len(), 6, 0.2, &mut r);
        for objective in [
            Objective::Replay {
                means: &means,
                variances: &vars,
            },
            Objective::Nll { targets: &means },
        ] {
            let loss = |n: &Network<f64>| output_loss(&n.forward_train(&x, &mask).out, &scaling, &objective);
            let trace = net.forward_train(&x, &mask);
            let g = flatten(&net.backward(&trace, &mask, &loss(&net).1));
            let p = net.parameters();
            let mut probe = net.clone();
            for k in 0..p.len() {
                let h = 1e-6;
                let mut q = p.clone();
                q[k] = p[k] + h;
                probe.set_parameters(&q);
                let fp = loss(&probe).0;
                q[k] = p[k] - h;
                probe.set_parameters(&q);
                let fm = loss(&probe).0;
                let fd = (fp - fm) / (2.0 * h);
                assert!((fd - g[k]).abs() <= 1e-4 * fd.abs().max(g[k].abs()).max(1e-6), "param {k}: fd {fd} vs {}", g[k]);
            }
        }
    }
}
