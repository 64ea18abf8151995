//! Individual and neighborhood propensity models with sparse encoders, and
//! the balancing weights built from them.
//!
//! The individual score `e(t | x_t)` is a logistic head on a sparse code. The
//! neighborhood score `phi(z | x_z)` is a continuous piecewise-linear density
//! on `[0, 1]` whose `B + 1` knot heights come from a softmax head and are
//! rescaled so that the interpolant integrates to one.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::graph::Graph;
use crate::tensor::{Activation, Adam, Linear, Mlp, ParamStore, Tape, Tensor, Var};

/// Bounds applied to probabilities before they enter a logarithm.
const ACT_CLAMP: f64 = 1e-7;
pub const E_CLAMP: f64 = 1e-3;
pub const PHI_FLOOR: f64 = 1e-6;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PropensityConfig {
    pub hidden: usize,
    /// Target activation rate of the sparse layer.
    pub rho: f64,
    /// Weight of the sparsity penalty.
    pub beta: f64,
    pub lr: f64,
    pub epochs: usize,
    /// Number of linear segments of the exposure density.
    pub bins: usize,
    /// Fraction of training rows held out for early stopping.
    pub holdout: f64,
    pub seed: u64,
}

impl Default for PropensityConfig {
    fn default() -> Self {
        Self {
            hidden: 32,
            rho: 0.05,
            beta: 0.001,
            lr: 0.001,
            epochs: 300,
            bins: 10,
            holdout: 0.2,
            seed: 0,
        }
    }
}

/// `sum_j KL(rho || rho_hat_j)` with `rho_hat_j` the column means of
/// `activations`.
pub fn sparsity_penalty(activations: &Tensor, rho: f64) -> Result<f64> {
    if let Some(&value) = activations
        .data()
        .iter()
        .find(|v| !(0.0..=1.0).contains(*v))
    {
        return Err(Error::ActivationOutOfRange { value });
    }
    let (n, j) = activations.shape();
    let mut total = 0.0;
    for c in 0..j {
        let mean = (0..n).map(|r| activations.get(r, c)).sum::<f64>() / n as f64;
        let q = mean.clamp(ACT_CLAMP, 1.0 - ACT_CLAMP);
        total += rho * (rho / q).ln() + (1.0 - rho) * ((1.0 - rho) / (1.0 - q)).ln();
    }
    Ok(total)
}

/// Tape version of [`sparsity_penalty`].
pub fn sparsity_penalty_var(tape: &mut Tape, activations: Var, rho: f64) -> Result<Var> {
    let j = tape.value(activations).cols() as f64;
    let mean = tape.col_mean(activations)?;
    let q = tape.clamp(mean, ACT_CLAMP, 1.0 - ACT_CLAMP)?;
    let log_q = tape.log(q)?;
    let sum_log_q = tape.sum(log_q)?;
    let neg_q = tape.scale(q, -1.0)?;
    let one_minus_q = tape.add_scalar(neg_q, 1.0)?;
    let log_1mq = tape.log(one_minus_q)?;
    let sum_log_1mq = tape.sum(log_1mq)?;
    let a = tape.scale(sum_log_q, -rho)?;
    let b = tape.scale(sum_log_1mq, -(1.0 - rho))?;
    let s = tape.add(a, b)?;
    let constant = j * (rho * rho.ln() + (1.0 - rho) * (1.0 - rho).ln());
    Ok(tape.add_scalar(s, constant)?)
}

/// Per-column affine standardization fitted on training inputs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ColumnScaler {
    pub mean: Vec<f64>,
    pub scale: Vec<f64>,
}

impl ColumnScaler {
    pub fn fit(x: &Tensor) -> Self {
        let (n, d) = x.shape();
        let mut mean = vec![0.0; d];
        let mut var = vec![0.0; d];
        for r in 0..n {
            for (c, v) in x.row_slice(r).iter().enumerate() {
                mean[c] += v / n as f64;
            }
        }
        for r in 0..n {
            for (c, v) in x.row_slice(r).iter().enumerate() {
                var[c] += (v - mean[c]).powi(2) / n as f64;
            }
        }
        let scale = var
            .iter()
            .map(|v| if *v > 1e-12 { v.sqrt() } else { 1.0 })
            .collect();
        Self { mean, scale }
    }

    pub fn apply(&self, x: &Tensor) -> Result<Tensor> {
        if x.cols() != self.mean.len() {
            return Err(Error::ShapeMismatch(format!(
                "scaler fitted on {} columns, got {}",
                self.mean.len(),
                x.cols()
            )));
        }
        let mut out = x.clone();
        let d = x.cols();
        for (k, v) in out.data_mut().iter_mut().enumerate() {
            let c = k % d;
            *v = (*v - self.mean[c]) / self.scale[c];
        }
        Ok(out)
    }
}

/// Inputs to both propensity models: own features next to the mean of the
/// neighbors' features.
pub fn propensity_inputs(x: &Tensor, graph: &Graph) -> Result<Tensor> {
    if x.rows() != graph.n_units() {
        return Err(Error::ShapeMismatch(format!(
            "{} feature rows for {} units",
            x.rows(),
            graph.n_units()
        )));
    }
    let neigh = graph.neighbor_mean(x.data(), x.cols())?;
    let d = x.cols();
    let mut data = Vec::with_capacity(x.len() * 2);
    for r in 0..x.rows() {
        data.extend_from_slice(x.row_slice(r));
        data.extend_from_slice(&neigh[r * d..(r + 1) * d]);
    }
    Ok(Tensor::new(x.rows(), 2 * d, data)?)
}

/// Three fully connected layers; the last one is sigmoid and carries the
/// sparsity penalty.
#[derive(Debug, Clone, PartialEq)]
pub struct SparseEncoder {
    mlp: Mlp,
}

impl SparseEncoder {
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        input: usize,
        hidden: usize,
        rng: &mut ChaCha8Rng,
    ) -> Self {
        let mlp = Mlp::new(
            store,
            name,
            &[input, hidden, hidden, hidden],
            &[Activation::Relu, Activation::Relu, Activation::Sigmoid],
            rng,
        );
        Self { mlp }
    }

    pub fn forward(&self, tape: &mut Tape, params: &[Var], x: Var) -> Result<Var> {
        Ok(self.mlp.forward(tape, params, x)?)
    }
}

/// Seeded split of `0..n` into fitting rows and `round(frac * n)` held-out
/// rows, each sorted.
pub fn holdout_split(n: usize, frac: f64, seed: u64) -> (Vec<usize>, Vec<usize>) {
    use rand::seq::SliceRandom;
    let mut order: Vec<usize> = (0..n).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(13);
    order.shuffle(&mut rng);
    let n_hold = ((frac * n as f64).round() as usize).min(n.saturating_sub(1));
    let mut hold = order[..n_hold].to_vec();
    let mut fit = order[n_hold..].to_vec();
    hold.sort_unstable();
    fit.sort_unstable();
    (fit, hold)
}

fn pick(v: &[f64], rows: &[usize]) -> Vec<f64> {
    rows.iter().map(|&r| v[r]).collect()
}

/// Parameters with the lowest held-out loss seen so far.
#[derive(Debug, Clone)]
struct Snapshot {
    loss: f64,
    params: ParamStore,
}

fn check_inputs(x: &Tensor, labels: &[f64], dim: usize) -> Result<()> {
    if x.rows() != labels.len() {
        return Err(Error::LengthMismatch(x.rows(), labels.len()));
    }
    if x.cols() != dim {
        return Err(Error::ShapeMismatch(format!(
            "model expects {dim} input columns, got {}",
            x.cols()
        )));
    }
    Ok(())
}

/// Value and parameter gradients of one loss evaluation.
#[derive(Debug, Clone)]
pub struct LossEval {
    pub total: f64,
    pub fit: f64,
    pub sparsity: f64,
    pub grads: Vec<Tensor>,
}

/// `e(t = 1 | x)`: sparse encoder followed by logistic regression.
#[derive(Debug, Clone)]
pub struct IndividualPSModel {
    cfg: PropensityConfig,
    scaler: ColumnScaler,
    store: ParamStore,
    encoder: SparseEncoder,
    head: Linear,
    adam: Adam,
    /// Base-rate fallback when every training label is identical.
    constant: Option<f64>,
    best: Option<Snapshot>,
    /// Training loss per step.
    pub losses: Vec<f64>,
}

impl IndividualPSModel {
    /// Fresh model with its input scaler fitted on `x`.
    pub fn new(x: &Tensor, cfg: &PropensityConfig) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        rng.set_stream(11);
        let mut store = ParamStore::new();
        let encoder = SparseEncoder::new(&mut store, "g1", x.cols(), cfg.hidden, &mut rng);
        let head = Linear::new(&mut store, "e", cfg.hidden, 1, true, &mut rng);
        let adam = Adam::new(&store, cfg.lr);
        Self {
            cfg: *cfg,
            scaler: ColumnScaler::fit(x),
            store,
            encoder,
            head,
            adam,
            constant: None,
            best: None,
            losses: Vec::new(),
        }
    }

    pub fn params(&self) -> &ParamStore {
        &self.store
    }

    pub fn params_mut(&mut self) -> &mut ParamStore {
        &mut self.store
    }

    pub fn is_constant(&self) -> bool {
        self.constant.is_some()
    }

    fn logits(&self, tape: &mut Tape, params: &[Var], x: &Tensor) -> Result<(Var, Var)> {
        let input = tape.leaf(self.scaler.apply(x)?);
        let code = self.encoder.forward(tape, params, input)?;
        let logit = self.head.forward(tape, params, code)?;
        Ok((logit, code))
    }

    /// Mean cross-entropy plus `beta` times the sparsity penalty.
    pub fn loss(&self, x: &Tensor, t: &[f64]) -> Result<LossEval> {
        check_inputs(x, t, self.scaler.mean.len())?;
        let n = t.len() as f64;
        let mut tape = Tape::new();
        let params = self.store.bind(&mut tape);
        let (logit, code) = self.logits(&mut tape, &params, x)?;
        let log_p1 = tape.log_sigmoid(logit)?;
        let neg = tape.scale(logit, -1.0)?;
        let log_p0 = tape.log_sigmoid(neg)?;
        let w1 = Tensor::column(t.iter().map(|&v| -v / n).collect());
        let w0 = Tensor::column(t.iter().map(|&v| -(1.0 - v) / n).collect());
        let ce1 = tape.weighted_sum(log_p1, w1)?;
        let ce0 = tape.weighted_sum(log_p0, w0)?;
        let ce = tape.add(ce1, ce0)?;
        let kl = sparsity_penalty_var(&mut tape, code, self.cfg.rho)?;
        let kl_scaled = tape.scale(kl, self.cfg.beta)?;
        let total = tape.add(ce, kl_scaled)?;
        let grads = tape.backward(total)?;
        Ok(LossEval {
            total: tape.value(total).item(),
            fit: tape.value(ce).item(),
            sparsity: tape.value(kl).item(),
            grads: params.iter().map(|&p| grads.wrt(p)).collect(),
        })
    }

    /// One full-batch Adam step; returns the loss before the update.
    pub fn step(&mut self, x: &Tensor, t: &[f64]) -> Result<f64> {
        if self.constant.is_some() {
            return Ok(0.0);
        }
        let eval = self.loss(x, t)?;
        self.adam.step(&mut self.store, &eval.grads)?;
        self.losses.push(eval.total);
        Ok(eval.total)
    }

    /// Scores the current parameters on held-out rows and keeps them if
    /// their cross-entropy is the lowest so far. Returns that cross-entropy.
    pub fn track_holdout(&mut self, x: &Tensor, t: &[f64]) -> Result<f64> {
        if self.constant.is_some() {
            return Ok(0.0);
        }
        let fit = self.loss(x, t)?.fit;
        if self.best.as_ref().map_or(true, |b| fit < b.loss) {
            self.best = Some(Snapshot {
                loss: fit,
                params: self.store.clone(),
            });
        }
        Ok(fit)
    }

    /// Parameters used for prediction: the best held-out snapshot if any.
    pub fn active_params(&self) -> &ParamStore {
        self.best.as_ref().map_or(&self.store, |b| &b.params)
    }

    /// `P(t = 1 | x)`, unclamped.
    pub fn predict(&self, x: &Tensor) -> Result<Vec<f64>> {
        if let Some(c) = self.constant {
            return Ok(vec![c; x.rows()]);
        }
        let mut tape = Tape::new();
        let params = self.active_params().bind(&mut tape);
        let (logit, _) = self.logits(&mut tape, &params, x)?;
        let out = tape.sigmoid(logit)?;
        Ok(tape.value(out).data().to_vec())
    }
}

/// Fits the individual score for `cfg.epochs` full-batch steps. Identical
/// labels yield a constant model at the clamped base rate.
pub fn train_individual_ps(
    x: &Tensor,
    t: &[f64],
    cfg: &PropensityConfig,
) -> Result<IndividualPSModel> {
    let mut model = IndividualPSModel::new(x, cfg);
    check_inputs(x, t, x.cols())?;
    if let Some(&bad) = t.iter().find(|&&v| v != 0.0 && v != 1.0) {
        return Err(Error::Config(format!(
            "treatment label {bad} is not binary"
        )));
    }
    let rate = t.iter().sum::<f64>() / t.len().max(1) as f64;
    if t.iter().all(|&v| v == t[0]) {
        log::warn!("all treatment labels equal {}; using the base rate", t[0]);
        model.constant = Some(rate.clamp(E_CLAMP, 1.0 - E_CLAMP));
        return Ok(model);
    }
    let (fit, hold) = holdout_split(t.len(), cfg.holdout, cfg.seed);
    let (x_fit, t_fit) = (x.select_rows(&fit), pick(t, &fit));
    let (x_hold, t_hold) = (x.select_rows(&hold), pick(t, &hold));
    for _ in 0..cfg.epochs {
        model.step(&x_fit, &t_fit)?;
        if !hold.is_empty() {
            model.track_holdout(&x_hold, &t_hold)?;
        }
    }
    Ok(model)
}

/// Hat-function interpolation weights of each `z` on the uniform grid with
/// `bins` segments.
pub fn hat_matrix(z: &[f64], bins: usize) -> Result<Tensor> {
    let mut out = Tensor::zeros(z.len(), bins + 1);
    for (i, &v) in z.iter().enumerate() {
        if !(0.0..=1.0).contains(&v) {
            return Err(Error::OutOfRangeExposure(v));
        }
        let u = v * bins as f64;
        let k = (u.floor() as usize).min(bins - 1);
        let frac = u - k as f64;
        out.set(i, k, 1.0 - frac);
        out.set(i, k + 1, frac);
    }
    Ok(out)
}

/// Trapezoid weights of the knots: `1 / (2B)` at the ends, `1 / B` inside.
fn trapezoid_weights(bins: usize) -> Tensor {
    let h = 1.0 / bins as f64;
    Tensor::column(
        (0..=bins)
            .map(|k| if k == 0 || k == bins { 0.5 * h } else { h })
            .collect(),
    )
}

/// `phi(z | x)`: sparse encoder feeding a piecewise-linear density head.
#[derive(Debug, Clone)]
pub struct NeighborhoodPSModel {
    cfg: PropensityConfig,
    scaler: ColumnScaler,
    store: ParamStore,
    encoder: SparseEncoder,
    head: Linear,
    adam: Adam,
    best: Option<Snapshot>,
    pub losses: Vec<f64>,
}

impl NeighborhoodPSModel {
    pub fn new(x: &Tensor, cfg: &PropensityConfig) -> Self {
        assert!(cfg.bins >= 1, "density needs at least one segment");
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        rng.set_stream(12);
        let mut store = ParamStore::new();
        let encoder = SparseEncoder::new(&mut store, "g2", x.cols(), cfg.hidden, &mut rng);
        let head = Linear::new(&mut store, "phi", cfg.hidden, cfg.bins + 1, true, &mut rng);
        // Zero head: the untrained density is exactly uniform.
        store.get_mut(head.weight).data_mut().fill(0.0);
        let adam = Adam::new(&store, cfg.lr);
        Self {
            cfg: *cfg,
            scaler: ColumnScaler::fit(x),
            store,
            encoder,
            head,
            adam,
            best: None,
            losses: Vec::new(),
        }
    }

    pub fn bins(&self) -> usize {
        self.cfg.bins
    }

    pub fn params(&self) -> &ParamStore {
        &self.store
    }

    pub fn params_mut(&mut self) -> &mut ParamStore {
        &mut self.store
    }

    /// Softmax knot heights (not yet area-normalized) and the sparse code.
    fn raw_heights(&self, tape: &mut Tape, params: &[Var], x: &Tensor) -> Result<(Var, Var)> {
        let input = tape.leaf(self.scaler.apply(x)?);
        let code = self.encoder.forward(tape, params, input)?;
        let logits = self.head.forward(tape, params, code)?;
        Ok((tape.softmax_rows(logits)?, code))
    }

    /// `ln phi(z_i | x_i)` as a column on the tape.
    fn log_density(&self, tape: &mut Tape, heights: Var, z: &[f64]) -> Result<Var> {
        let hat = hat_matrix(z, self.cfg.bins)?;
        let at_z = tape.mul_const(heights, hat)?;
        let value = tape.row_sum(at_z)?;
        let tw = tape.leaf(trapezoid_weights(self.cfg.bins));
        let area = tape.matmul(heights, tw)?;
        let log_value = tape.log(value)?;
        let log_area = tape.log(area)?;
        Ok(tape.sub(log_value, log_area)?)
    }

    /// Mean negative log-likelihood plus `beta` times the sparsity penalty.
    pub fn loss(&self, x: &Tensor, z: &[f64]) -> Result<LossEval> {
        check_inputs(x, z, self.scaler.mean.len())?;
        let n = z.len() as f64;
        let mut tape = Tape::new();
        let params = self.store.bind(&mut tape);
        let (heights, code) = self.raw_heights(&mut tape, &params, x)?;
        let log_phi = self.log_density(&mut tape, heights, z)?;
        let nll = tape.weighted_sum(log_phi, Tensor::full(z.len(), 1, -1.0 / n))?;
        let kl = sparsity_penalty_var(&mut tape, code, self.cfg.rho)?;
        let kl_scaled = tape.scale(kl, self.cfg.beta)?;
        let total = tape.add(nll, kl_scaled)?;
        let grads = tape.backward(total)?;
        Ok(LossEval {
            total: tape.value(total).item(),
            fit: tape.value(nll).item(),
            sparsity: tape.value(kl).item(),
            grads: params.iter().map(|&p| grads.wrt(p)).collect(),
        })
    }

    pub fn step(&mut self, x: &Tensor, z: &[f64]) -> Result<f64> {
        let eval = self.loss(x, z)?;
        self.adam.step(&mut self.store, &eval.grads)?;
        self.losses.push(eval.total);
        Ok(eval.total)
    }

    /// Keeps the current parameters if their held-out negative
    /// log-likelihood is the lowest so far; returns that value.
    pub fn track_holdout(&mut self, x: &Tensor, z: &[f64]) -> Result<f64> {
        let fit = self.loss(x, z)?.fit;
        if self.best.as_ref().map_or(true, |b| fit < b.loss) {
            self.best = Some(Snapshot {
                loss: fit,
                params: self.store.clone(),
            });
        }
        Ok(fit)
    }

    pub fn active_params(&self) -> &ParamStore {
        self.best.as_ref().map_or(&self.store, |b| &b.params)
    }

    /// Knot heights of each row's density, normalized to unit area
    /// (`n x (B + 1)`).
    pub fn knot_heights(&self, x: &Tensor) -> Result<Tensor> {
        let mut tape = Tape::new();
        let params = self.active_params().bind(&mut tape);
        let (heights, _) = self.raw_heights(&mut tape, &params, x)?;
        let h = tape.value(heights).clone();
        let tw = trapezoid_weights(self.cfg.bins);
        let area = h.matmul(&tw)?;
        let mut out = h;
        let cols = out.cols();
        for (k, v) in out.data_mut().iter_mut().enumerate() {
            *v /= area.data()[k / cols];
        }
        Ok(out)
    }

    /// `phi(z_i | x_i)` per row.
    pub fn density(&self, x: &Tensor, z: &[f64]) -> Result<Vec<f64>> {
        check_inputs(x, z, self.scaler.mean.len())?;
        let heights = self.knot_heights(x)?;
        let hat = hat_matrix(z, self.cfg.bins)?;
        Ok((0..z.len())
            .map(|i| {
                heights
                    .row_slice(i)
                    .iter()
                    .zip(hat.row_slice(i))
                    .map(|(a, b)| a * b)
                    .sum()
            })
            .collect())
    }
}

pub fn train_neighborhood_ps(
    x: &Tensor,
    z: &[f64],
    cfg: &PropensityConfig,
) -> Result<NeighborhoodPSModel> {
    check_inputs(x, z, x.cols())?;
    if let Some(&bad) = z.iter().find(|v| !(0.0..=1.0).contains(*v)) {
        return Err(Error::OutOfRangeExposure(bad));
    }
    let mut model = NeighborhoodPSModel::new(x, cfg);
    let (fit, hold) = holdout_split(z.len(), cfg.holdout, cfg.seed);
    let (x_fit, z_fit) = (x.select_rows(&fit), pick(z, &fit));
    let (x_hold, z_hold) = (x.select_rows(&hold), pick(z, &hold));
    for _ in 0..cfg.epochs {
        model.step(&x_fit, &z_fit)?;
        if !hold.is_empty() {
            model.track_holdout(&x_hold, &z_hold)?;
        }
    }
    Ok(model)
}

/// Raw inverse joint propensities and their softmax-normalized version.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BalancingWeights {
    pub raw: Vec<f64>,
    pub normalized: Vec<f64>,
}

impl BalancingWeights {
    /// `raw_i = 1 / (phi_i * P(t_i | x_i))` after clamping `e` into
    /// `[1e-3, 1 - 1e-3]` and flooring `phi` at `1e-6`. The normalized
    /// weights are a softmax over `ln raw`.
    pub fn from_scores(e: &[f64], phi: &[f64], t: &[f64]) -> Result<Self> {
        if e.len() != t.len() {
            return Err(Error::LengthMismatch(e.len(), t.len()));
        }
        if phi.len() != t.len() {
            return Err(Error::LengthMismatch(phi.len(), t.len()));
        }
        let log_raw: Vec<f64> = e
            .iter()
            .zip(phi)
            .zip(t)
            .map(|((&e, &phi), &t)| {
                let e = e.clamp(E_CLAMP, 1.0 - E_CLAMP);
                let p_t = if t == 1.0 { e } else { 1.0 - e };
                -(p_t.ln() + phi.max(PHI_FLOOR).ln())
            })
            .collect();
        let max = log_raw.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let exp: Vec<f64> = log_raw.iter().map(|l| (l - max).exp()).collect();
        let total: f64 = exp.iter().sum();
        let normalized: Vec<f64> = exp.iter().map(|v| v / total).collect();
        let raw: Vec<f64> = log_raw.iter().map(|l| l.exp()).collect();
        let largest = normalized.iter().cloned().fold(0.0, f64::max);
        if largest * normalized.len() as f64 > 50.0 {
            log::info!("extreme balancing weight: largest normalized weight {largest:.3e}");
        }
        Ok(Self { raw, normalized })
    }

    pub fn uniform(n: usize) -> Self {
        Self {
            raw: vec![1.0; n],
            normalized: vec![1.0 / n as f64; n],
        }
    }
}

/// Balancing weights of `(t, z)` under the two fitted models.
pub fn balancing_weights(
    e_model: &IndividualPSModel,
    phi_model: &NeighborhoodPSModel,
    x: &Tensor,
    t: &[f64],
    z: &[f64],
) -> Result<BalancingWeights> {
    let e = e_model.predict(x)?;
    let phi = phi_model.density(x, z)?;
    BalancingWeights::from_scores(&e, &phi, t)
}

/// Fully enumerable toy with discrete covariate, binary treatment and
/// discrete exposure, where `t` and `z` are independent given `x`.
#[derive(Debug, Clone, PartialEq)]
pub struct DiscreteToy {
    pub x_values: Vec<f64>,
    pub p_x: Vec<f64>,
    /// `P(t = 1 | x)` per covariate value.
    pub e: Vec<f64>,
    pub z_values: Vec<f64>,
    /// `P(z = z_k | x)`, one row per covariate value.
    pub phi: Vec<Vec<f64>>,
}

impl DiscreteToy {
    pub fn three_level() -> Self {
        Self {
            x_values: vec![-1.0, 0.0, 2.0],
            p_x: vec![0.2, 0.5, 0.3],
            e: vec![0.2, 0.5, 0.85],
            z_values: vec![0.0, 0.5, 1.0],
            phi: vec![
                vec![0.6, 0.3, 0.1],
                vec![0.3, 0.4, 0.3],
                vec![0.1, 0.2, 0.7],
            ],
        }
    }

    /// `p(x_i, t, z_k)`.
    pub fn joint(&self, i: usize, t: usize, k: usize) -> f64 {
        let pt = if t == 1 { self.e[i] } else { 1.0 - self.e[i] };
        self.p_x[i] * pt * self.phi[i][k]
    }

    /// Oracle weight `1 / (P(t | x_i) phi(z_k | x_i))`.
    pub fn oracle_weight(&self, i: usize, t: usize, k: usize) -> f64 {
        let e = self.e[i];
        let pt = if t == 1 { e } else { 1.0 - e };
        1.0 / (pt * self.phi[i][k])
    }

    /// Reweighted covariate distribution within group `(t, z_k)`:
    /// `w p(x | t, z_k)` renormalized over `x`.
    pub fn reweighted_conditional(&self, t: usize, k: usize) -> Vec<f64> {
        let cells: Vec<f64> = (0..self.p_x.len())
            .map(|i| self.oracle_weight(i, t, k) * self.joint(i, t, k))
            .collect();
        let total: f64 = cells.iter().sum();
        cells.iter().map(|c| c / total).collect()
    }

    /// Largest per-cell gap between reweighted group distributions and `p(x)`.
    pub fn max_balance_gap(&self) -> f64 {
        let mut gap: f64 = 0.0;
        for t in 0..2 {
            for k in 0..self.z_values.len() {
                for (q, p) in self.reweighted_conditional(t, k).iter().zip(&self.p_x) {
                    gap = gap.max((q - p).abs());
                }
            }
        }
        gap
    }
}
