//! Outcome model: one graph-convolution layer, a representation map `Phi`
//! and an outcome head `h(r, t, z)`, trained on a balancing-weighted factual
//! loss plus a Wasserstein penalty between `p(r, t, z)` and `p(r) p(t, z)`.
//! Propensity models and outcome model are updated alternately.

use std::fmt;
use std::path::Path;
use std::str::FromStr;

use rand::seq::{index, SliceRandom};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::balance::{hsic, sinkhorn_divergence, SinkhornConfig};
use crate::error::{Error, Result};
use crate::graph::Graph;
use crate::propensity::{
    balancing_weights, holdout_split, propensity_inputs, BalancingWeights, ColumnScaler,
    IndividualPSModel, NeighborhoodPSModel, PropensityConfig,
};
use crate::synth::{NetworkDataset, Oracle};
use crate::tensor::{Activation, Adam, Linear, Mlp, ParamStore, Tape, Tensor, Var};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Variant {
    /// Uniform weights, no representation balancing.
    None,
    /// Balancing weights only.
    Reweight,
    /// Representation balancing only.
    Repre,
    Both,
}

impl Variant {
    pub const ALL: [Variant; 4] = [
        Variant::None,
        Variant::Reweight,
        Variant::Repre,
        Variant::Both,
    ];

    pub fn reweights(self) -> bool {
        matches!(self, Variant::Reweight | Variant::Both)
    }

    pub fn balances_representation(self) -> bool {
        matches!(self, Variant::Repre | Variant::Both)
    }

    pub fn name(self) -> &'static str {
        match self {
            Variant::None => "none",
            Variant::Reweight => "reweight",
            Variant::Repre => "repre",
            Variant::Both => "both",
        }
    }
}

impl fmt::Display for Variant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Variant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Variant::ALL
            .into_iter()
            .find(|v| v.name() == s)
            .ok_or_else(|| Error::Config(format!("unknown variant {s:?}")))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EstimatorConfig {
    pub variant: Variant,
    /// Wasserstein strength; ignored by variants without representation balancing.
    pub lambda: f64,
    pub gcn_dim: usize,
    pub hidden: usize,
    pub lr: f64,
    /// Outer iterations of the alternating schedule.
    pub epochs: usize,
    /// Propensity steps per outer iteration.
    pub k1: usize,
    /// Outcome-model steps per outer iteration.
    pub k2: usize,
    /// Units drawn per step for the Wasserstein term.
    pub wass_batch: usize,
    pub sinkhorn: SinkhornConfig,
    pub propensity: PropensityConfig,
    /// HSIC diagnostics every this many epochs; 0 disables them.
    pub diag_stride: usize,
    pub seed: u64,
}

impl Default for EstimatorConfig {
    fn default() -> Self {
        Self {
            variant: Variant::Both,
            lambda: 0.1,
            gcn_dim: 10,
            hidden: 32,
            lr: 0.001,
            epochs: 300,
            k1: 1,
            k2: 1,
            wass_batch: 128,
            sinkhorn: SinkhornConfig {
                tol: 1e-6,
                ..SinkhornConfig::default()
            },
            propensity: PropensityConfig::default(),
            diag_stride: 0,
            seed: 0,
        }
    }
}

impl EstimatorConfig {
    /// Penalty strength after the variant's reductions.
    pub fn effective_lambda(&self) -> f64 {
        if self.variant.balances_representation() {
            self.lambda
        } else {
            0.0
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.lambda >= 0.0) {
            return Err(Error::Config(format!(
                "lambda must be >= 0, got {}",
                self.lambda
            )));
        }
        if self.hidden == 0 || self.gcn_dim == 0 {
            return Err(Error::Config("hidden and gcn_dim must be positive".into()));
        }
        if !(self.lr > 0.0) {
            return Err(Error::Config(format!(
                "lr must be positive, got {}",
                self.lr
            )));
        }
        if self.wass_batch < 2 {
            return Err(Error::Config("wass_batch must be at least 2".into()));
        }
        Ok(())
    }
}

/// `[x_i | sigmoid(sum_j x_j^T W / sqrt(d_i d_j))]` for a fixed GCN weight `W`.
pub fn aggregate_features(x: &Tensor, graph: &Graph, w: &Tensor) -> Result<Tensor> {
    if x.rows() != graph.n_units() || w.rows() != x.cols() {
        return Err(Error::ShapeMismatch(format!(
            "features {:?}, gcn weight {:?}, {} units",
            x.shape(),
            w.shape(),
            graph.n_units()
        )));
    }
    if let Some(i) = graph.first_isolated() {
        return Err(Error::IsolatedUnit(i));
    }
    let ax = Tensor::new(x.rows(), x.cols(), graph.gcn_propagate(x.data(), x.cols()))?;
    let mut tape = Tape::new();
    let xv = tape.leaf(x.clone());
    let axv = tape.leaf(ax);
    let wv = tape.leaf(w.clone());
    let pre = tape.matmul(axv, wv)?;
    let neigh = tape.sigmoid(pre)?;
    let out = tape.concat(xv, neigh)?;
    Ok(tape.value(out).clone())
}

const MODEL_FORMAT: &str = "netcause-estimator-v1";

#[derive(Serialize, Deserialize)]
struct ModelCheckpoint {
    format: String,
    config: EstimatorConfig,
    scaler: ColumnScaler,
    y_mean: f64,
    y_scale: f64,
    params: Vec<crate::tensor::ParamRecord>,
}

/// Dataset quantities the outcome model needs, in the model's input scale.
#[derive(Debug, Clone)]
pub struct Prepared {
    pub x: Tensor,
    /// Normalized adjacency applied to `x`.
    pub ax: Tensor,
    pub t: Vec<f64>,
    pub z: Vec<f64>,
}

#[derive(Debug, Clone)]
pub struct EstimatorModel {
    cfg: EstimatorConfig,
    scaler: ColumnScaler,
    y_mean: f64,
    y_scale: f64,
    store: ParamStore,
    gcn: Linear,
    phi: Mlp,
    head: Mlp,
}

impl EstimatorModel {
    /// Untrained model; feature and outcome scaling are fitted on `ds`.
    pub fn new(ds: &NetworkDataset, cfg: &EstimatorConfig) -> Self {
        let n = ds.y.len().max(1) as f64;
        let y_mean = ds.y.iter().sum::<f64>() / n;
        let var = ds.y.iter().map(|y| (y - y_mean).powi(2)).sum::<f64>() / n;
        let y_scale = if var > 1e-12 { var.sqrt() } else { 1.0 };
        Self::build(cfg, ColumnScaler::fit(&ds.features), y_mean, y_scale)
    }

    fn build(cfg: &EstimatorConfig, scaler: ColumnScaler, y_mean: f64, y_scale: f64) -> Self {
        let d = scaler.mean.len();
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        rng.set_stream(21);
        let mut store = ParamStore::new();
        let gcn = Linear::new(&mut store, "gcn", d, cfg.gcn_dim, false, &mut rng);
        let h = cfg.hidden;
        let phi = Mlp::new(
            &mut store,
            "phi",
            &[d + cfg.gcn_dim, h, h, h],
            &[Activation::Relu, Activation::Relu, Activation::Identity],
            &mut rng,
        );
        let head = Mlp::new(
            &mut store,
            "h",
            &[h + 2, h, h, 1],
            &[Activation::Relu, Activation::Relu, Activation::Identity],
            &mut rng,
        );
        Self {
            cfg: cfg.clone(),
            scaler,
            y_mean,
            y_scale,
            store,
            gcn,
            phi,
            head,
        }
    }

    /// Writes `model.json`: configuration, input and outcome scaling, and
    /// every parameter tensor.
    pub fn save(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir)?;
        let ckpt = ModelCheckpoint {
            format: MODEL_FORMAT.into(),
            config: self.cfg.clone(),
            scaler: self.scaler.clone(),
            y_mean: self.y_mean,
            y_scale: self.y_scale,
            params: self.store.to_records(),
        };
        std::fs::write(
            dir.join("model.json"),
            serde_json::to_string_pretty(&ckpt)? + "\n",
        )?;
        Ok(())
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let ckpt: ModelCheckpoint =
            serde_json::from_str(&std::fs::read_to_string(dir.join("model.json"))?)?;
        if ckpt.format != MODEL_FORMAT {
            return Err(Error::Parse(format!(
                "unknown model format {:?}",
                ckpt.format
            )));
        }
        let mut model = Self::build(&ckpt.config, ckpt.scaler, ckpt.y_mean, ckpt.y_scale);
        let store = ParamStore::from_records(ckpt.params)?;
        let same_layout = store.names() == model.store.names()
            && store
                .tensors()
                .iter()
                .zip(model.store.tensors())
                .all(|(a, b)| a.shape() == b.shape());
        if !same_layout {
            return Err(Error::Parse(
                "checkpoint parameters do not match the configured architecture".into(),
            ));
        }
        model.store = store;
        Ok(model)
    }

    pub fn config(&self) -> &EstimatorConfig {
        &self.cfg
    }

    pub fn params(&self) -> &ParamStore {
        &self.store
    }

    pub fn params_mut(&mut self) -> &mut ParamStore {
        &mut self.store
    }

    pub fn gcn_weight(&self) -> &Tensor {
        self.store.get(self.gcn.weight)
    }

    /// Outcome on the model's internal standardized scale.
    pub fn standardize_y(&self, y: &[f64]) -> Vec<f64> {
        y.iter().map(|v| (v - self.y_mean) / self.y_scale).collect()
    }

    /// Aggregation over `ds`'s own graph (inductive for unseen subgraphs).
    pub fn prepare(&self, ds: &NetworkDataset) -> Result<Prepared> {
        if let Some(i) = ds.graph.first_isolated() {
            return Err(Error::IsolatedUnit(i));
        }
        let x = self.scaler.apply(&ds.features)?;
        let ax = Tensor::new(
            x.rows(),
            x.cols(),
            ds.graph.gcn_propagate(x.data(), x.cols()),
        )?;
        Ok(Prepared {
            x,
            ax,
            t: ds.t.clone(),
            z: ds.z.clone(),
        })
    }

    fn representation_var(&self, tape: &mut Tape, params: &[Var], prep: &Prepared) -> Result<Var> {
        let x = tape.leaf(prep.x.clone());
        let ax = tape.leaf(prep.ax.clone());
        let pre = self.gcn.forward(tape, params, ax)?;
        let neigh = tape.sigmoid(pre)?;
        let agg = tape.concat(x, neigh)?;
        Ok(self.phi.forward(tape, params, agg)?)
    }

    fn outcome_var(
        &self,
        tape: &mut Tape,
        params: &[Var],
        r: Var,
        t: &[f64],
        z: &[f64],
    ) -> Result<Var> {
        let pair: Vec<f64> = t.iter().zip(z).flat_map(|(&t, &z)| [t, z]).collect();
        let pair = tape.leaf(Tensor::new(t.len(), 2, pair)?);
        let input = tape.concat(r, pair)?;
        Ok(self.head.forward(tape, params, input)?)
    }

    pub fn representation(&self, prep: &Prepared) -> Result<Tensor> {
        let mut tape = Tape::new();
        let params = self.store.bind(&mut tape);
        let r = self.representation_var(&mut tape, &params, prep)?;
        Ok(tape.value(r).clone())
    }

    /// Predicted outcomes (original scale) of every unit under `(t, z)`.
    pub fn predict_outcomes(&self, prep: &Prepared, t: &[f64], z: &[f64]) -> Result<Vec<f64>> {
        check_pairs(t, z, prep.x.rows())?;
        let mut tape = Tape::new();
        let params = self.store.bind(&mut tape);
        let r = self.representation_var(&mut tape, &params, prep)?;
        let y = self.outcome_var(&mut tape, &params, r, t, z)?;
        Ok(tape
            .value(y)
            .data()
            .iter()
            .map(|v| v * self.y_scale + self.y_mean)
            .collect())
    }

    pub fn bind<'a>(&'a self, ds: &NetworkDataset) -> Result<BoundModel<'a>> {
        Ok(BoundModel {
            model: self,
            prep: self.prepare(ds)?,
        })
    }
}

fn check_pairs(t: &[f64], z: &[f64], n: usize) -> Result<()> {
    if t.len() != n {
        return Err(Error::LengthMismatch(t.len(), n));
    }
    if z.len() != n {
        return Err(Error::LengthMismatch(z.len(), n));
    }
    if let Some(&bad) = z.iter().find(|v| !(0.0..=1.0).contains(*v)) {
        return Err(Error::OutOfRangeExposure(bad));
    }
    if let Some(&bad) = t.iter().find(|&&v| v != 0.0 && v != 1.0) {
        return Err(Error::Config(format!("treatment {bad} is not binary")));
    }
    Ok(())
}

/// Anything that yields per-unit potential outcomes for a treatment pair.
pub trait PotentialOutcomes {
    fn n_units(&self) -> usize;
    fn outcomes(&self, t: &[f64], z: &[f64]) -> Result<Vec<f64>>;
}

/// A trained model attached to one dataset's features and graph.
#[derive(Debug, Clone)]
pub struct BoundModel<'a> {
    pub model: &'a EstimatorModel,
    pub prep: Prepared,
}

impl PotentialOutcomes for BoundModel<'_> {
    fn n_units(&self) -> usize {
        self.prep.x.rows()
    }

    fn outcomes(&self, t: &[f64], z: &[f64]) -> Result<Vec<f64>> {
        self.model.predict_outcomes(&self.prep, t, z)
    }
}

impl PotentialOutcomes for Oracle {
    fn n_units(&self) -> usize {
        self.len()
    }

    fn outcomes(&self, t: &[f64], z: &[f64]) -> Result<Vec<f64>> {
        check_pairs(t, z, self.len())?;
        Ok((0..self.len())
            .map(|i| self.outcome(i, t[i], z[i]))
            .collect())
    }
}

/// Treatment pair `(t, z)` applied to every unit.
pub type Pair = (f64, f64);

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Effect {
    Main,
    Spillover,
    Total,
}

impl Effect {
    pub const ALL: [Effect; 3] = [Effect::Main, Effect::Spillover, Effect::Total];

    /// `(treated pair, baseline pair)` evaluated for this effect.
    pub fn pairs(self) -> (Pair, Pair) {
        match self {
            Effect::Main => ((1.0, 0.0), (0.0, 0.0)),
            Effect::Spillover => ((0.0, 1.0), (0.0, 0.0)),
            Effect::Total => ((1.0, 1.0), (0.0, 0.0)),
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Effect::Main => "main",
            Effect::Spillover => "spillover",
            Effect::Total => "total",
        }
    }
}

impl fmt::Display for Effect {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

/// Per-unit `y(t, z) - y(t', z')`.
pub fn predict_ite(p: &impl PotentialOutcomes, pairs: (Pair, Pair)) -> Result<Vec<f64>> {
    let n = p.n_units();
    let ((t1, z1), (t0, z0)) = pairs;
    let a = p.outcomes(&vec![t1; n], &vec![z1; n])?;
    let b = p.outcomes(&vec![t0; n], &vec![z0; n])?;
    Ok(a.iter().zip(&b).map(|(a, b)| a - b).collect())
}

/// RMSE against the oracle at the flipped pair `(1 - t_i, 1 - z_i)`.
pub fn counterfactual_rmse(p: &impl PotentialOutcomes, ds: &NetworkDataset) -> Result<f64> {
    let oracle = ds.oracle.as_ref().ok_or(Error::MissingOracle)?;
    let t: Vec<f64> = ds.t.iter().map(|v| 1.0 - v).collect();
    let z: Vec<f64> = ds.z.iter().map(|v| 1.0 - v).collect();
    let truth = oracle.outcomes(&t, &z)?;
    let pred = p.outcomes(&t, &z)?;
    if truth.len() != pred.len() {
        return Err(Error::LengthMismatch(pred.len(), truth.len()));
    }
    let mse = truth
        .iter()
        .zip(&pred)
        .map(|(a, b)| (a - b).powi(2))
        .sum::<f64>()
        / truth.len() as f64;
    Ok(mse.sqrt())
}

/// Rows and pairing used by one evaluation of the Wasserstein term: the
/// factual side takes `rows`; the product side pairs `rows[k]`'s
/// representation with the treatment pair of `rows[perm[k]]`.
#[derive(Debug, Clone, PartialEq)]
pub struct WassBatch {
    pub rows: Vec<usize>,
    pub perm: Vec<usize>,
}

impl WassBatch {
    pub fn draw(n: usize, size: usize, rng: &mut ChaCha8Rng) -> Self {
        let m = size.min(n);
        let mut rows = index::sample(rng, n, m).into_vec();
        rows.sort_unstable();
        let mut perm: Vec<usize> = (0..m).collect();
        perm.shuffle(rng);
        Self { rows, perm }
    }
}

/// Loss value, its parts and parameter gradients.
#[derive(Debug, Clone)]
pub struct LossParts {
    pub total: f64,
    pub factual: f64,
    pub wasserstein: Option<f64>,
    pub sinkhorn_violation: Option<f64>,
    pub grads: Vec<Tensor>,
}

/// `sum_i w_i (y_i - h(r_i, t_i, z_i))^2 + lambda W`, with `y` standardized,
/// `weights` summing to one and held constant. The Wasserstein term is only
/// evaluated when `batch` is given and `lambda > 0`.
pub fn loss_ly(
    model: &EstimatorModel,
    prep: &Prepared,
    y_std: &[f64],
    weights: &[f64],
    lambda: f64,
    batch: Option<&WassBatch>,
    sinkhorn: &SinkhornConfig,
) -> Result<LossParts> {
    let n = prep.x.rows();
    if y_std.len() != n {
        return Err(Error::LengthMismatch(y_std.len(), n));
    }
    if weights.len() != n {
        return Err(Error::LengthMismatch(weights.len(), n));
    }
    let mut tape = Tape::new();
    let params = model.store.bind(&mut tape);
    let r = model.representation_var(&mut tape, &params, prep)?;
    let yhat = model.outcome_var(&mut tape, &params, r, &prep.t, &prep.z)?;
    let target = tape.leaf(Tensor::column(y_std.to_vec()));
    let diff = tape.sub(yhat, target)?;
    let sq = tape.square(diff)?;
    let factual = tape.weighted_sum(sq, Tensor::column(weights.to_vec()))?;
    let mut total = factual;
    let mut wasserstein = None;
    let mut violation = None;
    if let (Some(batch), true) = (batch, lambda > 0.0) {
        let (w, out_violation) = wasserstein_var(
            &mut tape,
            r,
            prep,
            weights,
            batch,
            sinkhorn,
            model.cfg.hidden,
        )?;
        let scaled = tape.scale(w, lambda)?;
        total = tape.add(factual, scaled)?;
        wasserstein = Some(tape.value(w).item());
        violation = Some(out_violation);
    }
    let grads = tape.backward(total)?;
    Ok(LossParts {
        total: tape.value(total).item(),
        factual: tape.value(factual).item(),
        wasserstein,
        sinkhorn_violation: violation,
        grads: params.iter().map(|&p| grads.wrt(p)).collect(),
    })
}

/// Joint points of a batch: standardized representation scaled so that its
/// total variance is one, next to the treatment pair.
fn wasserstein_var(
    tape: &mut Tape,
    r: Var,
    prep: &Prepared,
    weights: &[f64],
    batch: &WassBatch,
    sinkhorn: &SinkhornConfig,
    hidden: usize,
) -> Result<(Var, f64)> {
    let m = batch.rows.len();
    let sub = tape.select_rows(r, &batch.rows)?;
    let std = tape.standardize_cols(sub, 1e-8)?;
    let rs = tape.scale(std, 1.0 / (hidden as f64).sqrt())?;
    let pair_of = |k: usize| [prep.t[batch.rows[k]], prep.z[batch.rows[k]]];
    let factual: Vec<f64> = (0..m).flat_map(pair_of).collect();
    let permuted: Vec<f64> = batch.perm.iter().flat_map(|&k| pair_of(k)).collect();
    let fa = tape.leaf(Tensor::new(m, 2, factual)?);
    let fb = tape.leaf(Tensor::new(m, 2, permuted)?);
    let pa = tape.concat(rs, fa)?;
    let pb = tape.concat(rs, fb)?;
    let mut mass_a: Vec<f64> = batch.rows.iter().map(|&i| weights[i]).collect();
    let total: f64 = mass_a.iter().sum();
    mass_a.iter_mut().for_each(|w| *w /= total);
    let mass_b = vec![1.0 / m as f64; m];
    let out = sinkhorn_divergence(tape.value(pa), &mass_a, tape.value(pb), &mass_b, sinkhorn)?;
    let w = tape.custom_scalar(
        out.divergence,
        vec![pa, pb],
        vec![out.grad_a_points, out.grad_b_points],
    )?;
    Ok((w, out.violation))
}

/// One row of the training log. Optional fields are absent when the
/// quantity is not computed for the variant or epoch.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    pub epoch: usize,
    pub factual_loss: f64,
    pub wasserstein: Option<f64>,
    pub total_loss: f64,
    pub propensity_t_loss: Option<f64>,
    pub propensity_z_loss: Option<f64>,
    /// HSIC between unit features and `(t, z)`, uniform weights.
    pub hsic_raw: Option<f64>,
    /// Same with the current balancing weights.
    pub hsic_weighted: Option<f64>,
    /// HSIC between the representation and `(t, z)` with the current weights.
    pub hsic_representation: Option<f64>,
}

#[derive(Debug, Clone)]
pub struct PropensityPair {
    pub e: IndividualPSModel,
    pub phi: NeighborhoodPSModel,
}

impl PropensityPair {
    pub fn weights(&self, ds: &NetworkDataset) -> Result<BalancingWeights> {
        let inputs = propensity_inputs(&ds.features, &ds.graph)?;
        balancing_weights(&self.e, &self.phi, &inputs, &ds.t, &ds.z)
    }
}

#[derive(Debug, Clone)]
pub struct TrainOutput {
    pub model: EstimatorModel,
    pub log: Vec<EpochLog>,
    /// Weights on the training units after the last refresh.
    pub weights: BalancingWeights,
    pub propensity: Option<PropensityPair>,
}

impl TrainOutput {
    /// Weights the variant uses on another split: model-based for
    /// reweighting variants, uniform otherwise.
    pub fn weights_for(&self, ds: &NetworkDataset) -> Result<BalancingWeights> {
        match &self.propensity {
            Some(p) => p.weights(ds),
            None => Ok(BalancingWeights::uniform(ds.n_units())),
        }
    }

    /// Weighted factual squared error on `ds` in the original outcome scale.
    pub fn weighted_factual_loss(&self, ds: &NetworkDataset) -> Result<f64> {
        let bound = self.model.bind(ds)?;
        let pred = bound.outcomes(&ds.t, &ds.z)?;
        let w = self.weights_for(ds)?;
        Ok(pred
            .iter()
            .zip(&ds.y)
            .zip(&w.normalized)
            .map(|((p, y), w)| w * (p - y).powi(2))
            .sum())
    }
}

/// Largest number of units the HSIC diagnostics look at.
pub const HSIC_ROWS: usize = 2000;

/// Standardized `[x | neighbor mean of x]` and the rows the HSIC
/// diagnostics use (all units up to `HSIC_ROWS`, else a seeded sample).
pub fn diagnostic_inputs(ds: &NetworkDataset, seed: u64) -> Result<(Tensor, Vec<usize>)> {
    let n = ds.n_units();
    let inputs = propensity_inputs(&ds.features, &ds.graph)?;
    let features = ColumnScaler::fit(&inputs).apply(&inputs)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(23);
    let mut rows = index::sample(&mut rng, n, n.min(HSIC_ROWS)).into_vec();
    rows.sort_unstable();
    Ok((features, rows))
}

impl TrainOutput {
    /// HSIC diagnostics of the trained model on `ds` with the variant's weights.
    pub fn hsic(&self, ds: &NetworkDataset) -> Result<HsicDiagnostics> {
        let (features, rows) = diagnostic_inputs(ds, self.model.cfg.seed)?;
        let prep = self.model.prepare(ds)?;
        let w = self.weights_for(ds)?;
        hsic_diagnostics(&self.model, &prep, &features, &w.normalized, &rows)
    }
}

fn aborted(epoch: usize, stage: &str, err: Error) -> Error {
    Error::Training(format!("epoch {epoch}, {stage}: {err}"))
}

/// Alternating schedule: per outer iteration, `k1` steps on each propensity
/// loss (reweighting variants only), a weight refresh, then `k2` steps on
/// the outcome loss.
pub fn train(ds: &NetworkDataset, cfg: &EstimatorConfig) -> Result<TrainOutput> {
    cfg.validate()?;
    ds.validate()?;
    let n = ds.n_units();
    let mut model = EstimatorModel::new(ds, cfg);
    let prep = model.prepare(ds)?;
    let y_std = model.standardize_y(&ds.y);
    let mut adam = Adam::new(&model.store, cfg.lr);
    let lambda = cfg.effective_lambda();

    let mut propensity = None;
    let mut prop_data = None;
    if cfg.variant.reweights() {
        let inputs = propensity_inputs(&ds.features, &ds.graph)?;
        let pcfg = PropensityConfig {
            seed: cfg.seed,
            ..cfg.propensity
        };
        let (fit, hold) = holdout_split(n, pcfg.holdout, pcfg.seed);
        let pick = |v: &[f64], rows: &[usize]| rows.iter().map(|&r| v[r]).collect::<Vec<_>>();
        prop_data = Some((
            inputs.select_rows(&fit),
            pick(&ds.t, &fit),
            pick(&ds.z, &fit),
            inputs.select_rows(&hold),
            pick(&ds.t, &hold),
            pick(&ds.z, &hold),
            inputs.clone(),
        ));
        propensity = Some(PropensityPair {
            e: IndividualPSModel::new(&inputs, &pcfg),
            phi: NeighborhoodPSModel::new(&inputs, &pcfg),
        });
    }

    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    rng.set_stream(22);
    let (diag_features, diag_rows) = diagnostic_inputs(ds, cfg.seed)?;

    let mut weights = BalancingWeights::uniform(n);
    let mut log = Vec::with_capacity(cfg.epochs);
    let mut worst_violation: f64 = 0.0;
    for epoch in 0..cfg.epochs {
        let (mut lt, mut lz) = (None, None);
        if let (Some(p), Some((xf, tf, zf, xh, th, zh, all))) =
            (propensity.as_mut(), prop_data.as_ref())
        {
            for _ in 0..cfg.k1 {
                lt = Some(p.e.step(xf, tf).map_err(|e| aborted(epoch, "L_T", e))?);
                lz = Some(p.phi.step(xf, zf).map_err(|e| aborted(epoch, "L_Z", e))?);
            }
            if !th.is_empty() {
                p.e.track_holdout(xh, th)?;
                p.phi.track_holdout(xh, zh)?;
            }
            weights = balancing_weights(&p.e, &p.phi, all, &ds.t, &ds.z)?;
            let sum: f64 = weights.normalized.iter().sum();
            if (sum - 1.0).abs() > 1e-9 {
                return Err(aborted(
                    epoch,
                    "weights",
                    Error::Config(format!("weights sum to {sum}")),
                ));
            }
        }
        let mut parts = None;
        for _ in 0..cfg.k2 {
            let batch = (lambda > 0.0).then(|| WassBatch::draw(n, cfg.wass_batch, &mut rng));
            let p = loss_ly(
                &model,
                &prep,
                &y_std,
                &weights.normalized,
                lambda,
                batch.as_ref(),
                &cfg.sinkhorn,
            )
            .map_err(|e| aborted(epoch, "L_Y", e))?;
            if !p.total.is_finite() {
                return Err(aborted(
                    epoch,
                    "L_Y",
                    Error::Config(format!("loss {}", p.total)),
                ));
            }
            worst_violation = worst_violation.max(p.sinkhorn_violation.unwrap_or(0.0));
            adam.step(&mut model.store, &p.grads)?;
            parts = Some(p);
        }
        let diag =
            if cfg.diag_stride > 0 && (epoch % cfg.diag_stride == 0 || epoch + 1 == cfg.epochs) {
                Some(hsic_diagnostics(
                    &model,
                    &prep,
                    &diag_features,
                    &weights.normalized,
                    &diag_rows,
                )?)
            } else {
                None
            };
        let parts = parts.unwrap_or(LossParts {
            total: f64::NAN,
            factual: f64::NAN,
            wasserstein: None,
            sinkhorn_violation: None,
            grads: Vec::new(),
        });
        log.push(EpochLog {
            epoch,
            factual_loss: parts.factual,
            wasserstein: parts.wasserstein,
            total_loss: parts.total,
            propensity_t_loss: lt,
            propensity_z_loss: lz,
            hsic_raw: diag.map(|d| d.raw),
            hsic_weighted: diag.map(|d| d.weighted),
            hsic_representation: diag.map(|d| d.representation),
        });
    }
    if worst_violation > 1e-4 {
        log::warn!("sinkhorn marginal violation reached {worst_violation:.3e} during training");
    }
    Ok(TrainOutput {
        model,
        log,
        weights,
        propensity,
    })
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct HsicDiagnostics {
    pub raw: f64,
    pub weighted: f64,
    pub representation: f64,
}

/// Dependence between `(t, z)` and the features (with uniform and with
/// balancing weights) and between `(t, z)` and the representation, on `rows`.
pub fn hsic_diagnostics(
    model: &EstimatorModel,
    prep: &Prepared,
    features: &Tensor,
    weights: &[f64],
    rows: &[usize],
) -> Result<HsicDiagnostics> {
    let r = model.representation(prep)?.select_rows(rows);
    let x = features.select_rows(rows);
    let pairs: Vec<f64> = rows.iter().flat_map(|&i| [prep.t[i], prep.z[i]]).collect();
    let pairs = Tensor::new(rows.len(), 2, pairs)?;
    let uniform = vec![1.0 / rows.len() as f64; rows.len()];
    let mut w: Vec<f64> = rows.iter().map(|&i| weights[i]).collect();
    let total: f64 = w.iter().sum();
    w.iter_mut().for_each(|v| *v /= total);
    Ok(HsicDiagnostics {
        raw: hsic(&x, &pairs, &uniform)?,
        weighted: hsic(&x, &pairs, &w)?,
        representation: hsic(&r, &pairs, &w)?,
    })
}
