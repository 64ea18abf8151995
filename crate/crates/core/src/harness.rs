//! Experiment orchestration: data generation or loading, partitioning,
//! training every variant across interference degrees and seeds, and
//! aggregation into metric tables and plot-ready CSV files.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::balance::SinkhornConfig;
use crate::error::{Error, Result};
use crate::estimator::{
    counterfactual_rmse, predict_ite, train, Effect, EpochLog, EstimatorConfig, EstimatorModel,
    PotentialOutcomes, Variant,
};
use crate::graph::{partition_three_way, Graph, Split};
use crate::synth::{fmt_f64, generate, GenConfig, NetworkDataset};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum DataSource {
    /// Seeded small-world graph with synthetic features.
    Generate {
        n_units: usize,
        mean_degree: usize,
        rewire: f64,
    },
    /// Dataset directory written by `NetworkDataset::save`. The k list is
    /// ignored; the dataset's own k labels the results.
    Load { path: PathBuf },
}

impl Default for DataSource {
    fn default() -> Self {
        DataSource::Generate {
            n_units: 2000,
            mean_degree: 10,
            rewire: 0.1,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ExperimentConfig {
    pub source: DataSource,
    /// Generator template; `k` and `seed` are set per run.
    pub generator: GenConfig,
    pub k: Vec<f64>,
    pub variants: Vec<Variant>,
    pub seeds: usize,
    pub master_seed: u64,
    /// Candidate Wasserstein strengths for the representation-balancing
    /// variants, chosen per (variant, k) on the validation split of the
    /// first seed.
    pub lambda_grid: Vec<f64>,
    /// Train / validation / test fractions.
    pub fractions: [f64; 3],
    pub output: PathBuf,
    /// Estimator template; `variant`, `lambda` and `seed` are set per run.
    pub estimator: EstimatorConfig,
    /// Runs executed concurrently.
    pub jobs: usize,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            source: DataSource::default(),
            generator: GenConfig::default(),
            k: vec![0.5, 1.0, 1.5],
            variants: Variant::ALL.to_vec(),
            seeds: 5,
            master_seed: 0,
            lambda_grid: vec![0.1, 0.2, 0.5],
            fractions: [0.6, 0.2, 0.2],
            output: PathBuf::from("results"),
            estimator: EstimatorConfig {
                wass_batch: 64,
                sinkhorn: SinkhornConfig {
                    eps: 0.1,
                    max_iters: 50,
                    tol: 1e-6,
                    ..SinkhornConfig::default()
                },
                diag_stride: 50,
                ..EstimatorConfig::default()
            },
            jobs: 1,
        }
    }
}

impl ExperimentConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| Error::Parse(e.to_string()))
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_toml(&std::fs::read_to_string(path)?)
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn validate(&self) -> Result<()> {
        if self.variants.is_empty() || self.k.is_empty() || self.seeds == 0 {
            return Err(Error::Config(
                "need at least one variant, one k and one seed".into(),
            ));
        }
        if self.lambda_grid.is_empty() || self.lambda_grid.iter().any(|&l| !(l >= 0.0)) {
            return Err(Error::Config(
                "lambda_grid must be non-empty and non-negative".into(),
            ));
        }
        if self.k.iter().any(|k| !k.is_finite()) {
            return Err(Error::Config("k values must be finite".into()));
        }
        if self.fractions.iter().any(|&f| !(f > 0.0))
            || (self.fractions.iter().sum::<f64>() - 1.0).abs() > 1e-9
        {
            return Err(Error::BadFractions(format!("{:?}", self.fractions)));
        }
        self.estimator.validate()
    }

    /// Seed of the `index`-th repetition.
    pub fn seed(&self, index: usize) -> u64 {
        self.master_seed.wrapping_add(index as u64)
    }
}

/// Root mean square of `estimates - truths`.
pub fn pehe(estimates: &[f64], truths: &[f64]) -> Result<f64> {
    if estimates.len() != truths.len() {
        return Err(Error::LengthMismatch(estimates.len(), truths.len()));
    }
    if estimates.is_empty() {
        return Ok(0.0);
    }
    let sq: f64 = estimates
        .iter()
        .zip(truths)
        .map(|(a, b)| (a - b).powi(2))
        .sum();
    Ok((sq / estimates.len() as f64).sqrt())
}

/// Evaluation split of the harness tables.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum EvalSplit {
    /// Training subgraph.
    Within,
    /// Held-out test subgraph.
    Out,
}

impl EvalSplit {
    pub const ALL: [EvalSplit; 2] = [EvalSplit::Within, EvalSplit::Out];

    pub fn name(self) -> &'static str {
        match self {
            EvalSplit::Within => "within",
            EvalSplit::Out => "out",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EffectErrors {
    pub main: f64,
    pub spillover: f64,
    pub total: f64,
}

impl EffectErrors {
    pub fn get(&self, effect: Effect) -> f64 {
        match effect {
            Effect::Main => self.main,
            Effect::Spillover => self.spillover,
            Effect::Total => self.total,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SplitMetrics {
    pub pehe: EffectErrors,
    pub rmse: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct HsicRecord {
    pub raw: f64,
    pub weighted: f64,
    pub representation: f64,
}

/// Everything recorded about one (variant, k, seed, lambda) run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunResult {
    pub run_id: String,
    pub variant: Variant,
    pub k: f64,
    pub seed_index: usize,
    pub seed: u64,
    pub lambda: f64,
    /// Units per train / valid / test part after dropping isolated ones.
    pub units: [usize; 3],
    /// Units dropped per part because the induced subgraph left them isolated.
    pub dropped: [usize; 3],
    pub within: SplitMetrics,
    pub out: SplitMetrics,
    pub valid_loss: f64,
    pub hsic: HsicRecord,
    pub log: Vec<EpochLog>,
}

impl RunResult {
    pub fn metrics(&self, split: EvalSplit) -> &SplitMetrics {
        match split {
            EvalSplit::Within => &self.within,
            EvalSplit::Out => &self.out,
        }
    }
}

/// A run that could not complete.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MissingRun {
    pub variant: Variant,
    pub k: f64,
    pub seed_index: usize,
    pub lambda: f64,
    pub reason: String,
    pub message: String,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Stats {
    pub n: usize,
    pub mean: Option<f64>,
    /// Sample standard deviation; 0 for a single value.
    pub sd: Option<f64>,
    pub median: Option<f64>,
}

impl Stats {
    pub fn of(values: &[f64]) -> Self {
        let n = values.len();
        if n == 0 {
            return Stats {
                n,
                mean: None,
                sd: None,
                median: None,
            };
        }
        let mean = values.iter().sum::<f64>() / n as f64;
        let sd = if n > 1 {
            (values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1) as f64).sqrt()
        } else {
            0.0
        };
        Stats {
            n,
            mean: Some(mean),
            sd: Some(sd),
            median: Some(median(values)),
        }
    }
}

pub fn median(values: &[f64]) -> f64 {
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n == 0 {
        f64::NAN
    } else if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PeheCell {
    pub k: f64,
    pub split: EvalSplit,
    pub effect: Effect,
    pub variant: Variant,
    pub stats: Stats,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RmseCell {
    pub k: f64,
    pub split: EvalSplit,
    pub variant: Variant,
    pub stats: Stats,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
pub enum HsicSetting {
    /// Features against `(t, z)` with uniform weights.
    #[serde(rename = "raw")]
    Raw,
    /// Features against `(t, z)` under the `reweight` variant's weights.
    #[serde(rename = "reweighted")]
    Reweighted,
    /// Representation of the `both` variant against `(t, z)` under its weights.
    #[serde(rename = "reweighted+repre")]
    ReweightedRepre,
}

impl HsicSetting {
    pub const ALL: [HsicSetting; 3] = [
        HsicSetting::Raw,
        HsicSetting::Reweighted,
        HsicSetting::ReweightedRepre,
    ];

    pub fn name(self) -> &'static str {
        match self {
            HsicSetting::Raw => "raw",
            HsicSetting::Reweighted => "reweighted",
            HsicSetting::ReweightedRepre => "reweighted+repre",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HsicCell {
    pub k: f64,
    pub setting: HsicSetting,
    pub stats: Stats,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SelectedLambda {
    pub variant: Variant,
    pub k: f64,
    pub lambda: f64,
    pub valid_loss: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ResultsTable {
    pub pehe: Vec<PeheCell>,
    pub rmse: Vec<RmseCell>,
    pub hsic: Vec<HsicCell>,
    pub selected: Vec<SelectedLambda>,
    pub missing: Vec<MissingRun>,
}

impl ResultsTable {
    /// Aggregates per-run results over seeds. `runs` must already be
    /// restricted to the selected lambda per (variant, k).
    pub fn aggregate(
        ks: &[f64],
        variants: &[Variant],
        runs: &[RunResult],
        selected: Vec<SelectedLambda>,
        missing: Vec<MissingRun>,
    ) -> Self {
        let cell_runs = |k: f64, v: Variant| -> Vec<&RunResult> {
            let mut rs: Vec<&RunResult> = runs
                .iter()
                .filter(|r| same_k(r.k, k) && r.variant == v)
                .collect();
            rs.sort_by_key(|r| r.seed_index);
            rs
        };
        let mut pehe = Vec::new();
        let mut rmse = Vec::new();
        for &k in ks {
            for split in EvalSplit::ALL {
                for &variant in variants {
                    let rs = cell_runs(k, variant);
                    for effect in Effect::ALL {
                        let vals: Vec<f64> = rs
                            .iter()
                            .map(|r| r.metrics(split).pehe.get(effect))
                            .collect();
                        pehe.push(PeheCell {
                            k,
                            split,
                            effect,
                            variant,
                            stats: Stats::of(&vals),
                        });
                    }
                    let vals: Vec<f64> = rs.iter().map(|r| r.metrics(split).rmse).collect();
                    rmse.push(RmseCell {
                        k,
                        split,
                        variant,
                        stats: Stats::of(&vals),
                    });
                }
            }
        }
        let mut hsic = Vec::new();
        for &k in ks {
            for setting in HsicSetting::ALL {
                let vals: Option<Vec<f64>> = match setting {
                    HsicSetting::Raw => {
                        // Identical across variants for a given seed; take one per seed.
                        let mut by_seed = BTreeMap::new();
                        for v in variants {
                            for r in cell_runs(k, *v) {
                                by_seed.entry(r.seed_index).or_insert(r.hsic.raw);
                            }
                        }
                        (!variants.is_empty()).then(|| by_seed.into_values().collect())
                    }
                    HsicSetting::Reweighted => variants.contains(&Variant::Reweight).then(|| {
                        cell_runs(k, Variant::Reweight)
                            .iter()
                            .map(|r| r.hsic.weighted)
                            .collect()
                    }),
                    HsicSetting::ReweightedRepre => variants.contains(&Variant::Both).then(|| {
                        cell_runs(k, Variant::Both)
                            .iter()
                            .map(|r| r.hsic.representation)
                            .collect()
                    }),
                };
                if let Some(vals) = vals {
                    hsic.push(HsicCell {
                        k,
                        setting,
                        stats: Stats::of(&vals),
                    });
                }
            }
        }
        ResultsTable {
            pehe,
            rmse,
            hsic,
            selected,
            missing,
        }
    }

    pub fn pehe_cell(
        &self,
        k: f64,
        split: EvalSplit,
        effect: Effect,
        variant: Variant,
    ) -> Option<&PeheCell> {
        self.pehe.iter().find(|c| {
            same_k(c.k, k) && c.split == split && c.effect == effect && c.variant == variant
        })
    }

    pub fn rmse_cell(&self, k: f64, split: EvalSplit, variant: Variant) -> Option<&RmseCell> {
        self.rmse
            .iter()
            .find(|c| same_k(c.k, k) && c.split == split && c.variant == variant)
    }

    pub fn hsic_cell(&self, k: f64, setting: HsicSetting) -> Option<&HsicCell> {
        self.hsic
            .iter()
            .find(|c| same_k(c.k, k) && c.setting == setting)
    }
}

fn same_k(a: f64, b: f64) -> bool {
    a.to_bits() == b.to_bits()
}

fn opt(v: Option<f64>) -> String {
    v.map(fmt_f64).unwrap_or_default()
}

pub const PEHE_HEADER: &str = "k,split,effect,variant,mean,sd,n_runs";
pub const RMSE_HEADER: &str = "k,split,variant,mean,sd,n_runs";
pub const FIG_RMSE_HEADER: &str = "k,split,variant,mean,sd";
pub const FIG_HSIC_HEADER: &str = "k,setting,mean,sd,median,n_runs";
pub const DIAGNOSTICS_HEADER: &str =
    "run_id,variant,k,seed,lambda,epoch,factual_loss,wasserstein,total_loss,\
propensity_t_loss,propensity_z_loss,hsic_raw,hsic_weighted,hsic_representation";
pub const MISSING_HEADER: &str = "variant,k,seed_index,lambda,reason,message";
pub const LAMBDA_HEADER: &str = "variant,k,lambda,valid_loss";

pub fn pehe_csv(table: &ResultsTable) -> String {
    let mut s = format!("{PEHE_HEADER}\n");
    for c in &table.pehe {
        let st = &c.stats;
        writeln!(
            s,
            "{},{},{},{},{},{},{}",
            fmt_f64(c.k),
            c.split.name(),
            c.effect.name(),
            c.variant,
            opt(st.mean),
            opt(st.sd),
            st.n
        )
        .unwrap();
    }
    s
}

pub fn rmse_csv(table: &ResultsTable) -> String {
    let mut s = format!("{RMSE_HEADER}\n");
    for c in &table.rmse {
        let st = &c.stats;
        writeln!(
            s,
            "{},{},{},{},{},{}",
            fmt_f64(c.k),
            c.split.name(),
            c.variant,
            opt(st.mean),
            opt(st.sd),
            st.n
        )
        .unwrap();
    }
    s
}

/// Counterfactual RMSE against k, one row per (k, split, variant) among
/// `variants`.
pub fn fig_rmse_csv(table: &ResultsTable, variants: &[Variant]) -> String {
    let mut s = format!("{FIG_RMSE_HEADER}\n");
    for c in table.rmse.iter().filter(|c| variants.contains(&c.variant)) {
        writeln!(
            s,
            "{},{},{},{},{}",
            fmt_f64(c.k),
            c.split.name(),
            c.variant,
            opt(c.stats.mean),
            opt(c.stats.sd)
        )
        .unwrap();
    }
    s
}

/// HSIC per setting. The reweighted rows need the `reweight` variant and
/// the reweighted+repre rows need `both`; raw rows need any variant.
pub fn fig_hsic_csv(table: &ResultsTable, variants: &[Variant]) -> String {
    let mut s = format!("{FIG_HSIC_HEADER}\n");
    for c in &table.hsic {
        let shown = match c.setting {
            HsicSetting::Raw => !variants.is_empty(),
            HsicSetting::Reweighted => variants.contains(&Variant::Reweight),
            HsicSetting::ReweightedRepre => variants.contains(&Variant::Both),
        };
        if shown {
            let st = &c.stats;
            writeln!(
                s,
                "{},{},{},{},{},{}",
                fmt_f64(c.k),
                c.setting.name(),
                opt(st.mean),
                opt(st.sd),
                opt(st.median),
                st.n
            )
            .unwrap();
        }
    }
    s
}

pub fn diagnostics_csv(runs: &[RunResult]) -> String {
    let mut s = format!("{DIAGNOSTICS_HEADER}\n");
    for r in runs {
        for e in &r.log {
            writeln!(
                s,
                "{},{},{},{},{},{},{},{},{},{},{},{},{},{}",
                r.run_id,
                r.variant,
                fmt_f64(r.k),
                r.seed,
                fmt_f64(r.lambda),
                e.epoch,
                fmt_f64(e.factual_loss),
                opt(e.wasserstein),
                fmt_f64(e.total_loss),
                opt(e.propensity_t_loss),
                opt(e.propensity_z_loss),
                opt(e.hsic_raw),
                opt(e.hsic_weighted),
                opt(e.hsic_representation)
            )
            .unwrap();
        }
    }
    s
}

pub fn missing_csv(table: &ResultsTable) -> String {
    let mut s = format!("{MISSING_HEADER}\n");
    for m in &table.missing {
        let message = m.message.replace(['"', '\n'], " ");
        writeln!(
            s,
            "{},{},{},{},{},\"{}\"",
            m.variant,
            fmt_f64(m.k),
            m.seed_index,
            fmt_f64(m.lambda),
            m.reason,
            message
        )
        .unwrap();
    }
    s
}

pub fn lambda_csv(table: &ResultsTable) -> String {
    let mut s = format!("{LAMBDA_HEADER}\n");
    for l in &table.selected {
        writeln!(
            s,
            "{},{},{},{}",
            l.variant,
            fmt_f64(l.k),
            fmt_f64(l.lambda),
            opt(l.valid_loss)
        )
        .unwrap();
    }
    s
}

/// Writes the two figure CSVs (`fig_rmse.csv`, `fig_hsic.csv`) restricted
/// to `variants`.
pub fn emit_plot_data(table: &ResultsTable, variants: &[Variant], dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir)?;
    std::fs::write(dir.join("fig_rmse.csv"), fig_rmse_csv(table, variants))?;
    std::fs::write(dir.join("fig_hsic.csv"), fig_hsic_csv(table, variants))?;
    Ok(())
}

/// Writes every aggregated table and the per-epoch diagnostics.
pub fn write_tables(
    table: &ResultsTable,
    runs: &[RunResult],
    variants: &[Variant],
    dir: &Path,
) -> Result<()> {
    std::fs::create_dir_all(dir)?;
    std::fs::write(dir.join("pehe_table.csv"), pehe_csv(table))?;
    std::fs::write(dir.join("rmse_table.csv"), rmse_csv(table))?;
    std::fs::write(dir.join("missing.csv"), missing_csv(table))?;
    std::fs::write(dir.join("selected_lambda.csv"), lambda_csv(table))?;
    std::fs::write(dir.join("diagnostics.csv"), diagnostics_csv(runs))?;
    emit_plot_data(table, variants, dir)
}

/// The three evaluation subgraphs of one (k, seed) dataset.
#[derive(Debug, Clone)]
pub struct SplitData {
    pub train: NetworkDataset,
    pub valid: NetworkDataset,
    pub test: NetworkDataset,
    pub dropped: [usize; 3],
    pub k: f64,
}

impl SplitData {
    pub fn from_dataset(
        ds: &NetworkDataset,
        fractions: [f64; 3],
        seed: u64,
        k: f64,
    ) -> Result<Self> {
        let part = partition_three_way(&ds.graph, fractions, seed)?;
        let mut parts = Split::ALL.map(|s| ds.subset(&part.units(s)));
        for (s, (d, _)) in Split::ALL.iter().zip(&parts) {
            if d.n_units() == 0 {
                return Err(Error::Config(format!(
                    "{s} split is empty after dropping isolated units"
                )));
            }
        }
        let dropped = [parts[0].1.len(), parts[1].1.len(), parts[2].1.len()];
        let take =
            |p: &mut (NetworkDataset, Vec<usize>)| std::mem::replace(&mut p.0, empty_dataset());
        Ok(SplitData {
            train: take(&mut parts[0]),
            valid: take(&mut parts[1]),
            test: take(&mut parts[2]),
            dropped,
            k,
        })
    }

    pub fn units(&self) -> [usize; 3] {
        [
            self.train.n_units(),
            self.valid.n_units(),
            self.test.n_units(),
        ]
    }
}

fn empty_dataset() -> NetworkDataset {
    NetworkDataset {
        graph: Graph::new(0, &[]).expect("empty graph"),
        features: crate::tensor::Tensor::zeros(0, 0),
        t: Vec::new(),
        z: Vec::new(),
        y: Vec::new(),
        ps: None,
        oracle: None,
        meta: None,
    }
}

/// Dataset for repetition `seed` at interference degree `k`.
pub fn build_dataset(cfg: &ExperimentConfig, k: f64, seed: u64) -> Result<NetworkDataset> {
    match &cfg.source {
        DataSource::Generate {
            n_units,
            mean_degree,
            rewire,
        } => {
            let graph = Graph::small_world(*n_units, *mean_degree, *rewire, seed)?;
            generate(
                &graph,
                &GenConfig {
                    k,
                    seed,
                    ..cfg.generator.clone()
                },
            )
        }
        DataSource::Load { path } => NetworkDataset::load(path),
    }
}

/// k values that label the experiment's results.
pub fn effective_ks(cfg: &ExperimentConfig) -> Result<Vec<f64>> {
    match &cfg.source {
        DataSource::Generate { .. } => Ok(cfg.k.clone()),
        DataSource::Load { path } => {
            let ds = NetworkDataset::load(path)?;
            Ok(vec![ds.meta.map(|m| m.config.k).unwrap_or(f64::NAN)])
        }
    }
}

/// Per-run estimator configuration.
pub fn run_config(
    cfg: &ExperimentConfig,
    variant: Variant,
    lambda: f64,
    seed: u64,
) -> EstimatorConfig {
    EstimatorConfig {
        variant,
        lambda: if variant.balances_representation() {
            lambda
        } else {
            0.0
        },
        seed,
        ..cfg.estimator.clone()
    }
}

#[derive(Serialize)]
struct RunKey<'a> {
    source: &'a DataSource,
    generator: &'a GenConfig,
    fractions: [f64; 3],
    k: f64,
    estimator: &'a EstimatorConfig,
}

/// First 16 hex digits of the SHA-256 of the run's configuration.
pub fn run_id(cfg: &ExperimentConfig, k: f64, est: &EstimatorConfig) -> String {
    let key = RunKey {
        source: &cfg.source,
        generator: &cfg.generator,
        fractions: cfg.fractions,
        k,
        estimator: est,
    };
    let digest = Sha256::digest(serde_json::to_vec(&key).expect("run key serializes"));
    digest[..8].iter().fold(String::new(), |mut s, b| {
        write!(s, "{b:02x}").unwrap();
        s
    })
}

fn errors(p: &impl PotentialOutcomes, truth: &impl PotentialOutcomes) -> Result<EffectErrors> {
    let mut e = [0.0; 3];
    for (slot, effect) in e.iter_mut().zip(Effect::ALL) {
        *slot = pehe(
            &predict_ite(p, effect.pairs())?,
            &predict_ite(truth, effect.pairs())?,
        )?;
    }
    Ok(EffectErrors {
        main: e[0],
        spillover: e[1],
        total: e[2],
    })
}

/// Effect PEHEs and counterfactual RMSE of `model` on `ds` against its oracle.
pub fn evaluate(model: &EstimatorModel, ds: &NetworkDataset) -> Result<SplitMetrics> {
    let oracle = ds.oracle.as_ref().ok_or(Error::MissingOracle)?;
    let bound = model.bind(ds)?;
    Ok(SplitMetrics {
        pehe: errors(&bound, oracle)?,
        rmse: counterfactual_rmse(&bound, ds)?,
    })
}

/// Trains one configuration on the training part and evaluates it.
pub fn execute_run(
    cfg: &ExperimentConfig,
    data: &SplitData,
    variant: Variant,
    lambda: f64,
    seed_index: usize,
) -> Result<RunResult> {
    let seed = cfg.seed(seed_index);
    let est = run_config(cfg, variant, lambda, seed);
    let out = train(&data.train, &est)?;
    let h = out.hsic(&data.train)?;
    Ok(RunResult {
        run_id: run_id(cfg, data.k, &est),
        variant,
        k: data.k,
        seed_index,
        seed,
        lambda: est.lambda,
        units: data.units(),
        dropped: data.dropped,
        within: evaluate(&out.model, &data.train)?,
        out: evaluate(&out.model, &data.test)?,
        valid_loss: out.weighted_factual_loss(&data.valid)?,
        hsic: HsicRecord {
            raw: h.raw,
            weighted: h.weighted,
            representation: h.representation,
        },
        log: out.log,
    })
}

/// Runs `tasks` on up to `jobs` threads; results come back in task order.
fn run_parallel<T: Sync, R: Send>(tasks: &[T], jobs: usize, f: impl Fn(&T) -> R + Sync) -> Vec<R> {
    let next = AtomicUsize::new(0);
    let slots: Mutex<Vec<Option<R>>> = Mutex::new((0..tasks.len()).map(|_| None).collect());
    std::thread::scope(|scope| {
        for _ in 0..jobs.clamp(1, tasks.len().max(1)) {
            scope.spawn(|| loop {
                let i = next.fetch_add(1, Ordering::Relaxed);
                if i >= tasks.len() {
                    break;
                }
                let r = f(&tasks[i]);
                slots.lock().unwrap()[i] = Some(r);
            });
        }
    });
    slots
        .into_inner()
        .unwrap()
        .into_iter()
        .map(|r| r.expect("every task ran"))
        .collect()
}

#[derive(Debug, Clone, Copy)]
struct Task {
    k_index: usize,
    seed_index: usize,
    variant: Variant,
    lambda: f64,
}

type Outcome = std::result::Result<RunResult, MissingRun>;

fn missing(variant: Variant, k: f64, seed_index: usize, lambda: f64, err: &Error) -> MissingRun {
    MissingRun {
        variant,
        k,
        seed_index,
        lambda,
        reason: err.code().to_string(),
        message: err.to_string(),
    }
}

fn execute_tasks(
    cfg: &ExperimentConfig,
    ks: &[f64],
    data: &BTreeMap<(usize, usize), std::result::Result<SplitData, Error>>,
    tasks: &[Task],
) -> Vec<Outcome> {
    run_parallel(tasks, cfg.jobs, |t| {
        let k = ks[t.k_index];
        let lambda = if t.variant.balances_representation() {
            t.lambda
        } else {
            0.0
        };
        let result = match &data[&(t.k_index, t.seed_index)] {
            Ok(d) => execute_run(cfg, d, t.variant, lambda, t.seed_index),
            Err(e) => Err(Error::Config(format!(
                "dataset unavailable ({}): {e}",
                e.code()
            ))),
        };
        match result {
            Ok(r) => {
                log::info!(
                    "run {} {} k={} seed={} lambda={} done",
                    r.run_id,
                    r.variant,
                    fmt_f64(k),
                    r.seed,
                    fmt_f64(lambda)
                );
                Ok(r)
            }
            Err(e) => {
                log::warn!(
                    "run {} k={} seed index {} failed: {e}",
                    t.variant,
                    fmt_f64(k),
                    t.seed_index
                );
                Err(missing(t.variant, k, t.seed_index, lambda, &e))
            }
        }
    })
}

/// Full output of `run_experiment`.
#[derive(Debug, Clone)]
pub struct ExperimentOutput {
    pub table: ResultsTable,
    /// Runs at the selected lambda, sorted by (k, variant, seed).
    pub runs: Vec<RunResult>,
}

/// Generates (or loads) data for every (k, seed), selects lambda per
/// (variant, k) on the first seed's validation split, trains every
/// (variant, k, seed) and writes `runs/<run_id>/result.json` plus the
/// aggregated CSV tables under `cfg.output`. Failed runs become missing
/// cells with their reason.
pub fn run_experiment(cfg: &ExperimentConfig) -> Result<ExperimentOutput> {
    cfg.validate()?;
    std::fs::create_dir_all(&cfg.output)?;
    let ks = effective_ks(cfg)?;

    let mut data = BTreeMap::new();
    for (ki, &k) in ks.iter().enumerate() {
        for si in 0..cfg.seeds {
            let seed = cfg.seed(si);
            let split = build_dataset(cfg, k, seed)
                .and_then(|ds| SplitData::from_dataset(&ds, cfg.fractions, seed, k));
            data.insert((ki, si), split);
        }
    }

    // Lambda selection on the first seed.
    let mut tasks = Vec::new();
    for ki in 0..ks.len() {
        for &variant in &cfg.variants {
            let grid: &[f64] = if variant.balances_representation() {
                &cfg.lambda_grid
            } else {
                &[0.0]
            };
            for &lambda in grid {
                tasks.push(Task {
                    k_index: ki,
                    seed_index: 0,
                    variant,
                    lambda,
                });
            }
        }
    }
    let first = execute_tasks(cfg, &ks, &data, &tasks);
    let mut selected = Vec::new();
    let mut chosen: BTreeMap<(usize, Variant), f64> = BTreeMap::new();
    let mut runs = Vec::new();
    let mut missing_runs = Vec::new();
    for ki in 0..ks.len() {
        for &variant in &cfg.variants {
            let candidates: Vec<(&Task, &Outcome)> = tasks
                .iter()
                .zip(&first)
                .filter(|(t, _)| t.k_index == ki && t.variant == variant)
                .collect();
            // Lowest validation loss; ties and failures fall back to grid order.
            let best = candidates
                .iter()
                .filter_map(|(t, o)| o.as_ref().ok().map(|r| (t.lambda, r)))
                .filter(|(_, r)| r.valid_loss.is_finite())
                .min_by(|a, b| a.1.valid_loss.total_cmp(&b.1.valid_loss));
            let (lambda, valid_loss) = match best {
                Some((l, r)) => (l, Some(r.valid_loss)),
                None => (candidates[0].0.lambda, None),
            };
            let lambda = if variant.balances_representation() {
                lambda
            } else {
                0.0
            };
            chosen.insert((ki, variant), lambda);
            selected.push(SelectedLambda {
                variant,
                k: ks[ki],
                lambda,
                valid_loss,
            });
            for (t, o) in &candidates {
                if t.lambda.to_bits() == lambda.to_bits() {
                    match o {
                        Ok(r) => runs.push(r.clone()),
                        Err(m) => missing_runs.push(m.clone()),
                    }
                }
            }
        }
    }

    let mut rest = Vec::new();
    for ki in 0..ks.len() {
        for &variant in &cfg.variants {
            for si in 1..cfg.seeds {
                rest.push(Task {
                    k_index: ki,
                    seed_index: si,
                    variant,
                    lambda: chosen[&(ki, variant)],
                });
            }
        }
    }
    for o in execute_tasks(cfg, &ks, &data, &rest) {
        match o {
            Ok(r) => runs.push(r),
            Err(m) => missing_runs.push(m),
        }
    }
    let k_pos = |k: f64| ks.iter().position(|&x| same_k(x, k)).unwrap_or(usize::MAX);
    runs.sort_by_key(|r| (k_pos(r.k), r.variant, r.seed_index));
    missing_runs.sort_by_key(|m| (k_pos(m.k), m.variant, m.seed_index));

    let runs_dir = cfg.output.join("runs");
    for r in &runs {
        let dir = runs_dir.join(&r.run_id);
        std::fs::create_dir_all(&dir)?;
        std::fs::write(dir.join("result.json"), serde_json::to_string_pretty(r)?)?;
    }
    let table = ResultsTable::aggregate(&ks, &cfg.variants, &runs, selected.clone(), missing_runs);
    write_tables(&table, &runs, &cfg.variants, &cfg.output)?;
    std::fs::write(cfg.output.join("experiment.toml"), cfg.to_toml()?)?;
    std::fs::write(
        cfg.output.join("selected_lambda.json"),
        serde_json::to_string_pretty(&selected)?,
    )?;
    Ok(ExperimentOutput { table, runs })
}

/// Reads every `runs/*/result.json` under `dir`, sorted by run id.
pub fn load_runs(dir: &Path) -> Result<Vec<RunResult>> {
    let mut runs = Vec::new();
    let runs_dir = dir.join("runs");
    let mut entries: Vec<PathBuf> = std::fs::read_dir(&runs_dir)?
        .map(|e| e.map(|e| e.path()))
        .collect::<std::io::Result<_>>()?;
    entries.sort();
    for path in entries {
        let file = path.join("result.json");
        if file.is_file() {
            runs.push(serde_json::from_str(&std::fs::read_to_string(file)?)?);
        }
    }
    Ok(runs)
}

/// Recomputes the tables of a finished experiment from its result.json
/// files, its recorded lambda selection and its missing.csv-equivalent.
pub fn reaggregate(dir: &Path) -> Result<ResultsTable> {
    let cfg = ExperimentConfig::load(&dir.join("experiment.toml"))?;
    let selected: Vec<SelectedLambda> =
        serde_json::from_str(&std::fs::read_to_string(dir.join("selected_lambda.json"))?)?;
    let ks = effective_ks(&cfg)?;
    let k_pos = |k: f64| ks.iter().position(|&x| same_k(x, k)).unwrap_or(usize::MAX);
    let mut runs = load_runs(dir)?;
    runs.sort_by_key(|r| (k_pos(r.k), r.variant, r.seed_index));
    let missing = parse_missing(&std::fs::read_to_string(dir.join("missing.csv"))?)?;
    Ok(ResultsTable::aggregate(
        &ks,
        &cfg.variants,
        &runs,
        selected,
        missing,
    ))
}

fn parse_missing(text: &str) -> Result<Vec<MissingRun>> {
    let mut out = Vec::new();
    for line in text.lines().skip(1).filter(|l| !l.is_empty()) {
        let mut f = line.splitn(6, ',');
        let mut next = || {
            f.next()
                .ok_or_else(|| Error::Parse(format!("short missing.csv line {line:?}")))
        };
        let variant = next()?.parse()?;
        let num = |s: &str| s.parse::<f64>().map_err(|e| Error::Parse(e.to_string()));
        let k = num(next()?)?;
        let seed_index = next()?
            .parse()
            .map_err(|e: std::num::ParseIntError| Error::Parse(e.to_string()))?;
        let lambda = num(next()?)?;
        let reason = next()?.to_string();
        let message = next()?.trim_matches('"').to_string();
        out.push(MissingRun {
            variant,
            k,
            seed_index,
            lambda,
            reason,
            message,
        });
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn pehe_identity_constant_and_hand_values() {
        let tau = [0.3, -1.0, 2.5];
        assert_eq!(pehe(&tau, &tau).unwrap(), 0.0);
        let shifted: Vec<f64> = tau.iter().map(|v| v - 0.7).collect();
        assert!((pehe(&shifted, &tau).unwrap() - 0.7).abs() < 1e-15);
        // errors 1, -2, 2: sqrt(9 / 3)
        let est = [1.3, -3.0, 4.5];
        assert!((pehe(&est, &tau).unwrap() - 3f64.sqrt()).abs() < 1e-15);
        assert!(matches!(
            pehe(&[1.0], &[1.0, 2.0]),
            Err(Error::LengthMismatch(1, 2))
        ));
    }

    #[test]
    fn stats_use_sample_sd() {
        let s = Stats::of(&[1.0, 2.0, 4.0]);
        assert_eq!(s.mean, Some(7.0 / 3.0));
        let m = 7.0 / 3.0;
        let var = ((1.0f64 - m).powi(2) + (2.0f64 - m).powi(2) + (4.0f64 - m).powi(2)) / 2.0;
        assert!((s.sd.unwrap() - var.sqrt()).abs() < 1e-15);
        assert_eq!(s.median, Some(2.0));
        assert_eq!(Stats::of(&[5.0]).sd, Some(0.0));
        assert_eq!(Stats::of(&[]).mean, None);
        assert_eq!(median(&[4.0, 1.0, 3.0, 2.0]), 2.5);
    }

    #[test]
    fn config_round_trips_through_toml() {
        let cfg = ExperimentConfig {
            source: DataSource::Load {
                path: "data/x".into(),
            },
            variants: vec![Variant::Both, Variant::None],
            ..Default::default()
        };
        let text = cfg.to_toml().unwrap();
        assert_eq!(ExperimentConfig::from_toml(&text).unwrap(), cfg);
        let partial = ExperimentConfig::from_toml("seeds = 2\n[source]\nkind = \"generate\"\nn_units = 50\nmean_degree = 4\nrewire = 0.1\n")
            .unwrap();
        assert_eq!(partial.seeds, 2);
        assert_eq!(partial.k, vec![0.5, 1.0, 1.5]);
    }

    #[test]
    fn validation_rejects_empty_lists() {
        for cfg in [
            ExperimentConfig {
                variants: vec![],
                ..Default::default()
            },
            ExperimentConfig {
                k: vec![],
                ..Default::default()
            },
            ExperimentConfig {
                seeds: 0,
                ..Default::default()
            },
            ExperimentConfig {
                lambda_grid: vec![],
                ..Default::default()
            },
            ExperimentConfig {
                fractions: [0.5, 0.5, 0.5],
                ..Default::default()
            },
        ] {
            assert!(cfg.validate().is_err());
        }
        ExperimentConfig::default().validate().unwrap();
    }

    #[test]
    fn run_id_depends_on_configuration() {
        let cfg = ExperimentConfig::default();
        let a = run_config(&cfg, Variant::Both, 0.1, 0);
        let b = run_config(&cfg, Variant::Both, 0.2, 0);
        assert_eq!(run_id(&cfg, 1.0, &a), run_id(&cfg, 1.0, &a));
        assert_ne!(run_id(&cfg, 1.0, &a), run_id(&cfg, 1.0, &b));
        assert_ne!(run_id(&cfg, 1.0, &a), run_id(&cfg, 0.5, &a));
        assert_eq!(run_id(&cfg, 1.0, &a).len(), 16);
        // Lambda does not reach variants without representation balancing.
        assert_eq!(run_config(&cfg, Variant::Reweight, 0.5, 0).lambda, 0.0);
    }

    fn fake_run(variant: Variant, k: f64, seed_index: usize, base: f64) -> RunResult {
        let m = SplitMetrics {
            pehe: EffectErrors {
                main: base,
                spillover: 2.0 * base,
                total: 3.0 * base,
            },
            rmse: base,
        };
        RunResult {
            run_id: format!("{variant}-{k}-{seed_index}"),
            variant,
            k,
            seed_index,
            seed: seed_index as u64,
            lambda: 0.0,
            units: [6, 2, 2],
            dropped: [0; 3],
            within: m,
            out: m,
            valid_loss: base,
            hsic: HsicRecord {
                raw: base,
                weighted: base / 2.0,
                representation: base / 4.0,
            },
            log: Vec::new(),
        }
    }

    #[test]
    fn aggregation_covers_every_requested_cell() {
        let variants = [Variant::None, Variant::Both];
        let runs = vec![
            fake_run(Variant::None, 0.5, 0, 1.0),
            fake_run(Variant::None, 0.5, 1, 3.0),
            fake_run(Variant::Both, 0.5, 0, 2.0),
        ];
        let miss = vec![MissingRun {
            variant: Variant::Both,
            k: 0.5,
            seed_index: 1,
            lambda: 0.1,
            reason: "training".into(),
            message: "diverged".into(),
        }];
        let t = ResultsTable::aggregate(&[0.5, 1.0], &variants, &runs, Vec::new(), miss);
        assert_eq!(t.pehe.len(), 2 * 2 * 3 * 2);
        assert_eq!(t.rmse.len(), 2 * 2 * 2);
        let c = t
            .pehe_cell(0.5, EvalSplit::Out, Effect::Total, Variant::None)
            .unwrap();
        assert_eq!(c.stats.mean, Some(6.0));
        assert!(c.stats.sd.unwrap() >= 0.0);
        assert_eq!(
            t.pehe_cell(1.0, EvalSplit::Out, Effect::Total, Variant::None)
                .unwrap()
                .stats
                .n,
            0
        );
        // reweighted rows need the reweight variant
        assert!(t.hsic_cell(0.5, HsicSetting::Reweighted).is_none());
        assert_eq!(
            t.hsic_cell(0.5, HsicSetting::ReweightedRepre)
                .unwrap()
                .stats
                .mean,
            Some(0.5)
        );
        assert_eq!(t.hsic_cell(0.5, HsicSetting::Raw).unwrap().stats.n, 2);
        let parsed = parse_missing(&missing_csv(&t)).unwrap();
        assert_eq!(parsed, t.missing);
    }

    #[test]
    fn csv_schemas_and_variant_filter() {
        let runs = vec![
            fake_run(Variant::Reweight, 1.0, 0, 1.0),
            fake_run(Variant::Both, 1.0, 0, 2.0),
        ];
        let t = ResultsTable::aggregate(
            &[1.0],
            &[Variant::Reweight, Variant::Both],
            &runs,
            Vec::new(),
            Vec::new(),
        );
        let rmse = fig_rmse_csv(&t, &[Variant::Reweight, Variant::Both]);
        assert_eq!(rmse.lines().next().unwrap(), "k,split,variant,mean,sd");
        assert_eq!(rmse.lines().count(), 1 + 2 * 2);
        let hsic = fig_hsic_csv(&t, &[Variant::Reweight, Variant::Both]);
        let settings: Vec<&str> = hsic
            .lines()
            .skip(1)
            .map(|l| l.split(',').nth(1).unwrap())
            .collect();
        assert_eq!(settings, ["raw", "reweighted", "reweighted+repre"]);
        assert_eq!(fig_rmse_csv(&t, &[]), format!("{FIG_RMSE_HEADER}\n"));
        assert_eq!(fig_hsic_csv(&t, &[]), format!("{FIG_HSIC_HEADER}\n"));
    }
}
