//! Semi-synthetic network data: features, threshold treatments, neighborhood
//! exposures and linear potential outcomes with interference degree `k`.
//!
//! Treatments: `ps_i = sigmoid(b1 * w1.x_i + b2 * mean_{j in N_i} w2.x_j)` and
//! `t_i = 1` iff `ps_i > mean(ps)`. Exposure `z_i` is the treated fraction of
//! `i`'s neighbors. Outcomes:
//! `y_i(t, z) = b3 t + b4 z + b5 w3.x_i + b6 mean_{j in N_i} w4.x_j + eps_i`.

use std::fmt::Write as _;
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::graph::Graph;
use crate::tensor::Tensor;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct GenConfig {
    /// Interference degree; `b2 = k b1`, `b4 = k b3`, `b6 = k b5`.
    pub k: f64,
    pub beta1: f64,
    pub beta3: f64,
    pub beta5: f64,
    pub feature_dim: usize,
    pub seed: u64,
    /// Mean and variance of the entries of `w1`, `w2`.
    pub treatment_weight_mean: f64,
    pub treatment_weight_var: f64,
    /// Mean and variance of the entries of `w3`, `w4`.
    pub outcome_weight_mean: f64,
    pub outcome_weight_var: f64,
    /// Standard deviation of the frozen outcome noise; 0 gives noiseless data.
    pub noise_sd: f64,
}

impl Default for GenConfig {
    fn default() -> Self {
        Self {
            k: 1.0,
            beta1: 0.5,
            beta3: 1.0,
            beta5: 0.5,
            feature_dim: 10,
            seed: 0,
            treatment_weight_mean: -2.0,
            treatment_weight_var: 3.0,
            outcome_weight_mean: 1.0,
            outcome_weight_var: 2.0,
            noise_sd: 1.0,
        }
    }
}

impl GenConfig {
    pub fn beta2(&self) -> f64 {
        self.k * self.beta1
    }

    pub fn beta4(&self) -> f64 {
        self.k * self.beta3
    }

    pub fn beta6(&self) -> f64 {
        self.k * self.beta5
    }
}

/// The four structural weight vectors, each of length `feature_dim`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StructuralWeights {
    pub w1: Vec<f64>,
    pub w2: Vec<f64>,
    pub w3: Vec<f64>,
    pub w4: Vec<f64>,
}

/// Independent stream for each generation stage so that stages can be re-run
/// in isolation.
fn stage_rng(seed: u64, stage: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stage);
    rng
}

const STAGE_FEATURES: u64 = 1;
const STAGE_WEIGHTS: u64 = 2;
const STAGE_NOISE: u64 = 3;

impl StructuralWeights {
    /// Second distribution parameter is read as a variance.
    pub fn draw(cfg: &GenConfig) -> Self {
        let mut rng = stage_rng(cfg.seed, STAGE_WEIGHTS);
        let treat = Normal::new(cfg.treatment_weight_mean, cfg.treatment_weight_var.sqrt())
            .expect("finite, non-negative variance");
        let outcome = Normal::new(cfg.outcome_weight_mean, cfg.outcome_weight_var.sqrt())
            .expect("finite, non-negative variance");
        let d = cfg.feature_dim;
        let mut sample =
            |dist: &Normal<f64>| (0..d).map(|_| dist.sample(&mut rng)).collect::<Vec<_>>();
        let w1 = sample(&treat);
        let w2 = sample(&treat);
        let w3 = sample(&outcome);
        let w4 = sample(&outcome);
        Self { w1, w2, w3, w4 }
    }
}

/// i.i.d. standard normal `n x d` features.
pub fn sample_features(n: usize, d: usize, seed: u64) -> Result<Tensor> {
    if n == 0 || d == 0 {
        return Err(Error::BadDimensions(format!(
            "need n, d >= 1, got {n} x {d}"
        )));
    }
    let mut rng = stage_rng(seed, STAGE_FEATURES);
    let data = (0..n * d)
        .map(|_| StandardNormal.sample(&mut rng))
        .collect();
    Ok(Tensor::new(n, d, data)?)
}

/// Parses a headerless numeric CSV feature matrix. Every row must have
/// `expected_cols` fields when given, otherwise the width of the first row.
pub fn parse_features_csv(text: &str, expected_cols: Option<usize>) -> Result<Tensor> {
    let mut rows: Vec<Vec<f64>> = Vec::new();
    for (lineno, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let row = line
            .split(',')
            .map(|f| f.trim().parse::<f64>())
            .collect::<std::result::Result<Vec<_>, _>>()
            .map_err(|e| Error::Parse(format!("features line {}: {e}", lineno + 1)))?;
        let want = expected_cols
            .or(rows.first().map(Vec::len))
            .unwrap_or(row.len());
        if row.len() != want {
            return Err(Error::BadDimensions(format!(
                "features line {} has {} columns, expected {want}",
                lineno + 1,
                row.len()
            )));
        }
        rows.push(row);
    }
    if rows.is_empty() {
        return Err(Error::BadDimensions("feature file has no rows".into()));
    }
    Ok(Tensor::from_rows(&rows)?)
}

pub fn load_features_csv(path: &Path, expected_cols: Option<usize>) -> Result<Tensor> {
    parse_features_csv(&std::fs::read_to_string(path)?, expected_cols)
}

fn dot_rows(x: &Tensor, w: &[f64]) -> Result<Vec<f64>> {
    if x.cols() != w.len() {
        return Err(Error::ShapeMismatch(format!(
            "features have {} columns, weights {}",
            x.cols(),
            w.len()
        )));
    }
    Ok((0..x.rows())
        .map(|i| x.row_slice(i).iter().zip(w).map(|(a, b)| a * b).sum())
        .collect())
}

fn check_graph(x: &Tensor, graph: &Graph) -> Result<()> {
    if x.rows() != graph.n_units() {
        return Err(Error::ShapeMismatch(format!(
            "{} feature rows for {} units",
            x.rows(),
            graph.n_units()
        )));
    }
    match graph.first_isolated() {
        Some(i) => Err(Error::IsolatedUnit(i)),
        None => Ok(()),
    }
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TreatmentDraw {
    pub t: Vec<f64>,
    pub z: Vec<f64>,
    pub ps: Vec<f64>,
}

/// Fraction of treated neighbors for every unit.
pub fn exposure(graph: &Graph, t: &[f64]) -> Result<Vec<f64>> {
    graph.neighbor_mean(t, 1)
}

pub fn simulate_treatments(x: &Tensor, graph: &Graph, cfg: &GenConfig) -> Result<TreatmentDraw> {
    simulate_treatments_with(x, graph, cfg, &StructuralWeights::draw(cfg))
}

/// Threshold-at-mean assignment; ties with the mean go to control.
pub fn simulate_treatments_with(
    x: &Tensor,
    graph: &Graph,
    cfg: &GenConfig,
    weights: &StructuralWeights,
) -> Result<TreatmentDraw> {
    check_graph(x, graph)?;
    let own = dot_rows(x, &weights.w1)?;
    let neigh = graph.neighbor_mean(&dot_rows(x, &weights.w2)?, 1)?;
    let ps: Vec<f64> = own
        .iter()
        .zip(&neigh)
        .map(|(a, b)| sigmoid(cfg.beta1 * a + cfg.beta2() * b))
        .collect();
    let mean = ps.iter().sum::<f64>() / ps.len() as f64;
    let t: Vec<f64> = ps
        .iter()
        .map(|&p| if p > mean { 1.0 } else { 0.0 })
        .collect();
    let z = exposure(graph, &t)?;
    let extreme = ps
        .iter()
        .filter(|&&p| !(1e-6..=1.0 - 1e-6).contains(&p))
        .count();
    if extreme > 0 {
        log::warn!(
            "overlap: {extreme} of {} propensity scores within 1e-6 of 0 or 1",
            ps.len()
        );
    }
    Ok(TreatmentDraw { t, z, ps })
}

/// Potential-outcome oracle: `y_i(t, z) = b3 t + b4 z + base_i`, where `base_i`
/// holds the feature terms and the unit's frozen noise draw.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Oracle {
    pub beta3: f64,
    pub beta4: f64,
    pub base: Vec<f64>,
}

impl Oracle {
    pub fn outcome(&self, unit: usize, t: f64, z: f64) -> f64 {
        self.beta3 * t + self.beta4 * z + self.base[unit]
    }

    /// True effect of `(t, z)` against `(t0, z0)` for `unit`.
    pub fn effect(&self, unit: usize, pair: (f64, f64), baseline: (f64, f64)) -> f64 {
        self.outcome(unit, pair.0, pair.1) - self.outcome(unit, baseline.0, baseline.1)
    }

    pub fn len(&self) -> usize {
        self.base.len()
    }

    pub fn is_empty(&self) -> bool {
        self.base.is_empty()
    }

    pub fn subset(&self, units: &[usize]) -> Oracle {
        Oracle {
            beta3: self.beta3,
            beta4: self.beta4,
            base: units.iter().map(|&u| self.base[u]).collect(),
        }
    }
}

pub fn simulate_outcomes(
    x: &Tensor,
    graph: &Graph,
    t: &[f64],
    z: &[f64],
    cfg: &GenConfig,
) -> Result<(Vec<f64>, Oracle)> {
    simulate_outcomes_with(x, graph, t, z, cfg, &StructuralWeights::draw(cfg))
}

pub fn simulate_outcomes_with(
    x: &Tensor,
    graph: &Graph,
    t: &[f64],
    z: &[f64],
    cfg: &GenConfig,
    weights: &StructuralWeights,
) -> Result<(Vec<f64>, Oracle)> {
    check_graph(x, graph)?;
    let n = x.rows();
    if t.len() != n || z.len() != n {
        return Err(Error::ShapeMismatch(format!(
            "{n} units but {} treatments and {} exposures",
            t.len(),
            z.len()
        )));
    }
    let own = dot_rows(x, &weights.w3)?;
    let neigh = graph.neighbor_mean(&dot_rows(x, &weights.w4)?, 1)?;
    let mut rng = stage_rng(cfg.seed, STAGE_NOISE);
    let base: Vec<f64> = own
        .iter()
        .zip(&neigh)
        .map(|(a, b)| {
            let eps: f64 = StandardNormal.sample(&mut rng);
            cfg.beta5 * a + cfg.beta6() * b + cfg.noise_sd * eps
        })
        .collect();
    let oracle = Oracle {
        beta3: cfg.beta3,
        beta4: cfg.beta4(),
        base,
    };
    let y = (0..n).map(|i| oracle.outcome(i, t[i], z[i])).collect();
    Ok((y, oracle))
}

/// Provenance recorded alongside a generated dataset.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetMeta {
    pub config: GenConfig,
    pub seed: u64,
    pub weight_variance_convention: String,
    pub beta2: f64,
    pub beta4: f64,
    pub beta6: f64,
    pub n_units: usize,
    pub n_edges: usize,
    pub treated_fraction: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct NetworkDataset {
    pub graph: Graph,
    pub features: Tensor,
    pub t: Vec<f64>,
    pub z: Vec<f64>,
    pub y: Vec<f64>,
    /// Generating propensity scores, when known.
    pub ps: Option<Vec<f64>>,
    pub oracle: Option<Oracle>,
    pub meta: Option<DatasetMeta>,
}

impl NetworkDataset {
    pub fn n_units(&self) -> usize {
        self.graph.n_units()
    }

    pub fn validate(&self) -> Result<()> {
        let n = self.n_units();
        if self.features.rows() != n || self.t.len() != n || self.z.len() != n || self.y.len() != n
        {
            return Err(Error::ShapeMismatch(format!(
                "dataset columns disagree with {n} units"
            )));
        }
        if let Some(i) = self.graph.first_isolated() {
            return Err(Error::IsolatedUnit(i));
        }
        if let Some(&bad) = self.t.iter().find(|&&t| t != 0.0 && t != 1.0) {
            return Err(Error::Config(format!("treatment {bad} is not binary")));
        }
        if let Some(&bad) = self.z.iter().find(|&&z| !(0.0..=1.0).contains(&z)) {
            return Err(Error::OutOfRangeExposure(bad));
        }
        Ok(())
    }

    /// Restricts to `units` on their induced subgraph. Units left without
    /// neighbors are dropped and returned separately. Treatments, exposures
    /// and outcomes keep their full-graph values.
    pub fn subset(&self, units: &[usize]) -> (NetworkDataset, Vec<usize>) {
        let induced = self.graph.induced_subgraph(units);
        let (kept, dropped): (Vec<usize>, Vec<usize>) =
            (0..units.len()).partition(|&k| induced.degree(k) > 0);
        let kept_global: Vec<usize> = kept.iter().map(|&k| units[k]).collect();
        let dropped_global: Vec<usize> = dropped.iter().map(|&k| units[k]).collect();
        let graph = induced.induced_subgraph(&kept);
        let pick = |v: &[f64]| kept_global.iter().map(|&u| v[u]).collect::<Vec<_>>();
        let ds = NetworkDataset {
            graph,
            features: self.features.select_rows(&kept_global),
            t: pick(&self.t),
            z: pick(&self.z),
            y: pick(&self.y),
            ps: self.ps.as_ref().map(|p| pick(p)),
            oracle: self.oracle.as_ref().map(|o| o.subset(&kept_global)),
            meta: self.meta.clone(),
        };
        (ds, dropped_global)
    }

    pub fn save(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir)?;
        let mut features = String::new();
        for i in 0..self.features.rows() {
            let row: Vec<String> = self
                .features
                .row_slice(i)
                .iter()
                .map(|v| fmt_f64(*v))
                .collect();
            writeln!(features, "{}", row.join(",")).unwrap();
        }
        std::fs::write(dir.join("features.csv"), features)?;
        std::fs::write(dir.join("edges.txt"), self.graph.to_edge_list())?;
        let mut assign = String::from("unit,t,z,y\n");
        for i in 0..self.n_units() {
            writeln!(
                assign,
                "{i},{},{},{}",
                self.t[i],
                fmt_f64(self.z[i]),
                fmt_f64(self.y[i])
            )
            .unwrap();
        }
        std::fs::write(dir.join("assign.csv"), assign)?;
        if let Some(oracle) = &self.oracle {
            let mut text = format!(
                "# beta3={} beta4={}\nunit,mu00\n",
                fmt_f64(oracle.beta3),
                fmt_f64(oracle.beta4)
            );
            for (i, b) in oracle.base.iter().enumerate() {
                writeln!(text, "{i},{}", fmt_f64(*b)).unwrap();
            }
            std::fs::write(dir.join("oracle.csv"), text)?;
        }
        if let Some(meta) = &self.meta {
            std::fs::write(dir.join("meta.json"), serde_json::to_string_pretty(meta)?)?;
        }
        Ok(())
    }

    pub fn load(dir: &Path) -> Result<NetworkDataset> {
        let features = load_features_csv(&dir.join("features.csv"), None)?;
        let n = features.rows();
        let graph = Graph::read_edge_list(&dir.join("edges.txt"), Some(n))?;
        let table = read_numeric_table(&std::fs::read_to_string(dir.join("assign.csv"))?, 4)?;
        if table.len() != n {
            return Err(Error::BadDimensions(format!(
                "assign.csv has {} rows for {n} units",
                table.len()
            )));
        }
        let col = |c: usize| table.iter().map(|r| r[c]).collect::<Vec<_>>();
        let meta: Option<DatasetMeta> = match std::fs::read_to_string(dir.join("meta.json")) {
            Ok(text) => Some(serde_json::from_str(&text)?),
            Err(_) => None,
        };
        let oracle = match std::fs::read_to_string(dir.join("oracle.csv")) {
            Ok(text) => Some(parse_oracle(&text)?),
            Err(_) => None,
        };
        let ds = NetworkDataset {
            graph,
            features,
            t: col(1),
            z: col(2),
            y: col(3),
            ps: None,
            oracle,
            meta,
        };
        ds.validate()?;
        Ok(ds)
    }
}

/// Shortest representation that round-trips exactly (at most 17 significant
/// digits).
pub fn fmt_f64(v: f64) -> String {
    format!("{v:?}")
}

fn read_numeric_table(text: &str, cols: usize) -> Result<Vec<Vec<f64>>> {
    let mut rows = Vec::new();
    for (lineno, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') || line.starts_with(|c: char| c.is_alphabetic())
        {
            continue;
        }
        let row = line
            .split(',')
            .map(|f| f.trim().parse::<f64>())
            .collect::<std::result::Result<Vec<_>, _>>()
            .map_err(|e| Error::Parse(format!("line {}: {e}", lineno + 1)))?;
        if row.len() != cols {
            return Err(Error::BadDimensions(format!(
                "line {} has {} fields, expected {cols}",
                lineno + 1,
                row.len()
            )));
        }
        rows.push(row);
    }
    Ok(rows)
}

fn parse_oracle(text: &str) -> Result<Oracle> {
    let header = text
        .lines()
        .next()
        .ok_or_else(|| Error::Parse("empty oracle.csv".into()))?;
    let mut beta3 = None;
    let mut beta4 = None;
    for token in header.trim_start_matches('#').split_whitespace() {
        if let Some(v) = token.strip_prefix("beta3=") {
            beta3 = v.parse().ok();
        } else if let Some(v) = token.strip_prefix("beta4=") {
            beta4 = v.parse().ok();
        }
    }
    let (Some(beta3), Some(beta4)) = (beta3, beta4) else {
        return Err(Error::Parse("oracle.csv header lacks beta3/beta4".into()));
    };
    let base = read_numeric_table(text, 2)?
        .into_iter()
        .map(|r| r[1])
        .collect();
    Ok(Oracle { beta3, beta4, base })
}

/// Full generation on a given graph: features, treatments, outcomes.
pub fn generate(graph: &Graph, cfg: &GenConfig) -> Result<NetworkDataset> {
    let features = sample_features(graph.n_units(), cfg.feature_dim, cfg.seed)?;
    generate_with_features(graph, features, cfg)
}

pub fn generate_with_features(
    graph: &Graph,
    features: Tensor,
    cfg: &GenConfig,
) -> Result<NetworkDataset> {
    if features.cols() != cfg.feature_dim {
        return Err(Error::BadDimensions(format!(
            "features have {} columns, config expects {}",
            features.cols(),
            cfg.feature_dim
        )));
    }
    let weights = StructuralWeights::draw(cfg);
    let draw = simulate_treatments_with(&features, graph, cfg, &weights)?;
    let (y, oracle) = simulate_outcomes_with(&features, graph, &draw.t, &draw.z, cfg, &weights)?;
    let treated_fraction = draw.t.iter().sum::<f64>() / draw.t.len() as f64;
    let meta = DatasetMeta {
        config: cfg.clone(),
        seed: cfg.seed,
        weight_variance_convention: "second parameter of N(mean, .) is a variance".into(),
        beta2: cfg.beta2(),
        beta4: cfg.beta4(),
        beta6: cfg.beta6(),
        n_units: graph.n_units(),
        n_edges: graph.n_edges(),
        treated_fraction,
    };
    Ok(NetworkDataset {
        graph: graph.clone(),
        features,
        t: draw.t,
        z: draw.z,
        y,
        ps: Some(draw.ps),
        oracle: Some(oracle),
        meta: Some(meta),
    })
}
