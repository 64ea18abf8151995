//! Exact checks of the generalization-bound inequalities on small, fully
//! enumerable scenarios: a finite covariate set, binary `t` times a few
//! exposure levels, known outcome means, a fixed hypothesis table and
//! true and estimated propensity tables.
//!
//! All expectations are finite sums. The function class behind the IPM is
//! the 1-Lipschitz functions on the enumerated joint points `(r_x, t, z)`
//! under the Euclidean metric, so the IPM equals the exact W1 transport
//! cost between the two point masses.

use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::balance::exact_transport;
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Slack allowed on every audited inequality.
pub const BOUND_TOL: f64 = 1e-9;

const NORM_TOL: f64 = 1e-9;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DiscreteScenario {
    /// Seed that generated the scenario, if random.
    pub seed: Option<u64>,
    pub p_x: Vec<f64>,
    /// Representation point of each covariate value.
    pub r: Vec<Vec<f64>>,
    /// Exposure levels; the pair index is `t * levels + k`.
    pub z_levels: Vec<f64>,
    /// True `e(t = 1 | x)`.
    pub e1: Vec<f64>,
    /// True `phi(z_k | x)`, each row a pmf over the levels.
    pub phi: Vec<Vec<f64>>,
    pub e1_est: Vec<f64>,
    pub phi_est: Vec<Vec<f64>>,
    /// Outcome means `m(x, pair)`.
    pub m: Vec<Vec<f64>>,
    /// Hypothesis `h(Phi(x), pair)`.
    pub h: Vec<Vec<f64>>,
    /// Outcome noise variance per cell.
    pub noise_var: Vec<Vec<f64>>,
}

/// Which balancing weights define the reweighted conditional `q(x | t, z)`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum WeightSource {
    Estimated,
    Oracle,
    Uniform,
}

impl DiscreteScenario {
    pub fn n_x(&self) -> usize {
        self.p_x.len()
    }

    pub fn n_pairs(&self) -> usize {
        2 * self.z_levels.len()
    }

    pub fn pair(&self, j: usize) -> (f64, f64) {
        let l = self.z_levels.len();
        ((j / l) as f64, self.z_levels[j % l])
    }

    fn e_of(e1: f64, t: usize) -> f64 {
        if t == 1 {
            e1
        } else {
            1.0 - e1
        }
    }

    /// True `psi(t, z | x) = e(t | x) phi(z | x)`.
    pub fn psi(&self, x: usize, j: usize) -> f64 {
        let l = self.z_levels.len();
        Self::e_of(self.e1[x], j / l) * self.phi[x][j % l]
    }

    pub fn psi_est(&self, x: usize, j: usize) -> f64 {
        let l = self.z_levels.len();
        Self::e_of(self.e1_est[x], j / l) * self.phi_est[x][j % l]
    }

    /// Marginal `p(t, z)`.
    pub fn p_pair(&self, j: usize) -> f64 {
        (0..self.n_x()).map(|x| self.p_x[x] * self.psi(x, j)).sum()
    }

    /// `p(x | t, z)` over the covariate values.
    pub fn p_x_given(&self, j: usize) -> Vec<f64> {
        let pj = self.p_pair(j);
        (0..self.n_x())
            .map(|x| self.p_x[x] * self.psi(x, j) / pj)
            .collect()
    }

    /// `q(x | t, z)`, proportional to `w(t, z, x) p(x | t, z)`.
    pub fn q_x_given(&self, j: usize, source: WeightSource) -> Vec<f64> {
        let cond = self.p_x_given(j);
        let mut q: Vec<f64> = (0..self.n_x())
            .map(|x| {
                let w = match source {
                    WeightSource::Estimated => 1.0 / self.psi_est(x, j),
                    WeightSource::Oracle => 1.0 / self.psi(x, j),
                    WeightSource::Uniform => 1.0,
                };
                w * cond[x]
            })
            .collect();
        let total: f64 = q.iter().sum();
        q.iter_mut().for_each(|v| *v /= total);
        q
    }

    /// Expected per-cell squared loss `(h - m)^2 + noise variance`.
    pub fn loss(&self, x: usize, j: usize) -> f64 {
        (self.h[x][j] - self.m[x][j]).powi(2) + self.noise_var[x][j]
    }

    pub fn validate(&self) -> Result<()> {
        let n = self.n_x();
        let l = self.z_levels.len();
        let bad = |msg: String| Err(Error::Config(format!("scenario: {msg}")));
        if n == 0 || n > 8 {
            return bad(format!("{n} covariate values, need 1..=8"));
        }
        if l == 0 || 2 * l > 6 {
            return bad(format!("{} treatment pairs, need 2..=6", 2 * l));
        }
        let rows_ok = |t: &Vec<Vec<f64>>, w: usize| t.len() == n && t.iter().all(|r| r.len() == w);
        let dim = self.r.first().map_or(0, Vec::len);
        if !rows_ok(&self.r, dim)
            || self.e1.len() != n
            || self.e1_est.len() != n
            || !rows_ok(&self.phi, l)
            || !rows_ok(&self.phi_est, l)
            || !rows_ok(&self.m, 2 * l)
            || !rows_ok(&self.h, 2 * l)
            || !rows_ok(&self.noise_var, 2 * l)
        {
            return bad("table shapes disagree".into());
        }
        if (self.p_x.iter().sum::<f64>() - 1.0).abs() > NORM_TOL
            || self.p_x.iter().any(|&p| !(p > 0.0))
        {
            return bad("p(x) must be positive and sum to 1".into());
        }
        for table in [&self.phi, &self.phi_est] {
            for row in table {
                if (row.iter().sum::<f64>() - 1.0).abs() > NORM_TOL
                    || row.iter().any(|&p| !(p > 0.0))
                {
                    return bad("exposure pmfs must be positive and sum to 1".into());
                }
            }
        }
        if self
            .e1
            .iter()
            .chain(&self.e1_est)
            .any(|&e| !(e > 0.0 && e < 1.0))
        {
            return bad("treatment probabilities must lie in (0, 1)".into());
        }
        if self.noise_var.iter().flatten().any(|&v| !(v >= 0.0)) {
            return bad("noise variances must be non-negative".into());
        }
        Ok(())
    }

    /// Joint points `[r_x | t | z]`, ordered `x`-major.
    fn joint_points(&self) -> Vec<Vec<f64>> {
        let mut pts = Vec::with_capacity(self.n_x() * self.n_pairs());
        for x in 0..self.n_x() {
            for j in 0..self.n_pairs() {
                let (t, z) = self.pair(j);
                let mut p = self.r[x].clone();
                p.extend([t, z]);
                pts.push(p);
            }
        }
        pts
    }

    /// Largest Euclidean distance between two representation points.
    pub fn diameter(&self) -> f64 {
        let mut d: f64 = 0.0;
        for a in &self.r {
            for b in &self.r {
                d = d.max(euclid(a, b));
            }
        }
        d
    }

    /// `(Gamma_t, Gamma_z)`: largest ratio, in either direction, between
    /// estimated and true propensities.
    pub fn odds_bounds(&self) -> (f64, f64) {
        let ratio = |a: f64, b: f64| (a / b).max(b / a);
        let mut gt: f64 = 1.0;
        let mut gz: f64 = 1.0;
        for x in 0..self.n_x() {
            for t in 0..2 {
                gt = gt.max(ratio(
                    Self::e_of(self.e1_est[x], t),
                    Self::e_of(self.e1[x], t),
                ));
            }
            for k in 0..self.z_levels.len() {
                gz = gz.max(ratio(self.phi_est[x][k], self.phi[x][k]));
            }
        }
        (gt, gz)
    }

    /// Random valid scenario. Roughly half of them are noiseless.
    pub fn random(seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let n = rng.gen_range(1..=8);
        let l = rng.gen_range(1..=3);
        let z_levels: Vec<f64> = match l {
            1 => vec![0.0],
            _ => (0..l).map(|k| k as f64 / (l - 1) as f64).collect(),
        };
        let pmf = |rng: &mut ChaCha8Rng, k: usize| {
            let v: Vec<f64> = (0..k).map(|_| 0.05 - rng.gen::<f64>().ln()).collect();
            let s: f64 = v.iter().sum();
            v.into_iter().map(|a| a / s).collect::<Vec<_>>()
        };
        let p_x = pmf(&mut rng, n);
        let r: Vec<Vec<f64>> = (0..n)
            .map(|_| (0..2).map(|_| rng.gen_range(-2.0..2.0)).collect())
            .collect();
        let e1: Vec<f64> = (0..n).map(|_| rng.gen_range(0.05..0.95)).collect();
        let phi: Vec<Vec<f64>> = (0..n).map(|_| pmf(&mut rng, l)).collect();
        let spread = rng.gen_range(0.0..1.0);
        let e1_est: Vec<f64> = e1
            .iter()
            .map(|&e| {
                let logit = (e / (1.0 - e)).ln() + spread * rng.gen_range(-1.0..1.0);
                1.0 / (1.0 + (-logit).exp())
            })
            .collect();
        let phi_est: Vec<Vec<f64>> = phi
            .iter()
            .map(|row| {
                let v: Vec<f64> = row
                    .iter()
                    .map(|&p| p * (spread * rng.gen_range(-1.0..1.0)).exp())
                    .collect();
                let s: f64 = v.iter().sum();
                v.into_iter().map(|a| a / s).collect()
            })
            .collect();
        let table = |rng: &mut ChaCha8Rng, scale: f64| -> Vec<Vec<f64>> {
            (0..n)
                .map(|_| {
                    (0..2 * l)
                        .map(|_| scale * rng.gen_range(-1.0..1.0))
                        .collect()
                })
                .collect()
        };
        let m = table(&mut rng, 2.0);
        let h_offset = table(&mut rng, 1.0);
        let h = m
            .iter()
            .zip(&h_offset)
            .map(|(a, b)| a.iter().zip(b).map(|(a, b)| a + b).collect())
            .collect();
        let noisy = rng.gen_bool(0.5);
        let noise_var = table(&mut rng, 1.0)
            .into_iter()
            .map(|row| {
                row.into_iter()
                    .map(|v| if noisy { v.abs() } else { 0.0 })
                    .collect()
            })
            .collect();
        Self {
            seed: Some(seed),
            p_x,
            r,
            z_levels,
            e1,
            phi,
            e1_est,
            phi_est,
            m,
            h,
            noise_var,
        }
    }
}

fn euclid(a: &[f64], b: &[f64]) -> f64 {
    a.iter()
        .zip(b)
        .map(|(x, y)| (x - y).powi(2))
        .sum::<f64>()
        .sqrt()
}

fn distance_matrix(points: &[Vec<f64>]) -> Result<Tensor> {
    let n = points.len();
    let data = points
        .iter()
        .flat_map(|a| points.iter().map(move |b| euclid(a, b)))
        .collect();
    Ok(Tensor::new(n, n, data)?)
}

/// `sup` over 1-Lipschitz `g` of `sum_a g(a) (p_a - q_a)`, solved as the
/// equivalent min-cost transport problem.
pub fn lipschitz_ipm(points: &[Vec<f64>], p: &[f64], q: &[f64]) -> Result<f64> {
    let c = distance_matrix(points)?;
    Ok(exact_transport(&c, p, q)?.cost)
}

/// Smallest `B` such that `values / B` is 1-Lipschitz on `points`.
pub fn lipschitz_constant(points: &[Vec<f64>], values: &[f64]) -> f64 {
    let mut b: f64 = 0.0;
    for i in 0..points.len() {
        for j in i + 1..points.len() {
            let d = euclid(&points[i], &points[j]);
            let dv = (values[i] - values[j]).abs();
            if d > 0.0 {
                b = b.max(dv / d);
            } else if dv > 0.0 {
                return f64::INFINITY;
            }
        }
    }
    b
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ExactLosses {
    pub eps_f: f64,
    pub eps_cf: f64,
    /// Factual loss under the estimated balancing weights.
    pub eps_f_eta: f64,
    pub eps_pehe: f64,
    pub sigma_y: f64,
}

fn reweighted_factual(s: &DiscreteScenario, source: WeightSource) -> f64 {
    (0..s.n_pairs())
        .map(|j| {
            let q = s.q_x_given(j, source);
            s.p_pair(j) * (0..s.n_x()).map(|x| s.loss(x, j) * q[x]).sum::<f64>()
        })
        .sum()
}

pub fn exact_losses(s: &DiscreteScenario) -> ExactLosses {
    let (nx, np) = (s.n_x(), s.n_pairs());
    let pp: Vec<f64> = (0..np).map(|j| s.p_pair(j)).collect();
    let cond: Vec<Vec<f64>> = (0..np).map(|j| s.p_x_given(j)).collect();
    let eps_f = (0..np)
        .map(|j| pp[j] * (0..nx).map(|x| s.loss(x, j) * cond[j][x]).sum::<f64>())
        .sum();
    // Counterfactual loss at pair j over units observed at any pair j'.
    let mut eps_cf = 0.0;
    for j in 0..np {
        for jp in 0..np {
            eps_cf += pp[j] * pp[jp] * (0..nx).map(|x| s.loss(x, j) * cond[jp][x]).sum::<f64>();
        }
    }
    let mut eps_pehe = 0.0;
    for j in 0..np {
        for jp in 0..np {
            let inner: f64 = (0..nx)
                .map(|x| {
                    let est = s.h[x][j] - s.h[x][jp];
                    let truth = s.m[x][j] - s.m[x][jp];
                    s.p_x[x] * (est - truth).powi(2)
                })
                .sum();
            eps_pehe += pp[j] * pp[jp] * inner;
        }
    }
    let sigma_y = (0..np)
        .map(|j| pp[j] * (0..nx).map(|x| s.p_x[x] * s.noise_var[x][j]).sum::<f64>())
        .sum();
    ExactLosses {
        eps_f,
        eps_cf,
        eps_f_eta: reweighted_factual(s, WeightSource::Estimated),
        eps_pehe,
        sigma_y,
    }
}

/// IPM between `p(r) p(t, z)` and `q(r | t, z) p(t, z)`.
pub fn balance_ipm(s: &DiscreteScenario, source: WeightSource) -> Result<f64> {
    let (nx, np) = (s.n_x(), s.n_pairs());
    let pp: Vec<f64> = (0..np).map(|j| s.p_pair(j)).collect();
    let q: Vec<Vec<f64>> = (0..np).map(|j| s.q_x_given(j, source)).collect();
    let mut a = Vec::with_capacity(nx * np);
    let mut b = Vec::with_capacity(nx * np);
    for x in 0..nx {
        for j in 0..np {
            a.push(s.p_x[x] * pp[j]);
            b.push(q[j][x] * pp[j]);
        }
    }
    // Rounding can leave the two totals a few ulps apart.
    let (sa, sb): (f64, f64) = (a.iter().sum(), b.iter().sum());
    a.iter_mut().for_each(|v| *v /= sa);
    b.iter_mut().for_each(|v| *v /= sb);
    lipschitz_ipm(&s.joint_points(), &a, &b)
}

/// Lipschitz constant of the loss table over the joint points.
pub fn loss_lipschitz(s: &DiscreteScenario) -> f64 {
    let values: Vec<f64> = (0..s.n_x())
        .flat_map(|x| (0..s.n_pairs()).map(move |j| (x, j)))
        .map(|(x, j)| s.loss(x, j))
        .collect();
    lipschitz_constant(&s.joint_points(), &values)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Inequality {
    pub name: String,
    pub lhs: f64,
    pub rhs: f64,
    /// `rhs - lhs`
    pub slack: f64,
}

impl Inequality {
    fn new(name: &str, lhs: f64, rhs: f64) -> Self {
        Self {
            name: name.into(),
            lhs,
            rhs,
            slack: rhs - lhs,
        }
    }

    pub fn holds(&self) -> bool {
        self.lhs <= self.rhs + BOUND_TOL
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BoundReport {
    pub inequalities: Vec<Inequality>,
    pub pass: bool,
}

impl BoundReport {
    fn new(inequalities: Vec<Inequality>) -> Self {
        let pass = inequalities.iter().all(Inequality::holds);
        Self { inequalities, pass }
    }
}

/// Counterfactual loss against the estimated-weight factual loss plus
/// `B * IPM`.
pub fn check_lemma1(s: &DiscreteScenario) -> Result<BoundReport> {
    s.validate()?;
    let l = exact_losses(s);
    let rhs = l.eps_f_eta + loss_lipschitz(s) * balance_ipm(s, WeightSource::Estimated)?;
    Ok(BoundReport::new(vec![Inequality::new(
        "eps_cf <= eps_f_eta + B * ipm",
        l.eps_cf,
        rhs,
    )]))
}

/// Wasserstein distance of the estimated-weight reweighting against
/// `diam(R) sqrt(ln Gamma_t + ln Gamma_z)`.
pub fn check_theorem2(s: &DiscreteScenario) -> Result<BoundReport> {
    s.validate()?;
    let w = balance_ipm(s, WeightSource::Estimated)?;
    let (gt, gz) = s.odds_bounds();
    let rhs = s.diameter() * (gt.ln() + gz.ln()).max(0.0).sqrt();
    Ok(BoundReport::new(vec![Inequality::new(
        "w <= diam * sqrt(ln gamma_t + ln gamma_z)",
        w,
        rhs,
    )]))
}

/// The PEHE chain under estimated weights, and the same chain with the
/// oracle weights compared against the unweighted bound.
pub fn check_theorem1_and_3(s: &DiscreteScenario) -> Result<(BoundReport, BoundReport)> {
    s.validate()?;
    let l = exact_losses(s);
    let b = loss_lipschitz(s);
    let pehe_q = l.eps_pehe / 4.0;
    let estimated = l.eps_f_eta + b * balance_ipm(s, WeightSource::Estimated)? - l.sigma_y;
    let t1 = BoundReport::new(vec![
        Inequality::new(
            "eps_pehe / 4 <= eps_cf - sigma_y",
            pehe_q,
            l.eps_cf - l.sigma_y,
        ),
        Inequality::new(
            "eps_cf - sigma_y <= eps_f_eta + B * ipm - sigma_y",
            l.eps_cf - l.sigma_y,
            estimated,
        ),
    ]);
    let oracle = reweighted_factual(s, WeightSource::Oracle)
        + b * balance_ipm(s, WeightSource::Oracle)?
        - l.sigma_y;
    let unweighted = l.eps_f + b * balance_ipm(s, WeightSource::Uniform)? - l.sigma_y;
    let t3 = BoundReport::new(vec![
        Inequality::new("eps_pehe / 4 <= oracle-weighted bound", pehe_q, oracle),
        Inequality::new(
            "oracle-weighted bound <= unweighted bound",
            oracle,
            unweighted,
        ),
    ]);
    Ok((t1, t3))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReportEntry {
    pub check: String,
    pub inequality: String,
    pub lhs: f64,
    pub rhs: f64,
    pub slack: f64,
    pub pass: bool,
    pub scenario_seed: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TheoryReport {
    pub scenarios: usize,
    pub violations: usize,
    pub entries: Vec<ReportEntry>,
    /// Full scenarios behind every violation.
    pub failed_scenarios: Vec<DiscreteScenario>,
}

impl TheoryReport {
    pub fn violations_of(&self, check: &str) -> usize {
        self.entries
            .iter()
            .filter(|e| e.check == check && !e.pass)
            .count()
    }

    pub fn write_json(&self, path: &Path) -> Result<()> {
        std::fs::write(path, serde_json::to_string_pretty(self)? + "\n")?;
        Ok(())
    }
}

/// Runs every check on `count` random scenarios seeded `first_seed..`.
pub fn audit(first_seed: u64, count: usize) -> Result<TheoryReport> {
    let mut entries = Vec::new();
    let mut failed_scenarios = Vec::new();
    for seed in first_seed..first_seed + count as u64 {
        let s = DiscreteScenario::random(seed);
        let (t1, t3) = check_theorem1_and_3(&s)?;
        let reports = [
            ("lemma1", check_lemma1(&s)?),
            ("theorem2", check_theorem2(&s)?),
            ("theorem1", t1),
            ("theorem3", t3),
        ];
        let mut failed = false;
        for (check, report) in reports {
            failed |= !report.pass;
            for q in report.inequalities {
                entries.push(ReportEntry {
                    check: check.into(),
                    pass: q.holds(),
                    inequality: q.name,
                    lhs: q.lhs,
                    rhs: q.rhs,
                    slack: q.slack,
                    scenario_seed: seed,
                });
            }
        }
        if failed {
            log::warn!(
                "bound violated on scenario {seed}: {}",
                serde_json::to_string(&s)?
            );
            failed_scenarios.push(s);
        }
    }
    Ok(TheoryReport {
        scenarios: count,
        violations: entries.iter().filter(|e| !e.pass).count(),
        entries,
        failed_scenarios,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    /// Two covariate values, one exposure level, so the pairs are (0,0), (1,0).
    fn two_by_two() -> DiscreteScenario {
        DiscreteScenario {
            seed: None,
            p_x: vec![0.4, 0.6],
            r: vec![vec![0.0], vec![1.0]],
            z_levels: vec![0.0],
            e1: vec![0.25, 0.5],
            phi: vec![vec![1.0], vec![1.0]],
            e1_est: vec![0.25, 0.5],
            phi_est: vec![vec![1.0], vec![1.0]],
            m: vec![vec![0.0, 1.0], vec![2.0, 4.0]],
            h: vec![vec![1.0, 1.0], vec![2.0, 2.0]],
            noise_var: vec![vec![0.0; 2]; 2],
        }
    }

    #[test]
    fn hand_two_by_two_losses() {
        let s = two_by_two();
        let l = exact_losses(&s);
        // p(t=0) = .4*.75 + .6*.5 = .6, p(t=1) = .4.
        // p(x|t=0) = (.5, .5), p(x|t=1) = (.25, .75).
        // Loss table: x0 -> (1, 0), x1 -> (0, 4).
        let eps_f = 0.6 * (0.5 * 1.0 + 0.5 * 0.0) + 0.4 * (0.25 * 0.0 + 0.75 * 4.0);
        let eps_cf = 0.6 * (0.4 * 1.0) + 0.4 * (0.6 * 4.0);
        // tau_hat(1,0) = 0 and 0; tau(1,0) = 1 and 2; the pair (0,1) mirrors it.
        let eps_pehe = 2.0 * 0.6 * 0.4 * (0.4 * 1.0 + 0.6 * 4.0);
        assert!((l.eps_f - eps_f).abs() < 1e-15);
        assert!((l.eps_cf - eps_cf).abs() < 1e-15);
        assert!((l.eps_pehe - eps_pehe).abs() < 1e-15);
        assert_eq!(l.sigma_y, 0.0);
    }

    #[test]
    fn perfect_hypothesis_has_zero_losses() {
        let mut s = DiscreteScenario::random(3);
        s.h = s.m.clone();
        s.noise_var.iter_mut().flatten().for_each(|v| *v = 0.0);
        let l = exact_losses(&s);
        assert_eq!((l.eps_f, l.eps_cf, l.eps_pehe), (0.0, 0.0, 0.0));
        let (t1, _) = check_theorem1_and_3(&s).unwrap();
        assert!(t1.pass);
        assert!(t1.inequalities[0].lhs.abs() < 1e-15 && t1.inequalities[0].rhs.abs() < 1e-15);
    }

    #[test]
    fn single_covariate_value_has_no_shift() {
        let mut s = DiscreteScenario::random(5);
        while s.n_x() != 1 {
            s = DiscreteScenario::random(s.seed.unwrap() + 1);
        }
        let l = exact_losses(&s);
        // Equal up to the rounding of sum_j p(t, z) = 1.
        assert!((l.eps_f - l.eps_cf).abs() <= 1e-15 * l.eps_cf.abs());
    }

    #[test]
    fn counterfactual_loss_collapses_to_marginal() {
        for seed in 0..20 {
            let s = DiscreteScenario::random(seed);
            let direct: f64 = (0..s.n_pairs())
                .map(|j| s.p_pair(j) * (0..s.n_x()).map(|x| s.p_x[x] * s.loss(x, j)).sum::<f64>())
                .sum();
            assert!((exact_losses(&s).eps_cf - direct).abs() < 1e-12);
        }
    }

    #[test]
    fn perfect_weights_close_the_lemma() {
        let mut s = DiscreteScenario::random(11);
        s.e1_est = s.e1.clone();
        s.phi_est = s.phi.clone();
        assert!(balance_ipm(&s, WeightSource::Estimated).unwrap() < 1e-12);
        let l = exact_losses(&s);
        assert!((l.eps_cf - l.eps_f_eta).abs() < 1e-12);
        assert!(check_lemma1(&s).unwrap().pass);
    }

    #[test]
    fn lemma_hand_instance_with_zero_hypothesis() {
        // Uniform p(x) and e = 1/2 everywhere: no confounding, so the IPM is 0
        // and both sides equal the mean of m^2.
        let mut s = two_by_two();
        s.e1 = vec![0.5, 0.5];
        s.e1_est = vec![0.5, 0.5];
        s.p_x = vec![0.5, 0.5];
        s.h = vec![vec![0.0; 2]; 2];
        let report = check_lemma1(&s).unwrap();
        let mean_sq = 0.25 * (0.0 + 1.0 + 4.0 + 16.0);
        let q = &report.inequalities[0];
        assert!((q.lhs - mean_sq).abs() < 1e-15);
        assert!((q.rhs - mean_sq).abs() < 1e-12);
    }

    #[test]
    fn exact_estimates_give_zero_theorem2_bound() {
        let mut s = DiscreteScenario::random(21);
        s.e1_est = s.e1.clone();
        s.phi_est = s.phi.clone();
        let r = check_theorem2(&s).unwrap();
        assert_eq!(s.odds_bounds(), (1.0, 1.0));
        assert_eq!(r.inequalities[0].rhs, 0.0);
        assert!(r.inequalities[0].lhs.abs() < 1e-12);
    }

    #[test]
    fn constructed_half_log_odds_perturbation() {
        let mut s = two_by_two();
        // e(1|x0) = 0.25 -> 0.25 e^0.5; the t = 0 ratio stays inside e^0.5.
        s.e1_est = vec![0.25 * 0.5f64.exp(), 0.5];
        let (gt, gz) = s.odds_bounds();
        assert!((gt - 0.5f64.exp()).abs() < 1e-15);
        assert_eq!(gz, 1.0);
        let r = check_theorem2(&s).unwrap();
        assert!((r.inequalities[0].rhs - 0.5f64.sqrt()).abs() < 1e-15);
        assert!(r.pass);
    }

    #[test]
    fn ipm_on_line() {
        let pts = vec![vec![0.0], vec![1.0], vec![3.0]];
        let ipm = lipschitz_ipm(&pts, &[1.0, 0.0, 0.0], &[0.0, 0.5, 0.5]).unwrap();
        assert!((ipm - 2.0).abs() < 1e-15);
    }

    #[test]
    fn lipschitz_constant_of_known_function() {
        let pts = vec![vec![0.0, 0.0], vec![3.0, 4.0], vec![6.0, 8.0]];
        assert!((lipschitz_constant(&pts, &[0.0, 10.0, 15.0]) - 2.0).abs() < 1e-15);
        assert_eq!(
            lipschitz_constant(&[vec![1.0], vec![1.0]], &[0.0, 1.0]),
            f64::INFINITY
        );
    }

    #[test]
    fn random_scenarios_are_valid_and_seeded() {
        for seed in 0..50 {
            let s = DiscreteScenario::random(seed);
            s.validate().unwrap();
            assert_eq!(s, DiscreteScenario::random(seed));
        }
    }

    #[test]
    fn validation_rejects_broken_tables() {
        let mut s = two_by_two();
        s.p_x = vec![0.5, 0.6];
        assert!(s.validate().is_err());
        let mut s = two_by_two();
        s.e1[0] = 1.0;
        assert!(s.validate().is_err());
    }

    #[test]
    fn short_audit_has_no_violations() {
        let report = audit(0, 10).unwrap();
        assert_eq!(report.violations, 0, "{:?}", report.failed_scenarios);
        assert_eq!(report.entries.len(), 10 * 6);
    }

    /// Maximizes `sum_i f_i (p_i - q_i)` over the vertices of
    /// `{f : f_i - f_j <= d_ij, f_0 = 0}`. A vertex has `m - 1` independent
    /// tight difference constraints, i.e. an oriented spanning tree, so all
    /// of them are found by enumerating oriented edge triples (m <= 4).
    fn dual_vertex_ipm(points: &[Vec<f64>], p: &[f64], q: &[f64]) -> f64 {
        let m = points.len();
        if m == 1 {
            return 0.0;
        }
        let d = |i: usize, j: usize| euclid(&points[i], &points[j]);
        let arcs: Vec<(usize, usize)> = (0..m)
            .flat_map(|i| (0..m).filter(move |&j| j != i).map(move |j| (i, j)))
            .collect();
        let mut best = f64::NEG_INFINITY;
        let mut choice = vec![0usize; m - 1];
        let total = arcs.len().pow(m as u32 - 1);
        for code in 0..total {
            let mut c = code;
            for slot in choice.iter_mut() {
                *slot = c % arcs.len();
                c /= arcs.len();
            }
            // Propagate f along the tight arcs f_i - f_j = d_ij from f_0 = 0.
            let mut f: Vec<Option<f64>> = vec![None; m];
            f[0] = Some(0.0);
            for _ in 0..m {
                for &a in &choice {
                    let (i, j) = arcs[a];
                    match (f[i], f[j]) {
                        (Some(fi), None) => f[j] = Some(fi - d(i, j)),
                        (None, Some(fj)) => f[i] = Some(fj + d(i, j)),
                        _ => {}
                    }
                }
            }
            let Some(f) = f.into_iter().collect::<Option<Vec<f64>>>() else {
                continue;
            };
            let tight_ok = choice.iter().all(|&a| {
                let (i, j) = arcs[a];
                (f[i] - f[j] - d(i, j)).abs() <= 1e-12
            });
            let feasible = (0..m).all(|i| (0..m).all(|j| f[i] - f[j] <= d(i, j) + 1e-12));
            if tight_ok && feasible {
                best = best.max((0..m).map(|i| f[i] * (p[i] - q[i])).sum());
            }
        }
        best
    }

    #[test]
    fn transport_ipm_matches_dual_vertex_enumeration() {
        let mut rng = ChaCha8Rng::seed_from_u64(99);
        let simplex = |rng: &mut ChaCha8Rng, m: usize| {
            let raw: Vec<f64> = (0..m).map(|_| rng.gen_range(0.0..1.0)).collect();
            let s: f64 = raw.iter().sum();
            raw.into_iter().map(|v| v / s).collect::<Vec<_>>()
        };
        for _ in 0..200 {
            let m = rng.gen_range(1..=4);
            let dim = rng.gen_range(1..=3);
            let points: Vec<Vec<f64>> = (0..m)
                .map(|_| (0..dim).map(|_| rng.gen_range(-2.0..2.0)).collect())
                .collect();
            let (p, q) = (simplex(&mut rng, m), simplex(&mut rng, m));
            let lp = lipschitz_ipm(&points, &p, &q).unwrap();
            let brute = dual_vertex_ipm(&points, &p, &q);
            assert!(
                (lp - brute).abs() <= 1e-10 * (1.0 + brute.abs()),
                "m={m}: {lp} vs {brute}"
            );
        }
    }
}
