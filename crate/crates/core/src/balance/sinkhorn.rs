use serde::{Deserialize, Serialize};

use super::check_mass;
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Log-domain Sinkhorn settings. `eps` is the entropic regularization in the
/// units of the cost; iterations start from the largest cost and shrink the
/// regularization geometrically by `scaling` until `eps` is reached.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SinkhornConfig {
    pub eps: f64,
    /// Iteration cap at the target `eps`.
    pub max_iters: usize,
    /// Stop once the L1 marginal violation falls below this.
    pub tol: f64,
    pub scaling: f64,
    pub stage_iters: usize,
}

impl Default for SinkhornConfig {
    fn default() -> Self {
        Self {
            eps: 0.05,
            max_iters: 200,
            tol: 1e-12,
            scaling: 0.5,
            stage_iters: 10,
        }
    }
}

/// Debiased divergence `OT(a,b) - OT(a,a)/2 - OT(b,b)/2` together with its
/// gradients. Mass gradients are defined up to an additive constant.
#[derive(Debug, Clone)]
pub struct SinkhornOutput {
    pub divergence: f64,
    pub ot_ab: f64,
    pub ot_aa: f64,
    pub ot_bb: f64,
    /// Coupling of the `a` to `b` problem.
    pub plan: Tensor,
    /// `<plan, C>`
    pub transport_cost: f64,
    pub grad_a_points: Tensor,
    pub grad_b_points: Tensor,
    pub grad_a_mass: Vec<f64>,
    pub grad_b_mass: Vec<f64>,
    /// Largest L1 marginal violation over the three problems.
    pub violation: f64,
}

impl SinkhornOutput {
    pub fn converged(&self) -> bool {
        self.violation <= 1e-4
    }
}

/// `C_ij = |a_i - b_j|^2`.
pub fn squared_distances(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    if a.cols() != b.cols() {
        return Err(Error::ShapeMismatch(format!(
            "point dimensions {} and {}",
            a.cols(),
            b.cols()
        )));
    }
    let (n, m) = (a.rows(), b.rows());
    let mut c = Vec::with_capacity(n * m);
    for i in 0..n {
        let ai = a.row_slice(i);
        for j in 0..m {
            c.push(
                ai.iter()
                    .zip(b.row_slice(j))
                    .map(|(x, y)| (x - y) * (x - y))
                    .sum(),
            );
        }
    }
    Ok(Tensor::new(n, m, c)?)
}

fn log_masses(mass: &[f64]) -> Vec<f64> {
    mass.iter()
        .map(|&m| if m > 0.0 { m.ln() } else { f64::NEG_INFINITY })
        .collect()
}

/// `-eps * log sum_k exp(lw_k + (pot_k - c_k) / eps)` over one cost row.
fn soft_min(c_row: &[f64], lw: &[f64], pot: &[f64], eps: f64) -> f64 {
    let mut max = f64::NEG_INFINITY;
    for k in 0..c_row.len() {
        let v = lw[k] + (pot[k] - c_row[k]) / eps;
        if v > max {
            max = v;
        }
    }
    if max == f64::NEG_INFINITY {
        return 0.0;
    }
    let mut s = 0.0;
    for k in 0..c_row.len() {
        s += (lw[k] + (pot[k] - c_row[k]) / eps - max).exp();
    }
    -eps * (max + s.ln())
}

fn update(c: &[f64], cols: usize, lw: &[f64], pot: &[f64], eps: f64, out: &mut [f64]) {
    for (i, o) in out.iter_mut().enumerate() {
        *o = soft_min(&c[i * cols..(i + 1) * cols], lw, pot, eps);
    }
}

/// Row-marginal violation of the plan built from `f` and the column
/// potential, given `f_next`, the exact row update for that column potential.
fn row_violation(mass: &[f64], f: &[f64], f_next: &[f64], eps: f64) -> f64 {
    mass.iter()
        .zip(f.iter().zip(f_next))
        .filter(|(m, _)| **m > 0.0)
        .map(|(m, (a, b))| m * (((a - b) / eps).exp() - 1.0).abs())
        .sum()
}

fn schedule(c_max: f64, cfg: &SinkhornConfig) -> Vec<f64> {
    let mut stages = Vec::new();
    if cfg.scaling > 0.0 && cfg.scaling < 1.0 {
        let mut e = c_max;
        while e > cfg.eps {
            stages.push(e);
            e *= cfg.scaling;
        }
    }
    stages
}

struct PairSolution {
    f: Vec<f64>,
    g: Vec<f64>,
    violation: f64,
}

/// Alternating log-domain updates, `f` first.
fn solve_pair(
    c: &Tensor,
    ct: &Tensor,
    la: &[f64],
    lb: &[f64],
    mass_a: &[f64],
    cfg: &SinkhornConfig,
) -> PairSolution {
    let (n, m) = c.shape();
    let (c, ct) = (c.data(), ct.data());
    let c_max = c.iter().cloned().fold(0.0, f64::max);
    let mut f = vec![0.0; n];
    let mut g = vec![0.0; m];
    let mut f_next = vec![0.0; n];
    for e in schedule(c_max, cfg) {
        for _ in 0..cfg.stage_iters {
            update(c, m, lb, &g, e, &mut f);
            update(ct, n, la, &f, e, &mut g);
        }
    }
    let eps = cfg.eps;
    update(c, m, lb, &g, eps, &mut f);
    update(ct, n, la, &f, eps, &mut g);
    let mut violation = f64::INFINITY;
    for _ in 0..cfg.max_iters {
        update(c, m, lb, &g, eps, &mut f_next);
        violation = row_violation(mass_a, &f, &f_next, eps);
        if violation < cfg.tol {
            break;
        }
        std::mem::swap(&mut f, &mut f_next);
        update(ct, n, la, &f, eps, &mut g);
    }
    PairSolution { f, g, violation }
}

/// Total order on (points, masses) deciding which side the pair solver
/// updates first, so that swapping the arguments replays the same arithmetic.
fn side_order(a: &Tensor, ma: &[f64], b: &Tensor, mb: &[f64]) -> std::cmp::Ordering {
    (a.rows(), a.cols())
        .cmp(&(b.rows(), b.cols()))
        .then_with(|| cmp_slices(ma, mb))
        .then_with(|| cmp_slices(a.data(), b.data()))
}

fn cmp_slices(x: &[f64], y: &[f64]) -> std::cmp::Ordering {
    x.iter()
        .zip(y)
        .map(|(a, b)| a.total_cmp(b))
        .find(|o| o.is_ne())
        .unwrap_or_else(|| x.len().cmp(&y.len()))
}

fn solve_symmetric(c: &Tensor, la: &[f64], mass: &[f64], cfg: &SinkhornConfig) -> (Vec<f64>, f64) {
    let n = c.rows();
    let c = c.data();
    let c_max = c.iter().cloned().fold(0.0, f64::max);
    let mut f = vec![0.0; n];
    let mut next = vec![0.0; n];
    for e in schedule(c_max, cfg) {
        for _ in 0..cfg.stage_iters {
            update(c, n, la, &f, e, &mut next);
            f.iter_mut()
                .zip(&next)
                .for_each(|(a, b)| *a = 0.5 * (*a + b));
        }
    }
    let mut violation = f64::INFINITY;
    for _ in 0..cfg.max_iters.max(1) {
        update(c, n, la, &f, cfg.eps, &mut next);
        violation = row_violation(mass, &f, &next, cfg.eps);
        if violation < cfg.tol {
            break;
        }
        f.iter_mut()
            .zip(&next)
            .for_each(|(a, b)| *a = 0.5 * (*a + b));
    }
    (f, violation)
}

fn plan(c: &Tensor, la: &[f64], lb: &[f64], f: &[f64], g: &[f64], eps: f64) -> Tensor {
    let (n, m) = c.shape();
    let mut p = Vec::with_capacity(n * m);
    for i in 0..n {
        for j in 0..m {
            p.push((la[i] + lb[j] + (f[i] + g[j] - c.get(i, j)) / eps).exp());
        }
    }
    Tensor::new(n, m, p).expect("sizes agree")
}

/// Gradient of `<P, C(x, y)>` with respect to the rows of `x`, holding `P`
/// fixed: `2 (x_i sum_j P_ij - sum_j P_ij y_j)`.
fn point_grad(p: &Tensor, x: &Tensor, y: &Tensor) -> Tensor {
    let mut out = p
        .matmul(y)
        .expect("plan conforms to points")
        .map(|v| -2.0 * v);
    for i in 0..x.rows() {
        let row_mass: f64 = p.row_slice(i).iter().sum();
        for (k, &xi) in x.row_slice(i).iter().enumerate() {
            out.set(i, k, out.get(i, k) + 2.0 * xi * row_mass);
        }
    }
    out
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter()
        .zip(b)
        .filter(|(m, _)| **m > 0.0)
        .map(|(m, v)| m * v)
        .sum()
}

/// Entropic transport between point clouds `a` and `b` (rows) with masses,
/// under squared Euclidean cost, debiased so that identical inputs give 0.
pub fn sinkhorn_divergence(
    a: &Tensor,
    mass_a: &[f64],
    b: &Tensor,
    mass_b: &[f64],
    cfg: &SinkhornConfig,
) -> Result<SinkhornOutput> {
    if !(cfg.eps > 0.0) {
        return Err(Error::Config(format!(
            "sinkhorn eps must be positive, got {}",
            cfg.eps
        )));
    }
    check_mass(mass_a, a.rows())?;
    check_mass(mass_b, b.rows())?;
    let c_ab = squared_distances(a, b)?;
    let c_aa = squared_distances(a, a)?;
    let c_bb = squared_distances(b, b)?;
    let (la, lb) = (log_masses(mass_a), log_masses(mass_b));

    let (fa, va) = solve_symmetric(&c_aa, &la, mass_a, cfg);
    let (fb, vb) = solve_symmetric(&c_bb, &lb, mass_b, cfg);
    let pair = match side_order(a, mass_a, b, mass_b) {
        // Identical sides: the pair problem is the self problem.
        std::cmp::Ordering::Equal => PairSolution {
            f: fa.clone(),
            g: fa.clone(),
            violation: va,
        },
        std::cmp::Ordering::Less => solve_pair(&c_ab, &c_ab.transpose(), &la, &lb, mass_a, cfg),
        std::cmp::Ordering::Greater => {
            let c_ba = c_ab.transpose();
            let swapped = solve_pair(&c_ba, &c_ab, &lb, &la, mass_b, cfg);
            PairSolution {
                f: swapped.g,
                g: swapped.f,
                violation: swapped.violation,
            }
        }
    };

    let ot_ab = dot(mass_a, &pair.f) + dot(mass_b, &pair.g);
    let ot_aa = 2.0 * dot(mass_a, &fa);
    let ot_bb = 2.0 * dot(mass_b, &fb);

    let p_ab = plan(&c_ab, &la, &lb, &pair.f, &pair.g, cfg.eps);
    let p_aa = plan(&c_aa, &la, &la, &fa, &fa, cfg.eps);
    let p_bb = plan(&c_bb, &lb, &lb, &fb, &fb, cfg.eps);
    let transport_cost = p_ab
        .data()
        .iter()
        .zip(c_ab.data())
        .map(|(p, c)| p * c)
        .sum();

    // The self-transport terms see each point on both sides of the coupling,
    // doubling their gradient; the factor 1/2 in the divergence cancels it.
    let mut grad_a = point_grad(&p_ab, a, b);
    let self_a = point_grad(&p_aa, a, a);
    grad_a
        .data_mut()
        .iter_mut()
        .zip(self_a.data())
        .for_each(|(g, s)| *g -= s);
    let mut grad_b = point_grad(&p_ab.transpose(), b, a);
    let self_b = point_grad(&p_bb, b, b);
    grad_b
        .data_mut()
        .iter_mut()
        .zip(self_b.data())
        .for_each(|(g, s)| *g -= s);

    let grad_a_mass = pair.f.iter().zip(&fa).map(|(x, y)| x - y).collect();
    let grad_b_mass = pair.g.iter().zip(&fb).map(|(x, y)| x - y).collect();

    let violation = pair.violation.max(va).max(vb);
    if violation > 1e-4 {
        log::debug!("sinkhorn did not converge: marginal violation {violation:.3e}");
    }
    Ok(SinkhornOutput {
        divergence: ot_ab - 0.5 * ot_aa - 0.5 * ot_bb,
        ot_ab,
        ot_aa,
        ot_bb,
        plan: p_ab,
        transport_cost,
        grad_a_points: grad_a,
        grad_b_points: grad_b,
        grad_a_mass,
        grad_b_mass,
        violation,
    })
}
