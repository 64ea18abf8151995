use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::check_mass;
use crate::error::{Error, Result};
use crate::tensor::Tensor;

fn pairwise_sq(x: &Tensor) -> Vec<f64> {
    let n = x.rows();
    let mut d = vec![0.0; n * n];
    for i in 0..n {
        for j in i + 1..n {
            let v: f64 = x
                .row_slice(i)
                .iter()
                .zip(x.row_slice(j))
                .map(|(a, b)| (a - b) * (a - b))
                .sum();
            d[i * n + j] = v;
            d[j * n + i] = v;
        }
    }
    d
}

/// Median of the pairwise Euclidean distances. Falls back to the median of
/// the strictly positive distances when more than half are zero; `None`
/// when all points coincide.
pub fn median_bandwidth(x: &Tensor) -> Option<f64> {
    let n = x.rows();
    let d = pairwise_sq(x);
    let mut upper: Vec<f64> = (0..n)
        .flat_map(|i| (i + 1..n).map(move |j| (i, j)))
        .map(|(i, j)| d[i * n + j])
        .collect();
    let median = |v: &mut Vec<f64>| -> Option<f64> {
        if v.is_empty() {
            return None;
        }
        let mid = v.len() / 2;
        let (_, m, _) = v.select_nth_unstable_by(mid, f64::total_cmp);
        Some(m.sqrt())
    };
    match median(&mut upper) {
        Some(m) if m > 0.0 => Some(m),
        _ => {
            let mut positive: Vec<f64> = upper.into_iter().filter(|&v| v > 0.0).collect();
            median(&mut positive)
        }
    }
}

/// Gaussian kernel matrix with the median bandwidth, centered under `mass`:
/// `(I - 1 p^T) K (I - p 1^T)`. `None` for a constant sample.
fn centered_kernel(x: &Tensor, mass: &[f64]) -> Option<Vec<f64>> {
    let n = x.rows();
    let sigma = median_bandwidth(x)?;
    let mut k: Vec<f64> = pairwise_sq(x)
        .into_iter()
        .map(|d| (-d / (2.0 * sigma * sigma)).exp())
        .collect();
    let kp: Vec<f64> = (0..n)
        .map(|i| (0..n).map(|j| k[i * n + j] * mass[j]).sum())
        .collect();
    let pkp: f64 = kp.iter().zip(mass).map(|(a, b)| a * b).sum();
    for i in 0..n {
        for j in 0..n {
            k[i * n + j] += pkp - kp[i] - kp[j];
        }
    }
    Some(k)
}

fn weighted_trace(kc: &[f64], lc: &[f64], mass: &[f64]) -> f64 {
    let n = mass.len();
    let mut s = 0.0;
    for i in 0..n {
        let mut row = 0.0;
        for j in 0..n {
            row += mass[j] * kc[i * n + j] * lc[i * n + j];
        }
        s += mass[i] * row;
    }
    s
}

fn check_inputs(x: &Tensor, y: &Tensor, mass: &[f64]) -> Result<()> {
    if x.rows() != y.rows() {
        return Err(Error::LengthMismatch(x.rows(), y.rows()));
    }
    if x.rows() < 4 {
        return Err(Error::BadDimensions(format!(
            "hsic needs at least 4 rows, got {}",
            x.rows()
        )));
    }
    check_mass(mass, x.rows())
}

/// Weighted biased HSIC `sum_ij p_i p_j Kc_ij Lc_ij` with Gaussian kernels.
/// A constant `x` or `y` has no dependence and gives 0.
pub fn hsic(x: &Tensor, y: &Tensor, mass: &[f64]) -> Result<f64> {
    check_inputs(x, y, mass)?;
    let (Some(kc), Some(lc)) = (centered_kernel(x, mass), centered_kernel(y, mass)) else {
        log::debug!("hsic: degenerate bandwidth, returning 0");
        return Ok(0.0);
    };
    Ok(weighted_trace(&kc, &lc, mass))
}

/// HSIC values with the rows of `y` randomly permuted, for a null
/// distribution under independence.
pub fn hsic_permutation_null(
    x: &Tensor,
    y: &Tensor,
    mass: &[f64],
    n_perm: usize,
    seed: u64,
) -> Result<Vec<f64>> {
    check_inputs(x, y, mass)?;
    let Some(kc) = centered_kernel(x, mass) else {
        return Ok(vec![0.0; n_perm]);
    };
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut order: Vec<usize> = (0..y.rows()).collect();
    let mut out = Vec::with_capacity(n_perm);
    for _ in 0..n_perm {
        order.shuffle(&mut rng);
        let lc =
            centered_kernel(&y.select_rows(&order), mass).unwrap_or_else(|| vec![0.0; kc.len()]);
        out.push(weighted_trace(&kc, &lc, mass));
    }
    Ok(out)
}
