//! Distances between the factual joint sample `(r, t, z)` and its product
//! counterpart `p(r) p(t, z)`: entropic Wasserstein (Sinkhorn) with gradients,
//! an exact transport solver for small instances, and weighted HSIC.

mod hsic;
mod sinkhorn;
mod transport;

pub use hsic::{hsic, hsic_permutation_null, median_bandwidth};
pub use sinkhorn::{sinkhorn_divergence, squared_distances, SinkhornConfig, SinkhornOutput};
pub use transport::{exact_transport, MAX_EXACT_CELLS};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Rows of `(r_i, t_i, z_i)` carrying probability `mass_i`.
#[derive(Debug, Clone, PartialEq)]
pub struct JointSample {
    pub r: Tensor,
    pub t: Vec<f64>,
    pub z: Vec<f64>,
    pub mass: Vec<f64>,
}

/// Checks that `mass` is a probability vector of length `n`.
pub fn check_mass(mass: &[f64], n: usize) -> Result<()> {
    if mass.len() != n {
        return Err(Error::LengthMismatch(mass.len(), n));
    }
    if let Some(&m) = mass.iter().find(|m| !(m.is_finite() && **m >= 0.0)) {
        return Err(Error::Config(format!("negative or non-finite mass {m}")));
    }
    let total: f64 = mass.iter().sum();
    if (total - 1.0).abs() > 1e-9 {
        return Err(Error::Config(format!("masses sum to {total}, not 1")));
    }
    Ok(())
}

impl JointSample {
    pub fn new(r: Tensor, t: Vec<f64>, z: Vec<f64>, mass: Vec<f64>) -> Result<Self> {
        let n = r.rows();
        if t.len() != n {
            return Err(Error::LengthMismatch(t.len(), n));
        }
        if z.len() != n {
            return Err(Error::LengthMismatch(z.len(), n));
        }
        check_mass(&mass, n)?;
        Ok(Self { r, t, z, mass })
    }

    pub fn uniform(r: Tensor, t: Vec<f64>, z: Vec<f64>) -> Result<Self> {
        let n = r.rows().max(1);
        let mass = vec![1.0 / n as f64; r.rows()];
        Self::new(r, t, z, mass)
    }

    pub fn len(&self) -> usize {
        self.r.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.r.rows() == 0
    }

    /// Joint points `[r | alpha t | alpha z]`.
    pub fn points(&self, alpha: f64) -> Tensor {
        let (n, h) = self.r.shape();
        let mut data = Vec::with_capacity(n * (h + 2));
        for i in 0..n {
            data.extend_from_slice(self.r.row_slice(i));
            data.push(alpha * self.t[i]);
            data.push(alpha * self.z[i]);
        }
        Tensor::new(n, h + 2, data).expect("sizes agree")
    }
}

/// Draws from `p(r) p(t, z)` by permuting the observed `(t, z)` pairs
/// together; rows of `r` stay in place and the result has uniform mass.
pub fn product_sample(joint: &JointSample, seed: u64) -> JointSample {
    let n = joint.len();
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    JointSample {
        r: joint.r.clone(),
        t: order.iter().map(|&k| joint.t[k]).collect(),
        z: order.iter().map(|&k| joint.z[k]).collect(),
        mass: vec![1.0 / n as f64; n],
    }
}

/// Coupling between two samples and its transport cost `<P, C>`.
#[derive(Debug, Clone, PartialEq)]
pub struct TransportPlan {
    pub coupling: Tensor,
    pub cost: f64,
}

/// Debiased entropic Wasserstein divergence between two joint samples under
/// squared Euclidean cost on `[r | t | z]`.
pub fn sinkhorn_wasserstein(
    a: &JointSample,
    b: &JointSample,
    eps: f64,
    iters: usize,
) -> Result<(f64, TransportPlan)> {
    let cfg = SinkhornConfig {
        eps,
        max_iters: iters,
        ..SinkhornConfig::default()
    };
    let out = sinkhorn_divergence(&a.points(1.0), &a.mass, &b.points(1.0), &b.mass, &cfg)?;
    let plan = TransportPlan {
        cost: out.transport_cost,
        coupling: out.plan,
    };
    Ok((out.divergence, plan))
}

/// Exact optimal transport cost between two joint samples (same cost as
/// [`sinkhorn_wasserstein`]).
pub fn exact_transport_oracle(a: &JointSample, b: &JointSample) -> Result<f64> {
    let c = squared_distances(&a.points(1.0), &b.points(1.0))?;
    Ok(exact_transport(&c, &a.mass, &b.mass)?.cost)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::synth::sample_features;

    fn sample(n: usize, seed: u64) -> JointSample {
        let r = sample_features(n, 3, seed).unwrap();
        let t = (0..n).map(|i| (i % 2) as f64).collect();
        let z = (0..n).map(|i| (i % 5) as f64 / 4.0).collect();
        JointSample::uniform(r, t, z).unwrap()
    }

    fn pairs(s: &JointSample) -> Vec<(u64, u64)> {
        let mut p: Vec<_> =
            s.t.iter()
                .zip(&s.z)
                .map(|(t, z)| (t.to_bits(), z.to_bits()))
                .collect();
        p.sort();
        p
    }

    #[test]
    fn product_sample_preserves_pair_multiset() {
        let s = sample(40, 1);
        let p = product_sample(&s, 9);
        assert_eq!(p.r, s.r);
        assert_eq!(pairs(&p), pairs(&s));
        assert!(p.mass.iter().all(|&m| m == 1.0 / 40.0));
    }

    #[test]
    fn product_sample_two_units_both_orders() {
        let s =
            JointSample::uniform(Tensor::zeros(2, 1), vec![0.0, 1.0], vec![0.25, 0.75]).unwrap();
        let swapped = (0..2000)
            .filter(|&seed| product_sample(&s, seed).t[0] == 1.0)
            .count();
        let freq = swapped as f64 / 2000.0;
        assert!((freq - 0.5).abs() < 0.05, "{freq}");
    }

    #[test]
    fn mass_validation() {
        let r = Tensor::zeros(2, 1);
        assert!(JointSample::new(r.clone(), vec![0.0; 2], vec![0.0; 2], vec![0.5, 0.6]).is_err());
        assert!(JointSample::new(r.clone(), vec![0.0; 2], vec![0.0; 2], vec![-0.5, 1.5]).is_err());
        assert!(JointSample::new(r, vec![0.0; 3], vec![0.0; 2], vec![0.5, 0.5]).is_err());
    }

    #[test]
    fn identical_samples_have_zero_divergence() {
        let s = sample(30, 2);
        let (d, plan) = sinkhorn_wasserstein(&s, &s, 0.01, 500).unwrap();
        assert!(d.abs() <= 1e-3, "{d}");
        assert_eq!(plan.coupling.shape(), (30, 30));
    }

    #[test]
    fn single_points_at_unit_distance() {
        let a = JointSample::uniform(Tensor::scalar(0.0), vec![0.0], vec![0.0]).unwrap();
        let b = JointSample::uniform(Tensor::scalar(1.0), vec![0.0], vec![0.0]).unwrap();
        let (d, _) = sinkhorn_wasserstein(&a, &b, 1e-3, 200).unwrap();
        assert!((d - 1.0).abs() < 0.02, "{d}");
    }

    #[test]
    fn agrees_with_exact_oracle_on_random_instances() {
        for (n, seed) in [(8, 1), (16, 2), (32, 3), (64, 4)] {
            let a = sample(n, seed);
            let b = product_sample(&sample(n, seed + 100), seed);
            let exact = exact_transport_oracle(&a, &b).unwrap();
            let (d, _) = sinkhorn_wasserstein(&a, &b, 1e-3, 5000).unwrap();
            assert!((d - exact).abs() <= 0.02 * exact, "n={n}: {d} vs {exact}");
        }
    }

    #[test]
    fn divergence_is_symmetric() {
        let a = sample(20, 5);
        let b = sample(25, 6);
        let (ab, _) = sinkhorn_wasserstein(&a, &b, 0.05, 2000).unwrap();
        let (ba, _) = sinkhorn_wasserstein(&b, &a, 0.05, 2000).unwrap();
        assert!((ab - ba).abs() <= 1e-9, "{ab} {ba}");
        assert!(ab >= -1e-6);
    }
}
