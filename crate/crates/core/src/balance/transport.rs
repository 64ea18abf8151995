//! Exact discrete optimal transport by successive shortest paths on the
//! bipartite transportation network, with Dijkstra on reduced costs.

use super::{check_mass, TransportPlan};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Largest `n * m` accepted by [`exact_transport`].
pub const MAX_EXACT_CELLS: usize = 4096;

const MASS_TOL: f64 = 1e-14;

/// Minimum of `<P, C>` over couplings of `mass_a` (rows) and `mass_b`
/// (columns). `c` is `n x m`.
pub fn exact_transport(c: &Tensor, mass_a: &[f64], mass_b: &[f64]) -> Result<TransportPlan> {
    let (n, m) = c.shape();
    if n * m > MAX_EXACT_CELLS {
        return Err(Error::TooLarge { n, m });
    }
    check_mass(mass_a, n)?;
    check_mass(mass_b, m)?;
    if !c.is_finite() {
        return Err(Error::InfeasibleLp("non-finite cost".into()));
    }
    let mut supply = mass_a.to_vec();
    let mut demand = mass_b.to_vec();
    let mut flow = vec![0.0; n * m];
    // Potentials on left (pl) and right (pr) nodes keep reduced costs
    // c_ij + pl_i - pr_j non-negative on every residual arc.
    let c_min = c.data().iter().cloned().fold(f64::INFINITY, f64::min);
    let mut pl = vec![0.0; n];
    let mut pr = vec![c_min; m];

    let mut dist_l = vec![0.0; n];
    let mut dist_r = vec![0.0; m];
    let mut done_l = vec![false; n];
    let mut done_r = vec![false; m];
    let mut parent_r = vec![usize::MAX; m]; // left node feeding right node j
    let mut parent_l = vec![usize::MAX; n]; // right node feeding back into left node i

    let total_supply = |s: &[f64]| s.iter().filter(|&&v| v > MASS_TOL).sum::<f64>();
    let mut guard = 0usize;
    while total_supply(&supply) > 1e-12 {
        guard += 1;
        if guard > 4 * (n + m) * (n + m) + 16 {
            return Err(Error::InfeasibleLp("augmentation limit reached".into()));
        }
        dist_l
            .iter_mut()
            .zip(&supply)
            .for_each(|(d, &s)| *d = if s > MASS_TOL { 0.0 } else { f64::INFINITY });
        dist_r.fill(f64::INFINITY);
        done_l.fill(false);
        done_r.fill(false);
        parent_r.fill(usize::MAX);
        parent_l.fill(usize::MAX);
        let mut target = None;
        loop {
            // Pick the unsettled node with the smallest tentative distance.
            let mut best = f64::INFINITY;
            let mut pick: Option<(bool, usize)> = None;
            for i in 0..n {
                if !done_l[i] && dist_l[i] < best {
                    best = dist_l[i];
                    pick = Some((true, i));
                }
            }
            for j in 0..m {
                if !done_r[j] && dist_r[j] < best {
                    best = dist_r[j];
                    pick = Some((false, j));
                }
            }
            let Some((left, k)) = pick else { break };
            if left {
                done_l[k] = true;
                for j in 0..m {
                    if done_r[j] {
                        continue;
                    }
                    let rc = (c.get(k, j) + pl[k] - pr[j]).max(0.0);
                    if best + rc < dist_r[j] {
                        dist_r[j] = best + rc;
                        parent_r[j] = k;
                    }
                }
            } else {
                done_r[k] = true;
                if demand[k] > MASS_TOL {
                    target = Some(k);
                    break;
                }
                for i in 0..n {
                    if done_l[i] || flow[i * m + k] <= MASS_TOL {
                        continue;
                    }
                    let rc = (-c.get(i, k) + pr[k] - pl[i]).max(0.0);
                    if best + rc < dist_l[i] {
                        dist_l[i] = best + rc;
                        parent_l[i] = k;
                    }
                }
            }
        }
        let Some(sink) = target else {
            return Err(Error::InfeasibleLp("no augmenting path".into()));
        };
        let reach = dist_r[sink];
        for i in 0..n {
            pl[i] += dist_l[i].min(reach);
        }
        for j in 0..m {
            pr[j] += dist_r[j].min(reach);
        }

        // Walk back to the source, collecting the bottleneck.
        let mut amount = demand[sink];
        let mut j = sink;
        let source = loop {
            let i = parent_r[j];
            if parent_l[i] == usize::MAX {
                break i;
            }
            let prev = parent_l[i];
            amount = amount.min(flow[i * m + prev]);
            j = prev;
        };
        amount = amount.min(supply[source]);
        let mut j = sink;
        loop {
            let i = parent_r[j];
            flow[i * m + j] += amount;
            if i == source && parent_l[i] == usize::MAX {
                break;
            }
            let prev = parent_l[i];
            flow[i * m + prev] -= amount;
            j = prev;
        }
        supply[source] -= amount;
        demand[sink] -= amount;
    }
    let cost = flow.iter().zip(c.data()).map(|(f, c)| f * c).sum();
    Ok(TransportPlan {
        coupling: Tensor::new(n, m, flow)?,
        cost,
    })
}
