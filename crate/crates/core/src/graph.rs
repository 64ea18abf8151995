//! Undirected interference graph, GCN normalization and three-way splitting.
//!
//! The edge list is the canonical storage; adjacency lists are derived once at
//! construction and never densified.

use std::collections::{BTreeSet, VecDeque};
use std::fmt;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Graph {
    n_units: usize,
    /// Canonical edges with `i < j`, sorted and unique.
    edges: Vec<(usize, usize)>,
    adjacency: Vec<Vec<usize>>,
}

impl Graph {
    /// Builds a graph from an arbitrary pair list. Duplicate pairs (in either
    /// orientation) collapse to one edge.
    pub fn new(n_units: usize, pairs: &[(usize, usize)]) -> Result<Self> {
        let mut unique = BTreeSet::new();
        for &(i, j) in pairs {
            for index in [i, j] {
                if index >= n_units {
                    return Err(Error::IndexOutOfRange { index, n_units });
                }
            }
            if i == j {
                return Err(Error::SelfLoop(i));
            }
            unique.insert((i.min(j), i.max(j)));
        }
        let edges: Vec<_> = unique.into_iter().collect();
        let mut adjacency = vec![Vec::new(); n_units];
        for &(i, j) in &edges {
            adjacency[i].push(j);
            adjacency[j].push(i);
        }
        for list in &mut adjacency {
            list.sort_unstable();
        }
        Ok(Self {
            n_units,
            edges,
            adjacency,
        })
    }

    pub fn n_units(&self) -> usize {
        self.n_units
    }

    pub fn edges(&self) -> &[(usize, usize)] {
        &self.edges
    }

    pub fn n_edges(&self) -> usize {
        self.edges.len()
    }

    pub fn neighbors(&self, i: usize) -> &[usize] {
        &self.adjacency[i]
    }

    pub fn degree(&self, i: usize) -> usize {
        self.adjacency[i].len()
    }

    pub fn degrees(&self) -> Vec<usize> {
        self.adjacency.iter().map(Vec::len).collect()
    }

    pub fn has_edge(&self, i: usize, j: usize) -> bool {
        self.adjacency
            .get(i)
            .is_some_and(|list| list.binary_search(&j).is_ok())
    }

    /// First unit with no neighbors, if any.
    pub fn first_isolated(&self) -> Option<usize> {
        self.adjacency.iter().position(Vec::is_empty)
    }

    /// Symmetric GCN coefficient `1 / sqrt(d_i d_j)` for the edge `(i, j)`.
    pub fn gcn_coefficient(&self, i: usize, j: usize) -> Result<f64> {
        let (di, dj) = (self.degree(i), self.degree(j));
        if di == 0 || dj == 0 {
            return Err(Error::IsolatedEndpoint(i, j));
        }
        Ok(1.0 / ((di * dj) as f64).sqrt())
    }

    /// Coefficients aligned with [`Graph::edges`].
    pub fn gcn_coefficients(&self) -> Vec<f64> {
        self.edges
            .iter()
            .map(|&(i, j)| {
                self.gcn_coefficient(i, j)
                    .expect("every edge endpoint has degree >= 1")
            })
            .collect()
    }

    /// Computes `sum_{j in N_i} c_ij * values[j]` row-wise for a row-major
    /// `n_units x cols` matrix.
    pub fn gcn_propagate(&self, values: &[f64], cols: usize) -> Vec<f64> {
        assert_eq!(values.len(), self.n_units * cols);
        let mut out = vec![0.0; values.len()];
        for (i, neighbors) in self.adjacency.iter().enumerate() {
            let di = neighbors.len() as f64;
            let row = &mut out[i * cols..(i + 1) * cols];
            for &j in neighbors {
                let c = 1.0 / (di * self.adjacency[j].len() as f64).sqrt();
                for (o, v) in row.iter_mut().zip(&values[j * cols..(j + 1) * cols]) {
                    *o += c * v;
                }
            }
        }
        out
    }

    /// Row-wise neighbor mean of a row-major `n_units x cols` matrix.
    pub fn neighbor_mean(&self, values: &[f64], cols: usize) -> Result<Vec<f64>> {
        assert_eq!(values.len(), self.n_units * cols);
        let mut out = vec![0.0; values.len()];
        for (i, neighbors) in self.adjacency.iter().enumerate() {
            if neighbors.is_empty() {
                return Err(Error::IsolatedUnit(i));
            }
            let row = &mut out[i * cols..(i + 1) * cols];
            for &j in neighbors {
                for (o, v) in row.iter_mut().zip(&values[j * cols..(j + 1) * cols]) {
                    *o += v;
                }
            }
            let inv = 1.0 / neighbors.len() as f64;
            row.iter_mut().for_each(|o| *o *= inv);
        }
        Ok(out)
    }

    /// Subgraph induced by `units` (cut edges dropped). Unit `k` of the result
    /// is `units[k]` of `self`.
    pub fn induced_subgraph(&self, units: &[usize]) -> Graph {
        let mut local = vec![usize::MAX; self.n_units];
        for (k, &u) in units.iter().enumerate() {
            local[u] = k;
        }
        let pairs: Vec<_> = self
            .edges
            .iter()
            .filter_map(|&(i, j)| {
                let (a, b) = (local[i], local[j]);
                (a != usize::MAX && b != usize::MAX).then_some((a, b))
            })
            .collect();
        Graph::new(units.len(), &pairs).expect("induced edges are valid")
    }

    /// Seeded Watts-Strogatz small-world graph: ring lattice with
    /// `mean_degree / 2` neighbors per side, each lattice edge rewired with
    /// probability `rewire`.
    pub fn small_world(n_units: usize, mean_degree: usize, rewire: f64, seed: u64) -> Result<Self> {
        let half = mean_degree / 2;
        if half == 0 || n_units <= 2 * half {
            return Err(Error::BadDimensions(format!(
                "small-world graph needs n_units > mean_degree >= 2 (got {n_units}, {mean_degree})"
            )));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut present: BTreeSet<(usize, usize)> = BTreeSet::new();
        for i in 0..n_units {
            for s in 1..=half {
                let j = (i + s) % n_units;
                present.insert((i.min(j), i.max(j)));
            }
        }
        for s in 1..=half {
            for i in 0..n_units {
                let j = (i + s) % n_units;
                let key = (i.min(j), i.max(j));
                if rng.gen::<f64>() >= rewire || !present.contains(&key) {
                    continue;
                }
                // Keep `i`, pick a fresh partner; give up after a few tries on
                // dense graphs.
                for _ in 0..16 {
                    let k = rng.gen_range(0..n_units);
                    let candidate = (i.min(k), i.max(k));
                    if k != i && !present.contains(&candidate) {
                        present.remove(&key);
                        present.insert(candidate);
                        break;
                    }
                }
            }
        }
        let pairs: Vec<_> = present.into_iter().collect();
        Graph::new(n_units, &pairs)
    }

    /// Seeded Erdős–Rényi graph with edge probability `p`.
    pub fn erdos_renyi(n_units: usize, p: f64, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut pairs = Vec::new();
        for i in 0..n_units {
            for j in i + 1..n_units {
                if rng.gen::<f64>() < p {
                    pairs.push((i, j));
                }
            }
        }
        Graph::new(n_units, &pairs).expect("generated pairs are valid")
    }

    /// Parses the whitespace-separated `i j` edge-list format. Lines starting
    /// with `#` and blank lines are skipped. When `n_units` is `None` it is
    /// inferred as the largest index plus one.
    pub fn parse_edge_list(text: &str, n_units: Option<usize>) -> Result<Self> {
        let mut pairs = Vec::new();
        for (lineno, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let mut fields = line.split_whitespace();
            let mut next = || -> Result<usize> {
                fields
                    .next()
                    .ok_or_else(|| {
                        Error::Parse(format!("line {}: expected two indices", lineno + 1))
                    })?
                    .parse::<usize>()
                    .map_err(|e| Error::Parse(format!("line {}: {e}", lineno + 1)))
            };
            let (i, j) = (next()?, next()?);
            pairs.push((i, j));
        }
        let inferred = pairs.iter().map(|&(i, j)| i.max(j) + 1).max().unwrap_or(0);
        Graph::new(n_units.unwrap_or(inferred), &pairs)
    }

    pub fn read_edge_list(path: &Path, n_units: Option<usize>) -> Result<Self> {
        Self::parse_edge_list(&std::fs::read_to_string(path)?, n_units)
    }

    pub fn to_edge_list(&self) -> String {
        let mut out = format!("# {} units, {} edges\n", self.n_units, self.edges.len());
        for &(i, j) in &self.edges {
            out.push_str(&format!("{i} {j}\n"));
        }
        out
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Valid,
    Test,
}

impl Split {
    pub const ALL: [Split; 3] = [Split::Train, Split::Valid, Split::Test];

    fn index(self) -> usize {
        self as usize
    }
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Split::Train => "train",
            Split::Valid => "valid",
            Split::Test => "test",
        })
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Partition {
    pub assignment: Vec<Split>,
    pub cut_edges: usize,
}

impl Partition {
    pub fn units(&self, split: Split) -> Vec<usize> {
        self.assignment
            .iter()
            .enumerate()
            .filter_map(|(i, &s)| (s == split).then_some(i))
            .collect()
    }

    pub fn sizes(&self) -> [usize; 3] {
        let mut sizes = [0; 3];
        for s in &self.assignment {
            sizes[s.index()] += 1;
        }
        sizes
    }
}

/// Number of edges whose endpoints carry different labels.
pub fn cut_size(graph: &Graph, labels: &[usize]) -> usize {
    graph
        .edges()
        .iter()
        .filter(|&&(i, j)| labels[i] != labels[j])
        .count()
}

/// Part-size tolerance: within 20% of the target, never tighter than one unit
/// (small parts cannot hit a fractional target exactly).
pub fn size_within_tolerance(size: usize, target: f64) -> bool {
    size > 0 && (size as f64 - target).abs() <= (0.2 * target).max(1.0) + 1e-9
}

const PARTITION_ATTEMPTS: u64 = 8;
const REFINE_PASSES: usize = 32;

/// Splits the graph into train/valid/test parts by seeded region growing from
/// three spread-out roots followed by greedy boundary refinement. Several root
/// draws are tried and the lowest cut is kept.
pub fn partition_three_way(graph: &Graph, fractions: [f64; 3], seed: u64) -> Result<Partition> {
    let n = graph.n_units();
    if n < 3 {
        return Err(Error::TooFewUnits(n));
    }
    if fractions.iter().any(|&f| !(f > 0.0)) || (fractions.iter().sum::<f64>() - 1.0).abs() > 1e-9 {
        return Err(Error::BadFractions(format!("{fractions:?}")));
    }
    let targets = fractions.map(|f| f * n as f64);
    let quotas = quotas(n, &fractions);

    let mut best: Option<(usize, Vec<usize>)> = None;
    for attempt in 0..PARTITION_ATTEMPTS {
        let mut rng = ChaCha8Rng::seed_from_u64(seed.wrapping_mul(0x9E37_79B9_7F4A_7C15) ^ attempt);
        let mut labels = grow_regions(graph, &quotas, &mut rng);
        refine(graph, &mut labels, &targets);
        let cut = cut_size(graph, &labels);
        if best.as_ref().map_or(true, |(c, _)| cut < *c) {
            best = Some((cut, labels));
        }
    }
    let (cut_edges, labels) = best.expect("at least one attempt");
    Ok(Partition {
        assignment: labels.iter().map(|&l| Split::ALL[l]).collect(),
        cut_edges,
    })
}

/// Largest-remainder integer sizes, each at least one.
fn quotas(n: usize, fractions: &[f64; 3]) -> [usize; 3] {
    let raw = fractions.map(|f| f * n as f64);
    let mut q = raw.map(|r| r.floor() as usize);
    let mut order: Vec<usize> = (0..3).collect();
    order.sort_by(|&a, &b| {
        (raw[b] - raw[b].floor())
            .partial_cmp(&(raw[a] - raw[a].floor()))
            .unwrap()
            .then(a.cmp(&b))
    });
    let mut rest = n - q.iter().sum::<usize>();
    for &k in order.iter().cycle() {
        if rest == 0 {
            break;
        }
        q[k] += 1;
        rest -= 1;
    }
    for k in 0..3 {
        if q[k] == 0 {
            let donor = (0..3).max_by_key(|&d| q[d]).unwrap();
            q[donor] -= 1;
            q[k] = 1;
        }
    }
    q
}

fn bfs_distances(graph: &Graph, roots: &[usize]) -> Vec<usize> {
    let mut dist = vec![usize::MAX; graph.n_units()];
    let mut queue = VecDeque::new();
    for &r in roots {
        dist[r] = 0;
        queue.push_back(r);
    }
    while let Some(v) = queue.pop_front() {
        for &u in graph.neighbors(v) {
            if dist[u] == usize::MAX {
                dist[u] = dist[v] + 1;
                queue.push_back(u);
            }
        }
    }
    dist
}

fn farthest(dist: &[usize], taken: &[usize]) -> usize {
    (0..dist.len())
        .filter(|v| !taken.contains(v))
        .max_by_key(|&v| (dist[v], std::cmp::Reverse(v)))
        .expect("at least one free unit")
}

fn grow_regions(graph: &Graph, quotas: &[usize; 3], rng: &mut ChaCha8Rng) -> Vec<usize> {
    let n = graph.n_units();
    let r0 = rng.gen_range(0..n);
    let r1 = farthest(&bfs_distances(graph, &[r0]), &[r0]);
    let r2 = farthest(&bfs_distances(graph, &[r0, r1]), &[r0, r1]);
    let mut roots = [r0, r1, r2];
    roots.shuffle(rng);

    const FREE: usize = usize::MAX;
    let mut labels = vec![FREE; n];
    let mut sizes = [0usize; 3];
    let mut frontiers: [VecDeque<usize>; 3] = Default::default();
    for (p, &r) in roots.iter().enumerate() {
        frontiers[p].push_back(r);
    }
    let mut free_pool: Vec<usize> = (0..n).collect();
    free_pool.shuffle(rng);

    for _ in 0..n {
        // Grow the least-filled part that still has room.
        let p = (0..3)
            .filter(|&p| sizes[p] < quotas[p])
            .min_by(|&a, &b| {
                let fa = sizes[a] as f64 / quotas[a] as f64;
                let fb = sizes[b] as f64 / quotas[b] as f64;
                fa.partial_cmp(&fb).unwrap().then(a.cmp(&b))
            })
            .expect("quotas sum to n");
        let mut next = None;
        while let Some(v) = frontiers[p].pop_front() {
            if labels[v] == FREE {
                next = Some(v);
                break;
            }
        }
        let v = match next {
            Some(v) => v,
            None => {
                while labels[*free_pool.last().unwrap()] != FREE {
                    free_pool.pop();
                }
                free_pool.pop().unwrap()
            }
        };
        labels[v] = p;
        sizes[p] += 1;
        for &u in graph.neighbors(v) {
            if labels[u] == FREE {
                frontiers[p].push_back(u);
            }
        }
    }
    labels
}

/// Greedy single moves and pairwise swaps with positive cut gain, subject to
/// the size tolerance.
fn refine(graph: &Graph, labels: &mut [usize], targets: &[f64; 3]) {
    let n = graph.n_units();
    let mut sizes = [0usize; 3];
    for &l in labels.iter() {
        sizes[l] += 1;
    }
    let counts = |labels: &[usize], v: usize| {
        let mut c = [0i64; 3];
        for &u in graph.neighbors(v) {
            c[labels[u]] += 1;
        }
        c
    };
    for _ in 0..REFINE_PASSES {
        let mut improved = false;
        for v in 0..n {
            let from = labels[v];
            let c = counts(labels, v);
            let best = (0..3)
                .filter(|&to| to != from)
                .filter(|&to| {
                    size_within_tolerance(sizes[from] - 1, targets[from])
                        && size_within_tolerance(sizes[to] + 1, targets[to])
                })
                .map(|to| (c[to] - c[from], to))
                .filter(|&(gain, _)| gain > 0)
                .max_by_key(|&(gain, to)| (gain, std::cmp::Reverse(to)));
            if let Some((_, to)) = best {
                labels[v] = to;
                sizes[from] -= 1;
                sizes[to] += 1;
                improved = true;
            }
        }
        let boundary: Vec<usize> = (0..n)
            .filter(|&v| graph.neighbors(v).iter().any(|&u| labels[u] != labels[v]))
            .collect();
        for (a, &v) in boundary.iter().enumerate() {
            for &u in &boundary[a + 1..] {
                let (lv, lu) = (labels[v], labels[u]);
                if lv == lu {
                    continue;
                }
                let (cv, cu) = (counts(labels, v), counts(labels, u));
                let adjacent = graph.has_edge(v, u) as i64;
                let gain = (cv[lu] - cv[lv]) + (cu[lv] - cu[lu]) - 2 * adjacent;
                if gain > 0 {
                    labels[v] = lu;
                    labels[u] = lv;
                    improved = true;
                }
            }
        }
        if !improved {
            break;
        }
    }
}
