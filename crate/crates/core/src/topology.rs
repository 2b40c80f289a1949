//! Multiscale hypergraph topology inference.
//!
//! Agents are embedded from their trajectories (`f_Q`), pairwise cosine
//! affinities form an `N x N` matrix, and hyperedges are found per scale by
//! maximizing the entrywise L1 norm of the `K x K` affinity submatrix that
//! contains the seed node — exactly (enumeration) or greedily.
//!
//! The discrete set selection is a stop-gradient operation: affinities are
//! computed from detached embedding values, and gradients reach `f_Q` only
//! through the agent-embedding path of the message-passing encoder.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::graph::{Graph, Var};
use crate::nn::{mlp_forward, ParameterStore};
use crate::scalar::Scalar;

/// Pairwise cosine affinities, symmetric with unit diagonal.
#[derive(Debug, Clone)]
pub struct AffinityMatrix {
    pub n: usize,
    vals: Vec<f64>,
}

impl AffinityMatrix {
    pub fn from_rows(n: usize, vals: Vec<f64>) -> Result<Self> {
        if vals.len() != n * n {
            return Err(Error::dim(format!(
                "affinity needs {}x{} values, got {}",
                n,
                n,
                vals.len()
            )));
        }
        Ok(AffinityMatrix { n, vals })
    }

    #[inline]
    pub fn at(&self, i: usize, j: usize) -> f64 {
        self.vals[i * self.n + j]
    }

    pub fn rows(&self) -> impl Iterator<Item = &[f64]> {
        self.vals.chunks(self.n)
    }
}

/// Hyperedge search strategy for scales `s >= 1`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum Solver {
    Exact,
    Greedy,
    /// Exact while the enumeration stays below 1e5 candidate sets per seed.
    #[default]
    Auto,
}

/// Hyperedges of one scale. `group_size` is 2 at scale 0 (pairwise edges,
/// `N * K0` of them) and `K^(s)` at scale `s >= 1` (one hyperedge per seed
/// node, duplicates kept).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScaleTopology {
    pub group_size: usize,
    pub hyperedges: Vec<Vec<usize>>,
}

impl ScaleTopology {
    /// Dense incidence matrix `N x M` with 0/1 entries.
    pub fn incidence(&self, n: usize) -> Vec<Vec<u8>> {
        let m = self.hyperedges.len();
        let mut h = vec![vec![0u8; m]; n];
        for (j, edge) in self.hyperedges.iter().enumerate() {
            for &i in edge {
                h[i][j] = 1;
            }
        }
        h
    }
}

/// One hypergraph per scale over a fixed agent set.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MultiscaleHypergraph {
    pub n_agents: usize,
    pub scales: Vec<ScaleTopology>,
}

/// Embed past trajectories with the registered `f_Q` MLP. `traj` rows are
/// agents (or batched scene-agent pairs), columns the flattened `2 T`
/// coordinates.
pub fn embed_trajectories<S: Scalar>(
    g: &mut Graph<S>,
    ps: &ParameterStore<S>,
    prefix: &str,
    traj: Var,
    widths: &[usize],
) -> Result<Var> {
    mlp_forward(g, ps, prefix, traj, widths)
}

/// Cosine affinity matrix from detached embedding rows (`n x d`).
pub fn affinity(q: &[f64], n: usize, d: usize) -> Result<AffinityMatrix> {
    if q.len() != n * d {
        return Err(Error::dim(format!(
            "affinity: {n} agents x {d} dims != {} values",
            q.len()
        )));
    }
    let mut norms = Vec::with_capacity(n);
    for i in 0..n {
        let row = &q[i * d..(i + 1) * d];
        let norm = row.iter().map(|x| x * x).sum::<f64>().sqrt();
        if norm <= 1e-8 {
            return Err(Error::DegenerateEmbedding(format!(
                "agent {i} has near-zero embedding norm {norm:e}"
            )));
        }
        norms.push(norm);
    }
    let mut vals = vec![0.0f64; n * n];
    for i in 0..n {
        for j in i..n {
            let a = &q[i * d..(i + 1) * d];
            let b = &q[j * d..(j + 1) * d];
            let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
            let c = dot / (norms[i] * norms[j]);
            vals[i * n + j] = c;
            vals[j * n + i] = c;
        }
    }
    AffinityMatrix::from_rows(n, vals)
}

/// Scale-0 pairwise edges: each node contributes `k0` edges to its
/// highest-affinity neighbors (self excluded, ties to the lower index).
/// Duplicate edges from both endpoints are kept, matching `M_0 = N * K0`.
pub fn pairwise_edges(a: &AffinityMatrix, k0: usize) -> Result<ScaleTopology> {
    let n = a.n;
    if k0 < 1 || k0 > n.saturating_sub(1) {
        return Err(Error::config(format!(
            "k0 = {k0} out of range [1, {}]",
            n.saturating_sub(1)
        )));
    }
    let mut hyperedges = Vec::with_capacity(n * k0);
    for i in 0..n {
        let mut neighbors: Vec<usize> = (0..n).filter(|&j| j != i).collect();
        // sort by affinity descending, index ascending on ties
        neighbors.sort_by(|&x, &y| {
            a.at(i, y)
                .partial_cmp(&a.at(i, x))
                .unwrap_or(std::cmp::Ordering::Equal)
                .then(x.cmp(&y))
        });
        for &j in neighbors.iter().take(k0) {
            let mut edge = vec![i, j];
            edge.sort_unstable();
            hyperedges.push(edge);
        }
    }
    Ok(ScaleTopology {
        group_size: 2,
        hyperedges,
    })
}

/// Search objective: sum of |A_uv| over the candidate set (entrywise L1 norm
/// of the submatrix, diagonal included).
pub fn subset_objective(a: &AffinityMatrix, set: &[usize]) -> f64 {
    let mut s = 0.0;
    for &u in set {
        for &v in set {
            s += a.at(u, v).abs();
        }
    }
    s
}

fn check_k(n: usize, k: usize) -> Result<()> {
    if k < 2 || k > n {
        return Err(Error::config(format!("group size k = {k} out of [2, {n}]")));
    }
    Ok(())
}

/// Visit every `choose`-subset of `pool` in lexicographic order.
fn for_each_combination(pool: &[usize], choose: usize, mut f: impl FnMut(&[usize])) {
    if choose > pool.len() {
        return;
    }
    if choose == 0 {
        f(&[]);
        return;
    }
    let n = pool.len();
    let mut idx: Vec<usize> = (0..choose).collect();
    let mut current: Vec<usize> = idx.iter().map(|&i| pool[i]).collect();
    loop {
        f(&current);
        // find rightmost index that can still advance
        let mut i = choose;
        let mut found = false;
        while i > 0 {
            i -= 1;
            if idx[i] != i + n - choose {
                found = true;
                break;
            }
        }
        if !found {
            return;
        }
        idx[i] += 1;
        for j in i + 1..choose {
            idx[j] = idx[j - 1] + 1;
        }
        for (c, &p) in current.iter_mut().zip(idx.iter()) {
            *c = pool[p];
        }
    }
}

/// Exact hyperedge search: enumerate all `C(N-1, K-1)` supersets of the seed
/// and return the set with the largest objective. Lexicographically smallest
/// set wins ties; output is sorted ascending.
pub fn hyperedge_exact(a: &AffinityMatrix, seed: usize, k: usize) -> Result<Vec<usize>> {
    check_k(a.n, k)?;
    let pool: Vec<usize> = (0..a.n).filter(|&j| j != seed).collect();
    let mut best: Option<(f64, Vec<usize>)> = None;
    for_each_combination(&pool, k - 1, |rest| {
        let mut set = Vec::with_capacity(k);
        set.push(seed);
        set.extend_from_slice(rest);
        set.sort_unstable();
        let obj = subset_objective(a, &set);
        let better = match &best {
            None => true,
            Some((b, bset)) => obj > *b || (obj == *b && set < *bset),
        };
        if better {
            best = Some((obj, set));
        }
    });
    Ok(best.expect("k <= n guarantees at least one candidate").1)
}

/// Greedy hyperedge search: start from the seed and repeatedly add the
/// unselected node with maximum affinity *to the seed* (ties to the lower
/// index). Output is sorted ascending.
pub fn hyperedge_greedy(a: &AffinityMatrix, seed: usize, k: usize) -> Result<Vec<usize>> {
    check_k(a.n, k)?;
    let mut rest: Vec<usize> = (0..a.n).filter(|&j| j != seed).collect();
    rest.sort_by(|&x, &y| {
        a.at(seed, y)
            .partial_cmp(&a.at(seed, x))
            .unwrap_or(std::cmp::Ordering::Equal)
            .then(x.cmp(&y))
    });
    let mut set: Vec<usize> = std::iter::once(seed)
        .chain(rest.into_iter().take(k - 1))
        .collect();
    set.sort_unstable();
    Ok(set)
}

/// Number of candidate sets the exact solver would enumerate.
fn enumeration_count(n: usize, k: usize) -> f64 {
    let mut c = 1.0f64;
    for i in 0..(k - 1) {
        c *= (n - 1 - i) as f64 / (i + 1) as f64;
    }
    c
}

const AUTO_EXACT_LIMIT: f64 = 1e5;

/// Infer the full multiscale hypergraph: scale 0 from [`pairwise_edges`],
/// one hyperedge per seed node at every scale in `scale_sizes` (which must be
/// strictly increasing). `scale_sizes` may be empty (pairwise only).
pub fn infer_multiscale(
    a: &AffinityMatrix,
    k0: usize,
    scale_sizes: &[usize],
    solver: Solver,
) -> Result<MultiscaleHypergraph> {
    for w in scale_sizes.windows(2) {
        if w[1] <= w[0] {
            return Err(Error::config(format!(
                "scale sizes must be strictly increasing, got {scale_sizes:?}"
            )));
        }
    }
    let mut scales = vec![pairwise_edges(a, k0)?];
    for &k in scale_sizes {
        check_k(a.n, k)?;
        let use_exact = match solver {
            Solver::Exact => true,
            Solver::Greedy => false,
            Solver::Auto => enumeration_count(a.n, k) <= AUTO_EXACT_LIMIT,
        };
        let hyperedges: Vec<Vec<usize>> = (0..a.n)
            .map(|seed| {
                if use_exact {
                    hyperedge_exact(a, seed, k)
                } else {
                    hyperedge_greedy(a, seed, k)
                }
            })
            .collect::<Result<_>>()?;
        scales.push(ScaleTopology {
            group_size: k,
            hyperedges,
        });
    }
    Ok(MultiscaleHypergraph {
        n_agents: a.n,
        scales,
    })
}
