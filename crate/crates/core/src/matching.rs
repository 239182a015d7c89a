//! Square assignment between slots and padded label rows.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Square matrix of finite assignment costs; `cost[i][j]` is slot `i`
/// against label row `j`.
#[derive(Debug, Clone, PartialEq)]
pub struct CostMatrix {
    n: usize,
    data: Vec<f64>,
}

impl CostMatrix {
    pub fn new(n: usize, data: Vec<f64>) -> Result<Self> {
        if n == 0 {
            return Err(Error::Empty("cost matrix".into()));
        }
        if data.len() != n * n {
            return Err(Error::Shape(format!(
                "cost matrix: {} values is not square for n={n}",
                data.len()
            )));
        }
        if let Some(k) = data.iter().position(|v| !v.is_finite()) {
            return Err(Error::NonFinite(format!(
                "cost matrix entry ({}, {}) = {}",
                k / n,
                k % n,
                data[k]
            )));
        }
        Ok(Self { n, data })
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let n = rows.len();
        if let Some(r) = rows.iter().position(|r| r.len() != n) {
            return Err(Error::Shape(format!(
                "cost matrix: row {r} has {} entries, expected {n}",
                rows[r].len()
            )));
        }
        Self::new(n, rows.concat())
    }

    pub fn from_tensor(t: &Tensor) -> Result<Self> {
        let (r, c) = t.matrix_dims("cost matrix")?;
        if r != c {
            return Err(Error::Shape(format!("cost matrix: {r}x{c} is not square")));
        }
        Self::new(r, t.data().to_vec())
    }

    pub fn n(&self) -> usize {
        self.n
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.data[i * self.n + j]
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.n..(i + 1) * self.n]
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn to_tensor(&self) -> Tensor {
        Tensor::from_matrix(self.n, self.n, self.data.clone()).expect("square")
    }
}

/// `perm[i]` is the label column given to slot `i`.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Assignment {
    pub perm: Vec<usize>,
}

impl Assignment {
    pub fn identity(n: usize) -> Self {
        Self {
            perm: (0..n).collect(),
        }
    }

    /// Sum of assigned costs, accumulated in row order.
    pub fn total(&self, cost: &CostMatrix) -> f64 {
        self.perm
            .iter()
            .enumerate()
            .map(|(i, &j)| cost.get(i, j))
            .sum()
    }

    /// Row assigned to each column.
    pub fn inverse(&self) -> Vec<usize> {
        let mut inv = vec![0; self.perm.len()];
        for (i, &j) in self.perm.iter().enumerate() {
            inv[j] = i;
        }
        inv
    }
}

/// Largest matrix `brute_force_assign` accepts.
pub const BRUTE_FORCE_MAX: usize = 8;

/// Minimum-cost assignment. Among optimal assignments the lexicographically
/// smallest permutation is returned.
pub fn hungarian(cost: &CostMatrix) -> Assignment {
    let n = cost.n;
    let (u, v) = dual_potentials(cost);

    // Complementary slackness: every optimal permutation uses only edges with
    // zero reduced cost, so the tie-break searches that subgraph.
    let scale = cost.data.iter().fold(1.0f64, |m, c| m.max(c.abs()));
    let tol = 1e-9 * scale;
    let mut tight = vec![false; n * n];
    for i in 0..n {
        for j in 0..n {
            tight[i * n + j] = (cost.get(i, j) - u[i] - v[j]).abs() <= tol;
        }
    }

    let mut perm = Vec::with_capacity(n);
    let mut used = vec![false; n];
    for i in 0..n {
        let j = (0..n)
            .find(|&j| {
                if used[j] || !tight[i * n + j] {
                    return false;
                }
                used[j] = true;
                let ok = has_perfect_matching(&tight, n, i + 1, &used);
                used[j] = false;
                ok
            })
            .expect("optimal assignment exists on tight edges");
        used[j] = true;
        perm.push(j);
    }
    Assignment { perm }
}

/// Row and column potentials of an optimal dual solution (classic O(n^3)
/// shortest augmenting path method).
fn dual_potentials(cost: &CostMatrix) -> (Vec<f64>, Vec<f64>) {
    let n = cost.n;
    // 1-based internal arrays; index 0 is the virtual source column.
    let mut u = vec![0.0; n + 1];
    let mut v = vec![0.0; n + 1];
    let mut owner = vec![0usize; n + 1];
    let mut way = vec![0usize; n + 1];
    for i in 1..=n {
        owner[0] = i;
        let mut j0 = 0;
        let mut minv = vec![f64::INFINITY; n + 1];
        let mut done = vec![false; n + 1];
        loop {
            done[j0] = true;
            let i0 = owner[j0];
            let mut delta = f64::INFINITY;
            let mut j1 = 0;
            for j in 1..=n {
                if done[j] {
                    continue;
                }
                let cur = cost.get(i0 - 1, j - 1) - u[i0] - v[j];
                if cur < minv[j] {
                    minv[j] = cur;
                    way[j] = j0;
                }
                if minv[j] < delta {
                    delta = minv[j];
                    j1 = j;
                }
            }
            for j in 0..=n {
                if done[j] {
                    u[owner[j]] += delta;
                    v[j] -= delta;
                } else {
                    minv[j] -= delta;
                }
            }
            j0 = j1;
            if owner[j0] == 0 {
                break;
            }
        }
        loop {
            let j1 = way[j0];
            owner[j0] = owner[j1];
            j0 = j1;
            if j0 == 0 {
                break;
            }
        }
    }
    (u[1..].to_vec(), v[1..].to_vec())
}

/// Whether rows `from..n` can be matched to unused columns over `edges`.
fn has_perfect_matching(edges: &[bool], n: usize, from: usize, used: &[bool]) -> bool {
    let mut col_owner: Vec<Option<usize>> = vec![None; n];
    for i in from..n {
        let mut seen = vec![false; n];
        if !augment(edges, n, i, used, &mut seen, &mut col_owner) {
            return false;
        }
    }
    true
}

fn augment(
    edges: &[bool],
    n: usize,
    i: usize,
    used: &[bool],
    seen: &mut [bool],
    col_owner: &mut [Option<usize>],
) -> bool {
    for j in 0..n {
        if used[j] || seen[j] || !edges[i * n + j] {
            continue;
        }
        seen[j] = true;
        let free = match col_owner[j] {
            None => true,
            Some(k) => augment(edges, n, k, used, seen, col_owner),
        };
        if free {
            col_owner[j] = Some(i);
            return true;
        }
    }
    false
}

/// Exhaustive search over all permutations in lexicographic order; keeps the
/// first one with the smallest row-order total.
pub fn brute_force_assign(cost: &CostMatrix) -> Result<Assignment> {
    let n = cost.n;
    if n > BRUTE_FORCE_MAX {
        return Err(Error::Invalid(format!(
            "brute_force_assign: n={n} exceeds {BRUTE_FORCE_MAX}"
        )));
    }
    let mut perm: Vec<usize> = (0..n).collect();
    let mut best = perm.clone();
    let mut best_total = Assignment { perm: perm.clone() }.total(cost);
    while next_permutation(&mut perm) {
        let total: f64 = perm.iter().enumerate().map(|(i, &j)| cost.get(i, j)).sum();
        if total < best_total {
            best_total = total;
            best.copy_from_slice(&perm);
        }
    }
    Ok(Assignment { perm: best })
}

fn next_permutation(p: &mut [usize]) -> bool {
    let n = p.len();
    if n < 2 {
        return false;
    }
    let mut i = n - 1;
    while i > 0 && p[i - 1] >= p[i] {
        i -= 1;
    }
    if i == 0 {
        return false;
    }
    let mut j = n - 1;
    while p[j] <= p[i - 1] {
        j -= 1;
    }
    p.swap(i - 1, j);
    p[i..].reverse();
    true
}
