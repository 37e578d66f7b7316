//! Weighted communication digraph with leader pinning.
//!
//! Convention: `a_ij > 0` means agent `i` receives information from agent `j`
//! (an edge `j -> i`). Agent indices are zero-based throughout the library;
//! config files use one-based indices.

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct DiGraph {
    adjacency: DMatrix<f64>,
    pinning: DVector<f64>,
}

impl DiGraph {
    pub fn new(adjacency: DMatrix<f64>, pinning: DVector<f64>) -> Result<Self> {
        let n = adjacency.nrows();
        if n == 0 {
            return Err(Error::invalid("graph", "at least one agent is required"));
        }
        if adjacency.ncols() != n {
            return Err(Error::dims("adjacency columns", n, adjacency.ncols()));
        }
        if pinning.len() != n {
            return Err(Error::dims("pinning vector", n, pinning.len()));
        }
        for i in 0..n {
            for j in 0..n {
                let a = adjacency[(i, j)];
                if !a.is_finite() || a < 0.0 {
                    return Err(Error::invalid(
                        "graph",
                        format!("edge weight a_{}{} = {a} must be finite and nonnegative", i + 1, j + 1),
                    ));
                }
            }
            if adjacency[(i, i)] != 0.0 {
                return Err(Error::invalid(
                    "graph",
                    format!("self loop on agent {}", i + 1),
                ));
            }
        }
        if pinning.iter().any(|b| !b.is_finite() || *b < 0.0) {
            return Err(Error::invalid("graph", "pinning gains must be finite and nonnegative"));
        }
        if !pinning.iter().any(|b| *b > 0.0) {
            return Err(Error::invalid(
                "graph",
                "b_i > 0 for at least one i (no agent is pinned to the leader)",
            ));
        }
        Ok(Self { adjacency, pinning })
    }

    /// Builds a graph from `(from, to, weight)` triples with zero-based indices.
    pub fn from_edges(n: usize, edges: &[(usize, usize, f64)], pinning: Vec<f64>) -> Result<Self> {
        let mut adjacency = DMatrix::zeros(n, n);
        for &(from, to, w) in edges {
            if from >= n || to >= n {
                return Err(Error::IndexOutOfRange {
                    index: from.max(to),
                    n_agents: n,
                });
            }
            if adjacency[(to, from)] != 0.0 {
                return Err(Error::invalid(
                    "graph",
                    format!("repeated edge {} -> {}", from + 1, to + 1),
                ));
            }
            adjacency[(to, from)] = w;
        }
        Self::new(adjacency, DVector::from_vec(pinning))
    }

    /// Directed ring with unit weights where agent `i` hears agent `i - 1 (mod n)`,
    /// pinned to the leader at `pinned` with gain `gain`.
    pub fn directed_ring(n: usize, pinned: usize, gain: f64) -> Result<Self> {
        let edges: Vec<_> = (0..n).map(|i| ((i + n - 1) % n, i, 1.0)).collect();
        let mut pinning = vec![0.0; n];
        if pinned >= n {
            return Err(Error::IndexOutOfRange {
                index: pinned,
                n_agents: n,
            });
        }
        pinning[pinned] = gain;
        Self::from_edges(n, &edges, pinning)
    }

    pub fn n_agents(&self) -> usize {
        self.adjacency.nrows()
    }

    pub fn adjacency(&self) -> &DMatrix<f64> {
        &self.adjacency
    }

    pub fn pinning(&self) -> &DVector<f64> {
        &self.pinning
    }

    pub fn weight(&self, i: usize, j: usize) -> f64 {
        self.adjacency[(i, j)]
    }

    pub fn pinning_gain(&self, i: usize) -> f64 {
        self.pinning[i]
    }

    /// In-neighbours `N_i` of agent `i`, in increasing index order.
    pub fn neighbors(&self, i: usize) -> Vec<usize> {
        (0..self.n_agents())
            .filter(|&j| self.adjacency[(i, j)] > 0.0)
            .collect()
    }

    pub fn in_degree(&self, i: usize) -> f64 {
        self.adjacency.row(i).iter().sum()
    }

    /// `(from, to, weight)` triples, zero-based, ordered by receiver then sender.
    pub fn edges(&self) -> Vec<(usize, usize, f64)> {
        let n = self.n_agents();
        let mut out = Vec::new();
        for to in 0..n {
            for from in 0..n {
                let w = self.adjacency[(to, from)];
                if w > 0.0 {
                    out.push((from, to, w));
                }
            }
        }
        out
    }

    /// `L = D - A` with `D = diag(sum_j a_ij)`.
    pub fn laplacian(&self) -> DMatrix<f64> {
        let n = self.n_agents();
        DMatrix::from_fn(n, n, |i, j| {
            if i == j {
                self.in_degree(i)
            } else {
                -self.adjacency[(i, j)]
            }
        })
    }

    /// Row `i` of `L + B`. Nonzero only at `i` and at the in-neighbours of `i`.
    pub fn coupling_row(&self, i: usize) -> Result<DVector<f64>> {
        let n = self.n_agents();
        if i >= n {
            return Err(Error::IndexOutOfRange { index: i, n_agents: n });
        }
        Ok(DVector::from_fn(n, |j, _| {
            if i == j {
                self.in_degree(i) + self.pinning[i]
            } else {
                -self.adjacency[(i, j)]
            }
        }))
    }

    /// `l_ii + b_ii`, the self-coupling that scales agent `i`'s own control.
    pub fn self_coupling(&self, i: usize) -> f64 {
        self.in_degree(i) + self.pinning[i]
    }

    /// True iff every ordered pair of agents is joined by a directed path.
    /// Leader pinning is ignored.
    pub fn is_strongly_connected(&self) -> bool {
        let n = self.n_agents();
        let reach = |forward: bool| {
            let mut seen = vec![false; n];
            let mut stack = vec![0usize];
            seen[0] = true;
            while let Some(v) = stack.pop() {
                for w in 0..n {
                    // forward follows edges v -> w, i.e. a_wv > 0
                    let w_edge = if forward {
                        self.adjacency[(w, v)]
                    } else {
                        self.adjacency[(v, w)]
                    };
                    if w_edge > 0.0 && !seen[w] {
                        seen[w] = true;
                        stack.push(w);
                    }
                }
            }
            seen.into_iter().all(|s| s)
        };
        reach(true) && reach(false)
    }
}
