//! Cycle graph, Laplacian and the walk Hamiltonian.

use std::f64::consts::PI;

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::qcore::{hermitian_exp, uniform_superposition, HermitianOperator};

/// Cycle graph on `n ≥ 3` nodes with edges `(k, k+1 mod n)`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct CycleGraph {
    n: usize,
}

impl CycleGraph {
    /// Two nodes would need a doubled edge, so `n < 3` is rejected.
    pub fn new(n: usize) -> Result<Self> {
        if n < 3 {
            return Err(Error::TooFewNodes(n));
        }
        Ok(Self { n })
    }

    pub fn n(&self) -> usize {
        self.n
    }

    /// Index of the node after `k`, wrapping at `n`.
    pub fn next(&self, k: usize) -> usize {
        (k + 1) % self.n
    }

    /// Reflection `k ↦ -k mod n` that fixes node 0.
    pub fn mirror(&self, k: usize) -> usize {
        (self.n - k % self.n) % self.n
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct WalkParameters {
    gamma: f64,
}

impl WalkParameters {
    pub fn new(gamma: f64) -> Result<Self> {
        if !(gamma > 0.0) || !gamma.is_finite() {
            return Err(Error::InvalidParameter(format!("hopping rate must be positive, got {gamma}")));
        }
        Ok(Self { gamma })
    }

    pub fn gamma(&self) -> f64 {
        self.gamma
    }
}

impl Default for WalkParameters {
    fn default() -> Self {
        Self { gamma: 1.0 }
    }
}

pub fn cycle_adjacency(g: &CycleGraph) -> HermitianOperator {
    let n = g.n();
    let mut a = DMatrix::<f64>::zeros(n, n);
    for j in 0..n {
        let k = g.next(j);
        a[(j, k)] = 1.0;
        a[(k, j)] = 1.0;
    }
    HermitianOperator::from_real(&a).expect("adjacency is symmetric")
}

/// `L = D - A`, rejecting anything that is not a simple undirected graph.
pub fn laplacian(adjacency: &HermitianOperator) -> Result<HermitianOperator> {
    let m = adjacency.matrix();
    let n = adjacency.dim();
    let mut l = DMatrix::<f64>::zeros(n, n);
    for i in 0..n {
        let mut degree = 0.0;
        for j in 0..n {
            let a = m[(i, j)];
            if a != m[(j, i)] {
                return Err(Error::InvalidAdjacency(format!("entry ({i},{j}) is not symmetric")));
            }
            if a.im != 0.0 || (a.re != 0.0 && a.re != 1.0) {
                return Err(Error::InvalidAdjacency(format!("entry ({i},{j}) is not 0 or 1")));
            }
            if i == j && a.re != 0.0 {
                return Err(Error::InvalidAdjacency(format!("self-loop at node {i}")));
            }
            degree += a.re;
            l[(i, j)] = -a.re;
        }
        l[(i, i)] = degree;
    }
    HermitianOperator::from_real(&l)
}

/// `H = γ L`
pub fn walk_hamiltonian(g: &CycleGraph, p: &WalkParameters) -> HermitianOperator {
    laplacian(&cycle_adjacency(g))
        .expect("cycle adjacency is valid")
        .scaled(p.gamma())
}

/// Nodes as equally spaced points on the unit circle, node 0 at `(1, 0)`.
pub fn node_coordinates(g: &CycleGraph) -> Vec<(f64, f64)> {
    (0..g.n())
        .map(|k| {
            let phi = 2.0 * PI * k as f64 / g.n() as f64;
            (phi.cos(), phi.sin())
        })
        .collect()
}

/// Node probabilities after evolving the uniform state under
/// `H_S = γL - |w⟩⟨w|` for time `t`.
pub fn standard_search_distribution(
    g: &CycleGraph,
    p: &WalkParameters,
    target: usize,
    t: f64,
) -> Result<Vec<f64>> {
    if target >= g.n() {
        return Err(Error::IndexOutOfRange {
            index: target,
            dim: g.n(),
        });
    }
    if !(t >= 0.0) {
        return Err(Error::InvalidParameter(format!("time must be non-negative, got {t}")));
    }
    let mut h = walk_hamiltonian(g, p).real_part();
    h[(target, target)] -= 1.0;
    let u = hermitian_exp(&HermitianOperator::from_real(&h)?, t)?;
    let psi = u.apply(&uniform_superposition(g.n())?)?;
    Ok(psi.populations())
}

/// Success probability `|⟨w| e^{-i H_S t} |ψ0⟩|²` of the standard oracle search.
pub fn standard_search_probability(g: &CycleGraph, p: &WalkParameters, target: usize, t: f64) -> Result<f64> {
    Ok(standard_search_distribution(g, p, target, t)?[target])
}
