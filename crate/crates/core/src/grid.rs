//! Cell-centred grid on the interval `(0, L)`.
//!
//! Node `i` sits at the midpoint of cell `[i h, (i + 1) h]`. The homogeneous
//! Dirichlet boundary values live at `x = 0` and `x = L`, half a cell away from
//! the first and last node, and are never stored.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const MIN_NODES: usize = 4;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SpatialGrid {
    length: f64,
    nodes: usize,
    spacing: f64,
}

impl SpatialGrid {
    pub fn new(length: f64, nodes: usize) -> Result<Self> {
        if !(length.is_finite() && length > 0.0) {
            return Err(Error::Grid(format!("length must be positive, got {length}")));
        }
        if nodes < MIN_NODES {
            return Err(Error::Grid(format!(
                "need at least {MIN_NODES} nodes, got {nodes}"
            )));
        }
        Ok(Self {
            length,
            nodes,
            spacing: length / nodes as f64,
        })
    }

    pub fn length(&self) -> f64 {
        self.length
    }

    pub fn len(&self) -> usize {
        self.nodes
    }

    pub fn is_empty(&self) -> bool {
        self.nodes == 0
    }

    pub fn spacing(&self) -> f64 {
        self.spacing
    }

    pub fn position(&self, i: usize) -> f64 {
        (i as f64 + 0.5) * self.spacing
    }

    pub fn positions(&self) -> Vec<f64> {
        (0..self.nodes).map(|i| self.position(i)).collect()
    }

    /// Midpoint-rule weights; every node carries one cell width.
    pub fn weights(&self) -> Vec<f64> {
        vec![self.spacing; self.nodes]
    }

    /// Samples `f` at the nodes.
    pub fn sample(&self, f: impl Fn(f64) -> f64) -> Vec<f64> {
        (0..self.nodes).map(|i| f(self.position(i))).collect()
    }

    /// `∫_D u v dx` by the midpoint rule.
    pub fn inner(&self, u: &[f64], v: &[f64]) -> f64 {
        debug_assert_eq!(u.len(), self.nodes);
        debug_assert_eq!(v.len(), self.nodes);
        self.spacing * u.iter().zip(v).map(|(a, b)| a * b).sum::<f64>()
    }

    pub fn integral(&self, u: &[f64]) -> f64 {
        self.spacing * u.iter().sum::<f64>()
    }

    pub fn l2_norm(&self, u: &[f64]) -> f64 {
        l2_norm(self, u)
    }

    pub fn h1_seminorm(&self, u: &[f64]) -> f64 {
        h1_seminorm(self, u)
    }
}

/// Midpoint `L²(D)` norm.
pub fn l2_norm(grid: &SpatialGrid, u: &[f64]) -> f64 {
    (grid.spacing * u.iter().map(|v| v * v).sum::<f64>()).sqrt()
}

/// `‖∇u‖_{L²}` from forward differences of the zero-extended grid function.
///
/// Interior segments join neighbouring nodes; the two boundary half-cells join
/// the first/last node to the Dirichlet value 0.
pub fn h1_seminorm(grid: &SpatialGrid, u: &[f64]) -> f64 {
    let h = grid.spacing;
    let n = u.len();
    if n == 0 {
        return 0.0;
    }
    let half = 0.5 * h;
    let mut acc = 0.0;
    // boundary half cells: slope u/(h/2) over a length h/2
    acc += u[0] * u[0] / half;
    acc += u[n - 1] * u[n - 1] / half;
    for w in u.windows(2) {
        let d = w[1] - w[0];
        acc += d * d / h;
    }
    acc.sqrt()
}
