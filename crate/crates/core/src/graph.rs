//! Weighted graph Laplacians and the residual (coupled path) topology.
//!
//! Node ordering for residual topologies is layer-major: node `k` of layer
//! `i` lives at index `i * width + k`.

use std::path::Path;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::{sym_eig, DenseMatrix};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Edge {
    pub a: usize,
    pub b: usize,
    /// Conductance, strictly positive.
    pub g: f64,
}

/// Undirected graph with positive edge conductances.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct WeightedGraph {
    #[serde(rename = "nodes")]
    node_count: usize,
    edges: Vec<Edge>,
}

impl WeightedGraph {
    pub fn new(node_count: usize, edges: Vec<Edge>) -> Result<Self> {
        let g = Self { node_count, edges };
        g.validate()?;
        Ok(g)
    }

    fn validate(&self) -> Result<()> {
        for (i, e) in self.edges.iter().enumerate() {
            if e.a >= self.node_count || e.b >= self.node_count {
                return Err(Error::InvalidGraph(format!(
                    "edge {i} ({}, {}) references a node outside 0..{}",
                    e.a, e.b, self.node_count
                )));
            }
            if e.a == e.b {
                return Err(Error::InvalidGraph(format!(
                    "edge {i} is a self-loop on {}",
                    e.a
                )));
            }
            if !(e.g.is_finite() && e.g > 0.0) {
                return Err(Error::InvalidGraph(format!(
                    "edge {i} has non-positive conductance {}",
                    e.g
                )));
            }
        }
        Ok(())
    }

    /// Random connected graph: a random spanning tree plus about `n / 2`
    /// extra edges, conductances uniform in `[lo, hi)`.
    pub fn random_connected<R: Rng>(n: usize, conductance: [f64; 2], rng: &mut R) -> Result<Self> {
        let [lo, hi] = conductance;
        if n == 0 || !(lo > 0.0 && lo < hi && hi.is_finite()) {
            return Err(Error::InvalidArgument(format!(
                "random graph needs n >= 1 and 0 < lo < hi, got n = {n}, range [{lo}, {hi})"
            )));
        }
        let mut edges: Vec<Edge> = (1..n)
            .map(|i| Edge {
                a: rng.random_range(0..i),
                b: i,
                g: rng.random_range(lo..hi),
            })
            .collect();
        for _ in 0..n / 2 {
            let (a, b) = (rng.random_range(0..n), rng.random_range(0..n));
            if a != b {
                edges.push(Edge {
                    a,
                    b,
                    g: rng.random_range(lo..hi),
                });
            }
        }
        Self::new(n, edges)
    }

    /// Path graph `0 - 1 - ... - (n-1)` with uniform conductance.
    pub fn path(n: usize, g: f64) -> Result<Self> {
        let edges = (0..n.saturating_sub(1))
            .map(|i| Edge { a: i, b: i + 1, g })
            .collect();
        Self::new(n, edges)
    }

    pub fn node_count(&self) -> usize {
        self.node_count
    }

    pub fn edges(&self) -> &[Edge] {
        &self.edges
    }

    /// Branch-node incidence matrix: one row per edge, `+1` at `a`, `-1` at `b`.
    pub fn incidence(&self) -> DenseMatrix {
        let mut b = DenseMatrix::zeros(self.edges.len(), self.node_count);
        for (r, e) in self.edges.iter().enumerate() {
            b[(r, e.a)] = 1.0;
            b[(r, e.b)] = -1.0;
        }
        b
    }

    /// Diagonal matrix of edge conductances.
    pub fn conductances(&self) -> DenseMatrix {
        let g: Vec<f64> = self.edges.iter().map(|e| e.g).collect();
        DenseMatrix::from_diagonal(&g)
    }

    /// `L = Bᵀ Y B`, assembled edge by edge.
    pub fn laplacian(&self) -> DenseMatrix {
        let mut l = DenseMatrix::zeros(self.node_count, self.node_count);
        for e in &self.edges {
            stamp_edge(&mut l, e.a, e.b, e.g);
        }
        l
    }

    pub fn from_json_str(s: &str) -> Result<Self> {
        let g: WeightedGraph = serde_json::from_str(s)?;
        g.validate()?;
        Ok(g)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let s = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_json_str(&s)
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }
}

/// Adds the conductance `g` between nodes `a` and `b` to a Laplacian.
pub(crate) fn stamp_edge(l: &mut DenseMatrix, a: usize, b: usize, g: f64) {
    l[(a, a)] += g;
    l[(b, b)] += g;
    l[(a, b)] -= g;
    l[(b, a)] -= g;
}

/// Path Laplacian with a ghost node attached to each end, which makes the
/// diagonal a constant 2.
pub fn path_laplacian_ghost(n: usize) -> Result<DenseMatrix> {
    if n < 2 {
        return Err(Error::InvalidArgument(format!(
            "ghost-boundary path needs at least 2 nodes, got {n}"
        )));
    }
    let mut l = WeightedGraph::path(n, 1.0)?.laplacian();
    l[(0, 0)] += 1.0;
    l[(n - 1, n - 1)] += 1.0;
    Ok(l)
}

/// `width` parallel paths of length `depth`, with inter-layer couplings.
///
/// `couplings[i][(j, k)]` is the conductance between node `j` of layer `i`
/// and node `k` of layer `i + 1`. Couplings may be negative (gain elements);
/// the backbone conductance must be positive.
#[derive(Debug, Clone, PartialEq)]
pub struct ResidualTopology {
    depth: usize,
    width: usize,
    backbone: f64,
    couplings: Vec<DenseMatrix>,
}

impl ResidualTopology {
    pub fn new(
        depth: usize,
        width: usize,
        backbone: f64,
        couplings: Vec<DenseMatrix>,
    ) -> Result<Self> {
        if depth < 2 || width == 0 {
            return Err(Error::InvalidArgument(format!(
                "residual topology needs depth >= 2 and width >= 1, got {depth}x{width}"
            )));
        }
        if !(backbone.is_finite() && backbone > 0.0) {
            return Err(Error::InvalidGraph(format!(
                "backbone conductance must be positive, got {backbone}"
            )));
        }
        if couplings.len() != depth - 1 {
            return Err(Error::dims(
                "number of coupling matrices",
                depth - 1,
                couplings.len(),
            ));
        }
        for (i, g) in couplings.iter().enumerate() {
            if g.shape() != (width, width) {
                return Err(Error::dims(
                    format!("coupling matrix G^{i} ({}x{})", g.rows(), g.cols()),
                    width * width,
                    g.rows() * g.cols(),
                ));
            }
            if !g.all_finite() {
                return Err(Error::NonFinite {
                    context: format!("coupling matrix G^{i}"),
                });
            }
        }
        Ok(Self {
            depth,
            width,
            backbone,
            couplings,
        })
    }

    /// No inter-path coupling.
    pub fn uncoupled(depth: usize, width: usize, backbone: f64) -> Result<Self> {
        let couplings = vec![DenseMatrix::zeros(width, width); depth.saturating_sub(1)];
        Self::new(depth, width, backbone, couplings)
    }

    pub fn depth(&self) -> usize {
        self.depth
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn backbone(&self) -> f64 {
        self.backbone
    }

    pub fn couplings(&self) -> &[DenseMatrix] {
        &self.couplings
    }

    pub fn node_count(&self) -> usize {
        self.depth * self.width
    }

    pub fn node_index(&self, layer: usize, path: usize) -> usize {
        layer * self.width + path
    }

    /// The `width` ghost-boundary backbone paths without any coupling.
    pub fn backbone_laplacian(&self) -> DenseMatrix {
        let (n, m) = (self.depth, self.width);
        let c = self.backbone;
        let mut l = DenseMatrix::zeros(n * m, n * m);
        for k in 0..m {
            for i in 0..n - 1 {
                stamp_edge(&mut l, self.node_index(i, k), self.node_index(i + 1, k), c);
            }
            l[(self.node_index(0, k), self.node_index(0, k))] += c;
            l[(self.node_index(n - 1, k), self.node_index(n - 1, k))] += c;
        }
        l
    }
}

/// Full activator Laplacian of a residual topology: ghost-boundary backbone
/// paths plus every coupling `g^i_{jk}` stamped between `(i, j)` and
/// `(i + 1, k)`.
pub fn residual_laplacian(t: &ResidualTopology) -> DenseMatrix {
    let mut l = t.backbone_laplacian();
    for (i, g) in t.couplings.iter().enumerate() {
        for j in 0..t.width {
            for k in 0..t.width {
                let w = g[(j, k)];
                if w != 0.0 {
                    stamp_edge(&mut l, t.node_index(i, j), t.node_index(i + 1, k), w);
                }
            }
        }
    }
    l
}

/// Removes row and column `node`, eliminating the zero eigenvalue of a
/// connected graph's Laplacian.
pub fn ground(l: &DenseMatrix, node: usize) -> Result<DenseMatrix> {
    if !l.is_square() || node >= l.rows() {
        return Err(Error::InvalidArgument(format!(
            "cannot ground node {node} of a {}x{} matrix",
            l.rows(),
            l.cols()
        )));
    }
    let eig = sym_eig(l)?;
    let scale = l.max_abs().max(1.0);
    let zero_modes = eig
        .values
        .iter()
        .filter(|v| v.abs() <= 1e-10 * scale)
        .count();
    if zero_modes > 1 {
        return Err(Error::InvalidGraph(format!(
            "graph is disconnected ({zero_modes} zero eigenvalues)"
        )));
    }
    Ok(l.without_row_col(node))
}
