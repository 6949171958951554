//! Item co-occurrence graph and the weighted-aggregation GNN that turns it
//! into per-item compatibility embeddings.
//!
//! `G = D^{-1/2} (F Fᵀ) D^{-1/2}` where `F` is the item×bundle incidence
//! matrix and `D` the row sums of `F Fᵀ` (isolated items get `0^{-1/2} = 0`).
//! Each GNN layer computes
//! `c_i ← relu(W (c_i + Σ_{j≠i} g_ij c_j) + b)`, starting from trainable
//! node features `z`.

use std::path::Path;

use crate::checkpoint::Checkpoint;
use crate::error::{Error, Result};
use crate::numerics::{matmul, ParamStore, Tape, Tensor, Var};
use crate::rng::Rng;

pub const GRAPH_TENSOR: &str = "g";
pub const NODE_FEATURES: &str = "gnn.z";

pub fn layer_weight(layer: usize) -> String {
    format!("gnn.{layer}.w")
}

pub fn layer_bias(layer: usize) -> String {
    format!("gnn.{layer}.b")
}

/// Incidence matrix over explicit bundle memberships: `F[i][b] = 1` iff item
/// `i` belongs to bundle `b`.
pub fn build_frequency_matrix(bundle_item: &[(usize, usize)], n_items: usize, n_bundles: usize) -> Result<Tensor> {
    if n_items == 0 || n_bundles == 0 {
        return Err(Error::Argument("frequency matrix needs items and bundles".into()));
    }
    let mut f = Tensor::zeros(n_items, n_bundles);
    for &(b, i) in bundle_item {
        if b >= n_bundles {
            return Err(Error::Range { what: "bundle", id: b, size: n_bundles });
        }
        if i >= n_items {
            return Err(Error::Range { what: "item", id: i, size: n_items });
        }
        f.set(i, b, 1.0);
    }
    Ok(f)
}

/// Incidence matrix whose columns are the given item sets (for instance the
/// ground-truth bundles of the training split).
pub fn frequency_from_bundles(bundles: &[Vec<usize>], n_items: usize) -> Result<Tensor> {
    let pairs: Vec<(usize, usize)> = bundles
        .iter()
        .enumerate()
        .flat_map(|(b, items)| items.iter().map(move |&i| (b, i)))
        .collect();
    build_frequency_matrix(&pairs, n_items, bundles.len())
}

#[derive(Debug, Clone, PartialEq)]
pub struct CooccurrenceGraph {
    g: Tensor,
}

impl CooccurrenceGraph {
    pub fn from_matrix(g: Tensor) -> Result<Self> {
        let (r, c) = g.dims();
        if r != c {
            return Err(Error::Dimension(format!("graph must be square, got {r}×{c}")));
        }
        Ok(CooccurrenceGraph { g })
    }

    pub fn matrix(&self) -> &Tensor {
        &self.g
    }

    pub fn n_items(&self) -> usize {
        self.g.rows()
    }

    pub fn weight(&self, i: usize, j: usize) -> f64 {
        self.g.get(i, j)
    }

    /// `I + G` with G's own diagonal removed: one matmul with this matrix is
    /// the self term plus the weighted neighbor sum.
    pub fn propagation_matrix(&self) -> Tensor {
        let mut s = self.g.clone();
        for i in 0..s.rows() {
            s.set(i, i, 1.0);
        }
        s
    }

    pub fn to_checkpoint(&self) -> Checkpoint {
        let mut c = Checkpoint::new("build-graph");
        c.insert(GRAPH_TENSOR, self.g.clone());
        c.metadata.insert("n_items".into(), self.n_items().to_string());
        c
    }

    pub fn from_checkpoint(c: &Checkpoint) -> Result<Self> {
        Self::from_matrix(c.tensor(GRAPH_TENSOR)?.clone())
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        self.to_checkpoint().write(path)
    }

    pub fn read(path: &Path) -> Result<Self> {
        Self::from_checkpoint(&Checkpoint::read(path)?)
    }
}

/// `D^{-1/2} F Fᵀ D^{-1/2}`, symmetrized exactly.
pub fn normalize_cooccurrence(f: &Tensor) -> Result<CooccurrenceGraph> {
    let ft = f.transpose();
    let a = matmul(f, &ft)?;
    let n = a.rows();
    let inv_sqrt: Vec<f64> = (0..n)
        .map(|i| {
            let d: f64 = a.row_slice(i).iter().sum();
            if d > 0.0 {
                1.0 / d.sqrt()
            } else {
                0.0
            }
        })
        .collect();
    let mut g = Tensor::zeros(n, n);
    for i in 0..n {
        for j in i..n {
            let v = inv_sqrt[i] * a.get(i, j) * inv_sqrt[j];
            g.set(i, j, v);
            g.set(j, i, v);
        }
    }
    CooccurrenceGraph::from_matrix(g)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct GnnShape {
    pub n_items: usize,
    pub dim: usize,
    pub layers: usize,
}

/// Registers `gnn.z`, `gnn.<k>.w` and `gnn.<k>.b` in `store`.
pub fn init_gnn(store: &mut ParamStore, shape: GnnShape, rng: &mut Rng) -> Result<()> {
    if shape.layers == 0 {
        return Err(Error::Config("GNN needs at least one layer".into()));
    }
    store.insert_normal(NODE_FEATURES, shape.n_items, shape.dim, 0.1, rng)?;
    for k in 0..shape.layers {
        store.insert_glorot(layer_weight(k), shape.dim, shape.dim, rng)?;
        store.insert(layer_bias(k), Tensor::zeros(1, shape.dim))?;
    }
    Ok(())
}

/// Full-vocabulary propagation; returns the `N×d_c` output of the last layer.
///
/// `propagation` is a tape constant holding
/// [`CooccurrenceGraph::propagation_matrix`].
pub fn gnn_forward(tape: &mut Tape, store: &ParamStore, propagation: Var, layers: usize) -> Result<Var> {
    let n = tape.value(propagation).rows();
    let mut c = tape.param(store, NODE_FEATURES)?;
    if tape.value(c).rows() != n {
        return Err(Error::Dimension(format!(
            "graph over {n} items but node features cover {}",
            tape.value(c).rows()
        )));
    }
    for k in 0..layers {
        let agg = tape.matmul(propagation, c)?;
        let w = tape.param(store, &layer_weight(k))?;
        let b = tape.param(store, &layer_bias(k))?;
        let lin = tape.matmul(agg, w)?;
        let lin = tape.add_row(lin, b)?;
        c = tape.relu(lin);
    }
    Ok(c)
}

/// [`gnn_forward`] followed by a row gather for `item_ids`.
pub fn gnn_forward_ids(
    tape: &mut Tape,
    store: &ParamStore,
    graph: &CooccurrenceGraph,
    layers: usize,
    item_ids: &[usize],
) -> Result<Var> {
    if let Some(&bad) = item_ids.iter().find(|&&i| i >= graph.n_items()) {
        return Err(Error::Range { what: "item", id: bad, size: graph.n_items() });
    }
    let s = tape.constant(graph.propagation_matrix());
    let full = gnn_forward(tape, store, s, layers)?;
    tape.gather_rows(full, item_ids)
}
