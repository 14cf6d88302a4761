//! Symmetric self-loop graph normalization and sparse message passing.

use std::sync::Arc;

use crate::data::GridGraph;
use crate::error::{Error, Result};
use crate::tape::{Tape, TapeOp, VarId};
use crate::tensor::Tensor;

struct AdjInner {
    n: usize,
    dense: Tensor,
    /// CSR over the nonzero pattern; grid rows hold at most 5 entries, so
    /// propagation is far cheaper than a dense multiply.
    indptr: Vec<u32>,
    indices: Vec<u32>,
    values: Vec<f64>,
}

/// `A_hat = D^{-1/2} (A + I) D^{-1/2}` for an undirected graph.
///
/// Cheap to clone; the matrix data is shared.
#[derive(Clone)]
pub struct NormalizedAdjacency {
    inner: Arc<AdjInner>,
}

impl std::fmt::Debug for NormalizedAdjacency {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("NormalizedAdjacency")
            .field("n", &self.inner.n)
            .field("nnz", &self.inner.values.len())
            .finish()
    }
}

impl NormalizedAdjacency {
    /// Builds from a dense symmetric matrix, validating shape and symmetry.
    pub fn from_dense(dense: Tensor) -> Result<Self> {
        let n = dense.rows();
        if dense.cols() != n {
            return Err(Error::invalid(format!(
                "adjacency must be square, got {}x{}",
                dense.rows(),
                dense.cols()
            )));
        }
        for i in 0..n {
            for j in (i + 1)..n {
                if (dense.get(i, j) - dense.get(j, i)).abs() > 1e-12 {
                    return Err(Error::invalid(format!(
                        "adjacency not symmetric at ({i},{j})"
                    )));
                }
            }
        }
        let mut indptr = Vec::with_capacity(n + 1);
        let mut indices = Vec::new();
        let mut values = Vec::new();
        indptr.push(0u32);
        for i in 0..n {
            for j in 0..n {
                let v = dense.get(i, j);
                if v != 0.0 {
                    indices.push(j as u32);
                    values.push(v);
                }
            }
            indptr.push(indices.len() as u32);
        }
        Ok(NormalizedAdjacency {
            inner: Arc::new(AdjInner { n, dense, indptr, indices, values }),
        })
    }

    pub fn node_count(&self) -> usize {
        self.inner.n
    }

    pub fn dense(&self) -> &Tensor {
        &self.inner.dense
    }

    /// `A_hat * x` through the sparse pattern.
    pub fn apply(&self, x: &Tensor) -> Result<Tensor> {
        let inner = &*self.inner;
        if x.rows() != inner.n {
            return Err(Error::invalid(format!(
                "propagate expects {} rows, got {}x{}",
                inner.n,
                x.rows(),
                x.cols()
            )));
        }
        let cols = x.cols();
        let mut out = Tensor::zeros(inner.n, cols);
        for i in 0..inner.n {
            let lo = inner.indptr[i] as usize;
            let hi = inner.indptr[i + 1] as usize;
            let orow = out.row_mut(i);
            for k in lo..hi {
                let j = inner.indices[k] as usize;
                let w = inner.values[k];
                for (o, &v) in orow.iter_mut().zip(x.row(j)) {
                    *o += w * v;
                }
            }
        }
        Ok(out)
    }
}

/// Symmetric self-loop normalization of a grid graph.
pub fn normalized_adjacency(graph: &GridGraph) -> NormalizedAdjacency {
    let n = graph.node_count();
    let loop_deg: Vec<f64> = (0..n)
        .map(|i| (graph.neighbors(i as u32).len() + 1) as f64)
        .collect();
    let mut dense = Tensor::zeros(n, n);
    for i in 0..n {
        dense.set(i, i, 1.0 / loop_deg[i]);
        for &j in graph.neighbors(i as u32) {
            dense.set(i, j as usize, 1.0 / (loop_deg[i] * loop_deg[j as usize]).sqrt());
        }
    }
    NormalizedAdjacency::from_dense(dense).expect("construction is symmetric by build")
}

struct PropagateOp {
    adj: NormalizedAdjacency,
}

impl TapeOp for PropagateOp {
    fn backward(&self, _out: &Tensor, out_adjoint: &Tensor, _inputs: &[&Tensor]) -> Vec<Tensor> {
        // A_hat is symmetric, so the adjoint propagates the same way.
        vec![self.adj.apply(out_adjoint).expect("shape fixed at forward")]
    }
}

/// Pushes `A_hat * x` onto the tape.
pub fn propagate(tape: &mut Tape, adj: &NormalizedAdjacency, x: VarId) -> Result<VarId> {
    let value = adj.apply(tape.value(x))?;
    Ok(tape.push(value, vec![x], Box::new(PropagateOp { adj: adj.clone() })))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::build_grid_graph;

    #[test]
    fn single_node_is_identity() {
        let adj = normalized_adjacency(&build_grid_graph(1, 1).unwrap());
        assert_eq!(adj.dense().as_slice(), &[1.0]);
    }

    #[test]
    fn two_connected_nodes_all_half() {
        let adj = normalized_adjacency(&build_grid_graph(1, 2).unwrap());
        assert_eq!(adj.dense().as_slice(), &[0.5, 0.5, 0.5, 0.5]);
    }

    #[test]
    fn square_grid_is_symmetric_with_bounded_entries() {
        let adj = normalized_adjacency(&build_grid_graph(2, 2).unwrap());
        let d = adj.dense();
        for i in 0..4 {
            for j in 0..4 {
                let v = d.get(i, j);
                assert!((0.0..=1.0).contains(&v));
                assert_eq!(v, d.get(j, i));
            }
        }
        // Every node has degree 2 plus a self-loop, so rows sum to 1.
        for i in 0..4 {
            let sum: f64 = d.row(i).iter().sum();
            assert!((sum - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn sparse_apply_matches_dense_matmul() {
        let adj = normalized_adjacency(&build_grid_graph(3, 4).unwrap());
        let x = Tensor::from_vec(
            12,
            2,
            (0..24).map(|i| (i as f64 * 0.37).sin()).collect(),
        )
        .unwrap();
        let sparse = adj.apply(&x).unwrap();
        let dense = adj.dense().matmul(&x).unwrap();
        for (a, b) in sparse.as_slice().iter().zip(dense.as_slice()) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn propagate_gradient_is_adjoint_propagation() {
        let adj = normalized_adjacency(&build_grid_graph(1, 3).unwrap());
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::column(&[1.0, 2.0, 3.0]));
        let y = propagate(&mut tape, &adj, x).unwrap();
        let loss = tape.sum(y);
        let grads = tape.backward(loss).unwrap();
        // d(sum A x)/dx = A^T 1 = A 1 (column sums).
        let want = adj.apply(&Tensor::column(&[1.0, 1.0, 1.0])).unwrap();
        for (g, w) in grads.get(x).unwrap().as_slice().iter().zip(want.as_slice()) {
            assert!((g - w).abs() < 1e-12);
        }
    }

    #[test]
    fn asymmetric_dense_rejected() {
        let bad = Tensor::from_vec(2, 2, vec![1.0, 0.3, 0.0, 1.0]).unwrap();
        assert!(NormalizedAdjacency::from_dense(bad).is_err());
    }
}
