//! Reverse-mode automatic differentiation on a recording tape.
//!
//! Every operation appends a node holding its forward value, the ids of its
//! inputs and a boxed [`TapeOp`] that knows how to push adjoints back to
//! those inputs. `backward` walks the nodes once in reverse creation order,
//! which is a valid topological order by construction.
//!
//! Other modules can register custom fused operations through [`Tape::push`]
//! as long as the op reports one adjoint contribution per input.

use crate::error::{Error, Result};
use crate::tensor::{sigmoid, Tensor};

/// Handle to a value recorded on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct VarId(usize);

/// Backward rule for one recorded operation.
pub trait TapeOp {
    /// Returns the adjoint contribution for each input, in input order,
    /// with shapes matching the input values.
    fn backward(&self, out_value: &Tensor, out_adjoint: &Tensor, inputs: &[&Tensor]) -> Vec<Tensor>;
}

struct Node {
    value: Tensor,
    inputs: Vec<VarId>,
    op: Option<Box<dyn TapeOp>>,
}

#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

/// Adjoints produced by one `backward` pass, indexed by [`VarId`].
pub struct Gradients {
    adjoints: Vec<Option<Tensor>>,
}

impl Gradients {
    /// Adjoint of `id`, or `None` if the loss does not depend on it.
    pub fn get(&self, id: VarId) -> Option<&Tensor> {
        self.adjoints.get(id.0).and_then(|a| a.as_ref())
    }

    /// Adjoint of `id`, densified to zeros when the loss does not reach it.
    pub fn get_or_zeros(&self, id: VarId, rows: usize, cols: usize) -> Tensor {
        match self.get(id) {
            Some(t) => t.clone(),
            None => Tensor::zeros(rows, cols),
        }
    }
}

impl Tape {
    pub fn new() -> Self {
        Tape::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Records an input value with no backward rule.
    pub fn leaf(&mut self, value: Tensor) -> VarId {
        self.push_node(value, Vec::new(), None)
    }

    /// Records a custom operation; used for fused ops defined elsewhere.
    pub fn push(&mut self, value: Tensor, inputs: Vec<VarId>, op: Box<dyn TapeOp>) -> VarId {
        self.push_node(value, inputs, Some(op))
    }

    fn push_node(&mut self, value: Tensor, inputs: Vec<VarId>, op: Option<Box<dyn TapeOp>>) -> VarId {
        let id = VarId(self.nodes.len());
        self.nodes.push(Node { value, inputs, op });
        id
    }

    pub fn value(&self, id: VarId) -> &Tensor {
        &self.nodes[id.0].value
    }

    pub fn matmul(&mut self, a: VarId, b: VarId) -> Result<VarId> {
        let value = self.value(a).matmul(self.value(b))?;
        Ok(self.push(value, vec![a, b], Box::new(MatmulOp)))
    }

    pub fn add(&mut self, a: VarId, b: VarId) -> Result<VarId> {
        let (va, vb) = (self.value(a), self.value(b));
        let (value, mode) = if va.shape() == vb.shape() {
            (va.add(vb)?, BroadcastMode::Same)
        } else if vb.rows() == 1 && vb.cols() == va.cols() {
            (va.add_row_broadcast(vb)?, BroadcastMode::Row)
        } else if vb.shape() == (1, 1) {
            let s = vb.get(0, 0);
            (va.map(|x| x + s), BroadcastMode::Scalar)
        } else {
            return Err(Error::invalid(format!(
                "add: incompatible shapes {}x{} vs {}x{}",
                va.rows(),
                va.cols(),
                vb.rows(),
                vb.cols()
            )));
        };
        Ok(self.push(value, vec![a, b], Box::new(AddOp { mode })))
    }

    pub fn sub(&mut self, a: VarId, b: VarId) -> Result<VarId> {
        let value = self.value(a).sub(self.value(b))?;
        Ok(self.push(value, vec![a, b], Box::new(SubOp)))
    }

    pub fn mul(&mut self, a: VarId, b: VarId) -> Result<VarId> {
        let value = self.value(a).mul(self.value(b))?;
        Ok(self.push(value, vec![a, b], Box::new(MulOp)))
    }

    pub fn scale(&mut self, a: VarId, factor: f64) -> VarId {
        let value = self.value(a).scale(factor);
        self.push(value, vec![a], Box::new(ScaleOp { factor }))
    }

    pub fn sum(&mut self, a: VarId) -> VarId {
        let value = Tensor::scalar(self.value(a).sum());
        self.push(value, vec![a], Box::new(SumOp))
    }

    pub fn mean(&mut self, a: VarId) -> Result<VarId> {
        let n = self.value(a).len();
        if n == 0 {
            return Err(Error::invalid("mean: empty tensor"));
        }
        let value = Tensor::scalar(self.value(a).sum() / n as f64);
        Ok(self.push(value, vec![a], Box::new(MeanOp)))
    }

    /// Concatenates tensors with equal row counts side by side.
    pub fn concat_cols(&mut self, parts: &[VarId]) -> Result<VarId> {
        if parts.is_empty() {
            return Err(Error::invalid("concat_cols: no inputs"));
        }
        let rows = self.value(parts[0]).rows();
        let mut cols = 0;
        for &p in parts {
            let v = self.value(p);
            if v.rows() != rows {
                return Err(Error::invalid(format!(
                    "concat_cols: row mismatch {}x{} vs expected {} rows",
                    v.rows(),
                    v.cols(),
                    rows
                )));
            }
            cols += v.cols();
        }
        let mut data = Vec::with_capacity(rows * cols);
        for r in 0..rows {
            for &p in parts {
                data.extend_from_slice(self.value(p).row(r));
            }
        }
        let value = Tensor::from_vec(rows, cols, data)?;
        Ok(self.push(value, parts.to_vec(), Box::new(ConcatColsOp)))
    }

    /// Selects the half-open row range `start..end`.
    pub fn slice_rows(&mut self, a: VarId, start: usize, end: usize) -> Result<VarId> {
        let v = self.value(a);
        if start > end || end > v.rows() {
            return Err(Error::invalid(format!(
                "slice_rows: range {start}..{end} out of bounds for {}x{}",
                v.rows(),
                v.cols()
            )));
        }
        let cols = v.cols();
        let data = v.as_slice()[start * cols..end * cols].to_vec();
        let value = Tensor::from_vec(end - start, cols, data)?;
        Ok(self.push(value, vec![a], Box::new(SliceRowsOp { start })))
    }

    pub fn sigmoid(&mut self, a: VarId) -> VarId {
        let value = self.value(a).map(sigmoid);
        self.push(value, vec![a], Box::new(SigmoidOp))
    }

    pub fn relu(&mut self, a: VarId) -> VarId {
        let value = self.value(a).map(|x| x.max(0.0));
        self.push(value, vec![a], Box::new(ReluOp))
    }

    /// Clamps to `[-bound, bound]`; the gradient is 1 strictly inside the
    /// bound and 0 at or beyond it.
    pub fn clip(&mut self, a: VarId, bound: f64) -> VarId {
        let value = self.value(a).map(|x| x.clamp(-bound, bound));
        self.push(value, vec![a], Box::new(ClipOp { bound }))
    }

    /// Sum of elementwise squared differences, as a scalar node.
    pub fn squared_error(&mut self, a: VarId, b: VarId) -> Result<VarId> {
        let diff = self.value(a).sub(self.value(b))?;
        let value = Tensor::scalar(diff.as_slice().iter().map(|d| d * d).sum());
        Ok(self.push(value, vec![a, b], Box::new(SquaredErrorOp)))
    }

    /// Accumulates adjoints for every node the scalar `loss` depends on.
    pub fn backward(&self, loss: VarId) -> Result<Gradients> {
        if self.value(loss).shape() != (1, 1) {
            let (r, c) = self.value(loss).shape();
            return Err(Error::invalid(format!(
                "backward: loss must be scalar, got shape {r}x{c}"
            )));
        }
        let mut adjoints: Vec<Option<Tensor>> = (0..self.nodes.len()).map(|_| None).collect();
        adjoints[loss.0] = Some(Tensor::scalar(1.0));

        for idx in (0..=loss.0).rev() {
            let node = &self.nodes[idx];
            let Some(op) = node.op.as_ref() else { continue };
            let Some(out_adjoint) = adjoints[idx].take() else {
                continue;
            };
            let input_values: Vec<&Tensor> =
                node.inputs.iter().map(|&i| self.value(i)).collect();
            let contributions = op.backward(&node.value, &out_adjoint, &input_values);
            debug_assert_eq!(contributions.len(), node.inputs.len());
            for (&input, contribution) in node.inputs.iter().zip(contributions) {
                match &mut adjoints[input.0] {
                    Some(existing) => *existing = existing.add(&contribution)?,
                    slot @ None => *slot = Some(contribution),
                }
            }
            adjoints[idx] = Some(out_adjoint);
        }
        Ok(Gradients { adjoints })
    }
}

enum BroadcastMode {
    Same,
    Row,
    Scalar,
}

struct MatmulOp;

impl TapeOp for MatmulOp {
    fn backward(&self, _out: &Tensor, adj: &Tensor, inputs: &[&Tensor]) -> Vec<Tensor> {
        let (a, b) = (inputs[0], inputs[1]);
        let da = adj.matmul_nt(b).expect("matmul backward shapes");
        let db = a.matmul_tn(adj).expect("matmul backward shapes");
        vec![da, db]
    }
}

struct AddOp {
    mode: BroadcastMode,
}

impl TapeOp for AddOp {
    fn backward(&self, _out: &Tensor, adj: &Tensor, _inputs: &[&Tensor]) -> Vec<Tensor> {
        let db = match self.mode {
            BroadcastMode::Same => adj.clone(),
            BroadcastMode::Row => adj.column_sums(),
            BroadcastMode::Scalar => Tensor::scalar(adj.sum()),
        };
        vec![adj.clone(), db]
    }
}

struct SubOp;

impl TapeOp for SubOp {
    fn backward(&self, _out: &Tensor, adj: &Tensor, _inputs: &[&Tensor]) -> Vec<Tensor> {
        vec![adj.clone(), adj.scale(-1.0)]
    }
}

struct MulOp;

impl TapeOp for MulOp {
    fn backward(&self, _out: &Tensor, adj: &Tensor, inputs: &[&Tensor]) -> Vec<Tensor> {
        let da = adj.mul(inputs[1]).expect("mul backward shapes");
        let db = adj.mul(inputs[0]).expect("mul backward shapes");
        vec![da, db]
    }
}

struct ScaleOp {
    factor: f64,
}

impl TapeOp for ScaleOp {
    fn backward(&self, _out: &Tensor, adj: &Tensor, _inputs: &[&Tensor]) -> Vec<Tensor> {
        vec![adj.scale(self.factor)]
    }
}

struct SumOp;

impl TapeOp for SumOp {
    fn backward(&self, _out: &Tensor, adj: &Tensor, inputs: &[&Tensor]) -> Vec<Tensor> {
        let g = adj.get(0, 0);
        let (r, c) = inputs[0].shape();
        vec![Tensor::zeros(r, c).map(|_| g)]
    }
}

struct MeanOp;

impl TapeOp for MeanOp {
    fn backward(&self, _out: &Tensor, adj: &Tensor, inputs: &[&Tensor]) -> Vec<Tensor> {
        let (r, c) = inputs[0].shape();
        let g = adj.get(0, 0) / (r * c) as f64;
        vec![Tensor::zeros(r, c).map(|_| g)]
    }
}

struct ConcatColsOp;

impl TapeOp for ConcatColsOp {
    fn backward(&self, _out: &Tensor, adj: &Tensor, inputs: &[&Tensor]) -> Vec<Tensor> {
        let rows = adj.rows();
        let mut out = Vec::with_capacity(inputs.len());
        let mut offset = 0;
        for v in inputs {
            let cols = v.cols();
            let mut part = Tensor::zeros(rows, cols);
            for r in 0..rows {
                part.row_mut(r)
                    .copy_from_slice(&adj.row(r)[offset..offset + cols]);
            }
            offset += cols;
            out.push(part);
        }
        out
    }
}

struct SliceRowsOp {
    start: usize,
}

impl TapeOp for SliceRowsOp {
    fn backward(&self, _out: &Tensor, adj: &Tensor, inputs: &[&Tensor]) -> Vec<Tensor> {
        let (rows, cols) = inputs[0].shape();
        let mut da = Tensor::zeros(rows, cols);
        for r in 0..adj.rows() {
            da.row_mut(self.start + r).copy_from_slice(adj.row(r));
        }
        vec![da]
    }
}

struct SigmoidOp;

impl TapeOp for SigmoidOp {
    fn backward(&self, out: &Tensor, adj: &Tensor, _inputs: &[&Tensor]) -> Vec<Tensor> {
        let local = out.map(|s| s * (1.0 - s));
        vec![adj.mul(&local).expect("sigmoid backward shapes")]
    }
}

struct ReluOp;

impl TapeOp for ReluOp {
    fn backward(&self, _out: &Tensor, adj: &Tensor, inputs: &[&Tensor]) -> Vec<Tensor> {
        let gate = inputs[0].map(|x| if x > 0.0 { 1.0 } else { 0.0 });
        vec![adj.mul(&gate).expect("relu backward shapes")]
    }
}

struct ClipOp {
    bound: f64,
}

impl TapeOp for ClipOp {
    fn backward(&self, _out: &Tensor, adj: &Tensor, inputs: &[&Tensor]) -> Vec<Tensor> {
        let bound = self.bound;
        let gate = inputs[0].map(|x| if x > -bound && x < bound { 1.0 } else { 0.0 });
        vec![adj.mul(&gate).expect("clip backward shapes")]
    }
}

struct SquaredErrorOp;

impl TapeOp for SquaredErrorOp {
    fn backward(&self, _out: &Tensor, adj: &Tensor, inputs: &[&Tensor]) -> Vec<Tensor> {
        let g = adj.get(0, 0);
        let diff = inputs[0].sub(inputs[1]).expect("squared_error backward shapes");
        let da = diff.scale(2.0 * g);
        let db = diff.scale(-2.0 * g);
        vec![da, db]
    }
}
