//! Forward passes, each available on the tape for training and as a plain
//! evaluation call.

use super::adjacency::{propagate, NormalizedAdjacency};
use super::params::{
    DetectionHeadParams, GcnStack, GcnVars, LinearBaseParams, LinearBaseVars, MlpVars,
};
use super::VelocityFieldParams;
use crate::error::{Error, Result};
use crate::tape::{Tape, VarId};
use crate::tensor::{sigmoid, Tensor};

/// Smooth 3-dim embedding of the flow time: `(sin 2 pi s, cos 2 pi s, s)`.
pub fn time_embedding(s: f64) -> [f64; 3] {
    let a = std::f64::consts::TAU * s;
    [a.sin(), a.cos(), s]
}

/// `X w + b` for a linear head; output is a single unclipped column.
pub fn linear_logits_on_tape(tape: &mut Tape, vars: &LinearBaseVars, input: VarId) -> Result<VarId> {
    let xw = tape.matmul(input, vars.weight)?;
    tape.add(xw, vars.bias)
}

/// Visit detection logits, clipped so probabilities stay in
/// `[sigmoid(-bound), sigmoid(bound)]`.
pub fn detection_logits_on_tape(
    tape: &mut Tape,
    vars: &LinearBaseVars,
    visit_features: VarId,
    bound: f64,
) -> Result<VarId> {
    let logits = linear_logits_on_tape(tape, vars, visit_features)?;
    Ok(tape.clip(logits, bound))
}

/// Occupancy-base logits for one month: condition features plus the
/// adjacent-effort column, one logit per cell.
pub fn linear_base_forward(
    params: &LinearBaseParams,
    condition: &Tensor,
    adjacent_effort: &[f64],
) -> Result<Vec<f64>> {
    if adjacent_effort.len() != condition.rows() {
        return Err(Error::invalid(format!(
            "{} adjacent-effort values for {} cells",
            adjacent_effort.len(),
            condition.rows()
        )));
    }
    if params.input_dim() != condition.cols() + 1 {
        return Err(Error::invalid(format!(
            "base expects width {}, got condition width {} plus adjacent effort",
            params.input_dim(),
            condition.cols()
        )));
    }
    let w = params.weight.as_slice();
    let b = params.bias.get(0, 0);
    Ok((0..condition.rows())
        .map(|i| {
            let mut acc = b;
            for (x, wi) in condition.row(i).iter().zip(w) {
                acc += x * wi;
            }
            acc + adjacent_effort[i] * w[condition.cols()]
        })
        .collect())
}

/// Detection probability for one visit: `sigmoid(clip(g_phi(x, effort), bound))`.
pub fn detection_forward(
    params: &DetectionHeadParams,
    x: &[f64],
    effort: f64,
    bound: f64,
) -> Result<f64> {
    if params.input_dim() != x.len() + 1 {
        return Err(Error::invalid(format!(
            "detection head expects width {}, got {} features plus effort",
            params.input_dim(),
            x.len()
        )));
    }
    let w = params.weight.as_slice();
    let mut logit = params.bias.get(0, 0) + effort * w[x.len()];
    for (xi, wi) in x.iter().zip(w) {
        logit += xi * wi;
    }
    Ok(sigmoid(logit.clamp(-bound, bound)))
}

/// Two message-passing layers. Propagation and the dense multiply are
/// associative, so each layer orders them to keep the sparse pass on the
/// narrower matrix.
pub fn gcn_forward_on_tape(
    tape: &mut Tape,
    vars: &GcnVars,
    adj: &NormalizedAdjacency,
    x: VarId,
    output_bound: Option<f64>,
) -> Result<VarId> {
    let xp = propagate(tape, adj, x)?;
    let pre1 = tape.matmul(xp, vars.w1)?;
    let pre1 = tape.add(pre1, vars.b1)?;
    let h1 = tape.relu(pre1);
    let h1w = tape.matmul(h1, vars.w2)?;
    let hp = propagate(tape, adj, h1w)?;
    let out = tape.add(hp, vars.b2)?;
    Ok(match output_bound {
        Some(bound) => tape.clip(out, bound),
        None => out,
    })
}

/// Encoder forward: per-node occupancy logits, clipped at the logit bound.
pub fn gcn_forward(
    stack: &GcnStack,
    adj: &NormalizedAdjacency,
    x: &Tensor,
    bound: f64,
) -> Result<Vec<f64>> {
    let mut tape = Tape::new();
    let vars = stack.leaves(&mut tape);
    let input = tape.leaf(x.clone());
    let out = gcn_forward_on_tape(&mut tape, &vars, adj, input, Some(bound))?;
    Ok(tape.value(out).as_slice().to_vec())
}

/// Velocity field on the tape: input per node is
/// `concat(psi, time_embedding(s), condition)`; output is unclipped.
pub fn velocity_forward_on_tape(
    tape: &mut Tape,
    vars: &GcnVars,
    adj: &NormalizedAdjacency,
    psi: VarId,
    s: f64,
    condition: &Tensor,
) -> Result<VarId> {
    if !(0.0..=1.0).contains(&s) {
        return Err(Error::invalid(format!("flow time {s} outside [0,1]")));
    }
    let n = condition.rows();
    let tau = time_embedding(s);
    let mut tau_mat = Tensor::zeros(n, 3);
    for i in 0..n {
        tau_mat.row_mut(i).copy_from_slice(&tau);
    }
    let tau_id = tape.leaf(tau_mat);
    let cond_id = tape.leaf(condition.clone());
    let input = tape.concat_cols(&[psi, tau_id, cond_id])?;
    gcn_forward_on_tape(tape, vars, adj, input, None)
}

/// Velocity field evaluation for ODE integration.
pub fn velocity_forward(
    params: &VelocityFieldParams,
    adj: &NormalizedAdjacency,
    psi: &[f64],
    s: f64,
    condition: &Tensor,
) -> Result<Vec<f64>> {
    let mut tape = Tape::new();
    let vars = params.stack.leaves(&mut tape);
    let psi_id = tape.leaf(Tensor::column(psi));
    let out = velocity_forward_on_tape(&mut tape, &vars, adj, psi_id, s, condition)?;
    Ok(tape.value(out).as_slice().to_vec())
}

/// Three-layer MLP baseline forward; output clipped like the encoder.
pub fn mlp_forward_on_tape(
    tape: &mut Tape,
    vars: &MlpVars,
    x: VarId,
    bound: f64,
) -> Result<VarId> {
    let pre1 = tape.matmul(x, vars.w1)?;
    let pre1 = tape.add(pre1, vars.b1)?;
    let h1 = tape.relu(pre1);
    let pre2 = tape.matmul(h1, vars.w2)?;
    let pre2 = tape.add(pre2, vars.b2)?;
    let h2 = tape.relu(pre2);
    let out = tape.matmul(h2, vars.w3)?;
    let out = tape.add(out, vars.b3)?;
    Ok(tape.clip(out, bound))
}

#[cfg(test)]
mod tests {
    use super::super::adjacency::normalized_adjacency;
    use super::super::params::{GcnEncoderParams, LOGIT_BOUND};
    use super::*;
    use crate::data::build_grid_graph;
    use crate::gradcheck::{finite_diff_grad, max_relative_error, DEFAULT_STEP};
    use crate::rng::sub_rng;
    use rand::Rng;

    #[test]
    fn zero_base_gives_zero_logits() {
        let params = LinearBaseParams::zeros(3);
        let cond = Tensor::from_vec(2, 2, vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        let out = linear_base_forward(&params, &cond, &[5.0, 6.0]).unwrap();
        assert_eq!(out, vec![0.0, 0.0]);
    }

    #[test]
    fn base_reads_lagged_effort_column() {
        let mut params = LinearBaseParams::zeros(3);
        // Condition layout is [features.., lagged effort]; adjacent effort
        // is appended last. Weight only the lagged-effort slot.
        params.weight.set(1, 0, 1.0);
        let cond = Tensor::from_vec(1, 2, vec![0.0, 2.0]).unwrap();
        let out = linear_base_forward(&params, &cond, &[9.0]).unwrap();
        assert_eq!(out, vec![2.0]);
    }

    #[test]
    fn base_matches_dot_product_oracle() {
        let mut rng = sub_rng(5, 0);
        let params = LinearBaseParams::init(4, &mut rng);
        let cond = Tensor::from_vec(3, 3, (0..9).map(|i| i as f64 * 0.3 - 1.0).collect()).unwrap();
        let adj_effort = [0.5, 1.5, 2.5];
        let got = linear_base_forward(&params, &cond, &adj_effort).unwrap();
        for i in 0..3 {
            let mut want = params.bias.get(0, 0);
            for f in 0..3 {
                want += cond.get(i, f) * params.weight.get(f, 0);
            }
            want += adj_effort[i] * params.weight.get(3, 0);
            assert!((got[i] - want).abs() < 1e-12);
        }
    }

    #[test]
    fn zero_detection_head_is_half() {
        let params = DetectionHeadParams::zeros(3);
        let p = detection_forward(&params, &[1.0, -2.0], 4.0, LOGIT_BOUND).unwrap();
        assert_eq!(p, 0.5);
    }

    #[test]
    fn detection_clips_huge_logits() {
        let mut params = DetectionHeadParams::zeros(1);
        params.bias.set(0, 0, 50.0);
        let p = detection_forward(&params, &[], 0.0, LOGIT_BOUND).unwrap();
        assert!((p - sigmoid(10.0)).abs() < 1e-12);
        assert!((p - 0.9999546).abs() < 1e-7);
    }

    #[test]
    fn detection_output_always_bounded() {
        let mut rng = sub_rng(6, 0);
        for _ in 0..200 {
            let mut params = DetectionHeadParams::zeros(2);
            params.weight.set(0, 0, rng.random_range(-30.0..30.0));
            params.weight.set(1, 0, rng.random_range(-30.0..30.0));
            params.bias.set(0, 0, rng.random_range(-30.0..30.0));
            let x = [rng.random_range(-3.0..3.0)];
            let p = detection_forward(&params, &x, rng.random_range(0.0..5.0), LOGIT_BOUND).unwrap();
            assert!((sigmoid(-10.0)..=sigmoid(10.0)).contains(&p));
        }
    }

    #[test]
    fn zero_gcn_broadcasts_bias() {
        let adj = normalized_adjacency(&build_grid_graph(2, 2).unwrap());
        let mut stack = GcnStack::zeros(3, 4);
        stack.b2.set(0, 0, 0.7);
        let x = Tensor::zeros(4, 3);
        let out = gcn_forward(&stack, &adj, &x, LOGIT_BOUND).unwrap();
        assert_eq!(out, vec![0.7; 4]);
    }

    #[test]
    fn single_node_gcn_is_a_plain_mlp() {
        let adj = normalized_adjacency(&build_grid_graph(1, 1).unwrap());
        let mut rng = sub_rng(7, 0);
        let stack = GcnStack::init(2, 5, &mut rng);
        let x = Tensor::from_vec(1, 2, vec![0.3, -1.2]).unwrap();
        let got = gcn_forward(&stack, &adj, &x, LOGIT_BOUND).unwrap();

        let mut manual = stack.b2.get(0, 0);
        for h in 0..5 {
            let pre = x.get(0, 0) * stack.w1.get(0, h)
                + x.get(0, 1) * stack.w1.get(1, h)
                + stack.b1.get(0, h);
            manual += pre.max(0.0) * stack.w2.get(h, 0);
        }
        assert!((got[0] - manual.clamp(-10.0, 10.0)).abs() < 1e-12);
    }

    #[test]
    fn two_node_path_matches_hand_computation() {
        let adj = normalized_adjacency(&build_grid_graph(1, 2).unwrap());
        let stack = GcnStack {
            w1: Tensor::from_vec(1, 1, vec![2.0]).unwrap(),
            b1: Tensor::from_vec(1, 1, vec![0.1]).unwrap(),
            w2: Tensor::from_vec(1, 1, vec![3.0]).unwrap(),
            b2: Tensor::from_vec(1, 1, vec![-0.5]).unwrap(),
        };
        let x = Tensor::from_vec(2, 1, vec![1.0, 3.0]).unwrap();
        // A_hat x = (2, 2); h1 = relu(2*2 + 0.1) = 4.1 on both nodes;
        // A_hat (h1*3) = 12.3; out = 12.3 - 0.5 = 11.8, clipped to 10.
        let out = gcn_forward(&stack, &adj, &x, LOGIT_BOUND).unwrap();
        assert!((out[0] - 10.0).abs() < 1e-12);
        assert!((out[1] - 10.0).abs() < 1e-12);

        let unclipped = {
            let mut tape = Tape::new();
            let vars = stack.leaves(&mut tape);
            let input = tape.leaf(x);
            let id = gcn_forward_on_tape(&mut tape, &vars, &adj, input, None).unwrap();
            tape.value(id).as_slice().to_vec()
        };
        assert!((unclipped[0] - 11.8).abs() < 1e-12);
    }

    #[test]
    fn gcn_is_permutation_equivariant() {
        let graph = build_grid_graph(2, 3).unwrap();
        let adj = normalized_adjacency(&graph);
        let n = 6;
        let perm = [3usize, 0, 4, 1, 5, 2];
        let mut rng = sub_rng(8, 0);
        let stack = GcnEncoderParams::init(2, 8, &mut rng).stack;
        let x = Tensor::from_vec(n, 2, (0..12).map(|i| (i as f64).cos()).collect()).unwrap();

        let base = gcn_forward(&stack, &adj, &x, LOGIT_BOUND).unwrap();

        let mut pd = Tensor::zeros(n, n);
        for i in 0..n {
            for j in 0..n {
                pd.set(perm[i], perm[j], adj.dense().get(i, j));
            }
        }
        let mut px = Tensor::zeros(n, 2);
        for i in 0..n {
            px.row_mut(perm[i]).copy_from_slice(x.row(i));
        }
        let padj = NormalizedAdjacency::from_dense(pd).unwrap();
        let permuted = gcn_forward(&stack, &padj, &px, LOGIT_BOUND).unwrap();
        for i in 0..n {
            assert!((permuted[perm[i]] - base[i]).abs() < 1e-12);
        }
    }

    #[test]
    fn zero_velocity_field_is_zero() {
        let adj = normalized_adjacency(&build_grid_graph(1, 2).unwrap());
        let params = VelocityFieldParams { stack: GcnStack::zeros(7, 4) };
        let cond = Tensor::from_vec(2, 3, vec![0.1; 6]).unwrap();
        let v = velocity_forward(&params, &adj, &[1.0, -1.0], 0.5, &cond).unwrap();
        assert_eq!(v, vec![0.0, 0.0]);
    }

    #[test]
    fn velocity_ignores_time_when_embedding_weights_zero() {
        let adj = normalized_adjacency(&build_grid_graph(1, 2).unwrap());
        let mut rng = sub_rng(9, 0);
        let mut params = VelocityFieldParams { stack: GcnStack::init(7, 6, &mut rng) };
        // Input layout: psi, then 3 time slots, then condition.
        for slot in 1..4 {
            for h in 0..6 {
                params.stack.w1.set(slot, h, 0.0);
            }
        }
        let cond = Tensor::from_vec(2, 3, vec![0.4, -0.2, 0.9, 1.1, 0.0, -0.7]).unwrap();
        let a = velocity_forward(&params, &adj, &[0.2, 0.3], 0.1, &cond).unwrap();
        let b = velocity_forward(&params, &adj, &[0.2, 0.3], 0.9, &cond).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn velocity_rejects_time_outside_unit_interval() {
        let adj = normalized_adjacency(&build_grid_graph(1, 1).unwrap());
        let params = VelocityFieldParams { stack: GcnStack::zeros(6, 2) };
        let cond = Tensor::from_vec(1, 2, vec![0.0, 0.0]).unwrap();
        assert!(velocity_forward(&params, &adj, &[0.0], 1.2, &cond).is_err());
        assert!(velocity_forward(&params, &adj, &[0.0], -0.1, &cond).is_err());
    }

    #[test]
    fn gcn_gradients_match_finite_differences() {
        let graph = build_grid_graph(1, 3).unwrap();
        let adj = normalized_adjacency(&graph);
        let mut rng = sub_rng(10, 0);
        let stack = GcnStack::init(2, 3, &mut rng);
        let x = Tensor::from_vec(3, 2, (0..6).map(|i| 0.3 * i as f64 - 0.8).collect()).unwrap();

        let flat: Vec<f64> = [&stack.w1, &stack.b1, &stack.w2, &stack.b2]
            .iter()
            .flat_map(|t| t.as_slice().iter().copied())
            .collect();
        let shapes = [(2usize, 3usize), (1, 3), (3, 1), (1, 1)];

        let run = |vals: &[f64]| -> (f64, Vec<f64>) {
            let mut offset = 0;
            let mut tensors = Vec::new();
            for &(r, c) in &shapes {
                tensors.push(Tensor::from_vec(r, c, vals[offset..offset + r * c].to_vec()).unwrap());
                offset += r * c;
            }
            let mut tape = Tape::new();
            let vars = GcnVars {
                w1: tape.leaf(tensors[0].clone()),
                b1: tape.leaf(tensors[1].clone()),
                w2: tape.leaf(tensors[2].clone()),
                b2: tape.leaf(tensors[3].clone()),
            };
            let input = tape.leaf(x.clone());
            let out = gcn_forward_on_tape(&mut tape, &vars, &adj, input, Some(LOGIT_BOUND)).unwrap();
            let sq = tape.mul(out, out).unwrap();
            let loss = tape.sum(sq);
            let grads = tape.backward(loss).unwrap();
            let flat_grads = [vars.w1, vars.b1, vars.w2, vars.b2]
                .iter()
                .flat_map(|&v| grads.get(v).unwrap().as_slice().to_vec())
                .collect();
            (tape.value(loss).get(0, 0), flat_grads)
        };

        let (_, got) = run(&flat);
        let mut f = |vals: &[f64]| Ok(run(vals).0);
        let want = finite_diff_grad(&mut f, &flat, DEFAULT_STEP).unwrap();
        let err = max_relative_error(&got, &want);
        assert!(err < 1e-5, "max relative error {err}");
    }

    #[test]
    fn velocity_gradients_flow_to_psi() {
        let graph = build_grid_graph(1, 2).unwrap();
        let adj = normalized_adjacency(&graph);
        let mut rng = sub_rng(11, 0);
        let stack = GcnStack::init(6, 4, &mut rng);
        let cond = Tensor::from_vec(2, 2, vec![0.2, -0.4, 0.6, 0.8]).unwrap();
        let psi0 = [0.3, -0.6];

        let run = |psi: &[f64]| -> (f64, Vec<f64>) {
            let mut tape = Tape::new();
            let vars = stack.leaves(&mut tape);
            let psi_id = tape.leaf(Tensor::column(psi));
            let v = velocity_forward_on_tape(&mut tape, &vars, &adj, psi_id, 0.3, &cond).unwrap();
            let sq = tape.mul(v, v).unwrap();
            let loss = tape.sum(sq);
            let grads = tape.backward(loss).unwrap();
            (
                tape.value(loss).get(0, 0),
                grads.get(psi_id).unwrap().as_slice().to_vec(),
            )
        };
        let (_, got) = run(&psi0);
        let mut f = |vals: &[f64]| Ok(run(vals).0);
        let want = finite_diff_grad(&mut f, &psi0, DEFAULT_STEP).unwrap();
        let err = max_relative_error(&got, &want);
        assert!(err < 1e-5, "max relative error {err}");
    }
}
