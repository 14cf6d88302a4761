//! Composite-base flow matching over latent occupancy logits.
//!
//! The latent state starts at a composite base (a pretrained linear
//! predictor plus Gaussian noise), follows straight interpolation paths
//! during training, and is transported by the learned velocity field at
//! inference by integrating `d psi / d s = v_theta(psi, s; A_hat, C_t)`
//! from `s = 0` to `1`. Risk is the Monte Carlo mean over several base
//! draws.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::models::{
    linear_base_forward, velocity_forward, velocity_forward_on_tape, GcnVars, LinearBaseParams,
    NormalizedAdjacency, VelocityFieldParams,
};
use crate::tape::{Tape, VarId};
use crate::tensor::{sigmoid, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum IntegrationScheme {
    Euler,
    Rk4,
}

/// Whether the Monte Carlo mean is taken over probabilities or logits.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RiskAveraging {
    Probability,
    Logit,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct FlowConfig {
    /// Base noise standard deviation.
    pub sigma0: f64,
    /// Fixed integration steps from `s = 0` to `1`.
    pub steps: usize,
    pub scheme: IntegrationScheme,
    /// Monte Carlo draws per risk evaluation.
    pub mc_samples: usize,
    pub averaging: RiskAveraging,
    pub seed: u64,
}

impl Default for FlowConfig {
    fn default() -> Self {
        FlowConfig {
            sigma0: 0.1,
            steps: 20,
            scheme: IntegrationScheme::Euler,
            mc_samples: 8,
            averaging: RiskAveraging::Probability,
            seed: 0,
        }
    }
}

impl FlowConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.sigma0 >= 0.0) {
            return Err(Error::invalid("sigma0 must be nonnegative"));
        }
        if self.steps == 0 {
            return Err(Error::invalid("integration needs at least one step"));
        }
        if self.mc_samples == 0 {
            return Err(Error::invalid("risk sampling needs at least one draw"));
        }
        Ok(())
    }
}

/// `psi^(0) = b_eta(C_t) + eps`, `eps ~ N(0, sigma0^2 I)`.
pub fn sample_composite_base(
    params: &LinearBaseParams,
    condition: &Tensor,
    adjacent_effort: &[f64],
    sigma0: f64,
    rng: &mut ChaCha8Rng,
) -> Result<Vec<f64>> {
    if !(sigma0 >= 0.0) {
        return Err(Error::invalid("sigma0 must be nonnegative"));
    }
    let mut psi = linear_base_forward(params, condition, adjacent_effort)?;
    if sigma0 > 0.0 {
        for v in &mut psi {
            *v += sigma0 * rng.sample::<f64, _>(StandardNormal);
        }
    }
    Ok(psi)
}

/// `psi^(s) = (1 - s) psi0 + s psi1`.
pub fn interpolate(psi0: &[f64], psi1: &[f64], s: f64) -> Result<Vec<f64>> {
    if psi0.len() != psi1.len() {
        return Err(Error::invalid(format!(
            "interpolating vectors of lengths {} and {}",
            psi0.len(),
            psi1.len()
        )));
    }
    if !(0.0..=1.0).contains(&s) {
        return Err(Error::invalid(format!("flow time {s} outside [0,1]")));
    }
    Ok(psi0
        .iter()
        .zip(psi1)
        .map(|(&a, &b)| (1.0 - s) * a + s * b)
        .collect())
}

/// Flow-matching loss on the tape: squared L2 distance between the
/// velocity at the interpolated state and the displacement `psi1 - psi0`.
/// Gradients flow to the velocity parameters only; the endpoint states are
/// training data.
pub fn fm_loss_on_tape(
    tape: &mut Tape,
    theta: &GcnVars,
    adj: &NormalizedAdjacency,
    psi0: &[f64],
    psi1: &[f64],
    s: f64,
    condition: &Tensor,
) -> Result<VarId> {
    let psi_s = interpolate(psi0, psi1, s)?;
    let psi_id = tape.leaf(Tensor::column(&psi_s));
    let v = velocity_forward_on_tape(tape, theta, adj, psi_id, s, condition)?;
    let displacement: Vec<f64> = psi1.iter().zip(psi0).map(|(&b, &a)| b - a).collect();
    let target = tape.leaf(Tensor::column(&displacement));
    tape.squared_error(v, target)
}

/// Evaluates the flow-matching loss without keeping gradients.
pub fn fm_loss_value(
    theta: &VelocityFieldParams,
    adj: &NormalizedAdjacency,
    psi0: &[f64],
    psi1: &[f64],
    s: f64,
    condition: &Tensor,
) -> Result<f64> {
    let mut tape = Tape::new();
    let vars = theta.stack.leaves(&mut tape);
    let loss = fm_loss_on_tape(&mut tape, &vars, adj, psi0, psi1, s, condition)?;
    tape.value(loss).item()
}

fn check_finite(psi: &[f64], step: usize, total: usize) -> Result<()> {
    if psi.iter().any(|v| !v.is_finite()) {
        return Err(Error::numeric(
            "flow integration",
            format!("non-finite state after step {step} of {total}"),
        ));
    }
    Ok(())
}

/// Integrates the flow ODE from `s = 0` to `1` with `steps` fixed steps.
pub fn integrate_flow(
    theta: &VelocityFieldParams,
    psi0: &[f64],
    adj: &NormalizedAdjacency,
    condition: &Tensor,
    steps: usize,
    scheme: IntegrationScheme,
) -> Result<Vec<f64>> {
    if steps == 0 {
        return Err(Error::invalid("integration needs at least one step"));
    }
    let h = 1.0 / steps as f64;
    let mut psi = psi0.to_vec();
    check_finite(&psi, 0, steps)?;
    for k in 0..steps {
        let s = k as f64 * h;
        match scheme {
            IntegrationScheme::Euler => {
                let v = velocity_forward(theta, adj, &psi, s, condition)?;
                for (p, vi) in psi.iter_mut().zip(&v) {
                    *p += h * vi;
                }
            }
            IntegrationScheme::Rk4 => {
                let mid = (s + 0.5 * h).min(1.0);
                let end = (s + h).min(1.0);
                let k1 = velocity_forward(theta, adj, &psi, s, condition)?;
                let y2: Vec<f64> = psi.iter().zip(&k1).map(|(p, v)| p + 0.5 * h * v).collect();
                let k2 = velocity_forward(theta, adj, &y2, mid, condition)?;
                let y3: Vec<f64> = psi.iter().zip(&k2).map(|(p, v)| p + 0.5 * h * v).collect();
                let k3 = velocity_forward(theta, adj, &y3, mid, condition)?;
                let y4: Vec<f64> = psi.iter().zip(&k3).map(|(p, v)| p + h * v).collect();
                let k4 = velocity_forward(theta, adj, &y4, end, condition)?;
                for (i, p) in psi.iter_mut().enumerate() {
                    *p += h / 6.0 * (k1[i] + 2.0 * k2[i] + 2.0 * k3[i] + k4[i]);
                }
            }
        }
        check_finite(&psi, k + 1, steps)?;
    }
    Ok(psi)
}

fn thread_count_from_env() -> usize {
    std::env::var("WILDFLOW_THREADS")
        .ok()
        .and_then(|v| v.parse::<usize>().ok())
        .filter(|&n| n >= 1)
        .unwrap_or(1)
}

/// Monte Carlo risk: mean over `mc_samples` transported base draws.
///
/// `base` selects the composite base; `None` draws a pure standard normal
/// base (the no-composite-base ablation). Deterministic for a given config
/// seed; `WILDFLOW_THREADS` may parallelize the draws without changing the
/// result, because all noise is drawn up front in a fixed order and the
/// average runs in draw order.
pub fn sample_risk(
    theta: &VelocityFieldParams,
    base: Option<&LinearBaseParams>,
    adj: &NormalizedAdjacency,
    condition: &Tensor,
    adjacent_effort: &[f64],
    config: &FlowConfig,
) -> Result<Vec<f64>> {
    sample_risk_with_threads(
        theta,
        base,
        adj,
        condition,
        adjacent_effort,
        config,
        thread_count_from_env(),
    )
}

pub(crate) fn sample_risk_with_threads(
    theta: &VelocityFieldParams,
    base: Option<&LinearBaseParams>,
    adj: &NormalizedAdjacency,
    condition: &Tensor,
    adjacent_effort: &[f64],
    config: &FlowConfig,
    threads: usize,
) -> Result<Vec<f64>> {
    config.validate()?;
    let m = config.mc_samples;
    let n = condition.rows();
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let bases: Vec<Vec<f64>> = (0..m)
        .map(|_| match base {
            Some(eta) => {
                sample_composite_base(eta, condition, adjacent_effort, config.sigma0, &mut rng)
            }
            None => Ok((0..n).map(|_| rng.sample::<f64, _>(StandardNormal)).collect()),
        })
        .collect::<Result<_>>()?;

    let integrate = |base: &Vec<f64>| -> Result<Vec<f64>> {
        integrate_flow(theta, base, adj, condition, config.steps, config.scheme)
    };
    let finals: Vec<Result<Vec<f64>>> = if threads <= 1 || m == 1 {
        bases.iter().map(integrate).collect()
    } else {
        let workers = threads.min(m);
        let mut slots: Vec<Option<Result<Vec<f64>>>> = (0..m).map(|_| None).collect();
        std::thread::scope(|scope| {
            for (worker, chunk) in slots.chunks_mut(m.div_ceil(workers)).enumerate() {
                let bases = &bases;
                let integrate = &integrate;
                let offset = worker * m.div_ceil(workers);
                scope.spawn(move || {
                    for (i, slot) in chunk.iter_mut().enumerate() {
                        *slot = Some(integrate(&bases[offset + i]));
                    }
                });
            }
        });
        slots.into_iter().map(|s| s.expect("all slots filled")).collect()
    };

    let mut acc = vec![0.0f64; n];
    for result in finals {
        let psi1 = result?;
        for (a, &p) in acc.iter_mut().zip(&psi1) {
            *a += match config.averaging {
                RiskAveraging::Probability => sigmoid(p),
                RiskAveraging::Logit => p,
            };
        }
    }
    let scale = 1.0 / m as f64;
    Ok(acc
        .into_iter()
        .map(|a| match config.averaging {
            RiskAveraging::Probability => a * scale,
            RiskAveraging::Logit => sigmoid(a * scale),
        })
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::build_grid_graph;
    use crate::gradcheck::{finite_diff_grad, max_relative_error, DEFAULT_STEP};
    use crate::models::{normalized_adjacency, GcnStack};
    use crate::rng::sub_rng;

    fn one_node() -> NormalizedAdjacency {
        normalized_adjacency(&build_grid_graph(1, 1).unwrap())
    }

    /// Velocity field wired so v(psi, s) = psi on a single node.
    fn identity_field() -> VelocityFieldParams {
        let mut stack = GcnStack::zeros(6, 1);
        stack.w1.set(0, 0, 1.0);
        stack.w2.set(0, 0, 1.0);
        VelocityFieldParams { stack }
    }

    fn constant_field(c: f64) -> VelocityFieldParams {
        let mut stack = GcnStack::zeros(6, 1);
        stack.b2.set(0, 0, c);
        VelocityFieldParams { stack }
    }

    fn unit_condition() -> Tensor {
        Tensor::from_vec(1, 2, vec![0.3, -0.1]).unwrap()
    }

    #[test]
    fn zero_noise_base_is_exact() {
        let mut rng = sub_rng(1, 0);
        let params = LinearBaseParams::init(3, &mut rng);
        let cond = Tensor::from_vec(2, 2, vec![0.5, 1.0, -0.5, 2.0]).unwrap();
        let adj_eff = [0.2, 0.4];
        let mut rng2 = sub_rng(1, 1);
        let base = sample_composite_base(&params, &cond, &adj_eff, 0.0, &mut rng2).unwrap();
        let direct = linear_base_forward(&params, &cond, &adj_eff).unwrap();
        assert_eq!(base, direct);
    }

    #[test]
    fn unit_noise_moments() {
        let params = LinearBaseParams::zeros(1);
        let n = 100_000;
        let cond = Tensor::zeros(n, 0);
        let adj_eff = vec![0.0; n];
        let mut rng = sub_rng(2, 0);
        let draws = sample_composite_base(&params, &cond, &adj_eff, 1.0, &mut rng).unwrap();
        let mean = draws.iter().sum::<f64>() / n as f64;
        let var = draws.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n as f64;
        assert!(mean.abs() < 0.02, "mean {mean}");
        assert!((var.sqrt() - 1.0).abs() < 0.02, "std {}", var.sqrt());
    }

    #[test]
    fn same_seed_reproduces_base() {
        let params = LinearBaseParams::zeros(2);
        let cond = Tensor::zeros(3, 1);
        let adj_eff = [0.0; 3];
        let a = sample_composite_base(&params, &cond, &adj_eff, 0.5, &mut sub_rng(9, 9)).unwrap();
        let b = sample_composite_base(&params, &cond, &adj_eff, 0.5, &mut sub_rng(9, 9)).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn interpolation_endpoints_and_midpoints() {
        let psi0 = [0.0, 1.0];
        let psi1 = [2.0, 3.0];
        assert_eq!(interpolate(&psi0, &psi1, 0.0).unwrap(), psi0);
        assert_eq!(interpolate(&psi0, &psi1, 1.0).unwrap(), psi1);
        assert_eq!(interpolate(&[0.0], &[2.0], 0.25).unwrap(), vec![0.5]);
        assert!(interpolate(&[0.0], &[1.0, 2.0], 0.5).is_err());
    }

    #[test]
    fn fm_loss_zero_when_velocity_matches_displacement() {
        let adj = one_node();
        let theta = constant_field(0.7);
        let loss =
            fm_loss_value(&theta, &adj, &[0.3], &[1.0], 0.4, &unit_condition()).unwrap();
        assert!(loss.abs() < 1e-24, "{loss}");
    }

    #[test]
    fn fm_loss_counts_nodes_for_zero_field() {
        let adj = normalized_adjacency(&build_grid_graph(2, 3).unwrap());
        let theta = VelocityFieldParams { stack: GcnStack::zeros(8, 4) };
        let cond = Tensor::zeros(6, 4);
        let psi0 = vec![0.0; 6];
        let psi1 = vec![1.0; 6];
        let loss = fm_loss_value(&theta, &adj, &psi0, &psi1, 0.5, &cond).unwrap();
        assert!((loss - 6.0).abs() < 1e-12, "{loss}");
    }

    #[test]
    fn fm_loss_gradient_matches_finite_differences() {
        let adj = normalized_adjacency(&build_grid_graph(1, 2).unwrap());
        let mut rng = sub_rng(3, 0);
        let stack = GcnStack::init(7, 3, &mut rng);
        let cond = Tensor::from_vec(2, 3, vec![0.1, -0.4, 0.8, 0.5, 0.2, -0.9]).unwrap();
        let psi0 = [0.4, -0.2];
        let psi1 = [1.1, 0.6];
        let shapes = [(7usize, 3usize), (1, 3), (3, 1), (1, 1)];

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
            let loss =
                fm_loss_on_tape(&mut tape, &vars, &adj, &psi0, &psi1, 0.3, &cond).unwrap();
            let grads = tape.backward(loss).unwrap();
            let flat = [vars.w1, vars.b1, vars.w2, vars.b2]
                .iter()
                .flat_map(|&v| grads.get(v).unwrap().as_slice().to_vec())
                .collect();
            (tape.value(loss).get(0, 0), flat)
        };

        let flat: Vec<f64> = [&stack.w1, &stack.b1, &stack.w2, &stack.b2]
            .iter()
            .flat_map(|t| t.as_slice().iter().copied())
            .collect();
        let (_, got) = run(&flat);
        let mut f = |vals: &[f64]| Ok(run(vals).0);
        let want = finite_diff_grad(&mut f, &flat, DEFAULT_STEP).unwrap();
        let err = max_relative_error(&got, &want);
        assert!(err < 1e-5, "max relative error {err}");
    }

    #[test]
    fn constant_velocity_is_exact_for_both_schemes() {
        let adj = one_node();
        let theta = constant_field(-1.3);
        let cond = unit_condition();
        for steps in [1, 7, 20] {
            for scheme in [IntegrationScheme::Euler, IntegrationScheme::Rk4] {
                let out = integrate_flow(&theta, &[0.5], &adj, &cond, steps, scheme).unwrap();
                assert!((out[0] - (0.5 - 1.3)).abs() < 1e-12, "steps {steps}");
            }
        }
    }

    #[test]
    fn euler_approaches_e_on_identity_field() {
        let adj = one_node();
        let theta = identity_field();
        let cond = unit_condition();
        let out =
            integrate_flow(&theta, &[1.0], &adj, &cond, 1000, IntegrationScheme::Euler).unwrap();
        let rel = (out[0] - std::f64::consts::E).abs() / std::f64::consts::E;
        assert!(rel < 0.005, "relative error {rel}");
    }

    #[test]
    fn step_doubling_shows_nominal_orders() {
        let adj = one_node();
        let theta = identity_field();
        let cond = unit_condition();
        let e = std::f64::consts::E;
        let err = |steps, scheme| {
            let out = integrate_flow(&theta, &[1.0], &adj, &cond, steps, scheme).unwrap();
            (out[0] - e).abs()
        };
        let euler_order = (err(4, IntegrationScheme::Euler) / err(8, IntegrationScheme::Euler)).log2();
        assert!((euler_order - 1.0).abs() < 0.3, "euler order {euler_order}");
        let rk4_order = (err(2, IntegrationScheme::Rk4) / err(4, IntegrationScheme::Rk4)).log2();
        assert!((rk4_order - 4.0).abs() < 0.3, "rk4 order {rk4_order}");
    }

    #[test]
    fn divergence_names_the_failing_step() {
        let adj = one_node();
        let theta = constant_field(1.0e308);
        let cond = unit_condition();
        let err = integrate_flow(&theta, &[1.0e308], &adj, &cond, 4, IntegrationScheme::Euler)
            .unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("step"), "{msg}");
    }

    #[test]
    fn deterministic_risk_without_noise() {
        let adj = one_node();
        let theta = constant_field(0.5);
        let mut eta = LinearBaseParams::zeros(3);
        eta.bias.set(0, 0, 0.25);
        let cond = unit_condition();
        let cfg = FlowConfig { sigma0: 0.0, ..FlowConfig::default() };
        let r = sample_risk(&theta, Some(&eta), &adj, &cond, &[0.0], &cfg).unwrap();
        assert!((r[0] - sigmoid(0.75)).abs() < 1e-12);
    }

    #[test]
    fn zero_everything_gives_half() {
        let adj = normalized_adjacency(&build_grid_graph(2, 2).unwrap());
        let theta = VelocityFieldParams { stack: GcnStack::zeros(8, 2) };
        let eta = LinearBaseParams::zeros(5);
        let cond = Tensor::zeros(4, 4);
        let cfg = FlowConfig { sigma0: 0.0, ..FlowConfig::default() };
        let r = sample_risk(&theta, Some(&eta), &adj, &cond, &[0.0; 4], &cfg).unwrap();
        assert_eq!(r, vec![0.5; 4]);
    }

    #[test]
    fn absent_base_samples_a_unit_normal() {
        let adj = one_node();
        let theta = VelocityFieldParams { stack: GcnStack::zeros(6, 2) };
        let cond = unit_condition();
        let cfg = FlowConfig { mc_samples: 512, seed: 9, ..FlowConfig::default() };
        let a = sample_risk(&theta, None, &adj, &cond, &[0.0], &cfg).unwrap();
        let b = sample_risk(&theta, None, &adj, &cond, &[0.0], &cfg).unwrap();
        assert_eq!(a, b);
        // E[sigmoid(eps)] = 0.5 for symmetric unit noise and a frozen field.
        assert!((a[0] - 0.5).abs() < 0.05, "{}", a[0]);
    }

    #[test]
    fn risk_reproducible_and_threading_invariant() {
        let adj = one_node();
        let theta = identity_field();
        let mut eta = LinearBaseParams::zeros(3);
        eta.bias.set(0, 0, -0.4);
        let cond = unit_condition();
        let cfg = FlowConfig { seed: 31, ..FlowConfig::default() };
        let a = sample_risk_with_threads(&theta, Some(&eta), &adj, &cond, &[0.1], &cfg, 1).unwrap();
        let b = sample_risk_with_threads(&theta, Some(&eta), &adj, &cond, &[0.1], &cfg, 1).unwrap();
        let c = sample_risk_with_threads(&theta, Some(&eta), &adj, &cond, &[0.1], &cfg, 4).unwrap();
        assert_eq!(a, b);
        assert_eq!(a, c);
        assert!(a[0] > 0.0 && a[0] < 1.0);
    }

    #[test]
    fn doubling_draws_keeps_the_mean() {
        let adj = one_node();
        let theta = identity_field();
        let eta = LinearBaseParams::zeros(3);
        let cond = unit_condition();
        let base = FlowConfig { sigma0: 0.5, mc_samples: 64, seed: 5, ..FlowConfig::default() };
        let doubled = FlowConfig { mc_samples: 128, ..base.clone() };
        let a = sample_risk(&theta, Some(&eta), &adj, &cond, &[0.0], &base).unwrap();
        let b = sample_risk(&theta, Some(&eta), &adj, &cond, &[0.0], &doubled).unwrap();
        // Monte Carlo error at sigma ~ 0.3/sqrt(64).
        assert!((a[0] - b[0]).abs() < 3.0 * 0.3 / 8.0, "{} vs {}", a[0], b[0]);
    }

    #[test]
    fn averaging_switch_changes_but_bounds_results() {
        let adj = one_node();
        let theta = identity_field();
        let eta = LinearBaseParams::zeros(3);
        let cond = unit_condition();
        let p = FlowConfig { sigma0: 1.0, seed: 2, ..FlowConfig::default() };
        let l = FlowConfig { averaging: RiskAveraging::Logit, ..p.clone() };
        let rp = sample_risk(&theta, Some(&eta), &adj, &cond, &[0.0], &p).unwrap();
        let rl = sample_risk(&theta, Some(&eta), &adj, &cond, &[0.0], &l).unwrap();
        for v in rp.iter().chain(&rl) {
            assert!(*v > 0.0 && *v < 1.0);
        }
        assert_ne!(rp, rl);
    }
}
