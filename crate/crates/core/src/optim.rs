//! AdamW with decoupled weight decay, global gradient-norm clipping, and a
//! compact L-BFGS for full-batch fits.

use std::collections::VecDeque;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const ADAM_BETA1: f64 = 0.9;
pub const ADAM_BETA2: f64 = 0.999;
pub const ADAM_EPS: f64 = 1e-8;

/// AdamW over a fixed group of parameter tensors.
///
/// Weight decay is decoupled: each step first shrinks the parameter by
/// `lr * weight_decay`, then applies the bias-corrected Adam update.
pub struct AdamW {
    pub lr: f64,
    pub weight_decay: f64,
    step: u64,
    m: Vec<Tensor>,
    v: Vec<Tensor>,
}

impl AdamW {
    pub fn new(lr: f64, weight_decay: f64) -> Self {
        AdamW {
            lr,
            weight_decay,
            step: 0,
            m: Vec::new(),
            v: Vec::new(),
        }
    }

    pub fn steps_taken(&self) -> u64 {
        self.step
    }

    /// Applies one update. `grads` must align with `params` in order and
    /// shape; moment buffers are allocated on first use.
    pub fn step(&mut self, params: &mut [&mut Tensor], grads: &[Tensor]) -> Result<()> {
        if params.len() != grads.len() {
            return Err(Error::invalid(format!(
                "adamw: {} parameter tensors but {} gradient tensors",
                params.len(),
                grads.len()
            )));
        }
        if self.m.is_empty() {
            self.m = params.iter().map(|p| Tensor::zeros(p.rows(), p.cols())).collect();
            self.v = self.m.clone();
        }
        let t = self.step + 1;
        for (idx, (param, grad)) in params.iter_mut().zip(grads).enumerate() {
            if param.shape() != grad.shape() {
                return Err(Error::invalid(format!(
                    "adamw: parameter {idx} has shape {}x{} but gradient {}x{}",
                    param.rows(),
                    param.cols(),
                    grad.rows(),
                    grad.cols()
                )));
            }
            if !grad.is_finite() {
                return Err(Error::numeric(
                    format!("adamw step {t}"),
                    format!("non-finite gradient in parameter {idx}"),
                ));
            }
            let bias1 = 1.0 - ADAM_BETA1.powi(t as i32);
            let bias2 = 1.0 - ADAM_BETA2.powi(t as i32);
            let decay = 1.0 - self.lr * self.weight_decay;
            let m = self.m[idx].as_mut_slice();
            let v = self.v[idx].as_mut_slice();
            let p = param.as_mut_slice();
            for ((p, g), (m, v)) in p
                .iter_mut()
                .zip(grad.as_slice())
                .zip(m.iter_mut().zip(v.iter_mut()))
            {
                *p *= decay;
                *m = ADAM_BETA1 * *m + (1.0 - ADAM_BETA1) * g;
                *v = ADAM_BETA2 * *v + (1.0 - ADAM_BETA2) * g * g;
                let m_hat = *m / bias1;
                let v_hat = *v / bias2;
                *p -= self.lr * m_hat / (v_hat.sqrt() + ADAM_EPS);
            }
        }
        self.step = t;
        Ok(())
    }
}

pub struct LbfgsOutcome {
    pub converged: bool,
    pub iterations: usize,
    pub grad_norm: f64,
    pub loss: f64,
    /// Loss at each accepted iterate, starting from the initial point.
    pub history: Vec<f64>,
}

const LBFGS_MEMORY: usize = 10;
const ARMIJO_C1: f64 = 1e-4;
const MAX_BACKTRACKS: u32 = 40;

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn norm(a: &[f64]) -> f64 {
    dot(a, a).sqrt()
}

/// Minimizes `f` (returning loss and gradient) with limited-memory BFGS and
/// Armijo backtracking. Stops when the gradient norm drops below `grad_tol`,
/// after `max_iters` iterations, or when the line search stalls.
pub fn lbfgs_minimize(
    f: &mut dyn FnMut(&[f64]) -> Result<(f64, Vec<f64>)>,
    x0: &[f64],
    max_iters: usize,
    grad_tol: f64,
) -> Result<(Vec<f64>, LbfgsOutcome)> {
    let mut x = x0.to_vec();
    let (mut fx, mut g) = f(&x)?;
    if !fx.is_finite() {
        return Err(Error::numeric("lbfgs", "non-finite loss at the initial point"));
    }
    let mut history = vec![fx];
    let mut pairs: VecDeque<(Vec<f64>, Vec<f64>, f64)> = VecDeque::new();
    let mut iterations = 0;
    let mut converged = norm(&g) <= grad_tol;

    while !converged && iterations < max_iters {
        // Two-loop recursion for d = -H g.
        let mut d: Vec<f64> = g.iter().map(|v| -v).collect();
        let mut alphas = Vec::with_capacity(pairs.len());
        for (s, y, rho) in pairs.iter().rev() {
            let alpha = rho * dot(s, &d);
            for (di, yi) in d.iter_mut().zip(y) {
                *di -= alpha * yi;
            }
            alphas.push(alpha);
        }
        if let Some((s, y, _)) = pairs.back() {
            let gamma = dot(s, y) / dot(y, y);
            for di in d.iter_mut() {
                *di *= gamma;
            }
        }
        for ((s, y, rho), alpha) in pairs.iter().zip(alphas.into_iter().rev()) {
            let beta = rho * dot(y, &d);
            for (di, si) in d.iter_mut().zip(s) {
                *di += (alpha - beta) * si;
            }
        }
        let mut slope = dot(&g, &d);
        if slope >= 0.0 {
            // Not a descent direction (possible near clip kinks); restart
            // from steepest descent.
            pairs.clear();
            d = g.iter().map(|v| -v).collect();
            slope = -dot(&g, &g);
            if slope == 0.0 {
                converged = true;
                break;
            }
        }

        let mut t = if pairs.is_empty() {
            (1.0 / norm(&d)).min(1.0)
        } else {
            1.0
        };
        let mut accepted = None;
        for _ in 0..MAX_BACKTRACKS {
            let trial: Vec<f64> = x.iter().zip(&d).map(|(xi, di)| xi + t * di).collect();
            let (ft, gt) = f(&trial)?;
            if ft.is_finite() && ft <= fx + ARMIJO_C1 * t * slope {
                accepted = Some((trial, ft, gt));
                break;
            }
            t *= 0.5;
        }
        let Some((x_new, f_new, g_new)) = accepted else {
            break;
        };

        let s: Vec<f64> = x_new.iter().zip(&x).map(|(a, b)| a - b).collect();
        let y: Vec<f64> = g_new.iter().zip(&g).map(|(a, b)| a - b).collect();
        let sy = dot(&s, &y);
        if sy > 1e-12 * norm(&s) * norm(&y) {
            if pairs.len() == LBFGS_MEMORY {
                pairs.pop_front();
            }
            pairs.push_back((s, y, 1.0 / sy));
        }
        x = x_new;
        fx = f_new;
        g = g_new;
        history.push(fx);
        iterations += 1;
        converged = norm(&g) <= grad_tol;
    }

    let grad_norm = norm(&g);
    Ok((
        x,
        LbfgsOutcome {
            converged,
            iterations,
            grad_norm,
            loss: fx,
            history,
        },
    ))
}

/// Scales all gradients by `max_norm / norm` when their joint L2 norm
/// exceeds `max_norm`; returns the pre-clip norm.
pub fn clip_grad_norm(grads: &mut [Tensor], max_norm: f64) -> f64 {
    let squared: f64 = grads
        .iter()
        .flat_map(|g| g.as_slice())
        .map(|x| x * x)
        .sum();
    let norm = squared.sqrt();
    if norm > max_norm {
        let factor = max_norm / norm;
        for g in grads.iter_mut() {
            for x in g.as_mut_slice() {
                *x *= factor;
            }
        }
    }
    norm
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn first_step_is_bias_corrected() {
        let mut theta = Tensor::scalar(1.0);
        let mut opt = AdamW::new(0.1, 0.0);
        let grad = Tensor::scalar(1.0);
        opt.step(&mut [&mut theta], &[grad]).unwrap();
        assert!((theta.get(0, 0) - 0.9).abs() < 1e-8);
    }

    #[test]
    fn zero_gradients_without_decay_leave_params_unchanged() {
        let mut theta = Tensor::column(&[0.25, -1.5, 3.0]);
        let before = theta.clone();
        let mut opt = AdamW::new(0.1, 0.0);
        for _ in 0..3 {
            opt.step(&mut [&mut theta], &[Tensor::zeros(3, 1)]).unwrap();
        }
        assert_eq!(theta, before);
    }

    #[test]
    fn decay_applies_before_update() {
        let mut theta = Tensor::scalar(1.0);
        let mut opt = AdamW::new(0.1, 0.01);
        opt.step(&mut [&mut theta], &[Tensor::scalar(0.0)]).unwrap();
        assert!((theta.get(0, 0) - 0.999).abs() < 1e-15);
    }

    #[test]
    fn non_finite_gradient_names_step() {
        let mut theta = Tensor::scalar(1.0);
        let mut opt = AdamW::new(0.1, 0.0);
        opt.step(&mut [&mut theta], &[Tensor::scalar(0.5)]).unwrap();
        let err = opt
            .step(&mut [&mut theta], &[Tensor::scalar(f64::NAN)])
            .unwrap_err();
        assert!(err.to_string().contains("step 2"), "{err}");
    }

    #[test]
    fn lbfgs_solves_quadratic() {
        let mut f = |x: &[f64]| {
            let loss = (x[0] - 3.0).powi(2) + 2.0 * (x[1] + 1.0).powi(2);
            Ok((loss, vec![2.0 * (x[0] - 3.0), 4.0 * (x[1] + 1.0)]))
        };
        let (x, out) = lbfgs_minimize(&mut f, &[0.0, 0.0], 100, 1e-8).unwrap();
        assert!(out.converged, "grad norm {}", out.grad_norm);
        assert!((x[0] - 3.0).abs() < 1e-6 && (x[1] + 1.0).abs() < 1e-6);
        assert!(out.iterations < 30);
    }

    #[test]
    fn lbfgs_solves_rosenbrock() {
        let mut f = |x: &[f64]| {
            let (a, b) = (x[0], x[1]);
            let loss = (1.0 - a).powi(2) + 100.0 * (b - a * a).powi(2);
            let g = vec![
                -2.0 * (1.0 - a) - 400.0 * a * (b - a * a),
                200.0 * (b - a * a),
            ];
            Ok((loss, g))
        };
        let (x, out) = lbfgs_minimize(&mut f, &[-1.2, 1.0], 500, 1e-6).unwrap();
        assert!(out.converged, "grad norm {}", out.grad_norm);
        assert!((x[0] - 1.0).abs() < 1e-4 && (x[1] - 1.0).abs() < 1e-4);
    }

    #[test]
    fn lbfgs_history_is_nonincreasing() {
        let mut f = |x: &[f64]| Ok((x[0].powi(4), vec![4.0 * x[0].powi(3)]));
        let (_, out) = lbfgs_minimize(&mut f, &[2.0], 200, 1e-10).unwrap();
        for w in out.history.windows(2) {
            assert!(w[1] <= w[0] + 1e-15);
        }
    }

    #[test]
    fn clip_rescales_only_above_max() {
        let mut grads = vec![Tensor::column(&[6.0, 8.0])];
        let norm = clip_grad_norm(&mut grads, 5.0);
        assert_eq!(norm, 10.0);
        assert_eq!(grads[0].as_slice(), &[3.0, 4.0]);

        let mut small = vec![Tensor::column(&[0.3, 0.4])];
        let norm = clip_grad_norm(&mut small, 5.0);
        assert_eq!(norm, 0.5);
        assert_eq!(small[0].as_slice(), &[0.3, 0.4]);
    }
}
