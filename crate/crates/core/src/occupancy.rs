//! Occupancy-detection likelihood for visit-level patrol records.
//!
//! A cell-month is occupied with probability `r`; visit `j` detects an
//! event with probability `p_j` only if the cell is occupied, and false
//! positives never occur. Marginalizing the latent occupancy state gives
//!
//! `L = (1 - r)(1 - S) + r * prod_j p_j^{y_j} (1 - p_j)^{1 - y_j}`
//!
//! with `S = max_j y_j`. Everything here works in log space; the no-detection
//! branch uses log-sum-exp so `r` near 1 does not cancel catastrophically.

use crate::error::{Error, Result};
use crate::tape::{Tape, TapeOp, VarId};
use crate::tensor::{sigmoid, softplus, Tensor};

/// Floor applied to probabilities inside logarithms.
pub const PROB_FLOOR: f64 = 1e-12;

/// One cell-month of visit outcomes with its occupancy probability.
#[derive(Debug, Clone, PartialEq)]
pub struct CellMonthObservation {
    r: f64,
    p: Vec<f64>,
    y: Vec<bool>,
}

impl CellMonthObservation {
    /// Validates `r in [0,1]`, all `p in (0,1)`, and matching lengths.
    pub fn new(r: f64, p: Vec<f64>, y: Vec<bool>) -> Result<Self> {
        if !(0.0..=1.0).contains(&r) {
            return Err(Error::invalid(format!(
                "occupancy probability {r} outside [0,1]"
            )));
        }
        if p.len() != y.len() {
            return Err(Error::invalid(format!(
                "{} detection probs for {} outcomes",
                p.len(),
                y.len()
            )));
        }
        if let Some(bad) = p.iter().find(|&&pj| !(pj > 0.0 && pj < 1.0)) {
            return Err(Error::invalid(format!(
                "detection probability {bad} outside (0,1)"
            )));
        }
        Ok(CellMonthObservation { r, p, y })
    }

    pub fn r(&self) -> f64 {
        self.r
    }

    pub fn detection_probs(&self) -> &[f64] {
        &self.p
    }

    pub fn outcomes(&self) -> &[bool] {
        &self.y
    }

    /// `S`: whether any visit detected an event (false for empty months).
    pub fn any_detection(&self) -> bool {
        self.y.iter().any(|&y| y)
    }
}

fn ln_floored(p: f64) -> f64 {
    p.max(PROB_FLOOR).ln()
}

fn log_sum_exp2(a: f64, b: f64) -> f64 {
    let m = a.max(b);
    m + ((a - m).exp() + (b - m).exp()).ln()
}

/// Log-likelihood of one cell-month observation.
pub fn occ_loglik(obs: &CellMonthObservation) -> f64 {
    let r = obs.r.clamp(PROB_FLOOR, 1.0 - PROB_FLOOR);
    if obs.any_detection() {
        let mut acc = ln_floored(r);
        for (&p, &y) in obs.p.iter().zip(&obs.y) {
            acc += if y { ln_floored(p) } else { ln_floored(1.0 - p) };
        }
        acc
    } else {
        let absent = ln_floored(1.0 - r);
        let present_missed: f64 =
            ln_floored(r) + obs.p.iter().map(|&p| ln_floored(1.0 - p)).sum::<f64>();
        // The exact value is log of a probability; rounding in the floored
        // sum can overshoot zero by a few ulp.
        log_sum_exp2(absent, present_missed).min(0.0)
    }
}

/// Probability that at least one visit detects an event: `r (1 - prod(1 - p_j))`.
pub fn p_any(r: f64, p: &[f64]) -> f64 {
    let miss_all: f64 = p.iter().map(|&pj| 1.0 - pj).product();
    r * (1.0 - miss_all)
}

/// Binary cross-entropy with the score clamped away from 0 and 1.
pub fn log_loss(score: f64, label: bool) -> f64 {
    let s = score.clamp(PROB_FLOOR, 1.0 - PROB_FLOOR);
    if label {
        -s.ln()
    } else {
        -(1.0 - s).ln()
    }
}

/// Layout describing which rows of the visit-logit tensor belong to which
/// cell-month row of the occupancy-logit tensor.
#[derive(Debug, Clone)]
pub struct ObsLayout {
    /// Half-open row ranges into the visit tensor, one per cell-month.
    pub visit_ranges: Vec<(u32, u32)>,
    /// Detection outcome per visit row.
    pub outcomes: Vec<bool>,
}

struct OccNllOp {
    layout: ObsLayout,
}

impl OccNllOp {
    /// Returns (loss, d loss / d psi, d loss / d ell).
    fn evaluate(&self, psi: &Tensor, ell: &Tensor) -> (f64, Tensor, Tensor) {
        let mut loss = 0.0;
        let mut dpsi = Tensor::zeros(psi.rows(), 1);
        let mut dell = Tensor::zeros(ell.rows(), 1);
        for (i, &(start, end)) in self.layout.visit_ranges.iter().enumerate() {
            let (start, end) = (start as usize, end as usize);
            let x = psi.get(i, 0);
            let r = sigmoid(x);
            let detected = self.layout.outcomes[start..end].iter().any(|&y| y);
            if detected {
                // log L = log r + sum_j [y log p + (1-y) log(1-p)]
                loss -= -softplus(-x);
                dpsi.set(i, 0, -(1.0 - r));
                for j in start..end {
                    let l = ell.get(j, 0);
                    let p = sigmoid(l);
                    if self.layout.outcomes[j] {
                        loss -= -softplus(-l);
                        dell.set(j, 0, -(1.0 - p));
                    } else {
                        loss -= -softplus(l);
                        dell.set(j, 0, p);
                    }
                }
            } else {
                // log L = LSE(log(1-r), log r + sum_j log(1-p_j))
                let absent = -softplus(x);
                let mut missed = -softplus(-x);
                for j in start..end {
                    missed += -softplus(ell.get(j, 0));
                }
                let logl = log_sum_exp2(absent, missed);
                loss -= logl;
                let w_absent = (absent - logl).exp();
                let w_missed = (missed - logl).exp();
                dpsi.set(i, 0, -(-w_absent * r + w_missed * (1.0 - r)));
                for j in start..end {
                    let p = sigmoid(ell.get(j, 0));
                    dell.set(j, 0, w_missed * p);
                }
            }
        }
        (loss, dpsi, dell)
    }
}

impl TapeOp for OccNllOp {
    fn backward(&self, _out: &Tensor, out_adjoint: &Tensor, inputs: &[&Tensor]) -> Vec<Tensor> {
        let g = out_adjoint.get(0, 0);
        let (_, dpsi, dell) = self.evaluate(inputs[0], inputs[1]);
        vec![dpsi.scale(g), dell.scale(g)]
    }
}

/// Pushes the summed negative log-likelihood of a batch onto the tape as a
/// fused node: `psi` holds one occupancy logit per cell-month, `visit_logits`
/// one detection logit per visit, wired together by `layout`.
pub fn batch_negative_loglik(
    tape: &mut Tape,
    psi: VarId,
    visit_logits: VarId,
    layout: ObsLayout,
) -> Result<VarId> {
    let psi_t = tape.value(psi);
    let ell_t = tape.value(visit_logits);
    if psi_t.cols() != 1 || ell_t.cols() != 1 {
        return Err(Error::invalid(format!(
            "logit tensors must be single columns, got {}x{} and {}x{}",
            psi_t.rows(),
            psi_t.cols(),
            ell_t.rows(),
            ell_t.cols()
        )));
    }
    if layout.visit_ranges.len() != psi_t.rows() {
        return Err(Error::invalid(format!(
            "{} visit ranges for {} cell-month logits",
            layout.visit_ranges.len(),
            psi_t.rows()
        )));
    }
    if layout.outcomes.len() != ell_t.rows() {
        return Err(Error::invalid(format!(
            "{} outcomes for {} visit logits",
            layout.outcomes.len(),
            ell_t.rows()
        )));
    }
    let visits = ell_t.rows() as u32;
    for &(start, end) in &layout.visit_ranges {
        if start > end || end > visits {
            return Err(Error::invalid(format!(
                "visit range {start}..{end} outside 0..{visits}"
            )));
        }
    }
    let op = OccNllOp { layout };
    let (loss, _, _) = op.evaluate(psi_t, ell_t);
    Ok(tape.push(Tensor::scalar(loss), vec![psi, visit_logits], Box::new(op)))
}
