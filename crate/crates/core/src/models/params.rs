//! Parameter containers, seeded initialization, and tape registration.

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::tape::{Tape, VarId};
use crate::tensor::Tensor;

/// Hidden width shared by the encoder, velocity field, and MLP baseline.
pub const HIDDEN_DIM: usize = 128;

/// Logit outputs are clipped to this magnitude wherever probabilities are
/// produced downstream; velocity outputs are never clipped.
pub const LOGIT_BOUND: f64 = 10.0;

fn xavier(rows: usize, cols: usize, rng: &mut ChaCha8Rng) -> Tensor {
    let bound = (6.0 / (rows + cols) as f64).sqrt();
    let data = (0..rows * cols)
        .map(|_| rng.random_range(-bound..=bound))
        .collect();
    Tensor::from_vec(rows, cols, data).expect("length matches by construction")
}

/// Linear occupancy base `b_eta` over the condition features plus one
/// adjacent-effort feature.
#[derive(Debug, Clone, PartialEq)]
pub struct LinearBaseParams {
    /// `input_dim x 1`.
    pub weight: Tensor,
    /// `1 x 1`.
    pub bias: Tensor,
}

#[derive(Debug, Clone, Copy)]
pub struct LinearBaseVars {
    pub weight: VarId,
    pub bias: VarId,
}

impl LinearBaseParams {
    pub fn zeros(input_dim: usize) -> Self {
        LinearBaseParams {
            weight: Tensor::zeros(input_dim, 1),
            bias: Tensor::zeros(1, 1),
        }
    }

    pub fn init(input_dim: usize, rng: &mut ChaCha8Rng) -> Self {
        LinearBaseParams {
            weight: xavier(input_dim, 1, rng),
            bias: Tensor::zeros(1, 1),
        }
    }

    pub fn input_dim(&self) -> usize {
        self.weight.rows()
    }

    pub fn leaves(&self, tape: &mut Tape) -> LinearBaseVars {
        LinearBaseVars {
            weight: tape.leaf(self.weight.clone()),
            bias: tape.leaf(self.bias.clone()),
        }
    }
}

/// Visit-level detection head `g_phi` over concat(features, effort).
#[derive(Debug, Clone, PartialEq)]
pub struct DetectionHeadParams {
    pub weight: Tensor,
    pub bias: Tensor,
}

impl DetectionHeadParams {
    pub fn zeros(input_dim: usize) -> Self {
        DetectionHeadParams {
            weight: Tensor::zeros(input_dim, 1),
            bias: Tensor::zeros(1, 1),
        }
    }

    pub fn init(input_dim: usize, rng: &mut ChaCha8Rng) -> Self {
        DetectionHeadParams {
            weight: xavier(input_dim, 1, rng),
            bias: Tensor::zeros(1, 1),
        }
    }

    pub fn input_dim(&self) -> usize {
        self.weight.rows()
    }

    pub fn leaves(&self, tape: &mut Tape) -> LinearBaseVars {
        LinearBaseVars {
            weight: tape.leaf(self.weight.clone()),
            bias: tape.leaf(self.bias.clone()),
        }
    }
}

/// Two message-passing layers: input -> hidden (relu) -> 1 output per node.
#[derive(Debug, Clone, PartialEq)]
pub struct GcnStack {
    pub w1: Tensor,
    pub b1: Tensor,
    pub w2: Tensor,
    pub b2: Tensor,
}

#[derive(Debug, Clone, Copy)]
pub struct GcnVars {
    pub w1: VarId,
    pub b1: VarId,
    pub w2: VarId,
    pub b2: VarId,
}

impl GcnStack {
    pub fn zeros(input_dim: usize, hidden: usize) -> Self {
        GcnStack {
            w1: Tensor::zeros(input_dim, hidden),
            b1: Tensor::zeros(1, hidden),
            w2: Tensor::zeros(hidden, 1),
            b2: Tensor::zeros(1, 1),
        }
    }

    pub fn init(input_dim: usize, hidden: usize, rng: &mut ChaCha8Rng) -> Self {
        GcnStack {
            w1: xavier(input_dim, hidden, rng),
            b1: Tensor::zeros(1, hidden),
            w2: xavier(hidden, 1, rng),
            b2: Tensor::zeros(1, 1),
        }
    }

    pub fn input_dim(&self) -> usize {
        self.w1.rows()
    }

    pub fn hidden_dim(&self) -> usize {
        self.w1.cols()
    }

    pub fn leaves(&self, tape: &mut Tape) -> GcnVars {
        GcnVars {
            w1: tape.leaf(self.w1.clone()),
            b1: tape.leaf(self.b1.clone()),
            w2: tape.leaf(self.w2.clone()),
            b2: tape.leaf(self.b2.clone()),
        }
    }
}

/// Occupancy encoder `f_omega`.
#[derive(Debug, Clone, PartialEq)]
pub struct GcnEncoderParams {
    pub stack: GcnStack,
}

impl GcnEncoderParams {
    pub fn init(input_dim: usize, hidden: usize, rng: &mut ChaCha8Rng) -> Self {
        GcnEncoderParams { stack: GcnStack::init(input_dim, hidden, rng) }
    }
}

/// Velocity field `v_theta`; shares the encoder topology, but its input is
/// concat(psi, time embedding, condition) and its output is unclipped.
#[derive(Debug, Clone, PartialEq)]
pub struct VelocityFieldParams {
    pub stack: GcnStack,
}

impl VelocityFieldParams {
    pub fn init(input_dim: usize, hidden: usize, rng: &mut ChaCha8Rng) -> Self {
        VelocityFieldParams { stack: GcnStack::init(input_dim, hidden, rng) }
    }
}

/// Three-layer perceptron baseline: two relu hidden layers, linear output.
#[derive(Debug, Clone, PartialEq)]
pub struct MlpParams {
    pub w1: Tensor,
    pub b1: Tensor,
    pub w2: Tensor,
    pub b2: Tensor,
    pub w3: Tensor,
    pub b3: Tensor,
}

#[derive(Debug, Clone, Copy)]
pub struct MlpVars {
    pub w1: VarId,
    pub b1: VarId,
    pub w2: VarId,
    pub b2: VarId,
    pub w3: VarId,
    pub b3: VarId,
}

impl MlpParams {
    pub fn init(input_dim: usize, hidden: usize, rng: &mut ChaCha8Rng) -> Self {
        MlpParams {
            w1: xavier(input_dim, hidden, rng),
            b1: Tensor::zeros(1, hidden),
            w2: xavier(hidden, hidden, rng),
            b2: Tensor::zeros(1, hidden),
            w3: xavier(hidden, 1, rng),
            b3: Tensor::zeros(1, 1),
        }
    }

    pub fn input_dim(&self) -> usize {
        self.w1.rows()
    }

    pub fn leaves(&self, tape: &mut Tape) -> MlpVars {
        MlpVars {
            w1: tape.leaf(self.w1.clone()),
            b1: tape.leaf(self.b1.clone()),
            w2: tape.leaf(self.w2.clone()),
            b2: tape.leaf(self.b2.clone()),
            w3: tape.leaf(self.w3.clone()),
            b3: tape.leaf(self.b3.clone()),
        }
    }
}
