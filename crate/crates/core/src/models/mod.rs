//! Parameterized model components.
//!
//! Four functions cooperate at inference time: a linear occupancy base
//! `b_eta` that warm-starts the latent state, a graph-convolutional encoder
//! `f_omega` that produces occupancy logits from context, a linear
//! detection head `g_phi` mapping visit covariates to detection logits, and
//! a velocity field `v_theta` with the encoder's topology that transports
//! latent states along the flow. All forwards run on the autodiff tape;
//! message passing uses a cached sparse form of the normalized adjacency.

mod adjacency;
mod checkpoint;
mod forward;
mod params;
mod scaler;

pub use adjacency::{normalized_adjacency, propagate, NormalizedAdjacency};
pub use checkpoint::{read_params_bin, write_params_bin, TensorEntry};
pub use forward::{
    detection_forward, detection_logits_on_tape, gcn_forward, gcn_forward_on_tape,
    linear_base_forward, linear_logits_on_tape, mlp_forward_on_tape, time_embedding,
    velocity_forward, velocity_forward_on_tape,
};
pub use params::{
    DetectionHeadParams, GcnEncoderParams, GcnStack, GcnVars, LinearBaseParams, LinearBaseVars,
    MlpParams, MlpVars, VelocityFieldParams, HIDDEN_DIM, LOGIT_BOUND,
};
pub use scaler::FeatureScaler;
