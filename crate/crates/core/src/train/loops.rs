//! Training loops: linear pretraining, the two main stages, baselines, and
//! ablations. Everything is single-threaded and fully determined by the
//! dataset and the config seed.

use rand::Rng;
use rand_distr::StandardNormal;

use crate::data::ParkDataset;
use crate::error::{Error, Result};
use crate::flow::FlowConfig;
use crate::models::{
    detection_logits_on_tape, gcn_forward, gcn_forward_on_tape, linear_logits_on_tape,
    mlp_forward_on_tape, normalized_adjacency, velocity_forward_on_tape, DetectionHeadParams,
    FeatureScaler, GcnEncoderParams, LinearBaseParams, MlpParams, VelocityFieldParams,
};
use crate::occupancy::{batch_negative_loglik, ObsLayout};
use crate::optim::{clip_grad_norm, lbfgs_minimize, AdamW};
use crate::rng::sub_rng;
use crate::tape::{Tape, TapeOp, VarId};
use crate::tensor::{sigmoid, softplus, Tensor};

use super::{
    LogRow, ModelKind, TrainConfig, TrainedModel, STREAM_GNN_INIT, STREAM_MLP_INIT,
    STREAM_STAGE1_INIT, STREAM_STAGE2_INIT, STREAM_STAGE2_NOISE,
};

const PRETRAIN_MAX_ITERS: usize = 2000;
const PRETRAIN_GRAD_TOL: f64 = 1e-6;

const MLP_EPOCHS: usize = 100;
const MLP_LR_GRID: [f64; 3] = [3e-3, 5e-3, 8e-3];
const MLP_BATCH: usize = 512;
const MLP_WEIGHT_DECAY: f64 = 1e-4;

const GNN_EPOCHS: usize = 120;
const GNN_LR_GRID: [f64; 2] = [3e-3, 5e-3];
const GNN_BATCH: usize = 256;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BaselineKind {
    Logreg,
    Mlp,
    Gnn,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum AblationKind {
    NoCompositeBase,
    NoDetectionHead,
}

/// One cell chunk of a month: the visit block restricted to those cells.
struct ChunkData {
    start: usize,
    end: usize,
    visit_x: Tensor,
    ranges: Vec<(u32, u32)>,
    outcomes: Vec<bool>,
}

impl ChunkData {
    fn cells(&self) -> f64 {
        (self.end - self.start) as f64
    }

    fn layout(&self) -> ObsLayout {
        ObsLayout {
            visit_ranges: self.ranges.clone(),
            outcomes: self.outcomes.clone(),
        }
    }
}

/// Month-level standardized inputs shared by every model family.
struct MonthBatches {
    /// N x (d+1): features plus lagged own effort.
    condition: Tensor,
    /// N x (d+2): condition plus adjacent lagged effort.
    condition_adj: Tensor,
    /// N x (d+2): features, monthly label, current effort.
    encoder_input: Tensor,
    /// Standardized adjacent lagged effort (last column of `condition_adj`).
    adjacent: Vec<f64>,
    /// Monthly detection labels as 0/1 reals.
    labels: Vec<f64>,
    chunks: Vec<ChunkData>,
}

fn chunk_ranges(n: usize, batch: usize) -> Vec<(usize, usize)> {
    (0..n)
        .step_by(batch.max(1))
        .map(|s| (s, (s + batch).min(n)))
        .collect()
}

fn build_batches(ds: &ParkDataset, scaler: &FeatureScaler, batch: usize) -> Result<Vec<MonthBatches>> {
    let n = ds.node_count();
    let d = scaler.feature_dim();
    let mut out = Vec::with_capacity(ds.months().len());
    for t in 0..ds.months().len() {
        let condition = scaler.condition_matrix(ds, t)?;
        let condition_adj = scaler.condition_with_adjacent(ds, t)?;
        let encoder_input = scaler.encoder_matrix(ds, t)?;
        let adjacent = (0..n).map(|i| condition_adj.get(i, d + 1)).collect();
        let labels = (0..n)
            .map(|i| ds.monthly_label(i as u32, t).map(f64::from))
            .collect::<Result<Vec<f64>>>()?;
        let mut chunks = Vec::new();
        for (start, end) in chunk_ranges(n, batch) {
            let cells: Vec<u32> = (start as u32..end as u32).collect();
            let (visit_x, ranges, outcomes) = scaler.visit_matrix(ds, t, &cells)?;
            chunks.push(ChunkData { start, end, visit_x, ranges, outcomes });
        }
        out.push(MonthBatches {
            condition,
            condition_adj,
            encoder_input,
            adjacent,
            labels,
            chunks,
        });
    }
    Ok(out)
}

fn tensor_row_range(t: &Tensor, start: usize, end: usize) -> Tensor {
    let mut data = Vec::with_capacity((end - start) * t.cols());
    for i in start..end {
        data.extend_from_slice(t.row(i));
    }
    Tensor::from_vec(end - start, t.cols(), data).expect("row range within bounds")
}

/// Negative Bernoulli log likelihood of binary labels on logits:
/// `sum softplus(psi) - y * psi`, the stable form of
/// `-sum y log sigmoid(psi) + (1 - y) log(1 - sigmoid(psi))`.
struct LabelNllOp {
    labels: Vec<f64>,
}

impl TapeOp for LabelNllOp {
    fn backward(&self, _out: &Tensor, out_adjoint: &Tensor, inputs: &[&Tensor]) -> Vec<Tensor> {
        let g = out_adjoint.get(0, 0);
        let psi = inputs[0];
        let grad: Vec<f64> = psi
            .as_slice()
            .iter()
            .zip(&self.labels)
            .map(|(&p, &y)| (sigmoid(p) - y) * g)
            .collect();
        vec![Tensor::column(&grad)]
    }
}

fn label_bernoulli_nll(tape: &mut Tape, psi: VarId, labels: &[f64]) -> Result<VarId> {
    let value = tape.value(psi);
    if value.cols() != 1 || value.rows() != labels.len() {
        return Err(Error::invalid(format!(
            "{} labels for a {}x{} logit tensor",
            labels.len(),
            value.rows(),
            value.cols()
        )));
    }
    let total: f64 = value
        .as_slice()
        .iter()
        .zip(labels)
        .map(|(&p, &y)| softplus(p) - y * p)
        .sum();
    Ok(tape.push(
        Tensor::scalar(total),
        vec![psi],
        Box::new(LabelNllOp { labels: labels.to_vec() }),
    ))
}

fn fit_linear_occupancy(
    ds: &ParkDataset,
    scaler: &FeatureScaler,
    config: &TrainConfig,
    stage: &'static str,
) -> Result<(LinearBaseParams, DetectionHeadParams, Vec<LogRow>)> {
    config.validate()?;
    let d = scaler.feature_dim();
    let bound = config.logit_bound;
    if !ds.visits().iter().any(|v| v.detected) {
        log::warn!("no detections anywhere in the training split; the linear fit is degenerate");
    }
    let batches = build_batches(ds, scaler, usize::MAX)?;
    let cell_months = (ds.node_count() * batches.len()) as f64;

    let shapes = [(d + 2, 1), (1, 1), (d + 1, 1), (1, 1)];
    let mut f = |x: &[f64]| -> Result<(f64, Vec<f64>)> {
        let mut tensors = Vec::with_capacity(4);
        let mut offset = 0;
        for &(r, c) in &shapes {
            tensors.push(Tensor::from_vec(r, c, x[offset..offset + r * c].to_vec())?);
            offset += r * c;
        }
        let mut tape = Tape::new();
        let base_vars = crate::models::LinearBaseVars {
            weight: tape.leaf(tensors[0].clone()),
            bias: tape.leaf(tensors[1].clone()),
        };
        let det_vars = crate::models::LinearBaseVars {
            weight: tape.leaf(tensors[2].clone()),
            bias: tape.leaf(tensors[3].clone()),
        };
        let mut total: Option<VarId> = None;
        for mb in &batches {
            let cond = tape.leaf(mb.condition_adj.clone());
            let psi = linear_logits_on_tape(&mut tape, &base_vars, cond)?;
            let psi = tape.clip(psi, bound);
            let chunk = &mb.chunks[0];
            let visits = tape.leaf(chunk.visit_x.clone());
            let ell = detection_logits_on_tape(&mut tape, &det_vars, visits, bound)?;
            let nll = batch_negative_loglik(&mut tape, psi, ell, chunk.layout())?;
            total = Some(match total {
                Some(acc) => tape.add(acc, nll)?,
                None => nll,
            });
        }
        let loss = tape.scale(total.expect("at least one month"), 1.0 / cell_months);
        let value = tape.value(loss).item()?;
        let grads = tape.backward(loss)?;
        let flat = [base_vars.weight, base_vars.bias, det_vars.weight, det_vars.bias]
            .iter()
            .enumerate()
            .flat_map(|(i, &id)| {
                grads
                    .get_or_zeros(id, shapes[i].0, shapes[i].1)
                    .as_slice()
                    .to_vec()
            })
            .collect();
        Ok((value, flat))
    };

    let x0 = vec![0.0; shapes.iter().map(|(r, c)| r * c).sum()];
    let (x, outcome) = lbfgs_minimize(&mut f, &x0, PRETRAIN_MAX_ITERS, PRETRAIN_GRAD_TOL)?;
    if !outcome.converged {
        log::info!(
            "linear occupancy fit stopped at gradient norm {:.3e} after {} iterations",
            outcome.grad_norm,
            outcome.iterations
        );
    }
    let base = LinearBaseParams {
        weight: Tensor::from_vec(d + 2, 1, x[..d + 2].to_vec())?,
        bias: Tensor::scalar(x[d + 2]),
    };
    let det = DetectionHeadParams {
        weight: Tensor::from_vec(d + 1, 1, x[d + 3..2 * d + 4].to_vec())?,
        bias: Tensor::scalar(x[2 * d + 4]),
    };
    let rows = outcome
        .history
        .iter()
        .enumerate()
        .map(|(i, &loss)| LogRow { epoch: i, stage, loss })
        .collect();
    Ok((base, det, rows))
}

/// Jointly fits the linear occupancy base and a linear detection head by
/// full-batch maximum likelihood; the head is returned for reuse by the
/// LogReg baseline and discarded by the flow pipeline.
pub fn pretrain_linear_base(
    ds: &ParkDataset,
    scaler: &FeatureScaler,
    config: &TrainConfig,
) -> Result<(LinearBaseParams, DetectionHeadParams, Vec<LogRow>)> {
    fit_linear_occupancy(ds, scaler, config, "pretrain")
}

#[derive(Clone, Copy, PartialEq, Eq)]
enum GraphInput {
    /// `[x, S, current effort]`, d+2 wide: the flow encoder's view.
    EncoderInput,
    /// `[x, lagged effort]`, d+1 wide: the plain GNN baseline's view.
    ConditionInput,
}

#[derive(Clone, Copy, PartialEq, Eq)]
enum EncoderObjective {
    /// Occupancy-detection likelihood through a joint detection head.
    OccNll,
    /// Direct Bernoulli likelihood of the monthly label (no detection head).
    Labels,
}

struct GraphTrainSpec {
    input: GraphInput,
    objective: EncoderObjective,
    epochs: usize,
    lr: f64,
    batch: usize,
    weight_decay: f64,
    init_stream: u64,
    stage: &'static str,
}

fn train_graph_occupancy(
    ds: &ParkDataset,
    scaler: &FeatureScaler,
    config: &TrainConfig,
    spec: &GraphTrainSpec,
) -> Result<(GcnEncoderParams, Option<DetectionHeadParams>, Vec<LogRow>, f64)> {
    let d = scaler.feature_dim();
    let bound = config.logit_bound;
    let adj = normalized_adjacency(ds.graph());
    let batches = build_batches(ds, scaler, spec.batch)?;
    let input_dim = match spec.input {
        GraphInput::EncoderInput => d + 2,
        GraphInput::ConditionInput => d + 1,
    };
    let mut rng = sub_rng(config.seed, spec.init_stream);
    let mut encoder = GcnEncoderParams::init(input_dim, config.hidden, &mut rng);
    let mut detection = match spec.objective {
        EncoderObjective::OccNll => Some(DetectionHeadParams::init(d + 1, &mut rng)),
        EncoderObjective::Labels => None,
    };
    let mut opt = AdamW::new(spec.lr, spec.weight_decay);
    let mut rows = Vec::with_capacity(spec.epochs);
    let mut final_loss = f64::INFINITY;

    for epoch in 1..=spec.epochs {
        let mut loss_sum = 0.0;
        let mut cell_sum = 0.0;
        for (t, mb) in batches.iter().enumerate() {
            let input = match spec.input {
                GraphInput::EncoderInput => &mb.encoder_input,
                GraphInput::ConditionInput => &mb.condition,
            };
            for chunk in &mb.chunks {
                let mut tape = Tape::new();
                let enc_vars = encoder.stack.leaves(&mut tape);
                let input_id = tape.leaf(input.clone());
                let psi_full = gcn_forward_on_tape(&mut tape, &enc_vars, &adj, input_id, Some(bound))?;
                let psi_chunk = tape.slice_rows(psi_full, chunk.start, chunk.end)?;
                let (nll, det_vars) = match (&spec.objective, &detection) {
                    (EncoderObjective::OccNll, Some(det)) => {
                        let det_vars = det.leaves(&mut tape);
                        let visits = tape.leaf(chunk.visit_x.clone());
                        let ell = detection_logits_on_tape(&mut tape, &det_vars, visits, bound)?;
                        let nll =
                            batch_negative_loglik(&mut tape, psi_chunk, ell, chunk.layout())?;
                        (nll, Some(det_vars))
                    }
                    (EncoderObjective::Labels, None) => {
                        let nll = label_bernoulli_nll(
                            &mut tape,
                            psi_chunk,
                            &mb.labels[chunk.start..chunk.end],
                        )?;
                        (nll, None)
                    }
                    _ => unreachable!("objective decides whether a head exists"),
                };
                let loss = tape.scale(nll, 1.0 / chunk.cells());
                let value = tape.value(loss).item()?;
                if !value.is_finite() {
                    return Err(Error::numeric(
                        format!("{} epoch {epoch}", spec.stage),
                        format!("non-finite loss in month {t}"),
                    ));
                }
                let grads_by_id = tape.backward(loss)?;
                let mut ids = vec![enc_vars.w1, enc_vars.b1, enc_vars.w2, enc_vars.b2];
                if let Some(det_vars) = &det_vars {
                    ids.push(det_vars.weight);
                    ids.push(det_vars.bias);
                }
                let mut params: Vec<&mut Tensor> = vec![
                    &mut encoder.stack.w1,
                    &mut encoder.stack.b1,
                    &mut encoder.stack.w2,
                    &mut encoder.stack.b2,
                ];
                if let Some(det) = detection.as_mut() {
                    params.push(&mut det.weight);
                    params.push(&mut det.bias);
                }
                let mut grads: Vec<Tensor> = ids
                    .iter()
                    .zip(&params)
                    .map(|(&id, p)| grads_by_id.get_or_zeros(id, p.rows(), p.cols()))
                    .collect();
                clip_grad_norm(&mut grads, config.grad_clip);
                opt.step(&mut params, &grads)?;
                loss_sum += value * chunk.cells();
                cell_sum += chunk.cells();
            }
        }
        final_loss = loss_sum / cell_sum;
        rows.push(LogRow { epoch, stage: spec.stage, loss: final_loss });
    }
    Ok((encoder, detection, rows, final_loss))
}

/// Stage 1: jointly trains the graph encoder and the linear detection head
/// on the occupancy-detection likelihood.
pub fn train_stage1(
    ds: &ParkDataset,
    scaler: &FeatureScaler,
    config: &TrainConfig,
) -> Result<(GcnEncoderParams, DetectionHeadParams, Vec<LogRow>)> {
    config.validate()?;
    let spec = GraphTrainSpec {
        input: GraphInput::EncoderInput,
        objective: EncoderObjective::OccNll,
        epochs: config.stage1.epochs,
        lr: config.stage1.lr,
        batch: config.stage1.batch,
        weight_decay: 0.0,
        init_stream: STREAM_STAGE1_INIT,
        stage: "stage1",
    };
    let (encoder, detection, rows, _) = train_graph_occupancy(ds, scaler, config, &spec)?;
    Ok((encoder, detection.expect("occupancy objective keeps a head"), rows))
}

/// Mean per-cell-month negative log likelihood of a frozen encoder and
/// detection head; pure, so repeated evaluation is bit-identical.
pub fn stage1_mean_nll(
    ds: &ParkDataset,
    scaler: &FeatureScaler,
    encoder: &GcnEncoderParams,
    detection: &DetectionHeadParams,
    bound: f64,
) -> Result<f64> {
    let adj = normalized_adjacency(ds.graph());
    let batches = build_batches(ds, scaler, usize::MAX)?;
    let cell_months = (ds.node_count() * batches.len()) as f64;
    let mut total = 0.0;
    for mb in &batches {
        let mut tape = Tape::new();
        let enc_vars = encoder.stack.leaves(&mut tape);
        let det_vars = detection.leaves(&mut tape);
        let input_id = tape.leaf(mb.encoder_input.clone());
        let psi = gcn_forward_on_tape(&mut tape, &enc_vars, &adj, input_id, Some(bound))?;
        let chunk = &mb.chunks[0];
        let visits = tape.leaf(chunk.visit_x.clone());
        let ell = detection_logits_on_tape(&mut tape, &det_vars, visits, bound)?;
        let nll = batch_negative_loglik(&mut tape, psi, ell, chunk.layout())?;
        total += tape.value(nll).item()?;
    }
    Ok(total / cell_months)
}

/// Latent endpoints for Stage 2: clipped encoder logits per training month.
pub fn cache_stage2_targets(
    ds: &ParkDataset,
    scaler: &FeatureScaler,
    encoder: &GcnEncoderParams,
    bound: f64,
) -> Result<Vec<Vec<f64>>> {
    let adj = normalized_adjacency(ds.graph());
    (0..ds.months().len())
        .map(|t| {
            let input = scaler.encoder_matrix(ds, t)?;
            gcn_forward(&encoder.stack, &adj, &input, bound)
        })
        .collect()
}

/// Stage 2: trains the velocity field on cached latent targets. `base`
/// selects the composite base; `None` draws the pure standard normal base
/// used by the no-composite-base ablation.
pub fn train_stage2_with_targets(
    ds: &ParkDataset,
    scaler: &FeatureScaler,
    targets: &[Vec<f64>],
    base: Option<&LinearBaseParams>,
    config: &TrainConfig,
) -> Result<(VelocityFieldParams, Vec<LogRow>)> {
    config.validate()?;
    let n = ds.node_count();
    let d = scaler.feature_dim();
    if targets.len() != ds.months().len() || targets.iter().any(|t| t.len() != n) {
        return Err(Error::invalid(format!(
            "stage-2 targets must be {} months of {} cells",
            ds.months().len(),
            n
        )));
    }
    let adj = normalized_adjacency(ds.graph());
    let batches = build_batches(ds, scaler, config.stage2.batch)?;

    let mut best: Option<(f64, VelocityFieldParams, Vec<LogRow>)> = None;
    for &lr in &config.stage2.lr_grid {
        let mut init_rng = sub_rng(config.seed, STREAM_STAGE2_INIT);
        let mut theta = VelocityFieldParams::init(d + 5, config.hidden, &mut init_rng);
        let mut noise = sub_rng(config.seed, STREAM_STAGE2_NOISE);
        let mut opt = AdamW::new(lr, 0.0);
        let mut rows = Vec::with_capacity(config.stage2.epochs);
        let mut final_loss = f64::INFINITY;
        for epoch in 1..=config.stage2.epochs {
            let mut loss_sum = 0.0;
            let mut cell_sum = 0.0;
            for (t, mb) in batches.iter().enumerate() {
                let psi1 = &targets[t];
                let mut psi0 = match base {
                    Some(eta) => crate::models::linear_base_forward(
                        eta,
                        &mb.condition,
                        &mb.adjacent,
                    )?,
                    None => vec![0.0; n],
                };
                let sigma = if base.is_some() { config.sigma0 } else { 1.0 };
                for v in psi0.iter_mut() {
                    *v += sigma * noise.sample::<f64, _>(StandardNormal);
                }
                let s = noise.random::<f64>();
                let psi_s: Vec<f64> = psi0
                    .iter()
                    .zip(psi1)
                    .map(|(&a, &b)| (1.0 - s) * a + s * b)
                    .collect();
                let displacement: Vec<f64> =
                    psi1.iter().zip(&psi0).map(|(&b, &a)| b - a).collect();
                for chunk in &mb.chunks {
                    let mut tape = Tape::new();
                    let theta_vars = theta.stack.leaves(&mut tape);
                    let psi_id = tape.leaf(Tensor::column(&psi_s));
                    let v_full = velocity_forward_on_tape(
                        &mut tape,
                        &theta_vars,
                        &adj,
                        psi_id,
                        s,
                        &mb.condition,
                    )?;
                    let v_chunk = tape.slice_rows(v_full, chunk.start, chunk.end)?;
                    let target =
                        tape.leaf(Tensor::column(&displacement[chunk.start..chunk.end]));
                    let sq = tape.squared_error(v_chunk, target)?;
                    let loss = tape.scale(sq, 1.0 / chunk.cells());
                    let value = tape.value(loss).item()?;
                    if !value.is_finite() {
                        return Err(Error::numeric(
                            format!("stage 2 epoch {epoch}"),
                            format!("non-finite loss in month {t}"),
                        ));
                    }
                    let grads_by_id = tape.backward(loss)?;
                    let ids = [theta_vars.w1, theta_vars.b1, theta_vars.w2, theta_vars.b2];
                    let mut params: Vec<&mut Tensor> = vec![
                        &mut theta.stack.w1,
                        &mut theta.stack.b1,
                        &mut theta.stack.w2,
                        &mut theta.stack.b2,
                    ];
                    let mut grads: Vec<Tensor> = ids
                        .iter()
                        .zip(&params)
                        .map(|(&id, p)| grads_by_id.get_or_zeros(id, p.rows(), p.cols()))
                        .collect();
                    clip_grad_norm(&mut grads, config.grad_clip);
                    opt.step(&mut params, &grads)?;
                    loss_sum += value * chunk.cells();
                    cell_sum += chunk.cells();
                }
            }
            final_loss = loss_sum / cell_sum;
            rows.push(LogRow { epoch, stage: "stage2", loss: final_loss });
        }
        let better = match &best {
            Some((best_loss, _, _)) => final_loss < *best_loss,
            None => true,
        };
        if better {
            best = Some((final_loss, theta, rows));
        }
    }
    let (_, theta, rows) = best.expect("nonempty learning-rate grid");
    Ok((theta, rows))
}

/// Stage 2 with targets computed from a frozen Stage-1 encoder.
pub fn train_stage2(
    ds: &ParkDataset,
    scaler: &FeatureScaler,
    encoder: &GcnEncoderParams,
    base: &LinearBaseParams,
    config: &TrainConfig,
) -> Result<(VelocityFieldParams, Vec<LogRow>)> {
    let targets = cache_stage2_targets(ds, scaler, encoder, config.logit_bound)?;
    train_stage2_with_targets(ds, scaler, &targets, Some(base), config)
}

/// The full two-stage pipeline: linear pretraining, Stage 1, Stage 2.
pub fn train_wildflow(
    ds: &ParkDataset,
    config: &TrainConfig,
    flow: &FlowConfig,
) -> Result<(TrainedModel, Vec<LogRow>)> {
    config.validate()?;
    flow.validate()?;
    let scaler = FeatureScaler::fit(ds)?;
    let (base, _pretrain_head, mut rows) = pretrain_linear_base(ds, &scaler, config)?;
    let (encoder, detection, stage1_rows) = train_stage1(ds, &scaler, config)?;
    rows.extend(stage1_rows);
    let (velocity, stage2_rows) = train_stage2(ds, &scaler, &encoder, &base, config)?;
    rows.extend(stage2_rows);
    let model = TrainedModel {
        kind: ModelKind::Wildflow,
        feature_dim: scaler.feature_dim(),
        hidden: config.hidden,
        layers: config.layers,
        logit_bound: config.logit_bound,
        scaler,
        flow: flow.clone(),
        base: Some(base),
        encoder: Some(encoder),
        detection: Some(detection),
        velocity: Some(velocity),
        mlp: None,
    };
    Ok((model, rows))
}

fn train_mlp_candidate(
    batches: &[MonthBatches],
    scaler: &FeatureScaler,
    config: &TrainConfig,
    lr: f64,
) -> Result<(MlpParams, DetectionHeadParams, Vec<LogRow>, f64)> {
    let d = scaler.feature_dim();
    let bound = config.logit_bound;
    let mut rng = sub_rng(config.seed, STREAM_MLP_INIT);
    let mut mlp = MlpParams::init(d + 2, config.hidden, &mut rng);
    let mut detection = DetectionHeadParams::init(d + 1, &mut rng);
    let mut opt = AdamW::new(lr, MLP_WEIGHT_DECAY);
    let mut rows = Vec::with_capacity(MLP_EPOCHS);
    let mut final_loss = f64::INFINITY;
    for epoch in 1..=MLP_EPOCHS {
        let mut loss_sum = 0.0;
        let mut cell_sum = 0.0;
        for (t, mb) in batches.iter().enumerate() {
            for chunk in &mb.chunks {
                let mut tape = Tape::new();
                let mlp_vars = mlp.leaves(&mut tape);
                let det_vars = detection.leaves(&mut tape);
                let x = tape.leaf(tensor_row_range(&mb.condition_adj, chunk.start, chunk.end));
                let psi = mlp_forward_on_tape(&mut tape, &mlp_vars, x, bound)?;
                let visits = tape.leaf(chunk.visit_x.clone());
                let ell = detection_logits_on_tape(&mut tape, &det_vars, visits, bound)?;
                let nll = batch_negative_loglik(&mut tape, psi, ell, chunk.layout())?;
                let loss = tape.scale(nll, 1.0 / chunk.cells());
                let value = tape.value(loss).item()?;
                if !value.is_finite() {
                    return Err(Error::numeric(
                        format!("mlp epoch {epoch}"),
                        format!("non-finite loss in month {t}"),
                    ));
                }
                let grads_by_id = tape.backward(loss)?;
                let ids = [
                    mlp_vars.w1,
                    mlp_vars.b1,
                    mlp_vars.w2,
                    mlp_vars.b2,
                    mlp_vars.w3,
                    mlp_vars.b3,
                    det_vars.weight,
                    det_vars.bias,
                ];
                let mut params: Vec<&mut Tensor> = vec![
                    &mut mlp.w1,
                    &mut mlp.b1,
                    &mut mlp.w2,
                    &mut mlp.b2,
                    &mut mlp.w3,
                    &mut mlp.b3,
                    &mut detection.weight,
                    &mut detection.bias,
                ];
                let mut grads: Vec<Tensor> = ids
                    .iter()
                    .zip(&params)
                    .map(|(&id, p)| grads_by_id.get_or_zeros(id, p.rows(), p.cols()))
                    .collect();
                clip_grad_norm(&mut grads, config.grad_clip);
                opt.step(&mut params, &grads)?;
                loss_sum += value * chunk.cells();
                cell_sum += chunk.cells();
            }
        }
        final_loss = loss_sum / cell_sum;
        rows.push(LogRow { epoch, stage: "train", loss: final_loss });
    }
    Ok((mlp, detection, rows, final_loss))
}

/// Trains one of the occupancy baselines with its published recipe.
pub fn train_baseline(
    kind: BaselineKind,
    ds: &ParkDataset,
    config: &TrainConfig,
    flow: &FlowConfig,
) -> Result<(TrainedModel, Vec<LogRow>)> {
    config.validate()?;
    let scaler = FeatureScaler::fit(ds)?;
    let template = TrainedModel {
        kind: ModelKind::Logreg,
        feature_dim: scaler.feature_dim(),
        hidden: config.hidden,
        layers: config.layers,
        logit_bound: config.logit_bound,
        scaler: scaler.clone(),
        flow: flow.clone(),
        base: None,
        encoder: None,
        detection: None,
        velocity: None,
        mlp: None,
    };
    match kind {
        BaselineKind::Logreg => {
            let (base, detection, rows) = fit_linear_occupancy(ds, &scaler, config, "train")?;
            let model = TrainedModel {
                kind: ModelKind::Logreg,
                base: Some(base),
                detection: Some(detection),
                ..template
            };
            Ok((model, rows))
        }
        BaselineKind::Mlp => {
            let batches = build_batches(ds, &scaler, MLP_BATCH)?;
            let mut best: Option<(f64, MlpParams, DetectionHeadParams, Vec<LogRow>)> = None;
            for &lr in &MLP_LR_GRID {
                let (mlp, det, rows, final_loss) =
                    train_mlp_candidate(&batches, &scaler, config, lr)?;
                let better = match &best {
                    Some((loss, _, _, _)) => final_loss < *loss,
                    None => true,
                };
                if better {
                    best = Some((final_loss, mlp, det, rows));
                }
            }
            let (_, mlp, detection, rows) = best.expect("nonempty grid");
            let model = TrainedModel {
                kind: ModelKind::Mlp,
                detection: Some(detection),
                mlp: Some(mlp),
                ..template
            };
            Ok((model, rows))
        }
        BaselineKind::Gnn => {
            let mut best: Option<(f64, GcnEncoderParams, DetectionHeadParams, Vec<LogRow>)> = None;
            for &lr in &GNN_LR_GRID {
                let spec = GraphTrainSpec {
                    input: GraphInput::ConditionInput,
                    objective: EncoderObjective::OccNll,
                    epochs: GNN_EPOCHS,
                    lr,
                    batch: GNN_BATCH,
                    weight_decay: 0.0,
                    init_stream: STREAM_GNN_INIT,
                    stage: "train",
                };
                let (encoder, detection, rows, final_loss) =
                    train_graph_occupancy(ds, &scaler, config, &spec)?;
                let better = match &best {
                    Some((loss, _, _, _)) => final_loss < *loss,
                    None => true,
                };
                if better {
                    best = Some((final_loss, encoder, detection.expect("occ head"), rows));
                }
            }
            let (_, encoder, detection, rows) = best.expect("nonempty grid");
            let model = TrainedModel {
                kind: ModelKind::Gnn,
                encoder: Some(encoder),
                detection: Some(detection),
                ..template
            };
            Ok((model, rows))
        }
    }
}

/// Trains one of the two ablations of the full pipeline.
pub fn train_ablation(
    kind: AblationKind,
    ds: &ParkDataset,
    config: &TrainConfig,
    flow: &FlowConfig,
) -> Result<(TrainedModel, Vec<LogRow>)> {
    config.validate()?;
    flow.validate()?;
    let scaler = FeatureScaler::fit(ds)?;
    match kind {
        AblationKind::NoCompositeBase => {
            let (encoder, detection, mut rows) = train_stage1(ds, &scaler, config)?;
            let targets = cache_stage2_targets(ds, &scaler, &encoder, config.logit_bound)?;
            let (velocity, stage2_rows) =
                train_stage2_with_targets(ds, &scaler, &targets, None, config)?;
            rows.extend(stage2_rows);
            let model = TrainedModel {
                kind: ModelKind::WildflowNoBase,
                feature_dim: scaler.feature_dim(),
                hidden: config.hidden,
                layers: config.layers,
                logit_bound: config.logit_bound,
                scaler,
                flow: flow.clone(),
                base: None,
                encoder: Some(encoder),
                detection: Some(detection),
                velocity: Some(velocity),
                mlp: None,
            };
            Ok((model, rows))
        }
        AblationKind::NoDetectionHead => {
            let (base, _head, mut rows) = pretrain_linear_base(ds, &scaler, config)?;
            let spec = GraphTrainSpec {
                input: GraphInput::EncoderInput,
                objective: EncoderObjective::Labels,
                epochs: config.stage1.epochs,
                lr: config.stage1.lr,
                batch: config.stage1.batch,
                weight_decay: 0.0,
                init_stream: STREAM_STAGE1_INIT,
                stage: "stage1",
            };
            let (encoder, _none, stage1_rows, _) =
                train_graph_occupancy(ds, &scaler, config, &spec)?;
            rows.extend(stage1_rows);
            let targets = cache_stage2_targets(ds, &scaler, &encoder, config.logit_bound)?;
            let (velocity, stage2_rows) =
                train_stage2_with_targets(ds, &scaler, &targets, Some(&base), config)?;
            rows.extend(stage2_rows);
            let model = TrainedModel {
                kind: ModelKind::WildflowNoDet,
                feature_dim: scaler.feature_dim(),
                hidden: config.hidden,
                layers: config.layers,
                logit_bound: config.logit_bound,
                scaler,
                flow: flow.clone(),
                base: Some(base),
                encoder: Some(encoder),
                detection: None,
                velocity: Some(velocity),
                mlp: None,
            };
            Ok((model, rows))
        }
    }
}
