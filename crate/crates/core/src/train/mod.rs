//! Two-stage training, baselines, ablations, and model checkpoints.

mod loops;

pub use loops::{
    cache_stage2_targets, pretrain_linear_base, stage1_mean_nll, train_ablation, train_baseline,
    train_stage1, train_stage2, train_stage2_with_targets, train_wildflow, AblationKind,
    BaselineKind,
};

use std::fs::File;
use std::io::{BufReader, BufWriter, Write as _};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::flow::FlowConfig;
use crate::models::{
    read_params_bin, write_params_bin, DetectionHeadParams, FeatureScaler, GcnEncoderParams,
    GcnStack, LinearBaseParams, MlpParams, TensorEntry, VelocityFieldParams,
};
use crate::tensor::Tensor;

pub const CHECKPOINT_FORMAT_VERSION: u32 = 1;

/// Seed stream tags for the training stages, disjoint from the generator's.
pub(crate) const STREAM_STAGE1_INIT: u64 = 11;
pub(crate) const STREAM_STAGE2_INIT: u64 = 12;
pub(crate) const STREAM_STAGE2_NOISE: u64 = 13;
pub(crate) const STREAM_MLP_INIT: u64 = 14;
pub(crate) const STREAM_GNN_INIT: u64 = 15;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct StageOneConfig {
    pub epochs: usize,
    pub lr: f64,
    pub batch: usize,
}

impl Default for StageOneConfig {
    fn default() -> Self {
        StageOneConfig { epochs: 100, lr: 1e-2, batch: 256 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct StageTwoConfig {
    pub epochs: usize,
    /// Candidate learning rates; the winner has the lowest final-epoch loss.
    pub lr_grid: Vec<f64>,
    pub batch: usize,
}

impl Default for StageTwoConfig {
    fn default() -> Self {
        StageTwoConfig { epochs: 120, lr_grid: vec![1e-2, 1e-3], batch: 256 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub stage1: StageOneConfig,
    pub stage2: StageTwoConfig,
    pub hidden: usize,
    pub layers: usize,
    pub grad_clip: f64,
    pub logit_bound: f64,
    /// Stage-2 composite-base noise standard deviation.
    pub sigma0: f64,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            stage1: StageOneConfig::default(),
            stage2: StageTwoConfig::default(),
            hidden: 128,
            layers: 2,
            grad_clip: 5.0,
            logit_bound: 10.0,
            sigma0: 0.1,
            seed: 0,
        }
    }
}

const STAGE2_LR_GRID: [f64; 2] = [1e-2, 1e-3];

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.stage1.epochs == 0 || self.stage2.epochs == 0 {
            return Err(Error::invalid("epoch counts must be positive"));
        }
        if !(self.stage1.lr > 0.0) {
            return Err(Error::invalid("stage-1 learning rate must be positive"));
        }
        if self.stage1.batch == 0 || self.stage2.batch == 0 {
            return Err(Error::invalid("batch sizes must be positive"));
        }
        if self.stage2.lr_grid.is_empty() {
            return Err(Error::invalid("stage-2 learning-rate grid is empty"));
        }
        for &lr in &self.stage2.lr_grid {
            if !STAGE2_LR_GRID.iter().any(|&g| (lr - g).abs() < 1e-15) {
                return Err(Error::invalid(format!(
                    "stage-2 learning rate {lr} not in the supported grid {STAGE2_LR_GRID:?}"
                )));
            }
        }
        if self.hidden == 0 {
            return Err(Error::invalid("hidden width must be positive"));
        }
        if self.layers != 2 {
            return Err(Error::invalid("only two-layer graph stacks are supported"));
        }
        if !(self.grad_clip > 0.0) {
            return Err(Error::invalid("gradient clip must be positive"));
        }
        if !(self.logit_bound > 0.0) {
            return Err(Error::invalid("logit bound must be positive"));
        }
        if !(self.sigma0 >= 0.0) {
            return Err(Error::invalid("sigma0 must be nonnegative"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ModelKind {
    Wildflow,
    Logreg,
    Mlp,
    Gnn,
    #[serde(rename = "no_composite_base")]
    WildflowNoBase,
    #[serde(rename = "no_detection_head")]
    WildflowNoDet,
}

impl ModelKind {
    /// The stable name used in configs, reports, and checkpoint paths.
    pub fn name(self) -> &'static str {
        match self {
            ModelKind::Wildflow => "wildflow",
            ModelKind::Logreg => "logreg",
            ModelKind::Mlp => "mlp",
            ModelKind::Gnn => "gnn",
            ModelKind::WildflowNoBase => "no_composite_base",
            ModelKind::WildflowNoDet => "no_detection_head",
        }
    }
}

impl ModelKind {
    /// Parameter bundle names this kind must carry, in checkpoint order:
    /// (base, encoder, detection, velocity, mlp).
    fn bundle_mask(self) -> [bool; 5] {
        match self {
            ModelKind::Wildflow => [true, true, true, true, false],
            ModelKind::Logreg => [true, false, true, false, false],
            ModelKind::Mlp => [false, false, true, false, true],
            ModelKind::Gnn => [false, true, true, false, false],
            ModelKind::WildflowNoBase => [false, true, true, true, false],
            ModelKind::WildflowNoDet => [true, true, false, true, false],
        }
    }
}

/// A trained model: exactly the parameter bundles its kind needs, plus the
/// standardization statistics and flow settings used at inference.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainedModel {
    pub kind: ModelKind,
    pub feature_dim: usize,
    pub hidden: usize,
    pub layers: usize,
    pub logit_bound: f64,
    pub scaler: FeatureScaler,
    pub flow: FlowConfig,
    pub base: Option<LinearBaseParams>,
    pub encoder: Option<GcnEncoderParams>,
    pub detection: Option<DetectionHeadParams>,
    pub velocity: Option<VelocityFieldParams>,
    pub mlp: Option<MlpParams>,
}

#[derive(Serialize, Deserialize)]
struct CheckpointHeader {
    format_version: u32,
    kind: ModelKind,
    feature_dim: usize,
    hidden: usize,
    layers: usize,
    logit_bound: f64,
    scaler: FeatureScaler,
    flow: FlowConfig,
    params: Vec<TensorEntry>,
}

impl TrainedModel {
    /// Checks that exactly the bundles required by `kind` are present.
    pub fn validate_bundles(&self) -> Result<()> {
        let mask = self.kind.bundle_mask();
        let have = [
            self.base.is_some(),
            self.encoder.is_some(),
            self.detection.is_some(),
            self.velocity.is_some(),
            self.mlp.is_some(),
        ];
        let names = ["base", "encoder", "detection", "velocity", "mlp"];
        for ((&want, &got), name) in mask.iter().zip(&have).zip(names) {
            if want && !got {
                return Err(Error::invalid(format!(
                    "model kind {:?} requires the {name} bundle",
                    self.kind
                )));
            }
            if !want && got {
                return Err(Error::invalid(format!(
                    "model kind {:?} must not carry a {name} bundle",
                    self.kind
                )));
            }
        }
        Ok(())
    }

    fn named_tensors(&self) -> Vec<(String, &Tensor)> {
        let mut out: Vec<(String, &Tensor)> = Vec::new();
        if let Some(b) = &self.base {
            out.push(("base.weight".into(), &b.weight));
            out.push(("base.bias".into(), &b.bias));
        }
        if let Some(e) = &self.encoder {
            for (n, t) in stack_tensors("encoder", &e.stack) {
                out.push((n, t));
            }
        }
        if let Some(d) = &self.detection {
            out.push(("detection.weight".into(), &d.weight));
            out.push(("detection.bias".into(), &d.bias));
        }
        if let Some(v) = &self.velocity {
            for (n, t) in stack_tensors("velocity", &v.stack) {
                out.push((n, t));
            }
        }
        if let Some(m) = &self.mlp {
            out.push(("mlp.w1".into(), &m.w1));
            out.push(("mlp.b1".into(), &m.b1));
            out.push(("mlp.w2".into(), &m.w2));
            out.push(("mlp.b2".into(), &m.b2));
            out.push(("mlp.w3".into(), &m.w3));
            out.push(("mlp.b3".into(), &m.b3));
        }
        out
    }

    /// Writes `model.json` and `params.bin` into `dir`.
    pub fn save(&self, dir: &Path) -> Result<()> {
        self.validate_bundles()?;
        std::fs::create_dir_all(dir)?;
        let tensors = self.named_tensors();
        let named: Vec<(&str, &Tensor)> =
            tensors.iter().map(|(n, t)| (n.as_str(), *t)).collect();
        let entries = write_params_bin(&dir.join("params.bin"), &named)?;
        let header = CheckpointHeader {
            format_version: CHECKPOINT_FORMAT_VERSION,
            kind: self.kind,
            feature_dim: self.feature_dim,
            hidden: self.hidden,
            layers: self.layers,
            logit_bound: self.logit_bound,
            scaler: self.scaler.clone(),
            flow: self.flow.clone(),
            params: entries,
        };
        let file = File::create(dir.join("model.json"))?;
        let mut writer = BufWriter::new(file);
        serde_json::to_writer_pretty(&mut writer, &header)
            .map_err(|e| Error::schema("model.json", e.to_string()))?;
        writer.write_all(b"\n")?;
        writer.flush()?;
        Ok(())
    }

    /// Loads a checkpoint written by [`TrainedModel::save`].
    pub fn load(dir: &Path) -> Result<TrainedModel> {
        let json_path = dir.join("model.json");
        let file = File::open(&json_path).map_err(|e| {
            if e.kind() == std::io::ErrorKind::NotFound {
                Error::MissingArtifact(json_path.display().to_string())
            } else {
                Error::Io(e)
            }
        })?;
        let header: CheckpointHeader = serde_json::from_reader(BufReader::new(file))
            .map_err(|e| Error::schema("model.json", e.to_string()))?;
        if header.format_version != CHECKPOINT_FORMAT_VERSION {
            return Err(Error::schema(
                "model.json",
                format!(
                    "format version {} unsupported, expected {}",
                    header.format_version, CHECKPOINT_FORMAT_VERSION
                ),
            ));
        }
        let tensors = read_params_bin(&dir.join("params.bin"), &header.params)?;
        let mut by_name: std::collections::BTreeMap<&str, Tensor> = header
            .params
            .iter()
            .map(|e| e.name.as_str())
            .zip(tensors)
            .collect();
        let mut take = |name: &str| -> Result<Tensor> {
            by_name
                .remove(name)
                .ok_or_else(|| Error::schema("model.json", format!("missing tensor '{name}'")))
        };

        let mask = header.kind.bundle_mask();
        let base = if mask[0] {
            Some(LinearBaseParams { weight: take("base.weight")?, bias: take("base.bias")? })
        } else {
            None
        };
        let encoder = if mask[1] {
            Some(GcnEncoderParams { stack: take_stack("encoder", &mut take)? })
        } else {
            None
        };
        let detection = if mask[2] {
            Some(DetectionHeadParams {
                weight: take("detection.weight")?,
                bias: take("detection.bias")?,
            })
        } else {
            None
        };
        let velocity = if mask[3] {
            Some(VelocityFieldParams { stack: take_stack("velocity", &mut take)? })
        } else {
            None
        };
        let mlp = if mask[4] {
            Some(MlpParams {
                w1: take("mlp.w1")?,
                b1: take("mlp.b1")?,
                w2: take("mlp.w2")?,
                b2: take("mlp.b2")?,
                w3: take("mlp.w3")?,
                b3: take("mlp.b3")?,
            })
        } else {
            None
        };
        if let Some(name) = by_name.keys().next() {
            return Err(Error::schema(
                "model.json",
                format!("unexpected tensor '{name}' for kind {:?}", header.kind),
            ));
        }
        let model = TrainedModel {
            kind: header.kind,
            feature_dim: header.feature_dim,
            hidden: header.hidden,
            layers: header.layers,
            logit_bound: header.logit_bound,
            scaler: header.scaler,
            flow: header.flow,
            base,
            encoder,
            detection,
            velocity,
            mlp,
        };
        model.validate_bundles()?;
        Ok(model)
    }
}

fn stack_tensors<'a>(prefix: &str, stack: &'a GcnStack) -> Vec<(String, &'a Tensor)> {
    vec![
        (format!("{prefix}.w1"), &stack.w1),
        (format!("{prefix}.b1"), &stack.b1),
        (format!("{prefix}.w2"), &stack.w2),
        (format!("{prefix}.b2"), &stack.b2),
    ]
}

fn take_stack(prefix: &str, take: &mut impl FnMut(&str) -> Result<Tensor>) -> Result<GcnStack> {
    Ok(GcnStack {
        w1: take(&format!("{prefix}.w1"))?,
        b1: take(&format!("{prefix}.b1"))?,
        w2: take(&format!("{prefix}.w2"))?,
        b2: take(&format!("{prefix}.b2"))?,
    })
}

/// One `train_log.csv` row.
#[derive(Debug, Clone, PartialEq)]
pub struct LogRow {
    pub epoch: usize,
    pub stage: &'static str,
    pub loss: f64,
}

pub fn write_train_log(path: &Path, rows: &[LogRow]) -> Result<()> {
    let mut w = csv::Writer::from_writer(BufWriter::new(File::create(path)?));
    let io_err = |e: csv::Error| -> Error {
        match e.into_kind() {
            csv::ErrorKind::Io(io) => Error::Io(io),
            other => Error::schema("train_log.csv", format!("{other:?}")),
        }
    };
    w.write_record(["epoch", "stage", "loss"]).map_err(io_err)?;
    for row in rows {
        w.write_record([row.epoch.to_string(), row.stage.to_string(), format!("{}", row.loss)])
            .map_err(io_err)?;
    }
    w.flush()?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::sub_rng;

    fn tiny_model() -> TrainedModel {
        let mut rng = sub_rng(77, 0);
        TrainedModel {
            kind: ModelKind::Wildflow,
            feature_dim: 3,
            hidden: 4,
            layers: 2,
            logit_bound: 10.0,
            scaler: FeatureScaler::identity(3),
            flow: FlowConfig::default(),
            base: Some(LinearBaseParams::init(5, &mut rng)),
            encoder: Some(GcnEncoderParams::init(5, 4, &mut rng)),
            detection: Some(DetectionHeadParams::init(4, &mut rng)),
            velocity: Some(VelocityFieldParams::init(8, 4, &mut rng)),
            mlp: None,
        }
    }

    #[test]
    fn checkpoint_round_trip_is_exact() {
        let dir = tempfile::tempdir().unwrap();
        let model = tiny_model();
        model.save(dir.path()).unwrap();
        let loaded = TrainedModel::load(dir.path()).unwrap();
        assert_eq!(model, loaded);
    }

    #[test]
    fn kind_rejects_missing_or_extra_bundles() {
        let mut model = tiny_model();
        model.velocity = None;
        assert!(model.validate_bundles().is_err());

        let mut model = tiny_model();
        model.kind = ModelKind::Logreg;
        let err = model.validate_bundles().unwrap_err().to_string();
        assert!(err.contains("must not carry"), "{err}");
    }

    #[test]
    fn missing_checkpoint_is_missing_artifact() {
        let dir = tempfile::tempdir().unwrap();
        let err = TrainedModel::load(&dir.path().join("nothing")).unwrap_err();
        assert!(matches!(err, Error::MissingArtifact(_)), "{err}");
    }

    #[test]
    fn default_config_is_valid_and_grid_is_enforced() {
        let config = TrainConfig::default();
        config.validate().unwrap();
        let mut bad = config.clone();
        bad.stage2.lr_grid = vec![0.5];
        assert!(bad.validate().is_err());
        let mut zero_hidden = config.clone();
        zero_hidden.hidden = 0;
        assert!(zero_hidden.validate().is_err());
    }

    #[test]
    fn train_log_is_written_in_order() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("train_log.csv");
        let rows = vec![
            LogRow { epoch: 1, stage: "stage1", loss: 0.5 },
            LogRow { epoch: 2, stage: "stage1", loss: 0.25 },
        ];
        write_train_log(&path, &rows).unwrap();
        let text = std::fs::read_to_string(&path).unwrap();
        assert_eq!(text, "epoch,stage,loss\n1,stage1,0.5\n2,stage1,0.25\n");
    }
}
