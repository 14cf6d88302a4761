//! Synthetic park generator with known ground truth.
//!
//! Real ranger patrol data cannot be redistributed, so every experiment in
//! this project runs on parks drawn from a generative process that mirrors
//! the qualitative structure of the real problem: spatially smooth
//! covariates, deterrence from last month's patrols in a cell, displacement
//! of activity into neighbouring cells, and imperfect effort-dependent
//! detection with no false positives.
//!
//! All randomness flows through tagged sub-streams of one seed, so a
//! generated park is a pure function of its [`GeneratorConfig`].

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Exp, Poisson, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::data::{build_grid_graph, MonthKey, ParkDataset, VisitRecord};
use crate::error::{Error, Result};
use crate::rng::sub_rng;
use crate::tensor::{sigmoid, Tensor};

const STREAM_STATIC: u64 = 1;
const STREAM_SPATIAL: u64 = 2;
const STREAM_DYNAMICS: u64 = 3;
const STREAM_COUNTS: u64 = 4;
const STREAM_EFFORTS: u64 = 5;
const STREAM_OCCUPANCY: u64 = 6;
const STREAM_DETECTION: u64 = 7;

/// How monthly patrol intensity is allocated across cells.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PatrolMode {
    /// Every cell gets mean `lambda` visits each month.
    Uniform,
    /// Next month's intensity follows last month's detections, preserving
    /// the park-wide mean. This induces the feedback bias between patrol
    /// records and true activity.
    Reactive,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GeneratorConfig {
    pub rows: usize,
    pub cols: usize,
    /// Number of generated months, starting in January of `start_year`.
    pub months: usize,
    pub static_dim: usize,
    pub dynamic_dim: usize,
    /// Occupancy weights over the concatenated static + dynamic features.
    pub occupancy_weights: Vec<f64>,
    pub occupancy_intercept: f64,
    /// Effect of last month's patrol effort in the cell itself.
    pub beta_det: f64,
    /// Effect of last month's mean patrol effort over adjacent cells.
    pub beta_disp: f64,
    /// Strength of the nonlinear spatial spillover of transient activity:
    /// dynamic feature scores pool over each neighbourhood, pass through a
    /// saturating response, and diffuse one step further before entering
    /// the occupancy logit. Zero disables it.
    pub spillover: f64,
    /// Length-scale of the latent spatial field `g`, in cells.
    pub length_scale: f64,
    /// Standard deviation of `g`; zero disables the field.
    pub field_std: f64,
    /// Length-scale of the static covariate fields; zero makes them iid.
    pub feature_length_scale: f64,
    pub alpha0: f64,
    pub alpha1: f64,
    pub alpha2: f64,
    /// Mean visits per cell-month.
    pub lambda: f64,
    pub effort_mean_km: f64,
    pub patrol_mode: PatrolMode,
    pub start_year: i32,
    pub seed: u64,
}

impl Default for GeneratorConfig {
    fn default() -> Self {
        default_config()
    }
}

/// The reference park: 32x32 cells over 48 months with 5 static and 3
/// dynamic covariates.
pub fn default_config() -> GeneratorConfig {
    GeneratorConfig {
        rows: 32,
        cols: 32,
        months: 48,
        static_dim: 5,
        dynamic_dim: 3,
        occupancy_weights: vec![0.8, -0.6, 0.5, 0.4, -0.3, 0.3, -0.2, 0.2],
        occupancy_intercept: -1.9,
        beta_det: -0.3,
        beta_disp: 0.15,
        spillover: 5.0,
        length_scale: 3.0,
        field_std: 1.0,
        feature_length_scale: 4.0,
        alpha0: -1.0,
        alpha1: 0.4,
        alpha2: 0.3,
        lambda: 1.5,
        effort_mean_km: 2.0,
        patrol_mode: PatrolMode::Uniform,
        start_year: 2014,
        seed: 42,
    }
}

impl GeneratorConfig {
    pub fn validate(&self) -> Result<()> {
        if self.rows == 0 || self.cols == 0 {
            return Err(Error::invalid("grid dimensions must be positive"));
        }
        if self.months < 2 {
            return Err(Error::invalid(
                "at least two months are required for lagged effort",
            ));
        }
        if self.static_dim == 0 {
            return Err(Error::invalid(
                "detection visibility uses the first static feature, so static_dim must be positive",
            ));
        }
        let d = self.static_dim + self.dynamic_dim;
        if self.occupancy_weights.len() != d {
            return Err(Error::invalid(format!(
                "occupancy_weights has {} entries for {} features",
                self.occupancy_weights.len(),
                d
            )));
        }
        if !(self.lambda >= 0.0) {
            return Err(Error::invalid("lambda must be nonnegative"));
        }
        if !(self.length_scale > 0.0) {
            return Err(Error::invalid("length_scale must be positive"));
        }
        if !(self.field_std >= 0.0) || !(self.feature_length_scale >= 0.0) {
            return Err(Error::invalid(
                "field_std and feature_length_scale must be nonnegative",
            ));
        }
        if !(self.effort_mean_km > 0.0) {
            return Err(Error::invalid("effort_mean_km must be positive"));
        }
        let finite = self
            .occupancy_weights
            .iter()
            .chain([
                &self.occupancy_intercept,
                &self.beta_det,
                &self.beta_disp,
                &self.spillover,
                &self.alpha0,
                &self.alpha1,
                &self.alpha2,
            ])
            .all(|v| v.is_finite());
        if !finite {
            return Err(Error::invalid("all coefficients must be finite"));
        }
        Ok(())
    }
}

/// Per-month true occupancy logits, kept out of the dataset so models can
/// never see them; used for oracle evaluations.
#[derive(Debug, Clone)]
pub struct TrueState {
    /// `true_logits[t][cell]` is the occupancy logit before the Bernoulli draw.
    pub true_logits: Vec<Vec<f64>>,
}

/// A zero-mean unit-variance field with squared-exponential spatial
/// covariance of the given length-scale, built by smoothing white noise
/// with a Gaussian kernel and renormalizing each cell's variance exactly.
fn smooth_field(rows: usize, cols: usize, length_scale: f64, rng: &mut ChaCha8Rng) -> Vec<f64> {
    let noise: Vec<f64> = (0..rows * cols)
        .map(|_| rng.sample::<f64, _>(StandardNormal))
        .collect();
    let sigma = length_scale / std::f64::consts::SQRT_2;
    if sigma <= 0.0 {
        return noise;
    }
    let radius = (3.0 * sigma).ceil() as isize;
    let kernel: Vec<f64> = (-radius..=radius)
        .map(|d| (-((d * d) as f64) / (2.0 * sigma * sigma)).exp())
        .collect();

    let convolve_axis = |input: &[f64], len: usize, stride: usize, lanes: usize| -> (Vec<f64>, Vec<f64>) {
        let mut out = vec![0.0; input.len()];
        let mut var = vec![0.0; len];
        for (i, v) in var.iter_mut().enumerate() {
            for (off, k) in kernel.iter().enumerate() {
                let j = i as isize + off as isize - radius;
                if (0..len as isize).contains(&j) {
                    *v += k * k;
                }
            }
        }
        for lane in 0..lanes {
            for i in 0..len {
                let mut acc = 0.0;
                for (off, k) in kernel.iter().enumerate() {
                    let j = i as isize + off as isize - radius;
                    if (0..len as isize).contains(&j) {
                        acc += k * input[lane + j as usize * stride];
                    }
                }
                out[lane + i * stride] = acc;
            }
        }
        (out, var)
    };

    // Row-major layout: smoothing down columns uses stride `cols`, along
    // rows stride 1 lane-by-lane.
    let (mut down, row_var) = convolve_axis(&noise, rows, cols, cols);
    let mut col_var = vec![0.0; cols];
    for (j, v) in col_var.iter_mut().enumerate() {
        for (off, k) in kernel.iter().enumerate() {
            let jj = j as isize + off as isize - radius;
            if (0..cols as isize).contains(&jj) {
                *v += k * k;
            }
        }
    }
    let mut out = vec![0.0; rows * cols];
    for r in 0..rows {
        let lane = &down[r * cols..(r + 1) * cols];
        for c in 0..cols {
            let mut acc = 0.0;
            for (off, k) in kernel.iter().enumerate() {
                let j = c as isize + off as isize - radius;
                if (0..cols as isize).contains(&j) {
                    acc += k * lane[j as usize];
                }
            }
            out[r * cols + c] = acc / (row_var[r] * col_var[c]).sqrt();
        }
    }
    let _ = &mut down;
    out
}

/// Generates a park and returns it with its hidden true state.
pub fn generate_park_detailed(config: &GeneratorConfig) -> Result<(ParkDataset, TrueState)> {
    config.validate()?;
    let graph = build_grid_graph(config.rows, config.cols)?;
    let n = graph.node_count();
    let d_static = config.static_dim;
    let d_dyn = config.dynamic_dim;

    let mut static_features = Tensor::zeros(n, d_static);
    {
        let mut rng = sub_rng(config.seed, STREAM_STATIC);
        for f in 0..d_static {
            let field = smooth_field(config.rows, config.cols, config.feature_length_scale, &mut rng);
            for (i, v) in field.iter().enumerate() {
                static_features.set(i, f, *v);
            }
        }
    }

    let g: Vec<f64> = {
        let mut rng = sub_rng(config.seed, STREAM_SPATIAL);
        if config.field_std > 0.0 {
            smooth_field(config.rows, config.cols, config.length_scale, &mut rng)
                .into_iter()
                .map(|v| v * config.field_std)
                .collect()
        } else {
            vec![0.0; n]
        }
    };

    let mut months = Vec::with_capacity(config.months);
    let mut key = MonthKey::new(config.start_year, 1)?;
    for _ in 0..config.months {
        months.push(key);
        key = key.next();
    }

    let mut dyn_rng = sub_rng(config.seed, STREAM_DYNAMICS);
    let mut count_rng = sub_rng(config.seed, STREAM_COUNTS);
    let mut effort_rng = sub_rng(config.seed, STREAM_EFFORTS);
    let mut occ_rng = sub_rng(config.seed, STREAM_OCCUPANCY);
    let mut det_rng = sub_rng(config.seed, STREAM_DETECTION);
    let effort_dist = Exp::new(1.0 / config.effort_mean_km)
        .map_err(|e| Error::invalid(format!("effort distribution: {e}")))?;

    // AR(1) with coefficient 0.8 and unit stationary variance.
    let ar = 0.8f64;
    let innovation_std = (1.0 - ar * ar).sqrt();

    let mut dynamic_features: Vec<Tensor> = Vec::with_capacity(config.months);
    let mut visits: Vec<VisitRecord> = Vec::new();
    let mut ground_truth: Vec<Vec<u8>> = Vec::with_capacity(config.months);
    let mut true_logits: Vec<Vec<f64>> = Vec::with_capacity(config.months);

    let mut prev_dynamic = Tensor::zeros(n, d_dyn);
    let mut prev_effort = vec![0.0f64; n];
    let mut prev_detections = vec![0u32; n];

    for (t, &month) in months.iter().enumerate() {
        let mut dynamic = Tensor::zeros(n, d_dyn);
        for i in 0..n {
            for f in 0..d_dyn {
                let e: f64 = dyn_rng.sample(StandardNormal);
                let v = if t == 0 {
                    e
                } else {
                    ar * prev_dynamic.get(i, f) + innovation_std * e
                };
                dynamic.set(i, f, v);
            }
        }

        let mut intensity = vec![config.lambda; n];
        if config.patrol_mode == PatrolMode::Reactive && t > 0 {
            let smoothing = 0.5;
            let weights: Vec<f64> = prev_detections
                .iter()
                .map(|&c| c as f64 + smoothing)
                .collect();
            let mean_w = weights.iter().sum::<f64>() / n as f64;
            for (l, w) in intensity.iter_mut().zip(&weights) {
                *l = config.lambda * w / mean_w;
            }
        }

        let mut month_effort = vec![0.0f64; n];
        let month_visit_start = visits.len();
        for i in 0..n {
            let j = if intensity[i] > 0.0 {
                let dist = Poisson::new(intensity[i])
                    .map_err(|e| Error::invalid(format!("visit count distribution: {e}")))?;
                dist.sample(&mut count_rng) as u64
            } else {
                0
            };
            for v in 0..j {
                let effort: f64 = effort_dist.sample(&mut effort_rng);
                month_effort[i] += effort;
                visits.push(VisitRecord {
                    cell_id: i as u32,
                    month,
                    visit_index: (v + 1) as u32,
                    effort_km: effort,
                    detected: false,
                });
            }
        }

        let mut scores = vec![0.0f64; n];
        let mut dyn_scores = vec![0.0f64; n];
        for i in 0..n {
            for (f, w) in config.occupancy_weights.iter().enumerate() {
                if f < d_static {
                    scores[i] += w * static_features.get(i, f);
                } else {
                    dyn_scores[i] += w * dynamic.get(i, f - d_static);
                }
            }
            scores[i] += dyn_scores[i];
        }

        // Transient activity pools over each cell's neighbourhood, the
        // response saturates, and the saturated response diffuses one more
        // step. Fixed curvature of the saturation.
        let spill_gain = 4.0f64;
        let pool = |v: &[f64]| -> Vec<f64> {
            (0..n)
                .map(|i| {
                    let nbs = graph.neighbors(i as u32);
                    let sum = v[i] + nbs.iter().map(|&nb| v[nb as usize]).sum::<f64>();
                    sum / (1.0 + nbs.len() as f64)
                })
                .collect()
        };
        let pooled = pool(&dyn_scores);
        let saturated: Vec<f64> = pooled.iter().map(|&u| (spill_gain * u).tanh()).collect();
        let spill = pool(&saturated);

        let mut logits = Vec::with_capacity(n);
        let mut z = Vec::with_capacity(n);
        for i in 0..n {
            let mut psi = config.occupancy_intercept + g[i] + scores[i];
            psi += config.beta_det * prev_effort[i];
            psi += config.spillover * spill[i];
            let nbs = graph.neighbors(i as u32);
            if !nbs.is_empty() {
                let mean_effort = nbs
                    .iter()
                    .map(|&nb| prev_effort[nb as usize])
                    .sum::<f64>()
                    / nbs.len() as f64;
                psi += config.beta_disp * mean_effort;
            }
            logits.push(psi);
            z.push(u8::from(occ_rng.random::<f64>() < sigmoid(psi)));
        }

        let mut detections = vec![0u32; n];
        for visit in &mut visits[month_visit_start..] {
            let i = visit.cell_id as usize;
            let p = sigmoid(
                config.alpha0
                    + config.alpha1 * visit.effort_km
                    + config.alpha2 * static_features.get(i, 0),
            );
            let u: f64 = det_rng.random();
            visit.detected = z[i] == 1 && u < p;
            if visit.detected {
                detections[i] += 1;
            }
        }

        prev_effort = month_effort;
        prev_detections = detections;
        prev_dynamic = dynamic.clone();
        dynamic_features.push(dynamic);
        ground_truth.push(z);
        true_logits.push(logits);
    }

    let dataset = ParkDataset::new(
        graph,
        months,
        static_features,
        dynamic_features,
        visits,
        Some(ground_truth),
    )?;
    Ok((dataset, TrueState { true_logits }))
}

/// Generates a park dataset with ground-truth occupancy populated.
pub fn generate_park(config: &GeneratorConfig) -> Result<ParkDataset> {
    generate_park_detailed(config).map(|(ds, _)| ds)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small_config() -> GeneratorConfig {
        GeneratorConfig {
            rows: 8,
            cols: 8,
            months: 6,
            occupancy_weights: vec![0.8, -0.6, 0.5, 0.4, -0.3, 0.3, -0.2, 0.2],
            ..default_config()
        }
    }

    #[test]
    fn default_config_is_valid_and_constant() {
        let a = default_config();
        a.validate().unwrap();
        assert_eq!(a, default_config());
        assert_eq!(a.static_dim + a.dynamic_dim, 8);
        assert_eq!((a.rows, a.cols, a.months), (32, 32, 48));
    }

    #[test]
    fn generation_is_deterministic() {
        let cfg = small_config();
        let a = generate_park(&cfg).unwrap();
        let b = generate_park(&cfg).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn zero_lambda_means_no_visits() {
        let cfg = GeneratorConfig { lambda: 0.0, ..small_config() };
        let ds = generate_park(&cfg).unwrap();
        assert!(ds.visits().is_empty());
        let z = ds.ground_truth().expect("ground truth populated");
        assert_eq!(z.len(), cfg.months);
        for t in 0..cfg.months {
            for cell in 0..ds.node_count() {
                assert_eq!(ds.monthly_label(cell as u32, t).unwrap(), 0);
            }
        }
    }

    #[test]
    fn saturated_detection_reveals_occupancy() {
        let cfg = GeneratorConfig { alpha0: 20.0, ..small_config() };
        let ds = generate_park(&cfg).unwrap();
        let z = ds.ground_truth().unwrap();
        for t in 0..cfg.months {
            for cell in 0..ds.node_count() {
                if !ds.visits_for(cell as u32, t).is_empty() {
                    assert_eq!(ds.monthly_label(cell as u32, t).unwrap(), z[t][cell]);
                }
            }
        }
    }

    #[test]
    fn null_model_occupancy_is_a_fair_coin() {
        let cfg = GeneratorConfig {
            rows: 32,
            cols: 32,
            months: 48,
            occupancy_weights: vec![0.0; 8],
            occupancy_intercept: 0.0,
            beta_det: 0.0,
            beta_disp: 0.0,
            field_std: 0.0,
            ..default_config()
        };
        let ds = generate_park(&cfg).unwrap();
        let z = ds.ground_truth().unwrap();
        let total: u64 = z.iter().flatten().map(|&v| v as u64).sum();
        let rate = total as f64 / (cfg.months * ds.node_count()) as f64;
        assert!((rate - 0.5).abs() < 0.02, "rate {rate}");
    }

    #[test]
    fn no_false_positives() {
        let ds = generate_park(&small_config()).unwrap();
        let z = ds.ground_truth().unwrap();
        for v in ds.visits() {
            if v.detected {
                let t = ds.month_index(v.month).unwrap();
                assert_eq!(z[t][v.cell_id as usize], 1);
            }
        }
    }

    #[test]
    fn detections_monotone_in_effort_slope() {
        let mut wins = 0;
        let mut losses = 0;
        for seed in 0..20u64 {
            let lo = GeneratorConfig { alpha1: 0.2, seed, ..small_config() };
            let hi = GeneratorConfig { alpha1: 0.8, seed, ..small_config() };
            let count = |cfg: &GeneratorConfig| -> i64 {
                generate_park(cfg)
                    .unwrap()
                    .visits()
                    .iter()
                    .filter(|v| v.detected)
                    .count() as i64
            };
            match count(&hi) - count(&lo) {
                d if d > 0 => wins += 1,
                d if d < 0 => losses += 1,
                _ => {}
            }
        }
        // One-sided sign test at the 5% level on 20 paired seeds.
        assert!(wins >= 14 && losses <= 6, "wins {wins}, losses {losses}");
    }

    #[test]
    fn reactive_patrols_follow_detections() {
        let cfg = GeneratorConfig {
            patrol_mode: PatrolMode::Reactive,
            months: 12,
            ..small_config()
        };
        let ds = generate_park(&cfg).unwrap();
        let n = ds.node_count();
        // Cells that produced detections last month should see more visits
        // than cells that did not, on average.
        let mut hot = (0.0, 0u64);
        let mut cold = (0.0, 0u64);
        for t in 1..cfg.months {
            for cell in 0..n {
                let prev_detected = ds
                    .visits_for(cell as u32, t - 1)
                    .iter()
                    .any(|v| v.detected);
                let visits = ds.visits_for(cell as u32, t).len() as f64;
                if prev_detected {
                    hot = (hot.0 + visits, hot.1 + 1);
                } else {
                    cold = (cold.0 + visits, cold.1 + 1);
                }
            }
        }
        let hot_mean = hot.0 / hot.1 as f64;
        let cold_mean = cold.0 / cold.1 as f64;
        assert!(hot_mean > cold_mean, "hot {hot_mean}, cold {cold_mean}");
    }

    #[test]
    fn invalid_configs_rejected() {
        assert!(GeneratorConfig { months: 1, ..small_config() }.validate().is_err());
        assert!(GeneratorConfig { lambda: -1.0, ..small_config() }.validate().is_err());
        assert!(
            GeneratorConfig { occupancy_weights: vec![1.0], ..small_config() }
                .validate()
                .is_err()
        );
        assert!(GeneratorConfig { static_dim: 0, ..small_config() }.validate().is_err());
    }

    #[test]
    fn smooth_fields_have_unit_variance_and_local_correlation() {
        let mut rng = sub_rng(3, 99);
        let field = smooth_field(64, 64, 4.0, &mut rng);
        let n = field.len() as f64;
        let mean = field.iter().sum::<f64>() / n;
        let var = field.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
        assert!((var - 1.0).abs() < 0.4, "var {var}");

        // Neighbouring cells should be strongly correlated at this scale.
        let mut num = 0.0;
        let mut count = 0.0;
        for r in 0..64 {
            for c in 0..63 {
                num += field[r * 64 + c] * field[r * 64 + c + 1];
                count += 1.0;
            }
        }
        let lag1 = num / count / var;
        assert!(lag1 > 0.8, "lag-1 correlation {lag1}");
    }
}
