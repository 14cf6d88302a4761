//! Scoring, the precision-recall metric, report files, and the log-loss
//! case study over high-risk patrol regions.

use std::collections::BTreeSet;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::data::{select_high_risk_regions, MonthKey, ParkDataset};
use crate::error::{Error, Result};
use crate::flow::sample_risk;
use crate::models::{
    detection_forward, gcn_forward, linear_base_forward, mlp_forward_on_tape,
    normalized_adjacency, MlpParams,
};
use crate::rng::mix_seed;
use crate::tape::Tape;
use crate::tensor::{sigmoid, Tensor};
use crate::train::{ModelKind, TrainedModel};

/// Whether high-risk regions are recomputed for every test month or fixed
/// from the history before the test year.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RegionSchedule {
    Monthly,
    Fixed,
}

/// Region selection settings used by `evaluate`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RegionSpec {
    pub schedule: RegionSchedule,
    pub seed_count: usize,
    pub max_region_size: usize,
}

impl Default for RegionSpec {
    fn default() -> Self {
        RegionSpec {
            schedule: RegionSchedule::Monthly,
            seed_count: 20,
            max_region_size: 25,
        }
    }
}

/// Per-cell outputs of scoring one month.
#[derive(Debug, Clone, PartialEq)]
pub struct MonthPrediction {
    /// Occupancy risk r per cell.
    pub risk: Vec<f64>,
    /// Probability of at least one detection given the planned visits.
    pub p_any: Vec<f64>,
}

/// One scored cell-month of a report.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CellMonthScore {
    pub cell_id: u32,
    pub year: i32,
    pub month: u8,
    pub score: f64,
    pub label: u8,
    pub log_loss: f64,
}

/// Aggregates and metadata written to `report.json`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReportSummary {
    pub model_kind: ModelKind,
    pub test_year: i32,
    pub seed: u64,
    /// The AUPR estimator; always the average-precision formulation.
    pub aupr_estimator: String,
    pub region_schedule: RegionSchedule,
    pub cell_months: usize,
    pub positives: usize,
    pub prevalence: f64,
    pub aupr: f64,
    pub mean_log_loss: f64,
}

/// A full evaluation: aggregates plus every scored cell-month.
#[derive(Debug, Clone, PartialEq)]
pub struct EvalReport {
    pub summary: ReportSummary,
    pub rows: Vec<CellMonthScore>,
}

/// Realized visit efforts of one month, grouped per cell.
pub fn realized_visits(ds: &ParkDataset, month_idx: usize) -> Vec<Vec<f64>> {
    (0..ds.node_count() as u32)
        .map(|cell| {
            ds.visits_for(cell, month_idx)
                .iter()
                .map(|v| v.effort_km)
                .collect()
        })
        .collect()
}

fn mlp_values(mlp: &MlpParams, x: &Tensor, bound: f64) -> Result<Vec<f64>> {
    let mut tape = Tape::new();
    let vars = mlp.leaves(&mut tape);
    let input = tape.leaf(x.clone());
    let out = mlp_forward_on_tape(&mut tape, &vars, input, bound)?;
    Ok(tape.value(out).as_slice().to_vec())
}

/// Scores one month: occupancy risk per cell plus the probability that any
/// of the planned visits detects. Flow kinds reseed per month so every
/// month gets an independent, reproducible noise stream.
pub fn predict_month(
    model: &TrainedModel,
    ds: &ParkDataset,
    month_idx: usize,
    planned: &[Vec<f64>],
) -> Result<MonthPrediction> {
    model.validate_bundles()?;
    if month_idx == 0 || month_idx >= ds.months().len() {
        return Err(Error::invalid(format!(
            "month index {month_idx} has no preceding month in a dataset of {} months",
            ds.months().len()
        )));
    }
    let n = ds.node_count();
    if planned.len() != n {
        return Err(Error::invalid(format!(
            "{} planned-visit groups for {n} cells",
            planned.len()
        )));
    }
    let scaler = &model.scaler;
    let bound = model.logit_bound;
    let d = scaler.feature_dim();
    let cond = scaler.condition_matrix(ds, month_idx)?;
    let cond_adj = scaler.condition_with_adjacent(ds, month_idx)?;
    let adjacent: Vec<f64> = (0..n).map(|i| cond_adj.get(i, d + 1)).collect();

    let risk: Vec<f64> = match model.kind {
        ModelKind::Wildflow | ModelKind::WildflowNoBase | ModelKind::WildflowNoDet => {
            let adj = normalized_adjacency(ds.graph());
            let mut cfg = model.flow.clone();
            cfg.seed = mix_seed(model.flow.seed, month_idx as u64);
            sample_risk(
                model.velocity.as_ref().expect("validated bundles"),
                model.base.as_ref(),
                &adj,
                &cond,
                &adjacent,
                &cfg,
            )?
        }
        ModelKind::Logreg => {
            let base = model.base.as_ref().expect("validated bundles");
            linear_base_forward(base, &cond, &adjacent)?
                .into_iter()
                .map(|psi| sigmoid(psi.clamp(-bound, bound)))
                .collect()
        }
        ModelKind::Mlp => {
            let mlp = model.mlp.as_ref().expect("validated bundles");
            mlp_values(mlp, &cond_adj, bound)?
                .into_iter()
                .map(sigmoid)
                .collect()
        }
        ModelKind::Gnn => {
            let encoder = model.encoder.as_ref().expect("validated bundles");
            let adj = normalized_adjacency(ds.graph());
            gcn_forward(&encoder.stack, &adj, &cond, bound)?
                .into_iter()
                .map(sigmoid)
                .collect()
        }
    };

    let p_any = match model.kind {
        ModelKind::WildflowNoDet => risk.clone(),
        _ => {
            let det = model.detection.as_ref().expect("validated bundles");
            let mut out = Vec::with_capacity(n);
            for (i, r) in risk.iter().enumerate() {
                let features = &cond.row(i)[..d];
                let mut miss = 1.0;
                for &effort in &planned[i] {
                    let scaled =
                        (effort - scaler.visit_effort_mean) / scaler.visit_effort_std;
                    let p = detection_forward(det, features, scaled, bound)?;
                    miss *= 1.0 - p;
                }
                out.push(r * (1.0 - miss));
            }
            out
        }
    };
    Ok(MonthPrediction { risk, p_any })
}

/// Area under the precision-recall curve by the average-precision
/// formulation; tied scores are processed as one block at the precision of
/// the block's end.
pub fn aupr(scores: &[f64], labels: &[u8]) -> Result<f64> {
    if scores.len() != labels.len() {
        return Err(Error::invalid(format!(
            "{} scores for {} labels",
            scores.len(),
            labels.len()
        )));
    }
    if scores.is_empty() {
        return Err(Error::invalid("cannot rank an empty score list"));
    }
    if scores.iter().any(|s| !s.is_finite()) {
        return Err(Error::invalid("scores must be finite"));
    }
    let total_pos = labels.iter().filter(|&&y| y != 0).count();
    if total_pos == 0 {
        return Err(Error::UndefinedMetric(
            "no positive labels, precision-recall area is undefined".into(),
        ));
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| {
        scores[b]
            .partial_cmp(&scores[a])
            .expect("finite scores compare")
            .then(a.cmp(&b))
    });
    let mut area = 0.0;
    let mut true_pos = 0usize;
    let mut seen = 0usize;
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        let mut block_pos = 0usize;
        while j < order.len() && scores[order[j]] == scores[order[i]] {
            if labels[order[j]] != 0 {
                block_pos += 1;
            }
            j += 1;
        }
        true_pos += block_pos;
        seen += j - i;
        if block_pos > 0 {
            let precision = true_pos as f64 / seen as f64;
            area += block_pos as f64 / total_pos as f64 * precision;
        }
        i = j;
    }
    Ok(area)
}

fn log_loss(score: f64, label: u8) -> f64 {
    if label != 0 {
        -score.ln()
    } else {
        -(-score).ln_1p()
    }
}

fn region_cells(ds: &ParkDataset, spec: &RegionSpec) -> Result<Vec<u32>> {
    let regions = select_high_risk_regions(ds, spec.seed_count, spec.max_region_size)?;
    let set: BTreeSet<u32> = regions.into_iter().flatten().collect();
    Ok(set.into_iter().collect())
}

/// Scores every test-year cell-month inside the high-risk regions and
/// aggregates the ranking metric and mean log loss.
pub fn evaluate(
    model: &TrainedModel,
    ds: &ParkDataset,
    test_year: i32,
    regions: &RegionSpec,
) -> Result<EvalReport> {
    let test_months: Vec<usize> = (0..ds.months().len())
        .filter(|&t| ds.months()[t].year == test_year)
        .collect();
    if test_months.is_empty() {
        return Err(Error::invalid(format!(
            "test year {test_year} has no months in the dataset"
        )));
    }
    let fixed_cells = match regions.schedule {
        RegionSchedule::Fixed => {
            let prior = ds.slice_months(|m| m.year < test_year).map_err(|_| {
                Error::invalid(format!("no months before test year {test_year}"))
            })?;
            Some(region_cells(&prior, regions)?)
        }
        RegionSchedule::Monthly => None,
    };

    let mut rows = Vec::new();
    for &t in &test_months {
        let cells = match &fixed_cells {
            Some(cells) => cells.clone(),
            None => {
                let cutoff = ds.months()[t];
                let prior = ds.slice_months(|m| m < cutoff).map_err(|_| {
                    Error::invalid(format!("no months before test month {cutoff}"))
                })?;
                region_cells(&prior, regions)?
            }
        };
        if cells.is_empty() {
            return Err(Error::invalid("empty region pool"));
        }
        let planned = realized_visits(ds, t);
        let pred = predict_month(model, ds, t, &planned)?;
        let key = ds.months()[t];
        for &cell in &cells {
            let score = pred.p_any[cell as usize];
            let label = ds.monthly_label(cell, t)?;
            rows.push(CellMonthScore {
                cell_id: cell,
                year: key.year,
                month: key.month,
                score,
                label,
                log_loss: log_loss(score, label),
            });
        }
    }

    let scores: Vec<f64> = rows.iter().map(|r| r.score).collect();
    let labels: Vec<u8> = rows.iter().map(|r| r.label).collect();
    let positives = labels.iter().filter(|&&y| y != 0).count();
    let area = aupr(&scores, &labels)?;
    let mean_log_loss = rows.iter().map(|r| r.log_loss).sum::<f64>() / rows.len() as f64;
    Ok(EvalReport {
        summary: ReportSummary {
            model_kind: model.kind,
            test_year,
            seed: model.flow.seed,
            aupr_estimator: "average_precision".into(),
            region_schedule: regions.schedule,
            cell_months: rows.len(),
            positives,
            prevalence: positives as f64 / rows.len() as f64,
            aupr: area,
            mean_log_loss,
        },
        rows,
    })
}

impl EvalReport {
    /// Writes `report.json` (aggregates and metadata) and
    /// `report_cells.csv` (one line per scored cell-month).
    pub fn save(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir)?;
        let json = serde_json::to_string_pretty(&self.summary)
            .map_err(|e| Error::schema("report.json", e.to_string()))?;
        std::fs::write(dir.join("report.json"), json + "\n")?;
        let mut writer = csv::Writer::from_path(dir.join("report_cells.csv"))
            .map_err(|e| Error::schema("report_cells.csv", e.to_string()))?;
        for row in &self.rows {
            writer
                .serialize(row)
                .map_err(|e| Error::schema("report_cells.csv", e.to_string()))?;
        }
        writer
            .flush()
            .map_err(|e| Error::schema("report_cells.csv", e.to_string()))?;
        Ok(())
    }

    /// Reads a report written by `save`.
    pub fn load(dir: &Path) -> Result<EvalReport> {
        let json_path = dir.join("report.json");
        let text = std::fs::read_to_string(&json_path)
            .map_err(|_| Error::MissingArtifact(json_path.display().to_string()))?;
        let summary: ReportSummary = serde_json::from_str(&text)
            .map_err(|e| Error::schema("report.json", e.to_string()))?;
        let csv_path = dir.join("report_cells.csv");
        if !csv_path.exists() {
            return Err(Error::MissingArtifact(csv_path.display().to_string()));
        }
        let mut reader = csv::Reader::from_path(&csv_path)
            .map_err(|e| Error::schema("report_cells.csv", e.to_string()))?;
        let rows = reader
            .deserialize()
            .collect::<std::result::Result<Vec<CellMonthScore>, _>>()
            .map_err(|e| Error::schema("report_cells.csv", e.to_string()))?;
        Ok(EvalReport { summary, rows })
    }
}

/// One line of the feature-median comparison.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CaseStudyRow {
    pub feature: String,
    pub subset_median: f64,
    pub overall_median: f64,
}

/// Feature medians over the cell-months where model A most outperforms
/// model B, next to medians over all scored cell-months.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CaseStudyTable {
    pub quantile: f64,
    pub subset_size: usize,
    pub rows: Vec<CaseStudyRow>,
}

fn median(mut values: Vec<f64>) -> f64 {
    values.sort_by(|a, b| a.partial_cmp(b).expect("finite values compare"));
    let n = values.len();
    if n % 2 == 1 {
        values[n / 2]
    } else {
        0.5 * (values[n / 2 - 1] + values[n / 2])
    }
}

/// Compares feature medians over the lowest-`q` fraction of per-cell-month
/// log-loss differences (report A minus report B) against all cell-months.
/// Selection ties break by (difference, cell index, month).
pub fn case_study(
    report_a: &EvalReport,
    report_b: &EvalReport,
    ds: &ParkDataset,
    feature_names: &[String],
    q: f64,
) -> Result<CaseStudyTable> {
    if !(q > 0.0 && q <= 1.0) {
        return Err(Error::invalid(format!("quantile {q} outside (0, 1]")));
    }
    if report_a.rows.len() != report_b.rows.len()
        || report_a
            .rows
            .iter()
            .zip(&report_b.rows)
            .any(|(a, b)| (a.cell_id, a.year, a.month) != (b.cell_id, b.year, b.month))
    {
        return Err(Error::invalid("reports cover different cell-months"));
    }
    if report_a.rows.is_empty() {
        return Err(Error::invalid("reports contain no cell-months"));
    }
    let d = ds.feature_dim();
    if feature_names.len() != d {
        return Err(Error::invalid(format!(
            "{} feature names for {d} feature columns",
            feature_names.len()
        )));
    }

    let diffs: Vec<f64> = report_a
        .rows
        .iter()
        .zip(&report_b.rows)
        .map(|(a, b)| a.log_loss - b.log_loss)
        .collect();
    if diffs.iter().any(|v| !v.is_finite()) {
        return Err(Error::invalid("log-loss differences must be finite"));
    }
    let mut order: Vec<usize> = (0..diffs.len()).collect();
    order.sort_by(|&i, &j| {
        let a = &report_a.rows[i];
        let b = &report_a.rows[j];
        diffs[i]
            .partial_cmp(&diffs[j])
            .expect("finite differences compare")
            .then(a.cell_id.cmp(&b.cell_id))
            .then((a.year, a.month).cmp(&(b.year, b.month)))
    });
    let total = diffs.len();
    let subset_size = ((q * total as f64).ceil() as usize).clamp(1, total);

    let month_idx = |row: &CellMonthScore| -> Result<usize> {
        let key = MonthKey::new(row.year, row.month)?;
        ds.month_index(key).ok_or_else(|| {
            Error::invalid(format!("report month {key} not in the dataset"))
        })
    };
    let mut subset_vals = vec![Vec::with_capacity(subset_size); d];
    for &i in order.iter().take(subset_size) {
        let row = &report_a.rows[i];
        let x = ds.features(row.cell_id, month_idx(row)?);
        for (f, v) in x.into_iter().enumerate() {
            subset_vals[f].push(v);
        }
    }
    let mut overall_vals = vec![Vec::with_capacity(total); d];
    for row in &report_a.rows {
        let x = ds.features(row.cell_id, month_idx(row)?);
        for (f, v) in x.into_iter().enumerate() {
            overall_vals[f].push(v);
        }
    }
    let rows = feature_names
        .iter()
        .zip(subset_vals.into_iter().zip(overall_vals))
        .map(|(name, (sub, all))| CaseStudyRow {
            feature: name.clone(),
            subset_median: median(sub),
            overall_median: median(all),
        })
        .collect();
    Ok(CaseStudyTable { quantile: q, subset_size, rows })
}

/// Writes the comparison as `case_study.csv`.
pub fn save_case_study(table: &CaseStudyTable, path: &Path) -> Result<()> {
    let mut writer = csv::Writer::from_path(path)
        .map_err(|e| Error::schema("case_study.csv", e.to_string()))?;
    for row in &table.rows {
        writer
            .serialize(row)
            .map_err(|e| Error::schema("case_study.csv", e.to_string()))?;
    }
    writer
        .flush()
        .map_err(|e| Error::schema("case_study.csv", e.to_string()))?;
    Ok(())
}
