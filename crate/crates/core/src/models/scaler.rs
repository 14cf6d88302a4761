//! Feature standardization fitted on training months only.
//!
//! Channels: one mean/std pair per feature column, one for monthly
//! aggregate patrol effort (used for both the lagged and current columns),
//! one for summed adjacent lagged effort, and one for per-visit effort.
//! The binary detection indicator `S` is never standardized. A constant
//! column keeps std 1 so it maps to zero instead of dividing by zero.

use serde::{Deserialize, Serialize};

use crate::data::{adjacent_lagged_effort, assemble_condition, assemble_encoder_context, ParkDataset};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FeatureScaler {
    pub feature_mean: Vec<f64>,
    pub feature_std: Vec<f64>,
    pub monthly_effort_mean: f64,
    pub monthly_effort_std: f64,
    pub adjacent_effort_mean: f64,
    pub adjacent_effort_std: f64,
    pub visit_effort_mean: f64,
    pub visit_effort_std: f64,
}

struct Running {
    n: f64,
    sum: f64,
    sum_sq: f64,
}

impl Running {
    fn new() -> Self {
        Running { n: 0.0, sum: 0.0, sum_sq: 0.0 }
    }

    fn push(&mut self, v: f64) {
        self.n += 1.0;
        self.sum += v;
        self.sum_sq += v * v;
    }

    fn finish(&self) -> (f64, f64) {
        if self.n == 0.0 {
            return (0.0, 1.0);
        }
        let mean = self.sum / self.n;
        let var = (self.sum_sq / self.n - mean * mean).max(0.0);
        let std = var.sqrt();
        (mean, if std < 1e-12 { 1.0 } else { std })
    }
}

impl FeatureScaler {
    /// A no-op scaler (zero means, unit stds) for `dim` feature columns.
    pub fn identity(dim: usize) -> FeatureScaler {
        FeatureScaler {
            feature_mean: vec![0.0; dim],
            feature_std: vec![1.0; dim],
            monthly_effort_mean: 0.0,
            monthly_effort_std: 1.0,
            adjacent_effort_mean: 0.0,
            adjacent_effort_std: 1.0,
            visit_effort_mean: 0.0,
            visit_effort_std: 1.0,
        }
    }

    /// Fits every channel on the given (training) dataset.
    pub fn fit(ds: &ParkDataset) -> Result<FeatureScaler> {
        let d = ds.feature_dim();
        let n = ds.node_count();
        let months = ds.months().len();

        let mut features: Vec<Running> = (0..d).map(|_| Running::new()).collect();
        let mut monthly = Running::new();
        let mut adjacent = Running::new();
        let mut visit = Running::new();

        for t in 0..months {
            let adj = adjacent_lagged_effort(ds, t)?;
            for cell in 0..n {
                for (f, v) in ds.features(cell as u32, t).into_iter().enumerate() {
                    features[f].push(v);
                }
                monthly.push(ds.aggregate_monthly_effort(cell as u32, t)?);
                adjacent.push(adj[cell]);
            }
        }
        for v in ds.visits() {
            visit.push(v.effort_km);
        }

        let (feature_mean, feature_std) = features.iter().map(Running::finish).unzip();
        let (monthly_effort_mean, monthly_effort_std) = monthly.finish();
        let (adjacent_effort_mean, adjacent_effort_std) = adjacent.finish();
        let (visit_effort_mean, visit_effort_std) = visit.finish();
        Ok(FeatureScaler {
            feature_mean,
            feature_std,
            monthly_effort_mean,
            monthly_effort_std,
            adjacent_effort_mean,
            adjacent_effort_std,
            visit_effort_mean,
            visit_effort_std,
        })
    }

    pub fn feature_dim(&self) -> usize {
        self.feature_mean.len()
    }

    fn check_dim(&self, ds: &ParkDataset) -> Result<()> {
        if ds.feature_dim() != self.feature_dim() {
            return Err(Error::invalid(format!(
                "scaler fitted on {} features, dataset has {}",
                self.feature_dim(),
                ds.feature_dim()
            )));
        }
        Ok(())
    }

    fn scale_feature(&self, f: usize, v: f64) -> f64 {
        (v - self.feature_mean[f]) / self.feature_std[f]
    }

    fn scale_monthly(&self, v: f64) -> f64 {
        (v - self.monthly_effort_mean) / self.monthly_effort_std
    }

    /// Standardized condition `[features, lagged effort]`, `N x (d+1)`.
    pub fn condition_matrix(&self, ds: &ParkDataset, month_idx: usize) -> Result<Tensor> {
        self.check_dim(ds)?;
        let d = self.feature_dim();
        let mut m = assemble_condition(ds, month_idx)?.matrix;
        for i in 0..m.rows() {
            let row = m.row_mut(i);
            for (f, v) in row.iter_mut().enumerate() {
                *v = if f < d {
                    self.scale_feature(f, *v)
                } else {
                    self.scale_monthly(*v)
                };
            }
        }
        Ok(m)
    }

    /// Condition plus a standardized adjacent-lagged-effort column,
    /// `N x (d+2)`; the linear base and flat baselines consume this.
    pub fn condition_with_adjacent(&self, ds: &ParkDataset, month_idx: usize) -> Result<Tensor> {
        let cond = self.condition_matrix(ds, month_idx)?;
        let adj = adjacent_lagged_effort(ds, month_idx)?;
        let n = cond.rows();
        let d1 = cond.cols();
        let mut m = Tensor::zeros(n, d1 + 1);
        for i in 0..n {
            m.row_mut(i)[..d1].copy_from_slice(cond.row(i));
            m.set(i, d1, (adj[i] - self.adjacent_effort_mean) / self.adjacent_effort_std);
        }
        Ok(m)
    }

    /// Standardized encoder context `[features, S, current effort]`,
    /// `N x (d+2)`; `S` stays binary.
    pub fn encoder_matrix(&self, ds: &ParkDataset, month_idx: usize) -> Result<Tensor> {
        self.check_dim(ds)?;
        let d = self.feature_dim();
        let mut m = assemble_encoder_context(ds, month_idx)?.matrix;
        for i in 0..m.rows() {
            let row = m.row_mut(i);
            for (f, v) in row.iter_mut().enumerate() {
                if f < d {
                    *v = self.scale_feature(f, *v);
                } else if f == d + 1 {
                    *v = self.scale_monthly(*v);
                }
            }
        }
        Ok(m)
    }

    /// Standardized per-visit rows `[features, effort]` for the listed
    /// cells, with half-open visit ranges per cell and detection outcomes.
    pub fn visit_matrix(
        &self,
        ds: &ParkDataset,
        month_idx: usize,
        cells: &[u32],
    ) -> Result<(Tensor, Vec<(u32, u32)>, Vec<bool>)> {
        self.check_dim(ds)?;
        let d = self.feature_dim();
        let mut rows: Vec<f64> = Vec::new();
        let mut ranges = Vec::with_capacity(cells.len());
        let mut outcomes = Vec::new();
        let mut count = 0u32;
        for &cell in cells {
            let visits = ds.visits_for(cell, month_idx);
            let start = count;
            let feats = ds.features(cell, month_idx);
            for v in visits {
                for (f, &x) in feats.iter().enumerate() {
                    rows.push(self.scale_feature(f, x));
                }
                rows.push((v.effort_km - self.visit_effort_mean) / self.visit_effort_std);
                outcomes.push(v.detected);
                count += 1;
            }
            ranges.push((start, count));
        }
        let matrix = Tensor::from_vec(count as usize, d + 1, rows)?;
        Ok((matrix, ranges, outcomes))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::synth::{default_config, generate_park, GeneratorConfig};

    fn park() -> ParkDataset {
        generate_park(&GeneratorConfig {
            rows: 6,
            cols: 6,
            months: 8,
            ..default_config()
        })
        .unwrap()
    }

    #[test]
    fn standardized_features_have_zero_mean_unit_variance() {
        let ds = park();
        let scaler = FeatureScaler::fit(&ds).unwrap();
        let d = ds.feature_dim();
        let mut sums = vec![0.0; d];
        let mut sq = vec![0.0; d];
        let mut n = 0.0;
        for t in 0..ds.months().len() {
            let m = scaler.condition_matrix(&ds, t).unwrap();
            for i in 0..m.rows() {
                for f in 0..d {
                    sums[f] += m.get(i, f);
                    sq[f] += m.get(i, f) * m.get(i, f);
                }
                n += 1.0;
            }
        }
        for f in 0..d {
            let mean = sums[f] / n;
            let var = sq[f] / n - mean * mean;
            assert!(mean.abs() < 1e-9, "feature {f} mean {mean}");
            assert!((var - 1.0).abs() < 1e-6, "feature {f} var {var}");
        }
    }

    #[test]
    fn s_column_stays_binary() {
        let ds = park();
        let scaler = FeatureScaler::fit(&ds).unwrap();
        let d = ds.feature_dim();
        for t in 0..ds.months().len() {
            let m = scaler.encoder_matrix(&ds, t).unwrap();
            for i in 0..m.rows() {
                let s = m.get(i, d);
                assert!(s == 0.0 || s == 1.0);
            }
        }
    }

    #[test]
    fn constant_column_maps_to_zero() {
        let mut scaler = FeatureScaler {
            feature_mean: vec![3.0],
            feature_std: vec![1.0],
            monthly_effort_mean: 0.0,
            monthly_effort_std: 1.0,
            adjacent_effort_mean: 0.0,
            adjacent_effort_std: 1.0,
            visit_effort_mean: 0.0,
            visit_effort_std: 1.0,
        };
        // A fitted std of exactly zero is stored as 1.
        scaler.feature_std[0] = 1.0;
        assert_eq!(scaler.scale_feature(0, 3.0), 0.0);
    }

    #[test]
    fn visit_matrix_layout_matches_dataset() {
        let ds = park();
        let scaler = FeatureScaler::fit(&ds).unwrap();
        let cells: Vec<u32> = (0..ds.node_count() as u32).collect();
        let t = 3;
        let (m, ranges, outcomes) = scaler.visit_matrix(&ds, t, &cells).unwrap();
        let total: usize = cells.iter().map(|&c| ds.visits_for(c, t).len()).sum();
        assert_eq!(m.rows(), total);
        assert_eq!(outcomes.len(), total);
        assert_eq!(ranges.len(), cells.len());
        for (cell_pos, &(start, end)) in ranges.iter().enumerate() {
            let visits = ds.visits_for(cells[cell_pos], t);
            assert_eq!((end - start) as usize, visits.len());
            for (k, v) in visits.iter().enumerate() {
                assert_eq!(outcomes[start as usize + k], v.detected);
            }
        }
    }

    #[test]
    fn dimension_mismatch_rejected() {
        let ds = park();
        let mut scaler = FeatureScaler::fit(&ds).unwrap();
        scaler.feature_mean.pop();
        scaler.feature_std.pop();
        assert!(scaler.condition_matrix(&ds, 0).is_err());
    }
}
