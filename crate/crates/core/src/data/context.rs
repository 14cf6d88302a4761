//! Per-month conditioning matrices consumed by the models.

use super::ParkDataset;
use crate::error::Result;
use crate::tensor::Tensor;

/// Inference-time context C_t: rows c_{i,t} = [x_{i,t}, a^m_{i,t-1}].
///
/// The lagged-effort column is zero for the first month of the dataset.
#[derive(Debug, Clone, PartialEq)]
pub struct ConditionContext {
    pub month_idx: usize,
    /// N x (d+1), unstandardized.
    pub matrix: Tensor,
}

/// Training-only context C'_t: rows c'_{i,t} = [x_{i,t}, S_{i,t}, a^m_{i,t}].
#[derive(Debug, Clone, PartialEq)]
pub struct EncoderContext {
    pub month_idx: usize,
    /// N x (d+2), unstandardized.
    pub matrix: Tensor,
}

fn lagged_effort(ds: &ParkDataset, cell: u32, month_idx: usize) -> Result<f64> {
    if month_idx == 0 {
        Ok(0.0)
    } else {
        ds.aggregate_monthly_effort(cell, month_idx - 1)
    }
}

/// Builds C_t for one month.
pub fn assemble_condition(ds: &ParkDataset, month_idx: usize) -> Result<ConditionContext> {
    let n = ds.node_count();
    let d = ds.feature_dim();
    let mut matrix = Tensor::zeros(n, d + 1);
    for cell in 0..n as u32 {
        let row = matrix.row_mut(cell as usize);
        row[..d].copy_from_slice(&ds.features(cell, month_idx));
        row[d] = lagged_effort(ds, cell, month_idx)?;
    }
    Ok(ConditionContext { month_idx, matrix })
}

/// Builds C'_t for one month.
pub fn assemble_encoder_context(ds: &ParkDataset, month_idx: usize) -> Result<EncoderContext> {
    let n = ds.node_count();
    let d = ds.feature_dim();
    let mut matrix = Tensor::zeros(n, d + 2);
    for cell in 0..n as u32 {
        let label = ds.monthly_label(cell, month_idx)?;
        let effort = ds.aggregate_monthly_effort(cell, month_idx)?;
        let row = matrix.row_mut(cell as usize);
        row[..d].copy_from_slice(&ds.features(cell, month_idx));
        row[d] = f64::from(label);
        row[d + 1] = effort;
    }
    Ok(EncoderContext { month_idx, matrix })
}

/// Total lagged effort over each cell's grid neighbors:
/// sum_{j in adj(i)} a^m_{j,t-1}. Zeros for the first month.
pub fn adjacent_lagged_effort(ds: &ParkDataset, month_idx: usize) -> Result<Vec<f64>> {
    let n = ds.node_count();
    let mut lag = vec![0.0; n];
    if month_idx > 0 {
        for cell in 0..n as u32 {
            lag[cell as usize] = ds.aggregate_monthly_effort(cell, month_idx - 1)?;
        }
    }
    let mut out = vec![0.0; n];
    for cell in 0..n as u32 {
        out[cell as usize] = ds
            .graph()
            .neighbors(cell)
            .iter()
            .map(|&nb| lag[nb as usize])
            .sum();
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::super::tests::tiny_dataset;
    use super::*;

    #[test]
    fn condition_first_month_has_zero_lag() {
        let ds = tiny_dataset();
        let ctx = assemble_condition(&ds, 0).unwrap();
        assert_eq!(ctx.matrix.cols(), ds.feature_dim() + 1);
        for cell in 0..ds.node_count() {
            assert_eq!(ctx.matrix.get(cell, ds.feature_dim()), 0.0);
        }
    }

    #[test]
    fn condition_lag_column_sums_prior_visits() {
        let ds = tiny_dataset();
        let ctx = assemble_condition(&ds, 1).unwrap();
        let d = ds.feature_dim();
        assert_eq!(ctx.matrix.get(0, d), 3.5);
        assert_eq!(ctx.matrix.get(1, d), 0.0);
    }

    #[test]
    fn encoder_context_carries_label_and_current_effort() {
        let ds = tiny_dataset();
        let ctx = assemble_encoder_context(&ds, 0).unwrap();
        let d = ds.feature_dim();
        assert_eq!(ctx.matrix.cols(), d + 2);
        assert_eq!(ctx.matrix.get(0, d), 1.0);
        assert_eq!(ctx.matrix.get(0, d + 1), 3.5);
        assert_eq!(ctx.matrix.get(1, d), 0.0);
        assert_eq!(ctx.matrix.get(1, d + 1), 0.0);
    }

    #[test]
    fn adjacent_effort_totals_neighbor_lags() {
        let ds = tiny_dataset();
        assert_eq!(adjacent_lagged_effort(&ds, 0).unwrap(), vec![0.0, 0.0]);
        let adj = adjacent_lagged_effort(&ds, 1).unwrap();
        assert_eq!(adj, vec![0.0, 3.5]);
    }
}
