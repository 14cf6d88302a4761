//! Domain data model: gridded parks, monthly features, visit-level patrol
//! records, temporal windowing and high-risk region selection.

mod context;
mod io;
mod window;

pub use context::{
    adjacent_lagged_effort, assemble_condition, assemble_encoder_context, ConditionContext,
    EncoderContext,
};
pub use io::{
    load_dataset, parse_cells_csv, parse_dynamics_csv, parse_ground_truth_csv, parse_visits_csv,
    save_dataset,
};
pub use window::{detection_counts, select_high_risk_regions, window_split};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Calendar month, ordered by (year, month).
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct MonthKey {
    pub year: i32,
    pub month: u8,
}

impl MonthKey {
    pub fn new(year: i32, month: u8) -> Result<Self> {
        if !(1..=12).contains(&month) {
            return Err(Error::invalid(format!(
                "month {month} outside 1..=12 (year {year})"
            )));
        }
        Ok(MonthKey { year, month })
    }

    /// The calendar month immediately after this one.
    pub fn next(self) -> MonthKey {
        if self.month == 12 {
            MonthKey {
                year: self.year + 1,
                month: 1,
            }
        } else {
            MonthKey {
                year: self.year,
                month: self.month + 1,
            }
        }
    }
}

impl std::fmt::Display for MonthKey {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "{:04}-{:02}", self.year, self.month)
    }
}

/// Rectangular grid with 4-neighborhood adjacency.
#[derive(Debug, Clone, PartialEq)]
pub struct GridGraph {
    rows: usize,
    cols: usize,
    neighbors: Vec<Vec<u32>>,
}

impl GridGraph {
    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn node_count(&self) -> usize {
        self.rows * self.cols
    }

    pub fn edge_count(&self) -> usize {
        self.neighbors.iter().map(|n| n.len()).sum::<usize>() / 2
    }

    /// Neighbor ids of `cell`, in ascending order.
    pub fn neighbors(&self, cell: u32) -> &[u32] {
        &self.neighbors[cell as usize]
    }

    pub fn cell_position(&self, cell: u32) -> (usize, usize) {
        let c = cell as usize;
        (c / self.cols, c % self.cols)
    }
}

/// Builds the 4-neighborhood grid graph with row-major cell ids.
pub fn build_grid_graph(rows: usize, cols: usize) -> Result<GridGraph> {
    if rows == 0 || cols == 0 {
        return Err(Error::invalid(format!(
            "grid dimensions must be positive, got {rows}x{cols}"
        )));
    }
    let mut neighbors = vec![Vec::new(); rows * cols];
    for r in 0..rows {
        for c in 0..cols {
            let id = r * cols + c;
            if r > 0 {
                neighbors[id].push((id - cols) as u32);
            }
            if c > 0 {
                neighbors[id].push((id - 1) as u32);
            }
            if c + 1 < cols {
                neighbors[id].push((id + 1) as u32);
            }
            if r + 1 < rows {
                neighbors[id].push((id + cols) as u32);
            }
        }
    }
    Ok(GridGraph {
        rows,
        cols,
        neighbors,
    })
}

/// One patrol visit to a cell in a month.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct VisitRecord {
    pub cell_id: u32,
    pub month: MonthKey,
    /// 1-based index within the cell-month.
    pub visit_index: u32,
    pub effort_km: f64,
    pub detected: bool,
}

/// A park: graph, per-cell-month features, visits and optional ground truth.
///
/// Construction validates every cross-reference; instances are immutable
/// afterwards, so shared read access from multiple threads is safe.
#[derive(Debug, Clone, PartialEq)]
pub struct ParkDataset {
    graph: GridGraph,
    months: Vec<MonthKey>,
    /// N x k static covariates, constant over time.
    static_features: Tensor,
    /// One N x m matrix per month, aligned with `months`.
    dynamic_features: Vec<Tensor>,
    /// Sorted by (month, cell, visit_index).
    visits: Vec<VisitRecord>,
    /// Per month, per cell: half-open range into `visits`.
    visit_ranges: Vec<Vec<(u32, u32)>>,
    /// Per month, per cell: true occupancy (synthetic data only).
    ground_truth_z: Option<Vec<Vec<u8>>>,
}

impl ParkDataset {
    pub fn new(
        graph: GridGraph,
        months: Vec<MonthKey>,
        static_features: Tensor,
        dynamic_features: Vec<Tensor>,
        mut visits: Vec<VisitRecord>,
        ground_truth_z: Option<Vec<Vec<u8>>>,
    ) -> Result<Self> {
        let n = graph.node_count();
        if months.is_empty() {
            return Err(Error::invalid("dataset must contain at least one month"));
        }
        if months.windows(2).any(|w| w[0] >= w[1]) {
            return Err(Error::invalid("months must be strictly increasing"));
        }
        if static_features.rows() != n {
            return Err(Error::invalid(format!(
                "static feature rows {} != node count {n}",
                static_features.rows()
            )));
        }
        if dynamic_features.len() != months.len() {
            return Err(Error::invalid(format!(
                "{} dynamic feature matrices for {} months",
                dynamic_features.len(),
                months.len()
            )));
        }
        let m_dim = dynamic_features.first().map_or(0, Tensor::cols);
        for (idx, dyn_t) in dynamic_features.iter().enumerate() {
            if dyn_t.rows() != n || dyn_t.cols() != m_dim {
                return Err(Error::invalid(format!(
                    "dynamic features for month {} have shape {}x{}, expected {n}x{m_dim}",
                    months[idx],
                    dyn_t.rows(),
                    dyn_t.cols()
                )));
            }
            if !dyn_t.is_finite() {
                return Err(Error::invalid(format!(
                    "non-finite dynamic feature in month {}",
                    months[idx]
                )));
            }
        }
        if !static_features.is_finite() {
            return Err(Error::invalid("non-finite static feature"));
        }
        if let Some(z) = &ground_truth_z {
            if z.len() != months.len() || z.iter().any(|zt| zt.len() != n) {
                return Err(Error::invalid("ground truth shape does not match dataset"));
            }
            if z.iter().flatten().any(|&v| v > 1) {
                return Err(Error::invalid("ground truth entries must be 0 or 1"));
            }
        }

        let month_index = |key: MonthKey| months.binary_search(&key).ok();
        for v in &visits {
            if v.cell_id as usize >= n {
                return Err(Error::invalid(format!(
                    "visit references cell {} outside 0..{n}",
                    v.cell_id
                )));
            }
            if month_index(v.month).is_none() {
                return Err(Error::invalid(format!(
                    "visit references month {} absent from dataset",
                    v.month
                )));
            }
            if !(v.effort_km.is_finite() && v.effort_km >= 0.0) {
                return Err(Error::invalid(format!(
                    "visit effort {} must be finite and nonnegative",
                    v.effort_km
                )));
            }
        }
        visits.sort_by_key(|v| (v.month, v.cell_id, v.visit_index));

        let mut visit_ranges = vec![vec![(0u32, 0u32); n]; months.len()];
        let mut idx = 0;
        while idx < visits.len() {
            let (month, cell) = (visits[idx].month, visits[idx].cell_id);
            let start = idx;
            while idx < visits.len() && visits[idx].month == month && visits[idx].cell_id == cell {
                idx += 1;
            }
            for (offset, v) in visits[start..idx].iter().enumerate() {
                if v.visit_index as usize != offset + 1 {
                    return Err(Error::invalid(format!(
                        "cell {cell} month {month}: visit indices must be 1..=J, found {}",
                        v.visit_index
                    )));
                }
            }
            let t = month_index(month).expect("validated above");
            visit_ranges[t][cell as usize] = (start as u32, idx as u32);
        }

        Ok(ParkDataset {
            graph,
            months,
            static_features,
            dynamic_features,
            visits,
            visit_ranges,
            ground_truth_z,
        })
    }

    pub fn graph(&self) -> &GridGraph {
        &self.graph
    }

    pub fn node_count(&self) -> usize {
        self.graph.node_count()
    }

    pub fn months(&self) -> &[MonthKey] {
        &self.months
    }

    pub fn month_index(&self, key: MonthKey) -> Option<usize> {
        self.months.binary_search(&key).ok()
    }

    pub fn static_dim(&self) -> usize {
        self.static_features.cols()
    }

    pub fn dynamic_dim(&self) -> usize {
        self.dynamic_features.first().map_or(0, Tensor::cols)
    }

    /// Total feature width d (static + dynamic).
    pub fn feature_dim(&self) -> usize {
        self.static_dim() + self.dynamic_dim()
    }

    pub fn static_features(&self) -> &Tensor {
        &self.static_features
    }

    pub fn dynamic_features(&self, month_idx: usize) -> &Tensor {
        &self.dynamic_features[month_idx]
    }

    /// Feature vector x for one cell-month: static then dynamic columns.
    pub fn features(&self, cell: u32, month_idx: usize) -> Vec<f64> {
        let mut x = self.static_features.row(cell as usize).to_vec();
        x.extend_from_slice(self.dynamic_features[month_idx].row(cell as usize));
        x
    }

    pub fn visits(&self) -> &[VisitRecord] {
        &self.visits
    }

    pub fn visits_for(&self, cell: u32, month_idx: usize) -> &[VisitRecord] {
        let (start, end) = self.visit_ranges[month_idx][cell as usize];
        &self.visits[start as usize..end as usize]
    }

    pub fn ground_truth(&self) -> Option<&Vec<Vec<u8>>> {
        self.ground_truth_z.as_ref()
    }

    fn check_cell_month(&self, cell: u32, month_idx: usize) -> Result<()> {
        if cell as usize >= self.node_count() {
            return Err(Error::invalid(format!(
                "cell {cell} outside 0..{}",
                self.node_count()
            )));
        }
        if month_idx >= self.months.len() {
            return Err(Error::invalid(format!(
                "month index {month_idx} outside 0..{}",
                self.months.len()
            )));
        }
        Ok(())
    }

    /// Sum of visit effort over one cell-month (a^m), 0 when unvisited.
    pub fn aggregate_monthly_effort(&self, cell: u32, month_idx: usize) -> Result<f64> {
        self.check_cell_month(cell, month_idx)?;
        Ok(self
            .visits_for(cell, month_idx)
            .iter()
            .map(|v| v.effort_km)
            .sum())
    }

    /// Monthly label S: 1 iff any visit in the cell-month detected.
    pub fn monthly_label(&self, cell: u32, month_idx: usize) -> Result<u8> {
        self.check_cell_month(cell, month_idx)?;
        Ok(u8::from(
            self.visits_for(cell, month_idx).iter().any(|v| v.detected),
        ))
    }

    /// New dataset keeping only months selected by `keep`.
    pub fn slice_months(&self, keep: impl Fn(MonthKey) -> bool) -> Result<ParkDataset> {
        let selected: Vec<usize> = (0..self.months.len())
            .filter(|&t| keep(self.months[t]))
            .collect();
        if selected.is_empty() {
            return Err(Error::invalid("month selection is empty"));
        }
        let months: Vec<MonthKey> = selected.iter().map(|&t| self.months[t]).collect();
        let dynamic = selected
            .iter()
            .map(|&t| self.dynamic_features[t].clone())
            .collect();
        let month_set: std::collections::BTreeSet<MonthKey> = months.iter().copied().collect();
        let visits = self
            .visits
            .iter()
            .filter(|v| month_set.contains(&v.month))
            .copied()
            .collect();
        let z = self
            .ground_truth_z
            .as_ref()
            .map(|z| selected.iter().map(|&t| z[t].clone()).collect());
        ParkDataset::new(
            self.graph.clone(),
            months,
            self.static_features.clone(),
            dynamic,
            visits,
            z,
        )
    }
}
