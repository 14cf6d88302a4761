//! Calendar-year train/test windowing and high-risk region selection.

use super::ParkDataset;
use crate::error::{Error, Result};

/// Splits into (train, test): test is `test_year`'s months, train is the
/// `train_window_years` calendar years immediately before it (clipped to the
/// dataset span, but never empty).
pub fn window_split(
    ds: &ParkDataset,
    test_year: i32,
    train_window_years: u32,
) -> Result<(ParkDataset, ParkDataset)> {
    if train_window_years == 0 {
        return Err(Error::invalid("train window must cover at least one year"));
    }
    let years: Vec<i32> = ds.months().iter().map(|m| m.year).collect();
    if !years.contains(&test_year) {
        return Err(Error::invalid(format!(
            "test year {test_year} outside dataset span {}..={}",
            years.first().unwrap(),
            years.last().unwrap()
        )));
    }
    let first_train_year = test_year - train_window_years as i32;
    let train = ds.slice_months(|m| m.year >= first_train_year && m.year < test_year);
    let train = train.map_err(|_| {
        Error::invalid(format!(
            "empty train window: no months in years {first_train_year}..{test_year}"
        ))
    })?;
    let test = ds.slice_months(|m| m.year == test_year)?;
    Ok((train, test))
}

/// Detected-visit count per cell over every month in the dataset.
pub fn detection_counts(ds: &ParkDataset) -> Vec<u64> {
    let mut counts = vec![0u64; ds.node_count()];
    for v in ds.visits() {
        if v.detected {
            counts[v.cell_id as usize] += 1;
        }
    }
    counts
}

/// Greedily grown high-risk regions.
///
/// Seeds are the `seed_count` cells with the most historical detections
/// (ties to the lowest cell id). Each region repeatedly absorbs the
/// adjacent cell with the highest count (same tie-break) until it holds
/// `max_region_size` cells or the frontier is empty. Regions may overlap;
/// each is returned sorted ascending.
pub fn select_high_risk_regions(
    ds: &ParkDataset,
    seed_count: usize,
    max_region_size: usize,
) -> Result<Vec<Vec<u32>>> {
    let n = ds.node_count();
    if seed_count == 0 || max_region_size == 0 {
        return Err(Error::invalid(
            "seed_count and max_region_size must be positive",
        ));
    }
    if seed_count > n {
        return Err(Error::invalid(format!(
            "seed_count {seed_count} exceeds cell count {n}"
        )));
    }
    let counts = detection_counts(ds);
    let mut order: Vec<u32> = (0..n as u32).collect();
    order.sort_by_key(|&c| (std::cmp::Reverse(counts[c as usize]), c));

    let mut regions = Vec::with_capacity(seed_count);
    for &seed in order.iter().take(seed_count) {
        let mut member = vec![false; n];
        let mut region = vec![seed];
        member[seed as usize] = true;
        while region.len() < max_region_size {
            let mut best: Option<u32> = None;
            for &cell in &region {
                for &nb in ds.graph().neighbors(cell) {
                    if member[nb as usize] {
                        continue;
                    }
                    best = Some(match best {
                        None => nb,
                        Some(cur) => {
                            let better = (counts[nb as usize], std::cmp::Reverse(nb))
                                > (counts[cur as usize], std::cmp::Reverse(cur));
                            if better {
                                nb
                            } else {
                                cur
                            }
                        }
                    });
                }
            }
            match best {
                Some(cell) => {
                    member[cell as usize] = true;
                    region.push(cell);
                }
                None => break,
            }
        }
        region.sort_unstable();
        regions.push(region);
    }
    Ok(regions)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{build_grid_graph, MonthKey, ParkDataset, VisitRecord};
    use crate::tensor::Tensor;

    fn yearly_dataset(years: std::ops::RangeInclusive<i32>) -> ParkDataset {
        let months: Vec<MonthKey> = years
            .flat_map(|y| (1..=12).map(move |m| MonthKey::new(y, m).unwrap()))
            .collect();
        let dynamic = months.iter().map(|_| Tensor::zeros(1, 1)).collect();
        ParkDataset::new(
            build_grid_graph(1, 1).unwrap(),
            months,
            Tensor::zeros(1, 1),
            dynamic,
            Vec::new(),
            None,
        )
        .unwrap()
    }

    #[test]
    fn window_three_prior_years() {
        let ds = yearly_dataset(2014..=2021);
        let (train, test) = window_split(&ds, 2017, 3).unwrap();
        let train_years: Vec<i32> = train.months().iter().map(|m| m.year).collect();
        assert!(train_years.iter().all(|&y| (2014..=2016).contains(&y)));
        assert_eq!(train.months().len(), 36);
        assert!(test.months().iter().all(|m| m.year == 2017));
        assert_eq!(test.months().len(), 12);
    }

    #[test]
    fn window_earlier_span() {
        let ds = yearly_dataset(2011..=2016);
        let (train, test) = window_split(&ds, 2014, 3).unwrap();
        let train_years: Vec<i32> = train.months().iter().map(|m| m.year).collect();
        assert!(train_years.iter().all(|&y| (2011..=2013).contains(&y)));
        assert!(test.months().iter().all(|m| m.year == 2014));
    }

    #[test]
    fn window_first_year_rejected() {
        let ds = yearly_dataset(2014..=2016);
        assert!(window_split(&ds, 2014, 3).is_err());
        assert!(window_split(&ds, 2013, 3).is_err());
    }

    #[test]
    fn window_partition_is_disjoint() {
        let ds = yearly_dataset(2014..=2018);
        let (train, test) = window_split(&ds, 2016, 3).unwrap();
        for m in test.months() {
            assert!(!train.months().contains(m));
        }
        let total = train.months().len() + test.months().len();
        assert_eq!(total, 24 + 12);
    }

    fn counted_dataset(counts: &[u64], rows: usize, cols: usize) -> ParkDataset {
        let month = MonthKey::new(2015, 1).unwrap();
        let mut visits = Vec::new();
        for (cell, &count) in counts.iter().enumerate() {
            for j in 0..count {
                visits.push(VisitRecord {
                    cell_id: cell as u32,
                    month,
                    visit_index: j as u32 + 1,
                    effort_km: 1.0,
                    detected: true,
                });
            }
        }
        ParkDataset::new(
            build_grid_graph(rows, cols).unwrap(),
            vec![month],
            Tensor::zeros(rows * cols, 1),
            vec![Tensor::zeros(rows * cols, 0)],
            visits,
            None,
        )
        .unwrap()
    }

    #[test]
    fn region_single_seed_no_growth() {
        let ds = counted_dataset(&[2, 7, 1, 0], 2, 2);
        let regions = select_high_risk_regions(&ds, 1, 1).unwrap();
        assert_eq!(regions, vec![vec![1]]);
    }

    #[test]
    fn region_growth_by_count_then_index() {
        let ds = counted_dataset(&[5, 1, 0, 0], 2, 2);
        let regions = select_high_risk_regions(&ds, 1, 3).unwrap();
        assert_eq!(regions, vec![vec![0, 1, 2]]);
    }

    #[test]
    fn region_count_and_size_caps() {
        let ds = counted_dataset(&(0..36).map(|i| (i * 7) % 11).collect::<Vec<_>>(), 6, 6);
        let regions = select_high_risk_regions(&ds, 20, 25).unwrap();
        assert_eq!(regions.len(), 20);
        assert!(regions.iter().all(|r| r.len() <= 25));
        assert!(select_high_risk_regions(&ds, 37, 25).is_err());
    }

    #[test]
    fn region_selection_deterministic() {
        let ds = counted_dataset(&[3, 3, 3, 3, 0, 1, 2, 0, 5], 3, 3);
        let a = select_high_risk_regions(&ds, 4, 4).unwrap();
        let b = select_high_risk_regions(&ds, 4, 4).unwrap();
        assert_eq!(a, b);
    }
}
