//! CSV load/save for park datasets.
//!
//! Schemas (headers required, LF line endings, UTF-8, decimal text):
//! - `cells.csv`: `cell_id,row,col,static_feature_1..k`
//! - `dynamics.csv`: `cell_id,year,month,dynamic_feature_1..m`
//! - `visits.csv`: `cell_id,year,month,visit_index,effort_km,detected`
//! - `ground_truth.csv` (optional): `cell_id,year,month,z`
//!
//! The `parse_*` functions each take raw bytes and perform all validation
//! that is possible within a single file; `load_dataset` adds the
//! cross-file checks. Saving writes floats with Rust's shortest
//! round-trip formatting, so save/load is lossless.

use std::path::Path;

use super::{build_grid_graph, GridGraph, MonthKey, ParkDataset, VisitRecord};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Hard ceilings against absurd header-driven allocations.
const MAX_GRID_DIM: usize = 4096;
const MAX_TABLE_ENTRIES: usize = 1 << 24;

#[derive(Debug)]
pub struct CellsTable {
    pub graph: GridGraph,
    /// N x k static covariates in cell-id order.
    pub static_features: Tensor,
}

#[derive(Debug)]
pub struct DynamicsTable {
    pub feature_count: usize,
    pub rows: Vec<(u32, MonthKey, Vec<f64>)>,
}

struct FileReader<'a> {
    file: &'a str,
    inner: csv::Reader<&'a [u8]>,
}

impl<'a> FileReader<'a> {
    fn new(file: &'a str, bytes: &'a [u8]) -> Self {
        let inner = csv::ReaderBuilder::new()
            .has_headers(true)
            .flexible(false)
            .from_reader(bytes);
        FileReader { file, inner }
    }

    fn parse_err(&self, line: u64, column: &str, message: impl Into<String>) -> Error {
        Error::Parse {
            file: self.file.to_string(),
            line,
            column: column.to_string(),
            message: message.into(),
        }
    }

    fn headers(&mut self) -> Result<Vec<String>> {
        match self.inner.headers() {
            Ok(h) => Ok(h.iter().map(str::to_string).collect()),
            Err(e) => Err(self.parse_err(1, "<header>", e.to_string())),
        }
    }

    /// Checks the fixed header prefix and the `<stem>_1..n` feature tail.
    fn check_header(&self, headers: &[String], fixed: &[&str], feature_stem: &str) -> Result<usize> {
        for (idx, want) in fixed.iter().enumerate() {
            let got = headers.get(idx).map(String::as_str).unwrap_or("<missing>");
            if got != *want {
                return Err(self.parse_err(
                    1,
                    want,
                    format!("expected header column '{want}', found '{got}'"),
                ));
            }
        }
        let tail = &headers[fixed.len().min(headers.len())..];
        for (i, name) in tail.iter().enumerate() {
            let want = format!("{feature_stem}_{}", i + 1);
            if *name != want {
                return Err(self.parse_err(
                    1,
                    name,
                    format!("expected feature column '{want}', found '{name}'"),
                ));
            }
        }
        Ok(tail.len())
    }

    fn records(&mut self) -> RecordIter<'_, 'a> {
        RecordIter { reader: self }
    }
}

struct RecordIter<'r, 'a> {
    reader: &'r mut FileReader<'a>,
}

struct Record<'a> {
    file: &'a str,
    line: u64,
    fields: csv::StringRecord,
}

impl<'r, 'a> RecordIter<'r, 'a> {
    fn next(&mut self) -> Result<Option<Record<'a>>> {
        let mut fields = csv::StringRecord::new();
        match self.reader.inner.read_record(&mut fields) {
            Ok(true) => {
                let line = fields.position().map_or(0, |p| p.line());
                Ok(Some(Record {
                    file: self.reader.file,
                    line,
                    fields,
                }))
            }
            Ok(false) => Ok(None),
            Err(e) => {
                let line = e.position().map_or(0, |p| p.line());
                Err(self.reader.parse_err(line, "<record>", e.to_string()))
            }
        }
    }
}

impl Record<'_> {
    fn field<T: std::str::FromStr>(&self, idx: usize, column: &str) -> Result<T> {
        let raw = self.fields.get(idx).ok_or_else(|| Error::Parse {
            file: self.file.to_string(),
            line: self.line,
            column: column.to_string(),
            message: "missing field".to_string(),
        })?;
        raw.parse().map_err(|_| Error::Parse {
            file: self.file.to_string(),
            line: self.line,
            column: column.to_string(),
            message: format!("cannot parse '{raw}'"),
        })
    }

    fn finite(&self, idx: usize, column: &str) -> Result<f64> {
        let v: f64 = self.field(idx, column)?;
        if !v.is_finite() {
            return Err(Error::Parse {
                file: self.file.to_string(),
                line: self.line,
                column: column.to_string(),
                message: format!("non-finite value {v}"),
            });
        }
        Ok(v)
    }

    fn month(&self, year_idx: usize, month_idx: usize) -> Result<MonthKey> {
        let year: i32 = self.field(year_idx, "year")?;
        let month: u8 = self.field(month_idx, "month")?;
        MonthKey::new(year, month).map_err(|e| Error::Parse {
            file: self.file.to_string(),
            line: self.line,
            column: "month".to_string(),
            message: e.to_string(),
        })
    }

    fn binary(&self, idx: usize, column: &str) -> Result<bool> {
        let v: u8 = self.field(idx, column)?;
        if v > 1 {
            return Err(Error::Parse {
                file: self.file.to_string(),
                line: self.line,
                column: column.to_string(),
                message: format!("expected 0 or 1, found {v}"),
            });
        }
        Ok(v == 1)
    }
}

/// Parses `cells.csv`: the grid layout plus static covariates.
pub fn parse_cells_csv(bytes: &[u8]) -> Result<CellsTable> {
    let mut reader = FileReader::new("cells.csv", bytes);
    let headers = reader.headers()?;
    let k = reader.check_header(&headers, &["cell_id", "row", "col"], "static_feature")?;

    let mut rows = Vec::new();
    let mut max_row = 0usize;
    let mut max_col = 0usize;
    let mut records = reader.records();
    while let Some(rec) = records.next()? {
        let cell: u32 = rec.field(0, "cell_id")?;
        let row: usize = rec.field(1, "row")?;
        let col: usize = rec.field(2, "col")?;
        if row >= MAX_GRID_DIM || col >= MAX_GRID_DIM {
            return Err(Error::Parse {
                file: "cells.csv".to_string(),
                line: rec.line,
                column: "row".to_string(),
                message: format!("grid position ({row},{col}) exceeds supported size"),
            });
        }
        let mut feats = Vec::with_capacity(k);
        for i in 0..k {
            feats.push(rec.finite(3 + i, &format!("static_feature_{}", i + 1))?);
        }
        max_row = max_row.max(row);
        max_col = max_col.max(col);
        rows.push((cell, row, col, feats, rec.line));
    }
    if rows.is_empty() {
        return Err(Error::schema("cells.csv", "no cell rows"));
    }
    let (grid_rows, grid_cols) = (max_row + 1, max_col + 1);
    let n = grid_rows * grid_cols;
    if n.saturating_mul(k.max(1)) > MAX_TABLE_ENTRIES {
        return Err(Error::schema(
            "cells.csv",
            format!("table of {n} cells x {k} features exceeds supported size"),
        ));
    }

    let mut seen = vec![false; n];
    let mut static_features = Tensor::zeros(n, k);
    for (cell, row, col, feats, line) in rows {
        let expected = (row * grid_cols + col) as u32;
        if cell != expected {
            return Err(Error::Parse {
                file: "cells.csv".to_string(),
                line,
                column: "cell_id".to_string(),
                message: format!(
                    "cell_id {cell} does not match row-major position ({row},{col}) = {expected}"
                ),
            });
        }
        if seen[cell as usize] {
            return Err(Error::Parse {
                file: "cells.csv".to_string(),
                line,
                column: "cell_id".to_string(),
                message: format!("duplicate cell_id {cell}"),
            });
        }
        seen[cell as usize] = true;
        static_features.row_mut(cell as usize).copy_from_slice(&feats);
    }
    if let Some(missing) = seen.iter().position(|s| !s) {
        return Err(Error::schema(
            "cells.csv",
            format!("missing row for cell {missing} of {grid_rows}x{grid_cols} grid"),
        ));
    }
    Ok(CellsTable {
        graph: build_grid_graph(grid_rows, grid_cols)?,
        static_features,
    })
}

/// Parses `dynamics.csv` rows; completeness is checked by `load_dataset`.
pub fn parse_dynamics_csv(bytes: &[u8]) -> Result<DynamicsTable> {
    let mut reader = FileReader::new("dynamics.csv", bytes);
    let headers = reader.headers()?;
    let m = reader.check_header(&headers, &["cell_id", "year", "month"], "dynamic_feature")?;

    let mut rows = Vec::new();
    let mut records = reader.records();
    while let Some(rec) = records.next()? {
        let cell: u32 = rec.field(0, "cell_id")?;
        let month = rec.month(1, 2)?;
        let mut feats = Vec::with_capacity(m);
        for i in 0..m {
            feats.push(rec.finite(3 + i, &format!("dynamic_feature_{}", i + 1))?);
        }
        rows.push((cell, month, feats));
    }
    Ok(DynamicsTable {
        feature_count: m,
        rows,
    })
}

/// Parses `visits.csv`; referential checks happen in `load_dataset`.
pub fn parse_visits_csv(bytes: &[u8]) -> Result<Vec<VisitRecord>> {
    let mut reader = FileReader::new("visits.csv", bytes);
    let headers = reader.headers()?;
    let extra = reader.check_header(
        &headers,
        &["cell_id", "year", "month", "visit_index", "effort_km", "detected"],
        "",
    )?;
    if extra != 0 {
        return Err(Error::schema("visits.csv", "unexpected trailing columns"));
    }

    let mut visits = Vec::new();
    let mut records = reader.records();
    while let Some(rec) = records.next()? {
        let cell_id: u32 = rec.field(0, "cell_id")?;
        let month = rec.month(1, 2)?;
        let visit_index: u32 = rec.field(3, "visit_index")?;
        if visit_index == 0 {
            return Err(Error::Parse {
                file: "visits.csv".to_string(),
                line: rec.line,
                column: "visit_index".to_string(),
                message: "visit_index is 1-based".to_string(),
            });
        }
        let effort_km = rec.finite(4, "effort_km")?;
        if effort_km < 0.0 {
            return Err(Error::Parse {
                file: "visits.csv".to_string(),
                line: rec.line,
                column: "effort_km".to_string(),
                message: format!("negative effort {effort_km}"),
            });
        }
        let detected = rec.binary(5, "detected")?;
        visits.push(VisitRecord {
            cell_id,
            month,
            visit_index,
            effort_km,
            detected,
        });
    }
    Ok(visits)
}

/// Parses `ground_truth.csv`; completeness is checked by `load_dataset`.
pub fn parse_ground_truth_csv(bytes: &[u8]) -> Result<Vec<(u32, MonthKey, u8)>> {
    let mut reader = FileReader::new("ground_truth.csv", bytes);
    let headers = reader.headers()?;
    let extra = reader.check_header(&headers, &["cell_id", "year", "month", "z"], "")?;
    if extra != 0 {
        return Err(Error::schema("ground_truth.csv", "unexpected trailing columns"));
    }

    let mut rows = Vec::new();
    let mut records = reader.records();
    while let Some(rec) = records.next()? {
        let cell: u32 = rec.field(0, "cell_id")?;
        let month = rec.month(1, 2)?;
        let z = rec.binary(3, "z")?;
        rows.push((cell, month, u8::from(z)));
    }
    Ok(rows)
}

fn read_file(dir: &Path, name: &str) -> Result<Vec<u8>> {
    let path = dir.join(name);
    std::fs::read(&path).map_err(|e| {
        if e.kind() == std::io::ErrorKind::NotFound {
            Error::MissingArtifact(path.display().to_string())
        } else {
            Error::Io(e)
        }
    })
}

/// Loads a dataset directory written by [`save_dataset`].
pub fn load_dataset(dir: &Path) -> Result<ParkDataset> {
    let cells = parse_cells_csv(&read_file(dir, "cells.csv")?)?;
    let dynamics = parse_dynamics_csv(&read_file(dir, "dynamics.csv")?)?;
    let visits = parse_visits_csv(&read_file(dir, "visits.csv")?)?;
    let n = cells.graph.node_count();

    let mut months: Vec<MonthKey> = dynamics.rows.iter().map(|r| r.1).collect();
    months.sort_unstable();
    months.dedup();
    if months.is_empty() {
        return Err(Error::schema("dynamics.csv", "no months present"));
    }
    if months.len() * n * dynamics.feature_count.max(1) > MAX_TABLE_ENTRIES {
        return Err(Error::schema(
            "dynamics.csv",
            "table exceeds supported size",
        ));
    }

    let mut dynamic_features: Vec<Tensor> =
        (0..months.len()).map(|_| Tensor::zeros(n, dynamics.feature_count)).collect();
    let mut seen: Vec<Vec<bool>> = (0..months.len()).map(|_| vec![false; n]).collect();
    for (cell, month, feats) in &dynamics.rows {
        if *cell as usize >= n {
            return Err(Error::schema(
                "dynamics.csv",
                format!("cell {cell} outside the {n}-cell grid"),
            ));
        }
        let t = months.binary_search(month).expect("month collected above");
        if seen[t][*cell as usize] {
            return Err(Error::schema(
                "dynamics.csv",
                format!("duplicate row for cell {cell} month {month}"),
            ));
        }
        seen[t][*cell as usize] = true;
        dynamic_features[t].row_mut(*cell as usize).copy_from_slice(feats);
    }
    for (t, month_seen) in seen.iter().enumerate() {
        if let Some(cell) = month_seen.iter().position(|s| !s) {
            return Err(Error::schema(
                "dynamics.csv",
                format!("missing row for cell {cell} month {}", months[t]),
            ));
        }
    }

    for v in &visits {
        if v.cell_id as usize >= n {
            return Err(Error::schema(
                "visits.csv",
                format!("visit references unknown cell_id {}", v.cell_id),
            ));
        }
        if months.binary_search(&v.month).is_err() {
            return Err(Error::schema(
                "visits.csv",
                format!("visit references month {} absent from dynamics.csv", v.month),
            ));
        }
    }

    let gt_path = dir.join("ground_truth.csv");
    let ground_truth_z = if gt_path.exists() {
        let rows = parse_ground_truth_csv(&std::fs::read(&gt_path)?)?;
        let mut z: Vec<Vec<u8>> = (0..months.len()).map(|_| vec![0u8; n]).collect();
        let mut filled: Vec<Vec<bool>> = (0..months.len()).map(|_| vec![false; n]).collect();
        for (cell, month, value) in rows {
            if cell as usize >= n {
                return Err(Error::schema(
                    "ground_truth.csv",
                    format!("cell {cell} outside the {n}-cell grid"),
                ));
            }
            let t = months.binary_search(&month).map_err(|_| {
                Error::schema(
                    "ground_truth.csv",
                    format!("month {month} absent from dynamics.csv"),
                )
            })?;
            if filled[t][cell as usize] {
                return Err(Error::schema(
                    "ground_truth.csv",
                    format!("duplicate row for cell {cell} month {month}"),
                ));
            }
            filled[t][cell as usize] = true;
            z[t][cell as usize] = value;
        }
        for (t, month_filled) in filled.iter().enumerate() {
            if let Some(cell) = month_filled.iter().position(|s| !s) {
                return Err(Error::schema(
                    "ground_truth.csv",
                    format!("missing row for cell {cell} month {}", months[t]),
                ));
            }
        }
        Some(z)
    } else {
        None
    };

    let dataset = ParkDataset::new(
        cells.graph,
        months,
        cells.static_features,
        dynamic_features,
        visits,
        ground_truth_z,
    )?;
    Ok(dataset)
}

fn fmt_f64(v: f64) -> String {
    // Shortest round-trip decimal; keeps save/load lossless.
    format!("{v}")
}

/// Writes the dataset CSVs into `dir` (created if needed).
pub fn save_dataset(ds: &ParkDataset, dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir)?;
    let n = ds.node_count();
    let cols = ds.graph().cols();

    let mut w = csv::Writer::from_path(dir.join("cells.csv")).map_err(csv_io)?;
    let mut header = vec!["cell_id".to_string(), "row".to_string(), "col".to_string()];
    header.extend((1..=ds.static_dim()).map(|i| format!("static_feature_{i}")));
    w.write_record(&header).map_err(csv_io)?;
    for cell in 0..n {
        let mut rec = vec![
            cell.to_string(),
            (cell / cols).to_string(),
            (cell % cols).to_string(),
        ];
        rec.extend(ds.static_features().row(cell).iter().map(|&v| fmt_f64(v)));
        w.write_record(&rec).map_err(csv_io)?;
    }
    w.flush()?;

    let mut w = csv::Writer::from_path(dir.join("dynamics.csv")).map_err(csv_io)?;
    let mut header = vec!["cell_id".to_string(), "year".to_string(), "month".to_string()];
    header.extend((1..=ds.dynamic_dim()).map(|i| format!("dynamic_feature_{i}")));
    w.write_record(&header).map_err(csv_io)?;
    for (t, month) in ds.months().iter().enumerate() {
        for cell in 0..n {
            let mut rec = vec![
                cell.to_string(),
                month.year.to_string(),
                month.month.to_string(),
            ];
            rec.extend(
                ds.dynamic_features(t)
                    .row(cell)
                    .iter()
                    .map(|&v| fmt_f64(v)),
            );
            w.write_record(&rec).map_err(csv_io)?;
        }
    }
    w.flush()?;

    let mut w = csv::Writer::from_path(dir.join("visits.csv")).map_err(csv_io)?;
    w.write_record(["cell_id", "year", "month", "visit_index", "effort_km", "detected"])
        .map_err(csv_io)?;
    for v in ds.visits() {
        w.write_record(&[
            v.cell_id.to_string(),
            v.month.year.to_string(),
            v.month.month.to_string(),
            v.visit_index.to_string(),
            fmt_f64(v.effort_km),
            u8::from(v.detected).to_string(),
        ])
        .map_err(csv_io)?;
    }
    w.flush()?;

    if let Some(z) = ds.ground_truth() {
        let mut w = csv::Writer::from_path(dir.join("ground_truth.csv")).map_err(csv_io)?;
        w.write_record(["cell_id", "year", "month", "z"]).map_err(csv_io)?;
        for (t, month) in ds.months().iter().enumerate() {
            for cell in 0..n {
                w.write_record(&[
                    cell.to_string(),
                    month.year.to_string(),
                    month.month.to_string(),
                    z[t][cell].to_string(),
                ])
                .map_err(csv_io)?;
            }
        }
        w.flush()?;
    }
    Ok(())
}

fn csv_io(e: csv::Error) -> Error {
    match e.into_kind() {
        csv::ErrorKind::Io(io) => Error::Io(io),
        other => Error::invalid(format!("csv write failure: {other:?}")),
    }
}
