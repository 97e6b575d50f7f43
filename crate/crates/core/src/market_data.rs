//! Time-series loading, alignment and windowing.
//!
//! Returns are simple percentage changes. A [`ReturnPanel`] is a dense
//! dates × series matrix; missing cells hold `NaN` and are flagged in the
//! missing mask. Windows handed to model fitting must be gap-free.

use std::collections::BTreeSet;
use std::io::{Read, Write};
use std::path::Path;

use chrono::NaiveDate;
use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Rows per calendar month, used only as a documented convention when
/// translating "6m"/"12m" style windows into row counts.
pub const ROWS_PER_MONTH: usize = 21;

#[derive(Debug, Clone, PartialEq)]
pub struct RawSeries {
    name: String,
    observations: Vec<(NaiveDate, f64)>,
}

impl RawSeries {
    pub fn new(name: impl Into<String>, observations: Vec<(NaiveDate, f64)>) -> Result<Self> {
        let name = name.into();
        if observations.is_empty() {
            return Err(Error::TooShort { needed: 1, got: 0 });
        }
        if observations.windows(2).any(|w| w[0].0 >= w[1].0) {
            return Err(Error::UnorderedDates(name));
        }
        if let Some((d, _)) = observations.iter().find(|(_, v)| !v.is_finite()) {
            return Err(Error::InvalidInput(format!("non-finite value in `{name}` at {d}")));
        }
        Ok(Self { name, observations })
    }

    pub fn name(&self) -> &str {
        &self.name
    }

    pub fn observations(&self) -> &[(NaiveDate, f64)] {
        &self.observations
    }

    pub fn len(&self) -> usize {
        self.observations.len()
    }

    pub fn is_empty(&self) -> bool {
        self.observations.is_empty()
    }

    pub fn values(&self) -> Vec<f64> {
        self.observations.iter().map(|(_, v)| *v).collect()
    }

    pub fn dates(&self) -> Vec<NaiveDate> {
        self.observations.iter().map(|(d, _)| *d).collect()
    }
}

/// Percentage change `level(t) / level(t-1) - 1`, one fewer observation.
pub fn to_returns(series: &RawSeries) -> Result<RawSeries> {
    let obs = series.observations();
    if obs.len() < 2 {
        return Err(Error::TooShort { needed: 2, got: obs.len() });
    }
    let mut out = Vec::with_capacity(obs.len() - 1);
    for w in obs.windows(2) {
        let (prev_date, prev) = w[0];
        if prev == 0.0 {
            return Err(Error::DivisionByZero(prev_date));
        }
        out.push((w[1].0, w[1].1 / prev - 1.0));
    }
    RawSeries::new(series.name.clone(), out)
}

/// Rebuild levels from returns by cumulative product, starting at `base`.
pub fn cumulative_levels(returns: &RawSeries, base: f64) -> Vec<f64> {
    let mut level = base;
    let mut out = Vec::with_capacity(returns.len() + 1);
    out.push(level);
    for (_, r) in returns.observations() {
        level *= 1.0 + r;
        out.push(level);
    }
    out
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AlignPolicy {
    Inner,
    ForwardFill,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ReturnPanel {
    dates: Vec<NaiveDate>,
    names: Vec<String>,
    values: DMatrix<f64>,
    missing: DMatrix<bool>,
}

impl ReturnPanel {
    /// Build a panel; `NaN` cells are treated as missing, infinities are rejected.
    pub fn new(dates: Vec<NaiveDate>, names: Vec<String>, values: DMatrix<f64>) -> Result<Self> {
        if values.nrows() != dates.len() || values.ncols() != names.len() {
            return Err(Error::ShapeMismatch(format!(
                "panel values {}x{} vs {} dates, {} names",
                values.nrows(),
                values.ncols(),
                dates.len(),
                names.len()
            )));
        }
        if dates.windows(2).any(|w| w[0] >= w[1]) {
            return Err(Error::UnorderedDates("<panel>".into()));
        }
        if values.iter().any(|v| v.is_infinite()) {
            return Err(Error::InvalidInput("panel contains infinite values".into()));
        }
        let missing = values.map(|v| v.is_nan());
        Ok(Self { dates, names, values, missing })
    }

    /// Build from columns of equal length.
    pub fn from_columns(dates: Vec<NaiveDate>, names: Vec<String>, columns: &[Vec<f64>]) -> Result<Self> {
        let t = dates.len();
        if columns.len() != names.len() || columns.iter().any(|c| c.len() != t) {
            return Err(Error::ShapeMismatch("column lengths disagree with dates/names".into()));
        }
        let values = DMatrix::from_fn(t, columns.len(), |i, j| columns[j][i]);
        Self::new(dates, names, values)
    }

    pub fn dates(&self) -> &[NaiveDate] {
        &self.dates
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn values(&self) -> &DMatrix<f64> {
        &self.values
    }

    pub fn missing(&self) -> &DMatrix<bool> {
        &self.missing
    }

    pub fn n_rows(&self) -> usize {
        self.dates.len()
    }

    pub fn n_cols(&self) -> usize {
        self.names.len()
    }

    pub fn has_missing(&self) -> bool {
        self.missing.iter().any(|m| *m)
    }

    pub fn index_of(&self, name: &str) -> Result<usize> {
        self.names
            .iter()
            .position(|n| n == name)
            .ok_or_else(|| Error::UnknownSeries(name.to_string()))
    }

    pub fn row_of(&self, date: NaiveDate) -> Result<usize> {
        self.dates.binary_search(&date).map_err(|_| Error::DateNotFound(date))
    }

    pub fn column(&self, j: usize) -> Vec<f64> {
        self.values.column(j).iter().copied().collect()
    }

    pub fn column_by_name(&self, name: &str) -> Result<Vec<f64>> {
        Ok(self.column(self.index_of(name)?))
    }

    /// Columns in the given order.
    pub fn select(&self, names: &[String]) -> Result<Self> {
        let idx: Vec<usize> = names.iter().map(|n| self.index_of(n)).collect::<Result<_>>()?;
        let values = DMatrix::from_fn(self.n_rows(), idx.len(), |i, j| self.values[(i, idx[j])]);
        let missing = DMatrix::from_fn(self.n_rows(), idx.len(), |i, j| self.missing[(i, idx[j])]);
        Ok(Self { dates: self.dates.clone(), names: names.to_vec(), values, missing })
    }

    /// Rows `start..end` as a contiguous block.
    pub fn rows(&self, start: usize, end: usize) -> Self {
        let len = end - start;
        Self {
            dates: self.dates[start..end].to_vec(),
            names: self.names.clone(),
            values: self.values.rows(start, len).into_owned(),
            missing: self.missing.rows(start, len).into_owned(),
        }
    }

    /// Error on the first missing cell (row-major order).
    pub fn ensure_complete(&self) -> Result<()> {
        for i in 0..self.n_rows() {
            for j in 0..self.n_cols() {
                if self.missing[(i, j)] {
                    return Err(Error::MissingData { name: self.names[j].clone(), date: self.dates[i] });
                }
            }
        }
        Ok(())
    }

    /// Replace one cell; used by mutation tests and data repair tools.
    pub fn set(&mut self, row: usize, col: usize, value: f64) {
        self.values[(row, col)] = value;
        self.missing[(row, col)] = value.is_nan();
    }

    pub fn write_csv<W: Write>(&self, out: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        let csv_err = |e: csv::Error| Error::Csv { path: "<output>".into(), reason: e.to_string() };
        let mut header = vec!["date".to_string()];
        header.extend(self.names.iter().cloned());
        w.write_record(&header).map_err(csv_err)?;
        for (i, d) in self.dates.iter().enumerate() {
            let mut rec = vec![d.to_string()];
            for j in 0..self.n_cols() {
                rec.push(if self.missing[(i, j)] { String::new() } else { self.values[(i, j)].to_string() });
            }
            w.write_record(&rec).map_err(csv_err)?;
        }
        w.flush().map_err(|e| Error::Io { path: "<output>".into(), source: e })?;
        Ok(())
    }
}

/// Align several series on a common date index; column order follows input order.
pub fn align(series: &[RawSeries], policy: AlignPolicy) -> Result<ReturnPanel> {
    if series.is_empty() {
        return Err(Error::InvalidInput("no series to align".into()));
    }
    let dates: Vec<NaiveDate> = match policy {
        AlignPolicy::Inner => {
            let mut common: BTreeSet<NaiveDate> = series[0].dates().into_iter().collect();
            for s in &series[1..] {
                let ds: BTreeSet<NaiveDate> = s.dates().into_iter().collect();
                common = common.intersection(&ds).copied().collect();
            }
            if common.len() < 2 {
                return Err(Error::EmptyIntersection);
            }
            common.into_iter().collect()
        }
        AlignPolicy::ForwardFill => {
            let all: BTreeSet<NaiveDate> = series.iter().flat_map(|s| s.dates()).collect();
            all.into_iter().collect()
        }
    };
    let mut values = DMatrix::from_element(dates.len(), series.len(), f64::NAN);
    for (j, s) in series.iter().enumerate() {
        let obs = s.observations();
        let mut k = 0;
        let mut last: Option<f64> = None;
        for (i, d) in dates.iter().enumerate() {
            while k < obs.len() && obs[k].0 <= *d {
                last = Some(obs[k].1);
                k += 1;
            }
            let exact = k > 0 && obs[k - 1].0 == *d;
            values[(i, j)] = match policy {
                AlignPolicy::Inner => obs[k - 1].1,
                AlignPolicy::ForwardFill if exact => obs[k - 1].1,
                AlignPolicy::ForwardFill => last.unwrap_or(f64::NAN),
            };
        }
    }
    let names = series.iter().map(|s| s.name().to_string()).collect();
    ReturnPanel::new(dates, names, values)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct WindowSpec {
    pub end: NaiveDate,
    pub length: usize,
    #[serde(default)]
    pub lag: usize,
}

impl WindowSpec {
    pub fn new(end: NaiveDate, length: usize, lag: usize) -> Self {
        Self { end, length, lag }
    }
}

fn window_start(panel: &ReturnPanel, spec: &WindowSpec, extra: usize) -> Result<(usize, usize)> {
    if spec.length < 2 {
        return Err(Error::InvalidInput("window length must be at least 2".into()));
    }
    let end = panel.row_of(spec.end)? + 1;
    let needed = spec.length + extra;
    if end < needed {
        return Err(Error::InsufficientHistory { needed, available: end });
    }
    Ok((end - spec.length, end))
}

/// Exactly `spec.length` rows ending at `spec.end` (inclusive). Missing cells are an error.
pub fn slice_window(panel: &ReturnPanel, spec: &WindowSpec) -> Result<ReturnPanel> {
    let (start, end) = window_start(panel, spec, 0)?;
    let out = panel.rows(start, end);
    out.ensure_complete()?;
    Ok(out)
}

/// Paired view for lagged regressions: row `i` pairs `drivers` at `t - lag`
/// with `targets` at `t`, for the `length` target dates ending at `end`.
#[derive(Debug, Clone)]
pub struct LaggedWindow {
    pub drivers: ReturnPanel,
    pub targets: ReturnPanel,
}

pub fn lagged_window(drivers: &ReturnPanel, targets: &ReturnPanel, spec: &WindowSpec) -> Result<LaggedWindow> {
    if drivers.dates() != targets.dates() {
        return Err(Error::ShapeMismatch("driver and target panels must share a date index".into()));
    }
    let (start, end) = window_start(targets, spec, spec.lag)?;
    let t = targets.rows(start, end);
    let d = drivers.rows(start - spec.lag, end - spec.lag);
    t.ensure_complete()?;
    d.ensure_complete()?;
    Ok(LaggedWindow { drivers: d, targets: t })
}

/// Whether a CSV file holds price levels or already-computed returns.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum InputKind {
    Prices,
    Returns,
}

/// Read a `date,<series...>` CSV into one [`RawSeries`] per column. Empty cells are skipped.
pub fn read_series_csv<R: Read>(input: R, label: &str) -> Result<Vec<RawSeries>> {
    let csv_err = |reason: String| Error::Csv { path: label.to_string(), reason };
    let mut rdr = csv::ReaderBuilder::new().has_headers(true).trim(csv::Trim::All).from_reader(input);
    let headers = rdr.headers().map_err(|e| csv_err(e.to_string()))?.clone();
    if headers.is_empty() || !headers[0].eq_ignore_ascii_case("date") {
        return Err(csv_err("first column must be `date`".into()));
    }
    let names: Vec<String> = headers.iter().skip(1).map(str::to_string).collect();
    let mut obs: Vec<Vec<(NaiveDate, f64)>> = vec![Vec::new(); names.len()];
    for (line, rec) in rdr.records().enumerate() {
        let rec = rec.map_err(|e| csv_err(e.to_string()))?;
        let date = NaiveDate::parse_from_str(&rec[0], "%Y-%m-%d")
            .map_err(|e| csv_err(format!("row {}: bad date `{}`: {e}", line + 2, &rec[0])))?;
        for (j, cell) in rec.iter().skip(1).enumerate().take(names.len()) {
            if cell.is_empty() {
                continue;
            }
            let v: f64 = cell
                .parse()
                .map_err(|_| csv_err(format!("row {}: bad number `{cell}`", line + 2)))?;
            obs[j].push((date, v));
        }
    }
    names.into_iter().zip(obs).map(|(n, o)| RawSeries::new(n, o)).collect()
}

pub fn read_panel<R: Read>(input: R, label: &str, kind: InputKind, policy: AlignPolicy) -> Result<ReturnPanel> {
    let mut series = read_series_csv(input, label)?;
    if kind == InputKind::Prices {
        series = series.iter().map(to_returns).collect::<Result<_>>()?;
    }
    align(&series, policy)
}

pub fn read_panel_file(path: &Path, kind: InputKind, policy: AlignPolicy) -> Result<ReturnPanel> {
    let file = std::fs::File::open(path).map_err(|e| Error::Io { path: path.display().to_string(), source: e })?;
    read_panel(file, &path.display().to_string(), kind, policy)
}
