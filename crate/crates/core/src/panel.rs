//! Forecast panels read from CSV (`period,actual,<forecaster>...`) and
//! weight tables written back to CSV.

use std::collections::HashSet;
use std::io::{Read, Write};

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Forecasters missing more than this share of periods are dropped.
pub const MAX_MISSING_SHARE: f64 = 0.5;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ImputePolicy {
    /// Any remaining missing cell is an error.
    #[default]
    Reject,
    ColumnMean,
    /// Last observed value; leading gaps take the first observed value.
    CarryForward,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ForecastPanel {
    pub periods: Vec<String>,
    pub actual: Vec<f64>,
    pub names: Vec<String>,
    /// `T × p`.
    pub forecasts: DMatrix<f64>,
}

impl ForecastPanel {
    pub fn new(
        periods: Vec<String>,
        actual: Vec<f64>,
        names: Vec<String>,
        forecasts: DMatrix<f64>,
    ) -> Result<Self> {
        if periods.len() != actual.len()
            || forecasts.nrows() != actual.len()
            || forecasts.ncols() != names.len()
        {
            return Err(Error::Dimension(format!(
                "{} periods, {} actuals, {} names, forecasts {}x{}",
                periods.len(),
                actual.len(),
                names.len(),
                forecasts.nrows(),
                forecasts.ncols()
            )));
        }
        Ok(ForecastPanel {
            periods,
            actual,
            names,
            forecasts,
        })
    }

    pub fn n_periods(&self) -> usize {
        self.actual.len()
    }

    pub fn n_forecasters(&self) -> usize {
        self.names.len()
    }

    /// `e_{t,i} = ŷ_{t,i} - y_t`.
    pub fn errors(&self) -> DMatrix<f64> {
        DMatrix::from_fn(self.n_periods(), self.n_forecasters(), |t, i| {
            self.forecasts[(t, i)] - self.actual[t]
        })
    }

    pub fn period_index(&self, label: &str) -> Option<usize> {
        self.periods.iter().position(|p| p == label)
    }
}

/// What ingestion changed.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct IngestReport {
    pub dropped: Vec<String>,
    pub imputed_cells: usize,
}

fn parse_cell(raw: &str, row: usize, col: &str) -> Result<Option<f64>> {
    let s = raw.trim();
    if s.is_empty() || s.eq_ignore_ascii_case("na") || s.eq_ignore_ascii_case("nan") {
        return Ok(None);
    }
    match s.parse::<f64>() {
        Ok(v) if v.is_finite() => Ok(Some(v)),
        _ => Err(Error::Data(format!(
            "row {row}, column {col:?}: cannot parse {s:?} as a number"
        ))),
    }
}

/// Reads a panel. Rows are numbered from 1 after the header in messages.
pub fn ingest_panel<R: Read>(
    reader: R,
    policy: ImputePolicy,
) -> Result<(ForecastPanel, IngestReport)> {
    let mut rdr = csv::ReaderBuilder::new()
        .trim(csv::Trim::All)
        .from_reader(reader);
    let header: Vec<String> = rdr.headers()?.iter().map(str::to_string).collect();
    if header.len() < 3 || header[0] != "period" || header[1] != "actual" {
        return Err(Error::Data(
            "header must be `period,actual,<forecaster_1>,...` with at least one forecaster".into(),
        ));
    }
    let names: Vec<String> = header[2..].to_vec();
    if let Some(dup) = names
        .iter()
        .enumerate()
        .find(|(i, n)| names[..*i].contains(n))
    {
        return Err(Error::Data(format!(
            "duplicate forecaster column {:?}",
            dup.1
        )));
    }

    let mut periods = Vec::new();
    let mut actual = Vec::new();
    let mut cells: Vec<Vec<Option<f64>>> = Vec::new();
    let mut seen = HashSet::new();
    for (k, rec) in rdr.records().enumerate() {
        let row = k + 1;
        let rec = rec?;
        if rec.len() != header.len() {
            return Err(Error::Data(format!(
                "row {row}: expected {} fields, found {}",
                header.len(),
                rec.len()
            )));
        }
        let period = rec[0].to_string();
        if period.is_empty() {
            return Err(Error::Data(format!("row {row}: empty period label")));
        }
        if !seen.insert(period.clone()) {
            return Err(Error::Data(format!(
                "row {row}: duplicate period {period:?}"
            )));
        }
        let y = parse_cell(&rec[1], row, "actual")?
            .ok_or_else(|| Error::Data(format!("row {row}: missing actual value")))?;
        let fc = names
            .iter()
            .enumerate()
            .map(|(i, n)| parse_cell(&rec[i + 2], row, n))
            .collect::<Result<Vec<_>>>()?;
        periods.push(period);
        actual.push(y);
        cells.push(fc);
    }
    let t = periods.len();
    if t == 0 {
        return Err(Error::Data("panel has no rows".into()));
    }

    let mut report = IngestReport::default();
    let mut keep = Vec::new();
    for (i, name) in names.iter().enumerate() {
        let missing = cells.iter().filter(|r| r[i].is_none()).count();
        if missing == t {
            return Err(Error::Data(format!(
                "forecaster {name:?} has no observations"
            )));
        }
        if missing as f64 > MAX_MISSING_SHARE * t as f64 {
            log::info!("dropping forecaster {name:?}: {missing} of {t} periods missing");
            report.dropped.push(name.clone());
        } else {
            keep.push(i);
        }
    }
    if keep.len() < 2 {
        return Err(Error::Data(format!(
            "{} forecasters left after filtering; need 2",
            keep.len()
        )));
    }

    let mut forecasts = DMatrix::<f64>::zeros(t, keep.len());
    for (c, &i) in keep.iter().enumerate() {
        let col: Vec<Option<f64>> = cells.iter().map(|r| r[i]).collect();
        let observed: Vec<f64> = col.iter().flatten().copied().collect();
        let mean = observed.iter().sum::<f64>() / observed.len() as f64;
        let first = observed[0];
        let mut last: Option<f64> = None;
        for (r, v) in col.iter().enumerate() {
            let value = match (*v, policy) {
                (Some(v), _) => {
                    last = Some(v);
                    v
                }
                (None, ImputePolicy::Reject) => {
                    return Err(Error::Data(format!(
                        "row {}, forecaster {:?}: missing value and imputation is disabled",
                        r + 1,
                        names[i]
                    )))
                }
                (None, ImputePolicy::ColumnMean) => mean,
                (None, ImputePolicy::CarryForward) => last.unwrap_or(first),
            };
            if v.is_none() {
                report.imputed_cells += 1;
            }
            forecasts[(r, c)] = value;
        }
    }
    let kept_names = keep.iter().map(|&i| names[i].clone()).collect();
    Ok((
        ForecastPanel::new(periods, actual, kept_names, forecasts)?,
        report,
    ))
}

/// One row of a weights table.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WeightRow {
    pub period: String,
    pub method: String,
    pub regime: usize,
    pub weights: Vec<f64>,
}

/// Writes `period,method,regime,<names>...`. Values use the shortest
/// representation that parses back to the same `f64`.
pub fn write_weights_csv<W: Write>(writer: W, names: &[String], rows: &[WeightRow]) -> Result<()> {
    let mut w = csv::Writer::from_writer(writer);
    let mut header = vec![
        "period".to_string(),
        "method".to_string(),
        "regime".to_string(),
    ];
    header.extend(names.iter().cloned());
    w.write_record(&header)?;
    for r in rows {
        if r.weights.len() != names.len() {
            return Err(Error::Dimension(format!(
                "{} weights for {} forecasters",
                r.weights.len(),
                names.len()
            )));
        }
        let mut rec = vec![r.period.clone(), r.method.clone(), r.regime.to_string()];
        rec.extend(r.weights.iter().map(|v| v.to_string()));
        w.write_record(&rec)?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_weights_csv<R: Read>(reader: R) -> Result<(Vec<String>, Vec<WeightRow>)> {
    let mut rdr = csv::Reader::from_reader(reader);
    let header: Vec<String> = rdr.headers()?.iter().map(str::to_string).collect();
    if header.len() < 4 || header[..3] != ["period", "method", "regime"] {
        return Err(Error::Data(
            "weights header must start with period,method,regime".into(),
        ));
    }
    let names = header[3..].to_vec();
    let mut rows = Vec::new();
    for (k, rec) in rdr.records().enumerate() {
        let rec = rec?;
        let regime = rec[2]
            .parse::<usize>()
            .map_err(|_| Error::Data(format!("row {}: bad regime {:?}", k + 1, &rec[2])))?;
        let weights = (3..rec.len())
            .map(|i| {
                parse_cell(&rec[i], k + 1, &header[i])?
                    .ok_or_else(|| Error::Data(format!("row {}: missing weight", k + 1)))
            })
            .collect::<Result<Vec<_>>>()?;
        rows.push(WeightRow {
            period: rec[0].to_string(),
            method: rec[1].to_string(),
            regime,
            weights,
        });
    }
    Ok((names, rows))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    const CSV: &str = "period,actual,a,b,c\n\
                       2000Q1,1.0,1.5,,2.0\n\
                       2000Q2,2.0,,2.5,1.0\n\
                       2000Q3,1.5,1.0,,1.0\n\
                       2000Q4,1.0,2.0,,0.0\n";

    #[test]
    fn complete_panel_passes_through() {
        let csv = "period,actual,a,b\n1,1,2,3\n2,2,3,4\n";
        let (p, rep) = ingest_panel(csv.as_bytes(), ImputePolicy::Reject).unwrap();
        assert_eq!(
            p.forecasts,
            DMatrix::from_row_slice(2, 2, &[2.0, 3.0, 3.0, 4.0])
        );
        assert_eq!(rep, IngestReport::default());
        assert_eq!(
            p.errors(),
            DMatrix::from_row_slice(2, 2, &[1.0, 2.0, 1.0, 2.0])
        );
    }

    #[test]
    fn sparse_forecaster_dropped_then_mean_imputed() {
        // b misses 3 of 4 periods (75%) and is dropped; a misses one.
        let (p, rep) = ingest_panel(CSV.as_bytes(), ImputePolicy::ColumnMean).unwrap();
        assert_eq!(p.names, vec!["a", "c"]);
        assert_eq!(rep.dropped, vec!["b"]);
        assert_eq!(rep.imputed_cells, 1);
        assert!((p.forecasts[(1, 0)] - 1.5).abs() < 1e-15);
    }

    #[test]
    fn carry_forward_and_reject() {
        let (p, _) = ingest_panel(CSV.as_bytes(), ImputePolicy::CarryForward).unwrap();
        assert_eq!(p.forecasts[(1, 0)], 1.5);
        let lead = "period,actual,a,b\n1,1,,3\n2,2,4,4\n3,1,5,5\n";
        let (p, _) = ingest_panel(lead.as_bytes(), ImputePolicy::CarryForward).unwrap();
        assert_eq!(p.forecasts[(0, 0)], 4.0);
        assert!(ingest_panel(CSV.as_bytes(), ImputePolicy::Reject).is_err());
    }

    #[test]
    fn diagnostics() {
        let err = |s: &str| {
            ingest_panel(s.as_bytes(), ImputePolicy::ColumnMean)
                .unwrap_err()
                .to_string()
        };
        assert!(err("period,actual,a,b\n1,1,x,2\n").contains("row 1"));
        assert!(err("period,actual,a,b\n1,1,1,2\n1,1,1,2\n").contains("duplicate period"));
        assert!(err("period,actual,a,b\n1,1,,2\n2,1,,2\n").contains("no observations"));
        assert!(err("date,actual,a\n1,1,1\n").contains("header"));
        assert!(err("period,actual,a,b\n1,,1,2\n").contains("missing actual"));
    }

    proptest! {
        #[test]
        fn weights_round_trip(ws in prop::collection::vec(prop::collection::vec(-10.0f64..10.0, 3), 1..6)) {
            let names: Vec<String> = ["x", "y", "z"].iter().map(|s| s.to_string()).collect();
            let rows: Vec<WeightRow> = ws
                .iter()
                .enumerate()
                .map(|(i, w)| WeightRow { period: format!("p{i}"), method: "glasso".into(), regime: i % 2, weights: w.clone() })
                .collect();
            let mut buf = Vec::new();
            write_weights_csv(&mut buf, &names, &rows).unwrap();
            let (n2, r2) = read_weights_csv(buf.as_slice()).unwrap();
            prop_assert_eq!(n2, names);
            prop_assert_eq!(r2, rows);
        }
    }
}
