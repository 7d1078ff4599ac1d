//! Rolling-window evaluation of combination methods on a matrix of forecast
//! errors.
//!
//! Row `t` holds the errors of forecasts for period `t`, made `h` periods
//! earlier. The weights used at `t` are estimated on rows
//! `t-h-m+1 ..= t-h`, the last rows whose outcomes are known when the
//! forecast is made.

use std::ops::Range;

use nalgebra::DMatrix;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::combination::{diebold_mariano, msfe_empirical, CombinationWeights, DieboldMariano};
use crate::error::{Error, Result};
use crate::estimator::{estimate, EstimatorConfig, Method};
use crate::regime::RegimeSegmentation;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RollingConfig {
    pub methods: Vec<Method>,
    /// Estimation window length `m`.
    pub window: usize,
    pub horizon: usize,
    /// Rows at which a new regime starts.
    pub breaks: Vec<usize>,
    pub estimator: EstimatorConfig,
    pub rd_tuning: RdTuning,
}

/// When RD-Factor GLASSO picks `(α, β)` during a rolling evaluation.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RdTuning {
    /// On the first window that fits, then held fixed.
    #[default]
    FirstWindow,
    EveryWindow,
}

impl Default for RollingConfig {
    fn default() -> Self {
        RollingConfig {
            methods: vec![Method::Ew, Method::Glasso, Method::FactorGlasso],
            window: 40,
            horizon: 1,
            breaks: Vec::new(),
            estimator: EstimatorConfig::default(),
            rd_tuning: RdTuning::default(),
        }
    }
}

/// Rows scored: `m + h - 1 .. T`.
pub fn test_rows(n: usize, window: usize, horizon: usize) -> Range<usize> {
    (window + horizon - 1).min(n)..n
}

/// Estimation rows for test row `t`.
pub fn window_rows(t: usize, window: usize, horizon: usize) -> Range<usize> {
    let end = t + 1 - horizon;
    end - window..end
}

/// Regime index of row `t` given the sorted regime starts.
pub fn regime_at(breaks: &[usize], t: usize) -> usize {
    breaks.iter().filter(|&&b| b <= t).count()
}

/// Segmentation of the window `rows` by the breaks strictly inside it.
/// Breaks that would leave a regime shorter than two rows are skipped.
pub fn window_segmentation(breaks: &[usize], rows: &Range<usize>) -> Result<RegimeSegmentation> {
    let mut local = Vec::new();
    let mut start = 0;
    let len = rows.end - rows.start;
    for &b in breaks {
        if b > rows.start && b < rows.end {
            let l = b - rows.start;
            if l >= start + 2 && len >= l + 2 {
                local.push(l);
                start = l;
            }
        }
    }
    RegimeSegmentation::from_breaks(len, &local)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PeriodRecord {
    pub row: usize,
    /// Regime active at `row`.
    pub regime: usize,
    pub weights: Vec<f64>,
    /// `w'e_t`.
    pub combined_error: f64,
    /// Estimation failed and equal weights were used instead.
    pub fallback: bool,
    pub converged: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MethodReport {
    pub method: Method,
    pub msfe: f64,
    pub msfe_ratio_to_ew: f64,
    /// Against EW; `None` with fewer than the minimum number of periods.
    pub dm: Option<DieboldMariano>,
    pub n_periods: usize,
    pub failed_rows: Vec<usize>,
    pub non_converged_rows: Vec<usize>,
    /// Some window failed and fell back to equal weights.
    pub partial: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RollingResult {
    pub rows: Vec<usize>,
    pub reports: Vec<MethodReport>,
    /// `records[k]` belongs to `reports[k].method`.
    pub records: Vec<Vec<PeriodRecord>>,
}

impl RollingResult {
    pub fn report(&self, method: Method) -> Option<&MethodReport> {
        self.reports.iter().find(|r| r.method == method)
    }

    pub fn records_for(&self, method: Method) -> Option<&[PeriodRecord]> {
        self.reports
            .iter()
            .position(|r| r.method == method)
            .map(|k| self.records[k].as_slice())
    }

    pub fn any_non_converged(&self) -> bool {
        self.reports
            .iter()
            .any(|r| !r.non_converged_rows.is_empty())
    }

    pub fn any_partial(&self) -> bool {
        self.reports.iter().any(|r| r.partial)
    }
}

fn validate(n: usize, p: usize, cfg: &RollingConfig) -> Result<()> {
    if cfg.methods.is_empty() {
        return Err(Error::InvalidParameter("no methods requested".into()));
    }
    if cfg.horizon == 0 {
        return Err(Error::InvalidParameter("horizon must be >= 1".into()));
    }
    if cfg.window < 4 {
        return Err(Error::InvalidParameter(format!(
            "window must be >= 4, got {}",
            cfg.window
        )));
    }
    if cfg.window + cfg.horizon > n {
        return Err(Error::InvalidParameter(format!(
            "window {} plus horizon {} leaves no test period in a sample of {n}",
            cfg.window, cfg.horizon
        )));
    }
    if p < 2 {
        return Err(Error::Dimension(format!(
            "need at least two forecasters, got {p}"
        )));
    }
    if cfg.breaks.windows(2).any(|w| w[0] >= w[1]) || cfg.breaks.iter().any(|&b| b == 0 || b >= n) {
        return Err(Error::InvalidParameter(
            "breaks must be increasing and inside the sample".into(),
        ));
    }
    Ok(())
}

fn combined(errors: &DMatrix<f64>, row: usize, w: &[f64]) -> f64 {
    errors.row(row).iter().zip(w).map(|(e, w)| e * w).sum()
}

fn run_method(
    errors: &DMatrix<f64>,
    method: Method,
    cfg: &RollingConfig,
) -> Result<Vec<PeriodRecord>> {
    let (n, p) = errors.shape();
    let ew = CombinationWeights::equal(p, "ew").weights;
    let hold_pair = method == Method::RdFactorGlasso && cfg.rd_tuning == RdTuning::FirstWindow;
    let mut est_cfg = cfg.estimator.clone();
    let mut out = Vec::new();
    for t in test_rows(n, cfg.window, cfg.horizon) {
        let rows = window_rows(t, cfg.window, cfg.horizon);
        let sample = errors.rows(rows.start, rows.len()).into_owned();
        let seg = window_segmentation(&cfg.breaks, &rows)?;
        let (weights, fallback, converged) = match estimate(method, &sample, &seg, &est_cfg) {
            Ok(est) => {
                if hold_pair && est_cfg.rd.fixed_pair.is_none() {
                    est_cfg.rd.fixed_pair = est.rd_pair;
                }
                (est.weights.weights, false, est.converged)
            }
            Err(e) => {
                log::warn!(
                    "{method}: window ending at row {} failed: {e}",
                    rows.end - 1
                );
                (ew.clone(), true, true)
            }
        };
        out.push(PeriodRecord {
            row: t,
            regime: regime_at(&cfg.breaks, t),
            combined_error: combined(errors, t, &weights),
            weights,
            fallback,
            converged,
        });
    }
    Ok(out)
}

/// Runs every method over the rolling windows; methods run in parallel.
pub fn rolling_evaluate(errors: &DMatrix<f64>, cfg: &RollingConfig) -> Result<RollingResult> {
    let (n, p) = errors.shape();
    validate(n, p, cfg)?;
    if let Some(v) = errors.iter().find(|v| !v.is_finite()) {
        return Err(Error::Data(format!("non-finite forecast error {v}")));
    }
    let rows: Vec<usize> = test_rows(n, cfg.window, cfg.horizon).collect();
    let ew_loss: Vec<f64> = rows
        .iter()
        .map(|&t| {
            let e = errors.row(t).mean();
            e * e
        })
        .collect();
    let ew_msfe = ew_loss.iter().sum::<f64>() / ew_loss.len() as f64;

    let records = cfg
        .methods
        .par_iter()
        .map(|&m| run_method(errors, m, cfg))
        .collect::<Result<Vec<_>>>()?;

    let reports = cfg
        .methods
        .iter()
        .zip(&records)
        .map(|(&method, recs)| {
            let combined: Vec<f64> = recs.iter().map(|r| r.combined_error).collect();
            let loss: Vec<f64> = combined.iter().map(|e| e * e).collect();
            let msfe = msfe_empirical(&combined);
            let dm = diebold_mariano(&loss, &ew_loss, cfg.horizon).ok();
            MethodReport {
                method,
                msfe,
                msfe_ratio_to_ew: msfe / ew_msfe,
                dm,
                n_periods: recs.len(),
                failed_rows: recs.iter().filter(|r| r.fallback).map(|r| r.row).collect(),
                non_converged_rows: recs
                    .iter()
                    .filter(|r| !r.converged)
                    .map(|r| r.row)
                    .collect(),
                partial: recs.iter().any(|r| r.fallback),
            }
        })
        .collect();
    Ok(RollingResult {
        rows,
        reports,
        records,
    })
}
