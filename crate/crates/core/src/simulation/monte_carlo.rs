//! Monte Carlo harness for the factor-error and FAR designs.
//!
//! Every replication gets its own ChaCha stream derived from the master
//! seed, `T` and the replication index, so results do not depend on the
//! number of worker threads.

use std::fmt;

use log::{info, warn};
use nalgebra::DMatrix;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::backtest::{rolling_evaluate, RdTuning, RollingConfig};
use crate::combination::{precision_error, weight_error_l1, weights_from_matrix, MatrixNorm};
use crate::error::{Error, Result};
use crate::estimator::{estimate_with_truth, EstimatorConfig, Method};
use crate::factor_glasso::FactorCount;
use crate::rd_factor_glasso::RdCriterion;
use crate::simulation::dgp::{simulate_factor_errors, FactorErrorDgpSpec};
use crate::simulation::far::{fit_far_models, simulate_far_data, FarDgpSpec, MaBreak};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Design {
    /// Sparse idiosyncratic precision plus factors.
    NoBreak,
    /// As `NoBreak` with a precision break at `T/2`.
    Break,
    /// FAR forecasting with MA errors, `θ_s = (1+s)^c1 c2^s`.
    Far { c1: f64 },
    /// As `Far` with `c2` switching at `T/2`.
    FarBreak { c1: f64 },
}

impl Design {
    pub fn name(&self) -> String {
        match self {
            Design::NoBreak => "no_break".into(),
            Design::Break => "break".into(),
            Design::Far { c1 } => format!("far_c1_{c1}"),
            Design::FarBreak { c1 } => format!("far_break_c1_{c1}"),
        }
    }

    pub fn is_far(&self) -> bool {
        matches!(self, Design::Far { .. } | Design::FarBreak { .. })
    }

    pub fn metrics(&self) -> &'static [Metric] {
        if self.is_far() {
            &[Metric::Msfe]
        } else {
            &[Metric::OperatorNormError, Metric::WeightL1Error]
        }
    }

    fn default_methods(&self) -> Vec<Method> {
        match self {
            Design::NoBreak | Design::Far { .. } => {
                vec![Method::Ew, Method::Glasso, Method::FactorGlasso]
            }
            Design::Break | Design::FarBreak { .. } => {
                vec![
                    Method::Ew,
                    Method::Glasso,
                    Method::FactorGlasso,
                    Method::RdFactorGlasso,
                ]
            }
        }
    }
}

impl fmt::Display for Design {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.name())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Metric {
    /// `‖Θ̂ − Θ‖₂` against the precision of the last regime.
    OperatorNormError,
    /// `‖ŵ − w‖₁` against the weights of the last regime.
    WeightL1Error,
    /// Out-of-sample MSFE of the combined forecast.
    Msfe,
}

impl Metric {
    pub fn name(self) -> &'static str {
        match self {
            Metric::OperatorNormError => "operator_norm_error",
            Metric::WeightL1Error => "weight_l1_error",
            Metric::Msfe => "msfe",
        }
    }
}

impl fmt::Display for Metric {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

/// Settings of the FAR designs beyond the data generator.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FarSettings {
    /// `t`, `c1` and `ma_break` are overwritten per design and `T`.
    pub dgp: FarDgpSpec,
    pub k_max: usize,
    pub l_max: usize,
    /// Factors in the model of the forecast errors.
    pub error_factors: usize,
    /// `c2` before the break.
    pub c2_pre: f64,
    pub rd_tuning: RdTuning,
}

impl Default for FarSettings {
    fn default() -> Self {
        FarSettings {
            dgp: FarDgpSpec::default(),
            k_max: 2,
            l_max: 7,
            error_factors: 3,
            c2_pre: 0.3,
            rd_tuning: RdTuning::FirstWindow,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct McConfig {
    pub design: Design,
    pub methods: Vec<Method>,
    pub reps: usize,
    pub t_grid: Vec<usize>,
    pub seed: u64,
    pub estimator: EstimatorConfig,
    /// Fit the factor-error designs with the true number of factors instead
    /// of `estimator`'s setting.
    pub true_factors: bool,
    /// `t`, `precision_break` are overwritten per design and `T`.
    pub factor_dgp: FactorErrorDgpSpec,
    pub far: FarSettings,
}

impl Default for McConfig {
    fn default() -> Self {
        McConfig::for_design(Design::NoBreak)
    }
}

impl McConfig {
    /// Defaults for `design`: its usual methods, `T ∈ {128, 256, 512}`,
    /// oracle tuning of RD-Factor GLASSO in the factor-error designs.
    pub fn for_design(design: Design) -> Self {
        let mut estimator = EstimatorConfig::default();
        // Same minimizer as plain ADMM, two to three times fewer iterations.
        estimator.rd.admm.adaptive_rho = true;
        estimator.rd.admm.relaxation = 1.6;
        estimator.rd.criterion = if design.is_far() {
            RdCriterion::ValidationMsfe
        } else {
            RdCriterion::OperatorNormLoss
        };
        McConfig {
            design,
            methods: design.default_methods(),
            reps: 20,
            t_grid: [7.0, 8.0, 9.0].iter().map(|&k| t_from_kappa(k)).collect(),
            seed: 20240601,
            estimator,
            true_factors: true,
            factor_dgp: FactorErrorDgpSpec::default(),
            far: FarSettings::default(),
        }
    }

    fn validate(&self) -> Result<()> {
        if self.reps == 0 {
            return Err(Error::InvalidParameter("reps must be >= 1".into()));
        }
        if self.t_grid.is_empty() || self.methods.is_empty() {
            return Err(Error::InvalidParameter(
                "T grid and method list must be nonempty".into(),
            ));
        }
        let mut seen = self.methods.clone();
        seen.sort();
        seen.dedup();
        if seen.len() != self.methods.len() {
            return Err(Error::InvalidParameter("methods must be distinct".into()));
        }
        if self.design.is_far() && self.estimator.rd.criterion == RdCriterion::OperatorNormLoss {
            return Err(Error::InvalidParameter(
                "operator-norm tuning needs a known precision; use validation_msfe for FAR designs"
                    .into(),
            ));
        }
        Ok(())
    }
}

/// `T = floor(2^κ)`.
pub fn t_from_kappa(kappa: f64) -> usize {
    2f64.powf(kappa).floor() as usize
}

/// Generator of replication `rep` at sample size `t`.
pub fn replication_rng(seed: u64, t: usize, rep: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ (t as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15));
    rng.set_stream(rep as u64);
    rng
}

/// One line of the tidy results table.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct McRow {
    pub design: String,
    #[serde(rename = "T")]
    pub t: usize,
    pub method: Method,
    pub metric: Metric,
    /// Mean over successful replications, NaN if there are none.
    pub value: f64,
    pub rep_count: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RepFailure {
    pub t: usize,
    pub rep: usize,
    pub message: String,
}

/// Metric values of one successful replication.
#[derive(Debug, Clone, PartialEq)]
pub struct RepOutcome {
    pub t: usize,
    pub rep: usize,
    pub values: Vec<(Method, Metric, f64)>,
    /// Methods whose solver stopped at its iteration cap.
    pub non_converged: Vec<Method>,
}

impl RepOutcome {
    pub fn value(&self, method: Method, metric: Metric) -> Option<f64> {
        self.values
            .iter()
            .find(|(m, k, _)| *m == method && *k == metric)
            .map(|&(_, _, v)| v)
    }
}

/// Mean curve of one metric on a `log2 T` axis.
#[derive(Debug, Clone, PartialEq)]
pub struct Curve {
    pub metric: Metric,
    pub t: Vec<usize>,
    pub log2_t: Vec<f64>,
    pub series: Vec<(Method, Vec<f64>)>,
}

#[derive(Debug, Clone)]
pub struct McResult {
    pub design: Design,
    pub methods: Vec<Method>,
    pub t_grid: Vec<usize>,
    pub rows: Vec<McRow>,
    pub outcomes: Vec<RepOutcome>,
    pub failures: Vec<RepFailure>,
}

impl McResult {
    pub fn mean(&self, t: usize, method: Method, metric: Metric) -> Option<f64> {
        self.rows
            .iter()
            .find(|r| r.t == t && r.method == method && r.metric == metric)
            .map(|r| r.value)
    }

    /// Number of (replication, method) fits that hit the iteration cap.
    pub fn non_converged(&self) -> usize {
        self.outcomes.iter().map(|o| o.non_converged.len()).sum()
    }

    pub fn curves(&self) -> Vec<Curve> {
        self.design
            .metrics()
            .iter()
            .map(|&metric| Curve {
                metric,
                t: self.t_grid.clone(),
                log2_t: self.t_grid.iter().map(|&t| (t as f64).log2()).collect(),
                series: self
                    .methods
                    .iter()
                    .map(|&m| {
                        let ys = self
                            .t_grid
                            .iter()
                            .map(|&t| self.mean(t, m, metric).unwrap_or(f64::NAN))
                            .collect();
                        (m, ys)
                    })
                    .collect(),
            })
            .collect()
    }
}

fn factor_error_rep(cfg: &McConfig, t: usize, rng: &mut ChaCha8Rng) -> Result<RepOutcome> {
    let spec = FactorErrorDgpSpec {
        t,
        precision_break: match cfg.design {
            Design::Break => Some(cfg.factor_dgp.precision_break.unwrap_or_default()),
            _ => None,
        },
        ..cfg.factor_dgp.clone()
    };
    let sample = simulate_factor_errors(&spec, rng)?;
    let mut est_cfg = cfg.estimator.clone();
    if cfg.true_factors {
        est_cfg.set_factors(FactorCount::Fixed(spec.dims().1));
    }
    let truth = sample.theta.last().expect("at least one regime");
    let w_true = weights_from_matrix(truth, "truth")?;
    let mut values = Vec::new();
    let mut non_converged = Vec::new();
    for &method in &cfg.methods {
        let est = estimate_with_truth(
            method,
            &sample.errors,
            &sample.segmentation,
            &est_cfg,
            Some(&sample.theta),
        )
        .map_err(|e| Error::Degenerate(format!("{method}: {e}")))?;
        if !est.converged {
            non_converged.push(method);
        }
        let op = precision_error(est.precision.matrix(), truth, MatrixNorm::Operator)?;
        values.push((method, Metric::OperatorNormError, op));
        values.push((
            method,
            Metric::WeightL1Error,
            weight_error_l1(&est.weights, &w_true)?,
        ));
    }
    Ok(RepOutcome {
        t,
        rep: 0,
        values,
        non_converged,
    })
}

/// Estimation split of the FAR designs: `(m1, breaks in error rows)`.
/// Without a break the FAR models use the first half; with one, the first
/// third, and `c2` switches at `T/2`.
pub fn far_split(t: usize, with_break: bool) -> (usize, Vec<usize>) {
    if with_break {
        let m1 = t / 3;
        (m1, vec![t / 2 - m1])
    } else {
        (t / 2, Vec::new())
    }
}

/// Forecast errors of the FAR pool on the evaluation span, plus the break
/// rows within them.
pub fn far_forecast_errors(
    settings: &FarSettings,
    t: usize,
    c1: f64,
    with_break: bool,
    rng: &mut ChaCha8Rng,
) -> Result<(DMatrix<f64>, Vec<usize>)> {
    let spec = FarDgpSpec {
        t,
        c1,
        ma_break: with_break.then_some(MaBreak {
            at: t / 2,
            c2_pre: settings.c2_pre,
        }),
        ..settings.dgp.clone()
    };
    let data = simulate_far_data(&spec, rng)?;
    let (m1, breaks) = far_split(t, with_break);
    let models = fit_far_models(&data.x, &data.y, m1, settings.k_max, settings.l_max)?;
    let errors = models.forecast_errors(&data.x, &data.y, m1, t)?;
    Ok((errors, breaks))
}

fn far_rep(
    cfg: &McConfig,
    t: usize,
    c1: f64,
    with_break: bool,
    rng: &mut ChaCha8Rng,
) -> Result<RepOutcome> {
    let (errors, breaks) = far_forecast_errors(&cfg.far, t, c1, with_break, rng)?;
    let mut estimator = cfg.estimator.clone();
    estimator.set_factors(FactorCount::Fixed(cfg.far.error_factors));
    let rolling = RollingConfig {
        methods: cfg.methods.clone(),
        window: errors.nrows() / 2,
        horizon: 1,
        breaks,
        estimator,
        rd_tuning: cfg.far.rd_tuning,
    };
    let result = rolling_evaluate(&errors, &rolling)?;
    let mut values = Vec::new();
    let mut non_converged = Vec::new();
    for report in &result.reports {
        if report.partial {
            return Err(Error::Degenerate(format!(
                "{} failed on {} windows",
                report.method,
                report.failed_rows.len()
            )));
        }
        if !report.non_converged_rows.is_empty() {
            non_converged.push(report.method);
        }
        values.push((report.method, Metric::Msfe, report.msfe));
    }
    Ok(RepOutcome {
        t,
        rep: 0,
        values,
        non_converged,
    })
}

/// Runs `reps` replications at every `T` of the grid. A replication in
/// which any method fails is excluded from every mean and listed in
/// `failures`.
pub fn run_monte_carlo(cfg: &McConfig) -> Result<McResult> {
    cfg.validate()?;
    let jobs: Vec<(usize, usize)> = cfg
        .t_grid
        .iter()
        .flat_map(|&t| (0..cfg.reps).map(move |r| (t, r)))
        .collect();
    let results: Vec<std::result::Result<RepOutcome, RepFailure>> = jobs
        .par_iter()
        .map(|&(t, rep)| {
            let mut rng = replication_rng(cfg.seed, t, rep);
            let out = match cfg.design {
                Design::NoBreak | Design::Break => factor_error_rep(cfg, t, &mut rng),
                Design::Far { c1 } => far_rep(cfg, t, c1, false, &mut rng),
                Design::FarBreak { c1 } => far_rep(cfg, t, c1, true, &mut rng),
            };
            match out {
                Ok(o) => {
                    info!("{} T={t} rep {rep} done", cfg.design);
                    Ok(RepOutcome { rep, ..o })
                }
                Err(e) => {
                    warn!("{} T={t} rep {rep} failed: {e}", cfg.design);
                    Err(RepFailure {
                        t,
                        rep,
                        message: e.to_string(),
                    })
                }
            }
        })
        .collect();
    let mut outcomes = Vec::new();
    let mut failures = Vec::new();
    for r in results {
        match r {
            Ok(o) => outcomes.push(o),
            Err(f) => failures.push(f),
        }
    }

    let design = cfg.design.name();
    let mut rows = Vec::new();
    for &t in &cfg.t_grid {
        let at_t: Vec<&RepOutcome> = outcomes.iter().filter(|o| o.t == t).collect();
        for &method in &cfg.methods {
            for &metric in cfg.design.metrics() {
                let vals: Vec<f64> = at_t
                    .iter()
                    .filter_map(|o| o.value(method, metric))
                    .collect();
                let value = if vals.is_empty() {
                    f64::NAN
                } else {
                    vals.iter().sum::<f64>() / vals.len() as f64
                };
                rows.push(McRow {
                    design: design.clone(),
                    t,
                    method,
                    metric,
                    value,
                    rep_count: vals.len(),
                });
            }
        }
    }
    Ok(McResult {
        design: cfg.design,
        methods: cfg.methods.clone(),
        t_grid: cfg.t_grid.clone(),
        rows,
        outcomes,
        failures,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny(design: Design) -> McConfig {
        let mut cfg = McConfig::for_design(design);
        cfg.reps = 2;
        cfg.t_grid = vec![48];
        cfg.factor_dgp.p = Some(10);
        cfg
    }

    #[test]
    fn kappa_grid() {
        let ts: Vec<usize> = [7.0, 7.5, 8.0, 8.5, 9.0, 9.5]
            .iter()
            .map(|&k| t_from_kappa(k))
            .collect();
        assert_eq!(ts, vec![128, 181, 256, 362, 512, 724]);
    }

    #[test]
    fn one_row_per_t_method_metric() {
        let mut cfg = tiny(Design::NoBreak);
        cfg.reps = 1;
        let res = run_monte_carlo(&cfg).unwrap();
        assert_eq!(res.rows.len(), 3 * 2);
        assert!(res.failures.is_empty());
        assert!(res
            .rows
            .iter()
            .all(|r| r.rep_count == 1 && r.value.is_finite() && r.design == "no_break"));
        let curves = res.curves();
        assert_eq!(curves.len(), 2);
        assert_eq!(curves[0].series.len(), 3);
        assert!((curves[0].log2_t[0] - 48f64.log2()).abs() < 1e-15);
    }

    #[test]
    fn reruns_are_identical() {
        let cfg = tiny(Design::Break);
        let a = run_monte_carlo(&cfg).unwrap();
        let b = run_monte_carlo(&cfg).unwrap();
        assert_eq!(a.rows, b.rows);
        assert_eq!(a.outcomes, b.outcomes);
        let mut other = cfg.clone();
        other.seed += 1;
        assert_ne!(run_monte_carlo(&other).unwrap().rows, a.rows);
    }

    #[test]
    fn streams_differ_across_reps_and_sizes() {
        use rand::Rng;
        let a: u64 = replication_rng(1, 128, 0).random();
        let b: u64 = replication_rng(1, 128, 1).random();
        let c: u64 = replication_rng(1, 256, 0).random();
        assert!(a != b && a != c && b != c);
    }

    #[test]
    fn failures_are_excluded_and_counted() {
        // Twelve periods leave the FAR models with too few observations.
        let mut cfg = McConfig::for_design(Design::Far { c1: 0.0 });
        cfg.reps = 3;
        cfg.t_grid = vec![12];
        let res = run_monte_carlo(&cfg).unwrap();
        assert_eq!(res.failures.len(), 3);
        assert!(res
            .rows
            .iter()
            .all(|r| r.rep_count == 0 && r.value.is_nan()));
    }

    #[test]
    fn far_split_places_the_break_mid_window() {
        let (m1, breaks) = far_split(128, true);
        assert_eq!(m1, 42);
        let window = (128 - m1) / 2;
        assert_eq!(breaks, vec![22]);
        assert_eq!(breaks[0], window / 2 + 1);
        assert_eq!(far_split(128, false), (64, vec![]));
    }

    #[test]
    fn far_design_reports_msfe() {
        let mut cfg = McConfig::for_design(Design::Far { c1: 0.75 });
        cfg.reps = 1;
        cfg.t_grid = vec![96];
        let res = run_monte_carlo(&cfg).unwrap();
        assert!(res.failures.is_empty(), "{:?}", res.failures);
        assert_eq!(res.rows.len(), 3);
        assert!(res
            .rows
            .iter()
            .all(|r| r.metric == Metric::Msfe && r.value > 0.0));
    }

    #[test]
    fn rejects_oracle_tuning_without_truth() {
        let mut cfg = McConfig::for_design(Design::FarBreak { c1: 0.0 });
        cfg.estimator.rd.criterion = RdCriterion::OperatorNormLoss;
        assert!(run_monte_carlo(&cfg).is_err());
    }
}
