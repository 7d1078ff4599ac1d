use std::path::Path;

use fglasso::backtest::{rolling_evaluate, RollingConfig};
use fglasso::combination::weights_from_matrix;
use fglasso::estimator::{estimate, Method};
use fglasso::factor_glasso::factor_glasso_fit;
use fglasso::glasso::glasso_tune;
use fglasso::matrix::sample_covariance;
use fglasso::panel::{write_weights_csv, ForecastPanel, WeightRow};
use fglasso::rd_factor_glasso::{rd_factor_glasso_tune, RdCriterion};
use fglasso::regime::RegimeSegmentation;
use fglasso::simulation::dgp::{simulate_factor_errors, FactorErrorDgpSpec};
use fglasso::simulation::far::{fit_far_models, simulate_far_data, FarDgpSpec, MaBreak};
use fglasso::simulation::monte_carlo::{far_split, replication_rng, run_monte_carlo, Design};
use log::info;
use nalgebra::DMatrix;
use serde::Serialize;
use serde_json::{json, Value};

use crate::config::{load, load_mc, BacktestConfig, FitConfig, SimulateConfig, TuneConfig};
use crate::output::{OutDir, RunStatus};
use crate::Failure;

/// Where relative paths in a config resolve.
fn config_base(config: Option<&Path>) -> &Path {
    config
        .and_then(Path::parent)
        .unwrap_or_else(|| Path::new("."))
}

fn to_value<S: Serialize>(s: &S) -> Value {
    serde_json::to_value(s).unwrap_or(Value::Null)
}

fn write_panel(out: &mut OutDir, name: &str, panel: &ForecastPanel) -> Result<(), Failure> {
    let mut header = vec!["period".to_string(), "actual".to_string()];
    header.extend(panel.names.iter().cloned());
    let rows: Vec<Vec<String>> = (0..panel.n_periods())
        .map(|t| {
            let mut r = vec![panel.periods[t].clone(), panel.actual[t].to_string()];
            r.extend((0..panel.n_forecasters()).map(|i| panel.forecasts[(t, i)].to_string()));
            r
        })
        .collect();
    out.write_csv(name, Some(&header), &rows)
}

fn write_weights(out: &mut OutDir, names: &[String], rows: &[WeightRow]) -> Result<(), Failure> {
    out.write_with("weights.csv", |w| {
        write_weights_csv(w, names, rows).map_err(|e| Failure::output(e.to_string()))
    })
}

pub fn simulate(
    config: Option<&Path>,
    seed: Option<u64>,
    out: &Path,
) -> Result<RunStatus, Failure> {
    let mut cfg: SimulateConfig = load(config)?;
    if let Some(s) = seed {
        cfg.seed = s;
    }
    let mut rng = replication_rng(cfg.seed, cfg.t, 0);
    let mut out = OutDir::create(out)?;
    let details = match cfg.design {
        Design::NoBreak | Design::Break => {
            let spec = FactorErrorDgpSpec {
                t: cfg.t,
                precision_break: match cfg.design {
                    Design::Break => Some(
                        cfg.factor_dgp
                            .precision_break
                            .unwrap_or_default(),
                    ),
                    _ => None,
                },
                ..cfg.factor_dgp.clone()
            };
            let sample = simulate_factor_errors(&spec, &mut rng).map_err(Failure::from_core)?;
            let (t, p) = sample.errors.shape();
            // Errors are ŷ - y, so a zero target makes the forecasts equal the errors.
            let panel = ForecastPanel::new(
                (0..t).map(|s| s.to_string()).collect(),
                vec![0.0; t],
                (1..=p).map(|i| format!("f{i}")).collect(),
                sample.errors.clone(),
            )
            .map_err(Failure::from_core)?;
            write_panel(&mut out, "panel.csv", &panel)?;
            let truth = sample
                .theta
                .iter()
                .enumerate()
                .map(|(i, th)| {
                    let w = weights_from_matrix(th, "truth").map_err(Failure::from_core)?;
                    Ok(WeightRow {
                        period: sample.segmentation.range(i).start.to_string(),
                        method: "truth".into(),
                        regime: i,
                        weights: w.weights,
                    })
                })
                .collect::<Result<Vec<_>, Failure>>()?;
            out.write_with("true_weights.csv", |w| {
                write_weights_csv(w, &panel.names, &truth)
                    .map_err(|e| Failure::output(e.to_string()))
            })?;
            let (p, q) = spec.dims();
            json!({ "p": p, "q": q, "breaks": sample.segmentation.breaks(), "edges": sample.graph.edges.len() })
        }
        Design::Far { c1 } | Design::FarBreak { c1 } => {
            let with_break = matches!(cfg.design, Design::FarBreak { .. });
            let t = cfg.t;
            let spec = FarDgpSpec {
                t,
                c1,
                ma_break: with_break.then_some(MaBreak {
                    at: t / 2,
                    c2_pre: cfg.far.c2_pre,
                }),
                ..cfg.far.dgp.clone()
            };
            let data = simulate_far_data(&spec, &mut rng).map_err(Failure::from_core)?;
            let (m1, breaks) = far_split(t, with_break);
            let models = fit_far_models(&data.x, &data.y, m1, cfg.far.k_max, cfg.far.l_max)
                .map_err(Failure::from_core)?;
            let errors = models
                .forecast_errors(&data.x, &data.y, m1, t)
                .map_err(Failure::from_core)?;
            let actual: Vec<f64> = data.y[m1..t].to_vec();
            let forecasts = DMatrix::from_fn(errors.nrows(), errors.ncols(), |r, c| {
                errors[(r, c)] + actual[r]
            });
            let names = models
                .orders
                .iter()
                .map(|(k, l)| format!("far_{k}_{l}"))
                .collect();
            let panel = ForecastPanel::new(
                (m1..t).map(|s| s.to_string()).collect(),
                actual,
                names,
                forecasts,
            )
            .map_err(Failure::from_core)?;
            write_panel(&mut out, "panel.csv", &panel)?;
            let labels: Vec<String> = breaks.iter().map(|b| (m1 + b).to_string()).collect();
            json!({ "first_period": m1, "window": (t - m1) / 2, "breaks": labels, "models": models.len() })
        }
    };
    info!("simulated {} with T = {}", cfg.design, cfg.t);
    let status = RunStatus::default();
    out.finish("simulate", to_value(&cfg), status, details)?;
    Ok(status)
}

fn segmentation(n: usize, breaks: &[usize]) -> Result<RegimeSegmentation, Failure> {
    RegimeSegmentation::from_breaks(n, breaks).map_err(|e| Failure::config(e.to_string()))
}

pub fn fit(config: Option<&Path>, out: &Path) -> Result<RunStatus, Failure> {
    let cfg: FitConfig = load(config)?;
    let (panel, ingest) = cfg.panel.read(config_base(config))?;
    let breaks = cfg.panel.break_rows(&panel)?;
    let errors = panel.errors();
    let seg = segmentation(errors.nrows(), &breaks)?;
    let est = estimate(cfg.method, &errors, &seg, &cfg.estimator).map_err(Failure::from_core)?;
    let mut out = OutDir::create(out)?;
    let row = WeightRow {
        period: panel.periods.last().cloned().unwrap_or_default(),
        method: cfg.method.name().into(),
        regime: est.regime,
        weights: est.weights.weights.clone(),
    };
    write_weights(&mut out, &panel.names, &[row])?;
    let status = RunStatus {
        non_converged: !est.converged,
        partial: false,
    };
    out.finish(
        "fit",
        to_value(&cfg),
        status,
        json!({ "ingest": ingest, "tau": est.precision.tau(), "regime": est.regime }),
    )?;
    Ok(status)
}

#[derive(Serialize)]
struct ReportRow {
    method: Method,
    msfe: f64,
    msfe_ratio_to_ew: f64,
    dm_statistic: Option<f64>,
    dm_pvalue: Option<f64>,
    dm_degenerate: Option<bool>,
    n_periods: usize,
    failed_windows: usize,
    non_converged_windows: usize,
    partial: bool,
}

pub fn backtest(config: Option<&Path>, out: &Path) -> Result<RunStatus, Failure> {
    let cfg: BacktestConfig = load(config)?;
    let (panel, ingest) = cfg.panel.read(config_base(config))?;
    let breaks = cfg.panel.break_rows(&panel)?;
    let n = panel.n_periods();
    if cfg.horizon == 0 || cfg.window + cfg.horizon >= n {
        return Err(Failure::config(format!(
            "need window + horizon < T: window {}, horizon {}, T {n}",
            cfg.window, cfg.horizon
        )));
    }
    let rolling = RollingConfig {
        methods: cfg.methods.clone(),
        window: cfg.window,
        horizon: cfg.horizon,
        breaks,
        estimator: cfg.estimator.clone(),
        rd_tuning: cfg.rd_tuning,
    };
    let result = rolling_evaluate(&panel.errors(), &rolling).map_err(Failure::from_core)?;
    let mut out = OutDir::create(out)?;
    let report: Vec<ReportRow> = result
        .reports
        .iter()
        .map(|r| ReportRow {
            method: r.method,
            msfe: r.msfe,
            msfe_ratio_to_ew: r.msfe_ratio_to_ew,
            dm_statistic: r.dm.map(|d| d.statistic),
            dm_pvalue: r.dm.map(|d| d.pvalue),
            dm_degenerate: r.dm.map(|d| d.degenerate),
            n_periods: r.n_periods,
            failed_windows: r.failed_rows.len(),
            non_converged_windows: r.non_converged_rows.len(),
            partial: r.partial,
        })
        .collect();
    out.write_csv("report.csv", None, &report)?;
    let weights: Vec<WeightRow> = result
        .reports
        .iter()
        .zip(&result.records)
        .flat_map(|(r, recs)| {
            recs.iter().map(|rec| WeightRow {
                period: panel.periods[rec.row].clone(),
                method: r.method.name().into(),
                regime: rec.regime,
                weights: rec.weights.clone(),
            })
        })
        .collect();
    write_weights(&mut out, &panel.names, &weights)?;
    let status = RunStatus {
        non_converged: result.any_non_converged(),
        partial: result.any_partial(),
    };
    let failed: Value = result
        .reports
        .iter()
        .filter(|r| r.partial)
        .map(|r| {
            let periods: Vec<&str> = r
                .failed_rows
                .iter()
                .map(|&t| panel.periods[t].as_str())
                .collect();
            (r.method.name().to_string(), json!(periods))
        })
        .collect::<serde_json::Map<_, _>>()
        .into();
    out.finish(
        "backtest",
        to_value(&cfg),
        status,
        json!({ "ingest": ingest, "failed_periods": failed }),
    )?;
    Ok(status)
}

pub fn tune(config: Option<&Path>, out: &Path) -> Result<RunStatus, Failure> {
    let cfg: TuneConfig = load(config)?;
    let (panel, ingest) = cfg.panel.read(config_base(config))?;
    let breaks = cfg.panel.break_rows(&panel)?;
    let errors = panel.errors();
    let t = errors.nrows();
    let mut out = OutDir::create(out)?;
    let (selected, converged) = match cfg.method {
        Method::Glasso | Method::FactorGlasso => {
            let (scores, tau, converged) = if cfg.method == Method::Glasso {
                let s = sample_covariance(&errors).map_err(Failure::from_core)?;
                let grid = cfg
                    .estimator
                    .factor_glasso
                    .tau_grid(&s, t)
                    .map_err(Failure::from_core)?;
                let tuned = glasso_tune(&s, t, &grid, &cfg.estimator.factor_glasso.glasso)
                    .map_err(Failure::from_core)?;
                (tuned.scores, tuned.chosen_tau, tuned.precision.converged())
            } else {
                let fit = factor_glasso_fit(&errors, &cfg.estimator.factor_glasso)
                    .map_err(Failure::from_core)?;
                (fit.bic_scores, fit.chosen_tau, fit.theta_hat.converged())
            };
            let header = vec!["tau".to_string(), "bic".to_string()];
            out.write_csv("tuning.csv", Some(&header), &scores)?;
            (json!({ "tau": tau }), converged)
        }
        Method::RdFactorGlasso => {
            if cfg.estimator.rd.criterion == RdCriterion::OperatorNormLoss {
                return Err(Failure::config(
                    "operator-norm tuning needs the true precision; use validation_msfe",
                ));
            }
            let seg = segmentation(t, &breaks)?;
            let tuned = rd_factor_glasso_tune(&errors, &seg, &cfg.estimator.rd, None)
                .map_err(Failure::from_core)?;
            out.write_csv("tuning.csv", None, &tuned.scores)?;
            (
                json!({ "alpha": tuned.fit.alpha, "beta": tuned.fit.beta }),
                tuned.fit.converged,
            )
        }
        Method::Ew | Method::NotSparse => {
            return Err(Failure::config(format!(
                "{} has no tuning parameter",
                cfg.method
            )));
        }
    };
    let status = RunStatus {
        non_converged: !converged,
        partial: false,
    };
    out.finish(
        "tune",
        to_value(&cfg),
        status,
        json!({ "ingest": ingest, "selected": selected }),
    )?;
    Ok(status)
}

pub fn mc(config: Option<&Path>, seed: Option<u64>, out: &Path) -> Result<RunStatus, Failure> {
    let mut cfg = load_mc(config)?;
    if let Some(s) = seed {
        cfg.seed = s;
    }
    let result = run_monte_carlo(&cfg).map_err(Failure::from_core)?;
    let mut out = OutDir::create(out)?;
    out.write_csv("results.csv", None, &result.rows)?;
    for curve in result.curves() {
        let mut header = vec!["log2_T".to_string(), "T".to_string()];
        header.extend(curve.series.iter().map(|(m, _)| m.name().to_string()));
        let rows: Vec<Vec<String>> = (0..curve.t.len())
            .map(|k| {
                let mut r = vec![curve.log2_t[k].to_string(), curve.t[k].to_string()];
                r.extend(curve.series.iter().map(|(_, ys)| ys[k].to_string()));
                r
            })
            .collect();
        out.write_csv(&format!("curve_{}.csv", curve.metric), Some(&header), &rows)?;
    }
    let failures: Vec<Value> = result
        .failures
        .iter()
        .map(|f| json!({ "T": f.t, "rep": f.rep, "message": f.message }))
        .collect();
    let status = RunStatus {
        non_converged: result.non_converged() > 0,
        partial: !result.failures.is_empty(),
    };
    out.finish(
        "mc",
        to_value(&cfg),
        status,
        json!({
            "design": cfg.design.name(),
            "failed_replications": failures.len(),
            "failures": failures,
            "non_converged_fits": result.non_converged(),
        }),
    )?;
    Ok(status)
}
