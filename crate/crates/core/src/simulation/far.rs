//! Factor-augmented forecasting design: a large panel `x_t = Λ g_t + v_t`
//! driven by AR(1) factors, a target with an MA(∞) error component, and a
//! pool of FAR(k, l) forecasters fit by least squares.

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand_distr::{Normal, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::matrix::{sample_covariance, symmetric_eigen};
use crate::simulation::dgp::toeplitz_cholesky_loadings;

/// `θ_s = (1 + s)^{c1} c2^s`.
pub fn ma_coefficient(s: usize, c1: f64, c2: f64) -> f64 {
    (1.0 + s as f64).powf(c1) * c2.powi(s as i32)
}

/// `θ_1, …, θ_n`.
pub fn ma_coefficients(n: usize, c1: f64, c2: f64) -> Vec<f64> {
    (1..=n).map(|s| ma_coefficient(s, c1, c2)).collect()
}

/// Switch of `c2` at period `at`: targets dated before `at` use `c2_pre`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MaBreak {
    pub at: usize,
    pub c2_pre: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FarDgpSpec {
    /// Number of predictors `N`.
    pub n: usize,
    /// Number of factors `r`.
    pub r: usize,
    pub t: usize,
    pub phi: f64,
    pub rho: f64,
    pub sigma_v: f64,
    pub sigma_xi: f64,
    pub sigma_eps: f64,
    pub c1: f64,
    pub c2: f64,
    pub ma_break: Option<MaBreak>,
    /// MA(∞) truncation lag.
    pub ma_lags: usize,
    pub burn_in: usize,
}

impl Default for FarDgpSpec {
    fn default() -> Self {
        FarDgpSpec {
            n: 100,
            r: 5,
            t: 128,
            phi: 0.8,
            rho: 0.9,
            sigma_v: 1.0,
            sigma_xi: 1.0,
            sigma_eps: 1.0,
            c1: 0.0,
            c2: 0.9,
            ma_break: None,
            ma_lags: 200,
            burn_in: 200,
        }
    }
}

impl FarDgpSpec {
    fn validate(&self) -> Result<()> {
        if self.n == 0 || self.r == 0 || self.r > self.n || self.t < 2 {
            return Err(Error::InvalidParameter(format!(
                "need 1 <= r <= N and T >= 2, got N = {}, r = {}, T = {}",
                self.n, self.r, self.t
            )));
        }
        if !(self.phi.abs() < 1.0) {
            return Err(Error::InvalidParameter(format!(
                "|φ| must be < 1, got {}",
                self.phi
            )));
        }
        let c2s = [Some(self.c2), self.ma_break.map(|b| b.c2_pre)];
        if c2s.iter().flatten().any(|c| !(c.abs() < 1.0)) {
            return Err(Error::InvalidParameter("|c2| must be < 1".into()));
        }
        if [self.sigma_v, self.sigma_xi, self.sigma_eps]
            .iter()
            .any(|s| !(*s >= 0.0))
        {
            return Err(Error::InvalidParameter(
                "standard deviations must be >= 0".into(),
            ));
        }
        if self.burn_in == 0 {
            return Err(Error::InvalidParameter("burn_in must be >= 1".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
pub struct FarData {
    /// `T × N`.
    pub x: DMatrix<f64>,
    /// `y_0, …, y_{T-1}`.
    pub y: Vec<f64>,
    /// `T × r`.
    pub factors: DMatrix<f64>,
    pub loadings: DMatrix<f64>,
    pub alpha: Vec<f64>,
}

/// Draws one panel. `y_t = g_{t-1}'α + Σ_{s ≤ S} θ_s ε_{t-s} + ε_t`.
pub fn simulate_far_data<R: Rng + ?Sized>(spec: &FarDgpSpec, rng: &mut R) -> Result<FarData> {
    spec.validate()?;
    let (n, r, t) = (spec.n, spec.r, spec.t);
    let alpha_dist = Normal::new(1.0, 1.0).expect("valid normal");
    let alpha: Vec<f64> = (0..r).map(|_| rng.sample(alpha_dist)).collect();
    let loadings = toeplitz_cholesky_loadings(n, r, spec.rho)?;

    let total = spec.burn_in + t;
    let mut g = DMatrix::<f64>::zeros(total, r);
    let sd0 = spec.sigma_xi / (1.0 - spec.phi * spec.phi).sqrt();
    for k in 0..r {
        let z: f64 = rng.sample(StandardNormal);
        g[(0, k)] = sd0 * z;
    }
    for s in 1..total {
        for k in 0..r {
            let z: f64 = rng.sample(StandardNormal);
            g[(s, k)] = spec.phi * g[(s - 1, k)] + spec.sigma_xi * z;
        }
    }

    // eps[j] is ε at absolute time j - ma_lags.
    let lags = spec.ma_lags;
    let eps: Vec<f64> = (0..total + lags)
        .map(|_| spec.sigma_eps * rng.sample::<f64, _>(StandardNormal))
        .collect();
    let theta_post = ma_coefficients(lags, spec.c1, spec.c2);
    let theta_pre = spec
        .ma_break
        .map(|b| ma_coefficients(lags, spec.c1, b.c2_pre));

    let mut y = Vec::with_capacity(t);
    for tt in 0..t {
        let a = spec.burn_in + tt;
        let theta = match (&theta_pre, spec.ma_break) {
            (Some(pre), Some(b)) if tt < b.at => pre,
            _ => &theta_post,
        };
        let signal: f64 = (0..r).map(|k| g[(a - 1, k)] * alpha[k]).sum();
        let ma: f64 = theta
            .iter()
            .enumerate()
            .map(|(i, th)| th * eps[a + lags - (i + 1)])
            .sum();
        y.push(signal + ma + eps[a + lags]);
    }

    let factors = g.rows(spec.burn_in, t).into_owned();
    let noise = DMatrix::<f64>::from_fn(t, n, |_, _| {
        spec.sigma_v * rng.sample::<f64, _>(StandardNormal)
    });
    let x = &factors * loadings.transpose() + noise;
    Ok(FarData {
        x,
        y,
        factors,
        loadings,
        alpha,
    })
}

/// `(k, l)` for `k = 0..=K`, `l = 0..=L`, `k` outer.
pub fn far_orders(k_max: usize, l_max: usize) -> Vec<(usize, usize)> {
    (0..=k_max)
        .flat_map(|k| (0..=l_max).map(move |l| (k, l)))
        .collect()
}

/// A pool of FAR models sharing one set of PCA factor loadings.
#[derive(Debug, Clone)]
pub struct FarModels {
    pub orders: Vec<(usize, usize)>,
    /// Per model: `[μ, κ_1..κ_k, ψ_1..ψ_l]`.
    pub coefficients: Vec<DVector<f64>>,
    /// `N × K` principal directions of the training panel.
    pub directions: DMatrix<f64>,
    pub max_lag: usize,
}

fn regressors(ghat: &DMatrix<f64>, y: &[f64], t: usize, k: usize, l: usize) -> Vec<f64> {
    let mut row = Vec::with_capacity(1 + k + l);
    row.push(1.0);
    row.extend((0..k).map(|j| ghat[(t, j)]));
    row.extend((0..l).map(|j| y[t - j]));
    row
}

/// Fits every FAR(k, l) with `k <= K`, `l <= L` on periods `0..train_end`.
/// Factors are principal components of `x` over the same periods. All
/// models share the estimation sample `t = L-1, …, train_end-2` (regressors
/// dated `t`, target `y_{t+1}`).
pub fn fit_far_models(
    x: &DMatrix<f64>,
    y: &[f64],
    train_end: usize,
    k_max: usize,
    l_max: usize,
) -> Result<FarModels> {
    if x.nrows() != y.len() {
        return Err(Error::Dimension(format!(
            "x has {} rows, y has {}",
            x.nrows(),
            y.len()
        )));
    }
    if train_end < 2 || train_end > y.len() || k_max > x.ncols() {
        return Err(Error::Dimension(
            "training span or factor count exceeds the data".into(),
        ));
    }
    let first = l_max.saturating_sub(1);
    let n_obs = (train_end - 1).saturating_sub(first);
    let width = 1 + k_max + l_max;
    if n_obs <= width {
        return Err(Error::Dimension(format!(
            "{n_obs} training observations for models with up to {width} coefficients"
        )));
    }
    let directions = if k_max > 0 {
        let cov = sample_covariance(&x.rows(0, train_end).into_owned())?;
        symmetric_eigen(&cov)?
            .vectors
            .columns(0, k_max)
            .into_owned()
    } else {
        DMatrix::zeros(x.ncols(), 0)
    };
    let ghat = x * &directions;
    let orders = far_orders(k_max, l_max);
    let mut coefficients = Vec::with_capacity(orders.len());
    for &(k, l) in &orders {
        let cols = 1 + k + l;
        let mut design = DMatrix::<f64>::zeros(n_obs, cols);
        let mut target = DVector::<f64>::zeros(n_obs);
        for (i, t) in (first..train_end - 1).enumerate() {
            for (j, v) in regressors(&ghat, y, t, k, l).into_iter().enumerate() {
                design[(i, j)] = v;
            }
            target[i] = y[t + 1];
        }
        let beta = design
            .svd(true, true)
            .solve(&target, 1e-12)
            .map_err(|e| Error::Degenerate(format!("FAR({k}, {l}) least squares failed: {e}")))?;
        coefficients.push(beta);
    }
    Ok(FarModels {
        orders,
        coefficients,
        directions,
        max_lag: l_max,
    })
}

impl FarModels {
    pub fn len(&self) -> usize {
        self.orders.len()
    }

    pub fn is_empty(&self) -> bool {
        self.orders.is_empty()
    }

    /// Forecasts of `y_{t+1}` from information dated `t` or earlier.
    pub fn forecast(&self, x: &DMatrix<f64>, y: &[f64], t: usize) -> Result<Vec<f64>> {
        if t + 1 < self.max_lag || t >= y.len() || t >= x.nrows() {
            return Err(Error::Dimension(format!("cannot forecast from period {t}")));
        }
        let g = x.rows(t, 1) * &self.directions;
        self.orders
            .iter()
            .zip(&self.coefficients)
            .map(|(&(k, l), beta)| {
                let mut v = beta[0];
                for j in 0..k {
                    v += beta[1 + j] * g[(0, j)];
                }
                for j in 0..l {
                    v += beta[1 + k + j] * y[t - j];
                }
                if v.is_finite() {
                    Ok(v)
                } else {
                    Err(Error::Degenerate(format!(
                        "FAR({k}, {l}) produced a non-finite forecast"
                    )))
                }
            })
            .collect()
    }

    /// Errors `ŷ - y` for targets dated `from..to`, one row per target.
    pub fn forecast_errors(
        &self,
        x: &DMatrix<f64>,
        y: &[f64],
        from: usize,
        to: usize,
    ) -> Result<DMatrix<f64>> {
        if from == 0 || to > y.len() || from >= to {
            return Err(Error::Dimension(format!(
                "invalid target span {from}..{to}"
            )));
        }
        let mut out = DMatrix::<f64>::zeros(to - from, self.len());
        for (i, target) in (from..to).enumerate() {
            let f = self.forecast(x, y, target - 1)?;
            for (j, v) in f.into_iter().enumerate() {
                out[(i, j)] = v - y[target];
            }
        }
        Ok(out)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn ma_rule() {
        assert!((ma_coefficient(2, 0.75, 0.9) - 3f64.powf(0.75) * 0.81).abs() < 1e-15);
        assert!((ma_coefficient(2, 0.75, 0.9) - 1.846).abs() < 1e-3);
        for s in 1..10 {
            assert!((ma_coefficient(s, 0.0, 0.9) - 0.9f64.powi(s as i32)).abs() < 1e-15);
        }
    }

    #[test]
    fn pool_size() {
        assert_eq!(far_orders(2, 7).len(), 24);
        assert_eq!(far_orders(2, 7)[0], (0, 0));
    }

    #[test]
    fn ar1_recovered_exactly() {
        let t = 60;
        let mut y = vec![3.0];
        for s in 1..t {
            y.push(0.5 + 0.7 * y[s - 1]);
        }
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let x = DMatrix::<f64>::from_fn(t, 5, |_, _| rng.sample(StandardNormal));
        let m = fit_far_models(&x, &y, 30, 2, 7).unwrap();
        let idx = m.orders.iter().position(|&o| o == (0, 1)).unwrap();
        assert!((m.coefficients[idx][1] - 0.7).abs() < 1e-6);
        assert!((m.coefficients[idx][0] - 0.5).abs() < 1e-6);
        let f = m.forecast(&x, &y, 40).unwrap();
        assert!((f[idx] - y[41]).abs() < 1e-6);
    }

    #[test]
    fn noiseless_panel_spans_factors() {
        let spec = FarDgpSpec {
            n: 20,
            r: 2,
            t: 150,
            sigma_v: 0.0,
            ..Default::default()
        };
        let d = simulate_far_data(&spec, &mut ChaCha8Rng::seed_from_u64(3)).unwrap();
        let m = fit_far_models(&d.x, &d.y, 150, 2, 1).unwrap();
        let ghat = &d.x * &m.directions;
        // Project true factors on the estimated ones: residual must vanish.
        let coef = ghat
            .clone()
            .svd(true, true)
            .solve(&d.factors, 1e-12)
            .unwrap();
        let resid = &d.factors - &ghat * coef;
        assert!(resid.norm() / d.factors.norm() < 1e-8);
    }

    #[test]
    fn forecasts_are_finite_and_reproducible() {
        let spec = FarDgpSpec {
            t: 128,
            c1: 0.75,
            ..Default::default()
        };
        let a = simulate_far_data(&spec, &mut ChaCha8Rng::seed_from_u64(9)).unwrap();
        let b = simulate_far_data(&spec, &mut ChaCha8Rng::seed_from_u64(9)).unwrap();
        assert_eq!(a.y, b.y);
        assert_eq!(a.x, b.x);
        let m = fit_far_models(&a.x, &a.y, 64, 2, 7).unwrap();
        let e = m.forecast_errors(&a.x, &a.y, 64, 128).unwrap();
        assert_eq!(e.shape(), (64, 24));
        assert!(e.iter().all(|v| v.is_finite()));
    }

    #[test]
    fn break_switches_ma_weights() {
        // With no signal and no noise in ε after the break the target is
        // pure MA; compare to the hand-built series.
        let spec = FarDgpSpec {
            n: 3,
            r: 1,
            t: 30,
            sigma_xi: 0.0,
            ma_lags: 5,
            c1: 0.0,
            c2: 0.9,
            ma_break: Some(MaBreak {
                at: 10,
                c2_pre: 0.3,
            }),
            ..Default::default()
        };
        let d = simulate_far_data(&spec, &mut ChaCha8Rng::seed_from_u64(4)).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let _alpha: f64 = rng.sample(Normal::new(1.0, 1.0).unwrap());
        for _ in 0..(spec.burn_in + 30) {
            let _: f64 = rng.sample(StandardNormal);
        }
        let eps: Vec<f64> = (0..spec.burn_in + 30 + 5)
            .map(|_| rng.sample(StandardNormal))
            .collect();
        for tt in [3usize, 25] {
            let c2: f64 = if tt < 10 { 0.3 } else { 0.9 };
            let a = spec.burn_in + tt + 5;
            let mut v = eps[a];
            for s in 1..=5 {
                v += c2.powi(s as i32) * eps[a - s];
            }
            assert!((d.y[tt] - v).abs() < 1e-12);
        }
    }
}
