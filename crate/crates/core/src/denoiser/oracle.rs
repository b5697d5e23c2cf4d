//! Closed-form optimal predictors for Gaussian data, used as sampler
//! oracles.

use crate::embedding::StyleEmbedding;
use crate::error::{Error, Result};
use crate::grid::LatentGrid;
use crate::scalar::Scalar;
use crate::schedules::{BridgeSchedule, NoiseSchedule};

use super::{Denoise, Objective};

/// Optimal prediction at `(x_t, t)` for data `x0 ~ N(mu, s^2 I)`.
///
/// `x0_hat = mu + alpha s^2 / (alpha^2 s^2 + sigma^2) * (x_t - alpha mu)`,
/// returned either as is or converted to v. The v form is written without
/// dividing by sigma so it stays defined at sigma = 0.
pub fn analytic_gaussian_denoiser<F: Scalar>(
    mu: &[f64],
    s: f64,
    x_t: &LatentGrid<F>,
    t: usize,
    sched: &NoiseSchedule,
    objective: Objective,
) -> Result<LatentGrid<F>> {
    if !(s > 0.0) {
        return Err(Error::InvalidArgument(format!("oracle std must be > 0, got {s}")));
    }
    if mu.len() != x_t.len() {
        return Err(Error::Shape(format!("mean has {} entries, grid has {}", mu.len(), x_t.len())));
    }
    sched.check_t(t)?;
    let (a, sg) = (sched.alpha(t), sched.sigma(t));
    let var = s * s;
    let denom = a * a * var + sg * sg;
    let (c, h, w) = x_t.dims();
    let data: Vec<F> = x_t
        .as_slice()
        .iter()
        .zip(mu)
        .map(|(&x, &m)| {
            let x = x.f64();
            let out = match objective {
                Objective::X0Prediction => m + a * var / denom * (x - a * m),
                Objective::VPrediction => (a * sg * (1.0 - var) * x - sg * m) / denom,
            };
            F::of(out)
        })
        .collect();
    LatentGrid::from_vec(c, h, w, x_t.true_width(), data)
}

/// [`analytic_gaussian_denoiser`] packaged as a [`Denoise`] implementation.
#[derive(Debug, Clone)]
pub struct GaussianOracle {
    pub mu: Vec<f64>,
    pub s: f64,
    pub schedule: NoiseSchedule,
    pub objective: Objective,
}

impl<F: Scalar> Denoise<F> for GaussianOracle {
    fn objective(&self) -> Objective {
        self.objective
    }

    fn predict(
        &self,
        x_t: &LatentGrid<F>,
        _source: Option<&LatentGrid<F>>,
        t: usize,
        _cond: &StyleEmbedding,
    ) -> Result<LatentGrid<F>> {
        analytic_gaussian_denoiser(&self.mu, self.s, x_t, t, &self.schedule, self.objective)
    }
}

/// Conditional expectation `E[x0 | x_t]` under the bridge between
/// `x0 ~ N(mu0, s0^2)` and `x1 ~ N(mu1, s1^2)` with per-coordinate
/// correlation `rho`. `rho = 1` is the monotone (optimal transport) coupling.
///
/// With `noise_free`, the bridge state is the bare interpolation
/// `w0 x0 + w1 x1`, matching OT-ODE training.
#[derive(Debug, Clone)]
pub struct GaussianBridgeOracle {
    pub mu0: Vec<f64>,
    pub s0: f64,
    pub mu1: Vec<f64>,
    pub s1: f64,
    pub rho: f64,
    pub bridge: BridgeSchedule,
    pub noise_free: bool,
}

impl GaussianBridgeOracle {
    /// Regression coefficient and offset terms of `E[x0 | x_t]` at `t`.
    fn gain(&self, t: usize) -> Result<(f64, f64, f64)> {
        let (w0, w1, var) = self.bridge.marginal(t)?;
        let noise = if self.noise_free { 0.0 } else { var };
        let (s0, s1, rho) = (self.s0, self.s1, self.rho);
        let cov = w0 * s0 * s0 + w1 * rho * s0 * s1;
        let var_t = w0 * w0 * s0 * s0 + w1 * w1 * s1 * s1 + 2.0 * w0 * w1 * rho * s0 * s1 + noise;
        if var_t <= 0.0 {
            return Err(Error::Degenerate(format!("bridge state has zero variance at t={t}")));
        }
        Ok((cov / var_t, w0, w1))
    }
}

impl<F: Scalar> Denoise<F> for GaussianBridgeOracle {
    fn objective(&self) -> Objective {
        Objective::X0Prediction
    }

    fn predict(
        &self,
        x_t: &LatentGrid<F>,
        _source: Option<&LatentGrid<F>>,
        t: usize,
        _cond: &StyleEmbedding,
    ) -> Result<LatentGrid<F>> {
        if self.mu0.len() != x_t.len() || self.mu1.len() != x_t.len() {
            return Err(Error::Shape("bridge oracle means do not match the grid".into()));
        }
        let (k, w0, w1) = self.gain(t)?;
        let (c, h, w) = x_t.dims();
        let data = x_t
            .as_slice()
            .iter()
            .zip(self.mu0.iter().zip(&self.mu1))
            .map(|(&x, (&m0, &m1))| F::of(m0 + k * (x.f64() - (w0 * m0 + w1 * m1))))
            .collect();
        LatentGrid::from_vec(c, h, w, x_t.true_width(), data)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::schedules::ScheduleKind;

    fn grid(vals: &[f64]) -> LatentGrid<f64> {
        LatentGrid::from_vec(1, 1, vals.len(), vals.len(), vals.to_vec()).unwrap()
    }

    #[test]
    fn point_mass_predicts_mean() {
        let sched = NoiseSchedule::new(ScheduleKind::Cosine, 1000).unwrap();
        let mu = [0.5, -1.0, 2.0];
        let x = grid(&[10.0, -3.0, 0.1]);
        for t in [1, 300, 999] {
            let out = analytic_gaussian_denoiser(&mu, 1e-9, &x, t, &sched, Objective::X0Prediction).unwrap();
            assert!(out.max_abs_diff(&grid(&mu)) < 1e-9);
        }
    }

    #[test]
    fn clean_state_is_its_own_prediction() {
        let sched = NoiseSchedule::new(ScheduleKind::Cosine, 1000).unwrap();
        let x = grid(&[0.3, -0.7, 1.5]);
        let out = analytic_gaussian_denoiser(&[0.0, 1.0, -1.0], 0.5, &x, 0, &sched, Objective::X0Prediction).unwrap();
        assert!(out.max_abs_diff(&x) < 1e-12);
        assert!(analytic_gaussian_denoiser(&[0.0; 3], 0.0, &x, 0, &sched, Objective::X0Prediction).is_err());
    }

    #[test]
    fn v_form_agrees_with_x0_form() {
        let sched = NoiseSchedule::new(ScheduleKind::Cosine, 1000).unwrap();
        let x = grid(&[0.3, -0.7, 1.5]);
        let mu = [0.2, 1.0, -1.0];
        for t in [1, 250, 700, 1000] {
            let x0 = analytic_gaussian_denoiser(&mu, 0.6, &x, t, &sched, Objective::X0Prediction).unwrap();
            let v = analytic_gaussian_denoiser(&mu, 0.6, &x, t, &sched, Objective::VPrediction).unwrap();
            let back = sched.x0_from(&x, &v, t).unwrap();
            assert!(back.max_abs_diff(&x0) < 1e-12, "t={t}");
        }
    }

    #[test]
    fn bridge_oracle_is_exact_at_the_source_under_monotone_coupling() {
        let bridge = BridgeSchedule::new(100, 1e-3).unwrap();
        let oracle = GaussianBridgeOracle {
            mu0: vec![1.0],
            s0: 0.5,
            mu1: vec![-1.0],
            s1: 0.8,
            rho: 1.0,
            bridge,
            noise_free: false,
        };
        let x1 = grid(&[-0.2]);
        let out: LatentGrid<f64> = oracle.predict(&x1, None, 100, &StyleEmbedding::null(1)).unwrap();
        // x0 = mu0 + (s0/s1)(x1 - mu1)
        assert!((out.get(0, 0, 0) - (1.0 + 0.625 * 0.8)).abs() < 1e-12);
    }
}
