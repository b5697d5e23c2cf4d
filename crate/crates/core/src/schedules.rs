//! Variance-preserving noise schedules, the symmetric bridge schedule and
//! the v-parameterization algebra.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::grid::LatentGrid;
use crate::scalar::Scalar;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ScheduleKind {
    Linear,
    Cosine,
}

impl FromStr for ScheduleKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "linear" => Ok(Self::Linear),
            "cosine" => Ok(Self::Cosine),
            other => Err(Error::InvalidArgument(format!("unknown schedule kind {other:?}"))),
        }
    }
}

impl fmt::Display for ScheduleKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Self::Linear => "linear",
            Self::Cosine => "cosine",
        })
    }
}

const LINEAR_BETA_START: f64 = 1e-4;
const LINEAR_BETA_END: f64 = 0.02;
const COSINE_OFFSET: f64 = 0.008;
const MAX_BETA: f64 = 0.999;

/// Signal and noise coefficients for `t = 0..=T`, with
/// `alpha[t]^2 + sigma[t]^2 = 1`.
#[derive(Debug, Clone, PartialEq)]
pub struct NoiseSchedule {
    kind: ScheduleKind,
    alpha: Vec<f64>,
    sigma: Vec<f64>,
}

impl NoiseSchedule {
    pub fn new(kind: ScheduleKind, timesteps: usize) -> Result<Self> {
        if timesteps < 2 {
            return Err(Error::InvalidArgument(format!("schedule needs T >= 2, got {timesteps}")));
        }
        let betas: Vec<f64> = match kind {
            ScheduleKind::Linear => {
                let span = LINEAR_BETA_END - LINEAR_BETA_START;
                (0..timesteps)
                    .map(|i| LINEAR_BETA_START + span * i as f64 / (timesteps - 1) as f64)
                    .collect()
            }
            ScheduleKind::Cosine => {
                let f = |t: usize| {
                    let x = (t as f64 / timesteps as f64 + COSINE_OFFSET) / (1.0 + COSINE_OFFSET);
                    (x * std::f64::consts::FRAC_PI_2).cos().powi(2)
                };
                let f0 = f(0);
                (1..=timesteps)
                    .map(|t| (1.0 - (f(t) / f0) / (f(t - 1) / f0)).clamp(0.0, MAX_BETA))
                    .collect()
            }
        };
        let mut alpha_sq = Vec::with_capacity(timesteps + 1);
        alpha_sq.push(1.0);
        let mut acc = 1.0;
        for b in &betas {
            acc *= 1.0 - b;
            alpha_sq.push(acc);
        }
        let alpha: Vec<f64> = alpha_sq.iter().map(|a| a.sqrt()).collect();
        let sigma: Vec<f64> = alpha_sq.iter().map(|a| (1.0 - a).max(0.0).sqrt()).collect();
        Ok(Self { kind, alpha, sigma })
    }

    pub fn kind(&self) -> ScheduleKind {
        self.kind
    }

    /// Number of timesteps `T`; valid indices are `0..=T`.
    pub fn timesteps(&self) -> usize {
        self.alpha.len() - 1
    }

    pub fn alpha(&self, t: usize) -> f64 {
        self.alpha[t]
    }

    pub fn sigma(&self, t: usize) -> f64 {
        self.sigma[t]
    }

    pub fn check_t(&self, t: usize) -> Result<()> {
        if t > self.timesteps() {
            Err(Error::TimestepRange { t, max: self.timesteps() })
        } else {
            Ok(())
        }
    }

    fn coeffs<F: Scalar>(&self, t: usize) -> Result<(F, F)> {
        self.check_t(t)?;
        Ok((F::of(self.alpha[t]), F::of(self.sigma[t])))
    }

    /// `alpha[t] * x0 + sigma[t] * eps`.
    pub fn forward_diffuse<F: Scalar>(
        &self,
        x0: &LatentGrid<F>,
        eps: &LatentGrid<F>,
        t: usize,
    ) -> Result<LatentGrid<F>> {
        let (a, s) = self.coeffs(t)?;
        x0.lin_comb(a, eps, s)
    }

    /// `alpha[t] * eps - sigma[t] * x0`.
    pub fn v_from<F: Scalar>(
        &self,
        x0: &LatentGrid<F>,
        eps: &LatentGrid<F>,
        t: usize,
    ) -> Result<LatentGrid<F>> {
        let (a, s) = self.coeffs(t)?;
        eps.lin_comb(a, x0, -s)
    }

    /// `alpha[t] * x_t - sigma[t] * v`.
    pub fn x0_from<F: Scalar>(
        &self,
        x_t: &LatentGrid<F>,
        v: &LatentGrid<F>,
        t: usize,
    ) -> Result<LatentGrid<F>> {
        let (a, s) = self.coeffs(t)?;
        x_t.lin_comb(a, v, -s)
    }

    /// `sigma[t] * x_t + alpha[t] * v`.
    pub fn eps_from<F: Scalar>(
        &self,
        x_t: &LatentGrid<F>,
        v: &LatentGrid<F>,
        t: usize,
    ) -> Result<LatentGrid<F>> {
        let (a, s) = self.coeffs(t)?;
        x_t.lin_comb(s, v, a)
    }

    /// Inverse of `x0_from`: the v that maps `x_t` to the given `x0`.
    pub fn v_from_x0<F: Scalar>(
        &self,
        x_t: &LatentGrid<F>,
        x0: &LatentGrid<F>,
        t: usize,
    ) -> Result<LatentGrid<F>> {
        let (a, s) = self.coeffs::<f64>(t)?;
        if s == 0.0 {
            return Err(Error::Degenerate(format!("sigma[{t}] = 0, v is undefined")));
        }
        x_t.lin_comb(F::of(a / s), x0, F::of(-1.0 / s))
    }
}

/// Accumulated forward/backward variances of a Brownian bridge over
/// `t = 0..=T`.
#[derive(Debug, Clone, PartialEq)]
pub struct BridgeSchedule {
    step_var: Vec<f64>,
    var_fwd: Vec<f64>,
    var_bwd: Vec<f64>,
}

impl BridgeSchedule {
    /// Symmetric triangular per-step variance peaking mid-trajectory at
    /// `beta_max`.
    pub fn new(timesteps: usize, beta_max: f64) -> Result<Self> {
        if timesteps < 2 {
            return Err(Error::InvalidArgument(format!("bridge needs T >= 2, got {timesteps}")));
        }
        if !(beta_max > 0.0 && beta_max.is_finite()) {
            return Err(Error::InvalidArgument(format!("beta_max must be > 0, got {beta_max}")));
        }
        // Step i covers (i-1, i]; rank i and T+1-i identically.
        let rank = |i: usize| i.min(timesteps + 1 - i) as f64;
        let peak = rank(timesteps.div_ceil(2).max(1));
        let step_var: Vec<f64> = (1..=timesteps).map(|i| beta_max * rank(i) / peak).collect();

        let mut var_fwd = vec![0.0; timesteps + 1];
        for t in 1..=timesteps {
            var_fwd[t] = var_fwd[t - 1] + step_var[t - 1];
        }
        let mut var_bwd = vec![0.0; timesteps + 1];
        for t in (0..timesteps).rev() {
            var_bwd[t] = var_bwd[t + 1] + step_var[t];
        }
        Ok(Self { step_var, var_fwd, var_bwd })
    }

    pub fn timesteps(&self) -> usize {
        self.var_fwd.len() - 1
    }

    /// Variance added by the step ending at `t` (`t` in `1..=T`).
    pub fn step_var(&self, t: usize) -> f64 {
        self.step_var[t - 1]
    }

    pub fn var_fwd(&self, t: usize) -> f64 {
        self.var_fwd[t]
    }

    pub fn var_bwd(&self, t: usize) -> f64 {
        self.var_bwd[t]
    }

    pub fn check_t(&self, t: usize) -> Result<()> {
        if t > self.timesteps() {
            Err(Error::TimestepRange { t, max: self.timesteps() })
        } else {
            Ok(())
        }
    }

    /// Marginal of the bridge pinned at `x0` (t = 0) and `x1` (t = T):
    /// returns `(w0, w1, variance)` with mean `w0*x0 + w1*x1`.
    pub fn marginal(&self, t: usize) -> Result<(f64, f64, f64)> {
        self.check_t(t)?;
        let (f, b) = (self.var_fwd[t], self.var_bwd[t]);
        let total = f + b;
        Ok((b / total, f / total, f * b / total))
    }
}
