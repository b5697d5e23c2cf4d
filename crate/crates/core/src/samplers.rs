//! DDIM and bridge samplers plus classifier-free guidance.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::denoiser::{Denoise, Objective};
use crate::embedding::StyleEmbedding;
use crate::error::{Error, Result};
use crate::grid::LatentGrid;
use crate::scalar::Scalar;
use crate::schedules::{BridgeSchedule, NoiseSchedule};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SamplerMode {
    Ddim,
    I2sb,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SamplerConfig {
    #[serde(default = "default_steps")]
    pub steps: usize,
    #[serde(default)]
    pub eta: f64,
    #[serde(default)]
    pub guidance_w: f64,
    pub mode: SamplerMode,
    #[serde(default)]
    pub ot_ode: bool,
    #[serde(default)]
    pub add_x1_noise: bool,
    #[serde(default = "default_x1_noise_std")]
    pub x1_noise_std: f64,
}

fn default_steps() -> usize {
    10
}

fn default_x1_noise_std() -> f64 {
    0.1
}

impl SamplerConfig {
    pub fn ddim() -> Self {
        Self {
            steps: default_steps(),
            eta: 0.0,
            guidance_w: 0.0,
            mode: SamplerMode::Ddim,
            ot_ode: false,
            add_x1_noise: false,
            x1_noise_std: default_x1_noise_std(),
        }
    }

    /// Bridge sampling with the OT-ODE and x1-noise options on.
    pub fn i2sb() -> Self {
        Self { mode: SamplerMode::I2sb, ot_ode: true, add_x1_noise: true, ..Self::ddim() }
    }

    pub fn validate(&self, timesteps: usize) -> Result<()> {
        if self.steps == 0 || self.steps > timesteps {
            return Err(Error::Config(format!("steps must be in 1..={timesteps}, got {}", self.steps)));
        }
        if !(0.0..=1.0).contains(&self.eta) {
            return Err(Error::Config(format!("eta must be in [0, 1], got {}", self.eta)));
        }
        if !(self.guidance_w >= 0.0 && self.guidance_w.is_finite()) {
            return Err(Error::Config(format!("guidance_w must be >= 0, got {}", self.guidance_w)));
        }
        if !(self.x1_noise_std >= 0.0 && self.x1_noise_std.is_finite()) {
            return Err(Error::Config(format!("x1_noise_std must be >= 0, got {}", self.x1_noise_std)));
        }
        Ok(())
    }
}

impl Default for SamplerConfig {
    fn default() -> Self {
        Self::i2sb()
    }
}

/// `steps + 1` evenly spaced integer timesteps from `T` down to `0`.
pub fn timestep_grid(timesteps: usize, steps: usize) -> Vec<usize> {
    (0..=steps)
        .map(|i| ((timesteps as f64) * (1.0 - i as f64 / steps as f64)).round() as usize)
        .collect()
}

/// `(1 + w) * pred(cond) - w * pred(null)`. With `w = 0` or a null condition
/// the conditional prediction is returned unchanged.
pub fn cfg_predict<F: Scalar, D: Denoise<F> + ?Sized>(
    denoiser: &D,
    x_t: &LatentGrid<F>,
    source: Option<&LatentGrid<F>>,
    t: usize,
    cond: &StyleEmbedding,
    w: f64,
) -> Result<LatentGrid<F>> {
    let cond_pred = denoiser.predict(x_t, source, t, cond)?;
    if w == 0.0 || cond.is_null() {
        return Ok(cond_pred);
    }
    let uncond = denoiser.predict(x_t, source, t, &StyleEmbedding::null(cond.dim()))?;
    cond_pred.lin_comb(F::of(1.0 + w), &uncond, F::of(-w))
}

fn guided<F: Scalar, D: Denoise<F> + ?Sized>(
    denoiser: &D,
    x_t: &LatentGrid<F>,
    source: Option<&LatentGrid<F>>,
    t: usize,
    cond: &StyleEmbedding,
    w: f64,
) -> Result<LatentGrid<F>> {
    if w > 0.0 {
        cfg_predict(denoiser, x_t, source, t, cond, w)
    } else {
        denoiser.predict(x_t, source, t, cond)
    }
}

/// One DDIM update from `t` to `s_next` given a v prediction.
#[allow(clippy::too_many_arguments)]
pub fn ddim_step<F: Scalar, R: Rng + ?Sized>(
    x_t: &LatentGrid<F>,
    v_pred: &LatentGrid<F>,
    t: usize,
    s_next: usize,
    sched: &NoiseSchedule,
    eta: f64,
    rng: &mut R,
) -> Result<LatentGrid<F>> {
    sched.check_t(t)?;
    if s_next >= t {
        return Err(Error::StepOrder { current: t, next: s_next });
    }
    x_t.check_same_dims(v_pred)?;
    let x0 = sched.x0_from(x_t, v_pred, t)?;
    let eps = sched.eps_from(x_t, v_pred, t)?;
    let (a_s, s_s) = (sched.alpha(s_next), sched.sigma(s_next));
    if eta == 0.0 {
        return x0.lin_comb(F::of(a_s), &eps, F::of(s_s));
    }
    let (a_t, s_t) = (sched.alpha(t), sched.sigma(t));
    let var = if s_t > 0.0 {
        (eta * eta * (s_s * s_s) / (s_t * s_t) * (1.0 - (a_t * a_t) / (a_s * a_s))).max(0.0)
    } else {
        0.0
    };
    let dir = (s_s * s_s - var).max(0.0).sqrt();
    let det = x0.lin_comb(F::of(a_s), &eps, F::of(dir))?;
    if var == 0.0 {
        return Ok(det);
    }
    let z = x_t.noise_like(rng);
    det.lin_comb(F::one(), &z, F::of(var.sqrt()))
}

fn as_v<F: Scalar>(
    objective: Objective,
    pred: LatentGrid<F>,
    x_t: &LatentGrid<F>,
    t: usize,
    sched: &NoiseSchedule,
) -> Result<LatentGrid<F>> {
    match objective {
        Objective::VPrediction => Ok(pred),
        Objective::X0Prediction => sched.v_from_x0(x_t, &pred, t),
    }
}

/// Runs `cfg.steps` DDIM updates from pure noise at `T` down to `0`.
#[allow(clippy::too_many_arguments)]
pub fn ddim_sample<F: Scalar, D: Denoise<F> + ?Sized, R: Rng + ?Sized>(
    denoiser: &D,
    x_init: &LatentGrid<F>,
    source: Option<&LatentGrid<F>>,
    cond: &StyleEmbedding,
    cfg: &SamplerConfig,
    sched: &NoiseSchedule,
    rng: &mut R,
) -> Result<LatentGrid<F>> {
    if cfg.mode != SamplerMode::Ddim {
        return Err(Error::InvalidArgument("ddim_sample needs a ddim sampler config".into()));
    }
    cfg.validate(sched.timesteps())?;
    let grid = timestep_grid(sched.timesteps(), cfg.steps);
    let mut x = x_init.clone();
    for pair in grid.windows(2) {
        let (t, s) = (pair[0], pair[1]);
        let pred = guided(denoiser, &x, source, t, cond, cfg.guidance_w)?;
        let v = as_v(denoiser.objective(), pred, &x, t, sched)?;
        x = ddim_step(&x, &v, t, s, sched, cfg.eta, rng)?;
    }
    Ok(x)
}

/// Brownian-bridge posterior at `s_next` pinned at `x0_pred` (time 0) and
/// `x_t` (time `t`). Returns the mean and the per-entry standard deviation.
pub fn i2sb_posterior<F: Scalar>(
    x0_pred: &LatentGrid<F>,
    x_t: &LatentGrid<F>,
    t: usize,
    s_next: usize,
    bridge: &BridgeSchedule,
) -> Result<(LatentGrid<F>, f64)> {
    bridge.check_t(t)?;
    if s_next >= t {
        return Err(Error::StepOrder { current: t, next: s_next });
    }
    let (f_t, f_s) = (bridge.var_fwd(t), bridge.var_fwd(s_next));
    if f_t <= 0.0 {
        return Err(Error::Degenerate(format!("bridge variance is zero at t={t}")));
    }
    let w0 = (f_t - f_s) / f_t;
    let w1 = f_s / f_t;
    let std = (f_s * (f_t - f_s) / f_t).max(0.0).sqrt();
    Ok((x0_pred.lin_comb(F::of(w0), x_t, F::of(w1))?, std))
}

/// Bridge sampling from the source `x1` at `T` to a prediction at `0`.
pub fn i2sb_sample<F: Scalar, D: Denoise<F> + ?Sized, R: Rng + ?Sized>(
    denoiser: &D,
    x1: &LatentGrid<F>,
    cond: &StyleEmbedding,
    cfg: &SamplerConfig,
    bridge: &BridgeSchedule,
    rng: &mut R,
) -> Result<LatentGrid<F>> {
    if cfg.mode != SamplerMode::I2sb {
        return Err(Error::InvalidArgument("i2sb_sample needs an i2sb sampler config".into()));
    }
    if denoiser.objective() != Objective::X0Prediction {
        return Err(Error::InvalidArgument("bridge sampling needs an x0-prediction denoiser".into()));
    }
    cfg.validate(bridge.timesteps())?;
    let mut x = x1.clone();
    if cfg.add_x1_noise {
        x = perturb_source(&x, cfg.x1_noise_std, rng)?;
    }
    let grid = timestep_grid(bridge.timesteps(), cfg.steps);
    for pair in grid.windows(2) {
        let (t, s) = (pair[0], pair[1]);
        let x0_pred = guided(denoiser, &x, None, t, cond, cfg.guidance_w)?;
        let (mean, std) = i2sb_posterior(&x0_pred, &x, t, s, bridge)?;
        x = if cfg.ot_ode || std == 0.0 {
            mean
        } else {
            let z = mean.noise_like(rng);
            mean.lin_comb(F::one(), &z, F::of(std))?
        };
    }
    Ok(x)
}

/// Adds `N(0, std^2)` noise to every column of the source, padding included.
pub fn perturb_source<F: Scalar, R: Rng + ?Sized>(x1: &LatentGrid<F>, std: f64, rng: &mut R) -> Result<LatentGrid<F>> {
    let (c, h, w) = x1.dims();
    let z = LatentGrid::noise(c, h, w, w, rng)?;
    x1.lin_comb(F::one(), &z, F::of(std))
}
