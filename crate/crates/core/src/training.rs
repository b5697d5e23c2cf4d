//! Objective construction, Adam, and the training loop.

use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::denoiser::{masked_mse, Batch, CondMode, Denoise, DenoiserParams, Objective};
use crate::embedding::StyleEmbedding;
use crate::error::{Error, Result};
use crate::grid::LatentGrid;
use crate::scalar::Scalar;
use crate::schedules::{BridgeSchedule, NoiseSchedule};
use crate::testbed::{LatentPair, Testbed};

/// Loss rows are recorded on steps divisible by this.
pub const LOG_EVERY: u64 = 50;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    #[serde(default = "default_lr")]
    pub learning_rate: f64,
    #[serde(default = "default_batch")]
    pub batch_size: usize,
    #[serde(default = "default_steps")]
    pub total_steps: u64,
    #[serde(default = "default_dropout")]
    pub cond_dropout: f64,
    /// Steps between checkpoints; 0 writes only the initial and final ones.
    #[serde(default = "default_checkpoint_every")]
    pub checkpoint_every: u64,
    #[serde(default)]
    pub seed: u64,
}

fn default_lr() -> f64 {
    1e-4
}

fn default_batch() -> usize {
    64
}

fn default_steps() -> u64 {
    5000
}

fn default_dropout() -> f64 {
    0.1
}

fn default_checkpoint_every() -> u64 {
    1000
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            learning_rate: default_lr(),
            batch_size: default_batch(),
            total_steps: default_steps(),
            cond_dropout: default_dropout(),
            checkpoint_every: default_checkpoint_every(),
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::Config(format!("learning_rate must be > 0, got {}", self.learning_rate)));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be at least 1".into()));
        }
        if !(0.0..=1.0).contains(&self.cond_dropout) {
            return Err(Error::Config(format!("cond_dropout must be in [0, 1], got {}", self.cond_dropout)));
        }
        Ok(())
    }
}

/// What the network is trained to do.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum TrainMode {
    /// Noise-to-data diffusion conditioned on the source grid.
    PaletteDdim,
    /// Source-to-target bridge. `ot_ode` drops the bridge noise from the
    /// training states; `x1_noise_std > 0` perturbs the source first.
    I2sb { ot_ode: bool, x1_noise_std: f64 },
}

impl TrainMode {
    pub fn code(self) -> u32 {
        match self {
            Self::PaletteDdim => 0,
            Self::I2sb { .. } => 1,
        }
    }
}

/// One clean training example before noising.
#[derive(Debug, Clone)]
pub struct TrainExample<F> {
    pub target: LatentGrid<F>,
    pub source: Option<LatentGrid<F>>,
    pub cond: StyleEmbedding,
}

impl<F: Scalar> TrainExample<F> {
    pub fn from_pair(pair: &LatentPair) -> Self {
        Self { target: pair.z_audio.cast(), source: Some(pair.z_text.cast()), cond: pair.embed.clone() }
    }
}

/// Anything that yields training examples.
pub trait ExampleSource<F: Scalar> {
    fn draw<R: Rng + ?Sized>(&mut self, n: usize, rng: &mut R) -> Result<Vec<TrainExample<F>>>;
}

/// Fixed pool sampled uniformly with replacement.
#[derive(Debug, Clone)]
pub struct ExamplePool<F> {
    examples: Vec<TrainExample<F>>,
}

impl<F: Scalar> ExamplePool<F> {
    pub fn new(examples: Vec<TrainExample<F>>) -> Result<Self> {
        if examples.is_empty() {
            return Err(Error::InvalidArgument("empty training pool".into()));
        }
        Ok(Self { examples })
    }

    pub fn from_pairs(pairs: &[LatentPair]) -> Result<Self> {
        Self::new(pairs.iter().map(TrainExample::from_pair).collect())
    }

    pub fn examples(&self) -> &[TrainExample<F>] {
        &self.examples
    }
}

impl<F: Scalar> ExampleSource<F> for ExamplePool<F> {
    fn draw<R: Rng + ?Sized>(&mut self, n: usize, rng: &mut R) -> Result<Vec<TrainExample<F>>> {
        Ok((0..n).map(|_| self.examples[rng.gen_range(0..self.examples.len())].clone()).collect())
    }
}

/// Fresh testbed pairs on every draw.
impl<F: Scalar> ExampleSource<F> for &Testbed {
    fn draw<R: Rng + ?Sized>(&mut self, n: usize, rng: &mut R) -> Result<Vec<TrainExample<F>>> {
        (0..n).map(|_| Ok(TrainExample::from_pair(&self.synth_pair(rng)?))).collect()
    }
}

/// `x0 ~ N(mu, s^2 I)` on a fixed grid shape, always with the null condition.
#[derive(Debug, Clone)]
pub struct GaussianSource {
    pub mu: Vec<f64>,
    pub s: f64,
    pub dims: (usize, usize, usize),
    pub embed_dim: usize,
}

impl GaussianSource {
    pub fn sample<F: Scalar, R: Rng + ?Sized>(&self, rng: &mut R) -> Result<LatentGrid<F>> {
        let (c, h, w) = self.dims;
        let z = LatentGrid::<f64>::noise(c, h, w, w, rng)?;
        let data = z.as_slice().iter().zip(&self.mu).map(|(&e, &m)| F::of(m + self.s * e)).collect();
        LatentGrid::from_vec(c, h, w, w, data)
    }
}

impl<F: Scalar> ExampleSource<F> for GaussianSource {
    fn draw<R: Rng + ?Sized>(&mut self, n: usize, rng: &mut R) -> Result<Vec<TrainExample<F>>> {
        (0..n)
            .map(|_| {
                Ok(TrainExample { target: self.sample(rng)?, source: None, cond: StyleEmbedding::null(self.embed_dim) })
            })
            .collect()
    }
}

/// Schedules needed by either training mode.
#[derive(Debug, Clone, Copy)]
pub struct Schedules<'a> {
    pub noise: &'a NoiseSchedule,
    pub bridge: &'a BridgeSchedule,
}

/// A noised batch plus how many conditions were dropped to null.
#[derive(Debug, Clone)]
pub struct TrainingBatch<F> {
    pub batch: Batch<F>,
    pub null_count: usize,
}

/// Draws `t`, condition dropout and noise for each example and builds the
/// regression batch.
///
/// Palette: `x_t = alpha z_audio + sigma eps`, target v (or x0), source
/// `z_text`. Bridge: `x_t` drawn from the bridge pinned at `z_audio` (time 0)
/// and `z_text` (time T), target `z_audio`, no source grid. Noise covers the
/// full padded width; the loss only sees the target's true width.
pub fn build_training_batch<F: Scalar, R: Rng + ?Sized>(
    examples: &[TrainExample<F>],
    mode: TrainMode,
    objective: Objective,
    cond_mode: CondMode,
    sched: Schedules<'_>,
    cond_dropout: f64,
    rng: &mut R,
) -> Result<TrainingBatch<F>> {
    if examples.is_empty() {
        return Err(Error::InvalidArgument("empty training batch".into()));
    }
    let n = examples.len();
    let mut x_t = Vec::with_capacity(n);
    let mut ts = Vec::with_capacity(n);
    let mut conds = Vec::with_capacity(n);
    let mut targets = Vec::with_capacity(n);
    let mut sources = Vec::with_capacity(n);
    let mut null_count = 0;
    for ex in examples {
        let (c, h, w) = ex.target.dims();
        let timesteps = match mode {
            TrainMode::PaletteDdim => sched.noise.timesteps(),
            TrainMode::I2sb { .. } => sched.bridge.timesteps(),
        };
        let t = rng.gen_range(1..=timesteps);
        let dropped = cond_dropout > 0.0 && rng.gen::<f64>() < cond_dropout;
        let cond = if dropped || ex.cond.is_null() {
            null_count += 1;
            StyleEmbedding::null(ex.cond.dim())
        } else {
            ex.cond.clone()
        };
        let tw = ex.target.true_width();
        match mode {
            TrainMode::PaletteDdim => {
                let eps = LatentGrid::noise(c, h, w, w, rng)?;
                x_t.push(sched.noise.forward_diffuse(&ex.target, &eps, t)?);
                let target = match objective {
                    Objective::VPrediction => sched.noise.v_from(&ex.target, &eps, t)?.with_true_width(tw)?,
                    Objective::X0Prediction => ex.target.clone(),
                };
                targets.push(target);
                if cond_mode == CondMode::ConcatChannels {
                    let src = ex
                        .source
                        .clone()
                        .ok_or_else(|| Error::InvalidArgument("concat conditioning needs a source grid".into()))?;
                    sources.push(src);
                }
            }
            TrainMode::I2sb { ot_ode, x1_noise_std } => {
                if objective != Objective::X0Prediction {
                    return Err(Error::InvalidArgument("bridge training needs an x0-prediction network".into()));
                }
                let x1 = ex
                    .source
                    .as_ref()
                    .ok_or_else(|| Error::InvalidArgument("bridge training needs a source grid".into()))?;
                let x1 = if x1_noise_std > 0.0 {
                    crate::samplers::perturb_source(x1, x1_noise_std, rng)?
                } else {
                    x1.clone()
                };
                let (w0, w1, var) = sched.bridge.marginal(t)?;
                let mut state = ex.target.lin_comb(F::of(w0), &x1, F::of(w1))?;
                if !ot_ode && var > 0.0 {
                    let z = LatentGrid::noise(c, h, w, w, rng)?;
                    state = state.lin_comb(F::one(), &z, F::of(var.sqrt()))?;
                }
                x_t.push(state);
                targets.push(ex.target.clone());
            }
        }
        ts.push(t);
        conds.push(cond);
    }
    let sources = if sources.is_empty() { None } else { Some(sources) };
    Ok(TrainingBatch { batch: Batch { x_t, sources, t: ts, conds, targets }, null_count })
}

/// First and second moments for every parameter, plus the step count.
#[derive(Debug, Clone)]
pub struct AdamState<F> {
    pub m: DenoiserParams<F>,
    pub v: DenoiserParams<F>,
    pub step: u64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl<F: Scalar> AdamState<F> {
    pub fn new(params: &DenoiserParams<F>) -> Self {
        Self { m: params.zeros_like(), v: params.zeros_like(), step: 0, beta1: 0.9, beta2: 0.999, eps: 1e-8 }
    }
}

fn check_compatible<F: Scalar>(a: &DenoiserParams<F>, b: &DenoiserParams<F>) -> Result<()> {
    let same = a.config() == b.config()
        && a.tensors().iter().zip(b.tensors().iter()).all(|(x, y)| x.shape() == y.shape());
    if same {
        Ok(())
    } else {
        Err(Error::Shape("parameter sets have different layouts".into()))
    }
}

/// Bias-corrected Adam update. Non-finite gradients abort before anything
/// is modified.
pub fn adam_step<F: Scalar>(
    params: &mut DenoiserParams<F>,
    grads: &DenoiserParams<F>,
    state: &mut AdamState<F>,
    lr: f64,
) -> Result<()> {
    check_compatible(params, grads)?;
    check_compatible(params, &state.m)?;
    check_compatible(params, &state.v)?;
    for (name, g) in grads.named() {
        if !g.is_finite() {
            return Err(Error::NonFinite(format!("gradient of {name} at step {}", state.step + 1)));
        }
    }
    state.step += 1;
    let (b1, b2, eps) = (state.beta1, state.beta2, state.eps);
    let c1 = 1.0 - b1.powi(state.step.min(i32::MAX as u64) as i32);
    let c2 = 1.0 - b2.powi(state.step.min(i32::MAX as u64) as i32);
    let ms = state.m.tensors_mut();
    let vs = state.v.tensors_mut();
    let ps = params.tensors_mut();
    let gs = grads.tensors();
    for (((p, g), m), v) in ps.into_iter().zip(gs).zip(ms).zip(vs) {
        let (pd, gd, md, vd) = (p.data_mut(), g.data(), m.data_mut(), v.data_mut());
        for i in 0..pd.len() {
            let gi = gd[i].f64();
            let mi = b1 * md[i].f64() + (1.0 - b1) * gi;
            let vi = b2 * vd[i].f64() + (1.0 - b2) * gi * gi;
            md[i] = F::of(mi);
            vd[i] = F::of(vi);
            if lr != 0.0 {
                let update = lr * (mi / c1) / ((vi / c2).sqrt() + eps);
                pd[i] = F::of(pd[i].f64() - update);
            }
        }
    }
    Ok(())
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StepStats {
    pub loss: f64,
    pub null_count: usize,
}

/// Builds a batch, runs forward/backward and applies one Adam update.
pub fn training_step<F: Scalar, R: Rng + ?Sized>(
    params: &mut DenoiserParams<F>,
    adam: &mut AdamState<F>,
    examples: &[TrainExample<F>],
    mode: TrainMode,
    sched: Schedules<'_>,
    cfg: &TrainConfig,
    rng: &mut R,
) -> Result<StepStats> {
    let conf = params.config();
    let tb = build_training_batch(examples, mode, conf.objective, conf.cond_mode, sched, cfg.cond_dropout, rng)?;
    let (preds, cache) = params.forward_batch(&tb.batch.inputs())?;
    let (loss, d_out) = masked_mse(&preds, &tb.batch.targets)?;
    if !loss.is_finite() {
        return Err(Error::NonFinite(format!("training loss at step {}", adam.step + 1)));
    }
    let grads = params.backward(&cache, &d_out)?;
    adam_step(params, &grads, adam, cfg.learning_rate)?;
    Ok(StepStats { loss, null_count: tb.null_count })
}

/// Masked MSE of any predictor on a prepared batch.
pub fn batch_loss<F: Scalar, D: Denoise<F> + ?Sized>(denoiser: &D, batch: &Batch<F>) -> Result<f64> {
    let preds = batch
        .inputs()
        .iter()
        .map(|i| denoiser.predict(i.x_t, i.source, i.t, i.cond))
        .collect::<Result<Vec<_>>>()?;
    Ok(masked_mse(&preds, &batch.targets)?.0)
}

/// Held-out loss of a network on a prepared batch, evaluated in chunks.
pub fn network_loss<F: Scalar>(params: &DenoiserParams<F>, batch: &Batch<F>) -> Result<f64> {
    let inputs = batch.inputs();
    let mut preds = Vec::with_capacity(inputs.len());
    for chunk in inputs.chunks(256) {
        preds.extend(params.forward_batch(chunk)?.0);
    }
    Ok(masked_mse(&preds, &batch.targets)?.0)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossRow {
    pub step: u64,
    pub loss: f64,
    pub seconds: f64,
}

/// Resumable training state: weights, optimizer and random stream.
#[derive(Debug, Clone)]
pub struct Trainer<F> {
    pub params: DenoiserParams<F>,
    pub adam: AdamState<F>,
    pub rng: ChaCha8Rng,
    pub mode: TrainMode,
    pub config: TrainConfig,
    pub losses: Vec<LossRow>,
    pub null_count: u64,
    pub examples_seen: u64,
}

impl<F: Scalar> Trainer<F> {
    pub fn new(params: DenoiserParams<F>, mode: TrainMode, config: TrainConfig) -> Result<Self> {
        config.validate()?;
        let adam = AdamState::new(&params);
        let rng = ChaCha8Rng::seed_from_u64(config.seed);
        Ok(Self { params, adam, rng, mode, config, losses: Vec::new(), null_count: 0, examples_seen: 0 })
    }

    pub fn step(&self) -> u64 {
        self.adam.step
    }

    /// Trains until `config.total_steps`, calling `on_checkpoint` at every
    /// checkpoint interval and once at the end.
    pub fn run<S: ExampleSource<F>>(
        &mut self,
        source: &mut S,
        sched: Schedules<'_>,
        mut on_checkpoint: impl FnMut(&Self) -> Result<()>,
    ) -> Result<()> {
        let start = Instant::now();
        let already = self.losses.last().map_or(0.0, |r| r.seconds);
        while self.adam.step < self.config.total_steps {
            let examples = source.draw(self.config.batch_size, &mut self.rng)?;
            let stats = training_step(
                &mut self.params,
                &mut self.adam,
                &examples,
                self.mode,
                sched,
                &self.config,
                &mut self.rng,
            )?;
            self.null_count += stats.null_count as u64;
            self.examples_seen += examples.len() as u64;
            let step = self.adam.step;
            if step.is_multiple_of(LOG_EVERY) {
                let seconds = already + start.elapsed().as_secs_f64();
                self.losses.push(LossRow { step, loss: stats.loss, seconds });
            }
            let every = self.config.checkpoint_every;
            if every > 0 && step.is_multiple_of(every) && step < self.config.total_steps {
                on_checkpoint(self)?;
            }
        }
        on_checkpoint(self)
    }
}
