//! The v-/x0-prediction network: an MLP trunk over the flattened latent with
//! a sinusoidal timestep embedding and a projected style condition added to
//! the first hidden layer.
//!
//! With a single conditioning token, cross-attention reduces to adding a
//! learned projection of the token, which is what `EmbedInject` does.

mod gradcheck;
mod oracle;

pub use gradcheck::{compare_gradients, grad_check, GradCheckOptions, GradCheckReport};
pub use oracle::{analytic_gaussian_denoiser, GaussianBridgeOracle, GaussianOracle};

use std::fmt;
use std::str::FromStr;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::embedding::StyleEmbedding;
use crate::error::{Error, Result};
use crate::grid::LatentGrid;
use crate::scalar::Scalar;
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CondMode {
    /// `[x_t ; source]` on the channel axis (2C input channels).
    ConcatChannels,
    /// `x_t` alone; the source travels in the state (bridge sampling).
    EmbedInject,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Objective {
    VPrediction,
    X0Prediction,
}

impl CondMode {
    pub fn code(self) -> u32 {
        match self {
            Self::ConcatChannels => 0,
            Self::EmbedInject => 1,
        }
    }

    pub fn from_code(code: u32) -> Result<Self> {
        match code {
            0 => Ok(Self::ConcatChannels),
            1 => Ok(Self::EmbedInject),
            _ => Err(Error::Format(format!("unknown conditioning mode code {code}"))),
        }
    }
}

impl Objective {
    pub fn code(self) -> u32 {
        match self {
            Self::VPrediction => 0,
            Self::X0Prediction => 1,
        }
    }

    pub fn from_code(code: u32) -> Result<Self> {
        match code {
            0 => Ok(Self::VPrediction),
            1 => Ok(Self::X0Prediction),
            _ => Err(Error::Format(format!("unknown objective code {code}"))),
        }
    }
}

impl FromStr for CondMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "concat_channels" => Ok(Self::ConcatChannels),
            "embed_inject" => Ok(Self::EmbedInject),
            other => Err(Error::InvalidArgument(format!("unknown conditioning mode {other:?}"))),
        }
    }
}

impl fmt::Display for Objective {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Self::VPrediction => "v_prediction",
            Self::X0Prediction => "x0_prediction",
        })
    }
}

/// Anything that maps a noisy state to a prediction in its objective.
pub trait Denoise<F: Scalar> {
    fn objective(&self) -> Objective;

    fn predict(
        &self,
        x_t: &LatentGrid<F>,
        source: Option<&LatentGrid<F>>,
        t: usize,
        cond: &StyleEmbedding,
    ) -> Result<LatentGrid<F>>;
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DenoiserConfig {
    pub channels: usize,
    pub height: usize,
    pub width: usize,
    #[serde(default = "default_hidden")]
    pub hidden: usize,
    #[serde(default = "default_time_dim")]
    pub time_dim: usize,
    pub embed_dim: usize,
    pub timesteps: usize,
    pub cond_mode: CondMode,
    pub objective: Objective,
}

fn default_hidden() -> usize {
    256
}

fn default_time_dim() -> usize {
    64
}

impl DenoiserConfig {
    pub fn grid_len(&self) -> usize {
        self.channels * self.height * self.width
    }

    pub fn input_len(&self) -> usize {
        match self.cond_mode {
            CondMode::ConcatChannels => 2 * self.grid_len(),
            CondMode::EmbedInject => self.grid_len(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.grid_len() == 0 || self.hidden == 0 || self.embed_dim == 0 {
            return Err(Error::Config("denoiser dimensions must be positive".into()));
        }
        if self.time_dim == 0 || !self.time_dim.is_multiple_of(2) {
            return Err(Error::Config(format!("time_dim must be even and positive, got {}", self.time_dim)));
        }
        if self.timesteps < 2 {
            return Err(Error::Config("denoiser timesteps must be >= 2".into()));
        }
        Ok(())
    }
}

/// Sinusoidal embedding of an integer timestep: `[sin(t f_i) ; cos(t f_i)]`.
pub fn timestep_embedding(t: usize, dim: usize) -> Vec<f64> {
    let half = dim / 2;
    let mut out = vec![0.0; dim];
    for i in 0..half {
        let freq = (-(10_000f64.ln()) * i as f64 / half as f64).exp();
        let arg = t as f64 * freq;
        out[i] = arg.sin();
        out[half + i] = arg.cos();
    }
    out
}

pub const PARAM_NAMES: [&str; 8] = [
    "trunk.0.weight",
    "trunk.0.bias",
    "time_proj.weight",
    "cond_proj.weight",
    "trunk.1.weight",
    "trunk.1.bias",
    "head.weight",
    "head.bias",
];

/// Network weights. Also used as the container for their gradients.
#[derive(Debug, Clone, PartialEq)]
pub struct DenoiserParams<F> {
    config: DenoiserConfig,
    w_in: Tensor<F>,
    b_in: Tensor<F>,
    w_time: Tensor<F>,
    w_cond: Tensor<F>,
    w_mid: Tensor<F>,
    b_mid: Tensor<F>,
    w_out: Tensor<F>,
    b_out: Tensor<F>,
}

fn glorot<F: Scalar, R: Rng + ?Sized>(fan_in: usize, fan_out: usize, rng: &mut R) -> Tensor<F> {
    let bound = (6.0 / (fan_in + fan_out) as f64).sqrt();
    Tensor::from_fn(vec![fan_in, fan_out], |_| F::of(rng.gen_range(-bound..=bound)))
}

impl<F: Scalar> DenoiserParams<F> {
    /// Glorot-uniform trunk with a zero head, so the initial prediction is
    /// exactly zero.
    pub fn init<R: Rng + ?Sized>(config: DenoiserConfig, rng: &mut R) -> Result<Self> {
        Self::init_with(config, rng, true)
    }

    /// Glorot-uniform everywhere, including the head. Used for gradient
    /// checks, where a zero head would zero every upstream gradient.
    pub fn init_random<R: Rng + ?Sized>(config: DenoiserConfig, rng: &mut R) -> Result<Self> {
        Self::init_with(config, rng, false)
    }

    fn init_with<R: Rng + ?Sized>(config: DenoiserConfig, rng: &mut R, zero_head: bool) -> Result<Self> {
        config.validate()?;
        let (d_in, d_h, d_out) = (config.input_len(), config.hidden, config.grid_len());
        let w_in = glorot(d_in, d_h, rng);
        let w_time = glorot(config.time_dim, d_h, rng);
        let w_cond = glorot(config.embed_dim, d_h, rng);
        let w_mid = glorot(d_h, d_h, rng);
        let w_out = if zero_head { Tensor::zeros(vec![d_h, d_out]) } else { glorot(d_h, d_out, rng) };
        let mut b_out = Tensor::zeros(vec![d_out]);
        if !zero_head {
            b_out = Tensor::from_fn(vec![d_out], |_| F::of(rng.gen_range(-0.1..0.1)));
        }
        Ok(Self {
            w_in,
            b_in: Tensor::zeros(vec![d_h]),
            w_time,
            w_cond,
            w_mid,
            b_mid: Tensor::zeros(vec![d_h]),
            w_out,
            b_out,
            config,
        })
    }

    /// All-zero tensors with this config's shapes.
    pub fn zeros(config: DenoiserConfig) -> Result<Self> {
        config.validate()?;
        let (d_in, d_h, d_out) = (config.input_len(), config.hidden, config.grid_len());
        Ok(Self {
            w_in: Tensor::zeros(vec![d_in, d_h]),
            b_in: Tensor::zeros(vec![d_h]),
            w_time: Tensor::zeros(vec![config.time_dim, d_h]),
            w_cond: Tensor::zeros(vec![config.embed_dim, d_h]),
            w_mid: Tensor::zeros(vec![d_h, d_h]),
            b_mid: Tensor::zeros(vec![d_h]),
            w_out: Tensor::zeros(vec![d_h, d_out]),
            b_out: Tensor::zeros(vec![d_out]),
            config,
        })
    }

    pub fn zeros_like(&self) -> Self {
        Self::zeros(self.config.clone()).expect("config already validated")
    }

    /// Rebuilds parameters from named tensors, checking every shape.
    pub fn from_named(config: DenoiserConfig, mut named: Vec<(String, Tensor<F>)>) -> Result<Self> {
        let mut out = Self::zeros(config)?;
        for (name, slot) in PARAM_NAMES.iter().zip(out.tensors_mut()) {
            let pos = named
                .iter()
                .position(|(n, _)| n == name)
                .ok_or_else(|| Error::Format(format!("missing tensor {name}")))?;
            let (_, tensor) = named.swap_remove(pos);
            if tensor.shape() != slot.shape() {
                return Err(Error::Shape(format!(
                    "{name}: expected {:?}, got {:?}",
                    slot.shape(),
                    tensor.shape()
                )));
            }
            *slot = tensor;
        }
        Ok(out)
    }

    pub fn config(&self) -> &DenoiserConfig {
        &self.config
    }

    pub fn tensors(&self) -> [&Tensor<F>; 8] {
        [
            &self.w_in,
            &self.b_in,
            &self.w_time,
            &self.w_cond,
            &self.w_mid,
            &self.b_mid,
            &self.w_out,
            &self.b_out,
        ]
    }

    pub fn tensors_mut(&mut self) -> [&mut Tensor<F>; 8] {
        [
            &mut self.w_in,
            &mut self.b_in,
            &mut self.w_time,
            &mut self.w_cond,
            &mut self.w_mid,
            &mut self.b_mid,
            &mut self.w_out,
            &mut self.b_out,
        ]
    }

    pub fn named(&self) -> impl Iterator<Item = (&'static str, &Tensor<F>)> {
        PARAM_NAMES.into_iter().zip(self.tensors())
    }

    pub fn num_params(&self) -> usize {
        self.tensors().iter().map(|t| t.len()).sum()
    }

    pub fn is_finite(&self) -> bool {
        self.tensors().iter().all(|t| t.is_finite())
    }

    pub fn scale(&mut self, k: F) {
        for t in self.tensors_mut() {
            t.scale(k);
        }
    }

    pub fn cast<G: Scalar>(&self) -> DenoiserParams<G> {
        let [w_in, b_in, w_time, w_cond, w_mid, b_mid, w_out, b_out] = self.tensors().map(|t| t.cast());
        DenoiserParams { config: self.config.clone(), w_in, b_in, w_time, w_cond, w_mid, b_mid, w_out, b_out }
    }

    fn check_input(&self, input: &DenoiserInput<'_, F>) -> Result<()> {
        let cfg = &self.config;
        if input.x_t.dims() != (cfg.channels, cfg.height, cfg.width) {
            return Err(Error::Shape(format!(
                "x_t is {:?}, denoiser expects {:?}",
                input.x_t.dims(),
                (cfg.channels, cfg.height, cfg.width)
            )));
        }
        if input.t > cfg.timesteps {
            return Err(Error::TimestepRange { t: input.t, max: cfg.timesteps });
        }
        if input.cond.dim() != cfg.embed_dim {
            return Err(Error::Shape(format!(
                "condition has dimension {}, denoiser expects {}",
                input.cond.dim(),
                cfg.embed_dim
            )));
        }
        match (cfg.cond_mode, input.source) {
            (CondMode::ConcatChannels, None) => {
                Err(Error::InvalidArgument("concat_channels mode requires a source grid".into()))
            }
            (CondMode::ConcatChannels, Some(src)) => input.x_t.check_same_dims(src),
            (CondMode::EmbedInject, Some(_)) => {
                Err(Error::InvalidArgument("embed_inject mode takes no source grid".into()))
            }
            (CondMode::EmbedInject, None) => Ok(()),
        }
    }

    /// Forward pass over a batch, keeping what the backward pass needs.
    pub fn forward_batch(&self, inputs: &[DenoiserInput<'_, F>]) -> Result<(Vec<LatentGrid<F>>, ForwardCache<F>)> {
        if inputs.is_empty() {
            return Err(Error::InvalidArgument("empty batch".into()));
        }
        for input in inputs {
            self.check_input(input)?;
        }
        let cfg = &self.config;
        let (b, d_in, d_h, d_out, d_t, d_c) =
            (inputs.len(), cfg.input_len(), cfg.hidden, cfg.grid_len(), cfg.time_dim, cfg.embed_dim);

        let mut x = Vec::with_capacity(b * d_in);
        let mut temb = Vec::with_capacity(b * d_t);
        let mut cemb = Vec::with_capacity(b * d_c);
        for input in inputs {
            x.extend_from_slice(input.x_t.as_slice());
            if let Some(src) = input.source {
                x.extend_from_slice(src.as_slice());
            }
            temb.extend(timestep_embedding(input.t, d_t).into_iter().map(F::of));
            // The null condition contributes exactly zero.
            cemb.extend(input.cond.values().iter().map(|&v| if input.cond.is_null() { F::zero() } else { F::of(v) }));
        }

        let mut pre1 = broadcast_rows(self.b_in.data(), b);
        F::gemm(b, d_in, d_h, F::one(), &x, false, self.w_in.data(), false, F::one(), &mut pre1);
        F::gemm(b, d_t, d_h, F::one(), &temb, false, self.w_time.data(), false, F::one(), &mut pre1);
        F::gemm(b, d_c, d_h, F::one(), &cemb, false, self.w_cond.data(), false, F::one(), &mut pre1);
        let act1: Vec<F> = pre1.iter().map(|&v| swish(v)).collect();

        let mut pre2 = broadcast_rows(self.b_mid.data(), b);
        F::gemm(b, d_h, d_h, F::one(), &act1, false, self.w_mid.data(), false, F::one(), &mut pre2);
        let act2: Vec<F> = pre2.iter().map(|&v| swish(v)).collect();

        let mut out = broadcast_rows(self.b_out.data(), b);
        F::gemm(b, d_h, d_out, F::one(), &act2, false, self.w_out.data(), false, F::one(), &mut out);

        let widths: Vec<usize> = inputs.iter().map(|i| i.x_t.true_width()).collect();
        let preds = out
            .chunks(d_out)
            .zip(&widths)
            .map(|(row, &tw)| LatentGrid::from_vec(cfg.channels, cfg.height, cfg.width, tw, row.to_vec()))
            .collect::<Result<Vec<_>>>()?;
        let cache = ForwardCache { batch: b, x, temb, cemb, pre1, act1, pre2, act2, widths };
        Ok((preds, cache))
    }

    /// Exact gradients of a loss whose derivative with respect to the
    /// (padding-masked) outputs is `d_out`, laid out `[batch, C*H*W]`.
    pub fn backward(&self, cache: &ForwardCache<F>, d_out: &[F]) -> Result<DenoiserParams<F>> {
        let cfg = &self.config;
        let (b, d_in, d_h, d_o, d_t, d_c) =
            (cache.batch, cfg.input_len(), cfg.hidden, cfg.grid_len(), cfg.time_dim, cfg.embed_dim);
        if d_out.len() != b * d_o || cache.x.len() != b * d_in {
            return Err(Error::Shape(format!(
                "output gradient has {} values, cached batch of {b} needs {}",
                d_out.len(),
                b * d_o
            )));
        }
        // Outputs past each example's true width were masked to zero.
        let mut g_out = d_out.to_vec();
        let (c, h, w) = (cfg.channels, cfg.height, cfg.width);
        for (row, &tw) in g_out.chunks_mut(d_o).zip(&cache.widths) {
            if tw < w {
                for ci in 0..c {
                    for hi in 0..h {
                        let base = (ci * h + hi) * w;
                        row[base + tw..base + w].iter_mut().for_each(|v| *v = F::zero());
                    }
                }
            }
        }

        let mut grads = self.zeros_like();
        F::gemm(d_h, b, d_o, F::one(), &cache.act2, true, &g_out, false, F::zero(), grads.w_out.data_mut());
        column_sums(&g_out, d_o, grads.b_out.data_mut());

        let mut d_act2 = vec![F::zero(); b * d_h];
        F::gemm(b, d_o, d_h, F::one(), &g_out, false, self.w_out.data(), true, F::zero(), &mut d_act2);
        let d_pre2: Vec<F> = d_act2.iter().zip(&cache.pre2).map(|(&g, &z)| g * swish_grad(z)).collect();
        F::gemm(d_h, b, d_h, F::one(), &cache.act1, true, &d_pre2, false, F::zero(), grads.w_mid.data_mut());
        column_sums(&d_pre2, d_h, grads.b_mid.data_mut());

        let mut d_act1 = vec![F::zero(); b * d_h];
        F::gemm(b, d_h, d_h, F::one(), &d_pre2, false, self.w_mid.data(), true, F::zero(), &mut d_act1);
        let d_pre1: Vec<F> = d_act1.iter().zip(&cache.pre1).map(|(&g, &z)| g * swish_grad(z)).collect();
        F::gemm(d_in, b, d_h, F::one(), &cache.x, true, &d_pre1, false, F::zero(), grads.w_in.data_mut());
        F::gemm(d_t, b, d_h, F::one(), &cache.temb, true, &d_pre1, false, F::zero(), grads.w_time.data_mut());
        F::gemm(d_c, b, d_h, F::one(), &cache.cemb, true, &d_pre1, false, F::zero(), grads.w_cond.data_mut());
        column_sums(&d_pre1, d_h, grads.b_in.data_mut());
        Ok(grads)
    }

    /// Condition-projection contribution to the first hidden layer.
    pub fn cond_contribution(&self, cond: &StyleEmbedding) -> Vec<F> {
        let d_h = self.config.hidden;
        let mut out = vec![F::zero(); d_h];
        if cond.is_null() {
            return out;
        }
        let c: Vec<F> = cond.values().iter().map(|&v| F::of(v)).collect();
        F::gemm(1, self.config.embed_dim, d_h, F::one(), &c, false, self.w_cond.data(), false, F::zero(), &mut out);
        out
    }
}

impl<F: Scalar> Denoise<F> for DenoiserParams<F> {
    fn objective(&self) -> Objective {
        self.config.objective
    }

    fn predict(
        &self,
        x_t: &LatentGrid<F>,
        source: Option<&LatentGrid<F>>,
        t: usize,
        cond: &StyleEmbedding,
    ) -> Result<LatentGrid<F>> {
        let input = DenoiserInput { x_t, source, t, cond };
        let (mut preds, _) = self.forward_batch(std::slice::from_ref(&input))?;
        Ok(preds.pop().expect("batch of one"))
    }
}

#[derive(Debug, Clone, Copy)]
pub struct DenoiserInput<'a, F> {
    pub x_t: &'a LatentGrid<F>,
    pub source: Option<&'a LatentGrid<F>>,
    pub t: usize,
    pub cond: &'a StyleEmbedding,
}

/// Activations saved by [`DenoiserParams::forward_batch`].
#[derive(Debug, Clone)]
pub struct ForwardCache<F> {
    batch: usize,
    x: Vec<F>,
    temb: Vec<F>,
    cemb: Vec<F>,
    pre1: Vec<F>,
    act1: Vec<F>,
    pre2: Vec<F>,
    act2: Vec<F>,
    widths: Vec<usize>,
}

impl<F> ForwardCache<F> {
    pub fn batch_size(&self) -> usize {
        self.batch
    }
}

/// One batch of network inputs with regression targets.
#[derive(Debug, Clone)]
pub struct Batch<F> {
    pub x_t: Vec<LatentGrid<F>>,
    pub sources: Option<Vec<LatentGrid<F>>>,
    pub t: Vec<usize>,
    pub conds: Vec<StyleEmbedding>,
    pub targets: Vec<LatentGrid<F>>,
}

impl<F: Scalar> Batch<F> {
    pub fn len(&self) -> usize {
        self.x_t.len()
    }

    pub fn is_empty(&self) -> bool {
        self.x_t.is_empty()
    }

    pub fn inputs(&self) -> Vec<DenoiserInput<'_, F>> {
        (0..self.len())
            .map(|i| DenoiserInput {
                x_t: &self.x_t[i],
                source: self.sources.as_ref().map(|s| &s[i]),
                t: self.t[i],
                cond: &self.conds[i],
            })
            .collect()
    }

    /// Drops the source grids (for embed-inject networks).
    pub fn without_sources(mut self) -> Self {
        self.sources = None;
        self
    }
}

/// Mean squared error over the columns below each target's true width.
/// Returns the loss and its gradient with respect to the predictions.
pub fn masked_mse<F: Scalar>(preds: &[LatentGrid<F>], targets: &[LatentGrid<F>]) -> Result<(f64, Vec<F>)> {
    if preds.len() != targets.len() || preds.is_empty() {
        return Err(Error::Shape(format!("{} predictions for {} targets", preds.len(), targets.len())));
    }
    let count: usize = targets.iter().map(|t| t.channels() * t.height() * t.true_width()).sum();
    let norm = 1.0 / count as f64;
    let mut loss = 0.0;
    let mut grad = Vec::with_capacity(preds.len() * preds[0].len());
    for (p, t) in preds.iter().zip(targets) {
        p.check_same_dims(t)?;
        let (c, h, w) = t.dims();
        let tw = t.true_width();
        let ps = p.as_slice();
        let ts = t.as_slice();
        for ci in 0..c {
            for hi in 0..h {
                for wi in 0..w {
                    let i = (ci * h + hi) * w + wi;
                    if wi < tw {
                        let diff = ps[i].f64() - ts[i].f64();
                        loss += diff * diff;
                        grad.push(F::of(2.0 * diff * norm));
                    } else {
                        grad.push(F::zero());
                    }
                }
            }
        }
    }
    Ok((loss * norm, grad))
}

fn broadcast_rows<F: Scalar>(bias: &[F], rows: usize) -> Vec<F> {
    let mut out = Vec::with_capacity(bias.len() * rows);
    for _ in 0..rows {
        out.extend_from_slice(bias);
    }
    out
}

fn column_sums<F: Scalar>(m: &[F], cols: usize, out: &mut [F]) {
    out.iter_mut().for_each(|v| *v = F::zero());
    for row in m.chunks(cols) {
        for (o, &v) in out.iter_mut().zip(row) {
            *o += v;
        }
    }
}

fn sigmoid<F: Scalar>(x: F) -> F {
    F::one() / (F::one() + (-x).exp())
}

fn swish<F: Scalar>(x: F) -> F {
    x * sigmoid(x)
}

fn swish_grad<F: Scalar>(x: F) -> F {
    let s = sigmoid(x);
    s * (F::one() + x * (F::one() - s))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn config(mode: CondMode) -> DenoiserConfig {
        DenoiserConfig {
            channels: 2,
            height: 3,
            width: 4,
            hidden: 16,
            time_dim: 8,
            embed_dim: 5,
            timesteps: 100,
            cond_mode: mode,
            objective: Objective::VPrediction,
        }
    }

    fn grids(n: usize, rng: &mut ChaCha8Rng) -> Vec<LatentGrid<f64>> {
        (0..n).map(|i| LatentGrid::noise(2, 3, 4, 2 + i % 3, rng).unwrap()).collect()
    }

    #[test]
    fn zero_weights_give_zero_output() {
        let params = DenoiserParams::<f64>::zeros(config(CondMode::EmbedInject)).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let x = LatentGrid::noise(2, 3, 4, 4, &mut rng).unwrap();
        let cond = StyleEmbedding::new(vec![1.0; 5]).unwrap();
        let out = params.predict(&x, None, 10, &cond).unwrap();
        assert!(out.as_slice().iter().all(|&v| v == 0.0));
        // Default init has a zero head too.
        let params = DenoiserParams::<f64>::init(config(CondMode::EmbedInject), &mut rng).unwrap();
        let out = params.predict(&x, None, 10, &cond).unwrap();
        assert!(out.as_slice().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn concat_mode_input_has_twice_the_channels() {
        let cfg = DenoiserConfig { channels: 8, height: 16, width: 64, ..config(CondMode::ConcatChannels) };
        assert_eq!(cfg.input_len(), 2 * 8 * 16 * 64);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let params = DenoiserParams::<f32>::init(cfg, &mut rng).unwrap();
        assert_eq!(params.tensors()[0].shape(), &[2 * 8 * 16 * 64, 16]);
    }

    #[test]
    fn source_presence_must_match_mode() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let x = LatentGrid::<f64>::noise(2, 3, 4, 4, &mut rng).unwrap();
        let cond = StyleEmbedding::null(5);
        let concat = DenoiserParams::<f64>::init(config(CondMode::ConcatChannels), &mut rng).unwrap();
        assert!(matches!(concat.predict(&x, None, 1, &cond), Err(Error::InvalidArgument(_))));
        let inject = DenoiserParams::<f64>::init(config(CondMode::EmbedInject), &mut rng).unwrap();
        assert!(inject.predict(&x, Some(&x), 1, &cond).is_err());
        assert!(matches!(inject.predict(&x, None, 101, &cond), Err(Error::TimestepRange { .. })));
        let wrong = LatentGrid::<f64>::zeros(2, 3, 5, 5).unwrap();
        assert!(matches!(inject.predict(&wrong, None, 1, &cond), Err(Error::Shape(_))));
    }

    #[test]
    fn batch_permutation_permutes_outputs() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let params = DenoiserParams::<f64>::init_random(config(CondMode::ConcatChannels), &mut rng).unwrap();
        let xs = grids(4, &mut rng);
        let srcs = grids(4, &mut rng);
        let conds: Vec<StyleEmbedding> = (0..4)
            .map(|i| if i == 2 { StyleEmbedding::null(5) } else { StyleEmbedding::new(vec![i as f64; 5]).unwrap() })
            .collect();
        let inputs: Vec<_> = (0..4)
            .map(|i| DenoiserInput { x_t: &xs[i], source: Some(&srcs[i]), t: 10 * i, cond: &conds[i] })
            .collect();
        let (out, _) = params.forward_batch(&inputs).unwrap();
        let order = [2, 0, 3, 1];
        let permuted: Vec<_> = order.iter().map(|&i| inputs[i]).collect();
        let (out_p, _) = params.forward_batch(&permuted).unwrap();
        for (k, &i) in order.iter().enumerate() {
            assert!(out_p[k].max_abs_diff(&out[i]) < 1e-12);
        }
    }

    #[test]
    fn null_condition_adds_nothing() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let params = DenoiserParams::<f64>::init_random(config(CondMode::EmbedInject), &mut rng).unwrap();
        assert!(params.cond_contribution(&StyleEmbedding::null(5)).iter().all(|&v| v == 0.0));
        assert!(params.cond_contribution(&StyleEmbedding::new(vec![0.5; 5]).unwrap()).iter().any(|&v| v != 0.0));
    }

    fn batch(rng: &mut ChaCha8Rng) -> Batch<f64> {
        Batch {
            x_t: grids(3, rng),
            sources: Some(grids(3, rng)),
            t: vec![0, 40, 100],
            conds: vec![StyleEmbedding::new(vec![0.3, -0.2, 0.1, 0.9, -1.0]).unwrap(), StyleEmbedding::null(5), StyleEmbedding::new(vec![1.0; 5]).unwrap()],
            targets: grids(3, rng),
        }
    }

    #[test]
    fn zero_loss_gradient_gives_zero_gradients() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let params = DenoiserParams::<f64>::init_random(config(CondMode::ConcatChannels), &mut rng).unwrap();
        let b = batch(&mut rng);
        let (_, cache) = params.forward_batch(&b.inputs()).unwrap();
        let grads = params.backward(&cache, &vec![0.0; 3 * 24]).unwrap();
        assert!(grads.tensors().iter().all(|t| t.data().iter().all(|&v| v == 0.0)));
    }

    #[test]
    fn gradients_are_linear_in_loss_scale() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let params = DenoiserParams::<f64>::init_random(config(CondMode::ConcatChannels), &mut rng).unwrap();
        let b = batch(&mut rng);
        let (preds, cache) = params.forward_batch(&b.inputs()).unwrap();
        let (_, d) = masked_mse(&preds, &b.targets).unwrap();
        let d2: Vec<f64> = d.iter().map(|v| 2.0 * v).collect();
        let g1 = params.backward(&cache, &d).unwrap();
        let g2 = params.backward(&cache, &d2).unwrap();
        for (a, b) in g1.tensors().iter().zip(g2.tensors()) {
            for (x, y) in a.data().iter().zip(b.data()) {
                assert!((2.0 * x - y).abs() <= 1e-12 * (1.0 + y.abs()));
            }
        }
    }

    #[test]
    fn gradient_for_wrong_batch_is_rejected() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let params = DenoiserParams::<f64>::init_random(config(CondMode::ConcatChannels), &mut rng).unwrap();
        let b = batch(&mut rng);
        let (_, cache) = params.forward_batch(&b.inputs()).unwrap();
        assert!(matches!(params.backward(&cache, &[0.0; 24]), Err(Error::Shape(_))));
    }

    #[test]
    fn masked_mse_ignores_padding() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let target = LatentGrid::<f64>::noise(1, 2, 5, 3, &mut rng).unwrap();
        let mut pred_data = target.as_slice().to_vec();
        // Garbage in the padded columns of the prediction.
        for h in 0..2 {
            pred_data[h * 5 + 4] = 7.0;
        }
        let pred = LatentGrid::from_vec(1, 2, 5, 5, pred_data).unwrap();
        let (loss, grad) = masked_mse(&[pred], &[target]).unwrap();
        assert_eq!(loss, 0.0);
        assert!(grad.iter().all(|&g| g == 0.0));
    }
}
