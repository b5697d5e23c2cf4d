//! Central finite-difference verification of the analytic backward pass.

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::Result;

use super::{masked_mse, Batch, DenoiserParams, PARAM_NAMES};

#[derive(Debug, Clone, Copy)]
pub struct GradCheckOptions {
    /// Finite-difference step.
    pub step: f64,
    /// Number of randomly chosen parameters; `None` checks every one.
    pub num_params: Option<usize>,
    pub seed: u64,
    /// Gradients smaller than this are compared on an absolute scale of
    /// `abs_floor`. Central differences carry roundoff near
    /// `eps * loss / step`, about 1e-11 at the default step, which swamps
    /// entries whose true gradient is that small.
    pub abs_floor: f64,
}

impl Default for GradCheckOptions {
    fn default() -> Self {
        Self { step: 1e-5, num_params: Some(128), seed: 0, abs_floor: 1e-6 }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    /// Tensor name and flat index of the worst entry.
    pub location: Option<(String, usize)>,
    pub checked: usize,
    pub tolerance: f64,
    pub pass: bool,
}

fn loss(params: &DenoiserParams<f64>, batch: &Batch<f64>) -> Result<f64> {
    let (preds, _) = params.forward_batch(&batch.inputs())?;
    Ok(masked_mse(&preds, &batch.targets)?.0)
}

fn rel_error(analytic: f64, numeric: f64, floor: f64) -> f64 {
    let scale = analytic.abs().max(numeric.abs()).max(floor);
    (analytic - numeric).abs() / scale
}

/// Compares `grads` against central differences of the masked MSE on `batch`.
pub fn compare_gradients(
    params: &DenoiserParams<f64>,
    batch: &Batch<f64>,
    grads: &DenoiserParams<f64>,
    tolerance: f64,
    opts: GradCheckOptions,
) -> Result<GradCheckReport> {
    let sizes: Vec<usize> = params.tensors().iter().map(|t| t.len()).collect();
    let total: usize = sizes.iter().sum();
    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    let mut picks: Vec<usize> = match opts.num_params {
        Some(n) if n < total => sample(&mut rng, total, n).into_vec(),
        _ => (0..total).collect(),
    };
    picks.sort_unstable();

    let mut probe = params.clone();
    let mut worst = 0.0f64;
    let mut location = None;
    for flat in &picks {
        let (mut tensor, mut index) = (0, *flat);
        while index >= sizes[tensor] {
            index -= sizes[tensor];
            tensor += 1;
        }
        let orig = params.tensors()[tensor].data()[index];
        probe.tensors_mut()[tensor].data_mut()[index] = orig + opts.step;
        let up = loss(&probe, batch)?;
        probe.tensors_mut()[tensor].data_mut()[index] = orig - opts.step;
        let down = loss(&probe, batch)?;
        probe.tensors_mut()[tensor].data_mut()[index] = orig;

        let numeric = (up - down) / (2.0 * opts.step);
        let analytic = grads.tensors()[tensor].data()[index];
        let err = rel_error(analytic, numeric, opts.abs_floor);
        if location.is_none() || err > worst {
            worst = err;
            location = Some((PARAM_NAMES[tensor].to_string(), index));
        }
    }
    Ok(GradCheckReport {
        max_rel_error: worst,
        location,
        checked: picks.len(),
        tolerance,
        pass: worst <= tolerance,
    })
}

/// Runs the backward pass on `batch` and checks it against finite
/// differences.
pub fn grad_check(
    params: &DenoiserParams<f64>,
    batch: &Batch<f64>,
    tolerance: f64,
    opts: GradCheckOptions,
) -> Result<GradCheckReport> {
    let (preds, cache) = params.forward_batch(&batch.inputs())?;
    let (_, d_out) = masked_mse(&preds, &batch.targets)?;
    let grads = params.backward(&cache, &d_out)?;
    compare_gradients(params, batch, &grads, tolerance, opts)
}
