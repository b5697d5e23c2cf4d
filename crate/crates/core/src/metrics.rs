//! Numeric readouts for the experiments and the report type they produce.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::denoiser::Denoise;
use crate::embedding::StyleEmbedding;
use crate::error::{Error, Result};
use crate::grid::LatentGrid;
use crate::samplers::{i2sb_sample, SamplerConfig};
use crate::schedules::BridgeSchedule;
use crate::testbed::{ContentSeq, FeatureMap, StyleParams, Testbed};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ContentScore {
    pub score: f64,
    /// Set when the output could not be decoded at all.
    pub degenerate: bool,
}

/// Fraction of positions where two token sequences agree, over the longer
/// of the two.
pub fn token_agreement(a: &ContentSeq, b: &ContentSeq) -> f64 {
    let longest = a.len().max(b.len());
    if longest == 0 {
        return 1.0;
    }
    let hits = a.tokens().iter().zip(b.tokens()).filter(|(x, y)| x == y).count();
    hits as f64 / longest as f64
}

/// Token accuracy of the decoded content against `truth`. Duration changes
/// are absorbed by the segmenting decoder; extra or missing tokens count
/// against the score.
pub fn content_score(testbed: &Testbed, output: &LatentGrid<f64>, truth: &ContentSeq) -> ContentScore {
    match testbed.oracle_content_decode(output) {
        Ok(decoded) => ContentScore { score: token_agreement(&decoded, truth), degenerate: false },
        Err(_) => ContentScore { score: 0.0, degenerate: true },
    }
}

/// Mean normalized error over the three style fields. Gain is compared
/// relative to the target; pitch and modulation, whose targets may be zero,
/// relative to the largest magnitude their configured ranges allow.
pub fn style_error(testbed: &Testbed, estimate: &StyleParams, target: &StyleParams) -> f64 {
    let cfg = testbed.config();
    let span = |r: [f64; 2]| r[0].abs().max(r[1].abs()).max(f64::MIN_POSITIVE);
    let gain = (estimate.gain - target.gain).abs() / target.gain.abs().max(f64::MIN_POSITIVE);
    let pitch = (estimate.pitch_bias - target.pitch_bias).abs() / span(cfg.pitch_range);
    let rate = (estimate.mod_rate - target.mod_rate).abs() / span(cfg.mod_range);
    (gain + pitch + rate) / 3.0
}

/// [`style_error`] of the oracle estimate of `output`. Undecodable outputs
/// are reported as [`Error::Degenerate`].
pub fn style_score(testbed: &Testbed, output: &LatentGrid<f64>, target: &StyleParams) -> Result<f64> {
    let est = testbed.oracle_style_estimate(output)?;
    Ok(style_error(testbed, &est, target))
}

/// Style descriptor of a decoded feature map: log RMS level, energy-weighted
/// row centroid (as a fraction of the rows) and the coefficient of variation
/// of the per-column RMS.
pub fn feature_style(f: &FeatureMap) -> Result<[f64; 3]> {
    if f.cols == 0 || f.rows == 0 {
        return Err(Error::Degenerate("empty feature map".into()));
    }
    let n = (f.rows * f.cols) as f64;
    let energy: f64 = f.data.iter().map(|v| v * v).sum();
    if !(energy > 0.0) || !energy.is_finite() {
        return Err(Error::Degenerate("feature map has no finite energy".into()));
    }
    let level = (energy / n).sqrt().ln();
    let mut centroid = 0.0;
    for r in 0..f.rows {
        let row: f64 = (0..f.cols).map(|c| f.get(r, c).powi(2)).sum();
        centroid += r as f64 * row;
    }
    centroid /= energy * f.rows as f64;
    let col_rms: Vec<f64> =
        (0..f.cols).map(|c| ((0..f.rows).map(|r| f.get(r, c).powi(2)).sum::<f64>() / f.rows as f64).sqrt()).collect();
    let mean = col_rms.iter().sum::<f64>() / f.cols as f64;
    let var = col_rms.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / f.cols as f64;
    let cv = if mean > 0.0 { var.sqrt() / mean } else { 0.0 };
    Ok([level, centroid, cv])
}

/// Mean absolute difference between two feature style descriptors.
pub fn feature_style_distance(a: &FeatureMap, b: &FeatureMap) -> Result<f64> {
    let (x, y) = (feature_style(a)?, feature_style(b)?);
    Ok(x.iter().zip(&y).map(|(p, q)| (p - q).abs()).sum::<f64>() / 3.0)
}

#[derive(Debug, Clone, PartialEq)]
pub struct MomentReport {
    pub max_mean_error: f64,
    pub max_std_error: f64,
    /// Mean over random directions of the 1-D Wasserstein-1 distance
    /// between projected samples and fresh draws from the target.
    pub sliced_w1: f64,
    pub samples: usize,
    pub pass: bool,
}

/// Per-coordinate mean/std check of `samples` against `N(mu, s^2 I)`.
pub fn gaussian_moment_check<R: Rng + ?Sized>(
    samples: &[Vec<f64>],
    mu: &[f64],
    s: f64,
    tol: f64,
    rng: &mut R,
) -> Result<MomentReport> {
    if samples.len() < 1000 {
        return Err(Error::InvalidArgument(format!("need at least 1000 samples, got {}", samples.len())));
    }
    let d = mu.len();
    if samples.iter().any(|x| x.len() != d) {
        return Err(Error::Shape(format!("samples must have {d} coordinates")));
    }
    let n = samples.len() as f64;
    let mut max_mean_error: f64 = 0.0;
    let mut max_std_error: f64 = 0.0;
    for j in 0..d {
        let mean = samples.iter().map(|x| x[j]).sum::<f64>() / n;
        let var = samples.iter().map(|x| (x[j] - mean).powi(2)).sum::<f64>() / (n - 1.0);
        max_mean_error = max_mean_error.max((mean - mu[j]).abs());
        max_std_error = max_std_error.max((var.sqrt() - s).abs());
    }

    const DIRECTIONS: usize = 16;
    let mut w1 = 0.0;
    for _ in 0..DIRECTIONS {
        let mut dir: Vec<f64> = (0..d).map(|_| rng.sample(StandardNormal)).collect();
        let norm = dir.iter().map(|v| v * v).sum::<f64>().sqrt();
        dir.iter_mut().for_each(|v| *v /= norm);
        let offset: f64 = dir.iter().zip(mu).map(|(a, b)| a * b).sum();
        let mut proj: Vec<f64> = samples.iter().map(|x| x.iter().zip(&dir).map(|(a, b)| a * b).sum()).collect();
        let mut fresh: Vec<f64> =
            (0..samples.len()).map(|_| offset + s * rng.sample::<f64, _>(StandardNormal)).collect();
        proj.sort_by(f64::total_cmp);
        fresh.sort_by(f64::total_cmp);
        w1 += proj.iter().zip(&fresh).map(|(a, b)| (a - b).abs()).sum::<f64>() / n;
    }
    let sliced_w1 = w1 / DIRECTIONS as f64;
    let pass = max_mean_error <= tol && max_std_error <= tol;
    Ok(MomentReport { max_mean_error, max_std_error, sliced_w1, samples: samples.len(), pass })
}

/// `(loss_misaligned - loss_aligned) / loss_misaligned`, clipped to `[0, 1]`.
pub fn misalignment_fraction(loss_misaligned: f64, loss_aligned: f64) -> Result<f64> {
    if !(loss_misaligned > 0.0) || !loss_misaligned.is_finite() || !loss_aligned.is_finite() {
        return Err(Error::InvalidArgument(format!(
            "misaligned loss must be positive and finite, got {loss_misaligned} (aligned {loss_aligned})"
        )));
    }
    Ok(((loss_misaligned - loss_aligned) / loss_misaligned).clamp(0.0, 1.0))
}

/// One latent-to-decoder case for the speaker-swap readout.
#[derive(Debug, Clone)]
pub struct SwapCase {
    pub source: LatentGrid<f64>,
    pub content: ContentSeq,
    pub speaker_a: u32,
    pub speaker_b: u32,
    pub embed_a: StyleEmbedding,
    pub embed_b: StyleEmbedding,
    /// Seeds the sampler identically for both embeddings.
    pub seed: u64,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SwapEffects {
    /// Decoded style change from swapping `c_A -> c_B` under decoder A.
    pub embed_effect: f64,
    /// Decoded style change from swapping decoder `A -> B` under `c_A`.
    pub decoder_effect: f64,
    /// Mean content-score change from the embedding swap.
    pub embed_content_delta: f64,
    /// Mean content-score change from the decoder swap. The latent is the
    /// same, so this is zero by construction.
    pub decoder_content_delta: f64,
    pub degenerate: usize,
}

/// Bridge-samples every case under both embeddings and measures how much
/// the decoded style moves for each kind of swap.
pub fn swap_effect_sizes<D: Denoise<f32> + ?Sized>(
    model: &D,
    testbed: &Testbed,
    cases: &[SwapCase],
    sampler: &SamplerConfig,
    bridge: &BridgeSchedule,
) -> Result<SwapEffects> {
    if cases.is_empty() {
        return Err(Error::InvalidArgument("no swap cases".into()));
    }
    let mut embed = Vec::new();
    let mut decoder = Vec::new();
    let mut content = Vec::new();
    let mut degenerate = 0;
    for case in cases {
        let src: LatentGrid<f32> = case.source.cast();
        let z_a: LatentGrid<f64> =
            i2sb_sample(model, &src, &case.embed_a, sampler, bridge, &mut ChaCha8Rng::seed_from_u64(case.seed))?.cast();
        let z_b: LatentGrid<f64> =
            i2sb_sample(model, &src, &case.embed_b, sampler, bridge, &mut ChaCha8Rng::seed_from_u64(case.seed))?.cast();
        let f_aa = testbed.toy_decode(&z_a, case.speaker_a)?;
        let f_ba = testbed.toy_decode(&z_b, case.speaker_a)?;
        let f_ab = testbed.toy_decode(&z_a, case.speaker_b)?;
        match (feature_style_distance(&f_aa, &f_ba), feature_style_distance(&f_aa, &f_ab)) {
            (Ok(e), Ok(d)) => {
                embed.push(e);
                decoder.push(d);
            }
            _ => degenerate += 1,
        }
        let sa = content_score(testbed, &z_a, &case.content);
        let sb = content_score(testbed, &z_b, &case.content);
        content.push(sb.score - sa.score);
    }
    let mean = |v: &[f64]| if v.is_empty() { 0.0 } else { v.iter().sum::<f64>() / v.len() as f64 };
    Ok(SwapEffects {
        embed_effect: mean(&embed),
        decoder_effect: mean(&decoder),
        embed_content_delta: mean(&content),
        decoder_content_delta: 0.0,
        degenerate,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MeanStderr {
    pub mean: f64,
    pub stderr: f64,
    pub n: usize,
}

/// Sample mean with the standard error of the mean; a single value has
/// zero standard error.
pub fn mean_stderr(values: &[f64]) -> MeanStderr {
    let n = values.len();
    if n == 0 {
        return MeanStderr { mean: f64::NAN, stderr: f64::NAN, n };
    }
    let mean = values.iter().sum::<f64>() / n as f64;
    let stderr = if n > 1 {
        let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1) as f64;
        (var / n as f64).sqrt()
    } else {
        0.0
    };
    MeanStderr { mean, stderr, n }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReportMetric {
    pub metric: String,
    pub mean: f64,
    pub stderr: f64,
    pub n_seeds: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentReport {
    pub experiment: String,
    pub config_hash: String,
    pub seeds: Vec<u64>,
    /// True when fewer than three seeds went into the averages.
    pub single_seed: bool,
    pub metrics: Vec<ReportMetric>,
}

impl ExperimentReport {
    pub fn new(experiment: &str, config_hash: &str, seeds: &[u64]) -> Self {
        Self {
            experiment: experiment.to_string(),
            config_hash: config_hash.to_string(),
            seeds: seeds.to_vec(),
            single_seed: seeds.len() < 3,
            metrics: Vec::new(),
        }
    }

    /// Adds one metric averaged over per-seed values.
    pub fn push(&mut self, name: &str, per_seed: &[f64]) -> Result<MeanStderr> {
        let ms = mean_stderr(per_seed);
        if !ms.mean.is_finite() || !ms.stderr.is_finite() {
            return Err(Error::NonFinite(format!("metric {name}")));
        }
        self.metrics.push(ReportMetric { metric: name.to_string(), mean: ms.mean, stderr: ms.stderr, n_seeds: ms.n });
        Ok(ms)
    }

    pub fn get(&self, name: &str) -> Option<&ReportMetric> {
        self.metrics.iter().find(|m| m.metric == name)
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from("metric,mean,stderr,n_seeds\n");
        for m in &self.metrics {
            out.push_str(&format!("{},{},{},{}\n", m.metric, m.mean, m.stderr, m.n_seeds));
        }
        out
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }
}
