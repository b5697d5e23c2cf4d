//! The four named experiments: sampler oracle check, misalignment,
//! guidance sweep and speaker swap.

use std::fmt;
use std::str::FromStr;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::config::ExperimentConfig;
use crate::denoiser::{CondMode, DenoiserParams, GaussianBridgeOracle, GaussianOracle, Objective};
use crate::embedding::StyleEmbedding;
use crate::error::{Error, Result};
use crate::formats::{features_to_pgm, grid_to_pgm};
use crate::grid::LatentGrid;
use crate::metrics::{
    content_score, gaussian_moment_check, mean_stderr, misalignment_fraction, style_error, swap_effect_sizes,
    token_agreement, ExperimentReport, MomentReport, SwapCase, SwapEffects,
};
use crate::samplers::{ddim_sample, i2sb_sample, SamplerConfig, SamplerMode};
use crate::testbed::{ContentSeq, StyleParams, Testbed, TestbedConfig};
use crate::training::{
    build_training_batch, network_loss, ExampleSource, Schedules, TrainExample, TrainMode, Trainer,
};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ExperimentName {
    GaussianOracle,
    Misalign,
    CfgSweep,
    SpeakerSwap,
}

impl ExperimentName {
    pub const ALL: [Self; 4] = [Self::GaussianOracle, Self::Misalign, Self::CfgSweep, Self::SpeakerSwap];

    pub fn as_str(self) -> &'static str {
        match self {
            Self::GaussianOracle => "gaussian-oracle",
            Self::Misalign => "misalign",
            Self::CfgSweep => "cfg-sweep",
            Self::SpeakerSwap => "speaker-swap",
        }
    }
}

impl fmt::Display for ExperimentName {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for ExperimentName {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|n| n.as_str() == s)
            .ok_or_else(|| Error::InvalidArgument(format!("unknown experiment {s:?}")))
    }
}

/// Report, verdict and image snapshots of one experiment run.
#[derive(Debug, Clone)]
pub struct ExperimentOutput {
    pub report: ExperimentReport,
    pub pass: bool,
    /// Human-readable lines summarizing the verdict.
    pub summary: Vec<String>,
    /// `(file name, PGM bytes)`.
    pub snapshots: Vec<(String, Vec<u8>)>,
}

/// Mixes a run seed with a purpose tag.
pub fn derive_seed(seed: u64, tag: u64) -> u64 {
    let mut z = seed ^ tag.wrapping_mul(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

const TAG_TRAIN: u64 = 1;
const TAG_HELDOUT: u64 = 2;
const TAG_EVAL: u64 = 3;
const TAG_SAMPLE: u64 = 4;
const TAG_INIT: u64 = 5;
const TAG_MOMENTS: u64 = 6;

/// Per-seed moment reports of the Gaussian sampler check.
#[derive(Debug, Clone)]
pub struct GaussianOracleResult {
    /// `(label, report)` in the order ddim-10, ddim-100, i2sb, i2sb-ot-ode;
    /// one entry per seed.
    pub per_seed: Vec<Vec<(String, MomentReport)>>,
}

fn column(v: &[f64]) -> Result<LatentGrid<f64>> {
    LatentGrid::from_vec(1, 1, v.len(), v.len(), v.to_vec())
}

/// DDIM with the exact Gaussian denoiser and bridge sampling with the exact
/// Gaussian bridge predictor, each checked against the target moments.
pub fn gaussian_oracle(cfg: &ExperimentConfig) -> Result<GaussianOracleResult> {
    cfg.validate()?;
    let g = &cfg.experiment.gaussian;
    let sched = cfg.schedule.noise()?;
    let bridge = cfg.schedule.bridge()?;
    let d = g.mu.len();
    let null = StyleEmbedding::null(1);
    let ddim_oracle = GaussianOracle { mu: g.mu.clone(), s: g.s, schedule: sched.clone(), objective: Objective::VPrediction };
    let mut per_seed = Vec::new();
    for &seed in &cfg.seeds {
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, TAG_SAMPLE));
        let mut check_rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, TAG_MOMENTS));
        let mut reports = Vec::new();
        for steps in [cfg.sampler.steps, 100.min(sched.timesteps())] {
            let sc = SamplerConfig { steps, eta: 0.0, guidance_w: 0.0, ..SamplerConfig::ddim() };
            let samples = (0..g.samples)
                .map(|_| {
                    let x = LatentGrid::<f64>::noise(1, 1, d, d, &mut rng)?;
                    Ok(ddim_sample(&ddim_oracle, &x, None, &null, &sc, &sched, &mut rng)?.as_slice().to_vec())
                })
                .collect::<Result<Vec<_>>>()?;
            let rep = gaussian_moment_check(&samples, &g.mu, g.s, g.tolerance, &mut check_rng)?;
            reports.push((format!("ddim_{steps}"), rep));
        }
        for ot_ode in [false, true] {
            let oracle = GaussianBridgeOracle {
                mu0: g.mu.clone(),
                s0: g.s,
                mu1: g.source_mu.clone(),
                s1: g.source_s,
                rho: 1.0,
                bridge: bridge.clone(),
                noise_free: ot_ode,
            };
            let sc = SamplerConfig { ot_ode, add_x1_noise: false, guidance_w: 0.0, ..SamplerConfig::i2sb() };
            let sc = SamplerConfig { steps: cfg.sampler.steps, ..sc };
            let samples = (0..g.samples)
                .map(|_| {
                    let z = LatentGrid::<f64>::noise(1, 1, d, d, &mut rng)?;
                    let x1: Vec<f64> = z.as_slice().iter().zip(&g.source_mu).map(|(e, m)| m + g.source_s * e).collect();
                    Ok(i2sb_sample(&oracle, &column(&x1)?, &null, &sc, &bridge, &mut rng)?.as_slice().to_vec())
                })
                .collect::<Result<Vec<_>>>()?;
            let rep = gaussian_moment_check(&samples, &g.mu, g.s, g.tolerance, &mut check_rng)?;
            reports.push((if ot_ode { "i2sb_ot_ode".to_string() } else { "i2sb".to_string() }, rep));
        }
        per_seed.push(reports);
    }
    Ok(GaussianOracleResult { per_seed })
}

fn gaussian_output(cfg: &ExperimentConfig, res: &GaussianOracleResult) -> Result<ExperimentOutput> {
    let mut report = ExperimentReport::new("gaussian-oracle", &cfg.hash(), &cfg.seeds);
    let mut summary = Vec::new();
    let mut pass = true;
    for (i, (label, _)) in res.per_seed[0].iter().enumerate() {
        let pick = |f: fn(&MomentReport) -> f64| res.per_seed.iter().map(|r| f(&r[i].1)).collect::<Vec<_>>();
        let mean_err = report.push(&format!("{label}.mean_error"), &pick(|r| r.max_mean_error))?;
        let std_err = report.push(&format!("{label}.std_error"), &pick(|r| r.max_std_error))?;
        report.push(&format!("{label}.sliced_w1"), &pick(|r| r.sliced_w1))?;
        let passes = pick(|r| r.pass as u8 as f64);
        report.push(&format!("{label}.pass"), &passes)?;
        let ok = passes.iter().all(|&p| p == 1.0);
        pass &= ok;
        summary.push(format!(
            "{label}: mean error {:.4}, std error {:.4} (tol {}) -> {}",
            mean_err.mean,
            std_err.mean,
            cfg.experiment.gaussian.tolerance,
            verdict(ok)
        ));
    }
    Ok(ExperimentOutput { report, pass, summary, snapshots: Vec::new() })
}

fn verdict(ok: bool) -> &'static str {
    if ok {
        "PASS"
    } else {
        "FAIL"
    }
}

/// Trains one network on fresh testbed pairs.
pub fn train_on_testbed(
    cfg: &ExperimentConfig,
    testbed: &Testbed,
    mode: TrainMode,
    cond_mode: CondMode,
    objective: Objective,
    seed: u64,
) -> Result<DenoiserParams<f32>> {
    let dcfg = cfg.denoiser_config(cond_mode, objective);
    let mut init_rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, TAG_INIT));
    let params = DenoiserParams::<f32>::init(dcfg, &mut init_rng)?;
    let tc = crate::training::TrainConfig { seed: derive_seed(seed, TAG_TRAIN), ..cfg.training.clone() };
    let mut trainer = Trainer::new(params, mode, tc)?;
    let noise = cfg.schedule.noise()?;
    let bridge = cfg.schedule.bridge()?;
    let mut source = testbed;
    trainer.run(&mut source, Schedules { noise: &noise, bridge: &bridge }, |_| Ok(()))?;
    Ok(trainer.params)
}

#[derive(Debug, Clone)]
pub struct MisalignSeed {
    pub seed: u64,
    pub loss_aligned: f64,
    pub loss_misaligned: f64,
    pub fraction: f64,
}

#[derive(Debug, Clone)]
pub struct MisalignResult {
    pub per_seed: Vec<MisalignSeed>,
    pub snapshots: Vec<(String, Vec<u8>)>,
}

/// Held-out masked MSE on a fixed noised batch from `testbed`.
fn heldout_loss(
    cfg: &ExperimentConfig,
    params: &DenoiserParams<f32>,
    testbed: &Testbed,
    seed: u64,
) -> Result<f64> {
    let noise = cfg.schedule.noise()?;
    let bridge = cfg.schedule.bridge()?;
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, TAG_HELDOUT));
    let mut source = testbed;
    let examples: Vec<TrainExample<f32>> = source.draw(cfg.experiment.heldout_pairs, &mut rng)?;
    let pc = params.config();
    let tb = build_training_batch(
        &examples,
        TrainMode::PaletteDdim,
        pc.objective,
        pc.cond_mode,
        Schedules { noise: &noise, bridge: &bridge },
        0.0,
        &mut rng,
    )?;
    network_loss(params, &tb.batch)
}

/// Trains the channel-concat diffusion model on aligned and misaligned
/// testbeds and compares their held-out losses.
pub fn misalign(cfg: &ExperimentConfig) -> Result<MisalignResult> {
    cfg.validate()?;
    let aligned = Testbed::new(TestbedConfig { aligned: true, ..cfg.testbed.clone() })?;
    let misaligned = Testbed::new(TestbedConfig { aligned: false, ..cfg.testbed.clone() })?;
    let mut per_seed = Vec::new();
    let mut snapshots = Vec::new();
    for (i, &seed) in cfg.seeds.iter().enumerate() {
        let mut losses = [0.0; 2];
        for (k, tb) in [&aligned, &misaligned].into_iter().enumerate() {
            let params = train_on_testbed(cfg, tb, TrainMode::PaletteDdim, CondMode::ConcatChannels, Objective::VPrediction, seed)?;
            losses[k] = heldout_loss(cfg, &params, tb, seed)?;
            if i == 0 && k == 1 {
                snapshots = palette_snapshots(cfg, &params, tb, seed)?;
            }
        }
        let fraction = misalignment_fraction(losses[1], losses[0])?;
        per_seed.push(MisalignSeed { seed, loss_aligned: losses[0], loss_misaligned: losses[1], fraction });
    }
    Ok(MisalignResult { per_seed, snapshots })
}

fn palette_snapshots(
    cfg: &ExperimentConfig,
    params: &DenoiserParams<f32>,
    testbed: &Testbed,
    seed: u64,
) -> Result<Vec<(String, Vec<u8>)>> {
    let sched = cfg.schedule.noise()?;
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, TAG_EVAL));
    let pair = testbed.synth_pair(&mut rng)?;
    let (c, h, w) = pair.z_text.dims();
    let x = LatentGrid::<f32>::noise(c, h, w, w, &mut rng)?;
    let sc = SamplerConfig { mode: SamplerMode::Ddim, ot_ode: false, add_x1_noise: false, ..cfg.sampler.clone() };
    let src: LatentGrid<f32> = pair.z_text.cast();
    let out: LatentGrid<f64> = ddim_sample(params, &x, Some(&src), &pair.embed, &sc, &sched, &mut rng)?.cast();
    Ok(vec![
        ("misalign_z_text.pgm".into(), grid_to_pgm(&pair.z_text)?),
        ("misalign_z_audio.pgm".into(), grid_to_pgm(&pair.z_audio)?),
        ("misalign_output.pgm".into(), grid_to_pgm(&out)?),
    ])
}

fn misalign_output(cfg: &ExperimentConfig, res: &MisalignResult) -> Result<ExperimentOutput> {
    let mut report = ExperimentReport::new("misalign", &cfg.hash(), &cfg.seeds);
    let col = |f: fn(&MisalignSeed) -> f64| res.per_seed.iter().map(f).collect::<Vec<_>>();
    let la = report.push("loss_aligned", &col(|s| s.loss_aligned))?;
    let lm = report.push("loss_misaligned", &col(|s| s.loss_misaligned))?;
    let fr = report.push("misalignment_fraction", &col(|s| s.fraction))?;
    let pass = fr.mean > 0.5;
    report.push("pass", &[pass as u8 as f64])?;
    let summary = vec![
        format!("held-out loss aligned {:.5} +- {:.5}, misaligned {:.5} +- {:.5}", la.mean, la.stderr, lm.mean, lm.stderr),
        format!("misalignment fraction {:.4} +- {:.4} (threshold 0.5) -> {}", fr.mean, fr.stderr, verdict(pass)),
    ];
    Ok(ExperimentOutput { report, pass, summary, snapshots: res.snapshots.clone() })
}

/// One bridge model per seed, as used by the guidance and swap experiments.
pub fn train_bridge_models(cfg: &ExperimentConfig) -> Result<Vec<DenoiserParams<f32>>> {
    let (mode, _) = bridge_layout(cfg)?;
    let testbed = Testbed::new(cfg.testbed.clone())?;
    cfg.seeds
        .iter()
        .map(|&seed| train_on_testbed(cfg, &testbed, mode, CondMode::EmbedInject, Objective::X0Prediction, seed))
        .collect()
}

fn bridge_layout(cfg: &ExperimentConfig) -> Result<(TrainMode, crate::denoiser::DenoiserConfig)> {
    if cfg.sampler.mode != SamplerMode::I2sb {
        return Err(Error::MissingPrerequisite("this experiment needs sampler.mode = \"i2sb\"".into()));
    }
    Ok(cfg.model_layout())
}

fn check_models(cfg: &ExperimentConfig, models: &[DenoiserParams<f32>]) -> Result<()> {
    let (_, layout) = bridge_layout(cfg)?;
    if models.len() != cfg.seeds.len() {
        return Err(Error::MissingPrerequisite(format!(
            "need one trained bridge model per seed ({}), got {}",
            cfg.seeds.len(),
            models.len()
        )));
    }
    if let Some(m) = models.iter().find(|m| *m.config() != layout) {
        return Err(Error::MissingPrerequisite(format!(
            "bridge model layout {:?} does not match the config {:?}",
            m.config(),
            layout
        )));
    }
    Ok(())
}

/// Per-seed curves of the guidance sweep, indexed like the sweep.
#[derive(Debug, Clone)]
pub struct CfgSweepSeed {
    pub seed: u64,
    /// Token disagreement with the unguided output's decoding.
    pub content_change: Vec<f64>,
    /// Style-estimate error against the unguided output's estimate.
    pub style_change: Vec<f64>,
    pub content_score: Vec<f64>,
    pub style_score: Vec<f64>,
    pub degenerate: Vec<usize>,
}

#[derive(Debug, Clone)]
pub struct CfgSweepResult {
    pub weights: Vec<f64>,
    pub per_seed: Vec<CfgSweepSeed>,
    pub snapshots: Vec<(String, Vec<u8>)>,
}

struct Readout {
    content: Option<ContentSeq>,
    style: Option<StyleParams>,
}

fn readout(testbed: &Testbed, z: &LatentGrid<f64>) -> Readout {
    Readout { content: testbed.oracle_content_decode(z).ok(), style: testbed.oracle_style_estimate(z).ok() }
}

/// Bridge-samples the evaluation set at every guidance weight and measures
/// how far content and style drift from the unguided output.
pub fn cfg_sweep_with(cfg: &ExperimentConfig, models: &[DenoiserParams<f32>]) -> Result<CfgSweepResult> {
    cfg.validate()?;
    check_models(cfg, models)?;
    let testbed = Testbed::new(cfg.testbed.clone())?;
    let bridge = cfg.schedule.bridge()?;
    let weights = cfg.experiment.guidance_sweep.clone();
    let mut per_seed = Vec::new();
    let mut snapshots = Vec::new();
    for (si, (&seed, model)) in cfg.seeds.iter().zip(models).enumerate() {
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, TAG_EVAL));
        let pairs = testbed.synth_pairs(cfg.experiment.eval_pairs, &mut rng)?;
        let nw = weights.len();
        let mut content_change = vec![0.0; nw];
        let mut style_change = vec![0.0; nw];
        let mut content_sc = vec![0.0; nw];
        let mut style_sc = vec![0.0; nw];
        let mut degenerate = vec![0usize; nw];
        for (pi, pair) in pairs.iter().enumerate() {
            let src: LatentGrid<f32> = pair.z_text.cast();
            let sample_seed = derive_seed(derive_seed(seed, TAG_SAMPLE), pi as u64);
            let mut base: Option<Readout> = None;
            for (wi, &w) in weights.iter().enumerate() {
                let sc = SamplerConfig { guidance_w: w, ..cfg.sampler.clone() };
                let out: LatentGrid<f64> =
                    i2sb_sample(model, &src, &pair.embed, &sc, &bridge, &mut ChaCha8Rng::seed_from_u64(sample_seed))?
                        .cast();
                let r = readout(&testbed, &out);
                content_sc[wi] += content_score(&testbed, &out, &pair.content).score;
                style_sc[wi] += match &r.style {
                    Some(est) => style_error(&testbed, est, &pair.style),
                    None => 1.0,
                };
                if r.content.is_none() || r.style.is_none() {
                    degenerate[wi] += 1;
                }
                if si == 0 && pi == 0 && (wi == 0 || wi + 1 == nw) {
                    if wi == 0 {
                        snapshots.push(("cfg_z_text.pgm".into(), grid_to_pgm(&pair.z_text)?));
                        snapshots.push(("cfg_z_audio.pgm".into(), grid_to_pgm(&pair.z_audio)?));
                    }
                    snapshots.push((format!("cfg_output_w{w}.pgm"), grid_to_pgm(&out)?));
                }
                match &base {
                    None => base = Some(r),
                    Some(b) => {
                        content_change[wi] += match (&b.content, &r.content) {
                            (Some(x), Some(y)) => 1.0 - token_agreement(x, y),
                            (None, None) => 0.0,
                            _ => 1.0,
                        };
                        style_change[wi] += match (&b.style, &r.style) {
                            (Some(x), Some(y)) => style_error(&testbed, y, x),
                            (None, None) => 0.0,
                            _ => 1.0,
                        };
                    }
                }
            }
        }
        let n = pairs.len() as f64;
        for v in [&mut content_change, &mut style_change, &mut content_sc, &mut style_sc] {
            v.iter_mut().for_each(|x| *x /= n);
        }
        per_seed.push(CfgSweepSeed {
            seed,
            content_change,
            style_change,
            content_score: content_sc,
            style_score: style_sc,
            degenerate,
        });
    }
    Ok(CfgSweepResult { weights, per_seed, snapshots })
}

/// Whether a curve of per-seed means is non-decreasing and ends strictly
/// above zero by more than one standard error.
pub fn sweep_verdict(per_seed: &[Vec<f64>]) -> (Vec<(f64, f64)>, bool, bool) {
    let nw = per_seed[0].len();
    let stats: Vec<(f64, f64)> = (0..nw)
        .map(|i| {
            let ms = mean_stderr(&per_seed.iter().map(|v| v[i]).collect::<Vec<_>>());
            (ms.mean, ms.stderr)
        })
        .collect();
    let monotone = stats.windows(2).all(|w| w[1].0 >= w[0].0);
    let (last, se) = stats[nw - 1];
    let positive = last - se > 0.0;
    (stats, monotone, positive)
}

fn cfg_output(cfg: &ExperimentConfig, res: &CfgSweepResult) -> Result<ExperimentOutput> {
    let mut report = ExperimentReport::new("cfg-sweep", &cfg.hash(), &cfg.seeds);
    let mut summary = Vec::new();
    let mut pass = true;
    type Field = fn(&CfgSweepSeed) -> &Vec<f64>;
    let fields: [(&str, Field); 4] = [
        ("content_change", |s| &s.content_change),
        ("style_change", |s| &s.style_change),
        ("content_score", |s| &s.content_score),
        ("style_score", |s| &s.style_score),
    ];
    for (k, (name, get)) in fields.iter().enumerate() {
        let curves: Vec<Vec<f64>> = res.per_seed.iter().map(|s| get(s).clone()).collect();
        for (i, w) in res.weights.iter().enumerate() {
            report.push(&format!("{name}.w{w}"), &curves.iter().map(|c| c[i]).collect::<Vec<_>>())?;
        }
        if k < 2 {
            let (stats, monotone, positive) = sweep_verdict(&curves);
            let ok = monotone && positive;
            pass &= ok;
            let pts: Vec<String> =
                res.weights.iter().zip(&stats).map(|(w, (m, se))| format!("w={w}: {m:.4}+-{se:.4}")).collect();
            summary.push(format!(
                "{name}: {} | non-decreasing {monotone}, positive at max w {positive} -> {}",
                pts.join(", "),
                verdict(ok)
            ));
        }
    }
    let degenerate: Vec<f64> = res.per_seed.iter().map(|s| s.degenerate.iter().sum::<usize>() as f64).collect();
    report.push("degenerate_outputs", &degenerate)?;
    report.push("pass", &[pass as u8 as f64])?;
    Ok(ExperimentOutput { report, pass, summary, snapshots: res.snapshots.clone() })
}

#[derive(Debug, Clone)]
pub struct SpeakerSwapResult {
    pub per_seed: Vec<SwapEffects>,
    pub snapshots: Vec<(String, Vec<u8>)>,
}

/// Each speaker gets a reference style and embedding; the evaluation swaps
/// the embedding of speaker A for that of speaker B, or the decoder of A
/// for that of B.
pub fn speaker_swap_with(cfg: &ExperimentConfig, models: &[DenoiserParams<f32>]) -> Result<SpeakerSwapResult> {
    cfg.validate()?;
    check_models(cfg, models)?;
    let testbed = Testbed::new(cfg.testbed.clone())?;
    let bridge = cfg.schedule.bridge()?;
    let n_spk = cfg.testbed.speakers as u32;
    let mut per_seed = Vec::new();
    let mut snapshots = Vec::new();
    for (si, (&seed, model)) in cfg.seeds.iter().zip(models).enumerate() {
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, TAG_EVAL));
        let speaker_embeds = (0..n_spk)
            .map(|_| {
                let style = testbed.sample_style(&mut rng);
                testbed.style_embedding(&style, cfg.testbed.embed_noise_std, &mut rng)
            })
            .collect::<Result<Vec<_>>>()?;
        let pairs = testbed.synth_pairs(cfg.experiment.eval_pairs, &mut rng)?;
        let cases: Vec<SwapCase> = pairs
            .iter()
            .enumerate()
            .map(|(pi, p)| {
                let a = p.speaker;
                let b = (a + 1) % n_spk;
                SwapCase {
                    source: p.z_text.clone(),
                    content: p.content.clone(),
                    speaker_a: a,
                    speaker_b: b,
                    embed_a: speaker_embeds[a as usize].clone(),
                    embed_b: speaker_embeds[b as usize].clone(),
                    seed: derive_seed(derive_seed(seed, TAG_SAMPLE), pi as u64),
                }
            })
            .collect();
        per_seed.push(swap_effect_sizes(model, &testbed, &cases, &cfg.sampler, &bridge)?);
        if si == 0 {
            let c = &cases[0];
            let src: LatentGrid<f32> = c.source.cast();
            let mut r = ChaCha8Rng::seed_from_u64(c.seed);
            let z_a: LatentGrid<f64> = i2sb_sample(model, &src, &c.embed_a, &cfg.sampler, &bridge, &mut r)?.cast();
            let mut r = ChaCha8Rng::seed_from_u64(c.seed);
            let z_b: LatentGrid<f64> = i2sb_sample(model, &src, &c.embed_b, &cfg.sampler, &bridge, &mut r)?.cast();
            snapshots.push(("swap_embed_a_decoder_a.pgm".into(), features_to_pgm(&testbed.toy_decode(&z_a, c.speaker_a)?)?));
            snapshots.push(("swap_embed_b_decoder_a.pgm".into(), features_to_pgm(&testbed.toy_decode(&z_b, c.speaker_a)?)?));
            snapshots.push(("swap_embed_a_decoder_b.pgm".into(), features_to_pgm(&testbed.toy_decode(&z_a, c.speaker_b)?)?));
        }
    }
    Ok(SpeakerSwapResult { per_seed, snapshots })
}

fn swap_output(cfg: &ExperimentConfig, res: &SpeakerSwapResult) -> Result<ExperimentOutput> {
    let mut report = ExperimentReport::new("speaker-swap", &cfg.hash(), &cfg.seeds);
    let col = |f: fn(&SwapEffects) -> f64| res.per_seed.iter().map(f).collect::<Vec<_>>();
    let e = report.push("embed_effect", &col(|s| s.embed_effect))?;
    let d = report.push("decoder_effect", &col(|s| s.decoder_effect))?;
    report.push("embed_content_delta", &col(|s| s.embed_content_delta))?;
    report.push("decoder_content_delta", &col(|s| s.decoder_content_delta))?;
    report.push("degenerate_outputs", &col(|s| s.degenerate as f64))?;
    let pass = d.mean > e.mean;
    report.push("pass", &[pass as u8 as f64])?;
    let summary = vec![format!(
        "decoder effect {:.4} +- {:.4} vs embedding effect {:.4} +- {:.4} -> {}",
        d.mean,
        d.stderr,
        e.mean,
        e.stderr,
        verdict(pass)
    )];
    Ok(ExperimentOutput { report, pass, summary, snapshots: res.snapshots.clone() })
}

/// Runs a named experiment end to end. `bridge_models` supplies trained
/// bridge networks for the guidance and swap experiments; when absent they
/// are trained here.
pub fn run_experiment(
    name: ExperimentName,
    cfg: &ExperimentConfig,
    bridge_models: Option<&[DenoiserParams<f32>]>,
) -> Result<ExperimentOutput> {
    cfg.validate()?;
    match name {
        ExperimentName::GaussianOracle => gaussian_output(cfg, &gaussian_oracle(cfg)?),
        ExperimentName::Misalign => misalign_output(cfg, &misalign(cfg)?),
        ExperimentName::CfgSweep | ExperimentName::SpeakerSwap => {
            let trained;
            let models = match bridge_models {
                Some(m) => m,
                None => {
                    trained = train_bridge_models(cfg)?;
                    &trained
                }
            };
            if name == ExperimentName::CfgSweep {
                cfg_output(cfg, &cfg_sweep_with(cfg, models)?)
            } else {
                swap_output(cfg, &speaker_swap_with(cfg, models)?)
            }
        }
    }
}

/// Writes `<name>.csv`, `<name>.json` and the snapshots into `dir`.
pub fn write_output(dir: &std::path::Path, name: ExperimentName, out: &ExperimentOutput) -> Result<()> {
    std::fs::create_dir_all(dir)?;
    std::fs::write(dir.join(format!("{name}.csv")), out.report.to_csv())?;
    std::fs::write(dir.join(format!("{name}.json")), out.report.to_json()?)?;
    for (file, bytes) in &out.snapshots {
        std::fs::write(dir.join(file), bytes)?;
    }
    Ok(())
}
