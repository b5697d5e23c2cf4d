//! Synthetic stand-in for the text-path / audio-path latent pipeline.
//!
//! Each token paints a fixed `C x H` column template across its duration.
//! Style scales the grid, shifts it along the row axis and modulates it along
//! the width axis. `z_text` uses neutral style and fixed durations; `z_audio`
//! uses the utterance's style and random durations.

use std::f64::consts::PI;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::embedding::StyleEmbedding;
use crate::error::{Error, Result};
use crate::grid::LatentGrid;

const MOD_DEPTH: f64 = 0.3;
const ACTIVE_COLUMN_FRACTION: f64 = 0.2;
const DECODE_SHIFT_STEP: f64 = 0.5;
const PITCH_SEARCH_STEP: f64 = 0.05;
const RATE_SEARCH_STEP: f64 = 0.0025;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TestbedConfig {
    pub channels: usize,
    pub height: usize,
    pub max_width: usize,
    pub alphabet: usize,
    /// Average per-token duration in columns.
    pub mean_duration: usize,
    pub min_tokens: usize,
    pub max_tokens: usize,
    pub gain_range: [f64; 2],
    pub pitch_range: [f64; 2],
    pub mod_range: [f64; 2],
    /// Force audio durations to match the text durations.
    pub aligned: bool,
    pub speakers: usize,
    pub embed_dim: usize,
    pub embed_noise_std: f64,
    /// Range of the overall per-speaker output scale (log-uniform).
    pub speaker_scale_range: [f64; 2],
    /// Largest log-slope of the per-row speaker scale across the rows.
    pub speaker_tilt: f64,
    pub speaker_bias_std: f64,
    /// Seeds the templates, the embedding map and the speakers.
    pub seed: u64,
}

impl Default for TestbedConfig {
    fn default() -> Self {
        Self {
            channels: 8,
            height: 16,
            max_width: 64,
            alphabet: 8,
            mean_duration: 8,
            min_tokens: 2,
            max_tokens: 5,
            gain_range: [0.5, 2.0],
            pitch_range: [-3.0, 3.0],
            mod_range: [0.0, 0.45],
            aligned: false,
            speakers: 4,
            embed_dim: 16,
            embed_noise_std: 0.05,
            speaker_scale_range: [0.25, 4.0],
            speaker_tilt: 3.0,
            speaker_bias_std: 0.1,
            seed: 0,
        }
    }
}

impl TestbedConfig {
    /// Smaller grids for experiments that train many networks on one core.
    pub fn compact() -> Self {
        Self {
            channels: 4,
            height: 8,
            max_width: 32,
            mean_duration: 4,
            pitch_range: [-2.0, 2.0],
            ..Self::default()
        }
    }

    pub fn min_duration(&self) -> usize {
        self.mean_duration.div_ceil(2).max(1)
    }

    pub fn max_duration(&self) -> usize {
        (3 * self.mean_duration / 2).max(self.min_duration())
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |msg: String| Err(Error::Config(format!("testbed: {msg}")));
        if self.channels == 0 || self.height == 0 || self.max_width == 0 {
            return fail("grid dimensions must be positive".into());
        }
        if self.alphabet < 2 || self.alphabet > 256 {
            return fail(format!("alphabet must be in 2..=256, got {}", self.alphabet));
        }
        if self.mean_duration == 0 {
            return fail("mean_duration must be positive".into());
        }
        if self.min_tokens == 0 || self.min_tokens > self.max_tokens {
            return fail(format!("token range {}..={} is empty", self.min_tokens, self.max_tokens));
        }
        if self.max_tokens * self.max_duration() > self.max_width {
            return fail(format!(
                "{} tokens of up to {} columns overflow max_width {}",
                self.max_tokens,
                self.max_duration(),
                self.max_width
            ));
        }
        for (name, r) in [("gain", self.gain_range), ("pitch", self.pitch_range), ("mod", self.mod_range)] {
            if !(r[0].is_finite() && r[1].is_finite() && r[0] <= r[1]) {
                return fail(format!("{name} range {r:?} is invalid"));
            }
        }
        if self.gain_range[0] <= 0.0 {
            return fail("gain must stay positive".into());
        }
        if self.mod_range[0] < 0.0 || self.mod_range[1] > 0.5 {
            return fail("mod range must lie in [0, 0.5]".into());
        }
        if self.speakers == 0 {
            return fail("need at least one speaker".into());
        }
        if self.embed_dim < 3 {
            return fail("embed_dim must be at least 3".into());
        }
        if !(self.embed_noise_std >= 0.0 && self.speaker_bias_std >= 0.0 && self.speaker_tilt >= 0.0) {
            return fail("noise levels must be non-negative".into());
        }
        let s = self.speaker_scale_range;
        if !(s[0] > 0.0 && s[0] <= s[1] && s[1].is_finite()) {
            return fail(format!("speaker scale range {s:?} is invalid"));
        }
        Ok(())
    }
}

/// Token sequence the latent must preserve.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ContentSeq(pub Vec<u8>);

impl ContentSeq {
    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn tokens(&self) -> &[u8] {
        &self.0
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StyleParams {
    pub gain: f64,
    pub pitch_bias: f64,
    pub mod_rate: f64,
}

impl StyleParams {
    pub const NEUTRAL: Self = Self { gain: 1.0, pitch_bias: 0.0, mod_rate: 0.0 };

    pub fn as_array(&self) -> [f64; 3] {
        [self.gain, self.pitch_bias, self.mod_rate]
    }
}

/// Per-row affine output transform standing in for a speaker-conditioned
/// vocoder.
#[derive(Debug, Clone, PartialEq)]
pub struct ToySpeaker {
    pub scale: Vec<f64>,
    pub bias: Vec<f64>,
}

impl ToySpeaker {
    pub fn identity(height: usize) -> Self {
        Self { scale: vec![1.0; height], bias: vec![0.0; height] }
    }

    pub fn uniform(height: usize, scale: f64) -> Self {
        Self { scale: vec![scale; height], bias: vec![0.0; height] }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LatentPair {
    pub z_text: LatentGrid<f64>,
    pub z_audio: LatentGrid<f64>,
    pub content: ContentSeq,
    pub style: StyleParams,
    pub speaker: u32,
    pub embed: StyleEmbedding,
}

/// `H x W` decoder output, row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureMap {
    pub rows: usize,
    pub cols: usize,
    pub data: Vec<f64>,
}

impl FeatureMap {
    pub fn get(&self, r: usize, c: usize) -> f64 {
        self.data[r * self.cols + c]
    }
}

/// Token segmentation found by the content decoder.
#[derive(Debug, Clone, PartialEq)]
pub struct Segment {
    pub token: u8,
    pub start: usize,
    pub len: usize,
}

#[derive(Debug, Clone)]
pub struct Testbed {
    config: TestbedConfig,
    /// `alphabet` column templates of length `C*H`, channel-major.
    templates: Vec<Vec<f64>>,
    /// `embed_dim x 3` map from normalized style to the embedding.
    embed_map: Vec<[f64; 3]>,
    speakers: Vec<ToySpeaker>,
}

impl Testbed {
    pub fn new(config: TestbedConfig) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let col_len = config.channels * config.height;
        let templates = (0..config.alphabet)
            .map(|_| (0..col_len).map(|_| rng.sample::<f64, _>(StandardNormal)).collect())
            .collect();
        let norm = 1.0 / 3f64.sqrt();
        let embed_map = (0..config.embed_dim)
            .map(|_| {
                let mut row = [0.0; 3];
                row.iter_mut().for_each(|v| *v = norm * rng.sample::<f64, _>(StandardNormal));
                row
            })
            .collect();
        let h = config.height;
        let (lo, hi) = (config.speaker_scale_range[0].ln(), config.speaker_scale_range[1].ln());
        let speakers = (0..config.speakers)
            .map(|_| {
                let base = if hi > lo { rng.gen_range(lo..=hi) } else { lo };
                let tilt = if config.speaker_tilt > 0.0 {
                    rng.gen_range(-config.speaker_tilt..=config.speaker_tilt)
                } else {
                    0.0
                };
                let scale = (0..h)
                    .map(|r| {
                        let pos = if h > 1 { r as f64 / (h - 1) as f64 - 0.5 } else { 0.0 };
                        (base + tilt * pos).exp()
                    })
                    .collect();
                let bias = (0..h).map(|_| config.speaker_bias_std * rng.sample::<f64, _>(StandardNormal)).collect();
                ToySpeaker { scale, bias }
            })
            .collect();
        Ok(Self { config, templates, embed_map, speakers })
    }

    pub fn config(&self) -> &TestbedConfig {
        &self.config
    }

    pub fn template(&self, token: u8) -> &[f64] {
        &self.templates[token as usize]
    }

    pub fn speaker(&self, id: u32) -> Result<&ToySpeaker> {
        self.speakers
            .get(id as usize)
            .ok_or_else(|| Error::InvalidArgument(format!("unknown speaker id {id}")))
    }

    pub fn speakers(&self) -> &[ToySpeaker] {
        &self.speakers
    }

    fn check_content(&self, content: &ContentSeq) -> Result<()> {
        if content.is_empty() {
            return Err(Error::InvalidArgument("empty content".into()));
        }
        if let Some(&t) = content.tokens().iter().find(|&&t| t as usize >= self.config.alphabet) {
            return Err(Error::InvalidArgument(format!("token {t} outside alphabet {}", self.config.alphabet)));
        }
        Ok(())
    }

    /// Paints each token's template over its columns, then applies style.
    pub fn render_latent(&self, content: &ContentSeq, durations: &[usize], style: &StyleParams) -> Result<LatentGrid<f64>> {
        self.check_content(content)?;
        if durations.len() != content.len() {
            return Err(Error::InvalidArgument(format!(
                "{} durations for {} tokens",
                durations.len(),
                content.len()
            )));
        }
        if durations.contains(&0) {
            return Err(Error::InvalidArgument("durations must be positive".into()));
        }
        let total: usize = durations.iter().sum();
        let cfg = &self.config;
        if total > cfg.max_width {
            return Err(Error::InvalidArgument(format!("width {total} exceeds max width {}", cfg.max_width)));
        }
        let (c, h, w) = (cfg.channels, cfg.height, cfg.max_width);
        let mut grid = LatentGrid::zeros(c, h, w, total)?;
        let mut col = 0;
        for (&token, &dur) in content.tokens().iter().zip(durations) {
            let shifted = shift_rows(self.template(token), c, h, style.pitch_bias);
            for _ in 0..dur {
                let m = style.gain * modulation(style.mod_rate, col);
                for ci in 0..c {
                    for hi in 0..h {
                        grid.set(ci, hi, col, m * shifted[ci * h + hi]);
                    }
                }
                col += 1;
            }
        }
        Ok(grid)
    }

    pub fn sample_content<R: Rng + ?Sized>(&self, rng: &mut R) -> ContentSeq {
        let k = rng.gen_range(self.config.min_tokens..=self.config.max_tokens);
        self.sample_content_of_len(k, rng)
    }

    /// Uniform tokens without immediate repeats.
    pub fn sample_content_of_len<R: Rng + ?Sized>(&self, k: usize, rng: &mut R) -> ContentSeq {
        let a = self.config.alphabet;
        let mut tokens: Vec<u8> = Vec::with_capacity(k);
        for i in 0..k {
            let t = if i == 0 {
                rng.gen_range(0..a)
            } else {
                // Uniform over the alphabet minus the previous token.
                let prev = tokens[i - 1] as usize;
                let r = rng.gen_range(0..a - 1);
                if r >= prev {
                    r + 1
                } else {
                    r
                }
            };
            tokens.push(t as u8);
        }
        ContentSeq(tokens)
    }

    pub fn sample_style<R: Rng + ?Sized>(&self, rng: &mut R) -> StyleParams {
        let draw = |r: [f64; 2], rng: &mut R| if r[1] > r[0] { rng.gen_range(r[0]..=r[1]) } else { r[0] };
        StyleParams {
            gain: draw(self.config.gain_range, rng),
            pitch_bias: draw(self.config.pitch_range, rng),
            mod_rate: draw(self.config.mod_range, rng),
        }
    }

    pub fn sample_audio_durations<R: Rng + ?Sized>(&self, k: usize, rng: &mut R) -> Vec<usize> {
        if self.config.aligned {
            return vec![self.config.mean_duration; k];
        }
        let (lo, hi) = (self.config.min_duration(), self.config.max_duration());
        (0..k).map(|_| rng.gen_range(lo..=hi)).collect()
    }

    /// Draws one matched `(z_text, z_audio)` pair. Latent values are rounded
    /// to single precision so they store losslessly.
    pub fn synth_pair<R: Rng + ?Sized>(&self, rng: &mut R) -> Result<LatentPair> {
        let content = self.sample_content(rng);
        let style = self.sample_style(rng);
        let speaker = rng.gen_range(0..self.config.speakers) as u32;
        let text_durations = vec![self.config.mean_duration; content.len()];
        let audio_durations = self.sample_audio_durations(content.len(), rng);
        let to_f32 = |v: f64| v as f32 as f64;
        let z_text = self.render_latent(&content, &text_durations, &StyleParams::NEUTRAL)?.map(to_f32);
        let z_audio = self.render_latent(&content, &audio_durations, &style)?.map(to_f32);
        let embed = self.style_embedding(&style, self.config.embed_noise_std, rng)?;
        Ok(LatentPair { z_text, z_audio, content, style, speaker, embed })
    }

    pub fn synth_pairs<R: Rng + ?Sized>(&self, count: usize, rng: &mut R) -> Result<Vec<LatentPair>> {
        (0..count).map(|_| self.synth_pair(rng)).collect()
    }

    /// Style fields mapped linearly onto `[-1, 1]`.
    pub fn normalize_style(&self, style: &StyleParams) -> [f64; 3] {
        let cfg = &self.config;
        let norm = |v: f64, r: [f64; 2]| if r[1] > r[0] { 2.0 * (v - r[0]) / (r[1] - r[0]) - 1.0 } else { 0.0 };
        [
            norm(style.gain, cfg.gain_range),
            norm(style.pitch_bias, cfg.pitch_range),
            norm(style.mod_rate, cfg.mod_range),
        ]
    }

    pub fn check_style(&self, style: &StyleParams) -> Result<()> {
        let cfg = &self.config;
        let tol = 1e-9;
        for (name, v, r) in [
            ("gain", style.gain, cfg.gain_range),
            ("pitch_bias", style.pitch_bias, cfg.pitch_range),
            ("mod_rate", style.mod_rate, cfg.mod_range),
        ] {
            if !(v >= r[0] - tol && v <= r[1] + tol) {
                return Err(Error::InvalidArgument(format!("{name} {v} outside {r:?}")));
            }
        }
        Ok(())
    }

    /// Oracle style embedding: a fixed linear map of the normalized style
    /// plus Gaussian noise. It never sees content.
    pub fn style_embedding<R: Rng + ?Sized>(&self, style: &StyleParams, noise_std: f64, rng: &mut R) -> Result<StyleEmbedding> {
        self.check_style(style)?;
        let u = self.normalize_style(style);
        let values = self
            .embed_map
            .iter()
            .map(|row| {
                let clean: f64 = row.iter().zip(&u).map(|(m, x)| m * x).sum();
                if noise_std > 0.0 {
                    clean + noise_std * rng.sample::<f64, _>(StandardNormal)
                } else {
                    clean
                }
            })
            .collect();
        StyleEmbedding::new(values)
    }

    /// Channel-mean map over the true width, then the speaker's per-row
    /// affine transform.
    pub fn toy_decode(&self, z: &LatentGrid<f64>, speaker: u32) -> Result<FeatureMap> {
        let spk = self.speaker(speaker)?;
        toy_decode_with(z, spk)
    }

    fn check_grid(&self, z: &LatentGrid<f64>) -> Result<()> {
        let cfg = &self.config;
        if z.channels() != cfg.channels || z.height() != cfg.height {
            return Err(Error::Shape(format!(
                "grid {:?} does not match testbed [{}, {}, _]",
                z.dims(),
                cfg.channels,
                cfg.height
            )));
        }
        Ok(())
    }

    /// Number of leading columns carrying signal.
    pub fn active_width(&self, z: &LatentGrid<f64>) -> Result<usize> {
        let norms = &z.column_norms()[..z.true_width()];
        let peak = norms.iter().cloned().fold(0.0, f64::max);
        if !(peak > 0.0) || !peak.is_finite() {
            return Err(Error::Degenerate("grid has no nonzero finite column".into()));
        }
        let last = norms.iter().rposition(|&n| n >= ACTIVE_COLUMN_FRACTION * peak).unwrap_or(0);
        Ok(last + 1)
    }

    /// Cosine similarity of every active column with every template, taking
    /// the best over a grid of row shifts.
    fn column_similarity(&self, z: &LatentGrid<f64>, width: usize) -> Vec<Vec<f64>> {
        let cfg = &self.config;
        let (c, h) = (cfg.channels, cfg.height);
        let shifts = shift_grid(cfg.pitch_range, DECODE_SHIFT_STEP);
        let shifted: Vec<Vec<Vec<f64>>> = self
            .templates
            .iter()
            .map(|t| shifts.iter().map(|&b| unit(&shift_rows(t, c, h, b))).collect())
            .collect();
        (0..width)
            .map(|j| {
                let col = unit(&z.column(j));
                shifted
                    .iter()
                    .map(|variants| variants.iter().map(|v| dot(&col, v)).fold(f64::NEG_INFINITY, f64::max))
                    .collect()
            })
            .collect()
    }

    /// Segments the active columns into token runs by dynamic programming.
    /// Runs last between the shortest and longest allowed durations and
    /// neighbouring runs carry different tokens.
    pub fn segment(&self, z: &LatentGrid<f64>) -> Result<Vec<Segment>> {
        self.check_grid(z)?;
        let width = self.active_width(z)?;
        let sim = self.column_similarity(z, width);
        let a = self.config.alphabet;
        let lmin = self.config.min_duration().min(width);
        let mut lmax = self.config.max_duration().max(lmin);
        loop {
            if let Some(segs) = segment_dp(&sim, width, a, lmin, lmax) {
                return Ok(segs);
            }
            if lmax >= width {
                return Err(Error::Degenerate("no admissible segmentation".into()));
            }
            lmax = width;
        }
    }

    pub fn oracle_content_decode(&self, z: &LatentGrid<f64>) -> Result<ContentSeq> {
        Ok(ContentSeq(self.segment(z)?.iter().map(|s| s.token).collect()))
    }

    /// Least-squares readout of gain, row shift and modulation rate.
    pub fn oracle_style_estimate(&self, z: &LatentGrid<f64>) -> Result<StyleParams> {
        let segments = self.segment(z)?;
        let cfg = &self.config;
        let (c, h) = (cfg.channels, cfg.height);
        let mut tokens_per_col = Vec::new();
        for s in &segments {
            tokens_per_col.extend(std::iter::repeat_n(s.token, s.len));
        }
        let cols: Vec<Vec<f64>> = (0..tokens_per_col.len()).map(|j| z.column(j)).collect();
        let unit_cols: Vec<Vec<f64>> = cols.iter().map(|c| unit(c)).collect();

        let mut best_shift = (f64::NEG_INFINITY, 0.0);
        for b in shift_grid(cfg.pitch_range, PITCH_SEARCH_STEP) {
            let variants: Vec<Vec<f64>> = (0..cfg.alphabet)
                .map(|k| unit(&shift_rows(&self.templates[k], c, h, b)))
                .collect();
            let score: f64 = unit_cols
                .iter()
                .zip(&tokens_per_col)
                .map(|(col, &k)| dot(col, &variants[k as usize]))
                .sum();
            if score > best_shift.0 {
                best_shift = (score, b);
            }
        }
        let pitch = best_shift.1;

        let amps: Vec<f64> = cols
            .iter()
            .zip(&tokens_per_col)
            .map(|(col, &k)| {
                let t = shift_rows(&self.templates[k as usize], c, h, pitch);
                let tt = dot(&t, &t);
                if tt > 0.0 {
                    dot(col, &t) / tt
                } else {
                    0.0
                }
            })
            .collect();

        let mut best = (f64::INFINITY, cfg.gain_range[0], cfg.mod_range[0]);
        let [r_lo, r_hi] = cfg.mod_range;
        let n_rates = ((r_hi - r_lo) / RATE_SEARCH_STEP).round() as usize;
        for i in 0..=n_rates {
            let r = if n_rates == 0 { r_lo } else { r_lo + (r_hi - r_lo) * i as f64 / n_rates as f64 };
            let f: Vec<f64> = (0..amps.len()).map(|j| modulation(r, j)).collect();
            let ff: f64 = f.iter().map(|v| v * v).sum();
            let g = amps.iter().zip(&f).map(|(a, b)| a * b).sum::<f64>() / ff;
            let resid: f64 = amps.iter().zip(&f).map(|(a, b)| (a - g * b).powi(2)).sum();
            if resid < best.0 - 1e-12 {
                best = (resid, g, r);
            }
        }
        Ok(StyleParams {
            gain: best.1.clamp(cfg.gain_range[0], cfg.gain_range[1]),
            pitch_bias: pitch,
            mod_rate: best.2,
        })
    }
}

pub fn toy_decode_with(z: &LatentGrid<f64>, speaker: &ToySpeaker) -> Result<FeatureMap> {
    let (c, h, _) = z.dims();
    if speaker.scale.len() != h || speaker.bias.len() != h {
        return Err(Error::Shape(format!("speaker has {} rows, grid has {h}", speaker.scale.len())));
    }
    let cols = z.true_width();
    let mut data = vec![0.0; h * cols];
    for r in 0..h {
        for w in 0..cols {
            let mean = (0..c).map(|ci| z.get(ci, r, w)).sum::<f64>() / c as f64;
            data[r * cols + w] = speaker.scale[r] * mean + speaker.bias[r];
        }
    }
    Ok(FeatureMap { rows: h, cols, data })
}

/// Column amplitude factor `1 + 0.3 sin(2 pi rate col)`.
pub fn modulation(rate: f64, col: usize) -> f64 {
    1.0 + MOD_DEPTH * (2.0 * PI * rate * col as f64).sin()
}

/// Moves a channel-major `C x H` column down by `bias` rows with linear
/// interpolation; reads past either edge take the edge row.
pub fn shift_rows(column: &[f64], channels: usize, height: usize, bias: f64) -> Vec<f64> {
    let mut out = vec![0.0; channels * height];
    let top = (height - 1) as f64;
    for ci in 0..channels {
        let src = &column[ci * height..(ci + 1) * height];
        for hi in 0..height {
            let pos = (hi as f64 - bias).clamp(0.0, top);
            let lo = pos.floor() as usize;
            let hi_idx = (lo + 1).min(height - 1);
            let frac = pos - lo as f64;
            out[ci * height + hi] = (1.0 - frac) * src[lo] + frac * src[hi_idx];
        }
    }
    out
}

fn shift_grid(range: [f64; 2], step: f64) -> Vec<f64> {
    let n = ((range[1] - range[0]) / step).round() as usize;
    let mut out: Vec<f64> = (0..=n).map(|i| range[0] + step * i as f64).filter(|b| *b <= range[1] + 1e-12).collect();
    if range[0] <= 0.0 && range[1] >= 0.0 && !out.iter().any(|b| b.abs() < 1e-12) {
        out.push(0.0);
    }
    out
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn unit(v: &[f64]) -> Vec<f64> {
    let n = dot(v, v).sqrt();
    if n > 0.0 {
        v.iter().map(|x| x / n).collect()
    } else {
        v.to_vec()
    }
}

fn segment_dp(sim: &[Vec<f64>], width: usize, alphabet: usize, lmin: usize, lmax: usize) -> Option<Vec<Segment>> {
    // prefix[k][j] = sum of sim[0..j][k]
    let prefix: Vec<Vec<f64>> = (0..alphabet)
        .map(|k| {
            let mut p = vec![0.0; width + 1];
            for j in 0..width {
                p[j + 1] = p[j] + sim[j][k];
            }
            p
        })
        .collect();
    let neg = f64::NEG_INFINITY;
    // best[j][k]: best score covering columns [0, j) with the last run on k.
    let mut best = vec![vec![neg; alphabet]; width + 1];
    let mut back = vec![vec![(0usize, usize::MAX); alphabet]; width + 1];
    for j in 1..=width {
        for k in 0..alphabet {
            for len in lmin..=lmax.min(j) {
                let start = j - len;
                let gain = prefix[k][j] - prefix[k][start];
                let (prev_score, prev_tok) = if start == 0 {
                    (0.0, usize::MAX)
                } else {
                    let mut b = (neg, usize::MAX);
                    for (k2, &s) in best[start].iter().enumerate() {
                        if k2 != k && s > b.0 {
                            b = (s, k2);
                        }
                    }
                    b
                };
                if prev_score == neg {
                    continue;
                }
                let score = prev_score + gain;
                if score > best[j][k] {
                    best[j][k] = score;
                    back[j][k] = (start, prev_tok);
                }
            }
        }
    }
    let (mut k, score) = best[width]
        .iter()
        .enumerate()
        .fold((0, neg), |acc, (k, &s)| if s > acc.1 { (k, s) } else { acc });
    if score == neg {
        return None;
    }
    let mut segs = Vec::new();
    let mut j = width;
    while j > 0 {
        let (start, prev) = back[j][k];
        segs.push(Segment { token: k as u8, start, len: j - start });
        j = start;
        k = prev;
    }
    segs.reverse();
    Some(segs)
}
