//! Binary and text file formats.
//!
//! All integers and floats are little-endian.
//!
//! * `BLCP` checkpoints: magic, `u32` version, then tensor records until end
//!   of file. A record is `u32` name length, UTF-8 name, `u32` rank, `u64`
//!   extents and `f32` data.
//! * `BLDS` datasets: magic, `u64` pair count, then pair records. A pair is
//!   two `LGRD` grids (z_text, z_audio), a `u32` token count with one byte
//!   per token, the style triple as `f64`, a `u32` speaker id and a `u32`
//!   embedding length with `f64` values.
//! * `LGRD` grids: tag, `u32` rank, `u64` extents, `u32` true width, `f32`
//!   data.
//! * PGM: binary `P5` with maxval 255, min-max normalized per image.

use std::path::Path;

use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::denoiser::{CondMode, DenoiserConfig, DenoiserParams, Objective, PARAM_NAMES};
use crate::embedding::StyleEmbedding;
use crate::error::{Error, Result};
use crate::grid::LatentGrid;
use crate::tensor::Tensor;
use crate::testbed::{ContentSeq, FeatureMap, LatentPair, StyleParams};
use crate::training::{AdamState, LossRow, TrainConfig, TrainMode, Trainer};

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"BLCP";
pub const CHECKPOINT_VERSION: u32 = 1;
pub const DATASET_MAGIC: &[u8; 4] = b"BLDS";
pub const GRID_TAG: &[u8; 4] = b"LGRD";

pub type NamedTensors = Vec<(String, Tensor<f32>)>;

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn new(bytes: &'a [u8]) -> Self {
        Self { bytes, pos: 0 }
    }

    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len()).ok_or_else(|| {
            Error::Format(format!("truncated: wanted {n} bytes at offset {}", self.pos))
        })?;
        let out = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(out)
    }

    fn array<const N: usize>(&mut self) -> Result<[u8; N]> {
        Ok(self.take(N)?.try_into().expect("length checked"))
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.array()?))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.array()?))
    }

    fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_le_bytes(self.array()?))
    }

    fn len_u64(&mut self) -> Result<usize> {
        usize::try_from(self.u64()?).map_err(|_| Error::Format("length does not fit in memory".into()))
    }

    fn f32s(&mut self, n: usize) -> Result<Vec<f32>> {
        let bytes = self.take(n.checked_mul(4).ok_or_else(|| Error::Format("tensor too large".into()))?)?;
        Ok(bytes.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().expect("chunk of 4"))).collect())
    }

    fn done(&self) -> bool {
        self.pos == self.bytes.len()
    }
}

fn put_u32(buf: &mut Vec<u8>, v: u32) {
    buf.extend_from_slice(&v.to_le_bytes());
}

fn put_u64(buf: &mut Vec<u8>, v: u64) {
    buf.extend_from_slice(&v.to_le_bytes());
}

fn put_f32s(buf: &mut Vec<u8>, data: &[f32]) {
    for v in data {
        buf.extend_from_slice(&v.to_le_bytes());
    }
}

fn extent_product(extents: &[usize]) -> Result<usize> {
    extents
        .iter()
        .try_fold(1usize, |acc, &e| acc.checked_mul(e))
        .ok_or_else(|| Error::Format("tensor extents overflow".into()))
}

pub fn encode_checkpoint(tensors: &[(String, Tensor<f32>)]) -> Vec<u8> {
    let mut buf = Vec::new();
    buf.extend_from_slice(CHECKPOINT_MAGIC);
    put_u32(&mut buf, CHECKPOINT_VERSION);
    for (name, t) in tensors {
        put_u32(&mut buf, name.len() as u32);
        buf.extend_from_slice(name.as_bytes());
        put_u32(&mut buf, t.shape().len() as u32);
        for &e in t.shape() {
            put_u64(&mut buf, e as u64);
        }
        put_f32s(&mut buf, t.data());
    }
    buf
}

pub fn decode_checkpoint(bytes: &[u8]) -> Result<NamedTensors> {
    let mut r = Reader::new(bytes);
    if r.take(4)? != CHECKPOINT_MAGIC {
        return Err(Error::Format("not a BLCP checkpoint".into()));
    }
    let version = r.u32()?;
    if version != CHECKPOINT_VERSION {
        return Err(Error::Format(format!("unsupported checkpoint version {version}")));
    }
    let mut out = Vec::new();
    while !r.done() {
        let name_len = r.u32()? as usize;
        let name = std::str::from_utf8(r.take(name_len)?)
            .map_err(|_| Error::Format("tensor name is not UTF-8".into()))?
            .to_string();
        let rank = r.u32()? as usize;
        let extents = (0..rank).map(|_| r.len_u64()).collect::<Result<Vec<_>>>()?;
        let data = r.f32s(extent_product(&extents)?)?;
        if out.iter().any(|(n, _): &(String, _)| *n == name) {
            return Err(Error::Format(format!("duplicate tensor {name}")));
        }
        out.push((name, Tensor::new(extents, data)?));
    }
    Ok(out)
}

pub fn write_checkpoint(path: &Path, tensors: &[(String, Tensor<f32>)]) -> Result<()> {
    Ok(std::fs::write(path, encode_checkpoint(tensors))?)
}

pub fn read_checkpoint(path: &Path) -> Result<NamedTensors> {
    decode_checkpoint(&std::fs::read(path)?)
}

/// Splits an integer into 16-bit pieces, each exactly representable in f32.
fn int_to_f32s(v: u128, pieces: usize) -> Vec<f32> {
    (0..pieces).map(|i| ((v >> (16 * i)) & 0xffff) as f32).collect()
}

fn f32s_to_int(vals: &[f32]) -> Result<u128> {
    let mut out = 0u128;
    for (i, &v) in vals.iter().enumerate() {
        if !(0.0..65536.0).contains(&v) || v.fract() != 0.0 {
            return Err(Error::Format(format!("bad integer piece {v}")));
        }
        out |= (v as u128) << (16 * i);
    }
    Ok(out)
}

fn meta(name: &str, rows: &[u128], pieces: usize) -> (String, Tensor<f32>) {
    let data: Vec<f32> = rows.iter().flat_map(|&v| int_to_f32s(v, pieces)).collect();
    (name.to_string(), Tensor::new(vec![rows.len(), pieces], data).expect("shape matches data"))
}

fn read_meta(tensors: &mut NamedTensors, name: &str, rows: usize, pieces: usize) -> Result<Vec<u128>> {
    let pos = tensors
        .iter()
        .position(|(n, _)| n == name)
        .ok_or_else(|| Error::Format(format!("checkpoint lacks {name}")))?;
    let (_, t) = tensors.swap_remove(pos);
    if t.shape() != [rows, pieces] {
        return Err(Error::Format(format!("{name} has shape {:?}", t.shape())));
    }
    t.data().chunks(pieces).map(f32s_to_int).collect()
}

fn take_prefixed(tensors: &mut NamedTensors, prefix: &str) -> NamedTensors {
    let mut taken = Vec::new();
    let mut i = 0;
    while i < tensors.len() {
        if let Some(rest) = tensors[i].0.strip_prefix(prefix) {
            let rest = rest.to_string();
            let (_, t) = tensors.swap_remove(i);
            taken.push((rest, t));
        } else {
            i += 1;
        }
    }
    taken
}

fn denoiser_meta(cfg: &DenoiserConfig) -> (String, Tensor<f32>) {
    let rows = [
        cfg.channels,
        cfg.height,
        cfg.width,
        cfg.hidden,
        cfg.time_dim,
        cfg.embed_dim,
        cfg.timesteps,
        cfg.cond_mode.code() as usize,
        cfg.objective.code() as usize,
    ];
    meta("meta.denoiser", &rows.map(|v| v as u128), 4)
}

fn denoiser_from_meta(tensors: &mut NamedTensors) -> Result<DenoiserConfig> {
    let v = read_meta(tensors, "meta.denoiser", 9, 4)?;
    let u = |i: usize| usize::try_from(v[i]).map_err(|_| Error::Format("denoiser field overflows".into()));
    let cfg = DenoiserConfig {
        channels: u(0)?,
        height: u(1)?,
        width: u(2)?,
        hidden: u(3)?,
        time_dim: u(4)?,
        embed_dim: u(5)?,
        timesteps: u(6)?,
        cond_mode: CondMode::from_code(v[7] as u32)?,
        objective: Objective::from_code(v[8] as u32)?,
    };
    cfg.validate()?;
    Ok(cfg)
}

/// Weights only, with the layout needed to rebuild them.
pub fn params_to_tensors(params: &DenoiserParams<f32>) -> NamedTensors {
    let mut out: NamedTensors = params.named().map(|(n, t)| (n.to_string(), t.clone())).collect();
    out.push(denoiser_meta(params.config()));
    out
}

pub fn params_from_tensors(mut tensors: NamedTensors) -> Result<DenoiserParams<f32>> {
    let cfg = denoiser_from_meta(&mut tensors)?;
    let weights: NamedTensors = tensors.into_iter().filter(|(n, _)| PARAM_NAMES.contains(&n.as_str())).collect();
    DenoiserParams::from_named(cfg, weights)
}

/// Everything needed to continue training bit-for-bit: weights, Adam
/// moments, step and counters, and the random stream position.
pub fn trainer_to_tensors(trainer: &Trainer<f32>) -> NamedTensors {
    let mut out = params_to_tensors(&trainer.params);
    for (n, t) in trainer.adam.m.named() {
        out.push((format!("adam.m.{n}"), t.clone()));
    }
    for (n, t) in trainer.adam.v.named() {
        out.push((format!("adam.v.{n}"), t.clone()));
    }
    let (ot_ode, noisy) = match trainer.mode {
        TrainMode::PaletteDdim => (0, 0),
        TrainMode::I2sb { ot_ode, x1_noise_std } => (ot_ode as u128, (x1_noise_std > 0.0) as u128),
    };
    out.push(meta(
        "meta.train",
        &[trainer.adam.step as u128, trainer.null_count as u128, trainer.examples_seen as u128],
        4,
    ));
    out.push(meta("meta.mode", &[trainer.mode.code() as u128, ot_ode, noisy], 1));
    let seed = trainer.rng.get_seed();
    let seed_rows: Vec<u128> = seed.iter().map(|&b| b as u128).collect();
    out.push(meta("meta.rng_seed", &seed_rows, 1));
    out.push(meta("meta.rng_pos", &[trainer.rng.get_stream() as u128, trainer.rng.get_word_pos()], 8));
    out
}

/// Rebuilds a trainer from [`trainer_to_tensors`] output. The mode and
/// training config come from the caller and must agree with the file.
pub fn trainer_from_tensors(mut tensors: NamedTensors, mode: TrainMode, config: TrainConfig) -> Result<Trainer<f32>> {
    let counters = read_meta(&mut tensors, "meta.train", 3, 4)?;
    let mode_row = read_meta(&mut tensors, "meta.mode", 3, 1)?;
    let expected = match mode {
        TrainMode::PaletteDdim => [0, 0, 0],
        TrainMode::I2sb { ot_ode, x1_noise_std } => [1, ot_ode as u128, (x1_noise_std > 0.0) as u128],
    };
    if mode_row != expected {
        return Err(Error::Config(format!("checkpoint mode {mode_row:?} does not match the configured {expected:?}")));
    }
    let seed_rows = read_meta(&mut tensors, "meta.rng_seed", 32, 1)?;
    let pos = read_meta(&mut tensors, "meta.rng_pos", 2, 8)?;
    let m = take_prefixed(&mut tensors, "adam.m.");
    let v = take_prefixed(&mut tensors, "adam.v.");
    let params = params_from_tensors(tensors)?;
    let cfg = params.config().clone();
    let mut adam = AdamState::new(&params);
    adam.m = DenoiserParams::from_named(cfg.clone(), m)?;
    adam.v = DenoiserParams::from_named(cfg, v)?;
    adam.step = counters[0] as u64;

    let mut seed = [0u8; 32];
    for (s, &b) in seed.iter_mut().zip(&seed_rows) {
        *s = u8::try_from(b).map_err(|_| Error::Format("rng seed byte out of range".into()))?;
    }
    let mut rng = <ChaCha8Rng as rand::SeedableRng>::from_seed(seed);
    rng.set_stream(pos[0] as u64);
    rng.set_word_pos(pos[1]);

    let mut trainer = Trainer::new(params, mode, config)?;
    trainer.adam = adam;
    trainer.rng = rng;
    trainer.null_count = counters[1] as u64;
    trainer.examples_seen = counters[2] as u64;
    Ok(trainer)
}

fn put_grid(buf: &mut Vec<u8>, g: &LatentGrid<f64>) {
    buf.extend_from_slice(GRID_TAG);
    let (c, h, w) = g.dims();
    put_u32(buf, 3);
    for e in [c, h, w] {
        put_u64(buf, e as u64);
    }
    put_u32(buf, g.true_width() as u32);
    let data: Vec<f32> = g.as_slice().iter().map(|&v| v as f32).collect();
    put_f32s(buf, &data);
}

fn read_grid(r: &mut Reader<'_>) -> Result<LatentGrid<f64>> {
    if r.take(4)? != GRID_TAG {
        return Err(Error::Format("expected an LGRD grid".into()));
    }
    let rank = r.u32()?;
    if rank != 3 {
        return Err(Error::Format(format!("grid rank must be 3, got {rank}")));
    }
    let (c, h, w) = (r.len_u64()?, r.len_u64()?, r.len_u64()?);
    let tw = r.u32()? as usize;
    let data = r.f32s(extent_product(&[c, h, w])?)?;
    LatentGrid::from_vec_strict(c, h, w, tw, data.into_iter().map(f64::from).collect())
}

/// Encodes one grid on its own, in the `LGRD` layout.
pub fn encode_grid(g: &LatentGrid<f64>) -> Vec<u8> {
    let mut buf = Vec::new();
    put_grid(&mut buf, g);
    buf
}

pub fn decode_grid(bytes: &[u8]) -> Result<LatentGrid<f64>> {
    let mut r = Reader::new(bytes);
    let g = read_grid(&mut r)?;
    if !r.done() {
        return Err(Error::Format("trailing bytes after grid".into()));
    }
    Ok(g)
}

pub fn encode_dataset(pairs: &[LatentPair]) -> Vec<u8> {
    let mut buf = Vec::new();
    buf.extend_from_slice(DATASET_MAGIC);
    put_u64(&mut buf, pairs.len() as u64);
    for p in pairs {
        put_grid(&mut buf, &p.z_text);
        put_grid(&mut buf, &p.z_audio);
        put_u32(&mut buf, p.content.len() as u32);
        buf.extend_from_slice(p.content.tokens());
        for v in p.style.as_array() {
            buf.extend_from_slice(&v.to_le_bytes());
        }
        put_u32(&mut buf, p.speaker);
        put_u32(&mut buf, p.embed.dim() as u32);
        for v in p.embed.values() {
            buf.extend_from_slice(&v.to_le_bytes());
        }
    }
    buf
}

pub fn decode_dataset(bytes: &[u8]) -> Result<Vec<LatentPair>> {
    let mut r = Reader::new(bytes);
    if r.take(4)? != DATASET_MAGIC {
        return Err(Error::Format("not a BLDS dataset".into()));
    }
    let count = r.len_u64()?;
    let mut pairs = Vec::with_capacity(count.min(1 << 16));
    for _ in 0..count {
        let z_text = read_grid(&mut r)?;
        let z_audio = read_grid(&mut r)?;
        let k = r.u32()? as usize;
        let content = ContentSeq(r.take(k)?.to_vec());
        let style = StyleParams { gain: r.f64()?, pitch_bias: r.f64()?, mod_rate: r.f64()? };
        let speaker = r.u32()?;
        let e = r.u32()? as usize;
        let values = (0..e).map(|_| r.f64()).collect::<Result<Vec<_>>>()?;
        pairs.push(LatentPair { z_text, z_audio, content, style, speaker, embed: StyleEmbedding::new(values)? });
    }
    if !r.done() {
        return Err(Error::Format("trailing bytes after dataset".into()));
    }
    Ok(pairs)
}

pub fn write_dataset(path: &Path, pairs: &[LatentPair]) -> Result<()> {
    Ok(std::fs::write(path, encode_dataset(pairs))?)
}

pub fn read_dataset(path: &Path) -> Result<Vec<LatentPair>> {
    decode_dataset(&std::fs::read(path)?)
}

/// Sidecar written next to every dataset.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetManifest {
    pub config_hash: String,
    pub count: u64,
    pub seed: u64,
}

/// Row-major 8-bit image.
#[derive(Debug, Clone, PartialEq)]
pub struct PgmImage {
    pub width: usize,
    pub height: usize,
    pub maxval: u16,
    pub pixels: Vec<u8>,
}

/// Min-max normalizes `values` (`rows x cols`, row-major) into a P5 image.
/// A constant image maps to all zeros.
pub fn encode_pgm(rows: usize, cols: usize, values: &[f64]) -> Result<Vec<u8>> {
    if rows == 0 || cols == 0 || values.len() != rows * cols {
        return Err(Error::Shape(format!("{} values for a {rows}x{cols} image", values.len())));
    }
    if values.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("image values".into()));
    }
    let lo = values.iter().cloned().fold(f64::INFINITY, f64::min);
    let hi = values.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let mut out = format!("P5\n{cols} {rows}\n255\n").into_bytes();
    out.extend(values.iter().map(|&v| if hi > lo { ((v - lo) / (hi - lo) * 255.0).round() as u8 } else { 0 }));
    Ok(out)
}

/// Channels stacked vertically: `C*H` rows by `W` columns.
pub fn grid_to_pgm(g: &LatentGrid<f64>) -> Result<Vec<u8>> {
    let (c, h, w) = g.dims();
    encode_pgm(c * h, w, g.as_slice())
}

pub fn features_to_pgm(f: &FeatureMap) -> Result<Vec<u8>> {
    encode_pgm(f.rows, f.cols, &f.data)
}

/// Strict P5 parser: magic, width, height and maxval separated by
/// whitespace (with `#` comments), one whitespace byte, then the raster.
pub fn parse_pgm(bytes: &[u8]) -> Result<PgmImage> {
    let bad = |m: &str| Error::Format(format!("PGM: {m}"));
    if bytes.len() < 2 || &bytes[..2] != b"P5" {
        return Err(bad("missing P5 magic"));
    }
    let mut pos = 2;
    let mut fields = [0usize; 3];
    for field in fields.iter_mut() {
        loop {
            match bytes.get(pos) {
                Some(b'#') => {
                    while bytes.get(pos).is_some_and(|&b| b != b'\n') {
                        pos += 1;
                    }
                }
                Some(b) if b.is_ascii_whitespace() => pos += 1,
                Some(_) => break,
                None => return Err(bad("truncated header")),
            }
        }
        let start = pos;
        while bytes.get(pos).is_some_and(u8::is_ascii_digit) {
            pos += 1;
        }
        if start == pos {
            return Err(bad("expected a number"));
        }
        *field = std::str::from_utf8(&bytes[start..pos])
            .expect("digits")
            .parse()
            .map_err(|_| bad("number out of range"))?;
    }
    if !bytes.get(pos).is_some_and(u8::is_ascii_whitespace) {
        return Err(bad("header must end in whitespace"));
    }
    pos += 1;
    let [width, height, maxval] = fields;
    if width == 0 || height == 0 || maxval == 0 || maxval > 255 {
        return Err(bad("unsupported dimensions or maxval"));
    }
    let pixels = &bytes[pos..];
    if pixels.len() != width * height {
        return Err(bad("raster size does not match the header"));
    }
    if pixels.iter().any(|&p| p as usize > maxval) {
        return Err(bad("pixel exceeds maxval"));
    }
    Ok(PgmImage { width, height, maxval: maxval as u16, pixels: pixels.to_vec() })
}

pub const LOSS_CSV_HEADER: &str = "step,loss,seconds";

pub fn loss_csv(rows: &[LossRow]) -> String {
    let mut out = format!("{LOSS_CSV_HEADER}\n");
    for r in rows {
        out.push_str(&format!("{},{},{}\n", r.step, r.loss, r.seconds));
    }
    out
}

pub fn parse_loss_csv(text: &str) -> Result<Vec<LossRow>> {
    let mut lines = text.lines();
    if lines.next() != Some(LOSS_CSV_HEADER) {
        return Err(Error::Format("loss CSV header must be step,loss,seconds".into()));
    }
    lines
        .filter(|l| !l.is_empty())
        .map(|l| {
            let f: Vec<&str> = l.split(',').collect();
            let bad = || Error::Format(format!("bad loss row {l:?}"));
            if f.len() != 3 {
                return Err(bad());
            }
            Ok(LossRow {
                step: f[0].parse().map_err(|_| bad())?,
                loss: f[1].parse().map_err(|_| bad())?,
                seconds: f[2].parse().map_err(|_| bad())?,
            })
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn integer_pieces_round_trip() {
        for v in [0u128, 1, 65535, 65536, u64::MAX as u128, u128::MAX] {
            assert_eq!(f32s_to_int(&int_to_f32s(v, 8)).unwrap(), v);
        }
        assert!(f32s_to_int(&[0.5]).is_err());
        assert!(f32s_to_int(&[70000.0]).is_err());
    }

    #[test]
    fn checkpoint_rejects_garbage() {
        assert!(decode_checkpoint(b"NOPE\x01\0\0\0").is_err());
        assert!(decode_checkpoint(b"BLCP\x02\0\0\0").is_err());
        let t = Tensor::new(vec![2], vec![1.0f32, 2.0]).unwrap();
        let mut bytes = encode_checkpoint(&[("a".into(), t)]);
        bytes.pop();
        assert!(decode_checkpoint(&bytes).is_err());
    }

    #[test]
    fn empty_checkpoint_is_header_only() {
        let bytes = encode_checkpoint(&[]);
        assert_eq!(bytes, b"BLCP\x01\0\0\0");
        assert!(decode_checkpoint(&bytes).unwrap().is_empty());
    }

    #[test]
    fn pgm_header_and_normalization() {
        let bytes = encode_pgm(2, 2, &[0.0, 1.0, 2.0, 4.0]).unwrap();
        assert!(bytes.starts_with(b"P5\n2 2\n255\n"));
        let img = parse_pgm(&bytes).unwrap();
        assert_eq!(img.pixels, vec![0, 64, 128, 255]);
        let flat = parse_pgm(&encode_pgm(1, 3, &[2.0; 3]).unwrap()).unwrap();
        assert_eq!(flat.pixels, vec![0; 3]);
        assert!(parse_pgm(b"P2\n1 1\n255\n\0").is_err());
        assert!(parse_pgm(b"P5\n2 2\n255\n\0").is_err());
        assert!(parse_pgm(b"P5 # c\n1 1\n255\n\x07").is_ok());
    }

    #[test]
    fn loss_csv_round_trip() {
        let rows = vec![LossRow { step: 50, loss: 0.25, seconds: 1.5 }, LossRow { step: 100, loss: 1e-7, seconds: 3.0 }];
        let text = loss_csv(&rows);
        assert!(text.starts_with("step,loss,seconds\n"));
        assert_eq!(parse_loss_csv(&text).unwrap(), rows);
        assert!(parse_loss_csv("a,b\n").is_err());
    }
}
