use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use stylebridge::metrics::{content_score, style_error, style_score, feature_style, token_agreement};
use stylebridge::testbed::*;

fn bed(cfg: TestbedConfig) -> Testbed {
    Testbed::new(cfg).unwrap()
}

/// Nearest template by Euclidean distance, one column at a time, collapsing
/// runs. Only valid on unstyled renders.
fn brute_force_decode(tb: &Testbed, z: &stylebridge::grid::LatentGrid<f64>) -> Vec<u8> {
    let mut out: Vec<u8> = Vec::new();
    for j in 0..z.true_width() {
        let col = z.column(j);
        let best = (0..tb.config().alphabet as u8)
            .min_by(|&a, &b| {
                let da: f64 = col.iter().zip(tb.template(a)).map(|(x, y)| (x - y).powi(2)).sum();
                let db: f64 = col.iter().zip(tb.template(b)).map(|(x, y)| (x - y).powi(2)).sum();
                da.total_cmp(&db)
            })
            .unwrap();
        if out.last() != Some(&best) {
            out.push(best);
        }
    }
    out
}

#[test]
fn unstyled_renders_decode_exactly() {
    for cfg in [TestbedConfig::default(), TestbedConfig::compact()] {
        let tb = bed(cfg);
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for _ in 0..200 {
            let content = tb.sample_content(&mut rng);
            let durs = tb.sample_audio_durations(content.len(), &mut rng);
            let z = tb.render_latent(&content, &durs, &StyleParams::NEUTRAL).unwrap();
            assert_eq!(brute_force_decode(&tb, &z), content.0);
            assert_eq!(tb.oracle_content_decode(&z).unwrap(), content);
        }
    }
}

#[test]
fn content_decoding_is_style_invariant() {
    for cfg in [TestbedConfig::default(), TestbedConfig::compact()] {
        let tb = bed(cfg);
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let mut corners = Vec::new();
        let c = tb.config().clone();
        for g in c.gain_range {
            for p in c.pitch_range {
                for r in c.mod_range {
                    corners.push(StyleParams { gain: g, pitch_bias: p, mod_rate: r });
                }
            }
        }
        for i in 0..400 {
            let content = tb.sample_content(&mut rng);
            let durs = tb.sample_audio_durations(content.len(), &mut rng);
            let style = if i < corners.len() { corners[i] } else { tb.sample_style(&mut rng) };
            let z = tb.render_latent(&content, &durs, &style).unwrap();
            assert_eq!(tb.oracle_content_decode(&z).unwrap(), content, "style {style:?}");
        }
    }
}

#[test]
fn style_estimates_are_accurate_and_content_blind() {
    for cfg in [TestbedConfig::default(), TestbedConfig::compact()] {
        let tb = bed(cfg);
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut worst: f64 = 0.0;
        for _ in 0..300 {
            let style = tb.sample_style(&mut rng);
            let content = tb.sample_content(&mut rng);
            let durs = tb.sample_audio_durations(content.len(), &mut rng);
            let z = tb.render_latent(&content, &durs, &style).unwrap();
            let est = tb.oracle_style_estimate(&z).unwrap();
            assert!((est.gain - style.gain).abs() <= 0.1 * style.gain, "{style:?} -> {est:?}");
            worst = worst.max(style_error(&tb, &est, &style));
        }
        assert!(worst < 0.1, "worst style error {worst}");
    }
}

#[test]
fn gain_estimate_on_clean_styled_render() {
    let tb = bed(TestbedConfig::default());
    let content = ContentSeq(vec![2, 5, 1, 7]);
    let style = StyleParams { gain: 1.5, pitch_bias: -1.2, mod_rate: 0.13 };
    let z = tb.render_latent(&content, &[6, 9, 11, 5], &style).unwrap();
    let est = tb.oracle_style_estimate(&z).unwrap();
    assert!((est.gain - 1.5).abs() < 0.15, "{est:?}");
}

#[test]
fn style_score_separates_neutral_from_styled() {
    let tb = bed(TestbedConfig::default());
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let mut total = 0.0;
    let n = 200;
    for _ in 0..n {
        let content = tb.sample_content(&mut rng);
        let durs = vec![tb.config().mean_duration; content.len()];
        let neutral = tb.render_latent(&content, &durs, &StyleParams::NEUTRAL).unwrap();
        assert!(style_score(&tb, &neutral, &StyleParams::NEUTRAL).unwrap() < 0.1);
        let target = StyleParams { gain: rng.gen_range(1.5..=2.0), ..tb.sample_style(&mut rng) };
        let e = style_score(&tb, &neutral, &target).unwrap();
        assert!(e > 0.1, "{target:?}: {e}");
        total += e;
    }
    assert!(total / n as f64 > 0.2);
    let styled = StyleParams { gain: 1.6, pitch_bias: 2.0, mod_rate: 0.3 };
    let z = tb.render_latent(&ContentSeq(vec![1, 3, 0]), &[8, 8, 8], &StyleParams::NEUTRAL).unwrap();
    assert!(style_score(&tb, &z, &styled).unwrap() > 0.2);
}

#[test]
fn content_score_chance_level() {
    let tb = bed(TestbedConfig::default());
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let trials = 1000;
    let mut scores = Vec::new();
    for _ in 0..trials {
        let truth = tb.sample_content(&mut rng);
        let other = tb.sample_content_of_len(truth.len(), &mut rng);
        let durs = tb.sample_audio_durations(other.len(), &mut rng);
        let style = tb.sample_style(&mut rng);
        let z = tb.render_latent(&other, &durs, &style).unwrap();
        let self_z = tb.render_latent(&truth, &vec![8; truth.len()], &style).unwrap();
        assert_eq!(content_score(&tb, &self_z, &truth).score, 1.0);
        scores.push(content_score(&tb, &z, &truth).score);
    }
    let mean = scores.iter().sum::<f64>() / trials as f64;
    let sd = (scores.iter().map(|s| (s - mean).powi(2)).sum::<f64>() / (trials - 1) as f64).sqrt();
    let se = sd / (trials as f64).sqrt();
    let chance = 1.0 / tb.config().alphabet as f64;
    assert!((mean - chance).abs() < 3.0 * se, "mean {mean}, chance {chance}, se {se}");
}

#[test]
fn width_ratio_support() {
    let tb = bed(TestbedConfig::default());
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let ratios: Vec<f64> = (0..10_000)
        .map(|_| {
            let p = tb.synth_pair(&mut rng).unwrap();
            assert!(p.z_text.padding_is_zero() && p.z_audio.padding_is_zero());
            p.z_audio.true_width() as f64 / p.z_text.true_width() as f64
        })
        .collect();
    assert!(ratios.iter().all(|r| (0.5..=1.5).contains(r)));
    let mean = ratios.iter().sum::<f64>() / ratios.len() as f64;
    let sd = (ratios.iter().map(|r| (r - mean).powi(2)).sum::<f64>() / ratios.len() as f64).sqrt();
    assert!(sd > 0.05, "sd {sd}");
}

#[test]
fn durations_within_half_to_one_and_a_half_mean() {
    let tb = bed(TestbedConfig::default());
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    for _ in 0..2000 {
        for d in tb.sample_audio_durations(5, &mut rng) {
            assert!((4..=12).contains(&d));
        }
    }
}

#[test]
fn aligned_pairs_have_equal_widths() {
    let tb = bed(TestbedConfig { aligned: true, ..TestbedConfig::default() });
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    for _ in 0..500 {
        let p = tb.synth_pair(&mut rng).unwrap();
        assert_eq!(p.z_text.true_width(), p.z_audio.true_width());
    }
}

#[test]
fn same_seed_same_pair() {
    let tb = bed(TestbedConfig::default());
    let a = tb.synth_pair(&mut ChaCha8Rng::seed_from_u64(9)).unwrap();
    let b = tb.synth_pair(&mut ChaCha8Rng::seed_from_u64(9)).unwrap();
    assert_eq!(a, b);
    let bits = |g: &stylebridge::grid::LatentGrid<f64>| g.as_slice().iter().map(|v| v.to_bits()).collect::<Vec<_>>();
    assert_eq!(bits(&a.z_audio), bits(&b.z_audio));
}

#[test]
fn noiseless_embeddings_are_content_blind_and_linearly_decodable() {
    let tb = bed(TestbedConfig::default());
    let mut rng = ChaCha8Rng::seed_from_u64(10);
    let style = tb.sample_style(&mut rng);
    let e1 = tb.style_embedding(&style, 0.0, &mut rng).unwrap();
    let e2 = tb.style_embedding(&style, 0.0, &mut rng).unwrap();
    assert_eq!(e1, e2);
    // Two pairs with different content but the same style share the embedding.
    let c1 = tb.render_latent(&ContentSeq(vec![0, 1]), &[8, 8], &style).unwrap();
    let c2 = tb.render_latent(&ContentSeq(vec![4, 2, 6]), &[8, 8, 8], &style).unwrap();
    assert_ne!(c1, c2);

    // Least squares from embedding to normalized style via normal equations.
    let n = 1000;
    let e_dim = tb.config().embed_dim;
    let mut xs = Vec::new();
    let mut ys = Vec::new();
    for _ in 0..n {
        let s = tb.sample_style(&mut rng);
        xs.push(tb.style_embedding(&s, 0.0, &mut rng).unwrap().values().to_vec());
        ys.push(tb.normalize_style(&s));
    }
    // Normal equations in the 3-dimensional row space: E = U M^T, so
    // regress U on E through (E^T E)^+ via the 3x3 system U^T... solve
    // U = E A with A = M (M^T M)^{-1}; estimate A by least squares on
    // a well-conditioned 3-column projection E M.
    let m = embed_map_estimate(&xs, &ys);
    let mut worst: f64 = 0.0;
    for (x, y) in xs.iter().zip(&ys) {
        for k in 0..3 {
            let pred: f64 = (0..e_dim).map(|j| x[j] * m[j][k]).sum();
            worst = worst.max((pred - y[k]).abs());
        }
    }
    assert!(worst < 1e-6, "worst {worst}");
}

/// Minimum-norm least squares `A` in `Y = X A` via ridge-free normal
/// equations on the column space of `X` (rank 3 by construction).
fn embed_map_estimate(xs: &[Vec<f64>], ys: &[[f64; 3]]) -> Vec<[f64; 3]> {
    let d = xs[0].len();
    // X^T Y is d x 3; X^T X is d x d with rank 3. Use Y^T X (3 x d) and the
    // 3 x 3 Gram matrix of Y to write A = X^T Y (Y^T Y)^{-1} (Y^T X X^T Y)^{-1} (Y^T Y)
    // is overkill; instead solve through the 3 x 3 system in the Y basis:
    // X = Y B for B = (Y^T Y)^{-1} Y^T X, then A = B^+ = B^T (B B^T)^{-1}.
    let yty = gram3(ys, ys);
    let mut ytx = vec![[0.0; 3]; d];
    for (x, y) in xs.iter().zip(ys) {
        for j in 0..d {
            for k in 0..3 {
                ytx[j][k] += y[k] * x[j];
            }
        }
    }
    let inv = inv3(yty);
    // B is 3 x d: B[k][j] = sum_l inv[k][l] ytx[j][l]
    let b: Vec<[f64; 3]> = (0..d)
        .map(|j| {
            let mut col = [0.0; 3];
            for k in 0..3 {
                col[k] = (0..3).map(|l| inv[k][l] * ytx[j][l]).sum();
            }
            col
        })
        .collect();
    let mut bbt = [[0.0; 3]; 3];
    for col in &b {
        for k in 0..3 {
            for l in 0..3 {
                bbt[k][l] += col[k] * col[l];
            }
        }
    }
    let binv = inv3(bbt);
    b.iter()
        .map(|col| {
            let mut row = [0.0; 3];
            for k in 0..3 {
                row[k] = (0..3).map(|l| col[l] * binv[l][k]).sum();
            }
            row
        })
        .collect()
}

fn gram3(a: &[[f64; 3]], b: &[[f64; 3]]) -> [[f64; 3]; 3] {
    let mut g = [[0.0; 3]; 3];
    for (x, y) in a.iter().zip(b) {
        for k in 0..3 {
            for l in 0..3 {
                g[k][l] += x[k] * y[l];
            }
        }
    }
    g
}

/// Inverse by cofactors; `inv[i][j] = cof[j][i] / det`.
fn inv3(m: [[f64; 3]; 3]) -> [[f64; 3]; 3] {
    let cof = |r: usize, c: usize| {
        let (r0, r1) = ((r + 1) % 3, (r + 2) % 3);
        let (c0, c1) = ((c + 1) % 3, (c + 2) % 3);
        m[r0][c0] * m[r1][c1] - m[r0][c1] * m[r1][c0]
    };
    let det: f64 = (0..3).map(|c| m[0][c] * cof(0, c)).sum();
    let mut inv = [[0.0; 3]; 3];
    for (i, row) in inv.iter_mut().enumerate() {
        for (j, v) in row.iter_mut().enumerate() {
            *v = cof(j, i) / det;
        }
    }
    inv
}

#[test]
fn speakers_change_decoded_features() {
    let tb = bed(TestbedConfig::default());
    let z = tb.render_latent(&ContentSeq(vec![1, 2, 3]), &[8, 8, 8], &StyleParams::NEUTRAL).unwrap();
    let a = tb.toy_decode(&z, 0).unwrap();
    let b = tb.toy_decode(&z, 1).unwrap();
    assert_ne!(a, b);
}

#[test]
fn feature_level_grows_with_speaker_scale() {
    let tb = bed(TestbedConfig::default());
    let z = tb.render_latent(&ContentSeq(vec![1, 2, 3]), &[8, 8, 8], &StyleParams::NEUTRAL).unwrap();
    let mut prev = f64::NEG_INFINITY;
    for k in 1..=20 {
        let spk = ToySpeaker::uniform(16, 0.25 * k as f64);
        let level = feature_style(&toy_decode_with(&z, &spk).unwrap()).unwrap()[0];
        assert!(level > prev);
        prev = level;
    }
}

#[test]
fn agreement_is_symmetric() {
    let a = ContentSeq(vec![1, 2, 3, 4]);
    let b = ContentSeq(vec![1, 3, 3]);
    assert_eq!(token_agreement(&a, &b), token_agreement(&b, &a));
}
