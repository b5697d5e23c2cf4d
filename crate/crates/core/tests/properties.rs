use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use stylebridge::formats::{decode_checkpoint, decode_dataset, decode_grid, encode_checkpoint, encode_dataset, encode_grid};
use stylebridge::metrics::token_agreement;
use stylebridge::samplers::{cfg_predict, i2sb_posterior, timestep_grid};
use stylebridge::tensor::Tensor;
use stylebridge::testbed::ContentSeq;
use stylebridge::{
    BridgeSchedule, Denoise, LatentGrid, NoiseSchedule, Objective, Result, ScheduleKind, StyleEmbedding, Testbed,
    TestbedConfig,
};

fn kind() -> impl Strategy<Value = ScheduleKind> {
    prop_oneof![Just(ScheduleKind::Cosine), Just(ScheduleKind::Linear)]
}

fn values(n: usize) -> impl Strategy<Value = Vec<f64>> {
    prop::collection::vec(-5.0f64..5.0, n)
}

fn grid(v: Vec<f64>) -> LatentGrid<f64> {
    let n = v.len();
    LatentGrid::from_vec(1, 1, n, n, v).unwrap()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(1000))]

    #[test]
    fn v_parameterization_round_trips(
        kind in kind(),
        t_frac in 0.0f64..=1.0,
        x0 in values(6),
        eps in values(6),
    ) {
        let sched = NoiseSchedule::new(kind, 1000).unwrap();
        let t = (t_frac * 1000.0).round() as usize;
        let (x0, eps) = (grid(x0), grid(eps));
        let x_t = sched.forward_diffuse(&x0, &eps, t).unwrap();
        let v = sched.v_from(&x0, &eps, t).unwrap();
        prop_assert!(sched.x0_from(&x_t, &v, t).unwrap().max_abs_diff(&x0) < 1e-10);
        prop_assert!(sched.eps_from(&x_t, &v, t).unwrap().max_abs_diff(&eps) < 1e-10);
        if t > 0 {
            prop_assert!(sched.v_from_x0(&x_t, &x0, t).unwrap().max_abs_diff(&v) < 1e-8);
        }
    }
}

proptest! {
    #[test]
    fn schedules_preserve_variance(kind in kind(), steps in 2usize..2000) {
        let sched = NoiseSchedule::new(kind, steps).unwrap();
        for t in 0..=steps {
            let (a, s) = (sched.alpha(t), sched.sigma(t));
            prop_assert!((a * a + s * s - 1.0).abs() < 1e-12);
        }
        prop_assert!(sched.alpha(steps) < sched.alpha(0));
    }

    #[test]
    fn bridge_marginals_are_pinned(steps in 2usize..500, beta in 1e-5f64..1e-2) {
        let b = BridgeSchedule::new(steps, beta).unwrap();
        for t in 0..=steps {
            let (w0, w1, var) = b.marginal(t).unwrap();
            prop_assert!((w0 + w1 - 1.0).abs() < 1e-12);
            prop_assert!(var >= 0.0);
        }
        prop_assert_eq!(b.marginal(0).unwrap(), (1.0, 0.0, 0.0));
        prop_assert_eq!(b.marginal(steps).unwrap(), (0.0, 1.0, 0.0));
    }

    #[test]
    fn posterior_interpolates_between_pins(
        steps in 2usize..300,
        t_frac in 0.01f64..=1.0,
        s_frac in 0.0f64..1.0,
        x0 in values(4),
        xt in values(4),
    ) {
        let b = BridgeSchedule::new(steps, 3e-4).unwrap();
        let t = ((t_frac * steps as f64).ceil() as usize).clamp(1, steps);
        let s = ((s_frac * t as f64).floor() as usize).min(t - 1);
        let (x0, xt) = (grid(x0), grid(xt));
        let (mean, std) = i2sb_posterior(&x0, &xt, t, s, &b).unwrap();
        let (ft, fs) = (b.var_fwd(t), b.var_fwd(s));
        for i in 0..4 {
            let want = (ft - fs) / ft * x0.as_slice()[i] + fs / ft * xt.as_slice()[i];
            prop_assert!((mean.as_slice()[i] - want).abs() < 1e-12);
        }
        prop_assert!((std * std - fs * (ft - fs) / ft).abs() < 1e-15);
        if s == 0 {
            prop_assert_eq!(std, 0.0);
            prop_assert!(mean.max_abs_diff(&x0) < 1e-12);
        }
    }

    #[test]
    fn timestep_grid_is_strictly_decreasing(steps in 1usize..=200, extra in 0usize..800) {
        let total = steps + extra;
        let g = timestep_grid(total, steps);
        prop_assert_eq!(g.len(), steps + 1);
        prop_assert_eq!(g[0], total);
        prop_assert_eq!(*g.last().unwrap(), 0);
        prop_assert!(g.windows(2).all(|w| w[0] > w[1]));
    }

    #[test]
    fn guidance_is_affine_in_w(w in 0.0f64..8.0, x in values(3), c in values(2)) {
        let x = grid(x);
        let cond = StyleEmbedding::new(c).unwrap();
        let m = Affine;
        let out = cfg_predict(&m, &x, None, 5, &cond, w).unwrap();
        let c_pred = m.predict(&x, None, 5, &cond).unwrap();
        let u_pred = m.predict(&x, None, 5, &StyleEmbedding::null(2)).unwrap();
        for i in 0..3 {
            let want = (1.0 + w) * c_pred.as_slice()[i] - w * u_pred.as_slice()[i];
            prop_assert!((out.as_slice()[i] - want).abs() < 1e-9);
        }
    }

    #[test]
    fn lin_comb_keeps_padding_zero(a in -3.0f64..3.0, b in -3.0f64..3.0, tw1 in 1usize..=6, tw2 in 1usize..=6, seed: u64) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let x = LatentGrid::<f64>::noise(2, 3, 6, tw1, &mut rng).unwrap();
        let y = LatentGrid::<f64>::noise(2, 3, 6, tw2, &mut rng).unwrap();
        let z = x.lin_comb(a, &y, b).unwrap();
        prop_assert!(z.padding_is_zero());
        prop_assert_eq!(z.true_width(), tw1.max(tw2));
    }

    #[test]
    fn agreement_is_symmetric_and_bounded(a in prop::collection::vec(0u8..8, 0..10), b in prop::collection::vec(0u8..8, 0..10)) {
        let (a, b) = (ContentSeq(a), ContentSeq(b));
        let ab = token_agreement(&a, &b);
        prop_assert_eq!(ab, token_agreement(&b, &a));
        prop_assert!((0.0..=1.0).contains(&ab));
        if !a.0.is_empty() {
            prop_assert_eq!(token_agreement(&a, &a), 1.0);
        }
    }

    #[test]
    fn checkpoints_round_trip(shapes in prop::collection::vec(prop::collection::vec(1usize..5, 0..4), 0..5), seed: u64) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let named: Vec<(String, Tensor<f32>)> = shapes
            .into_iter()
            .enumerate()
            .map(|(i, s)| {
                let t = Tensor::from_fn(s, |_| rand::Rng::gen::<f32>(&mut rng) * 10.0 - 5.0);
                (format!("tensor.{i}"), t)
            })
            .collect();
        let bytes = encode_checkpoint(&named);
        let back = decode_checkpoint(&bytes).unwrap();
        prop_assert_eq!(&back, &named);
        prop_assert_eq!(encode_checkpoint(&back), bytes);
    }

    #[test]
    fn grids_round_trip(c in 1usize..3, h in 1usize..4, w in 1usize..6, tw_off in 0usize..6, seed: u64) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let tw = w - tw_off.min(w - 1);
        let g = LatentGrid::<f64>::noise(c, h, w, tw, &mut rng).unwrap();
        let bytes = encode_grid(&g);
        let back = decode_grid(&bytes).unwrap();
        prop_assert_eq!(back.true_width(), tw);
        prop_assert_eq!(encode_grid(&back), bytes);
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(32))]

    #[test]
    fn datasets_round_trip(seed: u64, n in 1usize..6) {
        let tb = Testbed::new(TestbedConfig::compact()).unwrap();
        let pairs = tb.synth_pairs(n, &mut ChaCha8Rng::seed_from_u64(seed)).unwrap();
        let bytes = encode_dataset(&pairs);
        let back = decode_dataset(&bytes).unwrap();
        prop_assert_eq!(back.len(), n);
        for (a, b) in back.iter().zip(&pairs) {
            prop_assert_eq!(&a.content, &b.content);
            prop_assert_eq!(a.speaker, b.speaker);
            prop_assert_eq!(a.style, b.style);
        }
        prop_assert_eq!(encode_dataset(&back), bytes);
    }
}

/// `x + (t + sum(cond)) * 0.1`, with the null condition contributing zero.
struct Affine;

impl Denoise<f64> for Affine {
    fn objective(&self) -> Objective {
        Objective::X0Prediction
    }

    fn predict(&self, x: &LatentGrid<f64>, _: Option<&LatentGrid<f64>>, t: usize, c: &StyleEmbedding) -> Result<LatentGrid<f64>> {
        let shift = (t as f64 + c.values().iter().sum::<f64>()) * 0.1;
        Ok(x.map(|v| v + shift))
    }
}
