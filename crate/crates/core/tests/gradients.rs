use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use stylebridge::denoiser::{compare_gradients, grad_check, masked_mse, Batch, GradCheckOptions, PARAM_NAMES};
use stylebridge::training::{build_training_batch, Schedules, TrainExample};
use stylebridge::{
    BridgeSchedule, CondMode, DenoiserConfig, DenoiserParams, NoiseSchedule, Objective, ScheduleKind, Testbed,
    TestbedConfig, TrainMode,
};

fn small_testbed() -> Testbed {
    Testbed::new(TestbedConfig {
        channels: 2,
        height: 3,
        max_width: 16,
        mean_duration: 3,
        max_tokens: 3,
        pitch_range: [-1.0, 1.0],
        embed_dim: 5,
        ..TestbedConfig::default()
    })
    .unwrap()
}

fn setup(cond_mode: CondMode, objective: Objective, seed: u64) -> (DenoiserParams<f64>, Batch<f64>) {
    let tb = small_testbed();
    let c = tb.config();
    let layout = DenoiserConfig {
        channels: c.channels,
        height: c.height,
        width: c.max_width,
        hidden: 12,
        time_dim: 6,
        embed_dim: c.embed_dim,
        timesteps: 50,
        cond_mode,
        objective,
    };
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let params = DenoiserParams::<f64>::init_random(layout, &mut rng).unwrap();
    let examples: Vec<TrainExample<f64>> = tb.synth_pairs(3, &mut rng).unwrap().iter().map(TrainExample::from_pair).collect();
    let noise = NoiseSchedule::new(ScheduleKind::Cosine, 50).unwrap();
    let bridge = BridgeSchedule::new(50, 1e-2).unwrap();
    let mode = match (cond_mode, objective) {
        (CondMode::EmbedInject, Objective::X0Prediction) => TrainMode::I2sb { ot_ode: false, x1_noise_std: 0.1 },
        _ => TrainMode::PaletteDdim,
    };
    let batch = build_training_batch(
        &examples,
        mode,
        objective,
        cond_mode,
        Schedules { noise: &noise, bridge: &bridge },
        0.3,
        &mut rng,
    )
    .unwrap()
    .batch;
    (params, batch)
}

const ALL_LAYOUTS: [(CondMode, Objective); 4] = [
    (CondMode::ConcatChannels, Objective::VPrediction),
    (CondMode::ConcatChannels, Objective::X0Prediction),
    (CondMode::EmbedInject, Objective::VPrediction),
    (CondMode::EmbedInject, Objective::X0Prediction),
];

#[test]
fn small_nets_pass_in_every_layout() {
    for (i, (cond_mode, objective)) in ALL_LAYOUTS.into_iter().enumerate() {
        let (params, batch) = setup(cond_mode, objective, i as u64);
        let rep = grad_check(&params, &batch, 1e-4, GradCheckOptions { num_params: None, ..Default::default() }).unwrap();
        assert!(rep.pass, "{cond_mode:?}/{objective:?}: {rep:?}");
        assert_eq!(rep.checked, params.num_params());
    }
}

#[test]
fn corrupted_entry_is_located() {
    let (params, batch) = setup(CondMode::EmbedInject, Objective::X0Prediction, 9);
    let (preds, cache) = params.forward_batch(&batch.inputs()).unwrap();
    let (_, d_out) = masked_mse(&preds, &batch.targets).unwrap();
    let mut grads = params.backward(&cache, &d_out).unwrap();
    let opts = GradCheckOptions { num_params: None, ..Default::default() };
    let clean = compare_gradients(&params, &batch, &grads, 1e-4, opts).unwrap();
    assert!(clean.pass, "{clean:?}");

    // Largest entry of the second trunk layer, so the fault is well above
    // finite-difference noise.
    let k = PARAM_NAMES.iter().position(|n| *n == "trunk.1.weight").unwrap();
    let data = grads.tensors_mut()[k].data_mut();
    let idx = (0..data.len()).max_by(|&a, &b| data[a].abs().total_cmp(&data[b].abs())).unwrap();
    data[idx] *= 2.0;
    let rep = compare_gradients(&params, &batch, &grads, 1e-4, opts).unwrap();
    assert!(!rep.pass);
    assert_eq!(rep.location, Some(("trunk.1.weight".to_string(), idx)));
    assert!((rep.max_rel_error - 0.5).abs() < 1e-3, "{}", rep.max_rel_error);
}

#[test]
fn infinite_tolerance_always_passes() {
    let (params, batch) = setup(CondMode::ConcatChannels, Objective::VPrediction, 3);
    let mut grads = params.zeros_like();
    grads.tensors_mut()[0].fill(1e3);
    let rep = compare_gradients(&params, &batch, &grads, f64::INFINITY, GradCheckOptions::default()).unwrap();
    assert!(rep.pass);
    assert!(rep.max_rel_error > 0.5);
}

#[test]
fn sampled_check_uses_requested_count() {
    let (params, batch) = setup(CondMode::EmbedInject, Objective::VPrediction, 4);
    let rep = grad_check(&params, &batch, 1e-4, GradCheckOptions { num_params: Some(100), ..Default::default() }).unwrap();
    assert_eq!(rep.checked, 100);
    assert!(rep.pass, "{rep:?}");
}

