use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use stylebridge::denoiser::{grad_check, GradCheckOptions};
use stylebridge::experiments::{derive_seed, run_experiment, write_output, ExperimentName};
use stylebridge::formats::{
    decode_checkpoint, encode_checkpoint, encode_grid, grid_to_pgm, loss_csv, params_from_tensors,
    parse_loss_csv, read_dataset, trainer_from_tensors, trainer_to_tensors, write_dataset, DatasetManifest,
};
use stylebridge::samplers::{ddim_sample, i2sb_sample};
use stylebridge::training::{build_training_batch, ExamplePool, Schedules, TrainExample};
use stylebridge::{
    DenoiserParams, Error, ExperimentConfig, LatentGrid, Result, SamplerMode, Testbed, Trainer,
};

#[derive(Parser)]
#[command(name = "stylebridge", version, about = "Latent diffusion and bridge style transfer on a synthetic testbed")]
struct Cli {
    /// JSON config; defaults are used for anything missing.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Replaces the seed list with this single seed.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Output directory (overrides `output_dir`).
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone, Default)]
struct SamplerFlags {
    #[arg(long, value_enum)]
    sampler: Option<SamplerArg>,
    #[arg(long)]
    steps: Option<usize>,
    #[arg(long)]
    eta: Option<f64>,
    #[arg(long)]
    guidance_w: Option<f64>,
    #[arg(long, num_args = 0..=1, default_missing_value = "true")]
    ot_ode: Option<bool>,
    #[arg(long, num_args = 0..=1, default_missing_value = "true")]
    add_x1_noise: Option<bool>,
}

#[derive(Clone, Copy, ValueEnum)]
enum SamplerArg {
    Ddim,
    I2sb,
}

#[derive(Subcommand)]
enum Command {
    /// Write testbed pairs to a dataset file.
    GenData {
        #[arg(long, default_value_t = 1024)]
        count: usize,
    },
    /// Train the network implied by the sampler settings.
    Train {
        /// Dataset to draw from; fresh testbed pairs otherwise.
        #[arg(long)]
        data: Option<PathBuf>,
        /// Continue from a training checkpoint.
        #[arg(long)]
        resume: Option<PathBuf>,
        #[arg(long)]
        total_steps: Option<u64>,
        #[command(flatten)]
        sampler: SamplerFlags,
    },
    /// Run a trained checkpoint on dataset pairs.
    Sample {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long, default_value_t = 4)]
        count: usize,
        #[command(flatten)]
        sampler: SamplerFlags,
    },
    /// Finite-difference check of the network gradients in double precision.
    GradCheck {
        #[arg(long, default_value_t = 128)]
        params: usize,
        #[arg(long, default_value_t = 1e-4)]
        tolerance: f64,
        #[arg(long, default_value_t = 1e-5)]
        step: f64,
        #[arg(long, default_value_t = 4)]
        batch: usize,
    },
    /// Run one of the named experiments.
    Experiment {
        #[arg(value_parser = parse_name)]
        name: ExperimentName,
        #[command(flatten)]
        sampler: SamplerFlags,
    },
}

fn parse_name(s: &str) -> std::result::Result<ExperimentName, String> {
    s.parse().map_err(|e: Error| e.to_string())
}

fn load_config(cli: &Cli) -> Result<ExperimentConfig> {
    let mut cfg = match &cli.config {
        Some(p) => ExperimentConfig::load(p)?,
        None => ExperimentConfig::default(),
    };
    if let Some(s) = cli.seed {
        cfg.seeds = vec![s];
        cfg.training.seed = s;
    }
    if let Some(o) = &cli.out {
        cfg.output_dir = o.clone();
    }
    Ok(cfg)
}

fn apply_sampler(cfg: &mut ExperimentConfig, f: &SamplerFlags) -> Result<()> {
    let s = &mut cfg.sampler;
    if let Some(m) = f.sampler {
        s.mode = match m {
            SamplerArg::Ddim => SamplerMode::Ddim,
            SamplerArg::I2sb => SamplerMode::I2sb,
        };
    }
    if let Some(v) = f.steps {
        s.steps = v;
    }
    if let Some(v) = f.eta {
        s.eta = v;
    }
    if let Some(v) = f.guidance_w {
        s.guidance_w = v;
    }
    if let Some(v) = f.ot_ode {
        s.ot_ode = v;
    }
    if let Some(v) = f.add_x1_noise {
        s.add_x1_noise = v;
    }
    cfg.validate()
}

fn short_hash(cfg: &ExperimentConfig) -> String {
    cfg.hash()[..12].to_string()
}

fn gen_data(cfg: &ExperimentConfig, count: usize) -> Result<()> {
    if count == 0 {
        return Err(Error::InvalidArgument("--count must be positive".into()));
    }
    let testbed = Testbed::new(cfg.testbed.clone())?;
    let seed = cfg.seeds[0];
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let pairs = testbed.synth_pairs(count, &mut rng)?;
    std::fs::create_dir_all(&cfg.output_dir)?;
    let path = cfg.output_dir.join("dataset.blds");
    write_dataset(&path, &pairs)?;
    let manifest = DatasetManifest { config_hash: cfg.hash(), count: count as u64, seed };
    std::fs::write(cfg.output_dir.join("dataset.json"), serde_json::to_string_pretty(&manifest)?)?;
    println!("wrote {count} pairs to {}", path.display());
    Ok(())
}

fn train(cfg: &ExperimentConfig, data: Option<&Path>, resume: Option<&Path>) -> Result<()> {
    let (mode, layout) = cfg.model_layout();
    let mut trainer = match resume {
        Some(p) => {
            let mut t = trainer_from_tensors(decode_checkpoint(&std::fs::read(p)?)?, mode, cfg.training.clone())?;
            if *t.params.config() != layout {
                return Err(Error::Config("checkpoint network does not match the config".into()));
            }
            let csv = cfg.output_dir.join("loss.csv");
            if csv.exists() {
                t.losses = parse_loss_csv(&std::fs::read_to_string(&csv)?)?;
                let step = t.step();
                t.losses.retain(|r| r.step <= step);
            }
            t
        }
        None => {
            let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(cfg.training.seed, 5));
            Trainer::new(DenoiserParams::<f32>::init(layout, &mut rng)?, mode, cfg.training.clone())?
        }
    };
    std::fs::create_dir_all(&cfg.output_dir)?;
    let noise = cfg.schedule.noise()?;
    let bridge = cfg.schedule.bridge()?;
    let sched = Schedules { noise: &noise, bridge: &bridge };
    let tag = short_hash(cfg);
    let dir = cfg.output_dir.clone();
    let total = cfg.training.total_steps;
    let save = |t: &Trainer<f32>| -> Result<()> {
        let name = if t.step() >= total { format!("model-{tag}.blcp") } else { format!("ckpt-{tag}-{}.blcp", t.step()) };
        std::fs::write(dir.join(&name), encode_checkpoint(&trainer_to_tensors(t)))?;
        std::fs::write(dir.join("loss.csv"), loss_csv(&t.losses))?;
        eprintln!("step {}: saved {name}", t.step());
        Ok(())
    };
    match data {
        Some(p) => {
            let mut pool = ExamplePool::<f32>::from_pairs(&read_dataset(p)?)?;
            trainer.run(&mut pool, sched, save)?;
        }
        None => {
            let testbed = Testbed::new(cfg.testbed.clone())?;
            let mut source = &testbed;
            trainer.run(&mut source, sched, save)?;
        }
    }
    if let Some(last) = trainer.losses.last() {
        println!("final loss {:.6} at step {} ({:.1} s)", last.loss, last.step, last.seconds);
    }
    Ok(())
}

fn sample(cfg: &ExperimentConfig, checkpoint: &Path, data: &Path, count: usize) -> Result<()> {
    let params = params_from_tensors(decode_checkpoint(&std::fs::read(checkpoint)?)?)?;
    let (_, layout) = cfg.model_layout();
    if *params.config() != layout {
        return Err(Error::Config(format!(
            "checkpoint was trained for a different sampler or network; expected {layout:?}, found {:?}",
            params.config()
        )));
    }
    let pairs = read_dataset(data)?;
    let testbed = Testbed::new(cfg.testbed.clone())?;
    std::fs::create_dir_all(&cfg.output_dir)?;
    let noise = cfg.schedule.noise()?;
    let bridge = cfg.schedule.bridge()?;
    for (i, pair) in pairs.iter().take(count).enumerate() {
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(cfg.seeds[0], i as u64));
        let src: LatentGrid<f32> = pair.z_text.cast();
        let out: LatentGrid<f64> = match cfg.sampler.mode {
            SamplerMode::Ddim => {
                let (c, h, w) = src.dims();
                let x = LatentGrid::<f32>::noise(c, h, w, w, &mut rng)?;
                ddim_sample(&params, &x, Some(&src), &pair.embed, &cfg.sampler, &noise, &mut rng)?.cast()
            }
            SamplerMode::I2sb => i2sb_sample(&params, &src, &pair.embed, &cfg.sampler, &bridge, &mut rng)?.cast(),
        };
        std::fs::write(cfg.output_dir.join(format!("sample-{i}.lgrd")), encode_grid(&out))?;
        std::fs::write(cfg.output_dir.join(format!("sample-{i}.pgm")), grid_to_pgm(&out)?)?;
        std::fs::write(cfg.output_dir.join(format!("source-{i}.pgm")), grid_to_pgm(&pair.z_text)?)?;
        let content = stylebridge::metrics::content_score(&testbed, &out, &pair.content);
        let style = stylebridge::metrics::style_score(&testbed, &out, &pair.style);
        match style {
            Ok(s) => println!("sample {i}: content {:.3}, style error {s:.3}", content.score),
            Err(_) => println!("sample {i}: content {:.3}, style unreadable", content.score),
        }
    }
    Ok(())
}

fn grad_check_cmd(cfg: &ExperimentConfig, n: usize, tolerance: f64, step: f64, batch: usize) -> Result<bool> {
    let (mode, layout) = cfg.model_layout();
    let seed = cfg.seeds[0];
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let params = DenoiserParams::<f64>::init_random(layout.clone(), &mut rng)?;
    let testbed = Testbed::new(cfg.testbed.clone())?;
    let examples: Vec<TrainExample<f64>> =
        testbed.synth_pairs(batch.max(1), &mut rng)?.iter().map(TrainExample::from_pair).collect();
    let noise = cfg.schedule.noise()?;
    let bridge = cfg.schedule.bridge()?;
    let tb = build_training_batch(
        &examples,
        mode,
        layout.objective,
        layout.cond_mode,
        Schedules { noise: &noise, bridge: &bridge },
        cfg.training.cond_dropout,
        &mut rng,
    )?;
    let opts = GradCheckOptions { step, num_params: Some(n), seed, ..Default::default() };
    let rep = grad_check(&params, &tb.batch, tolerance, opts)?;
    let loc = rep.location.as_ref().map_or("-".to_string(), |(t, i)| format!("{t}[{i}]"));
    println!(
        "checked {} parameters: max relative error {:.3e} at {loc} (tolerance {:.0e}) -> {}",
        rep.checked,
        rep.max_rel_error,
        rep.tolerance,
        if rep.pass { "PASS" } else { "FAIL" }
    );
    Ok(rep.pass)
}

fn run(cli: Cli) -> Result<bool> {
    let mut cfg = load_config(&cli)?;
    match &cli.command {
        Command::GenData { count } => gen_data(&cfg, *count)?,
        Command::Train { data, resume, total_steps, sampler } => {
            apply_sampler(&mut cfg, sampler)?;
            if let Some(n) = total_steps {
                cfg.training.total_steps = *n;
                cfg.validate()?;
            }
            train(&cfg, data.as_deref(), resume.as_deref())?;
        }
        Command::Sample { checkpoint, data, count, sampler } => {
            apply_sampler(&mut cfg, sampler)?;
            sample(&cfg, checkpoint, data, *count)?;
        }
        Command::GradCheck { params, tolerance, step, batch } => {
            return grad_check_cmd(&cfg, *params, *tolerance, *step, *batch);
        }
        Command::Experiment { name, sampler } => {
            apply_sampler(&mut cfg, sampler)?;
            let out = run_experiment(*name, &cfg, None)?;
            write_output(&cfg.output_dir, *name, &out)?;
            for line in &out.summary {
                println!("{line}");
            }
            println!("{name}: {}", if out.pass { "PASS" } else { "FAIL" });
        }
    }
    Ok(true)
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::from(1),
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(2)
        }
    }
}
