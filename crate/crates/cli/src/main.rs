//! Command-line surface over the motionflow pipeline. Every command is a
//! pure function of (config, seed): reruns reproduce outputs byte for byte.

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use motionflow::cfm::FlowConfig;
use motionflow::ckpt::Checkpoint;
use motionflow::error::Error;
use motionflow::graph::Tape;
use motionflow::metrics;
use motionflow::net::grad_check_many;
use motionflow::synthetic::Dataset;
use motionflow::tensor::Tensor;
use motionflow::train::{
    build_conditioning, build_dataset, build_flow_net, build_lip_proj, held_out_flow_loss,
    held_out_recon_rmse, metrics_csv, moment_error, pooled_codes, run_ablation, sample_codes,
    sample_motion, sub_seed, train_ae, train_sampler, write_manifest, AeArtifacts, Config,
    MetricRow, SamplerArtifacts, TrainMode,
};

#[derive(Parser)]
#[command(name = "motionflow", version, about = "Seeded motion-sampler training pipeline")]
struct Cli {
    /// JSON config file; built-in defaults apply when omitted
    #[arg(long, global = true)]
    config: Option<PathBuf>,

    /// Training seed override
    #[arg(long, global = true)]
    seed: Option<u64>,

    /// Output directory
    #[arg(long, global = true, default_value = "out")]
    out: PathBuf,

    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Write the synthetic dataset as a CSV bundle with a manifest
    GenData,
    /// Train the motion autoencoder and write its checkpoint
    TrainAe,
    /// Train the flow sampler and prior on top of a trained autoencoder
    TrainSampler {
        /// Autoencoder checkpoint (defaults to <out>/ae.ck)
        #[arg(long)]
        ae: Option<PathBuf>,
    },
    /// Draw motion sequences from trained artifacts into samples/*.csv
    Sample {
        #[arg(long)]
        ae: Option<PathBuf>,
        /// Sampler checkpoint (defaults to <out>/sampler.ck)
        #[arg(long)]
        sampler: Option<PathBuf>,
        /// Number of sequences, cycling through held-out scenes
        #[arg(long, default_value_t = 4)]
        count: usize,
        /// Sampling temperature override
        #[arg(long)]
        temperature: Option<f64>,
    },
    /// Score trained artifacts on the held-out split
    Eval {
        #[arg(long)]
        ae: Option<PathBuf>,
        #[arg(long)]
        sampler: Option<PathBuf>,
    },
    /// Train both target modes per seed and compare sampled motion
    Ablate {
        /// Comma-separated training seeds (at least 5)
        #[arg(long, value_delimiter = ',', default_value = "1,2,3,4,5,6,7,8,9,10")]
        seeds: Vec<u64>,
    },
    /// Verify analytic gradients of the composed training loss numerically
    GradCheck,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(Error::Divergence(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(2)
        }
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}

fn load_config(cli: &Cli) -> Result<Config, Error> {
    let mut cfg = match &cli.config {
        Some(path) => Config::from_json_file(path)?,
        None => Config::default(),
    };
    if let Some(seed) = cli.seed {
        cfg.train.seed = seed;
    }
    cfg.validate()?;
    Ok(cfg)
}

fn load_ae(path: &Path, cfg: &Config) -> Result<AeArtifacts, Error> {
    AeArtifacts::from_checkpoint(&Checkpoint::load(path)?, cfg)
}

fn load_sampler(path: &Path, cfg: &Config) -> Result<SamplerArtifacts, Error> {
    SamplerArtifacts::from_checkpoint(&Checkpoint::load(path)?, cfg)
}

/// The autoencoder paired with a sampler: required in normalised mode,
/// absent in direct mode.
fn paired_ae(
    s: &SamplerArtifacts,
    ae_path: &Path,
    cfg: &Config,
) -> Result<Option<AeArtifacts>, Error> {
    match s.mode {
        TrainMode::Normalised => Ok(Some(load_ae(ae_path, cfg)?)),
        TrainMode::DirectRegression => Ok(None),
    }
}

fn write_metrics(out: &Path, cfg: &Config, rows: &[MetricRow]) -> Result<(), Error> {
    std::fs::create_dir_all(out)?;
    std::fs::write(out.join("metrics.csv"), metrics_csv(rows, &cfg.hash()))?;
    write_manifest(out, cfg)?;
    Ok(())
}

fn run(cli: &Cli) -> Result<(), Error> {
    let cfg = load_config(cli)?;
    let out = &cli.out;
    match &cli.cmd {
        Cmd::GenData => {
            let ds = build_dataset(&cfg)?;
            ds.save(&out.join("dataset"))?;
            write_metrics(out, &cfg, &[])?;
            println!("wrote {} scenes to {}", ds.scenes.len(), out.join("dataset").display());
        }
        Cmd::TrainAe => {
            let ds = build_dataset(&cfg)?;
            let ae = train_ae(&ds, &cfg)?;
            std::fs::create_dir_all(out)?;
            ae.to_checkpoint()?.save(&out.join("ae.ck"))?;
            let rmse = held_out_recon_rmse(&ds, &ae)?;
            let seed = cfg.train.seed;
            let rows = vec![
                MetricRow::new("ae_final_loss", *ae.curve.last().unwrap_or(&f64::NAN), seed),
                MetricRow::new("ae_held_out_rmse", rmse, seed),
            ];
            write_metrics(out, &cfg, &rows)?;
            println!("autoencoder held-out rmse: {rmse}");
        }
        Cmd::TrainSampler { ae } => {
            let ds = build_dataset(&cfg)?;
            let ae_arts = match cfg.train.mode {
                TrainMode::Normalised => {
                    let path = ae.clone().unwrap_or_else(|| out.join("ae.ck"));
                    Some(load_ae(&path, &cfg)?)
                }
                TrainMode::DirectRegression => None,
            };
            let s = train_sampler(&ds, ae_arts.as_ref(), &cfg)?;
            std::fs::create_dir_all(out)?;
            s.to_checkpoint()?.save(&out.join("sampler.ck"))?;
            let flow_loss = held_out_flow_loss(&ds, &cfg, ae_arts.as_ref(), &s)?;
            let seed = cfg.train.seed;
            let last = s.curve.last();
            let rows = vec![
                MetricRow::new("sampler_final_total", last.map_or(f64::NAN, |r| r.total), seed),
                MetricRow::new("sampler_final_cfm", last.map_or(f64::NAN, |r| r.cfm), seed),
                MetricRow::new("sampler_final_prior_nll", last.map_or(f64::NAN, |r| r.prior_nll), seed),
                MetricRow::new("held_out_flow_loss", flow_loss, seed),
            ];
            write_metrics(out, &cfg, &rows)?;
            println!("held-out flow loss: {flow_loss}");
        }
        Cmd::Sample { ae, sampler, count, temperature } => {
            let ds = build_dataset(&cfg)?;
            let s = load_sampler(
                &sampler.clone().unwrap_or_else(|| out.join("sampler.ck")),
                &cfg,
            )?;
            let ae_arts = paired_ae(&s, &ae.clone().unwrap_or_else(|| out.join("ae.ck")), &cfg)?;
            let cond = build_conditioning(ds.seed, &cfg)?;
            let flow_cfg = match temperature {
                Some(t) => FlowConfig::new(cfg.flow.sigma_min, cfg.flow.euler_steps, *t)?,
                None => cfg.flow.clone(),
            };
            let held: Vec<_> = ds.held_out_scenes().collect();
            let dir = out.join("samples");
            std::fs::create_dir_all(&dir)?;
            let mut rng = ChaCha8Rng::seed_from_u64(sub_seed(cfg.train.seed, "cli-sample"));
            for i in 0..*count {
                let scene = held[i % held.len()];
                let motion = sample_motion(scene, &cond, ae_arts.as_ref(), &s, &flow_cfg, &mut rng)?;
                std::fs::write(
                    dir.join(format!("sample_{i:02}.csv")),
                    motionflow::train::samples_csv(&motion)?,
                )?;
            }
            write_metrics(out, &cfg, &[])?;
            println!("wrote {count} sequences to {}", dir.display());
        }
        Cmd::Eval { ae, sampler } => {
            let ds = build_dataset(&cfg)?;
            let s = load_sampler(
                &sampler.clone().unwrap_or_else(|| out.join("sampler.ck")),
                &cfg,
            )?;
            let ae_arts = paired_ae(&s, &ae.clone().unwrap_or_else(|| out.join("ae.ck")), &cfg)?;
            let rows = eval_rows(&ds, &cfg, ae_arts.as_ref(), &s)?;
            write_metrics(out, &cfg, &rows)?;
            for r in &rows {
                println!("{} = {}", r.metric, r.value);
            }
        }
        Cmd::Ablate { seeds } => {
            let ds = build_dataset(&cfg)?;
            let report = run_ablation(&ds, &cfg, seeds)?;
            std::fs::create_dir_all(out)?;
            std::fs::write(out.join("ablation.csv"), report.to_csv())?;
            let (wins, total) = report.normalised_wins();
            let rows = vec![MetricRow::new(
                "normalised_lower_jerk_seeds",
                wins as f64,
                cfg.train.seed,
            )];
            write_metrics(out, &cfg, &rows)?;
            println!("normalised mode had lower mean jerk in {wins}/{total} seeds");
        }
        Cmd::GradCheck => {
            let err = composed_grad_error(&cfg)?;
            println!("composed-loss gradient max relative error: {err:.3e}");
            if err >= 1e-4 {
                return Err(Error::Gradient(format!(
                    "composed-loss gradient check failed: relative error {err:.3e}"
                )));
            }
        }
    }
    Ok(())
}

fn eval_rows(
    ds: &Dataset,
    cfg: &Config,
    ae: Option<&AeArtifacts>,
    s: &SamplerArtifacts,
) -> Result<Vec<MetricRow>, Error> {
    let seed = cfg.train.seed;
    let cond = build_conditioning(ds.seed, cfg)?;
    let mut rows = Vec::new();
    if let Some(ae) = ae {
        rows.push(MetricRow::new("ae_held_out_rmse", held_out_recon_rmse(ds, ae)?, seed));
    }
    rows.push(MetricRow::new(
        "held_out_flow_loss",
        held_out_flow_loss(ds, cfg, ae, s)?,
        seed,
    ));

    let reference = pooled_codes(ds.held_out_scenes(), ae, s)?;
    let mut rng = ChaCha8Rng::seed_from_u64(sub_seed(seed, "cli-eval"));
    let mut pooled = Vec::new();
    let mut n = 0usize;
    let mut jerk_sum = 0.0;
    for scene in ds.held_out_scenes() {
        for _ in 0..4 {
            let z = sample_codes(scene, &cond, ae, s, &cfg.flow, &mut rng)?;
            n += z.shape()[0];
            pooled.extend_from_slice(z.data());
            let motion = motionflow::train::codes_to_motion(&z, ae, s)?;
            jerk_sum += metrics::jerk(&motion)?;
        }
    }
    let c = s.channels;
    let samples = Tensor::new(&[n, c], pooled)?;
    rows.push(MetricRow::new("moment_error", moment_error(&samples, &reference)?, seed));
    rows.push(MetricRow::new("mean_jerk", jerk_sum / (n as f64 / cfg.scene.frames as f64), seed));

    let scene = ds
        .held_out_scenes()
        .next()
        .ok_or_else(|| Error::invalid("dataset has no held-out scenes"))?;
    for (name, temp) in [("div_std_temp1", 1.0), ("div_std_temp0", 0.0)] {
        let fc = FlowConfig::new(cfg.flow.sigma_min, cfg.flow.euler_steps, temp)?;
        let mut draws = Vec::new();
        for _ in 0..16 {
            let z = sample_codes(scene, &cond, ae, s, &fc, &mut rng)?;
            draws.extend_from_slice(z.data());
        }
        let t = Tensor::new(&[16, scene.frames(), c], draws)?;
        rows.push(MetricRow::new(name, metrics::div_std(&t)?, seed));
    }
    Ok(rows)
}

/// Numerical gradient check of the joint sampler loss (flow + prior + lip
/// projection through both terms) on a small seeded batch.
fn composed_grad_error(cfg: &Config) -> Result<f64, Error> {
    use motionflow::cfm::cfm_loss_with_mu;
    use motionflow::normaliser::prior_nll_traced;
    use motionflow::prior::build_prior_net;
    use rand::Rng;
    use rand_distr::StandardNormal;

    let c = 3usize;
    let d = 5usize;
    let (b, w) = (2usize, 6usize);
    let flow = build_flow_net(c, 8, 11)?;
    let prior = build_prior_net(c, 6, 12)?;
    let lip = build_lip_proj(d, c, 13)?;
    let mut rng = ChaCha8Rng::seed_from_u64(sub_seed(cfg.train.seed, "grad-check"));
    let mut randn = |shape: &[usize]| {
        let mut t = Tensor::zeros(shape);
        for v in t.data_mut() {
            *v = rng.sample(StandardNormal);
        }
        t
    };
    let x0 = randn(&[b, w, c]);
    let x1 = randn(&[b, w, c]);
    let z0 = randn(&[b, w, c]);
    let lip_feats = randn(&[b, w, d]);
    let times: Vec<f64> = (0..b).map(|i| (i as f64 + 0.35) / b as f64).collect();
    let (lc, lp) = (cfg.train.lambda_cfm, cfg.train.lambda_prior);
    let flow_cfg = cfg.flow.clone();

    grad_check_many(&[flow, prior, lip], 1e-5, move |tape: &mut Tape, models| {
        let lip_in = tape.input(lip_feats.clone());
        let lip_c = models[2].forward_traced(tape, lip_in)?;
        let z0v = tape.input(z0.clone());
        let cond = tape.add(lip_c, z0v)?;
        let mu = models[1].forward_traced(tape, cond)?;
        let cfm = cfm_loss_with_mu(tape, &models[0], &x0, &x1, &times, mu, &flow_cfg)?;
        let codes = tape.input(x1.clone());
        let nll = prior_nll_traced(tape, codes, mu)?;
        let a = tape.scale(cfm, lc);
        let bterm = tape.scale(nll, lp);
        tape.add(a, bterm)
    })
}
