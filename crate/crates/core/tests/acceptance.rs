//! Acceptance gate: eight seeded checks over the whole toolkit. They run
//! sequentially inside one test so each reported wall time is honest on a
//! single core, and every check prints one PASS/FAIL line with its numbers
//! (visible with `--nocapture`, or automatically when something fails).

use std::time::{Duration, Instant};

use motionflow::audio_mapper::{
    energy, mapper_input_dim, mrf_forward, temporal_interpolate, ContentFeatures, MrfConfig,
    MrfMapper,
};
use motionflow::cfm::{
    self, cfm_loss, cfm_loss_traced, flow_input_dim, ot_path, target_field, FlowBatch, FlowConfig,
};
use motionflow::ckpt::Checkpoint;
use motionflow::graph::PadMode;
use motionflow::latent::{extract_motion, subtract_identity};
use motionflow::metrics::{div_std, identity_consistency};
use motionflow::net::{grad_check, grad_check_many, NetBuilder, NetworkModel};
use motionflow::normaliser::{ae_loss_traced, prior_nll, prior_nll_traced, CompressedMotion};
use motionflow::synthetic::SceneConfig;
use motionflow::train::{
    build_conditioning, build_dataset, held_out_flow_loss, held_out_recon_rmse, metrics_csv,
    moment_error, pooled_codes, run_ablation, sample_codes, sample_motion, train_ae,
    train_extractor, train_sampler, Config, MetricRow, TrainMode, Widths,
};
use motionflow::Tensor;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

/// Sampler epochs for the ablation fixture. The jerk ordering between the
/// two modes is already decisive this early and only widens with longer
/// training, so the fixture stays well inside the half-hour budget.
const ABLATION_EPOCHS: usize = 60;

/// Sampler epochs and learning rate for the fidelity fixture. The default
/// 500-epoch schedule does not fit ten trainings into the time budget, so
/// the fixture trades epochs for a larger step size.

fn gauss(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
    let n: usize = shape.iter().product();
    let data = (0..n).map(|_| rng.sample(StandardNormal)).collect();
    Tensor::new(shape, data).unwrap()
}

fn norm(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

fn max_abs_diff(a: &Tensor, b: &Tensor) -> f64 {
    a.data()
        .iter()
        .zip(b.data())
        .map(|(x, y)| (x - y).abs())
        .fold(0.0, f64::max)
}

/// Affine flow model that echoes the conditioning block of the packed input
/// `[x, t, mu]`, i.e. computes exactly `mu`.
fn mu_selector_model(channels: usize) -> NetworkModel {
    let width = flow_input_dim(channels);
    let mut m = NetBuilder::new("flow", width)
        .affine(channels)
        .build(0)
        .unwrap();
    let mut w = vec![0.0; width * channels];
    for i in 0..channels {
        w[(channels + 1 + i) * channels + i] = 1.0;
    }
    m.set_param("l0.w", Tensor::new(&[width, channels], w).unwrap())
        .unwrap();
    m
}

/// Affine flow model that ignores its input and always outputs `bias`.
fn bias_field_model(channels: usize, bias: &[f64]) -> NetworkModel {
    let width = flow_input_dim(channels);
    let mut m = NetBuilder::new("flow", width)
        .affine(channels)
        .build(0)
        .unwrap();
    m.set_param("l0.w", Tensor::zeros(&[width, channels]))
        .unwrap();
    m.set_param("l0.b", Tensor::from_slice(bias)).unwrap();
    m
}

fn small_config() -> Config {
    let mut cfg = Config::default();
    cfg.motion_dim = 10;
    cfg.bank_codes = 4;
    cfg.compressed_dim = 4;
    cfg.n_scenes = 12;
    cfg.scene = SceneConfig {
        frames: 12,
        sinusoids: 2,
        noise_level: 0.02,
        freq_range: (0.05, 0.4),
        amp_range: (0.2, 1.0),
        embed_dim: 6,
    };
    cfg.train.window = 8;
    cfg.train.ae_epochs = 4;
    cfg.train.sampler_epochs = 3;
    cfg.widths = Widths {
        flow: 10,
        prior: 8,
        ae: 12,
        extractor: 10,
    };
    cfg.validate().unwrap();
    cfg
}

// --- criterion 1: path algebra and Euler endpoint stability ---------------

fn path_exactness() -> Result<String, String> {
    let sigma = 1e-4;
    let mut rng = ChaCha8Rng::seed_from_u64(101);
    for i in 0..1000 {
        let frames = rng.random_range(1..=8);
        let c = rng.random_range(1..=6);
        let scale: f64 = rng.random_range(0.1..4.0);
        let mut x0 = gauss(&mut rng, &[frames, c]);
        for v in x0.data_mut() {
            *v *= scale;
        }
        let x1 = gauss(&mut rng, &[frames, c]);

        let p0 = ot_path(&x0, &x1, 0.0, sigma).map_err(|e| e.to_string())?;
        if p0.data() != x0.data() {
            return Err(format!("instance {i}: path(0) differs from x0"));
        }
        let p1 = ot_path(&x0, &x1, 1.0, sigma).map_err(|e| e.to_string())?;
        let diff: Vec<f64> = p1
            .data()
            .iter()
            .zip(x1.data())
            .map(|(a, b)| a - b)
            .collect();
        let bound = sigma * norm(x0.data()) * (1.0 + 1e-9) + 1e-15;
        if norm(&diff) > bound {
            return Err(format!(
                "instance {i}: ‖path(1) − x1‖ = {} exceeds σ_min‖x0‖ = {}",
                norm(&diff),
                sigma * norm(x0.data())
            ));
        }
    }

    // The exact conditional field is constant in t, so forward Euler lands on
    // the same endpoint for any step count, up to accumulation order.
    let mut worst_manual: f64 = 0.0;
    for _ in 0..50 {
        let x0 = gauss(&mut rng, &[4, 3]);
        let x1 = gauss(&mut rng, &[4, 3]);
        let u = target_field(&x0, &x1, sigma).map_err(|e| e.to_string())?;
        let endpoints: Vec<Tensor> = [1usize, 3, 10, 100]
            .iter()
            .map(|&n| {
                let mut x = x0.clone();
                for _ in 0..n {
                    for (xv, uv) in x.data_mut().iter_mut().zip(u.data()) {
                        *xv += uv / n as f64;
                    }
                }
                x
            })
            .collect();
        for pair in endpoints.windows(2) {
            worst_manual = worst_manual.max(max_abs_diff(&pair[0], &pair[1]));
        }
    }
    if worst_manual > 1e-12 {
        return Err(format!(
            "oracle-field Euler endpoints differ across step counts by {worst_manual:.3e}"
        ));
    }

    // Same statement through the sampler loop itself: a constant field from
    // the origin must land on its target for every step count.
    let target = [1.25, -0.5, 2.0];
    let model = bias_field_model(3, &target);
    let mu = Tensor::zeros(&[6, 3]);
    let mut worst_sampler: f64 = 0.0;
    let mut endpoints = Vec::new();
    for n in [1usize, 2, 5, 10, 50] {
        let cfg = FlowConfig::new(sigma, n, 0.0).map_err(|e| e.to_string())?;
        let out = cfm::sample(&model, &mu, &cfg, &mut ChaCha8Rng::seed_from_u64(0))
            .map_err(|e| e.to_string())?;
        for row in 0..6 {
            for (o, t) in out.row(row).iter().zip(&target) {
                worst_sampler = worst_sampler.max((o - t).abs());
            }
        }
        endpoints.push(out);
    }
    for pair in endpoints.windows(2) {
        worst_sampler = worst_sampler.max(max_abs_diff(&pair[0], &pair[1]));
    }
    if worst_sampler > 1e-12 {
        return Err(format!(
            "sampler endpoints differ across step counts by {worst_sampler:.3e}"
        ));
    }

    Ok(format!(
        "1000 boundary instances; Euler endpoint spread manual={worst_manual:.2e} sampler={worst_sampler:.2e}"
    ))
}

// --- criterion 2: gradient integrity ---------------------------------------

/// One small net per layer kind, each with an input that exercises it.
fn layer_menagerie(seed: u64) -> Vec<(NetworkModel, Tensor)> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed.wrapping_mul(2654435761).wrapping_add(17));
    let mut nets = Vec::new();
    let b = |name: &str, dim: usize| NetBuilder::new(name, dim);

    nets.push((b("affine", 4).affine(3).build(seed).unwrap(), gauss(&mut rng, &[5, 4])));
    nets.push((
        b("tanh", 3).affine(4).tanh().affine(2).build(seed + 1).unwrap(),
        gauss(&mut rng, &[5, 3]),
    ));
    nets.push((
        b("leaky_relu", 3)
            .affine(4)
            .leaky_relu(0.1)
            .affine(2)
            .build(seed + 2)
            .unwrap(),
        gauss(&mut rng, &[5, 3]),
    ));
    nets.push((
        b("conv1d", 3)
            .conv1d(4, 3, 1, PadMode::Replicate)
            .conv1d(2, 3, 2, PadMode::Replicate)
            .build(seed + 3)
            .unwrap(),
        gauss(&mut rng, &[7, 3]),
    ));
    nets.push((
        b("depthwise", 3)
            .depthwise_conv1d(3, 2, PadMode::Replicate)
            .build(seed + 4)
            .unwrap(),
        gauss(&mut rng, &[7, 3]),
    ));
    nets.push((
        b("attention", 4).self_attention().build(seed + 5).unwrap(),
        gauss(&mut rng, &[5, 4]),
    ));
    nets.push((
        b("layer_norm", 4)
            .layer_norm()
            .affine(2)
            .build(seed + 6)
            .unwrap(),
        gauss(&mut rng, &[4, 4]),
    ));
    nets.push((
        b("residual", 4)
            .residual(|body| body.affine(4).tanh())
            .affine(2)
            .build(seed + 7)
            .unwrap(),
        gauss(&mut rng, &[4, 4]),
    ));
    nets
}

fn gradient_integrity() -> Result<String, String> {
    const STEP: f64 = 1e-5;
    const TOL: f64 = 1e-4;
    let mut worst: f64 = 0.0;

    for seed in 0..100u64 {
        for (model, input) in layer_menagerie(seed) {
            let out_shape = model.forward(&input).map_err(|e| e.to_string())?.shape().to_vec();
            let err = grad_check(
                &model,
                &input,
                |tape, y| {
                    let zeros = tape.input(Tensor::zeros(&out_shape));
                    ae_loss_traced(tape, y, zeros)
                },
                STEP,
            )
            .map_err(|e| e.to_string())?;
            if err >= TOL {
                return Err(format!(
                    "layer {} at seed {seed}: gradient error {err:.3e}",
                    model.name()
                ));
            }
            worst = worst.max(err);
        }

        let mut rng = ChaCha8Rng::seed_from_u64(seed.wrapping_add(9000));

        // ae_loss through encoder and decoder jointly.
        let enc = NetBuilder::new("enc", 4).affine(6).tanh().affine(2).build(seed + 20).unwrap();
        let dec = NetBuilder::new("dec", 2).affine(6).tanh().affine(4).build(seed + 21).unwrap();
        let x = gauss(&mut rng, &[6, 4]);
        let err = grad_check_many(&[enc, dec], STEP, |tape, ms| {
            let input = tape.input(x.clone());
            let codes = ms[0].forward_traced(tape, input)?;
            let recon = ms[1].forward_traced(tape, codes)?;
            let target = tape.input(x.clone());
            ae_loss_traced(tape, recon, target)
        })
        .map_err(|e| e.to_string())?;
        if err >= TOL {
            return Err(format!("composed ae_loss at seed {seed}: error {err:.3e}"));
        }
        worst = worst.max(err);

        // cfm_loss through a small flow net.
        let c = 2;
        let flow = NetBuilder::new("flow", flow_input_dim(c))
            .affine(6)
            .tanh()
            .affine(c)
            .build(seed + 22)
            .unwrap();
        let x0 = gauss(&mut rng, &[2, 4, c]);
        let x1 = gauss(&mut rng, &[2, 4, c]);
        let mu = gauss(&mut rng, &[2, 4, c]);
        let times = vec![rng.random_range(0.0..1.0), rng.random_range(0.0..1.0)];
        let batch = FlowBatch::new(x0, x1, times, mu).map_err(|e| e.to_string())?;
        let fc = FlowConfig::default();
        let err = grad_check_many(&[flow], STEP, |tape, ms| {
            cfm_loss_traced(tape, &ms[0], &batch, &fc)
        })
        .map_err(|e| e.to_string())?;
        if err >= TOL {
            return Err(format!("composed cfm_loss at seed {seed}: error {err:.3e}"));
        }
        worst = worst.max(err);

        // prior_nll through a prior head.
        let prior = NetBuilder::new("prior", 3).affine(6).tanh().affine(3).build(seed + 23).unwrap();
        let cond = gauss(&mut rng, &[5, 3]);
        let codes = gauss(&mut rng, &[5, 3]);
        let err = grad_check_many(&[prior], STEP, |tape, ms| {
            let input = tape.input(cond.clone());
            let mu = ms[0].forward_traced(tape, input)?;
            let target = tape.input(codes.clone());
            prior_nll_traced(tape, target, mu)
        })
        .map_err(|e| e.to_string())?;
        if err >= TOL {
            return Err(format!("composed prior_nll at seed {seed}: error {err:.3e}"));
        }
        worst = worst.max(err);
    }

    Ok(format!(
        "8 layer kinds + 3 composed losses × 100 seeds, worst relative error {worst:.2e}"
    ))
}

// --- criterion 3: closed-form loss values ----------------------------------

fn closed_form_losses() -> Result<String, String> {
    let mut rng = ChaCha8Rng::seed_from_u64(303);
    let (bsz, frames, c) = (3, 5, 4);
    let fc = FlowConfig::default();

    // A model that reproduces the conditioning block exactly; feeding the
    // true conditional field through that block must zero the loss.
    let model = mu_selector_model(c);
    let x0 = gauss(&mut rng, &[bsz, frames, c]);
    let x1 = gauss(&mut rng, &[bsz, frames, c]);
    let times: Vec<f64> = (0..bsz).map(|_| rng.random_range(0.0..1.0)).collect();
    let mut mu = vec![0.0; bsz * frames * c];
    for b in 0..bsz {
        let s0 = Tensor::new(&[frames, c], x0.data()[b * frames * c..(b + 1) * frames * c].to_vec())
            .unwrap();
        let s1 = Tensor::new(&[frames, c], x1.data()[b * frames * c..(b + 1) * frames * c].to_vec())
            .unwrap();
        let u = target_field(&s0, &s1, fc.sigma_min).map_err(|e| e.to_string())?;
        mu[b * frames * c..(b + 1) * frames * c].copy_from_slice(u.data());
    }
    let mu = Tensor::new(&[bsz, frames, c], mu).unwrap();
    let batch = FlowBatch::new(x0, x1, times, mu).map_err(|e| e.to_string())?;
    let zero_loss = cfm_loss(&model, &batch, &fc).map_err(|e| e.to_string())?;
    if zero_loss != 0.0 {
        return Err(format!("oracle field gives loss {zero_loss:.3e}, expected exactly 0"));
    }

    // Adding a uniform offset ε to every field output raises the mean squared
    // residual to exactly ε².
    let eps = 0.37;
    let mut offset = mu_selector_model(c);
    offset
        .set_param("l0.b", Tensor::new(&[c], vec![eps; c]).unwrap())
        .unwrap();
    let eps_loss = cfm_loss(&offset, &batch, &fc).map_err(|e| e.to_string())?;
    if (eps_loss - eps * eps).abs() > 1e-12 {
        return Err(format!(
            "uniform offset gives loss {eps_loss}, expected ε² = {}",
            eps * eps
        ));
    }

    // Prior likelihood of its own mean: only the normalisation term remains.
    let frames_nll = 9;
    let cn = 5;
    let mu_nll = gauss(&mut rng, &[frames_nll, cn]);
    let cm = CompressedMotion::new(mu_nll.clone(), cn + 1).map_err(|e| e.to_string())?;
    let nll = prior_nll(&cm, &mu_nll).map_err(|e| e.to_string())?;
    let expected = frames_nll as f64 * cn as f64 / 2.0 * (2.0 * std::f64::consts::PI).ln();
    if (nll - expected).abs() > 1e-9 {
        return Err(format!(
            "prior_nll(μ, μ) = {nll:.12}, expected {expected:.12}"
        ));
    }

    Ok(format!(
        "oracle loss 0 exactly; offset loss ε² to {:.1e}; self-likelihood to {:.1e}",
        (eps_loss - eps * eps).abs(),
        (nll - expected).abs()
    ))
}

// --- criterion 4: normaliser ablation --------------------------------------

fn normaliser_ablation() -> Result<String, String> {
    let mut cfg = Config::default();
    cfg.train.sampler_epochs = ABLATION_EPOCHS;
    let ds = build_dataset(&cfg).map_err(|e| e.to_string())?;
    let seeds: Vec<u64> = (1..=10).collect();
    let report = run_ablation(&ds, &cfg, &seeds).map_err(|e| e.to_string())?;
    let (wins, total) = report.normalised_wins();
    let mean = |mode: TrainMode| {
        let vals: Vec<f64> = report
            .rows
            .iter()
            .filter(|r| r.mode == mode)
            .map(|r| r.mean_jerk)
            .collect();
        vals.iter().sum::<f64>() / vals.len() as f64
    };
    let detail = format!(
        "normalised lower jerk in {wins}/{total} seeds (mean jerk {:.4} vs {:.4})",
        mean(TrainMode::Normalised),
        mean(TrainMode::DirectRegression)
    );
    if total != 10 || wins < 8 {
        return Err(detail);
    }
    Ok(detail)
}

// --- criterion 5: identity invariance --------------------------------------

fn identity_invariance() -> Result<String, String> {
    let cfg = Config::default();
    let ds = build_dataset(&cfg).map_err(|e| e.to_string())?;
    let bank = &ds.bank;

    // Three fixed identities, ten motion scenes each: motion content comes
    // from distinct scenes, the identity row is shared within a group.
    let scenes: Vec<_> = ds.train_scenes().take(30).cloned().collect();
    let groups: Vec<Vec<_>> = scenes
        .chunks(10)
        .map(|chunk| {
            let identity = chunk[0].identity.clone();
            chunk
                .iter()
                .map(|s| {
                    let mut s = s.clone();
                    s.identity = identity.clone();
                    s
                })
                .collect()
        })
        .collect();

    let mean_rows = |rows: &Tensor| -> Tensor {
        let (t, d) = (rows.shape()[0], rows.shape()[1]);
        let mut acc = vec![0.0; d];
        for j in 0..t {
            for (a, v) in acc.iter_mut().zip(rows.row(j)) {
                *a += v / t as f64;
            }
        }
        Tensor::new(&[d], acc).unwrap()
    };

    let consistency_with = |extract: &dyn Fn(&Tensor) -> Result<Tensor, String>| -> Result<f64, String> {
        let mut min_c = f64::INFINITY;
        for group in &groups {
            let mut rows = Vec::new();
            for scene in group {
                let visual = scene.visual_features().map_err(|e| e.to_string())?;
                let resid = extract(&visual)?;
                rows.extend_from_slice(mean_rows(&resid).data());
            }
            let ids = Tensor::new(&[group.len(), cfg.motion_dim], rows).unwrap();
            min_c = min_c.min(identity_consistency(&ids).map_err(|e| e.to_string())?);
        }
        Ok(min_c)
    };

    // Oracle: exact projection onto the bank span.
    let project = |visual: &Tensor| -> Result<Tensor, String> {
        let mags = bank.coeffs(visual).map_err(|e| e.to_string())?;
        let f_m = bank.reconstruct(&mags).map_err(|e| e.to_string())?;
        visual.sub(&f_m).map_err(|e| e.to_string())
    };
    let oracle = consistency_with(&project)?;

    // Learned: the magnitude extractor, frame by frame through the public op.
    let extractor = train_extractor(&ds, &cfg, 30, 1e-3).map_err(|e| e.to_string())?;
    let learned_extract = |visual: &Tensor| -> Result<Tensor, String> {
        let (t, d) = (visual.shape()[0], visual.shape()[1]);
        let mut out = Vec::with_capacity(t * d);
        for j in 0..t {
            let f = Tensor::from_slice(visual.row(j));
            let motion = extract_motion(&f, bank, &extractor).map_err(|e| e.to_string())?;
            let id = subtract_identity(&f, &motion).map_err(|e| e.to_string())?;
            out.extend_from_slice(id.f_id.data());
        }
        Ok(Tensor::new(&[t, d], out).unwrap())
    };
    let learned = consistency_with(&learned_extract)?;

    let detail = format!(
        "identity consistency over 3 identities × 10 motions: oracle {oracle:.6}, extractor {learned:.6}"
    );
    if oracle <= 0.999 || learned <= 0.99 {
        return Err(detail);
    }
    Ok(detail)
}

// --- criterion 6: sampler fidelity ------------------------------------------

/// Corpus tuned so pooled held-out moments are statistically stable: every
/// sinusoid completes at least one cycle per 96-frame scene and amplitudes
/// sit in a narrow band, which pins the split's own moment luck (train-pool
/// vs held-out-pool gap on raw data) near 0.05 — well under the 0.15 gate,
/// so the comparison measures the sampler, not the split.
fn fidelity_fixture() -> Config {
    let mut cfg = Config::default();
    cfg.motion_dim = 10;
    cfg.bank_codes = 4;
    cfg.compressed_dim = 4;
    cfg.n_scenes = 512;
    cfg.scene.frames = 96;
    cfg.scene.sinusoids = 2;
    cfg.scene.noise_level = 0.02;
    cfg.scene.freq_range = (0.25, 0.8);
    cfg.scene.amp_range = (0.5, 0.7);
    cfg.widths = Widths { flow: 64, prior: 24, ae: 24, extractor: 32 };
    cfg.train.ae_epochs = 32;
    cfg.train.sampler_epochs = 85;
    cfg
}

fn sampler_fidelity() -> Result<String, String> {
    let mut cfg = fidelity_fixture();
    let ds = build_dataset(&cfg).map_err(|e| e.to_string())?;
    let cond = build_conditioning(ds.seed, &cfg).map_err(|e| e.to_string())?;

    let mut errors = Vec::new();
    let mut div_pairs = Vec::new();
    for seed in 1..=10u64 {
        cfg.train.seed = seed;
        let ae = train_ae(&ds, &cfg).map_err(|e| e.to_string())?;
        let s = train_sampler(&ds, Some(&ae), &cfg).map_err(|e| e.to_string())?;

        // Pooled moments of sampler draws against pooled held-out codes.
        let reference =
            pooled_codes(ds.held_out_scenes(), Some(&ae), &s).map_err(|e| e.to_string())?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed.wrapping_add(640_000));
        let mut pooled = Vec::new();
        let mut rows = 0usize;
        for scene in ds.held_out_scenes() {
            for _ in 0..8 {
                let z = sample_codes(scene, &cond, Some(&ae), &s, &cfg.flow, &mut rng)
                    .map_err(|e| e.to_string())?;
                rows += z.shape()[0];
                pooled.extend_from_slice(z.data());
            }
        }
        let c = pooled.len() / rows;
        let samples = Tensor::new(&[rows, c], pooled).unwrap();
        errors.push(moment_error(&samples, &reference).map_err(|e| e.to_string())?);

        // Sampling diversity must respond to temperature in every seed.
        let scene = ds.held_out_scenes().next().unwrap();
        let mut spread = |temp: f64| -> Result<f64, String> {
            let fc = FlowConfig::new(cfg.flow.sigma_min, cfg.flow.euler_steps, temp)
                .map_err(|e| e.to_string())?;
            let mut pooled = Vec::new();
            for _ in 0..32 {
                let z = sample_codes(scene, &cond, Some(&ae), &s, &fc, &mut rng)
                    .map_err(|e| e.to_string())?;
                pooled.extend_from_slice(z.data());
            }
            let t = Tensor::new(&[32, scene.frames(), c], pooled).unwrap();
            div_std(&t).map_err(|e| e.to_string())
        };
        div_pairs.push((spread(1.0)?, spread(0.0)?));
    }

    let mean_err = errors.iter().sum::<f64>() / errors.len() as f64;
    let div_ok = div_pairs.iter().all(|(hot, cold)| hot > cold);
    let worst_gap = div_pairs
        .iter()
        .map(|(hot, cold)| hot - cold)
        .fold(f64::INFINITY, f64::min);
    let detail = format!(
        "mean moment error {mean_err:.4} over 10 seeds (max {:.4}); div_std(T=1) > div_std(T=0) in {}/10 seeds (min gap {worst_gap:+.4})",
        errors.iter().cloned().fold(0.0, f64::max),
        div_pairs.iter().filter(|(h, c)| h > c).count()
    );
    if mean_err > 0.15 || !div_ok {
        return Err(detail);
    }
    Ok(detail)
}

// --- criterion 7: mapper contracts ------------------------------------------

fn mapper_contracts() -> Result<String, String> {
    let mut rng = ChaCha8Rng::seed_from_u64(707);
    let embed = 5;
    let width = mapper_input_dim(embed);
    let mrf_cfg = MrfConfig::default();

    for frames in [8usize, 32, 128] {
        let f_t_up = gauss(&mut rng, &[frames, embed]);
        let e_t = gauss(&mut rng, &[2, embed]);
        let content = ContentFeatures::new(e_t, f_t_up).map_err(|e| e.to_string())?;
        let input = content.mapper_input().map_err(|e| e.to_string())?;
        if input.shape() != [frames, width] {
            return Err(format!(
                "mapper input for {frames} frames came out {:?}",
                input.shape()
            ));
        }
        let mapper =
            MrfMapper::new(mrf_cfg.clone(), width, 6, 4242).map_err(|e| e.to_string())?;
        // Each branch shrinks by its receptive-field excess and the mapper
        // interpolates the result back to the input length.
        for (i, &(k, d)) in mrf_cfg.branches.iter().enumerate() {
            let shrunk = mapper.branch(i).forward(&input).map_err(|e| e.to_string())?;
            if shrunk.shape()[0] != frames - (k - 1) * d {
                return Err(format!(
                    "branch {i} (kernel {k}, dilation {d}) on {frames} frames yielded {} rows",
                    shrunk.shape()[0]
                ));
            }
            let restored = temporal_interpolate(&shrunk, frames).map_err(|e| e.to_string())?;
            if restored.shape()[0] != frames {
                return Err(format!(
                    "branch {i} restored to {} frames instead of {frames}",
                    restored.shape()[0]
                ));
            }
        }
        let out = mrf_forward(&mapper, &input).map_err(|e| e.to_string())?;
        if out.shape() != [frames, 6] {
            return Err(format!(
                "mapper output for {frames} frames came out {:?}",
                out.shape()
            ));
        }
    }

    // Endpoint preservation under resampling, both stretching and shrinking.
    let seq = gauss(&mut rng, &[7, 3]);
    let up = temporal_interpolate(&seq, 25).map_err(|e| e.to_string())?;
    let down = temporal_interpolate(&up, 4).map_err(|e| e.to_string())?;
    if up.row(0) != seq.row(0) || up.row(24) != seq.row(6) {
        return Err("upsampling moved an endpoint".into());
    }
    if down.row(0) != up.row(0) || down.row(3) != up.row(24) {
        return Err("downsampling moved an endpoint".into());
    }

    // Per-frame energy against the plain two-pass norm.
    let feats = gauss(&mut rng, &[40, embed]);
    let e = energy(&feats).map_err(|e| e.to_string())?;
    let mut worst: f64 = 0.0;
    for j in 0..40 {
        let oracle = norm(feats.row(j)) / (embed as f64).sqrt();
        worst = worst.max((e.data()[j] - oracle).abs());
    }
    if worst > 1e-12 {
        return Err(format!("energy deviates from the norm oracle by {worst:.3e}"));
    }

    Ok(format!(
        "length kept at T ∈ {{8, 32, 128}} for {} branches; endpoints bitwise; energy within {worst:.1e}",
        mrf_cfg.branches.len()
    ))
}

// --- criterion 8: determinism and round trips -------------------------------

fn determinism_and_round_trips() -> Result<String, String> {
    let cfg = small_config();

    let run = || -> Result<(String, Vec<u8>, Vec<u8>), String> {
        let ds = build_dataset(&cfg).map_err(|e| e.to_string())?;
        let ae = train_ae(&ds, &cfg).map_err(|e| e.to_string())?;
        let s = train_sampler(&ds, Some(&ae), &cfg).map_err(|e| e.to_string())?;
        let cond = build_conditioning(ds.seed, &cfg).map_err(|e| e.to_string())?;

        let rmse = held_out_recon_rmse(&ds, &ae).map_err(|e| e.to_string())?;
        let flow = held_out_flow_loss(&ds, &cfg, Some(&ae), &s).map_err(|e| e.to_string())?;
        let scene = ds.held_out_scenes().next().unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(88);
        let motion =
            sample_motion(scene, &cond, Some(&ae), &s, &cfg.flow, &mut rng).map_err(|e| e.to_string())?;
        let rows = vec![
            MetricRow::new("ae_holdout_rmse", rmse, cfg.train.seed),
            MetricRow::new("flow_holdout_loss", flow, cfg.train.seed),
            MetricRow::new(
                "sample_mean_abs",
                motion.data().iter().map(|v| v.abs()).sum::<f64>() / motion.len() as f64,
                cfg.train.seed,
            ),
        ];
        let csv = metrics_csv(&rows, &cfg.hash());

        let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
        let ae_path = dir.path().join("ae.ck");
        let s_path = dir.path().join("sampler.ck");
        ae.to_checkpoint()
            .and_then(|ck| ck.save(&ae_path))
            .map_err(|e| e.to_string())?;
        s.to_checkpoint()
            .and_then(|ck| ck.save(&s_path))
            .map_err(|e| e.to_string())?;

        // Round trip: the reloaded artifacts must reproduce training outputs
        // bitwise, through both reconstruction and sampling.
        let ae_back = motionflow::train::AeArtifacts::from_checkpoint(
            &Checkpoint::load(&ae_path).map_err(|e| e.to_string())?,
            &cfg,
        )
        .map_err(|e| e.to_string())?;
        let s_back = motionflow::train::SamplerArtifacts::from_checkpoint(
            &Checkpoint::load(&s_path).map_err(|e| e.to_string())?,
            &cfg,
        )
        .map_err(|e| e.to_string())?;
        let probe = ds.scenes[0].motion_seq.clone();
        if ae.reconstruct(&probe).map_err(|e| e.to_string())?.data()
            != ae_back.reconstruct(&probe).map_err(|e| e.to_string())?.data()
        {
            return Err("autoencoder round trip changed a reconstruction".into());
        }
        let mut r1 = ChaCha8Rng::seed_from_u64(4242);
        let mut r2 = ChaCha8Rng::seed_from_u64(4242);
        let a = sample_motion(scene, &cond, Some(&ae), &s, &cfg.flow, &mut r1)
            .map_err(|e| e.to_string())?;
        let b = sample_motion(scene, &cond, Some(&ae_back), &s_back, &cfg.flow, &mut r2)
            .map_err(|e| e.to_string())?;
        if a.data() != b.data() {
            return Err("sampler round trip changed a sample".into());
        }

        let ae_bytes = std::fs::read(&ae_path).map_err(|e| e.to_string())?;
        let s_bytes = std::fs::read(&s_path).map_err(|e| e.to_string())?;
        Ok((csv, ae_bytes, s_bytes))
    };

    let (csv1, ae1, s1) = run()?;
    let (csv2, ae2, s2) = run()?;
    if csv1 != csv2 {
        return Err("two identical runs produced different metrics.csv contents".into());
    }
    if ae1 != ae2 || s1 != s2 {
        return Err("two identical runs produced different checkpoint bytes".into());
    }

    Ok(format!(
        "repeated run: metrics.csv ({} bytes) and checkpoints ({} + {} bytes) bitwise identical; round trips exact",
        csv1.len(),
        ae1.len(),
        s1.len()
    ))
}

// ---------------------------------------------------------------------------

#[test]
fn acceptance() {
    struct Check {
        name: &'static str,
        budget: Duration,
        hard_budget: bool,
        run: fn() -> Result<String, String>,
    }
    let checks: [Check; 8] = [
        Check {
            name: "1 path exactness",
            budget: Duration::from_secs(5),
            hard_budget: true,
            run: path_exactness,
        },
        Check {
            name: "2 gradient integrity",
            budget: Duration::from_secs(60),
            hard_budget: true,
            run: gradient_integrity,
        },
        Check {
            name: "3 closed-form losses",
            budget: Duration::from_secs(1),
            hard_budget: true,
            run: closed_form_losses,
        },
        Check {
            name: "4 normaliser ablation",
            budget: Duration::from_secs(30 * 60),
            hard_budget: false,
            run: normaliser_ablation,
        },
        Check {
            name: "5 identity invariance",
            budget: Duration::from_secs(5 * 60),
            hard_budget: true,
            run: identity_invariance,
        },
        Check {
            name: "6 sampler fidelity",
            budget: Duration::from_secs(20 * 60),
            hard_budget: true,
            run: sampler_fidelity,
        },
        Check {
            name: "7 mapper contracts",
            budget: Duration::from_secs(5),
            hard_budget: true,
            run: mapper_contracts,
        },
        Check {
            name: "8 determinism and round trips",
            budget: Duration::from_secs(5 * 60),
            hard_budget: false,
            run: determinism_and_round_trips,
        },
    ];

    // Optional subset filter for local iteration, e.g. ACCEPTANCE_ONLY=1,3.
    // Skipped checks are reported as SKIP, never as passes.
    let only: Option<Vec<usize>> = std::env::var("ACCEPTANCE_ONLY").ok().map(|v| {
        v.split(',')
            .filter_map(|s| s.trim().parse().ok())
            .collect()
    });

    let mut failures = Vec::new();
    for (idx, check) in checks.iter().enumerate() {
        if let Some(keep) = &only {
            if !keep.contains(&(idx + 1)) {
                eprintln!("criterion {}: SKIP (ACCEPTANCE_ONLY)", check.name);
                continue;
            }
        }
        let t0 = Instant::now();
        let outcome = (check.run)();
        let elapsed = t0.elapsed();
        let in_budget = elapsed <= check.budget;
        let pass = outcome.is_ok() && (in_budget || !check.hard_budget);
        let verdict = if pass { "PASS" } else { "FAIL" };
        let detail = match &outcome {
            Ok(d) => d.clone(),
            Err(d) => d.clone(),
        };
        let budget_note = if in_budget {
            String::new()
        } else {
            format!(" [over budget {:?}]", check.budget)
        };
        eprintln!(
            "criterion {}: {verdict} in {:.1?}{budget_note} — {detail}",
            check.name, elapsed
        );
        if !pass {
            failures.push(check.name);
        }
    }
    assert!(failures.is_empty(), "failed criteria: {failures:?}");
}
