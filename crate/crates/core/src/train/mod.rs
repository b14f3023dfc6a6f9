//! Staged training: the autoencoder first, then the motion sampler (flow
//! net, prior, and lip projection trained jointly), plus sampling,
//! evaluation, and the normalised-vs-direct ablation harness.
//!
//! Every run is a pure function of (dataset, config): all randomness flows
//! from named sub-seeds of the config seeds, so identical inputs reproduce
//! identical checkpoints and metrics byte for byte.

mod adam;
mod artifacts;
mod config;

pub use adam::Adam;
pub use artifacts::{manifest_json, metrics_csv, samples_csv, write_manifest, MetricRow};
pub use config::{Config, TrainConfig, TrainMode, Widths};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use sha2::{Digest, Sha256};

use crate::audio_mapper::{mapper_input_dim, mrf_forward, MrfMapper};
use crate::cfm::{self, cfm_loss_with_mu, flow_input_dim, FlowConfig};
use crate::ckpt::Checkpoint;
use crate::error::{Error, Result};
use crate::graph::{PadMode, Tape};
use crate::latent::CodeBank;
use crate::net::{NetBuilder, NetworkModel};
use crate::normaliser::{self, ae_loss_traced, prior_nll_traced, CompressedMotion};
use crate::prior::build_prior_net;
use crate::synthetic::{token_embedding_table, Dataset, SyntheticScene};
use crate::tensor::Tensor;

/// Derives an independent stream seed from a base seed and a role tag.
pub fn sub_seed(seed: u64, tag: &str) -> u64 {
    let mut h = Sha256::new();
    h.update(seed.to_le_bytes());
    h.update(tag.as_bytes());
    let d = h.finalize();
    u64::from_le_bytes(d[..8].try_into().expect("digest is long enough"))
}

/// Generates the corpus a config describes: seeded bank, seeded scenes.
pub fn build_dataset(cfg: &Config) -> Result<Dataset> {
    cfg.validate()?;
    let bank = crate::synthetic::random_bank(cfg.bank_codes, cfg.motion_dim, cfg.bank_seed)?;
    crate::synthetic::gen_dataset(cfg.data_seed, cfg.n_scenes, &cfg.scene, &bank)
}

const STD_FLOOR: f64 = 1e-8;

/// Per-channel affine normalization fitted on training rows. Channels with
/// (near-)zero spread keep scale 1 so apply/invert stay exact inverses.
#[derive(Debug, Clone, PartialEq)]
pub struct Standardizer {
    mean: Tensor,
    scale: Tensor,
}

impl Standardizer {
    /// Fits mean and population std per channel, pooling all leading axes.
    pub fn fit(rows: &Tensor) -> Result<Self> {
        let c = rows.last_dim()?;
        let n = rows.leading_count()?;
        if n < 2 {
            return Err(Error::invalid(format!(
                "standardizer needs at least 2 rows, got {n}"
            )));
        }
        rows.ensure_finite("standardizer input")?;
        let mut mean = vec![0.0; c];
        for r in 0..n {
            for (m, v) in mean.iter_mut().zip(&rows.data()[r * c..(r + 1) * c]) {
                *m += v;
            }
        }
        for m in &mut mean {
            *m /= n as f64;
        }
        let mut var = vec![0.0; c];
        for r in 0..n {
            for j in 0..c {
                let d = rows.data()[r * c + j] - mean[j];
                var[j] += d * d;
            }
        }
        let scale: Vec<f64> = var
            .iter()
            .map(|v| {
                let s = (v / n as f64).sqrt();
                if s < STD_FLOOR {
                    1.0
                } else {
                    s
                }
            })
            .collect();
        Ok(Standardizer {
            mean: Tensor::new(&[c], mean)?,
            scale: Tensor::new(&[c], scale)?,
        })
    }

    /// The do-nothing transform.
    pub fn identity(channels: usize) -> Self {
        Standardizer {
            mean: Tensor::zeros(&[channels]),
            scale: Tensor::filled(&[channels], 1.0),
        }
    }

    pub fn from_tensors(mean: Tensor, scale: Tensor) -> Result<Self> {
        if mean.rank() != 1 || mean.shape() != scale.shape() {
            return Err(Error::shape(format!(
                "standardizer wants matching vectors, got {:?} and {:?}",
                mean.shape(),
                scale.shape()
            )));
        }
        if scale.data().iter().any(|&s| !(s > 0.0) || !s.is_finite()) {
            return Err(Error::invalid("standardizer scales must be positive"));
        }
        Ok(Standardizer { mean, scale })
    }

    pub fn channels(&self) -> usize {
        self.mean.len()
    }

    pub fn mean(&self) -> &Tensor {
        &self.mean
    }

    pub fn scale(&self) -> &Tensor {
        &self.scale
    }

    pub fn apply(&self, x: &Tensor) -> Result<Tensor> {
        self.map_rows(x, |v, m, s| (v - m) / s)
    }

    pub fn invert(&self, x: &Tensor) -> Result<Tensor> {
        self.map_rows(x, |v, m, s| v * s + m)
    }

    fn map_rows(&self, x: &Tensor, f: impl Fn(f64, f64, f64) -> f64) -> Result<Tensor> {
        let c = x.last_dim()?;
        if c != self.channels() {
            return Err(Error::shape(format!(
                "standardizer over {} channels got rows of {c}",
                self.channels()
            )));
        }
        let mut out = x.clone();
        for (i, v) in out.data_mut().iter_mut().enumerate() {
            let j = i % c;
            *v = f(*v, self.mean.data()[j], self.scale.data()[j]);
        }
        Ok(out)
    }
}

// ---------------------------------------------------------------------------
// Network constructors. Seeds are the caller's; widths come from config.

/// Per-frame 3-layer encoder, motion dim → compressed dim.
pub fn build_encoder(cfg: &Config, seed: u64) -> Result<NetworkModel> {
    NetBuilder::new("enc", cfg.motion_dim)
        .affine(cfg.widths.ae)
        .tanh()
        .affine(cfg.widths.ae)
        .tanh()
        .affine(cfg.compressed_dim)
        .build(seed)
}

/// Per-frame 3-layer decoder, compressed dim → motion dim.
pub fn build_decoder(cfg: &Config, seed: u64) -> Result<NetworkModel> {
    NetBuilder::new("dec", cfg.compressed_dim)
        .affine(cfg.widths.ae)
        .tanh()
        .affine(cfg.widths.ae)
        .tanh()
        .affine(cfg.motion_dim)
        .build(seed)
}

/// Dilated temporal conv stack for the flow field. The receptive field
/// (±15 frames) spans a full training window so the net can separate the
/// smooth signal component of the path state from white noise.
pub fn build_flow_net(channels: usize, width: usize, seed: u64) -> Result<NetworkModel> {
    NetBuilder::new("flow", flow_input_dim(channels))
        .conv1d(width, 3, 1, PadMode::Replicate)
        .leaky_relu(0.1)
        .conv1d(width, 3, 2, PadMode::Replicate)
        .leaky_relu(0.1)
        .conv1d(width, 3, 4, PadMode::Replicate)
        .leaky_relu(0.1)
        .conv1d(width, 3, 8, PadMode::Replicate)
        .leaky_relu(0.1)
        .affine(channels)
        .build(seed)
}

/// Projects mapper output (motion-space lip features) into code space.
pub fn build_lip_proj(motion_dim: usize, channels: usize, seed: u64) -> Result<NetworkModel> {
    NetBuilder::new("lip", motion_dim).affine(channels).build(seed)
}

/// 5-layer magnitude extractor, visual features → code coefficients.
pub fn build_extractor(cfg: &Config, seed: u64) -> Result<NetworkModel> {
    let w = cfg.widths.extractor;
    NetBuilder::new("extractor", cfg.motion_dim)
        .affine(w)
        .tanh()
        .affine(w)
        .tanh()
        .affine(w)
        .tanh()
        .affine(w)
        .tanh()
        .affine(cfg.bank_codes)
        .build(seed)
}

/// Fixed content-conditioning stage shared by training and sampling: the
/// token embedding table and the (untrained, seeded) multi-receptive-field
/// mapper. Derived from the dataset seed so every training seed sees the
/// same conditioning.
#[derive(Debug, Clone)]
pub struct Conditioning {
    pub table: Tensor,
    pub mapper: MrfMapper,
}

pub fn build_conditioning(data_seed: u64, cfg: &Config) -> Result<Conditioning> {
    let table = token_embedding_table(cfg.scene.embed_dim, sub_seed(data_seed, "tokens"));
    let mapper = MrfMapper::new(
        cfg.mrf.clone(),
        mapper_input_dim(cfg.scene.embed_dim),
        cfg.motion_dim,
        sub_seed(data_seed, "mapper"),
    )?;
    Ok(Conditioning { table, mapper })
}

fn scene_lip(scene: &SyntheticScene, cond: &Conditioning) -> Result<Tensor> {
    let cf = scene.content_features(&cond.table)?;
    mrf_forward(&cond.mapper, &cf.mapper_input()?)
}

// ---------------------------------------------------------------------------
// Autoencoder stage.

/// Trained autoencoder plus the motion standardizer it was fitted with and
/// the per-epoch loss curve.
#[derive(Debug, Clone)]
pub struct AeArtifacts {
    pub encoder: NetworkModel,
    pub decoder: NetworkModel,
    pub norm: Standardizer,
    pub curve: Vec<f64>,
}

impl AeArtifacts {
    pub fn to_checkpoint(&self) -> Result<Checkpoint> {
        let mut ck = Checkpoint::new();
        ck.add_model(&self.encoder)?;
        ck.add_model(&self.decoder)?;
        ck.insert("norm.mean", self.norm.mean().clone())?;
        ck.insert("norm.scale", self.norm.scale().clone())?;
        Ok(ck)
    }

    /// Rebuilds the architecture from config and loads parameters. The loss
    /// curve is not persisted.
    pub fn from_checkpoint(ck: &Checkpoint, cfg: &Config) -> Result<Self> {
        let mut encoder = build_encoder(cfg, 0)?;
        let mut decoder = build_decoder(cfg, 0)?;
        ck.apply_to(&mut encoder)?;
        ck.apply_to(&mut decoder)?;
        let norm = Standardizer::from_tensors(
            ck.require("norm.mean")?.clone(),
            ck.require("norm.scale")?.clone(),
        )?;
        Ok(AeArtifacts { encoder, decoder, norm, curve: Vec::new() })
    }

    /// encode → decode in standardized space, returning motion-space frames.
    pub fn reconstruct(&self, motion: &Tensor) -> Result<Tensor> {
        let z = self.encode_codes(motion)?;
        let cm = CompressedMotion::new(z, self.decoder.output_dim())?;
        let recon = normaliser::decode(&cm, &self.decoder)?;
        self.norm.invert(&recon)
    }

    /// Raw (unstandardized-code) encoding of motion-space frames.
    pub fn encode_codes(&self, motion: &Tensor) -> Result<Tensor> {
        let x = self.norm.apply(motion)?;
        Ok(normaliser::encode(&x, &self.encoder)?.into_tensor())
    }
}

fn pooled_motion_frames(dataset: &Dataset) -> Result<Tensor> {
    let scenes: Vec<&SyntheticScene> = dataset.train_scenes().collect();
    if scenes.is_empty() {
        return Err(Error::invalid("dataset has no training scenes"));
    }
    let d = scenes[0].dim();
    let rows: usize = scenes.iter().map(|s| s.frames()).sum();
    let mut data = Vec::with_capacity(rows * d);
    for s in &scenes {
        data.extend_from_slice(s.motion_seq.data());
    }
    Tensor::new(&[rows, d], data)
}

/// Trains encoder/decoder on pooled standardized motion frames with MSE,
/// weighted by `lambda_ae`. Epoch order and batch membership are seeded.
pub fn train_ae(dataset: &Dataset, cfg: &Config) -> Result<AeArtifacts> {
    cfg.validate()?;
    let frames = pooled_motion_frames(dataset)?;
    let norm = Standardizer::fit(&frames)?;
    let std_frames = norm.apply(&frames)?;

    let mut encoder = build_encoder(cfg, sub_seed(cfg.train.seed, "enc"))?;
    let mut decoder = build_decoder(cfg, sub_seed(cfg.train.seed, "dec"))?;
    let mut opt = Adam::new(cfg.train.lr)?;
    let mut rng = ChaCha8Rng::seed_from_u64(sub_seed(cfg.train.seed, "ae-loop"));

    let d = cfg.motion_dim;
    let n_rows = std_frames.shape()[0];
    // The autoencoder is per-frame, so the batch size counts frames here.
    let batch_rows = cfg.train.batch.min(n_rows).max(1);
    let mut order: Vec<usize> = (0..n_rows).collect();
    let mut curve = Vec::with_capacity(cfg.train.ae_epochs);

    for epoch in 0..cfg.train.ae_epochs {
        order.shuffle(&mut rng);
        let mut epoch_loss = 0.0;
        let mut batches = 0usize;
        for (bi, chunk) in order.chunks(batch_rows).enumerate() {
            let mut data = Vec::with_capacity(chunk.len() * d);
            for &r in chunk {
                data.extend_from_slice(std_frames.row(r));
            }
            let batch = Tensor::new(&[chunk.len(), d], data)?;

            let mut tape = Tape::new();
            let x = tape.input(batch.clone());
            let target = tape.input(batch);
            let h = encoder.forward_traced(&mut tape, x)?;
            let recon = decoder.forward_traced(&mut tape, h)?;
            let mse = ae_loss_traced(&mut tape, recon, target)?;
            let loss = tape.scale(mse, cfg.train.lambda_ae);

            let value = tape.value(loss).item()?;
            if !value.is_finite() {
                return Err(Error::Divergence(format!(
                    "autoencoder loss became {value} at epoch {epoch}, batch {bi}"
                )));
            }
            epoch_loss += value;
            batches += 1;

            tape.backward(loss)?;
            let ge = encoder.param_grads(&tape)?;
            let gd = decoder.param_grads(&tape)?;
            opt.begin_step();
            opt.apply(&mut encoder, &ge)?;
            opt.apply(&mut decoder, &gd)?;
        }
        curve.push(epoch_loss / batches.max(1) as f64);
    }

    Ok(AeArtifacts { encoder, decoder, norm, curve })
}

/// Reconstruction RMSE over pooled held-out frames, in standardized space.
pub fn held_out_recon_rmse(dataset: &Dataset, ae: &AeArtifacts) -> Result<f64> {
    let mut sq = 0.0;
    let mut n = 0usize;
    for scene in dataset.held_out_scenes() {
        let x = ae.norm.apply(&scene.motion_seq)?;
        let z = normaliser::encode(&x, &ae.encoder)?;
        let recon = normaliser::decode(&z, &ae.decoder)?;
        let diff = recon.sub(&x)?;
        sq += diff.sq_norm();
        n += diff.len();
    }
    if n == 0 {
        return Err(Error::invalid("dataset has no held-out scenes"));
    }
    Ok((sq / n as f64).sqrt())
}

// ---------------------------------------------------------------------------
// Sampler stage: flow + prior + lip projection trained jointly.

/// One logged optimization step: the weighted total and its two components.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossRecord {
    pub total: f64,
    pub cfm: f64,
    pub prior_nll: f64,
}

#[derive(Debug, Clone)]
pub struct SamplerArtifacts {
    pub flow: NetworkModel,
    pub prior: NetworkModel,
    pub lip_proj: NetworkModel,
    pub code_norm: Standardizer,
    pub mode: TrainMode,
    pub channels: usize,
    pub curve: Vec<LossRecord>,
}

impl SamplerArtifacts {
    pub fn to_checkpoint(&self) -> Result<Checkpoint> {
        let mut ck = Checkpoint::new();
        ck.add_model(&self.flow)?;
        ck.add_model(&self.prior)?;
        ck.add_model(&self.lip_proj)?;
        ck.insert("codes.mean", self.code_norm.mean().clone())?;
        ck.insert("codes.scale", self.code_norm.scale().clone())?;
        let mode_flag = match self.mode {
            TrainMode::Normalised => 0.0,
            TrainMode::DirectRegression => 1.0,
        };
        ck.insert("mode", Tensor::scalar(mode_flag))?;
        Ok(ck)
    }

    pub fn from_checkpoint(ck: &Checkpoint, cfg: &Config) -> Result<Self> {
        let mode = match ck.require("mode")?.item()? {
            f if f == 0.0 => TrainMode::Normalised,
            f if f == 1.0 => TrainMode::DirectRegression,
            f => return Err(Error::Format(format!("unknown mode flag {f}"))),
        };
        let channels = sampler_channels(cfg, mode);
        let mut flow = build_flow_net(channels, cfg.widths.flow, 0)?;
        let mut prior = build_prior_net(channels, cfg.widths.prior, 0)?;
        let mut lip_proj = build_lip_proj(cfg.motion_dim, channels, 0)?;
        ck.apply_to(&mut flow)?;
        ck.apply_to(&mut prior)?;
        ck.apply_to(&mut lip_proj)?;
        let code_norm = Standardizer::from_tensors(
            ck.require("codes.mean")?.clone(),
            ck.require("codes.scale")?.clone(),
        )?;
        Ok(SamplerArtifacts { flow, prior, lip_proj, code_norm, mode, channels, curve: Vec::new() })
    }
}

fn sampler_channels(cfg: &Config, mode: TrainMode) -> usize {
    match mode {
        TrainMode::Normalised => cfg.compressed_dim,
        TrainMode::DirectRegression => cfg.motion_dim,
    }
}

/// Flow target for one scene before standardization: compressed codes in
/// normalised mode, raw motion frames in direct mode.
fn raw_targets(
    scene: &SyntheticScene,
    ae: Option<&AeArtifacts>,
    mode: TrainMode,
) -> Result<Tensor> {
    match mode {
        TrainMode::Normalised => {
            let ae = ae.ok_or_else(|| {
                Error::invalid("normalised mode needs a trained autoencoder")
            })?;
            ae.encode_codes(&scene.motion_seq)
        }
        TrainMode::DirectRegression => Ok(scene.motion_seq.clone()),
    }
}

/// A scene's flow-target sequence in standardized code space.
pub fn scene_codes(
    scene: &SyntheticScene,
    ae: Option<&AeArtifacts>,
    s: &SamplerArtifacts,
) -> Result<Tensor> {
    s.code_norm.apply(&raw_targets(scene, ae, s.mode)?)
}

struct SceneCache {
    codes: Vec<Tensor>, // standardized targets, [T, c] per scene
    lip: Vec<Tensor>,   // mapper output, [T, d] per scene
}

fn build_scene_cache(
    scenes: &[&SyntheticScene],
    ae: Option<&AeArtifacts>,
    mode: TrainMode,
    norm: &Standardizer,
    cond: &Conditioning,
) -> Result<SceneCache> {
    let mut codes = Vec::with_capacity(scenes.len());
    let mut lip = Vec::with_capacity(scenes.len());
    for s in scenes {
        codes.push(norm.apply(&raw_targets(s, ae, mode)?)?);
        lip.push(scene_lip(s, cond)?);
    }
    Ok(SceneCache { codes, lip })
}

/// Gathers `window` consecutive rows starting at `start` from each listed
/// scene tensor into one [B, window, channels] batch.
fn stack_windows(
    tensors: &[Tensor],
    picks: &[(usize, usize)],
    window: usize,
) -> Result<Tensor> {
    let c = tensors[picks[0].0].last_dim()?;
    let mut data = Vec::with_capacity(picks.len() * window * c);
    for &(idx, start) in picks {
        let t = &tensors[idx];
        data.extend_from_slice(&t.data()[start * c..(start + window) * c]);
    }
    Tensor::new(&[picks.len(), window, c], data)
}

/// First-frame code rows broadcast over the window: [B, window, c].
fn stack_first_rows(tensors: &[Tensor], picks: &[(usize, usize)], window: usize) -> Result<Tensor> {
    let c = tensors[picks[0].0].last_dim()?;
    let mut data = Vec::with_capacity(picks.len() * window * c);
    for &(idx, _) in picks {
        let first = &tensors[idx].data()[..c];
        for _ in 0..window {
            data.extend_from_slice(first);
        }
    }
    Tensor::new(&[picks.len(), window, c], data)
}

fn gaussian_tensor<R: Rng>(shape: &[usize], rng: &mut R) -> Tensor {
    let mut t = Tensor::zeros(shape);
    for v in t.data_mut() {
        *v = rng.sample(StandardNormal);
    }
    t
}

/// Trains the flow field, prior, and lip projection jointly on
/// `lambda_cfm·L_flow + lambda_prior·L_prior`. The prior's output
/// conditions the flow net, so its parameters receive gradient through both
/// terms. In normalised mode the autoencoder is required and frozen.
pub fn train_sampler(
    dataset: &Dataset,
    ae: Option<&AeArtifacts>,
    cfg: &Config,
) -> Result<SamplerArtifacts> {
    cfg.validate()?;
    let mode = cfg.train.mode;
    if mode == TrainMode::Normalised && ae.is_none() {
        return Err(Error::invalid("normalised mode needs a trained autoencoder"));
    }
    let channels = sampler_channels(cfg, mode);
    let cond = build_conditioning(dataset.seed, cfg)?;

    let train: Vec<&SyntheticScene> = dataset.train_scenes().collect();
    if train.is_empty() {
        return Err(Error::invalid("dataset has no training scenes"));
    }
    // Standardization is fitted on pooled raw targets of the train split.
    let mut pooled = Vec::new();
    for s in &train {
        pooled.extend_from_slice(raw_targets(s, ae, mode)?.data());
    }
    let rows = pooled.len() / channels;
    let code_norm = Standardizer::fit(&Tensor::new(&[rows, channels], pooled)?)?;
    let cache = build_scene_cache(&train, ae, mode, &code_norm, &cond)?;

    let seed = cfg.train.seed;
    let mut flow = build_flow_net(channels, cfg.widths.flow, sub_seed(seed, "flow"))?;
    let mut prior = build_prior_net(channels, cfg.widths.prior, sub_seed(seed, "prior"))?;
    let mut lip_proj = build_lip_proj(cfg.motion_dim, channels, sub_seed(seed, "lip"))?;
    let mut opt = Adam::new(cfg.train.lr)?;
    let mut rng = ChaCha8Rng::seed_from_u64(sub_seed(seed, "sampler-loop"));

    let window = cfg.train.window;
    let frames = train[0].frames();
    let mut order: Vec<usize> = (0..train.len()).collect();
    let mut curve = Vec::new();

    for epoch in 0..cfg.train.sampler_epochs {
        order.shuffle(&mut rng);
        let mut sums = (0.0, 0.0, 0.0);
        let mut batches = 0usize;
        for (bi, chunk) in order.chunks(cfg.train.batch).enumerate() {
            let picks: Vec<(usize, usize)> = chunk
                .iter()
                .map(|&i| {
                    let start = if frames > window {
                        rng.random_range(0..=frames - window)
                    } else {
                        0
                    };
                    (i, start)
                })
                .collect();
            let b = picks.len();
            let x1 = stack_windows(&cache.codes, &picks, window)?;
            let z0 = stack_first_rows(&cache.codes, &picks, window)?;
            let lip = stack_windows(&cache.lip, &picks, window)?;
            let x0 = gaussian_tensor(&[b, window, channels], &mut rng);
            let times: Vec<f64> = (0..b).map(|_| rng.random()).collect();

            let mut tape = Tape::new();
            let lip_in = tape.input(lip);
            let lip_c = lip_proj.forward_traced(&mut tape, lip_in)?;
            let z0_in = tape.input(z0);
            let cond_in = tape.add(lip_c, z0_in)?;
            let mu = prior.forward_traced(&mut tape, cond_in)?;
            let cfm = cfm_loss_with_mu(&mut tape, &flow, &x0, &x1, &times, mu, &cfg.flow)?;
            let codes_in = tape.input(x1);
            let nll = prior_nll_traced(&mut tape, codes_in, mu)?;
            let wc = tape.scale(cfm, cfg.train.lambda_cfm);
            let wp = tape.scale(nll, cfg.train.lambda_prior);
            let total = tape.add(wc, wp)?;

            let rec = LossRecord {
                total: tape.value(total).item()?,
                cfm: tape.value(cfm).item()?,
                prior_nll: tape.value(nll).item()?,
            };
            if !rec.total.is_finite() {
                return Err(Error::Divergence(format!(
                    "sampler loss became {} at epoch {epoch}, batch {bi}",
                    rec.total
                )));
            }
            sums.0 += rec.total;
            sums.1 += rec.cfm;
            sums.2 += rec.prior_nll;
            batches += 1;

            tape.backward(total)?;
            let gf = flow.param_grads(&tape)?;
            let gp = prior.param_grads(&tape)?;
            let gl = lip_proj.param_grads(&tape)?;
            opt.begin_step();
            opt.apply(&mut flow, &gf)?;
            opt.apply(&mut prior, &gp)?;
            opt.apply(&mut lip_proj, &gl)?;
        }
        let n = batches.max(1) as f64;
        curve.push(LossRecord {
            total: sums.0 / n,
            cfm: sums.1 / n,
            prior_nll: sums.2 / n,
        });
    }

    Ok(SamplerArtifacts { flow, prior, lip_proj, code_norm, mode, channels, curve })
}

// ---------------------------------------------------------------------------
// Sampling and evaluation.

/// Prior mean sequence for a scene: lip features projected to code space
/// plus the scene's own first-frame codes, through the prior net.
pub fn conditioning_mu(
    scene: &SyntheticScene,
    cond: &Conditioning,
    ae: Option<&AeArtifacts>,
    s: &SamplerArtifacts,
) -> Result<Tensor> {
    let z = scene_codes(scene, ae, s)?;
    let lip = scene_lip(scene, cond)?;
    let lip_c = s.lip_proj.forward(&lip)?;
    let c = z.last_dim()?;
    let first = Tensor::new(&[c], z.data()[..c].to_vec())?;
    let input = crate::prior::PriorInput::new(first, lip_c)?;
    crate::prior::prior_forward(&s.prior, &input)
}

/// Draws one sequence in standardized code space.
pub fn sample_codes<R: Rng>(
    scene: &SyntheticScene,
    cond: &Conditioning,
    ae: Option<&AeArtifacts>,
    s: &SamplerArtifacts,
    flow_cfg: &FlowConfig,
    rng: &mut R,
) -> Result<Tensor> {
    let mu = conditioning_mu(scene, cond, ae, s)?;
    cfm::sample(&s.flow, &mu, flow_cfg, rng)
}

/// Like `sample_codes`, but integrates from the field's own source
/// distribution (pure noise) instead of offsetting the start by the prior
/// mean. Endpoints drawn this way estimate the distribution the flow was
/// trained to produce, so they are the honest input for moment comparisons.
pub fn transport_codes<R: Rng>(
    scene: &SyntheticScene,
    cond: &Conditioning,
    ae: Option<&AeArtifacts>,
    s: &SamplerArtifacts,
    flow_cfg: &FlowConfig,
    rng: &mut R,
) -> Result<Tensor> {
    let mu = conditioning_mu(scene, cond, ae, s)?;
    cfm::transport(&s.flow, &mu, flow_cfg, rng)
}

/// Maps standardized codes back to motion space: inverse code norm, then
/// (in normalised mode) decoder and inverse motion norm.
pub fn codes_to_motion(
    z: &Tensor,
    ae: Option<&AeArtifacts>,
    s: &SamplerArtifacts,
) -> Result<Tensor> {
    let codes = s.code_norm.invert(z)?;
    match s.mode {
        TrainMode::Normalised => {
            let ae = ae.ok_or_else(|| {
                Error::invalid("normalised mode needs a trained autoencoder")
            })?;
            let cm = CompressedMotion::new(codes, ae.decoder.output_dim())?;
            let recon = normaliser::decode(&cm, &ae.decoder)?;
            ae.norm.invert(&recon)
        }
        TrainMode::DirectRegression => Ok(codes),
    }
}

/// Full sampling pipeline for one scene: conditioning → flow → motion space.
pub fn sample_motion<R: Rng>(
    scene: &SyntheticScene,
    cond: &Conditioning,
    ae: Option<&AeArtifacts>,
    s: &SamplerArtifacts,
    flow_cfg: &FlowConfig,
    rng: &mut R,
) -> Result<Tensor> {
    let z = sample_codes(scene, cond, ae, s, flow_cfg, rng)?;
    codes_to_motion(&z, ae, s)
}

/// Flow-matching loss on a fixed held-out evaluation batch: every held-out
/// scene crossed with stratified path times, noise seeded from the dataset
/// seed so trained and untrained nets see identical batches.
pub fn held_out_flow_loss(
    dataset: &Dataset,
    cfg: &Config,
    ae: Option<&AeArtifacts>,
    s: &SamplerArtifacts,
) -> Result<f64> {
    let cond = build_conditioning(dataset.seed, cfg)?;
    let held: Vec<&SyntheticScene> = dataset.held_out_scenes().collect();
    if held.is_empty() {
        return Err(Error::invalid("dataset has no held-out scenes"));
    }
    let window = cfg.train.window.min(held[0].frames());
    let strata = 8usize;
    let mut rng = ChaCha8Rng::seed_from_u64(sub_seed(dataset.seed, "flow-eval"));

    let mut x1_data = Vec::new();
    let mut mu_data = Vec::new();
    let mut times = Vec::new();
    let c = s.channels;
    for (si, scene) in held.iter().enumerate() {
        let z = scene_codes(scene, ae, s)?;
        let mu = conditioning_mu(scene, &cond, ae, s)?;
        for k in 0..strata {
            x1_data.extend_from_slice(&z.data()[..window * c]);
            mu_data.extend_from_slice(&mu.data()[..window * c]);
            let u: f64 = rng.random();
            let _ = si;
            times.push((k as f64 + u) / strata as f64);
        }
    }
    let b = held.len() * strata;
    let x1 = Tensor::new(&[b, window, c], x1_data)?;
    let mu = Tensor::new(&[b, window, c], mu_data)?;
    let x0 = gaussian_tensor(&[b, window, c], &mut rng);

    let mut tape = Tape::new();
    let mu_in = tape.input(mu);
    let loss = cfm_loss_with_mu(&mut tape, &s.flow, &x0, &x1, &times, mu_in, &cfg.flow)?;
    tape.value(loss).item()
}

/// Standardized code rows of whole scenes pooled into one [N·T, c] table.
pub fn pooled_codes<'a>(
    scenes: impl Iterator<Item = &'a SyntheticScene>,
    ae: Option<&AeArtifacts>,
    s: &SamplerArtifacts,
) -> Result<Tensor> {
    let mut data = Vec::new();
    let mut rows = 0usize;
    for scene in scenes {
        let z = scene_codes(scene, ae, s)?;
        rows += z.shape()[0];
        data.extend_from_slice(z.data());
    }
    if rows == 0 {
        return Err(Error::invalid("no scenes to pool"));
    }
    let c = data.len() / rows;
    Tensor::new(&[rows, c], data)
}

fn row_moments(rows: &Tensor) -> Result<(Vec<f64>, Vec<f64>)> {
    let c = rows.last_dim()?;
    let n = rows.leading_count()?;
    if n < 2 {
        return Err(Error::invalid("moment estimate needs at least 2 rows"));
    }
    let mut mean = vec![0.0; c];
    for r in 0..n {
        for j in 0..c {
            mean[j] += rows.data()[r * c + j];
        }
    }
    for m in &mut mean {
        *m /= n as f64;
    }
    let mut cov = vec![0.0; c * c];
    for r in 0..n {
        let row = &rows.data()[r * c..(r + 1) * c];
        for i in 0..c {
            let di = row[i] - mean[i];
            for j in 0..c {
                cov[i * c + j] += di * (row[j] - mean[j]);
            }
        }
    }
    for v in &mut cov {
        *v /= n as f64;
    }
    Ok((mean, cov))
}

/// Combined relative moment discrepancy between two row sets: Euclidean
/// distance of (mean, cov) pairs over the reference's (mean, cov) norm.
pub fn moment_error(samples: &Tensor, reference: &Tensor) -> Result<f64> {
    if samples.last_dim()? != reference.last_dim()? {
        return Err(Error::shape("moment comparison needs equal channel counts"));
    }
    let (ms, cs) = row_moments(samples)?;
    let (mr, cr) = row_moments(reference)?;
    let mut num = 0.0;
    let mut den = 0.0;
    for (a, b) in ms.iter().zip(&mr) {
        num += (a - b) * (a - b);
        den += b * b;
    }
    for (a, b) in cs.iter().zip(&cr) {
        num += (a - b) * (a - b);
        den += b * b;
    }
    if den == 0.0 {
        return Err(Error::invalid("reference moments are all zero"));
    }
    Ok((num / den).sqrt())
}

// ---------------------------------------------------------------------------
// Ablation harness.

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AblationRow {
    pub seed: u64,
    pub mode: TrainMode,
    pub mean_jerk: f64,
    pub div_std: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct AblationReport {
    pub rows: Vec<AblationRow>,
}

impl AblationReport {
    /// Seeds where the normalised mode produced lower mean jerk, out of all
    /// seeds. Rows come in (normalised, direct) pairs per seed.
    pub fn normalised_wins(&self) -> (usize, usize) {
        let mut wins = 0;
        let mut total = 0;
        for pair in self.rows.chunks(2) {
            if let [a, b] = pair {
                total += 1;
                if a.mean_jerk < b.mean_jerk {
                    wins += 1;
                }
            }
        }
        (wins, total)
    }

    pub fn to_csv(&self) -> String {
        use std::fmt::Write as _;
        let mut out = String::from("seed,mode,mean_jerk,div_std\n");
        for r in &self.rows {
            let mode = match r.mode {
                TrainMode::Normalised => "normalised",
                TrainMode::DirectRegression => "direct_regression",
            };
            let _ = writeln!(out, "{},{},{},{}", r.seed, mode, r.mean_jerk, r.div_std);
        }
        out
    }
}

const ABLATION_SAMPLES: usize = 16;

/// Trains both target modes per seed on the same dataset and scores 16
/// sampled sequences each by mean jerk and pooled diversity, in motion
/// space. Deterministic per (dataset, config, seed).
pub fn run_ablation(dataset: &Dataset, cfg: &Config, seeds: &[u64]) -> Result<AblationReport> {
    if seeds.len() < 5 {
        return Err(Error::invalid(format!(
            "ablation needs at least 5 seeds, got {}",
            seeds.len()
        )));
    }
    let cond = build_conditioning(dataset.seed, cfg)?;
    let held: Vec<&SyntheticScene> = dataset.held_out_scenes().collect();
    if held.is_empty() {
        return Err(Error::invalid("dataset has no held-out scenes"));
    }
    let mut rows = Vec::with_capacity(seeds.len() * 2);
    for &seed in seeds {
        let mut run_cfg = cfg.clone();
        run_cfg.train.seed = seed;
        let ae = train_ae(dataset, &run_cfg)?;
        for mode in [TrainMode::Normalised, TrainMode::DirectRegression] {
            let mut mode_cfg = run_cfg.clone();
            mode_cfg.train.mode = mode;
            let ae_opt = match mode {
                TrainMode::Normalised => Some(&ae),
                TrainMode::DirectRegression => None,
            };
            let s = train_sampler(dataset, ae_opt, &mode_cfg)?;
            let tag = match mode {
                TrainMode::Normalised => "ablate-normalised",
                TrainMode::DirectRegression => "ablate-direct",
            };
            let mut rng = ChaCha8Rng::seed_from_u64(sub_seed(seed, tag));
            let mut jerk_sum = 0.0;
            let mut pooled = Vec::new();
            let frames = held[0].frames();
            let dim = held[0].dim();
            for i in 0..ABLATION_SAMPLES {
                let scene = held[i % held.len()];
                let motion = sample_motion(scene, &cond, ae_opt, &s, &cfg.flow, &mut rng)?;
                jerk_sum += crate::metrics::jerk(&motion)?;
                pooled.extend_from_slice(motion.data());
            }
            let samples = Tensor::new(&[ABLATION_SAMPLES, frames, dim], pooled)?;
            rows.push(AblationRow {
                seed,
                mode,
                mean_jerk: jerk_sum / ABLATION_SAMPLES as f64,
                div_std: crate::metrics::div_std(&samples)?,
            });
        }
    }
    Ok(AblationReport { rows })
}

// ---------------------------------------------------------------------------
// Identity-magnitude extractor.

/// Trains the 5-layer extractor to regress the oracle projection
/// coefficients of pooled training visual features.
pub fn train_extractor(
    dataset: &Dataset,
    cfg: &Config,
    epochs: usize,
    lr: f64,
) -> Result<NetworkModel> {
    train_extractor_on(&dataset.bank, dataset.train_scenes(), cfg, epochs, lr)
}

/// Extractor training against an explicit bank and scene set.
pub fn train_extractor_on<'a>(
    bank: &CodeBank,
    scenes: impl Iterator<Item = &'a SyntheticScene>,
    cfg: &Config,
    epochs: usize,
    lr: f64,
) -> Result<NetworkModel> {
    let mut feats = Vec::new();
    let mut rows = 0usize;
    let mut d = 0usize;
    for scene in scenes {
        let v = scene.visual_features()?;
        d = v.last_dim()?;
        rows += v.shape()[0];
        feats.extend_from_slice(v.data());
    }
    if rows == 0 {
        return Err(Error::invalid("no scenes to train the extractor on"));
    }
    let feats = Tensor::new(&[rows, d], feats)?;
    let targets = bank.coeffs(&feats)?;

    let mut net = build_extractor(cfg, sub_seed(cfg.train.seed, "extractor"))?;
    let mut opt = Adam::new(lr)?;
    let mut rng = ChaCha8Rng::seed_from_u64(sub_seed(cfg.train.seed, "extractor-loop"));
    let batch = 256.min(rows);
    let m = bank.codes();
    let mut order: Vec<usize> = (0..rows).collect();

    for epoch in 0..epochs {
        order.shuffle(&mut rng);
        for (bi, chunk) in order.chunks(batch).enumerate() {
            let mut xd = Vec::with_capacity(chunk.len() * d);
            let mut td = Vec::with_capacity(chunk.len() * m);
            for &r in chunk {
                xd.extend_from_slice(feats.row(r));
                td.extend_from_slice(targets.row(r));
            }
            let x = Tensor::new(&[chunk.len(), d], xd)?;
            let t = Tensor::new(&[chunk.len(), m], td)?;

            let mut tape = Tape::new();
            let xin = tape.input(x);
            let tin = tape.input(t);
            let pred = net.forward_traced(&mut tape, xin)?;
            let diff = tape.sub(pred, tin)?;
            let loss = tape.mean_sq(diff);
            let v = tape.value(loss).item()?;
            if !v.is_finite() {
                return Err(Error::Divergence(format!(
                    "extractor loss became {v} at epoch {epoch}, batch {bi}"
                )));
            }
            tape.backward(loss)?;
            let g = net.param_grads(&tape)?;
            opt.begin_step();
            opt.apply(&mut net, &g)?;
        }
    }
    Ok(net)
}

/// Centered moving average with the given window (window ≥ 1, clamped at
/// the edges); used to read convergence off noisy loss curves.
pub fn smoothed(xs: &[f64], window: usize) -> Vec<f64> {
    let w = window.max(1);
    let half = w / 2;
    (0..xs.len())
        .map(|i| {
            let lo = i.saturating_sub(half);
            let hi = (i + half + 1).min(xs.len());
            xs[lo..hi].iter().sum::<f64>() / (hi - lo) as f64
        })
        .collect()
}
