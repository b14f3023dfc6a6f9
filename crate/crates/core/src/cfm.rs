//! Optimal-transport conditional flow matching over latent motion sequences.
//!
//! Training draws a time `t` and noise `x0` per sequence, moves the data
//! point `x1` along the straight conditional path, and regresses the model
//! onto the path's (constant) velocity. Inference starts at the prior mean
//! plus scaled noise and integrates the learned field with forward Euler.
//! The model sees `(current state, time, prior mean)` concatenated per frame.

use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::graph::{Tape, Var};
use crate::net::NetworkModel;
use crate::tensor::Tensor;

/// Sampler/loss hyperparameters.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FlowConfig {
    /// Residual scale left on the data endpoint of the path; in `(0, 1e-2]`.
    pub sigma_min: f64,
    /// Forward-Euler step count, at least 1.
    pub euler_steps: usize,
    /// Scale of the initial noise around the prior mean, nonnegative.
    pub temperature: f64,
}

impl FlowConfig {
    pub fn new(sigma_min: f64, euler_steps: usize, temperature: f64) -> Result<Self> {
        let cfg = FlowConfig { sigma_min, euler_steps, temperature };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.sigma_min > 0.0 && self.sigma_min <= 1e-2) {
            return Err(Error::invalid(format!(
                "sigma_min must lie in (0, 1e-2], got {}",
                self.sigma_min
            )));
        }
        if self.euler_steps == 0 {
            return Err(Error::invalid("euler_steps must be at least 1"));
        }
        if !(self.temperature >= 0.0 && self.temperature.is_finite()) {
            return Err(Error::invalid(format!(
                "temperature must be a finite nonnegative real, got {}",
                self.temperature
            )));
        }
        Ok(())
    }
}

impl Default for FlowConfig {
    fn default() -> Self {
        FlowConfig { sigma_min: 1e-4, euler_steps: 10, temperature: 1.0 }
    }
}

/// One training batch: noise draws, data targets, per-sequence times, and
/// prior means, all over `B` sequences of `T` frames with `c` channels.
#[derive(Debug, Clone)]
pub struct FlowBatch {
    x0: Tensor,  // [B, T, c]
    x1: Tensor,  // [B, T, c]
    t: Vec<f64>, // [B], each in [0, 1]
    mu: Tensor,  // [B, T, c]
}

impl FlowBatch {
    pub fn new(x0: Tensor, x1: Tensor, t: Vec<f64>, mu: Tensor) -> Result<Self> {
        if x0.rank() != 3 {
            return Err(Error::shape(format!(
                "flow batch tensors must be [batch, frames, channels], got {:?}",
                x0.shape()
            )));
        }
        if x0.shape() != x1.shape() || x0.shape() != mu.shape() {
            return Err(Error::shape(format!(
                "flow batch shapes disagree: x0 {:?}, x1 {:?}, mu {:?}",
                x0.shape(),
                x1.shape(),
                mu.shape()
            )));
        }
        if t.len() != x0.shape()[0] {
            return Err(Error::shape(format!(
                "flow batch has {} sequences but {} times",
                x0.shape()[0],
                t.len()
            )));
        }
        if let Some(bad) = t.iter().find(|v| !(0.0..=1.0).contains(*v)) {
            return Err(Error::invalid(format!(
                "flow time {bad} outside [0, 1]"
            )));
        }
        Ok(FlowBatch { x0, x1, t, mu })
    }

    pub fn batch_size(&self) -> usize {
        self.x0.shape()[0]
    }

    pub fn frames(&self) -> usize {
        self.x0.shape()[1]
    }

    pub fn channels(&self) -> usize {
        self.x0.shape()[2]
    }

    pub fn x0(&self) -> &Tensor {
        &self.x0
    }

    pub fn x1(&self) -> &Tensor {
        &self.x1
    }

    pub fn times(&self) -> &[f64] {
        &self.t
    }

    pub fn mu(&self) -> &Tensor {
        &self.mu
    }
}

/// Position at time `t` on the straight conditional path from `x0` to `x1`:
/// `(1 − (1 − σ_min)·t)·x0 + t·x1`.
pub fn ot_path(x0: &Tensor, x1: &Tensor, t: f64, sigma_min: f64) -> Result<Tensor> {
    if x0.shape() != x1.shape() {
        return Err(Error::shape(format!(
            "path endpoints have shapes {:?} and {:?}",
            x0.shape(),
            x1.shape()
        )));
    }
    if !(0.0..=1.0).contains(&t) {
        return Err(Error::invalid(format!("path time {t} outside [0, 1]")));
    }
    let a = 1.0 - (1.0 - sigma_min) * t;
    Ok(Tensor::new(
        x0.shape(),
        x0.data()
            .iter()
            .zip(x1.data())
            .map(|(&a0, &a1)| a * a0 + t * a1)
            .collect(),
    )?)
}

/// Velocity of the straight conditional path: `x1 − (1 − σ_min)·x0`.
/// Constant in `t`.
pub fn target_field(x0: &Tensor, x1: &Tensor, sigma_min: f64) -> Result<Tensor> {
    if x0.shape() != x1.shape() {
        return Err(Error::shape(format!(
            "field endpoints have shapes {:?} and {:?}",
            x0.shape(),
            x1.shape()
        )));
    }
    let a = 1.0 - sigma_min;
    Ok(Tensor::new(
        x0.shape(),
        x0.data()
            .iter()
            .zip(x1.data())
            .map(|(&a0, &a1)| a1 - a * a0)
            .collect(),
    )?)
}

/// Number of input channels the flow model must accept for `c` data
/// channels: current state, one time channel, prior mean.
pub fn flow_input_dim(channels: usize) -> usize {
    2 * channels + 1
}

fn check_model_dims(model: &NetworkModel, channels: usize) -> Result<()> {
    if model.input_dim() != flow_input_dim(channels) {
        return Err(Error::shape(format!(
            "flow model '{}' takes {} input channels; {} data channels need {}",
            model.name(),
            model.input_dim(),
            channels,
            flow_input_dim(channels)
        )));
    }
    if model.output_dim() != channels {
        return Err(Error::shape(format!(
            "flow model '{}' yields {} channels, data has {}",
            model.name(),
            model.output_dim(),
            channels
        )));
    }
    Ok(())
}

/// Packs `(x, t, mu)` rows into the model input layout. `x` and `mu` are
/// `[T, c]`; `t` is one shared time value.
fn pack_input(x: &Tensor, t: f64, mu: &Tensor) -> Tensor {
    let (frames, c) = (x.shape()[0], x.shape()[1]);
    let width = flow_input_dim(c);
    let mut data = vec![0.0; frames * width];
    for j in 0..frames {
        let row = &mut data[j * width..(j + 1) * width];
        row[..c].copy_from_slice(x.row(j));
        row[c] = t;
        row[c + 1..].copy_from_slice(mu.row(j));
    }
    Tensor::new(&[frames, width], data).expect("packed input shape")
}

/// Flow-matching loss where the conditioning mean is a live tape variable,
/// so gradients reach whatever network produced it. `x0`/`x1` are `[B, T, c]`
/// constants, `times` has one entry per sequence, and `mu`'s value must match
/// the data shape.
pub fn cfm_loss_with_mu(
    tape: &mut Tape,
    model: &NetworkModel,
    x0: &Tensor,
    x1: &Tensor,
    times: &[f64],
    mu: Var,
    cfg: &FlowConfig,
) -> Result<Var> {
    cfg.validate()?;
    if x0.rank() != 3 || x0.shape() != x1.shape() {
        return Err(Error::shape(format!(
            "flow loss endpoints must be equal [batch, frames, channels], got {:?} and {:?}",
            x0.shape(),
            x1.shape()
        )));
    }
    let (b, frames, c) = (x0.shape()[0], x0.shape()[1], x0.shape()[2]);
    if times.len() != b {
        return Err(Error::shape(format!(
            "flow loss has {b} sequences but {} times",
            times.len()
        )));
    }
    if let Some(bad) = times.iter().find(|v| !(0.0..=1.0).contains(*v)) {
        return Err(Error::invalid(format!("flow time {bad} outside [0, 1]")));
    }
    if tape.value(mu).shape() != x0.shape() {
        return Err(Error::shape(format!(
            "conditioning mean has shape {:?}, data is {:?}",
            tape.value(mu).shape(),
            x0.shape()
        )));
    }
    check_model_dims(model, c)?;

    // constant part of the model input: path position plus the time channel
    let mut path_t = vec![0.0; b * frames * (c + 1)];
    let mut target = vec![0.0; b * frames * c];
    for i in 0..b {
        let t = times[i];
        let a = 1.0 - (1.0 - cfg.sigma_min) * t;
        for j in 0..frames {
            let base = (i * frames + j) * c;
            let x0r = &x0.data()[base..base + c];
            let x1r = &x1.data()[base..base + c];
            let row = &mut path_t[(i * frames + j) * (c + 1)..(i * frames + j + 1) * (c + 1)];
            for k in 0..c {
                row[k] = a * x0r[k] + t * x1r[k];
                target[base + k] = x1r[k] - (1.0 - cfg.sigma_min) * x0r[k];
            }
            row[c] = t;
        }
    }
    let path_t = tape.input(Tensor::new(&[b, frames, c + 1], path_t)?);
    let target = tape.input(Tensor::new(&[b, frames, c], target)?);
    let input = tape.concat_last(&[path_t, mu])?;
    let field = model.forward_traced(tape, input)?;
    let resid = tape.sub(field, target)?;
    Ok(tape.mean_sq(resid))
}

/// Builds the flow-matching loss on `tape`: the mean over every sequence,
/// frame, and channel of the squared residual between the model's field and
/// the conditional target field.
pub fn cfm_loss_traced(
    tape: &mut Tape,
    model: &NetworkModel,
    batch: &FlowBatch,
    cfg: &FlowConfig,
) -> Result<Var> {
    let mu = tape.input(batch.mu.clone());
    cfm_loss_with_mu(tape, model, &batch.x0, &batch.x1, &batch.t, mu, cfg)
}

/// Scalar flow-matching loss without gradient tracking.
pub fn cfm_loss(model: &NetworkModel, batch: &FlowBatch, cfg: &FlowConfig) -> Result<f64> {
    let mut tape = Tape::new();
    let loss = cfm_loss_traced(&mut tape, model, batch, cfg)?;
    tape.value(loss).item()
}

/// Draws one sequence: starts at `mu` plus `temperature`-scaled noise, then
/// integrates the model's field with `euler_steps` forward-Euler updates on
/// the uniform time grid `{0, 1/n, …, (n−1)/n}`.
pub fn sample<R: Rng>(
    model: &NetworkModel,
    mu: &Tensor,
    cfg: &FlowConfig,
    rng: &mut R,
) -> Result<Tensor> {
    cfg.validate()?;
    if mu.rank() != 2 {
        return Err(Error::shape(format!(
            "prior mean must be [frames, channels], got {:?}",
            mu.shape()
        )));
    }
    let c = mu.shape()[1];
    check_model_dims(model, c)?;
    mu.ensure_finite("prior mean")?;

    let mut x = mu.clone();
    if cfg.temperature > 0.0 {
        for v in x.data_mut() {
            let e: f64 = rng.sample(StandardNormal);
            *v += cfg.temperature * e;
        }
    }
    integrate(model, x, mu, cfg)
}

/// Pushes the model's own source distribution through the field: starts at
/// pure `temperature`-scaled noise (no mean offset) and integrates exactly as
/// `sample` does, with `mu` still fed to the model as conditioning. This is
/// the distribution the field was fitted to transport, so its endpoints are
/// the right object to compare against data moments.
pub fn transport<R: Rng>(
    model: &NetworkModel,
    mu: &Tensor,
    cfg: &FlowConfig,
    rng: &mut R,
) -> Result<Tensor> {
    cfg.validate()?;
    if mu.rank() != 2 {
        return Err(Error::shape(format!(
            "prior mean must be [frames, channels], got {:?}",
            mu.shape()
        )));
    }
    check_model_dims(model, mu.shape()[1])?;
    mu.ensure_finite("prior mean")?;

    let mut x = Tensor::zeros(mu.shape());
    if cfg.temperature > 0.0 {
        for v in x.data_mut() {
            let e: f64 = rng.sample(StandardNormal);
            *v += cfg.temperature * e;
        }
    }
    integrate(model, x, mu, cfg)
}

fn integrate(model: &NetworkModel, mut x: Tensor, mu: &Tensor, cfg: &FlowConfig) -> Result<Tensor> {
    let n = cfg.euler_steps;
    let dt = 1.0 / n as f64;
    for k in 0..n {
        let t = k as f64 / n as f64;
        let field = model.forward(&pack_input(&x, t, mu))?;
        field.ensure_finite(&format!("sampler field at step {k}"))?;
        for (xv, &fv) in x.data_mut().iter_mut().zip(field.data()) {
            *xv += dt * fv;
        }
    }
    Ok(x)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::net::NetBuilder;
    use proptest::prelude::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    /// Flow model that ignores its input and always outputs `bias`.
    fn constant_field_model(channels: usize, bias: &[f64]) -> NetworkModel {
        let width = flow_input_dim(channels);
        let mut m = NetBuilder::new("flow", width).affine(channels).build(0).unwrap();
        m.set_param("l0.w", Tensor::zeros(&[width, channels])).unwrap();
        m.set_param("l0.b", Tensor::from_slice(bias)).unwrap();
        m
    }

    #[test]
    fn path_boundaries() {
        let x0 = Tensor::from_slice(&[1.0, -2.0, 0.5]);
        let x1 = Tensor::from_slice(&[3.0, 0.0, -1.0]);
        assert_eq!(ot_path(&x0, &x1, 0.0, 1e-4).unwrap().data(), x0.data());
        assert_eq!(ot_path(&x0, &x1, 1.0, 0.0).unwrap().data(), x1.data());
    }

    #[test]
    fn path_midpoint_from_origin() {
        let x0 = Tensor::from_slice(&[0.0, 0.0]);
        let x1 = Tensor::from_slice(&[2.0, 4.0]);
        let xt = ot_path(&x0, &x1, 0.5, 1e-4).unwrap();
        assert_eq!(xt.data(), &[1.0, 2.0]);
    }

    #[test]
    fn path_rejects_time_outside_unit_interval() {
        let x = Tensor::from_slice(&[1.0]);
        for bad in [-0.1, 1.1] {
            assert!(matches!(
                ot_path(&x, &x, bad, 1e-4),
                Err(Error::InvalidArgument(_))
            ));
        }
    }

    #[test]
    fn field_formula_cases() {
        let zero = Tensor::from_slice(&[0.0, 0.0]);
        let x1 = Tensor::from_slice(&[5.0, -3.0]);
        assert_eq!(target_field(&zero, &x1, 1e-4).unwrap().data(), x1.data());

        let x = Tensor::from_slice(&[2.0, 2.0]);
        let u = target_field(&x, &x, 0.0).unwrap();
        assert_eq!(u.data(), &[0.0, 0.0]);

        let x0 = Tensor::from_slice(&[1.0, 0.0]);
        let e1 = Tensor::from_slice(&[0.0, 1.0]);
        let u = target_field(&x0, &e1, 1e-4).unwrap();
        assert!((u.data()[0] - (-0.9999)).abs() < 1e-12);
        assert!((u.data()[1] - 1.0).abs() < 1e-12);
    }

    #[test]
    fn euler_endpoint_independent_of_step_count() {
        // On a constant field the integrator follows the exact straight
        // path, so every step count lands on x1 + sigma_min * x0. Both
        // frames share one (x0, x1) pair so a constant model is the oracle.
        let sigma = 1e-4;
        let x0 = [0.3, -0.8];
        let x1 = [1.0, 0.5];
        let u: Vec<f64> = x1
            .iter()
            .zip(&x0)
            .map(|(&a1, &a0)| a1 - (1.0 - sigma) * a0)
            .collect();
        let model = constant_field_model(2, &u);
        let mu = Tensor::new(&[2, 2], [x0, x0].concat()).unwrap();

        let mut endpoints = Vec::new();
        for steps in [1usize, 2, 10] {
            let cfg = FlowConfig::new(sigma, steps, 0.0).unwrap();
            let mut rng = ChaCha8Rng::seed_from_u64(0);
            let out = sample(&model, &mu, &cfg, &mut rng).unwrap();
            endpoints.push(out);
        }
        for e in &endpoints[1..] {
            for (a, b) in e.data().iter().zip(endpoints[0].data()) {
                assert!((a - b).abs() < 1e-12);
            }
        }
        for (j, v) in endpoints[0].data().iter().enumerate() {
            let want = x1[j % 2] + sigma * x0[j % 2];
            assert!((v - want).abs() < 1e-12, "endpoint {v} vs {want}");
        }
    }

    #[test]
    fn one_step_from_origin_reaches_target() {
        let x1 = [2.0, -1.0];
        let model = constant_field_model(2, &x1);
        let mu = Tensor::zeros(&[3, 2]);
        let cfg = FlowConfig::new(1e-4, 1, 0.0).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let out = sample(&model, &mu, &cfg, &mut rng).unwrap();
        for row in 0..3 {
            assert_eq!(out.row(row), &x1);
        }
    }

    #[test]
    fn zero_field_zero_temperature_returns_mu() {
        let model = constant_field_model(3, &[0.0; 3]);
        let mu = Tensor::new(&[4, 3], (0..12).map(|i| i as f64 * 0.25).collect()).unwrap();
        let cfg = FlowConfig::new(1e-4, 5, 0.0).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let out = sample(&model, &mu, &cfg, &mut rng).unwrap();
        assert_eq!(out.data(), mu.data());
    }

    #[test]
    fn transport_starts_at_noise_not_mu() {
        // Zero field, zero temperature: sample returns mu, transport returns
        // the origin. Constant field b: both endpoints shift by b.
        let b = [0.5, -1.0, 2.0];
        let model = constant_field_model(3, &b);
        let mu = Tensor::new(&[4, 3], (0..12).map(|i| i as f64 * 0.25).collect()).unwrap();
        let cfg = FlowConfig::new(1e-4, 5, 0.0).unwrap();
        let out = transport(&model, &mu, &cfg, &mut ChaCha8Rng::seed_from_u64(7)).unwrap();
        for row in 0..4 {
            for (o, &bi) in out.row(row).iter().zip(&b) {
                assert!((o - bi).abs() < 1e-12);
            }
        }

        let same = transport(&model, &mu, &cfg, &mut ChaCha8Rng::seed_from_u64(8)).unwrap();
        assert_eq!(out.data(), same.data());

        let warm = FlowConfig::new(1e-4, 5, 1.0).unwrap();
        let a = transport(&model, &mu, &warm, &mut ChaCha8Rng::seed_from_u64(9)).unwrap();
        let b2 = transport(&model, &mu, &warm, &mut ChaCha8Rng::seed_from_u64(9)).unwrap();
        assert_eq!(a.data(), b2.data());
    }

    #[test]
    fn sampling_is_seed_deterministic() {
        let model = NetBuilder::new("flow", flow_input_dim(2))
            .affine(8)
            .tanh()
            .affine(2)
            .build(3)
            .unwrap();
        let mu = Tensor::new(&[4, 2], vec![0.1; 8]).unwrap();
        let cfg = FlowConfig::default();
        let a = sample(&model, &mu, &cfg, &mut ChaCha8Rng::seed_from_u64(5)).unwrap();
        let b = sample(&model, &mu, &cfg, &mut ChaCha8Rng::seed_from_u64(5)).unwrap();
        let c = sample(&model, &mu, &cfg, &mut ChaCha8Rng::seed_from_u64(6)).unwrap();
        assert_eq!(a.data(), b.data());
        assert_ne!(a.data(), c.data());
    }

    #[test]
    fn non_finite_field_reports_divergence() {
        let mut model = constant_field_model(2, &[0.0, 0.0]);
        model
            .set_param("l0.b", Tensor::from_slice(&[f64::INFINITY, 0.0]))
            .unwrap();
        let mu = Tensor::zeros(&[2, 2]);
        let cfg = FlowConfig::default();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        assert!(matches!(
            sample(&model, &mu, &cfg, &mut rng),
            Err(Error::Divergence(_))
        ));
    }

    fn tiny_batch(b: usize, frames: usize, c: usize, seed: u64) -> FlowBatch {
        use rand::Rng;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let n = b * frames * c;
        let mut draw = |_: usize| -> Vec<f64> { (0..n).map(|_| rng.random_range(-1.0..1.0)).collect() };
        let x0 = Tensor::new(&[b, frames, c], draw(0)).unwrap();
        let x1 = Tensor::new(&[b, frames, c], draw(0)).unwrap();
        let mu = Tensor::new(&[b, frames, c], draw(0)).unwrap();
        let mut rng2 = ChaCha8Rng::seed_from_u64(seed + 1);
        let t = (0..b).map(|_| rng2.random_range(0.0..1.0)).collect();
        FlowBatch::new(x0, x1, t, mu).unwrap()
    }

    #[test]
    fn oracle_field_gives_zero_loss_and_offset_gives_eps_squared() {
        // single sequence, single frame: the target field is one row, so a
        // constant model can reproduce it exactly
        let sigma = 1e-4;
        let x0 = Tensor::new(&[1, 1, 3], vec![0.4, -0.2, 1.0]).unwrap();
        let x1 = Tensor::new(&[1, 1, 3], vec![-1.0, 0.8, 0.3]).unwrap();
        let mu = Tensor::zeros(&[1, 1, 3]);
        let u = target_field(
            &x0.reshape(&[1, 3]).unwrap(),
            &x1.reshape(&[1, 3]).unwrap(),
            sigma,
        )
        .unwrap();
        let batch = FlowBatch::new(x0, x1, vec![0.37], mu).unwrap();
        let cfg = FlowConfig::new(sigma, 1, 0.0).unwrap();

        let oracle = constant_field_model(3, u.data());
        let loss = cfm_loss(&oracle, &batch, &cfg).unwrap();
        assert!(loss.abs() < 1e-24, "oracle loss {loss}");

        let eps = 0.01;
        let shifted: Vec<f64> = u.data().iter().map(|v| v + eps).collect();
        let off = constant_field_model(3, &shifted);
        let loss = cfm_loss(&off, &batch, &cfg).unwrap();
        assert!((loss - eps * eps).abs() < 1e-12, "offset loss {loss}");
    }

    #[test]
    fn loss_gradients_match_finite_differences() {
        let c = 3;
        let model = NetBuilder::new("flow", flow_input_dim(c))
            .affine(6)
            .tanh()
            .affine(c)
            .build(17)
            .unwrap();
        let batch = tiny_batch(2, 4, c, 99);
        let cfg = FlowConfig::default();
        let err = crate::net::grad_check_many(&[model], 1e-5, |tape, ms| {
            cfm_loss_traced(tape, &ms[0], &batch, &cfg)
        })
        .unwrap();
        assert!(err < 1e-4, "cfm loss fd err {err}");
    }

    #[test]
    fn config_validation() {
        assert!(FlowConfig::new(0.0, 1, 0.0).is_err());
        assert!(FlowConfig::new(0.02, 1, 0.0).is_err());
        assert!(FlowConfig::new(1e-4, 0, 0.0).is_err());
        assert!(FlowConfig::new(1e-4, 1, -0.5).is_err());
        assert!(FlowConfig::new(1e-2, 1, 0.0).is_ok());
    }

    #[test]
    fn batch_validation() {
        let x = Tensor::zeros(&[2, 3, 4]);
        let bad_t = FlowBatch::new(x.clone(), x.clone(), vec![0.5, 1.5], x.clone());
        assert!(bad_t.is_err());
        let short_t = FlowBatch::new(x.clone(), x.clone(), vec![0.5], x.clone());
        assert!(short_t.is_err());
        let other = Tensor::zeros(&[2, 3, 5]);
        assert!(FlowBatch::new(x.clone(), other, vec![0.1, 0.2], x.clone()).is_err());
        let flat = Tensor::zeros(&[6, 4]);
        assert!(FlowBatch::new(flat.clone(), flat.clone(), vec![0.1; 6], flat).is_err());
    }

    proptest! {
        #[test]
        fn endpoint_error_bounded_by_sigma(
            vals in proptest::collection::vec(-5.0f64..5.0, 8),
            sigma in 1e-6f64..1e-2,
        ) {
            let x0 = Tensor::from_slice(&vals[..4]);
            let x1 = Tensor::from_slice(&vals[4..]);
            let end = ot_path(&x0, &x1, 1.0, sigma).unwrap();
            let err = end.sub(&x1).unwrap().sq_norm().sqrt();
            let bound = sigma * x0.sq_norm().sqrt();
            prop_assert!(err <= bound + 1e-12, "err {err} > bound {bound}");
        }

        #[test]
        fn loss_is_nonnegative(seed in 0u64..50) {
            let model = NetBuilder::new("flow", flow_input_dim(2))
                .affine(4)
                .tanh()
                .affine(2)
                .build(seed)
                .unwrap();
            let batch = tiny_batch(2, 3, 2, seed);
            let loss = cfm_loss(&model, &batch, &FlowConfig::default()).unwrap();
            prop_assert!(loss >= 0.0);
        }
    }
}
