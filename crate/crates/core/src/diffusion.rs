//! Mixed Gaussian/speckle forward diffusion, the denoising network with
//! random channel exchange, pre-training and feature extraction.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Gamma, StandardNormal};
use serde::{Deserialize, Serialize};
use statrs::function::gamma::digamma;

use crate::autograd::{Graph, Var};
use crate::data_io::Batch;
use crate::error::{invalid, Error, Result};
use crate::nn::{Conv2d, Ctx, Linear, ParamStore};
use crate::noise::{apply_masks, draw_masks, MaskPair};
use crate::optim::Adam;
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Added inside every logarithm of the SAR residual.
pub const LOG_EPS: f64 = 1e-6;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScheduleConfig {
    pub steps: usize,
    pub beta_start: f64,
    pub beta_end: f64,
    /// Gamma shape of every speckle factor; defaults to `steps`.
    #[serde(default)]
    pub gamma_shape: Option<f64>,
}

impl Default for ScheduleConfig {
    fn default() -> Self {
        Self {
            steps: 500,
            beta_start: 1e-4,
            beta_end: 0.02,
            gamma_shape: None,
        }
    }
}

/// Per-step scaling factors, indexed by `t` in `1..=steps`.
#[derive(Clone, Debug, PartialEq)]
pub struct NoiseSchedule {
    pub config: ScheduleConfig,
    pub betas: Vec<f64>,
    pub alphas: Vec<f64>,
    pub alpha_bars: Vec<f64>,
    pub gamma_shapes: Vec<f64>,
    log_mean: Vec<f64>,
    log_var: Vec<f64>,
}

/// Trigamma function for `x > 0`.
pub fn trigamma(mut x: f64) -> f64 {
    let mut acc = 0.0;
    while x < 10.0 {
        acc += 1.0 / (x * x);
        x += 1.0;
    }
    let x2 = 1.0 / (x * x);
    acc + 1.0 / x
        + x2 / 2.0
        + (1.0 / x) * x2 * (1.0 / 6.0 - x2 * (1.0 / 30.0 - x2 * (1.0 / 42.0 - x2 / 30.0)))
}

impl NoiseSchedule {
    pub fn build(config: &ScheduleConfig) -> Result<Self> {
        let ScheduleConfig {
            steps,
            beta_start,
            beta_end,
            gamma_shape,
        } = *config;
        if steps == 0 {
            return Err(invalid("diffusion needs at least one step"));
        }
        if !(0.0 < beta_start && beta_start < beta_end && beta_end < 1.0) {
            return Err(invalid(format!(
                "beta range ({beta_start}, {beta_end}) must satisfy 0 < start < end < 1"
            )));
        }
        let nu = gamma_shape.unwrap_or(steps as f64);
        if !(nu > 0.0 && nu.is_finite()) {
            return Err(invalid(format!("gamma shape {nu} must be positive")));
        }
        let betas: Vec<f64> = (0..steps)
            .map(|i| {
                if steps == 1 {
                    beta_start
                } else {
                    beta_start + (beta_end - beta_start) * i as f64 / (steps - 1) as f64
                }
            })
            .collect();
        let alphas: Vec<f64> = betas.iter().map(|b| 1.0 - b).collect();
        let mut alpha_bars = Vec::with_capacity(steps);
        let mut acc = 1.0;
        for &a in &alphas {
            acc *= a;
            alpha_bars.push(acc);
        }
        let gamma_shapes = vec![nu; steps];
        let (mut m, mut v) = (0.0, 0.0);
        let mut log_mean = Vec::with_capacity(steps);
        let mut log_var = Vec::with_capacity(steps);
        for &g in &gamma_shapes {
            // log of a Gamma(g, 1/g) factor has mean digamma(g) - ln g and variance trigamma(g)
            m += digamma(g) - g.ln();
            v += trigamma(g);
            log_mean.push(m);
            log_var.push(v);
        }
        Ok(Self {
            config: config.clone(),
            betas,
            alphas,
            alpha_bars,
            gamma_shapes,
            log_mean,
            log_var,
        })
    }

    pub fn steps(&self) -> usize {
        self.alphas.len()
    }

    pub fn check_t(&self, t: usize) -> Result<()> {
        if t == 0 || t > self.steps() {
            return Err(invalid(format!(
                "timestep {t} outside [1, {}]",
                self.steps()
            )));
        }
        Ok(())
    }

    pub fn alpha(&self, t: usize) -> f64 {
        self.alphas[t - 1]
    }

    pub fn beta(&self, t: usize) -> f64 {
        self.betas[t - 1]
    }

    pub fn alpha_bar(&self, t: usize) -> f64 {
        self.alpha_bars[t - 1]
    }

    /// Mean and variance of the summed log speckle factors up to `t`.
    pub fn log_speckle_moments(&self, t: usize) -> (f64, f64) {
        (self.log_mean[t - 1], self.log_var[t - 1])
    }

    /// Posterior mean of `x_{t-1}` given `x_t` and a noise estimate.
    pub fn reverse_mean<S: Scalar>(
        &self,
        x_t: &Tensor<S>,
        eps_hat: &Tensor<S>,
        t: usize,
    ) -> Result<Tensor<S>> {
        self.check_t(t)?;
        let c = S::lit(self.beta(t) / (1.0 - self.alpha_bar(t)).sqrt());
        let inv = S::lit(1.0 / self.alpha(t).sqrt());
        x_t.zip_map(eps_hat, |x, e| (x - c * e) * inv)
    }

    /// Variance of the reverse transition at `t` (zero at `t = 1`).
    pub fn posterior_variance(&self, t: usize) -> f64 {
        let prev = if t > 1 { self.alpha_bar(t - 1) } else { 1.0 };
        self.beta(t) * (1.0 - prev) / (1.0 - self.alpha_bar(t))
    }

    pub fn reverse_step<S: Scalar, R: Rng + ?Sized>(
        &self,
        x_t: &Tensor<S>,
        eps_hat: &Tensor<S>,
        t: usize,
        rng: &mut R,
    ) -> Result<Tensor<S>> {
        let mean = self.reverse_mean(x_t, eps_hat, t)?;
        let sd = self.posterior_variance(t).sqrt();
        Ok(mean.map(|m| {
            let z: f64 = StandardNormal.sample(rng);
            m + S::lit(sd * z)
        }))
    }
}

fn gaussian<S: Scalar, R: Rng + ?Sized>(shape: &[usize], rng: &mut R) -> Tensor<S> {
    Tensor::randn(shape, 1.0, rng)
}

/// `sqrt(abar_t) * masked(x0) + sqrt(1 - abar_t) * eps`; returns `(x_t, eps)`.
pub fn forward_diffuse_spectral<S: Scalar, R: Rng + ?Sized>(
    x0: &Tensor<S>,
    t: usize,
    masks: &MaskPair<S>,
    schedule: &NoiseSchedule,
    rng: &mut R,
) -> Result<(Tensor<S>, Tensor<S>)> {
    schedule.check_t(t)?;
    let masked = apply_masks(x0, masks)?;
    let eps = gaussian(x0.shape(), rng);
    let (a, b) = (
        S::lit(schedule.alpha_bar(t).sqrt()),
        S::lit((1.0 - schedule.alpha_bar(t)).sqrt()),
    );
    let xt = masked.zip_map(&eps, |x, e| a * x + b * e)?;
    Ok((xt, eps))
}

/// One Markov transition `sqrt(alpha_t) x + sqrt(1 - alpha_t) eps`.
pub fn spectral_transition<S: Scalar, R: Rng + ?Sized>(
    x_prev: &Tensor<S>,
    t: usize,
    schedule: &NoiseSchedule,
    rng: &mut R,
) -> Result<Tensor<S>> {
    schedule.check_t(t)?;
    let (a, b) = (
        S::lit(schedule.alpha(t).sqrt()),
        S::lit((1.0 - schedule.alpha(t)).sqrt()),
    );
    Ok(x_prev.map(|x| {
        let z: f64 = StandardNormal.sample(rng);
        a * x + b * S::lit(z)
    }))
}

/// `sqrt(abar_t) * prod_{i<=t} n_i * x0` with unit-mean Gamma(nu_i, 1/nu_i) factors.
pub fn forward_diffuse_sar<S: Scalar, R: Rng + ?Sized>(
    x0: &Tensor<S>,
    t: usize,
    schedule: &NoiseSchedule,
    rng: &mut R,
) -> Result<Tensor<S>> {
    schedule.check_t(t)?;
    if x0.data().iter().any(|&v| v < S::zero() || v.is_nan()) {
        return Err(invalid("SAR input must be nonnegative"));
    }
    let dists = schedule.gamma_shapes[..t]
        .iter()
        .map(|&nu| Gamma::new(nu, 1.0 / nu).map_err(|e| invalid(e.to_string())))
        .collect::<Result<Vec<_>>>()?;
    let scale = schedule.alpha_bar(t).sqrt();
    Ok(x0.map(|x| {
        let prod: f64 = dists.iter().map(|d| d.sample(rng)).product();
        S::lit(scale * prod * x.as_f64())
    }))
}

/// Standardized log residual of a SAR sample relative to its scaled clean value.
pub fn sar_log_residual<S: Scalar>(
    x_t: &Tensor<S>,
    x0: &Tensor<S>,
    t: usize,
    schedule: &NoiseSchedule,
) -> Result<Tensor<S>> {
    schedule.check_t(t)?;
    let (m, v) = schedule.log_speckle_moments(t);
    let sd = v.sqrt();
    let scale = schedule.alpha_bar(t).sqrt();
    x_t.zip_map(x0, |xt, x| {
        let r = ((xt.as_f64() + LOG_EPS) / (scale * x.as_f64() + LOG_EPS)).ln();
        S::lit((r - m) / sd)
    })
}

/// Bernoulli(rate) choice of which channel pairs to swap.
pub fn exchange_selection<R: Rng + ?Sized>(
    channels: usize,
    rate: f64,
    rng: &mut R,
) -> Result<Vec<bool>> {
    if !(0.0..=1.0).contains(&rate) {
        return Err(invalid(format!("exchange rate {rate} outside [0, 1]")));
    }
    Ok((0..channels).map(|_| rng.random_bool(rate)).collect())
}

/// Channel permutation of `[a | b]` (each `half` wide) that swaps selected pairs.
pub fn exchange_permutation(half: usize, swap: &[bool]) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..2 * half).collect();
    for (c, &s) in swap.iter().enumerate() {
        if s {
            idx.swap(c, c + half);
        }
    }
    idx
}

/// Swaps a random subset of channels (axis 1) between two `[N, C, ...]` maps.
pub fn channel_exchange<S: Scalar, R: Rng + ?Sized>(
    a: &Tensor<S>,
    b: &Tensor<S>,
    rate: f64,
    rng: &mut R,
) -> Result<(Tensor<S>, Tensor<S>)> {
    if a.shape() != b.shape() || a.rank() < 2 {
        return Err(Error::Shape(format!(
            "channel exchange between {:?} and {:?}",
            a.shape(),
            b.shape()
        )));
    }
    let c = a.dim(1);
    let swap = exchange_selection(c, rate, rng)?;
    let mut out_a = Vec::with_capacity(c);
    let mut out_b = Vec::with_capacity(c);
    for (ch, &s) in swap.iter().enumerate() {
        let (x, y) = (a.narrow(1, ch, 1)?, b.narrow(1, ch, 1)?);
        if s {
            out_a.push(y);
            out_b.push(x);
        } else {
            out_a.push(x);
            out_b.push(y);
        }
    }
    let join = |v: &[Tensor<S>]| Tensor::concat(&v.iter().collect::<Vec<_>>(), 1);
    Ok((join(&out_a)?, join(&out_b)?))
}

/// `[sin(t w_k), cos(t w_k)]` with geometric frequencies.
pub fn timestep_embedding<S: Scalar>(ts: &[usize], dim: usize) -> Tensor<S> {
    let half = dim / 2;
    let mut out = Vec::with_capacity(ts.len() * dim);
    for &t in ts {
        for k in 0..half {
            let w = (-(10000f64.ln()) * k as f64 / half as f64).exp();
            out.push(S::lit((t as f64 * w).sin()));
        }
        for k in 0..half {
            let w = (-(10000f64.ln()) * k as f64 / half as f64).exp();
            out.push(S::lit((t as f64 * w).cos()));
        }
    }
    Tensor::from_vec(&[ts.len(), dim], out).expect("embedding size")
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DenoiserConfig {
    pub base_channels: usize,
    /// Number of resolution levels.
    pub depth: usize,
    pub time_embed_dim: usize,
    pub exchange_rate: f64,
    pub spectral_channels: usize,
    pub sar_channels: usize,
}

impl DenoiserConfig {
    pub fn validate(&self) -> Result<()> {
        if self.depth < 2 {
            return Err(invalid(format!(
                "denoiser depth {} must be >= 2",
                self.depth
            )));
        }
        if self.base_channels < 2 || self.base_channels % 2 != 0 {
            return Err(invalid("base_channels must be even and >= 2"));
        }
        if self.time_embed_dim < 2 || self.time_embed_dim % 2 != 0 {
            return Err(invalid("time_embed_dim must be even"));
        }
        if !(0.0..=1.0).contains(&self.exchange_rate) {
            return Err(invalid(format!(
                "exchange rate {} outside [0, 1]",
                self.exchange_rate
            )));
        }
        if self.spectral_channels == 0 || self.sar_channels == 0 {
            return Err(invalid("both modalities need at least one channel"));
        }
        Ok(())
    }

    /// Total channel width at resolution level `i`.
    pub fn width(&self, level: usize) -> usize {
        self.base_channels << level
    }

    /// Width of decoder stage `stage` (0 = bottleneck, `depth - 1` = full resolution).
    pub fn stage_width(&self, stage: usize) -> usize {
        self.width(self.depth - 1 - stage)
    }

    pub fn in_channels(&self) -> usize {
        self.spectral_channels + self.sar_channels
    }
}

/// Encoder-decoder noise predictor over `[spectral | SAR]` channel stacks.
#[derive(Clone, Debug)]
pub struct Denoiser<S> {
    pub config: DenoiserConfig,
    pub store: ParamStore<S>,
    /// Set once a pre-training run has completed.
    pub trained: bool,
    time1: Linear,
    time2: Linear,
    enc_spec: Vec<Conv2d>,
    enc_sar: Vec<Conv2d>,
    enc_time: Vec<Linear>,
    mid: Conv2d,
    mid_time: Linear,
    dec: Vec<Conv2d>,
    dec_time: Vec<Linear>,
    out: Conv2d,
}

pub struct DenoiserOutput<'g, S: Scalar> {
    /// Spectral noise estimate `[N, bands, P, P]`.
    pub eps: Var<'g, S>,
    /// Standardized SAR log-residual estimate `[N, sar_channels, P, P]`.
    pub log_residual: Var<'g, S>,
    /// Decoder activations, bottleneck first.
    pub stages: Vec<Var<'g, S>>,
}

fn down_size(n: usize) -> usize {
    (n + 1) / 2
}

impl<S: Scalar> Denoiser<S> {
    pub fn new<R: Rng + ?Sized>(config: DenoiserConfig, rng: &mut R) -> Result<Self> {
        config.validate()?;
        let mut store = ParamStore::new();
        let td = config.time_embed_dim;
        let time1 = Linear::new(&mut store, "den.time1", td, td, true, rng);
        let time2 = Linear::new(&mut store, "den.time2", td, td, true, rng);
        let (mut enc_spec, mut enc_sar, mut enc_time) = (Vec::new(), Vec::new(), Vec::new());
        for level in 0..config.depth {
            let half = config.width(level) / 2;
            let (in_spec, in_sar, stride) = if level == 0 {
                (config.spectral_channels, config.sar_channels, 1)
            } else {
                (config.width(level - 1) / 2, config.width(level - 1) / 2, 2)
            };
            enc_spec.push(Conv2d::new(
                &mut store,
                &format!("den.enc{level}.spec"),
                in_spec,
                half,
                3,
                stride,
                1,
                rng,
            ));
            enc_sar.push(Conv2d::new(
                &mut store,
                &format!("den.enc{level}.sar"),
                in_sar,
                half,
                3,
                stride,
                1,
                rng,
            ));
            enc_time.push(Linear::new(
                &mut store,
                &format!("den.enc{level}.time"),
                td,
                2 * half,
                true,
                rng,
            ));
        }
        let top = config.width(config.depth - 1);
        let mid = Conv2d::same3(&mut store, "den.mid", top, top, rng);
        let mid_time = Linear::new(&mut store, "den.mid.time", td, top, true, rng);
        let (mut dec, mut dec_time) = (Vec::new(), Vec::new());
        let mut prev = top;
        for level in (0..config.depth - 1).rev() {
            let w = config.width(level);
            dec.push(Conv2d::same3(
                &mut store,
                &format!("den.dec{level}"),
                prev + w,
                w,
                rng,
            ));
            dec_time.push(Linear::new(
                &mut store,
                &format!("den.dec{level}.time"),
                td,
                w,
                true,
                rng,
            ));
            prev = w;
        }
        let out = Conv2d::pointwise(
            &mut store,
            "den.out",
            config.width(0),
            config.in_channels(),
            rng,
        );
        Ok(Self {
            config,
            store,
            trained: false,
            time1,
            time2,
            enc_spec,
            enc_sar,
            enc_time,
            mid,
            mid_time,
            dec,
            dec_time,
            out,
        })
    }

    fn time_bias<'g>(cx: &Ctx<'g, S>, lin: &Linear, emb: Var<'g, S>) -> Result<Var<'g, S>> {
        let b = lin.forward(cx, emb)?;
        let s = b.shape();
        b.reshape(&[s[0], s[1], 1, 1])
    }

    /// `x`: `[N, bands + sar_channels, P, P]`; one timestep per row.
    pub fn forward<'g, R: Rng + ?Sized>(
        &self,
        cx: &Ctx<'g, S>,
        x: Var<'g, S>,
        ts: &[usize],
        rng: &mut R,
    ) -> Result<DenoiserOutput<'g, S>> {
        let cfg = &self.config;
        let xs = x.shape();
        if xs.len() != 4 || xs[1] != cfg.in_channels() || xs[0] != ts.len() {
            return Err(Error::Shape(format!(
                "denoiser expects [{}, {}, H, W], got {:?}",
                ts.len(),
                cfg.in_channels(),
                xs
            )));
        }
        let emb = cx.constant(timestep_embedding(ts, cfg.time_embed_dim));
        let emb = self
            .time2
            .forward(cx, self.time1.forward(cx, emb)?.silu())?
            .silu();
        let mut spec = x.narrow(1, 0, cfg.spectral_channels)?;
        let mut sar = x.narrow(1, cfg.spectral_channels, cfg.sar_channels)?;
        let mut skips = Vec::with_capacity(cfg.depth);
        let mut h = x;
        for level in 0..cfg.depth {
            let half = cfg.width(level) / 2;
            let joined = cx.g.concat(
                &[
                    self.enc_spec[level].forward(cx, spec)?,
                    self.enc_sar[level].forward(cx, sar)?,
                ],
                1,
            )?;
            h = joined
                .add(Self::time_bias(cx, &self.enc_time[level], emb)?)?
                .silu();
            if level > 0 {
                let swap = exchange_selection(half, cfg.exchange_rate, rng)?;
                if swap.iter().any(|&s| s) {
                    h = h.index_select(1, &exchange_permutation(half, &swap))?;
                }
            }
            spec = h.narrow(1, 0, half)?;
            sar = h.narrow(1, half, half)?;
            skips.push(h);
        }
        let mut stages = Vec::with_capacity(cfg.depth);
        h = self
            .mid
            .forward(cx, h)?
            .add(Self::time_bias(cx, &self.mid_time, emb)?)?
            .silu();
        stages.push(h);
        for (k, level) in (0..cfg.depth - 1).rev().enumerate() {
            let skip = skips[level];
            let ss = skip.shape();
            let up = h.upsample_nearest(ss[2], ss[3])?;
            let joined = cx.g.concat(&[up, skip], 1)?;
            h = self.dec[k]
                .forward(cx, joined)?
                .add(Self::time_bias(cx, &self.dec_time[k], emb)?)?
                .silu();
            stages.push(h);
        }
        let y = self.out.forward(cx, h)?;
        Ok(DenoiserOutput {
            eps: y.narrow(1, 0, cfg.spectral_channels)?,
            log_residual: y.narrow(1, cfg.spectral_channels, cfg.sar_channels)?,
            stages,
        })
    }

    /// Spatial size of every decoder stage for a `patch` input.
    pub fn stage_sizes(&self, patch: usize) -> Vec<usize> {
        let mut sizes = vec![patch];
        for _ in 1..self.config.depth {
            sizes.push(down_size(*sizes.last().unwrap()));
        }
        sizes.reverse();
        sizes
    }
}

/// Noised network input and regression targets for one pre-training batch.
pub struct DiffusionTargets<S> {
    pub input: Tensor<S>,
    pub eps: Tensor<S>,
    pub log_residual: Tensor<S>,
    pub ts: Vec<usize>,
}

/// Samples timesteps and masks and forms `x_t` per row.
pub fn diffusion_targets<S: Scalar, R: Rng + ?Sized>(
    batch: &Batch<S>,
    schedule: &NoiseSchedule,
    masks: &MaskPair<S>,
    rng: &mut R,
) -> Result<DiffusionTargets<S>> {
    let n = batch.len();
    let ts: Vec<usize> = (0..n)
        .map(|_| rng.random_range(1..=schedule.steps()))
        .collect();
    let masked = apply_masks(&batch.spectral, masks)?;
    let ones = MaskPair::ones(1, &batch.spectral.shape()[1..]);
    let (mut xs, mut eps, mut res) = (
        Vec::with_capacity(n),
        Vec::with_capacity(n),
        Vec::with_capacity(n),
    );
    for (i, &t) in ts.iter().enumerate() {
        let spec0 = masked.narrow(0, i, 1)?;
        let (spec_t, e) = forward_diffuse_spectral(&spec0, t, &ones, schedule, rng)?;
        let sar0 = batch.sar.narrow(0, i, 1)?;
        let sar_t = forward_diffuse_sar(&sar0, t, schedule, rng)?;
        res.push(sar_log_residual(&sar_t, &sar0, t, schedule)?);
        xs.push(Tensor::concat(&[&spec_t, &sar_t], 1)?);
        eps.push(e);
    }
    let cat = |v: &[Tensor<S>]| Tensor::concat(&v.iter().collect::<Vec<_>>(), 0);
    Ok(DiffusionTargets {
        input: cat(&xs)?,
        eps: cat(&eps)?,
        log_residual: cat(&res)?,
        ts,
    })
}

/// Mean squared error over all spectral and SAR output elements.
pub fn pretrain_loss<'g, S: Scalar, R: Rng + ?Sized>(
    model: &Denoiser<S>,
    cx: &Ctx<'g, S>,
    targets: &DiffusionTargets<S>,
    rng: &mut R,
) -> Result<Var<'g, S>> {
    let out = model.forward(cx, cx.constant(targets.input.clone()), &targets.ts, rng)?;
    let se = out
        .eps
        .sub(cx.constant(targets.eps.clone()))?
        .square()
        .sum_all()?;
    let sr = out
        .log_residual
        .sub(cx.constant(targets.log_residual.clone()))?
        .square()
        .sum_all()?;
    let n = targets.eps.numel() + targets.log_residual.numel();
    Ok(se.add(sr)?.scale(S::one() / S::lit(n as f64)))
}

/// One optimizer step at training progress `epo`; returns the loss.
#[allow(clippy::too_many_arguments)]
pub fn pretrain_step<S: Scalar, R: Rng + ?Sized>(
    model: &mut Denoiser<S>,
    opt: &mut Adam<S>,
    batch: &Batch<S>,
    epo: f64,
    schedule: &NoiseSchedule,
    use_masks: bool,
    lr: f64,
    rng: &mut R,
) -> Result<f64> {
    let sample_shape = batch.spectral.shape()[1..].to_vec();
    let masks = if use_masks {
        draw_masks(batch.len(), &sample_shape, epo, rng)?
    } else {
        MaskPair::ones(batch.len(), &sample_shape)
    };
    let targets = diffusion_targets(batch, schedule, &masks, rng)?;
    let g = Graph::new();
    let cx = Ctx::new(&g, &model.store);
    let loss = pretrain_loss(model, &cx, &targets, rng)?;
    let value = loss.value().item().as_f64();
    if !value.is_finite() {
        return Err(Error::NonFinite(format!(
            "pre-training loss {value} at progress {epo:.4} (timesteps {:?})",
            targets.ts
        )));
    }
    let grads = g.backward(loss)?.for_store(&model.store);
    opt.step(&mut model.store, &grads, lr)?;
    Ok(value)
}

/// Decoder activations of the denoiser, resized to the patch size.
#[derive(Clone, Debug, PartialEq)]
pub struct DiffusionFeatures<S> {
    /// `[N, feature_channels, P, P]`
    pub features: Tensor<S>,
    pub timestep: usize,
    pub source_depth: usize,
}

/// Seed used for channel exchange when the denoiser runs as a feature extractor.
pub const EXCHANGE_SEED: u64 = 0x5eed;

/// Noises each row to `t_star` without masks (one noise seed per row) and
/// returns decoder stage `depth`.
pub fn extract_features<S: Scalar>(
    model: &Denoiser<S>,
    batch: &Batch<S>,
    schedule: &NoiseSchedule,
    t_star: usize,
    depth: usize,
    seeds: &[u64],
) -> Result<DiffusionFeatures<S>> {
    if !model.trained {
        return Err(invalid("denoiser has not been pre-trained"));
    }
    schedule.check_t(t_star)?;
    if depth >= model.config.depth {
        return Err(invalid(format!(
            "feature depth {depth} exceeds decoder stages {}",
            model.config.depth
        )));
    }
    if seeds.len() != batch.len() {
        return Err(invalid(format!(
            "{} seeds for {} samples",
            seeds.len(),
            batch.len()
        )));
    }
    let ones = MaskPair::ones(1, &batch.spectral.shape()[1..]);
    let mut xs = Vec::with_capacity(batch.len());
    for (i, &seed) in seeds.iter().enumerate() {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (spec_t, _) = forward_diffuse_spectral(
            &batch.spectral.narrow(0, i, 1)?,
            t_star,
            &ones,
            schedule,
            &mut rng,
        )?;
        let sar_t = forward_diffuse_sar(&batch.sar.narrow(0, i, 1)?, t_star, schedule, &mut rng)?;
        xs.push(Tensor::concat(&[&spec_t, &sar_t], 1)?);
    }
    let input = Tensor::concat(&xs.iter().collect::<Vec<_>>(), 0)?;
    let g = Graph::inference();
    let cx = Ctx::new(&g, &model.store);
    let mut rng = ChaCha8Rng::seed_from_u64(EXCHANGE_SEED);
    let out = model.forward(
        &cx,
        cx.constant(input),
        &vec![t_star; batch.len()],
        &mut rng,
    )?;
    let p = batch.spectral.dim(2);
    let f = out.stages[depth].upsample_nearest(p, batch.spectral.dim(3))?;
    let features = f.value().clone();
    if !features.all_finite() {
        return Err(Error::NonFinite("diffusion features".into()));
    }
    Ok(DiffusionFeatures {
        features,
        timestep: t_star,
        source_depth: depth,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small_cfg() -> DenoiserConfig {
        DenoiserConfig {
            base_channels: 4,
            depth: 3,
            time_embed_dim: 8,
            exchange_rate: 0.25,
            spectral_channels: 3,
            sar_channels: 1,
        }
    }

    fn rand_batch(n: usize, rng: &mut ChaCha8Rng) -> Batch<f64> {
        Batch {
            spectral: Tensor::uniform(&[n, 3, 9, 9], 0.0, 1.0, rng),
            sar: Tensor::uniform(&[n, 1, 9, 9], 0.0, 1.0, rng),
            labels: vec![0; n],
        }
    }

    #[test]
    fn schedule_products() {
        let s = NoiseSchedule::build(&ScheduleConfig {
            steps: 1,
            beta_start: 0.01,
            beta_end: 0.02,
            gamma_shape: None,
        })
        .unwrap();
        assert!((s.alpha_bar(1) - 0.99).abs() < 1e-15);
        let s = NoiseSchedule::build(&ScheduleConfig {
            steps: 1000,
            ..Default::default()
        })
        .unwrap();
        let direct: f64 = (0..1000)
            .map(|i| 1.0 - (1e-4 + (0.02 - 1e-4) * i as f64 / 999.0))
            .product();
        assert!((s.alpha_bar(1000) - direct).abs() < 1e-12);
        assert!((s.alpha_bar(1000) - 4.04e-5).abs() < 0.01e-5);
        for t in 1..1000 {
            assert_eq!(s.alpha_bar(t + 1), s.alpha_bar(t) * s.alpha(t + 1));
        }
        assert!(NoiseSchedule::build(&ScheduleConfig {
            beta_start: 0.03,
            ..Default::default()
        })
        .is_err());
    }

    #[test]
    fn trigamma_values() {
        assert!((trigamma(1.0) - std::f64::consts::PI.powi(2) / 6.0).abs() < 1e-10);
        assert!((trigamma(0.5) - std::f64::consts::PI.powi(2) / 2.0).abs() < 1e-10);
    }

    #[test]
    fn reverse_step_at_one_recovers_clean() {
        let s = NoiseSchedule::build(&ScheduleConfig::default()).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let x0 = Tensor::<f64>::uniform(&[20], 0.0, 1.0, &mut rng);
        let (x1, eps) = forward_diffuse_spectral(
            &x0.reshape(&[1, 20]).unwrap(),
            1,
            &MaskPair::ones(1, &[20]),
            &s,
            &mut rng,
        )
        .unwrap();
        let back = s.reverse_step(&x1, &eps, 1, &mut rng).unwrap();
        for (a, b) in back.data().iter().zip(x0.data()) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn sar_zero_and_concentrated_speckle() {
        let s = NoiseSchedule::build(&ScheduleConfig {
            gamma_shape: Some(1e6),
            ..Default::default()
        })
        .unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let x0 = Tensor::<f64>::from_f64(&[4], &[0.0, 0.5, 1.0, 2.0]).unwrap();
        let xt = forward_diffuse_sar(&x0, 10, &s, &mut rng).unwrap();
        assert_eq!(xt.data()[0], 0.0);
        for i in 1..4 {
            let expect = s.alpha_bar(10).sqrt() * x0.data()[i];
            assert!((xt.data()[i] - expect).abs() / expect < 0.01);
        }
        assert!(forward_diffuse_sar(&x0.map(|v| -v - 1.0), 3, &s, &mut rng).is_err());
    }

    #[test]
    fn exchange_endpoints() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let a = Tensor::<f64>::uniform(&[2, 5, 3, 3], 0.0, 1.0, &mut rng);
        let b = Tensor::<f64>::uniform(&[2, 5, 3, 3], 0.0, 1.0, &mut rng);
        assert_eq!(
            channel_exchange(&a, &b, 0.0, &mut rng).unwrap(),
            (a.clone(), b.clone())
        );
        assert_eq!(
            channel_exchange(&a, &b, 1.0, &mut rng).unwrap(),
            (b.clone(), a.clone())
        );
        let c = Tensor::<f64>::zeros(&[2, 5, 3, 4]);
        assert!(channel_exchange(&a, &c, 0.5, &mut rng).is_err());
    }

    #[test]
    fn denoiser_shapes_and_determinism() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let model = Denoiser::<f64>::new(small_cfg(), &mut rng).unwrap();
        let x = Tensor::<f64>::randn(&[2, 4, 9, 9], 1.0, &mut rng);
        let run = |seed| {
            let g = Graph::inference();
            let cx = Ctx::new(&g, &model.store);
            let mut r = ChaCha8Rng::seed_from_u64(seed);
            let out = model
                .forward(&cx, cx.constant(x.clone()), &[3, 70], &mut r)
                .unwrap();
            let shapes: Vec<Vec<usize>> = out.stages.iter().map(|s| s.shape()).collect();
            let y =
                cx.g.concat(&[out.eps, out.log_residual], 1)
                    .unwrap()
                    .value()
                    .clone();
            (y, shapes)
        };
        let (y, shapes) = run(5);
        assert_eq!(y.shape(), x.shape());
        assert!(y.all_finite());
        assert_eq!(
            shapes,
            vec![vec![2, 16, 3, 3], vec![2, 8, 5, 5], vec![2, 4, 9, 9]]
        );
        assert_eq!(run(5).0, y);
        assert_eq!(model.stage_sizes(9), vec![3, 5, 9]);
    }

    #[test]
    fn every_parameter_gets_gradient() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let model = Denoiser::<f64>::new(small_cfg(), &mut rng).unwrap();
        let x = Tensor::<f64>::randn(&[3, 4, 9, 9], 1.0, &mut rng);
        let g = Graph::new();
        let cx = Ctx::new(&g, &model.store);
        let out = model
            .forward(&cx, cx.constant(x), &[1, 250, 499], &mut rng)
            .unwrap();
        let loss = g
            .concat(&[out.eps, out.log_residual], 1)
            .unwrap()
            .square()
            .mean_all()
            .unwrap();
        let grads = g.backward(loss).unwrap();
        for pid in model.store.ids() {
            let gr = grads
                .param(pid)
                .unwrap_or_else(|| panic!("{} unused", model.store.name(pid)));
            assert!(
                gr.max_abs() > 0.0,
                "{} has zero gradient",
                model.store.name(pid)
            );
        }
    }

    #[test]
    fn features_need_training_flag() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let sched = NoiseSchedule::build(&ScheduleConfig::default()).unwrap();
        let mut model = Denoiser::<f64>::new(small_cfg(), &mut rng).unwrap();
        let batch = rand_batch(2, &mut rng);
        assert!(extract_features(&model, &batch, &sched, 5, 1, &[1, 2]).is_err());
        model.trained = true;
        let f = extract_features(&model, &batch, &sched, 5, 1, &[1, 2]).unwrap();
        assert_eq!(f.features.shape(), &[2, 8, 9, 9]);
        assert_eq!(
            extract_features(&model, &batch, &sched, 5, 1, &[1, 2]).unwrap(),
            f
        );
    }

    #[test]
    fn pretrain_step_is_finite_and_reproducible() {
        let sched = NoiseSchedule::build(&ScheduleConfig::default()).unwrap();
        let run = || {
            let mut rng = ChaCha8Rng::seed_from_u64(6);
            let mut model = Denoiser::<f64>::new(small_cfg(), &mut rng).unwrap();
            let mut opt = Adam::new(&model.store);
            let batch = rand_batch(4, &mut rng);
            (0..3)
                .map(|i| {
                    pretrain_step(
                        &mut model,
                        &mut opt,
                        &batch,
                        i as f64 / 3.0,
                        &sched,
                        true,
                        1e-3,
                        &mut rng,
                    )
                    .unwrap()
                })
                .collect::<Vec<_>>()
        };
        let a = run();
        assert!(a.iter().all(|l| l.is_finite() && *l > 0.0));
        assert_eq!(a, run());
    }
}
