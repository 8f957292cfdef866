//! Conditional latent DDPM: variance schedule, forward (noising) process,
//! gated residual denoiser, training objective, and ancestral sampler.

use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{LsError, Result};
use crate::nn::layers::{conv_fw, init_conv, init_conv_zero, init_linear, linear_fw, TapeCtx};
use crate::nn::params::ParamStore;
use crate::nn::tape::Var;
use crate::nn::tensor::Tensor;
use crate::tts::{condition_fw, duration_target, TokenSequence, TtsConfig};

/// Precomputed β_t, α_t, α̂_t, β̂_t tables, 1-indexed by diffusion step.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NoiseSchedule {
    pub t_count: usize,
    pub beta: Vec<f32>,
    pub alpha: Vec<f32>,
    pub alpha_hat: Vec<f32>,
    pub beta_hat: Vec<f32>,
}

impl NoiseSchedule {
    fn idx(&self, t: usize) -> Result<usize> {
        if t == 0 || t > self.t_count {
            return Err(LsError::Input(format!(
                "diffusion step {t} outside 1..={}",
                self.t_count
            )));
        }
        Ok(t - 1)
    }
}

/// Linear β interpolation with α_t = 1 − β_t, α̂ the running product, and the
/// posterior variances β̂_1 = β_1, β̂_t = ((1−α̂_{t−1})/(1−α̂_t))·β_t.
pub fn make_schedule(t_count: usize, beta_start: f32, beta_end: f32) -> Result<NoiseSchedule> {
    if t_count == 0 {
        return Err(LsError::Config("schedule needs T >= 1".into()));
    }
    if !(0.0 < beta_start && beta_start <= beta_end && beta_end < 1.0) {
        return Err(LsError::Config(format!(
            "need 0 < beta_start <= beta_end < 1, got {beta_start}..{beta_end}"
        )));
    }
    let beta: Vec<f32> = (0..t_count)
        .map(|i| {
            if t_count == 1 {
                beta_start
            } else {
                beta_start + (beta_end - beta_start) * i as f32 / (t_count - 1) as f32
            }
        })
        .collect();
    let alpha: Vec<f32> = beta.iter().map(|b| 1.0 - b).collect();
    let mut alpha_hat = Vec::with_capacity(t_count);
    let mut prod = 1.0f32;
    for &a in &alpha {
        prod *= a;
        alpha_hat.push(prod);
    }
    let beta_hat: Vec<f32> = (0..t_count)
        .map(|i| {
            if i == 0 {
                beta[0]
            } else {
                (1.0 - alpha_hat[i - 1]) / (1.0 - alpha_hat[i]) * beta[i]
            }
        })
        .collect();
    Ok(NoiseSchedule {
        t_count,
        beta,
        alpha,
        alpha_hat,
        beta_hat,
    })
}

/// Sinusoidal diffusion-step embedding: interleaved
/// sin(t/10000^(2i/d)), cos(t/10000^(2i/d)).
pub fn step_embedding(t: usize, dim: usize) -> Tensor {
    let mut data = vec![0.0f32; dim];
    for i in 0..dim / 2 {
        let freq = t as f64 / 10000f64.powf(2.0 * i as f64 / dim as f64);
        data[2 * i] = freq.sin() as f32;
        data[2 * i + 1] = freq.cos() as f32;
    }
    Tensor {
        shape: vec![1, dim],
        data,
    }
}

/// Closed-form forward process: Z_t = sqrt(α̂_t)·Z_0 + sqrt(1−α̂_t)·ε.
pub fn q_sample(sched: &NoiseSchedule, z0: &Tensor, t: usize, eps: &Tensor) -> Result<Tensor> {
    if z0.shape != eps.shape {
        return Err(LsError::Dimension(format!(
            "q_sample shapes {:?} vs {:?}",
            z0.shape, eps.shape
        )));
    }
    let i = sched.idx(t)?;
    let (sa, sb) = (sched.alpha_hat[i].sqrt(), (1.0 - sched.alpha_hat[i]).sqrt());
    let data = z0
        .data
        .iter()
        .zip(&eps.data)
        .map(|(&z, &e)| sa * z + sb * e)
        .collect();
    Tensor::new(z0.shape.clone(), data)
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct DiffusionConfig {
    pub t_steps: usize,
    pub beta_start: f32,
    pub beta_end: f32,
    /// Residual channel width C.
    pub channels: usize,
    /// Number of residual blocks R.
    pub blocks: usize,
    /// Dilation of block i is 2^(i mod cycle).
    pub cycle: usize,
    pub step_dim: usize,
    pub latent_channels: usize,
}

impl Default for DiffusionConfig {
    fn default() -> Self {
        DiffusionConfig {
            t_steps: 50,
            beta_start: 1e-4,
            beta_end: 0.05,
            channels: 64,
            blocks: 10,
            cycle: 10,
            step_dim: 128,
            latent_channels: 16,
        }
    }
}

impl DiffusionConfig {
    pub fn schedule(&self) -> Result<NoiseSchedule> {
        make_schedule(self.t_steps, self.beta_start, self.beta_end)
    }
}

pub fn init_denoiser(store: &mut ParamStore, seed: u64, cfg: &DiffusionConfig) -> Result<()> {
    if cfg.cycle == 0 || cfg.blocks == 0 || cfg.channels == 0 {
        return Err(LsError::Config("denoiser sizes must be positive".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (c, nl) = (cfg.channels, cfg.latent_channels);
    init_conv(store, &mut rng, "diff.in", c, nl, 1);
    for i in 0..cfg.blocks {
        let p = format!("diff.b{i}");
        init_conv(store, &mut rng, &format!("{p}.dil"), 2 * c, c, 3);
        init_linear(store, &mut rng, &format!("{p}.step"), cfg.step_dim, c);
        init_conv(store, &mut rng, &format!("{p}.cond"), 2 * c, nl, 1);
        // the last block feeds only the skip path
        if i + 1 < cfg.blocks {
            init_conv(store, &mut rng, &format!("{p}.res"), c, c, 1);
        }
        init_conv(store, &mut rng, &format!("{p}.skip"), c, c, 1);
    }
    init_conv(store, &mut rng, "diff.out0", c, c, 1);
    // zero-init head: the untrained denoiser predicts exactly zero noise
    init_conv_zero(store, "diff.out1", nl, c, 1);
    Ok(())
}

/// Gated residual denoiser on the tape. `z_t` and `cond` are
/// `[latent_channels x L]`; output has the same shape.
pub fn denoiser_fw(
    ctx: &mut TapeCtx,
    cfg: &DiffusionConfig,
    z_t: Var,
    t: usize,
    cond: Var,
) -> Result<Var> {
    let zs = ctx.tape.value(z_t).shape.clone();
    let cs = ctx.tape.value(cond).shape.clone();
    if zs != cs {
        return Err(LsError::Dimension(format!(
            "denoiser z_t {zs:?} vs cond {cs:?}"
        )));
    }
    if t == 0 || t > cfg.t_steps {
        return Err(LsError::Input(format!(
            "diffusion step {t} outside 1..={}",
            cfg.t_steps
        )));
    }
    let c = cfg.channels;
    let emb = ctx.tape.constant(step_embedding(t, cfg.step_dim));
    let mut x = conv_fw(ctx, "diff.in", z_t, 1, 1)?;
    x = ctx.tape.relu(x);
    let mut skips = Vec::with_capacity(cfg.blocks);
    for i in 0..cfg.blocks {
        let p = format!("diff.b{i}");
        let step = linear_fw(ctx, &format!("{p}.step"), emb);
        let xb = ctx.tape.add_channel_bias(x, step);
        let dilation = 1usize << (i % cfg.cycle);
        let y0 = conv_fw(ctx, &format!("{p}.dil"), xb, 1, dilation)?;
        let yc = conv_fw(ctx, &format!("{p}.cond"), cond, 1, 1)?;
        let y = ctx.tape.add(y0, yc);
        let a = ctx.tape.slice_rows(y, 0, c);
        let b = ctx.tape.slice_rows(y, c, 2 * c);
        let ta = ctx.tape.tanh(a);
        let sb = ctx.tape.sigmoid(b);
        let gate = ctx.tape.mul(ta, sb);
        if i + 1 < cfg.blocks {
            let r = conv_fw(ctx, &format!("{p}.res"), gate, 1, 1)?;
            let sum = ctx.tape.add(x, r);
            x = ctx.tape.scale(sum, std::f32::consts::FRAC_1_SQRT_2);
        }
        skips.push(conv_fw(ctx, &format!("{p}.skip"), gate, 1, 1)?);
    }
    let mut s = skips[0];
    for &sk in &skips[1..] {
        s = ctx.tape.add(s, sk);
    }
    s = ctx.tape.scale(s, 1.0 / (cfg.blocks as f32).sqrt());
    s = ctx.tape.relu(s);
    let h = conv_fw(ctx, "diff.out0", s, 1, 1)?;
    let h = ctx.tape.relu(h);
    conv_fw(ctx, "diff.out1", h, 1, 1)
}

/// Noise prediction without gradient tracking.
pub fn denoiser_forward(
    store: &ParamStore,
    cfg: &DiffusionConfig,
    z_t: &Tensor,
    t: usize,
    cond: &Tensor,
) -> Result<Tensor> {
    let mut ctx = TapeCtx::new(store);
    let z = ctx.tape.constant(z_t.clone());
    let c = ctx.tape.constant(cond.clone());
    let out = denoiser_fw(&mut ctx, cfg, z, t, c)?;
    Ok(ctx.tape.value(out).clone())
}

fn normal_tensor(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
    let n: usize = shape.iter().product();
    let data = (0..n).map(|_| StandardNormal.sample(rng)).collect();
    Tensor {
        shape: shape.to_vec(),
        data,
    }
}

/// One Adam step on the Eq. 9 ε-prediction loss over a batch of
/// (standardized z0, conditioning) pairs. Returns the batch loss.
pub fn train_step(
    store: &mut ParamStore,
    cfg: &DiffusionConfig,
    sched: &NoiseSchedule,
    batch: &[(Tensor, Tensor)],
    lr: f32,
    rng: &mut ChaCha8Rng,
) -> Result<f32> {
    if batch.is_empty() {
        return Err(LsError::Input("empty diffusion batch".into()));
    }
    let scale = 1.0 / batch.len() as f32;
    let mut total = 0.0f64;
    let mut acc: std::collections::BTreeMap<String, Vec<f32>> = Default::default();
    for (z0, cond) in batch {
        let t = 1 + (rng.next_u64() as usize) % sched.t_count;
        let eps = normal_tensor(rng, &z0.shape);
        let z_t = q_sample(sched, z0, t, &eps)?;
        let mut ctx = TapeCtx::new(store);
        let zv = ctx.tape.constant(z_t);
        let cv = ctx.tape.constant(cond.clone());
        let pred = denoiser_fw(&mut ctx, cfg, zv, t, cv)?;
        let ev = ctx.tape.constant(eps);
        let loss = ctx.tape.mse(pred, ev);
        let lv = ctx.tape.scalar_value(loss);
        if !lv.is_finite() {
            return Err(LsError::Numeric(format!("non-finite diffusion loss {lv}")));
        }
        total += lv as f64;
        let grads = ctx.tape.backward(loss)?;
        for (name, g) in ctx.named_grads(&grads) {
            let slot = acc.entry(name).or_insert_with(|| vec![0.0; g.len()]);
            for (a, v) in slot.iter_mut().zip(&g) {
                *a += v * scale;
            }
        }
    }
    store.adam_step(&acc, lr, 0.9, 0.999, 1e-8)?;
    Ok((total * scale as f64) as f32)
}

/// Joint training item: standardized latent target plus the token sequence
/// and ground-truth durations that condition it.
pub struct JointItem {
    pub z0: Tensor,
    pub seq: TokenSequence,
    pub durations: Vec<usize>,
}

/// Joint denoiser + TTS-encoder step: Eq. 9 loss through the conditioning
/// pathway plus 0.1 × duration loss (log-domain MSE, stop-grad input).
pub fn joint_train_step(
    store: &mut ParamStore,
    dcfg: &DiffusionConfig,
    tcfg: &TtsConfig,
    sched: &NoiseSchedule,
    batch: &[JointItem],
    lr: f32,
    rng: &mut ChaCha8Rng,
) -> Result<(f32, f32)> {
    if batch.is_empty() {
        return Err(LsError::Input("empty joint batch".into()));
    }
    let scale = 1.0 / batch.len() as f32;
    let (mut total_diff, mut total_dur) = (0.0f64, 0.0f64);
    let mut acc: std::collections::BTreeMap<String, Vec<f32>> = Default::default();
    for item in batch {
        let t = 1 + (rng.next_u64() as usize) % sched.t_count;
        let eps = normal_tensor(rng, &item.z0.shape);
        let z_t = q_sample(sched, &item.z0, t, &eps)?;
        let mut ctx = TapeCtx::new(store);
        let (cond, dur_log) = condition_fw(&mut ctx, tcfg, &item.seq, &item.durations)?;
        let zv = ctx.tape.constant(z_t);
        let pred = denoiser_fw(&mut ctx, dcfg, zv, t, cond)?;
        let ev = ctx.tape.constant(eps);
        let diff_loss = ctx.tape.mse(pred, ev);
        let target = ctx.tape.constant(duration_target(&item.durations));
        let dur_loss = ctx.tape.mse(dur_log, target);
        let scaled = ctx.tape.scale(dur_loss, 0.1);
        let loss = ctx.tape.add(diff_loss, scaled);
        let (dv, uv) = (ctx.tape.scalar_value(diff_loss), ctx.tape.scalar_value(dur_loss));
        if !ctx.tape.scalar_value(loss).is_finite() {
            return Err(LsError::Numeric("non-finite joint loss".into()));
        }
        total_diff += dv as f64;
        total_dur += uv as f64;
        let grads = ctx.tape.backward(loss)?;
        for (name, g) in ctx.named_grads(&grads) {
            let slot = acc.entry(name).or_insert_with(|| vec![0.0; g.len()]);
            for (a, v) in slot.iter_mut().zip(&g) {
                *a += v * scale;
            }
        }
    }
    store.adam_step(&acc, lr, 0.9, 0.999, 1e-8)?;
    Ok((
        (total_diff * scale as f64) as f32,
        (total_dur * scale as f64) as f32,
    ))
}

/// One reverse step (Eq. 8): μ = (z_t − (β_t/√(1−α̂_t))·ε̂)/√α_t, then add
/// σ·noise with σ = √β̂_t; the injected noise is forced to zero at t = 1.
pub fn posterior_step(
    store: &ParamStore,
    cfg: &DiffusionConfig,
    sched: &NoiseSchedule,
    z_t: &Tensor,
    t: usize,
    cond: &Tensor,
    noise: Option<&Tensor>,
) -> Result<Tensor> {
    let i = sched.idx(t)?;
    let eps_hat = denoiser_forward(store, cfg, z_t, t, cond)?;
    let coef = sched.beta[i] / (1.0 - sched.alpha_hat[i]).sqrt();
    let inv_sqrt_a = 1.0 / sched.alpha[i].sqrt();
    let sigma = sched.beta_hat[i].sqrt();
    let mut out = Tensor::zeros(&z_t.shape);
    for j in 0..out.data.len() {
        let mu = inv_sqrt_a * (z_t.data[j] - coef * eps_hat.data[j]);
        let n = if t == 1 {
            0.0
        } else {
            noise.map_or(0.0, |nz| nz.data[j])
        };
        out.data[j] = mu + sigma * n;
    }
    out.assert_finite("posterior step")?;
    Ok(out)
}

/// Ancestral sampling from seeded Gaussian noise down to Z_0.
pub fn sample(
    store: &ParamStore,
    cfg: &DiffusionConfig,
    sched: &NoiseSchedule,
    cond: &Tensor,
    seed: u64,
) -> Result<Tensor> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut z = normal_tensor(&mut rng, &cond.shape);
    for t in (1..=sched.t_count).rev() {
        let noise = if t > 1 {
            Some(normal_tensor(&mut rng, &cond.shape))
        } else {
            None
        };
        z = posterior_step(store, cfg, sched, &z, t, cond, noise.as_ref())?;
    }
    Ok(z)
}
