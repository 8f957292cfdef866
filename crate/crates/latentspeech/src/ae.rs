//! Latent autoencoder: strided convolutions map PQMF subbands to a compact
//! latent embedding and transposed convolutions map back. Trained with the
//! multiscale spectral distance; the trained decoder doubles as the vocoder.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::dsp::pqmf::{PqmfBank, SubbandSignal};
use crate::dsp::spectral::MultiScaleSpec;
use crate::dsp::wav::Waveform;
use crate::error::{LsError, Result};
use crate::nn::layers::{conv_fw, conv_transpose_fw, init_conv, init_conv_transpose, TapeCtx};
use crate::nn::params::ParamStore;
use crate::nn::tape::Var;
use crate::nn::tensor::Tensor;

/// Latent tensor `Z [N_lat x L_lat]` plus how many audio samples one latent
/// frame covers (`n_bands * downsample`).
#[derive(Debug, Clone, PartialEq)]
pub struct LatentEmbedding {
    pub values: Tensor,
    pub frame_hop: usize,
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct AeConfig {
    pub n_bands: usize,
    pub latent_channels: usize,
    /// Per-stage downsampling factors; their product is the total latent hop
    /// in subband frames.
    pub strides: Vec<usize>,
    /// Channel width after each encoder stage.
    pub widths: Vec<usize>,
    pub leaky_slope: f32,
}

impl Default for AeConfig {
    fn default() -> Self {
        AeConfig {
            n_bands: 16,
            latent_channels: 16,
            // two wide stages optimize much better here than four narrow
            // ones: the stack is shallow enough for gradients to reach the
            // encoder and the kernels (2*stride + 1 = 17) still cover the
            // full upsampling footprint
            strides: vec![8, 8],
            widths: vec![64, 128],
            leaky_slope: 0.2,
        }
    }
}

impl AeConfig {
    pub fn downsample(&self) -> usize {
        self.strides.iter().product()
    }

    /// Audio samples per latent frame.
    pub fn frame_hop(&self) -> usize {
        self.n_bands * self.downsample()
    }

    pub fn validate(&self) -> Result<()> {
        if self.strides.is_empty() || self.strides.len() != self.widths.len() {
            return Err(LsError::Config(format!(
                "ae strides ({}) and widths ({}) must be non-empty and equal length",
                self.strides.len(),
                self.widths.len()
            )));
        }
        if self.n_bands == 0 || self.latent_channels == 0 {
            return Err(LsError::Config("ae channel counts must be positive".into()));
        }
        Ok(())
    }

    fn kernel(stride: usize) -> usize {
        2 * stride + 1
    }
}

pub fn init_ae(store: &mut ParamStore, seed: u64, cfg: &AeConfig) -> Result<()> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut cin = cfg.n_bands;
    for (i, (&s, &w)) in cfg.strides.iter().zip(&cfg.widths).enumerate() {
        init_conv(store, &mut rng, &format!("ae.encoder.s{i}"), w, cin, AeConfig::kernel(s));
        cin = w;
    }
    init_conv(store, &mut rng, "ae.encoder.head", cfg.latent_channels, cin, 1);

    let top = *cfg.widths.last().unwrap();
    init_conv(store, &mut rng, "ae.decoder.head", top, cfg.latent_channels, 1);
    let mut cin = top;
    for i in (0..cfg.strides.len()).rev() {
        let cout = if i == 0 { cfg.n_bands } else { cfg.widths[i - 1] };
        let s = cfg.strides[i];
        init_conv_transpose(store, &mut rng, &format!("ae.decoder.s{i}"), cin, cout, AeConfig::kernel(s));
        cin = cout;
    }
    Ok(())
}

/// Encoder stack on an already-bound tape input `[n_bands x L_sub]`.
pub fn encode_fw(ctx: &mut TapeCtx, cfg: &AeConfig, x: Var) -> Result<Var> {
    let mut h = x;
    for (i, &s) in cfg.strides.iter().enumerate() {
        h = conv_fw(ctx, &format!("ae.encoder.s{i}"), h, s, 1)?;
        h = ctx.tape.leaky_relu(h, cfg.leaky_slope);
    }
    let z = conv_fw(ctx, "ae.encoder.head", h, 1, 1)?;
    Ok(ctx.tape.tanh(z))
}

/// Decoder stack producing `[n_bands x L_lat * downsample]`.
pub fn decode_fw(ctx: &mut TapeCtx, cfg: &AeConfig, z: Var) -> Result<Var> {
    let mut h = conv_fw(ctx, "ae.decoder.head", z, 1, 1)?;
    h = ctx.tape.leaky_relu(h, cfg.leaky_slope);
    for i in (0..cfg.strides.len()).rev() {
        h = conv_transpose_fw(ctx, &format!("ae.decoder.s{i}"), h, cfg.strides[i])?;
        if i > 0 {
            h = ctx.tape.leaky_relu(h, cfg.leaky_slope);
        }
    }
    Ok(h)
}

pub fn encode(store: &ParamStore, cfg: &AeConfig, sub: &SubbandSignal) -> Result<LatentEmbedding> {
    if sub.n_bands() != cfg.n_bands {
        return Err(LsError::Config(format!(
            "autoencoder expects {} bands, got {}",
            cfg.n_bands,
            sub.n_bands()
        )));
    }
    let mut ctx = TapeCtx::new(store);
    let x = ctx.tape.constant(sub.bands.clone());
    let z = encode_fw(&mut ctx, cfg, x)?;
    Ok(LatentEmbedding {
        values: ctx.tape.value(z).clone(),
        frame_hop: cfg.frame_hop(),
    })
}

/// Decode a latent back to subbands, trimmed to `orig_sub_len` columns when
/// the pre-encoding length is known.
pub fn decode(
    store: &ParamStore,
    cfg: &AeConfig,
    z: &LatentEmbedding,
    sample_rate: u32,
    orig_sub_len: Option<usize>,
) -> Result<SubbandSignal> {
    if z.values.shape[0] != cfg.latent_channels {
        return Err(LsError::Config(format!(
            "latent has {} channels, expected {}",
            z.values.shape[0], cfg.latent_channels
        )));
    }
    let mut ctx = TapeCtx::new(store);
    let zv = ctx.tape.constant(z.values.clone());
    let out = decode_fw(&mut ctx, cfg, zv)?;
    let mut bands = ctx.tape.value(out).clone();
    if let Some(l) = orig_sub_len {
        if l > bands.shape[1] {
            return Err(LsError::Dimension(format!(
                "cannot trim decoded subbands of length {} to {}",
                bands.shape[1], l
            )));
        }
        let cols = bands.shape[1];
        let mut data = Vec::with_capacity(bands.shape[0] * l);
        for r in 0..bands.shape[0] {
            data.extend_from_slice(&bands.data[r * cols..r * cols + l]);
        }
        bands = Tensor::new(vec![bands.shape[0], l], data)?;
    }
    Ok(SubbandSignal {
        bands,
        sample_rate,
        orig_len: orig_sub_len.map(|l| l * cfg.n_bands),
    })
}

/// One Adam step on the mean multiscale spectral reconstruction loss over a
/// batch of equal-length waveforms.
pub fn ae_train_step(
    store: &mut ParamStore,
    cfg: &AeConfig,
    bank: &PqmfBank,
    spec: &MultiScaleSpec,
    batch: &[Waveform],
    lr: f32,
) -> Result<f32> {
    if batch.is_empty() {
        return Err(LsError::Input("empty training batch".into()));
    }
    let scale = 1.0 / batch.len() as f32;
    let mut total = 0.0f64;
    let mut acc: std::collections::BTreeMap<String, Vec<f32>> = Default::default();
    for wave in batch {
        let sub = bank.analysis(wave)?;
        let mut ctx = TapeCtx::new(store);
        let x = ctx.tape.constant(sub.bands.clone());
        let z = encode_fw(&mut ctx, cfg, x)?;
        let dec = decode_fw(&mut ctx, cfg, z)?;
        let trimmed = ctx.tape.slice_cols(dec, 0, sub.len_sub());
        let loss = ctx.tape.spectral_distance(trimmed, &sub.bands, spec);
        let lv = ctx.tape.scalar_value(loss);
        if !lv.is_finite() {
            return Err(LsError::Numeric(format!("non-finite ae loss {lv}")));
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

/// Full chain: analysis -> encode -> decode -> synthesis. Output length
/// equals input length.
pub fn reconstruct(
    store: &ParamStore,
    cfg: &AeConfig,
    bank: &PqmfBank,
    audio: &Waveform,
) -> Result<Waveform> {
    let sub = bank.analysis(audio)?;
    let z = encode(store, cfg, &sub)?;
    let dec = decode(store, cfg, &z, audio.sample_rate, Some(sub.len_sub()))?;
    bank.synthesis(&dec)
}

/// Per-channel mean and standard deviation over a set of latents, used to
/// standardize diffusion targets. Stored in the checkpoint as
/// `ae.latent_stats.{mean,std}`.
pub fn latent_stats(latents: &[LatentEmbedding]) -> Result<(Tensor, Tensor)> {
    let c = latents
        .first()
        .ok_or_else(|| LsError::Input("latent_stats needs at least one latent".into()))?
        .values
        .shape[0];
    let mut mean = vec![0.0f64; c];
    let mut count = vec![0usize; c];
    for z in latents {
        for ch in 0..c {
            for &v in z.values.row(ch) {
                mean[ch] += v as f64;
            }
            count[ch] += z.values.shape[1];
        }
    }
    for ch in 0..c {
        mean[ch] /= count[ch] as f64;
    }
    let mut var = vec![0.0f64; c];
    for z in latents {
        for ch in 0..c {
            for &v in z.values.row(ch) {
                let d = v as f64 - mean[ch];
                var[ch] += d * d;
            }
        }
    }
    let std: Vec<f32> = var
        .iter()
        .zip(&count)
        .map(|(&v, &n)| ((v / n as f64).sqrt().max(1e-4)) as f32)
        .collect();
    Ok((
        Tensor::new(vec![c], mean.into_iter().map(|v| v as f32).collect())?,
        Tensor::new(vec![c], std)?,
    ))
}

/// (z - mean) / std per channel.
pub fn standardize(z: &Tensor, mean: &Tensor, std: &Tensor) -> Tensor {
    let mut out = z.clone();
    let cols = z.shape[1];
    for ch in 0..z.shape[0] {
        for v in &mut out.data[ch * cols..(ch + 1) * cols] {
            *v = (*v - mean.data[ch]) / std.data[ch];
        }
    }
    out
}

/// Inverse of [`standardize`].
pub fn destandardize(z: &Tensor, mean: &Tensor, std: &Tensor) -> Tensor {
    let mut out = z.clone();
    let cols = z.shape[1];
    for ch in 0..z.shape[0] {
        for v in &mut out.data[ch * cols..(ch + 1) * cols] {
            *v = *v * std.data[ch] + mean.data[ch];
        }
    }
    out
}
