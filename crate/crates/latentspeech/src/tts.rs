//! Text-to-speech encoder: acoustic pattern encoder over phoneme + style
//! tokens, duration adapter (predictor + length regulator), and integration
//! encoder producing the conditioning tensor `H_TTS [N_lat x L_lat]`.

use std::collections::HashMap;
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{LsError, Result};
use crate::nn::layers::{
    conv_fw, fft_block_fw, init_conv, init_embedding, init_fft_block, init_linear, linear_fw,
    position_encoding, TapeCtx,
};
use crate::nn::params::ParamStore;
use crate::nn::tape::Var;
use crate::nn::tensor::Tensor;

/// Token table loaded from a plain-text file, one token per line; line
/// number is the id.
#[derive(Debug, Clone)]
pub struct Vocab {
    pub tokens: Vec<String>,
    index: HashMap<String, usize>,
}

impl Vocab {
    pub fn from_tokens(tokens: Vec<String>) -> Result<Self> {
        let mut index = HashMap::new();
        for (i, t) in tokens.iter().enumerate() {
            if index.insert(t.clone(), i).is_some() {
                return Err(LsError::Input(format!("duplicate vocabulary token {t:?}")));
            }
        }
        Ok(Vocab { tokens, index })
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        let tokens = text
            .lines()
            .map(|l| l.trim().to_string())
            .filter(|l| !l.is_empty())
            .collect();
        Self::from_tokens(tokens)
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn id(&self, token: &str) -> Result<usize> {
        self.index
            .get(token)
            .copied()
            .ok_or_else(|| LsError::Input(format!("token {token:?} not in vocabulary")))
    }

    pub fn ids(&self, tokens: &[String]) -> Result<Vec<usize>> {
        tokens.iter().map(|t| self.id(t)).collect()
    }
}

/// Aligned phoneme and style id sequences (one style per phoneme).
#[derive(Debug, Clone, PartialEq)]
pub struct TokenSequence {
    pub phonemes: Vec<usize>,
    pub styles: Vec<usize>,
}

impl TokenSequence {
    pub fn new(phonemes: Vec<usize>, styles: Vec<usize>) -> Result<Self> {
        if phonemes.is_empty() {
            return Err(LsError::Input("empty token sequence".into()));
        }
        if phonemes.len() != styles.len() {
            return Err(LsError::Input(format!(
                "phoneme count {} != style count {}",
                phonemes.len(),
                styles.len()
            )));
        }
        Ok(TokenSequence { phonemes, styles })
    }

    pub fn len(&self) -> usize {
        self.phonemes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.phonemes.is_empty()
    }
}

/// `H [n_tokens x D_model]` with the pre-transformer components retrievable.
#[derive(Debug, Clone)]
pub struct AcousticEmbedding {
    pub h: Tensor,
    pub h_p: Tensor,
    pub h_s: Tensor,
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct TtsConfig {
    pub d_model: usize,
    pub heads: usize,
    pub ape_layers: usize,
    pub int_layers: usize,
    pub ff_kernel: usize,
    pub latent_channels: usize,
    pub phoneme_vocab: usize,
    pub style_vocab: usize,
}

impl Default for TtsConfig {
    fn default() -> Self {
        TtsConfig {
            d_model: 128,
            heads: 2,
            ape_layers: 3,
            int_layers: 3,
            ff_kernel: 9,
            latent_channels: 16,
            phoneme_vocab: 64,
            style_vocab: 8,
        }
    }
}

impl TtsConfig {
    pub fn validate(&self) -> Result<()> {
        if self.d_model % self.heads != 0 {
            return Err(LsError::Config(format!(
                "d_model {} not divisible by {} heads",
                self.d_model, self.heads
            )));
        }
        if self.ff_kernel % 2 == 0 {
            return Err(LsError::Config("ff_kernel must be odd".into()));
        }
        Ok(())
    }
}

pub fn init_tts(store: &mut ParamStore, seed: u64, cfg: &TtsConfig) -> Result<()> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let d = cfg.d_model;
    init_embedding(&mut *store, &mut rng, "tts.phoneme", cfg.phoneme_vocab, d);
    init_embedding(&mut *store, &mut rng, "tts.style", cfg.style_vocab, d);
    for i in 0..cfg.ape_layers {
        init_fft_block(store, &mut rng, &format!("tts.ape.l{i}"), d, cfg.ff_kernel);
    }
    init_conv(store, &mut rng, "tts.dur.c0", d, d, 3);
    init_conv(store, &mut rng, "tts.dur.c1", d, d, 3);
    init_linear(store, &mut rng, "tts.dur.out", d, 1);
    for i in 0..cfg.int_layers {
        init_fft_block(store, &mut rng, &format!("tts.int.l{i}"), d, cfg.ff_kernel);
    }
    init_linear(store, &mut rng, "tts.int.proj", d, cfg.latent_channels);
    Ok(())
}

fn check_ids(seq: &TokenSequence, cfg: &TtsConfig) -> Result<()> {
    if let Some(&p) = seq.phonemes.iter().find(|&&p| p >= cfg.phoneme_vocab) {
        return Err(LsError::Input(format!(
            "phoneme id {p} out of range (vocab {})",
            cfg.phoneme_vocab
        )));
    }
    if let Some(&s) = seq.styles.iter().find(|&&s| s >= cfg.style_vocab) {
        return Err(LsError::Input(format!(
            "style id {s} out of range (vocab {})",
            cfg.style_vocab
        )));
    }
    Ok(())
}

/// Acoustic pattern encoder on the tape. Returns `(h, h_pre)` where `h_pre`
/// is the embedding sum H_P + H_S before positions and transformer blocks.
pub fn encode_acoustic_fw(
    ctx: &mut TapeCtx,
    cfg: &TtsConfig,
    seq: &TokenSequence,
) -> Result<(Var, Var)> {
    check_ids(seq, cfg)?;
    let pt = ctx.p("tts.phoneme.table");
    let st = ctx.p("tts.style.table");
    let hp = ctx.tape.gather(pt, &seq.phonemes)?;
    let hs = ctx.tape.gather(st, &seq.styles)?;
    let h_pre = ctx.tape.add(hp, hs);
    let pe = position_encoding(seq.len(), cfg.d_model);
    let pe = ctx.tape.constant(pe);
    let mut h = ctx.tape.add(h_pre, pe);
    for i in 0..cfg.ape_layers {
        h = fft_block_fw(ctx, &format!("tts.ape.l{i}"), h, cfg.heads)?;
    }
    Ok((h, h_pre))
}

/// Duration predictor head: conv stack over stop-grad(H), one log-domain
/// scalar per token (`[n x 1]` on the tape).
pub fn predict_durations_fw(ctx: &mut TapeCtx, h: Var) -> Result<Var> {
    let frozen = ctx.tape.stop_grad(h);
    let tr = ctx.tape.transpose(frozen);
    let c0 = conv_fw(ctx, "tts.dur.c0", tr, 1, 1)?;
    let a0 = ctx.tape.relu(c0);
    let c1 = conv_fw(ctx, "tts.dur.c1", a0, 1, 1)?;
    let a1 = ctx.tape.relu(c1);
    let back = ctx.tape.transpose(a1);
    Ok(linear_fw(ctx, "tts.dur.out", back))
}

/// Integration encoder: FFT blocks over the length-regulated sequence, then
/// a linear broadcast to latent channels, transposed to `[N_lat x m]`.
pub fn integrate_fw(ctx: &mut TapeCtx, cfg: &TtsConfig, h_reg: Var) -> Result<Var> {
    let m = ctx.tape.value(h_reg).shape[0];
    let pe = ctx.tape.constant(position_encoding(m, cfg.d_model));
    let mut h = ctx.tape.add(h_reg, pe);
    for i in 0..cfg.int_layers {
        h = fft_block_fw(ctx, &format!("tts.int.l{i}"), h, cfg.heads)?;
    }
    let proj = linear_fw(ctx, "tts.int.proj", h);
    Ok(ctx.tape.transpose(proj))
}

/// Full conditioning pathway with teacher-forced durations. Returns
/// `(cond [N_lat x m], dur_log [n x 1])`.
pub fn condition_fw(
    ctx: &mut TapeCtx,
    cfg: &TtsConfig,
    seq: &TokenSequence,
    durations: &[usize],
) -> Result<(Var, Var)> {
    if durations.len() != seq.len() {
        return Err(LsError::Input(format!(
            "{} durations for {} tokens",
            durations.len(),
            seq.len()
        )));
    }
    let (h, _) = encode_acoustic_fw(ctx, cfg, seq)?;
    let dur_log = predict_durations_fw(ctx, h)?;
    let h_reg = ctx.tape.repeat_rows(h, durations)?;
    let cond = integrate_fw(ctx, cfg, h_reg)?;
    Ok((cond, dur_log))
}

/// Log-domain duration target `log(1 + l)` as a `[n x 1]` tensor.
pub fn duration_target(durations: &[usize]) -> Tensor {
    Tensor {
        shape: vec![durations.len(), 1],
        data: durations.iter().map(|&l| (1.0 + l as f32).ln()).collect(),
    }
}

/// Integer frame counts from log-domain predictions: round(exp(x) - 1),
/// clamped to >= 0.
pub fn durations_from_log(pred_log: &[f32]) -> Vec<usize> {
    pred_log
        .iter()
        .map(|&x| (x.exp() - 1.0).round().max(0.0) as usize)
        .collect()
}

// ---- inference wrappers (no gradient) ----------------------------------

pub fn encode_acoustic(
    store: &ParamStore,
    cfg: &TtsConfig,
    seq: &TokenSequence,
) -> Result<AcousticEmbedding> {
    let mut ctx = TapeCtx::new(store);
    let (h, h_pre) = encode_acoustic_fw(&mut ctx, cfg, seq)?;
    let pt = ctx.p("tts.phoneme.table");
    let st = ctx.p("tts.style.table");
    let hp = ctx.tape.gather(pt, &seq.phonemes)?;
    let hs = ctx.tape.gather(st, &seq.styles)?;
    let _ = h_pre;
    Ok(AcousticEmbedding {
        h: ctx.tape.value(h).clone(),
        h_p: ctx.tape.value(hp).clone(),
        h_s: ctx.tape.value(hs).clone(),
    })
}

/// Log-domain duration predictions, one per token.
pub fn predict_durations(store: &ParamStore, cfg: &TtsConfig, seq: &TokenSequence) -> Result<Vec<f32>> {
    let mut ctx = TapeCtx::new(store);
    let (h, _) = encode_acoustic_fw(&mut ctx, cfg, seq)?;
    let d = predict_durations_fw(&mut ctx, h)?;
    Ok(ctx.tape.value(d).data.clone())
}

/// Conditioning tensor `[N_lat x m]` for the given durations.
pub fn tts_embed(
    store: &ParamStore,
    cfg: &TtsConfig,
    seq: &TokenSequence,
    durations: &[usize],
) -> Result<Tensor> {
    let mut ctx = TapeCtx::new(store);
    let (cond, _) = condition_fw(&mut ctx, cfg, seq, durations)?;
    Ok(ctx.tape.value(cond).clone())
}
