//! Subcommand implementations wiring the DSP, model, and metric modules
//! into train / synthesize / evaluate / diagnose workflows.

use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::ae::{
    ae_train_step, decode, destandardize, encode, init_ae, latent_stats, standardize,
    LatentEmbedding,
};
use crate::diffusion::{
    init_denoiser, joint_train_step, sample, JointItem, NoiseSchedule,
};
use crate::dsp::pqmf::{design_pqmf, snr_db, PqmfBank};
use crate::dsp::spectral::MultiScaleSpec;
use crate::dsp::stft::mel_spectrogram;
use crate::dsp::wav::{read_wav, write_wav_f32, Waveform};
use crate::error::{LsError, Result};
use crate::eval::asr::{FakeAsrClient, HttpAsrClient, Transcript, TranscriptionClient};
use crate::eval::mcd::{mcd, mel_cepstra};
use crate::eval::wer::edit_distance_rate;
use crate::nn::params::ParamStore;
use crate::nn::tensor::Tensor;
use crate::pipeline::checkpoint::{load_checkpoint, save_checkpoint};
use crate::pipeline::config::Config;
use crate::pipeline::manifest::{load_manifest, save_manifest, ManifestEntry};
use crate::tts::{
    durations_from_log, init_tts, predict_durations, tts_embed, TokenSequence, TtsConfig, Vocab,
};

pub fn build_bank(cfg: &Config) -> Result<PqmfBank> {
    design_pqmf(cfg.pqmf.n_bands, cfg.pqmf.attenuation_db, cfg.pqmf.taps)
}

fn load_clip(cfg: &Config, path: &str) -> Result<Waveform> {
    let mut wave = read_wav(Path::new(path))?;
    if wave.sample_rate != cfg.sample_rate {
        return Err(LsError::Input(format!(
            "{path}: sample rate {} does not match configured {}",
            wave.sample_rate, cfg.sample_rate
        )));
    }
    wave.peak_normalize(0.95);
    Ok(wave)
}

fn load_vocabs(cfg: &Config) -> Result<(Vocab, Vocab)> {
    Ok((
        Vocab::load(&cfg.tts.phoneme_vocab)?,
        Vocab::load(&cfg.tts.style_vocab)?,
    ))
}

fn token_sequence(vocabs: &(Vocab, Vocab), entry: &ManifestEntry) -> Result<TokenSequence> {
    TokenSequence::new(vocabs.0.ids(&entry.phonemes)?, vocabs.1.ids(&entry.styles)?)
}

fn crop(wave: &Waveform, offset: usize, len: usize) -> Waveform {
    let mut samples = vec![0.0f32; len];
    let take = len.min(wave.len().saturating_sub(offset));
    samples[..take].copy_from_slice(&wave.samples[offset..offset + take]);
    Waveform::new(samples, wave.sample_rate)
}

/// Train the autoencoder and write `ae.lspk`. Returns the checkpoint path
/// and the per-step loss trace.
pub fn cmd_ae_train(
    cfg: &Config,
    manifest_path: &Path,
    out_dir: &Path,
    seed: Option<u64>,
) -> Result<(PathBuf, Vec<f32>)> {
    let seed = seed.unwrap_or(cfg.train.seed);
    log_run("ae-train", cfg, seed);
    std::fs::create_dir_all(out_dir)?;
    let entries = load_manifest(manifest_path)?;
    if entries.is_empty() {
        return Err(LsError::Input("manifest has no entries".into()));
    }
    let clips: Vec<Waveform> = entries
        .iter()
        .map(|e| load_clip(cfg, &e.audio_path))
        .collect::<Result<_>>()?;
    let bank = build_bank(cfg)?;
    let spec = MultiScaleSpec::default();
    let ae_cfg = cfg.ae_config();
    let mut store = ParamStore::new();
    init_ae(&mut store, seed, &ae_cfg)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0xae);

    let mut losses = Vec::new();
    let mut first = f32::INFINITY;
    let hop = ae_cfg.frame_hop();
    for step in 0..cfg.train.ae_steps {
        let batch: Vec<Waveform> = (0..cfg.train.batch)
            .map(|_| {
                let wave = &clips[rng.gen_range(0..clips.len())];
                // crops start on latent-frame boundaries so the encoder
                // always sees the same sample-to-frame alignment
                let max_off = wave.len().saturating_sub(cfg.train.crop) / hop;
                let off = if max_off == 0 { 0 } else { rng.gen_range(0..=max_off) * hop };
                crop(wave, off, cfg.train.crop)
            })
            .collect();
        // two-stage step decay: 0.3x after 60%, 0.1x after 85%
        let lr = if step * 20 >= cfg.train.ae_steps * 17 {
            cfg.train.ae_lr * 0.1
        } else if step * 5 >= cfg.train.ae_steps * 3 {
            cfg.train.ae_lr * 0.3
        } else {
            cfg.train.ae_lr
        };
        let loss = ae_train_step(&mut store, &ae_cfg, &bank, &spec, &batch, lr)?;
        if step == 0 {
            first = loss;
        }
        losses.push(loss);
        if step % 50 == 0 {
            eprintln!("[ae-train] step {step} loss {loss:.4}");
        }
        if let Some(ratio) = cfg.train.ae_target_ratio {
            if loss < ratio * first {
                eprintln!("[ae-train] target ratio reached at step {step}");
                break;
            }
        }
    }

    // per-channel latent statistics over the full training clips
    let latents: Vec<LatentEmbedding> = clips
        .iter()
        .map(|w| encode(&store, &ae_cfg, &bank.analysis(w)?))
        .collect::<Result<_>>()?;
    let (mean, std) = latent_stats(&latents)?;
    store.insert("ae.latent_stats.mean", mean);
    store.insert("ae.latent_stats.std", std);

    let path = out_dir.join("ae.lspk");
    save_checkpoint(&path, &store, serde_json::to_value(cfg)?, None)?;
    Ok((path, losses))
}

/// Joint TTS-encoder + denoiser training on top of a frozen AE checkpoint.
/// Writes `model.lspk` containing all parameter groups plus the schedule.
pub fn cmd_tts_train(
    cfg: &Config,
    manifest_path: &Path,
    ae_checkpoint: &Path,
    out_dir: &Path,
    seed: Option<u64>,
) -> Result<(PathBuf, Vec<f32>)> {
    let seed = seed.unwrap_or(cfg.train.seed);
    log_run("tts-train", cfg, seed);
    std::fs::create_dir_all(out_dir)?;
    let (mut store, _header) = load_checkpoint(ae_checkpoint)?;
    let mean = required(&store, "ae.latent_stats.mean")?;
    let std = required(&store, "ae.latent_stats.std")?;
    let bank = build_bank(cfg)?;
    let ae_cfg = cfg.ae_config();
    let vocabs = load_vocabs(cfg)?;
    let tts_cfg = cfg.tts_config(vocabs.0.len(), vocabs.1.len());
    let dcfg = cfg.diffusion_config();
    let sched = dcfg.schedule()?;
    init_tts(&mut store, seed ^ 0x115, &tts_cfg)?;
    init_denoiser(&mut store, seed ^ 0xd1f, &dcfg)?;

    let entries = load_manifest(manifest_path)?;
    let mut items = Vec::new();
    for entry in &entries {
        let durations = entry.durations.clone().ok_or_else(|| LsError::Manifest {
            context: format!("entry {:?}", entry.id),
            message: "training requires ground-truth durations".into(),
        })?;
        let wave = load_clip(cfg, &entry.audio_path)?;
        let z = encode(&store, &ae_cfg, &bank.analysis(&wave)?)?;
        let m: usize = durations.iter().sum();
        if m != z.values.shape[1] {
            return Err(LsError::Manifest {
                context: format!("entry {:?}", entry.id),
                message: format!(
                    "durations sum to {m} latent frames but the clip has {}",
                    z.values.shape[1]
                ),
            });
        }
        items.push(JointItem {
            z0: standardize(&z.values, &mean, &std),
            seq: token_sequence(&vocabs, entry)?,
            durations,
        });
    }
    if items.is_empty() {
        return Err(LsError::Input("manifest has no entries".into()));
    }

    // the AE parameters never appear on the joint tape, so they stay frozen
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x715);
    let mut losses = Vec::new();
    for step in 0..cfg.train.diff_steps {
        let batch: Vec<JointItem> = (0..cfg.train.batch)
            .map(|_| {
                let it = &items[rng.gen_range(0..items.len())];
                JointItem {
                    z0: it.z0.clone(),
                    seq: it.seq.clone(),
                    durations: it.durations.clone(),
                }
            })
            .collect();
        // same two-stage step decay as the AE loop
        let lr = if step * 20 >= cfg.train.diff_steps * 17 {
            cfg.train.diff_lr * 0.1
        } else if step * 5 >= cfg.train.diff_steps * 3 {
            cfg.train.diff_lr * 0.3
        } else {
            cfg.train.diff_lr
        };
        let (diff_loss, dur_loss) =
            joint_train_step(&mut store, &dcfg, &tts_cfg, &sched, &batch, lr, &mut rng)?;
        losses.push(diff_loss);
        if step % 50 == 0 {
            eprintln!("[tts-train] step {step} diffusion {diff_loss:.4} duration {dur_loss:.4}");
        }
        if let Some(target) = cfg.train.diff_target_loss {
            let window = &losses[losses.len().saturating_sub(20)..];
            if window.iter().sum::<f32>() / window.len() as f32 <= target {
                eprintln!("[tts-train] target loss reached at step {step}");
                break;
            }
        }
    }

    let path = out_dir.join("model.lspk");
    save_checkpoint(&path, &store, serde_json::to_value(cfg)?, Some(sched))?;
    Ok((path, losses))
}

fn required(store: &ParamStore, name: &str) -> Result<Tensor> {
    store
        .get(name)
        .cloned()
        .ok_or_else(|| LsError::Format(format!("checkpoint is missing tensor {name}")))
}

/// Synthesize every manifest entry, writing `<id>.wav` plus a metrics-ready
/// manifest with `syn_path` filled in.
pub fn cmd_synth(
    cfg: &Config,
    checkpoint: &Path,
    manifest_path: &Path,
    out_dir: &Path,
    use_predicted_durations: bool,
    seed: Option<u64>,
) -> Result<Vec<ManifestEntry>> {
    let seed = seed.unwrap_or(cfg.train.seed);
    log_run("synth", cfg, seed);
    std::fs::create_dir_all(out_dir)?;
    let (store, header) = load_checkpoint(checkpoint)?;
    let sched = header
        .schedule
        .clone()
        .ok_or_else(|| LsError::Format("checkpoint has no noise schedule".into()))?;
    let mean = required(&store, "ae.latent_stats.mean")?;
    let std = required(&store, "ae.latent_stats.std")?;
    let bank = build_bank(cfg)?;
    let ae_cfg = cfg.ae_config();
    let vocabs = load_vocabs(cfg)?;
    let tts_cfg = cfg.tts_config(vocabs.0.len(), vocabs.1.len());
    let dcfg = cfg.diffusion_config();

    let entries = load_manifest(manifest_path)?;
    let mut out_entries = Vec::new();
    for (i, entry) in entries.iter().enumerate() {
        let seq = token_sequence(&vocabs, entry)?;
        let durations = if use_predicted_durations {
            durations_from_log(&predict_durations(&store, &tts_cfg, &seq)?)
        } else {
            entry.durations.clone().ok_or_else(|| LsError::Manifest {
                context: format!("entry {:?}", entry.id),
                message: "ground-truth durations requested but missing".into(),
            })?
        };
        if durations.iter().sum::<usize>() == 0 {
            return Err(LsError::Manifest {
                context: format!("entry {:?}", entry.id),
                message: "all durations are zero".into(),
            });
        }
        let wave = synthesize_one(
            &store, &ae_cfg, &tts_cfg, &dcfg, &sched, &bank, &mean, &std, &seq, &durations,
            cfg.sample_rate,
            seed.wrapping_add(i as u64),
        )?;
        let path = out_dir.join(format!("{}.wav", entry.id));
        write_wav_f32(&path, &wave)?;
        let mut e = entry.clone();
        e.syn_path = Some(path.to_string_lossy().into_owned());
        out_entries.push(e);
    }
    save_manifest(&out_dir.join("synth.jsonl"), &out_entries)?;
    Ok(out_entries)
}

/// Conditioning -> diffusion sampling -> de-standardize -> decode -> PQMF
/// synthesis for one utterance.
#[allow(clippy::too_many_arguments)]
pub fn synthesize_one(
    store: &ParamStore,
    ae_cfg: &crate::ae::AeConfig,
    tts_cfg: &TtsConfig,
    dcfg: &crate::diffusion::DiffusionConfig,
    sched: &NoiseSchedule,
    bank: &PqmfBank,
    mean: &Tensor,
    std: &Tensor,
    seq: &TokenSequence,
    durations: &[usize],
    sample_rate: u32,
    seed: u64,
) -> Result<Waveform> {
    let cond = tts_embed(store, tts_cfg, seq, durations)?;
    let z_std = sample(store, dcfg, sched, &cond, seed)?;
    let z = LatentEmbedding {
        values: destandardize(&z_std, mean, std),
        frame_hop: ae_cfg.frame_hop(),
    };
    let sub = decode(store, ae_cfg, &z, sample_rate, None)?;
    bank.synthesis(&sub)
}

#[derive(Debug, Clone)]
pub struct EvalRow {
    pub id: String,
    pub wer: f64,
    pub wer_p: f64,
    pub wer_s: f64,
    pub mcd_db: f64,
}

#[derive(Debug, Clone)]
pub struct EvalSummary {
    pub rows: Vec<EvalRow>,
    pub mean: EvalRow,
    pub std: EvalRow,
}

fn mean_std(values: &[f64]) -> (f64, f64) {
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let var = values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
    (mean, var.sqrt())
}

/// Score synthesized clips against their references; writes a CSV with one
/// row per clip plus mean and standard-deviation aggregate rows.
pub fn cmd_eval(cfg: &Config, manifest_path: &Path, out_csv: &Path) -> Result<EvalSummary> {
    log_run("eval", cfg, cfg.train.seed);
    let entries = load_manifest(manifest_path)?;
    let client: Box<dyn TranscriptionClient> = if std::env::var("LS_ASR_URL").is_ok() {
        Box::new(HttpAsrClient::from_env()?)
    } else if let Some(path) = &cfg.eval.fake_asr {
        Box::new(FakeAsrClient::load(path)?)
    } else {
        return Err(LsError::Config(
            "no ASR configured: set LS_ASR_URL or eval.fake_asr".into(),
        ));
    };

    let mut rows = Vec::new();
    for entry in &entries {
        let syn_path = entry.syn_path.as_ref().ok_or_else(|| LsError::Manifest {
            context: format!("entry {:?}", entry.id),
            message: "no syn_path; run synth first".into(),
        })?;
        let text = entry.text.as_ref().ok_or_else(|| LsError::Manifest {
            context: format!("entry {:?}", entry.id),
            message: "no reference text for WER".into(),
        })?;
        let reference = load_clip(cfg, &entry.audio_path)?;
        let synthesized = load_clip(cfg, syn_path)?;
        let mcd_db = mcd(
            &mel_cepstra(&reference)?,
            &mel_cepstra(&synthesized)?,
            cfg.eval.mcd_align,
        )?;
        let ref_t = Transcript::parse(text)?;
        let hyp_t = Transcript::parse(&client.transcribe(&entry.id, &synthesized)?)?;
        rows.push(EvalRow {
            id: entry.id.clone(),
            wer: edit_distance_rate(&ref_t.words, &hyp_t.words)?,
            wer_p: edit_distance_rate(&ref_t.phonemes, &hyp_t.phonemes)?,
            wer_s: edit_distance_rate(&ref_t.styles, &hyp_t.styles)?,
            mcd_db,
        });
    }
    if rows.is_empty() {
        return Err(LsError::Input("nothing to evaluate".into()));
    }

    let col = |f: fn(&EvalRow) -> f64| rows.iter().map(f).collect::<Vec<_>>();
    let (wm, ws) = mean_std(&col(|r| r.wer));
    let (pm, ps) = mean_std(&col(|r| r.wer_p));
    let (sm, ss) = mean_std(&col(|r| r.wer_s));
    let (mm, ms) = mean_std(&col(|r| r.mcd_db));
    let mean = EvalRow { id: "mean".into(), wer: wm, wer_p: pm, wer_s: sm, mcd_db: mm };
    let std = EvalRow { id: "std".into(), wer: ws, wer_p: ps, wer_s: ss, mcd_db: ms };

    let mut w = csv::Writer::from_path(out_csv)?;
    w.write_record(["id", "wer", "wer_p", "wer_s", "mcd_db"])?;
    for r in rows.iter().chain([&mean, &std]) {
        w.write_record([
            r.id.clone(),
            format!("{:.6}", r.wer),
            format!("{:.6}", r.wer_p),
            format!("{:.6}", r.wer_s),
            format!("{:.6}", r.mcd_db),
        ])?;
    }
    w.flush()?;
    Ok(EvalSummary { rows, mean, std })
}

/// Write the β, α, α̂, β̂ tables as CSV, one row per step.
pub fn cmd_schedule_dump(cfg: &Config, out_csv: &Path) -> Result<NoiseSchedule> {
    let sched = cfg.diffusion_config().schedule()?;
    let mut w = csv::Writer::from_path(out_csv)?;
    w.write_record(["t", "beta", "alpha", "alpha_hat", "beta_hat"])?;
    for t in 1..=sched.t_count {
        let i = t - 1;
        w.write_record([
            t.to_string(),
            sched.beta[i].to_string(),
            sched.alpha[i].to_string(),
            sched.alpha_hat[i].to_string(),
            sched.beta_hat[i].to_string(),
        ])?;
    }
    w.flush()?;
    Ok(sched)
}

/// PQMF analysis/synthesis round trip on a WAV file; returns the SNR in dB.
pub fn cmd_roundtrip(cfg: &Config, wav_path: &Path) -> Result<f64> {
    let wave = load_clip(cfg, &wav_path.to_string_lossy())?;
    let bank = build_bank(cfg)?;
    let sub = bank.analysis(&wave)?;
    let back = bank.synthesis(&sub)?;
    let snr = snr_db(&wave.samples, &back.samples);
    println!("round-trip SNR: {snr:.1} dB over {} samples", wave.len());
    Ok(snr)
}

fn write_matrix_csv(path: &Path, t: &Tensor) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    for r in 0..t.shape[0] {
        w.write_record(t.row(r).iter().map(|v| v.to_string()))?;
    }
    w.flush()?;
    Ok(())
}

fn write_matrix_png(path: &Path, t: &Tensor) -> Result<()> {
    let (h, wid) = (t.shape[0] as u32, t.shape[1] as u32);
    let (lo, hi) = t.data.iter().fold((f32::INFINITY, f32::NEG_INFINITY), |(a, b), &v| {
        (a.min(v), b.max(v))
    });
    let span = (hi - lo).max(1e-12);
    let img = image::GrayImage::from_fn(wid, h, |x, y| {
        let v = t.data[(y * wid + x) as usize];
        image::Luma([(255.0 * (v - lo) / span) as u8])
    });
    img.save(path)
        .map_err(|e| LsError::Format(format!("png write failed: {e}")))?;
    Ok(())
}

/// Dump the Figure-style panels for one entry: conditioning tensor H_TTS,
/// encoded and sampled latents, and the mel spectrogram, as CSV + PNG.
pub fn cmd_dump_embeddings(
    cfg: &Config,
    checkpoint: &Path,
    manifest_path: &Path,
    entry_id: &str,
    out_dir: &Path,
    seed: Option<u64>,
) -> Result<()> {
    let seed = seed.unwrap_or(cfg.train.seed);
    std::fs::create_dir_all(out_dir)?;
    let (store, header) = load_checkpoint(checkpoint)?;
    let sched = header
        .schedule
        .clone()
        .ok_or_else(|| LsError::Format("checkpoint has no noise schedule".into()))?;
    let entries = load_manifest(manifest_path)?;
    let entry = entries
        .iter()
        .find(|e| e.id == entry_id)
        .ok_or_else(|| LsError::Input(format!("entry {entry_id:?} not in manifest")))?;
    let bank = build_bank(cfg)?;
    let ae_cfg = cfg.ae_config();
    let vocabs = load_vocabs(cfg)?;
    let tts_cfg = cfg.tts_config(vocabs.0.len(), vocabs.1.len());
    let dcfg = cfg.diffusion_config();
    let seq = token_sequence(&vocabs, entry)?;
    let durations = entry.durations.clone().ok_or_else(|| LsError::Manifest {
        context: format!("entry {:?}", entry.id),
        message: "dump-embeddings needs ground-truth durations".into(),
    })?;

    let wave = load_clip(cfg, &entry.audio_path)?;
    let mel = mel_spectrogram(&wave, 1024, 256, 80)?;
    let z_real = encode(&store, &ae_cfg, &bank.analysis(&wave)?)?;
    let cond = tts_embed(&store, &tts_cfg, &seq, &durations)?;
    let z_sampled = sample(&store, &dcfg, &sched, &cond, seed)?;

    for (name, t) in [
        ("mel", &mel),
        ("z_real", &z_real.values),
        ("h_tts", &cond),
        ("z_sampled", &z_sampled),
    ] {
        write_matrix_csv(&out_dir.join(format!("{entry_id}_{name}.csv")), t)?;
        write_matrix_png(&out_dir.join(format!("{entry_id}_{name}.png")), t)?;
    }
    Ok(())
}

fn log_run(what: &str, cfg: &Config, seed: u64) {
    eprintln!(
        "[{what}] seed {seed}, sample_rate {}, bands {}, T {}",
        cfg.sample_rate, cfg.pqmf.n_bands, cfg.diffusion.t_steps
    );
}
