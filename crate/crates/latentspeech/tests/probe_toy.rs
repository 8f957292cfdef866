use latentspeech::ae::{ae_train_step, init_ae, AeConfig};
use latentspeech::dsp::pqmf::design_pqmf;
use latentspeech::dsp::spectral::MultiScaleSpec;
use latentspeech::dsp::wav::Waveform;
use latentspeech::nn::params::ParamStore;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const LATENT_HOP: usize = 1024;
const F0_STEP: f64 = 48_000.0 / LATENT_HOP as f64;

fn tone_contour(style: usize) -> (i64, i64) {
    match style {
        1 => (6, 6),
        2 => (4, 7),
        3 => (5, 4),
        4 => (7, 4),
        _ => (5, 5),
    }
}

fn render_syllable(out: &mut Vec<f32>, phoneme: usize, style: usize, frames: usize, mild: bool) {
    let n = frames * LATENT_HOP;
    let (ka, kb) = tone_contour(style);
    let fade = 480;
    for fr in 0..frames {
        let frac = if frames > 1 { fr as f64 / (frames - 1) as f64 } else { 0.0 };
        let k = (ka as f64 + (kb - ka) as f64 * frac).round();
        let f0 = k * F0_STEP;
        let n_part = (0.95 * 24_000.0 / f0) as usize;
        let weights: Vec<f64> = (1..=n_part)
            .map(|p| {
                let lim = if mild { 3 } else { 6 };
                let depth = if mild { 0.4 } else { 0.8 };
                let shape = if p <= lim {
                    (1.0 + depth * ((phoneme * p) as f64).sin()).abs()
                } else {
                    1.0
                };
                shape / p as f64
            })
            .collect();
        let wsum: f64 = weights.iter().sum();
        for j in 0..LATENT_HOP {
            let i = fr * LATENT_HOP + j;
            let ph = f0 * j as f64 / 48_000.0;
            let mut v = 0.0f64;
            for (p, w) in weights.iter().enumerate() {
                v += w * (2.0 * std::f64::consts::PI * (p + 1) as f64 * ph).sin();
            }
            let env = (i.min(n - 1 - i).min(fade) as f64) / fade as f64;
            out.push((v / wsum * 0.5 * env) as f32);
        }
    }
}

fn build_clips(mild: bool) -> Vec<Waveform> {
    let mut rng = ChaCha8Rng::seed_from_u64(77);
    let mut clips = Vec::new();
    for c in 0..10usize {
        let mut samples = Vec::new();
        for s in 0..5 {
            let ph = (c + 3 * s) % 10;
            let tone = 1 + (c + s * 2) % 5;
            let frames = 10 + rng.gen_range(0..5);
            render_syllable(&mut samples, ph, tone, frames, mild);
        }
        let mut w = Waveform::new(samples, 48_000);
        w.peak_normalize(0.95);
        clips.push(w);
    }
    clips
}

fn crop(wave: &Waveform, offset: usize, len: usize) -> Waveform {
    let mut samples = vec![0.0f32; len];
    let take = len.min(wave.len().saturating_sub(offset));
    samples[..take].copy_from_slice(&wave.samples[offset..offset + take]);
    Waveform::new(samples, wave.sample_rate)
}

fn run(clips: &[Waveform], widths: Vec<usize>, lr0: f32, decay_at: usize, steps: usize, batch_n: usize, crop_len: usize, no_gain: bool) -> (f32, f32) {
    let bank = design_pqmf(16, 100.0, 0).unwrap();
    let spec = MultiScaleSpec::default();
    let cfg = AeConfig { widths, ..AeConfig::default() };
    let mut store = ParamStore::new();
    init_ae(&mut store, 7, &cfg).unwrap();
    if no_gain {
        let gain = (6.0f32 / (1.0 + cfg.leaky_slope * cfg.leaky_slope)).sqrt();
        let names: Vec<String> = store
            .names()
            .filter(|n| n.ends_with(".w") && n.starts_with("ae."))
            .cloned()
            .collect();
        for n in names {
            for v in &mut store.get_mut(&n).unwrap().data {
                *v /= gain;
            }
        }
    }
    let mut rng = ChaCha8Rng::seed_from_u64(7 ^ 0xae);
    let hop = cfg.frame_hop();
    let (mut first, mut last) = (0.0, 0.0);
    for step in 0..steps {
        let batch: Vec<Waveform> = (0..batch_n)
            .map(|_| {
                let w = &clips[rng.gen_range(0..clips.len())];
                let max_off = w.len().saturating_sub(crop_len) / hop;
                let off = if max_off == 0 { 0 } else { rng.gen_range(0..=max_off) * hop };
                crop(w, off, crop_len)
            })
            .collect();
        let lr = if step >= steps * 85 / 100 {
            lr0 * 0.1
        } else if step >= decay_at {
            lr0 * 0.3
        } else {
            lr0
        };
        last = ae_train_step(&mut store, &cfg, &bank, &spec, &batch, lr).unwrap();
        if step == 0 { first = last; }
        if step % 400 == 0 { eprintln!("    step {step} loss {last:.3}"); }
    }
    (first, last)
}

#[test]
fn probe() {
    for (label, lr0) in [("nogain lr3e-3", 3e-3f32), ("nogain lr1e-3", 1e-3)] {
        let clips = build_clips(true);
        let (first, last) = run(&clips, vec![64, 128], lr0, 1200, 2000, 4, 16384, true);
        println!("{label}: {first:.3} -> {last:.3} ratio {:.3}", last / first);
    }
}
