//! The code blocks from the guide in `book/src/`, compiled and run as tests
//! so the chapters can't drift out of sync with the API. Each test body is a
//! verbatim copy of the corresponding snippet.

#[test]
fn pqmf_chapter() {
    use latentspeech::dsp::pqmf::{design_pqmf, snr_db};
    use latentspeech::dsp::wav::Waveform;

    let bank = design_pqmf(16, 100.0, 0).unwrap(); // taps chosen automatically
    let wave = Waveform::new(
        (0..48_000).map(|i| (i as f32 * 0.05).sin() * 0.25).collect(),
        48_000,
    );
    let bands = bank.analysis(&wave).unwrap();
    assert_eq!((bands.n_bands(), bands.len_sub()), (16, 3000));

    let back = bank.synthesis(&bands).unwrap();
    assert!(snr_db(&wave.samples, &back.samples) >= 60.0);
}

#[test]
fn autoencoder_chapter() {
    use latentspeech::ae::{decode, encode, init_ae, AeConfig};
    use latentspeech::dsp::pqmf::design_pqmf;
    use latentspeech::dsp::wav::Waveform;
    use latentspeech::nn::params::ParamStore;

    let cfg = AeConfig::default();
    let mut store = ParamStore::new();
    init_ae(&mut store, 1, &cfg).unwrap();

    let bank = design_pqmf(16, 100.0, 0).unwrap();
    let wave = Waveform::new(vec![0.1; 48_000], 48_000);
    let sub = bank.analysis(&wave).unwrap();

    let z = encode(&store, &cfg, &sub).unwrap();
    assert_eq!(z.values.shape, vec![16, 47]); // one second -> 47 latent frames

    let back = decode(&store, &cfg, &z, wave.sample_rate, Some(sub.len_sub())).unwrap();
    assert_eq!(back.bands.shape, sub.bands.shape);
}

#[test]
fn tts_encoder_chapter() {
    use latentspeech::nn::params::ParamStore;
    use latentspeech::tts::{
        durations_from_log, init_tts, predict_durations, tts_embed, TokenSequence, TtsConfig,
    };

    let cfg = TtsConfig {
        d_model: 16,
        heads: 2,
        ape_layers: 1,
        int_layers: 1,
        ff_kernel: 3,
        latent_channels: 4,
        phoneme_vocab: 10,
        style_vocab: 4,
    };
    let mut store = ParamStore::new();
    init_tts(&mut store, 21, &cfg).unwrap();

    let seq = TokenSequence::new(vec![1, 2, 3], vec![0, 1, 2]).unwrap();

    // teacher-forced conditioning: 2 + 3 + 2 = 7 latent frames
    let cond = tts_embed(&store, &cfg, &seq, &[2, 3, 2]).unwrap();
    assert_eq!(cond.shape, vec![4, 7]);

    // free-running: predicted log-durations -> integer frame counts
    let pred = predict_durations(&store, &cfg, &seq).unwrap();
    let durs = durations_from_log(&pred);
    assert_eq!(durs.len(), 3);
}

#[test]
fn diffusion_chapter() {
    use latentspeech::diffusion::{make_schedule, q_sample};
    use latentspeech::nn::tensor::Tensor;

    let sched = make_schedule(50, 1e-4, 0.05).unwrap();
    let z0 = Tensor::new(vec![2, 3], vec![1.0; 6]).unwrap();
    let eps = Tensor::new(vec![2, 3], vec![0.5; 6]).unwrap();

    // Z_t = sqrt(alpha_hat_t) * Z_0 + sqrt(1 - alpha_hat_t) * eps
    let zt = q_sample(&sched, &z0, 50, &eps).unwrap();
    let i = 49;
    let expect = sched.alpha_hat[i].sqrt() * 1.0 + (1.0 - sched.alpha_hat[i]).sqrt() * 0.5;
    assert!((zt.data[0] - expect).abs() < 1e-6);
}

#[test]
fn metrics_chapter() {
    use latentspeech::dsp::wav::Waveform;
    use latentspeech::eval::mcd::{mcd, mel_cepstra};
    use latentspeech::eval::wer::{edit_distance_rate, split_syllables, syllable_tokens};

    let a = Waveform::new(
        (0..48_000).map(|i| (i as f32 * 0.03).sin() * 0.5).collect(),
        48_000,
    );
    let c = mel_cepstra(&a).unwrap();
    assert!(mcd(&c, &c, false).unwrap() < 1e-6); // identical audio -> 0 dB

    let r = syllable_tokens("ni3 hao3 ma5");
    let h = syllable_tokens("ni3 hao3");
    assert!((edit_distance_rate(&r, &h).unwrap() - 1.0 / 3.0).abs() < 1e-12);

    let (phon, tones) = split_syllables("zhong1 guo2").unwrap();
    assert_eq!(phon, ["zh", "ong", "g", "uo"]);
    assert_eq!(tones, ["1", "2"]);
}
