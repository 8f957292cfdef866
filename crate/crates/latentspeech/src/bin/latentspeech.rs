use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use latentspeech::pipeline::commands;
use latentspeech::pipeline::config::Config;

#[derive(Parser)]
#[command(name = "latentspeech", about = "Latent-diffusion TTS pipeline", version)]
struct Cli {
    /// TOML configuration file.
    #[arg(long, global = true, default_value = "configs/desk.toml")]
    config: PathBuf,

    /// Override the configured global seed.
    #[arg(long, global = true)]
    seed: Option<u64>,

    /// Output directory.
    #[arg(long, global = true, default_value = "out")]
    out: PathBuf,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train the PQMF-subband autoencoder.
    AeTrain {
        #[arg(long)]
        manifest: PathBuf,
    },
    /// Jointly train the TTS encoder and diffusion denoiser on a frozen AE.
    TtsTrain {
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long)]
        ae_checkpoint: PathBuf,
    },
    /// Synthesize every manifest entry to WAV.
    Synth {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        manifest: PathBuf,
        /// Use the duration predictor instead of ground-truth durations.
        #[arg(long)]
        use_predicted_durations: bool,
    },
    /// Score synthesized clips (WER, WER-P, WER-S, MCD) into a CSV.
    Eval {
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long, default_value = "eval.csv")]
        out_csv: PathBuf,
    },
    /// Write the noise-schedule tables as CSV.
    ScheduleDump {
        #[arg(long, default_value = "schedule.csv")]
        out_csv: PathBuf,
    },
    /// Measure PQMF analysis/synthesis SNR on a WAV file.
    Roundtrip {
        #[arg(long)]
        wav: PathBuf,
    },
    /// Dump conditioning, latent, and mel panels for one entry.
    DumpEmbeddings {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long)]
        entry: String,
    },
}

fn run(cli: Cli) -> latentspeech::Result<()> {
    let cfg = Config::load(&cli.config)?;
    match cli.command {
        Command::AeTrain { manifest } => {
            let (path, losses) = commands::cmd_ae_train(&cfg, &manifest, &cli.out, cli.seed)?;
            println!(
                "wrote {} after {} steps (final loss {:.4})",
                path.display(),
                losses.len(),
                losses.last().copied().unwrap_or(f32::NAN)
            );
        }
        Command::TtsTrain { manifest, ae_checkpoint } => {
            let (path, losses) =
                commands::cmd_tts_train(&cfg, &manifest, &ae_checkpoint, &cli.out, cli.seed)?;
            println!(
                "wrote {} after {} steps (final diffusion loss {:.4})",
                path.display(),
                losses.len(),
                losses.last().copied().unwrap_or(f32::NAN)
            );
        }
        Command::Synth { checkpoint, manifest, use_predicted_durations } => {
            let entries = commands::cmd_synth(
                &cfg,
                &checkpoint,
                &manifest,
                &cli.out,
                use_predicted_durations,
                cli.seed,
            )?;
            println!("synthesized {} clips into {}", entries.len(), cli.out.display());
        }
        Command::Eval { manifest, out_csv } => {
            let summary = commands::cmd_eval(&cfg, &manifest, &out_csv)?;
            println!(
                "wer {:.3}±{:.3}  wer-p {:.3}±{:.3}  wer-s {:.3}±{:.3}  mcd {:.2}±{:.2} dB",
                summary.mean.wer,
                summary.std.wer,
                summary.mean.wer_p,
                summary.std.wer_p,
                summary.mean.wer_s,
                summary.std.wer_s,
                summary.mean.mcd_db,
                summary.std.mcd_db,
            );
        }
        Command::ScheduleDump { out_csv } => {
            let sched = commands::cmd_schedule_dump(&cfg, &out_csv)?;
            println!("wrote {} rows to {}", sched.t_count, out_csv.display());
        }
        Command::Roundtrip { wav } => {
            commands::cmd_roundtrip(&cfg, &wav)?;
        }
        Command::DumpEmbeddings { checkpoint, manifest, entry } => {
            commands::cmd_dump_embeddings(&cfg, &checkpoint, &manifest, &entry, &cli.out, cli.seed)?;
            println!("wrote panels for {entry} into {}", cli.out.display());
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}
