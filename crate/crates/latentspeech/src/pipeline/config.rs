//! TOML configuration with strict field validation.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::ae::AeConfig;
use crate::diffusion::DiffusionConfig;
use crate::error::{LsError, Result};
use crate::tts::TtsConfig;

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields)]
pub struct PqmfSection {
    pub n_bands: usize,
    /// 0 selects the tap count from the Kaiser formula.
    pub taps: usize,
    pub attenuation_db: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields)]
pub struct AeSection {
    pub latent_channels: usize,
    pub strides: Vec<usize>,
    pub widths: Vec<usize>,
    pub leaky_slope: f32,
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields)]
pub struct TtsSection {
    pub d_model: usize,
    pub heads: usize,
    pub ape_layers: usize,
    pub int_layers: usize,
    pub ff_kernel: usize,
    pub phoneme_vocab: PathBuf,
    pub style_vocab: PathBuf,
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields)]
pub struct DiffusionSection {
    pub t_steps: usize,
    pub beta_start: f32,
    pub beta_end: f32,
    pub channels: usize,
    pub blocks: usize,
    pub cycle: usize,
    pub step_dim: usize,
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields)]
pub struct TrainSection {
    pub batch: usize,
    /// Audio samples per AE training crop.
    pub crop: usize,
    pub ae_steps: usize,
    pub diff_steps: usize,
    pub ae_lr: f32,
    pub diff_lr: f32,
    pub seed: u64,
    /// Documented for the paper-scale profile; the step counts above drive
    /// desk-scale runs.
    pub epochs: Option<usize>,
    /// Stop AE training early once loss falls below this fraction of the
    /// first-step loss.
    pub ae_target_ratio: Option<f32>,
    /// Stop diffusion training early once the Eq. 9 loss falls below this.
    pub diff_target_loss: Option<f32>,
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields)]
pub struct EvalSection {
    /// JSON file mapping clip id to transcript; used when no ASR service is
    /// configured via LS_ASR_URL.
    pub fake_asr: Option<PathBuf>,
    pub mcd_align: bool,
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields)]
pub struct Config {
    pub sample_rate: u32,
    pub pqmf: PqmfSection,
    pub ae: AeSection,
    pub tts: TtsSection,
    pub diffusion: DiffusionSection,
    pub train: TrainSection,
    pub eval: EvalSection,
}

impl Config {
    pub fn load(path: &Path) -> Result<Config> {
        let text = std::fs::read_to_string(path)?;
        let cfg: Config = toml::from_str(&text)
            .map_err(|e| LsError::Config(format!("{}: {e}", path.display())))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        if self.sample_rate == 0 {
            return Err(LsError::Config("sample_rate must be positive".into()));
        }
        if !self.pqmf.n_bands.is_power_of_two() {
            return Err(LsError::Config(format!(
                "pqmf.n_bands {} must be a power of two",
                self.pqmf.n_bands
            )));
        }
        if self.train.batch == 0 {
            return Err(LsError::Config("train.batch must be positive".into()));
        }
        self.ae_config().validate()?;
        Ok(())
    }

    pub fn ae_config(&self) -> AeConfig {
        AeConfig {
            n_bands: self.pqmf.n_bands,
            latent_channels: self.ae.latent_channels,
            strides: self.ae.strides.clone(),
            widths: self.ae.widths.clone(),
            leaky_slope: self.ae.leaky_slope,
        }
    }

    pub fn tts_config(&self, phoneme_vocab: usize, style_vocab: usize) -> TtsConfig {
        TtsConfig {
            d_model: self.tts.d_model,
            heads: self.tts.heads,
            ape_layers: self.tts.ape_layers,
            int_layers: self.tts.int_layers,
            ff_kernel: self.tts.ff_kernel,
            latent_channels: self.ae.latent_channels,
            phoneme_vocab,
            style_vocab,
        }
    }

    pub fn diffusion_config(&self) -> DiffusionConfig {
        DiffusionConfig {
            t_steps: self.diffusion.t_steps,
            beta_start: self.diffusion.beta_start,
            beta_end: self.diffusion.beta_end,
            channels: self.diffusion.channels,
            blocks: self.diffusion.blocks,
            cycle: self.diffusion.cycle,
            step_dim: self.diffusion.step_dim,
            latent_channels: self.ae.latent_channels,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample_toml() -> String {
        r#"
sample_rate = 48000

[pqmf]
n_bands = 16
taps = 0
attenuation_db = 100.0

[ae]
latent_channels = 16
strides = [4, 4, 2, 2]
widths = [32, 64, 128, 128]
leaky_slope = 0.2

[tts]
d_model = 128
heads = 2
ape_layers = 3
int_layers = 3
ff_kernel = 9
phoneme_vocab = "assets/phonemes.txt"
style_vocab = "assets/styles.txt"

[diffusion]
t_steps = 50
beta_start = 1e-4
beta_end = 0.05
channels = 64
blocks = 10
cycle = 10
step_dim = 128

[train]
batch = 8
crop = 65536
ae_steps = 2000
diff_steps = 2000
ae_lr = 1e-4
diff_lr = 2e-4
seed = 7

[eval]
mcd_align = true
"#
        .to_string()
    }

    #[test]
    fn sample_config_parses_and_converts() {
        let cfg: Config = toml::from_str(&sample_toml()).unwrap();
        cfg.validate().unwrap();
        assert_eq!(cfg.ae_config().downsample(), 64);
        assert_eq!(cfg.diffusion_config().t_steps, 50);
        assert_eq!(cfg.tts_config(60, 7).phoneme_vocab, 60);
    }

    #[test]
    fn unknown_keys_rejected() {
        let bad = sample_toml().replace("mcd_align = true", "mcd_align = true\nwhat = 1");
        assert!(toml::from_str::<Config>(&bad).is_err());
    }

    #[test]
    fn invalid_band_count_rejected() {
        let bad = sample_toml().replace("n_bands = 16", "n_bands = 12");
        let cfg: Config = toml::from_str(&bad).unwrap();
        assert!(cfg.validate().is_err());
    }
}
