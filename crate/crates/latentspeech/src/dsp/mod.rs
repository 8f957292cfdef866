//! Signal-processing front end: WAV I/O, PQMF bank, STFT, mel, and the
//! multiscale spectral distance.

pub mod pqmf;
pub mod spectral;
pub mod stft;
pub mod wav;

pub use pqmf::{design_pqmf, snr_db, PqmfBank, SubbandSignal};
pub use spectral::MultiScaleSpec;
pub use stft::{mel_spectrogram, stft_magnitude};
pub use wav::Waveform;
