pub mod asr;
pub mod mcd;
pub mod wer;

pub use mcd::{mcd, mel_cepstra, CepstraSequence};
pub use wer::{edit_distance_rate, split_syllables};
