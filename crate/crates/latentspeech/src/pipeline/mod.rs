pub mod checkpoint;
pub mod commands;
pub mod config;
pub mod manifest;

pub use checkpoint::{load_checkpoint, save_checkpoint};
pub use config::Config;
pub use manifest::{load_manifest, save_manifest, ManifestEntry};
