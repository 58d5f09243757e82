//! Configuration, the three experiment runners, checkpoints and the files
//! they exchange.
//!
//! Stages talk only through files: checkpoints, CSVs and the config the
//! data generators are keyed by. Every CSV row carries the config hash and
//! seed, and reruns with an equal hash write byte-identical files.

mod checkpoint;
mod config;
mod neural;
mod recon;
mod report;
mod surprisal;

pub use checkpoint::{load_checkpoint, save_checkpoint, Checkpoint, MAGIC, VERSION};
pub use config::{
    construction_name, Aggregation, EncodingConfig, ExperimentConfig, ExperimentKind, ReconConfig, SurprisalConfig,
};
pub use neural::{
    encoding_stimuli, run_encoding, write_encoding_summary_csv, EncodingCell, EncodingOutcome, EncodingStimuli,
};
pub use recon::{
    autoencoder_checkpoint, load_autoencoder, recon_data, run_recon_sweep, sweep_models, train_autoencoders,
    write_recon_csv, ModeSweep, ReconData,
};
pub use report::{report, summarize_correlations, PeakSummary};
pub use surprisal::{
    correlate, flow_checkpoint, load_flow, melody_data, note_ic, read_correlation_csv, run_surprisal, series_from_table,
    surprisal_ic, train_flow, write_correlation_csv, CorrelationRow, MelodyData, SurprisalOutcome,
};

use std::io::Write as _;
use std::path::Path;

use sha2::{Digest, Sha256};

use crate::error::Result;

/// Writes to a temporary sibling and renames it over `path`.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let name = path.file_name().and_then(|n| n.to_str()).unwrap_or("out");
    let tmp = path.with_file_name(format!(".{name}.tmp{}", std::process::id()));
    {
        let mut f = std::fs::File::create(&tmp)?;
        f.write_all(bytes)?;
        f.sync_all()?;
    }
    std::fs::rename(&tmp, path)?;
    Ok(())
}

/// Plain-text record of one command: what ran and what it wrote.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct Manifest {
    pub command: String,
    pub config_hash: String,
    pub seed: u64,
    /// `(file name, SHA-256)` of every output.
    pub outputs: Vec<(String, String)>,
}

impl Manifest {
    pub fn new(command: &str, config: &ExperimentConfig) -> Self {
        Self {
            command: command.to_string(),
            config_hash: config.hash(),
            seed: config.seed,
            outputs: Vec::new(),
        }
    }

    /// Writes `bytes` atomically into `dir` and records the file.
    pub fn emit(&mut self, dir: &Path, name: &str, bytes: &[u8]) -> Result<()> {
        write_atomic(&dir.join(name), bytes)?;
        self.outputs.push((name.to_string(), hex::encode(Sha256::digest(bytes))));
        Ok(())
    }

    pub fn render(&self) -> String {
        let mut s = format!(
            "command = {}\nconfig_hash = {}\nseed = {}\n",
            self.command, self.config_hash, self.seed
        );
        for (name, hash) in &self.outputs {
            s += &format!("output = {name} sha256:{hash}\n");
        }
        s
    }

    pub fn write(&self, dir: &Path) -> Result<()> {
        write_atomic(&dir.join(format!("manifest-{}.txt", self.command)), self.render().as_bytes())
    }
}

#[cfg(test)]
mod tests;
