//! Checkpoints: binary weights plus a JSON sidecar holding the config and,
//! for mid-run saves, the trainer state needed to resume.

use std::fs::File;
use std::io::{BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::train::TrainerState;
use super::TrainConfig;
use crate::error::{Error, Result};
use crate::policy::{read_params, write_params, PolicyParams, CHECKPOINT_VERSION};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Sidecar {
    pub format_version: u32,
    pub config: TrainConfig,
    pub state: Option<TrainerState>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub params: PolicyParams,
    pub config: TrainConfig,
    pub state: Option<TrainerState>,
}

/// `weights.bin` → `weights.json`.
pub fn sidecar_path(path: &Path) -> PathBuf {
    path.with_extension("json")
}

pub fn save_checkpoint(path: &Path, ckpt: &Checkpoint) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    write_params(&mut w, &ckpt.params)?;
    w.flush()?;
    let sidecar =
        Sidecar { format_version: CHECKPOINT_VERSION, config: ckpt.config.clone(), state: ckpt.state.clone() };
    let mut w = BufWriter::new(File::create(sidecar_path(path))?);
    serde_json::to_writer_pretty(&mut w, &sidecar)?;
    w.write_all(b"\n")?;
    w.flush()?;
    Ok(())
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    let params = read_params(BufReader::new(File::open(path)?))?;
    let sidecar: Sidecar = serde_json::from_reader(BufReader::new(File::open(sidecar_path(path))?))
        .map_err(|e| Error::Checkpoint(format!("sidecar: {e}")))?;
    if sidecar.format_version != CHECKPOINT_VERSION {
        return Err(Error::Checkpoint(format!(
            "sidecar version {} is not supported (expected {CHECKPOINT_VERSION})",
            sidecar.format_version
        )));
    }
    if *params.map() != sidecar.config.feature_map(params.vocab_size())? {
        return Err(Error::Checkpoint("weights and sidecar config disagree on the feature map".into()));
    }
    Ok(Checkpoint { params, config: sidecar.config, state: sidecar.state })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::SeedStream;

    #[test]
    fn round_trip_and_mismatch() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("policy.bin");
        let config = TrainConfig { context_order: 2, hash_bits: 4, ..TrainConfig::default() };
        let map = config.feature_map(22).unwrap();
        let params = PolicyParams::random(map, 0.3, &mut SeedStream::new(1).rng());
        let ckpt = Checkpoint { params, config, state: None };
        save_checkpoint(&path, &ckpt).unwrap();
        assert_eq!(load_checkpoint(&path).unwrap(), ckpt);

        let other = TrainConfig { context_order: 3, ..ckpt.config.clone() };
        save_checkpoint(&path, &Checkpoint { config: other, ..ckpt }).unwrap();
        assert!(matches!(load_checkpoint(&path), Err(Error::Checkpoint(_))));
    }
}
