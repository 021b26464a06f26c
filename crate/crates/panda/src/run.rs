//! Run directories: checkpoints, loss log, config snapshot and manifest.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use panda_core::checkpoint::Checkpoint;
use panda_core::data::DatasetHandle;
use panda_core::losses::LossBreakdown;
use panda_core::perceptual::FeatureExtractor;
use panda_core::train::TrainState;
use sha2::{Digest, Sha256};

use crate::config_file::config_to_toml;
use crate::error::{io_err, PandaError, Result};

pub const CHECKPOINT_FILE: &str = "checkpoint.pnda";
pub const LOSS_LOG: &str = "losses.csv";
pub const CONFIG_FILE: &str = "config.toml";
pub const MANIFEST_FILE: &str = "manifest.txt";

/// Writes via a temporary file so a failed write never leaves a truncated
/// checkpoint behind.
pub fn write_checkpoint(ck: &Checkpoint, path: &Path) -> Result<()> {
    let err = |source| PandaError::CheckpointWrite {
        path: path.to_path_buf(),
        source,
    };
    if let Some(parent) = path.parent() {
        fs::create_dir_all(parent).map_err(err)?;
    }
    let tmp = path.with_extension("tmp");
    let mut f = fs::File::create(&tmp).map_err(err)?;
    f.write_all(&ck.encode()).map_err(err)?;
    f.sync_all().map_err(err)?;
    fs::rename(&tmp, path).map_err(err)
}

pub fn read_checkpoint(path: &Path) -> Result<Checkpoint> {
    let bytes = fs::read(path).map_err(io_err(path))?;
    Ok(Checkpoint::decode(&bytes)?)
}

pub fn save_checkpoint(state: &TrainState, path: &Path) -> Result<()> {
    write_checkpoint(&state.to_checkpoint(), path)
}

pub fn load_checkpoint(path: &Path) -> Result<TrainState> {
    Ok(TrainState::from_checkpoint(&read_checkpoint(path)?)?)
}

pub fn hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

pub fn sha256_file(path: &Path) -> Result<String> {
    let bytes = fs::read(path).map_err(io_err(path))?;
    Ok(hex(&Sha256::digest(&bytes)))
}

fn walk(dir: &Path, out: &mut Vec<PathBuf>) -> Result<()> {
    for entry in fs::read_dir(dir).map_err(io_err(dir))? {
        let p = entry.map_err(io_err(dir))?.path();
        if p.is_dir() {
            walk(&p, out)?;
        } else {
            out.push(p);
        }
    }
    Ok(())
}

/// Lists every file under `dir` (except the manifest) with its SHA-256,
/// one `<hex>  <relative path>` line each, sorted by path.
pub fn write_manifest(dir: &Path) -> Result<PathBuf> {
    let mut files = Vec::new();
    walk(dir, &mut files)?;
    files.sort();
    let mut text = String::new();
    for f in files {
        let rel = f.strip_prefix(dir).expect("walked below dir");
        if rel == Path::new(MANIFEST_FILE) {
            continue;
        }
        text.push_str(&format!("{}  {}\n", sha256_file(&f)?, rel.display()));
    }
    let path = dir.join(MANIFEST_FILE);
    fs::write(&path, text).map_err(io_err(&path))?;
    Ok(path)
}

pub fn read_loss_log(path: &Path) -> Result<Vec<LossBreakdown>> {
    let text = fs::read_to_string(path).map_err(io_err(path))?;
    Ok(text
        .lines()
        .skip(1)
        .filter_map(LossBreakdown::parse_csv_row)
        .collect())
}

/// Options of [`train_run`].
#[derive(Clone, Debug, Default)]
pub struct RunOptions {
    /// Stop after this many total steps.
    pub max_steps: Option<u64>,
    /// Continue from this checkpoint instead of starting fresh.
    pub resume: Option<PathBuf>,
}

/// Trains into `out`: `losses.csv`, `config.toml`, periodic
/// `checkpoints/step_NNNNNNNN.pnda`, the final `checkpoint.pnda` and a
/// manifest. Resumed runs append to an existing loss log.
pub fn train_run(
    state: TrainState,
    data: &DatasetHandle,
    extractor: Option<&FeatureExtractor<f32>>,
    out: &Path,
    opts: &RunOptions,
) -> Result<TrainState> {
    let mut state = match &opts.resume {
        Some(p) => load_checkpoint(p)?,
        None => state,
    };
    fs::create_dir_all(out).map_err(io_err(out))?;
    let cfg_path = out.join(CONFIG_FILE);
    fs::write(&cfg_path, config_to_toml(state.config())).map_err(io_err(&cfg_path))?;
    let log_path = out.join(LOSS_LOG);
    let fresh = opts.resume.is_none() || !log_path.exists();
    let mut log = fs::OpenOptions::new()
        .create(true)
        .write(true)
        .append(!fresh)
        .truncate(fresh)
        .open(&log_path)
        .map_err(io_err(&log_path))?;
    if fresh {
        writeln!(log, "{}", LossBreakdown::CSV_HEADER).map_err(io_err(&log_path))?;
    }
    let every = state.config().checkpoint_every as u64;
    state.fit(data, extractor, opts.max_steps, |s, row| -> Result<()> {
        writeln!(log, "{}", row.csv_row()).map_err(io_err(&log_path))?;
        if every > 0 && s.step % every == 0 {
            save_checkpoint(
                s,
                &out.join("checkpoints")
                    .join(format!("step_{:08}.pnda", s.step)),
            )?;
        }
        Ok(())
    })?;
    log.flush().map_err(io_err(&log_path))?;
    save_checkpoint(&state, &out.join(CHECKPOINT_FILE))?;
    write_manifest(out)?;
    Ok(state)
}
