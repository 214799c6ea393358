//! Turns recorded episode logs into training samples: rasterize the point
//! cloud into both grids, lift the logged navigation scalars, and attach the
//! ground-truth targets. Commands are re-derived from the logged route points
//! by default so scoring exercises the same path as deployment.

use std::fs;
use std::path::{Path, PathBuf};

use lidarpilot_core::controller::{derive_command, Command};
use lidarpilot_core::geonav::LocalPoint;
use lidarpilot_core::projection::{
    project_bev, project_front, GridConfig, LabeledPointCloud, SparseGrid,
};
use lidarpilot_core::trainer::TrainSample;
use lidarpilot_sim::log::{read_episode_log, LogError, LogSample};
use lidarpilot_sim::scenes::DatasetManifest;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum DataError {
    #[error("cannot read {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("manifest {path} is not valid: {source}")]
    BadManifest {
        path: String,
        #[source]
        source: serde_json::Error,
    },
    #[error("log {path}: {source}")]
    BadLog {
        path: String,
        #[source]
        source: LogError,
    },
    #[error("{file} sample {index}: {reason}")]
    CorruptSample { file: String, index: usize, reason: String },
    #[error("no episodes under {0}")]
    Empty(String),
    #[error("not enough samples to split: {0} total")]
    TooFewSamples(usize),
}

/// One decoded episode with its manifest labels.
#[derive(Debug, Clone)]
pub struct EpisodeSamples {
    pub file: String,
    pub condition: String,
    pub samples: Vec<LogSample>,
}

/// Reads `manifest.json` and every log it lists. Corrupt logs either abort
/// or are skipped with a warning on stderr.
pub fn load_episodes(dir: &Path, skip_corrupt: bool) -> Result<Vec<EpisodeSamples>, DataError> {
    let manifest_path = dir.join("manifest.json");
    let text = fs::read_to_string(&manifest_path).map_err(|source| DataError::Io {
        path: manifest_path.display().to_string(),
        source,
    })?;
    let manifest: DatasetManifest =
        serde_json::from_str(&text).map_err(|source| DataError::BadManifest {
            path: manifest_path.display().to_string(),
            source,
        })?;

    let mut episodes = Vec::new();
    for record in &manifest.episodes {
        let path = dir.join(&record.file);
        match read_episode_log(&path) {
            Ok(samples) => episodes.push(EpisodeSamples {
                file: record.file.clone(),
                condition: record.condition.clone(),
                samples,
            }),
            Err(source) if skip_corrupt => {
                eprintln!("warning: skipping {}: {source}", path.display());
            }
            Err(source) => {
                return Err(DataError::BadLog { path: path.display().to_string(), source })
            }
        }
    }
    if episodes.is_empty() {
        return Err(DataError::Empty(dir.display().to_string()));
    }
    Ok(episodes)
}

/// Repeat directories under `data_dir` (subdirectories holding a manifest),
/// sorted by name; a bare manifest makes `data_dir` itself the one repeat.
pub fn repeat_dirs(data_dir: &Path) -> Result<Vec<PathBuf>, DataError> {
    let mut reps: Vec<PathBuf> = Vec::new();
    if let Ok(entries) = fs::read_dir(data_dir) {
        for entry in entries.flatten() {
            let path = entry.path();
            if path.is_dir() && path.join("manifest.json").is_file() {
                reps.push(path);
            }
        }
    }
    reps.sort();
    if reps.is_empty() {
        if data_dir.join("manifest.json").is_file() {
            reps.push(data_dir.to_path_buf());
        } else {
            return Err(DataError::Empty(data_dir.display().to_string()));
        }
    }
    Ok(reps)
}

fn check_finite(values: &[f64], what: &str) -> Result<(), String> {
    if values.iter().all(|v| v.is_finite()) {
        Ok(())
    } else {
        Err(format!("non-finite {what}"))
    }
}

/// Schema check for one record; corrupt records carry the reason.
pub fn validate_log_sample(s: &LogSample) -> Result<(), String> {
    check_finite(&[s.timestamp, s.gnss.lat, s.gnss.lon], "gnss fix")?;
    check_finite(
        &[s.omega_l as f64, s.omega_r as f64, s.steering as f64, s.throttle as f64],
        "drive state",
    )?;
    check_finite(&s.rp1.map(f64::from), "route point 1")?;
    check_finite(&s.rp2.map(f64::from), "route point 2")?;
    check_finite(&s.gt_waypoints.map(f64::from), "waypoint targets")?;
    if Command::from_u8(s.command).is_none() {
        return Err(format!("command byte {} out of range", s.command));
    }
    Ok(())
}

/// Projects one log record into a training sample.
pub fn to_train_sample(
    s: &LogSample,
    front_cfg: &GridConfig,
    bev_cfg: &GridConfig,
    use_logged_commands: bool,
) -> TrainSample {
    let cloud = LabeledPointCloud { points: s.points.clone(), timestamp: s.timestamp };
    let front = SparseGrid::from_grid(&project_front(&cloud, front_cfg));
    let bev = SparseGrid::from_grid(&project_bev(&cloud, bev_cfg));
    let rp1 = LocalPoint::new(s.rp1[0] as f64, s.rp1[1] as f64);
    let rp2 = LocalPoint::new(s.rp2[0] as f64, s.rp2[1] as f64);
    let command = if use_logged_commands {
        Command::from_u8(s.command).expect("validated before conversion")
    } else {
        derive_command(rp1, rp2)
    };
    let w = &s.gt_waypoints;
    TrainSample {
        front,
        bev,
        rp1,
        rp2,
        omega_l: s.omega_l as f64,
        omega_r: s.omega_r as f64,
        command,
        target_waypoints: [
            LocalPoint::new(w[0] as f64, w[1] as f64),
            LocalPoint::new(w[2] as f64, w[3] as f64),
            LocalPoint::new(w[4] as f64, w[5] as f64),
        ],
        target_steering: s.steering as f64,
        target_throttle: s.throttle as f64,
    }
}

/// Converts an episode, keeping every `stride`-th tick. Corrupt records
/// abort or are skipped per `skip_corrupt`.
pub fn episode_to_samples(
    ep: &EpisodeSamples,
    stride: usize,
    front_cfg: &GridConfig,
    bev_cfg: &GridConfig,
    use_logged_commands: bool,
    skip_corrupt: bool,
) -> Result<Vec<TrainSample>, DataError> {
    let stride = stride.max(1);
    let mut out = Vec::with_capacity(ep.samples.len() / stride + 1);
    for (index, s) in ep.samples.iter().enumerate().step_by(stride) {
        match validate_log_sample(s) {
            Ok(()) => out.push(to_train_sample(s, front_cfg, bev_cfg, use_logged_commands)),
            Err(reason) if skip_corrupt => {
                eprintln!("warning: skipping {} sample {index}: {reason}", ep.file);
            }
            Err(reason) => {
                return Err(DataError::CorruptSample { file: ep.file.clone(), index, reason })
            }
        }
    }
    Ok(out)
}

/// Strides every episode and splits train/validation.
///
/// With two or more episodes, whole episodes are held out (every
/// `val_episode_stride`-th, or the last one when the stride exceeds the
/// count) so validation never sees near-duplicates of training ticks. A
/// single episode falls back to an 80/20 tail split.
pub fn build_splits(
    episodes: &[EpisodeSamples],
    sample_stride: usize,
    val_episode_stride: usize,
    front_cfg: &GridConfig,
    bev_cfg: &GridConfig,
    use_logged_commands: bool,
    skip_corrupt: bool,
) -> Result<(Vec<TrainSample>, Vec<TrainSample>), DataError> {
    let convert = |ep: &EpisodeSamples| {
        episode_to_samples(ep, sample_stride, front_cfg, bev_cfg, use_logged_commands, skip_corrupt)
    };

    if episodes.len() >= 2 {
        let stride = val_episode_stride.max(2);
        let mut val_indices: Vec<usize> =
            (0..episodes.len()).filter(|i| (i + 1) % stride == 0).collect();
        if val_indices.is_empty() {
            val_indices.push(episodes.len() - 1);
        }
        let mut train = Vec::new();
        let mut val = Vec::new();
        for (i, ep) in episodes.iter().enumerate() {
            let samples = convert(ep)?;
            if val_indices.contains(&i) {
                val.extend(samples);
            } else {
                train.extend(samples);
            }
        }
        if train.is_empty() || val.is_empty() {
            return Err(DataError::TooFewSamples(train.len() + val.len()));
        }
        return Ok((train, val));
    }

    let ep = episodes.first().ok_or_else(|| DataError::Empty("dataset".into()))?;
    let mut samples = convert(ep)?;
    if samples.len() < 2 {
        return Err(DataError::TooFewSamples(samples.len()));
    }
    let val_len = (samples.len() / 5).max(1);
    let val = samples.split_off(samples.len() - val_len);
    Ok((samples, val))
}
