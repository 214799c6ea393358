//! Behavior-cloning trainer: weighted three-task L1 loss, gradient-norm
//! balanced loss weights, AdamW with plateau lr halving and early stopping,
//! seeded shuffling with replayable permutations, JSONL run logging, and
//! best-validation checkpointing.
//!
//! Loss-weight balancing: per batch, the norm of each task's weighted
//! gradient is measured on the fusion dense layer (the last shared layer
//! before the decode heads); weights are nudged by `(mean/norm)^p` with an
//! EMA over norms, then renormalized so they always sum to 3. The fixed
//! point is all tasks pulling on the shared trunk equally hard.

use std::fs;
use std::io::Write as _;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha20Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::controller::Command;
use crate::geonav::LocalPoint;
use crate::model::{Model, ModelConfig, ModelError, ModelOutput, ObservationInput, TracedOutput};
use crate::projection::SparseGrid;
use crate::scalar::Scalar;
use crate::tensorgrad::checkpoint::{self, CheckpointError};
use crate::tensorgrad::{adamw_step, AdamWConfig, AdamWState, Grads, Tape, Tensor, Var};

pub const ALPHA_SUM: f64 = 3.0;
const NORM_FLOOR: f64 = 1e-8;

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("model error: {0}")]
    Model(#[from] ModelError),
    #[error("checkpoint error: {0}")]
    Checkpoint(#[from] CheckpointError),
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
    #[error("serialization error: {0}")]
    Serialize(#[from] serde_json::Error),
    #[error("{which} split is empty")]
    EmptySplit { which: &'static str },
    #[error(
        "non-finite loss at epoch {epoch}, batch {batch}; sample indices {indices:?}{}",
        dump.as_ref().map(|p| format!("; diagnostics at {}", p.display())).unwrap_or_default()
    )]
    NonFiniteLoss {
        epoch: usize,
        batch: usize,
        indices: Vec<usize>,
        dump: Option<PathBuf>,
    },
}

/// Per-task loss weights, always positive and summing to 3.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossWeights(pub [f64; 3]);

impl LossWeights {
    pub fn new(raw: [f64; 3]) -> Self {
        assert!(raw.iter().all(|&a| a > 0.0), "loss weights must be positive");
        let sum: f64 = raw.iter().sum();
        LossWeights([
            raw[0] / sum * ALPHA_SUM,
            raw[1] / sum * ALPHA_SUM,
            raw[2] / sum * ALPHA_SUM,
        ])
    }

    pub fn uniform() -> Self {
        LossWeights([1.0, 1.0, 1.0])
    }
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights::uniform()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MgnConfig {
    pub enabled: bool,
    /// Restoring exponent on the norm ratio.
    pub p: f64,
    /// EMA factor on the per-task norms; 0 disables smoothing.
    pub smoothing: f64,
}

impl Default for MgnConfig {
    fn default() -> Self {
        MgnConfig { enabled: true, p: 0.5, smoothing: 0.9 }
    }
}

/// Smoothed per-task gradient norms.
#[derive(Debug, Clone, Copy, Default, Serialize, Deserialize)]
pub struct MgnState {
    smoothed: Option<[f64; 3]>,
}

/// One balancing step from fresh per-task gradient norms; returns updated
/// weights with the sum-3 invariant restored.
pub fn mgn_update(
    state: &mut MgnState,
    cfg: &MgnConfig,
    norms: [f64; 3],
    alpha: LossWeights,
) -> LossWeights {
    let mut sm = match state.smoothed {
        Some(prev) => {
            let mut s = [0.0; 3];
            for k in 0..3 {
                s[k] = cfg.smoothing * prev[k] + (1.0 - cfg.smoothing) * norms[k];
            }
            s
        }
        None => norms,
    };
    for v in &mut sm {
        *v = v.max(NORM_FLOOR);
    }
    state.smoothed = Some(sm);
    let mean = (sm[0] + sm[1] + sm[2]) / 3.0;
    let raw = [
        alpha.0[0] * (mean / sm[0]).powf(cfg.p),
        alpha.0[1] * (mean / sm[1]).powf(cfg.p),
        alpha.0[2] * (mean / sm[2]).powf(cfg.p),
    ];
    LossWeights::new(raw)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub batch_size: usize,
    pub lr: f64,
    pub weight_decay: f64,
    /// Consecutive stalled validation epochs before the lr halves.
    pub plateau_patience: usize,
    /// Stalled epochs since the best validation loss before training stops.
    pub early_stop_patience: usize,
    pub max_epochs: usize,
    pub seed: u64,
    pub init_alpha: [f64; 3],
    pub mgn: MgnConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            batch_size: 10,
            lr: 1e-4,
            weight_decay: 1e-3,
            plateau_patience: 5,
            early_stop_patience: 30,
            max_epochs: 200,
            seed: 0,
            init_alpha: [1.0, 1.0, 1.0],
            mgn: MgnConfig::default(),
        }
    }
}

/// Validation-driven lr halving and early stopping. Improvement means a new
/// strict minimum; ties stall.
#[derive(Debug, Clone, Copy)]
pub struct PlateauSchedule {
    pub lr: f64,
    plateau_patience: usize,
    early_stop_patience: usize,
    best: Option<f64>,
    stalls_since_best: usize,
    stalls_since_halve: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ScheduleStep {
    pub improved: bool,
    pub halved: bool,
    pub stop: bool,
}

impl PlateauSchedule {
    pub fn new(lr: f64, plateau_patience: usize, early_stop_patience: usize) -> Self {
        assert!(plateau_patience > 0 && early_stop_patience > 0);
        PlateauSchedule {
            lr,
            plateau_patience,
            early_stop_patience,
            best: None,
            stalls_since_best: 0,
            stalls_since_halve: 0,
        }
    }

    pub fn best(&self) -> Option<f64> {
        self.best
    }

    pub fn observe(&mut self, val: f64) -> ScheduleStep {
        let improved = self.best.map_or(true, |b| val < b);
        let mut halved = false;
        if improved {
            self.best = Some(val);
            self.stalls_since_best = 0;
            self.stalls_since_halve = 0;
        } else {
            self.stalls_since_best += 1;
            self.stalls_since_halve += 1;
            if self.stalls_since_halve == self.plateau_patience {
                self.lr *= 0.5;
                self.stalls_since_halve = 0;
                halved = true;
            }
        }
        ScheduleStep {
            improved,
            halved,
            stop: self.stalls_since_best >= self.early_stop_patience,
        }
    }
}

/// One supervised sample: sensor inputs plus the expert's ground truth.
#[derive(Debug, Clone)]
pub struct TrainSample {
    pub front: SparseGrid,
    pub bev: SparseGrid,
    pub rp1: LocalPoint,
    pub rp2: LocalPoint,
    pub omega_l: f64,
    pub omega_r: f64,
    pub command: Command,
    pub target_waypoints: [LocalPoint; 3],
    pub target_steering: f64,
    pub target_throttle: f64,
}

impl TrainSample {
    pub fn target_wp_flat(&self) -> [f64; 6] {
        let w = &self.target_waypoints;
        [w[0].x, w[0].y, w[1].x, w[1].y, w[2].x, w[2].y]
    }
}

/// Raw (unweighted) per-task L1 losses for one sample or a split mean.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct TaskLosses {
    pub wp: f64,
    pub st: f64,
    pub th: f64,
}

impl TaskLosses {
    /// Unweighted sum — the offline "total metric".
    pub fn sum(&self) -> f64 {
        self.wp + self.st + self.th
    }

    pub fn weighted(&self, alpha: LossWeights) -> f64 {
        alpha.0[0] * self.wp + alpha.0[1] * self.st + alpha.0[2] * self.th
    }
}

/// Value-level multi-task loss: waypoint error averaged over its 6
/// components, control errors taken bare.
pub fn mtl_loss_value(out: &ModelOutput, sample: &TrainSample) -> TaskLosses {
    let target = sample.target_wp_flat();
    let pred = [
        out.waypoints[0].x,
        out.waypoints[0].y,
        out.waypoints[1].x,
        out.waypoints[1].y,
        out.waypoints[2].x,
        out.waypoints[2].y,
    ];
    let mut wp = 0.0;
    for i in 0..6 {
        wp += (pred[i] - target[i]).abs();
    }
    TaskLosses {
        wp: wp / 6.0,
        st: (out.steering - sample.target_steering).abs(),
        th: (out.throttle - sample.target_throttle).abs(),
    }
}

/// Per-epoch record; one JSON line each in the run log.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochStats {
    pub epoch: usize,
    /// Learning rate used for this epoch's steps.
    pub lr: f64,
    /// Loss weights at the end of the epoch.
    pub alpha: [f64; 3],
    pub shuffle_seed: u64,
    pub train: TaskLosses,
    pub train_weighted: f64,
    pub val: TaskLosses,
    pub val_weighted: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CheckpointMeta {
    pub epoch: usize,
    pub val: TaskLosses,
    pub val_weighted: f64,
    pub alpha: [f64; 3],
    pub model_config: ModelConfig,
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub epochs_run: usize,
    pub best_epoch: usize,
    pub best_val_weighted: f64,
    pub best_val: TaskLosses,
    pub best_alpha: LossWeights,
    pub final_alpha: LossWeights,
    pub curve: Vec<EpochStats>,
}

struct SampleEval<S: Scalar> {
    losses: TaskLosses,
    weighted: f64,
    grads: Grads<S>,
    task_partials: Option<[Grads<S>; 3]>,
}

/// Traced weighted loss for one sample; returns the raw task-loss vars too.
fn traced_losses<S: Scalar>(
    tape: &mut Tape<'_, S>,
    traced: &TracedOutput,
    sample: &TrainSample,
    alpha: LossWeights,
) -> Result<(Var, [Var; 3]), ModelError> {
    let ctx = |source| ModelError::Shape { context: "loss", source };
    let wp_t = sample.target_wp_flat().map(S::cast_from);
    let wp_target = tape.vector(&wp_t);
    let st_target = tape.vector(&[S::cast_from(sample.target_steering)]);
    let th_target = tape.vector(&[S::cast_from(sample.target_throttle)]);
    let lwp = tape.l1_mean(traced.waypoint_vec, wp_target).map_err(ctx)?;
    let lst = tape.l1_mean(traced.steering, st_target).map_err(ctx)?;
    let lth = tape.l1_mean(traced.throttle, th_target).map_err(ctx)?;
    let swp = tape.scale(lwp, S::cast_from(alpha.0[0]));
    let sst = tape.scale(lst, S::cast_from(alpha.0[1]));
    let sth = tape.scale(lth, S::cast_from(alpha.0[2]));
    let partial = tape.add(swp, sst).map_err(ctx)?;
    let total = tape.add(partial, sth).map_err(ctx)?;
    Ok((total, [swp, sst, sth]))
}

fn eval_sample<S: Scalar>(
    model: &Model<S>,
    sample: &TrainSample,
    alpha: LossWeights,
    want_partials: bool,
) -> Result<SampleEval<S>, TrainError> {
    let front = sample.front.to_grid();
    let bev = sample.bev.to_grid();
    let obs = ObservationInput {
        front: &front,
        bev: &bev,
        rp1: sample.rp1,
        rp2: sample.rp2,
        omega_l: sample.omega_l,
        omega_r: sample.omega_r,
        command: sample.command,
    };
    let mut tape = Tape::new(&model.params);
    // the trainer polices non-finite losses itself, with batch context
    tape.set_finite_checks(false);
    let traced = model.forward_on(&mut tape, &obs)?;
    let (total, weighted_tasks) = traced_losses(&mut tape, &traced, sample, alpha)?;
    let losses = mtl_loss_value(&traced.output, sample);
    let weighted = tape.value(total).item().cast_f64();
    let grads = tape
        .backward(total)
        .map_err(|source| ModelError::Shape { context: "backward", source })?;
    let task_partials = if want_partials {
        let watched = model.fusion_dense_ids();
        let mut parts = Vec::with_capacity(3);
        for task in weighted_tasks {
            parts.push(
                tape.backward_partial(task, &watched)
                    .map_err(|source| ModelError::Shape { context: "task norms", source })?,
            );
        }
        let [a, b, c]: [Grads<S>; 3] = parts.try_into().ok().expect("three tasks");
        Some([a, b, c])
    } else {
        None
    };
    Ok(SampleEval { losses, weighted, grads, task_partials })
}

/// Dataset-averaged per-task MAEs.
pub fn evaluate_split<S: Scalar>(
    model: &Model<S>,
    split: &[TrainSample],
) -> Result<TaskLosses, TrainError> {
    if split.is_empty() {
        return Err(TrainError::EmptySplit { which: "evaluation" });
    }
    let mut sum = TaskLosses::default();
    for sample in split {
        let front = sample.front.to_grid();
        let bev = sample.bev.to_grid();
        let out = model.forward(&ObservationInput {
            front: &front,
            bev: &bev,
            rp1: sample.rp1,
            rp2: sample.rp2,
            omega_l: sample.omega_l,
            omega_r: sample.omega_r,
            command: sample.command,
        })?;
        let l = mtl_loss_value(&out, sample);
        sum.wp += l.wp;
        sum.st += l.st;
        sum.th += l.th;
    }
    let n = split.len() as f64;
    Ok(TaskLosses { wp: sum.wp / n, st: sum.st / n, th: sum.th / n })
}

fn epoch_shuffle_seed(seed: u64, epoch: usize) -> u64 {
    // splitmix64 of (seed, epoch) so each epoch's permutation is replayable
    let mut z = seed ^ (epoch as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Runs the full recipe, mutating `model` in place. On return the model
/// holds the best-validation parameters; when `run_dir` is given, the best
/// checkpoint, its metadata, and a JSONL curve are persisted there.
pub fn train<S: Scalar>(
    model: &mut Model<S>,
    train_split: &[TrainSample],
    val_split: &[TrainSample],
    cfg: &TrainConfig,
    run_dir: Option<&Path>,
) -> Result<TrainOutcome, TrainError> {
    if train_split.is_empty() {
        return Err(TrainError::EmptySplit { which: "train" });
    }
    if val_split.is_empty() {
        return Err(TrainError::EmptySplit { which: "validation" });
    }
    if let Some(dir) = run_dir {
        fs::create_dir_all(dir)?;
    }
    let mut log = match run_dir {
        Some(dir) => Some(fs::File::create(dir.join("run.jsonl"))?),
        None => None,
    };

    let mut alpha = LossWeights::new(cfg.init_alpha);
    let mut mgn_state = MgnState::default();
    let mut schedule = PlateauSchedule::new(cfg.lr, cfg.plateau_patience, cfg.early_stop_patience);
    let mut adamw = AdamWState::new(&model.params);

    let mut best_params: Vec<Tensor<S>> = Vec::new();
    let mut best_epoch = 0usize;
    let mut best_val = TaskLosses::default();
    let mut best_val_weighted = f64::INFINITY;
    let mut best_alpha = alpha;
    let mut curve: Vec<EpochStats> = Vec::new();

    let mut indices: Vec<usize> = (0..train_split.len()).collect();
    let mut epochs_run = 0usize;

    for epoch in 1..=cfg.max_epochs {
        epochs_run = epoch;
        let shuffle_seed = epoch_shuffle_seed(cfg.seed, epoch);
        let mut rng = ChaCha20Rng::seed_from_u64(shuffle_seed);
        indices.shuffle(&mut rng);

        let lr_used = schedule.lr;
        let opt_cfg = AdamWConfig::new(S::cast_from(lr_used), S::cast_from(cfg.weight_decay));
        let mut train_sum = TaskLosses::default();
        let mut train_weighted_sum = 0.0f64;

        for (batch_idx, batch) in indices.chunks(cfg.batch_size).enumerate() {
            // per-sample work is independent; the reduction below is in
            // batch order, so the epoch is deterministic regardless
            let evals: Vec<SampleEval<S>> = batch
                .iter()
                .map(|&i| eval_sample(model, &train_split[i], alpha, cfg.mgn.enabled))
                .collect::<Result<_, _>>()?;

            if evals.iter().any(|e| !e.weighted.is_finite()) {
                let dump = if let Some(dir) = run_dir {
                    let path = dir.join("nan_dump.json");
                    let detail = serde_json::json!({
                        "epoch": epoch,
                        "batch": batch_idx,
                        "sample_indices": batch,
                        "per_sample_weighted": evals.iter().map(|e| e.weighted).collect::<Vec<_>>(),
                        "alpha": alpha.0,
                        "lr": lr_used,
                    });
                    fs::write(&path, serde_json::to_vec_pretty(&detail)?)?;
                    Some(path)
                } else {
                    None
                };
                return Err(TrainError::NonFiniteLoss {
                    epoch,
                    batch: batch_idx,
                    indices: batch.to_vec(),
                    dump,
                });
            }

            let inv_n = S::cast_from(1.0 / batch.len() as f64);
            let mut grad_acc = Grads::zeros_like(&model.params);
            for e in &evals {
                grad_acc.add_scaled(&e.grads, inv_n);
            }
            adamw_step(&mut model.params, &grad_acc, &mut adamw, &opt_cfg);

            if cfg.mgn.enabled {
                let watched = model.fusion_dense_ids();
                let mut norms = [0.0f64; 3];
                for k in 0..3 {
                    let mut acc = Grads::zeros_like(&model.params);
                    for e in &evals {
                        acc.add_scaled(&e.task_partials.as_ref().expect("partials requested")[k], inv_n);
                    }
                    norms[k] = acc.norm_over(&watched).cast_f64();
                }
                alpha = mgn_update(&mut mgn_state, &cfg.mgn, norms, alpha);
            }

            for e in &evals {
                train_sum.wp += e.losses.wp;
                train_sum.st += e.losses.st;
                train_sum.th += e.losses.th;
                train_weighted_sum += e.weighted;
            }
        }

        let n_train = train_split.len() as f64;
        let train_losses = TaskLosses {
            wp: train_sum.wp / n_train,
            st: train_sum.st / n_train,
            th: train_sum.th / n_train,
        };
        let val_losses = evaluate_split(model, val_split)?;
        let val_weighted = val_losses.weighted(alpha);

        let step = schedule.observe(val_weighted);
        if step.improved {
            best_params = model.params.iter().map(|(_, t)| t.clone()).collect();
            best_epoch = epoch;
            best_val = val_losses;
            best_val_weighted = val_weighted;
            best_alpha = alpha;
            if let Some(dir) = run_dir {
                checkpoint::save(&model.params, &dir.join("best.ckpt"))?;
                let meta = CheckpointMeta {
                    epoch,
                    val: val_losses,
                    val_weighted,
                    alpha: alpha.0,
                    model_config: model.config.clone(),
                };
                fs::write(dir.join("best.json"), serde_json::to_vec_pretty(&meta)?)?;
            }
        }

        let stats = EpochStats {
            epoch,
            lr: lr_used,
            alpha: alpha.0,
            shuffle_seed,
            train: train_losses,
            train_weighted: train_weighted_sum / n_train,
            val: val_losses,
            val_weighted,
        };
        if let Some(f) = log.as_mut() {
            let mut line = serde_json::to_vec(&stats)?;
            line.push(b'\n');
            f.write_all(&line)?;
        }
        curve.push(stats);

        if step.stop {
            break;
        }
    }

    // leave the model holding the deployed (best-validation) parameters
    let ids: Vec<_> = model.params.ids().collect();
    for (id, tensor) in ids.into_iter().zip(best_params) {
        *model.params.value_mut(id) = tensor;
    }

    Ok(TrainOutcome {
        epochs_run,
        best_epoch,
        best_val_weighted,
        best_val,
        best_alpha,
        final_alpha: alpha,
        curve,
    })
}

/// Writes the training curve as CSV with a fixed column order.
pub fn write_curve_csv(path: &Path, curve: &[EpochStats]) -> Result<(), std::io::Error> {
    let mut out = String::from(
        "epoch,lr,alpha_wp,alpha_st,alpha_th,shuffle_seed,train_wp,train_st,train_th,train_weighted,val_wp,val_st,val_th,val_weighted\n",
    );
    for s in curve {
        out.push_str(&format!(
            "{},{},{},{},{},{},{},{},{},{},{},{},{},{}\n",
            s.epoch,
            s.lr,
            s.alpha[0],
            s.alpha[1],
            s.alpha[2],
            s.shuffle_seed,
            s.train.wp,
            s.train.st,
            s.train.th,
            s.train_weighted,
            s.val.wp,
            s.val.st,
            s.val.th,
            s.val_weighted,
        ));
    }
    fs::write(path, out)
}
