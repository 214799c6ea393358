use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{anyhow, bail, Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};

use lidarpilot_cli::config::{grid_configs, load_config, PipelineConfig};
use lidarpilot_cli::dataset::{build_splits, load_episodes, EpisodeSamples};
use lidarpilot_cli::offline::{
    best_constant, load_all_episodes, offline_eval, OfflineOptions, Predictor,
};
use lidarpilot_cli::online::{
    mix_seed, online_eval, write_drive_manifest, DrivePolicy, LearnedSpec, OnlinePlan,
};
use lidarpilot_cli::report::{format_offline_csv, format_online_csv};
use lidarpilot_core::controller::{init_control_weights, PidState};
use lidarpilot_core::model::{Model, Perspective};
use lidarpilot_core::projection::{
    class_palette, project_bev, project_front, save_grid, write_grid_image, LabeledPointCloud,
};
use lidarpilot_core::tensorgrad::checkpoint::{restore, save};
use lidarpilot_core::trainer::{
    evaluate_split, train, write_curve_csv, CheckpointMeta, LossWeights,
};
use lidarpilot_sim::log::read_episode_log;
use lidarpilot_sim::scenes::{CampusVariant, DatasetSpec, generate_dataset};

#[derive(Parser)]
#[command(
    name = "lidarpilot",
    version,
    about = "LiDAR-to-control driving stack: dataset generation, behavior cloning, and offline/closed-loop evaluation"
)]
struct Cli {
    /// JSON pipeline config; omitted sections use built-in defaults
    #[arg(long, global = true, value_name = "JSON")]
    config: Option<PathBuf>,
    /// Overrides the config's master seed
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Root directory for datasets, runs, and reports
    #[arg(long, global = true, default_value = "runs", value_name = "DIR")]
    out_dir: PathBuf,
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Drive the scripted expert to generate training and held-out test logs
    GenData(GenDataArgs),
    /// Behavior-clone the model on generated episode logs
    Train(TrainArgs),
    /// Replay test logs through checkpoints and report per-task errors
    EvalOffline(EvalOfflineArgs),
    /// Drive policies closed-loop and count safety takeovers
    Drive(DriveArgs),
    /// Rasterize one logged scan into grid files and images
    Project(ProjectArgs),
}

#[derive(Args)]
struct GenDataArgs {
    /// Generate only the training split
    #[arg(long, conflicts_with = "test_only")]
    train_only: bool,
    /// Generate only the held-out test split
    #[arg(long)]
    test_only: bool,
}

#[derive(Args)]
struct TrainArgs {
    /// Dataset directory (defaults to <out-dir>/data/train)
    #[arg(long, value_name = "DIR")]
    data: Option<PathBuf>,
    /// Run name; outputs land in <out-dir>/<NAME>
    #[arg(long, default_value = "full", value_name = "NAME")]
    name: String,
    /// Which grid branches feed the fusion stage
    #[arg(long, value_enum)]
    perspective: Option<PerspectiveArg>,
    /// Cap on training epochs (overrides the config recipe)
    #[arg(long)]
    epochs: Option<usize>,
    /// Trust logged discrete commands instead of re-deriving them
    #[arg(long)]
    use_logged_commands: bool,
}

#[derive(Args)]
struct EvalOfflineArgs {
    /// Checkpoint file(s); metadata is read from the sibling .json
    #[arg(long = "checkpoint", value_name = "CKPT", required = true)]
    checkpoints: Vec<PathBuf>,
    /// Test dataset directory (defaults to <out-dir>/data/test)
    #[arg(long, value_name = "DIR")]
    data: Option<PathBuf>,
    /// Also score the best constant predictor fitted to the test targets
    #[arg(long)]
    baseline: bool,
    /// Trust logged discrete commands instead of re-deriving them
    #[arg(long)]
    use_logged_commands: bool,
    /// Skip corrupt records instead of aborting
    #[arg(long)]
    skip_corrupt: bool,
}

#[derive(Args)]
struct DriveArgs {
    /// Checkpoint(s) to drive
    #[arg(long = "checkpoint", value_name = "CKPT")]
    checkpoints: Vec<PathBuf>,
    /// Also score the scripted reference driver as a candidate
    #[arg(long)]
    expert: bool,
    /// Campus variant (defaults to the held-out test map)
    #[arg(long, value_enum)]
    scene: Option<SceneArg>,
    /// Route indices (defaults to the config's list)
    #[arg(long, value_delimiter = ',', value_name = "IDX")]
    routes: Vec<usize>,
    /// Episodes per (condition, route)
    #[arg(long)]
    repeats: Option<usize>,
    /// Traffic conditions (defaults to the config's list)
    #[arg(long, value_delimiter = ',', value_name = "NAME")]
    conditions: Vec<String>,
    /// Skip writing replay logs
    #[arg(long)]
    no_replay_logs: bool,
}

#[derive(Args)]
struct ProjectArgs {
    /// Episode log to read
    #[arg(long, value_name = "LOG")]
    log: PathBuf,
    /// Sample index within the log
    #[arg(long, default_value_t = 0)]
    sample: usize,
}

#[derive(Clone, Copy, ValueEnum)]
enum PerspectiveArg {
    Both,
    FrontOnly,
    BevOnly,
}

impl From<PerspectiveArg> for Perspective {
    fn from(p: PerspectiveArg) -> Self {
        match p {
            PerspectiveArg::Both => Perspective::Both,
            PerspectiveArg::FrontOnly => Perspective::FrontOnly,
            PerspectiveArg::BevOnly => Perspective::BevOnly,
        }
    }
}

#[derive(Clone, Copy, ValueEnum)]
enum SceneArg {
    North,
    South,
    East,
}

impl From<SceneArg> for CampusVariant {
    fn from(s: SceneArg) -> Self {
        match s {
            SceneArg::North => CampusVariant::North,
            SceneArg::South => CampusVariant::South,
            SceneArg::East => CampusVariant::East,
        }
    }
}

fn main() {
    if let Err(e) = run() {
        eprintln!("error: {e:#}");
        std::process::exit(1);
    }
}

fn run() -> Result<()> {
    let cli = Cli::parse();
    let cfg = load_config(cli.config.as_deref())?;
    match &cli.cmd {
        Cmd::GenData(args) => gen_data(&cli, &cfg, args),
        Cmd::Train(args) => run_train(&cli, &cfg, args),
        Cmd::EvalOffline(args) => eval_offline(&cli, &cfg, args),
        Cmd::Drive(args) => drive(&cli, &cfg, args),
        Cmd::Project(args) => project(&cli, &cfg, args),
    }
}

fn gen_data(cli: &Cli, cfg: &PipelineConfig, args: &GenDataArgs) -> Result<()> {
    let master = cli.seed.unwrap_or(cfg.sim.master_seed);
    let conditions = cfg.sim.conditions()?;
    let data_dir = cli.out_dir.join("data");

    if !args.test_only {
        let spec = DatasetSpec {
            variants: cfg.sim.train_variants.clone(),
            route_indices: cfg.sim.route_indices.clone(),
            conditions: conditions.clone(),
            episode: cfg.sim.episode(&cfg.lidar.0, master),
            master_seed: master,
        };
        let dir = data_dir.join("train");
        let manifest = generate_dataset(&spec, &dir)?;
        summarize_split("train", &dir, manifest.episodes.len(), &manifest);
    }

    if !args.train_only {
        for k in 0..cfg.sim.test_repeats {
            let spec = DatasetSpec {
                variants: vec![cfg.sim.test_variant],
                route_indices: cfg.sim.route_indices.clone(),
                conditions: conditions.clone(),
                episode: cfg.sim.episode(&cfg.lidar.0, master),
                master_seed: mix_seed(master, 0x7E57_0000 + k as u64),
            };
            let dir = data_dir.join("test").join(format!("rep{k}"));
            let manifest = generate_dataset(&spec, &dir)?;
            summarize_split(&format!("test rep{k}"), &dir, manifest.episodes.len(), &manifest);
        }
    }
    Ok(())
}

fn summarize_split(
    label: &str,
    dir: &Path,
    episodes: usize,
    manifest: &lidarpilot_sim::scenes::DatasetManifest,
) {
    let ticks: usize = manifest.episodes.iter().map(|e| e.ticks).sum();
    let interventions: u32 = manifest.episodes.iter().map(|e| e.interventions).sum();
    let unfinished = manifest.episodes.iter().filter(|e| !e.finished).count();
    println!(
        "{label}: {episodes} episodes, {ticks} ticks, {interventions} interventions, \
         {unfinished} unfinished -> {}",
        dir.display()
    );
}

fn run_train(cli: &Cli, cfg: &PipelineConfig, args: &TrainArgs) -> Result<()> {
    let mut model_cfg = cfg.model.0.clone();
    if let Some(p) = args.perspective {
        model_cfg.perspective = p.into();
    }
    let mut recipe = cfg.train.recipe.clone();
    if let Some(e) = args.epochs {
        recipe.max_epochs = e;
    }
    if let Some(s) = cli.seed {
        recipe.seed = s;
    }

    let data_dir = args.data.clone().unwrap_or_else(|| cli.out_dir.join("data").join("train"));
    let episodes = load_episodes(&data_dir, cfg.eval.skip_corrupt)?;
    let (front_cfg, bev_cfg) = grid_configs(&model_cfg);
    let (train_split, val_split) = build_splits(
        &episodes,
        cfg.train.sample_stride,
        cfg.train.val_episode_stride,
        &front_cfg,
        &bev_cfg,
        args.use_logged_commands,
        cfg.eval.skip_corrupt,
    )?;
    println!(
        "dataset: {} train / {} val samples from {} episodes",
        train_split.len(),
        val_split.len(),
        episodes.len()
    );

    let run_dir = cli.out_dir.join(&args.name);
    fs::create_dir_all(&run_dir)?;
    let mut model: Model<f32> = Model::new(model_cfg.clone(), recipe.seed)?;
    println!("model: {} parameters ({:?})", model.param_count(), model_cfg.perspective);

    // snapshot the untrained weights so closed-loop runs can compare against
    // the same initialization the trained checkpoint started from
    let init_alpha = LossWeights::new(recipe.init_alpha);
    let init_val = evaluate_split(&model, &val_split)?;
    save(&model.params, &run_dir.join("init.ckpt"))?;
    let init_meta = CheckpointMeta {
        epoch: 0,
        val: init_val,
        val_weighted: init_val.weighted(init_alpha),
        alpha: init_alpha.0,
        model_config: model_cfg.clone(),
    };
    fs::write(run_dir.join("init.json"), serde_json::to_string_pretty(&init_meta)?)?;

    let outcome = train(&mut model, &train_split, &val_split, &recipe, Some(&run_dir))?;
    write_curve_csv(&run_dir.join("curve.csv"), &outcome.curve)?;
    println!(
        "trained {} epochs; best epoch {} val wp {:.4} st {:.4} th {:.4} (weighted {:.5}) -> {}",
        outcome.epochs_run,
        outcome.best_epoch,
        outcome.best_val.wp,
        outcome.best_val.st,
        outcome.best_val.th,
        outcome.best_val_weighted,
        run_dir.display()
    );
    Ok(())
}

fn checkpoint_label(path: &Path) -> String {
    let stem = path
        .file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_else(|| "model".into());
    match path.parent().and_then(|p| p.file_name()) {
        Some(dir) => format!("{}/{}", dir.to_string_lossy(), stem),
        None => stem,
    }
}

fn load_checkpoint(path: &Path) -> Result<(String, Model<f32>, CheckpointMeta)> {
    let meta_path = path.with_extension("json");
    let text = fs::read_to_string(&meta_path)
        .with_context(|| format!("reading checkpoint metadata {}", meta_path.display()))?;
    let meta: CheckpointMeta = serde_json::from_str(&text)
        .with_context(|| format!("parsing checkpoint metadata {}", meta_path.display()))?;
    let mut model = Model::new(meta.model_config.clone(), 0)?;
    restore(&mut model.params, path)
        .with_context(|| format!("restoring weights from {}", path.display()))?;
    Ok((checkpoint_label(path), model, meta))
}

fn eval_offline(cli: &Cli, cfg: &PipelineConfig, args: &EvalOfflineArgs) -> Result<()> {
    let data_dir = args.data.clone().unwrap_or_else(|| cli.out_dir.join("data").join("test"));
    let mut loaded = Vec::new();
    for path in &args.checkpoints {
        loaded.push(load_checkpoint(path)?);
    }
    let first = &loaded[0].1.config;
    for (label, model, _) in &loaded {
        if model.config.front.input != first.front.input || model.config.bev.input != first.bev.input
        {
            bail!("checkpoint {label} expects different grid dims; score it in a separate run");
        }
    }
    let (front, bev) = grid_configs(first);
    let opts = OfflineOptions {
        front,
        bev,
        use_logged_commands: args.use_logged_commands || cfg.eval.use_logged_commands,
        skip_corrupt: args.skip_corrupt || cfg.eval.skip_corrupt,
    };

    let mut predictors: Vec<(&str, &dyn Predictor)> = loaded
        .iter()
        .map(|(label, model, _)| (label.as_str(), model as &dyn Predictor))
        .collect();
    let all_episodes;
    let constant;
    if args.baseline {
        all_episodes = load_all_episodes(&data_dir, opts.skip_corrupt)?;
        let refs: Vec<&EpisodeSamples> = all_episodes.iter().collect();
        constant = best_constant(&refs);
        predictors.push(("constant", &constant));
    }

    let report = offline_eval(&predictors, &data_dir, &opts)?;
    let csv = format_offline_csv(&report.rows, report.repeats);
    fs::create_dir_all(&cli.out_dir)?;
    let out = cli.out_dir.join("offline_report.csv");
    fs::write(&out, &csv)?;
    print!("{csv}");
    println!("wrote {}", out.display());
    Ok(())
}

fn drive(cli: &Cli, cfg: &PipelineConfig, args: &DriveArgs) -> Result<()> {
    if args.checkpoints.is_empty() && !args.expert {
        bail!("nothing to drive: pass --checkpoint and/or --expert");
    }
    let mut loaded = Vec::new();
    for path in &args.checkpoints {
        loaded.push(load_checkpoint(path)?);
    }

    let mut sim = cfg.sim.clone();
    if !args.conditions.is_empty() {
        sim.conditions = args.conditions.clone();
    }
    let master = cli.seed.unwrap_or(sim.master_seed);
    let plan = OnlinePlan {
        variant: args.scene.map(Into::into).unwrap_or(sim.test_variant),
        routes: if args.routes.is_empty() { sim.route_indices.clone() } else { args.routes.clone() },
        conditions: sim.conditions()?,
        repeats: args.repeats.unwrap_or(cfg.eval.repeats),
        timeout_factor: cfg.eval.timeout_factor,
        master_seed: master,
        episode: sim.episode(&cfg.lidar.0, master),
        vehicle: sim.vehicle,
    };

    let g = cfg.controller.lateral_gains;
    let lateral = PidState::new(g[0], g[1], g[2], (-1.0, 1.0));
    let g = cfg.controller.longitudinal_gains;
    let longitudinal = PidState::new(g[0], g[1], g[2], (0.0, 1.0));
    let mut policies: Vec<(String, DrivePolicy)> = Vec::new();
    if args.expert {
        policies.push(("expert".into(), DrivePolicy::Expert));
    }
    for (label, model, meta) in &loaded {
        policies.push((
            label.clone(),
            DrivePolicy::Learned(LearnedSpec {
                model,
                weights: init_control_weights(meta.alpha),
                lateral,
                longitudinal,
                wheel_radius_m: cfg.controller.wheel_radius_m,
            }),
        ));
    }
    let policy_refs: Vec<(&str, DrivePolicy)> =
        policies.iter().map(|(n, p)| (n.as_str(), *p)).collect();

    let replay_dir = (!args.no_replay_logs).then(|| cli.out_dir.join("replays"));
    let result = online_eval(&plan, &policy_refs, replay_dir.as_deref())?;
    if let Some(dir) = &replay_dir {
        write_drive_manifest(dir, &result.episodes)?;
    }
    let csv = format_online_csv(&result.rows, result.routes, result.repeats);
    fs::create_dir_all(&cli.out_dir)?;
    let out = cli.out_dir.join("online_report.csv");
    fs::write(&out, &csv)?;
    print!("{csv}");
    println!("wrote {}", out.display());
    Ok(())
}

fn project(cli: &Cli, cfg: &PipelineConfig, args: &ProjectArgs) -> Result<()> {
    let samples = read_episode_log(&args.log)?;
    let sample = samples
        .get(args.sample)
        .ok_or_else(|| anyhow!("log has {} samples, asked for index {}", samples.len(), args.sample))?;
    let cloud = LabeledPointCloud { points: sample.points.clone(), timestamp: sample.timestamp };
    let (front_cfg, bev_cfg) = grid_configs(&cfg.model.0);
    let front = project_front(&cloud, &front_cfg);
    let bev = project_bev(&cloud, &bev_cfg);

    fs::create_dir_all(&cli.out_dir)?;
    let palette = class_palette();
    save_grid(&cli.out_dir.join("front.dpg2"), &front)?;
    save_grid(&cli.out_dir.join("bev.dpg2"), &bev)?;
    write_grid_image(&front, &palette, &cli.out_dir.join("front.png"))?;
    write_grid_image(&bev, &palette, &cli.out_dir.join("bev.png"))?;
    println!(
        "projected {} points: front {}x{}, bev {}x{} -> {}",
        cloud.points.len(),
        front_cfg.height,
        front_cfg.width,
        bev_cfg.height,
        bev_cfg.width,
        cli.out_dir.display()
    );
    Ok(())
}
