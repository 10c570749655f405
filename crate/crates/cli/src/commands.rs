use std::fs;
use std::io::BufReader;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use driftsim::env::{DriftEnv, EnvConfig, PathSource};
use driftsim::eval::{
    ablation_csv, path_overlay_svg, phase_plane_csv, phase_plane_svg, rollout_eval, run_ablation, AblationConfig,
};
use driftsim::io::{
    save_checkpoint, to_json_pretty, write_atomic, CheckpointError, CheckpointMeta, ConfigError, DirLock, RunConfig,
    RunManifest,
};
use driftsim::nn::PolicyNet;
use driftsim::path::{self, PathError, ReferencePath};
use driftsim::ppo::{train, CurveRow, LearningCurve, TrainObserver};
use driftsim::seeding;
use serde::Serialize;

use crate::{Cli, CliError, Command};

pub fn run(cli: &Cli) -> Result<(), CliError> {
    let cfg = load_config(cli)?;
    match &cli.command {
        Command::GenPath {
            kind,
            radius,
            direction,
            name,
        } => gen_path(cli, &cfg, kind, *radius, *direction, name.as_deref()),
        Command::Train => cmd_train(cli, &cfg),
        Command::Eval {
            checkpoint,
            path,
            trials,
            stochastic,
            max_steps,
            no_plots,
        } => {
            let mut cfg = cfg;
            if let Some(p) = path {
                cfg.eval.path = p.clone();
            }
            if let Some(n) = trials {
                cfg.eval.n_trials = *n;
            }
            if let Some(m) = max_steps {
                cfg.eval.max_steps = *m;
            }
            cfg.eval.stochastic |= stochastic;
            cfg.eval.plots &= !no_plots;
            cmd_eval(cli, &cfg, checkpoint)
        }
        Command::Ablate => cmd_ablate(cli, &cfg),
        Command::Bench { steps, instances } => crate::bench::cmd_bench(cli, &cfg, *steps, instances),
    }
}

fn config_error(e: ConfigError) -> CliError {
    match e {
        ConfigError::Io(io) => CliError::runtime(format!("reading config: {io}")),
        other => CliError::usage(other.to_string()),
    }
}

fn load_config(cli: &Cli) -> Result<RunConfig, CliError> {
    let mut cfg = match &cli.config {
        Some(p) => RunConfig::load(p).map_err(config_error)?,
        None => RunConfig::default(),
    };
    for o in &cli.overrides {
        let (k, v) = o
            .split_once('=')
            .ok_or_else(|| CliError::usage(format!("--set expects KEY=VALUE, got '{o}'")))?;
        cfg.set(k.trim(), v.trim()).map_err(config_error)?;
    }
    if let Some(seed) = cli.seed {
        cfg.run.seed = seed;
    }
    cfg.validate().map_err(config_error)?;
    Ok(cfg)
}

fn path_error(e: PathError) -> CliError {
    match e {
        PathError::InvalidParameter(m) => CliError::usage(m),
        PathError::Io(io) => CliError::runtime(io.to_string()),
        other => CliError::data(other.to_string()),
    }
}

/// Builds a named path or reads a waypoint CSV.
pub fn resolve_path(
    spec: &str,
    radius: f64,
    direction: i32,
    seed: u64,
    cfg: &RunConfig,
) -> Result<(String, ReferencePath), CliError> {
    let p = match spec {
        "circle" => path::gen_circle(radius, direction),
        "eight" => path::gen_eight(radius),
        "variable" => path::gen_variable_curvature(),
        "rings" => path::gen_rings(radius),
        "random" => path::gen_random_path(seed, &cfg.env.random_paths),
        file => {
            let f = fs::File::open(file).map_err(|e| {
                if e.kind() == std::io::ErrorKind::NotFound {
                    CliError::usage(format!(
                        "unknown path '{file}' (expected circle, eight, variable, rings, random or a CSV file)"
                    ))
                } else {
                    CliError::runtime(format!("{file}: {e}"))
                }
            })?;
            ReferencePath::read_csv(BufReader::new(f))
        }
    }
    .map_err(path_error)?;
    let id = Path::new(spec)
        .file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_else(|| spec.to_string());
    Ok((id, p))
}

fn timestamp() -> String {
    chrono::Utc::now().to_rfc3339_opts(chrono::SecondsFormat::Millis, true)
}

fn manifest(cmd: &str, cfg: &RunConfig) -> RunManifest {
    RunManifest {
        tool: "driftsim".into(),
        version: env!("CARGO_PKG_VERSION").into(),
        command: cmd.into(),
        seed: cfg.run.seed,
        config: cfg.to_config_string(),
        started: timestamp(),
        finished: String::new(),
        files: Vec::new(),
    }
}

/// Collects written files (relative to the output directory) for the manifest.
struct Outputs {
    dir: PathBuf,
    files: Vec<String>,
}

impl Outputs {
    fn new(dir: &Path) -> Self {
        Self {
            dir: dir.to_path_buf(),
            files: Vec::new(),
        }
    }

    fn write(&mut self, rel: &str, bytes: &[u8]) -> Result<(), CliError> {
        let path = self.dir.join(rel);
        if let Some(parent) = path.parent() {
            fs::create_dir_all(parent)?;
        }
        write_atomic(&path, bytes)?;
        self.note(rel);
        Ok(())
    }

    fn note(&mut self, rel: &str) {
        if !self.files.iter().any(|f| f == rel) {
            self.files.push(rel.to_string());
        }
    }

    fn finish(self, m: RunManifest) -> Result<(), CliError> {
        m.finish(&self.dir, &self.files, timestamp())?;
        Ok(())
    }
}

fn gen_path(
    cli: &Cli,
    cfg: &RunConfig,
    kind: &str,
    radius: Option<f64>,
    direction: Option<i32>,
    name: Option<&str>,
) -> Result<(), CliError> {
    const KINDS: [&str; 5] = ["circle", "eight", "variable", "rings", "random"];
    if !KINDS.contains(&kind) {
        return Err(CliError::usage(format!(
            "unknown path kind '{kind}' (expected one of {})",
            KINDS.join(", ")
        )));
    }
    let radius = radius.unwrap_or(cfg.task.radius);
    if !(radius > 0.0 && radius.is_finite()) {
        return Err(CliError::usage(format!("--radius must be positive, got {radius}")));
    }
    let direction = direction.unwrap_or(cfg.task.direction);
    if direction != 1 && direction != -1 {
        return Err(CliError::usage("--direction must be 1 or -1"));
    }
    let _lock = DirLock::acquire(&cli.out)?;
    let (_, p) = resolve_path(kind, radius, direction, cfg.run.seed, cfg)?;
    let mut buf = Vec::new();
    p.write_csv(&mut buf).map_err(path_error)?;
    let file = name.map(str::to_string).unwrap_or_else(|| format!("{kind}.csv"));
    let mut out = Outputs::new(&cli.out);
    out.write(&file, &buf)?;
    if !cli.quiet {
        eprintln!("wrote {} ({} waypoints)", cli.out.join(&file).display(), p.len());
    }
    out.finish(manifest(&format!("gen-path {kind}"), cfg))
}

/// Training path source for `spec`: the random pool, the path families or a
/// single path.
pub fn training_paths(spec: &str, cfg: &RunConfig, radius: f64, direction: i32) -> Result<PathSource, CliError> {
    if spec == "random" {
        PathSource::random_pool(cfg.run.seed, &cfg.env.random_paths, cfg.env.path_pool_size).map_err(path_error)
    } else if spec == "families" {
        PathSource::families(radius).map_err(path_error)
    } else {
        let (id, p) = resolve_path(spec, radius, direction, cfg.run.seed, cfg)?;
        Ok(PathSource::single(id, p))
    }
}

struct TrainProgress<'a> {
    quiet: bool,
    out: &'a mut Outputs,
    cfg: &'a RunConfig,
    prefix: String,
    error: Option<CliError>,
    last_row: Option<CurveRow>,
}

impl TrainObserver for TrainProgress<'_> {
    fn on_update(&mut self, r: &CurveRow) {
        if !self.quiet {
            eprintln!(
                "{}update {:4}  steps {:>10}  return {:>9.2}  |beta| {:.3}  rmse {:.3}  {:>8.0} steps/s{}",
                self.prefix,
                r.update,
                r.env_steps,
                r.mean_return,
                r.mean_abs_beta,
                r.rmse_proxy,
                r.steps_per_sec,
                if r.update_stats.aborted {
                    "  (update aborted: non-finite loss)"
                } else {
                    ""
                }
            );
        }
        self.last_row = Some(*r);
    }

    fn on_checkpoint(&mut self, update: usize, net: &PolicyNet) {
        if self.error.is_some() {
            return;
        }
        let meta = CheckpointMeta {
            update,
            env_steps: self.last_row.map_or(0, |r| r.env_steps),
            trainer: self.cfg.trainer.clone(),
            config: self.cfg.clone(),
        };
        let rel = format!("checkpoints/{}update_{update:05}.bin", self.prefix.trim());
        let res = (|| -> Result<(), CliError> {
            fs::create_dir_all(self.out.dir.join("checkpoints"))?;
            save_checkpoint(&self.out.dir.join(&rel), net, &meta)?;
            self.out.note(&rel);
            self.out.note(&format!("{rel}.json"));
            if self.prefix.is_empty() {
                // Latest policy stays loadable if the run is interrupted.
                save_checkpoint(&self.out.dir.join("policy.bin"), net, &meta)?;
            }
            Ok(())
        })();
        if let Err(e) = res {
            self.error = Some(e);
        }
    }
}

fn train_policy(
    cfg: &RunConfig,
    paths: PathSource,
    out: &mut Outputs,
    quiet: bool,
    prefix: &str,
) -> Result<(PolicyNet, LearningCurve), CliError> {
    let mut trainer = cfg.trainer.clone();
    trainer.seed = cfg.run.seed;
    let mut env = DriftEnv::new(cfg.env.clone(), cfg.vehicle, paths, trainer.n_envs, cfg.run.seed);
    let mut progress = TrainProgress {
        quiet,
        out,
        cfg,
        prefix: prefix.to_string(),
        error: None,
        last_row: None,
    };
    let (net, curve) = train(&mut env, &trainer, &mut progress);
    if let Some(e) = progress.error {
        return Err(e);
    }
    Ok((net, curve))
}

fn cmd_train(cli: &Cli, cfg: &RunConfig) -> Result<(), CliError> {
    let _lock = DirLock::acquire(&cli.out)?;
    let mut out = Outputs::new(&cli.out);
    out.write("config.txt", cfg.to_config_string().as_bytes())?;
    let paths = training_paths(&cfg.task.path, cfg, cfg.task.radius, cfg.task.direction)?;
    let (net, curve) = train_policy(cfg, paths, &mut out, cli.quiet, "")?;
    let meta = CheckpointMeta {
        update: curve.rows.len(),
        env_steps: curve.rows.last().map_or(0, |r| r.env_steps),
        trainer: cfg.trainer.clone(),
        config: cfg.clone(),
    };
    save_checkpoint(&cli.out.join("policy.bin"), &net, &meta)?;
    out.note("policy.bin");
    out.note("policy.bin.json");
    out.write("learning_curve.csv", curve.to_csv().as_bytes())?;
    // Wall-clock throughput varies between runs; kept out of the data files.
    write_atomic(&cli.out.join("train_timing.log"), curve.timing_log().as_bytes())?;
    if !cli.quiet {
        eprintln!("wrote {}", cli.out.join("policy.bin").display());
    }
    out.finish(manifest("train", cfg))
}

fn checkpoint_error(path: &Path, e: CheckpointError) -> CliError {
    match e {
        CheckpointError::Io(io) if io.kind() != std::io::ErrorKind::UnexpectedEof => {
            CliError::runtime(format!("{}: {io}", path.display()))
        }
        other => CliError::data(format!("{}: {other}", path.display())),
    }
}

/// Observation settings must match the ones the policy was trained with.
fn eval_env_config(cfg: &RunConfig, checkpoint: &Path) -> EnvConfig {
    let mut env = cfg.env.clone();
    if let Some(meta) = driftsim::io::load_checkpoint_meta(checkpoint) {
        let t = &meta.config.env;
        env.n_preview = t.n_preview;
        env.preview_spacing = t.preview_spacing;
        env.kappa_error_limit = t.kappa_error_limit;
        env.scale_observations = t.scale_observations;
    }
    env
}

#[derive(Serialize)]
struct TrialSummary<'a> {
    trial: usize,
    seed: u64,
    path_id: &'a str,
    termination: &'static str,
    steps: usize,
    #[serde(rename = "return")]
    episode_return: f64,
    mean_abs_beta: f64,
    rmse: f64,
    progress: f64,
}

fn cmd_eval(cli: &Cli, cfg: &RunConfig, checkpoint: &Path) -> Result<(), CliError> {
    let env_cfg = eval_env_config(cfg, checkpoint);
    let net = driftsim::io::load_checkpoint(checkpoint, Some(env_cfg.obs_dim()))
        .map_err(|e| checkpoint_error(checkpoint, e))?;
    let (id, p) = resolve_path(&cfg.eval.path, cfg.eval.radius, 1, cfg.run.seed, cfg)?;
    let path = Arc::new(p);
    let _lock = DirLock::acquire(&cli.out)?;
    let opts = cfg.eval_options(seeding::derive_seed(cfg.run.seed, seeding::STREAM_EVAL_TRIAL, 0));
    let (report, traces) = rollout_eval(&net, &env_cfg, &cfg.vehicle, &id, path.clone(), &opts);
    let mut out = Outputs::new(&cli.out);
    out.write("eval_report.json", to_json_pretty(&report).as_bytes())?;
    let summaries: Vec<TrialSummary> = report
        .trials
        .iter()
        .zip(&traces)
        .map(|(t, tr)| TrialSummary {
            trial: t.trial,
            seed: t.seed,
            path_id: &id,
            termination: t.termination.as_str(),
            steps: t.steps,
            episode_return: tr.rows.iter().map(|r| r.reward.total).sum(),
            mean_abs_beta: t.mean_abs_beta,
            rmse: t.rmse,
            progress: t.progress,
        })
        .collect();
    out.write("episodes.json", to_json_pretty(&summaries).as_bytes())?;
    for (i, tr) in traces.iter().enumerate() {
        out.write(&format!("traces/trial_{i:03}.csv"), tr.to_csv().as_bytes())?;
        out.write(&format!("phase/trial_{i:03}.csv"), phase_plane_csv(tr).as_bytes())?;
    }
    if cfg.eval.plots {
        out.write("path_overlay.svg", path_overlay_svg(&path, &traces).as_bytes())?;
        out.write("phase_plane.svg", phase_plane_svg(&traces).as_bytes())?;
    }
    if !cli.quiet {
        eprintln!(
            "{}: {} trials, success {:.2}, rmse {:.3} ± {:.3} m, |beta| {:.3} rad, V {:.2} m/s",
            id,
            report.n_trials,
            report.success_rate,
            report.rmse_pos.mean,
            report.rmse_pos.std,
            report.mean_abs_beta.mean,
            report.mean_v.mean
        );
    }
    out.finish(manifest("eval", cfg))
}

#[derive(Serialize)]
struct AblationOutput<'a> {
    spec: &'a driftsim::eval::AblationSpec,
    train_path: &'a str,
    eval_path: &'a str,
    total_env_steps: u64,
    partial: bool,
    rows: &'a [driftsim::eval::AblationRow],
}

fn cmd_ablate(cli: &Cli, cfg: &RunConfig) -> Result<(), CliError> {
    let spec = cfg.ablation.spec().map_err(config_error)?;
    let (eval_id, eval_path) = resolve_path(&cfg.ablation.path, cfg.ablation.radius, 1, cfg.run.seed, cfg)?;
    let _lock = DirLock::acquire(&cli.out)?;
    let mut out = Outputs::new(&cli.out);
    let mut train_fn = |config: AblationConfig, seed: u64| -> Result<PolicyNet, String> {
        let mut c = cfg.clone();
        c.run.seed = seed;
        c.env.randomization.flags = config.flags();
        c.trainer.total_env_steps = cfg.ablation.total_env_steps;
        let paths =
            training_paths(&cfg.ablation.train_path, &c, cfg.task.radius, cfg.task.direction).map_err(|e| e.msg)?;
        if !cli.quiet {
            eprintln!("training '{}'", config.name());
        }
        let prefix = format!("{} ", config.name());
        let (net, _) = train_policy(&c, paths, &mut out, cli.quiet, &prefix).map_err(|e| e.msg)?;
        let meta = CheckpointMeta {
            update: 0,
            env_steps: c.trainer.total_env_steps,
            trainer: c.trainer.clone(),
            config: c.clone(),
        };
        let rel = format!("policies/{}.bin", config.name());
        fs::create_dir_all(cli.out.join("policies")).map_err(|e| e.to_string())?;
        save_checkpoint(&cli.out.join(&rel), &net, &meta).map_err(|e| e.to_string())?;
        out.note(&rel);
        out.note(&format!("{rel}.json"));
        Ok(net)
    };
    let rows = run_ablation(
        &mut train_fn,
        &spec,
        &cfg.env,
        &cfg.vehicle,
        &eval_id,
        Arc::new(eval_path),
        cfg.run.seed,
    );
    let partial = rows.iter().any(|r| r.failed);
    out.write("ablation.csv", ablation_csv(&rows).as_bytes())?;
    let summary = AblationOutput {
        spec: &spec,
        train_path: &cfg.ablation.train_path,
        eval_path: &eval_id,
        total_env_steps: cfg.ablation.total_env_steps,
        partial,
        rows: &rows,
    };
    out.write("ablation.json", to_json_pretty(&summary).as_bytes())?;
    if !cli.quiet {
        eprint!("{}", ablation_csv(&rows));
        if partial {
            eprintln!("warning: some configurations failed to train; table is partial");
        }
    }
    out.finish(manifest("ablate", cfg))
}
