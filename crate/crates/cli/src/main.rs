use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use stitchkit::bc::{self, Policy, PolicyKind};
use stitchkit::cvae::InverseCvae;
use stitchkit::data::{load_dataset, save_dataset, Dataset};
use stitchkit::dynamics::{self, DynamicsEnsemble};
use stitchkit::experiment::{run_pipeline, Evaluation, ExperimentConfig};
use stitchkit::nn::CheckpointMeta;
use stitchkit::stitch::{self, CvaeSampler};
use stitchkit::value::{self, TwinValue};
use stitchkit::wgan::RewardGan;
use stitchkit::{cvae, eval, wgan, Error};

const SEED_VAR: &str = "STITCHKIT_SEED";
const DYNAMICS_DIR: &str = "dynamics";
const INVERSE_FILE: &str = "inverse.json";
const REWARD_FILE: &str = "reward.json";
const VALUE_FILE: &str = "value.json";
const RESOLVED_FILE: &str = "resolved.conf";

/// Offline dataset augmentation by trajectory stitching.
#[derive(Parser)]
#[command(name = "stitchkit", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate an expert/noisy mixture dataset on the point-mass task.
    GenData(GenData),
    /// Train the dynamics ensemble, inverse model, reward model and value function.
    TrainModels(TrainModels),
    /// Run iterated trajectory stitching with trained models.
    Stitch(StitchCmd),
    /// Behavioural cloning, optionally value-weighted.
    TrainBc(TrainBc),
    /// Evaluate a saved policy on the point-mass task.
    Eval(EvalCmd),
    /// Full expert-fraction experiment: BC, TS+BC, weighted BC, KL and MSE.
    Pipeline(PipelineCmd),
}

#[derive(Clone, Copy, ValueEnum)]
enum Preset {
    /// Full-size models and step counts.
    Full,
    /// Small models for single-core runs.
    Desk,
}

#[derive(Args)]
struct Common {
    /// Config file with one `key = value` per line.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long, value_enum, default_value_t = Preset::Full)]
    preset: Preset,
    /// Override one config key; repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    set: Vec<String>,
    /// Global seed. Without it, a `seed` key in the config or `--set` wins, then STITCHKIT_SEED.
    #[arg(long)]
    seed: Option<u64>,
    /// Worker threads for training, stitching and evaluation.
    #[arg(long)]
    workers: Option<usize>,
}

#[derive(Args)]
struct GenData {
    #[command(flatten)]
    common: Common,
    /// Percentage of expert trajectories.
    #[arg(long)]
    expert_frac: Option<f64>,
    #[arg(long)]
    trajs: Option<usize>,
    #[arg(long)]
    noise_std: Option<f64>,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Clone, Copy, PartialEq, Eq, ValueEnum)]
enum Model {
    Dynamics,
    Inverse,
    Reward,
    Value,
}

#[derive(Args)]
struct TrainModels {
    #[command(flatten)]
    common: Common,
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    out_dir: PathBuf,
    /// Model to leave out; repeatable.
    #[arg(long, value_enum)]
    skip: Vec<Model>,
}

#[derive(Args)]
struct StitchCmd {
    #[command(flatten)]
    common: Common,
    #[arg(long)]
    data: PathBuf,
    /// Directory written by `train-models`.
    #[arg(long)]
    models: PathBuf,
    #[arg(long)]
    out: PathBuf,
    /// Defaults to `<out>.report.json`.
    #[arg(long)]
    report_path: Option<PathBuf>,
    #[arg(long)]
    iterations: Option<usize>,
    /// `inf` rejects every candidate.
    #[arg(long)]
    accept_threshold: Option<f64>,
    #[arg(long)]
    epsilon: Option<f64>,
    #[arg(long)]
    max_stitches: Option<usize>,
}

#[derive(Args)]
struct TrainBc {
    #[command(flatten)]
    common: Common,
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    out: PathBuf,
    /// Weight each transition by its start-state value.
    #[arg(long, requires = "value")]
    weighted: bool,
    /// Value checkpoint used by --weighted.
    #[arg(long)]
    value: Option<PathBuf>,
    /// Fit a Gaussian policy by maximum likelihood.
    #[arg(long, conflicts_with = "weighted")]
    gaussian: bool,
    /// Index of the policy seed derived from the global seed.
    #[arg(long, default_value_t = 0)]
    policy_seed: usize,
}

#[derive(Args)]
struct EvalCmd {
    #[command(flatten)]
    common: Common,
    #[arg(long)]
    policy: PathBuf,
    #[arg(long, default_value_t = eval::DEFAULT_EPISODES)]
    episodes: usize,
    #[arg(long, default_value_t = eval::DEFAULT_SEEDS)]
    seeds: usize,
    /// Also write the result JSON here.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct PipelineCmd {
    #[command(flatten)]
    common: Common,
    /// Comma-separated expert percentages.
    #[arg(long)]
    fractions: Option<String>,
    #[arg(long)]
    bc_seeds: Option<usize>,
    #[arg(long)]
    ts_seeds: Option<usize>,
    #[arg(long)]
    out_dir: PathBuf,
}

/// A failed command and its exit code: 2 for bad input or configuration,
/// 1 for runtime faults.
#[derive(Debug)]
struct Failure {
    code: u8,
    message: String,
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        Failure {
            code: if e.is_input_error() { 2 } else { 1 },
            message: e.to_string(),
        }
    }
}

impl Failure {
    fn input(message: impl Into<String>) -> Self {
        Failure {
            code: 2,
            message: message.into(),
        }
    }
}

type CliResult<T> = Result<T, Failure>;

/// Anything that goes wrong while reading an input is the caller's fault.
fn read_input<T>(what: &str, path: &Path, r: stitchkit::Result<T>) -> CliResult<T> {
    r.map_err(|e| Failure::input(format!("{what} {}: {e}", path.display())))
}

fn read_text(what: &str, path: &Path) -> CliResult<String> {
    std::fs::read_to_string(path).map_err(|e| Failure::input(format!("{what} {}: {e}", path.display())))
}

fn config_sets_seed(text: &str) -> bool {
    text.lines()
        .filter_map(|l| l.split('#').next()?.split_once('='))
        .any(|(k, _)| k.trim() == "seed")
}

/// Preset, then config file, then STITCHKIT_SEED (if neither the file nor
/// `--seed` sets a seed), then `--set`, then command flags.
fn resolve(common: &Common, flags: &[(&str, Option<String>)]) -> CliResult<ExperimentConfig> {
    let mut c = match common.preset {
        Preset::Full => ExperimentConfig::default(),
        Preset::Desk => ExperimentConfig::desk(),
    };
    let mut file_seed = false;
    if let Some(path) = &common.config {
        let text = read_text("config", path)?;
        read_input("config", path, c.apply_text(&text))?;
        file_seed = config_sets_seed(&text);
    }
    if common.seed.is_none() && !file_seed {
        if let Ok(v) = std::env::var(SEED_VAR) {
            let seed = v
                .trim()
                .parse::<u64>()
                .map_err(|_| Failure::input(format!("{SEED_VAR} must be an unsigned integer, got {v:?}")))?;
            c.seed = seed;
        }
    }
    for kv in &common.set {
        let (k, v) = kv
            .split_once('=')
            .ok_or_else(|| Failure::input(format!("--set expects KEY=VALUE, got {kv:?}")))?;
        c.set(k.trim(), v)?;
    }
    for (k, v) in flags {
        if let Some(v) = v {
            c.set(k, v)?;
        }
    }
    if let Some(seed) = common.seed {
        c.seed = seed;
    }
    if let Some(w) = common.workers {
        c.workers = Some(w);
    }
    c.validate()?;
    Ok(c)
}

fn flag<T: ToString>(key: &'static str, v: &Option<T>) -> (&'static str, Option<String>) {
    (key, v.as_ref().map(ToString::to_string))
}

fn sidecar(path: &Path) -> PathBuf {
    let mut s = path.as_os_str().to_owned();
    s.push(".conf");
    PathBuf::from(s)
}

fn ensure_parent(path: &Path) -> CliResult<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).map_err(|e| Failure::from(Error::from(e)))?;
    }
    Ok(())
}

fn write_file(path: &Path, text: &str) -> CliResult<()> {
    ensure_parent(path)?;
    std::fs::write(path, text).map_err(|e| Failure::from(Error::from(e)))
}

fn write_resolved(c: &ExperimentConfig, path: &Path) -> CliResult<()> {
    ensure_parent(path)?;
    Ok(c.write_resolved(path)?)
}

fn load_data(path: &Path) -> CliResult<Dataset> {
    read_input("dataset", path, load_dataset(path))
}

fn meta(c: &ExperimentConfig, steps: usize) -> CheckpointMeta {
    CheckpointMeta {
        seed: c.seed,
        steps: steps as u64,
    }
}

fn gen_data(a: GenData) -> CliResult<()> {
    let c = resolve(
        &a.common,
        &[
            flag("data.expert_fraction", &a.expert_frac),
            flag("data.trajectories", &a.trajs),
            flag("data.noise_std", &a.noise_std),
        ],
    )?;
    write_resolved(&c, &sidecar(&a.out))?;
    let ds = c.dataset(c.expert_fraction)?;
    ensure_parent(&a.out)?;
    save_dataset(&ds, &a.out)?;
    log::info!(
        "wrote {} trajectories ({} expert) to {}",
        ds.trajectories().len(),
        c.mixture(c.expert_fraction).num_expert(),
        a.out.display()
    );
    Ok(())
}

fn train_models(a: TrainModels) -> CliResult<()> {
    let c = resolve(&a.common, &[])?;
    std::fs::create_dir_all(&a.out_dir).map_err(|e| Failure::from(Error::from(e)))?;
    write_resolved(&c, &a.out_dir.join(RESOLVED_FILE))?;
    let ds = load_data(&a.data)?;
    let ts = c.standalone_ts_config();
    let wanted = |m: Model| !a.skip.contains(&m);
    c.with_workers(|| -> CliResult<()> {
        if wanted(Model::Dynamics) {
            let m = dynamics::train_dynamics(&ds, &ts.dynamics)?;
            m.save(a.out_dir.join(DYNAMICS_DIR))?;
            log::info!("dynamics ensemble saved");
        }
        if wanted(Model::Inverse) {
            let m = cvae::train_cvae(&ds, &ts.inverse)?;
            write_file(&a.out_dir.join(INVERSE_FILE), &m.to_json(meta(&c, ts.inverse.steps))?)?;
            log::info!("inverse model saved");
        }
        if wanted(Model::Reward) {
            let m = wgan::train_wgan(&ds, &ts.reward)?;
            write_file(&a.out_dir.join(REWARD_FILE), &m.to_json(meta(&c, ts.reward.generator_steps))?)?;
            log::info!("reward model saved");
        }
        if wanted(Model::Value) {
            let m = value::train_value(&ds, &ts.value)?;
            write_file(&a.out_dir.join(VALUE_FILE), &m.to_json(meta(&c, ts.value.steps))?)?;
            log::info!("value function saved");
        }
        Ok(())
    })?
}

fn require(path: PathBuf, what: &str) -> CliResult<PathBuf> {
    if path.exists() {
        Ok(path)
    } else {
        Err(Failure::input(format!(
            "missing {what} at {}; run train-models without skipping it",
            path.display()
        )))
    }
}

fn stitch_cmd(a: StitchCmd) -> CliResult<()> {
    let c = resolve(
        &a.common,
        &[
            flag("stitch.iterations", &a.iterations),
            flag("stitch.accept_threshold", &a.accept_threshold),
            flag("stitch.epsilon", &a.epsilon),
            flag("stitch.max_stitches", &a.max_stitches),
        ],
    )?;
    let dyn_dir = require(a.models.join(DYNAMICS_DIR).join(dynamics::MANIFEST_FILE), "dynamics model")?;
    let inv_path = require(a.models.join(INVERSE_FILE), "inverse model")?;
    let rew_path = require(a.models.join(REWARD_FILE), "reward model")?;
    write_resolved(&c, &sidecar(&a.out))?;
    let ds = load_data(&a.data)?;
    let dyn_dir = dyn_dir.parent().expect("manifest lives in a directory");
    let dynamics = read_input("dynamics model", dyn_dir, DynamicsEnsemble::load(dyn_dir))?;
    let inverse = read_input("inverse model", &inv_path, InverseCvae::from_json(&read_text("inverse model", &inv_path)?))?;
    let reward = read_input("reward model", &rew_path, RewardGan::from_json(&read_text("reward model", &rew_path)?))?;
    let ts = c.standalone_ts_config();
    let sampler = CvaeSampler {
        model: &inverse,
        mode: ts.latent_mode,
    };
    let (out, report) = c.with_workers(|| {
        stitch::run_ts_with_models(&ds, &dynamics, &sampler, &reward, &ts.value, &ts.stitch)
    })??;
    ensure_parent(&a.out)?;
    save_dataset(&out, &a.out)?;
    let report_path = a.report_path.unwrap_or_else(|| {
        let mut s = a.out.as_os_str().to_owned();
        s.push(".report.json");
        PathBuf::from(s)
    });
    write_file(&report_path, &report.to_json()?)?;
    Ok(())
}

fn train_bc(a: TrainBc) -> CliResult<()> {
    let c = resolve(&a.common, &[])?;
    write_resolved(&c, &sidecar(&a.out))?;
    let ds = load_data(&a.data)?;
    let weights = match (&a.value, a.weighted) {
        (Some(path), true) => {
            let v = read_input("value function", path, TwinValue::from_json(&read_text("value function", path)?))?;
            Some(bc::value_weights(&ds, &v)?)
        }
        _ => None,
    };
    let ev = Evaluation::new(&c);
    let policy = c.with_workers(|| ev.train_policy(&ds, a.policy_seed, a.gaussian, weights.as_deref()))??;
    write_file(&a.out, &policy.to_json(meta(&c, c.bc.steps))?)?;
    Ok(())
}

fn eval_cmd(a: EvalCmd) -> CliResult<()> {
    let c = resolve(
        &a.common,
        &[
            ("eval.episodes", Some(a.episodes.to_string())),
            ("eval.seeds", Some(a.seeds.to_string())),
        ],
    )?;
    if let Some(out) = &a.out {
        write_resolved(&c, &sidecar(out))?;
    }
    let p = read_input("policy", &a.policy, Policy::from_json(&read_text("policy", &a.policy)?))?;
    let ev = Evaluation::new(&c);
    let r = eval::evaluate_policy(&c.env, &p, c.eval_episodes, c.eval_seeds, c.eval_seed());
    let kl = match p.kind() {
        PolicyKind::Gaussian => Some(ev.kl(&p)?),
        PolicyKind::Deterministic => None,
    };
    let json = serde_json::json!({
        "mean": r.mean,
        "std": r.std,
        "per_seed": r.per_seed,
        "mse": ev.mse(&p)?,
        "kl": kl,
    });
    let text = serde_json::to_string_pretty(&json).map_err(|e| Failure::from(Error::from(e)))?;
    println!("{text}");
    if let Some(out) = &a.out {
        write_file(out, &text)?;
    }
    Ok(())
}

fn pipeline(a: PipelineCmd) -> CliResult<()> {
    let c = resolve(
        &a.common,
        &[
            flag("pipeline.fractions", &a.fractions),
            flag("pipeline.bc_seeds", &a.bc_seeds),
            flag("pipeline.ts_seeds", &a.ts_seeds),
        ],
    )?;
    write_resolved(&c, &a.out_dir.join(RESOLVED_FILE))?;
    let out = run_pipeline(&c)?;
    out.write(&a.out_dir)?;
    let m = &out.metrics;
    for (i, f) in m.fractions.iter().enumerate() {
        log::info!(
            "{f}%: BC {:.3}, TS+BC {:.3}",
            m.bc.returns[i].unwrap_or(f64::NAN),
            m.tsbc.returns[i].unwrap_or(f64::NAN)
        );
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    let result = match cli.command {
        Command::GenData(a) => gen_data(a),
        Command::TrainModels(a) => train_models(a),
        Command::Stitch(a) => stitch_cmd(a),
        Command::TrainBc(a) => train_bc(a),
        Command::Eval(a) => eval_cmd(a),
        Command::Pipeline(a) => pipeline(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("error: {}", f.message);
            ExitCode::from(f.code)
        }
    }
}
