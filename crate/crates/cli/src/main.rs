use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;
use std::time::{Instant, SystemTime, UNIX_EPOCH};

use anyhow::{bail, ensure, Context, Result};
use clap::{Args, Parser, Subcommand};

use flexdyn::control::InitMethod;
use flexdyn::dynnet::{DynNetConfig, DynamicsNet, TrainConfig};
use flexdyn::harness::{
    collect_random, default_target_state, load_episode, make_pairs, rate_rows, rates_csv, read_metrics_csv, run_experiment,
    save_episode, sweep, sweep_config_from, write_metrics_csv, ExperimentConfig, System,
};
use flexdyn::io::{apply_param_overrides, join_list, read_pgm, record_params, write_pgm, Gray8, KeyValues};
use flexdyn::sim::{ChainState, Scenario};
use flexdyn::vision::DEFAULT_BETA;

#[derive(Parser)]
#[command(name = "flexdyn", version, about = "Learn image-space chain dynamics and control through the learned model")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Record a random-torque episode.
    Collect(CollectArgs),
    /// Train a dynamics network on an episode.
    Train(TrainArgs),
    /// Run closed-loop control toward a target image.
    Control(ControlArgs),
    /// Train and evaluate every (scenario, T, method) condition.
    Sweep(SweepArgs),
    /// Turn metrics CSVs into a rate table.
    Eval(EvalArgs),
    /// Render a scenario's default target image.
    Target(TargetArgs),
}

#[derive(Args)]
struct Common {
    /// `key = value` settings; flags given on the command line take precedence.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
}

#[derive(Args)]
struct CollectArgs {
    #[command(flatten)]
    common: Common,
    #[arg(long)]
    scenario: Option<String>,
    #[arg(long)]
    frames: Option<usize>,
    #[arg(long)]
    tau_max: Option<f64>,
    #[arg(long)]
    dtau_max: Option<f64>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct TrainArgs {
    #[command(flatten)]
    common: Common,
    /// Episode directory written by `collect`.
    #[arg(long)]
    data: PathBuf,
    /// Prediction horizon.
    #[arg(long = "T", alias = "horizon")]
    horizon: Option<usize>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long)]
    batch: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    beta: Option<f64>,
    #[arg(long)]
    val_fraction: Option<f64>,
    /// Weight file to write.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct ControlArgs {
    #[command(flatten)]
    common: Common,
    /// Weight file; not needed for `--method none`.
    #[arg(long)]
    model: Option<PathBuf>,
    #[arg(long)]
    scenario: Option<String>,
    /// Target image (PGM). Defaults to the scenario's built-in target.
    #[arg(long)]
    target: Option<PathBuf>,
    /// none, random, constant, shift or mixed.
    #[arg(long)]
    method: Option<String>,
    /// Expected horizon; must match the model.
    #[arg(long = "T", alias = "horizon")]
    horizon: Option<usize>,
    #[arg(long)]
    duration: Option<f64>,
    #[arg(long)]
    repeats: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    beta: Option<f64>,
    #[arg(long)]
    opt_iters: Option<usize>,
    /// Write the observed image of every frame.
    #[arg(long)]
    dump_frames: bool,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct SweepArgs {
    #[command(flatten)]
    common: Common,
    /// Conditions run in parallel.
    #[arg(long, default_value_t = 1)]
    jobs: usize,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct EvalArgs {
    #[command(flatten)]
    common: Common,
    /// Directory holding `metrics_*.csv` files.
    #[arg(long)]
    metrics: PathBuf,
    /// Comma-separated thresholds in px (default 0..3000 step 100).
    #[arg(long)]
    thresholds: Option<String>,
    /// Rate table to write (default `<metrics>/rates.csv`).
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct TargetArgs {
    #[command(flatten)]
    common: Common,
    #[arg(long)]
    scenario: Option<String>,
    /// Joint angles in rad, comma-separated; default is the scenario's target pose.
    #[arg(long)]
    theta: Option<String>,
    #[arg(long)]
    out: PathBuf,
}

/// Settings resolved from flags over an optional config file.
struct Settings {
    file: KeyValues,
    resolved: KeyValues,
}

impl Settings {
    fn load(common: &Common) -> Result<Self> {
        let file = match &common.config {
            Some(p) => KeyValues::load(p).with_context(|| format!("reading config {}", p.display()))?,
            None => KeyValues::new(),
        };
        Ok(Self {
            file,
            resolved: KeyValues::new(),
        })
    }

    fn get<T: FromStr + ToString>(&mut self, key: &str, flag: Option<T>, default: T) -> Result<T> {
        let v = match flag {
            Some(v) => v,
            None => self.file.get_parsed(key)?.unwrap_or(default),
        };
        self.resolved.set(key, v.to_string());
        Ok(v)
    }

    fn scenario(&mut self, flag: Option<String>) -> Result<Scenario> {
        let name = self.get("scenario", flag, Scenario::RigidPendulum.name().to_string())?;
        Ok(name.parse()?)
    }

    /// Scenario preset with any chain-parameter overrides from the config file.
    fn system(&mut self, sc: Scenario) -> Result<System> {
        let mut params = sc.params();
        apply_param_overrides(&mut params, &self.file)?;
        let initial = if params.n_links == sc.params().n_links {
            sc.initial_state()
        } else {
            ChainState::at_rest(params.n_links)
        };
        record_params(&mut self.resolved, &params);
        Ok(System::new(sc.name(), params, initial))
    }
}

fn unix_now() -> f64 {
    SystemTime::now().duration_since(UNIX_EPOCH).map_or(0.0, |d| d.as_secs_f64())
}

/// Writes the run manifest: subcommand, resolved settings, paths, version, timing.
fn write_manifest(path: &Path, subcommand: &str, settings: &Settings, paths: &[(&str, &Path)], started: f64) -> Result<()> {
    let mut kv = KeyValues::new();
    kv.set("subcommand", subcommand);
    kv.set("version", env!("CARGO_PKG_VERSION"));
    for (k, p) in paths {
        kv.set(k, p.display());
    }
    kv.merge(&settings.resolved);
    kv.set("started_unix_s", format!("{started:.3}"));
    kv.set("finished_unix_s", format!("{:.3}", unix_now()));
    kv.save(path).with_context(|| format!("writing {}", path.display()))?;
    Ok(())
}

fn sibling(path: &Path, suffix: &str) -> PathBuf {
    let mut s = path.as_os_str().to_owned();
    s.push(suffix);
    PathBuf::from(s)
}

fn metrics_name(scenario: &str, horizon: Option<usize>, method: &str) -> String {
    let t = horizon.map_or("-".to_string(), |t| t.to_string());
    format!("metrics_{scenario}_T{t}_{method}.csv")
}

/// Inverse of [`metrics_name`].
fn parse_metrics_name(name: &str) -> Option<(String, Option<usize>, String)> {
    let stem = name.strip_prefix("metrics_")?.strip_suffix(".csv")?;
    let (rest, method) = stem.rsplit_once('_')?;
    let (scenario, t) = rest.rsplit_once("_T")?;
    let horizon = if t == "-" { None } else { Some(t.parse().ok()?) };
    Some((scenario.to_string(), horizon, method.to_string()))
}

fn collect(args: CollectArgs) -> Result<()> {
    let started = unix_now();
    let mut s = Settings::load(&args.common)?;
    let sc = s.scenario(args.scenario)?;
    let system = s.system(sc)?;
    let frames = s.get("frames", args.frames, 10_800)?;
    let tau_max = s.get("collect_tau_max", args.tau_max, system.params.tau_max)?;
    let dtau_max = s.get("dtau_max", args.dtau_max, 0.1)?;
    let seed = s.get("seed", args.seed, 0)?;
    ensure!(frames > 0, "--frames must be positive");
    let ep = collect_random(&system, frames, tau_max, dtau_max, seed)?;
    save_episode(&ep, &args.out).with_context(|| format!("writing episode to {}", args.out.display()))?;
    write_manifest(&args.out.join("manifest.txt"), "collect", &s, &[("out", &args.out)], started)?;
    eprintln!("collected {frames} frames of {sc} into {}", args.out.display());
    Ok(())
}

fn train(args: TrainArgs) -> Result<()> {
    let started = unix_now();
    let mut s = Settings::load(&args.common)?;
    let horizon = s.get("T", args.horizon, 10)?;
    let defaults = TrainConfig::default();
    let tc = TrainConfig {
        epochs: s.get("epochs", args.epochs, defaults.epochs)?,
        batch_size: s.get("batch", args.batch, defaults.batch_size)?,
        lr: s.get("lr", args.lr, defaults.lr)?,
        seed: s.get("seed", args.seed, defaults.seed)?,
        val_fraction: s.get("val_fraction", args.val_fraction, defaults.val_fraction)?,
    };
    let beta = s.get("beta", args.beta, DEFAULT_BETA)?;
    let ep = load_episode(&args.data).with_context(|| format!("loading episode from {}", args.data.display()))?;
    let chain_tau_max = match ep.scenario.parse::<Scenario>() {
        Ok(sc) => sc.params().tau_max,
        Err(_) => ep.tau_max,
    };
    let tau_max = s.get("tau_max", None, chain_tau_max)?;
    let data = make_pairs(&ep, horizon, beta)?;
    drop(ep);
    let mut net = DynamicsNet::build(DynNetConfig::new(horizon, data.actuators(), tau_max), tc.seed)?;
    eprintln!("training T={horizon} on {} pairs ({} parameters)", data.len(), net.parameter_count());
    let t0 = Instant::now();
    let history = net.train(&data, &tc, |m| {
        eprintln!(
            "epoch {:>3}: train {:.5}  val {:.5}  copy baseline {:.5}  [{:.0}s]",
            m.epoch,
            m.train_loss,
            m.val_loss,
            m.baseline_loss,
            t0.elapsed().as_secs_f64()
        )
    })?;
    if let Some(dir) = args.out.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(dir)?;
    }
    net.save(&args.out).with_context(|| format!("writing {}", args.out.display()))?;
    let mut csv = String::from("epoch,train_loss,val_loss,baseline_loss\n");
    for m in &history {
        csv.push_str(&format!("{},{},{},{}\n", m.epoch, m.train_loss, m.val_loss, m.baseline_loss));
    }
    let hist_path = sibling(&args.out, ".history.csv");
    fs::write(&hist_path, csv)?;
    write_manifest(
        &sibling(&args.out, ".manifest.txt"),
        "train",
        &s,
        &[("data", &args.data), ("out", &args.out), ("history", &hist_path)],
        started,
    )?;
    Ok(())
}

fn control(args: ControlArgs) -> Result<()> {
    let started = unix_now();
    let mut s = Settings::load(&args.common)?;
    let sc = s.scenario(args.scenario)?;
    let system = s.system(sc)?;
    let method_name = s.get("method", args.method, "mixed".to_string())?;
    let method = if method_name == "none" {
        None
    } else {
        Some(method_name.parse::<InitMethod>()?)
    };
    let mut net = match (&method, &args.model) {
        (Some(_), None) => bail!("--model is required for method `{method_name}`"),
        (_, Some(p)) => Some(DynamicsNet::load(p).with_context(|| format!("loading {}", p.display()))?),
        (None, None) => None,
    };
    let model_t = net.as_ref().map(|n| n.config().horizon);
    let horizon = s.get("T", args.horizon, model_t.unwrap_or(10))?;
    if let Some(t) = model_t {
        ensure!(t == horizon, "model was trained for T={t} but T={horizon} was requested");
    }
    if let Some(n) = &net {
        ensure!(
            n.config().actuators == system.actuators(),
            "model expects {} actuators, {sc} has {}",
            n.config().actuators,
            system.actuators()
        );
    }
    let target = match &args.target {
        Some(p) => read_pgm(p).with_context(|| format!("reading target {}", p.display()))?.to_binary(),
        None => system.image(&default_target_state(sc)),
    };
    let mut cfg = ExperimentConfig::new(target.clone(), horizon, method);
    cfg.duration_s = s.get("duration", args.duration, cfg.duration_s)?;
    cfg.repeats = s.get("repeats", args.repeats, cfg.repeats)?;
    cfg.seed = s.get("seed", args.seed, cfg.seed)?;
    cfg.beta = s.get("beta", args.beta, cfg.beta)?;
    cfg.opt_iters = s.get("opt_iters", args.opt_iters, cfg.opt_iters)?;
    let rows = run_experiment(net.as_mut(), &system, &cfg)?;

    fs::create_dir_all(&args.out)?;
    let name = metrics_name(sc.name(), method.map(|_| horizon), cfg.method_name());
    write_metrics_csv(&args.out.join(&name), &rows)?;
    write_pgm(&args.out.join("target.pgm"), &Gray8::from_binary(&target))?;
    if args.dump_frames {
        dump_frames(&system, &rows, &args.out.join("frames"))?;
    }
    s.resolved.set("dump_frames", args.dump_frames);
    let mut paths: Vec<(&str, &Path)> = vec![("out", &args.out)];
    if let Some(p) = &args.model {
        paths.push(("model", p));
    }
    if let Some(p) = &args.target {
        paths.push(("target", p));
    }
    write_manifest(&args.out.join("manifest.txt"), "control", &s, &paths, started)?;
    let accepted = rows.iter().filter(|r| r.accepted).count();
    let mean_ms = rows.iter().map(|r| r.wall_ms).sum::<f64>() / rows.len() as f64;
    eprintln!(
        "{} frames, {accepted} refinements accepted, mean step {mean_ms:.2} ms -> {}",
        rows.len(),
        args.out.join(name).display()
    );
    Ok(())
}

/// Replays the recorded torques to regenerate each frame's image.
fn dump_frames(system: &System, rows: &[flexdyn::harness::MetricsRow], dir: &Path) -> Result<()> {
    fs::create_dir_all(dir)?;
    let mut state = system.initial.clone();
    let mut repeat = usize::MAX;
    for r in rows {
        if r.repeat != repeat {
            repeat = r.repeat;
            state = system.initial.clone();
        }
        let img = system.image(&state);
        write_pgm(&dir.join(format!("r{:02}_f{:05}.pgm", r.repeat, r.frame)), &Gray8::from_binary(&img))?;
        state = system.step(&state, &r.tau)?;
    }
    Ok(())
}

fn run_sweep(args: SweepArgs) -> Result<()> {
    let started = unix_now();
    let s = Settings::load(&args.common)?;
    let cfg = sweep_config_from(&s.file)?;
    ensure!(args.jobs >= 1, "--jobs must be at least 1");
    let t0 = Instant::now();
    let log = |msg: &str| eprintln!("[{:>6.0}s] {msg}", t0.elapsed().as_secs_f64());
    let out = sweep(&cfg, args.jobs, &log)?;
    fs::create_dir_all(&args.out)?;
    for c in &out.conditions {
        write_metrics_csv(&args.out.join(metrics_name(&c.scenario, c.horizon, &c.method)), &c.rows)?;
    }
    for (sc, t, hist) in &out.histories {
        let mut csv = String::from("epoch,train_loss,val_loss,baseline_loss\n");
        for m in hist {
            csv.push_str(&format!("{},{},{},{}\n", m.epoch, m.train_loss, m.val_loss, m.baseline_loss));
        }
        fs::write(args.out.join(format!("history_{sc}_T{t}.csv")), csv)?;
    }
    fs::write(args.out.join("rates.csv"), rates_csv(&out.rates))?;
    let mut s = s;
    s.resolved = s.file.clone();
    s.resolved.set("scenarios", join_list(&cfg.scenarios.iter().map(|x| x.name()).collect::<Vec<_>>()));
    s.resolved.set("horizons", join_list(&cfg.horizons));
    s.resolved.set("methods", join_list(&cfg.methods.iter().map(|m| m.name()).collect::<Vec<_>>()));
    s.resolved.set("frames", cfg.frames);
    s.resolved.set("epochs", cfg.train.epochs);
    s.resolved.set("repeats", cfg.repeats);
    s.resolved.set("duration", cfg.duration_s);
    s.resolved.set("seed", cfg.seed);
    s.resolved.set("jobs", args.jobs);
    write_manifest(&args.out.join("manifest.txt"), "sweep", &s, &[("out", &args.out)], started)?;
    eprintln!("{} conditions -> {}", out.conditions.len(), args.out.join("rates.csv").display());
    Ok(())
}

fn eval(args: EvalArgs) -> Result<()> {
    let started = unix_now();
    let mut s = Settings::load(&args.common)?;
    let thresholds: Vec<f64> = match args.thresholds.as_deref().or(s.file.get("thresholds")) {
        Some(list) => list
            .split(',')
            .map(|t| t.trim().parse::<f64>().with_context(|| format!("bad threshold `{t}`")))
            .collect::<Result<_>>()?,
        None => flexdyn::harness::default_thresholds(),
    };
    ensure!(!thresholds.is_empty(), "no thresholds given");
    s.resolved.set("thresholds", join_list(&thresholds));
    let mut files: Vec<PathBuf> = fs::read_dir(&args.metrics)
        .with_context(|| format!("reading {}", args.metrics.display()))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.file_name().and_then(|n| n.to_str()).is_some_and(|n| parse_metrics_name(n).is_some()))
        .collect();
    files.sort();
    ensure!(!files.is_empty(), "no metrics_*.csv files in {}", args.metrics.display());
    let mut rates = Vec::new();
    for f in &files {
        let (scenario, horizon, method) = parse_metrics_name(f.file_name().and_then(|n| n.to_str()).unwrap_or_default())
            .expect("filtered above");
        let rows = read_metrics_csv(f)?;
        ensure!(!rows.is_empty(), "{} has no rows", f.display());
        let r = rate_rows(&scenario, horizon, &method, &rows, &thresholds)?;
        ensure!(r.windows(2).all(|w| w[0].rate <= w[1].rate || w[0].threshold > w[1].threshold), "rate curve not monotone");
        rates.extend(r);
    }
    let out = args.out.clone().unwrap_or_else(|| args.metrics.join("rates.csv"));
    fs::write(&out, rates_csv(&rates)).with_context(|| format!("writing {}", out.display()))?;
    write_manifest(
        &sibling(&out, ".manifest.txt"),
        "eval",
        &s,
        &[("metrics", &args.metrics), ("out", &out)],
        started,
    )?;
    eprintln!("{} metrics files -> {}", files.len(), out.display());
    Ok(())
}

fn target(args: TargetArgs) -> Result<()> {
    let started = unix_now();
    let mut s = Settings::load(&args.common)?;
    let sc = s.scenario(args.scenario)?;
    let system = s.system(sc)?;
    let state = match args.theta.as_deref().or(s.file.get("theta")) {
        Some(list) => {
            let theta: Vec<f64> = list
                .split(',')
                .map(|t| t.trim().parse::<f64>().with_context(|| format!("bad angle `{t}`")))
                .collect::<Result<_>>()?;
            ensure!(
                theta.len() == system.params.n_links,
                "{} angles given for {} joints",
                theta.len(),
                system.params.n_links
            );
            ChainState::new(theta, vec![0.0; system.params.n_links])
        }
        None => default_target_state(sc),
    };
    s.resolved.set("theta", join_list(&state.theta));
    if let Some(dir) = args.out.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(dir)?;
    }
    write_pgm(&args.out, &Gray8::from_binary(&system.image(&state)))?;
    write_manifest(&sibling(&args.out, ".manifest.txt"), "target", &s, &[("out", &args.out)], started)?;
    Ok(())
}

fn main() -> Result<()> {
    match Cli::parse().command {
        Command::Collect(a) => collect(a),
        Command::Train(a) => train(a),
        Command::Control(a) => control(a),
        Command::Sweep(a) => run_sweep(a),
        Command::Eval(a) => eval(a),
        Command::Target(a) => target(a),
    }
}
