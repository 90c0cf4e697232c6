//! Data collection, episode files, closed-loop experiments and rate curves.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::control::{baseline_step, control_step, ControlConfig, InitMethod};
use crate::dynnet::{DynNetConfig, Dataset, DynamicsNet, EpochMetrics, JointState, Observation, TorqueSequence, TrainConfig};
use crate::error::{Error, Result};
use crate::io::{join_list, read_pgm, write_pgm, Gray8, KeyValues};
use crate::sim::{step, ChainParams, ChainState, Scenario, SimConfig};
use crate::vision::{
    blur_target, chamfer_distance, decode_flow, encode_flow, preprocess, render_chain, render_flow, Camera, FlowField, Image,
    DEFAULT_BETA,
};

/// Raised angle of the rigid-pendulum target, rad. Gravity needs about 0.17 N·m to
/// hold it there, inside the 0.2 N·m limit.
pub const RIGID_TARGET_ANGLE: f64 = 0.6;

/// A simulated system together with how it is observed.
#[derive(Debug, Clone, PartialEq)]
pub struct System {
    pub name: String,
    pub params: ChainParams,
    pub initial: ChainState,
    pub sim: SimConfig,
    pub camera: Camera,
}

impl System {
    pub fn preset(scenario: Scenario) -> Self {
        Self::new(scenario.name(), scenario.params(), scenario.initial_state())
    }

    pub fn new(name: &str, params: ChainParams, initial: ChainState) -> Self {
        let camera = Camera::for_params(&params);
        Self {
            name: name.to_string(),
            params,
            initial,
            sim: SimConfig::default(),
            camera,
        }
    }

    /// Binary camera image of a state.
    pub fn image(&self, state: &ChainState) -> Image {
        preprocess(&render_chain(state, &self.params, &self.camera))
    }

    /// Everything the network sees at a frame. `last_torque` is the command applied
    /// during the previous frame.
    pub fn observe(&self, state: &ChainState, last_torque: &[f64]) -> Observation {
        let flow = render_flow(state, &self.params, &self.camera, self.sim.control_hz).quantized();
        Observation {
            image: self.image(state),
            flow,
            joints: joint_states(&self.params, state, last_torque),
        }
    }

    pub fn step(&self, state: &ChainState, torque: &[f64]) -> Result<ChainState> {
        step(state, torque, &self.params, &self.sim)
    }

    pub fn actuators(&self) -> usize {
        self.params.n_actuators()
    }
}

pub fn joint_states(params: &ChainParams, state: &ChainState, torque: &[f64]) -> Vec<JointState> {
    params
        .actuated
        .iter()
        .zip(torque)
        .map(|(&j, &t)| JointState {
            position: state.theta[j],
            velocity: state.theta_dot[j],
            torque: t,
        })
        .collect()
}

/// Target pose used by experiments: a raised rod, a string lifted to one side, or
/// a curled chain on the floor.
pub fn default_target_state(scenario: Scenario) -> ChainState {
    let n = scenario.params().n_links;
    let mut theta = vec![0.0; n];
    match scenario {
        Scenario::RigidPendulum => theta[0] = RIGID_TARGET_ANGLE,
        Scenario::FlexibleChain => {
            theta[0] = 1.0;
            // The string bends back towards the vertical.
            theta[1..].iter_mut().for_each(|t| *t = -0.12);
        }
        Scenario::ChainOnFloor => {
            theta[0] = 0.8;
            theta[1..].iter_mut().for_each(|t| *t = 0.25);
        }
    }
    ChainState::new(theta, vec![0.0; n])
}

#[derive(Debug, Clone, PartialEq)]
pub struct Frame {
    /// Binary image.
    pub image: Image,
    /// Flow on the 8-bit storage grid.
    pub flow: FlowField,
    pub state: ChainState,
    /// Torque applied during this frame, one per actuator.
    pub torque: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Episode {
    pub scenario: String,
    pub seed: u64,
    pub control_hz: f64,
    pub tau_max: f64,
    pub actuated: Vec<usize>,
    pub frames: Vec<Frame>,
}

impl Episode {
    pub fn len(&self) -> usize {
        self.frames.len()
    }

    pub fn is_empty(&self) -> bool {
        self.frames.is_empty()
    }

    /// Observation at frame `t`; the torque input is the command of frame `t−1`.
    pub fn observation(&self, t: usize) -> Observation {
        let f = &self.frames[t];
        let last = if t == 0 { vec![0.0; self.actuated.len()] } else { self.frames[t - 1].torque.clone() };
        Observation {
            image: f.image.clone(),
            flow: f.flow.clone(),
            joints: self
                .actuated
                .iter()
                .zip(&last)
                .map(|(&j, &tq)| JointState {
                    position: f.state.theta[j],
                    velocity: f.state.theta_dot[j],
                    torque: tq,
                })
                .collect(),
        }
    }
}

/// Random-torque data collection: per actuator the command is a clipped random walk
/// `τ_{t+1} = clip(τ_t + u)`, `u ~ U[−dτ_max, dτ_max]`, starting from zero.
pub fn collect_random(system: &System, frames: usize, tau_max: f64, dtau_max: f64, seed: u64) -> Result<Episode> {
    if !(tau_max > 0.0 && tau_max <= system.params.tau_max + 1e-12) {
        return Err(Error::InvalidArgument(format!(
            "collection tau_max {tau_max} must be positive and within the chain limit {}",
            system.params.tau_max
        )));
    }
    if !(dtau_max >= 0.0 && dtau_max.is_finite()) {
        return Err(Error::InvalidArgument(format!("dtau_max must be non-negative, got {dtau_max}")));
    }
    system.params.validate()?;
    system.initial.validate(&system.params)?;
    let m = system.actuators();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut state = system.initial.clone();
    let mut tau = vec![0.0; m];
    let mut out = Vec::with_capacity(frames);
    for t in 0..frames {
        if t > 0 {
            for v in tau.iter_mut() {
                let u = if dtau_max > 0.0 { rng.gen_range(-dtau_max..=dtau_max) } else { 0.0 };
                *v = (*v + u).clamp(-tau_max, tau_max);
            }
        }
        let obs_flow = render_flow(&state, &system.params, &system.camera, system.sim.control_hz).quantized();
        out.push(Frame {
            image: system.image(&state),
            flow: obs_flow,
            state: state.clone(),
            torque: tau.clone(),
        });
        state = system.step(&state, &tau)?;
    }
    Ok(Episode {
        scenario: system.name.clone(),
        seed,
        control_hz: system.sim.control_hz,
        tau_max,
        actuated: system.params.actuated.clone(),
        frames: out,
    })
}

/// Training pairs `(observation at t, torques over [t, t+T), blurred image at t+T)`
/// for every `t < len − T`.
pub fn make_pairs(episode: &Episode, horizon: usize, beta: f64) -> Result<Dataset> {
    if episode.len() <= horizon {
        return Err(Error::Dataset(format!(
            "episode of {} frames is too short for T={horizon}",
            episode.len()
        )));
    }
    let observations = (0..episode.len()).map(|t| episode.observation(t)).collect();
    let blurred = episode
        .frames
        .iter()
        .map(|f| blur_target(&f.image, beta))
        .collect::<Result<Vec<_>>>()?;
    let torques: Vec<Vec<f64>> = episode.frames.iter().map(|f| f.torque.clone()).collect();
    let mut d = Dataset::new(horizon, episode.actuated.len());
    d.push_episode(observations, blurred, &torques)?;
    Ok(d)
}

const EPISODE_META: &str = "episode.txt";
const EPISODE_CSV: &str = "episode.csv";

fn frame_path(dir: &Path, t: usize, kind: &str) -> std::path::PathBuf {
    dir.join("frames").join(format!("frame_{t:06}_{kind}.pgm"))
}

/// Writes `episode.txt`, `episode.csv` and three PGM files per frame under `dir`.
pub fn save_episode(episode: &Episode, dir: &Path) -> Result<()> {
    fs::create_dir_all(dir.join("frames"))?;
    let n_joints = episode.frames.first().map_or(0, |f| f.state.theta.len());
    let mut meta = KeyValues::new();
    meta.set("scenario", &episode.scenario);
    meta.set("seed", episode.seed);
    meta.set("control_hz", episode.control_hz);
    meta.set("tau_max", episode.tau_max);
    meta.set("actuated", join_list(&episode.actuated));
    meta.set("joints", n_joints);
    meta.set("frames", episode.len());
    meta.save(&dir.join(EPISODE_META))?;

    let mut csv = String::from("frame");
    for prefix in ["theta", "theta_dot"] {
        for j in 0..n_joints {
            write!(csv, ",{prefix}{j}").expect("string write");
        }
    }
    for a in 0..episode.actuated.len() {
        write!(csv, ",tau{a}").expect("string write");
    }
    csv.push('\n');
    for (t, f) in episode.frames.iter().enumerate() {
        write!(csv, "{t}").expect("string write");
        for v in f.state.theta.iter().chain(&f.state.theta_dot).chain(&f.torque) {
            // Display prints the shortest string that parses back to the same bits.
            write!(csv, ",{v}").expect("string write");
        }
        csv.push('\n');
        write_pgm(&frame_path(dir, t, "img"), &Gray8::from_binary(&f.image))?;
        for (kind, plane) in [("flow_x", &f.flow.x), ("flow_y", &f.flow.y)] {
            let g = Gray8 {
                width: f.image.width(),
                height: f.image.height(),
                data: plane.iter().map(|&v| encode_flow(v)).collect(),
            };
            write_pgm(&frame_path(dir, t, kind), &g)?;
        }
    }
    fs::write(dir.join(EPISODE_CSV), csv)?;
    Ok(())
}

pub fn load_episode(dir: &Path) -> Result<Episode> {
    let meta_path = dir.join(EPISODE_META);
    if !meta_path.is_file() {
        return Err(Error::Dataset(format!("{} is not an episode directory (no {EPISODE_META})", dir.display())));
    }
    let meta = KeyValues::load(&meta_path)?;
    let need = |k: &str| meta.get(k).ok_or_else(|| Error::Config(format!("{}: missing `{k}`", meta_path.display())));
    let scenario = need("scenario")?.to_string();
    let parse_err = |k: &str| Error::Config(format!("{}: bad `{k}`", meta_path.display()));
    let seed: u64 = need("seed")?.parse().map_err(|_| parse_err("seed"))?;
    let control_hz: f64 = need("control_hz")?.parse().map_err(|_| parse_err("control_hz"))?;
    let tau_max: f64 = need("tau_max")?.parse().map_err(|_| parse_err("tau_max"))?;
    let actuated: Vec<usize> = meta.get_list("actuated")?.unwrap_or_default();
    let n_joints: usize = need("joints")?.parse().map_err(|_| parse_err("joints"))?;
    let n_frames: usize = need("frames")?.parse().map_err(|_| parse_err("frames"))?;

    let csv_path = dir.join(EPISODE_CSV);
    let text = fs::read_to_string(&csv_path)?;
    let fmt_err = |msg: String| Error::Format {
        path: csv_path.clone(),
        msg,
    };
    let width = 1 + 2 * n_joints + actuated.len();
    let mut frames = Vec::with_capacity(n_frames);
    for (line_no, line) in text.lines().enumerate().skip(1) {
        if line.trim().is_empty() {
            continue;
        }
        let vals: Vec<&str> = line.split(',').collect();
        if vals.len() != width {
            return Err(fmt_err(format!("line {}: expected {width} columns, got {}", line_no + 1, vals.len())));
        }
        let t: usize = vals[0].parse().map_err(|_| fmt_err(format!("line {}: bad frame index", line_no + 1)))?;
        if t != frames.len() {
            return Err(fmt_err(format!("line {}: frame {t} out of order", line_no + 1)));
        }
        let nums = vals[1..]
            .iter()
            .map(|s| s.parse::<f64>())
            .collect::<std::result::Result<Vec<_>, _>>()
            .map_err(|_| fmt_err(format!("line {}: bad number", line_no + 1)))?;
        let img = read_pgm(&frame_path(dir, t, "img"))?;
        let fx = read_pgm(&frame_path(dir, t, "flow_x"))?;
        let fy = read_pgm(&frame_path(dir, t, "flow_y"))?;
        if (fx.width, fx.height) != (img.width, img.height) || (fy.width, fy.height) != (img.width, img.height) {
            return Err(fmt_err(format!("frame {t}: image and flow sizes differ")));
        }
        frames.push(Frame {
            image: img.to_binary(),
            flow: FlowField {
                x: fx.data.iter().map(|&c| decode_flow(c)).collect(),
                y: fy.data.iter().map(|&c| decode_flow(c)).collect(),
            },
            state: ChainState::new(nums[..n_joints].to_vec(), nums[n_joints..2 * n_joints].to_vec()),
            torque: nums[2 * n_joints..].to_vec(),
        });
    }
    if frames.len() != n_frames {
        return Err(fmt_err(format!("expected {n_frames} frames, found {}", frames.len())));
    }
    Ok(Episode {
        scenario,
        seed,
        control_hz,
        tau_max,
        actuated,
        frames,
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct ExperimentConfig {
    /// Binary target image.
    pub target: Image,
    pub horizon: usize,
    /// `None` runs the no-optimization baseline.
    pub method: Option<InitMethod>,
    pub duration_s: f64,
    pub repeats: usize,
    pub seed: u64,
    pub beta: f64,
    pub opt_iters: usize,
}

impl ExperimentConfig {
    pub fn new(target: Image, horizon: usize, method: Option<InitMethod>) -> Self {
        Self {
            target,
            horizon,
            method,
            duration_s: 10.0,
            repeats: 5,
            seed: 0,
            beta: DEFAULT_BETA,
            opt_iters: 1,
        }
    }

    pub fn method_name(&self) -> &'static str {
        self.method.map_or("none", |m| m.name())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct MetricsRow {
    pub repeat: usize,
    pub frame: usize,
    /// Chamfer distance between the frame's image and the target, px.
    pub d_chamfer: f64,
    pub loss_before: f64,
    pub loss_after: f64,
    pub accepted: bool,
    pub wall_ms: f64,
    /// Torque emitted at this frame.
    pub tau: Vec<f64>,
}

/// Closed-loop runs from the system's initial state; one row per frame.
pub fn run_experiment(mut net: Option<&mut DynamicsNet>, system: &System, cfg: &ExperimentConfig) -> Result<Vec<MetricsRow>> {
    if !(cfg.duration_s > 0.0) || cfg.repeats == 0 {
        return Err(Error::InvalidArgument("duration must be positive and repeats at least 1".into()));
    }
    let m = system.actuators();
    let tau_max = system.params.tau_max;
    let mut ctrl = ControlConfig::new(tau_max, cfg.horizon);
    ctrl.opt_iters = cfg.opt_iters;
    ctrl.seed = cfg.seed;
    if let Some(method) = cfg.method {
        method.validate()?;
        let net = net
            .as_deref()
            .ok_or_else(|| Error::InvalidArgument(format!("method `{method}` needs a trained network")))?;
        let nc = net.config();
        if nc.horizon != cfg.horizon || nc.actuators != m {
            return Err(Error::InvalidArgument(format!(
                "network was trained for T={}, M={} but the experiment uses T={}, M={m}",
                nc.horizon, nc.actuators, cfg.horizon
            )));
        }
    }
    let blurred = blur_target(&cfg.target, cfg.beta)?;
    let frames = (cfg.duration_s * system.sim.control_hz).round() as usize;
    let mut rows = Vec::with_capacity(frames * cfg.repeats);
    for repeat in 0..cfg.repeats {
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        rng.set_stream(repeat as u64);
        let mut state = system.initial.clone();
        let mut last = vec![0.0; m];
        let mut prev = TorqueSequence::zeros(m, cfg.horizon);
        for frame in 0..frames {
            let obs = system.observe(&state, &last);
            let d_chamfer = chamfer_distance(&obs.image, &cfg.target)?;
            let out = match (cfg.method, net.as_deref_mut()) {
                (Some(method), Some(net)) => control_step(net, &obs, &blurred, &prev, &ctrl, method, &mut rng)?,
                _ => baseline_step(tau_max, m, cfg.horizon, &mut rng),
            };
            rows.push(MetricsRow {
                repeat,
                frame,
                d_chamfer,
                loss_before: out.diag.loss_before,
                loss_after: out.diag.loss_after,
                accepted: out.diag.accepted,
                wall_ms: out.diag.wall_ms,
                tau: out.tau_now.clone(),
            });
            state = system.step(&state, &out.tau_now)?;
            last = out.tau_now;
            prev = out.next_prev;
        }
    }
    Ok(rows)
}

pub fn metrics_csv(rows: &[MetricsRow]) -> String {
    let m = rows.first().map_or(0, |r| r.tau.len());
    let mut s = String::from("repeat,frame,d_chamfer,loss_before,loss_after,accepted,wall_ms");
    for a in 0..m {
        write!(s, ",tau{a}").expect("string write");
    }
    s.push('\n');
    for r in rows {
        write!(
            s,
            "{},{},{},{},{},{},{}",
            r.repeat, r.frame, r.d_chamfer, r.loss_before, r.loss_after, r.accepted as u8, r.wall_ms
        )
        .expect("string write");
        for t in &r.tau {
            write!(s, ",{t}").expect("string write");
        }
        s.push('\n');
    }
    s
}

pub fn write_metrics_csv(path: &Path, rows: &[MetricsRow]) -> Result<()> {
    fs::write(path, metrics_csv(rows))?;
    Ok(())
}

pub fn read_metrics_csv(path: &Path) -> Result<Vec<MetricsRow>> {
    let text = fs::read_to_string(path)?;
    let err = |line: usize, msg: &str| Error::Format {
        path: path.to_path_buf(),
        msg: format!("line {line}: {msg}"),
    };
    let mut lines = text.lines();
    let header = lines.next().ok_or_else(|| err(1, "empty file"))?;
    if !header.starts_with("repeat,frame,d_chamfer,loss_before,loss_after,accepted,wall_ms") {
        return Err(err(1, "not a metrics file"));
    }
    let cols = header.split(',').count();
    let mut rows = Vec::new();
    for (i, line) in lines.enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let v: Vec<&str> = line.split(',').collect();
        if v.len() != cols {
            return Err(err(i + 2, "wrong column count"));
        }
        let f = |k: usize| v[k].parse::<f64>().map_err(|_| err(i + 2, "bad number"));
        let u = |k: usize| v[k].parse::<usize>().map_err(|_| err(i + 2, "bad integer"));
        rows.push(MetricsRow {
            repeat: u(0)?,
            frame: u(1)?,
            d_chamfer: f(2)?,
            loss_before: f(3)?,
            loss_after: f(4)?,
            accepted: match v[5] {
                "1" => true,
                "0" => false,
                _ => return Err(err(i + 2, "accepted must be 0 or 1")),
            },
            wall_ms: f(6)?,
            tau: (7..cols).map(f).collect::<Result<_>>()?,
        });
    }
    Ok(rows)
}

/// Thresholds 0, 100, …, 3000 px.
pub fn default_thresholds() -> Vec<f64> {
    (0..=30).map(|i| i as f64 * 100.0).collect()
}

/// Fraction of frames with `d_chamfer < th`, for each threshold.
pub fn rate_curve(distances: &[f64], thresholds: &[f64]) -> Result<Vec<f64>> {
    if distances.is_empty() {
        return Err(Error::InvalidArgument("rate curve of zero frames".into()));
    }
    let n = distances.len() as f64;
    Ok(thresholds
        .iter()
        .map(|&th| distances.iter().filter(|&&d| d < th).count() as f64 / n)
        .collect())
}

pub fn chamfer_column(rows: &[MetricsRow]) -> Vec<f64> {
    rows.iter().map(|r| r.d_chamfer).collect()
}

#[derive(Debug, Clone, PartialEq)]
pub struct RateRow {
    pub scenario: String,
    /// `None` for the baseline, which has no horizon.
    pub horizon: Option<usize>,
    pub method: String,
    pub threshold: f64,
    pub rate: f64,
}

pub fn rate_rows(scenario: &str, horizon: Option<usize>, method: &str, rows: &[MetricsRow], thresholds: &[f64]) -> Result<Vec<RateRow>> {
    let rates = rate_curve(&chamfer_column(rows), thresholds)?;
    Ok(thresholds
        .iter()
        .zip(rates)
        .map(|(&threshold, rate)| RateRow {
            scenario: scenario.to_string(),
            horizon,
            method: method.to_string(),
            threshold,
            rate,
        })
        .collect())
}

pub fn rates_csv(rows: &[RateRow]) -> String {
    let mut s = String::from("scenario,T,method,th,rate\n");
    for r in rows {
        let t = r.horizon.map_or("-".to_string(), |t| t.to_string());
        writeln!(s, "{},{t},{},{},{}", r.scenario, r.method, r.threshold, r.rate).expect("string write");
    }
    s
}

#[derive(Debug, Clone, PartialEq)]
pub struct SweepConfig {
    pub scenarios: Vec<Scenario>,
    pub horizons: Vec<usize>,
    pub methods: Vec<InitMethod>,
    pub include_baseline: bool,
    pub frames: usize,
    pub dtau_max: f64,
    pub train: TrainConfig,
    pub duration_s: f64,
    pub repeats: usize,
    pub seed: u64,
    pub beta: f64,
    pub thresholds: Vec<f64>,
}

impl Default for SweepConfig {
    fn default() -> Self {
        Self {
            scenarios: vec![Scenario::RigidPendulum],
            horizons: vec![5, 10, 15],
            methods: InitMethod::ALL.to_vec(),
            include_baseline: true,
            frames: 10_800,
            dtau_max: 0.1,
            train: TrainConfig::default(),
            duration_s: 10.0,
            repeats: 5,
            seed: 0,
            beta: DEFAULT_BETA,
            thresholds: default_thresholds(),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Condition {
    pub scenario: String,
    pub horizon: Option<usize>,
    pub method: String,
    pub rows: Vec<MetricsRow>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SweepOutput {
    pub conditions: Vec<Condition>,
    pub rates: Vec<RateRow>,
    /// Training history per (scenario, T).
    pub histories: Vec<(String, usize, Vec<EpochMetrics>)>,
}

/// Every (scenario, T, method) condition plus one baseline per scenario. Each
/// (scenario, T) cell trains its own network; up to `jobs` cells run at once.
pub fn sweep(cfg: &SweepConfig, jobs: usize, log: &(dyn Fn(&str) + Sync)) -> Result<SweepOutput> {
    if cfg.scenarios.is_empty() || cfg.horizons.is_empty() {
        return Err(Error::InvalidArgument("sweep needs at least one scenario and one T".into()));
    }
    let mut systems = Vec::new();
    let mut episodes = Vec::new();
    for &sc in &cfg.scenarios {
        let system = System::preset(sc);
        log(&format!("{sc}: collecting {} frames", cfg.frames));
        episodes.push(collect_random(&system, cfg.frames, system.params.tau_max, cfg.dtau_max, cfg.seed)?);
        systems.push(system);
    }
    let cells: Vec<(usize, usize)> = (0..systems.len())
        .flat_map(|s| cfg.horizons.iter().map(move |&t| (s, t)))
        .collect();
    let next = AtomicUsize::new(0);
    let results: Mutex<Vec<(usize, Result<(Vec<Condition>, Vec<EpochMetrics>)>)>> = Mutex::new(Vec::new());
    let run_cell = |s: usize, horizon: usize| -> Result<(Vec<Condition>, Vec<EpochMetrics>)> {
        let system = &systems[s];
        let sc = cfg.scenarios[s];
        let data = make_pairs(&episodes[s], horizon, cfg.beta)?;
        let mut net = DynamicsNet::build(DynNetConfig::new(horizon, system.actuators(), system.params.tau_max), cfg.seed)?;
        log(&format!("{sc} T={horizon}: training on {} pairs", data.len()));
        let history = net.train(&data, &cfg.train, |m| {
            log(&format!(
                "{sc} T={horizon} epoch {}: train {:.5} val {:.5} (copy baseline {:.5})",
                m.epoch, m.train_loss, m.val_loss, m.baseline_loss
            ))
        })?;
        drop(data);
        let target = system.image(&default_target_state(sc));
        let mut out = Vec::new();
        for &method in &cfg.methods {
            let mut ec = ExperimentConfig::new(target.clone(), horizon, Some(method));
            ec.duration_s = cfg.duration_s;
            ec.repeats = cfg.repeats;
            ec.seed = cfg.seed;
            ec.beta = cfg.beta;
            let rows = run_experiment(Some(&mut net), system, &ec)?;
            log(&format!("{sc} T={horizon} {method}: {} frames", rows.len()));
            out.push(Condition {
                scenario: sc.name().to_string(),
                horizon: Some(horizon),
                method: method.name().to_string(),
                rows,
            });
        }
        Ok((out, history))
    };
    std::thread::scope(|scope| {
        for _ in 0..jobs.clamp(1, cells.len()) {
            scope.spawn(|| loop {
                let i = next.fetch_add(1, Ordering::SeqCst);
                let Some(&(s, t)) = cells.get(i) else { break };
                let r = run_cell(s, t);
                results.lock().expect("results lock").push((i, r));
            });
        }
    });
    let mut results = results.into_inner().expect("results lock");
    results.sort_by_key(|(i, _)| *i);

    let mut conditions = Vec::new();
    let mut histories = Vec::new();
    for (s, system) in systems.iter().enumerate() {
        let sc = cfg.scenarios[s];
        for (i, r) in &mut results {
            if cells[*i].0 != s {
                continue;
            }
            let (conds, hist) = std::mem::replace(r, Ok((Vec::new(), Vec::new())))?;
            conditions.extend(conds);
            histories.push((sc.name().to_string(), cells[*i].1, hist));
        }
        if cfg.include_baseline {
            let target = system.image(&default_target_state(sc));
            let mut ec = ExperimentConfig::new(target, cfg.horizons[0], None);
            ec.duration_s = cfg.duration_s;
            ec.repeats = cfg.repeats;
            ec.seed = cfg.seed;
            let rows = run_experiment(None, system, &ec)?;
            conditions.push(Condition {
                scenario: sc.name().to_string(),
                horizon: None,
                method: "none".into(),
                rows,
            });
        }
    }
    let mut rates = Vec::new();
    for c in &conditions {
        rates.extend(rate_rows(&c.scenario, c.horizon, &c.method, &c.rows, &cfg.thresholds)?);
    }
    Ok(SweepOutput {
        conditions,
        rates,
        histories,
    })
}

/// Reads sweep settings from `kv`, starting from the defaults.
pub fn sweep_config_from(kv: &KeyValues) -> Result<SweepConfig> {
    let mut c = SweepConfig::default();
    if let Some(v) = kv.get_list::<String>("scenarios")? {
        c.scenarios = v.iter().map(|s| s.parse()).collect::<Result<_>>()?;
    }
    if let Some(v) = kv.get_list("horizons")? {
        c.horizons = v;
    }
    if let Some(v) = kv.get_list::<String>("methods")? {
        c.methods = v.iter().map(|s| s.parse()).collect::<Result<_>>()?;
    }
    if let Some(v) = kv.get_parsed("include_baseline")? {
        c.include_baseline = v;
    }
    if let Some(v) = kv.get_parsed("frames")? {
        c.frames = v;
    }
    if let Some(v) = kv.get_parsed("dtau_max")? {
        c.dtau_max = v;
    }
    if let Some(v) = kv.get_parsed("epochs")? {
        c.train.epochs = v;
    }
    if let Some(v) = kv.get_parsed("batch")? {
        c.train.batch_size = v;
    }
    if let Some(v) = kv.get_parsed("lr")? {
        c.train.lr = v;
    }
    if let Some(v) = kv.get_parsed("duration")? {
        c.duration_s = v;
    }
    if let Some(v) = kv.get_parsed("repeats")? {
        c.repeats = v;
    }
    if let Some(v) = kv.get_parsed("seed")? {
        c.seed = v;
        c.train.seed = v;
    }
    if let Some(v) = kv.get_parsed("beta")? {
        c.beta = v;
    }
    if let Some(v) = kv.get_list("thresholds")? {
        c.thresholds = v;
    }
    if c.horizons.contains(&0) {
        return Err(Error::Config("horizons must be positive".into()));
    }
    Ok(c)
}
