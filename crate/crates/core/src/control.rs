//! Candidate generation and the per-frame optimize-by-backprop control cycle.

use std::fmt;
use std::str::FromStr;
use std::time::Instant;

use rand::Rng;

use crate::dynnet::{DynamicsNet, Observation, TorqueSequence};
use crate::error::{Error, Result};
use crate::vision::{prediction_loss, Image};

/// Gradients with a smaller norm are treated as zero and no step is taken.
pub const MIN_GRAD_NORM: f64 = 1e-12;

/// How the `N` candidate torque sequences of a frame are produced.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum InitMethod {
    Random { n: usize },
    Constant { n: usize },
    Shift { n: usize, alpha: f64 },
    Mixed { n: usize, n_constant: usize, alpha: f64 },
}

impl InitMethod {
    pub const DEFAULT_N: usize = 10;
    pub const DEFAULT_ALPHA: f64 = 0.25;
    pub const DEFAULT_N_CONSTANT: usize = 3;

    pub const ALL: [InitMethod; 4] = [
        InitMethod::Random { n: Self::DEFAULT_N },
        InitMethod::Constant { n: Self::DEFAULT_N },
        InitMethod::Shift {
            n: Self::DEFAULT_N,
            alpha: Self::DEFAULT_ALPHA,
        },
        InitMethod::Mixed {
            n: Self::DEFAULT_N,
            n_constant: Self::DEFAULT_N_CONSTANT,
            alpha: Self::DEFAULT_ALPHA,
        },
    ];

    pub fn name(&self) -> &'static str {
        match self {
            InitMethod::Random { .. } => "random",
            InitMethod::Constant { .. } => "constant",
            InitMethod::Shift { .. } => "shift",
            InitMethod::Mixed { .. } => "mixed",
        }
    }

    pub fn n(&self) -> usize {
        match *self {
            InitMethod::Random { n } | InitMethod::Constant { n } | InitMethod::Shift { n, .. } | InitMethod::Mixed { n, .. } => n,
        }
    }

    /// Same method with different `N`, `alpha` and `N_constant` where applicable.
    pub fn with(self, n: usize, alpha: f64, n_constant: usize) -> Self {
        match self {
            InitMethod::Random { .. } => InitMethod::Random { n },
            InitMethod::Constant { .. } => InitMethod::Constant { n },
            InitMethod::Shift { .. } => InitMethod::Shift { n, alpha },
            InitMethod::Mixed { .. } => InitMethod::Mixed { n, n_constant, alpha },
        }
    }

    pub fn validate(&self) -> Result<()> {
        let n = self.n();
        if n == 0 {
            return Err(Error::InvalidArgument("N must be at least 1".into()));
        }
        match *self {
            InitMethod::Shift { alpha, .. } | InitMethod::Mixed { alpha, .. } if !(0.0..=1.0).contains(&alpha) => {
                Err(Error::InvalidArgument(format!("alpha must lie in [0, 1], got {alpha}")))
            }
            InitMethod::Mixed { n_constant, .. } if n_constant > n => {
                Err(Error::InvalidArgument(format!("N_constant ({n_constant}) exceeds N ({n})")))
            }
            _ => Ok(()),
        }
    }
}

impl fmt::Display for InitMethod {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for InitMethod {
    type Err = Error;

    /// Parses a method name with default parameters.
    fn from_str(s: &str) -> Result<Self> {
        InitMethod::ALL
            .into_iter()
            .find(|m| m.name() == s.trim().to_ascii_lowercase())
            .ok_or_else(|| Error::InvalidArgument(format!("unknown method `{s}` (random, constant, shift, mixed)")))
    }
}

/// `n` sequences with entries i.i.d. uniform on `[−τ_max, τ_max]`.
pub fn gen_random(n: usize, tau_max: f64, actuators: usize, horizon: usize, rng: &mut impl Rng) -> Vec<TorqueSequence> {
    (0..n)
        .map(|_| {
            let v = (0..actuators * horizon).map(|_| rng.gen_range(-tau_max..=tau_max)).collect();
            TorqueSequence::from_vec(actuators, horizon, v).expect("sized")
        })
        .collect()
}

/// Constant-in-time sequences at `n` levels evenly spaced over `[−τ_max, τ_max]`,
/// endpoints included. Every actuator gets the same level; `n = 1` gives zeros.
pub fn gen_constant(n: usize, tau_max: f64, actuators: usize, horizon: usize) -> Vec<TorqueSequence> {
    (0..n)
        .map(|i| {
            let level = if n == 1 {
                0.0
            } else {
                // Mirrored levels are exact negatives and the endpoints exactly ±τ_max.
                tau_max * (((2 * i) as f64 - (n - 1) as f64) / (n - 1) as f64)
            };
            TorqueSequence::from_vec(actuators, horizon, vec![level; actuators * horizon]).expect("sized")
        })
        .collect()
}

/// `prev` advanced by one frame: entry `t` takes `t+1`, the last entry repeats.
pub fn shifted(prev: &TorqueSequence) -> TorqueSequence {
    let (m, t) = (prev.actuators(), prev.horizon());
    let mut out = TorqueSequence::zeros(m, t);
    for a in 0..m {
        for k in 0..t {
            out.set(a, k, prev.get(a, (k + 1).min(t - 1)));
        }
    }
    out
}

/// Shifted `prev` plus i.i.d. noise on `[−α·τ_max, α·τ_max]`, clipped to the bounds.
pub fn gen_shift(prev: &TorqueSequence, n: usize, alpha: f64, tau_max: f64, rng: &mut impl Rng) -> Vec<TorqueSequence> {
    let base = shifted(prev);
    let amp = alpha * tau_max;
    (0..n)
        .map(|_| {
            let mut s = base.clone();
            if amp > 0.0 {
                s.values_mut().iter_mut().for_each(|v| *v += rng.gen_range(-amp..=amp));
            }
            s.clip(tau_max);
            s
        })
        .collect()
}

/// `n_constant` constant sequences followed by `n − n_constant` shifted ones.
pub fn gen_mixed(
    prev: &TorqueSequence,
    n: usize,
    n_constant: usize,
    alpha: f64,
    tau_max: f64,
    rng: &mut impl Rng,
) -> Vec<TorqueSequence> {
    let k = n_constant.min(n);
    let mut out = gen_constant(k, tau_max, prev.actuators(), prev.horizon());
    out.extend(gen_shift(prev, n - k, alpha, tau_max, rng));
    out
}

/// Candidates for one frame. `prev` is the previous frame's chosen sequence
/// (all zeros on the first frame).
pub fn generate(method: InitMethod, prev: &TorqueSequence, tau_max: f64, rng: &mut impl Rng) -> Vec<TorqueSequence> {
    match method {
        InitMethod::Random { n } => gen_random(n, tau_max, prev.actuators(), prev.horizon(), rng),
        InitMethod::Constant { n } => gen_constant(n, tau_max, prev.actuators(), prev.horizon()),
        InitMethod::Shift { n, alpha } => gen_shift(prev, n, alpha, tau_max, rng),
        InitMethod::Mixed { n, n_constant, alpha } => gen_mixed(prev, n, n_constant, alpha, tau_max, rng),
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ControlConfig {
    /// Step length of the normalized gradient update, N·m.
    pub gamma: f64,
    pub tau_max: f64,
    pub opt_iters: usize,
    pub horizon: usize,
    pub seed: u64,
}

impl ControlConfig {
    pub fn new(tau_max: f64, horizon: usize) -> Self {
        Self {
            gamma: 0.25 * tau_max,
            tau_max,
            opt_iters: 1,
            horizon,
            seed: 0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.gamma > 0.0 && self.gamma.is_finite()) {
            return Err(Error::InvalidArgument(format!("gamma must be positive, got {}", self.gamma)));
        }
        if !(self.tau_max > 0.0 && self.tau_max.is_finite()) {
            return Err(Error::InvalidArgument(format!("tau_max must be positive, got {}", self.tau_max)));
        }
        if self.opt_iters == 0 || self.horizon == 0 {
            return Err(Error::InvalidArgument("opt_iters and T must be at least 1".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ControlDiagnostics {
    /// Loss of every candidate before optimization.
    pub candidate_losses: Vec<f64>,
    pub selected: usize,
    pub loss_before: f64,
    /// Loss of the optimized sequence; equals `loss_before` when no step was taken.
    pub loss_after: f64,
    pub accepted: bool,
    /// The gradient was numerically zero and the update was skipped.
    pub zero_gradient: bool,
    pub wall_ms: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ControlOutput {
    /// Torque to apply now, one per actuator.
    pub tau_now: Vec<f64>,
    /// Sequence to shift on the next frame.
    pub next_prev: TorqueSequence,
    pub diag: ControlDiagnostics,
}

/// Index of the smallest loss; ties go to the lowest index.
pub fn argmin(losses: &[f64]) -> Option<usize> {
    let mut best: Option<usize> = None;
    for (i, &l) in losses.iter().enumerate() {
        if best.is_none_or(|b| l < losses[b]) {
            best = Some(i);
        }
    }
    best
}

fn l2(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

/// One control cycle: generate candidates, score them with a single encoding and a
/// batched prediction, refine the best by normalized gradient steps, and keep the
/// refinement only if it lowers the predicted loss.
pub fn control_step(
    net: &mut DynamicsNet,
    obs: &Observation,
    blurred_target: &Image,
    prev_opt: &TorqueSequence,
    cfg: &ControlConfig,
    method: InitMethod,
    rng: &mut impl Rng,
) -> Result<ControlOutput> {
    let start = Instant::now();
    cfg.validate()?;
    method.validate()?;
    if net.config().horizon != cfg.horizon || prev_opt.horizon() != cfg.horizon {
        return Err(Error::InvalidArgument(format!(
            "horizon mismatch: network T={}, controller T={}, previous command T={}",
            net.config().horizon,
            cfg.horizon,
            prev_opt.horizon()
        )));
    }
    let candidates = generate(method, prev_opt, cfg.tau_max, rng);
    let feature = net.encode(obs)?;
    let predictions = net.predict_batch(&feature, &obs.joints, &candidates)?;
    let candidate_losses = predictions
        .iter()
        .map(|p| prediction_loss(p, blurred_target))
        .collect::<Result<Vec<_>>>()?;
    let selected = argmin(&candidate_losses).expect("at least one candidate");
    let tau_init = &candidates[selected];
    let loss_before = candidate_losses[selected];

    let mut tau = tau_init.clone();
    let mut zero_gradient = false;
    let mut stepped = false;
    for _ in 0..cfg.opt_iters {
        let (_, g) = net.loss_and_tau_grad(&feature, &obs.joints, &tau, blurred_target)?;
        let norm = l2(&g);
        if !(norm >= MIN_GRAD_NORM) {
            zero_gradient = true;
            break;
        }
        let step = cfg.gamma / norm;
        tau.values_mut().iter_mut().zip(&g).for_each(|(v, gi)| *v -= step * gi);
        tau.clip(cfg.tau_max);
        stepped = true;
    }
    let loss_after = if stepped {
        prediction_loss(&net.predict(&feature, &obs.joints, &tau)?, blurred_target)?
    } else {
        loss_before
    };
    let accepted = stepped && loss_after < loss_before;
    let chosen = if accepted { tau } else { tau_init.clone() };
    Ok(ControlOutput {
        tau_now: chosen.first(),
        next_prev: chosen,
        diag: ControlDiagnostics {
            candidate_losses,
            selected,
            loss_before,
            loss_after,
            accepted,
            zero_gradient,
            wall_ms: start.elapsed().as_secs_f64() * 1e3,
        },
    })
}

/// The no-optimization baseline: one random sequence, its first entry applied.
pub fn baseline_step(tau_max: f64, actuators: usize, horizon: usize, rng: &mut impl Rng) -> ControlOutput {
    let start = Instant::now();
    let seq = gen_random(1, tau_max, actuators, horizon, rng).remove(0);
    ControlOutput {
        tau_now: seq.first(),
        next_prev: seq,
        diag: ControlDiagnostics {
            candidate_losses: Vec::new(),
            selected: 0,
            loss_before: f64::NAN,
            loss_after: f64::NAN,
            accepted: false,
            zero_gradient: false,
            wall_ms: start.elapsed().as_secs_f64() * 1e3,
        },
    }
}
