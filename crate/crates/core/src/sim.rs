//! Planar under-actuated multi-link chain.
//!
//! Each link is massless with a point mass at its distal end (`link_masses[i]`),
//! and `tip_mass` is added to the last link's end. Joint angles are relative:
//! the absolute angle of link `i` is the sum of `theta[0..=i]`. With gravity
//! enabled, `theta = 0` hangs straight down and positive angles rotate
//! counter-clockwise as seen in the rendered image.
//!
//! The equation of motion is `M(θ)θ̈ + c(θ, θ̇) + g(θ) = τ`, where `τ` gathers the
//! command torque on actuated joints, spring torque on passive joints, viscous
//! damping on every joint and, for the floor variant, regularized Coulomb
//! friction.

use std::fmt;
use std::str::FromStr;

use crate::error::{Error, Result};

/// Slope of the `tanh` used in place of `sign(θ̇)` for floor friction, in s/rad.
pub const FRICTION_TANH_SCALE: f64 = 10.0;

const TORQUE_BOUND_SLACK: f64 = 1e-9;

#[derive(Debug, Clone, PartialEq)]
pub struct ChainParams {
    pub n_links: usize,
    /// Link lengths in m.
    pub link_lengths: Vec<f64>,
    /// Point mass at the distal end of each link, in kg.
    pub link_masses: Vec<f64>,
    /// Indices of the joints that receive command torque (joint 0 is the base).
    pub actuated: Vec<usize>,
    /// Spring stiffness in N·m/rad, one entry per joint; only passive joints use it.
    pub passive_stiffness: Vec<f64>,
    /// Viscous damping in N·m·s/rad, one entry per joint.
    pub passive_damping: Vec<f64>,
    /// Gravitational acceleration in m/s², acting towards -y (down in the image).
    pub gravity: f64,
    pub floor_enabled: bool,
    /// Coulomb friction torque magnitude in N·m, one entry per joint.
    pub floor_friction_coulomb: Vec<f64>,
    /// Torque limit in N·m, shared by all actuators.
    pub tau_max: f64,
    /// Extra point mass at the tip of the last link, in kg.
    pub tip_mass: f64,
}

impl ChainParams {
    /// A uniform chain with the given number of links, actuated only at the base.
    pub fn uniform(n_links: usize, length: f64, mass: f64) -> Self {
        Self {
            n_links,
            link_lengths: vec![length; n_links],
            link_masses: vec![mass; n_links],
            actuated: vec![0],
            passive_stiffness: vec![0.0; n_links],
            passive_damping: vec![0.0; n_links],
            gravity: 9.81,
            floor_enabled: false,
            floor_friction_coulomb: vec![0.0; n_links],
            tau_max: 1.0,
            tip_mass: 0.0,
        }
    }

    pub fn n_actuators(&self) -> usize {
        self.actuated.len()
    }

    pub fn is_actuated(&self, joint: usize) -> bool {
        self.actuated.contains(&joint)
    }

    pub fn total_length(&self) -> f64 {
        self.link_lengths.iter().sum()
    }

    /// Point mass located at the end of link `k`, including the tip mass.
    fn end_mass(&self, k: usize) -> f64 {
        let extra = if k + 1 == self.n_links { self.tip_mass } else { 0.0 };
        self.link_masses[k] + extra
    }

    pub fn validate(&self) -> Result<()> {
        let n = self.n_links;
        let bad = |msg: String| Err(Error::InvalidParams(msg));
        if n == 0 {
            return bad("n_links must be at least 1".into());
        }
        for (name, v) in [
            ("link_lengths", &self.link_lengths),
            ("link_masses", &self.link_masses),
            ("passive_stiffness", &self.passive_stiffness),
            ("passive_damping", &self.passive_damping),
            ("floor_friction_coulomb", &self.floor_friction_coulomb),
        ] {
            if v.len() != n {
                return bad(format!("{name} has {} entries, expected {n}", v.len()));
            }
            if v.iter().any(|x| !x.is_finite()) {
                return bad(format!("{name} contains a non-finite value"));
            }
        }
        if self.link_lengths.iter().any(|&l| l <= 0.0) {
            return bad("link lengths must be positive".into());
        }
        if self.link_masses.iter().any(|&m| m <= 0.0) {
            return bad("link masses must be positive".into());
        }
        if self.passive_stiffness.iter().any(|&k| k < 0.0)
            || self.passive_damping.iter().any(|&d| d < 0.0)
            || self.floor_friction_coulomb.iter().any(|&f| f < 0.0)
        {
            return bad("stiffness, damping and friction must be non-negative".into());
        }
        if self.actuated.is_empty() {
            return bad("at least one joint must be actuated".into());
        }
        if let Some(&j) = self.actuated.iter().find(|&&j| j >= n) {
            return bad(format!("actuated joint {j} out of range for {n} links"));
        }
        let mut sorted = self.actuated.clone();
        sorted.sort_unstable();
        sorted.dedup();
        if sorted.len() != self.actuated.len() {
            return bad("actuated joints must be distinct".into());
        }
        if !(self.tau_max > 0.0 && self.tau_max.is_finite()) {
            return bad("tau_max must be positive".into());
        }
        if !(self.tip_mass >= 0.0 && self.tip_mass.is_finite()) {
            return bad("tip_mass must be non-negative".into());
        }
        if !self.gravity.is_finite() {
            return bad("gravity must be finite".into());
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ChainState {
    /// Relative joint angles in rad.
    pub theta: Vec<f64>,
    /// Joint velocities in rad/s.
    pub theta_dot: Vec<f64>,
}

impl ChainState {
    pub fn at_rest(n_links: usize) -> Self {
        Self {
            theta: vec![0.0; n_links],
            theta_dot: vec![0.0; n_links],
        }
    }

    pub fn new(theta: Vec<f64>, theta_dot: Vec<f64>) -> Self {
        Self { theta, theta_dot }
    }

    pub fn validate(&self, params: &ChainParams) -> Result<()> {
        if self.theta.len() != params.n_links || self.theta_dot.len() != params.n_links {
            return Err(Error::InvalidState(format!(
                "state has {}/{} entries, chain has {} links",
                self.theta.len(),
                self.theta_dot.len(),
                params.n_links
            )));
        }
        if self.theta.iter().chain(&self.theta_dot).any(|x| !x.is_finite()) {
            return Err(Error::InvalidState("non-finite entry".into()));
        }
        Ok(())
    }

    /// Absolute link angles (cumulative sum of the relative joint angles).
    pub fn link_angles(&self) -> Vec<f64> {
        cumsum(&self.theta)
    }

    /// Absolute link angular velocities.
    pub fn link_rates(&self) -> Vec<f64> {
        cumsum(&self.theta_dot)
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SimConfig {
    pub control_hz: f64,
    pub substeps: usize,
}

impl Default for SimConfig {
    fn default() -> Self {
        Self {
            control_hz: 30.0,
            substeps: 10,
        }
    }
}

impl SimConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.control_hz > 0.0 && self.control_hz.is_finite()) {
            return Err(Error::InvalidParams("control_hz must be positive".into()));
        }
        if self.substeps == 0 {
            return Err(Error::InvalidParams("substeps must be at least 1".into()));
        }
        Ok(())
    }

    pub fn frame_dt(&self) -> f64 {
        1.0 / self.control_hz
    }
}

fn cumsum(v: &[f64]) -> Vec<f64> {
    let mut acc = 0.0;
    v.iter()
        .map(|x| {
            acc += x;
            acc
        })
        .collect()
}

/// Planar positions (x, y) of every link end in m, base at the origin.
pub fn link_end_positions(state: &ChainState, params: &ChainParams) -> Vec<[f64; 2]> {
    let mut p = [0.0, 0.0];
    state
        .link_angles()
        .iter()
        .zip(&params.link_lengths)
        .map(|(phi, l)| {
            p[0] += l * phi.sin();
            p[1] -= l * phi.cos();
            p
        })
        .collect()
}

/// Joint-space mass matrix, row-major n×n.
pub fn mass_matrix(state: &ChainState, params: &ChainParams) -> Vec<f64> {
    let n = params.n_links;
    let phi = state.link_angles();
    let dirs: Vec<[f64; 2]> = phi
        .iter()
        .zip(&params.link_lengths)
        .map(|(a, l)| [l * a.cos(), l * a.sin()])
        .collect();
    let mut m = vec![0.0; n * n];
    let mut jac = vec![[0.0; 2]; n];
    for k in 0..n {
        jacobian_columns(&dirs, k, &mut jac);
        let mk = params.end_mass(k);
        for i in 0..=k {
            for j in 0..=k {
                m[i * n + j] += mk * (jac[i][0] * jac[j][0] + jac[i][1] * jac[j][1]);
            }
        }
    }
    m
}

/// Columns `0..=k` of the Jacobian of end point `k`: column j = Σ_{i=j..=k} dirs[i].
fn jacobian_columns(dirs: &[[f64; 2]], k: usize, out: &mut [[f64; 2]]) {
    let mut acc = [0.0, 0.0];
    for j in (0..=k).rev() {
        acc[0] += dirs[j][0];
        acc[1] += dirs[j][1];
        out[j] = acc;
    }
}

/// Generalized non-inertial forces `c(θ,θ̇) + g(θ)` (velocity-product and gravity terms).
fn bias_forces(state: &ChainState, params: &ChainParams) -> Vec<f64> {
    let n = params.n_links;
    let phi = state.link_angles();
    let rate = state.link_rates();
    let dirs: Vec<[f64; 2]> = phi
        .iter()
        .zip(&params.link_lengths)
        .map(|(a, l)| [l * a.cos(), l * a.sin()])
        .collect();
    let mut out = vec![0.0; n];
    let mut jac = vec![[0.0; 2]; n];
    let mut centripetal = [0.0, 0.0];
    for k in 0..n {
        // d/dt of l·φ̇·(cos φ, sin φ) at zero angular acceleration.
        let w2 = rate[k] * rate[k];
        centripetal[0] -= w2 * dirs[k][1];
        centripetal[1] += w2 * dirs[k][0];
        jacobian_columns(&dirs, k, &mut jac);
        let mk = params.end_mass(k);
        // Gravity acts along -y; the potential gradient is m·g·∂y/∂θ.
        let force = [mk * centripetal[0], mk * (centripetal[1] + params.gravity)];
        for (o, col) in out.iter_mut().zip(&jac[..=k]) {
            *o += col[0] * force[0] + col[1] * force[1];
        }
    }
    out
}

/// Joint torques from actuators, springs, damping and floor friction.
fn applied_torques(state: &ChainState, torque: &[f64], params: &ChainParams) -> Vec<f64> {
    let n = params.n_links;
    let mut q = vec![0.0; n];
    for (&j, &t) in params.actuated.iter().zip(torque) {
        q[j] += t;
    }
    for j in 0..n {
        if !params.is_actuated(j) {
            q[j] -= params.passive_stiffness[j] * state.theta[j];
        }
        q[j] -= params.passive_damping[j] * state.theta_dot[j];
        if params.floor_enabled {
            q[j] -= params.floor_friction_coulomb[j] * (FRICTION_TANH_SCALE * state.theta_dot[j]).tanh();
        }
    }
    q
}

fn check_torque(torque: &[f64], params: &ChainParams) -> Result<()> {
    if torque.len() != params.n_actuators() {
        return Err(Error::InvalidTorque(format!(
            "{} torques given for {} actuators",
            torque.len(),
            params.n_actuators()
        )));
    }
    if let Some(t) = torque
        .iter()
        .find(|t| !t.is_finite() || t.abs() > params.tau_max + TORQUE_BOUND_SLACK)
    {
        return Err(Error::InvalidTorque(format!(
            "torque {t} exceeds the limit {}",
            params.tau_max
        )));
    }
    Ok(())
}

/// Joint accelerations θ̈ = M(θ)⁻¹(τ − c(θ,θ̇) − g(θ)).
pub fn dynamics(state: &ChainState, torque: &[f64], params: &ChainParams) -> Result<Vec<f64>> {
    check_torque(torque, params)?;
    state.validate(params)?;
    accelerations(state, torque, params, 0.0)
}

/// Solves `(M + h·K) θ̈ = τ − c − g`, where `K` is the velocity Jacobian of the
/// dissipative torques (damping plus linearized friction). With `h = 0` this is
/// the plain equation of motion; with `h = dt` it makes the velocity update
/// implicit in the dissipative terms.
fn accelerations(state: &ChainState, torque: &[f64], params: &ChainParams, h: f64) -> Result<Vec<f64>> {
    let n = params.n_links;
    let mut m = mass_matrix(state, params);
    if h > 0.0 {
        for j in 0..n {
            let mut k = params.passive_damping[j];
            if params.floor_enabled {
                let sech = 1.0 / (FRICTION_TANH_SCALE * state.theta_dot[j]).cosh();
                k += params.floor_friction_coulomb[j] * FRICTION_TANH_SCALE * sech * sech;
            }
            m[j * n + j] += h * k;
        }
    }
    let bias = bias_forces(state, params);
    let mut rhs: Vec<f64> = applied_torques(state, torque, params)
        .iter()
        .zip(&bias)
        .map(|(q, b)| q - b)
        .collect();
    cholesky_solve(&mut m, &mut rhs, params.n_links).ok_or_else(|| Error::SingularMassMatrix {
        theta: state.theta.clone(),
    })?;
    Ok(rhs)
}

/// In-place Cholesky factorization and solve of a symmetric positive-definite system.
/// Returns `None` when a pivot is not safely positive.
fn cholesky_solve(a: &mut [f64], b: &mut [f64], n: usize) -> Option<()> {
    let scale = (0..n).map(|i| a[i * n + i].abs()).fold(0.0, f64::max);
    let tol = scale * 1e-14;
    for j in 0..n {
        let mut d = a[j * n + j];
        for k in 0..j {
            d -= a[j * n + k] * a[j * n + k];
        }
        if !(d > tol) {
            return None;
        }
        let d = d.sqrt();
        a[j * n + j] = d;
        for i in j + 1..n {
            let mut s = a[i * n + j];
            for k in 0..j {
                s -= a[i * n + k] * a[j * n + k];
            }
            a[i * n + j] = s / d;
        }
    }
    for i in 0..n {
        let mut s = b[i];
        for k in 0..i {
            s -= a[i * n + k] * b[k];
        }
        b[i] = s / a[i * n + i];
    }
    for i in (0..n).rev() {
        let mut s = b[i];
        for k in i + 1..n {
            s -= a[k * n + i] * b[k];
        }
        b[i] = s / a[i * n + i];
    }
    Some(())
}

/// Advances one control frame using `substeps` semi-implicit Euler steps with the
/// command torque held constant. Damping and friction enter the velocity update
/// implicitly (linearized), which keeps light distal links stable; without
/// dissipation the scheme is the ordinary symplectic Euler.
pub fn step(state: &ChainState, torque: &[f64], params: &ChainParams, config: &SimConfig) -> Result<ChainState> {
    check_torque(torque, params)?;
    config.validate()?;
    state.validate(params)?;
    let dt = config.frame_dt() / config.substeps as f64;
    let mut s = state.clone();
    for _ in 0..config.substeps {
        let acc = accelerations(&s, torque, params, dt)?;
        for j in 0..params.n_links {
            s.theta_dot[j] += acc[j] * dt;
            s.theta[j] += s.theta_dot[j] * dt;
        }
    }
    if s.theta.iter().chain(&s.theta_dot).any(|x| !x.is_finite()) {
        return Err(Error::NonFiniteState { theta: s.theta });
    }
    Ok(s)
}

/// Kinetic plus potential energy in J. Gravitational potential is measured from
/// the hanging rest configuration, so a chain at rest straight down has zero energy;
/// passive springs contribute `k·θ²/2`.
pub fn energy(state: &ChainState, params: &ChainParams) -> f64 {
    let n = params.n_links;
    let m = mass_matrix(state, params);
    let mut kinetic = 0.0;
    for i in 0..n {
        for j in 0..n {
            kinetic += state.theta_dot[i] * m[i * n + j] * state.theta_dot[j];
        }
    }
    kinetic *= 0.5;
    let mut reach = 0.0;
    let mut potential = 0.0;
    for (k, p) in link_end_positions(state, params).iter().enumerate() {
        reach += params.link_lengths[k];
        potential += params.end_mass(k) * params.gravity * (p[1] + reach);
    }
    for j in 0..n {
        if !params.is_actuated(j) {
            potential += 0.5 * params.passive_stiffness[j] * state.theta[j] * state.theta[j];
        }
    }
    kinetic + potential
}

/// The experiment presets.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Scenario {
    /// A single actuated rod with a weight at its tip; the torque limit cannot hold
    /// it horizontal, so raising it takes a swing.
    RigidPendulum,
    /// A light string of passive spring-damper joints hanging from one actuated joint.
    FlexibleChain,
    /// The flexible chain lying on a horizontal floor, seen from above: no in-plane
    /// gravity, Coulomb friction on every joint.
    ChainOnFloor,
}

impl Scenario {
    pub const ALL: [Scenario; 3] = [Scenario::RigidPendulum, Scenario::FlexibleChain, Scenario::ChainOnFloor];

    pub fn name(self) -> &'static str {
        match self {
            Scenario::RigidPendulum => "rigid_pendulum",
            Scenario::FlexibleChain => "flexible_chain",
            Scenario::ChainOnFloor => "chain_on_floor",
        }
    }

    pub fn params(self) -> ChainParams {
        match self {
            Scenario::RigidPendulum => ChainParams {
                n_links: 1,
                link_lengths: vec![0.3],
                link_masses: vec![0.05],
                actuated: vec![0],
                passive_stiffness: vec![0.0],
                passive_damping: vec![0.01],
                gravity: 9.81,
                floor_enabled: false,
                floor_friction_coulomb: vec![0.0],
                tau_max: 0.2,
                tip_mass: 0.05,
            },
            Scenario::FlexibleChain => {
                let n = 8;
                // Joint 0 is the motor arm: heavier and more damped than the string.
                let mut damping = vec![0.002; n];
                damping[0] = 0.05;
                let mut masses = vec![0.01; n];
                masses[0] = 0.1;
                ChainParams {
                    n_links: n,
                    link_lengths: vec![0.04; n],
                    link_masses: masses,
                    actuated: vec![0],
                    passive_stiffness: vec![0.01; n],
                    passive_damping: damping,
                    gravity: 9.81,
                    floor_enabled: false,
                    floor_friction_coulomb: vec![0.0; n],
                    tau_max: 0.2,
                    tip_mass: 0.0,
                }
            }
            Scenario::ChainOnFloor => {
                let mut p = Scenario::FlexibleChain.params();
                p.gravity = 0.0;
                p.floor_enabled = true;
                p.floor_friction_coulomb = vec![0.002; p.n_links];
                p.floor_friction_coulomb[0] = 0.03;
                p
            }
        }
    }

    pub fn initial_state(self) -> ChainState {
        ChainState::at_rest(self.params().n_links)
    }

    /// Preset parameters and the at-rest starting state.
    pub fn preset(self) -> (ChainParams, ChainState) {
        (self.params(), self.initial_state())
    }
}

impl fmt::Display for Scenario {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Scenario {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Scenario::ALL
            .into_iter()
            .find(|sc| sc.name() == s)
            .ok_or_else(|| Error::UnknownScenario(s.to_string()))
    }
}

/// Looks up a preset by name.
pub fn scenario(name: &str) -> Result<(ChainParams, ChainState)> {
    Ok(name.parse::<Scenario>()?.preset())
}
