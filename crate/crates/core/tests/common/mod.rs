//! Independent reference implementations shared by the integration tests and the
//! acceptance suite. Nothing here calls the code under test except to obtain the
//! quantity being checked.
#![allow(dead_code)]

use flexdyn::autodiff::{BatchNorm, Conv2d, Deconv2d, Layer, Linear, Mode, Relu, Reshape, Sequential, Sigmoid, Tensor};
use flexdyn::dynnet::{DynNetConfig, DynamicsNet, TorqueSequence};
use flexdyn::sim::ChainParams;
use flexdyn::vision::Image;
use num_complex::Complex64;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

// ---------------------------------------------------------------- images

/// Euclidean distance to the nearest object pixel by exhaustive search, O(n⁴).
pub fn brute_force_dt(img: &Image) -> Vec<f64> {
    let (w, h) = (img.width(), img.height());
    let objects: Vec<(usize, usize)> = (0..h)
        .flat_map(|y| (0..w).map(move |x| (x, y)))
        .filter(|&(x, y)| img.get(x, y) >= 0.5)
        .collect();
    let sentinel = w.max(h) as f64 * std::f64::consts::SQRT_2;
    let mut out = Vec::with_capacity(w * h);
    for y in 0..h {
        for x in 0..w {
            let best = objects
                .iter()
                .map(|&(ox, oy)| {
                    let dx = x as i64 - ox as i64;
                    let dy = y as i64 - oy as i64;
                    (dx * dx + dy * dy) as u64
                })
                .min();
            out.push(best.map_or(sentinel, |d2| (d2 as f64).sqrt()));
        }
    }
    out
}

pub fn brute_force_chamfer(a: &Image, b: &Image) -> f64 {
    let da = brute_force_dt(a);
    let db = brute_force_dt(b);
    let mut total = 0.0;
    for i in 0..a.data().len() {
        total += a.data()[i] as f64 * db[i] + b.data()[i] as f64 * da[i];
    }
    total
}

pub fn scalar_loss(pred: &Image, target: &Image) -> f64 {
    let mut sum = 0.0;
    for y in 0..pred.height() {
        for x in 0..pred.width() {
            let d = pred.get(x, y) as f64 - target.get(x, y) as f64;
            sum += d * d;
        }
    }
    sum / (pred.width() * pred.height()) as f64
}

pub fn random_binary(rng: &mut impl Rng, w: usize, h: usize) -> Image {
    let density = rng.gen_range(0.0..0.4);
    let data = (0..w * h).map(|_| if rng.gen_bool(density) { 1.0 } else { 0.0 }).collect();
    Image::from_vec(w, h, data).unwrap()
}

// ---------------------------------------------------------------- dynamics

/// Point masses of the chain: one at the end of every link, plus the tip mass.
/// Positions follow from relative joint angles measured from straight down.
fn point_positions(p: &ChainParams, q: &[Complex64]) -> Vec<(f64, [Complex64; 2])> {
    let mut out = Vec::new();
    let mut phi = Complex64::new(0.0, 0.0);
    let mut pos = [phi, phi];
    for k in 0..p.n_links {
        phi += q[k];
        let l = p.link_lengths[k];
        pos = [pos[0] + phi.sin() * l, pos[1] - phi.cos() * l];
        out.push((p.link_masses[k], pos));
    }
    out.push((p.tip_mass, pos));
    out
}

const CSTEP: f64 = 1e-30;

/// Jacobians of every point position by complex-step differentiation, which is
/// exact to rounding and shares no code with the simulator.
fn point_jacobians(p: &ChainParams, q: &[f64]) -> Vec<(f64, Vec<[f64; 2]>)> {
    let n = q.len();
    let mut masses: Vec<f64> = p.link_masses.clone();
    masses.push(p.tip_mass);
    let mut jac: Vec<(f64, Vec<[f64; 2]>)> = masses.into_iter().map(|m| (m, vec![[0.0; 2]; n])).collect();
    for j in 0..n {
        let qc: Vec<Complex64> = q
            .iter()
            .enumerate()
            .map(|(i, &v)| Complex64::new(v, if i == j { CSTEP } else { 0.0 }))
            .collect();
        for (k, (_, pos)) in point_positions(p, &qc).iter().enumerate() {
            jac[k].1[j] = [pos[0].im / CSTEP, pos[1].im / CSTEP];
        }
    }
    jac
}

/// `M = Σ m·JᵀJ` from the complex-step Jacobians.
pub fn oracle_mass_matrix(p: &ChainParams, q: &[f64]) -> Vec<f64> {
    let n = q.len();
    let mut m = vec![0.0; n * n];
    for (mass, j) in point_jacobians(p, q) {
        for a in 0..n {
            for b in 0..n {
                m[a * n + b] += mass * (j[a][0] * j[b][0] + j[a][1] * j[b][1]);
            }
        }
    }
    m
}

/// `∂V/∂q` for the gravitational plus spring potential, by complex step.
fn potential_gradient(p: &ChainParams, q: &[f64]) -> Vec<f64> {
    let n = q.len();
    (0..n)
        .map(|j| {
            let qc: Vec<Complex64> = q
                .iter()
                .enumerate()
                .map(|(i, &v)| Complex64::new(v, if i == j { CSTEP } else { 0.0 }))
                .collect();
            let grav: Complex64 = point_positions(p, &qc)
                .iter()
                .map(|(m, pos)| pos[1] * (m * p.gravity))
                .sum();
            let spring = if p.actuated.contains(&j) { 0.0 } else { p.passive_stiffness[j] * q[j] };
            grav.im / CSTEP + spring
        })
        .collect()
}

/// Joint accelerations from the Euler–Lagrange equations
/// `M q̈ + Σ_jk (∂M_ij/∂q_k − ½ ∂M_jk/∂q_i) q̇_j q̇_k + ∂V/∂q = Q`,
/// with `∂M/∂q` taken by central finite differences of the oracle mass matrix.
pub fn lagrangian_accelerations(p: &ChainParams, q: &[f64], qd: &[f64], torque: &[f64]) -> Vec<f64> {
    let n = q.len();
    let h = 1e-5;
    let m = oracle_mass_matrix(p, q);
    let shifted = |k: usize, s: f64| {
        let mut v = q.to_vec();
        v[k] += s;
        v
    };
    let dm: Vec<Vec<f64>> = (0..n)
        .map(|k| {
            let a = oracle_mass_matrix(p, &shifted(k, h));
            let b = oracle_mass_matrix(p, &shifted(k, -h));
            a.iter().zip(&b).map(|(x, y)| (x - y) / (2.0 * h)).collect()
        })
        .collect();
    let dv = potential_gradient(p, q);
    let mut rhs = vec![0.0; n];
    for i in 0..n {
        let mut c = 0.0;
        for j in 0..n {
            for k in 0..n {
                c += (dm[k][i * n + j] - 0.5 * dm[i][j * n + k]) * qd[j] * qd[k];
            }
        }
        let mut force = -p.passive_damping[i] * qd[i];
        if let Some(a) = p.actuated.iter().position(|&j| j == i) {
            force += torque[a];
        }
        if p.floor_enabled {
            force -= p.floor_friction_coulomb[i] * (10.0 * qd[i]).tanh();
        }
        rhs[i] = force - c - dv[i];
    }
    solve(m, rhs)
}

/// Gaussian elimination with partial pivoting.
pub fn solve(mut a: Vec<f64>, mut b: Vec<f64>) -> Vec<f64> {
    let n = b.len();
    for c in 0..n {
        let piv = (c..n).max_by(|&i, &j| a[i * n + c].abs().total_cmp(&a[j * n + c].abs())).unwrap();
        if piv != c {
            for k in 0..n {
                a.swap(c * n + k, piv * n + k);
            }
            b.swap(c, piv);
        }
        for r in c + 1..n {
            let f = a[r * n + c] / a[c * n + c];
            for k in c..n {
                a[r * n + k] -= f * a[c * n + k];
            }
            b[r] -= f * b[c];
        }
    }
    let mut x = vec![0.0; n];
    for r in (0..n).rev() {
        let s: f64 = (r + 1..n).map(|k| a[r * n + k] * x[k]).sum();
        x[r] = (b[r] - s) / a[r * n + r];
    }
    x
}

pub fn random_chain(rng: &mut impl Rng, n: usize) -> ChainParams {
    let mut p = ChainParams::uniform(n, 0.1, 0.1);
    p.link_lengths = (0..n).map(|_| rng.gen_range(0.05..0.4)).collect();
    p.link_masses = (0..n).map(|_| rng.gen_range(0.02..0.5)).collect();
    p.passive_stiffness = (0..n).map(|_| rng.gen_range(0.0..0.2)).collect();
    p.passive_damping = (0..n).map(|_| rng.gen_range(0.0..0.05)).collect();
    p.floor_friction_coulomb = (0..n).map(|_| rng.gen_range(0.0..0.02)).collect();
    p.floor_enabled = rng.gen_bool(0.5);
    p.gravity = if p.floor_enabled { 0.0 } else { 9.81 };
    p.tip_mass = rng.gen_range(0.0..0.2);
    p.tau_max = 1.0;
    p
}

/// `‖a − b‖ / ‖b‖` in the Euclidean norm.
pub fn norm_rel_error(a: &[f64], b: &[f64]) -> f64 {
    let diff: f64 = a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt();
    let scale: f64 = b.iter().map(|y| y * y).sum::<f64>().sqrt();
    diff / scale.max(1e-12)
}

// ---------------------------------------------------------------- gradients

pub const FD_STEP: f64 = 1e-3;
pub const FD_TOL: f64 = 1e-3;

/// Relative error used for gradient checks. Pairs where both values are below
/// `1e-8` in magnitude compare against that floor instead.
pub fn grad_rel_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-8)
}

/// Layer kinds covered by the per-layer gradient check.
pub const LAYER_KINDS: [&str; 8] = [
    "conv2d",
    "deconv2d",
    "linear",
    "batchnorm_train",
    "batchnorm_eval",
    "relu",
    "sigmoid",
    "reshape",
];

fn make_layer(kind: &str, rng: &mut ChaCha8Rng) -> (Layer<f64>, Vec<usize>, Mode) {
    match kind {
        "conv2d" => (Layer::Conv2d(Conv2d::new(2, 3, rng)), vec![2, 2, 6, 6], Mode::Train),
        "deconv2d" => (Layer::Deconv2d(Deconv2d::new(3, 2, rng)), vec![2, 3, 3, 3], Mode::Train),
        "linear" => (Layer::Linear(Linear::new(5, 4, rng)), vec![3, 5], Mode::Train),
        "batchnorm_train" | "batchnorm_eval" => {
            let mut bn = BatchNorm::new(3);
            // Non-trivial affine parameters and running statistics.
            for v in bn.gamma.data_mut() {
                *v = rng.gen_range(0.5..1.5);
            }
            for v in bn.beta.data_mut() {
                *v = rng.gen_range(-0.5..0.5);
            }
            for v in bn.running_mean.data_mut() {
                *v = rng.gen_range(-0.5..0.5);
            }
            for v in bn.running_var.data_mut() {
                *v = rng.gen_range(0.5..2.0);
            }
            let mode = if kind == "batchnorm_train" { Mode::Train } else { Mode::Eval };
            (Layer::BatchNorm(bn), vec![4, 3, 2, 2], mode)
        }
        "relu" => (Layer::Relu(Relu::default()), vec![2, 7], Mode::Train),
        "sigmoid" => (Layer::Sigmoid(Sigmoid::default()), vec![2, 7], Mode::Train),
        "reshape" => (Layer::Reshape(Reshape::new(vec![3, 2])), vec![2, 6], Mode::Train),
        other => panic!("unknown layer kind {other}"),
    }
}

/// Max relative error of backprop against central differences for one layer, over
/// the input and every parameter entry. The loss is `Σ wᵢ·yᵢ` with random `w`.
pub fn check_layer(kind: &str, seed: u64) -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (mut layer, shape, mode) = make_layer(kind, &mut rng);
    let n: usize = shape.iter().product();
    let mut x: Vec<f64> = (0..n)
        .map(|_| {
            // ReLU inputs stay clear of the kink by more than the FD step.
            let v: f64 = rng.gen_range(-1.0..1.0);
            if kind == "relu" { v.signum() * (v.abs() + 0.05) } else { v }
        })
        .collect();
    let y = layer.forward(&Tensor::new(shape.clone(), x.clone()).unwrap(), mode, true).unwrap();
    let w: Vec<f64> = (0..y.len()).map(|_| rng.gen_range(-1.0..1.0)).collect();
    let dx = layer.backward(&w, true).unwrap().unwrap();
    let analytic_params: Vec<Vec<f64>> = layer
        .named_tensors()
        .iter()
        .filter(|(_, t)| t.requires_grad())
        .map(|(_, t)| t.grad().unwrap().to_vec())
        .collect();

    let loss = |layer: &mut Layer<f64>, x: &[f64]| -> f64 {
        let y = layer.forward(&Tensor::new(shape.clone(), x.to_vec()).unwrap(), mode, false).unwrap();
        y.data().iter().zip(&w).map(|(a, b)| a * b).sum()
    };
    // Running statistics move on every train-mode forward; they do not affect
    // train-mode outputs, but keep eval-mode checks on fixed statistics.
    let mut worst: f64 = 0.0;
    for i in 0..n {
        let x0 = x[i];
        x[i] = x0 + FD_STEP;
        let up = loss(&mut layer, &x);
        x[i] = x0 - FD_STEP;
        let down = loss(&mut layer, &x);
        x[i] = x0;
        worst = worst.max(grad_rel_error(dx[i], (up - down) / (2.0 * FD_STEP)));
    }
    let n_params = analytic_params.len();
    for p in 0..n_params {
        let len = analytic_params[p].len();
        for e in 0..len {
            let set = |layer: &mut Layer<f64>, delta: f64| {
                let mut ts = layer.named_tensors_mut();
                let t = ts.iter_mut().filter(|(_, t)| t.requires_grad()).nth(p).unwrap();
                t.1.data_mut()[e] += delta;
            };
            set(&mut layer, FD_STEP);
            let up = loss(&mut layer, &x);
            set(&mut layer, -2.0 * FD_STEP);
            let down = loss(&mut layer, &x);
            set(&mut layer, FD_STEP);
            worst = worst.max(grad_rel_error(analytic_params[p][e], (up - down) / (2.0 * FD_STEP)));
        }
    }
    worst
}

/// Full-size network (T = 10, M = 1) in 64-bit precision.
pub fn composed_net(seed: u64) -> DynamicsNet<f64> {
    DynamicsNet::<f32>::build(DynNetConfig::new(10, 1, 0.2), seed).unwrap().cast()
}

fn random_inputs(net: &DynamicsNet<f64>, rng: &mut ChaCha8Rng, batch: usize) -> (Tensor<f64>, Vec<f64>, Vec<f64>) {
    let c = net.config();
    let s = c.image_size;
    let mut img = vec![0.0; batch * c.in_channels * s * s];
    for b in 0..batch {
        // A random stroke in the image channel, sparse flow in the others.
        let base = b * c.in_channels * s * s;
        let (x0, y0) = (rng.gen_range(8..56), rng.gen_range(8..56));
        let ang: f64 = rng.gen_range(0.0..std::f64::consts::TAU);
        for r in 0..24 {
            let x = (x0 as f64 + r as f64 * ang.cos()).round() as isize;
            let y = (y0 as f64 + r as f64 * ang.sin()).round() as isize;
            if (0..s as isize).contains(&x) && (0..s as isize).contains(&y) {
                let i = y as usize * s + x as usize;
                img[base + i] = 1.0;
                img[base + s * s + i] = rng.gen_range(-0.5..0.5);
                img[base + 2 * s * s + i] = rng.gen_range(-0.5..0.5);
            }
        }
    }
    let extras: Vec<f64> = (0..batch * c.extras_width()).map(|_| rng.gen_range(-1.0..1.0)).collect();
    let target: Vec<f64> = (0..batch * s * s).map(|_| rng.gen_range(0.0..1.0f64).powi(4)).collect();
    (Tensor::new(vec![batch, c.in_channels, s, s], img).unwrap(), extras, target)
}

/// ReLU activation pattern: recorded on the first pass, then imposed.
#[derive(Default)]
pub struct Pattern {
    masks: Vec<Vec<bool>>,
    next: usize,
}

fn run_stage(stage: &mut Sequential<f64>, mut x: Tensor<f64>, mode: Mode, pattern: Option<&mut Pattern>) -> Tensor<f64> {
    let mut pattern = pattern;
    for layer in stage.layers_mut() {
        x = match (layer, pattern.as_deref_mut()) {
            (Layer::Relu(_), Some(p)) => {
                if p.next == p.masks.len() {
                    p.masks.push(x.data().iter().map(|&v| v > 0.0).collect());
                }
                let mask = &p.masks[p.next];
                p.next += 1;
                let data = x.data().iter().zip(mask).map(|(&v, &m)| if m { v } else { 0.0 }).collect();
                Tensor::new(x.shape().to_vec(), data).unwrap()
            }
            (layer, _) => layer.forward(&x, mode, false).unwrap(),
        };
    }
    x
}

/// Test-side composition of the three network stages. With a pattern, every ReLU
/// uses the recorded on/off mask, so finite differences stay inside one linear
/// region of the network.
pub fn composed_forward(
    net: &mut DynamicsNet<f64>,
    img: &Tensor<f64>,
    extras: &[f64],
    mode: Mode,
    mut pattern: Option<&mut Pattern>,
) -> Vec<f64> {
    if let Some(p) = pattern.as_deref_mut() {
        p.next = 0;
    }
    let batch = img.shape()[0];
    let e = extras.len() / batch;
    let [enc, fc, dec] = net.stages_mut();
    let feat = run_stage(enc, img.clone(), mode, pattern.as_deref_mut());
    let d = feat.len() / batch;
    let mut merged = Vec::with_capacity(batch * (d + e));
    for b in 0..batch {
        merged.extend_from_slice(&feat.data()[b * d..(b + 1) * d]);
        merged.extend_from_slice(&extras[b * e..(b + 1) * e]);
    }
    let h = run_stage(fc, Tensor::new(vec![batch, d + e], merged).unwrap(), mode, pattern.as_deref_mut());
    run_stage(dec, h, mode, pattern).into_data()
}

fn mse(pred: &[f64], target: &[f64]) -> f64 {
    pred.iter().zip(target).map(|(p, t)| (p - t) * (p - t)).sum::<f64>() / pred.len() as f64
}

/// Worst relative errors of the composed-network check.
#[derive(Debug, Clone, Copy, Default)]
pub struct ComposedErrors {
    /// Torque inputs in eval mode.
    pub tau: f64,
    /// Sampled parameters in eval mode, batch 4.
    pub params_eval: f64,
    /// Sampled parameters in train mode, batch 16.
    pub params_train: f64,
    /// Max deviation between the test-side composition and `forward_full`.
    pub wiring: f64,
    /// Torque check by plain central differences with ReLUs free to switch
    /// inside the step; reported, not asserted.
    pub tau_free: f64,
}

impl ComposedErrors {
    /// Worst error of the checks with the activation pattern held.
    pub fn worst(&self) -> f64 {
        self.tau.max(self.params_eval).max(self.params_train)
    }
}

fn fd(
    net: &mut DynamicsNet<f64>,
    img: &Tensor<f64>,
    extras: &[f64],
    target: &[f64],
    mode: Mode,
    pattern: &mut Pattern,
    poke: &mut dyn FnMut(&mut DynamicsNet<f64>, &mut [f64], f64),
    with_free: bool,
) -> (f64, f64) {
    let mut x = extras.to_vec();
    let mut eval = |net: &mut DynamicsNet<f64>, x: &mut [f64], d: f64, frozen: bool| {
        poke(net, x, d);
        let out = composed_forward(net, img, x, mode, frozen.then_some(&mut *pattern));
        poke(net, x, -d);
        mse(&out, target)
    };
    // Five-point stencil with step FD_STEP: truncation error O(h⁴).
    let h = FD_STEP;
    let mut stencil = |frozen: bool| {
        (-eval(net, &mut x, 2.0 * h, frozen) + 8.0 * eval(net, &mut x, h, frozen) - 8.0 * eval(net, &mut x, -h, frozen)
            + eval(net, &mut x, -2.0 * h, frozen))
            / (12.0 * h)
    };
    let held = stencil(true);
    let free = if with_free {
        (eval(net, &mut x, FD_STEP, false) - eval(net, &mut x, -FD_STEP, false)) / (2.0 * FD_STEP)
    } else {
        f64::NAN
    };
    (held, free)
}

fn loss_grad(out: &[f64], target: &[f64]) -> Vec<f64> {
    out.iter().zip(target).map(|(p, t)| 2.0 * (p - t) / out.len() as f64).collect()
}

/// Composed-network check against central differences with step `FD_STEP`:
/// every torque input in eval mode (as the controller uses it) and `per_tensor`
/// sampled entries of every parameter tensor in eval mode and in train mode.
///
/// Finite differences use a five-point stencil with the ReLU on/off pattern of the
/// base point held fixed.
pub fn check_composed(seed: u64, per_tensor: usize) -> ComposedErrors {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed);
    let mut net = composed_net(seed);
    let c = net.config().clone();
    let tau_off = 3 * c.actuators;
    let mut r = ComposedErrors::default();

    let (img, extras, target) = random_inputs(&net, &mut rng, 1);
    let mut pattern = Pattern::default();
    let mine = composed_forward(&mut net, &img, &extras, Mode::Eval, Some(&mut pattern));
    let out = net.forward_full(&img, &extras, Mode::Eval, true).unwrap();
    r.wiring = out.data().iter().zip(&mine).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
    let g_extra = net.backward_full(&loss_grad(out.data(), &target)).unwrap();
    net.zero_grad();
    for k in tau_off..c.extras_width() {
        let mut poke = |_: &mut DynamicsNet<f64>, x: &mut [f64], d: f64| x[k] += d;
        let (held, free) = fd(&mut net, &img, &extras, &target, Mode::Eval, &mut pattern, &mut poke, true);
        r.tau = r.tau.max(grad_rel_error(g_extra[k], held));
        r.tau_free = r.tau_free.max(grad_rel_error(g_extra[k], free));
    }

    r.params_eval = check_params(&mut net, &mut rng, per_tensor, Mode::Eval, 4);
    r.params_train = check_params(&mut net, &mut rng, per_tensor, Mode::Train, 16);
    r
}

fn check_params(net: &mut DynamicsNet<f64>, rng: &mut ChaCha8Rng, per_tensor: usize, mode: Mode, batch: usize) -> f64 {
    let (img, extras, target) = random_inputs(net, rng, batch);
    let mut pattern = Pattern::default();
    composed_forward(net, &img, &extras, mode, Some(&mut pattern));
    let out = net.forward_full(&img, &extras, mode, true).unwrap();
    net.backward_full(&loss_grad(out.data(), &target)).unwrap();
    let analytic: Vec<(String, Vec<f64>)> = net
        .named_tensors()
        .into_iter()
        .filter(|(_, t)| t.requires_grad())
        .map(|(n, t)| (n, t.grad().map_or_else(|| vec![0.0; t.len()], |g| g.to_vec())))
        .collect();
    net.zero_grad();
    let mut worst: f64 = 0.0;
    for (name, grad) in &analytic {
        for _ in 0..per_tensor {
            let e = rng.gen_range(0..grad.len());
            let mut poke = |net: &mut DynamicsNet<f64>, _: &mut [f64], d: f64| {
                let mut ts = net.named_tensors_mut();
                let t = ts.iter_mut().find(|(n, _)| n == name).unwrap();
                t.1.data_mut()[e] += d;
            };
            let (held, _) = fd(net, &img, &extras, &target, mode, &mut pattern, &mut poke, false);
            worst = worst.max(grad_rel_error(grad[e], held));
        }
    }
    worst
}

// ---------------------------------------------------------------- generators

/// One random generator case.
#[derive(Debug, Clone)]
pub struct GenCase {
    pub n: usize,
    pub n_constant: usize,
    pub actuators: usize,
    pub horizon: usize,
    pub tau_max: f64,
    pub alpha: f64,
    pub seed: u64,
    /// Previous sequence as fractions of `tau_max`, length `actuators·horizon`.
    pub prev_frac: Vec<f64>,
}

pub fn gen_case_strategy() -> impl proptest::strategy::Strategy<Value = GenCase> {
    use proptest::prelude::*;
    (1usize..=16, 1usize..=3, 1usize..=16, 0.01f64..2.0, 0.0f64..=1.0, any::<u64>())
        .prop_flat_map(|(n, m, t, tau, alpha, seed)| {
            (0..=n, proptest::collection::vec(-1.0f64..=1.0, m * t)).prop_map(move |(nc, prev)| GenCase {
                n,
                n_constant: nc,
                actuators: m,
                horizon: t,
                tau_max: tau,
                alpha,
                seed,
                prev_frac: prev,
            })
        })
}

fn ensure(cond: bool, msg: impl FnOnce() -> String) -> Result<(), String> {
    if cond {
        Ok(())
    } else {
        Err(msg())
    }
}

fn check_shape(seqs: &[TorqueSequence], n: usize, c: &GenCase) -> Result<(), String> {
    ensure(seqs.len() == n, || format!("expected {n} sequences, got {}", seqs.len()))?;
    for s in seqs {
        ensure(s.actuators() == c.actuators && s.horizon() == c.horizon, || "wrong shape".into())?;
        ensure(s.values().len() == c.actuators * c.horizon, || "wrong length".into())?;
        ensure(s.values().iter().all(|v| v.abs() <= c.tau_max), || format!("out of bounds: {:?}", s.values()))?;
    }
    Ok(())
}

/// Checks every generator invariant for one case.
pub fn check_generators(c: &GenCase) -> Result<(), String> {
    use flexdyn::control::{gen_constant, gen_mixed, gen_random, gen_shift, generate, shifted, InitMethod};
    let (m, t, tau) = (c.actuators, c.horizon, c.tau_max);
    let prev = TorqueSequence::from_vec(m, t, c.prev_frac.iter().map(|f| f * tau).collect()).unwrap();

    // Random.
    let mut rng = ChaCha8Rng::seed_from_u64(c.seed);
    let r = gen_random(c.n, tau, m, t, &mut rng);
    check_shape(&r, c.n, c)?;
    let mut rng = ChaCha8Rng::seed_from_u64(c.seed);
    ensure(r == gen_random(c.n, tau, m, t, &mut rng), || "random not reproducible".into())?;

    // Constant.
    let k = gen_constant(c.n, tau, m, t);
    check_shape(&k, c.n, c)?;
    let levels: Vec<f64> = k.iter().map(|s| s.values()[0]).collect();
    for s in &k {
        ensure(s.values().iter().all(|&v| v == s.values()[0]), || "constant sequence varies".into())?;
    }
    if c.n == 1 {
        ensure(levels == [0.0], || format!("N=1 level {levels:?}"))?;
    } else {
        ensure(levels[0] == -tau && levels[c.n - 1] == tau, || format!("endpoints {levels:?}"))?;
        ensure(levels.windows(2).all(|w| w[0] < w[1]), || format!("not increasing {levels:?}"))?;
        for i in 0..c.n {
            ensure(levels[i] == -levels[c.n - 1 - i], || format!("not symmetric {levels:?}"))?;
        }
        let step = 2.0 * tau / (c.n - 1) as f64;
        for w in levels.windows(2) {
            ensure(((w[1] - w[0]) - step).abs() <= 1e-12 * tau.max(1.0), || format!("uneven spacing {levels:?}"))?;
        }
    }

    // Shift relation.
    let base = shifted(&prev);
    for a in 0..m {
        for i in 0..t {
            let want = prev.get(a, (i + 1).min(t - 1));
            ensure(base.get(a, i) == want, || format!("shift[{a},{i}]"))?;
        }
    }
    let mut rng = ChaCha8Rng::seed_from_u64(c.seed);
    let s = gen_shift(&prev, c.n, c.alpha, tau, &mut rng);
    check_shape(&s, c.n, c)?;
    let bound = c.alpha * tau * (1.0 + 1e-12);
    for seq in &s {
        for (v, b) in seq.values().iter().zip(base.values()) {
            // Base is inside the box, so clipping only moves toward it.
            ensure((v - b).abs() <= bound, || format!("noise {v} vs {b} exceeds {bound}"))?;
        }
    }
    let mut rng = ChaCha8Rng::seed_from_u64(c.seed);
    for seq in gen_shift(&prev, c.n, 0.0, tau, &mut rng) {
        ensure(seq == base, || "alpha=0 sample differs from the shift".into())?;
    }

    // Mixed.
    let mut rng = ChaCha8Rng::seed_from_u64(c.seed);
    let x = gen_mixed(&prev, c.n, c.n_constant, c.alpha, tau, &mut rng);
    check_shape(&x, c.n, c)?;
    ensure(x[..c.n_constant] == gen_constant(c.n_constant, tau, m, t)[..], || "mixed constant part".into())?;
    let mut rng = ChaCha8Rng::seed_from_u64(c.seed);
    ensure(
        x[c.n_constant..] == gen_shift(&prev, c.n - c.n_constant, c.alpha, tau, &mut rng)[..],
        || "mixed shift part".into(),
    )?;

    // Dispatch.
    let method = InitMethod::Mixed {
        n: c.n,
        n_constant: c.n_constant,
        alpha: c.alpha,
    };
    let mut rng = ChaCha8Rng::seed_from_u64(c.seed);
    ensure(generate(method, &prev, tau, &mut rng) == x, || "generate(Mixed) differs".into())?;
    let zero = TorqueSequence::zeros(m, t);
    let mut rng = ChaCha8Rng::seed_from_u64(c.seed);
    for seq in gen_shift(&zero, c.n, c.alpha, tau, &mut rng) {
        ensure(seq.values().iter().all(|v| v.abs() <= bound), || "shift from zeros".into())?;
    }
    Ok(())
}

/// Runs `check_generators` on `cases` random cases; returns the first failure.
pub fn run_generator_properties(cases: u32) -> Result<(), String> {
    use proptest::test_runner::{Config, TestCaseError, TestRunner};
    let mut runner = TestRunner::new(Config {
        cases,
        failure_persistence: None,
        ..Config::default()
    });
    runner
        .run(&gen_case_strategy(), |c| check_generators(&c).map_err(TestCaseError::fail))
        .map_err(|e| e.to_string())
}
