//! Rendering, image preprocessing, the blurred-target loss and the chamfer metric.
//!
//! Images are row-major with pixel `(x, y)` covering `[x, x+1) × [y, y+1)` in pixel
//! coordinates; y grows downwards. The pipeline works on 64×64 frames, but the
//! distance-transform and metric functions accept any size.

use std::f64::consts::SQRT_2;

use crate::error::{Error, Result};
use crate::sim::{link_end_positions, ChainParams, ChainState, Scenario};

pub const IMAGE_SIZE: usize = 64;
pub const DEFAULT_STROKE_PX: f64 = 3.0;
/// Flow magnitudes are clamped to this many px/frame per axis.
pub const FLOW_CLAMP: f32 = 8.0;
/// Scaling factor of the blurred target.
pub const DEFAULT_BETA: f64 = 0.5;
pub const BINARY_THRESHOLD: f32 = 0.5;

/// Grayscale image with values in `[0, 1]`; binary images hold exactly 0 or 1.
#[derive(Debug, Clone, PartialEq)]
pub struct Image {
    width: usize,
    height: usize,
    data: Vec<f32>,
}

impl Image {
    pub fn new(width: usize, height: usize) -> Self {
        Self {
            width,
            height,
            data: vec![0.0; width * height],
        }
    }

    /// An all-zero 64×64 frame.
    pub fn blank() -> Self {
        Self::new(IMAGE_SIZE, IMAGE_SIZE)
    }

    pub fn filled(width: usize, height: usize, value: f32) -> Self {
        Self {
            width,
            height,
            data: vec![value; width * height],
        }
    }

    pub fn from_vec(width: usize, height: usize, data: Vec<f32>) -> Result<Self> {
        if data.len() != width * height {
            return Err(Error::InvalidArgument(format!(
                "image data has {} values, expected {width}×{height}",
                data.len()
            )));
        }
        if let Some(v) = data.iter().find(|v| !(0.0..=1.0).contains(*v)) {
            return Err(Error::InvalidArgument(format!("pixel value {v} outside [0, 1]")));
        }
        Ok(Self { width, height, data })
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn get(&self, x: usize, y: usize) -> f32 {
        self.data[y * self.width + x]
    }

    pub fn set(&mut self, x: usize, y: usize, v: f32) {
        self.data[y * self.width + x] = v;
    }

    pub fn is_binary(&self) -> bool {
        self.data.iter().all(|&v| v == 0.0 || v == 1.0)
    }

    pub fn count_object(&self) -> usize {
        self.data.iter().filter(|&&v| v >= BINARY_THRESHOLD).count()
    }

    fn same_shape(&self, other: &Image) -> bool {
        self.width == other.width && self.height == other.height
    }

    fn map(&self, f: impl Fn(f32) -> f32) -> Image {
        Image {
            width: self.width,
            height: self.height,
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }
}

/// Per-pixel displacement in px/frame, x and y planes.
#[derive(Debug, Clone, PartialEq)]
pub struct FlowField {
    pub x: Vec<f32>,
    pub y: Vec<f32>,
}

impl FlowField {
    pub fn zeros() -> Self {
        Self {
            x: vec![0.0; IMAGE_SIZE * IMAGE_SIZE],
            y: vec![0.0; IMAGE_SIZE * IMAGE_SIZE],
        }
    }

    pub fn magnitude(&self, idx: usize) -> f32 {
        self.x[idx].hypot(self.y[idx])
    }

    /// Snaps every component onto the 8-bit storage grid, so the field survives a
    /// PGM round trip unchanged.
    pub fn quantized(&self) -> FlowField {
        FlowField {
            x: self.x.iter().map(|&v| decode_flow(encode_flow(v))).collect(),
            y: self.y.iter().map(|&v| decode_flow(encode_flow(v))).collect(),
        }
    }
}

/// Flow component to its 8-bit code: 127 is zero, 0 and 254 are ∓8 px/frame.
pub fn encode_flow(v: f32) -> u8 {
    let c = (v.clamp(-FLOW_CLAMP, FLOW_CLAMP) * 127.0 / FLOW_CLAMP).round() + 127.0;
    c as u8
}

pub fn decode_flow(code: u8) -> f32 {
    (code.min(254) as f32 - 127.0) * FLOW_CLAMP / 127.0
}

/// Euclidean distance of each pixel to the nearest object pixel, in px.
#[derive(Debug, Clone, PartialEq)]
pub struct DistanceMap {
    width: usize,
    height: usize,
    data: Vec<f64>,
}

impl DistanceMap {
    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn get(&self, x: usize, y: usize) -> f64 {
        self.data[y * self.width + x]
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }
}

/// Maps metres in the chain plane to pixels.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Camera {
    pub scale_px_per_m: f64,
    /// Pixel position of the chain base.
    pub origin_px: [f64; 2],
    pub stroke_px: f64,
}

impl Camera {
    pub fn new(scale_px_per_m: f64, origin_px: [f64; 2]) -> Self {
        Self {
            scale_px_per_m,
            origin_px,
            stroke_px: DEFAULT_STROKE_PX,
        }
    }

    /// View with the base at the image centre and the fully stretched chain reaching
    /// 27 px, which keeps it inside the frame in every direction.
    pub fn for_scenario(scenario: Scenario) -> Self {
        Self::for_params(&scenario.params())
    }

    pub fn for_params(params: &ChainParams) -> Self {
        Self::new(27.0 / params.total_length(), [32.0, 32.0])
    }

    pub fn project(&self, p: [f64; 2]) -> [f64; 2] {
        [
            self.origin_px[0] + self.scale_px_per_m * p[0],
            self.origin_px[1] - self.scale_px_per_m * p[1],
        ]
    }
}

fn chain_polyline(state: &ChainState, params: &ChainParams, camera: &Camera) -> Vec<[f64; 2]> {
    std::iter::once(camera.project([0.0, 0.0]))
        .chain(link_end_positions(state, params).into_iter().map(|p| camera.project(p)))
        .collect()
}

/// Closest point of the polyline to `p`: (distance, segment index, fraction along the segment).
fn nearest_on_polyline(poly: &[[f64; 2]], p: [f64; 2]) -> (f64, usize, f64) {
    let mut best = (f64::INFINITY, 0, 0.0);
    for (i, w) in poly.windows(2).enumerate() {
        let (a, b) = (w[0], w[1]);
        let d = [b[0] - a[0], b[1] - a[1]];
        let len2 = d[0] * d[0] + d[1] * d[1];
        let t = if len2 > 0.0 {
            (((p[0] - a[0]) * d[0] + (p[1] - a[1]) * d[1]) / len2).clamp(0.0, 1.0)
        } else {
            0.0
        };
        let q = [a[0] + t * d[0] - p[0], a[1] + t * d[1] - p[1]];
        let dist = q[0].hypot(q[1]);
        if dist < best.0 {
            best = (dist, i, t);
        }
    }
    best
}

/// Pixel coverage of a round-capped stroke, with a one-pixel linear ramp at the edge.
fn stroke_coverage(dist: f64, stroke: f64) -> f64 {
    (stroke / 2.0 + 0.5 - dist).clamp(0.0, 1.0)
}

/// Anti-aliased grayscale rendering of the chain as a polyline from the base.
pub fn render_chain(state: &ChainState, params: &ChainParams, camera: &Camera) -> Image {
    let poly = chain_polyline(state, params, camera);
    let mut img = Image::blank();
    for y in 0..IMAGE_SIZE {
        for x in 0..IMAGE_SIZE {
            let (d, _, _) = nearest_on_polyline(&poly, [x as f64 + 0.5, y as f64 + 0.5]);
            img.set(x, y, stroke_coverage(d, camera.stroke_px) as f32);
        }
    }
    img
}

/// Ground-truth flow: every pixel the stroke touches gets the image-plane velocity of
/// the nearest chain point, converted to px/frame and clamped; all other pixels are 0.
pub fn render_flow(state: &ChainState, params: &ChainParams, camera: &Camera, control_hz: f64) -> FlowField {
    let poly = chain_polyline(state, params, camera);
    let phi = state.link_angles();
    let rate = state.link_rates();
    // Velocity (m/s) of each link's proximal end, and each link's tip velocity relative to it.
    let mut base_vel = Vec::with_capacity(params.n_links);
    let mut rel_vel = Vec::with_capacity(params.n_links);
    let mut v = [0.0, 0.0];
    for k in 0..params.n_links {
        base_vel.push(v);
        let l = params.link_lengths[k];
        let r = [l * rate[k] * phi[k].cos(), l * rate[k] * phi[k].sin()];
        rel_vel.push(r);
        v = [v[0] + r[0], v[1] + r[1]];
    }
    let px_per_frame = camera.scale_px_per_m / control_hz;
    let mut flow = FlowField::zeros();
    for y in 0..IMAGE_SIZE {
        for x in 0..IMAGE_SIZE {
            let (d, seg, t) = nearest_on_polyline(&poly, [x as f64 + 0.5, y as f64 + 0.5]);
            if stroke_coverage(d, camera.stroke_px) <= 0.0 {
                continue;
            }
            let vx = base_vel[seg][0] + t * rel_vel[seg][0];
            let vy = base_vel[seg][1] + t * rel_vel[seg][1];
            let idx = y * IMAGE_SIZE + x;
            flow.x[idx] = ((vx * px_per_frame) as f32).clamp(-FLOW_CLAMP, FLOW_CLAMP);
            flow.y[idx] = ((-vy * px_per_frame) as f32).clamp(-FLOW_CLAMP, FLOW_CLAMP);
        }
    }
    flow
}

/// 3×3 Gaussian blur (σ = 1) with replicated borders.
pub fn gaussian_blur(img: &Image) -> Image {
    let w1 = (-0.5f64).exp();
    let w2 = (-1.0f64).exp();
    let norm = 1.0 + 4.0 * w1 + 4.0 * w2;
    let kernel = [
        [w2 / norm, w1 / norm, w2 / norm],
        [w1 / norm, 1.0 / norm, w1 / norm],
        [w2 / norm, w1 / norm, w2 / norm],
    ];
    let (w, h) = (img.width as isize, img.height as isize);
    let mut out = Image::new(img.width, img.height);
    for y in 0..h {
        for x in 0..w {
            let mut acc = 0.0f64;
            for (ky, row) in kernel.iter().enumerate() {
                for (kx, k) in row.iter().enumerate() {
                    let sx = (x + kx as isize - 1).clamp(0, w - 1) as usize;
                    let sy = (y + ky as isize - 1).clamp(0, h - 1) as usize;
                    acc += k * img.get(sx, sy) as f64;
                }
            }
            out.set(x as usize, y as usize, acc.clamp(0.0, 1.0) as f32);
        }
    }
    out
}

pub fn threshold(img: &Image, level: f32) -> Image {
    img.map(|v| if v >= level { 1.0 } else { 0.0 })
}

/// Binary 3×3 morphology; pixels outside the image are ignored.
fn morph(img: &Image, dilate: bool) -> Image {
    let (w, h) = (img.width as isize, img.height as isize);
    let mut out = Image::new(img.width, img.height);
    for y in 0..h {
        for x in 0..w {
            let mut v = if dilate { 0.0f32 } else { 1.0f32 };
            for dy in -1..=1 {
                for dx in -1..=1 {
                    let (sx, sy) = (x + dx, y + dy);
                    if sx < 0 || sy < 0 || sx >= w || sy >= h {
                        continue;
                    }
                    let s = img.get(sx as usize, sy as usize);
                    v = if dilate { v.max(s) } else { v.min(s) };
                }
            }
            out.set(x as usize, y as usize, v);
        }
    }
    out
}

pub fn dilate(img: &Image) -> Image {
    morph(img, true)
}

pub fn erode(img: &Image) -> Image {
    morph(img, false)
}

pub fn closing(img: &Image) -> Image {
    erode(&dilate(img))
}

pub fn opening(img: &Image) -> Image {
    dilate(&erode(img))
}

/// Blur, threshold at 0.5, close, open. Crop, resize and background subtraction of
/// a camera pipeline are unnecessary because renders are already 64×64 foreground.
pub fn preprocess(gray: &Image) -> Image {
    opening(&closing(&threshold(&gaussian_blur(gray), BINARY_THRESHOLD)))
}

/// Squared distances are kept as exact integers in f64; this stands in for +∞.
const FAR: f64 = 1e20;

/// One-dimensional squared-distance transform by the lower envelope of parabolas.
fn edt_1d(f: &[f64], out: &mut [f64], v: &mut [usize], z: &mut [f64]) {
    let n = f.len();
    let mut k = 0usize;
    v[0] = 0;
    z[0] = f64::NEG_INFINITY;
    z[1] = f64::INFINITY;
    for q in 1..n {
        let qf = q as f64;
        let mut s;
        loop {
            let pf = v[k] as f64;
            s = ((f[q] + qf * qf) - (f[v[k]] + pf * pf)) / (2.0 * qf - 2.0 * pf);
            // z[0] is -inf, so this stops at k = 0.
            if s > z[k] {
                break;
            }
            k -= 1;
        }
        k += 1;
        v[k] = q;
        z[k] = s;
        z[k + 1] = f64::INFINITY;
    }
    k = 0;
    for (q, o) in out.iter_mut().enumerate() {
        let qf = q as f64;
        while z[k + 1] < qf {
            k += 1;
        }
        let d = qf - v[k] as f64;
        *o = d * d + f[v[k]];
    }
}

/// Exact Euclidean distance transform of a binary image (object = 1).
/// An image without object pixels maps to `max(w, h)·√2` everywhere.
pub fn distance_transform(binary: &Image) -> DistanceMap {
    let (w, h) = (binary.width, binary.height);
    if !binary.data.iter().any(|&v| v >= BINARY_THRESHOLD) {
        return DistanceMap {
            width: w,
            height: h,
            data: vec![w.max(h) as f64 * SQRT_2; w * h],
        };
    }
    let n = w.max(h);
    let mut f = vec![0.0; n];
    let mut d = vec![0.0; n];
    let mut v = vec![0usize; n];
    let mut z = vec![0.0; n + 1];
    let mut sq: Vec<f64> = binary
        .data
        .iter()
        .map(|&p| if p >= BINARY_THRESHOLD { 0.0 } else { FAR })
        .collect();
    for x in 0..w {
        for y in 0..h {
            f[y] = sq[y * w + x];
        }
        edt_1d(&f[..h], &mut d[..h], &mut v, &mut z);
        for y in 0..h {
            sq[y * w + x] = d[y];
        }
    }
    for y in 0..h {
        f[..w].copy_from_slice(&sq[y * w..(y + 1) * w]);
        edt_1d(&f[..w], &mut d[..w], &mut v, &mut z);
        sq[y * w..(y + 1) * w].copy_from_slice(&d[..w]);
    }
    DistanceMap {
        width: w,
        height: h,
        data: sq.into_iter().map(f64::sqrt).collect(),
    }
}

/// Soft target `1 − tanh(β·DT(target))`: 1 on the object, decaying with distance.
pub fn blur_target(target: &Image, beta: f64) -> Result<Image> {
    if !(beta > 0.0 && beta.is_finite()) {
        return Err(Error::InvalidArgument(format!("beta must be positive, got {beta}")));
    }
    let dt = distance_transform(target);
    let data = dt
        .data
        .iter()
        .map(|&d| {
            // 1 − tanh(x) = 2 / (1 + e^{2x}), which stays positive for large x.
            let v = 2.0 / (1.0 + (2.0 * beta * d).exp());
            (v as f32).max(f32::MIN_POSITIVE)
        })
        .collect();
    Ok(Image {
        width: target.width,
        height: target.height,
        data,
    })
}

/// Mean squared difference over all pixels.
pub fn prediction_loss(predicted: &Image, blurred_target: &Image) -> Result<f64> {
    if !predicted.same_shape(blurred_target) {
        return Err(Error::InvalidArgument(format!(
            "image shapes differ: {}×{} vs {}×{}",
            predicted.width, predicted.height, blurred_target.width, blurred_target.height
        )));
    }
    let sum: f64 = predicted
        .data
        .iter()
        .zip(&blurred_target.data)
        .map(|(&p, &t)| {
            let d = p as f64 - t as f64;
            d * d
        })
        .sum();
    Ok(sum / predicted.data.len() as f64)
}

/// Symmetric chamfer distance `Σ(S₁·DT(S₂) + S₂·DT(S₁))` in px.
pub fn chamfer_distance(s1: &Image, s2: &Image) -> Result<f64> {
    if !s1.same_shape(s2) {
        return Err(Error::InvalidArgument("chamfer_distance: image shapes differ".into()));
    }
    let d1 = distance_transform(s1);
    let d2 = distance_transform(s2);
    let mut total = 0.0;
    for i in 0..s1.data.len() {
        total += s1.data[i] as f64 * d2.data[i] + s2.data[i] as f64 * d1.data[i];
    }
    Ok(total)
}
