use rand::Rng;

use super::gemm::{gemm, MatRef};
use super::{Mode, Real, Tensor};
use crate::error::{Error, Result};

/// Square-kernel convolution geometry.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
struct Geometry {
    kernel: usize,
    stride: usize,
    padding: usize,
}

impl Geometry {
    const DEFAULT: Geometry = Geometry {
        kernel: 3,
        stride: 2,
        padding: 1,
    };

    fn conv_out(&self, n: usize) -> usize {
        (n + 2 * self.padding - self.kernel) / self.stride + 1
    }
}

/// Unfolds `x` (`c × h × w`) into `cols` (`c·k·k × oh·ow`).
#[allow(clippy::too_many_arguments)]
fn im2col<F: Real>(x: &[F], c: usize, h: usize, w: usize, g: Geometry, oh: usize, ow: usize, cols: &mut [F]) {
    let k = g.kernel;
    let p = oh * ow;
    for ch in 0..c {
        let plane = &x[ch * h * w..(ch + 1) * h * w];
        for ky in 0..k {
            for kx in 0..k {
                let row = &mut cols[((ch * k + ky) * k + kx) * p..][..p];
                for oy in 0..oh {
                    let iy = (oy * g.stride + ky) as isize - g.padding as isize;
                    let dst = &mut row[oy * ow..(oy + 1) * ow];
                    if iy < 0 || iy >= h as isize {
                        dst.iter_mut().for_each(|v| *v = F::zero());
                        continue;
                    }
                    let src = &plane[iy as usize * w..(iy as usize + 1) * w];
                    for (ox, d) in dst.iter_mut().enumerate() {
                        let ix = (ox * g.stride + kx) as isize - g.padding as isize;
                        *d = if ix < 0 || ix >= w as isize { F::zero() } else { src[ix as usize] };
                    }
                }
            }
        }
    }
}

/// Adjoint of [`im2col`]: scatters `cols` back, accumulating into `x`.
#[allow(clippy::too_many_arguments)]
fn col2im<F: Real>(cols: &[F], c: usize, h: usize, w: usize, g: Geometry, oh: usize, ow: usize, x: &mut [F]) {
    let k = g.kernel;
    let p = oh * ow;
    for ch in 0..c {
        let plane = &mut x[ch * h * w..(ch + 1) * h * w];
        for ky in 0..k {
            for kx in 0..k {
                let row = &cols[((ch * k + ky) * k + kx) * p..][..p];
                for oy in 0..oh {
                    let iy = (oy * g.stride + ky) as isize - g.padding as isize;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    let dst = &mut plane[iy as usize * w..(iy as usize + 1) * w];
                    for (ox, &v) in row[oy * ow..(oy + 1) * ow].iter().enumerate() {
                        let ix = (ox * g.stride + kx) as isize - g.padding as isize;
                        if ix >= 0 && ix < w as isize {
                            dst[ix as usize] += v;
                        }
                    }
                }
            }
        }
    }
}

fn uniform_vec<F: Real>(rng: &mut impl Rng, n: usize, bound: f64) -> Vec<F> {
    (0..n).map(|_| F::of(rng.gen_range(-bound..=bound))).collect()
}

/// Kaiming-uniform bound for ReLU networks.
fn kaiming_bound(fan_in: f64) -> f64 {
    (6.0 / fan_in).sqrt()
}

fn shape_error(layer: &str, expected: Vec<usize>, actual: &[usize]) -> Error {
    Error::ShapeMismatch {
        layer: layer.to_string(),
        expected,
        actual: actual.to_vec(),
    }
}

#[derive(Debug, Clone)]
struct ConvCache<F> {
    n: usize,
    h: usize,
    w: usize,
    oh: usize,
    ow: usize,
    cols: Vec<F>,
}

/// 3×3 convolution with stride 2 and padding 1, weights `out × in × 3 × 3`.
#[derive(Debug, Clone)]
pub struct Conv2d<F> {
    pub in_ch: usize,
    pub out_ch: usize,
    geom: Geometry,
    pub weight: Tensor<F>,
    pub bias: Tensor<F>,
    cache: Option<ConvCache<F>>,
}

impl<F: Real> Conv2d<F> {
    pub fn new(in_ch: usize, out_ch: usize, rng: &mut impl Rng) -> Self {
        let geom = Geometry::DEFAULT;
        let k2 = geom.kernel * geom.kernel;
        let bound = kaiming_bound((in_ch * k2) as f64);
        Self {
            in_ch,
            out_ch,
            geom,
            weight: Tensor::param(
                vec![out_ch, in_ch, geom.kernel, geom.kernel],
                uniform_vec(rng, out_ch * in_ch * k2, bound),
            )
            .expect("weight shape"),
            bias: Tensor::param(vec![out_ch], vec![F::zero(); out_ch]).expect("bias shape"),
            cache: None,
        }
    }

    fn name(&self) -> String {
        format!("Conv2d({}→{})", self.in_ch, self.out_ch)
    }

    fn forward(&mut self, x: &Tensor<F>, record: bool) -> Result<Tensor<F>> {
        let s = x.shape();
        if s.len() != 4 || s[1] != self.in_ch || s[2] < 1 || s[3] < 1 {
            let expect = vec![s.first().copied().unwrap_or(1), self.in_ch, s.get(2).copied().unwrap_or(1), s.get(3).copied().unwrap_or(1)];
            return Err(shape_error(&self.name(), expect, s));
        }
        let (n, h, w) = (s[0], s[2], s[3]);
        let (oh, ow) = (self.geom.conv_out(h), self.geom.conv_out(w));
        let kk = self.in_ch * self.geom.kernel * self.geom.kernel;
        let p = oh * ow;
        let mut out = vec![F::zero(); n * self.out_ch * p];
        let mut cols = vec![F::zero(); if record { n * kk * p } else { kk * p }];
        let wmat = MatRef::rows(self.weight.data(), self.out_ch, kk);
        for i in 0..n {
            let c = if record { &mut cols[i * kk * p..(i + 1) * kk * p] } else { &mut cols[..] };
            im2col(&x.data()[i * self.in_ch * h * w..(i + 1) * self.in_ch * h * w], self.in_ch, h, w, self.geom, oh, ow, c);
            let y = &mut out[i * self.out_ch * p..(i + 1) * self.out_ch * p];
            gemm(F::one(), wmat, MatRef::rows(c, kk, p), F::zero(), y);
            for (o, &b) in self.bias.data().iter().enumerate() {
                y[o * p..(o + 1) * p].iter_mut().for_each(|v| *v += b);
            }
        }
        self.cache = record.then_some(ConvCache { n, h, w, oh, ow, cols });
        Tensor::new(vec![n, self.out_ch, oh, ow], out)
    }

    fn backward(&mut self, grad_out: &[F], need_input: bool) -> Result<Option<Vec<F>>> {
        let name = self.name();
        let cache = self.cache.as_ref().ok_or(Error::NoForwardRecorded(name))?;
        let ConvCache { n, h, w, oh, ow, .. } = *cache;
        let kk = self.in_ch * self.geom.kernel * self.geom.kernel;
        let p = oh * ow;
        let block = self.out_ch * p;
        {
            let wg = self.weight.grad_mut();
            for i in 0..n {
                let dy = MatRef::rows(&grad_out[i * block..(i + 1) * block], self.out_ch, p);
                let c = MatRef::rows(&cache.cols[i * kk * p..(i + 1) * kk * p], kk, p);
                gemm(F::one(), dy, c.t(), F::one(), wg);
            }
        }
        {
            let bg = self.bias.grad_mut();
            for i in 0..n {
                for (o, g) in bg.iter_mut().enumerate() {
                    *g += grad_out[i * block + o * p..i * block + (o + 1) * p].iter().copied().sum();
                }
            }
        }
        if !need_input {
            return Ok(None);
        }
        let mut dx = vec![F::zero(); n * self.in_ch * h * w];
        let mut dcols = vec![F::zero(); kk * p];
        let wmat = MatRef::rows(self.weight.data(), self.out_ch, kk);
        for i in 0..n {
            let dy = MatRef::rows(&grad_out[i * block..(i + 1) * block], self.out_ch, p);
            gemm(F::one(), wmat.t(), dy, F::zero(), &mut dcols);
            col2im(&dcols, self.in_ch, h, w, self.geom, oh, ow, &mut dx[i * self.in_ch * h * w..(i + 1) * self.in_ch * h * w]);
        }
        Ok(Some(dx))
    }
}

#[derive(Debug, Clone)]
struct DeconvCache<F> {
    n: usize,
    h: usize,
    w: usize,
    oh: usize,
    ow: usize,
    input: Vec<F>,
}

/// Transposed 3×3 convolution, stride 2, padding 1, output padding 1, so an
/// `h × w` input becomes `2h × 2w`. Weights are `in × out × 3 × 3`.
#[derive(Debug, Clone)]
pub struct Deconv2d<F> {
    pub in_ch: usize,
    pub out_ch: usize,
    geom: Geometry,
    output_padding: usize,
    pub weight: Tensor<F>,
    pub bias: Tensor<F>,
    cache: Option<DeconvCache<F>>,
}

impl<F: Real> Deconv2d<F> {
    pub fn new(in_ch: usize, out_ch: usize, rng: &mut impl Rng) -> Self {
        let geom = Geometry::DEFAULT;
        let k2 = geom.kernel * geom.kernel;
        // Each output pixel receives about k²/s² taps per input channel.
        let fan_in = (in_ch * k2) as f64 / (geom.stride * geom.stride) as f64;
        Self {
            in_ch,
            out_ch,
            geom,
            output_padding: 1,
            weight: Tensor::param(
                vec![in_ch, out_ch, geom.kernel, geom.kernel],
                uniform_vec(rng, in_ch * out_ch * k2, kaiming_bound(fan_in)),
            )
            .expect("weight shape"),
            bias: Tensor::param(vec![out_ch], vec![F::zero(); out_ch]).expect("bias shape"),
            cache: None,
        }
    }

    fn name(&self) -> String {
        format!("Deconv2d({}→{})", self.in_ch, self.out_ch)
    }

    fn out_size(&self, n: usize) -> usize {
        (n - 1) * self.geom.stride + self.geom.kernel + self.output_padding - 2 * self.geom.padding
    }

    fn forward(&mut self, x: &Tensor<F>, record: bool) -> Result<Tensor<F>> {
        let s = x.shape();
        if s.len() != 4 || s[1] != self.in_ch || s[2] < 1 || s[3] < 1 {
            let expect = vec![s.first().copied().unwrap_or(1), self.in_ch, s.get(2).copied().unwrap_or(1), s.get(3).copied().unwrap_or(1)];
            return Err(shape_error(&self.name(), expect, s));
        }
        let (n, h, w) = (s[0], s[2], s[3]);
        let (oh, ow) = (self.out_size(h), self.out_size(w));
        debug_assert_eq!(self.geom.conv_out(oh), h);
        let kk = self.out_ch * self.geom.kernel * self.geom.kernel;
        let hw = h * w;
        let op = oh * ow;
        let mut out = vec![F::zero(); n * self.out_ch * op];
        let mut cols = vec![F::zero(); kk * hw];
        let wmat = MatRef::rows(self.weight.data(), self.in_ch, kk);
        for i in 0..n {
            let xi = MatRef::rows(&x.data()[i * self.in_ch * hw..(i + 1) * self.in_ch * hw], self.in_ch, hw);
            gemm(F::one(), wmat.t(), xi, F::zero(), &mut cols);
            let y = &mut out[i * self.out_ch * op..(i + 1) * self.out_ch * op];
            col2im(&cols, self.out_ch, oh, ow, self.geom, h, w, y);
            for (o, &b) in self.bias.data().iter().enumerate() {
                y[o * op..(o + 1) * op].iter_mut().for_each(|v| *v += b);
            }
        }
        self.cache = record.then(|| DeconvCache {
            n,
            h,
            w,
            oh,
            ow,
            input: x.data().to_vec(),
        });
        Tensor::new(vec![n, self.out_ch, oh, ow], out)
    }

    fn backward(&mut self, grad_out: &[F], need_input: bool) -> Result<Option<Vec<F>>> {
        let name = self.name();
        let cache = self.cache.as_ref().ok_or(Error::NoForwardRecorded(name))?;
        let DeconvCache { n, h, w, oh, ow, .. } = *cache;
        let kk = self.out_ch * self.geom.kernel * self.geom.kernel;
        let hw = h * w;
        let op = oh * ow;
        let mut dcols = vec![F::zero(); n * kk * hw];
        for i in 0..n {
            im2col(&grad_out[i * self.out_ch * op..(i + 1) * self.out_ch * op], self.out_ch, oh, ow, self.geom, h, w, &mut dcols[i * kk * hw..(i + 1) * kk * hw]);
        }
        {
            let wg = self.weight.grad_mut();
            for i in 0..n {
                let xi = MatRef::rows(&cache.input[i * self.in_ch * hw..(i + 1) * self.in_ch * hw], self.in_ch, hw);
                let dc = MatRef::rows(&dcols[i * kk * hw..(i + 1) * kk * hw], kk, hw);
                gemm(F::one(), xi, dc.t(), F::one(), wg);
            }
        }
        {
            let bg = self.bias.grad_mut();
            for i in 0..n {
                for (o, g) in bg.iter_mut().enumerate() {
                    let base = (i * self.out_ch + o) * op;
                    *g += grad_out[base..base + op].iter().copied().sum();
                }
            }
        }
        if !need_input {
            return Ok(None);
        }
        let mut dx = vec![F::zero(); n * self.in_ch * hw];
        let wmat = MatRef::rows(self.weight.data(), self.in_ch, kk);
        for i in 0..n {
            let dc = MatRef::rows(&dcols[i * kk * hw..(i + 1) * kk * hw], kk, hw);
            gemm(F::one(), wmat, dc, F::zero(), &mut dx[i * self.in_ch * hw..(i + 1) * self.in_ch * hw]);
        }
        Ok(Some(dx))
    }
}

/// Fully connected layer `y = x·Wᵀ + b`, weights `out × in`. Inputs of any rank are
/// flattened to `batch × in`.
#[derive(Debug, Clone)]
pub struct Linear<F> {
    pub in_units: usize,
    pub out_units: usize,
    pub weight: Tensor<F>,
    pub bias: Tensor<F>,
    cache: Option<(Vec<usize>, Vec<F>)>,
}

impl<F: Real> Linear<F> {
    pub fn new(in_units: usize, out_units: usize, rng: &mut impl Rng) -> Self {
        Self {
            in_units,
            out_units,
            weight: Tensor::param(
                vec![out_units, in_units],
                uniform_vec(rng, in_units * out_units, kaiming_bound(in_units as f64)),
            )
            .expect("weight shape"),
            bias: Tensor::param(vec![out_units], vec![F::zero(); out_units]).expect("bias shape"),
            cache: None,
        }
    }

    fn name(&self) -> String {
        format!("Linear({}→{})", self.in_units, self.out_units)
    }

    fn forward(&mut self, x: &Tensor<F>, record: bool) -> Result<Tensor<F>> {
        let s = x.shape();
        let feat: usize = s.iter().skip(1).product();
        if s.is_empty() || feat != self.in_units {
            return Err(shape_error(&self.name(), vec![s.first().copied().unwrap_or(1), self.in_units], s));
        }
        let n = s[0];
        let mut out = vec![F::zero(); n * self.out_units];
        for row in out.chunks_mut(self.out_units) {
            row.copy_from_slice(self.bias.data());
        }
        gemm(
            F::one(),
            MatRef::rows(x.data(), n, self.in_units),
            MatRef::rows(self.weight.data(), self.out_units, self.in_units).t(),
            F::one(),
            &mut out,
        );
        self.cache = record.then(|| (s.to_vec(), x.data().to_vec()));
        Tensor::new(vec![n, self.out_units], out)
    }

    fn backward(&mut self, grad_out: &[F], need_input: bool) -> Result<Option<Vec<F>>> {
        let name = self.name();
        let (shape, input) = self.cache.as_ref().ok_or(Error::NoForwardRecorded(name))?;
        let n = shape[0];
        let dy = MatRef::rows(grad_out, n, self.out_units);
        gemm(F::one(), dy.t(), MatRef::rows(input, n, self.in_units), F::one(), self.weight.grad_mut());
        {
            let bg = self.bias.grad_mut();
            for row in grad_out.chunks(self.out_units) {
                for (g, &v) in bg.iter_mut().zip(row) {
                    *g += v;
                }
            }
        }
        if !need_input {
            return Ok(None);
        }
        let mut dx = vec![F::zero(); n * self.in_units];
        gemm(F::one(), dy, MatRef::rows(self.weight.data(), self.out_units, self.in_units), F::zero(), &mut dx);
        Ok(Some(dx))
    }
}

#[derive(Debug, Clone)]
struct BnCache<F> {
    n: usize,
    spatial: usize,
    mode: Mode,
    x_hat: Vec<F>,
    inv_std: Vec<F>,
}

/// Per-channel batch normalization over `N × C` or `N × C × H × W` inputs.
#[derive(Debug, Clone)]
pub struct BatchNorm<F> {
    pub channels: usize,
    pub gamma: Tensor<F>,
    pub beta: Tensor<F>,
    pub running_mean: Tensor<F>,
    pub running_var: Tensor<F>,
    pub momentum: f64,
    pub eps: f64,
    cache: Option<BnCache<F>>,
}

impl<F: Real> BatchNorm<F> {
    pub fn new(channels: usize) -> Self {
        Self {
            channels,
            gamma: Tensor::param(vec![channels], vec![F::one(); channels]).expect("shape"),
            beta: Tensor::param(vec![channels], vec![F::zero(); channels]).expect("shape"),
            running_mean: Tensor::zeros(vec![channels]),
            running_var: Tensor::new(vec![channels], vec![F::one(); channels]).expect("shape"),
            momentum: 0.1,
            eps: 1e-5,
            cache: None,
        }
    }

    fn name(&self) -> String {
        format!("BatchNorm({})", self.channels)
    }

    fn forward(&mut self, x: &Tensor<F>, mode: Mode, record: bool) -> Result<Tensor<F>> {
        let s = x.shape();
        if s.len() < 2 || s[1] != self.channels {
            let mut expect = s.to_vec();
            if expect.len() >= 2 {
                expect[1] = self.channels;
            } else {
                expect = vec![s.first().copied().unwrap_or(1), self.channels];
            }
            return Err(shape_error(&self.name(), expect, s));
        }
        let n = s[0];
        let c = self.channels;
        let spatial: usize = s[2..].iter().product();
        let m = n * spatial;
        let eps = F::of(self.eps);
        let (mean, var) = match mode {
            Mode::Train => {
                let mut mean = vec![F::zero(); c];
                let mut var = vec![F::zero(); c];
                let inv_m = F::one() / F::of(m as f64);
                for ch in 0..c {
                    let mut sum = F::zero();
                    for i in 0..n {
                        let base = (i * c + ch) * spatial;
                        sum += x.data()[base..base + spatial].iter().copied().sum();
                    }
                    let mu = sum * inv_m;
                    let mut sq = F::zero();
                    for i in 0..n {
                        let base = (i * c + ch) * spatial;
                        sq += x.data()[base..base + spatial].iter().map(|&v| (v - mu) * (v - mu)).sum();
                    }
                    mean[ch] = mu;
                    var[ch] = sq * inv_m;
                }
                let mom = F::of(self.momentum);
                let correction = if m > 1 { F::of(m as f64 / (m - 1) as f64) } else { F::one() };
                for ch in 0..c {
                    let rm = &mut self.running_mean.data_mut()[ch];
                    *rm = (F::one() - mom) * *rm + mom * mean[ch];
                    let rv = &mut self.running_var.data_mut()[ch];
                    *rv = (F::one() - mom) * *rv + mom * var[ch] * correction;
                }
                (mean, var)
            }
            Mode::Eval => (self.running_mean.data().to_vec(), self.running_var.data().to_vec()),
        };
        let inv_std: Vec<F> = var.iter().map(|&v| F::one() / (v + eps).sqrt()).collect();
        let mut x_hat = vec![F::zero(); x.len()];
        let mut out = vec![F::zero(); x.len()];
        for i in 0..n {
            for ch in 0..c {
                let base = (i * c + ch) * spatial;
                let (g, b, mu, is) = (self.gamma.data()[ch], self.beta.data()[ch], mean[ch], inv_std[ch]);
                for j in base..base + spatial {
                    let xh = (x.data()[j] - mu) * is;
                    x_hat[j] = xh;
                    out[j] = g * xh + b;
                }
            }
        }
        self.cache = record.then_some(BnCache {
            n,
            spatial,
            mode,
            x_hat,
            inv_std,
        });
        Tensor::new(s.to_vec(), out)
    }

    fn backward(&mut self, grad_out: &[F], need_input: bool) -> Result<Option<Vec<F>>> {
        let name = self.name();
        let cache = self.cache.as_ref().ok_or(Error::NoForwardRecorded(name))?;
        let (n, spatial, c) = (cache.n, cache.spatial, self.channels);
        let m = F::of((n * spatial) as f64);
        let mut sum_dy = vec![F::zero(); c];
        let mut sum_dy_xhat = vec![F::zero(); c];
        for i in 0..n {
            for ch in 0..c {
                let base = (i * c + ch) * spatial;
                for j in base..base + spatial {
                    sum_dy[ch] += grad_out[j];
                    sum_dy_xhat[ch] += grad_out[j] * cache.x_hat[j];
                }
            }
        }
        for (g, &v) in self.gamma.grad_mut().iter_mut().zip(&sum_dy_xhat) {
            *g += v;
        }
        for (g, &v) in self.beta.grad_mut().iter_mut().zip(&sum_dy) {
            *g += v;
        }
        if !need_input {
            return Ok(None);
        }
        let mut dx = vec![F::zero(); grad_out.len()];
        for i in 0..n {
            for ch in 0..c {
                let base = (i * c + ch) * spatial;
                let scale = self.gamma.data()[ch] * cache.inv_std[ch];
                for j in base..base + spatial {
                    dx[j] = match cache.mode {
                        Mode::Train => scale / m * (m * grad_out[j] - sum_dy[ch] - cache.x_hat[j] * sum_dy_xhat[ch]),
                        Mode::Eval => scale * grad_out[j],
                    };
                }
            }
        }
        Ok(Some(dx))
    }
}

#[derive(Debug, Clone, Default)]
pub struct Relu {
    mask: Option<Vec<bool>>,
}

impl Relu {
    fn forward<F: Real>(&mut self, x: &Tensor<F>, record: bool) -> Result<Tensor<F>> {
        let out = x.data().iter().map(|&v| if v > F::zero() { v } else { F::zero() }).collect();
        self.mask = record.then(|| x.data().iter().map(|&v| v > F::zero()).collect());
        Tensor::new(x.shape().to_vec(), out)
    }

    fn backward<F: Real>(&mut self, grad_out: &[F]) -> Result<Vec<F>> {
        let mask = self.mask.as_ref().ok_or_else(|| Error::NoForwardRecorded("ReLU".into()))?;
        Ok(grad_out.iter().zip(mask).map(|(&g, &m)| if m { g } else { F::zero() }).collect())
    }
}

/// Logistic function; outputs are kept strictly inside (0, 1).
#[derive(Debug, Clone, Default)]
pub struct Sigmoid<F> {
    output: Option<Vec<F>>,
}

impl<F: Real> Sigmoid<F> {
    fn forward(&mut self, x: &Tensor<F>, record: bool) -> Result<Tensor<F>> {
        let hi = F::one() - F::epsilon();
        let lo = F::min_positive_value();
        let out: Vec<F> = x
            .data()
            .iter()
            .map(|&v| (F::one() / (F::one() + (-v).exp())).max(lo).min(hi))
            .collect();
        self.output = record.then(|| out.clone());
        Tensor::new(x.shape().to_vec(), out)
    }

    fn backward(&mut self, grad_out: &[F]) -> Result<Vec<F>> {
        let y = self.output.as_ref().ok_or_else(|| Error::NoForwardRecorded("Sigmoid".into()))?;
        Ok(grad_out.iter().zip(y).map(|(&g, &y)| g * y * (F::one() - y)).collect())
    }
}

/// Reshapes the non-batch dimensions.
#[derive(Debug, Clone)]
pub struct Reshape {
    pub target: Vec<usize>,
    input_shape: Option<Vec<usize>>,
}

impl Reshape {
    pub fn new(target: Vec<usize>) -> Self {
        Self {
            target,
            input_shape: None,
        }
    }

    fn forward<F: Real>(&mut self, x: &Tensor<F>, record: bool) -> Result<Tensor<F>> {
        let n = x.shape().first().copied().unwrap_or(0);
        let mut shape = vec![n];
        shape.extend(&self.target);
        if shape.iter().product::<usize>() != x.len() {
            let name = format!("Reshape({:?})", self.target);
            return Err(shape_error(&name, shape, x.shape()));
        }
        self.input_shape = record.then(|| x.shape().to_vec());
        x.clone().reshaped(shape)
    }

    fn backward<F: Real>(&mut self, grad_out: &[F]) -> Result<Vec<F>> {
        if self.input_shape.is_none() {
            return Err(Error::NoForwardRecorded(format!("Reshape({:?})", self.target)));
        }
        Ok(grad_out.to_vec())
    }
}

#[derive(Debug, Clone)]
pub enum Layer<F> {
    Conv2d(Conv2d<F>),
    Deconv2d(Deconv2d<F>),
    Linear(Linear<F>),
    BatchNorm(BatchNorm<F>),
    Relu(Relu),
    Sigmoid(Sigmoid<F>),
    Reshape(Reshape),
}

impl<F: Real> Layer<F> {
    pub fn name(&self) -> String {
        match self {
            Layer::Conv2d(l) => l.name(),
            Layer::Deconv2d(l) => l.name(),
            Layer::Linear(l) => l.name(),
            Layer::BatchNorm(l) => l.name(),
            Layer::Relu(_) => "ReLU".into(),
            Layer::Sigmoid(_) => "Sigmoid".into(),
            Layer::Reshape(l) => format!("Reshape({:?})", l.target),
        }
    }

    /// Forward pass. With `record`, whatever `backward` needs is kept.
    pub fn forward(&mut self, x: &Tensor<F>, mode: Mode, record: bool) -> Result<Tensor<F>> {
        match self {
            Layer::Conv2d(l) => l.forward(x, record),
            Layer::Deconv2d(l) => l.forward(x, record),
            Layer::Linear(l) => l.forward(x, record),
            Layer::BatchNorm(l) => l.forward(x, mode, record),
            Layer::Relu(l) => l.forward(x, record),
            Layer::Sigmoid(l) => l.forward(x, record),
            Layer::Reshape(l) => l.forward(x, record),
        }
    }

    /// Accumulates parameter gradients and, when asked, returns the input gradient.
    pub fn backward(&mut self, grad_out: &[F], need_input: bool) -> Result<Option<Vec<F>>> {
        match self {
            Layer::Conv2d(l) => l.backward(grad_out, need_input),
            Layer::Deconv2d(l) => l.backward(grad_out, need_input),
            Layer::Linear(l) => l.backward(grad_out, need_input),
            Layer::BatchNorm(l) => l.backward(grad_out, need_input),
            Layer::Relu(l) => l.backward(grad_out).map(Some),
            Layer::Sigmoid(l) => l.backward(grad_out).map(Some),
            Layer::Reshape(l) => l.backward(grad_out).map(Some),
        }
    }

    pub fn clear_cache(&mut self) {
        match self {
            Layer::Conv2d(l) => l.cache = None,
            Layer::Deconv2d(l) => l.cache = None,
            Layer::Linear(l) => l.cache = None,
            Layer::BatchNorm(l) => l.cache = None,
            Layer::Relu(l) => l.mask = None,
            Layer::Sigmoid(l) => l.output = None,
            Layer::Reshape(l) => l.input_shape = None,
        }
    }

    /// Trainable tensors and buffers with their short names, in a fixed order.
    pub fn named_tensors(&self) -> Vec<(&'static str, &Tensor<F>)> {
        match self {
            Layer::Conv2d(l) => vec![("weight", &l.weight), ("bias", &l.bias)],
            Layer::Deconv2d(l) => vec![("weight", &l.weight), ("bias", &l.bias)],
            Layer::Linear(l) => vec![("weight", &l.weight), ("bias", &l.bias)],
            Layer::BatchNorm(l) => vec![
                ("gamma", &l.gamma),
                ("beta", &l.beta),
                ("running_mean", &l.running_mean),
                ("running_var", &l.running_var),
            ],
            _ => Vec::new(),
        }
    }

    pub fn named_tensors_mut(&mut self) -> Vec<(&'static str, &mut Tensor<F>)> {
        match self {
            Layer::Conv2d(l) => vec![("weight", &mut l.weight), ("bias", &mut l.bias)],
            Layer::Deconv2d(l) => vec![("weight", &mut l.weight), ("bias", &mut l.bias)],
            Layer::Linear(l) => vec![("weight", &mut l.weight), ("bias", &mut l.bias)],
            Layer::BatchNorm(l) => vec![
                ("gamma", &mut l.gamma),
                ("beta", &mut l.beta),
                ("running_mean", &mut l.running_mean),
                ("running_var", &mut l.running_var),
            ],
            _ => Vec::new(),
        }
    }

    /// Trainable parameters only (BatchNorm running statistics excluded).
    pub fn params_mut(&mut self) -> Vec<&mut Tensor<F>> {
        self.named_tensors_mut()
            .into_iter()
            .filter(|(_, t)| t.requires_grad())
            .map(|(_, t)| t)
            .collect()
    }

    /// Same layer in another precision, without recorded state or gradients.
    pub fn cast<G: Real>(&self) -> Layer<G> {
        match self {
            Layer::Conv2d(l) => Layer::Conv2d(Conv2d {
                in_ch: l.in_ch,
                out_ch: l.out_ch,
                geom: l.geom,
                weight: l.weight.cast(),
                bias: l.bias.cast(),
                cache: None,
            }),
            Layer::Deconv2d(l) => Layer::Deconv2d(Deconv2d {
                in_ch: l.in_ch,
                out_ch: l.out_ch,
                geom: l.geom,
                output_padding: l.output_padding,
                weight: l.weight.cast(),
                bias: l.bias.cast(),
                cache: None,
            }),
            Layer::Linear(l) => Layer::Linear(Linear {
                in_units: l.in_units,
                out_units: l.out_units,
                weight: l.weight.cast(),
                bias: l.bias.cast(),
                cache: None,
            }),
            Layer::BatchNorm(l) => Layer::BatchNorm(BatchNorm {
                channels: l.channels,
                gamma: l.gamma.cast(),
                beta: l.beta.cast(),
                running_mean: l.running_mean.cast(),
                running_var: l.running_var.cast(),
                momentum: l.momentum,
                eps: l.eps,
                cache: None,
            }),
            Layer::Relu(_) => Layer::Relu(Relu::default()),
            Layer::Sigmoid(_) => Layer::Sigmoid(Sigmoid { output: None }),
            Layer::Reshape(l) => Layer::Reshape(Reshape::new(l.target.clone())),
        }
    }
}

/// A chain of layers evaluated in order.
#[derive(Debug, Clone, Default)]
pub struct Sequential<F> {
    layers: Vec<Layer<F>>,
}

impl<F: Real> Sequential<F> {
    pub fn new(layers: Vec<Layer<F>>) -> Self {
        Self { layers }
    }

    pub fn layers(&self) -> &[Layer<F>] {
        &self.layers
    }

    pub fn layers_mut(&mut self) -> &mut [Layer<F>] {
        &mut self.layers
    }

    pub fn forward(&mut self, x: &Tensor<F>, mode: Mode) -> Result<Tensor<F>> {
        self.run(x, mode, true)
    }

    /// Forward pass that keeps nothing for `backward`.
    pub fn forward_no_record(&mut self, x: &Tensor<F>, mode: Mode) -> Result<Tensor<F>> {
        self.run(x, mode, false)
    }

    fn run(&mut self, x: &Tensor<F>, mode: Mode, record: bool) -> Result<Tensor<F>> {
        let Some((first, rest)) = self.layers.split_first_mut() else {
            return Ok(x.clone());
        };
        let mut h = first.forward(x, mode, record)?;
        for layer in rest {
            h = layer.forward(&h, mode, record)?;
            debug_assert!(h.all_finite(), "non-finite activation after {}", layer.name());
        }
        Ok(h)
    }

    /// Back-propagates `grad_out` through every layer. Returns the gradient with
    /// respect to the sequence input when `need_input` is set.
    pub fn backward(&mut self, grad_out: &[F], need_input: bool) -> Result<Option<Vec<F>>> {
        let count = self.layers.len();
        let mut g = grad_out.to_vec();
        for (i, layer) in self.layers.iter_mut().enumerate().rev() {
            let want = need_input || i > 0;
            match layer.backward(&g, want)? {
                Some(next) => {
                    debug_assert!(next.iter().all(|v| v.is_finite()), "non-finite gradient in {}", layer.name());
                    g = next
                }
                None => {
                    debug_assert!(i == 0 || count == 0);
                    return Ok(None);
                }
            }
        }
        Ok(if need_input { Some(g) } else { None })
    }

    pub fn clear_cache(&mut self) {
        self.layers.iter_mut().for_each(Layer::clear_cache);
    }

    pub fn params_mut(&mut self) -> Vec<&mut Tensor<F>> {
        self.layers.iter_mut().flat_map(Layer::params_mut).collect()
    }

    /// Every tensor, named `{prefix}.{layer index}.{name}`.
    pub fn named_tensors(&self, prefix: &str) -> Vec<(String, &Tensor<F>)> {
        self.layers
            .iter()
            .enumerate()
            .flat_map(|(i, l)| {
                l.named_tensors()
                    .into_iter()
                    .map(move |(n, t)| (format!("{prefix}.{i}.{n}"), t))
            })
            .collect()
    }

    pub fn named_tensors_mut(&mut self, prefix: &str) -> Vec<(String, &mut Tensor<F>)> {
        self.layers
            .iter_mut()
            .enumerate()
            .flat_map(|(i, l)| {
                l.named_tensors_mut()
                    .into_iter()
                    .map(move |(n, t)| (format!("{prefix}.{i}.{n}"), t))
            })
            .collect()
    }

    pub fn cast<G: Real>(&self) -> Sequential<G> {
        Sequential {
            layers: self.layers.iter().map(Layer::cast).collect(),
        }
    }
}
