use super::{Real, Tensor};

/// Moment estimates for Adam, one pair of buffers per parameter tensor in the
/// order the parameters are passed to [`adam_step`].
#[derive(Debug, Clone)]
pub struct AdamState<F> {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub step: u64,
    m: Vec<Vec<F>>,
    v: Vec<Vec<F>>,
}

impl<F: Real> AdamState<F> {
    pub fn new(lr: f64) -> Self {
        Self {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            step: 0,
            m: Vec::new(),
            v: Vec::new(),
        }
    }
}

/// One bias-corrected Adam update of every parameter, then zeroes the gradients.
/// Parameters whose gradient was never allocated are treated as having zero gradient.
pub fn adam_step<F: Real>(params: &mut [&mut Tensor<F>], state: &mut AdamState<F>) {
    if state.m.len() != params.len() {
        state.m = params.iter().map(|p| vec![F::zero(); p.len()]).collect();
        state.v = params.iter().map(|p| vec![F::zero(); p.len()]).collect();
    }
    state.step += 1;
    let t = state.step as i32;
    let (b1, b2) = (F::of(state.beta1), F::of(state.beta2));
    let bc1 = F::of(1.0 - state.beta1.powi(t));
    let bc2 = F::of(1.0 - state.beta2.powi(t));
    let lr = F::of(state.lr);
    let eps = F::of(state.eps);
    for ((p, m), v) in params.iter_mut().zip(&mut state.m).zip(&mut state.v) {
        assert_eq!(m.len(), p.len(), "Adam moments do not match parameter shape");
        let (data, grad) = p.data_and_grad_mut();
        let Some(grad) = grad else { continue };
        for i in 0..data.len() {
            let g = grad[i];
            m[i] = b1 * m[i] + (F::one() - b1) * g;
            v[i] = b2 * v[i] + (F::one() - b2) * g * g;
            let m_hat = m[i] / bc1;
            let v_hat = v[i] / bc2;
            data[i] -= lr * m_hat / (v_hat.sqrt() + eps);
            grad[i] = F::zero();
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zero_gradient_leaves_parameters() {
        let mut p = Tensor::<f64>::param(vec![3], vec![1.0, -2.0, 0.5]).unwrap();
        p.accumulate_grad(&[0.0; 3]);
        let mut st = AdamState::new(0.1);
        adam_step(&mut [&mut p], &mut st);
        assert_eq!(p.data(), &[1.0, -2.0, 0.5]);
    }

    #[test]
    fn first_step_moves_by_learning_rate() {
        let mut p = Tensor::<f64>::param(vec![1], vec![0.0]).unwrap();
        let mut st = AdamState::new(0.1);
        p.accumulate_grad(&[1.0]);
        adam_step(&mut [&mut p], &mut st);
        // m̂ = 1, v̂ = 1 after bias correction: Δ = −0.1·1/(1 + 1e-8).
        let expected = -0.1 / (1.0 + 1e-8);
        assert!((p.data()[0] - expected).abs() < 1e-15);
        assert_eq!(p.grad().unwrap(), &[0.0]);
    }

    #[test]
    fn quadratic_loss_decreases() {
        // f(x) = Σ (x_i − c_i)², gradient 2(x − c).
        let target = [3.0, -1.0, 0.5];
        let mut p = Tensor::<f64>::param(vec![3], vec![0.0; 3]).unwrap();
        let mut st = AdamState::new(0.05);
        let loss = |x: &[f64]| x.iter().zip(&target).map(|(a, b)| (a - b) * (a - b)).sum::<f64>();
        let mut prev = loss(p.data());
        for it in 0..200 {
            let g: Vec<f64> = p.data().iter().zip(&target).map(|(a, b)| 2.0 * (a - b)).collect();
            p.accumulate_grad(&g);
            adam_step(&mut [&mut p], &mut st);
            let l = loss(p.data());
            if (5..40).contains(&it) {
                assert!(l < prev, "iteration {it}: {l} ≥ {prev}");
            }
            prev = l;
        }
        assert!(prev < 1e-2, "final loss {prev}");
    }
}
