use serde::{Deserialize, Serialize};

use super::{AutodiffError, Result, Tensor};

pub const ADAM_BETA1: f64 = 0.9;
pub const ADAM_BETA2: f64 = 0.999;
pub const ADAM_EPS: f64 = 1e-8;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AdamState {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub step: u64,
    pub m: Vec<Vec<f64>>,
    pub v: Vec<Vec<f64>>,
}

impl AdamState {
    /// Zeroed moments for parameters of the given sizes.
    pub fn new(sizes: &[usize], lr: f64) -> Self {
        Self {
            lr,
            beta1: ADAM_BETA1,
            beta2: ADAM_BETA2,
            eps: ADAM_EPS,
            step: 0,
            m: sizes.iter().map(|&n| vec![0.0; n]).collect(),
            v: sizes.iter().map(|&n| vec![0.0; n]).collect(),
        }
    }

    pub fn for_params(params: &[Tensor], lr: f64) -> Self {
        let sizes: Vec<usize> = params.iter().map(Tensor::len).collect();
        Self::new(&sizes, lr)
    }
}

/// One bias-corrected Adam update. Gradients are checked for finiteness
/// before anything is modified, so a rejected step leaves params and state intact.
pub fn adam_step(params: &mut [Tensor], grads: &[Vec<f64>], state: &mut AdamState) -> Result<()> {
    if params.len() != grads.len() || params.len() != state.m.len() {
        return Err(AutodiffError::Shape(format!(
            "{} params, {} grads, {} moment buffers",
            params.len(),
            grads.len(),
            state.m.len()
        )));
    }
    for (i, (p, g)) in params.iter().zip(grads).enumerate() {
        if p.len() != g.len() || state.m[i].len() != g.len() {
            return Err(AutodiffError::Shape(format!(
                "parameter {i}: {} values, {} grads, {} moments",
                p.len(),
                g.len(),
                state.m[i].len()
            )));
        }
        if let Some(index) = g.iter().position(|v| !v.is_finite()) {
            return Err(AutodiffError::NonFiniteGradient { param: i, index });
        }
    }
    state.step += 1;
    let t = state.step as i32;
    let bc1 = 1.0 - state.beta1.powi(t);
    let bc2 = 1.0 - state.beta2.powi(t);
    let (b1, b2, lr, eps) = (state.beta1, state.beta2, state.lr, state.eps);
    for ((p, g), (m, v)) in params.iter_mut().zip(grads).zip(state.m.iter_mut().zip(state.v.iter_mut())) {
        for (((theta, &gi), mi), vi) in p.data_mut().iter_mut().zip(g).zip(m.iter_mut()).zip(v.iter_mut()) {
            *mi = b1 * *mi + (1.0 - b1) * gi;
            *vi = b2 * *vi + (1.0 - b2) * gi * gi;
            let m_hat = *mi / bc1;
            let v_hat = *vi / bc2;
            *theta -= lr * m_hat / (v_hat.sqrt() + eps);
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn first_step_is_lr_sized() {
        let mut p = vec![Tensor::from_vec(vec![0.0, 2.0])];
        let mut s = AdamState::for_params(&p, 0.1);
        adam_step(&mut p, &[vec![1.0, -3.0]], &mut s).unwrap();
        assert!((p[0].data()[0] + 0.1 / (1.0 + 1e-8)).abs() < 1e-15);
        assert!((p[0].data()[1] - (2.0 + 0.1 * 3.0 / (3.0 + 1e-8))).abs() < 1e-15);
        assert_eq!(s.step, 1);
    }

    #[test]
    fn zero_gradient_is_a_no_op() {
        let mut p = vec![Tensor::from_vec(vec![1.5, -0.5])];
        let mut s = AdamState::for_params(&p, 0.01);
        for _ in 0..5 {
            adam_step(&mut p, &[vec![0.0, 0.0]], &mut s).unwrap();
        }
        assert_eq!(p[0].data(), &[1.5, -0.5]);
    }

    #[test]
    fn reproducible() {
        let run = || {
            let mut p = vec![Tensor::from_vec(vec![0.3, 0.7])];
            let mut s = AdamState::for_params(&p, 2e-5);
            adam_step(&mut p, &[vec![0.1, -0.2]], &mut s).unwrap();
            adam_step(&mut p, &[vec![0.1, -0.2]], &mut s).unwrap();
            p[0].data().iter().map(|v| v.to_bits()).collect::<Vec<_>>()
        };
        assert_eq!(run(), run());
    }

    #[test]
    fn non_finite_gradient_rejected_without_side_effects() {
        let mut p = vec![Tensor::from_vec(vec![1.0]), Tensor::from_vec(vec![2.0, 3.0])];
        let mut s = AdamState::for_params(&p, 0.1);
        let err = adam_step(&mut p, &[vec![1.0], vec![0.0, f64::NAN]], &mut s).unwrap_err();
        assert!(matches!(err, AutodiffError::NonFiniteGradient { param: 1, index: 1 }));
        assert_eq!(s.step, 0);
        assert_eq!(p[0].data(), &[1.0]);
    }
}
