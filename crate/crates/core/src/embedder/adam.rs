use crate::error::{Error, Result};
use crate::scalar::Scalar;

/// Bias-corrected Adam moments for a list of parameter blocks.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamState<T> {
    pub step: u64,
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    first: Vec<Vec<T>>,
    second: Vec<Vec<T>>,
}

impl<T: Scalar> AdamState<T> {
    /// Zeroed moments shaped like `block_sizes`.
    pub fn new(block_sizes: &[usize], learning_rate: f64) -> Self {
        AdamState {
            step: 0,
            learning_rate,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            first: block_sizes.iter().map(|&n| vec![T::zero(); n]).collect(),
            second: block_sizes.iter().map(|&n| vec![T::zero(); n]).collect(),
        }
    }

    pub fn block_sizes(&self) -> Vec<usize> {
        self.first.iter().map(Vec::len).collect()
    }
}

/// One Adam update of `params` in place.
pub fn adam_step<T: Scalar>(
    params: &mut [&mut [T]],
    grads: &[&[T]],
    state: &mut AdamState<T>,
) -> Result<()> {
    if params.len() != grads.len() || params.len() != state.first.len() {
        return Err(Error::DimensionMismatch {
            expected: state.first.len(),
            actual: params.len().max(grads.len()),
        });
    }
    for ((p, g), m) in params.iter().zip(grads).zip(&state.first) {
        if p.len() != g.len() || p.len() != m.len() {
            return Err(Error::DimensionMismatch {
                expected: m.len(),
                actual: p.len().max(g.len()),
            });
        }
    }

    state.step += 1;
    let t = state.step as i32;
    let (b1, b2) = (T::of(state.beta1), T::of(state.beta2));
    let correct1 = T::of(1.0 - state.beta1.powi(t));
    let correct2 = T::of(1.0 - state.beta2.powi(t));
    let lr = T::of(state.learning_rate);
    let eps = T::of(state.eps);
    for (((p, g), m), v) in params
        .iter_mut()
        .zip(grads)
        .zip(&mut state.first)
        .zip(&mut state.second)
    {
        for i in 0..p.len() {
            let gi = g[i];
            m[i] = b1 * m[i] + (T::one() - b1) * gi;
            v[i] = b2 * v[i] + (T::one() - b2) * gi * gi;
            let m_hat = m[i] / correct1;
            let v_hat = v[i] / correct2;
            p[i] -= lr * m_hat / (v_hat.sqrt() + eps);
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn first_step_moves_by_learning_rate() {
        let mut p = vec![1.0f64];
        let mut s = AdamState::new(&[1], 0.1);
        adam_step(&mut [&mut p[..]], &[&[0.5]], &mut s).unwrap();
        // m_hat / sqrt(v_hat) = g / |g| on the first step
        assert!((p[0] - (1.0 - 0.1 * 0.5 / (0.5 + 1e-8))).abs() < 1e-15);
        assert!((p[0] - 0.9).abs() < 1e-6);
    }

    #[test]
    fn zero_gradient_leaves_params() {
        let mut p = vec![1.0f64, -2.0];
        let mut s = AdamState::new(&[2], 0.1);
        adam_step(&mut [&mut p[..]], &[&[0.0, 0.0]], &mut s).unwrap();
        assert_eq!(p, vec![1.0, -2.0]);
        assert_eq!(s.step, 1);
    }

    #[test]
    fn identical_inputs_identical_trajectories() {
        let run = || {
            let mut p = vec![0.3f64, -0.1, 2.0];
            let mut s = AdamState::new(&[3], 0.01);
            for k in 0..50 {
                let g: Vec<f64> = p.iter().map(|x| 2.0 * x + k as f64 * 1e-3).collect();
                adam_step(&mut [&mut p[..]], &[&g], &mut s).unwrap();
            }
            p
        };
        assert_eq!(run(), run());
    }

    #[test]
    fn shape_mismatch_rejected() {
        let mut p = vec![1.0f64, 2.0];
        let mut s = AdamState::new(&[2], 0.1);
        assert!(adam_step(&mut [&mut p[..]], &[&[1.0]], &mut s).is_err());
        assert!(adam_step(&mut [&mut p[..]], &[], &mut s).is_err());
        assert_eq!(s.step, 0);
    }

    #[test]
    fn minimizes_a_quadratic() {
        let mut p = vec![5.0f32];
        let mut s = AdamState::new(&[1], 0.1);
        for _ in 0..500 {
            let g = [2.0 * (p[0] - 1.0)];
            adam_step(&mut [&mut p[..]], &[&g], &mut s).unwrap();
        }
        assert!((p[0] - 1.0).abs() < 1e-2);
    }
}
