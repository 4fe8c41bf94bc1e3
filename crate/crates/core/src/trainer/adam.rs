use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AdamConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
        }
    }
}

/// First and second moment estimates per parameter tensor.
#[derive(Clone, Debug, PartialEq)]
pub struct AdamState<T> {
    pub m: Vec<Tensor<T>>,
    pub v: Vec<Tensor<T>>,
    pub step: u64,
}

impl<T: Scalar> AdamState<T> {
    pub fn new(shapes: impl IntoIterator<Item = (usize, usize)>) -> Self {
        let m: Vec<Tensor<T>> = shapes.into_iter().map(|(r, c)| Tensor::zeros(r, c)).collect();
        Self {
            v: m.clone(),
            m,
            step: 0,
        }
    }
}

/// One bias-corrected Adam update of every tensor in `params`.
pub fn adam_step<T: Scalar>(
    params: Vec<&mut Tensor<T>>,
    grads: &[Tensor<T>],
    state: &mut AdamState<T>,
    lr: f64,
    cfg: &AdamConfig,
) -> Result<()> {
    if params.len() != grads.len() || params.len() != state.m.len() {
        return Err(Error::Config(format!(
            "{} parameters, {} gradients, {} optimizer slots",
            params.len(),
            grads.len(),
            state.m.len()
        )));
    }
    for (i, (p, g)) in params.iter().zip(grads).enumerate() {
        if p.shape() != g.shape() || p.shape() != state.m[i].shape() {
            return Err(Error::shape("adam_step", p.shape(), g.shape()));
        }
    }
    state.step += 1;
    let t = state.step as i32;
    let (b1, b2) = (T::of(cfg.beta1), T::of(cfg.beta2));
    let c1 = T::of(1.0 - cfg.beta1.powi(t));
    let c2 = T::of(1.0 - cfg.beta2.powi(t));
    let (lr, eps) = (T::of(lr), T::of(cfg.epsilon));
    let one = T::one();
    for (i, p) in params.into_iter().enumerate() {
        let g = grads[i].data();
        let m = state.m[i].data_mut();
        let v = state.v[i].data_mut();
        for (k, w) in p.data_mut().iter_mut().enumerate() {
            m[k] = b1 * m[k] + (one - b1) * g[k];
            v[k] = b2 * v[k] + (one - b2) * g[k] * g[k];
            let mhat = m[k] / c1;
            let vhat = v[k] / c2;
            *w = *w - lr * mhat / (vhat.sqrt() + eps);
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zero_gradient_leaves_parameters() {
        let mut p = Tensor::<f64>::from_rows(&[&[1.0, -2.0]]);
        let mut st = AdamState::new([(1, 2)]);
        st.m[0] = Tensor::from_rows(&[&[0.5, 0.5]]);
        let before = p.clone();
        adam_step(vec![&mut p], &[Tensor::zeros(1, 2)], &mut st, 0.1, &AdamConfig::default()).unwrap();
        assert_eq!(st.m[0], Tensor::from_rows(&[&[0.45, 0.45]]));
        // the decayed first moment still moves the parameter; with zero
        // history it would not
        let mut q = before.clone();
        let mut fresh = AdamState::new([(1, 2)]);
        adam_step(vec![&mut q], &[Tensor::zeros(1, 2)], &mut fresh, 0.1, &AdamConfig::default()).unwrap();
        assert_eq!(q, before);
        assert_ne!(p, before);
    }

    #[test]
    fn first_step_moves_by_lr_times_sign() {
        let mut p = Tensor::<f64>::from_rows(&[&[1.0, 1.0, 1.0]]);
        let mut st = AdamState::new([(1, 3)]);
        let g = Tensor::from_rows(&[&[3.0, -0.002, 40.0]]);
        let cfg = AdamConfig { epsilon: 1e-12, ..AdamConfig::default() };
        adam_step(vec![&mut p], &[g], &mut st, 0.01, &cfg).unwrap();
        for (v, want) in p.data().iter().zip([0.99, 1.01, 0.99]) {
            assert!((v - want).abs() < 1e-8, "{v}");
        }
    }

    #[test]
    fn minimises_a_parabola() {
        let mut x = Tensor::<f64>::scalar(1.0);
        let mut st = AdamState::new([(1, 1)]);
        for _ in 0..100 {
            let g = x.map(|v| 2.0 * v);
            adam_step(vec![&mut x], &[g], &mut st, 0.1, &AdamConfig::default()).unwrap();
        }
        assert!(x.data()[0].abs() < 0.05, "{}", x.data()[0]);
    }

    #[test]
    fn shape_mismatch() {
        let mut p = Tensor::<f64>::zeros(2, 2);
        let mut st = AdamState::new([(2, 2)]);
        let r = adam_step(vec![&mut p], &[Tensor::zeros(1, 2)], &mut st, 0.1, &AdamConfig::default());
        assert!(matches!(r, Err(Error::Shape { .. })));
    }
}
