use super::Tensor;
use crate::error::{shape_err, Result};

/// Bias-corrected Adam moments for a fixed list of parameters.
#[derive(Clone, Debug, PartialEq)]
pub struct AdamState {
    pub step: u64,
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
}

impl AdamState {
    pub fn new(params: &[Tensor], lr: f64) -> Self {
        let zeros: Vec<Vec<f64>> = params.iter().map(|p| vec![0.0; p.numel()]).collect();
        Self {
            step: 0,
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            m: zeros.clone(),
            v: zeros,
        }
    }
}

/// One Adam update of `params` in place.
pub fn adam_step(params: &mut [Tensor], grads: &[Vec<f64>], state: &mut AdamState) -> Result<()> {
    if params.len() != grads.len() || params.len() != state.m.len() {
        return Err(shape_err(format!(
            "adam: {} params, {} grads, {} moment slots",
            params.len(),
            grads.len(),
            state.m.len()
        )));
    }
    for ((p, g), m) in params.iter().zip(grads).zip(&state.m) {
        if p.numel() != g.len() || p.numel() != m.len() {
            return Err(shape_err(format!(
                "adam: parameter of {} values got {} gradients",
                p.numel(),
                g.len()
            )));
        }
    }
    state.step += 1;
    let t = state.step as i32;
    let c1 = 1.0 - state.beta1.powi(t);
    let c2 = 1.0 - state.beta2.powi(t);
    let (b1, b2, lr, eps) = (state.beta1, state.beta2, state.lr, state.eps);
    for ((p, g), (m, v)) in params
        .iter_mut()
        .zip(grads)
        .zip(state.m.iter_mut().zip(state.v.iter_mut()))
    {
        for (((w, g), m), v) in p.data_mut().iter_mut().zip(g).zip(m.iter_mut()).zip(v.iter_mut()) {
            *m = b1 * *m + (1.0 - b1) * g;
            *v = b2 * *v + (1.0 - b2) * g * g;
            let mhat = *m / c1;
            let vhat = *v / c2;
            *w -= lr * mhat / (vhat.sqrt() + eps);
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zero_gradient_is_a_fixed_point() {
        let mut p = vec![Tensor::new(vec![3], vec![0.5, -1.0, 2.0]).unwrap()];
        let before = p.clone();
        let mut st = AdamState::new(&p, 1e-3);
        adam_step(&mut p, &[vec![0.0; 3]], &mut st).unwrap();
        assert_eq!(p, before);
        assert_eq!(st.step, 1);
    }

    #[test]
    fn first_step_is_bounded_by_lr() {
        let mut p = vec![Tensor::new(vec![4], vec![0.0; 4]).unwrap()];
        let mut st = AdamState::new(&p, 1e-3);
        adam_step(&mut p, &[vec![3.0, -1e-3, 50.0, -7.0]], &mut st).unwrap();
        for (x, g) in p[0].data().iter().zip([3.0, -1e-3, 50.0, -7.0f64]) {
            assert!(x.abs() <= 1e-3 * (1.0 + 1e-6));
            assert_eq!(x.signum(), -g.signum());
        }
    }

    #[test]
    fn quadratic_loss_decreases_every_step() {
        let mut p = vec![Tensor::new(vec![5], vec![1.0; 5]).unwrap()];
        let mut st = AdamState::new(&p, 1e-3);
        let loss = |p: &Tensor| 0.5 * p.data().iter().map(|x| x * x).sum::<f64>();
        let mut prev = loss(&p[0]);
        for _ in 0..10 {
            let g = p[0].data().to_vec();
            adam_step(&mut p, &[g], &mut st).unwrap();
            let now = loss(&p[0]);
            assert!(now < prev);
            prev = now;
        }
    }

    #[test]
    fn mismatched_shapes_rejected() {
        let mut p = vec![Tensor::zeros(vec![2])];
        let mut st = AdamState::new(&p, 1e-3);
        assert!(adam_step(&mut p, &[vec![0.0; 3]], &mut st).is_err());
        assert!(adam_step(&mut p, &[], &mut st).is_err());
    }
}
