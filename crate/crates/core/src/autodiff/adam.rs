use super::{ParamSet, Tensor};
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self { lr: 1e-4, beta1: 0.9, beta2: 0.999, eps: 1e-8 }
    }
}

/// First and second moment estimates plus the step counter.
#[derive(Clone, Debug, PartialEq)]
pub struct AdamState {
    pub m: Vec<Tensor>,
    pub v: Vec<Tensor>,
    pub t: u64,
}

impl AdamState {
    pub fn new(params: &ParamSet) -> Self {
        Self::for_tensors(params.tensors())
    }

    pub fn for_tensors(params: &[Tensor]) -> Self {
        let zeros = || params.iter().map(|p| Tensor::zeros(p.shape())).collect();
        Self { m: zeros(), v: zeros(), t: 0 }
    }
}

/// One bias-corrected Adam step; increments `state.t` first.
pub fn adam_update(
    params: &mut [Tensor],
    grads: &[Tensor],
    state: &mut AdamState,
    cfg: &AdamConfig,
) -> Result<()> {
    if params.len() != grads.len() || params.len() != state.m.len() {
        return Err(Error::Shape(format!(
            "adam: {} params, {} grads, {} moment slots",
            params.len(),
            grads.len(),
            state.m.len()
        )));
    }
    if let Some((p, g)) = params.iter().zip(grads).find(|(p, g)| p.shape() != g.shape()) {
        return Err(Error::Shape(format!("adam: param {:?} vs grad {:?}", p.shape(), g.shape())));
    }
    state.t += 1;
    let t = state.t as i32;
    let c1 = 1.0 - cfg.beta1.powi(t);
    let c2 = 1.0 - cfg.beta2.powi(t);
    for (((p, g), m), v) in params.iter_mut().zip(grads).zip(&mut state.m).zip(&mut state.v) {
        for (((pv, &gv), mv), vv) in
            p.data_mut().iter_mut().zip(g.data()).zip(m.data_mut()).zip(v.data_mut())
        {
            *mv = cfg.beta1 * *mv + (1.0 - cfg.beta1) * gv;
            *vv = cfg.beta2 * *vv + (1.0 - cfg.beta2) * gv * gv;
            let m_hat = *mv / c1;
            let v_hat = *vv / c2;
            *pv -= cfg.lr * m_hat / (v_hat.sqrt() + cfg.eps);
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn scalar_step(grads: &[f64], lr: f64) -> (f64, AdamState) {
        let mut p = vec![Tensor::scalar(0.0)];
        let mut st = AdamState::for_tensors(&p);
        let cfg = AdamConfig { lr, ..AdamConfig::default() };
        for &g in grads {
            adam_update(&mut p, &[Tensor::scalar(g)], &mut st, &cfg).unwrap();
        }
        (p[0].item(), st)
    }

    #[test]
    fn zero_gradient_is_a_no_op() {
        let (p, st) = scalar_step(&[0.0, 0.0, 0.0], 0.1);
        assert_eq!(p, 0.0);
        assert_eq!(st.t, 3);
    }

    #[test]
    fn first_step_is_lr() {
        // m̂ = 1, v̂ = 1 → Δ = −lr / (1 + eps)
        let (p, _) = scalar_step(&[1.0], 0.1);
        assert!((p + 0.1 / (1.0 + 1e-8)).abs() < 1e-15);
    }

    #[test]
    fn two_constant_steps_match_closed_form() {
        let g = 0.5;
        let (p, st) = scalar_step(&[g, g], 0.01);
        // m_2 = (1−β1)(β1 + 1) g, v_2 = (1−β2)(β2 + 1) g²
        let m2 = 0.1 * 1.9 * g;
        let v2 = 0.001 * 1.999 * g * g;
        assert!((st.m[0].item() - m2).abs() < 1e-15);
        assert!((st.v[0].item() - v2).abs() < 1e-15);
        // both bias-corrected moments equal g and g² exactly in exact arithmetic
        let step1 = 0.01 * g / (g + 1e-8);
        let step2 = 0.01 * (m2 / (1.0 - 0.81)) / ((v2 / (1.0 - 0.999f64.powi(2))).sqrt() + 1e-8);
        assert!((p + step1 + step2).abs() < 1e-14);
    }

    #[test]
    fn shape_mismatch_rejected() {
        let mut p = vec![Tensor::zeros(&[2])];
        let mut st = AdamState::for_tensors(&p);
        assert!(adam_update(&mut p, &[Tensor::zeros(&[3])], &mut st, &AdamConfig::default()).is_err());
    }
}
