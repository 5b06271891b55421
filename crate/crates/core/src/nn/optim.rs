use super::tensor::Tensor;
use super::NnError;

pub const ADAM_BETA1: f64 = 0.9;
pub const ADAM_BETA2: f64 = 0.999;
pub const ADAM_EPS: f64 = 1e-8;

/// First and second moment estimates for one parameter tensor.
#[derive(Clone, Debug, PartialEq)]
pub struct AdamState {
    pub m: Vec<f64>,
    pub v: Vec<f64>,
}

impl AdamState {
    pub fn new(len: usize) -> Self {
        Self { m: vec![0.0; len], v: vec![0.0; len] }
    }
}

fn check(param: &Tensor, grad: &Tensor) -> Result<(), NnError> {
    if param.shape() != grad.shape() {
        return Err(NnError::Shape(format!("parameter {:?} vs gradient {:?}", param.shape(), grad.shape())));
    }
    Ok(())
}

/// Bias-corrected Adam update; `t` is the 1-based step count.
pub fn adam_step(param: &mut Tensor, grad: &Tensor, state: &mut AdamState, lr: f64, t: u64) -> Result<(), NnError> {
    check(param, grad)?;
    if state.m.len() != param.len() {
        return Err(NnError::Shape("adam state does not match parameter".into()));
    }
    let c1 = 1.0 - ADAM_BETA1.powi(t as i32);
    let c2 = 1.0 - ADAM_BETA2.powi(t as i32);
    for (((w, &g), m), v) in param.data_mut().iter_mut().zip(grad.data()).zip(&mut state.m).zip(&mut state.v) {
        *m = ADAM_BETA1 * *m + (1.0 - ADAM_BETA1) * g;
        *v = ADAM_BETA2 * *v + (1.0 - ADAM_BETA2) * g * g;
        let mh = *m / c1;
        let vh = *v / c2;
        *w -= lr * mh / (vh.sqrt() + ADAM_EPS);
    }
    Ok(())
}

/// `w ← w − lr·grad`.
pub fn sgd_step(param: &mut Tensor, grad: &Tensor, lr: f64) -> Result<(), NnError> {
    check(param, grad)?;
    for (w, &g) in param.data_mut().iter_mut().zip(grad.data()) {
        *w -= lr * g;
    }
    Ok(())
}
