use super::tensor::Tensor;
use crate::error::{Error, Result};

pub const BETA1: f64 = 0.9;
pub const BETA2: f64 = 0.999;
pub const EPSILON: f64 = 1e-8;

/// First/second moment estimates for one parameter tensor.
#[derive(Clone, Debug, PartialEq)]
pub struct AdamState {
    pub m: Tensor,
    pub v: Tensor,
    pub step_count: u64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
}

impl AdamState {
    pub fn new(shape: &[usize]) -> Self {
        AdamState {
            m: Tensor::zeros(shape),
            v: Tensor::zeros(shape),
            step_count: 0,
            beta1: BETA1,
            beta2: BETA2,
            epsilon: EPSILON,
        }
    }

    /// One bias-corrected ADAM step; returns the updated parameter.
    pub fn update(&mut self, param: &Tensor, g: &Tensor, lr: f64) -> Result<Tensor> {
        if param.shape() != g.shape() || param.shape() != self.m.shape() {
            return Err(Error::shape(
                "adam_update",
                format!(
                    "param {:?}, grad {:?}, state {:?}",
                    param.shape(),
                    g.shape(),
                    self.m.shape()
                ),
            ));
        }
        if lr.is_nan() || lr <= 0.0 {
            return Err(Error::invalid("lr", format!("must be positive, got {lr}")));
        }
        self.step_count += 1;
        let t = self.step_count as i32;
        let (b1, b2, eps) = (self.beta1, self.beta2, self.epsilon);
        let c1 = 1.0 - b1.powi(t);
        let c2 = 1.0 - b2.powi(t);
        let mut out = param.clone();
        let m = self.m.data_mut();
        let v = self.v.data_mut();
        for (((p, &gi), mi), vi) in out.data_mut().iter_mut().zip(g.data()).zip(m).zip(v) {
            *mi = b1 * *mi + (1.0 - b1) * gi;
            *vi = b2 * *vi + (1.0 - b2) * gi * gi;
            let m_hat = *mi / c1;
            let v_hat = *vi / c2;
            *p -= lr * m_hat / (v_hat.sqrt() + eps);
        }
        Ok(out)
    }
}

/// Functional form: clones the state, applies one step, returns both.
pub fn adam_update(
    state: &AdamState,
    param: &Tensor,
    g: &Tensor,
    lr: f64,
) -> Result<(AdamState, Tensor)> {
    let mut next = state.clone();
    let p = next.update(param, g, lr)?;
    Ok((next, p))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zero_gradient_leaves_param() {
        let mut st = AdamState::new(&[3]);
        let p = Tensor::vector(vec![1.0, -2.0, 0.5]);
        let out = st.update(&p, &Tensor::zeros(&[3]), 0.1).unwrap();
        assert_eq!(out, p);
        assert_eq!(st.step_count, 1);
    }

    #[test]
    fn first_step_moves_by_lr() {
        // Reference recurrence evaluated independently: -0.09999999900000002
        let mut st = AdamState::new(&[1]);
        let out = st
            .update(&Tensor::vector(vec![0.0]), &Tensor::vector(vec![1.0]), 0.1)
            .unwrap();
        assert!((out.item() - (-0.09999999900000002)).abs() < 1e-15);
    }

    #[test]
    fn minimizes_quadratic() {
        let mut st = AdamState::new(&[1]);
        let mut x = Tensor::vector(vec![1.0]);
        for _ in 0..1000 {
            let g = x.map(|v| 2.0 * v);
            x = st.update(&x, &g, 0.05).unwrap();
        }
        assert!(x.item().abs() < 1e-3, "{}", x.item());
        assert_eq!(st.step_count, 1000);
    }

    #[test]
    fn pure_function_of_inputs() {
        let st = AdamState::new(&[2]);
        let p = Tensor::vector(vec![0.3, -0.7]);
        let g = Tensor::vector(vec![0.11, 2.5]);
        let (s1, p1) = adam_update(&st, &p, &g, 0.01).unwrap();
        let (s2, p2) = adam_update(&st, &p, &g, 0.01).unwrap();
        assert_eq!(p1, p2);
        assert_eq!(s1, s2);
    }

    #[test]
    fn rejects_bad_inputs() {
        let mut st = AdamState::new(&[2]);
        let p = Tensor::vector(vec![0.0, 0.0]);
        assert!(st.update(&p, &Tensor::zeros(&[3]), 0.1).is_err());
        assert!(st.update(&p, &Tensor::zeros(&[2]), 0.0).is_err());
    }
}
