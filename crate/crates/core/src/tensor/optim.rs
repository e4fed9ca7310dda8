//! SGD with momentum and weight decay.

use super::{ParamBank, TensorError};

/// One optimizer step:
/// v <- momentum*v + grad + weight_decay*value; value <- value - lr*v.
/// The gradient is cleared afterwards.
pub fn sgd_momentum_step(
    bank: &mut ParamBank,
    lr: f32,
    momentum: f32,
    weight_decay: f32,
) -> Result<(), TensorError> {
    let op = "sgd_momentum_step";
    if !(lr > 0.0) {
        return Err(TensorError::BadHyperparam {
            op,
            message: format!("lr must be > 0, got {lr}"),
        });
    }
    if !(0.0..1.0).contains(&momentum) {
        return Err(TensorError::BadHyperparam {
            op,
            message: format!("momentum must be in [0, 1), got {momentum}"),
        });
    }
    if !(weight_decay >= 0.0) {
        return Err(TensorError::BadHyperparam {
            op,
            message: format!("weight_decay must be >= 0, got {weight_decay}"),
        });
    }
    if !bank.grad.all_finite() {
        return Err(TensorError::NonFiniteGrad {
            bank: bank.id.clone(),
        });
    }
    let value = bank.value.data_mut();
    let grad = bank.grad.data_mut();
    let vel = bank.momentum_state.data_mut();
    for ((w, g), v) in value.iter_mut().zip(grad.iter_mut()).zip(vel.iter_mut()) {
        *v = momentum * *v + *g + weight_decay * *w;
        *w -= lr * *v;
        *g = 0.0;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Tensor;

    fn bank(value: &[f32], grad: &[f32], vel: &[f32]) -> ParamBank {
        let n = value.len();
        let mut b = ParamBank::new("w", Tensor::from_vec(&[n], value.to_vec()).unwrap());
        b.grad = Tensor::from_vec(&[n], grad.to_vec()).unwrap();
        b.momentum_state = Tensor::from_vec(&[n], vel.to_vec()).unwrap();
        b
    }

    #[test]
    fn zero_grad_zero_momentum_is_a_noop() {
        let mut b = bank(&[1.0, -2.0], &[0.0, 0.0], &[0.0, 0.0]);
        sgd_momentum_step(&mut b, 0.1, 0.9, 0.0).unwrap();
        assert_eq!(b.value.data(), &[1.0, -2.0]);
        assert_eq!(b.momentum_state.data(), &[0.0, 0.0]);
    }

    #[test]
    fn plain_sgd_moves_by_lr_times_grad() {
        let mut b = bank(&[1.0], &[0.5], &[0.0]);
        sgd_momentum_step(&mut b, 0.1, 0.0, 0.0).unwrap();
        assert_eq!(b.value.data(), &[1.0 - 0.1 * 0.5]);
        assert_eq!(b.grad.data(), &[0.0]);
    }

    #[test]
    fn two_momentum_steps_match_unrolled_recurrence() {
        // v1 = g1, w1 = w0 - lr*v1; v2 = m*v1 + g2, w2 = w1 - lr*v2.
        let (w0, g1, g2, lr, m) = (2.0f32, 0.4f32, -0.3f32, 0.05f32, 0.9f32);
        let v1 = g1;
        let w1 = w0 - lr * v1;
        let v2 = m * v1 + g2;
        let w2 = w1 - lr * v2;

        let mut b = bank(&[w0], &[g1], &[0.0]);
        sgd_momentum_step(&mut b, lr, m, 0.0).unwrap();
        assert_eq!(b.value.data(), &[w1]);
        b.grad = Tensor::from_vec(&[1], vec![g2]).unwrap();
        sgd_momentum_step(&mut b, lr, m, 0.0).unwrap();
        assert_eq!(b.value.data(), &[w2]);
        assert_eq!(b.momentum_state.data(), &[v2]);
    }

    #[test]
    fn weight_decay_pulls_toward_zero() {
        let mut b = bank(&[10.0], &[0.0], &[0.0]);
        sgd_momentum_step(&mut b, 0.1, 0.0, 0.01).unwrap();
        assert_eq!(b.value.data(), &[10.0 - 0.1 * (0.01 * 10.0)]);
    }

    #[test]
    fn non_finite_grad_names_the_bank() {
        let mut b = bank(&[1.0], &[f32::NAN], &[0.0]);
        let err = sgd_momentum_step(&mut b, 0.1, 0.0, 0.0).unwrap_err();
        assert_eq!(err, TensorError::NonFiniteGrad { bank: "w".into() });
    }

    #[test]
    fn invalid_hyperparams_are_rejected() {
        let mut b = bank(&[1.0], &[0.0], &[0.0]);
        assert!(sgd_momentum_step(&mut b, 0.0, 0.0, 0.0).is_err());
        assert!(sgd_momentum_step(&mut b, 0.1, 1.0, 0.0).is_err());
        assert!(sgd_momentum_step(&mut b, 0.1, 0.0, -1.0).is_err());
    }
}
