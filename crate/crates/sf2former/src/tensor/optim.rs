//! SGD with classic momentum and the cosine learning-rate schedule.

use super::{ParamStore, Scalar};
use crate::error::{Error, Result};

/// One optimizer step over every parameter:
/// `v <- momentum*v + grad; p <- p - lr*v`.
pub fn sgd_momentum_step<T: Scalar>(store: &mut ParamStore<T>, lr: f64, momentum: f64) -> Result<()> {
    if lr <= 0.0 {
        return Err(Error::usage(format!("sgd: lr must be positive, got {lr}")));
    }
    if !(0.0..1.0).contains(&momentum) {
        return Err(Error::usage(format!("sgd: momentum must be in [0,1), got {momentum}")));
    }
    let lr_t = T::from_f64(lr);
    let mu = T::from_f64(momentum);
    for p in store.iter_mut() {
        if p.tensor.grad.is_none() {
            return Err(Error::usage(format!(
                "sgd: parameter '{}' has no gradient",
                p.name()
            )));
        }
        let (data, grad) = p.tensor.data_and_grad();
        let grad = grad.unwrap();
        for ((v, &g), x) in p.momentum.iter_mut().zip(grad).zip(data.iter_mut()) {
            *v = mu * *v + g;
            *x = *x - lr_t * *v;
        }
    }
    Ok(())
}

/// `lr_min + 0.5*(lr_max - lr_min)*(1 + cos(pi*epoch/total))`.
pub fn cosine_lr(epoch: usize, total_epochs: usize, lr_max: f64, lr_min: f64) -> f64 {
    assert!(epoch <= total_epochs, "epoch {epoch} past total {total_epochs}");
    assert!(lr_max >= lr_min, "lr_max {lr_max} < lr_min {lr_min}");
    if total_epochs == 0 {
        return lr_max;
    }
    let phase = std::f64::consts::PI * epoch as f64 / total_epochs as f64;
    lr_min + 0.5 * (lr_max - lr_min) * (1.0 + phase.cos())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Tensor;

    #[test]
    fn plain_sgd_step() {
        // momentum=0, lr=0.1, grad=2, p=1 -> p=0.8
        let mut store = ParamStore::<f64>::new();
        let id = store.add("p", Tensor::from_f64s(&[1], &[1.0]).unwrap()).unwrap();
        store.get_mut(id).tensor.grad = Some(vec![2.0]);
        sgd_momentum_step(&mut store, 0.1, 0.0).unwrap();
        assert!((store.get(id).tensor.data()[0] - 0.8).abs() < 1e-15);
    }

    #[test]
    fn zero_grad_leaves_param_unchanged() {
        let mut store = ParamStore::<f64>::new();
        let id = store.add("p", Tensor::from_f64s(&[1], &[0.25]).unwrap()).unwrap();
        for _ in 0..4 {
            store.get_mut(id).tensor.grad = Some(vec![0.0]);
            sgd_momentum_step(&mut store, 0.1, 0.9).unwrap();
        }
        assert_eq!(store.get(id).tensor.data()[0], 0.25);
    }

    #[test]
    fn two_momentum_steps_hand_recursion() {
        // momentum 0.9, constant grad 1, lr 0.1, p0=0 -> p2 = -(0.1 + 0.19) = -0.29
        let mut store = ParamStore::<f64>::new();
        let id = store.add("p", Tensor::from_f64s(&[1], &[0.0]).unwrap()).unwrap();
        for _ in 0..2 {
            store.get_mut(id).tensor.grad = Some(vec![1.0]);
            sgd_momentum_step(&mut store, 0.1, 0.9).unwrap();
        }
        assert!((store.get(id).tensor.data()[0] - (-0.29)).abs() < 1e-12);
    }

    #[test]
    fn missing_grad_is_an_error() {
        let mut store = ParamStore::<f64>::new();
        store.add("p", Tensor::from_f64s(&[1], &[0.0]).unwrap()).unwrap();
        let err = sgd_momentum_step(&mut store, 0.1, 0.9).unwrap_err();
        assert!(err.to_string().contains("no gradient"));
    }

    #[test]
    fn cosine_endpoints_and_midpoint() {
        assert!((cosine_lr(0, 150, 1e-3, 1e-5) - 1e-3).abs() < 1e-12);
        assert!((cosine_lr(150, 150, 1e-3, 1e-5) - 1e-5).abs() < 1e-12);
        assert!((cosine_lr(75, 150, 1e-3, 1e-5) - 5.05e-4).abs() < 1e-9);
    }

    #[test]
    fn cosine_is_monotone_non_increasing() {
        let mut last = f64::INFINITY;
        for e in 0..=200 {
            let lr = cosine_lr(e, 200, 3e-3, 1e-6);
            assert!(lr <= last + 1e-15, "epoch {e}: {lr} > {last}");
            last = lr;
        }
    }
}
