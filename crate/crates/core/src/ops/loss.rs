//! Mean-reduced L1 loss.

use crate::error::Result;
use crate::tensor::Tensor;

pub fn l1_loss(pred: &Tensor, target: &Tensor) -> Result<f32> {
    pred.check_same_shape(target, "l1_loss")?;
    let sum: f64 = pred
        .data()
        .iter()
        .zip(target.data())
        .map(|(&p, &t)| (p as f64 - t as f64).abs())
        .sum();
    Ok((sum / pred.numel() as f64) as f32)
}

/// Gradient with respect to `pred`; the target gradient is its negation.
pub fn l1_loss_backward(pred: &Tensor, target: &Tensor, grad_scalar: f32) -> Tensor {
    let scale = grad_scalar / pred.numel() as f32;
    let data = pred
        .data()
        .iter()
        .zip(target.data())
        .map(|(&p, &t)| {
            let d = p - t;
            if d > 0.0 {
                scale
            } else if d < 0.0 {
                -scale
            } else {
                0.0
            }
        })
        .collect();
    Tensor::new(pred.shape(), data).expect("same shape")
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn closed_forms() {
        let a = Tensor::new([1, 1, 1, 2], vec![0.0, 2.0]).unwrap();
        let b = Tensor::new([1, 1, 1, 2], vec![1.0, 0.0]).unwrap();
        assert_eq!(l1_loss(&a, &b).unwrap(), 1.5);
        assert_eq!(l1_loss(&a, &a).unwrap(), 0.0);
        let c = a.map(|v| v + 1.0);
        assert_eq!(l1_loss(&c, &a).unwrap(), 1.0);
    }

    #[test]
    fn shape_mismatch_errors() {
        assert!(l1_loss(&Tensor::zeros([1, 1, 2, 2]), &Tensor::zeros([1, 1, 2, 3])).is_err());
    }
}
