use crate::error::{Error, Result};
use crate::numerics::Tensor;

/// Huber penalty: quadratic inside `|r| ≤ δ`, linear outside.
pub fn huber(r: f64, delta: f64) -> f64 {
    let a = r.abs();
    if a <= delta {
        0.5 * r * r
    } else {
        delta * (a - 0.5 * delta)
    }
}

/// Huber loss of `s×n×C` predictions: per-variable terms are summed and the
/// total is divided by `s·n`.
pub fn batch_loss(pred: &Tensor, target: &Tensor, delta: f64) -> Result<f64> {
    if pred.shape() != target.shape() || pred.rank() != 3 {
        return Err(Error::shape(
            "batch_loss",
            format!("{:?} vs {:?}", pred.shape(), target.shape()),
        ));
    }
    let vars = pred.shape()[2];
    let total: f64 = pred
        .data()
        .iter()
        .zip(target.data())
        .map(|(p, t)| huber(t - p, delta))
        .sum();
    Ok(total / (pred.len() / vars) as f64)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn huber_values() {
        assert_eq!(huber(0.0, 0.001), 0.0);
        assert!((huber(0.01, 0.001) - 9.5e-6).abs() < 1e-18);
        assert!((huber(-0.01, 0.001) - 9.5e-6).abs() < 1e-18);
    }

    #[test]
    fn huber_branches_meet_at_threshold() {
        let delta: f64 = 0.001;
        let quadratic = 0.5 * delta * delta;
        let linear = delta * (delta - 0.5 * delta);
        assert_eq!(quadratic, 5e-7);
        assert_eq!(linear, 5e-7);
        assert_eq!(huber(delta, delta), 5e-7);
        assert_eq!(huber(-delta, delta), 5e-7);
    }

    #[test]
    fn batch_loss_single_residual() {
        let pred = Tensor::zeros([1, 1, 3]);
        let target = Tensor::new([1, 1, 3], vec![0.0005, 0.0, 0.0]).unwrap();
        let loss = batch_loss(&pred, &target, 0.001).unwrap();
        assert!((loss - 1.25e-7).abs() < 1e-20);
    }

    #[test]
    fn duplicated_samples_leave_loss_unchanged() {
        let pred = Tensor::new([1, 2, 3], vec![0.1, -0.2, 0.3, 0.0, 0.5, -1.0]).unwrap();
        let target = Tensor::zeros([1, 2, 3]);
        let twice_pred = Tensor::new([2, 2, 3], pred.data().repeat(2)).unwrap();
        let twice_target = Tensor::zeros([2, 2, 3]);
        let a = batch_loss(&pred, &target, 0.001).unwrap();
        let b = batch_loss(&twice_pred, &twice_target, 0.001).unwrap();
        assert!((a - b).abs() < 1e-18);
    }

    #[test]
    fn shape_mismatch_rejected() {
        assert!(batch_loss(&Tensor::zeros([1, 2, 3]), &Tensor::zeros([1, 3, 3]), 0.1).is_err());
    }
}
