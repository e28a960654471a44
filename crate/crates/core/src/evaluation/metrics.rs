use crate::error::{Error, Result};
use crate::ingest::{DatasetStats, WindowSample, VARIABLES};
use crate::numerics::Tensor;

fn check(pred: &Tensor, truth: &Tensor, op: &'static str) -> Result<()> {
    if pred.shape() != truth.shape() || pred.shape().len() != 3 {
        return Err(Error::shape(op, format!("{:?} vs {:?}", pred.shape(), truth.shape())));
    }
    if pred.is_empty() {
        return Err(Error::shape(op, "no samples"));
    }
    Ok(())
}

/// Mean squared residual over every sample, step and variable.
pub fn mse(pred: &Tensor, truth: &Tensor) -> Result<f64> {
    check(pred, truth, "mse")?;
    let sum: f64 = pred.data().iter().zip(truth.data()).map(|(p, t)| (p - t) * (p - t)).sum();
    Ok(sum / pred.len() as f64)
}

/// Mean absolute residual over every sample, step and variable.
pub fn mae(pred: &Tensor, truth: &Tensor) -> Result<f64> {
    check(pred, truth, "mae")?;
    let sum: f64 = pred.data().iter().zip(truth.data()).map(|(p, t)| (p - t).abs()).sum();
    Ok(sum / pred.len() as f64)
}

/// Repeats the last observed step of each `s×m×C` input `n` times.
pub fn persistence_baseline(inputs: &Tensor, n: usize) -> Result<Tensor> {
    let &[s, m, c] = inputs.shape() else {
        return Err(Error::shape("persistence_baseline", format!("expected s×m×C, got {:?}", inputs.shape())));
    };
    if m == 0 {
        return Err(Error::shape("persistence_baseline", "empty input window"));
    }
    let mut out = Vec::with_capacity(s * n * c);
    for i in 0..s {
        let last = &inputs.data()[(i * m + m - 1) * c..(i * m + m) * c];
        for _ in 0..n {
            out.extend_from_slice(last);
        }
    }
    Tensor::new([s, n, c], out)
}

/// Stacked `s×m×3` inputs of a window set.
pub fn stack_inputs(windows: &[WindowSample]) -> Result<Tensor> {
    let m = windows.first().ok_or(Error::EmptySplit("test"))?.input_steps();
    Tensor::new([windows.len(), m, VARIABLES], windows.iter().flat_map(|w| w.input.iter().copied()).collect())
}

/// Stacked `s×n×3` targets of a window set.
pub fn stack_targets(windows: &[WindowSample]) -> Result<Tensor> {
    let n = windows.first().ok_or(Error::EmptySplit("test"))?.target_steps();
    Tensor::new([windows.len(), n, VARIABLES], windows.iter().flat_map(|w| w.target.iter().copied()).collect())
}

/// Maps standardized `…×3` values back to degrees and meters.
pub fn to_raw_units(t: &Tensor, stats: &DatasetStats) -> Result<Tensor> {
    if t.shape().last() != Some(&VARIABLES) {
        return Err(Error::shape("to_raw_units", format!("last axis must be {VARIABLES}, got {:?}", t.shape())));
    }
    let data = t
        .data()
        .chunks_exact(VARIABLES)
        .flat_map(|v| stats.invert([v[0], v[1], v[2]]))
        .collect();
    Tensor::new(t.shape().to_vec(), data)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(shape: [usize; 3], v: &[f64]) -> Tensor {
        Tensor::new(shape, v.to_vec()).unwrap()
    }

    #[test]
    fn hand_examples() {
        let truth = t([1, 1, 3], &[0.0, 0.0, 0.0]);
        let pred = t([1, 1, 3], &[1.0, 2.0, -2.0]);
        assert_eq!(mse(&pred, &truth).unwrap(), 3.0);
        assert!((mae(&pred, &truth).unwrap() - 5.0 / 3.0).abs() < 1e-15);
        assert_eq!(mse(&truth, &truth).unwrap(), 0.0);
        assert_eq!(mae(&truth, &truth).unwrap(), 0.0);
    }

    #[test]
    fn shape_mismatch_is_an_error() {
        let a = t([1, 1, 3], &[0.0; 3]);
        let b = t([1, 3, 1], &[0.0; 3]);
        assert!(mse(&a, &b).is_err());
        assert!(mae(&a, &b).is_err());
    }

    #[test]
    fn constant_trajectory_has_zero_baseline_error() {
        let inputs = t([2, 4, 3], &[0.25; 24]);
        let pred = persistence_baseline(&inputs, 5).unwrap();
        assert_eq!(pred.shape(), &[2, 5, 3]);
        assert_eq!(mse(&pred, &t([2, 5, 3], &[0.25; 30])).unwrap(), 0.0);
    }

    #[test]
    fn linear_trajectory_baseline_error() {
        // Slope k per step: the j-th future step is off by k·j.
        let (m, n, k) = (6usize, 12usize, 0.3);
        let series: Vec<f64> = (0..m + n).flat_map(|s| [k * s as f64, -k * s as f64, 2.0 * k * s as f64]).collect();
        let inputs = t([1, m, 3], &series[..m * 3]);
        let truth = t([1, n, 3], &series[m * 3..]);
        let pred = persistence_baseline(&inputs, n).unwrap();
        let per_var = |scale: f64| scale * k * (n + 1) as f64 / 2.0;
        let want = (per_var(1.0) + per_var(1.0) + per_var(2.0)) / 3.0;
        assert!((mae(&pred, &truth).unwrap() - want).abs() < 1e-12);
    }

    #[test]
    fn raw_units_invert_standardization() {
        let stats = DatasetStats { mean: [116.0, 40.0, 150.0], std: [0.1, 0.05, 80.0] };
        let z = t([1, 1, 3], &[1.0, -2.0, 0.5]);
        let raw = to_raw_units(&z, &stats).unwrap();
        for (got, want) in raw.data().iter().zip([116.1, 39.9, 190.0]) {
            assert!((got - want).abs() < 1e-12);
        }
    }
}
