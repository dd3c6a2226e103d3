//! Measurements: reconstruction error, likelihood-based confusion between
//! source models, and frame-level attribution F1.

use thiserror::Error;

use crate::autodiff::Tensor;
use crate::flow::{FlowError, FlowModel};

#[derive(Debug, Error)]
pub enum EvalError {
    #[error("shape mismatch: {left:?} vs {right:?}")]
    ShapeMismatch { left: Vec<usize>, right: Vec<usize> },
    #[error("{0} is empty")]
    Empty(&'static str),
    #[error("{models} models but {sets} frame sets")]
    CountMismatch { models: usize, sets: usize },
    #[error("truth entry {index} is {value}, expected 0 or 1")]
    NotBinary { index: usize, value: f64 },
    #[error("value at {index} is not finite")]
    NonFinite { index: usize },
    #[error(transparent)]
    Flow(#[from] FlowError),
}

pub type Result<T> = std::result::Result<T, EvalError>;

fn same_shape(a: &Tensor, b: &Tensor) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(EvalError::ShapeMismatch {
            left: a.shape().to_vec(),
            right: b.shape().to_vec(),
        });
    }
    Ok(())
}

/// L2 error of each frame (row).
pub fn frame_errors(s: &Tensor, s_hat: &Tensor) -> Result<Vec<f64>> {
    same_shape(s, s_hat)?;
    Ok((0..s.rows())
        .map(|t| {
            s.row(t)
                .iter()
                .zip(s_hat.row(t))
                .map(|(a, b)| (a - b) * (a - b))
                .sum::<f64>()
                .sqrt()
        })
        .collect())
}

/// Mean over frames of the L2 error.
pub fn reconstruction_error(s: &Tensor, s_hat: &Tensor) -> Result<f64> {
    let e = frame_errors(s, s_hat)?;
    if e.is_empty() {
        return Err(EvalError::Empty("frame set"));
    }
    Ok(e.iter().sum::<f64>() / e.len() as f64)
}

/// Fraction of `own` log-likelihoods strictly below the largest of `other`.
pub fn d_os_from_log_likelihoods(own: &[f64], other: &[f64]) -> Result<f64> {
    if own.is_empty() {
        return Err(EvalError::Empty("own set"));
    }
    if other.is_empty() {
        return Err(EvalError::Empty("contrast set"));
    }
    let theta = other.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let below = own.iter().filter(|&&l| l < theta).count();
    Ok(below as f64 / own.len() as f64)
}

/// One-sided discriminativeness of `model` for its own frames against frames
/// of another source. Pass `same_source` for the diagonal, which is 1.
pub fn one_sided_discriminativeness(
    model: &FlowModel,
    own: &Tensor,
    other: &Tensor,
    same_source: bool,
) -> Result<f64> {
    if own.rows() == 0 {
        return Err(EvalError::Empty("own set"));
    }
    if other.rows() == 0 {
        return Err(EvalError::Empty("contrast set"));
    }
    if same_source {
        return Ok(1.0);
    }
    let own_ll = model.log_likelihood_batch(own)?;
    let other_ll = model.log_likelihood_batch(other)?;
    d_os_from_log_likelihoods(&own_ll, &other_ll)
}

/// `K x K`; row = model, column = contrast source.
#[derive(Debug, Clone, PartialEq)]
pub struct ConfusionMatrix {
    pub values: Tensor,
}

impl ConfusionMatrix {
    pub fn k(&self) -> usize {
        self.values.rows()
    }

    pub fn max_off_diagonal(&self) -> f64 {
        let k = self.k();
        let mut m: f64 = 0.0;
        for i in 0..k {
            for j in 0..k {
                if i != j {
                    m = m.max(self.values.get(i, j));
                }
            }
        }
        m
    }
}

/// Entry `(k, j)` is the discriminativeness of `flows[k]` on `sets[k]`
/// against `sets[j]`.
pub fn confusion_matrix(flows: &[FlowModel], sets: &[Tensor]) -> Result<ConfusionMatrix> {
    if flows.len() != sets.len() {
        return Err(EvalError::CountMismatch {
            models: flows.len(),
            sets: sets.len(),
        });
    }
    let k = flows.len();
    if sets.iter().any(|s| s.rows() == 0) {
        return Err(EvalError::Empty("frame set"));
    }
    let lls: Vec<Vec<Vec<f64>>> = flows
        .iter()
        .map(|f| sets.iter().map(|s| f.log_likelihood_batch(s)).collect::<std::result::Result<_, _>>())
        .collect::<std::result::Result<_, _>>()?;
    let mut values = Tensor::zeros(vec![k, k]);
    for i in 0..k {
        for j in 0..k {
            let v = if i == j {
                1.0
            } else {
                d_os_from_log_likelihoods(&lls[i][i], &lls[i][j])?
            };
            values.data_mut()[i * k + j] = v;
        }
    }
    Ok(ConfusionMatrix { values })
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct F1Report {
    pub threshold: f64,
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    pub tp: usize,
    pub fp: usize,
    pub fn_: usize,
}

impl F1Report {
    fn from_counts(threshold: f64, tp: usize, fp: usize, fn_: usize) -> Self {
        let ratio = |a: usize, b: usize| if b == 0 { 0.0 } else { a as f64 / b as f64 };
        let precision = ratio(tp, tp + fp);
        let recall = ratio(tp, tp + fn_);
        let f1 = if precision + recall > 0.0 {
            2.0 * precision * recall / (precision + recall)
        } else {
            0.0
        };
        Self {
            threshold,
            precision,
            recall,
            f1,
            tp,
            fp,
            fn_,
        }
    }
}

fn check_pair(h: &Tensor, truth: &Tensor) -> Result<()> {
    same_shape(h, truth)?;
    if let Some(index) = h.data().iter().position(|v| !v.is_finite()) {
        return Err(EvalError::NonFinite { index });
    }
    if let Some(index) = truth.data().iter().position(|&v| v != 0.0 && v != 1.0) {
        return Err(EvalError::NotBinary {
            index,
            value: truth.data()[index],
        });
    }
    Ok(())
}

/// Cellwise counts of `h >= threshold` against binary `truth`.
pub fn frame_f1(h: &Tensor, truth: &Tensor, threshold: f64) -> Result<F1Report> {
    check_pair(h, truth)?;
    let (mut tp, mut fp, mut fn_) = (0, 0, 0);
    for (&v, &t) in h.data().iter().zip(truth.data()) {
        match (v >= threshold, t == 1.0) {
            (true, true) => tp += 1,
            (true, false) => fp += 1,
            (false, true) => fn_ += 1,
            (false, false) => {}
        }
    }
    Ok(F1Report::from_counts(threshold, tp, fp, fn_))
}

/// Best threshold over the midpoints between consecutive distinct values of
/// `h`, plus one threshold below and one above every value. Ties go to the
/// larger threshold.
pub fn calibrate_threshold(h: &Tensor, truth: &Tensor) -> Result<F1Report> {
    check_pair(h, truth)?;
    if h.is_empty() {
        return Err(EvalError::Empty("activation matrix"));
    }
    let mut cells: Vec<(f64, bool)> = h.data().iter().zip(truth.data()).map(|(&v, &t)| (v, t == 1.0)).collect();
    cells.sort_by(|a, b| b.0.total_cmp(&a.0));
    let positives = cells.iter().filter(|c| c.1).count();
    let hi = cells[0].0;
    let lo = cells[cells.len() - 1].0;
    let margin = |v: f64| v.abs().max(1.0);

    // sweep thresholds from high to low; predicted positives grow by one
    // group of equal values at a time
    let mut best = F1Report::from_counts(hi + margin(hi), 0, 0, positives);
    let (mut tp, mut fp) = (0, 0);
    let mut i = 0;
    while i < cells.len() {
        let v = cells[i].0;
        while i < cells.len() && cells[i].0 == v {
            if cells[i].1 {
                tp += 1;
            } else {
                fp += 1;
            }
            i += 1;
        }
        let threshold = if i < cells.len() {
            0.5 * (v + cells[i].0)
        } else {
            lo - margin(lo)
        };
        let r = F1Report::from_counts(threshold, tp, fp, positives - tp);
        if r.f1 > best.f1 {
            best = r;
        }
    }
    Ok(best)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn reconstruction_examples() {
        let s = Tensor::matrix(1, 2, vec![3.0, 4.0]);
        assert_eq!(reconstruction_error(&s, &Tensor::zeros(vec![1, 2])).unwrap(), 5.0);
        assert_eq!(reconstruction_error(&s, &s).unwrap(), 0.0);
        let a = Tensor::matrix(2, 1, vec![1.0, 3.0]);
        assert_eq!(reconstruction_error(&a, &Tensor::zeros(vec![2, 1])).unwrap(), 2.0);
        assert!(reconstruction_error(&a, &s).is_err());
    }

    #[test]
    fn d_os_examples() {
        let v = d_os_from_log_likelihoods(&[-1.0, -0.5, -0.1], &[-0.5, -3.0]).unwrap();
        assert!((v - 1.0 / 3.0).abs() < 1e-15);
        assert_eq!(d_os_from_log_likelihoods(&[1.0, 2.0], &[-10.0]).unwrap(), 0.0);
        assert!(d_os_from_log_likelihoods(&[], &[1.0]).is_err());
    }

    #[test]
    fn f1_by_hand() {
        let truth = Tensor::matrix(2, 2, vec![1.0, 0.0, 0.0, 1.0]);
        let h = Tensor::matrix(2, 2, vec![0.9, 0.8, 0.1, 0.7]);
        let r = frame_f1(&h, &truth, 0.5).unwrap();
        assert_eq!((r.tp, r.fp, r.fn_), (2, 1, 0));
        assert!((r.precision - 2.0 / 3.0).abs() < 1e-15);
        assert_eq!(r.recall, 1.0);
        assert!((r.f1 - 0.8).abs() < 1e-15);
        let none = frame_f1(&h, &truth, 2.0).unwrap();
        assert_eq!((none.tp, none.fp, none.f1), (0, 0, 0.0));
    }

    #[test]
    fn calibration_is_optimal_and_consistent() {
        let truth = Tensor::matrix(2, 3, vec![1.0, 1.0, 0.0, 0.0, 1.0, 0.0]);
        let h = Tensor::matrix(2, 3, vec![0.9, 0.4, 0.5, 0.1, 0.6, 0.4]);
        let best = calibrate_threshold(&h, &truth).unwrap();
        let again = frame_f1(&h, &truth, best.threshold).unwrap();
        assert_eq!(best, again);
        for th in [-1.0, 0.25, 0.45, 0.55, 0.75, 2.0] {
            assert!(frame_f1(&h, &truth, th).unwrap().f1 <= best.f1);
        }
        let perfect = calibrate_threshold(&truth, &truth).unwrap();
        assert_eq!(perfect.f1, 1.0);
        assert_eq!(perfect.threshold, 0.5);
        let empty = calibrate_threshold(&h, &Tensor::zeros(vec![2, 3])).unwrap();
        assert_eq!(empty.f1, 0.0);
        assert!(matches!(
            calibrate_threshold(&h, &Tensor::filled(vec![2, 3], 0.5)),
            Err(EvalError::NotBinary { .. })
        ));
    }
}
