//! Supervised NMF with a fixed, overcomplete dictionary of training frames.
//!
//! Only the activations are optimized: per frame, projected Adam on
//! `||s - W h||_2` starting from `h = 1/N`.

use std::sync::Arc;

use thiserror::Error;

use crate::autodiff::{AutodiffError, Record, Tensor};
use crate::solver::{self, FrameProblem, SolverError, SolverSchedule, SolverTrace};

#[derive(Debug, Error)]
pub enum NmfError {
    #[error("dictionary atoms have dimension {dict}, frames have {frames}")]
    DimensionMismatch { dict: usize, frames: usize },
    #[error("dictionary has no atoms")]
    Empty,
    #[error("dictionary entry ({atom}, {bin}) is negative or not finite")]
    InvalidEntry { atom: usize, bin: usize },
    #[error("activation matrix has {got} rows, dictionary has {expected} atoms")]
    ActivationShape { got: usize, expected: usize },
    #[error(transparent)]
    Solver(#[from] SolverError),
    #[error(transparent)]
    Autodiff(#[from] AutodiffError),
}

pub type Result<T> = std::result::Result<T, NmfError>;

/// Non-negative atoms, each tagged with the source it was taken from.
#[derive(Debug, Clone, PartialEq)]
pub struct FixedDictionary {
    /// One atom per row, `N x D`.
    atoms: Arc<Tensor>,
    source_of: Vec<usize>,
    n_sources: usize,
}

impl FixedDictionary {
    pub fn new(atoms: Tensor, source_of: Vec<usize>) -> Result<Self> {
        let (n, d) = atoms.dims();
        if n == 0 {
            return Err(NmfError::Empty);
        }
        if source_of.len() != n {
            return Err(NmfError::ActivationShape {
                got: source_of.len(),
                expected: n,
            });
        }
        if let Some(i) = atoms.data().iter().position(|v| !(v.is_finite() && *v >= 0.0)) {
            return Err(NmfError::InvalidEntry {
                atom: i / d,
                bin: i % d,
            });
        }
        let n_sources = source_of.iter().max().map_or(0, |m| m + 1);
        Ok(Self {
            atoms: Arc::new(atoms),
            source_of,
            n_sources,
        })
    }

    /// Every frame of every source, in source order.
    pub fn from_sources(frames: &[Tensor]) -> Result<Self> {
        let mut rows = Vec::new();
        let mut source_of = Vec::new();
        for (k, f) in frames.iter().enumerate() {
            for i in 0..f.rows() {
                rows.push(f.row(i).to_vec());
                source_of.push(k);
            }
        }
        if rows.is_empty() {
            return Err(NmfError::Empty);
        }
        let d = rows[0].len();
        if let Some(f) = frames.iter().find(|f| f.rows() > 0 && f.cols() != d) {
            return Err(NmfError::DimensionMismatch {
                dict: d,
                frames: f.cols(),
            });
        }
        let mut dict = Self::new(Tensor::from_rows(&rows), source_of)?;
        dict.n_sources = dict.n_sources.max(frames.len());
        Ok(dict)
    }

    pub fn atoms(&self) -> &Tensor {
        &self.atoms
    }

    pub fn n_atoms(&self) -> usize {
        self.atoms.rows()
    }

    pub fn dim(&self) -> usize {
        self.atoms.cols()
    }

    pub fn source_of(&self) -> &[usize] {
        &self.source_of
    }

    pub fn n_sources(&self) -> usize {
        self.n_sources
    }

    /// `W H` as frames: `T x D` from activations `N x T`.
    pub fn reconstruct(&self, activations: &Tensor) -> Result<Tensor> {
        if activations.rows() != self.n_atoms() {
            return Err(NmfError::ActivationShape {
                got: activations.rows(),
                expected: self.n_atoms(),
            });
        }
        let mut rec = Record::new();
        let h = rec.constant(activations.transpose());
        let w = rec.constant_shared(self.atoms.clone());
        let out = rec.matmul(h, w)?;
        Ok(rec.value(out).clone())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct NmfResult {
    /// `N x T`.
    pub activations: Tensor,
    /// Final residual norm per frame.
    pub losses: Vec<f64>,
    pub traces: Vec<SolverTrace>,
}

struct NmfProblem<'a> {
    frames: &'a Tensor,
    dict: &'a FixedDictionary,
}

impl FrameProblem for NmfProblem<'_> {
    fn n_frames(&self) -> usize {
        self.frames.rows()
    }

    fn n_params(&self) -> usize {
        self.dict.n_atoms()
    }

    fn init(&self, _: usize, params: &mut [f64]) {
        params.fill(1.0 / params.len() as f64);
    }

    fn evaluate(&self, frames: &[usize], params: &[f64], grads: &mut [f64]) -> solver::Result<Vec<f64>> {
        let n = self.dict.n_atoms();
        let b = frames.len();
        let target: Vec<Vec<f64>> = frames.iter().map(|&f| self.frames.row(f).to_vec()).collect();
        let mut run = || -> std::result::Result<Vec<f64>, AutodiffError> {
            let mut rec = Record::new();
            let h = rec.leaf(Tensor::from_parts(vec![b, n], params.to_vec())?);
            let w = rec.constant_shared(self.dict.atoms.clone());
            let s = rec.constant(Tensor::from_rows(&target));
            let approx = rec.matmul(h, w)?;
            let resid = rec.sub(s, approx)?;
            let norms = rec.row_norm(resid)?;
            let total = rec.sum(norms)?;
            let g = rec.backward(total)?;
            grads.copy_from_slice(g.get_or_zeros(h, rec.value(h)).data());
            Ok(rec.value(norms).data().to_vec())
        };
        run().map_err(SolverError::from)
    }

    fn project(&self, params: &mut [f64]) {
        for v in params {
            *v = v.max(0.0);
        }
    }
}

/// Fit activations for every frame of `frames` (`T x D`).
pub fn nmf_decompose(frames: &Tensor, dict: &FixedDictionary, schedule: &SolverSchedule) -> Result<NmfResult> {
    if frames.cols() != dict.dim() {
        return Err(NmfError::DimensionMismatch {
            dict: dict.dim(),
            frames: frames.cols(),
        });
    }
    let problem = NmfProblem { frames, dict };
    let solutions = solver::solve_frames(&problem, schedule)?;
    let t = frames.rows();
    let n = dict.n_atoms();
    let mut h = Tensor::zeros(vec![n, t]);
    for (j, sol) in solutions.iter().enumerate() {
        for (i, &v) in sol.params.iter().enumerate() {
            h.data_mut()[i * t + j] = v;
        }
    }
    Ok(NmfResult {
        activations: h,
        losses: solutions.iter().map(|s| s.loss).collect(),
        traces: solutions.into_iter().map(|s| s.trace).collect(),
    })
}

/// Sum the activation rows of each source: `K x T` from `N x T`.
pub fn group_by_source(activations: &Tensor, dict: &FixedDictionary) -> Result<Tensor> {
    let (n, t) = activations.dims();
    if n != dict.n_atoms() {
        return Err(NmfError::ActivationShape {
            got: n,
            expected: dict.n_atoms(),
        });
    }
    let mut out = Tensor::zeros(vec![dict.n_sources(), t]);
    for (i, &k) in dict.source_of.iter().enumerate() {
        let src = activations.row(i).to_vec();
        for (o, v) in out.row_mut(k).iter_mut().zip(src) {
            *o += v;
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn schedule() -> SolverSchedule {
        SolverSchedule::default()
    }

    #[test]
    fn identity_dictionary() {
        let dict = FixedDictionary::new(Tensor::matrix(2, 2, vec![1.0, 0.0, 0.0, 1.0]), vec![0, 1]).unwrap();
        let s = Tensor::matrix(1, 2, vec![0.3, 0.7]);
        let out = nmf_decompose(&s, &dict, &schedule()).unwrap();
        assert!(out.losses[0] < 1e-6, "{}", out.losses[0]);
        assert!((out.activations.get(0, 0) - 0.3).abs() < 1e-5);
        assert!((out.activations.get(1, 0) - 0.7).abs() < 1e-5);
    }

    #[test]
    fn member_frame_has_tiny_residual() {
        let atoms = Tensor::matrix(
            3,
            4,
            vec![0.9, 0.1, 0.0, 0.3, 0.2, 0.8, 0.5, 0.0, 0.1, 0.1, 0.7, 0.9],
        );
        let dict = FixedDictionary::new(atoms.clone(), vec![0, 0, 1]).unwrap();
        let s = Tensor::matrix(1, 4, atoms.row(1).to_vec());
        let out = nmf_decompose(&s, &dict, &schedule()).unwrap();
        assert!(out.losses[0] < 1e-6);
        assert!(out.activations.data().iter().all(|&v| v >= 0.0));
        let rec = dict.reconstruct(&out.activations).unwrap();
        let r: f64 = rec.data().iter().zip(s.data()).map(|(a, b)| (a - b).powi(2)).sum::<f64>().sqrt();
        assert!((r - out.losses[0]).abs() < 1e-12);
    }

    #[test]
    fn grouping() {
        let dict = FixedDictionary::new(Tensor::zeros(vec![4, 3]), vec![0, 1, 0, 1]).unwrap();
        let h = Tensor::matrix(4, 2, vec![1.0, 2.0, 3.0, 4.0, 1.0, 2.0, 3.0, 4.0]);
        let g = group_by_source(&h, &dict).unwrap();
        assert_eq!(g.data(), &[2.0, 4.0, 6.0, 8.0]);
        let single = FixedDictionary::new(Tensor::zeros(vec![2, 3]), vec![0, 1]).unwrap();
        let h2 = Tensor::matrix(2, 2, vec![0.1, 0.2, 0.3, 0.4]);
        assert_eq!(group_by_source(&h2, &single).unwrap(), h2);
    }

    #[test]
    fn rejects_bad_inputs() {
        assert!(matches!(
            FixedDictionary::new(Tensor::matrix(1, 2, vec![0.1, -0.1]), vec![0]),
            Err(NmfError::InvalidEntry { atom: 0, bin: 1 })
        ));
        let dict = FixedDictionary::new(Tensor::matrix(1, 2, vec![0.1, 0.1]), vec![0]).unwrap();
        assert!(matches!(
            nmf_decompose(&Tensor::zeros(vec![1, 3]), &dict, &schedule()),
            Err(NmfError::DimensionMismatch { dict: 2, frames: 3 })
        ));
    }
}
