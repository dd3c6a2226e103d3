//! Dictionary search: explain each frame as a non-negative mix of one
//! generated atom per source, `s ~ sum_k h_k f_k^-1(z_k)`, optimizing the
//! latent codes `z_k` and gains `h_k` jointly while the flows stay frozen.
//!
//! Per-frame loss:
//!
//! ```text
//! ||s - sum_k h_k f_k^-1(z_k)||_2 - c / (D sum_k h_k) * sum_k h_k log p_Z(z_k)
//! ```
//!
//! The gain sum in the denominator is clamped below at [`H_SUM_FLOOR`].

use std::sync::Arc;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::autodiff::{AutodiffError, Record, Tensor, Var};
use crate::flow::{log_prior_graph, BoundFlow, FlowError, FlowModel};
use crate::solver::{self, FrameProblem, SolverError, SolverSchedule, SolverTrace, StopReason};

pub const H_SUM_FLOOR: f64 = 1e-12;

#[derive(Debug, Error)]
pub enum DdsError {
    #[error("no flows given")]
    NoFlows,
    #[error("flow {index} has dimension {got}, expected {expected}")]
    DimensionMismatch { index: usize, expected: usize, got: usize },
    #[error("expected {expected} values for {what}, got {got}")]
    Shape { what: &'static str, expected: usize, got: usize },
    #[error("invalid setting: {0}")]
    Config(String),
    #[error(transparent)]
    Flow(#[from] FlowError),
    #[error(transparent)]
    Autodiff(#[from] AutodiffError),
    #[error(transparent)]
    Solver(#[from] SolverError),
}

pub type Result<T> = std::result::Result<T, DdsError>;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DdsConfig {
    /// Weight of the latent log-prior penalty.
    pub c: f64,
    /// Starting gain of every source. `None` means `1/K`.
    pub h_init: Option<f64>,
}

impl Default for DdsConfig {
    fn default() -> Self {
        Self { c: 1e-3, h_init: None }
    }
}

impl DdsConfig {
    pub fn validate(&self) -> Result<()> {
        let h_ok = self.h_init.is_none_or(|h| h.is_finite() && h >= 0.0);
        if !(self.c.is_finite() && self.c >= 0.0) || !h_ok {
            return Err(DdsError::Config(format!("{self:?}")));
        }
        Ok(())
    }
}

fn check_flows(flows: &[FlowModel], dim: usize) -> Result<()> {
    if flows.is_empty() {
        return Err(DdsError::NoFlows);
    }
    for (index, f) in flows.iter().enumerate() {
        if f.dim() != dim {
            return Err(DdsError::DimensionMismatch {
                index,
                expected: dim,
                got: f.dim(),
            });
        }
    }
    Ok(())
}

/// Variables of a batched loss graph.
struct LossGraph {
    z: Var,
    h: Var,
    /// Per-frame loss, `[B,1]`.
    loss: Var,
}

/// Build the loss for `B` frames. `z` is `[B, K*D]` (source-major within a
/// row) and `h` is `[B, K]`.
fn build_loss(
    rec: &mut Record,
    bound: &[BoundFlow],
    s: Tensor,
    z: Tensor,
    h: Tensor,
    c: f64,
) -> std::result::Result<LossGraph, FlowError> {
    let k = bound.len();
    let d = s.cols();
    let s = rec.constant(s);
    let zv = rec.leaf(z);
    let hv = rec.leaf(h);
    let mut approx: Option<Var> = None;
    let mut weighted_prior: Option<Var> = None;
    let mut h_sum: Option<Var> = None;
    for (i, flow) in bound.iter().enumerate() {
        let zk = rec.gather(zv, (i * d..(i + 1) * d).collect::<Arc<[usize]>>())?;
        let hk = rec.gather(hv, Arc::from([i]))?;
        let wk = flow.inverse(rec, zk)?;
        let part = rec.mul_col(wk, hk)?;
        let lp = log_prior_graph(rec, zk)?;
        let wlp = rec.mul(hk, lp)?;
        approx = Some(match approx {
            Some(a) => rec.add(a, part)?,
            None => part,
        });
        weighted_prior = Some(match weighted_prior {
            Some(a) => rec.add(a, wlp)?,
            None => wlp,
        });
        h_sum = Some(match h_sum {
            Some(a) => rec.add(a, hk)?,
            None => hk,
        });
    }
    let (approx, weighted_prior, h_sum) = (approx.unwrap(), weighted_prior.unwrap(), h_sum.unwrap());
    let resid = rec.sub(s, approx)?;
    let norm = rec.row_norm(resid)?;
    let loss = if c == 0.0 {
        norm
    } else {
        let den = rec.clamp_min(h_sum, H_SUM_FLOOR)?;
        let mean_prior = rec.div(weighted_prior, den)?;
        let penalty = rec.scale(mean_prior, -c / d as f64)?;
        rec.add(norm, penalty)?
    };
    debug_assert_eq!(rec.value(hv).cols(), k);
    Ok(LossGraph { z: zv, h: hv, loss })
}

fn frame_inputs(s: &[f64], z: &Tensor, h: &[f64], flows: &[FlowModel]) -> Result<(Tensor, Tensor, Tensor)> {
    check_flows(flows, s.len())?;
    let k = flows.len();
    if z.dims() != (k, s.len()) {
        return Err(DdsError::Shape {
            what: "latent codes",
            expected: k * s.len(),
            got: z.len(),
        });
    }
    if h.len() != k {
        return Err(DdsError::Shape {
            what: "gains",
            expected: k,
            got: h.len(),
        });
    }
    Ok((
        Tensor::row_vector(s.to_vec()),
        Tensor::row_vector(z.data().to_vec()),
        Tensor::row_vector(h.to_vec()),
    ))
}

/// Loss of one frame. `z` is `K x D`, `h` has `K` entries.
pub fn dds_loss(s: &[f64], z: &Tensor, h: &[f64], flows: &[FlowModel], c: f64) -> Result<f64> {
    let (sv, zv, hv) = frame_inputs(s, z, h, flows)?;
    let mut rec = Record::new();
    let bound: Vec<BoundFlow> = flows.iter().map(|f| f.bind(&mut rec, false)).collect();
    let g = build_loss(&mut rec, &bound, sv, zv, hv, c)?;
    Ok(rec.value(g.loss).item())
}

/// Loss of one frame with its gradients: `(loss, dL/dz [K,D], dL/dh [K])`.
pub fn dds_loss_with_gradient(
    s: &[f64],
    z: &Tensor,
    h: &[f64],
    flows: &[FlowModel],
    c: f64,
) -> Result<(f64, Tensor, Vec<f64>)> {
    let (sv, zv, hv) = frame_inputs(s, z, h, flows)?;
    let mut rec = Record::new();
    let bound: Vec<BoundFlow> = flows.iter().map(|f| f.bind(&mut rec, false)).collect();
    let g = build_loss(&mut rec, &bound, sv, zv, hv, c)?;
    let total = rec.sum(g.loss)?;
    let grads = rec.backward(total)?;
    let dz = grads.get_or_zeros(g.z, rec.value(g.z));
    let dh = grads.get_or_zeros(g.h, rec.value(g.h));
    Ok((
        rec.value(g.loss).item(),
        Tensor::matrix(flows.len(), s.len(), dz.into_data()),
        dh.into_data(),
    ))
}

#[derive(Debug, Clone, PartialEq)]
pub struct DdsResult {
    /// Gains, `K x T`.
    pub activations: Tensor,
    /// Latent codes, `T x K x D`.
    pub latents: Tensor,
    /// `T x D`.
    pub reconstruction: Tensor,
    /// Final loss per frame (best iterate).
    pub losses: Vec<f64>,
    pub traces: Vec<SolverTrace>,
}

impl DdsResult {
    pub fn failed_frames(&self) -> Vec<usize> {
        (0..self.traces.len())
            .filter(|&t| self.traces[t].stop == StopReason::Failed)
            .collect()
    }
}

struct DdsProblem<'a> {
    frames: &'a Tensor,
    flows: &'a [FlowModel],
    config: &'a DdsConfig,
}

fn is_numeric(e: &FlowError) -> bool {
    matches!(
        e,
        FlowError::Overflow { .. }
            | FlowError::Autodiff(AutodiffError::NonFiniteGradient { .. } | AutodiffError::NonFinite { .. })
    )
}

impl DdsProblem<'_> {
    fn k(&self) -> usize {
        self.flows.len()
    }

    fn d(&self) -> usize {
        self.frames.cols()
    }

    fn evaluate_batch(&self, frames: &[usize], params: &[f64], grads: &mut [f64]) -> std::result::Result<Vec<f64>, FlowError> {
        let (k, d) = (self.k(), self.d());
        let p = k * d + k;
        let b = frames.len();
        let rows: Vec<&[f64]> = frames.iter().map(|&f| self.frames.row(f)).collect();
        let mut z = Vec::with_capacity(b * k * d);
        let mut h = Vec::with_capacity(b * k);
        for row in params.chunks(p) {
            z.extend_from_slice(&row[..k * d]);
            h.extend_from_slice(&row[k * d..]);
        }
        let mut rec = Record::new();
        let bound: Vec<BoundFlow> = self.flows.iter().map(|f| f.bind(&mut rec, false)).collect();
        let g = build_loss(
            &mut rec,
            &bound,
            Tensor::from_rows(&rows),
            Tensor::from_parts(vec![b, k * d], z)?,
            Tensor::from_parts(vec![b, k], h)?,
            self.config.c,
        )?;
        let total = rec.sum(g.loss)?;
        let gr = rec.backward(total)?;
        let dz = gr.get_or_zeros(g.z, rec.value(g.z));
        let dh = gr.get_or_zeros(g.h, rec.value(g.h));
        for (i, out) in grads.chunks_mut(p).enumerate() {
            out[..k * d].copy_from_slice(dz.row(i));
            out[k * d..].copy_from_slice(dh.row(i));
        }
        Ok(rec.value(g.loss).data().to_vec())
    }
}

impl FrameProblem for DdsProblem<'_> {
    fn n_frames(&self) -> usize {
        self.frames.rows()
    }

    fn n_params(&self) -> usize {
        self.k() * self.d() + self.k()
    }

    fn init(&self, _: usize, params: &mut [f64]) {
        let kd = self.k() * self.d();
        params[..kd].fill(0.0);
        let h0 = self.config.h_init.unwrap_or(1.0 / self.k() as f64);
        params[kd..].fill(h0);
    }

    fn evaluate(&self, frames: &[usize], params: &[f64], grads: &mut [f64]) -> solver::Result<Vec<f64>> {
        match self.evaluate_batch(frames, params, grads) {
            Ok(l) => Ok(l),
            Err(e) if is_numeric(&e) && frames.len() > 1 => {
                // isolate the offending frames; rows do not interact
                let p = self.n_params();
                let mut out = Vec::with_capacity(frames.len());
                for (i, &f) in frames.iter().enumerate() {
                    let g = &mut grads[i * p..(i + 1) * p];
                    match self.evaluate_batch(&[f], &params[i * p..(i + 1) * p], g) {
                        Ok(l) => out.push(l[0]),
                        Err(e) if is_numeric(&e) => out.push(f64::NAN),
                        Err(e) => return Err(SolverError::Problem(e.to_string())),
                    }
                }
                Ok(out)
            }
            Err(e) if is_numeric(&e) => Ok(vec![f64::NAN]),
            Err(e) => Err(SolverError::Problem(e.to_string())),
        }
    }

    fn project(&self, params: &mut [f64]) {
        let kd = self.k() * self.d();
        for v in &mut params[kd..] {
            *v = v.max(0.0);
        }
    }
}

/// Decompose every frame of `frames` (`T x D`) with one flow per source.
pub fn dds_decompose(
    frames: &Tensor,
    flows: &[FlowModel],
    schedule: &SolverSchedule,
    config: &DdsConfig,
) -> Result<DdsResult> {
    check_flows(flows, frames.cols())?;
    config.validate()?;
    let problem = DdsProblem { frames, flows, config };
    let solutions = solver::solve_frames(&problem, schedule)?;
    let (t, k, d) = (frames.rows(), flows.len(), frames.cols());
    let mut h = Tensor::zeros(vec![k, t]);
    let mut z = Vec::with_capacity(t * k * d);
    for (j, sol) in solutions.iter().enumerate() {
        z.extend_from_slice(&sol.params[..k * d]);
        for i in 0..k {
            h.data_mut()[i * t + j] = sol.params[k * d + i];
        }
    }
    let latents = Tensor::from_parts(vec![t, k, d], z)?;
    let reconstruction = reconstruct(&h, &latents, flows)?;
    Ok(DdsResult {
        activations: h,
        latents,
        reconstruction,
        losses: solutions.iter().map(|s| s.loss).collect(),
        traces: solutions.into_iter().map(|s| s.trace).collect(),
    })
}

/// `s_t = sum_k h[k,t] f_k^-1(z[t,k])` for every frame, as `T x D`.
pub fn reconstruct(activations: &Tensor, latents: &Tensor, flows: &[FlowModel]) -> Result<Tensor> {
    let shape = latents.shape();
    if shape.len() != 3 || shape[1] != flows.len() {
        return Err(DdsError::Shape {
            what: "latent codes",
            expected: flows.len(),
            got: shape.get(1).copied().unwrap_or(0),
        });
    }
    let (t, k, d) = (shape[0], shape[1], shape[2]);
    check_flows(flows, d)?;
    if activations.dims() != (k, t) {
        return Err(DdsError::Shape {
            what: "gains",
            expected: k * t,
            got: activations.len(),
        });
    }
    let mut out = vec![0.0; t * d];
    for (i, flow) in flows.iter().enumerate() {
        let zk: Vec<f64> = (0..t)
            .flat_map(|j| latents.data()[(j * k + i) * d..(j * k + i + 1) * d].iter().copied())
            .collect();
        let w = flow.inverse_batch(&Tensor::matrix(t, d, zk))?;
        for j in 0..t {
            let hk = activations.get(i, j);
            for (o, &v) in out[j * d..(j + 1) * d].iter_mut().zip(w.row(j)) {
                *o += hk * v;
            }
        }
    }
    Ok(Tensor::matrix(t, d, out))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::flow::{log_prior, FlowArch};

    fn flow(dim: usize, seed: u64) -> FlowModel {
        FlowModel::new(
            FlowArch {
                dim,
                n_coupling: 2,
                hidden_width: 8,
                n_hidden: 1,
            },
            "f",
            seed,
        )
        .unwrap()
    }

    /// A flow whose output layers are no longer zero.
    fn perturbed(dim: usize, seed: u64) -> FlowModel {
        let mut f = flow(dim, seed);
        for (i, t) in f.parameters_mut().into_iter().enumerate() {
            let t = Arc::make_mut(t);
            for (j, v) in t.data_mut().iter_mut().enumerate() {
                *v += 0.2 * ((i * 31 + j * 17 + seed as usize) as f64).sin();
            }
        }
        f
    }

    #[test]
    fn worked_example() {
        // fresh flows are permutations, so f^-1(0) = 0; take s = 0 and h = 2
        let f = flow(2, 1);
        let z = Tensor::zeros(vec![1, 2]);
        let loss = dds_loss(&[0.0, 0.0], &z, &[2.0], &[f.clone()], 1e-3).unwrap();
        assert!((loss - 0.000918939).abs() < 1e-9, "{loss}");
        let expected = -(0.001 / 4.0) * 2.0 * log_prior(&[0.0, 0.0]);
        assert!((loss - expected).abs() < 1e-15);
    }

    #[test]
    fn zero_penalty_is_residual_norm() {
        let flows = [flow(3, 1), flow(3, 2)];
        let z = Tensor::matrix(2, 3, vec![0.1, -0.2, 0.3, 0.5, 0.0, -0.4]);
        let h = [0.7, 0.2];
        let s = [0.4, 0.1, 0.9];
        let loss = dds_loss(&s, &z, &h, &flows, 0.0).unwrap();
        let lat = Tensor::from_parts(vec![1, 2, 3], z.data().to_vec()).unwrap();
        let hm = Tensor::matrix(2, 1, h.to_vec());
        let rec = reconstruct(&hm, &lat, &flows).unwrap();
        let r = s.iter().zip(rec.data()).map(|(a, b)| (a - b) * (a - b)).sum::<f64>().sqrt();
        assert_eq!(loss, r);
    }

    #[test]
    fn equal_sources_penalty_is_independent_of_k() {
        let z1 = [0.3, -0.1];
        let s = [0.0, 0.0];
        let mut prev: Option<f64> = None;
        for k in 1..=3 {
            let flows: Vec<FlowModel> = (0..k).map(|_| flow(2, 7)).collect();
            let z = Tensor::from_rows(&vec![z1.to_vec(); k]);
            let h = vec![0.5; k];
            let with = dds_loss(&s, &z, &h, &flows, 1e-3).unwrap();
            let without = dds_loss(&s, &z, &h, &flows, 0.0).unwrap();
            let penalty = with - without;
            assert!((penalty + 1e-3 / 2.0 * log_prior(&z1)).abs() < 1e-15);
            if let Some(p) = prev {
                assert!((penalty - p).abs() < 1e-15);
            }
            prev = Some(penalty);
        }
    }

    #[test]
    fn reconstruct_linear_in_h() {
        let flows = [flow(4, 3)];
        let lat = Tensor::from_parts(vec![2, 1, 4], vec![0.1, 0.2, -0.3, 0.0, 1.0, -1.0, 0.5, 0.2]).unwrap();
        let h1 = Tensor::matrix(1, 2, vec![1.0, 1.0]);
        let h2 = Tensor::matrix(1, 2, vec![2.0, 2.0]);
        let r1 = reconstruct(&h1, &lat, &flows).unwrap();
        let r2 = reconstruct(&h2, &lat, &flows).unwrap();
        assert_eq!(r1.data(), flows[0].inverse_batch(&Tensor::matrix(2, 4, lat.data().to_vec())).unwrap().data());
        for (a, b) in r1.data().iter().zip(r2.data()) {
            assert_eq!(2.0 * a, *b);
        }
        let r0 = reconstruct(&Tensor::zeros(vec![1, 2]), &lat, &flows).unwrap();
        assert!(r0.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn origin_sample_is_recovered() {
        let f = perturbed(4, 9);
        let target = f.inverse(&[0.0; 4]).unwrap();
        assert!(target.iter().any(|v| v.abs() > 0.05));
        let frames = Tensor::matrix(1, 4, target);
        let out = dds_decompose(&frames, &[f], &SolverSchedule::default(), &DdsConfig::default()).unwrap();
        let resid: f64 = frames
            .data()
            .iter()
            .zip(out.reconstruction.data())
            .map(|(a, b)| (a - b).powi(2))
            .sum::<f64>()
            .sqrt();
        assert!(resid < 1e-3, "{resid}");
        let z_norm = out.latents.data().iter().map(|v| v * v).sum::<f64>().sqrt();
        assert!(z_norm < 0.1, "{z_norm}");
        assert!(out.activations.data().iter().all(|&h| h >= 0.0));
    }

    #[test]
    fn zero_frame_drives_gains_down() {
        let flows = [perturbed(3, 1), perturbed(3, 2)];
        let frames = Tensor::matrix(1, 3, vec![0.0; 3]);
        let out = dds_decompose(&frames, &flows, &SolverSchedule::default(), &DdsConfig::default()).unwrap();
        let norm: f64 = out.reconstruction.data().iter().map(|v| v * v).sum::<f64>().sqrt();
        assert!(norm < 1e-2, "{norm}");
    }

    #[test]
    fn config_and_shape_errors() {
        let flows = [flow(3, 1)];
        let frames = Tensor::zeros(vec![1, 4]);
        assert!(matches!(
            dds_decompose(&frames, &flows, &SolverSchedule::default(), &DdsConfig::default()),
            Err(DdsError::DimensionMismatch { .. })
        ));
        assert!(matches!(
            dds_decompose(&frames, &[], &SolverSchedule::default(), &DdsConfig::default()),
            Err(DdsError::NoFlows)
        ));
        let bad = DdsConfig { c: -1.0, h_init: None };
        assert!(dds_decompose(&Tensor::zeros(vec![1, 3]), &flows, &SolverSchedule::default(), &bad).is_err());
    }
}
