//! Per-frame projected Adam with the stopping and step-size schedule shared
//! by the NMF baseline and dictionary search.
//!
//! Frames are independent problems. The driver batches the frames that are
//! still running into one evaluation per step, but each frame keeps its own
//! Adam moments, learning rate and stopping state, so a frame's trajectory
//! does not depend on which other frames share its batch.

use log::{debug, trace};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::autodiff::{adam_step, AdamConfig, AdamState, AutodiffError};

#[derive(Debug, Error)]
pub enum SolverError {
    #[error("invalid schedule: {0}")]
    Schedule(String),
    #[error(transparent)]
    Autodiff(#[from] AutodiffError),
    #[error("{0}")]
    Problem(String),
}

pub type Result<T> = std::result::Result<T, SolverError>;

/// Frames evaluated together in one tape.
const CHUNK: usize = 64;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SolverSchedule {
    pub max_steps: usize,
    /// Stop once consecutive losses differ by less than this. Also the
    /// margin a loss must beat the best so far by to count as progress.
    pub eps: f64,
    /// A new best counts as progress only if it also improves on the
    /// previous progress mark by this fraction of it. Keeps a slowly
    /// creeping limit cycle from resetting the halving counter forever.
    pub progress_rtol: f64,
    pub lr: f64,
    /// Non-improving steps tolerated before the learning rate is divided.
    /// The division only happens if the loss rose at least once within
    /// that window; a loss that is still falling towards its best is left
    /// alone.
    pub lr_halve_patience: usize,
    pub lr_halve_factor: f64,
    /// Keep every frame's loss sequence in its trace.
    pub record_losses: bool,
}

impl Default for SolverSchedule {
    fn default() -> Self {
        Self {
            max_steps: 10_000,
            eps: 1e-15,
            progress_rtol: 1e-5,
            lr: 1e-3,
            lr_halve_patience: 10,
            lr_halve_factor: 2.0,
            record_losses: false,
        }
    }
}

impl SolverSchedule {
    pub fn validate(&self) -> Result<()> {
        let ok = self.max_steps > 0
            && self.eps > 0.0
            && (0.0..1.0).contains(&self.progress_rtol)
            && self.lr > 0.0
            && self.lr.is_finite()
            && self.lr_halve_patience > 0
            && self.lr_halve_factor > 1.0;
        if ok {
            Ok(())
        } else {
            Err(SolverError::Schedule(format!("{self:?}")))
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum StopReason {
    /// Consecutive losses within `eps`.
    Converged,
    MaxSteps,
    /// Non-finite loss after the one allowed restart.
    Failed,
}

impl StopReason {
    pub fn as_str(self) -> &'static str {
        match self {
            StopReason::Converged => "converged",
            StopReason::MaxSteps => "max_steps",
            StopReason::Failed => "failed",
        }
    }
}

/// What happened while solving one frame.
#[derive(Debug, Clone, PartialEq)]
pub struct SolverTrace {
    /// Updates applied in the final attempt.
    pub steps: usize,
    pub stop: StopReason,
    /// Step indices at which the learning rate was divided.
    pub lr_halvings: Vec<usize>,
    pub final_lr: f64,
    pub restarted: bool,
    pub best_loss: f64,
    pub losses: Vec<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Observation {
    /// Strictly below every earlier loss of this attempt.
    pub new_best: bool,
    pub stop: Option<StopReason>,
}

/// Stopping and step-size bookkeeping for one frame.
#[derive(Debug, Clone)]
pub struct ScheduleTracker {
    pub lr: f64,
    pub step: usize,
    prev: Option<f64>,
    best: f64,
    progress_mark: f64,
    stall: usize,
    last_rise: Option<usize>,
    pub lr_halvings: Vec<usize>,
    pub losses: Option<Vec<f64>>,
}

impl ScheduleTracker {
    pub fn new(schedule: &SolverSchedule, lr: f64) -> Self {
        Self {
            lr,
            step: 0,
            prev: None,
            best: f64::INFINITY,
            progress_mark: f64::INFINITY,
            stall: 0,
            last_rise: None,
            lr_halvings: Vec::new(),
            losses: schedule.record_losses.then(Vec::new),
        }
    }

    pub fn best(&self) -> f64 {
        self.best
    }

    /// Record the loss of the current iterate, which has had `self.step`
    /// updates applied.
    pub fn observe(&mut self, loss: f64, schedule: &SolverSchedule) -> Observation {
        if let Some(l) = self.losses.as_mut() {
            l.push(loss);
        }
        let new_best = loss < self.best;
        if new_best {
            self.best = loss;
        }
        if matches!(self.prev, Some(p) if loss > p) {
            self.last_rise = Some(self.step);
        }
        let margin = schedule.eps.max(schedule.progress_rtol * self.progress_mark.abs());
        if !self.progress_mark.is_finite() || loss < self.progress_mark - margin {
            self.progress_mark = loss;
            self.stall = 0;
        } else {
            self.stall += 1;
            let fluctuating = self
                .last_rise
                .is_some_and(|r| self.step - r < schedule.lr_halve_patience);
            if self.stall >= schedule.lr_halve_patience && fluctuating {
                self.lr /= schedule.lr_halve_factor;
                self.stall = 0;
                self.lr_halvings.push(self.step);
                trace!("step {}: no progress, lr -> {:e}", self.step, self.lr);
            }
        }
        let stop = match self.prev {
            Some(p) if (loss - p).abs() < schedule.eps => Some(StopReason::Converged),
            _ if self.step >= schedule.max_steps => Some(StopReason::MaxSteps),
            _ => None,
        };
        self.prev = Some(loss);
        Observation { new_best, stop }
    }
}

/// A set of independent per-frame minimization problems.
pub trait FrameProblem: Sync {
    fn n_frames(&self) -> usize;
    fn n_params(&self) -> usize;
    /// Starting point of `frame`.
    fn init(&self, frame: usize, params: &mut [f64]);
    /// Loss and gradient for each listed frame. `params` and `grads` are
    /// row-major `frames.len() x n_params`. A frame whose loss or gradient
    /// is not finite reports a non-finite loss; its gradient row is ignored.
    fn evaluate(&self, frames: &[usize], params: &[f64], grads: &mut [f64]) -> Result<Vec<f64>>;
    /// Map parameters back onto the feasible set after an update.
    fn project(&self, params: &mut [f64]);
}

#[derive(Debug, Clone, PartialEq)]
pub struct FrameSolution {
    /// Best iterate seen.
    pub params: Vec<f64>,
    pub loss: f64,
    pub trace: SolverTrace,
}

struct FrameState {
    params: Vec<f64>,
    best: Vec<f64>,
    adam: AdamState,
    tracker: ScheduleTracker,
    restarted: bool,
    done: Option<StopReason>,
}

impl FrameState {
    fn start<P: FrameProblem + ?Sized>(problem: &P, frame: usize, schedule: &SolverSchedule, lr: f64) -> Self {
        let mut params = vec![0.0; problem.n_params()];
        problem.init(frame, &mut params);
        Self {
            best: params.clone(),
            adam: AdamState::new(params.len()),
            params,
            tracker: ScheduleTracker::new(schedule, lr),
            restarted: false,
            done: None,
        }
    }
}

/// Solve every frame of `problem` to its own stopping point.
pub fn solve_frames<P: FrameProblem + ?Sized>(problem: &P, schedule: &SolverSchedule) -> Result<Vec<FrameSolution>> {
    schedule.validate()?;
    let p = problem.n_params();
    let cfg = AdamConfig::default();
    let mut states: Vec<FrameState> = (0..problem.n_frames())
        .map(|f| FrameState::start(problem, f, schedule, schedule.lr))
        .collect();

    loop {
        let active: Vec<usize> = (0..states.len()).filter(|&f| states[f].done.is_none()).collect();
        if active.is_empty() {
            break;
        }
        let mut params = Vec::with_capacity(active.len() * p);
        for &f in &active {
            params.extend_from_slice(&states[f].params);
        }
        let mut grads = vec![0.0; params.len()];
        let chunk_params = params.par_chunks(CHUNK * p.max(1));
        let losses: Vec<Vec<f64>> = active
            .par_chunks(CHUNK)
            .zip(chunk_params)
            .zip(grads.par_chunks_mut(CHUNK * p.max(1)))
            .map(|((frames, x), g)| problem.evaluate(frames, x, g))
            .collect::<Result<_>>()?;

        for ((&f, loss), g) in active.iter().zip(losses.into_iter().flatten()).zip(grads.chunks(p.max(1))) {
            let st = &mut states[f];
            let finite = loss.is_finite() && g.iter().all(|v| v.is_finite());
            if !finite {
                if st.restarted {
                    debug!("frame {f}: non-finite loss after restart, giving up");
                    st.done = Some(StopReason::Failed);
                } else {
                    debug!("frame {f}: non-finite loss at step {}, restarting", st.tracker.step);
                    *st = FrameState::start(problem, f, schedule, schedule.lr / 10.0);
                    st.restarted = true;
                }
                continue;
            }
            let obs = st.tracker.observe(loss, schedule);
            if obs.new_best {
                st.best.copy_from_slice(&st.params);
            }
            if let Some(reason) = obs.stop {
                st.done = Some(reason);
                continue;
            }
            let lr = st.tracker.lr;
            adam_step(&mut st.params, g, &mut st.adam, lr, &cfg)?;
            problem.project(&mut st.params);
            st.tracker.step += 1;
        }
    }

    Ok(states
        .into_iter()
        .enumerate()
        .map(|(f, st)| {
            let stop = st.done.expect("loop exits once every frame is done");
            let trace = SolverTrace {
                steps: st.tracker.step,
                stop,
                lr_halvings: st.tracker.lr_halvings,
                final_lr: st.tracker.lr,
                restarted: st.restarted,
                best_loss: st.tracker.best,
                losses: st.tracker.losses.unwrap_or_default(),
            };
            debug!(
                "frame {f}: {} after {} steps, {} lr halvings, loss {:e}",
                stop.as_str(),
                trace.steps,
                trace.lr_halvings.len(),
                trace.best_loss
            );
            FrameSolution {
                params: st.best,
                loss: st.tracker.best,
                trace,
            }
        })
        .collect())
}
