//! RealNVP-style density model over spectrogram frames.
//!
//! A [`FlowModel`] maps data `x` to a latent `z` through a stack of affine
//! coupling layers separated by fixed random permutations. The latent prior
//! is a standard isotropic Gaussian, so the exact log-density of a frame is
//! `log N(f(x); 0, I) + log|det df/dx|`.
//!
//! All computations are expressed on an [`autodiff::Record`](crate::autodiff::Record)
//! so the same code path serves plain evaluation, maximum-likelihood training
//! and gradient-based search in latent space.

use std::f64::consts::PI;
use std::fs;
use std::path::Path;
use std::sync::Arc;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use thiserror::Error;

use crate::autodiff::{AdamConfig, AdamState, AutodiffError, Record, Tensor, Var};

/// Bound on the per-coordinate log-scale of a coupling layer.
pub const SCALE_BOUND: f64 = 2.0;

const MAGIC: &[u8; 4] = b"DDSF";
pub const FORMAT_VERSION: u32 = 1;

/// Frames per chunk for batch evaluation outside of training.
const EVAL_CHUNK: usize = 256;

#[derive(Debug, Error)]
pub enum FlowError {
    #[error("expected dimension {expected}, got {got}")]
    DimensionMismatch { expected: usize, got: usize },
    #[error("non-finite values after inverting coupling layer {layer}")]
    Overflow { layer: usize },
    #[error("need at least 10 frames to train, got {0}")]
    TooFewFrames(usize),
    #[error("non-finite loss at epoch {epoch}, batch {batch}")]
    NonFiniteLoss { epoch: usize, batch: usize },
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("not a model file")]
    NotAModel,
    #[error("unsupported model format version {0}")]
    UnsupportedVersion(u32),
    #[error("model file is truncated")]
    Truncated,
    #[error("model file checksum mismatch")]
    ChecksumMismatch,
    #[error("corrupt model file: {0}")]
    Corrupt(String),
    #[error(transparent)]
    Autodiff(#[from] AutodiffError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, FlowError>;

/// Network shape of a flow.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct FlowArch {
    pub dim: usize,
    pub n_coupling: usize,
    pub hidden_width: usize,
    /// Number of hidden (SELU) layers per coupling network; the network has
    /// `n_hidden + 1` dense layers.
    pub n_hidden: usize,
}

impl FlowArch {
    /// 16 coupling layers, each network with 4 dense layers of 256 units.
    pub fn full(dim: usize) -> Self {
        Self {
            dim,
            n_coupling: 16,
            hidden_width: 256,
            n_hidden: 3,
        }
    }

    pub fn n_pass(&self) -> usize {
        self.dim / 2
    }

    pub fn n_transformed(&self) -> usize {
        self.dim - self.n_pass()
    }

    /// Total parameter count, without building the model.
    pub fn n_parameters(&self) -> u64 {
        let (na, nb) = (self.n_pass() as u64, self.n_transformed() as u64);
        let h = self.hidden_width as u64;
        let per_net = if self.n_hidden == 0 {
            na * nb + nb
        } else {
            na * h + h + (self.n_hidden as u64 - 1) * (h * h + h) + h * nb + nb
        };
        2 * per_net * self.n_coupling as u64
    }

    fn validate(&self) -> Result<()> {
        if self.dim == 0 || self.n_coupling == 0 || self.hidden_width == 0 {
            return Err(FlowError::Config(format!("degenerate architecture {self:?}")));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dense {
    pub weight: Arc<Tensor>,
    pub bias: Arc<Tensor>,
}

/// Fully connected network with SELU on every hidden layer and a linear output.
#[derive(Debug, Clone, PartialEq)]
pub struct Mlp {
    pub layers: Vec<Dense>,
}

impl Mlp {
    fn new(input: usize, hidden: usize, n_hidden: usize, output: usize, rng: &mut ChaCha8Rng) -> Self {
        let mut layers = Vec::with_capacity(n_hidden + 1);
        let mut fan_in = input;
        for _ in 0..n_hidden {
            // variance 1/fan_in keeps SELU activations self-normalizing
            let std = 1.0 / (fan_in.max(1) as f64).sqrt();
            let w: Vec<f64> = (0..fan_in * hidden)
                .map(|_| std * rng.sample::<f64, _>(StandardNormal))
                .collect();
            layers.push(Dense {
                weight: Arc::new(Tensor::matrix(fan_in, hidden, w)),
                bias: Arc::new(Tensor::zeros(vec![1, hidden])),
            });
            fan_in = hidden;
        }
        layers.push(Dense {
            weight: Arc::new(Tensor::zeros(vec![fan_in, output])),
            bias: Arc::new(Tensor::zeros(vec![1, output])),
        });
        Self { layers }
    }
}

/// Affine coupling: the first `n_pass` coordinates condition a scale and a
/// shift applied to the remaining ones.
#[derive(Debug, Clone, PartialEq)]
pub struct CouplingLayer {
    pub scale_net: Mlp,
    pub shift_net: Mlp,
}

/// Fixed coordinate permutation, `y[i] = x[perm[i]]`.
#[derive(Debug, Clone, PartialEq)]
pub struct PermutationLayer {
    pub perm: Vec<usize>,
}

impl PermutationLayer {
    pub fn inverse(&self) -> Vec<usize> {
        let mut inv = vec![0; self.perm.len()];
        for (i, &p) in self.perm.iter().enumerate() {
            inv[p] = i;
        }
        inv
    }

    fn is_bijection(perm: &[usize]) -> bool {
        let mut seen = vec![false; perm.len()];
        perm.iter().all(|&p| p < perm.len() && !std::mem::replace(&mut seen[p], true))
    }
}

/// One normalizing flow ("note flow"): couplings interleaved with permutations,
/// `coupling_0, perm_0, coupling_1, ..., perm_{n-2}, coupling_{n-1}`.
#[derive(Debug, Clone, PartialEq)]
pub struct FlowModel {
    pub arch: FlowArch,
    pub label: String,
    pub couplings: Vec<CouplingLayer>,
    pub permutations: Vec<PermutationLayer>,
}

/// Standard Gaussian log-density `-(D/2) ln 2pi - |z|^2 / 2`.
pub fn log_prior(z: &[f64]) -> f64 {
    let d = z.len() as f64;
    -0.5 * d * (2.0 * PI).ln() - 0.5 * z.iter().map(|v| v * v).sum::<f64>()
}

/// Row-wise [`log_prior`] on a record, `[B,D] -> [B,1]`.
pub fn log_prior_graph(rec: &mut Record, z: Var) -> Result<Var> {
    let d = rec.value(z).cols() as f64;
    let sq = rec.mul(z, z)?;
    let ss = rec.sum_rows(sq)?;
    let half = rec.scale(ss, -0.5)?;
    Ok(rec.offset(half, -0.5 * d * (2.0 * PI).ln())?)
}

/// A flow's parameters registered on a record.
pub struct BoundFlow {
    nets: Vec<(Vec<(Var, Var)>, Vec<(Var, Var)>)>,
    pass_idx: Arc<[usize]>,
    trans_idx: Arc<[usize]>,
    perms: Vec<Arc<[usize]>>,
    inv_perms: Vec<Arc<[usize]>>,
    dim: usize,
}

impl BoundFlow {
    /// Every parameter variable, in serialization order.
    pub fn params(&self) -> Vec<Var> {
        let mut out = Vec::new();
        for (s, t) in &self.nets {
            for &(w, b) in s.iter().chain(t) {
                out.push(w);
                out.push(b);
            }
        }
        out
    }

    fn mlp(rec: &mut Record, net: &[(Var, Var)], x: Var) -> Result<Var> {
        let mut h = x;
        for (i, &(w, b)) in net.iter().enumerate() {
            let m = rec.matmul(h, w)?;
            h = rec.add_row(m, b)?;
            if i + 1 < net.len() {
                h = rec.selu(h)?;
            }
        }
        Ok(h)
    }

    fn scale_shift(&self, rec: &mut Record, layer: usize, cond: Var) -> Result<(Var, Var)> {
        let (s_net, t_net) = &self.nets[layer];
        let raw = Self::mlp(rec, s_net, cond)?;
        let th = rec.tanh(raw)?;
        let s = rec.scale(th, SCALE_BOUND)?;
        let t = Self::mlp(rec, t_net, cond)?;
        Ok((s, t))
    }

    fn check_dim(&self, rec: &Record, x: Var) -> Result<()> {
        let got = rec.value(x).cols();
        if got != self.dim {
            return Err(FlowError::DimensionMismatch {
                expected: self.dim,
                got,
            });
        }
        Ok(())
    }

    /// Data to latent. Returns `z [B,D]` and `log|det J| [B,1]`.
    pub fn forward(&self, rec: &mut Record, x: Var) -> Result<(Var, Var)> {
        self.check_dim(rec, x)?;
        let mut h = x;
        let mut log_det: Option<Var> = None;
        for layer in 0..self.nets.len() {
            let xa = rec.gather(h, self.pass_idx.clone())?;
            let xb = rec.gather(h, self.trans_idx.clone())?;
            let (s, t) = self.scale_shift(rec, layer, xa)?;
            let es = rec.exp(s)?;
            let scaled = rec.mul(xb, es)?;
            let yb = rec.add(scaled, t)?;
            h = rec.concat(xa, yb)?;
            let ld = rec.sum_rows(s)?;
            log_det = Some(match log_det {
                Some(acc) => rec.add(acc, ld)?,
                None => ld,
            });
            if layer < self.perms.len() {
                h = rec.gather(h, self.perms[layer].clone())?;
            }
        }
        Ok((h, log_det.expect("at least one coupling layer")))
    }

    /// Latent to data.
    pub fn inverse(&self, rec: &mut Record, z: Var) -> Result<Var> {
        self.check_dim(rec, z)?;
        let mut h = z;
        for layer in (0..self.nets.len()).rev() {
            if layer < self.perms.len() {
                h = rec.gather(h, self.inv_perms[layer].clone())?;
            }
            let ya = rec.gather(h, self.pass_idx.clone())?;
            let yb = rec.gather(h, self.trans_idx.clone())?;
            let (s, t) = self.scale_shift(rec, layer, ya)?;
            let neg = rec.scale(s, -1.0)?;
            let inv_scale = rec.exp(neg)?;
            let centered = rec.sub(yb, t)?;
            let xb = rec.mul(centered, inv_scale)?;
            h = rec.concat(ya, xb)?;
            if !rec.value(h).is_finite() {
                return Err(FlowError::Overflow { layer });
            }
        }
        Ok(h)
    }

    /// Exact log-density of each row, `[B,D] -> [B,1]`.
    pub fn log_likelihood(&self, rec: &mut Record, x: Var) -> Result<Var> {
        let (z, log_det) = self.forward(rec, x)?;
        let lp = log_prior_graph(rec, z)?;
        Ok(rec.add(lp, log_det)?)
    }
}

impl FlowModel {
    /// Fresh model: hidden layers randomly initialized, output layers zero so
    /// the flow starts as a pure permutation. Permutations are drawn from `seed`.
    pub fn new(arch: FlowArch, label: impl Into<String>, seed: u64) -> Result<Self> {
        arch.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (na, nb) = (arch.n_pass(), arch.n_transformed());
        let couplings = (0..arch.n_coupling)
            .map(|_| CouplingLayer {
                scale_net: Mlp::new(na, arch.hidden_width, arch.n_hidden, nb, &mut rng),
                shift_net: Mlp::new(na, arch.hidden_width, arch.n_hidden, nb, &mut rng),
            })
            .collect();
        let permutations = (1..arch.n_coupling)
            .map(|_| {
                let mut perm: Vec<usize> = (0..arch.dim).collect();
                perm.shuffle(&mut rng);
                PermutationLayer { perm }
            })
            .collect();
        Ok(Self {
            arch,
            label: label.into(),
            couplings,
            permutations,
        })
    }

    pub fn dim(&self) -> usize {
        self.arch.dim
    }

    pub fn parameters(&self) -> Vec<&Arc<Tensor>> {
        let mut out = Vec::new();
        for c in &self.couplings {
            for d in c.scale_net.layers.iter().chain(&c.shift_net.layers) {
                out.push(&d.weight);
                out.push(&d.bias);
            }
        }
        out
    }

    pub fn parameters_mut(&mut self) -> Vec<&mut Arc<Tensor>> {
        let mut out = Vec::new();
        for c in &mut self.couplings {
            for d in c.scale_net.layers.iter_mut().chain(c.shift_net.layers.iter_mut()) {
                out.push(&mut d.weight);
                out.push(&mut d.bias);
            }
        }
        out
    }

    pub fn n_parameters(&self) -> usize {
        self.parameters().iter().map(|t| t.len()).sum()
    }

    /// Register the parameters on `rec`, as leaves when `trainable`, else as
    /// constants.
    pub fn bind(&self, rec: &mut Record, trainable: bool) -> BoundFlow {
        let mut reg = |t: &Arc<Tensor>| {
            if trainable {
                rec.leaf_shared(t.clone())
            } else {
                rec.constant_shared(t.clone())
            }
        };
        let mut nets = Vec::with_capacity(self.couplings.len());
        for c in &self.couplings {
            let s = c.scale_net.layers.iter().map(|d| (reg(&d.weight), reg(&d.bias))).collect();
            let t = c.shift_net.layers.iter().map(|d| (reg(&d.weight), reg(&d.bias))).collect();
            nets.push((s, t));
        }
        let na = self.arch.n_pass();
        BoundFlow {
            nets,
            pass_idx: (0..na).collect(),
            trans_idx: (na..self.arch.dim).collect(),
            perms: self.permutations.iter().map(|p| p.perm.clone().into()).collect(),
            inv_perms: self.permutations.iter().map(|p| p.inverse().into()).collect(),
            dim: self.arch.dim,
        }
    }

    fn check_rows(&self, x: &Tensor) -> Result<()> {
        if x.cols() != self.dim() {
            return Err(FlowError::DimensionMismatch {
                expected: self.dim(),
                got: x.cols(),
            });
        }
        Ok(())
    }

    /// Map each row of `x [B,D]` to latent space; also returns per-row log|det J|.
    pub fn forward_batch(&self, x: &Tensor) -> Result<(Tensor, Vec<f64>)> {
        self.check_rows(x)?;
        let mut z = Vec::with_capacity(x.len());
        let mut log_det = Vec::with_capacity(x.rows());
        for chunk in row_chunks(x) {
            let mut rec = Record::new();
            let flow = self.bind(&mut rec, false);
            let xv = rec.constant(chunk);
            let (zv, ld) = flow.forward(&mut rec, xv)?;
            z.extend_from_slice(rec.value(zv).data());
            log_det.extend_from_slice(rec.value(ld).data());
        }
        Ok((Tensor::matrix(x.rows(), self.dim(), z), log_det))
    }

    pub fn forward(&self, x: &[f64]) -> Result<(Vec<f64>, f64)> {
        let (z, ld) = self.forward_batch(&Tensor::row_vector(x.to_vec()))?;
        Ok((z.into_data(), ld[0]))
    }

    /// Map each row of `z [B,D]` back to data space.
    pub fn inverse_batch(&self, z: &Tensor) -> Result<Tensor> {
        self.check_rows(z)?;
        let mut x = Vec::with_capacity(z.len());
        for chunk in row_chunks(z) {
            let mut rec = Record::new();
            let flow = self.bind(&mut rec, false);
            let zv = rec.constant(chunk);
            let xv = flow.inverse(&mut rec, zv)?;
            x.extend_from_slice(rec.value(xv).data());
        }
        Ok(Tensor::matrix(z.rows(), self.dim(), x))
    }

    pub fn inverse(&self, z: &[f64]) -> Result<Vec<f64>> {
        Ok(self.inverse_batch(&Tensor::row_vector(z.to_vec()))?.into_data())
    }

    /// Log-density in nats of every row of `x`.
    pub fn log_likelihood_batch(&self, x: &Tensor) -> Result<Vec<f64>> {
        let (z, log_det) = self.forward_batch(x)?;
        Ok((0..z.rows()).map(|i| log_prior(z.row(i)) + log_det[i]).collect())
    }

    pub fn log_likelihood(&self, x: &[f64]) -> Result<f64> {
        Ok(self.log_likelihood_batch(&Tensor::row_vector(x.to_vec()))?[0])
    }

    /// `n` draws `f^-1(z)`, `z ~ N(0, I)`.
    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R, n: usize) -> Result<Tensor> {
        let z: Vec<f64> = (0..n * self.dim()).map(|_| rng.sample(StandardNormal)).collect();
        self.inverse_batch(&Tensor::matrix(n, self.dim(), z))
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut buf = Vec::new();
        buf.extend_from_slice(MAGIC);
        for v in [
            FORMAT_VERSION,
            self.arch.dim as u32,
            self.arch.n_coupling as u32,
            self.arch.hidden_width as u32,
            self.arch.n_hidden as u32,
            self.label.len() as u32,
        ] {
            buf.extend_from_slice(&v.to_le_bytes());
        }
        buf.extend_from_slice(self.label.as_bytes());
        for p in &self.permutations {
            for &i in &p.perm {
                buf.extend_from_slice(&(i as u32).to_le_bytes());
            }
        }
        for t in self.parameters() {
            for v in t.data() {
                buf.extend_from_slice(&v.to_le_bytes());
            }
        }
        let sum = fnv1a(&buf);
        buf.extend_from_slice(&sum.to_le_bytes());
        buf
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < 4 || &bytes[..4] != MAGIC {
            return Err(FlowError::NotAModel);
        }
        let mut r = Reader { bytes, pos: 4 };
        let version = r.u32()?;
        if version != FORMAT_VERSION {
            return Err(FlowError::UnsupportedVersion(version));
        }
        let arch = FlowArch {
            dim: r.u32()? as usize,
            n_coupling: r.u32()? as usize,
            hidden_width: r.u32()? as usize,
            n_hidden: r.u32()? as usize,
        };
        arch.validate().map_err(|e| FlowError::Corrupt(e.to_string()))?;
        let label_len = r.u32()? as usize;

        let expected = 28
            + label_len as u64
            + 4 * arch.dim as u64 * (arch.n_coupling as u64 - 1)
            + 8 * arch.n_parameters()
            + 8;
        if (bytes.len() as u64) < expected {
            return Err(FlowError::Truncated);
        }
        if bytes.len() as u64 > expected {
            return Err(FlowError::Corrupt("trailing bytes".into()));
        }
        let expected = expected as usize;
        let body = &bytes[..expected - 8];
        let stored = u64::from_le_bytes(bytes[expected - 8..].try_into().unwrap());
        if fnv1a(body) != stored {
            return Err(FlowError::ChecksumMismatch);
        }

        // template with the right layout; every value is overwritten below
        let mut model = FlowModel::new(arch, String::new(), 0)?;
        model.label = String::from_utf8(r.take(label_len)?.to_vec())
            .map_err(|_| FlowError::Corrupt("label is not UTF-8".into()))?;
        for p in &mut model.permutations {
            for slot in p.perm.iter_mut() {
                *slot = r.u32()? as usize;
            }
            if !PermutationLayer::is_bijection(&p.perm) {
                return Err(FlowError::Corrupt("permutation is not a bijection".into()));
            }
        }
        for t in model.parameters_mut() {
            let t = Arc::make_mut(t);
            for v in t.data_mut() {
                *v = f64::from_le_bytes(r.take(8)?.try_into().unwrap());
            }
        }
        Ok(model)
    }
}

fn row_chunks(x: &Tensor) -> impl Iterator<Item = Tensor> + '_ {
    let c = x.cols();
    (0..x.rows()).step_by(EVAL_CHUNK).map(move |start| {
        let end = (start + EVAL_CHUNK).min(x.rows());
        Tensor::matrix(end - start, c, x.data()[start * c..end * c].to_vec())
    })
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).ok_or(FlowError::Truncated)?;
        let s = self.bytes.get(self.pos..end).ok_or(FlowError::Truncated)?;
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }
}

/// 64-bit FNV-1a.
fn fnv1a(bytes: &[u8]) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for &b in bytes {
        h ^= b as u64;
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    h
}

pub fn save_model(model: &FlowModel, path: impl AsRef<Path>) -> Result<()> {
    fs::write(path, model.to_bytes())?;
    Ok(())
}

pub fn load_model(path: impl AsRef<Path>) -> Result<FlowModel> {
    FlowModel::from_bytes(&fs::read(path)?)
}

/// Maximum-likelihood training settings.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub lr: f64,
    pub max_epochs: usize,
    pub batch_size: usize,
    pub patience: usize,
    pub val_fraction: f64,
    pub seed: u64,
    pub dequant_noise_sigma: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            lr: 1e-3,
            max_epochs: 1000,
            batch_size: 512,
            patience: 50,
            val_fraction: 0.2,
            seed: 0,
            dequant_noise_sigma: 1e-3,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.val_fraction > 0.0 && self.val_fraction < 1.0) {
            return Err(FlowError::Config("val_fraction must be in (0, 1)".into()));
        }
        if self.patience > self.max_epochs {
            return Err(FlowError::Config("patience exceeds max_epochs".into()));
        }
        if self.batch_size == 0 || !(self.lr > 0.0) || self.dequant_noise_sigma < 0.0 {
            return Err(FlowError::Config(format!("invalid training settings {self:?}")));
        }
        Ok(())
    }
}

/// One row of the training history.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EpochStats {
    pub epoch: usize,
    /// Mean negative log-likelihood over the (noisy) training batches.
    pub train_nll: f64,
    /// Mean log-likelihood on the held-out validation frames.
    pub val_ll: f64,
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    /// Snapshot with the best validation log-likelihood.
    pub model: FlowModel,
    pub history: Vec<EpochStats>,
    pub best_epoch: usize,
    pub best_val_ll: f64,
    pub stopped_early: bool,
}

/// Fit a flow to `frames [N,D]` by minimizing the mean negative
/// log-likelihood with Adam, with validation-based early stopping.
pub fn train_flow(
    frames: &Tensor,
    arch: FlowArch,
    label: &str,
    config: &TrainConfig,
) -> Result<TrainOutcome> {
    config.validate()?;
    let n = frames.rows();
    if n < 10 {
        return Err(FlowError::TooFewFrames(n));
    }
    if frames.cols() != arch.dim {
        return Err(FlowError::DimensionMismatch {
            expected: arch.dim,
            got: frames.cols(),
        });
    }
    let d = arch.dim;
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut model = FlowModel::new(arch, label, rng.random())?;

    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut rng);
    let n_val = ((n as f64 * config.val_fraction).round() as usize).clamp(1, n - 1);
    let val_rows: Vec<&[f64]> = order[..n_val].iter().map(|&i| frames.row(i)).collect();
    let val = Tensor::from_rows(&val_rows);
    let mut train_idx: Vec<usize> = order[n_val..].to_vec();

    let adam = AdamConfig::default();
    let mut states: Vec<AdamState> = model.parameters().iter().map(|t| AdamState::new(t.len())).collect();
    let noise = rand_distr::Normal::new(0.0, config.dequant_noise_sigma)
        .map_err(|e| FlowError::Config(e.to_string()))?;

    let mut history = Vec::new();
    let mut best_val = f64::NEG_INFINITY;
    let mut best_model = model.clone();
    let mut best_epoch = 0;
    let mut since_best = 0;
    let mut stopped_early = false;

    for epoch in 1..=config.max_epochs {
        train_idx.shuffle(&mut rng);
        let mut total_nll = 0.0;
        for (batch_no, batch) in train_idx.chunks(config.batch_size).enumerate() {
            let mut data = Vec::with_capacity(batch.len() * d);
            for &i in batch {
                data.extend(frames.row(i).iter().map(|&v| v + noise.sample(&mut rng)));
            }
            let b = batch.len();
            let mut rec = Record::new();
            let flow = model.bind(&mut rec, true);
            let x = rec.constant(Tensor::matrix(b, d, data));
            let ll = flow.log_likelihood(&mut rec, x)?;
            let total = rec.sum(ll)?;
            let loss = rec.scale(total, -1.0 / b as f64)?;
            let loss_value = rec.value(loss).item();
            if !loss_value.is_finite() {
                return Err(FlowError::NonFiniteLoss {
                    epoch,
                    batch: batch_no,
                });
            }
            let grads = rec.backward(loss).map_err(|_| FlowError::NonFiniteLoss {
                epoch,
                batch: batch_no,
            })?;
            let params = flow.params();
            drop(rec);
            for ((p, v), st) in model.parameters_mut().into_iter().zip(params).zip(&mut states) {
                let Some(g) = grads.get(v) else { continue };
                crate::autodiff::adam_step(Arc::make_mut(p).data_mut(), g.data(), st, config.lr, &adam)?;
            }
            total_nll += loss_value * b as f64;
        }
        let train_nll = total_nll / train_idx.len() as f64;
        let val_ll = mean(&model.log_likelihood_batch(&val)?);
        if !val_ll.is_finite() {
            return Err(FlowError::NonFiniteLoss { epoch, batch: 0 });
        }
        history.push(EpochStats {
            epoch,
            train_nll,
            val_ll,
        });
        log::debug!("{label}: epoch {epoch} train_nll {train_nll:.4} val_ll {val_ll:.4}");
        if val_ll > best_val {
            best_val = val_ll;
            best_model = model.clone();
            best_epoch = epoch;
            since_best = 0;
        } else {
            since_best += 1;
            if since_best >= config.patience {
                stopped_early = true;
                break;
            }
        }
    }
    Ok(TrainOutcome {
        model: best_model,
        history,
        best_epoch,
        best_val_ll: best_val,
        stopped_early,
    })
}

fn mean(v: &[f64]) -> f64 {
    v.iter().sum::<f64>() / v.len() as f64
}
