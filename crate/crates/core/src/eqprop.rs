//! Centered-difference Equilibrium Propagation for layered diffusive FHN
//! networks.
//!
//! Adjacent layers `i`, `i+1` are joined by a dense coupling matrix `G^i`
//! (`n_i × n_{i+1}`); entry `g_jk` is a conductance between node `j` of
//! layer `i` and node `k` of layer `i+1`, so the activator Laplacian is the
//! edge-stamped sum of all couplings. Input activators are clamped to the
//! data; inhibitors are uncoupled and evolve freely everywhere. The output
//! nudge is the current `±β (y - u_out)` for the loss `½‖y - u_out‖²`.

use std::path::Path;

use rand::{seq::SliceRandom, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::dataio::{read_blob, write_atomic, write_blob, BlobRef, Dataset};
use crate::error::{Error, Result};
use crate::fhn::{FhnParams, NetworkState};
use crate::graph::stamp_edge;
use crate::numerics::{dot, DenseMatrix};

/// How long a phase runs.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Schedule {
    Fixed(usize),
    /// Until `‖Δu‖∞ + ‖Δv‖∞ <= tol * dt`, at most `max_steps`.
    Converge {
        tol: f64,
        max_steps: usize,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub layer_sizes: Vec<usize>,
    pub beta_nudge: f64,
    /// One rate per coupling block; missing trailing rates repeat the last.
    pub layer_lrs: Vec<f64>,
    pub free_iters: usize,
    pub nudge_iters: usize,
    pub dt: f64,
    pub init_scale: f64,
    pub batch_size: usize,
    pub epochs: usize,
    /// Learning rates are multiplied by `lr_decay^epoch`.
    pub lr_decay: f64,
    pub optimizer: Optimizer,
    /// Heavy-ball momentum for `sgd`; 0 is plain SGD.
    pub momentum: f64,
}

/// Update rule applied to the EqProp gradient estimate.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Optimizer {
    #[default]
    Sgd,
    /// Adam with `β1 = 0.9`, `β2 = 0.999`, `ε = 1e-8`; the layer rates are
    /// the step sizes.
    Adam,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            layer_sizes: vec![784, 512, 512, 512, 512, 512, 10],
            beta_nudge: 0.9,
            layer_lrs: vec![1e-2, 1e-3, 2e-4, 1e-4, 5e-5],
            free_iters: 55,
            nudge_iters: 14,
            dt: 0.1,
            init_scale: 0.014,
            batch_size: 20,
            epochs: 5,
            lr_decay: 1.0,
            optimizer: Optimizer::Sgd,
            momentum: 0.0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let err = |path: &str, message: String| Error::Config {
            path: format!("train.{path}"),
            message,
        };
        if self.layer_sizes.len() < 2 || self.layer_sizes.contains(&0) {
            return Err(err(
                "layer_sizes",
                "need at least two non-empty layers".into(),
            ));
        }
        if self.beta_nudge == 0.0 || !self.beta_nudge.is_finite() {
            return Err(err(
                "beta_nudge",
                format!("must be finite and nonzero, got {}", self.beta_nudge),
            ));
        }
        let blocks = self.layer_sizes.len() - 1;
        if self.layer_lrs.is_empty() || self.layer_lrs.len() > blocks {
            return Err(err(
                "layer_lrs",
                format!("need 1..={blocks} rates, got {}", self.layer_lrs.len()),
            ));
        }
        if let Some(lr) = self
            .layer_lrs
            .iter()
            .find(|&&lr| !(lr >= 0.0 && lr.is_finite()))
        {
            return Err(err(
                "layer_lrs",
                format!("rates must be non-negative, got {lr}"),
            ));
        }
        if !(self.dt > 0.0 && self.dt.is_finite()) {
            return Err(err("dt", format!("must be positive, got {}", self.dt)));
        }
        if !(self.init_scale >= 0.0 && self.init_scale.is_finite()) {
            return Err(err(
                "init_scale",
                format!("must be non-negative, got {}", self.init_scale),
            ));
        }
        if self.batch_size == 0 {
            return Err(err("batch_size", "must be positive".into()));
        }
        if !(self.lr_decay > 0.0 && self.lr_decay.is_finite()) {
            return Err(err(
                "lr_decay",
                format!("must be positive, got {}", self.lr_decay),
            ));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(err(
                "momentum",
                format!("must lie in [0, 1), got {}", self.momentum),
            ));
        }
        Ok(())
    }

    /// Learning rate of coupling block `block` in epoch `epoch`.
    pub fn lr(&self, block: usize, epoch: usize) -> f64 {
        let base = self.layer_lrs[block.min(self.layer_lrs.len() - 1)];
        base * self.lr_decay.powi(epoch as i32)
    }
}

/// Layered FHN network with trainable couplings.
#[derive(Debug, Clone, PartialEq)]
pub struct DeepFhnNet {
    layer_sizes: Vec<usize>,
    couplings: Vec<DenseMatrix>,
    params: FhnParams,
    offsets: Vec<usize>,
}

/// Final state of a phase.
#[derive(Debug, Clone, PartialEq)]
pub struct Phase {
    pub state: NetworkState,
    pub steps: usize,
    pub converged: bool,
}

struct Sums {
    col: Vec<Vec<f64>>,
    row: Vec<Vec<f64>>,
}

impl DeepFhnNet {
    /// Network with all couplings zero.
    pub fn new(layer_sizes: &[usize], params: FhnParams) -> Result<Self> {
        let couplings = layer_sizes
            .windows(2)
            .map(|w| DenseMatrix::zeros(w[0], w[1]))
            .collect();
        Self::with_couplings(layer_sizes, couplings, params)
    }

    pub fn with_couplings(
        layer_sizes: &[usize],
        couplings: Vec<DenseMatrix>,
        params: FhnParams,
    ) -> Result<Self> {
        params.validate()?;
        if layer_sizes.len() < 2 || layer_sizes.contains(&0) {
            return Err(Error::InvalidArgument(
                "need at least two non-empty layers".into(),
            ));
        }
        if couplings.len() != layer_sizes.len() - 1 {
            return Err(Error::dims(
                "coupling blocks",
                layer_sizes.len() - 1,
                couplings.len(),
            ));
        }
        for (i, g) in couplings.iter().enumerate() {
            if g.shape() != (layer_sizes[i], layer_sizes[i + 1]) {
                return Err(Error::InvalidArgument(format!(
                    "coupling {i} has shape {:?}, expected {:?}",
                    g.shape(),
                    (layer_sizes[i], layer_sizes[i + 1])
                )));
            }
            if !g.all_finite() {
                return Err(Error::NonFinite {
                    context: format!("coupling {i}"),
                });
            }
        }
        let mut offsets = vec![0];
        for &n in layer_sizes {
            offsets.push(offsets.last().unwrap() + n);
        }
        Ok(Self {
            layer_sizes: layer_sizes.to_vec(),
            couplings,
            params,
            offsets,
        })
    }

    pub fn layer_sizes(&self) -> &[usize] {
        &self.layer_sizes
    }

    pub fn couplings(&self) -> &[DenseMatrix] {
        &self.couplings
    }

    pub fn params(&self) -> &FhnParams {
        &self.params
    }

    pub fn node_count(&self) -> usize {
        *self.offsets.last().unwrap()
    }

    pub fn parameter_count(&self) -> usize {
        self.couplings.iter().map(|g| g.rows() * g.cols()).sum()
    }

    pub fn input_dim(&self) -> usize {
        self.layer_sizes[0]
    }

    pub fn output_dim(&self) -> usize {
        *self.layer_sizes.last().unwrap()
    }

    /// Node index range of layer `l` in the flat state.
    pub fn layer_range(&self, l: usize) -> std::ops::Range<usize> {
        self.offsets[l]..self.offsets[l + 1]
    }

    pub fn output<'a>(&self, s: &'a NetworkState) -> &'a [f64] {
        &s.u[self.layer_range(self.layer_sizes.len() - 1)]
    }

    /// Activator Laplacian with every coupling stamped as an edge.
    pub fn coupling_laplacian(&self) -> DenseMatrix {
        let mut l = DenseMatrix::zeros(self.node_count(), self.node_count());
        for (i, g) in self.couplings.iter().enumerate() {
            for j in 0..g.rows() {
                for k in 0..g.cols() {
                    stamp_edge(
                        &mut l,
                        self.offsets[i] + j,
                        self.offsets[i + 1] + k,
                        g[(j, k)],
                    );
                }
            }
        }
        l
    }

    fn sums(&self) -> Sums {
        Sums {
            col: self.couplings.iter().map(|g| g.column_sums()).collect(),
            row: self.couplings.iter().map(|g| g.row_sums()).collect(),
        }
    }

    fn check_sample(&self, x: &[f64], y: Option<&[f64]>) -> Result<()> {
        if x.len() != self.input_dim() {
            return Err(Error::dims("input vector", self.input_dim(), x.len()));
        }
        if let Some(y) = y {
            if y.len() != self.output_dim() {
                return Err(Error::dims("target vector", self.output_dim(), y.len()));
            }
        }
        Ok(())
    }

    /// One explicit Euler step with the input layer clamped; returns
    /// `‖Δu‖∞ + ‖Δv‖∞`. `drive` is the constant input drive `G⁰ᵀx`.
    fn euler(
        &self,
        s: &mut NetworkState,
        drive: &[f64],
        sums: &Sums,
        nudge: Option<(&[f64], f64)>,
        dt: f64,
        du: &mut [f64],
    ) -> f64 {
        let p = &self.params;
        let d1 = p.activator_diffusion();
        let ku = dt / p.activator_time_constant();
        let kv = dt / p.inhibitor_time_constant();
        let last = self.layer_sizes.len() - 1;
        for l in 1..=last {
            let r = self.layer_range(l);
            let acc = &mut du[r.clone()];
            if l == 1 {
                acc.copy_from_slice(drive);
            } else {
                acc.fill(0.0);
                let below = &s.u[self.layer_range(l - 1)];
                let g = &self.couplings[l - 1];
                for (j, &a) in below.iter().enumerate() {
                    if a != 0.0 {
                        for (o, &w) in acc.iter_mut().zip(g.row(j)) {
                            *o += a * w;
                        }
                    }
                }
            }
            let u = &s.u[r.clone()];
            for (k, o) in acc.iter_mut().enumerate() {
                *o -= sums.col[l - 1][k] * u[k];
            }
            if l < last {
                let above = &s.u[self.layer_range(l + 1)];
                let g = &self.couplings[l];
                for (j, o) in acc.iter_mut().enumerate() {
                    *o += dot(g.row(j), above) - sums.row[l][j] * u[j];
                }
            }
            let v = &s.v[r.clone()];
            for k in 0..acc.len() {
                acc[k] = d1 * acc[k] + p.activator_reaction(u[k], v[k]);
            }
            if l == last {
                if let Some((y, c)) = nudge {
                    for k in 0..acc.len() {
                        acc[k] += c * (y[k] - u[k]);
                    }
                }
            }
        }
        let (mut mu, mut mv) = (0.0_f64, 0.0_f64);
        let first = self.layer_range(0).end;
        for i in 0..s.u.len() {
            let b = kv * p.inhibitor_reaction(s.u[i], s.v[i]);
            s.v[i] += b;
            mv = mv.max(b.abs());
            if i >= first {
                let a = ku * du[i];
                s.u[i] += a;
                mu = mu.max(a.abs());
            }
        }
        mu + mv
    }

    fn run(
        &self,
        mut s: NetworkState,
        x: &[f64],
        sums: &Sums,
        nudge: Option<(&[f64], f64)>,
        schedule: Schedule,
        dt: f64,
    ) -> Result<Phase> {
        let drive = self.couplings[0].transpose_matvec(x)?;
        let mut du = vec![0.0; self.node_count()];
        let (limit, tol) = match schedule {
            Schedule::Fixed(n) => (n, None),
            Schedule::Converge { tol, max_steps } => (max_steps, Some(tol)),
        };
        for step in 0..limit {
            let disp = self.euler(&mut s, &drive, sums, nudge, dt, &mut du);
            if !disp.is_finite() || !s.is_finite() {
                return Err(Error::Divergence {
                    context: "layered FHN phase".into(),
                    step,
                });
            }
            if let Some(tol) = tol {
                if disp <= tol * dt {
                    return Ok(Phase {
                        state: s,
                        steps: step + 1,
                        converged: true,
                    });
                }
            }
        }
        Ok(Phase {
            state: s,
            steps: limit,
            converged: tol.is_none(),
        })
    }

    fn initial_state(&self, x: &[f64]) -> NetworkState {
        let mut s = NetworkState::zeros(self.node_count());
        s.u[self.layer_range(0)].copy_from_slice(x);
        s
    }

    /// Relaxes from rest with the input activators clamped to `x`.
    pub fn free_phase(&self, x: &[f64], schedule: Schedule, dt: f64) -> Result<Phase> {
        self.check_sample(x, None)?;
        self.run(self.initial_state(x), x, &self.sums(), None, schedule, dt)
    }

    /// Continues from `free` with the output current `sign·β·(y - u_out)`.
    pub fn nudged_phase(
        &self,
        free: &NetworkState,
        x: &[f64],
        y: &[f64],
        beta: f64,
        schedule: Schedule,
        dt: f64,
    ) -> Result<Phase> {
        self.check_sample(x, Some(y))?;
        if free.len() != self.node_count() {
            return Err(Error::dims("free state", self.node_count(), free.len()));
        }
        self.run(free.clone(), x, &self.sums(), Some((y, beta)), schedule, dt)
    }

    /// Squared-error loss `½‖y - u_out‖²` of a state.
    pub fn loss(&self, s: &NetworkState, y: &[f64]) -> f64 {
        0.5 * self
            .output(s)
            .iter()
            .zip(y)
            .map(|(o, t)| (t - o) * (t - o))
            .sum::<f64>()
    }

    pub fn predict(&self, s: &NetworkState) -> usize {
        argmax(self.output(s))
    }
}

fn argmax(v: &[f64]) -> usize {
    let mut best = 0;
    for (i, &x) in v.iter().enumerate() {
        if x > v[best] {
            best = i;
        }
    }
    best
}

/// Couplings drawn from `init_scale × N(0, 1)` with a ChaCha8 stream.
pub fn init_weights(net: &DeepFhnNet, init_scale: f64, seed: u64) -> DeepFhnNet {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let couplings = net
        .couplings
        .iter()
        .map(|g| {
            DenseMatrix::from_fn(g.rows(), g.cols(), |_, _| {
                let z: f64 = StandardNormal.sample(&mut rng);
                init_scale * z
            })
        })
        .collect();
    DeepFhnNet {
        couplings,
        ..net.clone()
    }
}

/// Estimate of `∂L/∂G` from nudged pairs `(s⁺, s⁻)` at `±β`, averaged over
/// the pairs. For a coupling between activators `a` and `b`
/// `∂L/∂g ≈ d₁/(2β) · ½[(a⁺ - b⁺)² - (a⁻ - b⁻)²]`.
pub fn eqprop_gradient(
    net: &DeepFhnNet,
    pairs: &[(&NetworkState, &NetworkState)],
    beta: f64,
) -> Vec<DenseMatrix> {
    let scale = net.params.activator_diffusion() / (4.0 * beta * pairs.len().max(1) as f64);
    (0..net.couplings.len())
        .map(|i| {
            let (ra, rb) = (net.layer_range(i), net.layer_range(i + 1));
            let (n, m) = (ra.len(), rb.len());
            let mut sq_a = vec![0.0; n];
            let mut sq_b = vec![0.0; m];
            for (sp, sm) in pairs {
                for (j, o) in sq_a.iter_mut().enumerate() {
                    let (p, q) = (sp.u[ra.start + j], sm.u[ra.start + j]);
                    *o += p * p - q * q;
                }
                for (k, o) in sq_b.iter_mut().enumerate() {
                    let (p, q) = (sp.u[rb.start + k], sm.u[rb.start + k]);
                    *o += p * p - q * q;
                }
            }
            let mut data = vec![0.0; n * m];
            data.par_chunks_mut(m).enumerate().for_each(|(j, row)| {
                let mut cross = vec![0.0; m];
                for (sp, sm) in pairs {
                    let (ap, am) = (sp.u[ra.start + j], sm.u[ra.start + j]);
                    let (bp, bm) = (&sp.u[rb.clone()], &sm.u[rb.clone()]);
                    for k in 0..m {
                        cross[k] += ap * bp[k] - am * bm[k];
                    }
                }
                for k in 0..m {
                    row[k] = scale * (sq_a[j] + sq_b[k] - 2.0 * cross[k]);
                }
            });
            DenseMatrix::from_row_major(n, m, data).expect("finite gradient")
        })
        .collect()
}

/// Coupling deltas `-lr_i ∂L/∂G^i` for a single nudged pair.
pub fn eqprop_update(
    net: &DeepFhnNet,
    s_plus: &NetworkState,
    s_minus: &NetworkState,
    cfg: &TrainConfig,
) -> Vec<DenseMatrix> {
    eqprop_gradient(net, &[(s_plus, s_minus)], cfg.beta_nudge)
        .into_iter()
        .enumerate()
        .map(|(i, g)| g.scale(-cfg.lr(i, 0)))
        .collect()
}

/// Per-layer agreement between the EqProp estimate and finite differences.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct LayerGradCheck {
    pub layer: usize,
    pub cosine: f64,
    /// `‖g_eq - g_fd‖ / ‖g_fd‖`.
    pub relative_error: f64,
    /// `‖g_eq‖ / ‖g_fd‖`.
    pub magnitude_ratio: f64,
    pub fd_norm: f64,
}

#[derive(Debug, Clone, Serialize)]
pub struct GradCheckReport {
    pub layers: Vec<LayerGradCheck>,
    pub loss: f64,
    #[serde(skip)]
    pub eqprop: Vec<DenseMatrix>,
    #[serde(skip)]
    pub finite_difference: Vec<DenseMatrix>,
}

impl GradCheckReport {
    pub fn min_cosine(&self) -> f64 {
        self.layers
            .iter()
            .map(|l| l.cosine)
            .fold(f64::INFINITY, f64::min)
    }

    pub fn mean_relative_error(&self) -> f64 {
        self.layers.iter().map(|l| l.relative_error).sum::<f64>() / self.layers.len() as f64
    }
}

/// Settings for fully converged phases in a gradient check.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GradCheckOptions {
    pub beta: f64,
    pub fd_eps: f64,
    pub dt: f64,
    pub tol: f64,
    pub max_steps: usize,
}

fn converged(phase: Phase, what: &str) -> Result<NetworkState> {
    if phase.converged {
        Ok(phase.state)
    } else {
        Err(Error::Unconverged {
            context: what.into(),
            steps: phase.steps,
        })
    }
}

/// Compares the centered EqProp estimate at `opts.beta` with centered finite
/// differences of the equilibrium loss, re-relaxing for every perturbed
/// coupling.
pub fn gradient_check(
    net: &DeepFhnNet,
    x: &[f64],
    y: &[f64],
    opts: &GradCheckOptions,
) -> Result<GradCheckReport> {
    net.check_sample(x, Some(y))?;
    let sched = Schedule::Converge {
        tol: opts.tol,
        max_steps: opts.max_steps,
    };
    let free = converged(
        net.free_phase(x, sched, opts.dt)?,
        "gradient check free phase",
    )?;
    let plus = converged(
        net.nudged_phase(&free, x, y, opts.beta, sched, opts.dt)?,
        "gradient check positive nudge",
    )?;
    let minus = converged(
        net.nudged_phase(&free, x, y, -opts.beta, sched, opts.dt)?,
        "gradient check negative nudge",
    )?;
    let eqprop = eqprop_gradient(net, &[(&plus, &minus)], opts.beta);

    let index: Vec<(usize, usize, usize)> = net
        .couplings
        .iter()
        .enumerate()
        .flat_map(|(i, g)| (0..g.rows()).flat_map(move |j| (0..g.cols()).map(move |k| (i, j, k))))
        .collect();
    let fd_values: Vec<f64> = index
        .par_iter()
        .map(|&(i, j, k)| -> Result<f64> {
            let mut losses = [0.0; 2];
            for (slot, sign) in [1.0, -1.0].into_iter().enumerate() {
                let mut pert = net.clone();
                pert.couplings[i][(j, k)] += sign * opts.fd_eps;
                let ph = pert.run(free.clone(), x, &pert.sums(), None, sched, opts.dt)?;
                let s = converged(ph, &format!("finite difference of coupling {i} ({j}, {k})"))?;
                losses[slot] = pert.loss(&s, y);
            }
            Ok((losses[0] - losses[1]) / (2.0 * opts.fd_eps))
        })
        .collect::<Result<_>>()?;
    let mut fd: Vec<DenseMatrix> = net
        .couplings
        .iter()
        .map(|g| DenseMatrix::zeros(g.rows(), g.cols()))
        .collect();
    for (&(i, j, k), &v) in index.iter().zip(&fd_values) {
        fd[i][(j, k)] = v;
    }

    let layers = eqprop
        .iter()
        .zip(&fd)
        .enumerate()
        .map(|(layer, (e, f))| {
            let (ne, nf) = (
                dot(e.data(), e.data()).sqrt(),
                dot(f.data(), f.data()).sqrt(),
            );
            let diff = e.sub(f).expect("same shape");
            let nd = dot(diff.data(), diff.data()).sqrt();
            LayerGradCheck {
                layer,
                cosine: dot(e.data(), f.data()) / (ne * nf).max(f64::MIN_POSITIVE),
                relative_error: nd / nf.max(f64::MIN_POSITIVE),
                magnitude_ratio: ne / nf.max(f64::MIN_POSITIVE),
                fd_norm: nf,
            }
        })
        .collect();
    Ok(GradCheckReport {
        layers,
        loss: net.loss(&free, y),
        eqprop,
        finite_difference: fd,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct EpochMetrics {
    pub loss: f64,
    pub error: f64,
}

struct SampleResult {
    loss: f64,
    correct: bool,
    plus: NetworkState,
    minus: NetworkState,
}

/// Optimizer state carried across batches and epochs.
#[derive(Debug, Clone, PartialEq)]
pub struct OptimizerState {
    first: Vec<DenseMatrix>,
    second: Vec<DenseMatrix>,
    steps: u64,
}

const ADAM_BETA1: f64 = 0.9;
const ADAM_BETA2: f64 = 0.999;
const ADAM_EPS: f64 = 1e-8;

impl OptimizerState {
    pub fn new(net: &DeepFhnNet) -> Self {
        let zeros = || -> Vec<DenseMatrix> {
            net.couplings
                .iter()
                .map(|g| DenseMatrix::zeros(g.rows(), g.cols()))
                .collect()
        };
        Self {
            first: zeros(),
            second: zeros(),
            steps: 0,
        }
    }

    fn apply(
        &mut self,
        net: &mut DeepFhnNet,
        grads: &[DenseMatrix],
        cfg: &TrainConfig,
        epoch: usize,
    ) {
        self.steps += 1;
        for (i, g) in grads.iter().enumerate() {
            let lr = cfg.lr(i, epoch);
            let w = net.couplings[i].data_mut();
            let m = self.first[i].data_mut();
            match cfg.optimizer {
                Optimizer::Sgd => {
                    for ((w, m), d) in w.iter_mut().zip(m.iter_mut()).zip(g.data()) {
                        *m = cfg.momentum * *m + d;
                        *w -= lr * *m;
                    }
                }
                Optimizer::Adam => {
                    let s = self.second[i].data_mut();
                    let c1 = 1.0 - ADAM_BETA1.powi(self.steps as i32);
                    let c2 = 1.0 - ADAM_BETA2.powi(self.steps as i32);
                    for (((w, m), s), d) in w
                        .iter_mut()
                        .zip(m.iter_mut())
                        .zip(s.iter_mut())
                        .zip(g.data())
                    {
                        *m = ADAM_BETA1 * *m + (1.0 - ADAM_BETA1) * d;
                        *s = ADAM_BETA2 * *s + (1.0 - ADAM_BETA2) * d * d;
                        *w -= lr * (*m / c1) / ((*s / c2).sqrt() + ADAM_EPS);
                    }
                }
            }
        }
    }
}

/// One pass of minibatch training over a seeded shuffle of `data`. Samples in a
/// batch relax in parallel; the gradient is reduced in sample order, so
/// results do not depend on the thread count.
pub fn train_epoch(
    net: &mut DeepFhnNet,
    opt: &mut OptimizerState,
    data: &Dataset,
    cfg: &TrainConfig,
    epoch: usize,
    seed: u64,
) -> Result<EpochMetrics> {
    if data.input_dim() != net.input_dim() || data.num_classes() != net.output_dim() {
        return Err(Error::dims(
            "dataset input size",
            net.input_dim(),
            data.input_dim(),
        ));
    }
    let mut order: Vec<usize> = (0..data.len()).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(epoch as u64 + 1);
    order.shuffle(&mut rng);

    let (free_s, nudge_s) = (
        Schedule::Fixed(cfg.free_iters),
        Schedule::Fixed(cfg.nudge_iters),
    );
    let (mut loss, mut correct) = (0.0, 0usize);
    for (b, batch) in order.chunks(cfg.batch_size).enumerate() {
        let sums = net.sums();
        let results: Vec<SampleResult> = batch
            .par_iter()
            .map(|&i| -> Result<SampleResult> {
                let (x, y) = (data.input(i), data.one_hot(i));
                let free = net
                    .run(net.initial_state(x), x, &sums, None, free_s, cfg.dt)?
                    .state;
                let plus = net.run(
                    free.clone(),
                    x,
                    &sums,
                    Some((&y, cfg.beta_nudge)),
                    nudge_s,
                    cfg.dt,
                )?;
                let minus = net.run(
                    free.clone(),
                    x,
                    &sums,
                    Some((&y, -cfg.beta_nudge)),
                    nudge_s,
                    cfg.dt,
                )?;
                Ok(SampleResult {
                    loss: net.loss(&free, &y),
                    correct: net.predict(&free) == data.label(i),
                    plus: plus.state,
                    minus: minus.state,
                })
            })
            .collect::<Result<_>>()
            .map_err(|e| match e {
                Error::Divergence { step, .. } => Error::Divergence {
                    context: format!("epoch {epoch} batch {b}"),
                    step,
                },
                other => other,
            })?;
        for r in &results {
            loss += r.loss;
            correct += r.correct as usize;
        }
        let pairs: Vec<(&NetworkState, &NetworkState)> =
            results.iter().map(|r| (&r.plus, &r.minus)).collect();
        let grads = eqprop_gradient(net, &pairs, cfg.beta_nudge);
        opt.apply(net, &grads, cfg, epoch);
        if net.couplings.iter().any(|g| !g.all_finite()) {
            return Err(Error::Divergence {
                context: format!("epoch {epoch} batch {b} weight update"),
                step: 0,
            });
        }
    }
    let n = data.len().max(1) as f64;
    Ok(EpochMetrics {
        loss: loss / n,
        error: 1.0 - correct as f64 / n,
    })
}

/// Mean loss and error rate of free-phase predictions.
pub fn evaluate(
    net: &DeepFhnNet,
    data: &Dataset,
    free_iters: usize,
    dt: f64,
) -> Result<EpochMetrics> {
    if data.input_dim() != net.input_dim() || data.num_classes() != net.output_dim() {
        return Err(Error::dims(
            "dataset input size",
            net.input_dim(),
            data.input_dim(),
        ));
    }
    let sums = net.sums();
    let per: Vec<(f64, bool)> = (0..data.len())
        .into_par_iter()
        .map(|i| -> Result<(f64, bool)> {
            let x = data.input(i);
            let s = net
                .run(
                    net.initial_state(x),
                    x,
                    &sums,
                    None,
                    Schedule::Fixed(free_iters),
                    dt,
                )?
                .state;
            Ok((
                net.loss(&s, &data.one_hot(i)),
                net.predict(&s) == data.label(i),
            ))
        })
        .collect::<Result<_>>()?;
    let n = data.len().max(1) as f64;
    Ok(EpochMetrics {
        loss: per.iter().map(|p| p.0).sum::<f64>() / n,
        error: 1.0 - per.iter().filter(|p| p.1).count() as f64 / n,
    })
}

/// Metrics log rows `epoch,split,loss,error`.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct MetricsLog {
    rows: Vec<(usize, String, EpochMetrics)>,
}

impl MetricsLog {
    pub fn push(&mut self, epoch: usize, split: &str, m: EpochMetrics) {
        self.rows.push((epoch, split.to_string(), m));
    }

    pub fn rows(&self) -> &[(usize, String, EpochMetrics)] {
        &self.rows
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from("epoch,split,loss,error\n");
        for (e, s, m) in &self.rows {
            out.push_str(&format!("{e},{s},{},{}\n", m.loss, m.error));
        }
        out
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct CheckpointManifest {
    format: String,
    layer_sizes: Vec<usize>,
    params: FhnParams,
    couplings: Vec<BlobRef>,
}

const CHECKPOINT_FORMAT: &str = "fhn-eqprop-checkpoint-v1";

/// Writes `manifest.json` plus one little-endian f64 blob per coupling.
pub fn save_checkpoint(net: &DeepFhnNet, dir: &Path) -> Result<()> {
    let couplings = net
        .couplings
        .iter()
        .enumerate()
        .map(|(i, g)| write_blob(dir, &format!("coupling_{i}.f64"), g))
        .collect::<Result<_>>()?;
    let manifest = CheckpointManifest {
        format: CHECKPOINT_FORMAT.into(),
        layer_sizes: net.layer_sizes.clone(),
        params: net.params,
        couplings,
    };
    write_atomic(
        &dir.join("manifest.json"),
        serde_json::to_string_pretty(&manifest)?.as_bytes(),
    )
}

pub fn load_checkpoint(dir: &Path) -> Result<DeepFhnNet> {
    let path = dir.join("manifest.json");
    let text = std::fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
    let manifest: CheckpointManifest = serde_json::from_str(&text).map_err(|e| Error::Format {
        kind: "checkpoint manifest",
        path: path.clone(),
        message: e.to_string(),
    })?;
    if manifest.format != CHECKPOINT_FORMAT {
        return Err(Error::Format {
            kind: "checkpoint manifest",
            path,
            message: format!("unsupported format {:?}", manifest.format),
        });
    }
    let couplings = manifest
        .couplings
        .iter()
        .map(|b| read_blob(dir, b))
        .collect::<Result<_>>()?;
    DeepFhnNet::with_couplings(&manifest.layer_sizes, couplings, manifest.params)
}
