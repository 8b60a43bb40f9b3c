//! Experiment drivers shared by the command line and the acceptance tests.
//! Every driver is a pure function of the config and a seed.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::Serialize;

use crate::dataio::{load_mnist_dir, Dataset, RunConfig, Split};
use crate::eqprop::{
    evaluate, gradient_check, init_weights, train_epoch, DeepFhnNet, EpochMetrics,
    GradCheckOptions, LayerGradCheck, MetricsLog, OptimizerState,
};
use crate::error::{Error, Result};
use crate::fhn::{
    reaction, relative_asymmetry, FhnNetwork, FhnParams, InputCurrent, NetworkState, RelaxOptions,
    Relaxation,
};
use crate::graph::{path_laplacian_ghost, ResidualTopology, WeightedGraph};
use crate::ham_ebm::{
    random_input, verify_ebm_reconstruction, EbmRelaxOptions, EbmReport, HopfieldEbm,
};
use crate::ham_fhn::{
    compare_to_time_dynamics, path_kirchhoff_residuals, DepthComparison, KirchhoffResiduals,
    StepOptions,
};
use crate::numerics::DenseMatrix;

fn rng_for(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

fn uniform_vec(n: usize, scale: f64, rng: &mut ChaCha8Rng) -> Vec<f64> {
    if scale == 0.0 {
        return vec![0.0; n];
    }
    (0..n).map(|_| rng.random_range(-scale..scale)).collect()
}

/// Random state with `u` uniform in `±scale` and `v` uniform in `±scale/5`.
pub fn random_state(n: usize, scale: f64, rng: &mut ChaCha8Rng) -> NetworkState {
    let u = uniform_vec(n, scale, rng);
    let v = uniform_vec(n, scale / 5.0, rng);
    NetworkState { u, v }
}

/// A network, initial state and input current built from the `network`
/// section; graphs come from files when given.
pub struct NetworkSetup {
    pub network: FhnNetwork,
    pub initial: NetworkState,
    pub input: InputCurrent,
}

pub fn network_setup(cfg: &RunConfig, seed: u64) -> Result<NetworkSetup> {
    let nc = &cfg.network;
    let mut rng = rng_for(seed, 0);
    let l1 = match &nc.graph {
        Some(p) => WeightedGraph::load(p)?,
        None => WeightedGraph::random_connected(nc.nodes, nc.conductance_range, &mut rng)?,
    }
    .laplacian();
    let n = l1.rows();
    let l2 = match &nc.inhibitor_graph {
        Some(p) => {
            let g = WeightedGraph::load(p)?;
            if g.node_count() != n {
                return Err(Error::dims("inhibitor graph nodes", n, g.node_count()));
            }
            g.laplacian()
        }
        None => DenseMatrix::zeros(n, n),
    };
    let network = FhnNetwork::new(cfg.fhn, l1, l2)?;
    let initial = random_state(n, nc.init_scale, &mut rng);
    let input = InputCurrent(uniform_vec(n, nc.input_scale, &mut rng));
    Ok(NetworkSetup {
        network,
        initial,
        input,
    })
}

#[derive(Debug, Clone, Serialize)]
pub struct SelfAdjointNetwork {
    pub index: usize,
    pub regime: usize,
    pub nodes: usize,
    pub relax_steps: usize,
    pub analytic_defect: f64,
    pub probe_defect: f64,
}

#[derive(Debug, Clone, Serialize)]
pub struct SelfAdjointReport {
    pub networks: Vec<SelfAdjointNetwork>,
    pub regimes: Vec<FhnParams>,
    pub max_analytic_defect: f64,
    pub max_probe_defect: f64,
    pub analytic_tol: f64,
    pub probe_tol: f64,
    pub passed: bool,
}

/// Relaxes random diffusive networks, cycling over `fhn` and the extra
/// regimes, and measures the asymmetry of the analytic and probed responses.
pub fn selfadjoint_check(cfg: &RunConfig, seed: u64) -> Result<SelfAdjointReport> {
    let sc = &cfg.selfadjoint;
    let mut regimes = vec![cfg.fhn];
    regimes.extend(sc.extra_regimes.iter().copied());
    let opts = RelaxOptions {
        tol: sc.relax_tol,
        ..cfg.relax
    };
    let networks = (0..sc.networks)
        .into_par_iter()
        .map(|i| -> Result<SelfAdjointNetwork> {
            let mut rng = rng_for(seed, i as u64 + 1);
            let regime = i % regimes.len();
            let n = rng.random_range(sc.min_nodes..=sc.max_nodes);
            let range = cfg.network.conductance_range;
            let l1 = WeightedGraph::random_connected(n, range, &mut rng)?.laplacian();
            let l2 = WeightedGraph::random_connected(n, range, &mut rng)?.laplacian();
            let net = FhnNetwork::new(regimes[regime], l1, l2)?;
            let s0 = random_state(n, cfg.network.init_scale, &mut rng);
            let input = InputCurrent(uniform_vec(n, cfg.network.input_scale, &mut rng));
            let steady = converged(
                net.relax(&s0, &input, &opts)?,
                &format!("selfadjoint network {i}"),
            )?;
            let analytic = net.response_matrix(&steady)?;
            let probe = net.response_probe(&steady, &input, sc.probe_eps, &opts)?;
            Ok(SelfAdjointNetwork {
                index: i,
                regime,
                nodes: n,
                relax_steps: steady.steps,
                analytic_defect: analytic.symmetry_defect,
                probe_defect: relative_asymmetry(&probe),
            })
        })
        .collect::<Result<Vec<_>>>()?;
    let max_analytic_defect = networks
        .iter()
        .map(|r| r.analytic_defect)
        .fold(0.0, f64::max);
    let max_probe_defect = networks.iter().map(|r| r.probe_defect).fold(0.0, f64::max);
    Ok(SelfAdjointReport {
        passed: max_analytic_defect <= sc.analytic_tol && max_probe_defect <= sc.probe_tol,
        networks,
        regimes,
        max_analytic_defect,
        max_probe_defect,
        analytic_tol: sc.analytic_tol,
        probe_tol: sc.probe_tol,
    })
}

fn converged(r: Relaxation, context: &str) -> Result<Relaxation> {
    if r.converged {
        Ok(r)
    } else {
        Err(Error::Unconverged {
            context: context.into(),
            steps: r.steps,
        })
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct GradientStructureReport {
    pub states: usize,
    pub nodes: usize,
    /// Max over states of `‖r_fd - r‖∞ / ‖r‖∞`, with `r = (fu, fv)`.
    pub max_relative_error: f64,
}

/// Compares the reaction with `(∂F/∂u, -∂F/∂v)` from centered differences of
/// the free energy density at random states.
pub fn gradient_structure_check(
    params: &FhnParams,
    states: usize,
    nodes: usize,
    scale: f64,
    seed: u64,
) -> GradientStructureReport {
    let h = 1e-5;
    let mut rng = rng_for(seed, 0);
    let mut worst = 0.0_f64;
    for _ in 0..states {
        let s = NetworkState {
            u: uniform_vec(nodes, scale, &mut rng),
            v: uniform_vec(nodes, scale, &mut rng),
        };
        let r = reaction(&s, params);
        let (mut err, mut norm) = (0.0_f64, 0.0_f64);
        for i in 0..nodes {
            let (u, v) = (s.u[i], s.v[i]);
            let f = |a: f64, b: f64| params.free_energy_density(a, b);
            let du = (f(u + h, v) - f(u - h, v)) / (2.0 * h);
            let dv = (f(u, v + h) - f(u, v - h)) / (2.0 * h);
            err = err.max((du - r.fu[i]).abs()).max((-dv - r.fv[i]).abs());
            norm = norm.max(r.fu[i].abs()).max(r.fv[i].abs());
        }
        worst = worst.max(err / norm.max(f64::MIN_POSITIVE));
    }
    GradientStructureReport {
        states,
        nodes,
        max_relative_error: worst,
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct GradCheckRun {
    pub net: usize,
    pub loss: f64,
    pub layers: Vec<LayerGradCheck>,
}

#[derive(Debug, Clone, Serialize)]
pub struct GradCheckSummary {
    pub runs: Vec<GradCheckRun>,
    pub min_cosine: f64,
    pub required_cosine: f64,
    pub passed: bool,
}

/// Gradient checks on random nets with random inputs in `[0, 1)` and random
/// one-hot targets.
pub fn gradcheck(cfg: &RunConfig, seed: u64) -> Result<GradCheckSummary> {
    let gc = &cfg.gradcheck;
    let opts = GradCheckOptions {
        beta: gc.beta,
        fd_eps: gc.fd_eps,
        dt: cfg.relax.dt,
        tol: gc.relax_tol,
        max_steps: gc.max_steps,
    };
    let mut runs = Vec::with_capacity(gc.nets);
    for i in 0..gc.nets {
        let mut rng = rng_for(seed, i as u64 + 1);
        let base = DeepFhnNet::new(&gc.layer_sizes, cfg.fhn)?;
        let net = init_weights(&base, gc.init_scale, rng.random());
        let x: Vec<f64> = (0..net.input_dim())
            .map(|_| rng.random_range(0.0..1.0))
            .collect();
        let mut y = vec![0.0; net.output_dim()];
        y[rng.random_range(0..net.output_dim())] = 1.0;
        let r = gradient_check(&net, &x, &y, &opts)?;
        runs.push(GradCheckRun {
            net: i,
            loss: r.loss,
            layers: r.layers,
        });
    }
    let min_cosine = runs
        .iter()
        .flat_map(|r| r.layers.iter().map(|l| l.cosine))
        .fold(f64::INFINITY, f64::min);
    Ok(GradCheckSummary {
        passed: min_cosine >= gc.min_cosine,
        runs,
        min_cosine,
        required_cosine: gc.min_cosine,
    })
}

/// Residual topology with couplings uniform in `[0, coupling_scale / width)`.
pub fn random_residual_topology(cfg: &RunConfig, seed: u64) -> Result<ResidualTopology> {
    let rc = &cfg.residual;
    let mut rng = rng_for(seed, 0);
    let hi = rc.coupling_scale / rc.width as f64;
    let couplings = (0..rc.depth - 1)
        .map(|_| {
            DenseMatrix::from_fn(rc.width, rc.width, |_, _| {
                if hi > 0.0 {
                    rng.random_range(0.0..hi)
                } else {
                    0.0
                }
            })
        })
        .collect();
    ResidualTopology::new(rc.depth, rc.width, rc.backbone, couplings)
}

#[derive(Debug, Clone, Serialize)]
pub struct Fig2Report {
    pub comparison: DepthComparison,
    /// Layers before the first one exceeding the threshold.
    pub tracked_layers: usize,
    pub deviation_at_depth: f64,
}

/// Relaxes the residual net from noise, then integrates the depth recursion
/// from the steady state's first two layers.
pub fn fig2(cfg: &RunConfig, seed: u64) -> Result<(ResidualTopology, Fig2Report)> {
    let rc = &cfg.residual;
    let t = random_residual_topology(cfg, seed)?;
    let mut rng = rng_for(seed, 1);
    let initial = random_state(t.node_count(), rc.init_scale, &mut rng);
    let opts = StepOptions {
        inhibitor_mode: rc.inhibitor_mode,
        ghost_half: rc.ghost_half,
    };
    let comparison =
        compare_to_time_dynamics(&t, &rc.fhn, &initial, &rc.relax, &opts, rc.threshold)?;
    if comparison.relax_steps >= rc.relax.max_steps {
        return Err(Error::Unconverged {
            context: "residual network relaxation".into(),
            steps: comparison.relax_steps,
        });
    }
    let tracked_layers = comparison.first_exceeding.unwrap_or(rc.depth);
    let deviation_at_depth = match comparison.diverged_at {
        Some(_) => f64::INFINITY,
        None => comparison.layers.last().map_or(0.0, |d| d.u_deviation),
    };
    Ok((
        t,
        Fig2Report {
            comparison,
            tracked_layers,
            deviation_at_depth,
        },
    ))
}

#[derive(Debug, Clone, Serialize)]
pub struct PathConservationReport {
    pub nodes: usize,
    pub relax_steps: usize,
    pub relax_tol: f64,
    pub max_activator_residual: f64,
    pub max_inhibitor_residual: f64,
    /// Peak-to-peak amplitude of the stationary pattern.
    pub pattern_amplitude: f64,
    pub passed: bool,
    #[serde(skip)]
    pub state: NetworkState,
    #[serde(skip)]
    pub residuals: KirchhoffResiduals,
}

/// Relaxes a single ghost-boundary path from noise and evaluates the nodal
/// current balance at its interior nodes.
pub fn path_conservation(cfg: &RunConfig, seed: u64) -> Result<PathConservationReport> {
    let rc = &cfg.residual;
    let n = rc.path_nodes;
    let l = path_laplacian_ghost(n)?.scale(rc.backbone);
    let net = FhnNetwork::new(rc.fhn, l.clone(), l)?;
    let mut rng = rng_for(seed, 2);
    let s0 = random_state(n, rc.init_scale, &mut rng);
    let steady = converged(
        net.relax(&s0, &InputCurrent::zeros(n), &rc.relax)?,
        "path relaxation",
    )?;
    let residuals = path_kirchhoff_residuals(&steady.state, &rc.fhn, rc.backbone);
    let max_abs = |v: &[f64]| v.iter().fold(0.0_f64, |m, x| m.max(x.abs()));
    let (lo, hi) = steady
        .state
        .u
        .iter()
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), &u| {
            (a.min(u), b.max(u))
        });
    let max_activator_residual = max_abs(&residuals.activator);
    let max_inhibitor_residual = max_abs(&residuals.inhibitor);
    Ok(PathConservationReport {
        nodes: n,
        relax_steps: steady.steps,
        relax_tol: rc.relax.tol,
        passed: max_activator_residual.max(max_inhibitor_residual) <= 10.0 * rc.relax.tol,
        max_activator_residual,
        max_inhibitor_residual,
        pattern_amplitude: hi - lo,
        state: steady.state,
        residuals,
    })
}

#[derive(Debug, Clone, Serialize)]
pub struct EbmRun {
    pub net: usize,
    #[serde(flatten)]
    pub report: EbmReport,
}

#[derive(Debug, Clone, Serialize)]
pub struct EbmSummary {
    pub runs: Vec<EbmRun>,
    pub max_deviation: f64,
    pub max_balance_residual: f64,
    pub reconstruction_tol: f64,
    pub balance_tol: f64,
    pub passed: bool,
}

/// Random EBM instances.
pub fn ebm_nets(cfg: &RunConfig, seed: u64) -> Result<Vec<(HopfieldEbm, Vec<f64>)>> {
    let ec = &cfg.ebm;
    (0..ec.nets)
        .map(|i| {
            let mut rng = rng_for(seed, i as u64 + 1);
            let net = HopfieldEbm::random(
                ec.depth,
                ec.width,
                ec.weight_scale,
                ec.bias_scale,
                ec.activation,
                rng.random(),
            )?;
            let x = random_input(ec.width, ec.input_scale, rng.random());
            Ok((net, x))
        })
        .collect()
}

pub fn ebm_check(cfg: &RunConfig, seed: u64) -> Result<EbmSummary> {
    let ec = &cfg.ebm;
    let opts = EbmRelaxOptions {
        dt: ec.dt,
        tol: ec.tol,
        max_steps: ec.max_steps,
    };
    let runs = ebm_nets(cfg, seed)?
        .par_iter()
        .enumerate()
        .map(|(i, (net, x))| {
            let report = verify_ebm_reconstruction(net, x, &opts)?;
            if !report.converged {
                return Err(Error::Unconverged {
                    context: format!("ebm relaxation {i}"),
                    steps: report.relax_steps,
                });
            }
            Ok(EbmRun { net: i, report })
        })
        .collect::<Result<Vec<_>>>()?;
    let max_deviation = runs
        .iter()
        .map(|r| r.report.max_deviation)
        .fold(0.0, f64::max);
    let max_balance_residual = runs
        .iter()
        .map(|r| r.report.balance_residual)
        .fold(0.0, f64::max);
    let balance_tol = 10.0 * ec.tol;
    Ok(EbmSummary {
        passed: max_deviation <= ec.reconstruction_tol && max_balance_residual <= balance_tol,
        runs,
        max_deviation,
        max_balance_residual,
        reconstruction_tol: ec.reconstruction_tol,
        balance_tol,
    })
}

/// Train and test splits, truncated to the configured limits.
pub fn load_mnist(cfg: &RunConfig) -> Result<(Dataset, Dataset)> {
    let dc = &cfg.data;
    let mut train = load_mnist_dir(&dc.mnist_dir, Split::Train)?;
    let mut test = load_mnist_dir(&dc.mnist_dir, Split::Test)?;
    if let Some(n) = dc.train_limit {
        train = train.take(n);
    }
    if let Some(n) = dc.test_limit {
        test = test.take(n);
    }
    Ok((train, test))
}

#[derive(Debug, Clone, Serialize)]
pub struct TrainReport {
    pub epochs: Vec<EpochSummary>,
    pub final_test_error: f64,
    pub best_test_error: f64,
    pub train_samples: usize,
    pub test_samples: usize,
}

#[derive(Debug, Clone, Copy, Serialize)]
pub struct EpochSummary {
    pub epoch: usize,
    pub train: EpochMetrics,
    pub test: EpochMetrics,
}

/// Trains from a seeded initialization, evaluating on `test` after every
/// epoch. `on_epoch` sees each epoch's metrics as they arrive.
pub fn train(
    cfg: &RunConfig,
    seed: u64,
    train: &Dataset,
    test: &Dataset,
    mut on_epoch: impl FnMut(&EpochSummary),
) -> Result<(DeepFhnNet, TrainReport, MetricsLog)> {
    let tc = &cfg.train;
    let base = DeepFhnNet::new(&tc.layer_sizes, cfg.fhn)?;
    let mut net = init_weights(&base, tc.init_scale, seed);
    let mut opt = OptimizerState::new(&net);
    let mut log = MetricsLog::default();
    let mut epochs = Vec::with_capacity(tc.epochs);
    for e in 0..tc.epochs {
        let tm = train_epoch(&mut net, &mut opt, train, tc, e, seed)?;
        let te = evaluate(&net, test, tc.free_iters, tc.dt)?;
        log.push(e, "train", tm);
        log.push(e, "test", te);
        let s = EpochSummary {
            epoch: e,
            train: tm,
            test: te,
        };
        on_epoch(&s);
        epochs.push(s);
    }
    let final_test_error = epochs.last().map_or(f64::NAN, |e| e.test.error);
    let best_test_error = epochs
        .iter()
        .map(|e| e.test.error)
        .fold(f64::INFINITY, f64::min);
    Ok((
        net,
        TrainReport {
            epochs,
            final_test_error,
            best_test_error,
            train_samples: train.len(),
            test_samples: test.len(),
        },
        log,
    ))
}
