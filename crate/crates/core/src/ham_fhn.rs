//! Layer-wise Hamiltonian inference for stationary states of residual FHN
//! networks.
//!
//! A residual network is `width` parallel paths of length `depth` joined
//! between consecutive layers by couplings `G^i`. At a stationary state the
//! current balance at layer `i+1` is a two-step recursion in the layer drop
//! `p^i = u^{i+1} - u^i`:
//!
//! ```text
//! u^{i+1} = u^i + p^i
//! p^{i+1} = M N p^i + M ι^{i+1} - M O u^{i+1}
//! M = (G̃^{i+1} + κI)⁻¹,  N = G̃^iᵀ + κI,
//! O = G̃^iᵀ + G̃^{i+1} - diag(colsum G̃^i + rowsum G̃^{i+1})
//! ```
//!
//! where `G̃ = d₁G` and `κ = d₁c` are the effective coupling and backbone
//! conductances and `ι = -(u - u³ - v)` is the current drawn by the
//! nonlinear element. Inhibitors have no inter-path coupling, so their drop
//! obeys `κ_v (q^{i+1} - q^i) = -(u - αv - β)` with `κ_v = d₂'c`.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::fhn::{FhnNetwork, FhnParams, InputCurrent, NetworkState, RelaxOptions, Relaxation};
use crate::graph::{residual_laplacian, ResidualTopology};
use crate::numerics::{inverse, sqrt_psd, sym_eig, DenseMatrix};

/// Activator, activator drop, inhibitor, inhibitor drop at one layer.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PhasePoint {
    pub u: Vec<f64>,
    pub p: Vec<f64>,
    pub v: Vec<f64>,
    pub q: Vec<f64>,
}

impl PhasePoint {
    pub fn new(u: Vec<f64>, p: Vec<f64>, v: Vec<f64>, q: Vec<f64>) -> Result<Self> {
        let m = u.len();
        for (name, x) in [("p", &p), ("v", &v), ("q", &q)] {
            if x.len() != m {
                return Err(Error::dims(format!("phase point {name}"), m, x.len()));
            }
        }
        let ph = Self { u, p, v, q };
        if !ph.is_finite() {
            return Err(Error::NonFinite {
                context: "phase point".into(),
            });
        }
        Ok(ph)
    }

    pub fn width(&self) -> usize {
        self.u.len()
    }

    pub fn is_finite(&self) -> bool {
        self.u
            .iter()
            .chain(&self.p)
            .chain(&self.v)
            .chain(&self.q)
            .all(|x| x.is_finite())
    }
}

/// Inhibitor drop update.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum InhibitorMode {
    /// `q^{i+1} = q^i - (u - αv - β)/κ_v`, the discrete stationary balance.
    Conservative,
    /// `q^{i+1} = (u - αv - β)/κ_v`, without the `q^i` term.
    Printed,
}

/// Per-layer recursion matrices.
#[derive(Debug, Clone, PartialEq)]
pub struct RecursionMatrices {
    pub m: DenseMatrix,
    pub n: DenseMatrix,
    pub o: DenseMatrix,
}

/// `M = (G^{i+1} + κI)⁻¹`, `N = G^iᵀ + κI`,
/// `O = G^iᵀ + G^{i+1} - diag(colsum G^i + rowsum G^{i+1})` for effective
/// couplings `gi`, `gip1`.
pub fn recursion_matrices(
    gi: &DenseMatrix,
    gip1: &DenseMatrix,
    kappa: f64,
    layer: usize,
) -> Result<RecursionMatrices> {
    let w = gi.cols();
    if !gi.is_square() || gip1.shape() != (w, w) {
        return Err(Error::dims(
            format!("recursion couplings at layer {layer}"),
            w,
            gip1.rows(),
        ));
    }
    let git = gi.transpose();
    let mut inner = gip1.clone();
    inner.add_diagonal(kappa);
    let m = inverse(&inner).map_err(|e| match e {
        Error::Singular(msg) => {
            Error::Singular(format!("G^{} + kappa I at layer {layer}: {msg}", layer + 1))
        }
        other => other,
    })?;
    let mut n = git.clone();
    n.add_diagonal(kappa);
    let mut o = git.add(gip1)?;
    let (cs, rs) = (gi.column_sums(), gip1.row_sums());
    for k in 0..w {
        o[(k, k)] -= cs[k] + rs[k];
    }
    Ok(RecursionMatrices { m, n, o })
}

/// Conductances of a residual network as seen by the dynamics.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EffectiveConductances {
    /// Scale applied to couplings, `d₁'`.
    pub coupling: f64,
    /// Activator backbone conductance `κ = d₁'c`.
    pub kappa: f64,
    /// Inhibitor backbone conductance `κ_v = d₂'c`.
    pub kappa_v: f64,
}

impl EffectiveConductances {
    pub fn new(params: &FhnParams, backbone: f64) -> Self {
        Self {
            coupling: params.activator_diffusion(),
            kappa: params.activator_diffusion() * backbone,
            kappa_v: params.inhibitor_diffusion() * backbone,
        }
    }
}

/// Recursion matrices for the step from layer `i` to `i+1`; a coupling
/// past the last layer counts as zero.
pub fn layer_matrices(
    t: &ResidualTopology,
    params: &FhnParams,
    i: usize,
) -> Result<RecursionMatrices> {
    let c = EffectiveConductances::new(params, t.backbone());
    let w = t.width();
    let gi = t
        .couplings()
        .get(i)
        .map(|g| g.scale(c.coupling))
        .unwrap_or_else(|| DenseMatrix::zeros(w, w));
    let gip1 = t
        .couplings()
        .get(i + 1)
        .map(|g| g.scale(c.coupling))
        .unwrap_or_else(|| DenseMatrix::zeros(w, w));
    recursion_matrices(&gi, &gip1, c.kappa, i)
}

/// Options of the forward recursion.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StepOptions {
    pub inhibitor_mode: InhibitorMode,
    /// Halve `p` and `q` produced by the first step.
    pub ghost_half: bool,
}

impl Default for StepOptions {
    fn default() -> Self {
        Self {
            inhibitor_mode: InhibitorMode::Conservative,
            ghost_half: false,
        }
    }
}

/// One recursion step from layer `layer` to `layer + 1`.
pub fn layer_step(
    ph: &PhasePoint,
    mats: &RecursionMatrices,
    params: &FhnParams,
    cond: &EffectiveConductances,
    opts: &StepOptions,
    layer: usize,
) -> Result<PhasePoint> {
    let w = ph.width();
    if mats.m.rows() != w {
        return Err(Error::dims("recursion matrices", w, mats.m.rows()));
    }
    let u: Vec<f64> = ph.u.iter().zip(&ph.p).map(|(a, b)| a + b).collect();
    let v: Vec<f64> = ph.v.iter().zip(&ph.q).map(|(a, b)| a + b).collect();
    let np = mats.n.matvec(&ph.p)?;
    let ou = mats.o.matvec(&u)?;
    let rhs: Vec<f64> = (0..w)
        .map(|k| np[k] - params.activator_reaction(u[k], v[k]) - ou[k])
        .collect();
    let mut p = mats.m.matvec(&rhs)?;
    let mut q: Vec<f64> = (0..w)
        .map(|k| {
            let drive = params.inhibitor_reaction(u[k], v[k]) / cond.kappa_v;
            match opts.inhibitor_mode {
                InhibitorMode::Conservative => ph.q[k] - drive,
                InhibitorMode::Printed => drive,
            }
        })
        .collect();
    if opts.ghost_half && layer == 0 {
        p.iter_mut().chain(q.iter_mut()).for_each(|x| *x *= 0.5);
    }
    let next = PhasePoint { u, p, v, q };
    if !next.is_finite() {
        return Err(Error::Divergence {
            context: "Hamiltonian layer recursion".into(),
            step: layer + 1,
        });
    }
    Ok(next)
}

/// Layers produced by the forward recursion.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct DepthTrajectory {
    pub points: Vec<PhasePoint>,
    /// First layer whose values became non-finite, if any.
    pub diverged_at: Option<usize>,
}

impl DepthTrajectory {
    /// CSV with header `layer,node,u,p,v,q`.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("layer,node,u,p,v,q\n");
        for (l, ph) in self.points.iter().enumerate() {
            for k in 0..ph.width() {
                out.push_str(&format!(
                    "{l},{k},{},{},{},{}\n",
                    ph.u[k], ph.p[k], ph.v[k], ph.q[k]
                ));
            }
        }
        out
    }
}

/// Integrates the recursion from `initial` for `depth` layers (including
/// the initial one). Non-finite values stop the integration and are
/// reported through `diverged_at`.
pub fn integrate_depth(
    initial: &PhasePoint,
    t: &ResidualTopology,
    params: &FhnParams,
    depth: usize,
    opts: &StepOptions,
) -> Result<DepthTrajectory> {
    if initial.width() != t.width() {
        return Err(Error::dims(
            "initial phase point",
            t.width(),
            initial.width(),
        ));
    }
    if depth == 0 || depth > t.depth() {
        return Err(Error::InvalidArgument(format!(
            "depth must be in 1..={}, got {depth}",
            t.depth()
        )));
    }
    let cond = EffectiveConductances::new(params, t.backbone());
    let mut points = vec![initial.clone()];
    for i in 0..depth - 1 {
        let mats = layer_matrices(t, params, i)?;
        match layer_step(&points[i], &mats, params, &cond, opts, i) {
            Ok(next) => points.push(next),
            Err(Error::Divergence { step, .. }) => {
                return Ok(DepthTrajectory {
                    points,
                    diverged_at: Some(step),
                })
            }
            Err(e) => return Err(e),
        }
    }
    Ok(DepthTrajectory {
        points,
        diverged_at: None,
    })
}

/// Layer `l` slice of a flat residual-network vector.
fn layer_slice<'a>(x: &'a [f64], t: &ResidualTopology, l: usize) -> &'a [f64] {
    &x[t.node_index(l, 0)..t.node_index(l, 0) + t.width()]
}

/// Initial data `(u⁰, u¹ - u⁰, v⁰, v¹ - v⁰)` of a converged steady state.
pub fn seed_from_steady_state(steady: &Relaxation, t: &ResidualTopology) -> Result<PhasePoint> {
    if !steady.converged {
        return Err(Error::Unconverged {
            context: "seed requires a converged steady state".into(),
            steps: steady.steps,
        });
    }
    let s = &steady.state;
    if s.len() != t.node_count() {
        return Err(Error::dims("steady state", t.node_count(), s.len()));
    }
    let (u0, u1) = (layer_slice(&s.u, t, 0), layer_slice(&s.u, t, 1));
    let (v0, v1) = (layer_slice(&s.v, t, 0), layer_slice(&s.v, t, 1));
    PhasePoint::new(
        u0.to_vec(),
        u1.iter().zip(u0).map(|(a, b)| a - b).collect(),
        v0.to_vec(),
        v1.iter().zip(v0).map(|(a, b)| a - b).collect(),
    )
}

/// The FHN network whose activator Laplacian is the full residual graph and
/// whose inhibitor Laplacian is the uncoupled backbone.
pub fn residual_network(t: &ResidualTopology, params: FhnParams) -> Result<FhnNetwork> {
    FhnNetwork::new(params, residual_laplacian(t), t.backbone_laplacian())
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct LayerDeviation {
    pub layer: usize,
    pub u_deviation: f64,
    pub v_deviation: f64,
}

#[derive(Debug, Clone, Serialize)]
pub struct DepthComparison {
    pub layers: Vec<LayerDeviation>,
    pub relax_steps: usize,
    pub diverged_at: Option<usize>,
    pub threshold: f64,
    /// First layer whose u-deviation exceeds `threshold`.
    pub first_exceeding: Option<usize>,
    #[serde(skip)]
    pub steady: NetworkState,
    #[serde(skip)]
    pub trajectory: DepthTrajectory,
}

impl DepthComparison {
    /// CSV with header `layer,node,u_time,u_ham,deviation`; layers past a
    /// divergence are omitted.
    pub fn to_csv(&self, t: &ResidualTopology) -> String {
        let mut out = String::from("layer,node,u_time,u_ham,deviation\n");
        for (l, ph) in self.trajectory.points.iter().enumerate() {
            let ut = layer_slice(&self.steady.u, t, l);
            for k in 0..t.width() {
                out.push_str(&format!(
                    "{l},{k},{},{},{}\n",
                    ut[k],
                    ph.u[k],
                    (ph.u[k] - ut[k]).abs()
                ));
            }
        }
        out
    }
}

/// Relaxes the residual network from `initial`, seeds the recursion from the
/// steady state and reports per-layer deviations.
pub fn compare_to_time_dynamics(
    t: &ResidualTopology,
    params: &FhnParams,
    initial: &NetworkState,
    relax: &RelaxOptions,
    opts: &StepOptions,
    threshold: f64,
) -> Result<DepthComparison> {
    let net = residual_network(t, *params)?;
    let steady = net.relax(initial, &InputCurrent::zeros(t.node_count()), relax)?;
    let seed = seed_from_steady_state(&steady, t)?;
    let trajectory = integrate_depth(&seed, t, params, t.depth(), opts)?;
    let layers: Vec<LayerDeviation> = trajectory
        .points
        .iter()
        .enumerate()
        .map(|(l, ph)| {
            let dev = |a: &[f64], b: &[f64]| {
                a.iter()
                    .zip(b)
                    .map(|(x, y)| (x - y).abs())
                    .fold(0.0, f64::max)
            };
            LayerDeviation {
                layer: l,
                u_deviation: dev(&ph.u, layer_slice(&steady.state.u, t, l)),
                v_deviation: dev(&ph.v, layer_slice(&steady.state.v, t, l)),
            }
        })
        .collect();
    let first_exceeding = layers
        .iter()
        .find(|d| d.u_deviation > threshold)
        .map(|d| d.layer)
        .or(trajectory.diverged_at);
    Ok(DepthComparison {
        layers,
        relax_steps: steady.steps,
        diverged_at: trajectory.diverged_at,
        threshold,
        first_exceeding,
        steady: steady.state,
        trajectory,
    })
}

/// `e = L^{1/2} u` for positive definite `L`.
pub fn spatial_velocity(u: &[f64], l: &DenseMatrix) -> Result<Vec<f64>> {
    if l.rows() != u.len() {
        return Err(Error::dims("spatial velocity", l.rows(), u.len()));
    }
    let eig = sym_eig(l)?;
    let lowest = eig.values.first().copied().unwrap_or(0.0);
    let tol = 1e-12 * l.max_abs().max(1.0);
    if lowest <= tol {
        return Err(Error::NotPsd { eigenvalue: lowest });
    }
    sqrt_psd(l)?.matvec(u)
}

/// `H = ½(d₁ e_uᵀe_u - d₂ e_vᵀe_v) + F(u, v)` with the effective diffusion
/// coefficients of `params`.
pub fn spatial_hamiltonian(
    u: &[f64],
    v: &[f64],
    e_u: &[f64],
    e_v: &[f64],
    params: &FhnParams,
) -> f64 {
    let kinetic = params.activator_diffusion() * e_u.iter().map(|x| x * x).sum::<f64>()
        - params.inhibitor_diffusion() * e_v.iter().map(|x| x * x).sum::<f64>();
    let f: f64 = u
        .iter()
        .zip(v)
        .map(|(&a, &b)| params.free_energy_density(a, b))
        .sum();
    0.5 * kinetic + f
}

/// Nodal current balance at interior nodes of a single path:
/// activator `κ(p^i - p^{i-1}) - ι^i` and inhibitor
/// `κ_v(q^i - q^{i-1}) + (u - αv - β)`.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct KirchhoffResiduals {
    pub activator: Vec<f64>,
    pub inhibitor: Vec<f64>,
}

impl KirchhoffResiduals {
    pub fn max_abs(&self) -> f64 {
        self.activator
            .iter()
            .chain(&self.inhibitor)
            .fold(0.0_f64, |m, x| m.max(x.abs()))
    }
}

pub fn path_kirchhoff_residuals(
    s: &NetworkState,
    params: &FhnParams,
    backbone: f64,
) -> KirchhoffResiduals {
    let c = EffectiveConductances::new(params, backbone);
    let n = s.len();
    let mut out = KirchhoffResiduals {
        activator: Vec::new(),
        inhibitor: Vec::new(),
    };
    for i in 1..n.saturating_sub(1) {
        let (p_prev, p) = (s.u[i] - s.u[i - 1], s.u[i + 1] - s.u[i]);
        let (q_prev, q) = (s.v[i] - s.v[i - 1], s.v[i + 1] - s.v[i]);
        let iota = -params.activator_reaction(s.u[i], s.v[i]);
        out.activator.push(c.kappa * (p - p_prev) - iota);
        out.inhibitor
            .push(c.kappa_v * (q - q_prev) + params.inhibitor_reaction(s.u[i], s.v[i]));
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::fhn::Formulation;
    use crate::graph::path_laplacian_ghost;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn turing() -> FhnParams {
        FhnParams::turing()
    }

    fn random_topology(depth: usize, width: usize, scale: f64, seed: u64) -> ResidualTopology {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let couplings = (0..depth - 1)
            .map(|_| {
                DenseMatrix::from_fn(width, width, |_, _| {
                    rng.random_range(0.0..scale / width as f64)
                })
            })
            .collect();
        ResidualTopology::new(depth, width, 1.0, couplings).unwrap()
    }

    fn noise(n: usize, seed: u64) -> NetworkState {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        NetworkState::new(
            (0..n).map(|_| rng.random_range(-0.5..0.5)).collect(),
            (0..n).map(|_| rng.random_range(-0.1..0.1)).collect(),
        )
        .unwrap()
    }

    #[test]
    fn uncoupled_matrices() {
        let z = DenseMatrix::zeros(3, 3);
        let d2 = 0.75 * 0.75;
        let r = recursion_matrices(&z, &z, d2, 0).unwrap();
        for a in 0..3 {
            for b in 0..3 {
                let id = if a == b { 1.0 } else { 0.0 };
                assert!((r.m[(a, b)] - id / d2).abs() < 1e-15);
                assert!((r.n[(a, b)] - id * d2).abs() < 1e-15);
                assert_eq!(r.o[(a, b)], 0.0);
            }
        }
        let r = recursion_matrices(&z, &z, 1.0, 0).unwrap();
        assert_eq!(r.m, DenseMatrix::identity(3));
    }

    #[test]
    fn m_inverts_coupling_block() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let gi = DenseMatrix::from_fn(4, 4, |_, _| rng.random_range(-0.3..0.3));
        let gip1 = DenseMatrix::from_fn(4, 4, |_, _| rng.random_range(-0.3..0.3));
        let r = recursion_matrices(&gi, &gip1, 0.5625, 2).unwrap();
        let mut inner = gip1.clone();
        inner.add_diagonal(0.5625);
        let prod = r.m.matmul(&inner).unwrap();
        assert!(prod.sub(&DenseMatrix::identity(4)).unwrap().max_abs() < 1e-10);
    }

    #[test]
    fn singular_block_names_layer() {
        let z = DenseMatrix::zeros(2, 2);
        let mut g = DenseMatrix::zeros(2, 2);
        g[(0, 0)] = -1.0;
        let err = recursion_matrices(&z, &g, 1.0, 4).unwrap_err();
        assert!(
            matches!(&err, Error::Singular(m) if m.contains("layer 4")),
            "{err}"
        );
    }

    #[test]
    fn homogeneous_fixed_point_is_preserved() {
        let t = random_topology(5, 3, 0.5, 2);
        let p = FhnParams::default();
        let ph = PhasePoint::new(vec![0.0; 3], vec![0.0; 3], vec![0.0; 3], vec![0.0; 3]).unwrap();
        let tr = integrate_depth(&ph, &t, &p, 5, &StepOptions::default()).unwrap();
        assert!(tr.points.iter().all(|q| q == &ph));
    }

    #[test]
    fn uncoupled_path_is_scalar_recursion() {
        let t = ResidualTopology::uncoupled(12, 2, 1.0).unwrap();
        let p = turing();
        let kappa = p.activator_diffusion();
        let kv = p.inhibitor_diffusion();
        let init = PhasePoint::new(
            vec![0.1, -0.2],
            vec![0.02, 0.01],
            vec![0.05, 0.0],
            vec![0.0, 0.01],
        )
        .unwrap();
        let tr = integrate_depth(&init, &t, &p, 12, &StepOptions::default()).unwrap();
        let (mut u, mut pp, mut v, mut q) = (
            init.u.clone(),
            init.p.clone(),
            init.v.clone(),
            init.q.clone(),
        );
        for ph in &tr.points[1..] {
            for k in 0..2 {
                u[k] += pp[k];
                v[k] += q[k];
                let f = u[k] - u[k].powi(3) - v[k];
                pp[k] = (kappa * pp[k] - f) / kappa;
                q[k] -= (u[k] - p.alpha * v[k] - p.beta) / kv;
                assert_eq!(ph.u[k], u[k]);
                assert!((ph.p[k] - pp[k]).abs() <= 1e-15 * pp[k].abs().max(1.0));
                assert_eq!(ph.v[k], v[k]);
                assert_eq!(ph.q[k], q[k]);
                // balance κ p^{i+1} = κ p^i - f^{i+1}
            }
            pp.copy_from_slice(&ph.p);
        }
    }

    #[test]
    fn drops_are_consistent_with_layers() {
        let t = random_topology(8, 4, 0.5, 3);
        let init =
            PhasePoint::new(vec![0.1; 4], vec![0.01; 4], vec![0.0; 4], vec![0.0; 4]).unwrap();
        let tr = integrate_depth(&init, &t, &turing(), 8, &StepOptions::default()).unwrap();
        for w in tr.points.windows(2) {
            for k in 0..4 {
                assert_eq!(w[1].u[k], w[0].u[k] + w[0].p[k]);
                assert_eq!(w[1].v[k], w[0].v[k] + w[0].q[k]);
            }
        }
        assert_eq!(
            integrate_depth(&init, &t, &turing(), 1, &StepOptions::default())
                .unwrap()
                .points
                .len(),
            1
        );
    }

    #[test]
    fn seed_slicing() {
        let t = random_topology(3, 2, 0.5, 4);
        let s = NetworkState::new(
            vec![1.0, 2.0, 1.5, 2.5, 0.0, 0.0],
            vec![0.1, 0.2, 0.3, 0.5, 0.0, 0.0],
        )
        .unwrap();
        let r = Relaxation {
            state: s,
            converged: true,
            steps: 3,
        };
        let seed = seed_from_steady_state(&r, &t).unwrap();
        assert_eq!(seed.u, vec![1.0, 2.0]);
        assert_eq!(seed.p, vec![0.5, 0.5]);
        assert_eq!(seed.u[0] + seed.p[0], 1.5);
        assert!((seed.q[1] - 0.3).abs() < 1e-15);
        let uniform = Relaxation {
            state: NetworkState::zeros(6),
            converged: true,
            steps: 1,
        };
        let z = seed_from_steady_state(&uniform, &t).unwrap();
        assert!(z.p.iter().chain(&z.q).all(|&x| x == 0.0));
        let bad = Relaxation {
            converged: false,
            ..r
        };
        assert!(seed_from_steady_state(&bad, &t).is_err());
    }

    #[test]
    fn two_layer_net_matches_time_dynamics() {
        let t = random_topology(2, 4, 0.5, 5);
        let opts = RelaxOptions {
            tol: 1e-11,
            max_steps: 400_000,
            ..RelaxOptions::default()
        };
        let cmp = compare_to_time_dynamics(
            &t,
            &turing(),
            &noise(8, 5),
            &opts,
            &StepOptions::default(),
            1e-3,
        )
        .unwrap();
        assert!(cmp.layers.iter().all(|d| d.u_deviation < 1e-12));
    }

    #[test]
    fn recursion_reproduces_steady_state_turing() {
        let t = random_topology(12, 8, 0.5, 6);
        let opts = RelaxOptions {
            tol: 1e-11,
            max_steps: 400_000,
            ..RelaxOptions::default()
        };
        let cmp = compare_to_time_dynamics(
            &t,
            &turing(),
            &noise(96, 6),
            &opts,
            &StepOptions::default(),
            1e-3,
        )
        .unwrap();
        let seed = seed_from_steady_state(
            &Relaxation {
                state: cmp.steady.clone(),
                converged: true,
                steps: 0,
            },
            &t,
        )
        .unwrap();
        assert!(
            seed.p.iter().any(|x| x.abs() > 1e-3),
            "expected a spatial pattern"
        );
        for d in &cmp.layers[..10] {
            assert!(d.u_deviation < 1e-6, "layer {}: {}", d.layer, d.u_deviation);
        }
        assert!(cmp.first_exceeding.is_none_or(|l| l >= 10));
    }

    #[test]
    fn recursion_reproduces_steady_state_default_params() {
        let t = random_topology(10, 8, 0.5, 7);
        let opts = RelaxOptions {
            tol: 1e-11,
            max_steps: 400_000,
            ..RelaxOptions::default()
        };
        let cmp = compare_to_time_dynamics(
            &t,
            &FhnParams::default(),
            &noise(80, 7),
            &opts,
            &StepOptions::default(),
            1e-3,
        )
        .unwrap();
        assert!(
            cmp.layers.iter().all(|d| d.u_deviation < 1e-6),
            "{:?}",
            cmp.layers
        );
    }

    #[test]
    fn printed_inhibitor_mode_departs_from_time_dynamics() {
        let t = random_topology(10, 8, 0.5, 8);
        let opts = RelaxOptions {
            tol: 1e-11,
            max_steps: 400_000,
            ..RelaxOptions::default()
        };
        let printed = StepOptions {
            inhibitor_mode: InhibitorMode::Printed,
            ghost_half: false,
        };
        let cmp =
            compare_to_time_dynamics(&t, &turing(), &noise(80, 8), &opts, &printed, 1e-3).unwrap();
        assert!(
            cmp.first_exceeding.is_some_and(|l| l < 10),
            "{:?}",
            cmp.layers
        );
    }

    #[test]
    fn zero_couplings_match_scalar_paths() {
        let t = ResidualTopology::uncoupled(16, 3, 1.0).unwrap();
        let opts = RelaxOptions {
            tol: 1e-12,
            max_steps: 400_000,
            ..RelaxOptions::default()
        };
        let cmp = compare_to_time_dynamics(
            &t,
            &turing(),
            &noise(48, 9),
            &opts,
            &StepOptions::default(),
            1e-3,
        )
        .unwrap();
        // each path is an independent ghost-boundary path
        let path = FhnNetwork::new(
            turing(),
            path_laplacian_ghost(16).unwrap(),
            path_laplacian_ghost(16).unwrap(),
        )
        .unwrap();
        let init = noise(48, 9);
        for k in 0..3 {
            let s0 = NetworkState::new(
                (0..16).map(|l| init.u[l * 3 + k]).collect(),
                (0..16).map(|l| init.v[l * 3 + k]).collect(),
            )
            .unwrap();
            let r = path.relax(&s0, &InputCurrent::zeros(16), &opts).unwrap();
            for l in 0..16 {
                assert!((r.state.u[l] - cmp.steady.u[l * 3 + k]).abs() < 1e-9);
            }
        }
        assert!(cmp.layers[..8].iter().all(|d| d.u_deviation < 1e-6));
    }

    #[test]
    fn kirchhoff_balance_on_relaxed_path() {
        let n = 64;
        let l = path_laplacian_ghost(n).unwrap();
        let p = turing();
        let net = FhnNetwork::new(p, l.clone(), l).unwrap();
        let opts = RelaxOptions {
            tol: 1e-10,
            max_steps: 1_000_000,
            ..RelaxOptions::default()
        };
        let r = net
            .relax(&noise(n, 10), &InputCurrent::zeros(n), &opts)
            .unwrap();
        assert!(r.converged);
        assert!(
            r.state.u.iter().any(|x| x.abs() > 1e-2),
            "expected a Turing pattern"
        );
        let res = path_kirchhoff_residuals(&r.state, &p, 1.0);
        assert_eq!(res.activator.len(), n - 2);
        assert!(res.max_abs() <= 10.0 * opts.tol, "{}", res.max_abs());
    }

    #[test]
    fn ghost_half_breaks_agreement() {
        let t = random_topology(10, 8, 0.5, 11);
        let opts = RelaxOptions {
            tol: 1e-11,
            max_steps: 400_000,
            ..RelaxOptions::default()
        };
        let half = StepOptions {
            inhibitor_mode: InhibitorMode::Conservative,
            ghost_half: true,
        };
        let cmp =
            compare_to_time_dynamics(&t, &turing(), &noise(80, 11), &opts, &half, 1e-3).unwrap();
        assert!(cmp.layers[2].u_deviation > 1e-4, "{:?}", cmp.layers);
    }

    #[test]
    fn spatial_velocity_examples() {
        let l = path_laplacian_ghost(6).unwrap();
        assert!(spatial_velocity(&[0.0; 6], &l)
            .unwrap()
            .iter()
            .all(|&x| x == 0.0));
        let u = vec![0.3, -0.1, 0.2, 0.5, 0.0, -0.4];
        assert_eq!(spatial_velocity(&u, &DenseMatrix::identity(6)).unwrap(), u);
        let e = spatial_velocity(&u, &l).unwrap();
        let lhs = sqrt_psd(&l).unwrap().matvec(&e).unwrap();
        let rhs = l.matvec(&u).unwrap();
        assert!(lhs.iter().zip(&rhs).all(|(a, b)| (a - b).abs() < 1e-8));
        let free = crate::graph::WeightedGraph::path(4, 1.0)
            .unwrap()
            .laplacian();
        assert!(matches!(
            spatial_velocity(&[1.0; 4], &free),
            Err(Error::NotPsd { .. })
        ));
    }

    #[test]
    fn spatial_hamiltonian_examples() {
        let p = FhnParams::default();
        assert_eq!(
            spatial_hamiltonian(&[0.0; 3], &[0.0; 3], &[0.0; 3], &[0.0; 3], &p),
            0.0
        );
        let classic = FhnParams {
            formulation: Formulation::Classic,
            ..p
        };
        let (u, e) = ([0.4, -0.2], [0.3, 0.1]);
        let h = spatial_hamiltonian(&u, &[0.0, 0.0], &e, &[0.0, 0.0], &classic);
        let f: f64 = u.iter().map(|&x| classic.free_energy_density(x, 0.0)).sum();
        assert!((h - (0.5 * (0.09 + 0.01) + f)).abs() < 1e-15);
    }

    #[test]
    fn csv_layout() {
        let t = ResidualTopology::uncoupled(3, 2, 1.0).unwrap();
        let init = PhasePoint::new(vec![0.0; 2], vec![0.0; 2], vec![0.0; 2], vec![0.0; 2]).unwrap();
        let tr = integrate_depth(&init, &t, &turing(), 3, &StepOptions::default()).unwrap();
        let csv = tr.to_csv();
        assert!(csv.starts_with("layer,node,u,p,v,q\n0,0,0,0,0,0\n"));
        assert_eq!(csv.lines().count(), 7);
    }
}
