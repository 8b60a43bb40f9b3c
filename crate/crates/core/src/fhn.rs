//! Diffusive FitzHugh-Nagumo dynamics on a weighted graph.
//!
//! The model is kept in skew-gradient normal form
//!
//! ```text
//! T [u_t; v_t] = -D [L1 u; L2 v] + Q ∇F(u, v) - [I_u; 0],   Q = diag(1, -1)
//! ```
//!
//! with free energy density `F = u²/2 - u⁴/4 - uv + αv²/2 + βv`. The
//! reaction `Q∇F` is then `(u - u³ - v, u - αv - β)` and the inhibitor rate
//! `ε` lives in `T` and `D`: the inhibitor time constant is `τ₂/ε` and its
//! diffusion coefficient `d₂/ε`. One explicit Euler step of this form is the
//! familiar update `v ← v + (dt/τ₂)(-d₂ L₂ v + ε(u - αv - β))`.
//!
//! Laplacians are positive semidefinite (`L = BᵀYB`), so diffusion enters
//! as `-d L u`.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::{inverse, max_abs, DenseMatrix, SparseRows};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Formulation {
    /// Activator diffusion coefficient is `d1`.
    Classic,
    /// Activator diffusion coefficient is `δ² d1`, i.e. `δ²Δu + u - u³ - v`.
    SpatialDelta,
}

/// Scalar model constants. Defaults are the trained-network values
/// `δ, ε, α, β = 0.75, 0.85, 1.08, 0.0` with unit diffusion and time scales.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FhnParams {
    pub delta: f64,
    pub epsilon: f64,
    pub alpha: f64,
    pub beta: f64,
    pub d1: f64,
    pub d2: f64,
    pub tau1: f64,
    pub tau2: f64,
    pub formulation: Formulation,
}

impl Default for FhnParams {
    fn default() -> Self {
        Self {
            delta: 0.75,
            epsilon: 0.85,
            alpha: 1.08,
            beta: 0.0,
            d1: 1.0,
            d2: 1.0,
            tau1: 1.0,
            tau2: 1.0,
            formulation: Formulation::SpatialDelta,
        }
    }
}

impl FhnParams {
    /// A regime whose homogeneous state is Turing unstable, giving a
    /// stationary spatial pattern.
    pub fn turing() -> Self {
        Self {
            delta: 0.5,
            epsilon: 1.5,
            alpha: 0.9,
            beta: 0.0,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let named = [
            ("delta", self.delta),
            ("epsilon", self.epsilon),
            ("alpha", self.alpha),
            ("beta", self.beta),
            ("d1", self.d1),
            ("d2", self.d2),
            ("tau1", self.tau1),
            ("tau2", self.tau2),
        ];
        for (name, x) in named {
            if !x.is_finite() {
                return Err(Error::Config {
                    path: format!("fhn.{name}"),
                    message: format!("must be finite, got {x}"),
                });
            }
        }
        for (name, x) in [
            ("epsilon", self.epsilon),
            ("d1", self.d1),
            ("d2", self.d2),
            ("tau1", self.tau1),
            ("tau2", self.tau2),
        ] {
            if x <= 0.0 {
                return Err(Error::Config {
                    path: format!("fhn.{name}"),
                    message: format!("must be positive, got {x}"),
                });
            }
        }
        Ok(())
    }

    /// Coefficient multiplying `-L1 u` in the activator equation.
    pub fn activator_diffusion(&self) -> f64 {
        match self.formulation {
            Formulation::Classic => self.d1,
            Formulation::SpatialDelta => self.delta * self.delta * self.d1,
        }
    }

    /// Coefficient multiplying `-L2 v` in the normalized inhibitor equation.
    pub fn inhibitor_diffusion(&self) -> f64 {
        self.d2 / self.epsilon
    }

    pub fn activator_time_constant(&self) -> f64 {
        self.tau1
    }

    /// Normalized inhibitor time constant `τ₂/ε`.
    pub fn inhibitor_time_constant(&self) -> f64 {
        self.tau2 / self.epsilon
    }

    pub fn free_energy_density(&self, u: f64, v: f64) -> f64 {
        0.5 * u * u - 0.25 * u.powi(4) - u * v + 0.5 * self.alpha * v * v + self.beta * v
    }

    /// Activator reaction `∂F/∂u = u - u³ - v`.
    pub fn activator_reaction(&self, u: f64, v: f64) -> f64 {
        u - u * u * u - v
    }

    /// Inhibitor reaction `-∂F/∂v = u - αv - β`.
    pub fn inhibitor_reaction(&self, u: f64, v: f64) -> f64 {
        u - self.alpha * v - self.beta
    }
}

/// Activator and inhibitor values over all nodes.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NetworkState {
    pub u: Vec<f64>,
    pub v: Vec<f64>,
}

impl NetworkState {
    pub fn zeros(n: usize) -> Self {
        Self {
            u: vec![0.0; n],
            v: vec![0.0; n],
        }
    }

    pub fn new(u: Vec<f64>, v: Vec<f64>) -> Result<Self> {
        if u.len() != v.len() {
            return Err(Error::dims(
                "NetworkState inhibitor length",
                u.len(),
                v.len(),
            ));
        }
        let s = Self { u, v };
        if !s.is_finite() {
            return Err(Error::NonFinite {
                context: "NetworkState".into(),
            });
        }
        Ok(s)
    }

    pub fn len(&self) -> usize {
        self.u.len()
    }

    pub fn is_empty(&self) -> bool {
        self.u.is_empty()
    }

    pub fn is_finite(&self) -> bool {
        self.u.iter().chain(&self.v).all(|x| x.is_finite())
    }
}

/// Constant current injected into the activator nodes.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InputCurrent(pub Vec<f64>);

impl InputCurrent {
    pub fn zeros(n: usize) -> Self {
        Self(vec![0.0; n])
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }
}

/// Free energy `Σ_i F(u_i, v_i)`.
pub fn free_energy(s: &NetworkState, p: &FhnParams) -> f64 {
    s.u.iter()
        .zip(&s.v)
        .map(|(&u, &v)| p.free_energy_density(u, v))
        .sum()
}

/// The free energy density exactly as it is usually printed for the spatial
/// formulation, `αu²/2 - αu⁴/4 - uv + βv²/2`. Its skew gradient reproduces
/// the reaction only when `α = 1` and `β = 0`, so the dynamics never use it.
pub fn printed_free_energy(s: &NetworkState, p: &FhnParams) -> f64 {
    s.u.iter()
        .zip(&s.v)
        .map(|(&u, &v)| {
            0.5 * p.alpha * u * u - 0.25 * p.alpha * u.powi(4) - u * v + 0.5 * p.beta * v * v
        })
        .sum()
}

#[derive(Debug, Clone, PartialEq)]
pub struct Reaction {
    pub fu: Vec<f64>,
    pub fv: Vec<f64>,
}

/// Skew-gradient reaction `Q ∇F`.
pub fn reaction(s: &NetworkState, p: &FhnParams) -> Reaction {
    let fu =
        s.u.iter()
            .zip(&s.v)
            .map(|(&u, &v)| p.activator_reaction(u, v))
            .collect();
    let fv =
        s.u.iter()
            .zip(&s.v)
            .map(|(&u, &v)| p.inhibitor_reaction(u, v))
            .collect();
    Reaction { fu, fv }
}

/// Diagonals of the reaction Jacobian: `f' = ∂fu/∂u = 1 - 3u²` and
/// `γ = -∂fv/∂v = α`, so that the linearization has blocks
/// `[[-d1 L1 + f', -I], [I, -d2 L2 - γ]]`.
#[derive(Debug, Clone, PartialEq)]
pub struct JacobianBlocks {
    pub fprime: Vec<f64>,
    pub gamma: Vec<f64>,
}

pub fn jacobian_blocks(s: &NetworkState, p: &FhnParams) -> JacobianBlocks {
    JacobianBlocks {
        fprime: s.u.iter().map(|&u| 1.0 - 3.0 * u * u).collect(),
        gamma: vec![p.alpha; s.u.len()],
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RelaxOptions {
    pub dt: f64,
    /// Convergence when `‖Δu‖∞ + ‖Δv‖∞ <= tol * dt`.
    pub tol: f64,
    pub max_steps: usize,
}

impl Default for RelaxOptions {
    fn default() -> Self {
        Self {
            dt: 0.1,
            tol: 1e-8,
            max_steps: 200_000,
        }
    }
}

/// Result of time-stepping towards a steady state.
#[derive(Debug, Clone, PartialEq)]
pub struct Relaxation {
    pub state: NetworkState,
    pub converged: bool,
    pub steps: usize,
}

#[derive(Debug, Clone)]
pub struct ResponseMatrix {
    /// `∂u_s/∂I_u` at the steady state.
    pub matrix: DenseMatrix,
    /// `‖R - Rᵀ‖_max / ‖R‖_max`.
    pub symmetry_defect: f64,
}

/// Recorded states of a simulation.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Trajectory {
    pub records: Vec<TrajectoryRecord>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct TrajectoryRecord {
    pub step: usize,
    pub u: Vec<f64>,
    pub v: Vec<f64>,
}

impl Trajectory {
    /// CSV with header `step,node,u,v`, rows ordered by step then node.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("step,node,u,v\n");
        for r in &self.records {
            for (i, (u, v)) in r.u.iter().zip(&r.v).enumerate() {
                out.push_str(&format!("{},{},{},{}\n", r.step, i, u, v));
            }
        }
        out
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }
}

/// An FHN network: parameters plus activator and inhibitor Laplacians.
#[derive(Debug, Clone)]
pub struct FhnNetwork {
    params: FhnParams,
    l1: DenseMatrix,
    l2: DenseMatrix,
    l1_op: SparseRows,
    l2_op: SparseRows,
}

impl FhnNetwork {
    pub fn new(params: FhnParams, l1: DenseMatrix, l2: DenseMatrix) -> Result<Self> {
        params.validate()?;
        if !l1.is_square() {
            return Err(Error::dims("L1 (square)", l1.rows(), l1.cols()));
        }
        if l2.shape() != l1.shape() {
            return Err(Error::dims("L2 size", l1.rows(), l2.rows()));
        }
        for (name, l) in [("L1", &l1), ("L2", &l2)] {
            if !l.all_finite() {
                return Err(Error::NonFinite {
                    context: name.into(),
                });
            }
            if !l.is_symmetric() {
                return Err(Error::NotSymmetric {
                    defect: l.symmetry_defect(),
                });
            }
        }
        let l1_op = SparseRows::from_dense(&l1);
        let l2_op = SparseRows::from_dense(&l2);
        Ok(Self {
            params,
            l1,
            l2,
            l1_op,
            l2_op,
        })
    }

    pub fn params(&self) -> &FhnParams {
        &self.params
    }

    pub fn l1(&self) -> &DenseMatrix {
        &self.l1
    }

    pub fn l2(&self) -> &DenseMatrix {
        &self.l2
    }

    pub fn node_count(&self) -> usize {
        self.l1.rows()
    }

    fn check(&self, s: &NetworkState, input: &InputCurrent) -> Result<()> {
        let n = self.node_count();
        if s.u.len() != n || s.v.len() != n {
            return Err(Error::dims("network state", n, s.u.len().max(s.v.len())));
        }
        if input.0.len() != n {
            return Err(Error::dims("input current", n, input.0.len()));
        }
        Ok(())
    }

    /// Normalized right-hand side `(-d1 L1 u + fu - I, -d2' L2 v + fv)`.
    fn rhs_into(&self, s: &NetworkState, input: &[f64], du: &mut [f64], dv: &mut [f64]) {
        let p = &self.params;
        let (da, di) = (p.activator_diffusion(), p.inhibitor_diffusion());
        self.l1_op.apply(&s.u, du);
        self.l2_op.apply(&s.v, dv);
        for i in 0..s.u.len() {
            let (u, v) = (s.u[i], s.v[i]);
            du[i] = -da * du[i] + p.activator_reaction(u, v) - input[i];
            dv[i] = -di * dv[i] + p.inhibitor_reaction(u, v);
        }
    }

    /// Stationarity residuals of the activator and inhibitor equations.
    pub fn rhs(&self, s: &NetworkState, input: &InputCurrent) -> Result<(Vec<f64>, Vec<f64>)> {
        self.check(s, input)?;
        let n = self.node_count();
        let (mut du, mut dv) = (vec![0.0; n], vec![0.0; n]);
        self.rhs_into(s, &input.0, &mut du, &mut dv);
        Ok((du, dv))
    }

    /// `max(‖-d1 L1 u + fu - I‖∞, ‖-d2' L2 v + fv‖∞)`.
    pub fn stationarity_residual(&self, s: &NetworkState, input: &InputCurrent) -> Result<f64> {
        let (du, dv) = self.rhs(s, input)?;
        Ok(max_abs(&du).max(max_abs(&dv)))
    }

    /// One explicit Euler step in place; returns `‖Δu‖∞ + ‖Δv‖∞`.
    fn advance(
        &self,
        s: &mut NetworkState,
        input: &[f64],
        dt: f64,
        scratch: &mut (Vec<f64>, Vec<f64>),
        step_index: usize,
    ) -> Result<f64> {
        let (du, dv) = scratch;
        self.rhs_into(s, input, du, dv);
        let (ku, kv) = (
            dt / self.params.activator_time_constant(),
            dt / self.params.inhibitor_time_constant(),
        );
        let (mut mu, mut mv) = (0.0_f64, 0.0_f64);
        for i in 0..s.u.len() {
            let (a, b) = (ku * du[i], kv * dv[i]);
            s.u[i] += a;
            s.v[i] += b;
            mu = mu.max(a.abs());
            mv = mv.max(b.abs());
        }
        let disp = mu + mv;
        if !disp.is_finite() || !s.is_finite() {
            return Err(Error::Divergence {
                context: "FHN time step".into(),
                step: step_index,
            });
        }
        Ok(disp)
    }

    /// One explicit Euler step of size `dt`.
    pub fn step(&self, s: &NetworkState, input: &InputCurrent, dt: f64) -> Result<NetworkState> {
        self.check(s, input)?;
        if !(dt > 0.0) {
            return Err(Error::InvalidArgument(format!(
                "dt must be positive, got {dt}"
            )));
        }
        let n = self.node_count();
        let mut next = s.clone();
        let mut scratch = (vec![0.0; n], vec![0.0; n]);
        self.advance(&mut next, &input.0, dt, &mut scratch, 0)?;
        Ok(next)
    }

    /// Steps until the per-step displacement drops below `tol * dt`.
    pub fn relax(
        &self,
        s0: &NetworkState,
        input: &InputCurrent,
        opts: &RelaxOptions,
    ) -> Result<Relaxation> {
        self.check(s0, input)?;
        if !(opts.dt > 0.0) {
            return Err(Error::InvalidArgument(format!(
                "dt must be positive, got {}",
                opts.dt
            )));
        }
        let n = self.node_count();
        let mut s = s0.clone();
        let mut scratch = (vec![0.0; n], vec![0.0; n]);
        for step in 0..opts.max_steps {
            let disp = self.advance(&mut s, &input.0, opts.dt, &mut scratch, step)?;
            if disp <= opts.tol * opts.dt {
                return Ok(Relaxation {
                    state: s,
                    converged: true,
                    steps: step + 1,
                });
            }
        }
        Ok(Relaxation {
            state: s,
            converged: false,
            steps: opts.max_steps,
        })
    }

    /// Runs `steps` Euler steps, recording every `record_every`-th state
    /// (including the initial one).
    pub fn simulate(
        &self,
        s0: &NetworkState,
        input: &InputCurrent,
        dt: f64,
        steps: usize,
        record_every: usize,
    ) -> Result<Trajectory> {
        self.check(s0, input)?;
        let every = record_every.max(1);
        let n = self.node_count();
        let mut s = s0.clone();
        let mut scratch = (vec![0.0; n], vec![0.0; n]);
        let mut records = vec![TrajectoryRecord {
            step: 0,
            u: s.u.clone(),
            v: s.v.clone(),
        }];
        for step in 1..=steps {
            self.advance(&mut s, &input.0, dt, &mut scratch, step)?;
            if step % every == 0 {
                records.push(TrajectoryRecord {
                    step,
                    u: s.u.clone(),
                    v: s.v.clone(),
                });
            }
        }
        Ok(Trajectory { records })
    }

    /// Jacobian of the normalized right-hand side with respect to `(u, v)`.
    pub fn jacobian(&self, s: &NetworkState) -> DenseMatrix {
        let n = self.node_count();
        let p = &self.params;
        let blocks = jacobian_blocks(s, p);
        let (da, di) = (p.activator_diffusion(), p.inhibitor_diffusion());
        let mut j = DenseMatrix::zeros(2 * n, 2 * n);
        for r in 0..n {
            for c in 0..n {
                j[(r, c)] = -da * self.l1[(r, c)];
                j[(n + r, n + c)] = -di * self.l2[(r, c)];
            }
            j[(r, r)] += blocks.fprime[r];
            j[(r, n + r)] = -1.0;
            j[(n + r, r)] = 1.0;
            j[(n + r, n + r)] -= blocks.gamma[r];
        }
        j
    }

    /// Linear response `∂u_s/∂I_u = (-d1 L1 + f' - (d2' L2 + γ)⁻¹)⁻¹` at a
    /// converged steady state.
    pub fn response_matrix(&self, steady: &Relaxation) -> Result<ResponseMatrix> {
        if !steady.converged {
            return Err(Error::Unconverged {
                context: "response matrix requires a converged steady state".into(),
                steps: steady.steps,
            });
        }
        let s = &steady.state;
        let n = self.node_count();
        let p = &self.params;
        let blocks = jacobian_blocks(s, p);
        let mut inner = self.l2.scale(p.inhibitor_diffusion());
        for i in 0..n {
            inner[(i, i)] += blocks.gamma[i];
        }
        let inner_inv = inverse(&inner).map_err(|e| match e {
            Error::Singular(m) => Error::Singular(format!("inhibitor block d2 L2 + gamma: {m}")),
            other => other,
        })?;
        let mut outer = self.l1.scale(-p.activator_diffusion());
        for i in 0..n {
            outer[(i, i)] += blocks.fprime[i];
        }
        let outer = outer.sub(&inner_inv)?;
        let matrix = inverse(&outer).map_err(|e| match e {
            Error::Singular(m) => Error::Singular(format!("activator Schur complement: {m}")),
            other => other,
        })?;
        let symmetry_defect = matrix.symmetry_defect() / matrix.max_abs().max(f64::MIN_POSITIVE);
        Ok(ResponseMatrix {
            matrix,
            symmetry_defect,
        })
    }

    /// Finite-difference response: column `j` is
    /// `(u_s(I + eps e_j) - u_s(I - eps e_j)) / (2 eps)`, each steady state
    /// re-relaxed from `base`.
    pub fn response_probe(
        &self,
        base: &Relaxation,
        input: &InputCurrent,
        eps: f64,
        opts: &RelaxOptions,
    ) -> Result<DenseMatrix> {
        let n = self.node_count();
        let mut probe = DenseMatrix::zeros(n, n);
        for j in 0..n {
            let mut cols = [Vec::new(), Vec::new()];
            for (slot, sign) in [1.0, -1.0].into_iter().enumerate() {
                let mut perturbed = input.clone();
                perturbed.0[j] += sign * eps;
                let r = self.relax(&base.state, &perturbed, opts)?;
                if !r.converged {
                    return Err(Error::Unconverged {
                        context: format!("response probe column {j}"),
                        steps: r.steps,
                    });
                }
                cols[slot] = r.state.u;
            }
            for i in 0..n {
                probe[(i, j)] = (cols[0][i] - cols[1][i]) / (2.0 * eps);
            }
        }
        Ok(probe)
    }
}

/// `‖A - Aᵀ‖_max / ‖A‖_max`.
pub fn relative_asymmetry(a: &DenseMatrix) -> f64 {
    a.symmetry_defect() / a.max_abs().max(f64::MIN_POSITIVE)
}
