//! Layer-wise inference for layered Hopfield-type energy models.
//!
//! Energy, for layers `u^0..u^{L-1}` of constant width joined by square
//! weights `W^l` between layers `l` and `l+1`:
//!
//! ```text
//! E = ½‖u‖² - Σ_l ρ(u^l)ᵀ W^l ρ(u^{l+1}) - Σ_l b^lᵀ ρ(u^l)
//! ```
//!
//! In the variables `v = ρ(u)` the stationarity condition at layer `l+1`
//! becomes a recursion in the layer drop `p^l = v^{l+1} - v^l`:
//!
//! ```text
//! v^{l+1} = v^l + p^l
//! p^{l+1} = M f(v^{l+1}) + N p^l - (N + I) v^{l+1}
//! M = (W^{l+1})⁻¹,  N = M W^lᵀ,  f(v) = ρ⁻¹(v)/ρ'(ρ⁻¹(v)) - b
//! ```

use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::dataio::{read_blob, write_atomic, write_blob, BlobRef};
use crate::error::{Error, Result};
use crate::numerics::{
    condition_number, inverse, max_abs, solve, DenseMatrix, NEAR_SINGULAR_CONDITION,
};

/// Strictly increasing activation.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Activation {
    /// Logistic function, range `(0, 1)`.
    Sigmoid,
    /// Hyperbolic tangent, range `(-1, 1)`, `ρ(0) = 0`.
    Tanh,
}

impl Activation {
    pub fn apply(self, u: f64) -> f64 {
        match self {
            Activation::Sigmoid => 1.0 / (1.0 + (-u).exp()),
            Activation::Tanh => u.tanh(),
        }
    }

    pub fn derivative(self, u: f64) -> f64 {
        match self {
            Activation::Sigmoid => {
                let s = self.apply(u);
                s * (1.0 - s)
            }
            Activation::Tanh => {
                let t = u.tanh();
                1.0 - t * t
            }
        }
    }

    pub fn second_derivative(self, u: f64) -> f64 {
        match self {
            Activation::Sigmoid => {
                let s = self.apply(u);
                s * (1.0 - s) * (1.0 - 2.0 * s)
            }
            Activation::Tanh => {
                let t = u.tanh();
                -2.0 * t * (1.0 - t * t)
            }
        }
    }

    /// Open range of the activation.
    pub fn range(self) -> (f64, f64) {
        match self {
            Activation::Sigmoid => (0.0, 1.0),
            Activation::Tanh => (-1.0, 1.0),
        }
    }

    pub fn inverse(self, v: f64, context: &str) -> Result<f64> {
        let (lo, hi) = self.range();
        if !(v > lo && v < hi) {
            return Err(Error::Domain {
                context: context.into(),
                value: v,
            });
        }
        let u = match self {
            Activation::Sigmoid => (v / (1.0 - v)).ln(),
            Activation::Tanh => v.atanh(),
        };
        if !u.is_finite() {
            return Err(Error::Domain {
                context: context.into(),
                value: v,
            });
        }
        Ok(u)
    }
}

/// `f(v) = ρ⁻¹(v)/ρ'(ρ⁻¹(v)) - b`, so that `∂E/∂v = f(v) - (neighbour
/// drive)`.
pub fn local_nonlinearity(v: f64, rho: Activation, b: f64) -> Result<f64> {
    let u = rho.inverse(v, "local nonlinearity")?;
    let d = rho.derivative(u);
    if d <= 0.0 {
        return Err(Error::Domain {
            context: "local nonlinearity (vanishing slope)".into(),
            value: v,
        });
    }
    Ok(u / d - b)
}

/// `df/dv = (ρ' - uρ'')/ρ'³` at `u = ρ⁻¹(v)`.
pub fn local_nonlinearity_slope(v: f64, rho: Activation) -> Result<f64> {
    let u = rho.inverse(v, "local nonlinearity slope")?;
    let d = rho.derivative(u);
    Ok((d - u * rho.second_derivative(u)) / (d * d * d))
}

/// Layered energy model of constant width.
#[derive(Debug, Clone, PartialEq)]
pub struct HopfieldEbm {
    width: usize,
    weights: Vec<DenseMatrix>,
    biases: Vec<Vec<f64>>,
    activation: Activation,
}

impl HopfieldEbm {
    pub fn new(
        weights: Vec<DenseMatrix>,
        biases: Vec<Vec<f64>>,
        activation: Activation,
    ) -> Result<Self> {
        if weights.is_empty() {
            return Err(Error::InvalidArgument(
                "need at least one weight matrix".into(),
            ));
        }
        let width = weights[0].rows();
        for (l, w) in weights.iter().enumerate() {
            if w.shape() != (width, width) {
                return Err(Error::InvalidArgument(format!(
                    "weight {l} has shape {:?}; layers must share width {width}",
                    w.shape()
                )));
            }
            if !w.all_finite() {
                return Err(Error::NonFinite {
                    context: format!("weight {l}"),
                });
            }
        }
        if biases.len() != weights.len() + 1 {
            return Err(Error::dims("bias layers", weights.len() + 1, biases.len()));
        }
        for b in &biases {
            if b.len() != width {
                return Err(Error::dims("bias width", width, b.len()));
            }
        }
        Ok(Self {
            width,
            weights,
            biases,
            activation,
        })
    }

    /// Weights `scale × N(0, 1)` and biases `bias_scale × N(0, 1)`.
    pub fn random(
        depth: usize,
        width: usize,
        scale: f64,
        bias_scale: f64,
        activation: Activation,
        seed: u64,
    ) -> Result<Self> {
        if depth < 2 || width == 0 {
            return Err(Error::InvalidArgument(
                "need depth >= 2 and width >= 1".into(),
            ));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut normal = || -> f64 { StandardNormal.sample(&mut rng) };
        let weights = (0..depth - 1)
            .map(|_| DenseMatrix::from_fn(width, width, |_, _| scale * normal()))
            .collect();
        let biases = (0..depth)
            .map(|_| (0..width).map(|_| bias_scale * normal()).collect())
            .collect();
        Self::new(weights, biases, activation)
    }

    pub fn depth(&self) -> usize {
        self.biases.len()
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn weights(&self) -> &[DenseMatrix] {
        &self.weights
    }

    pub fn biases(&self) -> &[Vec<f64>] {
        &self.biases
    }

    pub fn activation(&self) -> Activation {
        self.activation
    }

    fn layer<'a>(&self, x: &'a [f64], l: usize) -> &'a [f64] {
        &x[l * self.width..(l + 1) * self.width]
    }

    fn check(&self, u: &[f64]) -> Result<()> {
        let n = self.depth() * self.width;
        if u.len() != n {
            return Err(Error::dims("EBM state", n, u.len()));
        }
        Ok(())
    }

    fn rho(&self, u: &[f64]) -> Vec<f64> {
        u.iter().map(|&x| self.activation.apply(x)).collect()
    }

    pub fn energy(&self, u: &[f64]) -> Result<f64> {
        self.check(u)?;
        let r = self.rho(u);
        let mut e = 0.5 * u.iter().map(|x| x * x).sum::<f64>();
        for (l, w) in self.weights.iter().enumerate() {
            let wr = w.matvec(self.layer(&r, l + 1))?;
            e -= self
                .layer(&r, l)
                .iter()
                .zip(&wr)
                .map(|(a, b)| a * b)
                .sum::<f64>();
        }
        for (l, b) in self.biases.iter().enumerate() {
            e -= self
                .layer(&r, l)
                .iter()
                .zip(b)
                .map(|(a, b)| a * b)
                .sum::<f64>();
        }
        Ok(e)
    }

    /// `∂E/∂u^l = u^l - ρ'(u^l)(W^l ρ^{l+1} + W^{l-1}ᵀ ρ^{l-1} + b^l)`.
    pub fn energy_gradient(&self, u: &[f64]) -> Result<Vec<f64>> {
        self.check(u)?;
        let r = self.rho(u);
        let drive = self.drive(&r)?;
        Ok(u.iter()
            .zip(&drive)
            .map(|(&x, &d)| x - self.activation.derivative(x) * d)
            .collect())
    }

    /// `W^l v^{l+1} + W^{l-1}ᵀ v^{l-1} + b^l` for every layer.
    fn drive(&self, v: &[f64]) -> Result<Vec<f64>> {
        let mut d: Vec<f64> = self.biases.concat();
        let w = self.width;
        for (l, wl) in self.weights.iter().enumerate() {
            let down = wl.matvec(self.layer(v, l + 1))?;
            let up = wl.transpose_matvec(self.layer(v, l))?;
            for k in 0..w {
                d[l * w + k] += down[k];
                d[(l + 1) * w + k] += up[k];
            }
        }
        Ok(d)
    }

    /// `∂E/∂v = f(v) - W^l v^{l+1} - W^{l-1}ᵀ v^{l-1}` with `v = ρ(u)`.
    pub fn energy_gradient_v(&self, v: &[f64]) -> Result<Vec<f64>> {
        self.check(v)?;
        let mut d = self.drive(v)?;
        for (i, o) in d.iter_mut().enumerate() {
            *o = local_nonlinearity(v[i], self.activation, 0.0)? - *o;
        }
        Ok(d)
    }
}

/// Relaxation outcome.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct EbmRelaxation {
    pub u: Vec<f64>,
    pub converged: bool,
    pub steps: usize,
    pub energy: f64,
    /// Energy never increased by more than `1e-12 (1 + |E|)` in one step.
    pub energy_monotone: bool,
    pub max_energy_increase: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EbmRelaxOptions {
    pub dt: f64,
    pub tol: f64,
    pub max_steps: usize,
}

/// Gradient descent on `E` with layer 0 clamped to `x`, from `u = 0`
/// elsewhere, until `‖∂E/∂u‖∞ <= tol` on the free layers; the converged
/// state is then refined by Newton iterations on the balance in `v`.
pub fn relax_ebm(net: &HopfieldEbm, x: &[f64], opts: &EbmRelaxOptions) -> Result<EbmRelaxation> {
    if x.len() != net.width {
        return Err(Error::dims("clamped input", net.width, x.len()));
    }
    let w = net.width;
    let mut u = vec![0.0; net.depth() * w];
    u[..w].copy_from_slice(x);
    let mut energy = net.energy(&u)?;
    let mut max_increase = f64::NEG_INFINITY;
    for step in 0..opts.max_steps {
        let g = net.energy_gradient(&u)?;
        if max_abs(&g[w..]) <= opts.tol {
            polish(net, &mut u)?;
            return Ok(EbmRelaxation {
                u,
                converged: true,
                steps: step,
                energy,
                energy_monotone: max_increase <= 1e-12 * (1.0 + energy.abs()),
                max_energy_increase: max_increase.max(0.0),
            });
        }
        for i in w..u.len() {
            u[i] -= opts.dt * g[i];
        }
        let next = net.energy(&u)?;
        if !next.is_finite() {
            return Err(Error::Divergence {
                context: "EBM relaxation".into(),
                step,
            });
        }
        max_increase = max_increase.max(next - energy);
        energy = next;
    }
    Ok(EbmRelaxation {
        u,
        converged: false,
        steps: opts.max_steps,
        energy,
        energy_monotone: max_increase <= 1e-12 * (1.0 + energy.abs()),
        max_energy_increase: max_increase.max(0.0),
    })
}

/// Newton iterations on the free-layer balance `f(v) + b - drive = 0`,
/// keeping the iterate with the smallest residual.
fn polish(net: &HopfieldEbm, u: &mut [f64]) -> Result<()> {
    let w = net.width;
    let n = u.len() - w;
    let residual = |v: &[f64]| -> Result<Vec<f64>> {
        let d = net.drive(v)?;
        (w..v.len())
            .map(|i| Ok(local_nonlinearity(v[i], net.activation, 0.0)? - d[i]))
            .collect()
    };
    let mut v = net.rho(u);
    let mut r = residual(&v)?;
    for _ in 0..20 {
        let mut jac = DenseMatrix::zeros(n, n);
        for i in 0..n {
            jac[(i, i)] = local_nonlinearity_slope(v[w + i], net.activation)?;
        }
        for (l, wl) in net.weights.iter().enumerate() {
            for a in 0..w {
                for b in 0..w {
                    let (i, j) = (l * w + a, (l + 1) * w + b);
                    if i >= w {
                        jac[(i - w, j - w)] -= wl[(a, b)];
                        jac[(j - w, i - w)] -= wl[(a, b)];
                    }
                }
            }
        }
        let step = match solve(&jac, &r) {
            Ok(s) => s,
            Err(_) => break,
        };
        let mut trial = v.clone();
        for i in 0..n {
            trial[w + i] -= step[i];
        }
        let next = match residual(&trial) {
            Ok(x) => x,
            Err(_) => break,
        };
        if max_abs(&next) >= max_abs(&r) {
            break;
        }
        v = trial;
        r = next;
    }
    for i in w..u.len() {
        u[i] = net.activation.inverse(v[i], "EBM polish")?;
    }
    Ok(())
}

/// `M = (W^{l+1})⁻¹` and `N = M W^lᵀ`.
#[derive(Debug, Clone, PartialEq)]
pub struct EbmRecursionMatrices {
    pub m: DenseMatrix,
    pub n: DenseMatrix,
}

pub fn ebm_recursion_matrices(
    wl: &DenseMatrix,
    wlp1: &DenseMatrix,
    layer: usize,
) -> Result<EbmRecursionMatrices> {
    let cond = condition_number(wlp1)?;
    if !cond.is_finite() {
        return Err(Error::Singular(format!("W^{} at layer {layer}", layer + 1)));
    }
    if cond > NEAR_SINGULAR_CONDITION {
        return Err(Error::IllConditioned {
            context: format!("W^{} at layer {layer}", layer + 1),
            condition: cond,
        });
    }
    let m = inverse(wlp1).map_err(|e| match e {
        Error::Singular(msg) => Error::Singular(format!("W^{} at layer {layer}: {msg}", layer + 1)),
        other => other,
    })?;
    let n = m.matmul(&wl.transpose())?;
    Ok(EbmRecursionMatrices { m, n })
}

/// Transformed activations and their layer drop.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EbmPhasePoint {
    pub v: Vec<f64>,
    pub p: Vec<f64>,
}

/// One step from layer `layer` to `layer + 1`; `bias` is `b^{l+1}`.
pub fn ebm_layer_step(
    ph: &EbmPhasePoint,
    mats: &EbmRecursionMatrices,
    rho: Activation,
    bias: &[f64],
    layer: usize,
) -> Result<EbmPhasePoint> {
    let v: Vec<f64> = ph.v.iter().zip(&ph.p).map(|(a, b)| a + b).collect();
    let f = v
        .iter()
        .zip(bias)
        .map(|(&x, &b)| {
            local_nonlinearity(x, rho, b).map_err(|e| match e {
                Error::Domain { value, .. } => Error::Domain {
                    context: format!("EBM recursion layer {}", layer + 1),
                    value,
                },
                other => other,
            })
        })
        .collect::<Result<Vec<f64>>>()?;
    let mf = mats.m.matvec(&f)?;
    let np = mats.n.matvec(&ph.p)?;
    let nv = mats.n.matvec(&v)?;
    let p = (0..v.len()).map(|k| mf[k] + np[k] - nv[k] - v[k]).collect();
    Ok(EbmPhasePoint { v, p })
}

/// Seeds `(ρ(u⁰), ρ(u¹) - ρ(u⁰))` and runs the recursion through all layers.
pub fn ebm_integrate(net: &HopfieldEbm, seed: &EbmPhasePoint) -> Result<Vec<EbmPhasePoint>> {
    let mut points = vec![seed.clone()];
    for l in 0..net.depth() - 2 {
        let mats = ebm_recursion_matrices(&net.weights[l], &net.weights[l + 1], l)?;
        let next = ebm_layer_step(&points[l], &mats, net.activation, &net.biases[l + 1], l)?;
        points.push(next);
    }
    // last layer from the final drop
    let last = points.last().unwrap();
    points.push(EbmPhasePoint {
        v: last.v.iter().zip(&last.p).map(|(a, b)| a + b).collect(),
        p: vec![0.0; net.width],
    });
    Ok(points)
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct EbmReport {
    /// Max-abs deviation of `v` per layer between recursion and relaxation.
    pub layer_deviation: Vec<f64>,
    pub max_deviation: f64,
    /// Max-abs printed layer balance over interior layers.
    pub balance_residual: f64,
    pub relax_steps: usize,
    pub converged: bool,
    pub energy_monotone: bool,
}

/// Relaxes, seeds the recursion from layers 0 and 1, and compares every
/// reconstructed layer with the relaxed one.
pub fn verify_ebm_reconstruction(
    net: &HopfieldEbm,
    x: &[f64],
    opts: &EbmRelaxOptions,
) -> Result<EbmReport> {
    let relaxed = relax_ebm(net, x, opts)?;
    let w = net.width;
    let v: Vec<f64> = relaxed.u.iter().map(|&u| net.activation.apply(u)).collect();
    let layer = |l: usize| &v[l * w..(l + 1) * w];
    let seed = EbmPhasePoint {
        v: layer(0).to_vec(),
        p: layer(1).iter().zip(layer(0)).map(|(a, b)| a - b).collect(),
    };
    let points = ebm_integrate(net, &seed)?;
    let layer_deviation: Vec<f64> = points
        .iter()
        .enumerate()
        .map(|(l, ph)| {
            ph.v.iter()
                .zip(layer(l))
                .map(|(a, b)| (a - b).abs())
                .fold(0.0, f64::max)
        })
        .collect();

    let mut balance = 0.0_f64;
    for l in 0..net.depth().saturating_sub(2) {
        // 0 = f(v^{l+1}) - W^{l+1}p^{l+1} + W^lᵀp^l - (W^lᵀ + W^{l+1})v^{l+1}
        let (v1, v2) = (layer(l + 1), layer(l + 2));
        let p0: Vec<f64> = v1.iter().zip(layer(l)).map(|(a, b)| a - b).collect();
        let p1: Vec<f64> = v2.iter().zip(v1).map(|(a, b)| a - b).collect();
        let wp1 = net.weights[l + 1].matvec(&p1)?;
        let wtp0 = net.weights[l].transpose_matvec(&p0)?;
        let wtv = net.weights[l].transpose_matvec(v1)?;
        let wv = net.weights[l + 1].matvec(v1)?;
        for k in 0..w {
            let f = local_nonlinearity(v1[k], net.activation, net.biases[l + 1][k])?;
            balance = balance.max((f - wp1[k] + wtp0[k] - wtv[k] - wv[k]).abs());
        }
    }
    Ok(EbmReport {
        max_deviation: layer_deviation.iter().copied().fold(0.0, f64::max),
        layer_deviation,
        balance_residual: balance,
        relax_steps: relaxed.steps,
        converged: relaxed.converged,
        energy_monotone: relaxed.energy_monotone,
    })
}

/// Random clamped input for a verification net, uniform in `±scale`.
pub fn random_input(width: usize, scale: f64, seed: u64) -> Vec<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..width)
        .map(|_| rng.random_range(-scale..scale))
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct EbmManifest {
    format: String,
    activation: Activation,
    biases: Vec<Vec<f64>>,
    weights: Vec<BlobRef>,
}

const EBM_FORMAT: &str = "fhn-eqprop-ebm-v1";

/// Same layout as training checkpoints: `manifest.json` plus weight blobs.
pub fn save_ebm(net: &HopfieldEbm, dir: &Path) -> Result<()> {
    let weights = net
        .weights
        .iter()
        .enumerate()
        .map(|(l, w)| write_blob(dir, &format!("weight_{l}.f64"), w))
        .collect::<Result<_>>()?;
    let manifest = EbmManifest {
        format: EBM_FORMAT.into(),
        activation: net.activation,
        biases: net.biases.clone(),
        weights,
    };
    write_atomic(
        &dir.join("manifest.json"),
        serde_json::to_string_pretty(&manifest)?.as_bytes(),
    )
}

pub fn load_ebm(dir: &Path) -> Result<HopfieldEbm> {
    let path = dir.join("manifest.json");
    let text = std::fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
    let manifest: EbmManifest = serde_json::from_str(&text).map_err(|e| Error::Format {
        kind: "EBM manifest",
        path: path.clone(),
        message: e.to_string(),
    })?;
    if manifest.format != EBM_FORMAT {
        return Err(Error::Format {
            kind: "EBM manifest",
            path,
            message: format!("unsupported format {:?}", manifest.format),
        });
    }
    let weights = manifest
        .weights
        .iter()
        .map(|b| read_blob(dir, b))
        .collect::<Result<_>>()?;
    HopfieldEbm::new(weights, manifest.biases, manifest.activation)
}
