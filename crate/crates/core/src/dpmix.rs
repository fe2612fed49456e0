//! Truncated Dirichlet-process mixture over the latent space.
//!
//! Each component is a multivariate Student-t with mean `c_k`, identity scale
//! and `nu` degrees of freedom. Two sets of responsibilities are computed for
//! a minibatch:
//!
//! * `q`, weighted by the running mixture proportions `π`, summarized by
//!   Dirichlet parameters `ξ_k = 1/K + Σ_n q_nk`;
//! * `p`, weighted by expected stick-breaking weights with
//!   `E[V] = 1 / (1 + γ₀)`, summarized by `γ_k = γ₀ + Σ_n p_nk`.
//!
//! The clustering loss is `KL(Dir(ξ) || Dir(γ))`; its gradient flows through
//! both responsibility computations into the latent codes and the centroids.
//! All responsibility arithmetic is done in log space.

use serde::{Deserialize, Serialize};

use crate::error::{Result, ScaError};
use crate::ndnet::Tensor2;
use crate::special::{digamma, ln_gamma, trigamma};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MixtureState {
    /// `K × d` centroid matrix.
    pub centroids: Tensor2,
    pub proportions: Vec<f64>,
    pub gamma0: f64,
    pub nu: f64,
    pub eta: f64,
}

impl MixtureState {
    /// New state with uniform proportions `1/K`.
    pub fn new(centroids: Tensor2, gamma0: f64, nu: f64, eta: f64) -> Result<Self> {
        let k = centroids.rows();
        let state = MixtureState {
            centroids,
            proportions: vec![1.0 / k.max(1) as f64; k],
            gamma0,
            nu,
            eta,
        };
        state.validate()?;
        Ok(state)
    }

    pub fn k(&self) -> usize {
        self.centroids.rows()
    }

    pub fn dim(&self) -> usize {
        self.centroids.cols()
    }

    pub fn validate(&self) -> Result<()> {
        if self.k() == 0 {
            return Err(ScaError::Domain("mixture needs at least one component".into()));
        }
        if self.proportions.len() != self.k() {
            return Err(ScaError::Dimension(format!(
                "{} proportions for {} components",
                self.proportions.len(),
                self.k()
            )));
        }
        if !(self.gamma0 > 0.0) {
            return Err(ScaError::Domain(format!("gamma0 must be > 0, got {}", self.gamma0)));
        }
        if !(self.nu >= 1.0) {
            return Err(ScaError::Domain(format!("nu must be >= 1, got {}", self.nu)));
        }
        if !(self.eta > 0.0 && self.eta < 1.0) {
            return Err(ScaError::Domain(format!("eta must lie in (0, 1), got {}", self.eta)));
        }
        let sum: f64 = self.proportions.iter().sum();
        if self.proportions.iter().any(|p| !(*p >= 0.0)) || (sum - 1.0).abs() > 1e-9 {
            return Err(ScaError::Domain("proportions are not on the simplex".into()));
        }
        if !self.centroids.all_finite() {
            return Err(ScaError::Numeric("non-finite centroid".into()));
        }
        Ok(())
    }
}

/// Log-density of a `d`-variate Student-t with mean `c`, identity scale and `nu` dof.
pub fn student_t_log_density(z: &[f64], c: &[f64], nu: f64) -> f64 {
    debug_assert_eq!(z.len(), c.len());
    let d = z.len() as f64;
    let r2: f64 = z.iter().zip(c).map(|(a, b)| (a - b) * (a - b)).sum();
    t_log_normalizer(d, nu) - 0.5 * (nu + d) * (r2 / nu).ln_1p()
}

fn t_log_normalizer(d: f64, nu: f64) -> f64 {
    ln_gamma(0.5 * (nu + d)) - ln_gamma(0.5 * nu) - 0.5 * d * (nu * std::f64::consts::PI).ln()
}

/// Expected truncated stick-breaking weights with `E[V_k] = 1/(1+γ₀)`.
///
/// The last component takes the remaining stick, so the weights sum to one.
pub fn stick_weights(k: usize, gamma0: f64) -> Vec<f64> {
    assert!(k >= 1);
    let v = 1.0 / (1.0 + gamma0);
    let mut w = Vec::with_capacity(k);
    let mut rest = 1.0;
    let mut used = 0.0;
    for _ in 0..k - 1 {
        // capped so rounding never pushes the running total past one
        let wk = (v * rest).min(1.0 - used);
        w.push(wk);
        used += wk;
        rest *= 1.0 - v;
    }
    w.push(1.0 - used);
    w
}

/// Row-stochastic `M × K` matrix of component memberships.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Responsibilities {
    pub probs: Tensor2,
}

impl Responsibilities {
    pub fn row(&self, n: usize) -> &[f64] {
        self.probs.row(n)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DirichletParams(pub Vec<f64>);

impl DirichletParams {
    pub fn mean(&self) -> Vec<f64> {
        let total: f64 = self.0.iter().sum();
        self.0.iter().map(|a| a / total).collect()
    }
}

/// `ℓ_nk = log t(z_n; c_k, ν)` for the whole batch.
fn log_densities(state: &MixtureState, z: &Tensor2) -> Result<Tensor2> {
    if z.cols() != state.dim() {
        return Err(ScaError::Dimension(format!(
            "latent batch has {} columns, centroids have {}",
            z.cols(),
            state.dim()
        )));
    }
    let k = state.k();
    let mut out = Tensor2::zeros(z.rows(), k);
    for n in 0..z.rows() {
        for j in 0..k {
            out.set(n, j, student_t_log_density(z.row(n), state.centroids.row(j), state.nu));
        }
    }
    Ok(out)
}

fn softmax_rows(logits: &Tensor2) -> Tensor2 {
    let mut out = logits.clone();
    for n in 0..out.rows() {
        let row = out.row_mut(n);
        let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let mut total = 0.0;
        for v in row.iter_mut() {
            *v = (*v - max).exp();
            total += *v;
        }
        row.iter_mut().for_each(|v| *v /= total);
    }
    out
}

fn weighted_logits(log_dens: &Tensor2, log_weights: &[f64]) -> Tensor2 {
    let mut logits = log_dens.clone();
    for n in 0..logits.rows() {
        for (v, lw) in logits.row_mut(n).iter_mut().zip(log_weights) {
            *v += lw;
        }
    }
    logits
}

fn dirichlet_from(probs: &Tensor2, offset: f64) -> DirichletParams {
    DirichletParams(probs.column_sums().into_iter().map(|s| offset + s).collect())
}

fn log_weights(w: &[f64]) -> Vec<f64> {
    w.iter().map(|v| v.ln()).collect()
}

/// `q(u_n = k) ∝ π_k t(z_n; c_k, ν)` and `ξ_k = 1/K + Σ_n q_nk`.
pub fn responsibilities_q(
    state: &MixtureState,
    z: &Tensor2,
) -> Result<(Responsibilities, DirichletParams)> {
    let ld = log_densities(state, z)?;
    let probs = softmax_rows(&weighted_logits(&ld, &log_weights(&state.proportions)));
    let xi = dirichlet_from(&probs, 1.0 / state.k() as f64);
    Ok((Responsibilities { probs }, xi))
}

/// `p(u_n = k) ∝ w_k t(z_n; c_k, ν)` with expected stick weights, and
/// `γ_k = γ₀ + Σ_n p_nk`.
pub fn responsibilities_p(
    state: &MixtureState,
    z: &Tensor2,
) -> Result<(Responsibilities, DirichletParams)> {
    let ld = log_densities(state, z)?;
    let w = stick_weights(state.k(), state.gamma0);
    let probs = softmax_rows(&weighted_logits(&ld, &log_weights(&w)));
    let gamma = dirichlet_from(&probs, state.gamma0);
    Ok((Responsibilities { probs }, gamma))
}

fn check_dirichlet(a: &DirichletParams, b: &DirichletParams) -> Result<()> {
    if a.0.len() != b.0.len() || a.0.is_empty() {
        return Err(ScaError::Dimension(format!(
            "Dirichlet parameter lengths {} and {}",
            a.0.len(),
            b.0.len()
        )));
    }
    if let Some(v) = a.0.iter().chain(&b.0).find(|v| !(**v > 0.0 && v.is_finite())) {
        return Err(ScaError::Domain(format!(
            "Dirichlet parameters must be positive and finite, got {v}"
        )));
    }
    Ok(())
}

/// Closed-form `KL(Dir(ξ) || Dir(γ))`.
pub fn kl_dirichlet(xi: &DirichletParams, gamma: &DirichletParams) -> Result<f64> {
    check_dirichlet(xi, gamma)?;
    let xi0: f64 = xi.0.iter().sum();
    let gamma_total: f64 = gamma.0.iter().sum();
    let psi0 = digamma(xi0);
    let mut kl = ln_gamma(xi0) - ln_gamma(gamma_total);
    for (&a, &b) in xi.0.iter().zip(&gamma.0) {
        kl += ln_gamma(b) - ln_gamma(a) + (a - b) * (digamma(a) - psi0);
    }
    Ok(kl)
}

/// KL value with its partial derivatives w.r.t. `ξ` and `γ`.
pub fn kl_dirichlet_grad(
    xi: &DirichletParams,
    gamma: &DirichletParams,
) -> Result<(f64, Vec<f64>, Vec<f64>)> {
    let kl = kl_dirichlet(xi, gamma)?;
    let xi0: f64 = xi.0.iter().sum();
    let gamma_total: f64 = gamma.0.iter().sum();
    let tri0 = trigamma(xi0);
    let psi0 = digamma(xi0);
    let psi_g0 = digamma(gamma_total);
    let dxi = xi
        .0
        .iter()
        .zip(&gamma.0)
        .map(|(&a, &b)| (a - b) * trigamma(a) - (xi0 - gamma_total) * tri0)
        .collect();
    let dgamma = xi
        .0
        .iter()
        .zip(&gamma.0)
        .map(|(&a, &b)| digamma(b) - psi_g0 - (digamma(a) - psi0))
        .collect();
    Ok((kl, dxi, dgamma))
}

/// Clustering objective on one minibatch together with its gradients.
#[derive(Clone, Debug)]
pub struct ClusteringLoss {
    pub value: f64,
    /// `M × d`
    pub grad_z: Tensor2,
    /// `K × d`
    pub grad_centroids: Tensor2,
    pub q: Responsibilities,
    pub xi: DirichletParams,
    pub gamma: DirichletParams,
}

/// `KL(Dir(ξ(z)) || Dir(γ(z)))` with gradients w.r.t. `z` and the centroids.
///
/// `π` enters as a constant; it is updated separately by
/// [`update_proportions`].
pub fn clustering_loss(state: &MixtureState, z: &Tensor2) -> Result<ClusteringLoss> {
    if z.rows() == 0 {
        return Err(ScaError::Domain("clustering loss needs a non-empty batch".into()));
    }
    let ld = log_densities(state, z)?;
    let k = state.k();
    let q = softmax_rows(&weighted_logits(&ld, &log_weights(&state.proportions)));
    let p = softmax_rows(&weighted_logits(&ld, &log_weights(&stick_weights(k, state.gamma0))));
    let xi = dirichlet_from(&q, 1.0 / k as f64);
    let gamma = dirichlet_from(&p, state.gamma0);
    let (value, dxi, dgamma) = kl_dirichlet_grad(&xi, &gamma)?;

    // d loss / d ℓ_nk through both softmaxes
    let m = z.rows();
    let mut dld = Tensor2::zeros(m, k);
    for n in 0..m {
        let qr = q.row(n);
        let pr = p.row(n);
        let qbar: f64 = qr.iter().zip(&dxi).map(|(a, g)| a * g).sum();
        let pbar: f64 = pr.iter().zip(&dgamma).map(|(a, g)| a * g).sum();
        for j in 0..k {
            dld.set(n, j, qr[j] * (dxi[j] - qbar) + pr[j] * (dgamma[j] - pbar));
        }
    }

    let d = state.dim();
    let mut grad_z = Tensor2::zeros(m, d);
    let mut grad_c = Tensor2::zeros(k, d);
    let nu = state.nu;
    for n in 0..m {
        let zn = z.row(n);
        for j in 0..k {
            let g = dld.get(n, j);
            if g == 0.0 {
                continue;
            }
            let c = state.centroids.row(j);
            let r2: f64 = zn.iter().zip(c).map(|(a, b)| (a - b) * (a - b)).sum();
            // ∂ℓ/∂z = −(ν+d)/(ν+r²) (z − c) = −∂ℓ/∂c
            let coef = -g * (nu + d as f64) / (nu + r2);
            for i in 0..d {
                let diff = zn[i] - c[i];
                grad_z.row_mut(n)[i] += coef * diff;
                grad_c.row_mut(j)[i] -= coef * diff;
            }
        }
    }
    if !(value.is_finite() && grad_z.all_finite() && grad_c.all_finite()) {
        return Err(ScaError::Numeric("non-finite clustering loss or gradient".into()));
    }
    Ok(ClusteringLoss {
        value,
        grad_z,
        grad_centroids: grad_c,
        q: Responsibilities { probs: q },
        xi,
        gamma,
    })
}

/// Online update `π ← η π + (1 − η) E[Dir(ξ)]`.
pub fn update_proportions(state: &mut MixtureState, xi: &DirichletParams) -> Result<()> {
    if xi.0.len() != state.k() {
        return Err(ScaError::Dimension(format!(
            "{} Dirichlet parameters for {} components",
            xi.0.len(),
            state.k()
        )));
    }
    if xi.0.iter().any(|v| !(*v > 0.0 && v.is_finite())) {
        return Err(ScaError::Domain("Dirichlet parameters must be positive".into()));
    }
    let mean = xi.mean();
    let eta = state.eta;
    for (p, m) in state.proportions.iter_mut().zip(mean) {
        *p = eta * *p + (1.0 - eta) * m;
    }
    // keep the simplex exact up to rounding
    let total: f64 = state.proportions.iter().sum();
    state.proportions.iter_mut().for_each(|p| *p /= total);
    Ok(())
}

fn argmax_lowest(row: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in row.iter().enumerate() {
        if v > row[best] {
            best = i;
        }
    }
    best
}

/// Hard assignment `argmax_k q(u = k | z)`; ties go to the lowest index.
pub fn assign(state: &MixtureState, z: &[f64]) -> usize {
    // argmax of the unnormalized log-posterior equals argmax of q
    let scores: Vec<f64> = (0..state.k())
        .map(|j| {
            state.proportions[j].ln()
                + student_t_log_density(z, state.centroids.row(j), state.nu)
        })
        .collect();
    argmax_lowest(&scores)
}

pub fn assign_batch(state: &MixtureState, z: &Tensor2) -> Vec<usize> {
    z.iter_rows().map(|r| assign(state, r)).collect()
}

/// Number of distinct hard assignments over a latent batch.
pub fn effective_k(state: &MixtureState, z: &Tensor2) -> usize {
    let mut used = vec![false; state.k()];
    for a in assign_batch(state, z) {
        used[a] = true;
    }
    used.iter().filter(|u| **u).count()
}
