//! Feature-to-factor loadings under a Spike-and-Slab Lasso prior.
//!
//! Each loading `w_jk` has prior `γ·Laplace(λ1) + (1−γ)·Laplace(λ0)` with
//! `λ0 > λ1` (narrow spike, wide slab), Bernoulli(`η_k`) inclusion and a
//! Beta(a, b) prior on every column rate `η_k`. `W` is fit by gradient steps
//! on the reconstruction loss plus the penalty `Σ λ*_jk |w_jk|`, while the
//! inclusion probabilities `Γ` and rates `η` are refreshed by closed-form
//! E/M updates and never receive gradients.

use rand::Rng;
use rand_distr::{Distribution, Uniform};

use crate::error::{Error, Result};
use crate::numerics::{Matrix, Params};

/// Clamp range for the column rates.
pub const ETA_MIN: f64 = 1e-6;
pub const ETA_MAX: f64 = 1.0 - 1e-6;

/// Sparse `D_v × K` loading matrix of one omic.
#[derive(Clone, Debug, PartialEq)]
pub struct FactorLoadings {
    pub omic: String,
    pub w: Matrix,
}

impl FactorLoadings {
    /// Entries drawn from Uniform(−0.1, 0.1).
    pub fn init<R: Rng + ?Sized>(omic: &str, features: usize, latent_dim: usize, rng: &mut R) -> Self {
        let dist = Uniform::new(-0.1, 0.1).expect("valid range");
        FactorLoadings {
            omic: omic.to_string(),
            w: Matrix::from_fn(features, latent_dim, |_, _| dist.sample(rng)),
        }
    }

    pub fn features(&self) -> usize {
        self.w.rows()
    }

    pub fn latent_dim(&self) -> usize {
        self.w.cols()
    }
}

impl Params for FactorLoadings {
    fn slices(&self) -> Vec<(String, &[f64])> {
        vec![("W".into(), self.w.as_slice())]
    }

    fn slices_mut(&mut self) -> Vec<(String, &mut [f64])> {
        vec![("W".into(), self.w.as_mut_slice())]
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SslHyper {
    /// Spike rate.
    pub lambda0: f64,
    /// Slab rate.
    pub lambda1: f64,
    pub a: f64,
    pub b: f64,
    /// Starting column rate.
    pub eta_init: f64,
}

impl Default for SslHyper {
    fn default() -> Self {
        SslHyper {
            lambda0: 10.0,
            lambda1: 1.0,
            a: 1.0,
            b: 1.0,
            eta_init: 0.5,
        }
    }
}

impl SslHyper {
    pub fn validate(&self) -> Result<()> {
        if !(self.lambda0 > self.lambda1 && self.lambda1 > 0.0) {
            return Err(Error::contract(
                "SslHyper",
                format!("need λ0 > λ1 > 0, got λ0={} λ1={}", self.lambda0, self.lambda1),
            ));
        }
        if self.a < 1.0 || self.b < 1.0 {
            return Err(Error::contract("SslHyper", "Beta hyperparameters must be ≥ 1"));
        }
        if !(0.0..=1.0).contains(&self.eta_init) {
            return Err(Error::contract("SslHyper", "eta_init must lie in [0, 1]"));
        }
        Ok(())
    }
}

/// Prior state of one omic's loadings.
#[derive(Clone, Debug, PartialEq)]
pub struct SslState {
    pub hyper: SslHyper,
    /// Inclusion probabilities, `D_v × K`.
    pub gamma: Matrix,
    /// Column slab rates, length `K`.
    pub eta: Vec<f64>,
}

impl SslState {
    /// Fresh state whose `Γ` is the E-step for `loadings` at `η = eta_init`.
    pub fn new(loadings: &FactorLoadings, hyper: SslHyper) -> Result<Self> {
        hyper.validate()?;
        let mut state = SslState {
            hyper,
            gamma: Matrix::zeros(loadings.features(), loadings.latent_dim()),
            eta: vec![hyper.eta_init; loadings.latent_dim()],
        };
        state.gamma = ssl_gamma_update(loadings, &state);
        Ok(state)
    }

    /// One E-step then M-step against the current loadings.
    pub fn em_update(&mut self, loadings: &FactorLoadings) -> Result<()> {
        self.gamma = ssl_gamma_update(loadings, self);
        self.eta = ssl_eta_update(&self.gamma, self, loadings.features())?;
        Ok(())
    }
}

/// Laplace density `(λ/2)·exp(−λ|w|)`.
#[inline]
pub fn laplace_density(w: f64, lambda: f64) -> f64 {
    0.5 * lambda * (-lambda * w.abs()).exp()
}

/// Posterior slab probability of a single loading.
///
/// Evaluated as a logistic of the log-odds so that large `|w|` does not
/// underflow both densities.
pub fn slab_probability(w: f64, eta: f64, lambda0: f64, lambda1: f64) -> f64 {
    if eta <= 0.0 {
        return 0.0;
    }
    if eta >= 1.0 {
        return 1.0;
    }
    let log_slab = eta.ln() + (0.5 * lambda1).ln() - lambda1 * w.abs();
    let log_spike = (1.0 - eta).ln() + (0.5 * lambda0).ln() - lambda0 * w.abs();
    let d = log_spike - log_slab;
    if d > 0.0 {
        let e = (-d).exp();
        e / (1.0 + e)
    } else {
        1.0 / (1.0 + d.exp())
    }
}

/// E-step: `Γ_jk = η_k ψ1(w_jk) / (η_k ψ1(w_jk) + (1−η_k) ψ0(w_jk))`.
pub fn ssl_gamma_update(loadings: &FactorLoadings, state: &SslState) -> Matrix {
    let SslHyper { lambda0, lambda1, .. } = state.hyper;
    let w = &loadings.w;
    Matrix::from_fn(w.rows(), w.cols(), |j, k| {
        slab_probability(w.get(j, k), state.eta[k], lambda0, lambda1)
    })
}

/// M-step: Beta posterior mode `η_k = (a − 1 + Σ_j Γ_jk) / (a + b + D − 2)`,
/// clamped to `[1e-6, 1 − 1e-6]`.
pub fn ssl_eta_update(gamma: &Matrix, state: &SslState, features: usize) -> Result<Vec<f64>> {
    let SslHyper { a, b, .. } = state.hyper;
    let denom = a + b + features as f64 - 2.0;
    if denom <= 0.0 {
        return Err(Error::contract(
            "ssl_eta_update",
            format!("a + b + D − 2 = {denom} is not positive"),
        ));
    }
    if gamma.rows() != features {
        return Err(Error::shape(
            "ssl_eta_update",
            format!("Γ has {} rows for D = {features}", gamma.rows()),
        ));
    }
    Ok(gamma
        .column_sums()
        .into_iter()
        .map(|s| ((a - 1.0 + s) / denom).clamp(ETA_MIN, ETA_MAX))
        .collect())
}

/// Mixed rate `λ* = Γ·λ1 + (1−Γ)·λ0`.
#[inline]
pub fn mixed_rate(gamma: f64, hyper: &SslHyper) -> f64 {
    gamma * hyper.lambda1 + (1.0 - gamma) * hyper.lambda0
}

/// Gradient of `Σ λ*_jk |w_jk|` with `Γ` held fixed; `sign(0) = 0`.
pub fn ssl_penalty_grad(loadings: &FactorLoadings, gamma: &Matrix, hyper: &SslHyper) -> Matrix {
    let w = &loadings.w;
    Matrix::from_fn(w.rows(), w.cols(), |j, k| {
        let x = w.get(j, k);
        let s = if x > 0.0 {
            1.0
        } else if x < 0.0 {
            -1.0
        } else {
            0.0
        };
        mixed_rate(gamma.get(j, k), hyper) * s
    })
}

/// Penalty value `Σ λ*_jk |w_jk|`.
pub fn ssl_penalty_value(loadings: &FactorLoadings, gamma: &Matrix, hyper: &SslHyper) -> f64 {
    loadings
        .w
        .as_slice()
        .iter()
        .zip(gamma.as_slice())
        .map(|(&w, &g)| mixed_rate(g, hyper) * w.abs())
        .sum()
}

/// Binary map of entries with `|w| > threshold` (strict).
pub fn active_map(loadings: &FactorLoadings, threshold: f64) -> Result<Vec<Vec<bool>>> {
    if !(threshold >= 0.0) {
        return Err(Error::contract("active_map", "threshold must be ≥ 0"));
    }
    let w = &loadings.w;
    Ok((0..w.rows())
        .map(|j| w.row(j).iter().map(|x| x.abs() > threshold).collect())
        .collect())
}

/// Support-recovery score of learned loadings against a planted matrix.
#[derive(Clone, Debug, PartialEq)]
pub struct SupportScore {
    pub f1: f64,
    pub true_positives: usize,
    pub false_positives: usize,
    pub false_negatives: usize,
    /// `permutation[c]` is the learned column matched to planted column `c`.
    pub permutation: Vec<usize>,
}

/// F1 of `|learned| > threshold` against the nonzero pattern of `truth`,
/// after matching learned factors to planted ones. Latent coordinates are
/// only identified up to permutation. Both support sizes are fixed by the
/// matrices, so maximizing F1 is maximizing true positives, which splits
/// into per-column overlaps and is solved exactly by an assignment.
pub fn matched_support_f1(learned: &Matrix, truth: &Matrix, threshold: f64) -> Result<SupportScore> {
    if learned.shape() != truth.shape() {
        return Err(Error::shape(
            "matched_support_f1",
            format!("learned {:?} vs planted {:?}", learned.shape(), truth.shape()),
        ));
    }
    let (d, k) = truth.shape();
    let mut overlap = vec![vec![0i64; k]; k];
    for j in 0..d {
        for (c, row) in overlap.iter_mut().enumerate() {
            if truth.get(j, c) != 0.0 {
                for (l, o) in row.iter_mut().enumerate() {
                    *o += (learned.get(j, l).abs() > threshold) as i64;
                }
            }
        }
    }
    let predicted = learned.as_slice().iter().filter(|x| x.abs() > threshold).count();
    let planted = truth.as_slice().iter().filter(|&&x| x != 0.0).count();
    let (tp, permutation) = if k == 0 {
        (0, Vec::new())
    } else {
        let weights = pathfinding::matrix::Matrix::from_fn(k, k, |(c, l)| overlap[c][l]);
        let (tp, perm) = pathfinding::kuhn_munkres::kuhn_munkres(&weights);
        (tp as usize, perm)
    };
    let denom = predicted + planted;
    Ok(SupportScore {
        f1: if denom == 0 { 1.0 } else { 2.0 * tp as f64 / denom as f64 },
        true_positives: tp,
        false_positives: predicted - tp,
        false_negatives: planted - tp,
        permutation,
    })
}
