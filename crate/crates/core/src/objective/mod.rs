//! Training objective: per-omic Gaussian reconstruction, one KL term for the
//! fused posterior against `N(0, I)`, and the spike-and-slab penalty on every
//! loading matrix. [`elbo_step`] returns the loss with exact analytic
//! gradients for every trainable parameter.

pub mod persist;
pub mod train;

pub use persist::{load_model, save_history_csv, save_model};
pub use train::{train, StopReason, TrainConfig, TrainHistory, TrainedModel};

use std::f64::consts::PI;

use crate::error::{Error, Result};
use crate::model::fused::{self, OneHiddenTrunk, TrunkGrads};
use crate::model::{
    encode_recorded, gate_recorded, masked_latents, poe_fuse, reparameterize, EncodeRecord, FusedPosterior,
    ModelParams, OmicParams, LOG_VAR_CLAMP,
};
use crate::numerics::{Exec, Matrix};
use crate::sparsity::{ssl_penalty_grad, ssl_penalty_value, SslState};

/// Samples handled by one reduction task in the decoder pass.
const SAMPLE_CHUNK: usize = 16;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LossConfig {
    /// Observation variance used when the model carries no learned
    /// per-feature log-variance.
    pub obs_variance: f64,
    /// Multiplier on every omic's spike-and-slab penalty.
    pub penalty_weight: f64,
}

impl Default for LossConfig {
    fn default() -> Self {
        LossConfig {
            obs_variance: 1.0,
            penalty_weight: 1.0,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct LossBreakdown {
    /// Reconstruction NLL per omic, averaged over samples.
    pub recon: Vec<f64>,
    pub kl: f64,
    /// Weighted penalty per omic.
    pub penalty: Vec<f64>,
    pub total: f64,
}

impl LossBreakdown {
    fn new(recon: Vec<f64>, kl: f64, penalty: Vec<f64>) -> Self {
        let total = recon.iter().sum::<f64>() + kl + penalty.iter().sum::<f64>();
        LossBreakdown {
            recon,
            kl,
            penalty,
            total,
        }
    }

    fn check_finite(&self, names: &[String]) -> Result<()> {
        for (v, r) in self.recon.iter().enumerate() {
            if !r.is_finite() {
                return Err(Error::numeric("loss", format!("reconstruction of omic {} is {r}", names[v])));
            }
        }
        if !self.kl.is_finite() {
            return Err(Error::numeric("loss", format!("KL term is {}", self.kl)));
        }
        for (v, p) in self.penalty.iter().enumerate() {
            if !p.is_finite() {
                return Err(Error::numeric("loss", format!("penalty of omic {} is {p}", names[v])));
            }
        }
        Ok(())
    }
}

/// `−Σ_{n,j} log N(x_nj; recon_nj, σ²_j) / N`. `obs_variance` has length 1
/// (shared) or `D`.
pub fn gaussian_nll(recon: &Matrix, x: &Matrix, obs_variance: &[f64]) -> Result<f64> {
    if recon.shape() != x.shape() {
        return Err(Error::shape("gaussian_nll", "reconstruction and data shapes differ"));
    }
    let (n, d) = x.shape();
    if obs_variance.len() != 1 && obs_variance.len() != d {
        return Err(Error::shape("gaussian_nll", "observation variance must have length 1 or D"));
    }
    if obs_variance.iter().any(|&v| !(v > 0.0)) {
        return Err(Error::contract("gaussian_nll", "observation variance must be positive"));
    }
    if n == 0 {
        return Ok(0.0);
    }
    let var = |j: usize| if obs_variance.len() == 1 { obs_variance[0] } else { obs_variance[j] };
    let mut total = 0.0;
    for i in 0..n {
        for j in 0..d {
            let r = x.get(i, j) - recon.get(i, j);
            total += 0.5 * (2.0 * PI * var(j)).ln() + r * r / (2.0 * var(j));
        }
    }
    Ok(total / n as f64)
}

/// `½ Σ_k (σ² + μ² − 1 − ln σ²)` averaged over samples.
pub fn kl_standard_normal(fused: &FusedPosterior) -> f64 {
    let n = fused.mean.rows();
    if n == 0 {
        return 0.0;
    }
    let total: f64 = fused
        .mean
        .as_slice()
        .iter()
        .zip(fused.variance.as_slice())
        .map(|(&m, &v)| 0.5 * (v + m * m - 1.0 - v.ln()))
        .sum();
    total / n as f64
}

fn check_batch(batch: &[&Matrix], noise: &Matrix, model: &ModelParams, ssl: &[SslState]) -> Result<usize> {
    let v = model.num_omics();
    if batch.len() != v || ssl.len() != v {
        return Err(Error::contract(
            "elbo",
            format!("{} inputs and {} prior states for {v} omics", batch.len(), ssl.len()),
        ));
    }
    let n = batch[0].rows();
    if n == 0 {
        return Err(Error::contract("elbo", "empty batch"));
    }
    for (x, o) in batch.iter().zip(&model.omics) {
        if x.rows() != n {
            return Err(Error::contract("elbo", "omic batches are not aligned"));
        }
        if x.cols() != o.features() {
            return Err(Error::shape(
                format!("omic {}", o.name),
                format!("batch has {} features, model expects {}", x.cols(), o.features()),
            ));
        }
    }
    for (s, o) in ssl.iter().zip(&model.omics) {
        if s.gamma.shape() != o.loadings.w.shape() {
            return Err(Error::shape(format!("omic {}", o.name), "prior state does not match loadings"));
        }
    }
    if noise.shape() != (n, model.latent_dim) {
        return Err(Error::shape("elbo", "noise must be N × K"));
    }
    Ok(n)
}

/// Loss only, no gradients.
pub fn elbo_loss(
    batch: &[&Matrix],
    noise: &Matrix,
    model: &ModelParams,
    ssl: &[SslState],
    cfg: &LossConfig,
    exec: Exec,
) -> Result<LossBreakdown> {
    evaluate(batch, noise, model, ssl, cfg, exec, false).map(|(l, _)| l)
}

/// Loss and gradients w.r.t. every parameter of `model`. `Γ` and `η` are held
/// fixed.
pub fn elbo_step(
    batch: &[&Matrix],
    noise: &Matrix,
    model: &ModelParams,
    ssl: &[SslState],
    cfg: &LossConfig,
    exec: Exec,
) -> Result<(LossBreakdown, ModelParams)> {
    let (loss, grads) = evaluate(batch, noise, model, ssl, cfg, exec, true)?;
    Ok((loss, grads.expect("gradients requested")))
}

/// Per-feature observation variance and its log.
fn obs_variance(o: &OmicParams, cfg: &LossConfig) -> Result<Vec<f64>> {
    match &o.obs_log_var {
        Some(l) => Ok(l.iter().map(|s| s.exp()).collect()),
        None if cfg.obs_variance > 0.0 => Ok(vec![cfg.obs_variance; o.features()]),
        None => Err(Error::contract("gaussian_nll", "observation variance must be positive")),
    }
}

struct DecodeOut {
    nll: f64,
    grads: Option<DecodeGrads>,
}

struct DecodeGrads {
    trunk: crate::numerics::Mlp,
    bias: Vec<f64>,
    loadings: Vec<f64>,
    obs_log_var: Vec<f64>,
    dz: Matrix,
}

struct ChunkOut {
    nll: f64,
    grads: Option<(TrunkGrads, Vec<f64>, Vec<f64>)>,
}

/// Reconstruction NLL (sum over samples and features, not yet averaged) and,
/// optionally, its gradients.
fn decode_omic(x: &Matrix, z: &Matrix, o: &OmicParams, var: &[f64], want: bool, exec: Exec) -> Result<DecodeOut> {
    let (n, d) = x.shape();
    let k = z.cols();
    let inv_n = 1.0 / n as f64;
    let half_log: Vec<f64> = var.iter().map(|v| 0.5 * (2.0 * PI * v).ln()).collect();
    let inv_var: Vec<f64> = var.iter().map(|v| 1.0 / v).collect();
    let term = |j: usize, r: f64| half_log[j] + 0.5 * r * r * inv_var[j];

    let Some(trunk) = OneHiddenTrunk::from_mlp(&o.decoder.trunk) else {
        return decode_omic_generic(x, z, o, var, want, exec);
    };
    let h = trunk.h;
    let w = &o.loadings.w;
    let n_chunks = n.div_ceil(SAMPLE_CHUNK);
    let chunks = exec.map(n_chunks, |c| {
        let lo = c * SAMPLE_CHUNK;
        let hi = (lo + SAMPLE_CHUNK).min(n);
        let mut scratch = fused::Scratch::default();
        let mut y = vec![0.0; d];
        let mut nll = 0.0;
        if !want {
            for i in lo..hi {
                fused::decode_sample(&trunk, z.row(i), w, &mut scratch, &mut y, None);
                let xi = x.row(i);
                for j in 0..d {
                    nll += term(j, xi[j] - (y[j] + o.decoder.bias[j]));
                }
            }
            return ChunkOut { nll, grads: None };
        }
        let mut g = TrunkGrads::zeros(k, h, d);
        let mut dlv = vec![0.0; d];
        let mut dz = vec![0.0; (hi - lo) * k];
        for i in lo..hi {
            let xi = x.row(i);
            fused::decode_sample_backward(
                &trunk,
                z.row(i),
                w,
                &o.decoder.bias,
                &mut scratch,
                &mut y,
                |j, yj| {
                    let r = xi[j] - yj;
                    nll += term(j, r);
                    dlv[j] += (0.5 - 0.5 * r * r * inv_var[j]) * inv_n;
                    -r * inv_var[j] * inv_n
                },
                &mut g,
                &mut dz[(i - lo) * k..(i - lo + 1) * k],
            );
        }
        ChunkOut {
            nll,
            grads: Some((g, dlv, dz)),
        }
    });

    let nll = chunks.iter().map(|c| c.nll).sum();
    if !want {
        return Ok(DecodeOut { nll, grads: None });
    }
    let mut total = TrunkGrads::zeros(k, h, d);
    let mut dlv = vec![0.0; d];
    let mut dz = Vec::with_capacity(n * k);
    for c in chunks {
        let (g, l, z_rows) = c.grads.expect("gradients requested");
        total.add_assign(&g);
        dlv.iter_mut().zip(&l).for_each(|(a, b)| *a += b);
        dz.extend_from_slice(&z_rows);
    }
    let mut trunk_grads = o.decoder.trunk.zeros_like();
    trunk_grads.layers[0].weight.as_mut_slice().copy_from_slice(&total.w1);
    trunk_grads.layers[0].bias.copy_from_slice(&total.b1);
    trunk_grads.layers[1].weight.as_mut_slice().copy_from_slice(&total.w2);
    trunk_grads.layers[1].bias[0] = total.b2;
    Ok(DecodeOut {
        nll,
        grads: Some(DecodeGrads {
            trunk: trunk_grads,
            bias: total.bias,
            loadings: total.loadings,
            obs_log_var: dlv,
            dz: Matrix::from_vec(n, k, dz)?,
        }),
    })
}

/// Decoder pass for arbitrary trunk shapes through the materialized masked
/// latents.
fn decode_omic_generic(
    x: &Matrix,
    z: &Matrix,
    o: &OmicParams,
    var: &[f64],
    want: bool,
    exec: Exec,
) -> Result<DecodeOut> {
    let (n, d) = x.shape();
    let k = z.cols();
    let inv_n = 1.0 / n as f64;
    let masked = masked_latents(z, &o.loadings.w, exec);
    let (out, cache) = o.decoder.trunk.forward_with(&masked, exec)?;
    let mut nll = 0.0;
    let mut dy = Matrix::zeros(n * d, 1);
    let mut dlv = vec![0.0; d];
    for c in 0..n.div_ceil(SAMPLE_CHUNK) {
        let mut part = 0.0;
        for i in c * SAMPLE_CHUNK..((c + 1) * SAMPLE_CHUNK).min(n) {
            for j in 0..d {
                let r = x.get(i, j) - (out.get(i * d + j, 0) + o.decoder.bias[j]);
                part += 0.5 * (2.0 * PI * var[j]).ln() + 0.5 * r * r / var[j];
                dy.set(i * d + j, 0, -r / var[j] * inv_n);
                dlv[j] += (0.5 - 0.5 * r * r / var[j]) * inv_n;
            }
        }
        nll += part;
    }
    if !want {
        return Ok(DecodeOut { nll, grads: None });
    }
    let (trunk, dm) = o.decoder.trunk.backward_with(&cache, &dy, exec)?;
    let mut bias = vec![0.0; d];
    let mut loadings = vec![0.0; d * k];
    let mut dz = Matrix::zeros(n, k);
    let w = &o.loadings.w;
    for i in 0..n {
        for j in 0..d {
            bias[j] += dy.get(i * d + j, 0);
            let g = dm.row(i * d + j);
            for c in 0..k {
                dz.set(i, c, dz.get(i, c) + g[c] * w.get(j, c));
                loadings[j * k + c] += g[c] * z.get(i, c);
            }
        }
    }
    Ok(DecodeOut {
        nll,
        grads: Some(DecodeGrads {
            trunk,
            bias,
            loadings,
            obs_log_var: dlv,
            dz,
        }),
    })
}

#[allow(clippy::too_many_arguments)]
fn evaluate(
    batch: &[&Matrix],
    noise: &Matrix,
    model: &ModelParams,
    ssl: &[SslState],
    cfg: &LossConfig,
    exec: Exec,
    want: bool,
) -> Result<(LossBreakdown, Option<ModelParams>)> {
    let n = check_batch(batch, noise, model, ssl)?;
    let inv_n = 1.0 / n as f64;
    let names: Vec<String> = model.omics.iter().map(|o| o.name.clone()).collect();

    let mut posts = Vec::with_capacity(batch.len());
    let mut records: Vec<EncodeRecord> = Vec::with_capacity(batch.len());
    for (x, o) in batch.iter().zip(&model.omics) {
        let (p, r) = encode_recorded(x, &o.encoder, &o.name, exec)?;
        posts.push(p);
        records.push(r);
    }
    let (alpha, gate_cache) = gate_recorded(&posts, &model.gating, exec)?;
    let fused = poe_fuse(&posts, &alpha)?;
    let sample = reparameterize(&fused, noise)?;
    let z = &sample.z;

    let mut recon = Vec::with_capacity(batch.len());
    let mut decoded = Vec::with_capacity(batch.len());
    for (x, o) in batch.iter().zip(&model.omics) {
        let var = obs_variance(o, cfg)?;
        let out = decode_omic(x, z, o, &var, want, exec)?;
        recon.push(out.nll * inv_n);
        decoded.push(out.grads);
    }
    let kl = kl_standard_normal(&fused);
    let penalty: Vec<f64> = model
        .omics
        .iter()
        .zip(ssl)
        .map(|(o, s)| cfg.penalty_weight * ssl_penalty_value(&o.loadings, &s.gamma, &s.hyper))
        .collect();
    let loss = LossBreakdown::new(recon, kl, penalty);
    loss.check_finite(&names)?;
    if !want {
        return Ok((loss, None));
    }

    let k = model.latent_dim;
    let v = model.num_omics();
    let mut grads = model.zeros_like();

    // decoders, loadings and observation variance
    let mut dz = Matrix::zeros(n, k);
    for (m, (g_out, o)) in decoded.into_iter().zip(&model.omics).enumerate() {
        let d = g_out.expect("gradients requested");
        let go = &mut grads.omics[m];
        go.decoder.trunk = d.trunk;
        go.decoder.bias = d.bias;
        let pen = ssl_penalty_grad(&o.loadings, &ssl[m].gamma, &ssl[m].hyper);
        for ((g, &r), &p) in go.loadings.w.as_mut_slice().iter_mut().zip(&d.loadings).zip(pen.as_slice()) {
            *g = r + cfg.penalty_weight * p;
        }
        if let Some(l) = &mut go.obs_log_var {
            l.copy_from_slice(&d.obs_log_var);
        }
        dz.add_assign(&d.dz);
    }

    // reparameterization and KL to the fused mean and variance
    let mut d_mean = Matrix::zeros(n, k);
    let mut d_var = Matrix::zeros(n, k);
    for i in 0..n {
        for c in 0..k {
            let mu = fused.mean.get(i, c);
            let var = fused.variance.get(i, c);
            let g = dz.get(i, c);
            d_mean.set(i, c, g + mu * inv_n);
            d_var.set(i, c, g * noise.get(i, c) / (2.0 * var.sqrt()) + 0.5 * (1.0 - 1.0 / var) * inv_n);
        }
    }

    // fusion: μ_s = A / T, σ_s² = 1 / T
    let precisions: Vec<Matrix> = posts.iter().map(|p| p.precision()).collect();
    let mut d_alpha = Matrix::zeros(n, v);
    let mut d_mu: Vec<Matrix> = (0..v).map(|_| Matrix::zeros(n, k)).collect();
    let mut d_lv: Vec<Matrix> = (0..v).map(|_| Matrix::zeros(n, k)).collect();
    for i in 0..n {
        for c in 0..k {
            let t = fused.precision.get(i, c);
            let da = d_mean.get(i, c) / t;
            let dt = -(d_mean.get(i, c) * fused.mean.get(i, c) + d_var.get(i, c) * fused.variance.get(i, c)) / t;
            for m in 0..v {
                let a = alpha.alpha.get(i, m);
                let tau = precisions[m].get(i, c);
                let mu = posts[m].mean.get(i, c);
                let common = da * mu + dt;
                d_mu[m].set(i, c, da * a * tau);
                d_alpha.set(i, m, d_alpha.get(i, m) + tau * common);
                // dτ = α·common, τ = exp(−lv)
                d_lv[m].set(i, c, -tau * a * common);
            }
        }
    }

    // softmax and gating network
    let mut d_logits = Matrix::zeros(n, v);
    for i in 0..n {
        let a = alpha.alpha.row(i);
        let g = d_alpha.row(i);
        let inner: f64 = a.iter().zip(g).map(|(x, y)| x * y).sum();
        for m in 0..v {
            d_logits.set(i, m, a[m] * (g[m] - inner));
        }
    }
    let (g_gate, d_input) = model.gating.backward_with(&gate_cache, &d_logits, exec)?;
    grads.gating = g_gate;
    for m in 0..v {
        for i in 0..n {
            for c in 0..k {
                let off = 2 * m * k;
                let (gm, gl) = (d_mu[m].get(i, c), d_lv[m].get(i, c));
                d_mu[m].set(i, c, gm + d_input.get(i, off + c));
                d_lv[m].set(i, c, gl + d_input.get(i, off + k + c));
            }
        }
    }

    // encoders: mean head and clamped log-variance head
    for m in 0..v {
        let raw = &records[m].raw_log_var;
        let mut d_out = Matrix::zeros(n, 2 * k);
        for i in 0..n {
            for c in 0..k {
                d_out.set(i, c, d_mu[m].get(i, c));
                let r = raw.get(i, c);
                let pass = r > -LOG_VAR_CLAMP && r < LOG_VAR_CLAMP;
                d_out.set(i, k + c, if pass { d_lv[m].get(i, c) } else { 0.0 });
            }
        }
        let (g_enc, _) = model.omics[m].encoder.backward_with(&records[m].cache, &d_out, exec)?;
        grads.omics[m].encoder = g_enc;
    }
    Ok((loss, Some(grads)))
}
