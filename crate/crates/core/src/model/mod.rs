//! Network components: per-omic Gaussian encoders, the gating network, the
//! gated product-of-experts fusion, reparameterized sampling and the per-omic
//! sparse decoders.
//!
//! Fusion scales each expert's precision `τ_v = σ_v⁻²` by its gating weight:
//!
//! ```text
//! σ_s² = 1 / Σ_v α_v τ_v        μ_s = Σ_v α_v τ_v μ_v / Σ_v α_v τ_v
//! ```
//!
//! Decoding feeds feature `j` the masked latent `z ⊙ W_j` through a trunk
//! network shared by all features of the omic, plus a per-feature bias.

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::error::{Error, Result};
use crate::numerics::{Activation, Exec, Matrix, Mlp, MlpCache, Params};
use crate::sparsity::FactorLoadings;

pub(crate) mod fused;

/// Bound applied to encoder log-variance heads.
pub const LOG_VAR_CLAMP: f64 = 10.0;

#[derive(Clone, Debug, PartialEq)]
pub struct ModelConfig {
    pub latent_dim: usize,
    pub encoder_hidden: Vec<usize>,
    pub gating_hidden: Vec<usize>,
    pub decoder_hidden: Vec<usize>,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            latent_dim: 32,
            encoder_hidden: vec![256],
            gating_hidden: vec![64],
            decoder_hidden: vec![64],
        }
    }
}

/// Diagonal Gaussian posterior of one omic for a batch of samples.
#[derive(Clone, Debug, PartialEq)]
pub struct ModalityPosterior {
    pub mean: Matrix,
    /// Clamped log-variance.
    pub log_var: Matrix,
    pub variance: Matrix,
}

impl ModalityPosterior {
    pub fn from_mean_variance(mean: Matrix, variance: Matrix) -> Result<Self> {
        if mean.shape() != variance.shape() {
            return Err(Error::shape("ModalityPosterior", "mean and variance shapes differ"));
        }
        if variance.as_slice().iter().any(|&v| !(v > 0.0 && v.is_finite())) {
            return Err(Error::numeric(
                "ModalityPosterior",
                "variances must be positive and finite",
            ));
        }
        let log_var = variance.map(f64::ln);
        Ok(ModalityPosterior {
            mean,
            log_var,
            variance,
        })
    }

    pub fn precision(&self) -> Matrix {
        self.log_var.map(|lv| (-lv).exp())
    }

    pub fn rows(&self) -> usize {
        self.mean.rows()
    }

    pub fn latent_dim(&self) -> usize {
        self.mean.cols()
    }
}

/// Per-sample modality weights, `N × V`, rows on the simplex.
#[derive(Clone, Debug, PartialEq)]
pub struct GatingWeights {
    pub alpha: Matrix,
}

#[derive(Clone, Debug, PartialEq)]
pub struct FusedPosterior {
    pub mean: Matrix,
    pub variance: Matrix,
    /// Total gated precision `Σ_v α_v τ_v`.
    pub precision: Matrix,
}

#[derive(Clone, Debug, PartialEq)]
pub struct LatentSample {
    pub z: Matrix,
    pub noise: Matrix,
}

/// Shared trunk (`K → … → 1`) plus one output bias per feature.
#[derive(Clone, Debug, PartialEq)]
pub struct SparseDecoder {
    pub trunk: Mlp,
    pub bias: Vec<f64>,
}

impl SparseDecoder {
    pub fn zeros_like(&self) -> Self {
        SparseDecoder {
            trunk: self.trunk.zeros_like(),
            bias: vec![0.0; self.bias.len()],
        }
    }
}

/// Everything that belongs to one omic.
#[derive(Clone, Debug, PartialEq)]
pub struct OmicParams {
    pub name: String,
    /// `D_v → … → 2K`: the first `K` outputs are the mean, the rest the
    /// unclamped log-variance.
    pub encoder: Mlp,
    pub decoder: SparseDecoder,
    pub loadings: FactorLoadings,
    /// Per-feature observation log-variance when it is learned.
    pub obs_log_var: Option<Vec<f64>>,
}

impl OmicParams {
    pub fn features(&self) -> usize {
        self.decoder.bias.len()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ModelParams {
    pub latent_dim: usize,
    pub omics: Vec<OmicParams>,
    /// `2VK → … → V` logits.
    pub gating: Mlp,
}

impl ModelParams {
    /// Random initialization. `omics` lists `(name, feature count)` pairs.
    pub fn init<R: Rng + ?Sized>(
        omics: &[(String, usize)],
        config: &ModelConfig,
        learn_obs_variance: bool,
        rng: &mut R,
    ) -> Result<Self> {
        let k = config.latent_dim;
        if k == 0 || omics.is_empty() {
            return Err(Error::contract(
                "ModelParams::init",
                "need at least one omic and a positive latent dimension",
            ));
        }
        let v = omics.len();
        let chain = |input: usize, hidden: &[usize], output: usize| {
            let mut s = vec![input];
            s.extend_from_slice(hidden);
            s.push(output);
            s
        };
        let mut parts = Vec::with_capacity(v);
        for (name, d) in omics {
            let encoder = Mlp::init(
                &chain(*d, &config.encoder_hidden, 2 * k),
                Activation::Relu,
                Activation::Identity,
                rng,
            )?;
            let trunk = Mlp::init(
                &chain(k, &config.decoder_hidden, 1),
                Activation::Relu,
                Activation::Identity,
                rng,
            )?;
            let loadings = FactorLoadings::init(name, *d, k, rng);
            parts.push(OmicParams {
                name: name.clone(),
                encoder,
                decoder: SparseDecoder {
                    trunk,
                    bias: vec![0.0; *d],
                },
                loadings,
                obs_log_var: learn_obs_variance.then(|| vec![0.0; *d]),
            });
        }
        let gating = Mlp::init(
            &chain(2 * v * k, &config.gating_hidden, v),
            Activation::Relu,
            Activation::Identity,
            rng,
        )?;
        let model = ModelParams {
            latent_dim: k,
            omics: parts,
            gating,
        };
        model.validate()?;
        Ok(model)
    }

    pub fn num_omics(&self) -> usize {
        self.omics.len()
    }

    pub fn zeros_like(&self) -> Self {
        ModelParams {
            latent_dim: self.latent_dim,
            omics: self
                .omics
                .iter()
                .map(|o| OmicParams {
                    name: o.name.clone(),
                    encoder: o.encoder.zeros_like(),
                    decoder: o.decoder.zeros_like(),
                    loadings: FactorLoadings {
                        omic: o.name.clone(),
                        w: Matrix::zeros(o.loadings.features(), o.loadings.latent_dim()),
                    },
                    obs_log_var: o.obs_log_var.as_ref().map(|v| vec![0.0; v.len()]),
                })
                .collect(),
            gating: self.gating.zeros_like(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        let k = self.latent_dim;
        let v = self.omics.len();
        if v == 0 {
            return Err(Error::contract("ModelParams", "no omics"));
        }
        self.gating.validate()?;
        if self.gating.in_dim() != 2 * v * k || self.gating.out_dim() != v {
            return Err(Error::shape(
                "ModelParams",
                format!(
                    "gating maps {} → {}, expected {} → {v}",
                    self.gating.in_dim(),
                    self.gating.out_dim(),
                    2 * v * k
                ),
            ));
        }
        for o in &self.omics {
            o.encoder.validate()?;
            o.decoder.trunk.validate()?;
            let d = o.features();
            if o.encoder.in_dim() != d || o.encoder.out_dim() != 2 * k {
                return Err(Error::shape(
                    format!("omic {}", o.name),
                    "encoder dimensions do not match features / latent size",
                ));
            }
            if o.decoder.trunk.in_dim() != k || o.decoder.trunk.out_dim() != 1 {
                return Err(Error::shape(format!("omic {}", o.name), "decoder trunk must map K → 1"));
            }
            if o.loadings.w.shape() != (d, k) {
                return Err(Error::shape(format!("omic {}", o.name), "loadings must be D_v × K"));
            }
            if o.obs_log_var.as_ref().is_some_and(|l| l.len() != d) {
                return Err(Error::shape(
                    format!("omic {}", o.name),
                    "observation log-variance length differs from D_v",
                ));
            }
        }
        Ok(())
    }

    /// Fused posterior for a batch of aligned omic matrices.
    pub fn infer(&self, batch: &[&Matrix]) -> Result<(Vec<ModalityPosterior>, GatingWeights, FusedPosterior)> {
        self.infer_with(batch, Exec::default())
    }

    pub fn infer_with(
        &self,
        batch: &[&Matrix],
        exec: Exec,
    ) -> Result<(Vec<ModalityPosterior>, GatingWeights, FusedPosterior)> {
        if batch.len() != self.omics.len() {
            return Err(Error::contract(
                "infer",
                format!("{} inputs for {} omics", batch.len(), self.omics.len()),
            ));
        }
        let posts = self
            .omics
            .iter()
            .zip(batch)
            .map(|(o, x)| encode_with(x, &o.encoder, &o.name, exec))
            .collect::<Result<Vec<_>>>()?;
        let alpha = gate_with(&posts, &self.gating, exec)?;
        let fused = poe_fuse(&posts, &alpha)?;
        Ok((posts, alpha, fused))
    }
}

impl Params for ModelParams {
    fn slices(&self) -> Vec<(String, &[f64])> {
        let mut out = Vec::new();
        for o in &self.omics {
            let p = &o.name;
            for (n, s) in o.encoder.slices() {
                out.push((format!("{p}.encoder.{n}"), s));
            }
            for (n, s) in o.decoder.trunk.slices() {
                out.push((format!("{p}.decoder.trunk.{n}"), s));
            }
            out.push((format!("{p}.decoder.bias"), o.decoder.bias.as_slice()));
            out.push((format!("{p}.loadings"), o.loadings.w.as_slice()));
            if let Some(l) = &o.obs_log_var {
                out.push((format!("{p}.obs_log_var"), l.as_slice()));
            }
        }
        for (n, s) in self.gating.slices() {
            out.push((format!("gating.{n}"), s));
        }
        out
    }

    fn slices_mut(&mut self) -> Vec<(String, &mut [f64])> {
        let mut out = Vec::new();
        for o in &mut self.omics {
            let p = o.name.clone();
            for (n, s) in o.encoder.slices_mut() {
                out.push((format!("{p}.encoder.{n}"), s));
            }
            for (n, s) in o.decoder.trunk.slices_mut() {
                out.push((format!("{p}.decoder.trunk.{n}"), s));
            }
            out.push((format!("{p}.decoder.bias"), o.decoder.bias.as_mut_slice()));
            out.push((format!("{p}.loadings"), o.loadings.w.as_mut_slice()));
            if let Some(l) = &mut o.obs_log_var {
                out.push((format!("{p}.obs_log_var"), l.as_mut_slice()));
            }
        }
        for (n, s) in self.gating.slices_mut() {
            out.push((format!("gating.{n}"), s));
        }
        out
    }
}

// ---------------------------------------------------------------------------
// encoder

pub(crate) struct EncodeRecord {
    pub cache: MlpCache,
    /// Unclamped log-variance head.
    pub raw_log_var: Matrix,
}

pub fn encode(x: &Matrix, encoder: &Mlp, omic: &str) -> Result<ModalityPosterior> {
    encode_with(x, encoder, omic, Exec::default())
}

pub fn encode_with(x: &Matrix, encoder: &Mlp, omic: &str, exec: Exec) -> Result<ModalityPosterior> {
    let out = encoder.predict_with(x, exec).map_err(|e| tag_omic(e, omic))?;
    split_heads(out, omic).map(|(p, _)| p)
}

pub(crate) fn encode_recorded(
    x: &Matrix,
    encoder: &Mlp,
    omic: &str,
    exec: Exec,
) -> Result<(ModalityPosterior, EncodeRecord)> {
    let (out, cache) = encoder.forward_with(x, exec).map_err(|e| tag_omic(e, omic))?;
    let (post, raw_log_var) = split_heads(out, omic)?;
    Ok((post, EncodeRecord { cache, raw_log_var }))
}

fn tag_omic(e: Error, omic: &str) -> Error {
    match e {
        Error::Shape { detail, .. } => Error::shape(format!("encoder of omic {omic}"), detail),
        other => other,
    }
}

fn split_heads(out: Matrix, omic: &str) -> Result<(ModalityPosterior, Matrix)> {
    if !out.cols().is_multiple_of(2) {
        return Err(Error::shape(
            format!("encoder of omic {omic}"),
            "output width must be 2K",
        ));
    }
    if !out.is_finite() {
        return Err(Error::numeric(
            format!("encoder of omic {omic}"),
            "non-finite activations",
        ));
    }
    let k = out.cols() / 2;
    let n = out.rows();
    let mean = Matrix::from_fn(n, k, |i, j| out.get(i, j));
    let raw = Matrix::from_fn(n, k, |i, j| out.get(i, k + j));
    let log_var = raw.map(|r| r.clamp(-LOG_VAR_CLAMP, LOG_VAR_CLAMP));
    let variance = log_var.map(f64::exp);
    Ok((
        ModalityPosterior {
            mean,
            log_var,
            variance,
        },
        raw,
    ))
}

// ---------------------------------------------------------------------------
// gating

/// Gating network input: per sample, `[μ_1, log σ_1², …, μ_V, log σ_V²]`.
pub fn gating_input(posteriors: &[ModalityPosterior]) -> Result<Matrix> {
    let parts: Vec<&Matrix> = posteriors
        .iter()
        .flat_map(|p| [&p.mean, &p.log_var])
        .collect();
    Matrix::hstack(&parts)
}

pub fn softmax_rows(logits: &Matrix) -> Matrix {
    let mut out = logits.clone();
    let c = out.cols();
    if c == 0 {
        return out;
    }
    for row in out.as_mut_slice().chunks_mut(c) {
        let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let mut sum = 0.0;
        for v in row.iter_mut() {
            *v = (*v - max).exp();
            sum += *v;
        }
        for v in row.iter_mut() {
            *v /= sum;
        }
    }
    out
}

fn check_posteriors(posteriors: &[ModalityPosterior], op: &str) -> Result<(usize, usize)> {
    let first = posteriors
        .first()
        .ok_or_else(|| Error::contract(op, "at least one modality is required"))?;
    let (n, k) = first.mean.shape();
    for p in posteriors {
        if p.mean.shape() != (n, k) || p.variance.shape() != (n, k) || p.log_var.shape() != (n, k) {
            return Err(Error::shape(op, "posteriors disagree on N or K"));
        }
    }
    Ok((n, k))
}

pub fn gate(posteriors: &[ModalityPosterior], gating: &Mlp) -> Result<GatingWeights> {
    gate_with(posteriors, gating, Exec::default())
}

pub fn gate_with(posteriors: &[ModalityPosterior], gating: &Mlp, exec: Exec) -> Result<GatingWeights> {
    check_posteriors(posteriors, "gate")?;
    let logits = gating.predict_with(&gating_input(posteriors)?, exec)?;
    check_logits(&logits, posteriors.len())?;
    Ok(GatingWeights {
        alpha: softmax_rows(&logits),
    })
}

pub(crate) fn gate_recorded(
    posteriors: &[ModalityPosterior],
    gating: &Mlp,
    exec: Exec,
) -> Result<(GatingWeights, MlpCache)> {
    check_posteriors(posteriors, "gate")?;
    let (logits, cache) = gating.forward_with(&gating_input(posteriors)?, exec)?;
    check_logits(&logits, posteriors.len())?;
    Ok((
        GatingWeights {
            alpha: softmax_rows(&logits),
        },
        cache,
    ))
}

fn check_logits(logits: &Matrix, v: usize) -> Result<()> {
    if logits.cols() != v {
        return Err(Error::shape(
            "gate",
            format!("gating network emits {} logits for {v} modalities", logits.cols()),
        ));
    }
    if !logits.is_finite() {
        return Err(Error::numeric("gate", "non-finite gating logits"));
    }
    Ok(())
}

// ---------------------------------------------------------------------------
// fusion

pub fn poe_fuse(posteriors: &[ModalityPosterior], alphas: &GatingWeights) -> Result<FusedPosterior> {
    let (n, k) = check_posteriors(posteriors, "poe_fuse")?;
    let v = posteriors.len();
    if alphas.alpha.shape() != (n, v) {
        return Err(Error::shape(
            "poe_fuse",
            format!("gating weights are {:?}, expected {:?}", alphas.alpha.shape(), (n, v)),
        ));
    }
    let precisions: Vec<Matrix> = posteriors.iter().map(ModalityPosterior::precision).collect();
    let mut total = Matrix::zeros(n, k);
    let mut weighted_mean = Matrix::zeros(n, k);
    for i in 0..n {
        for (m, (p, tau)) in posteriors.iter().zip(&precisions).enumerate() {
            let a = alphas.alpha.get(i, m);
            for j in 0..k {
                let w = a * tau.get(i, j);
                total.set(i, j, total.get(i, j) + w);
                weighted_mean.set(i, j, weighted_mean.get(i, j) + w * p.mean.get(i, j));
            }
        }
    }
    if total.as_slice().iter().any(|&t| !(t > 0.0 && t.is_finite())) {
        return Err(Error::numeric("poe_fuse", "total precision is not positive and finite"));
    }
    let variance = total.map(|t| 1.0 / t);
    let mean = Matrix::from_fn(n, k, |i, j| weighted_mean.get(i, j) / total.get(i, j));
    Ok(FusedPosterior {
        mean,
        variance,
        precision: total,
    })
}

// ---------------------------------------------------------------------------
// sampling

pub fn standard_normal<R: Rng + ?Sized>(rng: &mut R, rows: usize, cols: usize) -> Matrix {
    Matrix::from_fn(rows, cols, |_, _| StandardNormal.sample(rng))
}

/// `z = μ_s + σ_s ⊙ ε` for the supplied noise.
pub fn reparameterize(fused: &FusedPosterior, noise: &Matrix) -> Result<LatentSample> {
    if noise.shape() != fused.mean.shape() {
        return Err(Error::shape("reparameterize", "noise shape differs from posterior"));
    }
    let z = Matrix::from_fn(noise.rows(), noise.cols(), |i, j| {
        fused.mean.get(i, j) + fused.variance.get(i, j).max(0.0).sqrt() * noise.get(i, j)
    });
    Ok(LatentSample {
        z,
        noise: noise.clone(),
    })
}

pub fn reparameterize_seeded<R: Rng + ?Sized>(fused: &FusedPosterior, rng: &mut R) -> LatentSample {
    let (n, k) = fused.mean.shape();
    let noise = standard_normal(rng, n, k);
    reparameterize(fused, &noise).expect("noise drawn with matching shape")
}

// ---------------------------------------------------------------------------
// decoding

fn check_decoder(z: &Matrix, loadings: &FactorLoadings, decoder: &SparseDecoder, op: &str) -> Result<()> {
    let k = z.cols();
    if loadings.w.cols() != k {
        return Err(Error::shape(
            op,
            format!("loadings have {} factors, latent has {k}", loadings.w.cols()),
        ));
    }
    if decoder.trunk.in_dim() != k || decoder.trunk.out_dim() != 1 {
        return Err(Error::shape(op, "decoder trunk must map K → 1"));
    }
    if decoder.bias.len() != loadings.w.rows() {
        return Err(Error::shape(op, "decoder bias length differs from D_v"));
    }
    Ok(())
}

/// All `N·D` masked latents, row `n·D + j` holding `z_n ⊙ W_j`.
pub fn masked_latents(z: &Matrix, w: &Matrix, exec: Exec) -> Matrix {
    let (n, k) = z.shape();
    let d = w.rows();
    let mut out = Matrix::zeros(n * d, k);
    if k > 0 && d > 0 {
        exec.for_each_chunk(out.as_mut_slice(), d * k, |i, block| {
            let zi = z.row(i);
            for (j, row) in block.chunks_mut(k).enumerate() {
                for ((o, a), b) in row.iter_mut().zip(zi).zip(w.row(j)) {
                    *o = a * b;
                }
            }
        });
    }
    out
}

/// Vectorized decoder over the whole batch. A `K → H (relu) → 1` trunk goes
/// through a fused per-sample kernel; any other trunk shape falls back to
/// [`sparse_decode_materialized`].
pub fn sparse_decode(z: &Matrix, loadings: &FactorLoadings, decoder: &SparseDecoder) -> Result<Matrix> {
    sparse_decode_with(z, loadings, decoder, Exec::default())
}

pub fn sparse_decode_with(
    z: &Matrix,
    loadings: &FactorLoadings,
    decoder: &SparseDecoder,
    exec: Exec,
) -> Result<Matrix> {
    check_decoder(z, loadings, decoder, "sparse_decode")?;
    let Some(trunk) = fused::OneHiddenTrunk::from_mlp(&decoder.trunk) else {
        return sparse_decode_materialized(z, loadings, decoder, exec);
    };
    let (n, d) = (z.rows(), loadings.w.rows());
    let mut out = Matrix::zeros(n, d);
    if d > 0 {
        exec.for_each_chunk(out.as_mut_slice(), d, |i, row| {
            let mut scratch = fused::Scratch::default();
            fused::decode_sample(&trunk, z.row(i), &loadings.w, &mut scratch, row, None);
            for (y, b) in row.iter_mut().zip(&decoder.bias) {
                *y += b;
            }
        });
    }
    Ok(out)
}

/// Materializes every masked latent of the batch (`N·D × K`) and runs the
/// trunk once over all of them. Works for any trunk shape.
pub fn sparse_decode_materialized(
    z: &Matrix,
    loadings: &FactorLoadings,
    decoder: &SparseDecoder,
    exec: Exec,
) -> Result<Matrix> {
    check_decoder(z, loadings, decoder, "sparse_decode")?;
    let (n, d) = (z.rows(), loadings.w.rows());
    let masked = masked_latents(z, &loadings.w, exec);
    let out = decoder.trunk.predict_with(&masked, exec)?;
    let mut data = out.into_vec();
    if d > 0 {
        for row in data.chunks_mut(d) {
            for (y, b) in row.iter_mut().zip(&decoder.bias) {
                *y += b;
            }
        }
    }
    Matrix::from_vec(n, d, data)
}

/// Feature-by-feature decoder: one trunk pass per feature over that
/// feature's masked latents.
pub fn sparse_decode_reference(
    z: &Matrix,
    loadings: &FactorLoadings,
    decoder: &SparseDecoder,
) -> Result<Matrix> {
    check_decoder(z, loadings, decoder, "sparse_decode_reference")?;
    let (n, k) = z.shape();
    let d = loadings.w.rows();
    let mut out = Matrix::zeros(n, d);
    for j in 0..d {
        let wj = loadings.w.row(j);
        let masked = Matrix::from_fn(n, k, |i, c| z.get(i, c) * wj[c]);
        let (y, _) = decoder.trunk.forward_with(&masked, Exec::Sequential)?;
        for i in 0..n {
            out.set(i, j, y.get(i, 0) + decoder.bias[j]);
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::{finite_diff_check, rng_from_seed, Dense, FD_STEP};

    fn zero_mlp(sizes: &[usize]) -> Mlp {
        let mut rng = rng_from_seed(0);
        Mlp::init(sizes, Activation::Relu, Activation::Identity, &mut rng)
            .unwrap()
            .zeros_like()
    }

    fn post(mean: &[f64], var: &[f64]) -> ModalityPosterior {
        ModalityPosterior::from_mean_variance(
            Matrix::from_vec(1, mean.len(), mean.to_vec()).unwrap(),
            Matrix::from_vec(1, var.len(), var.to_vec()).unwrap(),
        )
        .unwrap()
    }

    fn alphas(rows: &[&[f64]]) -> GatingWeights {
        GatingWeights {
            alpha: Matrix::from_rows(rows).unwrap(),
        }
    }

    #[test]
    fn constant_encoder_reports_biases() {
        let mut enc = zero_mlp(&[3, 4, 4]);
        enc.layers[1].bias = vec![0.1, -0.2, 0.5, 1.5];
        let x = Matrix::from_fn(3, 3, |i, j| (i + j) as f64);
        let p = encode(&x, &enc, "m").unwrap();
        for i in 0..3 {
            assert_eq!(p.mean.row(i), &[0.1, -0.2]);
            assert_eq!(p.variance.row(i), &[0.5f64.exp(), 1.5f64.exp()]);
        }
    }

    #[test]
    fn log_variance_is_clamped() {
        let mut enc = zero_mlp(&[2, 2]);
        enc.layers[0].bias = vec![0.0, 50.0];
        let p = encode(&Matrix::zeros(1, 2), &enc, "m").unwrap();
        assert_eq!(p.variance.get(0, 0), 10f64.exp());
        enc.layers[0].bias = vec![0.0, -50.0];
        let p = encode(&Matrix::zeros(1, 2), &enc, "m").unwrap();
        assert_eq!(p.variance.get(0, 0), (-10f64).exp());
    }

    #[test]
    fn encoder_non_finite_names_omic() {
        let mut enc = zero_mlp(&[2, 2]);
        enc.layers[0].bias = vec![f64::NAN, 0.0];
        let err = encode(&Matrix::zeros(1, 2), &enc, "miRNA").unwrap_err();
        assert!(err.to_string().contains("miRNA"), "{err}");
    }

    #[test]
    fn encoder_gradients_pass_finite_differences() {
        let mut rng = rng_from_seed(21);
        let enc = Mlp::init(&[4, 6, 6], Activation::Tanh, Activation::Identity, &mut rng).unwrap();
        let x = standard_normal(&mut rng, 3, 4);
        let cm = standard_normal(&mut rng, 3, 3);
        let cv = standard_normal(&mut rng, 3, 3);
        let scalar = |p: &ModalityPosterior| -> f64 {
            p.mean.as_slice().iter().zip(cm.as_slice()).map(|(a, b)| a * b).sum::<f64>()
                + p.variance.as_slice().iter().zip(cv.as_slice()).map(|(a, b)| a * b).sum::<f64>()
        };
        let (p, rec) = encode_recorded(&x, &enc, "m", Exec::Sequential).unwrap();
        // d/d raw = c_v · σ² inside the clamp
        let mut grad_out = Matrix::zeros(3, 6);
        for i in 0..3 {
            for j in 0..3 {
                grad_out.set(i, j, cm.get(i, j));
                grad_out.set(i, 3 + j, cv.get(i, j) * p.variance.get(i, j));
            }
        }
        let (g, _) = enc.backward(&rec.cache, &grad_out).unwrap();
        let report = finite_diff_check(&enc.to_flat(), &g.to_flat(), FD_STEP, |theta| {
            let mut e = enc.clone();
            e.set_flat(theta);
            scalar(&encode(&x, &e, "m").unwrap())
        });
        assert!(report.passes(1e-4), "{report:?}");
    }

    #[test]
    fn zero_gating_is_uniform() {
        let gating = zero_mlp(&[12, 5, 3]);
        let posts: Vec<_> = (0..3).map(|_| post(&[0.1, 0.2], &[1.0, 2.0])).collect();
        let a = gate(&posts, &gating).unwrap();
        for &x in a.alpha.as_slice() {
            assert!((x - 1.0 / 3.0).abs() < 1e-15);
        }
        assert!(matches!(gate(&[], &gating), Err(Error::Contract { .. })));
    }

    #[test]
    fn softmax_arithmetic() {
        let a = softmax_rows(&Matrix::from_rows(&[[3f64.ln(), 0.0]]).unwrap());
        assert!((a.get(0, 0) - 0.75).abs() < 1e-15);
        assert!((a.get(0, 1) - 0.25).abs() < 1e-15);
    }

    #[test]
    fn random_gating_rows_on_simplex() {
        let mut rng = rng_from_seed(3);
        for trial in 0..20 {
            let v = 1 + trial % 4;
            let k = 1 + trial % 3;
            let gating = Mlp::init(&[2 * v * k, 8, v], Activation::Relu, Activation::Identity, &mut rng).unwrap();
            let posts: Vec<_> = (0..v)
                .map(|_| {
                    let mean = standard_normal(&mut rng, 7, k);
                    let var = standard_normal(&mut rng, 7, k).map(|x| x.exp());
                    ModalityPosterior::from_mean_variance(mean, var).unwrap()
                })
                .collect();
            let a = gate(&posts, &gating).unwrap();
            for i in 0..7 {
                let row = a.alpha.row(i);
                assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-9);
                assert!(row.iter().all(|&x| x > 0.0 && x <= 1.0));
                if v > 1 {
                    assert!(row.iter().all(|&x| x < 1.0));
                }
            }
        }
    }

    #[test]
    fn fuse_single_expert_is_identity() {
        let p = post(&[0.3], &[0.7]);
        let f = poe_fuse(std::slice::from_ref(&p), &alphas(&[&[1.0]])).unwrap();
        assert_eq!(f.mean.get(0, 0), 0.3);
        assert!((f.variance.get(0, 0) - 0.7).abs() < 1e-15);
    }

    #[test]
    fn fuse_worked_examples() {
        let posts = [post(&[0.0], &[1.0]), post(&[2.0], &[1.0])];
        let f = poe_fuse(&posts, &alphas(&[&[0.5, 0.5]])).unwrap();
        assert!((f.mean.get(0, 0) - 1.0).abs() < 1e-15);
        assert!((f.variance.get(0, 0) - 1.0).abs() < 1e-15);
        let f = poe_fuse(&posts, &alphas(&[&[0.25, 0.75]])).unwrap();
        assert!((f.mean.get(0, 0) - 1.5).abs() < 1e-15);
        assert!((f.variance.get(0, 0) - 1.0).abs() < 1e-15);
    }

    #[test]
    fn fuse_rejects_bad_shapes() {
        let posts = [post(&[0.0], &[1.0]), post(&[2.0, 1.0], &[1.0, 1.0])];
        assert!(poe_fuse(&posts, &alphas(&[&[0.5, 0.5]])).is_err());
        assert!(poe_fuse(&[], &alphas(&[&[]])).is_err());
        let posts = [post(&[0.0], &[1.0])];
        assert!(poe_fuse(&posts, &alphas(&[&[0.0]])).is_err());
    }

    #[test]
    fn reparameterize_examples() {
        let f = FusedPosterior {
            mean: Matrix::from_rows(&[[0.0, 2.0]]).unwrap(),
            variance: Matrix::from_rows(&[[1.0, 4.0]]).unwrap(),
            precision: Matrix::from_rows(&[[1.0, 0.25]]).unwrap(),
        };
        let s = reparameterize(&f, &Matrix::zeros(1, 2)).unwrap();
        assert_eq!(s.z, f.mean);
        let s = reparameterize(&f, &Matrix::filled(1, 2, 1.0)).unwrap();
        assert_eq!(s.z.row(0), &[1.0, 4.0]);
    }

    #[test]
    fn reparameterize_monte_carlo_mean() {
        let n = 100_000;
        let f = FusedPosterior {
            mean: Matrix::from_rows(&[[0.5, -1.0]]).unwrap(),
            variance: Matrix::from_rows(&[[0.25, 2.0]]).unwrap(),
            precision: Matrix::from_rows(&[[4.0, 0.5]]).unwrap(),
        };
        let mut rng = rng_from_seed(42);
        let mut sums = [0.0; 2];
        for _ in 0..n {
            let s = reparameterize_seeded(&f, &mut rng);
            sums[0] += s.z.get(0, 0);
            sums[1] += s.z.get(0, 1);
        }
        for j in 0..2 {
            let m = sums[j] / n as f64;
            let tol = 3.0 * f.variance.get(0, j).sqrt() / (n as f64).sqrt();
            assert!((m - f.mean.get(0, j)).abs() < tol, "dim {j}: {m}");
        }
    }

    fn random_decoder(rng: &mut crate::numerics::Rng, d: usize, k: usize, h: usize) -> (FactorLoadings, SparseDecoder) {
        let trunk = Mlp::init(&[k, h, 1], Activation::Relu, Activation::Identity, rng).unwrap();
        let bias = standard_normal(rng, 1, d).into_vec();
        let loadings = FactorLoadings {
            omic: "m".into(),
            w: standard_normal(rng, d, k),
        };
        (loadings, SparseDecoder { trunk, bias })
    }

    #[test]
    fn decode_identity_and_zero_masks() {
        let mut rng = rng_from_seed(8);
        let (mut l, dec) = random_decoder(&mut rng, 4, 3, 5);
        let z = standard_normal(&mut rng, 6, 3);
        l.w = Matrix::filled(4, 3, 1.0);
        let trunk_z = dec.trunk.predict(&z).unwrap();
        let out = sparse_decode(&z, &l, &dec).unwrap();
        for i in 0..6 {
            for j in 0..4 {
                assert!((out.get(i, j) - (trunk_z.get(i, 0) + dec.bias[j])).abs() < 1e-14);
            }
        }
        for c in 0..3 {
            l.w.set(2, c, 0.0);
        }
        let t0 = dec.trunk.predict(&Matrix::zeros(1, 3)).unwrap().get(0, 0);
        let out = sparse_decode(&z, &l, &dec).unwrap();
        for i in 0..6 {
            assert_eq!(out.get(i, 2), t0 + dec.bias[2]);
        }
    }

    #[test]
    fn vectorized_matches_reference() {
        let mut rng = rng_from_seed(12);
        for (n, d, k, h) in [(1, 1, 1, 1), (5, 7, 3, 4), (17, 23, 6, 9), (3, 9, 5, 16), (4, 6, 3, 21), (0, 4, 2, 3)] {
            let (l, dec) = random_decoder(&mut rng, d, k, h);
            let z = standard_normal(&mut rng, n, k);
            let a = sparse_decode_with(&z, &l, &dec, Exec::Sequential).unwrap();
            let b = sparse_decode_with(&z, &l, &dec, Exec::Parallel).unwrap();
            let r = sparse_decode_reference(&z, &l, &dec).unwrap();
            let m = sparse_decode_materialized(&z, &l, &dec, Exec::Sequential).unwrap();
            assert_eq!(a.as_slice(), b.as_slice());
            if n > 0 {
                assert!(m.max_abs_diff(&r) <= 1e-10);
            }
            assert_eq!(a.shape(), (n, d));
            if n > 0 {
                assert!(a.max_abs_diff(&r) <= 1e-10);
            }
        }
    }

    #[test]
    fn decode_shape_errors() {
        let mut rng = rng_from_seed(1);
        let (l, dec) = random_decoder(&mut rng, 4, 3, 2);
        let z = standard_normal(&mut rng, 2, 2);
        assert!(matches!(sparse_decode(&z, &l, &dec), Err(Error::Shape { .. })));
        assert!(sparse_decode_reference(&z, &l, &dec).is_err());
        let bad = SparseDecoder {
            trunk: Mlp {
                layers: vec![Dense {
                    weight: Matrix::zeros(3, 2),
                    bias: vec![0.0; 2],
                    activation: Activation::Identity,
                }],
            },
            bias: vec![0.0; 4],
        };
        assert!(sparse_decode(&standard_normal(&mut rng, 2, 3), &l, &bad).is_err());
    }

    #[test]
    fn model_init_shapes() {
        let mut rng = rng_from_seed(5);
        let cfg = ModelConfig {
            latent_dim: 3,
            encoder_hidden: vec![8],
            gating_hidden: vec![4],
            decoder_hidden: vec![5],
        };
        let m = ModelParams::init(&[("a".into(), 6), ("b".into(), 4)], &cfg, false, &mut rng).unwrap();
        assert_eq!(m.num_omics(), 2);
        assert_eq!(m.omics[0].features(), 6);
        assert_eq!(m.gating.sizes(), vec![12, 4, 2]);
        assert_eq!(m.zeros_like().num_params(), m.num_params());
        assert!(m.omics[1].loadings.w.as_slice().iter().all(|w| w.abs() < 0.1));
    }
}
