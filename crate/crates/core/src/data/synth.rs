use rand::Rng;
use rand_distr::{Distribution, StandardNormal, Uniform};

use super::{MultiOmicsDataset, OmicsMatrix};
use crate::error::{Error, Result};
use crate::numerics::{rng_from_seed, Matrix};

/// Synthetic multi-omics problem with block-planted loadings.
///
/// Latents come from a `classes`-component Gaussian mixture with unit
/// within-class covariance. The centres are the vertices of a regular simplex
/// spanning the first `classes − 1` coordinates, scaled so each of those
/// coordinates has between-class variance `separation²`. Latent coordinates
/// are therefore uncorrelated, which keeps the planted factors identifiable
/// up to permutation and sign. Feature `j` of an
/// omic loads on `block_width` consecutive factors starting at `⌊j·K/D⌋`
/// (wrapping), with magnitudes in `±[0.5, 1.5]`. Values are `x = W z` plus
/// Gaussian noise whose standard deviation is `noise_scale` times the
/// feature's noiseless standard deviation.
#[derive(Clone, Debug, PartialEq)]
pub struct SynthSpec {
    pub samples: usize,
    pub features: Vec<usize>,
    pub latent_dim: usize,
    /// Active factors per feature, one entry per omic.
    pub block_width: Vec<usize>,
    pub classes: usize,
    pub separation: f64,
    pub noise_scale: f64,
    pub seed: u64,
}

impl Default for SynthSpec {
    fn default() -> Self {
        SynthSpec {
            samples: 500,
            features: vec![200, 150],
            latent_dim: 8,
            block_width: vec![2, 2],
            classes: 9,
            separation: 3.0,
            noise_scale: 0.1,
            seed: 21,
        }
    }
}

impl SynthSpec {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(format!("synthetic spec: {m}")));
        if self.latent_dim == 0 || self.samples == 0 || self.classes == 0 {
            return bad("samples, latent_dim and classes must be positive".into());
        }
        if self.features.is_empty() || self.features.contains(&0) {
            return bad("every omic needs at least one feature".into());
        }
        if self.block_width.len() != self.features.len() {
            return bad(format!(
                "{} block widths for {} omics",
                self.block_width.len(),
                self.features.len()
            ));
        }
        if self.classes > self.latent_dim + 1 {
            return bad(format!(
                "{} classes need latent_dim ≥ {}",
                self.classes,
                self.classes - 1
            ));
        }
        if self.block_width.iter().any(|&w| w == 0 || w > self.latent_dim) {
            return bad("block widths must lie in 1..=latent_dim".into());
        }
        if !(self.noise_scale >= 0.0) || !(self.separation >= 0.0) {
            return bad("noise_scale and separation must be non-negative".into());
        }
        Ok(())
    }

    /// Fraction of zero entries in the planted loadings of omic `v`.
    pub fn inactive_fraction(&self, v: usize) -> f64 {
        1.0 - self.block_width[v] as f64 / self.latent_dim as f64
    }

    pub fn omic_name(v: usize) -> String {
        format!("omic{}", v + 1)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SynthData {
    pub dataset: MultiOmicsDataset,
    /// Planted `D_v × K` loadings per omic.
    pub loadings: Vec<Matrix>,
    pub latents: Matrix,
    /// Mixture component of each sample.
    pub classes: Vec<usize>,
}

pub fn planted_loadings<R: Rng + ?Sized>(d: usize, k: usize, width: usize, rng: &mut R) -> Matrix {
    let mag = Uniform::new_inclusive(0.5, 1.5).expect("valid range");
    let mut w = Matrix::zeros(d, k);
    for j in 0..d {
        let start = j * k / d;
        for t in 0..width {
            let sign = if rng.random::<bool>() { 1.0 } else { -1.0 };
            w.set(j, (start + t) % k, sign * mag.sample(rng));
        }
    }
    w
}

/// Class centres on a regular simplex via Helmert contrasts: coordinate
/// `m − 1` of class `c` is `s·√C·h_m(c)` with `h_m` orthonormal over classes.
pub fn simplex_centres(classes: usize, k: usize, separation: f64) -> Matrix {
    let scale = separation * (classes as f64).sqrt();
    Matrix::from_fn(classes, k, |c, col| {
        let m = col + 1;
        if m >= classes {
            return 0.0;
        }
        let norm = ((m * (m + 1)) as f64).sqrt();
        let h = match c.cmp(&m) {
            std::cmp::Ordering::Less => 1.0 / norm,
            std::cmp::Ordering::Equal => -(m as f64) / norm,
            std::cmp::Ordering::Greater => 0.0,
        };
        scale * h
    })
}

fn normal<R: Rng + ?Sized>(rng: &mut R) -> f64 {
    StandardNormal.sample(rng)
}

pub fn synth_generate(spec: &SynthSpec) -> Result<SynthData> {
    spec.validate()?;
    let mut rng = rng_from_seed(spec.seed);
    let (n, k) = (spec.samples, spec.latent_dim);
    let centres = simplex_centres(spec.classes, k, spec.separation);
    let classes: Vec<usize> = (0..n).map(|i| i % spec.classes).collect();
    let latents = Matrix::from_fn(n, k, |i, c| centres.get(classes[i], c) + normal(&mut rng));
    let ids: Vec<String> = (0..n).map(|i| format!("s{i:05}")).collect();

    let mut omics = Vec::with_capacity(spec.features.len());
    let mut loadings = Vec::with_capacity(spec.features.len());
    for (v, (&d, &width)) in spec.features.iter().zip(&spec.block_width).enumerate() {
        let name = SynthSpec::omic_name(v);
        let w = planted_loadings(d, k, width, &mut rng);
        let mut x = latents.matmul_t(&w)?;
        if spec.noise_scale > 0.0 {
            let means = x.column_means();
            let mut sd = vec![0.0; d];
            for i in 0..n {
                for j in 0..d {
                    let e = x.get(i, j) - means[j];
                    sd[j] += e * e;
                }
            }
            sd.iter_mut().for_each(|s| *s = (*s / n as f64).sqrt());
            for i in 0..n {
                for j in 0..d {
                    x.set(i, j, x.get(i, j) + spec.noise_scale * sd[j] * normal(&mut rng));
                }
            }
        }
        let features = (0..d).map(|j| format!("{name}_f{j:04}")).collect();
        omics.push(OmicsMatrix::new(&name, ids.clone(), features, x)?);
        loadings.push(w);
    }
    let labels = Some(classes.iter().map(|c| format!("class{c}")).collect());
    Ok(SynthData {
        dataset: MultiOmicsDataset { omics, labels },
        loadings,
        latents,
        classes,
    })
}
