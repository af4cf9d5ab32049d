//! Batched decoder kernel for the default trunk shape `K → H (relu) → 1`.
//!
//! For one sample the first trunk layer applied to every masked latent is
//! `pre_j = b1 + (z ⊙ W_j)·W1 = b1 + W_j·Q` with `Q = diag(z)·W1`, so all
//! `D` features of a sample come out of a single `D×K · K×H` product. The
//! product is register-tiled and the relu and output layer are applied while
//! each tile is still hot, so the `N·D×H` hidden activations never hit memory.
//! Every sample is independent and each output is summed in a fixed order.

use crate::numerics::{Activation, Matrix, Mlp};

const TILE_H: usize = 8;

/// Borrowed view of a trunk with exactly one relu hidden layer and a scalar
/// identity output.
#[derive(Clone, Copy)]
pub(crate) struct OneHiddenTrunk<'a> {
    pub w1: &'a [f64],
    pub b1: &'a [f64],
    pub w2: &'a [f64],
    pub b2: f64,
    pub k: usize,
    pub h: usize,
}

impl<'a> OneHiddenTrunk<'a> {
    pub fn from_mlp(mlp: &'a Mlp) -> Option<Self> {
        match mlp.layers.as_slice() {
            [hidden, out]
                if hidden.activation == Activation::Relu
                    && out.activation == Activation::Identity
                    && out.out_dim() == 1
                    && out.in_dim() == hidden.out_dim() =>
            {
                Some(OneHiddenTrunk {
                    w1: hidden.weight.as_slice(),
                    b1: &hidden.bias,
                    w2: out.weight.as_slice(),
                    b2: out.bias[0],
                    k: hidden.in_dim(),
                    h: hidden.out_dim(),
                })
            }
            _ => None,
        }
    }

    /// `Q = diag(z)·W1`.
    fn fill_q(&self, z: &[f64], q: &mut [f64]) {
        let h = self.h;
        for (p, &zp) in z.iter().enumerate() {
            let src = &self.w1[p * h..(p + 1) * h];
            for (dst, &w) in q[p * h..(p + 1) * h].iter_mut().zip(src) {
                *dst = zp * w;
            }
        }
    }
}

/// Scratch buffers reused across samples.
#[derive(Default)]
pub(crate) struct Scratch {
    q: Vec<f64>,
    pre: Vec<f64>,
    dpre: Vec<f64>,
    r: Vec<f64>,
}

/// Pre-activations of rows `j0..j0+R` for hidden units `hb..hb+TILE_H`.
#[inline(always)]
fn tile<const R: usize>(
    w: &[f64],
    k: usize,
    j0: usize,
    q: &[f64],
    h: usize,
    hb: usize,
    b1: &[f64],
) -> [[f64; TILE_H]; R] {
    let mut acc = [[0.0; TILE_H]; R];
    let bias: &[f64; TILE_H] = b1[hb..hb + TILE_H].try_into().unwrap();
    for row in acc.iter_mut() {
        *row = *bias;
    }
    let w_rows: [&[f64]; R] = std::array::from_fn(|r| &w[(j0 + r) * k..(j0 + r + 1) * k]);
    for p in 0..k {
        let qrow: &[f64; TILE_H] = q[p * h + hb..p * h + hb + TILE_H].try_into().unwrap();
        for r in 0..R {
            let a = w_rows[r][p];
            for c in 0..TILE_H {
                acc[r][c] += a * qrow[c];
            }
        }
    }
    acc
}

#[inline(always)]
fn pre_scalar(w_row: &[f64], q: &[f64], h: usize, col: usize, b1: f64) -> f64 {
    let mut s = b1;
    for (p, &a) in w_row.iter().enumerate() {
        s += a * q[p * h + col];
    }
    s
}

#[inline(always)]
fn rows_block<const R: usize>(
    trunk: &OneHiddenTrunk<'_>,
    w: &[f64],
    q: &[f64],
    j: usize,
    out: &mut [f64],
    pre_out: &mut Option<&mut [f64]>,
) {
    let (k, h) = (trunk.k, trunk.h);
    let h_tiled = h - h % TILE_H;
    let mut y = [trunk.b2; R];
    let mut hb = 0;
    while hb < h_tiled {
        let acc = tile::<R>(w, k, j, q, h, hb, trunk.b1);
        for r in 0..R {
            for c in 0..TILE_H {
                y[r] += acc[r][c].max(0.0) * trunk.w2[hb + c];
            }
            if let Some(pre) = pre_out.as_deref_mut() {
                pre[(j + r) * h + hb..(j + r) * h + hb + TILE_H].copy_from_slice(&acc[r]);
            }
        }
        hb += TILE_H;
    }
    for r in 0..R {
        let w_row = &w[(j + r) * k..(j + r + 1) * k];
        for col in h_tiled..h {
            let p = pre_scalar(w_row, q, h, col, trunk.b1[col]);
            y[r] += p.max(0.0) * trunk.w2[col];
            if let Some(pre) = pre_out.as_deref_mut() {
                pre[(j + r) * h + col] = p;
            }
        }
        out[j + r] = y[r];
    }
}

#[inline(always)]
fn decode_sample_impl<const R: usize>(
    trunk: &OneHiddenTrunk<'_>,
    z: &[f64],
    w: &Matrix,
    scratch: &mut Scratch,
    out: &mut [f64],
    mut pre_out: Option<&mut [f64]>,
) {
    let (k, h) = (trunk.k, trunk.h);
    let d = w.rows();
    scratch.q.resize(k * h, 0.0);
    trunk.fill_q(z, &mut scratch.q);
    let q = &scratch.q;
    let w = w.as_slice();
    let mut j = 0;
    while j + R <= d {
        rows_block::<R>(trunk, w, q, j, out, &mut pre_out);
        j += R;
    }
    while j < d {
        rows_block::<1>(trunk, w, q, j, out, &mut pre_out);
        j += 1;
    }
}

// The wider AVX2 tile only changes instruction selection: multiplies and adds
// stay separate, so both paths produce identical bits.
#[cfg(target_arch = "x86_64")]
#[target_feature(enable = "avx2")]
unsafe fn decode_sample_avx2(
    trunk: &OneHiddenTrunk<'_>,
    z: &[f64],
    w: &Matrix,
    scratch: &mut Scratch,
    out: &mut [f64],
    pre_out: Option<&mut [f64]>,
) {
    decode_sample_impl::<4>(trunk, z, w, scratch, out, pre_out)
}

/// Decodes all features of one sample into `out` (length `D`, bias not yet
/// added). When `pre_out` is given it receives the `D×H` pre-activations.
pub(crate) fn decode_sample(
    trunk: &OneHiddenTrunk<'_>,
    z: &[f64],
    w: &Matrix,
    scratch: &mut Scratch,
    out: &mut [f64],
    pre_out: Option<&mut [f64]>,
) {
    #[cfg(target_arch = "x86_64")]
    if std::is_x86_feature_detected!("avx2") {
        // SAFETY: avx2 support was detected at runtime.
        return unsafe { decode_sample_avx2(trunk, z, w, scratch, out, pre_out) };
    }
    decode_sample_impl::<2>(trunk, z, w, scratch, out, pre_out)
}

/// Gradient accumulators for one decoder over a group of samples.
#[derive(Clone, Debug)]
pub(crate) struct TrunkGrads {
    pub w1: Vec<f64>,
    pub b1: Vec<f64>,
    pub w2: Vec<f64>,
    pub b2: f64,
    pub bias: Vec<f64>,
    pub loadings: Vec<f64>,
}

impl TrunkGrads {
    pub fn zeros(k: usize, h: usize, d: usize) -> Self {
        TrunkGrads {
            w1: vec![0.0; k * h],
            b1: vec![0.0; h],
            w2: vec![0.0; h],
            b2: 0.0,
            bias: vec![0.0; d],
            loadings: vec![0.0; d * k],
        }
    }

    pub fn add_assign(&mut self, other: &TrunkGrads) {
        let add = |a: &mut [f64], b: &[f64]| a.iter_mut().zip(b).for_each(|(x, y)| *x += y);
        add(&mut self.w1, &other.w1);
        add(&mut self.b1, &other.b1);
        add(&mut self.w2, &other.w2);
        self.b2 += other.b2;
        add(&mut self.bias, &other.bias);
        add(&mut self.loadings, &other.loadings);
    }
}

#[inline(always)]
fn dot(a: &[f64], b: &[f64]) -> f64 {
    let mut acc = [0.0; 4];
    let ca = a.chunks_exact(4);
    let cb = b.chunks_exact(4);
    let (ra, rb) = (ca.remainder(), cb.remainder());
    for (x, y) in ca.zip(cb) {
        for i in 0..4 {
            acc[i] += x[i] * y[i];
        }
    }
    let mut s = (acc[0] + acc[1]) + (acc[2] + acc[3]);
    for (x, y) in ra.iter().zip(rb) {
        s += x * y;
    }
    s
}

/// Forward and backward pass for one sample.
///
/// `target_grad(j, y_j)` returns `dL/dy_j` for the decoded value (bias
/// included). Gradients are accumulated into `grads` and `dz` (length `K`).
#[allow(clippy::too_many_arguments)]
pub(crate) fn decode_sample_backward(
    trunk: &OneHiddenTrunk<'_>,
    z: &[f64],
    w: &Matrix,
    bias: &[f64],
    scratch: &mut Scratch,
    y: &mut [f64],
    target_grad: impl FnMut(usize, f64) -> f64,
    grads: &mut TrunkGrads,
    dz: &mut [f64],
) {
    #[cfg(target_arch = "x86_64")]
    if std::is_x86_feature_detected!("avx2") {
        // SAFETY: avx2 support was detected at runtime.
        return unsafe { backward_avx2(trunk, z, w, bias, scratch, y, target_grad, grads, dz) };
    }
    backward_impl::<2>(trunk, z, w, bias, scratch, y, target_grad, grads, dz)
}

#[cfg(target_arch = "x86_64")]
#[target_feature(enable = "avx2")]
#[allow(clippy::too_many_arguments)]
unsafe fn backward_avx2(
    trunk: &OneHiddenTrunk<'_>,
    z: &[f64],
    w: &Matrix,
    bias: &[f64],
    scratch: &mut Scratch,
    y: &mut [f64],
    target_grad: impl FnMut(usize, f64) -> f64,
    grads: &mut TrunkGrads,
    dz: &mut [f64],
) {
    backward_impl::<4>(trunk, z, w, bias, scratch, y, target_grad, grads, dz)
}

#[inline(always)]
#[allow(clippy::too_many_arguments)]
fn backward_impl<const R: usize>(
    trunk: &OneHiddenTrunk<'_>,
    z: &[f64],
    w: &Matrix,
    bias: &[f64],
    scratch: &mut Scratch,
    y: &mut [f64],
    mut target_grad: impl FnMut(usize, f64) -> f64,
    grads: &mut TrunkGrads,
    dz: &mut [f64],
) {
    let (k, h) = (trunk.k, trunk.h);
    let d = w.rows();
    let mut pre = std::mem::take(&mut scratch.pre);
    pre.resize(d * h, 0.0);
    decode_sample_impl::<R>(trunk, z, w, scratch, y, Some(&mut pre));

    let mut dpre = std::mem::take(&mut scratch.dpre);
    dpre.resize(d * h, 0.0);
    for j in 0..d {
        y[j] += bias[j];
        let g = target_grad(j, y[j]);
        grads.bias[j] += g;
        grads.b2 += g;
        let pre_j = &pre[j * h..(j + 1) * h];
        let dpre_j = &mut dpre[j * h..(j + 1) * h];
        for c in 0..h {
            let p = pre_j[c];
            if p > 0.0 {
                grads.w2[c] += g * p;
                dpre_j[c] = g * trunk.w2[c];
            } else {
                dpre_j[c] = 0.0;
            }
        }
    }

    // db1 and R = Wᵀ·dpre (K×H)
    let mut r = std::mem::take(&mut scratch.r);
    r.clear();
    r.resize(k * h, 0.0);
    let wsl = w.as_slice();
    for j in 0..d {
        let dpre_j = &dpre[j * h..(j + 1) * h];
        for (b, &g) in grads.b1.iter_mut().zip(dpre_j) {
            *b += g;
        }
        let w_row = &wsl[j * k..(j + 1) * k];
        for (p, &a) in w_row.iter().enumerate() {
            if a == 0.0 {
                continue;
            }
            for (rv, &g) in r[p * h..(p + 1) * h].iter_mut().zip(dpre_j) {
                *rv += a * g;
            }
        }
    }
    for p in 0..k {
        let r_row = &r[p * h..(p + 1) * h];
        let w1_row = &trunk.w1[p * h..(p + 1) * h];
        for (gw, &rv) in grads.w1[p * h..(p + 1) * h].iter_mut().zip(r_row) {
            *gw += z[p] * rv;
        }
        dz[p] += dot(r_row, w1_row);
    }

    // dW_j += dpre_j · Qᵀ
    let q = &scratch.q;
    for j in 0..d {
        let dpre_j = &dpre[j * h..(j + 1) * h];
        let gl = &mut grads.loadings[j * k..(j + 1) * k];
        for p in 0..k {
            gl[p] += dot(dpre_j, &q[p * h..(p + 1) * h]);
        }
    }

    scratch.pre = pre;
    scratch.dpre = dpre;
    scratch.r = r;
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{masked_latents, standard_normal};
    use crate::numerics::{rng_from_seed, Exec};

    fn trunk_mlp(k: usize, h: usize, seed: u64) -> Mlp {
        let mut rng = rng_from_seed(seed);
        Mlp::init(&[k, h, 1], Activation::Relu, Activation::Identity, &mut rng).unwrap()
    }

    #[test]
    fn only_default_shape_is_fused() {
        let mut rng = rng_from_seed(0);
        assert!(OneHiddenTrunk::from_mlp(&trunk_mlp(3, 5, 0)).is_some());
        let deep = Mlp::init(&[3, 4, 4, 1], Activation::Relu, Activation::Identity, &mut rng).unwrap();
        assert!(OneHiddenTrunk::from_mlp(&deep).is_none());
        let tanh = Mlp::init(&[3, 4, 1], Activation::Tanh, Activation::Identity, &mut rng).unwrap();
        assert!(OneHiddenTrunk::from_mlp(&tanh).is_none());
    }

    #[test]
    fn tile_heights_agree_bitwise() {
        let mut rng = rng_from_seed(4);
        for (d, k, h) in [(1, 1, 1), (7, 3, 8), (13, 5, 19), (9, 4, 16)] {
            let mlp = trunk_mlp(k, h, d as u64);
            let t = OneHiddenTrunk::from_mlp(&mlp).unwrap();
            let w = standard_normal(&mut rng, d, k);
            let z = standard_normal(&mut rng, 1, k);
            let mut a = vec![0.0; d];
            let mut b = vec![0.0; d];
            let mut c = vec![0.0; d];
            let mut s = Scratch::default();
            decode_sample_impl::<1>(&t, z.row(0), &w, &mut s, &mut a, None);
            decode_sample_impl::<2>(&t, z.row(0), &w, &mut s, &mut b, None);
            decode_sample(&t, z.row(0), &w, &mut s, &mut c, None);
            assert_eq!(a, b);
            assert_eq!(a, c);
        }
    }

    #[test]
    fn backward_matches_generic_network() {
        let mut rng = rng_from_seed(9);
        for (n, d, k, h) in [(3, 5, 2, 3), (4, 11, 6, 16), (2, 9, 3, 21)] {
            let mlp = trunk_mlp(k, h, n as u64);
            let t = OneHiddenTrunk::from_mlp(&mlp).unwrap();
            let w = standard_normal(&mut rng, d, k);
            let z = standard_normal(&mut rng, n, k);
            let bias = standard_normal(&mut rng, 1, d).into_vec();
            let upstream = standard_normal(&mut rng, n, d);

            let mut grads = TrunkGrads::zeros(k, h, d);
            let mut dz = Matrix::zeros(n, k);
            let mut y = Matrix::zeros(n, d);
            let mut s = Scratch::default();
            for i in 0..n {
                decode_sample_backward(
                    &t,
                    z.row(i),
                    &w,
                    &bias,
                    &mut s,
                    y.row_mut(i),
                    |j, _| upstream.get(i, j),
                    &mut grads,
                    dz.row_mut(i),
                );
            }

            // generic path on materialized masked latents
            let masked = masked_latents(&z, &w, Exec::Sequential);
            let (out, cache) = mlp.forward_with(&masked, Exec::Sequential).unwrap();
            let g_out = Matrix::from_vec(n * d, 1, upstream.as_slice().to_vec()).unwrap();
            let (g, g_masked) = mlp.backward(&cache, &g_out).unwrap();
            for i in 0..n {
                for j in 0..d {
                    assert!((y.get(i, j) - out.get(i * d + j, 0) - bias[j]).abs() < 1e-12);
                }
            }
            let close = |a: &[f64], b: &[f64]| a.iter().zip(b).all(|(x, y)| (x - y).abs() < 1e-10);
            assert!(close(&grads.w1, g.layers[0].weight.as_slice()));
            assert!(close(&grads.b1, &g.layers[0].bias));
            assert!(close(&grads.w2, g.layers[1].weight.as_slice()));
            assert!((grads.b2 - g.layers[1].bias[0]).abs() < 1e-10);
            let col_sums = upstream.column_sums();
            assert!(close(&grads.bias, &col_sums));
            for i in 0..n {
                for c in 0..k {
                    let want: f64 = (0..d).map(|j| g_masked.get(i * d + j, c) * w.get(j, c)).sum();
                    assert!((dz.get(i, c) - want).abs() < 1e-10);
                }
            }
            for j in 0..d {
                for c in 0..k {
                    let want: f64 = (0..n).map(|i| g_masked.get(i * d + j, c) * z.get(i, c)).sum();
                    assert!((grads.loadings[j * k + c] - want).abs() < 1e-10);
                }
            }
        }
    }
}
