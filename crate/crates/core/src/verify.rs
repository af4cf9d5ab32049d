//! Self-checks behind `poems check`: analytic gradients against central
//! differences, gated fusion against a numerical tempered product, metric
//! enumeration against brute force, spike-and-slab worked values, and decoder
//! path equivalence. Every oracle here is computed independently of the code
//! it checks.

use std::fmt::Write as _;
use std::time::Instant;

use rand::Rng;

use crate::error::{Error, Result};
use crate::eval::{hungarian_acc, nmi};
use crate::model::{
    poe_fuse, sparse_decode_reference, sparse_decode_with, standard_normal, GatingWeights, ModalityPosterior,
    ModelConfig, ModelParams, SparseDecoder,
};
use crate::numerics::{finite_diff_check, rng_from_seed, Activation, Exec, Matrix, Mlp, Params, FD_STEP};
use crate::objective::{elbo_loss, elbo_step, LossConfig};
use crate::sparsity::{
    mixed_rate, slab_probability, ssl_eta_update, ssl_penalty_grad, FactorLoadings, SslHyper, SslState,
};

pub const GRAD_TOL: f64 = 1e-4;
pub const POE_TOL: f64 = 1e-6;
pub const SSL_TOL: f64 = 1e-12;
pub const DECODE_TOL: f64 = 1e-10;

#[derive(Clone, Debug, PartialEq)]
pub struct CheckOutcome {
    pub name: &'static str,
    pub max_error: f64,
    pub tolerance: f64,
    pub passed: bool,
    pub detail: String,
    pub seconds: f64,
}

impl CheckOutcome {
    fn new(name: &'static str, max_error: f64, tolerance: f64, detail: String) -> Self {
        CheckOutcome {
            name,
            max_error,
            tolerance,
            passed: max_error.is_finite() && max_error <= tolerance,
            detail,
            seconds: 0.0,
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct CheckReport {
    pub checks: Vec<CheckOutcome>,
}

impl CheckReport {
    pub fn all_passed(&self) -> bool {
        self.checks.iter().all(|c| c.passed)
    }

    pub fn failures(&self) -> Vec<&'static str> {
        self.checks.iter().filter(|c| !c.passed).map(|c| c.name).collect()
    }

    pub fn to_text(&self) -> String {
        let mut s = String::new();
        for c in &self.checks {
            writeln!(
                s,
                "{} {:<22} max_error={:.3e} tol={:.0e} time={:.2}s {}",
                if c.passed { "PASS" } else { "FAIL" },
                c.name,
                c.max_error,
                c.tolerance,
                c.seconds,
                c.detail
            )
            .unwrap();
        }
        s
    }
}

fn timed(f: impl FnOnce() -> CheckOutcome) -> CheckOutcome {
    let t = Instant::now();
    let mut c = f();
    c.seconds = t.elapsed().as_secs_f64();
    c
}

/// Four samples, omics of widths 6 and 4, K = 3, loadings drawn from
/// N(0, 1) so the decoder path is not swamped by the penalty.
pub fn gradient_toy(seed: u64) -> (ModelParams, Vec<SslState>, Vec<Matrix>, Matrix) {
    let mut rng = rng_from_seed(seed);
    let cfg = ModelConfig {
        latent_dim: 3,
        encoder_hidden: vec![5],
        gating_hidden: vec![4],
        decoder_hidden: vec![6],
    };
    let mut model = ModelParams::init(&[("a".into(), 6), ("b".into(), 4)], &cfg, false, &mut rng)
        .expect("valid toy architecture");
    for o in &mut model.omics {
        o.loadings.w = standard_normal(&mut rng, o.features(), 3);
    }
    let ssl = model
        .omics
        .iter()
        .map(|o| SslState::new(&o.loadings, SslHyper::default()).expect("default hyperparameters"))
        .collect();
    let xs = vec![standard_normal(&mut rng, 4, 6), standard_normal(&mut rng, 4, 4)];
    let noise = standard_normal(&mut rng, 4, 3);
    (model, ssl, xs, noise)
}

/// Full-loss gradient check. `flip_kl` compares against the loss with the
/// KL sign flipped, a mutation the check must catch.
pub fn gradient_check(flip_kl: bool) -> CheckOutcome {
    let (model, ssl, xs, noise) = gradient_toy(21);
    let batch: Vec<&Matrix> = xs.iter().collect();
    let cfg = LossConfig::default();
    let (_, g) = match elbo_step(&batch, &noise, &model, &ssl, &cfg, Exec::Sequential) {
        Ok(r) => r,
        Err(e) => return CheckOutcome::new("gradient", f64::INFINITY, GRAD_TOL, e.to_string()),
    };
    let report = finite_diff_check(&model.to_flat(), &g.to_flat(), FD_STEP, |theta| {
        let mut m = model.clone();
        m.set_flat(theta);
        match elbo_loss(&batch, &noise, &m, &ssl, &cfg, Exec::Sequential) {
            Ok(l) if flip_kl => l.total - 2.0 * l.kl,
            Ok(l) => l.total,
            Err(_) => f64::NAN,
        }
    });
    let worst = model
        .locate(report.worst_index)
        .map_or_else(|| "?".to_string(), |(n, i)| format!("{n}[{i}]"));
    CheckOutcome::new(
        "gradient",
        report.max_rel_error,
        GRAD_TOL,
        format!("{} parameters, worst at {worst}", report.checked),
    )
}

/// Mean and variance of `∏_v N(z; μ_v, σ_v²)^{α_v}` by direct numerical
/// integration on a uniform grid.
pub fn tempered_product_moments(mu: &[f64], var: &[f64], alpha: &[f64]) -> (f64, f64) {
    // The product is narrower than every tempered factor and at least as wide
    // as the narrowest expert, which fixes the window and the spacing.
    let narrowest_factor = mu
        .iter()
        .zip(var)
        .zip(alpha)
        .filter(|(_, &a)| a > 0.0)
        .map(|((_, v), a)| (v / a).sqrt())
        .fold(f64::INFINITY, f64::min);
    let min_sd = var.iter().map(|v| v.sqrt()).fold(f64::INFINITY, f64::min);
    let lo = mu.iter().cloned().fold(f64::INFINITY, f64::min) - 14.0 * narrowest_factor;
    let hi = mu.iter().cloned().fold(f64::NEG_INFINITY, f64::max) + 14.0 * narrowest_factor;
    let h = min_sd / 16.0;
    let n = ((hi - lo) / h).ceil() as usize + 1;
    let logp = |z: f64| -> f64 {
        mu.iter()
            .zip(var)
            .zip(alpha)
            .map(|((m, v), a)| a * (-0.5 * (z - m) * (z - m) / v - 0.5 * (2.0 * std::f64::consts::PI * v).ln()))
            .sum()
    };
    let grid: Vec<f64> = (0..n).map(|i| lo + i as f64 * h).collect();
    let lp: Vec<f64> = grid.iter().map(|&z| logp(z)).collect();
    let top = lp.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let w: Vec<f64> = lp.iter().map(|l| (l - top).exp()).collect();
    let mass: f64 = w.iter().sum();
    let mean = grid.iter().zip(&w).map(|(z, p)| z * p).sum::<f64>() / mass;
    let var = grid.iter().zip(&w).map(|(z, p)| (z - mean) * (z - mean) * p).sum::<f64>() / mass;
    (mean, var)
}

/// Random fusion problems (V ≤ 4, K ≤ 5) against the grid oracle.
pub fn poe_check(cases: usize, seed: u64) -> CheckOutcome {
    let mut rng = rng_from_seed(seed);
    let mut worst = 0.0f64;
    for _ in 0..cases {
        let v = rng.random_range(1..=4);
        let k = rng.random_range(1..=5);
        let n = 2;
        let posts: Vec<ModalityPosterior> = (0..v)
            .map(|_| {
                let mean = Matrix::from_fn(n, k, |_, _| rng.random_range(-3.0..3.0));
                let var = Matrix::from_fn(n, k, |_, _| rng.random_range(-1.5f64..1.5).exp());
                ModalityPosterior::from_mean_variance(mean, var).expect("positive variances")
            })
            .collect();
        let mut alpha = Matrix::from_fn(n, v, |_, _| rng.random_range(-1.5f64..1.5).exp());
        for i in 0..n {
            let s: f64 = alpha.row(i).iter().sum();
            alpha.row_mut(i).iter_mut().for_each(|a| *a /= s);
        }
        let fused = match poe_fuse(&posts, &GatingWeights { alpha: alpha.clone() }) {
            Ok(f) => f,
            Err(e) => return CheckOutcome::new("poe_fusion", f64::INFINITY, POE_TOL, e.to_string()),
        };
        for i in 0..n {
            for c in 0..k {
                let mu: Vec<f64> = posts.iter().map(|p| p.mean.get(i, c)).collect();
                let var: Vec<f64> = posts.iter().map(|p| p.variance.get(i, c)).collect();
                let (m, s2) = tempered_product_moments(&mu, &var, alpha.row(i));
                worst = worst
                    .max((fused.mean.get(i, c) - m).abs())
                    .max((fused.variance.get(i, c) - s2).abs());
            }
        }
    }
    CheckOutcome::new("poe_fusion", worst, POE_TOL, format!("{cases} random cases"))
}

fn class_count(y: &[usize]) -> usize {
    y.iter().max().map_or(0, |m| m + 1)
}

fn permutations(m: usize) -> Vec<Vec<usize>> {
    if m == 0 {
        return vec![vec![]];
    }
    let mut out = Vec::new();
    for p in permutations(m - 1) {
        for pos in 0..=p.len() {
            let mut q = p.clone();
            q.insert(pos, m - 1);
            out.push(q);
        }
    }
    out
}

/// Matched accuracy by trying every relabeling of the predictions.
pub fn exhaustive_accuracy(y: &[usize], yhat: &[usize]) -> f64 {
    let m = class_count(y).max(class_count(yhat));
    permutations(m)
        .iter()
        .map(|pi| y.iter().zip(yhat).filter(|(a, b)| pi[**b] == **a).count())
        .max()
        .unwrap_or(0) as f64
        / y.len() as f64
}

/// NMI from the joint distribution, `Σ p_ij ln(p_ij / p_i p_j)`, with the
/// both-constant case defined as 1.
pub fn contingency_nmi(y: &[usize], yhat: &[usize]) -> f64 {
    let n = y.len() as f64;
    let (a, b) = (class_count(y), class_count(yhat));
    let mut counts = vec![vec![0usize; b]; a];
    for (&i, &j) in y.iter().zip(yhat) {
        counts[i][j] += 1;
    }
    let joint: Vec<Vec<f64>> = counts.iter().map(|r| r.iter().map(|&c| c as f64 / n).collect()).collect();
    let py: Vec<f64> = counts.iter().map(|r| r.iter().sum::<usize>() as f64 / n).collect();
    let pyh: Vec<f64> = (0..b).map(|j| counts.iter().map(|r| r[j]).sum::<usize>() as f64 / n).collect();
    let h = |ps: &[f64]| -ps.iter().filter(|&&p| p > 0.0).map(|p| p * p.ln()).sum::<f64>();
    let denom = h(&py) + h(&pyh);
    if denom == 0.0 {
        return 1.0;
    }
    let mut mi = 0.0;
    for i in 0..a {
        for j in 0..b {
            let p = joint[i][j];
            if p > 0.0 {
                mi += p * (p / (py[i] * pyh[j])).ln();
            }
        }
    }
    2.0 * mi / denom
}

/// Label vectors of length `n` over at most `classes` labels in
/// first-occurrence order; every labeling is a relabeling of exactly one.
pub fn canonical_labelings(n: usize, classes: usize) -> Vec<Vec<usize>> {
    let mut out = vec![vec![]];
    for _ in 0..n {
        let mut next = Vec::with_capacity(out.len() * classes);
        for v in out {
            let top = class_count(&v);
            for c in 0..=top.min(classes - 1) {
                let mut w = v.clone();
                w.push(c);
                next.push(w);
            }
        }
        out = next;
    }
    out
}

/// Both metrics on every pair of canonical labelings of length ≤ `max_len`
/// with ≤ 3 classes, plus a relabeled copy of each prediction.
pub fn metric_enumeration_check(max_len: usize) -> CheckOutcome {
    let relabel = [2usize, 0, 1];
    let mut worst = 0.0f64;
    let mut pairs = 0usize;
    for n in 1..=max_len {
        let all = canonical_labelings(n, 3);
        for y in &all {
            for yhat in &all {
                let shuffled: Vec<usize> = yhat.iter().map(|&c| relabel[c]).collect();
                let want_acc = exhaustive_accuracy(y, yhat);
                let want_nmi = contingency_nmi(y, yhat);
                for pred in [yhat, &shuffled] {
                    let (Ok(acc), Ok(m)) = (hungarian_acc(y, pred), nmi(y, pred)) else {
                        return CheckOutcome::new("metric_enumeration", f64::INFINITY, 1e-12, "metric error".into());
                    };
                    worst = worst.max((acc - want_acc).abs()).max((m - want_nmi).abs());
                }
                pairs += 1;
            }
        }
    }
    CheckOutcome::new(
        "metric_enumeration",
        worst,
        1e-12,
        format!("{pairs} labeling pairs up to length {max_len}"),
    )
}

/// Worked spike-and-slab values.
pub fn ssl_check() -> CheckOutcome {
    let h = SslHyper::default();
    let mut worst = 0.0f64;
    let mut note = |got: f64, want: f64| worst = worst.max((got - want).abs());

    note(slab_probability(0.0, 0.5, h.lambda0, h.lambda1), 1.0 / 11.0);
    // Density ratio at w = 2: spike/slab = 10·e^{-20} / e^{-2}.
    let r = 10.0 * (-18.0f64).exp();
    note(slab_probability(2.0, 0.5, h.lambda0, h.lambda1), 1.0 / (1.0 + r));
    note(slab_probability(0.7, 0.3, 1.0, 1.0), 0.3);

    let state = |a: f64, b: f64| SslState {
        hyper: SslHyper { a, b, ..h },
        gamma: Matrix::zeros(4, 1),
        eta: vec![0.5],
    };
    let col = |v: [f64; 4]| Matrix::from_fn(4, 1, |j, _| v[j]);
    let eta = |g: Matrix, s: SslState| ssl_eta_update(&g, &s, 4).map_or(f64::NAN, |e| e[0]);
    note(eta(col([1.0, 1.0, 0.0, 0.0]), state(1.0, 1.0)), 0.5);
    note(eta(col([1.0; 4]), state(2.0, 2.0)), 5.0 / 6.0);
    note(eta(col([0.0; 4]), state(1.0, 1.0)), 1e-6);

    note(mixed_rate(1.0 / 11.0, &h), 101.0 / 11.0);
    let l = FactorLoadings {
        omic: "m".into(),
        w: Matrix::from_rows(&[[0.5, -3.0, 0.0]]).expect("static shape"),
    };
    let g = ssl_penalty_grad(&l, &Matrix::from_rows(&[[1.0 / 11.0, 1.0, 0.3]]).expect("static shape"), &h);
    note(g.get(0, 0), 101.0 / 11.0);
    note(g.get(0, 1), -1.0);
    note(g.get(0, 2), 0.0);
    CheckOutcome::new("ssl_formulas", worst, SSL_TOL, "E-step, M-step and penalty gradient".into())
}

/// Fast decoder paths against the per-feature reference on random shapes,
/// including a trunk shape the fused kernel does not handle.
pub fn decoder_check(seed: u64) -> CheckOutcome {
    let mut rng = rng_from_seed(seed);
    let mut worst = 0.0f64;
    let shapes = [(3, 9, 5, 16, Activation::Relu), (7, 33, 4, 64, Activation::Relu), (5, 12, 3, 7, Activation::Tanh)];
    for (n, d, k, h, act) in shapes {
        let z = standard_normal(&mut rng, n, k);
        let l = FactorLoadings {
            omic: "m".into(),
            w: standard_normal(&mut rng, d, k),
        };
        let dec = SparseDecoder {
            trunk: Mlp::init(&[k, h, 1], act, Activation::Identity, &mut rng).expect("valid trunk"),
            bias: (0..d).map(|_| rng.random_range(-1.0..1.0)).collect(),
        };
        let Ok(reference) = sparse_decode_reference(&z, &l, &dec) else {
            return CheckOutcome::new("decoder_equivalence", f64::INFINITY, DECODE_TOL, "reference failed".into());
        };
        for exec in [Exec::Sequential, Exec::Parallel] {
            match sparse_decode_with(&z, &l, &dec, exec) {
                Ok(fast) => worst = worst.max(fast.max_abs_diff(&reference)),
                Err(e) => return CheckOutcome::new("decoder_equivalence", f64::INFINITY, DECODE_TOL, e.to_string()),
            }
        }
    }
    CheckOutcome::new("decoder_equivalence", worst, DECODE_TOL, format!("{} shapes", shapes.len()))
}

/// Decoder benchmark sizes.
#[derive(Clone, Debug, PartialEq)]
pub struct BenchSpec {
    pub samples: usize,
    pub features: usize,
    pub latent_dim: usize,
    pub hidden: usize,
    pub repetitions: usize,
    pub seed: u64,
}

impl Default for BenchSpec {
    fn default() -> Self {
        BenchSpec {
            samples: 256,
            features: 1000,
            latent_dim: 32,
            hidden: 64,
            repetitions: 5,
            seed: 21,
        }
    }
}

/// Wall times in seconds, one entry per repetition.
#[derive(Clone, Debug, PartialEq)]
pub struct BenchReport {
    pub spec: BenchSpec,
    pub parallel: bool,
    pub fast: Vec<f64>,
    pub reference: Vec<f64>,
    pub max_deviation: f64,
}

pub fn median(xs: &[f64]) -> f64 {
    let mut v = xs.to_vec();
    v.sort_by(f64::total_cmp);
    match v.len() {
        0 => f64::NAN,
        n if n % 2 == 1 => v[n / 2],
        n => 0.5 * (v[n / 2 - 1] + v[n / 2]),
    }
}

impl BenchReport {
    /// Median reference time over median fast time.
    pub fn ratio(&self) -> f64 {
        median(&self.reference) / median(&self.fast)
    }

    pub fn to_text(&self) -> String {
        let s = &self.spec;
        let mut out = String::new();
        let _ = writeln!(out, "samples={}", s.samples);
        let _ = writeln!(out, "features={}", s.features);
        let _ = writeln!(out, "latent_dim={}", s.latent_dim);
        let _ = writeln!(out, "hidden={}", s.hidden);
        let _ = writeln!(out, "repetitions={}", s.repetitions);
        let _ = writeln!(out, "parallel={}", self.parallel);
        let _ = writeln!(out, "median_fast_s={:.6}", median(&self.fast));
        let _ = writeln!(out, "median_reference_s={:.6}", median(&self.reference));
        let _ = writeln!(out, "speedup={:.3}", self.ratio());
        let _ = writeln!(out, "max_deviation={:e}", self.max_deviation);
        let _ = writeln!(out, "deviation_ok={}", self.max_deviation <= DECODE_TOL);
        out
    }
}

/// Times `sparse_decode` against `sparse_decode_reference` on one random
/// problem. Runs alternate so drift in machine load hits both paths.
pub fn decoder_bench(spec: &BenchSpec, exec: Exec) -> Result<BenchReport> {
    let &BenchSpec {
        samples: n,
        features: d,
        latent_dim: k,
        hidden: h,
        repetitions,
        seed,
    } = spec;
    if n == 0 || d == 0 || k == 0 || h == 0 || repetitions == 0 {
        return Err(Error::Config("bench sizes must be positive".into()));
    }
    let mut rng = rng_from_seed(seed);
    let z = standard_normal(&mut rng, n, k);
    let l = FactorLoadings {
        omic: "bench".into(),
        w: standard_normal(&mut rng, d, k),
    };
    let dec = SparseDecoder {
        trunk: Mlp::init(&[k, h, 1], Activation::Relu, Activation::Identity, &mut rng)?,
        bias: (0..d).map(|_| rng.random_range(-1.0..1.0)).collect(),
    };
    let mut fast = Vec::with_capacity(repetitions);
    let mut reference = Vec::with_capacity(repetitions);
    let mut max_deviation = 0.0f64;
    for _ in 0..repetitions {
        let t = Instant::now();
        let r = sparse_decode_reference(&z, &l, &dec)?;
        reference.push(t.elapsed().as_secs_f64());
        let t = Instant::now();
        let f = sparse_decode_with(&z, &l, &dec, exec)?;
        fast.push(t.elapsed().as_secs_f64());
        max_deviation = max_deviation.max(f.max_abs_diff(&r));
    }
    Ok(BenchReport {
        spec: spec.clone(),
        parallel: exec.is_parallel(),
        fast,
        reference,
        max_deviation,
    })
}

/// The full suite run by `poems check`.
pub fn run_all() -> CheckReport {
    CheckReport {
        checks: vec![
            timed(|| gradient_check(false)),
            timed(|| poe_check(100, 21)),
            timed(|| metric_enumeration_check(8)),
            timed(ssl_check),
            timed(|| decoder_check(21)),
        ],
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn oracle_matches_closed_form_example() {
        let (m, v) = tempered_product_moments(&[0.0, 2.0], &[1.0, 1.0], &[0.25, 0.75]);
        assert!((m - 1.5).abs() < 1e-10 && (v - 1.0).abs() < 1e-10, "{m} {v}");
    }

    #[test]
    fn flipped_kl_is_caught() {
        assert!(!gradient_check(true).passed);
    }

    #[test]
    fn oracles_agree_on_small_cases() {
        assert_eq!(exhaustive_accuracy(&[0, 0, 1, 1], &[0, 1, 0, 1]), 0.5);
        assert!(contingency_nmi(&[0, 0, 1, 1], &[0, 1, 0, 1]).abs() < 1e-15);
        assert_eq!(canonical_labelings(3, 3).len(), 5);
        assert_eq!(canonical_labelings(4, 2).len(), 8);
    }

    #[test]
    fn suite_passes() {
        let r = CheckReport {
            checks: vec![gradient_check(false), poe_check(20, 3), metric_enumeration_check(5), ssl_check(), decoder_check(4)],
        };
        assert!(r.all_passed(), "{}", r.to_text());
        assert!(r.to_text().lines().all(|l| l.starts_with("PASS")));
    }

    #[test]
    fn median_of_odd_and_even() {
        assert_eq!(median(&[3.0, 1.0, 2.0]), 2.0);
        assert_eq!(median(&[4.0, 1.0, 2.0, 3.0]), 2.5);
    }

    #[test]
    fn small_bench_reports_equivalent_paths() {
        let spec = BenchSpec {
            samples: 8,
            features: 20,
            latent_dim: 4,
            hidden: 8,
            repetitions: 3,
            seed: 1,
        };
        let r = decoder_bench(&spec, Exec::Sequential).unwrap();
        assert_eq!((r.fast.len(), r.reference.len()), (3, 3));
        assert!(r.max_deviation <= DECODE_TOL);
        assert!(r.to_text().contains("speedup="));
        assert!(decoder_bench(&BenchSpec { repetitions: 0, ..spec }, Exec::Sequential).is_err());
    }
}
