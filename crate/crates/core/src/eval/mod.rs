//! Subtype recovery metrics on latent embeddings: K-means with matched
//! accuracy and NMI, plus a KNN classifier, repeated over seeds.

use std::fmt::Write as _;
use std::path::Path;

use pathfinding::kuhn_munkres::kuhn_munkres;
use rand::Rng as _;

use crate::data::{MultiOmicsDataset, SplitSpec};
use crate::error::{Error, Result};
use crate::model::ModelParams;
use crate::numerics::{derived_rng, Exec, Matrix};

pub const DEFAULT_SEEDS: [u64; 5] = [0, 12, 21, 42, 1234];
pub const DEFAULT_KNN_K: usize = 5;
pub const KMEANS_MAX_ITER: usize = 300;
/// Independent k-means++ initializations per call; the lowest final
/// within-cluster sum of squares wins.
pub const KMEANS_RESTARTS: usize = 10;

fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

fn class_count(y: &[usize]) -> usize {
    y.iter().max().map_or(0, |m| m + 1)
}

/// Result of one K-means run.
#[derive(Clone, Debug, PartialEq)]
pub struct KMeansFit {
    pub labels: Vec<usize>,
    pub centroids: Matrix,
    /// Within-cluster sum of squares after each assignment step.
    pub inertia: Vec<f64>,
    pub iterations: usize,
}

/// k-means++ seeding. When every remaining point coincides with a chosen
/// centroid the lowest-index unchosen point is taken.
fn seed_centroids(x: &Matrix, k: usize, seed: u64, restart: usize) -> Matrix {
    let n = x.rows();
    let mut rng = derived_rng(seed, restart as u64);
    let mut chosen = vec![rng.random_range(0..n)];
    let mut d2: Vec<f64> = (0..n).map(|i| sq_dist(x.row(i), x.row(chosen[0]))).collect();
    while chosen.len() < k {
        let total: f64 = d2.iter().sum();
        let next = if total > 0.0 {
            let mut r = rng.random::<f64>() * total;
            let mut pick = n - 1;
            for (i, &d) in d2.iter().enumerate() {
                if d > 0.0 && r < d {
                    pick = i;
                    break;
                }
                r -= d;
            }
            // Rounding can run off the end; fall back to the last positive weight.
            if d2[pick] == 0.0 {
                pick = d2.iter().rposition(|&d| d > 0.0).unwrap_or(pick);
            }
            pick
        } else {
            (0..n).find(|i| !chosen.contains(i)).unwrap_or(0)
        };
        chosen.push(next);
        for (i, d) in d2.iter_mut().enumerate() {
            *d = d.min(sq_dist(x.row(i), x.row(next)));
        }
    }
    x.select_rows(&chosen)
}

/// Nearest centroid, ties to the lower index.
fn nearest(p: &[f64], c: &Matrix) -> (usize, f64) {
    let mut best = (0, f64::INFINITY);
    for j in 0..c.rows() {
        let d = sq_dist(p, c.row(j));
        if d < best.1 {
            best = (j, d);
        }
    }
    best
}

/// Lloyd's algorithm from k-means++ seeds. Stops when assignments no longer
/// change or after [`KMEANS_MAX_ITER`] rounds. A cluster that empties is
/// re-centred on the point farthest from its current centroid (lowest index
/// on ties), which then moves to that cluster. If every point already sits on
/// its centroid the cluster stays empty. `restart` selects an independent
/// seeding stream.
pub fn kmeans_fit(x: &Matrix, k: usize, seed: u64, restart: usize) -> Result<KMeansFit> {
    let (n, dim) = x.shape();
    if k == 0 || k > n {
        return Err(Error::contract("kmeans", format!("k = {k} with {n} samples")));
    }
    if !x.is_finite() {
        return Err(Error::numeric("kmeans", "embeddings contain non-finite values"));
    }
    let mut c = seed_centroids(x, k, seed, restart);
    let mut labels: Vec<usize> = Vec::new();
    let mut inertia = Vec::new();
    let mut iterations = 0;
    while iterations < KMEANS_MAX_ITER {
        iterations += 1;
        let assigned: Vec<(usize, f64)> = (0..n).map(|i| nearest(x.row(i), &c)).collect();
        let mut next: Vec<usize> = assigned.iter().map(|a| a.0).collect();
        let mut dist: Vec<f64> = assigned.iter().map(|a| a.1).collect();
        let mut counts = vec![0usize; k];
        next.iter().for_each(|&l| counts[l] += 1);
        for j in 0..k {
            if counts[j] > 0 {
                continue;
            }
            // Only points in clusters of size > 1 may move, so no new empty
            // cluster appears. A point sitting on its centroid cannot help.
            let far = (0..n)
                .filter(|&i| counts[next[i]] > 1 && dist[i] > 0.0)
                .fold(None, |best: Option<usize>, i| match best {
                    Some(b) if dist[b] >= dist[i] => Some(b),
                    _ => Some(i),
                });
            let Some(far) = far else { break };
            counts[next[far]] -= 1;
            counts[j] = 1;
            next[far] = j;
            dist[far] = 0.0;
            c.row_mut(j).copy_from_slice(x.row(far));
        }
        inertia.push(dist.iter().sum());
        let stable = next == labels;
        labels = next;
        if stable {
            break;
        }
        let mut sums = Matrix::zeros(k, dim);
        for (i, &l) in labels.iter().enumerate() {
            for (s, v) in sums.row_mut(l).iter_mut().zip(x.row(i)) {
                *s += v;
            }
        }
        for j in 0..k {
            if counts[j] > 0 {
                let inv = 1.0 / counts[j] as f64;
                for (dst, s) in c.row_mut(j).iter_mut().zip(sums.row(j)) {
                    *dst = s * inv;
                }
            }
        }
    }
    Ok(KMeansFit {
        labels,
        centroids: c,
        inertia,
        iterations,
    })
}

/// Best of [`KMEANS_RESTARTS`] runs by final inertia, earliest on ties.
pub fn kmeans(x: &Matrix, k: usize, seed: u64) -> Result<Vec<usize>> {
    let mut best: Option<KMeansFit> = None;
    for r in 0..KMEANS_RESTARTS {
        let fit = kmeans_fit(x, k, seed, r)?;
        let last = |f: &KMeansFit| *f.inertia.last().expect("at least one iteration");
        if best.as_ref().is_none_or(|b| last(&fit) < last(b)) {
            best = Some(fit);
        }
    }
    Ok(best.expect("restarts > 0").labels)
}

fn check_lengths(op: &str, a: usize, b: usize) -> Result<()> {
    if a != b {
        return Err(Error::contract(op, format!("label vectors of length {a} and {b}")));
    }
    if a == 0 {
        return Err(Error::contract(op, "empty label vectors"));
    }
    Ok(())
}

fn contingency(y: &[usize], yhat: &[usize]) -> Vec<Vec<usize>> {
    let mut t = vec![vec![0usize; class_count(yhat)]; class_count(y)];
    for (&a, &b) in y.iter().zip(yhat) {
        t[a][b] += 1;
    }
    t
}

fn entropy(counts: impl Iterator<Item = usize>, n: f64) -> f64 {
    counts
        .filter(|&c| c > 0)
        .map(|c| {
            let p = c as f64 / n;
            -p * p.ln()
        })
        .sum()
}

/// `2 I(y; ŷ) / (H(y) + H(ŷ))` with natural logs. When both labelings are
/// constant the ratio is 0/0; it is defined as 1 if they induce the same
/// partition and 0 otherwise.
pub fn nmi(y: &[usize], yhat: &[usize]) -> Result<f64> {
    check_lengths("nmi", y.len(), yhat.len())?;
    let n = y.len() as f64;
    let t = contingency(y, yhat);
    let hy = entropy(t.iter().map(|r| r.iter().sum()), n);
    let hyhat = entropy((0..class_count(yhat)).map(|j| t.iter().map(|r| r[j]).sum()), n);
    if hy + hyhat == 0.0 {
        return Ok(1.0);
    }
    let hjoint = entropy(t.iter().flatten().copied(), n);
    let mi = (hy + hyhat - hjoint).max(0.0);
    Ok((2.0 * mi / (hy + hyhat)).clamp(0.0, 1.0))
}

/// Best one-to-one matching of predicted clusters to classes, as a fraction
/// of samples.
pub fn hungarian_acc(y: &[usize], yhat: &[usize]) -> Result<f64> {
    check_lengths("hungarian_acc", y.len(), yhat.len())?;
    let t = contingency(y, yhat);
    let m = class_count(y).max(class_count(yhat));
    let weights = pathfinding::matrix::Matrix::from_fn(m, m, |(r, c)| {
        t.get(c).and_then(|row| row.get(r)).map_or(0i64, |&v| v as i64)
    });
    let (matched, _) = kuhn_munkres(&weights);
    Ok(matched as f64 / y.len() as f64)
}

/// Majority vote among the `k` nearest training points (Euclidean). Equal
/// distances are ordered by training index. Vote ties go to the class with
/// the smaller mean neighbour distance, then the smaller class index.
pub fn knn_predict(train: &Matrix, train_labels: &[usize], test: &Matrix, k: usize) -> Result<Vec<usize>> {
    let n = train.rows();
    if n == 0 {
        return Err(Error::contract("knn", "empty training set"));
    }
    if train_labels.len() != n {
        return Err(Error::contract("knn", format!("{} labels for {n} training points", train_labels.len())));
    }
    if k == 0 || k > n {
        return Err(Error::contract("knn", format!("k = {k} with {n} training points")));
    }
    if train.cols() != test.cols() {
        return Err(Error::shape(
            "knn",
            format!("train width {} vs test width {}", train.cols(), test.cols()),
        ));
    }
    let classes = class_count(train_labels);
    let mut out = Vec::with_capacity(test.rows());
    let mut order: Vec<(f64, usize)> = Vec::with_capacity(n);
    for t in 0..test.rows() {
        order.clear();
        order.extend((0..n).map(|i| (sq_dist(train.row(i), test.row(t)), i)));
        order.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
        let mut votes = vec![0usize; classes];
        let mut dsum = vec![0.0; classes];
        for &(d, i) in &order[..k] {
            votes[train_labels[i]] += 1;
            dsum[train_labels[i]] += d.sqrt();
        }
        let mut best = 0;
        for c in 1..classes {
            let better = votes[c] > votes[best]
                || (votes[c] == votes[best]
                    && votes[c] > 0
                    && dsum[c] / (votes[c] as f64) < dsum[best] / (votes[best] as f64));
            if better {
                best = c;
            }
        }
        out.push(best);
    }
    Ok(out)
}

pub fn knn_acc(
    train: &Matrix,
    train_labels: &[usize],
    test: &Matrix,
    test_labels: &[usize],
    k: usize,
) -> Result<f64> {
    if test.rows() != test_labels.len() {
        return Err(Error::contract(
            "knn",
            format!("{} labels for {} test points", test_labels.len(), test.rows()),
        ));
    }
    let pred = knn_predict(train, train_labels, test, k)?;
    let hits = pred.iter().zip(test_labels).filter(|(a, b)| a == b).count();
    Ok(hits as f64 / test_labels.len().max(1) as f64)
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SeedMetrics {
    pub seed: u64,
    pub acc_kmeans: f64,
    pub nmi_kmeans: f64,
    pub acc_knn: f64,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct MeanStd {
    pub mean: f64,
    pub std: f64,
}

/// Population mean and standard deviation.
pub fn mean_std(xs: &[f64]) -> MeanStd {
    if xs.is_empty() {
        return MeanStd { mean: f64::NAN, std: f64::NAN };
    }
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    let var = xs.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / n;
    MeanStd { mean, std: var.sqrt() }
}

#[derive(Clone, Debug, PartialEq)]
pub struct EvalReport {
    pub per_seed: Vec<SeedMetrics>,
    pub knn_k: usize,
    pub classes: usize,
    pub test_samples: usize,
}

impl EvalReport {
    pub fn seeds(&self) -> Vec<u64> {
        self.per_seed.iter().map(|m| m.seed).collect()
    }

    fn summary(&self, f: impl Fn(&SeedMetrics) -> f64) -> MeanStd {
        mean_std(&self.per_seed.iter().map(f).collect::<Vec<_>>())
    }

    pub fn acc_kmeans(&self) -> MeanStd {
        self.summary(|m| m.acc_kmeans)
    }

    pub fn nmi_kmeans(&self) -> MeanStd {
        self.summary(|m| m.nmi_kmeans)
    }

    pub fn acc_knn(&self) -> MeanStd {
        self.summary(|m| m.acc_knn)
    }

    /// `key=value` lines; each metric gets a `mean std` pair.
    pub fn to_text(&self) -> String {
        let mut s = String::new();
        let seeds: Vec<String> = self.seeds().iter().map(u64::to_string).collect();
        writeln!(s, "seeds={}", seeds.join(",")).unwrap();
        writeln!(s, "classes={}", self.classes).unwrap();
        writeln!(s, "test_samples={}", self.test_samples).unwrap();
        writeln!(s, "knn_k={}", self.knn_k).unwrap();
        for (name, ms) in [
            ("acc_kmeans", self.acc_kmeans()),
            ("nmi_kmeans", self.nmi_kmeans()),
            ("acc_knn", self.acc_knn()),
        ] {
            writeln!(s, "{name}={} {}", ms.mean, ms.std).unwrap();
        }
        s
    }

    pub fn per_seed_csv(&self) -> String {
        let mut s = String::from("seed,acc_kmeans,nmi_kmeans,acc_knn\n");
        for m in &self.per_seed {
            writeln!(s, "{},{},{},{}", m.seed, m.acc_kmeans, m.nmi_kmeans, m.acc_knn).unwrap();
        }
        s
    }

    /// Writes `eval.txt` and `eval_per_seed.csv` into `dir`.
    pub fn save(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        for (name, body) in [("eval.txt", self.to_text()), ("eval_per_seed.csv", self.per_seed_csv())] {
            let p = dir.join(name);
            std::fs::write(&p, body).map_err(|e| Error::io(&p, e))?;
        }
        Ok(())
    }
}

/// Fused posterior means for the given rows of a (standardized) dataset.
pub fn embed(model: &ModelParams, dataset: &MultiOmicsDataset, rows: &[usize], exec: Exec) -> Result<Matrix> {
    let xs = dataset.matrices(rows);
    let refs: Vec<&Matrix> = xs.iter().collect();
    let (_, _, fused) = model.infer_with(&refs, exec)?;
    Ok(fused.mean)
}

/// Metrics from precomputed embeddings. K-means uses as many clusters as
/// there are classes in the whole label set; KNN is fit on the train rows.
pub fn evaluate_embeddings(
    train: &Matrix,
    train_labels: &[usize],
    test: &Matrix,
    test_labels: &[usize],
    classes: usize,
    seeds: &[u64],
    knn_k: usize,
    exec: Exec,
) -> Result<EvalReport> {
    if seeds.is_empty() {
        return Err(Error::contract("evaluate", "empty seed list"));
    }
    // KNN does not depend on the seed.
    let acc_knn = knn_acc(train, train_labels, test, test_labels, knn_k)?;
    let runs = exec.map(seeds.len(), |s| -> Result<SeedMetrics> {
        let yhat = kmeans(test, classes.min(test.rows()), seeds[s])?;
        Ok(SeedMetrics {
            seed: seeds[s],
            acc_kmeans: hungarian_acc(test_labels, &yhat)?,
            nmi_kmeans: nmi(test_labels, &yhat)?,
            acc_knn,
        })
    });
    Ok(EvalReport {
        per_seed: runs.into_iter().collect::<Result<_>>()?,
        knn_k,
        classes,
        test_samples: test.rows(),
    })
}

/// Embeds the test split with the fused posterior mean, clusters it once per
/// seed and scores a KNN classifier fit on the training split.
pub fn evaluate(
    model: &ModelParams,
    dataset: &MultiOmicsDataset,
    split: &SplitSpec,
    seeds: &[u64],
    knn_k: usize,
    exec: Exec,
) -> Result<EvalReport> {
    let (codes, names) = dataset
        .label_codes()
        .ok_or_else(|| Error::contract("evaluate", "dataset has no subtype labels"))?;
    let pick = |rows: &[usize]| rows.iter().map(|&i| codes[i]).collect::<Vec<_>>();
    let train = embed(model, dataset, &split.train, exec)?;
    let test = embed(model, dataset, &split.test, exec)?;
    evaluate_embeddings(
        &train,
        &pick(&split.train),
        &test,
        &pick(&split.test),
        names.len(),
        seeds,
        knn_k,
        exec,
    )
}
