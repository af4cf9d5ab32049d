//! Interpretability reports: loading-based biomarker rankings, activation
//! maps, gating weights, subtype correlation maps and latent exports.

use std::fmt::Write as _;
use std::path::Path;

use log::warn;

use crate::data::{MultiOmicsDataset, SplitSpec};
use crate::error::{Error, Result};
use crate::model::ModelParams;
use crate::numerics::{Exec, Matrix};
use crate::sparsity::{active_map, FactorLoadings};

pub const DEFAULT_TOP_K: usize = 10;
/// Activation threshold on `|W|` for the binary maps.
pub const ACTIVE_THRESHOLD: f64 = 0.01;

#[derive(Clone, Debug, PartialEq)]
pub struct RankedFeature {
    pub feature: String,
    pub score: f64,
}

/// Per latent dimension, the top features by `|w|`.
#[derive(Clone, Debug, PartialEq)]
pub struct BiomarkerReport {
    pub omic: String,
    pub factors: Vec<Vec<RankedFeature>>,
}

fn check_names(w: &Matrix, names: &[String]) -> Result<()> {
    if names.len() != w.rows() {
        return Err(Error::shape(
            "interpret",
            format!("{} feature names for {} loading rows", names.len(), w.rows()),
        ));
    }
    Ok(())
}

fn clamp_top_k(top_k: usize, d: usize) -> usize {
    if top_k > d {
        warn!("top_k = {top_k} exceeds {d} features; reporting all");
    }
    top_k.min(d)
}

/// Descending score, then ascending name.
fn rank(names: &[String], scores: impl Iterator<Item = f64>, top_k: usize) -> Vec<RankedFeature> {
    let mut all: Vec<RankedFeature> = names
        .iter()
        .zip(scores)
        .map(|(n, s)| RankedFeature {
            feature: n.clone(),
            score: s,
        })
        .collect();
    all.sort_by(|a, b| b.score.total_cmp(&a.score).then_with(|| a.feature.cmp(&b.feature)));
    all.truncate(top_k);
    all
}

pub fn top_features_per_factor(loadings: &FactorLoadings, names: &[String], top_k: usize) -> Result<BiomarkerReport> {
    let w = &loadings.w;
    check_names(w, names)?;
    let top_k = clamp_top_k(top_k, w.rows());
    let factors = (0..w.cols())
        .map(|k| rank(names, (0..w.rows()).map(|j| w.get(j, k).abs()), top_k))
        .collect();
    Ok(BiomarkerReport {
        omic: loadings.omic.clone(),
        factors,
    })
}

/// Features ranked by `Σ_k |w_jk|`.
pub fn aggregated_strength(loadings: &FactorLoadings, names: &[String], top_k: usize) -> Result<Vec<RankedFeature>> {
    let w = &loadings.w;
    check_names(w, names)?;
    let top_k = clamp_top_k(top_k, w.rows());
    Ok(rank(
        names,
        (0..w.rows()).map(|j| w.row(j).iter().map(|x| x.abs()).sum()),
        top_k,
    ))
}

/// Strongest feature of each latent dimension; the smaller index wins ties.
pub fn top_feature_per_dimension(loadings: &FactorLoadings, names: &[String]) -> Result<Vec<RankedFeature>> {
    let w = &loadings.w;
    check_names(w, names)?;
    if w.rows() == 0 {
        return Err(Error::contract("top_feature_per_dimension", "no features"));
    }
    Ok((0..w.cols())
        .map(|k| {
            let mut best = 0;
            for j in 1..w.rows() {
                if w.get(j, k).abs() > w.get(best, k).abs() {
                    best = j;
                }
            }
            RankedFeature {
                feature: names[best].clone(),
                score: w.get(best, k).abs(),
            }
        })
        .collect())
}

#[derive(Clone, Debug, PartialEq)]
pub struct GatingReport {
    pub omics: Vec<String>,
    pub sample_ids: Vec<String>,
    /// `N × V`, rows on the simplex.
    pub alpha: Matrix,
}

impl GatingReport {
    pub fn means(&self) -> Vec<f64> {
        self.alpha.column_means()
    }
}

pub fn gating_report(model: &ModelParams, dataset: &MultiOmicsDataset, rows: &[usize], exec: Exec) -> Result<GatingReport> {
    let xs = dataset.matrices(rows);
    let refs: Vec<&Matrix> = xs.iter().collect();
    let (_, alphas, _) = model.infer_with(&refs, exec)?;
    Ok(GatingReport {
        omics: model.omics.iter().map(|o| o.name.clone()).collect(),
        sample_ids: rows.iter().map(|&i| dataset.sample_ids()[i].clone()).collect(),
        alpha: alphas.alpha,
    })
}

#[derive(Clone, Debug, PartialEq)]
pub struct CorrelationMatrix {
    pub subtypes: Vec<String>,
    pub values: Matrix,
}

fn pearson(a: &[f64], b: &[f64]) -> Option<f64> {
    let n = a.len() as f64;
    let (ma, mb) = (a.iter().sum::<f64>() / n, b.iter().sum::<f64>() / n);
    let (mut sab, mut saa, mut sbb) = (0.0, 0.0, 0.0);
    for (x, y) in a.iter().zip(b) {
        let (dx, dy) = (x - ma, y - mb);
        sab += dx * dy;
        saa += dx * dx;
        sbb += dy * dy;
    }
    (saa > 0.0 && sbb > 0.0).then(|| (sab / (saa * sbb).sqrt()).clamp(-1.0, 1.0))
}

/// Pearson correlation between per-subtype mean profiles of the rows of `x`.
/// `labels[i]` is the subtype index of row `i`. A constant mean profile makes
/// its correlations undefined; they are reported as 0 (diagonal stays 1).
pub fn subtype_correlation(x: &Matrix, labels: &[usize], subtypes: &[String]) -> Result<CorrelationMatrix> {
    if labels.len() != x.rows() {
        return Err(Error::contract(
            "subtype_correlation",
            format!("{} labels for {} rows", labels.len(), x.rows()),
        ));
    }
    let s = subtypes.len();
    if labels.iter().any(|&l| l >= s) {
        return Err(Error::contract("subtype_correlation", "label index out of range"));
    }
    let mut means = Matrix::zeros(s, x.cols());
    let mut counts = vec![0usize; s];
    for (i, &l) in labels.iter().enumerate() {
        counts[l] += 1;
        for (m, v) in means.row_mut(l).iter_mut().zip(x.row(i)) {
            *m += v;
        }
    }
    if let Some(c) = counts.iter().position(|&c| c == 0) {
        return Err(Error::contract(
            "subtype_correlation",
            format!("subtype {:?} has no samples", subtypes[c]),
        ));
    }
    for (c, &n) in counts.iter().enumerate() {
        means.row_mut(c).iter_mut().for_each(|m| *m /= n as f64);
    }
    let mut values = Matrix::identity(s);
    for a in 0..s {
        for b in a + 1..s {
            let r = pearson(means.row(a), means.row(b)).unwrap_or_else(|| {
                warn!(
                    "subtypes {:?}/{:?}: constant mean profile, correlation set to 0",
                    subtypes[a], subtypes[b]
                );
                0.0
            });
            values.set(a, b, r);
            values.set(b, a, r);
        }
    }
    Ok(CorrelationMatrix {
        subtypes: subtypes.to_vec(),
        values,
    })
}

/// Row order grouping samples by cluster (ascending), by id within a cluster.
pub fn cluster_order(ids: &[String], clusters: &[usize]) -> Vec<usize> {
    let mut order: Vec<usize> = (0..ids.len()).collect();
    order.sort_by(|&a, &b| clusters[a].cmp(&clusters[b]).then_with(|| ids[a].cmp(&ids[b])));
    order
}

/// `sample_id,cluster,z1..zK` with rows grouped by cluster.
pub fn latents_csv(ids: &[String], embeddings: &Matrix, clusters: &[usize]) -> Result<String> {
    if ids.len() != embeddings.rows() || clusters.len() != embeddings.rows() {
        return Err(Error::contract(
            "export_latents",
            format!(
                "{} ids, {} cluster labels, {} embedding rows",
                ids.len(),
                clusters.len(),
                embeddings.rows()
            ),
        ));
    }
    let mut s = String::from("sample_id,cluster");
    for k in 0..embeddings.cols() {
        write!(s, ",z{}", k + 1).unwrap();
    }
    s.push('\n');
    for i in cluster_order(ids, clusters) {
        write!(s, "{},{}", ids[i], clusters[i]).unwrap();
        for v in embeddings.row(i) {
            write!(s, ",{v}").unwrap();
        }
        s.push('\n');
    }
    Ok(s)
}

/// Parses the output of [`latents_csv`].
pub fn parse_latents_csv(text: &str) -> Result<(Vec<String>, Vec<usize>, Matrix)> {
    let bad = |line: usize, m: &str| Error::Config(format!("latents csv line {line}: {m}"));
    let mut lines = text.lines();
    let header = lines.next().ok_or_else(|| bad(1, "empty"))?;
    let k = header.split(',').count().saturating_sub(2);
    let (mut ids, mut clusters, mut data) = (Vec::new(), Vec::new(), Vec::new());
    for (i, line) in lines.enumerate() {
        let cells: Vec<&str> = line.split(',').collect();
        if cells.len() != k + 2 {
            return Err(bad(i + 2, "wrong field count"));
        }
        ids.push(cells[0].to_string());
        clusters.push(cells[1].parse().map_err(|_| bad(i + 2, "bad cluster"))?);
        for c in &cells[2..] {
            data.push(c.parse().map_err(|_| bad(i + 2, "bad value"))?);
        }
    }
    let z = Matrix::from_vec(clusters.len(), k, data)?;
    Ok((ids, clusters, z))
}

pub fn biomarkers_csv(report: &BiomarkerReport) -> String {
    let mut s = String::from("factor,rank,feature,abs_loading\n");
    for (k, list) in report.factors.iter().enumerate() {
        for (r, f) in list.iter().enumerate() {
            writeln!(s, "z{},{},{},{}", k + 1, r + 1, f.feature, f.score).unwrap();
        }
    }
    s
}

pub fn biomarkers_text(reports: &[BiomarkerReport]) -> String {
    let mut s = String::new();
    for rep in reports {
        writeln!(s, "{}", rep.omic).unwrap();
        for (k, list) in rep.factors.iter().enumerate() {
            let items: Vec<String> = list.iter().map(|f| format!("{} ({:.4})", f.feature, f.score)).collect();
            writeln!(s, "  z{}: {}", k + 1, items.join(", ")).unwrap();
        }
    }
    s
}

pub fn ranked_csv(list: &[RankedFeature], score_name: &str) -> String {
    let mut s = format!("rank,feature,{score_name}\n");
    for (r, f) in list.iter().enumerate() {
        writeln!(s, "{},{},{}", r + 1, f.feature, f.score).unwrap();
    }
    s
}

pub fn active_map_csv(loadings: &FactorLoadings, names: &[String], threshold: f64) -> Result<String> {
    check_names(&loadings.w, names)?;
    let map = active_map(loadings, threshold)?;
    let mut s = String::from("feature");
    for k in 0..loadings.w.cols() {
        write!(s, ",z{}", k + 1).unwrap();
    }
    s.push('\n');
    for (name, row) in names.iter().zip(&map) {
        s.push_str(name);
        for &a in row {
            s.push_str(if a { ",1" } else { ",0" });
        }
        s.push('\n');
    }
    Ok(s)
}

pub fn gating_csv(report: &GatingReport) -> String {
    let mut s = String::from("sample_id");
    for o in &report.omics {
        write!(s, ",alpha_{o}").unwrap();
    }
    s.push('\n');
    for (i, id) in report.sample_ids.iter().enumerate() {
        s.push_str(id);
        for v in report.alpha.row(i) {
            write!(s, ",{v}").unwrap();
        }
        s.push('\n');
    }
    s
}

pub fn correlation_csv(c: &CorrelationMatrix) -> String {
    let mut s = String::from("subtype");
    for n in &c.subtypes {
        write!(s, ",{n}").unwrap();
    }
    s.push('\n');
    for (i, n) in c.subtypes.iter().enumerate() {
        s.push_str(n);
        for v in c.values.row(i) {
            write!(s, ",{v}").unwrap();
        }
        s.push('\n');
    }
    s
}

/// What [`write_reports`] produced, for logging.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ReportSummary {
    pub files: Vec<String>,
    pub active_fraction: Vec<(String, f64)>,
    pub gating_means: Vec<(String, f64)>,
}

impl ReportSummary {
    pub fn to_text(&self) -> String {
        let mut s = String::new();
        for (o, f) in &self.active_fraction {
            writeln!(s, "active_fraction.{o}={f}").unwrap();
        }
        for (o, m) in &self.gating_means {
            writeln!(s, "gating_mean.{o}={m}").unwrap();
        }
        writeln!(s, "files={}", self.files.join(",")).unwrap();
        s
    }
}

fn write(dir: &Path, name: &str, body: &str, summary: &mut ReportSummary) -> Result<()> {
    let p = dir.join(name);
    std::fs::write(&p, body).map_err(|e| Error::io(&p, e))?;
    summary.files.push(name.to_string());
    Ok(())
}

/// Writes every report for the test split of a standardized dataset.
/// Latent exports are grouped by K-means cluster (k = number of subtypes, or
/// `fallback_k` without labels) fitted with `seed`.
pub fn write_reports(
    dir: &Path,
    model: &ModelParams,
    dataset: &MultiOmicsDataset,
    split: &SplitSpec,
    top_k: usize,
    fallback_k: usize,
    seed: u64,
    exec: Exec,
) -> Result<ReportSummary> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut summary = ReportSummary::default();
    let mut reports = Vec::new();
    for (o, om) in model.omics.iter().zip(&dataset.omics) {
        let names = &om.feature_names;
        let rep = top_features_per_factor(&o.loadings, names, top_k)?;
        write(dir, &format!("biomarkers_{}.csv", o.name), &biomarkers_csv(&rep), &mut summary)?;
        reports.push(rep);
        let agg = aggregated_strength(&o.loadings, names, top_k)?;
        write(dir, &format!("aggregated_{}.csv", o.name), &ranked_csv(&agg, "sum_abs_loading"), &mut summary)?;
        let top = top_feature_per_dimension(&o.loadings, names)?;
        write(dir, &format!("top_per_dimension_{}.csv", o.name), &ranked_csv(&top, "max_abs_loading"), &mut summary)?;
        write(
            dir,
            &format!("active_map_{}.csv", o.name),
            &active_map_csv(&o.loadings, names, ACTIVE_THRESHOLD)?,
            &mut summary,
        )?;
        let w = o.loadings.w.as_slice();
        let active = w.iter().filter(|x| x.abs() > ACTIVE_THRESHOLD).count();
        summary.active_fraction.push((o.name.clone(), active as f64 / w.len().max(1) as f64));
    }
    write(dir, "biomarkers.txt", &biomarkers_text(&reports), &mut summary)?;

    let rows = &split.test;
    let gate = gating_report(model, dataset, rows, exec)?;
    summary.gating_means = gate.omics.iter().cloned().zip(gate.means()).collect();
    write(dir, "gating.csv", &gating_csv(&gate), &mut summary)?;

    let z = crate::eval::embed(model, dataset, rows, exec)?;
    let labels = dataset.label_codes();
    if let Some((codes, names)) = &labels {
        let y: Vec<usize> = rows.iter().map(|&i| codes[i]).collect();
        let present: Vec<usize> = (0..names.len()).filter(|c| y.contains(c)).collect();
        // Subtypes absent from the split are dropped rather than failing.
        let remap: Vec<usize> = y.iter().map(|l| present.iter().position(|p| p == l).unwrap()).collect();
        let sub_names: Vec<String> = present.iter().map(|&c| names[c].clone()).collect();
        let xs = dataset.matrices(rows);
        let input = Matrix::hstack(&xs.iter().collect::<Vec<_>>())?;
        let ci = subtype_correlation(&input, &remap, &sub_names)?;
        write(dir, "subtype_corr_input.csv", &correlation_csv(&ci), &mut summary)?;
        let cl = subtype_correlation(&z, &remap, &sub_names)?;
        write(dir, "subtype_corr_latent.csv", &correlation_csv(&cl), &mut summary)?;
    }
    let k = labels.as_ref().map_or(fallback_k, |(_, n)| n.len()).clamp(1, z.rows().max(1));
    let clusters = crate::eval::kmeans(&z, k, seed)?;
    let ids: Vec<String> = rows.iter().map(|&i| dataset.sample_ids()[i].clone()).collect();
    write(dir, "latents_sorted.csv", &latents_csv(&ids, &z, &clusters)?, &mut summary)?;
    let text = summary.to_text();
    write(dir, "summary.txt", &text, &mut summary)?;
    Ok(summary)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::ModelConfig;
    use crate::numerics::{rng_from_seed, Params};
    use rand::seq::SliceRandom;
    use rand::Rng;

    fn by_score_then_name(a: &(f64, &str), b: &(f64, &str)) -> std::cmp::Ordering {
        b.0.total_cmp(&a.0).then_with(|| a.1.cmp(b.1))
    }

    fn names(d: usize) -> Vec<String> {
        (0..d).map(|j| format!("g{j:02}")).collect()
    }

    fn loadings(w: Matrix) -> FactorLoadings {
        FactorLoadings { omic: "m".into(), w }
    }

    fn random_w(seed: u64, d: usize, k: usize) -> Matrix {
        let mut rng = rng_from_seed(seed);
        // Coarse values so ties actually happen.
        Matrix::from_fn(d, k, |_, _| rng.random_range(-4..=4) as f64 * 0.25)
    }

    #[test]
    fn single_spike() {
        let mut w = Matrix::zeros(5, 3);
        w.set(3, 1, -0.7);
        let rep = top_features_per_factor(&loadings(w), &names(5), 10).unwrap();
        assert_eq!(rep.factors[1][0].feature, "g03");
        assert_eq!(rep.factors[1][0].score, 0.7);
        // Clamped to five, zero scores in name order.
        let z: Vec<&str> = rep.factors[0].iter().map(|f| f.feature.as_str()).collect();
        assert_eq!(z, ["g00", "g01", "g02", "g03", "g04"]);
    }

    #[test]
    fn rankings_match_independent_sort() {
        let w = random_w(1, 30, 4);
        let n = names(30);
        let rep = top_features_per_factor(&loadings(w.clone()), &n, 10).unwrap();
        for k in 0..4 {
            let mut col: Vec<(f64, &str)> = (0..30).map(|j| (w.get(j, k).abs(), n[j].as_str())).collect();
            col.sort_by(by_score_then_name);
            let want: Vec<&str> = col[..10].iter().map(|c| c.1).collect();
            let got: Vec<&str> = rep.factors[k].iter().map(|f| f.feature.as_str()).collect();
            assert_eq!(got, want);
        }
    }

    #[test]
    fn rankings_are_permutation_stable() {
        let w = random_w(2, 25, 3);
        let n = names(25);
        let mut perm: Vec<usize> = (0..25).collect();
        perm.shuffle(&mut rng_from_seed(9));
        let wp = w.select_rows(&perm);
        let np: Vec<String> = perm.iter().map(|&j| n[j].clone()).collect();
        assert_eq!(
            top_features_per_factor(&loadings(w.clone()), &n, 7).unwrap(),
            top_features_per_factor(&loadings(wp.clone()), &np, 7).unwrap()
        );
        assert_eq!(
            aggregated_strength(&loadings(w), &n, 7).unwrap(),
            aggregated_strength(&loadings(wp), &np, 7).unwrap()
        );
    }

    #[test]
    fn aggregate_cases() {
        let w = Matrix::from_rows(&[[1.0, -2.0, 3.0], [0.0, 0.5, 0.0]]).unwrap();
        let agg = aggregated_strength(&loadings(w), &names(2), 2).unwrap();
        assert_eq!((agg[0].feature.as_str(), agg[0].score), ("g00", 6.0));
        let zero = aggregated_strength(&loadings(Matrix::zeros(3, 2)), &names(3), 3).unwrap();
        assert!(zero.iter().all(|f| f.score == 0.0));
        assert_eq!(zero[2].feature, "g02");

        let w = random_w(3, 20, 5);
        let n = names(20);
        let agg = aggregated_strength(&loadings(w.clone()), &n, 20).unwrap();
        for f in agg {
            let j: usize = f.feature[1..].parse().unwrap();
            let mut want = 0.0;
            for k in 0..5 {
                want += w.get(j, k).abs();
            }
            assert_eq!(f.score, want);
        }
    }

    #[test]
    fn argmax_per_dimension() {
        let w = Matrix::from_rows(&[[0.1, 2.0], [-3.0, -2.0], [3.0, 0.0]]).unwrap();
        let top = top_feature_per_dimension(&loadings(w), &names(3)).unwrap();
        assert_eq!(top[0].feature, "g01");
        assert_eq!(top[1].feature, "g00");

        let w = random_w(4, 15, 6);
        let top = top_feature_per_dimension(&loadings(w.clone()), &names(15)).unwrap();
        for k in 0..6 {
            let col: Vec<f64> = w.column(k).iter().map(|x| x.abs()).collect();
            let m = col.iter().cloned().fold(f64::MIN, f64::max);
            let j = col.iter().position(|&x| x == m).unwrap();
            assert_eq!(top[k].feature, format!("g{j:02}"));
        }
    }

    #[test]
    fn top_one_consistent_with_active_map() {
        let w = random_w(5, 12, 4).map(|x| x * 0.03);
        let l = loadings(w);
        let n = names(12);
        let map = active_map(&l, ACTIVE_THRESHOLD).unwrap();
        let rep = top_features_per_factor(&l, &n, 1).unwrap();
        for (k, list) in rep.factors.iter().enumerate() {
            let f = &list[0];
            if f.score > ACTIVE_THRESHOLD {
                let j = n.iter().position(|x| *x == f.feature).unwrap();
                assert!(map[j][k]);
            }
        }
    }

    #[test]
    fn correlation_cases() {
        let sub = vec!["A".to_string(), "B".to_string()];
        let x = Matrix::from_rows(&[[1.0, 2.0, 4.0], [1.0, 2.0, 4.0]]).unwrap();
        let c = subtype_correlation(&x, &[0, 1], &sub).unwrap();
        assert!((c.values.get(0, 1) - 1.0).abs() < 1e-15);
        let x = Matrix::from_rows(&[[1.0, 0.0], [0.0, 1.0]]).unwrap();
        let c = subtype_correlation(&x, &[0, 1], &sub).unwrap();
        assert!((c.values.get(0, 1) + 1.0).abs() < 1e-15);
        // Constant profile.
        let x = Matrix::from_rows(&[[1.0, 1.0], [0.0, 1.0]]).unwrap();
        assert_eq!(subtype_correlation(&x, &[0, 1], &sub).unwrap().values.get(0, 1), 0.0);
        assert!(subtype_correlation(&x, &[0, 0], &sub).is_err());
    }

    #[test]
    fn correlation_matches_textbook_formula() {
        let mut rng = rng_from_seed(6);
        let x = Matrix::from_fn(30, 7, |_, _| rng.random::<f64>());
        let labels: Vec<usize> = (0..30).map(|i| i % 3).collect();
        let sub: Vec<String> = ["a", "b", "c"].iter().map(|s| s.to_string()).collect();
        let c = subtype_correlation(&x, &labels, &sub).unwrap();
        let mean = |s: usize| -> Vec<f64> {
            let rows: Vec<usize> = (0..30).filter(|i| labels[*i] == s).collect();
            x.select_rows(&rows).column_means()
        };
        for a in 0..3 {
            for b in 0..3 {
                let (u, v) = (mean(a), mean(b));
                let n = u.len() as f64;
                let (su, sv): (f64, f64) = (u.iter().sum(), v.iter().sum());
                let suv: f64 = u.iter().zip(&v).map(|(p, q)| p * q).sum();
                let suu: f64 = u.iter().map(|p| p * p).sum();
                let svv: f64 = v.iter().map(|p| p * p).sum();
                let r = (n * suv - su * sv) / ((n * suu - su * su).sqrt() * (n * svv - sv * sv).sqrt());
                assert!((c.values.get(a, b) - r).abs() < 1e-12);
                assert!((c.values.get(a, b) - c.values.get(b, a)).abs() < 1e-12);
            }
            assert_eq!(c.values.get(a, a), 1.0);
        }
    }

    #[test]
    fn latent_export_sorting_and_round_trip() {
        let ids: Vec<String> = ["s3", "s1", "s2", "s0"].iter().map(|s| s.to_string()).collect();
        let mut rng = rng_from_seed(7);
        let z = Matrix::from_fn(4, 3, |_, _| rng.random::<f64>() - 0.5);
        let text = latents_csv(&ids, &z, &[1, 0, 1, 0]).unwrap();
        let (rid, rcl, rz) = parse_latents_csv(&text).unwrap();
        assert_eq!(rid, ["s0", "s1", "s2", "s3"]);
        assert_eq!(rcl, [0, 0, 1, 1]);
        let order = cluster_order(&ids, &[1, 0, 1, 0]);
        assert_eq!(rz, z.select_rows(&order));
        // One cluster: id order.
        assert_eq!(cluster_order(&ids, &[0; 4]), vec![3, 1, 2, 0]);
    }

    fn tiny_model() -> (ModelParams, MultiOmicsDataset, SplitSpec) {
        let spec = crate::data::SynthSpec {
            samples: 30,
            features: vec![6, 4],
            latent_dim: 3,
            block_width: vec![1, 1],
            classes: 3,
            ..Default::default()
        };
        let s = crate::data::synth_generate(&spec).unwrap();
        let sp = crate::data::split(&s.dataset, 0).unwrap();
        let cfg = ModelConfig {
            latent_dim: 3,
            encoder_hidden: vec![5],
            gating_hidden: vec![4],
            decoder_hidden: vec![4],
        };
        let m = ModelParams::init(&s.dataset.shapes(), &cfg, false, &mut rng_from_seed(1)).unwrap();
        (m, s.dataset, sp)
    }

    #[test]
    fn gating_rows_on_simplex() {
        let (mut m, ds, sp) = tiny_model();
        let g = gating_report(&m, &ds, &sp.test, Exec::Sequential).unwrap();
        for i in 0..g.alpha.rows() {
            assert!((g.alpha.row(i).iter().sum::<f64>() - 1.0).abs() < 1e-9);
            assert!(g.alpha.row(i).iter().all(|a| (0.0..=1.0).contains(a)));
        }
        assert_eq!(g.means(), g.alpha.column_means());
        for s in m.gating.slices_mut() {
            s.1.iter_mut().for_each(|x| *x = 0.0);
        }
        let g = gating_report(&m, &ds, &sp.test, Exec::Sequential).unwrap();
        assert!(g.alpha.as_slice().iter().all(|&a| a == 0.5));
    }

    #[test]
    fn writes_every_report() {
        let (m, ds, sp) = tiny_model();
        let dir = tempfile::tempdir().unwrap();
        let s = write_reports(dir.path(), &m, &ds, &sp, 10, 3, 21, Exec::Sequential).unwrap();
        for f in [
            "biomarkers_omic1.csv",
            "biomarkers_omic2.csv",
            "active_map_omic1.csv",
            "gating.csv",
            "subtype_corr_input.csv",
            "subtype_corr_latent.csv",
            "latents_sorted.csv",
            "summary.txt",
        ] {
            assert!(dir.path().join(f).exists(), "{f}");
            assert!(s.files.iter().any(|x| x == f));
        }
    }
}
