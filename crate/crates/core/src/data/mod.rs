//! Multi-omics tables: ingestion, alignment by sample id, train-statistics
//! standardization, splitting and a synthetic generator with planted sparse
//! loadings.

mod io;
mod split;
mod synth;

pub use io::{load_labels, load_omics_csv, write_labels, write_omics_csv};
pub use split::{split, SplitSpec};
pub use synth::{synth_generate, SynthData, SynthSpec};

use std::collections::{BTreeMap, BTreeSet};

use log::warn;

use crate::error::{Error, Result};
use crate::numerics::Matrix;

/// One modality: `N × D_v` values with sample and feature names.
#[derive(Clone, Debug, PartialEq)]
pub struct OmicsMatrix {
    pub name: String,
    pub sample_ids: Vec<String>,
    pub feature_names: Vec<String>,
    pub values: Matrix,
}

impl OmicsMatrix {
    pub fn new(name: &str, sample_ids: Vec<String>, feature_names: Vec<String>, values: Matrix) -> Result<Self> {
        if values.rows() != sample_ids.len() || values.cols() != feature_names.len() {
            return Err(Error::shape(
                format!("omic {name}"),
                format!(
                    "{} ids and {} feature names for a {:?} matrix",
                    sample_ids.len(),
                    feature_names.len(),
                    values.shape()
                ),
            ));
        }
        if !values.is_finite() {
            return Err(Error::numeric(format!("omic {name}"), "non-finite values"));
        }
        Ok(OmicsMatrix {
            name: name.to_string(),
            sample_ids,
            feature_names,
            values,
        })
    }

    pub fn features(&self) -> usize {
        self.feature_names.len()
    }

    fn select(&self, rows: &[usize]) -> OmicsMatrix {
        OmicsMatrix {
            name: self.name.clone(),
            sample_ids: rows.iter().map(|&i| self.sample_ids[i].clone()).collect(),
            feature_names: self.feature_names.clone(),
            values: self.values.select_rows(rows),
        }
    }
}

/// Aligned modalities sharing one sample order, with optional subtype labels.
#[derive(Clone, Debug, PartialEq)]
pub struct MultiOmicsDataset {
    pub omics: Vec<OmicsMatrix>,
    pub labels: Option<Vec<String>>,
}

impl MultiOmicsDataset {
    pub fn samples(&self) -> usize {
        self.omics.first().map_or(0, |o| o.sample_ids.len())
    }

    pub fn sample_ids(&self) -> &[String] {
        self.omics.first().map_or(&[], |o| &o.sample_ids)
    }

    /// `(name, feature count)` per omic.
    pub fn shapes(&self) -> Vec<(String, usize)> {
        self.omics.iter().map(|o| (o.name.clone(), o.features())).collect()
    }

    /// Per-omic value matrices restricted to `rows`, in the given order.
    pub fn matrices(&self, rows: &[usize]) -> Vec<Matrix> {
        self.omics.iter().map(|o| o.values.select_rows(rows)).collect()
    }

    pub fn select(&self, rows: &[usize]) -> MultiOmicsDataset {
        MultiOmicsDataset {
            omics: self.omics.iter().map(|o| o.select(rows)).collect(),
            labels: self.labels.as_ref().map(|l| rows.iter().map(|&i| l[i].clone()).collect()),
        }
    }

    /// Integer class codes (sorted label order) and the class names.
    pub fn label_codes(&self) -> Option<(Vec<usize>, Vec<String>)> {
        self.labels.as_ref().map(|l| encode_labels(l))
    }
}

/// Maps labels to `0..C` in sorted label order.
pub fn encode_labels(labels: &[String]) -> (Vec<usize>, Vec<String>) {
    let classes: Vec<String> = labels.iter().cloned().collect::<BTreeSet<_>>().into_iter().collect();
    let index: BTreeMap<&str, usize> = classes.iter().enumerate().map(|(i, c)| (c.as_str(), i)).collect();
    (labels.iter().map(|l| index[l.as_str()]).collect(), classes)
}

#[derive(Clone, Debug, PartialEq, Eq, Default)]
pub struct AlignReport {
    /// Ids present somewhere but not in every input, sorted.
    pub dropped: Vec<String>,
}

/// Restricts every modality (and the labels, when given) to the common sample
/// ids, in lexicographic id order.
pub fn align(
    matrices: &[OmicsMatrix],
    labels: Option<&[(String, String)]>,
) -> Result<(MultiOmicsDataset, AlignReport)> {
    if matrices.is_empty() {
        return Err(Error::contract("align", "no modalities"));
    }
    let mut names = BTreeSet::new();
    for m in matrices {
        if !names.insert(m.name.as_str()) {
            return Err(Error::contract("align", format!("modality {} given twice", m.name)));
        }
    }
    let mut sets: Vec<BTreeSet<&str>> = matrices
        .iter()
        .map(|m| m.sample_ids.iter().map(String::as_str).collect())
        .collect();
    let label_map: Option<BTreeMap<&str, &str>> =
        labels.map(|l| l.iter().map(|(id, c)| (id.as_str(), c.as_str())).collect());
    if let Some(l) = &label_map {
        sets.push(l.keys().copied().collect());
    }
    let union: BTreeSet<&str> = sets.iter().flatten().copied().collect();
    let common: BTreeSet<&str> = union.iter().copied().filter(|id| sets.iter().all(|s| s.contains(id))).collect();
    if common.is_empty() {
        return Err(Error::contract("align", "modalities share no sample ids"));
    }
    let dropped: Vec<String> = union.difference(&common).map(|s| s.to_string()).collect();
    if !dropped.is_empty() {
        warn!("alignment dropped {} sample ids", dropped.len());
    }
    let order: Vec<&str> = common.into_iter().collect();
    let omics = matrices
        .iter()
        .map(|m| {
            let pos: BTreeMap<&str, usize> = m.sample_ids.iter().enumerate().map(|(i, s)| (s.as_str(), i)).collect();
            let rows: Vec<usize> = order.iter().map(|id| pos[id]).collect();
            m.select(&rows)
        })
        .collect();
    let labels = label_map.map(|l| order.iter().map(|id| l[id].to_string()).collect());
    Ok((MultiOmicsDataset { omics, labels }, AlignReport { dropped }))
}

/// Per-feature affine map fitted on training rows.
#[derive(Clone, Debug, PartialEq)]
pub struct Standardizer {
    pub mean: Vec<f64>,
    /// Population standard deviation; zero marks a constant feature.
    pub sd: Vec<f64>,
}

impl Standardizer {
    pub fn fit(x: &Matrix, rows: &[usize]) -> Result<Self> {
        if rows.is_empty() {
            return Err(Error::contract("standardize", "training split is empty"));
        }
        let n = rows.len() as f64;
        let d = x.cols();
        let mut mean = vec![0.0; d];
        for &i in rows {
            for (m, v) in mean.iter_mut().zip(x.row(i)) {
                *m += v;
            }
        }
        mean.iter_mut().for_each(|m| *m /= n);
        let mut var = vec![0.0; d];
        for &i in rows {
            for ((s, v), m) in var.iter_mut().zip(x.row(i)).zip(&mean) {
                *s += (v - m) * (v - m);
            }
        }
        let sd = var.into_iter().map(|s| (s / n).sqrt()).collect();
        Ok(Standardizer { mean, sd })
    }

    pub fn constant_features(&self) -> usize {
        self.sd.iter().filter(|&&s| s == 0.0).count()
    }

    pub fn transform(&self, x: &Matrix) -> Matrix {
        Matrix::from_fn(x.rows(), x.cols(), |i, j| {
            if self.sd[j] == 0.0 {
                0.0
            } else {
                (x.get(i, j) - self.mean[j]) / self.sd[j]
            }
        })
    }

    /// Inverse of [`Standardizer::transform`]; constant features come back as
    /// their training mean.
    pub fn inverse(&self, z: &Matrix) -> Matrix {
        Matrix::from_fn(z.rows(), z.cols(), |i, j| z.get(i, j) * self.sd[j] + self.mean[j])
    }
}

/// Z-scores every modality with statistics from the training rows only.
pub fn standardize(dataset: &MultiOmicsDataset, split: &SplitSpec) -> Result<(MultiOmicsDataset, Vec<Standardizer>)> {
    let mut out = dataset.clone();
    let mut stats = Vec::with_capacity(dataset.omics.len());
    for o in &mut out.omics {
        let s = Standardizer::fit(&o.values, &split.train)?;
        let c = s.constant_features();
        if c > 0 {
            warn!("omic {}: {c} constant features mapped to zero", o.name);
        }
        o.values = s.transform(&o.values);
        stats.push(s);
    }
    Ok((out, stats))
}
