use log::warn;
use rand::seq::SliceRandom;

use super::MultiOmicsDataset;
use crate::error::{Error, Result};
use crate::numerics::rng_from_seed;

const TEST_FRACTION: f64 = 0.2;
const VAL_FRACTION: f64 = 0.2;
/// Smallest class that still allows stratification.
const MIN_CLASS: usize = 3;

/// Row indices of each split, each list sorted ascending.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct SplitSpec {
    pub train: Vec<usize>,
    pub val: Vec<usize>,
    pub test: Vec<usize>,
    pub seed: u64,
    pub stratified: bool,
}

/// Splits `total` into parts proportional to `weights` by largest remainder;
/// ties go to the earlier part.
fn apportion(weights: &[usize], total: usize) -> Vec<usize> {
    let sum: usize = weights.iter().sum();
    if sum == 0 {
        return vec![0; weights.len()];
    }
    let mut out: Vec<usize> = weights.iter().map(|w| w * total / sum).collect();
    let mut rem: Vec<(usize, usize)> = weights.iter().enumerate().map(|(i, w)| (w * total % sum, i)).collect();
    rem.sort_by(|a, b| b.0.cmp(&a.0).then(a.1.cmp(&b.1)));
    let short = total - out.iter().sum::<usize>();
    for &(_, i) in rem.iter().take(short) {
        out[i] += 1;
    }
    out
}

/// 80/20 train/test, then 20% of the training part as validation. Stratified
/// by label when labels exist and every class has at least three samples.
pub fn split(dataset: &MultiOmicsDataset, seed: u64) -> Result<SplitSpec> {
    let n = dataset.samples();
    if n < 10 {
        return Err(Error::contract("split", format!("need at least 10 samples, have {n}")));
    }
    let n_test = (n as f64 * TEST_FRACTION).round() as usize;
    let n_val = ((n - n_test) as f64 * VAL_FRACTION).round() as usize;
    let mut rng = rng_from_seed(seed);

    let groups: Option<Vec<Vec<usize>>> = dataset.label_codes().and_then(|(codes, classes)| {
        let mut g = vec![Vec::new(); classes.len()];
        for (i, c) in codes.into_iter().enumerate() {
            g[c].push(i);
        }
        if g.iter().any(|m| m.len() < MIN_CLASS) {
            warn!("a subtype has fewer than {MIN_CLASS} samples; splitting without stratification");
            None
        } else {
            Some(g)
        }
    });

    let (mut train, mut val, mut test) = (Vec::new(), Vec::new(), Vec::new());
    let stratified = groups.is_some();
    match groups {
        Some(mut groups) => {
            let sizes: Vec<usize> = groups.iter().map(Vec::len).collect();
            let t = apportion(&sizes, n_test);
            let rest: Vec<usize> = sizes.iter().zip(&t).map(|(s, t)| s - t).collect();
            let v = apportion(&rest, n_val);
            for (c, members) in groups.iter_mut().enumerate() {
                members.shuffle(&mut rng);
                test.extend_from_slice(&members[..t[c]]);
                val.extend_from_slice(&members[t[c]..t[c] + v[c]]);
                train.extend_from_slice(&members[t[c] + v[c]..]);
            }
        }
        None => {
            let mut all: Vec<usize> = (0..n).collect();
            all.shuffle(&mut rng);
            test.extend_from_slice(&all[..n_test]);
            val.extend_from_slice(&all[n_test..n_test + n_val]);
            train.extend_from_slice(&all[n_test + n_val..]);
        }
    }
    train.sort_unstable();
    val.sort_unstable();
    test.sort_unstable();
    Ok(SplitSpec {
        train,
        val,
        test,
        seed,
        stratified,
    })
}
