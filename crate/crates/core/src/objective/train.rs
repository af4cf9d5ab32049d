//! Mini-batch training with AdamW, one spike-and-slab EM cycle per step and
//! early stopping on the validation total.

use log::{debug, info};
use rand::seq::SliceRandom;

use super::{elbo_loss, elbo_step, LossBreakdown, LossConfig};
use crate::error::{Error, Result};
use crate::model::{standard_normal, ModelConfig, ModelParams};
use crate::numerics::{adamw_step, derived_rng, rng_from_seed, AdamWConfig, Exec, Matrix, OptState};
use crate::sparsity::{SslHyper, SslState};

/// Stream used for the fixed validation noise; epoch `e` uses stream `e`.
const VALIDATION_STREAM: u64 = u64::MAX;

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub epochs: usize,
    pub model: ModelConfig,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub weight_decay: f64,
    pub patience: usize,
    pub seed: u64,
    /// Learn a per-feature observation log-variance instead of the fixed one.
    pub learn_obs_variance: bool,
    pub obs_variance: f64,
    /// Multiplier on the spike-and-slab penalty. `None` divides it by the
    /// training-set size, so the loss is the per-sample share of the joint
    /// log posterior; with a unit weight the prior on `W` outweighs the
    /// per-sample reconstruction by a factor of N and the loadings collapse.
    pub penalty_weight: Option<f64>,
    pub ssl: SslHyper,
    /// Log progress every this many epochs (0 disables).
    pub log_every: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 5000,
            model: ModelConfig::default(),
            batch_size: 512,
            learning_rate: 9e-4,
            weight_decay: 1e-4,
            patience: 100,
            seed: 21,
            learn_obs_variance: false,
            obs_variance: 1.0,
            penalty_weight: None,
            ssl: SslHyper::default(),
            log_every: 100,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(m.to_string()));
        if self.epochs == 0 {
            return bad("epochs must be positive");
        }
        if self.model.latent_dim == 0 {
            return bad("latent_dim must be positive");
        }
        if self.batch_size == 0 {
            return bad("batch_size must be positive");
        }
        if self.patience == 0 {
            return bad("patience must be at least 1");
        }
        if !(self.obs_variance > 0.0) {
            return bad("obs_variance must be positive");
        }
        if self.penalty_weight.is_some_and(|w| !(w >= 0.0)) {
            return bad("penalty_weight must be non-negative");
        }
        self.adamw().validate()?;
        self.ssl.validate()
    }

    pub fn adamw(&self) -> AdamWConfig {
        AdamWConfig {
            lr: self.learning_rate,
            weight_decay: self.weight_decay,
            ..AdamWConfig::default()
        }
    }

    /// Loss settings for a training set of `n_train` samples.
    pub fn loss(&self, n_train: usize) -> LossConfig {
        LossConfig {
            obs_variance: self.obs_variance,
            penalty_weight: self.penalty_weight.unwrap_or(1.0 / n_train.max(1) as f64),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum StopReason {
    MaxEpochs,
    EarlyStop,
}

impl StopReason {
    pub fn name(self) -> &'static str {
        match self {
            StopReason::MaxEpochs => "max_epochs",
            StopReason::EarlyStop => "early_stop",
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct EpochRecord {
    /// 1-based.
    pub epoch: usize,
    /// Sample-weighted mean of the mini-batch losses seen during the epoch.
    pub train: LossBreakdown,
    pub val: LossBreakdown,
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainHistory {
    pub omics: Vec<String>,
    pub epochs: Vec<EpochRecord>,
    pub best_epoch: usize,
    pub stop_reason: StopReason,
}

impl TrainHistory {
    pub fn best(&self) -> &EpochRecord {
        &self.epochs[self.best_epoch - 1]
    }
}

/// Parameters together with the prior state they were trained under.
#[derive(Clone, Debug, PartialEq)]
pub struct TrainedModel {
    pub model: ModelParams,
    pub ssl: Vec<SslState>,
}

fn check_split(name: &str, xs: &[Matrix], omics: &[(String, usize)]) -> Result<usize> {
    if xs.len() != omics.len() {
        return Err(Error::contract("train", format!("{name} split has {} omics", xs.len())));
    }
    let n = xs.first().map_or(0, Matrix::rows);
    if n == 0 {
        return Err(Error::contract("train", format!("{name} split is empty")));
    }
    for (x, (o, d)) in xs.iter().zip(omics) {
        if x.rows() != n || x.cols() != *d {
            return Err(Error::shape(
                "train",
                format!("{name} split of omic {o} is {:?}, expected ({n}, {d})", x.shape()),
            ));
        }
    }
    Ok(n)
}

fn accumulate(acc: &mut Option<LossBreakdown>, l: &LossBreakdown, weight: f64) {
    match acc {
        None => {
            *acc = Some(LossBreakdown {
                recon: l.recon.iter().map(|r| r * weight).collect(),
                kl: l.kl * weight,
                penalty: l.penalty.iter().map(|p| p * weight).collect(),
                total: 0.0,
            })
        }
        Some(a) => {
            a.recon.iter_mut().zip(&l.recon).for_each(|(x, y)| *x += y * weight);
            a.kl += l.kl * weight;
            a.penalty.iter_mut().zip(&l.penalty).for_each(|(x, y)| *x += y * weight);
        }
    }
}

/// Trains from scratch. `omics` lists `(name, feature count)`; `train_x` and
/// `val_x` hold one matrix per omic with aligned rows.
pub fn train(
    omics: &[(String, usize)],
    train_x: &[Matrix],
    val_x: &[Matrix],
    cfg: &TrainConfig,
    exec: Exec,
) -> Result<(TrainedModel, TrainHistory)> {
    cfg.validate()?;
    let n_train = check_split("training", train_x, omics)?;
    let n_val = check_split("validation", val_x, omics)?;
    let k = cfg.model.latent_dim;
    let loss_cfg = cfg.loss(n_train);

    let mut init_rng = rng_from_seed(cfg.seed);
    let mut model = ModelParams::init(omics, &cfg.model, cfg.learn_obs_variance, &mut init_rng)?;
    let mut ssl = model
        .omics
        .iter()
        .map(|o| SslState::new(&o.loadings, cfg.ssl))
        .collect::<Result<Vec<_>>>()?;
    let mut opt = OptState::new(&model, cfg.adamw())?;

    let val_noise = standard_normal(&mut derived_rng(cfg.seed, VALIDATION_STREAM), n_val, k);
    let val_refs: Vec<&Matrix> = val_x.iter().collect();

    let mut history = TrainHistory {
        omics: omics.iter().map(|(n, _)| n.clone()).collect(),
        epochs: Vec::new(),
        best_epoch: 0,
        stop_reason: StopReason::MaxEpochs,
    };
    let mut best: Option<(f64, TrainedModel)> = None;
    let mut order: Vec<usize> = (0..n_train).collect();

    for epoch in 1..=cfg.epochs {
        let mut rng = derived_rng(cfg.seed, epoch as u64);
        order.shuffle(&mut rng);
        let mut sum: Option<LossBreakdown> = None;
        for idx in order.chunks(cfg.batch_size) {
            let batch: Vec<Matrix> = train_x.iter().map(|x| x.select_rows(idx)).collect();
            let refs: Vec<&Matrix> = batch.iter().collect();
            let noise = standard_normal(&mut rng, idx.len(), k);
            let (loss, grads) = elbo_step(&refs, &noise, &model, &ssl, &loss_cfg, exec)?;
            accumulate(&mut sum, &loss, idx.len() as f64);
            adamw_step(&mut model, &grads, &mut opt)?;
            for (s, o) in ssl.iter_mut().zip(&model.omics) {
                s.em_update(&o.loadings)?;
            }
        }
        let mut train_loss = sum.expect("at least one batch");
        let inv = 1.0 / n_train as f64;
        train_loss.recon.iter_mut().for_each(|r| *r *= inv);
        train_loss.kl *= inv;
        train_loss.penalty.iter_mut().for_each(|p| *p *= inv);
        train_loss.total = train_loss.recon.iter().sum::<f64>() + train_loss.kl + train_loss.penalty.iter().sum::<f64>();

        let val_loss = elbo_loss(&val_refs, &val_noise, &model, &ssl, &loss_cfg, exec)?;
        let improved = best.as_ref().is_none_or(|(b, _)| val_loss.total < *b);
        if cfg.log_every > 0 && (epoch % cfg.log_every == 0 || epoch == 1) {
            info!(
                "epoch {epoch}: train {:.6} val {:.6} (kl {:.4})",
                train_loss.total, val_loss.total, val_loss.kl
            );
        }
        if improved {
            best = Some((
                val_loss.total,
                TrainedModel {
                    model: model.clone(),
                    ssl: ssl.clone(),
                },
            ));
            history.best_epoch = epoch;
        }
        history.epochs.push(EpochRecord {
            epoch,
            train: train_loss,
            val: val_loss,
        });
        if epoch - history.best_epoch >= cfg.patience {
            debug!("no validation improvement for {} epochs", cfg.patience);
            history.stop_reason = StopReason::EarlyStop;
            break;
        }
    }
    let (_, trained) = best.expect("at least one epoch");
    info!(
        "stopped after {} epochs ({}); best epoch {}",
        history.epochs.len(),
        history.stop_reason.name(),
        history.best_epoch
    );
    Ok((trained, history))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::Params;

    fn toy_data(seed: u64, n: usize) -> (Vec<(String, usize)>, Vec<Matrix>) {
        let mut rng = rng_from_seed(seed);
        let z = standard_normal(&mut rng, n, 2);
        let a = Matrix::from_fn(n, 6, |i, j| z.get(i, j % 2) * (1.0 + j as f64 * 0.1));
        let b = Matrix::from_fn(n, 4, |i, j| z.get(i, (j + 1) % 2) - 0.5 * j as f64 * z.get(i, 0));
        (vec![("a".into(), 6), ("b".into(), 4)], vec![a, b])
    }

    fn small_cfg() -> TrainConfig {
        TrainConfig {
            epochs: 50,
            model: ModelConfig {
                latent_dim: 3,
                encoder_hidden: vec![8],
                gating_hidden: vec![4],
                decoder_hidden: vec![8],
            },
            batch_size: 16,
            learning_rate: 1e-2,
            weight_decay: 1e-4,
            patience: 1000,
            log_every: 0,
            ..TrainConfig::default()
        }
    }

    #[test]
    fn loss_decreases() {
        let (omics, tr) = toy_data(1, 64);
        let (_, va) = toy_data(2, 16);
        let (_, h) = train(&omics, &tr, &va, &small_cfg(), Exec::Sequential).unwrap();
        assert_eq!(h.epochs.len(), 50);
        assert!(h.epochs[49].train.total < h.epochs[0].train.total);
        for e in &h.epochs {
            let parts = e.val.recon.iter().sum::<f64>() + e.val.kl + e.val.penalty.iter().sum::<f64>();
            assert!((e.val.total - parts).abs() < 1e-9);
        }
    }

    #[test]
    fn frozen_optimizer_stops_after_two_epochs() {
        let (omics, tr) = toy_data(1, 32);
        let (_, va) = toy_data(2, 12);
        let cfg = TrainConfig {
            learning_rate: 0.0,
            patience: 1,
            ..small_cfg()
        };
        let (_, h) = train(&omics, &tr, &va, &cfg, Exec::Sequential).unwrap();
        assert_eq!(h.epochs.len(), 2);
        assert_eq!(h.stop_reason, StopReason::EarlyStop);
        assert_eq!(h.best_epoch, 1);
    }

    #[test]
    fn deterministic_across_runs_and_exec() {
        let (omics, tr) = toy_data(3, 40);
        let (_, va) = toy_data(4, 10);
        let cfg = TrainConfig {
            epochs: 5,
            ..small_cfg()
        };
        let (m1, h1) = train(&omics, &tr, &va, &cfg, Exec::Sequential).unwrap();
        let (m2, h2) = train(&omics, &tr, &va, &cfg, Exec::Parallel).unwrap();
        assert_eq!(h1, h2);
        assert_eq!(m1.model.to_flat(), m2.model.to_flat());
    }

    #[test]
    fn best_epoch_is_minimum_and_returned() {
        let (omics, tr) = toy_data(5, 48);
        let (_, va) = toy_data(6, 12);
        let cfg = TrainConfig {
            epochs: 30,
            patience: 5,
            ..small_cfg()
        };
        let (m, h) = train(&omics, &tr, &va, &cfg, Exec::Sequential).unwrap();
        let best = h.best().val.total;
        assert!(h.epochs.iter().all(|e| best <= e.val.total));
        let refs: Vec<&Matrix> = va.iter().collect();
        let noise = standard_normal(&mut derived_rng(cfg.seed, VALIDATION_STREAM), 12, 3);
        let again = elbo_loss(&refs, &noise, &m.model, &m.ssl, &cfg.loss(48), Exec::Sequential).unwrap();
        assert_eq!(again.total, best);
    }

    #[test]
    fn empty_split_is_rejected() {
        let (omics, tr) = toy_data(1, 8);
        let empty = vec![Matrix::zeros(0, 6), Matrix::zeros(0, 4)];
        assert!(matches!(
            train(&omics, &tr, &empty, &small_cfg(), Exec::Sequential),
            Err(Error::Contract { .. })
        ));
    }
}
