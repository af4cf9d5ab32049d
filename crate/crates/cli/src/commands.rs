//! One function per subcommand. Each returns an [`Outcome`]; errors from the
//! core library propagate unchanged so `main` can tag and map them.

use std::path::{Path, PathBuf};

use log::info;
use poems_core::data::{
    align, load_labels, load_omics_csv, split, standardize, synth_generate, write_labels, write_omics_csv,
    MultiOmicsDataset, OmicsMatrix, SplitSpec,
};
use poems_core::model::ModelParams;
use poems_core::numerics::Exec;
use poems_core::objective::{load_model, save_history_csv, save_model, train, TrainedModel};
use poems_core::verify::{decoder_bench, run_all, DECODE_TOL};
use poems_core::{Error, Result};

use crate::config::{replayable, resolve, RunConfig};

pub const SNAPSHOT: &str = "config.resolved";
pub const HISTORY: &str = "history.csv";

/// What a command produced. `failures` non-empty means a verification or
/// metric gate failed (exit 1).
#[derive(Debug, Default)]
pub struct Outcome {
    pub report: String,
    pub failures: Vec<String>,
}

impl Outcome {
    fn ok(report: String) -> Self {
        Outcome {
            report,
            failures: Vec::new(),
        }
    }
}

fn exec(cfg: &RunConfig) -> Exec {
    Exec::from_flag(cfg.parallel)
}

fn write(path: &Path, text: &str) -> Result<()> {
    if let Some(dir) = path.parent() {
        std::fs::create_dir_all(dir).map_err(|source| Error::Io {
            path: dir.to_path_buf(),
            source,
        })?;
    }
    std::fs::write(path, text).map_err(|source| Error::Io {
        path: path.to_path_buf(),
        source,
    })
}

fn mkdir(dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|source| Error::Io {
        path: dir.to_path_buf(),
        source,
    })
}

/// Reads and aligns the configured omics (and labels, when set).
pub fn load_dataset(cfg: &RunConfig) -> Result<MultiOmicsDataset> {
    if cfg.omics.is_empty() {
        return Err(Error::Config("data.omics is empty; expected name:path entries".into()));
    }
    let mats = cfg
        .omics
        .iter()
        .map(|(name, path)| load_omics_csv(path, name))
        .collect::<Result<Vec<_>>>()?;
    let labels = cfg.labels.as_deref().map(load_labels).transpose()?;
    let (ds, report) = align(&mats, labels.as_deref())?;
    info!(
        "loaded {} samples across {} omics ({} ids dropped by alignment)",
        ds.samples(),
        ds.omics.len(),
        report.dropped.len()
    );
    Ok(ds)
}

/// Split plus train-fitted standardization. Deterministic in the config, so
/// later commands rebuild exactly what training saw.
pub fn prepare(cfg: &RunConfig) -> Result<(MultiOmicsDataset, SplitSpec)> {
    let ds = load_dataset(cfg)?;
    let sp = split(&ds, cfg.split_seed())?;
    let (ds, _) = standardize(&ds, &sp)?;
    Ok((ds, sp))
}

/// Validates and writes the snapshot only.
pub fn cmd_resolve(cfg: &RunConfig) -> Result<Outcome> {
    cfg.validate()?;
    mkdir(&cfg.out)?;
    let text = cfg.snapshot();
    write(&cfg.out.join(SNAPSHOT), &text)?;
    Ok(Outcome::ok(text))
}

pub fn cmd_train(cfg: &RunConfig) -> Result<Outcome> {
    cfg.validate()?;
    let (ds, sp) = prepare(cfg)?;
    mkdir(&cfg.out)?;
    write(&cfg.out.join(SNAPSHOT), &cfg.snapshot())?;
    let (trained, history) = train(
        &ds.shapes(),
        &ds.matrices(&sp.train),
        &ds.matrices(&sp.val),
        &cfg.train,
        exec(cfg),
    )?;
    save_model(&cfg.model_dir(), &trained, &cfg.to_kv())?;
    save_history_csv(&cfg.out.join(HISTORY), &history)?;
    let best = history.best();
    Ok(Outcome::ok(format!(
        "epochs_run={}\nbest_epoch={}\nstop_reason={}\nbest_val_total={}\nmodel={}\n",
        history.epochs.len(),
        history.best_epoch,
        history.stop_reason.name(),
        best.val.total,
        cfg.model_dir().display()
    )))
}

/// Loads the model for `evaluate`/`interpret`. Without `--config` the data
/// settings come from the snapshot stored in the model directory.
pub fn load_for_analysis(
    model_dir: &Path,
    config: Option<&Path>,
    overrides: &[(String, String)],
) -> Result<(TrainedModel, RunConfig)> {
    let (trained, stored) = load_model(model_dir)?;
    let mut cfg = resolve(&replayable(&stored), config, overrides)?;
    cfg.model_dir = Some(model_dir.to_path_buf());
    Ok((trained, cfg))
}

fn check_compatible(model: &ModelParams, ds: &MultiOmicsDataset) -> Result<()> {
    let want: Vec<(String, usize)> = model.omics.iter().map(|o| (o.name.clone(), o.features())).collect();
    if want != ds.shapes() {
        return Err(Error::Contract {
            context: "model/data".into(),
            detail: format!("model expects {want:?}, data provide {:?}", ds.shapes()),
        });
    }
    Ok(())
}

pub fn cmd_evaluate(trained: &TrainedModel, cfg: &RunConfig) -> Result<Outcome> {
    cfg.validate()?;
    let (ds, sp) = prepare(cfg)?;
    check_compatible(&trained.model, &ds)?;
    let report = poems_core::eval::evaluate(&trained.model, &ds, &sp, &cfg.eval_seeds, cfg.knn_k, exec(cfg))?;
    report.save(&cfg.out)?;
    Ok(Outcome::ok(report.to_text()))
}

pub fn cmd_interpret(trained: &TrainedModel, cfg: &RunConfig) -> Result<Outcome> {
    cfg.validate()?;
    let (ds, sp) = prepare(cfg)?;
    check_compatible(&trained.model, &ds)?;
    let summary = poems_core::interpret::write_reports(
        &cfg.out,
        &trained.model,
        &ds,
        &sp,
        cfg.top_k,
        cfg.clusters,
        cfg.interpret_seed(),
        exec(cfg),
    )?;
    Ok(Outcome::ok(summary.to_text()))
}

/// Writes one CSV per omic, the labels, the planted loadings and a config
/// fragment pointing at the written files.
pub fn cmd_synth(cfg: &RunConfig) -> Result<Outcome> {
    let data = synth_generate(&cfg.synth)?;
    mkdir(&cfg.out)?;
    let abs = std::path::absolute(&cfg.out).map_err(|source| Error::Io {
        path: cfg.out.clone(),
        source,
    })?;
    let mut entries = Vec::new();
    for (om, w) in data.dataset.omics.iter().zip(&data.loadings) {
        let path = abs.join(format!("{}.csv", om.name));
        write_omics_csv(&path, om)?;
        entries.push(format!("{}:{}", om.name, path.display()));
        let factors = (1..=w.cols()).map(|c| format!("z{c}")).collect();
        let planted = OmicsMatrix::new(&om.name, om.feature_names.clone(), factors, w.clone())?;
        write_omics_csv(&abs.join(format!("planted_{}.csv", om.name)), &planted)?;
    }
    let labels_path: PathBuf = abs.join("labels.csv");
    let labels: Vec<(String, String)> = data
        .dataset
        .sample_ids()
        .iter()
        .cloned()
        .zip(data.dataset.labels.clone().unwrap_or_default())
        .collect();
    write_labels(&labels_path, &labels)?;
    let fragment = format!(
        "data.omics={}\ndata.labels={}\ntrain.latent_dim={}\n",
        entries.join(","),
        labels_path.display(),
        cfg.synth.latent_dim
    );
    write(&abs.join("data.conf"), &fragment)?;
    write(&abs.join(SNAPSHOT), &cfg.snapshot())?;
    Ok(Outcome::ok(format!(
        "samples={}\nclasses={}\nomics={}\nconfig={}\n",
        data.dataset.samples(),
        cfg.synth.classes,
        data.dataset.omics.len(),
        abs.join("data.conf").display()
    )))
}

pub fn cmd_bench(cfg: &RunConfig, out: Option<&Path>) -> Result<Outcome> {
    let report = decoder_bench(&cfg.bench, exec(cfg))?;
    let text = report.to_text();
    if let Some(dir) = out {
        write(&dir.join("bench.txt"), &text)?;
    }
    let mut failures = Vec::new();
    if !(report.max_deviation <= DECODE_TOL) {
        failures.push(format!("max_deviation {:e} exceeds {DECODE_TOL:e}", report.max_deviation));
    }
    if cfg.min_speedup > 0.0 && !(report.ratio() >= cfg.min_speedup) {
        failures.push(format!("speedup {:.3} below {}", report.ratio(), cfg.min_speedup));
    }
    Ok(Outcome { report: text, failures })
}

pub fn cmd_check(out: Option<&Path>) -> Result<Outcome> {
    let report = run_all();
    let text = report.to_text();
    if let Some(dir) = out {
        write(&dir.join("check.txt"), &text)?;
    }
    Ok(Outcome {
        report: text,
        failures: report.failures().into_iter().map(String::from).collect(),
    })
}
