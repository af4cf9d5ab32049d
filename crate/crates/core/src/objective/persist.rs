//! Model directories and training-history CSV.
//!
//! A model directory holds one headerless CSV per parameter buffer plus a
//! `manifest.txt` of `key=value` lines with shapes, architecture, prior
//! hyperparameters and any caller-supplied config entries. Floats are written
//! with Rust's shortest round-trip formatting, so save → load is bit-exact.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use super::train::{TrainHistory, TrainedModel};
use crate::error::{Error, Result};
use crate::model::{ModelParams, OmicParams, SparseDecoder};
use crate::numerics::{Activation, Dense, Matrix, Mlp};
use crate::sparsity::{FactorLoadings, SslHyper, SslState};

pub const MANIFEST: &str = "manifest.txt";
const FORMAT: &str = "poems-model-1";

fn write(path: &Path, contents: &str) -> Result<()> {
    fs::write(path, contents).map_err(|e| Error::io(path, e))
}

fn read(path: &Path) -> Result<String> {
    fs::read_to_string(path).map_err(|e| Error::io(path, e))
}

pub(crate) fn matrix_csv(m: &Matrix) -> String {
    let mut s = String::with_capacity(m.rows() * m.cols() * 20);
    for i in 0..m.rows() {
        for (j, v) in m.row(i).iter().enumerate() {
            if j > 0 {
                s.push(',');
            }
            write!(s, "{v}").unwrap();
        }
        s.push('\n');
    }
    s
}

fn parse_matrix(path: &Path, rows: usize, cols: usize) -> Result<Matrix> {
    let text = read(path)?;
    let mut data = Vec::with_capacity(rows * cols);
    let mut seen = 0;
    for (ln, line) in text.lines().enumerate() {
        if line.is_empty() {
            continue;
        }
        seen += 1;
        let before = data.len();
        for cell in line.split(',') {
            let v: f64 = cell.parse().map_err(|_| Error::Ingest {
                path: path.to_path_buf(),
                line: ln as u64 + 1,
                detail: format!("not a number: {cell:?}"),
            })?;
            data.push(v);
        }
        if data.len() - before != cols {
            return Err(Error::Ingest {
                path: path.to_path_buf(),
                line: ln as u64 + 1,
                detail: format!("expected {cols} values, found {}", data.len() - before),
            });
        }
    }
    if seen != rows && !(rows == 0 || cols == 0) {
        return Err(Error::Ingest {
            path: path.to_path_buf(),
            line: seen as u64,
            detail: format!("expected {rows} rows, found {seen}"),
        });
    }
    Matrix::from_vec(rows, cols, data)
}

fn join<T: ToString>(xs: &[T]) -> String {
    xs.iter().map(ToString::to_string).collect::<Vec<_>>().join(",")
}

struct Writer<'a> {
    dir: &'a Path,
    manifest: Vec<(String, String)>,
}

impl Writer<'_> {
    fn entry(&mut self, key: impl Into<String>, value: impl ToString) {
        self.manifest.push((key.into(), value.to_string()));
    }

    fn matrix(&mut self, name: &str, m: &Matrix) -> Result<()> {
        self.entry(format!("tensor.{name}"), format!("{}x{}", m.rows(), m.cols()));
        write(&self.dir.join(format!("{name}.csv")), &matrix_csv(m))
    }

    fn vector(&mut self, name: &str, v: &[f64]) -> Result<()> {
        self.matrix(name, &Matrix::from_vec(1, v.len(), v.to_vec())?)
    }

    fn mlp(&mut self, name: &str, mlp: &Mlp) -> Result<()> {
        self.entry(format!("net.{name}.sizes"), join(&mlp.sizes()));
        let acts: Vec<&str> = mlp.layers.iter().map(|l| l.activation.name()).collect();
        self.entry(format!("net.{name}.activations"), acts.join(","));
        for (l, layer) in mlp.layers.iter().enumerate() {
            self.matrix(&format!("{name}.layer{l}.weight"), &layer.weight)?;
            self.vector(&format!("{name}.layer{l}.bias"), &layer.bias)?;
        }
        Ok(())
    }
}

/// Writes `trained` into `dir` (created if missing). `extra` entries are
/// stored under `config.<key>`.
pub fn save_model(dir: &Path, trained: &TrainedModel, extra: &[(String, String)]) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let m = &trained.model;
    let mut w = Writer {
        dir,
        manifest: Vec::new(),
    };
    w.entry("format", FORMAT);
    w.entry("latent_dim", m.latent_dim);
    let names: Vec<&str> = m.omics.iter().map(|o| o.name.as_str()).collect();
    w.entry("omics", names.join(","));
    for (o, s) in m.omics.iter().zip(&trained.ssl) {
        let p = &o.name;
        w.entry(format!("omic.{p}.features"), o.features());
        w.entry(format!("omic.{p}.learned_obs_variance"), o.obs_log_var.is_some());
        w.mlp(&format!("{p}.encoder"), &o.encoder)?;
        w.mlp(&format!("{p}.decoder.trunk"), &o.decoder.trunk)?;
        w.vector(&format!("{p}.decoder.bias"), &o.decoder.bias)?;
        w.matrix(&format!("{p}.loadings"), &o.loadings.w)?;
        if let Some(l) = &o.obs_log_var {
            w.vector(&format!("{p}.obs_log_var"), l)?;
        }
        let h = s.hyper;
        w.entry(format!("ssl.{p}.lambda0"), h.lambda0);
        w.entry(format!("ssl.{p}.lambda1"), h.lambda1);
        w.entry(format!("ssl.{p}.a"), h.a);
        w.entry(format!("ssl.{p}.b"), h.b);
        w.entry(format!("ssl.{p}.eta_init"), h.eta_init);
        w.matrix(&format!("{p}.ssl.gamma"), &s.gamma)?;
        w.vector(&format!("{p}.ssl.eta"), &s.eta)?;
    }
    w.mlp("gating", &m.gating)?;
    for (k, v) in extra {
        w.entry(format!("config.{k}"), v);
    }
    let mut text = String::new();
    for (k, v) in &w.manifest {
        writeln!(text, "{k}={v}").unwrap();
    }
    write(&dir.join(MANIFEST), &text)
}

pub(crate) fn parse_kv(path: &Path, text: &str) -> Result<BTreeMap<String, String>> {
    let mut out = BTreeMap::new();
    for (ln, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let (k, v) = line.split_once('=').ok_or_else(|| Error::Ingest {
            path: path.to_path_buf(),
            line: ln as u64 + 1,
            detail: "expected key=value".into(),
        })?;
        out.insert(k.trim().to_string(), v.trim().to_string());
    }
    Ok(out)
}

struct Reader<'a> {
    dir: &'a Path,
    kv: BTreeMap<String, String>,
}

impl Reader<'_> {
    fn get(&self, key: &str) -> Result<&str> {
        self.kv
            .get(key)
            .map(String::as_str)
            .ok_or_else(|| Error::Config(format!("manifest is missing `{key}`")))
    }

    fn parse<T: std::str::FromStr>(&self, key: &str) -> Result<T> {
        let v = self.get(key)?;
        v.parse()
            .map_err(|_| Error::Config(format!("manifest entry `{key}` has invalid value {v:?}")))
    }

    fn matrix(&self, name: &str) -> Result<Matrix> {
        let shape = self.get(&format!("tensor.{name}"))?;
        let (r, c) = shape
            .split_once('x')
            .and_then(|(r, c)| Some((r.parse().ok()?, c.parse().ok()?)))
            .ok_or_else(|| Error::Config(format!("bad shape {shape:?} for {name}")))?;
        parse_matrix(&self.dir.join(format!("{name}.csv")), r, c)
    }

    fn vector(&self, name: &str) -> Result<Vec<f64>> {
        Ok(self.matrix(name)?.into_vec())
    }

    fn mlp(&self, name: &str) -> Result<Mlp> {
        let acts = self.get(&format!("net.{name}.activations"))?;
        let mut layers = Vec::new();
        for (l, a) in acts.split(',').enumerate() {
            let activation =
                Activation::parse(a).ok_or_else(|| Error::Config(format!("unknown activation {a:?} in {name}")))?;
            layers.push(Dense {
                weight: self.matrix(&format!("{name}.layer{l}.weight"))?,
                bias: self.vector(&format!("{name}.layer{l}.bias"))?,
                activation,
            });
        }
        let mlp = Mlp { layers };
        mlp.validate()?;
        Ok(mlp)
    }
}

/// Reads a model directory written by [`save_model`]. Returns the model and
/// the `config.*` entries.
pub fn load_model(dir: &Path) -> Result<(TrainedModel, BTreeMap<String, String>)> {
    let path = dir.join(MANIFEST);
    let kv = parse_kv(&path, &read(&path)?)?;
    let r = Reader { dir, kv };
    if r.get("format")? != FORMAT {
        return Err(Error::Config(format!("unsupported model format {:?}", r.get("format")?)));
    }
    let latent_dim: usize = r.parse("latent_dim")?;
    let mut omics = Vec::new();
    let mut ssl = Vec::new();
    for name in r.get("omics")?.split(',') {
        let p = name.to_string();
        let learned: bool = r.parse(&format!("omic.{p}.learned_obs_variance"))?;
        let omic = OmicParams {
            name: p.clone(),
            encoder: r.mlp(&format!("{p}.encoder"))?,
            decoder: SparseDecoder {
                trunk: r.mlp(&format!("{p}.decoder.trunk"))?,
                bias: r.vector(&format!("{p}.decoder.bias"))?,
            },
            loadings: FactorLoadings {
                omic: p.clone(),
                w: r.matrix(&format!("{p}.loadings"))?,
            },
            obs_log_var: if learned {
                Some(r.vector(&format!("{p}.obs_log_var"))?)
            } else {
                None
            },
        };
        let hyper = SslHyper {
            lambda0: r.parse(&format!("ssl.{p}.lambda0"))?,
            lambda1: r.parse(&format!("ssl.{p}.lambda1"))?,
            a: r.parse(&format!("ssl.{p}.a"))?,
            b: r.parse(&format!("ssl.{p}.b"))?,
            eta_init: r.parse(&format!("ssl.{p}.eta_init"))?,
        };
        ssl.push(SslState {
            hyper,
            gamma: r.matrix(&format!("{p}.ssl.gamma"))?,
            eta: r.vector(&format!("{p}.ssl.eta"))?,
        });
        omics.push(omic);
    }
    let model = ModelParams {
        latent_dim,
        omics,
        gating: r.mlp("gating")?,
    };
    model.validate()?;
    let config = r
        .kv
        .iter()
        .filter_map(|(k, v)| k.strip_prefix("config.").map(|k| (k.to_string(), v.clone())))
        .collect();
    Ok((TrainedModel { model, ssl }, config))
}

/// One row per epoch: train terms then validation terms.
pub fn history_csv(h: &TrainHistory) -> String {
    let mut header = vec!["epoch".to_string()];
    for split in ["train", "val"] {
        header.push(format!("{split}_total"));
        for o in &h.omics {
            header.push(format!("{split}_recon_{o}"));
        }
        header.push(format!("{split}_kl"));
        for o in &h.omics {
            header.push(format!("{split}_penalty_{o}"));
        }
    }
    let mut s = header.join(",");
    s.push('\n');
    for e in &h.epochs {
        write!(s, "{}", e.epoch).unwrap();
        for l in [&e.train, &e.val] {
            write!(s, ",{}", l.total).unwrap();
            for r in &l.recon {
                write!(s, ",{r}").unwrap();
            }
            write!(s, ",{}", l.kl).unwrap();
            for p in &l.penalty {
                write!(s, ",{p}").unwrap();
            }
        }
        s.push('\n');
    }
    s
}

pub fn save_history_csv(path: &Path, h: &TrainHistory) -> Result<()> {
    write(path, &history_csv(h))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{standard_normal, ModelConfig};
    use crate::numerics::{rng_from_seed, Params};

    fn trained(learned: bool) -> TrainedModel {
        let mut rng = rng_from_seed(11);
        let cfg = ModelConfig {
            latent_dim: 3,
            encoder_hidden: vec![5],
            gating_hidden: vec![4],
            decoder_hidden: vec![6],
        };
        let mut model = ModelParams::init(&[("mRNA".into(), 5), ("miRNA".into(), 2)], &cfg, learned, &mut rng).unwrap();
        for o in &mut model.omics {
            o.decoder.bias = standard_normal(&mut rng, 1, o.features()).into_vec();
            o.loadings.w.set(0, 0, 1e-300);
            o.loadings.w.set(0, 1, -0.1 / 3.0);
        }
        let ssl = model
            .omics
            .iter()
            .map(|o| SslState::new(&o.loadings, SslHyper::default()).unwrap())
            .collect();
        TrainedModel { model, ssl }
    }

    #[test]
    fn round_trip_is_bit_exact() {
        for learned in [false, true] {
            let t = trained(learned);
            let dir = tempfile::tempdir().unwrap();
            let extra = vec![("epochs".to_string(), "7".to_string())];
            save_model(dir.path(), &t, &extra).unwrap();
            let (back, cfg) = load_model(dir.path()).unwrap();
            assert_eq!(back, t);
            assert_eq!(
                back.model.to_flat().iter().map(|x| x.to_bits()).collect::<Vec<_>>(),
                t.model.to_flat().iter().map(|x| x.to_bits()).collect::<Vec<_>>()
            );
            assert_eq!(cfg.get("epochs").map(String::as_str), Some("7"));
        }
    }

    #[test]
    fn corrupted_tensor_reports_line() {
        let t = trained(false);
        let dir = tempfile::tempdir().unwrap();
        save_model(dir.path(), &t, &[]).unwrap();
        let p = dir.path().join("mRNA.loadings.csv");
        let mut text = fs::read_to_string(&p).unwrap();
        text = text.replacen('\n', "\nx,", 1);
        fs::write(&p, text).unwrap();
        match load_model(dir.path()) {
            Err(Error::Ingest { line, .. }) => assert_eq!(line, 2),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn missing_manifest_is_io_error() {
        let dir = tempfile::tempdir().unwrap();
        assert!(matches!(load_model(dir.path()), Err(Error::Io { .. })));
    }
}
