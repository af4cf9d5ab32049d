use std::collections::HashSet;
use std::fmt::Write as _;
use std::fs::File;
use std::path::Path;

use super::OmicsMatrix;
use crate::error::{Error, Result};
use crate::numerics::Matrix;

fn ingest(path: &Path, line: u64, detail: impl Into<String>) -> Error {
    Error::Ingest {
        path: path.to_path_buf(),
        line,
        detail: detail.into(),
    }
}

fn reader(path: &Path) -> Result<csv::Reader<File>> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    Ok(csv::ReaderBuilder::new()
        .has_headers(false)
        .quoting(false)
        .flexible(true)
        .from_reader(file))
}

fn records(path: &Path) -> Result<Vec<(u64, csv::StringRecord)>> {
    let mut out = Vec::new();
    for rec in reader(path)?.records() {
        let rec = rec.map_err(|e| {
            let line = e.position().map_or(0, |p| p.line());
            ingest(path, line, e.to_string())
        })?;
        let line = rec.position().map_or(0, |p| p.line());
        if rec.len() == 1 && rec[0].trim().is_empty() {
            continue;
        }
        out.push((line, rec));
    }
    Ok(out)
}

/// Reads `sample_id,<features…>` followed by one row per sample.
pub fn load_omics_csv(path: &Path, name: &str) -> Result<OmicsMatrix> {
    let rows = records(path)?;
    let Some((hline, header)) = rows.first() else {
        return Err(ingest(path, 1, "empty file"));
    };
    if header.len() < 2 {
        return Err(ingest(path, *hline, "header needs sample_id and at least one feature"));
    }
    let features: Vec<String> = header.iter().skip(1).map(str::to_string).collect();
    let d = features.len();
    let mut ids = Vec::with_capacity(rows.len() - 1);
    let mut seen = HashSet::new();
    let mut data = Vec::with_capacity((rows.len() - 1) * d);
    for (line, rec) in &rows[1..] {
        if rec.len() != d + 1 {
            return Err(ingest(path, *line, format!("expected {} fields, found {}", d + 1, rec.len())));
        }
        let id = rec[0].to_string();
        if id.is_empty() {
            return Err(ingest(path, *line, "empty sample id"));
        }
        if !seen.insert(id.clone()) {
            return Err(ingest(path, *line, format!("duplicate sample id {id:?}")));
        }
        for (j, cell) in rec.iter().skip(1).enumerate() {
            let v: f64 = cell
                .trim()
                .parse()
                .map_err(|_| ingest(path, *line, format!("column {:?}: not a number: {cell:?}", features[j])))?;
            if !v.is_finite() {
                return Err(ingest(path, *line, format!("column {:?}: non-finite value", features[j])));
            }
            data.push(v);
        }
        ids.push(id);
    }
    let values = Matrix::from_vec(ids.len(), d, data)?;
    OmicsMatrix::new(name, ids, features, values)
}

pub fn write_omics_csv(path: &Path, m: &OmicsMatrix) -> Result<()> {
    let mut s = String::from("sample_id");
    for f in &m.feature_names {
        write!(s, ",{f}").unwrap();
    }
    s.push('\n');
    for (i, id) in m.sample_ids.iter().enumerate() {
        s.push_str(id);
        for v in m.values.row(i) {
            write!(s, ",{v}").unwrap();
        }
        s.push('\n');
    }
    std::fs::write(path, s).map_err(|e| Error::io(path, e))
}

/// Reads `sample_id,subtype` pairs. A first row whose first cell is
/// `sample_id` is treated as a header.
pub fn load_labels(path: &Path) -> Result<Vec<(String, String)>> {
    let mut out = Vec::new();
    let mut seen = HashSet::new();
    for (i, (line, rec)) in records(path)?.into_iter().enumerate() {
        if i == 0 && rec.get(0) == Some("sample_id") {
            continue;
        }
        if rec.len() != 2 {
            return Err(ingest(path, line, format!("expected 2 fields, found {}", rec.len())));
        }
        if rec[1].is_empty() {
            return Err(ingest(path, line, "empty subtype"));
        }
        if !seen.insert(rec[0].to_string()) {
            return Err(ingest(path, line, format!("duplicate sample id {:?}", &rec[0])));
        }
        out.push((rec[0].to_string(), rec[1].to_string()));
    }
    Ok(out)
}

pub fn write_labels(path: &Path, labels: &[(String, String)]) -> Result<()> {
    let mut s = String::from("sample_id,subtype\n");
    for (id, c) in labels {
        writeln!(s, "{id},{c}").unwrap();
    }
    std::fs::write(path, s).map_err(|e| Error::io(path, e))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn file(contents: &str) -> tempfile::NamedTempFile {
        let f = tempfile::NamedTempFile::new().unwrap();
        std::fs::write(f.path(), contents).unwrap();
        f
    }

    fn line_of(e: Error) -> u64 {
        match e {
            Error::Ingest { line, .. } => line,
            other => panic!("expected ingestion error, got {other:?}"),
        }
    }

    #[test]
    fn minimal_file() {
        let f = file("sample_id,g1,g2\ns1,1,2\ns2,3,4\n");
        let m = load_omics_csv(f.path(), "mRNA").unwrap();
        assert_eq!(m.values.as_slice(), &[1.0, 2.0, 3.0, 4.0]);
        assert_eq!(m.sample_ids, vec!["s1", "s2"]);
        assert_eq!(m.feature_names, vec!["g1", "g2"]);
        assert_eq!(m.name, "mRNA");
    }

    #[test]
    fn errors_carry_line_numbers() {
        let f = file("sample_id,g1,g2\ns1,1,2\ns1,3,4\n");
        assert_eq!(line_of(load_omics_csv(f.path(), "m").unwrap_err()), 3);
        let f = file("sample_id,g1,g2\ns1,1,2\ns2,3\n");
        assert_eq!(line_of(load_omics_csv(f.path(), "m").unwrap_err()), 3);
        let f = file("sample_id,g1,g2\ns1,1,abc\n");
        assert_eq!(line_of(load_omics_csv(f.path(), "m").unwrap_err()), 2);
        let f = file("sample_id,g1,g2\ns1,1,\n");
        assert_eq!(line_of(load_omics_csv(f.path(), "m").unwrap_err()), 2);
    }

    #[test]
    fn round_trip() {
        let m = OmicsMatrix::new(
            "x",
            vec!["a".into(), "b".into()],
            vec!["f".into()],
            Matrix::from_rows(&[[0.1], [-1.0 / 3.0]]).unwrap(),
        )
        .unwrap();
        let f = tempfile::NamedTempFile::new().unwrap();
        write_omics_csv(f.path(), &m).unwrap();
        assert_eq!(load_omics_csv(f.path(), "x").unwrap(), m);

        let labels = vec![("a".to_string(), "LumA".to_string()), ("b".into(), "Basal".into())];
        write_labels(f.path(), &labels).unwrap();
        assert_eq!(load_labels(f.path()).unwrap(), labels);
    }

    #[test]
    fn missing_file_is_io_error() {
        let err = load_omics_csv(Path::new("/nonexistent/x.csv"), "m").unwrap_err();
        assert!(matches!(err, Error::Io { .. }));
    }
}
