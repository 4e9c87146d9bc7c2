//! `report`: per-iteration mean, min and max of the metrics columns across
//! several `metrics.csv` files, written to `<out>/report.csv`.

use std::collections::{BTreeMap, BTreeSet};
use std::path::Path;

use trajdistill::distill::MetricsRecord;

use crate::CliError;

const EXPECTED: [&str; 10] = [
    "iteration",
    "t",
    "start",
    "expert",
    "matching_loss",
    "overlap_loss",
    "mmd",
    "eta",
    "event",
    "config_hash",
];

const METRICS: [&str; 4] = ["matching_loss", "overlap_loss", "mmd", "eta"];

fn values(r: &MetricsRecord) -> [f64; 4] {
    [r.matching_loss, r.overlap_loss, r.mmd, r.eta]
}

fn read(path: &Path) -> Result<Vec<MetricsRecord>, CliError> {
    let bad = |e: &dyn std::fmt::Display| CliError::config(format!("{}: {e}", path.display()));
    let mut reader = csv::Reader::from_path(path).map_err(|e| bad(&e))?;
    let headers = reader.headers().map_err(|e| bad(&e))?.clone();
    if headers.iter().ne(EXPECTED.iter().copied()) {
        return Err(bad(&format!(
            "not a metrics file: columns are [{}], expected [{}]",
            headers.iter().collect::<Vec<_>>().join(","),
            EXPECTED.join(",")
        )));
    }
    reader
        .deserialize()
        .collect::<Result<Vec<MetricsRecord>, _>>()
        .map_err(|e| bad(&e))
}

#[derive(Default)]
struct Row {
    t: usize,
    values: Vec<[f64; 4]>,
    hashes: BTreeSet<String>,
}

pub fn run(files: &[impl AsRef<Path>], out: Option<&Path>) -> Result<(), CliError> {
    let mut rows: BTreeMap<usize, Row> = BTreeMap::new();
    for f in files {
        for r in read(f.as_ref())? {
            let row = rows.entry(r.iteration).or_insert_with(|| Row {
                t: r.t,
                ..Row::default()
            });
            row.values.push(values(&r));
            row.hashes.insert(r.config_hash.clone());
        }
    }
    let dir = out.unwrap_or(Path::new("."));
    std::fs::create_dir_all(dir).map_err(|e| CliError::runtime(format!("cannot create {}: {e}", dir.display())))?;
    let path = dir.join("report.csv");
    let fail = |e: csv::Error| CliError::runtime(format!("cannot write {}: {e}", path.display()));
    let mut w = csv::Writer::from_path(&path).map_err(fail)?;
    let mut header = vec!["iteration".to_string(), "t".into(), "runs".into()];
    for m in METRICS {
        for s in ["mean", "min", "max"] {
            header.push(format!("{m}_{s}"));
        }
    }
    header.push("config_hashes".into());
    w.write_record(&header).map_err(fail)?;
    for (iteration, row) in &rows {
        let n = row.values.len();
        let mut rec = vec![iteration.to_string(), row.t.to_string(), n.to_string()];
        for k in 0..METRICS.len() {
            let col = row.values.iter().map(|v| v[k]);
            let mean = col.clone().sum::<f64>() / n as f64;
            let min = col.clone().fold(f64::INFINITY, f64::min);
            let max = col.fold(f64::NEG_INFINITY, f64::max);
            rec.extend([mean.to_string(), min.to_string(), max.to_string()]);
        }
        rec.push(row.hashes.iter().cloned().collect::<Vec<_>>().join(";"));
        w.write_record(&rec).map_err(fail)?;
    }
    w.flush()
        .map_err(|e| CliError::runtime(format!("cannot write {}: {e}", path.display())))?;
    println!(
        "wrote {} ({} iterations from {} files)",
        path.display(),
        rows.len(),
        files.len()
    );
    Ok(())
}
