//! CSV and JSON writers.

use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::Path;

use moment_filter::models::Dataset;
use moment_filter::quadrature::QuadratureRule;
use serde::Serialize;

use crate::experiment::EstimatorRun;

fn num(x: f64) -> String {
    if x.is_finite() {
        x.to_string()
    } else {
        String::new()
    }
}

fn numbered(prefix: &str, d: usize) -> impl Iterator<Item = String> + '_ {
    (1..=d).map(move |i| format!("{prefix}_{i}"))
}

/// Header of the per-run trajectory CSV for a `d`-dimensional state.
pub fn trajectory_header(d: usize) -> Vec<String> {
    ["estimator", "param", "k", "t", "diverged", "nll_increment"]
        .iter()
        .map(|s| s.to_string())
        .chain(numbered("mean", d))
        .chain(numbered("var", d))
        .chain(std::iter::once("error".to_string()))
        .collect()
}

/// One row per completed step and estimator; a divergent estimator gets a
/// final row at the failing step with `diverged = 1` and empty values.
pub fn write_trajectory<W: Write>(out: W, data: &Dataset, estimators: &[EstimatorRun]) -> csv::Result<()> {
    let d = data.states[0].len();
    let mut w = csv::Writer::from_writer(out);
    w.write_record(trajectory_header(d))?;
    for e in estimators {
        for s in &e.steps {
            let mut row = vec![
                e.kind.to_string(),
                e.param.to_string(),
                s.k.to_string(),
                num(s.t),
                "0".into(),
                num(s.nll_increment),
            ];
            row.extend(s.mean.iter().map(|v| num(*v)));
            row.extend(s.var.iter().map(|v| num(*v)));
            row.push(num(s.error));
            w.write_record(&row)?;
        }
        if let Some(k) = e.diverged_at {
            let t = data.times.get(k).copied().unwrap_or(f64::NAN);
            let mut row = vec![
                e.kind.to_string(),
                e.param.to_string(),
                k.to_string(),
                num(t),
                "1".into(),
                String::new(),
            ];
            row.extend(std::iter::repeat_n(String::new(), 2 * d + 1));
            w.write_record(&row)?;
        }
    }
    w.flush()?;
    Ok(())
}

pub fn write_trajectory_csv(path: &Path, data: &Dataset, estimators: &[EstimatorRun]) -> anyhow::Result<()> {
    write_trajectory(BufWriter::new(File::create(path)?), data, estimators)?;
    Ok(())
}

/// Columns `k, t, x_1..x_d, y_1..y_m`; the `k = 0` row has no measurement.
pub fn write_dataset<W: Write>(out: W, data: &Dataset) -> csv::Result<()> {
    let d = data.states[0].len();
    let m = data.ys.first().map_or(0, |y| y.len());
    let mut w = csv::Writer::from_writer(out);
    let header: Vec<String> = ["k".to_string(), "t".to_string()]
        .into_iter()
        .chain(numbered("x", d))
        .chain(numbered("y", m))
        .collect();
    w.write_record(&header)?;
    for (k, (t, x)) in data.times.iter().zip(&data.states).enumerate() {
        let mut row = vec![k.to_string(), num(*t)];
        row.extend(x.iter().map(|v| num(*v)));
        match k.checked_sub(1).and_then(|i| data.ys.get(i)) {
            Some(y) => row.extend(y.iter().map(|v| num(*v))),
            None => row.extend(std::iter::repeat_n(String::new(), m)),
        }
        w.write_record(&row)?;
    }
    w.flush()?;
    Ok(())
}

pub fn write_dataset_csv(path: &Path, data: &Dataset) -> anyhow::Result<()> {
    write_dataset(BufWriter::new(File::create(path)?), data)?;
    Ok(())
}

/// Columns `node_1..node_d, weight`.
pub fn write_rule<W: Write>(out: W, rule: &QuadratureRule) -> csv::Result<()> {
    let mut w = csv::Writer::from_writer(out);
    let header: Vec<String> = numbered("node", rule.dim())
        .chain(std::iter::once("weight".to_string()))
        .collect();
    w.write_record(&header)?;
    for (x, wt) in rule.nodes().zip(rule.weights()) {
        let row: Vec<String> = x.iter().chain(std::iter::once(wt)).map(|v| num(*v)).collect();
        w.write_record(&row)?;
    }
    w.flush()?;
    Ok(())
}

pub fn write_json<T: Serialize + ?Sized>(path: &Path, value: &T) -> anyhow::Result<()> {
    let mut f = BufWriter::new(File::create(path)?);
    serde_json::to_writer_pretty(&mut f, value)?;
    f.write_all(b"\n")?;
    f.flush()?;
    Ok(())
}
