use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use crate::config::{ReportFormat, VERSION};
use crate::error::{HarnessError, Result};
use crate::report::{read_jsonl, ReportRow, ReportWriter};

use super::{GeometryFile, NecessityRow};

pub const HIST_BINS: usize = 20;

#[derive(Debug, Clone, PartialEq, Default)]
pub struct PlotReport {
    pub files: Vec<PathBuf>,
    /// Reports that were absent and therefore not plotted.
    pub missing: Vec<PathBuf>,
}

/// Ordinary least squares `y = slope * x + intercept`. With constant `x`
/// the intercept is fixed at zero and the slope fits through the origin.
pub fn least_squares(xs: &[f64], ys: &[f64]) -> (f64, f64) {
    let n = xs.len().min(ys.len());
    if n == 0 {
        return (0.0, 0.0);
    }
    let mx = xs[..n].iter().sum::<f64>() / n as f64;
    let my = ys[..n].iter().sum::<f64>() / n as f64;
    let sxx: f64 = xs[..n].iter().map(|x| (x - mx).powi(2)).sum();
    if sxx <= 1e-12 * (1.0 + mx * mx) * n as f64 {
        let xx: f64 = xs[..n].iter().map(|x| x * x).sum();
        let xy: f64 = xs[..n].iter().zip(&ys[..n]).map(|(x, y)| x * y).sum();
        return (if xx > 0.0 { xy / xx } else { 0.0 }, 0.0);
    }
    let sxy: f64 = xs[..n].iter().zip(&ys[..n]).map(|(x, y)| (x - mx) * (y - my)).sum();
    let slope = sxy / sxx;
    (slope, my - slope * mx)
}

fn read_optional<T>(
    path: &Path,
    missing: &mut Vec<PathBuf>,
    read: impl FnOnce(&Path) -> Result<T>,
) -> Result<Option<T>> {
    match read(path) {
        Ok(v) => Ok(Some(v)),
        Err(HarnessError::MissingReport(p)) => {
            missing.push(p);
            Ok(None)
        }
        Err(e) => Err(e),
    }
}

fn read_csv_rows(path: &Path) -> Result<Vec<BTreeMap<String, String>>> {
    if !path.exists() {
        return Err(HarnessError::MissingReport(path.to_path_buf()));
    }
    let mut r = csv::Reader::from_path(path)?;
    let header = r.headers()?.clone();
    r.records().map(|rec| Ok(header.iter().map(String::from).zip(rec?.iter().map(String::from)).collect())).collect()
}

fn read_json<T: for<'de> serde::Deserialize<'de>>(path: &Path) -> Result<T> {
    if !path.exists() {
        return Err(HarnessError::MissingReport(path.to_path_buf()));
    }
    let text = std::fs::read_to_string(path).map_err(HarnessError::io(path))?;
    Ok(serde_json::from_str(&text)?)
}

/// Turns the reports under `dir` into flat CSV series under `dir/plot`.
pub fn emit_plot_data(dir: &Path) -> Result<PlotReport> {
    let mut report = PlotReport::default();
    let rows: Option<Vec<ReportRow>> = read_optional(&dir.join("extract/rows.jsonl"), &mut report.missing, read_jsonl)?;
    let sweep = read_optional(&dir.join("sweep/table.csv"), &mut report.missing, read_csv_rows)?;
    let necessity: Option<Vec<NecessityRow>> =
        read_optional(&dir.join("necessity/profiles.jsonl"), &mut report.missing, read_jsonl)?;
    let geometry: Option<GeometryFile> =
        read_optional(&dir.join("geometry/report.json"), &mut report.missing, read_json)?;
    if rows.is_none() && sweep.is_none() && necessity.is_none() && geometry.is_none() {
        return Err(HarnessError::MissingReport(dir.to_path_buf()));
    }

    let hash = rows
        .as_ref()
        .and_then(|r| r.first().map(|r| r.config_hash.clone()))
        .or_else(|| necessity.as_ref().and_then(|n| n.first().map(|r| r.config_hash.clone())))
        .or_else(|| geometry.as_ref().map(|g| g.config_hash.clone()))
        .unwrap_or_default();
    let writer = ReportWriter::new(dir.join("plot"), hash, VERSION.to_string(), vec![ReportFormat::Csv])?;

    if let Some(table) = &sweep {
        let cols = ["budget", "method", "retention_mean", "retention_std", "n"];
        report.files.extend(writer.csv(
            "retention_curve.csv",
            &cols,
            table.iter().map(|r| cols.iter().map(|c| r.get(*c).cloned().unwrap_or_default()).collect()),
        )?);
    }

    if let Some(rows) = &rows {
        let mut bins: BTreeMap<String, [usize; HIST_BINS]> = BTreeMap::new();
        for r in rows {
            let b = ((r.rm * HIST_BINS as f64).floor() as usize).min(HIST_BINS - 1);
            bins.entry(r.method.as_str().to_string()).or_insert([0; HIST_BINS])[b] += 1;
        }
        report.files.extend(writer.csv(
            "redundancy_hist.csv",
            &["method", "bin_lo", "bin_hi", "count"],
            bins.iter().flat_map(|(m, counts)| {
                counts.iter().enumerate().map(move |(i, c)| {
                    vec![
                        m.clone(),
                        (i as f64 / HIST_BINS as f64).to_string(),
                        ((i + 1) as f64 / HIST_BINS as f64).to_string(),
                        c.to_string(),
                    ]
                })
            }),
        )?);
        report.files.extend(writer.csv(
            "length_scatter.csv",
            &["trace_id", "method", "t", "core_len", "cr"],
            rows.iter().map(|r| {
                vec![
                    r.trace_id.clone(),
                    r.method.as_str().to_string(),
                    r.t.to_string(),
                    r.core_len.to_string(),
                    r.cr.to_string(),
                ]
            }),
        )?);
        let mut by_method: BTreeMap<&str, (Vec<f64>, Vec<f64>)> = BTreeMap::new();
        for r in rows {
            let e = by_method.entry(r.method.as_str()).or_default();
            e.0.push(r.t as f64);
            e.1.push(r.core_len as f64);
        }
        report.files.extend(writer.csv(
            "length_fit.csv",
            &["method", "slope", "intercept", "n"],
            by_method.iter().map(|(m, (xs, ys))| {
                let (slope, intercept) = least_squares(xs, ys);
                vec![m.to_string(), slope.to_string(), intercept.to_string(), xs.len().to_string()]
            }),
        )?);
    }

    if let Some(profiles) = &necessity {
        let live: Vec<&NecessityRow> = profiles.iter().filter(|p| !p.degenerate).collect();
        let max_k = live.iter().map(|p| p.t).max().unwrap_or(0);
        let mut out = Vec::new();
        for k in 1..=max_k {
            let mean = |f: &dyn Fn(&NecessityRow) -> f64| live.iter().map(|p| f(p)).sum::<f64>() / live.len() as f64;
            let observed = mean(&|p| p.cumulative_mass[k.min(p.t) - 1]);
            let uniform = mean(&|p| k.min(p.t) as f64 / p.t as f64);
            out.push(vec![k.to_string(), observed.to_string(), uniform.to_string(), live.len().to_string()]);
        }
        report.files.extend(writer.csv("topk_curve.csv", &["k", "nmass", "uniform", "n"], out)?);
    }

    if let Some(g) = &geometry {
        let cell = |m: &tracecore::geometry::Measured| m.value.map(|v| v.to_string()).unwrap_or_default();
        let mut out = Vec::new();
        for grp in &g.report.groups {
            for (metric, m) in [
                ("probe", &grp.probe_accuracy),
                ("knn", &grp.knn_accuracy),
                ("silhouette", &grp.silhouette),
                ("davies_bouldin", &grp.davies_bouldin),
                ("intrinsic_dim", &grp.intrinsic_dim),
                ("relative_variance", &grp.relative_variance),
            ] {
                out.push(vec![grp.group.as_str().to_string(), metric.to_string(), cell(m)]);
            }
        }
        report.files.extend(writer.csv("geometry_bars.csv", &["group", "metric", "value"], out)?);
    }
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn least_squares_recovers_line() {
        let xs = [1.0, 2.0, 3.0, 4.0];
        let ys: Vec<f64> = xs.iter().map(|x| 0.5 * x + 2.0).collect();
        let (s, i) = least_squares(&xs, &ys);
        assert!((s - 0.5).abs() < 1e-12 && (i - 2.0).abs() < 1e-12);
    }

    #[test]
    fn constant_x_fits_through_origin() {
        let (s, i) = least_squares(&[4.0, 4.0, 4.0], &[2.0, 2.0, 5.0]);
        assert_eq!(i, 0.0);
        assert!((s - 0.75).abs() < 1e-12);
    }

    #[test]
    fn empty_directory_is_missing_report() {
        let dir = tempfile::tempdir().unwrap();
        assert!(matches!(emit_plot_data(dir.path()), Err(HarnessError::MissingReport(_))));
    }
}
