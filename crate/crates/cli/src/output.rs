//! CSV and JSON writers.
//!
//! Floats are written in scientific notation with 17 significant digits,
//! which round-trips every `f64` exactly. Missing values are empty fields.
//! Files are written to a temporary sibling and renamed into place.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use serde::Serialize;
use walksearch::ensemble::{EnsembleStats, SweepRow, TrajectoryRecord};
use walksearch::lindblad::PopulationSample;

use crate::CliError;

pub fn fmt(x: f64) -> String {
    format!("{x:.16e}")
}

fn fmt_opt(x: Option<f64>) -> String {
    x.map(fmt).unwrap_or_default()
}

/// Writes `contents` to `path` through a temporary file and a rename.
pub fn write_atomic(path: &Path, contents: &[u8]) -> Result<(), CliError> {
    let name = path
        .file_name()
        .ok_or_else(|| CliError::Schema(format!("not a file path: {}", path.display())))?;
    let tmp = path.with_file_name(format!(".{}.tmp", name.to_string_lossy()));
    {
        let mut f = fs::File::create(&tmp)?;
        f.write_all(contents)?;
        f.sync_all()?;
    }
    fs::rename(&tmp, path)?;
    Ok(())
}

#[derive(Default)]
struct Csv {
    buf: String,
}

impl Csv {
    fn row<I: IntoIterator<Item = String>>(&mut self, cells: I) {
        let line: Vec<String> = cells.into_iter().collect();
        self.buf.push_str(&line.join(","));
        self.buf.push('\n');
    }

    fn write(self, path: &Path) -> Result<(), CliError> {
        write_atomic(path, self.buf.as_bytes())
    }
}

fn indexed(prefix: &str, n: usize) -> impl Iterator<Item = String> + '_ {
    (0..n).map(move |k| format!("{prefix}{k}"))
}

/// `t, mean_fidelity, stderr, mean_x, mean_y`
pub fn write_ensemble_csv(path: &Path, st: &EnsembleStats, stride: usize) -> Result<(), CliError> {
    let mut csv = Csv::default();
    csv.row(["t", "mean_fidelity", "stderr", "mean_x", "mean_y"].map(String::from));
    for i in (0..st.times.len()).step_by(stride) {
        csv.row([st.times[i], st.mean_fidelity[i], st.se_fidelity[i], st.mean_x[i], st.mean_y[i]].map(fmt));
    }
    csv.write(path)
}

/// `t, theta_bar_0 … theta_bar_{n-1}, stderr_0 … stderr_{n-1}`
pub fn write_couplings_csv(path: &Path, st: &EnsembleStats, stride: usize) -> Result<(), CliError> {
    let nc = st.mean_theta.len();
    let mut csv = Csv::default();
    csv.row(std::iter::once("t".to_string()).chain(indexed("theta_bar_", nc)).chain(indexed("stderr_", nc)));
    for i in (0..st.times.len()).step_by(stride) {
        csv.row(
            std::iter::once(fmt(st.times[i]))
                .chain(st.mean_theta.iter().map(|v| fmt(v[i])))
                .chain(st.se_theta.iter().map(|v| fmt(v[i]))),
        );
    }
    csv.write(path)
}

/// `t, mean_curvature, applied_count`
pub fn write_curvature_csv(path: &Path, st: &EnsembleStats, stride: usize) -> Result<(), CliError> {
    let mut csv = Csv::default();
    csv.row(["t", "mean_curvature", "applied_count"].map(String::from));
    for i in (0..st.times.len()).step_by(stride) {
        csv.row([fmt(st.times[i]), fmt_opt(st.mean_curvature[i]), st.applied_count[i].to_string()]);
    }
    csv.write(path)
}

/// `t, fidelity, x, y, theta_0 … theta_{n-1}` and, when recorded,
/// `dy_x, dy_y`.
pub fn write_trajectory_csv(path: &Path, rec: &TrajectoryRecord) -> Result<(), CliError> {
    let nc = rec.theta.first().map_or(0, |t| t.len());
    let mut csv = Csv::default();
    let mut header: Vec<String> = ["t", "fidelity", "x", "y"].map(String::from).to_vec();
    header.extend(indexed("theta_", nc));
    if rec.dy.is_some() {
        header.extend(["dy_x".to_string(), "dy_y".to_string()]);
    }
    csv.row(header);
    for i in 0..rec.times.len() {
        let mut cells: Vec<String> = [rec.times[i], rec.fidelity[i], rec.x[i], rec.y[i]].map(fmt).to_vec();
        cells.extend(rec.theta[i].iter().map(|&t| fmt(t)));
        if let Some(dy) = &rec.dy {
            cells.extend(dy[i].iter().map(|&v| fmt(v)));
        }
        csv.row(cells);
    }
    csv.write(path)
}

/// `t, p_0 … p_{n-1}, max_offdiag`
pub fn write_populations_csv(path: &Path, series: &[PopulationSample], stride: usize) -> Result<(), CliError> {
    let n = series.first().map_or(0, |s| s.populations.len());
    let mut csv = Csv::default();
    csv.row(
        std::iter::once("t".to_string())
            .chain(indexed("p_", n))
            .chain(std::iter::once("max_offdiag".to_string())),
    );
    for s in series.iter().step_by(stride) {
        csv.row(
            std::iter::once(fmt(s.t))
                .chain(s.populations.iter().map(|&p| fmt(p)))
                .chain(std::iter::once(fmt(s.max_offdiag))),
        );
    }
    csv.write(path)
}

/// `xi, t_th, t_th_stderr, effective_time, effective_time_stderr,
/// theta_bar_0 … theta_bar_{n-1}`
pub fn write_sweep_csv(path: &Path, rows: &[SweepRow]) -> Result<(), CliError> {
    let nc = rows.first().map_or(0, |r| r.asymptotic_theta.len());
    let mut csv = Csv::default();
    let mut header: Vec<String> = ["xi", "t_th", "t_th_stderr", "effective_time", "effective_time_stderr"]
        .map(String::from)
        .to_vec();
    header.extend(indexed("theta_bar_", nc));
    csv.row(header);
    for r in rows {
        let mut cells = vec![
            fmt(r.xi),
            fmt_opt(r.t_th),
            fmt_opt(r.t_th_se),
            fmt_opt(r.effective_time),
            fmt_opt(r.effective_time_se),
        ];
        cells.extend(r.asymptotic_theta.iter().map(|&t| fmt(t)));
        csv.row(cells);
    }
    csv.write(path)
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<(), CliError> {
    let mut text = serde_json::to_string_pretty(value).map_err(|e| CliError::Schema(e.to_string()))?;
    text.push('\n');
    write_atomic(path, text.as_bytes())
}

/// Output paths of one `simulate` run.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct OutputBundle {
    pub ensemble_csv: PathBuf,
    pub couplings_csv: PathBuf,
    pub trajectory_csv: Option<PathBuf>,
    pub summary_json: PathBuf,
}

impl OutputBundle {
    pub fn in_dir(dir: &Path) -> Self {
        Self {
            ensemble_csv: dir.join("ensemble.csv"),
            couplings_csv: dir.join("couplings.csv"),
            trajectory_csv: None,
            summary_json: dir.join("summary.json"),
        }
    }
}
