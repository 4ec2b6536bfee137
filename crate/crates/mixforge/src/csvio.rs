//! CSV emission for every pipeline artifact, plus a strict reader used by
//! the schema checks. Values never contain commas, so the format is plain
//! comma separation with a single header line. Floats use Rust's shortest
//! round-trip formatting, which is deterministic, so re-running a seeded
//! command reproduces files byte for byte.

use std::fs;
use std::path::Path;

use crate::coupling::{Branch, CouplingCalibration, KantorovichDensity};
use crate::error::{Error, Result};
use crate::field::SpectralField;
use crate::haar::{NoisePath, NoiseSpec};
use crate::inverse::CalibrationRow;
use crate::mixing::{MixingReport, StationaryReport, StepRecord, StepStats};

/// One table ready to serialize: header plus rectangular rows.
#[derive(Clone, Debug)]
pub struct Table {
    pub header: Vec<String>,
    pub rows: Vec<Vec<String>>,
}

impl Table {
    pub fn new(header: &[&str]) -> Table {
        Table { header: header.iter().map(|s| s.to_string()).collect(), rows: Vec::new() }
    }

    pub fn push(&mut self, row: Vec<String>) {
        debug_assert_eq!(row.len(), self.header.len());
        self.rows.push(row);
    }

    pub fn render(&self) -> String {
        let mut out = self.header.join(",");
        out.push('\n');
        for row in &self.rows {
            out.push_str(&row.join(","));
            out.push('\n');
        }
        out
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        if let Some(dir) = path.parent() {
            fs::create_dir_all(dir)?;
        }
        fs::write(path, self.render())?;
        Ok(())
    }
}

/// Read a CSV written by this module; verifies every row matches the header
/// width so schema drift fails loudly.
pub fn read_csv(path: &Path) -> Result<Table> {
    let text = fs::read_to_string(path)?;
    let mut lines = text.lines();
    let header: Vec<String> = lines
        .next()
        .ok_or_else(|| Error::Validation(format!("{}: empty CSV", path.display())))?
        .split(',')
        .map(|s| s.to_string())
        .collect();
    let mut rows = Vec::new();
    for (i, line) in lines.enumerate() {
        if line.is_empty() {
            continue;
        }
        let row: Vec<String> = line.split(',').map(|s| s.to_string()).collect();
        if row.len() != header.len() {
            return Err(Error::Validation(format!(
                "{}: row {} has {} fields, header has {}",
                path.display(),
                i + 2,
                row.len(),
                header.len()
            )));
        }
        rows.push(row);
    }
    Ok(Table { header, rows })
}

fn f(x: f64) -> String {
    x.to_string()
}

/// Spectral coefficients as (k1, k2, component, re, im), retained modes only.
pub fn field_table(u: &SpectralField) -> Table {
    let mut t = Table::new(&["k1", "k2", "component", "re", "im"]);
    let n = u.grid.n();
    for (comp, data) in u.comps.iter().enumerate() {
        for i in 0..n {
            for j in 0..n {
                let k1 = u.grid.k_of(i);
                let k2 = u.grid.k_of(j);
                if !u.grid.retained(k1, k2) {
                    continue;
                }
                let z = data[[i, j]];
                t.push(vec![
                    k1.to_string(),
                    k2.to_string(),
                    comp.to_string(),
                    f(z.re),
                    f(z.im),
                ]);
            }
        }
    }
    t
}

/// Noise coefficients as (mode, level, shift, xi) in canonical order.
pub fn path_table(spec: &NoiseSpec, path: &NoisePath) -> Table {
    let mut t = Table::new(&["mode", "level", "shift", "xi"]);
    for (idx, xi) in spec.coeff_indices().iter().zip(path.xi.iter()) {
        t.push(vec![
            idx.mode.to_string(),
            idx.level.to_string(),
            idx.shift.to_string(),
            f(*xi),
        ]);
    }
    t
}

/// Right-inverse calibration lattice.
pub fn inverse_table(rows: &[CalibrationRow]) -> Table {
    let mut t = Table::new(&["r", "m", "max_defect_ratio", "operator_norm_estimate"]);
    for row in rows {
        t.push(vec![
            f(row.r),
            row.m.to_string(),
            f(row.max_defect_ratio),
            f(row.operator_norm_estimate),
        ]);
    }
    t
}

fn branch_name(b: Branch) -> &'static str {
    match b {
        Branch::Far => "far",
        Branch::Near => "near",
    }
}

/// Per-pair coupled-step log.
pub fn step_log_table(records: &[StepRecord]) -> Table {
    let mut t = Table::new(&[
        "pair",
        "step",
        "branch",
        "distance_before",
        "distance_after",
        "squeeze_ratio",
        "glued_equal",
        "tv_estimate",
        "clamped",
    ]);
    for r in records {
        t.push(vec![
            r.pair.to_string(),
            r.step.to_string(),
            branch_name(r.branch).to_string(),
            f(r.distance_before),
            f(r.distance_after),
            f(r.squeeze_ratio),
            r.glued_equal.to_string(),
            f(r.tv_estimate),
            r.clamped.to_string(),
        ]);
    }
    t
}

/// Per-step ensemble statistics.
pub fn mixing_steps_table(steps: &[StepStats]) -> Table {
    let mut t = Table::new(&[
        "k",
        "mean_fk",
        "q10",
        "q90",
        "mean_dist",
        "glued_fraction",
        "lip_lower",
        "lip_upper",
    ]);
    for s in steps {
        t.push(vec![
            s.k.to_string(),
            f(s.mean_fk),
            f(s.q10),
            f(s.q90),
            f(s.mean_dist),
            f(s.glued_fraction),
            f(s.lip_lower),
            f(s.lip_upper),
        ]);
    }
    t
}

/// Fitted rate plus every calibrated constant, one (key, value) row each.
pub fn mixing_summary_table(
    report: &MixingReport,
    kd: &KantorovichDensity,
    summary: &CouplingCalibration,
) -> Table {
    let mut t = Table::new(&["key", "value"]);
    let mut kv = |k: &str, v: String| t.push(vec![k.to_string(), v]);
    kv("kappa", f(report.fit.kappa));
    kv("band_lo", f(report.band.0));
    kv("band_hi", f(report.band.1));
    kv("prefactor", f(report.fit.prefactor));
    kv("floored", report.fit.floored.to_string());
    kv("burn_in", report.burn_in.to_string());
    kv("gamma", f(summary.gamma));
    kv("beta", f(summary.beta));
    kv("r0_star", f(summary.r0_star));
    kv("r_star", f(summary.r_star));
    kv("reg", f(summary.reg));
    kv("control_dim", summary.m.to_string());
    kv("gain", f(summary.gain));
    kv("delta", f(summary.delta));
    kv("squeeze_q", f(summary.squeeze_q));
    kv("c1_hat", f(summary.c1_hat));
    kv("d0", f(kd.d0));
    kv("p_hat", f(summary.p_hat));
    kv("merge_steps", kd.step_count().to_string());
    t
}

/// First exact-glue step per pair; -1 when the pair never glued.
pub fn glue_table(times: &[Option<usize>]) -> Table {
    let mut t = Table::new(&["pair", "glue_step"]);
    for (pair, time) in times.iter().enumerate() {
        let v = match time {
            Some(k) => *k as i64,
            None => -1,
        };
        t.push(vec![pair.to_string(), v.to_string()]);
    }
    t
}

/// Stationary moment table over both starts.
pub fn stationary_table(rep: &StationaryReport) -> Table {
    let mut t = Table::new(&["start", "observable", "mean", "band_lo", "band_hi", "var"]);
    for (tag, bands) in [("low", &rep.low), ("high", &rep.high)] {
        for b in bands.iter() {
            t.push(vec![
                tag.to_string(),
                b.name.clone(),
                f(b.mean),
                f(b.band.0),
                f(b.band.1),
                f(b.var),
            ]);
        }
    }
    t
}

/// Per-step norms of one simulated trajectory.
pub fn trajectory_table(rows: &[(usize, f64, f64)]) -> Table {
    let mut t = Table::new(&["step", "state_norm", "l2_norm"]);
    for (k, sn, l2) in rows {
        t.push(vec![k.to_string(), f(*sn), f(*l2)]);
    }
    t
}

/// One pass/fail line per acceptance check.
pub fn verify_table(rows: &[(String, bool, String)]) -> Table {
    let mut t = Table::new(&["check", "passed", "detail"]);
    for (name, ok, detail) in rows {
        t.push(vec![name.clone(), ok.to_string(), detail.replace(',', ";")]);
    }
    t
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::models::{state_space, sample_smooth_state, FlowConfig, ModelKind};
    use crate::rng::{stream, Domain};

    fn tmp(name: &str) -> std::path::PathBuf {
        std::env::temp_dir().join(format!("mixforge-csv-{}-{name}", std::process::id()))
    }

    #[test]
    fn tables_round_trip_and_stay_rectangular() {
        let cfg =
            FlowConfig { model: ModelKind::Nse { nu: 0.5 }, grid_n: 16, substeps: 8, index: 1.0 };
        let (_, basis) = state_space(&cfg).unwrap();
        let mut rng = stream(21, Domain::InitialState, 0, 0);
        let u = sample_smooth_state(&basis, 0.7, &mut rng);
        let t = field_table(&u);
        let path = tmp("field.csv");
        t.write(&path).unwrap();
        let back = read_csv(&path).unwrap();
        assert_eq!(back.header, vec!["k1", "k2", "component", "re", "im"]);
        assert_eq!(back.rows.len(), t.rows.len());
        // Floats survive the round trip exactly (shortest representation).
        for (a, b) in t.rows.iter().zip(back.rows.iter()) {
            assert_eq!(a, b);
            let re: f64 = b[3].parse().unwrap();
            assert!(re.is_finite());
        }
        std::fs::remove_file(&path).ok();
    }

    #[test]
    fn noise_path_table_lists_every_coefficient_in_order() {
        let spec = NoiseSpec::new(
            3,
            1,
            vec![0.4, 0.1, 0.05],
            vec![vec![1.0, 0.5, 0.25]; 3],
            0.5,
            false,
        )
        .unwrap();
        let mut rng = stream(22, Domain::NoisePath, 0, 0);
        let path = NoisePath::sample(&spec, &mut rng);
        let t = path_table(&spec, &path);
        assert_eq!(t.rows.len(), spec.dim());
        // Canonical order: level ascending, then mode, then shift.
        let levels: Vec<i32> = t.rows.iter().map(|r| r[1].parse().unwrap()).collect();
        let mut sorted = levels.clone();
        sorted.sort();
        assert_eq!(levels, sorted);
        for row in &t.rows {
            let xi: f64 = row[3].parse().unwrap();
            assert!((-1.0..=1.0).contains(&xi));
        }
    }

    #[test]
    fn mismatched_row_width_is_rejected() {
        let path = tmp("bad.csv");
        std::fs::write(&path, "a,b\n1,2\n3\n").unwrap();
        let err = read_csv(&path).unwrap_err();
        assert!(format!("{err}").contains("row 3"));
        std::fs::remove_file(&path).ok();
    }
}
