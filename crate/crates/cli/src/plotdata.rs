//! `plotdata`: flattens a report JSON into plot-ready CSV files next to the
//! input — decay curves with their closed-bound overlay, Wasserstein curves
//! with the fitted log-linear overlay, support probabilities, and the drift
//! table. Sections absent from the report are skipped with a warning.

use crate::run::CliError;
use ergo_sfde_core::fmt_g17;
use serde_json::Value;
use std::fs;
use std::path::{Path, PathBuf};

fn num(v: &Value, key: &str, context: &str) -> Result<f64, CliError> {
    v.get(key)
        .and_then(Value::as_f64)
        .ok_or_else(|| CliError::Malformed(format!("{context}: key '{key}' missing or not a number")))
}

fn num_list(v: &Value, key: &str, context: &str) -> Result<Vec<f64>, CliError> {
    let arr = v
        .get(key)
        .and_then(Value::as_array)
        .ok_or_else(|| CliError::Malformed(format!("{context}: key '{key}' missing or not a list")))?;
    arr.iter()
        .map(|x| {
            x.as_f64().ok_or_else(|| {
                CliError::Malformed(format!("{context}: key '{key}' holds a non-number"))
            })
        })
        .collect()
}

fn objects<'a>(v: &'a Value, key: &str, context: &str) -> Result<&'a [Value], CliError> {
    v.get(key)
        .and_then(Value::as_array)
        .map(Vec::as_slice)
        .ok_or_else(|| CliError::Malformed(format!("{context}: key '{key}' missing or not a list")))
}

/// Rebuilds the decay CSV (with the closed exponential bound column) from a
/// serialized decay fit.
fn decay_csv(fit: &Value) -> Result<String, CliError> {
    let ctx = "decay fit";
    let times = num_list(fit, "times", ctx)?;
    let mean_sq = num_list(fit, "mean_sq", ctx)?;
    let stderr = num_list(fit, "stderr", ctx)?;
    if times.len() != mean_sq.len() || times.len() != stderr.len() {
        return Err(CliError::Malformed(format!(
            "{ctx}: times, mean_sq, and stderr have unequal lengths"
        )));
    }
    let alpha = num(fit, "alpha_target", ctx)?;
    let prefactor = num(fit, "theoretical_prefactor", ctx)?;
    let gap0 = num(fit, "gap0", ctx)?;
    let mut out = String::from("t,mean_sq_gap,stderr,bound_4exp\n");
    for (i, &t) in times.iter().enumerate() {
        let bound = prefactor * gap0 * gap0 * (-alpha * t).exp();
        out.push_str(&format!(
            "{},{},{},{}\n",
            fmt_g17(t),
            fmt_g17(mean_sq[i]),
            fmt_g17(stderr[i]),
            fmt_g17(bound),
        ));
    }
    Ok(out)
}

/// Merges both Wasserstein curves and evaluates the fitted overlay
/// `exp(intercept + slope t)` of the first curve on the shared grid.
fn wasserstein_csv(section: &Value) -> Result<String, CliError> {
    let ctx = "wasserstein section";
    let xi_curve = objects(section, "xi_curve", ctx)?;
    let eta_curve = objects(section, "eta_curve", ctx)?;
    if xi_curve.len() != eta_curve.len() {
        return Err(CliError::Malformed(format!(
            "{ctx}: xi_curve and eta_curve have unequal lengths"
        )));
    }
    let fit = section
        .get("xi_fit")
        .ok_or_else(|| CliError::Malformed(format!("{ctx}: key 'xi_fit' missing")))?;
    let slope = num(fit, "slope", "xi_fit")?;
    let intercept = num(fit, "intercept", "xi_fit")?;
    let mut out =
        String::from("t,w_upper_xi,stderr_xi,w_upper_eta,stderr_eta,fitted_xi\n");
    for (p, q) in xi_curve.iter().zip(eta_curve) {
        let t = num(p, "t", "curve point")?;
        let fitted = (intercept + slope * t).exp();
        out.push_str(&format!(
            "{},{},{},{},{},{}\n",
            fmt_g17(t),
            fmt_g17(num(p, "w_upper", "curve point")?),
            fmt_g17(num(p, "stderr_boot", "curve point")?),
            fmt_g17(num(q, "w_upper", "curve point")?),
            fmt_g17(num(q, "stderr_boot", "curve point")?),
            fmt_g17(fitted),
        ));
    }
    Ok(out)
}

/// Tabulates the support probes (probabilities and certificates).
fn support_csv(report: &Value) -> Result<String, CliError> {
    let probes = objects(report, "probes", "support report")?;
    let mut out = String::from(
        "probe,xi_sup_norm,p_full,p_full_cp_lo,p_full_cp_hi,p_aux,p_aux_cp_lo,p_aux_cp_hi,\
         bound_margin,pass_bound\n",
    );
    for p in probes {
        let ctx = "support probe";
        let label = p
            .get("label")
            .and_then(Value::as_str)
            .ok_or_else(|| CliError::Malformed(format!("{ctx}: key 'label' missing")))?;
        let pass = p
            .get("pass_bound")
            .and_then(Value::as_bool)
            .ok_or_else(|| CliError::Malformed(format!("{ctx}: key 'pass_bound' missing")))?;
        out.push_str(&format!(
            "{},{},{},{},{},{},{},{},{},{}\n",
            label,
            fmt_g17(num(p, "xi_sup_norm", ctx)?),
            fmt_g17(num(p, "p_full", ctx)?),
            fmt_g17(num(p, "p_full_cp_lo", ctx)?),
            fmt_g17(num(p, "p_full_cp_hi", ctx)?),
            fmt_g17(num(p, "p_aux", ctx)?),
            fmt_g17(num(p, "p_aux_cp_lo", ctx)?),
            fmt_g17(num(p, "p_aux_cp_hi", ctx)?),
            fmt_g17(num(p, "bound_margin", ctx)?),
            pass,
        ));
    }
    Ok(out)
}

/// Tabulates the drift-check entries.
fn drift_csv(report: &Value) -> Result<String, CliError> {
    let entries = objects(report, "entries", "drift report")?;
    let mut out = String::from("probe,t,v0,lhs,lhs_stderr,rhs,margin,diverged_paths,pass\n");
    for e in entries {
        let ctx = "drift entry";
        let probe = e
            .get("probe")
            .and_then(Value::as_u64)
            .ok_or_else(|| CliError::Malformed(format!("{ctx}: key 'probe' missing")))?;
        let diverged = e
            .get("diverged_paths")
            .and_then(Value::as_u64)
            .ok_or_else(|| CliError::Malformed(format!("{ctx}: key 'diverged_paths' missing")))?;
        let pass = e
            .get("pass")
            .and_then(Value::as_bool)
            .ok_or_else(|| CliError::Malformed(format!("{ctx}: key 'pass' missing")))?;
        out.push_str(&format!(
            "{},{},{},{},{},{},{},{},{}\n",
            probe,
            fmt_g17(num(e, "t", ctx)?),
            fmt_g17(num(e, "v0", ctx)?),
            fmt_g17(num(e, "lhs", ctx)?),
            fmt_g17(num(e, "lhs_stderr", ctx)?),
            fmt_g17(num(e, "rhs", ctx)?),
            fmt_g17(num(e, "margin", ctx)?),
            diverged,
            pass,
        ));
    }
    Ok(out)
}

/// Emits the per-pair decay CSVs of a coupling-condition report.
fn emit_c1(
    report: &Value,
    stem: &str,
    dir: &Path,
    written: &mut Vec<PathBuf>,
) -> Result<(), CliError> {
    let pairs = objects(report, "pairs", "coupling-condition report")?;
    for (i, pair) in pairs.iter().enumerate() {
        let decay = pair.get("decay").ok_or_else(|| {
            CliError::Malformed("coupling-condition pair: key 'decay' missing".into())
        })?;
        let path = dir.join(format!("{stem}_pair{i}_decay.csv"));
        fs::write(&path, decay_csv(decay)?)?;
        written.push(path);
    }
    Ok(())
}

/// Executes `plotdata <report.json>`; returns the process exit code.
pub fn plotdata_command(report_path: &Path) -> i32 {
    match emit(report_path) {
        Ok(written) => {
            for path in &written {
                println!("wrote {}", path.display());
            }
            0
        }
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}

fn emit(report_path: &Path) -> Result<Vec<PathBuf>, CliError> {
    let text = fs::read_to_string(report_path)?;
    let value: Value =
        serde_json::from_str(&text).map_err(|e| CliError::Malformed(format!("not JSON: {e}")))?;
    let dir = report_path.parent().unwrap_or_else(|| Path::new("."));
    let stem = report_path
        .file_stem()
        .and_then(|s| s.to_str())
        .unwrap_or("report");
    let mut written = Vec::new();

    if value.get("verdict").is_some() {
        // Full ergodicity report: emit every plottable section, warn on the
        // absent ones.
        match value.get("c1") {
            Some(section) if !section.is_null() => emit_c1(section, stem, dir, &mut written)?,
            _ => eprintln!("warning: section 'c1' absent from report"),
        }
        match value.get("wasserstein") {
            Some(section) if !section.is_null() => {
                let path = dir.join(format!("{stem}_wasserstein.csv"));
                fs::write(&path, wasserstein_csv(section)?)?;
                written.push(path);
            }
            _ => eprintln!("warning: section 'wasserstein' absent from report"),
        }
        match value.get("lyapunov") {
            Some(section) if !section.is_null() => {
                let path = dir.join(format!("{stem}_drift.csv"));
                fs::write(&path, drift_csv(section)?)?;
                written.push(path);
            }
            _ => eprintln!("warning: section 'lyapunov' absent from report"),
        }
        return Ok(written);
    }
    if value.get("pairs").is_some() && value.get("lambda0").is_some() {
        emit_c1(&value, stem, dir, &mut written)?;
        return Ok(written);
    }
    if value.get("xi_curve").is_some() && value.get("eta_curve").is_some() {
        let path = dir.join(format!("{stem}_wasserstein.csv"));
        fs::write(&path, wasserstein_csv(&value)?)?;
        written.push(path);
        return Ok(written);
    }
    if value.get("mean_sq").is_some() && value.get("theoretical_prefactor").is_some() {
        let path = dir.join(format!("{stem}_decay.csv"));
        fs::write(&path, decay_csv(&value)?)?;
        written.push(path);
        return Ok(written);
    }
    if value.get("probes").is_some() && value.get("no_jump_fraction").is_some() {
        let path = dir.join(format!("{stem}_support.csv"));
        fs::write(&path, support_csv(&value)?)?;
        written.push(path);
        return Ok(written);
    }
    Err(CliError::Malformed(
        "unrecognized report: expected an ergodicity report, a decay fit, a \
         coupling-condition report, a Wasserstein section, or a support report"
            .into(),
    ))
}
