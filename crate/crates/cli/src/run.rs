//! Experiment execution: dispatches a validated plan, writes artifacts and
//! the run manifest, and maps failures onto the documented exit codes.

use crate::config::{
    parse_config, sniff_output_directory, ConfigError, CouplingBlock, Experiment, LambdaChoice,
    Plan,
};
use ergo_sfde_core::coupling::{condition_c1_report, estimate_decay, select_lambda};
use ergo_sfde_core::ergodicity::{
    condition_c2_report, ergodicity_report, support_check, wasserstein_section, DriftReport,
    ErgodicityConfig, SupportReport, Verdict,
};
use ergo_sfde_core::model::ModelSpec;
use ergo_sfde_core::segment::Segment;
use ergo_sfde_core::sim::{simulate, SimConfig};
use ergo_sfde_core::transport::curve_to_csv;
use ergo_sfde_core::{fmt_g17, Error as CoreError};
use serde::Serialize;
use sha2::{Digest, Sha256};
use std::fs;
use std::path::Path;
use std::time::Instant;

/// Any failure of the `run` command, tagged with its exit-code class.
#[derive(Debug, thiserror::Error)]
pub enum CliError {
    /// Schema or syntax problem in the config file (exit 2).
    #[error("config error: {0}")]
    Config(#[from] ConfigError),
    /// Failure surfaced by the engine (exit 3 for divergence, 2 for
    /// configuration-class errors, 1 otherwise).
    #[error("{0}")]
    Core(#[from] CoreError),
    /// Filesystem problem (exit 1).
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
    /// Malformed input handed to `plotdata` (exit 2).
    #[error("{0}")]
    Malformed(String),
    /// Internal serialization failure (exit 1).
    #[error("internal error: {0}")]
    Internal(String),
}

impl CliError {
    /// The process exit code this failure maps to.
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Config(_) | CliError::Malformed(_) => 2,
            CliError::Core(e) => match e {
                CoreError::Divergence { .. } => 3,
                CoreError::InvalidConfig(_)
                | CoreError::InvalidModel(_)
                | CoreError::DimensionMismatch(_) => 2,
                _ => 1,
            },
            CliError::Io(_) | CliError::Internal(_) => 1,
        }
    }

    /// The manifest outcome label of this failure.
    fn outcome(&self) -> &'static str {
        match self {
            CliError::Config(_) | CliError::Malformed(_) => "schema_error",
            CliError::Core(CoreError::Divergence { .. }) => "divergence",
            CliError::Core(CoreError::InvalidConfig(_))
            | CliError::Core(CoreError::InvalidModel(_))
            | CliError::Core(CoreError::DimensionMismatch(_)) => "schema_error",
            _ => "error",
        }
    }
}

/// Versions recorded in every manifest.
#[derive(Serialize)]
struct Versions {
    #[serde(rename = "ergo-sfde")]
    cli: &'static str,
    #[serde(rename = "ergo-sfde-core")]
    core: &'static str,
}

impl Versions {
    fn current() -> Self {
        Self {
            cli: env!("CARGO_PKG_VERSION"),
            core: ergo_sfde_core::VERSION,
        }
    }
}

/// Run manifest: enough to reproduce and audit the run. This is the one
/// artifact that is not byte-identical across reruns (it carries wall time).
#[derive(Serialize)]
struct Manifest<'a> {
    command: &'a str,
    kind: &'a str,
    config_digest: &'a str,
    master_seed: Option<u64>,
    versions: Versions,
    wall_time_seconds: f64,
    outcome: &'a str,
    exit_code: i32,
}

fn write_manifest(dir: &Path, manifest: &Manifest<'_>) -> Result<(), CliError> {
    fs::create_dir_all(dir)?;
    let mut text = serde_json::to_string_pretty(manifest)
        .map_err(|e| CliError::Internal(e.to_string()))?;
    text.push('\n');
    fs::write(dir.join("manifest.json"), text)?;
    Ok(())
}

/// Artifact writer honoring the `[output] formats` selection.
struct Artifacts<'a> {
    dir: &'a Path,
    csv: bool,
    json: bool,
}

impl Artifacts<'_> {
    fn write_csv(&self, name: &str, text: &str) -> Result<(), CliError> {
        if self.csv {
            fs::write(self.dir.join(name), text)?;
        }
        Ok(())
    }

    fn write_json<T: Serialize>(&self, name: &str, value: &T) -> Result<(), CliError> {
        if self.json {
            let mut text = serde_json::to_string_pretty(value)
                .map_err(|e| CliError::Internal(e.to_string()))?;
            text.push('\n');
            fs::write(self.dir.join(name), text)?;
        }
        Ok(())
    }
}

/// Executes `run <config>`: parse, dispatch, persist, manifest. Returns the
/// process exit code; the manifest is written on every path where the output
/// directory is known.
pub fn run_command(config_path: &Path) -> i32 {
    let started = Instant::now();
    let bytes = match fs::read(config_path) {
        Ok(b) => b,
        Err(e) => {
            eprintln!("error: cannot read {}: {e}", config_path.display());
            return 1;
        }
    };
    let digest = hex::encode(Sha256::digest(&bytes));
    let text = match String::from_utf8(bytes) {
        Ok(t) => t,
        Err(_) => {
            eprintln!("config error: {} is not UTF-8 text", config_path.display());
            return 2;
        }
    };

    let plan = match parse_config(&text) {
        Ok(plan) => plan,
        Err(e) => {
            eprintln!("config error: {e}");
            // Best effort: the failure manifest still lands in the output
            // directory when one can be recovered from the raw text.
            if let Some(dir) = sniff_output_directory(&text) {
                let manifest = Manifest {
                    command: "run",
                    kind: "unknown",
                    config_digest: &digest,
                    master_seed: None,
                    versions: Versions::current(),
                    wall_time_seconds: started.elapsed().as_secs_f64(),
                    outcome: "schema_error",
                    exit_code: 2,
                };
                let _ = write_manifest(&dir, &manifest);
            }
            return 2;
        }
    };

    let kind = plan.experiment.kind_label();
    let dir = plan.output.directory.clone();
    if let Err(e) = fs::create_dir_all(&dir) {
        eprintln!("error: cannot create output directory {}: {e}", dir.display());
        return 1;
    }

    let (outcome, exit_code) = match dispatch(&plan, &digest) {
        Ok((outcome, summary)) => {
            println!("{kind}: {summary}; artifacts in {}", dir.display());
            (outcome, 0)
        }
        Err(e) => {
            eprintln!("error: {e}");
            if let CliError::Core(CoreError::Divergence { time }) = &e {
                eprintln!(
                    "divergence diagnostics: model {}, master_seed {}, first non-finite state \
                     at t = {time}; lower dt or shorten the horizon",
                    plan.model.descriptor().kind,
                    plan.sim.master_seed,
                );
            }
            (e.outcome().to_string(), e.exit_code())
        }
    };

    let manifest = Manifest {
        command: "run",
        kind,
        config_digest: &digest,
        master_seed: Some(plan.sim.master_seed),
        versions: Versions::current(),
        wall_time_seconds: started.elapsed().as_secs_f64(),
        outcome: &outcome,
        exit_code,
    };
    if let Err(e) = write_manifest(&dir, &manifest) {
        eprintln!("error: cannot write manifest: {e}");
        return 1;
    }
    exit_code
}

/// Executes `validate <config>`: full parse and schema check, no artifacts.
pub fn validate_command(config_path: &Path) -> i32 {
    let text = match fs::read_to_string(config_path) {
        Ok(t) => t,
        Err(e) => {
            eprintln!("error: cannot read {}: {e}", config_path.display());
            return 1;
        }
    };
    match parse_config(&text) {
        Ok(plan) => {
            let d = plan.model.descriptor();
            println!("ok: model {} (dim {}, tau {})", d.kind, d.n, fmt_g17(d.tau));
            println!(
                "ok: sim dt {} horizon {} master_seed {} n_paths {}",
                fmt_g17(plan.sim.dt),
                fmt_g17(plan.sim.horizon),
                plan.sim.master_seed,
                plan.n_paths
            );
            println!("ok: experiment {}", plan.experiment.kind_label());
            println!("ok: output {}", plan.output.directory.display());
            0
        }
        Err(e) => {
            eprintln!("config error: {e}");
            2
        }
    }
}

/// Scales every value of a segment, preserving grid and jump structure.
fn scale_segment(seg: &Segment, factor: f64) -> Result<Segment, CliError> {
    let rows: Vec<Vec<f64>> = seg
        .rows()
        .map(|r| r.iter().map(|v| v * factor).collect())
        .collect();
    let pre = seg
        .pre_values()
        .iter()
        .map(|(&i, v)| (i, v.iter().map(|x| x * factor).collect()))
        .collect();
    Segment::new(seg.tau(), seg.grid().to_vec(), rows, pre).map_err(CliError::from)
}

/// Summary JSON of a `simulate` run.
#[derive(Serialize)]
struct SimulateSummary {
    kind: &'static str,
    n_paths: usize,
    dt: f64,
    horizon: f64,
    master_seed: u64,
    /// Terminal state of each path.
    terminal: Vec<Vec<f64>>,
}

fn run_simulate(
    plan: &Plan,
    arts: &Artifacts<'_>,
    xi: &Segment,
) -> Result<(String, String), CliError> {
    let mut terminal = Vec::with_capacity(plan.n_paths);
    for i in 0..plan.n_paths {
        let cfg = SimConfig {
            path_index: plan.sim.path_index + i as u64,
            ..plan.sim
        };
        let traj = simulate(&plan.model, xi, &cfg)?;
        arts.write_csv(&format!("trajectory_{i:04}.csv"), &traj.to_csv())?;
        let last = traj.times().len() - 1;
        terminal.push(traj.state_at(last).to_vec());
    }
    arts.write_json(
        "simulate.json",
        &SimulateSummary {
            kind: "simulate",
            n_paths: plan.n_paths,
            dt: plan.sim.dt,
            horizon: plan.sim.horizon,
            master_seed: plan.sim.master_seed,
            terminal,
        },
    )?;
    Ok(("ok".into(), format!("{} trajectories", plan.n_paths)))
}

fn resolve_lambda(
    model: &ModelSpec,
    xi: &Segment,
    eta: &Segment,
    coupling: &CouplingBlock,
    sim: &SimConfig,
) -> Result<f64, CliError> {
    match coupling.lambda {
        LambdaChoice::Fixed(l) => Ok(l),
        LambdaChoice::Auto => Ok(select_lambda(
            model,
            xi,
            eta,
            coupling.alpha,
            sim,
            coupling.lambda_max,
        )?),
    }
}

/// CSV table of the support probes (probabilities and certificates).
fn support_csv(report: &SupportReport) -> String {
    let mut out = String::from(
        "probe,xi_sup_norm,p_full,p_full_cp_lo,p_full_cp_hi,p_aux,p_aux_cp_lo,p_aux_cp_hi,\
         bound_margin,pass_bound\n",
    );
    for p in &report.probes {
        out.push_str(&format!(
            "{},{},{},{},{},{},{},{},{},{}\n",
            p.label,
            fmt_g17(p.xi_sup_norm),
            fmt_g17(p.p_full),
            fmt_g17(p.p_full_cp_lo),
            fmt_g17(p.p_full_cp_hi),
            fmt_g17(p.p_aux),
            fmt_g17(p.p_aux_cp_lo),
            fmt_g17(p.p_aux_cp_hi),
            fmt_g17(p.bound_margin),
            p.pass_bound,
        ));
    }
    out
}

/// CSV table of the drift-check entries.
fn drift_csv(report: &DriftReport) -> String {
    let mut out = String::from("probe,t,v0,lhs,lhs_stderr,rhs,margin,diverged_paths,pass\n");
    for e in &report.entries {
        out.push_str(&format!(
            "{},{},{},{},{},{},{},{},{}\n",
            e.probe,
            fmt_g17(e.t),
            fmt_g17(e.v0),
            fmt_g17(e.lhs),
            fmt_g17(e.lhs_stderr),
            fmt_g17(e.rhs),
            fmt_g17(e.margin),
            e.diverged_paths,
            e.pass,
        ));
    }
    out
}

fn verdict_label(v: Verdict) -> &'static str {
    match v {
        Verdict::Pass => "pass",
        Verdict::Fail => "fail",
        Verdict::Inconclusive => "inconclusive",
    }
}

/// Runs the planned experiment. Returns `(manifest outcome, printed
/// summary)`; the outcome is `"ok"` except for the combined report, which
/// records its verdict.
fn dispatch(plan: &Plan, digest: &str) -> Result<(String, String), CliError> {
    let arts = Artifacts {
        dir: &plan.output.directory,
        csv: plan.output.csv,
        json: plan.output.json,
    };
    match &plan.experiment {
        Experiment::Simulate { xi } => run_simulate(plan, &arts, xi),
        Experiment::Decay { xi, eta, times } => {
            let lambda = resolve_lambda(&plan.model, xi, eta, &plan.coupling, &plan.sim)?;
            let fit = estimate_decay(
                &plan.model,
                xi,
                eta,
                lambda,
                plan.coupling.alpha,
                times,
                plan.n_paths,
                &plan.sim,
            )?;
            arts.write_json("decay.json", &fit)?;
            arts.write_csv("decay.csv", &fit.to_csv())?;
            Ok((
                "ok".into(),
                format!(
                    "lambda {}, fitted slope {}",
                    fmt_g17(lambda),
                    fmt_g17(fit.fitted_slope)
                ),
            ))
        }
        Experiment::C1 {
            xi,
            eta,
            times,
            extra_pairs,
        } => {
            let mut pairs = vec![(xi.clone(), eta.clone())];
            for k in 1..=*extra_pairs {
                let f = 0.5f64.powi(k as i32);
                pairs.push((scale_segment(xi, f)?, scale_segment(eta, f)?));
            }
            let report = condition_c1_report(
                &plan.model,
                &pairs,
                plan.coupling.alpha,
                times,
                &plan.sim,
                plan.n_paths,
            )?;
            arts.write_json("c1.json", &report)?;
            for (i, p) in report.pairs.iter().enumerate() {
                arts.write_csv(&format!("c1_pair{i}_decay.csv"), &p.decay.to_csv())?;
            }
            Ok((
                "ok".into(),
                format!("{} pairs, pass = {}", report.pairs.len(), report.pass),
            ))
        }
        Experiment::C2 {
            v,
            m_level,
            epsilon,
            t0,
        } => {
            let report = condition_c2_report(
                &plan.model,
                *v,
                *m_level,
                *epsilon,
                *t0,
                plan.n_paths,
                &plan.sim,
            )?;
            arts.write_json("c2.json", &report)?;
            Ok((
                "ok".into(),
                format!(
                    "{}, pass = {}, inconclusive = {}",
                    report.case_label, report.pass, report.inconclusive
                ),
            ))
        }
        Experiment::Support {
            radius,
            delta_ball,
            t_obs,
        } => {
            let report = support_check(
                &plan.model,
                *radius,
                *delta_ball,
                *t_obs,
                plan.n_paths,
                &plan.sim,
            )?;
            arts.write_json("support.json", &report)?;
            arts.write_csv("support.csv", &support_csv(&report))?;
            Ok((
                "ok".into(),
                format!("{} probes, pass = {}", report.probes.len(), report.pass),
            ))
        }
        Experiment::Wasserstein {
            xi,
            eta,
            policy,
            budget,
        } => {
            let cfg = ErgodicityConfig {
                alpha: plan.coupling.alpha,
                xi: xi.clone(),
                eta: eta.clone(),
                policy: policy.clone(),
                m_level: 1.0,
                epsilon: 2.4,
                t0: 2.5,
                decay_times: Vec::new(),
                curve_times: budget.curve_times.clone(),
                drift_times: Vec::new(),
                n_paths_c1: plan.n_paths,
                n_paths_c2: 0,
                n_outer: 0,
                n_inner: 0,
                n_curve_samples: budget.curve_samples,
                n_reference: budget.n_reference,
                reference_burn_in: budget.reference_burn_in,
                reference_spacing: budget.reference_spacing,
                sim: plan.sim,
            };
            let section = wasserstein_section(&plan.model, &cfg)?;
            arts.write_json("wasserstein.json", &section)?;
            arts.write_csv("wasserstein_xi.csv", &curve_to_csv(&section.xi_curve))?;
            arts.write_csv("wasserstein_eta.csv", &curve_to_csv(&section.eta_curve))?;
            Ok((
                "ok".into(),
                format!(
                    "slope {} (z = {}), pass = {}",
                    fmt_g17(section.xi_fit.slope),
                    fmt_g17(section.xi_fit.z),
                    section.pass
                ),
            ))
        }
        Experiment::Report {
            xi,
            eta,
            policy,
            m_level,
            epsilon,
            t0,
            decay_times,
            drift_times,
            budget,
            n_paths_c2,
            n_outer,
            n_inner,
        } => {
            let cfg = ErgodicityConfig {
                alpha: plan.coupling.alpha,
                xi: xi.clone(),
                eta: eta.clone(),
                policy: policy.clone(),
                m_level: *m_level,
                epsilon: *epsilon,
                t0: *t0,
                decay_times: decay_times.clone(),
                curve_times: budget.curve_times.clone(),
                drift_times: drift_times.clone(),
                n_paths_c1: plan.n_paths,
                n_paths_c2: *n_paths_c2,
                n_outer: *n_outer,
                n_inner: *n_inner,
                n_curve_samples: budget.curve_samples,
                n_reference: budget.n_reference,
                reference_burn_in: budget.reference_burn_in,
                reference_spacing: budget.reference_spacing,
                sim: plan.sim,
            };
            let report = ergodicity_report(&plan.model, &cfg, digest)?;
            arts.write_json("report.json", &report)?;
            if let Some(c1) = &report.c1 {
                for (i, p) in c1.pairs.iter().enumerate() {
                    arts.write_csv(&format!("report_pair{i}_decay.csv"), &p.decay.to_csv())?;
                }
            }
            if let Some(w) = &report.wasserstein {
                arts.write_csv("report_wasserstein_xi.csv", &curve_to_csv(&w.xi_curve))?;
                arts.write_csv("report_wasserstein_eta.csv", &curve_to_csv(&w.eta_curve))?;
            }
            if let Some(d) = &report.lyapunov {
                arts.write_csv("report_drift.csv", &drift_csv(d))?;
            }
            let mut summary = format!("verdict = {}", verdict_label(report.verdict));
            if !report.notes.is_empty() {
                summary.push_str(&format!(" ({})", report.notes.join("; ")));
            }
            Ok((verdict_label(report.verdict).into(), summary))
        }
    }
}
