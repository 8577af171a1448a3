//! Line-oriented experiment configuration.
//!
//! The grammar is `[section]` headers over `key = value` lines; `#` starts a
//! comment, blank lines are ignored. Sections are `[model]`, `[sim]`,
//! `[coupling]` (optional), `[experiment]`, and `[output]`. Every key is
//! schema-checked before any computation runs: unknown sections, unknown
//! keys, duplicates, and keys that do not apply to the chosen experiment
//! kind are all rejected with their line number. See the README for the full
//! key tables.

use ergo_sfde_core::ergodicity::{LyapunovV, RateFunction, RatePolicy};
use ergo_sfde_core::model::{make_builtin, BuiltinKind, BuiltinParams, MarkLaw, ModelSpec};
use ergo_sfde_core::segment::Segment;
use ergo_sfde_core::sim::SimConfig;
use std::collections::BTreeMap;
use std::path::PathBuf;
use thiserror::Error;

/// Schema or syntax failure. Every variant maps to exit code 2.
#[derive(Debug, Error)]
pub enum ConfigError {
    /// A problem tied to one config line.
    #[error("line {line}: {msg}")]
    Line { line: usize, msg: String },
    /// A problem spanning the whole file (missing section, bad combination).
    #[error("{0}")]
    Schema(String),
}

fn line_err(line: usize, msg: impl Into<String>) -> ConfigError {
    ConfigError::Line {
        line,
        msg: msg.into(),
    }
}

/// Coupling strength requested in the `[coupling]` section.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum LambdaChoice {
    /// Run the doubling search before the experiment.
    Auto,
    /// Use this value directly.
    Fixed(f64),
}

/// Parsed `[coupling]` block (defaults apply when the section is absent).
#[derive(Debug, Clone, Copy)]
pub struct CouplingBlock {
    /// Target decay rate `alpha`.
    pub alpha: f64,
    /// Coupling strength, fixed or searched.
    pub lambda: LambdaChoice,
    /// Cap of the doubling search.
    pub lambda_max: f64,
}

impl Default for CouplingBlock {
    fn default() -> Self {
        Self {
            alpha: 0.5,
            lambda: LambdaChoice::Auto,
            lambda_max: 1024.0,
        }
    }
}

/// Parsed `[output]` block.
#[derive(Debug, Clone)]
pub struct OutputBlock {
    /// Directory all artifacts are written into (created if missing).
    pub directory: PathBuf,
    /// Whether CSV artifacts are written.
    pub csv: bool,
    /// Whether JSON artifacts are written (the manifest is always written).
    pub json: bool,
}

/// Reference-ensemble and curve budgets of the Wasserstein section.
#[derive(Debug, Clone)]
pub struct CurveBudget {
    /// Observation times of the Wasserstein curves.
    pub curve_times: Vec<f64>,
    /// Segments per side of each Wasserstein estimate.
    pub curve_samples: usize,
    /// Size of the long-run reference ensemble.
    pub n_reference: usize,
    /// Burn-in before reference sampling starts.
    pub reference_burn_in: f64,
    /// Spacing between reference samples.
    pub reference_spacing: f64,
}

/// The experiment to run, with its kind-specific inputs already validated.
#[derive(Debug, Clone)]
pub enum Experiment {
    /// `n_paths` independent trajectories from one initial segment.
    Simulate { xi: Segment },
    /// Gap-decay fit of one coupled pair.
    Decay {
        xi: Segment,
        eta: Segment,
        times: Vec<f64>,
    },
    /// Coupling-condition certificate over one or more pairs.
    C1 {
        xi: Segment,
        eta: Segment,
        times: Vec<f64>,
        /// Extra pairs with dyadically shrunk initial data.
        extra_pairs: usize,
    },
    /// Reachability-condition certificate.
    C2 {
        v: LyapunovV,
        m_level: f64,
        epsilon: f64,
        t0: f64,
    },
    /// Segment-support lower bound at one observation time.
    Support {
        radius: f64,
        delta_ball: f64,
        t_obs: f64,
    },
    /// Wasserstein curves toward a long-run reference ensemble.
    Wasserstein {
        xi: Segment,
        eta: Segment,
        policy: RatePolicy,
        budget: CurveBudget,
    },
    /// The combined ergodicity report.
    Report {
        xi: Segment,
        eta: Segment,
        policy: RatePolicy,
        m_level: f64,
        epsilon: f64,
        t0: f64,
        decay_times: Vec<f64>,
        drift_times: Vec<f64>,
        budget: CurveBudget,
        n_paths_c2: usize,
        n_outer: usize,
        n_inner: usize,
    },
}

impl Experiment {
    /// The config word naming this experiment (recorded in the manifest).
    pub fn kind_label(&self) -> &'static str {
        match self {
            Experiment::Simulate { .. } => "simulate",
            Experiment::Decay { .. } => "decay",
            Experiment::C1 { .. } => "c1",
            Experiment::C2 { .. } => "c2",
            Experiment::Support { .. } => "support",
            Experiment::Wasserstein { .. } => "wasserstein",
            Experiment::Report { .. } => "report",
        }
    }
}

/// Fully validated run plan: model, budgets, experiment, output policy.
#[derive(Clone)]
pub struct Plan {
    /// The built model.
    pub model: ModelSpec,
    /// Step, horizon, and stream addressing shared by the experiment.
    pub sim: SimConfig,
    /// Path budget of the experiment.
    pub n_paths: usize,
    /// Coupling parameters (defaults when the section was absent).
    pub coupling: CouplingBlock,
    /// The experiment to run.
    pub experiment: Experiment,
    /// Output directory and formats.
    pub output: OutputBlock,
}

/// One parsed section: key -> (line, raw value), with consumed-key tracking.
struct Section {
    title: &'static str,
    entries: BTreeMap<String, (usize, String)>,
}

impl Section {
    fn empty(title: &'static str) -> Self {
        Self {
            title,
            entries: BTreeMap::new(),
        }
    }

    fn take(&mut self, key: &str) -> Option<(usize, String)> {
        self.entries.remove(key)
    }

    fn opt_word(&mut self, key: &str) -> Option<(usize, String)> {
        self.take(key)
    }

    fn opt_f64(&mut self, key: &str) -> Result<Option<f64>, ConfigError> {
        match self.take(key) {
            None => Ok(None),
            Some((line, v)) => parse_f64(line, key, &v).map(Some),
        }
    }

    fn req_f64(&mut self, key: &str) -> Result<f64, ConfigError> {
        self.opt_f64(key)?
            .ok_or_else(|| missing(self.title, key))
    }

    fn opt_usize(&mut self, key: &str) -> Result<Option<usize>, ConfigError> {
        match self.take(key) {
            None => Ok(None),
            Some((line, v)) => v.parse::<usize>().map(Some).map_err(|_| {
                line_err(line, format!("key '{key}' expects a nonnegative integer, got '{v}'"))
            }),
        }
    }

    fn opt_u64(&mut self, key: &str) -> Result<Option<u64>, ConfigError> {
        match self.take(key) {
            None => Ok(None),
            Some((line, v)) => v.parse::<u64>().map(Some).map_err(|_| {
                line_err(line, format!("key '{key}' expects a nonnegative integer, got '{v}'"))
            }),
        }
    }

    fn opt_bool(&mut self, key: &str) -> Result<Option<bool>, ConfigError> {
        match self.take(key) {
            None => Ok(None),
            Some((line, v)) => match v.as_str() {
                "true" => Ok(Some(true)),
                "false" => Ok(Some(false)),
                _ => Err(line_err(
                    line,
                    format!("key '{key}' expects 'true' or 'false', got '{v}'"),
                )),
            },
        }
    }

    fn opt_times(&mut self, key: &str) -> Result<Option<Vec<f64>>, ConfigError> {
        match self.take(key) {
            None => Ok(None),
            Some((line, v)) => parse_f64_list(line, key, &v).map(Some),
        }
    }

    fn req_times(&mut self, key: &str) -> Result<Vec<f64>, ConfigError> {
        self.opt_times(key)?
            .ok_or_else(|| missing(self.title, key))
    }

    /// Rejects every key the chosen experiment kind did not consume.
    fn reject_leftovers(&self, kind: &str) -> Result<(), ConfigError> {
        if let Some((key, (line, _))) = self.entries.iter().next() {
            return Err(line_err(
                *line,
                format!("key '{key}' does not apply to experiment kind '{kind}'"),
            ));
        }
        Ok(())
    }
}

fn missing(section: &str, key: &str) -> ConfigError {
    ConfigError::Schema(format!("section [{section}] is missing required key '{key}'"))
}

fn parse_f64(line: usize, key: &str, v: &str) -> Result<f64, ConfigError> {
    let x: f64 = v
        .parse()
        .map_err(|_| line_err(line, format!("key '{key}' expects a number, got '{v}'")))?;
    if !x.is_finite() {
        return Err(line_err(line, format!("key '{key}' must be finite, got '{v}'")));
    }
    Ok(x)
}

fn parse_f64_list(line: usize, key: &str, v: &str) -> Result<Vec<f64>, ConfigError> {
    let toks: Vec<&str> = v
        .split(|c: char| c == ',' || c.is_whitespace())
        .filter(|t| !t.is_empty())
        .collect();
    if toks.is_empty() {
        return Err(line_err(line, format!("key '{key}' expects a list of numbers")));
    }
    toks.iter().map(|t| parse_f64(line, key, t)).collect()
}

fn parse_mark(line: usize, v: &str) -> Result<MarkLaw, ConfigError> {
    let toks: Vec<&str> = v.split_whitespace().collect();
    match toks.as_slice() {
        ["atom", x] => Ok(MarkLaw::Atom {
            value: parse_f64(line, "mark", x)?,
        }),
        ["normal", m, s] => Ok(MarkLaw::Normal {
            mean: parse_f64(line, "mark", m)?,
            sd: parse_f64(line, "mark", s)?,
        }),
        _ => Err(line_err(
            line,
            format!("key 'mark' expects 'atom <v>' or 'normal <mean> <sd>', got '{v}'"),
        )),
    }
}

/// Parses `const <v1> [v2 ...]` into the constant values of a segment spec.
fn parse_segment_values(line: usize, key: &str, v: &str) -> Result<Vec<f64>, ConfigError> {
    let toks: Vec<&str> = v.split_whitespace().collect();
    match toks.split_first() {
        Some((&"const", rest)) if !rest.is_empty() => {
            rest.iter().map(|t| parse_f64(line, key, t)).collect()
        }
        _ => Err(line_err(
            line,
            format!("key '{key}' expects 'const <v1> [v2 ...]', got '{v}'"),
        )),
    }
}

const SECTION_NAMES: [&str; 5] = ["model", "sim", "coupling", "experiment", "output"];

const MODEL_KEYS: [&str; 10] = [
    "kind", "a", "g1", "sigma0", "gamma0", "c_scale", "jump_rate", "mark", "tau",
    "allow_unstable",
];
const SIM_KEYS: [&str; 5] = ["dt", "horizon", "master_seed", "n_paths", "path_index"];
const COUPLING_KEYS: [&str; 3] = ["alpha", "lambda", "lambda_max"];
const EXPERIMENT_KEYS: [&str; 27] = [
    "kind",
    "times",
    "probes",
    "xi",
    "eta",
    "t_obs",
    "radius",
    "delta_ball",
    "rate_function",
    "lyapunov",
    "delta",
    "c1_const",
    "c2_const",
    "k_const",
    "m_level",
    "epsilon",
    "t0",
    "decay_times",
    "curve_times",
    "drift_times",
    "curve_samples",
    "n_reference",
    "reference_burn_in",
    "reference_spacing",
    "n_outer",
    "n_inner",
    "n_paths_c2",
];
const OUTPUT_KEYS: [&str; 2] = ["directory", "formats"];

fn allowed_keys(section: &str) -> &'static [&'static str] {
    match section {
        "model" => &MODEL_KEYS,
        "sim" => &SIM_KEYS,
        "coupling" => &COUPLING_KEYS,
        "experiment" => &EXPERIMENT_KEYS,
        "output" => &OUTPUT_KEYS,
        _ => &[],
    }
}

/// Splits the raw text into validated per-section key/value tables.
fn parse_sections(text: &str) -> Result<BTreeMap<String, Section>, ConfigError> {
    let mut sections: BTreeMap<String, Section> = BTreeMap::new();
    let mut current: Option<String> = None;
    for (idx, raw_line) in text.lines().enumerate() {
        let line_no = idx + 1;
        let line = match raw_line.find('#') {
            Some(pos) => &raw_line[..pos],
            None => raw_line,
        }
        .trim();
        if line.is_empty() {
            continue;
        }
        if let Some(name) = line.strip_prefix('[') {
            let name = name
                .strip_suffix(']')
                .ok_or_else(|| line_err(line_no, format!("malformed section header '{line}'")))?
                .trim();
            if !SECTION_NAMES.contains(&name) {
                return Err(line_err(line_no, format!("unknown section [{name}]")));
            }
            if sections.contains_key(name) {
                return Err(line_err(line_no, format!("duplicate section [{name}]")));
            }
            let title = SECTION_NAMES.iter().find(|s| **s == name).unwrap();
            sections.insert(name.to_string(), Section::empty(title));
            current = Some(name.to_string());
            continue;
        }
        let Some((key, value)) = line.split_once('=') else {
            return Err(line_err(
                line_no,
                format!("expected 'key = value' or '[section]', got '{line}'"),
            ));
        };
        let key = key.trim();
        let value = value.trim();
        let Some(section_name) = &current else {
            return Err(line_err(
                line_no,
                format!("key '{key}' appears before any [section] header"),
            ));
        };
        if !allowed_keys(section_name).contains(&key) {
            return Err(line_err(
                line_no,
                format!("unknown key '{key}' in [{section_name}]"),
            ));
        }
        let section = sections.get_mut(section_name).unwrap();
        if section.entries.contains_key(key) {
            return Err(line_err(
                line_no,
                format!("duplicate key '{key}' in [{section_name}]"),
            ));
        }
        section
            .entries
            .insert(key.to_string(), (line_no, value.to_string()));
    }
    Ok(sections)
}

fn core_schema(e: ergo_sfde_core::Error) -> ConfigError {
    ConfigError::Schema(e.to_string())
}

fn extract_model(sec: &mut Section) -> Result<ModelSpec, ConfigError> {
    let (kind_line, kind_word) = sec
        .opt_word("kind")
        .ok_or_else(|| missing("model", "kind"))?;
    let kind = match kind_word.as_str() {
        "ou_jump" => BuiltinKind::OuJump,
        "linear_delay" => BuiltinKind::LinearDelay,
        other => {
            return Err(line_err(
                kind_line,
                format!("model kind must be 'ou_jump' or 'linear_delay', got '{other}'"),
            ))
        }
    };
    let mut p = BuiltinParams::default();
    if let Some(x) = sec.opt_f64("a")? {
        p.a = x;
    }
    if let Some(x) = sec.opt_f64("g1")? {
        p.g1 = x;
    }
    if let Some(x) = sec.opt_f64("sigma0")? {
        p.sigma0 = x;
    }
    if let Some(x) = sec.opt_f64("gamma0")? {
        p.gamma0 = x;
    }
    if let Some(x) = sec.opt_f64("c_scale")? {
        p.c_scale = x;
    }
    if let Some(x) = sec.opt_f64("jump_rate")? {
        p.jump_rate = x;
    }
    if let Some((line, v)) = sec.take("mark") {
        p.mark = parse_mark(line, &v)?;
    }
    if let Some(x) = sec.opt_f64("tau")? {
        p.tau = x;
    }
    if let Some(b) = sec.opt_bool("allow_unstable")? {
        p.allow_unstable = b;
    }
    make_builtin(kind, &p).map_err(core_schema)
}

fn extract_sim(sec: &mut Section) -> Result<(SimConfig, usize), ConfigError> {
    let dt = sec.req_f64("dt")?;
    let horizon = sec.req_f64("horizon")?;
    let master_seed = sec
        .opt_u64("master_seed")?
        .ok_or_else(|| missing("sim", "master_seed"))?;
    let n_paths = sec
        .opt_usize("n_paths")?
        .ok_or_else(|| missing("sim", "n_paths"))?;
    if n_paths == 0 {
        return Err(ConfigError::Schema("sim key 'n_paths' must be at least 1".into()));
    }
    let path_index = sec.opt_u64("path_index")?.unwrap_or(0);
    Ok((
        SimConfig {
            dt,
            horizon,
            master_seed,
            path_index,
        },
        n_paths,
    ))
}

fn extract_coupling(sec: &mut Section) -> Result<CouplingBlock, ConfigError> {
    let mut block = CouplingBlock::default();
    if let Some(x) = sec.opt_f64("alpha")? {
        block.alpha = x;
    }
    if let Some((line, v)) = sec.take("lambda") {
        block.lambda = if v == "auto" {
            LambdaChoice::Auto
        } else {
            LambdaChoice::Fixed(parse_f64(line, "lambda", &v)?)
        };
    }
    if let Some(x) = sec.opt_f64("lambda_max")? {
        block.lambda_max = x;
    }
    Ok(block)
}

fn extract_output(sec: &mut Section) -> Result<OutputBlock, ConfigError> {
    let (_, directory) = sec
        .opt_word("directory")
        .ok_or_else(|| missing("output", "directory"))?;
    let (mut csv, mut json) = (true, true);
    if let Some((line, v)) = sec.take("formats") {
        csv = false;
        json = false;
        for tok in v.split(|c: char| c == ',' || c.is_whitespace()) {
            match tok {
                "" => {}
                "csv" => csv = true,
                "json" => json = true,
                other => {
                    return Err(line_err(
                        line,
                        format!("key 'formats' accepts 'csv' and 'json', got '{other}'"),
                    ))
                }
            }
        }
        if !csv && !json {
            return Err(line_err(line, "key 'formats' selects no format"));
        }
    }
    Ok(OutputBlock {
        directory: PathBuf::from(directory),
        csv,
        json,
    })
}

/// Builds a constant segment from a `const ...` spec, checking the model
/// dimension.
fn extract_segment(
    sec: &mut Section,
    key: &str,
    default_value: f64,
    model: &ModelSpec,
) -> Result<Segment, ConfigError> {
    let values = match sec.take(key) {
        Some((line, v)) => {
            let values = parse_segment_values(line, key, &v)?;
            if values.len() != model.dim() {
                return Err(line_err(
                    line,
                    format!(
                        "key '{key}' has {} components but the model has dimension {}",
                        values.len(),
                        model.dim()
                    ),
                ));
            }
            values
        }
        None => vec![default_value; model.dim()],
    };
    Segment::constant(model.tau(), &values).map_err(core_schema)
}

fn extract_policy(sec: &mut Section) -> Result<RatePolicy, ConfigError> {
    let f = match sec.opt_word("rate_function") {
        None => RateFunction::Identity,
        Some((line, v)) => match v.as_str() {
            "identity" => RateFunction::Identity,
            "sqrt" => RateFunction::Sqrt,
            other => {
                return Err(line_err(
                    line,
                    format!("key 'rate_function' accepts 'identity' or 'sqrt', got '{other}'"),
                ))
            }
        },
    };
    let v = extract_lyapunov(sec)?;
    let delta = sec.opt_f64("delta")?.unwrap_or(0.5);
    let c1 = sec.opt_f64("c1_const")?.unwrap_or(1.0);
    let c2 = sec.opt_f64("c2_const")?.unwrap_or(1.0);
    let k = sec.opt_f64("k_const")?.unwrap_or(1.5);
    RatePolicy::new(f, v, delta, c1, c2, k).map_err(core_schema)
}

fn extract_lyapunov(sec: &mut Section) -> Result<LyapunovV, ConfigError> {
    match sec.opt_word("lyapunov") {
        None => Ok(LyapunovV::SquareAtZero),
        Some((line, v)) => match v.as_str() {
            "square_at_zero" => Ok(LyapunovV::SquareAtZero),
            "square_sup_norm" => Ok(LyapunovV::SquareSupNorm),
            other => Err(line_err(
                line,
                format!(
                    "key 'lyapunov' accepts 'square_at_zero' or 'square_sup_norm', got '{other}'"
                ),
            )),
        },
    }
}

fn extract_curve_budget(sec: &mut Section, require_times: bool) -> Result<CurveBudget, ConfigError> {
    let curve_times = if require_times {
        sec.req_times("curve_times")?
    } else {
        sec.opt_times("curve_times")?
            .unwrap_or_else(|| vec![1.0, 1.75, 2.5, 3.25, 4.0])
    };
    Ok(CurveBudget {
        curve_times,
        curve_samples: sec.opt_usize("curve_samples")?.unwrap_or(96),
        n_reference: sec.opt_usize("n_reference")?.unwrap_or(64),
        reference_burn_in: sec.opt_f64("reference_burn_in")?.unwrap_or(8.0),
        reference_spacing: sec.opt_f64("reference_spacing")?.unwrap_or(2.0),
    })
}

fn extract_experiment(sec: &mut Section, model: &ModelSpec) -> Result<Experiment, ConfigError> {
    let (kind_line, kind) = sec
        .opt_word("kind")
        .ok_or_else(|| missing("experiment", "kind"))?;
    let experiment = match kind.as_str() {
        "simulate" => Experiment::Simulate {
            xi: extract_segment(sec, "xi", 1.0, model)?,
        },
        "decay" => Experiment::Decay {
            xi: extract_segment(sec, "xi", 1.0, model)?,
            eta: extract_segment(sec, "eta", 0.0, model)?,
            times: sec.req_times("times")?,
        },
        "c1" => Experiment::C1 {
            xi: extract_segment(sec, "xi", 1.0, model)?,
            eta: extract_segment(sec, "eta", 0.0, model)?,
            times: sec.req_times("times")?,
            extra_pairs: sec.opt_usize("probes")?.unwrap_or(0),
        },
        "c2" => Experiment::C2 {
            v: extract_lyapunov(sec)?,
            m_level: sec.opt_f64("m_level")?.unwrap_or(1.0),
            epsilon: sec.opt_f64("epsilon")?.unwrap_or(2.4),
            t0: sec.opt_f64("t0")?.unwrap_or(2.5),
        },
        "support" => Experiment::Support {
            radius: sec.req_f64("radius")?,
            delta_ball: sec.req_f64("delta_ball")?,
            t_obs: sec.req_f64("t_obs")?,
        },
        "wasserstein" => Experiment::Wasserstein {
            xi: extract_segment(sec, "xi", 1.0, model)?,
            eta: extract_segment(sec, "eta", 0.0, model)?,
            policy: extract_policy(sec)?,
            budget: extract_curve_budget(sec, true)?,
        },
        "report" => Experiment::Report {
            xi: extract_segment(sec, "xi", 1.0, model)?,
            eta: extract_segment(sec, "eta", 0.0, model)?,
            policy: extract_policy(sec)?,
            m_level: sec.opt_f64("m_level")?.unwrap_or(1.0),
            epsilon: sec.opt_f64("epsilon")?.unwrap_or(2.4),
            t0: sec.opt_f64("t0")?.unwrap_or(2.5),
            decay_times: sec
                .opt_times("decay_times")?
                .unwrap_or_else(|| vec![1.25, 1.5, 1.75, 2.0, 2.25, 2.5, 2.75, 3.0]),
            drift_times: sec
                .opt_times("drift_times")?
                .unwrap_or_else(|| vec![0.5, 1.0, 2.0]),
            budget: extract_curve_budget(sec, false)?,
            n_paths_c2: sec.opt_usize("n_paths_c2")?.unwrap_or(2500),
            n_outer: sec.opt_usize("n_outer")?.unwrap_or(60),
            n_inner: sec.opt_usize("n_inner")?.unwrap_or(50),
        },
        other => {
            return Err(line_err(
                kind_line,
                format!(
                    "experiment kind must be one of simulate, decay, c1, c2, support, \
                     wasserstein, report; got '{other}'"
                ),
            ))
        }
    };
    sec.reject_leftovers(&kind)?;
    Ok(experiment)
}

/// Parses and schema-checks a whole config file into a run plan.
pub fn parse_config(text: &str) -> Result<Plan, ConfigError> {
    let mut sections = parse_sections(text)?;
    let mut model_sec = sections
        .remove("model")
        .ok_or_else(|| ConfigError::Schema("missing required section [model]".into()))?;
    let mut sim_sec = sections
        .remove("sim")
        .ok_or_else(|| ConfigError::Schema("missing required section [sim]".into()))?;
    let mut experiment_sec = sections
        .remove("experiment")
        .ok_or_else(|| ConfigError::Schema("missing required section [experiment]".into()))?;
    let mut output_sec = sections
        .remove("output")
        .ok_or_else(|| ConfigError::Schema("missing required section [output]".into()))?;
    let coupling = match sections.remove("coupling") {
        Some(mut sec) => extract_coupling(&mut sec)?,
        None => CouplingBlock::default(),
    };

    let model = extract_model(&mut model_sec)?;
    let (sim, n_paths) = extract_sim(&mut sim_sec)?;
    sim.validate(model.tau()).map_err(core_schema)?;
    let experiment = extract_experiment(&mut experiment_sec, &model)?;
    let output = extract_output(&mut output_sec)?;

    Ok(Plan {
        model,
        sim,
        n_paths,
        coupling,
        experiment,
        output,
    })
}

/// Best-effort scan for `[output] directory` in a file that failed schema
/// validation, so the failure manifest still has somewhere to go.
pub fn sniff_output_directory(text: &str) -> Option<PathBuf> {
    let mut in_output = false;
    for raw_line in text.lines() {
        let line = match raw_line.find('#') {
            Some(pos) => &raw_line[..pos],
            None => raw_line,
        }
        .trim();
        if line.starts_with('[') {
            in_output = line == "[output]";
            continue;
        }
        if in_output {
            if let Some((key, value)) = line.split_once('=') {
                if key.trim() == "directory" && !value.trim().is_empty() {
                    return Some(PathBuf::from(value.trim()));
                }
            }
        }
    }
    None
}

#[cfg(test)]
mod tests {
    use super::*;

    fn base_config(experiment: &str) -> String {
        format!(
            "[model]\nkind = ou_jump\n\n[sim]\ndt = 0.02\nhorizon = 5.0\n\
             master_seed = 7\nn_paths = 200\n\n{experiment}\n\n[output]\ndirectory = out\n"
        )
    }

    #[test]
    fn minimal_simulate_config_parses() {
        let text = base_config("[experiment]\nkind = simulate\nxi = const 2.0");
        let plan = parse_config(&text).unwrap();
        assert_eq!(plan.model.descriptor().kind, "ou_jump");
        assert_eq!(plan.n_paths, 200);
        assert!(matches!(plan.experiment, Experiment::Simulate { .. }));
        assert!(plan.output.csv && plan.output.json);
    }

    #[test]
    fn unknown_key_is_rejected_with_its_line() {
        let text = base_config("[experiment]\nkind = simulate\nbogus = 1");
        let err = parse_config(&text).err().unwrap();
        let msg = err.to_string();
        assert!(msg.contains("unknown key 'bogus'"), "{msg}");
        assert!(msg.starts_with("line 12"), "{msg}");
    }

    #[test]
    fn key_that_does_not_apply_to_the_kind_is_rejected() {
        let text = base_config("[experiment]\nkind = simulate\nradius = 1.0");
        let err = parse_config(&text).err().unwrap().to_string();
        assert!(err.contains("does not apply to experiment kind 'simulate'"), "{err}");
    }

    #[test]
    fn duplicate_keys_and_sections_are_rejected() {
        let text = base_config("[experiment]\nkind = simulate\nkind = decay");
        let err = parse_config(&text).err().unwrap().to_string();
        assert!(err.contains("duplicate key 'kind'"), "{err}");

        let text2 = format!("{}\n[model]\nkind = ou_jump\n", base_config("[experiment]\nkind = simulate"));
        let err2 = parse_config(&text2).err().unwrap().to_string();
        assert!(err2.contains("duplicate section [model]"), "{err2}");
    }

    #[test]
    fn mark_syntax_covers_atom_and_normal() {
        let text = base_config("[experiment]\nkind = simulate")
            .replace("kind = ou_jump", "kind = ou_jump\nmark = normal 0.0 1.0");
        let plan = parse_config(&text).unwrap();
        let params = plan.model.descriptor().params.unwrap();
        assert!(matches!(params.mark, MarkLaw::Normal { .. }));

        let bad = base_config("[experiment]\nkind = simulate")
            .replace("kind = ou_jump", "kind = ou_jump\nmark = cauchy 1.0");
        let err = parse_config(&bad).err().unwrap().to_string();
        assert!(err.contains("'atom <v>' or 'normal <mean> <sd>'"), "{err}");
    }

    #[test]
    fn report_defaults_fill_every_budget() {
        let text = base_config("[experiment]\nkind = report\nxi = const 2.0\neta = const -2.0");
        let plan = parse_config(&text).unwrap();
        let Experiment::Report {
            decay_times,
            drift_times,
            budget,
            n_paths_c2,
            ..
        } = plan.experiment
        else {
            panic!("expected report experiment");
        };
        assert_eq!(decay_times.len(), 8);
        assert_eq!(drift_times, vec![0.5, 1.0, 2.0]);
        assert_eq!(budget.curve_samples, 96);
        assert_eq!(n_paths_c2, 2500);
    }

    #[test]
    fn output_directory_is_sniffed_from_invalid_text() {
        let text = "[output]\ndirectory = somewhere/deep\nbroken line\n";
        assert_eq!(
            sniff_output_directory(text),
            Some(PathBuf::from("somewhere/deep"))
        );
        assert_eq!(sniff_output_directory("[model]\nkind = ou_jump\n"), None);
    }
}
