//! Trajectory simulation for delay equations with jumps.
//!
//! The integrator is an explicit Euler scheme on the union of a uniform
//! `dt`-grid and the exact jump times of a compound Poisson stream, so the
//! no-jump probability `exp(-rate * t)` is preserved exactly. Between jumps
//! the compensator of the jump measure is carried as an explicit drift
//! `-gamma(X_t) * c_moment1`; at a jump with mark `z` the state moves by
//! `gamma(X_{s-}) * c(z)`.
//!
//! Randomness is drawn from counter-based per-path streams
//! ([`crate::rng::stream`]), one substream each for Brownian increments, jump
//! times, and marks, so batches are reproducible bit-for-bit under any
//! parallel execution plan and coupled processes can share exactly the
//! substreams a coupling prescribes.

use std::collections::BTreeMap;

use rand::Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;

use crate::model::{MarkLaw, ModelSpec};
use crate::rng::{stream, Substream};
use crate::segment::{floor_index, Segment, SegmentView, TIME_TOL};
use crate::stats::mean_stderr;
use crate::{Error, Result};

/// Looser node-matching tolerance for absolute times built as `k * dt`
/// products over long horizons (mirrors the segment window tolerance).
const NODE_TOL: f64 = 1e-9;

/// Integration parameters for one path.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SimConfig {
    /// Step size of the uniform grid.
    pub dt: f64,
    /// Final time `T >= 0`.
    pub horizon: f64,
    /// Master seed shared by a whole experiment.
    pub master_seed: u64,
    /// Path index selecting this path's random substreams.
    pub path_index: u64,
}

impl SimConfig {
    /// Checks step and horizon against a model's delay length: `dt` must be
    /// positive, at most `tau`, and divide `tau` to within `1e-12` so the
    /// initial segment embeds on the grid.
    pub fn validate(&self, tau: f64) -> Result<()> {
        self.validate_basic()?;
        if self.dt > tau + TIME_TOL {
            return Err(Error::InvalidConfig(format!(
                "step {} exceeds the delay length {tau}",
                self.dt
            )));
        }
        let steps = (tau / self.dt).round();
        if steps < 1.0 || (tau - steps * self.dt).abs() > TIME_TOL {
            return Err(Error::InvalidConfig(format!(
                "step {} does not divide the delay length {tau}",
                self.dt
            )));
        }
        Ok(())
    }

    /// Checks step and horizon only (used by the no-delay linear testbed).
    pub fn validate_basic(&self) -> Result<()> {
        if !(self.dt > 0.0) || !self.dt.is_finite() {
            return Err(Error::InvalidConfig(format!(
                "step must be positive and finite, got {}",
                self.dt
            )));
        }
        if !(self.horizon >= 0.0) || !self.horizon.is_finite() {
            return Err(Error::InvalidConfig(format!(
                "horizon must be nonnegative and finite, got {}",
                self.horizon
            )));
        }
        Ok(())
    }
}

/// Realized jump times and marks of a compound Poisson stream on `(0, T]`.
#[derive(Debug, Clone, PartialEq)]
pub struct JumpStream {
    /// Strictly increasing jump times.
    pub jump_times: Vec<f64>,
    /// One mark per jump time.
    pub marks: Vec<f64>,
}

impl JumpStream {
    /// A stream with no jumps.
    pub fn empty() -> Self {
        Self {
            jump_times: Vec::new(),
            marks: Vec::new(),
        }
    }
}

/// Samples a homogeneous Poisson stream of intensity `rate` on `(0, horizon]`
/// with i.i.d. marks, from the path's jump-time and mark substreams.
pub fn sample_jump_stream(
    rate: f64,
    marks: MarkLaw,
    horizon: f64,
    master_seed: u64,
    path_index: u64,
) -> Result<JumpStream> {
    if !(rate >= 0.0) || !rate.is_finite() {
        return Err(Error::InvalidConfig(format!(
            "jump rate must be nonnegative and finite, got {rate}"
        )));
    }
    if !(horizon >= 0.0) || !horizon.is_finite() {
        return Err(Error::InvalidConfig(format!(
            "horizon must be nonnegative and finite, got {horizon}"
        )));
    }
    let mut out = JumpStream::empty();
    if rate == 0.0 || horizon == 0.0 {
        return Ok(out);
    }
    let mut times_rng = stream(master_seed, path_index, Substream::JumpTimes);
    let mut marks_rng = stream(master_seed, path_index, Substream::Marks);
    let mut t = 0.0;
    loop {
        // Exponential inter-arrival via inverse transform on (0, 1].
        let u: f64 = 1.0 - times_rng.random::<f64>();
        t += -u.ln() / rate;
        if t > horizon {
            break;
        }
        out.jump_times.push(t);
        out.marks.push(marks.sample(&mut marks_rng));
    }
    Ok(out)
}

/// One realized jump: time, mark, and the state immediately before.
#[derive(Debug, Clone, PartialEq)]
pub struct Event {
    /// Jump time.
    pub time: f64,
    /// Mark `z` drawn from the mark law.
    pub mark: f64,
    /// State `X(t-)` just before the jump.
    pub pre_state: Vec<f64>,
}

/// Noise record of one path, sufficient to replay its integration.
#[derive(Debug, Clone)]
pub struct NoiseLog {
    /// Start time of each executed step.
    pub step_times: Vec<f64>,
    /// Length of each executed step.
    pub step_lengths: Vec<f64>,
    /// Standard normal draws, `m` per executed step, flattened.
    pub increments: Vec<f64>,
    /// The jump stream the path consumed.
    pub jumps: JumpStream,
}

/// A simulated path: the initial segment embedded at times `[-tau, 0]`
/// followed by the integration nodes up to the horizon.
#[derive(Debug, Clone)]
pub struct Trajectory {
    tau: f64,
    dim: usize,
    times: Vec<f64>,
    /// Flat node-major states, `dim` scalars per node.
    states: Vec<f64>,
    events: Vec<Event>,
    pre_values: BTreeMap<usize, Vec<f64>>,
    noise_log: Option<NoiseLog>,
}

impl Trajectory {
    /// Delay length of the embedded initial segment (zero for the no-delay
    /// linear testbed).
    pub fn tau(&self) -> f64 {
        self.tau
    }

    /// State dimension.
    pub fn dim(&self) -> usize {
        self.dim
    }

    /// Node times, starting at `-tau`.
    pub fn times(&self) -> &[f64] {
        &self.times
    }

    /// Flat node-major states.
    pub fn states(&self) -> &[f64] {
        &self.states
    }

    /// State stored at node `i`.
    pub fn state_at(&self, i: usize) -> &[f64] {
        &self.states[i * self.dim..(i + 1) * self.dim]
    }

    /// Realized jumps in time order.
    pub fn events(&self) -> &[Event] {
        &self.events
    }

    /// Pre-jump states keyed by node index.
    pub fn pre_values(&self) -> &BTreeMap<usize, Vec<f64>> {
        &self.pre_values
    }

    /// Noise record, present when the path was integrated with logging.
    pub fn noise_log(&self) -> Option<&NoiseLog> {
        self.noise_log.as_ref()
    }

    /// Final node time.
    pub fn end_time(&self) -> f64 {
        *self.times.last().expect("trajectory has at least one node")
    }

    /// Cadlag evaluation at absolute time `t`.
    pub fn value(&self, t: f64) -> &[f64] {
        self.state_at(floor_index(&self.times, t))
    }

    /// The delay segment at time `t`, as a borrowed view over this path.
    pub fn segment_at(&self, t: f64) -> Result<SegmentView<'_>> {
        if self.tau <= 0.0 {
            return Err(Error::InvalidConfig(
                "path has no delay window to view".into(),
            ));
        }
        if t < -NODE_TOL || t > self.end_time() + NODE_TOL {
            return Err(Error::TimeOutsideRange {
                time: t,
                lo: 0.0,
                hi: self.end_time(),
            });
        }
        let hi = floor_index(&self.times, t);
        let lo = floor_index(&self.times, t - self.tau);
        Ok(SegmentView::from_parts(
            t,
            self.tau,
            self.dim,
            &self.times,
            &self.states,
            &self.pre_values,
            lo,
            hi,
        ))
    }

    /// Largest Euclidean state norm over `[t0, t1]`, including pre-jump
    /// values at jumps strictly inside the window.
    pub fn sup_abs_window(&self, t0: f64, t1: f64) -> Result<f64> {
        if t0 > t1 + TIME_TOL {
            return Err(Error::InvalidConfig(format!(
                "empty window [{t0}, {t1}]"
            )));
        }
        if t0 < self.times[0] - NODE_TOL || t1 > self.end_time() + NODE_TOL {
            return Err(Error::TimeOutsideRange {
                time: if t0 < self.times[0] - NODE_TOL { t0 } else { t1 },
                lo: self.times[0],
                hi: self.end_time(),
            });
        }
        let start = floor_index(&self.times, t0);
        let mut sup = norm(self.state_at(start));
        let mut idx = start + 1;
        while idx < self.times.len() && self.times[idx] <= t1 + TIME_TOL {
            sup = sup.max(norm(self.state_at(idx)));
            if let Some(pre) = self.pre_values.get(&idx) {
                if self.times[idx] > t0 + TIME_TOL {
                    sup = sup.max(norm(pre));
                }
            }
            idx += 1;
        }
        Ok(sup)
    }

    /// Writes the path as CSV `t,x_1..x_n,is_jump,mark` with full-precision
    /// floats; `mark` is empty at non-jump nodes and at initial-segment jumps
    /// (which carry no mark).
    pub fn to_csv(&self) -> String {
        let mut out = String::from("t");
        for i in 1..=self.dim {
            out.push_str(&format!(",x_{i}"));
        }
        out.push_str(",is_jump,mark\n");
        let mut next_event = 0usize;
        for (idx, &t) in self.times.iter().enumerate() {
            out.push_str(&crate::fmt_g17(t));
            for v in self.state_at(idx) {
                out.push(',');
                out.push_str(&crate::fmt_g17(*v));
            }
            if self.pre_values.contains_key(&idx) {
                out.push_str(",1,");
                while next_event < self.events.len()
                    && self.events[next_event].time < t - TIME_TOL
                {
                    next_event += 1;
                }
                if next_event < self.events.len()
                    && (self.events[next_event].time - t).abs() <= TIME_TOL
                {
                    out.push_str(&crate::fmt_g17(self.events[next_event].mark));
                    next_event += 1;
                }
            } else {
                out.push_str(",0,");
            }
            out.push('\n');
        }
        out
    }
}

fn norm(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

/// Incremental path state shared by the plain simulator and the coupled
/// construction: owns the node arrays and applies Euler steps and jumps, but
/// holds no randomness of its own so callers control exactly which draws are
/// shared between processes.
pub(crate) struct Walker<'m> {
    model: &'m ModelSpec,
    tau: f64,
    dim: usize,
    times: Vec<f64>,
    states: Vec<f64>,
    pre_values: BTreeMap<usize, Vec<f64>>,
    events: Vec<Event>,
    /// Index of the last node at or before `last_time() - tau`.
    lo: usize,
}

impl<'m> Walker<'m> {
    /// Embeds the initial segment, resampled onto the uniform `dt` grid
    /// (marked jumps at grid offsets are kept).
    pub(crate) fn new(model: &'m ModelSpec, xi: &Segment, dt: f64) -> Result<Self> {
        let tau = model.tau();
        if (xi.tau() - tau).abs() > TIME_TOL {
            return Err(Error::DimensionMismatch(format!(
                "initial segment covers {} but the model delay is {tau}",
                xi.tau()
            )));
        }
        if xi.dim() != model.dim() {
            return Err(Error::DimensionMismatch(format!(
                "initial segment dimension {} vs model dimension {}",
                xi.dim(),
                model.dim()
            )));
        }
        let k_init = (tau / dt).round() as usize;
        let mut grid: Vec<f64> = (0..=k_init).map(|i| i as f64 * dt - tau).collect();
        grid[0] = -tau;
        grid[k_init] = 0.0;
        let embedded = xi.regrid(&grid)?;
        Ok(Self {
            model,
            tau,
            dim: model.dim(),
            times: embedded.grid().to_vec(),
            states: embedded.values().to_vec(),
            pre_values: embedded.pre_values().clone(),
            events: Vec::new(),
            lo: 0,
        })
    }

    pub(crate) fn last_time(&self) -> f64 {
        *self.times.last().expect("walker has nodes")
    }

    pub(crate) fn last_state(&self) -> &[f64] {
        &self.states[self.states.len() - self.dim..]
    }

    /// The current segment `X_{last_time}` as a borrowed view.
    pub(crate) fn view(&self) -> SegmentView<'_> {
        SegmentView::from_parts(
            self.last_time(),
            self.tau,
            self.dim,
            &self.times,
            &self.states,
            &self.pre_values,
            self.lo,
            self.times.len() - 1,
        )
    }

    /// One Euler step from the current node to `t_next`, using the supplied
    /// standard normal draws (`m` of them) and an extra additive drift (the
    /// coupling correction; zeros otherwise). Returns false without touching
    /// state when `t_next` coincides with the current node.
    pub(crate) fn advance_to(
        &mut self,
        t_next: f64,
        zeta: &[f64],
        extra_drift: &[f64],
    ) -> Result<bool> {
        let t_last = self.last_time();
        let delta = t_next - t_last;
        if delta <= TIME_TOL {
            return Ok(false);
        }
        let target = t_last - self.tau;
        while self.lo + 1 < self.times.len()
            && self.times[self.lo + 1] <= target + crate::segment::TIME_TOL.max(NODE_TOL)
        {
            self.lo += 1;
        }
        let view = self.view();
        let b = self.model.drift(&view);
        let sigma = self.model.diffusion(&view);
        let g = self.model.gamma(&view);
        if b.len() != self.dim {
            return Err(Error::DimensionMismatch(format!(
                "drift returned dimension {} instead of {}",
                b.len(),
                self.dim
            )));
        }
        if sigma.nrows() != self.dim || sigma.ncols() != zeta.len() {
            return Err(Error::DimensionMismatch(format!(
                "diffusion returned {}x{} instead of {}x{}",
                sigma.nrows(),
                sigma.ncols(),
                self.dim,
                zeta.len()
            )));
        }
        let cm1 = self.model.c_moment1();
        let sqdt = delta.sqrt();
        let x = self.last_state();
        let mut next = Vec::with_capacity(self.dim);
        for i in 0..self.dim {
            let mut noise = 0.0;
            for (j, z) in zeta.iter().enumerate() {
                noise += sigma[(i, j)] * z;
            }
            next.push(x[i] + (b[i] - g * cm1[i] + extra_drift[i]) * delta + sqdt * noise);
        }
        if next.iter().any(|v| !v.is_finite()) {
            return Err(Error::Divergence { time: t_next });
        }
        self.times.push(t_next);
        self.states.extend_from_slice(&next);
        Ok(true)
    }

    /// Applies a jump with mark `z` at the current node: the state moves by
    /// `gamma(X_{s-}) * c(z)`, the pre-jump state is recorded as the node's
    /// left limit, and an event is logged.
    pub(crate) fn apply_jump(&mut self, z: f64) -> Result<()> {
        let view = self.view();
        let g = self.model.gamma(&view);
        let c = self.model.jump_map(z);
        if c.len() != self.dim {
            return Err(Error::DimensionMismatch(format!(
                "jump map returned dimension {} instead of {}",
                c.len(),
                self.dim
            )));
        }
        let t = self.last_time();
        let idx = self.times.len() - 1;
        let base = idx * self.dim;
        let pre = self.states[base..].to_vec();
        for (i, ci) in c.iter().enumerate() {
            self.states[base + i] = pre[i] + g * ci;
        }
        if self.states[base..].iter().any(|v| !v.is_finite()) {
            return Err(Error::Divergence { time: t });
        }
        // Two jumps at one node keep the earliest left limit.
        self.pre_values.entry(idx).or_insert_with(|| pre.clone());
        self.events.push(Event {
            time: t,
            mark: z,
            pre_state: pre,
        });
        Ok(())
    }

    /// Drops nodes strictly before the node at or before `keep_from`,
    /// reindexing the jump marks. Used by long streaming runs to bound
    /// memory; events are kept (they are small and carry absolute times).
    pub(crate) fn compact(&mut self, keep_from: f64) {
        let cut = floor_index(&self.times, keep_from);
        if cut == 0 {
            return;
        }
        self.times.drain(0..cut);
        self.states.drain(0..cut * self.dim);
        let old = std::mem::take(&mut self.pre_values);
        self.pre_values = old
            .into_iter()
            .filter(|(k, _)| *k > cut)
            .map(|(k, v)| (k - cut, v))
            .collect();
        self.lo = self.lo.saturating_sub(cut);
    }

    pub(crate) fn into_trajectory(self, noise_log: Option<NoiseLog>) -> Trajectory {
        Trajectory {
            tau: self.tau,
            dim: self.dim,
            times: self.times,
            states: self.states,
            events: self.events,
            pre_values: self.pre_values,
            noise_log,
        }
    }
}

/// Iterator over integration nodes: the uniform grid merged with jump times.
/// Yields `(time, Some(jump_index))` at jump nodes. A jump within the node
/// tolerance of a grid time is merged onto the grid time; the final node is
/// always exactly the horizon.
pub(crate) struct Schedule<'a> {
    dt: f64,
    horizon: f64,
    jump_times: &'a [f64],
    k: usize,
    j: usize,
    final_emitted: bool,
}

impl<'a> Schedule<'a> {
    pub(crate) fn new(dt: f64, horizon: f64, jump_times: &'a [f64]) -> Self {
        Self {
            dt,
            horizon,
            jump_times,
            k: 1,
            j: 0,
            final_emitted: horizon <= TIME_TOL,
        }
    }
}

impl<'a> Iterator for Schedule<'a> {
    type Item = (f64, Option<usize>);

    fn next(&mut self) -> Option<Self::Item> {
        let grid_t = {
            let t = self.k as f64 * self.dt;
            if t < self.horizon - TIME_TOL {
                Some(t)
            } else if !self.final_emitted {
                Some(self.horizon)
            } else {
                None
            }
        };
        let jump_t = self.j < self.jump_times.len();
        match (grid_t, jump_t) {
            (Some(tg), true) => {
                let tj = self.jump_times[self.j];
                if tj < tg - TIME_TOL {
                    self.j += 1;
                    Some((tj, Some(self.j - 1)))
                } else if tj <= tg + TIME_TOL {
                    // Jump lands on a grid node: one merged node.
                    self.j += 1;
                    self.advance_grid(tg);
                    Some((tg, Some(self.j - 1)))
                } else {
                    self.advance_grid(tg);
                    Some((tg, None))
                }
            }
            (Some(tg), false) => {
                self.advance_grid(tg);
                Some((tg, None))
            }
            (None, true) => {
                // Leftover jumps at the horizon (within tolerance).
                self.j += 1;
                Some((self.horizon, Some(self.j - 1)))
            }
            (None, false) => None,
        }
    }
}

impl<'a> Schedule<'a> {
    fn advance_grid(&mut self, emitted: f64) {
        if (emitted - self.horizon).abs() <= TIME_TOL {
            self.final_emitted = true;
        }
        // Skip any grid times consumed by snapping onto the horizon.
        while (self.k as f64) * self.dt <= emitted + TIME_TOL {
            self.k += 1;
        }
    }
}

fn integrate(
    model: &ModelSpec,
    xi: &Segment,
    cfg: &SimConfig,
    jumps: JumpStream,
    log: bool,
) -> Result<Trajectory> {
    cfg.validate(model.tau())?;
    let mut walker = Walker::new(model, xi, cfg.dt)?;
    let m = model.brownian_dim();
    let mut brownian = stream(cfg.master_seed, cfg.path_index, Substream::Brownian);
    let mut zeta = vec![0.0; m];
    let zeros = vec![0.0; model.dim()];
    let mut noise_log = log.then(|| NoiseLog {
        step_times: Vec::new(),
        step_lengths: Vec::new(),
        increments: Vec::new(),
        jumps: jumps.clone(),
    });
    for (t, jump) in Schedule::new(cfg.dt, cfg.horizon, &jumps.jump_times) {
        for z in zeta.iter_mut() {
            *z = brownian.sample(StandardNormal);
        }
        let t_from = walker.last_time();
        let stepped = walker.advance_to(t, &zeta, &zeros)?;
        if stepped {
            if let Some(log) = noise_log.as_mut() {
                log.step_times.push(t_from);
                log.step_lengths.push(t - t_from);
                log.increments.extend_from_slice(&zeta);
            }
        }
        if let Some(j) = jump {
            walker.apply_jump(jumps.marks[j])?;
        }
    }
    Ok(walker.into_trajectory(noise_log))
}

/// Simulates one path of the model from the initial segment `xi`.
pub fn simulate(model: &ModelSpec, xi: &Segment, cfg: &SimConfig) -> Result<Trajectory> {
    let jumps = sample_jump_stream(
        model.jump_rate(),
        model.marks(),
        cfg.horizon,
        cfg.master_seed,
        cfg.path_index,
    )?;
    integrate(model, xi, cfg, jumps, false)
}

/// Simulates one path against an externally supplied jump stream (shared
/// streams make paths comparable across step sizes or processes).
pub fn simulate_with_stream(
    model: &ModelSpec,
    xi: &Segment,
    cfg: &SimConfig,
    jumps: JumpStream,
) -> Result<Trajectory> {
    integrate(model, xi, cfg, jumps, false)
}

/// Simulates one path and retains its noise record for replay.
pub fn simulate_with_log(model: &ModelSpec, xi: &Segment, cfg: &SimConfig) -> Result<Trajectory> {
    let jumps = sample_jump_stream(
        model.jump_rate(),
        model.marks(),
        cfg.horizon,
        cfg.master_seed,
        cfg.path_index,
    )?;
    integrate(model, xi, cfg, jumps, true)
}

/// Simulates the continuous auxiliary process: the jump stream is suppressed
/// but the compensator drift `-gamma(X_t) * c_moment1` is retained.
pub fn simulate_auxiliary(model: &ModelSpec, xi: &Segment, cfg: &SimConfig) -> Result<Trajectory> {
    integrate(model, xi, cfg, JumpStream::empty(), false)
}

/// Runs `n_paths` paths with consecutive path indices and maps each finished
/// trajectory through `f`, in parallel, returning results in path order so
/// downstream reductions are independent of the execution plan.
pub fn simulate_map<T, F>(
    model: &ModelSpec,
    xi: &Segment,
    base: &SimConfig,
    n_paths: usize,
    f: F,
) -> Result<Vec<T>>
where
    T: Send,
    F: Fn(u64, Trajectory) -> T + Sync,
{
    if n_paths == 0 {
        return Err(Error::InvalidConfig("batch needs at least one path".into()));
    }
    (0..n_paths as u64)
        .into_par_iter()
        .map(|i| {
            let cfg = SimConfig {
                path_index: base.path_index + i,
                ..*base
            };
            simulate(model, xi, &cfg).map(|traj| f(cfg.path_index, traj))
        })
        .collect()
}

/// Runs `n_paths` paths with consecutive path indices, in parallel, returned
/// in path order.
pub fn simulate_batch(
    model: &ModelSpec,
    xi: &Segment,
    base: &SimConfig,
    n_paths: usize,
) -> Result<Vec<Trajectory>> {
    simulate_map(model, xi, base, n_paths, |_, traj| traj)
}

/// Simulates one long path, keeping only a rolling delay window in memory,
/// and returns the delay segments observed every `sample_every` time units
/// after `burn_in`. Memory stays bounded regardless of the horizon.
pub fn simulate_sampled(
    model: &ModelSpec,
    xi: &Segment,
    cfg: &SimConfig,
    burn_in: f64,
    sample_every: f64,
) -> Result<Vec<(f64, Segment)>> {
    cfg.validate(model.tau())?;
    if !(sample_every > 0.0) || !(burn_in >= 0.0) {
        return Err(Error::InvalidConfig(format!(
            "need sample_every > 0 and burn_in >= 0, got {sample_every} and {burn_in}"
        )));
    }
    let jumps = sample_jump_stream(
        model.jump_rate(),
        model.marks(),
        cfg.horizon,
        cfg.master_seed,
        cfg.path_index,
    )?;
    let mut walker = Walker::new(model, xi, cfg.dt)?;
    let m = model.brownian_dim();
    let mut brownian = stream(cfg.master_seed, cfg.path_index, Substream::Brownian);
    let mut zeta = vec![0.0; m];
    let zeros = vec![0.0; model.dim()];
    let window_nodes = (model.tau() / cfg.dt).round() as usize + 2;
    let compact_at = 8 * window_nodes + 1024;
    let mut next_sample = burn_in.max(0.0);
    let mut samples = Vec::new();
    for (t, jump) in Schedule::new(cfg.dt, cfg.horizon, &jumps.jump_times) {
        for z in zeta.iter_mut() {
            *z = brownian.sample(StandardNormal);
        }
        walker.advance_to(t, &zeta, &zeros)?;
        if let Some(j) = jump {
            walker.apply_jump(jumps.marks[j])?;
        }
        while t >= next_sample - NODE_TOL {
            samples.push((t, walker.view().to_segment()?));
            next_sample += sample_every;
        }
        if walker.times.len() > compact_at {
            walker.compact(t - model.tau());
        }
    }
    Ok(samples)
}

/// Kernel of the linear jump-driven testbed: the mark image entering each
/// jump, either a constant or the mark itself.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum LinearKernel {
    /// `h(t, z) = c`.
    Constant(f64),
    /// `h(t, z) = z`.
    Mark,
}

impl LinearKernel {
    fn apply(&self, z: f64) -> f64 {
        match *self {
            LinearKernel::Constant(c) => c,
            LinearKernel::Mark => z,
        }
    }

    fn mean(&self, marks: MarkLaw) -> f64 {
        match *self {
            LinearKernel::Constant(c) => c,
            LinearKernel::Mark => marks.mean(),
        }
    }
}

/// Jump input of the linear testbed.
#[derive(Debug, Clone, Copy)]
pub struct HSpec {
    /// Deterministic kernel `h`.
    pub kernel: LinearKernel,
    /// Total jump intensity.
    pub jump_rate: f64,
    /// Mark law.
    pub marks: MarkLaw,
}

/// Simulates the scalar linear equation
/// `dY = -lambda Y dt + integral h(t,z) Ntilde(dt,dz)`, `Y(0) = 0`, through
/// its explicit solution `Y(t) = integral_0^t e^{-lambda(t-s)} h dNtilde`,
/// evaluated exactly at the grid and jump times. The returned path has no
/// delay window.
pub fn simulate_linear_jump_ou(lambda: f64, h: &HSpec, cfg: &SimConfig) -> Result<Trajectory> {
    let jumps = sample_jump_stream(
        h.jump_rate,
        h.marks,
        cfg.horizon,
        cfg.master_seed,
        cfg.path_index,
    )?;
    simulate_linear_jump_ou_with_stream(lambda, h, cfg, jumps)
}

/// As [`simulate_linear_jump_ou`] with an externally supplied jump stream.
pub fn simulate_linear_jump_ou_with_stream(
    lambda: f64,
    h: &HSpec,
    cfg: &SimConfig,
    jumps: JumpStream,
) -> Result<Trajectory> {
    if !(lambda > 0.0) || !lambda.is_finite() {
        return Err(Error::InvalidConfig(format!(
            "decay rate must be positive, got {lambda}"
        )));
    }
    cfg.validate_basic()?;
    let h_mean = h.kernel.mean(h.marks) * h.jump_rate;
    // Compensator part: integral_0^t e^{-lambda(t-s)} h_mean ds.
    let compensator = |t: f64| h_mean * (1.0 - (-lambda * t).exp()) / lambda;
    let mut times = vec![0.0];
    let mut states = vec![0.0];
    let mut events = Vec::new();
    let mut pre_values = BTreeMap::new();
    // Running jump sum J(t) = sum_{s_j <= t} e^{-lambda (t - s_j)} h_j.
    let mut j_sum = 0.0;
    let mut t_prev = 0.0;
    for (t, jump) in Schedule::new(cfg.dt, cfg.horizon, &jumps.jump_times) {
        if t - t_prev > TIME_TOL {
            j_sum *= (-lambda * (t - t_prev)).exp();
            times.push(t);
            states.push(j_sum - compensator(t));
            t_prev = t;
        }
        if let Some(j) = jump {
            let z = jumps.marks[j];
            let idx = times.len() - 1;
            let pre = states[idx];
            j_sum += h.kernel.apply(z);
            states[idx] = j_sum - compensator(t);
            pre_values.entry(idx).or_insert_with(|| vec![pre]);
            events.push(Event {
                time: t,
                mark: z,
                pre_state: vec![pre],
            });
        }
    }
    Ok(Trajectory {
        tau: 0.0,
        dim: 1,
        times,
        states,
        events,
        pre_values,
        noise_log: None,
    })
}

/// Monte Carlo estimate of `E sup_{t in [t0, t1]} |X(t)|^p` over a batch,
/// with its standard error.
pub fn sup_moment_estimate(
    trajs: &[Trajectory],
    p: f64,
    window: (f64, f64),
) -> Result<(f64, f64)> {
    if trajs.is_empty() {
        return Err(Error::Degenerate("sup-moment estimate over an empty batch".into()));
    }
    if !(p > 0.0) {
        return Err(Error::InvalidConfig(format!(
            "moment order must be positive, got {p}"
        )));
    }
    let sups: Vec<f64> = trajs
        .iter()
        .map(|t| t.sup_abs_window(window.0, window.1).map(|s| s.powf(p)))
        .collect::<Result<_>>()?;
    Ok(mean_stderr(&sups))
}
