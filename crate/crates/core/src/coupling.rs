//! The shared-noise coupling with drift correction, its decay certificate,
//! and the Girsanov/KL machinery.
//!
//! Two processes are integrated in lockstep: `X` from the initial segment
//! `xi`, and `Y` from `eta` with the same Brownian increments and the same
//! jump stream plus the extra drift `lambda * (X(t) - Y(t))`. The gap then
//! contracts at a rate the coupling strength controls, while the law of `Y`
//! stays absolutely continuous with respect to the uncorrected process; the
//! density is tracked through the shift `theta(s) = lambda * sigma^{-1}(Y_s)
//! (X(s) - Y(s))`.
//!
//! Numerical conventions: the KL functional `E 1/2 int |theta|^2 ds` is
//! integrated by the trapezoidal rule on the node values; the Girsanov
//! log-weight `-int theta dW - 1/2 int |theta|^2 ds` uses left-endpoint
//! (predictable) sums, which makes the discrete importance-sampling identity
//! exact at any step size. When the diffusion is singular somewhere along
//! `Y`, the paths are still produced but the density accumulators are marked
//! poisoned from the first singular time; consumers that need them fail with
//! that diagnostic.

use nalgebra::DMatrix;
use rand::Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::Serialize;

use crate::model::ModelSpec;
use crate::rng::{stream, Substream};
use crate::segment::{floor_index, sup_distance, Segment, TIME_TOL};
use crate::sim::{sample_jump_stream, Schedule, SimConfig, Trajectory, Walker};
use crate::stats::{mean_stderr, weighted_line_fit};
use crate::{Error, Result};

/// Singular values of the diffusion at or below this threshold poison the
/// density accumulators.
const SINGULAR_TOL: f64 = 1e-10;

/// One realization of the coupled pair.
#[derive(Debug, Clone)]
pub struct CoupledRun {
    /// The uncorrected process, from `xi`.
    pub x: Trajectory,
    /// The corrected process, from `eta`, sharing all noise with `x`.
    pub y: Trajectory,
    /// Coupling strength.
    pub lambda: f64,
    /// Node times of the forward integration, starting at zero.
    pub kl_times: Vec<f64>,
    /// `|theta(t)|^2` at each node (post-jump value at jump nodes).
    pub kl_integrand: Vec<f64>,
    /// Girsanov log-weight `-sum theta dW - 1/2 sum |theta|^2 dt` over the
    /// whole horizon (left-endpoint sums).
    pub girsanov_log_weight: f64,
    /// Initial segment gap `sup |xi - eta|`.
    pub gap0: f64,
    /// First time the diffusion along `Y` was singular, if any; the density
    /// accumulators are invalid from this time on.
    pub first_singular: Option<f64>,
    /// Model constants echoed for report assembly.
    pub k_bound: f64,
    /// Delay length.
    pub tau: f64,
}

impl CoupledRun {
    /// KL contribution `1/2 int_{t0}^{t1} |theta|^2 ds` by the trapezoidal
    /// rule over the logged nodes (endpoints snap to nodes).
    pub fn kl_between(&self, t0: f64, t1: f64) -> Result<f64> {
        if let Some(s) = self.first_singular {
            if s <= t1 + TIME_TOL {
                return Err(Error::SingularDiffusion {
                    time: s,
                    detail: "diffusion was singular along Y; the KL accumulator is invalid"
                        .into(),
                });
            }
        }
        if t0 > t1 + TIME_TOL {
            return Err(Error::InvalidConfig(format!("empty KL window [{t0}, {t1}]")));
        }
        let i0 = floor_index(&self.kl_times, t0);
        let i1 = floor_index(&self.kl_times, t1);
        let mut acc = 0.0;
        for k in i0..i1 {
            let dt = self.kl_times[k + 1] - self.kl_times[k];
            acc += 0.5 * dt * (self.kl_integrand[k] + self.kl_integrand[k + 1]);
        }
        Ok(0.5 * acc)
    }

    /// KL contribution over the whole horizon.
    pub fn kl(&self) -> Result<f64> {
        let end = *self.kl_times.last().unwrap_or(&0.0);
        self.kl_between(0.0, end)
    }

    /// Largest Euclidean gap `|X - Y|` over the delay window `[t - tau, t]`,
    /// including left limits at marked nodes on either path.
    pub fn gap_sup(&self, t: f64) -> Result<f64> {
        let times = self.x.times();
        debug_assert_eq!(times, self.y.times());
        if t < -TIME_TOL || t > self.x.end_time() + 1e-9 {
            return Err(Error::TimeOutsideRange {
                time: t,
                lo: 0.0,
                hi: self.x.end_time(),
            });
        }
        let hi = floor_index(times, t);
        let lo = floor_index(times, t - self.tau);
        let dim = self.x.dim();
        let mut sup = 0.0_f64;
        for idx in lo..=hi {
            let dx = diff_norm(self.x.state_at(idx), self.y.state_at(idx));
            sup = sup.max(dx);
            if idx > lo {
                let xp = self.x.pre_values().get(&idx);
                let yp = self.y.pre_values().get(&idx);
                if xp.is_some() || yp.is_some() {
                    let xl = xp.map(Vec::as_slice).unwrap_or(self.x.state_at(idx));
                    let yl = yp.map(Vec::as_slice).unwrap_or(self.y.state_at(idx));
                    sup = sup.max(diff_norm(xl, yl));
                }
            }
            debug_assert_eq!(self.x.state_at(idx).len(), dim);
        }
        Ok(sup)
    }
}

fn diff_norm(a: &[f64], b: &[f64]) -> f64 {
    a.iter()
        .zip(b)
        .map(|(x, y)| (x - y) * (x - y))
        .sum::<f64>()
        .sqrt()
}

/// The Girsanov shift at one node: `theta = lambda sigma^{-1}(Y_s)(X - Y)`,
/// with `sigma` evaluated on the `Y` walker's current segment. Returns
/// `None` — and records the node time in `first_singular` — when the
/// diffusion is singular (smallest singular value below `1e-10`) or not
/// square.
fn node_theta(
    model: &ModelSpec,
    wy: &Walker<'_>,
    x_state: &[f64],
    y_state: &[f64],
    lambda: f64,
    t: f64,
    first_singular: &mut Option<f64>,
) -> Option<Vec<f64>> {
    let sigma = model.diffusion(&wy.view());
    match theta(&sigma, x_state, y_state, lambda) {
        Some(th) => Some(th),
        None => {
            first_singular.get_or_insert(t);
            None
        }
    }
}

fn theta(
    sigma: &DMatrix<f64>,
    x: &[f64],
    y: &[f64],
    lambda: f64,
) -> Option<Vec<f64>> {
    let n = x.len();
    if sigma.nrows() != n || sigma.ncols() != n {
        return None;
    }
    if n == 1 {
        let s = sigma[(0, 0)];
        if s.abs() <= SINGULAR_TOL {
            return None;
        }
        return Some(vec![lambda * (x[0] - y[0]) / s]);
    }
    let svd = sigma.clone().svd(false, false);
    let smallest = svd
        .singular_values
        .iter()
        .copied()
        .fold(f64::INFINITY, f64::min);
    if smallest <= SINGULAR_TOL {
        return None;
    }
    let inv = sigma.clone().try_inverse()?;
    let mut out = vec![0.0; n];
    for i in 0..n {
        let mut acc = 0.0;
        for j in 0..n {
            acc += inv[(i, j)] * (x[j] - y[j]);
        }
        out[i] = lambda * acc;
    }
    Some(out)
}

/// Simulates the coupled pair `(X, Y)` with shared Brownian increments and a
/// shared jump stream; `Y` carries the extra drift `lambda * (X - Y)` and its
/// own jump coefficient `gamma(Y_{s-})`.
pub fn simulate_coupled(
    model: &ModelSpec,
    xi: &Segment,
    eta: &Segment,
    lambda: f64,
    cfg: &SimConfig,
) -> Result<CoupledRun> {
    if !(lambda >= 0.0) || !lambda.is_finite() {
        return Err(Error::InvalidConfig(format!(
            "coupling strength must be nonnegative, got {lambda}"
        )));
    }
    cfg.validate(model.tau())?;
    let gap0 = sup_distance(xi, eta)?;
    let jumps = sample_jump_stream(
        model.jump_rate(),
        model.marks(),
        cfg.horizon,
        cfg.master_seed,
        cfg.path_index,
    )?;
    let mut wx = Walker::new(model, xi, cfg.dt)?;
    let mut wy = Walker::new(model, eta, cfg.dt)?;
    let m = model.brownian_dim();
    let n = model.dim();
    let mut brownian = stream(cfg.master_seed, cfg.path_index, Substream::Brownian);
    let mut zeta = vec![0.0; m];
    let zeros = vec![0.0; n];
    let mut correction = vec![0.0; n];

    let mut kl_times = vec![0.0];
    let mut kl_integrand = Vec::with_capacity(64);
    let mut first_singular: Option<f64> = None;
    let mut log_weight = 0.0_f64;

    // theta at the most recent node: the predictable integrand of the next
    // step's weight increment.
    let mut theta_prev = node_theta(
        model,
        &wy,
        wx.last_state(),
        wy.last_state(),
        lambda,
        0.0,
        &mut first_singular,
    );
    kl_integrand.push(theta_prev.as_ref().map_or(f64::NAN, |t| sq_norm(t)));

    for (t, jump) in Schedule::new(cfg.dt, cfg.horizon, &jumps.jump_times) {
        for z in zeta.iter_mut() {
            *z = brownian.sample(StandardNormal);
        }
        let t_from = wx.last_time();
        let delta = t - t_from;
        if delta > TIME_TOL {
            for (c, (xv, yv)) in correction
                .iter_mut()
                .zip(wx.last_state().iter().zip(wy.last_state()))
            {
                *c = lambda * (xv - yv);
            }
            if first_singular.is_none() {
                if let Some(th) = theta_prev.as_ref() {
                    let dot: f64 = th.iter().zip(&zeta).map(|(a, b)| a * b).sum();
                    log_weight -= dot * delta.sqrt() + 0.5 * sq_norm(th) * delta;
                }
            }
            wx.advance_to(t, &zeta, &zeros)?;
            wy.advance_to(t, &zeta, &correction)?;
        }
        if let Some(j) = jump {
            wx.apply_jump(jumps.marks[j])?;
            wy.apply_jump(jumps.marks[j])?;
        }
        let th = node_theta(
            model,
            &wy,
            wx.last_state(),
            wy.last_state(),
            lambda,
            t,
            &mut first_singular,
        );
        let value = th.as_ref().map_or(f64::NAN, |v| sq_norm(v));
        if delta > TIME_TOL {
            kl_times.push(t);
            kl_integrand.push(value);
        } else if let Some(last) = kl_integrand.last_mut() {
            // Merged node (jump exactly on the previous node): the node's
            // integrand is its post-jump value.
            *last = value;
        }
        theta_prev = th;
    }
    Ok(CoupledRun {
        x: wx.into_trajectory(None),
        y: wy.into_trajectory(None),
        lambda,
        kl_times,
        kl_integrand,
        girsanov_log_weight: log_weight,
        gap0,
        first_singular,
        k_bound: model.k_bound(),
        tau: model.tau(),
    })
}

fn sq_norm(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum()
}

/// Runs `n_paths` coupled pairs with consecutive path indices, mapping each
/// through `f` in parallel; results come back in path order. A pair is
/// always integrated within one worker so its shared streams never split.
pub fn simulate_coupled_map<T, F>(
    model: &ModelSpec,
    xi: &Segment,
    eta: &Segment,
    lambda: f64,
    base: &SimConfig,
    n_paths: usize,
    f: F,
) -> Result<Vec<T>>
where
    T: Send,
    F: Fn(u64, CoupledRun) -> T + Sync,
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
            simulate_coupled(model, xi, eta, lambda, &cfg).map(|run| f(cfg.path_index, run))
        })
        .collect()
}

/// Decay certificate for the coupled gap's second moment.
#[derive(Debug, Clone, Serialize)]
pub struct DecayFit {
    /// Target decay rate.
    pub alpha_target: f64,
    /// Coupling strength used.
    pub lambda_used: f64,
    /// `2 lambda - alpha`, the margin the contraction argument consumes.
    pub kappa: f64,
    /// `K + K^2`, the constant growth term of the same argument.
    pub k_prime: f64,
    /// Observation times.
    pub times: Vec<f64>,
    /// Monte Carlo means of the squared window gap at each time.
    pub mean_sq: Vec<f64>,
    /// Standard errors of those means.
    pub stderr: Vec<f64>,
    /// `log` of the means.
    pub log_mean_sq: Vec<f64>,
    /// Weighted least-squares slope of `log mean` against time.
    pub fitted_slope: f64,
    /// Standard error of the slope.
    pub fitted_slope_se: f64,
    /// Weighted least-squares intercept.
    pub fitted_intercept: f64,
    /// Theoretical prefactor `4 e^{alpha tau}`.
    pub theoretical_prefactor: f64,
    /// Initial gap `sup |xi - eta|`.
    pub gap0: f64,
    /// Slope tolerance used for the pass flag (`0.1 * alpha`).
    pub slope_tol: f64,
    /// True when `fitted_slope <= -alpha + slope_tol`.
    pub pass_slope: bool,
    /// True when every point respects the prefactor bound within four
    /// relative standard errors.
    pub pass_prefactor: bool,
}

impl DecayFit {
    /// CSV dump `t,mean_sq_gap,stderr,bound_4exp`.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("t,mean_sq_gap,stderr,bound_4exp\n");
        for (i, &t) in self.times.iter().enumerate() {
            let bound = self.theoretical_prefactor
                * self.gap0
                * self.gap0
                * (-self.alpha_target * t).exp();
            out.push_str(&format!(
                "{},{},{},{}\n",
                crate::fmt_g17(t),
                crate::fmt_g17(self.mean_sq[i]),
                crate::fmt_g17(self.stderr[i]),
                crate::fmt_g17(bound),
            ));
        }
        out
    }
}

/// Monte Carlo estimate of the window-gap second moment at each requested
/// time, with a weighted log-linear fit and pass flags for the exponential
/// decay envelope (`E sup-gap^2 <= 4 e^{alpha tau} gap0^2 e^{-alpha t}`).
#[allow(clippy::too_many_arguments)]
pub fn estimate_decay(
    model: &ModelSpec,
    xi: &Segment,
    eta: &Segment,
    lambda: f64,
    alpha: f64,
    times: &[f64],
    n_paths: usize,
    cfg: &SimConfig,
) -> Result<DecayFit> {
    if n_paths < 100 {
        return Err(Error::InvalidConfig(format!(
            "decay estimation needs at least 100 paths, got {n_paths}"
        )));
    }
    if !(alpha > 0.0) {
        return Err(Error::InvalidConfig(format!(
            "decay rate target must be positive, got {alpha}"
        )));
    }
    if times.is_empty()
        || times.windows(2).any(|w| w[1] <= w[0])
        || times[0] <= 0.0
        || times[times.len() - 1] > cfg.horizon + TIME_TOL
    {
        return Err(Error::InvalidConfig(
            "observation times must be strictly increasing inside (0, horizon]".into(),
        ));
    }
    let gap0 = sup_distance(xi, eta)?;
    if gap0 <= 0.0 {
        return Err(Error::Degenerate(
            "initial segments coincide; the coupled gap is identically zero — \
             choose xi != eta"
                .into(),
        ));
    }
    let per_path = simulate_coupled_map(model, xi, eta, lambda, cfg, n_paths, |_, run| {
        times
            .iter()
            .map(|&t| run.gap_sup(t).map(|g| g * g))
            .collect::<Result<Vec<f64>>>()
    })?;
    let per_path: Vec<Vec<f64>> = per_path.into_iter().collect::<Result<_>>()?;
    let mut mean_sq = Vec::with_capacity(times.len());
    let mut stderr = Vec::with_capacity(times.len());
    for (k, _) in times.iter().enumerate() {
        let column: Vec<f64> = per_path.iter().map(|row| row[k]).collect();
        let (m, se) = mean_stderr(&column);
        mean_sq.push(m);
        stderr.push(se);
    }
    if mean_sq.iter().any(|&m| m <= 0.0) {
        return Err(Error::Degenerate(
            "squared gap means vanish at some observation times; the log fit is \
             undefined — choose xi != eta or earlier times"
                .into(),
        ));
    }
    let log_mean_sq: Vec<f64> = mean_sq.iter().map(|m| m.ln()).collect();
    // Delta method: se(log m) = se(m)/m, floored to keep deterministic runs
    // (zero variance) well-posed with uniform weights.
    let weights: Vec<f64> = stderr
        .iter()
        .zip(&mean_sq)
        .map(|(se, m)| {
            let s = (se / m).max(1e-9);
            1.0 / (s * s)
        })
        .collect();
    let fit = weighted_line_fit(times, &log_mean_sq, &weights)?;
    let slope_tol = 0.1 * alpha;
    let prefactor = 4.0 * (alpha * model.tau()).exp();
    let pass_prefactor = mean_sq.iter().zip(&stderr).zip(times).all(|((m, se), &t)| {
        let bound = prefactor * gap0 * gap0 * (-alpha * t).exp();
        *m <= bound * (1.0 + 4.0 * se / m)
    });
    Ok(DecayFit {
        alpha_target: alpha,
        lambda_used: lambda,
        kappa: 2.0 * lambda - alpha,
        k_prime: model.k_bound() + model.k_bound() * model.k_bound(),
        times: times.to_vec(),
        mean_sq,
        stderr,
        log_mean_sq,
        fitted_slope: fit.slope,
        fitted_slope_se: fit.slope_se,
        fitted_intercept: fit.intercept,
        theoretical_prefactor: prefactor,
        gap0,
        slope_tol,
        pass_slope: fit.slope <= -alpha + slope_tol,
        pass_prefactor,
    })
}

/// Number of paths used by each pilot fit inside [`select_lambda`].
const PILOT_PATHS: usize = 1000;

/// Doubling search for a coupling strength whose pilot decay fit passes both
/// flags at rate `alpha`: candidates `max(1, 2 alpha), 2x, 4x, ... <=
/// lambda_max`. The returned strength always exceeds `alpha`.
pub fn select_lambda(
    model: &ModelSpec,
    xi: &Segment,
    eta: &Segment,
    alpha: f64,
    cfg: &SimConfig,
    lambda_max: f64,
) -> Result<f64> {
    if !(alpha > 0.0) {
        return Err(Error::InvalidConfig(format!(
            "decay rate target must be positive, got {alpha}"
        )));
    }
    let tau = model.tau();
    if cfg.horizon <= tau {
        return Err(Error::InvalidConfig(format!(
            "pilot horizon {} must exceed the delay {tau} so the fit sees the \
             post-delay decay regime",
            cfg.horizon
        )));
    }
    // The window sup over [t - tau, t] still sees the initial gap for
    // t <= tau; probe only the asymptotic regime past the delay.
    let times: Vec<f64> = (1..=8)
        .map(|i| tau + (cfg.horizon - tau) * i as f64 / 8.0)
        .collect();
    let mut lambda = (2.0 * alpha).max(1.0);
    let mut best: Option<(f64, f64)> = None; // (lambda, fitted slope)
    while lambda <= lambda_max * (1.0 + 1e-12) {
        let fit = estimate_decay(
            model,
            xi,
            eta,
            lambda,
            alpha,
            &times,
            PILOT_PATHS,
            cfg,
        )?;
        if fit.pass_slope && fit.pass_prefactor {
            return Ok(lambda);
        }
        if best.map_or(true, |(_, s)| fit.fitted_slope < s) {
            best = Some((lambda, fit.fitted_slope));
        }
        lambda *= 2.0;
    }
    let diag = best
        .map(|(l, s)| format!("best candidate lambda = {l} reached slope {s}"))
        .unwrap_or_else(|| "no candidate at or below lambda_max".into());
    Err(Error::SearchFailed(format!(
        "no coupling strength <= {lambda_max} certified decay at rate {alpha}: {diag}"
    )))
}

/// KL/total-variation summary of a batch of coupled runs.
#[derive(Debug, Clone, Serialize)]
pub struct KlReport {
    /// Monte Carlo mean of `1/2 int_0^T |theta|^2 ds`.
    pub kl: f64,
    /// Standard error of the mean.
    pub kl_stderr: f64,
    /// Pinsker bound `min(1, sqrt(kl / 2))`.
    pub tv_bound: f64,
    /// The closed constant `lambda K sqrt(4 e^{alpha tau}) gap0 / (2
    /// sqrt(alpha))` reported for comparison.
    pub closed_bound: f64,
    /// Horizon the KL integral was truncated at.
    pub horizon: f64,
}

/// Mean KL functional of a batch with its Pinsker total-variation bound and
/// the closed comparison constant at rate `alpha`. All runs must share
/// `(xi, eta, lambda)`; a run with a singular diffusion fails here with the
/// first singular time.
pub fn kl_and_tv(runs: &[CoupledRun], alpha: f64) -> Result<KlReport> {
    if runs.is_empty() {
        return Err(Error::InvalidConfig("KL estimate over an empty batch".into()));
    }
    if !(alpha > 0.0) {
        return Err(Error::InvalidConfig(format!(
            "comparison rate must be positive, got {alpha}"
        )));
    }
    let kls: Vec<f64> = runs.iter().map(CoupledRun::kl).collect::<Result<_>>()?;
    let (kl, kl_stderr) = mean_stderr(&kls);
    let r0 = &runs[0];
    let prefactor = (4.0 * (alpha * r0.tau).exp()).sqrt();
    let closed_bound = r0.lambda * r0.k_bound * prefactor * r0.gap0 / (2.0 * alpha.sqrt());
    Ok(KlReport {
        kl,
        kl_stderr,
        tv_bound: (kl / 2.0).sqrt().min(1.0),
        closed_bound,
        horizon: *r0.kl_times.last().unwrap_or(&0.0),
    })
}

/// Bounded test functionals of the terminal state used by the reweighting
/// check.
#[derive(Debug, Clone)]
pub enum TestFunctional {
    /// First coordinate of the terminal state.
    Identity,
    /// Indicator of the Euclidean ball around `center`.
    BallIndicator {
        /// Ball center.
        center: Vec<f64>,
        /// Ball radius.
        radius: f64,
    },
}

impl TestFunctional {
    fn apply(&self, x: &[f64]) -> f64 {
        match self {
            TestFunctional::Identity => x[0],
            TestFunctional::BallIndicator { center, radius } => {
                if diff_norm(x, center) <= *radius {
                    1.0
                } else {
                    0.0
                }
            }
        }
    }
}

/// Outcome of the importance-reweighting consistency check.
#[derive(Debug, Clone, Serialize)]
pub struct ReweightReport {
    /// Reweighted estimate `E[g(Y_T) exp(log-weight)]` from coupled runs.
    pub reweighted: f64,
    /// Its standard error.
    pub reweighted_se: f64,
    /// Direct estimate `E[g(X_T)]` from plain simulation started at `eta`.
    pub direct: f64,
    /// Its standard error.
    pub direct_se: f64,
    /// Discrepancy z-score.
    pub z_score: f64,
    /// Largest log-weight observed.
    pub max_log_weight: f64,
    /// Number of weights clamped to avoid overflow (any clamping makes the
    /// estimate untrustworthy).
    pub truncated: usize,
}

/// Verifies the Girsanov identity numerically: reweighting `g(Y_T)` by the
/// exponential weight must reproduce the plain expectation of `g` under the
/// uncorrected process started at `eta`. The direct ensemble uses a disjoint
/// path-index block so the two estimates are independent.
pub fn importance_reweight_check(
    model: &ModelSpec,
    xi: &Segment,
    eta: &Segment,
    lambda: f64,
    cfg: &SimConfig,
    g: &TestFunctional,
    n_paths: usize,
) -> Result<ReweightReport> {
    if n_paths == 0 {
        return Err(Error::InvalidConfig("reweighting check needs paths".into()));
    }
    let horizon = cfg.horizon;
    let weighted = simulate_coupled_map(model, xi, eta, lambda, cfg, n_paths, |_, run| {
        if run.first_singular.is_some() {
            return Err(Error::SingularDiffusion {
                time: run.first_singular.unwrap(),
                detail: "cannot reweight across a singular diffusion".into(),
            });
        }
        let lw = run.girsanov_log_weight;
        let clamped = lw > 700.0;
        let w = lw.min(700.0).exp();
        Ok((g.apply(run.y.value(horizon)) * w, lw, clamped))
    })?;
    let weighted: Vec<(f64, f64, bool)> = weighted.into_iter().collect::<Result<_>>()?;
    let vals: Vec<f64> = weighted.iter().map(|(v, _, _)| *v).collect();
    let (reweighted, reweighted_se) = mean_stderr(&vals);
    let max_log_weight = weighted
        .iter()
        .map(|(_, lw, _)| *lw)
        .fold(f64::NEG_INFINITY, f64::max);
    let truncated = weighted.iter().filter(|(_, _, c)| *c).count();

    let direct_base = SimConfig {
        path_index: cfg.path_index + n_paths as u64,
        ..*cfg
    };
    let direct_vals = crate::sim::simulate_map(model, eta, &direct_base, n_paths, |_, t| {
        g.apply(t.value(horizon))
    })?;
    let (direct, direct_se) = mean_stderr(&direct_vals);
    let denom = (reweighted_se * reweighted_se + direct_se * direct_se)
        .sqrt()
        .max(1e-300);
    Ok(ReweightReport {
        reweighted,
        reweighted_se,
        direct,
        direct_se,
        z_score: (reweighted - direct) / denom,
        max_log_weight,
        truncated,
    })
}

/// Per-pair entry of the first-condition report.
#[derive(Debug, Clone, Serialize)]
pub struct C1PairReport {
    /// Initial gap of the pair.
    pub gap0: f64,
    /// Second-moment decay certificate (second item of the condition, giving
    /// the first-moment rate `r(t) = sqrt(4 e^{alpha tau}) e^{-alpha t / 2}`
    /// by Cauchy–Schwarz).
    pub decay: DecayFit,
    /// Girsanov/KL summary (first item of the condition).
    pub kl: KlReport,
    /// Whether the truncated TV bound stays below the closed constant.
    pub pass_tv: bool,
}

/// Aggregate report: both items of the coupling condition over a pair list.
#[derive(Debug, Clone, Serialize)]
pub struct C1Report {
    /// Rate the certificates target.
    pub alpha: f64,
    /// Coupling strength selected by the doubling search.
    pub lambda0: f64,
    /// Per-pair certificates.
    pub pairs: Vec<C1PairReport>,
    /// True when every pair passes slope, prefactor, and TV checks.
    pub pass: bool,
}

/// Assembles the coupling-condition report: selects a coupling strength on
/// the widest pair, then certifies second-moment decay and the KL/TV bound
/// for every pair.
pub fn condition_c1_report(
    model: &ModelSpec,
    pairs: &[(Segment, Segment)],
    alpha: f64,
    times: &[f64],
    cfg: &SimConfig,
    n_paths: usize,
) -> Result<C1Report> {
    if pairs.is_empty() {
        return Err(Error::InvalidConfig("condition report needs pairs".into()));
    }
    for (xi, eta) in pairs {
        if sup_distance(xi, eta)? <= 0.0 {
            return Err(Error::InvalidConfig(
                "a pair has xi = eta; certificates need a positive initial gap".into(),
            ));
        }
    }
    let widest = pairs
        .iter()
        .map(|(xi, eta)| sup_distance(xi, eta).unwrap_or(0.0))
        .enumerate()
        .max_by(|a, b| a.1.total_cmp(&b.1))
        .map(|(i, _)| i)
        .unwrap_or(0);
    let lambda0 = select_lambda(
        model,
        &pairs[widest].0,
        &pairs[widest].1,
        alpha,
        cfg,
        2.0_f64.powi(10),
    )?;
    let mut out = Vec::with_capacity(pairs.len());
    let mut pass = true;
    for (xi, eta) in pairs {
        let decay = estimate_decay(model, xi, eta, lambda0, alpha, times, n_paths, cfg)?;
        let kl_scalars =
            simulate_coupled_map(model, xi, eta, lambda0, cfg, n_paths, |_, run| {
                run.kl()
            })?;
        let kls: Vec<f64> = kl_scalars.into_iter().collect::<Result<_>>()?;
        let (kl, kl_stderr) = mean_stderr(&kls);
        let gap0 = decay.gap0;
        let prefactor = (4.0 * (alpha * model.tau()).exp()).sqrt();
        let closed_bound = lambda0 * model.k_bound() * prefactor * gap0 / (2.0 * alpha.sqrt());
        let kl_report = KlReport {
            kl,
            kl_stderr,
            tv_bound: (kl / 2.0).sqrt().min(1.0),
            closed_bound,
            horizon: cfg.horizon,
        };
        // Four standard errors of slack on the KL before taking the root.
        let tv_hi = (((kl + 4.0 * kl_stderr) / 2.0).sqrt()).min(1.0);
        let pass_tv = tv_hi <= closed_bound * (1.0 + 1e-9);
        pass &= decay.pass_slope && decay.pass_prefactor && pass_tv;
        out.push(C1PairReport {
            gap0,
            decay,
            kl: kl_report,
            pass_tv,
        });
    }
    Ok(C1Report {
        alpha,
        lambda0,
        pairs: out,
        pass,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{make_builtin, BuiltinKind, BuiltinParams, MarkLaw};
    use crate::sim::simulate;
    use crate::stats::ks_two_sample;
    use approx::assert_abs_diff_eq;

    fn cfg(dt: f64, horizon: f64, seed: u64, path: u64) -> SimConfig {
        SimConfig {
            dt,
            horizon,
            master_seed: seed,
            path_index: path,
        }
    }

    fn const_seg(v: f64) -> Segment {
        Segment::constant(1.0, &[v]).unwrap()
    }

    #[test]
    fn equal_initial_segments_stay_identical() {
        let model = make_builtin(BuiltinKind::OuJump, &BuiltinParams::default()).unwrap();
        let xi = const_seg(0.4);
        let run = simulate_coupled(&model, &xi, &xi.clone(), 3.0, &cfg(0.01, 2.0, 101, 0))
            .unwrap();
        assert_eq!(run.x.states(), run.y.states());
        assert_abs_diff_eq!(run.kl().unwrap(), 0.0);
        assert_abs_diff_eq!(run.girsanov_log_weight, 0.0);
        assert_abs_diff_eq!(run.gap0, 0.0);
    }

    #[test]
    fn lambda_zero_preserves_the_marginal_law() {
        let model = make_builtin(BuiltinKind::OuJump, &BuiltinParams::default()).unwrap();
        let xi = const_seg(1.0);
        let eta = const_seg(0.0);
        let horizon = 0.5;
        let base = cfg(0.01, horizon, 103, 0);
        // With lambda = 0 the correction vanishes: Y is exactly the plain
        // path from eta under the shared streams.
        let run = simulate_coupled(&model, &xi, &eta, 0.0, &base).unwrap();
        let plain = simulate(&model, &eta, &base).unwrap();
        assert_eq!(run.y.states(), plain.states());

        // Distributional check against an independent ensemble.
        let coupled_finals =
            simulate_coupled_map(&model, &xi, &eta, 0.0, &base, 10_000, |_, run| {
                run.y.value(horizon)[0]
            })
            .unwrap();
        let indep_base = SimConfig {
            path_index: 5_000_000,
            ..base
        };
        let plain_finals =
            crate::sim::simulate_map(&model, &eta, &indep_base, 10_000, |_, t| {
                t.value(horizon)[0]
            })
            .unwrap();
        let (d, p) = ks_two_sample(&coupled_finals, &plain_finals).unwrap();
        assert!(p > 0.01, "KS D = {d}, p = {p}");
    }

    #[test]
    fn deterministic_gap_decays_at_the_combined_rate() {
        let p = BuiltinParams {
            sigma0: 0.0,
            jump_rate: 0.0,
            ..BuiltinParams::default()
        };
        let model = make_builtin(BuiltinKind::OuJump, &p).unwrap();
        let dt = 1e-3;
        let run =
            simulate_coupled(&model, &const_seg(1.0), &const_seg(0.0), 2.0, &cfg(dt, 1.0, 1, 0))
                .unwrap();
        // d(X - Y) = -(a + lambda)(X - Y) dt = -3 (X - Y) dt.
        let gap_end = (run.x.value(1.0)[0] - run.y.value(1.0)[0]).abs();
        assert!(
            (gap_end - (-3.0_f64).exp()).abs() <= 5.0 * dt,
            "gap(1) = {gap_end}"
        );
        // Strictly decreasing along the path...
        let times = run.x.times().to_vec();
        let mut prev = f64::INFINITY;
        for &t in times.iter().filter(|&&t| t >= 0.0) {
            let g = (run.x.value(t)[0] - run.y.value(t)[0]).abs();
            assert!(g < prev || g == 0.0, "gap not decreasing at t = {t}");
            prev = g;
        }
        // ...and decreasing in lambda at fixed time.
        let stronger =
            simulate_coupled(&model, &const_seg(1.0), &const_seg(0.0), 4.0, &cfg(dt, 1.0, 1, 0))
                .unwrap();
        let gap_stronger = (stronger.x.value(1.0)[0] - stronger.y.value(1.0)[0]).abs();
        assert!(gap_stronger < gap_end);
    }

    #[test]
    fn decay_fit_recovers_the_deterministic_slope() {
        let p = BuiltinParams {
            sigma0: 0.0,
            jump_rate: 0.0,
            ..BuiltinParams::default()
        };
        let model = make_builtin(BuiltinKind::OuJump, &p).unwrap();
        // The window sup over [t - tau, t] keeps seeing the initial gap for
        // t <= tau, so the clean exponential regime starts past the delay.
        let times: Vec<f64> = (1..=8).map(|i| 1.0 + 0.25 * i as f64).collect();
        let fit = estimate_decay(
            &model,
            &const_seg(1.0),
            &const_seg(0.0),
            2.0,
            5.0,
            &times,
            100,
            &cfg(1e-3, 3.0, 7, 0),
        )
        .unwrap();
        // Squared gap decays like e^{-6t}; Euler at dt = 1e-3 shifts the
        // rate to 2 ln(1 - 3 dt)/dt ~ -6.009.
        assert_abs_diff_eq!(fit.fitted_slope, -6.0, epsilon = 0.05);
        assert!(fit.pass_slope);
        assert!(fit.pass_prefactor);
        assert_abs_diff_eq!(fit.kappa, 2.0 * 2.0 - 5.0);

        let degenerate = estimate_decay(
            &model,
            &const_seg(1.0),
            &const_seg(1.0),
            2.0,
            5.0,
            &times,
            100,
            &cfg(1e-3, 3.0, 7, 0),
        );
        assert!(matches!(degenerate, Err(Error::Degenerate(_))));
    }

    #[test]
    fn kl_approaches_one_third_in_the_closed_form_case() {
        // a = 1, lambda = 2, sigma = 1, no jumps: theta = 2 e^{-3t} so
        // KL(T) -> 1/2 * 4 / 6 = 1/3.
        let p = BuiltinParams {
            jump_rate: 0.0,
            ..BuiltinParams::default()
        };
        let model = make_builtin(BuiltinKind::OuJump, &p).unwrap();
        let run = simulate_coupled(
            &model,
            &const_seg(1.0),
            &const_seg(0.0),
            2.0,
            &cfg(2e-3, 3.0, 11, 0),
        )
        .unwrap();
        let kl = run.kl().unwrap();
        assert!(
            (kl - 1.0 / 3.0).abs() <= 0.01 / 3.0,
            "kl = {kl} vs 1/3 (rel err {})",
            (kl - 1.0 / 3.0).abs() * 3.0
        );
        // Shared noise with constant sigma keeps the gap deterministic, so
        // the weight's stochastic part uses a genuinely random integrand
        // only through zeta; still, kl must be exactly reproducible.
        let again = simulate_coupled(
            &model,
            &const_seg(1.0),
            &const_seg(0.0),
            2.0,
            &cfg(2e-3, 3.0, 11, 0),
        )
        .unwrap();
        assert_eq!(run.girsanov_log_weight, again.girsanov_log_weight);
    }

    #[test]
    fn kl_is_additive_and_prefix_deterministic() {
        let model = make_builtin(BuiltinKind::OuJump, &BuiltinParams::default()).unwrap();
        let xi = const_seg(1.0);
        let eta = const_seg(-0.5);
        let short = simulate_coupled(&model, &xi, &eta, 2.0, &cfg(0.01, 1.0, 13, 3)).unwrap();
        let long = simulate_coupled(&model, &xi, &eta, 2.0, &cfg(0.01, 2.0, 13, 3)).unwrap();
        // The longer run extends the shorter one node-for-node.
        let n = short.x.times().len();
        assert_eq!(&long.x.times()[..n], short.x.times());
        assert_eq!(&long.x.states()[..n], short.x.states());
        assert_eq!(&long.y.states()[..n], short.y.states());
        assert_abs_diff_eq!(
            short.kl().unwrap(),
            long.kl_between(0.0, 1.0).unwrap(),
            epsilon = 1e-12
        );
        let parts = long.kl_between(0.0, 1.0).unwrap() + long.kl_between(1.0, 2.0).unwrap();
        let whole = long.kl().unwrap();
        let steps = long.kl_times.len() as f64;
        assert!(
            (parts - whole).abs() <= 1e-9 * steps,
            "split {parts} vs whole {whole}"
        );
    }

    #[test]
    fn doubling_sigma_quarters_the_kl() {
        // Constant sigma cancels from the gap dynamics, so theta scales as
        // 1/sigma0 exactly and the KL functional as 1/sigma0^2.
        let runs: Vec<CoupledRun> = [1.0, 2.0]
            .iter()
            .map(|&s| {
                let p = BuiltinParams {
                    sigma0: s,
                    ..BuiltinParams::default()
                };
                let model = make_builtin(BuiltinKind::OuJump, &p).unwrap();
                simulate_coupled(
                    &model,
                    &const_seg(1.0),
                    &const_seg(0.0),
                    2.0,
                    &cfg(0.01, 1.0, 17, 5),
                )
                .unwrap()
            })
            .collect();
        let ratio = runs[0].kl().unwrap() / runs[1].kl().unwrap();
        assert_abs_diff_eq!(ratio, 4.0, epsilon = 1e-9);
    }

    #[test]
    fn reweighting_reproduces_the_plain_expectation() {
        let model = make_builtin(BuiltinKind::OuJump, &BuiltinParams::default()).unwrap();
        let report = importance_reweight_check(
            &model,
            &const_seg(1.0),
            &const_seg(0.0),
            1.0,
            &cfg(0.01, 0.5, 19, 0),
            &TestFunctional::Identity,
            20_000,
        )
        .unwrap();
        assert!(
            report.z_score.abs() <= 3.0,
            "z = {} ({} vs {})",
            report.z_score,
            report.reweighted,
            report.direct
        );
        assert_eq!(report.truncated, 0);
    }

    #[test]
    fn singular_diffusion_poisons_density_but_not_paths() {
        let p = BuiltinParams {
            sigma0: 0.0,
            jump_rate: 0.0,
            ..BuiltinParams::default()
        };
        let model = make_builtin(BuiltinKind::OuJump, &p).unwrap();
        let run = simulate_coupled(
            &model,
            &const_seg(1.0),
            &const_seg(0.0),
            2.0,
            &cfg(0.01, 1.0, 23, 0),
        )
        .unwrap();
        assert_eq!(run.first_singular, Some(0.0));
        assert!(matches!(run.kl(), Err(Error::SingularDiffusion { .. })));
        assert!(matches!(
            kl_and_tv(&[run.clone()], 1.0),
            Err(Error::SingularDiffusion { .. })
        ));
        // The paths themselves are fine and still decay.
        let gap = (run.x.value(1.0)[0] - run.y.value(1.0)[0]).abs();
        assert!(gap < 0.06);
    }

    #[test]
    fn pinsker_bound_saturates_at_one() {
        let report = KlReport {
            kl: 2.0,
            kl_stderr: 0.0,
            tv_bound: (2.0_f64 / 2.0).sqrt().min(1.0),
            closed_bound: 10.0,
            horizon: 1.0,
        };
        assert_abs_diff_eq!(report.tv_bound, 1.0);
        let runs = vec![];
        assert!(kl_and_tv(&runs, 1.0).is_err());
    }

    #[test]
    fn lambda_search_returns_first_passing_candidate() {
        let p = BuiltinParams {
            sigma0: 0.0,
            jump_rate: 0.0,
            ..BuiltinParams::default()
        };
        let model = make_builtin(BuiltinKind::OuJump, &p).unwrap();
        // alpha = a = 1: the first candidate max(1, 2 alpha) = 2 already
        // certifies slope -2(a + 2) = -6 <= -0.9.
        let lambda = select_lambda(
            &model,
            &const_seg(1.0),
            &const_seg(0.0),
            1.0,
            &cfg(0.01, 2.0, 29, 0),
            1024.0,
        )
        .unwrap();
        assert_abs_diff_eq!(lambda, 2.0);
    }

    #[test]
    fn lambda_search_surfaces_failure_on_stiff_delay_feedback() {
        // Linear delayed feedback with weight 10: the gap obeys
        // d = -(a + lambda) d dt + 10 d(t - tau) dt, whose decay per delay
        // span is capped near ln(lambda / 10). Demanding a rate of 12 then
        // fails for every candidate at or below the cap of 64.
        use std::sync::Arc;
        let model = ModelSpec::custom(
            "linear-delay-feedback",
            1,
            1,
            1.0,
            Arc::new(|seg: &crate::segment::SegmentView<'_>| {
                vec![-seg.at_zero()[0] + 10.0 * seg.eval(-seg.tau())[0]]
            }),
            Arc::new(|_seg: &crate::segment::SegmentView<'_>| DMatrix::from_element(1, 1, 0.0)),
            Arc::new(|_seg: &crate::segment::SegmentView<'_>| 0.0),
            0.0,
            MarkLaw::Atom { value: 0.0 },
            Arc::new(|z: f64| vec![z]),
            Some((vec![0.0], 0.0)),
            22.0,
        )
        .unwrap();
        let err = select_lambda(
            &model,
            &const_seg(1.0),
            &const_seg(0.0),
            12.0,
            &cfg(0.02, 4.0, 31, 0),
            64.0,
        );
        match err {
            Err(Error::SearchFailed(msg)) => {
                assert!(msg.contains("lambda"), "diagnostic missing: {msg}")
            }
            other => panic!("expected search failure, got {other:?}"),
        }
    }

    #[test]
    fn c1_report_composes_and_scales_linearly() {
        let p = BuiltinParams {
            jump_rate: 0.0,
            ..BuiltinParams::default()
        };
        let model = make_builtin(BuiltinKind::OuJump, &p).unwrap();
        let times: Vec<f64> = (1..=6).map(|i| 0.25 * i as f64).collect();
        let pairs = vec![
            (const_seg(1.0), const_seg(0.0)),
            (const_seg(0.5), const_seg(0.0)),
        ];
        let report = condition_c1_report(
            &model,
            &pairs,
            1.0,
            &times,
            &cfg(0.01, 1.5, 37, 0),
            200,
        )
        .unwrap();
        assert!(report.pass, "report failed: {report:?}");
        assert!(report.lambda0 > report.alpha);
        // Halving the initial gap halves theta pointwise (deterministic
        // shared-noise gap), so KL quarters and the TV bound halves.
        let tv_ratio = report.pairs[0].kl.tv_bound / report.pairs[1].kl.tv_bound;
        assert_abs_diff_eq!(tv_ratio, 2.0, epsilon = 1e-6);

        let equal_pair = vec![(const_seg(1.0), const_seg(1.0))];
        assert!(condition_c1_report(
            &model,
            &equal_pair,
            1.0,
            &times,
            &cfg(0.01, 1.5, 37, 0),
            200
        )
        .is_err());
    }
}
