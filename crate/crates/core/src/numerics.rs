//! Deterministic numerical utilities: adaptive Gauss–Legendre quadrature and
//! a bracketed root-finder for increasing functions.
//!
//! These back the convergence-rate formula in [`crate::ergodicity`], where
//! `F(x) = integral_1^x du / f(u)` must be evaluated and inverted to high
//! accuracy for user-supplied rate functions `f`.

use crate::{Error, Result};
use std::sync::OnceLock;

/// Hard cap on quadrature panels; a request that wants more is diverging or
/// the integrand is too rough for the tolerance.
const MAX_PANELS: usize = 20_000;

/// Maximum bisection depth of one panel.
const MAX_DEPTH: u32 = 60;

/// Computes the `n`-point Gauss–Legendre nodes and weights on `[-1, 1]` by
/// Newton iteration on the Legendre recurrence. Accurate to machine
/// precision for the small `n` used here.
fn gauss_legendre(n: usize) -> (Vec<f64>, Vec<f64>) {
    let mut nodes = vec![0.0; n];
    let mut weights = vec![0.0; n];
    for i in 0..n {
        // Tricomi-style initial guess for the i-th root of P_n.
        let mut x = (std::f64::consts::PI * (i as f64 + 0.75) / (n as f64 + 0.5)).cos();
        for _ in 0..100 {
            // Evaluate P_n and P_{n-1} by the three-term recurrence.
            let mut p0 = 1.0;
            let mut p1 = x;
            for k in 1..n {
                let p2 = ((2 * k + 1) as f64 * x * p1 - k as f64 * p0) / (k + 1) as f64;
                p0 = p1;
                p1 = p2;
            }
            let dp = n as f64 * (x * p1 - p0) / (x * x - 1.0);
            let step = p1 / dp;
            x -= step;
            if step.abs() <= 1e-15 {
                break;
            }
        }
        let mut p0 = 1.0;
        let mut p1 = x;
        for k in 1..n {
            let p2 = ((2 * k + 1) as f64 * x * p1 - k as f64 * p0) / (k + 1) as f64;
            p0 = p1;
            p1 = p2;
        }
        let dp = n as f64 * (x * p1 - p0) / (x * x - 1.0);
        nodes[i] = x;
        weights[i] = 2.0 / ((1.0 - x * x) * dp * dp);
    }
    (nodes, weights)
}

fn rule_10() -> &'static (Vec<f64>, Vec<f64>) {
    static RULE: OnceLock<(Vec<f64>, Vec<f64>)> = OnceLock::new();
    RULE.get_or_init(|| gauss_legendre(10))
}

fn rule_20() -> &'static (Vec<f64>, Vec<f64>) {
    static RULE: OnceLock<(Vec<f64>, Vec<f64>)> = OnceLock::new();
    RULE.get_or_init(|| gauss_legendre(20))
}

/// One panel under a fixed rule; errors if the integrand is non-finite at a
/// node.
fn panel<F: Fn(f64) -> f64>(
    f: &F,
    a: f64,
    b: f64,
    rule: &(Vec<f64>, Vec<f64>),
) -> Result<f64> {
    let c = 0.5 * (a + b);
    let h = 0.5 * (b - a);
    let mut sum = 0.0;
    for (&x, &w) in rule.0.iter().zip(&rule.1) {
        let u = c + h * x;
        let v = f(u);
        if !v.is_finite() {
            return Err(Error::Degenerate(format!(
                "integrand is not finite at u = {u}"
            )));
        }
        sum += w * v;
    }
    Ok(h * sum)
}

fn adapt<F: Fn(f64) -> f64>(
    f: &F,
    a: f64,
    b: f64,
    tol: f64,
    depth: u32,
    used: &mut usize,
) -> Result<f64> {
    *used += 1;
    if *used > MAX_PANELS {
        return Err(Error::NoConvergence(format!(
            "quadrature exceeded {MAX_PANELS} panels; integrand too rough for the tolerance"
        )));
    }
    let q10 = panel(f, a, b, rule_10())?;
    let q20 = panel(f, a, b, rule_20())?;
    let err = (q20 - q10).abs();
    // Second clause: the disagreement is at rounding level relative to the
    // panel value, so subdividing cannot improve it.
    if err <= tol || err <= 16.0 * f64::EPSILON * q20.abs() {
        return Ok(q20);
    }
    if depth >= MAX_DEPTH {
        return Err(Error::NoConvergence(format!(
            "quadrature panel [{a}, {b}] did not converge at depth {MAX_DEPTH}"
        )));
    }
    // Panels spanning many octaves split at the geometric mean, which gives
    // both halves comparable resolving power for integrands that vary on a
    // log scale (the midpoint would waste one depth level per octave and
    // exhaust the depth budget on domains like [1, 1e40]).
    let m = if a > 0.0 && b >= 4.0 * a {
        a.sqrt() * b.sqrt()
    } else if b < 0.0 && a <= 4.0 * b {
        -((-a).sqrt() * (-b).sqrt())
    } else {
        0.5 * (a + b)
    };
    let left = adapt(f, a, m, 0.5 * tol, depth + 1, used)?;
    let right = adapt(f, m, b, 0.5 * tol, depth + 1, used)?;
    Ok(left + right)
}

/// Adaptive quadrature of `f` over `[a, b]` to absolute tolerance `tol`.
///
/// Each panel is evaluated with 10- and 20-point Gauss–Legendre rules; a
/// panel whose disagreement exceeds its share of the tolerance is bisected,
/// with the budget split between the halves. Reversed limits negate the
/// result. The returned value is the 20-point total over accepted panels, so
/// smooth integrands typically come back far more accurate than `tol`.
pub fn integrate<F: Fn(f64) -> f64>(f: F, a: f64, b: f64, tol: f64) -> Result<f64> {
    if !a.is_finite() || !b.is_finite() {
        return Err(Error::InvalidConfig(format!(
            "integration limits must be finite, got [{a}, {b}]"
        )));
    }
    if !(tol > 0.0) || !tol.is_finite() {
        return Err(Error::InvalidConfig(format!(
            "quadrature tolerance must be positive, got {tol}"
        )));
    }
    if a == b {
        return Ok(0.0);
    }
    let (lo, hi, sign) = if a < b { (a, b, 1.0) } else { (b, a, -1.0) };
    let mut used = 0usize;
    Ok(sign * adapt(&f, lo, hi, tol, 0, &mut used)?)
}

/// Iteration cap for bracket expansion and for the refinement loop.
const MAX_ROOT_ITERS: usize = 200;

/// Solves `g(x) = target` for an increasing `g`, returning `x` with
/// `|g(x) - target| <= tol`.
///
/// The bracket starts at `[lo, max(hi_hint, lo + 1)]` and its right end
/// doubles away from `lo` until `g` reaches the target. Refinement
/// interleaves secant steps (clamped into the bracket interior) with plain
/// bisection, so convergence is guaranteed and usually superlinear. A target
/// below `g(lo)` is an error: the domain edge is the caller's contract.
pub fn invert_increasing<G: Fn(f64) -> Result<f64>>(
    g: G,
    target: f64,
    lo: f64,
    hi_hint: f64,
    tol: f64,
) -> Result<f64> {
    if !target.is_finite() || !lo.is_finite() {
        return Err(Error::InvalidConfig(format!(
            "root search needs finite target and lower edge, got {target} at {lo}"
        )));
    }
    if !(tol > 0.0) || !tol.is_finite() {
        return Err(Error::InvalidConfig(format!(
            "root tolerance must be positive, got {tol}"
        )));
    }
    let mut lo = lo;
    let mut glo = g(lo)?;
    if (glo - target).abs() <= tol {
        return Ok(lo);
    }
    if glo > target {
        return Err(Error::Degenerate(format!(
            "target {target} lies below the function value {glo} at the domain edge {lo}"
        )));
    }
    let mut hi = hi_hint.max(lo + 1.0);
    let mut ghi = g(hi)?;
    let mut expansions = 0;
    while ghi < target {
        expansions += 1;
        if expansions > MAX_ROOT_ITERS {
            return Err(Error::NoConvergence(format!(
                "bracket expansion reached x = {hi} without attaining target {target}"
            )));
        }
        let width = hi - lo;
        hi = lo + 2.0 * width;
        if !hi.is_finite() {
            return Err(Error::NoConvergence(format!(
                "bracket expansion overflowed while chasing target {target}"
            )));
        }
        ghi = g(hi)?;
    }
    if (ghi - target).abs() <= tol {
        return Ok(hi);
    }
    for iter in 0..MAX_ROOT_ITERS {
        // Secant proposal on even iterations, midpoint on odd ones; both are
        // clamped strictly inside the bracket so the bracket always shrinks.
        let mid = 0.5 * (lo + hi);
        let x = if iter % 2 == 0 && ghi > glo {
            let s = lo + (target - glo) * (hi - lo) / (ghi - glo);
            let margin = 0.05 * (hi - lo);
            s.clamp(lo + margin, hi - margin)
        } else {
            mid
        };
        let gx = g(x)?;
        if (gx - target).abs() <= tol {
            return Ok(x);
        }
        if gx < target {
            lo = x;
            glo = gx;
        } else {
            hi = x;
            ghi = gx;
        }
        if hi - lo <= f64::EPSILON * (1.0 + lo.abs() + hi.abs()) {
            return Err(Error::NoConvergence(format!(
                "bracket collapsed at x = {mid} with residual {}",
                (gx - target).abs()
            )));
        }
    }
    Err(Error::NoConvergence(format!(
        "root refinement did not reach tolerance {tol} for target {target}"
    )))
}
