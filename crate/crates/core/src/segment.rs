//! Segments of cadlag paths over a delay window and metrics between them.
//!
//! A [`Segment`] stores a path over `[-tau, 0]` as samples on a strictly
//! increasing grid together with explicit left limits at marked jump indices.
//! Between stored points the path is evaluated by last-value (step)
//! interpolation; linear interpolation is never used, so values are never
//! invented across a jump.
//!
//! Two metrics are provided: the uniform distance [`sup_distance`] and a
//! certified *upper bound* on the Skorohod J1 distance, [`skorohod_upper`],
//! obtained by minimizing over a finite family of piecewise-linear time
//! changes. The upper bound is symmetric and never exceeds the uniform
//! distance, but it is not guaranteed to satisfy the triangle inequality.

use std::collections::BTreeMap;

use crate::{Error, Result};

/// Absolute tolerance used when matching grid times.
pub const TIME_TOL: f64 = 1e-12;

/// Looser tolerance for locating a delay-window edge inside a long stored
/// trajectory: absolute times are built as `k * dt` products, whose rounding
/// at horizons of ~1e4 time units exceeds [`TIME_TOL`] but stays far below
/// any step size.
pub(crate) const WINDOW_TOL: f64 = 1e-9;

/// Absolute componentwise tolerance for segment value equality.
pub const VALUE_TOL: f64 = 1e-12;

/// A cadlag path over the delay window `[-tau, 0]`.
///
/// Values are stored flat in grid-point-major order: the (right-continuous)
/// state at `grid[i]` occupies `values[i*dim..(i+1)*dim]`. If index `i`
/// carries an entry in `pre_values` the path jumps at `grid[i]` and the entry
/// is its left limit there. At unmarked grid points the path is treated as
/// continuous, so its left limit is the stored value itself.
#[derive(Debug, Clone, PartialEq)]
pub struct Segment {
    tau: f64,
    dim: usize,
    grid: Vec<f64>,
    values: Vec<f64>,
    pre_values: BTreeMap<usize, Vec<f64>>,
}

impl Segment {
    /// Builds a segment after validating the grid and dimensions.
    pub fn new(
        tau: f64,
        grid: Vec<f64>,
        values: Vec<Vec<f64>>,
        pre_values: BTreeMap<usize, Vec<f64>>,
    ) -> Result<Self> {
        if values.is_empty() {
            return Err(Error::InvalidConfig(
                "segment grid needs at least the two endpoints".into(),
            ));
        }
        let dim = values[0].len();
        if values.iter().any(|v| v.len() != dim) {
            return Err(Error::DimensionMismatch(
                "segment values have inconsistent dimension".into(),
            ));
        }
        let flat: Vec<f64> = values.into_iter().flatten().collect();
        Self::from_flat(tau, grid, flat, dim, pre_values)
    }

    /// Builds a segment from flat grid-point-major values (`dim` scalars per
    /// grid point).
    pub fn from_flat(
        tau: f64,
        grid: Vec<f64>,
        values: Vec<f64>,
        dim: usize,
        pre_values: BTreeMap<usize, Vec<f64>>,
    ) -> Result<Self> {
        if !(tau > 0.0) || !tau.is_finite() {
            return Err(Error::InvalidConfig(format!(
                "delay length must be positive and finite, got {tau}"
            )));
        }
        if grid.len() < 2 {
            return Err(Error::InvalidConfig(
                "segment grid needs at least the two endpoints".into(),
            ));
        }
        if dim == 0 {
            return Err(Error::DimensionMismatch("segment values are empty".into()));
        }
        if grid.len() * dim != values.len() {
            return Err(Error::DimensionMismatch(format!(
                "grid has {} points but {} scalars were given for dimension {dim}",
                grid.len(),
                values.len()
            )));
        }
        if (grid[0] + tau).abs() > TIME_TOL || grid[grid.len() - 1].abs() > TIME_TOL {
            return Err(Error::InvalidConfig(format!(
                "segment grid must span [-tau, 0] = [{}, 0], got [{}, {}]",
                -tau,
                grid[0],
                grid[grid.len() - 1]
            )));
        }
        if grid.windows(2).any(|w| w[1] - w[0] <= TIME_TOL) {
            return Err(Error::InvalidConfig(
                "segment grid must be strictly increasing".into(),
            ));
        }
        for (&idx, pre) in &pre_values {
            if idx == 0 || idx >= grid.len() {
                return Err(Error::InvalidConfig(format!(
                    "jump mark at grid index {idx} is outside 1..{}",
                    grid.len()
                )));
            }
            if pre.len() != dim {
                return Err(Error::DimensionMismatch(format!(
                    "pre-jump value at index {idx} has dimension {} instead of {dim}",
                    pre.len()
                )));
            }
        }
        if values.iter().any(|v| !v.is_finite())
            || pre_values.values().flatten().any(|v| !v.is_finite())
        {
            return Err(Error::InvalidConfig(
                "segment values must all be finite".into(),
            ));
        }
        Ok(Self {
            tau,
            dim,
            grid,
            values,
            pre_values,
        })
    }

    /// A constant segment identically equal to `value`.
    pub fn constant(tau: f64, value: &[f64]) -> Result<Self> {
        Self::new(
            tau,
            vec![-tau, 0.0],
            vec![value.to_vec(), value.to_vec()],
            BTreeMap::new(),
        )
    }

    /// Delay length of the window.
    pub fn tau(&self) -> f64 {
        self.tau
    }

    /// State dimension.
    pub fn dim(&self) -> usize {
        self.dim
    }

    /// Stored grid of window offsets, from `-tau` to `0`.
    pub fn grid(&self) -> &[f64] {
        &self.grid
    }

    /// Stored (right-continuous) values, flat in grid-point-major order.
    pub fn values(&self) -> &[f64] {
        &self.values
    }

    /// Stored value at grid index `i`.
    pub fn value_at(&self, i: usize) -> &[f64] {
        &self.values[i * self.dim..(i + 1) * self.dim]
    }

    /// Iterates the stored values one grid point at a time.
    pub fn rows(&self) -> impl Iterator<Item = &[f64]> {
        self.values.chunks_exact(self.dim)
    }

    /// Left limits at jump-marked grid indices.
    pub fn pre_values(&self) -> &BTreeMap<usize, Vec<f64>> {
        &self.pre_values
    }

    /// Offsets of the marked jumps, ascending.
    pub fn jump_offsets(&self) -> Vec<f64> {
        self.pre_values.keys().map(|&i| self.grid[i]).collect()
    }

    /// Index of the last grid point at or before `theta` (within [`TIME_TOL`]).
    fn floor_index(&self, theta: f64) -> usize {
        floor_index(&self.grid, theta)
    }

    /// Cadlag evaluation at `theta` in `[-tau, 0]`.
    pub fn eval(&self, theta: f64) -> &[f64] {
        self.value_at(self.floor_index(theta))
    }

    /// Left limit at `theta`: the marked pre-jump value if `theta` is a jump,
    /// the stored value at a continuous grid point, the step value otherwise.
    pub fn eval_left(&self, theta: f64) -> &[f64] {
        let idx = self.floor_index(theta);
        if (self.grid[idx] - theta).abs() <= TIME_TOL {
            if let Some(pre) = self.pre_values.get(&idx) {
                return pre;
            }
        }
        self.value_at(idx)
    }

    /// Uniform norm: the largest Euclidean state norm attained over the
    /// window, including pre-jump values.
    pub fn sup_norm(&self) -> f64 {
        let over_values = self.rows().map(euclidean).fold(0.0_f64, f64::max);
        let over_pres = self
            .pre_values
            .values()
            .map(|v| euclidean(v))
            .fold(0.0_f64, f64::max);
        over_values.max(over_pres)
    }

    /// The segment as seen immediately before its reference time: the value
    /// at offset `0` is replaced by its left limit and the mark there (if
    /// any) is dropped. Jumps strictly inside the window are history and
    /// remain part of the path.
    pub fn left_limit(&self) -> Segment {
        let last = self.grid.len() - 1;
        let mut values = self.values.clone();
        let mut pre_values = self.pre_values.clone();
        if let Some(pre) = pre_values.remove(&last) {
            values[last * self.dim..].copy_from_slice(&pre);
        }
        Segment {
            tau: self.tau,
            dim: self.dim,
            grid: self.grid.clone(),
            values,
            pre_values,
        }
    }

    /// Resamples the segment onto `grid` by cadlag evaluation. Jump marks are
    /// kept at grid points that coincide with a marked offset; marks falling
    /// strictly between new grid points are absorbed by step interpolation.
    pub fn regrid(&self, grid: &[f64]) -> Result<Segment> {
        let mut values = Vec::with_capacity(grid.len() * self.dim);
        for &t in grid {
            values.extend_from_slice(self.eval(t));
        }
        let mut pre_values = BTreeMap::new();
        for (&idx, pre) in &self.pre_values {
            let t = self.grid[idx];
            if let Some(k) = exact_index(grid, t) {
                if k > 0 {
                    pre_values.insert(k, pre.clone());
                }
            }
        }
        Segment::from_flat(self.tau, grid.to_vec(), values, self.dim, pre_values)
    }

    /// Borrowed view used by coefficient functionals.
    pub fn as_view(&self) -> SegmentView<'_> {
        SegmentView {
            t_ref: 0.0,
            tau: self.tau,
            dim: self.dim,
            times: &self.grid,
            states: &self.values,
            pre_values: &self.pre_values,
            lo: 0,
            hi: self.grid.len() - 1,
        }
    }

    /// Writes the segment as columnar CSV with a header row
    /// `theta,v_1..v_n,is_jump,pre_v_1..pre_v_n`, floats printed with 17
    /// significant digits, rows ascending in `theta`.
    pub fn to_csv(&self) -> String {
        let mut out = String::new();
        out.push_str("theta");
        for i in 1..=self.dim {
            out.push_str(&format!(",v_{i}"));
        }
        out.push_str(",is_jump");
        for i in 1..=self.dim {
            out.push_str(&format!(",pre_v_{i}"));
        }
        out.push('\n');
        for (idx, (&theta, value)) in self.grid.iter().zip(self.rows()).enumerate() {
            out.push_str(&crate::fmt_g17(theta));
            for v in value {
                out.push(',');
                out.push_str(&crate::fmt_g17(*v));
            }
            match self.pre_values.get(&idx) {
                Some(pre) => {
                    out.push_str(",1");
                    for v in pre {
                        out.push(',');
                        out.push_str(&crate::fmt_g17(*v));
                    }
                }
                None => {
                    out.push_str(",0");
                    for _ in 0..self.dim {
                        out.push(',');
                    }
                }
            }
            out.push('\n');
        }
        out
    }

    /// Parses a segment from the CSV layout produced by [`Segment::to_csv`].
    pub fn from_csv(text: &str) -> Result<Segment> {
        let mut lines = text.lines();
        let header = lines
            .next()
            .ok_or_else(|| Error::Parse("empty segment CSV".into()))?;
        let cols: Vec<&str> = header.split(',').collect();
        if cols.len() < 4 || cols[0] != "theta" || (cols.len() - 2) % 2 != 0 {
            return Err(Error::Parse(format!("unrecognized segment header `{header}`")));
        }
        let dim = (cols.len() - 2) / 2;
        let mut grid = Vec::new();
        let mut values = Vec::new();
        let mut pre_values = BTreeMap::new();
        for (row, line) in lines.enumerate() {
            if line.is_empty() {
                continue;
            }
            let fields: Vec<&str> = line.split(',').collect();
            if fields.len() != cols.len() {
                return Err(Error::Parse(format!(
                    "segment CSV row {row} has {} fields, expected {}",
                    fields.len(),
                    cols.len()
                )));
            }
            let theta = parse_f64(fields[0])?;
            let value: Vec<f64> = fields[1..1 + dim]
                .iter()
                .map(|s| parse_f64(s))
                .collect::<Result<_>>()?;
            grid.push(theta);
            values.push(value);
            match fields[1 + dim] {
                "0" => {}
                "1" => {
                    let pre: Vec<f64> = fields[2 + dim..]
                        .iter()
                        .map(|s| parse_f64(s))
                        .collect::<Result<_>>()?;
                    pre_values.insert(grid.len() - 1, pre);
                }
                other => {
                    return Err(Error::Parse(format!(
                        "segment CSV row {row}: is_jump must be 0 or 1, got `{other}`"
                    )));
                }
            }
        }
        let tau = -grid.first().copied().unwrap_or(0.0);
        Segment::new(tau, grid, values, pre_values)
    }
}

fn parse_f64(s: &str) -> Result<f64> {
    s.parse::<f64>()
        .map_err(|_| Error::Parse(format!("bad float `{s}`")))
}

fn euclidean(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

/// Index of the last element of `times` at or before `t` (within [`TIME_TOL`]).
pub(crate) fn floor_index(times: &[f64], t: f64) -> usize {
    let k = times.partition_point(|&u| u <= t + TIME_TOL);
    k.saturating_sub(1)
}

/// Index of the element of `grid` equal to `t` within [`TIME_TOL`], if any.
fn exact_index(grid: &[f64], t: f64) -> Option<usize> {
    let idx = floor_index(grid, t);
    ((grid[idx] - t).abs() <= TIME_TOL).then_some(idx)
}

/// A borrowed window of a stored path, presented as a segment over
/// `[-tau, 0]` anchored at reference time `t_ref`.
///
/// Coefficient functionals receive this type; it evaluates without copying
/// the underlying trajectory arrays.
#[derive(Debug, Clone, Copy)]
pub struct SegmentView<'a> {
    t_ref: f64,
    tau: f64,
    dim: usize,
    times: &'a [f64],
    /// Flat states in time-major order, `dim` scalars per node.
    states: &'a [f64],
    pre_values: &'a BTreeMap<usize, Vec<f64>>,
    lo: usize,
    hi: usize,
}

impl<'a> SegmentView<'a> {
    /// Builds a view over `times[lo..=hi]`, re-anchored so that the window
    /// `[t_ref - tau, t_ref]` maps to offsets `[-tau, 0]`. `times[lo]` must be
    /// at or before `t_ref - tau` and `times[hi]` at or before `t_ref`.
    pub(crate) fn from_parts(
        t_ref: f64,
        tau: f64,
        dim: usize,
        times: &'a [f64],
        states: &'a [f64],
        pre_values: &'a BTreeMap<usize, Vec<f64>>,
        lo: usize,
        hi: usize,
    ) -> Self {
        debug_assert!(lo <= hi && hi < times.len());
        debug_assert!(states.len() == times.len() * dim);
        debug_assert!(times[lo] <= t_ref - tau + WINDOW_TOL);
        Self {
            t_ref,
            tau,
            dim,
            times,
            states,
            pre_values,
            lo,
            hi,
        }
    }

    fn row(&self, idx: usize) -> &'a [f64] {
        &self.states[idx * self.dim..(idx + 1) * self.dim]
    }

    /// Delay length of the window.
    pub fn tau(&self) -> f64 {
        self.tau
    }

    /// State dimension.
    pub fn dim(&self) -> usize {
        self.dim
    }

    fn floor_index(&self, theta: f64) -> usize {
        let t = self.t_ref + theta.clamp(-self.tau, 0.0);
        let window = &self.times[self.lo..=self.hi];
        self.lo + floor_index(window, t)
    }

    /// Cadlag evaluation at window offset `theta` in `[-tau, 0]`.
    pub fn eval(&self, theta: f64) -> &'a [f64] {
        self.row(self.floor_index(theta))
    }

    /// Left limit at window offset `theta`.
    pub fn eval_left(&self, theta: f64) -> &'a [f64] {
        let idx = self.floor_index(theta);
        if (self.times[idx] - (self.t_ref + theta)).abs() <= TIME_TOL {
            if let Some(pre) = self.pre_values.get(&idx) {
                return pre;
            }
        }
        self.row(idx)
    }

    /// Value at the window's right edge (offset `0`).
    pub fn at_zero(&self) -> &'a [f64] {
        self.row(self.hi)
    }

    /// Uniform norm over the window, including pre-jump values inside it.
    pub fn sup_norm(&self) -> f64 {
        let mut sup = 0.0_f64;
        for idx in self.lo..=self.hi {
            sup = sup.max(euclidean(self.row(idx)));
        }
        let left_edge = self.t_ref - self.tau;
        for (&idx, pre) in self.pre_values.range(self.lo + 1..=self.hi) {
            if self.times[idx] > left_edge + TIME_TOL {
                sup = sup.max(euclidean(pre));
            }
        }
        sup
    }

    /// Copies the window out into an owned [`Segment`].
    pub fn to_segment(&self) -> Result<Segment> {
        let left_edge = self.t_ref - self.tau;
        let dim = self.dim;
        let mut grid: Vec<f64> = Vec::new();
        let mut values: Vec<f64> = Vec::new();
        let mut pre_values: BTreeMap<usize, Vec<f64>> = BTreeMap::new();
        // Appends one grid point; nodes landing within tolerance of the
        // previous offset (edge clamping can collapse spacing) are merged:
        // the latest value wins and the earliest left limit is kept.
        let push = |grid: &mut Vec<f64>,
                    values: &mut Vec<f64>,
                    pre_values: &mut BTreeMap<usize, Vec<f64>>,
                    offset: f64,
                    row: &[f64],
                    pre: Option<&Vec<f64>>| {
            if let Some(&last) = grid.last() {
                if offset <= last + TIME_TOL {
                    let base = (grid.len() - 1) * dim;
                    values[base..].copy_from_slice(row);
                    if let Some(p) = pre {
                        pre_values.entry(grid.len() - 1).or_insert_with(|| p.clone());
                    }
                    return;
                }
            }
            grid.push(offset);
            values.extend_from_slice(row);
            if let Some(p) = pre {
                pre_values.insert(grid.len() - 1, p.clone());
            }
        };
        if self.times[self.lo] < left_edge - TIME_TOL {
            push(
                &mut grid,
                &mut values,
                &mut pre_values,
                -self.tau,
                self.row(self.lo),
                None,
            );
        }
        for idx in self.lo..=self.hi {
            let t = self.times[idx];
            if t < left_edge - TIME_TOL {
                continue;
            }
            let pre = self
                .pre_values
                .get(&idx)
                .filter(|_| t > left_edge + TIME_TOL);
            push(
                &mut grid,
                &mut values,
                &mut pre_values,
                (t - self.t_ref).max(-self.tau),
                self.row(idx),
                pre,
            );
        }
        if self.times[self.hi] < self.t_ref - TIME_TOL {
            push(
                &mut grid,
                &mut values,
                &mut pre_values,
                0.0,
                self.row(self.hi),
                None,
            );
        } else if let Some(last) = grid.last_mut() {
            // Snap the right edge exactly onto offset zero.
            *last = 0.0;
        }
        if let Some(first) = grid.first_mut() {
            *first = -self.tau;
        }
        // Left-edge marks introduced by merging are meaningless: the limit
        // from outside the window is not part of it.
        pre_values.remove(&0);
        Segment::from_flat(self.tau, grid, values, self.dim, pre_values)
    }
}

/// Checks that two segments describe the same path: componentwise agreement
/// within `tol` on the merged grid, including left limits at jump marks.
pub fn segments_equal(a: &Segment, b: &Segment, tol: f64) -> bool {
    if a.dim != b.dim || (a.tau - b.tau).abs() > TIME_TOL {
        return false;
    }
    for &theta in merged_grid(a, b).iter() {
        let right = max_abs_diff(a.eval(theta), b.eval(theta));
        let left = max_abs_diff(a.eval_left(theta), b.eval_left(theta));
        if right > tol || left > tol {
            return false;
        }
    }
    true
}

fn max_abs_diff(x: &[f64], y: &[f64]) -> f64 {
    x.iter()
        .zip(y)
        .map(|(a, b)| (a - b).abs())
        .fold(0.0_f64, f64::max)
}

fn merged_grid(a: &Segment, b: &Segment) -> Vec<f64> {
    let mut ts: Vec<f64> = a.grid.iter().chain(b.grid.iter()).copied().collect();
    ts.sort_by(|x, y| x.total_cmp(y));
    ts.dedup_by(|x, y| (*x - *y).abs() <= TIME_TOL);
    ts
}

/// Uniform distance between two segments over the same window.
///
/// Both paths are evaluated on the merged grid by cadlag interpolation; at
/// every merged point the left limits are compared as well, so pre-jump
/// values on either side contribute. Errors if the windows or dimensions
/// differ.
pub fn sup_distance(a: &Segment, b: &Segment) -> Result<f64> {
    if a.dim != b.dim {
        return Err(Error::DimensionMismatch(format!(
            "segments have dimensions {} and {}",
            a.dim, b.dim
        )));
    }
    if (a.tau - b.tau).abs() > TIME_TOL {
        return Err(Error::DimensionMismatch(format!(
            "segments have delay lengths {} and {}",
            a.tau, b.tau
        )));
    }
    let mut sup = 0.0_f64;
    for &theta in merged_grid(a, b).iter() {
        sup = sup.max(euclidean_diff(a.eval(theta), b.eval(theta)));
        sup = sup.max(euclidean_diff(a.eval_left(theta), b.eval_left(theta)));
    }
    Ok(sup)
}

fn euclidean_diff(x: &[f64], y: &[f64]) -> f64 {
    x.iter()
        .zip(y)
        .map(|(a, b)| (a - b) * (a - b))
        .sum::<f64>()
        .sqrt()
}

/// A strictly increasing piecewise-linear time change of `[-tau, 0]` onto
/// itself, fixing both endpoints.
#[derive(Debug, Clone)]
pub struct TimeChange {
    /// Knot positions, starting at `-tau` and ending at `0`.
    knots: Vec<f64>,
    /// Knot images, starting at `-tau` and ending at `0`.
    images: Vec<f64>,
}

impl TimeChange {
    /// The identity time change.
    pub fn identity(tau: f64) -> Self {
        Self {
            knots: vec![-tau, 0.0],
            images: vec![-tau, 0.0],
        }
    }

    /// Builds a time change sending each `knot` to its paired `image`. Pairs
    /// must be strictly inside `(-tau, 0)`; returns `None` unless both
    /// coordinate sequences are strictly increasing.
    pub fn from_pairs(tau: f64, pairs: &[(f64, f64)]) -> Option<Self> {
        let mut knots = vec![-tau];
        let mut images = vec![-tau];
        for &(k, v) in pairs {
            if k <= -tau + TIME_TOL || k >= -TIME_TOL || v <= -tau + TIME_TOL || v >= -TIME_TOL {
                return None;
            }
            knots.push(k);
            images.push(v);
        }
        knots.push(0.0);
        images.push(0.0);
        let increasing =
            |xs: &[f64]| xs.windows(2).all(|w| w[1] - w[0] > TIME_TOL);
        (increasing(&knots) && increasing(&images)).then_some(Self { knots, images })
    }

    /// `sup |log slope|` over the pieces; for piecewise-linear changes this
    /// equals the time-dilation functional of the Skorohod metric.
    pub fn log_dilation(&self) -> f64 {
        self.knots
            .windows(2)
            .zip(self.images.windows(2))
            .map(|(k, v)| ((v[1] - v[0]) / (k[1] - k[0])).ln().abs())
            .fold(0.0_f64, f64::max)
    }

    /// Evaluates the time change at `theta`.
    pub fn apply(&self, theta: f64) -> f64 {
        piecewise_linear(&self.knots, &self.images, theta)
    }

    /// Evaluates the inverse time change at `u`; exact at knot images.
    pub fn invert(&self, u: f64) -> f64 {
        piecewise_linear(&self.images, &self.knots, u)
    }
}

fn piecewise_linear(xs: &[f64], ys: &[f64], x: f64) -> f64 {
    let idx = floor_index(xs, x).min(xs.len() - 2);
    if (xs[idx] - x).abs() <= TIME_TOL {
        return ys[idx];
    }
    if (xs[idx + 1] - x).abs() <= TIME_TOL {
        return ys[idx + 1];
    }
    let w = (x - xs[idx]) / (xs[idx + 1] - xs[idx]);
    ys[idx] + w * (ys[idx + 1] - ys[idx])
}

/// Options for [`skorohod_upper`].
#[derive(Debug, Clone)]
pub struct SkorohodOpts {
    /// Largest number of jump times matched per segment (candidates grow
    /// combinatorially beyond this).
    pub k_max: usize,
    /// Number of refinement offsets tried on each side of a matched image.
    pub refine: usize,
}

impl Default for SkorohodOpts {
    fn default() -> Self {
        Self { k_max: 4, refine: 2 }
    }
}

/// Certified upper bound on the Skorohod J1 distance between two segments.
///
/// Minimizes `log-dilation + uniform distance after warping` over a finite
/// candidate family of piecewise-linear time changes: the identity, all
/// order-preserving matchings of up to `k_max` jump times of one segment
/// onto the other, and a local refinement grid around single matches. The
/// result is symmetrized over the argument order. It never exceeds
/// [`sup_distance`], and is zero for equal segments, but the triangle
/// inequality is not guaranteed.
pub fn skorohod_upper(a: &Segment, b: &Segment, opts: &SkorohodOpts) -> Result<f64> {
    let direct = sup_distance(a, b)?;
    let mut best = direct;
    for (x, y) in [(a, b), (b, a)] {
        for tc in candidate_time_changes(x, y, opts) {
            let dil = tc.log_dilation();
            if dil >= best {
                continue;
            }
            let warped = warp(x, &tc);
            let d = sup_distance(&warped, y)?;
            best = best.min(dil + d);
        }
    }
    Ok(best)
}

/// The warped segment `theta -> x(lambda(theta))`: grid points move to their
/// preimages, values and jump marks are carried along.
fn warp(x: &Segment, tc: &TimeChange) -> Segment {
    let mut grid: Vec<f64> = x.grid.iter().map(|&u| tc.invert(u)).collect();
    // Pin the endpoints; interior points stay strictly inside by monotonicity.
    grid[0] = -x.tau;
    let last = grid.len() - 1;
    grid[last] = 0.0;
    Segment {
        tau: x.tau,
        dim: x.dim,
        grid,
        values: x.values.clone(),
        pre_values: x.pre_values.clone(),
    }
}

/// Candidate time changes for warping `x` onto `y`: knots at jump times of
/// `y`, images at jump times of `x`, so that matched jumps align exactly.
fn candidate_time_changes(x: &Segment, y: &Segment, opts: &SkorohodOpts) -> Vec<TimeChange> {
    let tau = x.tau;
    let images_pool = top_jump_offsets(x, opts.k_max);
    let knots_pool = top_jump_offsets(y, opts.k_max);
    let mut out = Vec::new();
    let k_cap = opts.k_max.min(images_pool.len()).min(knots_pool.len());
    for k in 1..=k_cap {
        for knots in index_subsets(knots_pool.len(), k) {
            for images in index_subsets(images_pool.len(), k) {
                let pairs: Vec<(f64, f64)> = knots
                    .iter()
                    .zip(&images)
                    .map(|(&ki, &vi)| (knots_pool[ki], images_pool[vi]))
                    .collect();
                if let Some(tc) = TimeChange::from_pairs(tau, &pairs) {
                    out.push(tc);
                }
            }
        }
    }
    // Local refinement around single matches.
    let h = tau / 64.0;
    for &knot in &knots_pool {
        for &image in &images_pool {
            for step in 1..=opts.refine as i64 {
                for sign in [-1.0, 1.0] {
                    let shifted = image + sign * step as f64 * h;
                    if let Some(tc) = TimeChange::from_pairs(tau, &[(knot, shifted)]) {
                        out.push(tc);
                    }
                }
            }
        }
    }
    out
}

/// Up to `k_max` jump offsets of `s`, picked by largest jump size, returned
/// in ascending time order. Offsets at the window edges are unusable as
/// time-change pairs and are skipped.
fn top_jump_offsets(s: &Segment, k_max: usize) -> Vec<f64> {
    let mut jumps: Vec<(f64, f64)> = s
        .pre_values
        .iter()
        .filter(|&(&idx, _)| {
            s.grid[idx] > -s.tau + TIME_TOL && s.grid[idx] < -TIME_TOL
        })
        .map(|(&idx, pre)| {
            let size = euclidean_diff(s.value_at(idx), pre);
            (s.grid[idx], size)
        })
        .collect();
    jumps.sort_by(|a, b| b.1.total_cmp(&a.1));
    jumps.truncate(k_max);
    let mut offsets: Vec<f64> = jumps.into_iter().map(|(t, _)| t).collect();
    offsets.sort_by(|a, b| a.total_cmp(b));
    offsets
}

/// All ascending index subsets of `0..n` of size `k`.
fn index_subsets(n: usize, k: usize) -> Vec<Vec<usize>> {
    let mut out = Vec::new();
    let mut cur = Vec::with_capacity(k);
    fn rec(start: usize, n: usize, k: usize, cur: &mut Vec<usize>, out: &mut Vec<Vec<usize>>) {
        if cur.len() == k {
            out.push(cur.clone());
            return;
        }
        for i in start..n {
            cur.push(i);
            rec(i + 1, n, k, cur, out);
            cur.pop();
        }
    }
    rec(0, n, k, &mut cur, &mut out);
    out
}
