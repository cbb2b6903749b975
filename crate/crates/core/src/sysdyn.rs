//! System dynamics, piecewise-constant controls and fixed-step RK4 simulation.
//!
//! Time follows the convention that every trajectory ends at `t = 0`. A
//! control sequence of total duration `T` is therefore defined on `[-T, 0]`,
//! with its first primitive applied at `-T` and its last one active at `0`.
//! Backward integration runs the reversed vector field from the final state,
//! consuming the segments in reverse order.

use std::f64::consts::PI;
use std::ops::Index;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Default integration step in seconds.
pub const DEFAULT_DT: f64 = 0.01;

/// Steps shorter than this are merged into the preceding step.
const STEP_EPS: f64 = 1e-12;

/// Wraps an angle into `(-pi, pi]`.
pub fn wrap_angle(a: f64) -> f64 {
    let mut w = a.rem_euclid(2.0 * PI);
    if w > PI {
        w -= 2.0 * PI;
    }
    w
}

/// A point in state space. Periodic coordinates are stored unwrapped.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct State(Vec<f64>);

impl State {
    pub fn new(coords: Vec<f64>) -> Self {
        State(coords)
    }

    pub fn dim(&self) -> usize {
        self.0.len()
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }

    pub fn as_mut_slice(&mut self) -> &mut [f64] {
        &mut self.0
    }

    pub fn into_vec(self) -> Vec<f64> {
        self.0
    }

    pub fn is_finite(&self) -> bool {
        self.0.iter().all(|c| c.is_finite())
    }
}

impl Index<usize> for State {
    type Output = f64;

    fn index(&self, i: usize) -> &f64 {
        &self.0[i]
    }
}

impl From<Vec<f64>> for State {
    fn from(v: Vec<f64>) -> Self {
        State(v)
    }
}

impl<const N: usize> From<[f64; N]> for State {
    fn from(v: [f64; N]) -> Self {
        State(v.to_vec())
    }
}

/// Weighted Euclidean metric with optional periodic (angular) coordinates.
///
/// Periodic coordinates are differenced after wrapping into `(-pi, pi]`. The
/// first `position_dims` coordinates are the ones geometric regions (cones,
/// position grids) operate on.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StateMetric {
    pub weights: Vec<f64>,
    pub periodic: Vec<bool>,
    pub position_dims: usize,
}

impl StateMetric {
    pub fn euclidean(dim: usize) -> Self {
        StateMetric {
            weights: vec![1.0; dim],
            periodic: vec![false; dim],
            position_dims: dim,
        }
    }

    /// `(px, py, theta)` with the heading wrapped and scaled by `heading_weight`.
    pub fn dubins(heading_weight: f64) -> Self {
        StateMetric {
            weights: vec![1.0, 1.0, heading_weight],
            periodic: vec![false, false, true],
            position_dims: 2,
        }
    }

    pub fn dim(&self) -> usize {
        self.weights.len()
    }

    /// Unweighted coordinate difference `a - b`, wrapped on periodic axes.
    pub fn delta(&self, a: &[f64], b: &[f64], i: usize) -> f64 {
        let d = a[i] - b[i];
        if self.periodic[i] {
            wrap_angle(d)
        } else {
            d
        }
    }

    pub fn distance_sq(&self, a: &[f64], b: &[f64]) -> f64 {
        (0..self.dim())
            .map(|i| {
                let d = self.weights[i] * self.delta(a, b, i);
                d * d
            })
            .sum()
    }

    pub fn distance(&self, a: &[f64], b: &[f64]) -> f64 {
        self.distance_sq(a, b).sqrt()
    }

    /// Weighted distance over every coordinate except `skip`.
    pub fn distance_excluding(&self, a: &[f64], b: &[f64], skip: usize) -> f64 {
        (0..self.dim())
            .filter(|&i| i != skip)
            .map(|i| {
                let d = self.weights[i] * self.delta(a, b, i);
                d * d
            })
            .sum::<f64>()
            .sqrt()
    }

    pub fn position_distance(&self, a: &[f64], b: &[f64]) -> f64 {
        (0..self.position_dims)
            .map(|i| {
                let d = self.weights[i] * self.delta(a, b, i);
                d * d
            })
            .sum::<f64>()
            .sqrt()
    }
}

/// A time-invariant control-affine or general system `x' = f(x, u)` with a
/// scalar control.
pub trait Dynamics: Send + Sync {
    fn dim(&self) -> usize;

    /// The finite set of admissible control primitives.
    fn primitives(&self) -> &[f64];

    /// Closed interval of admissible control values.
    fn control_bounds(&self) -> (f64, f64);

    fn vector_field(&self, x: &[f64], u: f64, dx: &mut [f64]);

    fn metric(&self) -> StateMetric;

    /// Column names used when states are written to CSV.
    fn state_names(&self) -> Vec<String> {
        (0..self.dim()).map(|i| format!("x{i}")).collect()
    }
}

/// Unit-speed planar car with bounded turn rate, state `(px, py, theta)`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Dubins {
    pub speed: f64,
    pub max_turn: f64,
    pub heading_weight: f64,
    primitives: Vec<f64>,
}

impl Dubins {
    pub fn new(speed: f64, max_turn: f64, heading_weight: f64) -> Self {
        Dubins {
            speed,
            max_turn,
            heading_weight,
            primitives: vec![-max_turn, 0.0, max_turn],
        }
    }
}

impl Default for Dubins {
    fn default() -> Self {
        Dubins::new(1.0, 1.0, 1.0)
    }
}

impl Dynamics for Dubins {
    fn dim(&self) -> usize {
        3
    }

    fn primitives(&self) -> &[f64] {
        &self.primitives
    }

    fn control_bounds(&self) -> (f64, f64) {
        (-self.max_turn, self.max_turn)
    }

    fn vector_field(&self, x: &[f64], u: f64, dx: &mut [f64]) {
        dx[0] = self.speed * x[2].cos();
        dx[1] = self.speed * x[2].sin();
        dx[2] = u;
    }

    fn metric(&self) -> StateMetric {
        StateMetric::dubins(self.heading_weight)
    }

    fn state_names(&self) -> Vec<String> {
        vec!["px".into(), "py".into(), "theta".into()]
    }
}

/// Piecewise-constant control: primitive `u^j` held for `tau^j` seconds.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct ControlSequence {
    primitives: Vec<f64>,
    durations: Vec<f64>,
}

impl ControlSequence {
    pub fn new(primitives: Vec<f64>, durations: Vec<f64>) -> Result<Self> {
        if primitives.len() != durations.len() {
            return Err(Error::InvalidSequence(format!(
                "{} primitives but {} durations",
                primitives.len(),
                durations.len()
            )));
        }
        if let Some(d) = durations.iter().find(|d| !d.is_finite() || **d < 0.0) {
            return Err(Error::InvalidSequence(format!("bad duration {d}")));
        }
        if let Some(u) = primitives.iter().find(|u| !u.is_finite()) {
            return Err(Error::InvalidSequence(format!("bad primitive {u}")));
        }
        Ok(ControlSequence {
            primitives,
            durations,
        })
    }

    pub fn empty() -> Self {
        ControlSequence::default()
    }

    pub fn primitives(&self) -> &[f64] {
        &self.primitives
    }

    pub fn durations(&self) -> &[f64] {
        &self.durations
    }

    pub fn len(&self) -> usize {
        self.primitives.len()
    }

    pub fn is_empty(&self) -> bool {
        self.primitives.is_empty()
    }

    pub fn total_duration(&self) -> f64 {
        self.durations.iter().sum()
    }

    /// Segments as `(primitive, duration)` pairs in forward order.
    pub fn segments(&self) -> impl DoubleEndedIterator<Item = (f64, f64)> + '_ {
        self.primitives
            .iter()
            .copied()
            .zip(self.durations.iter().copied())
    }

    /// Start time of each segment on `[-T, 0]`.
    pub fn segment_starts(&self) -> Vec<f64> {
        let mut starts = vec![0.0; self.len()];
        let mut acc = 0.0;
        for j in (0..self.len()).rev() {
            acc += self.durations[j];
            starts[j] = -acc;
        }
        starts
    }

    /// Whether every primitive lies in `[lo, hi]`.
    pub fn within_bounds(&self, lo: f64, hi: f64) -> bool {
        self.primitives.iter().all(|u| *u >= lo && *u <= hi)
    }

    pub fn concat(&self, other: &ControlSequence) -> ControlSequence {
        let mut primitives = self.primitives.clone();
        primitives.extend_from_slice(&other.primitives);
        let mut durations = self.durations.clone();
        durations.extend_from_slice(&other.durations);
        ControlSequence {
            primitives,
            durations,
        }
    }

    /// The part of the control active on `[t, 0]`, re-anchored so that it
    /// still ends at time zero.
    pub fn tail_from(&self, t: f64) -> ControlSequence {
        let starts = self.segment_starts();
        let mut primitives = Vec::new();
        let mut durations = Vec::new();
        for j in 0..self.len() {
            let end = starts[j] + self.durations[j];
            let lo = starts[j].max(t);
            if end > lo {
                primitives.push(self.primitives[j]);
                durations.push(end - lo);
            }
        }
        ControlSequence {
            primitives,
            durations,
        }
    }
}

/// Evaluates `u(t)` for `t` in `[-T, 0]`.
///
/// Segment `j` owns `[s_j, s_{j+1})` and the last segment owns `[s_K, 0]`,
/// so a switch instant belongs to the later primitive. Zero-length segments
/// own nothing, except that `t = 0` always maps to the final primitive.
pub fn eval_control(seq: &ControlSequence, t: f64) -> Result<f64> {
    let total = seq.total_duration();
    if seq.is_empty() || t.is_nan() || t > 0.0 || t < -total {
        return Err(Error::Domain { t, lo: -total });
    }
    let starts = seq.segment_starts();
    let k = seq.len();
    for j in (0..k).rev() {
        let nonempty = j == k - 1 || seq.durations[j] > 0.0;
        if nonempty && starts[j] <= t {
            return Ok(seq.primitives[j]);
        }
    }
    // t == -T with every segment before the last one empty
    Ok(seq.primitives[k - 1])
}

/// `sum_j C(u^j) tau^j`.
pub fn sequence_cost<F: Fn(f64) -> f64>(seq: &ControlSequence, cost_fn: F) -> f64 {
    seq.segments().map(|(u, tau)| cost_fn(u) * tau).sum()
}

/// Minimum-time running cost `C(u) = 1`.
pub fn unit_cost(_u: f64) -> f64 {
    1.0
}

/// Sampled solution. `states[i]` is the state at `times[i]`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Trajectory {
    pub times: Vec<f64>,
    pub states: Vec<State>,
}

impl Trajectory {
    pub fn len(&self) -> usize {
        self.states.len()
    }

    pub fn is_empty(&self) -> bool {
        self.states.is_empty()
    }

    pub fn start(&self) -> &State {
        &self.states[0]
    }

    pub fn end(&self) -> &State {
        self.states.last().expect("trajectory has at least one sample")
    }

    pub fn duration(&self) -> f64 {
        match (self.times.first(), self.times.last()) {
            (Some(a), Some(b)) => b - a,
            _ => 0.0,
        }
    }
}

struct Rk4 {
    k1: Vec<f64>,
    k2: Vec<f64>,
    k3: Vec<f64>,
    k4: Vec<f64>,
    tmp: Vec<f64>,
}

impl Rk4 {
    fn new(n: usize) -> Self {
        Rk4 {
            k1: vec![0.0; n],
            k2: vec![0.0; n],
            k3: vec![0.0; n],
            k4: vec![0.0; n],
            tmp: vec![0.0; n],
        }
    }

    fn step(&mut self, model: &dyn Dynamics, x: &mut [f64], u: f64, h: f64, sign: f64) {
        let n = x.len();
        model.vector_field(x, u, &mut self.k1);
        for i in 0..n {
            self.tmp[i] = x[i] + 0.5 * h * sign * self.k1[i];
        }
        model.vector_field(&self.tmp, u, &mut self.k2);
        for i in 0..n {
            self.tmp[i] = x[i] + 0.5 * h * sign * self.k2[i];
        }
        model.vector_field(&self.tmp, u, &mut self.k3);
        for i in 0..n {
            self.tmp[i] = x[i] + h * sign * self.k3[i];
        }
        model.vector_field(&self.tmp, u, &mut self.k4);
        for i in 0..n {
            x[i] += sign * h / 6.0 * (self.k1[i] + 2.0 * self.k2[i] + 2.0 * self.k3[i] + self.k4[i]);
        }
    }
}

/// Core stepping loop over `(u, tau)` segments.
///
/// `emit(elapsed, x)` is called for the initial state and after every step.
/// Steps are split at segment boundaries and at every elapsed time listed
/// in `stops` (ascending).
fn march<F>(
    model: &dyn Dynamics,
    x0: &[f64],
    segments: &[(f64, f64)],
    dt: f64,
    sign: f64,
    stops: &[f64],
    mut emit: F,
) -> Result<Vec<f64>>
where
    F: FnMut(f64, &[f64]),
{
    if !(dt > 0.0) {
        return Err(Error::Argument(format!("integration step must be positive, got {dt}")));
    }
    if x0.len() != model.dim() {
        return Err(Error::Argument(format!(
            "state has dimension {}, model expects {}",
            x0.len(),
            model.dim()
        )));
    }
    let mut x = x0.to_vec();
    let mut rk = Rk4::new(x.len());
    let mut elapsed = 0.0;
    let mut next_stop = 0;
    emit(elapsed, &x);
    for &(u, tau) in segments {
        if tau <= 0.0 {
            continue;
        }
        let seg_end = elapsed + tau;
        while elapsed < seg_end {
            while next_stop < stops.len() && stops[next_stop] <= elapsed + STEP_EPS {
                next_stop += 1;
            }
            let mut target = (elapsed + dt).min(seg_end);
            if next_stop < stops.len() && stops[next_stop] < target {
                target = stops[next_stop];
            }
            if seg_end - target < STEP_EPS {
                target = seg_end;
            }
            let h = target - elapsed;
            rk.step(model, &mut x, u, h, sign);
            elapsed = if target == seg_end { seg_end } else { target };
            if x.iter().any(|c| !c.is_finite()) {
                return Err(Error::Integration { t: elapsed });
            }
            emit(elapsed, &x);
        }
    }
    Ok(x)
}

fn forward_segments(seq: &ControlSequence) -> Vec<(f64, f64)> {
    seq.segments().collect()
}

fn backward_segments(seq: &ControlSequence) -> Vec<(f64, f64)> {
    seq.segments().rev().collect()
}

/// Integrates `x' = f(x, u(t))` over `[-T, 0]` from `x(-T) = x0`.
pub fn integrate_forward(
    model: &dyn Dynamics,
    x0: &State,
    seq: &ControlSequence,
    dt: f64,
) -> Result<Trajectory> {
    let total = seq.total_duration();
    let mut times = Vec::new();
    let mut states = Vec::new();
    march(model, x0.as_slice(), &forward_segments(seq), dt, 1.0, &[], |s, x| {
        times.push(s - total);
        states.push(State::from(x.to_vec()));
    })?;
    Ok(Trajectory { times, states })
}

/// Integrates the reversed system `x' = -f(x, u)` from `x_T`, consuming the
/// segments last-to-first. `times` holds elapsed backward time, so the final
/// sample is the state from which `seq` drives the forward system to `x_T`.
pub fn integrate_backward(
    model: &dyn Dynamics,
    x_t: &State,
    seq: &ControlSequence,
    dt: f64,
) -> Result<Trajectory> {
    let mut times = Vec::new();
    let mut states = Vec::new();
    march(model, x_t.as_slice(), &backward_segments(seq), dt, -1.0, &[], |s, x| {
        times.push(s);
        states.push(State::from(x.to_vec()));
    })?;
    Ok(Trajectory { times, states })
}

/// Final state of [`integrate_forward`] without storing samples.
pub fn propagate_forward(
    model: &dyn Dynamics,
    x0: &State,
    seq: &ControlSequence,
    dt: f64,
) -> Result<State> {
    march(model, x0.as_slice(), &forward_segments(seq), dt, 1.0, &[], |_, _| {}).map(State::from)
}

/// Final state of [`integrate_backward`] without storing samples.
pub fn propagate_backward(
    model: &dyn Dynamics,
    x_t: &State,
    seq: &ControlSequence,
    dt: f64,
) -> Result<State> {
    march(model, x_t.as_slice(), &backward_segments(seq), dt, -1.0, &[], |_, _| {})
        .map(State::from)
}

/// Forward solution evaluated exactly at `times` (ascending, within `[-T, 0]`).
/// Steps are split at each requested time, so no interpolation is involved.
pub fn sample_forward(
    model: &dyn Dynamics,
    x0: &State,
    seq: &ControlSequence,
    dt: f64,
    times: &[f64],
) -> Result<Vec<State>> {
    let total = seq.total_duration();
    let stops: Vec<f64> = times.iter().map(|t| t + total).collect();
    let mut out = Vec::with_capacity(times.len());
    let mut next = 0;
    march(model, x0.as_slice(), &forward_segments(seq), dt, 1.0, &stops, |s, x| {
        while next < stops.len() && (stops[next] - s).abs() <= 1e-9 {
            out.push(State::from(x.to_vec()));
            next += 1;
        }
    })?;
    if out.len() != times.len() {
        return Err(Error::Argument(format!(
            "requested {} sample times but only {} fall on [-{total}, 0]",
            times.len(),
            out.len()
        )));
    }
    Ok(out)
}
