//! Exact minimum-time values for the unit Dubins car.
//!
//! [`dubins_distance`] evaluates the six candidate words in closed form.
//! [`brute_force_search`] is an independent grid search over three-segment
//! `{L, S, R}` words that only uses the primitive motion equations; tests use
//! it to cross-check the analytic solver.

use std::f64::consts::TAU;
use std::fmt;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::sysdyn::{wrap_angle, ControlSequence, State, StateMetric};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Word {
    LSL,
    RSR,
    LSR,
    RSL,
    RLR,
    LRL,
}

impl Word {
    pub const ALL: [Word; 6] = [Word::LSL, Word::RSR, Word::LSR, Word::RSL, Word::RLR, Word::LRL];

    /// Turn-rate sign of each segment: `L = +1`, `S = 0`, `R = -1`.
    pub fn controls(self) -> [f64; 3] {
        match self {
            Word::LSL => [1.0, 0.0, 1.0],
            Word::RSR => [-1.0, 0.0, -1.0],
            Word::LSR => [1.0, 0.0, -1.0],
            Word::RSL => [-1.0, 0.0, 1.0],
            Word::RLR => [-1.0, 1.0, -1.0],
            Word::LRL => [1.0, -1.0, 1.0],
        }
    }
}

impl fmt::Display for Word {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{self:?}")
    }
}

/// A shortest path for the unit-speed, unit-turn-rate car.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DubinsPath {
    pub word: Word,
    /// Segment lengths in meters (equal to seconds and, on arcs, radians).
    pub segment_lengths: [f64; 3],
    pub total: f64,
}

impl DubinsPath {
    /// The open-loop control that realizes the path.
    pub fn to_control(&self) -> ControlSequence {
        ControlSequence::new(self.word.controls().to_vec(), self.segment_lengths.to_vec())
            .expect("path segments are finite and non-negative")
    }
}

fn mod2pi(a: f64) -> f64 {
    let m = a.rem_euclid(TAU);
    // a full turn from rounding is really no turn at all
    if TAU - m < 1e-10 {
        0.0
    } else {
        m
    }
}

struct Frame {
    alpha: f64,
    beta: f64,
    d: f64,
}

// Words whose straight or middle arc vanishes sit exactly on a feasibility
// boundary, where rounding alone can push the test the wrong way.
const FEASIBILITY_SLACK: f64 = 1e-10;

fn feasible_square(p_sq: f64) -> Option<f64> {
    (p_sq >= -FEASIBILITY_SLACK).then(|| p_sq.max(0.0))
}

fn feasible_cosine(c: f64) -> Option<f64> {
    (c.abs() <= 1.0 + FEASIBILITY_SLACK).then(|| c.clamp(-1.0, 1.0))
}

fn candidate(word: Word, f: &Frame) -> Option<[f64; 3]> {
    let (sa, sb) = (f.alpha.sin(), f.beta.sin());
    let (ca, cb) = (f.alpha.cos(), f.beta.cos());
    let c_ab = (f.alpha - f.beta).cos();
    let d = f.d;
    let d_sq = d * d;
    match word {
        Word::LSL => {
            let p_sq = 2.0 + d_sq - 2.0 * c_ab + 2.0 * d * (sa - sb);
            let p_sq = feasible_square(p_sq)?;
            let tmp = (cb - ca).atan2(d + sa - sb);
            Some([mod2pi(tmp - f.alpha), p_sq.sqrt(), mod2pi(f.beta - tmp)])
        }
        Word::RSR => {
            let p_sq = 2.0 + d_sq - 2.0 * c_ab + 2.0 * d * (sb - sa);
            let p_sq = feasible_square(p_sq)?;
            let tmp = (ca - cb).atan2(d - sa + sb);
            Some([mod2pi(f.alpha - tmp), p_sq.sqrt(), mod2pi(tmp - f.beta)])
        }
        Word::LSR => {
            let p_sq = -2.0 + d_sq + 2.0 * c_ab + 2.0 * d * (sa + sb);
            let p_sq = feasible_square(p_sq)?;
            let p = p_sq.sqrt();
            let tmp = (-ca - cb).atan2(d + sa + sb) - (-2.0f64).atan2(p);
            Some([mod2pi(tmp - f.alpha), p, mod2pi(tmp - f.beta)])
        }
        Word::RSL => {
            let p_sq = -2.0 + d_sq + 2.0 * c_ab - 2.0 * d * (sa + sb);
            let p_sq = feasible_square(p_sq)?;
            let p = p_sq.sqrt();
            let tmp = (ca + cb).atan2(d - sa - sb) - 2.0f64.atan2(p);
            Some([mod2pi(f.alpha - tmp), p, mod2pi(f.beta - tmp)])
        }
        Word::RLR => {
            let tmp = (6.0 - d_sq + 2.0 * c_ab + 2.0 * d * (sa - sb)) / 8.0;
            let tmp = feasible_cosine(tmp)?;
            let phi = (ca - cb).atan2(d - sa + sb);
            let p = mod2pi(TAU - tmp.acos());
            let t = mod2pi(f.alpha - phi + mod2pi(p / 2.0));
            Some([t, p, mod2pi(f.alpha - f.beta - t + p)])
        }
        Word::LRL => {
            let tmp = (6.0 - d_sq + 2.0 * c_ab + 2.0 * d * (sb - sa)) / 8.0;
            let tmp = feasible_cosine(tmp)?;
            let phi = (ca - cb).atan2(d + sa - sb);
            let p = mod2pi(TAU - tmp.acos());
            let t = mod2pi(-f.alpha - phi + p / 2.0);
            Some([t, p, mod2pi(f.beta - f.alpha - t + p)])
        }
    }
}

/// Shortest path with turning radius `rho` (unit speed).
pub fn shortest_path(from: &State, to: &State, rho: f64) -> DubinsPath {
    let dx = to[0] - from[0];
    let dy = to[1] - from[1];
    let d = dx.hypot(dy) / rho;
    let theta = if d > 0.0 { mod2pi(dy.atan2(dx)) } else { 0.0 };
    let frame = Frame {
        alpha: mod2pi(from[2] - theta),
        beta: mod2pi(to[2] - theta),
        d,
    };
    let mut best: Option<DubinsPath> = None;
    for word in Word::ALL {
        if let Some(params) = candidate(word, &frame) {
            let lengths = params.map(|p| p * rho);
            let total = lengths.iter().sum::<f64>();
            if best.as_ref().map_or(true, |b| total < b.total) {
                best = Some(DubinsPath {
                    word,
                    segment_lengths: lengths,
                    total,
                });
            }
        }
    }
    // LSL and RSR are always feasible, so some word is found
    best.expect("at least one Dubins word is feasible")
}

/// Minimum time from `from` to `to` for the unit car, with the realizing path.
pub fn dubins_distance(from: &State, to: &State) -> (f64, DubinsPath) {
    let path = shortest_path(from, to, 1.0);
    (path.total, path)
}

/// Exact endpoint of holding turn rate `u` for `tau` seconds at unit speed.
pub fn primitive_motion(x: [f64; 3], u: f64, tau: f64) -> [f64; 3] {
    if u == 0.0 {
        [x[0] + tau * x[2].cos(), x[1] + tau * x[2].sin(), x[2]]
    } else {
        let th = x[2] + u * tau;
        [
            x[0] + (th.sin() - x[2].sin()) / u,
            x[1] - (th.cos() - x[2].cos()) / u,
            th,
        ]
    }
}

/// Result of the exhaustive grid search.
#[derive(Clone, Debug, PartialEq)]
pub struct GridPath {
    pub controls: [f64; 3],
    pub durations: [f64; 3],
    pub total: f64,
    pub endpoint: State,
}

impl GridPath {
    pub fn to_control(&self) -> ControlSequence {
        ControlSequence::new(self.controls.to_vec(), self.durations.to_vec())
            .expect("grid durations are non-negative")
    }
}

const PRIMS: [f64; 3] = [1.0, 0.0, -1.0];

/// Exhaustive search over `{L, S, R}^3` with segment durations on a grid of
/// pitch `grid`, returning the shortest sequence whose endpoint lies within
/// `tol` of `to` under the Dubins metric with unit heading weight.
///
/// Turns are searched up to a full revolution and straights up to the
/// Euclidean gap plus the largest lateral offset two unit turns can add.
/// For the last segment only durations that can land within `tol` are
/// visited; every other grid value is provably outside the goal ball.
pub fn brute_force_search(from: &State, to: &State, tol: f64, grid: f64) -> Result<GridPath> {
    if !(tol > 0.0) || !(grid > 0.0) {
        return Err(Error::Argument("tolerance and grid must be positive".into()));
    }
    let metric = StateMetric::dubins(1.0);
    let start = [from[0], from[1], from[2]];
    let goal = [to[0], to[1], to[2]];
    if metric.distance(&start, &goal) <= tol {
        return Ok(GridPath {
            controls: [0.0; 3],
            durations: [0.0; 3],
            total: 0.0,
            endpoint: from.clone(),
        });
    }
    let gap = (goal[0] - start[0]).hypot(goal[1] - start[1]);
    let max_turn_k = (TAU / grid).floor() as usize;
    let max_straight_k = ((gap + 4.0 + tol) / grid).ceil() as usize;
    let max_k = |u: f64| if u == 0.0 { max_straight_k } else { max_turn_k };

    let mut best: Option<GridPath> = None;
    for u1 in PRIMS {
        for k1 in 0..=max_k(u1) {
            let t1 = k1 as f64 * grid;
            if best.as_ref().is_some_and(|b| t1 >= b.total) {
                break;
            }
            let s1 = primitive_motion(start, u1, t1);
            // unit speed: the rest of the path is at least as long as the gap
            if best.as_ref().is_some_and(|b| t1 + remaining_lower_bound(s1, goal, tol) >= b.total) {
                continue;
            }
            for u2 in PRIMS {
                for k2 in 0..=max_k(u2) {
                    let t2 = k2 as f64 * grid;
                    if best.as_ref().is_some_and(|b| t1 + t2 >= b.total) {
                        break;
                    }
                    let s2 = primitive_motion(s1, u2, t2);
                    if best
                        .as_ref()
                        .is_some_and(|b| t1 + t2 + remaining_lower_bound(s2, goal, tol) >= b.total)
                    {
                        continue;
                    }
                    for u3 in PRIMS {
                        for k3 in last_segment_window(s2, goal, u3, tol, grid, max_k(u3)) {
                            let t3 = k3 as f64 * grid;
                            let total = t1 + t2 + t3;
                            if best.as_ref().is_some_and(|b| total >= b.total) {
                                continue;
                            }
                            let end = primitive_motion(s2, u3, t3);
                            if metric.distance(&end, &goal) <= tol {
                                best = Some(GridPath {
                                    controls: [u1, u2, u3],
                                    durations: [t1, t2, t3],
                                    total,
                                    endpoint: State::from(end.to_vec()),
                                });
                            }
                        }
                    }
                }
            }
        }
    }
    best.ok_or(Error::NotFound)
}

fn remaining_lower_bound(s: [f64; 3], goal: [f64; 3], tol: f64) -> f64 {
    ((goal[0] - s[0]).hypot(goal[1] - s[1]) - tol).max(0.0)
}

/// Grid indices of the final segment that can possibly end inside the goal
/// ball: the heading must match within `tol`, and for a straight segment the
/// travelled distance must match the along-track gap within `tol`.
fn last_segment_window(
    s: [f64; 3],
    goal: [f64; 3],
    u: f64,
    tol: f64,
    grid: f64,
    max_k: usize,
) -> Vec<usize> {
    let clamp = |lo: f64, hi: f64| -> std::ops::RangeInclusive<usize> {
        let lo = (lo / grid).ceil().max(0.0);
        let hi = (hi / grid).floor().min(max_k as f64);
        if hi < lo {
            #[allow(clippy::reversed_empty_ranges)]
            return 1..=0;
        }
        lo as usize..=hi as usize
    };
    let mut ks = Vec::new();
    if u == 0.0 {
        if wrap_angle(s[2] - goal[2]).abs() > tol {
            return ks;
        }
        let along = (goal[0] - s[0]) * s[2].cos() + (goal[1] - s[1]) * s[2].sin();
        ks.extend(clamp(along - tol, along + tol));
    } else {
        let base = (u * (goal[2] - s[2])).rem_euclid(TAU);
        for centre in [base - TAU, base, base + TAU] {
            ks.extend(clamp(centre - tol, centre + tol));
        }
        ks.sort_unstable();
        ks.dedup();
    }
    ks
}

/// Shortest grid-search duration; see [`brute_force_search`].
pub fn brute_force_time(from: &State, to: &State, tol: f64, grid: f64) -> Result<f64> {
    brute_force_search(from, to, tol, grid).map(|p| p.total)
}

/// Heading difference helper used by reports: `|wrap(a - b)|`.
pub fn heading_gap(a: f64, b: f64) -> f64 {
    wrap_angle(a - b).abs()
}
