//! Stochastic accept-reject filters and the accept regions they test against.
//!
//! All geometry is measured with a [`StateMetric`], so headings are wrapped
//! before differencing. Cones constrain position coordinates only and assume
//! the position axes share one weight, which holds for every built-in metric.

use std::f64::consts::FRAC_PI_2;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::corridor::index::GridIndex;
use crate::error::{Error, Result};
use crate::sysdyn::{State, StateMetric};

/// Slack used for membership tests so that projected points count as inside.
const MEMBERSHIP_EPS: f64 = 1e-12;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum AcceptRegion {
    /// Solid cone over the position coordinates. Membership requires the axial
    /// offset from the apex to lie in `[0, length]` and the angle to the axis
    /// to be at most `half_angle`; other coordinates are unconstrained.
    Cone {
        apex: State,
        axis: Vec<f64>,
        half_angle: f64,
        length: f64,
    },
    /// Closed ball in the full weighted metric.
    Sphere { center: State, radius: f64 },
    /// Union of closed balls of radius `tolerance` around each point.
    PointSet { points: Vec<State>, tolerance: f64 },
    /// Accepts every state.
    Everything,
}

impl AcceptRegion {
    pub fn validate(&self) -> Result<()> {
        let bad = |msg: &str| Err(Error::Config(msg.to_string()));
        match self {
            AcceptRegion::Cone {
                axis,
                half_angle,
                length,
                ..
            } => {
                let norm = axis.iter().map(|a| a * a).sum::<f64>().sqrt();
                if (norm - 1.0).abs() > 1e-9 {
                    return bad("cone axis must be a unit vector");
                }
                if !(*half_angle > 0.0 && *half_angle <= FRAC_PI_2) {
                    return bad("cone half angle must lie in (0, pi/2]");
                }
                if !(*length > 0.0) {
                    return bad("cone length must be positive");
                }
            }
            AcceptRegion::Sphere { radius, .. } => {
                if !(*radius > 0.0) {
                    return bad("sphere radius must be positive");
                }
            }
            AcceptRegion::PointSet { points, tolerance } => {
                if points.is_empty() {
                    return bad("point set must not be empty");
                }
                if !(*tolerance >= 0.0) {
                    return bad("point set tolerance must be non-negative");
                }
            }
            AcceptRegion::Everything => {}
        }
        Ok(())
    }

    pub fn contains(&self, metric: &StateMetric, x: &[f64]) -> bool {
        match self {
            AcceptRegion::Everything => true,
            AcceptRegion::Sphere { center, radius } => {
                metric.distance(x, center.as_slice()) <= radius + MEMBERSHIP_EPS
            }
            AcceptRegion::PointSet { points, tolerance } => points
                .iter()
                .any(|p| metric.distance(x, p.as_slice()) <= tolerance + MEMBERSHIP_EPS),
            AcceptRegion::Cone { .. } => self.distance(metric, x) <= MEMBERSHIP_EPS,
        }
    }

    /// Closest member of the region to `x`.
    pub fn project(&self, metric: &StateMetric, x: &[f64]) -> State {
        match self {
            AcceptRegion::Everything => State::from(x.to_vec()),
            AcceptRegion::Sphere { center, radius } => project_ball(metric, x, center.as_slice(), *radius),
            AcceptRegion::PointSet { points, tolerance } => {
                let nearest = points
                    .iter()
                    .min_by(|a, b| {
                        metric
                            .distance(x, a.as_slice())
                            .total_cmp(&metric.distance(x, b.as_slice()))
                    })
                    .expect("validated point sets are non-empty");
                project_ball(metric, x, nearest.as_slice(), *tolerance)
            }
            AcceptRegion::Cone {
                apex,
                axis,
                half_angle,
                length,
            } => project_cone(metric, x, apex.as_slice(), axis, *half_angle, *length),
        }
    }

    /// Metric distance from `x` to the region (zero inside).
    pub fn distance(&self, metric: &StateMetric, x: &[f64]) -> f64 {
        match self {
            AcceptRegion::Everything => 0.0,
            AcceptRegion::Sphere { center, radius } => {
                (metric.distance(x, center.as_slice()) - radius).max(0.0)
            }
            AcceptRegion::PointSet { points, tolerance } => points
                .iter()
                .map(|p| (metric.distance(x, p.as_slice()) - tolerance).max(0.0))
                .fold(f64::INFINITY, f64::min),
            AcceptRegion::Cone { .. } => metric.distance(x, self.project(metric, x).as_slice()),
        }
    }
}

/// Moves `x` straight toward `center` until it is on the ball.
fn project_ball(metric: &StateMetric, x: &[f64], center: &[f64], radius: f64) -> State {
    let d = metric.distance(x, center);
    if d <= radius {
        return State::from(x.to_vec());
    }
    let shrink = 1.0 - radius / d;
    State::from(
        (0..x.len())
            .map(|i| x[i] - shrink * metric.delta(x, center, i))
            .collect::<Vec<_>>(),
    )
}

fn project_cone(
    metric: &StateMetric,
    x: &[f64],
    apex: &[f64],
    axis: &[f64],
    half_angle: f64,
    length: f64,
) -> State {
    let k = metric.position_dims;
    let rel: Vec<f64> = (0..k).map(|i| metric.delta(x, apex, i)).collect();
    let a = dot(&rel, axis);
    let perp: Vec<f64> = (0..k).map(|i| rel[i] - a * axis[i]).collect();
    let r = dot(&perp, &perp).sqrt();

    // work in the (axial, radial) half-plane, where the cone is a triangle
    let (a2, r2) = if half_angle >= FRAC_PI_2 {
        (a.clamp(0.0, length), r)
    } else {
        let rim = length * half_angle.tan();
        if a >= 0.0 && a <= length && r <= a * half_angle.tan() {
            (a, r)
        } else {
            let candidates = [
                closest_on_segment((a, r), (0.0, 0.0), (length, rim)),
                closest_on_segment((a, r), (length, 0.0), (length, rim)),
                closest_on_segment((a, r), (0.0, 0.0), (length, 0.0)),
            ];
            candidates
                .into_iter()
                .min_by(|p, q| {
                    let dp = (p.0 - a).hypot(p.1 - r);
                    let dq = (q.0 - a).hypot(q.1 - r);
                    dp.total_cmp(&dq)
                })
                .unwrap()
        }
    };

    let mut out = x.to_vec();
    for i in 0..k {
        let radial = if r > 0.0 { perp[i] / r } else { 0.0 };
        out[i] = x[i] - rel[i] + a2 * axis[i] + r2 * radial;
    }
    State::from(out)
}

fn closest_on_segment(p: (f64, f64), s: (f64, f64), e: (f64, f64)) -> (f64, f64) {
    let d = (e.0 - s.0, e.1 - s.1);
    let len_sq = d.0 * d.0 + d.1 * d.1;
    if len_sq == 0.0 {
        return s;
    }
    let t = (((p.0 - s.0) * d.0 + (p.1 - s.1) * d.1) / len_sq).clamp(0.0, 1.0);
    (s.0 + t * d.0, s.1 + t * d.1)
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Smallest cone with tip at `apex` that holds every point, widened by
/// `margin` (radians for the half angle, metric units for the length).
///
/// The axis is the mean direction from the apex to the points.
pub fn min_cone(metric: &StateMetric, apex: &State, points: &[State], margin: f64) -> Result<AcceptRegion> {
    let k = metric.position_dims;
    if points.is_empty() {
        return Err(Error::Geometry("cannot fit a cone to an empty point set".into()));
    }
    let offsets: Vec<Vec<f64>> = points
        .iter()
        .map(|p| (0..k).map(|i| metric.delta(p.as_slice(), apex.as_slice(), i)).collect())
        .collect();
    let mut axis = vec![0.0; k];
    for (o, n) in offsets.iter().map(|o| (o, dot(o, o).sqrt())) {
        if n > 0.0 {
            for i in 0..k {
                axis[i] += o[i] / n;
            }
        }
    }
    let norm = dot(&axis, &axis).sqrt();
    if !(norm > 1e-12) {
        return Err(Error::Geometry(
            "points surround or coincide with the apex, so no cone axis exists".into(),
        ));
    }
    axis.iter_mut().for_each(|a| *a /= norm);

    let mut widest: f64 = 0.0;
    let mut farthest: f64 = 0.0;
    for o in &offsets {
        let n = dot(o, o).sqrt();
        if n == 0.0 {
            continue;
        }
        widest = widest.max((dot(o, &axis) / n).clamp(-1.0, 1.0).acos());
        farthest = farthest.max(n);
    }
    let region = AcceptRegion::Cone {
        apex: apex.clone(),
        axis,
        half_angle: (widest + margin).min(FRAC_PI_2),
        length: farthest + margin,
    };
    region.validate()?;
    Ok(region)
}

/// Decay rates and neighborhood size for the two filters.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct FilterParams {
    /// Distance decay rate of the exponential filter.
    pub lambda: f64,
    /// Cost decay rate of the length filter.
    pub lambda_c: f64,
    /// Neighborhood radius of the length filter.
    pub d: f64,
}

impl FilterParams {
    pub fn validate(&self) -> Result<()> {
        if self.lambda > 0.0 && self.lambda_c > 0.0 && self.d > 0.0 {
            Ok(())
        } else {
            Err(Error::Config("filter lambda, lambda_c and d must all be positive".into()))
        }
    }
}

/// Exponential accept-reject test.
///
/// One uniform draw `beta` in `[0, lambda)` is taken on every call, so the
/// random stream advances identically whether or not `x` is in the region.
/// Points outside survive when `beta <= lambda * exp(-lambda * d)`, which
/// happens with probability `exp(-lambda * d)`.
pub fn exp_filter<R: Rng + ?Sized>(
    metric: &StateMetric,
    x: &[f64],
    region: &AcceptRegion,
    lambda: f64,
    rng: &mut R,
) -> bool {
    let beta = lambda * rng.gen::<f64>();
    if region.contains(metric, x) {
        return true;
    }
    let d = region.distance(metric, x);
    beta <= lambda * (-lambda * d).exp()
}

/// Anything with a state and a non-negative cost.
pub trait Scored {
    fn state(&self) -> &[f64];
    fn cost(&self) -> f64;
}

impl Scored for (State, f64) {
    fn state(&self) -> &[f64] {
        self.0.as_slice()
    }

    fn cost(&self) -> f64 {
        self.1
    }
}

/// Cost-biased thinning of crowded neighborhoods.
///
/// Items are visited from cheapest to most expensive. Each surviving item
/// gives every surviving neighbor within `d` an independent chance of removal
/// equal to `1 - exp(-lambda_c * cost)`. Survivors keep their input order.
pub fn length_filter<T, R>(items: Vec<T>, metric: &StateMetric, lambda_c: f64, d: f64, rng: &mut R) -> Vec<T>
where
    T: Scored,
    R: Rng + ?Sized,
{
    if items.len() < 2 {
        return items;
    }
    let index = GridIndex::new(metric.clone(), items.iter().map(|s| s.state()), d);
    let mut order: Vec<usize> = (0..items.len()).collect();
    order.sort_by(|&a, &b| items[a].cost().total_cmp(&items[b].cost()));
    let mut alive = vec![true; items.len()];
    for &i in &order {
        if !alive[i] {
            continue;
        }
        for j in index.within(items[i].state(), d) {
            if j == i || !alive[j] {
                continue;
            }
            let beta = lambda_c * rng.gen::<f64>();
            if beta > lambda_c * (-lambda_c * items[j].cost()).exp() {
                alive[j] = false;
            }
        }
    }
    items
        .into_iter()
        .zip(alive)
        .filter_map(|(item, keep)| keep.then_some(item))
        .collect()
}
