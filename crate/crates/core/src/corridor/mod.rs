//! Value corridor built from converged samples.
//!
//! Each sample's forward trajectory is cut into evenly spaced instants. The
//! state at time `t <= 0` gets the value `-t`, the remaining time of a control
//! that certainly reaches the target, so every stored value is an upper bound
//! on the true time-to-reach. The gradient of the value is read off the cloud
//! with per-axis finite differences inside a cylinder around the query.

pub mod index;

use std::io::{Read, Write};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::sysdyn::{sample_forward, ControlSequence, Dynamics, State, StateMetric};
use crate::training::Sample;
use index::GridIndex;

/// Bucket width of the neighbor index, in metric units.
const INDEX_CELL: f64 = 0.5;

/// Largest multiple of the requested cylinder radius tried before giving up.
pub const MAX_RADIUS_FACTOR: f64 = 8.0;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CorridorPoint {
    pub state: State,
    /// Time on the source control, in `[-T, 0]`.
    pub time: f64,
    /// Remaining cost from `state`; equals `-time` under unit running cost.
    pub value: f64,
    /// Index of the source control in [`Corridor::controls`].
    pub sample: usize,
}

/// Build parameters and everything besides the point list, stored as the
/// JSON sidecar of a corridor CSV.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CorridorMeta {
    pub state_names: Vec<String>,
    pub metric: StateMetric,
    pub target: State,
    pub spacing: f64,
    pub dt: f64,
    pub controls: Vec<ControlSequence>,
}

#[derive(Clone, Debug)]
pub struct Corridor {
    points: Vec<CorridorPoint>,
    index: GridIndex,
    meta: CorridorMeta,
}

/// Per-axis slope estimate and the radius at which it was found.
#[derive(Clone, Debug, PartialEq)]
pub struct Gradient {
    pub components: Vec<f64>,
    pub radii: Vec<f64>,
}

impl Corridor {
    /// Traces every sample at `M = max(2, ceil(T / spacing) + 1)` evenly
    /// spaced instants. The instant `t = 0` is pinned to the target itself.
    pub fn build(samples: &[Sample], model: &dyn Dynamics, target: &State, spacing: f64, dt: f64) -> Result<Self> {
        if samples.is_empty() {
            return Err(Error::Argument("cannot build a corridor from zero samples".into()));
        }
        if !(spacing > 0.0) || !(dt > 0.0) {
            return Err(Error::Argument("corridor spacing and dt must be positive".into()));
        }
        let mut points = Vec::new();
        let mut controls = Vec::with_capacity(samples.len());
        for (i, s) in samples.iter().enumerate() {
            let total = s.control.total_duration();
            let m = ((total / spacing).ceil() as usize + 1).max(2);
            // ascending times; the first and last are set exactly
            let times: Vec<f64> = (0..m)
                .rev()
                .map(|j| match j {
                    0 => 0.0,
                    j if j == m - 1 => -total,
                    j => -(j as f64) * total / (m - 1) as f64,
                })
                .collect();
            let states = sample_forward(model, &s.state, &s.control, dt, &times)?;
            for (t, x) in times.into_iter().zip(states).rev() {
                let state = if t == 0.0 { target.clone() } else { x };
                points.push(CorridorPoint {
                    state,
                    time: t,
                    value: -t,
                    sample: i,
                });
            }
            controls.push(s.control.clone());
        }
        let meta = CorridorMeta {
            state_names: model.state_names(),
            metric: model.metric(),
            target: target.clone(),
            spacing,
            dt,
            controls,
        };
        Self::from_parts(points, meta)
    }

    /// Reassembles a corridor from stored points and metadata.
    pub fn from_parts(points: Vec<CorridorPoint>, meta: CorridorMeta) -> Result<Self> {
        if points.is_empty() {
            return Err(Error::EmptyCorridor);
        }
        let dim = meta.metric.dim();
        if let Some(p) = points.iter().find(|p| p.state.dim() != dim || p.sample >= meta.controls.len()) {
            return Err(Error::Parse(format!(
                "corridor point at t = {} does not match the metadata",
                p.time
            )));
        }
        let index = GridIndex::new(meta.metric.clone(), points.iter().map(|p| p.state.as_slice()), INDEX_CELL);
        Ok(Corridor { points, index, meta })
    }

    pub fn points(&self) -> &[CorridorPoint] {
        &self.points
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    pub fn meta(&self) -> &CorridorMeta {
        &self.meta
    }

    pub fn target(&self) -> &State {
        &self.meta.target
    }

    pub fn metric(&self) -> &StateMetric {
        &self.meta.metric
    }

    /// The part of the source control still to run from point `i`.
    pub fn tail_control(&self, i: usize) -> ControlSequence {
        let p = &self.points[i];
        self.meta.controls[p.sample].tail_from(p.time)
    }

    /// Indices of the points within `radius` of `x`.
    pub fn within(&self, x: &State, radius: f64) -> Vec<usize> {
        self.index.within(x.as_slice(), radius)
    }

    /// Point nearest to `x` and its distance.
    pub fn nearest(&self, x: &State) -> (usize, f64) {
        self.index.nearest(x.as_slice(), 1)[0]
    }

    /// The `k` points nearest to `x` with their distances, closest first.
    pub fn neighbors(&self, x: &State, k: usize) -> Vec<(usize, f64)> {
        self.index.nearest(x.as_slice(), k)
    }

    /// Inverse-distance-weighted mean value of the `k` nearest points. A
    /// query that coincides with a stored point returns that point's value.
    pub fn query_value(&self, x: &State, k: usize) -> Result<f64> {
        if k == 0 {
            return Err(Error::Argument("query_value needs k >= 1".into()));
        }
        let near = self.index.nearest(x.as_slice(), k);
        if let Some(&(i, _)) = near.iter().find(|(_, d)| *d == 0.0) {
            return Ok(self.points[i].value);
        }
        let (num, den) = near.iter().fold((0.0, 0.0), |(n, d), &(i, dist)| {
            let w = 1.0 / dist;
            (n + w * self.points[i].value, d + w)
        });
        Ok(num / den)
    }

    /// Slope along `axis` from points inside the cylinder of radius `r`
    /// around that axis: a centred difference of the closest point on each
    /// side, or, with one side empty, the difference of the two closest
    /// points on the other side.
    pub fn axis_slope(&self, x: &State, axis: usize, r: f64) -> Option<f64> {
        let nb = self.index.axis_neighbors(x.as_slice(), axis, r);
        let pair = match (nb.above.first(), nb.below.first()) {
            (Some(&a), Some(&b)) => (a, b),
            _ if nb.above.len() == 2 => (nb.above[0], nb.above[1]),
            _ if nb.below.len() == 2 => (nb.below[0], nb.below[1]),
            _ => return None,
        };
        let ((ia, oa), (ib, ob)) = pair;
        // coincident coordinates along the axis carry no slope information
        if oa == ob {
            return None;
        }
        Some((self.points[ia].value - self.points[ib].value) / (oa - ob))
    }

    /// Value gradient at `x`. Each axis starts at radius `r` and doubles up
    /// to [`MAX_RADIUS_FACTOR`]` * r` until a difference is available.
    pub fn gradient(&self, x: &State, r: f64) -> Result<Gradient> {
        if !(r > 0.0) {
            return Err(Error::Argument("cylinder radius must be positive".into()));
        }
        let dim = self.meta.metric.dim();
        let mut components = Vec::with_capacity(dim);
        let mut radii = Vec::with_capacity(dim);
        for axis in 0..dim {
            let mut radius = r;
            let slope = loop {
                if let Some(s) = self.axis_slope(x, axis, radius) {
                    break s;
                }
                radius *= 2.0;
                if radius > MAX_RADIUS_FACTOR * r {
                    return Err(Error::GradientUnavailable {
                        dim: axis,
                        state: x.as_slice().to_vec(),
                    });
                }
            };
            components.push(slope);
            radii.push(radius);
        }
        Ok(Gradient { components, radii })
    }

    /// Writes the point list as CSV: one column per state coordinate, then
    /// `t,value,sample_idx`.
    pub fn write_csv<W: Write>(&self, out: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        let mut header = self.meta.state_names.clone();
        header.extend(["t", "value", "sample_idx"].map(String::from));
        w.write_record(&header).map_err(csv_err)?;
        for p in &self.points {
            let mut rec: Vec<String> = p.state.as_slice().iter().map(f64::to_string).collect();
            rec.push(p.time.to_string());
            rec.push(p.value.to_string());
            rec.push(p.sample.to_string());
            w.write_record(&rec).map_err(csv_err)?;
        }
        w.flush()?;
        Ok(())
    }

    pub fn meta_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(&self.meta)?)
    }

    /// Inverse of [`Corridor::write_csv`] plus [`Corridor::meta_json`].
    pub fn read(csv_in: impl Read, meta_json: &str) -> Result<Self> {
        let meta: CorridorMeta = serde_json::from_str(meta_json)?;
        let dim = meta.metric.dim();
        let mut r = csv::Reader::from_reader(csv_in);
        let header = r.headers().map_err(csv_err)?.clone();
        if header.len() != dim + 3 {
            return Err(Error::Parse(format!(
                "corridor CSV has {} columns, expected {}",
                header.len(),
                dim + 3
            )));
        }
        let mut points = Vec::new();
        for (line, rec) in r.records().enumerate() {
            let rec = rec.map_err(csv_err)?;
            let num = |i: usize| -> Result<f64> {
                rec[i]
                    .parse()
                    .map_err(|_| Error::Parse(format!("row {}: bad number {:?}", line + 1, &rec[i])))
            };
            let state = (0..dim).map(num).collect::<Result<Vec<f64>>>()?;
            let sample = rec[dim + 2]
                .parse()
                .map_err(|_| Error::Parse(format!("row {}: bad sample index", line + 1)))?;
            points.push(CorridorPoint {
                state: State::from(state),
                time: num(dim)?,
                value: num(dim + 1)?,
                sample,
            });
        }
        Self::from_parts(points, meta)
    }
}

pub(crate) fn csv_err(e: csv::Error) -> Error {
    Error::Parse(e.to_string())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::sysdyn::{propagate_forward, Dubins};

    fn straight(len: f64) -> Sample {
        let m = Dubins::default();
        let c = ControlSequence::new(vec![0.0], vec![len]).unwrap();
        Sample::from_control(&m, &State::from([0.0, 0.0, 0.0]), c, 0.01).unwrap()
    }

    #[test]
    fn spacing_sets_point_count_and_values() {
        let m = Dubins::default();
        let c = Corridor::build(&[straight(6.0)], &m, &State::from([0.0, 0.0, 0.0]), 2.0, 0.01).unwrap();
        let t: Vec<f64> = c.points().iter().map(|p| p.time).collect();
        assert_eq!(t, vec![0.0, -2.0, -4.0, -6.0]);
        let v: Vec<f64> = c.points().iter().map(|p| p.value).collect();
        assert_eq!(v, vec![0.0, 2.0, 4.0, 6.0]);
        assert_eq!(c.points()[0].state, State::from([0.0, 0.0, 0.0]));
        assert!((c.points()[3].state[0] + 6.0).abs() < 1e-9);
    }

    #[test]
    fn zero_length_sample_gives_two_target_points() {
        let m = Dubins::default();
        let c = Corridor::build(&[straight(0.0)], &m, &State::from([0.0, 0.0, 0.0]), 0.1, 0.01).unwrap();
        assert_eq!(c.len(), 2);
        assert!(c.points().iter().all(|p| p.value == 0.0));
    }

    #[test]
    fn empty_input_is_rejected() {
        let m = Dubins::default();
        assert!(Corridor::build(&[], &m, &State::from([0.0, 0.0, 0.0]), 0.1, 0.01).is_err());
    }

    #[test]
    fn tails_reach_the_target() {
        let m = Dubins::default();
        let x_t = State::from([0.0, 0.0, 0.0]);
        let c = ControlSequence::new(vec![1.0, 0.0, -1.0], vec![1.3, 2.0, 0.7]).unwrap();
        let s = Sample::from_control(&m, &x_t, c, 0.01).unwrap();
        let cor = Corridor::build(&[s], &m, &x_t, 0.25, 0.01).unwrap();
        for i in 0..cor.len() {
            let end = propagate_forward(&m, &cor.points()[i].state, &cor.tail_control(i), 0.01).unwrap();
            assert!(m.metric().distance(end.as_slice(), x_t.as_slice()) < 1e-3);
        }
    }

    #[test]
    fn exact_match_returns_stored_value() {
        let m = Dubins::default();
        let c = Corridor::build(&[straight(3.0)], &m, &State::from([0.0, 0.0, 0.0]), 1.0, 0.01).unwrap();
        let x = c.points()[2].state.clone();
        assert_eq!(c.query_value(&x, 3).unwrap(), c.points()[2].value);
        let between = State::from([-1.5, 0.0, 0.0]);
        assert!((c.query_value(&between, 2).unwrap() - 1.5).abs() < 1e-9);
    }
}
