//! Closed-loop control from the corridor's value gradient.
//!
//! At every replanning instant the controller picks the primitive that makes
//! the value fall fastest, `argmin_u grad V(x) . f(x, u)`, holds it for one
//! control interval, and repeats until the target ball is reached.

use std::io::Write;

use serde::{Deserialize, Serialize};

use crate::corridor::{csv_err, Corridor};
use crate::error::{Error, Result};
use crate::sysdyn::{integrate_forward, ControlSequence, Dynamics, State, Trajectory};

/// How to choose between primitives whose descent rates tie.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TieBreak {
    /// Smallest magnitude first, then the smaller value.
    #[default]
    SmallestMagnitude,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SynthesisConfig {
    /// Replanning interval in seconds.
    pub control_dt: f64,
    /// Success radius around the target, in position coordinates only.
    pub reach_tol: f64,
    pub max_time: f64,
    /// Initial cylinder radius of the gradient search.
    pub cylinder_r: f64,
    /// Integration step inside one control interval.
    pub dt: f64,
    #[serde(default)]
    pub tie_break: TieBreak,
}

impl Default for SynthesisConfig {
    fn default() -> Self {
        SynthesisConfig {
            control_dt: 0.1,
            reach_tol: 0.5,
            max_time: 100.0,
            cylinder_r: 0.2,
            dt: crate::sysdyn::DEFAULT_DT,
            tie_break: TieBreak::SmallestMagnitude,
        }
    }
}

impl SynthesisConfig {
    pub fn validate(&self) -> Result<()> {
        for (name, v) in [
            ("control_dt", self.control_dt),
            ("reach_tol", self.reach_tol),
            ("max_time", self.max_time),
            ("cylinder_r", self.cylinder_r),
            ("dt", self.dt),
        ] {
            if !(v > 0.0) || !v.is_finite() {
                return Err(Error::Config(format!("synthesis.{name} must be positive")));
            }
        }
        Ok(())
    }
}

/// Descent rates closer than this, relative to the largest, count as tied.
const TIE_TOL: f64 = 1e-9;

/// The primitive minimizing `grad V . f(x, u)` at `x`.
pub fn select_control(c: &Corridor, model: &dyn Dynamics, x: &State, cfg: &SynthesisConfig) -> Result<f64> {
    let grad = c.gradient(x, cfg.cylinder_r)?;
    let mut f = vec![0.0; model.dim()];
    let rates: Vec<(f64, f64)> = model
        .primitives()
        .iter()
        .map(|&u| {
            model.vector_field(x.as_slice(), u, &mut f);
            (u, grad.components.iter().zip(&f).map(|(g, v)| g * v).sum())
        })
        .collect();
    let scale = rates.iter().map(|r| r.1.abs()).fold(1.0, f64::max);
    let lowest = rates.iter().map(|r| r.1).fold(f64::INFINITY, f64::min);
    let TieBreak::SmallestMagnitude = cfg.tie_break;
    let pick = rates
        .iter()
        .filter(|r| r.1 - lowest <= TIE_TOL * scale)
        .map(|r| r.0)
        .min_by(|a, b| a.abs().total_cmp(&b.abs()).then(a.total_cmp(b)))
        .expect("the model has at least one primitive");
    Ok(pick)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum Outcome {
    Success,
    FailTimeout,
    FailLost,
}

impl std::fmt::Display for Outcome {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Outcome::Success => "SUCCESS",
            Outcome::FailTimeout => "FAIL_TIMEOUT",
            Outcome::FailLost => "FAIL_LOST",
        })
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Rollout {
    /// Every integration step; times count up from zero.
    pub trajectory: Trajectory,
    /// Primitive held over each control interval.
    pub controls: Vec<f64>,
    pub outcome: Outcome,
    pub elapsed: f64,
}

/// Drives the model from `x0` with [`select_control`] until the position
/// part of the state is within `reach_tol` of the corridor's target, the
/// clock passes `max_time`, or the gradient cannot be estimated.
pub fn rollout(c: &Corridor, model: &dyn Dynamics, x0: &State, cfg: &SynthesisConfig) -> Result<Rollout> {
    cfg.validate()?;
    let metric = c.metric();
    let target = c.target().as_slice();
    let reached = |x: &State| metric.position_distance(x.as_slice(), target) <= cfg.reach_tol;
    let mut times = vec![0.0];
    let mut states = vec![x0.clone()];
    let mut controls = Vec::new();
    let mut x = x0.clone();
    let mut t = 0.0;
    let outcome = loop {
        if reached(&x) {
            break Outcome::Success;
        }
        if t >= cfg.max_time - 1e-9 {
            break Outcome::FailTimeout;
        }
        let u = match select_control(c, model, &x, cfg) {
            Ok(u) => u,
            Err(Error::GradientUnavailable { .. }) => break Outcome::FailLost,
            Err(e) => return Err(e),
        };
        controls.push(u);
        let hold = cfg.control_dt.min(cfg.max_time - t);
        let seg = ControlSequence::new(vec![u], vec![hold])?;
        let piece = integrate_forward(model, &x, &seg, cfg.dt)?;
        // the piece's times run over [-hold, 0]; stop at the first step inside
        // the target ball
        let mut hit = false;
        for (s, state) in piece.times.iter().zip(piece.states).skip(1) {
            times.push(t + hold + s);
            hit = reached(&state);
            states.push(state.clone());
            x = state;
            if hit {
                break;
            }
        }
        t = *times.last().unwrap();
        if hit {
            break Outcome::Success;
        }
    };
    Ok(Rollout {
        trajectory: Trajectory { times, states },
        controls,
        outcome,
        elapsed: t,
    })
}

/// Result line of one rollout, compared with the optimal time when known.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RolloutSummary {
    pub outcome: Outcome,
    pub elapsed: f64,
    pub oracle_time: Option<f64>,
    pub ratio: Option<f64>,
}

impl Rollout {
    pub fn summary(&self, oracle_time: Option<f64>) -> RolloutSummary {
        RolloutSummary {
            outcome: self.outcome,
            elapsed: self.elapsed,
            oracle_time,
            ratio: oracle_time.filter(|v| *v > 0.0).map(|v| self.elapsed / v),
        }
    }

    /// Trajectory as CSV with a `t` column followed by the state columns.
    pub fn write_csv<W: Write>(&self, names: &[String], out: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        let mut header = vec!["t".to_string()];
        header.extend(names.iter().cloned());
        w.write_record(&header).map_err(csv_err)?;
        for (t, x) in self.trajectory.times.iter().zip(&self.trajectory.states) {
            let mut rec = vec![t.to_string()];
            rec.extend(x.as_slice().iter().map(f64::to_string));
            w.write_record(&rec).map_err(csv_err)?;
        }
        w.flush()?;
        Ok(())
    }
}
