//! WebAssembly bindings for the static demo page in `www/`.
//!
//! Every exported function takes plain numbers and returns a JSON string, so
//! the page needs nothing beyond the generated glue. The `*_json` functions
//! hold the logic and are usable from native Rust as well.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;
use ttr_core::corridor::Corridor;
use ttr_core::filters::{exp_filter, AcceptRegion};
use ttr_core::oracle::dubins_distance;
use ttr_core::synthesis::{rollout, SynthesisConfig};
use ttr_core::sysdyn::{integrate_forward, Dubins, Dynamics, State, StateMetric};
use ttr_core::training::{gen_warmup, WarmupDraw};
use wasm_bindgen::prelude::*;

/// Dots sent to the page at most.
const MAX_DOTS: usize = 4000;

#[derive(Serialize)]
struct PathReply {
    time: f64,
    word: String,
    segments: [f64; 3],
    /// `(px, py)` every 0.05 s along the path.
    path: Vec<[f64; 2]>,
}

#[derive(Serialize)]
struct FilterReply {
    trials: usize,
    accepted: usize,
    rate: f64,
    expected: f64,
}

#[derive(Serialize)]
struct CorridorReply {
    samples: usize,
    points: usize,
    /// `(px, py, value)` for a thinned subset of the corridor.
    dots: Vec<[f64; 3]>,
    outcome: String,
    elapsed: f64,
    oracle: f64,
    rollout: Vec<[f64; 2]>,
}

fn state(px: f64, py: f64, theta: f64) -> Result<State, String> {
    if [px, py, theta].iter().all(|v| v.is_finite()) {
        Ok(State::from([px, py, theta]))
    } else {
        Err("coordinates must be finite numbers".into())
    }
}

fn json<T: Serialize>(v: &T) -> Result<String, String> {
    serde_json::to_string(v).map_err(|e| e.to_string())
}

/// Shortest unit-speed Dubins path from `(px, py, theta)` to the origin.
pub fn optimal_path_json(px: f64, py: f64, theta: f64) -> Result<String, String> {
    let from = state(px, py, theta)?;
    let (time, p) = dubins_distance(&from, &State::from([0.0, 0.0, 0.0]));
    let traj = integrate_forward(&Dubins::default(), &from, &p.to_control(), 0.01).map_err(|e| e.to_string())?;
    let path = traj.states.iter().step_by(5).chain(traj.states.last()).map(|s| [s[0], s[1]]).collect();
    json(&PathReply {
        time,
        word: p.word.to_string(),
        segments: p.segment_lengths,
        path,
    })
}

/// Runs the exponential accept-reject test `trials` times on a point at
/// `distance` outside the unit ball.
pub fn filter_trial_json(lambda: f64, distance: f64, trials: usize, seed: u64) -> Result<String, String> {
    if !(lambda > 0.0) || !(distance >= 0.0) || trials == 0 {
        return Err("need lambda > 0, distance >= 0 and at least one trial".into());
    }
    let metric = StateMetric::dubins(1.0);
    let ball = AcceptRegion::Sphere {
        center: State::from([0.0, 0.0, 0.0]),
        radius: 1.0,
    };
    let x = [1.0 + distance, 0.0, 0.0];
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let accepted = (0..trials)
        .filter(|_| exp_filter(&metric, &x, &ball, lambda, &mut rng))
        .count();
    json(&FilterReply {
        trials,
        accepted,
        rate: accepted as f64 / trials as f64,
        expected: (-lambda * distance).exp(),
    })
}

/// Random feasible samples biased towards `(px, py, theta)`, traced into a
/// corridor, then one closed-loop rollout from that state.
pub fn corridor_demo_json(px: f64, py: f64, theta: f64, samples: usize, seed: u64) -> Result<String, String> {
    let x_bar = state(px, py, theta)?;
    if samples == 0 || samples > 5000 {
        return Err("sample count must lie in 1..=5000".into());
    }
    let m = Dubins::default();
    let target = State::from([0.0, 0.0, 0.0]);
    let region = AcceptRegion::Sphere {
        center: x_bar.clone(),
        radius: 2.0,
    };
    let draw = WarmupDraw {
        region: &region,
        lambda: 0.7,
        codebook: m.primitives(),
        segments: 3,
        max_duration: 8.0,
        dt: 0.01,
    };
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (set, _) = gen_warmup(&m, &target, &draw, samples, &mut rng).map_err(|e| e.to_string())?;
    let c = Corridor::build(&set, &m, &target, 0.1, 0.01).map_err(|e| e.to_string())?;
    let r = rollout(&c, &m, &x_bar, &SynthesisConfig::default()).map_err(|e| e.to_string())?;
    let stride = c.len().div_ceil(MAX_DOTS);
    json(&CorridorReply {
        samples: set.len(),
        points: c.len(),
        dots: c.points().iter().step_by(stride).map(|p| [p.state[0], p.state[1], p.value]).collect(),
        outcome: r.outcome.to_string(),
        elapsed: r.elapsed,
        oracle: dubins_distance(&x_bar, &target).0,
        rollout: r.trajectory.states.iter().step_by(5).map(|s| [s[0], s[1]]).collect(),
    })
}

#[wasm_bindgen]
pub fn optimal_path(px: f64, py: f64, theta: f64) -> Result<String, JsError> {
    optimal_path_json(px, py, theta).map_err(|e| JsError::new(&e))
}

#[wasm_bindgen]
pub fn filter_trial(lambda: f64, distance: f64, trials: u32, seed: u32) -> Result<String, JsError> {
    filter_trial_json(lambda, distance, trials as usize, u64::from(seed)).map_err(|e| JsError::new(&e))
}

#[wasm_bindgen]
pub fn corridor_demo(px: f64, py: f64, theta: f64, samples: u32, seed: u32) -> Result<String, JsError> {
    corridor_demo_json(px, py, theta, samples as usize, u64::from(seed)).map_err(|e| JsError::new(&e))
}
