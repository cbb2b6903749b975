//! Warm-up data generation and the dynamic query/simulate/filter/retrain loop.
//!
//! Every [`Sample`] is produced by integrating a control backward from the
//! target and is re-checked forward before it is admitted, so each stored
//! cost is the duration of a control that really reaches the target.

use std::f64::consts::TAU;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::filters::{exp_filter, length_filter, min_cone, AcceptRegion, Scored};
use crate::nnet::{
    forward, plant_loss, surrogate_loss, train_full, train_plant, NetConfig, PlantExample, RnnWeights,
    RpropParams, TrainExample,
};
use crate::sysdyn::{
    propagate_backward, propagate_forward, sequence_cost, unit_cost, ControlSequence, Dynamics, State,
    StateMetric,
};

/// Largest allowed miss, in the model metric, when replaying a sample forward.
pub const FEASIBILITY_TOL: f64 = 1e-3;

/// Consecutive rejections after which sample generation gives up.
pub const STALL_LIMIT: u64 = 1_000_000;

/// A state together with a control that drives it to the target.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Sample {
    pub state: State,
    pub control: ControlSequence,
    pub cost: f64,
}

impl Sample {
    /// Integrates `control` backward from `x_t` and certifies the endpoint.
    pub fn from_control(model: &dyn Dynamics, x_t: &State, control: ControlSequence, dt: f64) -> Result<Self> {
        let sample = Sample {
            state: propagate_backward(model, x_t, &control, dt)?,
            cost: sequence_cost(&control, unit_cost),
            control,
        };
        sample.certify(model, x_t, dt)?;
        Ok(sample)
    }

    /// Forward replay must land within [`FEASIBILITY_TOL`] of `x_t`.
    pub fn certify(&self, model: &dyn Dynamics, x_t: &State, dt: f64) -> Result<()> {
        let end = propagate_forward(model, &self.state, &self.control, dt)?;
        let miss = model.metric().distance(end.as_slice(), x_t.as_slice());
        if miss <= FEASIBILITY_TOL && self.cost >= 0.0 {
            Ok(())
        } else {
            Err(Error::Integration { t: -self.cost })
        }
    }

    pub fn example(&self) -> TrainExample {
        TrainExample {
            input: self.state.clone(),
            target: self.control.clone(),
        }
    }
}

impl Scored for Sample {
    fn state(&self) -> &[f64] {
        self.state.as_slice()
    }

    fn cost(&self) -> f64 {
        self.cost
    }
}

/// Counters reported by the warm-up generators.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct GenStats {
    pub draws: u64,
    pub accepted: u64,
}

impl GenStats {
    pub fn acceptance_rate(&self) -> f64 {
        self.accepted as f64 / self.draws.max(1) as f64
    }
}

fn random_control<R: Rng + ?Sized>(codebook: &[f64], segments: usize, max_duration: f64, rng: &mut R) -> ControlSequence {
    let mut u = Vec::with_capacity(segments);
    let mut tau = Vec::with_capacity(segments);
    for _ in 0..segments {
        u.push(codebook[rng.gen_range(0..codebook.len())]);
        tau.push(rng.gen::<f64>() * max_duration);
    }
    ControlSequence::new(u, tau).expect("codebook entries and durations are finite")
}

/// Parameters of one warm-up draw: random `segments`-piece controls with
/// primitives from `codebook` and durations uniform on `[0, max_duration]`,
/// kept when their backward endpoint passes the exponential filter.
#[derive(Clone, Debug)]
pub struct WarmupDraw<'a> {
    pub region: &'a AcceptRegion,
    pub lambda: f64,
    pub codebook: &'a [f64],
    pub segments: usize,
    pub max_duration: f64,
    pub dt: f64,
}

/// Draws until `count` samples are accepted.
pub fn gen_warmup<R: Rng + ?Sized>(
    model: &dyn Dynamics,
    x_t: &State,
    draw: &WarmupDraw<'_>,
    count: usize,
    rng: &mut R,
) -> Result<(Vec<Sample>, GenStats)> {
    if count == 0 {
        return Err(Error::Argument("warm-up count must be positive".into()));
    }
    let metric = model.metric();
    let mut out = Vec::with_capacity(count);
    let mut stats = GenStats::default();
    let mut streak = 0u64;
    while out.len() < count {
        let control = random_control(draw.codebook, draw.segments, draw.max_duration, rng);
        let sample = Sample::from_control(model, x_t, control, draw.dt)?;
        stats.draws += 1;
        if exp_filter(&metric, sample.state.as_slice(), draw.region, draw.lambda, rng) {
            out.push(sample);
            stats.accepted += 1;
            streak = 0;
        } else {
            streak += 1;
            if streak >= STALL_LIMIT {
                return Err(Error::GenerationStall { rejections: streak });
            }
        }
    }
    Ok((out, stats))
}

/// Plant-layer pairs: for each accepted random control, the `U` encoding of
/// every segment paired with the state the forward system reaches once that
/// segment is done. Stops at `pairs` examples.
pub fn gen_plant_pairs<R: Rng + ?Sized>(
    model: &dyn Dynamics,
    x_t: &State,
    draw: &WarmupDraw<'_>,
    net: &NetConfig,
    pairs: usize,
    rng: &mut R,
) -> Result<(Vec<PlantExample>, GenStats)> {
    if pairs == 0 {
        return Err(Error::Argument("plant pair count must be positive".into()));
    }
    let n = model.dim();
    let mut out = Vec::with_capacity(pairs);
    let mut stats = GenStats::default();
    let metric = model.metric();
    let mut streak = 0u64;
    while out.len() < pairs {
        let control = random_control(draw.codebook, draw.segments, draw.max_duration, rng);
        // walk backward one segment at a time; the state before segment j
        // (in backward order) is where the forward system is after segment j
        let mut states = vec![x_t.clone()];
        for (u, tau) in control.segments().rev() {
            let seg = ControlSequence::new(vec![u], vec![tau])?;
            let prev = propagate_backward(model, states.last().unwrap(), &seg, draw.dt)?;
            states.push(prev);
        }
        stats.draws += 1;
        let endpoint = states.last().unwrap();
        if !exp_filter(&metric, endpoint.as_slice(), draw.region, draw.lambda, rng) {
            streak += 1;
            if streak >= STALL_LIMIT {
                return Err(Error::GenerationStall { rejections: streak });
            }
            continue;
        }
        streak = 0;
        stats.accepted += 1;
        let k = control.len();
        for (j, (u, tau)) in control.segments().enumerate() {
            if out.len() == pairs {
                break;
            }
            let enc = net.encode_segment(u, tau);
            // forward segment j ends at the state reached backward after k-1-j segments
            let next = &states[k - 1 - j];
            out.push(PlantExample {
                u: enc,
                next: next.as_slice()[..n].to_vec(),
            });
        }
    }
    Ok((out, stats))
}

/// `count` states uniform in the metric ball of radius `epsilon` around `center`.
pub fn gen_query_set<R: Rng + ?Sized>(
    metric: &StateMetric,
    center: &State,
    epsilon: f64,
    count: usize,
    rng: &mut R,
) -> Result<Vec<State>> {
    if !(epsilon >= 0.0) || count == 0 {
        return Err(Error::Argument("query set needs epsilon >= 0 and a positive count".into()));
    }
    if epsilon == 0.0 {
        return Ok(vec![center.clone(); count]);
    }
    let c = center.as_slice();
    let mut out = Vec::with_capacity(count);
    while out.len() < count {
        let x: Vec<f64> = c
            .iter()
            .zip(&metric.weights)
            .map(|(ci, w)| if *w > 0.0 { ci + (2.0 * rng.gen::<f64>() - 1.0) * epsilon / w } else { *ci })
            .collect();
        if metric.distance(&x, c) <= epsilon {
            out.push(State::from(x));
        }
    }
    Ok(out)
}

/// Warm-up sizes and ranges.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct WarmupConfig {
    /// Number of plant-layer pairs in the first dataset.
    pub d1_pairs: usize,
    pub d1_max_duration: f64,
    /// Radius of the sphere around the target that the first dataset favors.
    pub d1_radius: f64,
    pub d1_lambda: f64,
    pub d2_count: usize,
    pub d2_max_duration: f64,
    pub d2_radius: f64,
    pub d2_lambda: f64,
    pub plant_epochs: usize,
    pub d2_epochs: usize,
}

impl Default for WarmupConfig {
    fn default() -> Self {
        WarmupConfig {
            d1_pairs: 20_000,
            d1_max_duration: 100.0,
            d1_radius: 30.0,
            d1_lambda: 0.1,
            d2_count: 300,
            d2_max_duration: TAU,
            d2_radius: 15.0,
            d2_lambda: 0.5,
            plant_epochs: 100,
            d2_epochs: 500,
        }
    }
}

impl WarmupConfig {
    pub fn validate(&self) -> Result<()> {
        let pos = [
            ("d1_max_duration", self.d1_max_duration),
            ("d1_radius", self.d1_radius),
            ("d1_lambda", self.d1_lambda),
            ("d2_max_duration", self.d2_max_duration),
            ("d2_radius", self.d2_radius),
            ("d2_lambda", self.d2_lambda),
        ];
        for (name, v) in pos {
            if !(v > 0.0) || !v.is_finite() {
                return Err(Error::Config(format!("warmup.{name} must be positive")));
            }
        }
        if self.d1_pairs == 0 || self.d2_count == 0 {
            return Err(Error::Config("warm-up dataset sizes must be positive".into()));
        }
        Ok(())
    }
}

/// Filter strengths, phase boundaries and loop limits of dynamic training.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Schedule {
    /// Radius of the query ball around the state of interest.
    pub epsilon: f64,
    pub query_count: usize,
    /// Decay rate applied to fresh endpoints against the cone.
    pub lambda_eps: f64,
    pub lambda_cone: f64,
    pub lambda_sphere: f64,
    /// Cost decay rate of the length filter.
    pub lambda_c: f64,
    /// Neighborhood radius of the length filter.
    pub d: f64,
    /// Angular and length slack added to the minimal cone.
    pub cone_margin: f64,
    /// First iteration of the guide phase.
    pub explore_until: usize,
    /// First iteration of the exploit phase.
    pub exploit_from: usize,
    /// Factor applied to the sphere rate every `sphere_ramp_every` guide iterations.
    pub sphere_ramp: f64,
    pub sphere_ramp_every: usize,
    pub exploit_factor: f64,
    pub max_iterations: usize,
    /// Fraction of fresh endpoints that must land near the query set ...
    pub stop_fraction: f64,
    /// ... for this many consecutive iterations to stop early.
    pub stop_patience: usize,
    /// Do not stop before this many iterations.
    pub min_iterations: usize,
    pub epochs_per_iteration: usize,
    /// Accept region for freshly simulated endpoints.
    #[serde(default)]
    pub new_region: NewRegion,
}

impl Default for Schedule {
    fn default() -> Self {
        Schedule {
            epsilon: 1.0,
            query_count: 500,
            lambda_eps: 1.0,
            lambda_cone: 1.0,
            lambda_sphere: 0.2,
            lambda_c: 0.05,
            d: 0.5,
            cone_margin: 0.1,
            explore_until: 30,
            exploit_from: 80,
            sphere_ramp: 1.5,
            sphere_ramp_every: 10,
            exploit_factor: 5.0,
            max_iterations: 200,
            stop_fraction: 0.5,
            stop_patience: 3,
            min_iterations: 0,
            epochs_per_iteration: 30,
            new_region: NewRegion::Cone,
        }
    }
}

/// Where freshly simulated endpoints are considered close enough.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NewRegion {
    /// The cone from the target that holds the query set.
    #[default]
    Cone,
    /// The ball of radius `epsilon` around the state of interest.
    Ball,
}

/// Which filters act on the existing training set at one iteration.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct PhaseRates {
    /// Rate against the cone, if the cone filter is active.
    pub cone: Option<f64>,
    /// Rate against the query ball, if the sphere filter is active.
    pub sphere: Option<f64>,
}

impl Schedule {
    pub fn validate(&self) -> Result<()> {
        let pos = [
            ("epsilon", self.epsilon),
            ("lambda_eps", self.lambda_eps),
            ("lambda_cone", self.lambda_cone),
            ("lambda_sphere", self.lambda_sphere),
            ("lambda_c", self.lambda_c),
            ("d", self.d),
            ("sphere_ramp", self.sphere_ramp),
            ("exploit_factor", self.exploit_factor),
        ];
        for (name, v) in pos {
            if !(v > 0.0) || !v.is_finite() {
                return Err(Error::Config(format!("schedule.{name} must be positive")));
            }
        }
        if !(self.cone_margin >= 0.0) {
            return Err(Error::Config("schedule.cone_margin must be non-negative".into()));
        }
        if self.explore_until > self.exploit_from {
            return Err(Error::Config("schedule.explore_until must not exceed exploit_from".into()));
        }
        if self.query_count == 0 || self.sphere_ramp_every == 0 || self.stop_patience == 0 {
            return Err(Error::Config(
                "schedule.query_count, sphere_ramp_every and stop_patience must be positive".into(),
            ));
        }
        if !(self.stop_fraction > 0.0 && self.stop_fraction <= 1.0) {
            return Err(Error::Config("schedule.stop_fraction must lie in (0, 1]".into()));
        }
        Ok(())
    }

    /// Explore with a relaxed cone, guide with the cone plus a slowly
    /// tightening sphere, then exploit with a strong sphere alone.
    pub fn rates(&self, iteration: usize) -> PhaseRates {
        if iteration < self.explore_until {
            PhaseRates {
                cone: Some(0.5 * self.lambda_cone),
                sphere: None,
            }
        } else if iteration < self.exploit_from {
            let ramps = ((iteration - self.explore_until) / self.sphere_ramp_every) as i32;
            PhaseRates {
                cone: Some(self.lambda_cone),
                sphere: Some(self.lambda_sphere * self.sphere_ramp.powi(ramps)),
            }
        } else {
            PhaseRates {
                cone: None,
                sphere: Some(self.lambda_sphere * self.exploit_factor),
            }
        }
    }
}

/// Everything a training run needs besides the model.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainingConfig {
    pub net: NetConfig,
    pub warmup: WarmupConfig,
    pub schedule: Schedule,
    #[serde(default)]
    pub rprop: RpropParams,
    pub dt: f64,
    pub seed: u64,
}

impl TrainingConfig {
    pub fn dubins() -> Self {
        TrainingConfig {
            net: NetConfig::dubins(),
            // a smaller plant dataset leaves the plant layer less committed to
            // long random controls, which measurably helps the dynamic loop
            warmup: WarmupConfig {
                d1_pairs: 2_000,
                ..WarmupConfig::default()
            },
            schedule: Schedule::default(),
            // every retrain starts from weights that already fit most of the
            // set, where the classic first step of 0.07 overshoots
            rprop: RpropParams {
                delta0: 0.005,
                ..RpropParams::default()
            },
            dt: crate::sysdyn::DEFAULT_DT,
            seed: 0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.net.validate()?;
        self.warmup.validate()?;
        self.schedule.validate()?;
        if !(self.dt > 0.0) {
            return Err(Error::Config("dt must be positive".into()));
        }
        Ok(())
    }

    /// Stream used for warm-up; independent of the state of interest so one
    /// warm-up can seed runs toward several states.
    pub fn warmup_rng(&self) -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(self.seed)
    }

    pub fn dynamic_rng(&self) -> ChaCha8Rng {
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        rng.set_stream(1);
        rng
    }
}

/// Result of the warm-up phase.
#[derive(Clone, Debug)]
pub struct Warmup {
    pub weights: RnnWeights,
    pub d2: Vec<Sample>,
    pub d1_stats: GenStats,
    pub d2_stats: GenStats,
    /// Plant-layer error before and after fitting the first dataset.
    pub plant_fit: (f64, f64),
    /// Network loss on the second dataset before and after fitting.
    pub d2_fit: (f64, f64),
}

/// Generates both warm-up datasets and fits the network to them.
pub fn warm_up(model: &dyn Dynamics, x_t: &State, cfg: &TrainingConfig) -> Result<Warmup> {
    cfg.validate()?;
    let mut rng = cfg.warmup_rng();
    let codebook = model.primitives().to_vec();
    let segments = cfg.net.recurrence_depth;
    let mut weights = RnnWeights::random(&cfg.net, &mut rng);

    let d1_region = AcceptRegion::Sphere {
        center: x_t.clone(),
        radius: cfg.warmup.d1_radius,
    };
    let d1_draw = WarmupDraw {
        region: &d1_region,
        lambda: cfg.warmup.d1_lambda,
        codebook: &codebook,
        segments,
        max_duration: cfg.warmup.d1_max_duration,
        dt: cfg.dt,
    };
    let (pairs, d1_stats) = gen_plant_pairs(model, x_t, &d1_draw, &cfg.net, cfg.warmup.d1_pairs, &mut rng)?;
    let (w, plant) = train_plant(&weights, &cfg.net, &pairs, cfg.warmup.plant_epochs, cfg.rprop)?;
    weights = w;
    debug_assert_eq!(plant.last(), plant_loss(&weights, &pairs));

    let d2_region = AcceptRegion::Sphere {
        center: x_t.clone(),
        radius: cfg.warmup.d2_radius,
    };
    let d2_draw = WarmupDraw {
        region: &d2_region,
        lambda: cfg.warmup.d2_lambda,
        codebook: &codebook,
        segments,
        max_duration: cfg.warmup.d2_max_duration,
        dt: cfg.dt,
    };
    let (d2, d2_stats) = gen_warmup(model, x_t, &d2_draw, cfg.warmup.d2_count, &mut rng)?;
    let examples: Vec<TrainExample> = d2.iter().map(Sample::example).collect();
    let (w, fit) = train_full(&weights, &cfg.net, &examples, cfg.warmup.d2_epochs, cfg.rprop)?;
    Ok(Warmup {
        weights: w,
        d2,
        d1_stats,
        d2_stats,
        plant_fit: (plant.initial(), plant.last()),
        d2_fit: (fit.initial(), fit.last()),
    })
}

/// Per-iteration statistics, also the JSON-lines log record.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct IterationLog {
    pub iter: usize,
    pub train_set_size: usize,
    pub mean_dist_to_xbar: f64,
    pub loss: f64,
    /// Fraction of fresh endpoints within epsilon of some query state.
    pub near_fraction: f64,
    /// Distance from the state of interest to the closest fresh endpoint.
    pub closest_new: f64,
    pub accepted_new: usize,
    pub kept_old: usize,
}

/// Mutable state of the dynamic loop; serializable for resumption.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct TrainState {
    #[serde(with = "weights_serde")]
    pub weights: RnnWeights,
    pub train_set: Vec<Sample>,
    pub query_set: Vec<State>,
    pub x_bar: State,
    pub x_t: State,
    pub iteration: usize,
    /// Consecutive iterations meeting the stop fraction.
    pub streak: usize,
    pub rng: ChaCha8Rng,
    pub done: bool,
}

mod weights_serde {
    use serde::{Deserialize, Deserializer, Serialize, Serializer};

    use crate::nnet::{Matrix, RnnWeights};

    #[derive(Serialize, Deserialize)]
    struct Flat {
        shapes: Vec<(usize, usize)>,
        values: Vec<Vec<f64>>,
    }

    pub fn serialize<S: Serializer>(w: &RnnWeights, s: S) -> Result<S::Ok, S::Error> {
        let mats = [&w.w_p, &w.w_d1, &w.w_d2, &w.w_l, &w.w_x];
        let flat = Flat {
            shapes: mats.iter().map(|m| m.shape()).collect(),
            values: w.tensors().iter().map(|t| t.to_vec()).collect(),
        };
        flat.serialize(s)
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<RnnWeights, D::Error> {
        use serde::de::Error;
        let flat = Flat::deserialize(d)?;
        if flat.shapes.len() != 5 || flat.values.len() != 9 {
            return Err(D::Error::custom("weights snapshot has the wrong layout"));
        }
        let mat = |i: usize, v: &Vec<f64>| -> Result<Matrix, D::Error> {
            let (r, c) = flat.shapes[i];
            if r * c != v.len() {
                return Err(D::Error::custom("weights snapshot shape mismatch"));
            }
            Matrix::from_rows(v.chunks(c.max(1)).map(<[f64]>::to_vec).collect())
                .map_err(|e| D::Error::custom(e.to_string()))
        };
        let v = &flat.values;
        Ok(RnnWeights {
            w_p: mat(0, &v[0])?,
            b_p: v[1].clone(),
            w_d1: mat(1, &v[2])?,
            w_d2: mat(2, &v[3])?,
            b_d: v[4].clone(),
            w_l: mat(3, &v[5])?,
            b_l: v[6].clone(),
            w_x: mat(4, &v[7])?,
            b_x: v[8].clone(),
        })
    }
}

impl TrainState {
    /// Starts the loop from warmed-up weights and the second warm-up dataset.
    pub fn new(
        model: &dyn Dynamics,
        cfg: &TrainingConfig,
        warmup: &Warmup,
        x_bar: &State,
        x_t: &State,
    ) -> Result<Self> {
        let mut rng = cfg.dynamic_rng();
        let query_set = gen_query_set(&model.metric(), x_bar, cfg.schedule.epsilon, cfg.schedule.query_count, &mut rng)?;
        Ok(TrainState {
            weights: warmup.weights.clone(),
            train_set: warmup.d2.clone(),
            query_set,
            x_bar: x_bar.clone(),
            x_t: x_t.clone(),
            iteration: 0,
            streak: 0,
            rng,
            done: false,
        })
    }

    pub fn mean_dist_to_xbar(&self, metric: &StateMetric) -> f64 {
        if self.train_set.is_empty() {
            return f64::NAN;
        }
        self.train_set
            .iter()
            .map(|s| metric.distance(s.state.as_slice(), self.x_bar.as_slice()))
            .sum::<f64>()
            / self.train_set.len() as f64
    }

    /// The cone from the target that holds the query set.
    pub fn cone(&self, metric: &StateMetric, margin: f64) -> Result<AcceptRegion> {
        min_cone(metric, &self.x_t, &self.query_set, margin)
    }
}

/// One query, simulate, filter, compile and retrain pass.
pub fn dynamic_step(model: &dyn Dynamics, cfg: &TrainingConfig, ts: &mut TrainState) -> Result<IterationLog> {
    let metric = model.metric();
    let sched = &cfg.schedule;
    let cone = ts.cone(&metric, sched.cone_margin)?;
    let iteration = ts.iteration;
    let loop_err = |reason: String| Error::Loop { iteration, reason };

    // query and simulate
    let mut fresh = Vec::with_capacity(ts.query_set.len());
    for x in &ts.query_set {
        let control = forward(&ts.weights, &cfg.net, x)?;
        fresh.push(Sample::from_control(model, &ts.x_t, control, cfg.dt).map_err(|e| loop_err(e.to_string()))?);
    }
    let near = fresh
        .iter()
        .filter(|s| {
            ts.query_set
                .iter()
                .any(|q| metric.distance(s.state.as_slice(), q.as_slice()) <= sched.epsilon)
        })
        .count();
    let near_fraction = near as f64 / fresh.len() as f64;
    let closest_new = fresh
        .iter()
        .map(|s| metric.distance(s.state.as_slice(), ts.x_bar.as_slice()))
        .fold(f64::INFINITY, f64::min);

    // filter the new endpoints against the cone
    let rng = &mut ts.rng;
    let ball = AcceptRegion::Sphere {
        center: ts.x_bar.clone(),
        radius: sched.epsilon,
    };
    let new_region = match sched.new_region {
        NewRegion::Cone => &cone,
        NewRegion::Ball => &ball,
    };
    let new: Vec<Sample> = fresh
        .into_iter()
        .filter(|s| exp_filter(&metric, s.state.as_slice(), new_region, sched.lambda_eps, rng))
        .collect();

    // filter the existing set by distance, then by cost
    let rates = sched.rates(iteration);
    let mut old = std::mem::take(&mut ts.train_set);
    if let Some(lambda) = rates.cone {
        old.retain(|s| exp_filter(&metric, s.state.as_slice(), &cone, lambda, rng));
    }
    if let Some(lambda) = rates.sphere {
        old.retain(|s| exp_filter(&metric, s.state.as_slice(), &ball, lambda, rng));
    }
    let old = length_filter(old, &metric, sched.lambda_c, sched.d, rng);

    let accepted_new = new.len();
    let kept_old = old.len();
    let mut compiled = old;
    compiled.extend(new);
    if compiled.is_empty() {
        return Err(loop_err("the training set is empty after filtering; relax the schedule".into()));
    }
    ts.train_set = compiled;

    let examples: Vec<TrainExample> = ts.train_set.iter().map(Sample::example).collect();
    let (w, report) = train_full(&ts.weights, &cfg.net, &examples, sched.epochs_per_iteration, cfg.rprop)?;
    ts.weights = w;
    ts.iteration += 1;

    if near_fraction >= sched.stop_fraction {
        ts.streak += 1;
    } else {
        ts.streak = 0;
    }
    ts.done = ts.iteration >= sched.max_iterations
        || (ts.streak >= sched.stop_patience && ts.iteration >= sched.min_iterations);

    Ok(IterationLog {
        iter: iteration,
        train_set_size: ts.train_set.len(),
        mean_dist_to_xbar: ts.mean_dist_to_xbar(&metric),
        loss: report.last(),
        near_fraction,
        closest_new,
        accepted_new,
        kept_old,
    })
}

/// Runs dynamic steps until the stop criterion, calling `observe` after each.
pub fn run_dynamic<F>(model: &dyn Dynamics, cfg: &TrainingConfig, ts: &mut TrainState, mut observe: F) -> Result<()>
where
    F: FnMut(&TrainState, &IterationLog) -> Result<()>,
{
    while !ts.done {
        let log = dynamic_step(model, cfg, ts)?;
        observe(ts, &log)?;
    }
    Ok(())
}

/// Warm-up followed by the dynamic loop; returns the final weights and the
/// accumulated samples.
pub fn run_training(
    model: &dyn Dynamics,
    cfg: &TrainingConfig,
    x_bar: &State,
    x_t: &State,
) -> Result<(RnnWeights, Vec<Sample>)> {
    let warmup = warm_up(model, x_t, cfg)?;
    let mut ts = TrainState::new(model, cfg, &warmup, x_bar, x_t)?;
    run_dynamic(model, cfg, &mut ts, |_, _| Ok(()))?;
    Ok((ts.weights, ts.train_set))
}

/// Surrogate loss of the current network on its own training set.
pub fn training_loss(cfg: &TrainingConfig, ts: &TrainState) -> Result<f64> {
    let examples: Vec<TrainExample> = ts.train_set.iter().map(Sample::example).collect();
    surrogate_loss(&ts.weights, &cfg.net, &examples)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::sysdyn::Dubins;

    #[test]
    fn samples_certify_themselves() {
        let m = Dubins::default();
        let x_t = State::from([0.0, 0.0, 0.0]);
        let c = ControlSequence::new(vec![1.0, 0.0, -1.0], vec![1.0, 3.0, 0.5]).unwrap();
        let s = Sample::from_control(&m, &x_t, c, 0.01).unwrap();
        assert_eq!(s.cost, 4.5);
        s.certify(&m, &x_t, 0.01).unwrap();
        let mut forged = s.clone();
        forged.state = State::from([5.0, 5.0, 0.0]);
        assert!(forged.certify(&m, &x_t, 0.01).is_err());
    }

    #[test]
    fn query_set_stays_in_the_ball() {
        let metric = StateMetric::dubins(1.0);
        let c = State::from([-10.0, 0.0, 0.0]);
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let q = gen_query_set(&metric, &c, 1.0, 500, &mut rng).unwrap();
        assert_eq!(q.len(), 500);
        assert!(q.iter().all(|x| metric.distance(x.as_slice(), c.as_slice()) <= 1.0));
        let z = gen_query_set(&metric, &c, 0.0, 3, &mut rng).unwrap();
        assert!(z.iter().all(|x| *x == c));
    }

    #[test]
    fn everything_region_accepts_every_draw() {
        let m = Dubins::default();
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let draw = WarmupDraw {
            region: &AcceptRegion::Everything,
            lambda: 1.0,
            codebook: &[-1.0, 0.0, 1.0],
            segments: 3,
            max_duration: 2.0,
            dt: 0.01,
        };
        let (s, stats) = gen_warmup(&m, &State::from([0.0, 0.0, 0.0]), &draw, 25, &mut rng).unwrap();
        assert_eq!(s.len(), 25);
        assert_eq!(stats.draws, 25);
    }

    #[test]
    fn schedule_phases() {
        let s = Schedule::default();
        assert_eq!(s.rates(0).sphere, None);
        assert_eq!(s.rates(0).cone, Some(0.5 * s.lambda_cone));
        assert_eq!(s.rates(30).sphere, Some(s.lambda_sphere));
        assert_eq!(s.rates(45).sphere, Some(s.lambda_sphere * 1.5));
        assert_eq!(s.rates(80).cone, None);
        assert_eq!(s.rates(80).sphere, Some(s.lambda_sphere * 5.0));
    }
}
