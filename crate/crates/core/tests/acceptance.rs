//! End-to-end acceptance run.
//!
//! Each criterion is its own test and writes one `criterion N: PASS|FAIL`
//! line straight to stdout, so the verdicts show up even when the harness
//! captures output. The expensive part, five seeded training runs towards
//! each of the four reference states, is computed once and shared.
//!
//! Run with `cargo test -p ttr-core --test acceptance -- --test-threads 1`
//! to keep the lines in criterion order.

use std::f64::consts::PI;
use std::io::Write;
use std::sync::OnceLock;
use std::time::{Duration, Instant};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use ttr_core::corridor::{Corridor, CorridorMeta, CorridorPoint};
use ttr_core::filters::{exp_filter, length_filter, AcceptRegion};
use ttr_core::io::write_samples;
use ttr_core::nnet::{forward, kink_margin, surrogate_gradient, surrogate_loss, NetConfig, RnnWeights, TrainExample};
use ttr_core::oracle::{brute_force_search, dubins_distance};
use ttr_core::synthesis::{rollout, Outcome, Rollout, SynthesisConfig};
use ttr_core::sysdyn::{propagate_forward, ControlSequence, Dubins, Dynamics, State, StateMetric};
use ttr_core::training::{run_dynamic, warm_up, Sample, TrainState, TrainingConfig, FEASIBILITY_TOL};

const STATES: [[f64; 3]; 4] = [[-10.0, 0.0, 0.0], [-12.0, 5.0, 2.0], [1.0, 1.0, 6.0], [10.0, -4.0, -3.0]];
const SEEDS: u64 = 5;
const SPACING: f64 = 0.1;

fn report(n: usize, pass: bool, detail: &str) {
    let line = format!("criterion {n}: {} | {detail}\n", if pass { "PASS" } else { "FAIL" });
    let mut out = std::io::stdout().lock();
    out.write_all(line.as_bytes()).unwrap();
    out.flush().unwrap();
}

fn note(text: &str) {
    let mut out = std::io::stdout().lock();
    out.write_all(format!("    {text}\n").as_bytes()).unwrap();
    out.flush().unwrap();
}

fn origin() -> State {
    State::from([0.0, 0.0, 0.0])
}

struct Run {
    seed: u64,
    x_bar: State,
    iterations: usize,
    samples: Vec<Sample>,
    corridor: Corridor,
    rollout: Rollout,
}

struct Batch {
    runs: Vec<Run>,
    /// Runs whose training loop gave up, as (seed, state, reason).
    failed: Vec<(u64, State, String)>,
    elapsed: Duration,
}

impl Batch {
    fn failures_for(&self, x: &State) -> String {
        let seeds: Vec<String> = self.failed.iter().filter(|f| &f.1 == x).map(|f| format!("s{}", f.0)).collect();
        if seeds.is_empty() {
            String::new()
        } else {
            format!(" (training failed for {})", seeds.join(", "))
        }
    }
}

fn train_one(m: &Dubins, cfg: &TrainingConfig, warm: &ttr_core::training::Warmup, x_bar: &State) -> ttr_core::Result<Run> {
    let mut ts = TrainState::new(m, cfg, warm, x_bar, &origin())?;
    run_dynamic(m, cfg, &mut ts, |_, _| Ok(()))?;
    // the warm-up samples are traced too, as the command-line pipeline does
    let traced: Vec<Sample> = ts.train_set.iter().chain(&warm.d2).cloned().collect();
    let corridor = Corridor::build(&traced, m, &origin(), SPACING, cfg.dt)?;
    let rollout = rollout(&corridor, m, x_bar, &SynthesisConfig::default())?;
    Ok(Run {
        seed: cfg.seed,
        x_bar: x_bar.clone(),
        iterations: ts.iteration,
        samples: ts.train_set,
        corridor,
        rollout,
    })
}

fn batch() -> &'static Batch {
    static BATCH: OnceLock<Batch> = OnceLock::new();
    BATCH.get_or_init(|| {
        let start = Instant::now();
        let m = Dubins::default();
        let mut runs = Vec::new();
        let mut failed = Vec::new();
        for seed in 0..SEEDS {
            let cfg = TrainingConfig {
                seed,
                ..TrainingConfig::dubins()
            };
            let warm = warm_up(&m, &origin(), &cfg).unwrap();
            for x in STATES {
                let run = match train_one(&m, &cfg, &warm, &State::from(x)) {
                    Ok(run) => run,
                    Err(e) => {
                        note(&format!("seed {seed} towards {x:?} failed: {e}  [{:.0} s so far]", start.elapsed().as_secs_f64()));
                        failed.push((seed, State::from(x), e.to_string()));
                        continue;
                    }
                };
                note(&format!(
                    "trained seed {seed} towards {x:?}: {} iterations, {} samples, {} corridor points, rollout {} in {:.2} s  [{:.0} s so far]",
                    run.iterations,
                    run.samples.len(),
                    run.corridor.len(),
                    run.rollout.outcome,
                    run.rollout.elapsed,
                    start.elapsed().as_secs_f64()
                ));
                runs.push(run);
            }
        }
        Batch {
            runs,
            failed,
            elapsed: start.elapsed(),
        }
    })
}

/// Least optimal time from `x` to any state within `r` of the origin,
/// scanned over a grid on the ball.
fn time_to_ball(x: &State, r: f64) -> f64 {
    let steps = 6;
    let mut best = f64::INFINITY;
    for i in 0..=steps {
        for j in 0..=steps {
            for k in 0..=steps {
                let g = |n: i32| r * (2.0 * n as f64 / steps as f64 - 1.0);
                let y = [g(i), g(j), g(k)];
                if y.iter().map(|c| c * c).sum::<f64>() <= r * r {
                    best = best.min(dubins_distance(x, &State::from(y)).0);
                }
            }
        }
    }
    best
}

#[test]
fn criterion_1_conservatism() {
    let b = batch();
    let start = Instant::now();
    let (mut total, mut below_exact, mut bad, mut tightest) = (0usize, 0usize, 0usize, f64::INFINITY);
    for run in &b.runs {
        for p in run.corridor.points() {
            let v = dubins_distance(&p.state, &origin()).0;
            total += 1;
            if p.value >= v - 1e-6 {
                tightest = tightest.min(p.value - v);
                continue;
            }
            // Stored trajectories only reach the target to within the
            // feasibility tolerance, and the optimal time jumps by a full turn
            // across the target's turning circles. Judge such points against
            // the tolerance ball instead.
            below_exact += 1;
            let relaxed = time_to_ball(&p.state, FEASIBILITY_TOL);
            note(&format!(
                "{:?}: value {:.4} below the exact optimum {v:.4}, optimum into the {FEASIBILITY_TOL} ball {relaxed:.4}",
                p.state.as_slice(),
                p.value
            ));
            tightest = tightest.min(p.value - relaxed);
            if p.value < relaxed - 1e-6 {
                bad += 1;
            }
        }
    }
    let secs = start.elapsed().as_secs_f64();
    let pass = bad == 0 && total > 0 && secs < 30.0;
    report(
        1,
        pass,
        &format!(
            "{total} corridor points over {} runs, {bad} below the optimum ({below_exact} below the exact-target optimum and judged against the feasibility ball), smallest margin {tightest:.2e} s, check took {secs:.2} s",
            b.runs.len()
        ),
    );
    assert!(pass);
}

#[test]
fn criterion_2_reference_values() {
    let start = Instant::now();
    let want = [10.00, 14.84, 7.40, 13.36];
    let mut pass = true;
    let mut parts = Vec::new();
    for (x, w) in STATES.iter().zip(want) {
        let (v, path) = dubins_distance(&State::from(*x), &origin());
        let ok = (v - w).abs() <= 0.01;
        pass &= ok;
        parts.push(format!("{x:?} -> {v:.4} {} (want {w:.2}{})", path.word, if ok { "" } else { ", off" }));
    }
    report(2, pass, &format!("{} in {:?}", parts.join("; "), start.elapsed()));
    if !pass {
        // independent evidence for the closed-form values
        for x in &STATES[1..] {
            let x = State::from(*x);
            let p = brute_force_search(&x, &origin(), 0.05, 0.01).unwrap();
            let exact_to_reached = dubins_distance(&x, &p.endpoint).0;
            note(&format!(
                "grid search from {:?}: {:.3} s to a state within 0.05 of the origin (exact time to that state {:.4})",
                x.as_slice(),
                p.total,
                exact_to_reached
            ));
        }
    }
    assert!(pass);
}

#[test]
fn criterion_3_approximation_band() {
    let b = batch();
    let eps = TrainingConfig::dubins().schedule.epsilon;
    let mut pass = b.elapsed <= Duration::from_secs(30 * 60);
    let mut parts = Vec::new();
    for x in STATES {
        let x = State::from(x);
        let v = dubins_distance(&x, &origin()).0;
        let mut best: Option<(f64, f64, u64)> = None;
        for run in b.runs.iter().filter(|r| r.x_bar == x) {
            let (i, dist) = run.corridor.nearest(&x);
            let v_hat = run.corridor.points()[i].value;
            note(&format!(
                "seed {} {:?}: nearest corridor point {dist:.3} away, V_hat {v_hat:.3}, V {v:.3}, ratio {:.3}",
                run.seed,
                x.as_slice(),
                v_hat / v
            ));
            // a value read from far away says nothing about this state
            if dist <= eps && best.map_or(true, |bst| v_hat < bst.0) {
                best = Some((v_hat, dist, run.seed));
            }
        }
        match best {
            Some((v_hat, dist, seed)) => {
                let mut ok = v_hat / v <= 2.0;
                if x[0] == -10.0 {
                    ok &= v_hat <= 1.5 * 10.0;
                }
                pass &= ok;
                parts.push(format!(
                    "{:?} V_hat {v_hat:.2}/V {v:.2} = {:.3} (seed {seed}, {dist:.2} away){}",
                    x.as_slice(),
                    v_hat / v,
                    b.failures_for(&x)
                ));
            }
            None => {
                pass = false;
                parts.push(format!("{:?} no seed put a corridor point within {eps}{}", x.as_slice(), b.failures_for(&x)));
            }
        }
    }
    report(
        3,
        pass,
        &format!("{}; training for all {} runs took {:.0} s", parts.join("; "), b.runs.len(), b.elapsed.as_secs_f64()),
    );
    assert!(pass);
}

/// Shortest time in which the position can enter the disc of radius `tol`
/// around the origin, whatever the heading on arrival. Scanned over the
/// circle and all headings, so slightly pessimistic.
fn time_to_disc(x: &State, tol: f64) -> f64 {
    let mut best = f64::INFINITY;
    for i in 0..180 {
        let a = 2.0 * PI * i as f64 / 180.0;
        for j in 0..72 {
            let h = 2.0 * PI * j as f64 / 72.0;
            let y = State::from([tol * a.cos(), tol * a.sin(), h]);
            best = best.min(dubins_distance(x, &y).0);
        }
    }
    best
}

#[test]
fn criterion_4_closed_loop() {
    let b = batch();
    let control_dt = SynthesisConfig::default().control_dt;
    let reach = SynthesisConfig::default().reach_tol;
    let mut pass = true;
    let mut parts = Vec::new();
    for x in STATES {
        let x = State::from(x);
        let v = dubins_distance(&x, &origin()).0;
        let floor = time_to_disc(&x, reach);
        let mut ok_any = false;
        let mut outcomes = Vec::new();
        for run in b.runs.iter().filter(|r| r.x_bar == x) {
            let r = &run.rollout;
            let ok = r.outcome == Outcome::Success && r.elapsed <= 2.0 * v && r.elapsed >= v - control_dt;
            ok_any |= ok;
            outcomes.push(format!("s{} {} {:.2}", run.seed, r.outcome, r.elapsed));
        }
        pass &= ok_any;
        parts.push(format!("{:?} oracle {v:.2}: [{}]{}", x.as_slice(), outcomes.join(", "), b.failures_for(&x)));
        note(&format!(
            "{:?}: fastest possible entry into the {reach} disc is {floor:.2} s, {:.2} s ahead of the oracle time",
            x.as_slice(),
            v - floor
        ));
    }
    report(
        4,
        pass,
        &format!("needs SUCCESS with oracle - {control_dt} <= elapsed <= 2 oracle; {}", parts.join("; ")),
    );
    assert!(pass);
}

#[test]
fn criterion_5_certificates() {
    let b = batch();
    let m = Dubins::default();
    let all: Vec<&Sample> = b.runs.iter().flat_map(|r| &r.samples).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(55);
    let mut worst: f64 = 0.0;
    for _ in 0..100 {
        let s = all[rng.gen_range(0..all.len())];
        let end = propagate_forward(&m, &s.state, &s.control, 0.01).unwrap();
        worst = worst.max(m.metric().distance(end.as_slice(), origin().as_slice()));
    }
    let pass = worst <= FEASIBILITY_TOL;
    report(5, pass, &format!("100 of {} stored samples replayed, largest miss {worst:.2e}", all.len()));
    assert!(pass);
}

#[test]
fn criterion_6_filter_statistics() {
    let metric = StateMetric::dubins(1.0);
    let ball = AcceptRegion::Sphere {
        center: origin(),
        radius: 1.0,
    };
    let mut pass = true;
    let mut parts = Vec::new();
    let mut rng = ChaCha8Rng::seed_from_u64(66);
    for (lambda, d) in [(1.0, 0.5), (1.0, 1.0), (1.0, 2.0)] {
        let x = [1.0 + d, 0.0, 0.0];
        let n = 100_000;
        let hits = (0..n).filter(|_| exp_filter(&metric, &x, &ball, lambda, &mut rng)).count();
        let rate = hits as f64 / n as f64;
        let want = (-lambda * d).exp();
        pass &= (rate - want).abs() <= 0.01;
        parts.push(format!("lambda*d {:.1}: {rate:.4} vs {want:.4}", lambda * d));
    }
    let twin = State::from([2.0, 1.0, 0.3]);
    let (mut cheap, mut dear) = (0, 0);
    for _ in 0..10_000 {
        let kept = length_filter(vec![(twin.clone(), 1.0), (twin.clone(), 100.0)], &metric, 1.0, 0.5, &mut rng);
        cheap += usize::from(!kept.iter().any(|k| k.1 == 1.0));
        dear += usize::from(!kept.iter().any(|k| k.1 == 100.0));
    }
    let (cheap, dear) = (cheap as f64 / 1e4, dear as f64 / 1e4);
    pass &= dear > 0.95 && cheap < 0.40;
    report(
        6,
        pass,
        &format!("{}; twins removed: cost 100 {:.1}%, cost 1 {:.1}%", parts.join(", "), 100.0 * dear, 100.0 * cheap),
    );
    assert!(pass);
}

fn lattice(h: f64, v: fn(&[f64; 3]) -> f64) -> Corridor {
    let mut points = Vec::new();
    for i in -4..=4 {
        for j in -4..=4 {
            for k in -4..=4 {
                let s = [1.0 + i as f64 * h, j as f64 * h, k as f64 * h];
                points.push(CorridorPoint {
                    state: State::from(s),
                    time: -v(&s),
                    value: v(&s),
                    sample: 0,
                });
            }
        }
    }
    let meta = CorridorMeta {
        state_names: vec!["px".into(), "py".into(), "theta".into()],
        metric: StateMetric::dubins(1.0),
        target: origin(),
        spacing: h,
        dt: 0.01,
        controls: vec![ControlSequence::empty()],
    };
    Corridor::from_parts(points, meta).unwrap()
}

#[test]
fn criterion_7_gradients() {
    // backpropagation through the full-size network
    let cfg = NetConfig::dubins();
    let mut rng = ChaCha8Rng::seed_from_u64(77);
    let (w, data) = loop {
        let mut w = RnnWeights::random(&cfg, &mut rng);
        w.b_l[cfg.duration_slot()] += 3.0;
        let data: Vec<TrainExample> = (0..3)
            .map(|_| {
                let input = State::from([rng.gen_range(-8.0..8.0), rng.gen_range(-8.0..8.0), rng.gen_range(-3.0..3.0)]);
                let u = (0..3).map(|_| [-1.0, 0.0, 1.0][rng.gen_range(0..3)]).collect();
                let tau = (0..3).map(|_| rng.gen_range(0.0..6.0)).collect();
                TrainExample {
                    input,
                    target: ControlSequence::new(u, tau).unwrap(),
                }
            })
            .collect();
        let smooth = data.iter().all(|ex| {
            let inside = forward(&w, &cfg, &ex.input)
                .unwrap()
                .durations()
                .iter()
                .all(|&d| d > 0.0 && d < cfg.max_duration);
            inside && kink_margin(&w, &cfg, &ex.input).unwrap() > 1e-6
        });
        if smooth {
            break (w, data);
        }
    };
    let (_, grad) = surrogate_gradient(&w, &cfg, &data).unwrap();
    let h = 1e-5;
    let mut worst: f64 = 0.0;
    let mut checked = 0;
    for t in 0..9 {
        let n = w.tensors()[t].len();
        for i in (0..n).step_by((n / 40).max(1)) {
            let mut plus = w.clone();
            plus.tensors_mut()[t][i] += h;
            let mut minus = w.clone();
            minus.tensors_mut()[t][i] -= h;
            let fd = (surrogate_loss(&plus, &cfg, &data).unwrap() - surrogate_loss(&minus, &cfg, &data).unwrap()) / (2.0 * h);
            let an = grad.tensors()[t][i];
            worst = worst.max((an - fd).abs() / an.abs().max(fd.abs()).max(1e-6));
            checked += 1;
        }
    }

    // value gradients on synthetic clouds
    let lin = lattice(0.1, |s| 2.0 * s[0] + 4.0);
    let g = lin.gradient(&State::from([1.03, 0.02, -0.01]), 0.05).unwrap();
    let lin_err = (g.components[0] - 2.0).abs().max(g.components[1].abs()).max(g.components[2].abs());
    let cube = |s: &[f64; 3]| s[0].powi(3);
    let errs: Vec<f64> = [0.1, 0.05, 0.025]
        .iter()
        .map(|&h| (lattice(h, cube).gradient(&State::from([1.0, 0.0, 0.0]), 0.5 * h).unwrap().components[0] - 3.0).abs())
        .collect();
    let orders: Vec<f64> = errs.windows(2).map(|w| (w[0] / w[1]).log2()).collect();
    let quad = (lattice(0.1, |s| s[0] * s[0]).gradient(&State::from([1.0, 0.0, 0.0]), 0.05).unwrap().components[0] - 2.0).abs();

    let pass = worst <= 1e-4 && lin_err <= 1e-9 && quad <= 1e-9 && orders.iter().all(|o| (o - 2.0).abs() < 0.1);
    report(
        7,
        pass,
        &format!(
            "backprop vs differences on {checked} weights: worst rel. error {worst:.2e}; linear field error {lin_err:.1e}; quadratic error {quad:.1e}; convergence orders {orders:.3?}"
        ),
    );
    assert!(pass);
}

#[test]
fn criterion_8_oracle_cross_check() {
    let start = Instant::now();
    let (tol, grid) = (0.2, 0.025);
    // a grid path ends somewhere in the tolerance ball, from which the goal
    // is at most this far away; that bounds how much it can undercut
    let mut slack: f64 = 0.0;
    for i in 0..=48 {
        for j in 0..96 {
            let (p, a) = (PI * i as f64 / 48.0, PI * j as f64 / 48.0);
            let y = State::from([tol * p.sin() * a.cos(), tol * p.sin() * a.sin(), tol * p.cos()]);
            slack = slack.max(dubins_distance(&y, &origin()).0);
        }
    }
    slack += 0.05;
    let m = Dubins::default();
    let mut rng = ChaCha8Rng::seed_from_u64(88);
    let (mut lo, mut hi, mut out_of_band, mut replay): (f64, f64, usize, f64) = (f64::INFINITY, f64::NEG_INFINITY, 0, 0.0);
    for _ in 0..200 {
        let r = 15.0 * rng.gen::<f64>().sqrt();
        let a = rng.gen_range(-PI..PI);
        let x = State::from([r * a.cos(), r * a.sin(), rng.gen_range(-PI..PI)]);
        let (exact, path) = dubins_distance(&x, &origin());
        let gap = brute_force_search(&x, &origin(), tol, grid).unwrap().total - exact;
        lo = lo.min(gap);
        hi = hi.max(gap);
        if gap < -slack || gap > 0.35 {
            out_of_band += 1;
        }
        let end = propagate_forward(&m, &x, &path.to_control(), 0.01).unwrap();
        replay = replay.max(m.metric().distance(end.as_slice(), origin().as_slice()));
    }
    let pass = out_of_band == 0 && replay <= 1e-6;
    report(
        8,
        pass,
        &format!(
            "200 states, tol {tol}, grid {grid}: brute - exact in [{lo:.3}, {hi:.3}] against [-{slack:.2}, 0.35], {out_of_band} outside; worst replay miss {replay:.1e}; {:.0} s",
            start.elapsed().as_secs_f64()
        ),
    );
    assert!(pass);
}

fn bytes(run: &Run) -> (Vec<u8>, Vec<u8>, Vec<u8>) {
    let names = Dubins::default().state_names();
    let (mut d, mut c, mut r) = (Vec::new(), Vec::new(), Vec::new());
    write_samples(&names, &run.samples, &mut d).unwrap();
    run.corridor.write_csv(&mut c).unwrap();
    run.rollout.write_csv(&names, &mut r).unwrap();
    (d, c, r)
}

#[test]
fn criterion_9_determinism() {
    let b = batch();
    let first = b.runs.iter().find(|r| r.seed == 0 && r.x_bar[0] == -10.0).unwrap();
    let m = Dubins::default();
    let cfg = TrainingConfig::dubins();
    let warm = warm_up(&m, &origin(), &cfg).unwrap();
    let again = train_one(&m, &cfg, &warm, &State::from(STATES[0])).unwrap();
    let (a, bb) = (bytes(first), bytes(&again));
    let pass = a == bb;
    report(
        9,
        pass,
        &format!(
            "seed 0 towards (-10,0,0) run twice: dataset {} B, corridor {} B, rollout {} B, {}",
            a.0.len(),
            a.1.len(),
            a.2.len(),
            if pass { "byte-identical" } else { "different" }
        ),
    );
    assert!(pass);
}
