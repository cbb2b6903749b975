use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use ttr_core::nnet::*;
use ttr_core::sysdyn::{ControlSequence, State};

fn small_cfg() -> NetConfig {
    NetConfig {
        recurrence_depth: 3,
        layer_widths: [4, 5, 5, 6],
        primitive_codebook: vec![-1.0, 0.0, 1.0],
        max_duration: 3.0,
        control_sample_step: 0.25,
        periodic_inputs: vec![2],
        segment_weight: 0.7,
        segment_time_scale: 1.5,
        duration_scale: 1.0,
    }
}

fn random_examples(rng: &mut ChaCha8Rng, count: usize) -> Vec<TrainExample> {
    (0..count)
        .map(|_| {
            let input = State::from([rng.gen_range(-2.0..2.0), rng.gen_range(-2.0..2.0), rng.gen_range(-3.0..3.0)]);
            let u: Vec<f64> = (0..3).map(|_| [-1.0, 0.0, 1.0][rng.gen_range(0..3)]).collect();
            let tau: Vec<f64> = (0..3).map(|_| rng.gen_range(0.0..3.0)).collect();
            TrainExample {
                input,
                target: ControlSequence::new(u, tau).unwrap(),
            }
        })
        .collect()
}

/// Draws weights and data until no example sits within `margin` of a kink.
fn smooth_problem(seed: u64, margin: f64) -> (NetConfig, RnnWeights, Vec<TrainExample>) {
    let mut cfg = small_cfg();
    // odd seeds also exercise a rescaled duration output
    if seed % 2 == 1 {
        cfg.duration_scale = 2.0;
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    loop {
        let mut w = RnnWeights::random(&cfg, &mut rng);
        // a positive duration bias keeps most draws off the zero clamp
        w.b_l[cfg.duration_slot()] += 1.5;
        let data = random_examples(&mut rng, 3);
        // clamped durations get a straight-through gradient that finite
        // differences cannot see, so keep every duration strictly inside
        let ok = data.iter().all(|ex| {
            let inside = forward(&w, &cfg, &ex.input)
                .unwrap()
                .durations()
                .iter()
                .all(|&d| d > 0.0 && d < cfg.max_duration);
            inside && kink_margin(&w, &cfg, &ex.input).unwrap() > margin
        });
        if ok {
            return (cfg, w, data);
        }
    }
}

#[test]
fn backprop_matches_central_differences() {
    let h = 1e-5;
    let mut worst: f64 = 0.0;
    let mut checked = 0;
    for seed in 0..12 {
        let (cfg, w, data) = smooth_problem(seed, 1e-6);
        let (_, grad) = surrogate_gradient(&w, &cfg, &data).unwrap();
        for t in 0..LAYER_NAMES.len() {
            for i in 0..w.tensors()[t].len() {
                let mut plus = w.clone();
                plus.tensors_mut()[t][i] += h;
                let mut minus = w.clone();
                minus.tensors_mut()[t][i] -= h;
                let fd = (surrogate_loss(&plus, &cfg, &data).unwrap()
                    - surrogate_loss(&minus, &cfg, &data).unwrap())
                    / (2.0 * h);
                let an = grad.tensors()[t][i];
                let rel = (an - fd).abs() / an.abs().max(fd.abs()).max(1e-6);
                assert!(rel <= 1e-4, "seed {seed} {} [{i}]: analytic {an} vs fd {fd}", LAYER_NAMES[t]);
                worst = worst.max(rel);
                checked += 1;
            }
        }
    }
    eprintln!("checked {checked} partials, worst relative error {worst:e}");
}

#[test]
fn overfits_a_single_example() {
    let cfg = small_cfg();
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let w = RnnWeights::random(&cfg, &mut rng);
    let ex = random_examples(&mut rng, 1);
    let data = vec![ex[0].clone(); 8];
    let (w2, report) = train_full(&w, &cfg, &data, 200, RpropParams::default()).unwrap();
    // full training keeps the best weights it visits
    let best = report.losses.iter().cloned().fold(f64::INFINITY, f64::min);
    assert_eq!(report.last(), best);
    assert_eq!(report.last(), surrogate_loss(&w2, &cfg, &data).unwrap());
    assert!(report.last() < 0.05 * report.initial(), "{} -> {}", report.initial(), report.last());
}

#[test]
fn zero_epochs_is_a_no_op() {
    let cfg = small_cfg();
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let w = RnnWeights::random(&cfg, &mut rng);
    let data = random_examples(&mut rng, 4);
    let (w2, report) = train_full(&w, &cfg, &data, 0, RpropParams::default()).unwrap();
    assert_eq!(w, w2);
    assert_eq!(report.losses.len(), 1);
    assert_eq!(report.last(), surrogate_loss(&w, &cfg, &data).unwrap());
}

#[test]
fn empty_datasets_are_rejected() {
    let cfg = small_cfg();
    let w = RnnWeights::zeros(&cfg);
    assert!(train_full(&w, &cfg, &[], 5, RpropParams::default()).is_err());
    assert!(train_plant(&w, &cfg, &[], 5, RpropParams::default()).is_err());
}

#[test]
fn plant_training_touches_only_the_plant_and_never_goes_uphill() {
    let cfg = small_cfg();
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let mut w = RnnWeights::random(&cfg, &mut rng);
    // start every output unit in its active range
    w.b_x.iter_mut().for_each(|b| *b = 2.0);
    let data: Vec<PlantExample> = (0..50)
        .map(|_| {
            let u = [-1.0, 0.0, 1.0][rng.gen_range(0..3)];
            let tau = rng.gen_range(0.0..3.0);
            PlantExample {
                u: cfg.encode_segment(u, tau),
                next: vec![tau.cos() + 1.0, tau.sin() + 1.0, u * tau + 3.0],
            }
        })
        .collect();
    let (w2, report) = train_plant(&w, &cfg, &data, 150, RpropParams::default()).unwrap();
    assert!(report.losses.windows(2).all(|p| p[1] <= p[0] + 1e-9));
    assert!(report.last() < 0.5 * report.initial(), "{} -> {}", report.initial(), report.last());
    assert_eq!(w.w_p, w2.w_p);
    assert_eq!(w.w_d1, w2.w_d1);
    assert_eq!(w.w_d2, w2.w_d2);
    assert_eq!(w.w_l, w2.w_l);
    assert_eq!(w.b_l, w2.b_l);
    assert_ne!(w.w_x, w2.w_x);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn forward_is_total_and_clamped(seed in any::<u64>(), px in -50.0..50.0f64, py in -50.0..50.0f64, th in -10.0..10.0f64) {
        let cfg = NetConfig::dubins();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut w = RnnWeights::random(&cfg, &mut rng);
        // scale up so the clamp is exercised on both ends
        for t in w.tensors_mut() {
            t.iter_mut().for_each(|v| *v *= 3.0);
        }
        let x = State::from([px, py, th]);
        let a = forward(&w, &cfg, &x).unwrap();
        prop_assert_eq!(a.len(), 3);
        prop_assert!(a.durations().iter().all(|d| (0.0..=cfg.max_duration).contains(d)));
        prop_assert!(a.primitives().iter().all(|u| cfg.primitive_codebook.contains(u)));
        prop_assert_eq!(a, forward(&w, &cfg, &x).unwrap());
    }
}
