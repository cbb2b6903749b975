use serde_json::Value;
use ttr_web::{corridor_demo_json, filter_trial_json, optimal_path_json};

fn parse(s: String) -> Value {
    serde_json::from_str(&s).unwrap()
}

#[test]
fn optimal_path_ends_at_the_origin() {
    let v = parse(optimal_path_json(-12.0, 5.0, 2.0).unwrap());
    assert!((v["time"].as_f64().unwrap() - 14.8634).abs() < 5e-5);
    assert_eq!(v["word"], "RSL");
    let path = v["path"].as_array().unwrap();
    assert_eq!(path[0][0], -12.0);
    let last = path.last().unwrap();
    assert!(last[0].as_f64().unwrap().hypot(last[1].as_f64().unwrap()) < 1e-6);
    assert!(optimal_path_json(f64::NAN, 0.0, 0.0).is_err());
}

#[test]
fn filter_trial_reports_the_expected_rate() {
    let v = parse(filter_trial_json(1.0, 4f64.ln(), 20_000, 3).unwrap());
    assert_eq!(v["expected"], 0.25);
    assert!((v["rate"].as_f64().unwrap() - 0.25).abs() < 0.02);
    assert!(filter_trial_json(0.0, 1.0, 10, 0).is_err());
}

#[test]
fn corridor_demo_is_deterministic() {
    let a = corridor_demo_json(-4.0, 1.0, 0.0, 60, 5).unwrap();
    assert_eq!(a, corridor_demo_json(-4.0, 1.0, 0.0, 60, 5).unwrap());
    let v = parse(a);
    assert_eq!(v["samples"], 60);
    assert!(v["points"].as_u64().unwrap() >= 120);
    for d in v["dots"].as_array().unwrap() {
        assert!(d[2].as_f64().unwrap() >= 0.0);
    }
    let outcome = v["outcome"].as_str().unwrap();
    assert!(["SUCCESS", "FAIL_LOST", "FAIL_TIMEOUT"].contains(&outcome));
    assert!(corridor_demo_json(0.0, 0.0, 0.0, 0, 1).is_err());
}
