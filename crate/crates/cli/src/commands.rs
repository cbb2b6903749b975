use std::fs::{self, File, OpenOptions};
use std::io::{BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use serde::Serialize;
use ttr_core::corridor::Corridor;
use ttr_core::filters::AcceptRegion;
use ttr_core::io::{read_samples, write_log_line, write_samples};
use ttr_core::nnet::save_network;
use ttr_core::oracle::{brute_force_search, dubins_distance};
use ttr_core::sysdyn::{Dynamics, State};
use ttr_core::synthesis::rollout;
use ttr_core::training::{dynamic_step, gen_plant_pairs, gen_warmup, warm_up, TrainState, WarmupDraw};
use ttr_core::{Error, Result};

use crate::config::RunConfig;
use crate::plot::{render, Scene};

fn create(path: &Path) -> Result<BufWriter<File>> {
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir)?;
    }
    Ok(BufWriter::new(File::create(path)?))
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut w = create(path)?;
    serde_json::to_writer_pretty(&mut w, value)?;
    w.write_all(b"\n")?;
    w.flush()?;
    Ok(())
}

/// `"a,b,c"` into a state.
pub fn parse_state(text: &str) -> Result<State> {
    text.split(',')
        .map(|v| v.trim().parse::<f64>())
        .collect::<std::result::Result<Vec<_>, _>>()
        .map(State::from)
        .map_err(|_| Error::Argument(format!("{text:?} is not a comma-separated list of numbers")))
}

fn check_dim(model: &dyn Dynamics, x: &State) -> Result<()> {
    if x.dim() != model.dim() {
        return Err(Error::Argument(format!(
            "state {:?} has {} coordinates, the model has {}",
            x.as_slice(),
            x.dim(),
            model.dim()
        )));
    }
    Ok(())
}

/// The JSON sidecar stored next to a corridor CSV.
pub fn sidecar(path: &Path) -> PathBuf {
    path.with_extension("json")
}

pub fn load_corridor(path: &Path) -> Result<Corridor> {
    let meta = fs::read_to_string(sidecar(path))?;
    Corridor::read(BufReader::new(File::open(path)?), &meta)
}

#[derive(Serialize)]
struct WarmupReport {
    d1_pairs: usize,
    d1_draws: u64,
    d1_acceptance: f64,
    d2_samples: usize,
    d2_draws: u64,
    d2_acceptance: f64,
}

/// Generates and saves both warm-up datasets.
pub fn warmup(cfg: &RunConfig) -> Result<()> {
    let model = cfg.model.build()?;
    let x_t = cfg.x_t();
    let t = &cfg.training;
    let mut rng = t.warmup_rng();
    let codebook = model.primitives().to_vec();
    let region = |radius| AcceptRegion::Sphere {
        center: x_t.clone(),
        radius,
    };
    let (r1, r2) = (region(t.warmup.d1_radius), region(t.warmup.d2_radius));
    let draw = |region, lambda, max_duration| WarmupDraw {
        region,
        lambda,
        codebook: &codebook,
        segments: t.net.recurrence_depth,
        max_duration,
        dt: t.dt,
    };
    let (pairs, s1) = gen_plant_pairs(
        model.as_ref(),
        &x_t,
        &draw(&r1, t.warmup.d1_lambda, t.warmup.d1_max_duration),
        &t.net,
        t.warmup.d1_pairs,
        &mut rng,
    )?;
    let (d2, s2) = gen_warmup(
        model.as_ref(),
        &x_t,
        &draw(&r2, t.warmup.d2_lambda, t.warmup.d2_max_duration),
        t.warmup.d2_count,
        &mut rng,
    )?;

    let dir = &cfg.output_dir;
    write_json(&dir.join("config.json"), cfg)?;
    let mut w = csv::Writer::from_writer(create(&dir.join("d1.csv"))?);
    let u_w = t.net.layer_widths[2];
    let names = model.state_names();
    let header: Vec<String> = (0..u_w)
        .map(|i| format!("u{i}"))
        .chain(names.iter().map(|n| format!("next_{n}")))
        .collect();
    w.write_record(&header).map_err(|e| Error::Parse(e.to_string()))?;
    for p in &pairs {
        let rec: Vec<String> = p.u.iter().chain(&p.next).map(f64::to_string).collect();
        w.write_record(&rec).map_err(|e| Error::Parse(e.to_string()))?;
    }
    w.flush()?;
    let mut out = create(&dir.join("d2.csv"))?;
    write_samples(&names, &d2, &mut out)?;
    out.flush()?;

    let report = WarmupReport {
        d1_pairs: pairs.len(),
        d1_draws: s1.draws,
        d1_acceptance: s1.acceptance_rate(),
        d2_samples: d2.len(),
        d2_draws: s2.draws,
        d2_acceptance: s2.acceptance_rate(),
    };
    write_json(&dir.join("warmup_stats.json"), &report)?;
    println!(
        "D1: {} plant pairs from {} draws (acceptance {:.3})",
        report.d1_pairs, report.d1_draws, report.d1_acceptance
    );
    println!(
        "D2: {} samples from {} draws (acceptance {:.3})",
        report.d2_samples, report.d2_draws, report.d2_acceptance
    );
    Ok(())
}

pub struct TrainOptions {
    pub resume: Option<PathBuf>,
    pub stop_after: Option<usize>,
    pub quiet: bool,
}

/// Runs warm-up and the dynamic loop, or continues from a snapshot. A
/// snapshot is rewritten after every iteration.
pub fn train(cfg: &RunConfig, opts: &TrainOptions) -> Result<()> {
    let model = cfg.model.build()?;
    let dir = &cfg.output_dir;
    fs::create_dir_all(dir)?;
    // the resolved configuration, so a run can be repeated with `--config`
    write_json(&dir.join("config.json"), cfg)?;
    let snapshot_path = dir.join("snapshot.json");
    let log_path = dir.join("train_log.jsonl");
    let mut ts = match &opts.resume {
        Some(p) => {
            let ts: TrainState = serde_json::from_reader(BufReader::new(File::open(p)?))?;
            if ts.x_bar != cfg.x_bar() || ts.x_t != cfg.x_t() {
                return Err(Error::Config("the snapshot was taken for different x_bar or x_t".into()));
            }
            ts
        }
        None => {
            let w = warm_up(model.as_ref(), &cfg.x_t(), &cfg.training)?;
            if !opts.quiet {
                eprintln!("warm-up: D2 loss {:.4} -> {:.4}", w.d2_fit.0, w.d2_fit.1);
            }
            File::create(&log_path)?;
            let mut out = create(&dir.join("d2.csv"))?;
            write_samples(&model.state_names(), &w.d2, &mut out)?;
            out.flush()?;
            TrainState::new(model.as_ref(), &cfg.training, &w, &cfg.x_bar(), &cfg.x_t())?
        }
    };
    let mut log = OpenOptions::new().append(true).create(true).open(&log_path)?;
    while !ts.done {
        if opts.stop_after.is_some_and(|k| ts.iteration >= k) {
            eprintln!("stopped after iteration {}; resume from {}", ts.iteration, snapshot_path.display());
            return Ok(());
        }
        let entry = dynamic_step(model.as_ref(), &cfg.training, &mut ts)?;
        write_log_line(&entry, &mut log)?;
        if !opts.quiet {
            eprintln!(
                "iter {:3}  set {:4}  dist {:7.3}  loss {:.4}  near {:.2}",
                entry.iter, entry.train_set_size, entry.mean_dist_to_xbar, entry.loss, entry.near_fraction
            );
        }
        write_json(&snapshot_path, &ts)?;
    }

    let mut w = create(&dir.join("weights.json"))?;
    w.write_all(save_network(&cfg.training.net, &ts.weights)?.as_bytes())?;
    w.flush()?;
    let mut out = create(&dir.join("dataset.csv"))?;
    write_samples(&model.state_names(), &ts.train_set, &mut out)?;
    out.flush()?;
    println!("{} samples after {} iterations", ts.train_set.len(), ts.iteration);
    Ok(())
}

pub fn corridor(cfg: &RunConfig, datasets: &[PathBuf]) -> Result<()> {
    let model = cfg.model.build()?;
    let mut samples = Vec::new();
    for path in datasets {
        let file = File::open(path).map_err(|e| Error::Io(std::io::Error::new(e.kind(), format!("{}: {e}", path.display()))))?;
        samples.extend(read_samples(model.dim(), BufReader::new(file))?);
    }
    let c = Corridor::build(&samples, model.as_ref(), &cfg.x_t(), cfg.corridor.spacing, cfg.training.dt)?;
    let path = cfg.output_dir.join("corridor.csv");
    let mut out = create(&path)?;
    c.write_csv(&mut out)?;
    out.flush()?;
    let mut side = create(&sidecar(&path))?;
    side.write_all(c.meta_json()?.as_bytes())?;
    side.flush()?;
    println!("{} corridor points from {} samples", c.len(), samples.len());
    Ok(())
}

#[derive(Serialize)]
struct SummaryRow {
    start: Vec<f64>,
    trajectory: String,
    #[serde(flatten)]
    summary: ttr_core::synthesis::RolloutSummary,
}

pub fn synthesize(cfg: &RunConfig, corridor_path: &Path, starts: &[State]) -> Result<bool> {
    let model = cfg.model.build()?;
    let c = load_corridor(corridor_path)?;
    let starts = if starts.is_empty() { vec![cfg.x_bar()] } else { starts.to_vec() };
    let mut rows = Vec::new();
    let mut all_ok = true;
    for (i, x) in starts.iter().enumerate() {
        check_dim(model.as_ref(), x)?;
        let r = rollout(&c, model.as_ref(), x, &cfg.synthesis)?;
        let name = format!("rollout_{i}.csv");
        let mut out = create(&cfg.output_dir.join(&name))?;
        r.write_csv(&model.state_names(), &mut out)?;
        out.flush()?;
        let oracle = cfg.model.is_unit_dubins().then(|| dubins_distance(x, c.target()).0);
        let summary = r.summary(oracle);
        println!(
            "{:?}: {} after {:.2} s{}",
            x.as_slice(),
            summary.outcome,
            summary.elapsed,
            summary.ratio.map(|q| format!(" (ratio {q:.3})")).unwrap_or_default()
        );
        all_ok &= summary.outcome == ttr_core::synthesis::Outcome::Success;
        rows.push(SummaryRow {
            start: x.as_slice().to_vec(),
            trajectory: name,
            summary,
        });
    }
    write_json(&cfg.output_dir.join("rollouts.json"), &rows)?;
    Ok(all_ok)
}

pub fn evaluate(cfg: &RunConfig, corridor_path: &Path, states: &[State]) -> Result<()> {
    let model = cfg.model.build()?;
    let c = load_corridor(corridor_path)?;
    let states = if states.is_empty() { vec![cfg.x_bar()] } else { states.to_vec() };
    let exact = cfg.model.is_unit_dubins();
    let path = cfg.output_dir.join("evaluation.csv");
    let mut w = csv::Writer::from_writer(create(&path)?);
    let err = |e: csv::Error| Error::Parse(e.to_string());
    w.write_record(["state", "v_hat", "oracle_v", "ratio", "conservative", "support_distance"])
        .map_err(err)?;
    println!(
        "{:<24} {:>9} {:>9} {:>7}  {:<13} {:>8}",
        "state", "V_hat", "oracle V", "ratio", "conservative?", "support"
    );
    for x in &states {
        check_dim(model.as_ref(), x)?;
        let k = cfg.corridor.query_k;
        let v_hat = c.query_value(x, k)?;
        let near = c.neighbors(x, k);
        let support = near.last().map(|n| n.1).unwrap_or(f64::NAN);
        let label = format!("{:?}", x.as_slice());
        let (ov, ratio, cons) = if exact {
            let v = dubins_distance(x, c.target()).0;
            // the guarantee lives at the stored points the estimate is read from
            let ok = near.iter().all(|&(i, _)| {
                let p = &c.points()[i];
                p.value >= dubins_distance(&p.state, c.target()).0 - 1e-6
            });
            (format!("{v:.4}"), format!("{:.3}", v_hat / v), ok.to_string())
        } else {
            (String::new(), String::new(), String::new())
        };
        println!("{label:<24} {v_hat:>9.4} {ov:>9} {ratio:>7}  {cons:<13} {support:>8.3}");
        w.write_record([label, v_hat.to_string(), ov, ratio, cons, support.to_string()])
            .map_err(err)?;
    }
    w.flush()?;
    Ok(())
}

#[derive(Serialize)]
struct OracleAnswer {
    time: f64,
    word: String,
    segments: [f64; 3],
    #[serde(skip_serializing_if = "Option::is_none")]
    brute_force_time: Option<f64>,
}

pub fn oracle(from: &State, to: &State, brute: Option<(f64, f64)>) -> Result<()> {
    if from.dim() != 3 || to.dim() != 3 {
        return Err(Error::Argument("oracle states need three coordinates (px,py,theta)".into()));
    }
    let (time, path) = dubins_distance(from, to);
    let brute_force_time = match brute {
        Some((tol, grid)) => Some(brute_force_search(from, to, tol, grid)?.total),
        None => None,
    };
    let answer = OracleAnswer {
        time,
        word: path.word.to_string(),
        segments: path.segment_lengths,
        brute_force_time,
    };
    println!("{}", serde_json::to_string_pretty(&answer)?);
    Ok(())
}

pub struct PlotInput {
    pub corridor: Option<PathBuf>,
    pub trajectories: Vec<PathBuf>,
    pub contours: Option<f64>,
    pub out: PathBuf,
}

pub fn plot(input: &PlotInput) -> Result<()> {
    let mut scene = Scene {
        contour_heading: input.contours,
        ..Scene::default()
    };
    let mut titles = Vec::new();
    if let Some(p) = &input.corridor {
        let c = load_corridor(p)?;
        scene.dots = c.points().iter().map(|q| (q.state[0], q.state[1], q.value)).collect();
        scene.target = Some((c.target()[0], c.target()[1]));
        titles.push(format!("corridor ({} points)", c.len()));
    }
    for p in &input.trajectories {
        let mut r = csv::Reader::from_reader(File::open(p)?);
        let mut path = Vec::new();
        for rec in r.records() {
            let rec = rec.map_err(|e| Error::Parse(e.to_string()))?;
            let num = |i: usize| -> Result<f64> {
                rec.get(i)
                    .and_then(|v| v.parse().ok())
                    .ok_or_else(|| Error::Parse(format!("{}: bad trajectory row", p.display())))
            };
            path.push((num(1)?, num(2)?));
        }
        scene.paths.push(path);
    }
    if !input.trajectories.is_empty() {
        titles.push(format!("{} trajectories", input.trajectories.len()));
    }
    if scene.dots.is_empty() && scene.paths.is_empty() {
        return Err(Error::Argument("plot needs --corridor or --trajectory".into()));
    }
    scene.title = titles.join(", ");
    let mut out = create(&input.out)?;
    out.write_all(render(&scene).as_bytes())?;
    out.flush()?;
    println!("wrote {}", input.out.display());
    Ok(())
}
