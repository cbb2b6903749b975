//! Rectified-linear recurrent network that maps a desired start state to a
//! piecewise-constant control sequence, and its Rprop trainer.
//!
//! One unroll step has four layers:
//!
//! ```text
//! P  = relu(W_P X + b_P)
//! D  = relu(W_D1 P + W_D2 X + b_D)
//! U  = W_L D + b_L
//! X' = relu(W_X U + b_X)
//! ```
//!
//! `X` starts as the query state (heading wrapped) padded with zeros to the
//! plant width. Step `k` emits segment `k` of the control in forward order.
//! The first entries of `U` score the codebook primitives and the highest
//! score wins. The entry after them, clamped to `[0, max_duration]`, is the
//! duration. The remaining entries of `U` only feed the plant layer.
//!
//! # Training loss
//!
//! Sampling a control on a time grid gives a loss that is piecewise constant
//! in the durations, so its gradient is zero almost everywhere. Training
//! instead compares cell averages: time is cut into cells
//! `[-(c+1)h, -c h]` anchored at the target time, and each cell records the
//! mean control value and the fraction of the cell covered by the control.
//! Both are piecewise linear in the switch times. The coverage channel lets
//! the loss tell a straight segment (`u = 0`) from padding. In this loss each
//! primitive occupies a cell in proportion to its raw score, and the duration
//! clamp passes gradients through unchanged.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::sysdyn::{eval_control, wrap_angle, ControlSequence, State};

/// Shape and decoding parameters of the network.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NetConfig {
    /// Number of unroll steps, which is also the number of emitted segments.
    pub recurrence_depth: usize,
    /// Widths of the P, D, U and X layers.
    pub layer_widths: [usize; 4],
    pub primitive_codebook: Vec<f64>,
    /// Upper clamp on each emitted duration.
    pub max_duration: f64,
    /// Cell width of the loss discretization.
    pub control_sample_step: f64,
    /// Indices of periodic input coordinates, wrapped before entering the net.
    #[serde(default)]
    pub periodic_inputs: Vec<usize>,
    /// Weight of the per-segment matching term added to the cell loss.
    #[serde(default)]
    pub segment_weight: f64,
    /// Duration that counts as one unit of error in the per-segment term.
    #[serde(default = "unit_scale")]
    pub segment_time_scale: f64,
    /// Seconds per unit of the duration output.
    #[serde(default = "unit_scale")]
    pub duration_scale: f64,
}

fn unit_scale() -> f64 {
    1.0
}

impl NetConfig {
    pub fn dubins() -> Self {
        let max_duration = 20.0;
        NetConfig {
            recurrence_depth: 3,
            layer_widths: [10, 10, 6, 75],
            primitive_codebook: vec![-1.0, 0.0, 1.0],
            max_duration,
            control_sample_step: max_duration / 64.0,
            periodic_inputs: vec![2],
            segment_weight: 1.0,
            segment_time_scale: 3.0,
            duration_scale: 1.0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |m: &str| Err(Error::Config(m.to_string()));
        if self.recurrence_depth == 0 {
            return fail("recurrence_depth must be at least 1");
        }
        if self.layer_widths.iter().any(|&w| w == 0) {
            return fail("layer widths must be positive");
        }
        if self.layer_widths[2] < self.primitive_codebook.len() + 1 {
            return fail("the U layer needs one unit per codebook entry plus one for the duration");
        }
        if !(self.max_duration > 0.0) || !self.max_duration.is_finite() {
            return fail("max_duration must be positive");
        }
        if !(self.control_sample_step > 0.0) {
            return fail("control_sample_step must be positive");
        }
        if self.primitive_codebook.is_empty() || self.primitive_codebook.iter().any(|u| !u.is_finite()) {
            return fail("primitive_codebook must be a non-empty list of finite values");
        }
        if !(self.segment_weight >= 0.0) || !self.segment_weight.is_finite() {
            return fail("segment_weight must be non-negative");
        }
        if !(self.segment_time_scale > 0.0) || !self.segment_time_scale.is_finite() {
            return fail("segment_time_scale must be positive");
        }
        if !(self.duration_scale > 0.0) || !self.duration_scale.is_finite() {
            return fail("duration_scale must be positive");
        }
        Ok(())
    }

    /// Longest control the network can emit.
    pub fn horizon(&self) -> f64 {
        self.recurrence_depth as f64 * self.max_duration
    }

    /// Number of loss cells covering the horizon.
    pub fn cells(&self) -> usize {
        (self.horizon() / self.control_sample_step - 1e-9).ceil().max(1.0) as usize
    }

    /// Position of the duration unit in the U layer, right after the
    /// primitive scores.
    pub fn duration_slot(&self) -> usize {
        self.primitive_codebook.len()
    }

    /// Codebook index nearest to `u`; earlier entries win ties.
    pub fn primitive_index(&self, u: f64) -> usize {
        let mut best = 0;
        for (i, &c) in self.primitive_codebook.iter().enumerate().skip(1) {
            if (c - u).abs() < (self.primitive_codebook[best] - u).abs() {
                best = i;
            }
        }
        best
    }

    /// U-layer encoding of one segment: a one-hot score group followed by the
    /// duration, zero elsewhere.
    pub fn encode_segment(&self, u: f64, duration: f64) -> Vec<f64> {
        let mut out = vec![0.0; self.layer_widths[2]];
        out[self.primitive_index(u)] = 1.0;
        out[self.duration_slot()] = duration / self.duration_scale;
        out
    }

    /// Primitive and clamped duration read off a U vector. The primitive is
    /// the codebook entry whose one-hot code is nearest the score group, that
    /// is the highest score. Tied scores go to the entry of smallest
    /// magnitude, so an untrained network idles.
    pub fn decode_segment(&self, u: &[f64]) -> (f64, f64) {
        let m = self.duration_slot();
        let cb = &self.primitive_codebook;
        let mut best = 0;
        for i in 1..m {
            let calmer = cb[i].abs() < cb[best].abs() || (cb[i].abs() == cb[best].abs() && cb[i] < cb[best]);
            if u[i] > u[best] || (u[i] == u[best] && calmer) {
                best = i;
            }
        }
        (self.primitive_codebook[best], self.duration_of(u[m]))
    }

    /// Emitted duration for a raw duration output.
    pub fn duration_of(&self, raw: f64) -> f64 {
        (raw * self.duration_scale).clamp(0.0, self.max_duration)
    }
}

/// Dense row-major matrix.
#[derive(Clone, Debug, PartialEq)]
pub struct Matrix {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl Matrix {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Matrix {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    pub fn from_rows(rows: Vec<Vec<f64>>) -> Result<Self> {
        let r = rows.len();
        let c = rows.first().map_or(0, Vec::len);
        if rows.iter().any(|row| row.len() != c) {
            return Err(Error::Config("ragged matrix rows".into()));
        }
        Ok(Matrix {
            rows: r,
            cols: c,
            data: rows.into_iter().flatten().collect(),
        })
    }

    pub fn to_rows(&self) -> Vec<Vec<f64>> {
        self.data.chunks(self.cols.max(1)).map(<[f64]>::to_vec).collect()
    }

    pub fn shape(&self) -> (usize, usize) {
        (self.rows, self.cols)
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.data
    }

    pub fn as_mut_slice(&mut self) -> &mut [f64] {
        &mut self.data
    }

    /// `out += A x`
    fn mul_add(&self, x: &[f64], out: &mut [f64]) {
        for (o, row) in out.iter_mut().zip(self.data.chunks_exact(self.cols)) {
            *o += row.iter().zip(x).map(|(a, b)| a * b).sum::<f64>();
        }
    }

    /// `out += A^T g`
    fn mul_t_add(&self, g: &[f64], out: &mut [f64]) {
        for (gi, row) in g.iter().zip(self.data.chunks_exact(self.cols)) {
            if *gi == 0.0 {
                continue;
            }
            for (o, a) in out.iter_mut().zip(row) {
                *o += gi * a;
            }
        }
    }

    /// `A += g x^T`
    fn add_outer(&mut self, g: &[f64], x: &[f64]) {
        for (gi, row) in g.iter().zip(self.data.chunks_exact_mut(self.cols)) {
            if *gi == 0.0 {
                continue;
            }
            for (a, xj) in row.iter_mut().zip(x) {
                *a += gi * xj;
            }
        }
    }
}

/// All trainable parameters.
#[derive(Clone, Debug, PartialEq)]
pub struct RnnWeights {
    pub w_p: Matrix,
    pub b_p: Vec<f64>,
    pub w_d1: Matrix,
    pub w_d2: Matrix,
    pub b_d: Vec<f64>,
    pub w_l: Matrix,
    pub b_l: Vec<f64>,
    pub w_x: Matrix,
    pub b_x: Vec<f64>,
}

/// Names used in the JSON document, in parameter order.
pub const LAYER_NAMES: [&str; 9] = ["W_P", "b_P", "W_D1", "W_D2", "b_D", "W_L", "b_L", "W_X", "b_X"];

impl RnnWeights {
    pub fn zeros(cfg: &NetConfig) -> Self {
        let [p, d, u, x] = cfg.layer_widths;
        RnnWeights {
            w_p: Matrix::zeros(p, x),
            b_p: vec![0.0; p],
            w_d1: Matrix::zeros(d, p),
            w_d2: Matrix::zeros(d, x),
            b_d: vec![0.0; d],
            w_l: Matrix::zeros(u, d),
            b_l: vec![0.0; u],
            w_x: Matrix::zeros(x, u),
            b_x: vec![0.0; x],
        }
    }

    /// Uniform in `[-1/sqrt(fan_in), 1/sqrt(fan_in)]` for every weight and bias.
    pub fn random<R: Rng + ?Sized>(cfg: &NetConfig, rng: &mut R) -> Self {
        let [p, d, _, x] = cfg.layer_widths;
        let u = cfg.layer_widths[2];
        let mut w = RnnWeights::zeros(cfg);
        let fans = [x, x, p, p + x, p + x, d, d, u, u];
        for (t, fan) in w.tensors_mut().into_iter().zip(fans) {
            let bound = 1.0 / (fan as f64).sqrt();
            for v in t.iter_mut() {
                *v = rng.gen_range(-bound..bound);
            }
        }
        w
    }

    pub fn tensors(&self) -> [&[f64]; 9] {
        [
            self.w_p.as_slice(),
            &self.b_p,
            self.w_d1.as_slice(),
            self.w_d2.as_slice(),
            &self.b_d,
            self.w_l.as_slice(),
            &self.b_l,
            self.w_x.as_slice(),
            &self.b_x,
        ]
    }

    pub fn tensors_mut(&mut self) -> [&mut [f64]; 9] {
        [
            self.w_p.as_mut_slice(),
            &mut self.b_p,
            self.w_d1.as_mut_slice(),
            self.w_d2.as_mut_slice(),
            &mut self.b_d,
            self.w_l.as_mut_slice(),
            &mut self.b_l,
            self.w_x.as_mut_slice(),
            &mut self.b_x,
        ]
    }

    pub fn param_count(&self) -> usize {
        self.tensors().iter().map(|t| t.len()).sum()
    }

    pub fn is_finite(&self) -> bool {
        self.tensors().iter().all(|t| t.iter().all(|v| v.is_finite()))
    }

    pub fn check_shapes(&self, cfg: &NetConfig) -> Result<()> {
        let want = RnnWeights::zeros(cfg);
        let shapes = |w: &RnnWeights| {
            [
                w.w_p.shape(),
                (w.b_p.len(), 1),
                w.w_d1.shape(),
                w.w_d2.shape(),
                (w.b_d.len(), 1),
                w.w_l.shape(),
                (w.b_l.len(), 1),
                w.w_x.shape(),
                (w.b_x.len(), 1),
            ]
        };
        for ((name, got), exp) in LAYER_NAMES.iter().zip(shapes(self)).zip(shapes(&want)) {
            if got != exp {
                return Err(Error::Config(format!("{name} has shape {got:?}, expected {exp:?}")));
            }
        }
        if !self.is_finite() {
            return Err(Error::Config("weights contain non-finite entries".into()));
        }
        Ok(())
    }

    fn flatten(&self) -> Vec<f64> {
        self.tensors().concat()
    }

    fn assign(&mut self, flat: &[f64]) {
        let mut rest = flat;
        for t in self.tensors_mut() {
            let (head, tail) = rest.split_at(t.len());
            t.copy_from_slice(head);
            rest = tail;
        }
    }

    /// Range of the plant parameters (`W_X`, `b_X`) in flattened order.
    fn plant_range(&self) -> std::ops::Range<usize> {
        let t = self.tensors();
        let start: usize = t[..7].iter().map(|t| t.len()).sum();
        start..start + t[7].len() + t[8].len()
    }
}

#[derive(Serialize, Deserialize)]
struct Layers {
    #[serde(rename = "W_P")]
    w_p: Vec<Vec<f64>>,
    #[serde(rename = "b_P")]
    b_p: Vec<f64>,
    #[serde(rename = "W_D1")]
    w_d1: Vec<Vec<f64>>,
    #[serde(rename = "W_D2")]
    w_d2: Vec<Vec<f64>>,
    #[serde(rename = "b_D")]
    b_d: Vec<f64>,
    #[serde(rename = "W_L")]
    w_l: Vec<Vec<f64>>,
    #[serde(rename = "b_L")]
    b_l: Vec<f64>,
    #[serde(rename = "W_X")]
    w_x: Vec<Vec<f64>>,
    #[serde(rename = "b_X")]
    b_x: Vec<f64>,
}

#[derive(Serialize, Deserialize)]
struct NetworkDoc {
    config: NetConfig,
    layers: Layers,
}

/// Serializes a network as `{"config": ..., "layers": {"W_P": [[...]], ...}}`.
/// Floats are written in shortest round-trip form, so loading is bit-exact.
pub fn save_network(cfg: &NetConfig, w: &RnnWeights) -> Result<String> {
    let doc = NetworkDoc {
        config: cfg.clone(),
        layers: Layers {
            w_p: w.w_p.to_rows(),
            b_p: w.b_p.clone(),
            w_d1: w.w_d1.to_rows(),
            w_d2: w.w_d2.to_rows(),
            b_d: w.b_d.clone(),
            w_l: w.w_l.to_rows(),
            b_l: w.b_l.clone(),
            w_x: w.w_x.to_rows(),
            b_x: w.b_x.clone(),
        },
    };
    Ok(serde_json::to_string_pretty(&doc)?)
}

pub fn load_network(text: &str) -> Result<(NetConfig, RnnWeights)> {
    let doc: NetworkDoc = serde_json::from_str(text)?;
    doc.config.validate()?;
    let l = doc.layers;
    let w = RnnWeights {
        w_p: Matrix::from_rows(l.w_p)?,
        b_p: l.b_p,
        w_d1: Matrix::from_rows(l.w_d1)?,
        w_d2: Matrix::from_rows(l.w_d2)?,
        b_d: l.b_d,
        w_l: Matrix::from_rows(l.w_l)?,
        b_l: l.b_l,
        w_x: Matrix::from_rows(l.w_x)?,
        b_x: l.b_x,
    };
    w.check_shapes(&doc.config)?;
    Ok((doc.config, w))
}

fn relu_inplace(v: &mut [f64]) {
    for x in v {
        *x = x.max(0.0);
    }
}

/// Activations of one unroll step, kept for backpropagation.
#[derive(Clone, Debug)]
struct Step {
    x: Vec<f64>,
    p_pre: Vec<f64>,
    p: Vec<f64>,
    d_pre: Vec<f64>,
    d: Vec<f64>,
    u: Vec<f64>,
    /// Pre-activation of the next plant state; empty on the last step.
    x_next_pre: Vec<f64>,
}

fn input_vector(cfg: &NetConfig, x: &[f64]) -> Result<Vec<f64>> {
    let width = cfg.layer_widths[3];
    if x.len() > width {
        return Err(Error::Config(format!(
            "state dimension {} exceeds plant width {width}",
            x.len()
        )));
    }
    let mut v = vec![0.0; width];
    v[..x.len()].copy_from_slice(x);
    for &i in &cfg.periodic_inputs {
        if i < x.len() {
            v[i] = wrap_angle(v[i]);
        }
    }
    Ok(v)
}

fn unroll(w: &RnnWeights, cfg: &NetConfig, x0: &[f64]) -> Result<Vec<Step>> {
    cfg.validate()?;
    let [p_w, d_w, u_w, _] = cfg.layer_widths;
    let mut x = input_vector(cfg, x0)?;
    let n = cfg.recurrence_depth;
    let mut steps = Vec::with_capacity(n);
    for k in 0..n {
        let mut p_pre = w.b_p.clone();
        w.w_p.mul_add(&x, &mut p_pre);
        let mut p = p_pre.clone();
        relu_inplace(&mut p);

        let mut d_pre = w.b_d.clone();
        w.w_d1.mul_add(&p, &mut d_pre);
        w.w_d2.mul_add(&x, &mut d_pre);
        let mut d = d_pre.clone();
        relu_inplace(&mut d);

        let mut u = w.b_l.clone();
        w.w_l.mul_add(&d, &mut u);

        let x_next_pre = if k + 1 < n {
            let mut z = w.b_x.clone();
            w.w_x.mul_add(&u, &mut z);
            z
        } else {
            Vec::new()
        };
        debug_assert_eq!((p.len(), d.len(), u.len()), (p_w, d_w, u_w));
        let next = x_next_pre.iter().map(|v| v.max(0.0)).collect();
        steps.push(Step {
            x: std::mem::replace(&mut x, next),
            p_pre,
            p,
            d_pre,
            d,
            u,
            x_next_pre,
        });
    }
    Ok(steps)
}

/// Control sequence proposed for start state `x`. Always has
/// `recurrence_depth` segments, some possibly of zero length.
pub fn forward(w: &RnnWeights, cfg: &NetConfig, x: &State) -> Result<ControlSequence> {
    let steps = unroll(w, cfg, x.as_slice())?;
    let (prims, durs) = steps
        .iter()
        .map(|s| cfg.decode_segment(&s.u))
        .unzip();
    ControlSequence::new(prims, durs)
}

/// Smallest distance from any non-differentiable point of the training loss
/// at input `x`: ReLU pre-activations, the duration clamp limits, and switch
/// times crossing a loss cell boundary. Finite-difference checks are only
/// meaningful when this is comfortably larger than the probe step.
pub fn kink_margin(w: &RnnWeights, cfg: &NetConfig, x: &State) -> Result<f64> {
    let steps = unroll(w, cfg, x.as_slice())?;
    let mut m = f64::INFINITY;
    for s in &steps {
        for v in s.p_pre.iter().chain(&s.d_pre).chain(&s.x_next_pre) {
            m = m.min(v.abs());
        }
        let tau = s.u[cfg.duration_slot()] * cfg.duration_scale;
        m = m.min(tau.abs()).min((tau - cfg.max_duration).abs());
    }
    let h = cfg.control_sample_step;
    let mut t = 0.0;
    for s in steps.iter().rev() {
        t -= cfg.duration_of(s.u[cfg.duration_slot()]);
        let k = (-t / h).round();
        m = m.min((-t - k * h).abs());
    }
    Ok(m)
}

/// Samples the control at `t = -horizon + k * step`, `k = 0..=ceil(horizon / step)`,
/// writing zero wherever the control is not defined (before `-T`, or past `0`
/// on the last sample when the grid overshoots).
pub fn discretize_control(seq: &ControlSequence, horizon: f64, step: f64) -> Vec<f64> {
    let count = (horizon / step - 1e-9).ceil() as usize + 1;
    (0..count)
        .map(|k| eval_control(seq, -horizon + k as f64 * step).unwrap_or(0.0))
        .collect()
}

/// Mean squared difference of the two discretized controls.
pub fn mse_loss(predicted: &ControlSequence, target: &ControlSequence, horizon: f64, step: f64) -> f64 {
    let a = discretize_control(predicted, horizon, step);
    let b = discretize_control(target, horizon, step);
    a.iter().zip(&b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>() / a.len() as f64
}

/// Cell averages of a control given as `(value, duration)` segments in forward
/// order ending at time zero: `(mean value, covered fraction)` per cell.
pub fn cell_embedding(segments: &[(f64, f64)], step: f64, cells: usize) -> (Vec<f64>, Vec<f64>) {
    let mut value = vec![0.0; cells];
    let mut cover = vec![0.0; cells];
    let mut end = 0.0;
    for &(u, tau) in segments.iter().rev() {
        let start = end - tau;
        for_each_overlap(start, end, step, cells, |c, ov| {
            value[c] += u * ov / step;
            cover[c] += ov / step;
        });
        end = start;
    }
    (value, cover)
}

/// Calls `f(cell, overlap)` for every cell meeting `[start, end]`.
fn for_each_overlap(start: f64, end: f64, step: f64, cells: usize, mut f: impl FnMut(usize, f64)) {
    if !(end > start) {
        return;
    }
    let first = ((-end / step).floor().max(0.0)) as usize;
    let last = ((-start / step).ceil() as usize).min(cells);
    for c in first..last {
        let hi = -(c as f64) * step;
        let lo = hi - step;
        let ov = end.min(hi) - start.max(lo);
        if ov > 0.0 {
            f(c, ov);
        }
    }
}

/// A supervised pair for [`train_full`].
#[derive(Clone, Debug, PartialEq)]
pub struct TrainExample {
    pub input: State,
    pub target: ControlSequence,
}

struct Prepared<'a> {
    input: &'a [f64],
    /// Per-primitive cell occupancy, `value[p][c]`.
    value: Vec<Vec<f64>>,
    cover: Vec<f64>,
    /// Target segments aligned with the network's steps as (codebook index,
    /// duration); missing leading segments are `None`.
    segs: Vec<Option<(usize, f64)>>,
}

fn prepare<'a>(cfg: &NetConfig, data: &'a [TrainExample]) -> Vec<Prepared<'a>> {
    let cells = cfg.cells();
    let h = cfg.control_sample_step;
    let m = cfg.duration_slot();
    let n = cfg.recurrence_depth;
    data.iter()
        .map(|ex| {
            let segs: Vec<(usize, f64)> = ex
                .target
                .segments()
                .map(|(u, tau)| (cfg.primitive_index(u), tau))
                .collect();
            let mut value = vec![vec![0.0; cells]; m];
            let mut cover = vec![0.0; cells];
            let mut end = 0.0;
            for &(p, tau) in segs.iter().rev() {
                let start = end - tau;
                for_each_overlap(start, end, h, cells, |c, ov| {
                    value[p][c] += ov / h;
                    cover[c] += ov / h;
                });
                end = start;
            }
            let mut aligned = vec![None; n.saturating_sub(segs.len())];
            aligned.extend(segs[segs.len().saturating_sub(n)..].iter().copied().map(Some));
            Prepared {
                input: ex.input.as_slice(),
                value,
                cover,
                segs: aligned,
            }
        })
        .collect()
}

/// Training loss of one example and, if `grad` is given, its gradient added
/// into `grad`.
///
/// The loss has two parts. The cell part compares, cell by cell on a grid
/// anchored at the end of the control, how much of each cell every primitive
/// occupies (weighted by the network's score for it) and how much of the cell
/// is covered at all. The segment part pulls each emitted segment's scores
/// towards the one-hot code of the matching target segment and its duration
/// towards the target duration.
fn example_loss(
    w: &RnnWeights,
    cfg: &NetConfig,
    ex: &Prepared<'_>,
    grad: Option<&mut RnnWeights>,
) -> Result<f64> {
    let steps = unroll(w, cfg, ex.input)?;
    let h = cfg.control_sample_step;
    let cells = ex.cover.len();
    let n = steps.len();
    let m = cfg.duration_slot();
    let durations: Vec<f64> = steps.iter().map(|s| cfg.duration_of(s.u[m])).collect();

    let mut value = vec![vec![0.0; cells]; m];
    let mut cover = vec![0.0; cells];
    let mut end = 0.0;
    for j in (0..n).rev() {
        let start = end - durations[j];
        let scores = &steps[j].u[..m];
        for_each_overlap(start, end, h, cells, |c, ov| {
            for p in 0..m {
                value[p][c] += scores[p] * ov / h;
            }
            cover[c] += ov / h;
        });
        end = start;
    }
    let rv: Vec<Vec<f64>> = value
        .iter()
        .zip(&ex.value)
        .map(|(a, b)| a.iter().zip(b).map(|(x, y)| x - y).collect())
        .collect();
    let rc: Vec<f64> = cover.iter().zip(&ex.cover).map(|(a, b)| a - b).collect();
    let scale = 1.0 / (2.0 * cells as f64);
    let mut loss = scale * (rv.iter().flatten().map(|r| r * r).sum::<f64>() + rc.iter().map(|r| r * r).sum::<f64>());

    let seg_scale = cfg.segment_weight / (2.0 * n as f64);
    let sigma = cfg.segment_time_scale;
    // residuals of the segment part: scores against one-hot, duration
    let seg_res: Vec<(Vec<f64>, f64)> = (0..n)
        .map(|k| {
            let (target, tau) = match ex.segs[k] {
                Some((p, tau)) => (Some(p), tau),
                None => (None, 0.0),
            };
            let scores = (0..m)
                .map(|p| steps[k].u[p] - if Some(p) == target { 1.0 } else { 0.0 })
                .collect();
            (scores, (durations[k] - tau) / sigma)
        })
        .collect();
    for (scores, et) in &seg_res {
        loss += seg_scale * (scores.iter().map(|e| e * e).sum::<f64>() + et * et);
    }
    let Some(grad) = grad else {
        return Ok(loss);
    };

    // derivative of the cell part with respect to each segment's scores and
    // to its start and end times
    let g = 2.0 * scale;
    let mut d_scores = vec![vec![0.0; m]; n];
    let mut d_start = vec![0.0; n];
    let mut d_end = vec![0.0; n];
    let mut end = 0.0;
    for j in (0..n).rev() {
        let tau = durations[j];
        let start = end - tau;
        let scores = &steps[j].u[..m];
        // loss change per unit of extra overlap with cell c
        let per_overlap = |c: usize| -> f64 {
            let v: f64 = (0..m).map(|p| rv[p][c] * scores[p]).sum();
            g * (v + rc[c]) / h
        };
        if tau == 0.0 {
            // one-sided derivative of growing an empty segment into the cell
            // below its position; moving it as a whole changes nothing
            let c = (-end / h).floor() as usize;
            if c < cells {
                let q = per_overlap(c);
                d_start[j] -= q;
                d_end[j] += q;
            }
        }
        for_each_overlap(start, end, h, cells, |c, ov| {
            let hi = -(c as f64) * h;
            let lo = hi - h;
            for p in 0..m {
                d_scores[j][p] += g * rv[p][c] * ov / h;
            }
            let q = per_overlap(c);
            if end < hi {
                d_end[j] += q;
            }
            if start > lo {
                d_start[j] -= q;
            }
        });
        end = start;
    }
    // end_j = -sum_{i>j} tau_i and start_j = -sum_{i>=j} tau_i
    let mut d_tau = vec![0.0; n];
    for i in 0..n {
        d_tau[i] = -(0..i).map(|j| d_end[j]).sum::<f64>() - (0..=i).map(|j| d_start[j]).sum::<f64>();
    }
    for (k, (scores, et)) in seg_res.iter().enumerate() {
        for p in 0..m {
            d_scores[k][p] += 2.0 * seg_scale * scores[p];
        }
        d_tau[k] += 2.0 * seg_scale * et / sigma;
    }

    let mut gx_next: Vec<f64> = Vec::new();
    for k in (0..n).rev() {
        let s = &steps[k];
        let mut gu = vec![0.0; s.u.len()];
        gu[..m].copy_from_slice(&d_scores[k]);
        // the duration clamp passes gradients straight through
        gu[m] = d_tau[k] * cfg.duration_scale;
        if !gx_next.is_empty() {
            let gz: Vec<f64> = gx_next
                .iter()
                .zip(&s.x_next_pre)
                .map(|(g, z)| if *z > 0.0 { *g } else { 0.0 })
                .collect();
            grad.w_x.add_outer(&gz, &s.u);
            add(&mut grad.b_x, &gz);
            w.w_x.mul_t_add(&gz, &mut gu);
        }
        grad.w_l.add_outer(&gu, &s.d);
        add(&mut grad.b_l, &gu);
        let mut gd = vec![0.0; s.d.len()];
        w.w_l.mul_t_add(&gu, &mut gd);
        mask_relu(&mut gd, &s.d_pre);
        grad.w_d1.add_outer(&gd, &s.p);
        grad.w_d2.add_outer(&gd, &s.x);
        add(&mut grad.b_d, &gd);
        let mut gp = vec![0.0; s.p.len()];
        w.w_d1.mul_t_add(&gd, &mut gp);
        mask_relu(&mut gp, &s.p_pre);
        grad.w_p.add_outer(&gp, &s.x);
        add(&mut grad.b_p, &gp);
        if k > 0 {
            let mut gx = vec![0.0; s.x.len()];
            w.w_d2.mul_t_add(&gd, &mut gx);
            w.w_p.mul_t_add(&gp, &mut gx);
            gx_next = gx;
        }
    }
    Ok(loss)
}

fn add(acc: &mut [f64], g: &[f64]) {
    for (a, b) in acc.iter_mut().zip(g) {
        *a += b;
    }
}

fn mask_relu(g: &mut [f64], pre: &[f64]) {
    for (gi, z) in g.iter_mut().zip(pre) {
        if *z <= 0.0 {
            *gi = 0.0;
        }
    }
}

/// Mean surrogate training loss over `data`.
pub fn surrogate_loss(w: &RnnWeights, cfg: &NetConfig, data: &[TrainExample]) -> Result<f64> {
    let prepared = prepare(cfg, data);
    batch(w, cfg, &prepared, false).map(|(l, _)| l)
}

/// Mean surrogate loss and its gradient with respect to every weight.
pub fn surrogate_gradient(w: &RnnWeights, cfg: &NetConfig, data: &[TrainExample]) -> Result<(f64, RnnWeights)> {
    let prepared = prepare(cfg, data);
    let (l, g) = batch(w, cfg, &prepared, true)?;
    Ok((l, g.expect("gradient requested")))
}

fn batch(
    w: &RnnWeights,
    cfg: &NetConfig,
    data: &[Prepared<'_>],
    want_grad: bool,
) -> Result<(f64, Option<RnnWeights>)> {
    let mut grad = want_grad.then(|| RnnWeights::zeros(cfg));
    let mut total = 0.0;
    for ex in data {
        total += example_loss(w, cfg, ex, grad.as_mut())?;
    }
    let inv = 1.0 / data.len() as f64;
    if let Some(g) = grad.as_mut() {
        for t in g.tensors_mut() {
            t.iter_mut().for_each(|v| *v *= inv);
        }
    }
    Ok((total * inv, grad))
}

/// Step-size constants of resilient backpropagation.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct RpropParams {
    pub eta_plus: f64,
    pub eta_minus: f64,
    pub delta0: f64,
    pub delta_min: f64,
    pub delta_max: f64,
}

impl Default for RpropParams {
    fn default() -> Self {
        RpropParams {
            eta_plus: 1.2,
            eta_minus: 0.5,
            delta0: 0.07,
            delta_min: 1e-6,
            delta_max: 50.0,
        }
    }
}

/// Loss after every epoch, starting with the loss before any update.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    pub losses: Vec<f64>,
    /// Number of epochs whose update was rolled back, or for full training
    /// the number of epochs that raised the loss.
    pub rejected: usize,
    /// Loss of the weights that training returns.
    pub final_loss: f64,
}

impl TrainReport {
    pub fn initial(&self) -> f64 {
        self.losses[0]
    }

    /// Loss of the returned weights.
    pub fn last(&self) -> f64 {
        self.final_loss
    }
}

/// Full-batch Rprop over the parameters in `active`.
///
/// An epoch whose update raises the loss is undone: the weights revert, every
/// step size shrinks by `eta_minus` and the sign memory is cleared. The
/// accepted loss sequence is therefore non-increasing.
fn rprop<F>(
    flat: &mut Vec<f64>,
    active: std::ops::Range<usize>,
    epochs: usize,
    params: RpropParams,
    mut eval: F,
) -> Result<TrainReport>
where
    F: FnMut(&[f64]) -> Result<(f64, Vec<f64>)>,
{
    let len = active.len();
    let mut step = vec![params.delta0; len];
    let mut prev = vec![0.0; len];
    let (mut loss, mut grad) = eval(flat)?;
    let mut report = TrainReport {
        losses: vec![loss],
        rejected: 0,
        final_loss: loss,
    };
    for _ in 0..epochs {
        let mut trial = flat.clone();
        for k in 0..len {
            let g = grad[active.start + k];
            let s = g * prev[k];
            if s > 0.0 {
                step[k] = (step[k] * params.eta_plus).min(params.delta_max);
            } else if s < 0.0 {
                step[k] = (step[k] * params.eta_minus).max(params.delta_min);
            }
            if s < 0.0 {
                prev[k] = 0.0;
            } else {
                trial[active.start + k] -= g.signum() * step[k];
                prev[k] = g;
            }
        }
        let (trial_loss, trial_grad) = eval(&trial)?;
        if trial_loss.is_finite() && trial_loss <= loss {
            *flat = trial;
            loss = trial_loss;
            grad = trial_grad;
        } else {
            report.rejected += 1;
            for s in step.iter_mut() {
                *s = (*s * params.eta_minus).max(params.delta_min);
            }
            prev.iter_mut().for_each(|p| *p = 0.0);
        }
        report.losses.push(loss);
    }
    report.final_loss = loss;
    Ok(report)
}

/// Resilient backpropagation with per-weight backtracking (iRprop+). A weight
/// whose gradient flips sign is moved back only when the loss went up. The
/// weights with the lowest loss seen are the ones left in `flat`.
fn rprop_plus<F>(flat: &mut [f64], epochs: usize, params: RpropParams, mut eval: F) -> Result<TrainReport>
where
    F: FnMut(&[f64]) -> Result<(f64, Vec<f64>)>,
{
    let len = flat.len();
    let mut step = vec![params.delta0; len];
    let mut prev = vec![0.0; len];
    let mut moved = vec![0.0; len];
    let (mut loss, mut grad) = eval(flat)?;
    let mut report = TrainReport {
        losses: vec![loss],
        rejected: 0,
        final_loss: loss,
    };
    let mut worse = false;
    let mut best = (loss, flat.to_vec());
    for _ in 0..epochs {
        for k in 0..len {
            let g = grad[k];
            let s = g * prev[k];
            if s < 0.0 {
                step[k] = (step[k] * params.eta_minus).max(params.delta_min);
                if worse {
                    flat[k] -= moved[k];
                }
                moved[k] = 0.0;
                prev[k] = 0.0;
                continue;
            }
            if s > 0.0 {
                step[k] = (step[k] * params.eta_plus).min(params.delta_max);
            }
            moved[k] = -g.signum() * step[k];
            flat[k] += moved[k];
            prev[k] = g;
        }
        let (next, next_grad) = eval(flat)?;
        if !next.is_finite() {
            return Err(Error::Diverged(next));
        }
        worse = next > loss;
        report.rejected += worse as usize;
        loss = next;
        grad = next_grad;
        if loss < best.0 {
            best = (loss, flat.to_vec());
        }
        report.losses.push(loss);
    }
    flat.copy_from_slice(&best.1);
    report.final_loss = best.0;
    Ok(report)
}

/// One plant-layer training pair: a `U` vector and the state it should map to.
#[derive(Clone, Debug, PartialEq)]
pub struct PlantExample {
    pub u: Vec<f64>,
    pub next: Vec<f64>,
}

/// Mean squared error of the plant layer on the first `next.len()` outputs.
pub fn plant_loss(w: &RnnWeights, data: &[PlantExample]) -> f64 {
    plant_batch(w, data, None)
}

fn plant_batch(w: &RnnWeights, data: &[PlantExample], mut grad: Option<&mut RnnWeights>) -> f64 {
    let mut total = 0.0;
    let mut count = 0usize;
    let width = w.b_x.len();
    for ex in data {
        let mut z = w.b_x.clone();
        w.w_x.mul_add(&ex.u, &mut z);
        let mut gz = vec![0.0; width];
        for (i, target) in ex.next.iter().enumerate() {
            let r = z[i].max(0.0) - target;
            total += r * r;
            if z[i] > 0.0 {
                gz[i] = 2.0 * r;
            }
        }
        count += ex.next.len();
        if let Some(g) = grad.as_deref_mut() {
            g.w_x.add_outer(&gz, &ex.u);
            add(&mut g.b_x, &gz);
        }
    }
    let inv = 1.0 / count.max(1) as f64;
    if let Some(g) = grad {
        g.w_x.as_mut_slice().iter_mut().for_each(|v| *v *= inv);
        g.b_x.iter_mut().for_each(|v| *v *= inv);
    }
    total * inv
}

/// Fits only `W_X` and `b_X` to the plant examples.
pub fn train_plant(
    w: &RnnWeights,
    cfg: &NetConfig,
    data: &[PlantExample],
    epochs: usize,
    params: RpropParams,
) -> Result<(RnnWeights, TrainReport)> {
    if data.is_empty() {
        return Err(Error::Argument("plant dataset is empty".into()));
    }
    let [_, _, u_w, x_w] = cfg.layer_widths;
    if data.iter().any(|e| e.u.len() != u_w || e.next.len() > x_w) {
        return Err(Error::Argument("plant example does not match layer widths".into()));
    }
    let mut flat = w.flatten();
    let range = w.plant_range();
    let mut scratch = w.clone();
    let report = rprop(&mut flat, range, epochs, params, |p| {
        scratch.assign(p);
        let mut g = RnnWeights::zeros(cfg);
        let l = plant_batch(&scratch, data, Some(&mut g));
        Ok((l, g.flatten()))
    })?;
    let mut out = w.clone();
    out.assign(&flat);
    Ok((out, report))
}

/// Fits all weights to the examples under the surrogate loss.
pub fn train_full(
    w: &RnnWeights,
    cfg: &NetConfig,
    data: &[TrainExample],
    epochs: usize,
    params: RpropParams,
) -> Result<(RnnWeights, TrainReport)> {
    if data.is_empty() {
        return Err(Error::Argument("training set is empty".into()));
    }
    w.check_shapes(cfg)?;
    let prepared = prepare(cfg, data);
    let mut flat = w.flatten();
    let mut scratch = w.clone();
    let report = rprop_plus(&mut flat, epochs, params, |p| {
        scratch.assign(p);
        let (l, g) = batch(&scratch, cfg, &prepared, true)?;
        Ok((l, g.expect("gradient requested").flatten()))
    })?;
    let mut out = w.clone();
    out.assign(&flat);
    Ok((out, report))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn seq(u: &[f64], tau: &[f64]) -> ControlSequence {
        ControlSequence::new(u.to_vec(), tau.to_vec()).unwrap()
    }

    #[test]
    fn zero_weights_give_zero_durations() {
        let cfg = NetConfig::dubins();
        let out = forward(&RnnWeights::zeros(&cfg), &cfg, &State::from([3.0, -2.0, 1.0])).unwrap();
        assert_eq!(out.len(), 3);
        assert_eq!(out.total_duration(), 0.0);
        assert!(out.primitives().iter().all(|&u| u == 0.0));
    }

    #[test]
    fn forward_is_deterministic_and_clamped() {
        let cfg = NetConfig::dubins();
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let w = RnnWeights::random(&cfg, &mut rng);
        let x = State::from([-10.0, 2.0, 0.4]);
        let a = forward(&w, &cfg, &x).unwrap();
        assert_eq!(a, forward(&w, &cfg, &x).unwrap());
        assert_eq!(a.len(), 3);
        assert!(a.durations().iter().all(|&d| (0.0..=cfg.max_duration).contains(&d)));
    }

    #[test]
    fn discretize_examples() {
        let v = discretize_control(&seq(&[1.0], &[4.0]), 4.0, 0.5);
        assert!(v.iter().all(|&x| x == 1.0));
        assert!(discretize_control(&ControlSequence::empty(), 4.0, 0.5).iter().all(|&x| x == 0.0));
        // boundary sample at -2 belongs to the later (straight) segment
        let v = discretize_control(&seq(&[1.0, 0.0], &[2.0, 2.0]), 4.0, 0.5);
        assert_eq!(v, vec![1.0, 1.0, 1.0, 1.0, 0.0, 0.0, 0.0, 0.0, 0.0]);
    }

    #[test]
    fn mse_examples() {
        let a = seq(&[1.0, 0.0], &[1.5, 2.5]);
        assert_eq!(mse_loss(&a, &a, 4.0, 0.4), 0.0);
        let ones = seq(&[1.0], &[4.0]);
        let zeros = seq(&[0.0], &[4.0]);
        assert_eq!(mse_loss(&ones, &zeros, 4.0, 0.4), 1.0);
        let half = seq(&[1.0], &[5.0]);
        let l = mse_loss(&half, &seq(&[1.0], &[10.0]), 10.0, 1.0);
        assert!((l - 5.0 / 11.0).abs() < 1e-12, "{l}");
    }

    #[test]
    fn cell_embedding_integrates_the_control() {
        let (v, c) = cell_embedding(&[(1.0, 1.25), (-1.0, 0.5)], 0.5, 6);
        assert_eq!(c, vec![1.0, 1.0, 1.0, 0.5, 0.0, 0.0]);
        assert_eq!(v, vec![-1.0, 1.0, 1.0, 0.5, 0.0, 0.0]);
    }

    #[test]
    fn json_round_trip_is_bit_exact() {
        let cfg = NetConfig::dubins();
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let w = RnnWeights::random(&cfg, &mut rng);
        let text = save_network(&cfg, &w).unwrap();
        let (cfg2, w2) = load_network(&text).unwrap();
        assert_eq!(cfg, cfg2);
        for (a, b) in w.tensors().iter().zip(w2.tensors()) {
            assert!(a.iter().zip(b).all(|(x, y)| x.to_bits() == y.to_bits()));
        }
    }

    #[test]
    fn bad_shapes_are_config_errors() {
        let cfg = NetConfig::dubins();
        let mut w = RnnWeights::zeros(&cfg);
        w.b_l.pop();
        assert!(matches!(w.check_shapes(&cfg), Err(Error::Config(_))));
    }

    #[test]
    fn rprop_rejects_uphill_steps() {
        // f(x) = x^4 punishes overshoot hard
        let mut flat = vec![3.0];
        let params = RpropParams {
            delta0: 5.0,
            ..RpropParams::default()
        };
        let r = rprop(&mut flat, 0..1, 60, params, |p| Ok((p[0].powi(4), vec![4.0 * p[0].powi(3)]))).unwrap();
        assert!(r.losses.windows(2).all(|w| w[1] <= w[0]));
        assert!(r.rejected > 0);
        assert!(r.last() < 1e-3);
    }
}
