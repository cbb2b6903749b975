//! Exact neighbor queries over a point cloud under a [`StateMetric`].
//!
//! Points are bucketed on a uniform grid over the first (up to two) weighted
//! position coordinates. Remaining coordinates are checked per candidate.
//! Every query is exact: cells are only skipped once their lower-bound
//! distance exceeds the current answer.

use std::collections::HashMap;

use crate::sysdyn::StateMetric;

type Cell = (i64, i64);

#[derive(Clone, Debug)]
pub struct GridIndex {
    metric: StateMetric,
    dim: usize,
    cell: f64,
    coords: Vec<f64>,
    buckets: HashMap<Cell, Vec<u32>>,
    lo: Cell,
    hi: Cell,
}

/// Closest and second-closest points strictly above or below a query along
/// one axis. Entries are `(index, signed axis offset)`.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct AxisNeighbors {
    pub above: Vec<(usize, f64)>,
    pub below: Vec<(usize, f64)>,
}

impl GridIndex {
    pub fn new<'a, I>(metric: StateMetric, points: I, cell: f64) -> Self
    where
        I: IntoIterator<Item = &'a [f64]>,
    {
        assert!(cell > 0.0, "cell size must be positive");
        let dim = metric.dim();
        let mut index = GridIndex {
            metric,
            dim,
            cell,
            coords: Vec::new(),
            buckets: HashMap::new(),
            lo: (i64::MAX, i64::MAX),
            hi: (i64::MIN, i64::MIN),
        };
        for p in points {
            debug_assert_eq!(p.len(), dim);
            let id = (index.coords.len() / dim) as u32;
            index.coords.extend_from_slice(p);
            let c = index.cell_of(p);
            index.lo = (index.lo.0.min(c.0), index.lo.1.min(c.1));
            index.hi = (index.hi.0.max(c.0), index.hi.1.max(c.1));
            index.buckets.entry(c).or_default().push(id);
        }
        index
    }

    pub fn len(&self) -> usize {
        self.coords.len() / self.dim.max(1)
    }

    pub fn is_empty(&self) -> bool {
        self.coords.is_empty()
    }

    pub fn metric(&self) -> &StateMetric {
        &self.metric
    }

    pub fn point(&self, i: usize) -> &[f64] {
        &self.coords[i * self.dim..(i + 1) * self.dim]
    }

    fn bucket_axes(&self) -> usize {
        self.metric.position_dims.min(2)
    }

    fn cell_of(&self, p: &[f64]) -> Cell {
        let k = |i: usize| -> i64 {
            if i < self.bucket_axes() {
                (self.metric.weights[i] * p[i] / self.cell).floor() as i64
            } else {
                0
            }
        };
        (k(0), k(1))
    }

    /// All points within `radius` of `x`, ascending by index.
    pub fn within(&self, x: &[f64], radius: f64) -> Vec<usize> {
        let mut out = Vec::new();
        if self.is_empty() {
            return out;
        }
        let reach = (radius / self.cell).ceil() as i64;
        let c = self.cell_of(x);
        let (r0, r1) = match self.bucket_axes() {
            0 => (0, 0),
            1 => (reach, 0),
            _ => (reach, reach),
        };
        let r2 = radius * radius;
        for i in (c.0 - r0).max(self.lo.0)..=(c.0 + r0).min(self.hi.0) {
            for j in (c.1 - r1).max(self.lo.1)..=(c.1 + r1).min(self.hi.1) {
                if let Some(ids) = self.buckets.get(&(i, j)) {
                    for &id in ids {
                        if self.metric.distance_sq(x, self.point(id as usize)) <= r2 {
                            out.push(id as usize);
                        }
                    }
                }
            }
        }
        out.sort_unstable();
        out
    }

    /// The `k` nearest points as `(index, distance)`, closest first. Ties are
    /// broken by index.
    pub fn nearest(&self, x: &[f64], k: usize) -> Vec<(usize, f64)> {
        let mut best: Vec<(usize, f64)> = Vec::with_capacity(k + 1);
        if self.is_empty() || k == 0 {
            return best;
        }
        let c = self.cell_of(x);
        let max_ring = [
            (c.0 - self.lo.0).abs(),
            (self.hi.0 - c.0).abs(),
            (c.1 - self.lo.1).abs(),
            (self.hi.1 - c.1).abs(),
        ]
        .into_iter()
        .max()
        .unwrap_or(0);
        let one_axis = self.bucket_axes() < 2;
        for ring in 0..=max_ring {
            // points in rings beyond this one are at least `ring * cell` away
            if best.len() == k && best[k - 1].1 <= (ring as f64 - 1.0).max(0.0) * self.cell {
                break;
            }
            let visit = |cell: Cell, best: &mut Vec<(usize, f64)>| {
                if let Some(ids) = self.buckets.get(&cell) {
                    for &id in ids {
                        let d = self.metric.distance(x, self.point(id as usize));
                        insert_sorted(best, k, (id as usize, d));
                    }
                }
            };
            if ring == 0 {
                visit(c, &mut best);
                continue;
            }
            if one_axis {
                visit((c.0 - ring, 0), &mut best);
                visit((c.0 + ring, 0), &mut best);
                continue;
            }
            for i in (c.0 - ring)..=(c.0 + ring) {
                visit((i, c.1 - ring), &mut best);
                visit((i, c.1 + ring), &mut best);
            }
            for j in (c.1 - ring + 1)..=(c.1 + ring - 1) {
                visit((c.0 - ring, j), &mut best);
                visit((c.0 + ring, j), &mut best);
            }
        }
        best
    }

    /// Two closest points above and below `x` along `axis` among those whose
    /// metric distance to `x` over all other coordinates is at most `radius`.
    /// Points level with `x` on `axis` are ignored.
    pub fn axis_neighbors(&self, x: &[f64], axis: usize, radius: f64) -> AxisNeighbors {
        let mut out = AxisNeighbors::default();
        if self.is_empty() {
            return out;
        }
        let mut consider = |id: usize, out: &mut AxisNeighbors| {
            let p = self.point(id);
            if self.metric.distance_excluding(x, p, axis) > radius {
                return;
            }
            let delta = self.metric.delta(p, x, axis);
            if delta > 0.0 {
                insert_sorted(&mut out.above, 2, (id, delta));
            } else if delta < 0.0 {
                insert_sorted(&mut out.below, 2, (id, -delta));
            }
        };
        let c = self.cell_of(x);
        let reach = (radius / self.cell).ceil() as i64;
        if axis >= self.bucket_axes() {
            // the cylinder bounds every bucketed coordinate
            let (r0, r1) = if self.bucket_axes() == 1 { (reach, 0) } else { (reach, reach) };
            for i in (c.0 - r0).max(self.lo.0)..=(c.0 + r0).min(self.hi.0) {
                for j in (c.1 - r1).max(self.lo.1)..=(c.1 + r1).min(self.hi.1) {
                    if let Some(ids) = self.buckets.get(&(i, j)) {
                        for &id in ids {
                            consider(id as usize, &mut out);
                        }
                    }
                }
            }
        } else {
            // march outward along the axis, bounded across it by the cylinder
            let along = |cell: Cell| if axis == 0 { cell.0 } else { cell.1 };
            let (lo, hi) = (along(self.lo), along(self.hi));
            let centre = along(c);
            let w = self.metric.weights[axis];
            let (across_lo, across_hi) = if self.bucket_axes() < 2 {
                (0, 0)
            } else if axis == 0 {
                ((c.1 - reach).max(self.lo.1), (c.1 + reach).min(self.hi.1))
            } else {
                ((c.0 - reach).max(self.lo.0), (c.0 + reach).min(self.hi.0))
            };
            let scan = |k: i64, out: &mut AxisNeighbors, consider: &mut dyn FnMut(usize, &mut AxisNeighbors)| {
                for m in across_lo..=across_hi {
                    let cell = if axis == 0 { (k, m) } else { (m, k) };
                    if let Some(ids) = self.buckets.get(&cell) {
                        for &id in ids {
                            consider(id as usize, out);
                        }
                    }
                }
            };
            if (lo..=hi).contains(&centre) {
                scan(centre, &mut out, &mut consider);
            }
            let done = |list: &Vec<(usize, f64)>, gap: f64| list.len() == 2 && list[1].1 * w <= gap;
            let mut k = centre + 1;
            while k <= hi {
                let gap = ((k - centre - 1) as f64) * self.cell;
                if done(&out.above, gap) {
                    break;
                }
                if k >= lo {
                    scan(k, &mut out, &mut consider);
                }
                k += 1;
            }
            let mut k = centre - 1;
            while k >= lo {
                let gap = ((centre - k - 1) as f64) * self.cell;
                if done(&out.below, gap) {
                    break;
                }
                if k <= hi {
                    scan(k, &mut out, &mut consider);
                }
                k -= 1;
            }
        }
        for (_, d) in out.below.iter_mut() {
            *d = -*d;
        }
        out
    }
}

fn insert_sorted(list: &mut Vec<(usize, f64)>, cap: usize, item: (usize, f64)) {
    let pos = list
        .iter()
        .position(|&(id, d)| item.1 < d || (item.1 == d && item.0 < id))
        .unwrap_or(list.len());
    if pos < cap {
        list.insert(pos, item);
        list.truncate(cap);
    }
}
