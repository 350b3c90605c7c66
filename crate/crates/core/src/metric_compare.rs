//! Finite metric spaces sampled from grids, Gromov–Hausdorff bounds between them, and the
//! `d_p`-closeness test (pairwise gaps plus p-ball volume ratios over a probe set of radii).

use std::io::Write;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::dp_solver::{dp_from, dp_matrix, probe_nodes, DpOptions};
use crate::error::{Error, Result};
use crate::grid_manifold::{geodesic_distances, GridManifold};
use crate::smooth::logspace;

/// Absolute slack of the triangle check, relative to `max(1, diameter)`.
pub const TRIANGLE_TOL: f64 = 1e-9;
/// Each `d_p` entry is a convex solve, so dp-mode spaces stay small.
pub const MAX_DP_POINTS: usize = 12;
/// Largest size for which all bijections are enumerated.
pub const GH_EXACT_MAX: usize = 9;
pub const VOLUME_PROBE_RADII: usize = 8;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FiniteMetricSpace {
    /// Coordinates, for reporting and the taxicab comparison only.
    pub points: Vec<Vec<f64>>,
    /// Period of each coordinate (`None` on open axes).
    pub periods: Vec<Option<f64>>,
    pub dist: Vec<Vec<f64>>,
    pub weights: Vec<f64>,
    /// Grid vertices the points came from, if any.
    pub nodes: Vec<usize>,
}

impl FiniteMetricSpace {
    pub fn new(points: Vec<Vec<f64>>, dist: Vec<Vec<f64>>, weights: Vec<f64>) -> Result<Self> {
        let dim = points.first().map_or(0, |p| p.len());
        let s = FiniteMetricSpace { points, periods: vec![None; dim], dist, weights, nodes: vec![] };
        s.validate()?;
        Ok(s)
    }

    /// A space given by its distance matrix alone (unit weights, no coordinates).
    pub fn from_distances(dist: Vec<Vec<f64>>) -> Result<Self> {
        let k = dist.len();
        Self::new(vec![vec![]; k], dist, vec![1.0; k])
    }

    pub fn validate(&self) -> Result<()> {
        let k = self.dist.len();
        if k == 0 {
            return Err(Error::Domain("empty metric space".into()));
        }
        if self.points.len() != k || self.weights.len() != k || (!self.nodes.is_empty() && self.nodes.len() != k) {
            return Err(Error::Domain("points, distances and weights disagree in length".into()));
        }
        for (i, row) in self.dist.iter().enumerate() {
            if row.len() != k {
                return Err(Error::Domain("distance matrix is not square".into()));
            }
            if row[i] != 0.0 {
                return Err(Error::Domain(format!("nonzero diagonal entry at {i}")));
            }
            for (j, &d) in row.iter().enumerate() {
                if !(d >= 0.0 && d.is_finite()) || d != self.dist[j][i] {
                    return Err(Error::Domain(format!("entry ({i}, {j}) is negative, infinite or asymmetric")));
                }
            }
        }
        if self.weights.iter().any(|w| !(*w >= 0.0)) {
            return Err(Error::Domain("negative weight".into()));
        }
        let tol = TRIANGLE_TOL * self.diameter().max(1.0);
        for a in 0..k {
            for b in 0..k {
                for c in 0..k {
                    if self.dist[a][c] > self.dist[a][b] + self.dist[b][c] + tol {
                        return Err(Error::Domain(format!("triangle inequality fails on ({a}, {b}, {c})")));
                    }
                }
            }
        }
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.dist.len()
    }

    pub fn is_empty(&self) -> bool {
        self.dist.is_empty()
    }

    pub fn diameter(&self) -> f64 {
        self.dist.iter().flatten().cloned().fold(0.0, f64::max)
    }

    pub fn total_weight(&self) -> f64 {
        self.weights.iter().sum()
    }

    /// Same points with every distance multiplied by `c > 0`.
    pub fn scaled(&self, c: f64) -> Result<Self> {
        if !(c > 0.0 && c.is_finite()) {
            return Err(Error::Domain(format!("scale {c} must be positive")));
        }
        let mut s = self.clone();
        s.dist.iter_mut().flatten().for_each(|d| *d *= c);
        Ok(s)
    }

    /// One row per point: coordinates, weight, then the distance row.
    pub fn write_csv<W: Write>(&self, w: W) -> Result<()> {
        let mut wr = csv::Writer::from_writer(w);
        let dim = self.points.first().map_or(0, |p| p.len());
        let mut head: Vec<String> = (0..dim).map(|a| format!("x{a}")).collect();
        head.push("weight".into());
        head.extend((0..self.len()).map(|j| format!("d{j}")));
        wr.write_record(&head).map_err(io)?;
        for i in 0..self.len() {
            let mut row: Vec<String> = self.points[i].iter().map(|v| format!("{v:.17e}")).collect();
            row.push(format!("{:.17e}", self.weights[i]));
            row.extend(self.dist[i].iter().map(|v| format!("{v:.17e}")));
            wr.write_record(&row).map_err(io)?;
        }
        wr.flush()?;
        Ok(())
    }
}

fn io(e: csv::Error) -> Error {
    Error::Io(e.to_string())
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case", tag = "kind")]
pub enum DistanceMode {
    Geodesic,
    Dp { p: f64 },
}

/// Farthest-point sampling under geodesic distance. Starts from `anchors` (kept in order) or,
/// without anchors, from a seeded random non-degenerate vertex; degenerate vertices are never
/// picked by the sampler itself.
pub fn farthest_point_sample(grid: &GridManifold, k: usize, seed: u64, anchors: &[usize]) -> Result<Vec<usize>> {
    let nv = grid.num_vertices();
    if k < 2 {
        return Err(Error::Domain(format!("k = {k} must be at least 2")));
    }
    if anchors.len() > k || anchors.iter().any(|&a| a >= nv) {
        return Err(Error::Domain("anchors out of range or more than k".into()));
    }
    let candidates: Vec<usize> = (0..nv).filter(|&v| !grid.degenerate_mask[v]).collect();
    if candidates.len() + anchors.len() < k {
        return Err(Error::Domain("not enough non-degenerate vertices".into()));
    }
    let mut chosen: Vec<usize> = anchors.to_vec();
    if chosen.is_empty() {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        chosen.push(candidates[rng.gen_range(0..candidates.len())]);
    }
    let mut near = vec![f64::INFINITY; nv];
    for &c in &chosen {
        merge_min(&mut near, &geodesic_distances(grid, c).values);
    }
    while chosen.len() < k {
        // ties go to the lowest index, which keeps the sample reproducible
        let next = candidates
            .iter()
            .cloned()
            .filter(|v| !chosen.contains(v))
            .fold(None::<(usize, f64)>, |best, v| match best {
                Some((_, d)) if near[v] <= d => best,
                _ => Some((v, near[v])),
            })
            .map(|(v, _)| v)
            .ok_or_else(|| Error::Domain("sampling ran out of vertices".into()))?;
        merge_min(&mut near, &geodesic_distances(grid, next).values);
        chosen.push(next);
    }
    Ok(chosen)
}

fn merge_min(acc: &mut [f64], d: &[f64]) {
    for (a, b) in acc.iter_mut().zip(d) {
        *a = a.min(*b);
    }
}

/// Volume of each geodesic Voronoi cell of `nodes` (ties to the earlier node).
pub fn voronoi_weights(grid: &GridManifold, nodes: &[usize]) -> Vec<f64> {
    let fields: Vec<Vec<f64>> = nodes.iter().map(|&n| geodesic_distances(grid, n).values).collect();
    let mut w = vec![0.0; nodes.len()];
    for v in 0..grid.num_vertices() {
        let mut best = 0;
        for i in 1..nodes.len() {
            if fields[i][v] < fields[best][v] {
                best = i;
            }
        }
        w[best] += grid.vol_weight[v];
    }
    w
}

/// The space on the given vertices, with distances in `mode`.
pub fn space_at(grid: &GridManifold, nodes: &[usize], mode: DistanceMode, opts: &DpOptions) -> Result<FiniteMetricSpace> {
    if nodes.len() < 2 {
        return Err(Error::Domain("a sampled space needs at least two points".into()));
    }
    let dist = match mode {
        DistanceMode::Geodesic => {
            let mut m = vec![vec![0.0; nodes.len()]; nodes.len()];
            for (i, &a) in nodes.iter().enumerate() {
                let d = geodesic_distances(grid, a);
                for (j, &b) in nodes.iter().enumerate() {
                    m[i][j] = d.values[b];
                }
            }
            // Dijkstra is symmetric only up to the summation order
            for i in 0..nodes.len() {
                for j in 0..i {
                    let s = 0.5 * (m[i][j] + m[j][i]);
                    m[i][j] = s;
                    m[j][i] = s;
                }
            }
            m
        }
        DistanceMode::Dp { p } => {
            if nodes.len() > MAX_DP_POINTS {
                return Err(Error::Domain(format!("dp mode takes at most {MAX_DP_POINTS} points")));
            }
            dp_matrix(grid, nodes, p, opts)?
        }
    };
    let mut s = FiniteMetricSpace {
        points: nodes.iter().map(|&n| grid.vertex_coords(n)).collect(),
        periods: (0..grid.dim)
            .map(|a| grid.periodic[a].then(|| grid.spacing[a] * grid.cells[a] as f64))
            .collect(),
        dist,
        weights: voronoi_weights(grid, nodes),
        nodes: nodes.to_vec(),
    };
    for row in s.dist.iter_mut() {
        row.iter_mut().for_each(|d| *d = d.max(0.0));
    }
    s.validate()?;
    Ok(s)
}

/// `k` farthest-point samples with distances in `mode`. Sampling and Voronoi weights always use
/// geodesic distance; `d_p` enters only through the distance matrix.
pub fn sample_space(grid: &GridManifold, k: usize, mode: DistanceMode, seed: u64) -> Result<FiniteMetricSpace> {
    sample_space_with(grid, k, mode, seed, &[], &DpOptions::default())
}

pub fn sample_space_with(
    grid: &GridManifold,
    k: usize,
    mode: DistanceMode,
    seed: u64,
    anchors: &[usize],
    opts: &DpOptions,
) -> Result<FiniteMetricSpace> {
    if matches!(mode, DistanceMode::Dp { .. }) && k > MAX_DP_POINTS {
        return Err(Error::Domain(format!("dp mode takes at most {MAX_DP_POINTS} points")));
    }
    let nodes = farthest_point_sample(grid, k, seed, anchors)?;
    space_at(grid, &nodes, mode, opts)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GhBound {
    pub value: f64,
    /// True when every bijection was examined.
    pub exact: bool,
    /// Image in `Y` of each point of `X` (for unequal sizes, the X -> Y half of the relation).
    pub matching: Vec<usize>,
}

fn distortion_of(x: &FiniteMetricSpace, y: &FiniteMetricSpace, pi: &[usize]) -> f64 {
    let mut worst = 0.0f64;
    for a in 0..pi.len() {
        for b in a + 1..pi.len() {
            worst = worst.max((x.dist[a][b] - y.dist[pi[a]][pi[b]]).abs());
        }
    }
    worst
}

/// Half the least distortion over bijections, by depth-first enumeration with pruning.
pub fn gh_upper_bound_exact(x: &FiniteMetricSpace, y: &FiniteMetricSpace) -> Result<GhBound> {
    let k = x.len();
    if y.len() != k {
        return Err(Error::Domain(format!("exact mode needs equal sizes, got {k} and {}", y.len())));
    }
    if k > GH_EXACT_MAX {
        return Err(Error::Domain(format!("exact mode is limited to {GH_EXACT_MAX} points")));
    }
    struct Search<'a> {
        x: &'a FiniteMetricSpace,
        y: &'a FiniteMetricSpace,
        best: f64,
        best_pi: Vec<usize>,
        pi: Vec<usize>,
        used: Vec<bool>,
    }
    impl Search<'_> {
        fn go(&mut self, depth: usize, cur: f64) {
            let k = self.used.len();
            if depth == k {
                if cur < self.best {
                    self.best = cur;
                    self.best_pi = self.pi.clone();
                }
                return;
            }
            for j in 0..k {
                if self.used[j] {
                    continue;
                }
                let mut d = cur;
                for a in 0..depth {
                    d = d.max((self.x.dist[a][depth] - self.y.dist[self.pi[a]][j]).abs());
                }
                if d >= self.best {
                    continue;
                }
                self.used[j] = true;
                self.pi.push(j);
                self.go(depth + 1, d);
                self.pi.pop();
                self.used[j] = false;
            }
        }
    }
    let ident: Vec<usize> = (0..k).collect();
    let start = distortion_of(x, y, &ident);
    let mut s = Search { x, y, best: start, best_pi: ident, pi: Vec::with_capacity(k), used: vec![false; k] };
    s.go(0, 0.0);
    Ok(GhBound { value: 0.5 * s.best, exact: true, matching: s.best_pi })
}

/// Upper bound on the Gromov–Hausdorff distance. Exact over bijections for equal sizes up to
/// `GH_EXACT_MAX`; otherwise a greedy correspondence improved by swaps (flagged `exact = false`).
pub fn gh_upper_bound(x: &FiniteMetricSpace, y: &FiniteMetricSpace) -> Result<GhBound> {
    if x.len() == y.len() && x.len() <= GH_EXACT_MAX {
        return gh_upper_bound_exact(x, y);
    }
    if x.len() == y.len() {
        Ok(heuristic_bijection(x, y))
    } else {
        Ok(heuristic_relation(x, y))
    }
}

/// Two starts, the index identity (the sampling correspondence) and points matched in order of
/// eccentricity, each improved by 2-swaps; the better one is kept.
fn heuristic_bijection(x: &FiniteMetricSpace, y: &FiniteMetricSpace) -> GhBound {
    let k = x.len();
    let ecc = |s: &FiniteMetricSpace| -> Vec<usize> {
        let mut idx: Vec<usize> = (0..s.len()).collect();
        let e: Vec<f64> = s.dist.iter().map(|r| r.iter().cloned().fold(0.0, f64::max)).collect();
        idx.sort_by(|&a, &b| e[a].total_cmp(&e[b]).then(a.cmp(&b)));
        idx
    };
    let (ox, oy) = (ecc(x), ecc(y));
    let mut by_ecc = vec![0; k];
    for (a, b) in ox.iter().zip(&oy) {
        by_ecc[*a] = *b;
    }
    let climb = |mut pi: Vec<usize>| -> (f64, Vec<usize>) {
        let mut cur = distortion_of(x, y, &pi);
        loop {
            let mut improved = false;
            for a in 0..k {
                for b in a + 1..k {
                    pi.swap(a, b);
                    let d = distortion_of(x, y, &pi);
                    if d < cur {
                        cur = d;
                        improved = true;
                    } else {
                        pi.swap(a, b);
                    }
                }
            }
            if !improved {
                return (cur, pi);
            }
        }
    };
    let (d1, p1) = climb((0..k).collect());
    let (d2, p2) = climb(by_ecc);
    let (cur, pi) = if d2 < d1 { (d2, p2) } else { (d1, p1) };
    GhBound { value: 0.5 * cur, exact: false, matching: pi }
}

/// Relation `{(a, f(a))} ∪ {(g(b), b)}` built from nearest-eccentricity maps, then improved by
/// reassigning single images.
fn heuristic_relation(x: &FiniteMetricSpace, y: &FiniteMetricSpace) -> GhBound {
    let ecc = |s: &FiniteMetricSpace| -> Vec<f64> { s.dist.iter().map(|r| r.iter().cloned().fold(0.0, f64::max)).collect() };
    let (ex, ey) = (ecc(x), ecc(y));
    let nearest = |e: f64, pool: &[f64]| -> usize {
        (0..pool.len()).min_by(|&i, &j| (pool[i] - e).abs().total_cmp(&(pool[j] - e).abs())).unwrap_or(0)
    };
    let mut f: Vec<usize> = ex.iter().map(|&e| nearest(e, &ey)).collect();
    let mut g: Vec<usize> = ey.iter().map(|&e| nearest(e, &ex)).collect();
    let pairs = |f: &[usize], g: &[usize]| -> Vec<(usize, usize)> {
        let mut r: Vec<(usize, usize)> = f.iter().enumerate().map(|(a, &b)| (a, b)).collect();
        r.extend(g.iter().enumerate().map(|(b, &a)| (a, b)));
        r
    };
    let dis = |r: &[(usize, usize)]| -> f64 {
        let mut w = 0.0f64;
        for (i, &(a, b)) in r.iter().enumerate() {
            for &(c, d) in &r[i + 1..] {
                w = w.max((x.dist[a][c] - y.dist[b][d]).abs());
            }
        }
        w
    };
    let mut cur = dis(&pairs(&f, &g));
    loop {
        let mut improved = false;
        for a in 0..f.len() {
            for b in 0..y.len() {
                let old = f[a];
                f[a] = b;
                let d = dis(&pairs(&f, &g));
                if d < cur {
                    cur = d;
                    improved = true;
                } else {
                    f[a] = old;
                }
            }
        }
        for b in 0..g.len() {
            for a in 0..x.len() {
                let old = g[b];
                g[b] = a;
                let d = dis(&pairs(&f, &g));
                if d < cur {
                    cur = d;
                    improved = true;
                } else {
                    g[b] = old;
                }
            }
        }
        if !improved {
            break;
        }
    }
    GhBound { value: 0.5 * cur, exact: false, matching: f }
}

/// `max(|diam X - diam Y| / 2, bottleneck / 2)`. The bottleneck term compares the sorted
/// multisets of pairwise distances, which any bijection must carry onto each other, so it is
/// used only when the sizes agree. It bounds the bijection-restricted distortion that
/// [`gh_upper_bound`] searches, not the GH distance itself: a non-bijective correspondence
/// can do better (three clustered points against two pairs of clustered points).
pub fn gh_lower_bound(x: &FiniteMetricSpace, y: &FiniteMetricSpace) -> f64 {
    let mut lb = 0.5 * (x.diameter() - y.diameter()).abs();
    if x.len() == y.len() {
        let sorted = |s: &FiniteMetricSpace| -> Vec<f64> {
            let mut v: Vec<f64> = (0..s.len()).flat_map(|a| (a + 1..s.len()).map(move |b| (a, b))).map(|(a, b)| s.dist[a][b]).collect();
            v.sort_by(f64::total_cmp);
            v
        };
        let (dx, dy) = (sorted(x), sorted(y));
        let bottleneck = dx.iter().zip(&dy).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
        lb = lb.max(0.5 * bottleneck);
    }
    lb
}

/// Radii at which p-ball volumes are compared: `VOLUME_PROBE_RADII` log-spaced values in `[eps, 1]`.
pub fn probe_radii(epsilon: f64) -> Vec<f64> {
    logspace(epsilon.min(1.0), 1.0, VOLUME_PROBE_RADII)
}

/// Volume of the ball of each radius around each node. Geodesic balls use every vertex; `d_p`
/// balls use probe vertices every `probe_stride` nodes, each standing for the block of vertices
/// it indexes, and always contain the block of their center.
pub fn ball_volumes(
    grid: &GridManifold,
    centers: &[usize],
    radii: &[f64],
    mode: DistanceMode,
    probe_stride: usize,
    opts: &DpOptions,
) -> Result<Vec<Vec<f64>>> {
    let nv = grid.num_vertices();
    match mode {
        DistanceMode::Geodesic => Ok(centers
            .iter()
            .map(|&c| {
                let d = geodesic_distances(grid, c).values;
                radii.iter().map(|&r| (0..nv).filter(|&v| d[v] < r).map(|v| grid.vol_weight[v]).sum()).collect()
            })
            .collect()),
        DistanceMode::Dp { p } => {
            let stride = probe_stride.max(1);
            let probes = probe_nodes(grid, stride);
            let owner = |v: usize| -> usize {
                let idx: Vec<usize> = grid.vertex_multi(v).iter().map(|i| i / stride * stride).collect();
                grid.vertex_index(&idx)
            };
            let mut block = vec![0.0; nv];
            for v in 0..nv {
                block[owner(v)] += grid.vol_weight[v];
            }
            let mut out = Vec::with_capacity(centers.len());
            for &c in centers {
                let home = owner(c);
                let targets: Vec<usize> = probes.iter().cloned().filter(|&q| q != c && q != home).collect();
                let d = dp_from(grid, c, &targets, p, opts)?;
                out.push(
                    radii
                        .iter()
                        .map(|&r| block[home] + targets.iter().zip(&d).filter(|(_, d)| **d < r).map(|(q, _)| block[*q]).sum::<f64>())
                        .collect(),
                );
            }
            Ok(out)
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DpCloseReport {
    pub pass: bool,
    pub worst_pair_gap: f64,
    /// The volume ratio `vol_X / vol_Y` farthest from 1.
    pub worst_volume_ratio: f64,
    pub radii: Vec<f64>,
}

/// Pairwise gaps at most `epsilon` under the given point correspondence (index `i` to `i`),
/// and ball-volume ratios within `[1 - epsilon, 1 + epsilon]` at the probed radii.
pub fn dp_close_check(
    x: &FiniteMetricSpace,
    y: &FiniteMetricSpace,
    epsilon: f64,
    ball_volumes_x: &[Vec<f64>],
    ball_volumes_y: &[Vec<f64>],
) -> Result<DpCloseReport> {
    let k = x.len();
    if y.len() != k || ball_volumes_x.len() != k || ball_volumes_y.len() != k {
        return Err(Error::Domain("point and volume lists are not matched".into()));
    }
    if !(epsilon > 0.0) {
        return Err(Error::Domain(format!("epsilon = {epsilon} must be positive")));
    }
    let mut gap = 0.0f64;
    for a in 0..k {
        for b in a + 1..k {
            gap = gap.max((x.dist[a][b] - y.dist[a][b]).abs());
        }
    }
    let mut worst = 1.0f64;
    for (vx, vy) in ball_volumes_x.iter().zip(ball_volumes_y) {
        if vx.len() != vy.len() {
            return Err(Error::Domain("ball volume rows differ in length".into()));
        }
        for (a, b) in vx.iter().zip(vy) {
            let ratio = if *b > 0.0 { a / b } else if *a > 0.0 { f64::INFINITY } else { 1.0 };
            if (ratio - 1.0).abs() > (worst - 1.0).abs() {
                worst = ratio;
            }
        }
    }
    let radii = probe_radii(epsilon);
    let pass = gap <= epsilon && (worst - 1.0).abs() <= epsilon;
    Ok(DpCloseReport { pass, worst_pair_gap: gap, worst_volume_ratio: worst, radii })
}

/// `max |d(x, y) - |x - y|_1| / |x - y|_1` over pairs with distinct coordinates (periodic axes
/// use the shortest wrap).
pub fn taxicab_deviation(space: &FiniteMetricSpace) -> Result<f64> {
    if space.points.iter().any(|p| p.is_empty()) {
        return Err(Error::Domain("taxicab comparison needs coordinates".into()));
    }
    let mut worst = 0.0f64;
    for a in 0..space.len() {
        for b in a + 1..space.len() {
            let l1: f64 = space.points[a]
                .iter()
                .zip(&space.points[b])
                .enumerate()
                .map(|(i, (u, v))| {
                    let d = v - u;
                    match space.periods.get(i).copied().flatten() {
                        Some(len) => (d - len * (d / len).round()).abs(),
                        None => d.abs(),
                    }
                })
                .sum();
            if l1 == 0.0 {
                continue;
            }
            worst = worst.max((space.dist[a][b] - l1).abs() / l1);
        }
    }
    Ok(worst)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::grid_manifold::GridSpec;

    fn planar(pts: &[[f64; 2]]) -> FiniteMetricSpace {
        let dist = pts
            .iter()
            .map(|a| pts.iter().map(|b| ((a[0] - b[0]).powi(2) + (a[1] - b[1]).powi(2)).sqrt()).collect())
            .collect();
        FiniteMetricSpace::new(pts.iter().map(|p| p.to_vec()).collect(), dist, vec![1.0; pts.len()]).unwrap()
    }

    // every permutation, no pruning
    fn brute_gh(x: &FiniteMetricSpace, y: &FiniteMetricSpace) -> f64 {
        fn perms(k: usize) -> Vec<Vec<usize>> {
            if k == 0 {
                return vec![vec![]];
            }
            let mut out = vec![];
            for p in perms(k - 1) {
                for pos in 0..k {
                    let mut q = p.clone();
                    q.insert(pos, k - 1);
                    out.push(q);
                }
            }
            out
        }
        perms(x.len()).iter().map(|pi| distortion_of(x, y, pi)).fold(f64::INFINITY, f64::min) / 2.0
    }

    #[test]
    fn two_point_spaces() {
        let x = FiniteMetricSpace::from_distances(vec![vec![0.0, 1.0], vec![1.0, 0.0]]).unwrap();
        let y = FiniteMetricSpace::from_distances(vec![vec![0.0, 3.0], vec![3.0, 0.0]]).unwrap();
        assert_eq!(gh_upper_bound(&x, &y).unwrap().value, 1.0);
        assert_eq!(gh_lower_bound(&x, &y), 1.0);
        assert_eq!(gh_upper_bound(&x, &x).unwrap().value, 0.0);
        assert_eq!(gh_lower_bound(&y, &y), 0.0);
    }

    #[test]
    fn point_against_segment() {
        let pt = FiniteMetricSpace::from_distances(vec![vec![0.0]]).unwrap();
        let seg = FiniteMetricSpace::from_distances(vec![vec![0.0, 2.5], vec![2.5, 0.0]]).unwrap();
        assert_eq!(gh_lower_bound(&pt, &seg), 1.25);
        let ub = gh_upper_bound(&pt, &seg).unwrap();
        assert!(!ub.exact);
        assert_eq!(ub.value, 1.25);
        assert!(gh_upper_bound_exact(&pt, &seg).is_err());
    }

    #[test]
    fn square_against_scaled_square() {
        let sq = [[0.0, 0.0], [1.0, 0.0], [1.0, 1.0], [0.0, 1.0]];
        let big: Vec<[f64; 2]> = sq.iter().map(|p| [2.0 * p[0], 2.0 * p[1]]).collect();
        let (x, y) = (planar(&sq), planar(&big));
        let ub = gh_upper_bound(&x, &y).unwrap();
        assert!(ub.exact);
        assert!((ub.value - brute_gh(&x, &y)).abs() < 1e-15);
        // the diagonal stretches from sqrt 2 to 2 sqrt 2 under any bijection
        assert!((ub.value - 0.5 * 2f64.sqrt()).abs() < 1e-12);
        assert!(gh_lower_bound(&x, &y) <= ub.value + 1e-15);
    }

    #[test]
    fn pruned_search_matches_brute_force() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for k in 3..=7 {
            let mut pts = |s: f64| -> Vec<[f64; 2]> { (0..k).map(|_| [s * rng.gen::<f64>(), rng.gen::<f64>()]).collect() };
            let (x, y) = (planar(&pts(1.0)), planar(&pts(1.5)));
            let ub = gh_upper_bound(&x, &y).unwrap();
            assert!((ub.value - brute_gh(&x, &y)).abs() < 1e-14, "k = {k}");
            assert!((distortion_of(&x, &y, &ub.matching) / 2.0 - ub.value).abs() < 1e-14);
            assert!(gh_lower_bound(&x, &y) <= ub.value + 1e-15);
        }
    }

    #[test]
    fn heuristic_is_an_upper_bound_on_large_spaces() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let pts: Vec<[f64; 2]> = (0..11).map(|_| [rng.gen(), rng.gen()]).collect();
        let jitter: Vec<[f64; 2]> = pts.iter().map(|p| [p[0] + 0.01 * rng.gen::<f64>(), p[1]]).collect();
        let (x, y) = (planar(&pts), planar(&jitter));
        let ub = gh_upper_bound(&x, &y).unwrap();
        assert!(!ub.exact);
        assert!(ub.value >= gh_lower_bound(&x, &y));
        // the identity is one of the starts and distorts by less than 0.01
        assert!(ub.value <= 0.01);
    }

    #[test]
    fn construction_rejects_bad_matrices() {
        let bad_triangle = vec![vec![0.0, 1.0, 3.0], vec![1.0, 0.0, 1.0], vec![3.0, 1.0, 0.0]];
        assert!(FiniteMetricSpace::from_distances(bad_triangle).is_err());
        assert!(FiniteMetricSpace::from_distances(vec![vec![0.0, 1.0], vec![2.0, 0.0]]).is_err());
        assert!(FiniteMetricSpace::from_distances(vec![vec![1.0]]).is_err());
        let ok = FiniteMetricSpace::from_distances(vec![vec![0.0, 1.0], vec![1.0, 0.0]]).unwrap();
        assert!(FiniteMetricSpace::new(ok.points.clone(), ok.dist.clone(), vec![1.0, -1.0]).is_err());
    }

    #[test]
    fn flat_two_point_sample() {
        let g = GridManifold::flat(&GridSpec::unit_torus(2, 32)).unwrap();
        let s = sample_space(&g, 2, DistanceMode::Geodesic, 5).unwrap();
        let dx = g.displacement(&s.points[0], &s.points[1]);
        let euclid = dx.iter().map(|v| v * v).sum::<f64>().sqrt();
        // the 8-neighbor stencil overestimates off-axis lengths by at most 1/cos(22.5 deg) - 1
        assert!(s.dist[0][1] >= euclid - 1e-12 && s.dist[0][1] <= euclid * 1.0824);
        assert!((s.total_weight() - 1.0).abs() < 1e-12);
        assert_eq!(s, sample_space(&g, 2, DistanceMode::Geodesic, 5).unwrap());
    }

    #[test]
    fn sample_is_deterministic_and_spread() {
        let g = GridManifold::flat(&GridSpec::unit_torus(2, 24)).unwrap();
        let a = sample_space(&g, 6, DistanceMode::Geodesic, 42).unwrap();
        let b = sample_space(&g, 6, DistanceMode::Geodesic, 42).unwrap();
        assert_eq!(a, b);
        assert!((a.total_weight() - g.total_volume()).abs() < 1e-12);
        let min_gap = (0..6).flat_map(|i| (0..i).map(move |j| (i, j))).map(|(i, j)| a.dist[i][j]).fold(f64::INFINITY, f64::min);
        assert!(min_gap > 0.25, "{min_gap}");
        let dp = sample_space(&g, 3, DistanceMode::Dp { p: 3.0 }, 42).unwrap();
        assert_eq!(dp.nodes, a.nodes[..3].to_vec());
        assert!(sample_space(&g, 13, DistanceMode::Dp { p: 3.0 }, 1).is_err());
    }

    #[test]
    fn taxicab_on_flat_grid() {
        let g = GridManifold::flat(&GridSpec::cube(2, 16, 0.0, 1.0)).unwrap();
        let a = g.vertex_index(&[2, 3]);
        let axis = space_at(&g, &[a, g.vertex_index(&[12, 3])], DistanceMode::Geodesic, &DpOptions::default()).unwrap();
        assert!(taxicab_deviation(&axis).unwrap() < 1e-12);
        let diag = space_at(&g, &[a, g.vertex_index(&[10, 11])], DistanceMode::Geodesic, &DpOptions::default()).unwrap();
        assert!((taxicab_deviation(&diag).unwrap() - (1.0 - 0.5f64.sqrt())).abs() < 1e-12);
        assert!(taxicab_deviation(&FiniteMetricSpace::from_distances(vec![vec![0.0, 1.0], vec![1.0, 0.0]]).unwrap()).is_err());
    }

    #[test]
    fn taxicab_wraps_on_the_torus() {
        let g = GridManifold::flat(&GridSpec::unit_torus(2, 16)).unwrap();
        let s = space_at(&g, &[g.vertex_index(&[1, 0]), g.vertex_index(&[15, 0])], DistanceMode::Geodesic, &DpOptions::default()).unwrap();
        assert!((s.dist[0][1] - 0.125).abs() < 1e-12);
        assert!(taxicab_deviation(&s).unwrap() < 1e-12);
    }

    #[test]
    fn close_check_on_identical_spaces() {
        let g = GridManifold::flat(&GridSpec::unit_torus(2, 16)).unwrap();
        let mode = DistanceMode::Dp { p: 3.0 };
        let o = DpOptions::default();
        let s = sample_space_with(&g, 3, mode, 9, &[], &o).unwrap();
        let radii = probe_radii(0.1);
        assert_eq!(radii.len(), 8);
        let vols = ball_volumes(&g, &s.nodes, &radii, mode, 4, &o).unwrap();
        for row in &vols {
            assert!(row.windows(2).all(|w| w[0] <= w[1]));
            assert!(row[0] > 0.0 && row[7] <= g.total_volume() + 1e-12);
        }
        for eps in [1e-3, 0.1, 1.0] {
            let r = dp_close_check(&s, &s, eps, &vols, &vols).unwrap();
            assert!(r.pass);
            assert_eq!(r.worst_pair_gap, 0.0);
            assert_eq!(r.worst_volume_ratio, 1.0);
        }
        assert!(dp_close_check(&s, &s, 0.1, &vols[..2], &vols).is_err());
    }

    #[test]
    fn geodesic_balls_grow_to_the_whole_torus() {
        let g = GridManifold::flat(&GridSpec::unit_torus(2, 16)).unwrap();
        let v = ball_volumes(&g, &[0], &[0.01, 0.2, 1.0], DistanceMode::Geodesic, 1, &DpOptions::default()).unwrap();
        assert!((v[0][0] - 1.0 / 256.0).abs() < 1e-15);
        assert!((v[0][2] - 1.0).abs() < 1e-12);
        // dual cells whose vertex lies within 0.2 under the octagonal stencil metric
        assert!(v[0][1] > 0.09 && v[0][1] < 0.16, "{}", v[0][1]);
    }
}
