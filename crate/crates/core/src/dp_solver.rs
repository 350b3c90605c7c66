//! Variational `d_p` distances: `d_p(x, y) = E*^{-1/p}` where `E*` is the least p-energy of a
//! potential with `f(x) = 0`, `f(y) = 1`.
//!
//! The energy is a sum of terms `w (D f)^T A (D f)` raised to `p/2`, where `D f` collects the
//! differences `f[node_a] - f[node_0]` of a few nodes. Grid corner gradients and weighted graph
//! edges both fit this form, which is what lets the same solver run on path graphs.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::grid_manifold::{DiscreteField, GridManifold};
use crate::linalg::{cg_jacobi, Csr};

#[derive(Debug, Clone)]
pub struct EnergyModel {
    pub n: usize,
    k: usize,
    /// `k + 1` nodes per term; differences are taken against the first.
    nodes: Vec<u32>,
    weight: Vec<f64>,
    metric_id: Vec<u32>,
    /// Bit `a` set flips the sign of difference `a`.
    signs: Vec<u8>,
    /// `k x k` forms, already divided by the coordinate spacings.
    metrics: Vec<f64>,
    pattern: Csr,
    /// Matrix slots of the `(k + 1)^2` local entries of each term.
    slots: Vec<u32>,
}

impl EnergyModel {
    /// Corner-gradient quadrature of a grid, matching `grid_manifold::p_energy`.
    pub fn from_grid(grid: &GridManifold) -> Self {
        let d = grid.dim;
        let kc = grid.corners();
        let nc = grid.num_cells();
        let mut metrics = vec![0.0; nc * d * d];
        for c in 0..nc {
            for i in 0..d {
                for j in 0..d {
                    metrics[c * d * d + i * d + j] =
                        grid.cell_inv[c * d * d + i * d + j] / (grid.spacing[i] * grid.spacing[j]);
                }
            }
        }
        let mut nodes = Vec::with_capacity(nc * kc * (d + 1));
        let mut weight = Vec::with_capacity(nc * kc);
        let mut metric_id = Vec::with_capacity(nc * kc);
        let mut signs = Vec::with_capacity(nc * kc);
        for c in 0..nc {
            let verts = &grid.cell_vertices[c * kc..(c + 1) * kc];
            let w = grid.cell_vol[c] / kc as f64;
            for corner in 0..kc {
                nodes.push(verts[corner]);
                for a in 0..d {
                    nodes.push(verts[corner ^ (1 << a)]);
                }
                weight.push(w);
                metric_id.push(c as u32);
                signs.push(corner as u8);
            }
        }
        EnergyModel::assemble(grid.num_vertices(), d, nodes, weight, metric_id, signs, metrics)
    }

    /// Graph energy `sum_e w_e |f_i - f_j|^p`.
    pub fn from_edges(n: usize, edges: &[(usize, usize, f64)]) -> Self {
        let mut nodes = Vec::with_capacity(2 * edges.len());
        for &(i, j, _) in edges {
            nodes.push(i as u32);
            nodes.push(j as u32);
        }
        let weight = edges.iter().map(|e| e.2).collect();
        let m = edges.len();
        EnergyModel::assemble(n, 1, nodes, weight, vec![0; m], vec![0; m], vec![1.0])
    }

    fn assemble(
        n: usize,
        k: usize,
        nodes: Vec<u32>,
        weight: Vec<f64>,
        metric_id: Vec<u32>,
        signs: Vec<u8>,
        metrics: Vec<f64>,
    ) -> Self {
        let m = weight.len();
        let mut rows: Vec<Vec<u32>> = vec![Vec::new(); n];
        for t in 0..m {
            let nd = &nodes[t * (k + 1)..(t + 1) * (k + 1)];
            for &a in nd {
                for &b in nd {
                    let r = &mut rows[a as usize];
                    if !r.contains(&b) {
                        r.push(b);
                    }
                }
            }
        }
        for (i, r) in rows.iter_mut().enumerate() {
            if !r.contains(&(i as u32)) {
                r.push(i as u32);
            }
        }
        let pattern = Csr::from_rows(rows);
        let mut slots = Vec::with_capacity(m * (k + 1) * (k + 1));
        for t in 0..m {
            let nd = &nodes[t * (k + 1)..(t + 1) * (k + 1)];
            for &a in nd {
                for &b in nd {
                    slots.push(pattern.slot(a as usize, b as usize).expect("pattern entry") as u32);
                }
            }
        }
        EnergyModel { n, k, nodes, weight, metric_id, signs, metrics, pattern, slots }
    }

    /// Copy of the sparsity pattern (values unspecified).
    pub fn pattern_clone(&self) -> Csr {
        self.pattern.clone()
    }

    pub fn num_terms(&self) -> usize {
        self.weight.len()
    }

    /// Differences, form entries and `q = g^T A g` of term `t`.
    #[inline]
    fn term(&self, t: usize, f: &[f64], g: &mut [f64; 4], a: &mut [f64; 16]) -> f64 {
        let k = self.k;
        let nd = &self.nodes[t * (k + 1)..(t + 1) * (k + 1)];
        let base = f[nd[0] as usize];
        for i in 0..k {
            g[i] = f[nd[i + 1] as usize] - base;
        }
        let m = &self.metrics[self.metric_id[t] as usize * k * k..][..k * k];
        let s = self.signs[t];
        let mut q = 0.0;
        for i in 0..k {
            for j in 0..k {
                let flip = ((s >> i) ^ (s >> j)) & 1 == 1;
                let v = if flip { -m[i * k + j] } else { m[i * k + j] };
                a[i * k + j] = v;
                q += g[i] * v * g[j];
            }
        }
        q.max(0.0)
    }

    pub fn energy(&self, f: &[f64], p: f64) -> f64 {
        let mut g = [0.0; 4];
        let mut a = [0.0; 16];
        let half = 0.5 * p;
        (0..self.num_terms())
            .map(|t| {
                let w = self.weight[t];
                if w == 0.0 {
                    return 0.0;
                }
                w * self.term(t, f, &mut g, &mut a).powf(half)
            })
            .sum()
    }

    /// Gradient of the regularized energy `sum w (q + eps)^{p/2}`.
    pub fn gradient(&self, f: &[f64], p: f64, eps: f64, out: &mut [f64]) {
        out.iter_mut().for_each(|v| *v = 0.0);
        let k = self.k;
        let mut g = [0.0; 4];
        let mut a = [0.0; 16];
        for t in 0..self.num_terms() {
            let w = self.weight[t];
            if w == 0.0 {
                continue;
            }
            let q = self.term(t, f, &mut g, &mut a);
            let c = w * p * (q + eps).powf(0.5 * p - 1.0);
            let nd = &self.nodes[t * (k + 1)..(t + 1) * (k + 1)];
            for i in 0..k {
                let ag: f64 = (0..k).map(|j| a[i * k + j] * g[j]).sum();
                out[nd[i + 1] as usize] += c * ag;
                out[nd[0] as usize] -= c * ag;
            }
        }
    }

    /// Fills `mat` with the reweighted Laplacian `sum p w (q + eps)^{(p-2)/2} D^T A D`, plus the
    /// curvature term `p (p - 2) w (q + eps)^{(p-4)/2} D^T (A g)(A g)^T D` when `newton` is set.
    pub fn hessian(&self, f: &[f64], p: f64, eps: f64, newton: bool, mat: &mut Csr) {
        mat.clear();
        let k = self.k;
        let mut g = [0.0; 4];
        let mut a = [0.0; 16];
        let mut b = [0.0; 16];
        let mut ag = [0.0; 4];
        for t in 0..self.num_terms() {
            let w = self.weight[t];
            if w == 0.0 {
                continue;
            }
            let q = self.term(t, f, &mut g, &mut a);
            let qe = q + eps;
            let c1 = w * p * qe.powf(0.5 * p - 1.0);
            let c2 = if newton { w * p * (p - 2.0) * qe.powf(0.5 * p - 2.0) } else { 0.0 };
            for i in 0..k {
                ag[i] = (0..k).map(|j| a[i * k + j] * g[j]).sum();
            }
            for i in 0..k {
                for j in 0..k {
                    b[i * k + j] = c1 * a[i * k + j] + c2 * ag[i] * ag[j];
                }
            }
            // local (k+1)x(k+1) block of D^T B D with D = [-1 | I]
            let sl = &self.slots[t * (k + 1) * (k + 1)..(t + 1) * (k + 1) * (k + 1)];
            let mut total = 0.0;
            for i in 0..k {
                let mut row = 0.0;
                for j in 0..k {
                    let v = b[i * k + j];
                    mat.vals[sl[(i + 1) * (k + 1) + j + 1] as usize] += v;
                    row += v;
                }
                mat.vals[sl[(i + 1) * (k + 1)] as usize] -= row;
                mat.vals[sl[i + 1] as usize] -= row;
                total += row;
            }
            mat.vals[sl[0] as usize] += total;
        }
    }

    /// Connected components of the node graph through terms of positive weight.
    pub fn components(&self) -> Vec<usize> {
        let mut parent: Vec<usize> = (0..self.n).collect();
        fn find(p: &mut [usize], mut i: usize) -> usize {
            while p[i] != i {
                p[i] = p[p[i]];
                i = p[i];
            }
            i
        }
        let k = self.k;
        for t in 0..self.num_terms() {
            if self.weight[t] <= 0.0 {
                continue;
            }
            let nd = &self.nodes[t * (k + 1)..(t + 1) * (k + 1)];
            let r0 = find(&mut parent, nd[0] as usize);
            for &v in &nd[1..] {
                let r = find(&mut parent, v as usize);
                if r != r0 {
                    parent[r] = r0;
                }
            }
        }
        (0..self.n).map(|i| find(&mut parent, i)).collect()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DpOptions {
    /// Stop when the relative energy decrease of a full step falls below this.
    pub energy_tol: f64,
    pub max_iter: usize,
    pub cg_tol: f64,
    pub cg_max_iter: usize,
    /// Initial regularizer relative to the mean energy density.
    pub eps_rel: f64,
    pub eps_floor_rel: f64,
    /// Add the second-order term to the reweighted Laplacian.
    pub newton: bool,
}

impl Default for DpOptions {
    fn default() -> Self {
        DpOptions {
            energy_tol: 1e-9,
            max_iter: 500,
            cg_tol: 1e-10,
            cg_max_iter: 20_000,
            eps_rel: 1e-8,
            eps_floor_rel: 1e-14,
            newton: true,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct DpSolveResult {
    pub value: f64,
    #[serde(skip)]
    pub potential: DiscreteField,
    pub energy: f64,
    pub iterations: usize,
    /// Relative Newton decrement `-grad . step / E` of the last step.
    pub residual: f64,
    pub converged: bool,
    pub p: f64,
    pub estimated_s: Option<f64>,
    /// Set when `p` does not exceed the dimension (continuum distance infinite).
    pub nonphysical: bool,
    pub degenerate_endpoint: bool,
    pub cg_iterations: usize,
}

impl DpSolveResult {
    fn trivial(n: usize, p: f64, value: f64) -> Self {
        DpSolveResult {
            value,
            potential: DiscreteField::constant(n, 0.0),
            energy: if value == 0.0 { f64::INFINITY } else { 0.0 },
            iterations: 0,
            residual: 0.0,
            converged: true,
            p,
            estimated_s: None,
            nonphysical: false,
            degenerate_endpoint: false,
            cg_iterations: 0,
        }
    }
}

/// Minimizes the p-energy of `model` with `f(x) = 0`, `f(y) = 1`.
pub fn dp_solve_model(model: &EnergyModel, x: usize, y: usize, p: f64, opts: &DpOptions) -> Result<DpSolveResult> {
    if !(p > 1.0) {
        return Err(Error::Domain(format!("p = {p} must exceed 1")));
    }
    let n = model.n;
    if x >= n || y >= n {
        return Err(Error::Domain("node index out of range".into()));
    }
    if x == y {
        return Ok(DpSolveResult::trivial(n, p, 0.0));
    }
    let comp = model.components();
    if comp[x] != comp[y] {
        return Ok(DpSolveResult::trivial(n, p, f64::INFINITY));
    }
    let free: Vec<bool> = (0..n).map(|i| i != x && i != y && comp[i] == comp[x]).collect();
    let mut f = vec![0.0; n];
    f[y] = 1.0;
    let mut mat = model.pattern.clone();
    let mut grad = vec![0.0; n];
    let mut step = vec![0.0; n];
    let mut trial = vec![0.0; n];
    let mut cg_total = 0;

    // harmonic (p = 2) start; pinned-free nodes outside the component stay at 0
    model.hessian(&f, 2.0, 0.0, false, &mut mat);
    model.gradient(&f, 2.0, 0.0, &mut grad);
    let rhs: Vec<f64> = grad.iter().map(|g| -g).collect();
    cg_total += cg_jacobi(&mat, &rhs, &mut step, &free, opts.cg_tol, opts.cg_max_iter).iterations;
    for i in 0..n {
        f[i] += step[i];
    }

    let mut energy = model.energy(&f, p);
    let total_weight: f64 = model.weight.iter().sum();
    let mean_density = if total_weight > 0.0 { (energy / total_weight).powf(2.0 / p) } else { 1.0 };
    let eps0 = opts.eps_rel * mean_density;
    let eps_floor = opts.eps_floor_rel * mean_density;
    let mut converged = false;
    let mut residual = f64::INFINITY;
    let mut iterations = 0;
    for it in 1..=opts.max_iter {
        iterations = it;
        let eps = (eps0 * 0.5f64.powi(it as i32 - 1)).max(eps_floor);
        model.hessian(&f, p, eps, opts.newton, &mut mat);
        model.gradient(&f, p, eps, &mut grad);
        let rhs: Vec<f64> = grad.iter().map(|g| -g).collect();
        step.iter_mut().for_each(|v| *v = 0.0);
        cg_total += cg_jacobi(&mat, &rhs, &mut step, &free, opts.cg_tol, opts.cg_max_iter).iterations;
        let slope: f64 = (0..n).filter(|&i| free[i]).map(|i| grad[i] * step[i]).sum();
        residual = -slope / energy;
        if !(slope < 0.0) || residual < opts.energy_tol {
            converged = residual.abs() < opts.energy_tol;
            break;
        }
        // Armijo backtracking on the unregularized energy
        let mut s = 1.0;
        let mut accepted = None;
        while s > 1e-12 {
            for i in 0..n {
                trial[i] = f[i] + s * step[i];
            }
            let e = model.energy(&trial, p);
            if e <= energy + 1e-4 * s * slope {
                accepted = Some(e);
                break;
            }
            s *= 0.5;
        }
        let Some(e_new) = accepted else {
            converged = residual < 10.0 * opts.energy_tol;
            break;
        };
        std::mem::swap(&mut f, &mut trial);
        let rel = (energy - e_new) / e_new;
        energy = e_new;
        if s == 1.0 && rel < opts.energy_tol && residual < opts.energy_tol.sqrt() {
            converged = true;
            break;
        }
    }
    Ok(DpSolveResult {
        value: energy.powf(-1.0 / p),
        potential: DiscreteField::new(f),
        energy,
        iterations,
        residual,
        converged,
        p,
        estimated_s: None,
        nonphysical: false,
        degenerate_endpoint: false,
        cg_iterations: cg_total,
    })
}

fn is_flat(grid: &GridManifold) -> bool {
    let d = grid.dim;
    grid.metric.chunks(d * d).all(|g| (0..d).all(|i| (0..d).all(|j| g[i * d + j] == if i == j { 1.0 } else { 0.0 })))
}

/// `d_p` between two grid vertices.
pub fn dp_distance(grid: &GridManifold, x: usize, y: usize, p: f64, opts: &DpOptions) -> Result<DpSolveResult> {
    dp_distance_with(grid, &EnergyModel::from_grid(grid), x, y, p, opts)
}

/// As `dp_distance`, reusing an already assembled model of the grid.
pub fn dp_distance_with(
    grid: &GridManifold,
    model: &EnergyModel,
    x: usize,
    y: usize,
    p: f64,
    opts: &DpOptions,
) -> Result<DpSolveResult> {
    let mut r = dp_solve_model(model, x, y, p, opts)?;
    r.nonphysical = p <= grid.dim as f64;
    r.degenerate_endpoint = grid.degenerate_mask[x] || grid.degenerate_mask[y];
    if !r.nonphysical && x != y && r.value.is_finite() && is_flat(grid) {
        let dx = grid.displacement(&grid.vertex_coords(x), &grid.vertex_coords(y));
        let dist = dx.iter().map(|v| v * v).sum::<f64>().sqrt();
        r.estimated_s = Some(r.value / dist.powf(1.0 - grid.dim as f64 / p));
    }
    Ok(r)
}

/// Symmetric matrix of pairwise distances; pairs are solved in parallel.
pub fn dp_matrix(grid: &GridManifold, points: &[usize], p: f64, opts: &DpOptions) -> Result<Vec<Vec<f64>>> {
    if points.len() < 2 {
        return Err(Error::Domain("dp_matrix needs at least two points".into()));
    }
    let model = EnergyModel::from_grid(grid);
    let k = points.len();
    let pairs: Vec<(usize, usize)> = (0..k).flat_map(|i| (i + 1..k).map(move |j| (i, j))).collect();
    let vals: Vec<f64> = pairs
        .par_iter()
        .map(|&(i, j)| dp_distance_with(grid, &model, points[i], points[j], p, opts).map(|r| r.value))
        .collect::<Result<_>>()?;
    let mut m = vec![vec![0.0; k]; k];
    for (&(i, j), v) in pairs.iter().zip(vals) {
        m[i][j] = v;
        m[j][i] = v;
    }
    Ok(m)
}

/// Probe vertices: every `stride`-th vertex along each axis.
pub fn probe_nodes(grid: &GridManifold, stride: usize) -> Vec<usize> {
    let stride = stride.max(1);
    (0..grid.num_vertices()).filter(|&v| grid.vertex_multi(v).iter().all(|i| i % stride == 0)).collect()
}

/// `d_p` from `center` to each target, in parallel.
pub fn dp_from(grid: &GridManifold, center: usize, targets: &[usize], p: f64, opts: &DpOptions) -> Result<Vec<f64>> {
    let model = EnergyModel::from_grid(grid);
    targets
        .par_iter()
        .map(|&t| dp_distance_with(grid, &model, center, t, p, opts).map(|r| r.value))
        .collect()
}

/// Probe vertices with `d_p(center, .) < radius`; the center always belongs.
pub fn dp_ball(grid: &GridManifold, center: usize, radius: f64, p: f64, probe_stride: usize, opts: &DpOptions) -> Result<Vec<usize>> {
    if !(radius > 0.0) {
        return Err(Error::Domain("ball radius must be positive".into()));
    }
    let probes: Vec<usize> = probe_nodes(grid, probe_stride).into_iter().filter(|&v| v != center).collect();
    let d = dp_from(grid, center, &probes, p, opts)?;
    let mut out = vec![center];
    out.extend(probes.iter().zip(d).filter(|(_, d)| *d < radius).map(|(v, _)| *v));
    out.sort_unstable();
    Ok(out)
}

/// Options of the sup-formulation oracle.
#[derive(Debug, Clone, Copy)]
pub struct BruteForceOptions {
    pub starts: usize,
    pub max_iter: usize,
    pub seed: u64,
}

impl Default for BruteForceOptions {
    fn default() -> Self {
        BruteForceOptions { starts: 4, max_iter: 200_000, seed: 7 }
    }
}

/// Maximizes `f(y) - f(x)` over the unit p-energy sphere by gradient ascent of the scale-free
/// ratio `(f(y) - f(x)) / E(f)^{1/p}` followed by projection back onto `E = 1`.
/// Only meant for tiny instances.
pub fn brute_force_dp_model(model: &EnergyModel, x: usize, y: usize, p: f64, opts: &BruteForceOptions) -> Result<f64> {
    if model.n > 60 {
        return Err(Error::Domain(format!("brute force limited to 60 nodes, got {}", model.n)));
    }
    if x == y {
        return Ok(0.0);
    }
    let n = model.n;
    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    let mut best = 0.0f64;
    let mut grad = vec![0.0; n];
    for _ in 0..opts.starts {
        let mut f: Vec<f64> = (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect();
        f[y] = f[x] + 1.0;
        let ratio = |f: &[f64]| {
            let e = model.energy(f, p);
            if e <= 0.0 {
                return (f64::INFINITY, e);
            }
            ((f[y] - f[x]) / e.powf(1.0 / p), e)
        };
        let project = |f: &mut Vec<f64>, e: f64| {
            let s = e.powf(-1.0 / p);
            f.iter_mut().for_each(|v| *v *= s);
        };
        let (mut j, e) = ratio(&f);
        project(&mut f, e);
        let mut lr = 1e-2;
        let mut trial = f.clone();
        for _ in 0..opts.max_iter {
            // on E = 1 the ratio gradient is e_y - e_x - (J / p) grad E
            model.gradient(&f, p, 0.0, &mut grad);
            for i in 0..n {
                let mut gi = -(j / p) * grad[i];
                if i == y {
                    gi += 1.0;
                }
                if i == x {
                    gi -= 1.0;
                }
                trial[i] = f[i] + lr * gi;
            }
            let (jt, et) = ratio(&trial);
            if jt.is_finite() && jt > j {
                j = jt;
                project(&mut trial, et);
                std::mem::swap(&mut f, &mut trial);
                lr *= 1.3;
            } else {
                lr *= 0.5;
                if lr < 1e-14 {
                    break;
                }
            }
        }
        best = best.max(j);
    }
    Ok(best)
}

/// Oracle `d_p` on a tiny grid (at most 60 vertices).
pub fn brute_force_dp(grid: &GridManifold, x: usize, y: usize, p: f64) -> Result<f64> {
    brute_force_dp_model(&EnergyModel::from_grid(grid), x, y, p, &BruteForceOptions::default())
}

/// Writes the potential as CSV rows `index,coords..,f`.
pub fn write_potential_csv<W: std::io::Write>(grid: &GridManifold, f: &DiscreteField, w: W) -> Result<()> {
    let mut out = csv::Writer::from_writer(w);
    let mut head = vec!["index".to_string()];
    head.extend((0..grid.dim).map(|a| format!("x{a}")));
    head.push("f".into());
    out.write_record(&head).map_err(|e| Error::Io(e.to_string()))?;
    for v in 0..grid.num_vertices() {
        let mut row = vec![v.to_string()];
        row.extend(grid.vertex_coords(v).iter().map(|c| c.to_string()));
        row.push(f.values[v].to_string());
        out.write_record(&row).map_err(|e| Error::Io(e.to_string()))?;
    }
    out.flush()?;
    Ok(())
}
