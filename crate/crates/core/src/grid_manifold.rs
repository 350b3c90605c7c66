//! Structured grids carrying a (possibly degenerate) metric tensor field.
//!
//! Field values live on vertices. The metric is also sampled at cell centers, which are
//! the quadrature points of every energy: a metric that vanishes on a vertex line is never
//! evaluated there. Each cell contributes `2^dim` corner gradients built from the cell
//! edges meeting at that corner, each weighted by `sqrt(det g) * cell volume / 2^dim`.

use std::cmp::Ordering;
use std::collections::BinaryHeap;
use std::io::{BufRead, Write};
use std::sync::{Arc, OnceLock};

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::warped_metrics::{scalar_from_jets, Jet, PowerMetric, ProfilePair};

/// Writes the `dim x dim` metric (row-major) at a point into the output slice.
pub type MetricFn = Arc<dyn Fn(&[f64], &mut [f64]) + Send + Sync>;
pub type ScalarFn = Arc<dyn Fn(&[f64]) -> f64 + Send + Sync>;

/// Determinant threshold below which a sample is flagged degenerate.
pub const DEGENERATE_DET: f64 = 1e-12;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GridSpec {
    /// Cells per axis.
    pub cells: Vec<usize>,
    pub lower: Vec<f64>,
    pub upper: Vec<f64>,
    pub periodic: Vec<bool>,
}

impl GridSpec {
    pub fn new(cells: Vec<usize>, lower: Vec<f64>, upper: Vec<f64>, periodic: Vec<bool>) -> Self {
        GridSpec { cells, lower, upper, periodic }
    }

    /// Unit torus `[0,1)^dim` with `n` cells per axis.
    pub fn unit_torus(dim: usize, n: usize) -> Self {
        GridSpec::new(vec![n; dim], vec![0.0; dim], vec![1.0; dim], vec![true; dim])
    }

    /// Box `[lo, hi]^dim` with `n` cells per axis.
    pub fn cube(dim: usize, n: usize, lo: f64, hi: f64) -> Self {
        GridSpec::new(vec![n; dim], vec![lo; dim], vec![hi; dim], vec![false; dim])
    }

    pub fn validate(&self) -> Result<usize> {
        let d = self.cells.len();
        if !(2..=4).contains(&d) {
            return Err(Error::Config(format!("grid dimension {d} not in 2..=4")));
        }
        if self.lower.len() != d || self.upper.len() != d || self.periodic.len() != d {
            return Err(Error::Config("grid spec arrays disagree in length".into()));
        }
        for a in 0..d {
            if self.cells[a] < 2 {
                return Err(Error::Config(format!("axis {a} needs at least 2 cells")));
            }
            if !(self.upper[a] > self.lower[a]) {
                return Err(Error::Config(format!("axis {a} has empty extent")));
            }
        }
        Ok(d)
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct DiscreteField {
    pub values: Vec<f64>,
}

impl DiscreteField {
    pub fn new(values: Vec<f64>) -> Self {
        DiscreteField { values }
    }

    pub fn constant(n: usize, c: f64) -> Self {
        DiscreteField { values: vec![c; n] }
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }
}

#[derive(Clone)]
pub struct GridManifold {
    pub dim: usize,
    pub cells: Vec<usize>,
    /// Vertex counts per axis (`cells` on periodic axes, `cells + 1` otherwise).
    pub shape: Vec<usize>,
    pub spacing: Vec<f64>,
    pub lower: Vec<f64>,
    pub periodic: Vec<bool>,
    /// Vertex metric, `dim * dim` entries per vertex.
    pub metric: Vec<f64>,
    /// Dual volume of each vertex; sums to the total volume.
    pub vol_weight: Vec<f64>,
    pub degenerate_mask: Vec<bool>,
    /// Clamped inverse metric at each cell center.
    pub cell_inv: Vec<f64>,
    /// `sqrt(det g) * cell volume` at each cell center.
    pub cell_vol: Vec<f64>,
    pub cell_degenerate: Vec<bool>,
    /// Eigenvalue floor used before inverting the cell metric.
    pub clamp: f64,
    /// Vertex indices of each cell, `2^dim` per cell, corner bit `a` set means `+1` along axis `a`.
    pub cell_vertices: Vec<u32>,
    /// Vertex neighbor table over the `3^dim` stencil (`u32::MAX` outside the grid).
    pub neighbors: Vec<u32>,
    source: Option<MetricFn>,
    scalar_source: Option<ScalarFn>,
    edge_lengths: OnceLock<Vec<f64>>,
}

impl std::fmt::Debug for GridManifold {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("GridManifold")
            .field("dim", &self.dim)
            .field("shape", &self.shape)
            .field("spacing", &self.spacing)
            .field("periodic", &self.periodic)
            .finish()
    }
}

/// Inverse of a symmetric matrix after flooring its eigenvalues at `clamp`; also returns the
/// unclamped determinant.
fn clamped_inverse(dim: usize, g: &[f64], clamp: f64, out: &mut [f64]) -> f64 {
    let diagonal = (0..dim).all(|i| (0..dim).all(|j| i == j || g[i * dim + j] == 0.0));
    if diagonal {
        let mut det = 1.0;
        for i in 0..dim {
            let v = g[i * dim + i];
            det *= v;
            for j in 0..dim {
                out[i * dim + j] = if i == j { 1.0 / v.max(clamp) } else { 0.0 };
            }
        }
        return det;
    }
    let m = DMatrix::from_row_slice(dim, dim, g);
    let det = m.determinant();
    let eig = m.symmetric_eigen();
    for i in 0..dim {
        for j in 0..dim {
            let mut s = 0.0;
            for k in 0..dim {
                s += eig.eigenvectors[(i, k)] * eig.eigenvectors[(j, k)] / eig.eigenvalues[k].max(clamp);
            }
            out[i * dim + j] = s;
        }
    }
    det
}

impl GridManifold {
    /// Sample `metric` on the grid described by `spec`.
    pub fn from_fn(spec: &GridSpec, metric: MetricFn) -> Result<Self> {
        let dim = spec.validate()?;
        let shape: Vec<usize> = (0..dim)
            .map(|a| if spec.periodic[a] { spec.cells[a] } else { spec.cells[a] + 1 })
            .collect();
        let spacing: Vec<f64> =
            (0..dim).map(|a| (spec.upper[a] - spec.lower[a]) / spec.cells[a] as f64).collect();
        let hmin = spacing.iter().cloned().fold(f64::INFINITY, f64::min);
        let clamp = hmin * hmin;
        let nv: usize = shape.iter().product();
        let nc: usize = spec.cells.iter().product();
        let dd = dim * dim;

        let mut grid = GridManifold {
            dim,
            cells: spec.cells.clone(),
            shape,
            spacing,
            lower: spec.lower.clone(),
            periodic: spec.periodic.clone(),
            metric: vec![0.0; nv * dd],
            vol_weight: vec![0.0; nv],
            degenerate_mask: vec![false; nv],
            cell_inv: vec![0.0; nc * dd],
            cell_vol: vec![0.0; nc],
            cell_degenerate: vec![false; nc],
            clamp,
            cell_vertices: Vec::new(),
            neighbors: Vec::new(),
            source: Some(metric.clone()),
            scalar_source: None,
            edge_lengths: OnceLock::new(),
        };
        grid.build_tables();

        let mut x = vec![0.0; dim];
        for v in 0..nv {
            grid.vertex_coords_into(v, &mut x);
            metric(&x, &mut grid.metric[v * dd..(v + 1) * dd]);
            let det = DMatrix::from_row_slice(dim, dim, &grid.metric[v * dd..(v + 1) * dd]).determinant();
            grid.degenerate_mask[v] = det < DEGENERATE_DET;
        }
        let mut g = vec![0.0; dd];
        let cell_volume: f64 = grid.spacing.iter().product();
        for c in 0..nc {
            grid.cell_center_into(c, &mut x);
            metric(&x, &mut g);
            let det = clamped_inverse(dim, &g, clamp, &mut grid.cell_inv[c * dd..(c + 1) * dd]);
            grid.cell_degenerate[c] = det < DEGENERATE_DET;
            grid.cell_vol[c] = det.max(0.0).sqrt() * cell_volume;
        }
        grid.accumulate_vertex_volumes();
        Ok(grid)
    }

    /// Flat metric on the grid.
    pub fn flat(spec: &GridSpec) -> Result<Self> {
        let dim = spec.cells.len();
        GridManifold::from_fn(
            spec,
            Arc::new(move |_x: &[f64], out: &mut [f64]| {
                for i in 0..dim {
                    for j in 0..dim {
                        out[i * dim + j] = if i == j { 1.0 } else { 0.0 };
                    }
                }
            }),
        )
        .map(|g| g.with_scalar_fn(Arc::new(|_x: &[f64]| 0.0)))
    }

    /// Same grid with metric `rho^{-2} g`.
    pub fn rescaled(&self, rho: f64) -> Result<Self> {
        let src = self.source.clone().ok_or_else(|| Error::Config("grid has no metric source".into()))?;
        let s = rho.powi(-2);
        let spec = self.spec();
        let out = GridManifold::from_fn(
            &spec,
            Arc::new(move |x: &[f64], o: &mut [f64]| {
                src(x, o);
                o.iter_mut().for_each(|v| *v *= s);
            }),
        )?;
        Ok(match &self.scalar_source {
            Some(r) => {
                let r = r.clone();
                let k = rho * rho;
                out.with_scalar_fn(Arc::new(move |x: &[f64]| k * r(x)))
            }
            None => out,
        })
    }

    pub fn spec(&self) -> GridSpec {
        GridSpec {
            cells: self.cells.clone(),
            lower: self.lower.clone(),
            upper: (0..self.dim).map(|a| self.lower[a] + self.spacing[a] * self.cells[a] as f64).collect(),
            periodic: self.periodic.clone(),
        }
    }

    /// Attach a closed-form scalar curvature used instead of finite differences.
    pub fn with_scalar_fn(mut self, f: ScalarFn) -> Self {
        self.scalar_source = Some(f);
        self
    }

    pub fn has_metric_source(&self) -> bool {
        self.source.is_some()
    }

    pub fn is_closed(&self) -> bool {
        self.periodic.iter().all(|&p| p)
    }

    pub fn num_vertices(&self) -> usize {
        self.shape.iter().product()
    }

    pub fn num_cells(&self) -> usize {
        self.cells.iter().product()
    }

    pub fn total_volume(&self) -> f64 {
        self.vol_weight.iter().sum()
    }

    pub fn corners(&self) -> usize {
        1 << self.dim
    }

    pub fn stencil_size(&self) -> usize {
        3usize.pow(self.dim as u32)
    }

    pub fn vertex_multi(&self, v: usize) -> Vec<usize> {
        let mut r = v;
        (0..self.dim)
            .map(|a| {
                let i = r % self.shape[a];
                r /= self.shape[a];
                i
            })
            .collect()
    }

    pub fn vertex_index(&self, idx: &[usize]) -> usize {
        let mut v = 0;
        for a in (0..self.dim).rev() {
            v = v * self.shape[a] + idx[a];
        }
        v
    }

    pub fn vertex_coords_into(&self, v: usize, x: &mut [f64]) {
        let mut r = v;
        for a in 0..self.dim {
            let i = r % self.shape[a];
            r /= self.shape[a];
            x[a] = self.lower[a] + i as f64 * self.spacing[a];
        }
    }

    pub fn vertex_coords(&self, v: usize) -> Vec<f64> {
        let mut x = vec![0.0; self.dim];
        self.vertex_coords_into(v, &mut x);
        x
    }

    pub fn cell_center_into(&self, c: usize, x: &mut [f64]) {
        let mut r = c;
        for a in 0..self.dim {
            let i = r % self.cells[a];
            r /= self.cells[a];
            x[a] = self.lower[a] + (i as f64 + 0.5) * self.spacing[a];
        }
    }

    /// Vertex closest to a point (wrapping on periodic axes).
    pub fn nearest_vertex(&self, x: &[f64]) -> usize {
        let idx: Vec<usize> = (0..self.dim)
            .map(|a| {
                let t = ((x[a] - self.lower[a]) / self.spacing[a]).round() as i64;
                if self.periodic[a] {
                    t.rem_euclid(self.shape[a] as i64) as usize
                } else {
                    t.clamp(0, self.shape[a] as i64 - 1) as usize
                }
            })
            .collect();
        self.vertex_index(&idx)
    }

    /// Coordinate displacement `y - x`, minimal image on periodic axes.
    pub fn displacement(&self, x: &[f64], y: &[f64]) -> Vec<f64> {
        (0..self.dim)
            .map(|a| {
                let mut d = y[a] - x[a];
                if self.periodic[a] {
                    let l = self.spacing[a] * self.cells[a] as f64;
                    d -= l * (d / l).round();
                }
                d
            })
            .collect()
    }

    pub fn vertex_metric(&self, v: usize) -> &[f64] {
        let dd = self.dim * self.dim;
        &self.metric[v * dd..(v + 1) * dd]
    }

    /// Metric at an arbitrary point: the source function when present, else the vertex
    /// metric of the nearest vertex.
    pub fn metric_at(&self, x: &[f64], out: &mut [f64]) {
        match &self.source {
            Some(f) => f(x, out),
            None => out.copy_from_slice(self.vertex_metric(self.nearest_vertex(x))),
        }
    }

    fn build_tables(&mut self) {
        let d = self.dim;
        let nv = self.num_vertices();
        let nc = self.num_cells();
        let k = self.corners();
        let mut cv = Vec::with_capacity(nc * k);
        let mut ci = vec![0usize; d];
        for c in 0..nc {
            let mut r = c;
            for a in 0..d {
                ci[a] = r % self.cells[a];
                r /= self.cells[a];
            }
            for corner in 0..k {
                let mut v = 0usize;
                for a in (0..d).rev() {
                    let mut i = ci[a] + ((corner >> a) & 1);
                    if i == self.shape[a] {
                        i = 0;
                    }
                    v = v * self.shape[a] + i;
                }
                cv.push(v as u32);
            }
        }
        self.cell_vertices = cv;

        let s = self.stencil_size();
        let mut nb = Vec::with_capacity(nv * s);
        let mut vi = vec![0usize; d];
        for v in 0..nv {
            let mut r = v;
            for a in 0..d {
                vi[a] = r % self.shape[a];
                r /= self.shape[a];
            }
            for o in 0..s {
                let mut ok = true;
                let mut idx = 0usize;
                let mut oo = o;
                let mut mul = 1usize;
                for a in 0..d {
                    let off = (oo % 3) as i64 - 1;
                    oo /= 3;
                    let mut j = vi[a] as i64 + off;
                    let n = self.shape[a] as i64;
                    if self.periodic[a] {
                        j = j.rem_euclid(n);
                    } else if j < 0 || j >= n {
                        ok = false;
                    }
                    idx += j.max(0) as usize * mul;
                    mul *= self.shape[a];
                }
                nb.push(if ok { idx as u32 } else { u32::MAX });
            }
        }
        self.neighbors = nb;
    }

    fn accumulate_vertex_volumes(&mut self) {
        let k = self.corners();
        let w = 1.0 / k as f64;
        self.vol_weight.iter_mut().for_each(|v| *v = 0.0);
        for c in 0..self.num_cells() {
            for corner in 0..k {
                self.vol_weight[self.cell_vertices[c * k + corner] as usize] += w * self.cell_vol[c];
            }
        }
    }

    /// Stencil slot of an offset vector with entries in {-1, 0, 1}.
    pub fn stencil_slot(&self, off: &[i32]) -> usize {
        let mut s = 0usize;
        for a in (0..self.dim).rev() {
            s = s * 3 + (off[a] + 1) as usize;
        }
        s
    }

    pub fn stencil_offset(&self, slot: usize) -> Vec<i32> {
        let mut r = slot;
        (0..self.dim)
            .map(|_| {
                let o = (r % 3) as i32 - 1;
                r /= 3;
                o
            })
            .collect()
    }

    pub fn neighbor(&self, v: usize, slot: usize) -> Option<usize> {
        let n = self.neighbors[v * self.stencil_size() + slot];
        (n != u32::MAX).then_some(n as usize)
    }

    /// Corner gradients of a field inside cell `c`; calls `visit(corner, grad)`.
    #[inline]
    pub fn for_each_corner_gradient<F: FnMut(usize, &[f64])>(&self, c: usize, u: &[f64], mut visit: F) {
        let d = self.dim;
        let k = self.corners();
        let verts = &self.cell_vertices[c * k..(c + 1) * k];
        let mut grad = [0.0f64; 4];
        for corner in 0..k {
            for a in 0..d {
                let hi = corner | (1 << a);
                let lo = corner & !(1 << a);
                grad[a] = (u[verts[hi] as usize] - u[verts[lo] as usize]) / self.spacing[a];
            }
            visit(corner, &grad[..d]);
        }
    }

    #[inline]
    pub fn cell_quad(&self, c: usize, grad: &[f64]) -> f64 {
        let d = self.dim;
        let inv = &self.cell_inv[c * d * d..(c + 1) * d * d];
        let mut q = 0.0;
        for i in 0..d {
            let mut s = 0.0;
            for j in 0..d {
                s += inv[i * d + j] * grad[j];
            }
            q += grad[i] * s;
        }
        q
    }

    /// Lengths of the half-stencil edges, `(3^dim - 1)/2` per vertex (slots above center).
    pub fn edge_lengths(&self) -> &[f64] {
        self.edge_lengths.get_or_init(|| self.compute_edge_lengths())
    }

    fn compute_edge_lengths(&self) -> Vec<f64> {
        let d = self.dim;
        let s = self.stencil_size();
        let center = (s - 1) / 2;
        let half = s - center - 1;
        let nv = self.num_vertices();
        let mut out = vec![f64::INFINITY; nv * half];
        let mut x = vec![0.0; d];
        let mut mid = vec![0.0; d];
        let mut g = vec![0.0; d * d];
        for v in 0..nv {
            self.vertex_coords_into(v, &mut x);
            for (k, slot) in (center + 1..s).enumerate() {
                let Some(w) = self.neighbor(v, slot) else { continue };
                let off = self.stencil_offset(slot);
                let dx: Vec<f64> = (0..d).map(|a| off[a] as f64 * self.spacing[a]).collect();
                for a in 0..d {
                    mid[a] = x[a] + 0.5 * dx[a];
                }
                match &self.source {
                    Some(f) => f(&mid, &mut g),
                    None => {
                        let (gv, gw) = (self.vertex_metric(v), self.vertex_metric(w));
                        for i in 0..d * d {
                            g[i] = 0.5 * (gv[i] + gw[i]);
                        }
                    }
                }
                let mut q = 0.0;
                for i in 0..d {
                    for j in 0..d {
                        q += g[i * d + j] * dx[i] * dx[j];
                    }
                }
                out[v * half + k] = q.max(0.0).sqrt();
            }
        }
        out
    }

    /// Scalar curvature at vertices: closed form when attached, otherwise finite differences.
    pub fn scalar_field(&self) -> (DiscreteField, Vec<bool>) {
        match &self.scalar_source {
            Some(f) => {
                let vals: Vec<f64> = (0..self.num_vertices()).map(|v| f(&self.vertex_coords(v))).collect();
                let n = vals.len();
                (DiscreteField::new(vals), vec![true; n])
            }
            None => scalar_curvature_fd(self),
        }
    }
}

/// Metric `diag(1, |x|^{2 alpha})` sampled on a rectangle. The degenerate line `x = 0` must
/// fall on a vertex line so that no quadrature point lies on it.
pub fn discretize_power(metric: PowerMetric, lower: [f64; 2], upper: [f64; 2], resolution: [usize; 2]) -> Result<GridManifold> {
    if resolution.iter().any(|&n| n < 4) {
        return Err(Error::Config(format!("resolution {resolution:?} below 4 per axis")));
    }
    if !(lower[0] <= 0.0 && upper[0] >= 0.0) {
        return Err(Error::Config("domain must contain a segment of x = 0".into()));
    }
    let h = (upper[0] - lower[0]) / resolution[0] as f64;
    let t = -lower[0] / h;
    if (t - t.round()).abs() > 1e-9 {
        return Err(Error::Config("x = 0 must fall on a vertex line (half-offset quadrature)".into()));
    }
    let spec = GridSpec::new(resolution.to_vec(), lower.to_vec(), upper.to_vec(), vec![false, false]);
    GridManifold::from_fn(
        &spec,
        Arc::new(move |x: &[f64], out: &mut [f64]| {
            let g = metric.at(x[0], x[1]).g;
            out.copy_from_slice(&[g[0][0], g[0][1], g[1][0], g[1][1]]);
        }),
    )
}

/// A tube around an axis-parallel line, carrying the rescaled building block
/// `dr^2 + (r0/5)^2 f(5r/r0)^2 h + phi(5r/r0)^2 dx^2` restricted to the grid dimension.
#[derive(Debug, Clone)]
pub struct Strip {
    /// Coordinate axis the line runs along.
    pub axis: usize,
    /// A point on the line (its `axis` component is ignored).
    pub center: Vec<f64>,
    pub r0: f64,
    pub profile: ProfilePair,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StripBase {
    pub lower: Vec<f64>,
    pub upper: Vec<f64>,
    pub periodic: Vec<bool>,
}

fn min_image(d: f64, len: f64, periodic: bool) -> f64 {
    if periodic {
        d - len * (d / len).round()
    } else {
        d
    }
}

struct StripGeometry {
    lens: Vec<f64>,
    periodic: Vec<bool>,
}

impl StripGeometry {
    /// Transverse displacement from the strip axis to `x`.
    fn transverse(&self, s: &Strip, x: &[f64], w: &mut [f64]) -> f64 {
        let mut r2 = 0.0;
        for a in 0..x.len() {
            w[a] = if a == s.axis { 0.0 } else { min_image(x[a] - s.center[a], self.lens[a], self.periodic[a]) };
            r2 += w[a] * w[a];
        }
        r2.sqrt()
    }
}

fn strip_jets(s: &Strip, r: f64) -> (Jet, Jet) {
    let k = 5.0 / s.r0;
    let rho = k * r;
    let f = s.profile.f.jet(rho);
    let p = s.profile.phi.jet(rho);
    (Jet::new(f.v / k, f.d1, f.d2 * k), Jet::new(p.v, p.d1 * k, p.d2 * k * k))
}

fn check_strips(base: &StripBase, strips: &[Strip]) -> Result<()> {
    let dim = base.lower.len();
    let lens: Vec<f64> = (0..dim).map(|a| base.upper[a] - base.lower[a]).collect();
    for s in strips {
        if s.axis >= dim || s.center.len() != dim || !(s.r0 > 0.0) {
            return Err(Error::Config("malformed strip".into()));
        }
    }
    for (i, a) in strips.iter().enumerate() {
        for b in &strips[i + 1..] {
            let mut d2 = 0.0;
            for c in 0..dim {
                if c == a.axis || c == b.axis {
                    continue;
                }
                let d = min_image(a.center[c] - b.center[c], lens[c], base.periodic[c]);
                d2 += d * d;
            }
            if d2.sqrt() < a.r0 + b.r0 {
                return Err(Error::Config(format!(
                    "strips along axes {} and {} overlap (axis distance {:.4})",
                    a.axis,
                    b.axis,
                    d2.sqrt()
                )));
            }
        }
    }
    Ok(())
}

/// Flat base (plane box or torus) with building-block strips glued around axis-parallel lines.
pub fn discretize_strip_metric(base: &StripBase, strips: &[Strip], cells: &[usize]) -> Result<GridManifold> {
    check_strips(base, strips)?;
    let dim = base.lower.len();
    let geo = Arc::new(StripGeometry {
        lens: (0..dim).map(|a| base.upper[a] - base.lower[a]).collect(),
        periodic: base.periodic.clone(),
    });
    let strips: Arc<Vec<Strip>> = Arc::new(strips.to_vec());
    let spec = GridSpec::new(cells.to_vec(), base.lower.clone(), base.upper.clone(), base.periodic.clone());

    let (g1, s1) = (geo.clone(), strips.clone());
    let metric: MetricFn = Arc::new(move |x: &[f64], out: &mut [f64]| {
        let d = x.len();
        for i in 0..d {
            for j in 0..d {
                out[i * d + j] = if i == j { 1.0 } else { 0.0 };
            }
        }
        let mut w = [0.0f64; 4];
        for s in s1.iter() {
            let r = g1.transverse(s, x, &mut w[..d]);
            if r >= s.r0 {
                continue;
            }
            let (f, phi) = strip_jets(s, r);
            out[s.axis * d + s.axis] = phi.v * phi.v;
            if d > 2 && r > 0.0 {
                // transverse block: radial direction 1, angular directions (F/r)^2
                let ratio = f.v / r;
                let ang = ratio * ratio;
                for i in 0..d {
                    if i == s.axis {
                        continue;
                    }
                    for j in 0..d {
                        if j == s.axis {
                            continue;
                        }
                        let wij = w[i] * w[j] / (r * r);
                        out[i * d + j] = ang * (if i == j { 1.0 } else { 0.0 } - wij) + wij;
                    }
                }
            } else if d > 2 {
                let slope = f.d1;
                for i in 0..d {
                    if i != s.axis {
                        out[i * d + i] = slope * slope;
                    }
                }
            }
            break;
        }
    });
    let (g2, s2) = (geo, strips);
    let scalar: ScalarFn = Arc::new(move |x: &[f64]| {
        let d = x.len();
        let mut w = [0.0f64; 4];
        for s in s2.iter() {
            let r = g2.transverse(s, x, &mut w[..d]);
            if r >= s.r0 {
                continue;
            }
            let (f, phi) = strip_jets(s, r.max(1e-12));
            return scalar_from_jets(d - 1, f, phi);
        }
        0.0
    });
    Ok(GridManifold::from_fn(&spec, metric)?.with_scalar_fn(scalar))
}

/// Single-source shortest paths over the full `3^dim - 1` neighbor stencil; edge lengths are
/// metric lengths of the straight segment measured with the metric at its midpoint.
pub fn geodesic_distances(grid: &GridManifold, source: usize) -> DiscreteField {
    #[derive(Copy, Clone, PartialEq)]
    struct State {
        cost: f64,
        node: usize,
    }
    impl Eq for State {}
    impl Ord for State {
        fn cmp(&self, other: &Self) -> Ordering {
            other.cost.partial_cmp(&self.cost).unwrap_or(Ordering::Equal).then_with(|| self.node.cmp(&other.node))
        }
    }
    impl PartialOrd for State {
        fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
            Some(self.cmp(other))
        }
    }

    let lens = grid.edge_lengths();
    let s = grid.stencil_size();
    let center = (s - 1) / 2;
    let half = s - center - 1;
    let nv = grid.num_vertices();
    let mut dist = vec![f64::INFINITY; nv];
    let mut heap = BinaryHeap::new();
    dist[source] = 0.0;
    heap.push(State { cost: 0.0, node: source });
    while let Some(State { cost, node }) = heap.pop() {
        if cost > dist[node] {
            continue;
        }
        for slot in 0..s {
            if slot == center {
                continue;
            }
            let Some(w) = grid.neighbor(node, slot) else { continue };
            // an edge is stored once, at the endpoint for which it points "up"
            let len = if slot > center {
                lens[node * half + (slot - center - 1)]
            } else {
                lens[w * half + (s - 1 - slot - center - 1)]
            };
            let next = cost + len;
            if next < dist[w] {
                dist[w] = next;
                heap.push(State { cost: next, node: w });
            }
        }
    }
    DiscreteField::new(dist)
}

/// Scalar curvature from the metric, its first derivatives `dg[a]` and second derivatives
/// `ddg[a][b]` (each a `dim x dim` row-major block) at one point.
pub fn scalar_from_metric_derivatives(dim: usize, g: &[f64], dg: &[Vec<f64>], ddg: &[Vec<Vec<f64>>]) -> Option<f64> {
    let d = dim;
    let gi = DMatrix::from_row_slice(d, d, g).try_inverse()?;
    let inv = |i: usize, j: usize| gi[(i, j)];
    let at = |m: &[f64], i: usize, j: usize| m[i * d + j];
    // Gamma_{k,ij} (first kind) and its derivative along l
    let gamma1 = |k: usize, i: usize, j: usize| 0.5 * (at(&dg[i], j, k) + at(&dg[j], i, k) - at(&dg[k], i, j));
    let dgamma1 = |l: usize, k: usize, i: usize, j: usize| {
        0.5 * (at(&ddg[l][i], j, k) + at(&ddg[l][j], i, k) - at(&ddg[l][k], i, j))
    };
    let mut gamma = vec![0.0; d * d * d];
    for k in 0..d {
        for i in 0..d {
            for j in 0..d {
                gamma[(k * d + i) * d + j] = (0..d).map(|m| inv(k, m) * gamma1(m, i, j)).sum();
            }
        }
    }
    let gam = |k: usize, i: usize, j: usize| gamma[(k * d + i) * d + j];
    // d_l Gamma^k_ij = -g^{ka} (d_l g_ab) Gamma^b_ij + g^{km} d_l Gamma_{m,ij}
    let dgam = |l: usize, k: usize, i: usize, j: usize| {
        let mut s = 0.0;
        for a in 0..d {
            for b in 0..d {
                s -= inv(k, a) * at(&dg[l], a, b) * gam(b, i, j);
            }
            s += inv(k, a) * dgamma1(l, a, i, j);
        }
        s
    };
    let mut scalar = 0.0;
    for i in 0..d {
        for j in 0..d {
            let mut ric = 0.0;
            for k in 0..d {
                ric += dgam(k, k, i, j) - dgam(j, k, i, k);
                for l in 0..d {
                    ric += gam(k, k, l) * gam(l, i, j) - gam(k, j, l) * gam(l, i, k);
                }
            }
            scalar += inv(i, j) * ric;
        }
    }
    Some(scalar)
}

/// Second-order finite-difference scalar curvature at every vertex with a full, non-degenerate
/// `3^dim` stencil; other vertices are masked out (value NaN, flag false).
pub fn scalar_curvature_fd(grid: &GridManifold) -> (DiscreteField, Vec<bool>) {
    let d = grid.dim;
    let dd = d * d;
    let nv = grid.num_vertices();
    let s = grid.stencil_size();
    let center = (s - 1) / 2;
    let mut vals = vec![f64::NAN; nv];
    let mut ok = vec![false; nv];
    let mut off = vec![0i32; d];
    for v in 0..nv {
        let mut nb = vec![0usize; s];
        let mut good = true;
        for slot in 0..s {
            match grid.neighbor(v, slot) {
                Some(w) if !grid.degenerate_mask[w] => nb[slot] = w,
                _ => {
                    good = false;
                    break;
                }
            }
        }
        if !good {
            continue;
        }
        let g = grid.vertex_metric(v).to_vec();
        let gm = |slot: usize| grid.vertex_metric(nb[slot]);
        let mut slot_of = |pairs: &[(usize, i32)]| {
            off.iter_mut().for_each(|o| *o = 0);
            for &(a, o) in pairs {
                off[a] = o;
            }
            grid.stencil_slot(&off)
        };
        let mut dg = vec![vec![0.0; dd]; d];
        let mut ddg = vec![vec![vec![0.0; dd]; d]; d];
        for a in 0..d {
            let (p, m) = (slot_of(&[(a, 1)]), slot_of(&[(a, -1)]));
            let h = grid.spacing[a];
            for e in 0..dd {
                dg[a][e] = (gm(p)[e] - gm(m)[e]) / (2.0 * h);
                ddg[a][a][e] = (gm(p)[e] - 2.0 * gm(center)[e] + gm(m)[e]) / (h * h);
            }
            for b in a + 1..d {
                let pp = slot_of(&[(a, 1), (b, 1)]);
                let pm = slot_of(&[(a, 1), (b, -1)]);
                let mp = slot_of(&[(a, -1), (b, 1)]);
                let mm = slot_of(&[(a, -1), (b, -1)]);
                let hh = 4.0 * grid.spacing[a] * grid.spacing[b];
                for e in 0..dd {
                    let val = (gm(pp)[e] - gm(pm)[e] - gm(mp)[e] + gm(mm)[e]) / hh;
                    ddg[a][b][e] = val;
                    ddg[b][a][e] = val;
                }
            }
        }
        if let Some(r) = scalar_from_metric_derivatives(d, &g, &dg, &ddg) {
            vals[v] = r;
            ok[v] = true;
        }
    }
    (DiscreteField::new(vals), ok)
}

/// Volume average of `|R|^q` over a closed grid.
pub fn lq_scalar_norm(grid: &GridManifold, q: f64) -> Result<f64> {
    if !(q > 0.0 && q < 1.0) {
        return Err(Error::Domain(format!("q = {q} not in (0, 1)")));
    }
    if !grid.is_closed() {
        return Err(Error::Domain("L^q scalar norm needs a closed (fully periodic) grid".into()));
    }
    let (r, ok) = grid.scalar_field();
    let mut num = 0.0;
    let mut den = 0.0;
    for v in 0..grid.num_vertices() {
        if ok[v] {
            num += r.values[v].abs().powf(q) * grid.vol_weight[v];
            den += grid.vol_weight[v];
        }
    }
    Ok(num / den)
}

/// Discrete p-energy `sum_cells sum_corners w (g^{ij} d_i f d_j f)^{p/2}`.
pub fn p_energy(grid: &GridManifold, field: &DiscreteField, p: f64) -> Result<f64> {
    if !(p > 1.0) {
        return Err(Error::Domain(format!("p = {p} must exceed 1")));
    }
    let k = grid.corners() as f64;
    let half = 0.5 * p;
    let mut e = 0.0;
    for c in 0..grid.num_cells() {
        let w = grid.cell_vol[c] / k;
        if w == 0.0 {
            continue;
        }
        let mut acc = 0.0;
        grid.for_each_corner_gradient(c, &field.values, |_, g| {
            acc += grid.cell_quad(c, g).powf(half);
        });
        e += w * acc;
    }
    Ok(e)
}

/// Writes the grid file: header `dim shape.. spacing.. periodic.. lower..`, then one row per
/// vertex with its index, metric upper triangle, dual volume and degenerate flag.
pub fn write_grid<W: Write>(grid: &GridManifold, mut w: W) -> Result<()> {
    let d = grid.dim;
    let mut head = vec![d.to_string()];
    head.extend(grid.shape.iter().map(|s| s.to_string()));
    head.extend(grid.spacing.iter().map(|s| format!("{s:.17e}")));
    head.extend(grid.periodic.iter().map(|&p| (p as u8).to_string()));
    head.extend(grid.lower.iter().map(|s| format!("{s:.17e}")));
    writeln!(w, "{}", head.join(" "))?;
    for v in 0..grid.num_vertices() {
        let g = grid.vertex_metric(v);
        let mut row = vec![v.to_string()];
        for i in 0..d {
            for j in i..d {
                row.push(format!("{:.17e}", g[i * d + j]));
            }
        }
        row.push(format!("{:.17e}", grid.vol_weight[v]));
        row.push((grid.degenerate_mask[v] as u8).to_string());
        writeln!(w, "{}", row.join(" "))?;
    }
    Ok(())
}

/// Reads a grid file. The cell metric is rebuilt as the average of the corner vertex metrics.
pub fn read_grid<R: BufRead>(r: R) -> Result<GridManifold> {
    let mut lines = r.lines();
    let perr = |m: &str| Error::Parse(m.to_string());
    let head = lines.next().ok_or_else(|| perr("empty grid file"))??;
    let t: Vec<&str> = head.split_whitespace().collect();
    let d: usize = t.first().and_then(|s| s.parse().ok()).ok_or_else(|| perr("bad dim"))?;
    if t.len() != 1 + 4 * d {
        return Err(perr("header length"));
    }
    let num = |s: &str| s.parse::<f64>().map_err(|_| perr("bad number"));
    let shape: Vec<usize> = t[1..1 + d].iter().map(|s| s.parse().map_err(|_| perr("bad shape"))).collect::<Result<_>>()?;
    let spacing: Vec<f64> = t[1 + d..1 + 2 * d].iter().map(|s| num(s)).collect::<Result<_>>()?;
    let periodic: Vec<bool> = t[1 + 2 * d..1 + 3 * d].iter().map(|s| *s == "1").collect();
    let lower: Vec<f64> = t[1 + 3 * d..1 + 4 * d].iter().map(|s| num(s)).collect::<Result<_>>()?;
    let cells: Vec<usize> = (0..d).map(|a| if periodic[a] { shape[a] } else { shape[a] - 1 }).collect();
    let nv: usize = shape.iter().product();
    let mut metric = vec![0.0; nv * d * d];
    for line in lines {
        let line = line?;
        let f: Vec<&str> = line.split_whitespace().collect();
        if f.is_empty() {
            continue;
        }
        let v: usize = f[0].parse().map_err(|_| perr("bad index"))?;
        if v >= nv || f.len() != 1 + d * (d + 1) / 2 + 2 {
            return Err(perr("bad row"));
        }
        let mut k = 1;
        for i in 0..d {
            for j in i..d {
                let x = num(f[k])?;
                metric[v * d * d + i * d + j] = x;
                metric[v * d * d + j * d + i] = x;
                k += 1;
            }
        }
    }
    let spec = GridSpec {
        upper: (0..d).map(|a| lower[a] + spacing[a] * cells[a] as f64).collect(),
        cells,
        lower,
        periodic,
    };
    let proto = GridManifold::flat(&spec)?;
    let metric = Arc::new(metric);
    let table = proto.clone();
    let m2 = metric.clone();
    let sampled: MetricFn = Arc::new(move |x: &[f64], out: &mut [f64]| {
        // exact at vertices, corner average at cell centers
        let dd = x.len() * x.len();
        let idx: Vec<f64> = (0..x.len()).map(|a| (x[a] - table.lower[a]) / table.spacing[a]).collect();
        let base: Vec<i64> = idx.iter().map(|t| t.floor() as i64).collect();
        let frac: Vec<bool> = idx.iter().zip(&base).map(|(t, b)| t - *b as f64 > 1e-9).collect();
        out.iter_mut().for_each(|o| *o = 0.0);
        let mut count = 0.0;
        for corner in 0..(1usize << x.len()) {
            if (0..x.len()).any(|a| (corner >> a) & 1 == 1 && !frac[a]) {
                continue;
            }
            let vi: Vec<usize> = (0..x.len())
                .map(|a| {
                    let j = base[a] + ((corner >> a) & 1) as i64;
                    j.rem_euclid(table.shape[a] as i64) as usize
                })
                .collect();
            let v = table.vertex_index(&vi);
            for e in 0..dd {
                out[e] += m2[v * dd + e];
            }
            count += 1.0;
        }
        out.iter_mut().for_each(|o| *o /= count);
    });
    let mut grid = GridManifold::from_fn(&spec, sampled)?;
    grid.source = None;
    Ok(grid)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::warped_metrics::{make_power_metric, BuildingBlockParams, PowerMetricParams};

    fn flat_square(n: usize) -> GridManifold {
        GridManifold::flat(&GridSpec::cube(2, n, 0.0, 1.0)).unwrap()
    }

    #[test]
    fn power_grid_samples_and_offsets() {
        let m = make_power_metric(PowerMetricParams { alpha: 1.0 }).unwrap();
        let g = discretize_power(m, [-1.0, -1.0], [1.0, 1.0], [64, 64]).unwrap();
        let v = g.nearest_vertex(&[0.5, 0.0]);
        assert_eq!(g.vertex_coords(v), vec![0.5, 0.0]);
        assert_eq!(g.vertex_metric(v), &[1.0, 0.0, 0.0, 0.25]);
        let m = make_power_metric(PowerMetricParams { alpha: 0.5 }).unwrap();
        for n in [8, 16, 64] {
            let g = discretize_power(m, [-1.0, -1.0], [1.0, 1.0], [n, n]).unwrap();
            assert!(g.cell_degenerate.iter().all(|&d| !d));
            assert!(g.cell_vol.iter().all(|&v| v > 0.0));
            assert!(g.degenerate_mask.iter().any(|&d| d));
        }
        assert!(matches!(
            discretize_power(m, [-1.0, -1.0], [1.0, 1.0], [3, 8]),
            Err(Error::Config(_))
        ));
    }

    #[test]
    fn power_grid_volume_converges() {
        // int_{-1}^{1} int_{-1}^{1} |x|^{1/2} dx dy = 8/3
        let m = make_power_metric(PowerMetricParams { alpha: 0.5 }).unwrap();
        let exact = 8.0 / 3.0;
        let mut prev = f64::INFINITY;
        for n in [16, 32, 64, 128] {
            let g = discretize_power(m, [-1.0, -1.0], [1.0, 1.0], [n, n]).unwrap();
            let err = (g.total_volume() - exact).abs() / exact;
            assert!(err < prev);
            prev = err;
        }
        assert!(prev < 0.01);
    }

    #[test]
    fn energy_of_linear_field() {
        let g = flat_square(16);
        let f = DiscreteField::new((0..g.num_vertices()).map(|v| g.vertex_coords(v)[0]).collect());
        assert!((p_energy(&g, &f, 2.0).unwrap() - 1.0).abs() < 1e-12);
        assert!((p_energy(&g, &f, 4.0).unwrap() - 1.0).abs() < 1e-12);
        let c = DiscreteField::constant(g.num_vertices(), 3.0);
        assert_eq!(p_energy(&g, &c, 3.0).unwrap(), 0.0);
        assert!(matches!(p_energy(&g, &f, 1.0), Err(Error::Domain(_))));
    }

    #[test]
    fn flat_geodesics() {
        let g = GridManifold::flat(&GridSpec::cube(2, 32, 0.0, 2.0)).unwrap();
        let a = g.nearest_vertex(&[0.5, 0.5]);
        let d = geodesic_distances(&g, a);
        let b = g.nearest_vertex(&[1.5, 0.5]);
        assert!((d.values[b] - 1.0).abs() <= g.spacing[0]);
        let c = g.nearest_vertex(&[1.5, 1.5]);
        assert!((d.values[c] / 2f64.sqrt() - 1.0).abs() < 1e-12);
        let e = g.nearest_vertex(&[1.5, 1.0]);
        let exact = (1.0f64 + 0.25).sqrt();
        assert!((d.values[e] - exact).abs() / exact <= 0.08);
        assert_eq!(d.values[a], 0.0);
    }

    #[test]
    fn geodesic_collapse_on_degenerate_line() {
        let m = make_power_metric(PowerMetricParams { alpha: 1.0 }).unwrap();
        let mut prev = f64::INFINITY;
        for n in [8, 16, 32, 64] {
            let g = discretize_power(m, [-1.0, -1.0], [1.0, 1.0], [n, n]).unwrap();
            let a = g.nearest_vertex(&[0.0, 0.0]);
            let b = g.nearest_vertex(&[0.0, 1.0]);
            let d = geodesic_distances(&g, a).values[b];
            assert!(d <= prev);
            prev = d;
        }
        assert!(prev < 1e-12);
    }

    #[test]
    fn fd_curvature_flat_and_sphere() {
        let g = GridManifold::flat(&GridSpec::unit_torus(2, 16)).unwrap();
        let (r, ok) = scalar_curvature_fd(&g);
        assert!(ok.iter().all(|&o| o));
        assert!(r.values.iter().all(|v| v.abs() < 1e-12));

        let a: f64 = 1.7;
        let spec = GridSpec::cube(2, 64, -0.5, 0.5);
        let g = GridManifold::from_fn(
            &spec,
            Arc::new(move |x: &[f64], out: &mut [f64]| {
                let s = 4.0 * a * a / (1.0 + x[0] * x[0] + x[1] * x[1]).powi(2);
                out.copy_from_slice(&[s, 0.0, 0.0, s]);
            }),
        )
        .unwrap();
        let (r, ok) = scalar_curvature_fd(&g);
        for v in 0..g.num_vertices() {
            if ok[v] {
                assert!((r.values[v] - 2.0 / (a * a)).abs() < 0.02 * 2.0 / (a * a));
            }
        }
        assert!(!ok[0]);
    }

    #[test]
    fn strips_reject_overlap() {
        let base = StripBase { lower: vec![0.0; 2], upper: vec![1.0; 2], periodic: vec![true; 2] };
        let prof = ProfilePair::euclidean(10.0);
        let s = |axis, c: f64| Strip { axis, center: vec![c, c], r0: 0.1, profile: prof.clone() };
        assert!(discretize_strip_metric(&base, &[s(0, 0.2), s(0, 0.5)], &[8, 8]).is_ok());
        assert!(matches!(discretize_strip_metric(&base, &[s(0, 0.2), s(0, 0.3)], &[8, 8]), Err(Error::Config(_))));
        assert!(matches!(discretize_strip_metric(&base, &[s(0, 0.2), s(1, 0.7)], &[8, 8]), Err(Error::Config(_))));
        // periodic wrap counts as adjacency
        assert!(discretize_strip_metric(&base, &[s(0, 0.05), s(0, 0.97)], &[8, 8]).is_err());
    }

    #[test]
    fn strip_metric_profile() {
        let base = StripBase { lower: vec![0.0; 2], upper: vec![1.0; 2], periodic: vec![true; 2] };
        let p = BuildingBlockParams::new(3, 0.2, 0.01).unwrap().with_gain(0.0).unwrap();
        let prof = ProfilePair::building_block(&p, 10.0).unwrap();
        let none = discretize_strip_metric(&base, &[], &[16, 16]).unwrap();
        assert!(none.metric.chunks(4).all(|g| g == [1.0, 0.0, 0.0, 1.0]));
        let strip = Strip { axis: 0, center: vec![0.0, 0.5], r0: 0.2, profile: prof.clone() };
        let g = discretize_strip_metric(&base, &[strip], &[16, 32]).unwrap();
        let on_axis = g.nearest_vertex(&[0.3, 0.5]);
        assert!((g.vertex_metric(on_axis)[0] - 0.01f64.powf(0.4)).abs() < 1e-12);
        let off = g.nearest_vertex(&[0.3, 0.9]);
        assert_eq!(g.vertex_metric(off), &[1.0, 0.0, 0.0, 1.0]);
        // monotone toward the axis
        let mut prev = 0.0;
        for k in 0..=16 {
            let v = g.nearest_vertex(&[0.3, 0.5 + k as f64 / 32.0]);
            let gxx = g.vertex_metric(v)[0];
            assert!(gxx >= prev);
            prev = gxx;
        }
        // two parallel strips give translated copies of the same field
        let s1 = Strip { axis: 0, center: vec![0.0, 0.25], r0: 0.2, profile: prof.clone() };
        let s2 = Strip { axis: 0, center: vec![0.0, 0.75], r0: 0.2, profile: prof };
        let g2 = discretize_strip_metric(&base, &[s1, s2], &[8, 32]).unwrap();
        for i in 0..8 {
            for j in 0..16 {
                let a = g2.vertex_index(&[i, j]);
                let b = g2.vertex_index(&[i, j + 16]);
                assert_eq!(g2.vertex_metric(a), g2.vertex_metric(b));
            }
        }
    }

    #[test]
    fn lq_norm_cases() {
        let g = GridManifold::flat(&GridSpec::unit_torus(2, 8)).unwrap();
        assert_eq!(lq_scalar_norm(&g, 0.5).unwrap(), 0.0);
        let c = GridManifold::flat(&GridSpec::unit_torus(2, 8)).unwrap().with_scalar_fn(Arc::new(|_x: &[f64]| 4.0));
        assert!((lq_scalar_norm(&c, 0.5).unwrap() - 2.0).abs() < 1e-12);
        assert!(lq_scalar_norm(&flat_square(8), 0.5).is_err());
        assert!(lq_scalar_norm(&g, 1.5).is_err());
    }

    #[test]
    fn rescale_volume_and_energy() {
        let g = GridManifold::flat(&GridSpec::cube(3, 6, 0.0, 1.0)).unwrap();
        let rho = 1.7;
        let h = g.rescaled(rho).unwrap();
        for v in 0..g.num_vertices() {
            assert!((h.vol_weight[v] / g.vol_weight[v] - rho.powi(-3)).abs() < 1e-12);
        }
        let f = DiscreteField::new((0..g.num_vertices()).map(|v| (v as f64 * 0.37).sin()).collect());
        let p = 4.0;
        let ratio = p_energy(&h, &f, p).unwrap() / p_energy(&g, &f, p).unwrap();
        assert!((ratio / rho.powf(p - 3.0) - 1.0).abs() < 1e-12);
    }

    #[test]
    fn grid_file_round_trip() {
        let m = make_power_metric(PowerMetricParams { alpha: 0.5 }).unwrap();
        let g = discretize_power(m, [-1.0, 0.0], [1.0, 1.0], [8, 4]).unwrap();
        let mut buf = Vec::new();
        write_grid(&g, &mut buf).unwrap();
        let h = read_grid(std::io::Cursor::new(buf)).unwrap();
        assert_eq!(h.shape, g.shape);
        assert_eq!(h.metric, g.metric);
        assert_eq!(h.degenerate_mask, g.degenerate_mask);
        assert!((h.total_volume() - g.total_volume()).abs() < 0.1 * g.total_volume());
    }
}
