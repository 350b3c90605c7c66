//! W-functional, mu and nu entropies on closed grids.
//!
//! Everything is computed in the u-form: with `u^2 = (4 pi tau)^{-d/2} e^{-f}`,
//! `W = int 4 tau |grad u|^2 + tau R u^2 - u^2 log u^2 - (d/2 log(4 pi tau) + d) u^2`,
//! which equals the f-form integrand identically. The Dirichlet part uses the same corner
//! quadrature as the p-energy (p = 2); the remaining terms are lumped at vertices.

use serde::{Deserialize, Serialize};

use crate::dp_solver::EnergyModel;
use crate::error::{Error, Result};
use crate::grid_manifold::{DiscreteField, GridManifold};
use crate::linalg::{Csr, EnvelopeCholesky};

/// Discrete operators shared by every evaluation on one grid.
pub struct EntropyGrid<'a> {
    pub grid: &'a GridManifold,
    /// Stiffness matrix `K` with `u^T K u = int |grad u|^2`.
    stiffness: Csr,
    mass: Vec<f64>,
    scalar: Vec<f64>,
    active: Vec<bool>,
}

impl<'a> EntropyGrid<'a> {
    pub fn new(grid: &'a GridManifold) -> Result<Self> {
        if !grid.is_closed() {
            return Err(Error::Domain("entropy needs a closed (fully periodic) grid".into()));
        }
        let model = EnergyModel::from_grid(grid);
        let n = grid.num_vertices();
        let mut stiffness = model_pattern(&model);
        model.hessian(&vec![0.0; n], 2.0, 0.0, false, &mut stiffness);
        stiffness.vals.iter_mut().for_each(|v| *v *= 0.5);
        let (r, ok) = grid.scalar_field();
        let active: Vec<bool> = (0..n).map(|v| !grid.degenerate_mask[v] && grid.vol_weight[v] > 0.0).collect();
        let scalar = (0..n).map(|v| if ok[v] { r.values[v] } else { 0.0 }).collect();
        let mass = (0..n).map(|v| if active[v] { grid.vol_weight[v] } else { 0.0 }).collect();
        Ok(EntropyGrid { grid, stiffness, mass, scalar, active })
    }

    pub fn dim(&self) -> f64 {
        self.grid.dim as f64
    }

    pub fn volume(&self) -> f64 {
        self.mass.iter().sum()
    }

    pub fn scalar(&self) -> &[f64] {
        &self.scalar
    }

    fn constant(&self, tau: f64) -> f64 {
        let d = self.dim();
        0.5 * d * (4.0 * std::f64::consts::PI * tau).ln() + d
    }

    /// `W` in u-form for an arbitrary (not necessarily normalized) `u`.
    pub fn w_of_u(&self, u: &[f64], tau: f64) -> f64 {
        let mut ku = vec![0.0; u.len()];
        self.stiffness.matvec(u, &mut ku);
        let c = self.constant(tau);
        let mut w = 0.0;
        for j in 0..u.len() {
            if !self.active[j] {
                continue;
            }
            let u2 = u[j] * u[j];
            let ent = if u2 > 0.0 { u2 * u2.ln() } else { 0.0 };
            w += 4.0 * tau * u[j] * ku[j] + self.mass[j] * (tau * self.scalar[j] * u2 - ent - c * u2);
        }
        w
    }

    /// Gradient of `w_of_u` with respect to `u`.
    fn w_grad_u(&self, u: &[f64], tau: f64, out: &mut [f64]) {
        self.stiffness.matvec(u, out);
        let c = self.constant(tau);
        for j in 0..u.len() {
            if !self.active[j] {
                out[j] = 0.0;
                continue;
            }
            let u2 = u[j] * u[j];
            let lg = if u2 > 0.0 { u2.ln() } else { 0.0 };
            out[j] = 8.0 * tau * out[j] + self.mass[j] * (2.0 * tau * self.scalar[j] * u[j] - 2.0 * u[j] * lg - 2.0 * u[j] - 2.0 * c * u[j]);
        }
    }

    /// Pointwise Euler-Lagrange residual `-4 tau Lap u + tau R u - 2 u log u - (c + mu) u`.
    pub fn el_pointwise(&self, u: &[f64], tau: f64, mu: f64) -> Vec<f64> {
        let mut ku = vec![0.0; u.len()];
        self.stiffness.matvec(u, &mut ku);
        let c = self.constant(tau);
        (0..u.len())
            .map(|j| {
                if !self.active[j] {
                    return 0.0;
                }
                let ulogu = if u[j] > 0.0 { u[j] * u[j].ln() } else { 0.0 };
                4.0 * tau * ku[j] / self.mass[j] + tau * self.scalar[j] * u[j] - 2.0 * ulogu - (c + mu) * u[j]
            })
            .collect()
    }

    /// `int u^2 dvol`.
    pub fn mass_of(&self, u: &[f64]) -> f64 {
        u.iter().zip(&self.mass).map(|(u, m)| m * u * u).sum()
    }

    pub fn l2_norm(&self, r: &[f64]) -> f64 {
        self.mass_of(r).sqrt()
    }
}

fn model_pattern(model: &EnergyModel) -> Csr {
    let mut m = model.pattern_clone();
    m.clear();
    m
}

/// `W(g, f, tau)` evaluated through the u-form.
pub fn w_functional(grid: &GridManifold, f: &DiscreteField, tau: f64) -> Result<f64> {
    if !(tau > 0.0) {
        return Err(Error::Domain("tau must be positive".into()));
    }
    let eg = EntropyGrid::new(grid)?;
    let s = (4.0 * std::f64::consts::PI * tau).powf(-eg.dim() / 4.0);
    let u: Vec<f64> = f.values.iter().map(|f| s * (-0.5 * f).exp()).collect();
    Ok(eg.w_of_u(&u, tau))
}

/// L2 norm of the Euler-Lagrange residual of `mu(g, tau)` at `u` (normalized by `int u^2 = 1`).
pub fn el_residual(grid: &GridManifold, u: &DiscreteField, tau: f64, mu: f64) -> Result<f64> {
    let eg = EntropyGrid::new(grid)?;
    if (0..u.len()).any(|j| eg.active[j] && !(u.values[j] > 0.0)) {
        return Err(Error::Domain("u must be positive".into()));
    }
    Ok(eg.l2_norm(&eg.el_pointwise(&u.values, tau, mu)))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EntropyOptions {
    /// Target for the Euler-Lagrange residual (relative to `||u|| = 1`).
    pub el_tol: f64,
    pub max_iter: usize,
    pub armijo: f64,
    pub memory: usize,
    /// Extra random initializations (0 = constant start plus bump start only).
    pub random_starts: usize,
    pub seed: u64,
}

impl Default for EntropyOptions {
    fn default() -> Self {
        EntropyOptions { el_tol: 1e-6, max_iter: 50_000, armijo: 1e-4, memory: 12, random_starts: 0, seed: 1 }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EntropyResult {
    pub mu: f64,
    pub tau: f64,
    #[serde(skip)]
    pub minimizer_u: DiscreteField,
    pub w_value: f64,
    pub el_residual: f64,
    pub constraint_error: f64,
    pub iterations: usize,
    pub converged: bool,
    /// Which initialization won: "constant", "bump" or "random-k".
    pub start: String,
}

struct Objective<'e, 'g> {
    eg: &'e EntropyGrid<'g>,
    tau: f64,
    /// Factor of `8 tau K + 2 M (1 + tau |R|)`, the preconditioner of the quasi-Newton steps.
    precond: EnvelopeCholesky,
}

impl<'e, 'g> Objective<'e, 'g> {
    fn new(eg: &'e EntropyGrid<'g>, tau: f64) -> Self {
        let mut precond = eg.stiffness.clone();
        precond.vals.iter_mut().for_each(|v| *v *= 8.0 * tau);
        for j in 0..precond.n {
            if let Some(s) = precond.slot(j, j) {
                precond.vals[s] += 2.0 * eg.mass[j] * (1.0 + tau * eg.scalar[j].abs());
            }
        }
        let precond = EnvelopeCholesky::factor(&precond, &eg.active).expect("preconditioner is positive definite");
        Objective { eg, tau, precond }
    }

    /// `u = w / |w|`, `|w|^2 = int w^2`.
    fn to_u(&self, w: &[f64]) -> Vec<f64> {
        let z = self.eg.mass_of(w).sqrt();
        w.iter().zip(&self.eg.active).map(|(w, a)| if *a { w / z } else { 0.0 }).collect()
    }

    /// Value of `W(w / |w|)` and its gradient with respect to `w`.
    fn value_grad(&self, w: &[f64], grad: &mut [f64]) -> (f64, Vec<f64>) {
        let z = self.eg.mass_of(w).sqrt();
        let u = self.to_u(w);
        let mut g = vec![0.0; u.len()];
        self.eg.w_grad_u(&u, self.tau, &mut g);
        let lambda: f64 = g.iter().zip(&u).map(|(g, u)| g * u).sum();
        for j in 0..u.len() {
            grad[j] = if self.eg.active[j] { (g[j] - self.eg.mass[j] * u[j] * lambda) / z } else { 0.0 };
        }
        (self.eg.w_of_u(&u, self.tau), u)
    }

    fn apply_precond(&self, r: &[f64]) -> Vec<f64> {
        self.precond.solve(r)
    }
}

/// Preconditioned limited-memory quasi-Newton descent of `W(w / |w|)`, renormalizing onto the
/// constraint sphere after every accepted step (Armijo backtracking). The functional is even in
/// each nodal value, so the sign of `w` is free and the minimizer is returned as `|u|`.
fn minimize_from(eg: &EntropyGrid, tau: f64, w0: Vec<f64>, opts: &EntropyOptions) -> (Vec<f64>, f64, f64, usize, bool) {
    let obj = Objective::new(eg, tau);
    let n = w0.len();
    let dot = |a: &[f64], b: &[f64]| a.iter().zip(b).map(|(x, y)| x * y).sum::<f64>();
    let mut w = obj.to_u(&w0);
    let mut g = vec![0.0; n];
    let (mut val, mut u) = obj.value_grad(&w, &mut g);
    let mut s_hist: Vec<Vec<f64>> = Vec::new();
    let mut y_hist: Vec<Vec<f64>> = Vec::new();
    let mut res = f64::INFINITY;
    let mut it = 0;
    let mut converged = false;
    let mut g_new = vec![0.0; n];
    let mut flat_steps = 0;
    while it < opts.max_iter && flat_steps < 20 {
        let ua: Vec<f64> = u.iter().map(|x| x.abs()).collect();
        res = eg.l2_norm(&eg.el_pointwise(&ua, tau, val));
        if res <= opts.el_tol {
            converged = true;
            break;
        }
        it += 1;
        // two-loop recursion with the preconditioner as initial inverse Hessian
        let mut q = g.clone();
        let m = s_hist.len();
        let mut alpha = vec![0.0; m];
        for i in (0..m).rev() {
            alpha[i] = dot(&s_hist[i], &q) / dot(&y_hist[i], &s_hist[i]);
            for j in 0..n {
                q[j] -= alpha[i] * y_hist[i][j];
            }
        }
        let mut r = obj.apply_precond(&q);
        for i in 0..m {
            let beta = dot(&y_hist[i], &r) / dot(&y_hist[i], &s_hist[i]);
            for j in 0..n {
                r[j] += s_hist[i][j] * (alpha[i] - beta);
            }
        }
        let mut dir: Vec<f64> = r.iter().map(|x| -x).collect();
        let mut slope = dot(&g, &dir);
        if !(slope < 0.0) {
            dir = obj.apply_precond(&g).iter().map(|x| -x).collect();
            slope = dot(&g, &dir);
            s_hist.clear();
            y_hist.clear();
        }
        let mut step = 1.0;
        let mut accepted = false;
        let mut trial = vec![0.0; n];
        while step > 1e-16 {
            for j in 0..n {
                trial[j] = w[j] + step * dir[j];
            }
            let (vt, ut) = obj.value_grad(&trial, &mut g_new);
            if vt <= val + opts.armijo * step * slope {
                // back onto the sphere; the gradient scales with 1/|w|
                let z = eg.mass_of(&trial).sqrt();
                g_new.iter_mut().for_each(|x| *x *= z);
                let s: Vec<f64> = (0..n).map(|j| ut[j] - w[j]).collect();
                let y: Vec<f64> = (0..n).map(|j| g_new[j] - g[j]).collect();
                if dot(&s, &y) > 1e-300 {
                    s_hist.push(s);
                    y_hist.push(y);
                    if s_hist.len() > opts.memory {
                        s_hist.remove(0);
                        y_hist.remove(0);
                    }
                }
                w = ut.clone();
                std::mem::swap(&mut g, &mut g_new);
                if val - vt <= 1e-15 * val.abs().max(1.0) {
                    flat_steps += 1;
                } else {
                    flat_steps = 0;
                }
                val = vt;
                u = ut;
                accepted = true;
                break;
            }
            step *= 0.5;
        }
        if !accepted {
            if s_hist.is_empty() {
                break;
            }
            s_hist.clear();
            y_hist.clear();
        }
    }
    let u: Vec<f64> = u.iter().map(|x| x.abs()).collect();
    (u, val, res, it, converged)
}

/// `mu(g, tau)`: minimum of `W` over `int u^2 = 1`, `u > 0`.
pub fn mu_entropy(grid: &GridManifold, tau: f64, opts: &EntropyOptions) -> Result<EntropyResult> {
    if !(tau > 0.0) {
        return Err(Error::Domain("tau must be positive".into()));
    }
    let eg = EntropyGrid::new(grid)?;
    mu_entropy_on(&eg, tau, opts)
}

pub fn mu_entropy_on(eg: &EntropyGrid, tau: f64, opts: &EntropyOptions) -> Result<EntropyResult> {
    use rand::{Rng, SeedableRng};
    let grid = eg.grid;
    let n = grid.num_vertices();
    let mut starts: Vec<(String, Vec<f64>)> = vec![("constant".into(), vec![0.0; n])];
    let r = eg.scalar();
    // Gaussian bump at the max-R vertex (vertex 0 when R is constant)
    let peak = (0..n).max_by(|&a, &b| r[a].total_cmp(&r[b]).then(b.cmp(&a))).unwrap_or(0);
    let c = grid.vertex_coords(peak);
    let bump: Vec<f64> = (0..n)
        .map(|j| {
            let dx = grid.displacement(&c, &grid.vertex_coords(j));
            -dx.iter().map(|x| x * x).sum::<f64>() / (8.0 * tau)
        })
        .collect();
    starts.push(("bump".into(), bump));
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(opts.seed);
    for k in 0..opts.random_starts {
        starts.push((format!("random-{k}"), (0..n).map(|_| rng.gen_range(-0.5..0.5)).collect()));
    }
    let mut best: Option<EntropyResult> = None;
    for (name, v0) in starts {
        let vmax = v0.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let w0: Vec<f64> = v0.iter().map(|v| (v - vmax).exp()).collect();
        let (u, w, res, it, conv) = minimize_from(eg, tau, w0, opts);
        let cand = EntropyResult {
            mu: w,
            tau,
            constraint_error: (eg.mass_of(&u) - 1.0).abs(),
            minimizer_u: DiscreteField::new(u),
            w_value: w,
            el_residual: res,
            iterations: it,
            converged: conv,
            start: name,
        };
        if best.as_ref().map_or(true, |b| cand.mu < b.mu) {
            best = Some(cand);
        }
    }
    best.ok_or_else(|| Error::Config("no initialization".into()))
}

/// One point of the nu sweep.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct NuResult {
    pub nu: f64,
    pub argmin_tau: f64,
    pub sweep: Vec<(f64, f64)>,
}

/// `nu(g, tau)` approximated by the minimum of `mu` over `tau_grid_size` log-spaced
/// `tau' in [tau_min, tau]`.
pub fn nu_entropy(grid: &GridManifold, tau: f64, tau_min: f64, tau_grid_size: usize, opts: &EntropyOptions) -> Result<NuResult> {
    use rayon::prelude::*;
    if !(tau_min > 0.0 && tau_min < tau) || tau_grid_size < 2 {
        return Err(Error::Domain("need 0 < tau_min < tau and at least two scales".into()));
    }
    let eg = EntropyGrid::new(grid)?;
    let taus = crate::smooth::logspace(tau_min, tau, tau_grid_size);
    let mus: Vec<f64> = taus.par_iter().map(|&t| mu_entropy_on(&eg, t, opts).map(|r| r.mu)).collect::<Result<_>>()?;
    let sweep: Vec<(f64, f64)> = taus.into_iter().zip(mus).collect();
    let (argmin_tau, nu) = sweep.iter().cloned().min_by(|a, b| a.1.total_cmp(&b.1)).unwrap_or((tau, 0.0));
    Ok(NuResult { nu, argmin_tau, sweep })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::grid_manifold::GridSpec;
    use std::f64::consts::PI;

    #[test]
    fn constant_f_matches_hand_value() {
        let g = GridManifold::flat(&GridSpec::new(vec![8, 8], vec![0.0; 2], vec![2.0; 2], vec![true; 2])).unwrap();
        let tau = 0.3;
        // (4 pi tau)^{-1} e^{-f} V = 1
        let f0 = (4.0f64).ln() - (4.0 * PI * tau).ln();
        let f = DiscreteField::constant(g.num_vertices(), f0);
        let w = w_functional(&g, &f, tau).unwrap();
        assert!((w - (f0 - 2.0)).abs() < 1e-12);
        let open = GridManifold::flat(&GridSpec::cube(2, 8, 0.0, 1.0)).unwrap();
        assert!(w_functional(&open, &f, tau).is_err());
    }

    #[test]
    fn gradient_matches_differences() {
        let g = GridManifold::flat(&GridSpec::unit_torus(2, 6)).unwrap().with_scalar_fn(std::sync::Arc::new(|x: &[f64]| (6.0 * x[0]).sin()));
        let eg = EntropyGrid::new(&g).unwrap();
        let obj = Objective::new(&eg, 0.2);
        let n = g.num_vertices();
        let v: Vec<f64> = (0..n).map(|j| 1.0 + 0.3 * (j as f64 * 0.9).sin()).collect();
        let mut gr = vec![0.0; n];
        obj.value_grad(&v, &mut gr);
        let mut tmp = vec![0.0; n];
        for j in 0..n {
            let h = 1e-6;
            let mut vp = v.clone();
            vp[j] += h;
            let mut vm = v.clone();
            vm[j] -= h;
            let fd = (obj.value_grad(&vp, &mut tmp).0 - obj.value_grad(&vm, &mut tmp).0) / (2.0 * h);
            assert!((fd - gr[j]).abs() <= 1e-6 * gr[j].abs().max(1e-3), "{j}: {fd} {}", gr[j]);
        }
    }

    #[test]
    fn flat_torus_constant_minimizer() {
        let g = GridManifold::flat(&GridSpec::unit_torus(2, 16)).unwrap();
        let r = mu_entropy(&g, 0.1, &EntropyOptions { random_starts: 2, ..Default::default() }).unwrap();
        assert!((r.mu - (-(4.0 * PI * 0.1).ln() - 2.0)).abs() < 1e-6);
        assert!(r.constraint_error < 1e-10);
        assert!(r.el_residual < 1e-4);
        let noise: Vec<f64> = (0..g.num_vertices()).map(|j| 1.0 + 0.3 * (j as f64).sin()).collect();
        let z = EntropyGrid::new(&g).unwrap().mass_of(&noise).sqrt();
        let u = DiscreteField::new(noise.iter().map(|x| x / z).collect());
        assert!(el_residual(&g, &u, 0.1, r.mu).unwrap() > 10.0 * r.el_residual.max(1e-6));
    }

    #[test]
    fn gaussian_solves_el_away_from_wrap() {
        // side 16 torus, tau = 1: the Euclidean Gaussian with mu = 0
        let spec = GridSpec::new(vec![64, 64], vec![-8.0; 2], vec![8.0; 2], vec![true; 2]);
        let g = GridManifold::flat(&spec).unwrap();
        let eg = EntropyGrid::new(&g).unwrap();
        let tau = 1.0;
        let u: Vec<f64> = (0..g.num_vertices())
            .map(|j| {
                let x = g.vertex_coords(j);
                (4.0 * PI * tau).powf(-0.5) * (-(x[0] * x[0] + x[1] * x[1]) / (8.0 * tau)).exp()
            })
            .collect();
        assert!((eg.mass_of(&u) - 1.0).abs() < 1e-6);
        let r = eg.el_pointwise(&u, tau, 0.0);
        let umax = u.iter().cloned().fold(0.0, f64::max);
        for j in 0..u.len() {
            let x = g.vertex_coords(j);
            if x[0].hypot(x[1]) < 4.0 {
                // second-order truncation, h = 1/4
                assert!(r[j].abs() < 0.01 * umax, "{j} {}", r[j]);
            }
        }
        assert!(eg.w_of_u(&u, tau).abs() < 1e-2);
    }

    #[test]
    fn w_is_scale_invariant() {
        let spec = GridSpec::unit_torus(2, 12);
        let metric: crate::grid_manifold::MetricFn = std::sync::Arc::new(|x: &[f64], g: &mut [f64]| {
            let c = 1.0 + 0.3 * (2.0 * PI * x[0]).sin() * (2.0 * PI * x[1]).cos();
            g.fill(0.0);
            g[0] = c;
            g[3] = c;
        });
        let g = GridManifold::from_fn(&spec, metric).unwrap();
        let f = DiscreteField::new((0..g.num_vertices()).map(|j| 0.4 * (j as f64 * 0.7).cos()).collect());
        let rho = 2.5;
        let tau = 0.05;
        let w1 = w_functional(&g, &f, tau).unwrap();
        let w2 = w_functional(&g.rescaled(rho).unwrap(), &f, tau / (rho * rho)).unwrap();
        assert!((w1 - w2).abs() < 1e-9 * w1.abs().max(1.0), "{w1} {w2}");
    }

    #[test]
    fn random_restarts_agree_on_flat_torus() {
        use rand::{Rng, SeedableRng};
        let g = GridManifold::flat(&GridSpec::unit_torus(2, 16)).unwrap();
        let eg = EntropyGrid::new(&g).unwrap();
        let opts = EntropyOptions::default();
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(11);
        let mus: Vec<f64> = (0..5)
            .map(|_| {
                let w0: Vec<f64> = (0..g.num_vertices()).map(|_| rng.gen_range(0.2..1.0)).collect();
                minimize_from(&eg, 0.1, w0, &opts).1
            })
            .collect();
        for m in &mus {
            assert!((m - mus[0]).abs() < 1e-3, "{mus:?}");
        }
        assert!(mus[0] <= 1e-3);
    }

    #[test]
    fn nu_below_mu_and_monotone() {
        let g = GridManifold::flat(&GridSpec::unit_torus(2, 24)).unwrap();
        let opts = EntropyOptions::default();
        let lo = nu_entropy(&g, 0.05, 0.002, 6, &opts).unwrap();
        let hi = nu_entropy(&g, 0.2, 0.002, 8, &opts).unwrap();
        let mu = mu_entropy(&g, 0.05, &opts).unwrap().mu;
        assert!(lo.nu <= mu + 1e-12);
        assert!(hi.nu <= lo.nu + 1e-9);
        assert!(lo.sweep.len() == 6 && lo.sweep.iter().all(|&(t, _)| t >= 0.002 * (1.0 - 1e-12) && t <= 0.05 * (1.0 + 1e-12)));
    }
}
