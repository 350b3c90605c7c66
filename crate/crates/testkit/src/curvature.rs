use std::f64::consts::PI;

use nalgebra::DMatrix;
use proptest::prelude::*;

use dpgeo_core::warped_metrics::Jet;

/// `f(r) = r + a r^3 exp(-b r^2)`, `phi(r) = c (1 + d r^2 exp(-e r^2))`: smooth at the axis,
/// positive for the sampled coefficient ranges.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct WarpedProfile {
    pub a: f64,
    pub b: f64,
    pub c: f64,
    pub d: f64,
    pub e: f64,
}

impl WarpedProfile {
    pub fn f_jet(&self, r: f64) -> Jet {
        let (a, b) = (self.a, self.b);
        let x = (-b * r * r).exp();
        Jet::new(
            r + a * r.powi(3) * x,
            1.0 + a * (3.0 * r * r - 2.0 * b * r.powi(4)) * x,
            a * (6.0 * r - 14.0 * b * r.powi(3) + 4.0 * b * b * r.powi(5)) * x,
        )
    }

    pub fn phi_jet(&self, r: f64) -> Jet {
        let (c, d, e) = (self.c, self.d, self.e);
        let x = (-e * r * r).exp();
        Jet::new(
            c * (1.0 + d * r * r * x),
            c * d * (2.0 * r - 2.0 * e * r.powi(3)) * x,
            c * d * (2.0 - 10.0 * e * r * r + 4.0 * e * e * r.powi(4)) * x,
        )
    }
}

pub fn warped_profile() -> impl Strategy<Value = WarpedProfile> {
    (-0.3..0.3f64, 0.5..2.0f64, 0.5..2.0f64, -0.4..0.4f64, 0.5..2.0f64)
        .prop_map(|(a, b, c, d, e)| WarpedProfile { a, b, c, d, e })
}

/// `dr^2 + f(r)^2 h_{S^{n-1}} + phi(r)^2 dt^2` in Cartesian coordinates `(y_1..y_n, t)`,
/// `r = |y|`.
pub fn warped_metric(n: usize, prof: WarpedProfile) -> impl Fn(&[f64]) -> DMatrix<f64> {
    move |x: &[f64]| {
        let dim = n + 1;
        let r = x[..n].iter().map(|v| v * v).sum::<f64>().sqrt();
        let q = prof.f_jet(r).v / r;
        let mut g = DMatrix::zeros(dim, dim);
        for i in 0..n {
            for j in 0..n {
                let radial = x[i] * x[j] / (r * r);
                g[(i, j)] = (1.0 - q * q) * radial + if i == j { q * q } else { 0.0 };
            }
        }
        g[(n, n)] = prof.phi_jet(r).v.powi(2);
        g
    }
}

/// Round sphere of radius `rho` in stereographic coordinates (scalar `d (d - 1) / rho^2`).
pub fn stereographic_sphere(dim: usize, rho: f64) -> impl Fn(&[f64]) -> DMatrix<f64> {
    move |x: &[f64]| {
        let s: f64 = x.iter().map(|v| v * v).sum();
        let k = 4.0 * rho * rho / (1.0 + s).powi(2);
        DMatrix::identity(dim, dim) * k
    }
}

fn shifted(x: &[f64], axis: usize, h: f64) -> Vec<f64> {
    let mut y = x.to_vec();
    y[axis] += h;
    y
}

/// `Gamma^i_{jk}` at `x`, flattened as `[i][j][k]`, from central differences of the metric.
pub fn christoffel(metric: &dyn Fn(&[f64]) -> DMatrix<f64>, x: &[f64], h: f64) -> Vec<f64> {
    let d = x.len();
    let ginv = metric(x).try_inverse().expect("metric is invertible");
    let dg: Vec<DMatrix<f64>> = (0..d).map(|k| (metric(&shifted(x, k, h)) - metric(&shifted(x, k, -h))) / (2.0 * h)).collect();
    let mut gamma = vec![0.0; d * d * d];
    for i in 0..d {
        for j in 0..d {
            for k in 0..d {
                let mut s = 0.0;
                for l in 0..d {
                    s += ginv[(i, l)] * (dg[j][(l, k)] + dg[k][(l, j)] - dg[l][(j, k)]);
                }
                gamma[(i * d + j) * d + k] = 0.5 * s;
            }
        }
    }
    gamma
}

/// `R = g^{jk} (d_i G^i_jk - d_j G^i_ik + G^i_ip G^p_jk - G^i_jp G^p_ik)` with every
/// derivative taken by central differences of step `h`.
pub fn fd_scalar_curvature(metric: &dyn Fn(&[f64]) -> DMatrix<f64>, x: &[f64], h: f64) -> f64 {
    let d = x.len();
    let at = |i: usize, j: usize, k: usize| (i * d + j) * d + k;
    let gamma = christoffel(metric, x, h);
    let dgamma: Vec<Vec<f64>> = (0..d)
        .map(|m| {
            let plus = christoffel(metric, &shifted(x, m, h), h);
            let minus = christoffel(metric, &shifted(x, m, -h), h);
            plus.iter().zip(&minus).map(|(p, q)| (p - q) / (2.0 * h)).collect()
        })
        .collect();
    let ginv = metric(x).try_inverse().expect("metric is invertible");
    let mut scalar = 0.0;
    for j in 0..d {
        for k in 0..d {
            let mut ric = 0.0;
            for i in 0..d {
                ric += dgamma[i][at(i, j, k)] - dgamma[j][at(i, i, k)];
                for p in 0..d {
                    ric += gamma[at(i, i, p)] * gamma[at(p, j, k)] - gamma[at(i, j, p)] * gamma[at(p, i, k)];
                }
            }
            scalar += ginv[(j, k)] * ric;
        }
    }
    scalar
}

/// Unit direction in `R^n` from two angles (enough for n <= 3; higher n pads with zeros).
pub fn direction(n: usize, theta: f64, psi: f64) -> Vec<f64> {
    let mut u = vec![0.0; n];
    let full = [theta.sin() * psi.cos(), theta.sin() * psi.sin(), theta.cos()];
    for (i, v) in full.iter().enumerate().take(n) {
        u[i] = *v;
    }
    let norm = u.iter().map(|v| v * v).sum::<f64>().sqrt();
    if norm < 1e-3 {
        u[0] = 1.0;
        return u;
    }
    u.iter().map(|v| v / norm).collect()
}

pub fn angles() -> impl Strategy<Value = (f64, f64)> {
    (0.2..(PI - 0.2), 0.0..(2.0 * PI))
}
