//! Doubly warped building-block metrics `dr^2 + f(r)^2 h + phi(r)^2 dx^2` on
//! `R_+ x S^{n-1} x R`, the planar power metric `dx^2 + |x|^{2a} dy^2`, and closed-form
//! curvature for the warped class.

use std::io::Write;
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::smooth::{
    logspace, smoothstep, smoothstep_d1, smoothstep_d2, smoothstep_integral,
};

/// Value and first two derivatives of a radial function at one point.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Jet {
    pub v: f64,
    pub d1: f64,
    pub d2: f64,
}

impl Jet {
    pub fn new(v: f64, d1: f64, d2: f64) -> Self {
        Jet { v, d1, d2 }
    }
}

pub trait RadialFn: Send + Sync {
    fn jet(&self, r: f64) -> Jet;

    fn value(&self, r: f64) -> f64 {
        self.jet(r).v
    }
}

/// `c * r`
#[derive(Debug, Clone, Copy)]
pub struct Linear(pub f64);

impl RadialFn for Linear {
    fn jet(&self, r: f64) -> Jet {
        Jet::new(self.0 * r, self.0, 0.0)
    }
}

#[derive(Debug, Clone, Copy)]
pub struct Constant(pub f64);

impl RadialFn for Constant {
    fn jet(&self, _r: f64) -> Jet {
        Jet::new(self.0, 0.0, 0.0)
    }
}

/// `c * r^k`
#[derive(Debug, Clone, Copy)]
pub struct PowerLaw {
    pub c: f64,
    pub k: f64,
}

impl RadialFn for PowerLaw {
    fn jet(&self, r: f64) -> Jet {
        let v = self.c * r.powf(self.k);
        Jet::new(v, self.k * v / r, self.k * (self.k - 1.0) * v / (r * r))
    }
}

/// Where the cone factor of the `f` ODE switches on.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "kebab-case")]
pub enum ConeOnset {
    /// Cutoff argument `r / (100 eps)`: the cone starts beyond `50 eps`.
    Literal,
    /// Cutoff argument `2r / eps`: full cone coefficient from `eps/2` on, so that the
    /// coefficient is constant on the whole middle region `[eps/2, 2]`.
    #[default]
    Inner,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BuildingBlockParams {
    /// Dimension of the sphere factor; the metric lives in dimension `n + 1`.
    pub n: usize,
    pub delta: f64,
    pub epsilon: f64,
    /// Prefactor `K` of the cone coefficient `sigma0 = K n delta`.
    pub cone_gain: f64,
    pub onset: ConeOnset,
}

pub const DEFAULT_CONE_GAIN: f64 = 1e4;

impl BuildingBlockParams {
    pub fn new(n: usize, delta: f64, epsilon: f64) -> Result<Self> {
        let p = BuildingBlockParams {
            n,
            delta,
            epsilon,
            cone_gain: DEFAULT_CONE_GAIN,
            onset: ConeOnset::default(),
        };
        p.validate()?;
        Ok(p)
    }

    pub fn with_gain(mut self, gain: f64) -> Result<Self> {
        self.cone_gain = gain;
        self.validate()?;
        Ok(self)
    }

    pub fn with_onset(mut self, onset: ConeOnset) -> Self {
        self.onset = onset;
        self
    }

    /// `delta = (-ln eps)^{-1/2}`, the coupling used for collapsing lines.
    pub fn default_delta(epsilon: f64) -> f64 {
        (-epsilon.ln()).powf(-0.5)
    }

    pub fn validate(&self) -> Result<()> {
        if self.n < 3 {
            return Err(Error::Domain(format!("n = {} must be at least 3", self.n)));
        }
        // delta = 0 is admitted as the flat-fiber limit.
        if !(self.delta >= 0.0 && self.delta < 0.25) {
            return Err(Error::Domain(format!("delta = {} not in [0, 1/4)", self.delta)));
        }
        if !(self.epsilon > 0.0 && self.epsilon < 0.25) {
            return Err(Error::Domain(format!("epsilon = {} not in (0, 1/4)", self.epsilon)));
        }
        if !(self.cone_gain >= 0.0 && self.cone_gain.is_finite()) {
            return Err(Error::Domain(format!("cone gain {} must be >= 0", self.cone_gain)));
        }
        Ok(())
    }

    pub fn sigma0(&self) -> f64 {
        self.cone_gain * self.n as f64 * self.delta
    }

    pub fn onset_scale(&self) -> f64 {
        match self.onset {
            ConeOnset::Literal => 100.0 * self.epsilon,
            ConeOnset::Inner => 0.5 * self.epsilon,
        }
    }
}

/// Cutoff: 1 on `[0, 1/2]`, 0 on `[1, inf)`, non-increasing.
pub fn zeta(x: f64) -> Jet {
    let t = 2.0 * x - 1.0;
    Jet::new(1.0 - smoothstep(t), -2.0 * smoothstep_d1(t), -4.0 * smoothstep_d2(t))
}

/// Smoothed `max(eps, r)`: equal to `eps` below `eps/2` and to `r` above `3eps/2`.
pub fn psi1(eps: f64, r: f64) -> Jet {
    let t = (r - 0.5 * eps) / eps;
    if t <= 0.0 {
        return Jet::new(eps, 0.0, 0.0);
    }
    if t >= 1.0 {
        return Jet::new(r, 1.0, 0.0);
    }
    Jet::new(
        eps + eps * smoothstep_integral(t),
        smoothstep(t),
        smoothstep_d1(t) / eps,
    )
}

/// Third derivative of [`psi1`], used only for the construction check.
pub fn psi1_d3(eps: f64, r: f64) -> f64 {
    let t = (r - 0.5 * eps) / eps;
    smoothstep_d2(t) / (eps * eps)
}

/// Smoothed `min(r, 1)`: equal to `r` below `1/2` and to 1 above `3/2`; concave.
pub fn psi2(r: f64) -> Jet {
    let t = r - 0.5;
    if t <= 0.0 {
        return Jet::new(r, 1.0, 0.0);
    }
    if t >= 1.0 {
        return Jet::new(1.0, 0.0, 0.0);
    }
    Jet::new(
        0.5 + t - smoothstep_integral(t),
        1.0 - smoothstep(t),
        -smoothstep_d1(t),
    )
}

pub fn psi2_d3(r: f64) -> f64 {
    -smoothstep_d2(r - 0.5)
}

/// The unpowered profile `phi_eps`: `eps`, then `psi1`, `r`, `psi2`, and finally 1.
pub fn phi_eps(eps: f64, r: f64) -> Jet {
    if r < 0.5 {
        psi1(eps, r)
    } else {
        psi2(r)
    }
}

/// `phi_{delta,eps} = phi_eps^delta`.
#[derive(Debug, Clone, Copy)]
pub struct PhiProfile {
    pub delta: f64,
    pub epsilon: f64,
}

impl RadialFn for PhiProfile {
    fn jet(&self, r: f64) -> Jet {
        let b = phi_eps(self.epsilon, r);
        if self.delta == 0.0 {
            return Jet::new(1.0, 0.0, 0.0);
        }
        let v = b.v.powf(self.delta);
        let d1 = self.delta * v * b.d1 / b.v;
        let d2 = self.delta * v * ((self.delta - 1.0) * b.d1 * b.d1 + b.v * b.d2) / (b.v * b.v);
        Jet::new(v, d1, d2)
    }
}

/// Largest violation ratio of `|psi1^(k)| <= 8 eps^(1-k)`, `|psi2^(k)| <= 4^k` (k <= 3) and
/// `psi2'' <= 0` on a fine grid; values <= 1 mean the bounds hold.
pub fn interpolant_bound_ratio(eps: f64) -> f64 {
    let m = 4000;
    let mut worst: f64 = 0.0;
    for i in 0..=m {
        let r = 0.5 * eps + 1.5 * eps * i as f64 / m as f64;
        let j = psi1(eps, r);
        let d3 = psi1_d3(eps, r);
        for (k, v) in [j.v, j.d1, j.d2, d3].iter().enumerate() {
            let bound = 8.0 * eps.powi(1 - k as i32);
            worst = worst.max(v.abs() / bound);
        }
        let s = 0.5 + 1.5 * i as f64 / m as f64;
        let j = psi2(s);
        let d3 = psi2_d3(s);
        for (k, v) in [j.v, j.d1, j.d2, d3].iter().enumerate() {
            worst = worst.max(v.abs() / 4f64.powi(k as i32));
        }
        if j.d2 > 0.0 {
            worst = f64::INFINITY;
        }
    }
    worst
}

/// `max |zeta'|^2 + |zeta''|` on a fine grid.
pub fn zeta_bound() -> f64 {
    let m = 4000;
    (0..=m)
        .map(|i| {
            let z = zeta(0.5 + 0.5 * i as f64 / m as f64);
            z.d1 * z.d1 + z.d2.abs()
        })
        .fold(0.0, f64::max)
}

pub fn make_phi(params: &BuildingBlockParams) -> Result<PhiProfile> {
    params.validate()?;
    let ratio = interpolant_bound_ratio(params.epsilon);
    if ratio > 1.0 {
        return Err(Error::Domain(format!(
            "interpolant derivative bounds violated (ratio {ratio:.3})"
        )));
    }
    Ok(PhiProfile { delta: params.delta, epsilon: params.epsilon })
}

/// Sphere warping `f = zeta(r/4) f~ + (1 - zeta(r/4)) r`, with `f~` the solution of
/// `f~' = 1 - sigma0 (1 - zeta(r/s))`, `f~(0) = 0`.
#[derive(Debug, Clone, Copy)]
pub struct FProfile {
    pub sigma0: f64,
    pub onset: f64,
}

impl FProfile {
    fn tilde_d1(&self, r: f64) -> f64 {
        1.0 - self.sigma0 * (1.0 - zeta(r / self.onset).v)
    }

    fn tilde_d2(&self, r: f64) -> f64 {
        self.sigma0 * zeta(r / self.onset).d1 / self.onset
    }

    /// `f~(r) = r - sigma0 int_0^r (1 - zeta(x/s)) dx`, with `1 - zeta(x/s) = step(2x/s - 1)`.
    pub fn tilde(&self, r: f64) -> f64 {
        let s = self.onset;
        r - self.sigma0 * 0.5 * s * smoothstep_integral(2.0 * r / s - 1.0)
    }

    pub fn tilde_jet(&self, r: f64) -> Jet {
        Jet::new(self.tilde(r), self.tilde_d1(r), self.tilde_d2(r))
    }
}

impl RadialFn for FProfile {
    fn jet(&self, r: f64) -> Jet {
        if r >= 4.0 || self.sigma0 == 0.0 {
            return Jet::new(r, 1.0, 0.0);
        }
        let t = self.tilde_jet(r);
        if r <= 2.0 {
            return t;
        }
        let z = zeta(r / 4.0);
        let (zd1, zd2) = (z.d1 / 4.0, z.d2 / 16.0);
        let (e0, e1, e2) = (t.v - r, t.d1 - 1.0, t.d2);
        Jet::new(
            r + z.v * e0,
            1.0 + zd1 * e0 + z.v * e1,
            zd2 * e0 + 2.0 * zd1 * e1 + z.v * e2,
        )
    }
}

pub fn make_f(params: &BuildingBlockParams) -> Result<FProfile> {
    params.validate()?;
    let sigma0 = params.sigma0();
    // Beyond sigma0 = 1 the ODE solution turns around and f stops being a warping factor.
    if sigma0 >= 1.0 {
        return Err(Error::Domain(format!(
            "cone coefficient {sigma0} = K n delta must be below 1"
        )));
    }
    if zeta_bound() > 100.0 {
        return Err(Error::Domain("cutoff derivative bound violated".into()));
    }
    Ok(FProfile { sigma0, onset: params.onset_scale() })
}

#[derive(Clone)]
pub struct ProfilePair {
    pub f: Arc<dyn RadialFn>,
    pub phi: Arc<dyn RadialFn>,
    pub r_max: f64,
}

impl std::fmt::Debug for ProfilePair {
    fn fmt(&self, fm: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        fm.debug_struct("ProfilePair").field("r_max", &self.r_max).finish()
    }
}

impl ProfilePair {
    pub fn new(f: Arc<dyn RadialFn>, phi: Arc<dyn RadialFn>, r_max: f64) -> Self {
        ProfilePair { f, phi, r_max }
    }

    pub fn building_block(params: &BuildingBlockParams, r_max: f64) -> Result<Self> {
        Ok(ProfilePair {
            f: Arc::new(make_f(params)?),
            phi: Arc::new(make_phi(params)?),
            r_max,
        })
    }

    pub fn euclidean(r_max: f64) -> Self {
        ProfilePair { f: Arc::new(Linear(1.0)), phi: Arc::new(Constant(1.0)), r_max }
    }
}

/// Ricci tensor of the warped metric in the frame `(dr, h, dx)`: `Ric = rr dr^2 + sphere h + xx dx^2`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RicciComponents {
    pub rr: f64,
    pub sphere: f64,
    pub xx: f64,
}

impl RicciComponents {
    /// `g^{AB} Ric_AB`.
    pub fn trace(&self, n: usize, f: f64, phi: f64) -> f64 {
        self.rr + (n as f64 - 1.0) * self.sphere / (f * f) + self.xx / (phi * phi)
    }

    /// `|Ric|^2` with indices raised by the warped metric.
    pub fn norm_sq(&self, n: usize, f: f64, phi: f64) -> f64 {
        let s = self.sphere / (f * f);
        let x = self.xx / (phi * phi);
        self.rr * self.rr + (n as f64 - 1.0) * s * s + x * x
    }
}

fn jets_at(p: &ProfilePair, r: f64) -> Result<(Jet, Jet)> {
    if !(r > 0.0) {
        return Err(Error::Singular(format!("curvature requested at r = {r}")));
    }
    let f = p.f.jet(r);
    let phi = p.phi.jet(r);
    if !(f.v > 0.0) || !(phi.v > 0.0) {
        return Err(Error::Singular(format!("warping factor vanishes at r = {r}")));
    }
    Ok((f, phi))
}

pub fn scalar_from_jets(n: usize, f: Jet, phi: Jet) -> f64 {
    let nn = n as f64;
    let f2 = f.v * f.v;
    let f2_dd = 2.0 * (f.d1 * f.d1 + f.v * f.d2);
    (nn - 1.0) / f2 * (2.0 - f2_dd) + (nn - 4.0) * (nn - 1.0) / f2 * (1.0 - f.d1 * f.d1)
        - 2.0 * phi.d2 / phi.v
        - 2.0 * (nn - 1.0) * phi.d1 * f.d1 / (phi.v * f.v)
}

pub fn ricci_from_jets(n: usize, f: Jet, phi: Jet) -> RicciComponents {
    let nn = n as f64;
    RicciComponents {
        rr: -(nn - 1.0) * f.d2 / f.v - phi.d2 / phi.v,
        sphere: (nn - 2.0) - f.v * f.d2 - (nn - 2.0) * f.d1 * f.d1 - phi.d1 * f.v * f.d1 / phi.v,
        xx: -phi.v * phi.d2 - (nn - 1.0) * phi.v * phi.d1 * f.d1 / f.v,
    }
}

pub fn scalar_curvature(p: &ProfilePair, n: usize, r: f64) -> Result<f64> {
    let (f, phi) = jets_at(p, r)?;
    Ok(scalar_from_jets(n, f, phi))
}

pub fn ricci_components(p: &ProfilePair, n: usize, r: f64) -> Result<RicciComponents> {
    let (f, phi) = jets_at(p, r)?;
    Ok(ricci_from_jets(n, f, phi))
}

#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct CurvatureSample {
    pub r: f64,
    pub f: Jet,
    pub phi: Jet,
    pub scalar: f64,
    pub ricci: RicciComponents,
}

/// Minimum of R with its location over one radial region.
#[derive(Debug, Clone, Copy, Serialize, Deserialize, PartialEq)]
pub struct RegionMin {
    pub min: f64,
    pub at: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CurvatureReport {
    pub params: BuildingBlockParams,
    pub samples: Vec<CurvatureSample>,
    pub min_r: f64,
    /// r <= eps/2
    pub inner: Option<RegionMin>,
    /// eps/2 <= r <= 2
    pub middle: Option<RegionMin>,
    /// r > 2
    pub outer: Option<RegionMin>,
}

impl CurvatureReport {
    pub fn write_csv<W: Write>(&self, w: W) -> Result<()> {
        write_profile_csv(&self.samples, w)
    }
}

pub fn write_profile_csv<W: Write>(samples: &[CurvatureSample], w: W) -> Result<()> {
    let mut out = csv::Writer::from_writer(w);
    let io = |e: csv::Error| Error::Io(e.to_string());
    out.write_record(["r", "f", "f'", "f''", "phi", "phi'", "phi''", "R", "R_rr", "R_sph", "R_xx"])
        .map_err(io)?;
    for s in samples {
        out.write_record(
            [
                s.r, s.f.v, s.f.d1, s.f.d2, s.phi.v, s.phi.d1, s.phi.d2, s.scalar, s.ricci.rr,
                s.ricci.sphere, s.ricci.xx,
            ]
            .iter()
            .map(|v| format!("{v:.17e}")),
        )
        .map_err(io)?;
    }
    out.flush()?;
    Ok(())
}

/// Smallest radius at which curvature is sampled.
pub const R_START: f64 = 1e-6;

/// Sample R densely on `[R_START, r_max]` (log-spaced, plus a uniform pass over `[1, r_max]`)
/// and record minima over the three radial regions `r <= eps/2`, `[eps/2, 2]`, `r > 2`.
pub fn min_scalar_report(params: &BuildingBlockParams, r_max: f64, samples: usize) -> Result<CurvatureReport> {
    let pair = ProfilePair::building_block(params, r_max)?;
    let n = params.n;
    let mut radii = logspace(R_START, r_max, samples.max(2));
    let lin = samples.max(2) / 4;
    radii.extend((0..=lin).map(|i| 1.0 + (r_max - 1.0) * i as f64 / lin as f64));
    let e = params.epsilon;
    radii.extend([0.5 * e, e, 1.5 * e, 2.0 * e, 0.5, 1.5, 2.0, 4.0]);
    radii.retain(|&r| r >= R_START && r <= r_max);
    radii.sort_by(|a, b| a.partial_cmp(b).unwrap());
    radii.dedup();

    let mut out = Vec::with_capacity(radii.len());
    for &r in &radii {
        let (f, phi) = jets_at(&pair, r)?;
        out.push(CurvatureSample {
            r,
            f,
            phi,
            scalar: scalar_from_jets(n, f, phi),
            ricci: ricci_from_jets(n, f, phi),
        });
    }
    let region = |lo: f64, hi: f64, lo_open: bool| {
        out.iter()
            .filter(|s| (if lo_open { s.r > lo } else { s.r >= lo }) && s.r <= hi)
            .map(|s| RegionMin { min: s.scalar, at: s.r })
            .fold(None, |acc: Option<RegionMin>, m| match acc {
                Some(a) if a.min <= m.min => Some(a),
                _ => Some(m),
            })
    };
    let inner = region(0.0, 0.5 * e, true);
    let middle = region(0.5 * e, 2.0, false);
    let outer = region(2.0, f64::INFINITY, true);
    let min_r = out.iter().map(|s| s.scalar).fold(f64::INFINITY, f64::min);
    Ok(CurvatureReport { params: *params, samples: out, min_r, inner, middle, outer })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PowerMetricParams {
    pub alpha: f64,
}

/// `diag(1, |x|^{2 alpha})` on the plane.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PowerMetric {
    pub alpha: f64,
}

/// Metric value at a point together with its degeneracy flag.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PlanarMetricValue {
    pub g: [[f64; 2]; 2],
    pub degenerate: bool,
}

impl PowerMetric {
    pub fn at(&self, x: f64, _y: f64) -> PlanarMetricValue {
        let gyy = if self.alpha == 0.0 { 1.0 } else { x.abs().powf(2.0 * self.alpha) };
        PlanarMetricValue { g: [[1.0, 0.0], [0.0, gyy]], degenerate: gyy < 1e-12 }
    }
}

pub fn make_power_metric(params: PowerMetricParams) -> Result<PowerMetric> {
    if !(params.alpha >= 0.0 && params.alpha.is_finite()) {
        return Err(Error::Domain(format!("alpha = {} must be nonnegative", params.alpha)));
    }
    Ok(PowerMetric { alpha: params.alpha })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn bb(delta: f64, eps: f64) -> BuildingBlockParams {
        BuildingBlockParams::new(3, delta, eps).unwrap()
    }

    #[test]
    fn phi_branches() {
        let phi = make_phi(&bb(0.1, 0.1)).unwrap();
        assert!((phi.value(0.01) - 0.1f64.powf(0.1)).abs() < 1e-14);
        assert!((phi.value(0.01) - 0.7943).abs() < 1e-4);
        assert_eq!(phi.value(3.0), 1.0);
        assert!((phi.value(0.3) - 0.3f64.powf(0.1)).abs() < 1e-14);
        assert!((phi.value(0.3) - 0.8865).abs() < 1e-4);
    }

    #[test]
    fn phi_is_monotone_and_within_log_derivative_bounds() {
        for &(d, e) in &[(0.1, 0.1), (0.2, 0.01), (1e-3, 1e-3), (0.24, 0.24)] {
            let phi = make_phi(&bb(d, e)).unwrap();
            let mut prev = 0.0;
            for r in logspace(1e-7, 10.0, 4000) {
                let j = phi.jet(r);
                assert!(j.v >= prev - 1e-15);
                prev = j.v;
                assert!((j.d1 / j.v).abs() <= 50.0 * d / r * (1.0 + 1e-12));
                assert!((j.d2 / j.v).abs() <= 50.0 * d / (r * r) * (1.0 + 1e-12));
            }
            assert_eq!(phi.value(1e-9), e.powf(d));
            assert_eq!(phi.value(2.0), 1.0);
        }
    }

    #[test]
    fn interpolant_and_cutoff_bounds_hold() {
        for e in [0.2, 0.1, 1e-3, 1e-6] {
            assert!(interpolant_bound_ratio(e) <= 1.0);
        }
        let z = zeta_bound();
        assert!(z <= 100.0 && z > 14.0, "{z}");
        assert_eq!(zeta(0.3).v, 1.0);
        assert_eq!(zeta(1.2).v, 0.0);
    }

    #[test]
    fn f_is_identity_without_cone() {
        let f = make_f(&bb(0.0, 0.1)).unwrap();
        for r in [1e-3, 0.5, 3.0, 7.0] {
            assert_eq!(f.jet(r), Jet::new(r, 1.0, 0.0));
        }
    }

    #[test]
    fn f_literal_onset_is_flat_up_to_fifty_eps() {
        let p = bb(1e-5, 0.1).with_onset(ConeOnset::Literal);
        let f = make_f(&p).unwrap();
        for r in [0.01, 1.0, 4.9, 5.0] {
            assert!((f.value(r) - r).abs() < 1e-12, "r = {r}");
        }
        assert_eq!(f.value(10.0), 10.0);
        let inner = make_f(&bb(1e-5, 0.1)).unwrap();
        assert_eq!(inner.value(10.0), 10.0);
        assert!(inner.value(1.0) < 1.0);
    }

    #[test]
    fn f_rejects_large_cone_coefficient() {
        assert!(matches!(make_f(&bb(1e-3, 1e-3)), Err(Error::Domain(_))));
        assert!(make_f(&bb(1e-5, 1e-3)).is_ok());
    }

    #[test]
    fn f_bounds_from_ode() {
        let p = bb(5e-6, 0.01);
        let s0 = p.sigma0();
        let f = make_f(&p).unwrap();
        for r in logspace(1e-5, 4.0, 300) {
            let v = f.value(r);
            assert!(v <= r * (1.0 + 1e-12) && v >= (1.0 - s0) * r * (1.0 - 1e-12));
        }
    }

    #[test]
    fn cone_scalar_curvature() {
        let c: f64 = 0.5;
        let pair = ProfilePair::new(Arc::new(Linear(c)), Arc::new(Constant(1.0)), 10.0);
        let r = scalar_curvature(&pair, 3, 1.0).unwrap();
        let expected = 2.0 * 1.0 * (1.0 - c * c) / (c * c);
        assert!((r - expected).abs() < 1e-12);
        assert!((r - 6.0).abs() < 1e-12);
        let ric = ricci_components(&pair, 3, 1.0).unwrap();
        assert_eq!(ric.rr, 0.0);
        assert!((ric.sphere - 0.75).abs() < 1e-14);
        assert_eq!(ric.xx, 0.0);
    }

    #[test]
    fn euclidean_is_flat() {
        let pair = ProfilePair::euclidean(10.0);
        assert_eq!(scalar_curvature(&pair, 3, 1.0).unwrap(), 0.0);
        let ric = ricci_components(&pair, 3, 1.0).unwrap();
        assert_eq!((ric.rr, ric.sphere, ric.xx), (0.0, 0.0, 0.0));
    }

    #[test]
    fn origin_is_singular() {
        let pair = ProfilePair::euclidean(10.0);
        assert!(matches!(scalar_curvature(&pair, 3, 0.0), Err(Error::Singular(_))));
    }

    #[test]
    fn trace_identity() {
        let pair = ProfilePair::building_block(&bb(2e-6, 0.01), 10.0).unwrap();
        for n in [3, 4, 6] {
            for r in logspace(1e-4, 9.0, 200) {
                let s = scalar_curvature(&pair, n, r).unwrap();
                let ric = ricci_components(&pair, n, r).unwrap();
                let t = ric.trace(n, pair.f.value(r), pair.phi.value(r));
                assert!((s - t).abs() <= 1e-12 * s.abs().max(1e-300) + 1e-12, "n={n} r={r} {s} {t}");
            }
        }
    }

    #[test]
    fn power_metric_values() {
        let m = make_power_metric(PowerMetricParams { alpha: 1.0 }).unwrap();
        assert_eq!(m.at(2.0, 5.0).g, [[1.0, 0.0], [0.0, 4.0]]);
        let m = make_power_metric(PowerMetricParams { alpha: 0.5 }).unwrap();
        let v = m.at(0.0, 1.0);
        assert_eq!(v.g, [[1.0, 0.0], [0.0, 0.0]]);
        assert!(v.degenerate);
        let m = make_power_metric(PowerMetricParams { alpha: 0.0 }).unwrap();
        assert_eq!(m.at(0.0, 1.0).g, [[1.0, 0.0], [0.0, 1.0]]);
        assert!(make_power_metric(PowerMetricParams { alpha: -1.0 }).is_err());
    }

    #[test]
    fn report_regions() {
        let rep = min_scalar_report(&bb(1e-8, 1e-3), 10.0, 4000).unwrap();
        assert!(rep.inner.is_some() && rep.middle.is_some() && rep.outer.is_some());
        assert!(rep.samples.first().unwrap().r >= R_START);
        assert!(rep.samples.last().unwrap().r <= 10.0);
        let flat = min_scalar_report(&bb(0.0, 1e-3), 10.0, 2000).unwrap();
        assert!(flat.samples.iter().all(|s| s.scalar.abs() < 1e-12));
    }

    #[test]
    fn csv_has_header_and_rows() {
        let rep = min_scalar_report(&bb(1e-8, 1e-2), 10.0, 50).unwrap();
        let mut buf = Vec::new();
        rep.write_csv(&mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        let mut lines = text.lines();
        assert_eq!(lines.next().unwrap(), "r,f,f',f'',phi,phi',phi'',R,R_rr,R_sph,R_xx");
        assert_eq!(lines.count(), rep.samples.len());
    }
}
