use std::f64::consts::PI;
use std::sync::Arc;

use proptest::prelude::*;

use dpgeo_core::grid_manifold::{discretize_power, GridManifold, GridSpec};
use dpgeo_core::metric_compare::FiniteMetricSpace;
use dpgeo_core::warped_metrics::{make_power_metric, PowerMetricParams};

pub const TINY_MAX_VERTICES: usize = 60;
pub const P_VALUES: [f64; 4] = [2.5, 3.0, 4.0, 6.0];

#[derive(Debug, Clone, PartialEq)]
pub enum TinyMetric {
    /// Diagonally dominant trigonometric metric on the unit box or torus.
    Smooth([f64; 6]),
    /// `dx^2 + |x|^{2 alpha} dy^2` on `[-1, 1]^2`.
    Power(f64),
}

/// A grid with at most 60 vertices, an exponent and three distinct vertices.
#[derive(Debug, Clone, PartialEq)]
pub struct TinyInstance {
    pub cells: Vec<usize>,
    pub periodic: bool,
    pub metric: TinyMetric,
    pub p: f64,
    pub picks: [f64; 3],
}

/// The smooth tiny metric as a grid metric function (1-periodic in every coordinate).
pub fn smooth_metric_fn(c: [f64; 6], dim: usize) -> impl Fn(&[f64], &mut [f64]) + Send + Sync {
    move |x: &[f64], out: &mut [f64]| {
        let phase = |k: usize| {
            let mut s = x[0] + (k as f64 + 1.0) * x[1];
            if dim == 3 {
                s += x[2];
            }
            2.0 * PI * s + c[5] * k as f64
        };
        for i in 0..dim {
            for j in 0..dim {
                out[i * dim + j] = if i == j {
                    1.0 + 0.45 * c[i] * phase(i).sin()
                } else {
                    0.2 * c[3 + (i + j) % 2] * phase(i + j).cos()
                };
            }
        }
    }
}

impl TinyInstance {
    pub fn dim(&self) -> usize {
        self.cells.len()
    }

    pub fn grid(&self) -> GridManifold {
        match &self.metric {
            TinyMetric::Smooth(c) => {
                let d = self.dim();
                let spec = GridSpec::new(self.cells.clone(), vec![0.0; d], vec![1.0; d], vec![self.periodic; d]);
                GridManifold::from_fn(&spec, Arc::new(smooth_metric_fn(*c, d))).expect("tiny smooth grid")
            }
            TinyMetric::Power(alpha) => {
                let metric = make_power_metric(PowerMetricParams { alpha: *alpha }).expect("alpha >= 0");
                discretize_power(metric, [-1.0, -1.0], [1.0, 1.0], [self.cells[0], self.cells[1]]).expect("tiny power grid")
            }
        }
    }

    /// Three distinct vertices.
    pub fn points(&self, grid: &GridManifold) -> [usize; 3] {
        let nv = grid.num_vertices();
        let mut out = [0usize; 3];
        for (k, &f) in self.picks.iter().enumerate() {
            let mut v = ((f * nv as f64) as usize).min(nv - 1);
            while out[..k].contains(&v) {
                v = (v + 1) % nv;
            }
            out[k] = v;
        }
        out
    }
}

fn coeffs() -> impl Strategy<Value = [f64; 6]> {
    proptest::array::uniform6(-1.0..1.0f64)
}

fn picks() -> impl Strategy<Value = [f64; 3]> {
    proptest::array::uniform3(0.0..1.0f64)
}

fn exponent() -> impl Strategy<Value = f64> {
    proptest::sample::select(P_VALUES.to_vec())
}

pub fn tiny_instance() -> impl Strategy<Value = TinyInstance> {
    let boxed = (3..=6usize, 3..=6usize, coeffs(), exponent(), picks()).prop_map(|(a, b, c, p, picks)| TinyInstance {
        cells: vec![a, b],
        periodic: false,
        metric: TinyMetric::Smooth(c),
        p,
        picks,
    });
    let torus = (3..=7usize, 3..=7usize, coeffs(), exponent(), picks()).prop_map(|(a, b, c, p, picks)| TinyInstance {
        cells: vec![a, b],
        periodic: true,
        metric: TinyMetric::Smooth(c),
        p,
        picks,
    });
    let torus3 = (coeffs(), exponent(), picks()).prop_map(|(c, p, picks)| TinyInstance {
        cells: vec![3, 3, 3],
        periodic: true,
        metric: TinyMetric::Smooth(c),
        p,
        picks,
    });
    let power = (prop_oneof![Just(4usize), Just(6usize)], 0.0..1.0f64, exponent(), picks()).prop_map(|(n, alpha, p, picks)| {
        TinyInstance { cells: vec![n, n], periodic: false, metric: TinyMetric::Power(alpha), p, picks }
    });
    prop_oneof![3 => boxed, 3 => torus, 1 => torus3, 2 => power]
}

/// Tiny instances with a smooth, uniformly positive metric.
pub fn smooth_instance() -> impl Strategy<Value = TinyInstance> {
    tiny_instance().prop_filter("smooth metric", |i| matches!(i.metric, TinyMetric::Smooth(_)))
}

/// `k` random points of the unit square with Euclidean (`l1 = false`) or l1 distances.
pub fn finite_space(min: usize, max: usize, l1: bool) -> impl Strategy<Value = FiniteMetricSpace> {
    proptest::collection::vec((0.0..1.0f64, 0.0..1.0f64), min..=max).prop_map(move |pts| {
        let points: Vec<Vec<f64>> = pts.iter().map(|&(x, y)| vec![x, y]).collect();
        let dist = points
            .iter()
            .map(|a| {
                points
                    .iter()
                    .map(|b| {
                        let (dx, dy) = ((a[0] - b[0]).abs(), (a[1] - b[1]).abs());
                        if l1 {
                            dx + dy
                        } else {
                            dx.hypot(dy)
                        }
                    })
                    .collect()
            })
            .collect();
        let w = vec![1.0 / points.len() as f64; points.len()];
        FiniteMetricSpace::new(points, dist, w).expect("Euclidean distances form a metric")
    })
}
