//! A C-infinity step and its antiderivative, shared by the profile constructions.

use std::sync::OnceLock;

// The step is the normalised integral of `exp(-1/sqrt(t(1-t)))`. It is flat to all orders at
// both ends, `max s' < 1.6` and `max |s''| < 6.3`, inside the interpolant and cutoff bounds.
// Flow residuals on the warped profiles need several continuous derivatives; a polynomial
// step has a jump in some derivative at the knots.

fn bump(t: f64) -> f64 {
    if t <= 0.0 || t >= 1.0 {
        return 0.0;
    }
    (-1.0 / (t * (1.0 - t)).sqrt()).exp()
}

fn bump_d1(t: f64) -> f64 {
    if t <= 0.0 || t >= 1.0 {
        return 0.0;
    }
    let q = t * (1.0 - t);
    bump(t) * 0.5 * (1.0 - 2.0 * t) / (q * q.sqrt())
}

const CELLS: usize = 4096;
const GL_X: [f64; 5] = [0.1488743389816312, 0.4333953941292472, 0.6794095682990244, 0.8650633666889845, 0.9739065285171717];
const GL_W: [f64; 5] = [0.2955242247147529, 0.2692667193099963, 0.2190863625159820, 0.1494513491505806, 0.0666713443086881];

/// `(int_a^b bump, int_a^b x bump)` by 10-point Gauss-Legendre.
fn moments_on(a: f64, b: f64) -> (f64, f64) {
    let (c, h) = (0.5 * (a + b), 0.5 * (b - a));
    let (mut m0, mut m1) = (0.0, 0.0);
    for (x, w) in GL_X.iter().zip(GL_W) {
        for x in [c - h * x, c + h * x] {
            let v = w * bump(x);
            m0 += v;
            m1 += v * x;
        }
    }
    (h * m0, h * m1)
}

/// Cumulative moments at the cell edges `k / CELLS`.
fn table() -> &'static (Vec<f64>, Vec<f64>) {
    static TABLE: OnceLock<(Vec<f64>, Vec<f64>)> = OnceLock::new();
    TABLE.get_or_init(|| {
        let (mut m0, mut m1) = (vec![0.0; CELLS + 1], vec![0.0; CELLS + 1]);
        for k in 0..CELLS {
            let (a, b) = moments_on(k as f64 / CELLS as f64, (k + 1) as f64 / CELLS as f64);
            m0[k + 1] = m0[k] + a;
            m1[k + 1] = m1[k] + b;
        }
        (m0, m1)
    })
}

/// `(int_0^t bump, int_0^t x bump) / int_0^1 bump` for `t` in `[0, 1]`.
fn moments(t: f64) -> (f64, f64) {
    let (m0, m1) = table();
    let k = ((t * CELLS as f64) as usize).min(CELLS - 1);
    let (a, b) = moments_on(k as f64 / CELLS as f64, t);
    ((m0[k] + a) / m0[CELLS], (m1[k] + b) / m0[CELLS])
}

/// Smooth step: 0 for `t <= 0`, 1 for `t >= 1`, `s(1 - t) = 1 - s(t)`.
pub fn smoothstep(t: f64) -> f64 {
    if t <= 0.0 {
        0.0
    } else if t >= 1.0 {
        1.0
    } else {
        moments(t).0
    }
}

pub fn smoothstep_d1(t: f64) -> f64 {
    bump(t) / table().0[CELLS]
}

pub fn smoothstep_d2(t: f64) -> f64 {
    bump_d1(t) / table().0[CELLS]
}

/// Antiderivative of the step vanishing at 0; equals `t - 1/2` for t ≥ 1.
pub fn smoothstep_integral(t: f64) -> f64 {
    if t <= 0.0 {
        0.0
    } else if t >= 1.0 {
        t - 0.5
    } else {
        // integration by parts: int_0^t s = t s(t) - int_0^t x s'(x) dx
        let (m0, m1) = moments(t);
        t * m0 - m1
    }
}

/// `n` points log-spaced between `lo` and `hi` inclusive.
pub fn logspace(lo: f64, hi: f64, n: usize) -> Vec<f64> {
    if n == 1 {
        return vec![lo];
    }
    let (a, b) = (lo.ln(), hi.ln());
    (0..n)
        .map(|i| (a + (b - a) * i as f64 / (n - 1) as f64).exp())
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn smoothstep_derivatives_match_differences() {
        let h = 1e-6;
        for i in 1..50 {
            let t = i as f64 / 50.0;
            let d1 = (smoothstep(t + h) - smoothstep(t - h)) / (2.0 * h);
            let d2 = (smoothstep_d1(t + h) - smoothstep_d1(t - h)) / (2.0 * h);
            let di = (smoothstep_integral(t + h) - smoothstep_integral(t - h)) / (2.0 * h);
            assert!((d1 - smoothstep_d1(t)).abs() < 1e-8);
            assert!((d2 - smoothstep_d2(t)).abs() < 1e-7);
            assert!((di - smoothstep(t)).abs() < 1e-8);
        }
        assert_eq!(smoothstep_integral(1.0), 0.5);
    }

    #[test]
    fn step_is_symmetric_flat_and_within_bounds() {
        // interpolant bounds need max |s''| <= 8; the cutoff bound needs 4 s'^2 + 4 |s''| <= 100
        let (mut d1, mut d2) = (0.0f64, 0.0f64);
        for i in 0..=2000 {
            let t = i as f64 / 2000.0;
            assert!((smoothstep(t) + smoothstep(1.0 - t) - 1.0).abs() < 1e-13);
            d1 = d1.max(smoothstep_d1(t));
            d2 = d2.max(smoothstep_d2(t).abs());
        }
        assert!(d1 < 1.6 && d2 < 6.3, "{d1} {d2}");
        assert!((smoothstep_integral(0.999_999) - 0.499_999).abs() < 1e-12);
        assert!(smoothstep(1e-3) < 1e-12 && smoothstep_d2(1e-3).abs() < 1e-8);
    }

    #[test]
    fn logspace_endpoints() {
        let v = logspace(1e-3, 1.0, 4);
        assert!((v[0] - 1e-3).abs() < 1e-15 && (v[3] - 1.0).abs() < 1e-12);
        assert!((v[1] - 1e-2).abs() < 1e-12);
    }
}
