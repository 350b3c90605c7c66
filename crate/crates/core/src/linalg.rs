//! Compressed sparse rows, Jacobi-preconditioned conjugate gradients and an envelope Cholesky.

#[derive(Debug, Clone)]
pub struct Csr {
    pub n: usize,
    pub row_ptr: Vec<usize>,
    pub cols: Vec<u32>,
    pub vals: Vec<f64>,
}

impl Csr {
    /// Pattern from per-row column lists (sorted and deduplicated here); values zeroed.
    pub fn from_rows(rows: Vec<Vec<u32>>) -> Self {
        let n = rows.len();
        let mut row_ptr = Vec::with_capacity(n + 1);
        let mut cols = Vec::new();
        row_ptr.push(0);
        for mut r in rows {
            r.sort_unstable();
            r.dedup();
            cols.extend_from_slice(&r);
            row_ptr.push(cols.len());
        }
        let vals = vec![0.0; cols.len()];
        Csr { n, row_ptr, cols, vals }
    }

    /// Position of entry `(i, j)` in `vals`.
    pub fn slot(&self, i: usize, j: usize) -> Option<usize> {
        let row = &self.cols[self.row_ptr[i]..self.row_ptr[i + 1]];
        row.binary_search(&(j as u32)).ok().map(|k| self.row_ptr[i] + k)
    }

    pub fn clear(&mut self) {
        self.vals.iter_mut().for_each(|v| *v = 0.0);
    }

    pub fn diagonal(&self) -> Vec<f64> {
        (0..self.n).map(|i| self.slot(i, i).map_or(0.0, |s| self.vals[s])).collect()
    }

    pub fn matvec(&self, x: &[f64], y: &mut [f64]) {
        for i in 0..self.n {
            let mut s = 0.0;
            for k in self.row_ptr[i]..self.row_ptr[i + 1] {
                s += self.vals[k] * x[self.cols[k] as usize];
            }
            y[i] = s;
        }
    }
}

#[derive(Debug, Clone, Copy)]
pub struct CgStats {
    pub iterations: usize,
    pub relative_residual: f64,
}

/// Solves `A x = b` restricted to rows with `free[i]`; other entries of `x` stay zero.
/// `x` on entry is the initial guess.
pub fn cg_jacobi(a: &Csr, b: &[f64], x: &mut [f64], free: &[bool], tol: f64, max_iter: usize) -> CgStats {
    let n = a.n;
    let diag = a.diagonal();
    let inv: Vec<f64> = (0..n)
        .map(|i| if free[i] && diag[i] > 0.0 { 1.0 / diag[i] } else { 0.0 })
        .collect();
    for i in 0..n {
        if !free[i] {
            x[i] = 0.0;
        }
    }
    let mut ax = vec![0.0; n];
    a.matvec(x, &mut ax);
    let mut r: Vec<f64> = (0..n).map(|i| if free[i] { b[i] - ax[i] } else { 0.0 }).collect();
    let bnorm = (0..n).filter(|&i| free[i]).map(|i| b[i] * b[i]).sum::<f64>().sqrt();
    if bnorm == 0.0 {
        x.iter_mut().for_each(|v| *v = 0.0);
        return CgStats { iterations: 0, relative_residual: 0.0 };
    }
    let mut z: Vec<f64> = (0..n).map(|i| r[i] * inv[i]).collect();
    let mut d = z.clone();
    let mut rz: f64 = r.iter().zip(&z).map(|(a, b)| a * b).sum();
    let mut q = vec![0.0; n];
    let mut rel = r.iter().map(|v| v * v).sum::<f64>().sqrt() / bnorm;
    let mut it = 0;
    while it < max_iter && rel > tol {
        a.matvec(&d, &mut q);
        for i in 0..n {
            if !free[i] {
                q[i] = 0.0;
            }
        }
        let dq: f64 = d.iter().zip(&q).map(|(a, b)| a * b).sum();
        if dq <= 0.0 {
            break;
        }
        let alpha = rz / dq;
        for i in 0..n {
            x[i] += alpha * d[i];
            r[i] -= alpha * q[i];
            z[i] = r[i] * inv[i];
        }
        let rz_new: f64 = r.iter().zip(&z).map(|(a, b)| a * b).sum();
        let beta = rz_new / rz;
        rz = rz_new;
        for i in 0..n {
            d[i] = z[i] + beta * d[i];
        }
        rel = r.iter().map(|v| v * v).sum::<f64>().sqrt() / bnorm;
        it += 1;
    }
    CgStats { iterations: it, relative_residual: rel }
}

/// Reverse Cuthill-McKee ordering of the symmetric pattern of `a` restricted to `keep`.
/// Returns `perm` with `perm[new] = old`.
pub fn rcm_order(a: &Csr, keep: &[bool]) -> Vec<usize> {
    let n = a.n;
    let degree: Vec<usize> = (0..n).map(|i| a.row_ptr[i + 1] - a.row_ptr[i]).collect();
    let mut seen: Vec<bool> = keep.iter().map(|k| !k).collect();
    let mut order = Vec::with_capacity(n);
    loop {
        let Some(start) = (0..n).filter(|&i| !seen[i]).min_by_key(|&i| degree[i]) else { break };
        let mut queue = std::collections::VecDeque::from([start]);
        seen[start] = true;
        while let Some(i) = queue.pop_front() {
            order.push(i);
            let mut nb: Vec<usize> = a.cols[a.row_ptr[i]..a.row_ptr[i + 1]]
                .iter()
                .map(|&c| c as usize)
                .filter(|&c| !seen[c])
                .collect();
            nb.sort_by_key(|&c| degree[c]);
            for c in nb {
                seen[c] = true;
                queue.push_back(c);
            }
        }
    }
    order.reverse();
    order
}

/// Envelope (skyline) Cholesky factor of a symmetric positive definite matrix, computed on
/// the rows with `keep` set, in reverse Cuthill-McKee order.
#[derive(Debug, Clone)]
pub struct EnvelopeCholesky {
    perm: Vec<usize>,
    first: Vec<usize>,
    offset: Vec<usize>,
    l: Vec<f64>,
}

impl EnvelopeCholesky {
    pub fn factor(a: &Csr, keep: &[bool]) -> Option<Self> {
        let perm = rcm_order(a, keep);
        let m = perm.len();
        let mut pos = vec![usize::MAX; a.n];
        for (k, &i) in perm.iter().enumerate() {
            pos[i] = k;
        }
        let mut first: Vec<usize> = (0..m).collect();
        for (k, &i) in perm.iter().enumerate() {
            for &c in &a.cols[a.row_ptr[i]..a.row_ptr[i + 1]] {
                let q = pos[c as usize];
                if q != usize::MAX && q < first[k] {
                    first[k] = q;
                }
            }
        }
        let mut offset = Vec::with_capacity(m + 1);
        offset.push(0);
        for k in 0..m {
            offset.push(offset[k] + (k - first[k] + 1));
        }
        let mut l = vec![0.0; offset[m]];
        for (k, &i) in perm.iter().enumerate() {
            for idx in a.row_ptr[i]..a.row_ptr[i + 1] {
                let q = pos[a.cols[idx] as usize];
                if q != usize::MAX && q <= k {
                    l[offset[k] + q - first[k]] += a.vals[idx];
                }
            }
        }
        for k in 0..m {
            let fk = first[k];
            for j in fk..k {
                let fj = first[j];
                let lo = fk.max(fj);
                let mut s = l[offset[k] + j - fk];
                for t in lo..j {
                    s -= l[offset[k] + t - fk] * l[offset[j] + t - fj];
                }
                l[offset[k] + j - fk] = s / l[offset[j] + j - fj];
            }
            let mut d = l[offset[k] + k - fk];
            for t in fk..k {
                let v = l[offset[k] + t - fk];
                d -= v * v;
            }
            if !(d > 0.0) {
                return None;
            }
            l[offset[k] + k - fk] = d.sqrt();
        }
        Some(EnvelopeCholesky { perm, first, offset, l })
    }

    /// Solves `A x = b` on the kept rows; other entries of the result are zero.
    pub fn solve(&self, b: &[f64]) -> Vec<f64> {
        let m = self.perm.len();
        let mut y: Vec<f64> = self.perm.iter().map(|&i| b[i]).collect();
        for k in 0..m {
            let fk = self.first[k];
            let row = &self.l[self.offset[k]..self.offset[k + 1]];
            let mut s = y[k];
            for t in fk..k {
                s -= row[t - fk] * y[t];
            }
            y[k] = s / row[k - fk];
        }
        for k in (0..m).rev() {
            let fk = self.first[k];
            let row = &self.l[self.offset[k]..self.offset[k + 1]];
            y[k] /= row[k - fk];
            let yk = y[k];
            for t in fk..k {
                y[t] -= row[t - fk] * yk;
            }
        }
        let mut x = vec![0.0; b.len()];
        for (k, &i) in self.perm.iter().enumerate() {
            x[i] = y[k];
        }
        x
    }

    pub fn envelope_size(&self) -> usize {
        self.l.len()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn cg_solves_path_laplacian() {
        // tridiagonal 2,-1 system with exact solution 1..n
        let n = 20;
        let rows: Vec<Vec<u32>> = (0..n)
            .map(|i| {
                let mut r = vec![i as u32];
                if i > 0 {
                    r.push(i as u32 - 1);
                }
                if i + 1 < n {
                    r.push(i as u32 + 1);
                }
                r
            })
            .collect();
        let mut a = Csr::from_rows(rows);
        for i in 0..n {
            let s = a.slot(i, i).unwrap();
            a.vals[s] = 2.0;
            if i > 0 {
                let s = a.slot(i, i - 1).unwrap();
                a.vals[s] = -1.0;
            }
            if i + 1 < n {
                let s = a.slot(i, i + 1).unwrap();
                a.vals[s] = -1.0;
            }
        }
        let exact: Vec<f64> = (1..=n).map(|v| v as f64).collect();
        let mut b = vec![0.0; n];
        a.matvec(&exact, &mut b);
        let mut x = vec![0.0; n];
        let st = cg_jacobi(&a, &b, &mut x, &vec![true; n], 1e-12, 100);
        assert!(st.relative_residual <= 1e-12);
        for i in 0..n {
            assert!((x[i] - exact[i]).abs() < 1e-9);
        }
    }

    #[test]
    fn envelope_cholesky_matches_cg() {
        // 2-D periodic 5-point Laplacian plus identity
        let n = 9;
        let idx = |i: usize, j: usize| (i % n) + n * (j % n);
        let mut rows = vec![Vec::new(); n * n];
        for j in 0..n {
            for i in 0..n {
                let r = idx(i, j);
                rows[r] = vec![r as u32, idx(i + 1, j) as u32, idx(i + n - 1, j) as u32, idx(i, j + 1) as u32, idx(i, j + n - 1) as u32];
            }
        }
        let mut a = Csr::from_rows(rows);
        for j in 0..n {
            for i in 0..n {
                let r = idx(i, j);
                let s = a.slot(r, r).unwrap();
                a.vals[s] = 5.0;
                for c in [idx(i + 1, j), idx(i + n - 1, j), idx(i, j + 1), idx(i, j + n - 1)] {
                    let s = a.slot(r, c).unwrap();
                    a.vals[s] = -1.0;
                }
            }
        }
        let b: Vec<f64> = (0..n * n).map(|k| (k as f64 * 0.37).sin()).collect();
        let keep = vec![true; n * n];
        let x = EnvelopeCholesky::factor(&a, &keep).unwrap().solve(&b);
        let mut ax = vec![0.0; n * n];
        a.matvec(&x, &mut ax);
        for k in 0..n * n {
            assert!((ax[k] - b[k]).abs() < 1e-12);
        }
    }
}
