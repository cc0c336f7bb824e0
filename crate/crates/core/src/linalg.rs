//! Small dense symmetric linear algebra plus a sparse Krylov solver.
//!
//! Everything here is deterministic: sweep orders are fixed and parallel
//! reductions use a fixed chunking so results do not depend on thread count.

use rayon::prelude::*;

use crate::error::{Error, Result};

/// Dense symmetric matrix stored row-major in full.
#[derive(Clone, Debug, PartialEq)]
pub struct SymMatrix {
    n: usize,
    data: Vec<f64>,
}

impl SymMatrix {
    pub fn zeros(n: usize) -> Self {
        Self {
            n,
            data: vec![0.0; n * n],
        }
    }

    pub fn identity(n: usize) -> Self {
        let mut m = Self::zeros(n);
        for i in 0..n {
            m.data[i * n + i] = 1.0;
        }
        m
    }

    pub fn diagonal(d: &[f64]) -> Self {
        let mut m = Self::zeros(d.len());
        for (i, &v) in d.iter().enumerate() {
            m.set(i, i, v);
        }
        m
    }

    /// Builds from a closure, symmetrizing by averaging `(i,j)` and `(j,i)`.
    pub fn from_fn(n: usize, f: impl Fn(usize, usize) -> f64) -> Self {
        let mut m = Self::zeros(n);
        for i in 0..n {
            for j in i..n {
                let v = if i == j {
                    f(i, i)
                } else {
                    0.5 * (f(i, j) + f(j, i))
                };
                m.set(i, j, v);
            }
        }
        m
    }

    pub fn n(&self) -> usize {
        self.n
    }

    #[inline]
    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.data[i * self.n + j]
    }

    /// Sets both `(i,j)` and `(j,i)`.
    #[inline]
    pub fn set(&mut self, i: usize, j: usize, v: f64) {
        self.data[i * self.n + j] = v;
        self.data[j * self.n + i] = v;
    }

    pub fn scale(&self, s: f64) -> Self {
        Self {
            n: self.n,
            data: self.data.iter().map(|v| v * s).collect(),
        }
    }

    pub fn max_abs(&self) -> f64 {
        self.data.iter().fold(0.0, |m, v| m.max(v.abs()))
    }

    pub fn is_symmetric(&self, tol: f64) -> bool {
        (0..self.n).all(|i| (0..i).all(|j| (self.get(i, j) - self.get(j, i)).abs() <= tol))
    }

    pub fn mul_vec(&self, x: &[f64]) -> Vec<f64> {
        (0..self.n)
            .map(|i| (0..self.n).map(|j| self.get(i, j) * x[j]).sum())
            .collect()
    }

    /// `Bᵀ A B` for a square (not necessarily symmetric) row-major `b`.
    pub fn congruence(&self, b: &[f64]) -> Self {
        let n = self.n;
        let mut ab = vec![0.0; n * n];
        for i in 0..n {
            for j in 0..n {
                ab[i * n + j] = (0..n).map(|k| self.get(i, k) * b[k * n + j]).sum();
            }
        }
        Self::from_fn(n, |i, j| (0..n).map(|k| b[k * n + i] * ab[k * n + j]).sum())
    }
}

/// Eigen-decomposition with ascending eigenvalues; `vectors` holds the
/// eigenvectors as columns, row-major.
#[derive(Clone, Debug)]
pub struct Eigen {
    pub values: Vec<f64>,
    pub vectors: Vec<f64>,
}

impl Eigen {
    pub fn vector(&self, k: usize) -> Vec<f64> {
        let n = self.values.len();
        (0..n).map(|i| self.vectors[i * n + k]).collect()
    }
}

const JACOBI_MAX_SWEEPS: usize = 64;

/// Cyclic Jacobi eigen-decomposition with row-wise sweep order.
pub fn jacobi_eigen(m: &SymMatrix) -> Eigen {
    let n = m.n;
    let mut a = m.data.clone();
    let mut v = SymMatrix::identity(n).data;
    let scale = m.max_abs().max(f64::MIN_POSITIVE);
    for _ in 0..JACOBI_MAX_SWEEPS {
        let off: f64 = (0..n)
            .flat_map(|i| (i + 1..n).map(move |j| (i, j)))
            .map(|(i, j)| a[i * n + j] * a[i * n + j])
            .sum();
        if off.sqrt() <= 1e-300 || off.sqrt() <= f64::EPSILON * 1e-3 * scale {
            break;
        }
        for p in 0..n {
            for q in p + 1..n {
                let apq = a[p * n + q];
                if apq.abs() <= f64::MIN_POSITIVE {
                    continue;
                }
                let app = a[p * n + p];
                let aqq = a[q * n + q];
                let theta = (aqq - app) / (2.0 * apq);
                let t = theta.signum() / (theta.abs() + (theta * theta + 1.0).sqrt());
                let c = 1.0 / (t * t + 1.0).sqrt();
                let s = t * c;
                for k in 0..n {
                    let akp = a[k * n + p];
                    let akq = a[k * n + q];
                    a[k * n + p] = c * akp - s * akq;
                    a[k * n + q] = s * akp + c * akq;
                }
                for k in 0..n {
                    let apk = a[p * n + k];
                    let aqk = a[q * n + k];
                    a[p * n + k] = c * apk - s * aqk;
                    a[q * n + k] = s * apk + c * aqk;
                }
                a[p * n + q] = 0.0;
                a[q * n + p] = 0.0;
                for k in 0..n {
                    let vkp = v[k * n + p];
                    let vkq = v[k * n + q];
                    v[k * n + p] = c * vkp - s * vkq;
                    v[k * n + q] = s * vkp + c * vkq;
                }
            }
        }
    }
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&i, &j| a[i * n + i].total_cmp(&a[j * n + j]).then(i.cmp(&j)));
    let values = order.iter().map(|&i| a[i * n + i]).collect();
    let mut vectors = vec![0.0; n * n];
    for (col, &src) in order.iter().enumerate() {
        for row in 0..n {
            vectors[row * n + col] = v[row * n + src];
        }
    }
    Eigen { values, vectors }
}

/// Lower Cholesky factor, row-major.
pub fn cholesky(m: &SymMatrix) -> Result<Vec<f64>> {
    let n = m.n;
    let mut l = vec![0.0; n * n];
    for i in 0..n {
        for j in 0..=i {
            let mut s = m.get(i, j);
            for k in 0..j {
                s -= l[i * n + k] * l[j * n + k];
            }
            if i == j {
                if !(s > 0.0) || !s.is_finite() {
                    return Err(Error::Metric(format!(
                        "matrix is not positive definite (pivot {i} = {s:e})"
                    )));
                }
                l[i * n + i] = s.sqrt();
            } else {
                l[i * n + j] = s / l[j * n + j];
            }
        }
    }
    Ok(l)
}

/// Eigenvalues of `U` with respect to the positive definite `g`, i.e. of
/// `g⁻¹U`, ascending. Eigenvectors are `g`-orthonormal columns.
pub fn generalized_eigen(g: &SymMatrix, u: &SymMatrix) -> Result<Eigen> {
    if g.n != u.n {
        return Err(Error::Domain(format!(
            "dimension mismatch: g is {0}x{0}, U is {1}x{1}",
            g.n, u.n
        )));
    }
    let n = g.n;
    let l = cholesky(g)?;
    // L⁻¹ by forward substitution, column by column.
    let mut linv = vec![0.0; n * n];
    for c in 0..n {
        for i in 0..n {
            let mut s = if i == c { 1.0 } else { 0.0 };
            for k in 0..i {
                s -= l[i * n + k] * linv[k * n + c];
            }
            linv[i * n + c] = s / l[i * n + i];
        }
    }
    // B = L⁻ᵀ so that Bᵀ U B = L⁻¹ U L⁻ᵀ.
    let mut b = vec![0.0; n * n];
    for i in 0..n {
        for j in 0..n {
            b[i * n + j] = linv[j * n + i];
        }
    }
    let reduced = u.congruence(&b);
    let e = jacobi_eigen(&reduced);
    let mut vectors = vec![0.0; n * n];
    for i in 0..n {
        for j in 0..n {
            vectors[i * n + j] = (0..n).map(|k| b[i * n + k] * e.vectors[k * n + j]).sum();
        }
    }
    Ok(Eigen {
        values: e.values,
        vectors,
    })
}

/// 3×3 symmetric eigen-decomposition on the stack; same algorithm and
/// ordering as [`jacobi_eigen`]. Columns of the returned matrix are the
/// eigenvectors.
pub fn eigen_sym3(m: &[[f64; 3]; 3]) -> ([f64; 3], [[f64; 3]; 3]) {
    let mut a = *m;
    let mut v = [[1.0, 0.0, 0.0], [0.0, 1.0, 0.0], [0.0, 0.0, 1.0]];
    let scale = a
        .iter()
        .flatten()
        .fold(0.0f64, |s, x| s.max(x.abs()))
        .max(f64::MIN_POSITIVE);
    for _ in 0..JACOBI_MAX_SWEEPS {
        let off = (a[0][1] * a[0][1] + a[0][2] * a[0][2] + a[1][2] * a[1][2]).sqrt();
        if off <= 1e-300 || off <= f64::EPSILON * 1e-3 * scale {
            break;
        }
        for (p, q) in [(0usize, 1usize), (0, 2), (1, 2)] {
            let apq = a[p][q];
            if apq.abs() <= f64::MIN_POSITIVE {
                continue;
            }
            let theta = (a[q][q] - a[p][p]) / (2.0 * apq);
            let t = theta.signum() / (theta.abs() + (theta * theta + 1.0).sqrt());
            let c = 1.0 / (t * t + 1.0).sqrt();
            let s = t * c;
            for row in a.iter_mut() {
                let (kp, kq) = (row[p], row[q]);
                row[p] = c * kp - s * kq;
                row[q] = s * kp + c * kq;
            }
            for k in 0..3 {
                let (pk, qk) = (a[p][k], a[q][k]);
                a[p][k] = c * pk - s * qk;
                a[q][k] = s * pk + c * qk;
            }
            a[p][q] = 0.0;
            a[q][p] = 0.0;
            for row in v.iter_mut() {
                let (kp, kq) = (row[p], row[q]);
                row[p] = c * kp - s * kq;
                row[q] = s * kp + c * kq;
            }
        }
    }
    let mut order = [0usize, 1, 2];
    order.sort_by(|&i, &j| a[i][i].total_cmp(&a[j][j]).then(i.cmp(&j)));
    let values = [a[order[0]][order[0]], a[order[1]][order[1]], a[order[2]][order[2]]];
    let mut vecs = [[0.0; 3]; 3];
    for (col, &src) in order.iter().enumerate() {
        for row in 0..3 {
            vecs[row][col] = v[row][src];
        }
    }
    (values, vecs)
}

/// Solves a tridiagonal system by the Thomas algorithm. `lower[i]` couples
/// row `i` to `i-1` (`lower[0]` unused), `upper[i]` couples row `i` to `i+1`.
pub fn solve_tridiagonal(
    lower: &[f64],
    diag: &[f64],
    upper: &[f64],
    rhs: &[f64],
) -> Result<Vec<f64>> {
    let n = diag.len();
    if lower.len() != n || upper.len() != n || rhs.len() != n {
        return Err(Error::Internal("tridiagonal band lengths differ".into()));
    }
    let mut c = vec![0.0; n];
    let mut d = vec![0.0; n];
    let mut denom = diag[0];
    if denom == 0.0 || !denom.is_finite() {
        return Err(Error::Scheme("singular tridiagonal pivot at row 0".into()));
    }
    c[0] = upper[0] / denom;
    d[0] = rhs[0] / denom;
    for i in 1..n {
        denom = diag[i] - lower[i] * c[i - 1];
        if denom == 0.0 || !denom.is_finite() {
            return Err(Error::Scheme(format!("singular tridiagonal pivot at row {i}")));
        }
        c[i] = upper[i] / denom;
        d[i] = (rhs[i] - lower[i] * d[i - 1]) / denom;
    }
    let mut x = vec![0.0; n];
    x[n - 1] = d[n - 1];
    for i in (0..n - 1).rev() {
        x[i] = d[i] - c[i] * x[i + 1];
    }
    Ok(x)
}

/// Compressed sparse row matrix.
#[derive(Clone, Debug, Default)]
pub struct CsrMatrix {
    pub nrows: usize,
    pub row_ptr: Vec<usize>,
    pub cols: Vec<usize>,
    pub vals: Vec<f64>,
}

impl CsrMatrix {
    /// Builds from per-row `(col, value)` lists; duplicate columns are summed.
    pub fn from_rows(rows: Vec<Vec<(usize, f64)>>) -> Self {
        let nrows = rows.len();
        let mut row_ptr = Vec::with_capacity(nrows + 1);
        let mut cols = Vec::new();
        let mut vals = Vec::new();
        row_ptr.push(0);
        for mut row in rows {
            row.sort_by_key(|e| e.0);
            let mut last: Option<usize> = None;
            for (c, v) in row {
                if last == Some(c) {
                    *vals.last_mut().unwrap() += v;
                } else {
                    cols.push(c);
                    vals.push(v);
                    last = Some(c);
                }
            }
            row_ptr.push(cols.len());
        }
        Self {
            nrows,
            row_ptr,
            cols,
            vals,
        }
    }

    pub fn diagonal(&self) -> Vec<f64> {
        (0..self.nrows)
            .map(|i| {
                (self.row_ptr[i]..self.row_ptr[i + 1])
                    .find(|&p| self.cols[p] == i)
                    .map_or(0.0, |p| self.vals[p])
            })
            .collect()
    }

    pub fn mul_vec_into(&self, x: &[f64], y: &mut [f64]) {
        y.par_iter_mut().enumerate().for_each(|(i, yi)| {
            let mut s = 0.0;
            for p in self.row_ptr[i]..self.row_ptr[i + 1] {
                s += self.vals[p] * x[self.cols[p]];
            }
            *yi = s;
        });
    }

    pub fn mul_vec(&self, x: &[f64]) -> Vec<f64> {
        let mut y = vec![0.0; self.nrows];
        self.mul_vec_into(x, &mut y);
        y
    }
}

const REDUCTION_CHUNK: usize = 4096;

/// Dot product with fixed chunking: partial sums per chunk, then summed in
/// chunk order. Bit-identical for any thread count.
pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    let partial: Vec<f64> = a
        .par_chunks(REDUCTION_CHUNK)
        .zip(b.par_chunks(REDUCTION_CHUNK))
        .map(|(x, y)| x.iter().zip(y).map(|(p, q)| p * q).sum::<f64>())
        .collect();
    partial.iter().sum()
}

pub fn norm2(a: &[f64]) -> f64 {
    dot(a, a).sqrt()
}

/// Outcome of a Krylov solve.
#[derive(Clone, Debug, PartialEq)]
pub struct KrylovStats {
    pub iterations: usize,
    pub relative_residual: f64,
    pub converged: bool,
}

/// Jacobi-preconditioned BiCGSTAB for a general square sparse system.
/// Stops at `rel_tol` relative residual or `max_iter` iterations; an
/// unconverged result still returns the best iterate.
pub fn bicgstab(a: &CsrMatrix, b: &[f64], rel_tol: f64, max_iter: usize) -> (Vec<f64>, KrylovStats) {
    let n = a.nrows;
    let inv_diag: Vec<f64> = a
        .diagonal()
        .iter()
        .map(|&d| if d != 0.0 { 1.0 / d } else { 1.0 })
        .collect();
    let precond = |v: &[f64], out: &mut [f64]| {
        out.par_iter_mut()
            .zip(v.par_iter().zip(inv_diag.par_iter()))
            .for_each(|(o, (x, d))| *o = x * d);
    };
    let bnorm = norm2(b);
    let mut x = vec![0.0; n];
    if bnorm == 0.0 {
        return (
            x,
            KrylovStats {
                iterations: 0,
                relative_residual: 0.0,
                converged: true,
            },
        );
    }
    let mut r = b.to_vec();
    let r_hat = r.clone();
    let mut p = vec![0.0; n];
    let mut v = vec![0.0; n];
    let mut s = vec![0.0; n];
    let mut t = vec![0.0; n];
    let mut phat = vec![0.0; n];
    let mut shat = vec![0.0; n];
    let (mut rho_old, mut alpha, mut omega) = (1.0, 1.0, 1.0);
    let mut best_x = x.clone();
    let mut best_res = 1.0;
    for it in 1..=max_iter {
        let rho = dot(&r_hat, &r);
        if rho == 0.0 || !rho.is_finite() {
            return (
                best_x,
                KrylovStats {
                    iterations: it,
                    relative_residual: best_res,
                    converged: false,
                },
            );
        }
        let beta = (rho / rho_old) * (alpha / omega);
        p.par_iter_mut()
            .zip(r.par_iter().zip(v.par_iter()))
            .for_each(|(pi, (ri, vi))| *pi = ri + beta * (*pi - omega * vi));
        precond(&p, &mut phat);
        a.mul_vec_into(&phat, &mut v);
        let rv = dot(&r_hat, &v);
        if rv == 0.0 || !rv.is_finite() {
            break;
        }
        alpha = rho / rv;
        s.par_iter_mut()
            .zip(r.par_iter().zip(v.par_iter()))
            .for_each(|(si, (ri, vi))| *si = ri - alpha * vi);
        let snorm = norm2(&s) / bnorm;
        if snorm < rel_tol {
            x.par_iter_mut()
                .zip(phat.par_iter())
                .for_each(|(xi, pi)| *xi += alpha * pi);
            return (
                x,
                KrylovStats {
                    iterations: it,
                    relative_residual: snorm,
                    converged: true,
                },
            );
        }
        precond(&s, &mut shat);
        a.mul_vec_into(&shat, &mut t);
        let tt = dot(&t, &t);
        omega = if tt > 0.0 { dot(&t, &s) / tt } else { 0.0 };
        x.par_iter_mut()
            .zip(phat.par_iter().zip(shat.par_iter()))
            .for_each(|(xi, (pi, si))| *xi += alpha * pi + omega * si);
        r.par_iter_mut()
            .zip(s.par_iter().zip(t.par_iter()))
            .for_each(|(ri, (si, ti))| *ri = si - omega * ti);
        let res = norm2(&r) / bnorm;
        if res < best_res {
            best_res = res;
            best_x.copy_from_slice(&x);
        }
        if res < rel_tol {
            return (
                x,
                KrylovStats {
                    iterations: it,
                    relative_residual: res,
                    converged: true,
                },
            );
        }
        if omega == 0.0 {
            break;
        }
        rho_old = rho;
    }
    (
        best_x,
        KrylovStats {
            iterations: max_iter,
            relative_residual: best_res,
            converged: false,
        },
    )
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_sym(n: usize, rng: &mut ChaCha8Rng) -> SymMatrix {
        let raw: Vec<f64> = (0..n * n).map(|_| rng.random_range(-1.0..1.0)).collect();
        SymMatrix::from_fn(n, |i, j| raw[i * n + j])
    }

    #[test]
    fn jacobi_reconstructs_matrix() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for n in 1..7 {
            let m = random_sym(n, &mut rng);
            let e = jacobi_eigen(&m);
            for i in 0..n {
                for j in 0..n {
                    let r: f64 = (0..n)
                        .map(|k| e.vectors[i * n + k] * e.values[k] * e.vectors[j * n + k])
                        .sum();
                    assert!((r - m.get(i, j)).abs() < 1e-12);
                }
            }
            assert!(e.values.windows(2).all(|w| w[0] <= w[1]));
        }
    }

    #[test]
    fn sym3_matches_general_jacobi() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for _ in 0..100 {
            let m = random_sym(3, &mut rng);
            let arr = [
                [m.get(0, 0), m.get(0, 1), m.get(0, 2)],
                [m.get(1, 0), m.get(1, 1), m.get(1, 2)],
                [m.get(2, 0), m.get(2, 1), m.get(2, 2)],
            ];
            let (vals, _) = eigen_sym3(&arr);
            let e = jacobi_eigen(&m);
            for k in 0..3 {
                assert!((vals[k] - e.values[k]).abs() < 1e-13);
            }
        }
    }

    #[test]
    fn generalized_eigen_scaled_identity() {
        let u = SymMatrix::from_fn(3, |i, j| (i + j) as f64 + if i == j { 1.0 } else { 0.0 });
        let plain = jacobi_eigen(&u).values;
        let g = SymMatrix::identity(3).scale(4.0);
        let gen = generalized_eigen(&g, &u).unwrap().values;
        for k in 0..3 {
            assert!((gen[k] - plain[k] / 4.0).abs() < 1e-13);
        }
    }

    #[test]
    fn cholesky_rejects_indefinite() {
        let g = SymMatrix::diagonal(&[1.0, -1.0]);
        assert!(matches!(cholesky(&g), Err(Error::Metric(_))));
    }

    #[test]
    fn thomas_solves_poisson() {
        let n = 50;
        let lower = vec![-1.0; n];
        let upper = vec![-1.0; n];
        let diag = vec![2.0; n];
        let x_true: Vec<f64> = (0..n).map(|i| (i as f64 * 0.3).sin()).collect();
        let mut rhs = vec![0.0; n];
        for i in 0..n {
            rhs[i] = 2.0 * x_true[i]
                - if i > 0 { x_true[i - 1] } else { 0.0 }
                - if i + 1 < n { x_true[i + 1] } else { 0.0 };
        }
        let x = solve_tridiagonal(&lower, &diag, &upper, &rhs).unwrap();
        for i in 0..n {
            assert!((x[i] - x_true[i]).abs() < 1e-10);
        }
    }

    #[test]
    fn bicgstab_nonsymmetric_system() {
        let n = 200;
        let mut rows = Vec::new();
        for i in 0..n {
            let mut row = vec![(i, 4.0)];
            if i > 0 {
                row.push((i - 1, -1.3));
            }
            if i + 1 < n {
                row.push((i + 1, -0.7));
            }
            rows.push(row);
        }
        let a = CsrMatrix::from_rows(rows);
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let x_true: Vec<f64> = (0..n).map(|_| rng.random_range(-1.0..1.0)).collect();
        let b = a.mul_vec(&x_true);
        let (x, stats) = bicgstab(&a, &b, 1e-12, 500);
        assert!(stats.converged);
        for i in 0..n {
            assert!((x[i] - x_true[i]).abs() < 1e-9);
        }
    }

    #[test]
    fn dot_is_thread_count_independent() {
        let v: Vec<f64> = (0..100_000).map(|i| ((i as f64) * 0.37).sin()).collect();
        let one = rayon::ThreadPoolBuilder::new().num_threads(1).build().unwrap();
        let four = rayon::ThreadPoolBuilder::new().num_threads(4).build().unwrap();
        let a = one.install(|| dot(&v, &v));
        let b = four.install(|| dot(&v, &v));
        assert_eq!(a.to_bits(), b.to_bits());
    }
}
