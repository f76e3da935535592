//! Dense and sparse complex linear algebra shared by the solvers.
//!
//! Matrices are vectorized column-major throughout, so the map
//! `X -> A X B` has matrix `kron(B^T, A)`.

use ndarray::{s, Array1, Array2, Axis, ShapeBuilder};
use ndarray_linalg::{Eig, Eigh, Inverse, Solve, UPLO};
use num_complex::Complex64;
use sprs::{CsMat, TriMat};

pub type C64 = Complex64;
pub type CMat = Array2<C64>;
pub type CVec = Array1<C64>;

pub const ZERO: C64 = C64 { re: 0.0, im: 0.0 };
pub const ONE: C64 = C64 { re: 1.0, im: 0.0 };
pub const I: C64 = C64 { re: 0.0, im: 1.0 };

#[inline]
pub fn c(re: f64, im: f64) -> C64 {
    C64::new(re, im)
}

pub fn eye(n: usize) -> CMat {
    Array2::from_diag_elem(n, ONE)
}

pub fn dag(m: &CMat) -> CMat {
    m.t().mapv(|z| z.conj())
}

pub fn conj(m: &CMat) -> CMat {
    m.mapv(|z| z.conj())
}

pub fn trace(m: &CMat) -> C64 {
    m.diag().sum()
}

/// tr(A B) without forming the product.
pub fn trace_prod(a: &CMat, b: &CMat) -> C64 {
    let mut acc = ZERO;
    for ((i, j), x) in a.indexed_iter() {
        acc += x * b[[j, i]];
    }
    acc
}

pub fn commutator(a: &CMat, b: &CMat) -> CMat {
    a.dot(b) - b.dot(a)
}

pub fn hermitize(m: &CMat) -> CMat {
    (m + &dag(m)).mapv(|z| z * 0.5)
}

pub fn fro_norm(m: &CMat) -> f64 {
    m.iter().map(|z| z.norm_sqr()).sum::<f64>().sqrt()
}

pub fn vec_norm(v: &CVec) -> f64 {
    v.iter().map(|z| z.norm_sqr()).sum::<f64>().sqrt()
}

pub fn one_norm(m: &CMat) -> f64 {
    m.axis_iter(Axis(1))
        .map(|col| col.iter().map(|z| z.norm()).sum::<f64>())
        .fold(0.0, f64::max)
}

pub fn kron(a: &CMat, b: &CMat) -> CMat {
    let (ar, ac) = a.dim();
    let (br, bc) = b.dim();
    let mut out = CMat::zeros((ar * br, ac * bc));
    for ((i, j), x) in a.indexed_iter() {
        if *x == ZERO {
            continue;
        }
        out.slice_mut(s![i * br..(i + 1) * br, j * bc..(j + 1) * bc])
            .assign(&b.mapv(|y| x * y));
    }
    out
}

/// Column-major flattening.
pub fn vectorize(m: &CMat) -> CVec {
    m.t().iter().cloned().collect()
}

pub fn unvectorize(v: &CVec, d: usize) -> CMat {
    let mut m = CMat::zeros((d, d));
    for j in 0..d {
        for i in 0..d {
            m[[i, j]] = v[j * d + i];
        }
    }
    m
}

/// Superoperator of `X -> A X + X A^dag + sum_k B_k X B_k^dag`.
pub fn generic_generator(a: &CMat, bs: &[CMat]) -> CMat {
    let d = a.nrows();
    let n = d * d;
    let mut g = CMat::zeros((n, n));
    for j in 0..d {
        for l in 0..d {
            let mut blk = if j == l { a.clone() } else { CMat::zeros((d, d)) };
            let ajl = a[[j, l]].conj();
            for i in 0..d {
                blk[[i, i]] += ajl;
            }
            for b in bs {
                let bjl = b[[j, l]].conj();
                if bjl != ZERO {
                    blk.scaled_add(bjl, b);
                }
            }
            g.slice_mut(ndarray::s![j * d..(j + 1) * d, l * d..(l + 1) * d])
                .assign(&blk);
        }
    }
    g
}

/// Matrix exponential by Pade(13) scaling and squaring.
pub fn expm(a: &CMat) -> CMat {
    const B: [f64; 14] = [
        64764752532480000.0,
        32382376266240000.0,
        7771770303897600.0,
        1187353796428800.0,
        129060195264000.0,
        10559470521600.0,
        670442572800.0,
        33522128640.0,
        1323241920.0,
        40840800.0,
        960960.0,
        16380.0,
        182.0,
        1.0,
    ];
    const THETA13: f64 = 5.371920351148152;
    let n = a.nrows();
    let norm = one_norm(a);
    let sq = if norm > THETA13 {
        (norm / THETA13).log2().ceil() as i32
    } else {
        0
    };
    let scale = 0.5f64.powi(sq);
    let a = a.mapv(|z| z * scale);
    let id = eye(n);
    let a2 = a.dot(&a);
    let a4 = a2.dot(&a2);
    let a6 = a4.dot(&a2);
    let sc = |m: &CMat, x: f64| m.mapv(|z| z * x);
    let inner_u = &sc(&a6, B[13]) + &sc(&a4, B[11]) + &sc(&a2, B[9]);
    let u = a.dot(
        &(a6.dot(&inner_u) + sc(&a6, B[7]) + sc(&a4, B[5]) + sc(&a2, B[3]) + sc(&id, B[1])),
    );
    let inner_v = &sc(&a6, B[12]) + &sc(&a4, B[10]) + &sc(&a2, B[8]);
    let v = a6.dot(&inner_v) + sc(&a6, B[6]) + sc(&a4, B[4]) + sc(&a2, B[2]) + sc(&id, B[0]);
    let p = &v + &u;
    let q = &v - &u;
    let qinv = q.inv().expect("Pade denominator is singular");
    let mut r = qinv.dot(&p);
    for _ in 0..sq {
        r = r.dot(&r);
    }
    r
}

/// Eigenvalues and eigenvectors of a Hermitian matrix, ascending.
pub fn eigh(m: &CMat) -> (Array1<f64>, CMat) {
    // Row-major input comes back with conjugated eigenvectors, so hand
    // LAPACK a column-major copy.
    let mut f = CMat::zeros(m.dim().f());
    f.assign(m);
    f.eigh(UPLO::Upper).expect("Hermitian eigensolver failed")
}

/// Pseudo-inverse of a Hermitian matrix, cutting eigenvalues below
/// `rel_cutoff` times the largest magnitude.
pub fn pinv_hermitian(m: &CMat, rel_cutoff: f64) -> CMat {
    let (w, v) = eigh(&hermitize(m));
    let wmax = w.iter().fold(0.0f64, |a, x| a.max(x.abs()));
    let n = m.nrows();
    let mut scaled = v.clone();
    for (k, &wk) in w.iter().enumerate() {
        let f = if wk.abs() > rel_cutoff * wmax && wmax > 0.0 {
            1.0 / wk
        } else {
            0.0
        };
        scaled.column_mut(k).mapv_inplace(|z| z * f);
    }
    let mut out = CMat::zeros((n, n));
    ndarray::linalg::general_mat_mul(ONE, &scaled, &dag(&v), ZERO, &mut out);
    out
}

/// Square root of a positive semidefinite Hermitian matrix.
pub fn sqrtm_psd(m: &CMat) -> CMat {
    let (w, v) = eigh(&hermitize(m));
    let mut scaled = v.clone();
    for (k, &wk) in w.iter().enumerate() {
        let f = wk.max(0.0).sqrt();
        scaled.column_mut(k).mapv_inplace(|z| z * f);
    }
    scaled.dot(&dag(&v))
}

/// Dense right eigendecomposition `A = V diag(w) V^-1`.
pub struct EigenBasis {
    pub values: CVec,
    pub vectors: CMat,
    pub inverse: CMat,
    pub condition: f64,
}

impl EigenBasis {
    pub fn new(a: &CMat) -> Option<Self> {
        let (values, vectors) = a.eig().ok()?;
        let inverse = vectors.inv().ok()?;
        let condition = one_norm(&vectors) * one_norm(&inverse);
        if !condition.is_finite() {
            return None;
        }
        Some(Self {
            values,
            vectors,
            inverse,
            condition,
        })
    }
}

/// Sparse complex matrix in CSR layout.
#[derive(Clone)]
pub struct SparseMat {
    pub mat: CsMat<C64>,
    pub norm1: f64,
}

impl SparseMat {
    pub fn from_dense(a: &CMat, tol: f64) -> Self {
        let (r, cdim) = a.dim();
        let mut tri = TriMat::new((r, cdim));
        let mut colsum = vec![0.0; cdim];
        for ((i, j), x) in a.indexed_iter() {
            if x.norm() > tol {
                tri.add_triplet(i, j, *x);
                colsum[j] += x.norm();
            }
        }
        Self {
            mat: tri.to_csr(),
            norm1: colsum.into_iter().fold(0.0, f64::max),
        }
    }

    pub fn nnz(&self) -> usize {
        self.mat.nnz()
    }

    pub fn apply(&self, x: &[C64], out: &mut [C64]) {
        out.iter_mut().for_each(|z| *z = ZERO);
        sprs::prod::mul_acc_mat_vec_csr(self.mat.view(), x, out);
    }

    /// `exp(t A) x` by truncated Taylor series on substeps with `|t A| <= 1`.
    pub fn expmv(&self, t: f64, x: &CVec) -> CVec {
        let n = x.len();
        let steps = ((self.norm1 * t.abs()).ceil() as usize).max(1);
        let h = t / steps as f64;
        let mut v = x.to_vec();
        let mut term = vec![ZERO; n];
        let mut next = vec![ZERO; n];
        for _ in 0..steps {
            term.copy_from_slice(&v);
            let scale = v.iter().map(|z| z.norm()).fold(0.0, f64::max).max(1e-300);
            for k in 1..60 {
                self.apply(&term, &mut next);
                let f = h / k as f64;
                let mut tmax = 0.0f64;
                for i in 0..n {
                    term[i] = next[i] * f;
                    v[i] += term[i];
                    tmax = tmax.max(term[i].norm());
                }
                if tmax <= 1e-17 * scale {
                    break;
                }
            }
        }
        Array1::from(v)
    }
}

/// Evaluates `w . exp(A t) v` on a grid of times.
pub enum Propagator {
    Eigen(EigenBasis),
    /// Dense scaling-and-squaring steps, used when the eigenbasis is
    /// ill-conditioned.
    Dense(CMat),
    Sparse(SparseMat),
}

impl Propagator {
    /// Eigenbasis route unless its condition number exceeds `max_condition`.
    pub fn dense(a: &CMat, max_condition: f64) -> Self {
        match EigenBasis::new(a) {
            Some(eb) if eb.condition <= max_condition => Propagator::Eigen(eb),
            _ => Propagator::Dense(a.clone()),
        }
    }

    pub fn sparse(a: &CMat) -> Self {
        Propagator::Sparse(SparseMat::from_dense(a, 0.0))
    }

    /// `[w . exp(A t) v for t in grid]`; the grid must be non-decreasing.
    pub fn series(&self, v: &CVec, w: &CVec, grid: &[f64]) -> Vec<C64> {
        match self {
            Propagator::Eigen(eb) => {
                let coef = eb.inverse.dot(v);
                let proj = w.dot(&eb.vectors);
                let amp: Vec<C64> = proj.iter().zip(coef.iter()).map(|(a, b)| a * b).collect();
                if grid.len() > 2 && is_uniform(grid, 1e-9) {
                    let h = grid[1] - grid[0];
                    let step: Vec<C64> = eb.values.iter().map(|l| (l * h).exp()).collect();
                    let mut z: Vec<C64> = eb
                        .values
                        .iter()
                        .zip(&amp)
                        .map(|(l, a)| a * (l * grid[0]).exp())
                        .collect();
                    let mut out = Vec::with_capacity(grid.len());
                    for _ in grid {
                        out.push(z.iter().sum());
                        z.iter_mut().zip(&step).for_each(|(a, s)| *a *= s);
                    }
                    out
                } else {
                    grid.iter()
                        .map(|&t| eb.values.iter().zip(&amp).map(|(l, a)| a * (l * t).exp()).sum())
                        .collect()
                }
            }
            Propagator::Dense(a) => {
                let mut out = Vec::with_capacity(grid.len());
                let mut cur = v.clone();
                let mut t = 0.0;
                let mut cache: Option<(f64, CMat)> = None;
                for &x in grid {
                    let h = x - t;
                    if h != 0.0 {
                        let reuse = matches!(&cache, Some((hc, _)) if (hc - h).abs() <= 1e-12 * h.abs());
                        if !reuse {
                            cache = Some((h, expm(&a.mapv(|z| z * h))));
                        }
                        cur = cache.as_ref().unwrap().1.dot(&cur);
                        t = x;
                    }
                    out.push(w.dot(&cur));
                }
                out
            }
            Propagator::Sparse(sp) => {
                let mut out = Vec::with_capacity(grid.len());
                let mut cur = v.clone();
                let mut t = 0.0;
                for &x in grid {
                    if x != t {
                        cur = sp.expmv(x - t, &cur);
                        t = x;
                    }
                    out.push(w.dot(&cur));
                }
                out
            }
        }
    }

    /// Eigenvalues when the eigenbasis route is active.
    pub fn eigenvalues(&self) -> Option<&CVec> {
        match self {
            Propagator::Eigen(eb) => Some(&eb.values),
            _ => None,
        }
    }
}

/// Solve `A x = b` densely, returning `None` on singular systems.
pub fn solve(a: &CMat, b: &CVec) -> Option<CVec> {
    a.solve(b).ok()
}

/// True when consecutive grid spacings agree to relative `tol`.
pub fn is_uniform(grid: &[f64], tol: f64) -> bool {
    if grid.len() < 3 {
        return true;
    }
    let h = grid[1] - grid[0];
    grid.windows(2)
        .all(|w| ((w[1] - w[0]) - h).abs() <= tol * h.abs().max(1e-300))
}
