//! Small dense helpers: dot products and a deterministic one-sided Jacobi SVD.

use ndarray::{Array1, Array2, ArrayView1, ArrayView2, Axis};

use crate::Scalar;

#[inline]
pub fn dot<T: Scalar>(a: ArrayView1<T>, b: ArrayView1<T>) -> T {
    a.iter()
        .zip(b.iter())
        .fold(T::zero(), |acc, (&x, &y)| acc + x * y)
}

#[inline]
pub fn norm<T: Scalar>(a: ArrayView1<T>) -> T {
    dot(a, a).sqrt()
}

pub fn frobenius_sq<T: Scalar>(m: ArrayView2<T>) -> T {
    m.iter().fold(T::zero(), |acc, &x| acc + x * x)
}

/// Right singular system of a tall or wide matrix `R` (n × d).
///
/// `vectors` holds the right singular vectors as columns (d × d), ordered by
/// descending singular value. These are the left singular vectors of `Rᵀ`,
/// i.e. an orthonormal basis of the row space of `R` followed by its
/// complement.
#[derive(Debug, Clone)]
pub struct RightSvd<T> {
    pub singular_values: Vec<T>,
    /// Squared column norms after rotation; equal to σ² but accumulated
    /// without a square-root round trip.
    pub energies: Vec<T>,
    pub vectors: Array2<T>,
}

const MAX_SWEEPS: usize = 80;

/// One-sided (Hestenes) Jacobi SVD.
///
/// Rotates column pairs of `R` until they are mutually orthogonal; the
/// accumulated rotation is `V`. The result depends only on the input bits.
/// Each singular vector is sign-normalized so its first non-negligible
/// component is positive.
pub fn right_svd<T: Scalar>(r: ArrayView2<T>) -> RightSvd<T> {
    let d = r.ncols();
    let n = r.nrows();
    // column-major working copy: one Vec per column keeps rotations cache friendly
    let mut cols: Vec<Vec<T>> = (0..d).map(|j| r.column(j).to_vec()).collect();
    let mut v: Vec<Vec<T>> = (0..d)
        .map(|j| {
            let mut e = vec![T::zero(); d];
            e[j] = T::one();
            e
        })
        .collect();
    let tol = T::epsilon() * T::lit((n.max(d)) as f64).sqrt();

    for _ in 0..MAX_SWEEPS {
        let mut rotated = false;
        for p in 0..d {
            for q in (p + 1)..d {
                let (alpha, beta, gamma) = {
                    let (cp, cq) = (&cols[p], &cols[q]);
                    let mut a = T::zero();
                    let mut b = T::zero();
                    let mut g = T::zero();
                    for i in 0..n {
                        a += cp[i] * cp[i];
                        b += cq[i] * cq[i];
                        g += cp[i] * cq[i];
                    }
                    (a, b, g)
                };
                if gamma == T::zero() || gamma.abs() <= tol * (alpha * beta).sqrt() {
                    continue;
                }
                rotated = true;
                let zeta = (beta - alpha) / (T::lit(2.0) * gamma);
                let t = zeta.signum() / (zeta.abs() + (T::one() + zeta * zeta).sqrt());
                let c = T::one() / (T::one() + t * t).sqrt();
                let s = c * t;
                rotate(&mut cols, p, q, c, s);
                rotate(&mut v, p, q, c, s);
            }
        }
        if !rotated {
            break;
        }
    }

    let energies: Vec<T> = cols
        .iter()
        .map(|c| c.iter().fold(T::zero(), |acc, &x| acc + x * x))
        .collect();
    let mut order: Vec<usize> = (0..d).collect();
    // stable sort keeps the result deterministic when energies tie
    order.sort_by(|&a, &b| {
        energies[b]
            .partial_cmp(&energies[a])
            .unwrap_or(std::cmp::Ordering::Equal)
    });

    let mut vectors = Array2::zeros((d, d));
    let mut sorted_energy = Vec::with_capacity(d);
    for (k, &j) in order.iter().enumerate() {
        let mut col = Array1::from(v[j].clone());
        canonical_sign(&mut col);
        vectors.column_mut(k).assign(&col);
        sorted_energy.push(energies[j]);
    }
    RightSvd {
        singular_values: sorted_energy.iter().map(|e| e.sqrt()).collect(),
        energies: sorted_energy,
        vectors,
    }
}

fn rotate<T: Scalar>(cols: &mut [Vec<T>], p: usize, q: usize, c: T, s: T) {
    let (left, right) = cols.split_at_mut(q);
    let cp = &mut left[p];
    let cq = &mut right[0];
    for (x, y) in cp.iter_mut().zip(cq.iter_mut()) {
        let a = *x;
        let b = *y;
        *x = c * a - s * b;
        *y = s * a + c * b;
    }
}

/// Flips `v` so that its first component with magnitude above a small
/// threshold is positive.
pub fn canonical_sign<T: Scalar>(v: &mut Array1<T>) {
    let scale = v.iter().fold(T::zero(), |m, x| m.max(x.abs()));
    let thresh = scale * T::lit(1e-6);
    if let Some(first) = v.iter().find(|x| x.abs() > thresh) {
        if *first < T::zero() {
            v.mapv_inplace(|x| -x);
        }
    }
}

/// Modified Gram–Schmidt of `candidates` (columns) against the orthonormal
/// columns of `fixed`, and against each other. Columns whose residual norm
/// falls below `drop_tol` relative to their input norm are discarded.
pub fn orthonormalize_against<T: Scalar>(
    fixed: ArrayView2<T>,
    candidates: ArrayView2<T>,
    drop_tol: T,
) -> Array2<T> {
    let d = candidates.nrows();
    let mut kept: Vec<Array1<T>> = Vec::new();
    for cand in candidates.axis_iter(Axis(1)) {
        let mut w = cand.to_owned();
        let start = norm(w.view());
        if start == T::zero() {
            continue;
        }
        // two passes: classical re-orthogonalization
        for _ in 0..2 {
            for b in fixed.axis_iter(Axis(1)) {
                let c = dot(b, w.view());
                w.scaled_add(-c, &b);
            }
            for b in &kept {
                let c = dot(b.view(), w.view());
                w.scaled_add(-c, b);
            }
        }
        let nrm = norm(w.view());
        if nrm <= drop_tol * start {
            continue;
        }
        w.mapv_inplace(|x| x / nrm);
        kept.push(w);
    }
    let mut out = Array2::zeros((d, kept.len()));
    for (j, col) in kept.iter().enumerate() {
        out.column_mut(j).assign(col);
    }
    out
}
