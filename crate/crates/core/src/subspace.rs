//! Projection algebra, SVD-based basis extraction, and the hindrance angle.
//!
//! Vectors are columns; a [`Basis`] stores its orthonormal columns as a
//! `d × k` matrix `B`, so the projection of `v` is `B Bᵀ v`. Representation
//! matrices store one sample per row (`n × d`), and the feature space of a
//! task is spanned by the leading left singular vectors of `Rᵀ`.

use std::fmt;

use ndarray::{s, Array1, Array2, ArrayView1, ArrayView2, Axis};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::{self, dot, norm};
use crate::Scalar;

/// Orthonormal column set spanning a stored feature space.
#[derive(Clone, PartialEq)]
pub struct Basis<T> {
    columns: Array2<T>,
    label: String,
}

impl<T: Scalar> Basis<T> {
    /// Basis of the zero subspace of `ℝ^d`.
    pub fn empty(dim: usize, label: impl Into<String>) -> Self {
        Self {
            columns: Array2::zeros((dim, 0)),
            label: label.into(),
        }
    }

    /// Wraps `columns` (d × k) after checking unit norms and pairwise
    /// orthogonality at [`Scalar::ortho_tol`].
    pub fn from_columns(columns: Array2<T>, label: impl Into<String>) -> Result<Self> {
        let basis = Self {
            columns,
            label: label.into(),
        };
        basis.validate()?;
        Ok(basis)
    }

    /// Orthonormalizes arbitrary columns with Gram–Schmidt, dropping
    /// dependent ones.
    pub fn orthonormalized(columns: ArrayView2<T>, label: impl Into<String>) -> Self {
        let d = columns.nrows();
        let fixed = Array2::zeros((d, 0));
        Self {
            columns: linalg::orthonormalize_against(fixed.view(), columns, T::ortho_tol()),
            label: label.into(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        let (d, k) = self.columns.dim();
        if k > d {
            return Err(Error::NotOrthonormal(format!(
                "{k} columns in dimension {d}"
            )));
        }
        let tol = T::ortho_tol();
        let gram = self.columns.t().dot(&self.columns);
        for i in 0..k {
            for j in 0..k {
                let want = if i == j { T::one() } else { T::zero() };
                let err = (gram[[i, j]] - want).abs();
                if !err.is_finite() || err > tol {
                    return Err(Error::NotOrthonormal(format!("gram[{i},{j}] off by {err}")));
                }
            }
        }
        Ok(())
    }

    pub fn dim(&self) -> usize {
        self.columns.nrows()
    }

    pub fn rank(&self) -> usize {
        self.columns.ncols()
    }

    pub fn is_empty(&self) -> bool {
        self.rank() == 0
    }

    pub fn columns(&self) -> ArrayView2<'_, T> {
        self.columns.view()
    }

    pub fn label(&self) -> &str {
        &self.label
    }

    pub fn with_label(mut self, label: impl Into<String>) -> Self {
        self.label = label.into();
        self
    }

    /// Basis made of the first `k` columns.
    pub fn truncated(&self, k: usize) -> Self {
        Self {
            columns: self.columns.slice(s![.., ..k.min(self.rank())]).to_owned(),
            label: self.label.clone(),
        }
    }
}

impl<T: Scalar> fmt::Debug for Basis<T> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Basis")
            .field("label", &self.label)
            .field("dim", &self.dim())
            .field("rank", &self.rank())
            .finish()
    }
}

/// How a representation matrix was produced.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EncoderMode {
    /// Forward pass with a prompt set attached.
    Prompted,
    /// Promptless forward pass of the frozen backbone.
    Query,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Provenance {
    pub task: u32,
    pub mode: EncoderMode,
}

/// `n × d` matrix of sample representations, one sample per row.
#[derive(Debug, Clone)]
pub struct RepresentationMatrix<T> {
    rows: Array2<T>,
    pub provenance: Provenance,
}

impl<T: Scalar> RepresentationMatrix<T> {
    pub fn new(rows: Array2<T>, provenance: Provenance) -> Result<Self> {
        if rows.nrows() == 0 || rows.ncols() == 0 {
            return Err(Error::Shape(
                "representation matrix must be non-empty".into(),
            ));
        }
        if rows.iter().any(|x| !x.is_finite()) {
            return Err(Error::Shape(
                "representation matrix has non-finite entries".into(),
            ));
        }
        Ok(Self { rows, provenance })
    }

    pub fn rows(&self) -> ArrayView2<'_, T> {
        self.rows.view()
    }

    pub fn dim(&self) -> usize {
        self.rows.ncols()
    }

    pub fn len(&self) -> usize {
        self.rows.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.rows.nrows() == 0
    }
}

/// Hindrance angle between a gradient and one of its projections.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Hfc<T> {
    /// Radians.
    pub angle: T,
    pub grad_norm: T,
}

impl<T: Scalar> Hfc<T> {
    pub fn degrees(&self) -> f64 {
        self.angle.as_f64().to_degrees()
    }
}

fn check_dim<T: Scalar>(v: ArrayView1<T>, basis: &Basis<T>) -> Result<()> {
    if v.len() != basis.dim() {
        return Err(Error::DimensionMismatch {
            expected: basis.dim(),
            found: v.len(),
        });
    }
    Ok(())
}

/// `B Bᵀ v`.
pub fn project<T: Scalar>(v: ArrayView1<T>, basis: &Basis<T>) -> Result<Array1<T>> {
    check_dim(v, basis)?;
    let coeffs = basis.columns.t().dot(&v);
    Ok(basis.columns.dot(&coeffs))
}

/// `v − B Bᵀ v`.
pub fn project_complement<T: Scalar>(v: ArrayView1<T>, basis: &Basis<T>) -> Result<Array1<T>> {
    let p = project(v, basis)?;
    Ok(&v - &p)
}

/// Angle between `g` and `g_proj`.
///
/// A projection whose norm is below `ortho_tol · ‖g‖` counts as zero and
/// yields `π/2`.
pub fn hfc<T: Scalar>(g: ArrayView1<T>, g_proj: ArrayView1<T>) -> Result<Hfc<T>> {
    if g.len() != g_proj.len() {
        return Err(Error::DimensionMismatch {
            expected: g.len(),
            found: g_proj.len(),
        });
    }
    let gn = norm(g);
    if !(gn > T::zero()) {
        return Err(Error::ZeroGradient);
    }
    let pn = norm(g_proj);
    if pn <= T::ortho_tol() * gn {
        return Ok(Hfc {
            angle: T::FRAC_PI_2(),
            grad_norm: gn,
        });
    }
    let cos = (dot(g, g_proj) / (gn * pn)).max(-T::one()).min(T::one());
    Ok(Hfc {
        angle: cos.acos(),
        grad_norm: gn,
    })
}

fn check_fraction<T: Scalar>(eps: T) -> Result<()> {
    if !(eps > T::zero() && eps <= T::one()) {
        return Err(Error::InvalidFraction(eps.as_f64()));
    }
    Ok(())
}

/// `acc ≥ eps · total`, with a rounding allowance proportional to `total`.
pub(crate) fn energy_reached<T: Scalar>(acc: T, eps: T, total: T) -> bool {
    acc >= eps * total - T::epsilon() * T::lit(64.0) * total
}

/// Smallest `k` such that `base + Σ_{i<k} energies[i] ≥ eps · total`.
pub(crate) fn minimal_rank<T: Scalar>(energies: &[T], base: T, eps: T, total: T) -> usize {
    let mut acc = base;
    if energy_reached(acc, eps, total) {
        return 0;
    }
    for (i, e) in energies.iter().enumerate() {
        acc += *e;
        if energy_reached(acc, eps, total) {
            return i + 1;
        }
    }
    energies.len()
}

/// Leading left singular vectors of `Rᵀ` covering an `eps` fraction of the
/// Frobenius energy of `R`.
pub fn k_rank_basis<T: Scalar>(
    r: &RepresentationMatrix<T>,
    eps: T,
    label: impl Into<String>,
) -> Result<Basis<T>> {
    check_fraction(eps)?;
    let svd = linalg::right_svd(r.rows());
    let total: T = svd.energies.iter().copied().sum();
    if !(total > T::zero()) {
        return Err(Error::DegenerateRepresentation);
    }
    let k = minimal_rank(&svd.energies, T::zero(), eps, total).max(1);
    let cols = svd.vectors.slice(s![.., ..k]).to_owned();
    Ok(Basis {
        columns: cols,
        label: label.into(),
    })
}

/// Appends to `old` the fewest new directions from the part of `R_new` that
/// `old` does not already explain, so that the explained energy reaches
/// `eps · ‖R_new‖²_F`. Old columns are kept unchanged and first.
pub fn extend_basis<T: Scalar>(
    old: &Basis<T>,
    r_new: &RepresentationMatrix<T>,
    eps: T,
) -> Result<Basis<T>> {
    check_fraction(eps)?;
    if r_new.dim() != old.dim() {
        return Err(Error::DimensionMismatch {
            expected: old.dim(),
            found: r_new.dim(),
        });
    }
    let r = r_new.rows();
    let total = linalg::frobenius_sq(r);
    if !(total > T::zero()) {
        return Err(Error::DegenerateRepresentation);
    }
    // rows are samples: R_proj = R B Bᵀ
    let r_proj = r.dot(&old.columns).dot(&old.columns.t());
    let proj_energy = linalg::frobenius_sq(r_proj.view());
    if energy_reached(proj_energy, eps, total) || old.rank() == old.dim() {
        return Ok(old.clone());
    }
    let residual = &r - &r_proj;
    let svd = linalg::right_svd(residual.view());
    let h = minimal_rank(&svd.energies, proj_energy, eps, total);
    let h = h.min(old.dim() - old.rank());
    let fresh = linalg::orthonormalize_against(
        old.columns.view(),
        svd.vectors.slice(s![.., ..h]),
        T::ortho_tol(),
    );
    let mut columns = old.columns.clone();
    for col in fresh.axis_iter(Axis(1)) {
        columns.push_column(col).expect("matching row count");
    }
    Ok(Basis {
        columns,
        label: old.label.clone(),
    })
}

/// One basis per prompted block, in block order.
#[derive(Clone, PartialEq)]
pub struct LayerSpaces<T> {
    pub layers: Vec<Basis<T>>,
}

impl<T: Scalar> fmt::Debug for LayerSpaces<T> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_list().entries(self.layers.iter()).finish()
    }
}

impl<T: Scalar> LayerSpaces<T> {
    pub fn new(layers: Vec<Basis<T>>) -> Self {
        Self { layers }
    }

    pub fn empty(n_layers: usize, dim: usize, label: &str) -> Self {
        Self {
            layers: (0..n_layers)
                .map(|l| Basis::empty(dim, format!("{label} / layer {l}")))
                .collect(),
        }
    }

    pub fn len(&self) -> usize {
        self.layers.len()
    }

    pub fn is_empty(&self) -> bool {
        self.layers.is_empty()
    }

    pub fn ranks(&self) -> Vec<usize> {
        self.layers.iter().map(Basis::rank).collect()
    }

    pub fn build(reps: &[RepresentationMatrix<T>], eps: T, label: &str) -> Result<Self> {
        reps.iter()
            .enumerate()
            .map(|(l, r)| k_rank_basis(r, eps, format!("{label} / layer {l}")))
            .collect::<Result<Vec<_>>>()
            .map(Self::new)
    }

    pub fn extend(&self, reps: &[RepresentationMatrix<T>], eps: T) -> Result<Self> {
        if reps.len() != self.layers.len() {
            return Err(Error::Shape(format!(
                "{} representation layers for {} stored layers",
                reps.len(),
                self.layers.len()
            )));
        }
        self.layers
            .iter()
            .zip(reps)
            .map(|(b, r)| extend_basis(b, r, eps))
            .collect::<Result<Vec<_>>>()
            .map(Self::new)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use ndarray::array;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn e(d: usize, i: usize) -> Array1<f64> {
        let mut v = Array1::zeros(d);
        v[i] = 1.0;
        v
    }

    fn basis_of(cols: &[Array1<f64>]) -> Basis<f64> {
        let d = cols[0].len();
        let mut m = Array2::zeros((d, cols.len()));
        for (j, c) in cols.iter().enumerate() {
            m.column_mut(j).assign(c);
        }
        Basis::from_columns(m, "test").unwrap()
    }

    fn random_matrix(rng: &mut ChaCha8Rng, r: usize, c: usize) -> Array2<f64> {
        Array2::from_shape_fn((r, c), |_| rng.random_range(-1.0..1.0))
    }

    fn random_basis(rng: &mut ChaCha8Rng, d: usize, k: usize) -> Basis<f64> {
        let m = random_matrix(rng, d, k);
        let b = Basis::orthonormalized(m.view(), "rand");
        assert_eq!(b.rank(), k);
        b
    }

    fn reps(rows: Array2<f64>) -> RepresentationMatrix<f64> {
        RepresentationMatrix::new(
            rows,
            Provenance {
                task: 1,
                mode: EncoderMode::Prompted,
            },
        )
        .unwrap()
    }

    /// Solves the normal equations by Gaussian elimination: B (BᵀB)⁻¹ Bᵀ v.
    fn least_squares_projection(b: ArrayView2<f64>, v: ArrayView1<f64>) -> Array1<f64> {
        let g = b.t().dot(&b);
        let rhs = b.t().dot(&v);
        let k = g.nrows();
        let mut aug = Array2::zeros((k, k + 1));
        aug.slice_mut(s![.., ..k]).assign(&g);
        aug.column_mut(k).assign(&rhs);
        for i in 0..k {
            let piv = aug[[i, i]];
            for j in i..=k {
                aug[[i, j]] /= piv;
            }
            for r in 0..k {
                if r != i {
                    let f = aug[[r, i]];
                    for j in i..=k {
                        aug[[r, j]] -= f * aug[[i, j]];
                    }
                }
            }
        }
        b.dot(&aug.column(k))
    }

    #[test]
    fn axis_projection() {
        let b = basis_of(&[e(2, 0)]);
        let v = array![3.0, 4.0];
        assert_eq!(project(v.view(), &b).unwrap(), array![3.0, 0.0]);
        assert_eq!(project_complement(v.view(), &b).unwrap(), array![0.0, 4.0]);
    }

    #[test]
    fn full_space_projection_is_identity() {
        let b = basis_of(&[e(2, 0), e(2, 1)]);
        let v = array![3.0, 4.0];
        assert_eq!(project(v.view(), &b).unwrap(), v);
    }

    #[test]
    fn contained_vector_has_zero_complement() {
        let b = basis_of(&[e(3, 0), e(3, 2)]);
        let v = array![1.5, 0.0, -2.0];
        let c = project_complement(v.view(), &b).unwrap();
        assert!(norm(c.view()) < 1e-15);
    }

    #[test]
    fn projection_matches_least_squares_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        for _ in 0..50 {
            let b = random_basis(&mut rng, 5, 2);
            let v = Array1::from_shape_fn(5, |_| rng.random_range(-2.0..2.0));
            let got = project(v.view(), &b).unwrap();
            let want = least_squares_projection(b.columns(), v.view());
            for (a, w) in got.iter().zip(want.iter()) {
                assert_abs_diff_eq!(a, w, epsilon = 1e-10);
            }
        }
    }

    #[test]
    fn decomposition_sums_back() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for _ in 0..100 {
            let d = rng.random_range(2..10);
            let k = rng.random_range(1..=d);
            let b = random_basis(&mut rng, d, k);
            let v = Array1::from_shape_fn(d, |_| rng.random_range(-3.0..3.0));
            let sum = project(v.view(), &b).unwrap() + project_complement(v.view(), &b).unwrap();
            for (a, w) in sum.iter().zip(v.iter()) {
                assert_abs_diff_eq!(a, w, epsilon = 1e-10);
            }
        }
    }

    #[test]
    fn dimension_mismatch_is_reported() {
        let b = basis_of(&[e(3, 0)]);
        let v = array![1.0, 2.0];
        assert!(matches!(
            project(v.view(), &b),
            Err(Error::DimensionMismatch {
                expected: 3,
                found: 2
            })
        ));
    }

    #[test]
    fn hfc_examples() {
        let a = hfc(array![1.0, 0.0].view(), array![1.0, 0.0].view()).unwrap();
        assert_eq!(a.angle, 0.0);
        let b = hfc(array![1.0, 1.0].view(), array![1.0, 0.0].view()).unwrap();
        assert_abs_diff_eq!(b.angle, std::f64::consts::FRAC_PI_4, epsilon = 1e-15);
        assert_abs_diff_eq!(b.grad_norm, 2f64.sqrt(), epsilon = 1e-15);
        let z = hfc(array![1.0, 1.0].view(), array![0.0, 0.0].view()).unwrap();
        assert_eq!(z.angle, std::f64::consts::FRAC_PI_2);
        assert!(matches!(
            hfc(array![0.0, 0.0].view(), array![1.0, 0.0].view()),
            Err(Error::ZeroGradient)
        ));
    }

    #[test]
    fn hfc_matches_direct_trig() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..100 {
            let b = random_basis(&mut rng, 8, 3);
            let g = Array1::from_shape_fn(8, |_| rng.random_range(-1.0..1.0));
            let p = project(g.view(), &b).unwrap();
            let mut num = 0.0;
            let mut gg = 0.0;
            let mut pp = 0.0;
            for i in 0..8 {
                num += g[i] * p[i];
                gg += g[i] * g[i];
                pp += p[i] * p[i];
            }
            let want = (num / (gg.sqrt() * pp.sqrt())).clamp(-1.0, 1.0).acos();
            let got = hfc(g.view(), p.view()).unwrap().angle;
            assert_abs_diff_eq!(got, want, epsilon = 1e-12);
        }
    }

    /// Cumulative-energy oracle over every k.
    fn oracle_rank(sigmas: &[f64], eps: f64) -> usize {
        let total: f64 = sigmas.iter().map(|s| s * s).sum();
        (1..=sigmas.len())
            .find(|&k| sigmas[..k].iter().map(|s| s * s).sum::<f64>() >= eps * total)
            .unwrap()
    }

    #[test]
    fn k_rank_energy_boundary() {
        assert_eq!(oracle_rank(&[2.0, 1.0], 0.8), 1);
        let r = reps(array![[2.0, 0.0], [0.0, 1.0]]);
        let b = k_rank_basis(&r, 0.8, "t").unwrap();
        assert_eq!(b.rank(), 1);
        assert_eq!(b.columns().column(0), array![1.0, 0.0]);
        assert_eq!(k_rank_basis(&r, 0.81, "t").unwrap().rank(), 2);
    }

    #[test]
    fn k_rank_full_energy_gives_rank() {
        let r = reps(array![
            [1.0, 0.0, 0.0],
            [0.0, 2.0, 0.0],
            [1.0, 1.0, 0.0],
            [3.0, 0.0, 0.0]
        ]);
        assert_eq!(k_rank_basis(&r, 1.0, "t").unwrap().rank(), 2);
    }

    #[test]
    fn k_rank_of_rank_one() {
        let u = array![0.6, 0.8, 0.0];
        let rows = Array2::from_shape_fn((5, 3), |(i, j)| (i as f64 + 1.0) * u[j]);
        for eps in [0.1, 0.5, 1.0] {
            let b = k_rank_basis(&reps(rows.clone()), eps, "t").unwrap();
            assert_eq!(b.rank(), 1);
            assert_abs_diff_eq!(b.columns()[[0, 0]], 0.6, epsilon = 1e-12);
        }
    }

    #[test]
    fn k_rank_rejects_zero_matrix_and_bad_eps() {
        let z = reps(Array2::zeros((3, 2)));
        assert!(matches!(
            k_rank_basis(&z, 0.5, "t"),
            Err(Error::DegenerateRepresentation)
        ));
        let r = reps(array![[1.0, 0.0]]);
        assert!(matches!(
            k_rank_basis(&r, 0.0, "t"),
            Err(Error::InvalidFraction(_))
        ));
        assert!(matches!(
            k_rank_basis(&r, 1.5, "t"),
            Err(Error::InvalidFraction(_))
        ));
    }

    #[test]
    fn extend_adds_residual_direction() {
        let old = basis_of(&[e(3, 0)]);
        let r = reps(array![[1.0, 0.0, 0.0], [0.0, 1.0, 0.0], [2.0, 1.0, 0.0]]);
        let b = extend_basis(&old, &r, 0.99).unwrap();
        assert_eq!(b.rank(), 2);
        assert_eq!(b.columns().column(0), e(3, 0));
        assert_abs_diff_eq!(b.columns()[[1, 1]].abs(), 1.0, epsilon = 1e-12);
    }

    #[test]
    fn extend_with_contained_rows_is_noop() {
        let old = basis_of(&[e(3, 0), e(3, 1)]);
        let r = reps(array![[1.0, 2.0, 0.0], [-1.0, 0.5, 0.0]]);
        let b = extend_basis(&old, &r, 0.99).unwrap();
        assert_eq!(b, old);
    }

    #[test]
    fn extend_checks_dimension() {
        let old = basis_of(&[e(3, 0)]);
        let r = reps(array![[1.0, 2.0]]);
        assert!(matches!(
            extend_basis(&old, &r, 0.9),
            Err(Error::DimensionMismatch { .. })
        ));
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(64))]

        #[test]
        fn projection_is_idempotent(seed in any::<u64>(), d in 2usize..12) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let k = rng.random_range(1..=d);
            let b = random_basis(&mut rng, d, k);
            let v = Array1::from_shape_fn(d, |_| rng.random_range(-5.0..5.0));
            let p = project(v.view(), &b).unwrap();
            let pp = project(p.view(), &b).unwrap();
            for (a, w) in p.iter().zip(pp.iter()) {
                prop_assert!((a - w).abs() < 1e-10);
            }
            let c = project_complement(v.view(), &b).unwrap();
            for col in b.columns().axis_iter(Axis(1)) {
                prop_assert!(dot(col, c.view()).abs() < 1e-8);
            }
        }

        #[test]
        fn nested_bases_never_increase_angle(seed in any::<u64>()) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let d = rng.random_range(4..20);
            let l = rng.random_range(1..d);
            let kb = rng.random_range(l + 1..=d);
            let big = random_basis(&mut rng, d, kb);
            let small = big.truncated(l);
            let v = Array1::from_shape_fn(d, |_| rng.random_range(-1.0..1.0));
            let a1 = hfc(v.view(), project(v.view(), &small).unwrap().view()).unwrap();
            let a2 = hfc(v.view(), project(v.view(), &big).unwrap().view()).unwrap();
            prop_assert!(a1.angle + 1e-9 >= a2.angle);
        }

        #[test]
        fn complement_angles_sum_to_right_angle(seed in any::<u64>()) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let d = rng.random_range(3..16);
            let kb = rng.random_range(1..d);
            let b = random_basis(&mut rng, d, kb);
            let v = Array1::from_shape_fn(d, |_| rng.random_range(-1.0..1.0));
            let p = project(v.view(), &b).unwrap();
            let c = project_complement(v.view(), &b).unwrap();
            let sum = hfc(v.view(), p.view()).unwrap().angle + hfc(v.view(), c.view()).unwrap().angle;
            prop_assert!((sum - std::f64::consts::FRAC_PI_2).abs() < 1e-9);
        }

        #[test]
        fn k_rank_is_minimal(seed in any::<u64>()) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let n = rng.random_range(2..20);
            let d = rng.random_range(2..10);
            let eps = rng.random_range(0.3..1.0);
            let r = random_matrix(&mut rng, n, d);
            let b = k_rank_basis(&reps(r.clone()), eps, "t").unwrap();
            let total = linalg::frobenius_sq(r.view());
            let captured = |k: usize| linalg::frobenius_sq(r.dot(&b.columns().slice(s![.., ..k])).view());
            prop_assert!(captured(b.rank()) >= eps * total * (1.0 - 1e-12));
            if b.rank() > 1 {
                prop_assert!(captured(b.rank() - 1) < eps * total);
            }
            prop_assert!(b.validate().is_ok());
        }
    }
}
