//! Dense vector/matrix arithmetic and the numerically careful primitives the
//! rest of the crate builds on. Everything is 64-bit: the gradient oracle
//! needs ~1e-5 relative accuracy against finite differences, which 32-bit
//! arithmetic cannot deliver.

use crate::error::{Error, Result};

/// Row-major dense matrix of `f64`.
#[derive(Debug, Clone, PartialEq)]
pub struct Matrix {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl Matrix {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    pub fn from_vec(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(Error::DimensionMismatch {
                what: "matrix data",
                expected: rows * cols,
                got: data.len(),
            });
        }
        Ok(Self { rows, cols, data })
    }

    pub fn from_fn(rows: usize, cols: usize, mut f: impl FnMut(usize, usize) -> f64) -> Self {
        let mut data = Vec::with_capacity(rows * cols);
        for r in 0..rows {
            for c in 0..cols {
                data.push(f(r, c));
            }
        }
        Self { rows, cols, data }
    }

    pub fn identity(n: usize) -> Self {
        Self::from_fn(n, n, |r, c| if r == c { 1.0 } else { 0.0 })
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn row(&self, r: usize) -> &[f64] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn row_mut(&mut self, r: usize) -> &mut [f64] {
        &mut self.data[r * self.cols..(r + 1) * self.cols]
    }

    /// y = A x.
    pub fn matvec(&self, x: &[f64]) -> Result<Vec<f64>> {
        if x.len() != self.cols {
            return Err(Error::DimensionMismatch {
                what: "matvec input",
                expected: self.cols,
                got: x.len(),
            });
        }
        Ok((0..self.rows).map(|r| dot(self.row(r), x)).collect())
    }

    /// x = Aᵀ y, computed by streaming rows so the matrix is read once.
    pub fn tr_matvec(&self, y: &[f64]) -> Result<Vec<f64>> {
        if y.len() != self.rows {
            return Err(Error::DimensionMismatch {
                what: "transposed matvec input",
                expected: self.rows,
                got: y.len(),
            });
        }
        let mut out = vec![0.0; self.cols];
        for (r, &yr) in y.iter().enumerate() {
            axpy(yr, self.row(r), &mut out);
        }
        Ok(out)
    }

    /// A Aᵀ, used to verify row orthonormality.
    pub fn gram(&self) -> Matrix {
        let mut g = Matrix::zeros(self.rows, self.rows);
        for i in 0..self.rows {
            for j in 0..self.rows {
                g.row_mut(i)[j] = dot(self.row(i), self.row(j));
            }
        }
        g
    }
}

pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    debug_assert_eq!(a.len(), b.len());
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// out += c * a
pub fn axpy(c: f64, a: &[f64], out: &mut [f64]) {
    debug_assert_eq!(a.len(), out.len());
    for (o, &x) in out.iter_mut().zip(a) {
        *o += c * x;
    }
}

pub fn l2_norm(v: &[f64]) -> f64 {
    dot(v, v).sqrt()
}

/// Index of the largest entry; ties break toward the lowest index.
pub fn argmax(v: &[f64]) -> usize {
    let mut best = 0;
    for (i, &x) in v.iter().enumerate().skip(1) {
        if x > v[best] {
            best = i;
        }
    }
    best
}

/// Orthonormalizes the rows of `a` (modified Gram–Schmidt, two passes per
/// row). The result spans the same row space and satisfies Z Zᵀ = I to
/// well under 1e-12 for any full-rank input with rows ≤ cols.
pub fn row_orthonormalize(a: &Matrix) -> Result<Matrix> {
    if a.rows > a.cols {
        return Err(Error::DimensionMismatch {
            what: "row_orthonormalize (rows must be <= cols)",
            expected: a.cols,
            got: a.rows,
        });
    }
    let mut z = a.clone();
    let cols = z.cols;
    for i in 0..z.rows {
        for _ in 0..2 {
            let (head, tail) = z.data.split_at_mut(i * cols);
            let ri = &mut tail[..cols];
            for j in 0..i {
                let rj = &head[j * cols..(j + 1) * cols];
                let d = dot(ri, rj);
                axpy(-d, rj, ri);
            }
        }
        let nrm = l2_norm(z.row(i));
        if nrm < 1e-10 {
            return Err(Error::RankDeficient {
                row: i,
                residual: nrm,
            });
        }
        for v in z.row_mut(i) {
            *v /= nrm;
        }
    }
    Ok(z)
}

/// Numerically stable softmax (max-subtraction). Entries are positive and
/// sum to 1.
pub fn softmax(v: &[f64]) -> Vec<f64> {
    let max = v.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = v.iter().map(|&x| (x - max).exp()).collect();
    let sum: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / sum).collect()
}

/// log Σ exp(vᵢ), stable for any finite input.
pub fn log_sum_exp(v: &[f64]) -> f64 {
    let max = v.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    max + v.iter().map(|&x| (x - max).exp()).sum::<f64>().ln()
}

/// log₁₀(a / b) as log₁₀(a) − log₁₀(b). Returns −∞ when a = 0 (documented
/// sentinel for a vanished numerator); b must be positive.
pub fn log10_ratio(a: f64, b: f64) -> Result<f64> {
    if b <= 0.0 || !b.is_finite() {
        return Err(Error::InvalidDenominator { value: b });
    }
    if a == 0.0 {
        return Ok(f64::NEG_INFINITY);
    }
    Ok(a.log10() - b.log10())
}

/// |det A| via LU with partial pivoting; intended for the small Jacobians the
/// volume checker assembles.
pub fn determinant(m: &Matrix) -> Result<f64> {
    if m.rows != m.cols {
        return Err(Error::DimensionMismatch {
            what: "determinant (square required)",
            expected: m.rows,
            got: m.cols,
        });
    }
    let n = m.rows;
    let mut a = m.data.clone();
    let mut det = 1.0;
    for col in 0..n {
        let mut pivot = col;
        let mut best = a[col * n + col].abs();
        for r in col + 1..n {
            let v = a[r * n + col].abs();
            if v > best {
                best = v;
                pivot = r;
            }
        }
        if best == 0.0 {
            return Ok(0.0);
        }
        if pivot != col {
            for c in 0..n {
                a.swap(col * n + c, pivot * n + c);
            }
            det = -det;
        }
        let p = a[col * n + col];
        det *= p;
        for r in col + 1..n {
            let factor = a[r * n + col] / p;
            if factor != 0.0 {
                for c in col..n {
                    a[r * n + c] -= factor * a[col * n + c];
                }
            }
        }
    }
    Ok(det)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::SeededRng;
    use proptest::prelude::*;

    fn max_abs_gram_error(z: &Matrix) -> f64 {
        let g = z.gram();
        let mut worst = 0.0f64;
        for i in 0..g.rows() {
            for j in 0..g.cols() {
                let target = if i == j { 1.0 } else { 0.0 };
                worst = worst.max((g.row(i)[j] - target).abs());
            }
        }
        worst
    }

    #[test]
    fn orthonormalize_identity_unchanged() {
        let z = row_orthonormalize(&Matrix::identity(2)).unwrap();
        assert_eq!(z, Matrix::identity(2));
    }

    #[test]
    fn orthonormalize_scales_diagonal() {
        let a = Matrix::from_vec(2, 2, vec![2.0, 0.0, 0.0, 3.0]).unwrap();
        let z = row_orthonormalize(&a).unwrap();
        assert_eq!(z, Matrix::identity(2));
    }

    #[test]
    fn orthonormalize_random_wide() {
        let mut rng = SeededRng::new(11);
        for &(rows, cols) in &[(10usize, 784usize), (10, 4000)] {
            let a = Matrix::from_fn(rows, cols, |_, _| rng.uniform(-1.0, 1.0));
            let z = row_orthonormalize(&a).unwrap();
            assert!(max_abs_gram_error(&z) < 1e-12);
        }
    }

    #[test]
    fn orthonormalize_rejects_rank_deficient() {
        let a = Matrix::from_vec(2, 3, vec![1.0, 2.0, 3.0, 2.0, 4.0, 6.0]).unwrap();
        match row_orthonormalize(&a) {
            Err(Error::RankDeficient { row: 1, .. }) => {}
            other => panic!("expected RankDeficient, got {other:?}"),
        }
    }

    #[test]
    fn softmax_symmetry_and_stability() {
        let p = softmax(&[0.0, 0.0]);
        assert!((p[0] - 0.5).abs() < 1e-15 && (p[1] - 0.5).abs() < 1e-15);

        let p = softmax(&[1000.0, 0.0]);
        assert!(p.iter().all(|x| x.is_finite()));
        assert!(p[0] > 1.0 - 1e-12 && p[1] < 1e-12);
    }

    #[test]
    fn softmax_matches_direct_ratio() {
        let p = softmax(&[1.0, 2.0, 3.0]);
        let raw: Vec<f64> = [1.0f64, 2.0, 3.0].iter().map(|x| x.exp()).collect();
        let sum: f64 = raw.iter().sum();
        for (got, want) in p.iter().zip(raw.iter().map(|r| r / sum)) {
            assert!((got - want).abs() < 1e-15);
        }
        assert!((p.iter().sum::<f64>() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn log10_ratio_cases() {
        assert_eq!(log10_ratio(1.0, 1.0).unwrap(), 0.0);
        assert_eq!(log10_ratio(10.0, 1.0).unwrap(), 1.0);
        // The slope arithmetic this feeds: 2.6e-4 is ~10^-3.585.
        assert!((log10_ratio(2.6e-4, 1.0).unwrap() + 3.585).abs() < 1e-3);
        assert_eq!(log10_ratio(0.0, 2.0).unwrap(), f64::NEG_INFINITY);
        assert!(matches!(
            log10_ratio(1.0, 0.0),
            Err(Error::InvalidDenominator { .. })
        ));
        assert!(matches!(
            log10_ratio(1.0, -3.0),
            Err(Error::InvalidDenominator { .. })
        ));
    }

    #[test]
    fn determinant_known_values() {
        let m = Matrix::from_vec(2, 2, vec![2.0, 1.0, 1.0, 3.0]).unwrap();
        assert!((determinant(&m).unwrap() - 5.0).abs() < 1e-12);
        let singular = Matrix::from_vec(2, 2, vec![1.0, 2.0, 2.0, 4.0]).unwrap();
        assert_eq!(determinant(&singular).unwrap(), 0.0);
        // Permutation matrix: determinant -1, magnitude 1.
        let p = Matrix::from_vec(2, 2, vec![0.0, 1.0, 1.0, 0.0]).unwrap();
        assert!((determinant(&p).unwrap() + 1.0).abs() < 1e-15);
    }

    proptest! {
        #[test]
        fn softmax_shift_invariant(
            v in proptest::collection::vec(-50.0f64..50.0, 1..12),
            c in -100.0f64..100.0,
        ) {
            let base = softmax(&v);
            let shifted: Vec<f64> = v.iter().map(|x| x + c).collect();
            let moved = softmax(&shifted);
            for (a, b) in base.iter().zip(&moved) {
                prop_assert!((a - b).abs() < 1e-12);
            }
        }

        #[test]
        fn matvec_roundtrip_transpose(seed in 0u64..1000) {
            let mut rng = SeededRng::new(seed);
            let a = Matrix::from_fn(3, 5, |_, _| rng.uniform(-1.0, 1.0));
            let x: Vec<f64> = (0..5).map(|_| rng.uniform(-1.0, 1.0)).collect();
            let y: Vec<f64> = (0..3).map(|_| rng.uniform(-1.0, 1.0)).collect();
            // <Ax, y> == <x, Aᵀy>
            let lhs = dot(&a.matvec(&x).unwrap(), &y);
            let rhs = dot(&x, &a.tr_matvec(&y).unwrap());
            prop_assert!((lhs - rhs).abs() < 1e-12);
        }
    }
}
